#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "flexmol/rng.hpp"
#include "flexmol/tensor.hpp"

using namespace flexmol;

namespace {

Tensor random_tensor(long r, long c, Rng& rng, double scale = 1.0) {
  Tensor t(r, c);
  for (long k = 0; k < t.size(); ++k) t[k] = scale * rng.normal();
  return t;
}

// Checks d(loss)/d(input) against central finite differences for a scalar
// function built on a fresh graph per evaluation.
void check_grad(const std::vector<Tensor>& inputs,
                const std::function<Value(Graph&, const std::vector<Value>&)>& fn,
                double tol = 1e-7, double h = 1e-6) {
  Graph g;
  std::vector<Value> leaves;
  for (const Tensor& t : inputs) leaves.push_back(g.leaf(t));
  Value loss = fn(g, leaves);
  g.backward(loss);

  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Tensor& analytic = g.grad(leaves[i]);
    for (long k = 0; k < inputs[i].size(); ++k) {
      auto eval = [&](double delta) {
        std::vector<Tensor> shifted = inputs;
        shifted[i][k] += delta;
        Graph g2;
        std::vector<Value> ls;
        for (const Tensor& t : shifted) ls.push_back(g2.leaf(t));
        return g2.val(fn(g2, ls)).item();
      };
      const double fd = (eval(h) - eval(-h)) / (2 * h);
      const double a = analytic[k];
      const double err = std::abs(a - fd) / std::max({1.0, std::abs(a), std::abs(fd)});
      CAPTURE(i);
      CAPTURE(k);
      CHECK(err < tol);
    }
  }
}

}  // namespace

TEST_CASE("elementwise ops match finite differences") {
  Rng rng(11);
  Tensor a = random_tensor(3, 4, rng);
  Tensor b = random_tensor(3, 4, rng);
  check_grad({a, b}, [](Graph& g, const std::vector<Value>& v) {
    Value x = g.mul(g.add(v[0], v[1]), g.sub(v[0], g.scale(v[1], 0.3)));
    return g.sum_all(g.mul(x, x));
  });
}

TEST_CASE("unary ops match finite differences") {
  Rng rng(12);
  Tensor a = random_tensor(2, 5, rng, 0.8);
  check_grad({a}, [](Graph& g, const std::vector<Value>& v) {
    Value x = g.gelu(v[0]);
    x = g.add(x, g.softplus(v[0]));
    x = g.add(x, g.exp_(g.scale(v[0], 0.5)));
    return g.sum_all(x);
  });

  // strictly positive inputs for log/sqrt/reciprocal
  Tensor p(2, 5);
  for (long k = 0; k < p.size(); ++k) p[k] = 0.5 + rng.uniform();
  check_grad({p}, [](Graph& g, const std::vector<Value>& v) {
    Value x = g.add(g.log_(v[0]), g.sqrt_(v[0]));
    x = g.add(x, g.reciprocal(v[0]));
    return g.sum_all(x);
  });
}

TEST_CASE("huber values and gradient") {
  Tensor a(1, 4);
  a[0] = 0.3;
  a[1] = -0.5;
  a[2] = 2.0;
  a[3] = -3.0;
  Graph g;
  Value v = g.leaf(a);
  Value h = g.huber(v, 1.0);
  CHECK(g.val(h)[0] == doctest::Approx(0.045));
  CHECK(g.val(h)[1] == doctest::Approx(0.125));
  CHECK(g.val(h)[2] == doctest::Approx(1.5));
  CHECK(g.val(h)[3] == doctest::Approx(2.5));
  check_grad({a}, [](Graph& g2, const std::vector<Value>& v2) {
    return g2.sum_all(g2.huber(v2[0], 1.0));
  });
}

TEST_CASE("matmul transpose slice concat gather") {
  Rng rng(13);
  Tensor a = random_tensor(3, 4, rng);
  Tensor b = random_tensor(4, 2, rng);
  check_grad({a, b}, [](Graph& g, const std::vector<Value>& v) {
    Value c = g.matmul(v[0], v[1]);        // 3x2
    Value t = g.transpose(c);              // 2x3
    Value s = g.slice_cols(t, 1, 3);       // 2x2
    Value cc = g.concat_cols({s, s});      // 2x4
    Value rr = g.concat_rows({cc, cc});    // 4x4
    return g.sum_all(g.mul(rr, rr));
  });

  Tensor table = random_tensor(5, 3, rng);
  check_grad({table}, [](Graph& g, const std::vector<Value>& v) {
    Value rows = g.gather_rows(v[0], {0, 2, 2, 4});
    return g.sum_all(g.mul(rows, rows));
  });
}

TEST_CASE("softmax logsumexp layernorm") {
  Rng rng(14);
  Tensor a = random_tensor(4, 6, rng, 2.0);
  check_grad({a}, [](Graph& g, const std::vector<Value>& v) {
    Value s = g.softmax_rows(v[0]);
    Value w = g.constant(Tensor::full(4, 6, 0.7));
    return g.sum_all(g.mul(s, g.mul(w, s)));
  });
  check_grad({a}, [](Graph& g, const std::vector<Value>& v) {
    return g.sum_all(g.logsumexp_rows(v[0]));
  });
  check_grad({a}, [](Graph& g, const std::vector<Value>& v) {
    Value n = g.layer_norm_rows(v[0]);
    Value w = g.constant(Tensor::full(4, 6, 0.3));
    return g.sum_all(g.mul(n, g.mul(w, n)));
  }, 2e-6);
}

TEST_CASE("softmax rows sum to one and ignore -1e9 entries") {
  Tensor a(2, 3);
  a(0, 0) = 0.2;
  a(0, 1) = -1e9;
  a(0, 2) = 1.1;
  a(1, 0) = -1e9;
  a(1, 1) = -1e9;
  a(1, 2) = -1e9;
  Graph g;
  Value s = g.softmax_rows(g.constant(a));
  const Tensor& y = g.val(s);
  CHECK(y(0, 1) == 0.0);
  CHECK(y(0, 0) + y(0, 2) == doctest::Approx(1.0));
  // fully-masked row degrades to uniform, not NaN
  CHECK(std::isfinite(y(1, 0)));
  CHECK(y(1, 0) == doctest::Approx(1.0 / 3));
}

TEST_CASE("detach stops gradient and replay substitutes recorded values") {
  Tensor a = Tensor::full(1, 3, 2.0);
  Graph g;
  Value v = g.leaf(a);
  Value target = g.detach(g.scale(v, 3.0));
  Value diff = g.sub(v, target);
  Value loss = g.sum_all(g.mul(diff, diff));
  g.backward(loss);
  // d/dv of sum (v - c)^2 with c frozen at 3v0: 2(v - 3v) = -4v = -8
  for (long k = 0; k < 3; ++k) CHECK(g.grad(v)[k] == doctest::Approx(-8.0));

  // record + replay path
  Graph gr;
  gr.start_detach_record();
  Value vr = gr.leaf(a);
  Value t2 = gr.detach(gr.scale(vr, 3.0));
  Value d2 = gr.sub(vr, t2);
  (void)gr.sum_all(gr.mul(d2, d2));
  auto log = gr.detach_log();
  CHECK(log.size() == 1);

  Tensor shifted = Tensor::full(1, 3, 2.5);
  Graph gp;
  gp.set_detach_replay(&log);
  Value vp = gp.leaf(shifted);
  Value tp = gp.detach(gp.scale(vp, 3.0));
  // replayed detach must yield the ORIGINAL 6.0, not 7.5
  CHECK(gp.val(tp)[0] == doctest::Approx(6.0));
}

TEST_CASE("broadcast helpers") {
  Graph g;
  Tensor row(1, 3);
  row[0] = 1;
  row[1] = 2;
  row[2] = 3;
  Value r = g.constant(row);
  Value b = ops::broadcast_rows(g, r, 2);
  CHECK(g.val(b).rows() == 2);
  CHECK(g.val(b)(1, 2) == 3.0);
  Tensor col(2, 1);
  col[0] = 5;
  col[1] = 7;
  Value c = ops::broadcast_cols(g, g.constant(col), 3);
  CHECK(g.val(c)(1, 0) == 7.0);
  CHECK(g.val(c)(0, 2) == 5.0);
}
