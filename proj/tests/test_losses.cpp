#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "flexmol/losses.hpp"
#include "flexmol/pretrain.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace flexmol;
using namespace testutil;

TEST_CASE("pool: identical rows normalize; padding rows do not matter; unit norm") {
  const ModelConfig cfg = small_config();
  ModelParameters params = ModelParameters::init(cfg, 1);
  Rng rng(2);
  const Molecule small = tree_molecule(rng, 3);
  const Molecule big = tree_molecule(rng, 5);
  const Batch batch = collate({featurize(small, cfg.feat), featurize(big, cfg.feat)});
  const RecordTensors rt = prepare_record(batch.items[0], cfg);

  Graph g;
  ModelForward mf(g, params);
  Tensor stream(rt.n, cfg.d);
  for (long i = 0; i < 3; ++i)
    for (long j = 0; j < cfg.d; ++j) stream(i, j) = 0.5 * static_cast<double>(j) - 1.0;
  // garbage on the padded rows must not leak into the pool
  for (long i = 3; i < rt.n; ++i)
    for (long j = 0; j < cfg.d; ++j) stream(i, j) = 1e6;
  Value pooled = mf.pool(g.constant(stream), rt);
  double norm = 0, dot = 0, self = 0;
  for (long j = 0; j < cfg.d; ++j) {
    const double v = g.val(pooled)(0, j);
    norm += v * v;
    dot += v * stream(0, j);
    self += stream(0, j) * stream(0, j);
  }
  CHECK(std::abs(norm - 1.0) < 1e-9);
  CHECK(std::abs(dot - std::sqrt(self)) < 1e-9);  // parallel to the common row
}

TEST_CASE("info_nce: fixed points and the B=2 orthogonal value") {
  Graph g;
  Tensor x1(1, 2);
  x1(0, 0) = 1.0;
  CHECK(g.val(info_nce(g, g.constant(x1), g.constant(x1), 1.0)).item() == 0.0);

  Tensor X(2, 2), Y(2, 2);
  X(0, 0) = 1.0;
  X(1, 1) = 1.0;
  Y(0, 0) = 1.0;
  Y(1, 1) = 1.0;
  const double loss = g.val(info_nce(g, g.constant(X), g.constant(Y), 1.0)).item();
  CHECK(std::abs(loss - std::log(1.0 + std::exp(-1.0))) < 1e-9);

  // permuting the batch leaves the loss unchanged
  Tensor Xp(2, 2), Yp(2, 2);
  Xp(0, 1) = 1.0;
  Xp(1, 0) = 1.0;
  Yp(0, 1) = 1.0;
  Yp(1, 0) = 1.0;
  const double loss_p = g.val(info_nce(g, g.constant(Xp), g.constant(Yp), 1.0)).item();
  CHECK(loss_p == doctest::Approx(loss).epsilon(1e-12));
}

TEST_CASE("info_nce invariant under joint orthogonal transformation") {
  Rng rng(5);
  const long B = 6, d = 8;
  Tensor X(B, d), Y(B, d);
  for (long k = 0; k < X.size(); ++k) {
    X[k] = rng.normal();
    Y[k] = rng.normal();
  }
  // row-normalize
  for (Tensor* t : {&X, &Y})
    for (long i = 0; i < B; ++i) {
      double n = 0;
      for (long j = 0; j < d; ++j) n += (*t)(i, j) * (*t)(i, j);
      n = std::sqrt(n);
      for (long j = 0; j < d; ++j) (*t)(i, j) /= n;
    }
  Graph g;
  const double base = g.val(info_nce(g, g.constant(X), g.constant(Y), 0.7)).item();

  // orthogonal transform: random Householder reflection
  Tensor v(1, d);
  double vn = 0;
  for (long j = 0; j < d; ++j) {
    v[j] = rng.normal();
    vn += v[j] * v[j];
  }
  const auto reflect = [&](const Tensor& a) {
    Tensor out = a;
    for (long i = 0; i < B; ++i) {
      double dot = 0;
      for (long j = 0; j < d; ++j) dot += a(i, j) * v[j];
      for (long j = 0; j < d; ++j) out(i, j) = a(i, j) - 2.0 * dot * v[j] / vn;
    }
    return out;
  };
  const double reflected =
      g.val(info_nce(g, g.constant(reflect(X)), g.constant(reflect(Y)), 0.7)).item();
  CHECK(std::abs(base - reflected) < 1e-6);
}

TEST_CASE("loss_ra: fixed point, unit residual, FD gradient") {
  const ModelConfig cfg = small_config();
  Rng rng(6);
  Molecule solo;
  solo.id = "solo";
  solo.atomic_numbers = {6};
  solo.formal_charges = {0};
  solo.bonds = std::vector<Bond>{};
  solo.conformers = std::vector<Tensor>{Tensor(1, 3)};
  const RecordTensors rt = paired_record(solo, cfg);

  Graph g;
  Tensor x(1, cfg.d), xt(1, cfg.d), y(1, cfg.d), yt(1, cfg.d);
  for (long j = 0; j < cfg.d; ++j) y(0, j) = yt(0, j) = rng.normal();
  // x - x~ = (1, 0, ...)
  x(0, 0) = 1.0;
  Value v = loss_ra(g, g.constant(x), g.constant(xt), g.constant(y), g.constant(yt), rt);
  CHECK(g.val(v).item() == doctest::Approx(1.0));

  Value zero = loss_ra(g, g.constant(x), g.constant(x), g.constant(y), g.constant(y), rt);
  CHECK(g.val(zero).item() == 0.0);

  // gradient w.r.t. x~ is -2(x - x~)/n
  Graph g2;
  Value xt_leaf = g2.leaf(xt);
  Value l = loss_ra(g2, g2.constant(x), xt_leaf, g2.constant(y), g2.constant(yt), rt);
  g2.backward(l);
  CHECK(g2.grad(xt_leaf)(0, 0) == doctest::Approx(-2.0));
  CHECK(g2.grad(xt_leaf)(0, 1) == doctest::Approx(0.0));
}

TEST_CASE("loss_c: fixed point, single pair residual normalization, stop gradient") {
  Rng rng(7);
  const ModelConfig cfg = small_config();
  const Molecule mol = tree_molecule(rng, 3);
  const RecordTensors rt = paired_record(mol, cfg);
  ModelParameters params = ModelParameters::init(cfg, 8);

  Graph g;
  ModelForward mf(g, params);
  Stage1Forward s = mf.forward_paired(rt);

  // fixed point: x_hat == x_F etc gives exactly zero
  Stage1Forward fixed = s;
  fixed.x_hat = s.x_F;
  fixed.y_hat = s.y_F;
  fixed.P_hat = s.P;
  fixed.Q_hat = s.Q;
  CHECK(g.val(loss_c(g, fixed, rt)).item() == 0.0);

  // one unit residual at one pair position in one channel -> 1/n^2
  Stage1Forward bumped = fixed;
  Tensor unit(rt.n, rt.n);
  unit(0, 1) = 1.0;
  bumped.P_hat.heads[0] = g.add(fixed.P_hat.heads[0], g.constant(unit));
  CHECK(g.val(loss_c(g, bumped, rt)).item() ==
        doctest::Approx(1.0 / static_cast<double>(rt.n_real * rt.n_real)));

  // stop-gradient: targets detached -> gradients differ from the live-target
  // variant, which must see cancellation at the fixed point
  Graph ga;
  ModelForward mfa(ga, params);
  Stage1Forward sa = mfa.forward_paired(rt);
  ga.backward(loss_c(ga, sa, rt));
  const Tensor g_detached = ga.grad(mfa.param("enc.0.attn.wq"));

  // live targets: replace detach by identity via symmetric construction
  Graph gb;
  ModelForward mfb(gb, params);
  Stage1Forward sb = mfb.forward_paired(rt);
  Value live = -1;
  {
    Value tx = gb.scale(masked_sq_diff_sum(gb, sb.x_hat, sb.x_F, rt.mask_stream),
                        1.0 / static_cast<double>(rt.n_real));
    Value ty = gb.scale(masked_sq_diff_sum(gb, sb.y_hat, sb.y_F, rt.mask_stream),
                        1.0 / static_cast<double>(rt.n_real));
    live = gb.add(tx, ty);
  }
  gb.backward(live);
  const Tensor g_live = gb.grad(mfb.param("enc.0.attn.wq"));
  CHECK(max_abs_diff(g_detached, g_live) > 1e-12);
}

TEST_CASE("loss_masked_atom: saturated, uniform, random oracle") {
  Graph g;
  const long V = 11;
  // saturated one-hot logits at scale 1000 -> loss ~ 0
  Tensor sat(2, V);
  sat(0, 3) = 1000.0;
  sat(1, 7) = 1000.0;
  CHECK(g.val(loss_masked_atom(g, g.constant(sat), {0, 1}, {3, 7})).item() < 1e-12);

  Tensor uniform(3, V);
  CHECK(g.val(loss_masked_atom(g, g.constant(uniform), {0, 2}, {5, 1})).item() ==
        doctest::Approx(std::log(static_cast<double>(V))));

  Rng rng(9);
  Tensor logits(4, V);
  std::vector<std::vector<double>> rows(4, std::vector<double>(V));
  for (long i = 0; i < 4; ++i)
    for (long v = 0; v < V; ++v) rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(v)] =
        logits(i, v) = 3.0 * rng.normal();
  const std::vector<long> targets{1, 0, 10, 4};
  const double got = g.val(loss_masked_atom(g, g.constant(logits), {0, 1, 2, 3}, targets)).item();
  CHECK(std::abs(got - oracles::cross_entropy(rows, targets)) < 1e-9);

  CHECK_THROWS_AS(loss_masked_atom(g, g.constant(uniform), {}, {}), ValidationError);
}

TEST_CASE("loss_pos: fixed point, quadratic branch value, masking invariance") {
  Graph g;
  Tensor truth(4, 3);
  Tensor recovered = truth;
  CHECK(g.val(loss_pos(g, g.constant(recovered), truth, {1, 2})).item() < 1e-12);

  // residual 0.5 on one coordinate of one corrupted atom
  Tensor r2 = truth;
  r2(1, 0) = 0.5;
  const double expect = 0.125 / (3.0 * 2.0);
  CHECK(g.val(loss_pos(g, g.constant(r2), truth, {1, 2})).item() ==
        doctest::Approx(expect).epsilon(1e-9));

  // changing an uncorrupted atom's prediction is invisible
  Tensor r3 = r2;
  r3(0, 1) = 99.0;
  r3(3, 2) = -50.0;
  CHECK(g.val(loss_pos(g, g.constant(r3), truth, {1, 2})).item() ==
        doctest::Approx(expect).epsilon(1e-12));

  // linear branch agrees with the scalar formula: residual 2.0 on one atom
  Tensor r4 = truth;
  r4(2, 1) = 2.0;
  const double huber_linear = 1.0 * (2.0 - 0.5);
  CHECK(g.val(loss_pos(g, g.constant(r4), truth, {2})).item() ==
        doctest::Approx(huber_linear / 3.0).epsilon(1e-9));
}

TEST_CASE("loss_spd: uniform and oracle values") {
  Graph g;
  const long classes = 10;
  Tensor uniform(4, classes);
  CHECK(g.val(loss_spd(g, g.constant(uniform), {0, 3}, {2, 9})).item() ==
        doctest::Approx(std::log(10.0)));

  Rng rng(10);
  Tensor logits(6, classes);
  std::vector<std::vector<double>> rows(3, std::vector<double>(classes));
  const std::vector<long> sel{1, 4, 5};
  const std::vector<long> targets{0, 7, 3};
  for (long i = 0; i < 6; ++i)
    for (long c = 0; c < classes; ++c) logits(i, c) = 2.0 * rng.normal();
  for (std::size_t i = 0; i < sel.size(); ++i)
    for (long c = 0; c < classes; ++c)
      rows[i][static_cast<std::size_t>(c)] = logits(sel[i], c);
  const double got = g.val(loss_spd(g, g.constant(logits), sel, targets)).item();
  CHECK(std::abs(got - oracles::cross_entropy(rows, targets)) < 1e-9);
}

TEST_CASE("stage-1 total equals the weighted term sum; single-term weights isolate") {
  Rng rng(11);
  const ModelConfig cfg = small_config();
  ModelParameters params = ModelParameters::init(cfg, 12);
  const auto mols = random_dataset(rng, 3);
  const auto recs = featurize_all(mols, cfg.feat);
  Batch batch = collate(recs);
  TrainConfig tc;
  Rng crng(13);
  apply_corruption(batch, tc, cfg, crng);
  std::vector<RecordTensors> rts;
  for (const CollatedRecord& rec : batch.items) rts.push_back(prepare_record(rec, cfg));

  LossWeights w;
  w.w_cl = 0.5;
  w.w_ra = 2.0;
  w.w_c = 0.25;
  w.w_atom = 1.5;
  w.w_pos = 3.0;
  w.w_spd = 0.75;
  Graph g;
  ModelForward mf(g, params);
  LossGraph lg = build_stage1_loss(mf, rts, w);
  const LossReport rep = lg.report(g);
  const double recomputed = 0.5 * rep.terms.at("cl") + 2.0 * rep.terms.at("ra") +
                            0.25 * rep.terms.at("c") + 1.5 * rep.terms.at("atom") +
                            3.0 * rep.terms.at("pos") + 0.75 * rep.terms.at("spd");
  CHECK(std::abs(rep.total - recomputed) < 1e-9 * std::max(1.0, std::abs(rep.total)));

  // only w_ra active -> total = w_ra * ra
  LossWeights only;
  only.w_cl = only.w_c = only.w_atom = only.w_pos = only.w_spd = 0.0;
  only.w_ra = 2.0;
  Graph g2;
  ModelForward mf2(g2, params);
  const LossReport rep2 = build_stage1_loss(mf2, rts, only).report(g2);
  CHECK(rep2.total == doctest::Approx(2.0 * rep2.terms.at("ra")).epsilon(1e-12));
}

TEST_CASE("stage-1 losses are invariant under rigid motion of the conformer") {
  Rng rng(14);
  const ModelConfig cfg = small_config();
  ModelParameters params = ModelParameters::init(cfg, 15);
  const Molecule mol = tree_molecule(rng, 5);

  // corrupt once; apply the same corruption to the moved copy by reusing the
  // collated record and transforming both coordinate sets
  Batch batch = collate({featurize(mol, cfg.feat)});
  TrainConfig tc;
  Rng crng(16);
  apply_corruption(batch, tc, cfg, crng);

  for (int trial = 0; trial < 5; ++trial) {
    const auto rot = oracles::random_rotation(rng);
    const std::array<double, 3> t{rng.normal(), rng.normal(), rng.normal()};
    Batch moved = batch;
    *moved.items[0].coords_in = rotate_translate(*batch.items[0].coords_in, rot, t);
    *moved.items[0].coords_true = rotate_translate(*batch.items[0].coords_true, rot, t);

    LossWeights w;
    Graph g0, g1;
    ModelForward mf0(g0, params), mf1(g1, params);
    const LossReport r0 =
        build_stage1_loss(mf0, {prepare_record(batch.items[0], cfg)}, w).report(g0);
    const LossReport r1 =
        build_stage1_loss(mf1, {prepare_record(moved.items[0], cfg)}, w).report(g1);
    for (const auto& [name, v0] : r0.terms) {
      const double v1 = r1.terms.at(name);
      CHECK(std::abs(v0 - v1) / std::max({1e-9, std::abs(v0), std::abs(v1)}) < 1e-5);
    }
  }
}

TEST_CASE("stage-2 fixed point: matching decoder output and perfect heads give zero") {
  // construct directly: recon term with dec == tilde is zero, and saturated
  // heads drive the CE terms to zero; exercised end-to-end in the acceptance
  // suite, here we check the recon term alone
  Rng rng(17);
  const ModelConfig cfg = small_config();
  const Molecule mol = tree_molecule(rng, 4);
  const RecordTensors rt = paired_record(mol, cfg);
  Graph g;
  Tensor same(rt.n, cfg.d);
  for (long k = 0; k < same.size(); ++k) same[k] = rng.normal();
  Value a = g.constant(same);
  CHECK(g.val(g.scale(masked_sq_diff_sum(g, a, g.detach(a), rt.mask_stream),
                      1.0 / static_cast<double>(rt.n_real)))
            .item() == 0.0);
}

TEST_CASE("stage-2 loss: modality mismatch is an error") {
  Rng rng(18);
  const ModelConfig cfg = small_config();
  ModelParameters params = ModelParameters::init(cfg, 19);
  RandomMolOptions opt;
  opt.with_coords = false;  // 2D-only molecule
  const Molecule mol = random_molecule(rng, "g2d", opt);
  Batch batch = collate({featurize(mol, cfg.feat)});
  TrainConfig tc;
  Rng crng(20);
  apply_corruption(batch, tc, cfg, crng);
  std::vector<RecordTensors> rts{prepare_record(batch.items[0], cfg)};
  Graph g;
  ModelForward mf(g, params);
  LossWeights w;
  CHECK_THROWS_AS(build_stage2_loss(mf, rts, w, Modality::only_3d), ValidationError);
  // the matching modality works
  Graph g2;
  ModelForward mf2(g2, params);
  const LossReport rep = build_stage2_loss(mf2, rts, w, Modality::only_2d).report(g2);
  CHECK(std::isfinite(rep.total));
  CHECK(rep.terms.count("recon") == 1);
  CHECK(rep.terms.count("spd") == 1);
  CHECK(rep.terms.count("pos") == 0);
}
