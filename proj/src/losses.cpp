#include "flexmol/losses.hpp"

#include <cmath>

namespace flexmol {

void LossWeights::validate() const {
  if (w_cl < 0 || w_ra < 0 || w_c < 0 || w_atom < 0 || w_pos < 0 || w_spd < 0)
    throw ConfigError("LossWeights: weights must be non-negative");
  if (w_cl + w_ra + w_c + w_atom + w_pos + w_spd <= 0)
    throw ConfigError("LossWeights: at least one weight must be positive");
  if (temperature <= 0) throw ConfigError("LossWeights: temperature must be positive");
}

Value select_rows(Graph& g, Value m, const std::vector<long>& rows) {
  const long n = g.val(m).rows();
  Tensor sel(static_cast<long>(rows.size()), n);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] < 0 || rows[r] >= n) throw Error("select_rows: index out of range");
    sel(static_cast<long>(r), rows[r]) = 1.0;
  }
  return g.matmul(g.constant(std::move(sel)), m);
}

Value cross_entropy_mean(Graph& g, Value logits, const std::vector<long>& targets) {
  const long m = g.val(logits).rows();
  const long v = g.val(logits).cols();
  if (m == 0 || static_cast<long>(targets.size()) != m)
    throw ValidationError("cross_entropy_mean: needs >= 1 row and matching targets");
  Tensor onehot(m, v);
  for (long i = 0; i < m; ++i) {
    if (targets[static_cast<std::size_t>(i)] < 0 || targets[static_cast<std::size_t>(i)] >= v)
      throw ValidationError("cross_entropy_mean: target out of range");
    onehot(i, targets[static_cast<std::size_t>(i)]) = 1.0;
  }
  Value lse_sum = g.sum_all(g.logsumexp_rows(logits));
  Value target_sum = g.sum_all(g.mul(logits, g.constant(std::move(onehot))));
  return g.scale(g.sub(lse_sum, target_sum), 1.0 / static_cast<double>(m));
}

Value info_nce(Graph& g, Value x_pool, Value y_pool, double temperature) {
  const long b = g.val(x_pool).rows();
  if (b < 1 || g.val(y_pool).rows() != b)
    throw ValidationError("info_nce: batch sizes must match and be >= 1");
  Value sims = g.scale(g.matmul(x_pool, g.transpose(y_pool)), 1.0 / temperature);
  Tensor eye(b, b);
  for (long i = 0; i < b; ++i) eye(i, i) = 1.0;
  Value diag = g.sum_all(g.mul(sims, g.constant(std::move(eye))));
  Value row_lse = g.sum_all(g.logsumexp_rows(sims));
  Value col_lse = g.sum_all(g.logsumexp_rows(g.transpose(sims)));
  Value numer = g.sub(g.add(row_lse, col_lse), g.scale(diag, 2.0));
  return g.scale(numer, 1.0 / (2.0 * static_cast<double>(b)));
}

Value masked_sq_diff_sum(Graph& g, Value a, Value b, const Tensor& mask) {
  Value diff = g.mul(g.sub(a, b), g.constant(mask));
  return g.sum_all(g.mul(diff, diff));
}

Value loss_ra(Graph& g, Value x, Value x_tilde, Value y, Value y_tilde,
              const RecordTensors& rt) {
  Value sum = g.add(masked_sq_diff_sum(g, x, x_tilde, rt.mask_stream),
                    masked_sq_diff_sum(g, y, y_tilde, rt.mask_stream));
  return g.scale(sum, 1.0 / static_cast<double>(rt.n_real));
}

namespace {

Value pair_sq_diff_sum(Graph& g, const PairRep& a, const PairRep& b, const Tensor& pair_mask,
                       bool detach_a) {
  Value total = -1;
  for (std::size_t h = 0; h < a.heads.size(); ++h) {
    Value target = detach_a ? g.detach(a.heads[h]) : a.heads[h];
    Value term = masked_sq_diff_sum(g, b.heads[h], target, pair_mask);
    total = total < 0 ? term : g.add(total, term);
  }
  return total;
}

}  // namespace

Value loss_c(Graph& g, const Stage1Forward& s, const RecordTensors& rt) {
  const double inv_n = 1.0 / static_cast<double>(rt.n_real);
  const double inv_nn = 1.0 / static_cast<double>(rt.n_real * rt.n_real);
  Value tx = g.scale(masked_sq_diff_sum(g, s.x_hat, g.detach(s.x_F), rt.mask_stream), inv_n);
  Value ty = g.scale(masked_sq_diff_sum(g, s.y_hat, g.detach(s.y_F), rt.mask_stream), inv_n);
  Value tp = g.scale(pair_sq_diff_sum(g, s.P, s.P_hat, rt.pair_mask, true), inv_nn);
  Value tq = g.scale(pair_sq_diff_sum(g, s.Q, s.Q_hat, rt.pair_mask, true), inv_nn);
  return g.add(g.add(tx, ty), g.add(tp, tq));
}

Value loss_masked_atom(Graph& g, Value logits, const std::vector<long>& positions,
                       const std::vector<long>& targets) {
  if (positions.empty()) throw ValidationError("loss_masked_atom: no masked positions");
  return cross_entropy_mean(g, select_rows(g, logits, positions), targets);
}

Value loss_pos(Graph& g, Value recovered, const Tensor& coords_true,
               const std::vector<long>& positions, double delta) {
  if (positions.empty()) throw ValidationError("loss_pos: no corrupted positions");
  Value pred = select_rows(g, recovered, positions);
  Tensor truth(static_cast<long>(positions.size()), 3);
  for (std::size_t r = 0; r < positions.size(); ++r)
    for (long k = 0; k < 3; ++k) truth(static_cast<long>(r), k) = coords_true(positions[r], k);
  Value resid = g.sub(pred, g.constant(std::move(truth)));
  Value sq = g.mul(resid, resid);
  Value per_atom = g.matmul(sq, g.constant(Tensor::ones(3, 1)));
  Value norms = g.sqrt_(g.add_const(per_atom, 1e-24));
  Value h = g.sum_all(g.huber(norms, delta));
  return g.scale(h, 1.0 / (3.0 * static_cast<double>(positions.size())));
}

Value loss_spd(Graph& g, Value spd_logits, const std::vector<long>& rows,
               const std::vector<long>& targets) {
  if (rows.empty()) throw ValidationError("loss_spd: no pair targets");
  return cross_entropy_mean(g, select_rows(g, spd_logits, rows), targets);
}

LossReport LossGraph::report(Graph& g) const {
  LossReport r;
  for (const auto& [name, v] : terms) r.terms[name] = g.val(v).item();
  r.total = g.val(total).item();
  return r;
}

namespace {

// weighted accumulation helper: total += w * term (skipping absent terms)
void add_term(Graph& g, Value& total, std::vector<std::pair<std::string, Value>>& terms,
              const std::string& name, Value term, double weight) {
  terms.emplace_back(name, term);
  Value weighted = g.scale(term, weight);
  total = total < 0 ? weighted : g.add(total, weighted);
}

}  // namespace

LossGraph build_stage1_loss(ModelForward& mf, const std::vector<RecordTensors>& rts,
                            const LossWeights& w, std::vector<Stage1Forward>* out_states) {
  w.validate();
  Graph& g = mf.graph();
  if (rts.empty()) throw ValidationError("build_stage1_loss: empty batch");

  std::vector<Value> x_pools, y_pools;
  Value ra_sum = -1, cx_sum = -1, cy_sum = -1, cp_sum = -1, cq_sum = -1;
  double n_count = 0, nn_count = 0;
  std::vector<Value> atom_rows;
  std::vector<long> atom_targets;
  std::vector<Value> spd_rows;
  std::vector<long> spd_targets;
  Value pos_sum = -1;
  double pos_count = 0;

  auto acc = [&g](Value& slot, Value term) { slot = slot < 0 ? term : g.add(slot, term); };

  for (const RecordTensors& rt : rts) {
    Stage1Forward s = mf.forward_paired(rt);
    x_pools.push_back(s.x_pool);
    y_pools.push_back(s.y_pool);

    acc(ra_sum, g.add(masked_sq_diff_sum(g, s.x, s.x_tilde, rt.mask_stream),
                      masked_sq_diff_sum(g, s.y, s.y_tilde, rt.mask_stream)));
    acc(cx_sum, masked_sq_diff_sum(g, s.x_hat, g.detach(s.x_F), rt.mask_stream));
    acc(cy_sum, masked_sq_diff_sum(g, s.y_hat, g.detach(s.y_F), rt.mask_stream));
    acc(cp_sum, pair_sq_diff_sum(g, s.P, s.P_hat, rt.pair_mask, true));
    acc(cq_sum, pair_sq_diff_sum(g, s.Q, s.Q_hat, rt.pair_mask, true));
    n_count += static_cast<double>(rt.n_real);
    nn_count += static_cast<double>(rt.n_real) * static_cast<double>(rt.n_real);

    if (rt.corrupt_positions.empty())
      throw ValidationError("build_stage1_loss: record has no corrupted atoms");
    // masked-atom CE averaged over the two refined streams
    atom_rows.push_back(select_rows(g, s.atom_logits_x, rt.corrupt_positions));
    atom_rows.push_back(select_rows(g, s.atom_logits_y, rt.corrupt_positions));
    for (int rep = 0; rep < 2; ++rep)
      atom_targets.insert(atom_targets.end(), rt.atom_targets.begin(), rt.atom_targets.end());

    spd_rows.push_back(select_rows(g, s.spd_logits, rt.spd_rows));
    spd_targets.insert(spd_targets.end(), rt.spd_targets.begin(), rt.spd_targets.end());

    {
      Value pred = select_rows(g, s.recovered, rt.corrupt_positions);
      Tensor truth(static_cast<long>(rt.corrupt_positions.size()), 3);
      for (std::size_t r = 0; r < rt.corrupt_positions.size(); ++r)
        for (long k = 0; k < 3; ++k)
          truth(static_cast<long>(r), k) = rt.coords_true(rt.corrupt_positions[r], k);
      Value resid = g.sub(pred, g.constant(std::move(truth)));
      Value per_atom = g.matmul(g.mul(resid, resid), g.constant(Tensor::ones(3, 1)));
      Value norms = g.sqrt_(g.add_const(per_atom, 1e-24));
      acc(pos_sum, g.sum_all(g.huber(norms, 1.0)));
      pos_count += 3.0 * static_cast<double>(rt.corrupt_positions.size());
    }
    if (out_states) out_states->push_back(std::move(s));
  }

  LossGraph lg;
  Value cl = info_nce(g, g.concat_rows(x_pools), g.concat_rows(y_pools), w.temperature);
  add_term(g, lg.total, lg.terms, "cl", cl, w.w_cl);
  add_term(g, lg.total, lg.terms, "ra", g.scale(ra_sum, 1.0 / n_count), w.w_ra);
  Value c_term = g.add(g.scale(g.add(cx_sum, cy_sum), 1.0 / n_count),
                       g.scale(g.add(cp_sum, cq_sum), 1.0 / nn_count));
  add_term(g, lg.total, lg.terms, "c", c_term, w.w_c);
  add_term(g, lg.total, lg.terms, "atom",
           cross_entropy_mean(g, g.concat_rows(atom_rows), atom_targets), w.w_atom);
  add_term(g, lg.total, lg.terms, "pos", g.scale(pos_sum, 1.0 / pos_count), w.w_pos);
  add_term(g, lg.total, lg.terms, "spd",
           cross_entropy_mean(g, g.concat_rows(spd_rows), spd_targets), w.w_spd);
  return lg;
}

LossGraph build_stage2_loss(ModelForward& mf, const std::vector<RecordTensors>& rts,
                            const LossWeights& w, Modality modality,
                            std::vector<Stage2Forward>* out_states) {
  w.validate();
  if (modality != Modality::only_2d && modality != Modality::only_3d)
    throw ConfigError("build_stage2_loss: modality must be 2d or 3d");
  Graph& g = mf.graph();
  if (rts.empty()) throw ValidationError("build_stage2_loss: empty batch");

  Value recon_sum = -1;
  double n_count = 0;
  std::vector<Value> atom_rows;
  std::vector<long> atom_targets;
  std::vector<Value> spd_rows;
  std::vector<long> spd_targets;
  Value pos_sum = -1;
  double pos_count = 0;

  auto acc = [&g](Value& slot, Value term) { slot = slot < 0 ? term : g.add(slot, term); };

  for (const RecordTensors& rt : rts) {
    Stage2Forward s = mf.forward_single(rt, modality);
    acc(recon_sum,
        masked_sq_diff_sum(g, s.dec_stream, g.detach(s.tilde_target), rt.mask_stream));
    n_count += static_cast<double>(rt.n_real);

    if (rt.corrupt_positions.empty())
      throw ValidationError("build_stage2_loss: record has no corrupted atoms");
    atom_rows.push_back(select_rows(g, s.atom_logits, rt.corrupt_positions));
    atom_targets.insert(atom_targets.end(), rt.atom_targets.begin(), rt.atom_targets.end());

    if (modality == Modality::only_2d) {
      spd_rows.push_back(select_rows(g, s.spd_logits, rt.spd_rows));
      spd_targets.insert(spd_targets.end(), rt.spd_targets.begin(), rt.spd_targets.end());
    } else {
      Value pred = select_rows(g, s.recovered, rt.corrupt_positions);
      Tensor truth(static_cast<long>(rt.corrupt_positions.size()), 3);
      for (std::size_t r = 0; r < rt.corrupt_positions.size(); ++r)
        for (long k = 0; k < 3; ++k)
          truth(static_cast<long>(r), k) = rt.coords_true(rt.corrupt_positions[r], k);
      Value resid = g.sub(pred, g.constant(std::move(truth)));
      Value per_atom = g.matmul(g.mul(resid, resid), g.constant(Tensor::ones(3, 1)));
      Value norms = g.sqrt_(g.add_const(per_atom, 1e-24));
      acc(pos_sum, g.sum_all(g.huber(norms, 1.0)));
      pos_count += 3.0 * static_cast<double>(rt.corrupt_positions.size());
    }
    if (out_states) out_states->push_back(std::move(s));
  }

  LossGraph lg;
  add_term(g, lg.total, lg.terms, "recon", g.scale(recon_sum, 1.0 / n_count), w.w_c);
  add_term(g, lg.total, lg.terms, "atom",
           cross_entropy_mean(g, g.concat_rows(atom_rows), atom_targets), w.w_atom);
  if (modality == Modality::only_2d) {
    add_term(g, lg.total, lg.terms, "spd",
             cross_entropy_mean(g, g.concat_rows(spd_rows), spd_targets), w.w_spd);
  } else {
    add_term(g, lg.total, lg.terms, "pos", g.scale(pos_sum, 1.0 / pos_count), w.w_pos);
  }
  return lg;
}

}  // namespace flexmol
