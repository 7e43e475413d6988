#pragma once

#include <map>
#include <string>
#include <vector>

#include "flexmol/model.hpp"
#include "flexmol/tensor.hpp"

namespace flexmol {

struct LossWeights {
  double w_cl = 1.0;
  double w_ra = 1.0;
  double w_c = 1.0;
  double w_atom = 1.0;
  double w_pos = 1.0;
  double w_spd = 1.0;
  double temperature = 1.0;
  void validate() const;
};

struct LossReport {
  std::map<std::string, double> terms;
  double total = 0;
  long batch_size = 0;
  long step = 0;
};

// ---- tape-level building blocks ----

// Select rows of a rank-2 value by index (constant selection matrix).
Value select_rows(Graph& g, Value m, const std::vector<long>& rows);

// Mean cross entropy over rows of (M, V) logits with integer targets.
Value cross_entropy_mean(Graph& g, Value logits, const std::vector<long>& targets);

// Symmetric InfoNCE with in-batch negatives over unit-normalized rows.
Value info_nce(Graph& g, Value x_pool, Value y_pool, double temperature);

// Masked squared Frobenius sum: sum((a-b)^2 . mask), unnormalized.
Value masked_sq_diff_sum(Graph& g, Value a, Value b, const Tensor& mask);

// ---- per-molecule losses (count-normalized per the contracts) ----

Value loss_ra(Graph& g, Value x, Value x_tilde, Value y, Value y_tilde,
              const RecordTensors& rt);

// Encoder-side arguments are targets: no gradient flows into them.
Value loss_c(Graph& g, const Stage1Forward& s, const RecordTensors& rt);

Value loss_masked_atom(Graph& g, Value logits, const std::vector<long>& positions,
                       const std::vector<long>& targets);

// Huber (delta in angstroms) on per-atom residual norms of corrupted atoms,
// averaged over 3*n_corrupted coordinates.
Value loss_pos(Graph& g, Value recovered, const Tensor& coords_true,
               const std::vector<long>& positions, double delta = 1.0);

Value loss_spd(Graph& g, Value spd_logits, const std::vector<long>& rows,
               const std::vector<long>& targets);

// ---- batch totals ----

struct LossGraph {
  Value total = -1;
  std::vector<std::pair<std::string, Value>> terms;
  LossReport report(Graph& g) const;
};

LossGraph build_stage1_loss(ModelForward& mf, const std::vector<RecordTensors>& rts,
                            const LossWeights& w,
                            std::vector<Stage1Forward>* out_states = nullptr);

LossGraph build_stage2_loss(ModelForward& mf, const std::vector<RecordTensors>& rts,
                            const LossWeights& w, Modality modality,
                            std::vector<Stage2Forward>* out_states = nullptr);

}  // namespace flexmol
