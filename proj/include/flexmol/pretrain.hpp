#pragma once

#include <optional>
#include <string>
#include <vector>

#include "flexmol/losses.hpp"
#include "flexmol/model.hpp"
#include "flexmol/rng.hpp"

namespace flexmol {

struct TrainConfig {
  double lr = 3e-5;
  double beta1 = 0.9;   // Adam defaults
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int epochs_stage1 = 20;
  int epochs_stage2 = 10;
  long max_steps = 0;   // 0 = run the configured epochs
  int batch_size = 16;
  double mask_ratio = 0.15;
  double coord_noise = 1.0;  // uniform +-noise per coordinate, angstroms
  std::uint64_t seed = 0;
  double grad_clip = 1.0;
  LossWeights weights;
  bool deterministic = true;  // serial execution, zeroed wallclock in logs
  std::string out_dir;        // checkpoints + metrics.jsonl; empty = no files
  void validate() const;
};

// Key-value config file support (flat `key=value` lines, '#' comments).
TrainConfig load_train_config(const std::string& path, TrainConfig base = {});

struct CorruptionPlan {
  enum Policy : int { replace_mask = 0, replace_random = 1, keep = 2 };
  struct PerRecord {
    std::vector<long> positions;
    std::vector<int> policy;
  };
  std::vector<PerRecord> records;
};

// BERT-style corruption: ceil(mask_ratio * n) atoms per molecule (minimum 1),
// 80% MASK / 10% random atom / 10% kept; the same atoms get coordinate noise
// when a conformer is present. Distance features are derived from the noised
// coordinates downstream.
CorruptionPlan apply_corruption(Batch& batch, const TrainConfig& cfg, const ModelConfig& mc,
                                Rng& rng);

class Adam {
 public:
  Adam(const TrainConfig& cfg, const ModelParameters& params);
  // Clips the global gradient norm over unfrozen tensors, then applies one
  // update in place. Frozen tensors are untouched.
  void step(ModelParameters& params, std::vector<Tensor>& grads);
  long t() const { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_, clip_;
  long t_ = 0;
  std::vector<Tensor> m_, v_;
};

struct TrainResult {
  std::vector<LossReport> history;
  std::string final_checkpoint;
};

// Stage 1: paired 2D & 3D pre-training. Every record must carry both
// modalities; violations name the record.
TrainResult run_stage1(const std::vector<FeaturizedMolecule>& data, ModelParameters& params,
                       const TrainConfig& cfg);

// Stage 2: single-modality continual pre-training from a Stage 1 parameter
// set. Freezes the opposite modality's feature learner.
TrainResult run_stage2(const std::vector<FeaturizedMolecule>& data, ModelParameters& params,
                       const TrainConfig& cfg, Modality modality);

// ---- evaluation helpers ----

// Argmax accuracy of the masked-atom head under a seeded corruption pass.
double masked_atom_accuracy(const ModelParameters& params,
                            const std::vector<FeaturizedMolecule>& data,
                            const TrainConfig& cfg, std::uint64_t eval_seed);

// Fraction of molecules whose pooled 2D encoder output ranks its own pooled 3D
// output first within a batch of `batch_size`.
double retrieval_accuracy(const ModelParameters& params,
                          const std::vector<FeaturizedMolecule>& data, int batch_size,
                          std::uint64_t eval_seed);

// ---- gradient checking ----

struct GradCheckResult {
  double max_rel_err = 0;
  std::string worst_param;
  long checked_entries = 0;
};

// Compares analytic gradients of the total Stage 1 loss against central
// finite differences on one random paired molecule. Detached subexpressions
// are frozen at their unperturbed values so the comparison matches the
// stop-gradient semantics.
GradCheckResult gradcheck_stage1(const ModelConfig& cfg, const LossWeights& weights,
                                 std::uint64_t seed, int n_atoms, double fd_step = 1e-5);

}  // namespace flexmol
