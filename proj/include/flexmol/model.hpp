#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "flexmol/featurize.hpp"
#include "flexmol/molio.hpp"
#include "flexmol/tensor.hpp"

namespace flexmol {

// Attention-bias sentinel standing in for -inf before softmax.
constexpr double kBiasSentinel = -1e9;

struct ModelConfig {
  int d = 512;        // hidden width
  int K = 128;        // Gaussian kernels
  int F = 4;          // encoder/decoder depth
  int L = 4;          // multi-modal encoder depth
  int H = 8;          // attention heads
  int mlp_ratio = 4;
  int max_atomic_number = 100;
  int charge_buckets = 5;  // formal charges -2..+2
  FeatureConfig feat;

  long atom_vocab() const {
    return static_cast<long>(max_atomic_number) * charge_buckets + 1;  // + MASK row
  }
  long mask_token_index() const { return atom_vocab() - 1; }
  int head_dim() const { return d / H; }
  static constexpr int pair_classes = 5;  // bond types + no-bond

  void validate() const;
  long vocab_index(int z, int charge, bool is_mask_token) const;
  // inverse of vocab_index for non-mask rows
  std::pair<int, int> vocab_entry(long index) const;
};

// All learnable tensors, named, in a stable order. Freezing is runtime state
// consulted by the optimizer, not serialized.
struct ModelParameters {
  ModelConfig cfg;
  std::vector<std::string> names;
  std::vector<Tensor> tensors;
  std::vector<std::uint8_t> frozen;

  int find(const std::string& name) const;
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  void add(const std::string& name, Tensor t);
  void set_frozen_prefix(const std::string& prefix, bool value);
  bool is_frozen(int i) const { return frozen[static_cast<std::size_t>(i)] != 0; }
  long total_params() const;

  static ModelParameters init(const ModelConfig& cfg, std::uint64_t seed);

 private:
  std::unordered_map<std::string, int> index_;
};

// Versioned checkpoint container.
void save_checkpoint(const ModelParameters& params, long step, const std::string& path);
struct LoadedCheckpoint {
  ModelParameters params;
  long step = 0;
};
LoadedCheckpoint load_checkpoint(const std::string& path);

// ----------------------------------------------------------------------------
// Batch collation
// ----------------------------------------------------------------------------

struct CollatedRecord {
  std::string id;
  long n_real = 0;
  long pad_to = 0;
  std::vector<int> z, charge;              // length pad_to, possibly corrupted
  std::vector<std::uint8_t> mask_token;    // 1 where atom replaced by MASK
  std::vector<std::uint8_t> atom_mask;     // 1 = real atom
  std::vector<int> z_orig, charge_orig;    // uncorrupted
  std::optional<Features2D> f2d;           // sized n_real
  std::optional<Tensor> coords_true;       // pad_to x 3
  std::optional<Tensor> coords_in;         // corrupted copy fed to the model
  std::vector<long> corrupt_positions;
  Tensor attn_sentinel;                    // pad_to x pad_to, 0 or kBiasSentinel
  std::uint64_t cfg_hash = 0;

  bool has_2d() const { return f2d.has_value(); }
  bool has_3d() const { return coords_in.has_value(); }
};

struct Batch {
  long pad_to = 0;
  std::vector<CollatedRecord> items;
};

// Pads all records to the batch max atom count. conformer_choice selects one
// conformer per molecule (default 0). Mixed feature configurations are an
// error.
Batch collate(const std::vector<FeaturizedMolecule>& recs,
              const std::vector<int>& conformer_choice = {});

// ----------------------------------------------------------------------------
// Forward graph
// ----------------------------------------------------------------------------

// Per-head additive attention bias, one (n,n) channel per head.
struct PairRep {
  std::vector<Value> heads;
};

// Constant tensors derived from one collated record, shared by every layer.
struct RecordTensors {
  long n = 0;       // pad_to
  long n_real = 0;
  std::vector<long> atom_idx;
  std::vector<long> degree_idx;
  Tensor atom_mask_col;    // (n,1)
  Tensor mask_stream;      // (n,d)
  Tensor pair_mask;        // (n,n)
  Tensor offdiag_mask;     // (n,n) pair_mask with zero diagonal
  Tensor pair_mask_K;      // (n*n,K)
  Tensor sentinel;         // (n,n)
  Tensor spd_select;       // (n*n, spd_classes)
  Tensor path_select;      // (n*n, max_path_len*edge_feat_dim), rows carry 1/N
  Tensor class_select;     // (n*n, pair_classes)
  Tensor centrality_sum;   // (n, n*n) row-block summation over j
  Tensor dist_flat;        // (n*n,1)
  Tensor coords_in;        // (n,3)
  Tensor coords_true;      // (n,3)
  std::vector<long> corrupt_positions;
  std::vector<long> atom_targets;   // vocab index of originals
  std::vector<long> spd_rows;       // real off-diagonal flat pair indices
  std::vector<long> spd_targets;
  bool has2d = false;
  bool has3d = false;
};

RecordTensors prepare_record(const CollatedRecord& rec, const ModelConfig& cfg);

struct EncoderResult {
  Value stream;
  PairRep pair;
};

enum class DecoderDirection { to2d, to3d };  // to2d reconstructs x-hat from y

struct Stage1Forward {
  Value x = -1, y = -1;
  PairRep P, Q;
  Value x_tilde = -1, y_tilde = -1;
  Value x_F = -1, y_F = -1;
  PairRep P_F, Q_F;
  Value x_hat = -1, y_hat = -1;
  PairRep P_hat, Q_hat;
  Value x_L = -1, y_L = -1;
  PairRep P_L, Q_L;
  Value atom_logits_x = -1, atom_logits_y = -1;
  Value spd_logits = -1;   // (n*n, spd_classes)
  Value recovered = -1;    // (n,3)
  Value x_pool = -1, y_pool = -1;
};

struct Stage2Forward {
  Value enc_out = -1;       // available modality encoder output
  PairRep avail_pair;       // P (2d path) or Q (3d path)
  Value tilde_target = -1;  // frozen FL output for the missing modality
  Value dec_stream = -1;    // generated missing-modality stream
  PairRep dec_pair;
  Value fused_L = -1;
  PairRep fused_pair_L;
  Value atom_logits = -1;
  Value spd_logits = -1;    // 2d-only path
  Value recovered = -1;     // 3d-only path
};

// Binds a Graph to a parameter set: every parameter becomes a leaf, all
// forward ops are recorded on the tape.
class ModelForward {
 public:
  ModelForward(Graph& g, const ModelParameters& params);

  Graph& graph() { return *g_; }
  const ModelConfig& cfg() const { return params_->cfg; }
  Value param(const std::string& name) const;

  // --- individual operations ---
  Value embed_atoms(const std::vector<long>& vocab_idx);
  std::pair<Value, PairRep> build_2d_inputs(Value X, const RecordTensors& rt);
  Value gaussian_basis(const RecordTensors& rt);  // (n*n, K)
  std::pair<Value, PairRep> build_3d_inputs(Value X, Value psi, const RecordTensors& rt);
  Value feature_learner(Value X, Modality which);
  EncoderResult encoder_forward(Value stream, const PairRep& pair, Modality which,
                                const RecordTensors& rt);
  EncoderResult decoder_forward(Value source, const PairRep& self_bias, Value memory,
                                DecoderDirection dir, const RecordTensors& rt);
  EncoderResult mm_encoder(Value stream, const PairRep& pair, const RecordTensors& rt);
  Value head_masked_atom(Value stream);
  Value head_position(const PairRep& pair, const RecordTensors& rt);
  Value head_spd(const PairRep& a, const PairRep& b);
  Value pool(Value stream, const RecordTensors& rt);

  PairRep zero_pair(long n);

  // --- full pipelines ---
  Stage1Forward forward_paired(const RecordTensors& rt);
  Stage2Forward forward_single(const RecordTensors& rt, Modality which);

  // gradients in parameter order (zeros where untouched)
  std::vector<Tensor> gradients() const;

 private:
  struct AttnNames;
  Value ln_affine(Value x, Value gamma, Value beta);
  Value self_attention(Value stream, PairRep& pair, const std::string& prefix,
                       const RecordTensors& rt);
  Value cross_attention(Value stream, Value memory, const std::string& prefix,
                        const RecordTensors& rt);
  Value feed_forward(Value stream, const std::string& prefix);
  std::vector<Value> mixed_bias(const PairRep& pair, long n);

  Graph* g_;
  const ModelParameters* params_;
  std::vector<Value> leaves_;
};

}  // namespace flexmol
