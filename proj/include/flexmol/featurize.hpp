#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "flexmol/molio.hpp"
#include "flexmol/tensor.hpp"

namespace flexmol {

// Parameter-free featurization settings. edge_feat_dim is one-hot over the
// four bond types plus a no-bond slot.
struct FeatureConfig {
  int max_degree = 8;
  int max_hop = 100;
  int max_path_len = 16;
  static constexpr int edge_feat_dim = 5;
  static constexpr std::uint8_t no_bond_code = 4;

  int spd_unreachable() const { return max_hop + 1; }
  int spd_classes() const { return max_hop + 2; }

  void validate() const;
  std::uint64_t hash() const;
};

// 2D structural tensors for one molecule. Edge paths are stored compactly as
// bond-type codes per pair; one_hot(i,j) materializes the padded
// n x n x max_path_len x edge_feat_dim view used in the contracts.
struct Features2D {
  int n = 0;
  int max_path_len = 0;
  std::vector<int> degree;            // clamped to [0, max_degree]
  std::vector<int> spd;               // n*n, clamped; max_hop+1 = unreachable
  std::vector<int> path_len;          // n*n, min(spd, max_path_len) or 0
  std::vector<std::uint8_t> path_codes;  // n*n*max_path_len, 0xFF beyond path_len

  int spd_at(int i, int j) const { return spd[static_cast<std::size_t>(i * n + j)]; }
  int path_len_at(int i, int j) const { return path_len[static_cast<std::size_t>(i * n + j)]; }
  std::uint8_t code_at(int i, int j, int k) const {
    return path_codes[static_cast<std::size_t>((i * n + j) * max_path_len + k)];
  }
  Tensor one_hot(int i, int j) const;  // max_path_len x edge_feat_dim
};

std::vector<int> compute_degrees(int n, const std::vector<Bond>& bonds, const FeatureConfig& cfg);

// Exact unweighted shortest-path lengths by BFS from every source, clamped at
// max_hop, with max_hop+1 for unreachable pairs.
std::vector<int> compute_spd(int n, const std::vector<Bond>& bonds, const FeatureConfig& cfg);

// One shortest path per reachable pair. Ties are broken deterministically by
// choosing the smallest-index predecessor at every step, which yields the
// lexicographically smallest predecessor chain. Pairs farther apart than
// max_path_len carry max_path_len no-bond codes.
void compute_edge_paths(int n, const std::vector<Bond>& bonds, const std::vector<int>& spd,
                        const FeatureConfig& cfg, std::vector<int>& path_len,
                        std::vector<std::uint8_t>& path_codes);

Features2D compute_features_2d(int n, const std::vector<Bond>& bonds, const FeatureConfig& cfg);

// Pairwise Euclidean distance matrix. Throws on non-finite coordinates.
Tensor compute_distances(const Tensor& coords);

struct FeaturizedMolecule {
  Molecule mol;
  std::optional<Features2D> f2d;
  std::uint64_t cfg_hash = 0;
};

FeaturizedMolecule featurize(const Molecule& mol, const FeatureConfig& cfg);
std::vector<FeaturizedMolecule> featurize_all(const std::vector<Molecule>& mols,
                                              const FeatureConfig& cfg);

// Binary feature cache, keyed by the FeatureConfig hash. Regeneration from the
// JSONL source is always possible; the cache only saves recomputation.
void save_feature_cache(const std::string& path, const std::vector<FeaturizedMolecule>& recs,
                        const FeatureConfig& cfg);
std::optional<std::vector<Features2D>> load_feature_cache(const std::string& path,
                                                          const FeatureConfig& cfg,
                                                          const std::vector<Molecule>& mols);

// Cache location: $FLEXMOL_CACHE_DIR (falls back to the dataset's directory).
std::string feature_cache_path(const std::string& dataset_path, const FeatureConfig& cfg);

std::vector<FeaturizedMolecule> featurize_with_cache(const std::string& dataset_path,
                                                     const std::vector<Molecule>& mols,
                                                     const FeatureConfig& cfg);

}  // namespace flexmol
