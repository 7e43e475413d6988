#pragma once

#include <string>
#include <vector>

#include "flexmol/model.hpp"
#include "flexmol/molio.hpp"
#include "flexmol/tensor.hpp"

namespace flexmol {

struct ConformerSet {
  enum class Role { generated, reference };
  std::string molecule_id;
  std::vector<int> atomic_numbers;   // may be empty: every atom treated as heavy
  std::vector<Tensor> conformers;    // each n x 3, angstroms
  Role role = Role::reference;

  void validate() const;
};

struct EvalConfig {
  double delta = 0.5;           // RMSD coverage threshold, angstroms
  bool heavy_atoms_only = true;
  void validate() const;
};

// Minimum RMSD over proper rotations and translations (Kabsch, SVD with
// determinant correction). Coincident point sets fall back to the plain
// centered RMSD.
double kabsch_rmsd(const Tensor& r, const Tensor& r_hat);

// Drops hydrogen rows. Errors if nothing remains.
Tensor filter_heavy(const Tensor& coords, const std::vector<int>& atomic_numbers);

// Fraction of reference conformers within strict delta of some generated one.
double coverage(const ConformerSet& generated, const ConformerSet& reference,
                const EvalConfig& cfg);

// Mean over references of the best generated RMSD.
double matching(const ConformerSet& generated, const ConformerSet& reference,
                const EvalConfig& cfg);

// Samples `count` conformers from a 2D-only forward pass: seeded Gaussian
// cloud, then iterative position-head refinement.
ConformerSet generate_conformers(const Molecule& mol, const ModelParameters& params, int count,
                                 std::uint64_t seed, int refine_rounds = 8);

struct ConfEvalReport {
  struct PerMolecule {
    std::string id;
    double cov = 0;
    double mat = 0;
  };
  double cov_mean = 0, cov_median = 0;
  double mat_mean = 0, mat_median = 0;
  std::vector<PerMolecule> per_molecule;

  std::string to_json() const;
  std::string to_table() const;
};

ConfEvalReport evaluate(const std::vector<std::pair<ConformerSet, ConformerSet>>& pairs,
                        const EvalConfig& cfg);

// Convenience: pair up generated/reference JSONL molecule lists by id and run
// the evaluation (conformer lists on each record form the sets).
ConfEvalReport evaluate_files(const std::vector<Molecule>& generated,
                              const std::vector<Molecule>& reference, const EvalConfig& cfg);

}  // namespace flexmol
