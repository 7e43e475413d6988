#pragma once

#include <array>
#include <iosfwd>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "flexmol/errors.hpp"
#include "flexmol/rng.hpp"
#include "flexmol/tensor.hpp"

namespace flexmol {

enum class BondType : int { single = 0, double_bond = 1, triple = 2, aromatic = 3 };

const char* bond_type_name(BondType t);
BondType bond_type_from_name(const std::string& s);

struct Bond {
  int i = 0;
  int j = 0;
  BondType type = BondType::single;
};

// One molecule with any combination of the 2D (bond graph) and 3D (conformer)
// modalities. Conformer coordinates are n x 3 in angstroms.
struct Molecule {
  std::string id;
  std::vector<int> atomic_numbers;
  std::vector<int> formal_charges;               // zeros when absent
  std::optional<std::vector<Bond>> bonds;        // 2D modality
  std::optional<std::vector<Tensor>> conformers; // 3D modality

  int n() const { return static_cast<int>(atomic_numbers.size()); }
  bool has_2d() const { return bonds.has_value(); }
  bool has_3d() const { return conformers.has_value() && !conformers->empty(); }

  // Throws ValidationError naming this molecule's id on any broken invariant.
  void validate() const;
};

enum class Modality { paired, only_2d, only_3d, mixed };

const char* modality_name(Modality m);

struct DatasetManifest {
  std::string path;
  long count = 0;
  Modality modality = Modality::mixed;
  int format_version = 1;
};

DatasetManifest scan_manifest(const std::vector<Molecule>& mols, const std::string& path);

// JSONL record schema:
//   {"id": str, "atoms": [int], "charges": [int]?, "bonds": [[i,j,type]]?,
//    "coords": [[[x,y,z] * n] * n_conformers]?}
std::vector<Molecule> parse_jsonl(std::istream& in, const std::string& origin = "<stream>");
std::vector<Molecule> parse_jsonl(const std::string& path);
void write_jsonl(std::ostream& out, const std::vector<Molecule>& mols);
void write_jsonl(const std::string& path, const std::vector<Molecule>& mols);

// Concatenated V2000 molfiles separated by "$$$$". Import only; property
// blocks other than the ctab are ignored.
std::vector<Molecule> parse_sdf_v2000(std::istream& in, const std::string& origin = "<stream>");
std::vector<Molecule> parse_sdf_v2000(const std::string& path);

int atomic_number_from_symbol(const std::string& symbol);
const char* symbol_from_atomic_number(int z);

// Seed-deterministic partition. Valid/test sizes are floor(frac*N); the
// remainder goes to train.
std::tuple<std::vector<Molecule>, std::vector<Molecule>, std::vector<Molecule>>
random_split(const std::vector<Molecule>& dataset, std::array<double, 3> fractions,
             std::uint64_t seed);

// Synthetic molecules for tests, gradient checks and toy pre-training runs.
struct RandomMolOptions {
  int min_atoms = 4;
  int max_atoms = 9;
  bool with_bonds = true;
  bool with_coords = true;
  int n_conformers = 1;
  double extra_edge_prob = 0.3;
};

Molecule random_molecule(Rng& rng, const std::string& id, const RandomMolOptions& opt = {});
std::vector<Molecule> random_dataset(Rng& rng, int count, const RandomMolOptions& opt = {});

}  // namespace flexmol
