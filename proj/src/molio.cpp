#include "flexmol/molio.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace flexmol {

using nlohmann::json;

const char* bond_type_name(BondType t) {
  switch (t) {
    case BondType::single: return "single";
    case BondType::double_bond: return "double";
    case BondType::triple: return "triple";
    case BondType::aromatic: return "aromatic";
  }
  return "single";
}

BondType bond_type_from_name(const std::string& s) {
  if (s == "single") return BondType::single;
  if (s == "double") return BondType::double_bond;
  if (s == "triple") return BondType::triple;
  if (s == "aromatic") return BondType::aromatic;
  throw ParseError("unknown bond type '" + s + "'");
}

void Molecule::validate() const {
  const auto fail = [this](const std::string& msg) {
    throw ValidationError("molecule '" + id + "': " + msg);
  };
  if (atomic_numbers.empty()) fail("no atoms");
  if (formal_charges.size() != atomic_numbers.size())
    fail("charges length does not match atom count");
  for (int z : atomic_numbers)
    if (z < 1) fail("atomic number must be >= 1");
  if (!has_2d() && !has_3d()) fail("needs at least one of bonds/conformers");
  if (bonds) {
    std::set<std::pair<int, int>> seen;
    for (const Bond& b : *bonds) {
      if (b.i < 0 || b.i >= n() || b.j < 0 || b.j >= n())
        fail("bond index out of range");
      if (b.i == b.j) fail("self bond");
      auto key = std::minmax(b.i, b.j);
      if (!seen.insert(key).second) fail("duplicate bond pair");
    }
  }
  if (conformers) {
    for (const Tensor& c : *conformers) {
      if (c.rank() != 2 || c.rows() != n() || c.cols() != 3)
        fail("conformer shape must be n x 3");
    }
  }
}

const char* modality_name(Modality m) {
  switch (m) {
    case Modality::paired: return "paired";
    case Modality::only_2d: return "2d_only";
    case Modality::only_3d: return "3d_only";
    case Modality::mixed: return "mixed";
  }
  return "mixed";
}

DatasetManifest scan_manifest(const std::vector<Molecule>& mols, const std::string& path) {
  DatasetManifest m;
  m.path = path;
  m.count = static_cast<long>(mols.size());
  bool all_paired = true, all_2d = true, all_3d = true;
  for (const Molecule& mol : mols) {
    const bool p2 = mol.has_2d(), p3 = mol.has_3d();
    all_paired = all_paired && p2 && p3;
    all_2d = all_2d && p2 && !p3;
    all_3d = all_3d && p3 && !p2;
  }
  if (all_paired)
    m.modality = Modality::paired;
  else if (all_2d)
    m.modality = Modality::only_2d;
  else if (all_3d)
    m.modality = Modality::only_3d;
  else
    m.modality = Modality::mixed;
  return m;
}

namespace {

Molecule molecule_from_json(const json& rec) {
  Molecule m;
  m.id = rec.at("id").get<std::string>();
  m.atomic_numbers = rec.at("atoms").get<std::vector<int>>();
  if (rec.contains("charges"))
    m.formal_charges = rec.at("charges").get<std::vector<int>>();
  else
    m.formal_charges.assign(m.atomic_numbers.size(), 0);
  if (rec.contains("bonds")) {
    std::vector<Bond> bonds;
    for (const json& jb : rec.at("bonds")) {
      if (!jb.is_array() || jb.size() != 3) throw ParseError("bond must be [i, j, type]");
      Bond b;
      b.i = jb[0].get<int>();
      b.j = jb[1].get<int>();
      b.type = bond_type_from_name(jb[2].get<std::string>());
      bonds.push_back(b);
    }
    m.bonds = std::move(bonds);
  }
  if (rec.contains("coords")) {
    std::vector<Tensor> confs;
    for (const json& jc : rec.at("coords")) {
      Tensor c(static_cast<long>(jc.size()), 3);
      long i = 0;
      for (const json& row : jc) {
        if (!row.is_array() || row.size() != 3) throw ParseError("coordinate row must have 3 entries");
        for (long k = 0; k < 3; ++k) c(i, k) = row[static_cast<std::size_t>(k)].get<double>();
        ++i;
      }
      confs.push_back(std::move(c));
    }
    m.conformers = std::move(confs);
  }
  return m;
}

json molecule_to_json(const Molecule& m) {
  json rec;
  rec["id"] = m.id;
  rec["atoms"] = m.atomic_numbers;
  bool any_charge = false;
  for (int c : m.formal_charges) any_charge = any_charge || c != 0;
  if (any_charge) rec["charges"] = m.formal_charges;
  if (m.bonds) {
    json jb = json::array();
    for (const Bond& b : *m.bonds)
      jb.push_back(json::array({b.i, b.j, bond_type_name(b.type)}));
    rec["bonds"] = std::move(jb);
  }
  if (m.conformers) {
    json jcs = json::array();
    for (const Tensor& c : *m.conformers) {
      json jc = json::array();
      for (long i = 0; i < c.rows(); ++i)
        jc.push_back(json::array({c(i, 0), c(i, 1), c(i, 2)}));
      jcs.push_back(std::move(jc));
    }
    rec["coords"] = std::move(jcs);
  }
  return rec;
}

}  // namespace

std::vector<Molecule> parse_jsonl(std::istream& in, const std::string& origin) {
  std::vector<Molecule> out;
  std::string line;
  long lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::exception& e) {
      throw ParseError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
    Molecule m;
    try {
      m = molecule_from_json(rec);
    } catch (const json::exception& e) {
      throw ParseError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
    m.validate();
    out.push_back(std::move(m));
  }
  return out;
}

std::vector<Molecule> parse_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open '" + path + "'");
  return parse_jsonl(in, path);
}

void write_jsonl(std::ostream& out, const std::vector<Molecule>& mols) {
  for (const Molecule& m : mols) out << molecule_to_json(m).dump() << "\n";
}

void write_jsonl(const std::string& path, const std::vector<Molecule>& mols) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path + "'");
  write_jsonl(out, mols);
}

namespace {

constexpr const char* kSymbols[] = {
    "H",  "He", "Li", "Be", "B",  "C",  "N",  "O",  "F",  "Ne", "Na", "Mg", "Al", "Si",
    "P",  "S",  "Cl", "Ar", "K",  "Ca", "Sc", "Ti", "V",  "Cr", "Mn", "Fe", "Co", "Ni",
    "Cu", "Zn", "Ga", "Ge", "As", "Se", "Br", "Kr", "Rb", "Sr", "Y",  "Zr", "Nb", "Mo",
    "Tc", "Ru", "Rh", "Pd", "Ag", "Cd", "In", "Sn", "Sb", "Te", "I",  "Xe", "Cs", "Ba",
    "La", "Ce", "Pr", "Nd", "Pm", "Sm", "Eu", "Gd", "Tb", "Dy", "Ho", "Er", "Tm", "Yb",
    "Lu", "Hf", "Ta", "W",  "Re", "Os", "Ir", "Pt", "Au", "Hg", "Tl", "Pb", "Bi", "Po",
    "At", "Rn", "Fr", "Ra", "Ac", "Th", "Pa", "U",  "Np", "Pu", "Am", "Cm", "Bk", "Cf",
    "Es", "Fm"};

std::string strip(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

int parse_fixed_int(const std::string& line, std::size_t pos, std::size_t len,
                    const std::string& what) {
  if (line.size() < pos) throw ParseError("line too short reading " + what);
  const std::string field = strip(line.substr(pos, len));
  if (field.empty()) throw ParseError("empty field reading " + what);
  try {
    return std::stoi(field);
  } catch (...) {
    throw ParseError("bad integer '" + field + "' reading " + what);
  }
}

}  // namespace

int atomic_number_from_symbol(const std::string& symbol) {
  for (std::size_t i = 0; i < std::size(kSymbols); ++i)
    if (symbol == kSymbols[i]) return static_cast<int>(i) + 1;
  throw ParseError("unknown element symbol '" + symbol + "'");
}

const char* symbol_from_atomic_number(int z) {
  if (z < 1 || z > static_cast<int>(std::size(kSymbols)))
    throw Error("atomic number " + std::to_string(z) + " out of range");
  return kSymbols[z - 1];
}

std::vector<Molecule> parse_sdf_v2000(std::istream& in, const std::string& origin) {
  std::vector<Molecule> out;
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);

  std::size_t pos = 0;
  int record_no = 0;
  while (pos < lines.size()) {
    // skip blank filler between records
    while (pos < lines.size() && strip(lines[pos]).empty()) ++pos;
    if (pos >= lines.size()) break;
    ++record_no;
    const auto ctx = [&](const std::string& msg) {
      return ParseError(origin + " record " + std::to_string(record_no) + ": " + msg);
    };
    if (pos + 4 > lines.size()) throw ctx("truncated header");
    const std::string title = strip(lines[pos]);
    const std::string& counts = lines[pos + 3];
    const int n_atoms = parse_fixed_int(counts, 0, 3, "atom count");
    const int n_bonds = parse_fixed_int(counts, 3, 3, "bond count");
    pos += 4;
    if (pos + static_cast<std::size_t>(n_atoms + n_bonds) > lines.size())
      throw ctx("counts line does not match file length");

    Molecule m;
    m.id = title.empty() ? "sdf-" + std::to_string(record_no) : title;
    Tensor coords(n_atoms, 3);
    for (int i = 0; i < n_atoms; ++i) {
      const std::string& al = lines[pos + static_cast<std::size_t>(i)];
      if (al.size() < 34) throw ctx("atom line " + std::to_string(i + 1) + " too short");
      try {
        coords(i, 0) = std::stod(al.substr(0, 10));
        coords(i, 1) = std::stod(al.substr(10, 10));
        coords(i, 2) = std::stod(al.substr(20, 10));
      } catch (...) {
        throw ctx("bad coordinates on atom line " + std::to_string(i + 1));
      }
      const std::string symbol = strip(al.substr(31, 3));
      m.atomic_numbers.push_back(atomic_number_from_symbol(symbol));
    }
    pos += static_cast<std::size_t>(n_atoms);

    std::vector<Bond> bonds;
    for (int b = 0; b < n_bonds; ++b) {
      const std::string& bl = lines[pos + static_cast<std::size_t>(b)];
      Bond bond;
      bond.i = parse_fixed_int(bl, 0, 3, "bond atom 1") - 1;
      bond.j = parse_fixed_int(bl, 3, 3, "bond atom 2") - 1;
      const int code = parse_fixed_int(bl, 6, 3, "bond type");
      switch (code) {
        case 1: bond.type = BondType::single; break;
        case 2: bond.type = BondType::double_bond; break;
        case 3: bond.type = BondType::triple; break;
        case 4: bond.type = BondType::aromatic; break;
        default: throw ctx("unsupported bond type code " + std::to_string(code));
      }
      bonds.push_back(bond);
    }
    pos += static_cast<std::size_t>(n_bonds);

    // Skip the rest of the ctab and the data items up to the record delimiter.
    bool saw_end = false;
    while (pos < lines.size()) {
      const std::string t = strip(lines[pos]);
      ++pos;
      if (t == "$$$$") {
        saw_end = true;
        break;
      }
    }
    (void)saw_end;  // last record may omit the delimiter

    m.formal_charges.assign(m.atomic_numbers.size(), 0);
    m.bonds = std::move(bonds);
    m.conformers = std::vector<Tensor>{std::move(coords)};
    try {
      m.validate();
    } catch (const ValidationError& e) {
      throw ctx(e.what());
    }
    out.push_back(std::move(m));
  }
  return out;
}

std::vector<Molecule> parse_sdf_v2000(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open '" + path + "'");
  return parse_sdf_v2000(in, path);
}

std::tuple<std::vector<Molecule>, std::vector<Molecule>, std::vector<Molecule>>
random_split(const std::vector<Molecule>& dataset, std::array<double, 3> fractions,
             std::uint64_t seed) {
  if (dataset.empty()) throw ValidationError("random_split: empty dataset");
  double sum = 0;
  for (double f : fractions) {
    if (f <= 0) throw ValidationError("random_split: fractions must be positive");
    sum += f;
  }
  if (std::abs(sum - 1.0) > 1e-9)
    throw ValidationError("random_split: fractions must sum to 1");

  const long n = static_cast<long>(dataset.size());
  std::vector<long> order(static_cast<std::size_t>(n));
  for (long i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  Rng rng(seed);
  rng.shuffle(order);

  const long n_valid = static_cast<long>(std::floor(fractions[1] * static_cast<double>(n)));
  const long n_test = static_cast<long>(std::floor(fractions[2] * static_cast<double>(n)));
  const long n_train = n - n_valid - n_test;

  std::vector<Molecule> train, valid, test;
  for (long k = 0; k < n; ++k) {
    const Molecule& m = dataset[static_cast<std::size_t>(order[static_cast<std::size_t>(k)])];
    if (k < n_train)
      train.push_back(m);
    else if (k < n_train + n_valid)
      valid.push_back(m);
    else
      test.push_back(m);
  }
  return {std::move(train), std::move(valid), std::move(test)};
}

Molecule random_molecule(Rng& rng, const std::string& id, const RandomMolOptions& opt) {
  static const int kElements[] = {6, 7, 8, 9, 15, 16, 17};
  Molecule m;
  m.id = id;
  const int n = opt.min_atoms + static_cast<int>(rng.randint(opt.max_atoms - opt.min_atoms + 1));
  for (int i = 0; i < n; ++i) {
    m.atomic_numbers.push_back(kElements[rng.randint(static_cast<long>(std::size(kElements)))]);
    m.formal_charges.push_back(rng.uniform() < 0.1 ? (rng.uniform() < 0.5 ? -1 : 1) : 0);
  }
  if (opt.with_bonds) {
    std::vector<Bond> bonds;
    std::set<std::pair<int, int>> seen;
    const auto random_type = [&] {
      return static_cast<BondType>(rng.randint(4));
    };
    // random spanning tree, then a few extra edges
    for (int i = 1; i < n; ++i) {
      const int j = static_cast<int>(rng.randint(i));
      bonds.push_back({j, i, random_type()});
      seen.insert({j, i});
    }
    const int extra = static_cast<int>(std::floor(opt.extra_edge_prob * n));
    for (int e = 0; e < extra; ++e) {
      const int i = static_cast<int>(rng.randint(n));
      const int j = static_cast<int>(rng.randint(n));
      auto key = std::minmax(i, j);
      if (i == j || seen.count(key)) continue;
      seen.insert(key);
      bonds.push_back({key.first, key.second, random_type()});
    }
    m.bonds = std::move(bonds);
  }
  if (opt.with_coords) {
    std::vector<Tensor> confs;
    for (int c = 0; c < opt.n_conformers; ++c) {
      Tensor coords(n, 3);
      for (long k = 0; k < coords.size(); ++k) coords[k] = 1.5 * rng.normal();
      confs.push_back(std::move(coords));
    }
    m.conformers = std::move(confs);
  }
  m.validate();
  return m;
}

std::vector<Molecule> random_dataset(Rng& rng, int count, const RandomMolOptions& opt) {
  std::vector<Molecule> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i)
    out.push_back(random_molecule(rng, "mol-" + std::to_string(i), opt));
  return out;
}

}  // namespace flexmol
