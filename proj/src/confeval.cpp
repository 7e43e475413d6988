#include "flexmol/confeval.hpp"

#include <json.hpp>

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "flexmol/rng.hpp"

namespace flexmol {

using nlohmann::json;

void ConformerSet::validate() const {
  if (conformers.empty()) throw ValidationError("conformer set '" + molecule_id + "' is empty");
  const long n = conformers[0].rows();
  for (const Tensor& c : conformers) {
    if (c.rank() != 2 || c.cols() != 3 || c.rows() != n)
      throw ValidationError("conformer set '" + molecule_id + "': inconsistent shapes");
    if (!c.finite())
      throw ValidationError("conformer set '" + molecule_id + "': non-finite coordinates");
  }
  if (!atomic_numbers.empty() && static_cast<long>(atomic_numbers.size()) != n)
    throw ValidationError("conformer set '" + molecule_id + "': atom count mismatch");
}

void EvalConfig::validate() const {
  if (delta <= 0) throw ConfigError("EvalConfig: delta must be positive");
}

Tensor filter_heavy(const Tensor& coords, const std::vector<int>& atomic_numbers) {
  if (atomic_numbers.empty()) return coords;
  if (static_cast<long>(atomic_numbers.size()) != coords.rows())
    throw ValidationError("filter_heavy: atom count mismatch");
  long heavy = 0;
  for (int z : atomic_numbers) heavy += z > 1 ? 1 : 0;
  if (heavy == 0) throw ValidationError("filter_heavy: no heavy atoms");
  Tensor out(heavy, 3);
  long r = 0;
  for (long i = 0; i < coords.rows(); ++i) {
    if (atomic_numbers[static_cast<std::size_t>(i)] <= 1) continue;
    for (long k = 0; k < 3; ++k) out(r, k) = coords(i, k);
    ++r;
  }
  return out;
}

double kabsch_rmsd(const Tensor& r, const Tensor& r_hat) {
  if (r.rank() != 2 || r.cols() != 3 || !r.same_shape(r_hat))
    throw ValidationError("kabsch_rmsd: point sets must both be n x 3");
  const long n = r.rows();
  if (n < 1) throw ValidationError("kabsch_rmsd: empty point sets");

  Eigen::MatrixXd a(n, 3), b(n, 3);
  for (long i = 0; i < n; ++i)
    for (long k = 0; k < 3; ++k) {
      a(i, k) = r(i, k);
      b(i, k) = r_hat(i, k);
    }
  const Eigen::RowVector3d ca = a.colwise().mean();
  const Eigen::RowVector3d cb = b.colwise().mean();
  a.rowwise() -= ca;
  b.rowwise() -= cb;

  const Eigen::Matrix3d cov = a.transpose() * b;
  double best;
  if (cov.norm() < 1e-30) {
    // all points coincident on at least one side: plain centered RMSD
    best = (a - b).squaredNorm();
  } else {
    Eigen::JacobiSVD<Eigen::Matrix3d> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Eigen::Matrix3d d = Eigen::Matrix3d::Identity();
    // proper rotations only
    if ((svd.matrixV() * svd.matrixU().transpose()).determinant() < 0) d(2, 2) = -1.0;
    const Eigen::Matrix3d rot = svd.matrixV() * d * svd.matrixU().transpose();
    best = (a * rot.transpose() - b).squaredNorm();
  }
  return std::sqrt(std::max(0.0, best) / static_cast<double>(n));
}

namespace {

std::vector<Tensor> heavy_set(const ConformerSet& s, const EvalConfig& cfg) {
  std::vector<Tensor> out;
  out.reserve(s.conformers.size());
  for (const Tensor& c : s.conformers)
    out.push_back(cfg.heavy_atoms_only ? filter_heavy(c, s.atomic_numbers) : c);
  return out;
}

}  // namespace

double coverage(const ConformerSet& generated, const ConformerSet& reference,
                const EvalConfig& cfg) {
  cfg.validate();
  generated.validate();
  reference.validate();
  if (generated.molecule_id != reference.molecule_id)
    throw ValidationError("coverage: conformer sets belong to different molecules");
  const auto gen = heavy_set(generated, cfg);
  const auto ref = heavy_set(reference, cfg);
  long covered = 0;
  for (const Tensor& r : ref) {
    for (const Tensor& g : gen) {
      if (kabsch_rmsd(r, g) < cfg.delta) {
        ++covered;
        break;
      }
    }
  }
  return static_cast<double>(covered) / static_cast<double>(ref.size());
}

double matching(const ConformerSet& generated, const ConformerSet& reference,
                const EvalConfig& cfg) {
  cfg.validate();
  generated.validate();
  reference.validate();
  if (generated.molecule_id != reference.molecule_id)
    throw ValidationError("matching: conformer sets belong to different molecules");
  const auto gen = heavy_set(generated, cfg);
  const auto ref = heavy_set(reference, cfg);
  double total = 0;
  for (const Tensor& r : ref) {
    double best = 1e300;
    for (const Tensor& g : gen) best = std::min(best, kabsch_rmsd(r, g));
    total += best;
  }
  return total / static_cast<double>(ref.size());
}

ConformerSet generate_conformers(const Molecule& mol, const ModelParameters& params, int count,
                                 std::uint64_t seed, int refine_rounds) {
  if (!mol.has_2d())
    throw ValidationError("generate_conformers: molecule '" + mol.id + "' has no bonds");
  if (count < 1) throw ConfigError("generate_conformers: count must be >= 1");

  const FeaturizedMolecule rec = featurize(mol, params.cfg.feat);
  Batch batch = collate({rec});
  const RecordTensors rt = prepare_record(batch.items[0], params.cfg);

  // The 2D-only forward does not consume coordinates, so the pair-derived
  // update coefficients are computed once and reused for every sample.
  Graph g;
  ModelForward mf(g, params);
  Stage2Forward s = mf.forward_single(rt, Modality::only_2d);
  const int H = params.cfg.H;
  const long n = rt.n;
  Tensor u(n, n);
  {
    const Tensor& w = params.at("head.pos.w");
    const Tensor& b = params.at("head.pos.b");
    for (long i = 0; i < n; ++i)
      for (long j = 0; j < n; ++j) {
        if (i == j) continue;
        double acc = b[0];
        for (int h = 0; h < H; ++h)
          acc += g.val(s.fused_pair_L.heads[static_cast<std::size_t>(h)])(i, j) * w[h];
        u(i, j) = acc;
      }
  }

  ConformerSet out;
  out.molecule_id = mol.id;
  out.atomic_numbers = mol.atomic_numbers;
  out.role = ConformerSet::Role::generated;

  Rng rng(seed);
  const long nr = rt.n_real;
  for (int sample = 0; sample < count; ++sample) {
    Tensor coords(nr, 3);
    for (long k = 0; k < coords.size(); ++k) coords[k] = rng.normal();
    for (int round = 0; round < refine_rounds; ++round) {
      Tensor next = coords;
      for (long i = 0; i < nr; ++i) {
        double dx = 0, dy = 0, dz = 0;
        for (long j = 0; j < nr; ++j) {
          if (i == j) continue;
          const double uij = u(i, j);
          dx += (coords(i, 0) - coords(j, 0)) * uij;
          dy += (coords(i, 1) - coords(j, 1)) * uij;
          dz += (coords(i, 2) - coords(j, 2)) * uij;
        }
        next(i, 0) += dx / static_cast<double>(nr);
        next(i, 1) += dy / static_cast<double>(nr);
        next(i, 2) += dz / static_cast<double>(nr);
      }
      coords = std::move(next);
    }
    if (!coords.finite())
      throw Error("generate_conformers: refinement diverged for '" + mol.id + "'");
    out.conformers.push_back(std::move(coords));
  }
  return out;
}

ConfEvalReport evaluate(const std::vector<std::pair<ConformerSet, ConformerSet>>& pairs,
                        const EvalConfig& cfg) {
  if (pairs.empty()) throw ValidationError("evaluate: empty dataset");
  ConfEvalReport report;
  std::vector<double> covs, mats;
  for (const auto& [gen, ref] : pairs) {
    ConfEvalReport::PerMolecule pm;
    pm.id = ref.molecule_id;
    pm.cov = coverage(gen, ref, cfg);
    pm.mat = matching(gen, ref, cfg);
    covs.push_back(pm.cov);
    mats.push_back(pm.mat);
    report.per_molecule.push_back(std::move(pm));
  }
  const auto mean = [](const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  const auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t m = v.size() / 2;
    return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
  };
  report.cov_mean = mean(covs);
  report.cov_median = median(covs);
  report.mat_mean = mean(mats);
  report.mat_median = median(mats);
  return report;
}

ConfEvalReport evaluate_files(const std::vector<Molecule>& generated,
                              const std::vector<Molecule>& reference, const EvalConfig& cfg) {
  std::vector<std::pair<ConformerSet, ConformerSet>> pairs;
  for (const Molecule& ref : reference) {
    const Molecule* gen = nullptr;
    for (const Molecule& g : generated)
      if (g.id == ref.id) {
        gen = &g;
        break;
      }
    if (!gen) throw ValidationError("evaluate: no generated conformers for '" + ref.id + "'");
    if (!ref.has_3d() || !gen->has_3d())
      throw ValidationError("evaluate: molecule '" + ref.id + "' lacks conformers");
    ConformerSet gs{ref.id, gen->atomic_numbers, *gen->conformers,
                    ConformerSet::Role::generated};
    ConformerSet rs{ref.id, ref.atomic_numbers, *ref.conformers,
                    ConformerSet::Role::reference};
    pairs.emplace_back(std::move(gs), std::move(rs));
  }
  return evaluate(pairs, cfg);
}

std::string ConfEvalReport::to_json() const {
  json j;
  j["cov_mean"] = cov_mean;
  j["cov_median"] = cov_median;
  j["mat_mean"] = mat_mean;
  j["mat_median"] = mat_median;
  json per = json::array();
  for (const PerMolecule& pm : per_molecule)
    per.push_back({{"id", pm.id}, {"cov", pm.cov}, {"mat", pm.mat}});
  j["per_molecule"] = std::move(per);
  return j.dump();
}

std::string ConfEvalReport::to_table() const {
  std::ostringstream out;
  char line[128];
  out << "molecule                     COV      MAT (A)\n";
  for (const PerMolecule& pm : per_molecule) {
    std::snprintf(line, sizeof(line), "%-24s %7.2f%%   %8.4f\n", pm.id.c_str(), 100.0 * pm.cov,
                  pm.mat);
    out << line;
  }
  std::snprintf(line, sizeof(line), "%-24s %7.2f%%   %8.4f\n", "mean", 100.0 * cov_mean, mat_mean);
  out << line;
  std::snprintf(line, sizeof(line), "%-24s %7.2f%%   %8.4f\n", "median", 100.0 * cov_median,
                mat_median);
  out << line;
  return out.str();
}

}  // namespace flexmol
