#include "flexmol/pretrain.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace flexmol {

using nlohmann::json;

void TrainConfig::validate() const {
  if (lr <= 0) throw ConfigError("TrainConfig: lr must be positive");
  if (mask_ratio <= 0 || mask_ratio >= 1)
    throw ConfigError("TrainConfig: mask_ratio must be in (0,1)");
  if (batch_size < 1) throw ConfigError("TrainConfig: batch_size must be >= 1");
  if (epochs_stage1 < 0 || epochs_stage2 < 0 || max_steps < 0)
    throw ConfigError("TrainConfig: negative step counts");
  if (grad_clip < 0) throw ConfigError("TrainConfig: grad_clip must be >= 0");
  weights.validate();
}

TrainConfig load_train_config(const std::string& path, TrainConfig base) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open config '" + path + "'");
  std::string line;
  long lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash_pos = line.find('#');
    if (hash_pos != std::string::npos) line.resize(hash_pos);
    const auto eq = line.find('=');
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    if (eq == std::string::npos)
      throw ParseError(path + ":" + std::to_string(lineno) + ": expected key=value");
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    try {
      if (key == "lr") base.lr = std::stod(val);
      else if (key == "beta1") base.beta1 = std::stod(val);
      else if (key == "beta2") base.beta2 = std::stod(val);
      else if (key == "adam_eps") base.adam_eps = std::stod(val);
      else if (key == "epochs_stage1") base.epochs_stage1 = std::stoi(val);
      else if (key == "epochs_stage2") base.epochs_stage2 = std::stoi(val);
      else if (key == "max_steps") base.max_steps = std::stol(val);
      else if (key == "batch_size") base.batch_size = std::stoi(val);
      else if (key == "mask_ratio") base.mask_ratio = std::stod(val);
      else if (key == "coord_noise") base.coord_noise = std::stod(val);
      else if (key == "seed") base.seed = std::stoull(val);
      else if (key == "grad_clip") base.grad_clip = std::stod(val);
      else if (key == "w_cl") base.weights.w_cl = std::stod(val);
      else if (key == "w_ra") base.weights.w_ra = std::stod(val);
      else if (key == "w_c") base.weights.w_c = std::stod(val);
      else if (key == "w_atom") base.weights.w_atom = std::stod(val);
      else if (key == "w_pos") base.weights.w_pos = std::stod(val);
      else if (key == "w_spd") base.weights.w_spd = std::stod(val);
      else if (key == "temperature") base.weights.temperature = std::stod(val);
      else if (key == "deterministic") base.deterministic = val == "1" || val == "true";
      else if (key == "out_dir") base.out_dir = val;
      else throw ParseError("unknown key '" + key + "'");
    } catch (const ParseError&) {
      throw;
    } catch (...) {
      throw ParseError(path + ":" + std::to_string(lineno) + ": bad value for '" + key + "'");
    }
  }
  return base;
}

CorruptionPlan apply_corruption(Batch& batch, const TrainConfig& cfg, const ModelConfig& mc,
                                Rng& rng) {
  CorruptionPlan plan;
  for (CollatedRecord& rec : batch.items) {
    CorruptionPlan::PerRecord pr;
    const long n = rec.n_real;
    const long k =
        std::max<long>(1, static_cast<long>(std::ceil(cfg.mask_ratio * static_cast<double>(n))));
    pr.positions = rng.sample_without_replacement(n, k);
    std::sort(pr.positions.begin(), pr.positions.end());
    for (long p : pr.positions) {
      const double roll = rng.uniform();
      int policy;
      if (roll < 0.8) {
        policy = CorruptionPlan::replace_mask;
        rec.mask_token[static_cast<std::size_t>(p)] = 1;
      } else if (roll < 0.9) {
        policy = CorruptionPlan::replace_random;
        const long idx = rng.randint(mc.atom_vocab() - 1);  // exclude the MASK row
        const auto [z, c] = mc.vocab_entry(idx);
        rec.z[static_cast<std::size_t>(p)] = z;
        rec.charge[static_cast<std::size_t>(p)] = c;
      } else {
        policy = CorruptionPlan::keep;
      }
      pr.policy.push_back(policy);
      if (rec.coords_in) {
        for (long c3 = 0; c3 < 3; ++c3)
          (*rec.coords_in)(p, c3) += rng.uniform(-cfg.coord_noise, cfg.coord_noise);
      }
    }
    rec.corrupt_positions = pr.positions;
    plan.records.push_back(std::move(pr));
  }
  return plan;
}

// ----------------------------------------------------------------------------
// Adam
// ----------------------------------------------------------------------------

Adam::Adam(const TrainConfig& cfg, const ModelParameters& params)
    : lr_(cfg.lr), beta1_(cfg.beta1), beta2_(cfg.beta2), eps_(cfg.adam_eps),
      clip_(cfg.grad_clip) {
  m_.reserve(params.tensors.size());
  v_.reserve(params.tensors.size());
  for (const Tensor& t : params.tensors) {
    m_.emplace_back(t.shape_);
    v_.emplace_back(t.shape_);
  }
}

void Adam::step(ModelParameters& params, std::vector<Tensor>& grads) {
  if (grads.size() != params.tensors.size()) throw Error("Adam: gradient count mismatch");
  if (clip_ > 0) {
    double norm_sq = 0;
    for (std::size_t i = 0; i < grads.size(); ++i) {
      if (params.is_frozen(static_cast<int>(i))) continue;
      for (long k = 0; k < grads[i].size(); ++k) norm_sq += grads[i][k] * grads[i][k];
    }
    const double norm = std::sqrt(norm_sq);
    if (norm > clip_) {
      const double s = clip_ / norm;
      for (std::size_t i = 0; i < grads.size(); ++i) {
        if (params.is_frozen(static_cast<int>(i))) continue;
        for (long k = 0; k < grads[i].size(); ++k) grads[i][k] *= s;
      }
    }
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (params.is_frozen(static_cast<int>(i))) continue;
    Tensor& theta = params.tensors[i];
    Tensor& m = m_[i];
    Tensor& v = v_[i];
    const Tensor& gr = grads[i];
    for (long k = 0; k < theta.size(); ++k) {
      m[k] = beta1_ * m[k] + (1.0 - beta1_) * gr[k];
      v[k] = beta2_ * v[k] + (1.0 - beta2_) * gr[k] * gr[k];
      const double mhat = m[k] / bc1;
      const double vhat = v[k] / bc2;
      theta[k] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

// ----------------------------------------------------------------------------
// Training drivers
// ----------------------------------------------------------------------------

namespace {

std::vector<int> pick_conformers(const std::vector<FeaturizedMolecule>& recs, Rng& rng) {
  std::vector<int> choice(recs.size(), 0);
  for (std::size_t i = 0; i < recs.size(); ++i) {
    if (recs[i].mol.has_3d() && recs[i].mol.conformers->size() > 1)
      choice[i] = static_cast<int>(rng.randint(static_cast<long>(recs[i].mol.conformers->size())));
  }
  return choice;
}

struct MetricsLog {
  std::ofstream out;
  bool deterministic = false;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

  void open(const std::string& dir) {
    if (dir.empty()) return;
    std::filesystem::create_directories(dir);
    out.open(dir + "/metrics.jsonl");
    if (!out) throw Error("cannot write metrics log in '" + dir + "'");
  }

  void append(const LossReport& r, int epoch, double lr) {
    if (!out.is_open()) return;
    json j;
    j["step"] = r.step;
    j["epoch"] = epoch;
    for (const auto& [name, v] : r.terms) j[name] = v;
    j["total"] = r.total;
    j["lr"] = lr;
    const double wallclock =
        deterministic ? 0.0
                      : std::chrono::duration<double, std::milli>(
                            std::chrono::steady_clock::now() - start)
                            .count();
    j["wallclock"] = wallclock;
    out << j.dump() << "\n";
    out.flush();
  }
};

TrainResult train_loop(const std::vector<FeaturizedMolecule>& data, ModelParameters& params,
                       const TrainConfig& cfg, std::optional<Modality> stage2_modality) {
  cfg.validate();
  params.cfg.validate();
  if (data.empty()) throw ValidationError("training: empty dataset");

  const bool stage1 = !stage2_modality.has_value();
  for (const FeaturizedMolecule& r : data) {
    if (stage1) {
      if (!r.mol.has_2d() || !r.mol.has_3d())
        throw ValidationError("stage 1 requires paired data; molecule '" + r.mol.id +
                              "' is single-modality");
    } else if (*stage2_modality == Modality::only_2d) {
      if (!r.mol.has_2d())
        throw ValidationError("2d-only stage 2: molecule '" + r.mol.id + "' lacks bonds");
    } else {
      if (!r.mol.has_3d())
        throw ValidationError("3d-only stage 2: molecule '" + r.mol.id + "' lacks conformers");
    }
  }

  Rng order_rng = Rng(cfg.seed).fork(1);
  Rng conf_rng = Rng(cfg.seed).fork(2);
  Rng corrupt_rng = Rng(cfg.seed).fork(3);

  Adam adam(cfg, params);
  MetricsLog log;
  log.deterministic = cfg.deterministic;
  log.open(cfg.out_dir);

  TrainResult result;
  const int epochs = stage1 ? cfg.epochs_stage1 : cfg.epochs_stage2;
  const long n = static_cast<long>(data.size());
  long step = 0;
  bool done = false;

  for (int epoch = 0; !done; ++epoch) {
    if (cfg.max_steps == 0 && epoch >= epochs) break;
    std::vector<long> order(static_cast<std::size_t>(n));
    for (long i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    order_rng.shuffle(order);
    const std::vector<int> conf_all = pick_conformers(data, conf_rng);

    for (long b0 = 0; b0 < n && !done; b0 += cfg.batch_size) {
      const long b1 = std::min(n, b0 + cfg.batch_size);
      std::vector<FeaturizedMolecule> recs;
      std::vector<int> confs;
      for (long i = b0; i < b1; ++i) {
        const long src = order[static_cast<std::size_t>(i)];
        recs.push_back(data[static_cast<std::size_t>(src)]);
        confs.push_back(conf_all[static_cast<std::size_t>(src)]);
      }
      Batch batch = collate(recs, confs);
      apply_corruption(batch, cfg, params.cfg, corrupt_rng);

      std::vector<RecordTensors> rts;
      rts.reserve(batch.items.size());
      for (const CollatedRecord& rec : batch.items) rts.push_back(prepare_record(rec, params.cfg));

      Graph g;
      ModelForward mf(g, params);
      LossGraph lg = stage1 ? build_stage1_loss(mf, rts, cfg.weights)
                            : build_stage2_loss(mf, rts, cfg.weights, *stage2_modality);
      g.backward(lg.total);
      std::vector<Tensor> grads = mf.gradients();
      adam.step(params, grads);

      LossReport report = lg.report(g);
      report.step = step;
      report.batch_size = static_cast<long>(batch.items.size());
      log.append(report, epoch, cfg.lr);
      result.history.push_back(std::move(report));

      ++step;
      if (cfg.max_steps > 0 && step >= cfg.max_steps) done = true;
    }
    if (!cfg.out_dir.empty())
      save_checkpoint(params, step,
                      cfg.out_dir + "/checkpoint-epoch-" + std::to_string(epoch) + ".bin");
    if (cfg.max_steps == 0 && epoch + 1 >= epochs) done = true;
  }

  if (!cfg.out_dir.empty()) {
    result.final_checkpoint = cfg.out_dir + "/checkpoint.bin";
    save_checkpoint(params, step, result.final_checkpoint);
  }
  return result;
}

}  // namespace

TrainResult run_stage1(const std::vector<FeaturizedMolecule>& data, ModelParameters& params,
                       const TrainConfig& cfg) {
  return train_loop(data, params, cfg, std::nullopt);
}

TrainResult run_stage2(const std::vector<FeaturizedMolecule>& data, ModelParameters& params,
                       const TrainConfig& cfg, Modality modality) {
  if (modality != Modality::only_2d && modality != Modality::only_3d)
    throw ConfigError("run_stage2: modality must be 2d or 3d");
  params.set_frozen_prefix(modality == Modality::only_2d ? "fl3d." : "fl2d.", true);
  return train_loop(data, params, cfg, modality);
}

// ----------------------------------------------------------------------------
// Evaluation helpers
// ----------------------------------------------------------------------------

double masked_atom_accuracy(const ModelParameters& params,
                            const std::vector<FeaturizedMolecule>& data,
                            const TrainConfig& cfg, std::uint64_t eval_seed) {
  Rng rng(eval_seed);
  long correct = 0, total = 0;
  for (const FeaturizedMolecule& rec : data) {
    Batch batch = collate({rec});
    apply_corruption(batch, cfg, params.cfg, rng);
    RecordTensors rt = prepare_record(batch.items[0], params.cfg);
    Graph g;
    ModelForward mf(g, params);
    Stage1Forward s = mf.forward_paired(rt);
    const Tensor& lx = g.val(s.atom_logits_x);
    const Tensor& ly = g.val(s.atom_logits_y);
    for (std::size_t k = 0; k < rt.corrupt_positions.size(); ++k) {
      const long p = rt.corrupt_positions[k];
      long best = 0;
      double best_v = -1e300;
      for (long v = 0; v < lx.cols(); ++v) {
        const double combined = lx(p, v) + ly(p, v);
        if (combined > best_v) {
          best_v = combined;
          best = v;
        }
      }
      correct += best == rt.atom_targets[k] ? 1 : 0;
      ++total;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
}

double retrieval_accuracy(const ModelParameters& params,
                          const std::vector<FeaturizedMolecule>& data, int batch_size,
                          std::uint64_t eval_seed) {
  Rng rng(eval_seed);
  std::vector<long> order(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) order[i] = static_cast<long>(i);
  rng.shuffle(order);

  long correct = 0, total = 0;
  for (std::size_t b0 = 0; b0 + 1 < data.size(); b0 += static_cast<std::size_t>(batch_size)) {
    const std::size_t b1 = std::min(data.size(), b0 + static_cast<std::size_t>(batch_size));
    if (b1 - b0 < 2) break;
    std::vector<Tensor> xs, ys;
    for (std::size_t i = b0; i < b1; ++i) {
      const FeaturizedMolecule& rec = data[static_cast<std::size_t>(order[i])];
      Batch batch = collate({rec});
      RecordTensors rt = prepare_record(batch.items[0], params.cfg);
      Graph g;
      ModelForward mf(g, params);
      Stage1Forward s = mf.forward_paired(rt);
      xs.push_back(g.val(s.x_pool));
      ys.push_back(g.val(s.y_pool));
    }
    for (std::size_t i = 0; i < xs.size(); ++i) {
      double best_v = -1e300;
      std::size_t best_j = 0;
      for (std::size_t j = 0; j < ys.size(); ++j) {
        double dot = 0;
        for (long k = 0; k < xs[i].size(); ++k) dot += xs[i][k] * ys[j][k];
        if (dot > best_v) {
          best_v = dot;
          best_j = j;
        }
      }
      correct += best_j == i ? 1 : 0;
      ++total;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
}

// ----------------------------------------------------------------------------
// Gradient check
// ----------------------------------------------------------------------------

GradCheckResult gradcheck_stage1(const ModelConfig& cfg, const LossWeights& weights,
                                 std::uint64_t seed, int n_atoms, double fd_step) {
  cfg.validate();
  Rng rng(seed);
  RandomMolOptions opt;
  opt.min_atoms = n_atoms;
  opt.max_atoms = n_atoms;
  Rng mol_rng = rng.fork(10);
  const Molecule mol = random_molecule(mol_rng, "gradcheck", opt);
  const FeaturizedMolecule rec = featurize(mol, cfg.feat);

  Batch batch = collate({rec});
  TrainConfig tc;
  tc.seed = seed;
  Rng corrupt_rng = rng.fork(11);
  apply_corruption(batch, tc, cfg, corrupt_rng);
  const RecordTensors rt = prepare_record(batch.items[0], cfg);
  const std::vector<RecordTensors> rts{rt};

  ModelParameters params = ModelParameters::init(cfg, seed);
  // jitter away from structured initial values (identity mixing, zero biases)
  Rng jitter = rng.fork(12);
  for (Tensor& t : params.tensors)
    for (long k = 0; k < t.size(); ++k) t[k] += 0.05 * jitter.normal();

  // analytic pass, recording detached targets
  Graph g;
  g.start_detach_record();
  ModelForward mf(g, params);
  LossGraph lg = build_stage1_loss(mf, rts, weights);
  g.backward(lg.total);
  const std::vector<Tensor> analytic = mf.gradients();
  const std::vector<Tensor> detach_log = g.detach_log();

  const auto eval_loss = [&](const ModelParameters& p) {
    Graph g2;
    g2.set_detach_replay(&detach_log);
    ModelForward mf2(g2, p);
    LossGraph lg2 = build_stage1_loss(mf2, rts, weights);
    return g2.val(lg2.total).item();
  };

  GradCheckResult res;
  Rng pick = rng.fork(13);
  for (std::size_t i = 0; i < params.tensors.size(); ++i) {
    // every entry with nonzero analytic gradient, plus a sample of zero-grad
    // entries per tensor
    std::vector<long> entries;
    std::vector<long> zeros;
    for (long k = 0; k < analytic[i].size(); ++k) {
      if (analytic[i][k] != 0.0)
        entries.push_back(k);
      else
        zeros.push_back(k);
    }
    pick.shuffle(zeros);
    for (std::size_t z = 0; z < zeros.size() && z < 8; ++z) entries.push_back(zeros[z]);

    for (long k : entries) {
      ModelParameters shifted = params;
      shifted.tensors[i][k] += fd_step;
      const double up = eval_loss(shifted);
      shifted.tensors[i][k] -= 2 * fd_step;
      const double down = eval_loss(shifted);
      const double fd = (up - down) / (2 * fd_step);
      const double a = analytic[i][k];
      ++res.checked_entries;
      // Central differences at this step resolve the gradient to roughly
      // eps * |loss| / step in absolute terms; the denominator floor keeps
      // rounding noise on small-magnitude gradients from registering as a
      // relative error.
      const double err = std::abs(a - fd) / std::max({1e-3, std::abs(a), std::abs(fd)});
      if (err > res.max_rel_err) {
        res.max_rel_err = err;
        res.worst_param = params.names[i];
      }
    }
  }
  return res;
}

}  // namespace flexmol
