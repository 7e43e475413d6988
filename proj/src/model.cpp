#include "flexmol/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "flexmol/rng.hpp"

namespace flexmol {

void ModelConfig::validate() const {
  if (d <= 0 || K <= 0 || F < 1 || L < 1 || H <= 0 || mlp_ratio <= 0)
    throw ConfigError("ModelConfig: dimensions and depths must be positive");
  if (d % H != 0) throw ConfigError("ModelConfig: d must be divisible by H");
  if (charge_buckets <= 0 || charge_buckets % 2 == 0)
    throw ConfigError("ModelConfig: charge_buckets must be odd and positive");
  feat.validate();
}

long ModelConfig::vocab_index(int z, int charge, bool is_mask_token) const {
  if (is_mask_token) return mask_token_index();
  const int half = charge_buckets / 2;
  if (z < 1 || z > max_atomic_number)
    throw ValidationError("atom out of vocabulary: atomic number " + std::to_string(z));
  if (charge < -half || charge > half)
    throw ValidationError("atom out of vocabulary: formal charge " + std::to_string(charge));
  return static_cast<long>(z - 1) * charge_buckets + (charge + half);
}

std::pair<int, int> ModelConfig::vocab_entry(long index) const {
  const int half = charge_buckets / 2;
  const int z = static_cast<int>(index / charge_buckets) + 1;
  const int c = static_cast<int>(index % charge_buckets) - half;
  return {z, c};
}

// ----------------------------------------------------------------------------
// Parameters
// ----------------------------------------------------------------------------

int ModelParameters::find(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? -1 : it->second;
}

Tensor& ModelParameters::at(const std::string& name) {
  const int i = find(name);
  if (i < 0) throw Error("unknown parameter '" + name + "'");
  return tensors[static_cast<std::size_t>(i)];
}

const Tensor& ModelParameters::at(const std::string& name) const {
  const int i = find(name);
  if (i < 0) throw Error("unknown parameter '" + name + "'");
  return tensors[static_cast<std::size_t>(i)];
}

void ModelParameters::add(const std::string& name, Tensor t) {
  if (find(name) >= 0) throw Error("duplicate parameter '" + name + "'");
  index_[name] = static_cast<int>(names.size());
  names.push_back(name);
  tensors.push_back(std::move(t));
  frozen.push_back(0);
}

void ModelParameters::set_frozen_prefix(const std::string& prefix, bool value) {
  bool any = false;
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i].rfind(prefix, 0) == 0) {
      frozen[i] = value ? 1 : 0;
      any = true;
    }
  }
  if (!any) throw Error("no parameters match prefix '" + prefix + "'");
}

long ModelParameters::total_params() const {
  long total = 0;
  for (const Tensor& t : tensors) total += t.size();
  return total;
}

namespace {

Tensor randn(Rng& rng, long r, long c, double std) {
  Tensor t(r, c);
  for (long k = 0; k < t.size(); ++k) t[k] = std * rng.normal();
  return t;
}

void add_attention(ModelParameters& p, Rng& rng, const std::string& prefix, int d) {
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  p.add(prefix + ".wq", randn(rng, d, d, s));
  p.add(prefix + ".bq", Tensor(1, d));
  p.add(prefix + ".wk", randn(rng, d, d, s));
  p.add(prefix + ".bk", Tensor(1, d));
  p.add(prefix + ".wv", randn(rng, d, d, s));
  p.add(prefix + ".bv", Tensor(1, d));
  p.add(prefix + ".wo", randn(rng, d, d, s));
  p.add(prefix + ".bo", Tensor(1, d));
  p.add(prefix + ".lng", Tensor::ones(1, d));
  p.add(prefix + ".lnb", Tensor(1, d));
}

void add_ff(ModelParameters& p, Rng& rng, const std::string& prefix, int d, int ratio) {
  const long hidden = static_cast<long>(d) * ratio;
  p.add(prefix + ".lng", Tensor::ones(1, d));
  p.add(prefix + ".lnb", Tensor(1, d));
  p.add(prefix + ".w1", randn(rng, d, hidden, 1.0 / std::sqrt(static_cast<double>(d))));
  p.add(prefix + ".b1", Tensor(1, hidden));
  p.add(prefix + ".w2", randn(rng, hidden, d, 1.0 / std::sqrt(static_cast<double>(hidden))));
  p.add(prefix + ".b2", Tensor(1, d));
}

}  // namespace

ModelParameters ModelParameters::init(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  ModelParameters p;
  p.cfg = cfg;
  const int d = cfg.d;
  const int K = cfg.K;
  const int H = cfg.H;
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  const double sk = 1.0 / std::sqrt(static_cast<double>(K));

  p.add("embed.atom", randn(rng, cfg.atom_vocab(), d, 0.1));
  p.add("embed.degree", randn(rng, cfg.feat.max_degree + 1, d, 0.1));
  p.add("embed.spd", randn(rng, cfg.feat.spd_classes(), 1, 0.02));
  p.add("embed.edgepath", randn(rng, cfg.feat.max_path_len, FeatureConfig::edge_feat_dim, 0.02));

  // Gaussian basis: means evenly spaced over [0, 10] A, stds softplus-init 1.
  Tensor mu(1, K);
  for (int k = 0; k < K; ++k)
    mu[k] = K == 1 ? 0.0 : 10.0 * static_cast<double>(k) / static_cast<double>(K - 1);
  p.add("gauss.mu", std::move(mu));
  p.add("gauss.rho", Tensor::full(1, K, std::log(std::exp(1.0) - 1.0)));
  p.add("gauss.gamma", Tensor::ones(ModelConfig::pair_classes, 1));
  p.add("gauss.beta", Tensor(ModelConfig::pair_classes, 1));
  p.add("gauss.wd", randn(rng, K, d, sk));
  p.add("gauss.wd1", randn(rng, K, K, sk));
  p.add("gauss.wd2", randn(rng, K, 1, sk));

  // scalar bias -> per-head channels, plus per-layer channel mixing
  p.add("pair.lift.w", Tensor::ones(1, H));
  p.add("pair.lift.b", Tensor(1, H));
  Tensor mix(H, H);
  for (int h = 0; h < H; ++h) mix(h, h) = 1.0;
  p.add("pair.mix", std::move(mix));

  for (int l = 0; l < cfg.F; ++l) {
    const std::string base = "enc." + std::to_string(l);
    add_attention(p, rng, base + ".attn", d);  // shared across 2D/3D calls
    add_ff(p, rng, base + ".ff2d", d, cfg.mlp_ratio);
    add_ff(p, rng, base + ".ff3d", d, cfg.mlp_ratio);
  }
  for (int l = 0; l < cfg.F; ++l) {
    const std::string base = "dec." + std::to_string(l);
    add_attention(p, rng, base + ".attn", d);  // shared across both decoders
    add_attention(p, rng, base + ".cross.to2d", d);
    add_attention(p, rng, base + ".cross.to3d", d);
    add_ff(p, rng, base + ".ff.to2d", d, cfg.mlp_ratio);
    add_ff(p, rng, base + ".ff.to3d", d, cfg.mlp_ratio);
  }
  for (int l = 0; l < cfg.L; ++l) {
    const std::string base = "mm." + std::to_string(l);
    add_attention(p, rng, base + ".attn", d);
    add_ff(p, rng, base + ".ff", d, cfg.mlp_ratio);
  }

  for (const char* fl : {"fl2d", "fl3d"}) {
    p.add(std::string(fl) + ".w1", randn(rng, d, d, sd));
    p.add(std::string(fl) + ".b1", Tensor(1, d));
    p.add(std::string(fl) + ".w2", randn(rng, d, d, sd));
    p.add(std::string(fl) + ".b2", Tensor(1, d));
  }

  p.add("head.atom.w1", randn(rng, d, d, sd));
  p.add("head.atom.b1", Tensor(1, d));
  p.add("head.atom.w2", randn(rng, d, cfg.atom_vocab(), sd));
  p.add("head.atom.b2", Tensor(1, cfg.atom_vocab()));

  p.add("head.pos.w", randn(rng, H, 1, 0.01));
  p.add("head.pos.b", Tensor(1, 1));

  p.add("head.spd.w1", randn(rng, 2 * H, d, 1.0 / std::sqrt(2.0 * H)));
  p.add("head.spd.b1", Tensor(1, d));
  p.add("head.spd.w2", randn(rng, d, cfg.feat.spd_classes(), sd));
  p.add("head.spd.b2", Tensor(1, cfg.feat.spd_classes()));
  return p;
}

// ----------------------------------------------------------------------------
// Checkpoint io
// ----------------------------------------------------------------------------

namespace {

constexpr std::uint64_t kCkptMagic = 0x31504b434d584c46ull;  // "FLXMCKP1"
constexpr std::uint32_t kCkptVersion = 1;

template <class T>
void put(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
void get_or_throw(std::istream& in, T& v, const char* what) {
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw ParseError(std::string("checkpoint: truncated reading ") + what);
}

}  // namespace

void save_checkpoint(const ModelParameters& params, long step, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint '" + path + "'");
  const ModelConfig& c = params.cfg;
  put(out, kCkptMagic);
  put(out, kCkptVersion);
  for (int v : {c.d, c.K, c.F, c.L, c.H, c.mlp_ratio, c.max_atomic_number, c.charge_buckets,
                c.feat.max_degree, c.feat.max_hop, c.feat.max_path_len})
    put(out, static_cast<std::int32_t>(v));
  put(out, c.feat.hash());
  put(out, static_cast<std::int64_t>(step));
  put(out, static_cast<std::uint32_t>(params.names.size()));
  for (std::size_t i = 0; i < params.names.size(); ++i) {
    const std::string& name = params.names[i];
    put(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    const Tensor& t = params.tensors[i];
    put(out, static_cast<std::uint32_t>(t.rank()));
    for (long s : t.shape_) put(out, static_cast<std::int64_t>(s));
    out.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(t.size() * static_cast<long>(sizeof(double))));
  }
  if (!out) throw Error("failed writing checkpoint '" + path + "'");
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open checkpoint '" + path + "'");
  std::uint64_t magic = 0;
  std::uint32_t version = 0;
  get_or_throw(in, magic, "magic");
  if (magic != kCkptMagic) throw ParseError("checkpoint: bad magic");
  get_or_throw(in, version, "version");
  if (version != kCkptVersion)
    throw ParseError("checkpoint: unsupported version " + std::to_string(version));

  ModelConfig c;
  std::int32_t v;
  auto geti = [&](const char* what) {
    get_or_throw(in, v, what);
    return static_cast<int>(v);
  };
  c.d = geti("d");
  c.K = geti("K");
  c.F = geti("F");
  c.L = geti("L");
  c.H = geti("H");
  c.mlp_ratio = geti("mlp_ratio");
  c.max_atomic_number = geti("max_atomic_number");
  c.charge_buckets = geti("charge_buckets");
  c.feat.max_degree = geti("max_degree");
  c.feat.max_hop = geti("max_hop");
  c.feat.max_path_len = geti("max_path_len");
  std::uint64_t stored_hash = 0;
  get_or_throw(in, stored_hash, "feature hash");
  if (stored_hash != c.feat.hash())
    throw ParseError("checkpoint: feature config hash mismatch");
  std::int64_t step = 0;
  get_or_throw(in, step, "step");
  std::uint32_t count = 0;
  get_or_throw(in, count, "tensor count");

  LoadedCheckpoint out;
  out.params.cfg = c;
  out.step = static_cast<long>(step);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint32_t len = 0;
    get_or_throw(in, len, "name length");
    std::string name(len, '\0');
    in.read(name.data(), static_cast<std::streamsize>(len));
    if (!in) throw ParseError("checkpoint: truncated name");
    std::uint32_t rank = 0;
    get_or_throw(in, rank, "rank");
    std::vector<long> shape(rank);
    for (auto& s : shape) {
      std::int64_t dim = 0;
      get_or_throw(in, dim, "dim");
      s = static_cast<long>(dim);
    }
    Tensor t(shape);
    in.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(t.size() * static_cast<long>(sizeof(double))));
    if (!in) throw ParseError("checkpoint: truncated tensor data");
    out.params.add(name, std::move(t));
  }
  return out;
}

// ----------------------------------------------------------------------------
// Collate
// ----------------------------------------------------------------------------

Batch collate(const std::vector<FeaturizedMolecule>& recs,
              const std::vector<int>& conformer_choice) {
  if (recs.empty()) throw ValidationError("collate: empty batch");
  const std::uint64_t hash = recs[0].cfg_hash;
  long pad_to = 0;
  for (const FeaturizedMolecule& r : recs) {
    if (r.cfg_hash != hash)
      throw ValidationError("collate: mixed feature configurations in one batch");
    pad_to = std::max(pad_to, static_cast<long>(r.mol.n()));
  }

  Batch batch;
  batch.pad_to = pad_to;
  for (std::size_t ri = 0; ri < recs.size(); ++ri) {
    const FeaturizedMolecule& r = recs[ri];
    const long n = r.mol.n();
    CollatedRecord c;
    c.id = r.mol.id;
    c.n_real = n;
    c.pad_to = pad_to;
    c.cfg_hash = r.cfg_hash;
    c.z.assign(static_cast<std::size_t>(pad_to), 0);
    c.charge.assign(static_cast<std::size_t>(pad_to), 0);
    c.mask_token.assign(static_cast<std::size_t>(pad_to), 0);
    c.atom_mask.assign(static_cast<std::size_t>(pad_to), 0);
    for (long i = 0; i < n; ++i) {
      c.z[static_cast<std::size_t>(i)] = r.mol.atomic_numbers[static_cast<std::size_t>(i)];
      c.charge[static_cast<std::size_t>(i)] = r.mol.formal_charges[static_cast<std::size_t>(i)];
      c.atom_mask[static_cast<std::size_t>(i)] = 1;
    }
    c.z_orig = c.z;
    c.charge_orig = c.charge;
    c.f2d = r.f2d;
    if (r.mol.has_3d()) {
      int which = 0;
      if (!conformer_choice.empty()) {
        which = conformer_choice[ri];
        if (which < 0 || which >= static_cast<int>(r.mol.conformers->size()))
          throw ValidationError("collate: conformer index out of range for '" + c.id + "'");
      }
      Tensor coords(pad_to, 3);
      const Tensor& src = (*r.mol.conformers)[static_cast<std::size_t>(which)];
      for (long i = 0; i < n; ++i)
        for (long k = 0; k < 3; ++k) coords(i, k) = src(i, k);
      c.coords_true = coords;
      c.coords_in = coords;
    }
    c.attn_sentinel = Tensor(pad_to, pad_to);
    for (long i = 0; i < pad_to; ++i)
      for (long j = 0; j < pad_to; ++j)
        if (i >= n || j >= n) c.attn_sentinel(i, j) = kBiasSentinel;
    batch.items.push_back(std::move(c));
  }
  return batch;
}

// ----------------------------------------------------------------------------
// Record tensors
// ----------------------------------------------------------------------------

RecordTensors prepare_record(const CollatedRecord& rec, const ModelConfig& cfg) {
  if (rec.cfg_hash != cfg.feat.hash())
    throw ConfigError("record featurized with a different FeatureConfig than the model");
  RecordTensors rt;
  const long n = rec.pad_to;
  const long nr = rec.n_real;
  rt.n = n;
  rt.n_real = nr;
  rt.has2d = rec.has_2d();
  rt.has3d = rec.has_3d();

  rt.atom_idx.assign(static_cast<std::size_t>(n), 0);
  for (long i = 0; i < nr; ++i)
    rt.atom_idx[static_cast<std::size_t>(i)] =
        cfg.vocab_index(rec.z[static_cast<std::size_t>(i)], rec.charge[static_cast<std::size_t>(i)],
                        rec.mask_token[static_cast<std::size_t>(i)] != 0);

  rt.atom_mask_col = Tensor(n, 1);
  for (long i = 0; i < nr; ++i) rt.atom_mask_col(i, 0) = 1.0;
  rt.mask_stream = Tensor(n, cfg.d);
  for (long i = 0; i < nr; ++i)
    for (long j = 0; j < cfg.d; ++j) rt.mask_stream(i, j) = 1.0;

  rt.pair_mask = Tensor(n, n);
  rt.offdiag_mask = Tensor(n, n);
  for (long i = 0; i < nr; ++i)
    for (long j = 0; j < nr; ++j) {
      rt.pair_mask(i, j) = 1.0;
      if (i != j) rt.offdiag_mask(i, j) = 1.0;
    }
  rt.pair_mask_K = Tensor(n * n, cfg.K);
  for (long i = 0; i < nr; ++i)
    for (long j = 0; j < nr; ++j)
      for (long k = 0; k < cfg.K; ++k) rt.pair_mask_K(i * n + j, k) = 1.0;
  rt.sentinel = rec.attn_sentinel;

  rt.centrality_sum = Tensor(n, n * n);
  for (long i = 0; i < nr; ++i)
    for (long j = 0; j < nr; ++j) rt.centrality_sum(i, i * n + j) = 1.0;

  if (rt.has2d) {
    const Features2D& f = *rec.f2d;
    rt.degree_idx.assign(static_cast<std::size_t>(n), 0);
    for (long i = 0; i < nr; ++i)
      rt.degree_idx[static_cast<std::size_t>(i)] = f.degree[static_cast<std::size_t>(i)];

    rt.spd_select = Tensor(n * n, cfg.feat.spd_classes());
    rt.path_select =
        Tensor(n * n, static_cast<long>(cfg.feat.max_path_len) * FeatureConfig::edge_feat_dim);
    for (long i = 0; i < nr; ++i)
      for (long j = 0; j < nr; ++j) {
        const int spd = f.spd_at(static_cast<int>(i), static_cast<int>(j));
        rt.spd_select(i * n + j, spd) = 1.0;
        const int len = f.path_len_at(static_cast<int>(i), static_cast<int>(j));
        if (len > 0) {
          const double w = 1.0 / static_cast<double>(len);
          for (int k = 0; k < len; ++k) {
            const int code = f.code_at(static_cast<int>(i), static_cast<int>(j), k);
            rt.path_select(i * n + j, k * FeatureConfig::edge_feat_dim + code) = w;
          }
        }
        if (i != j) {
          rt.spd_rows.push_back(i * n + j);
          rt.spd_targets.push_back(spd);
        }
      }
  }

  if (rt.has3d) {
    rt.coords_in = *rec.coords_in;
    rt.coords_true = *rec.coords_true;
    const Tensor dist = compute_distances(rt.coords_in);
    rt.dist_flat = Tensor(n * n, 1);
    for (long i = 0; i < n; ++i)
      for (long j = 0; j < n; ++j) rt.dist_flat(i * n + j, 0) = dist(i, j);
    // pair class: the bond type for bonded pairs, otherwise no-bond
    std::vector<int> pair_class(static_cast<std::size_t>(n * n), ModelConfig::pair_classes - 1);
    if (rec.has_2d()) {
      const Features2D& f = *rec.f2d;
      for (long i = 0; i < nr; ++i)
        for (long j = 0; j < nr; ++j)
          if (i != j && f.spd_at(static_cast<int>(i), static_cast<int>(j)) == 1)
            pair_class[static_cast<std::size_t>(i * n + j)] =
                f.code_at(static_cast<int>(i), static_cast<int>(j), 0);
    }
    rt.class_select = Tensor(n * n, ModelConfig::pair_classes);
    for (long i = 0; i < nr; ++i)
      for (long j = 0; j < nr; ++j)
        rt.class_select(i * n + j, pair_class[static_cast<std::size_t>(i * n + j)]) = 1.0;
  }

  for (long p : rec.corrupt_positions) {
    rt.corrupt_positions.push_back(p);
    rt.atom_targets.push_back(cfg.vocab_index(rec.z_orig[static_cast<std::size_t>(p)],
                                              rec.charge_orig[static_cast<std::size_t>(p)], false));
  }
  return rt;
}

// ----------------------------------------------------------------------------
// Forward
// ----------------------------------------------------------------------------

ModelForward::ModelForward(Graph& g, const ModelParameters& params)
    : g_(&g), params_(&params) {
  leaves_.reserve(params.tensors.size());
  for (const Tensor& t : params.tensors) leaves_.push_back(g_->leaf(t));
}

Value ModelForward::param(const std::string& name) const {
  const int i = params_->find(name);
  if (i < 0) throw Error("unknown parameter '" + name + "'");
  return leaves_[static_cast<std::size_t>(i)];
}

std::vector<Tensor> ModelForward::gradients() const {
  std::vector<Tensor> out;
  out.reserve(leaves_.size());
  for (Value v : leaves_) out.push_back(g_->grad(v));
  return out;
}

Value ModelForward::ln_affine(Value x, Value gamma, Value beta) {
  Graph& g = *g_;
  const long m = g.val(x).rows();
  Value normed = g.layer_norm_rows(x);
  Value scaled = g.mul(normed, ops::broadcast_rows(g, gamma, m));
  return g.add(scaled, ops::broadcast_rows(g, beta, m));
}

Value ModelForward::embed_atoms(const std::vector<long>& vocab_idx) {
  return g_->gather_rows(param("embed.atom"), vocab_idx);
}

std::pair<Value, PairRep> ModelForward::build_2d_inputs(Value X, const RecordTensors& rt) {
  Graph& g = *g_;
  const ModelConfig& c = cfg();
  Value deg = g.gather_rows(param("embed.degree"), rt.degree_idx);
  Value x = g.add(X, deg);

  Value b_spd = g.matmul(g.constant(rt.spd_select), param("embed.spd"));     // (n^2,1)
  const long edge_flat = static_cast<long>(c.feat.max_path_len) * FeatureConfig::edge_feat_dim;
  Value edge_w = g.reshape(param("embed.edgepath"), {edge_flat, 1});
  Value b_edge = g.matmul(g.constant(rt.path_select), edge_w);               // (n^2,1)
  Value b = g.add(b_spd, b_edge);

  // scalar bias -> H channels
  Value lifted = g.matmul(b, param("pair.lift.w"));                          // (n^2,H)
  lifted = g.add(lifted, ops::broadcast_rows(g, param("pair.lift.b"), rt.n * rt.n));
  PairRep P;
  for (int h = 0; h < c.H; ++h) {
    Value ch = g.reshape(g.slice_cols(lifted, h, h + 1), {rt.n, rt.n});
    P.heads.push_back(g.mul(ch, g.constant(rt.pair_mask)));
  }
  return {x, P};
}

Value ModelForward::gaussian_basis(const RecordTensors& rt) {
  Graph& g = *g_;
  const ModelConfig& c = cfg();
  const long nn = rt.n * rt.n;
  Value gamma_pp = g.matmul(g.constant(rt.class_select), param("gauss.gamma"));  // (n^2,1)
  Value beta_pp = g.matmul(g.constant(rt.class_select), param("gauss.beta"));
  Value t = g.add(g.mul(gamma_pp, g.constant(rt.dist_flat)), beta_pp);           // (n^2,1)
  Value t_b = ops::broadcast_cols(g, t, c.K);                                    // (n^2,K)
  Value mu_b = ops::broadcast_rows(g, param("gauss.mu"), nn);
  Value sig_b = ops::broadcast_rows(g, g.softplus(param("gauss.rho")), nn);
  Value inv_sig = g.reciprocal(sig_b);
  Value zed = g.mul(g.sub(t_b, mu_b), inv_sig);
  Value density = g.mul(inv_sig, g.exp_(g.scale(g.mul(zed, zed), -0.5)));
  Value psi = g.scale(density, 0.39894228040143267794);  // 1/sqrt(2*pi)
  return g.mul(psi, g.constant(rt.pair_mask_K));
}

std::pair<Value, PairRep> ModelForward::build_3d_inputs(Value X, Value psi,
                                                        const RecordTensors& rt) {
  Graph& g = *g_;
  const ModelConfig& c = cfg();
  Value summed = g.matmul(g.constant(rt.centrality_sum), psi);  // (n,K)
  Value centrality = g.matmul(summed, param("gauss.wd"));       // (n,d)
  Value y = g.add(X, centrality);

  Value hidden = g.gelu(g.matmul(psi, param("gauss.wd1")));     // (n^2,K)
  Value phi = g.matmul(hidden, param("gauss.wd2"));             // (n^2,1)
  Value lifted = g.matmul(phi, param("pair.lift.w"));
  lifted = g.add(lifted, ops::broadcast_rows(g, param("pair.lift.b"), rt.n * rt.n));
  PairRep Q;
  for (int h = 0; h < c.H; ++h) {
    Value ch = g.reshape(g.slice_cols(lifted, h, h + 1), {rt.n, rt.n});
    Q.heads.push_back(g.mul(ch, g.constant(rt.pair_mask)));
  }
  return {y, Q};
}

Value ModelForward::feature_learner(Value X, Modality which) {
  Graph& g = *g_;
  const std::string p = which == Modality::only_2d ? "fl2d" : "fl3d";
  const long m = g.val(X).rows();
  Value h = g.add(g.matmul(X, param(p + ".w1")), ops::broadcast_rows(g, param(p + ".b1"), m));
  h = g.gelu(h);
  return g.add(g.matmul(h, param(p + ".w2")), ops::broadcast_rows(g, param(p + ".b2"), m));
}

std::vector<Value> ModelForward::mixed_bias(const PairRep& pair, long n) {
  Graph& g = *g_;
  const int H = cfg().H;
  std::vector<Value> flat;
  flat.reserve(pair.heads.size());
  for (Value h : pair.heads) flat.push_back(g.reshape(h, {n * n, 1}));
  Value cols = g.concat_cols(flat);                       // (n^2,H)
  Value mixed = g.matmul(cols, g.transpose(param("pair.mix")));
  std::vector<Value> out;
  out.reserve(static_cast<std::size_t>(H));
  for (int h = 0; h < H; ++h)
    out.push_back(g.reshape(g.slice_cols(mixed, h, h + 1), {n, n}));
  return out;
}

Value ModelForward::self_attention(Value stream, PairRep& pair, const std::string& prefix,
                                   const RecordTensors& rt) {
  Graph& g = *g_;
  const ModelConfig& c = cfg();
  const long n = rt.n;
  const int dh = c.head_dim();
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  Value u = ln_affine(stream, param(prefix + ".lng"), param(prefix + ".lnb"));
  Value q = g.add(g.matmul(u, param(prefix + ".wq")), ops::broadcast_rows(g, param(prefix + ".bq"), n));
  Value k = g.add(g.matmul(u, param(prefix + ".wk")), ops::broadcast_rows(g, param(prefix + ".bk"), n));
  Value v = g.add(g.matmul(u, param(prefix + ".wv")), ops::broadcast_rows(g, param(prefix + ".bv"), n));

  const std::vector<Value> bias = mixed_bias(pair, n);
  Value sentinel = g.constant(rt.sentinel);
  Value pmask = g.constant(rt.pair_mask);

  std::vector<Value> head_out;
  head_out.reserve(static_cast<std::size_t>(c.H));
  for (int h = 0; h < c.H; ++h) {
    Value qh = g.slice_cols(q, h * dh, (h + 1) * dh);
    Value kh = g.slice_cols(k, h * dh, (h + 1) * dh);
    Value vh = g.slice_cols(v, h * dh, (h + 1) * dh);
    Value scores = g.scale(g.matmul(qh, g.transpose(kh)), inv_sqrt_dh);  // (n,n)
    Value logits = g.add(g.add(scores, bias[static_cast<std::size_t>(h)]), sentinel);
    Value attn = g.softmax_rows(logits);
    head_out.push_back(g.matmul(attn, vh));
    // atom-to-pair update: add the scaled Query-Key products, real pairs only
    pair.heads[static_cast<std::size_t>(h)] =
        g.add(pair.heads[static_cast<std::size_t>(h)], g.mul(scores, pmask));
  }
  Value merged = g.concat_cols(head_out);
  Value out = g.add(g.matmul(merged, param(prefix + ".wo")),
                    ops::broadcast_rows(g, param(prefix + ".bo"), n));
  return g.add(stream, out);
}

Value ModelForward::cross_attention(Value stream, Value memory, const std::string& prefix,
                                    const RecordTensors& rt) {
  Graph& g = *g_;
  const ModelConfig& c = cfg();
  const long n = rt.n;
  const int dh = c.head_dim();
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  if (g.val(memory).rows() != n) throw Error("cross_attention: memory length mismatch");

  Value u = ln_affine(stream, param(prefix + ".lng"), param(prefix + ".lnb"));
  Value q = g.add(g.matmul(u, param(prefix + ".wq")), ops::broadcast_rows(g, param(prefix + ".bq"), n));
  Value k = g.add(g.matmul(memory, param(prefix + ".wk")),
                  ops::broadcast_rows(g, param(prefix + ".bk"), n));
  Value v = g.add(g.matmul(memory, param(prefix + ".wv")),
                  ops::broadcast_rows(g, param(prefix + ".bv"), n));
  Value sentinel = g.constant(rt.sentinel);

  std::vector<Value> head_out;
  head_out.reserve(static_cast<std::size_t>(c.H));
  for (int h = 0; h < c.H; ++h) {
    Value qh = g.slice_cols(q, h * dh, (h + 1) * dh);
    Value kh = g.slice_cols(k, h * dh, (h + 1) * dh);
    Value vh = g.slice_cols(v, h * dh, (h + 1) * dh);
    Value logits = g.add(g.scale(g.matmul(qh, g.transpose(kh)), inv_sqrt_dh), sentinel);
    head_out.push_back(g.matmul(g.softmax_rows(logits), vh));
  }
  Value merged = g.concat_cols(head_out);
  Value out = g.add(g.matmul(merged, param(prefix + ".wo")),
                    ops::broadcast_rows(g, param(prefix + ".bo"), n));
  return g.add(stream, out);
}

Value ModelForward::feed_forward(Value stream, const std::string& prefix) {
  Graph& g = *g_;
  const long n = g.val(stream).rows();
  Value u = ln_affine(stream, param(prefix + ".lng"), param(prefix + ".lnb"));
  Value h = g.gelu(
      g.add(g.matmul(u, param(prefix + ".w1")), ops::broadcast_rows(g, param(prefix + ".b1"), n)));
  Value out =
      g.add(g.matmul(h, param(prefix + ".w2")), ops::broadcast_rows(g, param(prefix + ".b2"), n));
  return g.add(stream, out);
}

EncoderResult ModelForward::encoder_forward(Value stream, const PairRep& pair, Modality which,
                                            const RecordTensors& rt) {
  PairRep p = pair;
  const char* ff = which == Modality::only_2d ? ".ff2d" : ".ff3d";
  for (int l = 0; l < cfg().F; ++l) {
    const std::string base = "enc." + std::to_string(l);
    stream = self_attention(stream, p, base + ".attn", rt);
    stream = feed_forward(stream, base + ff);
    if (!g_->val(stream).finite())
      throw Error("encoder layer " + std::to_string(l) + " produced non-finite values");
  }
  return {stream, std::move(p)};
}

EncoderResult ModelForward::decoder_forward(Value source, const PairRep& self_bias, Value memory,
                                            DecoderDirection dir, const RecordTensors& rt) {
  PairRep p = self_bias;
  Value stream = source;
  const char* suffix = dir == DecoderDirection::to2d ? ".to2d" : ".to3d";
  for (int l = 0; l < cfg().F; ++l) {
    const std::string base = "dec." + std::to_string(l);
    stream = self_attention(stream, p, base + ".attn", rt);
    stream = cross_attention(stream, memory, base + ".cross" + suffix, rt);
    stream = feed_forward(stream, base + ".ff" + suffix);
    if (!g_->val(stream).finite())
      throw Error("decoder layer " + std::to_string(l) + " produced non-finite values");
  }
  return {stream, std::move(p)};
}

EncoderResult ModelForward::mm_encoder(Value stream, const PairRep& pair,
                                       const RecordTensors& rt) {
  PairRep p = pair;
  for (int l = 0; l < cfg().L; ++l) {
    const std::string base = "mm." + std::to_string(l);
    stream = self_attention(stream, p, base + ".attn", rt);
    stream = feed_forward(stream, base + ".ff");
    if (!g_->val(stream).finite())
      throw Error("multi-modal layer " + std::to_string(l) + " produced non-finite values");
  }
  return {stream, std::move(p)};
}

Value ModelForward::head_masked_atom(Value stream) {
  Graph& g = *g_;
  const long n = g.val(stream).rows();
  Value h = g.gelu(g.add(g.matmul(stream, param("head.atom.w1")),
                         ops::broadcast_rows(g, param("head.atom.b1"), n)));
  return g.add(g.matmul(h, param("head.atom.w2")),
               ops::broadcast_rows(g, param("head.atom.b2"), n));
}

Value ModelForward::head_position(const PairRep& pair, const RecordTensors& rt) {
  Graph& g = *g_;
  const long n = rt.n;
  std::vector<Value> flat;
  for (Value h : pair.heads) flat.push_back(g.reshape(h, {n * n, 1}));
  Value channels = g.concat_cols(flat);  // (n^2,H)
  Value u_flat = g.add(g.matmul(channels, param("head.pos.w")),
                       ops::broadcast_rows(g, param("head.pos.b"), n * n));
  Value U = g.mul(g.reshape(u_flat, {n, n}), g.constant(rt.offdiag_mask));
  Value rowsum = g.matmul(U, g.constant(Tensor::ones(n, 1)));  // (n,1)
  Value coords = g.constant(rt.coords_in);
  Value term1 = g.mul(ops::broadcast_cols(g, rowsum, 3), coords);
  Value term2 = g.matmul(U, coords);
  Value delta = g.scale(g.sub(term1, term2), 1.0 / static_cast<double>(rt.n_real));
  return g.add(coords, delta);
}

Value ModelForward::head_spd(const PairRep& a, const PairRep& b) {
  Graph& g = *g_;
  const long n = g.val(a.heads[0]).rows();
  std::vector<Value> flat;
  for (Value h : a.heads) flat.push_back(g.reshape(h, {n * n, 1}));
  for (Value h : b.heads) flat.push_back(g.reshape(h, {n * n, 1}));
  Value channels = g.concat_cols(flat);  // (n^2,2H)
  Value hid = g.gelu(g.add(g.matmul(channels, param("head.spd.w1")),
                           ops::broadcast_rows(g, param("head.spd.b1"), n * n)));
  return g.add(g.matmul(hid, param("head.spd.w2")),
               ops::broadcast_rows(g, param("head.spd.b2"), n * n));
}

Value ModelForward::pool(Value stream, const RecordTensors& rt) {
  Graph& g = *g_;
  if (rt.n_real < 1) throw ValidationError("pool: no real atoms");
  Value masked_sum = g.matmul(g.transpose(g.constant(rt.atom_mask_col)), stream);  // (1,d)
  Value mean = g.scale(masked_sum, 1.0 / static_cast<double>(rt.n_real));
  Value norm = g.sqrt_(g.add_const(g.sum_all(g.mul(mean, mean)), 1e-30));
  Value inv = ops::broadcast_cols(g, g.reciprocal(norm), g.val(mean).cols());
  return g.mul(mean, inv);
}

PairRep ModelForward::zero_pair(long n) {
  PairRep p;
  for (int h = 0; h < cfg().H; ++h) p.heads.push_back(g_->constant(Tensor(n, n)));
  return p;
}

Stage1Forward ModelForward::forward_paired(const RecordTensors& rt) {
  if (!rt.has2d || !rt.has3d)
    throw ValidationError("paired forward requires both modalities");
  Stage1Forward s;
  Value X = embed_atoms(rt.atom_idx);
  std::tie(s.x, s.P) = build_2d_inputs(X, rt);
  Value psi = gaussian_basis(rt);
  std::tie(s.y, s.Q) = build_3d_inputs(X, psi, rt);
  s.x_tilde = feature_learner(X, Modality::only_2d);
  s.y_tilde = feature_learner(X, Modality::only_3d);

  EncoderResult ex = encoder_forward(s.x, s.P, Modality::only_2d, rt);
  EncoderResult ey = encoder_forward(s.y, s.Q, Modality::only_3d, rt);
  s.x_F = ex.stream;
  s.P_F = ex.pair;
  s.y_F = ey.stream;
  s.Q_F = ey.pair;

  EncoderResult dx = decoder_forward(s.y_F, s.P, s.x_F, DecoderDirection::to2d, rt);
  EncoderResult dy = decoder_forward(s.x_F, s.Q, s.y_F, DecoderDirection::to3d, rt);
  s.x_hat = dx.stream;
  s.P_hat = dx.pair;
  s.y_hat = dy.stream;
  s.Q_hat = dy.pair;

  EncoderResult mx = mm_encoder(s.x_hat, s.P_hat, rt);
  EncoderResult my = mm_encoder(s.y_hat, s.Q_hat, rt);
  s.x_L = mx.stream;
  s.P_L = mx.pair;
  s.y_L = my.stream;
  s.Q_L = my.pair;

  s.atom_logits_x = head_masked_atom(s.x_L);
  s.atom_logits_y = head_masked_atom(s.y_L);
  s.spd_logits = head_spd(s.P_L, s.Q_L);
  s.recovered = head_position(s.Q_L, rt);
  s.x_pool = pool(s.x_F, rt);
  s.y_pool = pool(s.y_F, rt);
  return s;
}

Stage2Forward ModelForward::forward_single(const RecordTensors& rt, Modality which) {
  Stage2Forward s;
  Value X = embed_atoms(rt.atom_idx);
  if (which == Modality::only_2d) {
    if (!rt.has2d) throw ValidationError("2d-only forward requires the 2D modality");
    auto [x, P] = build_2d_inputs(X, rt);
    s.avail_pair = P;
    s.tilde_target = feature_learner(X, Modality::only_3d);
    EncoderResult enc = encoder_forward(x, P, Modality::only_2d, rt);
    s.enc_out = enc.stream;
    EncoderResult dec =
        decoder_forward(s.enc_out, zero_pair(rt.n), s.enc_out, DecoderDirection::to3d, rt);
    s.dec_stream = dec.stream;
    s.dec_pair = dec.pair;
    Value fused = g_->add(s.enc_out, s.dec_stream);
    PairRep fused_pair;
    for (int h = 0; h < cfg().H; ++h)
      fused_pair.heads.push_back(g_->add(s.avail_pair.heads[static_cast<std::size_t>(h)],
                                         s.dec_pair.heads[static_cast<std::size_t>(h)]));
    EncoderResult mm = mm_encoder(fused, fused_pair, rt);
    s.fused_L = mm.stream;
    s.fused_pair_L = mm.pair;
    s.atom_logits = head_masked_atom(s.fused_L);
    s.spd_logits = head_spd(s.fused_pair_L, s.fused_pair_L);
  } else if (which == Modality::only_3d) {
    if (!rt.has3d) throw ValidationError("3d-only forward requires the 3D modality");
    Value psi = gaussian_basis(rt);
    auto [y, Q] = build_3d_inputs(X, psi, rt);
    s.avail_pair = Q;
    s.tilde_target = feature_learner(X, Modality::only_2d);
    EncoderResult enc = encoder_forward(y, Q, Modality::only_3d, rt);
    s.enc_out = enc.stream;
    EncoderResult dec =
        decoder_forward(s.enc_out, zero_pair(rt.n), s.enc_out, DecoderDirection::to2d, rt);
    s.dec_stream = dec.stream;
    s.dec_pair = dec.pair;
    Value fused = g_->add(s.enc_out, s.dec_stream);
    PairRep fused_pair;
    for (int h = 0; h < cfg().H; ++h)
      fused_pair.heads.push_back(g_->add(s.avail_pair.heads[static_cast<std::size_t>(h)],
                                         s.dec_pair.heads[static_cast<std::size_t>(h)]));
    EncoderResult mm = mm_encoder(fused, fused_pair, rt);
    s.fused_L = mm.stream;
    s.fused_pair_L = mm.pair;
    s.atom_logits = head_masked_atom(s.fused_L);
    s.recovered = head_position(s.fused_pair_L, rt);
  } else {
    throw ConfigError("forward_single: modality must be 2d or 3d");
  }
  return s;
}

}  // namespace flexmol
