#include "flexmol/featurize.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <deque>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace flexmol {

void FeatureConfig::validate() const {
  if (max_degree <= 0 || max_hop <= 0 || max_path_len <= 0)
    throw ConfigError("FeatureConfig: all limits must be positive");
  if (max_path_len > max_hop)
    throw ConfigError("FeatureConfig: max_path_len must be <= max_hop");
}

std::uint64_t FeatureConfig::hash() const {
  char buf[96];
  std::snprintf(buf, sizeof(buf), "deg=%d;hop=%d;plen=%d;edim=%d", max_degree, max_hop,
                max_path_len, edge_feat_dim);
  // FNV-1a
  std::uint64_t h = 14695981039346656037ull;
  for (const char* p = buf; *p; ++p) {
    h ^= static_cast<std::uint64_t>(static_cast<unsigned char>(*p));
    h *= 1099511628211ull;
  }
  return h;
}

Tensor Features2D::one_hot(int i, int j) const {
  Tensor t(max_path_len, FeatureConfig::edge_feat_dim);
  const int len = path_len_at(i, j);
  for (int k = 0; k < len; ++k) t(k, code_at(i, j, k)) = 1.0;
  return t;
}

namespace {

std::vector<std::vector<int>> adjacency(int n, const std::vector<Bond>& bonds) {
  std::vector<std::vector<int>> adj(static_cast<std::size_t>(n));
  for (const Bond& b : bonds) {
    adj[static_cast<std::size_t>(b.i)].push_back(b.j);
    adj[static_cast<std::size_t>(b.j)].push_back(b.i);
  }
  for (auto& nb : adj) std::sort(nb.begin(), nb.end());
  return adj;
}

}  // namespace

std::vector<int> compute_degrees(int n, const std::vector<Bond>& bonds,
                                 const FeatureConfig& cfg) {
  std::vector<int> deg(static_cast<std::size_t>(n), 0);
  for (const Bond& b : bonds) {
    ++deg[static_cast<std::size_t>(b.i)];
    ++deg[static_cast<std::size_t>(b.j)];
  }
  for (int& d : deg) d = std::min(d, cfg.max_degree);
  return deg;
}

std::vector<int> compute_spd(int n, const std::vector<Bond>& bonds, const FeatureConfig& cfg) {
  const auto adj = adjacency(n, bonds);
  std::vector<int> spd(static_cast<std::size_t>(n) * static_cast<std::size_t>(n),
                       cfg.spd_unreachable());
  std::vector<int> dist(static_cast<std::size_t>(n));
  for (int s = 0; s < n; ++s) {
    std::fill(dist.begin(), dist.end(), -1);
    std::deque<int> q{s};
    dist[static_cast<std::size_t>(s)] = 0;
    while (!q.empty()) {
      const int u = q.front();
      q.pop_front();
      for (int v : adj[static_cast<std::size_t>(u)]) {
        if (dist[static_cast<std::size_t>(v)] < 0) {
          dist[static_cast<std::size_t>(v)] = dist[static_cast<std::size_t>(u)] + 1;
          q.push_back(v);
        }
      }
    }
    for (int t = 0; t < n; ++t) {
      const int d = dist[static_cast<std::size_t>(t)];
      spd[static_cast<std::size_t>(s * n + t)] =
          d < 0 ? cfg.spd_unreachable() : std::min(d, cfg.max_hop);
    }
  }
  return spd;
}

void compute_edge_paths(int n, const std::vector<Bond>& bonds, const std::vector<int>& spd,
                        const FeatureConfig& cfg, std::vector<int>& path_len,
                        std::vector<std::uint8_t>& path_codes) {
  const auto adj = adjacency(n, bonds);
  // bond type lookup
  std::vector<std::uint8_t> type(static_cast<std::size_t>(n) * static_cast<std::size_t>(n),
                                 FeatureConfig::no_bond_code);
  for (const Bond& b : bonds) {
    type[static_cast<std::size_t>(b.i * n + b.j)] = static_cast<std::uint8_t>(b.type);
    type[static_cast<std::size_t>(b.j * n + b.i)] = static_cast<std::uint8_t>(b.type);
  }

  path_len.assign(static_cast<std::size_t>(n) * static_cast<std::size_t>(n), 0);
  path_codes.assign(static_cast<std::size_t>(n) * static_cast<std::size_t>(n) *
                        static_cast<std::size_t>(cfg.max_path_len),
                    0xFF);

  std::vector<int> dist(static_cast<std::size_t>(n));
  std::vector<int> parent(static_cast<std::size_t>(n));
  for (int s = 0; s < n; ++s) {
    std::fill(dist.begin(), dist.end(), -1);
    std::fill(parent.begin(), parent.end(), -1);
    std::deque<int> q{s};
    dist[static_cast<std::size_t>(s)] = 0;
    while (!q.empty()) {
      const int u = q.front();
      q.pop_front();
      for (int v : adj[static_cast<std::size_t>(u)]) {
        if (dist[static_cast<std::size_t>(v)] < 0) {
          dist[static_cast<std::size_t>(v)] = dist[static_cast<std::size_t>(u)] + 1;
          q.push_back(v);
        }
      }
    }
    // smallest-index predecessor at every node gives the deterministic chain
    for (int v = 0; v < n; ++v) {
      if (v == s || dist[static_cast<std::size_t>(v)] <= 0) continue;
      for (int u : adj[static_cast<std::size_t>(v)]) {
        if (dist[static_cast<std::size_t>(u)] == dist[static_cast<std::size_t>(v)] - 1) {
          parent[static_cast<std::size_t>(v)] = u;
          break;  // adjacency sorted ascending
        }
      }
    }
    for (int t = 0; t < n; ++t) {
      if (t == s) continue;
      const int d = spd[static_cast<std::size_t>(s * n + t)];
      if (d >= cfg.spd_unreachable()) continue;
      const std::size_t base =
          static_cast<std::size_t>(s * n + t) * static_cast<std::size_t>(cfg.max_path_len);
      if (dist[static_cast<std::size_t>(t)] > cfg.max_path_len) {
        // too far to enumerate: flag with no-bond codes only
        path_len[static_cast<std::size_t>(s * n + t)] = cfg.max_path_len;
        for (int k = 0; k < cfg.max_path_len; ++k)
          path_codes[base + static_cast<std::size_t>(k)] = FeatureConfig::no_bond_code;
        continue;
      }
      // walk t -> s, then reverse so codes run from s to t
      std::vector<std::uint8_t> codes;
      int v = t;
      while (v != s) {
        const int u = parent[static_cast<std::size_t>(v)];
        codes.push_back(type[static_cast<std::size_t>(u * n + v)]);
        v = u;
      }
      std::reverse(codes.begin(), codes.end());
      path_len[static_cast<std::size_t>(s * n + t)] = static_cast<int>(codes.size());
      for (std::size_t k = 0; k < codes.size(); ++k) path_codes[base + k] = codes[k];
    }
  }
}

Features2D compute_features_2d(int n, const std::vector<Bond>& bonds, const FeatureConfig& cfg) {
  cfg.validate();
  Features2D f;
  f.n = n;
  f.max_path_len = cfg.max_path_len;
  f.degree = compute_degrees(n, bonds, cfg);
  f.spd = compute_spd(n, bonds, cfg);
  compute_edge_paths(n, bonds, f.spd, cfg, f.path_len, f.path_codes);
  return f;
}

Tensor compute_distances(const Tensor& coords) {
  if (coords.rank() != 2 || coords.cols() != 3)
    throw ValidationError("compute_distances: coords must be n x 3");
  if (!coords.finite()) throw ValidationError("compute_distances: non-finite coordinate");
  const long n = coords.rows();
  Tensor d(n, n);
  for (long i = 0; i < n; ++i) {
    for (long j = i + 1; j < n; ++j) {
      const double dx = coords(i, 0) - coords(j, 0);
      const double dy = coords(i, 1) - coords(j, 1);
      const double dz = coords(i, 2) - coords(j, 2);
      const double dist = std::sqrt(dx * dx + dy * dy + dz * dz);
      d(i, j) = dist;
      d(j, i) = dist;
    }
  }
  return d;
}

FeaturizedMolecule featurize(const Molecule& mol, const FeatureConfig& cfg) {
  FeaturizedMolecule rec;
  rec.mol = mol;
  rec.cfg_hash = cfg.hash();
  if (mol.has_2d()) rec.f2d = compute_features_2d(mol.n(), *mol.bonds, cfg);
  return rec;
}

std::vector<FeaturizedMolecule> featurize_all(const std::vector<Molecule>& mols,
                                              const FeatureConfig& cfg) {
  std::vector<FeaturizedMolecule> out;
  out.reserve(mols.size());
  for (const Molecule& m : mols) out.push_back(featurize(m, cfg));
  return out;
}

namespace {

constexpr std::uint32_t kCacheMagic = 0x46584643;  // "FXFC"
constexpr std::uint32_t kCacheVersion = 1;

template <class T>
void put(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
bool get(std::istream& in, T& v) {
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  return static_cast<bool>(in);
}

void put_string(std::ostream& out, const std::string& s) {
  put(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

bool get_string(std::istream& in, std::string& s) {
  std::uint32_t len = 0;
  if (!get(in, len)) return false;
  s.resize(len);
  in.read(s.data(), static_cast<std::streamsize>(len));
  return static_cast<bool>(in);
}

}  // namespace

void save_feature_cache(const std::string& path, const std::vector<FeaturizedMolecule>& recs,
                        const FeatureConfig& cfg) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write feature cache '" + path + "'");
  put(out, kCacheMagic);
  put(out, kCacheVersion);
  put(out, cfg.hash());
  put(out, static_cast<std::uint64_t>(recs.size()));
  for (const FeaturizedMolecule& r : recs) {
    put_string(out, r.mol.id);
    put(out, static_cast<std::uint8_t>(r.f2d.has_value()));
    if (!r.f2d) continue;
    const Features2D& f = *r.f2d;
    put(out, static_cast<std::int32_t>(f.n));
    put(out, static_cast<std::int32_t>(f.max_path_len));
    for (int d : f.degree) put(out, static_cast<std::int32_t>(d));
    for (int s : f.spd) put(out, static_cast<std::int32_t>(s));
    for (int l : f.path_len) put(out, static_cast<std::int32_t>(l));
    out.write(reinterpret_cast<const char*>(f.path_codes.data()),
              static_cast<std::streamsize>(f.path_codes.size()));
  }
}

std::optional<std::vector<Features2D>> load_feature_cache(const std::string& path,
                                                          const FeatureConfig& cfg,
                                                          const std::vector<Molecule>& mols) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return std::nullopt;
  std::uint32_t magic = 0, version = 0;
  std::uint64_t hash = 0, count = 0;
  if (!get(in, magic) || magic != kCacheMagic) return std::nullopt;
  if (!get(in, version) || version != kCacheVersion) return std::nullopt;
  if (!get(in, hash) || hash != cfg.hash()) return std::nullopt;
  if (!get(in, count) || count != mols.size()) return std::nullopt;

  std::vector<Features2D> out(mols.size());
  for (std::size_t r = 0; r < mols.size(); ++r) {
    std::string id;
    if (!get_string(in, id) || id != mols[r].id) return std::nullopt;
    std::uint8_t present = 0;
    if (!get(in, present)) return std::nullopt;
    if (!present) continue;
    Features2D f;
    std::int32_t n = 0, plen = 0;
    if (!get(in, n) || !get(in, plen)) return std::nullopt;
    f.n = n;
    f.max_path_len = plen;
    const std::size_t nn = static_cast<std::size_t>(n) * static_cast<std::size_t>(n);
    f.degree.resize(static_cast<std::size_t>(n));
    f.spd.resize(nn);
    f.path_len.resize(nn);
    f.path_codes.resize(nn * static_cast<std::size_t>(plen));
    for (auto& d : f.degree) {
      std::int32_t v;
      if (!get(in, v)) return std::nullopt;
      d = v;
    }
    for (auto& s : f.spd) {
      std::int32_t v;
      if (!get(in, v)) return std::nullopt;
      s = v;
    }
    for (auto& l : f.path_len) {
      std::int32_t v;
      if (!get(in, v)) return std::nullopt;
      l = v;
    }
    in.read(reinterpret_cast<char*>(f.path_codes.data()),
            static_cast<std::streamsize>(f.path_codes.size()));
    if (!in) return std::nullopt;
    out[r] = std::move(f);
  }
  return out;
}

std::string feature_cache_path(const std::string& dataset_path, const FeatureConfig& cfg) {
  namespace fs = std::filesystem;
  const fs::path src(dataset_path);
  fs::path dir;
  if (const char* env = std::getenv("FLEXMOL_CACHE_DIR"); env && *env)
    dir = env;
  else
    dir = src.parent_path();
  char suffix[32];
  std::snprintf(suffix, sizeof(suffix), "-%016llx.fxc",
                static_cast<unsigned long long>(cfg.hash()));
  return (dir / (src.stem().string() + suffix)).string();
}

std::vector<FeaturizedMolecule> featurize_with_cache(const std::string& dataset_path,
                                                     const std::vector<Molecule>& mols,
                                                     const FeatureConfig& cfg) {
  const std::string cache = feature_cache_path(dataset_path, cfg);
  if (auto cached = load_feature_cache(cache, cfg, mols)) {
    std::vector<FeaturizedMolecule> out(mols.size());
    for (std::size_t i = 0; i < mols.size(); ++i) {
      out[i].mol = mols[i];
      out[i].cfg_hash = cfg.hash();
      if (mols[i].has_2d()) out[i].f2d = std::move((*cached)[i]);
    }
    return out;
  }
  auto out = featurize_all(mols, cfg);
  try {
    save_feature_cache(cache, out, cfg);
  } catch (const Error&) {
    // cache is best-effort; recompute next time
  }
  return out;
}

}  // namespace flexmol
