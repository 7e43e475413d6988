#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>

#include "flexmol/featurize.hpp"
#include "oracles.hpp"

using namespace flexmol;

namespace {

std::vector<Bond> path3() { return {{0, 1, BondType::single}, {1, 2, BondType::triple}}; }

}  // namespace

TEST_CASE("spd on small graphs") {
  FeatureConfig cfg;
  const auto spd = compute_spd(3, path3(), cfg);
  CHECK(spd[0 * 3 + 2] == 2);
  CHECK(spd[2 * 3 + 0] == 2);
  CHECK(spd[0 * 3 + 0] == 0);

  const std::vector<Bond> triangle{{0, 1, BondType::single},
                                   {1, 2, BondType::single},
                                   {0, 2, BondType::single}};
  const auto spd_tri = compute_spd(3, triangle, cfg);
  CHECK(spd_tri[0 * 3 + 2] == 1);
}

TEST_CASE("spd matches floyd-warshall on 200 random graphs") {
  Rng rng(2024);
  FeatureConfig cfg;
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 2 + static_cast<int>(rng.randint(11));
    std::vector<Bond> bonds;
    std::set<std::pair<int, int>> seen;
    // random sparse graph, possibly disconnected
    const int edges = static_cast<int>(rng.randint(n * 2));
    for (int e = 0; e < edges; ++e) {
      const int i = static_cast<int>(rng.randint(n));
      const int j = static_cast<int>(rng.randint(n));
      if (i == j) continue;
      const auto key = std::minmax(i, j);
      if (!seen.insert(key).second) continue;
      bonds.push_back({key.first, key.second, BondType::single});
    }
    const auto spd = compute_spd(n, bonds, cfg);
    const auto oracle = oracles::floyd_warshall(n, bonds);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        const int expected = oracle[static_cast<std::size_t>(i * n + j)];
        const int got = spd[static_cast<std::size_t>(i * n + j)];
        if (expected < 0)
          CHECK(got == cfg.spd_unreachable());
        else
          CHECK(got == std::min(expected, cfg.max_hop));
      }
  }
}

TEST_CASE("spd symmetry, zero diagonal, triangle inequality") {
  Rng rng(11);
  FeatureConfig cfg;
  for (int trial = 0; trial < 40; ++trial) {
    RandomMolOptions opt;
    opt.with_coords = false;
    const Molecule m = random_molecule(rng, "t", opt);
    const int n = m.n();
    const auto spd = compute_spd(n, *m.bonds, cfg);
    for (int i = 0; i < n; ++i) {
      CHECK(spd[static_cast<std::size_t>(i * n + i)] == 0);
      for (int j = 0; j < n; ++j) {
        CHECK(spd[static_cast<std::size_t>(i * n + j)] == spd[static_cast<std::size_t>(j * n + i)]);
        for (int k = 0; k < n; ++k) {
          const int dij = spd[static_cast<std::size_t>(i * n + j)];
          const int dik = spd[static_cast<std::size_t>(i * n + k)];
          const int dkj = spd[static_cast<std::size_t>(k * n + j)];
          if (dik <= cfg.max_hop && dkj <= cfg.max_hop && dij <= cfg.max_hop)
            CHECK(dij <= dik + dkj);
        }
      }
    }
  }
}

TEST_CASE("edge paths read off the bond sequence") {
  FeatureConfig cfg;
  const Features2D f = compute_features_2d(3, path3(), cfg);
  CHECK(f.path_len_at(0, 1) == 1);
  CHECK(f.code_at(0, 1, 0) == static_cast<int>(BondType::single));
  CHECK(f.path_len_at(0, 2) == 2);
  CHECK(f.code_at(0, 2, 0) == static_cast<int>(BondType::single));
  CHECK(f.code_at(0, 2, 1) == static_cast<int>(BondType::triple));
  // one-hot materialization zero-pads beyond the path
  const Tensor oh = f.one_hot(0, 1);
  CHECK(oh(0, static_cast<int>(BondType::single)) == 1.0);
  for (long k = 1; k < oh.rows(); ++k)
    for (long c = 0; c < oh.cols(); ++c) CHECK(oh(k, c) == 0.0);
}

TEST_CASE("square-graph tie breaks through the smaller index") {
  // 0-1-2-3-0: two shortest paths 0->2; the deterministic choice passes node 1
  const std::vector<Bond> square{{0, 1, BondType::single},
                                 {1, 2, BondType::double_bond},
                                 {2, 3, BondType::single},
                                 {0, 3, BondType::triple}};
  FeatureConfig cfg;
  const Features2D f = compute_features_2d(4, square, cfg);
  REQUIRE(f.path_len_at(0, 2) == 2);
  CHECK(f.code_at(0, 2, 0) == static_cast<int>(BondType::single));       // 0-1
  CHECK(f.code_at(0, 2, 1) == static_cast<int>(BondType::double_bond));  // 1-2

  // cross-check against exhaustive enumeration: the chosen path must be one of
  // the shortest paths and have the smallest node sequence
  std::vector<std::vector<int>> all;
  oracles::all_shortest_paths(4, square, 0, 2, all);
  REQUIRE(all.size() == 2);
  std::sort(all.begin(), all.end());
  CHECK(all[0] == std::vector<int>{0, 1, 2});
}

TEST_CASE("edge path properties on random molecules") {
  Rng rng(77);
  FeatureConfig cfg;
  for (int trial = 0; trial < 30; ++trial) {
    RandomMolOptions opt;
    opt.with_coords = false;
    const Molecule m = random_molecule(rng, "t", opt);
    const int n = m.n();
    const Features2D f = compute_features_2d(n, *m.bonds, cfg);
    std::set<std::tuple<int, int, int>> bond_types;
    for (const Bond& b : *m.bonds) {
      bond_types.insert({b.i, b.j, static_cast<int>(b.type)});
      bond_types.insert({b.j, b.i, static_cast<int>(b.type)});
    }
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        const int spd = f.spd_at(i, j);
        if (i == j || spd > cfg.max_hop) {
          CHECK(f.path_len_at(i, j) == 0);
          continue;
        }
        CHECK(f.path_len_at(i, j) == std::min(spd, cfg.max_path_len));
        // every edge on the stored path must exist with the stated type
        // (only verifiable for explicit paths; all are within max_path_len here)
        if (spd <= cfg.max_path_len) {
          // reconstruct the node chain by walking codes is not possible from
          // codes alone, but each code must be a legal bond type on some bond
          for (int k = 0; k < f.path_len_at(i, j); ++k)
            CHECK(f.code_at(i, j, k) < 4);
        }
      }
  }
}

TEST_CASE("degrees count bonds and clamp") {
  FeatureConfig cfg;
  CHECK(compute_degrees(3, path3(), cfg) == std::vector<int>{1, 2, 1});
  CHECK(compute_degrees(2, {}, cfg) == std::vector<int>{0, 0});
  std::vector<Bond> star;
  for (int leaf = 1; leaf <= 10; ++leaf) star.push_back({0, leaf, BondType::single});
  const auto deg = compute_degrees(11, star, cfg);
  CHECK(deg[0] == 8);  // clamped
  CHECK(deg[1] == 1);
}

TEST_CASE("distances: exact values and rigid-motion invariance") {
  Tensor coords(2, 3);
  coords(1, 0) = 3.0;
  coords(1, 1) = 4.0;
  const Tensor d = compute_distances(coords);
  CHECK(d(0, 1) == doctest::Approx(5.0));
  CHECK(d(0, 0) == 0.0);

  Rng rng(123);
  for (int trial = 0; trial < 25; ++trial) {
    Tensor pts(6, 3);
    for (long k = 0; k < pts.size(); ++k) pts[k] = 2.0 * rng.normal();
    const auto rot = oracles::random_rotation(rng);
    const std::array<double, 3> t{rng.normal(), rng.normal(), rng.normal()};
    const Tensor moved = oracles::apply_rigid(pts, rot, t);
    const Tensor d0 = compute_distances(pts);
    const Tensor d1 = compute_distances(moved);
    for (long k = 0; k < d0.size(); ++k) {
      if (d0[k] == 0.0)
        CHECK(std::abs(d1[k]) < 1e-9);
      else
        CHECK(std::abs(d1[k] - d0[k]) / d0[k] < 1e-9);
    }
  }
}

TEST_CASE("distances: permutation equivariance and error path") {
  Rng rng(5);
  Tensor pts(5, 3);
  for (long k = 0; k < pts.size(); ++k) pts[k] = rng.normal();
  const Tensor d = compute_distances(pts);
  const std::vector<long> perm{3, 1, 4, 0, 2};
  Tensor permuted(5, 3);
  for (long i = 0; i < 5; ++i)
    for (long c = 0; c < 3; ++c) permuted(i, c) = pts(perm[static_cast<std::size_t>(i)], c);
  const Tensor dp = compute_distances(permuted);
  for (long i = 0; i < 5; ++i)
    for (long j = 0; j < 5; ++j)
      CHECK(dp(i, j) ==
            doctest::Approx(d(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)])));

  Tensor bad(1, 3);
  bad(0, 0) = std::nan("");
  CHECK_THROWS_AS(compute_distances(bad), ValidationError);
}

TEST_CASE("feature cache round-trips and rejects stale configs") {
  Rng rng(31);
  const auto mols = random_dataset(rng, 6);
  FeatureConfig cfg;
  const auto recs = featurize_all(mols, cfg);

  const std::string dir = std::filesystem::temp_directory_path() / "fxcache-test";
  std::filesystem::create_directories(dir);
  const std::string path = dir + "/feats.fxc";
  save_feature_cache(path, recs, cfg);

  const auto loaded = load_feature_cache(path, cfg, mols);
  REQUIRE(loaded.has_value());
  for (std::size_t i = 0; i < recs.size(); ++i) {
    REQUIRE(recs[i].f2d.has_value());
    CHECK((*loaded)[i].spd == recs[i].f2d->spd);
    CHECK((*loaded)[i].path_codes == recs[i].f2d->path_codes);
    CHECK((*loaded)[i].degree == recs[i].f2d->degree);
  }

  FeatureConfig other;
  other.max_hop = 7;
  CHECK_FALSE(load_feature_cache(path, other, mols).has_value());
  std::filesystem::remove_all(dir);
}
