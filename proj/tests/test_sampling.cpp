#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "sp2t/association.hpp"
#include "sp2t/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

using namespace sp2t;

namespace {

Aabb box_with_extent(const Vec3& extent) {
  return Aabb{{0, 0, 0}, extent};
}

PointCloud cloud_from_positions(std::vector<Vec3> positions, int64_t channels = 1) {
  PointCloud c;
  c.positions = std::move(positions);
  c.features = Matrix::zeros(int64_t(c.positions.size()), channels);
  return c;
}

// independent greedy max-min reference that recomputes distances each round
std::vector<int64_t> fps_brute(std::span<const Vec3> pos, int64_t k, int64_t start) {
  std::vector<int64_t> sel{start};
  while (int64_t(sel.size()) < k) {
    int64_t best = -1;
    double best_d = -1.0;
    for (int64_t i = 0; i < int64_t(pos.size()); ++i) {
      if (std::find(sel.begin(), sel.end(), i) != sel.end()) continue;
      double mind = std::numeric_limits<double>::infinity();
      for (int64_t s : sel) mind = std::min(mind, squared_norm(pos[size_t(i)] - pos[size_t(s)]));
      if (mind > best_d) {
        best_d = mind;
        best = i;
      }
    }
    sel.push_back(best);
  }
  return sel;
}

}  // namespace

TEST_CASE("spatial_wise_spacing reproduces the bisection hand-trace") {
  // extent (10,10,10), bounds (0.1, 10), range [27,64]:
  // mid 5.05 -> 8 cells < 27; mid 2.575 -> 4 per axis -> 64 in range.
  Config cfg;
  cfg.search_min = 0.1;
  cfg.search_max = 10.0;
  cfg.proxy_count_min = 27;
  cfg.proxy_count_max = 64;
  cfg.max_iter = 20;
  const Aabb box = box_with_extent({10, 10, 10});
  const double s = spatial_wise_spacing(box, cfg);
  CHECK(s == doctest::Approx(2.575).epsilon(1e-12));
  CHECK(grid_cell_count(box, s) == 64);
}

TEST_CASE("spatial_wise_spacing satisfies an exact-count constraint checked by scan") {
  Config cfg;
  cfg.search_min = 0.5;
  cfg.search_max = 8.0;
  cfg.proxy_count_min = 512;
  cfg.proxy_count_max = 512;
  cfg.max_iter = 60;
  const Aabb box = box_with_extent({8, 8, 8});
  const double s = spatial_wise_spacing(box, cfg);
  CHECK(grid_cell_count(box, s) == 512);
  // brute-force scan: 512 cells means ceil(8/s) = 8, i.e. s in [1, 8/7)
  CHECK(s >= 1.0);
  CHECK(s < 8.0 / 7.0);
  for (double probe : {1.0, 1.05, 1.14}) CHECK(grid_cell_count(box, probe) == 512);
  CHECK(grid_cell_count(box, 0.999) > 512);
  CHECK(grid_cell_count(box, 8.0 / 7.0) < 512);
}

TEST_CASE("spatial_wise_spacing returns the first midpoint under a vacuous range") {
  Config cfg;
  cfg.search_min = 0.2;
  cfg.search_max = 3.0;
  cfg.proxy_count_min = 1;
  cfg.proxy_count_max = 1000000000;
  cfg.max_iter = 20;
  const double s = spatial_wise_spacing(box_with_extent({4, 7, 2}), cfg);
  CHECK(s == (0.2 + 3.0) / 2.0);
}

TEST_CASE("spatial_wise_spacing rejects a fully degenerate box") {
  Config cfg;
  CHECK_THROWS_WITH_AS(spatial_wise_spacing(box_with_extent({0, 0, 0}), cfg), "degenerate AABB",
                       std::invalid_argument);
}

TEST_CASE("cell count is monotone non-increasing in the spacing") {
  Rng rng(31);
  for (int trial = 0; trial < 200; ++trial) {
    Vec3 extent;
    for (int k = 0; k < 3; ++k) extent[k] = std::pow(10.0, rng.uniform(-2.0, 2.0));
    const Aabb box = box_with_extent(extent);
    const double s1 = std::pow(10.0, rng.uniform(-2.0, 2.0));
    const double s2 = s1 * rng.uniform(1.0, 10.0);
    CHECK(grid_cell_count(box, s1) >= grid_cell_count(box, s2));
  }
}

TEST_CASE("spatial-wise sampler lands in range over random anisotropic boxes") {
  Config cfg;
  cfg.search_min = 1e-4;
  cfg.search_max = 500.0;
  cfg.max_iter = 60;
  Rng rng(77);
  int feasible_hits = 0;
  for (int trial = 0; trial < 200; ++trial) {
    Vec3 extent;
    for (int k = 0; k < 3; ++k) extent[k] = std::pow(10.0, rng.uniform(-2.0, 2.0));
    const Aabb box = box_with_extent(extent);
    const double s = spatial_wise_spacing(box, cfg);
    const int64_t cells = grid_cell_count(box, s);

    bool feasible = false;
    for (int i = 0; i <= 4000; ++i) {
      const double probe =
          cfg.search_min * std::pow(cfg.search_max / cfg.search_min, double(i) / 4000.0);
      const int64_t c = grid_cell_count(box, probe);
      if (c >= cfg.proxy_count_min && c <= cfg.proxy_count_max) {
        feasible = true;
        break;
      }
    }
    if (feasible) {
      ++feasible_hits;
      CHECK(cells >= cfg.proxy_count_min);
      CHECK(cells <= cfg.proxy_count_max);
    }
  }
  CHECK(feasible_hits > 150);  // the scan should find a window almost always
}

TEST_CASE("fix-number grid follows the box aspect ratio") {
  // points spanning a 2:1 box
  const PointCloud cloud = cloud_from_positions({{0, 0, 0}, {8, 4, 4}});
  Config cfg;
  const ProxySet proxies = sample_proxies(cloud, SamplerKind::fix_number(4, 4, 1), cfg);
  REQUIRE(proxies.grid.has_value());
  const GridSpec& g = *proxies.grid;
  CHECK(g.shape == std::array<int64_t, 3>{4, 4, 1});
  CHECK(g.spacing.x == doctest::Approx(2.0));
  CHECK(g.spacing.y == doctest::Approx(1.0));
  CHECK(g.spacing.x / g.spacing.y == doctest::Approx(2.0));  // stretched cells
  CHECK(proxies.size() == 5 * 5 * 2);
}

TEST_CASE("fix-size grid on a nearly flat box") {
  const PointCloud cloud = cloud_from_positions({{0, 0, 0}, {8, 8, 1e-9}});
  Config cfg;
  const ProxySet proxies = sample_proxies(cloud, SamplerKind::fix_size(1.0), cfg);
  REQUIRE(proxies.grid.has_value());
  CHECK(proxies.grid->shape == std::array<int64_t, 3>{8, 8, 1});
  CHECK(proxies.size() == 9 * 9 * 2);
}

TEST_CASE("fix-size sampler trips the proxy budget") {
  const PointCloud cloud = cloud_from_positions({{0, 0, 0}, {100, 100, 1}});
  Config cfg;
  cfg.proxy_budget = 1000000;
  CHECK_THROWS_WITH_AS(sample_proxies(cloud, SamplerKind::fix_size(0.05), cfg),
                       "proxy budget exceeded", std::runtime_error);
}

TEST_CASE("spatial-wise spacing is identical on all axes") {
  Rng rng(13);
  Config cfg;
  cfg.search_min = 1e-3;
  cfg.search_max = 300.0;
  cfg.max_iter = 40;
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Vec3> pts;
    const double ax = std::pow(10.0, rng.uniform(-1.0, 2.0));
    for (int i = 0; i < 50; ++i) {
      pts.push_back({rng.uniform() * ax, rng.uniform(), rng.uniform() * 3.0});
    }
    const ProxySet proxies = sample_proxies(cloud_from_positions(std::move(pts)),
                                            SamplerKind::spatial_wise(), cfg);
    REQUIRE(proxies.grid.has_value());
    CHECK(proxies.grid->spacing.x == proxies.grid->spacing.y);
    CHECK(proxies.grid->spacing.y == proxies.grid->spacing.z);
  }
}

TEST_CASE("occupancy marks exactly the association corners") {
  // one point strictly inside one cell of a 2x2x2-cell grid
  std::vector<Vec3> pts = {{0.0, 0.0, 0.0}, {2.0, 2.0, 2.0}, {0.4, 1.3, 0.7}};
  Config cfg;
  const ProxySet proxies =
      sample_proxies(cloud_from_positions(std::move(pts)), SamplerKind::fix_number(2, 2, 2), cfg);
  const PointCloud cloud2 = cloud_from_positions({{0.0, 0.0, 0.0}, {2.0, 2.0, 2.0}, {0.4, 1.3, 0.7}});
  const AssociationList assoc = vertex_associate(cloud2, proxies, 3);
  std::set<int64_t> assoc_vertices(assoc.px.begin(), assoc.px.end());
  for (int64_t v = 0; v < proxies.size(); ++v) {
    CHECK(bool(proxies.occupied[size_t(v)]) == bool(assoc_vertices.count(v)));
  }
}

TEST_CASE("fps selects the extremes of a segment") {
  std::vector<Vec3> pts;
  for (int i = 0; i < 10; ++i) pts.push_back({double(i), 0, 0});
  CHECK(fps_greedy(pts, 2, 0) == std::vector<int64_t>{0, 9});
  // third pick: min-dist maximized at 4 or 5 (both 4 away); tie -> lowest index
  CHECK(fps_greedy(pts, 3, 0) == std::vector<int64_t>{0, 9, 4});
}

TEST_CASE("fps with k = N is a permutation") {
  Rng rng(17);
  std::vector<Vec3> pts;
  for (int i = 0; i < 23; ++i) pts.push_back({rng.uniform(), rng.uniform(), rng.uniform()});
  const auto sel = fps(pts, 23, 5);
  std::vector<int64_t> sorted = sel;
  std::sort(sorted.begin(), sorted.end());
  for (int64_t i = 0; i < 23; ++i) CHECK(sorted[size_t(i)] == i);
}

TEST_CASE("fps sample size equals population") {
  std::vector<Vec3> pts = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
  const PointCloud cloud = cloud_from_positions(std::vector<Vec3>(pts));
  Config cfg;
  const ProxySet a = sample_proxies(cloud, SamplerKind::fps(4), cfg);
  const ProxySet b = sample_proxies(cloud, SamplerKind::fps(4), cfg);
  REQUIRE(a.size() == 4);
  CHECK_FALSE(a.grid.has_value());
  for (int64_t i = 0; i < 4; ++i) {
    CHECK(a.positions[size_t(i)].x == b.positions[size_t(i)].x);  // deterministic given seed
    CHECK(a.occupied[size_t(i)] == 1);
  }
}

TEST_CASE("fps matches the brute-force greedy on small clouds") {
  Rng rng(29);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<Vec3> pts;
    const int64_t n = 16 + rng.below(49);
    for (int64_t i = 0; i < n; ++i)
      pts.push_back({rng.uniform(), rng.uniform(), rng.uniform()});
    const int64_t k = 2 + rng.below(n - 2);
    const int64_t start = rng.below(n);
    CHECK(fps_greedy(pts, k, start) == fps_brute(pts, k, start));
  }
}

TEST_CASE("fps rejects out-of-range k") {
  std::vector<Vec3> pts = {{0, 0, 0}, {1, 1, 1}};
  CHECK_THROWS(fps_greedy(pts, 3, 0));
  CHECK_THROWS(fps_greedy(pts, 0, 0));
}
