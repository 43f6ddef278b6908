#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "sp2t/association.hpp"
#include "sp2t/sampling.hpp"

#include <algorithm>
#include <set>
#include <sstream>

using namespace sp2t;

namespace {

ProxySet grid_proxy_set(const GridSpec& grid) {
  ProxySet p;
  p.grid = grid;
  for (int64_t ix = 0; ix <= grid.shape[0]; ++ix)
    for (int64_t iy = 0; iy <= grid.shape[1]; ++iy)
      for (int64_t iz = 0; iz <= grid.shape[2]; ++iz)
        p.positions.push_back(grid.vertex_position(ix, iy, iz));
  p.features = Matrix::zeros(int64_t(p.positions.size()), 1);
  p.occupied.assign(p.positions.size(), 1);
  return p;
}

PointCloud single_point(const Vec3& p) {
  PointCloud c;
  c.positions = {p};
  c.features = Matrix::zeros(1, 1);
  return c;
}

std::set<std::pair<int64_t, int64_t>> pair_set(const AssociationList& a) {
  std::set<std::pair<int64_t, int64_t>> s;
  for (int64_t i = 0; i < a.size(); ++i) s.insert({a.pt[size_t(i)], a.px[size_t(i)]});
  return s;
}

}  // namespace

TEST_CASE("floor/ceil vertices of an interior point") {
  GridSpec grid{{0, 0, 0}, {1, 1, 1}, {4, 4, 4}};
  const AssociationList a = vertex_associate(single_point({1.3, 2.7, 0.5}), grid_proxy_set(grid), 3);
  REQUIRE(a.size() == 8);
  std::set<int64_t> expected;
  for (int64_t x : {1, 2})
    for (int64_t y : {2, 3})
      for (int64_t z : {0, 1}) expected.insert(grid.vertex_index(x, y, z));
  CHECK(std::set<int64_t>(a.px.begin(), a.px.end()) == expected);
}

TEST_CASE("a point on an interior vertex belongs to the positive-side cell") {
  GridSpec grid{{0, 0, 0}, {1, 1, 1}, {4, 4, 4}};
  const AssociationList a = vertex_associate(single_point({2.0, 2.0, 2.0}), grid_proxy_set(grid), 3);
  std::set<int64_t> expected;
  for (int64_t x : {2, 3})
    for (int64_t y : {2, 3})
      for (int64_t z : {2, 3}) expected.insert(grid.vertex_index(x, y, z));
  CHECK(std::set<int64_t>(a.px.begin(), a.px.end()) == expected);
}

TEST_CASE("a point on the max face clamps inward and keeps 8 distinct vertices") {
  GridSpec grid{{0, 0, 0}, {1, 1, 1}, {3, 3, 3}};
  const AssociationList a = vertex_associate(single_point({3.0, 3.0, 3.0}), grid_proxy_set(grid), 3);
  REQUIRE(a.size() == 8);
  std::set<int64_t> vertices(a.px.begin(), a.px.end());
  CHECK(vertices.size() == 8);
  std::set<int64_t> expected;
  for (int64_t x : {2, 3})
    for (int64_t y : {2, 3})
      for (int64_t z : {2, 3}) expected.insert(grid.vertex_index(x, y, z));
  CHECK(vertices == expected);
}

TEST_CASE("points outside the grid beyond tolerance are rejected") {
  GridSpec grid{{0, 0, 0}, {1, 1, 1}, {2, 2, 2}};
  const ProxySet proxies = grid_proxy_set(grid);
  CHECK_THROWS_WITH_AS(vertex_associate(single_point({2.1, 0.5, 0.5}), proxies, 3),
                       "point outside grid", std::runtime_error);
  CHECK_THROWS_AS(vertex_associate(single_point({-0.1, 0.5, 0.5}), proxies, 3),
                  std::runtime_error);
  // within tolerance: a hair outside the max face clamps in
  CHECK_NOTHROW(vertex_associate(single_point({2.0 + 1e-12, 0.5, 0.5}), proxies, 3));
}

TEST_CASE("association dim 2 uses the four xy-face vertices") {
  GridSpec grid{{0, 0, 0}, {1, 1, 1}, {3, 3, 3}};
  const AssociationList a = vertex_associate(single_point({0.5, 1.5, 2.5}), grid_proxy_set(grid), 2);
  REQUIRE(a.size() == 4);
  std::set<int64_t> expected;
  for (int64_t x : {0, 1})
    for (int64_t y : {1, 2}) expected.insert(grid.vertex_index(x, y, 2));
  CHECK(std::set<int64_t>(a.px.begin(), a.px.end()) == expected);
}

TEST_CASE("cardinality is exactly 8 pairs per point") {
  Rng rng(3);
  std::vector<Vec3> pts;
  for (int i = 0; i < 100; ++i)
    pts.push_back({rng.uniform(0.01, 3.99), rng.uniform(0.01, 3.99), rng.uniform(0.01, 3.99)});
  PointCloud cloud;
  cloud.positions = pts;
  cloud.features = Matrix::zeros(100, 1);
  GridSpec grid{{0, 0, 0}, {1, 1, 1}, {4, 4, 4}};
  const AssociationList a = vertex_associate(cloud, grid_proxy_set(grid), 3);
  CHECK(a.size() == 8 * 100);
  for (int64_t p = 0; p < a.n_pt; ++p) {
    CHECK(a.seg_offsets_pt[size_t(p) + 1] - a.seg_offsets_pt[size_t(p)] == 8);
  }
  for (int64_t i = 0; i < a.size(); ++i) {
    CHECK(a.pt[size_t(i)] >= 0);
    CHECK(a.pt[size_t(i)] < a.n_pt);
    CHECK(a.px[size_t(i)] >= 0);
    CHECK(a.px[size_t(i)] < a.n_px);
  }
}

TEST_CASE("knn oracle basics") {
  GridSpec grid{{0, 0, 0}, {1, 1, 1}, {1, 1, 1}};
  ProxySet one;
  one.positions = {{0.3, 0.3, 0.3}};
  one.features = Matrix::zeros(1, 1);
  one.occupied = {1};
  const AssociationList single = knn_linf_oracle(single_point({0.9, 0.1, 0.4}), one, 1);
  CHECK(single.size() == 1);
  CHECK(single.pt[0] == 0);
  CHECK(single.px[0] == 0);

  // point at the center of a unit cell: the 8 corners all sit at L-inf 0.5
  const ProxySet cube = grid_proxy_set(grid);
  const AssociationList corners = knn_linf_oracle(single_point({0.5, 0.5, 0.5}), cube, 8);
  CHECK(pair_set(corners).size() == 8);
  std::set<int64_t> got(corners.px.begin(), corners.px.end());
  CHECK(got == std::set<int64_t>{0, 1, 2, 3, 4, 5, 6, 7});
}

TEST_CASE("vertex association equals L-inf 8-NN for general-position points") {
  Rng rng(41);
  Config cfg;
  cfg.search_min = 0.01;
  cfg.search_max = 10.0;
  cfg.proxy_count_min = 8;
  cfg.proxy_count_max = 125;
  cfg.max_iter = 60;
  for (int trial = 0; trial < 10; ++trial) {
    PointCloud cloud;
    const int64_t n = 50 + rng.below(150);
    for (int64_t i = 0; i < n; ++i) {
      cloud.positions.push_back({rng.uniform(), rng.uniform(), rng.uniform()});
    }
    cloud.features = Matrix::zeros(n, 1);
    const ProxySet proxies = sample_proxies(cloud, SamplerKind::spatial_wise(), cfg);
    const AssociationList vertex = vertex_associate(cloud, proxies, 3);
    const AssociationList knn = knn_linf_oracle(cloud, proxies, 8);
    CHECK(pair_set(vertex) == pair_set(knn));
  }
}

TEST_CASE("association CSV export") {
  GridSpec grid{{0, 0, 0}, {1, 1, 1}, {1, 1, 1}};
  const AssociationList a = vertex_associate(single_point({0.5, 0.5, 0.5}), grid_proxy_set(grid), 3);
  std::ostringstream out;
  write_association_csv(a, out);
  const std::string text = out.str();
  CHECK(text.substr(0, 6) == "pt,px\n");
  CHECK(std::count(text.begin(), text.end(), '\n') == 9);  // header + 8 pairs
}

TEST_CASE("vertex association requires a grid") {
  ProxySet fps_like;
  fps_like.positions = {{0, 0, 0}};
  fps_like.features = Matrix::zeros(1, 1);
  fps_like.occupied = {1};
  CHECK_THROWS(vertex_associate(single_point({0, 0, 0}), fps_like, 3));
}
