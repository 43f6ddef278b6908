#include "sp2t/association.hpp"

#include <algorithm>
#include <cmath>

namespace sp2t {

std::array<int64_t, 3> cell_of(const Vec3& p, const GridSpec& grid) {
  std::array<int64_t, 3> cell;
  for (int k = 0; k < 3; ++k) {
    const double span = double(grid.shape[size_t(k)]) * grid.spacing[k];
    const double tol = 1e-9 * span;
    const double local = p[k] - grid.origin[k];
    if (local < -tol || local > span + tol) throw std::runtime_error("point outside grid");
    const double g = local / grid.spacing[k];
    int64_t c = int64_t(std::floor(g));
    c = std::clamp<int64_t>(c, 0, grid.shape[size_t(k)] - 1);
    cell[size_t(k)] = c;
  }
  return cell;
}

std::vector<int64_t> association_vertices(const std::array<int64_t, 3>& cell,
                                          const GridSpec& grid, int64_t dim) {
  if (dim != 2 && dim != 3) throw std::invalid_argument("association dim must be 2 or 3");
  std::vector<int64_t> out;
  out.reserve(dim == 3 ? 8 : 4);
  const int64_t dz_max = dim == 3 ? 1 : 0;
  for (int64_t dx = 0; dx <= 1; ++dx)
    for (int64_t dy = 0; dy <= 1; ++dy)
      for (int64_t dz = 0; dz <= dz_max; ++dz)
        out.push_back(grid.vertex_index(cell[0] + dx, cell[1] + dy, cell[2] + dz));
  return out;
}

AssociationList vertex_associate(const PointCloud& points, const ProxySet& proxies,
                                 int64_t assoc_dim) {
  if (!proxies.grid) throw std::invalid_argument("vertex_associate: proxies carry no grid");
  const GridSpec& grid = *proxies.grid;

  std::vector<std::pair<int64_t, int64_t>> pairs;
  pairs.reserve(size_t(points.size()) * (assoc_dim == 3 ? 8 : 4));
  for (int64_t i = 0; i < points.size(); ++i) {
    const auto cell = cell_of(points.positions[size_t(i)], grid);
    for (int64_t v : association_vertices(cell, grid, assoc_dim)) {
      pairs.emplace_back(i, v);
    }
  }
  return make_association_list(std::move(pairs), points.size(), proxies.size());
}

AssociationList knn_linf_oracle(const PointCloud& points, const ProxySet& proxies, int64_t k) {
  const int64_t m = proxies.size();
  if (k < 1 || k > m) throw std::invalid_argument("knn_linf_oracle: k out of range");

  std::vector<std::pair<int64_t, int64_t>> pairs;
  pairs.reserve(size_t(points.size()) * size_t(k));
  std::vector<std::pair<double, int64_t>> dist;
  dist.resize(size_t(m));
  for (int64_t i = 0; i < points.size(); ++i) {
    for (int64_t j = 0; j < m; ++j) {
      dist[size_t(j)] = {linf_norm(points.positions[size_t(i)] - proxies.positions[size_t(j)]), j};
    }
    std::partial_sort(dist.begin(), dist.begin() + k, dist.end());
    for (int64_t j = 0; j < k; ++j) pairs.emplace_back(i, dist[size_t(j)].second);
  }
  return make_association_list(std::move(pairs), points.size(), m);
}

void write_association_csv(const AssociationList& assoc, std::ostream& out) {
  out << "pt,px\n";
  for (int64_t i = 0; i < assoc.size(); ++i) {
    out << assoc.pt[size_t(i)] << ',' << assoc.px[size_t(i)] << '\n';
  }
}

}  // namespace sp2t
