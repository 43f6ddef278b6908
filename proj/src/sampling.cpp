#include "sp2t/sampling.hpp"

#include "sp2t/association.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace sp2t {

namespace {
constexpr double kDegenerateSpacing = 1e-6;  // stand-in spacing for flat axes
}

SamplerKind SamplerKind::fix_number(int64_t nx, int64_t ny, int64_t nz) {
  if (nx < 1 || ny < 1 || nz < 1) throw std::invalid_argument("fix_number: counts must be positive");
  SamplerKind k;
  k.type = Type::FixNumber;
  k.counts = {nx, ny, nz};
  return k;
}

SamplerKind SamplerKind::fix_size(double spacing) {
  if (!(spacing > 0.0)) throw std::invalid_argument("fix_size: spacing must be positive");
  SamplerKind k;
  k.type = Type::FixSize;
  k.spacing = spacing;
  return k;
}

SamplerKind SamplerKind::fps(int64_t count) {
  if (count < 1) throw std::invalid_argument("fps: count must be positive");
  SamplerKind k;
  k.type = Type::Fps;
  k.fps_count = count;
  return k;
}

int64_t grid_cell_count(const Aabb& aabb, double spacing) {
  const Vec3 extent = aabb.extent();
  int64_t cells = 1;
  for (int k = 0; k < 3; ++k) {
    cells *= std::max<int64_t>(1, int64_t(std::ceil(extent[k] / spacing)));
  }
  return cells;
}

double spatial_wise_spacing(const Aabb& aabb, const Config& cfg) {
  const Vec3 extent = aabb.extent();
  if (extent.x <= 0.0 && extent.y <= 0.0 && extent.z <= 0.0) {
    throw std::invalid_argument("degenerate AABB");
  }
  double lo = cfg.search_min;
  double hi = cfg.search_max;
  for (int64_t it = 0; it < cfg.max_iter; ++it) {
    const double mid = (lo + hi) / 2.0;
    const int64_t cells = grid_cell_count(aabb, mid);
    if (cells >= cfg.proxy_count_min && cells <= cfg.proxy_count_max) return mid;
    if (cells < cfg.proxy_count_min) {
      hi = mid;  // too sparse, shrink the spacing
    } else {
      lo = mid;  // too dense
    }
  }
  return (lo + hi) / 2.0;  // fallback
}

namespace {

GridSpec make_grid(const Aabb& aabb, const Vec3& spacing_in,
                   const std::array<int64_t, 3>& shape) {
  GridSpec grid;
  grid.origin = aabb.min_pt;
  grid.shape = shape;
  for (int k = 0; k < 3; ++k) {
    grid.spacing[k] = std::max(spacing_in[k], kDegenerateSpacing);
  }
  grid.validate();
  return grid;
}

std::array<int64_t, 3> shape_from_spacing(const Vec3& extent, double spacing) {
  std::array<int64_t, 3> shape;
  for (int k = 0; k < 3; ++k) {
    shape[size_t(k)] = std::max<int64_t>(1, int64_t(std::ceil(extent[k] / spacing)));
  }
  return shape;
}

ProxySet grid_proxies(const PointCloud& points, const GridSpec& grid, const Config& cfg) {
  ProxySet out;
  out.grid = grid;
  const int64_t m = grid.vertex_count();
  out.positions.reserve(size_t(m));
  for (int64_t ix = 0; ix <= grid.shape[0]; ++ix)
    for (int64_t iy = 0; iy <= grid.shape[1]; ++iy)
      for (int64_t iz = 0; iz <= grid.shape[2]; ++iz)
        out.positions.push_back(grid.vertex_position(ix, iy, iz));

  out.features = Matrix::zeros(m, cfg.channels());
  out.occupied.assign(size_t(m), 0);
  // A vertex is occupied iff some point's cell has it as an association
  // corner; this keeps "empty proxy" aligned with "never a point-side
  // attention partner".
  for (const Vec3& p : points.positions) {
    const auto cell = cell_of(p, grid);
    for (int64_t v : association_vertices(cell, grid, cfg.assoc_dim)) {
      out.occupied[size_t(v)] = 1;
    }
  }
  return out;
}

}  // namespace

ProxySet sample_proxies(const PointCloud& points, const SamplerKind& kind, const Config& cfg) {
  if (points.size() < 1) throw std::invalid_argument("empty input");
  const Aabb aabb = compute_aabb(points);
  const Vec3 extent = aabb.extent();

  switch (kind.type) {
    case SamplerKind::Type::SpatialWise: {
      const double s = spatial_wise_spacing(aabb, cfg);
      return grid_proxies(points, make_grid(aabb, {s, s, s}, shape_from_spacing(extent, s)), cfg);
    }
    case SamplerKind::Type::FixNumber: {
      Vec3 spacing;
      for (int k = 0; k < 3; ++k) spacing[k] = extent[k] / double(kind.counts[size_t(k)]);
      return grid_proxies(points, make_grid(aabb, spacing, kind.counts), cfg);
    }
    case SamplerKind::Type::FixSize: {
      const auto shape = shape_from_spacing(extent, kind.spacing);
      const int64_t vertices = (shape[0] + 1) * (shape[1] + 1) * (shape[2] + 1);
      if (vertices > cfg.proxy_budget) throw std::runtime_error("proxy budget exceeded");
      return grid_proxies(points, make_grid(aabb, {kind.spacing, kind.spacing, kind.spacing}, shape),
                          cfg);
    }
    case SamplerKind::Type::Fps: {
      const auto idx = fps(points.positions, kind.fps_count, cfg.seed);
      ProxySet out;
      out.positions.reserve(idx.size());
      for (int64_t i : idx) out.positions.push_back(points.positions[size_t(i)]);
      out.features = Matrix::zeros(int64_t(idx.size()), cfg.channels());
      out.occupied.assign(idx.size(), 1);
      return out;
    }
  }
  throw std::logic_error("unreachable sampler kind");
}

std::vector<int64_t> fps_greedy(std::span<const Vec3> positions, int64_t k, int64_t start) {
  const int64_t n = int64_t(positions.size());
  if (k < 1 || k > n) throw std::invalid_argument("fps: k out of range");
  if (start < 0 || start >= n) throw std::invalid_argument("fps: start out of range");

  std::vector<int64_t> selected;
  selected.reserve(size_t(k));
  std::vector<double> min_d2(size_t(n), std::numeric_limits<double>::infinity());

  int64_t current = start;
  selected.push_back(current);
  for (int64_t round = 1; round < k; ++round) {
    int64_t best = -1;
    double best_d2 = -1.0;
    for (int64_t i = 0; i < n; ++i) {
      const double d2 = squared_norm(positions[size_t(i)] - positions[size_t(current)]);
      if (d2 < min_d2[size_t(i)]) min_d2[size_t(i)] = d2;
      if (min_d2[size_t(i)] > best_d2 && min_d2[size_t(i)] > 0.0) {
        // strict '>' keeps the lowest index on ties
        best_d2 = min_d2[size_t(i)];
        best = i;
      }
    }
    if (best < 0) {
      // all remaining points coincide with selected ones; fall back to
      // the first unselected index for determinism
      std::vector<uint8_t> taken(size_t(n), 0);
      for (int64_t s : selected) taken[size_t(s)] = 1;
      for (int64_t i = 0; i < n; ++i) {
        if (!taken[size_t(i)]) {
          best = i;
          break;
        }
      }
    }
    selected.push_back(best);
    current = best;
  }
  return selected;
}

std::vector<int64_t> fps(std::span<const Vec3> positions, int64_t k, uint64_t seed) {
  Rng rng(seed);
  return fps_greedy(positions, k, rng.below(int64_t(positions.size())));
}

}  // namespace sp2t
