#pragma once

// Proxy sampling strategies. The spatial-wise sampler bisects a single
// isotropic spacing until the grid cell count lands in the configured
// range; fix-number and fix-size grids plus an FPS baseline are provided
// for comparison sweeps.

#include "sp2t/core.hpp"

namespace sp2t {

struct SamplerKind {
  enum class Type { SpatialWise, FixNumber, FixSize, Fps };

  Type type = Type::SpatialWise;
  std::array<int64_t, 3> counts{1, 1, 1};  // FixNumber: cells per axis
  double spacing = 1.0;                    // FixSize
  int64_t fps_count = 1;                   // Fps

  static SamplerKind spatial_wise() { return {}; }
  static SamplerKind fix_number(int64_t nx, int64_t ny, int64_t nz);
  static SamplerKind fix_size(double spacing);
  static SamplerKind fps(int64_t count);
};

// Cell count realized by an isotropic spacing: prod_k max(1, ceil(extent_k / s)).
// Degenerate axes count as one cell.
int64_t grid_cell_count(const Aabb& aabb, double spacing);

// Bisection search for an isotropic spacing whose cell count falls in
// [proxy_count_min, proxy_count_max]; returns the final midpoint when the
// iteration budget runs out. Throws "degenerate AABB" when every axis has
// zero extent.
double spatial_wise_spacing(const Aabb& aabb, const Config& cfg);

// Builds the proxy set for the requested strategy. Grid samplers place
// proxies on every grid vertex and mark occupancy from the points' cells;
// FPS selects points directly (no grid). Features start out all zero
// (M x channels). Throws "proxy budget exceeded" when a fix-size grid
// would produce more than cfg.proxy_budget vertices.
ProxySet sample_proxies(const PointCloud& points, const SamplerKind& kind, const Config& cfg);

// Greedy farthest-point selection from a fixed start index; ties broken
// by lowest index.
std::vector<int64_t> fps_greedy(std::span<const Vec3> positions, int64_t k, int64_t start);

// FPS with the start index drawn from the seeded stream.
std::vector<int64_t> fps(std::span<const Vec3> positions, int64_t k, uint64_t seed);

}  // namespace sp2t
