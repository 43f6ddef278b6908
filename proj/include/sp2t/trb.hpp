#pragma once

// Table-based relative bias: a per-head T^3 volume sampled by trilinear
// interpolation at the scaled, clamped relative displacement, plus the
// gradient of the lookup with respect to the table entries.

#include "sp2t/core.hpp"

#include <istream>
#include <ostream>

namespace sp2t {

struct TrbTable {
  int64_t heads = 0;           // leading dimension, matches attention heads
  int64_t size = 0;            // T, nodes per axis (>= 2)
  std::vector<double> values;  // heads * T^3, layout [h][ix][iy][iz]
  double input_scale = 1.0;    // s_rpe applied to the displacement

  mutable int64_t lookup_calls = 0;  // instrumentation for the sharing contract

  int64_t nodes_per_head() const { return size * size * size; }
  int64_t node_index(int64_t ix, int64_t iy, int64_t iz) const {
    return (ix * size + iy) * size + iz;
  }
  double& at(int64_t h, int64_t ix, int64_t iy, int64_t iz) {
    return values[size_t(h * nodes_per_head() + node_index(ix, iy, iz))];
  }
  double at(int64_t h, int64_t ix, int64_t iy, int64_t iz) const {
    return values[size_t(h * nodes_per_head() + node_index(ix, iy, iz))];
  }
};

// Initialization stddev falls off linearly with the node's normalized
// radius from the table center, so near-zero displacements start with the
// larger bias magnitude.
struct TrbInitSchedule {
  double sigma_center = 2.5;
  double sigma_corner = 0.5;
  double strength = 1.0;
};

TrbTable trb_init(int64_t heads, int64_t size, double input_scale,
                  const TrbInitSchedule& schedule, Rng& rng);

// The 8 surrounding nodes of a displacement and their trilinear weights
// (head-independent, indices within one head slab). Weights sum to 1.
struct TrbStencil {
  std::array<int64_t, 8> node;
  std::array<double, 8> weight;
};
TrbStencil trb_stencil(const TrbTable& table, const Vec3& displacement);

// Per-head bias at a displacement; align-corners convention so a clamped
// input of +-1 lands exactly on the boundary nodes.
std::vector<double> trb_lookup(const TrbTable& table, const Vec3& displacement);
void trb_lookup_into(const TrbTable& table, const Vec3& displacement, std::span<double> out);

// Vectorized lookup, one row per displacement (A x heads).
Matrix trb_lookup_batch(const TrbTable& table, std::span<const Vec3> displacements);

// Bias rows for an association list; the displacement is always
// point position minus proxy position, independent of attention direction.
Matrix trb_bias_for_assoc(const TrbTable& table, const AssociationList& assoc,
                          std::span<const Vec3> positions_pt,
                          std::span<const Vec3> positions_px);

// Accumulates upstream (one value per head) into a dense table gradient
// of the same layout as `values`, distributing by trilinear weight.
void trb_backward(const TrbTable& table, const Vec3& displacement,
                  std::span<const double> upstream, std::vector<double>& table_grad);

// Flat binary dump: uint32 heads, uint32 size (little-endian), then
// heads * T^3 f64 values little-endian.
void trb_dump(const TrbTable& table, std::ostream& out);
TrbTable trb_load(std::istream& in, double input_scale);

}  // namespace sp2t
