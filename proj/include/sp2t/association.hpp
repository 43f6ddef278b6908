#pragma once

// Vertex-based point-proxy association: each point maps to the corners of
// its enclosing grid cell (8 in 3D, 4 when the z axis is excluded from
// association). A brute-force L-infinity KNN oracle backs the equivalence
// tests.

#include "sp2t/core.hpp"

#include <ostream>

namespace sp2t {

// Cell index of a point under the half-open convention: a point with an
// integral grid coordinate belongs to the cell on its positive side,
// clamped inward on the max boundary. Throws "point outside grid" when
// the point lies beyond 1e-9 * extent of the grid.
std::array<int64_t, 3> cell_of(const Vec3& p, const GridSpec& grid);

// Flat vertex indices of the cell corners a point associates with:
// {cell, cell+1} per associated axis; dim 2 uses the xy face at the
// cell's lower z vertex plane.
std::vector<int64_t> association_vertices(const std::array<int64_t, 3>& cell,
                                          const GridSpec& grid, int64_t dim);

// Builds the full sorted association list with both segment tables.
// Requires a grid-based proxy set.
AssociationList vertex_associate(const PointCloud& points, const ProxySet& proxies,
                                 int64_t assoc_dim = 3);

// O(N*M) reference: the k proxies with smallest L-infinity distance per
// point, ties broken by lowest proxy index.
AssociationList knn_linf_oracle(const PointCloud& points, const ProxySet& proxies, int64_t k);

// Two-column integer CSV (pt,px) in canonical order, for debugging.
void write_association_csv(const AssociationList& assoc, std::ostream& out);

}  // namespace sp2t
