#pragma once

// Synthetic scene generators used by the tests, benchmarks and CLI, plus
// point-file ingestion (whitespace/comma XYZ text and binary
// little-endian PLY with float32 properties).

#include "sp2t/core.hpp"

#include <ostream>
#include <string>

namespace sp2t {

// Uniform points in the unit cube with N(0,1) features.
PointCloud make_cube_scene(int64_t n, int64_t channels, uint64_t seed);

// Uniform points in an [0,aspect] x [0,aspect] x [0,1] slab.
PointCloud make_slab_scene(int64_t n, double aspect, int64_t channels, uint64_t seed);

struct LabeledScene {
  PointCloud cloud;  // features are the raw positions
  std::vector<int> labels;
};

// Two noisy Gaussian clusters inside the [-1,1]^3 box, labels by cluster.
LabeledScene make_two_cluster_scene(int64_t per_cluster, uint64_t seed);

// Reads "x y z [f1 ... fC]" text (whitespace or comma separated, '#'
// comments) or binary little-endian PLY with float32 x/y/z properties.
// Files without feature columns get `default_channels` zero channels.
PointCloud ingest_points(const std::string& path, int64_t default_channels);

void write_xyz(std::ostream& out, std::span<const Vec3> positions);
void write_ply_binary(std::ostream& out, const PointCloud& cloud);

}  // namespace sp2t
