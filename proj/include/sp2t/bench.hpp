#pragma once

// Measurement harness: sparse-vs-dense scaling, per-operator latency
// decomposition, sampler robustness sweeps. Median-of-repeats wall times
// with one discarded warm-up; the timed attention region is the kernel on
// pre-projected q/k/v so the measured ratio matches the analytic flop
// model.

#include "sp2t/block.hpp"
#include "sp2t/core.hpp"
#include "sp2t/spa.hpp"

#include <ostream>
#include <string>

namespace sp2t {

struct ScalingRow {
  int64_t n = 0;
  double sparse_ms = 0.0;
  double dense_ms = 0.0;
  bool dense_skipped = false;
  double sparse_flops = 0.0;
  double dense_flops = 0.0;
  double checksum = 0.0;  // sum of the sparse kernel output
};

// Times spa_forward_core (and dense_oracle_core while n*m stays under
// `dense_cap_entries`) on vertex-associated uniform scenes. The grid is
// shaped so the vertex count is as close to `m` as possible; k must be 8
// (the vertex association fan-out). With `use_f32` the harness times
// float clones of both kernels instead; library numerics stay f64.
std::vector<ScalingRow> run_scaling_bench(std::span<const int64_t> sizes, int64_t m, int64_t k,
                                          int64_t head_dim, int64_t heads, int64_t repeats,
                                          uint64_t seed, double dense_cap_entries = 4e6,
                                          bool use_f32 = false);

// Least-squares slope of log(sparse_ms) against log(n).
double fit_loglog_slope(const std::vector<ScalingRow>& rows);

void write_scaling_csv(const std::vector<ScalingRow>& rows, std::ostream& out);

struct LatencyNode {
  std::string name;
  double ms = 0.0;
  std::vector<LatencyNode> children;
};

// Hierarchical timings for one pipeline pass:
// {sampling, association, proxy_init, block:{...}, other}.
LatencyNode run_latency_decomposition(const PointCloud& scene, const Config& cfg,
                                      const LocalFusionFn* local_override = nullptr);

void write_latency_json(const LatencyNode& node, std::ostream& out);
void write_latency_csv(const LatencyNode& node, std::ostream& out);

struct SamplerSweepRow {
  std::string sampler;
  double aspect = 1.0;
  int64_t proxy_count = 0;    // realized vertex count (or k for FPS)
  int64_t cell_count = 0;     // grid cells, 0 for FPS
  double spacing_aspect = 0.0;  // max/min spacing, 0 when no grid
  bool budget_exceeded = false;
  bool count_in_range = false;  // cell count within the configured range
};

// One scene per aspect ratio, every sampler on each.
std::vector<SamplerSweepRow> run_sampler_sweep(std::span<const double> aspects, const Config& cfg,
                                               int64_t points_per_scene, double fix_size_spacing);

void write_sweep_csv(const std::vector<SamplerSweepRow>& rows, std::ostream& out);

}  // namespace sp2t
