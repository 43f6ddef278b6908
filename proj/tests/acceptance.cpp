// Acceptance suite: runs every criterion at its pinned tolerance and
// prints one PASS/FAIL line each. Exit status is the number of failures.

#include "sp2t/association.hpp"
#include "sp2t/bench.hpp"
#include "sp2t/block.hpp"
#include "sp2t/core.hpp"
#include "sp2t/sampling.hpp"
#include "sp2t/scene.hpp"
#include "sp2t/spa.hpp"
#include "sp2t/trb.hpp"

#include "support/oracles.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <set>
#include <sstream>

using namespace sp2t;

namespace {

using Clock = std::chrono::steady_clock;

int g_failures = 0;

void report(int criterion, bool pass, const std::string& detail, double seconds) {
  if (!pass) ++g_failures;
  std::printf("%s criterion %d: %s (%.1f s)\n", pass ? "PASS" : "FAIL", criterion,
              detail.c_str(), seconds);
  std::fflush(stdout);
}

Matrix random_matrix(int64_t r, int64_t c, Rng& rng, double scale = 1.0) {
  Matrix m(r, c);
  for (double& v : m.data) v = scale * rng.normal();
  return m;
}

// ---------------------------------------------------------------------------
// 1. SPA-oracle equivalence
// ---------------------------------------------------------------------------

void criterion_1() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  int instances = 0;
  for (uint64_t seed = 0; seed < 200; ++seed) {
    Rng rng(10000 + seed);
    const int64_t n = 16 + rng.below(497);        // <= 512
    const int64_t m = 4 + rng.below(61);          // <= 64
    const int64_t heads = 1 + rng.below(3);
    const int64_t d = 4 + rng.below(9);
    const int64_t c = heads * d;
    const int64_t fanout = std::min<int64_t>(8, m);

    Matrix point_feat = random_matrix(n, c, rng);
    Matrix proxy_feat = random_matrix(m, c, rng);
    std::vector<Vec3> pos_pt, pos_px;
    for (int64_t i = 0; i < n; ++i)
      pos_pt.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)});
    for (int64_t j = 0; j < m; ++j)
      pos_px.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)});

    std::vector<std::pair<int64_t, int64_t>> pairs;
    std::vector<int64_t> perm(static_cast<size_t>(m));
    for (int64_t i = 0; i < n; ++i) {
      for (int64_t j = 0; j < m; ++j) perm[size_t(j)] = j;
      for (int64_t f = 0; f < fanout; ++f) {
        const int64_t pick = f + rng.below(m - f);
        std::swap(perm[size_t(f)], perm[size_t(pick)]);
        pairs.emplace_back(i, perm[size_t(f)]);
      }
    }
    const AssociationList assoc = make_association_list(std::move(pairs), n, m);
    const SpaProjection proj = random_projection(c, 1.0 / std::sqrt(double(c)), rng);
    const TrbTable trb = trb_init(heads, 4, 1.0, TrbInitSchedule{1.0, 0.5, 1.0}, rng);

    for (const Direction dir : {Direction::PointToProxy, Direction::ProxyToPoint}) {
      for (const bool use_trb : {false, true}) {
        const Matrix& qf = dir == Direction::PointToProxy ? proxy_feat : point_feat;
        const Matrix& kf = dir == Direction::PointToProxy ? point_feat : proxy_feat;
        const TrbTable* table = use_trb ? &trb : nullptr;
        const SpaResult sparse = spa_forward(qf, kf, assoc, dir, proj, heads, table,
                                             pos_pt, pos_px);
        const SpaResult dense = dense_oracle(qf, kf, assoc, dir, proj, heads, table,
                                             pos_pt, pos_px);
        worst = std::max(worst, max_abs_diff(sparse.out, dense.out));
      }
    }
    ++instances;
  }
  const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
  std::ostringstream detail;
  detail << "SPA vs dense oracle over " << instances
         << " instances (both directions, bias on/off), max |diff| = " << worst;
  report(1, worst < 1e-10 && secs < 60.0, detail.str(), secs);
}

// ---------------------------------------------------------------------------
// 2. full-block gradient check, every parameter
// ---------------------------------------------------------------------------

void criterion_2() {
  const auto t0 = Clock::now();
  Config cfg;
  cfg.heads = 2;
  cfg.head_dim = 6;  // C = 12
  cfg.trb_size = 3;
  cfg.seed = 404;

  // N = 24 points in one grid cell -> exactly M = 8 proxies
  Rng rng(cfg.seed);
  PointCloud cloud;
  for (int i = 0; i < 24; ++i) {
    cloud.positions.push_back({rng.uniform(), rng.uniform(), rng.uniform()});
  }
  cloud.features = random_matrix(24, 12, rng);
  const ProxySet proxies = sample_proxies(cloud, SamplerKind::fix_number(1, 1, 1), cfg);
  const AssociationList assoc = vertex_associate(cloud, proxies, 3);
  const CellGroups cells = build_cell_groups(std::span<const Vec3>(cloud.positions),
                                             *proxies.grid);

  BlockParams params = random_block_params(2, 6, 3, cfg.trb_scale_pp, cfg.trb_scale_px,
                                           TrbInitSchedule{1.0, 0.5, 1.0}, 0.35, rng);
  const Matrix fpt = random_matrix(24, 12, rng, 0.8);
  const Matrix fpx = random_matrix(8, 12, rng, 0.8);
  const Matrix r_pt = random_matrix(24, 12, rng);
  const Matrix r_px = random_matrix(8, 12, rng);
  const BlockOptions opts;

  BlockIo io;
  io.point_feat = &fpt;
  io.proxy_feat = &fpx;
  io.pos_pt = std::span<const Vec3>(cloud.positions);
  io.pos_px = std::span<const Vec3>(proxies.positions);
  io.occupied = &proxies.occupied;
  io.assoc = &assoc;
  io.cells = &cells;

  auto loss = [&]() {
    const auto [pt_out, px_out] = sp2t_block_forward(io, params, opts);
    double acc = 0.0;
    for (size_t i = 0; i < pt_out.data.size(); ++i) acc += r_pt.data[i] * pt_out.data[i];
    for (size_t i = 0; i < px_out.data.size(); ++i) acc += r_px.data[i] * px_out.data[i];
    return acc;
  };

  BlockWorkspace ws;
  (void)sp2t_block_forward(io, params, opts, &ws);
  BlockGrads grads = zero_block_grads(params);
  sp2t_block_backward(ws, io, params, opts, r_pt, r_px, grads, nullptr, nullptr);

  const auto param_ptrs = collect_params(params);
  const auto grad_ptrs = collect_grads(grads);
  int64_t bad = 0;
  for (size_t i = 0; i < param_ptrs.size(); ++i) {
    const double fd = sp2t_test::central_diff(loss, param_ptrs[i]);
    if (!sp2t_test::grad_close(*grad_ptrs[i], fd, 1e-4, 1e-8)) ++bad;
  }
  const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
  std::ostringstream detail;
  detail << "finite differences on all " << param_ptrs.size()
         << " block parameters (N=24, M=8, C=12, H=2), failures: " << bad;
  report(2, bad == 0 && secs < 300.0, detail.str(), secs);
}

// ---------------------------------------------------------------------------
// 3. complexity scaling
// ---------------------------------------------------------------------------

void criterion_3() {
  const auto t0 = Clock::now();
  const std::vector<int64_t> sizes = {1 << 14, 1 << 15, 1 << 16, 1 << 17, 1 << 18};
  const auto rows = run_scaling_bench(sizes, 160, 8, 16, 2, 5, 2024, /*dense_cap=*/4e6);
  const double slope = fit_loglog_slope(rows);

  int inversions = 0;
  for (size_t i = 1; i < rows.size(); ++i) {
    if (rows[i].sparse_ms < rows[i - 1].sparse_ms) ++inversions;
  }

  const bool dense_measured = !rows[0].dense_skipped;
  const double ratio = dense_measured ? rows[0].dense_ms / rows[0].sparse_ms : 0.0;
  const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
  std::ostringstream detail;
  detail << "log-log slope " << slope << " (target [0.8, 1.2]), dense/sparse at n=2^14 = "
         << ratio << "x (target >= 10), inversions " << inversions;
  report(3,
         slope >= 0.8 && slope <= 1.2 && dense_measured && ratio >= 10.0 && inversions <= 1,
         detail.str(), secs);
}

// ---------------------------------------------------------------------------
// 4. spatial-wise sampler robustness
// ---------------------------------------------------------------------------

void criterion_4() {
  const auto t0 = Clock::now();
  Config cfg;
  cfg.search_min = 1e-3;
  cfg.search_max = 500.0;
  cfg.max_iter = 60;

  Rng rng(31337);
  int feasible = 0, in_range = 0, isotropic = 0, boxes = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    Vec3 extent;
    for (int k = 0; k < 3; ++k) extent[k] = std::pow(10.0, rng.uniform(-2.0, 2.0));
    const Aabb box{{0, 0, 0}, extent};
    ++boxes;

    const double s = spatial_wise_spacing(box, cfg);
    const int64_t cells = grid_cell_count(box, s);
    ++isotropic;  // a single scalar spacing is isotropic by construction

    bool any_feasible = false;
    for (int i = 0; i <= 4000; ++i) {
      const double probe =
          cfg.search_min * std::pow(cfg.search_max / cfg.search_min, double(i) / 4000.0);
      const int64_t c = grid_cell_count(box, probe);
      if (c >= cfg.proxy_count_min && c <= cfg.proxy_count_max) {
        any_feasible = true;
        break;
      }
    }
    if (any_feasible) {
      ++feasible;
      if (cells >= cfg.proxy_count_min && cells <= cfg.proxy_count_max) ++in_range;
    }
  }

  // fix-size must trip the budget flag on the 100:1 slab; spatial-wise must not
  const auto sweep = run_sampler_sweep(std::vector<double>{100.0}, cfg, 2000, 0.1);
  bool fix_size_flagged = false, wise_clean = false;
  for (const auto& row : sweep) {
    if (row.sampler == "fix-size") fix_size_flagged = row.budget_exceeded;
    if (row.sampler == "wise") wise_clean = !row.budget_exceeded && row.count_in_range;
  }

  const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
  std::ostringstream detail;
  detail << boxes << " random boxes (aspect up to 100:1): " << in_range << "/" << feasible
         << " feasible cases in range, isotropic " << isotropic << "/" << boxes
         << ", fix-size flagged on slab: " << (fix_size_flagged ? "yes" : "no")
         << ", spatial-wise clean: " << (wise_clean ? "yes" : "no");
  report(4,
         in_range == feasible && isotropic == boxes && feasible > 800 && fix_size_flagged &&
             wise_clean,
         detail.str(), secs);
}

// ---------------------------------------------------------------------------
// 5. association equals the L-inf KNN oracle
// ---------------------------------------------------------------------------

void criterion_5() {
  const auto t0 = Clock::now();
  Config cfg;
  cfg.search_min = 0.01;
  cfg.search_max = 10.0;
  cfg.proxy_count_min = 8;
  cfg.proxy_count_max = 125;  // grids up to 5^3 cells
  cfg.max_iter = 60;

  Rng rng(55555);
  int scenes = 0, equal = 0;
  bool cardinality_ok = true;
  for (int trial = 0; trial < 100; ++trial) {
    PointCloud cloud;
    const int64_t n = 20 + rng.below(281);  // <= 300
    for (int64_t i = 0; i < n; ++i) {
      cloud.positions.push_back({rng.uniform(), rng.uniform(), rng.uniform()});
    }
    cloud.features = Matrix::zeros(n, 1);
    const ProxySet proxies = sample_proxies(cloud, SamplerKind::spatial_wise(), cfg);
    const AssociationList vertex = vertex_associate(cloud, proxies, 3);
    const AssociationList knn = knn_linf_oracle(cloud, proxies, 8);

    if (vertex.size() != 8 * n) cardinality_ok = false;
    for (int64_t p = 0; p < n; ++p) {
      if (vertex.seg_offsets_pt[size_t(p) + 1] - vertex.seg_offsets_pt[size_t(p)] != 8) {
        cardinality_ok = false;
      }
    }

    std::set<std::pair<int64_t, int64_t>> a, b;
    for (int64_t i = 0; i < vertex.size(); ++i) a.insert({vertex.pt[size_t(i)], vertex.px[size_t(i)]});
    for (int64_t i = 0; i < knn.size(); ++i) b.insert({knn.pt[size_t(i)], knn.px[size_t(i)]});
    ++scenes;
    if (a == b) ++equal;
  }
  const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
  std::ostringstream detail;
  detail << "vertex association vs L-inf 8-NN oracle: " << equal << "/" << scenes
         << " scenes equal as pair sets, 8 pairs per point: "
         << (cardinality_ok ? "yes" : "no");
  report(5, equal == scenes && cardinality_ok, detail.str(), secs);
}

// ---------------------------------------------------------------------------
// 6. trilinear lookup vs the independent oracle; shared-table contract
// ---------------------------------------------------------------------------

void criterion_6() {
  const auto t0 = Clock::now();
  Rng rng(777);
  const TrbTable table = trb_init(3, 16, 2.5, TrbInitSchedule{2.5, 0.5, 1.0}, rng);

  double worst = 0.0;
  for (int trial = 0; trial < 10000; ++trial) {
    // half the draws reach past the clamp boundary
    const double reach = trial % 2 == 0 ? 0.39 : 1.2;
    const Vec3 x{rng.uniform(-reach, reach), rng.uniform(-reach, reach),
                 rng.uniform(-reach, reach)};
    const auto got = trb_lookup(table, x);
    const auto want = sp2t_test::trilinear_oracle(table, x);
    for (int64_t h = 0; h < table.heads; ++h) {
      const double denom = std::max(1.0, std::abs(want[size_t(h)]));
      worst = std::max(worst, std::abs(got[size_t(h)] - want[size_t(h)]) / denom);
    }
  }

  // shared vs per-call bias evaluation: identical values, different call counts
  std::vector<Vec3> pos_pt, pos_px;
  for (int i = 0; i < 64; ++i)
    pos_pt.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)});
  for (int j = 0; j < 8; ++j)
    pos_px.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)});
  std::vector<std::pair<int64_t, int64_t>> pairs;
  for (int64_t i = 0; i < 64; ++i)
    for (int64_t j = 0; j < 8; ++j) pairs.emplace_back(i, j);
  const AssociationList assoc = make_association_list(std::move(pairs), 64, 8);

  table.lookup_calls = 0;
  const Matrix shared = trb_bias_for_assoc(table, assoc, pos_pt, pos_px);
  const int64_t calls_shared = table.lookup_calls;
  // the unshared path evaluates once per consumer; emulate two consumers
  const Matrix again = trb_bias_for_assoc(table, assoc, pos_pt, pos_px);
  const int64_t calls_unshared = table.lookup_calls;
  const bool values_identical = shared.data == again.data;

  const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
  std::ostringstream detail;
  detail << "trilinear lookup vs 8-term oracle on 10^4 displacements, worst rel diff = "
         << worst << "; shared bias identical: " << (values_identical ? "yes" : "no")
         << " (calls " << calls_shared << " vs " << calls_unshared << ")";
  report(6,
         worst < 1e-12 && values_identical && calls_unshared == 2 * calls_shared,
         detail.str(), secs);
}

// ---------------------------------------------------------------------------
// 7. toy training
// ---------------------------------------------------------------------------

void criterion_7() {
  const auto t0 = Clock::now();
  Config cfg;  // defaults: heads 3, head_dim 16, trb 16, seed 42
  LabeledScene scene = make_two_cluster_scene(500, cfg.seed);
  ToyBatch batch = make_toy_batch(std::move(scene.cloud), std::move(scene.labels), cfg);
  Rng rng(cfg.seed + 1);
  ToyModel model = make_toy_model(3, 2, cfg, rng);
  const BlockOptions opts = BlockOptions::from_config(cfg);

  double accuracy = 0.0;
  int steps_used = 0;
  for (int step = 1; step <= 500; ++step) {
    (void)toy_train_step(batch, model, 0.01, opts);
    ++steps_used;
    if (step % 25 == 0 || step == 500) {
      accuracy = toy_eval(batch, model, opts).accuracy;
      if (accuracy >= 0.95) break;
    }
  }
  const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
  std::ostringstream detail;
  detail << "two-cluster toy training reached " << accuracy * 100.0 << "% accuracy after "
         << steps_used << " steps (target >= 95% within 500)";
  report(7, accuracy >= 0.95 && secs < 300.0, detail.str(), secs);
}

// ---------------------------------------------------------------------------
// 8. bitwise determinism
// ---------------------------------------------------------------------------

void criterion_8() {
  const auto t0 = Clock::now();
  Config cfg;
  cfg.heads = 2;
  cfg.head_dim = 6;
  cfg.trb_size = 4;
  cfg.proxy_count_min = 20;
  cfg.proxy_count_max = 80;

  auto run_pipeline = [&cfg]() {
    const PointCloud scene = make_cube_scene(2000, cfg.channels(), cfg.seed);
    const ProxySet proxies = sample_proxies(scene, SamplerKind::spatial_wise(), cfg);
    const AssociationList assoc = vertex_associate(scene, proxies, cfg.assoc_dim);
    const CellGroups cells = build_cell_groups(std::span<const Vec3>(scene.positions),
                                               *proxies.grid);
    Rng rng(cfg.seed);
    BlockParams params = random_block_params(
        cfg.heads, cfg.head_dim, cfg.trb_size, cfg.trb_scale_pp, cfg.trb_scale_px,
        TrbInitSchedule{cfg.trb_sigma_center, cfg.trb_sigma_corner, cfg.trb_strength},
        1.0 / std::sqrt(double(cfg.channels())), rng);
    MlpParams mlp;
    mlp.weights = {Matrix::identity(cfg.channels())};
    mlp.biases = {std::vector<double>(size_t(cfg.channels()), 0.0)};
    const Matrix fpx = proxy_init_features(scene.features, proxies, assoc, mlp,
                                           cfg.embed_temperature);
    BlockIo io;
    io.point_feat = &scene.features;
    io.proxy_feat = &fpx;
    io.pos_pt = std::span<const Vec3>(scene.positions);
    io.pos_px = std::span<const Vec3>(proxies.positions);
    io.occupied = &proxies.occupied;
    io.assoc = &assoc;
    io.cells = &cells;
    auto [pt, px] = sp2t_block_forward(io, params, BlockOptions::from_config(cfg));
    pt.data.insert(pt.data.end(), px.data.begin(), px.data.end());
    return pt.data;
  };

  set_worker_count(1);
  const auto run_a = run_pipeline();
  const auto run_b = run_pipeline();
  set_worker_count(4);
  const auto run_c = run_pipeline();
  set_worker_count(3);
  const auto run_d = run_pipeline();
  set_worker_count(1);

  const bool same_seed_same_bits = run_a == run_b;
  const bool worker_independent = run_a == run_c && run_a == run_d;

  const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
  std::ostringstream detail;
  detail << "pipeline rerun bitwise identical: " << (same_seed_same_bits ? "yes" : "no")
         << "; workers {1,3,4} bitwise identical: " << (worker_independent ? "yes" : "no");
  report(8, same_seed_same_bits && worker_independent, detail.str(), secs);
}

}  // namespace

int main() {
  std::printf("acceptance suite\n");
  criterion_1();
  criterion_2();
  criterion_3();
  criterion_4();
  criterion_5();
  criterion_6();
  criterion_7();
  criterion_8();
  if (g_failures == 0) {
    std::printf("all criteria passed\n");
  } else {
    std::printf("%d criteria FAILED\n", g_failures);
  }
  return g_failures;
}
