#include "sp2t/bench.hpp"

#include "sp2t/association.hpp"
#include "sp2t/sampling.hpp"
#include "sp2t/scene.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <limits>

namespace sp2t {

namespace {

using Clock = std::chrono::steady_clock;

double ms_between(Clock::time_point a, Clock::time_point b) {
  return std::chrono::duration<double, std::milli>(b - a).count();
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Grid shape whose vertex count is closest to the requested proxy count,
// preferring near-cubic shapes.
std::array<int64_t, 3> shape_for_vertex_count(int64_t m) {
  std::array<int64_t, 3> best{1, 1, 1};
  int64_t best_err = std::numeric_limits<int64_t>::max();
  double best_aspect = std::numeric_limits<double>::max();
  for (int64_t a = 1; a <= 16; ++a) {
    for (int64_t b = a; b <= 16; ++b) {
      for (int64_t c = b; c <= 16; ++c) {
        const int64_t vertices = (a + 1) * (b + 1) * (c + 1);
        const int64_t err = std::abs(vertices - m);
        const double aspect = double(c + 1) / double(a + 1);
        if (err < best_err || (err == best_err && aspect < best_aspect)) {
          best_err = err;
          best_aspect = aspect;
          best = {a, b, c};
        }
      }
    }
  }
  return best;
}

Matrix random_features(int64_t rows, int64_t cols, Rng& rng) {
  Matrix m(rows, cols);
  for (double& v : m.data) v = rng.normal();
  return m;
}

// Single-precision clones of the two timed kernels. Measurement-only:
// every library result stays in f64.

std::vector<float> to_f32(const Matrix& m) {
  std::vector<float> out(m.data.size());
  for (size_t i = 0; i < m.data.size(); ++i) out[i] = float(m.data[i]);
  return out;
}

std::vector<float> sparse_forward_f32(const std::vector<float>& q, const std::vector<float>& k,
                                      const std::vector<float>& v, const AssociationList& assoc,
                                      int64_t heads, int64_t d) {
  const int64_t channels = heads * d;
  const float inv_sqrt_d = 1.0f / std::sqrt(float(d));
  std::vector<float> out(size_t(assoc.n_pt * channels), 0.0f);
  std::vector<float> buf;
  for (int64_t qi = 0; qi < assoc.n_pt; ++qi) {
    const int64_t begin = assoc.seg_offsets_pt[size_t(qi)];
    const int64_t end = assoc.seg_offsets_pt[size_t(qi) + 1];
    const int64_t len = end - begin;
    if (len == 0) continue;
    buf.resize(size_t(len * heads));
    const float* qr = q.data() + qi * channels;
    for (int64_t i = 0; i < len; ++i) {
      const int64_t a = assoc.order_by_pt[size_t(begin + i)];
      const float* kr = k.data() + assoc.px[size_t(a)] * channels;
      for (int64_t h = 0; h < heads; ++h) {
        float dot = 0.0f;
        for (int64_t j = 0; j < d; ++j) dot += qr[h * d + j] * kr[h * d + j];
        buf[size_t(i * heads + h)] = dot * inv_sqrt_d;
      }
    }
    for (int64_t h = 0; h < heads; ++h) {
      float seg_max = -std::numeric_limits<float>::infinity();
      for (int64_t i = 0; i < len; ++i) seg_max = std::max(seg_max, buf[size_t(i * heads + h)]);
      float denom = 0.0f;
      for (int64_t i = 0; i < len; ++i) {
        const float s = std::exp(buf[size_t(i * heads + h)] - seg_max);
        buf[size_t(i * heads + h)] = s;
        denom += s;
      }
      for (int64_t i = 0; i < len; ++i) buf[size_t(i * heads + h)] /= denom;
    }
    float* out_row = out.data() + qi * channels;
    for (int64_t i = 0; i < len; ++i) {
      const int64_t a = assoc.order_by_pt[size_t(begin + i)];
      const float* vr = v.data() + assoc.px[size_t(a)] * channels;
      for (int64_t h = 0; h < heads; ++h) {
        const float w = buf[size_t(i * heads + h)];
        for (int64_t j = 0; j < d; ++j) out_row[h * d + j] += w * vr[h * d + j];
      }
    }
  }
  return out;
}

std::vector<float> dense_forward_f32(const std::vector<float>& q, const std::vector<float>& k,
                                     const std::vector<float>& v, const AssociationList& assoc,
                                     int64_t heads, int64_t d) {
  const int64_t channels = heads * d;
  const int64_t n = assoc.n_pt;
  const int64_t m = assoc.n_px;
  const float inv_sqrt_d = 1.0f / std::sqrt(float(d));
  std::vector<uint8_t> associated(size_t(n * m), 0);
  for (int64_t a = 0; a < assoc.size(); ++a) {
    associated[size_t(assoc.pt[size_t(a)] * m + assoc.px[size_t(a)])] = 1;
  }
  std::vector<float> out(size_t(n * channels), 0.0f);
  std::vector<float> sim(static_cast<size_t>(m));
  for (int64_t h = 0; h < heads; ++h) {
    for (int64_t i = 0; i < n; ++i) {
      const float* qr = q.data() + i * channels + h * d;
      float denom = 0.0f;
      for (int64_t j = 0; j < m; ++j) {
        const float* kr = k.data() + j * channels + h * d;
        float dot = 0.0f;
        for (int64_t c = 0; c < d; ++c) dot += qr[c] * kr[c];
        const float e = associated[size_t(i * m + j)] ? std::exp(dot * inv_sqrt_d) : 0.0f;
        sim[size_t(j)] = e;
        denom += e;
      }
      if (denom == 0.0f) continue;
      float* out_row = out.data() + i * channels + h * d;
      for (int64_t j = 0; j < m; ++j) {
        const float w = sim[size_t(j)] / denom;
        const float* vr = v.data() + j * channels + h * d;
        for (int64_t c = 0; c < d; ++c) out_row[c] += w * vr[c];
      }
    }
  }
  return out;
}

}  // namespace

std::vector<ScalingRow> run_scaling_bench(std::span<const int64_t> sizes, int64_t m, int64_t k,
                                          int64_t head_dim, int64_t heads, int64_t repeats,
                                          uint64_t seed, double dense_cap_entries, bool use_f32) {
  if (k != 8) throw std::invalid_argument("run_scaling_bench: vertex association fixes k at 8");
  if (repeats < 5) throw std::invalid_argument("run_scaling_bench: repeats must be >= 5");
  for (size_t i = 1; i < sizes.size(); ++i) {
    if (sizes[i] < sizes[i - 1]) throw std::invalid_argument("run_scaling_bench: sizes not ascending");
  }

  const int64_t channels = heads * head_dim;
  const SpaOptions opts;
  std::vector<ScalingRow> rows;

  for (const int64_t n : sizes) {
    Rng rng(seed ^ uint64_t(n));
    // Scene with a grid shaped for ~m vertices; vertex association gives
    // exactly 8 pairs per point.
    GridSpec grid;
    grid.origin = {0.0, 0.0, 0.0};
    grid.shape = shape_for_vertex_count(m);
    grid.spacing = {1.0, 1.0, 1.0};
    PointCloud cloud;
    cloud.positions.reserve(size_t(n));
    for (int64_t i = 0; i < n; ++i) {
      cloud.positions.push_back({rng.uniform(0.0, double(grid.shape[0])),
                                 rng.uniform(0.0, double(grid.shape[1])),
                                 rng.uniform(0.0, double(grid.shape[2]))});
    }
    cloud.features = Matrix::zeros(n, 1);

    ProxySet proxies;
    proxies.grid = grid;
    proxies.positions.reserve(size_t(grid.vertex_count()));
    for (int64_t ix = 0; ix <= grid.shape[0]; ++ix)
      for (int64_t iy = 0; iy <= grid.shape[1]; ++iy)
        for (int64_t iz = 0; iz <= grid.shape[2]; ++iz)
          proxies.positions.push_back(grid.vertex_position(ix, iy, iz));
    const int64_t m_real = int64_t(proxies.positions.size());

    const AssociationList assoc = vertex_associate(cloud, proxies, 3);

    const Matrix q = random_features(n, channels, rng);
    const Matrix kf = random_features(m_real, channels, rng);
    const Matrix vf = random_features(m_real, channels, rng);

    ScalingRow row;
    row.n = n;
    const FlopCount flops = spa_flop_count(n, m_real, k, head_dim, heads);
    row.sparse_flops = flops.sparse_flops;
    row.dense_flops = flops.dense_flops;

    const bool dense_allowed = double(n) * double(m_real) <= dense_cap_entries;
    if (use_f32) {
      const std::vector<float> q32 = to_f32(q);
      const std::vector<float> k32 = to_f32(kf);
      const std::vector<float> v32 = to_f32(vf);
      std::vector<float> out = sparse_forward_f32(q32, k32, v32, assoc, heads, head_dim);
      std::vector<double> times;
      for (int64_t r = 0; r < repeats; ++r) {
        const auto t0 = Clock::now();
        out = sparse_forward_f32(q32, k32, v32, assoc, heads, head_dim);
        times.push_back(ms_between(t0, Clock::now()));
      }
      row.sparse_ms = median(times);
      row.checksum = 0.0;
      for (float x : out) row.checksum += double(x);

      if (dense_allowed) {
        (void)dense_forward_f32(q32, k32, v32, assoc, heads, head_dim);
        std::vector<double> dtimes;
        for (int64_t r = 0; r < repeats; ++r) {
          const auto t0 = Clock::now();
          (void)dense_forward_f32(q32, k32, v32, assoc, heads, head_dim);
          dtimes.push_back(ms_between(t0, Clock::now()));
        }
        row.dense_ms = median(dtimes);
      } else {
        row.dense_skipped = true;
      }
      rows.push_back(row);
      continue;
    }

    // warm-up discarded
    Matrix out = spa_forward_core(q, kf, vf, assoc, Direction::ProxyToPoint, heads, nullptr, opts);
    std::vector<double> times;
    for (int64_t r = 0; r < repeats; ++r) {
      const auto t0 = Clock::now();
      out = spa_forward_core(q, kf, vf, assoc, Direction::ProxyToPoint, heads, nullptr, opts);
      times.push_back(ms_between(t0, Clock::now()));
    }
    row.sparse_ms = median(times);
    row.checksum = 0.0;
    for (double x : out.data) row.checksum += x;

    if (dense_allowed) {
      (void)dense_oracle_core(q, kf, vf, assoc, Direction::ProxyToPoint, heads, nullptr, opts,
                              int64_t(dense_cap_entries));
      std::vector<double> dtimes;
      for (int64_t r = 0; r < repeats; ++r) {
        const auto t0 = Clock::now();
        (void)dense_oracle_core(q, kf, vf, assoc, Direction::ProxyToPoint, heads, nullptr, opts,
                                int64_t(dense_cap_entries));
        dtimes.push_back(ms_between(t0, Clock::now()));
      }
      row.dense_ms = median(dtimes);
    } else {
      row.dense_skipped = true;
    }
    rows.push_back(row);
  }
  return rows;
}

double fit_loglog_slope(const std::vector<ScalingRow>& rows) {
  if (rows.size() < 2) throw std::invalid_argument("fit_loglog_slope: need at least two rows");
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  const double n = double(rows.size());
  for (const auto& r : rows) {
    const double x = std::log(double(r.n));
    const double y = std::log(r.sparse_ms);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

void write_scaling_csv(const std::vector<ScalingRow>& rows, std::ostream& out) {
  out << "n,sparse_ms,dense_ms,dense_skipped,sparse_flops,dense_flops,ratio\n";
  for (const auto& r : rows) {
    out << r.n << ',' << r.sparse_ms << ',';
    if (r.dense_skipped) {
      out << "skipped";
    } else {
      out << r.dense_ms;
    }
    out << ',' << (r.dense_skipped ? 1 : 0) << ',' << r.sparse_flops << ',' << r.dense_flops
        << ',' << (r.dense_skipped ? 0.0 : r.dense_ms / r.sparse_ms) << '\n';
  }
}

LatencyNode run_latency_decomposition(const PointCloud& scene, const Config& cfg,
                                      const LocalFusionFn* local_override) {
  cfg.validate_or_throw();
  LatencyNode root{"total", 0.0, {}};

  const auto t_all0 = Clock::now();

  auto t0 = Clock::now();
  const ProxySet proxies = sample_proxies(scene, SamplerKind::spatial_wise(), cfg);
  const double t_sampling = ms_between(t0, Clock::now());

  t0 = Clock::now();
  const AssociationList assoc = vertex_associate(scene, proxies, cfg.assoc_dim);
  const double t_assoc = ms_between(t0, Clock::now());

  t0 = Clock::now();
  Rng rng(cfg.seed);
  const int64_t c = cfg.channels();
  const double scale = 1.0 / std::sqrt(double(c));
  Matrix point_feat;
  if (scene.channels() == c) {
    point_feat = scene.features;
  } else {
    const Matrix w_in = [&] {
      Matrix w(scene.channels(), c);
      for (double& v : w.data) v = scale * rng.normal();
      return w;
    }();
    point_feat = matmul(scene.features, w_in);
  }
  MlpParams mlp;
  mlp.weights = {Matrix::identity(c)};
  mlp.biases = {std::vector<double>(size_t(c), 0.0)};
  const Matrix proxy_feat =
      proxy_init_features(point_feat, proxies, assoc, mlp, cfg.embed_temperature);
  const CellGroups cells = build_cell_groups(std::span<const Vec3>(scene.positions),
                                             *proxies.grid);
  const double t_proxy_init = ms_between(t0, Clock::now());

  BlockParams params = random_block_params(
      cfg.heads, cfg.head_dim, cfg.trb_size, cfg.trb_scale_pp, cfg.trb_scale_px,
      TrbInitSchedule{cfg.trb_sigma_center, cfg.trb_sigma_corner, cfg.trb_strength}, scale, rng);
  BlockOptions opts = BlockOptions::from_config(cfg);

  BlockIo io;
  io.point_feat = &point_feat;
  io.proxy_feat = &proxy_feat;
  io.pos_pt = std::span<const Vec3>(scene.positions);
  io.pos_px = std::span<const Vec3>(proxies.positions);
  io.occupied = &proxies.occupied;
  io.assoc = &assoc;
  io.cells = &cells;

  BlockTimings bt;
  t0 = Clock::now();
  (void)sp2t_block_forward(io, params, opts, nullptr, local_override, &bt);
  const double t_block = ms_between(t0, Clock::now());

  const double t_total = ms_between(t_all0, Clock::now());

  LatencyNode block{"block", t_block, {}};
  block.children.push_back({"local_fusion", bt.local_fusion_ms, {}});
  block.children.push_back({"trb_bias", bt.trb_bias_ms, {}});
  block.children.push_back({"spa_p2px", bt.spa_p2px_ms, {}});
  block.children.push_back({"global_fusion", bt.global_fusion_ms, {}});
  block.children.push_back({"spa_px2p", bt.spa_px2p_ms, {}});
  double block_children = 0.0;
  for (const auto& ch : block.children) block_children += ch.ms;
  block.children.push_back({"other", std::max(0.0, t_block - block_children), {}});

  root.ms = t_total;
  root.children.push_back({"sampling", t_sampling, {}});
  root.children.push_back({"association", t_assoc, {}});
  root.children.push_back({"proxy_init", t_proxy_init, {}});
  root.children.push_back(block);
  double accounted = t_sampling + t_assoc + t_proxy_init + t_block;
  root.children.push_back({"other", std::max(0.0, t_total - accounted), {}});
  return root;
}

namespace {

void latency_json_rec(const LatencyNode& node, std::ostream& out, int indent) {
  const std::string pad(size_t(indent), ' ');
  out << pad << "{\"name\": \"" << node.name << "\", \"ms\": " << node.ms;
  if (!node.children.empty()) {
    out << ", \"children\": [\n";
    for (size_t i = 0; i < node.children.size(); ++i) {
      latency_json_rec(node.children[i], out, indent + 2);
      if (i + 1 < node.children.size()) out << ',';
      out << '\n';
    }
    out << pad << "]";
  }
  out << "}";
}

void latency_csv_rec(const LatencyNode& node, std::ostream& out, const std::string& prefix,
                     double total) {
  const std::string path = prefix.empty() ? node.name : prefix + "/" + node.name;
  out << path << ',' << node.ms << ',' << (total > 0.0 ? 100.0 * node.ms / total : 0.0) << '\n';
  for (const auto& ch : node.children) latency_csv_rec(ch, out, path, total);
}

}  // namespace

void write_latency_json(const LatencyNode& node, std::ostream& out) {
  latency_json_rec(node, out, 0);
  out << '\n';
}

void write_latency_csv(const LatencyNode& node, std::ostream& out) {
  out << "operator,ms,percent_of_total\n";
  latency_csv_rec(node, out, "", node.ms);
}

std::vector<SamplerSweepRow> run_sampler_sweep(std::span<const double> aspects, const Config& cfg,
                                               int64_t points_per_scene, double fix_size_spacing) {
  std::vector<SamplerSweepRow> rows;
  const int64_t fixnum_per_axis =
      std::max<int64_t>(1, int64_t(std::llround(std::cbrt(double(cfg.proxy_count_max)))));

  for (const double aspect : aspects) {
    const PointCloud scene = make_slab_scene(points_per_scene, aspect, 1, cfg.seed);

    auto grid_row = [&](const std::string& name, const SamplerKind& kind) {
      SamplerSweepRow row;
      row.sampler = name;
      row.aspect = aspect;
      try {
        const ProxySet proxies = sample_proxies(scene, kind, cfg);
        row.proxy_count = proxies.size();
        if (proxies.grid) {
          const GridSpec& g = *proxies.grid;
          row.cell_count = g.cell_count();
          const double lo = std::min({g.spacing.x, g.spacing.y, g.spacing.z});
          const double hi = std::max({g.spacing.x, g.spacing.y, g.spacing.z});
          row.spacing_aspect = hi / lo;
          row.count_in_range =
              row.cell_count >= cfg.proxy_count_min && row.cell_count <= cfg.proxy_count_max;
        }
      } catch (const std::runtime_error&) {
        row.budget_exceeded = true;
      }
      return row;
    };

    rows.push_back(grid_row("wise", SamplerKind::spatial_wise()));
    rows.push_back(grid_row("fix-num", SamplerKind::fix_number(fixnum_per_axis, fixnum_per_axis,
                                                               fixnum_per_axis)));
    rows.push_back(grid_row("fix-size", SamplerKind::fix_size(fix_size_spacing)));
    rows.push_back(grid_row("fps", SamplerKind::fps(std::min<int64_t>(cfg.proxy_count_max,
                                                                      points_per_scene))));
  }
  return rows;
}

void write_sweep_csv(const std::vector<SamplerSweepRow>& rows, std::ostream& out) {
  out << "sampler,aspect,proxy_count,cell_count,spacing_aspect,budget_exceeded,count_in_range\n";
  for (const auto& r : rows) {
    out << r.sampler << ',' << r.aspect << ',' << r.proxy_count << ',' << r.cell_count << ','
        << r.spacing_aspect << ',' << (r.budget_exceeded ? 1 : 0) << ','
        << (r.count_in_range ? 1 : 0) << '\n';
  }
}

}  // namespace sp2t
