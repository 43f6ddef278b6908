#include "sp2t/block.hpp"

#include "sp2t/sampling.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

namespace sp2t {

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr double kInvSqrt2 = 0.7071067811865476;
constexpr double kInvSqrt2Pi = 0.3989422804014327;

// ---------------------------------------------------------------------------
// Elementary layers
// ---------------------------------------------------------------------------

Matrix linear_forward(const Matrix& x, const Matrix& w, const std::vector<double>& b) {
  Matrix y = matmul(x, w);
  if (!b.empty()) {
    if (int64_t(b.size()) != y.cols) throw std::invalid_argument("linear: bias size mismatch");
    for (int64_t i = 0; i < y.rows; ++i) {
      double* r = y.row(i);
      for (int64_t j = 0; j < y.cols; ++j) r[j] += b[size_t(j)];
    }
  }
  return y;
}

// dx returned; dW/db accumulated into the provided buffers.
Matrix linear_backward(const Matrix& x, const Matrix& w, const Matrix& dy, Matrix* d_w,
                       std::vector<double>* d_b) {
  if (d_w != nullptr) add_inplace(*d_w, matmul_at_b(x, dy));
  if (d_b != nullptr) {
    for (int64_t i = 0; i < dy.rows; ++i) {
      const double* r = dy.row(i);
      for (int64_t j = 0; j < dy.cols; ++j) (*d_b)[size_t(j)] += r[j];
    }
  }
  return matmul_a_bt(dy, w);
}

Matrix layer_norm_forward(const Matrix& x, const LayerNormParams& p, LayerNormCtx* save) {
  const int64_t c = x.cols;
  if (int64_t(p.gamma.size()) != c || int64_t(p.beta.size()) != c)
    throw std::invalid_argument("layer_norm: parameter size mismatch");
  Matrix y(x.rows, c);
  Matrix xhat(x.rows, c);
  std::vector<double> inv_std(size_t(x.rows));
  for (int64_t i = 0; i < x.rows; ++i) {
    const double* xr = x.row(i);
    double mean = 0.0;
    for (int64_t j = 0; j < c; ++j) mean += xr[j];
    mean /= double(c);
    double var = 0.0;
    for (int64_t j = 0; j < c; ++j) {
      const double d = xr[j] - mean;
      var += d * d;
    }
    var /= double(c);
    const double is = 1.0 / std::sqrt(var + kLayerNormEps);
    inv_std[size_t(i)] = is;
    double* hr = xhat.row(i);
    double* yr = y.row(i);
    for (int64_t j = 0; j < c; ++j) {
      hr[j] = (xr[j] - mean) * is;
      yr[j] = p.gamma[size_t(j)] * hr[j] + p.beta[size_t(j)];
    }
  }
  if (save != nullptr) {
    save->xhat = std::move(xhat);
    save->inv_std = std::move(inv_std);
  } else {
    (void)xhat;
  }
  return y;
}

Matrix layer_norm_backward(const LayerNormCtx& ctx, const LayerNormParams& p, const Matrix& dy,
                           LayerNormGrads& g) {
  const int64_t c = dy.cols;
  Matrix dx(dy.rows, c);
  for (int64_t i = 0; i < dy.rows; ++i) {
    const double* dyr = dy.row(i);
    const double* hr = ctx.xhat.row(i);
    double sum_dh = 0.0;
    double sum_dh_h = 0.0;
    for (int64_t j = 0; j < c; ++j) {
      const double dh = dyr[j] * p.gamma[size_t(j)];
      sum_dh += dh;
      sum_dh_h += dh * hr[j];
      g.d_gamma[size_t(j)] += dyr[j] * hr[j];
      g.d_beta[size_t(j)] += dyr[j];
    }
    const double is = ctx.inv_std[size_t(i)];
    double* dxr = dx.row(i);
    for (int64_t j = 0; j < c; ++j) {
      const double dh = dyr[j] * p.gamma[size_t(j)];
      dxr[j] = is * (dh - sum_dh / double(c) - hr[j] * sum_dh_h / double(c));
    }
  }
  return dx;
}

Matrix ffn_forward(const Matrix& x, const FeedForwardParams& p, FfnCtx* save) {
  Matrix pre = linear_forward(x, p.w1, p.b1);
  Matrix act(pre.rows, pre.cols);
  for (size_t i = 0; i < pre.data.size(); ++i) act.data[i] = gelu(pre.data[i]);
  Matrix y = linear_forward(act, p.w2, p.b2);
  if (save != nullptr) {
    save->x = x;
    save->pre = std::move(pre);
    save->act = std::move(act);
  }
  return y;
}

Matrix ffn_backward(const FfnCtx& ctx, const FeedForwardParams& p, const Matrix& dy,
                    Matrix& d_w1, std::vector<double>& d_b1, Matrix& d_w2,
                    std::vector<double>& d_b2) {
  Matrix d_act = linear_backward(ctx.act, p.w2, dy, &d_w2, &d_b2);
  for (size_t i = 0; i < d_act.data.size(); ++i) d_act.data[i] *= gelu_grad(ctx.pre.data[i]);
  return linear_backward(ctx.x, p.w1, d_act, &d_w1, &d_b1);
}

Matrix gather_rows(const Matrix& x, const std::vector<int64_t>& rows) {
  Matrix y(int64_t(rows.size()), x.cols);
  for (size_t i = 0; i < rows.size(); ++i) {
    const double* src = x.row(rows[i]);
    std::copy(src, src + x.cols, y.row(int64_t(i)));
  }
  return y;
}

AssociationList complete_association(int64_t n) {
  std::vector<std::pair<int64_t, int64_t>> pairs;
  pairs.reserve(size_t(n) * size_t(n));
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < n; ++j) pairs.emplace_back(i, j);
  return make_association_list(std::move(pairs), n, n);
}

void accumulate_trb_grad(const TrbTable& table, const AssociationList& assoc,
                         std::span<const Vec3> pos_pt, std::span<const Vec3> pos_px,
                         const Matrix& d_bias, std::vector<double>& grad) {
  for (int64_t a = 0; a < assoc.size(); ++a) {
    const Vec3 disp =
        pos_pt[size_t(assoc.pt[size_t(a)])] - pos_px[size_t(assoc.px[size_t(a)])];
    trb_backward(table, disp,
                 std::span<const double>(d_bias.row(a), size_t(d_bias.cols)), grad);
  }
}

Matrix random_matrix(int64_t r, int64_t c, double scale, Rng& rng) {
  Matrix m(r, c);
  for (double& v : m.data) v = scale * rng.normal();
  return m;
}

}  // namespace

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

double gelu_grad(double x) {
  return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

CellGroups build_cell_groups(std::span<const Vec3> positions, const GridSpec& grid) {
  CellGroups g;
  const int64_t n = int64_t(positions.size());
  g.cell_of_point.resize(size_t(n));
  for (int64_t i = 0; i < n; ++i) {
    const auto cell = cell_of(positions[size_t(i)], grid);
    g.cell_of_point[size_t(i)] = (cell[0] * grid.shape[1] + cell[1]) * grid.shape[2] + cell[2];
  }
  g.n_groups = grid.cell_count();
  g.order.resize(size_t(n));
  std::iota(g.order.begin(), g.order.end(), 0);
  std::sort(g.order.begin(), g.order.end(), [&](int64_t a, int64_t b) {
    if (g.cell_of_point[size_t(a)] != g.cell_of_point[size_t(b)])
      return g.cell_of_point[size_t(a)] < g.cell_of_point[size_t(b)];
    return a < b;
  });
  g.offsets.assign(size_t(g.n_groups) + 1, 0);
  for (int64_t i = 0; i < n; ++i) g.offsets[size_t(g.cell_of_point[size_t(i)]) + 1]++;
  for (int64_t i = 0; i < g.n_groups; ++i) g.offsets[size_t(i) + 1] += g.offsets[size_t(i)];
  return g;
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

BlockParams random_block_params(int64_t heads, int64_t head_dim, int64_t trb_size,
                                double trb_scale_pp, double trb_scale_px,
                                const TrbInitSchedule& trb_schedule, double weight_scale,
                                Rng& rng) {
  const int64_t c = heads * head_dim;
  BlockParams p;
  p.heads = heads;
  p.head_dim = head_dim;

  auto ln = [c] { return LayerNormParams{std::vector<double>(size_t(c), 1.0),
                                         std::vector<double>(size_t(c), 0.0)}; };
  p.ln_local = ln();
  p.ln_p2px_q = ln();
  p.ln_p2px_kv = ln();
  p.ln_global = ln();
  p.ln_ffn = ln();
  p.ln_px2p_q = ln();
  p.ln_px2p_kv = ln();

  p.local_weight = random_matrix(c, c, weight_scale, rng);
  p.local_bias.assign(size_t(c), 0.0);
  p.spa_p2px = random_projection(c, weight_scale, rng);
  p.global_attn = random_projection(c, weight_scale, rng);
  p.spa_px2p = random_projection(c, weight_scale, rng);
  p.ffn.w1 = random_matrix(c, 4 * c, weight_scale, rng);
  p.ffn.b1.assign(size_t(4 * c), 0.0);
  p.ffn.w2 = random_matrix(4 * c, c, weight_scale, rng);
  p.ffn.b2.assign(size_t(c), 0.0);
  p.trb_pp = trb_init(heads, trb_size, trb_scale_pp, trb_schedule, rng);
  p.trb_px = trb_init(heads, trb_size, trb_scale_px, trb_schedule, rng);
  return p;
}

void zero_perturbation_branches(BlockParams& p) {
  auto zero = [](Matrix& m) { std::fill(m.data.begin(), m.data.end(), 0.0); };
  zero(p.local_weight);
  std::fill(p.local_bias.begin(), p.local_bias.end(), 0.0);
  zero(p.spa_p2px.wo);
  zero(p.global_attn.wo);
  zero(p.spa_px2p.wo);
  zero(p.ffn.w2);
  std::fill(p.ffn.b2.begin(), p.ffn.b2.end(), 0.0);
  std::fill(p.trb_pp.values.begin(), p.trb_pp.values.end(), 0.0);
  std::fill(p.trb_px.values.begin(), p.trb_px.values.end(), 0.0);
}

BlockGrads zero_block_grads(const BlockParams& p) {
  const int64_t c = p.channels();
  BlockGrads g;
  auto lng = [c] { return LayerNormGrads{std::vector<double>(size_t(c), 0.0),
                                         std::vector<double>(size_t(c), 0.0)}; };
  g.d_ln_local = lng();
  g.d_ln_p2px_q = lng();
  g.d_ln_p2px_kv = lng();
  g.d_ln_global = lng();
  g.d_ln_ffn = lng();
  g.d_ln_px2p_q = lng();
  g.d_ln_px2p_kv = lng();
  g.d_local_weight = Matrix::zeros(c, c);
  g.d_local_bias.assign(size_t(c), 0.0);
  auto spa_g = [c] {
    return SpaProjGrads{Matrix::zeros(c, c), Matrix::zeros(c, c), Matrix::zeros(c, c),
                        Matrix::zeros(c, c)};
  };
  g.d_spa_p2px = spa_g();
  g.d_global_attn = spa_g();
  g.d_spa_px2p = spa_g();
  g.d_ffn_w1 = Matrix::zeros(c, 4 * c);
  g.d_ffn_b1.assign(size_t(4 * c), 0.0);
  g.d_ffn_w2 = Matrix::zeros(4 * c, c);
  g.d_ffn_b2.assign(size_t(c), 0.0);
  g.d_trb_pp.assign(p.trb_pp.values.size(), 0.0);
  g.d_trb_px.assign(p.trb_px.values.size(), 0.0);
  return g;
}

std::vector<double*> collect_params(BlockParams& p) {
  std::vector<double*> out;
  auto add_vec = [&out](std::vector<double>& v) {
    for (double& x : v) out.push_back(&x);
  };
  auto add_mat = [&out](Matrix& m) {
    for (double& x : m.data) out.push_back(&x);
  };
  add_mat(p.local_weight);
  add_vec(p.local_bias);
  for (LayerNormParams* ln : {&p.ln_local, &p.ln_p2px_q, &p.ln_p2px_kv, &p.ln_global, &p.ln_ffn,
                              &p.ln_px2p_q, &p.ln_px2p_kv}) {
    add_vec(ln->gamma);
    add_vec(ln->beta);
  }
  for (SpaProjection* proj : {&p.spa_p2px, &p.global_attn, &p.spa_px2p}) {
    add_mat(proj->wq);
    add_mat(proj->wk);
    add_mat(proj->wv);
    add_mat(proj->wo);
  }
  add_mat(p.ffn.w1);
  add_vec(p.ffn.b1);
  add_mat(p.ffn.w2);
  add_vec(p.ffn.b2);
  add_vec(p.trb_pp.values);
  add_vec(p.trb_px.values);
  return out;
}

std::vector<double*> collect_grads(BlockGrads& g) {
  std::vector<double*> out;
  auto add_vec = [&out](std::vector<double>& v) {
    for (double& x : v) out.push_back(&x);
  };
  auto add_mat = [&out](Matrix& m) {
    for (double& x : m.data) out.push_back(&x);
  };
  add_mat(g.d_local_weight);
  add_vec(g.d_local_bias);
  for (LayerNormGrads* ln : {&g.d_ln_local, &g.d_ln_p2px_q, &g.d_ln_p2px_kv, &g.d_ln_global,
                             &g.d_ln_ffn, &g.d_ln_px2p_q, &g.d_ln_px2p_kv}) {
    add_vec(ln->d_gamma);
    add_vec(ln->d_beta);
  }
  for (SpaProjGrads* proj : {&g.d_spa_p2px, &g.d_global_attn, &g.d_spa_px2p}) {
    add_mat(proj->d_wq);
    add_mat(proj->d_wk);
    add_mat(proj->d_wv);
    add_mat(proj->d_wo);
  }
  add_mat(g.d_ffn_w1);
  add_vec(g.d_ffn_b1);
  add_mat(g.d_ffn_w2);
  add_vec(g.d_ffn_b2);
  add_vec(g.d_trb_pp);
  add_vec(g.d_trb_px);
  return out;
}

// ---------------------------------------------------------------------------
// Sinusoidal embedding
// ---------------------------------------------------------------------------

Matrix sinusoidal_embed(std::span<const Vec3> positions, int64_t channels, double temperature) {
  if (channels % 6 != 0) throw std::invalid_argument("sinusoidal_embed: channels not divisible by 6");
  if (!(temperature > 0.0)) throw std::invalid_argument("sinusoidal_embed: temperature must be positive");
  const int64_t per_axis = channels / 3;
  const int64_t n_freq = per_axis / 2;
  std::vector<double> freq(static_cast<size_t>(n_freq));
  for (int64_t j = 0; j < n_freq; ++j) {
    freq[size_t(j)] = std::pow(temperature, -double(j) / double(n_freq));
  }
  Matrix out(int64_t(positions.size()), channels);
  for (int64_t i = 0; i < out.rows; ++i) {
    double* r = out.row(i);
    for (int axis = 0; axis < 3; ++axis) {
      const double pos = positions[size_t(i)][axis];
      double* block = r + int64_t(axis) * per_axis;
      for (int64_t j = 0; j < n_freq; ++j) {
        block[2 * j] = std::sin(freq[size_t(j)] * pos);
        block[2 * j + 1] = std::cos(freq[size_t(j)] * pos);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Proxy initialization
// ---------------------------------------------------------------------------

namespace {

Matrix mlp_forward(const Matrix& x, const MlpParams& mlp, ProxyInitCtx* save) {
  if (mlp.weights.empty()) throw std::invalid_argument("mlp: no layers");
  Matrix cur = x;
  const size_t layers = mlp.weights.size();
  for (size_t l = 0; l < layers; ++l) {
    if (save != nullptr) save->layer_in.push_back(cur);
    Matrix pre = linear_forward(cur, mlp.weights[l], mlp.biases[l]);
    if (save != nullptr) save->layer_pre.push_back(pre);
    if (l + 1 < layers) {
      for (double& v : pre.data) v = gelu(v);
    }
    cur = std::move(pre);
  }
  return cur;
}

}  // namespace

Matrix proxy_init_features(const Matrix& point_feat, const ProxySet& proxies,
                           const AssociationList& assoc, const MlpParams& mlp,
                           double embed_temperature, ProxyInitCtx* save) {
  const int64_t m = proxies.size();
  const int64_t c = point_feat.cols;
  Matrix mean_feat(m, c);
  std::vector<int64_t> counts(size_t(m), 0);
  for (int64_t i = 0; i < assoc.size(); ++i) {
    const int64_t px = assoc.px[size_t(i)];
    const int64_t pt = assoc.pt[size_t(i)];
    counts[size_t(px)]++;
    const double* src = point_feat.row(pt);
    double* dst = mean_feat.row(px);
    for (int64_t j = 0; j < c; ++j) dst[j] += src[j];
  }
  for (int64_t i = 0; i < m; ++i) {
    if (counts[size_t(i)] == 0) continue;
    double* r = mean_feat.row(i);
    const double inv = 1.0 / double(counts[size_t(i)]);
    for (int64_t j = 0; j < c; ++j) r[j] *= inv;
  }

  if (save != nullptr) {
    save->mean_feat = mean_feat;
    save->counts = counts;
  }
  Matrix agg = mlp_forward(mean_feat, mlp, save);
  // Proxies with no associated points keep an exactly-zero aggregated part.
  for (int64_t i = 0; i < m; ++i) {
    if (counts[size_t(i)] == 0) {
      double* r = agg.row(i);
      std::fill(r, r + agg.cols, 0.0);
    }
  }
  const Matrix pos = sinusoidal_embed(std::span<const Vec3>(proxies.positions), agg.cols,
                                      embed_temperature);
  add_inplace(agg, pos);
  return agg;
}

ProxySet proxy_init(const PointCloud& points, const ProxySet& proxies,
                    const AssociationList& assoc, const MlpParams& mlp,
                    double embed_temperature) {
  ProxySet out = proxies;
  out.features = proxy_init_features(points.features, proxies, assoc, mlp, embed_temperature);
  return out;
}

Matrix proxy_init_backward(const ProxyInitCtx& ctx, const MlpParams& mlp,
                           const AssociationList& assoc, const Matrix& upstream,
                           MlpGrads* grads) {
  // The positional term has no parameters; only the aggregated part flows.
  Matrix d = upstream;
  for (int64_t i = 0; i < d.rows; ++i) {
    if (ctx.counts[size_t(i)] == 0) {
      double* r = d.row(i);
      std::fill(r, r + d.cols, 0.0);
    }
  }

  const size_t layers = mlp.weights.size();
  if (grads != nullptr && grads->d_weights.empty()) {
    for (size_t l = 0; l < layers; ++l) {
      grads->d_weights.emplace_back(Matrix::zeros(mlp.weights[l].rows, mlp.weights[l].cols));
      grads->d_biases.emplace_back(mlp.biases[l].size(), 0.0);
    }
  }
  for (size_t li = layers; li-- > 0;) {
    Matrix* dw = grads != nullptr ? &grads->d_weights[li] : nullptr;
    std::vector<double>* db = grads != nullptr ? &grads->d_biases[li] : nullptr;
    d = linear_backward(ctx.layer_in[li], mlp.weights[li], d, dw, db);
    if (li > 0) {
      const Matrix& pre = ctx.layer_pre[li - 1];
      for (size_t i = 0; i < d.data.size(); ++i) d.data[i] *= gelu_grad(pre.data[i]);
    }
  }

  // d_mean -> point features through the per-proxy average.
  Matrix d_points = Matrix::zeros(assoc.n_pt, upstream.cols);
  for (int64_t i = 0; i < assoc.size(); ++i) {
    const int64_t px = assoc.px[size_t(i)];
    const int64_t pt = assoc.pt[size_t(i)];
    if (ctx.counts[size_t(px)] == 0) continue;
    const double inv = 1.0 / double(ctx.counts[size_t(px)]);
    const double* src = d.row(px);
    double* dst = d_points.row(pt);
    for (int64_t j = 0; j < d.cols; ++j) dst[j] += inv * src[j];
  }
  return d_points;
}

// ---------------------------------------------------------------------------
// Local fusion stub
// ---------------------------------------------------------------------------

Matrix local_fusion_stub(const Matrix& point_feat, const CellGroups& cells, const Matrix& weight,
                         const std::vector<double>& bias, LocalFusionCtx* save) {
  Matrix lin = linear_forward(point_feat, weight, bias);
  Matrix out(lin.rows, lin.cols);
  std::vector<double> mean(size_t(lin.cols));
  for (int64_t gidx = 0; gidx < cells.n_groups; ++gidx) {
    const int64_t begin = cells.offsets[size_t(gidx)];
    const int64_t end = cells.offsets[size_t(gidx) + 1];
    if (begin == end) continue;
    std::fill(mean.begin(), mean.end(), 0.0);
    for (int64_t i = begin; i < end; ++i) {
      const double* r = lin.row(cells.order[size_t(i)]);
      for (int64_t j = 0; j < lin.cols; ++j) mean[size_t(j)] += r[j];
    }
    const double inv = 1.0 / double(end - begin);
    for (double& v : mean) v *= inv;
    for (int64_t i = begin; i < end; ++i) {
      double* r = out.row(cells.order[size_t(i)]);
      std::copy(mean.begin(), mean.end(), r);
    }
  }
  if (save != nullptr) save->lin = std::move(lin);
  return out;
}

Matrix local_fusion_stub_backward(const LocalFusionCtx& ctx, const CellGroups& cells,
                                  const Matrix& point_feat, const Matrix& weight,
                                  const Matrix& upstream, Matrix* d_weight,
                                  std::vector<double>* d_bias) {
  (void)ctx;  // the cell mean needs no saved state
  Matrix d_lin(upstream.rows, upstream.cols);
  std::vector<double> acc(size_t(upstream.cols));
  for (int64_t gidx = 0; gidx < cells.n_groups; ++gidx) {
    const int64_t begin = cells.offsets[size_t(gidx)];
    const int64_t end = cells.offsets[size_t(gidx) + 1];
    if (begin == end) continue;
    std::fill(acc.begin(), acc.end(), 0.0);
    for (int64_t i = begin; i < end; ++i) {
      const double* r = upstream.row(cells.order[size_t(i)]);
      for (int64_t j = 0; j < upstream.cols; ++j) acc[size_t(j)] += r[j];
    }
    const double inv = 1.0 / double(end - begin);
    for (double& v : acc) v *= inv;
    for (int64_t i = begin; i < end; ++i) {
      double* r = d_lin.row(cells.order[size_t(i)]);
      std::copy(acc.begin(), acc.end(), r);
    }
  }
  return linear_backward(point_feat, weight, d_lin, d_weight, d_bias);
}

// ---------------------------------------------------------------------------
// Global fusion
// ---------------------------------------------------------------------------

Matrix global_fusion(const Matrix& proxy_feat, std::span<const Vec3> positions,
                     const std::vector<uint8_t>& occupied, const BlockParams& params,
                     const BlockOptions& opts, GlobalFusionCtx* save) {
  GlobalFusionCtx local;
  GlobalFusionCtx& ctx = save != nullptr ? *save : local;

  ctx.active.clear();
  for (int64_t i = 0; i < proxy_feat.rows; ++i) {
    if (opts.include_empty_proxies || occupied[size_t(i)]) ctx.active.push_back(i);
  }
  Matrix out = proxy_feat;
  if (ctx.active.empty()) return out;

  ctx.pos_act.clear();
  for (int64_t i : ctx.active) ctx.pos_act.push_back(positions[size_t(i)]);
  ctx.x_act = gather_rows(proxy_feat, ctx.active);
  ctx.full_assoc = complete_association(int64_t(ctx.active.size()));

  ctx.xn = layer_norm_forward(ctx.x_act, params.ln_global, &ctx.ln_attn);
  // Self-attention as SPA over the complete pair list; queries sit on the
  // pt side so the bias displacement is p_query - p_key.
  const SpaResult attn = spa_forward(ctx.xn, ctx.xn, ctx.full_assoc, Direction::ProxyToPoint,
                                     params.global_attn, params.heads, &params.trb_px,
                                     ctx.pos_act, ctx.pos_act, opts.spa,
                                     save != nullptr ? &ctx.attn_ws : nullptr);
  ctx.x2 = ctx.x_act;
  add_inplace(ctx.x2, attn.out);

  ctx.x2n = layer_norm_forward(ctx.x2, params.ln_ffn, &ctx.ln_ffn);
  Matrix f = ffn_forward(ctx.x2n, params.ffn, &ctx.ffn);
  Matrix x3 = ctx.x2;
  add_inplace(x3, f);

  for (size_t i = 0; i < ctx.active.size(); ++i) {
    const double* src = x3.row(int64_t(i));
    std::copy(src, src + x3.cols, out.row(ctx.active[i]));
  }
  return out;
}

Matrix global_fusion_backward(const GlobalFusionCtx& ctx, const BlockParams& params,
                              const BlockOptions& opts, const Matrix& upstream,
                              BlockGrads& grads) {
  (void)opts;
  Matrix d_in = upstream;  // pass-through rows keep their upstream as-is
  if (ctx.active.empty()) return d_in;

  const Matrix d_x3 = gather_rows(upstream, ctx.active);

  // FFN residual.
  Matrix d_x2 = d_x3;
  Matrix d_x2n = ffn_backward(ctx.ffn, params.ffn, d_x3, grads.d_ffn_w1, grads.d_ffn_b1,
                              grads.d_ffn_w2, grads.d_ffn_b2);
  add_inplace(d_x2, layer_norm_backward(ctx.ln_ffn, params.ln_ffn, d_x2n, grads.d_ln_ffn));

  // Attention residual; q and k come from the same normalized matrix.
  Matrix d_xact = d_x2;
  SpaGrads sg = spa_backward(ctx.attn_ws, ctx.xn, ctx.xn, params.global_attn, d_x2);
  add_inplace(grads.d_global_attn.d_wq, sg.d_wq);
  add_inplace(grads.d_global_attn.d_wk, sg.d_wk);
  add_inplace(grads.d_global_attn.d_wv, sg.d_wv);
  add_inplace(grads.d_global_attn.d_wo, sg.d_wo);
  Matrix d_xn = sg.d_query_feat;
  add_inplace(d_xn, sg.d_key_feat);
  add_inplace(d_xact, layer_norm_backward(ctx.ln_attn, params.ln_global, d_xn, grads.d_ln_global));
  accumulate_trb_grad(params.trb_px, ctx.full_assoc, ctx.pos_act, ctx.pos_act, sg.d_bias,
                      grads.d_trb_px);

  for (size_t i = 0; i < ctx.active.size(); ++i) {
    const double* src = d_xact.row(int64_t(i));
    std::copy(src, src + d_xact.cols, d_in.row(ctx.active[i]));
  }
  return d_in;
}

// ---------------------------------------------------------------------------
// Block wiring
// ---------------------------------------------------------------------------

namespace {

double ms_since(const std::chrono::steady_clock::time_point& t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

std::pair<Matrix, Matrix> sp2t_block_forward(const BlockIo& io, const BlockParams& params,
                                             const BlockOptions& opts, BlockWorkspace* save,
                                             const LocalFusionFn* local_override,
                                             BlockTimings* timings) {
  BlockWorkspace local;
  BlockWorkspace& ws = save != nullptr ? *save : local;
  SpaWorkspace* const spa1_save = save != nullptr ? &ws.spa1 : nullptr;
  SpaWorkspace* const spa2_save = save != nullptr ? &ws.spa2 : nullptr;

  const Matrix& fpt0 = *io.point_feat;
  const Matrix& fpx0 = *io.proxy_feat;

  // 1. local fusion on the point stream
  auto t0 = std::chrono::steady_clock::now();
  ws.t = layer_norm_forward(fpt0, params.ln_local, &ws.ln_local);
  Matrix lf = local_override != nullptr
                  ? (*local_override)(ws.t, *io.cells)
                  : local_fusion_stub(ws.t, *io.cells, params.local_weight, params.local_bias,
                                      &ws.lf);
  ws.fpt1 = fpt0;
  add_inplace(ws.fpt1, lf);
  if (timings != nullptr) timings->local_fusion_ms = ms_since(t0);

  // Shared point-proxy bias: one lookup pass per forward, reused by both
  // interaction directions.
  t0 = std::chrono::steady_clock::now();
  const Matrix* shared_bias = nullptr;
  const TrbTable* trb_pp = &params.trb_pp;
  if (opts.share_trb) {
    ws.bias_pp = trb_bias_for_assoc(params.trb_pp, *io.assoc, io.pos_pt, io.pos_px);
    ws.shared_bias = true;
    shared_bias = &ws.bias_pp;
    trb_pp = nullptr;
  }
  if (timings != nullptr) timings->trb_bias_ms = ms_since(t0);

  // 2. point -> proxy interaction
  t0 = std::chrono::steady_clock::now();
  ws.qn1 = layer_norm_forward(fpx0, params.ln_p2px_q, &ws.ln_p2px_q);
  ws.kn1 = layer_norm_forward(ws.fpt1, params.ln_p2px_kv, &ws.ln_p2px_kv);
  const SpaResult a1 =
      spa_forward(ws.qn1, ws.kn1, *io.assoc, Direction::PointToProxy, params.spa_p2px,
                  params.heads, trb_pp, io.pos_pt, io.pos_px, opts.spa, spa1_save, shared_bias);
  ws.fpx1 = fpx0;
  add_inplace(ws.fpx1, a1.out);
  if (timings != nullptr) timings->spa_p2px_ms = ms_since(t0);

  // 3. global fusion over proxies
  t0 = std::chrono::steady_clock::now();
  ws.fpx2 = global_fusion(ws.fpx1, io.pos_px, *io.occupied, params, opts,
                          save != nullptr ? &ws.gf : nullptr);
  if (timings != nullptr) timings->global_fusion_ms = ms_since(t0);

  // 4. proxy -> point interaction
  t0 = std::chrono::steady_clock::now();
  ws.qn2 = layer_norm_forward(ws.fpt1, params.ln_px2p_q, &ws.ln_px2p_q);
  ws.kn2 = layer_norm_forward(ws.fpx2, params.ln_px2p_kv, &ws.ln_px2p_kv);
  const SpaResult a2 =
      spa_forward(ws.qn2, ws.kn2, *io.assoc, Direction::ProxyToPoint, params.spa_px2p,
                  params.heads, trb_pp, io.pos_pt, io.pos_px, opts.spa, spa2_save, shared_bias);
  ws.fpt2 = ws.fpt1;
  add_inplace(ws.fpt2, a2.out);
  if (timings != nullptr) timings->spa_px2p_ms = ms_since(t0);

  return {ws.fpt2, ws.fpx2};
}

void sp2t_block_backward(const BlockWorkspace& ws, const BlockIo& io, const BlockParams& params,
                         const BlockOptions& opts, const Matrix& d_point_out,
                         const Matrix& d_proxy_out, BlockGrads& grads, Matrix* d_point_in,
                         Matrix* d_proxy_in) {
  // 4'. proxy -> point
  SpaGrads sg2 = spa_backward(ws.spa2, ws.qn2, ws.kn2, params.spa_px2p, d_point_out);
  add_inplace(grads.d_spa_px2p.d_wq, sg2.d_wq);
  add_inplace(grads.d_spa_px2p.d_wk, sg2.d_wk);
  add_inplace(grads.d_spa_px2p.d_wv, sg2.d_wv);
  add_inplace(grads.d_spa_px2p.d_wo, sg2.d_wo);
  Matrix d_fpt1 = d_point_out;
  add_inplace(d_fpt1,
              layer_norm_backward(ws.ln_px2p_q, params.ln_px2p_q, sg2.d_query_feat,
                                  grads.d_ln_px2p_q));
  Matrix d_fpx2 = d_proxy_out;
  add_inplace(d_fpx2, layer_norm_backward(ws.ln_px2p_kv, params.ln_px2p_kv, sg2.d_key_feat,
                                          grads.d_ln_px2p_kv));

  // 3'. global fusion
  const Matrix d_fpx1 = global_fusion_backward(ws.gf, params, opts, d_fpx2, grads);

  // 2'. point -> proxy
  SpaGrads sg1 = spa_backward(ws.spa1, ws.qn1, ws.kn1, params.spa_p2px, d_fpx1);
  add_inplace(grads.d_spa_p2px.d_wq, sg1.d_wq);
  add_inplace(grads.d_spa_p2px.d_wk, sg1.d_wk);
  add_inplace(grads.d_spa_p2px.d_wv, sg1.d_wv);
  add_inplace(grads.d_spa_p2px.d_wo, sg1.d_wo);
  Matrix d_fpx0 = d_fpx1;
  add_inplace(d_fpx0, layer_norm_backward(ws.ln_p2px_q, params.ln_p2px_q, sg1.d_query_feat,
                                          grads.d_ln_p2px_q));
  add_inplace(d_fpt1, layer_norm_backward(ws.ln_p2px_kv, params.ln_p2px_kv, sg1.d_key_feat,
                                          grads.d_ln_p2px_kv));

  // The point-proxy table hears from both directions; sharing only
  // deduplicates the forward lookups, so the accumulation is one pass
  // over the summed bias gradients.
  Matrix d_bias = sg1.d_bias;
  add_inplace(d_bias, sg2.d_bias);
  accumulate_trb_grad(params.trb_pp, *io.assoc, io.pos_pt, io.pos_px, d_bias, grads.d_trb_pp);

  // 1'. local fusion
  const Matrix d_t = local_fusion_stub_backward(ws.lf, *io.cells, ws.t, params.local_weight,
                                                d_fpt1, &grads.d_local_weight,
                                                &grads.d_local_bias);
  Matrix d_fpt0 = d_fpt1;
  add_inplace(d_fpt0, layer_norm_backward(ws.ln_local, params.ln_local, d_t, grads.d_ln_local));

  if (d_point_in != nullptr) *d_point_in = std::move(d_fpt0);
  if (d_proxy_in != nullptr) *d_proxy_in = std::move(d_fpx0);
}

// ---------------------------------------------------------------------------
// Toy head
// ---------------------------------------------------------------------------

ToyModel make_toy_model(int64_t raw_dim, int64_t n_classes, const Config& cfg, Rng& rng) {
  const int64_t c = cfg.channels();
  const double scale = 1.0 / std::sqrt(double(c));
  ToyModel m;
  m.w_in = random_matrix(raw_dim, c, 1.0 / std::sqrt(double(raw_dim)), rng);
  m.b_in.assign(size_t(c), 0.0);
  m.proxy_mlp.weights = {random_matrix(c, c, scale, rng), random_matrix(c, c, scale, rng)};
  m.proxy_mlp.biases = {std::vector<double>(size_t(c), 0.0), std::vector<double>(size_t(c), 0.0)};
  m.block = random_block_params(cfg.heads, cfg.head_dim, cfg.trb_size, cfg.trb_scale_pp,
                                cfg.trb_scale_px,
                                TrbInitSchedule{cfg.trb_sigma_center, cfg.trb_sigma_corner,
                                                cfg.trb_strength},
                                scale, rng);
  // zero-initialized head: untrained accuracy sits at chance level
  m.w_out = Matrix::zeros(c, n_classes);
  m.b_out.assign(size_t(n_classes), 0.0);
  m.embed_temperature = cfg.embed_temperature;
  return m;
}

ToyBatch make_toy_batch(PointCloud cloud, std::vector<int> labels, const Config& cfg) {
  ToyBatch b;
  b.cloud = std::move(cloud);
  b.labels = std::move(labels);
  b.proxies = sample_proxies(b.cloud, SamplerKind::spatial_wise(), cfg);
  b.assoc = vertex_associate(b.cloud, b.proxies, cfg.assoc_dim);
  b.cells = build_cell_groups(std::span<const Vec3>(b.cloud.positions), *b.proxies.grid);
  return b;
}

namespace {

struct TensorRef {
  std::string name;
  int64_t rows, cols;
  double* data;
};

std::vector<TensorRef> toy_tensor_refs(ToyModel& m) {
  std::vector<TensorRef> t;
  auto mat = [&t](const std::string& n, Matrix& mm) {
    t.push_back({n, mm.rows, mm.cols, mm.data.data()});
  };
  auto vec = [&t](const std::string& n, std::vector<double>& v) {
    t.push_back({n, 1, int64_t(v.size()), v.data()});
  };
  mat("w_in", m.w_in);
  vec("b_in", m.b_in);
  for (size_t l = 0; l < m.proxy_mlp.weights.size(); ++l) {
    mat("proxy_mlp_w" + std::to_string(l), m.proxy_mlp.weights[l]);
    vec("proxy_mlp_b" + std::to_string(l), m.proxy_mlp.biases[l]);
  }
  BlockParams& b = m.block;
  mat("local_weight", b.local_weight);
  vec("local_bias", b.local_bias);
  const std::pair<std::string, LayerNormParams*> lns[] = {
      {"ln_local", &b.ln_local},     {"ln_p2px_q", &b.ln_p2px_q}, {"ln_p2px_kv", &b.ln_p2px_kv},
      {"ln_global", &b.ln_global},   {"ln_ffn", &b.ln_ffn},       {"ln_px2p_q", &b.ln_px2p_q},
      {"ln_px2p_kv", &b.ln_px2p_kv}};
  for (const auto& [name, ln] : lns) {
    vec(name + "_gamma", ln->gamma);
    vec(name + "_beta", ln->beta);
  }
  const std::pair<std::string, SpaProjection*> projs[] = {
      {"spa_p2px", &b.spa_p2px}, {"global_attn", &b.global_attn}, {"spa_px2p", &b.spa_px2p}};
  for (const auto& [name, proj] : projs) {
    mat(name + "_wq", proj->wq);
    mat(name + "_wk", proj->wk);
    mat(name + "_wv", proj->wv);
    mat(name + "_wo", proj->wo);
  }
  mat("ffn_w1", b.ffn.w1);
  vec("ffn_b1", b.ffn.b1);
  mat("ffn_w2", b.ffn.w2);
  vec("ffn_b2", b.ffn.b2);
  vec("trb_pp", b.trb_pp.values);
  vec("trb_px", b.trb_px.values);
  mat("w_out", m.w_out);
  vec("b_out", m.b_out);
  return t;
}

void write_f64_le(std::ostream& out, double v) {
  uint64_t bits;
  std::memcpy(&bits, &v, 8);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(b), 8);
}

double read_f64_le(std::istream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  if (!in) throw UserError("checkpoint: truncated payload");
  uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= uint64_t(b[i]) << (8 * i);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

}  // namespace

void save_toy_model(const ToyModel& model, std::ostream& out) {
  ToyModel& m = const_cast<ToyModel&>(model);
  const auto tensors = toy_tensor_refs(m);
  out << "sp2t-checkpoint 1\n";
  out << "meta heads " << model.block.heads << " head_dim " << model.block.head_dim
      << " trb_size " << model.block.trb_pp.size << " raw_dim " << model.w_in.rows
      << " n_classes " << model.w_out.cols << " mlp_layers " << model.proxy_mlp.weights.size()
      << " embed_temperature " << model.embed_temperature << "\n";
  for (const auto& t : tensors) out << "tensor " << t.name << ' ' << t.rows << ' ' << t.cols << '\n';
  out << "end\n";
  for (const auto& t : tensors) {
    for (int64_t i = 0; i < t.rows * t.cols; ++i) write_f64_le(out, t.data[i]);
  }
}

ToyModel load_toy_model(std::istream& in, const Config& cfg) {
  std::string line;
  if (!std::getline(in, line) || line != "sp2t-checkpoint 1")
    throw UserError("checkpoint: unrecognized header");
  if (!std::getline(in, line)) throw UserError("checkpoint: missing meta line");
  std::istringstream meta(line);
  std::string tag;
  meta >> tag;
  if (tag != "meta") throw UserError("checkpoint: missing meta line");
  int64_t heads = 0, head_dim = 0, trb_size = 0, raw_dim = 0, n_classes = 0, mlp_layers = 0;
  double embed_temperature = 0.0;
  std::string key;
  while (meta >> key) {
    if (key == "heads") meta >> heads;
    else if (key == "head_dim") meta >> head_dim;
    else if (key == "trb_size") meta >> trb_size;
    else if (key == "raw_dim") meta >> raw_dim;
    else if (key == "n_classes") meta >> n_classes;
    else if (key == "mlp_layers") meta >> mlp_layers;
    else if (key == "embed_temperature") meta >> embed_temperature;
    else throw UserError("checkpoint: unknown meta key '" + key + "'");
  }
  if (heads != cfg.heads || head_dim != cfg.head_dim) {
    throw UserError("checkpoint shape mismatch: file has heads=" + std::to_string(heads) +
                    " head_dim=" + std::to_string(head_dim) + ", config wants heads=" +
                    std::to_string(cfg.heads) + " head_dim=" + std::to_string(cfg.head_dim));
  }
  if (trb_size != cfg.trb_size) {
    throw UserError("checkpoint shape mismatch: file has trb_size=" + std::to_string(trb_size) +
                    ", config wants trb_size=" + std::to_string(cfg.trb_size));
  }

  Rng rng(cfg.seed);
  ToyModel model = make_toy_model(raw_dim, n_classes, cfg, rng);
  model.embed_temperature = embed_temperature;
  auto tensors = toy_tensor_refs(model);

  size_t next = 0;
  while (std::getline(in, line)) {
    if (line == "end") break;
    std::istringstream ls(line);
    std::string kind, name;
    int64_t rows = 0, cols = 0;
    ls >> kind >> name >> rows >> cols;
    if (kind != "tensor") throw UserError("checkpoint: malformed manifest line '" + line + "'");
    if (next >= tensors.size()) throw UserError("checkpoint: unexpected tensor '" + name + "'");
    const TensorRef& ref = tensors[next];
    if (name != ref.name) {
      throw UserError("checkpoint: tensor order mismatch, expected '" + ref.name + "', got '" +
                      name + "'");
    }
    if (rows != ref.rows || cols != ref.cols) {
      throw UserError("checkpoint shape mismatch for " + name + ": file has " +
                      std::to_string(rows) + "x" + std::to_string(cols) + ", config wants " +
                      std::to_string(ref.rows) + "x" + std::to_string(ref.cols));
    }
    ++next;
  }
  if (next != tensors.size()) throw UserError("checkpoint: manifest lists too few tensors");
  for (const auto& t : tensors) {
    for (int64_t i = 0; i < t.rows * t.cols; ++i) t.data[i] = read_f64_le(in);
  }
  return model;
}

namespace {

struct ToyForwardState {
  Matrix fpt0, fpx0;
  ProxyInitCtx pic;
  BlockWorkspace bws;
  Matrix fpt2, fpx2;
  Matrix logits;
  Matrix probs;
};

ToyStepStats toy_forward(const ToyBatch& batch, const ToyModel& model, const BlockOptions& opts,
                         ToyForwardState* state) {
  ToyForwardState local;
  ToyForwardState& st = state != nullptr ? *state : local;

  st.fpt0 = linear_forward(batch.cloud.features, model.w_in, model.b_in);
  st.fpx0 = proxy_init_features(st.fpt0, batch.proxies, batch.assoc, model.proxy_mlp,
                                model.embed_temperature, &st.pic);

  BlockIo io;
  io.point_feat = &st.fpt0;
  io.proxy_feat = &st.fpx0;
  io.pos_pt = std::span<const Vec3>(batch.cloud.positions);
  io.pos_px = std::span<const Vec3>(batch.proxies.positions);
  io.occupied = &batch.proxies.occupied;
  io.assoc = &batch.assoc;
  io.cells = &batch.cells;
  auto [fpt2, fpx2] = sp2t_block_forward(io, model.block, opts, &st.bws);
  st.fpt2 = std::move(fpt2);
  st.fpx2 = std::move(fpx2);

  st.logits = linear_forward(st.fpt2, model.w_out, model.b_out);
  const int64_t n = st.logits.rows;
  const int64_t k = st.logits.cols;
  st.probs = Matrix(n, k);
  double loss = 0.0;
  int64_t correct = 0;
  for (int64_t i = 0; i < n; ++i) {
    const double* lr = st.logits.row(i);
    double m = lr[0];
    int64_t argmax = 0;
    for (int64_t j = 1; j < k; ++j) {
      if (lr[j] > m) {
        m = lr[j];
        argmax = j;
      }
    }
    double denom = 0.0;
    for (int64_t j = 0; j < k; ++j) denom += std::exp(lr[j] - m);
    double* pr = st.probs.row(i);
    for (int64_t j = 0; j < k; ++j) pr[j] = std::exp(lr[j] - m) / denom;
    loss -= std::log(std::max(pr[batch.labels[size_t(i)]], 1e-300));
    if (argmax == batch.labels[size_t(i)]) ++correct;
  }
  loss /= double(n);
  return {loss, double(correct) / double(n)};
}

}  // namespace

ToyStepStats toy_eval(const ToyBatch& batch, const ToyModel& model, const BlockOptions& opts) {
  return toy_forward(batch, model, opts, nullptr);
}

ToyStepStats toy_train_step(const ToyBatch& batch, ToyModel& model, double learning_rate,
                            const BlockOptions& opts) {
  ToyForwardState st;
  const ToyStepStats stats = toy_forward(batch, model, opts, &st);

  const int64_t n = st.logits.rows;
  Matrix d_logits = st.probs;
  for (int64_t i = 0; i < n; ++i) {
    d_logits(i, batch.labels[size_t(i)]) -= 1.0;
  }
  for (double& v : d_logits.data) v /= double(n);

  Matrix d_w_out = Matrix::zeros(model.w_out.rows, model.w_out.cols);
  std::vector<double> d_b_out(model.b_out.size(), 0.0);
  const Matrix d_fpt2 = linear_backward(st.fpt2, model.w_out, d_logits, &d_w_out, &d_b_out);
  const Matrix d_fpx2 = Matrix::zeros(st.fpx2.rows, st.fpx2.cols);

  BlockIo io;
  io.point_feat = &st.fpt0;
  io.proxy_feat = &st.fpx0;
  io.pos_pt = std::span<const Vec3>(batch.cloud.positions);
  io.pos_px = std::span<const Vec3>(batch.proxies.positions);
  io.occupied = &batch.proxies.occupied;
  io.assoc = &batch.assoc;
  io.cells = &batch.cells;

  BlockGrads bg = zero_block_grads(model.block);
  Matrix d_fpt0, d_fpx0;
  sp2t_block_backward(st.bws, io, model.block, opts, d_fpt2, d_fpx2, bg, &d_fpt0, &d_fpx0);

  MlpGrads mlp_g;
  const Matrix d_fpt0_pi = proxy_init_backward(st.pic, model.proxy_mlp, batch.assoc, d_fpx0,
                                               &mlp_g);
  add_inplace(d_fpt0, d_fpt0_pi);

  Matrix d_w_in = Matrix::zeros(model.w_in.rows, model.w_in.cols);
  std::vector<double> d_b_in(model.b_in.size(), 0.0);
  (void)linear_backward(batch.cloud.features, model.w_in, d_fpt0, &d_w_in, &d_b_in);

  // SGD update
  auto sgd_mat = [learning_rate](Matrix& p, const Matrix& g) {
    for (size_t i = 0; i < p.data.size(); ++i) p.data[i] -= learning_rate * g.data[i];
  };
  auto sgd_vec = [learning_rate](std::vector<double>& p, const std::vector<double>& g) {
    for (size_t i = 0; i < p.size(); ++i) p[i] -= learning_rate * g[i];
  };
  sgd_mat(model.w_in, d_w_in);
  sgd_vec(model.b_in, d_b_in);
  for (size_t l = 0; l < model.proxy_mlp.weights.size(); ++l) {
    sgd_mat(model.proxy_mlp.weights[l], mlp_g.d_weights[l]);
    sgd_vec(model.proxy_mlp.biases[l], mlp_g.d_biases[l]);
  }
  const auto params = collect_params(model.block);
  BlockGrads& g = bg;
  const auto grads = collect_grads(g);
  for (size_t i = 0; i < params.size(); ++i) *params[i] -= learning_rate * *grads[i];
  sgd_mat(model.w_out, d_w_out);
  sgd_vec(model.b_out, d_b_out);

  return stats;
}

}  // namespace sp2t
