#pragma once

// One dual-stream block: local fusion stub on the point stream, sparse
// attention into the proxies, dense global fusion over proxies, sparse
// attention back to the points. Pre-norm residual wiring throughout, with
// a hand-written backward for every operation, plus proxy initialization
// and a toy trainable head.

#include "sp2t/association.hpp"
#include "sp2t/core.hpp"
#include "sp2t/spa.hpp"
#include "sp2t/trb.hpp"

namespace sp2t {

// ---------------------------------------------------------------------------
// Elementary layers
// ---------------------------------------------------------------------------

struct LayerNormParams {
  std::vector<double> gamma, beta;  // size C
};

struct FeedForwardParams {
  Matrix w1;                // C x 4C
  std::vector<double> b1;
  Matrix w2;                // 4C x C
  std::vector<double> b2;
};

// Plain MLP, GELU between layers, none after the last. A single identity
// layer gives an exact pass-through.
struct MlpParams {
  std::vector<Matrix> weights;
  std::vector<std::vector<double>> biases;
};

double gelu(double x);
double gelu_grad(double x);

// Point grouping by grid cell, consumed by the local fusion stub.
struct CellGroups {
  std::vector<int64_t> cell_of_point;  // flat cell index per point
  std::vector<int64_t> order;          // point ids grouped by cell
  std::vector<int64_t> offsets;        // group boundaries, size n_groups+1
  int64_t n_groups = 0;
};
CellGroups build_cell_groups(std::span<const Vec3> positions, const GridSpec& grid);

// ---------------------------------------------------------------------------
// Block parameters
// ---------------------------------------------------------------------------

struct BlockParams {
  int64_t heads = 1;
  int64_t head_dim = 1;

  Matrix local_weight;  // C x C
  std::vector<double> local_bias;
  LayerNormParams ln_local;

  LayerNormParams ln_p2px_q, ln_p2px_kv;
  SpaProjection spa_p2px;

  LayerNormParams ln_global, ln_ffn;
  SpaProjection global_attn;
  FeedForwardParams ffn;

  LayerNormParams ln_px2p_q, ln_px2p_kv;
  SpaProjection spa_px2p;

  TrbTable trb_pp;  // point-proxy bias, shared by both interaction directions
  TrbTable trb_px;  // proxy-proxy bias for global fusion

  int64_t channels() const { return heads * head_dim; }
};

BlockParams random_block_params(int64_t heads, int64_t head_dim, int64_t trb_size,
                                double trb_scale_pp, double trb_scale_px,
                                const TrbInitSchedule& trb_schedule, double weight_scale,
                                Rng& rng);

// Zeroes every perturbation branch (output projections, FFN second layer,
// local linear, both bias tables) so the block reproduces its inputs.
void zero_perturbation_branches(BlockParams& params);

struct LayerNormGrads {
  std::vector<double> d_gamma, d_beta;
};
struct SpaProjGrads {
  Matrix d_wq, d_wk, d_wv, d_wo;
};

struct BlockGrads {
  Matrix d_local_weight;
  std::vector<double> d_local_bias;
  LayerNormGrads d_ln_local, d_ln_p2px_q, d_ln_p2px_kv, d_ln_global, d_ln_ffn, d_ln_px2p_q,
      d_ln_px2p_kv;
  SpaProjGrads d_spa_p2px, d_global_attn, d_spa_px2p;
  Matrix d_ffn_w1;
  std::vector<double> d_ffn_b1;
  Matrix d_ffn_w2;
  std::vector<double> d_ffn_b2;
  std::vector<double> d_trb_pp, d_trb_px;
};
BlockGrads zero_block_grads(const BlockParams& params);

// Flat parameter/gradient views in one fixed shared order, for the
// finite-difference harness and the SGD update.
std::vector<double*> collect_params(BlockParams& params);
std::vector<double*> collect_grads(BlockGrads& grads);

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

// Interleaved sin/cos per axis over a geometric frequency ladder with
// base `temperature`. Requires channels divisible by 6.
Matrix sinusoidal_embed(std::span<const Vec3> positions, int64_t channels, double temperature);

struct MlpGrads {
  std::vector<Matrix> d_weights;
  std::vector<std::vector<double>> d_biases;
};

struct ProxyInitCtx {
  Matrix mean_feat;
  std::vector<int64_t> counts;
  std::vector<Matrix> layer_in;   // input to each MLP layer
  std::vector<Matrix> layer_pre;  // pre-activation per layer
};

// Occupied proxies: MLP(mean of associated point features) plus the
// sinusoidal positional term; empty proxies carry the positional term
// with an exactly-zero aggregated part.
Matrix proxy_init_features(const Matrix& point_feat, const ProxySet& proxies,
                           const AssociationList& assoc, const MlpParams& mlp,
                           double embed_temperature, ProxyInitCtx* save = nullptr);
ProxySet proxy_init(const PointCloud& points, const ProxySet& proxies,
                    const AssociationList& assoc, const MlpParams& mlp,
                    double embed_temperature);
Matrix proxy_init_backward(const ProxyInitCtx& ctx, const MlpParams& mlp,
                           const AssociationList& assoc, const Matrix& upstream,
                           MlpGrads* grads);

// Local fusion stub: per-point linear map averaged over the point's
// grid-cell co-residents. Any conforming callable can replace it in
// forward-only pipelines.
using LocalFusionFn = std::function<Matrix(const Matrix&, const CellGroups&)>;

struct LocalFusionCtx {
  Matrix lin;  // x * W + b before the cell mean
};
Matrix local_fusion_stub(const Matrix& point_feat, const CellGroups& cells,
                         const Matrix& weight, const std::vector<double>& bias,
                         LocalFusionCtx* save = nullptr);
Matrix local_fusion_stub_backward(const LocalFusionCtx& ctx, const CellGroups& cells,
                                  const Matrix& point_feat, const Matrix& weight,
                                  const Matrix& upstream, Matrix* d_weight,
                                  std::vector<double>* d_bias);

// ---------------------------------------------------------------------------
// Block forward/backward
// ---------------------------------------------------------------------------

struct BlockOptions {
  SpaOptions spa;
  bool include_empty_proxies = true;
  bool share_trb = true;  // one point-proxy bias evaluation reused by both directions

  static BlockOptions from_config(const Config& cfg) {
    BlockOptions o;
    o.spa = SpaOptions::from_config(cfg);
    o.include_empty_proxies = cfg.include_empty_proxies;
    return o;
  }
};

struct LayerNormCtx {
  Matrix xhat;
  std::vector<double> inv_std;
};

struct FfnCtx {
  Matrix x, pre, act;
};

struct GlobalFusionCtx {
  std::vector<int64_t> active;
  std::vector<Vec3> pos_act;
  AssociationList full_assoc;
  Matrix x_act;
  LayerNormCtx ln_attn;
  Matrix xn;
  SpaWorkspace attn_ws;
  Matrix x2;
  LayerNormCtx ln_ffn;
  Matrix x2n;
  FfnCtx ffn;
};

// Dense self-attention with relative bias over the participating proxies
// (all of them, or the occupied ones only), then a feed-forward,
// each pre-normed with a residual. Excluded proxies pass through.
Matrix global_fusion(const Matrix& proxy_feat, std::span<const Vec3> positions,
                     const std::vector<uint8_t>& occupied, const BlockParams& params,
                     const BlockOptions& opts, GlobalFusionCtx* save = nullptr);
Matrix global_fusion_backward(const GlobalFusionCtx& ctx, const BlockParams& params,
                              const BlockOptions& opts, const Matrix& upstream,
                              BlockGrads& grads);

struct BlockWorkspace {
  LayerNormCtx ln_local;
  Matrix t;  // normalized point features entering local fusion
  LocalFusionCtx lf;
  Matrix fpt1;

  LayerNormCtx ln_p2px_q, ln_p2px_kv;
  Matrix qn1, kn1;
  Matrix bias_pp;  // shared point-proxy bias rows (share_trb on)
  bool shared_bias = false;
  SpaWorkspace spa1;
  Matrix fpx1;

  GlobalFusionCtx gf;
  Matrix fpx2;

  LayerNormCtx ln_px2p_q, ln_px2p_kv;
  Matrix qn2, kn2;
  SpaWorkspace spa2;
  Matrix fpt2;
};

struct BlockIo {
  const Matrix* point_feat = nullptr;
  const Matrix* proxy_feat = nullptr;
  std::span<const Vec3> pos_pt;
  std::span<const Vec3> pos_px;
  const std::vector<uint8_t>* occupied = nullptr;
  const AssociationList* assoc = nullptr;
  const CellGroups* cells = nullptr;
};

// Per-operator wall times of one forward call, for the latency harness.
struct BlockTimings {
  double local_fusion_ms = 0.0;
  double trb_bias_ms = 0.0;
  double spa_p2px_ms = 0.0;
  double global_fusion_ms = 0.0;
  double spa_px2p_ms = 0.0;
};

// Returns (updated point features, updated proxy features).
std::pair<Matrix, Matrix> sp2t_block_forward(const BlockIo& io, const BlockParams& params,
                                             const BlockOptions& opts,
                                             BlockWorkspace* save = nullptr,
                                             const LocalFusionFn* local_override = nullptr,
                                             BlockTimings* timings = nullptr);

// Fills `grads` and returns gradients w.r.t. the two input feature
// streams through d_point_in / d_proxy_in.
void sp2t_block_backward(const BlockWorkspace& ws, const BlockIo& io, const BlockParams& params,
                         const BlockOptions& opts, const Matrix& d_point_out,
                         const Matrix& d_proxy_out, BlockGrads& grads, Matrix* d_point_in,
                         Matrix* d_proxy_in);

// ---------------------------------------------------------------------------
// Toy trainable head
// ---------------------------------------------------------------------------

struct ToyModel {
  Matrix w_in;
  std::vector<double> b_in;
  MlpParams proxy_mlp;
  BlockParams block;
  Matrix w_out;
  std::vector<double> b_out;
  double embed_temperature = 10.0;
};

struct ToyBatch {
  PointCloud cloud;  // raw features
  std::vector<int> labels;
  ProxySet proxies;
  AssociationList assoc;
  CellGroups cells;
};

ToyModel make_toy_model(int64_t raw_dim, int64_t n_classes, const Config& cfg, Rng& rng);
ToyBatch make_toy_batch(PointCloud cloud, std::vector<int> labels, const Config& cfg);

// Checkpoint: a text shape manifest followed by the flat f64 payload
// (little-endian). Loading validates every tensor shape against the
// config and reports the offending dimensions.
void save_toy_model(const ToyModel& model, std::ostream& out);
ToyModel load_toy_model(std::istream& in, const Config& cfg);

struct ToyStepStats {
  double loss;
  double accuracy;
};

// Softmax cross-entropy over per-point class logits; manual backward
// through every op; plain gradient-descent update.
ToyStepStats toy_train_step(const ToyBatch& batch, ToyModel& model, double learning_rate,
                            const BlockOptions& opts);
ToyStepStats toy_eval(const ToyBatch& batch, const ToyModel& model, const BlockOptions& opts);

}  // namespace sp2t
