#pragma once

// Sparse proxy attention: exponential similarity per association pair,
// segmented map-reduce softmax over the query side, weighted value
// aggregation. A dense masked-attention oracle and a hand-written
// backward pass accompany the kernel.
//
// The default similarity adds the relative bias after the exponential;
// `bias_in_logit` moves it inside the exponent. The default softmax
// normalizes over each query's partners; `literal_eq2` instead normalizes
// over pairs sharing a proxy regardless of direction.

#include "sp2t/core.hpp"
#include "sp2t/trb.hpp"

namespace sp2t {

enum class Direction {
  PointToProxy,  // proxies query the points (aggregation into proxies)
  ProxyToPoint,  // points query the proxies (feedback to points)
};

struct SpaOptions {
  bool bias_in_logit = false;
  bool literal_eq2 = false;
  double logit_clamp = 40.0;    // f64 exp overflows near 709; 40 leaves reduce headroom
  double denom_epsilon = 1e-12;

  static SpaOptions from_config(const Config& cfg) {
    SpaOptions o;
    o.bias_in_logit = cfg.bias_in_logit;
    o.literal_eq2 = cfg.literal_eq2;
    return o;
  }
};

// The four caller-owned linear layers around the kernel.
struct SpaProjection {
  Matrix wq, wk, wv, wo;  // each channels x channels
};
SpaProjection identity_projection(int64_t channels);
SpaProjection random_projection(int64_t channels, double scale, Rng& rng);

// Forward state retained for the backward pass. `sims` holds the values
// the normalization divides: shift-stabilized exponentials when the bias
// sits inside the exponent (or is absent), literal exp-plus-bias rows
// otherwise.
struct SpaWorkspace {
  Direction dir = Direction::PointToProxy;
  SpaOptions opts;
  int64_t heads = 0;
  int64_t head_dim = 0;
  bool has_bias = false;
  const AssociationList* assoc = nullptr;

  Matrix q, k, v;                    // projected, per-head column blocks
  Matrix exp_part;                   // A x H, exp(clamped logit); post-exp path only
  Matrix sims;                       // A x H
  Matrix weights;                    // A x H
  Matrix denom_raw;                  // norm-side rows x H, unguarded sums
  Matrix denom_guarded;              // norm-side rows x H
  std::vector<uint8_t> unclamped;    // A x H, 1 where the logit clamp is inactive
  Matrix heads_out;                  // Q x C, pre output-projection
  int64_t zero_assoc_queries = 0;
};

struct SpaResult {
  Matrix out;                   // query-side rows x channels
  int64_t zero_assoc_queries;   // queries whose output row is defined-zero
};

// Literal per-pair similarity (exponential, plus bias per the options).
// q and k are already projected (rows x heads*head_dim).
Matrix spa_similarity(const Matrix& q, const Matrix& k, const AssociationList& assoc,
                      Direction dir, int64_t heads, const TrbTable* trb,
                      std::span<const Vec3> positions_pt, std::span<const Vec3> positions_px,
                      const SpaOptions& opts = {});

// Segmented-reduce softmax over the normalization side. The epsilon guard
// preserves the denominator's sign so weight sums stay 1 whenever the
// unguarded denominator is nonzero.
Matrix sparse_softmax(const Matrix& sims, const AssociationList& assoc, Direction dir,
                      const SpaOptions& opts = {});

// Kernel on pre-projected q, k, v; `bias` (A x heads) may be a shared
// precomputed relative-bias matrix or null. Returns the concatenated
// per-head output without the output projection.
Matrix spa_forward_core(const Matrix& q, const Matrix& k, const Matrix& v,
                        const AssociationList& assoc, Direction dir, int64_t heads,
                        const Matrix* bias, const SpaOptions& opts,
                        SpaWorkspace* save = nullptr, int64_t* zero_assoc = nullptr);

// Full module: q/k/v projections, kernel, output projection. When `trb`
// is given the bias is looked up per pair (displacement = point minus
// proxy position); callers sharing one bias across directions pass
// `shared_bias` instead.
SpaResult spa_forward(const Matrix& query_feat, const Matrix& key_feat,
                      const AssociationList& assoc, Direction dir, const SpaProjection& proj,
                      int64_t heads, const TrbTable* trb,
                      std::span<const Vec3> positions_pt, std::span<const Vec3> positions_px,
                      const SpaOptions& opts = {}, SpaWorkspace* save = nullptr,
                      const Matrix* shared_bias = nullptr);

// Definitional reference: full query x key similarity matrix with
// non-associated entries zeroed after exponentiation, bias applied where
// associated, normalized, multiplied by values.
SpaResult dense_oracle(const Matrix& query_feat, const Matrix& key_feat,
                       const AssociationList& assoc, Direction dir, const SpaProjection& proj,
                       int64_t heads, const TrbTable* trb,
                       std::span<const Vec3> positions_pt, std::span<const Vec3> positions_px,
                       const SpaOptions& opts = {}, int64_t max_entries = 1000000);

// Dense comparator on pre-projected inputs, for the scaling benchmark.
Matrix dense_oracle_core(const Matrix& q, const Matrix& k, const Matrix& v,
                         const AssociationList& assoc, Direction dir, int64_t heads,
                         const Matrix* bias, const SpaOptions& opts,
                         int64_t max_entries = 1000000);

struct SpaGrads {
  Matrix d_query_feat;
  Matrix d_key_feat;
  Matrix d_wq, d_wk, d_wv, d_wo;
  Matrix d_bias;  // A x heads; filled only when the forward used a bias
};

// Exact reverse-mode gradients of spa_forward, including through the
// post-exponential bias and the guarded division.
SpaGrads spa_backward(const SpaWorkspace& ws, const Matrix& query_feat, const Matrix& key_feat,
                      const SpaProjection& proj, const Matrix& upstream);

// Analytic flop counts for the stated complexity: per pair per head the
// similarity dot product costs 2d and the value accumulation another 2d,
// so sparse = 4*k*n*d*h (+ 4*m^2*d*h with global fusion) versus
// dense = 4*n*m*d*h.
struct FlopCount {
  double sparse_flops;
  double dense_flops;
};
FlopCount spa_flop_count(int64_t n, int64_t m, int64_t k, int64_t d, int64_t h,
                         bool include_global_fusion = false);

}  // namespace sp2t
