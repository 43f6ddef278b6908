#include "sp2t/spa.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace sp2t {

SpaProjection identity_projection(int64_t channels) {
  return {Matrix::identity(channels), Matrix::identity(channels), Matrix::identity(channels),
          Matrix::identity(channels)};
}

SpaProjection random_projection(int64_t channels, double scale, Rng& rng) {
  auto rand_mat = [&](int64_t r, int64_t c) {
    Matrix m(r, c);
    for (double& v : m.data) v = scale * rng.normal();
    return m;
  };
  return {rand_mat(channels, channels), rand_mat(channels, channels),
          rand_mat(channels, channels), rand_mat(channels, channels)};
}

namespace {

// Index arrays and segment tables for one direction. The query side
// drives the aggregation; the normalization side is the query side unless
// literal_eq2 pins it to the proxy side.
struct Sides {
  const std::vector<int64_t>* q_idx;
  const std::vector<int64_t>* k_idx;
  int64_t n_query = 0;
  int64_t n_key = 0;
  const std::vector<int64_t>* q_order;
  const std::vector<int64_t>* q_offsets;
  const std::vector<int64_t>* k_order;
  const std::vector<int64_t>* k_offsets;
  const std::vector<int64_t>* norm_order;
  const std::vector<int64_t>* norm_offsets;
  int64_t n_norm = 0;
};

Sides make_sides(const AssociationList& a, Direction dir, bool literal_eq2) {
  Sides s;
  if (dir == Direction::PointToProxy) {
    s.q_idx = &a.px;
    s.k_idx = &a.pt;
    s.n_query = a.n_px;
    s.n_key = a.n_pt;
    s.q_order = &a.order_by_px;
    s.q_offsets = &a.seg_offsets_px;
    s.k_order = &a.order_by_pt;
    s.k_offsets = &a.seg_offsets_pt;
  } else {
    s.q_idx = &a.pt;
    s.k_idx = &a.px;
    s.n_query = a.n_pt;
    s.n_key = a.n_px;
    s.q_order = &a.order_by_pt;
    s.q_offsets = &a.seg_offsets_pt;
    s.k_order = &a.order_by_px;
    s.k_offsets = &a.seg_offsets_px;
  }
  if (literal_eq2) {
    s.norm_order = &a.order_by_px;
    s.norm_offsets = &a.seg_offsets_px;
    s.n_norm = a.n_px;
  } else {
    s.norm_order = s.q_order;
    s.norm_offsets = s.q_offsets;
    s.n_norm = s.n_query;
  }
  return s;
}

int64_t check_shapes(const Matrix& q, const Matrix& k, const Matrix& v, const Sides& s,
                     int64_t heads) {
  if (q.rows != s.n_query) throw std::invalid_argument("spa: query row count mismatch");
  if (k.rows != s.n_key || v.rows != s.n_key)
    throw std::invalid_argument("spa: key/value row count mismatch");
  if (q.cols != k.cols || q.cols != v.cols)
    throw std::invalid_argument("spa: feature dims differ");
  if (heads < 1 || q.cols % heads != 0)
    throw std::invalid_argument("spa: channels not divisible by heads");
  return q.cols / heads;
}

// Clamped pre-exponential logits; the bias joins the logit only in the
// bias_in_logit variant.
void compute_logits(const Matrix& q, const Matrix& k, const AssociationList& assoc,
                    const Sides& s, int64_t heads, int64_t d, const Matrix* bias,
                    const SpaOptions& opts, Matrix& z, std::vector<uint8_t>& unclamped) {
  const int64_t a_count = assoc.size();
  const double inv_sqrt_d = 1.0 / std::sqrt(double(d));
  z = Matrix(a_count, heads);
  unclamped.assign(size_t(a_count * heads), 1);
  const bool add_bias = opts.bias_in_logit && bias != nullptr;

  parallel_for(0, a_count, [&](int64_t lo, int64_t hi) {
    for (int64_t a = lo; a < hi; ++a) {
      const double* qr = q.row((*s.q_idx)[size_t(a)]);
      const double* kr = k.row((*s.k_idx)[size_t(a)]);
      for (int64_t h = 0; h < heads; ++h) {
        double dot = 0.0;
        const double* qh = qr + h * d;
        const double* kh = kr + h * d;
        for (int64_t j = 0; j < d; ++j) dot += qh[j] * kh[j];
        double logit = dot * inv_sqrt_d;
        if (add_bias) logit += (*bias)(a, h);
        if (logit > opts.logit_clamp) {
          logit = opts.logit_clamp;
          unclamped[size_t(a * heads + h)] = 0;
        } else if (logit < -opts.logit_clamp) {
          logit = -opts.logit_clamp;
          unclamped[size_t(a * heads + h)] = 0;
        }
        z(a, h) = logit;
      }
    }
  });
}

inline double guard_denom(double d, double eps) {
  if (std::abs(d) >= eps) return d;
  return d < 0.0 ? -eps : eps;  // sign-preserving so weight sums stay 1
}

}  // namespace

Matrix spa_similarity(const Matrix& q, const Matrix& k, const AssociationList& assoc,
                      Direction dir, int64_t heads, const TrbTable* trb,
                      std::span<const Vec3> positions_pt, std::span<const Vec3> positions_px,
                      const SpaOptions& opts) {
  const Sides s = make_sides(assoc, dir, opts.literal_eq2);
  if (q.rows != s.n_query || k.rows != s.n_key)
    throw std::invalid_argument("spa_similarity: row count mismatch");
  if (q.cols != k.cols) throw std::invalid_argument("spa_similarity: feature dims differ");
  if (q.cols % heads != 0) throw std::invalid_argument("spa_similarity: channels not divisible by heads");
  const int64_t d = q.cols / heads;

  Matrix bias;
  const Matrix* bias_ptr = nullptr;
  if (trb != nullptr) {
    bias = trb_bias_for_assoc(*trb, assoc, positions_pt, positions_px);
    bias_ptr = &bias;
  }

  Matrix z;
  std::vector<uint8_t> unclamped;
  compute_logits(q, k, assoc, s, heads, d, bias_ptr, opts, z, unclamped);

  Matrix sims(assoc.size(), heads);
  const bool post_exp = bias_ptr != nullptr && !opts.bias_in_logit;
  for (int64_t a = 0; a < assoc.size(); ++a) {
    for (int64_t h = 0; h < heads; ++h) {
      sims(a, h) = std::exp(z(a, h)) + (post_exp ? bias(a, h) : 0.0);
    }
  }
  return sims;
}

Matrix sparse_softmax(const Matrix& sims, const AssociationList& assoc, Direction dir,
                      const SpaOptions& opts) {
  if (sims.rows != assoc.size()) throw std::invalid_argument("sparse_softmax: row count mismatch");
  const Sides s = make_sides(assoc, dir, opts.literal_eq2);
  const int64_t heads = sims.cols;
  Matrix weights(sims.rows, heads);

  parallel_for(0, s.n_norm, [&](int64_t lo, int64_t hi) {
    std::vector<double> denom(static_cast<size_t>(heads));
    for (int64_t seg = lo; seg < hi; ++seg) {
      const int64_t begin = (*s.norm_offsets)[size_t(seg)];
      const int64_t end = (*s.norm_offsets)[size_t(seg) + 1];
      if (begin == end) continue;
      std::fill(denom.begin(), denom.end(), 0.0);
      for (int64_t i = begin; i < end; ++i) {
        const int64_t a = (*s.norm_order)[size_t(i)];
        for (int64_t h = 0; h < heads; ++h) denom[size_t(h)] += sims(a, h);
      }
      for (int64_t i = begin; i < end; ++i) {
        const int64_t a = (*s.norm_order)[size_t(i)];
        for (int64_t h = 0; h < heads; ++h) {
          weights(a, h) = sims(a, h) / guard_denom(denom[size_t(h)], opts.denom_epsilon);
        }
      }
    }
  });
  return weights;
}

namespace {

// Streaming form of the map-reduce: each query segment is computed in one
// small scratch buffer, so no pair-sized intermediate arrays touch memory.
// Usable whenever the normalization runs over the query side and no
// workspace has to be retained; arithmetic and order match the staged path.
Matrix spa_forward_fused(const Matrix& q, const Matrix& k, const Matrix& v, const Sides& s,
                         int64_t heads, int64_t d, const Matrix* bias, const SpaOptions& opts,
                         int64_t* zero_assoc) {
  const double inv_sqrt_d = 1.0 / std::sqrt(double(d));
  const bool in_logit = bias != nullptr && opts.bias_in_logit;
  const bool post_exp = bias != nullptr && !opts.bias_in_logit;

  Matrix heads_out(s.n_query, q.cols);
  parallel_for(0, s.n_query, [&](int64_t lo, int64_t hi) {
    std::vector<double> buf;  // segment length x heads
    for (int64_t qi = lo; qi < hi; ++qi) {
      const int64_t begin = (*s.q_offsets)[size_t(qi)];
      const int64_t end = (*s.q_offsets)[size_t(qi) + 1];
      const int64_t len = end - begin;
      if (len == 0) continue;
      buf.resize(size_t(len * heads));
      const double* qr = q.row(qi);

      for (int64_t i = 0; i < len; ++i) {
        const int64_t a = (*s.q_order)[size_t(begin + i)];
        const double* kr = k.row((*s.k_idx)[size_t(a)]);
        for (int64_t h = 0; h < heads; ++h) {
          double dot = 0.0;
          const double* qh = qr + h * d;
          const double* kh = kr + h * d;
          for (int64_t j = 0; j < d; ++j) dot += qh[j] * kh[j];
          double logit = dot * inv_sqrt_d;
          if (in_logit) logit += (*bias)(a, h);
          buf[size_t(i * heads + h)] = std::clamp(logit, -opts.logit_clamp, opts.logit_clamp);
        }
      }

      for (int64_t h = 0; h < heads; ++h) {
        double denom = 0.0;
        if (post_exp) {
          for (int64_t i = 0; i < len; ++i) {
            const int64_t a = (*s.q_order)[size_t(begin + i)];
            const double sval = std::exp(buf[size_t(i * heads + h)]) + (*bias)(a, h);
            buf[size_t(i * heads + h)] = sval;
            denom += sval;
          }
        } else {
          double seg_max = -std::numeric_limits<double>::infinity();
          for (int64_t i = 0; i < len; ++i) {
            seg_max = std::max(seg_max, buf[size_t(i * heads + h)]);
          }
          for (int64_t i = 0; i < len; ++i) {
            const double sval = std::exp(buf[size_t(i * heads + h)] - seg_max);
            buf[size_t(i * heads + h)] = sval;
            denom += sval;
          }
        }
        const double g = guard_denom(denom, opts.denom_epsilon);
        for (int64_t i = 0; i < len; ++i) buf[size_t(i * heads + h)] /= g;
      }

      double* out_row = heads_out.row(qi);
      for (int64_t i = 0; i < len; ++i) {
        const int64_t a = (*s.q_order)[size_t(begin + i)];
        const double* vr = v.row((*s.k_idx)[size_t(a)]);
        for (int64_t h = 0; h < heads; ++h) {
          const double w = buf[size_t(i * heads + h)];
          double* oh = out_row + h * d;
          const double* vh = vr + h * d;
          for (int64_t j = 0; j < d; ++j) oh[j] += w * vh[j];
        }
      }
    }
  });

  if (zero_assoc != nullptr) {
    int64_t zero_count = 0;
    for (int64_t qi = 0; qi < s.n_query; ++qi) {
      if ((*s.q_offsets)[size_t(qi)] == (*s.q_offsets)[size_t(qi) + 1]) ++zero_count;
    }
    *zero_assoc = zero_count;
  }
  return heads_out;
}

}  // namespace

Matrix spa_forward_core(const Matrix& q, const Matrix& k, const Matrix& v,
                        const AssociationList& assoc, Direction dir, int64_t heads,
                        const Matrix* bias, const SpaOptions& opts, SpaWorkspace* save,
                        int64_t* zero_assoc) {
  const Sides s = make_sides(assoc, dir, opts.literal_eq2);
  const int64_t d = check_shapes(q, k, v, s, heads);
  if (bias != nullptr && (bias->rows != assoc.size() || bias->cols != heads))
    throw std::invalid_argument("spa: bias shape mismatch");

  if (save == nullptr && s.norm_offsets == s.q_offsets) {
    return spa_forward_fused(q, k, v, s, heads, d, bias, opts, zero_assoc);
  }

  Matrix z;
  std::vector<uint8_t> unclamped;
  compute_logits(q, k, assoc, s, heads, d, bias, opts, z, unclamped);

  const bool post_exp = bias != nullptr && !opts.bias_in_logit;
  const int64_t a_count = assoc.size();
  Matrix sims(a_count, heads);
  Matrix exp_part;
  if (post_exp) exp_part = Matrix(a_count, heads);
  Matrix weights(a_count, heads);
  Matrix denom_raw(s.n_norm, heads);
  Matrix denom_guarded(s.n_norm, heads);

  // Normalization: two passes per segment (sum, then divide), serial
  // within a segment so results do not depend on the worker count.
  parallel_for(0, s.n_norm, [&](int64_t lo, int64_t hi) {
    for (int64_t seg = lo; seg < hi; ++seg) {
      const int64_t begin = (*s.norm_offsets)[size_t(seg)];
      const int64_t end = (*s.norm_offsets)[size_t(seg) + 1];
      if (begin == end) continue;
      for (int64_t h = 0; h < heads; ++h) {
        double denom = 0.0;
        if (post_exp) {
          for (int64_t i = begin; i < end; ++i) {
            const int64_t a = (*s.norm_order)[size_t(i)];
            const double e = std::exp(z(a, h));
            exp_part(a, h) = e;
            sims(a, h) = e + (*bias)(a, h);
            denom += sims(a, h);
          }
        } else {
          double seg_max = -std::numeric_limits<double>::infinity();
          for (int64_t i = begin; i < end; ++i) {
            seg_max = std::max(seg_max, z((*s.norm_order)[size_t(i)], h));
          }
          for (int64_t i = begin; i < end; ++i) {
            const int64_t a = (*s.norm_order)[size_t(i)];
            sims(a, h) = std::exp(z(a, h) - seg_max);
            denom += sims(a, h);
          }
        }
        denom_raw(seg, h) = denom;
        const double g = guard_denom(denom, opts.denom_epsilon);
        denom_guarded(seg, h) = g;
        for (int64_t i = begin; i < end; ++i) {
          const int64_t a = (*s.norm_order)[size_t(i)];
          weights(a, h) = sims(a, h) / g;
        }
      }
    }
  });

  // Aggregation over query segments: each output row sums weight * value
  // over its own pairs.
  Matrix heads_out(s.n_query, q.cols);
  int64_t zero_count = 0;
  parallel_for(0, s.n_query, [&](int64_t lo, int64_t hi) {
    for (int64_t qi = lo; qi < hi; ++qi) {
      const int64_t begin = (*s.q_offsets)[size_t(qi)];
      const int64_t end = (*s.q_offsets)[size_t(qi) + 1];
      if (begin == end) continue;  // row stays zero
      double* out_row = heads_out.row(qi);
      for (int64_t i = begin; i < end; ++i) {
        const int64_t a = (*s.q_order)[size_t(i)];
        const double* vr = v.row((*s.k_idx)[size_t(a)]);
        for (int64_t h = 0; h < heads; ++h) {
          const double w = weights(a, h);
          double* oh = out_row + h * d;
          const double* vh = vr + h * d;
          for (int64_t j = 0; j < d; ++j) oh[j] += w * vh[j];
        }
      }
    }
  });
  for (int64_t qi = 0; qi < s.n_query; ++qi) {
    if ((*s.q_offsets)[size_t(qi)] == (*s.q_offsets)[size_t(qi) + 1]) ++zero_count;
  }
  if (zero_assoc != nullptr) *zero_assoc = zero_count;

  if (save != nullptr) {
    save->dir = dir;
    save->opts = opts;
    save->heads = heads;
    save->head_dim = d;
    save->has_bias = bias != nullptr;
    save->assoc = &assoc;
    save->q = q;
    save->k = k;
    save->v = v;
    save->exp_part = std::move(exp_part);
    save->sims = std::move(sims);
    save->weights = std::move(weights);
    save->denom_raw = std::move(denom_raw);
    save->denom_guarded = std::move(denom_guarded);
    save->unclamped = std::move(unclamped);
    save->heads_out = heads_out;
    save->zero_assoc_queries = zero_count;
  }
  return heads_out;
}

SpaResult spa_forward(const Matrix& query_feat, const Matrix& key_feat,
                      const AssociationList& assoc, Direction dir, const SpaProjection& proj,
                      int64_t heads, const TrbTable* trb,
                      std::span<const Vec3> positions_pt, std::span<const Vec3> positions_px,
                      const SpaOptions& opts, SpaWorkspace* save, const Matrix* shared_bias) {
  const Matrix q = matmul(query_feat, proj.wq);
  const Matrix k = matmul(key_feat, proj.wk);
  const Matrix v = matmul(key_feat, proj.wv);

  Matrix own_bias;
  const Matrix* bias = shared_bias;
  if (bias == nullptr && trb != nullptr) {
    own_bias = trb_bias_for_assoc(*trb, assoc, positions_pt, positions_px);
    bias = &own_bias;
  }

  int64_t zero_count = 0;
  const Matrix heads_out = spa_forward_core(q, k, v, assoc, dir, heads, bias, opts, save, &zero_count);
  return {matmul(heads_out, proj.wo), zero_count};
}

Matrix dense_oracle_core(const Matrix& q, const Matrix& k, const Matrix& v,
                         const AssociationList& assoc, Direction dir, int64_t heads,
                         const Matrix* bias, const SpaOptions& opts, int64_t max_entries) {
  const Sides s = make_sides(assoc, dir, opts.literal_eq2);
  const int64_t d = check_shapes(q, k, v, s, heads);
  if (s.n_query * s.n_key > max_entries) throw std::runtime_error("size cap exceeded");
  const bool post_exp = bias != nullptr && !opts.bias_in_logit;
  const bool norm_over_query = !opts.literal_eq2 || dir == Direction::PointToProxy;
  const double inv_sqrt_d = 1.0 / std::sqrt(double(d));

  // association mask, shared across heads
  std::vector<uint8_t> associated(size_t(s.n_query * s.n_key), 0);
  for (int64_t a = 0; a < assoc.size(); ++a) {
    associated[size_t((*s.q_idx)[size_t(a)] * s.n_key + (*s.k_idx)[size_t(a)])] = 1;
  }

  Matrix heads_out(s.n_query, q.cols);
  for (int64_t h = 0; h < heads; ++h) {
    // the full query x key exponential similarity matrix
    Matrix sim(s.n_query, s.n_key);
    for (int64_t i = 0; i < s.n_query; ++i) {
      const double* qh = q.row(i) + h * d;
      double* sr = sim.row(i);
      for (int64_t j = 0; j < s.n_key; ++j) {
        const double* kh = k.row(j) + h * d;
        double dot = 0.0;
        for (int64_t c = 0; c < d; ++c) dot += qh[c] * kh[c];
        sr[j] = std::exp(std::clamp(dot * inv_sqrt_d, -opts.logit_clamp, opts.logit_clamp));
      }
    }
    // non-associated entries drop to zero after the exponentiation
    for (int64_t i = 0; i < s.n_query; ++i) {
      double* sr = sim.row(i);
      const uint8_t* mask = associated.data() + size_t(i * s.n_key);
      for (int64_t j = 0; j < s.n_key; ++j) {
        if (!mask[j]) sr[j] = 0.0;
      }
    }
    // the bias applies only where associated
    if (bias != nullptr) {
      for (int64_t a = 0; a < assoc.size(); ++a) {
        const int64_t qi = (*s.q_idx)[size_t(a)];
        const int64_t ki = (*s.k_idx)[size_t(a)];
        if (opts.bias_in_logit) {
          const double* qh = q.row(qi) + h * d;
          const double* kh = k.row(ki) + h * d;
          double dot = 0.0;
          for (int64_t c = 0; c < d; ++c) dot += qh[c] * kh[c];
          sim(qi, ki) = std::exp(std::clamp(dot * inv_sqrt_d + (*bias)(a, h),
                                            -opts.logit_clamp, opts.logit_clamp));
        } else {
          sim(qi, ki) += (*bias)(a, h);
        }
      }
    }
    (void)post_exp;

    if (norm_over_query) {
      for (int64_t i = 0; i < s.n_query; ++i) {
        double denom = 0.0;
        for (int64_t j = 0; j < s.n_key; ++j) denom += sim(i, j);
        const double g = guard_denom(denom, opts.denom_epsilon);
        for (int64_t j = 0; j < s.n_key; ++j) sim(i, j) /= g;
      }
    } else {
      for (int64_t j = 0; j < s.n_key; ++j) {
        double denom = 0.0;
        for (int64_t i = 0; i < s.n_query; ++i) denom += sim(i, j);
        const double g = guard_denom(denom, opts.denom_epsilon);
        for (int64_t i = 0; i < s.n_query; ++i) sim(i, j) /= g;
      }
    }

    // full weight-by-value product; rows with no association stay zero
    // because their whole weight row is zero
    for (int64_t i = 0; i < s.n_query; ++i) {
      double* oh = heads_out.row(i) + h * d;
      const double* sr = sim.row(i);
      for (int64_t j = 0; j < s.n_key; ++j) {
        const double w = sr[j];
        const double* vh = v.row(j) + h * d;
        for (int64_t c = 0; c < d; ++c) oh[c] += w * vh[c];
      }
    }
  }
  return heads_out;
}

SpaResult dense_oracle(const Matrix& query_feat, const Matrix& key_feat,
                       const AssociationList& assoc, Direction dir, const SpaProjection& proj,
                       int64_t heads, const TrbTable* trb,
                       std::span<const Vec3> positions_pt, std::span<const Vec3> positions_px,
                       const SpaOptions& opts, int64_t max_entries) {
  const Matrix q = matmul(query_feat, proj.wq);
  const Matrix k = matmul(key_feat, proj.wk);
  const Matrix v = matmul(key_feat, proj.wv);

  Matrix bias;
  const Matrix* bias_ptr = nullptr;
  if (trb != nullptr) {
    bias = trb_bias_for_assoc(*trb, assoc, positions_pt, positions_px);
    bias_ptr = &bias;
  }

  const Matrix heads_out =
      dense_oracle_core(q, k, v, assoc, dir, heads, bias_ptr, opts, max_entries);
  const Sides s = make_sides(assoc, dir, opts.literal_eq2);
  int64_t zero_count = 0;
  for (int64_t qi = 0; qi < s.n_query; ++qi) {
    if ((*s.q_offsets)[size_t(qi)] == (*s.q_offsets)[size_t(qi) + 1]) ++zero_count;
  }
  return {matmul(heads_out, proj.wo), zero_count};
}

SpaGrads spa_backward(const SpaWorkspace& ws, const Matrix& query_feat, const Matrix& key_feat,
                      const SpaProjection& proj, const Matrix& upstream) {
  const AssociationList& assoc = *ws.assoc;
  const Sides s = make_sides(assoc, ws.dir, ws.opts.literal_eq2);
  const int64_t heads = ws.heads;
  const int64_t d = ws.head_dim;
  const int64_t a_count = assoc.size();
  const double inv_sqrt_d = 1.0 / std::sqrt(double(d));
  const bool post_exp = ws.has_bias && !ws.opts.bias_in_logit;

  SpaGrads g;
  g.d_wo = matmul_at_b(ws.heads_out, upstream);
  const Matrix d_heads_out = matmul_a_bt(upstream, proj.wo);

  // dW per pair; dv scattered over key-side segments so each value row is
  // written by exactly one worker.
  Matrix d_weights(a_count, heads);
  parallel_for(0, a_count, [&](int64_t lo, int64_t hi) {
    for (int64_t a = lo; a < hi; ++a) {
      const double* dor = d_heads_out.row((*s.q_idx)[size_t(a)]);
      const double* vr = ws.v.row((*s.k_idx)[size_t(a)]);
      for (int64_t h = 0; h < heads; ++h) {
        double acc = 0.0;
        const double* doh = dor + h * d;
        const double* vh = vr + h * d;
        for (int64_t j = 0; j < d; ++j) acc += doh[j] * vh[j];
        d_weights(a, h) = acc;
      }
    }
  });

  Matrix d_v(ws.v.rows, ws.v.cols);
  parallel_for(0, s.n_key, [&](int64_t lo, int64_t hi) {
    for (int64_t ki = lo; ki < hi; ++ki) {
      const int64_t begin = (*s.k_offsets)[size_t(ki)];
      const int64_t end = (*s.k_offsets)[size_t(ki) + 1];
      double* dvr = d_v.row(ki);
      for (int64_t i = begin; i < end; ++i) {
        const int64_t a = (*s.k_order)[size_t(i)];
        const double* dor = d_heads_out.row((*s.q_idx)[size_t(a)]);
        for (int64_t h = 0; h < heads; ++h) {
          const double w = ws.weights(a, h);
          double* dvh = dvr + h * d;
          const double* doh = dor + h * d;
          for (int64_t j = 0; j < d; ++j) dvh[j] += w * doh[j];
        }
      }
    }
  });

  // Through the guarded division, per normalization segment.
  Matrix d_sims(a_count, heads);
  parallel_for(0, s.n_norm, [&](int64_t lo, int64_t hi) {
    for (int64_t seg = lo; seg < hi; ++seg) {
      const int64_t begin = (*s.norm_offsets)[size_t(seg)];
      const int64_t end = (*s.norm_offsets)[size_t(seg) + 1];
      if (begin == end) continue;
      for (int64_t h = 0; h < heads; ++h) {
        const double denom = ws.denom_guarded(seg, h);
        const bool guarded = ws.denom_guarded(seg, h) != ws.denom_raw(seg, h);
        if (guarded) {
          // flat region of the guard: the denominator is a constant
          for (int64_t i = begin; i < end; ++i) {
            const int64_t a = (*s.norm_order)[size_t(i)];
            d_sims(a, h) = d_weights(a, h) / denom;
          }
        } else {
          double dot = 0.0;
          for (int64_t i = begin; i < end; ++i) {
            const int64_t a = (*s.norm_order)[size_t(i)];
            dot += d_weights(a, h) * ws.weights(a, h);
          }
          for (int64_t i = begin; i < end; ++i) {
            const int64_t a = (*s.norm_order)[size_t(i)];
            d_sims(a, h) = (d_weights(a, h) - dot) / denom;
          }
        }
      }
    }
  });

  // Back to logits (and bias). The shift in the stabilized path drops out
  // of the softmax derivative, so sims already carry the needed values.
  Matrix d_logits(a_count, heads);
  if (ws.has_bias) g.d_bias = Matrix(a_count, heads);
  parallel_for(0, a_count, [&](int64_t lo, int64_t hi) {
    for (int64_t a = lo; a < hi; ++a) {
      for (int64_t h = 0; h < heads; ++h) {
        const double ds = d_sims(a, h);
        const double mask = ws.unclamped[size_t(a * heads + h)] ? 1.0 : 0.0;
        if (post_exp) {
          d_logits(a, h) = ds * ws.exp_part(a, h) * mask;
          g.d_bias(a, h) = ds;
        } else {
          const double dz = ds * ws.sims(a, h);
          d_logits(a, h) = dz * mask;
          if (ws.has_bias) g.d_bias(a, h) = dz * mask;
        }
      }
    }
  });

  // dq over query segments, dk over key segments.
  Matrix d_q(ws.q.rows, ws.q.cols);
  parallel_for(0, s.n_query, [&](int64_t lo, int64_t hi) {
    for (int64_t qi = lo; qi < hi; ++qi) {
      const int64_t begin = (*s.q_offsets)[size_t(qi)];
      const int64_t end = (*s.q_offsets)[size_t(qi) + 1];
      double* dqr = d_q.row(qi);
      for (int64_t i = begin; i < end; ++i) {
        const int64_t a = (*s.q_order)[size_t(i)];
        const double* kr = ws.k.row((*s.k_idx)[size_t(a)]);
        for (int64_t h = 0; h < heads; ++h) {
          const double dl = d_logits(a, h) * inv_sqrt_d;
          double* dqh = dqr + h * d;
          const double* kh = kr + h * d;
          for (int64_t j = 0; j < d; ++j) dqh[j] += dl * kh[j];
        }
      }
    }
  });

  Matrix d_k(ws.k.rows, ws.k.cols);
  parallel_for(0, s.n_key, [&](int64_t lo, int64_t hi) {
    for (int64_t ki = lo; ki < hi; ++ki) {
      const int64_t begin = (*s.k_offsets)[size_t(ki)];
      const int64_t end = (*s.k_offsets)[size_t(ki) + 1];
      double* dkr = d_k.row(ki);
      for (int64_t i = begin; i < end; ++i) {
        const int64_t a = (*s.k_order)[size_t(i)];
        const double* qr = ws.q.row((*s.q_idx)[size_t(a)]);
        for (int64_t h = 0; h < heads; ++h) {
          const double dl = d_logits(a, h) * inv_sqrt_d;
          double* dkh = dkr + h * d;
          const double* qh = qr + h * d;
          for (int64_t j = 0; j < d; ++j) dkh[j] += dl * qh[j];
        }
      }
    }
  });

  g.d_wq = matmul_at_b(query_feat, d_q);
  g.d_wk = matmul_at_b(key_feat, d_k);
  g.d_wv = matmul_at_b(key_feat, d_v);
  g.d_query_feat = matmul_a_bt(d_q, proj.wq);
  g.d_key_feat = matmul_a_bt(d_k, proj.wk);
  add_inplace(g.d_key_feat, matmul_a_bt(d_v, proj.wv));
  return g;
}

FlopCount spa_flop_count(int64_t n, int64_t m, int64_t k, int64_t d, int64_t h,
                         bool include_global_fusion) {
  if (n < 1 || m < 1 || k < 1 || d < 1 || h < 1)
    throw std::invalid_argument("spa_flop_count: arguments must be positive");
  const double c1 = 4.0;  // 2d for the similarity dot, 2d for the value MAC
  double sparse = c1 * double(k) * double(n) * double(d) * double(h);
  if (include_global_fusion) sparse += c1 * double(m) * double(m) * double(d) * double(h);
  const double dense = c1 * double(n) * double(m) * double(d) * double(h);
  return {sparse, dense};
}

}  // namespace sp2t
