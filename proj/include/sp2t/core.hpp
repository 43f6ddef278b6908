#pragma once

// Core domain types shared by every module: dense row-major matrices,
// point cloud / proxy containers, the association list consumed by the
// sparse attention map-reduce, the run configuration, and a deterministic
// cross-platform RNG (splitmix64-seeded xoshiro256++).

#include <array>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace sp2t {

// Thrown for problems caused by user input (bad files, bad flags).
// The CLI maps these to exit code 2; everything else is exit code 1.
struct UserError : std::runtime_error {
  explicit UserError(const std::string& msg) : std::runtime_error(msg) {}
};

// ---------------------------------------------------------------------------
// Vec3
// ---------------------------------------------------------------------------

struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;

  double& operator[](int k) { return k == 0 ? x : (k == 1 ? y : z); }
  double operator[](int k) const { return k == 0 ? x : (k == 1 ? y : z); }

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }

  bool finite() const {
    return std::isfinite(x) && std::isfinite(y) && std::isfinite(z);
  }
};

inline double linf_norm(const Vec3& v) {
  return std::max({std::abs(v.x), std::abs(v.y), std::abs(v.z)});
}

inline double squared_norm(const Vec3& v) {
  return v.x * v.x + v.y * v.y + v.z * v.z;
}

// ---------------------------------------------------------------------------
// Matrix: dense row-major f64
// ---------------------------------------------------------------------------

struct Matrix {
  int64_t rows = 0;
  int64_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(int64_t r, int64_t c) : rows(r), cols(c), data(size_t(r) * size_t(c), 0.0) {
    if (r < 0 || c < 0) throw std::invalid_argument("Matrix: negative shape");
  }

  static Matrix zeros(int64_t r, int64_t c) { return Matrix(r, c); }
  static Matrix identity(int64_t n) {
    Matrix m(n, n);
    for (int64_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  double& operator()(int64_t i, int64_t j) {
    assert(i >= 0 && i < rows && j >= 0 && j < cols);
    return data[size_t(i) * size_t(cols) + size_t(j)];
  }
  double operator()(int64_t i, int64_t j) const {
    assert(i >= 0 && i < rows && j >= 0 && j < cols);
    return data[size_t(i) * size_t(cols) + size_t(j)];
  }

  double* row(int64_t i) { return data.data() + size_t(i) * size_t(cols); }
  const double* row(int64_t i) const { return data.data() + size_t(i) * size_t(cols); }

  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }

  // Construction-boundary finiteness check; active in debug builds only.
  void debug_check_finite(const char* what) const {
#ifndef NDEBUG
    for (double v : data) {
      if (!std::isfinite(v)) throw std::invalid_argument(std::string(what) + ": non-finite entry");
    }
#else
    (void)what;
#endif
  }
};

Matrix matmul(const Matrix& a, const Matrix& b);        // a * b
Matrix matmul_at_b(const Matrix& a, const Matrix& b);   // a^T * b
Matrix matmul_a_bt(const Matrix& a, const Matrix& b);   // a * b^T
void add_inplace(Matrix& a, const Matrix& b);
double max_abs_diff(const Matrix& a, const Matrix& b);

// ---------------------------------------------------------------------------
// Geometry containers
// ---------------------------------------------------------------------------

struct PointCloud {
  std::vector<Vec3> positions;  // N x 3, scene units
  Matrix features;              // N x C

  int64_t size() const { return int64_t(positions.size()); }
  int64_t channels() const { return features.cols; }

  void validate() const;  // throws on shape mismatch / non-finite positions
};

struct Aabb {
  Vec3 min_pt;
  Vec3 max_pt;

  Vec3 extent() const { return max_pt - min_pt; }
  // Degenerate axes (extent 0) are permitted; samplers clamp them.
};

// Regular grid: origin at the AABB min, `shape[k]` cells per axis,
// shape[k] + 1 vertices per axis. Vertex flat index is x-major.
struct GridSpec {
  Vec3 origin;
  Vec3 spacing;                    // positive cell edge lengths
  std::array<int64_t, 3> shape{};  // positive cell counts per axis

  int64_t cell_count() const { return shape[0] * shape[1] * shape[2]; }
  int64_t vertex_count() const { return (shape[0] + 1) * (shape[1] + 1) * (shape[2] + 1); }

  int64_t vertex_index(int64_t ix, int64_t iy, int64_t iz) const {
    return (ix * (shape[1] + 1) + iy) * (shape[2] + 1) + iz;
  }
  Vec3 vertex_position(int64_t ix, int64_t iy, int64_t iz) const {
    return {origin.x + double(ix) * spacing.x,
            origin.y + double(iy) * spacing.y,
            origin.z + double(iz) * spacing.z};
  }

  void validate() const;
};

struct ProxySet {
  std::vector<Vec3> positions;   // M x 3, on grid vertices for grid samplers
  Matrix features;               // M x C
  std::vector<uint8_t> occupied; // per proxy
  std::optional<GridSpec> grid;  // absent for FPS

  int64_t size() const { return int64_t(positions.size()); }
  int64_t occupied_count() const;
};

// ---------------------------------------------------------------------------
// AssociationList: the sparsity pattern of SPA
// ---------------------------------------------------------------------------

// Pairs are stored globally sorted by (pt, px); `order_by_px` is the
// permutation that re-sorts them by (px, pt). Segment offsets index into
// the respective orderings and are what the segmented map-reduce consumes.
struct AssociationList {
  std::vector<int64_t> pt;             // point index per pair
  std::vector<int64_t> px;             // proxy index per pair
  std::vector<int64_t> order_by_pt;    // identity after canonical sort
  std::vector<int64_t> order_by_px;
  std::vector<int64_t> seg_offsets_pt; // size n_pt + 1
  std::vector<int64_t> seg_offsets_px; // size n_px + 1
  int64_t n_pt = 0;
  int64_t n_px = 0;

  int64_t size() const { return int64_t(pt.size()); }
};

// Sorts, deduplicates-checks and builds both segment tables.
// Throws on out-of-range indices or duplicate pairs.
AssociationList make_association_list(std::vector<std::pair<int64_t, int64_t>> pairs,
                                      int64_t n_pt, int64_t n_px);

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

// Defaults follow the indoor profile; channels = heads * head_dim.
struct Config {
  int64_t proxy_count_min = 120;   // target cell-count range for the bisection
  int64_t proxy_count_max = 160;
  double search_min = 0.0;         // spacing search bounds
  double search_max = 1.0;
  int64_t max_iter = 10;
  int64_t heads = 3;
  int64_t head_dim = 16;
  int64_t trb_size = 16;           // T, nodes per table axis
  double trb_scale_pp = 2.5;       // point-proxy bias input scale
  double trb_scale_px = 0.4;       // proxy-proxy bias input scale
  double trb_strength = 1.0;
  double trb_sigma_center = 2.5;   // init stddev at table center
  double trb_sigma_corner = 0.5;   // init stddev at table corner
  double embed_temperature = 10.0; // sinusoidal embedding temperature
  int64_t assoc_dim = 3;           // 3 -> 8 vertices, 2 -> 4 vertices (xy face)
  bool include_empty_proxies = true;
  bool bias_in_logit = false;      // move the bias inside the exponent
  bool literal_eq2 = false;        // normalize over the proxy side regardless of direction
  int64_t proxy_budget = 1000000;  // fix-size sampler vertex-count safety cap
  uint64_t seed = 42;

  int64_t channels() const { return heads * head_dim; }

  // Returns one diagnostic per invalid field; empty means valid.
  std::vector<std::string> validate() const;
  void validate_or_throw() const;

  // Key-value text file: "key = value" lines, '#' comments.
  static Config from_file(const std::string& path);
};

// ---------------------------------------------------------------------------
// Deterministic RNG
// ---------------------------------------------------------------------------

// xoshiro256++ seeded through splitmix64. Fixed algorithm for the repo so
// streams are identical across platforms and standard library versions.
class Rng {
 public:
  explicit Rng(uint64_t seed);

  uint64_t next_u64();
  double uniform();                    // [0, 1), 53-bit
  double uniform(double lo, double hi);
  double normal();                     // N(0,1), Box-Muller with cached spare
  int64_t below(int64_t n);            // unbiased [0, n)

 private:
  std::array<uint64_t, 4> state_{};
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// ---------------------------------------------------------------------------
// Misc
// ---------------------------------------------------------------------------

Aabb compute_aabb(const PointCloud& points);
Aabb compute_aabb(std::span<const Vec3> positions);

// Worker count for the data-parallel loops. Results are bitwise
// independent of this setting (each output element is produced by exactly
// one worker in a fixed serial order).
void set_worker_count(int n);
int worker_count();
void parallel_for(int64_t begin, int64_t end, const std::function<void(int64_t, int64_t)>& body);

}  // namespace sp2t
