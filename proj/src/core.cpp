#include "sp2t/core.hpp"

#include <algorithm>
#include <atomic>
#include <fstream>
#include <sstream>
#include <thread>

namespace sp2t {

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols != b.rows) throw std::invalid_argument("matmul: inner dimensions differ");
  Matrix out(a.rows, b.cols);
  for (int64_t i = 0; i < a.rows; ++i) {
    const double* ar = a.row(i);
    double* or_ = out.row(i);
    for (int64_t k = 0; k < a.cols; ++k) {
      const double aik = ar[k];
      if (aik == 0.0) continue;
      const double* br = b.row(k);
      for (int64_t j = 0; j < b.cols; ++j) or_[j] += aik * br[j];
    }
  }
  return out;
}

Matrix matmul_at_b(const Matrix& a, const Matrix& b) {
  if (a.rows != b.rows) throw std::invalid_argument("matmul_at_b: row counts differ");
  Matrix out(a.cols, b.cols);
  for (int64_t r = 0; r < a.rows; ++r) {
    const double* ar = a.row(r);
    const double* br = b.row(r);
    for (int64_t i = 0; i < a.cols; ++i) {
      const double ari = ar[i];
      if (ari == 0.0) continue;
      double* or_ = out.row(i);
      for (int64_t j = 0; j < b.cols; ++j) or_[j] += ari * br[j];
    }
  }
  return out;
}

Matrix matmul_a_bt(const Matrix& a, const Matrix& b) {
  if (a.cols != b.cols) throw std::invalid_argument("matmul_a_bt: column counts differ");
  Matrix out(a.rows, b.rows);
  for (int64_t i = 0; i < a.rows; ++i) {
    const double* ar = a.row(i);
    double* or_ = out.row(i);
    for (int64_t j = 0; j < b.rows; ++j) {
      const double* br = b.row(j);
      double acc = 0.0;
      for (int64_t k = 0; k < a.cols; ++k) acc += ar[k] * br[k];
      or_[j] = acc;
    }
  }
  return out;
}

void add_inplace(Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("add_inplace: shape mismatch");
  for (size_t i = 0; i < a.data.size(); ++i) a.data[i] += b.data[i];
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("max_abs_diff: shape mismatch");
  double m = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
  return m;
}

// ---------------------------------------------------------------------------
// Containers
// ---------------------------------------------------------------------------

void PointCloud::validate() const {
  if (positions.empty()) throw std::invalid_argument("PointCloud: empty input");
  if (features.rows != size()) throw std::invalid_argument("PointCloud: feature row count != N");
  if (features.cols <= 0) throw std::invalid_argument("PointCloud: C must be positive");
  for (const Vec3& p : positions) {
    if (!p.finite()) throw std::invalid_argument("PointCloud: non-finite position");
  }
  features.debug_check_finite("PointCloud features");
}

void GridSpec::validate() const {
  for (int k = 0; k < 3; ++k) {
    if (!(spacing[k] > 0.0)) throw std::invalid_argument("GridSpec: spacing must be positive");
    if (shape[k] < 1) throw std::invalid_argument("GridSpec: shape must be >= 1");
  }
}

int64_t ProxySet::occupied_count() const {
  int64_t n = 0;
  for (uint8_t o : occupied) n += o ? 1 : 0;
  return n;
}

AssociationList make_association_list(std::vector<std::pair<int64_t, int64_t>> pairs,
                                      int64_t n_pt, int64_t n_px) {
  for (const auto& [pt, px] : pairs) {
    if (pt < 0 || pt >= n_pt) throw std::invalid_argument("association: point index out of range");
    if (px < 0 || px >= n_px) throw std::invalid_argument("association: proxy index out of range");
  }
  std::sort(pairs.begin(), pairs.end());
  for (size_t i = 1; i < pairs.size(); ++i) {
    if (pairs[i] == pairs[i - 1]) throw std::invalid_argument("association: duplicate pair");
  }

  AssociationList out;
  out.n_pt = n_pt;
  out.n_px = n_px;
  const int64_t a = int64_t(pairs.size());
  out.pt.resize(a);
  out.px.resize(a);
  for (int64_t i = 0; i < a; ++i) {
    out.pt[i] = pairs[i].first;
    out.px[i] = pairs[i].second;
  }

  out.order_by_pt.resize(a);
  for (int64_t i = 0; i < a; ++i) out.order_by_pt[i] = i;

  out.order_by_px = out.order_by_pt;
  std::sort(out.order_by_px.begin(), out.order_by_px.end(), [&](int64_t l, int64_t r) {
    if (out.px[l] != out.px[r]) return out.px[l] < out.px[r];
    return out.pt[l] < out.pt[r];
  });

  // Prefix boundaries: offsets[i]..offsets[i+1] is element i's segment.
  auto build_offsets = [a](const std::vector<int64_t>& keys, const std::vector<int64_t>& order,
                           int64_t n) {
    std::vector<int64_t> offsets(size_t(n) + 1, 0);
    for (int64_t i = 0; i < a; ++i) offsets[size_t(keys[order[i]]) + 1]++;
    for (int64_t i = 0; i < n; ++i) offsets[size_t(i) + 1] += offsets[size_t(i)];
    return offsets;
  };
  out.seg_offsets_pt = build_offsets(out.pt, out.order_by_pt, n_pt);
  out.seg_offsets_px = build_offsets(out.px, out.order_by_px, n_px);
  return out;
}

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

std::vector<std::string> Config::validate() const {
  std::vector<std::string> errs;
  if (proxy_count_min < 1) errs.push_back("proxy_count_min: must be >= 1");
  if (proxy_count_min > proxy_count_max)
    errs.push_back("proxy_count_max: must be >= proxy_count_min");
  if (!(search_min >= 0.0)) errs.push_back("search_min: must be >= 0");
  if (!(search_min < search_max)) errs.push_back("search_max: must exceed search_min");
  if (max_iter < 1) errs.push_back("max_iter: must be >= 1");
  if (heads < 1) errs.push_back("heads: must be >= 1");
  if (head_dim < 1) errs.push_back("head_dim: must be >= 1");
  if (trb_size < 2) errs.push_back("trb_size: must be >= 2");
  if (!(trb_scale_pp > 0.0)) errs.push_back("trb_scale_pp: must be positive");
  if (!(trb_scale_px > 0.0)) errs.push_back("trb_scale_px: must be positive");
  if (!(trb_strength >= 0.0)) errs.push_back("trb_strength: must be >= 0");
  if (!(trb_sigma_center >= 0.0)) errs.push_back("trb_sigma_center: must be >= 0");
  if (!(trb_sigma_corner >= 0.0)) errs.push_back("trb_sigma_corner: must be >= 0");
  if (!(embed_temperature > 0.0)) errs.push_back("embed_temperature: must be positive");
  if (assoc_dim != 2 && assoc_dim != 3) errs.push_back("assoc_dim: must be 2 or 3");
  if (proxy_budget < 1) errs.push_back("proxy_budget: must be >= 1");
  return errs;
}

void Config::validate_or_throw() const {
  auto errs = validate();
  if (errs.empty()) return;
  std::string msg = "invalid config:";
  for (const auto& e : errs) msg += "\n  " + e;
  throw UserError(msg);
}

namespace {

bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw UserError("config key '" + key + "': expected boolean, got '" + v + "'");
}

}  // namespace

Config Config::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UserError("cannot open config file: " + path);
  Config cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::string key, eq, value;
    std::istringstream ls(line);
    if (!(ls >> key)) continue;
    ls >> eq;
    if (eq != "=") throw UserError("config line " + std::to_string(lineno) + ": expected 'key = value'");
    if (!(ls >> value)) throw UserError("config line " + std::to_string(lineno) + ": missing value");

    try {
      if (key == "proxy_count_min") cfg.proxy_count_min = std::stoll(value);
      else if (key == "proxy_count_max") cfg.proxy_count_max = std::stoll(value);
      else if (key == "search_min") cfg.search_min = std::stod(value);
      else if (key == "search_max") cfg.search_max = std::stod(value);
      else if (key == "max_iter") cfg.max_iter = std::stoll(value);
      else if (key == "heads") cfg.heads = std::stoll(value);
      else if (key == "head_dim") cfg.head_dim = std::stoll(value);
      else if (key == "trb_size") cfg.trb_size = std::stoll(value);
      else if (key == "trb_scale_pp") cfg.trb_scale_pp = std::stod(value);
      else if (key == "trb_scale_px") cfg.trb_scale_px = std::stod(value);
      else if (key == "trb_strength") cfg.trb_strength = std::stod(value);
      else if (key == "trb_sigma_center") cfg.trb_sigma_center = std::stod(value);
      else if (key == "trb_sigma_corner") cfg.trb_sigma_corner = std::stod(value);
      else if (key == "embed_temperature") cfg.embed_temperature = std::stod(value);
      else if (key == "assoc_dim") cfg.assoc_dim = std::stoll(value);
      else if (key == "include_empty_proxies") cfg.include_empty_proxies = parse_bool(value, key);
      else if (key == "bias_in_logit") cfg.bias_in_logit = parse_bool(value, key);
      else if (key == "literal_eq2") cfg.literal_eq2 = parse_bool(value, key);
      else if (key == "proxy_budget") cfg.proxy_budget = std::stoll(value);
      else if (key == "seed") cfg.seed = std::stoull(value);
      else throw UserError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    } catch (const std::invalid_argument&) {
      throw UserError("config key '" + key + "': cannot parse value '" + value + "'");
    } catch (const std::out_of_range&) {
      throw UserError("config key '" + key + "': value out of range '" + value + "'");
    }
  }
  return cfg;
}

// ---------------------------------------------------------------------------
// Rng: splitmix64 seeding, xoshiro256++ stream
// ---------------------------------------------------------------------------

namespace {

uint64_t splitmix64(uint64_t& x) {
  x += 0x9e3779b97f4a7c15ULL;
  uint64_t z = x;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline uint64_t rotl(uint64_t v, int k) { return (v << k) | (v >> (64 - k)); }

}  // namespace

Rng::Rng(uint64_t seed) {
  uint64_t s = seed;
  for (auto& w : state_) w = splitmix64(s);
}

uint64_t Rng::next_u64() {
  const uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
  const uint64_t t = state_[1] << 17;
  state_[2] ^= state_[0];
  state_[3] ^= state_[1];
  state_[1] ^= state_[2];
  state_[0] ^= state_[3];
  state_[2] ^= t;
  state_[3] = rotl(state_[3], 45);
  return result;
}

double Rng::uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  // (0,1] draw keeps the log finite.
  const double u1 = double((next_u64() >> 11) + 1) * 0x1.0p-53;
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * 3.14159265358979323846 * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

int64_t Rng::below(int64_t n) {
  if (n <= 0) throw std::invalid_argument("Rng::below: n must be positive");
  const uint64_t un = uint64_t(n);
  uint64_t mask = un - 1;
  mask |= mask >> 1;
  mask |= mask >> 2;
  mask |= mask >> 4;
  mask |= mask >> 8;
  mask |= mask >> 16;
  mask |= mask >> 32;
  uint64_t v;
  do {
    v = next_u64() & mask;
  } while (v >= un);
  return int64_t(v);
}

// ---------------------------------------------------------------------------
// AABB
// ---------------------------------------------------------------------------

Aabb compute_aabb(std::span<const Vec3> positions) {
  if (positions.empty()) throw std::invalid_argument("empty input");
  Aabb box{positions[0], positions[0]};
  for (const Vec3& p : positions) {
    for (int k = 0; k < 3; ++k) {
      box.min_pt[k] = std::min(box.min_pt[k], p[k]);
      box.max_pt[k] = std::max(box.max_pt[k], p[k]);
    }
  }
  return box;
}

Aabb compute_aabb(const PointCloud& points) {
  return compute_aabb(std::span<const Vec3>(points.positions));
}

// ---------------------------------------------------------------------------
// Worker pool
// ---------------------------------------------------------------------------

namespace {
std::atomic<int> g_workers{1};
}

void set_worker_count(int n) { g_workers.store(std::max(1, n)); }
int worker_count() { return g_workers.load(); }

void parallel_for(int64_t begin, int64_t end, const std::function<void(int64_t, int64_t)>& body) {
  const int64_t total = end - begin;
  const int workers = worker_count();
  if (total <= 0) return;
  if (workers <= 1 || total < 2) {
    body(begin, end);
    return;
  }
  const int use = int(std::min<int64_t>(workers, total));
  std::vector<std::thread> threads;
  threads.reserve(size_t(use));
  const int64_t chunk = (total + use - 1) / use;
  for (int w = 0; w < use; ++w) {
    const int64_t lo = begin + int64_t(w) * chunk;
    const int64_t hi = std::min(end, lo + chunk);
    if (lo >= hi) break;
    threads.emplace_back([&body, lo, hi] { body(lo, hi); });
  }
  for (auto& t : threads) t.join();
}

}  // namespace sp2t
