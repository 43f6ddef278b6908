#include "sp2t/trb.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>

namespace sp2t {

TrbTable trb_init(int64_t heads, int64_t size, double input_scale,
                  const TrbInitSchedule& schedule, Rng& rng) {
  if (heads < 1) throw std::invalid_argument("trb_init: heads must be >= 1");
  if (size < 2) throw std::invalid_argument("trb_init: size must be >= 2");

  TrbTable table;
  table.heads = heads;
  table.size = size;
  table.input_scale = input_scale;
  table.values.resize(size_t(heads * size * size * size));

  const double center = double(size - 1) / 2.0;
  const double corner_radius = center * std::sqrt(3.0);
  for (int64_t h = 0; h < heads; ++h) {
    for (int64_t ix = 0; ix < size; ++ix) {
      for (int64_t iy = 0; iy < size; ++iy) {
        for (int64_t iz = 0; iz < size; ++iz) {
          const double dx = double(ix) - center;
          const double dy = double(iy) - center;
          const double dz = double(iz) - center;
          const double r = std::sqrt(dx * dx + dy * dy + dz * dz) / corner_radius;
          const double sigma =
              schedule.strength *
              (schedule.sigma_center + (schedule.sigma_corner - schedule.sigma_center) * r);
          table.at(h, ix, iy, iz) = sigma * rng.normal();
        }
      }
    }
  }
  return table;
}

TrbStencil trb_stencil(const TrbTable& table, const Vec3& displacement) {
  const int64_t t = table.size;
  std::array<int64_t, 3> lo;
  std::array<double, 3> frac;
  for (int k = 0; k < 3; ++k) {
    const double u = std::clamp(table.input_scale * displacement[k], -1.0, 1.0);
    // align-corners: u in [-1,1] maps onto node coordinates [0, T-1]
    const double coord = (u + 1.0) / 2.0 * double(t - 1);
    int64_t i0 = int64_t(std::floor(coord));
    i0 = std::clamp<int64_t>(i0, 0, t - 2);
    lo[size_t(k)] = i0;
    frac[size_t(k)] = coord - double(i0);
  }

  TrbStencil s;
  int idx = 0;
  for (int dx = 0; dx <= 1; ++dx) {
    const double wx = dx ? frac[0] : 1.0 - frac[0];
    for (int dy = 0; dy <= 1; ++dy) {
      const double wy = dy ? frac[1] : 1.0 - frac[1];
      for (int dz = 0; dz <= 1; ++dz) {
        const double wz = dz ? frac[2] : 1.0 - frac[2];
        s.node[size_t(idx)] = table.node_index(lo[0] + dx, lo[1] + dy, lo[2] + dz);
        s.weight[size_t(idx)] = wx * wy * wz;
        ++idx;
      }
    }
  }
  return s;
}

void trb_lookup_into(const TrbTable& table, const Vec3& displacement, std::span<double> out) {
  if (int64_t(out.size()) != table.heads) throw std::invalid_argument("trb_lookup: bad output size");
  const TrbStencil s = trb_stencil(table, displacement);
  const int64_t per_head = table.nodes_per_head();
  for (int64_t h = 0; h < table.heads; ++h) {
    const double* base = table.values.data() + size_t(h * per_head);
    double acc = 0.0;
    for (int c = 0; c < 8; ++c) acc += s.weight[size_t(c)] * base[s.node[size_t(c)]];
    out[size_t(h)] = acc;
  }
  table.lookup_calls += 1;
}

std::vector<double> trb_lookup(const TrbTable& table, const Vec3& displacement) {
  std::vector<double> out(size_t(table.heads));
  trb_lookup_into(table, displacement, out);
  return out;
}

Matrix trb_lookup_batch(const TrbTable& table, std::span<const Vec3> displacements) {
  Matrix out(int64_t(displacements.size()), table.heads);
  for (int64_t i = 0; i < out.rows; ++i) {
    trb_lookup_into(table, displacements[size_t(i)],
                    std::span<double>(out.row(i), size_t(table.heads)));
  }
  return out;
}

Matrix trb_bias_for_assoc(const TrbTable& table, const AssociationList& assoc,
                          std::span<const Vec3> positions_pt,
                          std::span<const Vec3> positions_px) {
  Matrix bias(assoc.size(), table.heads);
  for (int64_t a = 0; a < assoc.size(); ++a) {
    const Vec3 d = positions_pt[size_t(assoc.pt[size_t(a)])] -
                   positions_px[size_t(assoc.px[size_t(a)])];
    trb_lookup_into(table, d, std::span<double>(bias.row(a), size_t(table.heads)));
  }
  return bias;
}

void trb_backward(const TrbTable& table, const Vec3& displacement,
                  std::span<const double> upstream, std::vector<double>& table_grad) {
  if (int64_t(upstream.size()) != table.heads)
    throw std::invalid_argument("trb_backward: bad upstream size");
  if (table_grad.size() != table.values.size())
    throw std::invalid_argument("trb_backward: gradient buffer shape mismatch");
  const TrbStencil s = trb_stencil(table, displacement);
  const int64_t per_head = table.nodes_per_head();
  for (int64_t h = 0; h < table.heads; ++h) {
    double* base = table_grad.data() + size_t(h * per_head);
    for (int c = 0; c < 8; ++c) base[s.node[size_t(c)]] += s.weight[size_t(c)] * upstream[size_t(h)];
  }
}

namespace {

void write_u32_le(std::ostream& out, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t read_u32_le(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw std::runtime_error("trb_load: truncated header");
  return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 | uint32_t(b[3]) << 24;
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
  if (!in) throw std::runtime_error("trb_load: truncated values");
  uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= uint64_t(b[i]) << (8 * i);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

}  // namespace

void trb_dump(const TrbTable& table, std::ostream& out) {
  write_u32_le(out, uint32_t(table.heads));
  write_u32_le(out, uint32_t(table.size));
  for (double v : table.values) write_f64_le(out, v);
}

TrbTable trb_load(std::istream& in, double input_scale) {
  TrbTable table;
  table.heads = read_u32_le(in);
  table.size = read_u32_le(in);
  if (table.heads < 1 || table.size < 2) throw std::runtime_error("trb_load: bad header");
  table.input_scale = input_scale;
  table.values.resize(size_t(table.heads * table.size * table.size * table.size));
  for (double& v : table.values) v = read_f64_le(in);
  return table;
}

}  // namespace sp2t
