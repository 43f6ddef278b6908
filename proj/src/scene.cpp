#include "sp2t/scene.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace sp2t {

PointCloud make_cube_scene(int64_t n, int64_t channels, uint64_t seed) {
  Rng rng(seed);
  PointCloud cloud;
  cloud.positions.reserve(size_t(n));
  for (int64_t i = 0; i < n; ++i) {
    cloud.positions.push_back({rng.uniform(), rng.uniform(), rng.uniform()});
  }
  cloud.features = Matrix(n, channels);
  for (double& v : cloud.features.data) v = rng.normal();
  return cloud;
}

PointCloud make_slab_scene(int64_t n, double aspect, int64_t channels, uint64_t seed) {
  Rng rng(seed);
  PointCloud cloud;
  cloud.positions.reserve(size_t(n));
  for (int64_t i = 0; i < n; ++i) {
    cloud.positions.push_back(
        {rng.uniform() * aspect, rng.uniform() * aspect, rng.uniform()});
  }
  cloud.features = Matrix(n, channels);
  for (double& v : cloud.features.data) v = rng.normal();
  return cloud;
}

LabeledScene make_two_cluster_scene(int64_t per_cluster, uint64_t seed) {
  Rng rng(seed);
  const Vec3 centers[2] = {{-0.5, -0.3, 0.0}, {0.5, 0.3, 0.0}};
  const double sigma = 0.22;

  LabeledScene scene;
  scene.cloud.positions.reserve(size_t(2 * per_cluster));
  scene.labels.reserve(size_t(2 * per_cluster));
  // interleaved so point order carries no label signal
  for (int64_t i = 0; i < per_cluster; ++i) {
    for (int cls = 0; cls < 2; ++cls) {
      Vec3 p = centers[cls];
      for (int k = 0; k < 3; ++k) {
        p[k] = std::clamp(p[k] + sigma * rng.normal(), -1.0, 1.0);
      }
      scene.cloud.positions.push_back(p);
      scene.labels.push_back(cls);
    }
  }
  const int64_t n = int64_t(scene.cloud.positions.size());
  scene.cloud.features = Matrix(n, 3);
  for (int64_t i = 0; i < n; ++i) {
    for (int k = 0; k < 3; ++k) scene.cloud.features(i, k) = scene.cloud.positions[size_t(i)][k];
  }
  return scene;
}

namespace {

PointCloud ingest_text(std::ifstream& in, const std::string& path, int64_t default_channels) {
  PointCloud cloud;
  std::vector<std::vector<double>> feature_rows;
  int64_t feature_cols = -1;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    for (char& ch : line) {
      if (ch == ',') ch = ' ';
    }
    std::istringstream ls(line);
    std::vector<double> vals;
    double v;
    while (ls >> v) vals.push_back(v);
    if (vals.empty()) continue;
    if (vals.size() < 3) {
      throw UserError(path + ": parse error at line " + std::to_string(lineno) +
                      ": expected at least 3 columns, got " + std::to_string(vals.size()));
    }
    const int64_t ncols = int64_t(vals.size()) - 3;
    if (feature_cols < 0) {
      feature_cols = ncols;
    } else if (ncols != feature_cols) {
      throw UserError(path + ": parse error at line " + std::to_string(lineno) +
                      ": inconsistent column count");
    }
    cloud.positions.push_back({vals[0], vals[1], vals[2]});
    feature_rows.emplace_back(vals.begin() + 3, vals.end());
  }
  if (cloud.positions.empty()) throw UserError(path + ": empty input");

  const int64_t n = int64_t(cloud.positions.size());
  if (feature_cols == 0) {
    cloud.features = Matrix::zeros(n, default_channels);
  } else {
    cloud.features = Matrix(n, feature_cols);
    for (int64_t i = 0; i < n; ++i) {
      for (int64_t j = 0; j < feature_cols; ++j) cloud.features(i, j) = feature_rows[size_t(i)][size_t(j)];
    }
  }
  return cloud;
}

float read_f32_le(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw UserError("ply: truncated vertex data");
  uint32_t bits = uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 | uint32_t(b[3]) << 24;
  float f;
  std::memcpy(&f, &bits, 4);
  return f;
}

void write_f32_le(std::ostream& out, float f) {
  uint32_t bits;
  std::memcpy(&bits, &f, 4);
  unsigned char b[4] = {static_cast<unsigned char>(bits & 0xff),
                        static_cast<unsigned char>((bits >> 8) & 0xff),
                        static_cast<unsigned char>((bits >> 16) & 0xff),
                        static_cast<unsigned char>((bits >> 24) & 0xff)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

PointCloud ingest_ply(std::ifstream& in, const std::string& path, int64_t default_channels) {
  std::string line;
  int lineno = 1;  // "ply" already consumed
  int64_t vertex_count = -1;
  std::vector<std::string> props;
  bool in_vertex_element = false;
  bool format_seen = false;

  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ls(line);
    std::string tok;
    ls >> tok;
    if (tok == "comment" || tok.empty()) continue;
    if (tok == "format") {
      std::string fmt;
      ls >> fmt;
      if (fmt != "binary_little_endian")
        throw UserError(path + ": line " + std::to_string(lineno) +
                        ": only binary_little_endian PLY is supported");
      format_seen = true;
    } else if (tok == "element") {
      std::string name;
      int64_t count = 0;
      ls >> name >> count;
      if (name == "vertex") {
        vertex_count = count;
        in_vertex_element = true;
      } else {
        if (count > 0 && vertex_count < 0)
          throw UserError(path + ": line " + std::to_string(lineno) +
                          ": vertex element must come first");
        in_vertex_element = false;
      }
    } else if (tok == "property") {
      if (!in_vertex_element) continue;
      std::string type, name;
      ls >> type >> name;
      if (type != "float" && type != "float32")
        throw UserError(path + ": line " + std::to_string(lineno) +
                        ": unsupported vertex property type '" + type + "'");
      props.push_back(name);
    } else if (tok == "end_header") {
      break;
    } else {
      throw UserError(path + ": line " + std::to_string(lineno) + ": malformed header near '" +
                      tok + "'");
    }
  }
  if (!format_seen) throw UserError(path + ": missing PLY format line");
  if (vertex_count < 0) throw UserError(path + ": missing vertex element");

  int64_t ix = -1, iy = -1, iz = -1;
  std::vector<int64_t> feature_props;
  for (size_t i = 0; i < props.size(); ++i) {
    if (props[i] == "x") ix = int64_t(i);
    else if (props[i] == "y") iy = int64_t(i);
    else if (props[i] == "z") iz = int64_t(i);
    else feature_props.push_back(int64_t(i));
  }
  if (ix < 0 || iy < 0 || iz < 0) throw UserError(path + ": PLY lacks float x/y/z properties");

  PointCloud cloud;
  cloud.positions.resize(size_t(vertex_count));
  const int64_t fcols = int64_t(feature_props.size());
  cloud.features = Matrix::zeros(vertex_count, fcols > 0 ? fcols : default_channels);
  std::vector<float> row(props.size());
  for (int64_t v = 0; v < vertex_count; ++v) {
    for (size_t p = 0; p < props.size(); ++p) row[p] = read_f32_le(in);
    cloud.positions[size_t(v)] = {double(row[size_t(ix)]), double(row[size_t(iy)]),
                                  double(row[size_t(iz)])};
    for (int64_t f = 0; f < fcols; ++f) {
      cloud.features(v, f) = double(row[size_t(feature_props[size_t(f)])]);
    }
  }
  return cloud;
}

}  // namespace

PointCloud ingest_points(const std::string& path, int64_t default_channels) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UserError("cannot open input file: " + path);
  std::string first;
  std::getline(in, first);
  if (!first.empty() && first.back() == '\r') first.pop_back();
  PointCloud cloud;
  if (first == "ply") {
    cloud = ingest_ply(in, path, default_channels);
  } else {
    in.clear();
    in.seekg(0);
    cloud = ingest_text(in, path, default_channels);
  }
  try {
    cloud.validate();
  } catch (const std::invalid_argument& e) {
    throw UserError(path + ": " + e.what());
  }
  return cloud;
}

void write_xyz(std::ostream& out, std::span<const Vec3> positions) {
  out.precision(17);
  for (const Vec3& p : positions) out << p.x << ' ' << p.y << ' ' << p.z << '\n';
}

void write_ply_binary(std::ostream& out, const PointCloud& cloud) {
  out << "ply\nformat binary_little_endian 1.0\n";
  out << "element vertex " << cloud.size() << "\n";
  out << "property float x\nproperty float y\nproperty float z\n";
  for (int64_t f = 0; f < cloud.channels(); ++f) {
    out << "property float f" << f << "\n";
  }
  out << "end_header\n";
  for (int64_t i = 0; i < cloud.size(); ++i) {
    const Vec3& p = cloud.positions[size_t(i)];
    write_f32_le(out, float(p.x));
    write_f32_le(out, float(p.y));
    write_f32_le(out, float(p.z));
    for (int64_t f = 0; f < cloud.channels(); ++f) write_f32_le(out, float(cloud.features(i, f)));
  }
}

}  // namespace sp2t
