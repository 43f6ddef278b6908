// Command-line entry point: scene ingestion/synthesis, pipeline
// execution, attention/bias dumps, benchmark invocation.
//
// Exit codes: 0 success, 1 internal invariant violation, 2 user input error.

#include "sp2t/association.hpp"
#include "sp2t/bench.hpp"
#include "sp2t/block.hpp"
#include "sp2t/core.hpp"
#include "sp2t/sampling.hpp"
#include "sp2t/scene.hpp"
#include "sp2t/spa.hpp"
#include "sp2t/trb.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <fstream>
#include <iostream>
#include <sstream>

namespace {

using sp2t::Config;
using sp2t::Matrix;
using sp2t::PointCloud;
using sp2t::UserError;

struct SceneOptions {
  std::string input;
  std::string synthetic;  // cube | slab | clusters
  int64_t n = 2000;
  double aspect = 100.0;
};

struct SamplerOptions {
  std::string sampler = "wise";
  std::vector<int64_t> fix_num{4, 4, 4};
  double fix_size = 0.25;
  int64_t fps_count = 0;  // 0 -> proxy_count_max
};

void add_config_flags(CLI::App* cmd, std::string& config_path, Config& cfg, int64_t& target,
                      int& workers) {
  cmd->add_option("--config", config_path, "key-value config file");
  cmd->add_option("--seed", cfg.seed, "deterministic seed");
  cmd->add_option("--heads", cfg.heads, "attention heads");
  cmd->add_option("--head-dim", cfg.head_dim, "channels per head");
  cmd->add_option("--trb-size", cfg.trb_size, "bias table nodes per axis");
  cmd->add_option("--assoc-dim", cfg.assoc_dim, "association dimension (2 or 3)")
      ->check(CLI::IsMember({2, 3}));
  cmd->add_flag("--bias-in-logit", cfg.bias_in_logit, "add the relative bias inside the exponent");
  cmd->add_flag("--literal-eq2", cfg.literal_eq2, "normalize over the proxy side in both directions");
  cmd->add_option("--target", target, "proxy cell-count target (range becomes [3t/4, t])");
  cmd->add_option("--workers", workers, "worker count for data-parallel loops");
}

void add_scene_flags(CLI::App* cmd, SceneOptions& scene) {
  cmd->add_option("--input", scene.input, "point file (XYZ text or binary PLY)");
  cmd->add_option("--synthetic", scene.synthetic, "synthetic scene kind")
      ->check(CLI::IsMember({"cube", "slab", "clusters"}));
  cmd->add_option("--n", scene.n, "synthetic point count");
  cmd->add_option("--aspect", scene.aspect, "slab aspect ratio");
}

void add_sampler_flags(CLI::App* cmd, SamplerOptions& s) {
  cmd->add_option("--sampler", s.sampler, "proxy sampler")
      ->check(CLI::IsMember({"wise", "fix-num", "fix-size", "fps"}));
  cmd->add_option("--fix-num", s.fix_num, "fix-number cells per axis")->expected(3);
  cmd->add_option("--fix-size", s.fix_size, "fix-size spacing");
  cmd->add_option("--fps-count", s.fps_count, "FPS sample count");
}

Config finalize_config(const std::string& config_path, const Config& flag_overrides,
                       const Config& defaults, int64_t target) {
  Config cfg = flag_overrides;
  if (!config_path.empty()) {
    Config from_file = Config::from_file(config_path);
    // flags given on the command line win over the file
    Config merged = from_file;
    const Config& f = flag_overrides;
    const Config& d = defaults;
    if (f.seed != d.seed) merged.seed = f.seed;
    if (f.heads != d.heads) merged.heads = f.heads;
    if (f.head_dim != d.head_dim) merged.head_dim = f.head_dim;
    if (f.trb_size != d.trb_size) merged.trb_size = f.trb_size;
    if (f.assoc_dim != d.assoc_dim) merged.assoc_dim = f.assoc_dim;
    if (f.bias_in_logit != d.bias_in_logit) merged.bias_in_logit = f.bias_in_logit;
    if (f.literal_eq2 != d.literal_eq2) merged.literal_eq2 = f.literal_eq2;
    cfg = merged;
  }
  if (target > 0) {
    cfg.proxy_count_max = target;
    cfg.proxy_count_min = std::max<int64_t>(1, (3 * target) / 4);
  }
  cfg.validate_or_throw();
  return cfg;
}

PointCloud load_scene(const SceneOptions& scene, const Config& cfg, std::vector<int>* labels) {
  if (!scene.input.empty()) return sp2t::ingest_points(scene.input, cfg.channels());
  if (scene.synthetic.empty()) throw UserError("no scene: pass --input or --synthetic");
  if (scene.synthetic == "cube") return sp2t::make_cube_scene(scene.n, cfg.channels(), cfg.seed);
  if (scene.synthetic == "slab")
    return sp2t::make_slab_scene(scene.n, scene.aspect, cfg.channels(), cfg.seed);
  sp2t::LabeledScene ls = sp2t::make_two_cluster_scene(scene.n / 2, cfg.seed);
  if (labels != nullptr) *labels = ls.labels;
  return ls.cloud;
}

sp2t::SamplerKind make_sampler(const SamplerOptions& s, const Config& cfg) {
  if (s.sampler == "wise") return sp2t::SamplerKind::spatial_wise();
  if (s.sampler == "fix-num")
    return sp2t::SamplerKind::fix_number(s.fix_num[0], s.fix_num[1], s.fix_num[2]);
  if (s.sampler == "fix-size") return sp2t::SamplerKind::fix_size(s.fix_size);
  return sp2t::SamplerKind::fps(s.fps_count > 0 ? s.fps_count : cfg.proxy_count_max);
}

std::ofstream open_output(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw UserError("cannot open output file: " + path);
  return out;
}

// -------------------------------------------------------------------------
// sample
// -------------------------------------------------------------------------

int cmd_sample(const SceneOptions& scene_opts, const SamplerOptions& sampler_opts,
               const Config& cfg, const std::string& out_path) {
  const PointCloud scene = load_scene(scene_opts, cfg, nullptr);
  const sp2t::ProxySet proxies = sp2t::sample_proxies(scene, make_sampler(sampler_opts, cfg), cfg);

  std::cout << "points: " << scene.size() << "\n";
  std::cout << "proxy count: " << proxies.size() << "\n";
  if (proxies.grid) {
    const sp2t::GridSpec& g = *proxies.grid;
    std::cout << "cell count: " << g.cell_count() << "\n";
    std::cout << "grid shape: " << g.shape[0] << ' ' << g.shape[1] << ' ' << g.shape[2] << "\n";
    std::cout << "spacing: " << g.spacing.x << ' ' << g.spacing.y << ' ' << g.spacing.z << "\n";
  }
  std::cout << "occupancy: " << proxies.occupied_count() << "/" << proxies.size() << " = "
            << double(proxies.occupied_count()) / double(proxies.size()) << "\n";

  if (!out_path.empty()) {
    auto out = open_output(out_path);
    sp2t::write_xyz(out, std::span<const sp2t::Vec3>(proxies.positions));
    std::cout << "wrote proxy positions to " << out_path << "\n";
  }
  return 0;
}

// -------------------------------------------------------------------------
// forward
// -------------------------------------------------------------------------

void dump_attention_json(const sp2t::BlockWorkspace& ws, const sp2t::AssociationList& assoc,
                         std::ostream& out) {
  nlohmann::json layers = nlohmann::json::array();
  const struct {
    const char* name;
    const sp2t::SpaWorkspace* ws;
  } dirs[] = {{"point_to_proxy", &ws.spa1}, {"proxy_to_point", &ws.spa2}};
  for (const auto& d : dirs) {
    for (int64_t h = 0; h < d.ws->heads; ++h) {
      nlohmann::json entry;
      entry["direction"] = d.name;
      entry["head"] = h;
      nlohmann::json pairs = nlohmann::json::array();
      for (int64_t a = 0; a < assoc.size(); ++a) {
        pairs.push_back({assoc.pt[size_t(a)], assoc.px[size_t(a)], d.ws->weights(a, h)});
      }
      entry["pairs"] = std::move(pairs);
      layers.push_back(std::move(entry));
    }
  }
  nlohmann::json root;
  root["layers"] = std::move(layers);
  out << root.dump(2) << "\n";
}

int cmd_forward(const SceneOptions& scene_opts, const SamplerOptions& sampler_opts,
                const Config& cfg, const std::string& checkpoint_path,
                const std::string& out_path, const std::string& dump_attn_path) {
  const PointCloud scene = load_scene(scene_opts, cfg, nullptr);
  const sp2t::ProxySet proxies = sp2t::sample_proxies(scene, make_sampler(sampler_opts, cfg), cfg);
  if (!proxies.grid) throw UserError("forward requires a grid-based sampler");
  const sp2t::AssociationList assoc = sp2t::vertex_associate(scene, proxies, cfg.assoc_dim);
  const sp2t::CellGroups cells =
      sp2t::build_cell_groups(std::span<const sp2t::Vec3>(scene.positions), *proxies.grid);

  sp2t::ToyModel model = [&] {
    if (!checkpoint_path.empty()) {
      std::ifstream in(checkpoint_path, std::ios::binary);
      if (!in) throw UserError("cannot open checkpoint: " + checkpoint_path);
      return sp2t::load_toy_model(in, cfg);
    }
    sp2t::Rng rng(cfg.seed);
    return sp2t::make_toy_model(scene.channels(), 2, cfg, rng);
  }();
  if (model.w_in.rows != scene.channels()) {
    throw UserError("checkpoint shape mismatch for w_in: checkpoint expects " +
                    std::to_string(model.w_in.rows) + " input channels, scene has " +
                    std::to_string(scene.channels()));
  }

  const Matrix fpt0 = [&] {
    Matrix f = matmul(scene.features, model.w_in);
    for (int64_t i = 0; i < f.rows; ++i) {
      for (int64_t j = 0; j < f.cols; ++j) f(i, j) += model.b_in[size_t(j)];
    }
    return f;
  }();
  const Matrix fpx0 = sp2t::proxy_init_features(fpt0, proxies, assoc, model.proxy_mlp,
                                                model.embed_temperature);

  sp2t::BlockIo io;
  io.point_feat = &fpt0;
  io.proxy_feat = &fpx0;
  io.pos_pt = std::span<const sp2t::Vec3>(scene.positions);
  io.pos_px = std::span<const sp2t::Vec3>(proxies.positions);
  io.occupied = &proxies.occupied;
  io.assoc = &assoc;
  io.cells = &cells;
  sp2t::BlockWorkspace ws;
  const auto [fpt2, fpx2] = sp2t::sp2t_block_forward(io, model.block, sp2t::BlockOptions::from_config(cfg), &ws);

  std::ostream* out = &std::cout;
  std::ofstream file_out;
  if (!out_path.empty()) {
    file_out = open_output(out_path);
    out = &file_out;
  }
  out->precision(17);
  *out << "point";
  for (int64_t j = 0; j < fpt2.cols; ++j) *out << ",f" << j;
  *out << "\n";
  for (int64_t i = 0; i < fpt2.rows; ++i) {
    *out << i;
    for (int64_t j = 0; j < fpt2.cols; ++j) *out << ',' << fpt2(i, j);
    *out << "\n";
  }

  if (!dump_attn_path.empty()) {
    auto attn_out = open_output(dump_attn_path);
    dump_attention_json(ws, assoc, attn_out);
  }
  std::cerr << "forward: " << scene.size() << " points, " << proxies.size() << " proxies, "
            << assoc.size() << " associations\n";
  return 0;
}

// -------------------------------------------------------------------------
// train-toy
// -------------------------------------------------------------------------

int cmd_train_toy(const Config& cfg, int64_t steps, double lr, int64_t per_cluster,
                  const std::string& log_path, const std::string& checkpoint_path) {
  sp2t::LabeledScene scene = sp2t::make_two_cluster_scene(per_cluster, cfg.seed);
  sp2t::ToyBatch batch = sp2t::make_toy_batch(std::move(scene.cloud), std::move(scene.labels), cfg);
  sp2t::Rng rng(cfg.seed + 1);
  sp2t::ToyModel model = sp2t::make_toy_model(batch.cloud.channels(), 2, cfg, rng);
  const sp2t::BlockOptions opts = sp2t::BlockOptions::from_config(cfg);

  std::ofstream log;
  if (!log_path.empty()) log = open_output(log_path);
  if (log.is_open()) log << "step,loss,accuracy\n";

  sp2t::ToyStepStats stats = sp2t::toy_eval(batch, model, opts);
  if (log.is_open()) log << 0 << ',' << stats.loss << ',' << stats.accuracy << "\n";
  for (int64_t step = 1; step <= steps; ++step) {
    stats = sp2t::toy_train_step(batch, model, lr, opts);
    if (log.is_open()) log << step << ',' << stats.loss << ',' << stats.accuracy << "\n";
  }
  stats = sp2t::toy_eval(batch, model, opts);
  std::cout << "steps: " << steps << "\n";
  std::cout << "final loss: " << stats.loss << "\n";
  std::cout << "final accuracy: " << stats.accuracy << "\n";

  if (!checkpoint_path.empty()) {
    auto out = open_output(checkpoint_path);
    sp2t::save_toy_model(model, out);
    std::cout << "wrote checkpoint to " << checkpoint_path << "\n";
  }
  return 0;
}

// -------------------------------------------------------------------------
// bench
// -------------------------------------------------------------------------

int cmd_bench(const std::string& kind, const SceneOptions& scene_opts, const Config& cfg,
              const std::vector<int64_t>& sizes, int64_t m, int64_t repeats,
              double fix_size_spacing, const std::vector<double>& aspects,
              const std::string& out_path, bool json, bool f32) {
  std::ostream* out = &std::cout;
  std::ofstream file_out;
  if (!out_path.empty()) {
    file_out = open_output(out_path);
    out = &file_out;
  }

  if (kind == "scaling") {
    const auto rows = sp2t::run_scaling_bench(sizes, m, 8, cfg.head_dim, cfg.heads, repeats,
                                              cfg.seed, 4e6, f32);
    sp2t::write_scaling_csv(rows, *out);
    std::cerr << "log-log slope: " << sp2t::fit_loglog_slope(rows) << "\n";
  } else if (kind == "latency") {
    SceneOptions s = scene_opts;
    if (s.input.empty() && s.synthetic.empty()) s.synthetic = "cube";
    const PointCloud scene = load_scene(s, cfg, nullptr);
    const auto tree = sp2t::run_latency_decomposition(scene, cfg);
    if (json) {
      sp2t::write_latency_json(tree, *out);
    } else {
      sp2t::write_latency_csv(tree, *out);
    }
  } else if (kind == "samplers") {
    const auto rows = sp2t::run_sampler_sweep(aspects, cfg, scene_opts.n, fix_size_spacing);
    sp2t::write_sweep_csv(rows, *out);
  } else {
    throw UserError("unknown bench kind: " + kind);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sparse proxy point transformer toolkit"};
  app.require_subcommand(1);

  const Config defaults;
  Config cfg;
  std::string config_path;
  int64_t target = 0;
  int workers = 1;

  SceneOptions scene_opts;
  SamplerOptions sampler_opts;
  std::string out_path, dump_attn_path, checkpoint_path;
  int64_t steps = 500, per_cluster = 500;
  double lr = 0.01;
  std::string bench_kind;
  std::vector<int64_t> bench_sizes{16384, 32768, 65536, 131072, 262144};
  int64_t bench_m = 160;
  int64_t bench_repeats = 5;
  double fix_size_spacing = 0.1;
  std::vector<double> aspects{1.0, 10.0, 100.0};
  bool bench_json = false;
  bool bench_f32 = false;

  CLI::App* sample = app.add_subcommand("sample", "sample proxies and report grid statistics");
  add_config_flags(sample, config_path, cfg, target, workers);
  add_scene_flags(sample, scene_opts);
  add_sampler_flags(sample, sampler_opts);
  sample->add_option("--out", out_path, "write proxy positions as XYZ text");

  CLI::App* forward = app.add_subcommand("forward", "run proxy init plus one block");
  add_config_flags(forward, config_path, cfg, target, workers);
  add_scene_flags(forward, scene_opts);
  add_sampler_flags(forward, sampler_opts);
  forward->add_option("--checkpoint", checkpoint_path, "load parameters from a checkpoint");
  forward->add_option("--out", out_path, "point-output CSV path (default stdout)");
  forward->add_option("--dump-attn", dump_attn_path, "attention-weight JSON path");

  CLI::App* train = app.add_subcommand("train-toy", "train the toy two-cluster head");
  add_config_flags(train, config_path, cfg, target, workers);
  train->add_option("--steps", steps, "training steps");
  train->add_option("--lr", lr, "learning rate");
  train->add_option("--per-cluster", per_cluster, "points per cluster");
  train->add_option("--out", out_path, "training log CSV path");
  train->add_option("--checkpoint", checkpoint_path, "checkpoint output path");

  CLI::App* bench = app.add_subcommand("bench", "run a measurement harness");
  add_config_flags(bench, config_path, cfg, target, workers);
  add_scene_flags(bench, scene_opts);
  bench->add_option("--bench", bench_kind, "which harness to run")
      ->check(CLI::IsMember({"scaling", "latency", "samplers"}))
      ->required();
  bench->add_option("--sizes", bench_sizes, "scaling: point counts");
  bench->add_option("--m", bench_m, "scaling: proxy count");
  bench->add_option("--repeats", bench_repeats, "scaling: timed repeats");
  bench->add_option("--fix-size", fix_size_spacing, "samplers: fix-size spacing");
  bench->add_option("--aspects", aspects, "samplers: slab aspect ratios");
  bench->add_option("--out", out_path, "output file (default stdout)");
  bench->add_flag("--json", bench_json, "latency: emit the JSON tree");
  bench->add_flag("--f32", bench_f32, "scaling: time single-precision kernel clones");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    const Config final_cfg = finalize_config(config_path, cfg, defaults, target);
    sp2t::set_worker_count(workers);
    if (sample->parsed()) return cmd_sample(scene_opts, sampler_opts, final_cfg, out_path);
    if (forward->parsed())
      return cmd_forward(scene_opts, sampler_opts, final_cfg, checkpoint_path, out_path,
                         dump_attn_path);
    if (train->parsed())
      return cmd_train_toy(final_cfg, steps, lr, per_cluster, out_path, checkpoint_path);
    if (bench->parsed())
      return cmd_bench(bench_kind, scene_opts, final_cfg, bench_sizes, bench_m, bench_repeats,
                       fix_size_spacing, aspects, out_path, bench_json, bench_f32);
    throw UserError("no subcommand given");
  } catch (const UserError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 1;
  }
}
