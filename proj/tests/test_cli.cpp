// Exercises the built binary end to end: exit codes, determinism of the
// dumps, and the documented output schemas.

#include "sp2t/core.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

namespace {

int failures = 0;

void check(bool ok, const std::string& what) {
  if (!ok) {
    ++failures;
    std::cerr << "FAILED: " << what << "\n";
  }
}

int run(const std::string& args) {
  const std::string cmd = std::string(SP2T_CLI_PATH) + " " + args + " > cli_stdout.tmp 2> cli_stderr.tmp";
  const int status = std::system(cmd.c_str());
  if (status == -1) return -1;
  return WEXITSTATUS(status);
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

}  // namespace

int main() {
  // missing input file -> exit 2 and the message names the path
  check(run("sample --input no_such_points.xyz") == 2, "missing file exits 2");
  check(slurp("cli_stderr.tmp").find("no_such_points.xyz") != std::string::npos,
        "error message names the missing path");

  // bad flag -> parse error -> exit 2
  check(run("sample --no-such-flag") == 2, "unknown flag exits 2");

  // fix-num 4 4 4 reports (4+1)^3 = 125 vertices
  check(run("sample --synthetic cube --n 400 --sampler fix-num --fix-num 4 4 4") == 0,
        "fix-num sample runs");
  check(slurp("cli_stdout.tmp").find("proxy count: 125") != std::string::npos,
        "fix-num 4 4 4 reports 125 vertices");

  // spatial-wise with --target lands in the configured range
  check(run("sample --synthetic cube --n 2000 --sampler wise --target 160") == 0,
        "wise sample runs");
  {
    const std::string out = slurp("cli_stdout.tmp");
    const auto pos = out.find("cell count: ");
    check(pos != std::string::npos, "cell count reported");
    const int64_t cells = std::atoll(out.c_str() + pos + 12);
    check(cells >= 120 && cells <= 160, "cell count within [3t/4, t]");
  }

  // forward is bitwise reproducible under a fixed seed
  check(run("forward --synthetic cube --n 300 --target 64 --seed 9 --out fwd_a.csv "
            "--dump-attn attn_a.json") == 0,
        "forward run a");
  check(run("forward --synthetic cube --n 300 --target 64 --seed 9 --out fwd_b.csv "
            "--dump-attn attn_b.json") == 0,
        "forward run b");
  check(slurp("fwd_a.csv") == slurp("fwd_b.csv"), "forward CSV bitwise identical");
  check(slurp("attn_a.json") == slurp("attn_b.json"), "attention JSON bitwise identical");
  {
    // output row count equals the input point count (header + 300 rows)
    const std::string csv = slurp("fwd_a.csv");
    int64_t lines = 0;
    for (char c : csv) {
      if (c == '\n') ++lines;
    }
    check(lines == 301, "forward CSV row count equals the point count");
    const std::string attn = slurp("attn_a.json");
    check(attn.find("\"direction\"") != std::string::npos, "attention JSON has directions");
    check(attn.find("point_to_proxy") != std::string::npos, "attention JSON names p2px");
    check(attn.find("proxy_to_point") != std::string::npos, "attention JSON names px2p");
    check(attn.find("\"pairs\"") != std::string::npos, "attention JSON has pair lists");
  }

  // the attention-variant flags change the forward output
  check(run("forward --synthetic cube --n 300 --target 64 --seed 9 --bias-in-logit "
            "--out fwd_logit.csv") == 0,
        "forward with --bias-in-logit runs");
  check(slurp("fwd_a.csv") != slurp("fwd_logit.csv"), "--bias-in-logit changes the output");
  check(run("forward --synthetic cube --n 300 --target 64 --seed 9 --literal-eq2 "
            "--out fwd_lit.csv") == 0,
        "forward with --literal-eq2 runs");
  check(slurp("fwd_a.csv") != slurp("fwd_lit.csv"), "--literal-eq2 changes the output");

  // untrained model sits at chance level on the balanced classes
  check(run("train-toy --steps 0 --per-cluster 50") == 0, "train-toy steps 0 runs");
  check(slurp("cli_stdout.tmp").find("final accuracy: 0.5") != std::string::npos,
        "steps 0 accuracy is chance level");

  // zero learning rate -> flat loss curve
  check(run("train-toy --steps 5 --lr 0 --per-cluster 50 --out toy_log.csv") == 0,
        "train-toy lr 0 runs");
  {
    std::ifstream log("toy_log.csv");
    std::string header, line;
    std::getline(log, header);
    double first_loss = -1.0;
    bool flat = true;
    while (std::getline(log, line)) {
      const auto c1 = line.find(',');
      const auto c2 = line.find(',', c1 + 1);
      const double loss = std::atof(line.substr(c1 + 1, c2 - c1 - 1).c_str());
      if (first_loss < 0) {
        first_loss = loss;
      } else if (loss != first_loss) {
        flat = false;
      }
    }
    check(flat, "lr 0 keeps the loss flat");
  }

  // checkpoint round trip through the CLI
  check(run("train-toy --steps 3 --per-cluster 50 --checkpoint toy_ckpt.bin") == 0,
        "train-toy writes a checkpoint");
  check(run("forward --synthetic clusters --n 100 --target 64 --checkpoint toy_ckpt.bin "
            "--out fwd_ckpt.csv") == 0,
        "forward consumes the checkpoint");
  // mismatched dimensions are a user error naming the shapes
  check(run("forward --synthetic clusters --n 100 --target 64 --heads 2 --head-dim 4 "
            "--checkpoint toy_ckpt.bin") == 2,
        "checkpoint shape mismatch exits 2");
  check(slurp("cli_stderr.tmp").find("head_dim") != std::string::npos,
        "mismatch message names the dimension");

  // bench samplers emits the documented CSV header
  check(run("bench --bench samplers --n 500 --aspects 1 100 --out sweep.csv") == 0,
        "bench samplers runs");
  check(slurp("sweep.csv").find("sampler,aspect,proxy_count") == 0, "sweep CSV header");

  for (const char* f :
       {"cli_stdout.tmp", "cli_stderr.tmp", "fwd_a.csv", "fwd_b.csv", "attn_a.json",
        "attn_b.json", "fwd_logit.csv", "fwd_lit.csv", "toy_log.csv", "toy_ckpt.bin",
        "fwd_ckpt.csv", "sweep.csv"}) {
    std::remove(f);
  }

  if (failures == 0) {
    std::cout << "test_cli: all checks passed\n";
    return 0;
  }
  std::cerr << "test_cli: " << failures << " checks failed\n";
  return 1;
}
