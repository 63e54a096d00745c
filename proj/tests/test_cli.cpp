#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;

namespace {

struct RunResult {
  int exit_code;
  std::string output;
};

RunResult run_cli(const std::string& args) {
  const fs::path out = fs::temp_directory_path() / "cape_cli_out.txt";
  const std::string cmd = std::string(CAPE_CLI_PATH) + " " + args + " > " + out.string() + " 2>&1";
  const int raw = std::system(cmd.c_str());
  std::ifstream is(out);
  std::stringstream ss;
  ss << is.rdbuf();
  fs::remove(out);
  return {WEXITSTATUS(raw), ss.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

// Parses "step N loss L ..." lines from the training log.
double loss_at_step(const std::string& log, int step) {
  std::istringstream is(log);
  std::string word;
  while (is >> word) {
    if (word != "step") continue;
    int s;
    is >> s >> word;  // "loss"
    double l;
    is >> l;
    if (s == step) return l;
  }
  return -1.0;
}

double last_logged_loss(const std::string& log) {
  std::istringstream is(log);
  std::string word;
  double last = -1.0;
  while (is >> word) {
    if (word != "step") continue;
    int s;
    is >> s >> word;
    double l;
    is >> l;
    (void)s;
    last = l;
  }
  return last;
}

const fs::path g_dir = fs::temp_directory_path() / "cape_cli_test";

}  // namespace

TEST_CASE("verify subcommand is self-contained and reports per property") {
  const auto r = run_cli("verify --seed 5");
  CHECK(r.exit_code == 0);
  CHECK(r.output.find("[PASS]") != std::string::npos);
  CHECK(r.output.find("FAIL") == std::string::npos);
  // One line per property plus the summary.
  int lines = 0;
  for (char c : r.output) {
    if (c == '\n') ++lines;
  }
  CHECK(lines >= 12);
}

TEST_CASE("datagen writes the dataset and a resolved manifest") {
  fs::create_directories(g_dir);
  const auto ds = (g_dir / "data.bin").string();
  const auto r = run_cli("datagen --out " + ds + " --scenes 10 --views 12 --side 16 --seed 21");
  CHECK(r.exit_code == 0);
  CHECK(fs::exists(ds));
  CHECK(fs::exists(ds + ".manifest.txt"));
  const std::string manifest = slurp(ds + ".manifest.txt");
  CHECK(manifest.find("command = datagen") != std::string::npos);
  CHECK(manifest.find("seed = 21") != std::string::npos);

  // Same seed, byte-identical output.
  const auto ds2 = (g_dir / "data2.bin").string();
  run_cli("datagen --out " + ds2 + " --scenes 10 --views 12 --side 16 --seed 21");
  CHECK(slurp(ds) == slurp(ds2));
}

TEST_CASE("train smoke run: loss falls below half of its step-10 value") {
  const auto ds = (g_dir / "data.bin").string();
  REQUIRE(fs::exists(ds));
  const auto ckpt = (g_dir / "model.ckpt").string();
  const auto r = run_cli("train --data " + ds + " --out " + ckpt +
                         " --steps 500 --scenes-per-step 1 --channels 8 --token-dim 16 --heads 2"
                         " --log-every 10 --seed 33");
  CHECK(r.exit_code == 0);
  CHECK(fs::exists(ckpt));
  CHECK(fs::exists(ckpt + ".manifest.txt"));
  const double at10 = loss_at_step(r.output, 10);
  const double at_end = last_logged_loss(r.output);
  CHECK(at10 > 0);
  CHECK(at_end > 0);
  CHECK(at_end < 0.5 * at10);
}

TEST_CASE("sample produces images and a manifest") {
  const auto ds = (g_dir / "data.bin").string();
  const auto ckpt = (g_dir / "model.ckpt").string();
  REQUIRE(fs::exists(ckpt));
  const auto out_dir = (g_dir / "samples").string();
  const auto r = run_cli("sample --ckpt " + ckpt + " --data " + ds +
                         " --scene 0 --n-refs 3 --steps 6 --min-targets 2 --out " + out_dir +
                         " --seed 7");
  CHECK(r.exit_code == 0);
  CHECK(fs::exists(out_dir + "/view_10.ppm"));
  CHECK(fs::exists(out_dir + "/view_11.ppm"));
  CHECK(fs::exists(out_dir + "/run.manifest.txt"));

  // Autoregressive mode also runs.
  const auto r2 = run_cli("sample --ckpt " + ckpt + " --data " + ds +
                          " --scene 1 --n-refs 2 --steps 4 --min-targets 2 --mode autoregressive"
                          " --target-views 5 --out " +
                          out_dir + "_ar --seed 7");
  CHECK(r2.exit_code == 0);
  CHECK(fs::exists(out_dir + "_ar/view_5.ppm"));
}

TEST_CASE("eval reports every requested reference count") {
  const auto ds = (g_dir / "data.bin").string();
  const auto ckpt = (g_dir / "model.ckpt").string();
  REQUIRE(fs::exists(ckpt));
  const auto report = (g_dir / "report.csv").string();
  const auto r = run_cli("eval --ckpt " + ckpt + " --data " + ds +
                         " --refs 1,3 --targets-per-scene 2 --steps 5 --max-scenes 3 --out " +
                         report + " --seed 9");
  CHECK(r.exit_code == 0);
  CHECK(r.output.find("n_refs= 1") != std::string::npos);
  CHECK(r.output.find("n_refs= 3") != std::string::npos);
  const std::string csv = slurp(report);
  CHECK(csv.find("scene,n_refs,view,psnr_db,ssim") != std::string::npos);
  CHECK(csv.find("0,1,0,") != std::string::npos);
  CHECK(csv.find("0,3,0,") != std::string::npos);
  CHECK(fs::exists(report + ".manifest.txt"));
}

TEST_CASE("bench reports kernel throughput and cost counters") {
  const auto out = (g_dir / "bench.txt").string();
  const auto r = run_cli("bench --out " + out + " --seed 3");
  CHECK(r.exit_code == 0);
  const std::string report = slurp(out);
  CHECK(report.find("cape_4dof_ns_per_token") != std::string::npos);
  CHECK(report.find("direct 4 ") != std::string::npos);
  CHECK(report.find("autoregressive 4 ") != std::string::npos);
}

TEST_CASE("config file values are overridden by flags") {
  const auto cfg_path = (g_dir / "run.cfg").string();
  {
    std::ofstream os(cfg_path);
    os << "# run configuration\n";
    os << "[datagen]\n";
    os << "scenes = 4\n";
    os << "views = 6\n";
    os << "side = 16\n";
  }
  const auto ds = (g_dir / "cfg_data.bin").string();
  const auto r = run_cli("--config " + cfg_path + " datagen --out " + ds + " --scenes 2 --seed 1");
  CHECK(r.exit_code == 0);
  const std::string manifest = slurp(ds + ".manifest.txt");
  CHECK(manifest.find("scenes = 2") != std::string::npos);         // flag wins
  CHECK(manifest.find("views_per_scene = 6") != std::string::npos);  // file value honored
}

TEST_CASE("missing inputs and bad configs give actionable errors") {
  const auto r = run_cli("train --data /nonexistent/ds.bin --out /tmp/x.ckpt --steps 1");
  CHECK(r.exit_code != 0);
  CHECK(r.output.find("error:") != std::string::npos);
  CHECK(r.output.find("cannot open dataset") != std::string::npos);

  const auto ds = (g_dir / "data.bin").string();
  const auto r2 = run_cli("train --data " + ds +
                          " --out /tmp/x.ckpt --steps 1 --channels 8 --token-dim 20 --heads 2");
  CHECK(r2.exit_code != 0);
  CHECK(r2.output.find("error:") != std::string::npos);

  const auto r3 = run_cli("sample --ckpt /nonexistent.ckpt --data " + ds);
  CHECK(r3.exit_code != 0);

  const auto r4 = run_cli("eval --ckpt /nonexistent.ckpt --data " + ds + " --out /tmp/r.csv");
  CHECK(r4.exit_code != 0);
}
