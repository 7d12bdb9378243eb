// End-to-end tests for the m3 command-line tool, driven as a subprocess.
// The binary path is injected at compile time via M3_BIN.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "m3/dataset.hpp"
#include "m3/png_io.hpp"

#include <json.hpp>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CmdResult {
  int code = -1;
  std::string output;  // combined stdout+stderr
};

int log_counter = 0;

fs::path fresh_dir(const std::string& tag) {
  static int n = 0;
  const fs::path dir =
      fs::temp_directory_path() / ("m3_cli_" + tag + "_" + std::to_string(::getpid()) + "_" +
                                   std::to_string(n++));
  fs::create_directories(dir);
  return dir;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE_MESSAGE(in.good(), "cannot open ", path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

CmdResult run_m3(const std::string& args) {
  static const fs::path log_dir = fresh_dir("logs");
  const fs::path log = log_dir / ("cmd_" + std::to_string(log_counter++) + ".log");
  const std::string cmd =
      "M3_THREADS=1 " + std::string(M3_BIN) + " " + args + " > " + log.string() + " 2>&1";
  const int rc = std::system(cmd.c_str());
  CmdResult res;
  res.code = WIFEXITED(rc) ? WEXITSTATUS(rc) : -2;
  res.output = read_file(log);
  return res;
}

// Drops the final column (wall_seconds) from every row of a CSV.
std::string drop_last_column(const std::string& csv) {
  std::istringstream in(csv);
  std::string out, line;
  while (std::getline(in, line)) {
    const std::size_t comma = line.rfind(',');
    out += line.substr(0, comma) + "\n";
  }
  return out;
}

// Shared fixture: one synthetic dataset and one trained m3 ensemble, built
// once and reused by the eval/saliency cases.
struct Fixture {
  fs::path root;
  std::string manifest;
  fs::path synth_dir, train_dir, ens_dir;

  Fixture() {
    root = fresh_dir("fix");
    synth_dir = root / "synth";
    const CmdResult synth = run_m3("synth --participants 12 --visits 1 --image-size 24 --seed 7"
                                   " --output-dir " + synth_dir.string());
    REQUIRE_MESSAGE(synth.code == 0, synth.output);
    manifest = (synth_dir / "data" / "manifest.csv").string();

    train_dir = root / "train";
    const CmdResult train = run_m3(
        "train --manifest " + manifest +
        " --runs 2 --seed 5 --input-size 16 --batch-size 4"
        " --max-epochs-stage1 2 --max-epochs-finetune 1 --output-dir " + train_dir.string());
    REQUIRE_MESSAGE(train.code == 0, train.output);
    ens_dir = train_dir / "ensemble";
  }
};

const Fixture& fixture() {
  static Fixture fix;
  return fix;
}

}  // namespace

// [TRIVIAL] synth CLI contract: summary line, deterministic manifests, and a
// manifest that the split machinery accepts.
TEST_CASE("synth prints a prevalence summary and repeats bitwise under one seed") {
  const fs::path a = fresh_dir("synth_a"), b = fresh_dir("synth_b"), c = fresh_dir("synth_c");
  const std::string common = "synth --participants 10 --visits 1 --image-size 16";
  const CmdResult ra = run_m3(common + " --seed 3 --output-dir " + a.string());
  CHECK(ra.code == 0);
  CHECK(ra.output.find("prevalence") != std::string::npos);
  CHECK(ra.output.find("10 participants") != std::string::npos);

  const CmdResult rb = run_m3(common + " --seed 3 --output-dir " + b.string());
  CHECK(rb.code == 0);
  CHECK(read_file(a / "data" / "manifest.csv") == read_file(b / "data" / "manifest.csv"));

  const CmdResult rc = run_m3(common + " --seed 4 --output-dir " + c.string());
  CHECK(rc.code == 0);
  CHECK(read_file(a / "data" / "manifest.csv") != read_file(c / "data" / "manifest.csv"));

  // The manifest loads and splits at participant level without error.
  const auto records = m3::load_manifest((a / "data" / "manifest.csv").string());
  CHECK(records.size() == 10);
  const auto split = m3::split_participants(records, 0.7, 0.1, 0.2, 1);
  CHECK(split.by_participant.size() == 10);
}

// [TRIVIAL] Invalid generator parameters are usage errors that name the field.
TEST_CASE("synth rejects prevalence 1.5 with exit 2 naming the field") {
  const fs::path dir = fresh_dir("synth_bad");
  const CmdResult r = run_m3("synth --prevalence 1.5 --output-dir " + dir.string());
  CHECK(r.code == 2);
  CHECK(r.output.find("prevalence") != std::string::npos);
  CHECK_FALSE(fs::exists(dir / "data" / "manifest.csv"));
}

// [TRIVIAL] Config files reject unknown keys; bad flags exit 2; help exits 0.
TEST_CASE("unknown config keys and bad flags are usage errors") {
  const fs::path dir = fresh_dir("badcfg");
  {
    std::ofstream f(dir / "cfg.json");
    f << R"({"train": {"learning_rte": 0.1}})";
  }
  const CmdResult r = run_m3("train --config " + (dir / "cfg.json").string());
  CHECK(r.code == 2);
  CHECK(r.output.find("learning_rte") != std::string::npos);

  {
    std::ofstream f(dir / "cfg2.json");
    f << R"({"thresold": 0.4})";
  }
  CHECK(run_m3("eval --config " + (dir / "cfg2.json").string()).code == 2);

  CHECK(run_m3("train --no-such-flag").code == 2);
  CHECK(run_m3("--help").code == 0);
  CHECK(run_m3("train --help").code == 0);
}

// [TRIVIAL] Training against a missing manifest is a usage error (exit 2).
TEST_CASE("train exits 2 when the manifest does not exist") {
  const fs::path dir = fresh_dir("nomanifest");
  const CmdResult r = run_m3("train --manifest " + (dir / "none.csv").string() +
                             " --output-dir " + dir.string());
  CHECK(r.code == 2);
  CHECK(r.output.find("none.csv") != std::string::npos);
}

// [DERIVED] Repeated-run training lays out per-run artifacts plus an ensemble
// summary, and the summary JSON is internally consistent.
TEST_CASE("train writes run artifacts and an ensemble summary") {
  const Fixture& fix = fixture();
  for (const char* run : {"run_00", "run_01"}) {
    CHECK(fs::exists(fix.ens_dir / run / "checkpoint.ck"));
    CHECK(fs::exists(fix.ens_dir / run / "config.json"));
    CHECK(fs::exists(fix.ens_dir / run / "epochs.csv"));
  }
  CHECK(fs::exists(fix.train_dir / "ensemble_summary.csv"));

  const json js = json::parse(read_file(fix.train_dir / "ensemble.json"));
  CHECK(js["kind"] == "m3");
  CHECK(js["scenario"] == "fused");
  CHECK(js["feature"] == "rpd");
  CHECK(js["partial"] == false);
  CHECK(js["seeds"] == json::array({5, 6}));
  REQUIRE(js["runs"].size() == 2);
  for (const json& run : js["runs"]) {
    CHECK(run["ok"] == true);
    CHECK(run["reports"].size() == 3);  // cfp, faf, fused test reports
    CHECK(run["phases"].size() >= 1);
  }
  // The metrics CSV echoes one row per run and scenario.
  const std::string csv = read_file(fix.train_dir / "ensemble.csv");
  CHECK(csv.find("run,scenario,feature,threshold") == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 2 * 3);
}

// [DERIVED] Rerunning train from its own config echo reproduces every
// artifact bitwise (epochs.csv modulo the wall_seconds column).
TEST_CASE("train rerun from config_echo.json reproduces artifacts bitwise") {
  const Fixture& fix = fixture();
  const fs::path redo = fresh_dir("train_redo");
  const CmdResult r = run_m3("train --config " + (fix.train_dir / "config_echo.json").string() +
                             " --output-dir " + redo.string());
  REQUIRE_MESSAGE(r.code == 0, r.output);

  CHECK(read_file(fix.train_dir / "ensemble.json") == read_file(redo / "ensemble.json"));
  CHECK(read_file(fix.train_dir / "ensemble.csv") == read_file(redo / "ensemble.csv"));
  CHECK(read_file(fix.train_dir / "ensemble_summary.csv") ==
        read_file(redo / "ensemble_summary.csv"));
  for (const char* run : {"run_00", "run_01"}) {
    CHECK(read_file(fix.ens_dir / run / "checkpoint.ck") ==
          read_file(redo / "ensemble" / run / "checkpoint.ck"));
    CHECK(read_file(fix.ens_dir / run / "config.json") ==
          read_file(redo / "ensemble" / run / "config.json"));
    CHECK(drop_last_column(read_file(fix.ens_dir / run / "epochs.csv")) ==
          drop_last_column(read_file(redo / "ensemble" / run / "epochs.csv")));
  }
}

// [DERIVED] From the command line, a fully ablated m3 follows the identical
// optimization path as the explicit baseline kind under the same seed.
TEST_CASE("ablation flags reproduce the non-m3 baseline loss trajectory") {
  const Fixture& fix = fixture();
  const fs::path a = fresh_dir("ablated"), b = fresh_dir("baseline");
  const std::string common = " --manifest " + fix.manifest +
                             " --runs 1 --seed 11 --input-size 16 --batch-size 4"
                             " --max-epochs-stage1 2 --max-epochs-non-m3 2 --scenario cfp";
  const CmdResult ra = run_m3("train --kind m3 --no-attention --no-multitask" + common +
                              " --output-dir " + a.string());
  REQUIRE_MESSAGE(ra.code == 0, ra.output);
  const CmdResult rb = run_m3("train --kind non_m3" + common + " --output-dir " + b.string());
  REQUIRE_MESSAGE(rb.code == 0, rb.output);

  CHECK(drop_last_column(read_file(a / "ensemble" / "run_00" / "epochs.csv")) ==
        drop_last_column(read_file(b / "ensemble" / "run_00" / "epochs.csv")));
  // Same held-out metrics row for row (modulo the kind recorded in configs).
  const json ja = json::parse(read_file(a / "ensemble.json"));
  const json jb = json::parse(read_file(b / "ensemble.json"));
  CHECK(ja["runs"][0]["reports"] == jb["runs"][0]["reports"]);
}

// [DERIVED] eval reports every supported scenario per run, aggregates across
// runs, and supports rank-sum comparison plus bootstrap differential output.
TEST_CASE("eval emits per-scenario reports, comparison, and differential") {
  const Fixture& fix = fixture();
  const fs::path out = fresh_dir("eval");
  const CmdResult r = run_m3("eval --checkpoints " + fix.ens_dir.string() + " --manifest " +
                             fix.manifest + " --split-set all --compare " +
                             fix.ens_dir.string() + " --differential " + fix.ens_dir.string() +
                             " --iterations 25 --output-dir " + out.string());
  REQUIRE_MESSAGE(r.code == 0, r.output);

  const fs::path ev = out / "eval";
  for (const char* run : {"run_00", "run_01"})
    for (const char* s : {"cfp", "faf", "fused"}) {
      CHECK(fs::exists(ev / run / ("predictions_" + std::string(s) + ".csv")));
      CHECK(fs::exists(ev / run / ("roc_" + std::string(s) + ".csv")));
      CHECK(fs::exists(ev / run / ("calibration_" + std::string(s) + ".csv")));
    }

  const json js = json::parse(read_file(ev / "metrics.json"));
  CHECK(js["runs"].size() == 2 * 3);
  CHECK(js["aggregate"].size() == 3);
  for (const char* s : {"cfp", "faf", "fused"}) {
    CHECK(js["aggregate"][s].contains("f1"));
    CHECK(js["aggregate"][s]["f1"].contains("median"));
    // Comparing an ensemble against itself: identical samples, p-value 1.
    CHECK(js["wilcoxon_vs_compare"][s]["f1"]["p"] == 1.0);
    CHECK(js["wilcoxon_vs_compare"][s]["f1"]["exact"] == true);
    // Self-comparison is symmetric on average and fractions partition the
    // records: the four category means sum to 1.
    CHECK(js["differential"][s]["iterations"] == 25);
    double mean_sum = 0.0;
    for (const char* cat : {"both", "neither", "a_only", "b_only"}) {
      const double m = js["differential"][s]["strata"]["all"][cat]["mean"];
      CHECK(m >= 0.0);
      CHECK(m <= 1.0);
      mean_sum += m;
    }
    CHECK(mean_sum == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(fs::exists(ev / ("differential_" + std::string(s) + ".csv")));
  }
  const std::string csv = read_file(ev / "metrics.csv");
  CHECK(csv.find("run,scenario,feature,threshold") == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 2 * 3);
  CHECK(read_file(ev / "aggregate.csv").find("scenario,metric,median,q1,q3,iqr") == 0);
}

// [DERIVED] eval restricted to one scenario only emits that scenario, and a
// single checkpoint file is accepted directly (no aggregate with one run).
TEST_CASE("eval honors --scenario and accepts a single checkpoint file") {
  const Fixture& fix = fixture();
  const fs::path out = fresh_dir("eval_one");
  const CmdResult r =
      run_m3("eval --checkpoints " + (fix.ens_dir / "run_00" / "checkpoint.ck").string() +
             " --manifest " + fix.manifest + " --split-set all --scenario faf --output-dir " +
             out.string());
  REQUIRE_MESSAGE(r.code == 0, r.output);
  const fs::path ev = out / "eval";
  CHECK(fs::exists(ev / "run_00" / "predictions_faf.csv"));
  CHECK_FALSE(fs::exists(ev / "run_00" / "predictions_cfp.csv"));
  const json js = json::parse(read_file(ev / "metrics.json"));
  CHECK(js["runs"].size() == 1);
  CHECK(js["runs"][0]["scenario"] == "faf");
  CHECK(js["aggregate"].empty());  // one run: nothing to aggregate
}

// [TRIVIAL] Mixing checkpoints trained at different input sizes is an error.
TEST_CASE("eval rejects checkpoints with mismatched input sizes") {
  const Fixture& fix = fixture();
  const fs::path small = fresh_dir("train_small");
  const CmdResult t = run_m3("train --manifest " + fix.manifest +
                             " --runs 1 --seed 9 --input-size 24 --batch-size 4"
                             " --max-epochs-stage1 1 --max-epochs-finetune 1 --output-dir " +
                             small.string());
  REQUIRE_MESSAGE(t.code == 0, t.output);

  const fs::path mixed = fresh_dir("mixed_ensemble");
  fs::create_directories(mixed / "run_00");
  fs::create_directories(mixed / "run_01");
  fs::copy_file(fix.ens_dir / "run_00" / "checkpoint.ck", mixed / "run_00" / "checkpoint.ck");
  fs::copy_file(small / "ensemble" / "run_00" / "checkpoint.ck",
                mixed / "run_01" / "checkpoint.ck");

  const fs::path out = fresh_dir("eval_mixed");
  const CmdResult r = run_m3("eval --checkpoints " + mixed.string() + " --manifest " +
                             fix.manifest + " --output-dir " + out.string());
  CHECK(r.code == 1);
  CHECK(r.output.find("input size") != std::string::npos);
}

// [DERIVED] saliency writes one PNG per modality at the model's input size,
// a colorbar, and a stats sidecar; rerunning from the echo is pixel-exact.
TEST_CASE("saliency renders fused heatmaps per modality at input size") {
  const Fixture& fix = fixture();
  const fs::path out = fresh_dir("sal");
  const std::string ck = (fix.ens_dir / "run_00" / "checkpoint.ck").string();
  const CmdResult r = run_m3("saliency --checkpoint " + ck + " --manifest " + fix.manifest +
                             " --scenario fused --ids P00000_right_V0 --ids P00001_right_V0" +
                             " --output-dir " + out.string());
  REQUIRE_MESSAGE(r.code == 0, r.output);

  const fs::path sal = out / "saliency";
  std::vector<fs::path> pngs;
  for (const char* id : {"P00000_right_V0", "P00001_right_V0"})
    for (const char* mod : {"cfp", "faf"})
      pngs.push_back(sal / (std::string(id) + "_fused_" + mod + ".png"));
  for (const fs::path& p : pngs) {
    REQUIRE_MESSAGE(fs::exists(p), p.string());
    m3::Dim h = 0, w = 0;
    m3::read_png_rgb(p.string(), h, w);  // throws unless the file is valid PNG
    CHECK(h == 16);                      // model input size, not source image size
    CHECK(w == 16);
  }
  CHECK(fs::exists(sal / "colorbar.png"));
  const std::string csv = read_file(sal / "saliency.csv");
  CHECK(csv.find("record_id,scenario,modality,source") == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 4);

  // Pixel-exact reproduction from the echoed config.
  const fs::path redo = fresh_dir("sal_redo");
  const CmdResult r2 = run_m3("saliency --config " + (out / "config_echo.json").string() +
                              " --output-dir " + redo.string());
  REQUIRE_MESSAGE(r2.code == 0, r2.output);
  for (const fs::path& p : pngs)
    CHECK(read_file(p) == read_file(redo / "saliency" / p.filename().string()));
  CHECK(read_file(sal / "saliency.csv") == read_file(redo / "saliency" / "saliency.csv"));
}

// [TRIVIAL] Unknown record ids are usage errors that list what exists.
TEST_CASE("saliency exits nonzero for an unknown id and lists known ids") {
  const Fixture& fix = fixture();
  const fs::path out = fresh_dir("sal_bad");
  const CmdResult r =
      run_m3("saliency --checkpoint " + (fix.ens_dir / "run_00" / "checkpoint.ck").string() +
             " --manifest " + fix.manifest + " --ids NO_SUCH_ID --output-dir " + out.string());
  CHECK(r.code == 2);
  CHECK(r.output.find("NO_SUCH_ID") != std::string::npos);
  CHECK(r.output.find("P00000_right_V0") != std::string::npos);  // lists known ids
}
