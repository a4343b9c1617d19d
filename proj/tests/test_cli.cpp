#include "doctest.h"

#include "stormlatent/config.hpp"
#include "stormlatent/serialize.hpp"

#include "json.hpp"

#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <unistd.h>

namespace fs = std::filesystem;
using namespace stormlatent;

namespace {

const fs::path& work_dir() {
  static const fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / ("stormlatent_cli_" + std::to_string(::getpid()));
    fs::remove_all(d);
    fs::create_directories(d);
    std::ofstream(d / "tiny.cfg") << "height = 16\nwidth = 16\ncoarse_height = 8\ncoarse_width = 8\n"
                                     "steps = 13\nhorizon = 8\nval_horizon = 4\nsequences = 10\n"
                                     "latent_channels = 4\ntime_channels = 2\nconst_channels = 2\n"
                                     "feature_channels = 2\nrecon_hidden = 3\nvit_patch = 2\nvit_width = 8\n"
                                     "vit_heads = 2\nvit_blocks = 1\nlpm_blocks = 1\nprojector_patch = 2\n"
                                     "epochs = 1\nwarmup_epochs = 0\nbatch_size = 4\n";
    return d;
  }();
  static const struct Cleanup {
    ~Cleanup() { fs::remove_all(dir); }
  } cleanup;
  return dir;
}

// Runs the CLI in the work directory; returns its exit status. stderr goes to `log`.
int cli(const std::string& args, const std::string& log = "last.log") {
  const std::string cmd = "cd '" + work_dir().string() + "' && '" STORMLATENT_CLI_PATH "' " + args + " > '" + log +
                          ".out' 2> '" + log + "'";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string read(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::map<std::string, std::string> tree(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).generic_string()] = read(e.path());
  return out;
}

std::vector<std::vector<std::string>> csv(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream is(read(p));
  std::string line;
  while (std::getline(is, line)) {
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

std::string last_line(const std::string& log) {
  std::string s = read(work_dir() / log);
  while (!s.empty() && s.back() == '\n') s.pop_back();
  return s.substr(s.rfind('\n') == std::string::npos ? 0 : s.rfind('\n') + 1);
}

// Dataset shared by the eval/predict/train cases.
const fs::path& dataset() {
  static const fs::path d = [] {
    REQUIRE(cli("gen-data --config tiny.cfg --out data") == 0);
    return work_dir() / "data";
  }();
  return d;
}

}  // namespace

TEST_CASE("gen-data is deterministic per seed") {
  REQUIRE(cli("gen-data --config tiny.cfg --seed 7 --sequences 4 --out g1") == 0);
  REQUIRE(cli("gen-data --config tiny.cfg --seed 7 --sequences 4 --out g2") == 0);
  REQUIRE(cli("gen-data --config tiny.cfg --seed 8 --sequences 4 --out g3") == 0);
  const auto a = tree(work_dir() / "g1"), b = tree(work_dir() / "g2"), c = tree(work_dir() / "g3");
  CHECK(a.size() >= 4);
  CHECK(a.count("train/seq_00000.lpta") == 1);
  CHECK(a.count("manifest.json") == 1);
  CHECK(a == b);
  CHECK(a.at("train/seq_00000.lpta") != c.at("train/seq_00000.lpta"));
}

TEST_CASE("manifest records config, seed and artifact digests") {
  const fs::path d = dataset();
  const auto m = nlohmann::json::parse(read(d / "manifest.json"));
  CHECK(m["verb"] == "gen-data");
  CHECK(m["seed"]["data"] == 7);
  std::istringstream cfg(m["config"].get<std::string>());
  CHECK(parse_config(cfg) == parse_config_file(d / "config.txt"));
  CHECK(m["config_file"].get<std::string>() == read(work_dir() / "tiny.cfg"));
  std::size_t n = 0;
  for (const auto& [name, digest] : m["artifacts"].items()) {
    CHECK(digest == file_digest(d / name));
    ++n;
  }
  CHECK(n + 1 == tree(d).size());
}

TEST_CASE("eval of the truth itself scores POD = CSI = 1") {
  const fs::path d = dataset();
  REQUIRE(cli("predict --config tiny.cfg --source truth --data data --split train --out truth") == 0);
  REQUIRE(cli("eval --config tiny.cfg --predictions truth/predictions --data data --split train --out truth_eval --plot") == 0);
  const auto rows = csv(work_dir() / "truth_eval" / "metrics.csv");
  REQUIRE(rows.size() > 1);
  CHECK(rows[0] == std::vector<std::string>{"lead_step", "threshold", "POD", "CSI", "HSS", "FBI"});
  int scored = 0;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    if (rows[i][2] == "NA") continue;
    CHECK(std::stod(rows[i][2]) == 1.0);
    CHECK(std::stod(rows[i][3]) == 1.0);
    CHECK(std::stod(rows[i][5]) == 1.0);
    if (rows[i][1] == "0.2") ++scored;
  }
  CHECK(scored >= 8);
  CHECK(fs::exists(work_dir() / "truth_eval" / "lead_time_scores.svg"));
}

TEST_CASE("train, predict, eval and attribute on a trained run") {
  const fs::path d = dataset();
  const auto before = tree(d);
  REQUIRE(cli("train --config tiny.cfg --data data --out run") == 0);
  for (const char* f : {"best.lpta", "last.lpta", "epochs.csv", "losses.csv", "config.txt", "stats.lpta", "manifest.json"})
    CHECK(fs::exists(work_dir() / "run" / f));
  CHECK(read(work_dir() / "run" / "epochs.csv").rfind("epoch,lr,total_loss,val_csi_0.2,val_pod_0.2\n", 0) == 0);

  REQUIRE(cli("eval --run run --data data --out run_eval") == 0);
  CHECK(csv(work_dir() / "run_eval" / "metrics.csv").size() == 1 + 8 * 5 + 5);
  REQUIRE(cli("predict --run run --data data --out run_pred") == 0);
  const auto archive = load_archive(work_dir() / "run_pred" / "predictions" / "seq_00009.lpta");
  CHECK(archive.size() == 8);
  CHECK(archive.front().first == "lead_01");
  CHECK(archive.front().second.shape() == Shape{1, 16, 16});

  REQUIRE(cli("attribute --run run --data data --samples 1 --steps 4 --out run_attr") == 0);
  const auto rows = csv(work_dir() / "run_attr" / "attribution.csv");
  CHECK(rows.size() == 1 + 15);
  CHECK(rows[0] == std::vector<std::string>{"channel_name", "lead_group", "mean_abs_attr", "rank"});
  CHECK(rows[1][1] == "1-8");
  CHECK(rows[1][3] == "1");

  // inputs untouched
  CHECK(tree(d) == before);
}

TEST_CASE("ablate --suite loss writes one metrics csv per variant from identical seeds") {
  REQUIRE(cli("ablate --suite loss --config tiny.cfg --data data --out ablate_loss --plot") == 0);
  const fs::path out = work_dir() / "ablate_loss";
  const std::vector<std::string> variants{"mae", "weighted_mae", "weighted_mae_plain_ce", "wmce"};
  const RunConfig base = parse_config_file(work_dir() / "tiny.cfg");
  for (const auto& v : variants) {
    CHECK(fs::exists(out / v / "metrics.csv"));
    RunConfig c = parse_config_file(out / v / "config.txt");
    CHECK(to_string(c.train.loss_variant) == v);
    c.train.loss_variant = base.train.loss_variant;
    CHECK(c == base);
  }
  std::map<std::string, int> per_variant;
  for (const auto& row : csv(out / "ablation.csv")) ++per_variant[row[0]];
  CHECK(per_variant.size() == variants.size() + 1);
  for (const auto& v : variants) CHECK(per_variant[v] == 8 * 5);
  CHECK(csv(out / "summary.csv").size() == 1 + 2 * variants.size());
}

TEST_CASE("failures exit with a code and one machine-parsable line") {
  dataset();
  auto check = [](const std::string& args, int code, const std::string& kind) {
    CAPTURE(args);
    CHECK(cli(args, "fail.log") == code);
    const std::string line = last_line("fail.log");
    CHECK(line.rfind("stormlatent: error code=" + std::to_string(code) + " kind=" + kind + " message=\"", 0) == 0);
    CHECK(line.back() == '"');
  };
  check("train --set no_such_key=1 --out f1", 2, "config");
  check("train --set epochs=abc --out f1", 2, "config");
  check("train --config missing.cfg --out f1", 2, "config");
  check("ablate --suite nope --out f1", 2, "config");
  check("train", 2, "config");
  check("frobnicate", 2, "config");
  check("train --config tiny.cfg --data data --out data/inside", 2, "config");
  check("eval --run no_such_run --out f1", 3, "data");
  check("train --config tiny.cfg --data no_such_data --out f1", 3, "data");
  check("train --config tiny.cfg --data data --set height=32 --set width=32 --out f1", 3, "data");
  check("train --config tiny.cfg --data data --set base_lr=1e300 --set grad_clip=0 --out f2", 4, "numeric");
  CHECK(!fs::exists(work_dir() / "data" / "inside"));
  CHECK(cli("--help") == 0);
}
