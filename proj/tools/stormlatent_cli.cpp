// stormlatent: data generation, training, evaluation, prediction,
// attribution and ablation runs.
//
// Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
// Failures print one line to stderr:
//   stormlatent: error code=<n> kind=<config|data|numeric> message="<text>"

#include "stormlatent/ablation.hpp"
#include "stormlatent/attribution.hpp"
#include "stormlatent/serialize.hpp"
#include "stormlatent/train.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using namespace stormlatent;
using json = nlohmann::json;

namespace {

enum ExitCode { kOk = 0, kConfigError = 2, kDataError = 3, kNumericError = 4 };

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out;
  bool plot = false;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config_path, "config file (key = value lines)");
  sub->add_option("--set", c.overrides, "override one key, e.g. --set epochs=2 (repeatable)");
  sub->add_option("--out", c.out, "output directory; nothing is written elsewhere")->required();
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t") - b + 1);
}

std::string read_text(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw ConfigError("cannot open config file " + p.string(), 0);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void apply_overrides(RunConfig& cfg, const std::vector<std::string>& overrides) {
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + o + "'", 0);
    set_config_value(cfg, trim(o.substr(0, eq)), trim(o.substr(eq + 1)));
  }
}

// Config file (or toy defaults) with overrides applied, validated. The file
// text and the resolved config are echoed to stderr.
RunConfig resolve_config(const Common& c, std::optional<RunConfig> base = std::nullopt) {
  RunConfig cfg = base ? *base : RunConfig::toy_defaults();
  if (!c.config_path.empty()) {
    if (base) throw ConfigError("--config cannot be combined with --run; use --set", 0);
    std::cerr << "# config file " << c.config_path << "\n" << read_text(c.config_path);
    cfg = parse_config_file(c.config_path);
  }
  apply_overrides(cfg, c.overrides);
  cfg.validate();
  std::cerr << "# resolved config\n";
  write_config(std::cerr, cfg);
  return cfg;
}

bool is_within(const fs::path& child, const fs::path& parent) {
  const auto c = fs::weakly_canonical(child), p = fs::weakly_canonical(parent);
  auto ci = c.begin();
  for (auto pi = p.begin(); pi != p.end(); ++pi, ++ci)
    if (ci == c.end() || *ci != *pi) return false;
  return true;
}

// Creates --out after checking it does not overlap any input.
fs::path make_out(const std::string& out, const std::vector<std::string>& inputs) {
  for (const auto& in : inputs) {
    if (in.empty()) continue;
    if (is_within(out, in) || is_within(in, out))
      throw ConfigError("--out " + out + " overlaps input " + in, 0);
  }
  fs::create_directories(out);
  return out;
}

std::vector<fs::path> files_under(const fs::path& dir) {
  std::vector<fs::path> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out.push_back(fs::relative(e.path(), dir));
  std::sort(out.begin(), out.end());
  return out;
}

json digests(const fs::path& dir, const std::vector<fs::path>& skip = {}) {
  json j = json::object();
  for (const auto& f : files_under(dir))
    if (std::find(skip.begin(), skip.end(), f) == skip.end()) j[f.generic_string()] = file_digest(dir / f);
  return j;
}

struct Manifest {
  std::string verb;
  RunConfig config;
  std::vector<std::string> overrides;
  std::string config_file_text;
  json flags = json::object();
  json inputs = json::object();

  void add_input(const std::string& name, const fs::path& path) {
    if (fs::is_directory(path)) {
      inputs[name] = {{"path", path.string()}, {"files", digests(path)}};
    } else {
      inputs[name] = {{"path", path.string()}, {"digest", file_digest(path)}};
    }
  }

  void write(const fs::path& out) const {
    std::ostringstream cfg;
    write_config(cfg, config);
    json j;
    j["tool"] = "stormlatent";
    j["verb"] = verb;
    j["seed"] = {{"data", config.data.seed}, {"train", config.train.seed}};
    j["config"] = cfg.str();
    j["config_file"] = config_file_text;
    j["overrides"] = overrides;
    j["flags"] = flags;
    j["inputs"] = inputs;
    j["artifacts"] = digests(out, {"manifest.json"});
    std::ofstream os(out / "manifest.json", std::ios::binary);
    os << j.dump(2) << "\n";
  }
};

Manifest start_manifest(const std::string& verb, const Common& c, const RunConfig& cfg) {
  Manifest m;
  m.verb = verb;
  m.config = cfg;
  m.overrides = c.overrides;
  if (!c.config_path.empty()) m.config_file_text = read_text(c.config_path);
  return m;
}

void write_config_file(const fs::path& path, const RunConfig& cfg) {
  std::ofstream os(path, std::ios::binary);
  write_config(os, cfg);
}

// ---- datasets ---------------------------------------------------------------------------

struct NamedSplit {
  std::vector<std::string> names;
  std::vector<Sequence> sequences;
};

const std::vector<std::size_t>& pick(const SplitIndices& idx, const std::string& split) {
  if (split == "train") return idx.train;
  if (split == "val") return idx.val;
  if (split == "test") return idx.test;
  throw ConfigError("unknown split '" + split + "' (expected train, val or test)", 0);
}

std::string seq_name(std::size_t i) {
  std::ostringstream s;
  s << "seq_" << std::setw(5) << std::setfill('0') << i;
  return s.str();
}

void check_grid(const std::vector<Sequence>& seqs, const RunConfig& cfg, const std::string& where) {
  for (const auto& s : seqs) {
    if (s.samples.empty()) throw DataError(where + ": empty sequence");
    const Tensor& q = s.samples.front().qpe_radar;
    if (q.dim(1) != cfg.model.height || q.dim(2) != cfg.model.width)
      throw DataError(where + ": grid " + std::to_string(q.dim(1)) + "x" + std::to_string(q.dim(2)) +
                      " differs from configured " + std::to_string(cfg.model.height) + "x" +
                      std::to_string(cfg.model.width));
    if (s.samples.front().has_satellite() != cfg.model.use_satellite)
      throw DataError(where + ": satellite presence differs from include_satellite");
    if (s.size() < cfg.generator.steps) throw DataError(where + ": sequence shorter than configured steps");
  }
}

NamedSplit load_named_split(const std::string& data_dir, const RunConfig& cfg, const std::string& split) {
  NamedSplit out;
  if (data_dir.empty()) {
    const auto all = generate_sequences(cfg.data.seed, cfg.data.sequences, cfg.generator);
    for (auto i : pick(split_by_month(all.size(), static_cast<std::size_t>(cfg.data.month_size)), split)) {
      out.names.push_back(seq_name(i));
      out.sequences.push_back(all[i]);
    }
    return out;
  }
  pick({}, split);
  const fs::path dir = fs::path(data_dir) / split;
  if (!fs::is_directory(dir)) throw DataError("split directory not found: " + dir.string());
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ".lpta") out.names.push_back(e.path().stem().string());
  std::sort(out.names.begin(), out.names.end());
  for (const auto& n : out.names) out.sequences.push_back(read_sequence(dir / n));
  if (out.sequences.empty()) throw DataError("no sequences in " + dir.string());
  check_grid(out.sequences, cfg, dir.string());
  return out;
}

Splits load_splits(const std::string& data_dir, const RunConfig& cfg) {
  if (data_dir.empty()) return generate_splits(cfg);
  Splits s;
  s.train = load_named_split(data_dir, cfg, "train").sequences;
  s.val = load_named_split(data_dir, cfg, "val").sequences;
  s.test = load_named_split(data_dir, cfg, "test").sequences;
  return s;
}

TrainedModel load_trained(const std::string& run, const std::string& checkpoint) {
  for (const auto& f : {std::string("config.txt"), std::string("stats.lpta"), checkpoint})
    if (!fs::is_regular_file(fs::path(run) / f)) throw DataError("run directory " + run + " lacks " + f);
  return load_run(run, checkpoint);
}

// ---- plots --------------------------------------------------------------------------------

struct Curve {
  std::string name;
  std::vector<std::optional<double>> values;  // per lead
};

// POD and CSI at the first threshold vs lead step, one line per curve.
void write_score_svg(const fs::path& path, const std::string& title, const std::vector<Curve>& pod,
                     const std::vector<Curve>& csi) {
  const double w = 360, h = 260, left = 45, top = 35, pw = 290, ph = 180;
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  std::ofstream os(path);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << 2 * w << "\" height=\"" << h + 20
     << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  os << "<text x=\"10\" y=\"15\">" << title << "</text>\n";
  auto panel = [&](double x0, const std::string& label, const std::vector<Curve>& curves) {
    std::size_t leads = 1;
    for (const auto& c : curves) leads = std::max(leads, c.values.size());
    os << "<rect x=\"" << x0 + left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
       << "\" fill=\"none\" stroke=\"#444\"/>\n";
    os << "<text x=\"" << x0 + left << "\" y=\"" << top - 5 << "\">" << label << "</text>\n";
    for (double v : {0.0, 0.5, 1.0})
      os << "<text x=\"" << x0 + 15 << "\" y=\"" << top + ph * (1 - v) + 4 << "\">" << v << "</text>\n";
    os << "<text x=\"" << x0 + left + pw / 2 - 20 << "\" y=\"" << top + ph + 18 << "\">lead step</text>\n";
    for (std::size_t k = 0; k < curves.size(); ++k) {
      const char* color = colors[k % 6];
      std::string pts;
      for (std::size_t l = 0; l < curves[k].values.size(); ++l) {
        if (!curves[k].values[l]) continue;
        const double x = x0 + left + (leads > 1 ? pw * static_cast<double>(l) / static_cast<double>(leads - 1) : 0);
        const double y = top + ph * (1 - std::clamp(*curves[k].values[l], 0.0, 1.0));
        pts += std::to_string(x) + "," + std::to_string(y) + " ";
      }
      os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"" << pts << "\"/>\n";
      os << "<text x=\"" << x0 + left + 5 << "\" y=\"" << top + 14 * (k + 1) << "\" fill=\"" << color << "\">"
         << curves[k].name << "</text>\n";
    }
  };
  panel(0, "POD", pod);
  panel(w, "CSI", csi);
  os << "</svg>\n";
}

Curve curve(const std::string& name, const Evaluation& e, std::optional<double> Scores::*which) {
  Curve c{name, {}};
  for (const auto& r : e.rows)
    if (r.threshold == e.thresholds.front()) c.values.push_back(r.s.*which);
  return c;
}

void write_metrics(const fs::path& path, const Evaluation& e) {
  std::ofstream os(path, std::ios::binary);
  write_metrics_csv(os, e);
}

void print_summary(const Evaluation& e) {
  const double t = e.thresholds.front();
  const auto pod = mean_score(e, t, 1, static_cast<Index>(e.tables.size()), &Scores::pod);
  const auto csi = mean_score(e, t, 1, static_cast<Index>(e.tables.size()), &Scores::csi);
  std::cout << "threshold=" << t << " mean_pod=" << (pod ? std::to_string(*pod) : "NA")
            << " mean_csi=" << (csi ? std::to_string(*csi) : "NA") << "\n";
}

// ---- verbs --------------------------------------------------------------------------------

struct GenData {
  Common c;
  std::optional<std::uint64_t> seed;
  std::optional<Index> sequences;
};

int run_gen_data(const GenData& g) {
  Common c = g.c;
  if (g.seed) c.overrides.push_back("data_seed=" + std::to_string(*g.seed));
  if (g.sequences) c.overrides.push_back("sequences=" + std::to_string(*g.sequences));
  const RunConfig cfg = resolve_config(c);
  const fs::path out = make_out(c.out, {});
  const auto all = generate_sequences(cfg.data.seed, cfg.data.sequences, cfg.generator);
  const SplitIndices idx = split_by_month(all.size(), static_cast<std::size_t>(cfg.data.month_size));
  write_split(out / "train", all, idx.train);
  write_split(out / "val", all, idx.val);
  write_split(out / "test", all, idx.test);
  write_config_file(out / "config.txt", cfg);
  start_manifest("gen-data", c, cfg).write(out);
  std::cout << "train=" << idx.train.size() << " val=" << idx.val.size() << " test=" << idx.test.size() << "\n";
  return kOk;
}

struct Train {
  Common c;
  std::string data;
};

int run_train(const Train& t) {
  const RunConfig cfg = resolve_config(t.c);
  const fs::path out = make_out(t.c.out, {t.data});
  const Splits splits = load_splits(t.data, cfg);
  FitOptions options;
  options.out_dir = out;
  options.on_epoch = [](const EpochLog& l) {
    std::cerr << "epoch " << l.epoch << " lr " << l.lr << " loss " << l.total_loss << " val_csi "
              << (l.val_csi ? std::to_string(*l.val_csi) : "NA") << "\n";
  };
  const RunResult r = train_run(cfg, splits, options);
  Manifest m = start_manifest("train", t.c, cfg);
  if (!t.data.empty()) m.add_input("data", t.data);
  m.write(out);
  std::cout << "best_epoch=" << r.fit.best_epoch << " train_sequences=" << r.selected_sequences
            << " step_macs=" << r.trained.model->step_macs() << "\n";
  return kOk;
}

struct Eval {
  Common c;
  std::string run, predictions, data, split = "test", checkpoint = "best.lpta";
};

NamedTensors read_predictions(const fs::path& p) {
  if (!fs::exists(p)) throw DataError("missing prediction archive " + p.string());
  return load_archive(p);
}

std::string lead_name(Index l) {
  std::ostringstream s;
  s << "lead_" << std::setw(2) << std::setfill('0') << l;
  return s.str();
}

int run_eval(const Eval& e) {
  if (e.run.empty() == e.predictions.empty()) throw ConfigError("eval needs exactly one of --run or --predictions", 0);
  Evaluation result;
  RunConfig cfg;
  Manifest m;
  fs::path out;
  if (!e.run.empty()) {
    TrainedModel trained = load_trained(e.run, e.checkpoint);
    cfg = resolve_config(e.c, trained.config);
    out = make_out(e.c.out, {e.run, e.data});
    const NamedSplit split = load_named_split(e.data, cfg, e.split);
    result = evaluate(*trained.model, prepare(split.sequences, trained.stats), trained.stats, cfg.eval.horizon,
                      cfg.eval.thresholds, cfg.eval.hss_standard);
    m = start_manifest("eval", e.c, cfg);
    m.add_input("run", e.run);
  } else {
    if (e.data.empty()) throw ConfigError("eval --predictions needs --data", 0);
    cfg = resolve_config(e.c);
    out = make_out(e.c.out, {e.predictions, e.data});
    const NamedSplit split = load_named_split(e.data, cfg, e.split);
    std::vector<std::vector<Array>> pred, truth;
    for (std::size_t i = 0; i < split.names.size(); ++i) {
      const NamedTensors p = read_predictions(fs::path(e.predictions) / (split.names[i] + ".lpta"));
      const Sequence& s = split.sequences[i];
      pred.emplace_back();
      truth.emplace_back();
      for (Index l = 1; has_tensor(p, lead_name(l)); ++l) {
        if (kForecastOrigin + l >= s.size()) throw DataError(split.names[i] + ": prediction beyond sequence end");
        const Tensor& y = s.samples[static_cast<std::size_t>(kForecastOrigin + l)].target;
        const Tensor& f = find_tensor(p, lead_name(l));
        if (f.shape() != y.shape()) throw DataError(split.names[i] + ": " + lead_name(l) + " shape mismatch");
        pred.back().push_back(f.value());
        truth.back().push_back(y.value());
      }
      if (pred.back().empty()) throw DataError(split.names[i] + ": no lead_NN entries");
      if (pred.back().size() != pred.front().size()) throw DataError(split.names[i] + ": lead count differs");
    }
    result = evaluate_run(pred, truth, cfg.eval.thresholds, cfg.eval.hss_standard);
    m = start_manifest("eval", e.c, cfg);
    m.add_input("predictions", e.predictions);
  }
  if (!e.data.empty()) m.add_input("data", e.data);
  m.flags = {{"split", e.split}, {"checkpoint", e.checkpoint}};
  write_metrics(out / "metrics.csv", result);
  if (e.c.plot)
    write_score_svg(out / "lead_time_scores.svg", "eval", {curve("forecast", result, &Scores::pod)},
                    {curve("forecast", result, &Scores::csi)});
  m.write(out);
  print_summary(result);
  return kOk;
}

struct Predict {
  Common c;
  std::string run, data, split = "test", checkpoint = "best.lpta", source = "model";
};

int run_predict(const Predict& p) {
  if (p.source != "model" && p.source != "truth") throw ConfigError("--source must be model or truth", 0);
  RunConfig cfg;
  std::optional<TrainedModel> trained;
  if (p.source == "model") {
    if (p.run.empty()) throw ConfigError("predict --source model needs --run", 0);
    trained = load_trained(p.run, p.checkpoint);
    cfg = resolve_config(p.c, trained->config);
  } else {
    cfg = resolve_config(p.c);
  }
  const fs::path out = make_out(p.c.out, {p.run, p.data});
  const NamedSplit split = load_named_split(p.data, cfg, p.split);
  std::vector<std::vector<Array>> pred, truth;
  if (trained) {
    forecast_all(*trained->model, prepare(split.sequences, trained->stats), trained->stats, cfg.eval.horizon, pred,
                 truth);
  } else {
    for (const auto& s : split.sequences) {
      if (s.size() < kForecastOrigin + cfg.eval.horizon + 1) throw DataError("sequence too short for horizon");
      pred.emplace_back();
      for (Index l = 1; l <= cfg.eval.horizon; ++l)
        pred.back().push_back(s.samples[static_cast<std::size_t>(kForecastOrigin + l)].target.value());
    }
  }
  fs::create_directories(out / "predictions");
  const Shape shape{1, cfg.model.height, cfg.model.width};
  for (std::size_t i = 0; i < pred.size(); ++i) {
    NamedTensors archive;
    for (std::size_t l = 0; l < pred[i].size(); ++l)
      archive.emplace_back(lead_name(static_cast<Index>(l + 1)), Tensor::from(shape, pred[i][l]));
    save_archive(out / "predictions" / (split.names[i] + ".lpta"), archive);
  }
  Manifest m = start_manifest("predict", p.c, cfg);
  if (!p.run.empty()) m.add_input("run", p.run);
  if (!p.data.empty()) m.add_input("data", p.data);
  m.flags = {{"split", p.split}, {"checkpoint", p.checkpoint}, {"source", p.source}};
  m.write(out);
  std::cout << "sequences=" << pred.size() << " leads=" << cfg.eval.horizon << "\n";
  return kOk;
}

struct Attribute {
  Common c;
  std::string run, data, split = "test", checkpoint = "best.lpta";
  Index samples = 4;
  Index steps = 128;
};

int run_attribute(const Attribute& a) {
  if (a.samples < 1 || a.steps < 1) throw ConfigError("--samples and --steps must be >= 1", 0);
  TrainedModel trained = load_trained(a.run, a.checkpoint);
  const RunConfig cfg = resolve_config(a.c, trained.config);
  const fs::path out = make_out(a.c.out, {a.run, a.data});
  const NamedSplit split = load_named_split(a.data, cfg, a.split);

  // Sequences with an event first, in split order.
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < split.sequences.size(); ++i)
    if (split.sequences[i].has_event(kEventThreshold)) order.push_back(i);
  for (std::size_t i = 0; i < split.sequences.size(); ++i)
    if (!split.sequences[i].has_event(kEventThreshold)) order.push_back(i);
  order.resize(std::min(order.size(), static_cast<std::size_t>(a.samples)));

  std::vector<LeadGroup> groups;
  for (const auto& g : kDefaultLeadGroups)
    if (g.last <= cfg.eval.horizon) groups.push_back(g);
  if (groups.empty()) groups.push_back({1, cfg.eval.horizon});

  std::vector<AttributionMap> maps;
  std::ofstream comp(out / "completeness.csv", std::ios::binary);
  comp << "sequence,lead_group,target,baseline_target,attribution_sum,relative_error\n" << std::setprecision(10);
  for (std::size_t i : order) {
    const auto prepared = prepare(std::span(&split.sequences[i], 1), trained.stats);
    const std::span<const MultiSourceSample> observed(prepared[0].norm.data(), kForecastOrigin + 1);
    for (const auto& g : groups) {
      AttributionMap map = attribute(*trained.model, observed, g, cfg.model, trained.stats.tau_norm(), a.steps);
      comp << split.names[i] << ',' << g.label() << ',' << map.target << ',' << map.baseline_target << ','
           << map.total() << ',' << map.completeness_error() << '\n';
      maps.push_back(std::move(map));
    }
  }
  comp.close();
  {
    std::ofstream os(out / "attribution.csv", std::ios::binary);
    write_attribution_csv(os, aggregate_attribution(maps));
  }
  Manifest m = start_manifest("attribute", a.c, cfg);
  m.add_input("run", a.run);
  if (!a.data.empty()) m.add_input("data", a.data);
  m.flags = {{"split", a.split}, {"checkpoint", a.checkpoint}, {"samples", a.samples}, {"steps", a.steps}};
  m.write(out);
  double worst = 0;
  for (const auto& map : maps) worst = std::max(worst, map.completeness_error());
  std::cout << "maps=" << maps.size() << " max_completeness_error=" << worst << "\n";
  return kOk;
}

struct Ablate {
  Common c;
  std::string suite, data, checkpoint = "last";
  Index eval_sequences = 0;
};

int run_ablate(const Ablate& a) {
  const RunConfig cfg = resolve_config(a.c);
  const CheckpointChoice choice = checkpoint_choice_from_string(a.checkpoint);
  const auto variants = ablation_variants(a.suite, cfg);
  if (a.eval_sequences < 0) throw ConfigError("--eval-sequences must be >= 0", 0);
  const fs::path out = make_out(a.c.out, {a.data});
  const Splits splits = load_splits(a.data, cfg);
  std::vector<Sequence> eval_set = splits.test;
  for (auto& s : held_out_sequences(cfg, a.eval_sequences)) eval_set.push_back(std::move(s));
  if (eval_set.empty()) throw DataError("empty evaluation set");

  std::vector<VariantSummary> runs;
  for (const auto& v : variants) {
    std::cerr << "variant " << v.name << "\n";
    runs.push_back(run_variant(v, splits, eval_set, out / v.name, [&](const EpochLog& l) {
      std::cerr << v.name << " epoch " << l.epoch << " loss " << l.total_loss << "\n";
    }));
    write_metrics(out / v.name / "metrics.csv", runs.back().at(choice));
  }
  {
    std::ofstream os(out / "ablation.csv", std::ios::binary);
    write_ablation_csv(os, runs, choice);
  }
  {
    std::ofstream os(out / "summary.csv", std::ios::binary);
    write_ablation_summary(os, runs);
  }
  if (a.c.plot) {
    std::vector<Curve> pod, csi;
    for (const auto& r : runs) {
      pod.push_back(curve(r.name, r.at(choice), &Scores::pod));
      csi.push_back(curve(r.name, r.at(choice), &Scores::csi));
    }
    write_score_svg(out / "lead_time_scores.svg", "ablate " + a.suite, pod, csi);
  }
  Manifest m = start_manifest("ablate", a.c, cfg);
  if (!a.data.empty()) m.add_input("data", a.data);
  m.flags = {{"suite", a.suite}, {"checkpoint", a.checkpoint}, {"eval_sequences", a.eval_sequences}};
  m.write(out);
  for (const auto& r : runs) {
    const Evaluation& e = r.at(choice);
    std::cout << r.name << " pod_1_6=" << lead_mean(e, &Scores::pod, 1, 6)
              << " csi_1_6=" << lead_mean(e, &Scores::csi, 1, 6) << " step_macs=" << r.step_macs << "\n";
  }
  return kOk;
}

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  std::replace(s.begin(), s.end(), '"', '\'');
  return s;
}

int fail(int code, const char* kind, const std::string& message) {
  std::cerr << "stormlatent: error code=" << code << " kind=" << kind << " message=\"" << one_line(message) << "\"\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"stormlatent: latent-space precipitation nowcasting on synthetic data\n"
               "Environment: STORMLATENT_THREADS caps worker threads."};
  app.require_subcommand(1);

  GenData gen;
  auto* g = app.add_subcommand("gen-data", "generate a synthetic dataset (train/val/test splits)");
  add_common(g, gen.c);
  g->add_option("--seed", gen.seed, "dataset seed (data_seed)");
  g->add_option("--sequences", gen.sequences, "number of sequences");

  Train train;
  auto* t = app.add_subcommand("train", "train a forecaster; writes checkpoints and epoch logs");
  add_common(t, train.c);
  t->add_option("--data", train.data, "dataset directory from gen-data (default: generate from config)");

  Eval eval;
  auto* e = app.add_subcommand("eval", "score a trained run or a predictions directory");
  add_common(e, eval.c);
  e->add_option("--run", eval.run, "trained run directory");
  e->add_option("--predictions", eval.predictions, "predictions directory from predict");
  e->add_option("--data", eval.data, "dataset directory (default: generate from config)");
  e->add_option("--split", eval.split, "train, val or test")->capture_default_str();
  e->add_option("--checkpoint", eval.checkpoint, "checkpoint file in the run directory")->capture_default_str();
  e->add_flag("--plot", eval.c.plot, "also write lead_time_scores.svg");

  Predict predict;
  auto* p = app.add_subcommand("predict", "write forecast archives (mm/h) per sequence");
  add_common(p, predict.c);
  p->add_option("--run", predict.run, "trained run directory");
  p->add_option("--data", predict.data, "dataset directory (default: generate from config)");
  p->add_option("--split", predict.split, "train, val or test")->capture_default_str();
  p->add_option("--checkpoint", predict.checkpoint, "checkpoint file in the run directory")->capture_default_str();
  p->add_option("--source", predict.source, "model, or truth for the observed future itself")->capture_default_str();

  Attribute attr;
  auto* at = app.add_subcommand("attribute", "integrated-gradients attribution by input channel and lead group");
  add_common(at, attr.c);
  at->add_option("--run", attr.run, "trained run directory")->required();
  at->add_option("--data", attr.data, "dataset directory (default: generate from config)");
  at->add_option("--split", attr.split, "train, val or test")->capture_default_str();
  at->add_option("--checkpoint", attr.checkpoint, "checkpoint file in the run directory")->capture_default_str();
  at->add_option("--samples", attr.samples, "sequences to attribute")->capture_default_str();
  at->add_option("--steps", attr.steps, "path steps m")->capture_default_str();

  Ablate abl;
  auto* ab = app.add_subcommand("ablate", "identical-seed comparison runs");
  add_common(ab, abl.c);
  ab->add_option("--suite", abl.suite, "loss, space or sampling")->required();
  ab->add_option("--data", abl.data, "dataset directory (default: generate from config)");
  ab->add_option("--checkpoint", abl.checkpoint, "checkpoint scored: last or best")->capture_default_str();
  ab->add_option("--eval-sequences", abl.eval_sequences, "extra held-out sequences added to the test split")
      ->capture_default_str();
  ab->add_flag("--plot", abl.c.plot, "also write lead_time_scores.svg");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::CallForAllHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::ParseError& ex) {
    return fail(kConfigError, "config", ex.what());
  }

  try {
    if (*g) return run_gen_data(gen);
    if (*t) return run_train(train);
    if (*e) return run_eval(eval);
    if (*p) return run_predict(predict);
    if (*at) return run_attribute(attr);
    if (*ab) return run_ablate(abl);
  } catch (const ConfigError& ex) {
    return fail(kConfigError, "config", ex.what());
  } catch (const NumericError& ex) {
    return fail(kNumericError, "numeric", ex.what());
  } catch (const std::exception& ex) {
    return fail(kDataError, "data", ex.what());
  }
  return kOk;
}
