#include "rtvar/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "rtvar/conformal.hpp"
#include "rtvar/errors.hpp"
#include "rtvar/eval.hpp"
#include "rtvar/forest.hpp"
#include "rtvar/io.hpp"
#include "rtvar/market.hpp"
#include "rtvar/random.hpp"

namespace rtvar {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Provenance record written next to every artifact.
struct Manifest {
  std::string command;
  json inputs = json::object();
  json seeds = json::object();
  json artifacts = json::object();
  std::string started_at = utc_now();

  void write(const fs::path& path) const {
    const json j{{"tool", "rtvar"},         {"version", kToolVersion},
                 {"command", command},       {"inputs", inputs},
                 {"seeds", seeds},           {"artifacts", artifacts},
                 {"started_at", started_at}, {"finished_at", utc_now()}};
    write_file_atomic(path, j.dump(2) + "\n");
  }
};

fs::path sibling(const fs::path& path, const std::string& suffix) {
  fs::path p = path;
  p += suffix;
  return p;
}

std::vector<double> parse_vector(std::string_view text) {
  std::vector<double> out;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto comma = std::min(text.find(',', pos), text.size());
    std::string field(text.substr(pos, comma - pos));
    field.erase(0, field.find_first_not_of(" \t"));
    field.erase(field.find_last_not_of(" \t\r") + 1);
    if (field.empty()) throw ConfigError("x", "empty coordinate in '" + std::string(text) + "'");
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(field, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != field.size()) throw ConfigError("x", "not a number: '" + field + "'");
    out.push_back(v);
    pos = comma + 1;
  }
  return out;
}

/// Query file: one comma-separated point per line. A header line starting
/// with a letter is skipped; a trailing `loss` column (dataset files) is dropped.
std::vector<std::vector<double>> read_queries(const fs::path& path) {
  const std::string text = read_file(path);
  std::istringstream in(text);
  std::string line;
  bool drop_last = false;
  bool first = true;
  std::vector<std::vector<double>> out;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (first && std::isalpha(static_cast<unsigned char>(line.front()))) {
      drop_last = line.size() >= 4 && line.substr(line.size() - 4) == "loss";
      first = false;
      continue;
    }
    first = false;
    auto v = parse_vector(line);
    if (drop_last && !v.empty()) v.pop_back();
    out.push_back(std::move(v));
  }
  return out;
}

void print_forest_summary(const Forest& f, std::ostream& out) {
  std::size_t leaves = 0;
  std::size_t min_leaf = SIZE_MAX;
  std::size_t max_leaf = 0;
  std::size_t members = 0;
  for (const Tree& t : f.trees()) {
    for (const TreeNode& n : t.nodes) {
      if (!n.is_leaf()) continue;
      ++leaves;
      min_leaf = std::min<std::size_t>(min_leaf, n.right);
      max_leaf = std::max<std::size_t>(max_leaf, n.right);
      members += n.right;
    }
  }
  out << "trees: " << f.trees().size() << "\n"
      << "training points: " << f.training_size() << "\n"
      << "leaves: " << leaves << " (mean per tree "
      << static_cast<double>(leaves) / static_cast<double>(f.trees().size()) << ")\n"
      << "leaf size: min " << min_leaf << ", mean "
      << static_cast<double>(members) / static_cast<double>(leaves) << ", max " << max_leaf
      << "\n";
}

// ---- subcommands -------------------------------------------------------------------

struct SimulateArgs {
  std::string config;
  std::size_t n = 0;
  std::size_t m_inner = 500;
  std::string loss_mode = "nested";
  std::uint64_t seed = 0;
  std::string out;
  unsigned threads = 1;
};

int cmd_simulate(const SimulateArgs& a, std::ostream& out) {
  Manifest manifest;
  manifest.command = "simulate";
  if (a.n < 1) throw ConfigError("n", "sample count must be >= 1");
  const LossMode mode = loss_mode_from_string(a.loss_mode);
  if (mode == LossMode::Nested && a.m_inner < 1) throw ConfigError("m_inner", "must be >= 1");
  const Market market(load_market_config(a.config));

  const OfflineDataset data = generate_offline_dataset(market, a.n, a.m_inner, mode, a.seed,
                                                       a.threads);
  DatasetMeta meta{config_hash(market.config()), a.seed, a.n, market.dim(), a.m_inner, mode};
  write_dataset(a.out, data, meta);

  manifest.inputs = {{"config", a.config}, {"n", a.n}, {"m_inner", a.m_inner},
                     {"loss_mode", a.loss_mode}};
  manifest.seeds = {{"seed", a.seed}};
  manifest.artifacts = {{"dataset", a.out}, {"dataset_meta", sibling(a.out, ".meta.json").string()}};
  manifest.write(sibling(a.out, ".manifest.json"));
  out << "wrote " << a.n << " samples (d=" << market.dim() << ", V0="
      << format_double(market.value_0()) << ") to " << a.out << "\n";
  return 0;
}

struct TrainArgs {
  std::string data;
  std::string config;
  std::optional<double> alpha;
  bool conformal = false;
  double train_fraction = 0.7;
  std::string correction = "finite_sample";
  std::uint64_t seed = 0;
  std::string out;
  unsigned threads = 1;
};

int cmd_train(const TrainArgs& a, std::ostream& out) {
  Manifest manifest;
  manifest.command = "train";
  ForestConfig fc = a.config.empty() ? ForestConfig{} : load_forest_config(a.config);
  fc.seed = derive_seed(a.seed, static_cast<std::uint64_t>(StreamTag::Forest));
  const OfflineDataset data = read_dataset(a.data);
  if (data.size() == 0) throw ConfigError("data", "dataset has no rows");

  ModelFile model;
  if (!a.conformal) {
    model.forest = Forest::fit(data, fc, a.threads);
    print_forest_summary(model.forest, out);
  } else {
    if (!a.alpha) throw ConfigError("alpha", "--alpha is required with --conformal");
    const CorrectionMode mode = correction_mode_from_string(a.correction);
    const SplitPlan plan = split_dataset(data.size(), a.train_fraction, a.seed);
    const OfflineDataset train = select_rows(data, plan.train_indices);
    const OfflineDataset calib = select_rows(data, plan.calib_indices);
    if (mode == CorrectionMode::FiniteSample &&
        calib.size() < min_calibration_size(*a.alpha)) {
      // Fail before the expensive fit.
      calibrated_offset(std::vector<double>(calib.size(), 0.0), *a.alpha, mode);
    }
    auto base = std::make_shared<const Forest>(Forest::fit(train, fc, a.threads));
    const ConformalModel cm =
        ConformalModel::calibrate(base, calib.x, calib.loss, *a.alpha, mode, a.threads);
    model.forest = *base;
    model.calibration = cm.calibration();
    print_forest_summary(model.forest, out);
    out << "train size |I1|: " << train.size() << "\n"
        << "calibration size |I2|: " << calib.size() << "\n"
        << "alpha: " << format_double(*a.alpha) << " (" << to_string(mode) << ")\n"
        << "offset: " << format_double(cm.offset()) << "\n";
  }
  save_model(a.out, model);

  manifest.inputs = {{"data", a.data}, {"forest_config", a.config},
                     {"conformal", a.conformal}, {"train_fraction", a.train_fraction},
                     {"correction", a.correction}, {"forest", to_json(model.forest.config())}};
  if (a.alpha) manifest.inputs["alpha"] = *a.alpha;
  manifest.seeds = {{"seed", a.seed}, {"forest_seed", fc.seed}};
  manifest.artifacts = {{"model", a.out}};
  manifest.write(sibling(a.out, ".manifest.json"));
  out << "wrote model to " << a.out << "\n";
  return 0;
}

struct PredictArgs {
  std::string model;
  std::string x;
  std::string x_file;
  std::optional<double> alpha;
};

int cmd_predict(const PredictArgs& a, std::ostream& out, std::ostream& err) {
  const ModelFile model = load_model(a.model);
  double alpha = 0.0;
  if (model.calibration) {
    alpha = a.alpha.value_or(model.calibration->alpha);
    if (alpha != model.calibration->alpha) {
      throw ConfigError("alpha", "model is calibrated at alpha=" +
                                     format_double(model.calibration->alpha) + ", got " +
                                     format_double(alpha));
    }
  } else {
    if (!a.alpha) throw ConfigError("alpha", "--alpha is required for an uncalibrated model");
    alpha = *a.alpha;
  }
  if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("alpha", "must lie in (0, 1)");

  std::vector<std::vector<double>> queries;
  if (!a.x.empty()) queries.push_back(parse_vector(a.x));
  if (!a.x_file.empty()) {
    auto more = read_queries(a.x_file);
    queries.insert(queries.end(), more.begin(), more.end());
  }
  if (queries.empty()) throw ConfigError("x", "provide --x or --x-file");
  for (std::size_t i = 0; i < queries.size(); ++i) {
    if (queries[i].size() != model.forest.dim()) {
      throw DimensionError("query " + std::to_string(i) + " has " +
                           std::to_string(queries[i].size()) + " coordinates, model expects " +
                           std::to_string(model.forest.dim()));
    }
  }

  const double offset = model.calibration ? model.calibration->offset : 0.0;
  std::vector<double> base(queries.size());
  const auto start = std::chrono::steady_clock::now();
  for (std::size_t i = 0; i < queries.size(); ++i) {
    base[i] = model.forest.predict_quantile(queries[i], alpha);
  }
  const double micros =
      std::chrono::duration<double, std::micro>(std::chrono::steady_clock::now() - start).count() /
      static_cast<double>(queries.size());

  out << (model.calibration ? "index,var,conformal_var\n" : "index,var\n");
  for (std::size_t i = 0; i < queries.size(); ++i) {
    out << i << ',' << format_double(base[i]);
    if (model.calibration) out << ',' << format_double(base[i] + offset);
    out << '\n';
  }
  err << "latency_micros_per_query=" << micros << "\n";
  return 0;
}

struct ExperimentArgs {
  std::string config;
  std::string out_dir;
  std::string profile;
  std::optional<std::uint64_t> seed;
  unsigned threads = 1;
  bool resume = false;
  bool no_timings = false;
};

int cmd_experiment(const ExperimentArgs& a, std::ostream& err) {
  Manifest manifest;
  manifest.command = "experiment";
  ExperimentConfig cfg = load_experiment_config(a.config, a.profile);
  if (a.seed) cfg.seed = *a.seed;
  const Market market(cfg.market);

  const fs::path dir = a.out_dir;
  fs::create_directories(dir);
  const fs::path partial = dir / "results.partial.csv";
  const fs::path results = dir / "results.csv";
  const fs::path aggregated = dir / "aggregate.csv";
  const bool timings = !a.no_timings;

  ExperimentOptions opts;
  opts.threads = a.threads;
  std::vector<MetricRecord> previous;
  if (a.resume && fs::exists(partial)) {
    previous = records_from_csv(read_file(partial));
    for (const auto& r : previous) opts.completed.insert({r.rep, r.n_offline});
    err << "resuming: " << opts.completed.size() << " completed units\n";
  } else {
    write_file_atomic(partial, std::string(kRecordHeader) + "\n");
  }
  // Completed units are appended and flushed as they finish.
  std::ofstream sink(partial, std::ios::app | std::ios::binary);
  if (!sink) throw IoError("cannot open " + partial.string());
  opts.on_unit = [&](std::span<const MetricRecord> unit) {
    for (const auto& r : unit) sink << format_record(r, timings) << '\n';
    sink.flush();
  };
  opts.progress = [&](std::string_view msg) { err << "[experiment] " << msg << "\n"; };

  std::vector<MetricRecord> records =
      run_experiment(market, cfg.forest, cfg.grid, cfg.seed, opts);
  sink.close();
  records.insert(records.end(), previous.begin(), previous.end());
  sort_records(records);

  write_file_atomic(results, records_to_csv(records, timings));
  const auto agg = aggregate(records);
  write_file_atomic(aggregated, aggregate_to_csv(agg, timings));
  fs::remove(partial);

  manifest.inputs = {{"config", a.config},
                     {"profile", cfg.profile},
                     {"market", to_json(cfg.market)},
                     {"forest", to_json(cfg.forest)},
                     {"threads", a.threads},
                     {"timings", timings}};
  manifest.seeds = {{"seed", cfg.seed}};
  manifest.artifacts = {{"results", results.string()}, {"aggregate", aggregated.string()}};
  manifest.write(dir / "manifest.json");
  err << "wrote " << records.size() << " records to " << results.string() << "\n";
  return 0;
}

}  // namespace

int run_cli(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Real-time Value-at-Risk with quantile regression forests", "rtvar"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  SimulateArgs sim;
  auto* simulate = app.add_subcommand("simulate", "Offline stage: simulate (S(u), L(tau)) pairs");
  simulate->add_option("--config", sim.config, "Market config (JSON)")->required();
  simulate->add_option("--n", sim.n, "Number of outer paths")->required();
  simulate->add_option("--m-inner", sim.m_inner, "Inner paths per outer path");
  simulate->add_option("--loss-mode", sim.loss_mode, "nested or closed_form");
  simulate->add_option("--seed", sim.seed, "RNG seed");
  simulate->add_option("--out", sim.out, "Output CSV")->required();
  simulate->add_option("--threads", sim.threads, "Worker threads");

  TrainArgs tr;
  auto* train = app.add_subcommand("train", "Offline stage: fit the forest (and calibrate)");
  train->add_option("--data", tr.data, "Dataset CSV")->required();
  train->add_option("--config", tr.config, "Forest config (JSON); defaults if omitted");
  train->add_option("--alpha", tr.alpha, "VaR level, required with --conformal");
  train->add_flag("--conformal", tr.conformal, "Split-conformal calibration");
  train->add_option("--train-fraction", tr.train_fraction, "Share of samples used for training");
  train->add_option("--correction", tr.correction, "plain or finite_sample");
  train->add_option("--seed", tr.seed, "RNG seed (forest and split)");
  train->add_option("--out", tr.out, "Output model file")->required();
  train->add_option("--threads", tr.threads, "Worker threads");

  PredictArgs pr;
  auto* predict = app.add_subcommand("predict", "Online stage: VaR at observed risk factors");
  predict->add_option("--model", pr.model, "Model file")->required();
  predict->add_option("--x", pr.x, "Comma-separated risk factors");
  predict->add_option("--x-file", pr.x_file, "CSV of query points, one per line");
  predict->add_option("--alpha", pr.alpha, "VaR level (defaults to the calibrated level)");

  ExperimentArgs ex;
  auto* experiment = app.add_subcommand("experiment", "Run the evaluation grid");
  experiment->add_option("--config", ex.config, "Experiment config (JSON)")->required();
  experiment->add_option("--out", ex.out_dir, "Output directory")->required();
  experiment->add_option("--profile", ex.profile, "desk or paper (overrides the config)");
  experiment->add_option("--seed", ex.seed, "Overrides the config seed");
  experiment->add_option("--threads", ex.threads, "Worker threads");
  experiment->add_flag("--resume", ex.resume, "Skip units already in results.partial.csv");
  experiment->add_flag("--no-timings", ex.no_timings, "Write timing columns as 0");

  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForVersion&) {
    out << kToolVersion << "\n";
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error[usage]: " << e.what() << "\n";
    return 2;
  }

  try {
    if (simulate->parsed()) return cmd_simulate(sim, out);
    if (train->parsed()) return cmd_train(tr, out);
    if (predict->parsed()) return cmd_predict(pr, out, err);
    if (experiment->parsed()) return cmd_experiment(ex, err);
  } catch (const Error& e) {
    err << "error[" << e.kind() << "]: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error[runtime]: " << e.what() << "\n";
    return 1;
  }
  return 1;
}

}  // namespace rtvar
