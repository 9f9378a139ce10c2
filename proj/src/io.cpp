#include "rtvar/io.hpp"

#include <algorithm>
#include <bit>
#include <cstdio>
#include <charconv>
#include <cstring>
#include <fstream>
#include <sstream>
#include <system_error>

#include "rtvar/errors.hpp"

namespace rtvar {

using nlohmann::json;

namespace {

const json& require(const json& j, const char* field) {
  if (!j.is_object()) throw ConfigError(field, "config must be a JSON object");
  const auto it = j.find(field);
  if (it == j.end()) throw ConfigError(field, "missing required field");
  return *it;
}

double as_number(const json& v, const char* field) {
  if (!v.is_number()) throw ConfigError(field, "expected a number");
  return v.get<double>();
}

std::vector<double> per_asset(const json& v, std::size_t d, const char* field) {
  if (v.is_number()) return std::vector<double>(d, v.get<double>());
  if (!v.is_array()) throw ConfigError(field, "expected a number or a list of numbers");
  std::vector<double> out;
  for (const auto& e : v) out.push_back(as_number(e, field));
  if (out.size() != d) {
    throw ConfigError(field, "expected " + std::to_string(d) + " entries, got " +
                                 std::to_string(out.size()));
  }
  return out;
}

Matrix correlation(const json& v, std::size_t d) {
  Matrix rho = Matrix::identity(d);
  if (v.is_number()) {
    const double c = v.get<double>();
    for (std::size_t i = 0; i < d; ++i) {
      for (std::size_t j = 0; j < d; ++j) {
        if (i != j) rho(i, j) = c;
      }
    }
    return rho;
  }
  if (!v.is_array() || v.size() != d) {
    throw ConfigError("rho", "expected a number or a " + std::to_string(d) + "x" +
                                 std::to_string(d) + " matrix");
  }
  for (std::size_t i = 0; i < d; ++i) {
    if (!v[i].is_array() || v[i].size() != d) {
      throw ConfigError("rho", "row " + std::to_string(i) + " must have " + std::to_string(d) +
                                   " entries");
    }
    for (std::size_t j = 0; j < d; ++j) rho(i, j) = as_number(v[i][j], "rho");
  }
  return rho;
}

std::vector<std::vector<double>> strike_lists(const json& v, std::size_t d) {
  if (!v.is_array() || v.empty()) throw ConfigError("strikes", "expected a nonempty list");
  std::vector<std::vector<double>> out;
  if (v.front().is_number()) {
    std::vector<double> shared;
    for (const auto& e : v) shared.push_back(as_number(e, "strikes"));
    out.assign(d, shared);
    return out;
  }
  for (const auto& list : v) {
    if (!list.is_array()) throw ConfigError("strikes", "expected lists of numbers");
    std::vector<double> row;
    for (const auto& e : list) row.push_back(as_number(e, "strikes"));
    out.push_back(std::move(row));
  }
  if (out.size() != d) throw ConfigError("strikes", "expected one strike list per asset");
  return out;
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

MarketConfig market_config_from_json(const json& j) {
  MarketConfig c;
  const json& d = require(j, "d");
  if (!d.is_number_integer() || d.get<long long>() < 1) {
    throw ConfigError("d", "expected a positive integer");
  }
  c.d = d.get<std::size_t>();
  c.s0 = per_asset(require(j, "s0"), c.d, "s0");
  c.mu = per_asset(require(j, "mu"), c.d, "mu");
  c.r = as_number(require(j, "r"), "r");
  c.sigma = per_asset(require(j, "sigma"), c.d, "sigma");
  c.rho = correlation(require(j, "rho"), c.d);
  c.strikes = strike_lists(require(j, "strikes"), c.d);
  c.u = as_number(require(j, "u"), "u");
  c.tau = as_number(require(j, "tau"), "tau");
  c.maturity = as_number(require(j, "T"), "T");
  c.validate();
  return c;
}

json to_json(const MarketConfig& c) {
  json rho = json::array();
  for (std::size_t i = 0; i < c.rho.rows(); ++i) {
    const auto row = c.rho.row(i);
    rho.push_back(std::vector<double>(row.begin(), row.end()));
  }
  return json{{"d", c.d},         {"s0", c.s0},           {"mu", c.mu},
              {"r", c.r},         {"sigma", c.sigma},     {"rho", rho},
              {"strikes", c.strikes}, {"u", c.u},         {"tau", c.tau},
              {"T", c.maturity}};
}

ForestConfig forest_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("forest", "config must be a JSON object");
  ForestConfig c;
  const auto count = [&](const char* field, std::size_t& out) {
    if (!j.contains(field)) return;
    const json& v = j.at(field);
    if (!v.is_number_integer() || v.get<long long>() < 0) {
      throw ConfigError(field, "expected a non-negative integer");
    }
    out = v.get<std::size_t>();
  };
  const auto number = [&](const char* field, double& out) {
    if (j.contains(field)) out = as_number(j.at(field), field);
  };
  const auto flag = [&](const char* field, bool& out) {
    if (!j.contains(field)) return;
    if (!j.at(field).is_boolean()) throw ConfigError(field, "expected true or false");
    out = j.at(field).get<bool>();
  };
  count("n_trees", c.n_trees);
  count("mtry", c.mtry);
  count("min_node_size", c.min_node_size);
  number("max_leaf_fraction", c.max_leaf_fraction);
  number("min_child_fraction", c.min_child_fraction);
  number("leaf_growth_scale", c.leaf_growth_scale);
  number("leaf_growth_exponent", c.leaf_growth_exponent);
  flag("honest", c.honest);
  flag("bootstrap", c.bootstrap);
  if (j.contains("seed")) {
    if (!j.at("seed").is_number_unsigned()) throw ConfigError("seed", "expected an unsigned integer");
    c.seed = j.at("seed").get<std::uint64_t>();
  }
  if (c.n_trees < 1) throw ConfigError("n_trees", "must be >= 1");
  return c;
}

json to_json(const ForestConfig& c) {
  return json{{"n_trees", c.n_trees},
              {"mtry", c.mtry},
              {"min_node_size", c.min_node_size},
              {"max_leaf_fraction", c.max_leaf_fraction},
              {"min_child_fraction", c.min_child_fraction},
              {"leaf_growth_scale", c.leaf_growth_scale},
              {"leaf_growth_exponent", c.leaf_growth_exponent},
              {"honest", c.honest},
              {"bootstrap", c.bootstrap},
              {"seed", c.seed}};
}

json read_json_file(const std::filesystem::path& path) {
  const std::string text = read_file(path);
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError(path.string() + ": invalid JSON: " + e.what());
  }
}

MarketConfig load_market_config(const std::filesystem::path& path) {
  return market_config_from_json(read_json_file(path));
}

ForestConfig load_forest_config(const std::filesystem::path& path) {
  return forest_config_from_json(read_json_file(path));
}

std::string config_hash(const MarketConfig& config) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a(to_json(config).dump())));
  return buf;
}

EvalGrid grid_for_profile(std::string_view profile) {
  if (profile == "desk") return EvalGrid::desk();
  if (profile == "paper") return EvalGrid::paper();
  throw ConfigError("profile", "expected desk or paper, got '" + std::string(profile) + "'");
}

ExperimentConfig experiment_config_from_json(const json& j,
                                             const std::filesystem::path& base_dir,
                                             std::string_view profile_override) {
  if (!j.is_object()) throw ConfigError("experiment", "config must be a JSON object");
  ExperimentConfig c;
  if (j.contains("market")) {
    c.market = market_config_from_json(j.at("market"));
  } else if (j.contains("market_config")) {
    if (!j.at("market_config").is_string()) throw ConfigError("market_config", "expected a path");
    std::filesystem::path p = j.at("market_config").get<std::string>();
    c.market = load_market_config(p.is_absolute() ? p : base_dir / p);
  } else {
    throw ConfigError("market", "missing required field (or market_config path)");
  }
  if (j.contains("forest")) c.forest = forest_config_from_json(j.at("forest"));
  if (j.contains("profile")) {
    if (!j.at("profile").is_string()) throw ConfigError("profile", "expected a string");
    c.profile = j.at("profile").get<std::string>();
  }
  if (!profile_override.empty()) c.profile = std::string(profile_override);
  c.grid = grid_for_profile(c.profile);
  if (j.contains("seed")) {
    if (!j.at("seed").is_number_unsigned()) throw ConfigError("seed", "expected an unsigned integer");
    c.seed = j.at("seed").get<std::uint64_t>();
  }
  if (j.contains("grid")) {
    const json& g = j.at("grid");
    if (!g.is_object()) throw ConfigError("grid", "expected an object");
    const auto count = [&](const char* field, std::size_t& out) {
      if (!g.contains(field)) return;
      if (!g.at(field).is_number_integer() || g.at(field).get<long long>() < 1) {
        throw ConfigError(field, "expected a positive integer");
      }
      out = g.at(field).get<std::size_t>();
    };
    count("n_points", c.grid.n_points);
    count("n_reps", c.grid.n_reps);
    count("n_cov_samples", c.grid.n_cov_samples);
    count("n_oracle", c.grid.n_oracle);
    count("m_inner", c.grid.m_inner);
    if (g.contains("alphas")) {
      c.grid.alphas.clear();
      if (!g.at("alphas").is_array()) throw ConfigError("alphas", "expected a list");
      for (const auto& a : g.at("alphas")) c.grid.alphas.push_back(as_number(a, "alphas"));
    }
    if (g.contains("offline_sizes")) {
      c.grid.offline_sizes.clear();
      if (!g.at("offline_sizes").is_array()) throw ConfigError("offline_sizes", "expected a list");
      for (const auto& n : g.at("offline_sizes")) {
        if (!n.is_number_integer() || n.get<long long>() < 2) {
          throw ConfigError("offline_sizes", "expected integers >= 2");
        }
        c.grid.offline_sizes.push_back(n.get<std::size_t>());
      }
    }
    if (g.contains("train_fraction")) {
      c.grid.train_fraction = as_number(g.at("train_fraction"), "train_fraction");
    }
    if (g.contains("loss_mode")) {
      if (!g.at("loss_mode").is_string()) throw ConfigError("loss_mode", "expected a string");
      c.grid.loss_mode = loss_mode_from_string(g.at("loss_mode").get<std::string>());
    }
    if (g.contains("correction")) {
      if (!g.at("correction").is_string()) throw ConfigError("correction", "expected a string");
      try {
        c.grid.correction = correction_mode_from_string(g.at("correction").get<std::string>());
      } catch (const std::invalid_argument& e) {
        throw ConfigError("correction", e.what());
      }
    }
  }
  c.grid.validate();
  c.forest.resolved(c.market.d);
  return c;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path,
                                        std::string_view profile_override) {
  return experiment_config_from_json(read_json_file(path), path.parent_path(), profile_override);
}

LossMode loss_mode_from_string(std::string_view name) {
  if (name == "nested") return LossMode::Nested;
  if (name == "closed_form") return LossMode::ClosedForm;
  throw ConfigError("loss_mode", "expected nested or closed_form, got '" + std::string(name) + "'");
}

std::string_view to_string(LossMode mode) {
  return mode == LossMode::Nested ? "nested" : "closed_form";
}

void write_file_atomic(const std::filesystem::path& path, std::string_view content) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    out.flush();
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string dataset_to_csv(const OfflineDataset& data) {
  std::string out;
  for (std::size_t k = 0; k < data.dim(); ++k) out += "x" + std::to_string(k + 1) + ",";
  out += "loss\n";
  for (std::size_t i = 0; i < data.size(); ++i) {
    for (const double v : data.x.row(i)) {
      out += format_double(v);
      out += ',';
    }
    out += format_double(data.loss[i]);
    out += '\n';
  }
  return out;
}

OfflineDataset dataset_from_csv(std::string_view text) {
  std::vector<std::vector<double>> rows;
  std::size_t cols = 0;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto eol = text.find('\n');
    std::string_view line = text.substr(0, eol);
    text = eol == std::string_view::npos ? std::string_view{} : text.substr(eol + 1);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    ++line_no;
    if (line.empty()) continue;
    if (line_no == 1) {
      cols = static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) + 1;
      if (cols < 2 || line.substr(line.rfind(',') + 1) != "loss") {
        throw FormatError("dataset header must be x1,...,xd,loss");
      }
      continue;
    }
    std::vector<double> row;
    std::size_t pos = 0;
    while (pos <= line.size()) {
      const auto comma = std::min(line.find(',', pos), line.size());
      double v = 0.0;
      const auto res = std::from_chars(line.data() + pos, line.data() + comma, v);
      if (res.ec != std::errc{} || res.ptr != line.data() + comma) {
        throw FormatError("dataset line " + std::to_string(line_no) + ": bad number");
      }
      row.push_back(v);
      pos = comma + 1;
    }
    if (row.size() != cols) {
      throw FormatError("dataset line " + std::to_string(line_no) + ": expected " +
                        std::to_string(cols) + " fields");
    }
    rows.push_back(std::move(row));
  }
  if (cols == 0) throw FormatError("dataset is empty");
  OfflineDataset data{Matrix(rows.size(), cols - 1), std::vector<double>(rows.size()), 0};
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy(rows[i].begin(), rows[i].end() - 1, data.x.row(i).begin());
    data.loss[i] = rows[i].back();
  }
  return data;
}

void write_dataset(const std::filesystem::path& path, const OfflineDataset& data,
                   const DatasetMeta& meta) {
  write_file_atomic(path, dataset_to_csv(data));
  const json j{{"config_hash", meta.config_hash}, {"seed", meta.seed},
               {"n", meta.n},                     {"d", meta.d},
               {"m_inner", meta.m_inner},         {"loss_mode", to_string(meta.loss_mode)}};
  std::filesystem::path side = path;
  side += ".meta.json";
  write_file_atomic(side, j.dump(2) + "\n");
}

OfflineDataset read_dataset(const std::filesystem::path& path) {
  OfflineDataset data = dataset_from_csv(read_file(path));
  if (const auto meta = read_dataset_meta(path)) data.seed = meta->seed;
  return data;
}

std::optional<DatasetMeta> read_dataset_meta(const std::filesystem::path& dataset_path) {
  std::filesystem::path side = dataset_path;
  side += ".meta.json";
  if (!std::filesystem::exists(side)) return std::nullopt;
  const json j = read_json_file(side);
  DatasetMeta m;
  m.config_hash = j.value("config_hash", "");
  m.seed = j.value("seed", std::uint64_t{0});
  m.n = j.value("n", std::size_t{0});
  m.d = j.value("d", std::size_t{0});
  m.m_inner = j.value("m_inner", std::size_t{0});
  m.loss_mode = loss_mode_from_string(j.value("loss_mode", "nested"));
  return m;
}

// ---- binary model format ---------------------------------------------------------

namespace {

static_assert(std::endian::native == std::endian::little,
              "model serialization assumes a little-endian host");

class Writer {
 public:
  template <typename T>
  void put(T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out_.append(buf, sizeof(T));
  }
  template <typename T>
  void put_array(std::span<const T> values) {
    put<std::uint64_t>(values.size());
    const auto* p = reinterpret_cast<const char*>(values.data());
    out_.append(p, values.size_bytes());
  }
  void raw(std::string_view bytes) { out_.append(bytes); }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  template <typename T>
  std::vector<T> get_array() {
    const auto count = get<std::uint64_t>();
    if (count > (bytes_.size() - pos_) / sizeof(T)) throw FormatError("model file truncated");
    std::vector<T> out(count);
    std::memcpy(out.data(), bytes_.data() + pos_, count * sizeof(T));
    pos_ += count * sizeof(T);
    return out;
  }
  std::string_view raw(std::size_t n) {
    need(n);
    const auto v = bytes_.substr(pos_, n);
    pos_ += n;
    return v;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw FormatError("model file truncated");
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string serialize_model(const ModelFile& model) {
  const Forest& f = model.forest;
  const ForestConfig& c = f.config();
  Writer w;
  w.raw(std::string_view(kModelMagic, sizeof kModelMagic));
  w.put<std::uint8_t>(kModelFormatVersion);
  w.put<std::uint64_t>(f.dim());
  w.put<std::uint64_t>(c.n_trees);
  w.put<std::uint64_t>(c.mtry);
  w.put<std::uint64_t>(c.min_node_size);
  w.put<double>(c.max_leaf_fraction);
  w.put<double>(c.min_child_fraction);
  w.put<double>(c.leaf_growth_scale);
  w.put<double>(c.leaf_growth_exponent);
  w.put<std::uint8_t>(c.honest ? 1 : 0);
  w.put<std::uint8_t>(c.bootstrap ? 1 : 0);
  w.put<std::uint64_t>(c.seed);
  w.put_array(std::span<const double>(f.responses()));
  w.put<std::uint64_t>(f.trees().size());
  for (const Tree& t : f.trees()) {
    w.put<std::uint64_t>(t.nodes.size());
    for (const TreeNode& n : t.nodes) {
      w.put<std::int32_t>(n.feature);
      w.put<double>(n.threshold);
      w.put<std::uint32_t>(n.left);
      w.put<std::uint32_t>(n.right);
    }
    w.put_array(std::span<const std::uint32_t>(t.members));
  }
  w.put<std::uint8_t>(model.calibration ? 1 : 0);
  if (model.calibration) {
    const Calibration& cal = *model.calibration;
    w.put<double>(cal.alpha);
    w.put<std::uint8_t>(cal.mode == CorrectionMode::Plain ? 0 : 1);
    w.put<double>(cal.offset);
    w.put_array(std::span<const double>(cal.scores));
  }
  return w.take();
}

ModelFile deserialize_model(std::string_view bytes) {
  Reader r(bytes);
  if (bytes.size() < sizeof kModelMagic ||
      r.raw(sizeof kModelMagic) != std::string_view(kModelMagic, sizeof kModelMagic)) {
    throw FormatError("not a model file (bad magic)");
  }
  const auto version = r.get<std::uint8_t>();
  if (version != kModelFormatVersion) {
    throw FormatError("unsupported model format version " + std::to_string(version));
  }
  const auto dim = static_cast<std::size_t>(r.get<std::uint64_t>());
  ForestConfig c;
  c.n_trees = r.get<std::uint64_t>();
  c.mtry = r.get<std::uint64_t>();
  c.min_node_size = r.get<std::uint64_t>();
  c.max_leaf_fraction = r.get<double>();
  c.min_child_fraction = r.get<double>();
  c.leaf_growth_scale = r.get<double>();
  c.leaf_growth_exponent = r.get<double>();
  c.honest = r.get<std::uint8_t>() != 0;
  c.bootstrap = r.get<std::uint8_t>() != 0;
  c.seed = r.get<std::uint64_t>();
  auto responses = r.get_array<double>();
  const auto tree_count = r.get<std::uint64_t>();
  if (tree_count == 0 || dim == 0) throw FormatError("model has no trees or zero dimension");
  std::vector<Tree> trees(tree_count);
  for (Tree& t : trees) {
    const auto node_count = r.get<std::uint64_t>();
    if (node_count == 0 || node_count > bytes.size()) throw FormatError("bad node count");
    t.nodes.resize(node_count);
    for (TreeNode& n : t.nodes) {
      n.feature = r.get<std::int32_t>();
      n.threshold = r.get<double>();
      n.left = r.get<std::uint32_t>();
      n.right = r.get<std::uint32_t>();
    }
    t.members = r.get_array<std::uint32_t>();
    for (const TreeNode& n : t.nodes) {
      if (n.is_leaf()) {
        if (n.right == 0 || std::size_t{n.left} + n.right > t.members.size()) {
          throw FormatError("leaf member range out of bounds");
        }
      } else if (n.feature < 0 || static_cast<std::size_t>(n.feature) >= dim ||
                 n.left >= node_count || n.right >= node_count) {
        throw FormatError("internal node out of bounds");
      }
    }
    for (const auto m : t.members) {
      if (m >= responses.size()) throw FormatError("leaf member index out of range");
    }
  }
  ModelFile model{Forest(c, dim, std::move(responses), std::move(trees)), std::nullopt};
  if (r.get<std::uint8_t>() != 0) {
    Calibration cal;
    cal.alpha = r.get<double>();
    cal.mode = r.get<std::uint8_t>() == 0 ? CorrectionMode::Plain : CorrectionMode::FiniteSample;
    cal.offset = r.get<double>();
    cal.scores = r.get_array<double>();
    model.calibration = std::move(cal);
  }
  if (!r.done()) throw FormatError("trailing bytes after model");
  return model;
}

void save_model(const std::filesystem::path& path, const ModelFile& model) {
  write_file_atomic(path, serialize_model(model));
}

ModelFile load_model(const std::filesystem::path& path) {
  return deserialize_model(read_file(path));
}

}  // namespace rtvar
