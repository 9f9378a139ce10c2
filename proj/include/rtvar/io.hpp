#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>

#include "json.hpp"

#include "rtvar/conformal.hpp"
#include "rtvar/eval.hpp"
#include "rtvar/forest.hpp"
#include "rtvar/market.hpp"

namespace rtvar {

// ---- config files (JSON) ------------------------------------------------------

/// Every field is required: d, s0, mu, r, sigma, rho, strikes, u, tau, T.
/// s0/mu/sigma accept a scalar (shared by all assets) or a list of d values;
/// rho accepts a scalar (common pairwise correlation) or a d x d matrix;
/// strikes accepts one list shared by all assets or a list of per-asset lists.
MarketConfig market_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const MarketConfig& config);

/// All fields optional; missing ones keep ForestConfig defaults.
ForestConfig forest_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ForestConfig& config);

nlohmann::json read_json_file(const std::filesystem::path& path);
MarketConfig load_market_config(const std::filesystem::path& path);
ForestConfig load_forest_config(const std::filesystem::path& path);

/// FNV-1a 64 of the canonical JSON form, as 16 hex digits.
std::string config_hash(const MarketConfig& config);

/// Experiment description: {"market": {...} | "market_config": path,
/// "forest": {...}, "profile": "desk" | "paper", "grid": {...}, "seed": n}.
/// Grid fields override the profile's defaults; `profile_override`, when
/// nonempty, replaces the file's profile. Relative paths resolve against
/// `base_dir`.
struct ExperimentConfig {
  MarketConfig market;
  ForestConfig forest;
  EvalGrid grid;
  std::string profile = "desk";
  std::uint64_t seed = 0;
};

ExperimentConfig experiment_config_from_json(const nlohmann::json& j,
                                             const std::filesystem::path& base_dir,
                                             std::string_view profile_override = {});
ExperimentConfig load_experiment_config(const std::filesystem::path& path,
                                        std::string_view profile_override = {});
EvalGrid grid_for_profile(std::string_view profile);

LossMode loss_mode_from_string(std::string_view name);
std::string_view to_string(LossMode mode);

// ---- files ----------------------------------------------------------------------

/// Writes to a sibling temporary file and renames it into place.
void write_file_atomic(const std::filesystem::path& path, std::string_view content);
std::string read_file(const std::filesystem::path& path);

/// Shortest decimal form that parses back to the same double.
std::string format_double(double v);

// ---- datasets (CSV) ---------------------------------------------------------------

struct DatasetMeta {
  std::string config_hash;
  std::uint64_t seed = 0;
  std::size_t n = 0;
  std::size_t d = 0;
  std::size_t m_inner = 0;
  LossMode loss_mode = LossMode::Nested;
};

/// Header `x1,...,xd,loss`, one row per sample.
std::string dataset_to_csv(const OfflineDataset& data);
OfflineDataset dataset_from_csv(std::string_view text);

/// Writes `path` and the sidecar `path + ".meta.json"`.
void write_dataset(const std::filesystem::path& path, const OfflineDataset& data,
                   const DatasetMeta& meta);
OfflineDataset read_dataset(const std::filesystem::path& path);
std::optional<DatasetMeta> read_dataset_meta(const std::filesystem::path& dataset_path);

// ---- model files (binary) ----------------------------------------------------------

/// Offline-stage artifact loaded by the online predictor: a fitted forest and,
/// optionally, the conformal calibration for one alpha.
struct ModelFile {
  Forest forest;
  std::optional<Calibration> calibration;
};

inline constexpr char kModelMagic[8] = {'R', 'T', 'V', 'A', 'R', 'Q', 'R', 'F'};
inline constexpr std::uint8_t kModelFormatVersion = 1;

std::string serialize_model(const ModelFile& model);
ModelFile deserialize_model(std::string_view bytes);
void save_model(const std::filesystem::path& path, const ModelFile& model);
ModelFile load_model(const std::filesystem::path& path);

}  // namespace rtvar
