#pragma once

// Labeled synthetic seasons from the reference biophysical models.

#include "dmc/biophys.hpp"
#include "dmc/dataset.hpp"
#include "dmc/params.hpp"
#include "dmc/rng.hpp"
#include "dmc/weather.hpp"

#include <filesystem>
#include <optional>

namespace dmc {

struct CultivarTable {
  CropModel model = CropModel::Gdd;
  ParamSpec spec;
  std::vector<std::string> names;
  std::vector<Eigen::VectorXd> params;
  nlohmann::json provenance;  // {"sampled": {seed, shrink}} or {"file": path}

  std::size_t size() const { return params.size(); }
  nlohmann::json to_json() const;
  static CultivarTable from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static CultivarTable load(const std::filesystem::path& path);
};

/// Uniform draws in midpoint +- shrink * halfwidth for every parameter.
CultivarTable sample_cultivars(std::uint64_t seed, int n, CropModel model, double shrink);
CultivarTable sample_cultivars(std::uint64_t seed, int n, CropModel model, const ParamSpec& spec, double shrink);

/// Daily perturbation of one parameter driven by a trailing mean of one weather feature:
/// p_t = clamp(p + amplitude * clamp(z_t, -1, 1), range), z_t = (trailing_mean_t - mean) / sd.
struct Modulation {
  std::string parameter = "TBASEM";
  std::string feature = "rain";
  int window = 14;
  double amplitude = 2.0;
  double mean = 0.0;
  double sd = 1.0;

  nlohmann::json to_json() const;
  static Modulation from_json(const nlohmann::json& j);
};

/// Fits mean and sd of the trailing feature mean over every day of `weather`.
Modulation fit_modulation(Modulation rule, const std::vector<WeatherSeries>& weather);

/// Daily parameter vectors (T x d) for one season under the rule. `clamped` counts clamped days.
Eigen::MatrixXd modulation_trace(const Modulation& rule, const ParamSpec& spec, const Eigen::VectorXd& base,
                                 const WeatherSeries& w, int* clamped = nullptr);

enum class MaskMode { Iid, Weekly };

struct SynthOptions {
  /// Fraction of days hidden; 0 keeps every label.
  double mask_frac = 0.0;
  MaskMode mask_mode = MaskMode::Iid;
  std::uint64_t seed = 0;
  GddOptions gdd;
  std::optional<Modulation> modulation;
};

/// Seasonal weather per year over the model's window, simulated from a climate profile.
std::vector<WeatherSeries> synthetic_weather(std::uint64_t seed, const ClimateProfile& profile, CropModel model,
                                             int first_year, int years);

/// One season per (cultivar, weather year). Phenology labels are the daily stage capped at
/// veraison; hardiness labels are LTE50. Seasons that do not reach veraison are listed in
/// meta["generator"]["unreached"].
Dataset generate(const CultivarTable& table, const std::vector<WeatherSeries>& weather, const SynthOptions& options);
/// Same as generate with options.modulation required.
Dataset generate_nonstationary(const CultivarTable& table, const std::vector<WeatherSeries>& weather,
                               const SynthOptions& options);

/// Rebuilds a generated dataset from its stored weather and generator metadata.
Dataset regenerate(const Dataset& d);

/// (cultivar, year) pairs that did not reach veraison.
std::vector<std::pair<int, int>> unreached_seasons(const Dataset& d);

/// Resamples phenology cultivars until every season reaches veraison under `options`.
CultivarTable sample_reachable_cultivars(std::uint64_t seed, int n, double shrink,
                                         const std::vector<WeatherSeries>& weather, const SynthOptions& options,
                                         int max_tries = 1000);

}  // namespace dmc
