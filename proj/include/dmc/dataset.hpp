#pragma once

// Labeled seasons shared by training, baselines and evaluation.

#include "dmc/ad.hpp"
#include "dmc/biophys.hpp"
#include "dmc/params.hpp"
#include "dmc/weather.hpp"

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace dmc {

using Onsets = std::array<std::optional<int>, kNumTransitions>;

/// Transitions that are labeled and scored (bud break, bloom, veraison).
inline constexpr int kScoredTransitions = 3;

struct Season {
  int cultivar = 0;
  int year = 0;
  std::string location;
  WeatherSeries weather;         // cleaned, natural units
  std::vector<double> target;    // stage index or LTE50 per day
  std::vector<bool> observed;    // label present
  Onsets onsets{};               // phenology only

  std::size_t days() const { return weather.days(); }
  std::size_t observed_count() const;
};

struct Dataset {
  CropModel model = CropModel::Gdd;
  std::vector<std::string> cultivars;
  std::vector<Season> seasons;
  nlohmann::json meta;  // generator metadata, free form

  std::vector<std::size_t> seasons_of(int cultivar) const;
  Dataset subset(std::span<const std::size_t> indices) const;
  std::vector<std::string> features() const;
  std::vector<WeatherSeries> weather() const;

  /// Directory with manifest.json and one CSV per season.
  void save(const std::filesystem::path& dir) const;
  static Dataset load(const std::filesystem::path& dir);
};

/// Seasons padded to a common length, stacked for one training step.
struct Batch {
  std::vector<int> cultivars;
  std::vector<int> lengths;
  int days = 0;
  std::vector<Eigen::MatrixXd> inputs;  // per day, B x F normalized features
  Eigen::MatrixXd tmean;                // B x T, natural units
  Eigen::MatrixXd target;               // B x T
  ad::Mask observed;                    // B x T, false on padding
  Eigen::ArrayXXi onsets;               // B x 4, -1 when absent

  std::size_t size() const { return cultivars.size(); }
};

Batch make_batch(const Dataset& data, std::span<const std::size_t> indices, const NormStats& stats);

}  // namespace dmc
