#pragma once

// In-season adaptation: a bias-free network turns observation errors into
// additive corrections of the base model's raw parameter outputs.

#include "dmc/hybrid.hpp"

#include <filesystem>
#include <optional>

namespace dmc {

/// One entry per season day; nullopt where nothing was observed.
using Observations = std::vector<std::optional<double>>;

struct EenWeights {
  /// input_dim 2 (error, cultivar scalar), no biases, no built-in embedding.
  NetWeights net;
  /// n_cultivars x 1.
  Eigen::MatrixXd cultivar_scalar;
  /// Multiplies the network output before it is added to the base raw output.
  double delta_scale = 0.1;

  void validate() const;
  nlohmann::json to_json() const;
  /// Zero weights; use with assign_een.
  static EenWeights from_json(const nlohmann::json& j);
};

/// Mirrors the base network's layer sizes. recurrent = false drops the GRU.
EenWeights make_een(const DmcModel& base, std::uint64_t seed, bool recurrent = true);

ParamSet een_params(const EenWeights& w);
void assign_een(EenWeights& w, const ParamSet& p);

/// Checkpoint with meta {"een": ..., "base": ...} and arrays "p/<name>".
void save_een(const std::filesystem::path& path, const EenWeights& w, const nlohmann::json& base = {});
EenWeights load_een(const std::filesystem::path& path);
EenWeights een_from_checkpoint(const Checkpoint& ck);

/// Raw outputs (T x d, in [-1, 1]) for a per-day error sequence. Absent errors count as 0.
Eigen::MatrixXd een_forward(const EenWeights& w, const Observations& errors, int cultivar);

/// Base composition plus the error network on one tape. Shared by training and inference.
class AdaptCore {
 public:
  AdaptCore(ad::Tape& tape, const DmcModel& base, const NetBinding& base_net, const NetBinding& een_net,
            const ad::Var& cultivar_scalar, double delta_scale, std::vector<int> cultivars);

  /// Steps one day. `error` (B entries, 0 where absent) is the signal observed the day before.
  ad::Var step(const ad::Var& x, const Eigen::VectorXd& tmean, const Eigen::VectorXd& error);
  /// Observation minus today's prediction, in natural units; 0 where `visible` is false.
  Eigen::VectorXd error(const Eigen::VectorXd& observed, const std::vector<bool>& visible) const;

  DmcCore& core() { return core_; }
  const DmcCore& core() const { return core_; }

 private:
  ad::Tape* tape_;
  const DmcModel* base_;
  std::vector<int> cultivars_;
  DmcCore core_;
  NetRunner een_;
  ad::Var scalar_;
  double delta_scale_;
};

/// Season rollout with the base model frozen. `obs` may be shorter than the season.
DmcRollout adapt_rollout(const DmcModel& base, const EenWeights& een, const WeatherSeries& series, int cultivar,
                         const Observations& obs);

/// Adapted forecast: observations apply to `past`, then `horizon` days of `future` follow.
CropStateSeries adapt_forecast(const DmcModel& base, const EenWeights& een, const WeatherSeries& past,
                               const Observations& obs, const WeatherSeries& future, int horizon, int cultivar);

/// Observation CSV rows: date, cultivar, value.
struct ObservationRecord {
  Date date;
  std::string cultivar;
  double value = 0.0;
};
std::vector<ObservationRecord> read_observations(const std::filesystem::path& path);
/// Aligns the records of one cultivar with the season's dates. Throws for dates outside the season.
Observations align_observations(const std::vector<ObservationRecord>& records, const std::string& cultivar,
                                const WeatherSeries& series);
/// Labels of a dataset season on days [0, cutoff).
Observations season_observations(const Season& s, std::size_t cutoff);

/// Masked MSE of the adapted composite; each season hides its observations from a random cutoff on.
class EenObjective final : public Objective {
 public:
  EenObjective(const DmcModel& base, const EenWeights& een, const Dataset& data, std::vector<std::size_t> train,
               std::vector<std::size_t> validation = {});

  std::size_t train_size() const override { return train_.size(); }
  ad::Var loss(ad::Tape& tape, const std::map<std::string, ad::Var>& params, std::span<const std::size_t> items,
               Rng& rng) override;
  /// Every season's cutoff is half its length.
  std::optional<double> validation_loss(const ParamSet& params) override;

  /// Overrides the random cutoff.
  std::optional<int> fixed_cutoff;

 private:
  ad::Var batch_loss(ad::Tape& tape, const NetBinding& een, const ad::Var& scalar, const Batch& batch,
                     const std::vector<int>& cutoffs) const;

  const DmcModel& base_;
  const EenWeights& een_;
  const Dataset& data_;
  std::vector<std::size_t> train_, validation_;
};

/// Trains `een` against the frozen base; on return it holds the best-validation weights.
TrainResult train_een(const DmcModel& base, EenWeights& een, const Dataset& data,
                      const std::vector<std::size_t>& train_idx, const std::vector<std::size_t>& val_idx,
                      const TrainConfig& config, const TrainOutputs& out = {},
                      const std::optional<std::filesystem::path>& resume = std::nullopt);

}  // namespace dmc
