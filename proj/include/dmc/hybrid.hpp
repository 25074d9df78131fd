#pragma once

// The network predicts a parameter vector every day and the biophysical
// kernel is stepped with it.

#include "dmc/biophys.hpp"
#include "dmc/dataset.hpp"
#include "dmc/gradtrain.hpp"
#include "dmc/paramnet.hpp"

#include <deque>
#include <filesystem>
#include <optional>

namespace dmc {

struct DmcModel {
  NetWeights net;
  ParamSpec spec;
  CropModel biophys = CropModel::Gdd;
  /// Daily delta scale s: w_0 is the range midpoint and w_t = clamp(w_{t-1} + s * width * raw_t).
  std::optional<double> smoothing;
  /// Recurrence restarted over the trailing k days for every prediction.
  std::optional<int> window;
  /// Step the kernel on day t with the parameters predicted on day t - 1.
  bool apply_next_day = false;
  /// Phenology only: train on a single transition (0 bud break, 1 bloom, 2 veraison).
  std::optional<int> scored_stage;
  GddOptions gdd;
  NormStats stats;
  std::vector<std::string> cultivars;

  void validate() const;
  /// Everything except the weight arrays.
  nlohmann::json to_json() const;
  /// Rebuilds the model around zero weights; use with assign_params.
  static DmcModel from_json(const nlohmann::json& j);
};

/// Builds a model with freshly initialized weights for a dataset.
DmcModel make_dmc(const NetConfig& config, CropModel biophys, const NormStats& stats,
                  std::vector<std::string> cultivars, std::uint64_t seed);

/// Checkpoint with meta {"model": ...} and arrays "p/<name>", as written by train().
void save_dmc(const std::filesystem::path& path, const DmcModel& m);
DmcModel load_dmc(const std::filesystem::path& path);
DmcModel dmc_from_checkpoint(const Checkpoint& ck);

/// State needed to continue a rollout on a fresh tape.
struct DmcState {
  int day = 0;
  Eigen::MatrixXd hidden;
  KernelSnapshot kernel;
  Eigen::MatrixXd omega;                  // B x d, last predicted parameters
  std::deque<Eigen::MatrixXd> recent;     // trailing inputs for the windowed net
  bool started = false;
};

/// Batched composition on a tape. Training and inference share this code path.
class DmcCore {
 public:
  DmcCore(ad::Tape& tape, const DmcModel& model, const NetBinding& net, std::vector<int> cultivars);
  DmcCore(ad::Tape& tape, const DmcModel& model, const NetBinding& net, std::vector<int> cultivars,
          const DmcState& resume);

  /// Raw network output in [-1, 1] for today's normalized inputs (B x F).
  ad::Var raw(const ad::Var& x);
  /// Combines today's raw output (plus an optional additive correction) into the
  /// parameters, steps the kernel with natural-unit tmean and returns the applied B x d parameters.
  ad::Var advance(const ad::Var& raw, const Eigen::VectorXd& tmean, const ad::Var* delta = nullptr);
  ad::Var step(const ad::Var& x, const Eigen::VectorXd& tmean) { return advance(raw(x), tmean); }

  BiophysKernel& kernel() { return *kernel_; }
  const BiophysKernel& kernel() const { return *kernel_; }
  /// Loss target series: soft stage over the scored transitions, or LTE50.
  ad::Var training_output() const;
  DmcState state() const;
  int day() const { return day_; }

 private:
  ad::Tape* tape_;
  const DmcModel* model_;
  const NetBinding* net_;
  std::vector<int> cultivars_;
  NetRunner runner_;
  std::unique_ptr<BiophysKernel> kernel_;
  int day_ = 0;
  ad::Var omega_;   // last predicted (smoothing state / next-day parameters)
  bool started_ = false;
  std::deque<ad::Var> recent_;
};

struct DmcRollout {
  CropStateSeries states;
  Eigen::MatrixXd omega;  // T x d applied parameters
};

/// Single-season inference. `series` is in natural units and is normalized with model.stats.
DmcRollout dmc_rollout(const DmcModel& model, const WeatherSeries& series, int cultivar);
/// Same with an explicit delta scale.
DmcRollout dmc_rollout_smoothed(const DmcModel& model, double delta_scale, const WeatherSeries& series, int cultivar);

/// Incremental single-season inference that can be paused and resumed.
class DmcSession {
 public:
  DmcSession(const DmcModel& model, int cultivar);
  DmcSession(const DmcModel& model, int cultivar, const DmcState& resume);
  DmcSession(const DmcSession&) = delete;
  DmcSession& operator=(const DmcSession&) = delete;

  /// Steps every row of `series`.
  void advance(const WeatherSeries& series, std::size_t days);
  void advance(const WeatherSeries& series) { advance(series, series.days()); }
  DmcState state() const { return core_->state(); }
  /// Predictions and parameters for the days stepped by this session.
  DmcRollout result() const;

 private:
  const DmcModel* model_;
  int cultivar_;
  std::unique_ptr<ad::Tape> tape_;
  NetBinding net_;
  std::unique_ptr<DmcCore> core_;
  std::vector<Eigen::RowVectorXd> omega_;
};

/// Continues from the end of `past` over the first `horizon` days of `future`.
CropStateSeries forecast(const DmcModel& model, const WeatherSeries& past, const WeatherSeries& future, int horizon,
                         int cultivar);

/// Prediction CSV: date, stage and stage name (phenology) or lte50, then one column per parameter.
void write_predictions(const std::filesystem::path& path, const WeatherSeries& series, const DmcRollout& r,
                       const ParamSpec& spec);

/// Masked MSE of the composite over seasons of a dataset.
class DmcObjective final : public Objective {
 public:
  DmcObjective(const DmcModel& model, const Dataset& data, std::vector<std::size_t> train,
               std::vector<std::size_t> validation = {});

  std::size_t train_size() const override { return train_.size(); }
  ad::Var loss(ad::Tape& tape, const std::map<std::string, ad::Var>& params, std::span<const std::size_t> items,
               Rng& rng) override;
  std::optional<double> validation_loss(const ParamSet& params) override;

 private:
  ad::Var batch_loss(ad::Tape& tape, const NetBinding& net, const Batch& batch) const;

  const DmcModel& model_;
  const Dataset& data_;
  std::vector<std::size_t> train_, validation_;
};

/// Runs train() for a DMC model; on return model.net holds the best-validation weights
/// (final weights when there is no validation split).
TrainResult train_dmc(DmcModel& model, const Dataset& data, const std::vector<std::size_t>& train_idx,
                      const std::vector<std::size_t>& val_idx, const TrainConfig& config, const TrainOutputs& out = {},
                      const std::optional<std::filesystem::path>& resume = std::nullopt);

}  // namespace dmc
