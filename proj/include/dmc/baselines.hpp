#pragma once

// Comparison models. Every model is reachable through Predictor so the
// evaluation code does not care which one it scores.

#include "dmc/hybrid.hpp"
#include "dmc/synthgen.hpp"

#include <filesystem>
#include <memory>

namespace dmc {

enum class BaselineKind {
  DeployedBio,
  GdStatic,
  DeepMtl,
  Pinn,
  Residual,
  TempHybrid,
  DmcStl,
  DmcAgg,
  DmcMult,
  DmcAdd,
  DmcMultiH
};

std::string to_string(BaselineKind k);
BaselineKind baseline_kind_from_string(const std::string& s);
const std::vector<BaselineKind>& all_baseline_kinds();

// ---------------------------------------------------------------------------
// Static biophysical models

/// {"model": "gdd", "cultivars": {"<name>": {"TBASEM": 4.0, ...}, ...}}
CultivarTable read_published_params(const std::filesystem::path& path);
void write_published_params(const std::filesystem::path& path, const CultivarTable& table);

/// Oracle rollout with the cultivar's published parameters. Throws for an unknown cultivar.
CropStateSeries deployed_bio(const CultivarTable& table, const std::string& cultivar, const WeatherSeries& series);

/// Phenology series from a continuous stage prediction: rounded, clipped to [0, 4], onsets at first crossing.
CropStateSeries stage_series(std::span<const double> stage);

// ---------------------------------------------------------------------------
// Deep-MTL and PINN

struct DeepMtlModel {
  NetWeights net;          // identity output; out_dim 4 (classes) or 1 (regression)
  CropModel task = CropModel::Gdd;
  bool classification = false;
  NormStats stats;
  std::vector<std::string> cultivars;

  nlohmann::json to_json() const;
  static DeepMtlModel from_json(const nlohmann::json& j);
};

/// Phenology defaults to a 4-class head, hardiness to a single regression output.
DeepMtlModel make_deep_mtl(const NetConfig& config, CropModel task, bool classification, const NormStats& stats,
                           std::vector<std::string> cultivars, std::uint64_t seed);

/// T x out_dim raw outputs: class logits or the regressed value.
Eigen::MatrixXd deep_mtl_forward(const DeepMtlModel& m, const WeatherSeries& series, int cultivar);
/// Classes: stage = argmax, onset k = first day class k is the argmax.
CropStateSeries deep_mtl_rollout(const DeepMtlModel& m, const WeatherSeries& series, int cultivar);

/// Masked MSE, cross entropy, or the physics-blended loss when `physics` is given.
class DeepObjective final : public Objective {
 public:
  /// `physics` holds one static parameter vector per cultivar for the PINN reference rollout.
  DeepObjective(const DeepMtlModel& model, const Dataset& data, std::vector<std::size_t> train,
                std::vector<std::size_t> validation = {}, std::optional<std::vector<Eigen::VectorXd>> physics = {},
                double pinn_weight = 0.5);

  std::size_t train_size() const override { return train_.size(); }
  ad::Var loss(ad::Tape& tape, const std::map<std::string, ad::Var>& params, std::span<const std::size_t> items,
               Rng& rng) override;
  std::optional<double> validation_loss(const ParamSet& params) override;

 private:
  ad::Var batch_loss(ad::Tape& tape, const NetBinding& net, const std::vector<std::size_t>& idx) const;

  const DeepMtlModel& model_;
  const Dataset& data_;
  std::vector<std::size_t> train_, validation_;
  std::optional<std::vector<Eigen::VectorXd>> physics_;
  double pinn_weight_;
  std::vector<Eigen::VectorXd> physics_cache_;  // per dataset season
};

// ---------------------------------------------------------------------------
// Residual hybrid

struct ResidualModel {
  NetWeights net;  // identity output, out_dim 1
  CropModel task = CropModel::Gdd;
  std::vector<Eigen::VectorXd> statics;  // per cultivar
  NormStats stats;
  std::vector<std::string> cultivars;
  GddOptions gdd;

  nlohmann::json to_json() const;
  static ResidualModel from_json(const nlohmann::json& j);
};

ResidualModel make_residual(const NetConfig& config, CropModel task, std::vector<Eigen::VectorXd> statics,
                            const NormStats& stats, std::vector<std::string> cultivars, std::uint64_t seed);
/// Static rollout plus the network output on every day.
CropStateSeries residual_rollout(const ResidualModel& m, const WeatherSeries& series, int cultivar);

class ResidualObjective final : public Objective {
 public:
  ResidualObjective(const ResidualModel& model, const Dataset& data, std::vector<std::size_t> train,
                    std::vector<std::size_t> validation = {});

  std::size_t train_size() const override { return train_.size(); }
  ad::Var loss(ad::Tape& tape, const std::map<std::string, ad::Var>& params, std::span<const std::size_t> items,
               Rng& rng) override;
  std::optional<double> validation_loss(const ParamSet& params) override;

 private:
  ad::Var batch_loss(ad::Tape& tape, const NetBinding& net, const std::vector<std::size_t>& idx) const;

  const ResidualModel& model_;
  const Dataset& data_;
  std::vector<std::size_t> train_, validation_;
  std::vector<std::vector<double>> bio_;  // static rollout per dataset season
};

// ---------------------------------------------------------------------------
// TempHybrid

/// A 1 -> hidden -> 1 ReLU network replaces the daily temperature response
/// (degree days for phenology, the chilling term for hardiness). Parameters are
/// static per cultivar, stored as logits and squashed into their ranges.
struct TempHybridModel {
  CropModel task = CropModel::Gdd;
  ParamSpec spec;
  GddOptions gdd;
  std::vector<std::string> cultivars;
  /// Arrays "ffn.w1" (1 x h), "ffn.b1" (1 x h), "ffn.w2" (h x 1), "ffn.b2" (1 x 1), "logits" (n x d).
  ParamSet arrays;
  /// tmean is multiplied by this before entering the network.
  double input_scale = 1.0 / 30.0;

  int hidden() const { return static_cast<int>(arrays.at("ffn.w1").cols()); }
  nlohmann::json to_json() const;
  static TempHybridModel from_json(const nlohmann::json& j);
};

TempHybridModel make_temphybrid(CropModel task, std::vector<std::string> cultivars, std::uint64_t seed,
                                int hidden = 64);

/// Daily response for natural-unit temperatures: nonnegative degree days, or nonpositive chilling.
ad::Var temphybrid_response(const std::map<std::string, ad::Var>& arrays, CropModel task, double input_scale,
                            const ad::Var& tmean);
Eigen::VectorXd temphybrid_response(const TempHybridModel& m, const Eigen::VectorXd& tmean);
/// Static parameters of one cultivar.
Eigen::VectorXd temphybrid_params(const TempHybridModel& m, int cultivar);
CropStateSeries temphybrid_rollout(const TempHybridModel& m, const WeatherSeries& series, int cultivar);

class TempHybridObjective final : public Objective {
 public:
  TempHybridObjective(const TempHybridModel& model, const Dataset& data, std::vector<std::size_t> train,
                      std::vector<std::size_t> validation = {});

  std::size_t train_size() const override { return train_.size(); }
  ad::Var loss(ad::Tape& tape, const std::map<std::string, ad::Var>& params, std::span<const std::size_t> items,
               Rng& rng) override;
  std::optional<double> validation_loss(const ParamSet& params) override;

 private:
  ad::Var batch_loss(ad::Tape& tape, const std::map<std::string, ad::Var>& params,
                     const std::vector<std::size_t>& idx) const;

  const TempHybridModel& model_;
  const Dataset& data_;
  std::vector<std::size_t> train_, validation_;
};

// ---------------------------------------------------------------------------
// DMC variants

/// DmcAgg, DmcMult, DmcAdd and DmcMultiH as one DmcModel; DmcAgg has no embedding and a single cultivar slot.
DmcModel make_variant(BaselineKind kind, const NetConfig& config, CropModel task, const NormStats& stats,
                      std::vector<std::string> cultivars, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Uniform interface

class Predictor {
 public:
  virtual ~Predictor() = default;
  /// Model kind string, e.g. "dmc-mtl" or "deep-mtl".
  virtual std::string kind() const = 0;
  virtual CropModel task() const = 0;
  virtual CropStateSeries predict(const WeatherSeries& series, int cultivar) const = 0;
  virtual Checkpoint checkpoint() const = 0;
  /// Per-day parameters when the model has them (rows = days), else empty.
  virtual Eigen::MatrixXd parameters(const WeatherSeries&, int) const { return {}; }
};

struct FitOptions {
  NetConfig net;                                 // layer sizes for network models
  TrainConfig train;                             // epochs, rate, batch, seed
  std::optional<TrainConfig> calibration;        // static calibration inside Residual/PINN
  std::optional<CultivarTable> published;        // DeployedBio parameters
  TrainOutputs out;                              // checkpoints and loss logs when dir is set
  bool classification = true;                    // Deep-MTL phenology head
  std::optional<int> scored_stage;               // dmc-mtl: train on one transition only
};

/// Kinds: every BaselineKind string plus "dmc-mtl".
std::vector<std::string> model_kinds();
std::unique_ptr<Predictor> fit_predictor(const std::string& kind, const Dataset& data,
                                         const std::vector<std::size_t>& train_idx,
                                         const std::vector<std::size_t>& val_idx, const FitOptions& options);

std::unique_ptr<Predictor> make_predictor(DmcModel m, const std::string& kind = "dmc-mtl");
/// The single DMC model behind a predictor, or nullptr (STL and non-DMC kinds).
const DmcModel* as_dmc(const Predictor& p);
std::unique_ptr<Predictor> predictor_from_checkpoint(const Checkpoint& ck);
void save_predictor(const std::filesystem::path& path, const Predictor& p);
std::unique_ptr<Predictor> load_predictor(const std::filesystem::path& path);

}  // namespace dmc
