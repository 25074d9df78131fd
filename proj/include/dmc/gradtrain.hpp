#pragma once

// Losses, finite-difference verification, the optimizer with plateau
// annealing, the generic training loop and static gradient-descent calibration.

#include "dmc/ad.hpp"
#include "dmc/dataset.hpp"
#include "dmc/paramnet.hpp"
#include "dmc/rng.hpp"

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace dmc {

// ---------------------------------------------------------------------------
// Losses

/// Mean of (pred - target)^2 over entries where mask is true; 0 when nothing is observed.
ad::Var masked_mse(const ad::Var& pred, const Eigen::MatrixXd& target, const ad::Mask& mask);
ad::Var masked_mse(const ad::Var& pred, const ad::Var& target, const ad::Mask& mask);
/// (1 - p) * MSE(pred, target) + p * MSE(pred, biophys).
ad::Var pinn_loss(const ad::Var& pred, const Eigen::MatrixXd& target, const Eigen::MatrixXd& biophys,
                  const ad::Mask& mask, double p);
/// logits: N x C; mean negative log-likelihood of `target` over rows where mask is true.
ad::Var cross_entropy(const ad::Var& logits, const std::vector<int>& target, const std::vector<bool>& mask);

// ---------------------------------------------------------------------------
// Finite differences

/// Builds a scalar on `tape` from the given leaves.
using ScalarFn = std::function<ad::Var(ad::Tape& tape, const std::vector<ad::Var>& leaves)>;

struct FdReport {
  double max_rel_error = 0.0;
  int checked = 0;
  /// Coordinates whose one-sided slopes disagree down to eps / 1000, i.e. the point sits on a kink.
  int excluded = 0;
  std::vector<std::pair<std::size_t, Eigen::Index>> excluded_coords;
};

/// Central differences on `coords` random coordinates (all of them when fewer exist).
/// The step shrinks by 10x (to eps / 1000) while the one-sided slopes disagree.
/// Relative error is |g_ad - g_fd| / (|g_fd| + 1e-8).
FdReport finite_diff_check(const ScalarFn& f, const std::vector<Eigen::MatrixXd>& point, std::uint64_t seed,
                           int coords = 200, double eps = 1e-4);

// ---------------------------------------------------------------------------
// Optimizer

/// Named trainable arrays.
using ParamSet = std::map<std::string, Eigen::MatrixXd>;
using GradSet = std::map<std::string, Eigen::MatrixXd>;

double global_norm(const GradSet& g);
/// Scales g in place so its global norm is at most max_norm. Returns the norm before clipping.
double clip_global_norm(GradSet& g, double max_norm);

struct Adam {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step_count = 0;
  ParamSet m, v;

  void step(ParamSet& params, const GradSet& grads);
};

/// Multiplies the learning rate by `factor` after `patience` epochs without a new best loss.
struct PlateauScheduler {
  double factor = 0.9;
  int patience = 10;
  double best = std::numeric_limits<double>::infinity();
  int bad_epochs = 0;

  /// Returns true when the learning rate was annealed after this epoch.
  bool observe(double loss, double& lr);
};

// ---------------------------------------------------------------------------
// Training loop

struct TrainConfig {
  int epochs = 400;
  double learning_rate = 1e-4;
  int batch_size = 12;
  double anneal_factor = 0.9;
  int plateau_patience = 10;
  double clip_norm = 10.0;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  /// Unknown keys are rejected with std::invalid_argument naming the key.
  static TrainConfig from_json(const nlohmann::json& j, const TrainConfig& defaults);
  static TrainConfig from_json(const nlohmann::json& j);
};

/// Learning-rate and batch-size presets by model kind.
struct LrPreset {
  double learning_rate;
  int batch_size;
};
/// Kinds: dmc-mtl, dmc-stl, deep-mtl, pinn, temphybrid, gd, and "dmc-mtl-main" for the main-text rate.
LrPreset lr_preset(const std::string& kind);

class Objective {
 public:
  virtual ~Objective() = default;
  virtual std::size_t train_size() const = 0;
  /// Mean loss over `items` built on the tape from the bound parameters.
  virtual ad::Var loss(ad::Tape& tape, const std::map<std::string, ad::Var>& params, std::span<const std::size_t> items,
                       Rng& rng) = 0;
  /// Validation loss for the current parameters; nullopt when there is no validation data.
  virtual std::optional<double> validation_loss(const ParamSet&) { return std::nullopt; }
};

struct TrainOutputs {
  std::filesystem::path dir;  // empty: keep everything in memory
  std::string name = "model";
  nlohmann::json meta;        // stored in every checkpoint
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  std::optional<double> val_loss;
  double lr = 0.0;
};

struct TrainResult {
  ParamSet final_params;
  ParamSet best_params;  // lowest validation loss (final when no validation data)
  std::vector<EpochRecord> log;
  std::filesystem::path final_checkpoint;
  std::filesystem::path best_checkpoint;
};

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, int epoch) : std::runtime_error(what), epoch_(epoch) {}
  int epoch() const { return epoch_; }

 private:
  int epoch_;
};

/// Mini-batch Adam with gradient clipping and plateau annealing on the training loss.
/// With a directory in `out`, writes <name>.final.ckpt, <name>.best.ckpt and <name>.loss.csv;
/// `resume` continues from a final checkpoint and appends to the loss log.
TrainResult train(ParamSet params, Objective& objective, const TrainConfig& config, const TrainOutputs& out = {},
                  const std::optional<std::filesystem::path>& resume = std::nullopt);

void write_loss_log(const std::filesystem::path& path, const std::vector<EpochRecord>& log);
std::vector<EpochRecord> read_loss_log(const std::filesystem::path& path);

/// ParamSet stored by train() in a checkpoint (prefix "p/").
ParamSet params_from_checkpoint(const Checkpoint& ck);

ParamSet to_params(const NetWeights& w, const std::string& prefix = "");
void assign_params(NetWeights& w, const ParamSet& p, const std::string& prefix = "");
std::map<std::string, ad::Var> subset_vars(const std::map<std::string, ad::Var>& all, const std::string& prefix);
NetBinding bind_vars(const NetWeights& w, const std::map<std::string, ad::Var>& vars, const std::string& prefix = "");

// ---------------------------------------------------------------------------
// Static calibration

struct GdCalibration {
  CropModel model = CropModel::Gdd;
  /// One static parameter vector per cultivar (rows follow dataset cultivar ids).
  std::vector<Eigen::VectorXd> params;
  std::vector<std::vector<EpochRecord>> logs;
};

/// Per-cultivar gradient descent on tanh-squashed logits through the differentiable
/// rollout. Phenology fits onset times, hardiness fits observed LTE50.
GdCalibration gd_calibrate(const Dataset& train_data, const ParamSpec& spec, const TrainConfig& config,
                           const GddOptions& gdd = {});

/// Loss used by gd_calibrate for one batch of seasons under per-row static params (B x d).
ad::Var calibration_loss(ad::Tape& tape, const Batch& batch, const ad::Var& params, CropModel model,
                         const GddOptions& gdd = {});

}  // namespace dmc
