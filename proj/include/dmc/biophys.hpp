#pragma once

// Differentiable grapevine phenology (growing degree days) and cold-hardiness
// (Ferguson) models.
//
// The kernels advance a batch of seasons one day at a time on an ad::Tape.
// Parameters may change every day. Every conditional is expressed as an
// elementwise select so a batch takes the same code path for every row, and
// the continuous quantities stay differentiable with respect to the daily
// parameters. The oracle_* functions are independent reference rollouts
// written with ordinary branches and static parameters.

#include "dmc/ad.hpp"
#include "dmc/params.hpp"

#include <array>
#include <memory>
#include <optional>
#include <span>
#include <vector>

namespace dmc {

enum class Stage : int { Dormant = 0, BudBreak = 1, Bloom = 2, Veraison = 3, Ripe = 4 };
inline constexpr int kNumTransitions = 4;

enum class DormancyPhase : int { Endodormancy = 0, Ecodormancy = 1 };

struct GddOptions {
  /// Dormant->BudBreak threshold is TSUMEM + TSUM1 when true, TSUM1 alone otherwise.
  bool pool_emergence = true;
  /// Carry dd_accum - threshold into the next stage; hard reset to 0 otherwise.
  bool carry_overshoot = true;
};

struct PhenologyState {
  Stage stage = Stage::Dormant;
  double dd_accum = 0.0;
  std::array<std::optional<int>, kNumTransitions> onset{};  // BudBreak..Ripe
};

struct HardinessState {
  double hc = 0.0;
  double chill_sum = 0.0;
  DormancyPhase phase = DormancyPhase::Endodormancy;
};

/// Daily crop state, predicted or observed.
struct CropStateSeries {
  CropModel model = CropModel::Gdd;
  std::vector<double> values;  // stage index or LTE50 in degC
  std::vector<bool> observed;
  std::array<std::optional<int>, kNumTransitions> onsets{};

  std::size_t size() const { return values.size(); }
  static CropStateSeries predicted(CropModel m, std::vector<double> v);
};

/// Extracts onset days (first day a stage index >= k) from a daily stage series.
std::array<std::optional<int>, kNumTransitions> onsets_from_stages(std::span<const double> stages);

double gdd_response(double tmean, const GddParams& p);
ad::Var gdd_response(const ad::Var& tmean, const ad::Var& tbasem, const ad::Var& teffmx);

/// Value snapshot of a batched kernel; enough to resume bit-exactly.
struct KernelSnapshot {
  CropModel model = CropModel::Gdd;
  int day = 0;
  bool started = false;
  // Phenology.
  Eigen::ArrayXi stage;
  Eigen::VectorXd acc;
  Eigen::MatrixXd crossing;  // B x 4 fractional crossing times
  Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> crossed;
  Eigen::ArrayXXi onset_day;  // B x 4, -1 when not reached
  Eigen::VectorXd dd_sum;
  int days_seen = 0;
  // Hardiness.
  Eigen::VectorXd hc;
  Eigen::VectorXd chill;
  Eigen::Array<bool, Eigen::Dynamic, 1> eco;
};

class BiophysKernel {
 public:
  virtual ~BiophysKernel() = default;

  /// params: B x d parameter values for today; tmean: B daily mean temperatures.
  virtual void step(const ad::Var& params, const Eigen::VectorXd& tmean) = 0;

  /// B x T differentiable prediction over the stepped days, used by losses.
  virtual ad::Var training_output() const = 0;
  /// B x T observable prediction (discrete stage index or LTE50).
  virtual Eigen::MatrixXd observable() const = 0;
  /// Today's observable prediction, B entries.
  virtual Eigen::VectorXd current_observable() const = 0;
  virtual KernelSnapshot snapshot() const = 0;

  virtual CropModel model() const = 0;
  virtual std::size_t batch() const = 0;
  /// Days stepped by this kernel instance.
  virtual int steps() const = 0;
};

class GddKernel final : public BiophysKernel {
 public:
  GddKernel(ad::Tape& tape, std::size_t batch, GddOptions options = {});
  GddKernel(ad::Tape& tape, const KernelSnapshot& resume, GddOptions options = {});

  void step(const ad::Var& params, const Eigen::VectorXd& tmean) override;
  /// Same as step with a caller-supplied B x 1 daily degree-day increment.
  void step_response(const ad::Var& params, const ad::Var& dd);
  ad::Var training_output() const override { return soft_stage(); }
  Eigen::MatrixXd observable() const override;
  Eigen::VectorXd current_observable() const override;
  KernelSnapshot snapshot() const override;
  CropModel model() const override { return CropModel::Gdd; }
  std::size_t batch() const override { return batch_; }
  int steps() const override { return static_cast<int>(stage_history_.size()); }

  /// B x 4 fractional crossing times. A transition registered on day d has a
  /// crossing time in (d-1, d]; unreached transitions are extrapolated from
  /// the mean daily accumulation rate.
  ad::Var crossing_times() const;
  /// B x T soft stage: sum_k clamp(t - crossing_k + 0.5, 0, 1) over the first `transitions`.
  ad::Var soft_stage(int transitions = kNumTransitions) const;
  /// B x T ramp of one transition; soft_stage(n) is the sum of the first n ramps.
  ad::Var soft_transition(int k) const;
  /// Onset day per row for transitions actually reached.
  std::vector<std::array<std::optional<int>, kNumTransitions>> onsets() const { return onset_; }
  const Eigen::ArrayXi& stage() const { return stage_; }
  Eigen::VectorXd dd_accum() const { return acc_.value(); }

 private:
  ad::Var threshold(const ad::Var& params, int transition) const;

  ad::Tape* tape_;
  std::size_t batch_;
  GddOptions options_;
  int start_day_ = 0;
  int day_ = 0;
  Eigen::ArrayXi stage_;
  ad::Var acc_;
  std::array<ad::Var, kNumTransitions> crossing_;
  Eigen::Array<bool, Eigen::Dynamic, kNumTransitions> crossed_;
  std::vector<std::array<std::optional<int>, kNumTransitions>> onset_;
  ad::Var dd_sum_;
  int days_seen_ = 0;
  ad::Var last_params_;
  std::vector<Eigen::ArrayXi> stage_history_;
};

class FergusonKernel final : public BiophysKernel {
 public:
  FergusonKernel(ad::Tape& tape, std::size_t batch);
  FergusonKernel(ad::Tape& tape, const KernelSnapshot& resume);

  void step(const ad::Var& params, const Eigen::VectorXd& tmean) override { step_response(params, tmean, nullptr); }
  /// A non-null `chill_response` (B x 1) replaces the daily chilling term min(tmean - base, 0).
  void step_response(const ad::Var& params, const Eigen::VectorXd& tmean, const ad::Var* chill_response);
  ad::Var training_output() const override;
  Eigen::MatrixXd observable() const override;
  Eigen::VectorXd current_observable() const override { return hc_.value(); }
  KernelSnapshot snapshot() const override;
  CropModel model() const override { return CropModel::Ferguson; }
  std::size_t batch() const override { return batch_; }
  int steps() const override { return static_cast<int>(history_.size()); }

  const Eigen::Array<bool, Eigen::Dynamic, 1>& eco() const { return eco_; }
  Eigen::VectorXd chill_sum() const { return chill_.value(); }

 private:
  ad::Tape* tape_;
  std::size_t batch_;
  int day_ = 0;
  bool started_ = false;
  ad::Var hc_;
  ad::Var chill_;
  Eigen::Array<bool, Eigen::Dynamic, 1> eco_;
  std::vector<ad::Var> history_;
};

std::unique_ptr<BiophysKernel> make_kernel(CropModel m, ad::Tape& tape, std::size_t batch, GddOptions gdd = {});
std::unique_ptr<BiophysKernel> resume_kernel(ad::Tape& tape, const KernelSnapshot& s, GddOptions gdd = {});

// Single-season API built on the kernels.
PhenologyState gdd_step(const PhenologyState& state, const GddParams& p, double tmean, int day,
                        const GddOptions& options = {});
HardinessState ferguson_step(const HardinessState& state, const FergusonParams& p, double tmean);

/// params_seq has length 1 (static) or tmean.size() (one vector per day).
CropStateSeries gdd_rollout(std::span<const double> tmean, const std::vector<GddParams>& params_seq,
                            const GddOptions& options = {});
CropStateSeries ferguson_rollout(std::span<const double> tmean, const std::vector<FergusonParams>& params_seq);
/// Generic rollout over parameter vectors of either model.
CropStateSeries biophys_rollout(CropModel m, std::span<const double> tmean,
                                const std::vector<Eigen::VectorXd>& params_seq, const GddOptions& options = {});

// Reference implementations with plain conditionals.
CropStateSeries oracle_gdd(std::span<const double> tmean, const GddParams& p, const GddOptions& options = {});
CropStateSeries oracle_ferguson(std::span<const double> tmean, const FergusonParams& p);
CropStateSeries oracle_rollout(CropModel m, std::span<const double> tmean, const Eigen::VectorXd& p,
                               const GddOptions& options = {});

}  // namespace dmc
