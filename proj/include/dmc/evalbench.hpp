#pragma once

// Splits, scores, significance tests and the experiment sweeps.

#include "dmc/baselines.hpp"

#include <filesystem>
#include <functional>

namespace dmc {

inline const std::vector<std::uint64_t> kCanonicalSeeds{0, 1, 2, 3, 4};

// ---------------------------------------------------------------------------
// Splits

struct SplitPlan {
  std::uint64_t seed = 0;
  std::vector<std::size_t> train, val, test;  // dataset season indices, ascending
  std::vector<int> excluded;                  // cultivars with fewer than 4 seasons

  nlohmann::json to_json() const;
};

/// Per cultivar: 2 test seasons, 1 validation season, the rest training, drawn uniformly.
SplitPlan make_splits(const Dataset& data, std::uint64_t seed);

/// Keeps at most `n` training seasons per cultivar (the first ones of a seeded shuffle).
std::vector<std::size_t> limit_seasons(const Dataset& data, const std::vector<std::size_t>& train, int n,
                                       std::uint64_t seed);

// ---------------------------------------------------------------------------
// Scores

enum class OnsetAggregation { Rmse, Sum };

/// Per-stage onset errors in days (pred - true), a missing prediction scored at `season_end`.
/// Empty when the truth misses one of the scored stages.
std::optional<std::array<double, kScoredTransitions>> onset_errors(const Onsets& pred, const Onsets& truth,
                                                                   int season_end);
/// sqrt(mean squared error over the three stages), or the summed absolute error.
double season_onset_error(const std::array<double, kScoredTransitions>& e,
                          OnsetAggregation agg = OnsetAggregation::Rmse);

/// Mean per-season onset RMSE; seasons whose truth misses a stage are skipped. nullopt when none remain.
std::optional<double> rmse_phenology(const std::vector<Onsets>& pred, const std::vector<Onsets>& truth,
                                     const std::vector<int>& season_end,
                                     OnsetAggregation agg = OnsetAggregation::Rmse);
/// RMSE over days where mask is true. Throws when no day is unmasked.
double rmse_hardiness(std::span<const double> pred, std::span<const double> truth, const std::vector<bool>& mask);

struct TTest {
  double t = 0.0;
  double p = 1.0;
  int df = 0;
};
/// Two-sided paired t-test on a - b. Zero-variance differences give t = 0, p = 1 for a zero
/// mean and t = +-inf, p = 0 otherwise.
TTest paired_ttest(std::span<const double> a, std::span<const double> b);
/// Two-sided p-value of t with df degrees of freedom.
double t_pvalue(double t, int df);

/// Fraction of values <= tau for each (sorted) threshold.
std::vector<double> coverage_curve(std::span<const double> rmse, std::span<const double> thresholds);

struct Violation {
  int day = 0;
  double value = 0.0;
  std::string reason;
};
struct RealismBounds {
  double lower = -40.0;  // lowest HCMAX
  double upper = 0.0;    // highest HCMIN
  double eps = 1e-9;
};
/// Phenology: days where the stage decreases or leaves [0, 4]. Hardiness: days outside the bounds.
std::vector<Violation> realism_check(const CropStateSeries& s, const RealismBounds& bounds = {});

// ---------------------------------------------------------------------------
// Evaluating a predictor

struct SeasonScore {
  std::size_t season = 0;
  int cultivar = 0;
  int year = 0;
  double error = 0.0;                                       // onset RMSE (days) or LTE50 RMSE (degC)
  std::optional<std::array<double, kScoredTransitions>> stage_errors;  // phenology
  bool missing_onset = false;                               // a predicted onset was scored at the season end
  std::size_t violations = 0;
};

/// Seasons whose truth misses a scored stage are left out.
std::vector<SeasonScore> score_seasons(const Predictor& p, const Dataset& data, const std::vector<std::size_t>& idx,
                                       OnsetAggregation agg = OnsetAggregation::Rmse);

/// One cell of a report: mean season error of a cultivar for one model and seed.
struct Cell {
  std::string model;
  std::string cultivar;
  std::uint64_t seed = 0;
  double rmse = 0.0;
  int seasons = 0;
  int missing_onsets = 0;
  std::size_t violations = 0;
};
std::vector<Cell> cultivar_cells(const std::string& model, std::uint64_t seed, const Dataset& data,
                                 const std::vector<SeasonScore>& scores);

struct Summary {
  std::string model;
  double mean = 0.0;
  double sd = 0.0;  // sample sd over cells
  int cells = 0;
};
/// Per model, in first-appearance order.
std::vector<Summary> summarize(const std::vector<Cell>& cells);

// ---------------------------------------------------------------------------
// Experiments

/// fit_predictor plus "dmc-mtl-ss<k>": DMC-MTL trained on transition k only.
std::unique_ptr<Predictor> fit_model(const std::string& name, const Dataset& data,
                                     const std::vector<std::size_t>& train_idx,
                                     const std::vector<std::size_t>& val_idx, FitOptions options);
bool is_model_name(const std::string& name);

struct ExperimentOptions {
  std::vector<std::string> models{"dmc-mtl", "gd"};
  std::vector<std::uint64_t> seeds = kCanonicalSeeds;
  FitOptions fit;
  /// Per-kind overrides of the training settings.
  std::map<std::string, TrainConfig> train;
  OnsetAggregation aggregation = OnsetAggregation::Rmse;
  int jobs = 1;
};

struct HeadlineReport {
  std::vector<Cell> cells;
  std::vector<Summary> summary;
  /// Paired t-test of every model against the first one, over (seed, cultivar) cells.
  std::map<std::string, TTest> versus_first;
  std::vector<SplitPlan> splits;
};
HeadlineReport headline(const Dataset& data, const ExperimentOptions& options);

struct SweepRow {
  int seasons = 0;  // requested
  int used = 0;     // largest per-cultivar count actually available
  Cell cell;
};
struct SweepReport {
  std::vector<SweepRow> rows;
  std::vector<std::string> notes;
};
/// Retrains every model with 1..n training seasons per cultivar on fixed test splits.
SweepReport sweep_data_limit(const Dataset& data, const std::vector<int>& seasons, const ExperimentOptions& options);

struct RobustnessReport {
  std::vector<std::string> models;
  std::vector<std::string> locations;
  Eigen::MatrixXd rmse;  // models x locations, mean over seasons
};
struct LocationData {
  std::string name;
  const Dataset* data = nullptr;
  std::vector<std::size_t> seasons;  // empty: every season
};
RobustnessReport robustness_eval(const std::vector<std::pair<std::string, const Predictor*>>& models,
                                 const std::vector<LocationData>& locations);

struct StageReport {
  std::string model;
  std::string cultivar;
  std::array<double, kScoredTransitions> rmse{};  // per stage, over the cultivar's seasons
  double cumulative = 0.0;                        // mean per-season onset RMSE
};
std::vector<StageReport> per_stage_error(const std::string& model, const Predictor& p, const Dataset& data,
                                         const std::vector<std::size_t>& idx);

// ---------------------------------------------------------------------------
// Integrated gradients

/// Scalar function of a matrix input, built on a tape.
using MatrixFn = std::function<ad::Var(ad::Tape& tape, const ad::Var& x)>;
/// Right Riemann sum over m steps along the straight line from baseline to x.
Eigen::MatrixXd integrated_gradients(const MatrixFn& f, const Eigen::MatrixXd& x, const Eigen::MatrixXd& baseline,
                                     int steps);

struct Attribution {
  std::vector<std::string> features;
  Eigen::MatrixXd ig;  // (day + 1) x features
  double f_x = 0.0, f_baseline = 0.0;
  /// |sum(ig) - (f_x - f_baseline)| / max(|f_x - f_baseline|, 1e-12)
  double completeness = 0.0;
};

/// Attribution of parameter `param` on `day` to the z-scored weather features; the date
/// embedding is held fixed. `baseline` is per feature in natural units (default: model.stats.mean).
Attribution integrated_gradients(const DmcModel& model, const WeatherSeries& series, int cultivar, int day, int param,
                                 int steps, const std::optional<Eigen::VectorXd>& baseline = std::nullopt);

// ---------------------------------------------------------------------------
// Report files

void write_cells_csv(const std::filesystem::path& path, const std::vector<Cell>& cells);
void write_summary_csv(const std::filesystem::path& path, const std::vector<Summary>& s);
void write_json(const std::filesystem::path& path, const nlohmann::json& j);
nlohmann::json to_json(const HeadlineReport& r);
nlohmann::json to_json(const SweepReport& r);
nlohmann::json to_json(const RobustnessReport& r);

struct PlotSeries {
  std::string name;
  std::vector<double> x, y;
};
struct PlotOptions {
  std::string title, xlabel, ylabel;
  bool step = false;
  int width = 640, height = 400;
};
/// Minimal SVG line (or step) chart.
void write_svg_plot(const std::filesystem::path& path, const std::vector<PlotSeries>& series, const PlotOptions& o);
/// Grouped bar chart: one group per label, one bar per series value.
void write_svg_bars(const std::filesystem::path& path, const std::vector<std::string>& groups,
                    const std::vector<PlotSeries>& series, const PlotOptions& o);

}  // namespace dmc
