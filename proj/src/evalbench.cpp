#include "dmc/evalbench.hpp"

#include <boost/math/distributions/students_t.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <iostream>
#include <limits>
#include <mutex>
#include <numeric>
#include <set>
#include <thread>

namespace dmc {

namespace fs = std::filesystem;

namespace {

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

// Runs body(i) for i in [0, n) on up to `jobs` threads. Results are written by index.
void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& body) {
  const auto workers = static_cast<std::size_t>(std::max(1, jobs));
  if (workers == 1 || n < 2) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < std::min(workers, n); ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          body(i);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

FitOptions options_for(const ExperimentOptions& o, const std::string& kind, std::uint64_t seed) {
  FitOptions f = o.fit;
  if (auto it = o.train.find(kind); it != o.train.end()) f.train = it->second;
  f.train.seed = seed;
  return f;
}

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

// ---------------------------------------------------------------------------
// Splits

nlohmann::json SplitPlan::to_json() const {
  return {{"seed", seed}, {"train", train}, {"val", val}, {"test", test}, {"excluded", excluded}};
}

SplitPlan make_splits(const Dataset& data, std::uint64_t seed) {
  SplitPlan plan;
  plan.seed = seed;
  Rng rng(seed);
  for (int c = 0; c < static_cast<int>(data.cultivars.size()); ++c) {
    auto own = data.seasons_of(c);
    if (own.size() < 4) {
      std::cerr << "warning: cultivar " << data.cultivars[static_cast<std::size_t>(c)] << " has " << own.size()
                << " seasons (needs 4); excluded\n";
      plan.excluded.push_back(c);
      continue;
    }
    rng.shuffle(own.begin(), own.end());
    plan.test.insert(plan.test.end(), own.begin(), own.begin() + 2);
    plan.val.push_back(own[2]);
    plan.train.insert(plan.train.end(), own.begin() + 3, own.end());
  }
  std::sort(plan.train.begin(), plan.train.end());
  std::sort(plan.val.begin(), plan.val.end());
  std::sort(plan.test.begin(), plan.test.end());
  return plan;
}

std::vector<std::size_t> limit_seasons(const Dataset& data, const std::vector<std::size_t>& train, int n,
                                       std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("limit_seasons: need at least one season");
  Rng rng(seed ^ 0x5EA5095ULL);
  std::vector<std::size_t> out;
  for (int c = 0; c < static_cast<int>(data.cultivars.size()); ++c) {
    std::vector<std::size_t> own;
    for (auto i : train) {
      if (data.seasons[i].cultivar == c) own.push_back(i);
    }
    rng.shuffle(own.begin(), own.end());
    own.resize(std::min(own.size(), static_cast<std::size_t>(n)));
    out.insert(out.end(), own.begin(), own.end());
  }
  std::sort(out.begin(), out.end());
  return out;
}

// ---------------------------------------------------------------------------
// Scores

std::optional<std::array<double, kScoredTransitions>> onset_errors(const Onsets& pred, const Onsets& truth,
                                                                   int season_end) {
  std::array<double, kScoredTransitions> e{};
  for (int k = 0; k < kScoredTransitions; ++k) {
    if (!truth[k]) return std::nullopt;
    e[k] = static_cast<double>(pred[k].value_or(season_end) - *truth[k]);
  }
  return e;
}

double season_onset_error(const std::array<double, kScoredTransitions>& e, OnsetAggregation agg) {
  double acc = 0.0;
  for (double v : e) acc += agg == OnsetAggregation::Rmse ? v * v : std::abs(v);
  return agg == OnsetAggregation::Rmse ? std::sqrt(acc / kScoredTransitions) : acc;
}

std::optional<double> rmse_phenology(const std::vector<Onsets>& pred, const std::vector<Onsets>& truth,
                                     const std::vector<int>& season_end, OnsetAggregation agg) {
  if (pred.size() != truth.size() || pred.size() != season_end.size()) {
    throw std::invalid_argument("rmse_phenology: inputs differ in length");
  }
  std::vector<double> per;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (auto e = onset_errors(pred[i], truth[i], season_end[i])) per.push_back(season_onset_error(*e, agg));
  }
  if (per.empty()) return std::nullopt;
  return mean_of(per);
}

double rmse_hardiness(std::span<const double> pred, std::span<const double> truth, const std::vector<bool>& mask) {
  if (pred.size() < mask.size() || truth.size() < mask.size()) {
    throw std::invalid_argument("rmse_hardiness: mask is longer than the series");
  }
  double acc = 0.0;
  std::size_t n = 0;
  for (std::size_t t = 0; t < mask.size(); ++t) {
    if (!mask[t]) continue;
    acc += (pred[t] - truth[t]) * (pred[t] - truth[t]);
    ++n;
  }
  if (n == 0) throw std::invalid_argument("rmse_hardiness: no unmasked day");
  return std::sqrt(acc / static_cast<double>(n));
}

double t_pvalue(double t, int df) {
  if (df < 1) throw std::invalid_argument("t_pvalue: df must be positive");
  if (std::isinf(t)) return 0.0;
  boost::math::students_t dist(static_cast<double>(df));
  return std::min(1.0, 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t))));
}

TTest paired_ttest(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("paired_ttest: samples differ in length");
  if (a.size() < 2) throw std::invalid_argument("paired_ttest: need at least two pairs");
  const auto n = static_cast<double>(a.size());
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  const double m = mean_of(d);
  double ss = 0.0;
  for (double v : d) ss += (v - m) * (v - m);
  const double sd = std::sqrt(ss / (n - 1.0));
  TTest r;
  r.df = static_cast<int>(a.size()) - 1;
  if (sd <= 1e-15 * std::max(1.0, std::abs(m))) {
    if (m == 0.0) return r;
    r.t = std::copysign(std::numeric_limits<double>::infinity(), m);
    r.p = 0.0;
    return r;
  }
  r.t = m / (sd / std::sqrt(n));
  r.p = t_pvalue(r.t, r.df);
  return r;
}

std::vector<double> coverage_curve(std::span<const double> rmse, std::span<const double> thresholds) {
  if (!std::is_sorted(thresholds.begin(), thresholds.end())) {
    throw std::invalid_argument("coverage_curve: thresholds must be sorted");
  }
  std::vector<double> out;
  out.reserve(thresholds.size());
  for (double tau : thresholds) {
    const auto hit = std::count_if(rmse.begin(), rmse.end(), [&](double v) { return v <= tau; });
    out.push_back(rmse.empty() ? 0.0 : static_cast<double>(hit) / static_cast<double>(rmse.size()));
  }
  return out;
}

std::vector<Violation> realism_check(const CropStateSeries& s, const RealismBounds& bounds) {
  std::vector<Violation> out;
  for (std::size_t t = 0; t < s.values.size(); ++t) {
    const double v = s.values[t];
    const int day = static_cast<int>(t);
    if (s.model == CropModel::Gdd) {
      if (v < 0.0 || v > 4.0) out.push_back({day, v, "stage out of range"});
      if (t > 0 && v < s.values[t - 1]) out.push_back({day, v, "stage reverted"});
    } else if (!std::isfinite(v) || v < bounds.lower - bounds.eps || v > bounds.upper + bounds.eps) {
      out.push_back({day, v, "hardiness out of bounds"});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluating a predictor

std::vector<SeasonScore> score_seasons(const Predictor& p, const Dataset& data, const std::vector<std::size_t>& idx,
                                       OnsetAggregation agg) {
  if (p.task() != data.model) throw std::invalid_argument("score_seasons: predictor and dataset tasks differ");
  std::vector<SeasonScore> out;
  for (auto i : idx) {
    const Season& s = data.seasons.at(i);
    const auto pred = p.predict(s.weather, s.cultivar);
    SeasonScore sc;
    sc.season = i;
    sc.cultivar = s.cultivar;
    sc.year = s.year;
    sc.violations = realism_check(pred).size();
    if (data.model == CropModel::Gdd) {
      const auto e = onset_errors(pred.onsets, s.onsets, static_cast<int>(s.days()) - 1);
      if (!e) continue;
      sc.stage_errors = e;
      sc.error = season_onset_error(*e, agg);
      for (int k = 0; k < kScoredTransitions; ++k) sc.missing_onset = sc.missing_onset || !pred.onsets[k];
    } else {
      if (s.observed_count() == 0) continue;
      sc.error = rmse_hardiness(pred.values, s.target, s.observed);
    }
    out.push_back(sc);
  }
  return out;
}

std::vector<Cell> cultivar_cells(const std::string& model, std::uint64_t seed, const Dataset& data,
                                 const std::vector<SeasonScore>& scores) {
  std::vector<Cell> out;
  for (int c = 0; c < static_cast<int>(data.cultivars.size()); ++c) {
    Cell cell;
    cell.model = model;
    cell.cultivar = data.cultivars[static_cast<std::size_t>(c)];
    cell.seed = seed;
    double acc = 0.0;
    for (const auto& s : scores) {
      if (s.cultivar != c) continue;
      acc += s.error;
      ++cell.seasons;
      cell.missing_onsets += s.missing_onset ? 1 : 0;
      cell.violations += s.violations;
    }
    if (cell.seasons == 0) continue;
    cell.rmse = acc / cell.seasons;
    out.push_back(cell);
  }
  return out;
}

std::vector<Summary> summarize(const std::vector<Cell>& cells) {
  std::vector<Summary> out;
  std::vector<std::vector<double>> values;
  for (const auto& c : cells) {
    auto it = std::find_if(out.begin(), out.end(), [&](const Summary& s) { return s.model == c.model; });
    if (it == out.end()) {
      out.push_back({c.model, 0.0, 0.0, 0});
      values.emplace_back();
      it = out.end() - 1;
    }
    values[static_cast<std::size_t>(it - out.begin())].push_back(c.rmse);
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto& v = values[i];
    out[i].cells = static_cast<int>(v.size());
    out[i].mean = mean_of(v);
    double ss = 0.0;
    for (double x : v) ss += (x - out[i].mean) * (x - out[i].mean);
    out[i].sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Experiments

namespace {

std::optional<int> single_stage_suffix(const std::string& name) {
  const std::string prefix = "dmc-mtl-ss";
  if (name.size() != prefix.size() + 1 || name.compare(0, prefix.size(), prefix) != 0) return std::nullopt;
  const int k = name.back() - '0';
  if (k < 0 || k >= kScoredTransitions) return std::nullopt;
  return k;
}

}  // namespace

bool is_model_name(const std::string& name) {
  const auto kinds = model_kinds();
  return single_stage_suffix(name) || std::find(kinds.begin(), kinds.end(), name) != kinds.end();
}

std::unique_ptr<Predictor> fit_model(const std::string& name, const Dataset& data,
                                     const std::vector<std::size_t>& train_idx,
                                     const std::vector<std::size_t>& val_idx, FitOptions options) {
  if (const auto k = single_stage_suffix(name)) {
    options.scored_stage = *k;
    return fit_predictor("dmc-mtl", data, train_idx, val_idx, options);
  }
  return fit_predictor(name, data, train_idx, val_idx, options);
}

HeadlineReport headline(const Dataset& data, const ExperimentOptions& o) {
  HeadlineReport r;
  for (auto seed : o.seeds) r.splits.push_back(make_splits(data, seed));
  const std::size_t nm = o.models.size();
  std::vector<std::vector<Cell>> results(o.seeds.size() * nm);
  parallel_for(results.size(), o.jobs, [&](std::size_t job) {
    const std::size_t si = job / nm;
    const auto& kind = o.models[job % nm];
    const auto& plan = r.splits[si];
    const auto p = fit_model(kind, data, plan.train, plan.val, options_for(o, kind, o.seeds[si]));
    results[job] = cultivar_cells(kind, o.seeds[si], data, score_seasons(*p, data, plan.test, o.aggregation));
  });
  for (auto& cells : results) r.cells.insert(r.cells.end(), cells.begin(), cells.end());
  r.summary = summarize(r.cells);
  if (nm > 1) {
    auto key = [](const Cell& c) { return std::to_string(c.seed) + "/" + c.cultivar; };
    std::map<std::string, double> first;
    for (const auto& c : r.cells) {
      if (c.model == o.models[0]) first[key(c)] = c.rmse;
    }
    for (std::size_t m = 1; m < nm; ++m) {
      std::vector<double> a, b;
      for (const auto& c : r.cells) {
        if (c.model != o.models[m]) continue;
        if (auto it = first.find(key(c)); it != first.end()) {
          a.push_back(c.rmse);
          b.push_back(it->second);
        }
      }
      if (a.size() >= 2) r.versus_first[o.models[m]] = paired_ttest(a, b);
    }
  }
  return r;
}

SweepReport sweep_data_limit(const Dataset& data, const std::vector<int>& seasons, const ExperimentOptions& o) {
  SweepReport r;
  std::vector<SplitPlan> plans;
  for (auto seed : o.seeds) plans.push_back(make_splits(data, seed));
  const std::size_t nm = o.models.size(), nn = seasons.size();
  std::vector<std::vector<SweepRow>> results(o.seeds.size() * nn * nm);
  std::set<std::string> notes;
  std::mutex notes_mutex;
  parallel_for(results.size(), o.jobs, [&](std::size_t job) {
    const std::size_t si = job / (nn * nm);
    const int n = seasons[(job / nm) % nn];
    const auto& kind = o.models[job % nm];
    const auto& plan = plans[si];
    const auto train_idx = limit_seasons(data, plan.train, n, o.seeds[si]);
    std::map<int, int> per;
    for (auto i : train_idx) ++per[data.seasons[i].cultivar];
    int used = 0, fewest = n;
    for (const auto& [c, k] : per) {
      used = std::max(used, k);
      fewest = std::min(fewest, k);
    }
    if (fewest < n) {
      std::lock_guard lock(notes_mutex);
      notes.insert("requested " + std::to_string(n) + " seasons; some cultivars capped at " + std::to_string(fewest));
    }
    const auto p = fit_model(kind, data, train_idx, plan.val, options_for(o, kind, o.seeds[si]));
    for (auto& cell : cultivar_cells(kind, o.seeds[si], data, score_seasons(*p, data, plan.test, o.aggregation))) {
      results[job].push_back({n, used, cell});
    }
  });
  for (auto& rows : results) r.rows.insert(r.rows.end(), rows.begin(), rows.end());
  r.notes.assign(notes.begin(), notes.end());
  return r;
}

RobustnessReport robustness_eval(const std::vector<std::pair<std::string, const Predictor*>>& models,
                                 const std::vector<LocationData>& locations) {
  RobustnessReport r;
  r.rmse.resize(static_cast<Eigen::Index>(models.size()), static_cast<Eigen::Index>(locations.size()));
  for (const auto& l : locations) r.locations.push_back(l.name);
  for (std::size_t m = 0; m < models.size(); ++m) {
    r.models.push_back(models[m].first);
    for (std::size_t l = 0; l < locations.size(); ++l) {
      const Dataset& d = *locations[l].data;
      std::vector<std::size_t> idx = locations[l].seasons;
      if (idx.empty()) {
        idx.resize(d.seasons.size());
        std::iota(idx.begin(), idx.end(), 0);
      }
      std::vector<double> e;
      for (const auto& s : score_seasons(*models[m].second, d, idx)) e.push_back(s.error);
      r.rmse(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(l)) =
          e.empty() ? std::numeric_limits<double>::quiet_NaN() : mean_of(e);
    }
  }
  return r;
}

std::vector<StageReport> per_stage_error(const std::string& model, const Predictor& p, const Dataset& data,
                                         const std::vector<std::size_t>& idx) {
  if (data.model != CropModel::Gdd) throw std::invalid_argument("per_stage_error: phenology only");
  const auto scores = score_seasons(p, data, idx);
  std::vector<StageReport> out;
  for (int c = 0; c < static_cast<int>(data.cultivars.size()); ++c) {
    StageReport r;
    r.model = model;
    r.cultivar = data.cultivars[static_cast<std::size_t>(c)];
    int n = 0;
    for (const auto& s : scores) {
      if (s.cultivar != c) continue;
      for (int k = 0; k < kScoredTransitions; ++k) r.rmse[k] += (*s.stage_errors)[k] * (*s.stage_errors)[k];
      r.cumulative += s.error;
      ++n;
    }
    if (n == 0) continue;
    for (double& v : r.rmse) v = std::sqrt(v / n);
    r.cumulative /= n;
    out.push_back(r);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Integrated gradients

Eigen::MatrixXd integrated_gradients(const MatrixFn& f, const Eigen::MatrixXd& x, const Eigen::MatrixXd& baseline,
                                     int steps) {
  if (steps < 1) throw std::invalid_argument("integrated_gradients: steps must be at least 1");
  if (x.rows() != baseline.rows() || x.cols() != baseline.cols()) {
    throw std::invalid_argument("integrated_gradients: input and baseline shapes differ");
  }
  Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(x.rows(), x.cols());
  for (int k = 1; k <= steps; ++k) {
    ad::Tape tape;
    const ad::Var v = tape.variable(baseline + (static_cast<double>(k) / steps) * (x - baseline));
    tape.backward(f(tape, v));
    acc += v.grad();
  }
  return (x - baseline).cwiseProduct(acc / steps);
}

Attribution integrated_gradients(const DmcModel& model, const WeatherSeries& series, int cultivar, int day, int param,
                                 int steps, const std::optional<Eigen::VectorXd>& baseline) {
  if (steps < 1) throw std::invalid_argument("integrated_gradients: steps must be at least 1");
  if (day < 0 || static_cast<std::size_t>(day) >= series.days()) {
    throw std::invalid_argument("integrated_gradients: day outside the season");
  }
  if (param < 0 || static_cast<std::size_t>(param) >= model.spec.size()) {
    throw std::invalid_argument("integrated_gradients: parameter index out of range");
  }
  const Eigen::MatrixXd x = normalize_one(series, model.stats).values;
  const auto nf = static_cast<Eigen::Index>(model.stats.features.size());
  Eigen::VectorXd b = Eigen::VectorXd::Zero(nf);
  if (baseline) {
    if (baseline->size() != nf) throw std::invalid_argument("integrated_gradients: baseline needs one value per feature");
    b = (baseline->array() - model.stats.mean.array()) / model.stats.stddev.array();
  }
  const auto rows = static_cast<Eigen::Index>(steps) + 1;  // row 0 is the baseline itself
  Eigen::VectorXd alpha(rows);
  for (Eigen::Index k = 0; k < rows; ++k) alpha[k] = static_cast<double>(k) / steps;

  ad::Tape tape;
  const NetBinding net = bind(tape, model.net, false);
  DmcCore core(tape, model, net, std::vector<int>(static_cast<std::size_t>(rows), cultivar));
  const auto tm = series.tmean();
  std::vector<ad::Var> leaves;
  ad::Var applied;
  for (int t = 0; t <= day; ++t) {
    const auto i = static_cast<Eigen::Index>(t);
    Eigen::MatrixXd in = x.row(i).replicate(rows, 1);
    const Eigen::RowVectorXd d = x.row(i).leftCols(nf) - b.transpose();
    in.leftCols(nf) = b.transpose().replicate(rows, 1) + alpha * d;
    leaves.push_back(tape.variable(in));
    applied = core.step(leaves.back(), Eigen::VectorXd::Constant(rows, tm[static_cast<std::size_t>(t)]));
  }
  const ad::Var target = ad::slice_cols(applied, param, 1);
  tape.backward(ad::sum(target));

  Attribution a;
  a.features = model.stats.features;
  a.f_baseline = target.value()(0, 0);
  a.f_x = target.value()(rows - 1, 0);
  a.ig.resize(day + 1, nf);
  for (int t = 0; t <= day; ++t) {
    const Eigen::MatrixXd g = leaves[static_cast<std::size_t>(t)].grad();
    const Eigen::RowVectorXd mean_grad = g.bottomRows(steps).leftCols(nf).colwise().sum() / steps;
    const Eigen::RowVectorXd d = x.row(t).leftCols(nf) - b.transpose();
    a.ig.row(t) = d.cwiseProduct(mean_grad);
  }
  const double delta = a.f_x - a.f_baseline;
  a.completeness = std::abs(a.ig.sum() - delta) / std::max(std::abs(delta), 1e-12);
  return a;
}

// ---------------------------------------------------------------------------
// Report files

void write_cells_csv(const fs::path& path, const std::vector<Cell>& cells) {
  auto out = open_out(path);
  out << "model,cultivar,seed,rmse,seasons,missing_onsets,violations\n";
  for (const auto& c : cells) {
    out << c.model << ',' << c.cultivar << ',' << c.seed << ',' << num(c.rmse) << ',' << c.seasons << ','
        << c.missing_onsets << ',' << c.violations << '\n';
  }
}

void write_summary_csv(const fs::path& path, const std::vector<Summary>& s) {
  auto out = open_out(path);
  out << "model,mean,sd,cells\n";
  for (const auto& r : s) out << r.model << ',' << num(r.mean) << ',' << num(r.sd) << ',' << r.cells << '\n';
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  auto out = open_out(path);
  out << j.dump(2) << '\n';
}

namespace {

nlohmann::json finite_or_string(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(num(v)); }

nlohmann::json cell_json(const Cell& c) {
  return {{"model", c.model},     {"cultivar", c.cultivar},   {"seed", c.seed},
          {"rmse", c.rmse},       {"seasons", c.seasons},     {"missing_onsets", c.missing_onsets},
          {"violations", c.violations}};
}

}  // namespace

nlohmann::json to_json(const HeadlineReport& r) {
  nlohmann::json j;
  j["cells"] = nlohmann::json::array();
  for (const auto& c : r.cells) j["cells"].push_back(cell_json(c));
  j["summary"] = nlohmann::json::array();
  for (const auto& s : r.summary) j["summary"].push_back({{"model", s.model}, {"mean", s.mean}, {"sd", s.sd}, {"cells", s.cells}});
  j["ttest"] = nlohmann::json::object();
  for (const auto& [m, t] : r.versus_first) j["ttest"][m] = {{"t", finite_or_string(t.t)}, {"p", t.p}, {"df", t.df}};
  j["splits"] = nlohmann::json::array();
  for (const auto& s : r.splits) j["splits"].push_back(s.to_json());
  return j;
}

nlohmann::json to_json(const SweepReport& r) {
  nlohmann::json j;
  j["rows"] = nlohmann::json::array();
  for (const auto& row : r.rows) {
    auto c = cell_json(row.cell);
    c["seasons_requested"] = row.seasons;
    c["seasons_used"] = row.used;
    j["rows"].push_back(c);
  }
  j["notes"] = r.notes;
  return j;
}

nlohmann::json to_json(const RobustnessReport& r) {
  nlohmann::json j;
  j["models"] = r.models;
  j["locations"] = r.locations;
  j["rmse"] = nlohmann::json::array();
  for (Eigen::Index m = 0; m < r.rmse.rows(); ++m) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index l = 0; l < r.rmse.cols(); ++l) row.push_back(finite_or_string(r.rmse(m, l)));
    j["rmse"].push_back(row);
  }
  return j;
}

namespace {

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      default: out += c;
    }
  }
  return out;
}

struct Frame {
  double x0, x1, y0, y1;
  int w, h;
  static constexpr int left = 60, right = 150, top = 30, bottom = 45;
  double px(double x) const { return left + (x - x0) / std::max(x1 - x0, 1e-12) * (w - left - right); }
  double py(double y) const { return h - bottom - (y - y0) / std::max(y1 - y0, 1e-12) * (h - top - bottom); }
};

void axes(std::ostream& out, const Frame& f, const PlotOptions& o) {
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << o.width << "\" height=\"" << o.height
      << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<text x=\"" << o.width / 2 << "\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">" << escape(o.title)
      << "</text>\n";
  const double bx = Frame::left, by = o.height - Frame::bottom, ex = o.width - Frame::right;
  out << "<line x1=\"" << bx << "\" y1=\"" << by << "\" x2=\"" << ex << "\" y2=\"" << by << "\" stroke=\"black\"/>\n";
  out << "<line x1=\"" << bx << "\" y1=\"" << by << "\" x2=\"" << bx << "\" y2=\"" << Frame::top
      << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double yv = f.y0 + (f.y1 - f.y0) * i / 4.0;
    out << "<text x=\"" << bx - 4 << "\" y=\"" << num(f.py(yv) + 4) << "\" text-anchor=\"end\">" << num(yv)
        << "</text>\n";
  }
  out << "<text x=\"" << (bx + ex) / 2 << "\" y=\"" << o.height - 8 << "\" text-anchor=\"middle\">"
      << escape(o.xlabel) << "</text>\n";
  out << "<text x=\"14\" y=\"" << (by + Frame::top) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 14 "
      << (by + Frame::top) / 2 << ")\">" << escape(o.ylabel) << "</text>\n";
}

void legend(std::ostream& out, const std::vector<PlotSeries>& series, const PlotOptions& o) {
  for (std::size_t i = 0; i < series.size(); ++i) {
    const int y = Frame::top + 16 * static_cast<int>(i);
    const int x = o.width - Frame::right + 10;
    out << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"10\" height=\"10\" fill=\"" << kPalette[i % 8]
        << "\"/><text x=\"" << x + 14 << "\" y=\"" << y + 9 << "\">" << escape(series[i].name) << "</text>\n";
  }
}

}  // namespace

void write_svg_plot(const fs::path& path, const std::vector<PlotSeries>& series, const PlotOptions& o) {
  Frame f{std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity(),
          std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity(), o.width, o.height};
  for (const auto& s : series) {
    if (s.x.size() != s.y.size()) throw std::invalid_argument("write_svg_plot: x and y differ in length");
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.y[i])) continue;
      f.x0 = std::min(f.x0, s.x[i]);
      f.x1 = std::max(f.x1, s.x[i]);
      f.y0 = std::min(f.y0, s.y[i]);
      f.y1 = std::max(f.y1, s.y[i]);
    }
  }
  if (!std::isfinite(f.x0)) f = {0, 1, 0, 1, o.width, o.height};
  f.y0 = std::min(f.y0, 0.0);
  auto out = open_out(path);
  axes(out, f, o);
  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto& s = series[i];
    out << "<polyline fill=\"none\" stroke=\"" << kPalette[i % 8] << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t k = 0; k < s.x.size(); ++k) {
      if (!std::isfinite(s.y[k])) continue;
      if (o.step && k > 0) out << num(f.px(s.x[k])) << ',' << num(f.py(s.y[k - 1])) << ' ';
      out << num(f.px(s.x[k])) << ',' << num(f.py(s.y[k])) << ' ';
    }
    out << "\"/>\n";
  }
  legend(out, series, o);
  out << "</svg>\n";
}

void write_svg_bars(const fs::path& path, const std::vector<std::string>& groups, const std::vector<PlotSeries>& series,
                    const PlotOptions& o) {
  double top = 0.0;
  for (const auto& s : series) {
    if (s.y.size() != groups.size()) throw std::invalid_argument("write_svg_bars: one value per group expected");
    for (double v : s.y) {
      if (std::isfinite(v)) top = std::max(top, v);
    }
  }
  Frame f{0.0, static_cast<double>(groups.size()), 0.0, top > 0 ? top : 1.0, o.width, o.height};
  auto out = open_out(path);
  axes(out, f, o);
  const double gw = f.px(1.0) - f.px(0.0);
  const double bw = 0.8 * gw / static_cast<double>(std::max<std::size_t>(series.size(), 1));
  for (std::size_t g = 0; g < groups.size(); ++g) {
    for (std::size_t i = 0; i < series.size(); ++i) {
      const double v = std::isfinite(series[i].y[g]) ? series[i].y[g] : 0.0;
      const double x = f.px(static_cast<double>(g)) + 0.1 * gw + bw * static_cast<double>(i);
      out << "<rect x=\"" << num(x) << "\" y=\"" << num(f.py(v)) << "\" width=\"" << num(bw) << "\" height=\""
          << num(f.py(0.0) - f.py(v)) << "\" fill=\"" << kPalette[i % 8] << "\"/>\n";
    }
    out << "<text x=\"" << num(f.px(g + 0.5)) << "\" y=\"" << o.height - Frame::bottom + 14
        << "\" text-anchor=\"middle\">" << escape(groups[g]) << "</text>\n";
  }
  legend(out, series, o);
  out << "</svg>\n";
}

}  // namespace dmc
