#include "dmc/evalbench.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

namespace dmc {
namespace {

namespace fs = std::filesystem;

std::vector<WeatherSeries> wa(CropModel m, int years, std::uint64_t seed = 1) {
  return synthetic_weather(seed, ClimateProfile::named("washington"), m, 2000, years);
}

struct Fixture {
  CultivarTable table;
  Dataset data;
};

Fixture phenology(int cultivars, int years) {
  Fixture f;
  const auto w = wa(CropModel::Gdd, years);
  SynthOptions o;
  f.table = sample_reachable_cultivars(2, cultivars, 0.5, w, o);
  f.data = generate(f.table, w, o);
  return f;
}

NetConfig tiny() {
  NetConfig c;
  c.pre_dims = {4};
  c.recur_dim = 4;
  c.post_dims = {4};
  return c;
}

Onsets onsets(int a, int b, int c) { return {a, b, c, std::nullopt}; }

TEST(Splits, FourSeasonsGiveOneTrainOneValTwoTest) {
  const auto f = phenology(2, 4);
  const auto p = make_splits(f.data, 0);
  EXPECT_EQ(p.train.size(), 2u);
  EXPECT_EQ(p.val.size(), 2u);
  EXPECT_EQ(p.test.size(), 4u);
  for (int c = 0; c < 2; ++c) {
    int tr = 0, va = 0, te = 0;
    for (auto i : p.train) tr += f.data.seasons[i].cultivar == c;
    for (auto i : p.val) va += f.data.seasons[i].cultivar == c;
    for (auto i : p.test) te += f.data.seasons[i].cultivar == c;
    EXPECT_EQ(tr, 1);
    EXPECT_EQ(va, 1);
    EXPECT_EQ(te, 2);
  }
}

TEST(Splits, PartitionIsDisjointCompleteAndSeeded) {
  const auto f = phenology(3, 7);
  std::set<std::vector<std::size_t>> tests;
  for (auto seed : kCanonicalSeeds) {
    const auto p = make_splits(f.data, seed);
    std::multiset<std::size_t> all(p.train.begin(), p.train.end());
    all.insert(p.val.begin(), p.val.end());
    all.insert(p.test.begin(), p.test.end());
    EXPECT_EQ(all.size(), f.data.seasons.size());
    EXPECT_EQ(std::set<std::size_t>(all.begin(), all.end()).size(), f.data.seasons.size());
    EXPECT_EQ(make_splits(f.data, seed).to_json(), p.to_json());
    tests.insert(p.test);
  }
  EXPECT_GT(tests.size(), 1u);
}

TEST(Splits, CultivarsWithFewerThanFourSeasonsAreExcluded) {
  auto f = phenology(2, 4);
  Dataset d = f.data;
  const auto drop = d.seasons_of(1).back();
  d.seasons.erase(d.seasons.begin() + static_cast<std::ptrdiff_t>(drop));
  const auto p = make_splits(d, 1);
  EXPECT_EQ(p.excluded, std::vector<int>{1});
  for (auto i : p.train) EXPECT_EQ(d.seasons[i].cultivar, 0);
  EXPECT_EQ(p.test.size(), 2u);
}

TEST(Splits, LimitSeasonsCapsPerCultivar) {
  const auto f = phenology(2, 9);
  const auto p = make_splits(f.data, 3);
  const auto one = limit_seasons(f.data, p.train, 1, 3);
  EXPECT_EQ(one.size(), 2u);
  EXPECT_EQ(limit_seasons(f.data, p.train, 50, 3), p.train);
  for (auto i : limit_seasons(f.data, p.train, 3, 3)) {
    EXPECT_TRUE(std::find(p.train.begin(), p.train.end(), i) != p.train.end());
  }
}

TEST(Rmse, PhenologyArithmetic) {
  const std::vector<int> end{250};
  EXPECT_NEAR(*rmse_phenology({onsets(100, 150, 200)}, {onsets(102, 148, 200)}, end), std::sqrt(8.0 / 3.0), 1e-12);
  EXPECT_NEAR(*rmse_phenology({onsets(100, 150, 200)}, {onsets(102, 148, 200)}, end), 1.63, 5e-3);
  EXPECT_EQ(*rmse_phenology({onsets(100, 150, 200)}, {onsets(100, 150, 200)}, end), 0.0);
  EXPECT_NEAR(*rmse_phenology({onsets(103, 153, 203)}, {onsets(100, 150, 200)}, end), 3.0, 1e-12);
  EXPECT_NEAR(*rmse_phenology({onsets(100, 150, 200)}, {onsets(102, 148, 200)}, end, OnsetAggregation::Sum), 4.0,
              1e-12);
}

TEST(Rmse, MissingPredictionIsScoredAtTheSeasonEndAndMissingTruthExcludes) {
  Onsets pred = onsets(100, 150, 0);
  pred[2].reset();
  const auto e = onset_errors(pred, onsets(100, 150, 200), 240);
  ASSERT_TRUE(e);
  EXPECT_EQ((*e)[2], 40.0);
  Onsets truth = onsets(100, 150, 0);
  truth[2].reset();
  EXPECT_FALSE(onset_errors(onsets(100, 150, 200), truth, 240));
  const auto r = rmse_phenology({onsets(100, 150, 200), onsets(1, 1, 1)}, {onsets(103, 153, 203), truth}, {240, 240});
  EXPECT_NEAR(*r, 3.0, 1e-12);
  EXPECT_FALSE(rmse_phenology({onsets(1, 1, 1)}, {truth}, {240}));
}

TEST(Rmse, HardinessOverUnmaskedDays) {
  const std::vector<double> truth{-10, -11, -12, -13};
  std::vector<double> pred{-9.5, -10.5, -11.5, -12.5};
  EXPECT_NEAR(rmse_hardiness(pred, truth, {true, true, true, true}), 0.5, 1e-12);
  pred = {-10, -30, -12, -13};
  EXPECT_EQ(rmse_hardiness(pred, truth, {true, false, true, true}), 0.0);
  pred = {-10, -11, -10, -13};
  EXPECT_EQ(rmse_hardiness(pred, truth, {false, false, true, false}), 2.0);
  EXPECT_THROW(rmse_hardiness(pred, truth, {false, false, false, false}), std::invalid_argument);
}

TEST(TTest, TableCriticalValues) {
  // Two-sided critical values from a standard t table: (t, df, p).
  const std::vector<std::tuple<double, int, double>> table{
      {12.706, 1, 0.05}, {4.303, 2, 0.05}, {2.571, 5, 0.05}, {3.169, 10, 0.01}, {2.845, 20, 0.01}};
  for (const auto& [t, df, p] : table) EXPECT_NEAR(t_pvalue(t, df), p, 5e-4) << t << " " << df;
}

TEST(TTest, PairedExamples) {
  const std::vector<double> a{3, 1, 4, 1, 5};
  auto r = paired_ttest(a, a);
  EXPECT_EQ(r.t, 0.0);
  EXPECT_EQ(r.p, 1.0);

  const std::vector<double> ones{2, 3, 4, 5}, base{1, 2, 3, 4};
  r = paired_ttest(ones, base);
  EXPECT_TRUE(std::isinf(r.t) && r.t > 0);
  EXPECT_EQ(r.p, 0.0);

  const std::vector<double> d{1, 2, 3, 4, 5}, zero(5, 0.0);
  r = paired_ttest(d, zero);
  EXPECT_NEAR(r.t, 3.0 / (std::sqrt(2.5) / std::sqrt(5.0)), 1e-12);
  EXPECT_NEAR(r.t, 4.243, 5e-4);
  EXPECT_NEAR(r.p, 0.0132, 5e-5);
  EXPECT_EQ(r.df, 4);

  const auto s = paired_ttest(zero, d);
  EXPECT_EQ(s.t, -r.t);
  EXPECT_EQ(s.p, r.p);
  EXPECT_THROW(paired_ttest(std::vector<double>{1}, std::vector<double>{2}), std::invalid_argument);
}

TEST(Coverage, ExamplesAndMonotoneOnFuzzedInputs) {
  const std::vector<double> r{1, 2, 3};
  const std::vector<double> tau{0.5, 2.0, 10.0};
  const auto c = coverage_curve(r, tau);
  EXPECT_EQ(c[0], 0.0);
  EXPECT_NEAR(c[1], 2.0 / 3.0, 1e-15);
  EXPECT_EQ(c[2], 1.0);
  const std::vector<double> unsorted{2.0, 1.0};
  EXPECT_THROW(coverage_curve(r, unsorted), std::invalid_argument);

  Rng rng(5);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> v(1 + rng.below(20)), t(1 + rng.below(30));
    for (auto& x : v) x = rng.uniform(0, 30);
    for (auto& x : t) x = rng.uniform(-1, 31);
    std::sort(t.begin(), t.end());
    t.push_back(*std::max_element(v.begin(), v.end()));
    std::sort(t.begin(), t.end());
    const auto cc = coverage_curve(v, t);
    for (std::size_t i = 1; i < cc.size(); ++i) ASSERT_LE(cc[i - 1], cc[i]);
    ASSERT_EQ(cc.back(), 1.0);
  }
}

TEST(Realism, StageRevertAndHardinessExcursion) {
  EXPECT_TRUE(realism_check(CropStateSeries::predicted(CropModel::Gdd, {0, 0, 1, 1, 2, 3, 3, 4})).empty());
  const auto v = realism_check(CropStateSeries::predicted(CropModel::Gdd, {0, 0, 1, 1, 2, 2, 1, 2, 2, 3}));
  ASSERT_EQ(v.size(), 1u);
  EXPECT_EQ(v[0].day, 6);

  RealismBounds b;
  b.lower = -40.0;
  b.upper = -2.0;
  EXPECT_TRUE(realism_check(CropStateSeries::predicted(CropModel::Ferguson, {-10, -20, -40, -2}), b).empty());
  const auto h = realism_check(CropStateSeries::predicted(CropModel::Ferguson, {-10, -45, -20}), b);
  ASSERT_EQ(h.size(), 1u);
  EXPECT_EQ(h[0].day, 1);
}

TEST(Scoring, PublishedParametersScoreZero) {
  const auto f = phenology(3, 5);
  FitOptions o;
  o.published = f.table;
  const auto p = fit_predictor("deployed-bio", f.data, {}, {}, o);
  std::vector<std::size_t> all(f.data.seasons.size());
  std::iota(all.begin(), all.end(), 0);
  const auto scores = score_seasons(*p, f.data, all);
  ASSERT_EQ(scores.size(), all.size());
  for (const auto& s : scores) {
    EXPECT_EQ(s.error, 0.0);
    EXPECT_EQ(s.violations, 0u);
  }
  const auto cells = cultivar_cells("deployed-bio", 0, f.data, scores);
  EXPECT_EQ(cells.size(), 3u);
  EXPECT_EQ(cells[0].seasons, 5);
}

TEST(PerStage, SquaredStageErrorsReproduceTheCumulativeRmse) {
  auto f = phenology(3, 4);
  CultivarTable shifted = f.table;
  for (auto& p : shifted.params) p.tail(4) *= 1.15;
  FitOptions o;
  o.published = shifted;
  const auto p = fit_predictor("deployed-bio", f.data, {}, {}, o);
  const auto c0 = f.data.seasons_of(0);
  const std::vector<std::size_t> one{c0[0]};
  const auto r = per_stage_error("deployed-bio", *p, f.data, one);
  ASSERT_EQ(r.size(), 1u);
  double ss = 0.0;
  for (double v : r[0].rmse) ss += v * v;
  EXPECT_NEAR(std::sqrt(ss / 3.0), r[0].cumulative, 1e-12);
  EXPECT_GT(r[0].cumulative, 0.0);

  std::vector<std::size_t> all(f.data.seasons.size());
  std::iota(all.begin(), all.end(), 0);
  EXPECT_EQ(per_stage_error("deployed-bio", *p, f.data, all).size(), 3u);
}

TEST(Experiments, HeadlineSummaryIsTheMeanOfItsCells) {
  const auto f = phenology(2, 5);
  ExperimentOptions o;
  o.models = {"deployed-bio", "gd"};
  o.seeds = {0, 1};
  o.fit.published = f.table;
  o.fit.train.epochs = 3;
  o.fit.train.learning_rate = 0.1;
  o.jobs = 2;
  const auto r = headline(f.data, o);
  EXPECT_EQ(r.cells.size(), 2u * 2u * 2u);
  ASSERT_EQ(r.summary.size(), 2u);
  for (const auto& s : r.summary) {
    double acc = 0.0;
    int n = 0;
    for (const auto& c : r.cells) {
      if (c.model == s.model) {
        acc += c.rmse;
        ++n;
      }
    }
    EXPECT_NEAR(s.mean, acc / n, 1e-12);
    EXPECT_EQ(s.cells, n);
  }
  EXPECT_EQ(r.summary[0].mean, 0.0);
  EXPECT_TRUE(r.versus_first.count("gd"));
  o.jobs = 1;
  EXPECT_EQ(to_json(headline(f.data, o)).dump(), to_json(r).dump());
}

TEST(Experiments, SweepTableShapeAndCaps) {
  const auto f = phenology(2, 5);
  ExperimentOptions o;
  o.models = {"deployed-bio"};
  o.seeds = {0, 1};
  o.fit.published = f.table;
  const auto r = sweep_data_limit(f.data, {1, 2, 5}, o);
  EXPECT_EQ(r.rows.size(), 2u * 3u * 2u);
  EXPECT_FALSE(r.notes.empty());
  for (const auto& row : r.rows) EXPECT_LE(row.used, 2);
}

TEST(Experiments, RobustnessOnTheTrainingLocationMatchesScoring) {
  const auto f = phenology(2, 4);
  FitOptions fo;
  CultivarTable shifted = f.table;
  for (auto& p : shifted.params) p[0] += 1.0;
  fo.published = shifted;
  const auto p = fit_predictor("deployed-bio", f.data, {}, {}, fo);
  const auto r = robustness_eval({{"deployed-bio", p.get()}}, {{"wa", &f.data, {}}, {"wa-first", &f.data, {0}}});
  EXPECT_EQ(r.rmse.rows(), 1);
  EXPECT_EQ(r.rmse.cols(), 2);
  std::vector<std::size_t> all(f.data.seasons.size());
  std::iota(all.begin(), all.end(), 0);
  double acc = 0.0;
  for (const auto& s : score_seasons(*p, f.data, all)) acc += s.error;
  EXPECT_NEAR(r.rmse(0, 0), acc / static_cast<double>(all.size()), 1e-12);
  EXPECT_EQ(r.rmse(0, 1), score_seasons(*p, f.data, {0})[0].error);
}

TEST(IntegratedGradients, LinearProbeIsExact) {
  Eigen::MatrixXd w(3, 2), x(3, 2), b(3, 2);
  w << 1.5, -2.0, 0.25, 3.0, -1.0, 0.5;
  x << 1, 2, 3, 4, 5, 6;
  b << 0.5, -1, 0, 2, 1, 1;
  const MatrixFn f = [&](ad::Tape& tape, const ad::Var& v) { return ad::sum(ad::scale(v, w) + tape.constant(1.0)); };
  for (int m : {1, 7, 64}) {
    const auto ig = integrated_gradients(f, x, b, m);
    EXPECT_LT((ig - w.cwiseProduct(x - b)).cwiseAbs().maxCoeff(), 1e-12) << m;
  }
  EXPECT_TRUE((integrated_gradients(f, x, x, 5).array() == 0.0).all());
  EXPECT_THROW(integrated_gradients(f, x, b, 0), std::invalid_argument);
}

TEST(IntegratedGradients, PhenologyCompletenessAtM256) {
  const auto w = wa(CropModel::Gdd, 2);
  const auto m = make_dmc(tiny(), CropModel::Gdd, fit_norm_stats(w), {"a", "b"}, 3);
  for (int p = 0; p < static_cast<int>(m.spec.size()); ++p) {
    const auto a = integrated_gradients(m, w[1], 1, 40, p, 256);
    EXPECT_EQ(a.ig.rows(), 41);
    EXPECT_EQ(a.ig.cols(), static_cast<Eigen::Index>(w[1].features.size()));
    EXPECT_LE(a.completeness, 1e-3) << p;
    EXPECT_NEAR(a.f_x, dmc_rollout(m, w[1], 1).omega(40, p), 1e-12);
  }
}

TEST(IntegratedGradients, ResidualShrinksWithSteps) {
  const auto w = wa(CropModel::Ferguson, 2);
  const auto m = make_dmc(tiny(), CropModel::Ferguson, fit_norm_stats(w), {"a", "b"}, 3);
  const auto coarse = integrated_gradients(m, w[1], 1, 40, 0, 16);
  const auto fine = integrated_gradients(m, w[1], 1, 40, 0, 1024);
  EXPECT_LT(fine.completeness, coarse.completeness / 8.0);
  EXPECT_LE(fine.completeness, 1e-3);
}

TEST(IntegratedGradients, ZeroAtTheBaseline) {
  for (auto kind : {CropModel::Gdd, CropModel::Ferguson}) {
    const auto w = wa(kind, 2);
    const auto m = make_dmc(tiny(), kind, fit_norm_stats(w), {"a", "b"}, 3);

    Eigen::VectorXd at_x = w[1].values.row(0).transpose();
    WeatherSeries flat = w[1];
    for (Eigen::Index t = 0; t < flat.values.rows(); ++t) flat.values.row(t) = at_x.transpose();
    const auto z = integrated_gradients(m, flat, 1, 10, 2, 8, at_x);
    EXPECT_LT(z.ig.cwiseAbs().maxCoeff(), 1e-15);
  }
}

TEST(SingleStage, ObjectiveIsTheTransitionRampLoss) {
  const auto f = phenology(2, 3);
  auto m = make_dmc(tiny(), CropModel::Gdd, fit_norm_stats(f.data.weather()), f.data.cultivars, 1);
  m.scored_stage = 1;
  m.validate();
  DmcObjective obj(m, f.data, {0, 1, 2});
  ad::Tape tape;
  std::map<std::string, ad::Var> vars;
  for (const auto& [n, a] : to_params(m.net)) vars.emplace(n, tape.variable(a));
  Rng rng(0);
  const std::vector<std::size_t> items{0, 1, 2};
  const double l = obj.loss(tape, vars, items, rng).scalar();
  EXPECT_GE(l, 0.0);
  EXPECT_LE(l, 1.0);
  m.biophys = CropModel::Ferguson;
  EXPECT_THROW(m.validate(), std::invalid_argument);
  auto j = m.to_json();
  EXPECT_EQ(j["scored_stage"], 1);
}

TEST(Plots, SvgFilesHaveOnePathPerSeries) {
  const auto dir = fs::temp_directory_path() / "dmc_plot_test";
  fs::remove_all(dir);
  PlotOptions o;
  o.title = "coverage <hardiness>";
  o.step = true;
  write_svg_plot(dir / "line.svg", {{"a", {0, 1, 2}, {0, 0.5, 1}}, {"b", {0, 1, 2}, {0.2, 0.4, 1}}}, o);
  write_svg_bars(dir / "bars.svg", {"bud break", "bloom", "veraison"}, {{"m", {}, {1, 2, 3}}}, o);
  std::ifstream in(dir / "line.svg");
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string s = ss.str();
  EXPECT_EQ(s.rfind("<svg", 0), 0u);
  std::size_t n = 0;
  for (auto p = s.find("<polyline"); p != std::string::npos; p = s.find("<polyline", p + 1)) ++n;
  EXPECT_EQ(n, 2u);
  EXPECT_NE(s.find("&lt;hardiness&gt;"), std::string::npos);
  EXPECT_TRUE(fs::exists(dir / "bars.svg"));
}

}  // namespace
}  // namespace dmc
