#include "dmc/baselines.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <set>

namespace dmc {
namespace {

namespace fs = std::filesystem;

std::vector<WeatherSeries> wa(CropModel m, int years, std::uint64_t seed = 1) {
  return synthetic_weather(seed, ClimateProfile::named("washington"), m, 2000, years);
}

NetConfig tiny() {
  NetConfig c;
  c.pre_dims = {4};
  c.recur_dim = 4;
  c.post_dims = {4};
  return c;
}

struct Fixture {
  CultivarTable table;
  Dataset data;
  std::vector<std::size_t> train, val;
};

Fixture fixture(CropModel m, int cultivars = 3, int years = 3) {
  Fixture f;
  const auto w = wa(m, years);
  SynthOptions o;
  f.table = m == CropModel::Gdd ? sample_reachable_cultivars(2, cultivars, 0.5, w, o)
                                : sample_cultivars(2, cultivars, m, 0.5);
  f.data = generate(f.table, w, o);
  for (int c = 0; c < cultivars; ++c) {
    const auto s = f.data.seasons_of(c);
    for (std::size_t i = 0; i + 1 < s.size(); ++i) f.train.push_back(s[i]);
    f.val.push_back(s.back());
  }
  return f;
}

FitOptions quick(std::uint64_t seed = 0) {
  FitOptions o;
  o.net = tiny();
  o.train.epochs = 2;
  o.train.learning_rate = 1e-3;
  o.train.batch_size = 4;
  o.train.seed = seed;
  TrainConfig cal;
  cal.epochs = 2;
  cal.learning_rate = 0.1;
  cal.batch_size = 4;
  o.calibration = cal;
  return o;
}

TEST(BaselineKind, ElevenNamedKinds) {
  EXPECT_EQ(all_baseline_kinds().size(), 11u);
  std::set<std::string> names;
  for (auto k : all_baseline_kinds()) {
    names.insert(to_string(k));
    EXPECT_EQ(baseline_kind_from_string(to_string(k)), k);
  }
  EXPECT_EQ(names.size(), 11u);
  EXPECT_THROW(baseline_kind_from_string("dmc-foo"), std::invalid_argument);
}

TEST(DeployedBio, IsTheOracleWithPublishedParameters) {
  auto f = fixture(CropModel::Gdd);
  const auto path = fs::temp_directory_path() / "dmc_published.json";
  write_published_params(path, f.table);
  const auto table = read_published_params(path);
  ASSERT_EQ(table.names, f.table.names);
  for (std::size_t c = 0; c < table.size(); ++c) EXPECT_TRUE(table.params[c].isApprox(f.table.params[c], 1e-15));
  for (const auto& s : f.data.seasons) {
    const auto r = deployed_bio(table, table.names[static_cast<std::size_t>(s.cultivar)], s.weather);
    const auto o = oracle_rollout(CropModel::Gdd, s.weather.tmean(), f.table.params[static_cast<std::size_t>(s.cultivar)]);
    EXPECT_EQ(r.values, o.values);
    EXPECT_EQ(r.onsets, s.onsets);
  }
  EXPECT_THROW(deployed_bio(table, "nobody", f.data.seasons[0].weather), std::invalid_argument);
  FitOptions o = quick();
  o.published = table;
  o.published->names[1] = "renamed";
  EXPECT_THROW(fit_predictor("deployed-bio", f.data, f.train, f.val, o), std::invalid_argument);
}

TEST(DeepMtl, SoftmaxRowsSumToOneAndZeroWeightsAreUniform) {
  const auto w = wa(CropModel::Gdd, 1);
  const auto stats = fit_norm_stats(w);
  auto m = make_deep_mtl(tiny(), CropModel::Gdd, true, stats, {"a", "b"}, 3);
  const Eigen::MatrixXd logits = deep_mtl_forward(m, w[0], 1);
  ASSERT_EQ(logits.cols(), 4);
  for (Eigen::Index t = 0; t < logits.rows(); ++t) {
    const Eigen::RowVectorXd p = (logits.row(t).array() - logits.row(t).maxCoeff()).exp();
    EXPECT_NEAR((p / p.sum()).sum(), 1.0, 1e-12);
  }
  m.net.set_zero();
  const Eigen::MatrixXd z = deep_mtl_forward(m, w[0], 0);
  EXPECT_TRUE((z.array() == 0.0).all());
}

TEST(DeepMtl, RegressionIsUnclamped) {
  const auto w = wa(CropModel::Ferguson, 1);
  auto m = make_deep_mtl(tiny(), CropModel::Ferguson, false, fit_norm_stats(w), {"a"}, 3);
  m.net.set_zero();
  m.net.at("out0.b")(0, 0) = 12.0;
  const auto r = deep_mtl_rollout(m, w[0], 0);
  for (double v : r.values) EXPECT_EQ(v, 12.0);
  EXPECT_GT(r.values[0], ferguson_spec().maxs()[1]);
}

TEST(DeepMtl, ClassOnsetsAreFirstArgmaxDays) {
  const auto w = wa(CropModel::Gdd, 1);
  auto m = make_deep_mtl(tiny(), CropModel::Gdd, true, fit_norm_stats(w), {"a"}, 3);
  m.net.set_zero();
  m.net.at("out0.b")(0, 2) = 1.0;
  const auto r = deep_mtl_rollout(m, w[0], 0);
  EXPECT_FALSE(r.onsets[0].has_value());
  EXPECT_EQ(r.onsets[1], 0);
  EXPECT_FALSE(r.onsets[2].has_value());
}

TEST(Residual, ZeroNetworkIsTheStaticRolloutAndBiasShifts) {
  const auto w = wa(CropModel::Ferguson, 1);
  const Eigen::VectorXd p = ferguson_spec().midpoints();
  auto m = make_residual(tiny(), CropModel::Ferguson, {p}, fit_norm_stats(w), {"a"}, 1);
  m.net.set_zero();
  const auto o = oracle_rollout(CropModel::Ferguson, w[0].tmean(), p);
  EXPECT_EQ(residual_rollout(m, w[0], 0).values, o.values);
  m.net.at("out0.b")(0, 0) = 1.0;
  const auto r = residual_rollout(m, w[0], 0);
  for (std::size_t t = 0; t < o.size(); ++t) EXPECT_EQ(r.values[t], o.values[t] + 1.0);
}

TEST(Residual, PhenologyRoundsTheShiftedStage) {
  const auto w = wa(CropModel::Gdd, 1);
  const Eigen::VectorXd p = gdd_spec().midpoints();
  auto m = make_residual(tiny(), CropModel::Gdd, {p}, fit_norm_stats(w), {"a"}, 1);
  m.net.set_zero();
  m.net.at("out0.b")(0, 0) = 0.6;
  const auto o = oracle_rollout(CropModel::Gdd, w[0].tmean(), p);
  const auto r = residual_rollout(m, w[0], 0);
  for (std::size_t t = 0; t < o.size(); ++t) EXPECT_EQ(r.values[t], std::min(o.values[t] + 1.0, 4.0));
}

TEST(TempHybrid, InitialResponseIsTheMidpointResponse) {
  const auto g = make_temphybrid(CropModel::Gdd, {"a"}, 5);
  const Eigen::VectorXd mid = gdd_spec().midpoints();
  const GddParams gp = GddParams::from_vector(mid);
  Eigen::VectorXd t = Eigen::VectorXd::LinSpaced(121, -20.0, 40.0);
  const Eigen::VectorXd r = temphybrid_response(g, t);
  for (Eigen::Index i = 0; i < t.size(); ++i) EXPECT_NEAR(r[i], gdd_response(t[i], gp), 1e-12) << t[i];

  const auto f = make_temphybrid(CropModel::Ferguson, {"a"}, 5);
  const double base = ferguson_spec().midpoints()[3];
  const Eigen::VectorXd c = temphybrid_response(f, t);
  for (Eigen::Index i = 0; i < t.size(); ++i) EXPECT_NEAR(c[i], std::min(t[i] - base, 0.0), 1e-12);
}

class GridFit final : public Objective {
 public:
  GridFit(Eigen::VectorXd t, Eigen::VectorXd y) : t_(std::move(t)), y_(std::move(y)) {}
  std::size_t train_size() const override { return 1; }
  ad::Var loss(ad::Tape& tape, const std::map<std::string, ad::Var>& p, std::span<const std::size_t>, Rng&) override {
    const ad::Var r = temphybrid_response(p, CropModel::Gdd, 1.0 / 30.0, tape.constant(Eigen::MatrixXd(t_)));
    return ad::mean(ad::square(r - tape.constant(Eigen::MatrixXd(y_))));
  }

 private:
  Eigen::VectorXd t_, y_;
};

TEST(TempHybrid, FittedResponseReproducesAStaticGddRollout) {
  // Fit the network to clamp(t - 10, 0, 30) on a grid, then roll out with tbasem 10, teffmx 30.
  auto m = make_temphybrid(CropModel::Gdd, {"a"}, 7);
  Eigen::VectorXd t = Eigen::VectorXd::LinSpaced(241, -20.0, 40.0), y(241);
  for (Eigen::Index i = 0; i < t.size(); ++i) y[i] = std::clamp(t[i] - 10.0, 0.0, 30.0);
  ParamSet ffn;
  for (const auto& [n, a] : m.arrays) {
    if (n != "logits") ffn.emplace(n, a);
  }
  GridFit obj(t, y);
  TrainConfig cfg;
  cfg.epochs = 1500;
  cfg.learning_rate = 0.01;
  cfg.batch_size = 1;
  const auto fit = train(ffn, obj, cfg);
  for (const auto& [n, a] : fit.final_params) m.arrays[n] = a;
  const Eigen::VectorXd r = temphybrid_response(m, t);
  EXPECT_LT((r - y).cwiseAbs().maxCoeff(), 0.25);

  Eigen::VectorXd p = gdd_spec().midpoints();
  p[0] = 10.0;
  p[1] = 30.0;
  p.tail(4).setConstant(250.0);
  m.arrays["logits"] = gdd_spec().unrescale(p).array().atanh().matrix().transpose();
  EXPECT_TRUE(temphybrid_params(m, 0).isApprox(p, 1e-9));
  for (const auto& w : wa(CropModel::Gdd, 3, 4)) {
    const auto a = temphybrid_rollout(m, w, 0);
    const auto o = oracle_rollout(CropModel::Gdd, w.tmean(), p);
    for (int k = 0; k < 3; ++k) {
      ASSERT_TRUE(a.onsets[static_cast<std::size_t>(k)] && o.onsets[static_cast<std::size_t>(k)]);
      EXPECT_LE(std::abs(*a.onsets[static_cast<std::size_t>(k)] - *o.onsets[static_cast<std::size_t>(k)]), 1) << k;
    }
    for (std::size_t d = 1; d < a.size(); ++d) EXPECT_GE(a.values[d], a.values[d - 1]);
  }
}

TEST(Variants, ShapesFollowTheEmbeddingMode) {
  const auto stats = fit_norm_stats(wa(CropModel::Gdd, 1));
  const std::vector<std::string> names{"a", "b", "c"};
  const auto agg = make_variant(BaselineKind::DmcAgg, tiny(), CropModel::Gdd, stats, names, 1);
  EXPECT_EQ(agg.net.config.trunk_input_dim(), static_cast<int>(stats.features.size()) + 2);
  EXPECT_EQ(agg.net.config.n_cultivars, 1);
  const auto mh = make_variant(BaselineKind::DmcMultiH, tiny(), CropModel::Gdd, stats, names, 1);
  EXPECT_EQ(mh.net.output_layers(), 3);
  EXPECT_EQ(make_variant(BaselineKind::DmcMult, tiny(), CropModel::Gdd, stats, names, 1).net.config.embed_mode,
            EmbedMode::Mult);
  EXPECT_EQ(make_variant(BaselineKind::DmcAdd, tiny(), CropModel::Gdd, stats, names, 1).net.config.embed_mode,
            EmbedMode::Add);
  EXPECT_THROW(make_variant(BaselineKind::DeepMtl, tiny(), CropModel::Gdd, stats, names, 1), std::invalid_argument);
}

TEST(Variants, SingleTaskModelsNeverSeeOtherCultivars) {
  auto f = fixture(CropModel::Gdd, 2, 3);
  const auto a = fit_predictor("dmc-stl", f.data, f.train, f.val, quick());
  for (auto& s : f.data.seasons) {
    if (s.cultivar == 1) {
      for (auto& v : s.target) v = 0.0;
    }
  }
  const auto b = fit_predictor("dmc-stl", f.data, f.train, f.val, quick());
  const auto& w = f.data.seasons[0].weather;
  EXPECT_EQ(a->parameters(w, 0), b->parameters(w, 0));
  EXPECT_NE(a->parameters(w, 1), b->parameters(w, 1));
}

TEST(Predictors, EveryKindFitsSavesAndReloads) {
  for (auto task : {CropModel::Gdd, CropModel::Ferguson}) {
    auto f = fixture(task, 2, 3);
    for (const auto& kind : model_kinds()) {
      FitOptions o = quick();
      if (kind == "deployed-bio") o.published = f.table;
      const auto p = fit_predictor(kind, f.data, f.train, f.val, o);
      EXPECT_EQ(p->kind(), kind);
      EXPECT_EQ(p->task(), task);
      const auto path = fs::temp_directory_path() / ("dmc_pred_" + kind + ".ckpt");
      save_predictor(path, *p);
      const auto q = load_predictor(path);
      EXPECT_EQ(q->kind(), kind);
      for (std::size_t i : f.val) {
        const auto& s = f.data.seasons[i];
        const auto x = p->predict(s.weather, s.cultivar);
        const auto y = q->predict(s.weather, s.cultivar);
        ASSERT_EQ(x.size(), s.days()) << kind;
        EXPECT_EQ(x.values, y.values) << kind;
        EXPECT_EQ(x.onsets, y.onsets) << kind;
      }
    }
  }
}

TEST(Predictors, FitIsDeterministic) {
  auto f = fixture(CropModel::Ferguson, 2, 3);
  for (const std::string kind : {"pinn", "residual", "temphybrid", "dmc-multih"}) {
    const auto a = fit_predictor(kind, f.data, f.train, f.val, quick(3))->checkpoint();
    const auto b = fit_predictor(kind, f.data, f.train, f.val, quick(3))->checkpoint();
    ASSERT_EQ(a.names, b.names) << kind;
    for (const auto& n : a.names) EXPECT_EQ(a.arrays.at(n), b.arrays.at(n)) << kind << ' ' << n;
  }
}

TEST(Pinn, PhysicsTermPullsTowardsTheStaticRollout) {
  auto f = fixture(CropModel::Ferguson, 1, 2);
  const auto stats = fit_norm_stats(f.data.weather());
  const auto m = make_deep_mtl(tiny(), CropModel::Ferguson, false, stats, f.data.cultivars, 1);
  const std::vector<Eigen::VectorXd> physics{ferguson_spec().midpoints()};
  DeepObjective plain(m, f.data, {0, 1});
  DeepObjective both(m, f.data, {0, 1}, {}, physics, 0.5);
  DeepObjective only(m, f.data, {0, 1}, {}, physics, 1.0);
  ad::Tape tape;
  tape.set_recording(false);
  std::map<std::string, ad::Var> vars;
  for (const auto& [n, a] : to_params(m.net)) vars.emplace(n, tape.constant(a));
  Rng rng(0);
  const std::vector<std::size_t> items{0, 1};
  const double lp = plain.loss(tape, vars, items, rng).scalar();
  const double lo = only.loss(tape, vars, items, rng).scalar();
  EXPECT_NEAR(both.loss(tape, vars, items, rng).scalar(), 0.5 * lp + 0.5 * lo, 1e-12);
}

}  // namespace
}  // namespace dmc
