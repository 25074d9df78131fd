// Acceptance run: one PASS/FAIL line per criterion. Pass criterion numbers as
// arguments to run a subset.

#include "cli.hpp"
#include "dmc/adapt.hpp"
#include "dmc/evalbench.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

namespace {

using namespace dmc;
namespace fs = std::filesystem;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double cpu_seconds() { return static_cast<double>(std::clock()) / CLOCKS_PER_SEC; }

bool same_bits(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

bool same_bits(const std::vector<double>& a, const std::vector<double>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), sizeof(double) * a.size()) == 0;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

NetConfig desk_net() {
  NetConfig c;
  c.pre_dims = {64};
  c.recur_dim = 64;
  c.post_dims = {64};
  return c;
}

TrainConfig train_config(int epochs, double lr, int batch, std::uint64_t seed) {
  TrainConfig c;
  c.epochs = epochs;
  c.learning_rate = lr;
  c.batch_size = batch;
  c.seed = seed;
  return c;
}

double mean_error(const Predictor& p, const Dataset& d, const std::vector<std::size_t>& idx) {
  const auto scores = score_seasons(p, d, idx);
  double s = 0.0;
  for (const auto& x : scores) s += x.error;
  return s / static_cast<double>(scores.size());
}

// ---------------------------------------------------------------------------
// Shared fixtures, built on first use.

const std::vector<std::uint64_t> kSeeds{0, 1, 2};

struct Fixture {
  Dataset data;
  SplitPlan split;
};

// Rainfall-modulated TBASEM, 5 cultivars x 8 seasons.
const Fixture& nonstationary(std::uint64_t seed) {
  static std::map<std::uint64_t, Fixture> cache;
  auto it = cache.find(seed);
  if (it != cache.end()) return it->second;
  const auto w = synthetic_weather(100 + seed, ClimateProfile::named("washington"), CropModel::Gdd, 2000, 8);
  SynthOptions o;
  o.seed = seed;
  o.modulation = fit_modulation({}, w);
  const auto table = sample_reachable_cultivars(seed, 5, 0.5, w, o);
  Fixture f{generate_nonstationary(table, w, o), {}};
  f.split = make_splits(f.data, seed);
  return cache.emplace(seed, std::move(f)).first->second;
}

const Fixture& hardiness(std::uint64_t seed) {
  static std::map<std::uint64_t, Fixture> cache;
  auto it = cache.find(seed);
  if (it != cache.end()) return it->second;
  const auto w = synthetic_weather(200 + seed, ClimateProfile::named("washington"), CropModel::Ferguson, 2000, 8);
  SynthOptions o;
  o.seed = seed;
  o.mask_frac = 0.88;
  Fixture f{generate(sample_cultivars(seed, 5, CropModel::Ferguson, 0.5), w, o), {}};
  f.split = make_splits(f.data, seed);
  return cache.emplace(seed, std::move(f)).first->second;
}

FitOptions dmc_options(std::uint64_t seed) {
  FitOptions o;
  o.net = desk_net();
  o.train = train_config(40, 1e-3, 12, seed);
  return o;
}

// DMC-MTL on the full training split of the nonstationary fixture.
const Predictor& dmc_full(std::uint64_t seed) {
  static std::map<std::uint64_t, std::unique_ptr<Predictor>> cache;
  auto& p = cache[seed];
  if (!p) {
    const auto& f = nonstationary(seed);
    p = fit_predictor("dmc-mtl", f.data, f.split.train, f.split.val, dmc_options(seed));
  }
  return *p;
}

std::vector<std::size_t> two_seasons(std::uint64_t seed) {
  const auto& f = nonstationary(seed);
  return limit_seasons(f.data, f.split.train, 2, seed);
}

const Predictor& mtl_two(std::uint64_t seed) {
  static std::map<std::uint64_t, std::unique_ptr<Predictor>> cache;
  auto& p = cache[seed];
  if (!p) {
    const auto& f = nonstationary(seed);
    p = fit_predictor("dmc-mtl", f.data, two_seasons(seed), f.split.val, dmc_options(seed));
  }
  return *p;
}

const Predictor& stl_two(std::uint64_t seed) {
  static std::map<std::uint64_t, std::unique_ptr<Predictor>> cache;
  auto& p = cache[seed];
  if (!p) {
    const auto& f = nonstationary(seed);
    auto o = dmc_options(seed);
    const auto preset = lr_preset("dmc-stl");
    o.train.learning_rate = preset.learning_rate;
    o.train.batch_size = preset.batch_size;
    p = fit_predictor("dmc-stl", f.data, two_seasons(seed), f.split.val, o);
  }
  return *p;
}

// ---------------------------------------------------------------------------
// 1

Dataset tiny_labeled(CropModel kind, int days, std::uint64_t seed) {
  Dataset d;
  d.model = kind;
  d.cultivars = {"a", "b", "c"};
  Rng rng(seed);
  const auto spec = spec_for(kind);
  const unsigned month = kind == CropModel::Gdd ? 4 : 10;
  for (int i = 0; i < 3; ++i) {
    Season s;
    s.cultivar = i;
    s.year = 2000 + i;
    s.location = "wa";
    s.weather = simulate_weather(seed * 100 + static_cast<std::uint64_t>(i), ClimateProfile::named("washington"),
                                 make_date(s.year, month, 1), static_cast<std::size_t>(days), "wa");
    Eigen::VectorXd p = spec.midpoints();
    if (kind == CropModel::Gdd) p.tail(4) << 60, 120, 150, 200;
    p[0] += i;
    const auto o = oracle_rollout(kind, s.weather.tmean(), p);
    s.target = o.values;
    for (std::size_t t = 0; t < o.size(); ++t) s.observed.push_back(kind == CropModel::Gdd || rng.bernoulli(0.3));
    s.onsets = o.onsets;
    d.seasons.push_back(std::move(s));
  }
  return d;
}

Outcome gradient_fidelity() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  int fewest = 1 << 30, excluded = 0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    for (auto kind : {CropModel::Gdd, CropModel::Ferguson}) {
      const int days = 30 + static_cast<int>(seed) * 3;
      const auto data = tiny_labeled(kind, days, seed);
      NetConfig nc;
      nc.pre_dims = {8};
      nc.recur_dim = 4 + static_cast<int>(seed % 4) * 4;
      nc.post_dims = {6};
      const auto m = make_dmc(nc, kind, fit_norm_stats(data.weather()), data.cultivars, seed);
      const std::vector<std::size_t> idx{0, 1, 2};
      const Batch batch = make_batch(data, idx, m.stats);
      std::vector<Eigen::MatrixXd> point;
      for (const auto& n : m.net.names) point.push_back(m.net.at(n));
      const auto f = [&](ad::Tape& tape, const std::vector<ad::Var>& leaves) {
        NetBinding net;
        net.config = &m.net.config;
        for (std::size_t i = 0; i < leaves.size(); ++i) net.vars.emplace(m.net.names[i], leaves[i]);
        DmcCore core(tape, m, net, batch.cultivars);
        for (int t = 0; t < batch.days; ++t) {
          core.step(tape.constant(batch.inputs[static_cast<std::size_t>(t)]), batch.tmean.col(t));
        }
        Eigen::MatrixXd target = batch.target;
        if (kind == CropModel::Gdd) target = target.cwiseMin(3.0);
        return masked_mse(core.training_output(), target, batch.observed);
      };
      const auto r = finite_diff_check(f, point, seed, 200);
      worst = std::max(worst, r.max_rel_error);
      fewest = std::min(fewest, r.checked);
      excluded += r.excluded;
    }
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {worst <= 1e-4 && fewest >= 200 && secs < 120.0,
          fmt("20 composites, max rel error %.2e (<= 1e-4), min coords %d (>= 200), %d kink coords skipped, %.0f s (< 120)",
              worst, fewest, excluded, secs)};
}

// ---------------------------------------------------------------------------
// 2

Outcome oracle_equivalence() {
  const auto t0 = std::chrono::steady_clock::now();
  const std::vector<std::string> profiles{"washington", "vermont", "oregon", "california"};
  Rng rng(2024);
  int onset_mismatch = 0, reached = 0;
  double lte_diff = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto& profile = profiles[static_cast<std::size_t>(trial) % profiles.size()];
    const auto seed = static_cast<std::uint64_t>(trial) + 1;
    {
      const auto spec = gdd_spec();
      Eigen::VectorXd p(spec.size());
      for (std::size_t i = 0; i < spec.size(); ++i) p[static_cast<Eigen::Index>(i)] = rng.uniform(spec[i].min, spec[i].max);
      // Half the draws use short thermal sums so later transitions occur.
      if (trial % 2) p.tail(4) = p.tail(4) * 0.5;
      const auto w = synthetic_weather(seed, ClimateProfile::named(profile), CropModel::Gdd, 2001, 1)[0];
      const auto ref = oracle_rollout(CropModel::Gdd, w.tmean(), p);
      const auto out = biophys_rollout(CropModel::Gdd, w.tmean(), {p});
      if (ref.onsets != out.onsets || ref.values != out.values) ++onset_mismatch;
      if (ref.onsets[2]) ++reached;
    }
    {
      const auto spec = ferguson_spec();
      Eigen::VectorXd p(spec.size());
      for (std::size_t i = 0; i < spec.size(); ++i) p[static_cast<Eigen::Index>(i)] = rng.uniform(spec[i].min, spec[i].max);
      const auto w = synthetic_weather(seed, ClimateProfile::named(profile), CropModel::Ferguson, 2001, 1)[0];
      const auto ref = oracle_rollout(CropModel::Ferguson, w.tmean(), p);
      const auto out = biophys_rollout(CropModel::Ferguson, w.tmean(), {p});
      if (ref.size() != out.size()) {
        lte_diff = INFINITY;
        continue;
      }
      for (std::size_t t = 0; t < ref.size(); ++t) lte_diff = std::max(lte_diff, std::abs(ref.values[t] - out.values[t]));
    }
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {onset_mismatch == 0 && lte_diff <= 1e-9 && secs < 60.0,
          fmt("100 GDD pairs (%d reach veraison): %d onset/stage mismatches; 100 Ferguson pairs: max |dLTE50| %.1e "
              "(<= 1e-9); %.1f s (< 60)",
              reached, onset_mismatch, lte_diff, secs)};
}

// ---------------------------------------------------------------------------
// 3

Outcome generator_recovery() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto w = synthetic_weather(3, ClimateProfile::named("washington"), CropModel::Gdd, 2000, 8);
  SynthOptions o;
  o.seed = 3;
  const auto table = sample_reachable_cultivars(3, 5, 0.5, w, o);
  const auto d = generate(table, w, o);
  const auto cal = gd_calibrate(d, gdd_spec(), train_config(400, 0.1, 4, 3));
  double worst = 0.0;
  for (int c = 0; c < 5; ++c) {
    std::vector<Onsets> pred, truth;
    std::vector<int> end;
    for (auto i : d.seasons_of(c)) {
      const auto& s = d.seasons[i];
      pred.push_back(oracle_rollout(CropModel::Gdd, s.weather.tmean(), cal.params[static_cast<std::size_t>(c)]).onsets);
      truth.push_back(s.onsets);
      end.push_back(static_cast<int>(s.days()) - 1);
    }
    worst = std::max(worst, rmse_phenology(pred, truth, end).value_or(INFINITY));
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {worst < 1.0 && secs < 300.0,
          fmt("5 cultivars x 8 seasons, 400 epochs at lr 0.1: worst per-cultivar onset RMSE %.3f d (< 1.0), %.0f s (< 300)",
              worst, secs)};
}

// ---------------------------------------------------------------------------
// 4

Outcome dynamic_advantage() {
  const double c0 = cpu_seconds();
  double dmc = 0.0, gd = 0.0;
  std::string per_seed;
  for (auto seed : kSeeds) {
    const auto& f = nonstationary(seed);
    FitOptions go;
    go.train = train_config(400, 0.1, 4, seed);
    const auto g = fit_predictor("gd", f.data, f.split.train, f.split.val, go);
    const double e_gd = mean_error(*g, f.data, f.split.test);
    const double e_dmc = mean_error(dmc_full(seed), f.data, f.split.test);
    dmc += e_dmc / kSeeds.size();
    gd += e_gd / kSeeds.size();
    per_seed += fmt(" %.2f/%.2f", e_dmc, e_gd);
  }
  const double gain = 1.0 - dmc / gd;
  const double cpu = cpu_seconds() - c0;
  return {gain >= 0.20 && cpu < 1200.0,
          fmt("test onset RMSE dmc-mtl %.3f d vs gd %.3f d, gain %.3f (>= 0.20); per seed dmc/gd%s; %.0f s cpu (< 1200)",
              dmc, gd, gain, per_seed.c_str(), cpu)};
}

// ---------------------------------------------------------------------------
// 5

Outcome multitask_advantage() {
  int inversions = 0;
  double mtl = 0.0, stl = 0.0;
  std::string per_seed;
  for (auto seed : kSeeds) {
    const auto& f = nonstationary(seed);
    const double a = mean_error(mtl_two(seed), f.data, f.split.test);
    const double b = mean_error(stl_two(seed), f.data, f.split.test);
    if (a > b) ++inversions;
    mtl += a / kSeeds.size();
    stl += b / kSeeds.size();
    per_seed += fmt(" %.2f/%.2f", a, b);
  }
  return {inversions <= 1 && mtl <= stl,
          fmt("2 training seasons per cultivar: dmc-mtl %.3f d vs dmc-stl %.3f d, %d seed inversions (<= 1); per seed "
              "mtl/stl%s",
              mtl, stl, inversions, per_seed.c_str())};
}

// ---------------------------------------------------------------------------
// 6

Outcome biological_realism() {
  std::size_t rollouts = 0, violations = 0;
  auto check_all = [&](const Predictor& p, const Dataset& d) {
    for (const auto& s : d.seasons) {
      violations += realism_check(p.predict(s.weather, s.cultivar)).size();
      ++rollouts;
    }
  };
  for (auto seed : kSeeds) {
    const auto& f = nonstationary(seed);
    check_all(dmc_full(seed), f.data);
    check_all(mtl_two(seed), f.data);
    check_all(stl_two(seed), f.data);
    FitOptions to;
    to.train = train_config(40, lr_preset("temphybrid").learning_rate, lr_preset("temphybrid").batch_size, seed);
    check_all(*fit_predictor("temphybrid", f.data, f.split.train, f.split.val, to), f.data);

    const auto& h = hardiness(seed);
    FitOptions ho = dmc_options(seed);
    ho.train.epochs = 20;
    check_all(*fit_predictor("dmc-mtl", h.data, h.split.train, h.split.val, ho), h.data);
    to.train.epochs = 20;
    check_all(*fit_predictor("temphybrid", h.data, h.split.train, h.split.val, to), h.data);
  }

  // Deep-MTL regression head with an amplified output layer: the rounded stage
  // follows the weather up and down.
  const auto& f = nonstationary(0);
  NetConfig nc;
  nc.pre_dims = {8};
  nc.recur_dim = 8;
  nc.post_dims = {8};
  auto deep = make_deep_mtl(nc, CropModel::Gdd, false, fit_norm_stats(f.data.weather()), f.data.cultivars, 7);
  deep.net.at("out0.w") *= 40.0;
  deep.net.at("out0.b").setConstant(2.0);
  const auto& s = f.data.seasons[0];
  const auto deep_v = realism_check(deep_mtl_rollout(deep, s.weather, s.cultivar)).size();

  return {violations == 0 && deep_v >= 1,
          fmt("%zu DMC/TempHybrid rollouts (3 seeds, phenology and hardiness, every season): %zu violations (== 0); "
              "hand-built Deep-MTL: %zu violations (>= 1)",
              rollouts, violations, deep_v)};
}

// ---------------------------------------------------------------------------
// 7

Outcome een_invariance() {
  const auto& f = nonstationary(0);
  NetConfig nc;
  nc.pre_dims = {16};
  nc.recur_dim = 12;
  nc.post_dims = {16};
  const auto base = make_dmc(nc, CropModel::Gdd, fit_norm_stats(f.data.weather()), f.data.cultivars, 5);
  const auto hw = hardiness(0);
  const auto hbase = make_dmc(nc, CropModel::Ferguson, fit_norm_stats(hw.data.weather()), hw.data.cultivars, 6);
  int differing = 0;
  Rng rng(77);
  for (int draw = 0; draw < 50; ++draw) {
    const bool pheno = draw % 2 == 0;
    const auto& m = pheno ? base : hbase;
    const auto& d = pheno ? f.data : hw.data;
    auto een = make_een(m, static_cast<std::uint64_t>(draw) + 1000, draw % 5 != 4);
    for (Eigen::Index i = 0; i < een.cultivar_scalar.size(); ++i) een.cultivar_scalar(i) = rng.normal();
    const auto& s = d.seasons[static_cast<std::size_t>(draw) % d.seasons.size()];
    const auto a = adapt_rollout(m, een, s.weather, s.cultivar, {});
    const auto b = dmc_rollout(m, s.weather, s.cultivar);
    if (!same_bits(a.states.values, b.states.values) || !same_bits(a.omega, b.omega)) ++differing;
  }
  return {differing == 0, fmt("50 EEN weight draws with no observations: %d rollouts differ from the base (== 0)",
                              differing)};
}

// ---------------------------------------------------------------------------
// 8

Outcome een_benefit() {
  double base_sum = 0.0, adapt_sum = 0.0;
  std::string per_seed;
  for (auto seed : kSeeds) {
    const auto& f = nonstationary(seed);
    const auto one = limit_seasons(f.data, f.split.train, 1, seed);
    const auto p = fit_predictor("dmc-mtl", f.data, one, f.split.val, dmc_options(seed));
    const DmcModel& m = *as_dmc(*p);
    auto een = make_een(m, seed);
    train_een(m, een, f.data, one, f.split.val, train_config(100, 1e-2, 12, seed));
    Rng rng(seed + 500);
    double b = 0.0, a = 0.0;
    for (auto i : f.split.test) {
      const auto& s = f.data.seasons[i];
      const auto cutoff = static_cast<std::size_t>(rng.below(s.days()));
      const auto phase = rng.below(7);
      auto obs = season_observations(s, cutoff);
      for (std::size_t t = 0; t < obs.size(); ++t) {
        if ((t + 7 - phase) % 7 != 0) obs[t].reset();
      }
      const int end = static_cast<int>(s.days()) - 1;
      b += season_onset_error(*onset_errors(dmc_rollout(m, s.weather, s.cultivar).states.onsets, s.onsets, end));
      a += season_onset_error(*onset_errors(adapt_rollout(m, een, s.weather, s.cultivar, obs).states.onsets, s.onsets, end));
    }
    const double n = static_cast<double>(f.split.test.size());
    base_sum += b / n / kSeeds.size();
    adapt_sum += a / n / kSeeds.size();
    per_seed += fmt(" %.2f/%.2f", a / n, b / n);
  }
  const double gain = 1.0 - adapt_sum / base_sum;
  return {gain >= 0.10,
          fmt("1 training season, weekly observations to a random cutoff: adapted %.3f d vs base %.3f d, gain %.3f "
              "(>= 0.10); per seed adapted/base%s",
              adapt_sum, base_sum, gain, per_seed.c_str())};
}

// ---------------------------------------------------------------------------
// 9

Outcome masking_fidelity() {
  double lo = 1.0, hi = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto w = synthetic_weather(300 + seed, ClimateProfile::named("washington"), CropModel::Ferguson, 2000, 10);
    SynthOptions o;
    o.seed = seed;
    o.mask_frac = 0.88;
    const auto d = generate(sample_cultivars(seed, 6, CropModel::Ferguson, 0.5), w, o);
    std::size_t kept = 0, days = 0;
    for (const auto& s : d.seasons) {
      kept += s.observed_count();
      days += s.days();
    }
    const double frac = static_cast<double>(kept) / static_cast<double>(days);
    lo = std::min(lo, frac);
    hi = std::max(hi, frac);
  }
  return {lo >= 0.10 && hi <= 0.14,
          fmt("5 hardiness datasets (6 cultivars x 10 seasons): observed fraction in [%.4f, %.4f] (within 0.12 +- 0.02)",
              lo, hi)};
}

// ---------------------------------------------------------------------------
// 10

Outcome pinn_endpoints() {
  Rng rng(10);
  double endpoint = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::MatrixXd pred = Eigen::MatrixXd::Random(3, 40) * 5.0;
    const Eigen::MatrixXd target = Eigen::MatrixXd::Random(3, 40) * 5.0;
    const Eigen::MatrixXd bio = Eigen::MatrixXd::Random(3, 40) * 5.0;
    ad::Mask mask(3, 40);
    for (Eigen::Index i = 0; i < mask.size(); ++i) mask(i) = rng.bernoulli(0.4);
    mask(0, 0) = true;
    double se_t = 0.0, se_b = 0.0;
    int n = 0;
    for (Eigen::Index i = 0; i < mask.size(); ++i) {
      if (!mask(i)) continue;
      se_t += std::pow(pred(i) - target(i), 2);
      se_b += std::pow(pred(i) - bio(i), 2);
      ++n;
    }
    ad::Tape tape;
    const auto v = tape.variable(pred);
    endpoint = std::max(endpoint, std::abs(pinn_loss(v, target, bio, mask, 0.0).scalar() - se_t / n));
    endpoint = std::max(endpoint, std::abs(pinn_loss(v, target, bio, mask, 1.0).scalar() - se_b / n));
  }
  // pred (1, 2, 3), observed (1.5, 2, 2), physics (1, 3, 5):
  // 0.5 * (0.25 + 0 + 1) / 3 + 0.5 * (0 + 1 + 4) / 3 = 25 / 24.
  ad::Tape tape;
  Eigen::MatrixXd pred(1, 3), target(1, 3), bio(1, 3);
  pred << 1, 2, 3;
  target << 1.5, 2, 2;
  bio << 1, 3, 5;
  const double mid = pinn_loss(tape.variable(pred), target, bio, ad::Mask::Constant(1, 3, true), 0.5).scalar();
  const double mid_err = std::abs(mid - 25.0 / 24.0);
  return {endpoint <= 1e-12 && mid_err <= 1e-12,
          fmt("p=0/p=1 max deviation from the plain MSEs %.1e (<= 1e-12); p=0.5 fixture %.15f vs 25/24 (|diff| %.1e)",
              endpoint, mid, mid_err)};
}

// ---------------------------------------------------------------------------
// 11

Outcome statistics() {
  struct Row {
    double t;
    int df;
    double p;
  };
  const std::vector<Row> table{{12.706, 1, 0.05}, {4.303, 2, 0.05}, {2.571, 5, 0.05}, {3.169, 10, 0.01}, {2.845, 20, 0.01}};
  double t_err = 0.0, p_err = 0.0;
  for (const auto& r : table) {
    // Paired samples whose differences have exactly this t statistic.
    const int n = r.df + 1;
    Rng rng(static_cast<std::uint64_t>(r.df));
    std::vector<double> e(static_cast<std::size_t>(n));
    for (auto& x : e) x = rng.normal();
    double mean = 0.0;
    for (double x : e) mean += x / n;
    double ss = 0.0;
    for (auto& x : e) {
      x -= mean;
      ss += x * x;
    }
    const double sd = std::sqrt(ss / (n - 1));
    std::vector<double> a(e.size()), b(e.size());
    for (std::size_t i = 0; i < e.size(); ++i) {
      b[i] = 10.0 + rng.normal();
      a[i] = b[i] + e[i] / sd + r.t / std::sqrt(static_cast<double>(n));
    }
    const auto tt = paired_ttest(a, b);
    t_err = std::max(t_err, std::abs(tt.t - r.t));
    p_err = std::max(p_err, std::abs(tt.p - r.p));
    if (tt.df != r.df) t_err = INFINITY;
  }
  Rng rng(11);
  int non_monotone = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> rmse(1 + rng.below(40));
    for (auto& x : rmse) x = std::abs(rng.normal()) * 10.0;
    std::vector<double> th(1 + rng.below(30));
    for (auto& x : th) x = rng.uniform(-1.0, 30.0);
    std::sort(th.begin(), th.end());
    const auto c = coverage_curve(rmse, th);
    for (std::size_t i = 1; i < c.size(); ++i) non_monotone += c[i] < c[i - 1];
    for (double x : c) non_monotone += x < 0.0 || x > 1.0;
  }
  return {t_err < 5e-4 && p_err < 5e-4 && non_monotone == 0,
          fmt("5 t-table rows: max |t - t_table| %.1e, max |p - p_table| %.1e (3 decimals); 1000 coverage curves: %d "
              "monotonicity breaks (== 0)",
              t_err, p_err, non_monotone)};
}

// ---------------------------------------------------------------------------
// 12

Outcome attribution() {
  // Trained desk-scale model; target TBASEM on day 120 of the first test season.
  const auto& f = nonstationary(0);
  const DmcModel& m = *as_dmc(dmc_full(0));
  const auto& s = f.data.seasons[f.split.test[0]];
  const auto a = integrated_gradients(m, s.weather, s.cultivar, 120, static_cast<int>(m.spec.index_of("TBASEM")), 256);

  Rng rng(12);
  Eigen::MatrixXd x(20, 6), base(20, 6), w(20, 6);
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    x(i) = rng.normal();
    base(i) = rng.normal();
    w(i) = rng.normal();
  }
  const MatrixFn linear = [&](ad::Tape& tape, const ad::Var& v) { return ad::sum(ad::scale(v, w) + tape.constant(3.0)); };
  const Eigen::MatrixXd ig = integrated_gradients(linear, x, base, 256);
  const double probe = (ig - w.cwiseProduct(x - base)).cwiseAbs().maxCoeff();
  return {a.completeness <= 1e-3 && probe <= 1e-12,
          fmt("trained dmc-mtl, TBASEM day 120, m=256: completeness residual %.2e relative (<= 1e-3, F(x)-F(b) = %.4f); "
              "linear probe max |IG - w(x-b)| %.1e",
              a.completeness, a.f_x - a.f_baseline, probe)};
}

// ---------------------------------------------------------------------------
// 13

Outcome determinism() {
  const fs::path root = fs::temp_directory_path() / "dmc_acceptance_determinism";
  fs::remove_all(root);
  auto cli = [](std::vector<std::string> args) {
    std::ostringstream sink;
    auto* saved = std::cout.rdbuf(sink.rdbuf());
    const int status = cli::run(args);
    std::cout.rdbuf(saved);
    if (status != 0) throw std::runtime_error("command failed: " + args[0]);
  };
  const std::string data = (root / "syn" / "dataset").string();
  cli({"synth", "--out", (root / "syn").string(), "--cultivars", "3", "--years", "5", "--seed", "4"});
  const std::vector<std::string> net{"--set", "net.recur_dim=8", "--set", "net.pre_dims=[8]", "--set", "net.post_dims=[8]"};
  auto with_net = [&](std::vector<std::string> a) {
    a.insert(a.end(), net.begin(), net.end());
    return a;
  };
  const fs::path dir = root / "run";
  const std::string ck = (dir / "train" / "checkpoint.ckpt").string();
  const std::vector<std::vector<std::string>> runs{
      with_net({"train", "--out", (dir / "train").string(), "--dataset", data, "--set", "train.epochs=3"}),
      {"train", "--kind", "een", "--out", (dir / "een").string(), "--dataset", data, "--base-checkpoint", ck, "--set",
       "train.epochs=2"},
      with_net({"eval", "--experiment", "headline", "--out", (dir / "headline").string(), "--dataset", data, "--jobs",
                "2", "--set", R"(models=["gd","dmc-mtl","deep-mtl"])", "--set", "seeds=[0,1]", "--set",
                "train.epochs=2"}),
      with_net({"eval", "--experiment", "coverage", "--out", (dir / "coverage").string(), "--dataset", data, "--set",
                R"(models=["gd","dmc-mtl"])", "--set", "seeds=[0]", "--set", "train.epochs=2"}),
      with_net({"eval", "--experiment", "sweep", "--out", (dir / "sweep").string(), "--dataset", data, "--set",
                R"(models=["dmc-mtl"])", "--set", "seeds=[0]", "--set", "seasons=[1,2]", "--set", "train.epochs=2"}),
      with_net({"eval", "--experiment", "perstage", "--out", (dir / "perstage").string(), "--dataset", data, "--set",
                "seeds=[0]", "--set", "train.epochs=1"}),
      with_net({"eval", "--experiment", "robustness", "--out", (dir / "robustness").string(), "--dataset", data,
                "--set", R"(models=["dmc-mtl"])", "--set", "seeds=[0]", "--set", "train.epochs=1", "--set",
                "locations={\"again\":\"" + data + "\"}"}),
      {"attribute", "--out", (dir / "attribute").string(), "--checkpoint", ck, "--dataset", data, "--season", "0",
       "--day", "60", "--param", "TBASEM", "--steps", "32"},
  };
  auto snapshot = [&] {
    std::map<std::string, std::string> files;
    for (const auto& entry : fs::recursive_directory_iterator(dir)) {
      if (entry.is_regular_file()) files[fs::relative(entry.path(), dir).string()] = slurp(entry.path());
    }
    return files;
  };
  for (const auto& args : runs) cli(args);
  const auto first = snapshot();
  for (const auto& args : runs) cli(args);
  const auto second = snapshot();
  int differing = 0;
  std::string which;
  for (const auto& [name, bytes] : first) {
    const auto it = second.find(name);
    if (it == second.end() || it->second != bytes) {
      ++differing;
      which += " " + name;
    }
  }
  if (second.size() != first.size()) ++differing;
  return {differing == 0 && !first.empty(),
          fmt("%zu commands rerun with identical configs (train, een, 5 eval experiments, attribute): %d of %zu output "
              "files differ (== 0)%s",
              runs.size(), differing, first.size(), which.c_str())};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"gradient fidelity", gradient_fidelity},
      {"oracle equivalence", oracle_equivalence},
      {"generator recovery", generator_recovery},
      {"dynamic calibration advantage", dynamic_advantage},
      {"multi-task advantage", multitask_advantage},
      {"biological realism", biological_realism},
      {"EEN invariance", een_invariance},
      {"EEN benefit", een_benefit},
      {"masking fidelity", masking_fidelity},
      {"PINN endpoints", pinn_endpoints},
      {"statistics", statistics},
      {"integrated gradients", attribution},
      {"determinism", determinism},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("criterion %2d %s  %s: %s [%.0f s]\n", id, o.pass ? "PASS" : "FAIL", criteria[i].first,
                o.detail.c_str(), secs);
    std::fflush(stdout);
    failed += !o.pass;
  }
  return failed == 0 ? 0 : 1;
}
