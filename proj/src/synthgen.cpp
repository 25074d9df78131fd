#include "dmc/synthgen.hpp"

#include <cstdio>
#include <fstream>

namespace dmc {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Cultivar tables

nlohmann::json CultivarTable::to_json() const {
  nlohmann::json cultivars = nlohmann::json::array();
  for (std::size_t i = 0; i < params.size(); ++i) {
    cultivars.push_back({{"name", names[i]}, {"params", param_table_json(spec, params[i])}});
  }
  return {{"model", to_string(model)}, {"spec", spec.to_json()}, {"provenance", provenance}, {"cultivars", cultivars}};
}

CultivarTable CultivarTable::from_json(const nlohmann::json& j) {
  CultivarTable t;
  t.model = crop_model_from_string(j.at("model").get<std::string>());
  t.spec = j.contains("spec") ? ParamSpec::from_json(j["spec"]) : spec_for(t.model);
  t.provenance = j.value("provenance", nlohmann::json::object());
  for (const auto& c : j.at("cultivars")) {
    t.names.push_back(c.at("name").get<std::string>());
    Eigen::VectorXd p = param_values_from_json(t.spec, c.at("params"));
    if (!t.spec.contains(p)) throw std::invalid_argument("cultivar '" + t.names.back() + "' has parameters outside their ranges");
    t.params.push_back(std::move(p));
  }
  return t;
}

void CultivarTable::save(const fs::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << to_json().dump(2) << '\n';
}

CultivarTable CultivarTable::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  auto t = from_json(nlohmann::json::parse(in));
  if (!t.provenance.contains("sampled")) t.provenance = {{"file", path.string()}};
  return t;
}

namespace {

std::string cultivar_name(int i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "cultivar_%02d", i);
  return buf;
}

Eigen::VectorXd draw(Rng& rng, const ParamSpec& spec, double shrink) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(spec.size()));
  for (std::size_t i = 0; i < spec.size(); ++i) {
    const auto& r = spec[i];
    v[static_cast<Eigen::Index>(i)] = r.midpoint() + shrink * 0.5 * r.width() * rng.uniform(-1.0, 1.0);
  }
  return v;
}

}  // namespace

CultivarTable sample_cultivars(std::uint64_t seed, int n, CropModel model, const ParamSpec& spec, double shrink) {
  if (n < 0) throw std::invalid_argument("sample_cultivars: negative count");
  if (shrink < 0.0 || shrink > 1.0) throw std::invalid_argument("sample_cultivars: shrink must lie in [0, 1]");
  CultivarTable t;
  t.model = model;
  t.spec = spec;
  t.provenance = {{"sampled", {{"seed", seed}, {"shrink", shrink}}}};
  Rng rng(seed);
  for (int i = 0; i < n; ++i) {
    t.names.push_back(cultivar_name(i));
    t.params.push_back(draw(rng, spec, shrink));
  }
  return t;
}

CultivarTable sample_cultivars(std::uint64_t seed, int n, CropModel model, double shrink) {
  return sample_cultivars(seed, n, model, spec_for(model), shrink);
}

// ---------------------------------------------------------------------------
// Modulation

nlohmann::json Modulation::to_json() const {
  return {{"parameter", parameter}, {"feature", feature}, {"window", window},
          {"amplitude", amplitude}, {"mean", mean},       {"sd", sd}};
}

Modulation Modulation::from_json(const nlohmann::json& j) {
  Modulation m;
  m.parameter = j.value("parameter", m.parameter);
  m.feature = j.value("feature", m.feature);
  m.window = j.value("window", m.window);
  m.amplitude = j.value("amplitude", m.amplitude);
  m.mean = j.value("mean", m.mean);
  m.sd = j.value("sd", m.sd);
  if (m.window < 1 || !(m.sd > 0)) throw std::invalid_argument("modulation: window and sd must be positive");
  return m;
}

namespace {

std::vector<double> trailing_mean(const WeatherSeries& w, const std::string& feature, int window) {
  const auto& f = w.features;
  const auto it = std::find(f.begin(), f.end(), feature);
  if (it == f.end()) throw std::invalid_argument("modulation: series has no feature '" + feature + "'");
  const auto col = static_cast<Eigen::Index>(it - f.begin());
  std::vector<double> out(w.days());
  double sum = 0.0;
  for (std::size_t t = 0; t < w.days(); ++t) {
    sum += w.values(static_cast<Eigen::Index>(t), col);
    if (t >= static_cast<std::size_t>(window)) sum -= w.values(static_cast<Eigen::Index>(t) - window, col);
    out[t] = sum / static_cast<double>(std::min<std::size_t>(t + 1, static_cast<std::size_t>(window)));
  }
  return out;
}

}  // namespace

Modulation fit_modulation(Modulation rule, const std::vector<WeatherSeries>& weather) {
  double s = 0, ss = 0;
  std::size_t n = 0;
  for (const auto& w : weather) {
    for (double v : trailing_mean(w, rule.feature, rule.window)) {
      s += v;
      ss += v * v;
      ++n;
    }
  }
  if (n == 0) throw std::invalid_argument("fit_modulation: no weather");
  rule.mean = s / static_cast<double>(n);
  const double var = ss / static_cast<double>(n) - rule.mean * rule.mean;
  rule.sd = var > 1e-12 ? std::sqrt(var) : 1.0;
  return rule;
}

Eigen::MatrixXd modulation_trace(const Modulation& rule, const ParamSpec& spec, const Eigen::VectorXd& base,
                                 const WeatherSeries& w, int* clamped) {
  const auto j = static_cast<Eigen::Index>(spec.index_of(rule.parameter));
  const auto& range = spec[static_cast<std::size_t>(j)];
  const auto m = trailing_mean(w, rule.feature, rule.window);
  Eigen::MatrixXd out = base.transpose().replicate(static_cast<Eigen::Index>(w.days()), 1);
  int n_clamped = 0;
  for (std::size_t t = 0; t < w.days(); ++t) {
    const double z = std::clamp((m[t] - rule.mean) / rule.sd, -1.0, 1.0);
    const double v = base[j] + rule.amplitude * z;
    const double c = std::clamp(v, range.min, range.max);
    if (c != v) ++n_clamped;
    out(static_cast<Eigen::Index>(t), j) = c;
  }
  if (clamped) *clamped = n_clamped;
  return out;
}

// ---------------------------------------------------------------------------
// Generation

std::vector<WeatherSeries> synthetic_weather(std::uint64_t seed, const ClimateProfile& profile, CropModel model,
                                             int first_year, int years) {
  const auto window = model == CropModel::Gdd ? SeasonWindow::Phenology : SeasonWindow::Hardiness;
  std::vector<WeatherSeries> out;
  for (int y = 0; y < years; ++y) {
    const auto [start, end] = window_bounds(window, first_year + y);
    const auto days = static_cast<std::size_t>((end - start).count() + 1);
    auto w = simulate_weather(seed * 1000003ULL + static_cast<std::uint64_t>(y), profile, start, days, profile.name);
    w.season_year = first_year + y;
    out.push_back(std::move(w));
  }
  return out;
}

namespace {

std::uint64_t season_seed(std::uint64_t seed, int cultivar, int year_index) {
  return seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(cultivar) * 1000003ULL +
         static_cast<std::uint64_t>(year_index) * 7919ULL + 17;
}

std::vector<bool> make_mask(std::size_t days, const SynthOptions& o, std::uint64_t seed) {
  std::vector<bool> obs(days, true);
  Rng rng(seed);
  if (o.mask_mode == MaskMode::Weekly) {
    const auto phase = rng.below(7);
    for (std::size_t t = 0; t < days; ++t) obs[t] = (t + 7 - phase) % 7 == 0;
    return obs;
  }
  if (o.mask_frac <= 0.0) return obs;
  for (std::size_t t = 0; t < days; ++t) obs[t] = !rng.bernoulli(o.mask_frac);
  return obs;
}

std::vector<Eigen::VectorXd> param_sequence(const CultivarTable& table, std::size_t c, const WeatherSeries& w,
                                            const SynthOptions& o, int* clamped) {
  if (!o.modulation) return {table.params[c]};
  const Eigen::MatrixXd trace = modulation_trace(*o.modulation, table.spec, table.params[c], w, clamped);
  std::vector<Eigen::VectorXd> seq;
  seq.reserve(static_cast<std::size_t>(trace.rows()));
  for (Eigen::Index t = 0; t < trace.rows(); ++t) seq.push_back(trace.row(t).transpose());
  return seq;
}

bool reaches_veraison(const CropStateSeries& s) { return s.onsets[kScoredTransitions - 1].has_value(); }

nlohmann::json options_json(const SynthOptions& o) {
  return {{"seed", o.seed},
          {"mask_frac", o.mask_frac},
          {"mask_mode", o.mask_mode == MaskMode::Weekly ? "weekly" : "iid"},
          {"gdd", {{"pool_emergence", o.gdd.pool_emergence}, {"carry_overshoot", o.gdd.carry_overshoot}}},
          {"modulation", o.modulation ? o.modulation->to_json() : nlohmann::json()}};
}

SynthOptions options_from_json(const nlohmann::json& j) {
  SynthOptions o;
  o.seed = j.at("seed").get<std::uint64_t>();
  o.mask_frac = j.at("mask_frac").get<double>();
  o.mask_mode = j.at("mask_mode").get<std::string>() == "weekly" ? MaskMode::Weekly : MaskMode::Iid;
  o.gdd.pool_emergence = j.at("gdd").at("pool_emergence").get<bool>();
  o.gdd.carry_overshoot = j.at("gdd").at("carry_overshoot").get<bool>();
  if (!j.at("modulation").is_null()) o.modulation = Modulation::from_json(j["modulation"]);
  return o;
}

}  // namespace

Dataset generate(const CultivarTable& table, const std::vector<WeatherSeries>& weather, const SynthOptions& options) {
  if (options.mask_frac < 0.0 || options.mask_frac >= 1.0) throw std::invalid_argument("generate: mask_frac must lie in [0, 1)");
  for (const auto& p : table.params) {
    if (!table.spec.contains(p)) throw std::invalid_argument("generate: cultivar parameters outside their ranges");
  }
  Dataset d;
  d.model = table.model;
  d.cultivars = table.names;
  int clamped_days = 0;
  auto unreached = nlohmann::json::array();
  for (std::size_t c = 0; c < table.size(); ++c) {
    for (std::size_t y = 0; y < weather.size(); ++y) {
      const auto& w = weather[y];
      Season s;
      s.cultivar = static_cast<int>(c);
      s.year = w.season_year;
      s.location = w.location_id;
      s.weather = w;
      int clamped = 0;
      const auto seq = param_sequence(table, c, w, options, &clamped);
      clamped_days += clamped;
      const auto tm = w.tmean();
      const auto states = biophys_rollout(table.model, tm, seq, options.gdd);
      s.observed = make_mask(w.days(), options, season_seed(options.seed, s.cultivar, static_cast<int>(y)));
      s.target = states.values;
      if (table.model == CropModel::Gdd) {
        for (auto& v : s.target) v = std::min(v, static_cast<double>(kScoredTransitions));
        s.onsets = states.onsets;
        if (!reaches_veraison(states)) unreached.push_back({s.cultivar, s.year});
      }
      d.seasons.push_back(std::move(s));
    }
  }
  d.meta = {{"generator",
             {{"table", table.to_json()},
              {"options", options_json(options)},
              {"clamped_days", clamped_days},
              {"unreached", unreached}}}};
  return d;
}

Dataset generate_nonstationary(const CultivarTable& table, const std::vector<WeatherSeries>& weather,
                               const SynthOptions& options) {
  if (!options.modulation) throw std::invalid_argument("generate_nonstationary: a modulation rule is required");
  return generate(table, weather, options);
}

Dataset regenerate(const Dataset& d) {
  if (!d.meta.contains("generator")) throw std::invalid_argument("regenerate: dataset has no generator metadata");
  const auto& g = d.meta["generator"];
  const auto table = CultivarTable::from_json(g.at("table"));
  std::vector<WeatherSeries> weather;
  for (auto i : d.seasons_of(0)) weather.push_back(d.seasons[i].weather);
  return generate(table, weather, options_from_json(g.at("options")));
}

std::vector<std::pair<int, int>> unreached_seasons(const Dataset& d) {
  std::vector<std::pair<int, int>> out;
  if (!d.meta.contains("generator")) return out;
  for (const auto& e : d.meta["generator"].at("unreached")) out.emplace_back(e[0].get<int>(), e[1].get<int>());
  return out;
}

CultivarTable sample_reachable_cultivars(std::uint64_t seed, int n, double shrink,
                                         const std::vector<WeatherSeries>& weather, const SynthOptions& options,
                                         int max_tries) {
  CultivarTable t = sample_cultivars(seed, 0, CropModel::Gdd, shrink);
  Rng rng(seed);
  int total_draws = 0;
  for (int i = 0; i < n; ++i) {
    bool ok = false;
    for (int attempt = 0; attempt < max_tries && !ok; ++attempt) {
      CultivarTable one = t;
      one.names = {cultivar_name(i)};
      one.params = {draw(rng, t.spec, shrink)};
      ++total_draws;
      ok = true;
      for (const auto& w : weather) {
        const auto seq = param_sequence(one, 0, w, options, nullptr);
        if (!reaches_veraison(biophys_rollout(CropModel::Gdd, w.tmean(), seq, options.gdd))) {
          ok = false;
          break;
        }
      }
      if (ok) {
        t.names.push_back(one.names[0]);
        t.params.push_back(one.params[0]);
      }
    }
    if (!ok) throw std::runtime_error("sample_reachable_cultivars: no reachable cultivar within max_tries draws");
  }
  t.provenance = {{"sampled", {{"seed", seed}, {"shrink", shrink}, {"reachable", true}, {"draws", total_draws}}}};
  return t;
}

}  // namespace dmc
