#include "cli.hpp"

#include "dmc/adapt.hpp"
#include "dmc/evalbench.hpp"
#include "dmc/weather_fetch.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <numeric>

namespace dmc::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const char* const kStages[] = {"budbreak", "bloom", "veraison"};

// ---------------------------------------------------------------------------
// Configuration

json defaults_for(const std::string& command) {
  const json common = {{"name", "default"}, {"out", ""}};
  json d;
  if (command == "fetch") {
    d = {{"lat", nullptr}, {"lon", nullptr}, {"first_year", nullptr}, {"last_year", nullptr},
         {"cache", ""},    {"fetch", json::object()}};
  } else if (command == "synth") {
    d = {{"model", "gdd"},     {"cultivars", 5},        {"years", 8},        {"first_year", 2000},
         {"profile", "washington"}, {"seed", 0},         {"shrink", 0.5},     {"mask_frac", nullptr},
         {"mask_mode", "iid"}, {"nonstationary", false}, {"modulation", json::object()}, {"table", ""}};
  } else if (command == "preprocess") {
    d = {{"input", ""}, {"schema", ""}, {"window", "whole"}};
  } else if (command == "train") {
    d = {{"kind", "dmc-mtl"},      {"dataset", ""},         {"seed", 0},         {"split_seed", 0},
         {"net", json::object()},  {"train", json::object()}, {"calibration", nullptr}, {"published", ""},
         {"base_checkpoint", ""},  {"resume", ""},          {"classification", true}};
  } else if (command == "eval") {
    d = {{"experiment", "headline"},
         {"dataset", ""},
         {"models", {"dmc-mtl", "gd"}},
         {"seeds", kCanonicalSeeds},
         {"net", json::object()},
         {"train", json::object()},
         {"train_overrides", json::object()},
         {"calibration", nullptr},
         {"published", ""},
         {"classification", true},
         {"seasons", {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15}},
         {"locations", json::object()},
         {"checkpoints", json::object()},
         {"thresholds", json::array()},
         {"aggregation", "rmse"},
         {"jobs", 1}};
  } else if (command == "forecast") {
    d = {{"checkpoint", ""}, {"past", ""}, {"future", ""}, {"horizon", 14},
         {"cultivar", ""},   {"een", ""},  {"observations", ""}};
  } else if (command == "attribute") {
    d = {{"checkpoint", ""}, {"dataset", ""}, {"season", 0}, {"day", nullptr}, {"param", ""}, {"steps", 256}};
  } else {
    throw ConfigError("unknown command '" + command + "'");
  }
  d.update(common);
  return d;
}

void merge_checked(json& cfg, const json& in, const std::string& where) {
  if (!in.is_object()) throw ConfigError(where + ": config must be a JSON object");
  for (const auto& [k, v] : in.items()) {
    if (!cfg.contains(k)) throw ConfigError("unknown config key '" + k + "'");
    cfg[k] = v;
  }
}

json parse_value(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::parse_error&) {
    return text;
  }
}

void set_dotted(json& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq);
  const json value = parse_value(assignment.substr(eq + 1));
  const auto dot = key.find('.');
  const std::string head = key.substr(0, dot);
  if (!cfg.contains(head)) throw ConfigError("unknown config key '" + head + "'");
  if (dot == std::string::npos) {
    cfg[head] = value;
  } else {
    if (cfg[head].is_null()) cfg[head] = json::object();
    if (!cfg[head].is_object()) throw ConfigError("config key '" + head + "' is not a section");
    cfg[head][key.substr(dot + 1)] = value;
  }
}

template <class T>
T get(const json& cfg, const std::string& key) {
  try {
    return cfg.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("config key '" + key + "': " + e.what());
  }
}

std::string required_path(const json& cfg, const std::string& key) {
  const auto v = get<std::string>(cfg, key);
  if (v.empty()) throw ConfigError("missing required config key '" + key + "'");
  return v;
}

NetConfig net_from(const json& j) {
  NetConfig c;
  c.pre_dims = {64};
  c.recur_dim = 64;
  c.post_dims = {64};
  if (j.is_null()) return c;
  for (const auto& [k, v] : j.items()) {
    if (k == "pre_dims") {
      c.pre_dims = v.get<std::vector<int>>();
    } else if (k == "recur_dim") {
      c.recur_dim = v.get<int>();
    } else if (k == "post_dims") {
      c.post_dims = v.get<std::vector<int>>();
    } else if (k == "embed_mode") {
      c.embed_mode = embed_mode_from_string(v.get<std::string>());
    } else {
      throw ConfigError("unknown config key 'net." + k + "'");
    }
  }
  return c;
}

TrainConfig train_from(const json& j, const std::string& key) {
  TrainConfig defaults;
  defaults.epochs = 100;
  defaults.learning_rate = 1e-3;
  if (j.is_null()) return defaults;
  try {
    return TrainConfig::from_json(j, defaults);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(key + ": " + e.what());
  }
}

FitOptions fit_from(const json& cfg) {
  FitOptions o;
  o.net = net_from(cfg.at("net"));
  o.train = train_from(cfg.at("train"), "train");
  if (!cfg.at("calibration").is_null()) o.calibration = train_from(cfg.at("calibration"), "calibration");
  const auto published = get<std::string>(cfg, "published");
  if (!published.empty()) o.published = read_published_params(published);
  o.classification = get<bool>(cfg, "classification");
  return o;
}

// ---------------------------------------------------------------------------
// Output

fs::path out_dir(const std::string& command, const json& cfg) {
  const auto out = get<std::string>(cfg, "out");
  return out.empty() ? fs::path("runs") / command / get<std::string>(cfg, "name") : fs::path(out);
}

void archive(const fs::path& dir, const json& cfg) {
  fs::create_directories(dir);
  std::ofstream out(dir / "config.json");
  out << cfg.dump(2) << '\n';
}

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::ofstream open_csv(const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

int cultivar_index(const std::vector<std::string>& names, const std::string& name) {
  if (name.empty()) return 0;
  const auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) throw ConfigError("unknown cultivar '" + name + "'");
  return static_cast<int>(it - names.begin());
}

// ---------------------------------------------------------------------------
// Commands

int cmd_fetch(const json& cfg, const fs::path& dir) {
  if (cfg.at("lat").is_null() || cfg.at("lon").is_null() || cfg.at("first_year").is_null()) {
    throw ConfigError("fetch needs lat, lon and first_year");
  }
  const int first = get<int>(cfg, "first_year");
  const int last = cfg.at("last_year").is_null() ? first : get<int>(cfg, "last_year");
  std::string cache = get<std::string>(cfg, "cache");
  if (cache.empty()) {
    const char* env = std::getenv("DMC_CACHE_DIR");
    cache = env && *env ? env : ".dmc_cache";
  }
  FetchStats stats;
  const auto series = fetch_weather(get<double>(cfg, "lat"), get<double>(cfg, "lon"), first, last, cache,
                                    FetchConfig::from_json(cfg.at("fetch")), &stats);
  fs::create_directories(dir / "weather");
  for (const auto& s : series) write_csv(dir / "weather" / (std::to_string(s.season_year) + ".csv"), s);
  std::cout << "fetched " << series.size() << " years (" << stats.requests << " requests, " << stats.cache_hits
            << " cache hits) into " << (dir / "weather").string() << '\n';
  return 0;
}

int cmd_synth(const json& cfg, const fs::path& dir) {
  const CropModel model = crop_model_from_string(get<std::string>(cfg, "model"));
  const auto seed = get<std::uint64_t>(cfg, "seed");
  const auto weather = synthetic_weather(seed, ClimateProfile::named(get<std::string>(cfg, "profile")), model,
                                         get<int>(cfg, "first_year"), get<int>(cfg, "years"));
  SynthOptions o;
  o.seed = seed;
  o.mask_frac = cfg.at("mask_frac").is_null() ? (model == CropModel::Ferguson ? 0.88 : 0.0) : get<double>(cfg, "mask_frac");
  const auto mode = get<std::string>(cfg, "mask_mode");
  if (mode != "iid" && mode != "weekly") throw ConfigError("mask_mode must be iid or weekly");
  o.mask_mode = mode == "weekly" ? MaskMode::Weekly : MaskMode::Iid;
  if (get<bool>(cfg, "nonstationary")) {
    json m = Modulation{}.to_json();
    for (const auto& [k, v] : cfg.at("modulation").items()) {
      if (!m.contains(k)) throw ConfigError("unknown config key 'modulation." + k + "'");
      m[k] = v;
    }
    o.modulation = fit_modulation(Modulation::from_json(m), weather);
  }
  const int n = get<int>(cfg, "cultivars");
  const double shrink = get<double>(cfg, "shrink");
  const auto table_path = get<std::string>(cfg, "table");
  CultivarTable table;
  if (!table_path.empty()) {
    table = read_published_params(table_path);
  } else if (model == CropModel::Gdd) {
    table = sample_reachable_cultivars(seed, n, shrink, weather, o);
  } else {
    table = sample_cultivars(seed, n, model, shrink);
  }
  const Dataset data = o.modulation ? generate_nonstationary(table, weather, o) : generate(table, weather, o);
  data.save(dir / "dataset");
  write_published_params(dir / "cultivars.json", table);
  std::size_t observed = 0, days = 0;
  for (const auto& s : data.seasons) {
    observed += s.observed_count();
    days += s.days();
  }
  std::cout << "generated " << data.seasons.size() << " seasons for " << table.size() << " cultivars ("
            << num(100.0 * static_cast<double>(observed) / static_cast<double>(std::max<std::size_t>(days, 1)))
            << "% days observed) into " << (dir / "dataset").string() << '\n';
  return 0;
}

int cmd_preprocess(const json& cfg, const fs::path& dir) {
  const auto input = required_path(cfg, "input");
  const auto schema_path = get<std::string>(cfg, "schema");
  const auto schema = schema_path.empty() ? CsvSchema::identity(synthetic_features()) : CsvSchema::load(schema_path);
  const auto w = get<std::string>(cfg, "window");
  SeasonWindow window;
  if (w == "phenology") {
    window = SeasonWindow::Phenology;
  } else if (w == "hardiness") {
    window = SeasonWindow::Hardiness;
  } else if (w == "whole") {
    window = SeasonWindow::Whole;
  } else {
    throw ConfigError("window must be phenology, hardiness or whole");
  }
  const auto seasons = load_csv(input, schema, window);
  fs::create_directories(dir / "weather");
  auto report = open_csv(dir / "discarded.csv");
  report << "location,season_year,reason\n";
  int kept = 0, dropped = 0;
  for (const auto& s : seasons) {
    const auto r = clean_season(s);
    if (!r.series) {
      report << s.location_id << ',' << s.season_year << ",\"" << r.reason << "\"\n";
      ++dropped;
      continue;
    }
    write_csv(dir / "weather" / (s.location_id + "_" + std::to_string(s.season_year) + ".csv"), *r.series);
    ++kept;
  }
  std::cout << "kept " << kept << " seasons, discarded " << dropped << '\n';
  return 0;
}

void print_final_losses(const fs::path& log) {
  if (!fs::exists(log)) return;
  const auto records = read_loss_log(log);
  if (records.empty()) return;
  const auto& r = records.back();
  std::cout << "final train loss " << num(r.train_loss);
  if (r.val_loss) std::cout << ", validation loss " << num(*r.val_loss);
  std::cout << " (epoch " << r.epoch << ")\n";
}

int cmd_train(const json& cfg, const fs::path& dir) {
  const auto kind = get<std::string>(cfg, "kind");
  const Dataset data = Dataset::load(required_path(cfg, "dataset"));
  const SplitPlan plan = make_splits(data, get<std::uint64_t>(cfg, "split_seed"));
  FitOptions o = fit_from(cfg);
  o.train.seed = get<std::uint64_t>(cfg, "seed");
  o.out.dir = dir;
  o.out.name = "model";
  const auto resume_text = get<std::string>(cfg, "resume");
  const std::optional<fs::path> resume = resume_text.empty() ? std::nullopt : std::optional<fs::path>(resume_text);

  if (kind == "een") {
    const auto base_path = get<std::string>(cfg, "base_checkpoint");
    if (base_path.empty()) throw ConfigError("--kind een requires --base-checkpoint");
    const auto base_pred = load_predictor(base_path);
    const DmcModel* base = as_dmc(*base_pred);
    if (!base) throw ConfigError("base checkpoint is not a single DMC model");
    EenWeights een = make_een(*base, o.train.seed);
    train_een(*base, een, data, plan.train, plan.val, o.train, o.out, resume);
    save_een(dir / "een.ckpt", een, base->to_json());
    print_final_losses(dir / "model.loss.csv");
    std::cout << "checkpoint " << (dir / "een.ckpt").string() << '\n';
    return 0;
  }
  if (!is_model_name(kind)) throw ConfigError("unknown model kind '" + kind + "'");
  std::unique_ptr<Predictor> p;
  if (resume) {
    if (kind != "dmc-mtl") throw ConfigError("--resume is supported for dmc-mtl and een");
    DmcModel m = make_dmc(o.net, data.model, fit_norm_stats(data.subset(plan.train).weather()), data.cultivars,
                          o.train.seed);
    train_dmc(m, data, plan.train, plan.val, o.train, o.out, resume);
    p = make_predictor(std::move(m));
  } else {
    p = fit_model(kind, data, plan.train, plan.val, o);
  }
  save_predictor(dir / "checkpoint.ckpt", *p);
  print_final_losses(dir / "model.loss.csv");
  std::cout << "checkpoint " << (dir / "checkpoint.ckpt").string() << '\n';
  return 0;
}

// ---- eval

ExperimentOptions experiment_from(const json& cfg) {
  ExperimentOptions o;
  o.models = get<std::vector<std::string>>(cfg, "models");
  if (o.models.empty()) throw ConfigError("models must not be empty");
  for (const auto& m : o.models) {
    if (!is_model_name(m)) throw ConfigError("unknown model kind '" + m + "'");
  }
  o.seeds = get<std::vector<std::uint64_t>>(cfg, "seeds");
  if (o.seeds.empty()) throw ConfigError("seeds must not be empty");
  o.fit = fit_from(cfg);
  for (const auto& [k, v] : cfg.at("train_overrides").items()) {
    if (!is_model_name(k)) throw ConfigError("train_overrides: unknown model kind '" + k + "'");
    json merged = o.fit.train.to_json();
    merged.update(v);
    o.train[k] = train_from(merged, "train_overrides." + k);
  }
  const auto agg = get<std::string>(cfg, "aggregation");
  if (agg != "rmse" && agg != "sum") throw ConfigError("aggregation must be rmse or sum");
  o.aggregation = agg == "sum" ? OnsetAggregation::Sum : OnsetAggregation::Rmse;
  o.jobs = get<int>(cfg, "jobs");
  return o;
}

std::string task_name(CropModel m) { return m == CropModel::Gdd ? "phenology" : "hardiness"; }

void write_headline(const fs::path& dir, const HeadlineReport& r, CropModel task) {
  write_cells_csv(dir / "cells.csv", r.cells);
  write_summary_csv(dir / "summary.csv", r.summary);
  auto out = open_csv(dir / "headline.csv");
  out << "model,task,mean,sd,cells\n";
  for (const auto& s : r.summary) {
    out << s.model << ',' << task_name(task) << ',' << num(s.mean) << ',' << num(s.sd) << ',' << s.cells << '\n';
  }
  write_json(dir / "report.json", to_json(r));
}

int eval_coverage(const Dataset& data, const ExperimentOptions& o, const json& cfg, const fs::path& dir) {
  const auto r = headline(data, o);
  write_headline(dir, r, data.model);
  auto thresholds = get<std::vector<double>>(cfg, "thresholds");
  if (thresholds.empty()) {
    const double top = data.model == CropModel::Gdd ? 30.0 : 2.5;
    for (int i = 0; i <= 60; ++i) thresholds.push_back(top * i / 60.0);
  }
  auto out = open_csv(dir / "coverage.csv");
  out << "model,threshold,fraction\n";
  std::vector<PlotSeries> plot;
  for (const auto& model : o.models) {
    std::map<std::string, std::vector<double>> per;
    for (const auto& c : r.cells) {
      if (c.model == model) per[c.cultivar].push_back(c.rmse);
    }
    std::vector<double> rmse;
    for (const auto& [name, v] : per) rmse.push_back(std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()));
    const auto frac = coverage_curve(rmse, thresholds);
    for (std::size_t i = 0; i < thresholds.size(); ++i) out << model << ',' << num(thresholds[i]) << ',' << num(frac[i]) << '\n';
    plot.push_back({model, thresholds, frac});
  }
  PlotOptions po;
  po.title = "Coverage (" + task_name(data.model) + ")";
  po.xlabel = data.model == CropModel::Gdd ? "RMSE threshold (days)" : "RMSE threshold (C)";
  po.ylabel = "fraction of cultivars";
  po.step = true;
  write_svg_plot(dir / "coverage.svg", plot, po);
  return 0;
}

int eval_sweep(const Dataset& data, const ExperimentOptions& o, const json& cfg, const fs::path& dir) {
  const auto seasons = get<std::vector<int>>(cfg, "seasons");
  const auto r = sweep_data_limit(data, seasons, o);
  auto out = open_csv(dir / "sweep.csv");
  out << "model,seasons,seasons_used,seed,cultivar,rmse\n";
  for (const auto& row : r.rows) {
    out << row.cell.model << ',' << row.seasons << ',' << row.used << ',' << row.cell.seed << ',' << row.cell.cultivar
        << ',' << num(row.cell.rmse) << '\n';
  }
  write_json(dir / "report.json", to_json(r));
  std::vector<PlotSeries> plot;
  for (const auto& model : o.models) {
    PlotSeries s{model, {}, {}};
    for (int n : seasons) {
      double acc = 0.0;
      int k = 0;
      for (const auto& row : r.rows) {
        if (row.cell.model == model && row.seasons == n) {
          acc += row.cell.rmse;
          ++k;
        }
      }
      s.x.push_back(n);
      s.y.push_back(k ? acc / k : std::nan(""));
    }
    plot.push_back(s);
  }
  PlotOptions po;
  po.title = "Error vs training seasons (" + task_name(data.model) + ")";
  po.xlabel = "training seasons per cultivar";
  po.ylabel = "mean test RMSE";
  write_svg_plot(dir / "sweep.svg", plot, po);
  for (const auto& n : r.notes) std::cout << "note: " << n << '\n';
  return 0;
}

int eval_robustness(const Dataset& data, const ExperimentOptions& o, const json& cfg, const fs::path& dir,
                    const std::string& dataset_path) {
  std::vector<std::pair<std::string, Dataset>> others;
  for (const auto& [name, path] : cfg.at("locations").items()) others.emplace_back(name, Dataset::load(path.get<std::string>()));
  for (const auto& [name, d] : others) {
    if (d.model != data.model || d.cultivars != data.cultivars) {
      throw ConfigError("location '" + name + "' does not share the task and cultivar table");
    }
  }
  const std::string home = fs::path(dataset_path).filename().string();
  std::vector<std::string> models;
  std::vector<std::string> locations{home};
  for (const auto& [name, d] : others) locations.push_back(name);
  Eigen::MatrixXd total;

  const auto checkpoints = cfg.at("checkpoints");
  std::vector<std::vector<std::unique_ptr<Predictor>>> runs;  // per seed
  std::vector<SplitPlan> plans;
  if (!checkpoints.empty()) {
    runs.emplace_back();
    plans.push_back(make_splits(data, o.seeds.front()));
    for (const auto& [name, path] : checkpoints.items()) {
      models.push_back(name);
      runs.back().push_back(load_predictor(path.get<std::string>()));
    }
  } else {
    models = o.models;
    for (auto seed : o.seeds) {
      plans.push_back(make_splits(data, seed));
      runs.emplace_back();
      for (const auto& m : o.models) {
        FitOptions f = o.fit;
        if (auto it = o.train.find(m); it != o.train.end()) f.train = it->second;
        f.train.seed = seed;
        runs.back().push_back(fit_model(m, data, plans.back().train, plans.back().val, f));
      }
    }
  }
  for (std::size_t s = 0; s < runs.size(); ++s) {
    std::vector<std::pair<std::string, const Predictor*>> ps;
    for (std::size_t m = 0; m < models.size(); ++m) ps.emplace_back(models[m], runs[s][m].get());
    std::vector<LocationData> locs{{home, &data, plans[s].test}};
    for (const auto& [name, d] : others) locs.push_back({name, &d, {}});
    const auto r = robustness_eval(ps, locs);
    total = s == 0 ? r.rmse : Eigen::MatrixXd(total + r.rmse);
  }
  total /= static_cast<double>(runs.size());
  RobustnessReport report{models, locations, total};
  auto out = open_csv(dir / "robustness.csv");
  out << "model";
  for (const auto& l : locations) out << ',' << l;
  out << ",degradation\n";
  json j = to_json(report);
  j["degradation"] = json::array();
  for (Eigen::Index m = 0; m < total.rows(); ++m) {
    out << models[static_cast<std::size_t>(m)];
    for (Eigen::Index l = 0; l < total.cols(); ++l) out << ',' << num(total(m, l));
    const double away = total.cols() > 1 ? total.row(m).tail(total.cols() - 1).mean() : total(m, 0);
    const double ratio = away / total(m, 0);
    out << ',' << num(ratio) << '\n';
    j["degradation"].push_back(std::isfinite(ratio) ? json(ratio) : json(num(ratio)));
  }
  write_json(dir / "report.json", j);
  return 0;
}

int eval_perstage(const Dataset& data, ExperimentOptions o, const json& cfg, const fs::path& dir) {
  if (data.model != CropModel::Gdd) throw ConfigError("perstage needs a phenology dataset");
  if (cfg.at("models") == defaults_for("eval").at("models")) o.models = {"dmc-mtl", "dmc-mtl-ss0", "dmc-mtl-ss1", "dmc-mtl-ss2"};
  auto out = open_csv(dir / "perstage.csv");
  out << "model,seed,cultivar,stage,rmse\n";
  std::map<std::string, std::array<std::vector<double>, kScoredTransitions>> pooled;
  json j = json::array();
  for (auto seed : o.seeds) {
    const auto plan = make_splits(data, seed);
    for (const auto& m : o.models) {
      FitOptions f = o.fit;
      if (auto it = o.train.find(m); it != o.train.end()) f.train = it->second;
      f.train.seed = seed;
      const auto p = fit_model(m, data, plan.train, plan.val, f);
      for (const auto& r : per_stage_error(m, *p, data, plan.test)) {
        for (int k = 0; k < kScoredTransitions; ++k) {
          out << m << ',' << seed << ',' << r.cultivar << ',' << kStages[k] << ',' << num(r.rmse[k]) << '\n';
          pooled[m][k].push_back(r.rmse[k]);
        }
        j.push_back({{"model", m}, {"seed", seed}, {"cultivar", r.cultivar}, {"stage_rmse", r.rmse},
                     {"cumulative", r.cumulative}});
      }
    }
  }
  write_json(dir / "report.json", j);
  std::vector<std::string> groups;
  for (int k = 0; k < kScoredTransitions; ++k) groups.emplace_back(kStages[k]);
  std::vector<PlotSeries> bars;
  for (const auto& m : o.models) {
    PlotSeries s{m, {}, {}};
    for (int k = 0; k < kScoredTransitions; ++k) {
      const auto& v = pooled[m][k];
      s.y.push_back(v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()));
    }
    bars.push_back(s);
  }
  PlotOptions po;
  po.title = "Per-stage onset error";
  po.ylabel = "RMSE (days)";
  write_svg_bars(dir / "perstage.svg", groups, bars, po);
  return 0;
}

int cmd_eval(const json& cfg, const fs::path& dir) {
  const auto dataset_path = required_path(cfg, "dataset");
  const Dataset data = Dataset::load(dataset_path);
  const auto experiment = get<std::string>(cfg, "experiment");
  const ExperimentOptions o = experiment_from(cfg);
  if (experiment == "headline") {
    const auto r = headline(data, o);
    write_headline(dir, r, data.model);
    for (const auto& s : r.summary) std::cout << s.model << ' ' << num(s.mean) << " +- " << num(s.sd) << '\n';
    return 0;
  }
  if (experiment == "coverage") return eval_coverage(data, o, cfg, dir);
  if (experiment == "sweep") return eval_sweep(data, o, cfg, dir);
  if (experiment == "robustness") return eval_robustness(data, o, cfg, dir, dataset_path);
  if (experiment == "perstage") return eval_perstage(data, o, cfg, dir);
  throw ConfigError("experiment must be headline, sweep, robustness, coverage or perstage");
}

// ---- forecast

WeatherSeries load_single(const std::string& path, const NormStats& stats) {
  const auto all = load_csv(path, CsvSchema::identity(stats.features), SeasonWindow::Whole);
  if (all.size() != 1) throw ConfigError(path + ": expected one location");
  return all.front();
}

int cmd_forecast(const json& cfg, const fs::path& dir) {
  const auto pred = load_predictor(required_path(cfg, "checkpoint"));
  const DmcModel* base = as_dmc(*pred);
  if (!base) throw ConfigError("forecast needs a single DMC model checkpoint");
  const auto past = load_single(required_path(cfg, "past"), base->stats);
  const auto future = load_single(required_path(cfg, "future"), base->stats);
  const int horizon = get<int>(cfg, "horizon");
  if (horizon < 0 || static_cast<std::size_t>(horizon) > future.days()) {
    throw ConfigError("horizon exceeds the supplied future weather");
  }
  const auto cultivar_name = get<std::string>(cfg, "cultivar");
  const int cultivar = cultivar_index(base->cultivars, cultivar_name);
  const auto een_path = get<std::string>(cfg, "een");
  const auto obs_path = get<std::string>(cfg, "observations");
  if (een_path.empty() != obs_path.empty()) throw ConfigError("een and observations must be given together");

  const WeatherSeries ahead = future.slice(0, static_cast<std::size_t>(horizon));
  DmcRollout r;
  if (!een_path.empty()) {
    const EenWeights een = load_een(een_path);
    const auto obs = align_observations(read_observations(obs_path),
                                        base->cultivars.at(static_cast<std::size_t>(cultivar)), past);
    const auto full = adapt_rollout(*base, een, concat(past, ahead), cultivar, obs);
    const auto p = static_cast<std::ptrdiff_t>(past.days());
    r.states = CropStateSeries::predicted(base->biophys, {full.states.values.begin() + p, full.states.values.end()});
    r.omega = full.omega.bottomRows(horizon);
  } else {
    DmcSession warm(*base, cultivar);
    warm.advance(past);
    DmcSession next(*base, cultivar, warm.state());
    next.advance(ahead);
    r = next.result();
  }
  write_predictions(dir / "forecast.csv", ahead, r, base->spec);
  std::cout << "forecast " << horizon << " days into " << (dir / "forecast.csv").string() << '\n';
  return 0;
}

// ---- attribute

int cmd_attribute(const json& cfg, const fs::path& dir) {
  const auto pred = load_predictor(required_path(cfg, "checkpoint"));
  const DmcModel* model = as_dmc(*pred);
  if (!model) throw ConfigError("attribute needs a single DMC model checkpoint");
  const Dataset data = Dataset::load(required_path(cfg, "dataset"));
  const auto season = get<std::size_t>(cfg, "season");
  if (season >= data.seasons.size()) throw ConfigError("season index out of range");
  const Season& s = data.seasons[season];
  const int day = cfg.at("day").is_null() ? static_cast<int>(s.days()) - 1 : get<int>(cfg, "day");
  auto pname = get<std::string>(cfg, "param");
  if (pname.empty()) pname = model->spec[0].name;
  const auto param = static_cast<int>(model->spec.index_of(pname));
  const auto a = integrated_gradients(*model, s.weather, s.cultivar, day, param, get<int>(cfg, "steps"));

  auto out = open_csv(dir / "attribution.csv");
  out << "date";
  for (const auto& f : a.features) out << ',' << f;
  out << '\n';
  for (Eigen::Index t = 0; t < a.ig.rows(); ++t) {
    out << format_date(s.weather.dates[static_cast<std::size_t>(t)]);
    for (Eigen::Index j = 0; j < a.ig.cols(); ++j) out << ',' << num(a.ig(t, j));
    out << '\n';
  }
  const Eigen::RowVectorXd totals = a.ig.colwise().sum();
  json j = {{"param", pname},     {"day", day},           {"season", season},      {"steps", get<int>(cfg, "steps")},
            {"f_x", a.f_x},       {"f_baseline", a.f_baseline}, {"completeness", a.completeness},
            {"totals", json::object()}};
  for (std::size_t f = 0; f < a.features.size(); ++f) j["totals"][a.features[f]] = totals[static_cast<Eigen::Index>(f)];
  write_json(dir / "attribution.json", j);
  PlotOptions po;
  po.title = "Attribution of " + pname + " on day " + std::to_string(day);
  po.ylabel = "|IG| summed over days";
  std::vector<double> mag;
  for (Eigen::Index f = 0; f < a.ig.cols(); ++f) mag.push_back(a.ig.col(f).cwiseAbs().sum());
  write_svg_bars(dir / "attribution.svg", a.features, {{pname, {}, mag}}, po);
  std::cout << "completeness residual " << num(a.completeness) << '\n';
  return 0;
}

int dispatch(const std::string& command, const json& cfg, const fs::path& dir) {
  if (command == "fetch") return cmd_fetch(cfg, dir);
  if (command == "synth") return cmd_synth(cfg, dir);
  if (command == "preprocess") return cmd_preprocess(cfg, dir);
  if (command == "train") return cmd_train(cfg, dir);
  if (command == "eval") return cmd_eval(cfg, dir);
  if (command == "forecast") return cmd_forecast(cfg, dir);
  return cmd_attribute(cfg, dir);
}

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"Dynamic model calibration for crop phenology and cold hardiness"};
  app.require_subcommand(1);
  struct Flags {
    std::string config;
    std::vector<std::string> sets;
    std::map<std::string, std::string> named;
  };
  std::map<std::string, Flags> flags;
  const std::vector<std::pair<std::string, std::vector<std::string>>> commands{
      {"fetch", {"lat", "lon", "first_year", "last_year", "cache"}},
      {"synth", {"model", "seed", "cultivars", "years"}},
      {"preprocess", {"input", "schema", "window"}},
      {"train", {"kind", "dataset", "seed", "base_checkpoint", "resume", "published"}},
      {"eval", {"experiment", "dataset", "jobs", "published"}},
      {"forecast", {"checkpoint", "past", "future", "horizon", "cultivar", "een", "observations"}},
      {"attribute", {"checkpoint", "dataset", "season", "day", "param", "steps"}},
  };
  for (const auto& [name, keys] : commands) {
    auto* sub = app.add_subcommand(name);
    auto& f = flags[name];
    sub->add_option("--config", f.config, "JSON config file");
    sub->add_option("--set", f.sets, "override: key=value (JSON value), dotted for sections");
    sub->add_option("--out", f.named["out"], "output directory");
    sub->add_option("--name", f.named["name"], "run name under runs/<command>/");
    for (const auto& k : keys) {
      std::string flag = "--" + k;
      std::replace(flag.begin(), flag.end(), '_', '-');
      sub->add_option(flag, f.named[k]);
    }
  }

  std::vector<char*> argv;
  std::vector<std::string> storage{"dmc"};
  storage.insert(storage.end(), args.begin(), args.end());
  for (auto& s : storage) argv.push_back(s.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: usage: " << e.what() << '\n';
    return 2;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  const auto* sub = app.get_subcommands().front();
  try {
    json cfg = defaults_for(command);
    const auto& f = flags[command];
    if (!f.config.empty()) {
      std::ifstream in(f.config);
      if (!in) throw ConfigError("cannot read config " + f.config);
      json file;
      try {
        file = json::parse(in);
      } catch (const json::parse_error& e) {
        throw ConfigError(f.config + ": " + e.what());
      }
      merge_checked(cfg, file, f.config);
    }
    for (const auto& [key, value] : f.named) {
      std::string flag = "--" + key;
      std::replace(flag.begin(), flag.end(), '_', '-');
      if (sub->count(flag) == 0) continue;
      const json& current = cfg.at(key);
      cfg[key] = current.is_string() ? json(value) : parse_value(value);
    }
    for (const auto& s : f.sets) set_dotted(cfg, s);
    const fs::path dir = out_dir(command, cfg);
    archive(dir, cfg);
    return dispatch(command, cfg, dir);
  } catch (const ConfigError& e) {
    std::cerr << "error: config: " << e.what() << '\n';
    return 2;
  } catch (const DataError& e) {
    std::cerr << "error: data: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: runtime: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace dmc::cli
