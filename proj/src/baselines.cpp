#include "dmc/baselines.hpp"

#include <fstream>
#include <iostream>

namespace dmc {

namespace fs = std::filesystem;
using ad::Var;

namespace {

const std::pair<BaselineKind, const char*> kKindNames[] = {
    {BaselineKind::DeployedBio, "deployed-bio"}, {BaselineKind::GdStatic, "gd"},
    {BaselineKind::DeepMtl, "deep-mtl"},         {BaselineKind::Pinn, "pinn"},
    {BaselineKind::Residual, "residual"},        {BaselineKind::TempHybrid, "temphybrid"},
    {BaselineKind::DmcStl, "dmc-stl"},           {BaselineKind::DmcAgg, "dmc-agg"},
    {BaselineKind::DmcMult, "dmc-mult"},         {BaselineKind::DmcAdd, "dmc-add"},
    {BaselineKind::DmcMultiH, "dmc-multih"},
};

Eigen::MatrixXd capped_target(CropModel task, const Eigen::MatrixXd& target) {
  return task == CropModel::Gdd ? Eigen::MatrixXd(target.cwiseMin(static_cast<double>(kScoredTransitions))) : target;
}

NetConfig network_for(const NetConfig& base, const NormStats& stats, int out_dim, int n_cultivars) {
  NetConfig c = base;
  c.input_dim = static_cast<int>(stats.features.size()) + 2;
  c.out_dim = out_dim;
  c.n_cultivars = std::max(1, n_cultivars);
  c.embed_dim = (c.embed_mode == EmbedMode::MultiHead || c.embed_mode == EmbedMode::None) ? 0 : c.input_dim;
  c.output = OutputActivation::Identity;
  c.bias = true;
  return c;
}

NetWeights zero_weights(const nlohmann::json& config) {
  NetWeights w = init_weights(NetConfig::from_json(config), 0);
  w.set_zero();
  return w;
}

nlohmann::json vectors_to_json(const std::vector<Eigen::VectorXd>& v) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& x : v) out.push_back(std::vector<double>(x.data(), x.data() + x.size()));
  return out;
}

std::vector<Eigen::VectorXd> vectors_from_json(const nlohmann::json& j) {
  std::vector<Eigen::VectorXd> out;
  for (const auto& e : j) {
    const auto v = e.get<std::vector<double>>();
    out.push_back(Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size())));
  }
  return out;
}

}  // namespace

std::string to_string(BaselineKind k) {
  for (const auto& [kind, name] : kKindNames) {
    if (kind == k) return name;
  }
  throw std::invalid_argument("unknown baseline kind");
}

BaselineKind baseline_kind_from_string(const std::string& s) {
  for (const auto& [kind, name] : kKindNames) {
    if (s == name) return kind;
  }
  throw std::invalid_argument("unknown baseline kind '" + s + "'");
}

const std::vector<BaselineKind>& all_baseline_kinds() {
  static const std::vector<BaselineKind> all = [] {
    std::vector<BaselineKind> v;
    for (const auto& [kind, name] : kKindNames) v.push_back(kind);
    return v;
  }();
  return all;
}

// ---------------------------------------------------------------------------
// Static models

CultivarTable read_published_params(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  const auto j = nlohmann::json::parse(in);
  CultivarTable t;
  t.model = crop_model_from_string(j.at("model").get<std::string>());
  t.spec = spec_for(t.model);
  t.provenance = {{"file", path.string()}};
  for (const auto& [name, values] : j.at("cultivars").items()) {
    Eigen::VectorXd v(static_cast<Eigen::Index>(t.spec.size()));
    std::vector<bool> seen(t.spec.size(), false);
    for (const auto& [pname, value] : values.items()) {
      const auto i = t.spec.index_of(pname);
      v[static_cast<Eigen::Index>(i)] = value.get<double>();
      seen[i] = true;
    }
    for (std::size_t i = 0; i < seen.size(); ++i) {
      if (seen[i]) continue;
      if (!t.spec[i].frozen()) throw std::invalid_argument(name + ": missing parameter " + t.spec[i].name);
      v[static_cast<Eigen::Index>(i)] = t.spec[i].min;
    }
    if (!t.spec.contains(v)) throw std::invalid_argument(name + ": parameter outside its range");
    t.names.push_back(name);
    t.params.push_back(v);
  }
  return t;
}

void write_published_params(const fs::path& path, const CultivarTable& table) {
  nlohmann::json cultivars = nlohmann::json::object();
  for (std::size_t c = 0; c < table.size(); ++c) {
    nlohmann::json p = nlohmann::json::object();
    for (std::size_t i = 0; i < table.spec.size(); ++i) p[table.spec[i].name] = table.params[c][static_cast<Eigen::Index>(i)];
    cultivars[table.names[c]] = p;
  }
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << nlohmann::json{{"model", to_string(table.model)}, {"cultivars", cultivars}}.dump(2) << '\n';
}

CropStateSeries deployed_bio(const CultivarTable& table, const std::string& cultivar, const WeatherSeries& series) {
  const auto it = std::find(table.names.begin(), table.names.end(), cultivar);
  if (it == table.names.end()) throw std::invalid_argument("no published parameters for cultivar '" + cultivar + "'");
  return oracle_rollout(table.model, series.tmean(), table.params[static_cast<std::size_t>(it - table.names.begin())]);
}

CropStateSeries stage_series(std::span<const double> stage) {
  std::vector<double> v(stage.size());
  for (std::size_t t = 0; t < stage.size(); ++t) v[t] = std::clamp(std::round(stage[t]), 0.0, 4.0);
  return CropStateSeries::predicted(CropModel::Gdd, std::move(v));
}

// ---------------------------------------------------------------------------
// Deep-MTL

nlohmann::json DeepMtlModel::to_json() const {
  return {{"kind", "deep"},          {"net", net.config.to_json()}, {"task", to_string(task)},
          {"classification", classification}, {"stats", stats.to_json()}, {"cultivars", cultivars}};
}

DeepMtlModel DeepMtlModel::from_json(const nlohmann::json& j) {
  DeepMtlModel m;
  m.net = zero_weights(j.at("net"));
  m.task = crop_model_from_string(j.at("task").get<std::string>());
  m.classification = j.at("classification").get<bool>();
  m.stats = NormStats::from_json(j.at("stats"));
  m.cultivars = j.value("cultivars", std::vector<std::string>{});
  return m;
}

DeepMtlModel make_deep_mtl(const NetConfig& config, CropModel task, bool classification, const NormStats& stats,
                           std::vector<std::string> cultivars, std::uint64_t seed) {
  if (classification && task != CropModel::Gdd) throw std::invalid_argument("classification head is for phenology");
  DeepMtlModel m;
  m.task = task;
  m.classification = classification;
  m.stats = stats;
  m.net = init_weights(network_for(config, stats, classification ? kScoredTransitions + 1 : 1,
                                   static_cast<int>(cultivars.size())),
                       seed);
  m.cultivars = std::move(cultivars);
  return m;
}

Eigen::MatrixXd deep_mtl_forward(const DeepMtlModel& m, const WeatherSeries& series, int cultivar) {
  return forward(m.net, normalize_one(series, m.stats).values, cultivar);
}

CropStateSeries deep_mtl_rollout(const DeepMtlModel& m, const WeatherSeries& series, int cultivar) {
  const Eigen::MatrixXd y = deep_mtl_forward(m, series, cultivar);
  std::vector<double> v(static_cast<std::size_t>(y.rows()));
  if (!m.classification) {
    for (Eigen::Index t = 0; t < y.rows(); ++t) v[static_cast<std::size_t>(t)] = y(t, 0);
    return m.task == CropModel::Gdd ? stage_series(v) : CropStateSeries::predicted(CropModel::Ferguson, v);
  }
  CropStateSeries s;
  s.model = CropModel::Gdd;
  for (Eigen::Index t = 0; t < y.rows(); ++t) {
    Eigen::Index k = 0;
    y.row(t).maxCoeff(&k);
    v[static_cast<std::size_t>(t)] = static_cast<double>(k);
    if (k >= 1 && k <= kNumTransitions && !s.onsets[static_cast<std::size_t>(k - 1)]) {
      s.onsets[static_cast<std::size_t>(k - 1)] = static_cast<int>(t);
    }
  }
  s.observed.assign(v.size(), true);
  s.values = std::move(v);
  return s;
}

DeepObjective::DeepObjective(const DeepMtlModel& model, const Dataset& data, std::vector<std::size_t> train,
                             std::vector<std::size_t> validation, std::optional<std::vector<Eigen::VectorXd>> physics,
                             double pinn_weight)
    : model_(model),
      data_(data),
      train_(std::move(train)),
      validation_(std::move(validation)),
      physics_(std::move(physics)),
      pinn_weight_(pinn_weight) {
  if (data.model != model.task) throw std::invalid_argument("DeepObjective: dataset and model kinds differ");
  if (physics_) {
    if (model.classification) throw std::invalid_argument("DeepObjective: the physics loss needs a regression head");
    for (const auto& s : data.seasons) {
      const auto r = oracle_rollout(data.model, s.weather.tmean(), physics_->at(static_cast<std::size_t>(s.cultivar)));
      Eigen::VectorXd v = Eigen::Map<const Eigen::VectorXd>(r.values.data(), static_cast<Eigen::Index>(r.values.size()));
      if (data.model == CropModel::Gdd) v = v.cwiseMin(static_cast<double>(kScoredTransitions));
      physics_cache_.push_back(v);
    }
  }
}

Var DeepObjective::batch_loss(ad::Tape& tape, const NetBinding& net, const std::vector<std::size_t>& idx) const {
  const Batch batch = make_batch(data_, idx, model_.stats);
  NetRunner runner(net, batch.cultivars);
  std::vector<Var> out;
  for (int t = 0; t < batch.days; ++t) out.push_back(runner.step(tape.constant(batch.inputs[static_cast<std::size_t>(t)])));
  const auto B = static_cast<Eigen::Index>(batch.size());
  if (model_.classification) {
    std::vector<int> cls;
    std::vector<bool> mask;
    for (int t = 0; t < batch.days; ++t) {
      for (Eigen::Index i = 0; i < B; ++i) {
        cls.push_back(static_cast<int>(std::min(batch.target(i, t), static_cast<double>(kScoredTransitions))));
        mask.push_back(batch.observed(i, t));
      }
    }
    return cross_entropy(ad::concat_rows(out), cls, mask);
  }
  const Var pred = ad::concat_cols(out);
  const Eigen::MatrixXd target = capped_target(model_.task, batch.target);
  if (!physics_) return masked_mse(pred, target, batch.observed);
  Eigen::MatrixXd bio(B, batch.days);
  for (Eigen::Index i = 0; i < B; ++i) {
    const auto& v = physics_cache_[idx[static_cast<std::size_t>(i)]];
    for (Eigen::Index t = 0; t < batch.days; ++t) bio(i, t) = v[std::min(t, v.size() - 1)];
  }
  return pinn_loss(pred, target, bio, batch.observed, pinn_weight_);
}

Var DeepObjective::loss(ad::Tape& tape, const std::map<std::string, Var>& params, std::span<const std::size_t> items,
                        Rng&) {
  std::vector<std::size_t> idx;
  for (auto i : items) idx.push_back(train_[i]);
  return batch_loss(tape, bind_vars(model_.net, params), idx);
}

std::optional<double> DeepObjective::validation_loss(const ParamSet& params) {
  if (validation_.empty()) return std::nullopt;
  NetWeights w = model_.net;
  assign_params(w, params);
  ad::Tape tape;
  tape.set_recording(false);
  return batch_loss(tape, bind(tape, w, false), validation_).scalar();
}

// ---------------------------------------------------------------------------
// Residual

nlohmann::json ResidualModel::to_json() const {
  return {{"kind", "residual"},
          {"net", net.config.to_json()},
          {"task", to_string(task)},
          {"statics", vectors_to_json(statics)},
          {"stats", stats.to_json()},
          {"cultivars", cultivars},
          {"gdd", {{"pool_emergence", gdd.pool_emergence}, {"carry_overshoot", gdd.carry_overshoot}}}};
}

ResidualModel ResidualModel::from_json(const nlohmann::json& j) {
  ResidualModel m;
  m.net = zero_weights(j.at("net"));
  m.task = crop_model_from_string(j.at("task").get<std::string>());
  m.statics = vectors_from_json(j.at("statics"));
  m.stats = NormStats::from_json(j.at("stats"));
  m.cultivars = j.value("cultivars", std::vector<std::string>{});
  if (j.contains("gdd")) {
    m.gdd.pool_emergence = j["gdd"].value("pool_emergence", true);
    m.gdd.carry_overshoot = j["gdd"].value("carry_overshoot", true);
  }
  return m;
}

ResidualModel make_residual(const NetConfig& config, CropModel task, std::vector<Eigen::VectorXd> statics,
                            const NormStats& stats, std::vector<std::string> cultivars, std::uint64_t seed) {
  ResidualModel m;
  m.task = task;
  m.statics = std::move(statics);
  m.stats = stats;
  m.net = init_weights(network_for(config, stats, 1, static_cast<int>(cultivars.size())), seed);
  m.cultivars = std::move(cultivars);
  return m;
}

CropStateSeries residual_rollout(const ResidualModel& m, const WeatherSeries& series, int cultivar) {
  const auto bio = oracle_rollout(m.task, series.tmean(), m.statics.at(static_cast<std::size_t>(cultivar)), m.gdd);
  const Eigen::MatrixXd r = forward(m.net, normalize_one(series, m.stats).values, cultivar);
  std::vector<double> v(bio.values.size());
  for (std::size_t t = 0; t < v.size(); ++t) v[t] = bio.values[t] + r(static_cast<Eigen::Index>(t), 0);
  return m.task == CropModel::Gdd ? stage_series(v) : CropStateSeries::predicted(CropModel::Ferguson, v);
}

ResidualObjective::ResidualObjective(const ResidualModel& model, const Dataset& data, std::vector<std::size_t> train,
                                     std::vector<std::size_t> validation)
    : model_(model), data_(data), train_(std::move(train)), validation_(std::move(validation)) {
  if (data.model != model.task) throw std::invalid_argument("ResidualObjective: dataset and model kinds differ");
  for (const auto& s : data.seasons) {
    bio_.push_back(
        oracle_rollout(model.task, s.weather.tmean(), model.statics.at(static_cast<std::size_t>(s.cultivar)), model.gdd)
            .values);
  }
}

Var ResidualObjective::batch_loss(ad::Tape& tape, const NetBinding& net, const std::vector<std::size_t>& idx) const {
  const Batch batch = make_batch(data_, idx, model_.stats);
  NetRunner runner(net, batch.cultivars);
  std::vector<Var> out;
  for (int t = 0; t < batch.days; ++t) out.push_back(runner.step(tape.constant(batch.inputs[static_cast<std::size_t>(t)])));
  const auto B = static_cast<Eigen::Index>(batch.size());
  Eigen::MatrixXd bio(B, batch.days);
  for (Eigen::Index i = 0; i < B; ++i) {
    const auto& v = bio_[idx[static_cast<std::size_t>(i)]];
    for (Eigen::Index t = 0; t < batch.days; ++t) bio(i, t) = v[std::min<std::size_t>(static_cast<std::size_t>(t), v.size() - 1)];
  }
  return masked_mse(ad::concat_cols(out) + tape.constant(bio), capped_target(model_.task, batch.target), batch.observed);
}

Var ResidualObjective::loss(ad::Tape& tape, const std::map<std::string, Var>& params,
                            std::span<const std::size_t> items, Rng&) {
  std::vector<std::size_t> idx;
  for (auto i : items) idx.push_back(train_[i]);
  return batch_loss(tape, bind_vars(model_.net, params), idx);
}

std::optional<double> ResidualObjective::validation_loss(const ParamSet& params) {
  if (validation_.empty()) return std::nullopt;
  NetWeights w = model_.net;
  assign_params(w, params);
  ad::Tape tape;
  tape.set_recording(false);
  return batch_loss(tape, bind(tape, w, false), validation_).scalar();
}

// ---------------------------------------------------------------------------
// TempHybrid

nlohmann::json TempHybridModel::to_json() const {
  return {{"kind", "temphybrid"},
          {"task", to_string(task)},
          {"spec", spec.to_json()},
          {"hidden", hidden()},
          {"input_scale", input_scale},
          {"cultivars", cultivars},
          {"gdd", {{"pool_emergence", gdd.pool_emergence}, {"carry_overshoot", gdd.carry_overshoot}}}};
}

TempHybridModel TempHybridModel::from_json(const nlohmann::json& j) {
  TempHybridModel m;
  m.task = crop_model_from_string(j.at("task").get<std::string>());
  m.spec = ParamSpec::from_json(j.at("spec"));
  m.input_scale = j.value("input_scale", 1.0 / 30.0);
  m.cultivars = j.value("cultivars", std::vector<std::string>{});
  if (j.contains("gdd")) {
    m.gdd.pool_emergence = j["gdd"].value("pool_emergence", true);
    m.gdd.carry_overshoot = j["gdd"].value("carry_overshoot", true);
  }
  const int h = j.at("hidden").get<int>();
  const auto n = static_cast<Eigen::Index>(std::max<std::size_t>(1, m.cultivars.size()));
  m.arrays = {{"ffn.w1", Eigen::MatrixXd::Zero(1, h)},
              {"ffn.b1", Eigen::MatrixXd::Zero(1, h)},
              {"ffn.w2", Eigen::MatrixXd::Zero(h, 1)},
              {"ffn.b2", Eigen::MatrixXd::Zero(1, 1)},
              {"logits", Eigen::MatrixXd::Zero(n, static_cast<Eigen::Index>(m.spec.size()))}};
  return m;
}

TempHybridModel make_temphybrid(CropModel task, std::vector<std::string> cultivars, std::uint64_t seed, int hidden) {
  if (hidden < 2) throw std::invalid_argument("make_temphybrid: at least two hidden units");
  TempHybridModel m;
  m.task = task;
  m.spec = spec_for(task);
  m.cultivars = std::move(cultivars);
  const double s = m.input_scale;
  const Eigen::VectorXd mid = m.spec.midpoints();
  Eigen::MatrixXd w1(1, hidden), b1(1, hidden), w2 = Eigen::MatrixXd::Zero(hidden, 1);
  Rng rng(seed);
  // Hinge units with random breakpoints; the first ones reproduce the midpoint response.
  for (int j = 0; j < hidden; ++j) {
    const double sign = task == CropModel::Gdd ? 1.0 : -1.0;
    const double c = rng.uniform(-0.5, 1.5);
    w1(0, j) = sign;
    b1(0, j) = -sign * c;
  }
  if (task == CropModel::Gdd) {
    const double base = mid[0] * s, cap = (mid[0] + mid[1]) * s;
    b1(0, 0) = -base;
    b1(0, 1) = -cap;
    w2(0, 0) = 1.0 / s;
    w2(1, 0) = -1.0 / s;
  } else {
    b1(0, 0) = mid[3] * s;
    w2(0, 0) = -1.0 / s;
  }
  const auto n = static_cast<Eigen::Index>(std::max<std::size_t>(1, m.cultivars.size()));
  m.arrays = {{"ffn.w1", w1},
              {"ffn.b1", b1},
              {"ffn.w2", w2},
              {"ffn.b2", Eigen::MatrixXd::Zero(1, 1)},
              {"logits", Eigen::MatrixXd::Zero(n, static_cast<Eigen::Index>(m.spec.size()))}};
  return m;
}

Var temphybrid_response(const std::map<std::string, Var>& a, CropModel task, double input_scale, const Var& tmean) {
  const Var h = ad::relu(ad::matmul(tmean * input_scale, a.at("ffn.w1")) + a.at("ffn.b1"));
  const Var y = ad::matmul(h, a.at("ffn.w2")) + a.at("ffn.b2");
  return task == CropModel::Gdd ? ad::maximum(y, 0.0) : ad::minimum(y, 0.0);
}

Eigen::VectorXd temphybrid_response(const TempHybridModel& m, const Eigen::VectorXd& tmean) {
  ad::Tape tape;
  tape.set_recording(false);
  std::map<std::string, Var> a;
  for (const auto& [n, v] : m.arrays) a.emplace(n, tape.constant(v));
  return temphybrid_response(a, m.task, m.input_scale, tape.constant(Eigen::MatrixXd(tmean))).value().col(0);
}

Eigen::VectorXd temphybrid_params(const TempHybridModel& m, int cultivar) {
  return m.spec.rescale(m.arrays.at("logits").row(cultivar).transpose().array().tanh().matrix());
}

namespace {

/// Steps a kernel over a batch with the learned response and per-row static parameters.
std::unique_ptr<BiophysKernel> run_temphybrid(ad::Tape& tape, const std::map<std::string, Var>& a,
                                              const TempHybridModel& m, const std::vector<int>& cultivars,
                                              const Eigen::MatrixXd& tmean) {
  const Var params = rescale(ad::gather_rows(ad::tanh(a.at("logits")), cultivars), m.spec);
  auto kernel = make_kernel(m.task, tape, cultivars.size(), m.gdd);
  for (Eigen::Index t = 0; t < tmean.cols(); ++t) {
    const Eigen::VectorXd tm = tmean.col(t);
    const Var r = temphybrid_response(a, m.task, m.input_scale, tape.constant(Eigen::MatrixXd(tm)));
    if (m.task == CropModel::Gdd) {
      static_cast<GddKernel&>(*kernel).step_response(params, r);
    } else {
      static_cast<FergusonKernel&>(*kernel).step_response(params, tm, &r);
    }
  }
  return kernel;
}

}  // namespace

CropStateSeries temphybrid_rollout(const TempHybridModel& m, const WeatherSeries& series, int cultivar) {
  ad::Tape tape;
  tape.set_recording(false);
  std::map<std::string, Var> a;
  for (const auto& [n, v] : m.arrays) a.emplace(n, tape.constant(v));
  const auto tm = series.tmean();
  const Eigen::MatrixXd t = Eigen::Map<const Eigen::RowVectorXd>(tm.data(), static_cast<Eigen::Index>(tm.size()));
  if (t.cols() == 0) return CropStateSeries::predicted(m.task, {});
  const auto k = run_temphybrid(tape, a, m, {cultivar}, t);
  const Eigen::MatrixXd o = k->observable();
  auto s = CropStateSeries::predicted(m.task, std::vector<double>(o.data(), o.data() + o.size()));
  if (m.task == CropModel::Gdd) s.onsets = static_cast<const GddKernel&>(*k).onsets()[0];
  return s;
}

TempHybridObjective::TempHybridObjective(const TempHybridModel& model, const Dataset& data,
                                         std::vector<std::size_t> train, std::vector<std::size_t> validation)
    : model_(model), data_(data), train_(std::move(train)), validation_(std::move(validation)) {
  if (data.model != model.task) throw std::invalid_argument("TempHybridObjective: dataset and model kinds differ");
}

Var TempHybridObjective::batch_loss(ad::Tape& tape, const std::map<std::string, Var>& params,
                                    const std::vector<std::size_t>& idx) const {
  Batch batch;
  for (auto i : idx) {
    batch.cultivars.push_back(data_.seasons.at(i).cultivar);
    batch.days = std::max(batch.days, static_cast<int>(data_.seasons[i].days()));
  }
  const auto B = static_cast<Eigen::Index>(idx.size());
  batch.tmean = Eigen::MatrixXd::Zero(B, batch.days);
  batch.target = Eigen::MatrixXd::Zero(B, batch.days);
  batch.observed = ad::Mask::Constant(B, batch.days, false);
  for (Eigen::Index r = 0; r < B; ++r) {
    const auto& s = data_.seasons[idx[static_cast<std::size_t>(r)]];
    const auto tm = s.weather.tmean();
    for (Eigen::Index t = 0; t < batch.days; ++t) {
      const auto st = std::min<std::size_t>(static_cast<std::size_t>(t), s.days() - 1);
      batch.tmean(r, t) = tm[st];
      if (static_cast<std::size_t>(t) < s.days()) {
        batch.target(r, t) = s.target[st];
        batch.observed(r, t) = s.observed[st];
      }
    }
  }
  const auto k = run_temphybrid(tape, params, model_, batch.cultivars, batch.tmean);
  const Var out = model_.task == CropModel::Gdd ? static_cast<const GddKernel&>(*k).soft_stage(kScoredTransitions)
                                                : k->training_output();
  return masked_mse(out, capped_target(model_.task, batch.target), batch.observed);
}

Var TempHybridObjective::loss(ad::Tape& tape, const std::map<std::string, Var>& params,
                              std::span<const std::size_t> items, Rng&) {
  std::vector<std::size_t> idx;
  for (auto i : items) idx.push_back(train_[i]);
  return batch_loss(tape, params, idx);
}

std::optional<double> TempHybridObjective::validation_loss(const ParamSet& params) {
  if (validation_.empty()) return std::nullopt;
  ad::Tape tape;
  tape.set_recording(false);
  std::map<std::string, Var> a;
  for (const auto& [n, v] : params) a.emplace(n, tape.constant(v));
  return batch_loss(tape, a, validation_).scalar();
}

// ---------------------------------------------------------------------------
// DMC variants

DmcModel make_variant(BaselineKind kind, const NetConfig& config, CropModel task, const NormStats& stats,
                      std::vector<std::string> cultivars, std::uint64_t seed) {
  NetConfig c = config;
  switch (kind) {
    case BaselineKind::DmcAgg:
      c.embed_mode = EmbedMode::None;
      return make_dmc(c, task, stats, {"pooled"}, seed);
    case BaselineKind::DmcStl:
      c.embed_mode = EmbedMode::None;
      return make_dmc(c, task, stats, std::move(cultivars), seed);
    case BaselineKind::DmcMult:
      c.embed_mode = EmbedMode::Mult;
      break;
    case BaselineKind::DmcAdd:
      c.embed_mode = EmbedMode::Add;
      break;
    case BaselineKind::DmcMultiH:
      c.embed_mode = EmbedMode::MultiHead;
      break;
    default:
      throw std::invalid_argument("make_variant: " + to_string(kind) + " is not a DMC variant");
  }
  return make_dmc(c, task, stats, std::move(cultivars), seed);
}

// ---------------------------------------------------------------------------
// Predictors

namespace {

Checkpoint arrays_checkpoint(nlohmann::json meta, const ParamSet& p, const std::string& prefix = "p/") {
  Checkpoint ck;
  ck.meta = std::move(meta);
  for (const auto& [name, a] : p) {
    ck.names.push_back(prefix + name);
    ck.arrays.emplace(prefix + name, a);
  }
  return ck;
}

ParamSet prefixed(const Checkpoint& ck, const std::string& prefix) {
  ParamSet p;
  for (const auto& name : ck.names) {
    if (name.rfind(prefix, 0) == 0) p.emplace(name.substr(prefix.size()), ck.arrays.at(name));
  }
  return p;
}

class StaticPredictor final : public Predictor {
 public:
  StaticPredictor(std::string kind, CultivarTable table, GddOptions gdd = {})
      : kind_(std::move(kind)), table_(std::move(table)), gdd_(gdd) {}
  std::string kind() const override { return kind_; }
  CropModel task() const override { return table_.model; }
  CropStateSeries predict(const WeatherSeries& s, int c) const override {
    return oracle_rollout(table_.model, s.tmean(), table_.params.at(static_cast<std::size_t>(c)), gdd_);
  }
  Eigen::MatrixXd parameters(const WeatherSeries& s, int c) const override {
    return table_.params.at(static_cast<std::size_t>(c)).transpose().replicate(static_cast<Eigen::Index>(s.days()), 1);
  }
  Checkpoint checkpoint() const override {
    return arrays_checkpoint({{"predictor", kind_}, {"model", {{"kind", "static"}, {"table", table_.to_json()}}}}, {});
  }

 private:
  std::string kind_;
  CultivarTable table_;
  GddOptions gdd_;
};

class DmcPredictor final : public Predictor {
 public:
  DmcPredictor(DmcModel m, std::string kind) : m_(std::move(m)), kind_(std::move(kind)) {}
  std::string kind() const override { return kind_; }
  CropModel task() const override { return m_.biophys; }
  CropStateSeries predict(const WeatherSeries& s, int c) const override { return dmc_rollout(m_, s, slot(c)).states; }
  Eigen::MatrixXd parameters(const WeatherSeries& s, int c) const override { return dmc_rollout(m_, s, slot(c)).omega; }
  Checkpoint checkpoint() const override {
    return arrays_checkpoint({{"predictor", kind_}, {"model", m_.to_json()}}, to_params(m_.net));
  }
  const DmcModel& model() const { return m_; }

 private:
  int slot(int c) const { return m_.net.config.n_cultivars == 1 ? 0 : c; }
  DmcModel m_;
  std::string kind_;
};

class StlPredictor final : public Predictor {
 public:
  explicit StlPredictor(std::vector<DmcModel> models) : models_(std::move(models)) {}
  std::string kind() const override { return "dmc-stl"; }
  CropModel task() const override { return models_.front().biophys; }
  CropStateSeries predict(const WeatherSeries& s, int c) const override {
    return dmc_rollout(models_.at(static_cast<std::size_t>(c)), s, 0).states;
  }
  Eigen::MatrixXd parameters(const WeatherSeries& s, int c) const override {
    return dmc_rollout(models_.at(static_cast<std::size_t>(c)), s, 0).omega;
  }
  Checkpoint checkpoint() const override {
    Checkpoint ck;
    ck.meta = {{"predictor", "dmc-stl"}, {"models", nlohmann::json::array()}};
    for (std::size_t c = 0; c < models_.size(); ++c) {
      ck.meta["models"].push_back(models_[c].to_json());
      const auto part = arrays_checkpoint({}, to_params(models_[c].net), "c" + std::to_string(c) + "/");
      for (const auto& n : part.names) {
        ck.names.push_back(n);
        ck.arrays.emplace(n, part.arrays.at(n));
      }
    }
    return ck;
  }

 private:
  std::vector<DmcModel> models_;
};

class DeepPredictor final : public Predictor {
 public:
  DeepPredictor(DeepMtlModel m, std::string kind) : m_(std::move(m)), kind_(std::move(kind)) {}
  std::string kind() const override { return kind_; }
  CropModel task() const override { return m_.task; }
  CropStateSeries predict(const WeatherSeries& s, int c) const override { return deep_mtl_rollout(m_, s, c); }
  Checkpoint checkpoint() const override {
    return arrays_checkpoint({{"predictor", kind_}, {"model", m_.to_json()}}, to_params(m_.net));
  }

 private:
  DeepMtlModel m_;
  std::string kind_;
};

class ResidualPredictor final : public Predictor {
 public:
  explicit ResidualPredictor(ResidualModel m) : m_(std::move(m)) {}
  std::string kind() const override { return "residual"; }
  CropModel task() const override { return m_.task; }
  CropStateSeries predict(const WeatherSeries& s, int c) const override { return residual_rollout(m_, s, c); }
  Checkpoint checkpoint() const override {
    return arrays_checkpoint({{"predictor", "residual"}, {"model", m_.to_json()}}, to_params(m_.net));
  }

 private:
  ResidualModel m_;
};

class TempHybridPredictor final : public Predictor {
 public:
  explicit TempHybridPredictor(TempHybridModel m) : m_(std::move(m)) {}
  std::string kind() const override { return "temphybrid"; }
  CropModel task() const override { return m_.task; }
  CropStateSeries predict(const WeatherSeries& s, int c) const override { return temphybrid_rollout(m_, s, c); }
  Eigen::MatrixXd parameters(const WeatherSeries& s, int c) const override {
    return temphybrid_params(m_, c).transpose().replicate(static_cast<Eigen::Index>(s.days()), 1);
  }
  Checkpoint checkpoint() const override {
    return arrays_checkpoint({{"predictor", "temphybrid"}, {"model", m_.to_json()}}, m_.arrays);
  }

 private:
  TempHybridModel m_;
};

CultivarTable table_of(CropModel task, const std::vector<std::string>& names, std::vector<Eigen::VectorXd> params,
                       nlohmann::json provenance) {
  CultivarTable t;
  t.model = task;
  t.spec = spec_for(task);
  t.names = names;
  t.params = std::move(params);
  t.provenance = std::move(provenance);
  return t;
}

std::vector<Eigen::VectorXd> calibrate(const Dataset& data, const std::vector<std::size_t>& train_idx,
                                       const FitOptions& o) {
  TrainConfig cfg;
  if (o.calibration) {
    cfg = *o.calibration;
  } else {
    const auto p = lr_preset("gd");
    cfg.learning_rate = p.learning_rate;
    cfg.batch_size = p.batch_size;
    cfg.seed = o.train.seed;
  }
  return gd_calibrate(data.subset(train_idx), spec_for(data.model), cfg).params;
}

TrainOutputs named(const TrainOutputs& out, const std::string& suffix) {
  TrainOutputs o = out;
  if (!suffix.empty()) o.name += "." + suffix;
  return o;
}

}  // namespace

std::vector<std::string> model_kinds() {
  std::vector<std::string> k{"dmc-mtl"};
  for (const auto& [kind, name] : kKindNames) k.emplace_back(name);
  return k;
}

const DmcModel* as_dmc(const Predictor& p) {
  const auto* d = dynamic_cast<const DmcPredictor*>(&p);
  return d ? &d->model() : nullptr;
}

std::unique_ptr<Predictor> make_predictor(DmcModel m, const std::string& kind) {
  return std::make_unique<DmcPredictor>(std::move(m), kind);
}

std::unique_ptr<Predictor> fit_predictor(const std::string& kind, const Dataset& data,
                                         const std::vector<std::size_t>& train_idx,
                                         const std::vector<std::size_t>& val_idx, const FitOptions& o) {
  const CropModel task = data.model;
  const std::uint64_t seed = o.train.seed;
  if (kind == "deployed-bio") {
    if (!o.published) throw std::invalid_argument("deployed-bio needs a published parameter table");
    if (o.published->model != task) throw std::invalid_argument("published table is for another crop model");
    std::vector<Eigen::VectorXd> params;
    for (const auto& name : data.cultivars) {
      const auto it = std::find(o.published->names.begin(), o.published->names.end(), name);
      if (it == o.published->names.end()) throw std::invalid_argument("no published parameters for cultivar '" + name + "'");
      params.push_back(o.published->params[static_cast<std::size_t>(it - o.published->names.begin())]);
    }
    return std::make_unique<StaticPredictor>(kind, table_of(task, data.cultivars, params, o.published->provenance));
  }
  if (kind == "gd") {
    TrainConfig cfg = o.train;
    return std::make_unique<StaticPredictor>(
        kind, table_of(task, data.cultivars, gd_calibrate(data.subset(train_idx), spec_for(task), cfg).params,
                       {{"gd_calibrate", cfg.to_json()}}));
  }
  const NormStats stats = fit_norm_stats(data.subset(train_idx).weather());
  if (kind == "deep-mtl" || kind == "pinn") {
    const bool pinn = kind == "pinn";
    DeepMtlModel m = make_deep_mtl(o.net, task, !pinn && task == CropModel::Gdd && o.classification, stats,
                                   data.cultivars, seed);
    std::optional<std::vector<Eigen::VectorXd>> physics;
    if (pinn) physics = o.published ? o.published->params : calibrate(data, train_idx, o);
    DeepObjective obj(m, data, train_idx, val_idx, physics, 0.5);
    TrainOutputs out = o.out;
    out.meta = m.to_json();
    assign_params(m.net, train(to_params(m.net), obj, o.train, out).best_params);
    return std::make_unique<DeepPredictor>(std::move(m), kind);
  }
  if (kind == "residual") {
    ResidualModel m = make_residual(o.net, task, o.published ? o.published->params : calibrate(data, train_idx, o),
                                    stats, data.cultivars, seed);
    ResidualObjective obj(m, data, train_idx, val_idx);
    TrainOutputs out = o.out;
    out.meta = m.to_json();
    assign_params(m.net, train(to_params(m.net), obj, o.train, out).best_params);
    return std::make_unique<ResidualPredictor>(std::move(m));
  }
  if (kind == "temphybrid") {
    TempHybridModel m = make_temphybrid(task, data.cultivars, seed);
    TempHybridObjective obj(m, data, train_idx, val_idx);
    TrainOutputs out = o.out;
    out.meta = m.to_json();
    m.arrays = train(m.arrays, obj, o.train, out).best_params;
    return std::make_unique<TempHybridPredictor>(std::move(m));
  }
  if (kind == "dmc-mtl") {
    DmcModel m = make_dmc(o.net, task, stats, data.cultivars, seed);
    m.scored_stage = o.scored_stage;
    m.validate();
    train_dmc(m, data, train_idx, val_idx, o.train, o.out);
    return std::make_unique<DmcPredictor>(std::move(m), kind);
  }
  if (kind == "dmc-stl") {
    std::vector<DmcModel> models;
    for (int c = 0; c < static_cast<int>(data.cultivars.size()); ++c) {
      const std::string& name = data.cultivars[static_cast<std::size_t>(c)];
      Dataset own;
      own.model = task;
      own.cultivars = {name};
      std::vector<std::size_t> tr, va;
      auto take = [&](const std::vector<std::size_t>& from, std::vector<std::size_t>& to) {
        for (auto i : from) {
          if (data.seasons[i].cultivar != c) continue;
          to.push_back(own.seasons.size());
          own.seasons.push_back(data.seasons[i]);
          own.seasons.back().cultivar = 0;
        }
      };
      take(train_idx, tr);
      take(val_idx, va);
      DmcModel m = make_variant(BaselineKind::DmcStl, o.net, task, stats, {name}, seed + static_cast<std::uint64_t>(c));
      if (tr.empty()) {
        std::cerr << "warning: cultivar " << name << " has no training seasons; its single-task model stays untrained\n";
      } else {
        train_dmc(m, own, tr, va, o.train, named(o.out, "c" + std::to_string(c)));
      }
      models.push_back(std::move(m));
    }
    return std::make_unique<StlPredictor>(std::move(models));
  }
  if (kind == "dmc-agg") {
    Dataset pooled = data;
    pooled.cultivars = {"pooled"};
    for (auto& s : pooled.seasons) s.cultivar = 0;
    DmcModel m = make_variant(BaselineKind::DmcAgg, o.net, task, stats, data.cultivars, seed);
    train_dmc(m, pooled, train_idx, val_idx, o.train, o.out);
    return std::make_unique<DmcPredictor>(std::move(m), kind);
  }
  const BaselineKind k = baseline_kind_from_string(kind);
  DmcModel m = make_variant(k, o.net, task, stats, data.cultivars, seed);
  train_dmc(m, data, train_idx, val_idx, o.train, o.out);
  return std::make_unique<DmcPredictor>(std::move(m), kind);
}

std::unique_ptr<Predictor> predictor_from_checkpoint(const Checkpoint& ck) {
  const std::string kind = ck.meta.value("predictor", ck.meta.contains("model") &&
                                                              ck.meta["model"].value("kind", "") == "dmc"
                                                          ? std::string("dmc-mtl")
                                                          : std::string());
  if (kind.empty()) throw std::invalid_argument("checkpoint does not name a model kind");
  if (kind == "dmc-stl") {
    std::vector<DmcModel> models;
    for (std::size_t c = 0; c < ck.meta.at("models").size(); ++c) {
      DmcModel m = DmcModel::from_json(ck.meta["models"][c]);
      assign_params(m.net, prefixed(ck, "c" + std::to_string(c) + "/"));
      models.push_back(std::move(m));
    }
    return std::make_unique<StlPredictor>(std::move(models));
  }
  const auto& mj = ck.meta.at("model");
  const std::string mk = mj.value("kind", "");
  if (mk == "static") return std::make_unique<StaticPredictor>(kind, CultivarTable::from_json(mj.at("table")));
  if (mk == "dmc") return std::make_unique<DmcPredictor>(dmc_from_checkpoint(ck), kind);
  if (mk == "deep") {
    DeepMtlModel m = DeepMtlModel::from_json(mj);
    assign_params(m.net, prefixed(ck, "p/"));
    return std::make_unique<DeepPredictor>(std::move(m), kind);
  }
  if (mk == "residual") {
    ResidualModel m = ResidualModel::from_json(mj);
    assign_params(m.net, prefixed(ck, "p/"));
    return std::make_unique<ResidualPredictor>(std::move(m));
  }
  if (mk == "temphybrid") {
    TempHybridModel m = TempHybridModel::from_json(mj);
    for (auto& [n, a] : prefixed(ck, "p/")) {
      if (!m.arrays.count(n) || m.arrays.at(n).rows() != a.rows() || m.arrays.at(n).cols() != a.cols()) {
        throw std::invalid_argument("checkpoint array '" + n + "' does not fit the model");
      }
      m.arrays[n] = a;
    }
    return std::make_unique<TempHybridPredictor>(std::move(m));
  }
  throw std::invalid_argument("unknown model kind '" + mk + "' in checkpoint");
}

void save_predictor(const fs::path& path, const Predictor& p) { save_checkpoint(path, p.checkpoint()); }

std::unique_ptr<Predictor> load_predictor(const fs::path& path) {
  return predictor_from_checkpoint(load_checkpoint(path));
}

}  // namespace dmc
