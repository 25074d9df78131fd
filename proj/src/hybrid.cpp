#include "dmc/hybrid.hpp"

#include <cstdio>
#include <fstream>

namespace dmc {

namespace fs = std::filesystem;
using ad::Var;

namespace {

const char* const kStageNames[] = {"Dormant", "BudBreak", "Bloom", "Veraison", "Ripe"};

Eigen::MatrixXd rows_of(const Eigen::VectorXd& v, std::size_t b) {
  return v.transpose().replicate(static_cast<Eigen::Index>(b), 1);
}

}  // namespace

// ---------------------------------------------------------------------------
// Model

void DmcModel::validate() const {
  net.config.validate();
  if (static_cast<int>(spec.size()) != net.config.out_dim) {
    throw std::invalid_argument("DmcModel: parameter count differs from network out_dim");
  }
  if (spec_for(biophys).size() != spec.size()) throw std::invalid_argument("DmcModel: spec does not fit the biophysical model");
  if (smoothing && !(*smoothing > 0.0)) throw std::invalid_argument("DmcModel: delta scale must be positive");
  if (window && *window < 1) throw std::invalid_argument("DmcModel: window must be at least 1");
  if (scored_stage && (biophys != CropModel::Gdd || *scored_stage < 0 || *scored_stage >= kScoredTransitions)) {
    throw std::invalid_argument("DmcModel: scored stage must be a phenology transition below veraison's index");
  }
  if (static_cast<int>(stats.features.size()) + 2 != net.config.input_dim) {
    throw std::invalid_argument("DmcModel: network input_dim must equal feature count + 2");
  }
  if (!cultivars.empty() && static_cast<int>(cultivars.size()) != net.config.n_cultivars) {
    throw std::invalid_argument("DmcModel: cultivar list differs from n_cultivars");
  }
}

nlohmann::json DmcModel::to_json() const {
  return {{"kind", "dmc"},
          {"net", net.config.to_json()},
          {"spec", spec.to_json()},
          {"biophys", to_string(biophys)},
          {"smoothing", smoothing ? nlohmann::json(*smoothing) : nlohmann::json()},
          {"window", window ? nlohmann::json(*window) : nlohmann::json()},
          {"apply_next_day", apply_next_day},
          {"scored_stage", scored_stage ? nlohmann::json(*scored_stage) : nlohmann::json()},
          {"gdd", {{"pool_emergence", gdd.pool_emergence}, {"carry_overshoot", gdd.carry_overshoot}}},
          {"stats", stats.to_json()},
          {"cultivars", cultivars}};
}

DmcModel DmcModel::from_json(const nlohmann::json& j) {
  DmcModel m;
  m.net = init_weights(NetConfig::from_json(j.at("net")), 0);
  m.net.set_zero();
  m.spec = ParamSpec::from_json(j.at("spec"));
  m.biophys = crop_model_from_string(j.at("biophys").get<std::string>());
  if (j.contains("smoothing") && !j["smoothing"].is_null()) m.smoothing = j["smoothing"].get<double>();
  if (j.contains("window") && !j["window"].is_null()) m.window = j["window"].get<int>();
  m.apply_next_day = j.value("apply_next_day", false);
  if (j.contains("scored_stage") && !j["scored_stage"].is_null()) m.scored_stage = j["scored_stage"].get<int>();
  if (j.contains("gdd")) {
    m.gdd.pool_emergence = j["gdd"].value("pool_emergence", true);
    m.gdd.carry_overshoot = j["gdd"].value("carry_overshoot", true);
  }
  m.stats = NormStats::from_json(j.at("stats"));
  m.cultivars = j.value("cultivars", std::vector<std::string>{});
  m.validate();
  return m;
}

DmcModel make_dmc(const NetConfig& config, CropModel biophys, const NormStats& stats,
                  std::vector<std::string> cultivars, std::uint64_t seed) {
  NetConfig c = config;
  c.input_dim = static_cast<int>(stats.features.size()) + 2;
  c.out_dim = static_cast<int>(spec_for(biophys).size());
  c.n_cultivars = std::max<int>(1, static_cast<int>(cultivars.size()));
  c.embed_dim = (c.embed_mode == EmbedMode::MultiHead || c.embed_mode == EmbedMode::None) ? 0 : c.input_dim;
  DmcModel m;
  m.net = init_weights(c, seed);
  m.spec = spec_for(biophys);
  m.biophys = biophys;
  m.stats = stats;
  m.cultivars = std::move(cultivars);
  m.validate();
  return m;
}

void save_dmc(const fs::path& path, const DmcModel& m) {
  Checkpoint ck;
  ck.meta = {{"model", m.to_json()}};
  for (const auto& name : m.net.names) {
    ck.names.push_back("p/" + name);
    ck.arrays.emplace("p/" + name, m.net.at(name));
  }
  save_checkpoint(path, ck);
}

DmcModel dmc_from_checkpoint(const Checkpoint& ck) {
  if (!ck.meta.contains("model") || ck.meta["model"].value("kind", "") != "dmc") {
    throw std::invalid_argument("checkpoint does not hold a DMC model");
  }
  DmcModel m = DmcModel::from_json(ck.meta["model"]);
  assign_params(m.net, params_from_checkpoint(ck));
  return m;
}

DmcModel load_dmc(const fs::path& path) { return dmc_from_checkpoint(load_checkpoint(path)); }

// ---------------------------------------------------------------------------
// Composition

DmcCore::DmcCore(ad::Tape& tape, const DmcModel& model, const NetBinding& net, std::vector<int> cultivars)
    : tape_(&tape),
      model_(&model),
      net_(&net),
      cultivars_(cultivars),
      runner_(net, std::move(cultivars)),
      kernel_(make_kernel(model.biophys, tape, cultivars_.size(), model.gdd)) {}

DmcCore::DmcCore(ad::Tape& tape, const DmcModel& model, const NetBinding& net, std::vector<int> cultivars,
                 const DmcState& resume)
    : tape_(&tape),
      model_(&model),
      net_(&net),
      cultivars_(cultivars),
      runner_(net, std::move(cultivars)),
      kernel_(resume_kernel(tape, resume.kernel, model.gdd)),
      day_(resume.day),
      started_(resume.started) {
  if (resume.hidden.size() > 0) runner_.set_hidden(resume.hidden);
  if (started_) omega_ = tape.constant(resume.omega);
  for (const auto& x : resume.recent) recent_.push_back(tape.constant(x));
}

Var DmcCore::raw(const Var& x) {
  if (!model_->window) return runner_.step(x);
  recent_.push_back(x);
  while (static_cast<int>(recent_.size()) > *model_->window) recent_.pop_front();
  runner_.reset();
  Var y;
  for (const auto& r : recent_) y = runner_.step(r);
  return y;
}

Var DmcCore::advance(const Var& raw, const Eigen::VectorXd& tmean, const Var* delta) {
  const auto& spec = model_->spec;
  const std::size_t b = cultivars_.size();
  const Var r = delta ? ad::clamp(raw + *delta, -1.0, 1.0) : raw;
  Var predicted;
  if (model_->smoothing) {
    if (!started_) {
      predicted = tape_->constant(rows_of(spec.midpoints(), b));
    } else {
      const Var lo = tape_->constant(Eigen::MatrixXd(spec.mins().transpose()));
      const Var hi = tape_->constant(Eigen::MatrixXd(spec.maxs().transpose()));
      const Eigen::MatrixXd step = (*model_->smoothing * spec.widths()).transpose();
      predicted = ad::clamp(omega_ + ad::scale(r, step.replicate(static_cast<Eigen::Index>(b), 1)), lo, hi);
    }
  } else {
    predicted = rescale(r, spec);
  }
  Var applied = predicted;
  if (model_->apply_next_day) applied = started_ ? omega_ : tape_->constant(rows_of(spec.midpoints(), b));
  kernel_->step(applied, tmean);
  omega_ = predicted;
  started_ = true;
  ++day_;
  return applied;
}

Var DmcCore::training_output() const {
  if (model_->biophys == CropModel::Gdd) return static_cast<const GddKernel&>(*kernel_).soft_stage(kScoredTransitions);
  return kernel_->training_output();
}

DmcState DmcCore::state() const {
  DmcState s;
  s.day = day_;
  s.hidden = runner_.hidden();
  s.kernel = kernel_->snapshot();
  s.started = started_;
  if (started_) s.omega = omega_.value();
  for (const auto& x : recent_) s.recent.push_back(x.value());
  return s;
}

// ---------------------------------------------------------------------------
// Inference

DmcSession::DmcSession(const DmcModel& model, int cultivar)
    : model_(&model), cultivar_(cultivar), tape_(std::make_unique<ad::Tape>()) {
  tape_->set_recording(false);
  net_ = bind(*tape_, model.net, false);
  core_ = std::make_unique<DmcCore>(*tape_, model, net_, std::vector<int>{cultivar});
}

DmcSession::DmcSession(const DmcModel& model, int cultivar, const DmcState& resume)
    : model_(&model), cultivar_(cultivar), tape_(std::make_unique<ad::Tape>()) {
  tape_->set_recording(false);
  net_ = bind(*tape_, model.net, false);
  core_ = std::make_unique<DmcCore>(*tape_, model, net_, std::vector<int>{cultivar}, resume);
}

void DmcSession::advance(const WeatherSeries& series, std::size_t days) {
  if (days > series.days()) throw std::invalid_argument("DmcSession: more days requested than the series holds");
  if (days == 0) return;
  const Eigen::MatrixXd x = normalize_one(series, model_->stats).values;
  const auto tm = series.tmean();
  for (std::size_t t = 0; t < days; ++t) {
    const auto i = static_cast<Eigen::Index>(t);
    const Var applied = core_->step(tape_->constant(Eigen::MatrixXd(x.row(i))), Eigen::VectorXd::Constant(1, tm[t]));
    omega_.push_back(applied.value().row(0));
  }
}

DmcRollout DmcSession::result() const {
  DmcRollout r;
  const auto& k = core_->kernel();
  const Eigen::MatrixXd obs = k.steps() > 0 ? k.observable() : Eigen::MatrixXd(1, 0);
  r.states = CropStateSeries::predicted(model_->biophys, std::vector<double>(obs.data(), obs.data() + obs.size()));
  if (model_->biophys == CropModel::Gdd && k.steps() > 0) r.states.onsets = static_cast<const GddKernel&>(k).onsets()[0];
  r.omega.resize(static_cast<Eigen::Index>(omega_.size()), static_cast<Eigen::Index>(model_->spec.size()));
  for (std::size_t t = 0; t < omega_.size(); ++t) r.omega.row(static_cast<Eigen::Index>(t)) = omega_[t];
  return r;
}

DmcRollout dmc_rollout(const DmcModel& model, const WeatherSeries& series, int cultivar) {
  DmcSession s(model, cultivar);
  s.advance(series);
  return s.result();
}

DmcRollout dmc_rollout_smoothed(const DmcModel& model, double delta_scale, const WeatherSeries& series, int cultivar) {
  DmcModel m = model;
  m.smoothing = delta_scale;
  m.validate();
  return dmc_rollout(m, series, cultivar);
}

CropStateSeries forecast(const DmcModel& model, const WeatherSeries& past, const WeatherSeries& future, int horizon,
                         int cultivar) {
  if (horizon < 0 || static_cast<std::size_t>(horizon) > future.days()) {
    throw std::invalid_argument("forecast: horizon exceeds the supplied future weather");
  }
  DmcSession warm(model, cultivar);
  warm.advance(past);
  DmcSession ahead(model, cultivar, warm.state());
  ahead.advance(future, static_cast<std::size_t>(horizon));
  return ahead.result().states;
}

void write_predictions(const fs::path& path, const WeatherSeries& series, const DmcRollout& r, const ParamSpec& spec) {
  if (r.states.size() > series.days()) throw std::invalid_argument("write_predictions: more predictions than dates");
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  const bool phenology = r.states.model == CropModel::Gdd;
  out << (phenology ? "date,stage,stage_name" : "date,lte50");
  for (const auto& p : spec.ranges()) out << ',' << p.name;
  out << '\n';
  char buf[64];
  for (std::size_t t = 0; t < r.states.size(); ++t) {
    out << format_date(series.dates[t]);
    if (phenology) {
      const int s = static_cast<int>(r.states.values[t]);
      out << ',' << s << ',' << kStageNames[std::clamp(s, 0, 4)];
    } else {
      std::snprintf(buf, sizeof buf, ",%.17g", r.states.values[t]);
      out << buf;
    }
    for (Eigen::Index j = 0; j < r.omega.cols(); ++j) {
      std::snprintf(buf, sizeof buf, ",%.17g", r.omega(static_cast<Eigen::Index>(t), j));
      out << buf;
    }
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Training

DmcObjective::DmcObjective(const DmcModel& model, const Dataset& data, std::vector<std::size_t> train,
                           std::vector<std::size_t> validation)
    : model_(model), data_(data), train_(std::move(train)), validation_(std::move(validation)) {
  model.validate();
  if (data.model != model.biophys) throw std::invalid_argument("DmcObjective: dataset and model kinds differ");
}

Var DmcObjective::batch_loss(ad::Tape& tape, const NetBinding& net, const Batch& batch) const {
  DmcCore core(tape, model_, net, batch.cultivars);
  for (int t = 0; t < batch.days; ++t) {
    core.step(tape.constant(batch.inputs[static_cast<std::size_t>(t)]), batch.tmean.col(t));
  }
  if (model_.scored_stage) {
    const int k = *model_.scored_stage;
    const Eigen::MatrixXd reached = (batch.target.array() >= k + 1 - 1e-9).cast<double>().matrix();
    return masked_mse(static_cast<const GddKernel&>(core.kernel()).soft_transition(k), reached, batch.observed);
  }
  Eigen::MatrixXd target = batch.target;
  if (model_.biophys == CropModel::Gdd) target = target.cwiseMin(static_cast<double>(kScoredTransitions));
  return masked_mse(core.training_output(), target, batch.observed);
}

Var DmcObjective::loss(ad::Tape& tape, const std::map<std::string, Var>& params, std::span<const std::size_t> items,
                       Rng&) {
  std::vector<std::size_t> idx;
  idx.reserve(items.size());
  for (auto i : items) idx.push_back(train_[i]);
  const NetBinding net = bind_vars(model_.net, params);
  return batch_loss(tape, net, make_batch(data_, idx, model_.stats));
}

std::optional<double> DmcObjective::validation_loss(const ParamSet& params) {
  if (validation_.empty()) return std::nullopt;
  NetWeights w = model_.net;
  assign_params(w, params);
  ad::Tape tape;
  tape.set_recording(false);
  const NetBinding net = bind(tape, w, false);
  return batch_loss(tape, net, make_batch(data_, validation_, model_.stats)).scalar();
}

TrainResult train_dmc(DmcModel& model, const Dataset& data, const std::vector<std::size_t>& train_idx,
                      const std::vector<std::size_t>& val_idx, const TrainConfig& config, const TrainOutputs& out,
                      const std::optional<fs::path>& resume) {
  DmcObjective objective(model, data, train_idx, val_idx);
  TrainOutputs o = out;
  o.meta = model.to_json();
  auto result = train(to_params(model.net), objective, config, o, resume);
  assign_params(model.net, result.best_params);
  return result;
}

}  // namespace dmc
