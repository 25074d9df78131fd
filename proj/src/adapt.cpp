#include "dmc/adapt.hpp"

#include <fstream>
#include <sstream>

namespace dmc {

namespace fs = std::filesystem;
using ad::Var;

namespace {

const std::string kScalar = "cultivar_scalar";

double capped(CropModel m, double v) {
  return m == CropModel::Gdd ? std::min(v, static_cast<double>(kScoredTransitions)) : v;
}

}  // namespace

// ---------------------------------------------------------------------------
// Weights

void EenWeights::validate() const {
  const auto& c = net.config;
  c.validate();
  if (c.bias) throw std::invalid_argument("EenWeights: the error network has no biases");
  if (c.input_dim != 2 || c.embed_mode != EmbedMode::None) {
    throw std::invalid_argument("EenWeights: input must be (error, cultivar scalar) without embedding");
  }
  if (cultivar_scalar.rows() != c.n_cultivars || cultivar_scalar.cols() != 1) {
    throw std::invalid_argument("EenWeights: cultivar scalar must be n_cultivars x 1");
  }
  if (!(delta_scale > 0.0)) throw std::invalid_argument("EenWeights: delta scale must be positive");
}

nlohmann::json EenWeights::to_json() const {
  return {{"kind", "een"}, {"net", net.config.to_json()}, {"delta_scale", delta_scale}};
}

EenWeights EenWeights::from_json(const nlohmann::json& j) {
  if (j.value("kind", "") != "een") throw std::invalid_argument("not an error network description");
  EenWeights w;
  w.net = init_weights(NetConfig::from_json(j.at("net")), 0);
  w.net.set_zero();
  w.cultivar_scalar = Eigen::MatrixXd::Zero(w.net.config.n_cultivars, 1);
  w.delta_scale = j.value("delta_scale", 0.1);
  w.validate();
  return w;
}

EenWeights make_een(const DmcModel& base, std::uint64_t seed, bool recurrent) {
  NetConfig c = base.net.config;
  c.input_dim = 2;
  c.embed_mode = EmbedMode::None;
  c.embed_dim = 0;
  c.bias = false;
  c.output = OutputActivation::Tanh;
  if (!recurrent) c.recur_dim = 0;
  EenWeights w;
  w.net = init_weights(c, seed);
  Rng rng(seed ^ 0x5EEDULL);
  w.cultivar_scalar.resize(c.n_cultivars, 1);
  for (Eigen::Index i = 0; i < w.cultivar_scalar.rows(); ++i) w.cultivar_scalar(i, 0) = rng.uniform(-1.0, 1.0);
  w.validate();
  return w;
}

ParamSet een_params(const EenWeights& w) {
  ParamSet p = to_params(w.net);
  p.emplace(kScalar, w.cultivar_scalar);
  return p;
}

void assign_een(EenWeights& w, const ParamSet& p) {
  assign_params(w.net, p);
  w.cultivar_scalar = p.at(kScalar);
}

void save_een(const fs::path& path, const EenWeights& w, const nlohmann::json& base) {
  Checkpoint ck;
  ck.meta = {{"een", w.to_json()}, {"base", base}};
  for (const auto& [name, a] : een_params(w)) {
    ck.names.push_back("p/" + name);
    ck.arrays.emplace("p/" + name, a);
  }
  save_checkpoint(path, ck);
}

EenWeights een_from_checkpoint(const Checkpoint& ck) {
  if (!ck.meta.contains("een")) throw std::invalid_argument("checkpoint does not hold an error network");
  EenWeights w = EenWeights::from_json(ck.meta["een"]);
  assign_een(w, params_from_checkpoint(ck));
  w.validate();
  return w;
}

EenWeights load_een(const fs::path& path) { return een_from_checkpoint(load_checkpoint(path)); }

// ---------------------------------------------------------------------------
// Forward

namespace {

Var een_input(ad::Tape& tape, const Eigen::VectorXd& error, const Var& scalar, const std::vector<int>& cultivars) {
  const auto b = static_cast<Eigen::Index>(error.size());
  const Var e = tape.constant(Eigen::MatrixXd(error));
  const ad::Mask seen = error.array() != 0.0;
  const Var c = ad::where(seen, ad::gather_rows(scalar, cultivars), tape.constant(Eigen::MatrixXd::Zero(b, 1)));
  return ad::concat_cols({e, c});
}

}  // namespace

Eigen::MatrixXd een_forward(const EenWeights& w, const Observations& errors, int cultivar) {
  w.validate();
  if (cultivar < 0 || cultivar >= w.net.config.n_cultivars) throw std::out_of_range("een_forward: cultivar index");
  ad::Tape tape;
  tape.set_recording(false);
  const NetBinding net = bind(tape, w.net, false);
  const Var scalar = tape.constant(w.cultivar_scalar);
  NetRunner runner(net, {cultivar});
  Eigen::MatrixXd out(static_cast<Eigen::Index>(errors.size()), w.net.config.out_dim);
  for (std::size_t t = 0; t < errors.size(); ++t) {
    const Eigen::VectorXd e = Eigen::VectorXd::Constant(1, errors[t].value_or(0.0));
    out.row(static_cast<Eigen::Index>(t)) = runner.step(een_input(tape, e, scalar, {cultivar})).value();
  }
  return out;
}

AdaptCore::AdaptCore(ad::Tape& tape, const DmcModel& base, const NetBinding& base_net, const NetBinding& een_net,
                     const Var& cultivar_scalar, double delta_scale, std::vector<int> cultivars)
    : tape_(&tape),
      base_(&base),
      cultivars_(cultivars),
      core_(tape, base, base_net, cultivars),
      een_(een_net, cultivars),
      scalar_(cultivar_scalar),
      delta_scale_(delta_scale) {}

Var AdaptCore::step(const Var& x, const Eigen::VectorXd& tmean, const Eigen::VectorXd& error) {
  const Var delta = een_.step(een_input(*tape_, error, scalar_, cultivars_)) * delta_scale_;
  return core_.advance(core_.raw(x), tmean, &delta);
}

Eigen::VectorXd AdaptCore::error(const Eigen::VectorXd& observed, const std::vector<bool>& visible) const {
  const Eigen::VectorXd pred = core_.kernel().current_observable();
  Eigen::VectorXd e = Eigen::VectorXd::Zero(pred.size());
  for (Eigen::Index i = 0; i < pred.size(); ++i) {
    if (visible[static_cast<std::size_t>(i)]) {
      e[i] = capped(base_->biophys, observed[i]) - capped(base_->biophys, pred[i]);
    }
  }
  return e;
}

DmcRollout adapt_rollout(const DmcModel& base, const EenWeights& een, const WeatherSeries& series, int cultivar,
                         const Observations& obs) {
  een.validate();
  if (een.net.config.out_dim != base.net.config.out_dim || een.net.config.n_cultivars != base.net.config.n_cultivars) {
    throw std::invalid_argument("adapt_rollout: error network does not match the base model");
  }
  if (obs.size() > series.days()) throw std::invalid_argument("adapt_rollout: observation outside the season window");
  ad::Tape tape;
  tape.set_recording(false);
  const NetBinding bn = bind(tape, base.net, false);
  const NetBinding en = bind(tape, een.net, false);
  AdaptCore core(tape, base, bn, en, tape.constant(een.cultivar_scalar), een.delta_scale, {cultivar});

  const Eigen::MatrixXd x = normalize_one(series, base.stats).values;
  const auto tm = series.tmean();
  DmcRollout r;
  r.omega.resize(static_cast<Eigen::Index>(series.days()), static_cast<Eigen::Index>(base.spec.size()));
  Eigen::VectorXd err = Eigen::VectorXd::Zero(1);
  for (std::size_t t = 0; t < series.days(); ++t) {
    const auto i = static_cast<Eigen::Index>(t);
    const Var applied = core.step(tape.constant(Eigen::MatrixXd(x.row(i))), Eigen::VectorXd::Constant(1, tm[t]), err);
    r.omega.row(i) = applied.value().row(0);
    const bool seen = t < obs.size() && obs[t].has_value();
    err = core.error(Eigen::VectorXd::Constant(1, seen ? *obs[t] : 0.0), {seen});
  }
  const auto& k = core.core().kernel();
  const Eigen::MatrixXd o = k.steps() > 0 ? k.observable() : Eigen::MatrixXd(1, 0);
  r.states = CropStateSeries::predicted(base.biophys, std::vector<double>(o.data(), o.data() + o.size()));
  if (base.biophys == CropModel::Gdd && k.steps() > 0) r.states.onsets = static_cast<const GddKernel&>(k).onsets()[0];
  return r;
}

CropStateSeries adapt_forecast(const DmcModel& base, const EenWeights& een, const WeatherSeries& past,
                               const Observations& obs, const WeatherSeries& future, int horizon, int cultivar) {
  if (horizon < 0 || static_cast<std::size_t>(horizon) > future.days()) {
    throw std::invalid_argument("forecast: horizon exceeds the supplied future weather");
  }
  if (obs.size() > past.days()) throw std::invalid_argument("adapt_forecast: observation outside the past window");
  const WeatherSeries all = horizon > 0 ? concat(past, future.slice(0, static_cast<std::size_t>(horizon))) : past;
  const auto full = adapt_rollout(base, een, all, cultivar, obs).states;
  CropStateSeries out = CropStateSeries::predicted(
      base.biophys, std::vector<double>(full.values.begin() + static_cast<std::ptrdiff_t>(past.days()), full.values.end()));
  return out;
}

// ---------------------------------------------------------------------------
// Observations

std::vector<ObservationRecord> read_observations(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error(path.string() + ": empty observation file");
  std::vector<ObservationRecord> out;
  int row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string date, cultivar, value;
    if (!std::getline(ss, date, ',') || !std::getline(ss, cultivar, ',') || !std::getline(ss, value)) {
      throw std::runtime_error(path.string() + ":" + std::to_string(row) + ": expected date,cultivar,value");
    }
    try {
      out.push_back({parse_date(date), cultivar, std::stod(value)});
    } catch (const std::invalid_argument&) {
      throw std::runtime_error(path.string() + ":" + std::to_string(row) + ": bad field");
    }
  }
  return out;
}

Observations align_observations(const std::vector<ObservationRecord>& records, const std::string& cultivar,
                                const WeatherSeries& series) {
  Observations obs(series.days());
  if (series.days() == 0) return obs;
  for (const auto& r : records) {
    if (r.cultivar != cultivar) continue;
    const auto day = (r.date - series.dates.front()).count();
    if (day < 0 || day >= static_cast<long>(series.days())) {
      throw std::invalid_argument("observation on " + format_date(r.date) + " is outside the season window");
    }
    obs[static_cast<std::size_t>(day)] = r.value;
  }
  return obs;
}

Observations season_observations(const Season& s, std::size_t cutoff) {
  Observations obs(s.days());
  for (std::size_t t = 0; t < std::min(cutoff, s.days()); ++t) {
    if (s.observed[t]) obs[t] = s.target[t];
  }
  return obs;
}

// ---------------------------------------------------------------------------
// Training

EenObjective::EenObjective(const DmcModel& base, const EenWeights& een, const Dataset& data,
                           std::vector<std::size_t> train, std::vector<std::size_t> validation)
    : base_(base), een_(een), data_(data), train_(std::move(train)), validation_(std::move(validation)) {
  base.validate();
  een.validate();
  if (data.model != base.biophys) throw std::invalid_argument("EenObjective: dataset and model kinds differ");
}

Var EenObjective::batch_loss(ad::Tape& tape, const NetBinding& een, const Var& scalar, const Batch& batch,
                             const std::vector<int>& cutoffs) const {
  const NetBinding bn = bind(tape, base_.net, false);
  AdaptCore core(tape, base_, bn, een, scalar, een_.delta_scale, batch.cultivars);
  const std::size_t b = batch.size();
  Eigen::VectorXd err = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(b));
  std::vector<bool> visible(b);
  for (int t = 0; t < batch.days; ++t) {
    core.step(tape.constant(batch.inputs[static_cast<std::size_t>(t)]), batch.tmean.col(t), err);
    for (std::size_t i = 0; i < b; ++i) visible[i] = t < cutoffs[i] && batch.observed(static_cast<Eigen::Index>(i), t);
    err = core.error(batch.target.col(t), visible);
  }
  Eigen::MatrixXd target = batch.target;
  if (base_.biophys == CropModel::Gdd) target = target.cwiseMin(static_cast<double>(kScoredTransitions));
  return masked_mse(core.core().training_output(), target, batch.observed);
}

Var EenObjective::loss(ad::Tape& tape, const std::map<std::string, Var>& params, std::span<const std::size_t> items,
                       Rng& rng) {
  std::vector<std::size_t> idx;
  idx.reserve(items.size());
  for (auto i : items) idx.push_back(train_[i]);
  const Batch batch = make_batch(data_, idx, base_.stats);
  std::vector<int> cutoffs;
  for (int len : batch.lengths) {
    cutoffs.push_back(fixed_cutoff ? *fixed_cutoff : static_cast<int>(rng.below(static_cast<std::uint64_t>(len))));
  }
  const NetBinding een = bind_vars(een_.net, params);
  return batch_loss(tape, een, params.at(kScalar), batch, cutoffs);
}

std::optional<double> EenObjective::validation_loss(const ParamSet& params) {
  if (validation_.empty()) return std::nullopt;
  EenWeights w = een_;
  assign_een(w, params);
  ad::Tape tape;
  tape.set_recording(false);
  const NetBinding een = bind(tape, w.net, false);
  const Batch batch = make_batch(data_, validation_, base_.stats);
  std::vector<int> cutoffs;
  for (int len : batch.lengths) cutoffs.push_back(fixed_cutoff ? *fixed_cutoff : len / 2);
  return batch_loss(tape, een, tape.constant(w.cultivar_scalar), batch, cutoffs).scalar();
}

TrainResult train_een(const DmcModel& base, EenWeights& een, const Dataset& data,
                      const std::vector<std::size_t>& train_idx, const std::vector<std::size_t>& val_idx,
                      const TrainConfig& config, const TrainOutputs& out, const std::optional<fs::path>& resume) {
  EenObjective objective(base, een, data, train_idx, val_idx);
  TrainOutputs o = out;
  o.meta = {{"een", een.to_json()}, {"base", base.to_json()}};
  auto result = train(een_params(een), objective, config, o, resume);
  assign_een(een, result.best_params);
  return result;
}

}  // namespace dmc
