#include "dmc/biophys.hpp"

#include <algorithm>
#include <stdexcept>

namespace dmc {

using ad::Var;

namespace {

constexpr double kMinExtrapolationRate = 0.5;  // degC.day per day

Eigen::ArrayXi zeros_i(std::size_t n) { return Eigen::ArrayXi::Zero(static_cast<Eigen::Index>(n)); }

Var col(const Var& params, int i) { return ad::slice_cols(params, i, 1); }

ad::Mask as_mask(const Eigen::Array<bool, Eigen::Dynamic, 1>& m) { return ad::Mask(m); }

}  // namespace

CropStateSeries CropStateSeries::predicted(CropModel m, std::vector<double> v) {
  CropStateSeries s;
  s.model = m;
  s.observed.assign(v.size(), true);
  s.values = std::move(v);
  if (m == CropModel::Gdd) s.onsets = onsets_from_stages(s.values);
  return s;
}

std::array<std::optional<int>, kNumTransitions> onsets_from_stages(std::span<const double> stages) {
  std::array<std::optional<int>, kNumTransitions> out{};
  for (std::size_t t = 0; t < stages.size(); ++t) {
    for (int k = 0; k < kNumTransitions; ++k) {
      if (!out[k] && stages[t] >= k + 1 - 1e-9) out[k] = static_cast<int>(t);
    }
  }
  return out;
}

double gdd_response(double tmean, const GddParams& p) {
  return std::min(std::max(tmean - p.tbasem, 0.0), p.teffmx);
}

Var gdd_response(const Var& tmean, const Var& tbasem, const Var& teffmx) {
  return ad::minimum(ad::maximum(tmean - tbasem, 0.0), teffmx);
}

// ---------------------------------------------------------------------------
// GDD kernel

GddKernel::GddKernel(ad::Tape& tape, std::size_t batch, GddOptions options)
    : tape_(&tape), batch_(batch), options_(options), stage_(zeros_i(batch)) {
  const auto b = static_cast<Eigen::Index>(batch);
  acc_ = tape.constant(Eigen::MatrixXd::Zero(b, 1));
  dd_sum_ = tape.constant(Eigen::MatrixXd::Zero(b, 1));
  for (auto& c : crossing_) c = tape.constant(Eigen::MatrixXd::Zero(b, 1));
  crossed_.setConstant(b, kNumTransitions, false);
  onset_.resize(batch);
}

GddKernel::GddKernel(ad::Tape& tape, const KernelSnapshot& s, GddOptions options)
    : tape_(&tape), batch_(static_cast<std::size_t>(s.stage.size())), options_(options) {
  if (s.model != CropModel::Gdd) throw std::invalid_argument("snapshot is not a phenology state");
  start_day_ = day_ = s.day;
  stage_ = s.stage;
  acc_ = tape.constant(s.acc);
  dd_sum_ = tape.constant(s.dd_sum);
  days_seen_ = s.days_seen;
  for (int k = 0; k < kNumTransitions; ++k) crossing_[k] = tape.constant(s.crossing.col(k));
  crossed_ = s.crossed;
  onset_.resize(batch_);
  for (std::size_t i = 0; i < batch_; ++i) {
    for (int k = 0; k < kNumTransitions; ++k) {
      const int d = s.onset_day(static_cast<Eigen::Index>(i), k);
      if (d >= 0) onset_[i][k] = d;
    }
  }
}

Var GddKernel::threshold(const Var& params, int transition) const {
  switch (transition) {
    case 0:
      return options_.pool_emergence ? col(params, 2) + col(params, 3) : col(params, 3);
    case 1:
      return col(params, 4);
    case 2:
      return col(params, 5);
    default:
      return col(params, 6);
  }
}

void GddKernel::step(const Var& params, const Eigen::VectorXd& tmean) {
  const auto b = static_cast<Eigen::Index>(batch_);
  if (params.rows() != b || params.cols() != 7) throw std::invalid_argument("GddKernel::step: params must be B x 7");
  if (tmean.size() != b) throw std::invalid_argument("GddKernel::step: tmean must have B entries");

  step_response(params, gdd_response(tape_->constant(tmean), col(params, 0), col(params, 1)));
}

void GddKernel::step_response(const Var& params, const Var& dd) {
  const auto b = static_cast<Eigen::Index>(batch_);
  if (params.rows() != b || params.cols() != 7) throw std::invalid_argument("GddKernel::step: params must be B x 7");
  if (dd.rows() != b || dd.cols() != 1) throw std::invalid_argument("GddKernel::step: response must be B x 1");
  const Var acc_new = acc_ + dd;

  std::array<Var, kNumTransitions> thr_k;
  for (int k = 0; k < kNumTransitions; ++k) thr_k[k] = threshold(params, k);
  Var thr = thr_k[3];
  for (int k = 2; k >= 0; --k) thr = ad::where(as_mask(stage_ == k), thr_k[k], thr);

  const Eigen::Array<bool, Eigen::Dynamic, 1> cross =
      (acc_new.value().array() >= thr.value().array()) && (stage_ < kNumTransitions);

  if (cross.any()) {
    const Var phi = ad::clamp((thr - acc_) / ad::maximum(dd, 1e-12), 0.0, 1.0);
    const Var when = phi + static_cast<double>(day_ - 1);
    for (int k = 0; k < kNumTransitions; ++k) {
      const Eigen::Array<bool, Eigen::Dynamic, 1> hit = cross && (stage_ == k);
      if (!hit.any()) continue;
      crossing_[k] = ad::where(as_mask(hit), when, crossing_[k]);
      crossed_.col(k) = crossed_.col(k) || hit;
      for (Eigen::Index i = 0; i < b; ++i) {
        if (hit[i]) onset_[static_cast<std::size_t>(i)][k] = day_;
      }
    }
    const Var reset = options_.carry_overshoot ? acc_new - thr : acc_new * 0.0;
    acc_ = ad::where(as_mask(cross), reset, acc_new);
    stage_ += cross.cast<int>();
  } else {
    acc_ = acc_new;
  }

  dd_sum_ = dd_sum_ + dd;
  ++days_seen_;
  last_params_ = params;
  stage_history_.push_back(stage_);
  ++day_;
}

Var GddKernel::crossing_times() const {
  if (!last_params_.valid()) throw std::logic_error("crossing_times: kernel has not been stepped");
  const auto b = static_cast<Eigen::Index>(batch_);
  std::vector<Var> cols;
  cols.reserve(kNumTransitions);
  const Var rate = ad::maximum(dd_sum_ * (1.0 / std::max(days_seen_, 1)), kMinExtrapolationRate);
  Var pending = tape_->constant(Eigen::MatrixXd::Zero(b, 1));
  for (int k = 0; k < kNumTransitions; ++k) {
    // Thresholds of transitions not yet completed accumulate into the distance still to go.
    Eigen::MatrixXd open = (stage_ <= k).cast<double>().matrix();
    pending = pending + ad::scale(threshold(last_params_, k), open);
    if (crossed_.col(k).all()) {
      cols.push_back(crossing_[k]);
      continue;
    }
    const Var extrap = (pending - acc_) / rate + static_cast<double>(day_ - 1);
    cols.push_back(ad::where(as_mask(crossed_.col(k)), crossing_[k], extrap));
  }
  return ad::concat_cols(cols);
}

Var GddKernel::soft_stage(int transitions) const {
  if (transitions < 1 || transitions > kNumTransitions) throw std::invalid_argument("soft_stage: transitions out of range");
  const auto b = static_cast<Eigen::Index>(batch_);
  const auto t = static_cast<Eigen::Index>(stage_history_.size());
  Eigen::MatrixXd days(b, t);
  for (Eigen::Index j = 0; j < t; ++j) days.col(j).setConstant(static_cast<double>(start_day_ + j) + 0.5);
  const Var d = tape_->constant(days);
  const Var cross = crossing_times();
  Var out;
  for (int k = 0; k < transitions; ++k) {
    const Var ramp = ad::clamp(d - ad::slice_cols(cross, k, 1), 0.0, 1.0);
    out = out.valid() ? out + ramp : ramp;
  }
  return out;
}

Var GddKernel::soft_transition(int k) const {
  if (k < 0 || k >= kNumTransitions) throw std::invalid_argument("soft_transition: transition out of range");
  const auto b = static_cast<Eigen::Index>(batch_);
  const auto t = static_cast<Eigen::Index>(stage_history_.size());
  Eigen::MatrixXd days(b, t);
  for (Eigen::Index j = 0; j < t; ++j) days.col(j).setConstant(static_cast<double>(start_day_ + j) + 0.5);
  return ad::clamp(tape_->constant(days) - ad::slice_cols(crossing_times(), k, 1), 0.0, 1.0);
}

Eigen::MatrixXd GddKernel::observable() const {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(batch_), static_cast<Eigen::Index>(stage_history_.size()));
  for (std::size_t j = 0; j < stage_history_.size(); ++j) {
    out.col(static_cast<Eigen::Index>(j)) = stage_history_[j].cast<double>().matrix();
  }
  return out;
}

Eigen::VectorXd GddKernel::current_observable() const { return stage_.cast<double>().matrix(); }

KernelSnapshot GddKernel::snapshot() const {
  KernelSnapshot s;
  s.model = CropModel::Gdd;
  s.day = day_;
  s.started = true;
  s.stage = stage_;
  s.acc = acc_.value();
  s.dd_sum = dd_sum_.value();
  s.days_seen = days_seen_;
  const auto b = static_cast<Eigen::Index>(batch_);
  s.crossing.resize(b, kNumTransitions);
  for (int k = 0; k < kNumTransitions; ++k) s.crossing.col(k) = crossing_[k].value();
  s.crossed = crossed_;
  s.onset_day.setConstant(b, kNumTransitions, -1);
  for (Eigen::Index i = 0; i < b; ++i) {
    for (int k = 0; k < kNumTransitions; ++k) {
      if (onset_[static_cast<std::size_t>(i)][k]) s.onset_day(i, k) = *onset_[static_cast<std::size_t>(i)][k];
    }
  }
  return s;
}

// ---------------------------------------------------------------------------
// Ferguson kernel

FergusonKernel::FergusonKernel(ad::Tape& tape, std::size_t batch) : tape_(&tape), batch_(batch) {
  eco_.setConstant(static_cast<Eigen::Index>(batch), false);
}

FergusonKernel::FergusonKernel(ad::Tape& tape, const KernelSnapshot& s)
    : tape_(&tape), batch_(static_cast<std::size_t>(s.eco.size())) {
  if (s.model != CropModel::Ferguson) throw std::invalid_argument("snapshot is not a hardiness state");
  day_ = s.day;
  started_ = s.started;
  eco_ = s.eco;
  if (started_) {
    hc_ = tape.constant(s.hc);
    chill_ = tape.constant(s.chill);
  }
}

void FergusonKernel::step_response(const Var& params, const Eigen::VectorXd& tmean, const Var* chill_response) {
  const auto b = static_cast<Eigen::Index>(batch_);
  if (params.rows() != b || params.cols() != 10) {
    throw std::invalid_argument("FergusonKernel::step: params must be B x 10");
  }
  if (tmean.size() != b) throw std::invalid_argument("FergusonKernel::step: tmean must have B entries");
  if (chill_response && (chill_response->rows() != b || chill_response->cols() != 1)) {
    throw std::invalid_argument("FergusonKernel::step: response must be B x 1");
  }

  const Var hcmin = col(params, 1);
  const Var hcmax = col(params, 2);
  if (!started_) {
    hc_ = col(params, 0);
    chill_ = tape_->constant(Eigen::MatrixXd::Zero(b, 1));
    started_ = true;
  }
  const ad::Mask eco = as_mask(eco_);
  const Var base = ad::where(eco, col(params, 4), col(params, 3));
  const Var k_acc = ad::where(eco, col(params, 6), col(params, 5));
  const Var k_deacc = ad::where(eco, col(params, 8), col(params, 7));

  const Var diff = tape_->constant(tmean) - base;
  const Var chilling = chill_response ? *chill_response : ad::minimum(diff, 0.0);
  const Var heating = ad::maximum(diff, 0.0);
  const Var span = hcmin - hcmax;
  const Var acclimation = k_acc * chilling * (1.0 - (hc_ - hcmax) / span);
  const Var deacclimation = k_deacc * heating * (1.0 - (hcmin - hc_) / span);
  hc_ = ad::clamp(hc_ + acclimation + deacclimation, hcmax, hcmin);
  chill_ = chill_ + chilling;
  eco_ = eco_ || (chill_.value().array() <= col(params, 9).value().array());
  history_.push_back(hc_);
  ++day_;
}

Var FergusonKernel::training_output() const {
  if (history_.empty()) throw std::logic_error("training_output: kernel has not been stepped");
  return ad::concat_cols(history_);
}

Eigen::MatrixXd FergusonKernel::observable() const {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(batch_), static_cast<Eigen::Index>(history_.size()));
  for (std::size_t j = 0; j < history_.size(); ++j) out.col(static_cast<Eigen::Index>(j)) = history_[j].value();
  return out;
}

KernelSnapshot FergusonKernel::snapshot() const {
  KernelSnapshot s;
  s.model = CropModel::Ferguson;
  s.day = day_;
  s.started = started_;
  s.eco = eco_;
  if (started_) {
    s.hc = hc_.value();
    s.chill = chill_.value();
  }
  return s;
}

std::unique_ptr<BiophysKernel> make_kernel(CropModel m, ad::Tape& tape, std::size_t batch, GddOptions gdd) {
  if (m == CropModel::Gdd) return std::make_unique<GddKernel>(tape, batch, gdd);
  return std::make_unique<FergusonKernel>(tape, batch);
}

std::unique_ptr<BiophysKernel> resume_kernel(ad::Tape& tape, const KernelSnapshot& s, GddOptions gdd) {
  if (s.model == CropModel::Gdd) return std::make_unique<GddKernel>(tape, s, gdd);
  return std::make_unique<FergusonKernel>(tape, s);
}

// ---------------------------------------------------------------------------
// Single-season API

PhenologyState gdd_step(const PhenologyState& state, const GddParams& p, double tmean, int day,
                        const GddOptions& options) {
  KernelSnapshot s;
  s.model = CropModel::Gdd;
  s.day = day;
  s.started = true;
  s.stage = Eigen::ArrayXi::Constant(1, static_cast<int>(state.stage));
  s.acc = Eigen::VectorXd::Constant(1, state.dd_accum);
  s.dd_sum = Eigen::VectorXd::Zero(1);
  s.crossing = Eigen::MatrixXd::Zero(1, kNumTransitions);
  s.crossed.setConstant(1, kNumTransitions, false);
  s.onset_day.setConstant(1, kNumTransitions, -1);
  for (int k = 0; k < kNumTransitions; ++k) {
    if (state.onset[k]) {
      s.crossed(0, k) = true;
      s.onset_day(0, k) = *state.onset[k];
    }
  }
  ad::Tape tape;
  tape.set_recording(false);
  GddKernel kernel(tape, s, options);
  kernel.step(tape.constant(Eigen::MatrixXd(p.to_vector().transpose())), Eigen::VectorXd::Constant(1, tmean));
  PhenologyState out;
  out.stage = static_cast<Stage>(kernel.stage()[0]);
  out.dd_accum = kernel.dd_accum()[0];
  out.onset = kernel.onsets()[0];
  return out;
}

HardinessState ferguson_step(const HardinessState& state, const FergusonParams& p, double tmean) {
  KernelSnapshot s;
  s.model = CropModel::Ferguson;
  s.started = true;
  s.hc = Eigen::VectorXd::Constant(1, state.hc);
  s.chill = Eigen::VectorXd::Constant(1, state.chill_sum);
  s.eco = Eigen::Array<bool, Eigen::Dynamic, 1>::Constant(1, state.phase == DormancyPhase::Ecodormancy);
  ad::Tape tape;
  tape.set_recording(false);
  FergusonKernel kernel(tape, s);
  kernel.step(tape.constant(Eigen::MatrixXd(p.to_vector().transpose())), Eigen::VectorXd::Constant(1, tmean));
  HardinessState out;
  out.hc = kernel.current_observable()[0];
  out.chill_sum = kernel.chill_sum()[0];
  out.phase = kernel.eco()[0] ? DormancyPhase::Ecodormancy : DormancyPhase::Endodormancy;
  return out;
}

CropStateSeries biophys_rollout(CropModel m, std::span<const double> tmean,
                                const std::vector<Eigen::VectorXd>& params_seq, const GddOptions& options) {
  const std::size_t n = tmean.size();
  if (params_seq.size() != 1 && params_seq.size() != n) {
    throw std::invalid_argument("rollout: parameter sequence must have length 1 or match the season length");
  }
  if (n == 0) return CropStateSeries::predicted(m, {});
  ad::Tape tape;
  tape.set_recording(false);
  auto kernel = make_kernel(m, tape, 1, options);
  Var fixed;
  if (params_seq.size() == 1) fixed = tape.constant(Eigen::MatrixXd(params_seq[0].transpose()));
  for (std::size_t t = 0; t < n; ++t) {
    const Var p = params_seq.size() == 1 ? fixed : tape.constant(Eigen::MatrixXd(params_seq[t].transpose()));
    kernel->step(p, Eigen::VectorXd::Constant(1, tmean[t]));
  }
  const Eigen::MatrixXd obs = kernel->observable();
  std::vector<double> v(obs.data(), obs.data() + obs.size());
  CropStateSeries out = CropStateSeries::predicted(m, std::move(v));
  if (m == CropModel::Gdd) out.onsets = static_cast<GddKernel&>(*kernel).onsets()[0];
  return out;
}

CropStateSeries gdd_rollout(std::span<const double> tmean, const std::vector<GddParams>& params_seq,
                            const GddOptions& options) {
  std::vector<Eigen::VectorXd> seq;
  seq.reserve(params_seq.size());
  for (const auto& p : params_seq) seq.push_back(p.to_vector());
  return biophys_rollout(CropModel::Gdd, tmean, seq, options);
}

CropStateSeries ferguson_rollout(std::span<const double> tmean, const std::vector<FergusonParams>& params_seq) {
  std::vector<Eigen::VectorXd> seq;
  seq.reserve(params_seq.size());
  for (const auto& p : params_seq) seq.push_back(p.to_vector());
  return biophys_rollout(CropModel::Ferguson, tmean, seq);
}

// ---------------------------------------------------------------------------
// Reference implementations

CropStateSeries oracle_gdd(std::span<const double> tmean, const GddParams& p, const GddOptions& options) {
  CropStateSeries out;
  out.model = CropModel::Gdd;
  int stage = 0;
  double acc = 0.0;
  const double thresholds[kNumTransitions] = {options.pool_emergence ? p.tsumem + p.tsum1 : p.tsum1, p.tsum2,
                                              p.tsum3, p.tsum4};
  for (std::size_t t = 0; t < tmean.size(); ++t) {
    double dd = tmean[t] - p.tbasem;
    if (dd < 0.0) dd = 0.0;
    if (dd > p.teffmx) dd = p.teffmx;
    acc += dd;
    if (stage < kNumTransitions && acc >= thresholds[stage]) {
      out.onsets[stage] = static_cast<int>(t);
      if (options.carry_overshoot) {
        acc -= thresholds[stage];
      } else {
        acc = 0.0;
      }
      ++stage;
    }
    out.values.push_back(stage);
  }
  out.observed.assign(out.values.size(), true);
  return out;
}

CropStateSeries oracle_ferguson(std::span<const double> tmean, const FergusonParams& p) {
  CropStateSeries out;
  out.model = CropModel::Ferguson;
  double hc = p.hcinit;
  double chill = 0.0;
  bool eco = false;
  for (const double temp : tmean) {
    double base, k_acc, k_deacc;
    if (eco) {
      base = p.teco;
      k_acc = p.ecacclim;
      k_deacc = p.ecdeacclim;
    } else {
      base = p.tendo;
      k_acc = p.enacclim;
      k_deacc = p.endeacclim;
    }
    const double diff = temp - base;
    double chilling = 0.0, heating = 0.0;
    if (diff < 0.0) {
      chilling = diff;
    } else {
      heating = diff;
    }
    const double span = p.hcmin - p.hcmax;
    const double acclimation = k_acc * chilling * (1.0 - (hc - p.hcmax) / span);
    const double deacclimation = k_deacc * heating * (1.0 - (p.hcmin - hc) / span);
    double next = hc + acclimation + deacclimation;
    if (next < p.hcmax) next = p.hcmax;
    if (next > p.hcmin) next = p.hcmin;
    hc = next;
    chill += chilling;
    if (chill <= p.ecobound) eco = true;
    out.values.push_back(hc);
  }
  out.observed.assign(out.values.size(), true);
  return out;
}

CropStateSeries oracle_rollout(CropModel m, std::span<const double> tmean, const Eigen::VectorXd& p,
                               const GddOptions& options) {
  if (m == CropModel::Gdd) return oracle_gdd(tmean, GddParams::from_vector(p), options);
  return oracle_ferguson(tmean, FergusonParams::from_vector(p));
}

}  // namespace dmc
