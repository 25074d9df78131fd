#include "dmc/gradtrain.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>

namespace dmc {

namespace fs = std::filesystem;
using ad::Var;

// ---------------------------------------------------------------------------
// Losses

Var masked_mse(const Var& pred, const Var& target, const ad::Mask& mask) {
  ad::Tape& tape = *pred.tape();
  if (mask.rows() != pred.rows() || mask.cols() != pred.cols()) throw std::invalid_argument("masked_mse: mask shape");
  const auto n = mask.count();
  if (n == 0) return tape.constant(0.0);
  const Var sq = ad::square(pred - target);
  const Var kept = ad::where(mask, sq, tape.constant(Eigen::MatrixXd::Zero(pred.rows(), pred.cols())));
  return ad::sum(kept) * (1.0 / static_cast<double>(n));
}

Var masked_mse(const Var& pred, const Eigen::MatrixXd& target, const ad::Mask& mask) {
  return masked_mse(pred, pred.tape()->constant(target), mask);
}

Var pinn_loss(const Var& pred, const Eigen::MatrixXd& target, const Eigen::MatrixXd& biophys, const ad::Mask& mask,
              double p) {
  if (p < 0.0 || p > 1.0) throw std::invalid_argument("pinn_loss: p must lie in [0, 1]");
  return (1.0 - p) * masked_mse(pred, target, mask) + p * masked_mse(pred, biophys, mask);
}

Var cross_entropy(const Var& logits, const std::vector<int>& target, const std::vector<bool>& mask) {
  const auto n = logits.rows(), c = logits.cols();
  if (static_cast<Eigen::Index>(target.size()) != n || static_cast<Eigen::Index>(mask.size()) != n) {
    throw std::invalid_argument("cross_entropy: length mismatch");
  }
  Eigen::MatrixXd pick = Eigen::MatrixXd::Zero(n, c);
  double count = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!mask[static_cast<std::size_t>(i)]) continue;
    const int k = target[static_cast<std::size_t>(i)];
    if (k < 0 || k >= c) throw std::out_of_range("cross_entropy: class index out of range");
    pick(i, k) = 1.0;
    count += 1;
  }
  if (count == 0) return logits.tape()->constant(0.0);
  return ad::sum(ad::scale(ad::log_softmax(logits), pick)) * (-1.0 / count);
}

// ---------------------------------------------------------------------------
// Finite differences

FdReport finite_diff_check(const ScalarFn& f, const std::vector<Eigen::MatrixXd>& point, std::uint64_t seed, int coords,
                           double eps) {
  std::vector<Eigen::MatrixXd> grads;
  {
    ad::Tape tape;
    std::vector<Var> leaves;
    for (const auto& p : point) leaves.push_back(tape.variable(p));
    const Var root = f(tape, leaves);
    tape.backward(root);
    for (const auto& l : leaves) grads.push_back(l.grad());
  }
  auto eval = [&](const std::vector<Eigen::MatrixXd>& x) {
    ad::Tape tape;
    tape.set_recording(false);
    std::vector<Var> leaves;
    for (const auto& p : x) leaves.push_back(tape.constant(p));
    return f(tape, leaves).scalar();
  };

  std::vector<std::pair<std::size_t, Eigen::Index>> all;
  for (std::size_t a = 0; a < point.size(); ++a) {
    for (Eigen::Index i = 0; i < point[a].size(); ++i) all.emplace_back(a, i);
  }
  Rng rng(seed);
  rng.shuffle(all.begin(), all.end());

  FdReport report;
  const double f0 = eval(point);
  auto x = point;
  for (const auto& [a, i] : all) {
    if (report.checked >= coords) break;
    const double orig = x[a].data()[i];
    std::optional<double> fd;
    // A kink inside the step spoils the central difference; shrink the step until
    // both one-sided slopes agree to the accuracy being checked.
    double h = eps;
    for (int shrink = 0; shrink < 4; ++shrink, h /= 10.0) {
      x[a].data()[i] = orig + h;
      const double fp = eval(x);
      x[a].data()[i] = orig - h;
      const double fm = eval(x);
      x[a].data()[i] = orig;
      const double right = (fp - f0) / h, left = (f0 - fm) / h;
      const double roundoff = 4.0 * std::numeric_limits<double>::epsilon() * (std::abs(f0) + 1.0) / h;
      if (std::abs(right - left) <= 1e-5 * (std::abs(right) + std::abs(left)) + roundoff) {
        fd = (fp - fm) / (2.0 * h);
        break;
      }
    }
    if (!fd) {
      ++report.excluded;
      report.excluded_coords.emplace_back(a, i);
      continue;
    }
    const double g = grads[a].data()[i];
    report.max_rel_error = std::max(report.max_rel_error, std::abs(g - *fd) / (std::abs(*fd) + 1e-8));
    ++report.checked;
  }
  return report;
}

// ---------------------------------------------------------------------------
// Optimizer

double global_norm(const GradSet& g) {
  double s = 0;
  for (const auto& [_, a] : g) s += a.squaredNorm();
  return std::sqrt(s);
}

double clip_global_norm(GradSet& g, double max_norm) {
  const double norm = global_norm(g);
  if (norm > max_norm && norm > 0) {
    const double k = max_norm / norm;
    for (auto& [_, a] : g) a *= k;
  }
  return norm;
}

void Adam::step(ParamSet& params, const GradSet& grads) {
  ++step_count;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
  for (auto& [name, p] : params) {
    const auto it = grads.find(name);
    if (it == grads.end()) continue;
    const auto& g = it->second;
    auto& mm = m[name];
    auto& vv = v[name];
    if (mm.size() == 0) {
      mm = Eigen::MatrixXd::Zero(p.rows(), p.cols());
      vv = Eigen::MatrixXd::Zero(p.rows(), p.cols());
    }
    mm = beta1 * mm + (1.0 - beta1) * g;
    vv = beta2 * vv + (1.0 - beta2) * g.cwiseProduct(g);
    p.array() -= lr * (mm.array() / c1) / ((vv.array() / c2).sqrt() + eps);
  }
}

bool PlateauScheduler::observe(double loss, double& lr) {
  if (loss < best) {
    best = loss;
    bad_epochs = 0;
    return false;
  }
  if (++bad_epochs >= patience) {
    lr *= factor;
    bad_epochs = 0;
    return true;
  }
  return false;
}

// ---------------------------------------------------------------------------
// Config

nlohmann::json TrainConfig::to_json() const {
  return {{"epochs", epochs},
          {"learning_rate", learning_rate},
          {"batch_size", batch_size},
          {"anneal_factor", anneal_factor},
          {"plateau_patience", plateau_patience},
          {"clip_norm", clip_norm},
          {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j, const TrainConfig& defaults) {
  static const std::set<std::string> known{"epochs",           "learning_rate", "batch_size", "anneal_factor",
                                           "plateau_patience", "clip_norm",     "seed"};
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw std::invalid_argument("unknown training config key '" + key + "'");
  }
  TrainConfig c = defaults;
  c.epochs = j.value("epochs", c.epochs);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.anneal_factor = j.value("anneal_factor", c.anneal_factor);
  c.plateau_patience = j.value("plateau_patience", c.plateau_patience);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  c.seed = j.value("seed", c.seed);
  if (c.epochs < 0 || c.learning_rate <= 0 || c.batch_size <= 0 || c.plateau_patience <= 0 || c.anneal_factor <= 0 ||
      c.anneal_factor > 1) {
    throw std::invalid_argument("training config values out of range");
  }
  return c;
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) { return from_json(j, TrainConfig{}); }

LrPreset lr_preset(const std::string& kind) {
  if (kind == "dmc-mtl" || kind == "dmc-agg" || kind == "dmc-add" || kind == "dmc-mult" || kind == "dmc-multih" ||
      kind == "een") {
    return {1e-4, 12};
  }
  if (kind == "dmc-mtl-main") return {2e-4, 12};
  if (kind == "dmc-stl") return {5e-3, 4};
  if (kind == "deep-mtl" || kind == "pinn" || kind == "residual") return {1e-4, 12};
  if (kind == "temphybrid") return {0.02, 4};
  if (kind == "gd") return {0.1, 4};
  throw std::invalid_argument("no learning-rate preset for '" + kind + "'");
}

// ---------------------------------------------------------------------------
// Training loop

void write_loss_log(const fs::path& path, const std::vector<EpochRecord>& log) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "epoch,train_loss,val_loss,lr\n";
  char buf[128];
  for (const auto& r : log) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,", r.epoch, r.train_loss);
    out << buf;
    if (r.val_loss) {
      std::snprintf(buf, sizeof buf, "%.17g", *r.val_loss);
      out << buf;
    }
    std::snprintf(buf, sizeof buf, ",%.17g\n", r.lr);
    out << buf;
  }
}

std::vector<EpochRecord> read_loss_log(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  std::vector<EpochRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string cell[4];
    for (auto& c : cell) std::getline(ss, c, ',');
    EpochRecord r;
    r.epoch = std::stoi(cell[0]);
    r.train_loss = std::stod(cell[1]);
    if (!cell[2].empty()) r.val_loss = std::stod(cell[2]);
    r.lr = std::stod(cell[3]);
    out.push_back(r);
  }
  return out;
}

ParamSet params_from_checkpoint(const Checkpoint& ck) {
  ParamSet p;
  for (const auto& name : ck.names) {
    if (name.rfind("p/", 0) == 0) p.emplace(name.substr(2), ck.arrays.at(name));
  }
  return p;
}

namespace {

Checkpoint make_checkpoint(const ParamSet& params, const Adam* adam, nlohmann::json meta) {
  Checkpoint ck;
  ck.meta = std::move(meta);
  auto put = [&](const std::string& prefix, const ParamSet& set) {
    for (const auto& [name, a] : set) {
      ck.names.push_back(prefix + name);
      ck.arrays.emplace(prefix + name, a);
    }
  };
  put("p/", params);
  if (adam) {
    put("m/", adam->m);
    put("v/", adam->v);
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

std::uint64_t epoch_seed(std::uint64_t seed, int epoch) {
  return seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(epoch) * 0xBF58476D1CE4E5B9ULL + 1;
}

bool all_finite(const GradSet& g) {
  for (const auto& [_, a] : g) {
    if (!a.allFinite()) return false;
  }
  return true;
}

}  // namespace

TrainResult train(ParamSet params, Objective& objective, const TrainConfig& config, const TrainOutputs& out,
                  const std::optional<fs::path>& resume) {
  Adam adam;
  adam.lr = config.learning_rate;
  PlateauScheduler sched{config.anneal_factor, config.plateau_patience};
  TrainResult result;
  std::optional<double> best_val;
  int start_epoch = 0;
  const bool persist = !out.dir.empty();
  if (persist) {
    fs::create_directories(out.dir);
    result.final_checkpoint = out.dir / (out.name + ".final.ckpt");
    result.best_checkpoint = out.dir / (out.name + ".best.ckpt");
  }
  const fs::path log_path = out.dir / (out.name + ".loss.csv");

  result.best_params = params;
  if (resume) {
    const Checkpoint ck = load_checkpoint(*resume);
    const auto& st = ck.meta.at("train");
    params = prefixed(ck, "p/");
    adam.m = prefixed(ck, "m/");
    adam.v = prefixed(ck, "v/");
    adam.step_count = st.at("adam_steps").get<long>();
    adam.lr = st.at("lr").get<double>();
    sched.best = st.at("plateau_best").is_null() ? std::numeric_limits<double>::infinity()
                                                 : st.at("plateau_best").get<double>();
    sched.bad_epochs = st.at("plateau_bad").get<int>();
    start_epoch = st.at("epoch").get<int>();
    if (!st.at("best_val").is_null()) best_val = st.at("best_val").get<double>();
    const fs::path resume_log = resume->parent_path() / (out.name + ".loss.csv");
    if (fs::exists(resume_log)) {
      result.log = read_loss_log(resume_log);
      std::erase_if(result.log, [&](const EpochRecord& r) { return r.epoch > start_epoch; });
    }
    const fs::path best_path = resume->parent_path() / (out.name + ".best.ckpt");
    result.best_params = fs::exists(best_path) ? prefixed(load_checkpoint(best_path), "p/") : params;
  }

  auto meta_for = [&](int epoch, bool diverged) {
    nlohmann::json m;
    m["model"] = out.meta;
    m["config"] = config.to_json();
    m["train"] = {{"epoch", epoch},
                  {"lr", adam.lr},
                  {"adam_steps", adam.step_count},
                  {"plateau_best", std::isfinite(sched.best) ? nlohmann::json(sched.best) : nlohmann::json()},
                  {"plateau_bad", sched.bad_epochs},
                  {"best_val", best_val ? nlohmann::json(*best_val) : nlohmann::json()},
                  {"diverged", diverged}};
    return m;
  };
  auto save_final = [&](int epoch, bool diverged) {
    if (!persist) return;
    save_checkpoint(result.final_checkpoint, make_checkpoint(params, &adam, meta_for(epoch, diverged)));
    write_loss_log(log_path, result.log);
  };

  const std::size_t n = objective.train_size();
  if (n == 0) throw std::invalid_argument("train: empty training set");
  std::vector<std::size_t> order(n);
  for (int epoch = start_epoch + 1; epoch <= config.epochs; ++epoch) {
    Rng rng(epoch_seed(config.seed, epoch));
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order.begin(), order.end());
    const ParamSet last_good = params;
    const Adam adam_before = adam;
    double total = 0;
    try {
      for (std::size_t first = 0; first < n; first += static_cast<std::size_t>(config.batch_size)) {
        const std::size_t count = std::min<std::size_t>(static_cast<std::size_t>(config.batch_size), n - first);
        const std::span<const std::size_t> items(order.data() + first, count);
        ad::Tape tape;
        std::map<std::string, Var> vars;
        for (const auto& [name, a] : params) vars.emplace(name, tape.variable(a));
        const Var loss = objective.loss(tape, vars, items, rng);
        if (!std::isfinite(loss.scalar())) throw ad::NonFiniteError("loss");
        tape.backward(loss);
        GradSet grads;
        for (const auto& [name, v] : vars) grads.emplace(name, v.grad());
        if (!all_finite(grads)) throw ad::NonFiniteError("gradient");
        clip_global_norm(grads, config.clip_norm);
        adam.step(params, grads);
        total += loss.scalar() * static_cast<double>(count);
      }
    } catch (const ad::NonFiniteError& e) {
      params = last_good;
      adam = adam_before;
      save_final(epoch - 1, true);
      result.final_params = params;
      throw DivergenceError(std::string("training diverged in epoch ") + std::to_string(epoch) + ": " + e.what(), epoch);
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = total / static_cast<double>(n);
    rec.lr = adam.lr;
    rec.val_loss = objective.validation_loss(params);
    if (rec.val_loss && (!best_val || *rec.val_loss < *best_val)) {
      best_val = rec.val_loss;
      result.best_params = params;
      if (persist) save_checkpoint(result.best_checkpoint, make_checkpoint(params, nullptr, meta_for(epoch, false)));
    }
    sched.observe(rec.train_loss, adam.lr);
    result.log.push_back(rec);
  }
  if (!best_val) {
    result.best_params = params;
    if (persist) {
      save_checkpoint(result.best_checkpoint, make_checkpoint(params, nullptr, meta_for(config.epochs, false)));
    }
  }
  save_final(std::max(config.epochs, start_epoch), false);
  result.final_params = std::move(params);
  return result;
}

ParamSet to_params(const NetWeights& w, const std::string& prefix) {
  ParamSet p;
  for (const auto& name : w.names) p.emplace(prefix + name, w.at(name));
  return p;
}

void assign_params(NetWeights& w, const ParamSet& p, const std::string& prefix) {
  for (const auto& name : w.names) {
    const auto it = p.find(prefix + name);
    if (it == p.end()) throw std::out_of_range("parameter set lacks '" + prefix + name + "'");
    w.at(name) = it->second;
  }
}

std::map<std::string, Var> subset_vars(const std::map<std::string, Var>& all, const std::string& prefix) {
  std::map<std::string, Var> out;
  for (const auto& [name, v] : all) {
    if (name.rfind(prefix, 0) == 0) out.emplace(name.substr(prefix.size()), v);
  }
  return out;
}

NetBinding bind_vars(const NetWeights& w, const std::map<std::string, Var>& vars, const std::string& prefix) {
  NetBinding b;
  b.config = &w.config;
  for (const auto& name : w.names) {
    const auto it = vars.find(prefix + name);
    if (it == vars.end()) throw std::out_of_range("no variable for '" + prefix + name + "'");
    b.vars.emplace(name, it->second);
  }
  return b;
}

// ---------------------------------------------------------------------------
// Static calibration

Var calibration_loss(ad::Tape& tape, const Batch& batch, const Var& params, CropModel model, const GddOptions& gdd) {
  const auto B = static_cast<Eigen::Index>(batch.size());
  auto kernel = make_kernel(model, tape, batch.size(), gdd);
  for (int t = 0; t < batch.days; ++t) kernel->step(params, batch.tmean.col(t));
  if (model == CropModel::Ferguson) return masked_mse(kernel->training_output(), batch.target, batch.observed);

  const auto& g = static_cast<const GddKernel&>(*kernel);
  // Onsets registered on day d are targeted at the middle of (d - 1, d].
  constexpr int kScored = 3;
  Eigen::MatrixXd target = Eigen::MatrixXd::Zero(B, kScored);
  ad::Mask mask = ad::Mask::Constant(B, kScored, false);
  for (Eigen::Index r = 0; r < B; ++r) {
    for (int k = 0; k < kScored; ++k) {
      if (batch.onsets(r, k) < 0) continue;
      target(r, k) = batch.onsets(r, k) - 0.5;
      mask(r, k) = true;
    }
  }
  (void)tape;
  return masked_mse(ad::slice_cols(g.crossing_times(), 0, kScored), target, mask);
}

namespace {

class CalibrationObjective final : public Objective {
 public:
  CalibrationObjective(const Dataset& data, std::vector<std::size_t> seasons, const ParamSpec& spec,
                       const NormStats& stats, GddOptions gdd)
      : data_(data), seasons_(std::move(seasons)), spec_(spec), stats_(stats), gdd_(gdd) {}

  std::size_t train_size() const override { return seasons_.size(); }

  Var loss(ad::Tape& tape, const std::map<std::string, Var>& params, std::span<const std::size_t> items,
           Rng&) override {
    std::vector<std::size_t> idx;
    for (auto i : items) idx.push_back(seasons_[i]);
    const Batch batch = make_batch(data_, idx, stats_);
    const Var raw = ad::expand(ad::tanh(params.at("logits")), static_cast<Eigen::Index>(idx.size()),
                               static_cast<Eigen::Index>(spec_.size()));
    return calibration_loss(tape, batch, rescale(raw, spec_), data_.model, gdd_);
  }

 private:
  const Dataset& data_;
  std::vector<std::size_t> seasons_;
  const ParamSpec& spec_;
  const NormStats& stats_;
  GddOptions gdd_;
};

}  // namespace

GdCalibration gd_calibrate(const Dataset& train_data, const ParamSpec& spec, const TrainConfig& config,
                           const GddOptions& gdd) {
  GdCalibration out;
  out.model = train_data.model;
  const NormStats stats = fit_norm_stats(train_data.weather());
  for (int c = 0; c < static_cast<int>(train_data.cultivars.size()); ++c) {
    const auto seasons = train_data.seasons_of(c);
    ParamSet init{{"logits", Eigen::MatrixXd::Zero(1, static_cast<Eigen::Index>(spec.size()))}};
    if (seasons.empty()) {
      out.params.push_back(spec.rescale(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(spec.size()))));
      out.logs.emplace_back();
      continue;
    }
    CalibrationObjective obj(train_data, seasons, spec, stats, gdd);
    TrainConfig cfg = config;
    cfg.seed = config.seed + static_cast<std::uint64_t>(c);
    const auto result = train(init, obj, cfg);
    const Eigen::VectorXd raw = result.final_params.at("logits").row(0).transpose().array().tanh().matrix();
    out.params.push_back(spec.rescale(raw));
    out.logs.push_back(result.log);
  }
  return out;
}

}  // namespace dmc
