#include "dmc/paramnet.hpp"

#include "dmc/rng.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>

namespace dmc {

std::string to_string(EmbedMode m) {
  switch (m) {
    case EmbedMode::Concat:
      return "concat";
    case EmbedMode::Add:
      return "add";
    case EmbedMode::Mult:
      return "mult";
    case EmbedMode::MultiHead:
      return "multihead";
    case EmbedMode::None:
      return "none";
  }
  return "none";
}

EmbedMode embed_mode_from_string(const std::string& s) {
  for (auto m : {EmbedMode::Concat, EmbedMode::Add, EmbedMode::Mult, EmbedMode::MultiHead, EmbedMode::None}) {
    if (to_string(m) == s) return m;
  }
  throw std::invalid_argument("unknown embedding mode '" + s + "'");
}

int NetConfig::trunk_input_dim() const { return embed_mode == EmbedMode::Concat ? input_dim + embed_dim : input_dim; }

void NetConfig::validate() const {
  auto positive = [](int v, const char* what) {
    if (v <= 0) throw std::invalid_argument(std::string("NetConfig: ") + what + " must be positive");
  };
  positive(input_dim, "input_dim");
  positive(out_dim, "out_dim");
  positive(n_cultivars, "n_cultivars");
  if (recur_dim < 0) throw std::invalid_argument("NetConfig: recur_dim must be non-negative");
  for (int d : pre_dims) positive(d, "pre_dims");
  for (int d : post_dims) positive(d, "post_dims");
  const bool uses_rows = embed_mode == EmbedMode::Concat || embed_mode == EmbedMode::Add || embed_mode == EmbedMode::Mult;
  if (uses_rows && embed_dim <= 0) throw std::invalid_argument("NetConfig: embedding mode needs embed_dim");
  if ((embed_mode == EmbedMode::Add || embed_mode == EmbedMode::Mult) && embed_dim != input_dim) {
    throw std::invalid_argument("NetConfig: add/mult embeddings must match input_dim");
  }
}

nlohmann::json NetConfig::to_json() const {
  return {{"input_dim", input_dim},
          {"embed_mode", to_string(embed_mode)},
          {"embed_dim", embed_dim},
          {"pre_dims", pre_dims},
          {"recur_dim", recur_dim},
          {"post_dims", post_dims},
          {"out_dim", out_dim},
          {"n_cultivars", n_cultivars},
          {"output", output == OutputActivation::Tanh ? "tanh" : "identity"},
          {"bias", bias}};
}

NetConfig NetConfig::from_json(const nlohmann::json& j) {
  NetConfig c;
  c.input_dim = j.at("input_dim").get<int>();
  c.embed_mode = embed_mode_from_string(j.value("embed_mode", "concat"));
  c.embed_dim = j.value("embed_dim", 0);
  c.pre_dims = j.value("pre_dims", c.pre_dims);
  c.recur_dim = j.value("recur_dim", c.recur_dim);
  c.post_dims = j.value("post_dims", c.post_dims);
  c.out_dim = j.at("out_dim").get<int>();
  c.n_cultivars = j.value("n_cultivars", 1);
  c.output = j.value("output", "tanh") == "tanh" ? OutputActivation::Tanh : OutputActivation::Identity;
  c.bias = j.value("bias", true);
  c.validate();
  return c;
}

NetConfig NetConfig::paper(int input_dim, int out_dim, int n_cultivars, EmbedMode mode) {
  NetConfig c;
  c.input_dim = input_dim;
  c.out_dim = out_dim;
  c.n_cultivars = n_cultivars;
  c.embed_mode = mode;
  c.embed_dim = (mode == EmbedMode::MultiHead || mode == EmbedMode::None) ? 0 : input_dim;
  c.validate();
  return c;
}

NetConfig NetConfig::feed_forward(int input_dim, int out_dim, int n_cultivars, EmbedMode mode) {
  NetConfig c = paper(input_dim, out_dim, n_cultivars, mode);
  c.pre_dims = {64, 64, 64};
  c.recur_dim = 0;
  c.post_dims = {};
  return c;
}

bool operator==(const NetConfig& a, const NetConfig& b) { return a.to_json() == b.to_json(); }

// ---------------------------------------------------------------------------

const Eigen::MatrixXd& NetWeights::at(const std::string& name) const {
  const auto it = arrays.find(name);
  if (it == arrays.end()) throw std::out_of_range("no weight array '" + name + "'");
  return it->second;
}

Eigen::MatrixXd& NetWeights::at(const std::string& name) {
  const auto it = arrays.find(name);
  if (it == arrays.end()) throw std::out_of_range("no weight array '" + name + "'");
  return it->second;
}

std::size_t NetWeights::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [_, a] : arrays) n += static_cast<std::size_t>(a.size());
  return n;
}

int NetWeights::output_layers() const {
  int n = 0;
  while (has("out" + std::to_string(n) + ".w")) ++n;
  return n;
}

void NetWeights::set_zero() {
  for (auto& [_, a] : arrays) a.setZero();
}

namespace {

Eigen::MatrixXd glorot(Rng& rng, int rows, int cols, int fan_in, int fan_out) {
  const double limit = std::sqrt(6.0 / (fan_in + fan_out));
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = rng.uniform(-limit, limit);
  }
  return m;
}

Eigen::MatrixXd orthogonal(Rng& rng, int n) {
  Eigen::MatrixXd g(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) g(i, j) = rng.normal();
  }
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(n, n);
  // Sign fix so the draw is uniform over the orthogonal group.
  const Eigen::MatrixXd r = qr.matrixQR();
  for (Eigen::Index j = 0; j < n; ++j) {
    if (r(j, j) < 0) q.col(j) *= -1.0;
  }
  return q;
}

}  // namespace

NetWeights init_weights(const NetConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  NetWeights w;
  w.config = config;
  auto add = [&](const std::string& name, Eigen::MatrixXd m) {
    w.names.push_back(name);
    w.arrays.emplace(name, std::move(m));
  };
  auto dense = [&](const std::string& prefix, int in, int out) {
    add(prefix + ".w", glorot(rng, in, out, in, out));
    if (config.bias) add(prefix + ".b", Eigen::MatrixXd::Zero(1, out));
  };

  if (config.embed_dim > 0) {
    add("embedding", glorot(rng, config.n_cultivars, config.embed_dim, config.n_cultivars, config.embed_dim));
  }
  int width = config.trunk_input_dim();
  for (std::size_t i = 0; i < config.pre_dims.size(); ++i) {
    dense("pre" + std::to_string(i), width, config.pre_dims[i]);
    width = config.pre_dims[i];
  }
  if (config.recur_dim > 0) {
    const int h = config.recur_dim;
    Eigen::MatrixXd wx(width, 3 * h), wh(h, 3 * h);
    for (int g = 0; g < 3; ++g) {
      wx.middleCols(g * h, h) = glorot(rng, width, h, width, h);
      wh.middleCols(g * h, h) = orthogonal(rng, h);
    }
    add("gru.wx", std::move(wx));
    add("gru.wh", std::move(wh));
    if (config.bias) {
      add("gru.bx", Eigen::MatrixXd::Zero(1, 3 * h));
      add("gru.bh", Eigen::MatrixXd::Zero(1, 3 * h));
    }
    width = h;
  }
  for (std::size_t i = 0; i < config.post_dims.size(); ++i) {
    dense("post" + std::to_string(i), width, config.post_dims[i]);
    width = config.post_dims[i];
  }
  for (int head = 0; head < config.n_heads(); ++head) dense("out" + std::to_string(head), width, config.out_dim);
  return w;
}

// ---------------------------------------------------------------------------

const ad::Var& NetBinding::operator[](const std::string& name) const {
  const auto it = vars.find(name);
  if (it == vars.end()) throw std::out_of_range("no bound array '" + name + "'");
  return it->second;
}

std::map<std::string, Eigen::MatrixXd> NetBinding::grads() const {
  std::map<std::string, Eigen::MatrixXd> out;
  for (const auto& [name, v] : vars) out.emplace(name, v.grad());
  return out;
}

NetBinding bind(ad::Tape& tape, const NetWeights& w, bool trainable) {
  NetBinding b;
  b.config = &w.config;
  for (const auto& name : w.names) {
    const auto& a = w.at(name);
    b.vars.emplace(name, trainable ? tape.variable(a) : tape.constant(a));
  }
  return b;
}

ad::Var embed(const NetBinding& net, const ad::Var& features, const std::vector<int>& cultivars) {
  const NetConfig& c = *net.config;
  if (features.cols() != c.input_dim) {
    throw std::invalid_argument("feature dimension " + std::to_string(features.cols()) + " does not match network input " +
                                std::to_string(c.input_dim));
  }
  for (int id : cultivars) {
    if (id < 0 || id >= c.n_cultivars) throw std::out_of_range("unknown cultivar id " + std::to_string(id));
  }
  if (c.embed_mode == EmbedMode::MultiHead || c.embed_mode == EmbedMode::None) return features;
  const ad::Var rows = ad::gather_rows(net["embedding"], cultivars);
  switch (c.embed_mode) {
    case EmbedMode::Concat:
      return ad::concat_cols({features, rows});
    case EmbedMode::Add:
      return features + rows;
    case EmbedMode::Mult:
      return features * rows;
    default:
      return features;
  }
}

namespace {

ad::Var dense(const NetBinding& net, const std::string& prefix, const ad::Var& x) {
  ad::Var y = ad::matmul(x, net[prefix + ".w"]);
  if (net.config->bias) y = y + net[prefix + ".b"];
  return y;
}

}  // namespace

NetRunner::NetRunner(const NetBinding& net, std::vector<int> cultivars) : net_(&net), cultivars_(std::move(cultivars)) {
  if (cultivars_.empty()) throw std::invalid_argument("NetRunner: empty batch");
  reset();
}

void NetRunner::reset() {
  const auto& c = *net_->config;
  ad::Tape* tape = net_->vars.begin()->second.tape();
  const auto b = static_cast<Eigen::Index>(cultivars_.size());
  h_ = tape->constant(Eigen::MatrixXd::Zero(b, std::max(c.recur_dim, 1)));
}

const Eigen::MatrixXd& NetRunner::hidden() const { return h_.value(); }

void NetRunner::set_hidden(const Eigen::MatrixXd& h) {
  if (h.rows() != h_.rows() || h.cols() != h_.cols()) throw std::invalid_argument("set_hidden: shape mismatch");
  h_ = net_->vars.begin()->second.tape()->constant(h);
}

ad::Var NetRunner::head(const ad::Var& trunk) const {
  const auto& c = *net_->config;
  if (c.n_heads() == 1) return dense(*net_, "out0", trunk);
  const std::set<int> present(cultivars_.begin(), cultivars_.end());
  ad::Var out;
  for (int id : present) {
    ad::Var y = dense(*net_, "out" + std::to_string(id), trunk);
    if (present.size() == 1) return y;
    if (!out.valid()) {
      out = y;
      continue;
    }
    ad::Mask rows(static_cast<Eigen::Index>(cultivars_.size()), 1);
    for (std::size_t i = 0; i < cultivars_.size(); ++i) rows(static_cast<Eigen::Index>(i), 0) = cultivars_[i] == id;
    out = ad::where(rows, y, out);
  }
  return out;
}

ad::Var NetRunner::step(const ad::Var& x) {
  const auto& c = *net_->config;
  const auto& net = *net_;
  if (x.rows() != static_cast<Eigen::Index>(cultivars_.size())) throw std::invalid_argument("NetRunner: batch mismatch");
  ad::Var a = embed(net, x, cultivars_);
  for (std::size_t i = 0; i < c.pre_dims.size(); ++i) a = ad::relu(dense(net, "pre" + std::to_string(i), a));
  if (c.recur_dim > 0) {
    const Eigen::Index h = c.recur_dim;
    ad::Var gx = ad::matmul(a, net["gru.wx"]);
    ad::Var gh = ad::matmul(h_, net["gru.wh"]);
    if (c.bias) {
      gx = gx + net["gru.bx"];
      gh = gh + net["gru.bh"];
    }
    const ad::Var r = ad::sigmoid(ad::slice_cols(gx, 0, h) + ad::slice_cols(gh, 0, h));
    const ad::Var z = ad::sigmoid(ad::slice_cols(gx, h, h) + ad::slice_cols(gh, h, h));
    const ad::Var n = ad::tanh(ad::slice_cols(gx, 2 * h, h) + r * ad::slice_cols(gh, 2 * h, h));
    h_ = (1.0 - z) * n + z * h_;
    a = h_;
  }
  for (std::size_t i = 0; i < c.post_dims.size(); ++i) a = ad::relu(dense(net, "post" + std::to_string(i), a));
  trunk_ = a;
  ad::Var y = head(a);
  return c.output == OutputActivation::Tanh ? ad::tanh(y) : y;
}

std::vector<ad::Var> NetRunner::run(const std::vector<ad::Var>& inputs) {
  std::vector<ad::Var> out;
  out.reserve(inputs.size());
  for (const auto& x : inputs) out.push_back(step(x));
  return out;
}

Eigen::MatrixXd forward(const NetWeights& w, const Eigen::MatrixXd& inputs, int cultivar) {
  ad::Tape tape;
  tape.set_recording(false);
  const NetBinding net = bind(tape, w, false);
  NetRunner runner(net, {cultivar});
  Eigen::MatrixXd out(inputs.rows(), w.config.out_dim);
  for (Eigen::Index t = 0; t < inputs.rows(); ++t) {
    out.row(t) = runner.step(tape.constant(inputs.row(t))).value();
  }
  return out;
}

Eigen::MatrixXd forward_windowed(const NetWeights& w, const Eigen::MatrixXd& inputs, int cultivar, int k) {
  if (k < 1) throw std::invalid_argument("forward_windowed: window must be at least 1");
  ad::Tape tape;
  tape.set_recording(false);
  const NetBinding net = bind(tape, w, false);
  Eigen::MatrixXd out(inputs.rows(), w.config.out_dim);
  for (Eigen::Index t = 0; t < inputs.rows(); ++t) {
    NetRunner runner(net, {cultivar});
    ad::Var y;
    for (Eigen::Index s = std::max<Eigen::Index>(0, t - k + 1); s <= t; ++s) y = runner.step(tape.constant(inputs.row(s)));
    out.row(t) = y.value();
  }
  return out;
}

ad::Var rescale(const ad::Var& raw, const ParamSpec& spec) {
  if (raw.cols() != static_cast<Eigen::Index>(spec.size())) throw std::invalid_argument("rescale: dimension mismatch");
  ad::Tape& tape = *raw.tape();
  const Eigen::MatrixXd mins = spec.mins().transpose();
  const Eigen::MatrixXd widths = (spec.maxs() - spec.mins()).transpose();
  return (ad::clamp(raw, -1.0, 1.0) + 1.0) * 0.5 * tape.constant(widths) + tape.constant(mins);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'D', 'M', 'C', 'C', 'K', 'P', 'T', '\n'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

template <class T>
void put_le(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T get_le(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw std::runtime_error("truncated checkpoint");
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  nlohmann::json header;
  header["meta"] = ck.meta;
  header["arrays"] = nlohmann::json::array();
  for (const auto& name : ck.names) {
    const auto& a = ck.arrays.at(name);
    header["arrays"].push_back({{"name", name}, {"rows", a.rows()}, {"cols", a.cols()}});
  }
  const std::string text = header.dump();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(kMagic, sizeof kMagic);
    put_le<std::uint32_t>(out, kVersion);
    put_le<std::uint64_t>(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& name : ck.names) {
      const auto& a = ck.arrays.at(name);
      // Row-major order.
      for (Eigen::Index i = 0; i < a.rows(); ++i) {
        for (Eigen::Index j = 0; j < a.cols(); ++j) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(a(i, j)));
      }
    }
    if (!out) throw std::runtime_error("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof magic) != 0) throw std::runtime_error(path.string() + " is not a checkpoint");
  const auto version = get_le<std::uint32_t>(in);
  if (version != kVersion) throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  const auto len = get_le<std::uint64_t>(in);
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw std::runtime_error("truncated checkpoint header");
  const auto header = nlohmann::json::parse(text);
  Checkpoint ck;
  ck.meta = header.at("meta");
  for (const auto& e : header.at("arrays")) {
    const auto name = e.at("name").get<std::string>();
    Eigen::MatrixXd a(e.at("rows").get<Eigen::Index>(), e.at("cols").get<Eigen::Index>());
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
      for (Eigen::Index j = 0; j < a.cols(); ++j) a(i, j) = std::bit_cast<double>(get_le<std::uint64_t>(in));
    }
    ck.names.push_back(name);
    ck.arrays.emplace(name, std::move(a));
  }
  return ck;
}

Checkpoint to_checkpoint(const NetWeights& w, const std::string& prefix) {
  Checkpoint ck;
  ck.meta["net"] = w.config.to_json();
  for (const auto& name : w.names) {
    ck.names.push_back(prefix + name);
    ck.arrays.emplace(prefix + name, w.at(name));
  }
  return ck;
}

NetWeights weights_from_checkpoint(const Checkpoint& ck, const nlohmann::json& config, const std::string& prefix) {
  NetWeights w = init_weights(NetConfig::from_json(config), 0);
  for (const auto& name : w.names) {
    const auto it = ck.arrays.find(prefix + name);
    if (it == ck.arrays.end()) throw std::runtime_error("checkpoint lacks array '" + prefix + name + "'");
    auto& dst = w.at(name);
    if (it->second.rows() != dst.rows() || it->second.cols() != dst.cols()) {
      throw std::runtime_error("checkpoint array '" + prefix + name + "' has the wrong shape");
    }
    dst = it->second;
  }
  return w;
}

void save_weights(const std::filesystem::path& path, const NetWeights& w, const nlohmann::json& extra) {
  Checkpoint ck = to_checkpoint(w);
  if (!extra.is_null()) ck.meta["extra"] = extra;
  save_checkpoint(path, ck);
}

NetWeights load_weights(const std::filesystem::path& path, nlohmann::json* extra) {
  const Checkpoint ck = load_checkpoint(path);
  if (extra) *extra = ck.meta.value("extra", nlohmann::json());
  return weights_from_checkpoint(ck, ck.meta.at("net"));
}

}  // namespace dmc
