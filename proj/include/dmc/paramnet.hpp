#pragma once

// Recurrent parameter network: daily weather features plus a cultivar id in,
// one raw parameter vector per day out.
//
// Layout: dense ReLU layers -> GRU -> dense ReLU layers -> output layer.
// A recur_dim of 0 drops the GRU, which gives the feed-forward variant.

#include "dmc/ad.hpp"
#include "dmc/params.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace dmc {

enum class EmbedMode { Concat, Add, Mult, MultiHead, None };
std::string to_string(EmbedMode m);
EmbedMode embed_mode_from_string(const std::string& s);

enum class OutputActivation { Tanh, Identity };

struct NetConfig {
  int input_dim = 0;
  EmbedMode embed_mode = EmbedMode::Concat;
  /// Size of an embedding row. Equal to input_dim for Concat/Add/Mult, 0 otherwise.
  int embed_dim = 0;
  std::vector<int> pre_dims{256, 512};
  int recur_dim = 1024;
  std::vector<int> post_dims{512, 256};
  int out_dim = 0;
  int n_cultivars = 1;
  OutputActivation output = OutputActivation::Tanh;
  bool bias = true;

  /// Width of the first dense layer's input.
  int trunk_input_dim() const;
  int n_heads() const { return embed_mode == EmbedMode::MultiHead ? n_cultivars : 1; }
  void validate() const;

  nlohmann::json to_json() const;
  static NetConfig from_json(const nlohmann::json& j);

  /// Full-size layout: pre [256, 512], GRU 1024, post [512, 256].
  static NetConfig paper(int input_dim, int out_dim, int n_cultivars, EmbedMode mode = EmbedMode::Concat);
  /// Three 64-unit ReLU layers, no recurrence.
  static NetConfig feed_forward(int input_dim, int out_dim, int n_cultivars, EmbedMode mode = EmbedMode::Concat);
};

bool operator==(const NetConfig& a, const NetConfig& b);

/// Named weight arrays in a fixed order.
struct NetWeights {
  NetConfig config;
  std::vector<std::string> names;
  std::map<std::string, Eigen::MatrixXd> arrays;

  const Eigen::MatrixXd& at(const std::string& name) const;
  Eigen::MatrixXd& at(const std::string& name);
  bool has(const std::string& name) const { return arrays.count(name) > 0; }
  std::size_t parameter_count() const;
  /// Number of output layers (1, or n_cultivars for MultiHead).
  int output_layers() const;
  void set_zero();
};

NetWeights init_weights(const NetConfig& config, std::uint64_t seed);

/// Weight arrays recorded on a tape.
struct NetBinding {
  const NetConfig* config = nullptr;
  std::map<std::string, ad::Var> vars;

  const ad::Var& operator[](const std::string& name) const;
  /// Gradient of every bound array, in the order of `w.names`.
  std::map<std::string, Eigen::MatrixXd> grads() const;
};

/// Trainable arrays become tape variables; otherwise constants.
NetBinding bind(ad::Tape& tape, const NetWeights& w, bool trainable);

/// Applies the cultivar embedding to a B x input_dim block of features.
ad::Var embed(const NetBinding& net, const ad::Var& features, const std::vector<int>& cultivars);

/// Day-by-day evaluation for a batch of seasons sharing a start day.
class NetRunner {
 public:
  NetRunner(const NetBinding& net, std::vector<int> cultivars);

  /// x: B x input_dim features for today; returns B x out_dim.
  ad::Var step(const ad::Var& x);
  /// Runs every day; inputs[t] is B x input_dim.
  std::vector<ad::Var> run(const std::vector<ad::Var>& inputs);

  const Eigen::MatrixXd& hidden() const;
  void set_hidden(const Eigen::MatrixXd& h);
  void reset();
  /// Activations entering the output layer on the last step.
  const ad::Var& trunk() const { return trunk_; }

 private:
  ad::Var head(const ad::Var& trunk) const;

  const NetBinding* net_;
  std::vector<int> cultivars_;
  ad::Var h_;
  ad::Var trunk_;
};

/// Whole-season inference for one cultivar on a non-recording tape. Returns T x out_dim.
Eigen::MatrixXd forward(const NetWeights& w, const Eigen::MatrixXd& inputs, int cultivar);
/// Recurrence restarted from zero for every day over the trailing k days.
Eigen::MatrixXd forward_windowed(const NetWeights& w, const Eigen::MatrixXd& inputs, int cultivar, int k);

/// Affine map from [-1, 1] to each parameter's range on the tape (raw is clamped first).
ad::Var rescale(const ad::Var& raw, const ParamSpec& spec);

// Checkpoint container: magic, version, JSON header and little-endian float64 arrays.
struct Checkpoint {
  nlohmann::json meta;
  std::vector<std::string> names;
  std::map<std::string, Eigen::MatrixXd> arrays;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::filesystem::path& path);

Checkpoint to_checkpoint(const NetWeights& w, const std::string& prefix = "");
NetWeights weights_from_checkpoint(const Checkpoint& ck, const nlohmann::json& config, const std::string& prefix = "");

void save_weights(const std::filesystem::path& path, const NetWeights& w, const nlohmann::json& extra = {});
NetWeights load_weights(const std::filesystem::path& path, nlohmann::json* extra = nullptr);

}  // namespace dmc
