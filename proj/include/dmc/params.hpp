#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <string>
#include <vector>

namespace dmc {

enum class CropModel { Gdd, Ferguson };

std::string to_string(CropModel m);
CropModel crop_model_from_string(const std::string& s);

struct ParamRange {
  std::string name;
  std::string unit;
  double min = 0.0;
  double max = 0.0;

  bool frozen() const { return min == max; }
  double width() const { return max - min; }
  double midpoint() const { return 0.5 * (min + max); }
};

/// Ordered set of named biophysical parameters with closed ranges.
class ParamSpec {
 public:
  ParamSpec() = default;
  explicit ParamSpec(std::vector<ParamRange> ranges);

  std::size_t size() const { return ranges_.size(); }
  const ParamRange& operator[](std::size_t i) const { return ranges_[i]; }
  const std::vector<ParamRange>& ranges() const { return ranges_; }
  std::size_t index_of(const std::string& name) const;

  Eigen::VectorXd mins() const;
  Eigen::VectorXd maxs() const;
  Eigen::VectorXd midpoints() const;
  Eigen::VectorXd widths() const;

  /// True when every entry lies inside its closed range.
  bool contains(const Eigen::VectorXd& p) const;

  /// raw in [-1,1]^d -> parameter vector. Out-of-range raw values are clamped.
  Eigen::VectorXd rescale(const Eigen::VectorXd& raw) const;
  /// Inverse of rescale; frozen entries map to 0.
  Eigen::VectorXd unrescale(const Eigen::VectorXd& p) const;

  nlohmann::json to_json() const;
  static ParamSpec from_json(const nlohmann::json& j);

 private:
  std::vector<ParamRange> ranges_;
};

/// Parameter table used by the phenology model (7 entries).
ParamSpec gdd_spec();
/// Parameter table used by the cold-hardiness model (10 entries, rates frozen at 0.2).
ParamSpec ferguson_spec();
ParamSpec spec_for(CropModel m);

struct GddParams {
  double tbasem = 7.5;
  double teffmx = 30.0;
  double tsumem = 55.0;
  double tsum1 = 550.0;
  double tsum2 = 550.0;
  double tsum3 = 550.0;
  double tsum4 = 550.0;

  Eigen::VectorXd to_vector() const;
  static GddParams from_vector(const Eigen::VectorXd& v);
};

struct FergusonParams {
  double hcinit = -5.0;
  double hcmin = -2.5;
  double hcmax = -30.0;
  double tendo = 5.0;
  double teco = 5.0;
  double enacclim = 0.2;
  double ecacclim = 0.2;
  double endeacclim = 0.2;
  double ecdeacclim = 0.2;
  double ecobound = -500.0;

  Eigen::VectorXd to_vector() const;
  static FergusonParams from_vector(const Eigen::VectorXd& v);
};

/// JSON table {name, unit, min, max, value} for one parameter vector.
nlohmann::json param_table_json(const ParamSpec& spec, const Eigen::VectorXd& values);
Eigen::VectorXd param_values_from_json(const ParamSpec& spec, const nlohmann::json& table);

}  // namespace dmc
