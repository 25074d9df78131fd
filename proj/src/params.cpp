#include "dmc/params.hpp"

#include <algorithm>
#include <stdexcept>

namespace dmc {

std::string to_string(CropModel m) { return m == CropModel::Gdd ? "gdd" : "ferguson"; }

CropModel crop_model_from_string(const std::string& s) {
  if (s == "gdd" || s == "phenology") return CropModel::Gdd;
  if (s == "ferguson" || s == "hardiness") return CropModel::Ferguson;
  throw std::invalid_argument("unknown crop model '" + s + "'");
}

ParamSpec::ParamSpec(std::vector<ParamRange> ranges) : ranges_(std::move(ranges)) {
  for (const auto& r : ranges_) {
    if (!(r.min <= r.max)) throw std::invalid_argument("parameter '" + r.name + "' has min > max");
  }
}

std::size_t ParamSpec::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < ranges_.size(); ++i) {
    if (ranges_[i].name == name) return i;
  }
  throw std::out_of_range("no parameter named '" + name + "'");
}

Eigen::VectorXd ParamSpec::mins() const {
  Eigen::VectorXd v(size());
  for (std::size_t i = 0; i < size(); ++i) v[i] = ranges_[i].min;
  return v;
}

Eigen::VectorXd ParamSpec::maxs() const {
  Eigen::VectorXd v(size());
  for (std::size_t i = 0; i < size(); ++i) v[i] = ranges_[i].max;
  return v;
}

Eigen::VectorXd ParamSpec::midpoints() const { return 0.5 * (mins() + maxs()); }
Eigen::VectorXd ParamSpec::widths() const { return maxs() - mins(); }

bool ParamSpec::contains(const Eigen::VectorXd& p) const {
  if (static_cast<std::size_t>(p.size()) != size()) return false;
  for (std::size_t i = 0; i < size(); ++i) {
    if (p[i] < ranges_[i].min || p[i] > ranges_[i].max) return false;
  }
  return true;
}

Eigen::VectorXd ParamSpec::rescale(const Eigen::VectorXd& raw) const {
  if (static_cast<std::size_t>(raw.size()) != size()) throw std::invalid_argument("rescale: dimension mismatch");
  Eigen::VectorXd p(size());
  for (std::size_t i = 0; i < size(); ++i) {
    const auto& r = ranges_[i];
    if (r.frozen()) {
      p[i] = r.min;
      continue;
    }
    const double x = std::clamp(raw[i], -1.0, 1.0);
    p[i] = r.min + (x + 1.0) * 0.5 * (r.max - r.min);
  }
  return p;
}

Eigen::VectorXd ParamSpec::unrescale(const Eigen::VectorXd& p) const {
  if (static_cast<std::size_t>(p.size()) != size()) throw std::invalid_argument("unrescale: dimension mismatch");
  Eigen::VectorXd raw(size());
  for (std::size_t i = 0; i < size(); ++i) {
    const auto& r = ranges_[i];
    raw[i] = r.frozen() ? 0.0 : 2.0 * (p[i] - r.min) / (r.max - r.min) - 1.0;
  }
  return raw;
}

nlohmann::json ParamSpec::to_json() const {
  auto arr = nlohmann::json::array();
  for (const auto& r : ranges_) arr.push_back({{"name", r.name}, {"unit", r.unit}, {"min", r.min}, {"max", r.max}});
  return arr;
}

ParamSpec ParamSpec::from_json(const nlohmann::json& j) {
  std::vector<ParamRange> out;
  for (const auto& e : j) {
    out.push_back({e.at("name").get<std::string>(), e.value("unit", ""), e.at("min").get<double>(),
                   e.at("max").get<double>()});
  }
  return ParamSpec(std::move(out));
}

ParamSpec gdd_spec() {
  return ParamSpec({
      {"TBASEM", "C", 0.0, 15.0},
      {"TEFFMX", "C", 15.0, 45.0},
      {"TSUMEM", "C.day", 10.0, 100.0},
      {"TSUM1", "C.day", 100.0, 1000.0},
      {"TSUM2", "C.day", 100.0, 1000.0},
      {"TSUM3", "C.day", 100.0, 1000.0},
      {"TSUM4", "C.day", 100.0, 1000.0},
  });
}

ParamSpec ferguson_spec() {
  return ParamSpec({
      {"HCINIT", "C", -15.0, 5.0},
      {"HCMIN", "C", -5.0, 0.0},
      {"HCMAX", "C", -40.0, -20.0},
      {"TENDO", "C", 0.0, 10.0},
      {"TECO", "C", 0.0, 10.0},
      {"ENACCLIM", "C/C", 0.2, 0.2},
      {"ECACCLIM", "C/C", 0.2, 0.2},
      {"ENDEACCLIM", "C/C", 0.2, 0.2},
      {"ECDEACCLIM", "C/C", 0.2, 0.2},
      {"ECOBOUND", "C.day", -800.0, -200.0},
  });
}

ParamSpec spec_for(CropModel m) { return m == CropModel::Gdd ? gdd_spec() : ferguson_spec(); }

Eigen::VectorXd GddParams::to_vector() const {
  Eigen::VectorXd v(7);
  v << tbasem, teffmx, tsumem, tsum1, tsum2, tsum3, tsum4;
  return v;
}

GddParams GddParams::from_vector(const Eigen::VectorXd& v) {
  if (v.size() != 7) throw std::invalid_argument("GddParams expects 7 values");
  return {v[0], v[1], v[2], v[3], v[4], v[5], v[6]};
}

Eigen::VectorXd FergusonParams::to_vector() const {
  Eigen::VectorXd v(10);
  v << hcinit, hcmin, hcmax, tendo, teco, enacclim, ecacclim, endeacclim, ecdeacclim, ecobound;
  return v;
}

FergusonParams FergusonParams::from_vector(const Eigen::VectorXd& v) {
  if (v.size() != 10) throw std::invalid_argument("FergusonParams expects 10 values");
  return {v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8], v[9]};
}

nlohmann::json param_table_json(const ParamSpec& spec, const Eigen::VectorXd& values) {
  auto arr = nlohmann::json::array();
  for (std::size_t i = 0; i < spec.size(); ++i) {
    const auto& r = spec[i];
    arr.push_back({{"name", r.name}, {"unit", r.unit}, {"min", r.min}, {"max", r.max}, {"value", values[i]}});
  }
  return arr;
}

Eigen::VectorXd param_values_from_json(const ParamSpec& spec, const nlohmann::json& table) {
  Eigen::VectorXd v = spec.midpoints();
  std::vector<bool> seen(spec.size(), false);
  for (const auto& e : table) {
    const auto i = spec.index_of(e.at("name").get<std::string>());
    v[i] = e.at("value").get<double>();
    seen[i] = true;
  }
  for (std::size_t i = 0; i < spec.size(); ++i) {
    if (!seen[i] && !spec[i].frozen()) throw std::invalid_argument("parameter table lacks '" + spec[i].name + "'");
  }
  return v;
}

}  // namespace dmc
