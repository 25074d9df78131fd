#include "dmc/weather.hpp"

#include "dmc/rng.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numbers>
#include <sstream>

namespace dmc {

namespace chr = std::chrono;

Date make_date(int year, unsigned month, unsigned day) {
  const chr::year_month_day ymd{chr::year{year}, chr::month{month}, chr::day{day}};
  if (!ymd.ok()) throw std::invalid_argument("invalid calendar date");
  return Date(ymd);
}

Date parse_date(const std::string& s) {
  int y = 0;
  unsigned m = 0, d = 0;
  auto num = [&](std::size_t pos, std::size_t len, auto& out) {
    if (pos + len > s.size()) return false;
    const auto* first = s.data() + pos;
    const auto res = std::from_chars(first, first + len, out);
    return res.ec == std::errc() && res.ptr == first + len;
  };
  bool ok = false;
  if (s.size() == 10 && s[4] == '-' && s[7] == '-') {
    ok = num(0, 4, y) && num(5, 2, m) && num(8, 2, d);
  } else if (s.size() == 8) {
    ok = num(0, 4, y) && num(4, 2, m) && num(6, 2, d);
  }
  const chr::year_month_day ymd{chr::year{y}, chr::month{m}, chr::day{d}};
  if (!ok || !ymd.ok()) throw std::invalid_argument("unparsable date '" + s + "'");
  return Date(ymd);
}

std::string format_date(Date d) {
  const chr::year_month_day ymd{d};
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", static_cast<int>(ymd.year()), static_cast<unsigned>(ymd.month()),
                static_cast<unsigned>(ymd.day()));
  return buf;
}

int year_of(Date d) { return static_cast<int>(chr::year_month_day{d}.year()); }

int day_of_year(Date d) {
  const Date jan1 = make_date(year_of(d), 1, 1);
  return static_cast<int>((d - jan1).count()) + 1;
}

std::pair<double, double> date_embedding(int doy) {
  const double a = 2.0 * std::numbers::pi * doy / 365.0;
  return {std::sin(a), std::cos(a)};
}

std::pair<Date, Date> window_bounds(SeasonWindow w, int y) {
  switch (w) {
    case SeasonWindow::Phenology:
      return {make_date(y, 1, 1), make_date(y, 9, 7)};
    case SeasonWindow::Hardiness:
      return {make_date(y, 9, 7), make_date(y + 1, 5, 15)};
    case SeasonWindow::Whole:
      break;
  }
  return {Date::min(), Date::max()};
}

std::optional<int> season_year_of(SeasonWindow w, Date d) {
  const int y = year_of(d);
  switch (w) {
    case SeasonWindow::Phenology:
      if (d <= make_date(y, 9, 7)) return y;
      return std::nullopt;
    case SeasonWindow::Hardiness:
      if (d >= make_date(y, 9, 7)) return y;
      if (d <= make_date(y, 5, 15)) return y - 1;
      return std::nullopt;
    case SeasonWindow::Whole:
      return 0;
  }
  return std::nullopt;
}

void validate_record(const WeatherRecord& r) {
  const std::string when = format_date(r.date);
  auto present = [](double x) { return !std::isnan(x); };
  if (present(r.tmin) && present(r.tmax) && r.tmin > r.tmax) throw DataError(when + ": tmin exceeds tmax");
  if (present(r.tmean) && present(r.tmin) && r.tmean < r.tmin) throw DataError(when + ": tmean below tmin");
  if (present(r.tmean) && present(r.tmax) && r.tmean > r.tmax) throw DataError(when + ": tmean above tmax");
  if (present(r.rain) && r.rain < 0) throw DataError(when + ": negative rainfall");
  if (present(r.solar) && r.solar < 0) throw DataError(when + ": negative solar radiation");
  for (const double h : {r.hmin, r.hmax, r.hmean}) {
    if (present(h) && (h < 0 || h > 100)) throw DataError(when + ": relative humidity outside [0, 100]");
  }
}

// ---------------------------------------------------------------------------
// WeatherSeries

std::optional<std::size_t> WeatherSeries::find_feature(const std::string& name) const {
  const auto it = std::find(features.begin(), features.end(), name);
  if (it == features.end()) return std::nullopt;
  return static_cast<std::size_t>(it - features.begin());
}

std::size_t WeatherSeries::feature_index(const std::string& name) const {
  if (auto i = find_feature(name)) return *i;
  throw DataError("weather series has no feature '" + name + "'");
}

Eigen::VectorXd WeatherSeries::column(const std::string& name) const {
  return values.col(static_cast<Eigen::Index>(feature_index(name)));
}

std::vector<double> WeatherSeries::tmean() const {
  std::vector<double> out(days());
  if (auto i = find_feature("tmean")) {
    for (std::size_t t = 0; t < days(); ++t) out[t] = values(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(*i));
    return out;
  }
  const auto lo = static_cast<Eigen::Index>(feature_index("tmin"));
  const auto hi = static_cast<Eigen::Index>(feature_index("tmax"));
  for (std::size_t t = 0; t < days(); ++t) {
    const auto r = static_cast<Eigen::Index>(t);
    out[t] = 0.5 * (values(r, lo) + values(r, hi));
  }
  return out;
}

WeatherRecord WeatherSeries::record(std::size_t day) const {
  WeatherRecord r;
  r.date = dates.at(day);
  const std::pair<const char*, double WeatherRecord::*> fields[] = {
      {"tmin", &WeatherRecord::tmin},   {"tmax", &WeatherRecord::tmax},   {"tmean", &WeatherRecord::tmean},
      {"hmin", &WeatherRecord::hmin},   {"hmax", &WeatherRecord::hmax},   {"hmean", &WeatherRecord::hmean},
      {"dmin", &WeatherRecord::dmin},   {"dmax", &WeatherRecord::dmax},   {"dmean", &WeatherRecord::dmean},
      {"solar", &WeatherRecord::solar}, {"rain", &WeatherRecord::rain},   {"wind", &WeatherRecord::wind},
      {"et", &WeatherRecord::et},
  };
  const auto row = static_cast<Eigen::Index>(day);
  for (const auto& [name, member] : fields) {
    if (auto i = find_feature(name)) {
      const auto c = static_cast<Eigen::Index>(*i);
      r.*member = missing(row, c) ? NAN : values(row, c);
    }
  }
  return r;
}

void WeatherSeries::validate() const {
  const auto n = static_cast<Eigen::Index>(days());
  const auto f = static_cast<Eigen::Index>(features.size());
  if (values.rows() != n || values.cols() != f || missing.rows() != n || missing.cols() != f) {
    throw DataError("weather series shape mismatch");
  }
  for (std::size_t t = 1; t < dates.size(); ++t) {
    if (dates[t] - dates[t - 1] != chr::days{1}) {
      throw DataError("dates not consecutive at " + format_date(dates[t]));
    }
  }
}

WeatherSeries WeatherSeries::slice(std::size_t first, std::size_t count) const {
  if (first + count > days()) throw std::out_of_range("WeatherSeries::slice");
  WeatherSeries out = *this;
  out.dates.assign(dates.begin() + static_cast<std::ptrdiff_t>(first),
                   dates.begin() + static_cast<std::ptrdiff_t>(first + count));
  out.values = values.middleRows(static_cast<Eigen::Index>(first), static_cast<Eigen::Index>(count));
  out.missing = missing.middleRows(static_cast<Eigen::Index>(first), static_cast<Eigen::Index>(count));
  return out;
}

WeatherSeries concat(const WeatherSeries& a, const WeatherSeries& b) {
  if (a.features != b.features) throw DataError("concat: feature sets differ");
  if (a.days() && b.days() && b.dates.front() - a.dates.back() != chr::days{1}) {
    throw DataError("concat: series are not contiguous");
  }
  WeatherSeries out = a;
  out.dates.insert(out.dates.end(), b.dates.begin(), b.dates.end());
  out.values.resize(a.values.rows() + b.values.rows(), a.values.cols());
  out.values << a.values, b.values;
  out.missing.resize(a.missing.rows() + b.missing.rows(), a.missing.cols());
  out.missing << a.missing, b.missing;
  return out;
}

// ---------------------------------------------------------------------------
// CSV

CsvSchema CsvSchema::from_json(const nlohmann::json& j) {
  CsvSchema s;
  s.date_column = j.value("date_column", "date");
  s.location_column = j.value("location_column", "");
  s.default_location = j.value("default_location", "site");
  const auto& feats = j.at("features");
  if (feats.is_array()) {
    for (const auto& e : feats) {
      s.columns.push_back({e.at("name").get<std::string>(), e.value("column", e.at("name").get<std::string>()),
                           e.value("unit", "")});
    }
  } else {
    for (const auto& [name, e] : feats.items()) {
      s.columns.push_back({name, e.value("column", name), e.value("unit", "")});
    }
  }
  if (s.columns.empty()) throw ParseError("schema declares no features", 0);
  return s;
}

CsvSchema CsvSchema::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open schema " + path.string(), 0);
  return from_json(nlohmann::json::parse(in));
}

nlohmann::json CsvSchema::to_json() const {
  nlohmann::json j;
  j["date_column"] = date_column;
  if (!location_column.empty()) j["location_column"] = location_column;
  j["default_location"] = default_location;
  j["features"] = nlohmann::json::array();
  for (const auto& c : columns) j["features"].push_back({{"name", c.feature}, {"column", c.column}, {"unit", c.unit}});
  return j;
}

CsvSchema CsvSchema::identity(const std::vector<std::string>& features) {
  CsvSchema s;
  for (const auto& f : features) s.columns.push_back({f, f, ""});
  return s;
}

const std::vector<std::string>& synthetic_features() {
  static const std::vector<std::string> names{"tmin", "tmax", "tmean", "rain", "solar", "daylength", "et0", "etp"};
  return names;
}

namespace {

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\"");
  const auto e = s.find_last_not_of(" \t\r\"");
  return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(trim(cell));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

bool is_missing_token(const std::string& s) {
  return s.empty() || s == "NA" || s == "NaN" || s == "nan" || s == "null" || s == "-999" || s == "-999.0";
}

struct Row {
  Date date;
  std::vector<double> values;
  std::vector<bool> missing;
};

}  // namespace

std::vector<WeatherSeries> parse_csv(std::istream& in, const CsvSchema& schema, SeasonWindow window) {
  std::string line;
  std::size_t line_no = 0;
  std::vector<std::string> header;
  while (std::getline(in, line)) {
    ++line_no;
    if (!trim(line).empty() && trim(line)[0] != '#') {
      header = split(line);
      break;
    }
  }
  if (header.empty()) throw ParseError("missing header", line_no);

  auto column_of = [&](const std::string& name) -> std::optional<std::size_t> {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) return std::nullopt;
    return static_cast<std::size_t>(it - header.begin());
  };
  const auto date_col = column_of(schema.date_column);
  if (!date_col) throw ParseError("header lacks date column '" + schema.date_column + "'", line_no);
  std::optional<std::size_t> loc_col;
  if (!schema.location_column.empty()) {
    loc_col = column_of(schema.location_column);
    if (!loc_col) throw ParseError("header lacks location column '" + schema.location_column + "'", line_no);
  }
  std::vector<std::size_t> feat_cols;
  std::vector<std::string> names;
  for (const auto& c : schema.columns) {
    const auto i = column_of(c.column);
    if (!i) throw ParseError("header lacks column '" + c.column + "' for feature '" + c.feature + "'", line_no);
    feat_cols.push_back(*i);
    names.push_back(c.feature);
  }

  // location -> season -> date -> row
  std::map<std::string, std::map<int, std::map<Date, Row>>> groups;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto cells = split(line);
    if (cells.size() != header.size()) {
      throw ParseError("expected " + std::to_string(header.size()) + " fields, found " + std::to_string(cells.size()),
                       line_no);
    }
    Row row;
    try {
      row.date = parse_date(cells[*date_col]);
    } catch (const std::invalid_argument& e) {
      throw ParseError(e.what(), line_no);
    }
    for (const auto c : feat_cols) {
      const auto& cell = cells[c];
      if (is_missing_token(cell)) {
        row.values.push_back(0.0);
        row.missing.push_back(true);
        continue;
      }
      double v = 0;
      const auto res = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (res.ec != std::errc() || res.ptr != cell.data() + cell.size()) {
        throw ParseError("malformed number '" + cell + "' in column '" + header[c] + "'", line_no);
      }
      row.values.push_back(v);
      row.missing.push_back(false);
    }
    const std::string loc = loc_col ? cells[*loc_col] : schema.default_location;
    const auto season = season_year_of(window, row.date);
    if (!season) continue;
    auto& bucket = groups[loc][*season];
    const Date d = row.date;
    if (!bucket.emplace(d, std::move(row)).second) {
      throw DataError("duplicate date " + format_date(d) + " for location '" + loc + "' (line " +
                      std::to_string(line_no) + ")");
    }
  }

  std::vector<WeatherSeries> out;
  for (auto& [loc, seasons] : groups) {
    for (auto& [year, rows] : seasons) {
      WeatherSeries s;
      s.location_id = loc;
      s.season_year = year;
      s.season_window = window_bounds(window, year);
      s.features = names;
      const Date first = rows.begin()->first;
      const Date last = rows.rbegin()->first;
      const auto n = static_cast<Eigen::Index>((last - first).count() + 1);
      const auto f = static_cast<Eigen::Index>(names.size());
      s.values = Eigen::MatrixXd::Zero(n, f);
      s.missing.setConstant(n, f, true);
      for (Eigen::Index t = 0; t < n; ++t) s.dates.push_back(first + chr::days{t});
      for (const auto& [d, row] : rows) {
        const auto t = static_cast<Eigen::Index>((d - first).count());
        for (Eigen::Index j = 0; j < f; ++j) {
          s.values(t, j) = row.values[static_cast<std::size_t>(j)];
          s.missing(t, j) = row.missing[static_cast<std::size_t>(j)];
        }
      }
      out.push_back(std::move(s));
    }
  }
  return out;
}

std::vector<WeatherSeries> load_csv(const std::filesystem::path& path, const CsvSchema& schema, SeasonWindow window) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string(), 0);
  return parse_csv(in, schema, window);
}

void write_csv(const std::filesystem::path& path, const WeatherSeries& s) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "date";
  for (const auto& f : s.features) out << ',' << f;
  out << '\n' << std::setprecision(17);
  for (std::size_t t = 0; t < s.days(); ++t) {
    out << format_date(s.dates[t]);
    for (std::size_t j = 0; j < s.features.size(); ++j) {
      out << ',';
      const auto r = static_cast<Eigen::Index>(t), c = static_cast<Eigen::Index>(j);
      if (!s.missing(r, c)) out << s.values(r, c);
    }
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Cleaning

Eigen::VectorXd missing_fractions(const WeatherSeries& s) {
  if (s.days() == 0) return Eigen::VectorXd::Zero(static_cast<Eigen::Index>(s.features.size()));
  return s.missing.cast<double>().colwise().mean().transpose().matrix();
}

CleanResult clean_season(const WeatherSeries& s) {
  s.validate();
  const Eigen::VectorXd frac = missing_fractions(s);
  for (Eigen::Index j = 0; j < frac.size(); ++j) {
    const auto& name = s.features[static_cast<std::size_t>(j)];
    if (frac[j] >= 1.0) return {std::nullopt, "feature '" + name + "' entirely missing"};
    if (frac[j] > kMaxMissingFraction) {
      std::ostringstream why;
      why << "feature '" << name << "' missing " << std::fixed << std::setprecision(1) << 100.0 * frac[j] << "%";
      return {std::nullopt, why.str()};
    }
  }
  WeatherSeries out = s;
  const auto n = static_cast<Eigen::Index>(s.days());
  for (Eigen::Index j = 0; j < out.values.cols(); ++j) {
    Eigen::Index prev = -1;
    for (Eigen::Index t = 0; t <= n; ++t) {
      if (t < n && s.missing(t, j)) continue;
      // Fill the gap (prev, t).
      for (Eigen::Index g = prev + 1; g < t; ++g) {
        if (prev < 0) {
          out.values(g, j) = s.values(t, j);
        } else if (t == n) {
          out.values(g, j) = s.values(prev, j);
        } else {
          const double w = static_cast<double>(g - prev) / static_cast<double>(t - prev);
          out.values(g, j) = s.values(prev, j) + w * (s.values(t, j) - s.values(prev, j));
        }
      }
      prev = t;
    }
  }
  out.missing.setConstant(n, out.values.cols(), false);
  return {std::move(out), ""};
}

// ---------------------------------------------------------------------------
// Normalization

nlohmann::json NormStats::to_json() const {
  nlohmann::json j;
  j["features"] = features;
  j["mean"] = std::vector<double>(mean.data(), mean.data() + mean.size());
  j["std"] = std::vector<double>(stddev.data(), stddev.data() + stddev.size());
  return j;
}

NormStats NormStats::from_json(const nlohmann::json& j) {
  NormStats s;
  s.features = j.at("features").get<std::vector<std::string>>();
  const auto m = j.at("mean").get<std::vector<double>>();
  const auto d = j.at("std").get<std::vector<double>>();
  if (m.size() != s.features.size() || d.size() != s.features.size()) throw ParseError("norm stats size mismatch", 0);
  s.mean = Eigen::Map<const Eigen::VectorXd>(m.data(), static_cast<Eigen::Index>(m.size()));
  s.stddev = Eigen::Map<const Eigen::VectorXd>(d.data(), static_cast<Eigen::Index>(d.size()));
  return s;
}

NormStats fit_norm_stats(const std::vector<WeatherSeries>& dataset) {
  if (dataset.empty()) throw DataError("cannot fit normalization on an empty dataset");
  NormStats st;
  st.features = dataset.front().features;
  const auto f = static_cast<Eigen::Index>(st.features.size());
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(f), sq = Eigen::VectorXd::Zero(f);
  double n = 0;
  for (const auto& s : dataset) {
    if (s.features != st.features) throw DataError("normalization: feature sets differ across seasons");
    sum += s.values.colwise().sum().transpose();
    n += static_cast<double>(s.days());
  }
  st.mean = sum / n;
  for (const auto& s : dataset) {
    sq += (s.values.rowwise() - st.mean.transpose()).array().square().colwise().sum().matrix().transpose();
  }
  st.stddev = (sq / n).cwiseSqrt();
  for (Eigen::Index j = 0; j < f; ++j) {
    if (!(st.stddev[j] > 1e-12)) st.stddev[j] = 1.0;
  }
  return st;
}

FeatureMatrix normalize_one(const WeatherSeries& s, const NormStats& stats) {
  if (s.features != stats.features) throw DataError("normalization stats do not match the series features");
  FeatureMatrix out;
  out.names = s.features;
  out.names.push_back("doy_sin");
  out.names.push_back("doy_cos");
  const auto n = static_cast<Eigen::Index>(s.days());
  const auto f = static_cast<Eigen::Index>(s.features.size());
  out.values.resize(n, f + 2);
  out.values.leftCols(f) =
      ((s.values.rowwise() - stats.mean.transpose()).array().rowwise() / stats.stddev.transpose().array()).matrix();
  for (Eigen::Index t = 0; t < n; ++t) {
    const auto [sn, cs] = date_embedding(day_of_year(s.dates[static_cast<std::size_t>(t)]));
    out.values(t, f) = sn;
    out.values(t, f + 1) = cs;
  }
  return out;
}

std::pair<std::vector<FeatureMatrix>, NormStats> normalize(const std::vector<WeatherSeries>& dataset,
                                                           const std::optional<NormStats>& stats) {
  NormStats st = stats ? *stats : fit_norm_stats(dataset);
  std::vector<FeatureMatrix> out;
  out.reserve(dataset.size());
  for (const auto& s : dataset) out.push_back(normalize_one(s, st));
  return {std::move(out), std::move(st)};
}

Eigen::MatrixXd denormalize(const FeatureMatrix& f, const NormStats& stats) {
  const auto k = static_cast<Eigen::Index>(stats.features.size());
  return ((f.values.leftCols(k).array().rowwise() * stats.stddev.transpose().array()).rowwise() +
          stats.mean.transpose().array())
      .matrix();
}

// ---------------------------------------------------------------------------
// Simulation

nlohmann::json ClimateProfile::to_json() const {
  return {{"name", name},
          {"latitude", latitude},
          {"tmean_annual", tmean_annual},
          {"tmean_amplitude", tmean_amplitude},
          {"tmean_peak_doy", tmean_peak_doy},
          {"tmean_persistence", tmean_persistence},
          {"tmean_noise", tmean_noise},
          {"dtr_mean", dtr_mean},
          {"dtr_amplitude", dtr_amplitude},
          {"dtr_noise", dtr_noise},
          {"rain_wet_fraction", rain_wet_fraction},
          {"rain_mean_wet", rain_mean_wet},
          {"rain_persistence", rain_persistence},
          {"clearness", clearness},
          {"noise_scale", noise_scale}};
}

ClimateProfile ClimateProfile::from_json(const nlohmann::json& j) {
  ClimateProfile p;
  if (j.contains("base")) p = named(j.at("base").get<std::string>());
  p.name = j.value("name", p.name);
  p.latitude = j.value("latitude", p.latitude);
  p.tmean_annual = j.value("tmean_annual", p.tmean_annual);
  p.tmean_amplitude = j.value("tmean_amplitude", p.tmean_amplitude);
  p.tmean_peak_doy = j.value("tmean_peak_doy", p.tmean_peak_doy);
  p.tmean_persistence = j.value("tmean_persistence", p.tmean_persistence);
  p.tmean_noise = j.value("tmean_noise", p.tmean_noise);
  p.dtr_mean = j.value("dtr_mean", p.dtr_mean);
  p.dtr_amplitude = j.value("dtr_amplitude", p.dtr_amplitude);
  p.dtr_noise = j.value("dtr_noise", p.dtr_noise);
  p.rain_wet_fraction = j.value("rain_wet_fraction", p.rain_wet_fraction);
  p.rain_mean_wet = j.value("rain_mean_wet", p.rain_mean_wet);
  p.rain_persistence = j.value("rain_persistence", p.rain_persistence);
  p.clearness = j.value("clearness", p.clearness);
  p.noise_scale = j.value("noise_scale", p.noise_scale);
  return p;
}

ClimateProfile ClimateProfile::named(const std::string& name) {
  ClimateProfile p;
  p.name = name;
  if (name == "washington") return p;
  if (name == "vermont") {
    p.latitude = 44.5;
    p.tmean_annual = 7.5;
    p.tmean_amplitude = 14.5;
    p.dtr_mean = 11.0;
    p.rain_wet_fraction = 0.40;
    p.rain_mean_wet = 6.0;
    p.clearness = 0.55;
    return p;
  }
  if (name == "oregon") {
    p.latitude = 45.0;
    p.tmean_annual = 12.0;
    p.tmean_amplitude = 9.0;
    p.dtr_mean = 11.0;
    p.rain_wet_fraction = 0.45;
    p.rain_mean_wet = 7.0;
    p.clearness = 0.55;
    return p;
  }
  if (name == "california") {
    p.latitude = 38.5;
    p.tmean_annual = 15.5;
    p.tmean_amplitude = 8.0;
    p.dtr_mean = 15.0;
    p.rain_wet_fraction = 0.15;
    p.rain_mean_wet = 8.0;
    p.clearness = 0.72;
    return p;
  }
  throw std::invalid_argument("unknown climate profile '" + name + "'");
}

double day_length_hours(double latitude_deg, int doy) {
  const double lat = latitude_deg * std::numbers::pi / 180.0;
  const double decl = 0.409 * std::sin(2.0 * std::numbers::pi * doy / 365.0 - 1.39);
  const double x = std::clamp(-std::tan(lat) * std::tan(decl), -1.0, 1.0);
  return 24.0 / std::numbers::pi * std::acos(x);
}

double extraterrestrial_radiation(double latitude_deg, int doy) {
  const double lat = latitude_deg * std::numbers::pi / 180.0;
  const double dr = 1.0 + 0.033 * std::cos(2.0 * std::numbers::pi * doy / 365.0);
  const double decl = 0.409 * std::sin(2.0 * std::numbers::pi * doy / 365.0 - 1.39);
  const double ws = std::acos(std::clamp(-std::tan(lat) * std::tan(decl), -1.0, 1.0));
  return 24.0 * 60.0 / std::numbers::pi * 0.0820 * dr *
         (ws * std::sin(lat) * std::sin(decl) + std::cos(lat) * std::cos(decl) * std::sin(ws));
}

double hargreaves_et0(double tmin, double tmax, double tmean, double ra) {
  return std::max(0.0, 0.0023 * (tmean + 17.8) * std::sqrt(std::max(tmax - tmin, 0.0)) * ra * 0.408);
}

WeatherSeries simulate_weather(std::uint64_t seed, const ClimateProfile& p, Date start, std::size_t days,
                               const std::string& location_id) {
  Rng rng(seed);
  WeatherSeries s;
  s.location_id = location_id.empty() ? p.name : location_id;
  s.season_year = year_of(start);
  s.season_window = {start, start + chr::days{static_cast<long>(days) - 1}};
  s.features = synthetic_features();
  const auto n = static_cast<Eigen::Index>(days);
  s.values.resize(n, static_cast<Eigen::Index>(s.features.size()));
  s.missing.setConstant(n, static_cast<Eigen::Index>(s.features.size()), false);

  const double k = p.noise_scale;
  const double phi_t = p.tmean_persistence;
  const double phi_w = p.rain_persistence;
  double temp_anom = k * p.tmean_noise * rng.normal();
  double wet = k * rng.normal();
  for (Eigen::Index t = 0; t < n; ++t) {
    const Date d = start + chr::days{t};
    s.dates.push_back(d);
    const int doy = day_of_year(d);
    const double phase = 2.0 * std::numbers::pi * (doy - p.tmean_peak_doy) / 365.0;

    temp_anom = phi_t * temp_anom + std::sqrt(1.0 - phi_t * phi_t) * k * p.tmean_noise * rng.normal();
    wet = phi_w * wet + std::sqrt(1.0 - phi_w * phi_w) * k * rng.normal();

    const double centre = p.tmean_annual + p.tmean_amplitude * std::cos(phase) + temp_anom;
    const double dtr = std::max(1.0, p.dtr_mean + p.dtr_amplitude * std::cos(phase) + k * p.dtr_noise * rng.normal() -
                                         2.0 * std::max(wet, 0.0));
    std::array<double, 3> draws{centre - 0.5 * dtr + 0.3 * k * rng.normal(), centre,
                                centre + 0.5 * dtr + 0.3 * k * rng.normal()};
    std::sort(draws.begin(), draws.end());

    double rain;
    if (k == 0.0) {
      rain = p.rain_wet_fraction * p.rain_mean_wet;
    } else {
      const double p_wet = std::clamp(p.rain_wet_fraction * (1.0 + 1.2 * wet), 0.0, 0.95);
      const double u = rng.uniform();
      const double amount = -std::log(1.0 - rng.uniform()) * p.rain_mean_wet * (1.0 + 0.3 * std::max(wet, 0.0));
      rain = u < p_wet ? amount : 0.0;
    }

    const double ra = extraterrestrial_radiation(p.latitude, doy);
    const double clear = std::clamp(p.clearness - (rain > 0 ? 0.25 : 0.0) + 0.05 * k * rng.normal(), 0.1, 0.8);
    const double solar = std::max(0.0, ra * clear);
    const double et0 = hargreaves_et0(draws[0], draws[2], draws[1], ra);

    s.values(t, 0) = draws[0];
    s.values(t, 1) = draws[2];
    s.values(t, 2) = draws[1];
    s.values(t, 3) = rain;
    s.values(t, 4) = solar;
    s.values(t, 5) = day_length_hours(p.latitude, doy);
    s.values(t, 6) = et0;
    s.values(t, 7) = et0 * (1.1 + 0.2 * clear);
  }
  return s;
}

}  // namespace dmc
