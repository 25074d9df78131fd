#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace dmc {

using Date = std::chrono::sys_days;

Date make_date(int year, unsigned month, unsigned day);
/// Accepts YYYY-MM-DD or YYYYMMDD.
Date parse_date(const std::string& s);
std::string format_date(Date d);
int year_of(Date d);
/// 1-based day of year (Jan 1 = 1, Dec 31 of a leap year = 366).
int day_of_year(Date d);
/// (sin(2 pi doy / 365), cos(2 pi doy / 365)).
std::pair<double, double> date_embedding(int doy);

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : std::runtime_error(line ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Season windows of the two crop models.
enum class SeasonWindow { Phenology, Hardiness, Whole };

/// [start, end] of the season that begins in `season_year`.
std::pair<Date, Date> window_bounds(SeasonWindow w, int season_year);
/// The season year a date belongs to, or nullopt when outside every window.
std::optional<int> season_year_of(SeasonWindow w, Date d);

/// Named view of one day. Absent features are NaN.
struct WeatherRecord {
  Date date{};
  double tmin = NAN, tmax = NAN, tmean = NAN;
  double hmin = NAN, hmax = NAN, hmean = NAN;
  double dmin = NAN, dmax = NAN, dmean = NAN;
  double solar = NAN, rain = NAN, wind = NAN, et = NAN;
};

/// Throws DataError when a present value breaks a physical invariant.
void validate_record(const WeatherRecord& r);

/// One season (or a partial one) of daily weather for one location.
struct WeatherSeries {
  std::string location_id;
  int season_year = 0;
  std::pair<Date, Date> season_window{};
  std::vector<std::string> features;
  std::vector<Date> dates;
  Eigen::MatrixXd values;  // days x features
  Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> missing;

  std::size_t days() const { return dates.size(); }
  std::optional<std::size_t> find_feature(const std::string& name) const;
  std::size_t feature_index(const std::string& name) const;
  Eigen::VectorXd column(const std::string& name) const;
  /// Recorded mean temperature, or (tmin + tmax) / 2 when no mean column exists.
  std::vector<double> tmean() const;
  WeatherRecord record(std::size_t day) const;
  /// Checks consecutive dates and matrix shapes.
  void validate() const;
  /// Days [first, first + count).
  WeatherSeries slice(std::size_t first, std::size_t count) const;
};

WeatherSeries concat(const WeatherSeries& a, const WeatherSeries& b);

/// Maps feature names onto CSV columns.
struct CsvSchema {
  struct Column {
    std::string feature;
    std::string column;
    std::string unit;
  };
  std::string date_column = "date";
  std::string location_column;  // optional; empty means a single location
  std::string default_location = "site";
  std::vector<Column> columns;

  static CsvSchema from_json(const nlohmann::json& j);
  static CsvSchema load(const std::filesystem::path& path);
  nlohmann::json to_json() const;
  /// Columns named identically to the features.
  static CsvSchema identity(const std::vector<std::string>& features);
};

/// Feature names of the simulated and fetched profile.
const std::vector<std::string>& synthetic_features();

/// Parses a daily CSV and groups rows into seasons per location.
std::vector<WeatherSeries> load_csv(const std::filesystem::path& path, const CsvSchema& schema,
                                    SeasonWindow window = SeasonWindow::Whole);
std::vector<WeatherSeries> parse_csv(std::istream& in, const CsvSchema& schema,
                                     SeasonWindow window = SeasonWindow::Whole);
void write_csv(const std::filesystem::path& path, const WeatherSeries& s);

/// Fraction of missing days per feature.
Eigen::VectorXd missing_fractions(const WeatherSeries& s);

inline constexpr double kMaxMissingFraction = 0.10;

struct CleanResult {
  std::optional<WeatherSeries> series;  // empty when the season is discarded
  std::string reason;
};

/// Discards seasons with any feature more than 10% missing, otherwise fills gaps
/// by linear interpolation (nearest value at the ends).
CleanResult clean_season(const WeatherSeries& s);

struct NormStats {
  std::vector<std::string> features;
  Eigen::VectorXd mean;
  Eigen::VectorXd stddev;

  nlohmann::json to_json() const;
  static NormStats from_json(const nlohmann::json& j);
};

NormStats fit_norm_stats(const std::vector<WeatherSeries>& dataset);

/// Network input for one season: z-scored features followed by the date embedding.
struct FeatureMatrix {
  std::vector<std::string> names;
  Eigen::MatrixXd values;  // days x (features + 2)
};

/// Z-scores every feature with `stats` (fitted here when absent) and appends the date embedding.
std::pair<std::vector<FeatureMatrix>, NormStats> normalize(const std::vector<WeatherSeries>& dataset,
                                                           const std::optional<NormStats>& stats);
FeatureMatrix normalize_one(const WeatherSeries& s, const NormStats& stats);
/// Inverse of normalize_one for the feature columns (the date embedding is dropped).
Eigen::MatrixXd denormalize(const FeatureMatrix& f, const NormStats& stats);

struct ClimateProfile {
  std::string name = "washington";
  double latitude = 46.25;
  double tmean_annual = 11.0;
  double tmean_amplitude = 12.5;
  int tmean_peak_doy = 200;
  double tmean_persistence = 0.75;
  double tmean_noise = 2.5;
  double dtr_mean = 13.0;
  double dtr_amplitude = 3.0;
  double dtr_noise = 1.5;
  double rain_wet_fraction = 0.25;
  double rain_mean_wet = 4.0;  // mm on a wet day
  double rain_persistence = 0.97;
  double clearness = 0.65;
  /// Multiplies every stochastic component; 0 gives a deterministic annual cycle.
  double noise_scale = 1.0;

  nlohmann::json to_json() const;
  static ClimateProfile from_json(const nlohmann::json& j);
  static ClimateProfile named(const std::string& name);
};

/// Daylight hours from latitude and day of year.
double day_length_hours(double latitude_deg, int doy);
/// Extraterrestrial radiation in MJ m^-2 day^-1.
double extraterrestrial_radiation(double latitude_deg, int doy);
/// Hargreaves reference evapotranspiration, mm/day.
double hargreaves_et0(double tmin, double tmax, double tmean, double ra);

/// Deterministic daily series over [start, start + days).
WeatherSeries simulate_weather(std::uint64_t seed, const ClimateProfile& profile, Date start, std::size_t days,
                               const std::string& location_id = "");

}  // namespace dmc
