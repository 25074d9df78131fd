#pragma once

// Daily point weather from the NASA POWER API with a per-year disk cache.

#include "dmc/weather.hpp"

#include <atomic>
#include <filesystem>
#include <stdexcept>
#include <string>

namespace dmc {

struct FetchConfig {
  std::string base_url = "https://power.larc.nasa.gov";
  std::string endpoint = "/api/temporal/daily/point";
  std::string community = "AG";
  double timeout_seconds = 60.0;
  int retries = 3;
  int max_in_flight = 4;
  std::string profile = "synthetic";

  static FetchConfig from_json(const nlohmann::json& j);
  static FetchConfig load(const std::filesystem::path& path);
  nlohmann::json to_json() const;
};

/// HTTP failure with no cached copy; the request may succeed if retried later.
class FetchError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  bool retryable() const { return true; }
};

struct FetchStats {
  std::atomic<int> requests{0};
  std::atomic<int> cache_hits{0};
};

/// Cache file for one (location, year, profile); coordinates rounded to 4 decimals.
std::filesystem::path cache_path(const std::filesystem::path& cache_dir, double lat, double lon, int year,
                                 const std::string& profile);

/// Converts a POWER JSON response into a series of the synthetic feature profile.
/// Missing values (-999) are flagged in the missing mask. Throws ParseError on schema drift.
WeatherSeries parse_power_response(const std::string& body, double lat, double lon, int year);

/// One series per year in [first_year, last_year]; years already cached are read from disk
/// without contacting the server.
std::vector<WeatherSeries> fetch_weather(double lat, double lon, int first_year, int last_year,
                                         const std::filesystem::path& cache_dir, const FetchConfig& config = {},
                                         FetchStats* stats = nullptr);

}  // namespace dmc
