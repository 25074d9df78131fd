#include "dmc/weather_fetch.hpp"

#include <httplib.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

namespace dmc {

namespace fs = std::filesystem;

FetchConfig FetchConfig::from_json(const nlohmann::json& j) {
  static const char* known[] = {"base_url", "endpoint", "community", "timeout_seconds",
                                "retries",  "max_in_flight", "profile"};
  for (const auto& [key, _] : j.items()) {
    if (std::find(std::begin(known), std::end(known), key) == std::end(known)) {
      throw std::invalid_argument("unknown fetch config key '" + key + "'");
    }
  }
  FetchConfig c;
  c.base_url = j.value("base_url", c.base_url);
  c.endpoint = j.value("endpoint", c.endpoint);
  c.community = j.value("community", c.community);
  c.timeout_seconds = j.value("timeout_seconds", c.timeout_seconds);
  c.retries = j.value("retries", c.retries);
  c.max_in_flight = std::clamp(j.value("max_in_flight", c.max_in_flight), 1, 4);
  c.profile = j.value("profile", c.profile);
  return c;
}

FetchConfig FetchConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return from_json(nlohmann::json::parse(in));
}

nlohmann::json FetchConfig::to_json() const {
  return {{"base_url", base_url},     {"endpoint", endpoint}, {"community", community},
          {"timeout_seconds", timeout_seconds}, {"retries", retries}, {"max_in_flight", max_in_flight},
          {"profile", profile}};
}

fs::path cache_path(const fs::path& cache_dir, double lat, double lon, int year, const std::string& profile) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "power_%.4f_%.4f_%d_%s.csv", lat, lon, year, profile.c_str());
  return cache_dir / buf;
}

namespace {

constexpr const char* kPowerParameters = "T2M,T2M_MAX,T2M_MIN,PRECTOTCORR,ALLSKY_SFC_SW_DWN";

std::string location_name(double lat, double lon) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4f_%.4f", lat, lon);
  return buf;
}

std::mutex& key_mutex(const fs::path& key) {
  static std::mutex guard;
  static std::map<std::string, std::unique_ptr<std::mutex>> locks;
  std::lock_guard lock(guard);
  auto& m = locks[key.string()];
  if (!m) m = std::make_unique<std::mutex>();
  return *m;
}

std::optional<WeatherSeries> read_cache(const fs::path& path, double lat, double lon, int year) {
  if (!fs::exists(path)) return std::nullopt;
  auto all = load_csv(path, CsvSchema::identity(synthetic_features()));
  if (all.size() != 1) throw ParseError("cache file " + path.string() + " holds no single series", 0);
  auto s = std::move(all.front());
  s.location_id = location_name(lat, lon);
  s.season_year = year;
  s.season_window = {make_date(year, 1, 1), make_date(year, 12, 31)};
  return s;
}

void write_cache(const fs::path& path, const WeatherSeries& s) {
  fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  write_csv(tmp, s);
  fs::rename(tmp, path);
}

std::string request_year(const FetchConfig& c, double lat, double lon, int year) {
  httplib::Client client(c.base_url);
  const auto secs = static_cast<time_t>(c.timeout_seconds);
  const auto usecs = static_cast<time_t>((c.timeout_seconds - static_cast<double>(secs)) * 1e6);
  client.set_connection_timeout(secs, usecs);
  client.set_read_timeout(secs, usecs);
  httplib::Params params{{"parameters", kPowerParameters},
                         {"community", c.community},
                         {"latitude", std::to_string(lat)},
                         {"longitude", std::to_string(lon)},
                         {"start", std::to_string(year) + "0101"},
                         {"end", std::to_string(year) + "1231"},
                         {"format", "JSON"}};
  std::string last_error;
  for (int attempt = 0; attempt <= c.retries; ++attempt) {
    if (attempt > 0) std::this_thread::sleep_for(std::chrono::milliseconds(200 * attempt));
    auto res = client.Get(c.endpoint, params, httplib::Headers{});
    if (!res) {
      last_error = httplib::to_string(res.error());
      continue;
    }
    if (res->status == 200) return res->body;
    last_error = "HTTP " + std::to_string(res->status);
    if (res->status >= 400 && res->status < 500 && res->status != 429) break;
  }
  throw FetchError("fetching " + std::to_string(year) + " from " + c.base_url + " failed: " + last_error);
}

}  // namespace

WeatherSeries parse_power_response(const std::string& body, double lat, double lon, int year) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(body);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("response is not JSON: ") + e.what(), 0);
  }
  const auto* params = &j;
  for (const char* key : {"properties", "parameter"}) {
    if (!params->is_object() || !params->contains(key)) {
      throw ParseError(std::string("response lacks '") + key + "'", 0);
    }
    params = &(*params)[key];
  }
  const char* names[] = {"T2M", "T2M_MAX", "T2M_MIN", "PRECTOTCORR", "ALLSKY_SFC_SW_DWN"};
  for (const char* n : names) {
    if (!params->contains(n) || !(*params)[n].is_object()) {
      throw ParseError(std::string("response lacks parameter '") + n + "'", 0);
    }
  }

  WeatherSeries s;
  s.location_id = location_name(lat, lon);
  s.season_year = year;
  s.season_window = {make_date(year, 1, 1), make_date(year, 12, 31)};
  s.features = synthetic_features();
  const Date first = s.season_window.first;
  const auto n = static_cast<Eigen::Index>((s.season_window.second - first).count() + 1);
  s.values = Eigen::MatrixXd::Zero(n, static_cast<Eigen::Index>(s.features.size()));
  s.missing.setConstant(n, static_cast<Eigen::Index>(s.features.size()), false);

  auto get = [&](const char* name, const std::string& key) -> double {
    const auto& col = (*params)[name];
    const auto it = col.find(key);
    if (it == col.end() || it->is_null()) return NAN;
    if (!it->is_number()) throw ParseError(std::string("non-numeric value in '") + name + "' on " + key, 0);
    const double v = it->get<double>();
    return v <= -998.0 ? NAN : v;
  };

  for (Eigen::Index t = 0; t < n; ++t) {
    const Date d = first + std::chrono::days{t};
    s.dates.push_back(d);
    std::string key = format_date(d);
    key.erase(std::remove(key.begin(), key.end(), '-'), key.end());
    const int doy = day_of_year(d);
    const double tmean = get("T2M", key), tmax = get("T2M_MAX", key), tmin = get("T2M_MIN", key);
    const double rain = get("PRECTOTCORR", key), solar = get("ALLSKY_SFC_SW_DWN", key);
    const double ra = extraterrestrial_radiation(lat, doy);
    const double et0 = (std::isnan(tmin) || std::isnan(tmax) || std::isnan(tmean)) ? NAN
                                                                                   : hargreaves_et0(tmin, tmax, tmean, ra);
    const double clear = std::isnan(solar) || ra <= 0 ? NAN : std::clamp(solar / ra, 0.0, 1.0);
    const double row[] = {tmin, tmax, tmean, rain, solar, day_length_hours(lat, doy), et0, et0 * (1.1 + 0.2 * clear)};
    for (Eigen::Index f = 0; f < s.values.cols(); ++f) {
      if (std::isnan(row[f])) {
        s.missing(t, f) = true;
      } else {
        s.values(t, f) = row[f];
      }
    }
  }
  return s;
}

std::vector<WeatherSeries> fetch_weather(double lat, double lon, int first_year, int last_year,
                                         const fs::path& cache_dir, const FetchConfig& config, FetchStats* stats) {
  if (last_year < first_year) throw std::invalid_argument("fetch_weather: empty year range");
  const auto count = static_cast<std::size_t>(last_year - first_year + 1);
  std::vector<std::optional<WeatherSeries>> out(count);
  std::vector<std::exception_ptr> errors(count);
  std::atomic<std::size_t> next{0};

  auto worker = [&] {
    for (std::size_t i = next++; i < count; i = next++) {
      const int year = first_year + static_cast<int>(i);
      const auto path = cache_path(cache_dir, lat, lon, year, config.profile);
      try {
        std::lock_guard lock(key_mutex(path));
        if (auto cached = read_cache(path, lat, lon, year)) {
          if (stats) ++stats->cache_hits;
          out[i] = std::move(cached);
          continue;
        }
        if (stats) ++stats->requests;
        const auto body = request_year(config, lat, lon, year);
        write_cache(path, parse_power_response(body, lat, lon, year));
        out[i] = read_cache(path, lat, lon, year);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const auto n_threads = std::min<std::size_t>(count, static_cast<std::size_t>(std::clamp(config.max_in_flight, 1, 4)));
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  std::vector<WeatherSeries> result;
  for (auto& s : out) result.push_back(std::move(*s));
  return result;
}

}  // namespace dmc
