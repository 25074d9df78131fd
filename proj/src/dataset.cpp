#include "dmc/dataset.hpp"

#include <fstream>
#include <iomanip>
#include <sstream>

namespace dmc {

namespace fs = std::filesystem;

std::size_t Season::observed_count() const {
  return static_cast<std::size_t>(std::count(observed.begin(), observed.end(), true));
}

std::vector<std::size_t> Dataset::seasons_of(int cultivar) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < seasons.size(); ++i) {
    if (seasons[i].cultivar == cultivar) out.push_back(i);
  }
  return out;
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset d;
  d.model = model;
  d.cultivars = cultivars;
  d.meta = meta;
  for (auto i : indices) d.seasons.push_back(seasons.at(i));
  return d;
}

std::vector<std::string> Dataset::features() const {
  return seasons.empty() ? std::vector<std::string>{} : seasons.front().weather.features;
}

std::vector<WeatherSeries> Dataset::weather() const {
  std::vector<WeatherSeries> out;
  out.reserve(seasons.size());
  for (const auto& s : seasons) out.push_back(s.weather);
  return out;
}

namespace {

std::string season_file(const Season& s, std::size_t index) {
  std::ostringstream name;
  name << "season_" << std::setw(4) << std::setfill('0') << index << "_c" << s.cultivar << "_" << s.location << "_"
       << s.year << ".csv";
  return name.str();
}

nlohmann::json onsets_json(const Onsets& o) {
  auto j = nlohmann::json::array();
  for (const auto& d : o) j.push_back(d ? nlohmann::json(*d) : nlohmann::json());
  return j;
}

}  // namespace

void Dataset::save(const fs::path& dir) const {
  fs::create_directories(dir);
  nlohmann::json manifest;
  manifest["model"] = to_string(model);
  manifest["cultivars"] = cultivars;
  manifest["meta"] = meta;
  manifest["seasons"] = nlohmann::json::array();
  for (std::size_t i = 0; i < seasons.size(); ++i) {
    const auto& s = seasons[i];
    const auto file = season_file(s, i);
    manifest["seasons"].push_back({{"file", file},
                                   {"cultivar", s.cultivar},
                                   {"year", s.year},
                                   {"location", s.location},
                                   {"onsets", onsets_json(s.onsets)}});
    std::ofstream out(dir / file);
    if (!out) throw std::runtime_error("cannot write " + (dir / file).string());
    out << "date";
    for (const auto& f : s.weather.features) out << ',' << f;
    out << ",target,observed\n" << std::setprecision(17);
    for (std::size_t t = 0; t < s.days(); ++t) {
      out << format_date(s.weather.dates[t]);
      for (Eigen::Index j = 0; j < s.weather.values.cols(); ++j) out << ',' << s.weather.values(static_cast<Eigen::Index>(t), j);
      out << ',' << s.target[t] << ',' << (s.observed[t] ? 1 : 0) << '\n';
    }
  }
  std::ofstream out(dir / "manifest.json");
  out << manifest.dump(2) << '\n';
}

Dataset Dataset::load(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw std::runtime_error("no manifest.json in " + dir.string());
  const auto manifest = nlohmann::json::parse(in);
  Dataset d;
  d.model = crop_model_from_string(manifest.at("model").get<std::string>());
  d.cultivars = manifest.at("cultivars").get<std::vector<std::string>>();
  d.meta = manifest.value("meta", nlohmann::json::object());
  for (const auto& e : manifest.at("seasons")) {
    Season s;
    s.cultivar = e.at("cultivar").get<int>();
    s.year = e.at("year").get<int>();
    s.location = e.at("location").get<std::string>();
    const auto& on = e.at("onsets");
    for (std::size_t k = 0; k < on.size() && k < s.onsets.size(); ++k) {
      if (!on[k].is_null()) s.onsets[k] = on[k].get<int>();
    }
    const auto path = dir / e.at("file").get<std::string>();
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open " + path.string());
    std::string header;
    std::getline(f, header);
    std::vector<std::string> cols;
    {
      std::istringstream hs(header);
      std::string c;
      while (std::getline(hs, c, ',')) cols.push_back(c);
    }
    if (cols.size() < 3 || cols.front() != "date" || cols[cols.size() - 2] != "target" || cols.back() != "observed") {
      throw ParseError(path.string() + ": unexpected header", 1);
    }
    std::vector<std::string> features(cols.begin() + 1, cols.end() - 2);
    f.seekg(0);
    auto parsed = parse_csv(f, CsvSchema::identity({cols.begin() + 1, cols.end()}), SeasonWindow::Whole);
    if (parsed.size() != 1) throw ParseError(path.string() + ": expected one series", 0);
    auto& all = parsed.front();
    const auto n = static_cast<Eigen::Index>(all.days());
    const auto nf = static_cast<Eigen::Index>(features.size());
    s.weather.location_id = s.location;
    s.weather.season_year = s.year;
    s.weather.season_window = {all.dates.front(), all.dates.back()};
    s.weather.features = features;
    s.weather.dates = all.dates;
    s.weather.values = all.values.leftCols(nf);
    s.weather.missing = all.missing.leftCols(nf);
    for (Eigen::Index t = 0; t < n; ++t) {
      s.target.push_back(all.values(t, nf));
      s.observed.push_back(all.values(t, nf + 1) != 0.0);
    }
    d.seasons.push_back(std::move(s));
  }
  return d;
}

Batch make_batch(const Dataset& data, std::span<const std::size_t> indices, const NormStats& stats) {
  Batch b;
  const auto B = static_cast<Eigen::Index>(indices.size());
  for (auto i : indices) {
    b.cultivars.push_back(data.seasons.at(i).cultivar);
    b.lengths.push_back(static_cast<int>(data.seasons[i].days()));
    b.days = std::max(b.days, b.lengths.back());
  }
  const Eigen::Index T = b.days;
  const auto F = static_cast<Eigen::Index>(stats.features.size()) + 2;
  std::vector<Eigen::MatrixXd> per_season;
  for (auto i : indices) per_season.push_back(normalize_one(data.seasons[i].weather, stats).values);
  b.inputs.assign(static_cast<std::size_t>(T), Eigen::MatrixXd::Zero(B, F));
  b.tmean = Eigen::MatrixXd::Zero(B, T);
  b.target = Eigen::MatrixXd::Zero(B, T);
  b.observed = ad::Mask::Constant(B, T, false);
  b.onsets = Eigen::ArrayXXi::Constant(B, kNumTransitions, -1);
  for (Eigen::Index r = 0; r < B; ++r) {
    const auto& s = data.seasons[indices[static_cast<std::size_t>(r)]];
    const auto tm = s.weather.tmean();
    const Eigen::Index n = b.lengths[static_cast<std::size_t>(r)];
    for (Eigen::Index t = 0; t < T; ++t) {
      const auto st = static_cast<std::size_t>(std::min(t, n - 1));
      b.tmean(r, t) = tm[st];
      if (t < n) {
        b.inputs[static_cast<std::size_t>(t)].row(r) = per_season[static_cast<std::size_t>(r)].row(t);
        b.target(r, t) = s.target[st];
        b.observed(r, t) = s.observed[st];
      }
    }
    for (int k = 0; k < kNumTransitions; ++k) {
      if (s.onsets[static_cast<std::size_t>(k)]) b.onsets(r, k) = *s.onsets[static_cast<std::size_t>(k)];
    }
  }
  return b;
}

}  // namespace dmc
