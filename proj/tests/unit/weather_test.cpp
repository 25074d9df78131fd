#include "dmc/weather.hpp"

#include <gtest/gtest.h>

#include "dmc/rng.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

namespace dmc {
namespace {

CsvSchema tmean_rain_schema() { return CsvSchema::identity({"tmean", "rain"}); }

std::vector<WeatherSeries> parse(const std::string& text, const CsvSchema& schema,
                                 SeasonWindow w = SeasonWindow::Whole) {
  std::istringstream in(text);
  return parse_csv(in, schema, w);
}

WeatherSeries series_of(const std::vector<double>& tmean) {
  WeatherSeries s;
  s.location_id = "x";
  s.features = {"tmean"};
  const auto n = static_cast<Eigen::Index>(tmean.size());
  s.values.resize(n, 1);
  s.missing.setConstant(n, 1, false);
  for (Eigen::Index t = 0; t < n; ++t) {
    s.dates.push_back(make_date(2021, 3, 1) + std::chrono::days{t});
    if (std::isnan(tmean[static_cast<std::size_t>(t)])) {
      s.missing(t, 0) = true;
      s.values(t, 0) = 0;
    } else {
      s.values(t, 0) = tmean[static_cast<std::size_t>(t)];
    }
  }
  return s;
}

TEST(Dates, RoundTripAndDayOfYear) {
  const Date d = parse_date("2020-12-31");
  EXPECT_EQ(format_date(d), "2020-12-31");
  EXPECT_EQ(day_of_year(d), 366);
  EXPECT_EQ(day_of_year(parse_date("20210101")), 1);
  EXPECT_THROW(parse_date("2021-02-30"), std::invalid_argument);
  EXPECT_THROW(parse_date("yesterday"), std::invalid_argument);
}

TEST(LoadCsv, ContiguousRowsGiveOnePartialSeries) {
  const auto out = parse("date,tmean,rain\n2021-04-01,5.5,0\n2021-04-02,6.0,1.2\n2021-04-03,7.25,0\n",
                         tmean_rain_schema());
  ASSERT_EQ(out.size(), 1u);
  const auto& s = out[0];
  EXPECT_EQ(s.days(), 3u);
  EXPECT_FALSE(s.missing.any());
  EXPECT_DOUBLE_EQ(s.values(2, 0), 7.25);
  EXPECT_DOUBLE_EQ(s.values(1, 1), 1.2);
  EXPECT_EQ(s.location_id, "site");
}

TEST(LoadCsv, RepeatedDateNamesTheDate) {
  try {
    parse("date,tmean,rain\n2021-04-01,5,0\n2021-04-02,6,0\n2021-04-02,7,0\n", tmean_rain_schema());
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("2021-04-02"), std::string::npos);
  }
}

TEST(LoadCsv, MalformedRowReportsLine) {
  try {
    parse("date,tmean,rain\n2021-04-01,5,0\n2021-04-02,warm,0\n", tmean_rain_schema());
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
  try {
    parse("date,tmean,rain\n2021-04-01,5\n", tmean_rain_schema());
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
}

TEST(LoadCsv, PhenologyWindowCountsDays) {
  std::ostringstream csv;
  csv << "date,tmean,rain\n";
  // Dec 1 2020 .. Dec 31 2021; only Jan 1..Sep 7 2021 belongs to a phenology season of 2021.
  for (Date d = make_date(2020, 12, 1); d <= make_date(2021, 12, 31); d += std::chrono::days{1}) {
    csv << format_date(d) << ",10,0\n";
  }
  const auto out = parse(csv.str(), tmean_rain_schema(), SeasonWindow::Phenology);
  ASSERT_EQ(out.size(), 1u);
  // Oracle: sum of month lengths Jan..Aug of a non-leap year plus 7.
  const int expected = 31 + 28 + 31 + 30 + 31 + 30 + 31 + 31 + 7;
  EXPECT_EQ(static_cast<int>(out[0].days()), expected);
  EXPECT_EQ(out[0].dates.front(), make_date(2021, 1, 1));
  EXPECT_EQ(out[0].dates.back(), make_date(2021, 9, 7));
}

TEST(LoadCsv, HardinessWindowSpansNewYear) {
  std::ostringstream csv;
  csv << "date,tmean,rain\n";
  for (Date d = make_date(2020, 9, 1); d <= make_date(2021, 6, 1); d += std::chrono::days{1}) {
    csv << format_date(d) << ",3,0\n";
  }
  const auto out = parse(csv.str(), tmean_rain_schema(), SeasonWindow::Hardiness);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].season_year, 2020);
  EXPECT_EQ(out[0].dates.front(), make_date(2020, 9, 7));
  EXPECT_EQ(out[0].dates.back(), make_date(2021, 5, 15));
}

TEST(LoadCsv, GapsAndBlanksBecomeMissing) {
  const auto out = parse("date,tmean,rain\n2021-04-01,5,0\n2021-04-02,,NA\n2021-04-04,8,1\n", tmean_rain_schema());
  ASSERT_EQ(out.size(), 1u);
  const auto& s = out[0];
  ASSERT_EQ(s.days(), 4u);
  EXPECT_TRUE(s.missing(1, 0));
  EXPECT_TRUE(s.missing(1, 1));
  EXPECT_TRUE(s.missing(2, 0));
  EXPECT_FALSE(s.missing(3, 0));
  s.validate();
}

TEST(LoadCsv, LocationsAndSchemaMapping) {
  const auto schema = CsvSchema::from_json(nlohmann::json::parse(
      R"({"date_column":"DAY","location_column":"site","features":[{"name":"tmean","column":"T_AVG","unit":"C"}]})"));
  const auto out = parse("DAY,site,T_AVG\n20210401,a,1\n20210401,b,2\n20210402,a,3\n", schema);
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out[0].location_id, "a");
  EXPECT_EQ(out[0].days(), 2u);
  EXPECT_EQ(out[1].location_id, "b");
  EXPECT_DOUBLE_EQ(out[1].values(0, 0), 2.0);
}

TEST(LoadCsv, WriteThenReadRoundTrips) {
  const auto s = simulate_weather(4, ClimateProfile::named("oregon"), make_date(2019, 1, 1), 40);
  const auto path = std::filesystem::temp_directory_path() / "dmc_weather_roundtrip.csv";
  write_csv(path, s);
  const auto back = load_csv(path, CsvSchema::identity(s.features));
  std::filesystem::remove(path);
  ASSERT_EQ(back.size(), 1u);
  EXPECT_EQ(back[0].dates, s.dates);
  EXPECT_EQ(back[0].values, s.values);
}

TEST(Validate, RecordInvariants) {
  WeatherRecord r;
  r.date = make_date(2021, 1, 1);
  r.tmin = 1;
  r.tmean = 3;
  r.tmax = 5;
  EXPECT_NO_THROW(validate_record(r));
  r.tmean = 6;
  EXPECT_THROW(validate_record(r), DataError);
  r.tmean = 3;
  r.rain = -0.1;
  EXPECT_THROW(validate_record(r), DataError);
  r.rain = 0;
  r.hmean = 101;
  EXPECT_THROW(validate_record(r), DataError);
}

TEST(Clean, MidpointInterpolation) {
  // A three-day season with one gap is a third missing, so the gap sits in a longer season.
  const auto r = clean_season(series_of({1, NAN, 3, 4, 5, 6, 7, 8, 9, 10}));
  ASSERT_TRUE(r.series);
  EXPECT_DOUBLE_EQ(r.series->values(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(r.series->values(1, 0), 2.0);
  EXPECT_DOUBLE_EQ(r.series->values(2, 0), 3.0);
  EXPECT_FALSE(r.series->missing.any());
}

TEST(Clean, ElevenPercentRainMissingDiscards) {
  auto s = simulate_weather(1, ClimateProfile{}, make_date(2021, 1, 1), 100);
  const auto rain = static_cast<Eigen::Index>(s.feature_index("rain"));
  for (Eigen::Index t = 10; t < 21; ++t) s.missing(t, rain) = true;
  const auto r = clean_season(s);
  EXPECT_FALSE(r.series);
  EXPECT_NE(r.reason.find("rain"), std::string::npos);
  // Ten percent is still retained.
  s.missing(20, rain) = false;
  EXPECT_TRUE(clean_season(s).series);
}

TEST(Clean, EntirelyMissingDiscards) {
  EXPECT_FALSE(clean_season(series_of({NAN, NAN, NAN})).series);
}

TEST(Clean, NoMissingIsIdentity) {
  const auto s = simulate_weather(2, ClimateProfile{}, make_date(2021, 1, 1), 60);
  const auto r = clean_season(s);
  ASSERT_TRUE(r.series);
  EXPECT_EQ(r.series->values, s.values);
}

TEST(Clean, EndpointsUseNearestValue) {
  std::vector<double> v(30, 0.0);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(i);
  v[0] = NAN;
  v[29] = NAN;
  const auto r = clean_season(series_of(v));
  ASSERT_TRUE(r.series);
  EXPECT_DOUBLE_EQ(r.series->values(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(r.series->values(29, 0), 28.0);
}

TEST(Clean, IdempotentAndBracketed) {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> v(80);
    for (auto& x : v) x = rng.uniform(-10, 30);
    for (int k = 0; k < 8; ++k) v[rng.below(v.size())] = NAN;
    const auto once = clean_season(series_of(v));
    ASSERT_TRUE(once.series);
    const auto twice = clean_season(*once.series);
    ASSERT_TRUE(twice.series);
    EXPECT_EQ(once.series->values, twice.series->values);
    for (std::size_t t = 0; t < v.size(); ++t) {
      if (!std::isnan(v[t])) continue;
      // Nearest observed neighbors.
      std::ptrdiff_t lo = static_cast<std::ptrdiff_t>(t) - 1, hi = static_cast<std::ptrdiff_t>(t) + 1;
      while (lo >= 0 && std::isnan(v[static_cast<std::size_t>(lo)])) --lo;
      while (hi < static_cast<std::ptrdiff_t>(v.size()) && std::isnan(v[static_cast<std::size_t>(hi)])) ++hi;
      double a = lo >= 0 ? v[static_cast<std::size_t>(lo)] : v[static_cast<std::size_t>(hi)];
      double b = hi < static_cast<std::ptrdiff_t>(v.size()) ? v[static_cast<std::size_t>(hi)] : a;
      const double x = once.series->values(static_cast<Eigen::Index>(t), 0);
      EXPECT_GE(x, std::min(a, b) - 1e-12);
      EXPECT_LE(x, std::max(a, b) + 1e-12);
    }
    for (Eigen::Index j = 0; j < missing_fractions(*once.series).size(); ++j) {
      EXPECT_LE(missing_fractions(*once.series)[j], kMaxMissingFraction);
    }
  }
}

TEST(Normalize, ConstantFeatureGivesZeros) {
  const auto [out, stats] = normalize({series_of({4, 4, 4, 4})}, std::nullopt);
  EXPECT_DOUBLE_EQ(stats.stddev[0], 1.0);
  EXPECT_TRUE(out[0].values.col(0).isZero(0.0));
}

TEST(Normalize, DateEmbeddingAtZero) {
  const auto [s, c] = date_embedding(0);
  EXPECT_DOUBLE_EQ(s, 0.0);
  EXPECT_DOUBLE_EQ(c, 1.0);
}

TEST(Normalize, MeanPlusStdIsOne) {
  const std::vector<double> v{1, 2, 3, 4, 5};
  // Oracle: population mean 3, population std sqrt(2).
  const auto [out, stats] = normalize({series_of({1, 2, 3, 4, 5})}, std::nullopt);
  EXPECT_DOUBLE_EQ(stats.mean[0], 3.0);
  EXPECT_NEAR(stats.stddev[0], std::sqrt(2.0), 1e-15);
  NormStats fixed = stats;
  fixed.mean[0] = 2.0;
  fixed.stddev[0] = 2.0;
  const auto one = normalize_one(series_of(v), fixed);
  EXPECT_DOUBLE_EQ(one.values(3, 0), 1.0);
  EXPECT_EQ(one.names.back(), "doy_cos");
}

TEST(Normalize, RoundTripWithStoredStats) {
  std::vector<WeatherSeries> train, test;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    train.push_back(simulate_weather(seed, ClimateProfile{}, make_date(2015 + static_cast<int>(seed), 1, 1), 250));
  }
  test.push_back(simulate_weather(99, ClimateProfile::named("vermont"), make_date(2020, 1, 1), 250));
  const auto [ntrain, stats] = normalize(train, std::nullopt);
  const auto reloaded = NormStats::from_json(stats.to_json());
  const auto [ntest, same] = normalize(test, reloaded);
  const Eigen::MatrixXd back = denormalize(ntest[0], same);
  const double rel = (back - test[0].values).cwiseAbs().maxCoeff() / test[0].values.cwiseAbs().maxCoeff();
  EXPECT_LT(rel, 1e-9);
}

TEST(Simulate, SameSeedIsBitwiseIdentical) {
  const auto a = simulate_weather(7, ClimateProfile{}, make_date(2020, 1, 1), 365);
  const auto b = simulate_weather(7, ClimateProfile{}, make_date(2020, 1, 1), 365);
  const auto c = simulate_weather(8, ClimateProfile{}, make_date(2020, 1, 1), 365);
  EXPECT_EQ(std::memcmp(a.values.data(), b.values.data(), sizeof(double) * a.values.size()), 0);
  EXPECT_NE(a.values, c.values);
}

TEST(Simulate, ZeroNoiseIsPureSinusoid) {
  ClimateProfile p;
  p.noise_scale = 0.0;
  const auto s = simulate_weather(1, p, make_date(2021, 1, 1), 365);
  const auto tmean = s.column("tmean");
  Eigen::Index peak = 0;
  tmean.maxCoeff(&peak);
  EXPECT_EQ(static_cast<int>(peak) + 1, p.tmean_peak_doy);
  for (Eigen::Index t = 0; t < tmean.size(); ++t) {
    const double expect =
        p.tmean_annual + p.tmean_amplitude * std::cos(2.0 * std::numbers::pi * (t + 1 - p.tmean_peak_doy) / 365.0);
    EXPECT_NEAR(tmean[t], expect, 1e-12);
  }
}

TEST(Simulate, JanuaryColderThanJuly) {
  const auto p = ClimateProfile::named("vermont");
  // Oracle: integrate the configured cosine over each month.
  auto month_mean = [&](int first_doy, int days) {
    double acc = 0;
    for (int d = first_doy; d < first_doy + days; ++d) {
      acc += p.tmean_annual + p.tmean_amplitude * std::cos(2.0 * std::numbers::pi * (d - p.tmean_peak_doy) / 365.0);
    }
    return acc / days;
  };
  ASSERT_LT(month_mean(1, 31), month_mean(182, 31));
  const auto s = simulate_weather(3, p, make_date(2021, 1, 1), 365);
  const auto tmean = s.column("tmean");
  EXPECT_LT(tmean.segment(0, 31).mean(), tmean.segment(181, 31).mean());
}

TEST(Simulate, RecordInvariantsHold) {
  for (const char* name : {"washington", "vermont", "oregon", "california"}) {
    const auto s = simulate_weather(5, ClimateProfile::named(name), make_date(2018, 9, 7), 400);
    for (std::size_t t = 0; t < s.days(); ++t) EXPECT_NO_THROW(validate_record(s.record(t))) << name;
    s.validate();
  }
}

TEST(Simulate, DayLength) {
  EXPECT_NEAR(day_length_hours(0.0, 80), 12.0, 1e-9);
  EXPECT_GT(day_length_hours(46.0, 172), 15.0);
  EXPECT_LT(day_length_hours(46.0, 355), 9.0);
}

}  // namespace
}  // namespace dmc
