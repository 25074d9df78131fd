#include "dmc/dataset.hpp"

#include <gtest/gtest.h>

#include <filesystem>

namespace dmc {
namespace {

namespace fs = std::filesystem;

Dataset two_seasons() {
  Dataset d;
  d.model = CropModel::Ferguson;
  d.cultivars = {"Riesling", "Merlot"};
  d.meta = {{"source", "unit"}};
  const auto profile = ClimateProfile::named("vermont");
  for (int i = 0; i < 2; ++i) {
    Season s;
    s.cultivar = i;
    s.year = 2010 + i;
    s.location = "vt";
    s.weather = simulate_weather(40 + static_cast<std::uint64_t>(i), profile, make_date(s.year, 9, 7), 20 + 5 * static_cast<std::size_t>(i));
    for (std::size_t t = 0; t < s.days(); ++t) {
      s.target.push_back(-2.0 - 0.1 * static_cast<double>(t));
      s.observed.push_back(t % 3 == 0);
    }
    d.seasons.push_back(std::move(s));
  }
  d.seasons[0].onsets[1] = 7;
  return d;
}

TEST(Dataset, SaveLoadRoundTrip) {
  const auto dir = fs::temp_directory_path() / "dmc_dataset_roundtrip";
  fs::remove_all(dir);
  const auto d = two_seasons();
  d.save(dir);
  const auto e = Dataset::load(dir);
  EXPECT_EQ(e.model, CropModel::Ferguson);
  EXPECT_EQ(e.cultivars, d.cultivars);
  EXPECT_EQ(e.meta, d.meta);
  ASSERT_EQ(e.seasons.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    const auto& a = d.seasons[i];
    const auto& b = e.seasons[i];
    EXPECT_EQ(a.cultivar, b.cultivar);
    EXPECT_EQ(a.year, b.year);
    EXPECT_EQ(a.weather.features, b.weather.features);
    EXPECT_EQ(a.weather.dates, b.weather.dates);
    EXPECT_EQ(a.weather.values, b.weather.values);
    EXPECT_EQ(a.target, b.target);
    EXPECT_EQ(a.observed, b.observed);
    EXPECT_EQ(a.onsets, b.onsets);
  }
}

TEST(Dataset, SeasonsOfAndSubset) {
  const auto d = two_seasons();
  EXPECT_EQ(d.seasons_of(1), (std::vector<std::size_t>{1}));
  const std::vector<std::size_t> idx{1};
  const auto s = d.subset(idx);
  ASSERT_EQ(s.seasons.size(), 1u);
  EXPECT_EQ(s.seasons[0].year, 2011);
  EXPECT_EQ(s.cultivars.size(), 2u);
}

TEST(MakeBatch, PadsShorterSeasons) {
  const auto d = two_seasons();
  const auto stats = fit_norm_stats(d.weather());
  const std::vector<std::size_t> idx{0, 1};
  const auto b = make_batch(d, idx, stats);
  ASSERT_EQ(b.days, 25);
  EXPECT_EQ(b.lengths, (std::vector<int>{20, 25}));
  EXPECT_EQ(b.inputs.size(), 25u);
  EXPECT_EQ(b.inputs[0].cols(), static_cast<Eigen::Index>(d.features().size()) + 2);
  const auto tm = d.seasons[0].weather.tmean();
  for (int t = 20; t < 25; ++t) {
    EXPECT_EQ(b.tmean(0, t), tm[19]);
    EXPECT_FALSE(b.observed(0, t));
    EXPECT_TRUE(b.inputs[static_cast<std::size_t>(t)].row(0).isZero());
  }
  EXPECT_TRUE(b.observed(1, 24) == (24 % 3 == 0));
  EXPECT_EQ(b.target(0, 3), d.seasons[0].target[3]);
  EXPECT_EQ(b.onsets(0, 1), 7);
  EXPECT_EQ(b.onsets(1, 1), -1);
}

}  // namespace
}  // namespace dmc
