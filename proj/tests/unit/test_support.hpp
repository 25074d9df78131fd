#pragma once

#include "dmc/rng.hpp"

#include <cmath>
#include <numbers>
#include <vector>

namespace dmc::test {

/// Seasonal temperature trace: cosine annual cycle plus Gaussian noise.
inline std::vector<double> seasonal_temps(Rng& rng, int days, double mean, double amplitude, double peak_day,
                                          double noise) {
  std::vector<double> t(static_cast<std::size_t>(days));
  for (int d = 0; d < days; ++d) {
    t[static_cast<std::size_t>(d)] =
        mean + amplitude * std::cos(2.0 * std::numbers::pi * (d - peak_day) / 365.0) + noise * rng.normal();
  }
  return t;
}

}  // namespace dmc::test
