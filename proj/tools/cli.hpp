#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace dmc::cli {

/// Bad configuration or usage; the command exits with status 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Runs one command line. Returns the process exit status.
int run(const std::vector<std::string>& args);

}  // namespace dmc::cli
