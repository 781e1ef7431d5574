// saasr/common.h
//
// Shared error types and small string helpers.

#ifndef SAASR_COMMON_H_
#define SAASR_COMMON_H_

#include <sstream>
#include <stdexcept>
#include <string>

namespace saasr {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape disagreement between tensors or between a tensor and a contract.
struct DimensionError : Error {
  using Error::Error;
};

// Out-of-range index (token id, speaker index, target class, ...).
struct IndexError : Error {
  using Error::Error;
};

// Bad user-supplied configuration or input file.
struct ConfigError : Error {
  using Error::Error;
};

template <typename... Args>
std::string str_cat(Args&&... args) {
  std::ostringstream os;
  (os << ... << args);
  return os.str();
}

#define SAASR_REQUIRE(cond, exc, ...)                 \
  do {                                                \
    if (!(cond)) throw exc(::saasr::str_cat(__VA_ARGS__)); \
  } while (0)

}  // namespace saasr

#endif  // SAASR_COMMON_H_
