// Shared error types, checked assertions and seed utilities.
#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>

namespace advseg {

// ---------------------------------------------------------------------------
// Error hierarchy. Everything thrown by the library derives from Error so
// callers can catch one type at the CLI boundary.
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor shape / dimension violations.
struct ShapeError : Error {
  using Error::Error;
};

// Caller broke an operation's stated precondition.
struct ContractError : Error {
  using Error::Error;
};

// Numeric-domain violations (log of non-positive, division by zero, NaN grads).
struct NumericError : Error {
  using Error::Error;
};

// Malformed on-disk artifacts (checkpoints, dataset directories).
struct FormatError : Error {
  using Error::Error;
};

// Invalid or unknown configuration.
struct ConfigError : Error {
  using Error::Error;
};

// Statistical test cannot run on the given sample.
struct InsufficientDataError : Error {
  using Error::Error;
};

// Training aborted after repeated non-finite steps.
struct TrainingDiverged : Error {
  using Error::Error;
};

namespace detail {

inline void cat_into(std::ostringstream&) {}

template <typename Head, typename... Tail>
void cat_into(std::ostringstream& os, Head&& head, Tail&&... tail) {
  os << std::forward<Head>(head);
  cat_into(os, std::forward<Tail>(tail)...);
}

template <typename... Args>
std::string cat(Args&&... args) {
  std::ostringstream os;
  cat_into(os, std::forward<Args>(args)...);
  return os.str();
}

}  // namespace detail

#define ADVSEG_THROW(ExType, ...) throw ExType(::advseg::detail::cat(__VA_ARGS__))

#define ADVSEG_CHECK(cond, ExType, ...)        \
  do {                                         \
    if (!(cond)) ADVSEG_THROW(ExType, __VA_ARGS__); \
  } while (0)

// ---------------------------------------------------------------------------
// Seed mixing. splitmix64 gives well-dispersed substreams from one master
// seed so each (subject, slice, fold, ...) gets an independent RNG.
// ---------------------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  return splitmix64(seed ^ splitmix64(salt));
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  return mix_seed(mix_seed(seed, a), b);
}

}  // namespace advseg
