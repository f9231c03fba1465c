#pragma once

#include <stdexcept>
#include <string>

namespace ekimf {

// Error taxonomy shared across the library. Every failure mode that callers
// are expected to handle gets its own type; plain std::runtime_error is
// reserved for internal invariant violations.

struct NotPositiveDefinite : std::runtime_error {
  explicit NotPositiveDefinite(const std::string& what)
      : std::runtime_error(what) {}
};

struct RankDeficient : std::runtime_error {
  explicit RankDeficient(const std::string& what) : std::runtime_error(what) {}
};

struct SingularUpdate : std::runtime_error {
  explicit SingularUpdate(const std::string& what) : std::runtime_error(what) {}
};

struct Diverged : std::runtime_error {
  Diverged(const std::string& what, long step_index)
      : std::runtime_error(what), step(step_index) {}
  long step;
};

struct NonlinearModel : std::runtime_error {
  explicit NonlinearModel(const std::string& what) : std::runtime_error(what) {}
};

struct EmptyInput : std::invalid_argument {
  explicit EmptyInput(const std::string& what) : std::invalid_argument(what) {}
};

struct SizeMismatch : std::invalid_argument {
  explicit SizeMismatch(const std::string& what) : std::invalid_argument(what) {}
};

struct TooLarge : std::invalid_argument {
  explicit TooLarge(const std::string& what) : std::invalid_argument(what) {}
};

struct DegenerateFit : std::invalid_argument {
  explicit DegenerateFit(const std::string& what)
      : std::invalid_argument(what) {}
};

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace ekimf
