#pragma once

#include <stdexcept>
#include <string>

namespace rwre {

enum class ErrorCode {
  config_invalid,
  capacity,
  invalid_epsilon,
  version_mismatch,
  corrupt_payload,
  singular_system,
  degenerate_field,
  symmetry_violation,
  domain_violation,
  walk_limit,
  quadrature_nonconvergence,
  solver_failure,
};

inline const char* to_string(ErrorCode c) {
  switch (c) {
    case ErrorCode::config_invalid: return "config-invalid";
    case ErrorCode::capacity: return "capacity";
    case ErrorCode::invalid_epsilon: return "invalid-epsilon";
    case ErrorCode::version_mismatch: return "version-mismatch";
    case ErrorCode::corrupt_payload: return "corrupt-payload";
    case ErrorCode::singular_system: return "singular-system";
    case ErrorCode::degenerate_field: return "degenerate-field";
    case ErrorCode::symmetry_violation: return "symmetry-violation";
    case ErrorCode::domain_violation: return "domain-violation";
    case ErrorCode::walk_limit: return "walk-limit";
    case ErrorCode::quadrature_nonconvergence: return "quadrature-nonconvergence";
    case ErrorCode::solver_failure: return "solver-failure";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}
  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace rwre
