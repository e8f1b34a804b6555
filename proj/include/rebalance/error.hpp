#pragma once

#include <stdexcept>
#include <string>

namespace rebalance {

/// Failure category. Doubles as the CLI exit-code family.
enum class ErrorKind {
  Config,    // invalid parameters or configuration (exit 2)
  Data,      // malformed or insufficient input data (exit 3)
  Protocol,  // wire-protocol or sequencing violation (exit 4)
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, std::string code, const std::string& message)
      : std::runtime_error(message), kind_(kind), code_(std::move(code)) {}

  ErrorKind kind() const noexcept { return kind_; }
  /// Short machine-readable tag, e.g. "parse", "schema", "sequencing".
  const std::string& code() const noexcept { return code_; }

 private:
  ErrorKind kind_;
  std::string code_;
};

inline Error config_error(const std::string& msg) {
  return Error(ErrorKind::Config, "config", msg);
}
inline Error domain_error(const std::string& msg) {
  return Error(ErrorKind::Data, "domain", msg);
}
inline Error data_error(const std::string& code, const std::string& msg) {
  return Error(ErrorKind::Data, code, msg);
}
inline Error protocol_error(const std::string& code, const std::string& msg) {
  return Error(ErrorKind::Protocol, code, msg);
}

inline int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Config: return 2;
    case ErrorKind::Data: return 3;
    case ErrorKind::Protocol: return 4;
  }
  return 1;
}

}  // namespace rebalance
