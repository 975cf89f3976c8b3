#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace cct {

/// Broad failure classes. Each maps to a stable CLI prefix and exit code.
enum class ErrorKind {
  dimension,  // shape contract violated by a kernel
  contract,   // API misuse (non-scalar loss, wrong tape, ...)
  config,     // invalid model/run configuration
  tokenize,   // image geometry incompatible with tokenizer
  format,     // malformed data or checkpoint file
  io,         // file missing / unreadable / unwritable
  numeric,    // NaN or Inf encountered during training
};

inline std::string_view error_kind_name(ErrorKind k) {
  switch (k) {
    case ErrorKind::dimension: return "dimension";
    case ErrorKind::contract: return "contract";
    case ErrorKind::config: return "config";
    case ErrorKind::tokenize: return "tokenize";
    case ErrorKind::format: return "format";
    case ErrorKind::io: return "io";
    case ErrorKind::numeric: return "numeric";
  }
  return "unknown";
}

inline int error_exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::config:
    case ErrorKind::tokenize: return 2;
    case ErrorKind::io: return 3;
    case ErrorKind::format: return 4;
    case ErrorKind::numeric: return 5;
    default: return 1;
  }
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

}  // namespace cct
