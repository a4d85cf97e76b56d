#pragma once

#include <stdexcept>
#include <string>

namespace revcal {

// Error categories. The numeric values are the process exit codes used by the
// CLI and the status codes returned through the C API.
enum class ErrorKind : int {
  config = 1,   // invalid configuration, argument or precondition
  io = 2,       // unreadable/unwritable file, corrupt container, bad format
  numeric = 3,  // non-finite values or loss
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(const std::string& what) { throw Error(ErrorKind::config, what); }
[[noreturn]] inline void fail_io(const std::string& what) { throw Error(ErrorKind::io, what); }
[[noreturn]] inline void fail_numeric(const std::string& what) { throw Error(ErrorKind::numeric, what); }

}  // namespace revcal
