#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace fpbc {

// Every failure surfaces as an Error carrying a stable machine-readable code
// (e.g. "MissingField", "ShapeMismatch") plus a human-readable message.
class Error : public std::runtime_error {
  public:
    Error(std::string code, const std::string& message)
        : std::runtime_error(code + ": " + message), code_(std::move(code)) {}

    const std::string& code() const noexcept { return code_; }

  private:
    std::string code_;
};

[[noreturn]] inline void fail(const std::string& code, const std::string& message) {
    throw Error(code, message);
}

} // namespace fpbc
