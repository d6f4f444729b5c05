#pragma once

#include <chrono>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace distill {

/// Error codes shared across the runtime. The string form is what crosses
/// the wire and what the gateway reports.
enum class ErrorCode {
  invalid_argument,
  parse,
  protocol,
  timeout,
  unavailable,
  unsupported,
  no_feasible_chain,
  chains_exhausted,
  deadline,
  config,
};

std::string_view to_string(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

/// Lowercase hex SHA-256 of `bytes`.
std::string sha256_hex(std::string_view bytes);

std::string base64_encode(std::string_view bytes);
/// Throws Error(parse) on malformed input.
std::string base64_decode(std::string_view text);

using Timestamp = std::chrono::sys_seconds;

/// "YYYY-MM-DDTHH:MM:SSZ"
std::string format_timestamp(Timestamp t);
/// Inverse of format_timestamp; throws Error(parse).
Timestamp parse_timestamp(std::string_view text);

/// Source of provenance timestamps. A fixed clock keeps golden output stable.
class Clock {
 public:
  Clock() = default;
  explicit Clock(Timestamp fixed) : fixed_(fixed), is_fixed_(true) {}

  Timestamp now() const;
  bool is_fixed() const { return is_fixed_; }

 private:
  Timestamp fixed_{};
  bool is_fixed_ = false;
};

/// Decodes UTF-8 into code points; invalid bytes map to U+FFFD one byte at a time.
std::vector<char32_t> utf8_decode(std::string_view text);
std::string utf8_encode(const std::vector<char32_t>& cps);
bool is_valid_utf8(std::string_view text);

std::string ascii_lower(std::string_view text);
std::string_view trim(std::string_view text);

/// Lowercased maximal ASCII-alphanumeric runs, in order of appearance.
std::vector<std::string> alnum_terms(std::string_view text);

}  // namespace distill
