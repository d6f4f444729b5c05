#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace distill {

enum class MediaKind { image, audio, pdf, html, plain_text, unknown };
enum class Modality { text, image, audio, document, url };
enum class SafetyVerdict { allow, flag, deny };

std::string_view to_string(MediaKind kind);
MediaKind parse_media_kind(std::string_view text);
std::string_view to_string(Modality m);
std::string_view to_string(SafetyVerdict v);

struct Attachment {
  std::string name;
  MediaKind media_kind = MediaKind::unknown;
  std::string payload;  // raw bytes
  bool sniffed = false;
};

struct Request {
  std::string id;
  std::optional<std::string> text;
  std::vector<Attachment> attachments;
  std::vector<std::string> declared_urls;
  std::map<std::string, std::string> overrides;
  /// URLs rejected by normalization; kept for the trace, never fetched.
  std::vector<std::string> flagged_urls;
};

using ModalitySet = std::set<Modality>;

struct IngressSummary {
  ModalitySet modalities;
  SafetyVerdict safety = SafetyVerdict::allow;
  std::string intent_hint;
  /// Pattern of the rule that produced a flag/deny verdict.
  std::string matched_rule;
};

/// Magic-byte sniff: PNG, JPEG, RIFF/WAVE, %PDF-, HTML markers, then
/// NUL-free UTF-8 text. Anything else is unknown.
MediaKind sniff_media_kind(std::string_view payload);

/// Trims text, sniffs every attachment, validates and deduplicates URLs.
Request normalize_request(Request request);

/// Throws Error(invalid_argument, "no content") for an empty request.
ModalitySet detect_modalities(const Request& request);

bool is_valid_url(std::string_view url);

struct SafetyRule {
  SafetyVerdict action = SafetyVerdict::flag;
  std::string pattern;  // ECMAScript regex, case-insensitive
};

/// Parses "deny:<pattern>" / "flag:<pattern>" lines. Blank lines and lines
/// starting with '#' are skipped. Throws Error(config) with the line number.
std::vector<SafetyRule> parse_safety_rules(std::string_view text);

struct SafetyResult {
  SafetyVerdict verdict = SafetyVerdict::allow;
  std::string matched_rule;
};

/// First matching rule wins; default allow. Only the request text is read.
SafetyResult safety_check(const Request& request, const std::vector<SafetyRule>& rules);

/// Coarse free-form hint: "none", "question" or "instruction".
std::string intent_hint(const Request& request);

IngressSummary summarize(const Request& normalized, const std::vector<SafetyRule>& rules);

}  // namespace distill
