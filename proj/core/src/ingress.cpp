#include "distill/ingress.hpp"

#include <algorithm>
#include <regex>
#include <unordered_set>

#include "distill/common.hpp"

namespace distill {

std::string_view to_string(MediaKind kind) {
  switch (kind) {
    case MediaKind::image: return "image";
    case MediaKind::audio: return "audio";
    case MediaKind::pdf: return "pdf";
    case MediaKind::html: return "html";
    case MediaKind::plain_text: return "plain_text";
    case MediaKind::unknown: return "unknown";
  }
  return "unknown";
}

MediaKind parse_media_kind(std::string_view text) {
  for (auto k : {MediaKind::image, MediaKind::audio, MediaKind::pdf, MediaKind::html, MediaKind::plain_text,
                 MediaKind::unknown}) {
    if (to_string(k) == text) return k;
  }
  throw Error(ErrorCode::parse, "unknown media kind '" + std::string(text) + "'");
}

std::string_view to_string(Modality m) {
  switch (m) {
    case Modality::text: return "text";
    case Modality::image: return "image";
    case Modality::audio: return "audio";
    case Modality::document: return "document";
    case Modality::url: return "url";
  }
  return "unknown";
}

std::string_view to_string(SafetyVerdict v) {
  switch (v) {
    case SafetyVerdict::allow: return "allow";
    case SafetyVerdict::flag: return "flag";
    case SafetyVerdict::deny: return "deny";
  }
  return "allow";
}

MediaKind sniff_media_kind(std::string_view payload) {
  auto starts = [&](std::string_view magic) { return payload.substr(0, magic.size()) == magic; };
  if (starts(std::string_view("\x89PNG\r\n\x1a\n", 8))) return MediaKind::image;
  if (starts("\xFF\xD8\xFF")) return MediaKind::image;
  if (payload.size() >= 12 && starts("RIFF") && payload.substr(8, 4) == "WAVE") return MediaKind::audio;
  if (starts("%PDF-")) return MediaKind::pdf;

  if (payload.find('\0') != std::string_view::npos || !is_valid_utf8(payload)) return MediaKind::unknown;
  const std::string head = ascii_lower(trim(payload.substr(0, 1024)));
  if (head.starts_with("<!doctype html") || head.starts_with("<html") || head.find("<html") != std::string::npos ||
      head.find("<body") != std::string::npos) {
    return MediaKind::html;
  }
  return payload.empty() ? MediaKind::unknown : MediaKind::plain_text;
}

bool is_valid_url(std::string_view url) {
  static const std::regex kUrl(R"(^https?://[A-Za-z0-9.-]+(:[0-9]{1,5})?(/[^\s]*)?$)", std::regex::icase);
  return std::regex_match(url.begin(), url.end(), kUrl);
}

Request normalize_request(Request request) {
  if (request.text) {
    request.text = std::string(trim(*request.text));
    if (request.text->empty()) request.text.reset();
  }
  for (auto& a : request.attachments) {
    const MediaKind sniffed = sniff_media_kind(a.payload);
    // Markup without an <html>/<body> marker sniffs as plain text; a caller
    // that declared html keeps it.
    if (sniffed == MediaKind::plain_text && a.media_kind == MediaKind::html) {
      a.sniffed = true;
      continue;
    }
    a.media_kind = sniffed;
    a.sniffed = sniffed != MediaKind::unknown;
  }
  std::vector<std::string> urls;
  std::unordered_set<std::string> seen;
  for (const auto& raw : request.declared_urls) {
    const std::string url(trim(raw));
    if (!seen.insert(url).second) continue;
    if (is_valid_url(url)) {
      urls.push_back(url);
    } else if (std::find(request.flagged_urls.begin(), request.flagged_urls.end(), url) ==
               request.flagged_urls.end()) {
      request.flagged_urls.push_back(url);
    }
  }
  request.declared_urls = std::move(urls);
  return request;
}

ModalitySet detect_modalities(const Request& request) {
  const bool has_text = request.text && !trim(*request.text).empty();
  if (!has_text && request.attachments.empty() && request.declared_urls.empty()) {
    throw Error(ErrorCode::invalid_argument, "no content");
  }
  ModalitySet out;
  if (has_text) out.insert(Modality::text);
  for (const auto& a : request.attachments) {
    switch (a.media_kind) {
      case MediaKind::image: out.insert(Modality::image); break;
      case MediaKind::audio: out.insert(Modality::audio); break;
      case MediaKind::pdf:
      case MediaKind::html:
      case MediaKind::plain_text: out.insert(Modality::document); break;
      case MediaKind::unknown: break;
    }
  }
  if (!request.declared_urls.empty()) out.insert(Modality::url);
  return out;
}

std::vector<SafetyRule> parse_safety_rules(std::string_view text) {
  std::vector<SafetyRule> rules;
  std::size_t line_no = 0;
  while (!text.empty()) {
    ++line_no;
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    line = trim(line);
    if (line.empty() || line.front() == '#') continue;
    SafetyRule rule;
    if (line.starts_with("deny:")) {
      rule.action = SafetyVerdict::deny;
      line.remove_prefix(5);
    } else if (line.starts_with("flag:")) {
      rule.action = SafetyVerdict::flag;
      line.remove_prefix(5);
    } else {
      throw Error(ErrorCode::config, "rules line " + std::to_string(line_no) +
                                         ": expected 'deny:' or 'flag:' prefix");
    }
    rule.pattern = std::string(trim(line));
    if (rule.pattern.empty()) {
      throw Error(ErrorCode::config, "rules line " + std::to_string(line_no) + ": empty pattern");
    }
    try {
      std::regex probe(rule.pattern);
    } catch (const std::regex_error&) {
      throw Error(ErrorCode::config, "rules line " + std::to_string(line_no) + ": invalid pattern '" +
                                         rule.pattern + "'");
    }
    rules.push_back(std::move(rule));
  }
  return rules;
}

SafetyResult safety_check(const Request& request, const std::vector<SafetyRule>& rules) {
  const std::string text = request.text.value_or("");
  for (const auto& rule : rules) {
    const std::regex re(rule.pattern, std::regex::ECMAScript | std::regex::icase);
    if (std::regex_search(text, re)) return {rule.action, rule.pattern};
  }
  return {};
}

std::string intent_hint(const Request& request) {
  if (!request.text) return "none";
  return request.text->ends_with('?') ? "question" : "instruction";
}

IngressSummary summarize(const Request& normalized, const std::vector<SafetyRule>& rules) {
  IngressSummary s;
  s.modalities = detect_modalities(normalized);
  const auto safety = safety_check(normalized, rules);
  s.safety = safety.verdict;
  s.matched_rule = safety.matched_rule;
  s.intent_hint = intent_hint(normalized);
  return s;
}

}  // namespace distill
