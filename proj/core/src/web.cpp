#include "distill/web.hpp"

#include <algorithm>
#include <cctype>
#include <map>
#include <optional>

namespace distill {

namespace {

enum class TokenType { text, open, close, comment, declaration };

struct Token {
  TokenType type = TokenType::text;
  std::size_t begin = 0;
  std::size_t end = 0;
  std::string name;
  std::map<std::string, std::string> attrs;
  bool self_closing = false;
};

struct Element {
  std::string name;
  std::map<std::string, std::string> attrs;
  std::size_t open_token = 0;
  std::size_t close_token = 0;  // == open_token for void elements
  std::size_t begin = 0;
  std::size_t end = 0;
  std::optional<std::size_t> parent;
};

struct Dom {
  std::vector<Token> tokens;
  std::vector<Element> elements;          // in order of their opening tags
  std::vector<bool> token_in_boilerplate;
  std::vector<bool> element_in_boilerplate;
};

bool is_void(std::string_view name) {
  return name == "img" || name == "br" || name == "meta" || name == "link" || name == "hr" || name == "input";
}

bool is_boilerplate(std::string_view name) {
  return name == "nav" || name == "footer" || name == "aside" || name == "script" || name == "style";
}

bool is_raw_text(std::string_view name) { return name == "script" || name == "style"; }

int heading_level(std::string_view name) {
  if (name.size() == 2 && name[0] == 'h' && name[1] >= '1' && name[1] <= '6') return name[1] - '0';
  return 0;
}

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f'; }

[[noreturn]] void fail(const std::string& what, std::size_t offset) {
  throw Error(ErrorCode::parse, what + " at offset " + std::to_string(offset));
}

class Tokenizer {
 public:
  explicit Tokenizer(std::string_view m) : m_(m) {}

  std::vector<Token> run() {
    while (pos_ < m_.size()) {
      if (m_[pos_] == '<' && pos_ + 1 < m_.size()) {
        const char next = m_[pos_ + 1];
        if (m_.substr(pos_, 4) == "<!--") {
          comment();
          continue;
        }
        if (next == '!' || next == '?') {
          declaration();
          continue;
        }
        if (next == '/') {
          close_tag();
          continue;
        }
        if (std::isalpha(static_cast<unsigned char>(next))) {
          open_tag();
          continue;
        }
      }
      text();
    }
    return std::move(tokens_);
  }

 private:
  void text() {
    const std::size_t start = pos_;
    ++pos_;
    while (pos_ < m_.size() && m_[pos_] != '<') ++pos_;
    if (!tokens_.empty() && tokens_.back().type == TokenType::text && tokens_.back().end == start) {
      tokens_.back().end = pos_;
    } else {
      tokens_.push_back({TokenType::text, start, pos_, {}, {}, false});
    }
  }

  void comment() {
    const auto close = m_.find("-->", pos_ + 4);
    if (close == std::string_view::npos) fail("unterminated comment", pos_);
    tokens_.push_back({TokenType::comment, pos_, close + 3, {}, {}, false});
    pos_ = close + 3;
  }

  void declaration() {
    const auto close = m_.find('>', pos_);
    if (close == std::string_view::npos) fail("unterminated declaration", pos_);
    tokens_.push_back({TokenType::declaration, pos_, close + 1, {}, {}, false});
    pos_ = close + 1;
  }

  std::string name_at(std::size_t& p) {
    std::string name;
    while (p < m_.size() && (std::isalnum(static_cast<unsigned char>(m_[p])) || m_[p] == '-')) {
      name.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(m_[p]))));
      ++p;
    }
    return name;
  }

  void close_tag() {
    const std::size_t start = pos_;
    std::size_t p = pos_ + 2;
    std::string name = name_at(p);
    while (p < m_.size() && is_space(m_[p])) ++p;
    if (name.empty() || p >= m_.size() || m_[p] != '>') fail("malformed end tag", start);
    tokens_.push_back({TokenType::close, start, p + 1, std::move(name), {}, false});
    pos_ = p + 1;
  }

  void open_tag() {
    const std::size_t start = pos_;
    std::size_t p = pos_ + 1;
    Token tok{TokenType::open, start, 0, name_at(p), {}, false};
    for (;;) {
      while (p < m_.size() && is_space(m_[p])) ++p;
      if (p >= m_.size()) fail("unterminated tag <" + tok.name + ">", start);
      if (m_[p] == '>') {
        ++p;
        break;
      }
      if (m_[p] == '/' && p + 1 < m_.size() && m_[p + 1] == '>') {
        tok.self_closing = true;
        p += 2;
        break;
      }
      std::string attr;
      while (p < m_.size() && !is_space(m_[p]) && m_[p] != '=' && m_[p] != '>' && m_[p] != '/') {
        attr.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(m_[p]))));
        ++p;
      }
      if (attr.empty()) fail("malformed attribute in <" + tok.name + ">", start);
      while (p < m_.size() && is_space(m_[p])) ++p;
      std::string value;
      if (p < m_.size() && m_[p] == '=') {
        ++p;
        while (p < m_.size() && is_space(m_[p])) ++p;
        if (p < m_.size() && (m_[p] == '"' || m_[p] == '\'')) {
          const char quote = m_[p];
          const auto close = m_.find(quote, p + 1);
          if (close == std::string_view::npos) fail("unterminated attribute value", start);
          value = std::string(m_.substr(p + 1, close - p - 1));
          p = close + 1;
        } else {
          while (p < m_.size() && !is_space(m_[p]) && m_[p] != '>') value.push_back(m_[p++]);
        }
      }
      tok.attrs.emplace(std::move(attr), std::move(value));
    }
    tok.end = p;
    pos_ = p;
    const std::string name = tok.name;
    const bool raw = is_raw_text(name) && !tok.self_closing;
    tokens_.push_back(std::move(tok));
    if (raw) raw_text(name);
  }

  void raw_text(const std::string& name) {
    const std::string needle = "</" + name;
    std::size_t p = pos_;
    for (;;) {
      p = m_.find("</", p);
      if (p == std::string_view::npos) return;  // reported as unclosed by the tree pass
      if (ascii_lower(m_.substr(p, needle.size())) == needle) break;
      p += 2;
    }
    if (p > pos_) tokens_.push_back({TokenType::text, pos_, p, {}, {}, false});
    pos_ = p;
  }

  std::string_view m_;
  std::size_t pos_ = 0;
  std::vector<Token> tokens_;
};

Dom parse(std::string_view markup) {
  Dom dom;
  dom.tokens = Tokenizer(markup).run();
  std::vector<std::size_t> stack;  // element indices
  for (std::size_t t = 0; t < dom.tokens.size(); ++t) {
    const Token& tok = dom.tokens[t];
    if (tok.type == TokenType::open) {
      Element e;
      e.name = tok.name;
      e.attrs = tok.attrs;
      e.open_token = t;
      e.close_token = t;
      e.begin = tok.begin;
      e.end = tok.end;
      if (!stack.empty()) e.parent = stack.back();
      dom.elements.push_back(std::move(e));
      if (!tok.self_closing && !is_void(tok.name)) stack.push_back(dom.elements.size() - 1);
    } else if (tok.type == TokenType::close) {
      if (is_void(tok.name)) continue;
      if (stack.empty() || dom.elements[stack.back()].name != tok.name) {
        fail("unbalanced </" + tok.name + ">", tok.begin);
      }
      Element& e = dom.elements[stack.back()];
      e.close_token = t;
      e.end = tok.end;
      stack.pop_back();
    }
  }
  if (!stack.empty()) {
    const Element& e = dom.elements[stack.back()];
    fail("unclosed <" + e.name + ">", e.begin);
  }

  dom.token_in_boilerplate.assign(dom.tokens.size(), false);
  dom.element_in_boilerplate.assign(dom.elements.size(), false);
  for (std::size_t i = 0; i < dom.elements.size(); ++i) {
    const Element& e = dom.elements[i];
    const bool inherited = e.parent && dom.element_in_boilerplate[*e.parent];
    dom.element_in_boilerplate[i] = inherited || is_boilerplate(e.name);
    if (dom.element_in_boilerplate[i] && !inherited) {
      for (std::size_t t = e.open_token; t <= e.close_token; ++t) dom.token_in_boilerplate[t] = true;
    }
  }
  return dom;
}

std::string collapse_whitespace(std::string_view text) {
  std::string out;
  bool pending_space = false;
  for (char c : text) {
    if (is_space(c) || c == '\v') {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(c);
  }
  return out;
}

std::string raw_inner_text(const Dom& dom, const Element& e, std::string_view markup) {
  std::string out;
  for (std::size_t t = e.open_token + 1; t < e.close_token; ++t) {
    const Token& tok = dom.tokens[t];
    if (tok.type == TokenType::text && !dom.token_in_boilerplate[t]) {
      out.append(markup.substr(tok.begin, tok.end - tok.begin));
    }
  }
  return out;
}

bool has_ancestor(const Dom& dom, const Element& e, bool (*pred)(std::string_view)) {
  for (auto p = e.parent; p; p = dom.elements[*p].parent) {
    if (pred(dom.elements[*p].name)) return true;
  }
  return false;
}

bool is_running_text(std::string_view name) { return name == "p" || name == "pre" || heading_level(name) > 0; }

Provenance with_locator(const Provenance& p, const DomBlock& b) {
  Provenance out = p;
  out.locator = "offset=" + std::to_string(b.begin) + "-" + std::to_string(b.end);
  return out;
}

void append_utf8(std::string& out, unsigned long cp) {
  if (cp == 0 || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) cp = 0xFFFD;
  out += utf8_encode({static_cast<char32_t>(cp)});
}

}  // namespace

std::string_view to_string(BlockKind kind) {
  switch (kind) {
    case BlockKind::section:
      return "section";
    case BlockKind::paragraph:
      return "paragraph";
    case BlockKind::code:
      return "code";
    case BlockKind::figure:
      return "figure";
  }
  return "paragraph";
}

std::string decode_entities(std::string_view text) {
  static const std::map<std::string, std::string, std::less<>> named = {
      {"amp", "&"}, {"lt", "<"}, {"gt", ">"}, {"quot", "\""}, {"apos", "'"}, {"nbsp", "\xC2\xA0"},
  };
  std::string out;
  std::size_t i = 0;
  while (i < text.size()) {
    if (text[i] != '&') {
      out.push_back(text[i++]);
      continue;
    }
    const auto semi = text.find(';', i + 1);
    if (semi == std::string_view::npos || semi - i > 10) {
      out.push_back(text[i++]);
      continue;
    }
    const std::string_view ref = text.substr(i + 1, semi - i - 1);
    if (ref.size() > 1 && ref[0] == '#') {
      const bool hex = ref[1] == 'x' || ref[1] == 'X';
      const std::string digits(ref.substr(hex ? 2 : 1));
      const bool valid = !digits.empty() && std::all_of(digits.begin(), digits.end(), [&](char c) {
        return hex ? std::isxdigit(static_cast<unsigned char>(c)) : std::isdigit(static_cast<unsigned char>(c));
      });
      if (valid) {
        append_utf8(out, std::stoul(digits, nullptr, hex ? 16 : 10));
        i = semi + 1;
        continue;
      }
    } else if (auto it = named.find(ref); it != named.end()) {
      out += it->second;
      i = semi + 1;
      continue;
    }
    out.push_back(text[i++]);
  }
  return out;
}

std::string strip_boilerplate(std::string_view markup) {
  const Dom dom = parse(markup);
  std::string out;
  std::size_t cursor = 0;
  for (std::size_t i = 0; i < dom.elements.size(); ++i) {
    const Element& e = dom.elements[i];
    if (!is_boilerplate(e.name) || (e.parent && dom.element_in_boilerplate[*e.parent])) continue;
    out.append(markup.substr(cursor, e.begin - cursor));
    cursor = e.end;
  }
  out.append(markup.substr(cursor));
  return out;
}

std::vector<DomBlock> extract_blocks(std::string_view markup) {
  const Dom dom = parse(markup);
  std::vector<DomBlock> blocks;
  for (std::size_t i = 0; i < dom.elements.size(); ++i) {
    if (dom.element_in_boilerplate[i]) continue;
    const Element& e = dom.elements[i];
    DomBlock b;
    b.begin = e.begin;
    b.end = e.end;
    if (const int level = heading_level(e.name); level > 0) {
      b.kind = BlockKind::section;
      b.level = level;
      b.text = collapse_whitespace(decode_entities(raw_inner_text(dom, e, markup)));
    } else if (e.name == "p") {
      b.kind = BlockKind::paragraph;
      b.text = collapse_whitespace(decode_entities(raw_inner_text(dom, e, markup)));
    } else if (e.name == "pre" || (e.name == "code" && !has_ancestor(dom, e, is_running_text))) {
      b.kind = BlockKind::code;
      b.text = raw_inner_text(dom, e, markup);
      if (trim(b.text).empty()) continue;
      blocks.push_back(std::move(b));
      continue;
    } else if (e.name == "img") {
      const auto alt = e.attrs.find("alt");
      if (alt == e.attrs.end()) continue;
      b.kind = BlockKind::figure;
      b.text = collapse_whitespace(decode_entities(alt->second));
    } else {
      continue;
    }
    if (!b.text.empty()) blocks.push_back(std::move(b));
  }
  return blocks;
}

ContextState blocks_to_state(std::span<const DomBlock> blocks, const Provenance& source) {
  ContextState state;
  std::vector<std::size_t> sections;  // indices of sections seen so far
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const DomBlock& b = blocks[i];
    const std::string id = "w" + std::to_string(i);
    const Provenance prov = with_locator(source, b);
    if (b.kind == BlockKind::paragraph) {
      state.observations.push_back({id, b.text, 0.0, {prov}});
    } else {
      Entity e;
      e.id = id;
      e.kind = b.kind == BlockKind::section ? EntityKind::section
               : b.kind == BlockKind::code  ? EntityKind::code_block
                                            : EntityKind::figure;
      e.text = b.text;
      e.span = CharSpan{static_cast<std::int64_t>(b.begin), static_cast<std::int64_t>(b.end)};
      if (b.kind == BlockKind::section) e.attributes["level"] = std::to_string(b.level);
      e.provenance = {prov};
      state.entities.push_back(std::move(e));
    }
    const int own_level = b.kind == BlockKind::section ? b.level : 7;
    for (auto it = sections.rbegin(); it != sections.rend(); ++it) {
      if (blocks[*it].level < own_level) {
        state.relations.push_back({"w" + std::to_string(*it) + "c" + std::to_string(i), RelationKind::contains,
                                   "w" + std::to_string(*it), id, 0.0, {prov}});
        break;
      }
    }
    if (b.kind == BlockKind::section) sections.push_back(i);
  }
  rebuild_provenance_index(state);
  return state;
}

std::vector<PageSegment> blocks_to_segments(std::span<const DomBlock> blocks, const Provenance& source) {
  std::vector<PageSegment> out;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const std::string id = "p0b" + std::to_string(i);
    out.push_back({id, 0, i, blocks[i].text, with_locator(source, blocks[i]), false});
  }
  return out;
}

}  // namespace distill
