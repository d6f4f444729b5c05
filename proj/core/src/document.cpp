#include "distill/document.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <numeric>
#include <tuple>

namespace distill {

using nlohmann::json;

namespace {

bool is_space_cp(char32_t c) { return c == U' ' || c == U'\t' || c == U'\n' || c == U'\r' || c == U'\f' || c == U'\v'; }

double vertical_overlap(const Box& a, const Box& b) {
  return std::max(0.0, std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min));
}

double center_x(const Box& b) { return 0.5 * (b.x_min + b.x_max); }

Box box_from_json(const json& j) {
  return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>(), j.at(3).get<double>()};
}

json box_to_json(const Box& b) { return {b.x_min, b.y_min, b.x_max, b.y_max}; }

Provenance with_locator(const Provenance& p, std::string locator) {
  Provenance out = p;
  out.locator = std::move(locator);
  return out;
}

}  // namespace

Box Quad::bounds() const {
  Box b{corners[0].x, corners[0].y, corners[0].x, corners[0].y};
  for (const auto& c : corners) {
    b.x_min = std::min(b.x_min, c.x);
    b.y_min = std::min(b.y_min, c.y);
    b.x_max = std::max(b.x_max, c.x);
    b.y_max = std::max(b.y_max, c.y);
  }
  return b;
}

double Quad::area() const {
  double acc = 0.0;
  for (std::size_t i = 0; i < 4; ++i) {
    const auto& p = corners[i];
    const auto& q = corners[(i + 1) % 4];
    acc += p.x * q.y - q.x * p.y;
  }
  return 0.5 * acc;
}

Quad quad_from_box(const Box& b) {
  return Quad{{Point{b.x_min, b.y_min}, Point{b.x_max, b.y_min}, Point{b.x_max, b.y_max}, Point{b.x_min, b.y_max}}};
}

std::size_t visible_length(std::string_view text) {
  std::size_t n = 0;
  for (char32_t c : utf8_decode(text)) n += is_space_cp(c) ? 0 : 1;
  return n;
}

double line_confidence(std::span<const Word> words) {
  if (words.empty()) throw Error(ErrorCode::invalid_argument, "line_confidence needs at least one word");
  double num = 0.0;
  double den = 0.0;
  for (const auto& w : words) {
    const auto len = static_cast<double>(visible_length(w.text));
    num += len * w.confidence;
    den += len;
  }
  if (den == 0.0) {
    // Only whitespace words: fall back to the plain mean.
    for (const auto& w : words) num += w.confidence;
    return num / static_cast<double>(words.size());
  }
  return num / den;
}

std::vector<Word> interpolate_word_boxes(const Box& line_box, std::string_view line_text, double confidence) {
  if (line_text.empty()) throw Error(ErrorCode::invalid_argument, "interpolate_word_boxes needs text");
  if (line_box.width() <= 0.0) throw Error(ErrorCode::invalid_argument, "interpolate_word_boxes: zero-width box");
  const auto cps = utf8_decode(line_text);
  const double per_char = line_box.width() / static_cast<double>(cps.size());
  std::vector<Word> words;
  std::size_t i = 0;
  while (i < cps.size()) {
    if (is_space_cp(cps[i])) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < cps.size() && !is_space_cp(cps[j])) ++j;
    Word w;
    w.text = utf8_encode(std::vector<char32_t>(cps.begin() + static_cast<std::ptrdiff_t>(i),
                                               cps.begin() + static_cast<std::ptrdiff_t>(j)));
    w.box = {line_box.x_min + per_char * static_cast<double>(i), line_box.y_min,
             j == cps.size() ? line_box.x_max : line_box.x_min + per_char * static_cast<double>(j), line_box.y_max};
    w.confidence = confidence;
    words.push_back(std::move(w));
    i = j;
  }
  return words;
}

double reading_edge_score(const Line& a, const Line& b, double page_width) {
  if (page_width <= 0.0) throw Error(ErrorCode::invalid_argument, "page_width must be positive");
  const double ha = a.box.height();
  const double hb = b.box.height();
  if (ha <= 0.0 || hb <= 0.0) return 0.0;
  const double vo = std::clamp(vertical_overlap(a.box, b.box) / std::min(ha, hb), 0.0, 1.0);
  const double gap = std::max(0.0, std::max(a.box.x_min, b.box.x_min) - std::min(a.box.x_max, b.box.x_max));
  const double hd = std::clamp(gap / page_width, 0.0, 1.0);
  const double fmax = std::max(a.font_height, b.font_height);
  const double fh = fmax > 0.0 ? std::min(a.font_height, b.font_height) / fmax : 0.0;
  return 0.5 * vo + 0.3 * (1.0 - hd) + 0.2 * fh;
}

std::vector<std::size_t> column_keys(std::span<const Line> lines, double page_width, double column_gap) {
  std::vector<std::size_t> idx(lines.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return lines[a].box.x_min < lines[b].box.x_min; });
  std::vector<std::size_t> keys(lines.size(), 0);
  std::size_t column = 0;
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (k > 0 && lines[idx[k]].box.x_min - lines[idx[k - 1]].box.x_min > column_gap * page_width) ++column;
    keys[idx[k]] = column;
  }
  return keys;
}

std::vector<Line> reading_order(std::span<const Line> lines, double page_width, double edge_threshold,
                                double column_gap) {
  const std::size_t n = lines.size();
  const auto cols = column_keys(lines, page_width, column_gap);
  std::vector<bool> visited(n, false);
  std::vector<Line> out;
  out.reserve(n);
  auto position = [&](std::size_t i) { return std::tuple(lines[i].box.y_min, lines[i].box.x_min, i); };

  while (out.size() < n) {
    std::size_t head = n;
    for (std::size_t i = 0; i < n; ++i) {
      if (visited[i]) continue;
      if (head == n || std::tuple(cols[i], position(i)) < std::tuple(cols[head], position(head))) head = i;
    }
    std::size_t cur = head;
    for (;;) {
      visited[cur] = true;
      out.push_back(lines[cur]);
      const Box& cb = lines[cur].box;
      // Edges go to same-column lines continuing the current row to the
      // right, or to the nearest row below.
      std::vector<std::size_t> below;
      std::vector<std::size_t> candidates;
      for (std::size_t j = 0; j < n; ++j) {
        if (visited[j] || cols[j] != cols[cur]) continue;
        const Box& b = lines[j].box;
        if (vertical_overlap(cb, b) > 0.0) {
          if (center_x(b) > center_x(cb)) candidates.push_back(j);
        } else if (b.y_min >= cb.y_min) {
          below.push_back(j);
        }
      }
      if (!below.empty()) {
        const std::size_t top = *std::min_element(below.begin(), below.end(),
                                                  [&](std::size_t a, std::size_t b) { return position(a) < position(b); });
        for (std::size_t j : below) {
          if (j == top || vertical_overlap(lines[j].box, lines[top].box) > 0.0) candidates.push_back(j);
        }
      }
      std::size_t next = n;
      double best = -1.0;
      for (std::size_t j : candidates) {
        const double s = reading_edge_score(lines[cur], lines[j], page_width);
        if (s > best || (s == best && position(j) < position(next))) {
          best = s;
          next = j;
        }
      }
      if (next == n || best < edge_threshold) break;
      cur = next;
    }
  }
  return out;
}

double text_similarity(std::string_view a, std::string_view b) {
  const auto x = utf8_decode(ascii_lower(a));
  const auto y = utf8_decode(ascii_lower(b));
  const std::size_t longest = std::max(x.size(), y.size());
  if (longest == 0) return 1.0;
  std::vector<std::size_t> prev(y.size() + 1), cur(y.size() + 1);
  std::iota(prev.begin(), prev.end(), 0);
  for (std::size_t i = 1; i <= x.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= y.size(); ++j) {
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x[i - 1] == y[j - 1] ? 0 : 1)});
    }
    std::swap(prev, cur);
  }
  return 1.0 - static_cast<double>(prev[y.size()]) / static_cast<double>(longest);
}

std::vector<Line> merge_recognizers(std::span<const Line> primary, std::span<const Line> secondary,
                                    double iou_threshold, double similarity_threshold) {
  std::vector<Line> out;
  out.reserve(primary.size() + secondary.size());
  for (const auto& p : primary) {
    double best = -1.0;
    const Line* match = nullptr;
    for (const auto& s : secondary) {
      const double v = iou(p.box, s.box);
      if (v > best) {
        best = v;
        match = &s;
      }
    }
    if (match == nullptr || best < iou_threshold) {
      out.push_back(p);
    } else if (text_similarity(p.text, match->text) >= similarity_threshold) {
      out.push_back(p);
    } else {
      out.push_back(match->confidence > p.confidence ? *match : p);
    }
  }
  for (const auto& s : secondary) {
    double best = 0.0;
    for (const auto& p : primary) best = std::max(best, iou(p.box, s.box));
    if (best < 0.1) out.push_back(s);
  }
  return out;
}

double aggregate_confidence(std::span<const Line> lines) {
  double num = 0.0;
  double den = 0.0;
  for (const auto& l : lines) {
    const auto len = static_cast<double>(visible_length(l.text));
    num += len * l.confidence;
    den += len;
  }
  return den > 0.0 ? num / den : 0.0;
}

bool should_escalate_extraction(std::span<const Line> lines, double ocr_threshold, bool user_requested) {
  return user_requested || aggregate_confidence(lines) < ocr_threshold;
}

bool matches_schema_template(const json& tmpl, const json& reply) {
  if (!tmpl.is_object() || !reply.is_object() || tmpl.size() != reply.size()) return false;
  for (const auto& [key, expected] : tmpl.items()) {
    if (!reply.contains(key)) return false;
    const auto& got = reply.at(key);
    if (expected.is_object()) {
      if (!matches_schema_template(expected, got)) return false;
    } else if (expected.is_number()) {
      if (!got.is_number()) return false;
    } else if (expected.type() != got.type() && !expected.is_null()) {
      return false;
    }
  }
  return true;
}

std::vector<PageSegment> segment_document(std::span<const PageLines> pages, std::size_t max_block_tokens,
                                          const Provenance& source) {
  std::vector<PageSegment> out;
  for (const auto& page : pages) {
    std::size_t block = 0;
    std::string text;
    std::size_t tokens = 0;
    std::size_t lines_in_block = 0;
    bool oversize = false;
    auto flush = [&] {
      if (lines_in_block == 0) return;
      const std::string id = "p" + std::to_string(page.page_index) + "b" + std::to_string(block);
      out.push_back({id, page.page_index, block, text,
                     with_locator(source, "page=" + std::to_string(page.page_index) + ";block=" + std::to_string(block)),
                     oversize});
      ++block;
      text.clear();
      tokens = 0;
      lines_in_block = 0;
      oversize = false;
    };
    for (const auto& line : page.lines) {
      const std::size_t t = count_tokens(line.text);
      if (lines_in_block > 0 && tokens + t > max_block_tokens) flush();
      if (lines_in_block > 0) text += "\n";
      text += line.text;
      tokens += t;
      ++lines_in_block;
      if (tokens > max_block_tokens) oversize = true;
    }
    flush();
  }
  return out;
}

ContextState lines_to_state(std::span<const Line> lines, std::size_t page_index, std::span<const PageSegment> segments,
                            const Provenance& source) {
  ContextState state;
  const std::string page = "p" + std::to_string(page_index);
  for (const auto& seg : segments) {
    if (trim(seg.text).empty()) continue;
    state.observations.push_back({seg.segment_id, seg.text, 0.0, {seg.provenance}});
  }
  for (std::size_t i = 0; i < lines.size(); ++i) {
    Entity e;
    e.id = page + "l" + std::to_string(i);
    e.kind = EntityKind::text_span;
    if (!lines[i].text.empty()) e.text = lines[i].text;
    e.region = lines[i].box;
    e.confidence = std::clamp(lines[i].confidence, 0.0, 1.0);
    e.provenance = {with_locator(source, "page=" + std::to_string(page_index) + ";line=" + std::to_string(i))};
    state.entities.push_back(std::move(e));
  }
  for (std::size_t i = 1; i < lines.size(); ++i) {
    state.relations.push_back({page + "f" + std::to_string(i), RelationKind::follows, page + "l" + std::to_string(i),
                               page + "l" + std::to_string(i - 1), 0.0,
                               {with_locator(source, "page=" + std::to_string(page_index))}});
  }
  rebuild_provenance_index(state);
  return state;
}

DetectedDocument document_from_json(const json& j) {
  DetectedDocument doc;
  try {
    doc.document_id = j.value("document_id", std::string{});
    for (const auto& pj : j.at("pages")) {
      DetectedPage page;
      page.page_index = pj.at("page_index").get<std::size_t>();
      page.width = pj.at("width").get<double>();
      page.height = pj.value("height", 0.0);
      for (const auto& lj : pj.at("lines")) {
        Line line;
        line.text = lj.at("text").get<std::string>();
        if (lj.contains("quad")) {
          for (std::size_t c = 0; c < 4; ++c) {
            line.quad.corners[c] = {lj["quad"].at(c).at(0).get<double>(), lj["quad"].at(c).at(1).get<double>()};
          }
          line.box = line.quad.bounds();
        } else {
          line.box = box_from_json(lj.at("box"));
          line.quad = quad_from_box(line.box);
        }
        line.confidence = lj.value("confidence", 1.0);
        line.font_height = lj.value("font_height", line.box.height());
        if (lj.contains("words")) {
          for (const auto& wj : lj["words"]) {
            line.words.push_back(
                {wj.at("text").get<std::string>(), box_from_json(wj.at("box")), wj.value("confidence", 1.0)});
          }
        }
        page.lines.push_back(std::move(line));
      }
      doc.pages.push_back(std::move(page));
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::parse, std::string("malformed detector document: ") + e.what());
  }
  return doc;
}

json to_json(const DetectedDocument& doc) {
  json pages = json::array();
  for (const auto& p : doc.pages) {
    json lines = json::array();
    for (const auto& l : p.lines) {
      json quad = json::array();
      for (const auto& c : l.quad.corners) quad.push_back({c.x, c.y});
      json lj = {{"text", l.text}, {"quad", quad}, {"confidence", l.confidence}, {"font_height", l.font_height}};
      if (!l.words.empty()) {
        json words = json::array();
        for (const auto& w : l.words) {
          words.push_back({{"text", w.text}, {"box", box_to_json(w.box)}, {"confidence", w.confidence}});
        }
        lj["words"] = words;
      }
      lines.push_back(std::move(lj));
    }
    pages.push_back({{"page_index", p.page_index}, {"width", p.width}, {"height", p.height}, {"lines", lines}});
  }
  return {{"document_id", doc.document_id}, {"pages", pages}};
}

std::vector<Line> apply_geometry_adjustment(const std::vector<Line>& lines, const GeometryAdjuster& adjuster,
                                            double page_width, const DocumentThresholds& thresholds) {
  if (!adjuster) return lines;
  auto proposal = adjuster(lines);
  if (proposal.size() != lines.size()) return lines;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (proposal[i].text != lines[i].text) return lines;
  }
  if (page_width <= 0.0) {
    for (const auto& l : proposal) page_width = std::max(page_width, l.box.x_max);
    if (page_width <= 0.0) page_width = 1.0;
  }
  const auto reordered = reading_order(proposal, page_width, thresholds.edge, thresholds.column_gap);
  for (std::size_t i = 0; i < proposal.size(); ++i) {
    if (reordered[i].text != proposal[i].text) return lines;
  }
  return proposal;
}

std::vector<PageLines> order_pages(const DetectedDocument& doc, const DocumentThresholds& thresholds,
                                   const GeometryAdjuster& adjuster) {
  auto process = [&](const DetectedPage& page) {
    std::vector<Line> lines = page.lines;
    for (auto& line : lines) {
      if (line.words.empty() && !line.text.empty() && line.box.width() > 0.0) {
        line.words = interpolate_word_boxes(line.box, line.text, line.confidence);
      } else if (!line.words.empty()) {
        line.confidence = line_confidence(line.words);
      }
      if (line.font_height <= 0.0) line.font_height = line.box.height();
    }
    const double width = page.width > 0.0 ? page.width : 1.0;
    auto ordered = reading_order(lines, width, thresholds.edge, thresholds.column_gap);
    return PageLines{page.page_index, apply_geometry_adjustment(ordered, adjuster, width, thresholds)};
  };
  std::vector<std::future<PageLines>> jobs;
  for (const auto& page : doc.pages) jobs.push_back(std::async(std::launch::async, process, std::cref(page)));
  std::vector<PageLines> out;
  for (auto& j : jobs) out.push_back(j.get());
  std::sort(out.begin(), out.end(), [](const PageLines& a, const PageLines& b) { return a.page_index < b.page_index; });
  return out;
}

}  // namespace distill
