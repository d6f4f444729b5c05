#pragma once

#include <array>
#include <chrono>
#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "distill/schema.hpp"

namespace distill {

class AdapterClient;

struct Point {
  double x = 0;
  double y = 0;
  friend bool operator==(const Point&, const Point&) = default;
};

/// Four corners, clockwise, in page pixels.
struct Quad {
  std::array<Point, 4> corners{};

  Box bounds() const;
  /// Shoelace area (positive for clockwise corners in image coordinates).
  double area() const;
  friend bool operator==(const Quad&, const Quad&) = default;
};

Quad quad_from_box(const Box& b);

struct Word {
  std::string text;
  Box box;
  double confidence = 1.0;
  friend bool operator==(const Word&, const Word&) = default;
};

struct Line {
  std::string text;
  Quad quad;
  Box box;
  double confidence = 1.0;
  std::vector<Word> words;
  double font_height = 0;
  friend bool operator==(const Line&, const Line&) = default;
};

struct PageSegment {
  std::string segment_id;
  std::size_t page_index = 0;
  std::size_t block_index = 0;
  std::string text;
  Provenance provenance;
  /// A single line longer than the block limit.
  bool oversize = false;
};

struct DocumentThresholds {
  double edge = 0.35;
  double column_gap = 0.25;  // fraction of page width
  double iou = 0.5;
  double similarity = 0.6;
  double ocr = 0.6;
};

/// Characters of `text` that are not whitespace (code points).
std::size_t visible_length(std::string_view text);

/// Sum(len_i * conf_i) / Sum(len_i). Throws on an empty list.
double line_confidence(std::span<const Word> words);

/// Splits the line box horizontally by character offsets (spaces included).
/// Throws on zero width or empty text.
std::vector<Word> interpolate_word_boxes(const Box& line_box, std::string_view line_text, double confidence = 1.0);

/// 0.5*vertical overlap + 0.3*(1 - horizontal gap) + 0.2*font similarity.
double reading_edge_score(const Line& a, const Line& b, double page_width);

/// Column index per line: x_min values sorted, new column when the gap
/// between consecutive x_min exceeds column_gap * page_width.
std::vector<std::size_t> column_keys(std::span<const Line> lines, double page_width, double column_gap = 0.25);

/// Greedy chain traversal over the line graph. Always a permutation of the
/// input.
std::vector<Line> reading_order(std::span<const Line> lines, double page_width, double edge_threshold = 0.35,
                                double column_gap = 0.25);

/// 1 - Levenshtein(lower(a), lower(b)) / max length, over code points.
double text_similarity(std::string_view a, std::string_view b);

std::vector<Line> merge_recognizers(std::span<const Line> primary, std::span<const Line> secondary,
                                    double iou_threshold = 0.5, double similarity_threshold = 0.6);

/// Length-weighted mean line confidence; 0 for a page without text.
double aggregate_confidence(std::span<const Line> lines);

bool should_escalate_extraction(std::span<const Line> lines, double ocr_threshold, bool user_requested);

/// True when `reply` is an object with exactly the template's keys and, per
/// key, the same JSON type (objects checked recursively; arrays match arrays).
bool matches_schema_template(const nlohmann::json& tmpl, const nlohmann::json& reply);

struct PageLines {
  std::size_t page_index = 0;
  std::vector<Line> lines;  // reading order
};

/// Greedy packing of consecutive lines into blocks of at most
/// max_block_tokens; ids "p{page}b{block}".
std::vector<PageSegment> segment_document(std::span<const PageLines> pages, std::size_t max_block_tokens,
                                          const Provenance& source);

/// Text-span entities per line, follows relations between consecutive
/// lines, observations from segment texts.
ContextState lines_to_state(std::span<const Line> lines, std::size_t page_index, std::span<const PageSegment> segments,
                            const Provenance& source);

// --- Detector fixture format -------------------------------------------------

struct DetectedPage {
  std::size_t page_index = 0;
  double width = 0;
  double height = 0;
  std::vector<Line> lines;  // detector order
};

struct DetectedDocument {
  std::string document_id;
  std::vector<DetectedPage> pages;
};

DetectedDocument document_from_json(const nlohmann::json& j);
nlohmann::json to_json(const DetectedDocument& doc);

/// Optional geometry hook. Its proposal is accepted only if it keeps the
/// line texts in the same order.
using GeometryAdjuster = std::function<std::vector<Line>(const std::vector<Line>&)>;

/// Fills missing boxes/words/confidences and reading-orders each page;
/// pages run concurrently and come back sorted by page_index.
std::vector<PageLines> order_pages(const DetectedDocument& doc, const DocumentThresholds& thresholds,
                                   const GeometryAdjuster& adjuster = {});

/// Applies `adjuster` to `lines` unless it changes the texts or the reading
/// order recomputed from the adjusted geometry. A non-positive `page_width`
/// falls back to the widest right edge.
std::vector<Line> apply_geometry_adjustment(const std::vector<Line>& lines, const GeometryAdjuster& adjuster,
                                            double page_width = 0.0, const DocumentThresholds& thresholds = {});

}  // namespace distill
