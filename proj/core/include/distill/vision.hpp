#pragma once

#include <chrono>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "distill/adapters.hpp"
#include "distill/schema.hpp"

namespace distill {

/// K = rows*cols token vectors of dimension `dim`, row-major by cell.
struct VisualTokens {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t dim = 0;
  std::vector<double> data;  // K x dim
  double patch_size = 16;
  double image_width = 0;
  double image_height = 0;
};

struct TextEmbedding {
  std::vector<double> vector;
  std::string prompt;
  double temperature = 1.0;
};

struct RelevanceMap {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> scores;  // row-major, each in [0, 1]

  double at(std::size_t r, std::size_t c) const { return scores[r * cols + c]; }
};

/// Inclusive cell coordinates.
struct GridBox {
  std::size_t row_min = 0;
  std::size_t col_min = 0;
  std::size_t row_max = 0;
  std::size_t col_max = 0;
  friend bool operator==(const GridBox&, const GridBox&) = default;
};

/// Numerically stable logistic function.
double sigmoid(double x);

/// s_k = sigmoid(<token_k, text> / temperature). Throws Error(invalid_argument)
/// on a dimension mismatch or non-positive temperature.
RelevanceMap relevance_map(const VisualTokens& tokens, const TextEmbedding& text);

/// Bounding boxes of the 4-connected components of cells with s >= threshold,
/// sorted by (row_min, col_min).
std::vector<GridBox> group_regions(const RelevanceMap& map, double threshold = 0.5);

/// Cell box to pixel box, clamped to the image.
Box grid_to_pixels(const GridBox& box, const VisualTokens& tokens);

/// Highest score inside the box.
double region_score(const RelevanceMap& map, const GridBox& box);

struct MaskResult {
  std::optional<std::string> handle;
  std::optional<AdapterFailure> error;
};

/// All boxes of one image go to the segment_mask adapter in one call (op
/// "segment"). No boxes, no call. A reply whose mask count differs from the
/// box count is Error(protocol); a failed call is raised with its code.
std::vector<MaskResult> refine_masks(std::span<const Box> boxes, const Provenance& image_ref, AdapterClient& segmenter,
                                     std::optional<std::chrono::milliseconds> budget = std::nullopt);

/// Bounding-region entities "r{i}" labelled with the prompt, confidence from
/// the region score. Mask handles stay out of the state.
ContextState regions_to_state(std::span<const Box> boxes, std::span<const double> scores, const std::string& prompt,
                              const Provenance& source);

VisualTokens tokens_from_json(const nlohmann::json& j);
nlohmann::json to_json(const VisualTokens& t);
TextEmbedding text_embedding_from_json(const nlohmann::json& j);

}  // namespace distill
