#include "distill/vision.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <tuple>

#include <Eigen/Dense>

namespace distill {

using nlohmann::json;

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

RelevanceMap relevance_map(const VisualTokens& tokens, const TextEmbedding& text) {
  if (text.temperature <= 0.0) throw Error(ErrorCode::invalid_argument, "temperature must be positive");
  if (tokens.dim == 0 || text.vector.size() != tokens.dim) {
    throw Error(ErrorCode::invalid_argument, "text embedding dimension does not match visual tokens");
  }
  const std::size_t k = tokens.rows * tokens.cols;
  if (tokens.data.size() != k * tokens.dim) throw Error(ErrorCode::invalid_argument, "token grid size mismatch");

  using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const Eigen::Map<const RowMajor> grid(tokens.data.data(), static_cast<Eigen::Index>(k),
                                        static_cast<Eigen::Index>(tokens.dim));
  const Eigen::Map<const Eigen::VectorXd> query(text.vector.data(), static_cast<Eigen::Index>(tokens.dim));
  const Eigen::VectorXd dots = grid * query;

  RelevanceMap map{tokens.rows, tokens.cols, std::vector<double>(k)};
  for (std::size_t i = 0; i < k; ++i) map.scores[i] = sigmoid(dots[static_cast<Eigen::Index>(i)] / text.temperature);
  return map;
}

std::vector<GridBox> group_regions(const RelevanceMap& map, double threshold) {
  const std::size_t n = map.rows * map.cols;
  std::vector<std::size_t> parent(n);
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](std::size_t x) {
    while (parent[x] != x) {
      parent[x] = parent[parent[x]];
      x = parent[x];
    }
    return x;
  };
  auto unite = [&](std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a != b) parent[std::max(a, b)] = std::min(a, b);
  };
  auto hot = [&](std::size_t i) { return map.scores[i] >= threshold; };

  for (std::size_t r = 0; r < map.rows; ++r) {
    for (std::size_t c = 0; c < map.cols; ++c) {
      const std::size_t i = r * map.cols + c;
      if (!hot(i)) continue;
      if (c + 1 < map.cols && hot(i + 1)) unite(i, i + 1);
      if (r + 1 < map.rows && hot(i + map.cols)) unite(i, i + map.cols);
    }
  }

  // Roots are the smallest raster index of their component.
  std::vector<std::size_t> slot(n, n);
  std::vector<GridBox> boxes;
  for (std::size_t i = 0; i < n; ++i) {
    if (!hot(i)) continue;
    const std::size_t root = find(i);
    const std::size_t r = i / map.cols;
    const std::size_t c = i % map.cols;
    if (slot[root] == n) {
      slot[root] = boxes.size();
      boxes.push_back({r, c, r, c});
      continue;
    }
    GridBox& b = boxes[slot[root]];
    b.row_min = std::min(b.row_min, r);
    b.col_min = std::min(b.col_min, c);
    b.row_max = std::max(b.row_max, r);
    b.col_max = std::max(b.col_max, c);
  }
  std::stable_sort(boxes.begin(), boxes.end(), [](const GridBox& a, const GridBox& b) {
    return std::tie(a.row_min, a.col_min, a.row_max, a.col_max) < std::tie(b.row_min, b.col_min, b.row_max, b.col_max);
  });
  return boxes;
}

Box grid_to_pixels(const GridBox& box, const VisualTokens& tokens) {
  const double p = tokens.patch_size;
  return {static_cast<double>(box.col_min) * p, static_cast<double>(box.row_min) * p,
          std::min(static_cast<double>(box.col_max + 1) * p, tokens.image_width),
          std::min(static_cast<double>(box.row_max + 1) * p, tokens.image_height)};
}

double region_score(const RelevanceMap& map, const GridBox& box) {
  double best = 0.0;
  for (std::size_t r = box.row_min; r <= box.row_max; ++r) {
    for (std::size_t c = box.col_min; c <= box.col_max; ++c) best = std::max(best, map.at(r, c));
  }
  return best;
}

std::vector<MaskResult> refine_masks(std::span<const Box> boxes, const Provenance& image_ref, AdapterClient& segmenter,
                                     std::optional<std::chrono::milliseconds> budget) {
  if (boxes.empty()) return {};
  json prompts = json::array();
  for (const auto& b : boxes) prompts.push_back({b.x_min, b.y_min, b.x_max, b.y_max});
  AdapterRequest req;
  req.id = "mask-" + image_ref.content_hash.substr(0, 12);
  req.tool = ToolKind::segment_mask;
  req.op = "segment";
  req.payload = {{"image", {{"source_id", image_ref.source_id}, {"content_hash", image_ref.content_hash}}},
                 {"boxes", prompts}};
  const AdapterResponse resp = segmenter.invoke(req, budget);
  if (!resp.ok) throw Error(resp.error->code, "segment_mask: " + resp.error->message);
  const json* masks = resp.result.is_object() && resp.result.contains("masks") ? &resp.result["masks"] : nullptr;
  if (masks == nullptr || !masks->is_array()) throw Error(ErrorCode::protocol, "segment_mask reply lacks masks");
  if (masks->size() != boxes.size()) {
    throw Error(ErrorCode::protocol, "segment_mask returned " + std::to_string(masks->size()) + " masks for " +
                                         std::to_string(boxes.size()) + " boxes");
  }
  std::vector<MaskResult> out;
  for (const auto& m : *masks) {
    MaskResult r;
    if (m.is_string()) {
      r.handle = m.get<std::string>();
    } else if (m.is_object() && m.contains("error")) {
      r.error = AdapterFailure{parse_error_code(m["error"].value("code", "PROTOCOL")),
                               m["error"].value("message", std::string{})};
    } else {
      throw Error(ErrorCode::protocol, "segment_mask: malformed mask entry");
    }
    out.push_back(std::move(r));
  }
  return out;
}

ContextState regions_to_state(std::span<const Box> boxes, std::span<const double> scores, const std::string& prompt,
                              const Provenance& source) {
  if (scores.size() != boxes.size()) throw Error(ErrorCode::invalid_argument, "one score per box expected");
  ContextState state;
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    Entity e;
    e.id = "r" + std::to_string(i);
    e.kind = EntityKind::bounding_region;
    if (!trim(prompt).empty()) e.text = std::string(trim(prompt));
    e.region = boxes[i];
    e.confidence = std::clamp(scores[i], 0.0, 1.0);
    Provenance p = source;
    p.locator = "region=" + std::to_string(i);
    e.provenance = {p};
    state.entities.push_back(std::move(e));
  }
  rebuild_provenance_index(state);
  return state;
}

VisualTokens tokens_from_json(const json& j) {
  try {
    VisualTokens t;
    t.rows = j.at("rows").get<std::size_t>();
    t.cols = j.at("cols").get<std::size_t>();
    t.dim = j.at("dim").get<std::size_t>();
    t.patch_size = j.value("patch_size", 16.0);
    t.image_width = j.value("image_width", static_cast<double>(t.cols) * t.patch_size);
    t.image_height = j.value("image_height", static_cast<double>(t.rows) * t.patch_size);
    const auto& rows = j.at("tokens");
    if (rows.size() != t.rows * t.cols) throw Error(ErrorCode::parse, "token count does not match rows*cols");
    t.data.reserve(t.rows * t.cols * t.dim);
    for (const auto& v : rows) {
      if (v.size() != t.dim) throw Error(ErrorCode::parse, "token vector has the wrong dimension");
      for (const auto& x : v) t.data.push_back(x.get<double>());
    }
    return t;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::parse, std::string("malformed visual tokens: ") + e.what());
  }
}

json to_json(const VisualTokens& t) {
  json rows = json::array();
  for (std::size_t k = 0; k < t.rows * t.cols; ++k) {
    rows.push_back(std::vector<double>(t.data.begin() + static_cast<std::ptrdiff_t>(k * t.dim),
                                       t.data.begin() + static_cast<std::ptrdiff_t>((k + 1) * t.dim)));
  }
  return {{"rows", t.rows},         {"cols", t.cols},
          {"dim", t.dim},           {"patch_size", t.patch_size},
          {"image_width", t.image_width}, {"image_height", t.image_height},
          {"tokens", rows}};
}

TextEmbedding text_embedding_from_json(const json& j) {
  try {
    return {j.at("vector").get<std::vector<double>>(), j.value("prompt", std::string{}), j.value("temperature", 1.0)};
  } catch (const json::exception& e) {
    throw Error(ErrorCode::parse, std::string("malformed text embedding: ") + e.what());
  }
}

}  // namespace distill
