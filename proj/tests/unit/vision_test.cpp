#include <gtest/gtest.h>

#include <random>
#include <set>

#include "distill/adapters.hpp"
#include "distill/vision.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace distill;
using nlohmann::json;

namespace {

RelevanceMap map_of(std::size_t rows, std::size_t cols, std::vector<double> scores) {
  return {rows, cols, std::move(scores)};
}

std::shared_ptr<AdapterClient> segmenter(MockHandler h) {
  AdapterDescriptor d;
  d.adapter_id = "sam";
  d.tool = ToolKind::segment_mask;
  return std::make_shared<AdapterClient>(d, std::make_unique<MockTransport>(std::move(h)));
}

}  // namespace

TEST(Relevance, Sigmoid) {
  EXPECT_DOUBLE_EQ(sigmoid(0), 0.5);
  EXPECT_NEAR(sigmoid(1), 0.731059, 1e-6);
  EXPECT_DOUBLE_EQ(sigmoid(-800), 0.0);
  EXPECT_DOUBLE_EQ(sigmoid(800), 1.0);
}

TEST(Relevance, Examples) {
  VisualTokens t{1, 2, 2, {1, 0, 0.5, 0.5}};
  TextEmbedding text{{0, 2}, "q", 2.0};
  const auto m = relevance_map(t, text);
  EXPECT_DOUBLE_EQ(m.at(0, 0), 0.5);
  EXPECT_NEAR(m.at(0, 1), sigmoid(0.5), 1e-15);
  text.vector = {1, 0, 0};
  EXPECT_THROW(relevance_map(t, text), Error);
  text = {{0, 2}, "q", 0.0};
  EXPECT_THROW(relevance_map(t, text), Error);
}

TEST(Relevance, MatchesScalarOracle) {
  support::Rng rng(51);
  for (int c = 0; c < 50; ++c) {
    const auto tokens = support::random_tokens(rng, 16, 16, 8);
    const auto text = support::random_text(rng, 8);
    const auto lib = relevance_map(tokens, text);
    const auto expected = oracle::relevance(tokens, text);
    ASSERT_EQ(lib.scores.size(), expected.size());
    for (std::size_t k = 0; k < expected.size(); ++k) EXPECT_NEAR(lib.scores[k], expected[k], 1e-9);
  }
}

TEST(Relevance, MonotoneInDotProduct) {
  VisualTokens t{1, 5, 1, {-2, -1, 0, 1, 2}};
  const auto m = relevance_map(t, {{1.0}, "q", 0.7});
  for (std::size_t k = 1; k < 5; ++k) EXPECT_GE(m.scores[k], m.scores[k - 1]);
}

TEST(Regions, Examples) {
  EXPECT_TRUE(group_regions(map_of(2, 2, {0.1, 0.2, 0.3, 0.49})).empty());
  const auto boxes = group_regions(map_of(3, 3, {0.9, 0.8, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.7}));
  ASSERT_EQ(boxes.size(), 2u);
  EXPECT_EQ(boxes[0], (GridBox{0, 0, 0, 1}));
  EXPECT_EQ(boxes[1], (GridBox{2, 2, 2, 2}));
  // Diagonal neighbours are separate components.
  EXPECT_EQ(group_regions(map_of(2, 2, {0.9, 0.1, 0.1, 0.9})).size(), 2u);
  // Threshold is inclusive.
  EXPECT_EQ(group_regions(map_of(1, 1, {0.5}), 0.5).size(), 1u);
}

TEST(Regions, MatchFloodFillOracle) {
  support::Rng rng(53);
  std::uniform_real_distribution<double> u(0, 1);
  for (int c = 0; c < 200; ++c) {
    std::vector<double> s(256);
    for (auto& x : s) x = u(rng);
    const double theta = 0.3 + 0.4 * u(rng);
    const auto boxes = group_regions(map_of(16, 16, s), theta);
    EXPECT_EQ(boxes, oracle::flood_fill(s, 16, 16, theta));
    std::size_t hot = 0;
    for (double x : s) hot += x >= theta;
    std::size_t covered_hot = 0;
    std::set<std::size_t> seen;
    for (const auto& b : boxes) {
      for (std::size_t r = b.row_min; r <= b.row_max; ++r) {
        for (std::size_t col = b.col_min; col <= b.col_max; ++col) {
          if (s[r * 16 + col] >= theta && seen.insert(r * 16 + col).second) ++covered_hot;
        }
      }
    }
    EXPECT_EQ(covered_hot, hot);
  }
}

TEST(Pixels, Conversion) {
  VisualTokens t;
  t.rows = 4;
  t.cols = 5;
  t.patch_size = 16;
  t.image_width = 75;
  t.image_height = 64;
  EXPECT_EQ(grid_to_pixels({0, 0, 0, 0}, t), (Box{0, 0, 16, 16}));
  EXPECT_EQ(grid_to_pixels({0, 0, 3, 4}, t), (Box{0, 0, 75, 64}));
  EXPECT_EQ(grid_to_pixels({1, 4, 1, 4}, t), (Box{64, 16, 75, 32}));
}

TEST(Pixels, RegionsStayInsideImage) {
  support::Rng rng(55);
  for (int c = 0; c < 50; ++c) {
    auto tokens = support::random_tokens(rng, 16, 16, 4);
    tokens.image_width = 250;
    tokens.image_height = 249;
    const auto map = relevance_map(tokens, support::random_text(rng, 4));
    for (const auto& g : group_regions(map)) {
      const auto b = grid_to_pixels(g, tokens);
      EXPECT_GE(b.x_min, 0);
      EXPECT_GE(b.y_min, 0);
      EXPECT_LE(b.x_max, 250);
      EXPECT_LE(b.y_max, 249);
      EXPECT_GE(region_score(map, g), 0.5);
    }
  }
}

TEST(Masks, BatchedIntoOneCall) {
  auto client = segmenter([](const AdapterRequest& r) -> json {
    json masks = json::array();
    for (std::size_t i = 0; i < r.payload.at("boxes").size(); ++i) masks.push_back("mask-" + std::to_string(i));
    return {{"masks", masks}};
  });
  const auto img = support::provenance("image:shelf.png");
  EXPECT_TRUE(refine_masks({}, img, *client).empty());
  EXPECT_EQ(client->transport_calls(), 0u);
  const std::vector<Box> boxes{{0, 0, 1, 1}, {1, 1, 2, 2}, {2, 2, 3, 3}};
  const auto out = refine_masks(boxes, img, *client);
  ASSERT_EQ(out.size(), 3u);
  EXPECT_EQ(out[2].handle, "mask-2");
  EXPECT_EQ(client->transport_calls(), 1u);
}

TEST(Masks, CountMismatchIsProtocolError) {
  auto client = segmenter([](const AdapterRequest&) -> json { return {{"masks", {"a", "b"}}}; });
  const std::vector<Box> boxes{{0, 0, 1, 1}, {1, 1, 2, 2}, {2, 2, 3, 3}};
  try {
    refine_masks(boxes, support::provenance("img"), *client);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::protocol);
  }
}

TEST(Masks, PerItemErrorsAreKept) {
  auto client = segmenter([](const AdapterRequest&) -> json {
    return {{"masks", json::array({"ok", {{"error", {{"code", "TIMEOUT"}, {"message", "slow"}}}}})}};
  });
  const std::vector<Box> boxes{{0, 0, 1, 1}, {1, 1, 2, 2}};
  const auto out = refine_masks(boxes, support::provenance("img"), *client);
  EXPECT_EQ(out[0].handle, "ok");
  ASSERT_TRUE(out[1].error);
  EXPECT_EQ(out[1].error->code, ErrorCode::timeout);
}

TEST(RegionsToState, EntitiesCarryPromptAndScore) {
  const std::vector<Box> boxes{{0, 0, 16, 16}, {32, 0, 64, 16}};
  const std::vector<double> scores{0.9, 0.6};
  const auto s = regions_to_state(boxes, scores, "red button", support::provenance("img"));
  ASSERT_EQ(s.entities.size(), 2u);
  EXPECT_EQ(s.entities[0].id, "r0");
  EXPECT_EQ(s.entities[0].kind, EntityKind::bounding_region);
  EXPECT_EQ(s.entities[0].text, "red button");
  EXPECT_DOUBLE_EQ(s.entities[1].confidence, 0.6);
  EXPECT_EQ(s.entities[1].region, boxes[1]);
  EXPECT_NO_THROW(validate_state(s));
}
