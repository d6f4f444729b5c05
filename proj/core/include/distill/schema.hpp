#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "distill/common.hpp"

namespace distill {

/// Axis-aligned box in page (or image) pixels.
struct Box {
  double x_min = 0;
  double y_min = 0;
  double x_max = 0;
  double y_max = 0;

  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
  double area() const { return width() * height(); }

  friend bool operator==(const Box&, const Box&) = default;
};

/// Intersection-over-union; 0 when the union has no area.
double iou(const Box& a, const Box& b);
/// Smallest box enclosing both.
Box enclose(const Box& a, const Box& b);

/// Half-open character interval [start, end) within a source.
struct CharSpan {
  std::int64_t start = 0;
  std::int64_t end = 0;

  friend bool operator==(const CharSpan&, const CharSpan&) = default;
};

struct Provenance {
  std::string source_id;
  std::string content_hash;
  Timestamp timestamp{};
  std::optional<std::string> locator;

  friend bool operator==(const Provenance&, const Provenance&) = default;
};

struct Observation {
  std::string id;
  std::string text;
  double score = 0.0;
  std::vector<Provenance> provenance;

  friend bool operator==(const Observation&, const Observation&) = default;
};

enum class EntityKind {
  text_span,
  bounding_region,
  table_cell,
  speaker,
  code_block,
  section,
  figure,
  variable,
};

std::string_view to_string(EntityKind kind);
EntityKind parse_entity_kind(std::string_view text);

struct Entity {
  std::string id;
  EntityKind kind = EntityKind::text_span;
  std::optional<std::string> text;
  std::optional<Box> region;
  std::optional<CharSpan> span;
  double confidence = 1.0;
  double score = 0.0;
  std::map<std::string, std::string> attributes;
  std::vector<Provenance> provenance;

  friend bool operator==(const Entity&, const Entity&) = default;
};

enum class RelationKind {
  axis_of,
  legend_entry,
  refers_to,
  follows,
  contains,
  spoken_by,
  aligned_with,
};

std::string_view to_string(RelationKind kind);
RelationKind parse_relation_kind(std::string_view text);

/// Endpoints name an entity or an observation id in the same state.
struct Relation {
  std::string id;
  RelationKind kind = RelationKind::follows;
  std::string subject;
  std::string object;
  double score = 0.0;
  std::vector<Provenance> provenance;

  friend bool operator==(const Relation&, const Relation&) = default;
};

/// The distilled four-field state handed to the final model.
struct ContextState {
  std::vector<Observation> observations;
  std::vector<Entity> entities;
  std::vector<Relation> relations;
  std::map<std::string, Provenance> provenance_index;

  bool empty() const {
    return observations.empty() && entities.empty() && relations.empty() &&
           provenance_index.empty();
  }

  friend bool operator==(const ContextState&, const ContextState&) = default;
};

struct TokenBudget {
  std::size_t observations_max = 0;
  std::size_t entities_max = 0;
  std::size_t relations_max = 0;
  std::size_t provenance_max = 0;

  friend bool operator==(const TokenBudget&, const TokenBudget&) = default;
};

/// Number of maximal non-whitespace runs.
std::size_t count_tokens(std::string_view text);

// One line per item; these are exactly the strings that are budgeted and
// placed in the prompt.
std::string render_item(const Observation& o);
std::string render_item(const Entity& e);
std::string render_item(const Relation& r);
std::string render_item(const Provenance& p);

struct FieldTokens {
  std::size_t observations = 0;
  std::size_t entities = 0;
  std::size_t relations = 0;
  std::size_t provenance = 0;
};

FieldTokens field_tokens(const ContextState& state);
bool within_budget(const ContextState& state, const TokenBudget& budget);

/// Throws Error(invalid_argument) naming the first broken invariant:
/// dangling relation endpoint, self relation, missing provenance, empty text,
/// out-of-range confidence/score, duplicate id.
void validate_state(const ContextState& state);

nlohmann::json to_json(const Provenance& p);
Provenance provenance_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ContextState& state);
ContextState state_from_json(const nlohmann::json& j);

/// Compact JSON with sorted keys and every floating value printed with six
/// decimals. Integers stay integers.
std::string canonical_json(const nlohmann::json& value);

/// Canonical UTF-8 bytes of a state. Throws on a dangling relation.
std::string canonical_serialize(const ContextState& state);
ContextState parse_state(std::string_view canonical);

/// sha256 of the canonical serialization.
std::string context_digest(const ContextState& state);

/// Prompt with QUERY, OBSERVATIONS, ENTITIES, RELATIONS and PROVENANCE
/// sections. Section headers are not budgeted. Throws Error(invalid_argument)
/// if any field exceeds its budget.
std::string render_prompt(const ContextState& state, std::string_view query,
                          const TokenBudget& budget);

/// Collects each item's provenance into the state's index, keeping the
/// earliest entry per source without its locator.
void rebuild_provenance_index(ContextState& state);

}  // namespace distill
