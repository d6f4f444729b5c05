#pragma once

#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "distill/schema.hpp"

namespace distill {

struct ConfidenceFloors {
  std::map<EntityKind, double> per_kind;
  double fallback = 0.0;

  double floor(EntityKind kind) const;
};

struct Fragment {
  std::string name;  // used in error messages
  ContextState state;
};

/// Optional replacement for the lexical relevance score. Must return a value
/// in [0, 1]; anything else is rejected.
using RelevanceScorer = std::function<double(std::string_view text, std::string_view query)>;

struct CompileInput {
  std::vector<Fragment> fragments;
  std::string query;
  TokenBudget budgets;
  ConfidenceFloors floors;
  RelevanceScorer scorer;
};

/// Total order used for every compiled list: embedded digit runs compare
/// numerically, so "utt2" sorts before "utt10".
bool natural_less(std::string_view a, std::string_view b);

/// Merges entities of the same kind and primary source whose spans overlap or
/// whose regions have IoU >= 0.5 (also identical geometry-free duplicates),
/// iterating to a fixpoint. `remap` receives every input id -> surviving id
/// (survivors map to themselves).
std::vector<Entity> merge_entities(std::vector<Entity> entities, std::map<std::string, std::string>* remap = nullptr);

/// Removes entities below their kind's floor (equal is kept) and every
/// relation touching a removed entity.
ContextState filter_low_confidence(ContextState state, const ConfidenceFloors& floors);

/// |query terms ∩ text terms| / |query terms| over lowercase alphanumeric
/// terms; 0 for a query without terms.
double score_relevance(std::string_view text, std::string_view query);

/// Per field, greedy admission in (score desc, id asc) order of every item
/// that still fits. Relations need both endpoints admitted. The provenance
/// index is rebuilt from admitted items and trimmed oldest first.
ContextState enforce_budget(ContextState state, const TokenBudget& budgets);

/// concatenate -> merge -> filter -> score -> budget. The result is in the
/// canonical compile order and does not depend on fragment order. Throws
/// Error(invalid_argument) naming the fragment for malformed input.
ContextState compile_context(const CompileInput& input);

}  // namespace distill
