#include "distill/compiler.hpp"

#include <algorithm>
#include <cctype>
#include <limits>
#include <numeric>
#include <set>
#include <tuple>

namespace distill {

namespace {

const std::string& primary_source(const std::vector<Provenance>& prov) {
  static const std::string none;
  return prov.empty() ? none : prov.front().source_id;
}

void append_unique(std::vector<Provenance>& into, const std::vector<Provenance>& from) {
  for (const auto& p : from) {
    if (std::find(into.begin(), into.end(), p) == into.end()) into.push_back(p);
  }
}

bool spans_overlap(const CharSpan& a, const CharSpan& b) {
  return a == b || std::max(a.start, b.start) < std::min(a.end, b.end);
}

bool mergeable(const Entity& a, const Entity& b) {
  if (a.kind != b.kind || primary_source(a.provenance) != primary_source(b.provenance)) return false;
  if (a.span && b.span && spans_overlap(*a.span, *b.span)) return true;
  if (a.region && b.region && iou(*a.region, *b.region) >= 0.5) return true;
  const bool a_bare = !a.span && !a.region;
  const bool b_bare = !b.span && !b.region;
  return a_bare && b_bare && a.text == b.text;
}

Entity combine(std::vector<const Entity*> members) {
  std::sort(members.begin(), members.end(), [](const Entity* a, const Entity* b) { return a->id < b->id; });
  const Entity* best = members.front();
  for (const Entity* m : members) {
    if (m->confidence > best->confidence) best = m;
  }
  Entity out;
  out.id = members.front()->id;
  out.kind = best->kind;
  out.text = best->text;
  out.confidence = 0.0;
  for (const Entity* m : members) {
    out.confidence = std::max(out.confidence, m->confidence);
    out.score = std::max(out.score, m->score);
    if (m->region) out.region = out.region ? enclose(*out.region, *m->region) : *m->region;
    if (m->span) {
      out.span = out.span ? CharSpan{std::min(out.span->start, m->span->start), std::max(out.span->end, m->span->end)}
                          : *m->span;
    }
    append_unique(out.provenance, m->provenance);
  }
  out.attributes = best->attributes;
  for (const Entity* m : members) out.attributes.insert(m->attributes.begin(), m->attributes.end());
  return out;
}

void remap_relations(std::vector<Relation>& relations, const std::map<std::string, std::string>& remap) {
  auto target = [&](const std::string& id) {
    const auto it = remap.find(id);
    return it == remap.end() ? id : it->second;
  };
  std::map<std::tuple<RelationKind, std::string, std::string>, Relation> unique;
  for (auto& r : relations) {
    r.subject = target(r.subject);
    r.object = target(r.object);
    if (r.subject == r.object) continue;
    auto key = std::tuple(r.kind, r.subject, r.object);
    auto it = unique.find(key);
    if (it == unique.end()) {
      unique.emplace(std::move(key), r);
      continue;
    }
    Relation& kept = it->second;
    if (r.id < kept.id) std::swap(kept.id, r.id);
    kept.score = std::max(kept.score, r.score);
    append_unique(kept.provenance, r.provenance);
  }
  relations.clear();
  for (auto& [_, r] : unique) relations.push_back(std::move(r));
}

void merge_observations(std::vector<Observation>& observations, std::map<std::string, std::string>& remap) {
  std::sort(observations.begin(), observations.end(),
            [](const Observation& a, const Observation& b) { return a.id < b.id; });
  std::map<std::pair<std::string, std::string>, std::size_t> seen;
  std::vector<Observation> out;
  for (auto& o : observations) {
    auto key = std::pair(primary_source(o.provenance), o.text);
    auto it = seen.find(key);
    if (it == seen.end()) {
      seen.emplace(std::move(key), out.size());
      out.push_back(std::move(o));
      continue;
    }
    Observation& kept = out[it->second];
    remap[o.id] = kept.id;
    kept.score = std::max(kept.score, o.score);
    append_unique(kept.provenance, o.provenance);
  }
  observations = std::move(out);
}

template <typename T>
T without_score(T item) {
  item.score = 0.0;
  return item;
}

template <typename T>
void add_item(std::vector<T>& into, std::map<std::string, std::pair<std::size_t, std::string>>& owner, const T& item,
              const std::string& fragment) {
  const auto it = owner.find(item.id);
  if (it == owner.end()) {
    owner.emplace(item.id, std::pair(into.size(), fragment));
    into.push_back(item);
    return;
  }
  if (without_score(into[it->second.first]) != without_score(item)) {
    throw Error(ErrorCode::invalid_argument, "fragment '" + fragment + "': id '" + item.id +
                                                 "' collides with a different item from fragment '" +
                                                 it->second.second + "'");
  }
}

double checked(double v) {
  if (!(v >= 0.0 && v <= 1.0)) throw Error(ErrorCode::invalid_argument, "relevance scorer returned a value outside [0,1]");
  return v;
}

template <typename T>
std::vector<T> admit(std::vector<T> items, std::size_t budget) {
  std::stable_sort(items.begin(), items.end(), [](const T& a, const T& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.id < b.id;
  });
  std::vector<T> kept;
  std::size_t used = 0;
  for (auto& item : items) {
    const std::size_t t = count_tokens(render_item(item));
    if (used + t > budget) continue;
    used += t;
    kept.push_back(std::move(item));
  }
  return kept;
}

void canonical_order(ContextState& s) {
  std::sort(s.observations.begin(), s.observations.end(), [](const Observation& a, const Observation& b) {
    const auto& sa = primary_source(a.provenance);
    const auto& sb = primary_source(b.provenance);
    if (sa != sb) return sa < sb;
    return natural_less(a.id, b.id);
  });
  std::sort(s.entities.begin(), s.entities.end(), [](const Entity& a, const Entity& b) {
    const auto& sa = primary_source(a.provenance);
    const auto& sb = primary_source(b.provenance);
    if (sa != sb) return sa < sb;
    const auto none = std::numeric_limits<std::int64_t>::min();
    const auto pa = a.span ? a.span->start : none;
    const auto pb = b.span ? b.span->start : none;
    if (pa != pb) return pa < pb;
    return natural_less(a.id, b.id);
  });
  std::sort(s.relations.begin(), s.relations.end(),
            [](const Relation& a, const Relation& b) { return natural_less(a.id, b.id); });
}

}  // namespace

double ConfidenceFloors::floor(EntityKind kind) const {
  const auto it = per_kind.find(kind);
  return it == per_kind.end() ? fallback : it->second;
}

bool natural_less(std::string_view a, std::string_view b) {
  std::size_t i = 0;
  std::size_t j = 0;
  auto digit = [](char c) { return std::isdigit(static_cast<unsigned char>(c)) != 0; };
  while (i < a.size() && j < b.size()) {
    if (digit(a[i]) && digit(b[j])) {
      std::size_t ie = i;
      std::size_t je = j;
      while (ie < a.size() && digit(a[ie])) ++ie;
      while (je < b.size() && digit(b[je])) ++je;
      std::string_view ra = a.substr(i, ie - i);
      std::string_view rb = b.substr(j, je - j);
      const auto za = std::min(ra.find_first_not_of('0'), ra.size());
      const auto zb = std::min(rb.find_first_not_of('0'), rb.size());
      const std::string_view na = ra.substr(za);
      const std::string_view nb = rb.substr(zb);
      if (na.size() != nb.size()) return na.size() < nb.size();
      if (na != nb) return na < nb;
      i = ie;
      j = je;
      continue;
    }
    if (a[i] != b[j]) return a[i] < b[j];
    ++i;
    ++j;
  }
  if (a.size() - i != b.size() - j) return a.size() - i < b.size() - j;
  return a < b;  // only differs in leading zeros
}

std::vector<Entity> merge_entities(std::vector<Entity> entities, std::map<std::string, std::string>* remap) {
  std::map<std::string, std::string> local;
  std::vector<std::string> input_ids;
  for (const auto& e : entities) input_ids.push_back(e.id);
  for (;;) {
    const std::size_t n = entities.size();
    std::vector<std::size_t> parent(n);
    std::iota(parent.begin(), parent.end(), 0);
    auto find = [&](std::size_t x) {
      while (parent[x] != x) x = parent[x] = parent[parent[x]];
      return x;
    };
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        if (find(i) == find(j) || !mergeable(entities[i], entities[j])) continue;
        parent[std::max(find(i), find(j))] = std::min(find(i), find(j));
        changed = true;
      }
    }
    if (!changed) break;
    std::map<std::size_t, std::vector<const Entity*>> groups;
    for (std::size_t i = 0; i < n; ++i) groups[find(i)].push_back(&entities[i]);
    std::vector<Entity> next;
    for (auto& [_, members] : groups) {
      Entity merged = combine(members);
      for (const Entity* m : members) {
        if (m->id != merged.id) local[m->id] = merged.id;
      }
      next.push_back(std::move(merged));
    }
    entities = std::move(next);
  }
  if (remap != nullptr) {
    // Collapse chains a -> b -> c from successive passes.
    for (auto& [from, to] : local) {
      std::string target = to;
      for (auto it = local.find(target); it != local.end() && it->second != target; it = local.find(target)) {
        target = it->second;
      }
      (*remap)[from] = target;
    }
    for (const auto& id : input_ids) remap->try_emplace(id, id);
  }
  return entities;
}

ContextState filter_low_confidence(ContextState state, const ConfidenceFloors& floors) {
  std::set<std::string> removed;
  std::vector<Entity> kept;
  for (auto& e : state.entities) {
    if (e.confidence >= floors.floor(e.kind)) {
      kept.push_back(std::move(e));
    } else {
      removed.insert(e.id);
    }
  }
  state.entities = std::move(kept);
  std::erase_if(state.relations,
                [&](const Relation& r) { return removed.count(r.subject) > 0 || removed.count(r.object) > 0; });
  return state;
}

double score_relevance(std::string_view text, std::string_view query) {
  const auto q = alnum_terms(query);
  const std::set<std::string> query_terms(q.begin(), q.end());
  if (query_terms.empty()) return 0.0;
  const auto t = alnum_terms(text);
  const std::set<std::string> text_terms(t.begin(), t.end());
  std::size_t shared = 0;
  for (const auto& term : query_terms) shared += text_terms.count(term);
  return static_cast<double>(shared) / static_cast<double>(query_terms.size());
}

ContextState enforce_budget(ContextState state, const TokenBudget& budgets) {
  ContextState out;
  out.observations = admit(std::move(state.observations), budgets.observations_max);
  out.entities = admit(std::move(state.entities), budgets.entities_max);
  std::set<std::string> present;
  for (const auto& o : out.observations) present.insert(o.id);
  for (const auto& e : out.entities) present.insert(e.id);
  std::erase_if(state.relations,
                [&](const Relation& r) { return present.count(r.subject) == 0 || present.count(r.object) == 0; });
  out.relations = admit(std::move(state.relations), budgets.relations_max);

  rebuild_provenance_index(out);
  std::vector<std::pair<Timestamp, std::string>> age;
  std::size_t used = 0;
  for (const auto& [source, p] : out.provenance_index) {
    age.emplace_back(p.timestamp, source);
    used += count_tokens(render_item(p));
  }
  std::sort(age.begin(), age.end());
  for (const auto& [_, source] : age) {
    if (used <= budgets.provenance_max) break;
    used -= count_tokens(render_item(out.provenance_index.at(source)));
    out.provenance_index.erase(source);
  }
  canonical_order(out);
  return out;
}

ContextState compile_context(const CompileInput& input) {
  ContextState all;
  std::map<std::string, std::pair<std::size_t, std::string>> obs_owner;
  std::map<std::string, std::pair<std::size_t, std::string>> ent_owner;
  std::map<std::string, std::pair<std::size_t, std::string>> rel_owner;
  for (const auto& fragment : input.fragments) {
    try {
      validate_state(fragment.state);
    } catch (const Error& e) {
      throw Error(ErrorCode::invalid_argument, "fragment '" + fragment.name + "': " + e.what());
    }
    for (const auto& o : fragment.state.observations) add_item(all.observations, obs_owner, o, fragment.name);
    for (const auto& e : fragment.state.entities) add_item(all.entities, ent_owner, e, fragment.name);
    for (const auto& r : fragment.state.relations) add_item(all.relations, rel_owner, r, fragment.name);
  }
  for (const auto& [id, owner] : obs_owner) {
    if (ent_owner.count(id)) {
      throw Error(ErrorCode::invalid_argument, "fragment '" + owner.second + "': id '" + id +
                                                   "' names both an observation and an entity");
    }
  }

  std::map<std::string, std::string> remap;
  all.entities = merge_entities(std::move(all.entities), &remap);
  merge_observations(all.observations, remap);
  remap_relations(all.relations, remap);

  all = filter_low_confidence(std::move(all), input.floors);

  auto score = [&](std::string_view text) {
    return input.scorer ? checked(input.scorer(text, input.query)) : score_relevance(text, input.query);
  };
  std::map<std::string, double> by_id;
  for (auto& o : all.observations) by_id[o.id] = o.score = score(o.text);
  for (auto& e : all.entities) by_id[e.id] = e.score = e.text ? score(*e.text) : 0.0;
  for (auto& r : all.relations) r.score = std::max(by_id.at(r.subject), by_id.at(r.object));

  ContextState out = enforce_budget(std::move(all), input.budgets);
  validate_state(out);
  return out;
}

}  // namespace distill
