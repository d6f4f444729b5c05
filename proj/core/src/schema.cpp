#include "distill/schema.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <set>
#include <utility>

namespace distill {

using nlohmann::json;

namespace {

constexpr std::array<std::pair<EntityKind, std::string_view>, 8> kEntityKinds{{
    {EntityKind::text_span, "text_span"},
    {EntityKind::bounding_region, "bounding_region"},
    {EntityKind::table_cell, "table_cell"},
    {EntityKind::speaker, "speaker"},
    {EntityKind::code_block, "code_block"},
    {EntityKind::section, "section"},
    {EntityKind::figure, "figure"},
    {EntityKind::variable, "variable"},
}};

constexpr std::array<std::pair<RelationKind, std::string_view>, 7> kRelationKinds{{
    {RelationKind::axis_of, "axis_of"},
    {RelationKind::legend_entry, "legend_entry"},
    {RelationKind::refers_to, "refers_to"},
    {RelationKind::follows, "follows"},
    {RelationKind::contains, "contains"},
    {RelationKind::spoken_by, "spoken_by"},
    {RelationKind::aligned_with, "aligned_with"},
}};

std::string fixed6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  std::string s = buf;
  if (s == "-0.000000") s = "0.000000";
  return s;
}

std::string fixed1(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.1f", v);
  std::string s = buf;
  if (s == "-0.0") s = "0.0";
  return s;
}

void write_canonical(const json& v, std::string& out) {
  switch (v.type()) {
    case json::value_t::object: {
      out.push_back('{');
      bool first = true;
      for (const auto& [key, item] : v.items()) {
        if (!first) out.push_back(',');
        first = false;
        out += json(key).dump(-1, ' ', false, json::error_handler_t::replace);
        out.push_back(':');
        write_canonical(item, out);
      }
      out.push_back('}');
      break;
    }
    case json::value_t::array: {
      out.push_back('[');
      bool first = true;
      for (const auto& item : v) {
        if (!first) out.push_back(',');
        first = false;
        write_canonical(item, out);
      }
      out.push_back(']');
      break;
    }
    case json::value_t::number_float:
      out += fixed6(v.get<double>());
      break;
    default:
      out += v.dump(-1, ' ', false, json::error_handler_t::replace);
      break;
  }
}

json provenance_list(const std::vector<Provenance>& list) {
  json arr = json::array();
  for (const auto& p : list) arr.push_back(to_json(p));
  return arr;
}

std::vector<Provenance> provenance_list_from(const json& arr) {
  std::vector<Provenance> out;
  for (const auto& p : arr) out.push_back(provenance_from_json(p));
  return out;
}

double as_double(const json& j) { return j.get<double>(); }

}  // namespace

double iou(const Box& a, const Box& b) {
  const double ix = std::max(0.0, std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min));
  const double iy = std::max(0.0, std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min));
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  if (uni <= 0.0) return 0.0;
  return inter / uni;
}

Box enclose(const Box& a, const Box& b) {
  return {std::min(a.x_min, b.x_min), std::min(a.y_min, b.y_min), std::max(a.x_max, b.x_max),
          std::max(a.y_max, b.y_max)};
}

std::string_view to_string(EntityKind kind) {
  for (const auto& [k, name] : kEntityKinds) {
    if (k == kind) return name;
  }
  return "unknown";
}

EntityKind parse_entity_kind(std::string_view text) {
  for (const auto& [k, name] : kEntityKinds) {
    if (name == text) return k;
  }
  throw Error(ErrorCode::parse, "unknown entity kind '" + std::string(text) + "'");
}

std::string_view to_string(RelationKind kind) {
  for (const auto& [k, name] : kRelationKinds) {
    if (k == kind) return name;
  }
  return "unknown";
}

RelationKind parse_relation_kind(std::string_view text) {
  for (const auto& [k, name] : kRelationKinds) {
    if (name == text) return k;
  }
  throw Error(ErrorCode::parse, "unknown relation kind '" + std::string(text) + "'");
}

std::size_t count_tokens(std::string_view text) {
  std::size_t n = 0;
  bool in_token = false;
  for (char c : text) {
    const bool space = std::isspace(static_cast<unsigned char>(c)) != 0;
    if (!space && !in_token) ++n;
    in_token = !space;
  }
  return n;
}

std::string render_item(const Observation& o) { return "[" + o.id + "] " + o.text; }

std::string render_item(const Entity& e) {
  std::string out = "[" + e.id + "] " + std::string(to_string(e.kind));
  if (e.text) out += ": " + *e.text;
  if (e.region) {
    out += " box=(" + fixed1(e.region->x_min) + "," + fixed1(e.region->y_min) + "," +
           fixed1(e.region->x_max) + "," + fixed1(e.region->y_max) + ")";
  }
  if (e.span) {
    out += " span=(" + std::to_string(e.span->start) + "," + std::to_string(e.span->end) + ")";
  }
  for (const auto& [key, value] : e.attributes) out += " " + key + "=" + value;
  return out;
}

std::string render_item(const Relation& r) {
  return "[" + r.id + "] " + r.subject + " " + std::string(to_string(r.kind)) + " " + r.object;
}

std::string render_item(const Provenance& p) {
  std::string out = p.source_id + " sha256:" + p.content_hash + " " + format_timestamp(p.timestamp);
  if (p.locator) out += " @" + *p.locator;
  return out;
}

FieldTokens field_tokens(const ContextState& state) {
  FieldTokens t;
  for (const auto& o : state.observations) t.observations += count_tokens(render_item(o));
  for (const auto& e : state.entities) t.entities += count_tokens(render_item(e));
  for (const auto& r : state.relations) t.relations += count_tokens(render_item(r));
  for (const auto& [_, p] : state.provenance_index) t.provenance += count_tokens(render_item(p));
  return t;
}

bool within_budget(const ContextState& state, const TokenBudget& budget) {
  const auto t = field_tokens(state);
  return t.observations <= budget.observations_max && t.entities <= budget.entities_max &&
         t.relations <= budget.relations_max && t.provenance <= budget.provenance_max;
}

void validate_state(const ContextState& state) {
  auto fail = [](const std::string& msg) { throw Error(ErrorCode::invalid_argument, msg); };
  auto check_unit = [&](double v, const std::string& what) {
    if (!(v >= 0.0 && v <= 1.0)) fail(what + " outside [0,1]");
  };
  auto check_prov = [&](const std::vector<Provenance>& list, const std::string& id) {
    if (list.empty()) fail("item '" + id + "' has no provenance");
    for (const auto& p : list) {
      if (p.source_id.empty() || p.content_hash.empty()) {
        fail("item '" + id + "' has provenance without source_id or content_hash");
      }
    }
  };
  std::set<std::string> ids;
  for (const auto& o : state.observations) {
    if (!ids.insert(o.id).second) fail("duplicate id '" + o.id + "'");
    if (o.text.empty()) fail("observation '" + o.id + "' has empty text");
    check_unit(o.score, "score of '" + o.id + "'");
    check_prov(o.provenance, o.id);
  }
  for (const auto& e : state.entities) {
    if (!ids.insert(e.id).second) fail("duplicate id '" + e.id + "'");
    if (!e.text && !e.region && !e.span) fail("entity '" + e.id + "' has no text, region or span");
    check_unit(e.confidence, "confidence of '" + e.id + "'");
    check_unit(e.score, "score of '" + e.id + "'");
    check_prov(e.provenance, e.id);
  }
  for (const auto& r : state.relations) {
    if (!ids.insert(r.id).second) fail("duplicate id '" + r.id + "'");
    if (r.subject == r.object) fail("relation '" + r.id + "' links an item to itself");
    check_unit(r.score, "score of '" + r.id + "'");
    check_prov(r.provenance, r.id);
  }
  for (const auto& r : state.relations) {
    for (const auto* end : {&r.subject, &r.object}) {
      bool found = false;
      for (const auto& e : state.entities) found = found || e.id == *end;
      for (const auto& o : state.observations) found = found || o.id == *end;
      if (!found) fail("relation '" + r.id + "' has dangling endpoint '" + *end + "'");
    }
  }
}

json to_json(const Provenance& p) {
  json j = {{"source_id", p.source_id},
            {"content_hash", p.content_hash},
            {"timestamp", format_timestamp(p.timestamp)}};
  if (p.locator) j["locator"] = *p.locator;
  return j;
}

Provenance provenance_from_json(const json& j) {
  Provenance p;
  p.source_id = j.at("source_id").get<std::string>();
  p.content_hash = j.at("content_hash").get<std::string>();
  p.timestamp = parse_timestamp(j.at("timestamp").get<std::string>());
  if (j.contains("locator")) p.locator = j.at("locator").get<std::string>();
  return p;
}

json to_json(const ContextState& state) {
  json obs = json::array();
  for (const auto& o : state.observations) {
    obs.push_back({{"id", o.id},
                   {"text", o.text},
                   {"score", o.score},
                   {"provenance", provenance_list(o.provenance)}});
  }
  json ents = json::array();
  for (const auto& e : state.entities) {
    json j = {{"id", e.id},
              {"kind", std::string(to_string(e.kind))},
              {"confidence", e.confidence},
              {"score", e.score},
              {"provenance", provenance_list(e.provenance)}};
    if (e.text) j["text"] = *e.text;
    if (e.region) j["region"] = {e.region->x_min, e.region->y_min, e.region->x_max, e.region->y_max};
    if (e.span) j["span"] = {e.span->start, e.span->end};
    if (!e.attributes.empty()) j["attributes"] = e.attributes;
    ents.push_back(std::move(j));
  }
  json rels = json::array();
  for (const auto& r : state.relations) {
    rels.push_back({{"id", r.id},
                    {"kind", std::string(to_string(r.kind))},
                    {"subject", r.subject},
                    {"object", r.object},
                    {"score", r.score},
                    {"provenance", provenance_list(r.provenance)}});
  }
  json index = json::object();
  for (const auto& [source, p] : state.provenance_index) index[source] = to_json(p);
  return {{"observations", obs}, {"entities", ents}, {"relations", rels}, {"provenance_index", index}};
}

ContextState state_from_json(const json& j) {
  ContextState s;
  try {
    for (const auto& o : j.at("observations")) {
      s.observations.push_back({o.at("id").get<std::string>(), o.at("text").get<std::string>(),
                                as_double(o.at("score")), provenance_list_from(o.at("provenance"))});
    }
    for (const auto& e : j.at("entities")) {
      Entity ent;
      ent.id = e.at("id").get<std::string>();
      ent.kind = parse_entity_kind(e.at("kind").get<std::string>());
      ent.confidence = as_double(e.at("confidence"));
      ent.score = as_double(e.value("score", json(0.0)));
      ent.provenance = provenance_list_from(e.at("provenance"));
      if (e.contains("text")) ent.text = e.at("text").get<std::string>();
      if (e.contains("region")) {
        const auto& r = e.at("region");
        ent.region = Box{as_double(r.at(0)), as_double(r.at(1)), as_double(r.at(2)), as_double(r.at(3))};
      }
      if (e.contains("span")) {
        ent.span = CharSpan{e.at("span").at(0).get<std::int64_t>(), e.at("span").at(1).get<std::int64_t>()};
      }
      if (e.contains("attributes")) {
        ent.attributes = e.at("attributes").get<std::map<std::string, std::string>>();
      }
      s.entities.push_back(std::move(ent));
    }
    for (const auto& r : j.at("relations")) {
      s.relations.push_back({r.at("id").get<std::string>(),
                             parse_relation_kind(r.at("kind").get<std::string>()),
                             r.at("subject").get<std::string>(), r.at("object").get<std::string>(),
                             as_double(r.value("score", json(0.0))),
                             provenance_list_from(r.at("provenance"))});
    }
    for (const auto& [source, p] : j.at("provenance_index").items()) {
      s.provenance_index[source] = provenance_from_json(p);
    }
  } catch (const json::exception& ex) {
    throw Error(ErrorCode::parse, std::string("malformed context state: ") + ex.what());
  }
  return s;
}

std::string canonical_json(const json& value) {
  std::string out;
  write_canonical(value, out);
  return out;
}

std::string canonical_serialize(const ContextState& state) {
  for (const auto& r : state.relations) {
    for (const auto* end : {&r.subject, &r.object}) {
      const bool found =
          std::any_of(state.entities.begin(), state.entities.end(), [&](const Entity& e) { return e.id == *end; }) ||
          std::any_of(state.observations.begin(), state.observations.end(),
                      [&](const Observation& o) { return o.id == *end; });
      if (!found) {
        throw Error(ErrorCode::invalid_argument,
                    "cannot serialize: relation '" + r.id + "' has dangling endpoint '" + *end + "'");
      }
    }
  }
  return canonical_json(to_json(state));
}

ContextState parse_state(std::string_view canonical) {
  json j;
  try {
    j = json::parse(canonical);
  } catch (const json::parse_error& ex) {
    throw Error(ErrorCode::parse, std::string("context state is not JSON: ") + ex.what());
  }
  return state_from_json(j);
}

std::string context_digest(const ContextState& state) { return sha256_hex(canonical_serialize(state)); }

std::string render_prompt(const ContextState& state, std::string_view query, const TokenBudget& budget) {
  const auto t = field_tokens(state);
  auto over = [](const char* field, std::size_t have, std::size_t cap) {
    throw Error(ErrorCode::invalid_argument, std::string(field) + " uses " + std::to_string(have) +
                                                 " tokens, budget is " + std::to_string(cap));
  };
  if (t.observations > budget.observations_max) over("observations", t.observations, budget.observations_max);
  if (t.entities > budget.entities_max) over("entities", t.entities, budget.entities_max);
  if (t.relations > budget.relations_max) over("relations", t.relations, budget.relations_max);
  if (t.provenance > budget.provenance_max) over("provenance", t.provenance, budget.provenance_max);

  std::string out = "QUERY\n";
  out += query;
  out += "\n\nOBSERVATIONS\n";
  for (const auto& o : state.observations) out += render_item(o) + "\n";
  out += "\nENTITIES\n";
  for (const auto& e : state.entities) out += render_item(e) + "\n";
  out += "\nRELATIONS\n";
  for (const auto& r : state.relations) out += render_item(r) + "\n";
  out += "\nPROVENANCE\n";
  for (const auto& [_, p] : state.provenance_index) out += render_item(p) + "\n";
  return out;
}

void rebuild_provenance_index(ContextState& state) {
  std::map<std::string, Provenance> index;
  auto add = [&](const Provenance& p) {
    Provenance entry = p;
    entry.locator.reset();
    auto it = index.find(p.source_id);
    if (it == index.end()) {
      index.emplace(p.source_id, std::move(entry));
    } else if (std::tie(entry.timestamp, entry.content_hash) <
               std::tie(it->second.timestamp, it->second.content_hash)) {
      it->second = std::move(entry);
    }
  };
  for (const auto& o : state.observations) for (const auto& p : o.provenance) add(p);
  for (const auto& e : state.entities) for (const auto& p : e.provenance) add(p);
  for (const auto& r : state.relations) for (const auto& p : r.provenance) add(p);
  state.provenance_index = std::move(index);
}

}  // namespace distill
