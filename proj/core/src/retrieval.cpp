#include "distill/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace distill {

using nlohmann::json;

std::string_view to_string(IndexKind kind) {
  switch (kind) {
    case IndexKind::code:
      return "code";
    case IndexKind::docs:
      return "docs";
    case IndexKind::web:
      return "web";
    case IndexKind::request:
      return "request";
  }
  return "web";
}

IndexKind parse_index_kind(std::string_view text) {
  if (text == "code") return IndexKind::code;
  if (text == "docs") return IndexKind::docs;
  if (text == "web") return IndexKind::web;
  if (text == "request") return IndexKind::request;
  throw Error(ErrorCode::invalid_argument, "unknown index kind '" + std::string(text) + "'");
}

SegmentIndex build_index(IndexKind kind, std::span<const PageSegment> segments) {
  SegmentIndex index;
  index.kind = kind;
  for (const auto& seg : segments) {
    if (!index.segments.emplace(seg.segment_id, seg).second) {
      throw Error(ErrorCode::invalid_argument, "duplicate segment id '" + seg.segment_id + "'");
    }
  }
  std::size_t total = 0;
  // Iterating the map keeps every posting list sorted by segment id.
  for (const auto& [id, seg] : index.segments) {
    std::map<std::string, std::size_t> tf;
    const auto terms = alnum_terms(seg.text);
    for (const auto& t : terms) ++tf[t];
    if (terms.empty()) continue;
    index.doc_length[id] = terms.size();
    total += terms.size();
    for (const auto& [term, n] : tf) index.postings[term].push_back({id, n});
  }
  if (!index.doc_length.empty()) {
    index.average_length = static_cast<double>(total) / static_cast<double>(index.doc_length.size());
  }
  return index;
}

std::vector<RankedHit> search(const SegmentIndex& index, std::string_view query, std::size_t k,
                              const Bm25Params& params) {
  if (k == 0) throw Error(ErrorCode::invalid_argument, "k must be at least 1");
  const auto terms = alnum_terms(query);
  const std::set<std::string> unique(terms.begin(), terms.end());
  const auto n = static_cast<double>(index.doc_length.size());
  std::map<std::string, double> scores;
  for (const auto& term : unique) {
    const auto it = index.postings.find(term);
    if (it == index.postings.end()) continue;
    const auto df = static_cast<double>(it->second.size());
    const double idf = std::log(1.0 + (n - df + 0.5) / (df + 0.5));
    for (const auto& p : it->second) {
      const auto tf = static_cast<double>(p.tf);
      const auto dl = static_cast<double>(index.doc_length.at(p.segment_id));
      const double norm = params.k1 * (1.0 - params.b + params.b * dl / index.average_length);
      scores[p.segment_id] += idf * tf * (params.k1 + 1.0) / (tf + norm);
    }
  }
  std::vector<RankedHit> hits;
  hits.reserve(scores.size());
  for (const auto& [id, s] : scores) hits.push_back({id, s, index.segments.at(id).provenance});
  std::stable_sort(hits.begin(), hits.end(), [](const RankedHit& a, const RankedHit& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.segment_id < b.segment_id;
  });
  if (hits.size() > k) hits.resize(k);
  return hits;
}

std::vector<IndexKind> route_query(std::string_view task_type, const ModalitySet& modalities) {
  std::vector<IndexKind> out;
  if (task_type == "code") {
    out.push_back(IndexKind::code);
  } else if (task_type == "tool_usage") {
    out.push_back(IndexKind::docs);
  } else {
    out.push_back(IndexKind::web);
  }
  if (modalities.count(Modality::document) || modalities.count(Modality::url)) out.push_back(IndexKind::request);
  return out;
}

ContextState hits_to_state(const SegmentIndex& index, std::span<const RankedHit> hits, const std::string& id_prefix) {
  ContextState state;
  for (const auto& hit : hits) {
    const auto& seg = index.segments.at(hit.segment_id);
    if (trim(seg.text).empty()) continue;
    state.observations.push_back({id_prefix + hit.segment_id, seg.text, 0.0, {seg.provenance}});
  }
  rebuild_provenance_index(state);
  return state;
}

std::vector<PageSegment> segment_text(std::string_view name, std::string_view text, std::size_t max_block_tokens,
                                      const Provenance& source) {
  std::vector<PageSegment> out;
  std::string block;
  std::size_t tokens = 0;
  std::size_t lines = 0;
  bool oversize = false;
  auto flush = [&] {
    if (lines == 0) return;
    const std::size_t b = out.size();
    Provenance p = source;
    p.locator = "block=" + std::to_string(b);
    out.push_back({std::string(name) + "#b" + std::to_string(b), 0, b, block, p, oversize});
    block.clear();
    tokens = 0;
    lines = 0;
    oversize = false;
  };
  std::size_t pos = 0;
  while (pos <= text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    const std::string_view line = text.substr(pos, nl - pos);
    pos = nl + 1;
    if (trim(line).empty()) {
      flush();
      continue;
    }
    const std::size_t t = count_tokens(line);
    if (lines > 0 && tokens + t > max_block_tokens) flush();
    if (lines > 0) block += "\n";
    block += line;
    tokens += t;
    ++lines;
    if (tokens > max_block_tokens) oversize = true;
  }
  flush();
  return out;
}

json to_json(const SegmentIndex& index) {
  json segments = json::array();
  for (const auto& [id, seg] : index.segments) {
    segments.push_back({{"segment_id", id},
                        {"page_index", seg.page_index},
                        {"block_index", seg.block_index},
                        {"text", seg.text},
                        {"oversize", seg.oversize},
                        {"provenance", to_json(seg.provenance)}});
  }
  json postings = json::object();
  for (const auto& [term, list] : index.postings) {
    json entries = json::array();
    for (const auto& p : list) entries.push_back({p.segment_id, p.tf});
    postings[term] = entries;
  }
  json lengths = json::object();
  for (const auto& [id, n] : index.doc_length) lengths[id] = n;
  return {{"format", "distill-index/1"},
          {"kind", to_string(index.kind)},
          {"segments", segments},
          {"postings", postings},
          {"doc_length", lengths}};
}

SegmentIndex index_from_json(const json& j) {
  try {
    if (j.at("format") != "distill-index/1") throw Error(ErrorCode::parse, "unsupported index format");
    std::vector<PageSegment> segments;
    for (const auto& s : j.at("segments")) {
      segments.push_back({s.at("segment_id").get<std::string>(), s.at("page_index").get<std::size_t>(),
                          s.at("block_index").get<std::size_t>(), s.at("text").get<std::string>(),
                          provenance_from_json(s.at("provenance")), s.value("oversize", false)});
    }
    // Postings are derived data; rebuilding them guarantees they agree with
    // the stored segments.
    SegmentIndex index = build_index(parse_index_kind(j.at("kind").get<std::string>()), segments);
    if (to_json(index) != j) throw Error(ErrorCode::parse, "index postings do not match its segments");
    return index;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::parse, std::string("malformed index: ") + e.what());
  }
}

std::string dump_index(const SegmentIndex& index) { return canonical_json(to_json(index)); }

SegmentIndex load_index(std::string_view dump) {
  json j;
  try {
    j = json::parse(dump);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::parse, std::string("index is not JSON: ") + e.what());
  }
  return index_from_json(j);
}

}  // namespace distill
