#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "distill/document.hpp"
#include "distill/ingress.hpp"
#include "distill/schema.hpp"

namespace distill {

/// `request` is the ephemeral per-request document index.
enum class IndexKind { code, docs, web, request };

std::string_view to_string(IndexKind kind);
IndexKind parse_index_kind(std::string_view text);

struct Posting {
  std::string segment_id;
  std::size_t tf = 0;
  friend bool operator==(const Posting&, const Posting&) = default;
};

/// Immutable once built; safe for concurrent search.
struct SegmentIndex {
  IndexKind kind = IndexKind::docs;
  std::map<std::string, std::vector<Posting>> postings;  // term -> sorted by segment_id
  std::map<std::string, std::size_t> doc_length;         // segments with at least one term
  std::map<std::string, PageSegment> segments;
  double average_length = 0.0;
};

struct RankedHit {
  std::string segment_id;
  double score = 0.0;
  Provenance provenance;
};

struct Bm25Params {
  double k1 = 1.2;
  double b = 0.75;
};

/// Throws Error(invalid_argument) on duplicate segment ids.
SegmentIndex build_index(IndexKind kind, std::span<const PageSegment> segments);

/// Okapi BM25 over the distinct query terms, idf = ln(1 + (N - df + 0.5) / (df + 0.5)).
/// Top k by (score desc, segment_id asc); segments sharing no term are left out.
std::vector<RankedHit> search(const SegmentIndex& index, std::string_view query, std::size_t k = 5,
                              const Bm25Params& params = {});

/// code -> [code], tool_usage -> [docs], anything else -> [web]; a document
/// or url modality appends the request index.
std::vector<IndexKind> route_query(std::string_view task_type, const ModalitySet& modalities);

/// Hits as observations (id prefix + segment id), text from the segment store.
ContextState hits_to_state(const SegmentIndex& index, std::span<const RankedHit> hits, const std::string& id_prefix);

/// Splits a text file into segments "{name}#b{i}": lines are packed greedily
/// up to max_block_tokens and a blank line always ends a block.
std::vector<PageSegment> segment_text(std::string_view name, std::string_view text, std::size_t max_block_tokens,
                                      const Provenance& source);

nlohmann::json to_json(const SegmentIndex& index);
SegmentIndex index_from_json(const nlohmann::json& j);
/// Canonical single-file dump.
std::string dump_index(const SegmentIndex& index);
SegmentIndex load_index(std::string_view dump);

}  // namespace distill
