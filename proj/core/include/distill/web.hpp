#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "distill/document.hpp"
#include "distill/schema.hpp"

namespace distill {

enum class BlockKind { section, paragraph, code, figure };

std::string_view to_string(BlockKind kind);

struct DomBlock {
  BlockKind kind = BlockKind::paragraph;
  int level = 0;  // sections only, 1-6
  std::string text;
  /// Byte interval [begin, end) of the element in the input markup.
  std::size_t begin = 0;
  std::size_t end = 0;
  friend bool operator==(const DomBlock&, const DomBlock&) = default;
};

/// Removes nav, footer, aside, script and style subtrees; everything else is
/// kept byte for byte. Throws Error(parse) naming the offset of an
/// unbalanced tag.
std::string strip_boilerplate(std::string_view markup);

/// Sections (h1-h6), paragraphs, code blocks (pre, or code outside running
/// text) and figures (img with alt) in document order. Boilerplate subtrees
/// are skipped. Code text is the raw inner source; other text is
/// entity-decoded with whitespace collapsed.
std::vector<DomBlock> extract_blocks(std::string_view markup);

/// Sections, code blocks and figures become entities, paragraphs become
/// observations; each block is contained by the nearest preceding section of
/// a lower level. Ids are "w{i}" by block index.
ContextState blocks_to_state(std::span<const DomBlock> blocks, const Provenance& source);

/// One retrieval segment per block, ids "p0b{i}".
std::vector<PageSegment> blocks_to_segments(std::span<const DomBlock> blocks, const Provenance& source);

/// Decodes the common named references and numeric character references.
std::string decode_entities(std::string_view text);

}  // namespace distill
