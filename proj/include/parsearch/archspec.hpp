#pragma once

// Architecture strings: a whitespace-separated list of groups "(<s|f>+)x<n>",
// each expanding to its block sequence repeated n times, e.g. "(sfff)x6 (f)x8".

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "parsearch/blocks.hpp"

namespace parsearch {

struct BlockCounts {
  std::size_t n_attention = 0;
  std::size_t n_ff = 0;
  std::size_t n_identity = 0;

  std::size_t total() const { return n_attention + n_ff + n_identity; }
  bool operator==(const BlockCounts&) const = default;
};

class ArchSpec {
 public:
  ArchSpec() = default;
  explicit ArchSpec(std::vector<BlockKind> blocks) : blocks_(std::move(blocks)) {}

  const std::vector<BlockKind>& blocks() const { return blocks_; }
  std::size_t size() const { return blocks_.size(); }
  bool empty() const { return blocks_.empty(); }
  // An empty spec only arises from compacting an all-identity layout.
  bool degenerate() const { return blocks_.empty(); }
  BlockKind operator[](std::size_t i) const { return blocks_[i]; }
  bool has_identity() const;

  ArchSpec operator+(const ArchSpec& other) const;
  bool operator==(const ArchSpec&) const = default;

 private:
  std::vector<BlockKind> blocks_;
};

// Largest expansion parse() accepts.
inline constexpr std::size_t kMaxArchBlocks = 1 << 20;

ArchSpec parse_arch(std::string_view text);
// Canonical string; throws ContractError if the spec holds Identity blocks or is empty.
std::string format_arch(const ArchSpec& spec);
ArchSpec compact(const ArchSpec& spec);
BlockCounts count_blocks(const ArchSpec& spec);

}  // namespace parsearch
