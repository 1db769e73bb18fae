#include "parsearch/archspec.hpp"

#include <algorithm>
#include <utility>

#include "parsearch/error.hpp"

namespace parsearch {

bool ArchSpec::has_identity() const {
  return std::find(blocks_.begin(), blocks_.end(), BlockKind::Identity) != blocks_.end();
}

ArchSpec ArchSpec::operator+(const ArchSpec& other) const {
  std::vector<BlockKind> out = blocks_;
  out.insert(out.end(), other.blocks_.begin(), other.blocks_.end());
  return ArchSpec(std::move(out));
}

namespace {

class Parser {
 public:
  explicit Parser(std::string_view text) : text_(text) {}

  ArchSpec run() {
    if (text_.empty()) fail("empty architecture string");
    std::vector<BlockKind> out;
    group(out);
    while (pos_ < text_.size()) {
      if (peek() != ' ') fail(describe() + ", expected ' ' before next group");
      while (pos_ < text_.size() && peek() == ' ') ++pos_;
      if (pos_ == text_.size()) fail("trailing whitespace");
      group(out);
    }
    return ArchSpec(std::move(out));
  }

 private:
  char peek() const { return text_[pos_]; }

  [[noreturn]] void fail(const std::string& message) const { throw ParseError(pos_, message); }

  std::string describe() const {
    if (pos_ >= text_.size()) return "unexpected end of input";
    const char c = peek();
    const bool allowed = c == 's' || c == 'f' || c == '(' || c == ')' || c == 'x' || c == ' ' ||
                         (c >= '0' && c <= '9');
    if (!allowed) return "invalid character (byte 0x" + hex(static_cast<unsigned char>(c)) + ")";
    return std::string("unexpected '") + c + "'";
  }

  static std::string hex(unsigned v) {
    const char* digits = "0123456789abcdef";
    return {digits[v >> 4], digits[v & 15]};
  }

  void expect(char c) {
    if (pos_ >= text_.size() || peek() != c) fail(describe() + ", expected '" + std::string(1, c) + "'");
    ++pos_;
  }

  void group(std::vector<BlockKind>& out) {
    expect('(');
    std::vector<BlockKind> body;
    while (pos_ < text_.size() && (peek() == 's' || peek() == 'f')) {
      body.push_back(peek() == 's' ? BlockKind::SelfAttention : BlockKind::FeedForward);
      ++pos_;
    }
    if (body.empty()) {
      if (pos_ < text_.size() && peek() == ')') fail("empty group");
      fail(describe() + ", expected 's' or 'f'");
    }
    expect(')');
    expect('x');
    const std::size_t count_at = pos_;
    std::size_t count = 0;
    bool any = false;
    while (pos_ < text_.size() && peek() >= '0' && peek() <= '9') {
      count = count * 10 + static_cast<std::size_t>(peek() - '0');
      any = true;
      ++pos_;
      if (count > kMaxArchBlocks) throw ParseError(count_at, "repeat count too large");
    }
    if (!any) fail(describe() + ", expected repeat count");
    if (count == 0) throw ParseError(count_at, "repeat count must be >= 1");
    if (out.size() + body.size() * count > kMaxArchBlocks) throw ParseError(count_at, "architecture too long");
    for (std::size_t r = 0; r < count; ++r) out.insert(out.end(), body.begin(), body.end());
  }

  std::string_view text_;
  std::size_t pos_ = 0;
};

}  // namespace

ArchSpec parse_arch(std::string_view text) { return Parser(text).run(); }

std::string format_arch(const ArchSpec& spec) {
  if (spec.empty()) throw ContractError("format_arch: empty architecture");
  if (spec.has_identity()) throw ContractError("format_arch: identity blocks present; compact() first");
  const auto& b = spec.blocks();
  const std::size_t n = b.size();
  // Longest run of a repeated unit starting at i, as {period, count}; count 1
  // when nothing of period <= 8 repeats there.
  auto best_run = [&](std::size_t i) {
    std::size_t best_period = 1, best_count = 1;
    for (std::size_t period = 1; period <= 8 && i + period <= n; ++period) {
      std::size_t count = 1;
      while (i + (count + 1) * period <= n &&
             std::equal(b.begin() + i, b.begin() + i + period, b.begin() + i + count * period)) {
        ++count;
      }
      if (count > 1 && count * period > best_count * best_period) {
        best_period = period;
        best_count = count;
      }
    }
    return std::pair{best_period, best_count};
  };
  std::string out;
  auto emit = [&](std::size_t from, std::size_t period, std::size_t count) {
    if (!out.empty()) out += ' ';
    out += '(';
    for (std::size_t k = 0; k < period; ++k) out += block_code(b[from + k]);
    out += ")x" + std::to_string(count);
  };
  std::size_t i = 0;
  while (i < n) {
    const auto [period, count] = best_run(i);
    if (count > 1) {
      emit(i, period, count);
      i += period * count;
      continue;
    }
    // Blocks that start no repetition are gathered into one x1 group.
    std::size_t j = i + 1;
    while (j < n && best_run(j).second == 1) ++j;
    emit(i, j - i, 1);
    i = j;
  }
  return out;
}

ArchSpec compact(const ArchSpec& spec) {
  std::vector<BlockKind> out;
  for (BlockKind k : spec.blocks()) {
    if (k != BlockKind::Identity) out.push_back(k);
  }
  return ArchSpec(std::move(out));
}

BlockCounts count_blocks(const ArchSpec& spec) {
  BlockCounts c;
  for (BlockKind k : spec.blocks()) {
    switch (k) {
      case BlockKind::SelfAttention: ++c.n_attention; break;
      case BlockKind::FeedForward: ++c.n_ff; break;
      case BlockKind::Identity: ++c.n_identity; break;
    }
  }
  return c;
}

}  // namespace parsearch
