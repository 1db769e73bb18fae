#pragma once

// Corpus ingestion and contiguous segment batching.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace parsearch {

enum class VocabMode { Char, Word };

VocabMode parse_vocab_mode(std::string_view text);
std::string vocab_mode_name(VocabMode mode);

class Vocab {
 public:
  // Char mode: one id per distinct byte, in byte order.
  // Word mode: whitespace tokens by descending frequency (ties lexicographic),
  // with "<unk>" fixed at id 0.
  static Vocab build(std::string_view text, VocabMode mode);
  static Vocab from_tokens(VocabMode mode, std::vector<std::string> tokens);

  VocabMode mode() const { return mode_; }
  std::size_t size() const { return tokens_.size(); }
  const std::string& token(std::int32_t id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  std::optional<std::int32_t> find(std::string_view token) const;

  // Word mode maps unseen words to <unk>; char mode rejects unseen bytes.
  std::vector<std::int32_t> encode(std::string_view text) const;
  std::string decode(std::span<const std::int32_t> ids) const;

 private:
  VocabMode mode_ = VocabMode::Char;
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> index_;
};

std::string read_text_file(const std::string& path);

// One segment for every lane; element [b*tgt_len + t].
struct Batch {
  std::size_t lanes = 0;
  std::size_t tgt_len = 0;
  std::vector<std::int32_t> inputs;
  std::vector<std::int32_t> targets;
};

// Folds the stream into `batch_size` contiguous lanes and walks them in
// tgt_len steps, so lane b of batch k continues lane b of batch k-1.
// The tail that does not fill a lane or a segment is dropped.
class SegmentBatcher {
 public:
  SegmentBatcher(std::span<const std::int32_t> ids, std::size_t batch_size, std::size_t tgt_len);

  std::size_t size() const { return n_batches_; }
  std::size_t position() const { return cursor_; }
  bool has_next() const { return cursor_ < n_batches_; }
  std::optional<Batch> next();
  void reset() { cursor_ = 0; }

  // Tokens of lane b after folding.
  std::span<const std::int32_t> lane(std::size_t b) const;

 private:
  std::vector<std::int32_t> ids_;
  std::size_t batch_size_;
  std::size_t tgt_len_;
  std::size_t lane_len_;
  std::size_t n_batches_;
  std::size_t cursor_ = 0;
};

// Token t copies token t - pattern_gap with probability copy_prob, otherwise
// it is uniform over the vocabulary. The first pattern_gap tokens are uniform.
std::vector<std::int32_t> synth_induction(std::size_t length, std::size_t vocab_size, std::size_t pattern_gap,
                                          std::uint64_t seed, double copy_prob = 0.9);

// Expected per-token NLL (nats) of the Bayes-optimal predictor that can see
// the copy source, and of one restricted to the current token only.
double induction_attention_optimal_nll(std::size_t vocab_size, double copy_prob = 0.9);
double induction_positionwise_optimal_nll(std::size_t vocab_size);

}  // namespace parsearch
