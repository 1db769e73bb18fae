#include "parsearch/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "parsearch/error.hpp"
#include "parsearch/rng.hpp"

namespace parsearch {

VocabMode parse_vocab_mode(std::string_view text) {
  if (text == "char") return VocabMode::Char;
  if (text == "word") return VocabMode::Word;
  throw ConfigError("vocab mode must be 'char' or 'word', got '" + std::string(text) + "'");
}

std::string vocab_mode_name(VocabMode mode) { return mode == VocabMode::Char ? "char" : "word"; }

namespace {

bool is_space(char c) { return c == ' ' || c == '\n' || c == '\t' || c == '\r' || c == '\f' || c == '\v'; }

template <typename Fn>
void for_each_word(std::string_view text, Fn&& fn) {
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    const std::size_t start = i;
    while (i < text.size() && !is_space(text[i])) ++i;
    if (i > start) fn(text.substr(start, i - start));
  }
}

}  // namespace

Vocab Vocab::build(std::string_view text, VocabMode mode) {
  if (text.empty()) throw ConfigError("cannot build a vocabulary from empty input");
  std::vector<std::string> tokens;
  if (mode == VocabMode::Char) {
    bool seen[256] = {};
    for (char c : text) seen[static_cast<unsigned char>(c)] = true;
    for (int b = 0; b < 256; ++b) {
      if (seen[b]) tokens.emplace_back(1, static_cast<char>(b));
    }
  } else {
    std::map<std::string, std::size_t, std::less<>> counts;
    for_each_word(text, [&](std::string_view w) { ++counts[std::string(w)]; });
    if (counts.empty()) throw ConfigError("cannot build a word vocabulary from whitespace-only input");
    std::vector<std::pair<std::string, std::size_t>> sorted(counts.begin(), counts.end());
    std::stable_sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    tokens.emplace_back("<unk>");
    for (auto& [w, n] : sorted) {
      if (w != "<unk>") tokens.push_back(w);
    }
  }
  return from_tokens(mode, std::move(tokens));
}

Vocab Vocab::from_tokens(VocabMode mode, std::vector<std::string> tokens) {
  Vocab v;
  v.mode_ = mode;
  v.tokens_ = std::move(tokens);
  for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
    if (!v.index_.emplace(v.tokens_[i], static_cast<std::int32_t>(i)).second) {
      throw ConfigError("duplicate vocabulary token at id " + std::to_string(i));
    }
  }
  return v;
}

std::optional<std::int32_t> Vocab::find(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::vector<std::int32_t> Vocab::encode(std::string_view text) const {
  std::vector<std::int32_t> ids;
  if (mode_ == VocabMode::Char) {
    ids.reserve(text.size());
    for (std::size_t i = 0; i < text.size(); ++i) {
      auto id = find(text.substr(i, 1));
      if (!id) throw IndexError("byte at offset " + std::to_string(i) + " is not in the character vocabulary");
      ids.push_back(*id);
    }
  } else {
    for_each_word(text, [&](std::string_view w) { ids.push_back(find(w).value_or(0)); });
  }
  return ids;
}

std::string Vocab::decode(std::span<const std::int32_t> ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (mode_ == VocabMode::Word && i > 0) out += ' ';
    out += token(ids[i]);
  }
  return out;
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open data file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

SegmentBatcher::SegmentBatcher(std::span<const std::int32_t> ids, std::size_t batch_size, std::size_t tgt_len)
    : ids_(ids.begin(), ids.end()), batch_size_(batch_size), tgt_len_(tgt_len) {
  if (batch_size == 0 || tgt_len == 0) throw ConfigError("batch_size and tgt_len must be >= 1");
  if (ids_.size() < batch_size * (tgt_len + 1)) {
    throw ConfigError("corpus of " + std::to_string(ids_.size()) + " tokens is too small for batch " +
                      std::to_string(batch_size) + " x (tgt_len " + std::to_string(tgt_len) + " + 1)");
  }
  lane_len_ = ids_.size() / batch_size;
  n_batches_ = (lane_len_ - 1) / tgt_len;
}

std::optional<Batch> SegmentBatcher::next() {
  if (!has_next()) return std::nullopt;
  Batch b;
  b.lanes = batch_size_;
  b.tgt_len = tgt_len_;
  b.inputs.reserve(batch_size_ * tgt_len_);
  b.targets.reserve(batch_size_ * tgt_len_);
  for (std::size_t lane = 0; lane < batch_size_; ++lane) {
    const std::int32_t* base = ids_.data() + lane * lane_len_ + cursor_ * tgt_len_;
    b.inputs.insert(b.inputs.end(), base, base + tgt_len_);
    b.targets.insert(b.targets.end(), base + 1, base + tgt_len_ + 1);
  }
  ++cursor_;
  return b;
}

std::span<const std::int32_t> SegmentBatcher::lane(std::size_t b) const {
  return std::span<const std::int32_t>(ids_).subspan(b * lane_len_, lane_len_);
}

std::vector<std::int32_t> synth_induction(std::size_t length, std::size_t vocab_size, std::size_t pattern_gap,
                                          std::uint64_t seed, double copy_prob) {
  if (pattern_gap < 2) throw ContractError("synth_induction: pattern_gap must be >= 2");
  if (vocab_size == 0) throw ContractError("synth_induction: vocab_size must be >= 1");
  if (!(copy_prob >= 0 && copy_prob <= 1)) throw ContractError("synth_induction: copy_prob must be in [0, 1]");
  CounterRng rng(seed, 7);
  std::vector<std::int32_t> out(length);
  for (std::size_t t = 0; t < length; ++t) {
    const bool copy = t >= pattern_gap && rng.uniform(2 * t) < copy_prob;
    out[t] = copy ? out[t - pattern_gap]
                  : static_cast<std::int32_t>(rng.bits(2 * t + 1) % static_cast<std::uint64_t>(vocab_size));
  }
  return out;
}

double induction_attention_optimal_nll(std::size_t vocab_size, double copy_prob) {
  const double v = static_cast<double>(vocab_size);
  const double hit = copy_prob + (1 - copy_prob) / v;
  const double miss = (1 - copy_prob) / v;
  double nll = -hit * std::log(hit);
  if (miss > 0) nll -= (v - 1) * miss * std::log(miss);
  return nll;
}

double induction_positionwise_optimal_nll(std::size_t vocab_size) {
  // Every token is marginally uniform and independent of its predecessor
  // (the two descend from disjoint copy chains for gap >= 2).
  return std::log(static_cast<double>(vocab_size));
}

}  // namespace parsearch
