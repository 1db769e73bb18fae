#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "parsearch/data.hpp"
#include "parsearch/error.hpp"

using namespace parsearch;

namespace {

std::vector<std::int32_t> iota_ids(std::size_t n) {
  std::vector<std::int32_t> ids(n);
  for (std::size_t i = 0; i < n; ++i) ids[i] = static_cast<std::int32_t>(i);
  return ids;
}

std::vector<Batch> drain(SegmentBatcher& b) {
  std::vector<Batch> out;
  while (auto batch = b.next()) out.push_back(std::move(*batch));
  return out;
}

}  // namespace

TEST_CASE("char vocabulary") {
  const Vocab v = Vocab::build("abab", VocabMode::Char);
  CHECK(v.size() == 2);
  CHECK(v.token(0) == "a");
  CHECK(v.token(1) == "b");
  CHECK(v.encode("abba") == std::vector<std::int32_t>{0, 1, 1, 0});
  CHECK_THROWS_AS(v.encode("abc"), IndexError);

  const std::string text = "the quick brown fox\n\tjumps";
  const Vocab w = Vocab::build(text, VocabMode::Char);
  CHECK(w.decode(w.encode(text)) == text);
}

TEST_CASE("word vocabulary") {
  const Vocab v = Vocab::build("a b a", VocabMode::Word);
  CHECK(v.tokens() == std::vector<std::string>{"<unk>", "a", "b"});
  CHECK(v.encode("b a zzz") == std::vector<std::int32_t>{2, 1, 0});
  CHECK(v.decode(v.encode("a  b\na")) == "a b a");
  CHECK(v.find("<unk>") == 0);
  CHECK_FALSE(v.find("c").has_value());

  // Equal counts fall back to lexicographic order.
  const Vocab tie = Vocab::build("z y x x", VocabMode::Word);
  CHECK(tie.tokens() == std::vector<std::string>{"<unk>", "x", "y", "z"});
  // A literal <unk> in the text does not get a second id.
  CHECK(Vocab::build("<unk> a", VocabMode::Word).size() == 2);
}

TEST_CASE("vocabulary is a bijection onto its id range") {
  const std::string text = "to be or not to be that is the question";
  for (VocabMode mode : {VocabMode::Char, VocabMode::Word}) {
    const Vocab v = Vocab::build(text, mode);
    for (std::size_t i = 0; i < v.size(); ++i) {
      const std::int32_t id = static_cast<std::int32_t>(i);
      CHECK(v.find(v.token(id)) == id);
    }
    for (std::int32_t id : v.encode(text)) {
      CHECK(id >= 0);
      CHECK(static_cast<std::size_t>(id) < v.size());
    }
    CHECK(Vocab::build(text, mode).tokens() == v.tokens());
  }
}

TEST_CASE("vocabulary errors") {
  CHECK_THROWS_AS(Vocab::build("", VocabMode::Char), ConfigError);
  CHECK_THROWS_AS(Vocab::build(" \n ", VocabMode::Word), ConfigError);
  CHECK_THROWS_AS(Vocab::from_tokens(VocabMode::Char, {"a", "a"}), ConfigError);
  CHECK_THROWS_AS(parse_vocab_mode("bpe"), ConfigError);
  CHECK(parse_vocab_mode("word") == VocabMode::Word);
  CHECK(vocab_mode_name(VocabMode::Char) == "char");
}

TEST_CASE("text files round trip through the char vocabulary") {
  const std::filesystem::path dir = PARSEARCH_TEST_DATA_DIR;
  std::filesystem::create_directories(dir);
  const std::filesystem::path file = dir / "data_roundtrip.txt";
  const std::string text = std::string("line one\nline two\r\n") + '\0' + "\xff";
  std::ofstream(file, std::ios::binary) << text;
  const std::string read = read_text_file(file.string());
  CHECK(read == text);
  const Vocab v = Vocab::build(read, VocabMode::Char);
  CHECK(v.encode(read) == Vocab::build(read_text_file(file.string()), VocabMode::Char).encode(read));
  CHECK(v.decode(v.encode(read)) == text);
  CHECK_THROWS_AS(read_text_file((dir / "missing.txt").string()), ConfigError);
}

TEST_CASE("batches of one lane") {
  const std::vector<std::int32_t> ids = iota_ids(10);
  SegmentBatcher b(ids, 1, 3);
  CHECK(b.size() == 3);
  const std::vector<Batch> batches = drain(b);
  REQUIRE(batches.size() == 3);
  CHECK(batches[0].inputs == std::vector<std::int32_t>{0, 1, 2});
  CHECK(batches[0].targets == std::vector<std::int32_t>{1, 2, 3});
  CHECK(batches[1].inputs == std::vector<std::int32_t>{3, 4, 5});
  CHECK(batches[1].targets == std::vector<std::int32_t>{4, 5, 6});
  CHECK(batches[2].inputs == std::vector<std::int32_t>{6, 7, 8});
  CHECK(batches[2].targets == std::vector<std::int32_t>{7, 8, 9});
  CHECK_FALSE(b.next().has_value());
  b.reset();
  CHECK(b.next()->inputs == batches[0].inputs);
}

TEST_CASE("folding into lanes") {
  const std::vector<std::int32_t> ids = iota_ids(10);
  SegmentBatcher b(ids, 2, 2);
  CHECK(std::vector<std::int32_t>(b.lane(0).begin(), b.lane(0).end()) == std::vector<std::int32_t>{0, 1, 2, 3, 4});
  CHECK(std::vector<std::int32_t>(b.lane(1).begin(), b.lane(1).end()) == std::vector<std::int32_t>{5, 6, 7, 8, 9});
  const std::vector<Batch> batches = drain(b);
  REQUIRE(batches.size() == 2);
  CHECK(batches[0].lanes == 2);
  CHECK(batches[0].inputs == std::vector<std::int32_t>{0, 1, 5, 6});
  CHECK(batches[0].targets == std::vector<std::int32_t>{1, 2, 6, 7});
  CHECK(batches[1].inputs == std::vector<std::int32_t>{2, 3, 7, 8});
  CHECK(batches[1].targets == std::vector<std::int32_t>{3, 4, 8, 9});
}

TEST_CASE("lanes are contiguous across batches and the yield matches the arithmetic") {
  for (std::size_t n : {10u, 37u, 100u, 1001u}) {
    for (std::size_t batch = 1; batch <= 4; ++batch) {
      for (std::size_t tgt = 1; tgt <= 7; ++tgt) {
        if (n < batch * (tgt + 1)) continue;
        const std::vector<std::int32_t> ids = iota_ids(n);
        SegmentBatcher b(ids, batch, tgt);
        const std::vector<Batch> batches = drain(b);
        const std::size_t lane_len = n / batch;
        CHECK(batches.size() * tgt * batch == (lane_len - 1) / tgt * tgt * batch);
        for (std::size_t lane = 0; lane < batch; ++lane) {
          std::vector<std::int32_t> joined, targets;
          for (const Batch& bt : batches) {
            joined.insert(joined.end(), bt.inputs.begin() + lane * tgt, bt.inputs.begin() + (lane + 1) * tgt);
            targets.insert(targets.end(), bt.targets.begin() + lane * tgt, bt.targets.begin() + (lane + 1) * tgt);
          }
          for (std::size_t i = 0; i < joined.size(); ++i) {
            CHECK(joined[i] == static_cast<std::int32_t>(lane * lane_len + i));
            CHECK(targets[i] == joined[i] + 1);
          }
        }
      }
    }
  }
}

TEST_CASE("batcher rejects corpora that are too small") {
  const std::vector<std::int32_t> ids = iota_ids(7);
  CHECK_THROWS_AS(SegmentBatcher(ids, 2, 3), ConfigError);
  CHECK_NOTHROW(SegmentBatcher(ids, 1, 3));
  CHECK_THROWS_AS(SegmentBatcher(ids, 0, 3), ConfigError);
  CHECK_THROWS_AS(SegmentBatcher(ids, 1, 0), ConfigError);
}

TEST_CASE("induction corpus is deterministic and in range") {
  const auto a = synth_induction(5000, 16, 8, 42);
  CHECK(a == synth_induction(5000, 16, 8, 42));
  CHECK(a != synth_induction(5000, 16, 8, 43));
  for (std::int32_t t : a) {
    CHECK(t >= 0);
    CHECK(t < 16);
  }
  const auto noiseless = synth_induction(1000, 16, 4, 1, 1.0);
  for (std::size_t t = 4; t < noiseless.size(); ++t) CHECK(noiseless[t] == noiseless[t - 4]);
  CHECK_THROWS_AS(synth_induction(10, 16, 1, 0), ContractError);
  CHECK_THROWS_AS(synth_induction(10, 16, 4, 0, 1.5), ContractError);
}

TEST_CASE("induction corpus statistics") {
  const std::size_t v = 8, gap = 5, n = 400000;
  const auto s = synth_induction(n, v, gap, 9);
  std::size_t repeats = 0;
  std::vector<double> marginal(v, 0);
  std::vector<std::vector<double>> pair(v, std::vector<double>(v, 0));
  for (std::size_t t = 0; t < n; ++t) {
    marginal[static_cast<std::size_t>(s[t])] += 1;
    if (t >= gap && s[t] == s[t - gap]) ++repeats;
    if (t >= 1) pair[static_cast<std::size_t>(s[t - 1])][static_cast<std::size_t>(s[t])] += 1;
  }
  const double repeat_rate = static_cast<double>(repeats) / static_cast<double>(n - gap);
  CHECK(repeat_rate == doctest::Approx(0.9 + 0.1 / v).epsilon(0.005));
  for (double m : marginal) CHECK(m / n == doctest::Approx(1.0 / v).epsilon(0.03));

  // Plug-in entropy of the next token given the current one.
  double cond = 0;
  for (std::size_t a = 0; a < v; ++a) {
    double row = 0;
    for (double c : pair[a]) row += c;
    for (double c : pair[a]) {
      if (c > 0) cond -= c / (n - 1) * std::log(c / row);
    }
  }
  CHECK(std::abs(cond - std::log(static_cast<double>(v))) < 1e-3);
}

TEST_CASE("optimal induction losses") {
  CHECK(induction_attention_optimal_nll(4, 1.0) == 0.0);
  CHECK(induction_attention_optimal_nll(16, 0.0) == doctest::Approx(std::log(16.0)).epsilon(1e-14));
  CHECK(induction_positionwise_optimal_nll(32) == doctest::Approx(std::log(32.0)).epsilon(1e-14));

  // Monte-Carlo loss of the predictor that puts 0.9 + 0.1/V on the copy source.
  const std::size_t v = 32, gap = 8, n = 400000;
  const auto s = synth_induction(n, v, gap, 3);
  const double hit = 0.9 + 0.1 / v, miss = 0.1 / v;
  double nll = 0;
  for (std::size_t t = gap; t < n; ++t) nll -= std::log(s[t] == s[t - gap] ? hit : miss);
  nll /= static_cast<double>(n - gap);
  MESSAGE("empirical copy-predictor NLL " << nll << " vs " << induction_attention_optimal_nll(v));
  CHECK(nll == doctest::Approx(induction_attention_optimal_nll(v)).epsilon(0.02));
  CHECK(induction_attention_optimal_nll(v) < 0.5 * induction_positionwise_optimal_nll(v));
}
