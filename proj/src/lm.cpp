#include "parsearch/lm.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include "parsearch/error.hpp"
#include "parsearch/numfmt.hpp"

namespace parsearch {

TrainConfig TrainConfig::desk() {
  TrainConfig t;
  t.optimizer.kind = OptimizerKind::Adam;
  t.optimizer.lr = 3e-3;
  t.optimizer.clip_norm = 1.0;
  t.batch_size = 16;
  t.lr_floor = 0.1;
  return t;
}

void TrainConfig::validate() const {
  optimizer.validate();
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (!(lr_floor >= 0 && lr_floor <= 1)) throw ConfigError("lr_floor must be in [0, 1]");
}

TrainResult train_fixed(const ArchSpec& spec, std::span<const std::int32_t> ids, const ModelConfig& config,
                        const TrainConfig& train, std::size_t steps, std::uint64_t seed,
                        const TrainObserver& observer) {
  if (spec.empty()) throw ContractError("train_fixed: empty spec");
  if (spec.has_identity()) throw ContractError("train_fixed: spec contains identity blocks; compact() it first");
  train.validate();
  config.validate();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= config.vocab_size) {
      throw ConfigError("token id " + std::to_string(ids[i]) + " at position " + std::to_string(i) +
                        " is outside vocab_size " + std::to_string(config.vocab_size));
    }
  }
  SegmentBatcher batcher(ids, train.batch_size, config.tgt_len);

  TrainResult out{TransformerLM(spec, config, seed), {}};
  TransformerLM& model = out.model;
  Optimizer opt(model.parameters(), train.optimizer);
  MemoryState mem = MemoryState::empty(spec.size(), train.batch_size, config.d_model);
  CounterRng dropout_rng(seed, 5);

  for (std::size_t step = 0; step < steps; ++step) {
    if (!batcher.has_next()) {
      batcher.reset();
      mem.clear();
    }
    const Batch batch = *batcher.next();
    opt.zero_grad();
    Graph g;
    ForwardContext ctx{batch.lanes, true, &dropout_rng, nullptr};
    const double scale = train.cosine_schedule ? cosine_scale(step, steps, train.lr_floor) : 1.0;
    SegmentOutput seg;
    Var loss;
    try {
      seg = model.forward(g, batch.inputs, mem, ctx, true);
      loss = cross_entropy(seg.logits, batch.targets);
    } catch (const NumericError& e) {
      throw TrainingAbort("training diverged at step " + std::to_string(step) + ": " + e.what() +
                          " lr=" + format_double(train.optimizer.lr * scale));
    }
    const double value = loss.value()[0];
    g.backward(loss);
    const double norm = opt.grad_norm();
    if (!std::isfinite(value) || !std::isfinite(norm)) {
      throw TrainingAbort("training diverged at step " + std::to_string(step) + ": loss=" + format_double(value) +
                          " lr=" + format_double(train.optimizer.lr * scale) + " grad_norm=" + format_double(norm));
    }
    opt.step(scale);
    mem.update(seg.layer_inputs, config.mem_len);
    out.loss_curve.push_back(value);
    if (observer) observer(step, value);
  }
  return out;
}

void EvalConfig::validate() const {
  if (tgt_len == 0) throw ConfigError("eval tgt_len must be >= 1");
  if (batch_size == 0) throw ConfigError("eval batch_size must be >= 1");
}

EvalReport evaluate(TransformerLM& model, std::span<const std::int32_t> ids, const EvalConfig& ec) {
  ec.validate();
  const ModelConfig& c = model.config();
  const std::size_t lanes = ec.batch_size;
  if (ids.size() < 2 * lanes) {
    throw ConfigError("evaluation corpus of " + std::to_string(ids.size()) + " tokens is too small for " +
                      std::to_string(lanes) + " lanes");
  }
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= c.vocab_size) {
      throw ConfigError("token id " + std::to_string(ids[i]) + " at position " + std::to_string(i) +
                        " is outside the model vocabulary of " + std::to_string(c.vocab_size));
    }
  }
  const std::size_t lane_len = ids.size() / lanes;
  const std::size_t predicted = lane_len - 1;  // per lane
  MemoryState mem = MemoryState::empty(model.spec().size(), lanes, c.d_model);

  long double total = 0;
  std::size_t count = 0;
  std::vector<std::int32_t> inputs, targets;
  for (std::size_t start = 0; start < predicted; start += ec.tgt_len) {
    const std::size_t t_len = std::min(ec.tgt_len, predicted - start);
    inputs.clear();
    targets.clear();
    for (std::size_t b = 0; b < lanes; ++b) {
      const std::int32_t* base = ids.data() + b * lane_len + start;
      inputs.insert(inputs.end(), base, base + t_len);
      targets.insert(targets.end(), base + 1, base + t_len + 1);
    }
    Graph g;
    ForwardContext ctx{lanes, false, nullptr, nullptr, ec.clamp_len};
    SegmentOutput seg = model.forward(g, inputs, mem, ctx, false);
    Var loss = cross_entropy(seg.logits, targets);
    total += static_cast<long double>(loss.value()[0]) * static_cast<long double>(targets.size());
    count += targets.size();
    mem.update(seg.layer_inputs, ec.mem_len);
  }
  EvalReport r;
  r.mean_nll = static_cast<double>(total / static_cast<long double>(count));
  r.ppl = std::exp(r.mean_nll);
  r.bpc = r.mean_nll / std::numbers::ln2;
  r.tokens = count;
  r.tgt_len = ec.tgt_len;
  r.mem_len = ec.mem_len;
  r.clamp_len = ec.clamp_len;
  return r;
}

nlohmann::ordered_json config_to_json(const ModelConfig& c) {
  return {{"d_model", c.d_model},       {"n_head", c.n_head},     {"d_head", c.d_head},
          {"d_inner", c.d_inner},       {"tgt_len", c.tgt_len},   {"mem_len", c.mem_len},
          {"clamp_len", c.clamp_len},   {"dropout", c.dropout},   {"vocab_size", c.vocab_size},
          {"n_layers", c.n_layers},     {"layer_norm_eps", c.layer_norm_eps}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.d_model = j.at("d_model").get<std::size_t>();
    c.n_head = j.at("n_head").get<std::size_t>();
    c.d_head = j.at("d_head").get<std::size_t>();
    c.d_inner = j.at("d_inner").get<std::size_t>();
    c.tgt_len = j.at("tgt_len").get<std::size_t>();
    c.mem_len = j.at("mem_len").get<std::size_t>();
    c.clamp_len = j.at("clamp_len").get<std::size_t>();
    c.dropout = j.at("dropout").get<double>();
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.n_layers = j.at("n_layers").get<std::size_t>();
    c.layer_norm_eps = j.at("layer_norm_eps").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

std::string layer_string(const ArchSpec& spec) {
  std::string s;
  for (BlockKind k : spec.blocks()) s += block_code(k);
  return s;
}

ArchSpec parse_layer_string(std::string_view codes) {
  std::vector<BlockKind> blocks;
  for (std::size_t i = 0; i < codes.size(); ++i) {
    switch (codes[i]) {
      case 's': blocks.push_back(BlockKind::SelfAttention); break;
      case 'f': blocks.push_back(BlockKind::FeedForward); break;
      case 'i': blocks.push_back(BlockKind::Identity); break;
      default: throw ParseError(i, std::string("layer code '") + codes[i] + "' is not one of s, f, i");
    }
  }
  return ArchSpec(std::move(blocks));
}

namespace {

constexpr char kMagic[8] = {'P', 'A', 'R', 'C', 'K', 'P', 'T', '\0'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

class Reader {
 public:
  explicit Reader(std::istream& in) : in_(in) {}

  void bytes(void* dst, std::size_t n) {
    in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) throw ConfigError("checkpoint is truncated");
  }
  std::uint32_t u32() {
    unsigned char b[4];
    bytes(b, 4);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
    return v;
  }
  std::uint64_t u64() {
    unsigned char b[8];
    bytes(b, 8);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
    return v;
  }
  std::string str(std::size_t n, std::size_t limit) {
    if (n > limit) throw ConfigError("checkpoint field length " + std::to_string(n) + " exceeds limit");
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }

 private:
  std::istream& in_;
};

}  // namespace

void save_checkpoint(const std::string& path, TransformerLM& model, const Vocab* vocab) {
  nlohmann::ordered_json header;
  header["schema"] = 1;
  header["config"] = config_to_json(model.config());
  header["arch"] = layer_string(model.spec());
  if (vocab) {
    nlohmann::ordered_json v;
    v["mode"] = vocab_mode_name(vocab->mode());
    if (vocab->mode() == VocabMode::Char) {
      auto bytesj = nlohmann::ordered_json::array();
      for (const std::string& t : vocab->tokens()) bytesj.push_back(static_cast<unsigned char>(t[0]));
      v["bytes"] = std::move(bytesj);
    } else {
      v["tokens"] = vocab->tokens();
    }
    header["vocab"] = std::move(v);
  }
  std::string text;
  try {
    text = header.dump();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("checkpoint header: ") + e.what());
  }

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write checkpoint '" + path + "'");
  out.write(kMagic, sizeof kMagic);
  put_u32(out, kVersion);
  put_u64(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  const std::vector<Parameter*> params = model.parameters();
  put_u64(out, params.size());
  for (const Parameter* p : params) {
    put_u32(out, static_cast<std::uint32_t>(p->name.size()));
    out.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
    put_u32(out, static_cast<std::uint32_t>(p->value.rank()));
    for (std::size_t d : p->value.shape()) put_u64(out, d);
    for (Scalar v : p->value.values()) {
      const double x = static_cast<double>(v);
      std::uint64_t bits;
      std::memcpy(&bits, &x, sizeof bits);
      put_u64(out, bits);
    }
  }
  if (!out) throw ConfigError("failed writing checkpoint '" + path + "'");
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint '" + path + "'");
  Reader r(in);
  char magic[8];
  r.bytes(magic, 8);
  if (std::memcmp(magic, kMagic, 8) != 0) throw ConfigError("'" + path + "' is not a checkpoint (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kVersion) throw ConfigError("unsupported checkpoint version " + std::to_string(version));
  const std::string text = r.str(r.u64(), std::size_t{1} << 30);
  ModelConfig config;
  ArchSpec spec;
  std::optional<Vocab> vocab;
  try {
    const nlohmann::json header = nlohmann::json::parse(text);
    config = config_from_json(header.at("config"));
    spec = parse_layer_string(header.at("arch").get<std::string>());
    if (header.contains("vocab")) {
      const auto& v = header["vocab"];
      const VocabMode mode = parse_vocab_mode(v.at("mode").get<std::string>());
      std::vector<std::string> tokens;
      if (mode == VocabMode::Char) {
        for (const auto& b : v.at("bytes")) tokens.emplace_back(1, static_cast<char>(b.get<int>()));
      } else {
        tokens = v.at("tokens").get<std::vector<std::string>>();
      }
      vocab = Vocab::from_tokens(mode, std::move(tokens));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("checkpoint header: ") + e.what());
  }

  TransformerLM model(spec, config, 0);
  std::vector<Parameter*> params = model.parameters();
  const std::uint64_t count = r.u64();
  if (count != params.size()) {
    throw ConfigError("checkpoint holds " + std::to_string(count) + " tensors, architecture needs " +
                      std::to_string(params.size()));
  }
  for (Parameter* p : params) {
    const std::string name = r.str(r.u32(), 4096);
    if (name != p->name) throw ConfigError("checkpoint tensor '" + name + "' where '" + p->name + "' was expected");
    const std::uint32_t ndim = r.u32();
    Shape shape(ndim);
    for (auto& d : shape) d = r.u64();
    if (shape != p->value.shape()) {
      throw ConfigError("checkpoint tensor '" + name + "' has shape " + shape_string(shape) + ", expected " +
                        shape_string(p->value.shape()));
    }
    for (Scalar& v : p->value.values()) {
      const std::uint64_t bits = r.u64();
      double x;
      std::memcpy(&x, &bits, sizeof x);
      v = static_cast<Scalar>(x);
    }
  }
  return {std::move(model), std::move(vocab)};
}

}  // namespace parsearch
