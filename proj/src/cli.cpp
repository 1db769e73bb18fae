#include "parsearch/cli.hpp"

#include <deque>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "parsearch/archspec.hpp"
#include "parsearch/costmodel.hpp"
#include "parsearch/data.hpp"
#include "parsearch/error.hpp"
#include "parsearch/gradcheck.hpp"
#include "parsearch/lm.hpp"
#include "parsearch/numfmt.hpp"
#include "parsearch/search.hpp"

namespace parsearch {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

// key=value lines; '#' or ';' starts a comment line. Keys are long flag
// names without the leading dashes, '_' and '-' interchangeable. Values only
// fill options the command line left unset.
void apply_config_file(CLI::App& sub, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    const auto eq = t.find('=');
    const std::string where = path + ":" + std::to_string(lineno);
    if (eq == std::string::npos) throw ConfigError(where + ": expected key=value");
    std::string key = trim(std::string_view(t).substr(0, eq));
    std::string value = trim(std::string_view(t).substr(eq + 1));
    std::replace(key.begin(), key.end(), '_', '-');
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
    if (key.empty() || key == "config") throw ConfigError(where + ": invalid key '" + key + "'");
    CLI::Option* opt = sub.get_option_no_throw("--" + key);
    if (opt == nullptr) throw ConfigError(where + ": unknown key '" + key + "' for '" + sub.get_name() + "'");
    if (opt->count() > 0) continue;
    try {
      opt->add_result(value);
      opt->run_callback();
    } catch (const CLI::Error& e) {
      throw ConfigError(where + ": bad value for '" + key + "': " + e.what());
    }
  }
}

struct ModelFlags {
  std::string preset;
  std::optional<std::size_t> d_model, n_head, d_head, d_inner, tgt_len, mem_len, clamp_len, vocab_size, layers;
  std::optional<double> dropout, layer_norm_eps;

  void add(CLI::App* app, const std::string& default_preset, bool with_lengths) {
    preset = default_preset;
    app->add_option("--preset", preset, "Model defaults: full (d_model 512, 8 heads) or desk")
        ->check(CLI::IsMember({"full", "desk"}))
        ->capture_default_str();
    app->add_option("--d-model", d_model, "Hidden size");
    app->add_option("--n-head", n_head, "Attention heads");
    app->add_option("--d-head", d_head, "Per-head size");
    app->add_option("--d-inner", d_inner, "Feed-forward hidden size");
    if (with_lengths) {
      app->add_option("--tgt-len", tgt_len, "Tokens predicted per segment");
      app->add_option("--mem-len", mem_len, "Cached tokens per layer");
    }
    app->add_option("--clamp-len", clamp_len, "Relative-bias clip distance");
    app->add_option("--dropout", dropout, "Dropout probability");
    app->add_option("--vocab-size", vocab_size, "Vocabulary size (data commands derive it from the corpus)");
    app->add_option("--layers", layers, "Number of layers L");
    app->add_option("--layer-norm-eps", layer_norm_eps, "LayerNorm epsilon");
  }

  ModelConfig resolve() const {
    ModelConfig c = preset == "desk" ? ModelConfig::desk() : ModelConfig{};
    if (d_model) c.d_model = *d_model;
    if (n_head) c.n_head = *n_head;
    if (d_head) c.d_head = *d_head;
    if (d_inner) c.d_inner = *d_inner;
    if (tgt_len) c.tgt_len = *tgt_len;
    if (mem_len) c.mem_len = *mem_len;
    if (clamp_len) c.clamp_len = *clamp_len;
    if (dropout) c.dropout = *dropout;
    if (vocab_size) c.vocab_size = *vocab_size;
    if (layers) c.n_layers = *layers;
    if (layer_norm_eps) c.layer_norm_eps = *layer_norm_eps;
    c.validate();
    return c;
  }
};

struct Corpus {
  Vocab vocab;
  std::vector<std::int32_t> ids;
};

Corpus load_corpus(const std::string& path, VocabMode mode) {
  const std::string text = read_text_file(path);
  if (text.empty()) throw ConfigError("data file '" + path + "' is empty");
  Corpus c{Vocab::build(text, mode), {}};
  c.ids = c.vocab.encode(text);
  return c;
}

void write_file(const std::string& path, const std::string& contents) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write '" + path + "'");
  out << contents;
  if (!out) throw ConfigError("failed writing '" + path + "'");
}

void require(const std::string& value, const char* flag) {
  if (value.empty()) throw ConfigError(std::string(flag) + " is required");
}

void check_threads(std::size_t threads) {
  if (threads == 0) throw ConfigError("--threads must be >= 1");
}

struct Command {
  CLI::App* app = nullptr;
  std::string config_path;
  std::function<int()> run;
};

// ---- search ---------------------------------------------------------------

struct SearchFlags {
  ModelFlags model;
  std::string data, vocab_mode = "char", report = "search_report.json", history = "theta_history.csv";
  std::size_t steps = 2000, threads = 1, log_every = 0;
  std::optional<std::size_t> warmup, epoch_steps, batch;
  std::size_t snapshot_every = 1;
  double arch_fraction = 0.2;
  std::optional<double> weight_lr, arch_lr, weight_wd, arch_wd, clip_norm, tau_start, tau_end;
  std::optional<std::string> optimizer;
  std::string shards = "disjoint", placement = "trailing";
  std::uint64_t seed = 0;
};

int cmd_search(const SearchFlags& f, std::ostream& out, std::ostream& err) {
  require(f.data, "--data");
  check_threads(f.threads);
  const Corpus corpus = load_corpus(f.data, parse_vocab_mode(f.vocab_mode));
  ModelConfig config = f.model.resolve();
  config.vocab_size = corpus.vocab.size();

  SearchSchedule schedule = SearchSchedule::scaled(f.steps);
  if (f.warmup) schedule.warmup_steps = *f.warmup;
  schedule.arch_fraction = f.arch_fraction;
  schedule.snapshot_every = f.snapshot_every;
  if (f.epoch_steps) schedule.epoch_steps = *f.epoch_steps;
  schedule.placement = f.placement == "leading" ? ArchPlacement::Leading : ArchPlacement::Trailing;

  SearchHyperparams hyper = f.model.preset == "desk" ? SearchHyperparams::desk() : SearchHyperparams{};
  if (f.batch) hyper.batch_size = *f.batch;
  if (f.weight_lr) hyper.weight_lr = *f.weight_lr;
  if (f.arch_lr) hyper.arch_lr = *f.arch_lr;
  if (f.weight_wd) hyper.weight_weight_decay = *f.weight_wd;
  if (f.arch_wd) hyper.arch_weight_decay = *f.arch_wd;
  if (f.clip_norm) hyper.clip_norm = *f.clip_norm;
  if (f.optimizer) hyper.weight_optimizer = hyper.arch_optimizer = parse_optimizer_kind(*f.optimizer);
  hyper.shards = f.shards == "shared" ? ShardPolicy::Shared : ShardPolicy::Disjoint;

  GumbelConfig gumbel;
  if (f.tau_start) gumbel.tau_start = *f.tau_start;
  if (f.tau_end) gumbel.tau_end = *f.tau_end;

  SearchObserver observer;
  if (f.log_every > 0) {
    observer = [&](const StepRecord& r, SearchState&) {
      if (r.step % f.log_every == 0) {
        err << "step " << r.step << " " << phase_name(r.phase) << " loss=" << format_double(r.loss)
            << " tau=" << format_double(r.tau) << "\n";
      }
    };
  }
  const SearchResult result = run_search(corpus.ids, config, schedule, hyper, gumbel, f.seed, observer);
  write_file(f.report, search_report_json(result));
  write_file(f.history, theta_history_csv(result));
  const ArchSpec kept = compact(result.final_spec);
  err << "layers " << layer_string(result.final_spec) << (result.converged ? " (converged)" : " (not converged)")
      << " after " << result.steps_run << " steps\n";
  out << (kept.empty() ? std::string() : format_arch(kept)) << "\n";
  return kExitOk;
}

// ---- cost and scaling -----------------------------------------------------

struct CostFlags {
  ModelFlags model;
  std::vector<std::string> archs;
  std::size_t tgt_len = 64, mem_len = 640, batch = 1;
  std::string format = "csv", out_path, position = "relative_xl", softmax = "excluded";
  bool cached_kv = false;
};

CostOptions cost_options(const std::string& position, const std::string& softmax, bool cached_kv) {
  CostOptions o;
  o.position = parse_position_scheme(position);
  o.softmax = parse_softmax_counting(softmax);
  o.cached_kv = cached_kv;
  return o;
}

void emit(const std::string& text, const std::string& path, std::ostream& out) {
  if (path.empty()) {
    out << text;
  } else {
    write_file(path, text);
  }
}

int cmd_cost(const CostFlags& f, std::ostream& out) {
  if (f.archs.empty()) throw ConfigError("--arch is required");
  const ModelConfig config = f.model.resolve();
  const CostQuery query{f.tgt_len, f.mem_len, f.batch};
  query.validate();
  const CostOptions options = cost_options(f.position, f.softmax, f.cached_kv);
  std::vector<ArchSpec> specs;
  for (const std::string& a : f.archs) specs.push_back(parse_arch(a));
  const bool single = specs.size() == 1;
  if (single) specs.push_back(specs.front());
  std::vector<ComparisonRow> rows = compare_archs(specs, config, query, options);
  if (single) rows.resize(1);
  emit(f.format == "json" ? comparison_json(rows, config, query, options) : comparison_csv(rows), f.out_path, out);
  return kExitOk;
}

struct ScalingFlags {
  ModelFlags model;
  std::string kind = "attention", format = "json", position = "learned_bias";
  std::vector<std::size_t> lengths{256, 512, 1024, 2048, 4096};
};

BlockKind parse_kind(const std::string& s) {
  if (s == "attention" || s == "s") return BlockKind::SelfAttention;
  if (s == "ff" || s == "feed_forward" || s == "f") return BlockKind::FeedForward;
  if (s == "identity" || s == "i") return BlockKind::Identity;
  throw ConfigError("block kind must be attention, ff or identity, got '" + s + "'");
}

int cmd_scaling(const ScalingFlags& f, std::ostream& out) {
  const ModelConfig config = f.model.resolve();
  CostOptions options;
  options.position = parse_position_scheme(f.position);
  const ScalingReport r = scaling_report(parse_kind(f.kind), config, f.lengths, options);
  if (f.format == "csv") {
    out << "length,mem_len,flops\n";
    for (const ScalingRow& row : r.rows) out << row.length << ',' << row.mem_len << ',' << row.flops << '\n';
    return kExitOk;
  }
  nlohmann::ordered_json j;
  j["schema"] = 1;
  j["kind"] = block_name(r.kind);
  j["position"] = position_scheme_name(options.position);
  auto rows = nlohmann::ordered_json::array();
  for (const ScalingRow& row : r.rows) rows.push_back({{"length", row.length}, {"mem_len", row.mem_len}, {"flops", row.flops}});
  j["rows"] = std::move(rows);
  j["exponent"] = r.exponent ? nlohmann::ordered_json(*r.exponent) : nlohmann::ordered_json(nullptr);
  out << j.dump(2) << "\n";
  return kExitOk;
}

// ---- train and eval -------------------------------------------------------

struct TrainFlags {
  ModelFlags model;
  std::string data, arch, checkpoint, loss_csv, vocab_mode = "char";
  std::size_t steps = 1000, threads = 1, log_every = 0;
  std::optional<std::size_t> batch;
  std::optional<double> lr, weight_decay, clip_norm, lr_floor;
  std::optional<std::string> optimizer;
  bool no_cosine = false;
  std::uint64_t seed = 0;
};

int cmd_train(const TrainFlags& f, std::ostream& out, std::ostream& err) {
  require(f.data, "--data");
  require(f.arch, "--arch");
  require(f.checkpoint, "--checkpoint");
  check_threads(f.threads);
  const ArchSpec spec = parse_arch(f.arch);
  const Corpus corpus = load_corpus(f.data, parse_vocab_mode(f.vocab_mode));
  ModelConfig config = f.model.resolve();
  config.vocab_size = corpus.vocab.size();

  TrainConfig train = f.model.preset == "desk" ? TrainConfig::desk() : TrainConfig{};
  if (f.batch) train.batch_size = *f.batch;
  if (f.lr) train.optimizer.lr = *f.lr;
  if (f.weight_decay) train.optimizer.weight_decay = *f.weight_decay;
  if (f.clip_norm) train.optimizer.clip_norm = *f.clip_norm;
  if (f.lr_floor) train.lr_floor = *f.lr_floor;
  if (f.optimizer) train.optimizer.kind = parse_optimizer_kind(*f.optimizer);
  train.cosine_schedule = !f.no_cosine;

  TrainObserver observer;
  if (f.log_every > 0) {
    observer = [&](std::size_t step, double loss) {
      if (step % f.log_every == 0) err << "step " << step << " loss=" << format_double(loss) << "\n";
    };
  }
  TrainResult result = train_fixed(spec, corpus.ids, config, train, f.steps, f.seed, observer);
  save_checkpoint(f.checkpoint, result.model, &corpus.vocab);
  if (!f.loss_csv.empty()) {
    std::ostringstream csv;
    csv << "step,loss\n";
    for (std::size_t i = 0; i < result.loss_curve.size(); ++i) csv << i << ',' << format_double(result.loss_curve[i]) << '\n';
    write_file(f.loss_csv, csv.str());
  }
  nlohmann::ordered_json j;
  j["schema"] = 1;
  j["arch"] = format_arch(spec);
  j["params"] = result.model.parameter_count();
  j["steps"] = f.steps;
  j["final_loss"] = result.loss_curve.empty() ? nlohmann::ordered_json(nullptr)
                                              : nlohmann::ordered_json(result.loss_curve.back());
  j["checkpoint"] = f.checkpoint;
  out << j.dump(2) << "\n";
  return kExitOk;
}

struct EvalFlags {
  std::string data, checkpoint;
  std::optional<std::size_t> tgt_len, mem_len, clamp_len;
  std::size_t batch = 1, threads = 1;
};

int cmd_eval(const EvalFlags& f, std::ostream& out) {
  require(f.checkpoint, "--checkpoint");
  require(f.data, "--data");
  check_threads(f.threads);
  LoadedCheckpoint ck = load_checkpoint(f.checkpoint);
  if (!ck.vocab) throw ConfigError("checkpoint '" + f.checkpoint + "' carries no vocabulary");
  const std::string text = read_text_file(f.data);
  if (text.empty()) throw ConfigError("data file '" + f.data + "' is empty");
  const std::vector<std::int32_t> ids = ck.vocab->encode(text);
  const ModelConfig& c = ck.model.config();
  EvalConfig ec{f.tgt_len.value_or(c.tgt_len), f.mem_len.value_or(c.mem_len), f.clamp_len.value_or(c.clamp_len),
                f.batch};
  const EvalReport r = evaluate(ck.model, ids, ec);
  nlohmann::ordered_json j;
  j["schema"] = 1;
  j["arch"] = format_arch(compact(ck.model.spec()));
  j["mean_nll"] = r.mean_nll;
  j["ppl"] = r.ppl;
  j["bpc"] = r.bpc;
  j["tokens"] = r.tokens;
  j["tgt_len"] = r.tgt_len;
  j["mem_len"] = r.mem_len;
  j["clamp_len"] = r.clamp_len;
  out << j.dump(2) << "\n";
  return kExitOk;
}

// ---- arch, gradcheck, synth -----------------------------------------------

int cmd_arch_parse(const std::string& text, std::ostream& out) {
  out << layer_string(parse_arch(text)) << "\n";
  return kExitOk;
}

int cmd_arch_format(const std::string& text, std::ostream& out) {
  // Accepts layer codes ("sfsf") or any parsable arch string.
  const bool codes = !text.empty() && text.find_first_not_of("sfi") == std::string::npos;
  const ArchSpec spec = codes ? parse_layer_string(text) : parse_arch(text);
  out << format_arch(spec) << "\n";
  return kExitOk;
}

int cmd_arch_count(const std::string& text, std::ostream& out) {
  const BlockCounts c = count_blocks(parse_arch(text));
  out << "attn=" << c.n_attention << " ff=" << c.n_ff << " total=" << c.total() << "\n";
  return kExitOk;
}

struct GradcheckFlags {
  bool all = false;
  std::string op;
  std::size_t seeds = 100;
  double eps = kGradcheckEps;
};

int cmd_gradcheck(const GradcheckFlags& f, std::ostream& out) {
  if (!f.all && f.op.empty()) throw ConfigError("gradcheck needs --all or --op NAME");
  if (f.seeds == 0) throw ConfigError("--seeds must be >= 1");
  if (!(f.eps >= 1e-7 && f.eps <= 1e-3)) throw ConfigError("--eps must lie in [1e-7, 1e-3]");
  bool ok = true;
  std::size_t shown = 0;
  for (const GradcheckSummary& s : run_gradcheck_suite(f.seeds, f.eps)) {
    if (!f.all && s.name.find(f.op) == std::string::npos) continue;
    const bool pass = s.max_error < kGradcheckTolerance;
    ok = ok && pass;
    ++shown;
    out << s.name << " max_rel_err=" << format_double(s.max_error) << " cases=" << s.cases << " "
        << (pass ? "PASS" : "FAIL") << "\n";
  }
  if (shown == 0) throw ConfigError("no gradcheck case matches '" + f.op + "'");
  return ok ? kExitOk : kExitFailure;
}

struct SynthFlags {
  std::size_t length = 200000, vocab = 32, gap = 8;
  double copy_prob = 0.9;
  std::uint64_t seed = 0;
  std::string out_path;
};

int cmd_synth(const SynthFlags& f, std::ostream& out) {
  if (f.vocab == 0 || f.vocab > kSynthAlphabet.size()) {
    throw ConfigError("--vocab must be in [1, " + std::to_string(kSynthAlphabet.size()) + "]");
  }
  if (f.gap < 2) throw ConfigError("--gap must be >= 2");
  const std::vector<std::int32_t> ids = synth_induction(f.length, f.vocab, f.gap, f.seed, f.copy_prob);
  std::string text(ids.size(), ' ');
  for (std::size_t i = 0; i < ids.size(); ++i) text[i] = kSynthAlphabet[static_cast<std::size_t>(ids[i])];
  emit(text, f.out_path, out);
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Differentiable search over transformer block layouts, with cost model and desk-scale LM"};
  app.require_subcommand(1);
  std::deque<Command> commands;  // options bind into elements, so they must not move
  auto add_command = [&](const char* name, const char* help) -> Command& {
    Command& c = commands.emplace_back();
    c.app = app.add_subcommand(name, help);
    c.app->add_option("--config", c.config_path, "key=value file; explicit flags take precedence");
    return c;
  };

  SearchFlags search;
  {
    Command& c = add_command("search", "Run the two-stage supernet search on a text corpus");
    CLI::App* s = c.app;
    search.model.add(s, "desk", true);
    s->add_option("--data", search.data, "UTF-8 text corpus");
    s->add_option("--vocab-mode", search.vocab_mode)->check(CLI::IsMember({"char", "word"}))->capture_default_str();
    s->add_option("--steps", search.steps, "Total search steps")->capture_default_str();
    s->add_option("--warmup", search.warmup, "Warmup steps (default: a quarter of --steps)");
    s->add_option("--arch-fraction", search.arch_fraction, "Fraction of each epoch spent on theta")->capture_default_str();
    s->add_option("--epoch-steps", search.epoch_steps, "Steps per epoch (default: from shard sizes)");
    s->add_option("--snapshot-every", search.snapshot_every, "Arch steps per snapshot")->capture_default_str();
    s->add_option("--arch-placement", search.placement)->check(CLI::IsMember({"trailing", "leading"}))->capture_default_str();
    s->add_option("--shards", search.shards)->check(CLI::IsMember({"disjoint", "shared"}))->capture_default_str();
    s->add_option("--batch", search.batch, "Batch size (lanes)");
    s->add_option("--weight-lr", search.weight_lr);
    s->add_option("--arch-lr", search.arch_lr);
    s->add_option("--weight-wd", search.weight_wd);
    s->add_option("--arch-wd", search.arch_wd);
    s->add_option("--clip-norm", search.clip_norm);
    s->add_option("--optimizer", search.optimizer)->check(CLI::IsMember({"sgd", "adam"}));
    s->add_option("--tau-start", search.tau_start);
    s->add_option("--tau-end", search.tau_end);
    s->add_option("--report", search.report, "Search report JSON path")->capture_default_str();
    s->add_option("--history", search.history, "Theta history CSV path")->capture_default_str();
    s->add_option("--seed", search.seed)->capture_default_str();
    s->add_option("--threads", search.threads)->capture_default_str();
    s->add_option("--log-every", search.log_every, "Progress line to stderr every N steps");
    c.run = [&] { return cmd_search(search, out, err); };
  }

  CostFlags cost;
  {
    Command& c = add_command("cost", "Parameter and FLOP counts for architecture strings");
    CLI::App* s = c.app;
    cost.model.add(s, "full", false);
    s->add_option("--arch", cost.archs, "Architecture string; repeat to compare (first is the baseline)");
    s->add_option("--tgt-len", cost.tgt_len)->capture_default_str();
    s->add_option("--mem-len", cost.mem_len)->capture_default_str();
    s->add_option("--batch", cost.batch)->capture_default_str();
    s->add_option("--format", cost.format)->check(CLI::IsMember({"csv", "json"}))->capture_default_str();
    s->add_option("--out", cost.out_path, "Write to a file instead of stdout");
    s->add_option("--position", cost.position)->check(CLI::IsMember({"relative_xl", "learned_bias"}))->capture_default_str();
    s->add_option("--softmax", cost.softmax)->check(CLI::IsMember({"excluded", "full"}))->capture_default_str();
    s->add_flag("--cached-kv", cost.cached_kv, "Memory keys/values come from a cache");
    c.run = [&] { return cmd_cost(cost, out); };
  }

  ScalingFlags scaling;
  {
    Command& c = add_command("scaling", "Block FLOPs versus sequence length with a fitted exponent");
    CLI::App* s = c.app;
    scaling.model.add(s, "desk", true);
    s->add_option("--kind", scaling.kind)->capture_default_str();
    s->add_option("--lengths", scaling.lengths)->delimiter(',');
    s->add_option("--format", scaling.format)->check(CLI::IsMember({"csv", "json"}))->capture_default_str();
    s->add_option("--position", scaling.position)->check(CLI::IsMember({"relative_xl", "learned_bias"}))->capture_default_str();
    c.run = [&] { return cmd_scaling(scaling, out); };
  }

  TrainFlags train;
  {
    Command& c = add_command("train", "Train a fixed architecture and write a checkpoint");
    CLI::App* s = c.app;
    train.model.add(s, "desk", true);
    s->add_option("--data", train.data);
    s->add_option("--arch", train.arch);
    s->add_option("--checkpoint", train.checkpoint, "Output checkpoint path");
    s->add_option("--loss-csv", train.loss_csv, "Optional per-step loss CSV");
    s->add_option("--vocab-mode", train.vocab_mode)->check(CLI::IsMember({"char", "word"}))->capture_default_str();
    s->add_option("--steps", train.steps)->capture_default_str();
    s->add_option("--batch", train.batch);
    s->add_option("--lr", train.lr);
    s->add_option("--weight-decay", train.weight_decay);
    s->add_option("--clip-norm", train.clip_norm);
    s->add_option("--lr-floor", train.lr_floor);
    s->add_option("--optimizer", train.optimizer)->check(CLI::IsMember({"sgd", "adam"}));
    s->add_flag("--no-cosine", train.no_cosine, "Constant learning rate");
    s->add_option("--seed", train.seed)->capture_default_str();
    s->add_option("--threads", train.threads)->capture_default_str();
    s->add_option("--log-every", train.log_every);
    c.run = [&] { return cmd_train(train, out, err); };
  }

  EvalFlags eval;
  {
    Command& c = add_command("eval", "Evaluate a checkpoint on a text corpus");
    CLI::App* s = c.app;
    s->add_option("--checkpoint", eval.checkpoint);
    s->add_option("--data", eval.data);
    s->add_option("--tgt-len", eval.tgt_len);
    s->add_option("--mem-len", eval.mem_len);
    s->add_option("--clamp-len", eval.clamp_len);
    s->add_option("--batch", eval.batch)->capture_default_str();
    s->add_option("--threads", eval.threads)->capture_default_str();
    c.run = [&] { return cmd_eval(eval, out); };
  }

  std::string arch_text;
  {
    Command& c = add_command("arch", "Architecture-string utilities");
    c.app->require_subcommand(1);
    auto verb = [&](const char* name, const char* help, int (*fn)(const std::string&, std::ostream&)) {
      CLI::App* v = c.app->add_subcommand(name, help);
      v->add_option("text", arch_text)->required();
      v->callback([&c, &arch_text, &out, fn] { c.run = [&arch_text, &out, fn] { return fn(arch_text, out); }; });
    };
    verb("parse", "Expand to layer codes", cmd_arch_parse);
    verb("format", "Canonical string for layer codes or an arch string", cmd_arch_format);
    verb("count", "Count attention and feed-forward blocks", cmd_arch_count);
  }

  GradcheckFlags gradcheck;
  {
    Command& c = add_command("gradcheck", "Finite-difference checks of every differentiable op");
    CLI::App* s = c.app;
    s->add_flag("--all", gradcheck.all, "Run every case");
    s->add_option("--op", gradcheck.op, "Only cases whose name contains this");
    s->add_option("--seeds", gradcheck.seeds)->capture_default_str();
    s->add_option("--eps", gradcheck.eps)->capture_default_str();
    c.run = [&] { return cmd_gradcheck(gradcheck, out); };
  }

  SynthFlags synth;
  {
    Command& c = add_command("synth", "Write a synthetic induction corpus as text");
    CLI::App* s = c.app;
    s->add_option("--length", synth.length)->capture_default_str();
    s->add_option("--vocab", synth.vocab)->capture_default_str();
    s->add_option("--gap", synth.gap)->capture_default_str();
    s->add_option("--copy-prob", synth.copy_prob)->capture_default_str();
    s->add_option("--seed", synth.seed)->capture_default_str();
    s->add_option("--out", synth.out_path);
    c.run = [&] { return cmd_synth(synth, out); };
  }

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  }

  try {
    for (Command& c : commands) {
      if (!c.app->parsed()) continue;
      if (!c.config_path.empty()) {
        CLI::App* target = c.app;
        for (CLI::App* sub : c.app->get_subcommands()) target = sub;
        apply_config_file(*target, c.config_path);
      }
      if (!c.run) throw ConfigError("no action selected");
      return c.run();
    }
    throw ConfigError("no subcommand given");
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ParseError& e) {
    err << e.what() << "\n";
    return kExitConfig;
  } catch (const ContractError& e) {
    err << "invalid input: " << e.what() << "\n";
    return kExitConfig;
  } catch (const IndexError& e) {
    err << "invalid input: " << e.what() << "\n";
    return kExitConfig;
  } catch (const TrainingAbort& e) {
    err << "aborted: " << e.what() << "\n";
    return kExitRuntime;
  } catch (const std::exception& e) {
    err << "runtime error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

}  // namespace parsearch
