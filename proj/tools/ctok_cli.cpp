// Command-line pipeline: gen-corpus -> build-vocab -> embed -> cluster ->
// pretrain -> eval, plus the flops calculator. One JSON config drives every
// stage; --override key=value wins over the file.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <string>

#include "ctok/clustering.hpp"
#include "ctok/corpus.hpp"
#include "ctok/costs.hpp"
#include "ctok/embedding.hpp"
#include "ctok/feedback.hpp"
#include "ctok/model.hpp"
#include "ctok/objectives.hpp"
#include "ctok/synthetic.hpp"
#include "ctok/trainer.hpp"

using json = nlohmann::json;
using namespace ctok;

namespace {

constexpr int kExitConfig = 1;
constexpr int kExitMissingArtifact = 2;
constexpr int kExitDiverged = 3;

struct MissingArtifact : std::runtime_error {
  std::string stage;
  MissingArtifact(std::string stage_, const std::string& path)
      : std::runtime_error("missing " + stage_ + " artifact: " + path), stage(std::move(stage_)) {}
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

const std::map<std::string, std::set<std::string>> kSchema = {
    {"", {"seed", "workers", "paths", "vocab", "embedding", "clustering", "objective", "model",
          "train", "costs", "gen"}},
    {"paths", {"corpus", "vocab", "embeddings", "clustering", "feedback", "checkpoint",
               "metrics"}},
    {"vocab", {"max_size", "min_freq"}},
    {"embedding", {"dim", "window", "epochs", "lr", "negatives"}},
    {"clustering", {"n", "restarts", "max_iter", "tol"}},
    {"objective",
     {"kind", "selection_rate", "gamma", "mlm_bert_split", "hardness_orientation"}},
    {"model", {"layers", "hidden", "heads", "ffn", "vocab", "max_len", "dropout"}},
    {"train", {"steps", "batch_size", "peak_lr", "warmup_steps", "weight_decay", "eval_every",
               "feedback_update_every", "checkpoint_every"}},
    {"costs", {"objective", "batch_size", "steps", "lm_head_position_fraction"}},
    {"gen", {"sentences", "topics", "tokens_per_topic", "min_len", "max_len", "zipf_exponent",
             "topic_purity", "out"}},
};

void validate_keys(const json& node, const std::string& section) {
  if (!node.is_object()) throw ConfigError("config section is not an object: " + section);
  const auto it = kSchema.find(section);
  for (const auto& [key, value] : node.items()) {
    if (it->second.find(key) == it->second.end())
      throw ConfigError("unknown config key: " +
                        (section.empty() ? key : section + "." + key));
    if (section.empty() && kSchema.count(key)) validate_keys(value, key);
  }
}

json load_config(const std::string& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw MissingArtifact("config", path);
  json cfg;
  try {
    cfg = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config does not parse: ") + e.what());
  }
  for (const auto& ov : overrides) {
    const size_t eq = ov.find('=');
    if (eq == std::string::npos) throw ConfigError("override is not key=value: " + ov);
    const std::string key = ov.substr(0, eq);
    const std::string raw = ov.substr(eq + 1);
    json value;
    try {
      value = json::parse(raw);
    } catch (const json::exception&) {
      value = raw;  // bare strings are fine
    }
    json* node = &cfg;
    size_t pos = 0;
    for (;;) {
      const size_t dot = key.find('.', pos);
      const std::string part = key.substr(pos, dot - pos);
      if (part.empty()) throw ConfigError("override has an empty key segment: " + ov);
      if (dot == std::string::npos) {
        (*node)[part] = value;
        break;
      }
      node = &(*node)[part];
      pos = dot + 1;
    }
  }
  validate_keys(cfg, "");
  return cfg;
}

template <typename T>
T get_or(const json& cfg, const std::string& section, const std::string& key, T fallback) {
  if (!cfg.contains(section) || !cfg[section].contains(key)) return fallback;
  try {
    return cfg[section][key].get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("config value " + section + "." + key + ": " + e.what());
  }
}

std::string require_path(const json& cfg, const std::string& key, const std::string& stage) {
  if (!cfg.contains("paths") || !cfg["paths"].contains(key))
    throw ConfigError("paths." + key + " is required for this command");
  const std::string path = cfg["paths"][key].get<std::string>();
  if (!std::filesystem::exists(path)) throw MissingArtifact(stage, path);
  return path;
}

std::string output_path(const json& cfg, const std::string& key) {
  if (!cfg.contains("paths") || !cfg["paths"].contains(key))
    throw ConfigError("paths." + key + " is required for this command");
  const std::string path = cfg["paths"][key].get<std::string>();
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  return path;
}

std::vector<std::string> corpus_paths(const json& cfg) {
  if (!cfg.contains("paths") || !cfg["paths"].contains("corpus"))
    throw ConfigError("paths.corpus is required for this command");
  std::vector<std::string> paths;
  const json& node = cfg["paths"]["corpus"];
  if (node.is_string()) paths.push_back(node.get<std::string>());
  else if (node.is_array())
    for (const auto& p : node) paths.push_back(p.get<std::string>());
  else throw ConfigError("paths.corpus must be a string or array of strings");
  for (const auto& p : paths)
    if (!std::filesystem::exists(p)) throw MissingArtifact("corpus", p);
  return paths;
}

CorruptionConfig objective_config(const json& cfg) {
  CorruptionConfig oc;
  oc.kind = objective_from_name(get_or<std::string>(cfg, "objective", "kind", "mlm"));
  oc.selection_rate = get_or<double>(cfg, "objective", "selection_rate", 0.15);
  oc.gamma = get_or<double>(cfg, "objective", "gamma", 2.0);
  oc.mlm_bert_split = get_or<bool>(cfg, "objective", "mlm_bert_split", false);
  const std::string orient =
      get_or<std::string>(cfg, "objective", "hardness_orientation", "complement");
  if (orient == "complement") oc.orientation = HardnessOrientation::kComplement;
  else if (orient == "direct") oc.orientation = HardnessOrientation::kDirect;
  else throw ConfigError("objective.hardness_orientation must be complement or direct");
  return oc;
}

ModelConfig model_config(const json& cfg, int vocab_size) {
  ModelConfig mc;
  mc.layers = get_or<int>(cfg, "model", "layers", 2);
  mc.hidden = get_or<int>(cfg, "model", "hidden", 64);
  mc.heads = get_or<int>(cfg, "model", "heads", 4);
  mc.ffn = get_or<int>(cfg, "model", "ffn", 256);
  mc.vocab = vocab_size > 0 ? vocab_size : get_or<int>(cfg, "model", "vocab", 2000);
  mc.max_len = get_or<int>(cfg, "model", "max_len", 64);
  mc.dropout = get_or<double>(cfg, "model", "dropout", 0.1);
  return mc;
}

TrainConfig train_config(const json& cfg, int vocab_size) {
  TrainConfig tc;
  tc.objective = objective_config(cfg);
  tc.model = model_config(cfg, vocab_size);
  tc.steps = get_or<int64_t>(cfg, "train", "steps", 2000);
  tc.batch_size = get_or<int>(cfg, "train", "batch_size", 32);
  tc.peak_lr = get_or<double>(cfg, "train", "peak_lr", 1e-4);
  tc.warmup_steps = get_or<int64_t>(cfg, "train", "warmup_steps", 100);
  tc.weight_decay = get_or<double>(cfg, "train", "weight_decay", 0.01);
  tc.eval_every = get_or<int64_t>(cfg, "train", "eval_every", 100);
  tc.feedback_update_every = get_or<int64_t>(cfg, "train", "feedback_update_every", 1);
  tc.checkpoint_every = get_or<int64_t>(cfg, "train", "checkpoint_every", 0);
  tc.seed = cfg.value("seed", uint64_t{1});
  tc.workers = cfg.value("workers", 1);
  return tc;
}

int cmd_gen_corpus(const json& cfg) {
  SyntheticSpec spec;
  spec.sentences = get_or<int>(cfg, "gen", "sentences", spec.sentences);
  spec.topics = get_or<int>(cfg, "gen", "topics", spec.topics);
  spec.tokens_per_topic = get_or<int>(cfg, "gen", "tokens_per_topic", spec.tokens_per_topic);
  spec.min_len = get_or<int>(cfg, "gen", "min_len", spec.min_len);
  spec.max_len = get_or<int>(cfg, "gen", "max_len", spec.max_len);
  spec.zipf_exponent = get_or<double>(cfg, "gen", "zipf_exponent", spec.zipf_exponent);
  spec.topic_purity = get_or<double>(cfg, "gen", "topic_purity", spec.topic_purity);
  spec.seed = cfg.value("seed", uint64_t{1});
  const std::string out = get_or<std::string>(cfg, "gen", "out", "");
  if (out.empty()) throw ConfigError("gen.out is required for gen-corpus");
  const auto parent = std::filesystem::path(out).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  const auto lines = generate_synthetic_corpus(spec);
  write_corpus(lines, out);
  std::cout << "{\"sentences\":" << lines.size() << ",\"out\":\"" << out << "\"}" << std::endl;
  return 0;
}

int cmd_build_vocab(const json& cfg) {
  const auto corpus = corpus_paths(cfg);
  const std::string out = output_path(cfg, "vocab");
  IngestStats stats;
  const Vocabulary vocab =
      build_vocab_from_files(corpus, get_or<int>(cfg, "vocab", "max_size", 2000),
                             get_or<int>(cfg, "vocab", "min_freq", 1), &stats);
  vocab.save(out);
  std::cout << "{\"vocab_size\":" << vocab.size() << ",\"out\":\"" << out << "\"}" << std::endl;
  if (stats.invalid_utf8 > 0)
    std::cerr << "warning: skipped " << stats.invalid_utf8 << " invalid utf-8 lines\n";
  return 0;
}

int cmd_embed(const json& cfg) {
  const Vocabulary vocab = Vocabulary::load(require_path(cfg, "vocab", "vocab"));
  const auto corpus_files = corpus_paths(cfg);
  const int max_len = get_or<int>(cfg, "model", "max_len", 64);
  const auto corpus = ingest_corpus(corpus_files, vocab, max_len);

  Word2VecConfig wc;
  wc.dim = get_or<int>(cfg, "embedding", "dim", 300);
  wc.window = get_or<int>(cfg, "embedding", "window", 2);
  wc.epochs = get_or<int>(cfg, "embedding", "epochs", 5);
  wc.lr = get_or<double>(cfg, "embedding", "lr", 0.025);
  wc.negatives = get_or<int>(cfg, "embedding", "negatives", 5);
  wc.seed = cfg.value("seed", uint64_t{1});
  wc.workers = cfg.value("workers", 1);

  const std::string out = output_path(cfg, "embeddings");
  std::vector<double> losses;
  const EmbeddingTable table = train_word2vec(corpus, vocab, wc, &losses);
  table.save(out);
  std::cout << "{\"dim\":" << table.dim << ",\"epochs\":" << wc.epochs << ",\"final_loss\":"
            << (losses.empty() ? 0.0 : losses.back()) << ",\"out\":\"" << out << "\"}"
            << std::endl;
  return 0;
}

int cmd_cluster(const json& cfg) {
  const Vocabulary vocab = Vocabulary::load(require_path(cfg, "vocab", "vocab"));
  const EmbeddingTable table = EmbeddingTable::load(require_path(cfg, "embeddings", "embeddings"));

  KmeansConfig kc;
  kc.n = get_or<int>(cfg, "clustering", "n", 100);
  kc.restarts = get_or<int>(cfg, "clustering", "restarts", 20);
  kc.max_iter = get_or<int>(cfg, "clustering", "max_iter", 300);
  kc.tol = get_or<double>(cfg, "clustering", "tol", 1e-4);
  kc.seed = cfg.value("seed", uint64_t{1});
  kc.workers = cfg.value("workers", 1);

  const std::string out = output_path(cfg, "clustering");
  const KmeansResult result = kmeans(table, vocab, kc);
  result.clustering.save(out);
  std::cout << "{\"clusters\":" << result.clustering.n << ",\"inertia\":" << result.inertia
            << ",\"out\":\"" << out << "\"}" << std::endl;
  return 0;
}

int cmd_pretrain(const json& cfg, const std::string& resume) {
  const Vocabulary vocab = Vocabulary::load(require_path(cfg, "vocab", "vocab"));
  const auto corpus_files = corpus_paths(cfg);
  TrainConfig tc = train_config(cfg, vocab.size());
  const auto corpus = ingest_corpus(corpus_files, vocab, tc.model.max_len);

  Clustering clustering;
  const bool is_crts = tc.objective.kind == ObjectiveKind::kCrts;
  if (is_crts) clustering = Clustering::load(require_path(cfg, "clustering", "clustering"));

  tc.checkpoint_path = output_path(cfg, "checkpoint");
  if (cfg.contains("paths") && cfg["paths"].contains("metrics"))
    tc.metrics_path = output_path(cfg, "metrics");
  if (!resume.empty() && !std::filesystem::exists(resume))
    throw MissingArtifact("checkpoint", resume);

  const PretrainResult result =
      pretrain(corpus, vocab, is_crts ? &clustering : nullptr, nullptr, tc, resume);
  std::cout << "{\"steps\":" << tc.steps << ",\"final_heldout_loss\":"
            << result.final_heldout_loss << ",\"checkpoint\":\"" << tc.checkpoint_path << "\"}"
            << std::endl;
  return 0;
}

int cmd_eval(const json& cfg) {
  const Vocabulary vocab = Vocabulary::load(require_path(cfg, "vocab", "vocab"));
  const auto corpus_files = corpus_paths(cfg);
  const std::string ck_path = require_path(cfg, "checkpoint", "checkpoint");
  const Checkpoint ck = load_checkpoint(ck_path);
  TrainConfig tc = train_config(cfg, vocab.size());
  tc.model = ck.params.cfg;
  const auto corpus = ingest_corpus(corpus_files, vocab, tc.model.max_len);

  const bool is_crts = tc.objective.kind == ObjectiveKind::kCrts;
  Clustering clustering;
  FeedbackMatrix feedback;
  if (is_crts) {
    clustering = Clustering::load(require_path(cfg, "clustering", "clustering"));
    std::string fpath = ck_path + ".feedback";
    if (cfg.contains("paths") && cfg["paths"].contains("feedback"))
      fpath = cfg["paths"]["feedback"].get<std::string>();
    if (!std::filesystem::exists(fpath)) throw MissingArtifact("feedback", fpath);
    feedback = FeedbackMatrix::load(fpath);
  }

  // corrupt the held-out shard exactly as the trainer's evaluator does
  const auto held = heldout_indices(corpus.size());
  std::vector<CorruptedExample> examples;
  std::vector<int32_t> attn;
  Rng eval_rng = heldout_eval_rng(tc.seed);
  for (size_t i = 0; i < held.size(); ++i) {
    const TokenSequence& seq = corpus[static_cast<size_t>(held[i])];
    Rng rng = eval_rng.derive(i);
    examples.push_back(corrupt(seq, vocab, is_crts ? &clustering : nullptr,
                               is_crts ? &feedback : nullptr, tc.objective, rng));
    attn.push_back(seq.attention_len);
  }

  const bool token_head = objective_uses_token_head(tc.objective.kind);
  if ((token_head && ck.params.head != HeadKind::kToken) ||
      (!token_head && ck.params.head != HeadKind::kBinary))
    throw ConfigError("checkpoint head does not match the configured objective");

  std::string out = "{\"examples\":" + std::to_string(examples.size());
  if (token_head) {
    const double acc = evaluate_token_accuracy(ck.params, examples, attn, tc.workers);
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", acc);
    out += std::string(",\"masked_token_accuracy\":") + buf;
  } else {
    const DetectionMetrics m = evaluate_detection(ck.params, examples, attn, tc.workers);
    char buf[96];
    std::snprintf(buf, sizeof(buf),
                  ",\"detection_precision\":%.6f,\"detection_recall\":%.6f,\"detection_f1\":%.6f",
                  m.precision, m.recall, m.f1);
    out += buf;
  }
  std::cout << out << "}" << std::endl;
  return 0;
}

int cmd_flops(const json& cfg) {
  const ModelConfig mc = model_config(cfg, 0);
  const CostObjective obj =
      cost_objective_from_name(get_or<std::string>(cfg, "costs", "objective", "mlm"));
  const int64_t bs = get_or<int64_t>(cfg, "costs", "batch_size", 256);
  const int64_t steps = get_or<int64_t>(cfg, "costs", "steps", 1000000);
  CostConfig cc;
  cc.lm_head_position_fraction =
      get_or<double>(cfg, "costs", "lm_head_position_fraction", 0.15);
  const CostReport report = model_cost(mc, obj, bs, steps, cc);
  std::cout << report.to_json() << std::endl;
  if (obj == CostObjective::kCrts) std::cerr << crts_preprocessing_note() << "\n";
  return 0;
}

void emit_error(const std::string& message, const std::string& stage) {
  json err;
  err["error"] = message;
  if (!stage.empty()) err["stage"] = stage;
  std::cerr << err.dump() << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"token-corruption pre-training pipeline"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  std::string resume;
  int64_t seed_flag = -1;
  int workers_flag = -1;

  const std::vector<std::string> commands = {"gen-corpus", "build-vocab", "embed",
                                             "cluster",    "pretrain",    "eval", "flops"};
  for (const auto& name : commands) {
    auto* sub = app.add_subcommand(name);
    sub->add_option("--config", config_path, "pipeline config (json)")->required();
    sub->add_option("--override", overrides, "key=value override, dotted keys");
    sub->add_option("--seed", seed_flag, "seed override");
    sub->add_option("--workers", workers_flag, "worker count override");
    if (name == "pretrain") sub->add_option("--resume", resume, "checkpoint to resume from");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    emit_error(e.what(), "");
    return kExitConfig;
  }

  try {
    json cfg = load_config(config_path, overrides);
    if (seed_flag >= 0) cfg["seed"] = static_cast<uint64_t>(seed_flag);
    if (workers_flag >= 0) cfg["workers"] = workers_flag;

    const std::string command = app.get_subcommands().front()->get_name();
    if (command == "gen-corpus") return cmd_gen_corpus(cfg);
    if (command == "build-vocab") return cmd_build_vocab(cfg);
    if (command == "embed") return cmd_embed(cfg);
    if (command == "cluster") return cmd_cluster(cfg);
    if (command == "pretrain") return cmd_pretrain(cfg, resume);
    if (command == "eval") return cmd_eval(cfg);
    if (command == "flops") return cmd_flops(cfg);
    emit_error("unknown command", "");
    return kExitConfig;
  } catch (const MissingArtifact& e) {
    emit_error(e.what(), e.stage);
    return kExitMissingArtifact;
  } catch (const TrainingDiverged& e) {
    emit_error(e.what(), "pretrain");
    return kExitDiverged;
  } catch (const std::exception& e) {
    emit_error(e.what(), "");
    return kExitConfig;
  }
}
