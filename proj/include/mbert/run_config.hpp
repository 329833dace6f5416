#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "mbert/analysis.hpp"
#include "mbert/config_io.hpp"
#include "mbert/finetune.hpp"
#include "mbert/io.hpp"

namespace mbert {

#ifndef MBERT_VERSION
#define MBERT_VERSION "0.1.0"
#endif

inline constexpr const char* kToolVersion = MBERT_VERSION;

struct TokenizerSettings {
  std::size_t vocab_size = 4096;
  std::size_t train_docs = 4000;
};

/// Documents come from `path` (plain text or JSONL) when set, otherwise from the
/// synthetic generator. Offsets index the synthetic document stream.
struct CorpusSettings {
  SynthSpec synth{};
  std::string path;
  std::string val_path;
  std::size_t train_docs = 20'000;
  std::size_t val_docs = 200;
  std::size_t val_offset = 1'000'000;
  std::size_t heldout_offset = 2'000'000;
};

struct PpplSettings {
  std::vector<std::size_t> bin_edges{0, 64, 128, 256, 512};
  std::size_t per_bin = 100;
  std::size_t n_samples = 100;
  std::size_t max_len = 512;
  std::size_t docs = 1000;
};

struct AnalysisSettings {
  PpplSettings pppl{};
  std::size_t embed_max_len = 0;  // 0: the checkpoint's max_seq_len
  std::size_t embed_batch_size = 32;
  std::size_t sim_hist_bins = 40;
  std::size_t random_pairs = 0;  // 0: as many as positive pairs
  std::string retrieval_data;
  std::size_t retrieval_k = 10;
  bool retrieval_seeded = false;
  std::size_t jaccard_ngram = 1;
  std::size_t fill_mask_top_k = 5;
  std::size_t fill_mask_facts = 50;
  std::vector<std::size_t> length_bins{0, 64, 128, 256, 512};
  std::string fine_tune_task;
  FineTuneConfig fine_tune{};
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string work_dir = "runs/default";
  std::size_t threads = 1;
  ModelConfig model{};
  TokenizerSettings tokenizer{};
  CorpusSettings corpus{};
  TrainConfig stage1{};
  TrainConfig stage2 = default_stage2();
  AnalysisSettings analysis{};

  static TrainConfig default_stage2() {
    TrainConfig t;
    t.stage = 2;
    t.max_seq_len = 512;
    t.total_steps = 800;
    t.batch_size = 4;
    t.peak_lr = 5e-5;
    t.warmup_steps = 96;
    return t;
  }

  std::filesystem::path tokenizer_path() const { return std::filesystem::path(work_dir) / "tokenizer.bpe"; }
  std::filesystem::path checkpoint_dir() const { return std::filesystem::path(work_dir) / "checkpoints"; }
  std::filesystem::path final_checkpoint(int stage) const {
    return checkpoint_dir() / ("stage" + std::to_string(stage) + "_final.ckpt");
  }
  std::filesystem::path reports() const { return report_dir(std::filesystem::path(work_dir) / "reports"); }

  void validate() const {
    if (work_dir.empty()) throw ConfigError("work_dir must be non-empty");
    if (threads == 0) throw ConfigError("threads must be >= 1");
    model.validate();
    corpus.synth.validate();
    stage1.validate();
    stage2.validate();
    if (stage1.stage != 1) throw ConfigError("stage1.stage must be 1");
    if (stage2.stage != 2) throw ConfigError("stage2.stage must be 2");
    if (tokenizer.vocab_size != model.vocab_size) {
      throw ConfigError("tokenizer.vocab_size (" + std::to_string(tokenizer.vocab_size) + ") must equal model.vocab_size (" +
                        std::to_string(model.vocab_size) + ")");
    }
    if (tokenizer.train_docs == 0 || corpus.train_docs == 0 || corpus.val_docs == 0) {
      throw ConfigError("document counts must be positive");
    }
    LengthBins{analysis.pppl.bin_edges}.validate();
    LengthBins{analysis.length_bins}.validate();
    if (analysis.pppl.per_bin == 0 || analysis.pppl.n_samples == 0) throw ConfigError("analysis.pppl counts must be positive");
    if (analysis.sim_hist_bins == 0 || analysis.retrieval_k == 0 || analysis.jaccard_ngram == 0) {
      throw ConfigError("analysis bins, k and jaccard_ngram must be positive");
    }
  }
};

// ---------------------------------------------------------------------------------

inline Json to_json_value(const TokenizerSettings& s) { return Json{{"vocab_size", s.vocab_size}, {"train_docs", s.train_docs}}; }

inline void from_json_checked(const Json& j, TokenizerSettings& s, const std::string& where) {
  FieldReader(j, where)("vocab_size", s.vocab_size)("train_docs", s.train_docs).finish();
}

inline Json to_json_value(const CorpusSettings& s) {
  Json j;
  j["synth"] = to_json_value(s.synth);
  j["path"] = s.path;
  j["val_path"] = s.val_path;
  j["train_docs"] = s.train_docs;
  j["val_docs"] = s.val_docs;
  j["val_offset"] = s.val_offset;
  j["heldout_offset"] = s.heldout_offset;
  return j;
}

inline void from_json_checked(const Json& j, CorpusSettings& s, const std::string& where) {
  FieldReader(j, where)("synth", s.synth)("path", s.path)("val_path", s.val_path)("train_docs", s.train_docs)(
      "val_docs", s.val_docs)("val_offset", s.val_offset)("heldout_offset", s.heldout_offset)
      .finish();
}

inline Json to_json_value(const PpplSettings& s) {
  return Json{{"bin_edges", s.bin_edges}, {"per_bin", s.per_bin}, {"n_samples", s.n_samples}, {"max_len", s.max_len},
              {"docs", s.docs}};
}

inline void from_json_checked(const Json& j, PpplSettings& s, const std::string& where) {
  FieldReader(j, where)("bin_edges", s.bin_edges)("per_bin", s.per_bin)("n_samples", s.n_samples)("max_len", s.max_len)(
      "docs", s.docs)
      .finish();
}

inline Json to_json_value(const FineTuneConfig& c) {
  return Json{{"learning_rates", c.learning_rates}, {"epochs", c.epochs},       {"batch_size", c.batch_size},
              {"warmup_ratio", c.warmup_ratio},     {"grad_clip", c.grad_clip}, {"adamw", to_json_value(c.adamw)},
              {"seed", c.seed}};
}

inline void from_json_checked(const Json& j, FineTuneConfig& c, const std::string& where) {
  FieldReader(j, where)("learning_rates", c.learning_rates)("epochs", c.epochs)("batch_size", c.batch_size)(
      "warmup_ratio", c.warmup_ratio)("grad_clip", c.grad_clip)("adamw", c.adamw)("seed", c.seed)
      .finish();
}

inline Json to_json_value(const AnalysisSettings& s) {
  Json j;
  j["pppl"] = to_json_value(s.pppl);
  j["embed_max_len"] = s.embed_max_len;
  j["embed_batch_size"] = s.embed_batch_size;
  j["sim_hist_bins"] = s.sim_hist_bins;
  j["random_pairs"] = s.random_pairs;
  j["retrieval_data"] = s.retrieval_data;
  j["retrieval_k"] = s.retrieval_k;
  j["retrieval_seeded"] = s.retrieval_seeded;
  j["jaccard_ngram"] = s.jaccard_ngram;
  j["fill_mask_top_k"] = s.fill_mask_top_k;
  j["fill_mask_facts"] = s.fill_mask_facts;
  j["length_bins"] = s.length_bins;
  j["fine_tune_task"] = s.fine_tune_task;
  j["fine_tune"] = to_json_value(s.fine_tune);
  return j;
}

inline void from_json_checked(const Json& j, AnalysisSettings& s, const std::string& where) {
  FieldReader(j, where)("pppl", s.pppl)("embed_max_len", s.embed_max_len)("embed_batch_size", s.embed_batch_size)(
      "sim_hist_bins", s.sim_hist_bins)("random_pairs", s.random_pairs)("retrieval_data", s.retrieval_data)(
      "retrieval_k", s.retrieval_k)("retrieval_seeded", s.retrieval_seeded)(
      "jaccard_ngram", s.jaccard_ngram)("fill_mask_top_k", s.fill_mask_top_k)(
      "fill_mask_facts", s.fill_mask_facts)("length_bins", s.length_bins)("fine_tune_task", s.fine_tune_task)(
      "fine_tune", s.fine_tune)
      .finish();
}

inline Json to_json_value(const RunConfig& c) {
  Json j;
  j["seed"] = c.seed;
  j["work_dir"] = c.work_dir;
  j["threads"] = c.threads;
  j["model"] = to_json_value(c.model);
  j["tokenizer"] = to_json_value(c.tokenizer);
  j["corpus"] = to_json_value(c.corpus);
  j["stage1"] = to_json_value(c.stage1);
  j["stage2"] = to_json_value(c.stage2);
  j["analysis"] = to_json_value(c.analysis);
  return j;
}

inline void from_json_checked(const Json& j, RunConfig& c, const std::string& where) {
  FieldReader(j, where)("seed", c.seed)("work_dir", c.work_dir)("threads", c.threads)("model", c.model)(
      "tokenizer", c.tokenizer)("corpus", c.corpus)("stage1", c.stage1)("stage2", c.stage2)("analysis", c.analysis)
      .finish();
}

/// Applies "a.b.c=value" to a JSON tree. The value is parsed as JSON when possible
/// (numbers, booleans, arrays, quoted strings) and taken as a bare string otherwise.
/// Only existing keys may be overridden.
inline void apply_override(Json& root, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  Json* node = &root;
  std::size_t start = 0;
  for (;;) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!node->is_object() || !node->contains(part)) throw ConfigError("override: unknown key '" + key + "'");
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  Json value;
  try {
    value = Json::parse(text);
  } catch (const Json::parse_error&) {
    value = text;
  }
  *node = value;
}

/// Defaults, then the file (if any), then each override; validated before returning.
inline RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides = {}) {
  Json j = to_json_value(RunConfig{});
  if (!path.empty()) {
    if (!std::filesystem::exists(path)) throw ConfigError("config file " + path + " does not exist");
    Json file;
    try {
      file = Json::parse(read_file(path));
    } catch (const Json::parse_error& e) {
      throw ConfigError("config file " + path + ": " + e.what());
    }
    RunConfig from_file = config_from_json<RunConfig>(file, "config");
    j = to_json_value(from_file);
  }
  for (const auto& o : overrides) apply_override(j, o);
  RunConfig c = config_from_json<RunConfig>(j, "config");
  c.validate();
  return c;
}

}  // namespace mbert
