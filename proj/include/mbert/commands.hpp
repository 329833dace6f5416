#pragma once

// Subcommand bodies behind the mbert tool. Each returns the report it wrote.
// ConfigError means invalid input (exit 1); anything else is a runtime failure.

#include <filesystem>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mbert/analysis.hpp"
#include "mbert/checkpoint.hpp"
#include "mbert/corpus.hpp"
#include "mbert/finetune.hpp"
#include "mbert/run_config.hpp"
#include "mbert/trainer.hpp"

namespace mbert {

namespace fs = std::filesystem;

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

inline std::string file_fingerprint(const fs::path& p) { return hex64(fnv1a64(read_file(p))); }

inline void require_file(const fs::path& p, const std::string& what) {
  if (!fs::exists(p)) throw ConfigError(what + " " + p.string() + " not found");
}

/// Report envelope shared by every subcommand.
class Report {
 public:
  Report(std::string command, const RunConfig& cfg) : cfg_(cfg) {
    j_["command"] = std::move(command);
    j_["tool_version"] = kToolVersion;
    j_["seed"] = cfg.seed;
    j_["config"] = to_json_value(cfg);
    j_["artifacts"] = Json::object();
    j_["results"] = Json::object();
  }

  void artifact(const std::string& name, const fs::path& path) {
    j_["artifacts"][name] = {{"path", path.string()}, {"fingerprint", file_fingerprint(path)}};
  }

  Json& results() { return j_["results"]; }
  const Json& json() const { return j_; }

  /// Writes <reports>/<name>.json plus any side files, each atomically.
  fs::path write(const std::string& name, const std::map<std::string, std::string>& side_files = {}) const {
    const fs::path dir = cfg_.reports();
    for (const auto& [file, content] : side_files) write_file_atomic(dir / file, content);
    const fs::path path = dir / (name + ".json");
    write_file_atomic(path, j_.dump(2) + "\n");
    return path;
  }

 private:
  const RunConfig& cfg_;
  Json j_;
};

inline std::vector<std::string> training_documents(const RunConfig& cfg, std::size_t count) {
  if (!cfg.corpus.path.empty()) {
    require_file(cfg.corpus.path, "corpus file");
    auto docs = read_corpus(cfg.corpus.path);
    if (docs.size() > count) docs.resize(count);
    return docs;
  }
  return SyntheticCorpus(cfg.corpus.synth, cfg.seed).documents(0, count);
}

inline std::vector<std::string> validation_documents(const RunConfig& cfg) {
  if (!cfg.corpus.val_path.empty()) {
    require_file(cfg.corpus.val_path, "validation corpus file");
    auto docs = read_corpus(cfg.corpus.val_path);
    if (docs.size() > cfg.corpus.val_docs) docs.resize(cfg.corpus.val_docs);
    return docs;
  }
  return SyntheticCorpus(cfg.corpus.synth, cfg.seed).documents(cfg.corpus.val_offset, cfg.corpus.val_docs);
}

inline std::vector<std::string> heldout_documents(const RunConfig& cfg, std::size_t count) {
  return SyntheticCorpus(cfg.corpus.synth, cfg.seed).documents(cfg.corpus.heldout_offset, count);
}

inline Tokenizer load_run_tokenizer(const RunConfig& cfg) {
  require_file(cfg.tokenizer_path(), "tokenizer (run tokenizer-train first)");
  auto tok = Tokenizer::load(cfg.tokenizer_path().string());
  if (tok.vocab_size() != cfg.model.vocab_size) {
    throw ConfigError("tokenizer has " + std::to_string(tok.vocab_size()) + " entries but model.vocab_size is " +
                      std::to_string(cfg.model.vocab_size));
  }
  return tok;
}

inline Checkpoint load_run_checkpoint(const fs::path& path, const Tokenizer& tok) {
  require_file(path, "checkpoint");
  return load_checkpoint(path, tok.fingerprint());
}

inline ValidationSet make_validation_set(const RunConfig& cfg, const Tokenizer& tok, std::size_t max_len, bool add_cls_sep) {
  ValidationSet vs;
  vs.sequences = line_by_line_chunks(tok, validation_documents(cfg), max_len, add_cls_sep).sequences;
  vs.seed = derive_seed(cfg.seed, 0x7A11ull);
  vs.batch_size = max_len > 256 ? 8 : 32;
  if (vs.sequences.empty()) throw ConfigError("validation corpus produced no sequences");
  return vs;
}

// ---------------------------------------------------------------------------------

inline Json cmd_tokenizer_train(const RunConfig& cfg) {
  const auto docs = training_documents(cfg, cfg.tokenizer.train_docs);
  if (docs.empty()) throw ConfigError("tokenizer-train: corpus is empty");
  const Tokenizer tok = train_tokenizer(docs, cfg.tokenizer.vocab_size);
  write_file_atomic(cfg.tokenizer_path(), tok.serialize());
  Report r("tokenizer-train", cfg);
  r.artifact("tokenizer", cfg.tokenizer_path());
  r.results() = {{"vocab_size", tok.vocab_size()}, {"merges", tok.merges().size()}, {"documents", docs.size()},
                 {"tokenizer_fingerprint", tok.fingerprint()}};
  r.write("tokenizer-train");
  return r.json();
}

inline Json cmd_corpus_synth(const RunConfig& cfg, const fs::path& out, std::size_t offset, std::size_t count) {
  if (count == 0) throw ConfigError("corpus-synth: count must be positive");
  const SyntheticCorpus corpus(cfg.corpus.synth, cfg.seed);
  std::string content;
  std::size_t units = 0;
  for (std::size_t i = 0; i < count; ++i) {
    const auto doc = corpus.document(offset + i);
    units += count_units(doc);
    content += nlohmann::json{{"text", doc}}.dump() + "\n";
  }
  write_file_atomic(out, content);
  Json facts = Json::array();
  for (const auto& f : corpus.facts()) facts.push_back({{"entity", f.entity}, {"value", f.value}});
  Report r("corpus-synth", cfg);
  r.artifact("corpus", out);
  r.results() = {{"offset", offset}, {"documents", count}, {"units", units}, {"facts", facts}};
  r.write("corpus-synth");
  return r.json();
}

struct TrainOptions {
  int stage = 1;
  std::optional<fs::path> resume;      // continue from this checkpoint
  std::optional<fs::path> from;        // stage-1 checkpoint to extend (stage 2)
  std::int64_t max_steps = -1;         // stop early after this many updates
  bool progress = false;
};

inline Json cmd_train(const RunConfig& cfg, const TrainOptions& opt) {
  if (opt.stage != 1 && opt.stage != 2) throw ConfigError("train: --stage must be 1 or 2");
  const Tokenizer tok = load_run_tokenizer(cfg);
  const TrainConfig& tc = opt.stage == 1 ? cfg.stage1 : cfg.stage2;
  Checkpoint start;
  fs::path source;
  if (opt.resume) {
    start = load_run_checkpoint(*opt.resume, tok);
    source = *opt.resume;
    if (start.stage() != opt.stage) throw ConfigError("train: resume checkpoint is not stage " + std::to_string(opt.stage));
  } else if (opt.stage == 1) {
    start = fresh_checkpoint(cfg.model, tc, tok.fingerprint());
  } else {
    source = opt.from.value_or(cfg.final_checkpoint(1));
    if (!fs::exists(source)) {
      throw ConfigError("train --stage 2 needs a stage-1 checkpoint; " + source.string() + " not found");
    }
    start = extend_context(load_run_checkpoint(source, tok), tc);
  }

  const auto lines = training_documents(cfg, cfg.corpus.train_docs);
  auto chunks = line_by_line_chunks(tok, lines, tc.max_seq_len, tc.add_cls_sep);
  if (chunks.sequences.empty()) throw ConfigError("train: corpus produced no sequences");
  auto data = std::make_shared<Sequences>(std::move(chunks.sequences));
  const ValidationSet vs = make_validation_set(cfg, tok, tc.max_seq_len, tc.add_cls_sep);

  Trainer trainer(std::move(start), data);
  MetricLog log;
  RunOptions ro;
  ro.validation = &vs;
  ro.metrics = &log;
  ro.checkpoint_dir = cfg.checkpoint_dir();
  if (opt.progress) {
    ro.on_validate = [](std::int64_t step, const ValidationResult& v) {
      std::cerr << "step " << step << " val_loss " << v.loss << " val_accuracy " << v.accuracy << "\n";
    };
  }
  run_training(trainer, ro, opt.max_steps);

  const std::string tag = "stage" + std::to_string(opt.stage);
  const fs::path final_path = trainer.finished() ? cfg.final_checkpoint(opt.stage)
                                                 : checkpoint_path(cfg.checkpoint_dir(), opt.stage, trainer.steps_done());
  save_checkpoint(trainer.state(), final_path);

  Report r("train", cfg);
  r.artifact("tokenizer", cfg.tokenizer_path());
  if (!source.empty()) r.artifact("source_checkpoint", source);
  r.artifact("checkpoint", final_path);
  Json res;
  res["stage"] = opt.stage;
  res["steps_done"] = trainer.steps_done();
  res["finished"] = trainer.finished();
  res["sequences"] = data->size();
  res["discarded_tokens"] = chunks.discarded_tokens;
  const auto vl = log.series("val_loss"), va = log.series("val_accuracy");
  if (!vl.empty()) {
    res["initial_val_loss"] = vl.front().value;
    res["final_val_loss"] = vl.back().value;
    res["final_val_accuracy"] = va.back().value;
  }
  r.results() = res;
  r.write("train_" + tag, {{tag + "_metrics.jsonl", log.to_jsonl()}, {tag + "_metrics.csv", log.to_csv()}});
  return r.json();
}

inline Json cmd_validate(const RunConfig& cfg, const fs::path& ckpt_path) {
  const Tokenizer tok = load_run_tokenizer(cfg);
  const Checkpoint ck = load_run_checkpoint(ckpt_path, tok);
  const auto vs = make_validation_set(cfg, tok, ck.model().max_seq_len, ck.train.add_cls_sep);
  const auto v = validate(ck.weights, vs);
  Report r("validate", cfg);
  r.artifact("checkpoint", ckpt_path);
  r.results() = {{"stage", ck.stage()},         {"step", ck.step},          {"val_loss", v.loss},
                 {"val_accuracy", v.accuracy}, {"predictions", v.predictions}};
  r.write("validate");
  return r.json();
}

inline Json cmd_analyze_pppl(const RunConfig& cfg, const std::vector<fs::path>& ckpts) {
  if (ckpts.empty()) throw ConfigError("analyze-pppl: at least one --checkpoint is required");
  const Tokenizer tok = load_run_tokenizer(cfg);
  const auto texts = heldout_documents(cfg, cfg.analysis.pppl.docs);
  PseudoPplOptions po;
  po.bins = LengthBins{cfg.analysis.pppl.bin_edges};
  po.per_bin = cfg.analysis.pppl.per_bin;
  po.n_samples = cfg.analysis.pppl.n_samples;
  po.seed = derive_seed(cfg.seed, 0x9991ull);
  po.max_len = cfg.analysis.pppl.max_len;
  po.threads = cfg.threads;
  Report r("analyze-pppl", cfg);
  Json per = Json::array();
  std::string csv = "checkpoint,index,length,bin,pseudo_perplexity\n";
  for (std::size_t c = 0; c < ckpts.size(); ++c) {
    const Checkpoint ck = load_run_checkpoint(ckpts[c], tok);
    r.artifact("checkpoint_" + std::to_string(c), ckpts[c]);
    const auto rep = binned_pseudo_ppl(texts, tok, ck.weights, po);
    Json bins = Json::array();
    for (const auto& b : rep.bins) {
      bins.push_back({{"lo", b.lo},
                      {"hi", b.hi},
                      {"candidates", b.candidates},
                      {"count", b.count},
                      {"mean", b.count == 0 ? Json(nullptr) : Json(b.mean)}});
    }
    for (const auto& s : rep.sequences) {
      csv += std::to_string(c) + "," + std::to_string(s.index) + "," + std::to_string(s.length) + "," +
             std::to_string(s.bin) + "," + format_number(s.ppl) + "\n";
    }
    per.push_back({{"checkpoint", ckpts[c].string()}, {"stage", ck.stage()}, {"step", ck.step}, {"bins", bins}});
  }
  r.results() = {{"documents", texts.size()}, {"checkpoints", per}};
  r.write("analyze-pppl", {{"analyze-pppl.csv", csv}});
  return r.json();
}

inline RetrievalTask load_retrieval_task(const RunConfig& cfg) {
  if (cfg.analysis.retrieval_data.empty()) throw ConfigError("analysis.retrieval_data must name a JSONL file");
  require_file(cfg.analysis.retrieval_data, "retrieval data");
  const auto instances = read_retrieval_jsonl(cfg.analysis.retrieval_data);
  if (cfg.analysis.retrieval_seeded) return build_retrieval_task(instances, derive_seed(cfg.seed, 0x5E17ull));
  return build_retrieval_task(instances);
}

inline Json task_summary(const RetrievalTask& t) {
  return {{"pairs", t.queries.size()}, {"passages_seen", t.passages_seen}, {"passages_skipped", t.passages_skipped}};
}

inline EmbedFunction<float> make_embedder(const RunConfig& cfg, const Checkpoint& ck, const Tokenizer& tok) {
  return EmbedFunction<float>(ck.weights, tok, cfg.analysis.embed_max_len, cfg.analysis.embed_batch_size, cfg.threads);
}

inline Json cmd_analyze_align_uniform(const RunConfig& cfg, const std::vector<fs::path>& ckpts) {
  if (ckpts.empty()) throw ConfigError("analyze-align-uniform: at least one --checkpoint is required");
  const Tokenizer tok = load_run_tokenizer(cfg);
  const RetrievalTask task = load_retrieval_task(cfg);
  const PairSet pairs = build_pair_set(task, 0, 0);
  std::vector<std::string> samples = task.queries;
  samples.insert(samples.end(), task.corpus.begin(), task.corpus.end());
  Report r("analyze-align-uniform", cfg);
  r.artifact("retrieval_data", cfg.analysis.retrieval_data);
  Json per = Json::array();
  std::string csv = "checkpoint,stage,step,alignment,uniformity\n";
  for (std::size_t c = 0; c < ckpts.size(); ++c) {
    const Checkpoint ck = load_run_checkpoint(ckpts[c], tok);
    r.artifact("checkpoint_" + std::to_string(c), ckpts[c]);
    const auto f = make_embedder(cfg, ck, tok);
    const TextEmbedder fn = [&f](const std::vector<std::string>& xs) { return f(xs); };
    const double al = alignment(pairs.positive, fn);
    const double un = uniformity(fn(samples), derive_seed(cfg.seed, 0x0A11ull));
    per.push_back({{"checkpoint", ckpts[c].string()}, {"stage", ck.stage()}, {"step", ck.step}, {"alignment", al},
                   {"uniformity", un}});
    csv += ckpts[c].string() + "," + std::to_string(ck.stage()) + "," + std::to_string(ck.step) + "," +
           format_number(al) + "," + format_number(un) + "\n";
  }
  r.results() = {{"task", task_summary(task)}, {"samples", samples.size()}, {"checkpoints", per}};
  r.write("analyze-align-uniform", {{"analyze-align-uniform.csv", csv}});
  return r.json();
}

inline Json cmd_analyze_sim_hist(const RunConfig& cfg, const std::vector<fs::path>& ckpts) {
  if (ckpts.empty()) throw ConfigError("analyze-sim-hist: at least one --checkpoint is required");
  const Tokenizer tok = load_run_tokenizer(cfg);
  const RetrievalTask task = load_retrieval_task(cfg);
  const std::size_t n_random = cfg.analysis.random_pairs == 0 ? task.queries.size() : cfg.analysis.random_pairs;
  const PairSet pairs = build_pair_set(task, n_random, derive_seed(cfg.seed, 0x9A125ull));
  Report r("analyze-sim-hist", cfg);
  r.artifact("retrieval_data", cfg.analysis.retrieval_data);
  Json per = Json::array();
  std::string csv = "checkpoint,kind,bin_lo,bin_hi,count\n";
  for (std::size_t c = 0; c < ckpts.size(); ++c) {
    const Checkpoint ck = load_run_checkpoint(ckpts[c], tok);
    r.artifact("checkpoint_" + std::to_string(c), ckpts[c]);
    const auto f = make_embedder(cfg, ck, tok);
    const TextEmbedder fn = [&f](const std::vector<std::string>& xs) { return f(xs); };
    Json entry{{"checkpoint", ckpts[c].string()}, {"stage", ck.stage()}, {"step", ck.step}};
    for (const auto& [kind, set] : {std::pair<std::string, const std::vector<std::pair<std::string, std::string>>*>{
                                        "positive", &pairs.positive},
                                    {"random", &pairs.random}}) {
      const auto h = similarity_histogram(*set, fn, cfg.analysis.sim_hist_bins);
      entry[kind] = h.counts;
      for (std::size_t k = 0; k < h.counts.size(); ++k) {
        csv += std::to_string(c) + "," + kind + "," + format_number(h.bin_lo(k)) + "," + format_number(h.bin_hi(k)) + "," +
               std::to_string(h.counts[k]) + "\n";
      }
    }
    per.push_back(entry);
  }
  r.results() = {{"task", task_summary(task)},
                 {"random_pairs", pairs.random.size()},
                 {"bins", cfg.analysis.sim_hist_bins},
                 {"checkpoints", per}};
  r.write("analyze-sim-hist", {{"analyze-sim-hist.csv", csv}});
  return r.json();
}

inline Json cmd_analyze_length_hist(const RunConfig& cfg, const std::optional<fs::path>& input) {
  const Tokenizer tok = load_run_tokenizer(cfg);
  std::vector<std::string> docs;
  if (input) {
    require_file(*input, "input corpus");
    docs = read_corpus(input->string());
  } else {
    docs = training_documents(cfg, cfg.corpus.train_docs);
  }
  const auto h = length_histogram(docs, tok, LengthBins{cfg.analysis.length_bins});
  Report r("analyze-length-hist", cfg);
  r.artifact("tokenizer", cfg.tokenizer_path());
  if (input) r.artifact("input", *input);
  Json bins = Json::array();
  std::string csv = "bin_lo,bin_hi,count\n";
  for (std::size_t k = 0; k < h.counts.size(); ++k) {
    bins.push_back({{"lo", h.bins.edges[k]}, {"hi", h.bins.edges[k + 1]}, {"count", h.counts[k]}});
    csv += std::to_string(h.bins.edges[k]) + "," + std::to_string(h.bins.edges[k + 1]) + "," + std::to_string(h.counts[k]) + "\n";
  }
  r.results() = {{"documents", docs.size()}, {"bins", bins}, {"below", h.below}, {"above", h.above}};
  r.write("analyze-length-hist", {{"analyze-length-hist.csv", csv}});
  return r.json();
}

inline Json cmd_retrieve(const RunConfig& cfg, const std::string& embed, const std::optional<fs::path>& ckpt) {
  const RetrievalTask task = load_retrieval_task(cfg);
  Report r("retrieve", cfg);
  r.artifact("retrieval_data", cfg.analysis.retrieval_data);
  SimilarityMatrix sim;
  if (embed == "edit") {
    sim = similarity_matrix(task.queries, task.corpus, PairSimilarity(edit_distance_sim), cfg.threads);
  } else if (embed == "jaccard") {
    sim = similarity_matrix(
        task.queries, task.corpus,
        [n = cfg.analysis.jaccard_ngram](const std::string& a, const std::string& b) { return jaccard_sim(a, b, n); },
        cfg.threads);
  } else if (embed == "model") {
    if (!ckpt) throw ConfigError("retrieve --embed model needs --checkpoint");
    const Tokenizer tok = load_run_tokenizer(cfg);
    const Checkpoint ck = load_run_checkpoint(*ckpt, tok);
    r.artifact("checkpoint", *ckpt);
    const auto f = make_embedder(cfg, ck, tok);
    sim = similarity_matrix(task.queries, task.corpus, [&f](const std::vector<std::string>& xs) { return f(xs); });
  } else {
    throw ConfigError("retrieve: --embed must be model, edit or jaccard");
  }
  const auto s = retrieval_scores(sim, task.relevance, cfg.analysis.retrieval_k);
  const std::string k = std::to_string(cfg.analysis.retrieval_k);
  std::string csv = "query,rank\n";
  for (std::size_t q = 0; q < s.ranks.size(); ++q) csv += std::to_string(q) + "," + std::to_string(s.ranks[q]) + "\n";
  r.results() = {{"embed", embed}, {"task", task_summary(task)}, {"k", cfg.analysis.retrieval_k},
                 {"recall@" + k, s.recall}, {"mrr@" + k, s.mrr}};
  r.write("retrieve_" + embed, {{"retrieve_" + embed + "_ranks.csv", csv}});
  return r.json();
}

inline Json cmd_fill_mask(const RunConfig& cfg, const fs::path& ckpt, const std::vector<std::string>& texts) {
  const Tokenizer tok = load_run_tokenizer(cfg);
  const Checkpoint ck = load_run_checkpoint(ckpt, tok);
  Report r("fill-mask", cfg);
  r.artifact("checkpoint", ckpt);
  Json items = Json::array();
  auto candidates = [&](const std::string& text) {
    Json out = Json::array();
    for (const auto& c : fill_mask(ck.weights, tok, text, cfg.analysis.fill_mask_top_k)) {
      out.push_back({{"id", c.id}, {"token", c.token}, {"probability", c.probability}});
    }
    return out;
  };
  if (!texts.empty()) {
    for (const auto& t : texts) {
      try {
        fill_mask_input(tok, t);
      } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
      }
    }
    for (const auto& t : texts) items.push_back({{"text", t}, {"candidates", candidates(t)}});
    r.results() = {{"items", items}};
  } else {
    const SyntheticCorpus corpus(cfg.corpus.synth, cfg.seed);
    const std::size_t n = std::min(cfg.analysis.fill_mask_facts, corpus.facts().size());
    std::size_t correct = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const Fact& f = corpus.facts()[i];
      Json c = candidates(f.cloze());
      const std::string top = to_utf8(trim(utf8_codepoints(c[0]["token"].get<std::string>())));
      const bool hit = top == f.value;
      correct += hit ? 1 : 0;
      items.push_back({{"text", f.cloze()}, {"expected", f.value}, {"top1", top}, {"correct", hit}, {"candidates", c}});
    }
    r.results() = {{"facts", n}, {"top1_accuracy", n == 0 ? 0.0 : static_cast<double>(correct) / n}, {"items", items}};
  }
  r.write("fill-mask");
  return r.json();
}

/// Task JSONL rows: {"split": "train"|"dev", "text", optional "text2", "label"}.
/// Integer labels make a classification task; any fractional label makes it regression.
inline ClassificationTask read_classification_task(const fs::path& path) {
  require_file(path, "fine-tune task");
  ClassificationTask task;
  task.num_labels = 0;
  bool integral = true;
  double max_label = 0.0;
  std::istringstream in(read_file(path));
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("fine-tune task line " + std::to_string(n) + ": " + e.what());
    }
    if (!j.contains("text") || !j.contains("label") || !j["label"].is_number()) {
      throw ConfigError("fine-tune task line " + std::to_string(n) + ": needs \"text\" and numeric \"label\"");
    }
    ClassificationExample ex{j["text"].get<std::string>(), j.value("text2", std::string{}), j["label"].get<double>()};
    task.sentence_pair = task.sentence_pair || j.contains("text2");
    integral = integral && ex.label == std::floor(ex.label) && ex.label >= 0;
    max_label = std::max(max_label, ex.label);
    const std::string split = j.value("split", std::string("train"));
    if (split == "train") {
      task.train.push_back(std::move(ex));
    } else if (split == "dev") {
      task.dev.push_back(std::move(ex));
    } else {
      throw ConfigError("fine-tune task line " + std::to_string(n) + ": split must be train or dev");
    }
  }
  task.num_labels = integral ? std::max<std::size_t>(2, static_cast<std::size_t>(max_label) + 1) : 0;
  return task;
}

inline Json cmd_fine_tune(const RunConfig& cfg, const fs::path& ckpt) {
  const Tokenizer tok = load_run_tokenizer(cfg);
  const Checkpoint ck = load_run_checkpoint(ckpt, tok);
  if (cfg.analysis.fine_tune_task.empty()) throw ConfigError("analysis.fine_tune_task must name a task JSONL file");
  const auto task = read_classification_task(cfg.analysis.fine_tune_task);
  const auto res = fine_tune_classifier(ck.weights, tok, task, cfg.analysis.fine_tune);
  Report r("fine-tune", cfg);
  r.artifact("checkpoint", ckpt);
  r.artifact("task", cfg.analysis.fine_tune_task);
  Json grid = Json::array();
  std::string csv = "lr,epochs,score\n";
  for (const auto& g : res.grid) {
    grid.push_back({{"lr", g.lr}, {"epochs", g.epochs}, {"score", g.score}});
    csv += format_number(g.lr) + "," + std::to_string(g.epochs) + "," + format_number(g.score) + "\n";
  }
  r.results() = {{"metric", res.metric},     {"num_labels", task.num_labels}, {"train", task.train.size()},
                 {"dev", task.dev.size()},    {"best_score", res.best_score}, {"best_lr", res.best_lr},
                 {"best_epochs", res.best_epochs}, {"grid", grid}};
  r.write("fine-tune", {{"fine-tune.csv", csv}});
  return r.json();
}

}  // namespace mbert
