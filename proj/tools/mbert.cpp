#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mbert/commands.hpp"

namespace {

using namespace mbert;

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::size_t threads = 0;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("-c,--config", c.config, "JSON run configuration");
  sub->add_option("--set", c.overrides, "Override a config value by dotted key, e.g. stage1.peak_lr=1e-4")
      ->take_all();
  sub->add_option("--threads", c.threads, "Cap on worker threads (overrides config threads)");
}

RunConfig resolve(const Common& c) {
  auto overrides = c.overrides;
  if (c.threads > 0) overrides.push_back("threads=" + std::to_string(c.threads));
  return load_run_config(c.config, overrides);
}

void print_error(const char* kind, const std::string& message) {
  nlohmann::json j{{"error", kind}, {"message", message}};
  std::cerr << j.dump() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Desk-scale ModernBERT-style encoder: tokenizer, two-stage MLM pretraining and analysis"};
  app.set_version_flag("--version", std::string(kToolVersion));
  app.require_subcommand(1);

  Common common;
  std::vector<std::string> checkpoints;
  std::string checkpoint, out, input, embed, resume, from;
  std::vector<std::string> texts;
  std::size_t count = 0, offset = 0;
  int stage = 0;
  std::int64_t max_steps = -1;
  bool progress = false;

  auto* tok = app.add_subcommand("tokenizer-train", "Train the byte-level BPE tokenizer");
  add_common(tok, common);

  auto* synth = app.add_subcommand("corpus-synth", "Write synthetic documents as JSONL");
  add_common(synth, common);
  synth->add_option("--out", out, "Output JSONL path")->required();
  synth->add_option("--count", count, "Number of documents")->required();
  synth->add_option("--offset", offset, "Index of the first document");

  auto* train = app.add_subcommand("train", "Run MLM pretraining for one stage");
  add_common(train, common);
  train->add_option("--stage", stage, "1 or 2")->required()->check(CLI::IsMember({1, 2}));
  train->add_option("--resume", resume, "Continue from this checkpoint");
  train->add_option("--from", from, "Stage-1 checkpoint to extend (stage 2)");
  train->add_option("--max-steps", max_steps, "Stop after this many updates");
  train->add_flag("--progress", progress, "Print validation metrics while training");

  auto* val = app.add_subcommand("validate", "Validation loss and accuracy of a checkpoint");
  add_common(val, common);
  val->add_option("--checkpoint", checkpoint)->required();

  auto* pppl = app.add_subcommand("analyze-pppl", "Pseudo-perplexity by length bin");
  add_common(pppl, common);
  pppl->add_option("--checkpoint", checkpoints)->required();

  auto* au = app.add_subcommand("analyze-align-uniform", "Alignment and uniformity of sentence embeddings");
  add_common(au, common);
  au->add_option("--checkpoint", checkpoints)->required();

  auto* sh = app.add_subcommand("analyze-sim-hist", "Cosine-similarity histograms for positive and random pairs");
  add_common(sh, common);
  sh->add_option("--checkpoint", checkpoints)->required();

  auto* lh = app.add_subcommand("analyze-length-hist", "Token-length histogram of a corpus");
  add_common(lh, common);
  lh->add_option("--input", input, "Corpus file (default: the training corpus)");

  auto* ret = app.add_subcommand("retrieve", "Sentence retrieval recall@k and MRR@k");
  add_common(ret, common);
  ret->add_option("--embed", embed, "model, edit or jaccard")->required()->check(CLI::IsMember({"model", "edit", "jaccard"}));
  ret->add_option("--checkpoint", checkpoint, "Checkpoint for --embed model");

  auto* fm = app.add_subcommand("fill-mask", "Rank vocabulary candidates for one [MASK] slot");
  add_common(fm, common);
  fm->add_option("--checkpoint", checkpoint)->required();
  fm->add_option("--text", texts, "Text with one [MASK] marker (default: synthetic fact probe)");

  auto* ft = app.add_subcommand("fine-tune", "Grid-searched classification fine-tuning");
  add_common(ft, common);
  ft->add_option("--checkpoint", checkpoint)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    print_error("usage", e.what());
    return 1;
  }

  auto opt_path = [](const std::string& s) { return s.empty() ? std::nullopt : std::optional<fs::path>(s); };
  std::vector<fs::path> ckpt_paths(checkpoints.begin(), checkpoints.end());

  try {
    const RunConfig cfg = resolve(common);
    Json report;
    if (tok->parsed()) {
      report = cmd_tokenizer_train(cfg);
    } else if (synth->parsed()) {
      report = cmd_corpus_synth(cfg, out, offset, count);
    } else if (train->parsed()) {
      report = cmd_train(cfg, TrainOptions{stage, opt_path(resume), opt_path(from), max_steps, progress});
    } else if (val->parsed()) {
      report = cmd_validate(cfg, checkpoint);
    } else if (pppl->parsed()) {
      report = cmd_analyze_pppl(cfg, ckpt_paths);
    } else if (au->parsed()) {
      report = cmd_analyze_align_uniform(cfg, ckpt_paths);
    } else if (sh->parsed()) {
      report = cmd_analyze_sim_hist(cfg, ckpt_paths);
    } else if (lh->parsed()) {
      report = cmd_analyze_length_hist(cfg, opt_path(input));
    } else if (ret->parsed()) {
      report = cmd_retrieve(cfg, embed, opt_path(checkpoint));
    } else if (fm->parsed()) {
      report = cmd_fill_mask(cfg, checkpoint, texts);
    } else if (ft->parsed()) {
      report = cmd_fine_tune(cfg, checkpoint);
    }
    std::cout << report["results"].dump(2) << "\n";
    return 0;
  } catch (const ConfigError& e) {
    print_error("validation", e.what());
    return 1;
  } catch (const std::exception& e) {
    print_error("runtime", e.what());
    return 2;
  }
}
