// Acceptance run: one PASS/FAIL/SKIP line per criterion, exit status 1 if any fails.
// Criteria 4, 5 and 9 train the default desk configuration from scratch.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "mbert/commands.hpp"
#include "support/gradcheck.hpp"

namespace {

using namespace mbert;
using Clock = std::chrono::steady_clock;

enum class Status { Pass, Fail, Skip };

struct Outcome {
  Status status;
  std::string detail;
};

int failures = 0;

void report(int n, const std::string& name, const Outcome& o) {
  const char* s = o.status == Status::Pass ? "PASS" : o.status == Status::Fail ? "FAIL" : "SKIP";
  if (o.status == Status::Fail) ++failures;
  std::cout << "criterion " << std::setw(2) << n << " " << s << " " << name << ": " << o.detail << std::endl;
}

void run(int n, const std::string& name, const std::function<Outcome()>& body) {
  try {
    report(n, name, body());
  } catch (const std::exception& e) {
    report(n, name, {Status::Fail, std::string("error: ") + e.what()});
  }
}

std::string fmt(double v, int precision = 6) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

Outcome verdict(bool ok, const std::string& detail) { return {ok ? Status::Pass : Status::Fail, detail}; }

const fs::path kSource = MBERT_SOURCE_DIR;
const fs::path kFixture = kSource / "tests/data/miracl_fixture.jsonl";
const fs::path kFixtureExpected = kSource / "tests/data/miracl_fixture_expected.json";

// ------------------------------------------------------------------ 1, 2

Outcome miracl_baselines() {
  const char* env = std::getenv("MIRACL_JA_JSONL");
  if (env == nullptr || *env == '\0') {
    const auto expected = nlohmann::json::parse(read_file(kFixtureExpected));
    const auto task = build_retrieval_task(read_retrieval_jsonl(kFixture.string()));
    bool ok = task.queries == expected["queries"].get<std::vector<std::string>>() &&
              task.corpus == expected["corpus"].get<std::vector<std::string>>();
    std::string detail = "offline fallback, fixture vs frozen oracle:";
    for (const std::string e : {"edit", "jaccard"}) {
      const PairSimilarity f = e == "edit" ? PairSimilarity(edit_distance_sim)
                                           : PairSimilarity([](const std::string& a, const std::string& b) {
                                               return jaccard_sim(a, b);
                                             });
      const auto s = retrieval_scores(similarity_matrix(task.queries, task.corpus, f), task.relevance, 10);
      const auto& x = expected[e];
      const bool exact = s.recall == x["recall_at_10"].get<double>() && s.mrr == x["mrr_at_10"].get<double>() &&
                         s.ranks == x["ranks"].get<std::vector<std::size_t>>();
      ok = ok && exact;
      detail += " " + e + " R@10=" + fmt(s.recall) + " MRR@10=" + fmt(s.mrr) + (exact ? " (exact)" : " (MISMATCH)");
    }
    return verdict(ok, detail + "; set MIRACL_JA_JSONL to score the full dev subset");
  }
  const auto t0 = Clock::now();
  const auto task = build_retrieval_task(read_retrieval_jsonl(env));
  const std::size_t threads = std::max(1u, std::thread::hardware_concurrency());
  const auto edit = retrieval_scores(similarity_matrix(task.queries, task.corpus, edit_distance_sim, threads),
                                     task.relevance, 10);
  const auto jac = retrieval_scores(
      similarity_matrix(
          task.queries, task.corpus, [](const std::string& a, const std::string& b) { return jaccard_sim(a, b); },
          threads),
      task.relevance, 10);
  const double secs = seconds_since(t0);
  const bool ok = std::abs(edit.recall - 0.289) <= 0.05 && std::abs(edit.mrr - 0.198) <= 0.05 &&
                  std::abs(jac.recall - 0.031) <= 0.02 && std::abs(jac.mrr - 0.021) <= 0.02 && secs < 600.0;
  return verdict(ok, "edit R@10=" + fmt(edit.recall) + " (0.289+-0.05) MRR@10=" + fmt(edit.mrr) +
                         " (0.198+-0.05); jaccard R@10=" + fmt(jac.recall) + " (0.031+-0.02) MRR@10=" + fmt(jac.mrr) +
                         " (0.021+-0.02); " + fmt(secs, 3) + " s (< 600)");
}

Outcome miracl_pair_count() {
  const char* env = std::getenv("MIRACL_JA_JSONL");
  if (env == nullptr || *env == '\0') {
    return {Status::Skip, "needs the MIRACL-ja dev subset (set MIRACL_JA_JSONL); no network access here"};
  }
  const auto instances = read_retrieval_jsonl(env);
  const auto task = build_retrieval_task(instances);
  const double pairs = static_cast<double>(task.queries.size());
  return verdict(std::abs(pairs - 1746.0) <= 50.0, std::to_string(instances.size()) + " instances, " +
                                                       std::to_string(task.passages_seen) + " positive passages -> " +
                                                       fmt(pairs) + " pairs (1746+-50)");
}

// ------------------------------------------------------------------ 3

Outcome gradient_integrity() {
  using testing::grad_check;
  using testing::random_param;
  using testing::random_tensor;
  const auto t0 = Clock::now();
  double kernel_worst = 0.0;
  std::size_t kernel_checks = 0;
  auto record = [&](const testing::GradCheckResult& r) {
    kernel_worst = std::max(kernel_worst, r.max_rel_error);
    kernel_checks += r.checked;
  };
  auto reduce = [](Tape<double>& t, const Var<double>& out, const Tensor<double>& w) { return weighted_sum(t, out, w); };
  for (int trial = 0; trial < 10; ++trial) {
    Rng rng(900 + static_cast<std::uint64_t>(trial));
    auto dim = [&](std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); };
    {
      const auto m = dim(1, 5), k = dim(1, 5), n = dim(1, 5);
      auto a = random_param({m, k}, rng), b = random_param({k, n}, rng), wt = random_param({n, k}, rng);
      auto w = random_tensor({m, n}, rng);
      record(grad_check({a, b}, [&](Tape<double>& t) { return reduce(t, matmul(t, t.param(a), t.param(b)), w); }));
      record(grad_check({a, wt}, [&](Tape<double>& t) { return reduce(t, linear(t, t.param(a), t.param(wt)), w); }));
    }
    {
      const auto m = dim(1, 4), n = dim(2, 8);
      auto a = random_param({m, n}, rng), b = random_param({m, n}, rng), g = random_param({n}, rng);
      auto w = random_tensor({m, n}, rng);
      record(grad_check({a, b, g}, [&](Tape<double>& t) {
        auto s = add(t, t.param(a), mul(t, t.param(a), t.param(b)));
        return reduce(t, scale(t, add_row(t, s, t.param(g)), 0.7), w);
      }));
      record(grad_check({a}, [&](Tape<double>& t) { return reduce(t, softmax(t, t.param(a)), w); }));
      record(grad_check({a}, [&](Tape<double>& t) { return reduce(t, gelu(t, t.param(a)), w); }));
      record(grad_check({a, g}, [&](Tape<double>& t) {
        auto gv = t.param(g);
        return reduce(t, layernorm(t, t.param(a), &gv, 1e-5), w);
      }));
    }
    {
      const auto V = dim(2, 6), d = dim(1, 5), n = dim(1, 7);
      auto table = random_param({V, d}, rng);
      std::vector<std::int32_t> ids(n);
      for (auto& id : ids) id = static_cast<std::int32_t>(rng.below(V));
      std::vector<std::size_t> rows{0, n - 1, 0};
      auto w = random_tensor({rows.size(), d}, rng);
      record(grad_check({table}, [&](Tape<double>& t) {
        auto e = embedding(t, t.param(table), std::span<const std::int32_t>(ids));
        return reduce(t, gather_rows(t, e, rows), w);
      }));
    }
    {
      const auto m = dim(1, 4), n = dim(3, 7);
      auto a = random_param({m, n}, rng), b = random_param({n, m}, rng);
      auto w = random_tensor({n, 1 + m + (m > 1 ? m - 1 : 0)}, rng);
      record(grad_check({a, b}, [&](Tape<double>& t) {
        std::vector<Var<double>> parts{slice_cols(t, t.param(b), 0, 1), transpose(t, t.param(a))};
        if (m > 1) parts.push_back(slice_cols(t, t.param(b), 1, m));
        return reduce(t, concat_cols(t, parts), w);
      }));
    }
    {
      const auto rows = dim(1, 6), heads = dim(1, 3), hd = 2 * dim(1, 3);
      auto x = random_param({rows, heads * hd}, rng);
      std::vector<std::int64_t> pos(rows);
      for (auto& p : pos) p = static_cast<std::int64_t>(rng.below(50));
      auto w = random_tensor({rows, heads * hd}, rng);
      record(grad_check({x}, [&](Tape<double>& t) { return reduce(t, rope(t, t.param(x), pos, heads, 10000.0), w); }));
    }
    {
      const auto B = dim(1, 2), L = dim(2, 5), H = dim(1, 2), hd = dim(1, 3);
      auto q = random_param({B * L, H * hd}, rng), k = random_param({B * L, H * hd}, rng),
           v = random_param({B * L, H * hd}, rng);
      AttentionMask mask{B, L, std::vector<std::uint8_t>(B * L * L, 1)};
      for (std::size_t i = 0; i < B * L * L; ++i) {
        if ((i / L) % L != i % L && rng.below(3) == 0) mask.allowed[i] = 0;
      }
      auto w = random_tensor({B * L, H * hd}, rng);
      record(grad_check({q, k, v}, [&](Tape<double>& t) {
        return reduce(t, attention(t, t.param(q), t.param(k), t.param(v), {B, L, H}, mask), w);
      }));
    }
    {
      const auto N = dim(2, 6), V = dim(2, 9);
      auto logits = random_param({N, V}, rng), pred = random_param({N, 1}, rng);
      std::vector<std::int32_t> targets(N);
      for (auto& tg : targets) tg = static_cast<std::int32_t>(rng.below(V));
      targets[0] = kIgnoreLabel;
      std::vector<double> reg(N);
      for (auto& r : reg) r = rng.normal();
      record(grad_check({logits}, [&](Tape<double>& t) { return cross_entropy(t, t.param(logits), targets); }));
      record(grad_check({pred}, [&](Tape<double>& t) { return mse_loss(t, t.param(pred), std::span<const double>(reg)); }));
    }
  }

  double model_worst = 0.0;
  std::size_t model_checks = 0;
  for (const bool tied : {true, false}) {
    ModelConfig c;
    c.vocab_size = 11;
    c.hidden_dim = 8;
    c.num_layers = 2;
    c.num_heads = 2;
    c.ffn_dim = 12;
    c.max_seq_len = 6;
    c.local_window = 2;
    c.global_every = 2;
    c.seed = 3;
    c.tie_embeddings = tied;
    c.linear_bias = !tied;
    auto w = init_model<double>(c);
    Rng rng(17);
    for (const auto& p : w.parameters()) {
      for (auto& x : p.tensor->data) x += 0.2 * rng.normal();
    }
    TokenBatch batch{2, 6, {2, 5, 8, 4, 9, 3, 2, 7, 6, 3, 0, 0}, {0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 1}};
    const std::vector<std::size_t> rows{1, 3, 4, 7, 8};
    const std::vector<std::int32_t> targets{5, 4, 10, 7, 1};
    std::vector<testing::Param64> params;
    for (const auto& p : w.parameters()) params.push_back(p.tensor);
    Tensor<double> pool_w({2 * 6 * 8});
    for (auto& x : pool_w.data) x = rng.normal();
    const auto r = grad_check(params, [&](Tape<double>& t) {
      auto h = encoder_forward(t, w, batch);
      auto logits = mlm_logits(t, w, gather_rows(t, h, rows));
      return add(t, cross_entropy(t, logits, targets), weighted_sum(t, h, pool_w));
    });
    model_worst = std::max(model_worst, r.max_rel_error);
    model_checks += r.checked;
  }
  const double secs = seconds_since(t0);
  return verdict(kernel_worst < 1e-4 && model_worst < 1e-3 && secs < 120.0,
                 "kernels max rel err " + fmt(kernel_worst, 3) + " over " + std::to_string(kernel_checks) +
                     " entries (< 1e-4); end-to-end " + fmt(model_worst, 3) + " over " + std::to_string(model_checks) +
                     " entries (< 1e-3); " + fmt(secs, 3) + " s (< 120)");
}

// ------------------------------------------------------------------ 6

Outcome mask_rates(const RunConfig& cfg, const Tokenizer& tok) {
  const auto docs = training_documents(cfg, cfg.corpus.train_docs);
  auto chunks = line_by_line_chunks(tok, docs, cfg.stage1.max_seq_len, cfg.stage1.add_cls_sep);
  std::vector<std::vector<std::int32_t>> seqs;
  std::size_t eligible_total = 0;
  for (auto& s : chunks.sequences) {
    if (eligible_total >= 100'000) break;
    for (auto id : s) eligible_total += is_special(id) ? 0 : 1;
    seqs.push_back(s);
  }
  const TokenBatch batch = pad_batch(seqs, kPadId);
  Rng rng(derive_seed(cfg.seed, 0x3A5Cull));
  const auto m = apply_mlm_mask(batch, cfg.stage1.masking, tok.vocab_size(), rng);
  double eligible = 0, selected = 0, masked = 0;
  for (std::size_t i = 0; i < batch.ids.size(); ++i) {
    if (batch.pad[i] != 0 || is_special(batch.ids[i])) continue;
    eligible += 1;
    selected += m.labels[i] != kIgnoreLabel ? 1 : 0;
    masked += m.input.ids[i] == kMaskId ? 1 : 0;
  }
  const double p = cfg.stage1.masking.probability, pm = p * cfg.stage1.masking.mask_fraction;
  const double s1 = std::sqrt(p * (1 - p) / eligible), s2 = std::sqrt(pm * (1 - pm) / eligible);
  const double fs = selected / eligible, fm = masked / eligible;
  return verdict(eligible >= 1e5 && std::abs(fs - p) <= 3 * s1 && std::abs(fm - pm) <= 3 * s2,
                 fmt(eligible) + " maskable tokens; corrupted " + fmt(fs) + " (" + fmt(p) + " +- " + fmt(3 * s1, 3) +
                     "), [MASK] " + fmt(fm) + " (" + fmt(pm) + " +- " + fmt(3 * s2, 3) + ")");
}

// ------------------------------------------------------------------ 7

Outcome metric_formulas() {
  std::vector<std::string> bad;
  auto check = [&](bool ok, const std::string& what) {
    if (!ok) bad.push_back(what);
  };
  const Embedding e0{1, 0, 0}, e1{0, 1, 0}, neg{-1, 0, 0};
  check(alignment({e0, e0}, {e0, e0}) == 0.0, "constant alignment");
  check(uniformity({e0, e0, e0}) == 0.0, "constant uniformity");
  check(std::abs(alignment({e0}, {e1}) - 2.0) < 1e-12, "orthogonal alignment");
  check(std::abs(uniformity({e0, neg}) - (-0.69281)) <= 1e-4, "antipodal uniformity");

  Rng rng(2024);
  std::size_t instances = 0;
  for (int trial = 0; trial < 100; ++trial) {
    SimilarityMatrix sim{50, 50, std::vector<double>(2500)};
    const bool ties = trial % 2 == 1;
    for (auto& v : sim.values) v = ties ? static_cast<double>(rng.below(8)) / 8.0 : rng.uniform() * 2.0 - 1.0;
    std::vector<std::size_t> rel(50);
    for (auto& r : rel) r = rng.below(50);
    std::vector<std::size_t> ranks(50);
    for (std::size_t q = 0; q < 50; ++q) {
      std::vector<std::size_t> order(50);
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return sim(q, a) != sim(q, b) ? sim(q, a) > sim(q, b) : a < b;
      });
      ranks[q] = static_cast<std::size_t>(std::find(order.begin(), order.end(), rel[q]) - order.begin()) + 1;
    }
    for (std::size_t k = 1; k <= 50; ++k) {
      double recall = 0.0, mrr = 0.0;
      for (std::size_t q = 0; q < 50; ++q) {
        if (ranks[q] <= k) {
          recall += 1.0;
          mrr += 1.0 / static_cast<double>(ranks[q]);
        }
      }
      const auto got = retrieval_scores(sim, rel, k);
      if (got.ranks != ranks || std::abs(got.recall - recall / 50.0) > 1e-12 || std::abs(got.mrr - mrr / 50.0) > 1e-12) {
        bad.push_back("retrieval trial " + std::to_string(trial) + " k=" + std::to_string(k));
      }
    }
    ++instances;
  }

  auto rel_ok = [](double got, double want) { return std::abs(got - want) <= 1e-6 * want; };
  const std::vector<double> zero(7, 0.0), ln4(5, std::log(4.0));
  check(rel_ok(pseudo_perplexity_from_losses(zero), 1.0), "pppl from zero losses");
  check(rel_ok(pseudo_perplexity_from_losses(ln4), 4.0), "pppl from ln 4 losses");
  ModelConfig mc;
  mc.vocab_size = 37;
  mc.hidden_dim = 16;
  mc.num_layers = 2;
  mc.num_heads = 2;
  mc.ffn_dim = 32;
  mc.local_window = 4;
  mc.global_every = 2;
  mc.max_seq_len = 32;
  auto uniform = init_model<float>(mc);
  std::fill(uniform.head_norm->data.begin(), uniform.head_norm->data.end(), 0.0f);
  std::fill(uniform.head_bias->data.begin(), uniform.head_bias->data.end(), 0.0f);
  std::vector<std::int32_t> ids{kClsId};
  for (int i = 0; i < 20; ++i) ids.push_back(static_cast<std::int32_t>(kNumSpecial + rng.below(mc.vocab_size - kNumSpecial)));
  ids.push_back(kSepId);
  Rng prng(5);
  const double pv = pseudo_perplexity(uniform, std::span<const std::int32_t>(ids), 100, prng);
  check(rel_ok(pv, static_cast<double>(mc.vocab_size)), "uniform model pppl = V");
  auto certain = uniform;
  certain.head_bias = std::make_shared<Tensor<float>>(*uniform.head_bias);
  std::vector<std::int32_t> same{kClsId, 9, 9, 9, 9, 9, 9, kSepId};
  certain.head_bias->data[9] = 1000.0f;
  const double p1 = pseudo_perplexity(certain, std::span<const std::int32_t>(same), 100, prng);
  check(rel_ok(p1, 1.0), "certain model pppl = 1");

  std::string detail = "alignment/uniformity analytic cases, " + std::to_string(instances) +
                       " random 50x50 retrieval instances (all k) vs full-sort oracle, pppl 1/4/V (got " + fmt(p1, 10) +
                       ", " + fmt(pseudo_perplexity_from_losses(ln4), 10) + ", " + fmt(pv, 10) + ")";
  if (!bad.empty()) detail += "; failed: " + bad.front() + (bad.size() > 1 ? " and " + std::to_string(bad.size() - 1) + " more" : "");
  return verdict(bad.empty(), detail);
}

// ------------------------------------------------------------------ 8

Outcome resume_equivalence(const RunConfig& cfg, const Tokenizer& tok) {
  TrainConfig tc = cfg.stage1;
  tc.total_steps = 200;
  const auto docs = training_documents(cfg, cfg.corpus.train_docs);
  auto data = std::make_shared<Sequences>(line_by_line_chunks(tok, docs, tc.max_seq_len, tc.add_cls_sep).sequences);
  const fs::path dir = fs::path(cfg.work_dir) / "resume";
  fs::create_directories(dir);
  std::vector<double> straight, resumed;
  {
    Trainer t(fresh_checkpoint(cfg.model, tc, tok.fingerprint()), data);
    for (int i = 0; i < 200; ++i) straight.push_back(t.step().loss);
    save_checkpoint(t.state(), dir / "straight.ckpt");
  }
  {
    Trainer t(fresh_checkpoint(cfg.model, tc, tok.fingerprint()), data);
    for (int i = 0; i < 100; ++i) resumed.push_back(t.step().loss);
    save_checkpoint(t.state(), dir / "half.ckpt");
  }
  {
    Trainer t(load_checkpoint(dir / "half.ckpt", tok.fingerprint()), data);
    for (int i = 0; i < 100; ++i) resumed.push_back(t.step().loss);
    save_checkpoint(t.state(), dir / "resumed.ckpt");
  }
  std::size_t differing = 0;
  for (std::size_t i = 0; i < straight.size(); ++i) differing += straight[i] == resumed[i] ? 0 : 1;
  const bool same_state = read_file(dir / "straight.ckpt") == read_file(dir / "resumed.ckpt");
  return verdict(differing == 0 && same_state,
                 "200 losses, " + std::to_string(differing) + " differ bitwise; final checkpoints " +
                     (same_state ? "byte-identical" : "DIFFER") + " (default model, loss " + fmt(straight.front()) +
                     " -> " + fmt(straight.back()) + ")");
}

// ------------------------------------------------------------------ 10

Outcome rope_invariants() {
  Rng rng(10);
  double worst_norm = 0.0, worst_shift = 0.0;
  auto dot = [](const Tensor<double>& a, const Tensor<double>& b) {
    return std::inner_product(a.data.begin(), a.data.end(), b.data.begin(), 0.0);
  };
  const std::size_t hd = 32;
  for (int i = 0; i < 1000; ++i) {
    const auto q = testing::random_tensor({1, 1, hd}, rng), k = testing::random_tensor({1, 1, hd}, rng);
    const auto p1 = static_cast<std::int64_t>(rng.below(512)), p2 = static_cast<std::int64_t>(rng.below(512));
    const auto shift = static_cast<std::int64_t>(rng.below(4096));
    const std::vector<std::int64_t> a{p1}, b{p2}, as{p1 + shift}, bs{p2 + shift};
    const auto rq = apply_rope(q, a, 10000.0);
    worst_norm = std::max(worst_norm, std::abs(std::sqrt(dot(rq, rq)) - std::sqrt(dot(q, q))));
    worst_shift = std::max(worst_shift, std::abs(dot(rq, apply_rope(k, b, 10000.0)) -
                                                 dot(apply_rope(q, as, 10000.0), apply_rope(k, bs, 10000.0))));
  }
  return verdict(worst_norm <= 1e-5 && worst_shift <= 1e-5,
                 "1000 random pairs, head dim " + std::to_string(hd) + ": max norm change " + fmt(worst_norm, 3) +
                     ", max dot change under translation " + fmt(worst_shift, 3) + " (both <= 1e-5)");
}

// ------------------------------------------------------------------ 4, 9, 5

struct DeskRun {
  RunConfig cfg;
  std::vector<MetricRecord> metrics;
  double stage1_seconds = 0.0;
};

std::vector<MetricRecord> read_metrics(const fs::path& p) {
  std::vector<MetricRecord> out;
  std::istringstream in(read_file(p));
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    out.push_back({j["step"], j["stage"], j["name"], j["value"]});
  }
  return out;
}

/// Means over consecutive 100-step windows of a metric sampled at arbitrary steps.
std::vector<double> window_means(const std::vector<MetricRecord>& series, std::int64_t width) {
  std::vector<double> sums, counts;
  for (const auto& r : series) {
    const auto w = static_cast<std::size_t>(r.step / width);
    if (w >= sums.size()) {
      sums.resize(w + 1, 0.0);
      counts.resize(w + 1, 0.0);
    }
    sums[w] += r.value;
    counts[w] += 1.0;
  }
  std::vector<double> out;
  for (std::size_t i = 0; i < sums.size(); ++i) {
    if (counts[i] > 0) out.push_back(sums[i] / counts[i]);
  }
  return out;
}

Outcome training_sanity(const DeskRun& run) {
  std::vector<MetricRecord> loss, acc, train;
  for (const auto& r : run.metrics) {
    if (r.name == "val_loss") loss.push_back(r);
    if (r.name == "val_accuracy") acc.push_back(r);
    if (r.name == "train_loss") train.push_back(r);
  }
  if (loss.empty() || acc.empty()) return {Status::Fail, "no validation metrics recorded"};
  const double lnv = std::log(static_cast<double>(run.cfg.model.vocab_size));
  const auto windows = window_means(loss, 100);
  std::size_t rises = 0;
  for (std::size_t i = 1; i < windows.size(); ++i) rises += windows[i] > windows[i - 1] ? 1 : 0;
  const auto train_windows = window_means(train, 100);
  std::size_t train_rises = 0;
  for (std::size_t i = 1; i < train_windows.size(); ++i) train_rises += train_windows[i] > train_windows[i - 1] ? 1 : 0;
  const double l0 = loss.front().value, l1 = loss.back().value, a0 = acc.front().value, a1 = acc.back().value;
  const bool ok = std::abs(l0 - lnv) < 0.5 && a0 < 0.01 && l1 < 4.0 && a1 > 0.25 && rises == 0 &&
                  run.stage1_seconds <= 1800.0;
  return verdict(ok, "val loss " + fmt(l0, 4) + " (ln V = " + fmt(lnv, 4) + ") -> " + fmt(l1, 4) + " (< 4.0), acc " +
                         fmt(a0, 3) + " -> " + fmt(a1, 4) + " (> 0.25), " + std::to_string(rises) + " rises across " +
                         std::to_string(windows.size()) + " 100-step val windows (train-loss windows: " +
                         std::to_string(train_rises) + " rises), stage 1 took " + fmt(run.stage1_seconds / 60.0, 3) +
                         " min (<= 30)");
}

Outcome fill_mask_probe(const DeskRun& run) {
  const Json j = cmd_fill_mask(run.cfg, run.cfg.final_checkpoint(1), {});
  const double acc = j["results"]["top1_accuracy"];
  const std::size_t n = j["results"]["facts"];
  return verdict(n == 50 && acc > 0.9, "top-1 " + fmt(acc, 4) + " on " + std::to_string(n) + " facts (> 0.9)");
}

Outcome context_extension(const DeskRun& run) {
  const auto t0 = Clock::now();
  cmd_train(run.cfg, TrainOptions{2});
  const double train_secs = seconds_since(t0);
  const Json j = cmd_analyze_pppl(run.cfg, {run.cfg.final_checkpoint(1), run.cfg.final_checkpoint(2)});
  const auto& cks = j["results"]["checkpoints"];
  bool finite = true;
  std::string table;
  for (std::size_t b = 0; b < cks[0]["bins"].size(); ++b) {
    const auto& b1 = cks[0]["bins"][b];
    const auto& b2 = cks[1]["bins"][b];
    table += " (" + std::to_string(b1["lo"].get<std::size_t>()) + "," + std::to_string(b1["hi"].get<std::size_t>()) +
             "] n=" + std::to_string(b1["count"].get<std::size_t>()) + ":";
    for (const auto* bin : {&b1, &b2}) {
      const bool ok = !(*bin)["mean"].is_null() && std::isfinite((*bin)["mean"].get<double>());
      finite = finite && ok;
      table += " " + (ok ? fmt((*bin)["mean"].get<double>(), 5) : std::string("missing"));
    }
  }
  const auto& last1 = cks[0]["bins"].back()["mean"];
  const auto& last2 = cks[1]["bins"].back()["mean"];
  const bool lower = finite && last2.get<double>() < last1.get<double>();
  return verdict(finite && lower, "stage-1 vs stage-2 mean pppl per bin" + table + "; longest bin " +
                                      (lower ? "lower" : "NOT lower") + " after extension (stage 2 took " +
                                      fmt(train_secs / 60.0, 3) + " min)");
}

}  // namespace

int main() {
  const auto t0 = Clock::now();
  RunConfig cfg = load_run_config((kSource / "configs/desk.json").string(),
                                  {"work_dir=\"" + (fs::path(MBERT_BINARY_DIR) / "acceptance_run").string() + "\"",
                                   "analysis.retrieval_data=\"" + kFixture.string() + "\""});
  cfg.threads = std::max(1u, std::thread::hardware_concurrency());
  fs::remove_all(cfg.work_dir);
  std::cout << "acceptance run in " << cfg.work_dir << " (" << cfg.threads << " threads)" << std::endl;

  run(10, "RoPE invariants", rope_invariants);
  run(7, "metric formulas", metric_formulas);
  run(3, "gradient integrity", gradient_integrity);
  run(1, "MIRACL baselines", miracl_baselines);
  run(2, "retrieval pair count", miracl_pair_count);

  cmd_tokenizer_train(cfg);
  const Tokenizer tok = load_run_tokenizer(cfg);
  run(6, "mask-rate statistics", [&] { return mask_rates(cfg, tok); });
  run(8, "resume equivalence", [&] { return resume_equivalence(cfg, tok); });

  DeskRun desk{cfg, {}, 0.0};
  bool trained = false;
  try {
    const auto t1 = Clock::now();
    cmd_train(cfg, TrainOptions{1});
    desk.stage1_seconds = seconds_since(t1);
    desk.metrics = read_metrics(cfg.reports() / "stage1_metrics.jsonl");
    trained = true;
  } catch (const std::exception& e) {
    std::cout << "stage-1 desk run failed: " << e.what() << std::endl;
  }
  auto needs_desk = [&](const std::function<Outcome(const DeskRun&)>& f) {
    return [&, f] { return trained ? f(desk) : Outcome{Status::Fail, "stage-1 desk run did not complete"}; };
  };
  run(4, "training sanity", needs_desk(training_sanity));
  run(9, "fill-mask memorization", needs_desk(fill_mask_probe));
  run(5, "context-extension trend", needs_desk(context_extension));

  std::cout << "total " << fmt(seconds_since(t0) / 60.0, 3) << " min, " << failures << " failing" << std::endl;
  return failures == 0 ? 0 : 1;
}
