#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <exception>
#include <functional>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "mbert/autograd.hpp"
#include "mbert/errors.hpp"
#include "mbert/io.hpp"
#include "mbert/kernels.hpp"
#include "mbert/model.hpp"
#include "mbert/rng.hpp"
#include "mbert/text.hpp"
#include "mbert/tokenizer.hpp"

namespace mbert {

/// Runs fn(i) for i in [0, n) on up to `threads` workers with a static partition.
/// Each index is handled exactly once, so results written by index do not depend
/// on the thread count. The first exception thrown by any worker is rethrown.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < n; i += threads) fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

/// Same weights with a different admitted input length. RoPE has no position table,
/// so a stage-1 model can be scored on sequences longer than it was trained on.
template <class T>
EncoderWeights<T> with_max_seq_len(const EncoderWeights<T>& w, std::size_t max_seq_len) {
  EncoderWeights<T> out = w;
  out.config.max_seq_len = max_seq_len;
  return out;
}

// ---------------------------------------------------------------------------------
// Pseudo-perplexity

/// exp of the mean loss.
inline double pseudo_perplexity_from_losses(std::span<const double> losses) {
  if (losses.empty()) throw std::invalid_argument("pseudo_perplexity: no losses");
  double sum = 0.0;
  for (double l : losses) sum += l;
  return std::exp(sum / static_cast<double>(losses.size()));
}

/// Cross-entropy of the original token at each listed position when that single
/// position is replaced by [MASK].
template <class T>
std::vector<double> single_mask_losses(const EncoderWeights<T>& w, std::span<const std::int32_t> ids,
                                       std::span<const std::size_t> positions, std::size_t batch_size = 16) {
  std::vector<double> out(positions.size());
  for (std::size_t s = 0; s < positions.size(); s += batch_size) {
    const std::size_t e = std::min(positions.size(), s + batch_size);
    std::vector<std::vector<std::int32_t>> seqs;
    std::vector<std::size_t> rows;
    std::vector<std::int32_t> targets;
    for (std::size_t k = s; k < e; ++k) {
      std::vector<std::int32_t> seq(ids.begin(), ids.end());
      targets.push_back(seq.at(positions[k]));
      seq[positions[k]] = kMaskId;
      rows.push_back((k - s) * ids.size() + positions[k]);
      seqs.push_back(std::move(seq));
    }
    Tape<T> tape(false);
    auto hidden = encoder_forward(tape, w, pad_batch(seqs, kPadId));
    auto logits = mlm_logits(tape, w, gather_rows(tape, hidden, rows));
    const auto& L = logits.value();
    const std::size_t V = L.cols();
    for (std::size_t k = 0; k < e - s; ++k) {
      const T* row = L.data.data() + k * V;
      const double mx = static_cast<double>(*std::max_element(row, row + V));
      double z = 0.0;
      for (std::size_t v = 0; v < V; ++v) z += std::exp(static_cast<double>(row[v]) - mx);
      out[s + k] = mx + std::log(z) - static_cast<double>(row[targets[k]]);
    }
  }
  return out;
}

/// Samples `n_samples` non-special positions with replacement, masks each one on its
/// own and returns exp of the mean cross-entropy of the original tokens. Repeated
/// positions are scored once and weighted by multiplicity.
template <class T>
double pseudo_perplexity(const EncoderWeights<T>& w, std::span<const std::int32_t> ids, std::size_t n_samples,
                         Rng& rng) {
  if (n_samples == 0) throw std::invalid_argument("pseudo_perplexity: n_samples must be >= 1");
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (!is_special(ids[i])) candidates.push_back(i);
  }
  if (candidates.empty()) throw std::invalid_argument("pseudo_perplexity: sequence has no non-special token");
  std::map<std::size_t, std::size_t> multiplicity;
  for (std::size_t k = 0; k < n_samples; ++k) ++multiplicity[candidates[rng.below(candidates.size())]];
  std::vector<std::size_t> positions;
  for (const auto& [p, m] : multiplicity) positions.push_back(p);
  const auto distinct = single_mask_losses(w, ids, positions);
  std::vector<double> losses;
  std::size_t k = 0;
  for (const auto& [p, m] : multiplicity) losses.insert(losses.end(), m, distinct[k++]);
  return pseudo_perplexity_from_losses(losses);
}

/// Length bins over token counts: bin 0 is [e0, e1], bin k is (e_k, e_{k+1}].
struct LengthBins {
  std::vector<std::size_t> edges;

  std::size_t size() const { return edges.size() < 2 ? 0 : edges.size() - 1; }

  void validate() const {
    if (edges.size() < 2) throw ConfigError("length bins: need at least two edges");
    for (std::size_t i = 1; i < edges.size(); ++i) {
      if (edges[i] <= edges[i - 1]) throw ConfigError("length bins: edges must be strictly increasing");
    }
  }

  /// Bin index, or -1 when the length falls outside every bin.
  int find(std::size_t len) const {
    if (size() == 0 || len < edges.front() || len > edges.back()) return -1;
    if (len <= edges[1]) return 0;
    for (std::size_t k = 1; k < size(); ++k) {
      if (len > edges[k] && len <= edges[k + 1]) return static_cast<int>(k);
    }
    return -1;
  }

  /// {0, 1024, 2048, 4096, 8192} rescaled so the last edge is `max_len`.
  static LengthBins scaled(std::size_t max_len) {
    if (max_len < 8) throw ConfigError("length bins: max_len must be >= 8");
    return {{0, max_len / 8, max_len / 4, max_len / 2, max_len}};
  }
};

struct SequencePpl {
  std::size_t index = 0;   // position in the input corpus
  std::size_t length = 0;  // tokens scored, including [CLS]/[SEP]
  int bin = -1;
  double ppl = 0.0;
};

struct BinPpl {
  std::size_t lo = 0, hi = 0;
  std::size_t candidates = 0;
  std::size_t count = 0;
  double mean = 0.0;  // NaN when the bin is empty
};

struct PseudoPplReport {
  std::vector<SequencePpl> sequences;
  std::vector<BinPpl> bins;
};

struct PseudoPplOptions {
  LengthBins bins;
  std::size_t per_bin = 500;
  std::size_t n_samples = 100;
  std::uint64_t seed = 0;
  std::size_t max_len = 0;  // 0: the model's max_seq_len
  std::size_t threads = 1;
};

/// Tokenizes each text as [CLS] text [SEP] (truncated to max_len), draws up to
/// `per_bin` sequences per length bin and averages their pseudo-perplexities.
/// Sequence i uses its own RNG stream derived from (seed, i).
template <class T>
PseudoPplReport binned_pseudo_ppl(const std::vector<std::string>& texts, const Tokenizer& tok,
                                  const EncoderWeights<T>& w, const PseudoPplOptions& opt) {
  opt.bins.validate();
  if (opt.per_bin == 0) throw ConfigError("binned_pseudo_ppl: per_bin must be >= 1");
  const std::size_t max_len = opt.max_len == 0 ? w.config.max_seq_len : opt.max_len;
  const EncoderWeights<T> model = with_max_seq_len(w, std::max(max_len, w.config.max_seq_len));

  std::vector<std::vector<std::int32_t>> seqs(texts.size());
  std::vector<std::vector<std::size_t>> members(opt.bins.size());
  for (std::size_t i = 0; i < texts.size(); ++i) {
    auto chunk = line_by_line_chunks(tok, {texts[i]}, max_len, true).sequences;
    if (chunk.empty()) continue;
    seqs[i] = std::move(chunk.front());
    const int b = opt.bins.find(seqs[i].size());
    if (b >= 0) members[static_cast<std::size_t>(b)].push_back(i);
  }

  PseudoPplReport report;
  Rng pick(derive_seed(opt.seed, 0xB125ull));
  for (std::size_t b = 0; b < opt.bins.size(); ++b) {
    auto& m = members[b];
    report.bins.push_back({opt.bins.edges[b], opt.bins.edges[b + 1], m.size(), 0, std::nan("")});
    const std::size_t take = std::min(opt.per_bin, m.size());
    for (std::size_t k = 0; k < take; ++k) std::swap(m[k], m[k + pick.below(m.size() - k)]);
    m.resize(take);
    std::sort(m.begin(), m.end());
    for (auto i : m) report.sequences.push_back({i, seqs[i].size(), static_cast<int>(b), 0.0});
  }

  parallel_for(report.sequences.size(), opt.threads, [&](std::size_t k) {
    auto& s = report.sequences[k];
    Rng rng(derive_seed(opt.seed, s.index));
    s.ppl = pseudo_perplexity(model, std::span<const std::int32_t>(seqs[s.index]), opt.n_samples, rng);
  });

  for (auto& bin : report.bins) bin.mean = 0.0;
  for (const auto& s : report.sequences) {
    auto& bin = report.bins[static_cast<std::size_t>(s.bin)];
    bin.mean += s.ppl;
    ++bin.count;
  }
  for (auto& bin : report.bins) bin.mean = bin.count == 0 ? std::nan("") : bin.mean / static_cast<double>(bin.count);
  return report;
}

// ---------------------------------------------------------------------------------
// Embeddings, alignment and uniformity

using Embedding = std::vector<float>;
using TextEmbedder = std::function<std::vector<Embedding>(const std::vector<std::string>&)>;

/// Text to unit vector: [CLS] text [SEP] truncated to `max_len`, encoded, mean-pooled
/// over all non-pad positions and L2-normalised.
template <class T = float>
class EmbedFunction {
 public:
  EmbedFunction(EncoderWeights<T> weights, Tokenizer tok, std::size_t max_len = 0, std::size_t batch_size = 32,
                std::size_t threads = 1)
      : weights_(std::move(weights)),
        tok_(std::move(tok)),
        max_len_(max_len == 0 ? weights_.config.max_seq_len : max_len),
        batch_size_(std::max<std::size_t>(1, batch_size)),
        threads_(threads) {
    if (max_len_ > weights_.config.max_seq_len) weights_ = with_max_seq_len(weights_, max_len_);
    if (max_len_ < 3) throw ConfigError("EmbedFunction: max_len must be >= 3");
  }

  std::size_t max_len() const { return max_len_; }

  std::vector<std::int32_t> encode(const std::string& text) const {
    auto ids = tok_.encode(text);
    if (ids.size() > max_len_ - 2) ids.resize(max_len_ - 2);
    ids.insert(ids.begin(), kClsId);
    ids.push_back(kSepId);
    return ids;
  }

  std::vector<Embedding> operator()(const std::vector<std::string>& texts) const {
    std::vector<Embedding> out(texts.size());
    const std::size_t batches = (texts.size() + batch_size_ - 1) / batch_size_;
    parallel_for(batches, threads_, [&](std::size_t b) {
      const std::size_t s = b * batch_size_, e = std::min(texts.size(), s + batch_size_);
      std::vector<std::vector<std::int32_t>> seqs;
      for (std::size_t i = s; i < e; ++i) seqs.push_back(encode(texts[i]));
      const TokenBatch batch = pad_batch(seqs, kPadId);
      Tape<T> tape(false);
      const auto hidden = encoder_forward(tape, weights_, batch);
      auto pooled = mean_pool(hidden.value(), batch, true);
      for (std::size_t i = s; i < e; ++i) out[i] = std::move(pooled[i - s].vector);
    });
    return out;
  }

  Embedding operator()(const std::string& text) const { return (*this)(std::vector<std::string>{text}).front(); }

 private:
  EncoderWeights<T> weights_;
  Tokenizer tok_;
  std::size_t max_len_;
  std::size_t batch_size_;
  std::size_t threads_;
};

inline double squared_distance(const Embedding& a, const Embedding& b) {
  if (a.size() != b.size()) throw ShapeError("squared_distance", {Shape{a.size()}, Shape{b.size()}});
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    s += d * d;
  }
  return s;
}

inline double cosine_similarity(const Embedding& a, const Embedding& b) {
  if (a.size() != b.size()) throw ShapeError("cosine_similarity", {Shape{a.size()}, Shape{b.size()}});
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += static_cast<double>(a[i]) * b[i];
    aa += static_cast<double>(a[i]) * a[i];
    bb += static_cast<double>(b[i]) * b[i];
  }
  if (aa == 0.0 || bb == 0.0) return 0.0;
  return std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
}

/// Mean squared distance between the embeddings of each positive pair.
inline double alignment(const std::vector<Embedding>& x, const std::vector<Embedding>& x_pos) {
  if (x.empty()) throw std::invalid_argument("alignment: empty pair set");
  if (x.size() != x_pos.size()) throw ShapeError("alignment", {Shape{x.size()}, Shape{x_pos.size()}});
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += squared_distance(x[i], x_pos[i]);
  return s / static_cast<double>(x.size());
}

/// log E exp(-2 ||f(x) - f(y)||^2). Up to `exhaustive_limit` samples every ordered
/// pair (x = y included) is used; beyond that `sampled_pairs` index pairs are drawn
/// uniformly with replacement from a seeded stream.
inline double uniformity(const std::vector<Embedding>& xs, std::uint64_t seed = 0, std::size_t exhaustive_limit = 2000,
                         std::size_t sampled_pairs = 1'000'000) {
  if (xs.size() < 2) throw std::invalid_argument("uniformity: need at least 2 samples");
  double sum = 0.0;
  std::size_t n = 0;
  if (xs.size() <= exhaustive_limit) {
    for (std::size_t i = 0; i < xs.size(); ++i) {
      for (std::size_t j = 0; j < xs.size(); ++j) sum += std::exp(-2.0 * squared_distance(xs[i], xs[j]));
    }
    n = xs.size() * xs.size();
  } else {
    Rng rng(seed);
    for (std::size_t k = 0; k < sampled_pairs; ++k) {
      const auto i = rng.below(xs.size()), j = rng.below(xs.size());
      sum += std::exp(-2.0 * squared_distance(xs[i], xs[j]));
    }
    n = sampled_pairs;
  }
  return std::log(sum / static_cast<double>(n));
}

inline double alignment(const std::vector<std::pair<std::string, std::string>>& pairs, const TextEmbedder& f) {
  std::vector<std::string> a, b;
  for (const auto& [x, y] : pairs) {
    a.push_back(x);
    b.push_back(y);
  }
  if (a.empty()) throw std::invalid_argument("alignment: empty pair set");
  return alignment(f(a), f(b));
}

inline double uniformity(const std::vector<std::string>& samples, const TextEmbedder& f, std::uint64_t seed = 0) {
  if (samples.size() < 2) throw std::invalid_argument("uniformity: need at least 2 samples");
  return uniformity(f(samples), seed);
}

struct Histogram {
  double lo = -1.0, hi = 1.0;
  std::vector<std::size_t> counts;

  std::size_t total() const { return std::accumulate(counts.begin(), counts.end(), std::size_t{0}); }
  double bin_lo(std::size_t k) const { return lo + (hi - lo) * static_cast<double>(k) / static_cast<double>(counts.size()); }
  double bin_hi(std::size_t k) const { return bin_lo(k + 1); }
};

/// Uniform bins over [-1, 1]; a similarity of exactly 1 lands in the top bin.
inline Histogram similarity_histogram(std::span<const double> similarities, std::size_t n_bins) {
  if (n_bins == 0) throw ConfigError("similarity_histogram: n_bins must be >= 1");
  Histogram h;
  h.counts.assign(n_bins, 0);
  for (double s : similarities) {
    const double c = std::clamp(s, -1.0, 1.0);
    auto k = static_cast<std::size_t>((c + 1.0) / 2.0 * static_cast<double>(n_bins));
    ++h.counts[std::min(k, n_bins - 1)];
  }
  return h;
}

inline Histogram similarity_histogram(const std::vector<std::pair<std::string, std::string>>& pairs,
                                      const TextEmbedder& f, std::size_t n_bins) {
  std::vector<std::string> a, b;
  for (const auto& [x, y] : pairs) {
    a.push_back(x);
    b.push_back(y);
  }
  std::vector<double> sims;
  if (!pairs.empty()) {
    const auto ea = f(a), eb = f(b);
    for (std::size_t i = 0; i < ea.size(); ++i) sims.push_back(cosine_similarity(ea[i], eb[i]));
  }
  return similarity_histogram(sims, n_bins);
}

// ---------------------------------------------------------------------------------
// Retrieval

/// One relevance-labelled query with its judged passages.
struct RetrievalInstance {
  std::string query;
  std::vector<std::string> positives;
  std::vector<std::string> negatives;
};

/// JSONL rows shaped like the MIRACL release: "query", "positive_passages" and
/// "negative_passages", where a passage is an object with "text" or a plain string.
inline std::vector<RetrievalInstance> parse_retrieval_jsonl(const std::string& content) {
  std::vector<RetrievalInstance> out;
  std::size_t line_no = 0, start = 0;
  auto passages = [](const nlohmann::json& j, const char* key) {
    std::vector<std::string> v;
    if (!j.contains(key)) return v;
    for (const auto& p : j.at(key)) v.push_back(p.is_string() ? p.get<std::string>() : p.at("text").get<std::string>());
    return v;
  };
  while (start < content.size()) {
    auto end = content.find('\n', start);
    if (end == std::string::npos) end = content.size();
    const std::string line = content.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      out.push_back({j.value("query", std::string{}), passages(j, "positive_passages"), passages(j, "negative_passages")});
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("retrieval jsonl line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

inline std::vector<RetrievalInstance> read_retrieval_jsonl(const std::string& path) {
  return parse_retrieval_jsonl(read_file(path));
}

struct RetrievalTask {
  std::vector<std::string> queries;
  std::vector<std::string> corpus;
  std::vector<std::size_t> relevance;  // query index -> corpus index
  std::size_t passages_seen = 0;
  std::size_t passages_skipped = 0;  // fewer than two sentences
};

/// Random pairs are drawn i.i.d. from every query and corpus sentence.
struct PairSet {
  std::vector<std::pair<std::string, std::string>> positive;
  std::vector<std::pair<std::string, std::string>> random;
};

/// Every positive passage that splits into at least two sentences contributes one
/// pair: its first sentence joins the query set and its second the corpus. With a
/// seed, a random ordered pair of distinct sentences is used instead.
inline RetrievalTask build_retrieval_task(const std::vector<RetrievalInstance>& instances,
                                          std::optional<std::uint64_t> seed = std::nullopt) {
  RetrievalTask task;
  std::optional<Rng> rng;
  if (seed) rng.emplace(*seed);
  for (const auto& inst : instances) {
    for (const auto& passage : inst.positives) {
      ++task.passages_seen;
      const auto sentences = split_sentences(passage);
      if (sentences.size() < 2) {
        ++task.passages_skipped;
        continue;
      }
      std::size_t q = 0, c = 1;
      if (rng) {
        q = rng->below(sentences.size());
        c = rng->below(sentences.size() - 1);
        if (c >= q) ++c;
      }
      task.relevance.push_back(task.corpus.size());
      task.queries.push_back(sentences[q]);
      task.corpus.push_back(sentences[c]);
    }
  }
  if (task.queries.empty()) {
    throw std::invalid_argument("build_retrieval_task: no usable instance (" + std::to_string(task.passages_skipped) +
                                " passages skipped)");
  }
  return task;
}

inline PairSet build_pair_set(const RetrievalTask& task, std::size_t n_random, std::uint64_t seed) {
  PairSet p;
  for (std::size_t i = 0; i < task.queries.size(); ++i) p.positive.emplace_back(task.queries[i], task.corpus[task.relevance[i]]);
  std::vector<const std::string*> pool;
  for (const auto& s : task.queries) pool.push_back(&s);
  for (const auto& s : task.corpus) pool.push_back(&s);
  Rng rng(seed);
  for (std::size_t k = 0; k < n_random; ++k) {
    const auto i = rng.below(pool.size()), j = rng.below(pool.size());
    p.random.emplace_back(*pool[i], *pool[j]);
  }
  return p;
}

struct RetrievalScores {
  double recall = 0.0;
  double mrr = 0.0;
  std::vector<std::size_t> ranks;  // 1-based rank of each query's relevant entry
};

/// Row-major [queries x corpus] similarity matrix.
struct SimilarityMatrix {
  std::size_t rows = 0, cols = 0;
  std::vector<double> values;

  double operator()(std::size_t q, std::size_t c) const { return values[q * cols + c]; }
};

/// Ranks corpus entries by descending similarity, ties broken by lower corpus index.
inline RetrievalScores retrieval_scores(const SimilarityMatrix& sim, const std::vector<std::size_t>& relevance,
                                        std::size_t k = 10) {
  if (k == 0) throw std::invalid_argument("retrieval_scores: k must be >= 1");
  if (sim.values.size() != sim.rows * sim.cols || relevance.size() != sim.rows) {
    throw ShapeError("retrieval_scores", {Shape{sim.rows, sim.cols}, Shape{relevance.size()}});
  }
  RetrievalScores r;
  if (sim.rows == 0) return r;
  for (std::size_t q = 0; q < sim.rows; ++q) {
    const std::size_t rel = relevance[q];
    if (rel >= sim.cols) throw ShapeError("retrieval_scores", {Shape{sim.rows, sim.cols}}, "relevance index out of range");
    const double target = sim(q, rel);
    std::size_t rank = 1;
    for (std::size_t c = 0; c < sim.cols; ++c) {
      const double v = sim(q, c);
      if (v > target || (v == target && c < rel)) ++rank;
    }
    r.ranks.push_back(rank);
    if (rank <= k) {
      r.recall += 1.0;
      r.mrr += 1.0 / static_cast<double>(rank);
    }
  }
  r.recall /= static_cast<double>(sim.rows);
  r.mrr /= static_cast<double>(sim.rows);
  return r;
}

using PairSimilarity = std::function<double(const std::string&, const std::string&)>;

inline SimilarityMatrix similarity_matrix(const std::vector<std::string>& queries, const std::vector<std::string>& corpus,
                                          const PairSimilarity& sim, std::size_t threads = 1) {
  SimilarityMatrix m{queries.size(), corpus.size(), std::vector<double>(queries.size() * corpus.size())};
  parallel_for(queries.size(), threads, [&](std::size_t q) {
    for (std::size_t c = 0; c < corpus.size(); ++c) m.values[q * corpus.size() + c] = sim(queries[q], corpus[c]);
  });
  return m;
}

/// Cosine similarities between embedded queries and corpus entries.
inline SimilarityMatrix similarity_matrix(const std::vector<std::string>& queries, const std::vector<std::string>& corpus,
                                          const TextEmbedder& f) {
  const auto eq = f(queries), ec = f(corpus);
  SimilarityMatrix m{queries.size(), corpus.size(), std::vector<double>(queries.size() * corpus.size())};
  for (std::size_t q = 0; q < eq.size(); ++q) {
    for (std::size_t c = 0; c < ec.size(); ++c) m.values[q * ec.size() + c] = cosine_similarity(eq[q], ec[c]);
  }
  return m;
}

// ---------------------------------------------------------------------------------
// Fill-mask and length histograms

struct FillCandidate {
  std::int32_t id = 0;
  std::string token;
  double probability = 0.0;
};

inline constexpr const char* kMaskMarker = "[MASK]";

/// Builds [CLS] left [MASK] right [SEP]. A space directly before the marker belongs
/// to the masked slot, matching how the tokenizer attaches spaces to the next word.
inline std::vector<std::int32_t> fill_mask_input(const Tokenizer& tok, const std::string& text,
                                                 const std::string& marker = kMaskMarker) {
  const auto at = text.find(marker);
  if (at == std::string::npos) throw std::invalid_argument("fill_mask: no " + marker + " marker in text");
  if (text.find(marker, at + marker.size()) != std::string::npos) {
    throw std::invalid_argument("fill_mask: more than one " + marker + " marker in text");
  }
  std::string left = text.substr(0, at);
  if (!left.empty() && left.back() == ' ') left.pop_back();
  const auto l = tok.encode(left), r = tok.encode(text.substr(at + marker.size()));
  std::vector<std::int32_t> ids{kClsId};
  ids.insert(ids.end(), l.begin(), l.end());
  ids.push_back(kMaskId);
  ids.insert(ids.end(), r.begin(), r.end());
  ids.push_back(kSepId);
  return ids;
}

/// Full softmax over the vocabulary at the masked position, returned as the `top_k`
/// most probable tokens (ties by lower id). top_k = 0 returns the whole vocabulary.
template <class T>
std::vector<FillCandidate> fill_mask(const EncoderWeights<T>& w, const Tokenizer& tok, const std::string& text,
                                     std::size_t top_k = 5, const std::string& marker = kMaskMarker) {
  const auto ids = fill_mask_input(tok, text, marker);
  const auto pos = static_cast<std::size_t>(std::find(ids.begin(), ids.end(), kMaskId) - ids.begin());
  Tape<T> tape(false);
  auto hidden = encoder_forward(tape, w, pad_batch({ids}, kPadId));
  const std::size_t row_idx[1] = {pos};
  auto logits = mlm_logits(tape, w, gather_rows(tape, hidden, std::span<const std::size_t>(row_idx)));
  const auto& L = logits.value();
  const std::size_t V = L.cols();
  const double mx = static_cast<double>(*std::max_element(L.data.begin(), L.data.end()));
  std::vector<double> p(V);
  double z = 0.0;
  for (std::size_t v = 0; v < V; ++v) z += (p[v] = std::exp(static_cast<double>(L.data[v]) - mx));
  for (auto& x : p) x /= z;
  std::vector<std::int32_t> order(V);
  std::iota(order.begin(), order.end(), 0);
  const std::size_t k = top_k == 0 ? V : std::min(top_k, V);
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](std::int32_t a, std::int32_t b) { return p[a] > p[b] || (p[a] == p[b] && a < b); });
  std::vector<FillCandidate> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back({order[i], tok.token_text(order[i]), p[order[i]]});
  return out;
}

struct LengthHistogram {
  LengthBins bins;
  std::vector<std::size_t> counts;
  std::size_t below = 0, above = 0;  // lengths outside every bin

  std::size_t total() const { return std::accumulate(counts.begin(), counts.end(), below + above); }
};

inline LengthHistogram length_histogram(std::span<const std::size_t> lengths, const LengthBins& bins) {
  bins.validate();
  LengthHistogram h{bins, std::vector<std::size_t>(bins.size(), 0)};
  for (auto n : lengths) {
    const int b = bins.find(n);
    if (b >= 0) {
      ++h.counts[static_cast<std::size_t>(b)];
    } else if (n < bins.edges.front()) {
      ++h.below;
    } else {
      ++h.above;
    }
  }
  return h;
}

/// Token counts (no special tokens) of each text.
inline LengthHistogram length_histogram(const std::vector<std::string>& corpus, const Tokenizer& tok,
                                        const LengthBins& bins) {
  std::vector<std::size_t> lengths;
  for (const auto& t : corpus) lengths.push_back(tok.encode(t).size());
  return length_histogram(lengths, bins);
}

}  // namespace mbert
