#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "mbert/errors.hpp"
#include "mbert/rng.hpp"

namespace mbert {

/// Document length target range in whitespace-separated units, [lo, hi].
struct LengthBin {
  std::size_t lo = 0;
  std::size_t hi = 0;
  double weight = 1.0;
};

/// Declarative description of the synthetic pretraining corpus. Documents mix
/// topic-coherent filler sentences with "<entity> maps to <value> ." facts. A sentence
/// slot may instead restate an earlier sentence of the same document, so long documents
/// carry dependencies that span their whole length.
struct SynthSpec {
  std::size_t topics = 64;
  std::size_t nouns_per_topic = 32;
  std::size_t verbs_per_topic = 12;
  std::size_t adjectives_per_topic = 12;
  std::size_t num_facts = 50;
  std::size_t num_values = 16;
  double fact_rate = 0.6;       // probability that a sentence slot holds a fact
  double verb_affinity = 0.8;   // probability that a noun takes its preferred verb
  double repeat_rate = 0.3;     // probability that a slot restates an earlier sentence of the document
  std::vector<LengthBin> bins{{1, 64, 0.25}, {65, 128, 0.25}, {129, 256, 0.25}, {257, 511, 0.25}};

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("SynthSpec: " + m); };
    if (topics == 0 || nouns_per_topic == 0 || verbs_per_topic == 0 || adjectives_per_topic == 0) {
      fail("topic vocabulary sizes must be positive");
    }
    if (num_values == 0 && num_facts > 0) fail("num_values must be positive when facts exist");
    if (!(fact_rate >= 0.0 && fact_rate <= 1.0)) fail("fact_rate must be in [0, 1]");
    if (!(verb_affinity >= 0.0 && verb_affinity <= 1.0)) fail("verb_affinity must be in [0, 1]");
    if (!(repeat_rate >= 0.0 && repeat_rate < 1.0)) fail("repeat_rate must be in [0, 1)");
    if (bins.empty()) fail("at least one length bin is required");
    for (const auto& b : bins) {
      if (b.hi < b.lo + kMaxSentence || b.lo == 0 || !(b.weight > 0.0)) {
        fail("each bin needs lo >= 1, hi - lo >= " + std::to_string(kMaxSentence) + " and positive weight");
      }
    }
  }

  static constexpr std::size_t kMaxSentence = 7;
};

struct Fact {
  std::string entity;
  std::string value;

  std::string sentence() const { return entity + " maps to " + value + " ."; }
  std::string cloze(const std::string& marker = "[MASK]") const { return entity + " maps to " + marker + " ."; }
};

/// Deterministic generator: document i depends only on (spec, seed, i).
class SyntheticCorpus {
 public:
  SyntheticCorpus(SynthSpec spec, std::uint64_t seed) : spec_(std::move(spec)), seed_(seed) {
    spec_.validate();
    Rng rng(derive_seed(seed_, 0xC0FFEEull));
    std::set<std::string> used{"the", "maps", "to", "a"};
    auto fresh = [&](std::size_t syllables) {
      static const char* kOnsets[] = {"b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "tr"};
      static const char* kVowels[] = {"a", "e", "i", "o", "u", "ai", "ou"};
      for (;;) {
        std::string w;
        for (std::size_t s = 0; s < syllables; ++s) {
          w += kOnsets[rng.below(std::size(kOnsets))];
          w += kVowels[rng.below(std::size(kVowels))];
        }
        if (used.insert(w).second) return w;
      }
    };
    topics_.resize(spec_.topics);
    for (auto& t : topics_) {
      for (std::size_t i = 0; i < spec_.nouns_per_topic; ++i) t.nouns.push_back(fresh(2));
      for (std::size_t i = 0; i < spec_.verbs_per_topic; ++i) t.verbs.push_back(fresh(2) + "s");
      for (std::size_t i = 0; i < spec_.adjectives_per_topic; ++i) t.adjectives.push_back(fresh(2) + "n");
      for (std::size_t i = 0; i < spec_.nouns_per_topic; ++i) t.preferred_verb.push_back(rng.below(spec_.verbs_per_topic));
    }
    std::vector<std::string> values;
    for (std::size_t i = 0; i < spec_.num_values; ++i) values.push_back(fresh(1) + "x");
    for (std::size_t i = 0; i < spec_.num_facts; ++i) {
      facts_.push_back({fresh(3), values[rng.below(values.size())]});
    }
  }

  const SynthSpec& spec() const { return spec_; }
  std::uint64_t seed() const { return seed_; }
  const std::vector<Fact>& facts() const { return facts_; }

  /// Index of the length bin document `index` targets.
  std::size_t bin_of(std::size_t index) const {
    Rng rng(derive_seed(seed_, index));
    return pick_bin(rng);
  }

  std::string document(std::size_t index) const {
    Rng rng(derive_seed(seed_, index));
    const LengthBin& bin = spec_.bins[pick_bin(rng)];
    // Sentences are at most kMaxSentence units, so stopping before the target keeps the
    // length inside [lo, hi].
    const std::size_t target = bin.lo + kMaxSent - 1 + rng.below(bin.hi - bin.lo - kMaxSent + 2);
    const Topic& topic = topics_[rng.below(topics_.size())];
    std::string doc;
    std::size_t units = 0;
    std::vector<std::vector<std::string>> said;
    for (;;) {
      std::vector<std::string> s = !said.empty() && rng.uniform() < spec_.repeat_rate
                                       ? said[rng.below(said.size())]
                                       : sentence(topic, rng);
      if (units + s.size() > target) break;
      said.push_back(s);
      for (const auto& w : s) {
        if (!doc.empty()) doc += ' ';
        doc += w;
      }
      units += s.size();
    }
    return doc;
  }

  std::vector<std::string> documents(std::size_t first, std::size_t count) const {
    std::vector<std::string> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) out.push_back(document(first + i));
    return out;
  }

 private:
  static constexpr std::size_t kMaxSent = SynthSpec::kMaxSentence;

  struct Topic {
    std::vector<std::string> nouns, verbs, adjectives;
    std::vector<std::size_t> preferred_verb;
  };

  std::size_t pick_bin(Rng& rng) const {
    double total = 0.0;
    for (const auto& b : spec_.bins) total += b.weight;
    double u = rng.uniform() * total;
    for (std::size_t i = 0; i < spec_.bins.size(); ++i) {
      if (u < spec_.bins[i].weight) return i;
      u -= spec_.bins[i].weight;
    }
    return spec_.bins.size() - 1;
  }

  std::vector<std::string> sentence(const Topic& t, Rng& rng) const {
    if (!facts_.empty() && rng.uniform() < spec_.fact_rate) {
      const Fact& f = facts_[rng.below(facts_.size())];
      return {f.entity, "maps", "to", f.value, "."};
    }
    std::vector<std::string> s{"the"};
    if (rng.uniform() < 0.5) s.push_back(t.adjectives[rng.below(t.adjectives.size())]);
    const std::size_t noun = rng.below(t.nouns.size());
    s.push_back(t.nouns[noun]);
    s.push_back(rng.uniform() < spec_.verb_affinity ? t.verbs[t.preferred_verb[noun]]
                                                    : t.verbs[rng.below(t.verbs.size())]);
    s.push_back(rng.uniform() < 0.5 ? "the" : "a");
    s.push_back(t.nouns[rng.below(t.nouns.size())]);
    s.push_back(".");
    return s;  // 6 or 7 units
  }

  SynthSpec spec_;
  std::uint64_t seed_;
  std::vector<Topic> topics_;
  std::vector<Fact> facts_;
};

inline std::vector<std::string> synth_corpus(const SynthSpec& spec, std::uint64_t seed, std::size_t count) {
  return SyntheticCorpus(spec, seed).documents(0, count);
}

inline std::size_t count_units(const std::string& doc) {
  std::istringstream is(doc);
  std::size_t n = 0;
  std::string w;
  while (is >> w) ++n;
  return n;
}

/// Reads documents: JSONL with a "text" field when the path ends in .jsonl, otherwise
/// one document per line. Blank lines are skipped.
inline std::vector<std::string> read_corpus(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("corpus: cannot read " + path);
  const bool jsonl = path.size() >= 6 && path.compare(path.size() - 6, 6, ".jsonl") == 0;
  std::vector<std::string> docs;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    if (!jsonl) {
      docs.push_back(line);
      continue;
    }
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("corpus: " + path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    if (!j.is_object() || !j.contains("text") || !j["text"].is_string()) {
      throw FormatError("corpus: " + path + ":" + std::to_string(lineno) + ": missing string field \"text\"");
    }
    docs.push_back(j["text"].get<std::string>());
  }
  return docs;
}

}  // namespace mbert
