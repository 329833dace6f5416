#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <tuple>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mbert/errors.hpp"

namespace mbert {

inline constexpr std::int32_t kPadId = 0;
inline constexpr std::int32_t kUnkId = 1;
inline constexpr std::int32_t kClsId = 2;
inline constexpr std::int32_t kSepId = 3;
inline constexpr std::int32_t kMaskId = 4;
inline constexpr std::int32_t kNumSpecial = 5;

inline const std::vector<std::string>& special_token_names() {
  static const std::vector<std::string> n{"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};
  return n;
}

inline bool is_special(std::int32_t id) { return id >= 0 && id < kNumSpecial; }

/// Pre-tokenization: a new chunk starts at every space, so " word" carries its space.
inline std::vector<std::string_view> split_chunks(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (std::size_t i = 1; i < text.size(); ++i) {
    if (text[i] == ' ') {
      out.push_back(text.substr(start, i - start));
      start = i;
    }
  }
  if (!text.empty()) out.push_back(text.substr(start));
  return out;
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

/// Byte-level BPE. Ids 0..4 are the special tokens, then one id per byte seen during
/// training (ascending byte value), then one id per merge in merge order.
class Tokenizer {
 public:
  static constexpr const char* kFormatHeader = "mbert-bpe 1";

  Tokenizer() = default;

  std::size_t vocab_size() const { return tokens_.size(); }
  const std::string& token_bytes(std::int32_t id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::pair<std::int32_t, std::int32_t>>& merges() const { return merges_; }

  std::string token_text(std::int32_t id) const {
    if (is_special(id)) return special_token_names()[static_cast<std::size_t>(id)];
    return token_bytes(id);
  }

  std::vector<std::int32_t> encode(std::string_view text) const {
    std::vector<std::int32_t> out;
    std::vector<std::int32_t> sym;
    for (auto chunk : split_chunks(text)) {
      sym.clear();
      for (unsigned char c : chunk) {
        const std::int32_t b = byte_id_[c];
        sym.push_back(b < 0 ? kUnkId : b);
      }
      apply_merges(sym);
      out.insert(out.end(), sym.begin(), sym.end());
    }
    return out;
  }

  /// Concatenates token bytes. Special ids are dropped unless `keep_special`, which
  /// renders them by name.
  std::string decode(const std::vector<std::int32_t>& ids, bool keep_special = false) const {
    std::string out;
    for (auto id : ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
        throw std::out_of_range("decode: token id " + std::to_string(id) + " out of range");
      }
      if (is_special(id)) {
        if (keep_special) out += special_token_names()[static_cast<std::size_t>(id)];
      } else {
        out += tokens_[static_cast<std::size_t>(id)];
      }
    }
    return out;
  }

  std::string serialize() const {
    std::ostringstream os;
    os << kFormatHeader << "\n";
    os << "vocab " << tokens_.size() << "\n";
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      if (i < static_cast<std::size_t>(kNumSpecial)) {
        os << i << " special " << special_token_names()[i] << "\n";
      } else {
        os << i << " hex ";
        for (unsigned char c : tokens_[i]) {
          os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(c) << std::dec;
        }
        os << "\n";
      }
    }
    os << "merges " << merges_.size() << "\n";
    for (const auto& [a, b] : merges_) os << a << " " << b << "\n";
    return os.str();
  }

  static Tokenizer deserialize(const std::string& text) {
    std::istringstream is(text);
    std::string line;
    auto bad = [](const std::string& m) { throw FormatError("tokenizer: " + m); };
    if (!std::getline(is, line) || line != kFormatHeader) bad("unsupported header '" + line + "'");
    std::string word;
    std::size_t n = 0;
    if (!(is >> word >> n) || word != "vocab") bad("missing vocab section");
    Tokenizer t;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t id = 0;
      std::string kind, payload;
      if (!(is >> id >> kind >> payload) || id != i) bad("malformed vocab entry " + std::to_string(i));
      if (kind == "special") {
        if (i >= static_cast<std::size_t>(kNumSpecial) || payload != special_token_names()[i]) {
          bad("unexpected special token " + payload);
        }
        t.tokens_.push_back(payload);
      } else if (kind == "hex") {
        if (i < static_cast<std::size_t>(kNumSpecial) || payload.size() % 2 != 0) bad("bad token " + payload);
        std::string bytes;
        for (std::size_t k = 0; k < payload.size(); k += 2) {
          const auto hi = payload.substr(k, 2);
          if (hi.find_first_not_of("0123456789abcdef") != std::string::npos) bad("bad hex " + payload);
          bytes += static_cast<char>(std::stoi(hi, nullptr, 16));
        }
        t.tokens_.push_back(bytes);
      } else {
        bad("unknown entry kind " + kind);
      }
    }
    std::size_t m = 0;
    if (!(is >> word >> m) || word != "merges") bad("missing merges section");
    for (std::size_t i = 0; i < m; ++i) {
      std::int32_t a = 0, b = 0;
      if (!(is >> a >> b)) bad("truncated merges section");
      t.merges_.emplace_back(a, b);
    }
    t.rebuild();
    if (t.serialize() != text) bad("content does not round-trip");
    return t;
  }

  void save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    f << serialize();
    if (!f) throw std::runtime_error("tokenizer: cannot write " + path);
  }

  static Tokenizer load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("tokenizer: cannot read " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return deserialize(ss.str());
  }

  /// Hex digest of the serialized form; checkpoints record it.
  std::string fingerprint() const {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << fnv1a64(serialize());
    return os.str();
  }

 private:
  friend class BpeTrainer;

  void rebuild() {
    std::fill(std::begin(byte_id_), std::end(byte_id_), -1);
    for (std::size_t i = kNumSpecial; i < tokens_.size(); ++i) {
      if (tokens_[i].size() == 1) byte_id_[static_cast<unsigned char>(tokens_[i][0])] = static_cast<std::int32_t>(i);
    }
    rank_.clear();
    if (merges_.size() + kNumSpecial > tokens_.size()) {
      throw FormatError("tokenizer: more merges than vocabulary entries");
    }
    const std::size_t first_merge_id = tokens_.size() - merges_.size();
    for (std::size_t r = 0; r < merges_.size(); ++r) {
      const auto [a, b] = merges_[r];
      const auto valid = [&](std::int32_t x) { return x >= kNumSpecial && static_cast<std::size_t>(x) < first_merge_id + r; };
      if (!valid(a) || !valid(b) || tokens_[first_merge_id + r] != tokens_[a] + tokens_[b]) {
        throw FormatError("tokenizer: merge " + std::to_string(r) + " inconsistent with vocabulary");
      }
      rank_[key(a, b)] = {static_cast<std::int32_t>(r), static_cast<std::int32_t>(first_merge_id + r)};
    }
  }

  static std::uint64_t key(std::int32_t a, std::int32_t b) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) | static_cast<std::uint32_t>(b);
  }

  void apply_merges(std::vector<std::int32_t>& sym) const {
    while (sym.size() > 1) {
      std::int32_t best_rank = -1, best_id = -1;
      std::size_t best_pos = 0;
      for (std::size_t i = 0; i + 1 < sym.size(); ++i) {
        auto it = rank_.find(key(sym[i], sym[i + 1]));
        if (it != rank_.end() && (best_rank < 0 || it->second.first < best_rank)) {
          best_rank = it->second.first;
          best_id = it->second.second;
          best_pos = i;
        }
      }
      if (best_rank < 0) break;
      const auto a = sym[best_pos], b = sym[best_pos + 1];
      std::vector<std::int32_t> next;
      next.reserve(sym.size());
      for (std::size_t i = 0; i < sym.size(); ++i) {
        if (i + 1 < sym.size() && sym[i] == a && sym[i + 1] == b) {
          next.push_back(best_id);
          ++i;
        } else {
          next.push_back(sym[i]);
        }
      }
      sym.swap(next);
    }
  }

  std::vector<std::string> tokens_;
  std::vector<std::pair<std::int32_t, std::int32_t>> merges_;
  std::int32_t byte_id_[256] = {};
  std::unordered_map<std::uint64_t, std::pair<std::int32_t, std::int32_t>> rank_;
};

/// Streaming trainer: feed documents with `add`, then `finish`. Merges pick the most
/// frequent adjacent pair; ties go to the lexicographically smallest (left, right)
/// byte strings. Training stops early when no pair occurs at least twice.
class BpeTrainer {
 public:
  void add(std::string_view text) {
    for (auto chunk : split_chunks(text)) {
      ++chunks_[std::string(chunk)];
      for (unsigned char c : chunk) seen_[c] = true;
    }
  }

  Tokenizer finish(std::size_t vocab_size) const {
    if (chunks_.empty()) {
      throw ConfigError("train_tokenizer: empty corpus");
    }
    Tokenizer t;
    for (const auto& name : special_token_names()) t.tokens_.push_back(name);
    for (int c = 0; c < 256; ++c) {
      if (seen_[c]) t.tokens_.push_back(std::string(1, static_cast<char>(c)));
    }
    if (vocab_size <= t.tokens_.size()) {
      throw ConfigError("train_tokenizer: vocab_size " + std::to_string(vocab_size) +
                        " must exceed alphabet plus specials (" + std::to_string(t.tokens_.size()) + ")");
    }
    t.merges_.clear();
    t.rebuild();

    struct Word {
      std::vector<std::int32_t> sym;
      std::int64_t count;
    };
    std::vector<Word> words;
    words.reserve(chunks_.size());
    for (const auto& [chunk, count] : chunks_) {
      Word w{{}, count};
      for (unsigned char c : chunk) w.sym.push_back(t.byte_id_[c]);
      words.push_back(std::move(w));
    }

    while (t.tokens_.size() < vocab_size) {
      std::unordered_map<std::uint64_t, std::int64_t> pairs;
      for (const auto& w : words) {
        for (std::size_t i = 0; i + 1 < w.sym.size(); ++i) pairs[Tokenizer::key(w.sym[i], w.sym[i + 1])] += w.count;
      }
      std::int64_t best_count = 0;
      std::int32_t ba = -1, bb = -1;
      for (const auto& [k, count] : pairs) {
        if (count < 2) continue;
        const auto a = static_cast<std::int32_t>(k >> 32), b = static_cast<std::int32_t>(k & 0xffffffffu);
        if (ba < 0 || count > best_count ||
            (count == best_count &&
             std::tie(t.tokens_[a], t.tokens_[b]) < std::tie(t.tokens_[ba], t.tokens_[bb]))) {
          best_count = count;
          ba = a;
          bb = b;
        }
      }
      if (ba < 0) break;
      const auto id = static_cast<std::int32_t>(t.tokens_.size());
      t.tokens_.push_back(t.tokens_[ba] + t.tokens_[bb]);
      t.merges_.emplace_back(ba, bb);
      for (auto& w : words) {
        std::size_t out = 0;
        for (std::size_t i = 0; i < w.sym.size(); ++i) {
          if (i + 1 < w.sym.size() && w.sym[i] == ba && w.sym[i + 1] == bb) {
            w.sym[out++] = id;
            ++i;
          } else {
            w.sym[out++] = w.sym[i];
          }
        }
        w.sym.resize(out);
      }
    }
    t.rebuild();
    return t;
  }

 private:
  std::map<std::string, std::int64_t> chunks_;
  bool seen_[256] = {};
};

inline Tokenizer train_tokenizer(const std::vector<std::string>& corpus, std::size_t vocab_size) {
  BpeTrainer trainer;
  for (const auto& doc : corpus) trainer.add(doc);
  return trainer.finish(vocab_size);
}

struct LineChunks {
  std::vector<std::vector<std::int32_t>> sequences;
  std::size_t discarded_tokens = 0;
};

/// Tokenizes each non-empty line on its own and discards whatever exceeds max_len.
/// With `add_cls_sep`, each sequence is [CLS] content [SEP] and the budget counts both.
inline LineChunks line_by_line_chunks(const Tokenizer& tok, const std::vector<std::string>& lines,
                                      std::size_t max_len, bool add_cls_sep) {
  if (add_cls_sep && max_len < 3) {
    throw ConfigError("line_by_line_chunks: max_len must be >= 3 with CLS/SEP");
  }
  if (max_len == 0) throw ConfigError("line_by_line_chunks: max_len must be positive");
  LineChunks out;
  const std::size_t budget = add_cls_sep ? max_len - 2 : max_len;
  for (const auto& line : lines) {
    if (line.empty()) continue;
    auto ids = tok.encode(line);
    if (ids.empty()) continue;
    if (ids.size() > budget) {
      out.discarded_tokens += ids.size() - budget;
      ids.resize(budget);
    }
    if (add_cls_sep) {
      ids.insert(ids.begin(), kClsId);
      ids.push_back(kSepId);
    }
    out.sequences.push_back(std::move(ids));
  }
  return out;
}

}  // namespace mbert
