#pragma once

#include <algorithm>
#include <cstdint>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

namespace mbert {

/// Decodes UTF-8 into code points. Malformed bytes each become U+FFFD.
inline std::u32string utf8_codepoints(std::string_view s) {
  std::u32string out;
  out.reserve(s.size());
  std::size_t i = 0;
  while (i < s.size()) {
    const auto b0 = static_cast<unsigned char>(s[i]);
    std::size_t len = 0;
    char32_t cp = 0;
    if (b0 < 0x80) {
      len = 1;
      cp = b0;
    } else if ((b0 & 0xE0) == 0xC0) {
      len = 2;
      cp = b0 & 0x1F;
    } else if ((b0 & 0xF0) == 0xE0) {
      len = 3;
      cp = b0 & 0x0F;
    } else if ((b0 & 0xF8) == 0xF0) {
      len = 4;
      cp = b0 & 0x07;
    }
    bool ok = len > 0 && i + len <= s.size();
    for (std::size_t k = 1; ok && k < len; ++k) {
      const auto b = static_cast<unsigned char>(s[i + k]);
      if ((b & 0xC0) != 0x80) {
        ok = false;
      } else {
        cp = (cp << 6) | (b & 0x3F);
      }
    }
    if (!ok) {
      out.push_back(U'\uFFFD');
      i += 1;
      continue;
    }
    out.push_back(cp);
    i += len;
  }
  return out;
}

inline std::string utf8_encode(char32_t cp) {
  std::string out;
  if (cp < 0x80) {
    out += static_cast<char>(cp);
  } else if (cp < 0x800) {
    out += static_cast<char>(0xC0 | (cp >> 6));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  } else if (cp < 0x10000) {
    out += static_cast<char>(0xE0 | (cp >> 12));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  } else {
    out += static_cast<char>(0xF0 | (cp >> 18));
    out += static_cast<char>(0x80 | ((cp >> 12) & 0x3F));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  }
  return out;
}

inline bool is_space(char32_t c) {
  return c == U' ' || c == U'\t' || c == U'\n' || c == U'\r' || c == U'\f' || c == U'\v' ||
         c == U'\u3000' || c == U'\u00A0';
}

inline std::u32string trim(std::u32string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && is_space(s[b])) ++b;
  while (e > b && is_space(s[e - 1])) --e;
  return std::u32string(s.substr(b, e - b));
}

inline std::string to_utf8(std::u32string_view s) {
  std::string out;
  for (char32_t c : s) out += utf8_encode(c);
  return out;
}

inline const std::vector<std::string>& default_sentence_delimiters() {
  static const std::vector<std::string> d{"。", ".", "！", "!", "？", "?"};
  return d;
}

/// Splits after each delimiter, keeping it with its sentence. Fragments are trimmed
/// of surrounding whitespace and dropped when empty.
inline std::vector<std::string> split_sentences(std::string_view text,
                                                const std::vector<std::string>& delimiters =
                                                    default_sentence_delimiters()) {
  std::vector<std::u32string> delims;
  for (const auto& d : delimiters) {
    if (!d.empty()) delims.push_back(utf8_codepoints(d));
  }
  const std::u32string cps = utf8_codepoints(text);
  std::vector<std::string> out;
  std::size_t start = 0, i = 0;
  auto flush = [&](std::size_t end) {
    auto piece = trim(std::u32string_view(cps).substr(start, end - start));
    if (!piece.empty()) out.push_back(to_utf8(piece));
    start = end;
  };
  while (i < cps.size()) {
    std::size_t matched = 0;
    for (const auto& d : delims) {
      if (d.size() > matched && cps.compare(i, d.size(), d) == 0) matched = d.size();
    }
    if (matched > 0) {
      i += matched;
      flush(i);
    } else {
      ++i;
    }
  }
  flush(cps.size());
  return out;
}

/// Levenshtein distance over code points.
inline std::size_t levenshtein(std::u32string_view a, std::u32string_view b) {
  if (a.size() < b.size()) std::swap(a, b);
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

/// 1 - lev / max(len); two empty strings are identical.
inline double edit_distance_sim(std::string_view a, std::string_view b) {
  const auto ca = utf8_codepoints(a), cb = utf8_codepoints(b);
  const std::size_t m = std::max(ca.size(), cb.size());
  if (m == 0) return 1.0;
  return 1.0 - static_cast<double>(levenshtein(ca, cb)) / static_cast<double>(m);
}

/// Jaccard similarity of character n-gram sets (unigrams by default).
inline double jaccard_sim(std::string_view a, std::string_view b, std::size_t n = 1) {
  auto grams = [n](std::string_view s) {
    const auto cps = utf8_codepoints(s);
    std::vector<std::u32string> g;
    for (std::size_t i = 0; i + n <= cps.size(); ++i) g.push_back(cps.substr(i, n));
    std::sort(g.begin(), g.end());
    g.erase(std::unique(g.begin(), g.end()), g.end());
    return g;
  };
  const auto ga = grams(a), gb = grams(b);
  if (ga.empty() && gb.empty()) return 1.0;
  std::vector<std::u32string> inter;
  std::set_intersection(ga.begin(), ga.end(), gb.begin(), gb.end(), std::back_inserter(inter));
  const std::size_t uni = ga.size() + gb.size() - inter.size();
  return static_cast<double>(inter.size()) / static_cast<double>(uni);
}

}  // namespace mbert
