#pragma once

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace mbert {

/// Writes via a sibling temp file and rename, so readers never see a partial file.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + tmp.string());
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    f.flush();
    if (!f) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

/// Shortest decimal that round-trips a double, for CSV cells.
inline std::string format_number(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  std::string s = os.str();
  for (int p = 6; p < 17; ++p) {
    std::ostringstream t;
    t << std::setprecision(p) << v;
    if (std::stod(t.str()) == v) return t.str();
  }
  return s;
}

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

/// Directory for reports: $MBERT_REPORT_DIR when set, otherwise `fallback`.
inline std::filesystem::path report_dir(const std::filesystem::path& fallback = "reports") {
  if (const char* env = std::getenv("MBERT_REPORT_DIR"); env != nullptr && *env != '\0') return env;
  return fallback;
}

// ---------------------------------------------------------------------------------

struct MetricRecord {
  std::int64_t step = 0;
  int stage = 1;
  std::string name;
  double value = 0.0;

  bool operator==(const MetricRecord&) const = default;
};

/// Append-only metric stream, exportable as JSONL and CSV.
class MetricLog {
 public:
  void append(MetricRecord r) { records_.push_back(std::move(r)); }
  const std::vector<MetricRecord>& records() const { return records_; }

  std::vector<MetricRecord> series(const std::string& name) const {
    std::vector<MetricRecord> out;
    for (const auto& r : records_) {
      if (r.name == name) out.push_back(r);
    }
    return out;
  }

  std::string to_jsonl() const {
    std::string out;
    for (const auto& r : records_) {
      nlohmann::ordered_json j{{"step", r.step}, {"stage", r.stage}, {"name", r.name}, {"value", r.value}};
      out += j.dump() + "\n";
    }
    return out;
  }

  std::string to_csv() const {
    std::string out = "step,stage,name,value\n";
    for (const auto& r : records_) {
      out += std::to_string(r.step) + "," + std::to_string(r.stage) + "," + csv_escape(r.name) + "," +
             format_number(r.value) + "\n";
    }
    return out;
  }

 private:
  std::vector<MetricRecord> records_;
};

}  // namespace mbert
