#pragma once

// Structured log lines on stderr: `level=info event=train_step step=10 loss=1.5`.

#include <iostream>
#include <mutex>
#include <sstream>
#include <string>
#include <string_view>

namespace photobridge::log {

enum class Level { debug, info, warn, error };

inline Level& threshold() {
  static Level l = Level::info;
  return l;
}

inline std::string_view level_name(Level l) {
  switch (l) {
    case Level::debug: return "debug";
    case Level::info: return "info";
    case Level::warn: return "warn";
    case Level::error: return "error";
  }
  return "info";
}

// Values containing spaces or quotes are quoted.
inline std::string quote(std::string_view v) {
  if (!v.empty() && v.find_first_of(" \"=") == std::string_view::npos) return std::string(v);
  std::string out = "\"";
  for (char c : v) {
    if (c == '"' || c == '\\') out.push_back('\\');
    out.push_back(c);
  }
  return out + "\"";
}

class Line {
 public:
  Line(Level level, std::string_view event) : level_(level) {
    os_ << "level=" << level_name(level) << " event=" << quote(event);
  }
  Line(const Line&) = delete;
  Line& operator=(const Line&) = delete;
  ~Line() {
    if (level_ < threshold()) return;
    static std::mutex mu;
    const std::lock_guard lock(mu);
    std::cerr << os_.str() << '\n';
  }

  template <class V>
  Line& kv(std::string_view key, const V& value) {
    std::ostringstream v;
    v << value;
    os_ << ' ' << key << '=' << quote(v.str());
    return *this;
  }

 private:
  Level level_;
  std::ostringstream os_;
};

inline Line info(std::string_view event) { return Line(Level::info, event); }
inline Line warn(std::string_view event) { return Line(Level::warn, event); }
inline Line error(std::string_view event) { return Line(Level::error, event); }

}  // namespace photobridge::log
