#pragma once

#include <cmath>
#include <cstdarg>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <random>
#include <string>
#include <vector>

namespace mltr {

/// printf-style formatting into a std::string.
inline std::string strfmt(const char* fmt, ...) {
  va_list args;
  va_start(args, fmt);
  va_list copy;
  va_copy(copy, args);
  int n = std::vsnprintf(nullptr, 0, fmt, copy);
  va_end(copy);
  std::string out(n > 0 ? static_cast<size_t>(n) : 0, '\0');
  if (n > 0) std::vsnprintf(out.data(), out.size() + 1, fmt, args);
  va_end(args);
  return out;
}

/// Shortest decimal form that round-trips a double exactly. Used everywhere a
/// metric or checkpoint value is serialized as text so logs are reproducible.
inline std::string dtos(double v) { return strfmt("%.17g", v); }

enum class LogLevel { kDebug = 0, kInfo = 1, kWarn = 2, kError = 3, kQuiet = 4 };

inline LogLevel& log_level() {
  static LogLevel level = [] {
    const char* env = std::getenv("MLTR_LOG");
    if (!env) return LogLevel::kWarn;
    std::string s(env);
    if (s == "debug") return LogLevel::kDebug;
    if (s == "info") return LogLevel::kInfo;
    if (s == "warn") return LogLevel::kWarn;
    if (s == "error") return LogLevel::kError;
    if (s == "quiet") return LogLevel::kQuiet;
    return LogLevel::kWarn;
  }();
  return level;
}

inline void log_msg(LogLevel lvl, const std::string& msg) {
  static const char* names[] = {"debug", "info", "warn", "error"};
  if (lvl < log_level()) return;
  std::fprintf(stderr, "[mltr:%s] %s\n", names[static_cast<int>(lvl)], msg.c_str());
}

#define MLTR_LOG_DEBUG(...) ::mltr::log_msg(::mltr::LogLevel::kDebug, ::mltr::strfmt(__VA_ARGS__))
#define MLTR_LOG_INFO(...) ::mltr::log_msg(::mltr::LogLevel::kInfo, ::mltr::strfmt(__VA_ARGS__))
#define MLTR_LOG_WARN(...) ::mltr::log_msg(::mltr::LogLevel::kWarn, ::mltr::strfmt(__VA_ARGS__))
#define MLTR_LOG_ERROR(...) ::mltr::log_msg(::mltr::LogLevel::kError, ::mltr::strfmt(__VA_ARGS__))

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Deterministic RNG. The engine is the standard-specified mt19937_64; the
/// uniform/normal mappings are implemented here rather than with std
/// distributions, whose output is not pinned by the standard.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(splitmix64(seed)) {}

  /// Independent stream for (seed, index) pairs; parallel-order independent.
  static Rng stream(std::uint64_t seed, std::uint64_t index) {
    return Rng(splitmix64(seed) ^ splitmix64(index * 0x9e3779b97f4a7c15ULL + 1));
  }

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [lo, hi] inclusive.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    return lo + static_cast<std::int64_t>(uniform() * static_cast<double>(hi - lo + 1));
  }

  /// Standard normal via Box-Muller.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 1e-300) u1 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace mltr
