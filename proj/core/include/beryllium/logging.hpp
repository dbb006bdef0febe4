#pragma once

#include <atomic>
#include <functional>
#include <mutex>
#include <optional>
#include <string>

namespace beryllium {

enum class LogLevel { Error = 0, Warn = 1, Info = 2, Debug = 3 };

const char* log_level_name(LogLevel level);
std::optional<LogLevel> log_level_from_name(const std::string& name);

// Leveled stderr logger with a runtime-adjustable filter. Records above the
// filter level are suppressed; the sink is injectable for tests.
class Logger {
 public:
  explicit Logger(std::string tag, LogLevel level = LogLevel::Info);

  void set_level(LogLevel level) { level_.store(level); }
  LogLevel level() const { return level_.load(); }

  using Sink = std::function<void(const std::string& line)>;
  void set_sink(Sink sink);

  void log(LogLevel level, const std::string& msg);
  void error(const std::string& msg) { log(LogLevel::Error, msg); }
  void warn(const std::string& msg) { log(LogLevel::Warn, msg); }
  void info(const std::string& msg) { log(LogLevel::Info, msg); }
  void debug(const std::string& msg) { log(LogLevel::Debug, msg); }

 private:
  std::string tag_;
  std::atomic<LogLevel> level_;
  std::mutex mu_;
  Sink sink_;  // empty = stderr
};

}  // namespace beryllium
