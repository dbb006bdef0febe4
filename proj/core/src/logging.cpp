#include "beryllium/logging.hpp"

#include <cctype>
#include <cstdio>

#include "beryllium/util.hpp"

namespace beryllium {

const char* log_level_name(LogLevel level) {
  switch (level) {
    case LogLevel::Error: return "ERROR";
    case LogLevel::Warn: return "WARN";
    case LogLevel::Info: return "INFO";
    case LogLevel::Debug: return "DEBUG";
  }
  return "INFO";
}

std::optional<LogLevel> log_level_from_name(const std::string& name) {
  std::string upper;
  upper.reserve(name.size());
  for (char c : name) upper.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
  for (LogLevel l : {LogLevel::Error, LogLevel::Warn, LogLevel::Info, LogLevel::Debug}) {
    if (upper == log_level_name(l)) return l;
  }
  return std::nullopt;
}

Logger::Logger(std::string tag, LogLevel level) : tag_(std::move(tag)), level_(level) {}

void Logger::set_sink(Sink sink) {
  std::lock_guard<std::mutex> lock(mu_);
  sink_ = std::move(sink);
}

void Logger::log(LogLevel level, const std::string& msg) {
  if (static_cast<int>(level) > static_cast<int>(level_.load())) return;
  std::string line =
      format_iso8601(now_ms()) + " " + log_level_name(level) + " [" + tag_ + "] " + msg;
  std::lock_guard<std::mutex> lock(mu_);
  if (sink_) {
    sink_(line);
  } else {
    std::fprintf(stderr, "%s\n", line.c_str());
    std::fflush(stderr);
  }
}

}  // namespace beryllium
