#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace beryllium {

// Wall-clock timestamps travel as integer milliseconds UTC; durations that
// come from configuration stay in whole seconds.
using TimestampMs = std::int64_t;

TimestampMs now_ms();

// "2026-08-16T12:00:00.123Z" for log lines.
std::string format_iso8601(TimestampMs ms);

// Cryptographically non-critical random hex, `hex_digits` characters long.
// Seeded per process from std::random_device; thread safe.
std::string random_hex(int hex_digits);

std::string base64_encode(const std::string& bytes);

// Returns false on malformed input.
bool base64_decode(const std::string& text, std::string& out);

// Minimal syntactic URL check: "http://host[:port][/path]".
bool looks_like_http_url(const std::string& url);

// Splits "http://127.0.0.1:7701" into host/port for client construction.
// Returns false if the URL does not parse.
bool split_http_url(const std::string& url, std::string& host, int& port);

// As above, also extracting the path component ("/" when the URL has none).
bool split_http_url(const std::string& url, std::string& host, int& port,
                    std::string& path);

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& bytes);

}  // namespace beryllium
