#pragma once

// Small JSON-over-HTTP client used by services and the command-line tool to
// talk to each other.  One fresh connection per call: at desk scale the
// simplicity beats connection pooling, and it keeps retry semantics obvious.

#include <optional>
#include <string>

#include <nlohmann/json.hpp>

namespace beryllium {

struct HttpReply {
  int status = -1;          // -1: transport failure (connect/timeout/refused)
  nlohmann::json body;      // parsed JSON body; object() if none/unparseable
  std::string raw;          // raw body text

  bool transport_ok() const { return status > 0; }
  bool ok() const { return status >= 200 && status < 300; }

  // The machine error code of an ErrorReply body, if this is one.
  std::optional<std::string> error_code() const {
    if (body.is_object() && body.contains("error") && body["error"].is_string()) {
      return body["error"].get<std::string>();
    }
    return std::nullopt;
  }
  std::string error_detail() const {
    if (body.is_object() && body.contains("detail") && body["detail"].is_string()) {
      return body["detail"].get<std::string>();
    }
    return "";
  }
};

class HttpJsonClient {
 public:
  explicit HttpJsonClient(int timeout_ms = 5000) : timeout_ms_(timeout_ms) {}

  int timeout_ms() const { return timeout_ms_; }

  // base_url is scheme://host:port; path starts with '/'.  All three return
  // status -1 on transport failure instead of throwing.
  HttpReply get(const std::string& base_url, const std::string& path) const;
  HttpReply post(const std::string& base_url, const std::string& path,
                 const nlohmann::json& body) const;
  HttpReply del(const std::string& base_url, const std::string& path) const;

 private:
  int timeout_ms_;
};

}  // namespace beryllium
