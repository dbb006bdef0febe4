#include "beryllium/http_client.hpp"

#include <httplib.h>

#include "beryllium/util.hpp"

namespace beryllium {

namespace {

HttpReply from_result(const httplib::Result& res) {
  HttpReply reply;
  if (!res) return reply;
  reply.status = res->status;
  reply.raw = res->body;
  if (!res->body.empty()) {
    nlohmann::json j = nlohmann::json::parse(res->body, nullptr, false);
    if (!j.is_discarded()) reply.body = std::move(j);
  }
  return reply;
}

}  // namespace

HttpReply HttpJsonClient::get(const std::string& base_url,
                              const std::string& path) const {
  std::string host;
  int port = 0;
  if (!split_http_url(base_url, host, port)) return HttpReply{};
  httplib::Client cli(host, port);
  cli.set_connection_timeout(0, timeout_ms_ * 1000LL);
  cli.set_read_timeout(timeout_ms_ / 1000, (timeout_ms_ % 1000) * 1000);
  return from_result(cli.Get(path));
}

HttpReply HttpJsonClient::post(const std::string& base_url,
                               const std::string& path,
                               const nlohmann::json& body) const {
  std::string host;
  int port = 0;
  if (!split_http_url(base_url, host, port)) return HttpReply{};
  httplib::Client cli(host, port);
  cli.set_connection_timeout(0, timeout_ms_ * 1000LL);
  cli.set_read_timeout(timeout_ms_ / 1000, (timeout_ms_ % 1000) * 1000);
  return from_result(cli.Post(path, body.dump(), "application/json"));
}

HttpReply HttpJsonClient::del(const std::string& base_url,
                              const std::string& path) const {
  std::string host;
  int port = 0;
  if (!split_http_url(base_url, host, port)) return HttpReply{};
  httplib::Client cli(host, port);
  cli.set_connection_timeout(0, timeout_ms_ * 1000LL);
  cli.set_read_timeout(timeout_ms_ / 1000, (timeout_ms_ % 1000) * 1000);
  return from_result(cli.Delete(path));
}

}  // namespace beryllium
