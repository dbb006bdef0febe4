// beryllium-broker: the Resource Broker daemon.  Matches job requests against
// the Information Index and negotiates reservations with computing elements.

#include <CLI11.hpp>

#include "beryllium/broker_service.hpp"
#include "daemon_main.hpp"

int main(int argc, char** argv) {
  using namespace beryllium;

  BrokerService::Options opts;
  std::string log_level = "info";

  CLI::App app{"Resource Broker: matchmaking and reservation negotiation"};
  app.add_option("--host", opts.host, "Listen address")->capture_default_str();
  app.add_option("--port", opts.port, "Listen port (0 picks a free one)")
      ->capture_default_str();
  app.add_option("--index-url", opts.index_url, "Information Index base URL")
      ->required();
  app.add_option("--lnb-url", opts.lnb_url, "Logging & Bookkeeping base URL")
      ->required();
  app.add_option("--max-rounds", opts.max_rounds,
                 "Maximum match-confirm rounds per request")
      ->capture_default_str();
  app.add_option("--ticket-ttl-s", opts.ticket_ttl_s,
                 "Reservation ticket lifetime in seconds")
      ->capture_default_str();
  app.add_option("--policy", opts.policy, "Ranking policy")->capture_default_str();
  app.add_option("--request-timeout-ms", opts.request_timeout_ms,
                 "Timeout for index/CE/L&B calls")
      ->capture_default_str();
  app.add_option("--log-level", log_level, "error|warn|info|debug")
      ->capture_default_str();
  CLI11_PARSE(app, argc, argv);

  if (!tools::parse_log_level(log_level, &opts.log_level)) {
    std::fprintf(stderr, "unknown log level: %s\n", log_level.c_str());
    return 1;
  }

  sigset_t set;
  tools::block_exit_signals(&set);
  try {
    BrokerService service(opts);
    return tools::run_daemon(service, &set, "beryllium-broker");
  } catch (const std::exception& e) {
    std::fprintf(stderr, "beryllium-broker: %s\n", e.what());
    return 1;
  }
}
