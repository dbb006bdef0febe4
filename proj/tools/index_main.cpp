// beryllium-index: the Information Index daemon.  Computing elements register
// and renew availability records here; the broker queries them.

#include <CLI11.hpp>

#include "beryllium/index_service.hpp"
#include "daemon_main.hpp"

int main(int argc, char** argv) {
  using namespace beryllium;

  IndexService::Options opts;
  std::string log_level = "info";

  CLI::App app{"Information Index: availability registry for computing elements"};
  app.add_option("--host", opts.host, "Listen address")->capture_default_str();
  app.add_option("--port", opts.port, "Listen port (0 picks a free one)")
      ->capture_default_str();
  app.add_option("--heartbeat-ttl-s", opts.heartbeat_ttl_s,
                 "Seconds a registration stays valid without a renewal")
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
  IndexService service(opts);
  return tools::run_daemon(service, &set, "beryllium-index");
}
