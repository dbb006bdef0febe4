// beryllium-lnb: the Logging & Bookkeeping daemon.  Records job status events
// in a durable append-only log and answers status inquiries.

#include <CLI11.hpp>

#include "beryllium/lnb_service.hpp"
#include "daemon_main.hpp"

int main(int argc, char** argv) {
  using namespace beryllium;

  LnbService::Options opts;
  std::string log_level = "info";

  CLI::App app{"Logging & Bookkeeping: durable job status timelines"};
  app.add_option("--host", opts.host, "Listen address")->capture_default_str();
  app.add_option("--port", opts.port, "Listen port (0 picks a free one)")
      ->capture_default_str();
  app.add_option("--log-path", opts.log_path, "Append-only event log file")
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
    LnbService service(opts);
    return tools::run_daemon(service, &set, "beryllium-lnb");
  } catch (const std::exception& e) {
    std::fprintf(stderr, "beryllium-lnb: %s\n", e.what());
    return 1;
  }
}
