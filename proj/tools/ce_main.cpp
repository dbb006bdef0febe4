// beryllium-ce: a Computing Element daemon.  Confirms reservations with slot
// accounting, validates tickets at submission, and executes jobs in scratch
// working directories.

#include <CLI11.hpp>

#include <vector>

#include "beryllium/ce_service.hpp"
#include "daemon_main.hpp"

int main(int argc, char** argv) {
  using namespace beryllium;

  CeService::Options opts;
  std::vector<std::string> tags;
  std::string log_level = "info";

  CLI::App app{"Computing Element: reservation confirmation and job execution"};
  app.add_option("--host", opts.host, "Listen address")->capture_default_str();
  app.add_option("--port", opts.port, "Listen port (0 picks a free one)")
      ->capture_default_str();
  app.add_option("--ce-id", opts.ce_id, "Unique computing element id")
      ->capture_default_str();
  app.add_option("--slots", opts.slots, "Total job slots")->capture_default_str();
  app.add_option("--tags", tags, "Capability tags (repeatable)");
  app.add_option("--index-url", opts.index_url, "Information Index base URL")
      ->required();
  app.add_option("--lnb-url", opts.lnb_url, "Logging & Bookkeeping base URL")
      ->required();
  app.add_option("--workdir-root", opts.workdir_root,
                 "Directory for per-job working directories")
      ->capture_default_str();
  app.add_option("--ticket-db", opts.ticket_db_path,
                 "Ticket database file (default <workdir-root>/<ce-id>-tickets.ndjson)");
  app.add_option("--reservation-ttl-s", opts.reservation_ttl_s,
                 "Reservation lifetime and expiry sweep cadence")
      ->capture_default_str();
  app.add_option("--job-wall-limit-s", opts.job_wall_limit_s,
                 "Wall-clock limit per job before it is killed")
      ->capture_default_str();
  app.add_option("--heartbeat-period-s", opts.heartbeat_period_s,
                 "Seconds between index renewals")
      ->capture_default_str();
  app.add_option("--request-timeout-ms", opts.request_timeout_ms,
                 "Timeout for index/L&B calls")
      ->capture_default_str();
  app.add_option("--log-level", log_level, "error|warn|info|debug")
      ->capture_default_str();
  app.add_flag("--always-reject", opts.always_reject,
               "Fault hook: decline every reservation confirmation");
  app.add_flag("--drop-confirms", opts.drop_confirms,
               "Fault hook: stall confirmations past any client timeout");
  CLI11_PARSE(app, argc, argv);

  if (!tools::parse_log_level(log_level, &opts.log_level)) {
    std::fprintf(stderr, "unknown log level: %s\n", log_level.c_str());
    return 1;
  }
  opts.tags.insert(tags.begin(), tags.end());

  sigset_t set;
  tools::block_exit_signals(&set);
  try {
    CeService service(opts);
    return tools::run_daemon(service, &set, "beryllium-ce");
  } catch (const std::exception& e) {
    std::fprintf(stderr, "beryllium-ce: %s\n", e.what());
    return 1;
  }
}
