#pragma once

// Multi-process test harness: boots whole service constellations on
// loopback ports, injects faults, records wire traffic byte-for-byte
// through a TCP proxy, and provides the deliberately naive brute-force
// oracles that the property tests compare the real services against.
//
// Everything here drives the installed service binaries as real processes —
// the same artifacts users run — rather than in-process service objects, so
// crash/restart durability can be exercised with real SIGKILL.

#include <atomic>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <sys/types.h>

#include <nlohmann/json.hpp>

#include "beryllium/domain.hpp"
#include "beryllium/index_service.hpp"

namespace beryllium::testkit {

using json = nlohmann::json;

// ---- small utilities ------------------------------------------------------

// Binds port 0, reads the assigned port, closes. The tiny race against other
// processes is acceptable on a loopback test host.
int pick_free_port();

// Polls `pred` every 25 ms until it holds or timeout_ms passes.
bool wait_until(const std::function<bool()>& pred, int timeout_ms);

// Locates a sibling service binary: $BERYLLIUM_BIN_DIR, the running
// executable's directory, then ../tools relative to it.
std::string find_binary(const std::string& name);

// Runs a program to completion, capturing stdout (stderr passes through).
// Returns exit code 124 on wall-limit timeout, 125 on spawn failure.
struct RunResult {
  int exit_code = -1;
  std::string out;
};
RunResult run_capture(const std::string& exe, const std::vector<std::string>& args,
                      int timeout_s = 120);

// ---- service process ------------------------------------------------------

class ServiceProcess {
 public:
  ServiceProcess() = default;
  ~ServiceProcess();
  ServiceProcess(const ServiceProcess&) = delete;
  ServiceProcess& operator=(const ServiceProcess&) = delete;

  void spawn(const std::string& exe, const std::vector<std::string>& args,
             const std::string& log_path);
  bool running() const;
  // SIGTERM, short grace, SIGKILL. Safe to call twice.
  void terminate();
  // Immediate SIGKILL — the crash case.
  void kill9();
  // Spawns again with the identical command line (the restart case).
  void respawn();

  pid_t pid() const { return pid_; }
  const std::string& log_path() const { return log_path_; }

 private:
  void reap();

  pid_t pid_ = -1;
  std::string exe_;
  std::vector<std::string> args_;
  std::string log_path_;
};

// ---- recording proxy ------------------------------------------------------

// Transparent TCP relay. Each accepted connection is pumped byte-for-byte
// in both directions; the bytes are kept for post-run inspection.
class RecordingProxy {
 public:
  RecordingProxy(const std::string& target_host, int target_port);
  ~RecordingProxy();

  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_); }
  int port() const { return port_; }
  void stop();

  struct Capture {
    std::string client_to_server;
    std::string server_to_client;
  };
  std::vector<Capture> captures() const;
  int capture_count() const;
  // True if any captured byte stream contains the needle.
  bool any_capture_contains(const std::string& needle) const;

 private:
  void accept_loop();
  void handle_connection(int client_fd);

  std::string target_host_;
  int target_port_;
  int listen_fd_ = -1;
  int port_ = 0;
  std::atomic<bool> stopping_{false};
  std::thread acceptor_;
  mutable std::mutex mu_;
  std::vector<std::shared_ptr<Capture>> captures_;
  std::vector<std::thread> pumps_;
};

// ---- topology --------------------------------------------------------------

struct CeSpec {
  std::string ce_id;
  std::int64_t slots = 2;
  std::set<std::string> tags;
  std::int64_t reservation_ttl_s = 60;
  bool always_reject = false;
  bool drop_confirms = false;
};

struct TopologySpec {
  std::vector<CeSpec> ces;
  std::int64_t heartbeat_ttl_s = 10;
  std::int64_t heartbeat_period_s = 3;
  std::int64_t ticket_ttl_s = 60;
  int max_rounds = 5;
  std::int64_t job_wall_limit_s = 300;
  int broker_timeout_ms = 5000;
  // Route all broker-bound and index-bound traffic through recording
  // proxies (the flow-separation audit).
  bool proxy_broker = false;
  bool proxy_index = false;
  std::string scratch_dir;  // empty: fresh directory under the system tmpdir

  static TopologySpec from_json(const json& j);
};

class Topology {
 public:
  explicit Topology(TopologySpec spec);
  ~Topology();

  void start();     // throws std::runtime_error("startup-timeout: ...") on stall
  void teardown();  // idempotent

  // URLs as clients should use them (proxied when proxying is on).
  std::string broker_url() const;
  std::string index_url() const;
  std::string lnb_url() const;
  std::string ce_url(const std::string& ce_id) const;

  ServiceProcess& broker() { return *broker_; }
  ServiceProcess& index() { return *index_; }
  ServiceProcess& lnb() { return *lnb_; }
  ServiceProcess& ce(const std::string& ce_id);

  RecordingProxy* broker_proxy() { return broker_proxy_.get(); }
  RecordingProxy* index_proxy() { return index_proxy_.get(); }

  const TopologySpec& spec() const { return spec_; }
  const std::string& scratch() const { return scratch_; }
  std::string lnb_log_path() const;
  std::string ce_ticket_db_path(const std::string& ce_id) const;
  std::string ce_workdir_root(const std::string& ce_id) const;

  // Blocks until the index reports `n` registered resources.
  void await_registered(int n, int timeout_ms = 15000);

 private:
  TopologySpec spec_;
  std::string scratch_;
  bool owns_scratch_ = false;
  bool started_ = false;

  int broker_port_ = 0, index_port_ = 0, lnb_port_ = 0;
  std::map<std::string, int> ce_ports_;

  std::unique_ptr<ServiceProcess> broker_, index_, lnb_;
  std::map<std::string, std::unique_ptr<ServiceProcess>> ces_;
  std::unique_ptr<RecordingProxy> broker_proxy_, index_proxy_;
};

// ---- oracles ----------------------------------------------------------------

// Brute-force twin of the broker's ranking: for each candidate, checks that
// no other candidate beats it (more free slots, or equal slots and smaller
// ce_id). Quadratic on purpose — it shares no code with the service.
std::optional<std::string> oracle_match(
    const std::vector<ResourceDescriptor>& candidates);

// Brute-force twin of the index query: linear scan applying the expiry,
// slot, and tag rules one record at a time, then a naive sort by ce_id.
std::vector<ResourceDescriptor> oracle_filter(
    const std::vector<IndexRegistry::Record>& records, std::int64_t min_free_slots,
    const std::set<std::string>& required_tags, TimestampMs now);

// ---- log normalization ------------------------------------------------------

// Rewrites an event stream for run-to-run comparison: job ids and source
// URLs are replaced by order-of-appearance placeholders, timestamps are
// dropped. Input is the NDJSON event log contents; output is one canonical
// line per event.
std::vector<std::string> normalize_event_log(const std::string& ndjson);

}  // namespace beryllium::testkit
