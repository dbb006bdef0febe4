#pragma once

// Computing Element: confirms reservations against its slot capacity,
// validates tickets at job submission (single use, unexpired, addressed to
// this CE — any mismatch aborts the job and tells the user why), executes
// accepted jobs in per-job working directories, reports every state change
// to Logging & Bookkeeping, and heartbeats the Information Index so the
// broker only ever sees live resources.
//
// The reservation ticket database is a durable append-only NDJSON file:
// one row per accepted reservation, then tombstone rows marking consumption
// or expiry.  State is reconstructed by replay on start, so a crash between
// append and anything else loses nothing that was acknowledged.

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "beryllium/container.hpp"
#include "beryllium/domain.hpp"
#include "beryllium/http_client.hpp"

namespace beryllium {

// Slot accounting. reserved covers accepted-but-unconsumed tickets; running
// covers jobs between consumption and a terminal state.
struct SlotLedger {
  std::int64_t total_slots = 0;
  std::int64_t reserved_slots = 0;
  std::int64_t running_slots = 0;

  std::int64_t free_slots() const {
    return total_slots - reserved_slots - running_slots;
  }
  bool conserved() const {
    return reserved_slots >= 0 && running_slots >= 0 &&
           reserved_slots + running_slots <= total_slots;
  }
};

struct CeJobRecord {
  std::string job_id;
  JobState state = JobState::Submitted;
  std::string workdir;
  std::int64_t slots = 0;
  std::optional<std::int64_t> exit_code;  // present iff DONE or FAILED
  std::vector<InputFile> output_files;    // collected from workdir/out
  std::string detail;                     // "exit 0", "timeout", ...
};

// Durable reservation database.  Not thread-safe on its own; the CE guards
// it with its state mutex.  Every mutation is flushed before returning.
class TicketDb {
 public:
  explicit TicketDb(std::string path);  // replays an existing file

  struct Entry {
    TicketDbEntry row;
    bool expired = false;
  };

  void append(const TicketDbEntry& e);  // invalid-argument on duplicate id
  void mark_consumed(const std::string& ticket_id, TimestampMs at);
  void mark_expired(const std::string& ticket_id, TimestampMs at);
  const Entry* find(const std::string& ticket_id) const;
  std::vector<Entry> entries() const;  // insertion order
  const std::string& path() const { return path_; }

 private:
  void persist(const json& j);

  std::string path_;
  std::ofstream out_;
  std::map<std::string, Entry> by_id_;
  std::vector<std::string> order_;
};

class CeService {
 public:
  struct Options {
    std::string host = "127.0.0.1";
    int port = 7710;
    std::string ce_id = "ce-1";
    std::int64_t slots = 2;
    std::set<std::string> tags;
    std::string index_url;
    std::string lnb_url;
    std::string workdir_root = "ce-work";
    std::string ticket_db_path;  // default: <workdir_root>/<ce_id>-tickets.ndjson
    std::int64_t reservation_ttl_s = 60;  // also sets the expiry sweep cadence
    std::int64_t job_wall_limit_s = 300;
    std::int64_t heartbeat_period_s = 3;
    int request_timeout_ms = 5000;
    LogLevel log_level = LogLevel::Info;
    bool run_background = true;  // heartbeat + expiry sweep threads
    // Fault hooks for the test harness:
    bool always_reject = false;   // decline every confirmation
    bool drop_confirms = false;   // stall confirmations past any client timeout
  };

  explicit CeService(Options opts);
  ~CeService();

  bool start();
  void wait();
  void stop();

  ServiceContainer& container() { return container_; }
  std::string url() const { return container_.url(); }
  const Options& options() const { return opts_; }

  // ---- operations (HTTP handlers wrap these) ----

  struct ConfirmResult {
    bool accepted = false;
    JobTicket ticket;         // complete, when accepted
    std::string instance_id;  // confirmation instance, when accepted
    std::string reason;       // when rejected
  };
  ConfirmResult confirm(const JobTicket& incomplete);

  // The ticket held by a confirmation instance; nullopt before any
  // confirmation completed it.
  std::optional<JobTicket> get_value(const std::string& instance_id);

  // Validates and consumes the ticket, stages inputs, emits SUBMITTED, and
  // starts the executor.  Throws ticket-mismatch / ticket-expired /
  // invalid-argument on validation failure after emitting ABORTED.
  std::string submit_job(const JobPayload& payload);

  CeJobRecord job_status(const std::string& job_id);    // unknown-job
  CeJobRecord fetch_results(const std::string& job_id); // + invalid-argument

  // Returns unconsumed reservations past their deadline to the free pool.
  int expire_reservations();

  // Snapshots for tests and audits.
  SlotLedger ledger() const;
  std::vector<TicketDb::Entry> ticket_entries() const;

 private:
  struct CeState {
    SlotLedger ledger;
    std::unique_ptr<TicketDb> db;
    std::map<std::string, CeJobRecord> jobs;
    // Jobs this CE drove to a terminal state (or aborted): their leftover
    // reservations are reclaimed silently, without an EXPIRED event.
    std::set<std::string> terminal_jobs;
  };

  void mount_routes();
  // SDE updates are two-phase to respect the instance-then-state lock order:
  // snapshot the counters under state_mu_, write them either through the
  // in-dispatch instance (both locks already held, in order) or through the
  // container after state_mu_ is released.
  struct LedgerSdes {
    std::int64_t free = 0;
    std::int64_t reserved = 0;
    std::int64_t running = 0;
  };
  LedgerSdes ledger_sdes_locked() const;  // caller holds state_mu_
  void write_ledger_sdes(Instance* inst, const LedgerSdes& s);
  void emit_event(const std::string& job_id, JobState s, const std::string& detail);
  void renew_index();
  void executor_main(std::string job_id, JobPayload payload, std::string workdir,
                     std::int64_t slots);
  void background_main();

  Options opts_;
  ServiceContainer container_;
  HttpJsonClient client_;

  mutable std::mutex state_mu_;
  CeState state_;

  std::thread background_;
  std::mutex bg_mu_;
  std::condition_variable bg_cv_;
  bool bg_stop_ = false;
  std::atomic<bool> stopping_{false};

  std::mutex executors_mu_;
  std::vector<std::thread> executors_;
};

}  // namespace beryllium
