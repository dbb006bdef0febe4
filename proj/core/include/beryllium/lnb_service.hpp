#pragma once

// Logging & Bookkeeping: the durable, append-only record of every job's
// status timeline.  Events arrive from the broker (RESERVED) and the CEs
// (everything after); each gets a per-job sequence number and is written to
// an NDJSON log file before it is acknowledged.  Illegal transitions are
// recorded too — flagged anomalous rather than refused, because bookkeeping
// must not lose evidence.  Subscribers receive matching events by webhook.

#include <cstdint>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "beryllium/container.hpp"
#include "beryllium/domain.hpp"

namespace beryllium {

// The event store. Construction replays an existing log file; every append
// is flushed before record() returns.
class EventLog {
 public:
  explicit EventLog(std::string path);

  // Assigns the next per-job seq, computes the anomalous flag, persists,
  // and returns the stored event with its flag.
  struct Recorded {
    JobStatusEvent event;
    bool anomalous = false;
  };
  Recorded record(JobStatusEvent e);

  struct JobView {
    JobState current_state = JobState::Reserved;
    std::vector<JobStatusEvent> timeline;        // seq order
    std::set<std::int64_t> anomalous_seqs;       // seqs flagged anomalous
  };
  std::optional<JobView> job(const std::string& job_id) const;

  std::vector<std::string> job_ids() const;
  std::int64_t events_recorded() const;
  int jobs_seen() const;
  const std::string& path() const { return path_; }

 private:
  bool would_be_anomalous(const JobStatusEvent& e) const;
  void apply(const JobStatusEvent& e, bool anomalous);

  std::string path_;
  mutable std::mutex mu_;
  std::ofstream out_;
  std::map<std::string, std::vector<JobStatusEvent>> by_job_;
  // State of the highest-seq non-anomalous event per job.
  std::map<std::string, JobState> current_;
  std::map<std::string, std::set<std::int64_t>> anomalous_;
  std::int64_t events_recorded_ = 0;
};

class LnbService {
 public:
  struct Options {
    std::string host = "127.0.0.1";
    int port = 7703;
    std::string log_path = "lnb-events.ndjson";
    LogLevel log_level = LogLevel::Info;
  };

  explicit LnbService(Options opts);
  ~LnbService();

  bool start();
  void wait();
  void stop();

  ServiceContainer& container() { return container_; }
  std::string url() const { return container_.url(); }
  EventLog& event_log() { return log_; }

  // In-process entry points (HTTP handlers are thin wrappers over these).
  EventLog::Recorded record_event(JobStatusEvent e);
  EventLog::JobView query_status(const std::string& job_id);  // throws unknown-job
  Subscription subscribe(const std::string& topic, const std::string& callback_url);
  void unsubscribe(const std::string& subscription_id);
  std::vector<Subscription> subscriptions() const;

 private:
  void mount_routes();
  void fan_out(const JobStatusEvent& e);

  Options opts_;
  ServiceContainer container_;
  EventLog log_;

  mutable std::mutex subs_mu_;
  std::map<std::string, Subscription> subs_;
};

}  // namespace beryllium
