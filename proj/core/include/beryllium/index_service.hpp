#pragma once

// Information Index: the registry of available computing elements.  CEs
// register and renew by heartbeat; the broker queries for candidates that
// satisfy a request's slot and tag requirements.  Records whose heartbeat
// lapsed past the TTL are invisible to queries and reaped by a periodic
// sweep.

#include <condition_variable>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "beryllium/container.hpp"
#include "beryllium/domain.hpp"

namespace beryllium {

// Pure registry state, independently testable against the brute-force
// filter oracle.  Thread safety is the caller's business: IndexService wraps
// every access in its own lock.
class IndexRegistry {
 public:
  explicit IndexRegistry(std::int64_t heartbeat_ttl_s)
      : heartbeat_ttl_s_(heartbeat_ttl_s) {}

  struct Record {
    ResourceDescriptor descriptor;
    TimestampMs expires_at = 0;
  };

  // Upsert keyed by ce_id; validates descriptor invariants.
  void register_descriptor(ResourceDescriptor d, TimestampMs now);

  // Advances the record's heartbeat and updates free_slots.  Unregistered
  // ce_id raises invalid-argument with detail naming it unregistered.
  void renew(const std::string& ce_id, std::int64_t free_slots, TimestampMs now);

  // Unexpired records with free_slots >= min_free_slots and tags containing
  // every required tag, sorted by ce_id.  A record expires the instant
  // expires_at < now (a record expiring exactly now is still alive).
  std::vector<ResourceDescriptor> query(std::int64_t min_free_slots,
                                        const std::set<std::string>& required_tags,
                                        TimestampMs now) const;

  // Drops records with expires_at < now; returns how many were removed.
  int sweep_expired(TimestampMs now);

  int size() const { return static_cast<int>(records_.size()); }
  std::vector<Record> records() const;
  std::int64_t heartbeat_ttl_s() const { return heartbeat_ttl_s_; }

 private:
  std::int64_t heartbeat_ttl_s_;
  std::map<std::string, Record> records_;
};

class IndexService {
 public:
  struct Options {
    std::string host = "127.0.0.1";
    int port = 7702;
    std::int64_t heartbeat_ttl_s = 10;
    LogLevel log_level = LogLevel::Info;
    bool run_sweeper = true;  // tests drive sweep_expired by hand
  };

  explicit IndexService(Options opts);
  ~IndexService();

  bool start();
  void wait();
  void stop();

  ServiceContainer& container() { return container_; }
  std::string url() const { return container_.url(); }

  // Direct (in-process) entry points, shared by the HTTP handlers and unit
  // tests.  All take the index's own clock.
  void register_descriptor(const ResourceDescriptor& d);
  void renew(const std::string& ce_id, std::int64_t free_slots);
  std::vector<ResourceDescriptor> query(std::int64_t min_free_slots,
                                        const std::set<std::string>& required_tags);
  int sweep_expired();

 private:
  void mount_routes();
  void refresh_registered_count(Instance* inst);  // null: take the instance lock

  Options opts_;
  ServiceContainer container_;
  mutable std::mutex mu_;
  IndexRegistry registry_;
  std::int64_t queries_served_ = 0;

  std::thread sweeper_;
  std::mutex sweeper_mu_;
  std::condition_variable sweeper_cv_;
  bool stopping_ = false;
};

}  // namespace beryllium
