#pragma once

// Resource Broker: the meta-scheduler.  A job request comes in; the broker
// queries the Information Index for eligible computing elements, ranks them
// (max free slots, ties to the smallest ce_id), and negotiates a reservation
// by sending a fresh incomplete ticket to the best candidate's confirmation
// endpoint.  Rejecting or unreachable CEs go on a per-job exclusion list and
// the index is queried again, up to a bounded number of rounds.  The broker
// never sees a job's command or input files — only requirements travel here;
// the payload goes straight from the user to the chosen CE.

#include <cstdint>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "beryllium/container.hpp"
#include "beryllium/domain.hpp"
#include "beryllium/http_client.hpp"

namespace beryllium {

struct AttemptRecord {
  std::string ce_id;
  std::string outcome;  // "accepted" | "rejected" | "unreachable"

  bool operator==(const AttemptRecord&) const = default;
};

struct BrokeredReservation {
  std::string job_id;
  JobTicket ticket;  // complete
  std::string ce_url;
  std::vector<AttemptRecord> attempts;
};

// Raised when no CE accepted within the round budget; carries the attempt
// history so callers (and the error reply) can show what was tried.
class NoResourcesError : public BerylliumError {
 public:
  NoResourcesError(std::string detail, std::vector<AttemptRecord> attempts)
      : BerylliumError(ErrorCode::NoResources, std::move(detail)),
        attempts_(std::move(attempts)) {}
  const std::vector<AttemptRecord>& attempts() const { return attempts_; }

 private:
  std::vector<AttemptRecord> attempts_;
};

// The ranking policy: pick the candidate with the most free slots, breaking
// ties toward the smallest ce_id; empty list picks nothing.  Pure and
// permutation-invariant — property-tested against a brute-force oracle.
std::optional<std::string> match_select(
    const std::vector<ResourceDescriptor>& candidates);

class BrokerService {
 public:
  struct Options {
    std::string host = "127.0.0.1";
    int port = 7701;
    std::string index_url;
    std::string lnb_url;
    int max_rounds = 5;
    std::int64_t ticket_ttl_s = 60;
    std::string policy = "max-free-slots";
    int request_timeout_ms = 5000;
    LogLevel log_level = LogLevel::Info;
  };

  explicit BrokerService(Options opts);
  ~BrokerService();

  bool start();
  void wait();
  void stop();

  ServiceContainer& container() { return container_; }
  std::string url() const { return container_.url(); }

  // The whole steps-1-to-6 negotiation.  Returns the completed reservation
  // or throws NoResourcesError / invalid-argument.
  BrokeredReservation submit_request(const JobRequest& req);

 private:
  void mount_routes();
  // One confirmation attempt against a CE; fills in the outcome.
  std::optional<JobTicket> try_confirm(const ResourceDescriptor& ce,
                                       const JobTicket& incomplete,
                                       std::string& outcome);
  void record_reserved(const BrokeredReservation& r, const std::string& ce_id);

  Options opts_;
  ServiceContainer container_;
  HttpJsonClient client_;

  std::mutex counters_mu_;
  std::int64_t jobs_brokered_ = 0;
  std::int64_t jobs_failed_ = 0;
};

}  // namespace beryllium
