#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "beryllium/util.hpp"

namespace beryllium {

// Machine-readable error codes; the closed wire set.
enum class ErrorCode {
  InvalidArgument,
  UnknownFactory,
  UnknownInstance,
  UnknownSde,
  UnknownJob,
  TicketMismatch,
  TicketExpired,
  NoResources,
  InstanceInactive,
  AlreadyDestroyed,
  ServiceShuttingDown,
  CapacityExceeded,
};

const char* error_code_name(ErrorCode code);
std::optional<ErrorCode> error_code_from_name(const std::string& name);

// Thrown by domain operations and service handlers; mapped to an ErrorReply
// at the HTTP boundary.
class BerylliumError : public std::runtime_error {
 public:
  BerylliumError(ErrorCode code, std::string detail)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + detail), code_(code),
        detail_(std::move(detail)) {}

  ErrorCode code() const { return code_; }
  const std::string& detail() const { return detail_; }

 private:
  ErrorCode code_;
  std::string detail_;
};

// The reservation capability issued via the broker and validated by the CE
// at job submission. Incomplete until the accepting CE inserts its URL.
struct JobTicket {
  std::string ticket_id;               // 128-bit random, 32 hex chars
  std::string job_id;                  // assigned by the broker
  std::optional<std::string> ce_url;   // present only once a CE accepted
  TimestampMs issued_at = 0;
  std::int64_t reservation_ttl = 0;    // seconds
  std::int64_t slots = 0;

  bool is_complete() const { return ce_url.has_value(); }
  bool operator==(const JobTicket&) const = default;
};

struct JobRequest {
  std::string job_id;                  // empty until the broker assigns one
  std::int64_t slots = 1;
  std::int64_t min_free_slots = 0;
  std::set<std::string> required_tags;

  bool operator==(const JobRequest&) const = default;
};

struct InputFile {
  std::string name;
  std::string bytes;

  bool operator==(const InputFile&) const = default;
};

// Travels only UI->CE (and results CE->UI); never enters broker or index
// messages.
struct JobPayload {
  std::string job_id;
  std::vector<std::string> command;
  std::vector<InputFile> input_files;
  JobTicket ticket;

  bool operator==(const JobPayload&) const = default;
};

struct ResourceDescriptor {
  std::string ce_id;
  std::string ce_url;
  std::int64_t total_slots = 0;
  std::int64_t free_slots = 0;
  std::set<std::string> tags;
  TimestampMs last_seen = 0;

  bool operator==(const ResourceDescriptor&) const = default;
};

enum class JobState { Reserved, Submitted, Running, Done, Failed, Aborted, Expired };

constexpr JobState kAllJobStates[] = {JobState::Reserved, JobState::Submitted, JobState::Running,
                                      JobState::Done,     JobState::Failed,    JobState::Aborted,
                                      JobState::Expired};

const char* job_state_name(JobState s);
std::optional<JobState> job_state_from_name(const std::string& name);

// Legal transition table. Terminal states map to the empty set.
std::set<JobState> next_states(JobState s);
bool is_terminal(JobState s);
bool transition_legal(JobState from, JobState to);

struct JobStatusEvent {
  std::string job_id;
  JobState state = JobState::Reserved;
  std::string source;       // URL of the emitting service
  std::int64_t seq = 0;     // assigned by L&B; 0 = not yet assigned
  TimestampMs at = 0;
  std::string detail;

  bool operator==(const JobStatusEvent&) const = default;
};

enum class SdeKind { Integer, String, Timestamp };

// A named, typed, queryable element of a service instance's state.
struct ServiceDataValue {
  std::string name;
  SdeKind kind = SdeKind::Integer;
  std::variant<std::int64_t, std::string> value;
  TimestampMs updated_at = 0;

  static ServiceDataValue integer(std::string name, std::int64_t v);
  static ServiceDataValue string(std::string name, std::string v);
  static ServiceDataValue timestamp(std::string name, TimestampMs v);

  std::int64_t as_int() const { return std::get<std::int64_t>(value); }
  const std::string& as_string() const { return std::get<std::string>(value); }

  bool operator==(const ServiceDataValue&) const = default;
};

struct Subscription {
  std::string subscription_id;
  std::string topic;           // "all" or "job:<job_id>"
  std::string callback_url;
  TimestampMs created_at = 0;

  bool operator==(const Subscription&) const = default;
};

bool valid_topic(const std::string& topic);
bool topic_matches(const std::string& topic, const std::string& job_id);

// A CE ticket-database row, replayed from the durable NDJSON file.
struct TicketDbEntry {
  std::string ticket_id;
  std::string job_id;
  std::int64_t slots = 0;
  TimestampMs issued_at = 0;
  TimestampMs expires_at = 0;
  bool consumed = false;

  bool operator==(const TicketDbEntry&) const = default;
};

// --- ticket operations ---

// Fresh incomplete ticket: random ticket_id, no ce_url, issued now.
// Throws invalid-argument if slots < 1 or ttl_s <= 0.
JobTicket ticket_new_incomplete(const std::string& job_id, std::int64_t slots, std::int64_t ttl_s);

// Returns a copy of `t` with ce_url inserted; everything else unchanged.
// Throws invalid-argument ("already complete") when t has a ce_url.
JobTicket ticket_complete(const JobTicket& t, const std::string& ce_url);

// True iff ids agree and the stored entry has not been consumed yet.
// Total: never throws.
bool ticket_matches(const JobTicket& presented, const TicketDbEntry& stored);

}  // namespace beryllium
