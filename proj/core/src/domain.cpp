#include "beryllium/domain.hpp"

namespace beryllium {

const char* error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return "invalid-argument";
    case ErrorCode::UnknownFactory: return "unknown-factory";
    case ErrorCode::UnknownInstance: return "unknown-instance";
    case ErrorCode::UnknownSde: return "unknown-sde";
    case ErrorCode::UnknownJob: return "unknown-job";
    case ErrorCode::TicketMismatch: return "ticket-mismatch";
    case ErrorCode::TicketExpired: return "ticket-expired";
    case ErrorCode::NoResources: return "no-resources";
    case ErrorCode::InstanceInactive: return "instance-inactive";
    case ErrorCode::AlreadyDestroyed: return "already-destroyed";
    case ErrorCode::ServiceShuttingDown: return "service-shutting-down";
    case ErrorCode::CapacityExceeded: return "capacity-exceeded";
  }
  return "invalid-argument";
}

std::optional<ErrorCode> error_code_from_name(const std::string& name) {
  static const std::pair<const char*, ErrorCode> table[] = {
      {"invalid-argument", ErrorCode::InvalidArgument},
      {"unknown-factory", ErrorCode::UnknownFactory},
      {"unknown-instance", ErrorCode::UnknownInstance},
      {"unknown-sde", ErrorCode::UnknownSde},
      {"unknown-job", ErrorCode::UnknownJob},
      {"ticket-mismatch", ErrorCode::TicketMismatch},
      {"ticket-expired", ErrorCode::TicketExpired},
      {"no-resources", ErrorCode::NoResources},
      {"instance-inactive", ErrorCode::InstanceInactive},
      {"already-destroyed", ErrorCode::AlreadyDestroyed},
      {"service-shutting-down", ErrorCode::ServiceShuttingDown},
      {"capacity-exceeded", ErrorCode::CapacityExceeded},
  };
  for (const auto& [n, c] : table) {
    if (name == n) return c;
  }
  return std::nullopt;
}

const char* job_state_name(JobState s) {
  switch (s) {
    case JobState::Reserved: return "RESERVED";
    case JobState::Submitted: return "SUBMITTED";
    case JobState::Running: return "RUNNING";
    case JobState::Done: return "DONE";
    case JobState::Failed: return "FAILED";
    case JobState::Aborted: return "ABORTED";
    case JobState::Expired: return "EXPIRED";
  }
  return "RESERVED";
}

std::optional<JobState> job_state_from_name(const std::string& name) {
  for (JobState s : kAllJobStates) {
    if (name == job_state_name(s)) return s;
  }
  return std::nullopt;
}

std::set<JobState> next_states(JobState s) {
  switch (s) {
    case JobState::Reserved: return {JobState::Submitted, JobState::Expired};
    case JobState::Submitted: return {JobState::Running, JobState::Aborted};
    case JobState::Running: return {JobState::Done, JobState::Failed};
    case JobState::Done:
    case JobState::Failed:
    case JobState::Aborted:
    case JobState::Expired: return {};
  }
  return {};
}

bool is_terminal(JobState s) { return next_states(s).empty(); }

bool transition_legal(JobState from, JobState to) { return next_states(from).count(to) > 0; }

ServiceDataValue ServiceDataValue::integer(std::string name, std::int64_t v) {
  return ServiceDataValue{std::move(name), SdeKind::Integer, v, now_ms()};
}

ServiceDataValue ServiceDataValue::string(std::string name, std::string v) {
  return ServiceDataValue{std::move(name), SdeKind::String, std::move(v), now_ms()};
}

ServiceDataValue ServiceDataValue::timestamp(std::string name, TimestampMs v) {
  return ServiceDataValue{std::move(name), SdeKind::Timestamp, v, now_ms()};
}

bool valid_topic(const std::string& topic) {
  if (topic == "all") return true;
  return topic.rfind("job:", 0) == 0 && topic.size() > 4;
}

bool topic_matches(const std::string& topic, const std::string& job_id) {
  if (topic == "all") return true;
  return topic == "job:" + job_id;
}

JobTicket ticket_new_incomplete(const std::string& job_id, std::int64_t slots,
                                std::int64_t ttl_s) {
  if (slots < 1) throw BerylliumError(ErrorCode::InvalidArgument, "slots must be >= 1");
  if (ttl_s <= 0) throw BerylliumError(ErrorCode::InvalidArgument, "reservation_ttl must be > 0");
  JobTicket t;
  t.ticket_id = random_hex(32);
  t.job_id = job_id;
  t.issued_at = now_ms();
  t.reservation_ttl = ttl_s;
  t.slots = slots;
  return t;
}

JobTicket ticket_complete(const JobTicket& t, const std::string& ce_url) {
  if (t.is_complete()) {
    throw BerylliumError(ErrorCode::InvalidArgument, "ticket already complete");
  }
  JobTicket out = t;
  out.ce_url = ce_url;
  return out;
}

bool ticket_matches(const JobTicket& presented, const TicketDbEntry& stored) {
  return presented.ticket_id == stored.ticket_id && presented.job_id == stored.job_id &&
         !stored.consumed;
}

}  // namespace beryllium
