#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "beryllium/domain.hpp"

namespace beryllium::wire {

using json = nlohmann::json;

// Canonical JSON: objects with lower_snake_case keys, absent optional fields
// omitted (never null), sets as sorted arrays, timestamps as integer
// milliseconds UTC, byte payloads base64. encode() emits the compact
// alphabetically-keyed form, which round-trips bit-identically.

json to_json(const JobTicket& t);
json to_json(const JobRequest& r);
json to_json(const InputFile& f);
json to_json(const JobPayload& p);
json to_json(const ResourceDescriptor& d);
json to_json(const JobStatusEvent& e);
json to_json(const ServiceDataValue& v);
json to_json(const Subscription& s);
json to_json(const TicketDbEntry& e);

// Decoders throw BerylliumError(invalid-argument) on malformed messages.
JobTicket ticket_from_json(const json& j);
JobRequest request_from_json(const json& j);
InputFile input_file_from_json(const json& j);
JobPayload payload_from_json(const json& j);
ResourceDescriptor descriptor_from_json(const json& j);
JobStatusEvent event_from_json(const json& j);
ServiceDataValue sde_from_json(const json& j);
Subscription subscription_from_json(const json& j);
TicketDbEntry ticket_db_entry_from_json(const json& j);

std::string encode(const json& j);
json decode_bytes(const std::string& bytes);

// Field access helpers shared by the services. All throw invalid-argument
// with the offending field named.
std::string require_string(const json& j, const std::string& field);
std::int64_t require_int(const json& j, const std::string& field);
bool require_bool(const json& j, const std::string& field);
std::set<std::string> string_set_field(const json& j, const std::string& field);

// --- message schemas and the separation firewall ---

// Field names that identify job payload content. Broker and index schemas
// (and their live traffic) must never contain them.
const std::set<std::string>& firewalled_fields();

struct MessageSchema {
  std::string service;   // "broker", "index", "lnb", "ce", "container"
  std::string method;    // "GET" | "POST" | "DELETE"
  std::string path;      // pattern, e.g. "/ce/jobs/:id/status"
  std::set<std::string> request_fields;   // top-level and dotted nested names
  std::set<std::string> response_fields;
};

// The declared schema table for every endpoint in the system.
const std::vector<MessageSchema>& schema_table();

struct SchemaViolation {
  std::string service;
  std::string path;
  std::string field;
};

// Statically verifies the firewall invariant: no broker or index schema may
// declare a payload-kind field. Runs in CI and at service start.
std::vector<SchemaViolation> schema_audit(const std::vector<MessageSchema>& table);

// Validates an incoming request body against a schema: required fields must
// be present, and for broker/index schemas no firewalled key may appear at
// any nesting depth. Returns the parsed document.
json decode(const std::string& bytes, const MessageSchema& schema,
            const std::set<std::string>& required_fields);

// True if any key anywhere in `j` is one of the firewalled field names.
bool contains_firewalled_key(const json& j);

std::optional<MessageSchema> find_schema(const std::string& method, const std::string& path);

}  // namespace beryllium::wire
