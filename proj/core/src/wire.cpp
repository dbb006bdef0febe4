#include "beryllium/wire.hpp"

#include <algorithm>

namespace beryllium::wire {

namespace {

json string_set_to_json(const std::set<std::string>& s) {
  json arr = json::array();
  for (const auto& v : s) arr.push_back(v);  // std::set iterates sorted
  return arr;
}

[[noreturn]] void malformed(const std::string& what) {
  throw BerylliumError(ErrorCode::InvalidArgument, "malformed message: " + what);
}

}  // namespace

json to_json(const JobTicket& t) {
  json j;
  j["ticket_id"] = t.ticket_id;
  j["job_id"] = t.job_id;
  if (t.ce_url) j["ce_url"] = *t.ce_url;
  j["issued_at"] = t.issued_at;
  j["reservation_ttl"] = t.reservation_ttl;
  j["slots"] = t.slots;
  return j;
}

json to_json(const JobRequest& r) {
  json j;
  if (!r.job_id.empty()) j["job_id"] = r.job_id;
  j["slots"] = r.slots;
  j["min_free_slots"] = r.min_free_slots;
  j["required_tags"] = string_set_to_json(r.required_tags);
  return j;
}

json to_json(const InputFile& f) {
  return json{{"name", f.name}, {"bytes", base64_encode(f.bytes)}};
}

json to_json(const JobPayload& p) {
  json files = json::array();
  for (const auto& f : p.input_files) files.push_back(to_json(f));
  json j;
  j["job_id"] = p.job_id;
  j["command"] = p.command;
  j["input_files"] = std::move(files);
  j["ticket"] = to_json(p.ticket);
  return j;
}

json to_json(const ResourceDescriptor& d) {
  json j;
  j["ce_id"] = d.ce_id;
  j["ce_url"] = d.ce_url;
  j["total_slots"] = d.total_slots;
  j["free_slots"] = d.free_slots;
  j["tags"] = string_set_to_json(d.tags);
  j["last_seen"] = d.last_seen;
  return j;
}

json to_json(const JobStatusEvent& e) {
  json j;
  j["job_id"] = e.job_id;
  j["state"] = job_state_name(e.state);
  j["source"] = e.source;
  if (e.seq > 0) j["seq"] = e.seq;
  j["at"] = e.at;
  j["detail"] = e.detail;
  return j;
}

json to_json(const ServiceDataValue& v) {
  json j;
  j["name"] = v.name;
  if (v.kind == SdeKind::String) {
    j["value"] = std::get<std::string>(v.value);
  } else {
    j["value"] = std::get<std::int64_t>(v.value);
  }
  j["updated_at"] = v.updated_at;
  return j;
}

json to_json(const Subscription& s) {
  json j;
  j["subscription_id"] = s.subscription_id;
  j["topic"] = s.topic;
  j["callback_url"] = s.callback_url;
  j["created_at"] = s.created_at;
  return j;
}

json to_json(const TicketDbEntry& e) {
  json j;
  j["ticket_id"] = e.ticket_id;
  j["job_id"] = e.job_id;
  j["slots"] = e.slots;
  j["issued_at"] = e.issued_at;
  j["expires_at"] = e.expires_at;
  j["consumed"] = e.consumed;
  return j;
}

std::string require_string(const json& j, const std::string& field) {
  if (!j.is_object() || !j.contains(field)) malformed("missing required field \"" + field + "\"");
  if (!j[field].is_string()) malformed("field \"" + field + "\" must be a string");
  return j[field].get<std::string>();
}

std::int64_t require_int(const json& j, const std::string& field) {
  if (!j.is_object() || !j.contains(field)) malformed("missing required field \"" + field + "\"");
  if (!j[field].is_number_integer()) malformed("field \"" + field + "\" must be an integer");
  return j[field].get<std::int64_t>();
}

bool require_bool(const json& j, const std::string& field) {
  if (!j.is_object() || !j.contains(field)) malformed("missing required field \"" + field + "\"");
  if (!j[field].is_boolean()) malformed("field \"" + field + "\" must be a boolean");
  return j[field].get<bool>();
}

std::set<std::string> string_set_field(const json& j, const std::string& field) {
  std::set<std::string> out;
  if (!j.contains(field)) return out;
  if (!j[field].is_array()) malformed("field \"" + field + "\" must be an array");
  for (const auto& v : j[field]) {
    if (!v.is_string()) malformed("field \"" + field + "\" must hold strings");
    out.insert(v.get<std::string>());
  }
  return out;
}

JobTicket ticket_from_json(const json& j) {
  JobTicket t;
  t.ticket_id = require_string(j, "ticket_id");
  t.job_id = require_string(j, "job_id");
  if (j.contains("ce_url")) {
    if (!j["ce_url"].is_string()) malformed("field \"ce_url\" must be a string");
    t.ce_url = j["ce_url"].get<std::string>();
  }
  t.issued_at = require_int(j, "issued_at");
  t.reservation_ttl = require_int(j, "reservation_ttl");
  t.slots = require_int(j, "slots");
  if (t.slots < 1) malformed("ticket slots must be >= 1");
  if (t.reservation_ttl <= 0) malformed("ticket reservation_ttl must be > 0");
  return t;
}

JobRequest request_from_json(const json& j) {
  JobRequest r;
  if (j.contains("job_id")) r.job_id = require_string(j, "job_id");
  r.slots = require_int(j, "slots");
  if (j.contains("min_free_slots")) r.min_free_slots = require_int(j, "min_free_slots");
  r.required_tags = string_set_field(j, "required_tags");
  if (r.slots < 1) malformed("slots must be >= 1");
  if (r.min_free_slots < 0) malformed("min_free_slots must be >= 0");
  return r;
}

InputFile input_file_from_json(const json& j) {
  InputFile f;
  f.name = require_string(j, "name");
  std::string b64 = require_string(j, "bytes");
  if (!base64_decode(b64, f.bytes)) malformed("field \"bytes\" is not valid base64");
  if (f.name.empty() || f.name.find('/') != std::string::npos || f.name == "." ||
      f.name == "..") {
    malformed("input file name must be a plain file name");
  }
  return f;
}

JobPayload payload_from_json(const json& j) {
  JobPayload p;
  p.job_id = require_string(j, "job_id");
  if (!j.contains("command") || !j["command"].is_array() || j["command"].empty()) {
    malformed("field \"command\" must be a non-empty array");
  }
  for (const auto& c : j["command"]) {
    if (!c.is_string()) malformed("field \"command\" must hold strings");
    p.command.push_back(c.get<std::string>());
  }
  if (j.contains("input_files")) {
    if (!j["input_files"].is_array()) malformed("field \"input_files\" must be an array");
    for (const auto& f : j["input_files"]) p.input_files.push_back(input_file_from_json(f));
  }
  if (!j.contains("ticket")) malformed("missing required field \"ticket\"");
  p.ticket = ticket_from_json(j["ticket"]);
  if (p.ticket.job_id != p.job_id) malformed("ticket job_id does not match payload job_id");
  return p;
}

ResourceDescriptor descriptor_from_json(const json& j) {
  ResourceDescriptor d;
  d.ce_id = require_string(j, "ce_id");
  d.ce_url = require_string(j, "ce_url");
  d.total_slots = require_int(j, "total_slots");
  d.free_slots = require_int(j, "free_slots");
  d.tags = string_set_field(j, "tags");
  if (j.contains("last_seen")) d.last_seen = require_int(j, "last_seen");
  if (d.ce_id.empty()) malformed("ce_id must be non-empty");
  if (!looks_like_http_url(d.ce_url)) malformed("ce_url is not a valid http URL");
  if (d.total_slots < 1) malformed("total_slots must be >= 1");
  if (d.free_slots < 0 || d.free_slots > d.total_slots) {
    malformed("free_slots must satisfy 0 <= free_slots <= total_slots");
  }
  return d;
}

JobStatusEvent event_from_json(const json& j) {
  JobStatusEvent e;
  e.job_id = require_string(j, "job_id");
  auto state = job_state_from_name(require_string(j, "state"));
  if (!state) malformed("unknown job state \"" + j["state"].get<std::string>() + "\"");
  e.state = *state;
  e.source = require_string(j, "source");
  if (j.contains("seq")) e.seq = require_int(j, "seq");
  if (j.contains("at")) e.at = require_int(j, "at");
  if (j.contains("detail")) e.detail = require_string(j, "detail");
  return e;
}

ServiceDataValue sde_from_json(const json& j) {
  ServiceDataValue v;
  v.name = require_string(j, "name");
  if (!j.contains("value")) malformed("missing required field \"value\"");
  if (j["value"].is_string()) {
    v.kind = SdeKind::String;
    v.value = j["value"].get<std::string>();
  } else if (j["value"].is_number_integer()) {
    v.kind = SdeKind::Integer;
    v.value = j["value"].get<std::int64_t>();
  } else {
    malformed("field \"value\" must be an integer or a string");
  }
  v.updated_at = require_int(j, "updated_at");
  return v;
}

Subscription subscription_from_json(const json& j) {
  Subscription s;
  s.subscription_id = require_string(j, "subscription_id");
  s.topic = require_string(j, "topic");
  s.callback_url = require_string(j, "callback_url");
  s.created_at = require_int(j, "created_at");
  return s;
}

TicketDbEntry ticket_db_entry_from_json(const json& j) {
  TicketDbEntry e;
  e.ticket_id = require_string(j, "ticket_id");
  e.job_id = require_string(j, "job_id");
  e.slots = require_int(j, "slots");
  e.issued_at = require_int(j, "issued_at");
  e.expires_at = require_int(j, "expires_at");
  e.consumed = require_bool(j, "consumed");
  return e;
}

std::string encode(const json& j) { return j.dump(); }

json decode_bytes(const std::string& bytes) {
  json j = json::parse(bytes, nullptr, false);
  if (j.is_discarded()) malformed("body is not valid JSON");
  return j;
}

const std::set<std::string>& firewalled_fields() {
  static const std::set<std::string> fields = {"command", "input_files"};
  return fields;
}

bool contains_firewalled_key(const json& j) {
  if (j.is_object()) {
    for (auto it = j.begin(); it != j.end(); ++it) {
      if (firewalled_fields().count(it.key())) return true;
      if (contains_firewalled_key(it.value())) return true;
    }
  } else if (j.is_array()) {
    for (const auto& v : j) {
      if (contains_firewalled_key(v)) return true;
    }
  }
  return false;
}

namespace {

const std::set<std::string> kTicketFields = {"ticket.ticket_id", "ticket.job_id",
                                             "ticket.ce_url",    "ticket.issued_at",
                                             "ticket.reservation_ttl", "ticket.slots"};

std::set<std::string> with_ticket(std::set<std::string> base) {
  base.insert("ticket");
  base.insert(kTicketFields.begin(), kTicketFields.end());
  return base;
}

std::vector<MessageSchema> build_schema_table() {
  std::vector<MessageSchema> t;
  const std::set<std::string> ticket_flat = {"ticket_id", "job_id",          "ce_url",
                                             "issued_at", "reservation_ttl", "slots"};
  const std::set<std::string> sde_fields = {"name", "value", "updated_at"};
  const std::set<std::string> ack = {"ok"};
  const std::set<std::string> error_fields = {"error", "detail"};

  // Container surface, mounted on every service.
  for (const char* svc : {"broker", "index", "lnb", "ce"}) {
    t.push_back({svc, "GET", "/admin/ping", {}, {"alive", "uptime_s"}});
    t.push_back({svc, "POST", "/admin/shutdown", {}, ack});
    t.push_back({svc, "POST", "/admin/loglevel", {"level"}, ack});
    t.push_back({svc, "GET", "/admin/status", {},
                 {"uptime_s", "instance_count", "requests_served", "log_level"}});
    t.push_back({svc, "POST", "/factory/:service_name", {},
                 {"instance_id", "service_name", "state", "sdes"}});
    t.push_back({svc, "DELETE", "/instance/:id", {}, ack});
    t.push_back({svc, "POST", "/instance/:id/active", {"active"}, ack});
    t.push_back({svc, "GET", "/instance/:id/sde/:name", {}, sde_fields});
  }

  // Information Index.
  t.push_back({"index", "POST", "/index/register",
               {"ce_id", "ce_url", "total_slots", "free_slots", "tags"}, ack});
  t.push_back({"index", "POST", "/index/renew", {"ce_id", "free_slots"}, ack});
  t.push_back({"index", "POST", "/index/query", {"min_free_slots", "required_tags"},
               {"resources"}});
  t.push_back({"index", "GET", "/index/sde/:name", {}, sde_fields});

  // Resource Broker.
  t.push_back({"broker", "POST", "/broker/submit",
               {"job_id", "slots", "min_free_slots", "required_tags"},
               with_ticket({"job_id", "ce_url", "attempts"})});
  t.push_back({"broker", "GET", "/broker/sde/:name", {}, sde_fields});

  // Computing Element. Job payloads legitimately flow here.
  {
    std::set<std::string> confirm_resp = ticket_flat;
    confirm_resp.insert("accepted");
    confirm_resp.insert("reason");
    confirm_resp.insert("instance_id");
    t.push_back({"ce", "POST", "/ce/confirm", ticket_flat, confirm_resp});
  }
  t.push_back({"ce", "GET", "/ce/instance/:id/value", {}, with_ticket({})});
  t.push_back({"ce", "POST", "/ce/jobs",
               with_ticket({"job_id", "command", "input_files"}), {"ok", "job_id"}});
  t.push_back({"ce", "GET", "/ce/jobs/:id/status", {}, {"job_id", "state", "detail"}});
  t.push_back({"ce", "GET", "/ce/jobs/:id/results", {},
               {"job_id", "exit_code", "output_files"}});
  t.push_back({"ce", "GET", "/ce/sde/:name", {}, sde_fields});

  // Logging & Bookkeeping.
  t.push_back({"lnb", "POST", "/lnb/events", {"job_id", "state", "source", "at", "detail"},
               {"seq", "anomalous"}});
  t.push_back({"lnb", "GET", "/lnb/jobs/:id", {}, {"job_id", "current_state", "timeline"}});
  t.push_back({"lnb", "GET", "/lnb/jobs/:id/events", {}, {"job_id", "events"}});
  t.push_back({"lnb", "POST", "/lnb/subscribe", {"topic", "callback_url"},
               {"subscription_id", "topic", "callback_url", "created_at"}});
  t.push_back({"lnb", "DELETE", "/lnb/subscribe/:id", {}, ack});
  t.push_back({"lnb", "GET", "/lnb/sde/:name", {}, sde_fields});

  (void)error_fields;  // errors share one shape; not part of per-endpoint schemas
  return t;
}

}  // namespace

const std::vector<MessageSchema>& schema_table() {
  static const std::vector<MessageSchema> table = build_schema_table();
  return table;
}

std::vector<SchemaViolation> schema_audit(const std::vector<MessageSchema>& table) {
  std::vector<SchemaViolation> violations;
  for (const auto& schema : table) {
    if (schema.service != "broker" && schema.service != "index") continue;
    auto scan = [&](const std::set<std::string>& fields) {
      for (const auto& f : fields) {
        // Check the name itself and every dotted segment.
        std::string rest = f;
        for (;;) {
          size_t dot = rest.find('.');
          std::string head = dot == std::string::npos ? rest : rest.substr(0, dot);
          if (firewalled_fields().count(head)) {
            violations.push_back({schema.service, schema.path, f});
            break;
          }
          if (dot == std::string::npos) break;
          rest = rest.substr(dot + 1);
        }
      }
    };
    scan(schema.request_fields);
    scan(schema.response_fields);
  }
  return violations;
}

json decode(const std::string& bytes, const MessageSchema& schema,
            const std::set<std::string>& required_fields) {
  json j = decode_bytes(bytes);
  for (const auto& f : required_fields) {
    if (!j.contains(f)) malformed("missing required field \"" + f + "\"");
  }
  if ((schema.service == "broker" || schema.service == "index") && contains_firewalled_key(j)) {
    malformed("payload field rejected on an information-flow endpoint");
  }
  return j;
}

std::optional<MessageSchema> find_schema(const std::string& method, const std::string& path) {
  for (const auto& s : schema_table()) {
    if (s.method == method && s.path == path) return s;
  }
  return std::nullopt;
}

}  // namespace beryllium::wire
