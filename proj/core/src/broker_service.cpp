#include "beryllium/broker_service.hpp"

#include <algorithm>

#include <httplib.h>

#include "beryllium/wire.hpp"

namespace beryllium {

std::optional<std::string> match_select(
    const std::vector<ResourceDescriptor>& candidates) {
  const ResourceDescriptor* best = nullptr;
  for (const auto& c : candidates) {
    if (!best || c.free_slots > best->free_slots ||
        (c.free_slots == best->free_slots && c.ce_id < best->ce_id)) {
      best = &c;
    }
  }
  if (!best) return std::nullopt;
  return best->ce_id;
}

BrokerService::BrokerService(Options opts)
    : opts_(opts),
      container_("broker", opts.log_level),
      client_(opts.request_timeout_ms) {
  if (opts_.policy != "max-free-slots") {
    throw BerylliumError(ErrorCode::InvalidArgument,
                         "unknown match policy: " + opts_.policy);
  }
  container_.register_factory("broker", [](const json&, Instance& inst) {
    inst.set_sde(ServiceDataValue::integer("jobs_brokered", 0));
    inst.set_sde(ServiceDataValue::integer("jobs_failed", 0));
  });
  container_.create_root_instance();
  mount_routes();
}

BrokerService::~BrokerService() { stop(); }

std::optional<JobTicket> BrokerService::try_confirm(
    const ResourceDescriptor& ce, const JobTicket& incomplete,
    std::string& outcome) {
  HttpReply reply = client_.post(ce.ce_url, "/ce/confirm",
                                 wire::to_json(incomplete));
  if (!reply.transport_ok()) {
    outcome = "unreachable";
    return std::nullopt;
  }
  if (reply.ok() && reply.body.is_object() && reply.body.contains("ticket_id")) {
    JobTicket t = wire::ticket_from_json(reply.body);
    if (!t.is_complete() || t.ticket_id != incomplete.ticket_id) {
      // A malformed acceptance is a broken CE; treat it like a rejection.
      container_.log().warn("CE " + ce.ce_id +
                            " returned an unusable confirmation reply");
      outcome = "rejected";
      return std::nullopt;
    }
    outcome = "accepted";
    return t;
  }
  // Anything else — explicit {"accepted":false}, instance-inactive, or any
  // error reply — counts as this CE declining the reservation.
  outcome = "rejected";
  return std::nullopt;
}

void BrokerService::record_reserved(const BrokeredReservation& r,
                                    const std::string& ce_id) {
  json event{{"job_id", r.job_id},
             {"state", "RESERVED"},
             {"source", container_.url()},
             {"detail", "reserved at " + ce_id}};
  HttpReply reply = client_.post(opts_.lnb_url, "/lnb/events", event);
  if (!reply.ok()) {
    container_.log().warn("failed to record RESERVED event for " + r.job_id);
  }
}

BrokeredReservation BrokerService::submit_request(const JobRequest& req) {
  container_.require_active("broker");
  if (req.slots < 1) {
    throw BerylliumError(ErrorCode::InvalidArgument, "slots must be >= 1");
  }

  const std::string job_id = "job-" + random_hex(12);
  std::vector<AttemptRecord> attempts;
  std::set<std::string> excluded;
  std::optional<BrokeredReservation> result;

  // A request for N slots needs a CE with at least N free, on top of
  // whatever floor the user asked for.
  const std::int64_t min_free = std::max(req.slots, req.min_free_slots);

  for (int round = 0; round < opts_.max_rounds && !result; ++round) {
    json query{{"min_free_slots", min_free},
               {"required_tags", json::array()}};
    for (const auto& t : req.required_tags) query["required_tags"].push_back(t);
    HttpReply reply = client_.post(opts_.index_url, "/index/query", query);
    if (!reply.ok()) {
      container_.log().warn("index query failed (round " +
                            std::to_string(round + 1) + ")");
      continue;
    }

    std::vector<ResourceDescriptor> candidates;
    if (reply.body.contains("resources") && reply.body["resources"].is_array()) {
      for (const auto& r : reply.body["resources"]) {
        ResourceDescriptor d = wire::descriptor_from_json(r);
        if (!excluded.count(d.ce_id)) candidates.push_back(std::move(d));
      }
    }

    auto chosen = match_select(candidates);
    if (!chosen) continue;  // this round's query yielded nothing usable
    const auto& ce = *std::find_if(
        candidates.begin(), candidates.end(),
        [&](const ResourceDescriptor& d) { return d.ce_id == *chosen; });

    JobTicket incomplete =
        ticket_new_incomplete(job_id, req.slots, opts_.ticket_ttl_s);
    std::string outcome;
    std::optional<JobTicket> complete = try_confirm(ce, incomplete, outcome);
    attempts.push_back(AttemptRecord{ce.ce_id, outcome});
    if (complete) {
      result = BrokeredReservation{job_id, *complete, *complete->ce_url, attempts};
    } else {
      // Step-5 retry: exclude this CE for this job and ask the index again.
      excluded.insert(ce.ce_id);
      container_.log().info("CE " + ce.ce_id + " " + outcome + " for " + job_id +
                            "; retrying");
    }
  }

  container_.dispatch("broker", "submit_request", [&](Instance& inst) {
    std::lock_guard<std::mutex> lock(counters_mu_);
    if (result) {
      ++jobs_brokered_;
      inst.set_sde(ServiceDataValue::integer("jobs_brokered", jobs_brokered_));
      return "reserved";
    }
    ++jobs_failed_;
    inst.set_sde(ServiceDataValue::integer("jobs_failed", jobs_failed_));
    return "no-resources";
  });

  if (!result) {
    throw NoResourcesError("no CE accepted the reservation within " +
                               std::to_string(opts_.max_rounds) + " rounds",
                           std::move(attempts));
  }
  record_reserved(*result, result->attempts.back().ce_id);
  return *result;
}

void BrokerService::mount_routes() {
  container_.mount_runtime_routes();

  container_.route_post("/broker/submit", [this](const httplib::Request& req,
                                                 httplib::Response& res) {
    // Decoding through the audited schema rejects payload fields up front:
    // requirements come here, job data never does.
    json body = wire::decode(req.body, *wire::find_schema("POST", "/broker/submit"),
                             {"slots"});
    JobRequest r = wire::request_from_json(body);
    try {
      BrokeredReservation br = submit_request(r);
      json attempts = json::array();
      for (const auto& a : br.attempts) {
        attempts.push_back(json{{"ce_id", a.ce_id}, {"outcome", a.outcome}});
      }
      ServiceContainer::send_json(res, json{{"attempts", std::move(attempts)},
                                            {"ce_url", br.ce_url},
                                            {"job_id", br.job_id},
                                            {"ticket", wire::to_json(br.ticket)}});
    } catch (const NoResourcesError& e) {
      json attempts = json::array();
      for (const auto& a : e.attempts()) {
        attempts.push_back(json{{"ce_id", a.ce_id}, {"outcome", a.outcome}});
      }
      ServiceContainer::send_json(
          res,
          json{{"attempts", std::move(attempts)},
               {"detail", e.detail()},
               {"error", error_code_name(e.code())}},
          ServiceContainer::http_status_for(e.code()));
    }
  });

  container_.route_get("/broker/sde/:name", [this](const httplib::Request& req,
                                                   httplib::Response& res) {
    ServiceDataValue v = container_.query_sde("broker", req.path_params.at("name"));
    ServiceContainer::send_json(res, wire::to_json(v));
  });
}

bool BrokerService::start() { return container_.start(opts_.host, opts_.port); }

void BrokerService::wait() { container_.wait(); }

void BrokerService::stop() { container_.stop(); }

}  // namespace beryllium
