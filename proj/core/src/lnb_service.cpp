#include "beryllium/lnb_service.hpp"

#include <filesystem>

#include <httplib.h>

#include "beryllium/wire.hpp"

namespace beryllium {

// ---------------------------------------------------------------------------
// EventLog

EventLog::EventLog(std::string path) : path_(std::move(path)) {
  bool needs_newline = false;
  if (std::filesystem::exists(path_)) {
    std::ifstream in(path_, std::ios::binary);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      // The anomalous flag is derived state: replay recomputes it from the
      // same transition table, so the stored flag is ignored (it exists for
      // humans reading the file).
      JobStatusEvent e;
      try {
        e = wire::event_from_json(wire::decode_bytes(line));
      } catch (const BerylliumError&) {
        // A crash mid-append can leave a torn line; it carries nothing that
        // was acknowledged, so replay skips it rather than refusing to start.
        continue;
      }
      apply(e, would_be_anomalous(e));
    }
    // If the file does not end in a newline (torn tail), the next append
    // must start on a line of its own or it would merge into the junk.
    std::ifstream tail(path_, std::ios::binary | std::ios::ate);
    if (tail && tail.tellg() > 0) {
      tail.seekg(-1, std::ios::end);
      char last = 0;
      tail.get(last);
      needs_newline = last != '\n';
    }
  }
  out_.open(path_, std::ios::app);
  if (!out_) {
    throw BerylliumError(ErrorCode::InvalidArgument,
                         "cannot open event log for append: " + path_);
  }
  if (needs_newline) out_ << '\n';
}

// The first event of a job starts its timeline and is never anomalous; after
// that, anomalous means the state does not follow from the state of the
// highest-seq non-anomalous event.
bool EventLog::would_be_anomalous(const JobStatusEvent& e) const {
  auto cur = current_.find(e.job_id);
  if (cur == current_.end()) return false;
  return !transition_legal(cur->second, e.state);
}

void EventLog::apply(const JobStatusEvent& e, bool anomalous) {
  if (!anomalous) {
    current_[e.job_id] = e.state;
  } else {
    anomalous_[e.job_id].insert(e.seq);
  }
  by_job_[e.job_id].push_back(e);
  ++events_recorded_;
}

EventLog::Recorded EventLog::record(JobStatusEvent e) {
  std::lock_guard<std::mutex> lock(mu_);
  auto& timeline = by_job_[e.job_id];
  e.seq = timeline.empty() ? 1 : timeline.back().seq + 1;
  if (e.at == 0) e.at = now_ms();
  bool anomalous = would_be_anomalous(e);

  json j = wire::to_json(e);
  j["anomalous"] = anomalous;
  out_ << wire::encode(j) << '\n';
  out_.flush();
  if (!out_) {
    throw BerylliumError(ErrorCode::InvalidArgument,
                         "event log append failed: " + path_);
  }

  apply(e, anomalous);
  return Recorded{std::move(e), anomalous};
}

std::optional<EventLog::JobView> EventLog::job(const std::string& job_id) const {
  std::lock_guard<std::mutex> lock(mu_);
  auto it = by_job_.find(job_id);
  if (it == by_job_.end()) return std::nullopt;
  JobView view;
  view.timeline = it->second;
  view.current_state = current_.at(job_id);
  if (auto a = anomalous_.find(job_id); a != anomalous_.end()) {
    view.anomalous_seqs = a->second;
  }
  return view;
}

std::vector<std::string> EventLog::job_ids() const {
  std::lock_guard<std::mutex> lock(mu_);
  std::vector<std::string> out;
  out.reserve(by_job_.size());
  for (const auto& [id, _] : by_job_) out.push_back(id);
  return out;
}

std::int64_t EventLog::events_recorded() const {
  std::lock_guard<std::mutex> lock(mu_);
  return events_recorded_;
}

int EventLog::jobs_seen() const {
  std::lock_guard<std::mutex> lock(mu_);
  return static_cast<int>(by_job_.size());
}

// ---------------------------------------------------------------------------
// LnbService

LnbService::LnbService(Options opts)
    : opts_(opts), container_("lnb", opts.log_level), log_(opts.log_path) {
  container_.register_factory("lnb", [this](const json&, Instance& inst) {
    inst.set_sde(ServiceDataValue::integer("events_recorded", log_.events_recorded()));
    inst.set_sde(ServiceDataValue::integer("jobs_seen", log_.jobs_seen()));
  });
  container_.create_root_instance();
  mount_routes();
}

LnbService::~LnbService() { stop(); }

EventLog::Recorded LnbService::record_event(JobStatusEvent e) {
  EventLog::Recorded stored;
  container_.dispatch("lnb", "record_event", [&](Instance& inst) {
    stored = log_.record(std::move(e));
    inst.set_sde(ServiceDataValue::integer("events_recorded", log_.events_recorded()));
    inst.set_sde(ServiceDataValue::integer("jobs_seen", log_.jobs_seen()));
    return job_state_name(stored.event.state);
  });
  fan_out(stored.event);
  return stored;
}

EventLog::JobView LnbService::query_status(const std::string& job_id) {
  EventLog::JobView view;
  container_.dispatch("lnb", "query_status", [&](Instance&) {
    auto v = log_.job(job_id);
    if (!v) {
      throw BerylliumError(ErrorCode::UnknownJob, "no events for job: " + job_id);
    }
    view = std::move(*v);
    return "ok";
  });
  return view;
}

Subscription LnbService::subscribe(const std::string& topic,
                                   const std::string& callback_url) {
  Subscription sub;
  container_.dispatch("lnb", "subscribe", [&](Instance&) {
    if (!valid_topic(topic)) {
      throw BerylliumError(ErrorCode::InvalidArgument,
                           "topic must be \"all\" or \"job:<job_id>\": " + topic);
    }
    if (!looks_like_http_url(callback_url)) {
      throw BerylliumError(ErrorCode::InvalidArgument,
                           "callback_url is not a valid http URL: " + callback_url);
    }
    sub.subscription_id = "sub-" + random_hex(16);
    sub.topic = topic;
    sub.callback_url = callback_url;
    sub.created_at = now_ms();
    {
      std::lock_guard<std::mutex> lock(subs_mu_);
      subs_[sub.subscription_id] = sub;
    }
    container_.notifier().add_subscription(sub.subscription_id, callback_url);
    return "ok";
  });
  return sub;
}

void LnbService::unsubscribe(const std::string& subscription_id) {
  container_.dispatch("lnb", "unsubscribe", [&](Instance&) {
    {
      std::lock_guard<std::mutex> lock(subs_mu_);
      auto it = subs_.find(subscription_id);
      if (it == subs_.end()) {
        throw BerylliumError(ErrorCode::UnknownInstance,
                             "no such subscription: " + subscription_id);
      }
      subs_.erase(it);
    }
    container_.notifier().remove_subscription(subscription_id);
    return "ok";
  });
}

std::vector<Subscription> LnbService::subscriptions() const {
  std::lock_guard<std::mutex> lock(subs_mu_);
  std::vector<Subscription> out;
  out.reserve(subs_.size());
  for (const auto& [id, s] : subs_) out.push_back(s);
  return out;
}

void LnbService::fan_out(const JobStatusEvent& e) {
  std::vector<std::string> targets;
  {
    std::lock_guard<std::mutex> lock(subs_mu_);
    for (const auto& [id, sub] : subs_) {
      if (topic_matches(sub.topic, e.job_id)) targets.push_back(id);
    }
  }
  json payload = wire::to_json(e);
  for (const auto& id : targets) container_.notifier().publish(id, payload);
}

void LnbService::mount_routes() {
  container_.mount_runtime_routes();

  container_.route_post("/lnb/events", [this](const httplib::Request& req,
                                              httplib::Response& res) {
    json body = wire::decode(req.body, *wire::find_schema("POST", "/lnb/events"),
                             {"job_id", "state", "source"});
    JobStatusEvent e = wire::event_from_json(body);
    e.seq = 0;  // assignment is ours regardless of what the sender claims
    EventLog::Recorded stored = record_event(std::move(e));
    ServiceContainer::send_json(
        res, json{{"anomalous", stored.anomalous}, {"seq", stored.event.seq}});
  });

  container_.route_get("/lnb/jobs/:id", [this](const httplib::Request& req,
                                               httplib::Response& res) {
    const std::string& job_id = req.path_params.at("id");
    EventLog::JobView view = query_status(job_id);
    json timeline = json::array();
    for (const auto& e : view.timeline) {
      json ev = wire::to_json(e);
      ev["anomalous"] = view.anomalous_seqs.count(e.seq) > 0;
      timeline.push_back(std::move(ev));
    }
    ServiceContainer::send_json(
        res, json{{"current_state", job_state_name(view.current_state)},
                  {"job_id", job_id},
                  {"timeline", std::move(timeline)}});
  });

  container_.route_get("/lnb/jobs/:id/events", [this](const httplib::Request& req,
                                                      httplib::Response& res) {
    const std::string& job_id = req.path_params.at("id");
    EventLog::JobView view = query_status(job_id);
    json events = json::array();
    for (const auto& e : view.timeline) events.push_back(wire::to_json(e));
    ServiceContainer::send_json(res,
                                json{{"events", std::move(events)}, {"job_id", job_id}});
  });

  container_.route_post("/lnb/subscribe", [this](const httplib::Request& req,
                                                 httplib::Response& res) {
    json body = wire::decode(req.body, *wire::find_schema("POST", "/lnb/subscribe"),
                             {"topic", "callback_url"});
    Subscription sub = subscribe(wire::require_string(body, "topic"),
                                 wire::require_string(body, "callback_url"));
    ServiceContainer::send_json(res, wire::to_json(sub));
  });

  container_.route_delete("/lnb/subscribe/:id", [this](const httplib::Request& req,
                                                       httplib::Response& res) {
    unsubscribe(req.path_params.at("id"));
    ServiceContainer::send_json(res, json{{"ok", true}});
  });

  container_.route_get("/lnb/sde/:name", [this](const httplib::Request& req,
                                                httplib::Response& res) {
    ServiceDataValue v = container_.query_sde("lnb", req.path_params.at("name"));
    ServiceContainer::send_json(res, wire::to_json(v));
  });
}

bool LnbService::start() { return container_.start(opts_.host, opts_.port); }

void LnbService::wait() { container_.wait(); }

void LnbService::stop() { container_.stop(); }

}  // namespace beryllium
