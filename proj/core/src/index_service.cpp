#include "beryllium/index_service.hpp"

#include <algorithm>

#include <httplib.h>

#include "beryllium/wire.hpp"

namespace beryllium {

// ---------------------------------------------------------------------------
// IndexRegistry

void IndexRegistry::register_descriptor(ResourceDescriptor d, TimestampMs now) {
  if (d.ce_id.empty()) {
    throw BerylliumError(ErrorCode::InvalidArgument, "ce_id must be non-empty");
  }
  if (!looks_like_http_url(d.ce_url)) {
    throw BerylliumError(ErrorCode::InvalidArgument,
                         "ce_url is not a valid http URL: " + d.ce_url);
  }
  if (d.total_slots < 1) {
    throw BerylliumError(ErrorCode::InvalidArgument, "total_slots must be >= 1");
  }
  if (d.free_slots < 0 || d.free_slots > d.total_slots) {
    throw BerylliumError(ErrorCode::InvalidArgument,
                         "free_slots must satisfy 0 <= free_slots <= total_slots");
  }
  d.last_seen = now;
  // Key copied out first: the right side of the assignment is evaluated
  // before the subscript and would leave d.ce_id moved-from.
  const std::string ce_id = d.ce_id;
  records_[ce_id] = Record{std::move(d), now + heartbeat_ttl_s_ * 1000};
}

void IndexRegistry::renew(const std::string& ce_id, std::int64_t free_slots,
                          TimestampMs now) {
  auto it = records_.find(ce_id);
  if (it == records_.end()) {
    throw BerylliumError(ErrorCode::InvalidArgument, "unregistered: " + ce_id);
  }
  if (free_slots < 0 || free_slots > it->second.descriptor.total_slots) {
    throw BerylliumError(ErrorCode::InvalidArgument,
                         "free_slots must satisfy 0 <= free_slots <= total_slots");
  }
  it->second.descriptor.free_slots = free_slots;
  it->second.descriptor.last_seen = now;
  it->second.expires_at = now + heartbeat_ttl_s_ * 1000;
}

std::vector<ResourceDescriptor> IndexRegistry::query(
    std::int64_t min_free_slots, const std::set<std::string>& required_tags,
    TimestampMs now) const {
  std::vector<ResourceDescriptor> out;
  for (const auto& [ce_id, rec] : records_) {
    if (rec.expires_at < now) continue;
    if (rec.descriptor.free_slots < min_free_slots) continue;
    if (!std::includes(rec.descriptor.tags.begin(), rec.descriptor.tags.end(),
                       required_tags.begin(), required_tags.end())) {
      continue;
    }
    out.push_back(rec.descriptor);
  }
  // records_ iterates in ce_id order already; keep the explicit sort as the
  // stated contract rather than a map implementation detail.
  std::sort(out.begin(), out.end(),
            [](const ResourceDescriptor& a, const ResourceDescriptor& b) {
              return a.ce_id < b.ce_id;
            });
  return out;
}

int IndexRegistry::sweep_expired(TimestampMs now) {
  int removed = 0;
  for (auto it = records_.begin(); it != records_.end();) {
    if (it->second.expires_at < now) {
      it = records_.erase(it);
      ++removed;
    } else {
      ++it;
    }
  }
  return removed;
}

std::vector<IndexRegistry::Record> IndexRegistry::records() const {
  std::vector<Record> out;
  out.reserve(records_.size());
  for (const auto& [id, rec] : records_) out.push_back(rec);
  return out;
}

// ---------------------------------------------------------------------------
// IndexService

IndexService::IndexService(Options opts)
    : opts_(opts),
      container_("index", opts.log_level),
      registry_(opts.heartbeat_ttl_s) {
  container_.register_factory("index", [](const json&, Instance& inst) {
    inst.set_sde(ServiceDataValue::integer("registered_count", 0));
    inst.set_sde(ServiceDataValue::integer("queries_served", 0));
  });
  container_.create_root_instance();
  mount_routes();
}

IndexService::~IndexService() { stop(); }

void IndexService::refresh_registered_count(Instance* inst) {
  // Caller holds mu_.  Inside a dispatch the instance lock is already held,
  // so the SDE must be written through the handed-in instance; only
  // out-of-dispatch callers (the sweeper) go through the container.
  auto v = ServiceDataValue::integer("registered_count", registry_.size());
  if (inst) {
    inst->set_sde(v);
  } else {
    container_.set_sde("index", v);
  }
}

void IndexService::register_descriptor(const ResourceDescriptor& d) {
  container_.dispatch("index", "register", [&](Instance& inst) {
    std::lock_guard<std::mutex> lock(mu_);
    registry_.register_descriptor(d, now_ms());
    refresh_registered_count(&inst);
    return "ok";
  });
}

void IndexService::renew(const std::string& ce_id, std::int64_t free_slots) {
  container_.dispatch("index", "renew", [&](Instance& inst) {
    std::lock_guard<std::mutex> lock(mu_);
    registry_.renew(ce_id, free_slots, now_ms());
    refresh_registered_count(&inst);
    return "ok";
  });
}

std::vector<ResourceDescriptor> IndexService::query(
    std::int64_t min_free_slots, const std::set<std::string>& required_tags) {
  std::vector<ResourceDescriptor> out;
  container_.dispatch("index", "query", [&](Instance& inst) {
    std::lock_guard<std::mutex> lock(mu_);
    out = registry_.query(min_free_slots, required_tags, now_ms());
    ++queries_served_;
    inst.set_sde(ServiceDataValue::integer("queries_served", queries_served_));
    return "ok";
  });
  return out;
}

int IndexService::sweep_expired() {
  std::lock_guard<std::mutex> lock(mu_);
  int removed = registry_.sweep_expired(now_ms());
  if (removed > 0) {
    refresh_registered_count(nullptr);
    container_.log().info("swept " + std::to_string(removed) +
                          " expired resource record(s)");
  }
  return removed;
}

void IndexService::mount_routes() {
  container_.mount_runtime_routes();

  container_.route_post("/index/register", [this](const httplib::Request& req,
                                                  httplib::Response& res) {
    json body = wire::decode(req.body, *wire::find_schema("POST", "/index/register"),
                             {"ce_id", "ce_url", "total_slots", "free_slots"});
    register_descriptor(wire::descriptor_from_json(body));
    ServiceContainer::send_json(res, json{{"ok", true}});
  });

  container_.route_post("/index/renew", [this](const httplib::Request& req,
                                               httplib::Response& res) {
    json body = wire::decode(req.body, *wire::find_schema("POST", "/index/renew"),
                             {"ce_id", "free_slots"});
    renew(wire::require_string(body, "ce_id"),
          wire::require_int(body, "free_slots"));
    ServiceContainer::send_json(res, json{{"ok", true}});
  });

  container_.route_post("/index/query", [this](const httplib::Request& req,
                                               httplib::Response& res) {
    json body = wire::decode(req.body, *wire::find_schema("POST", "/index/query"), {});
    std::int64_t min_free = 0;
    if (body.contains("min_free_slots")) {
      min_free = wire::require_int(body, "min_free_slots");
    }
    auto tags = wire::string_set_field(body, "required_tags");
    json resources = json::array();
    for (const auto& d : query(min_free, tags)) {
      resources.push_back(wire::to_json(d));
    }
    ServiceContainer::send_json(res, json{{"resources", std::move(resources)}});
  });

  container_.route_get("/index/sde/:name", [this](const httplib::Request& req,
                                                  httplib::Response& res) {
    ServiceDataValue v = container_.query_sde("index", req.path_params.at("name"));
    ServiceContainer::send_json(res, wire::to_json(v));
  });
}

bool IndexService::start() {
  if (!container_.start(opts_.host, opts_.port)) return false;
  if (opts_.run_sweeper) {
    sweeper_ = std::thread([this] {
      // Sweep twice per TTL so a record is reaped at most TTL/2 late.
      auto period = std::chrono::milliseconds(
          std::max<std::int64_t>(100, opts_.heartbeat_ttl_s * 1000 / 2));
      std::unique_lock<std::mutex> lock(sweeper_mu_);
      while (!sweeper_cv_.wait_for(lock, period, [this] { return stopping_; })) {
        sweep_expired();
      }
    });
  }
  return true;
}

void IndexService::stop() {
  {
    std::lock_guard<std::mutex> lock(sweeper_mu_);
    stopping_ = true;
    sweeper_cv_.notify_all();
  }
  if (sweeper_.joinable()) sweeper_.join();
  container_.stop();
}

void IndexService::wait() {
  container_.wait();
  {
    std::lock_guard<std::mutex> lock(sweeper_mu_);
    stopping_ = true;
    sweeper_cv_.notify_all();
  }
  if (sweeper_.joinable()) sweeper_.join();
}

}  // namespace beryllium
