#include "beryllium/container.hpp"

#include <chrono>
#include <utility>

#include <httplib.h>

#include "beryllium/wire.hpp"

namespace beryllium {

namespace {

constexpr int kServerThreads = 64;
constexpr int kNotifyRetries = 3;
constexpr int kNotifyBackoffMs[kNotifyRetries] = {200, 400, 800};

}  // namespace

std::string instance_status_name(InstanceStatus s) {
  switch (s) {
    case InstanceStatus::Active: return "ACTIVE";
    case InstanceStatus::Inactive: return "INACTIVE";
    case InstanceStatus::Destroyed: return "DESTROYED";
  }
  return "ACTIVE";
}

// ---------------------------------------------------------------------------
// NotificationDispatcher

NotificationDispatcher::NotificationDispatcher(Logger& log) : log_(log) {
  post_fn_ = &NotificationDispatcher::http_post_json;
}

NotificationDispatcher::~NotificationDispatcher() { stop_all(); }

int NotificationDispatcher::http_post_json(const std::string& url,
                                           const json& payload) {
  std::string host;
  std::string path;
  int port = 0;
  if (!split_http_url(url, host, port, path)) return -1;
  httplib::Client cli(host, port);
  cli.set_connection_timeout(2, 0);
  cli.set_read_timeout(5, 0);
  auto res = cli.Post(path, payload.dump(), "application/json");
  return res ? res->status : -1;
}

void NotificationDispatcher::set_post_fn(PostFn fn) {
  std::lock_guard<std::mutex> lock(mu_);
  post_fn_ = std::move(fn);
}

void NotificationDispatcher::add_subscription(const std::string& subscription_id,
                                              const std::string& callback_url) {
  auto sub = std::make_shared<Subscriber>();
  sub->url = callback_url;
  {
    std::lock_guard<std::mutex> lock(mu_);
    if (subs_.count(subscription_id)) {
      throw BerylliumError(ErrorCode::InvalidArgument,
                           "subscription already exists: " + subscription_id);
    }
    subs_[subscription_id] = sub;
  }
  sub->worker = std::thread([this, sub] { worker_loop(sub); });
}

bool NotificationDispatcher::remove_subscription(
    const std::string& subscription_id) {
  std::shared_ptr<Subscriber> sub;
  {
    std::lock_guard<std::mutex> lock(mu_);
    auto it = subs_.find(subscription_id);
    if (it == subs_.end()) return false;
    sub = it->second;
    subs_.erase(it);
  }
  {
    std::lock_guard<std::mutex> lock(sub->mu);
    sub->stopping = true;
    sub->cv.notify_all();
  }
  if (sub->worker.joinable()) sub->worker.join();
  return true;
}

bool NotificationDispatcher::has_subscription(
    const std::string& subscription_id) const {
  std::lock_guard<std::mutex> lock(mu_);
  return subs_.count(subscription_id) > 0;
}

bool NotificationDispatcher::publish(const std::string& subscription_id,
                                     const json& payload) {
  std::shared_ptr<Subscriber> sub;
  {
    std::lock_guard<std::mutex> lock(mu_);
    auto it = subs_.find(subscription_id);
    if (it == subs_.end()) return false;
    sub = it->second;
  }
  std::lock_guard<std::mutex> lock(sub->mu);
  sub->queue.push_back(payload);
  sub->cv.notify_all();
  return true;
}

void NotificationDispatcher::worker_loop(std::shared_ptr<Subscriber> sub) {
  for (;;) {
    json payload;
    {
      std::unique_lock<std::mutex> lock(sub->mu);
      sub->cv.wait(lock, [&] { return sub->stopping || !sub->queue.empty(); });
      if (sub->stopping) return;
      payload = std::move(sub->queue.front());
      sub->queue.pop_front();
      sub->busy = true;
    }

    PostFn post;
    {
      std::lock_guard<std::mutex> lock(mu_);
      post = post_fn_;
    }

    bool delivered = false;
    for (int attempt = 0; attempt <= kNotifyRetries; ++attempt) {
      if (attempt > 0) {
        std::unique_lock<std::mutex> lock(sub->mu);
        sub->cv.wait_for(lock,
                         std::chrono::milliseconds(kNotifyBackoffMs[attempt - 1]),
                         [&] { return sub->stopping; });
        if (sub->stopping) break;
      }
      int status = post(sub->url, payload);
      if (status >= 200 && status < 300) {
        delivered = true;
        break;
      }
      log_.debug("notify attempt " + std::to_string(attempt + 1) + " to " +
                 sub->url + " failed (status " + std::to_string(status) + ")");
    }

    if (delivered) {
      deliveries_.fetch_add(1);
    } else {
      failures_.fetch_add(1);
      log_.warn("notification to " + sub->url + " dropped after " +
                std::to_string(kNotifyRetries + 1) + " attempts");
    }

    {
      std::lock_guard<std::mutex> lock(sub->mu);
      sub->busy = false;
      sub->cv.notify_all();
    }
  }
}

void NotificationDispatcher::drain() {
  for (;;) {
    bool idle = true;
    {
      std::lock_guard<std::mutex> lock(mu_);
      for (auto& [id, sub] : subs_) {
        std::lock_guard<std::mutex> sl(sub->mu);
        if (!sub->queue.empty() || sub->busy) {
          idle = false;
          break;
        }
      }
    }
    if (idle) return;
    std::this_thread::sleep_for(std::chrono::milliseconds(10));
  }
}

void NotificationDispatcher::stop_all() {
  std::map<std::string, std::shared_ptr<Subscriber>> subs;
  {
    std::lock_guard<std::mutex> lock(mu_);
    subs.swap(subs_);
  }
  for (auto& [id, sub] : subs) {
    {
      std::lock_guard<std::mutex> lock(sub->mu);
      sub->stopping = true;
      sub->cv.notify_all();
    }
    if (sub->worker.joinable()) sub->worker.join();
  }
}

// ---------------------------------------------------------------------------
// ServiceContainer

ServiceContainer::ServiceContainer(std::string service_kind, LogLevel level)
    : service_kind_(std::move(service_kind)),
      log_(service_kind_, level),
      notifier_(log_),
      svr_(std::make_unique<httplib::Server>()) {
  svr_->new_task_queue = [] { return new httplib::ThreadPool(kServerThreads); };
}

ServiceContainer::~ServiceContainer() {
  stop();
  wait();
}

int ServiceContainer::http_status_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument:
      return 400;
    case ErrorCode::UnknownFactory:
    case ErrorCode::UnknownInstance:
    case ErrorCode::UnknownSde:
    case ErrorCode::UnknownJob:
      return 404;
    case ErrorCode::TicketMismatch:
    case ErrorCode::TicketExpired:
    case ErrorCode::NoResources:
    case ErrorCode::InstanceInactive:
    case ErrorCode::AlreadyDestroyed:
    case ErrorCode::CapacityExceeded:
      return 409;
    case ErrorCode::ServiceShuttingDown:
      return 503;
  }
  return 500;
}

void ServiceContainer::send_json(httplib::Response& res, const json& body,
                                 int status) {
  res.status = status;
  res.set_content(wire::encode(body), "application/json");
}

void ServiceContainer::send_error(httplib::Response& res, ErrorCode code,
                                  const std::string& detail) {
  send_json(res, json{{"error", error_code_name(code)}, {"detail", detail}},
            http_status_for(code));
}

// ---- instance registry ----

void ServiceContainer::register_factory(const std::string& service_name,
                                        FactoryFn fn) {
  std::lock_guard<std::mutex> lock(registry_mu_);
  factories_[service_name] = std::move(fn);
}

void ServiceContainer::create_root_instance(const json& init_args) {
  FactoryFn factory;
  {
    std::lock_guard<std::mutex> lock(registry_mu_);
    auto it = factories_.find(service_kind_);
    if (it == factories_.end()) {
      throw BerylliumError(ErrorCode::UnknownFactory,
                           "no factory registered for '" + service_kind_ + "'");
    }
    factory = it->second;
    if (slots_.count(service_kind_)) {
      throw BerylliumError(ErrorCode::InvalidArgument,
                           "root instance already exists");
    }
  }
  auto slot = std::make_shared<Slot>(service_kind_, service_kind_);
  {
    std::lock_guard<std::mutex> lock(slot->mu);
    slot->instance.set_sde(ServiceDataValue::integer("operations_count", 0));
    slot->instance.set_sde(ServiceDataValue::string("last_operation", ""));
    factory(init_args, slot->instance);
  }
  std::lock_guard<std::mutex> lock(registry_mu_);
  slots_[service_kind_] = std::move(slot);
}

InstanceInfo ServiceContainer::create_instance(const std::string& service_name,
                                               const json& init_args) {
  FactoryFn factory;
  std::string id;
  {
    std::lock_guard<std::mutex> lock(registry_mu_);
    auto it = factories_.find(service_name);
    if (it == factories_.end()) {
      throw BerylliumError(ErrorCode::UnknownFactory,
                           "no factory registered for '" + service_name + "'");
    }
    factory = it->second;
    id = service_name + "-" + std::to_string(++next_instance_serial_);
  }
  auto slot = std::make_shared<Slot>(id, service_name);
  {
    std::lock_guard<std::mutex> lock(slot->mu);
    slot->instance.set_sde(ServiceDataValue::integer("operations_count", 0));
    slot->instance.set_sde(ServiceDataValue::string("last_operation", ""));
    factory(init_args, slot->instance);
  }
  InstanceInfo info{id, service_name, InstanceStatus::Active};
  std::lock_guard<std::mutex> lock(registry_mu_);
  slots_[id] = std::move(slot);
  log_.info("created instance " + id);
  return info;
}

std::shared_ptr<ServiceContainer::Slot> ServiceContainer::find_slot(
    const std::string& instance_id) {
  std::lock_guard<std::mutex> lock(registry_mu_);
  auto it = slots_.find(instance_id);
  return it == slots_.end() ? nullptr : it->second;
}

std::shared_ptr<ServiceContainer::Slot> ServiceContainer::require_live_slot(
    const std::string& instance_id) {
  auto slot = find_slot(instance_id);
  if (!slot) {
    throw BerylliumError(ErrorCode::UnknownInstance,
                         "no such instance: " + instance_id);
  }
  return slot;
}

void ServiceContainer::destroy_instance(const std::string& instance_id) {
  auto slot = require_live_slot(instance_id);
  std::lock_guard<std::mutex> lock(slot->mu);
  if (slot->instance.status_ == InstanceStatus::Destroyed) {
    throw BerylliumError(ErrorCode::AlreadyDestroyed,
                         "instance already destroyed: " + instance_id);
  }
  slot->instance.status_ = InstanceStatus::Destroyed;
  slot->instance.state_.reset();
  log_.info("destroyed instance " + instance_id);
}

void ServiceContainer::set_instance_active(const std::string& instance_id,
                                           bool active) {
  auto slot = require_live_slot(instance_id);
  std::lock_guard<std::mutex> lock(slot->mu);
  if (slot->instance.status_ == InstanceStatus::Destroyed) {
    throw BerylliumError(ErrorCode::AlreadyDestroyed,
                         "instance already destroyed: " + instance_id);
  }
  slot->instance.status_ =
      active ? InstanceStatus::Active : InstanceStatus::Inactive;
  log_.info(std::string(active ? "activated" : "deactivated") + " instance " +
            instance_id);
}

ServiceDataValue ServiceContainer::query_sde(const std::string& instance_id,
                                             const std::string& sde_name) {
  auto slot = require_live_slot(instance_id);
  std::lock_guard<std::mutex> lock(slot->mu);
  // A destroyed instance is no longer addressable, matching dispatch.
  if (slot->instance.status_ == InstanceStatus::Destroyed) {
    throw BerylliumError(ErrorCode::UnknownInstance,
                         "no such instance: " + instance_id);
  }
  auto v = slot->instance.sde(sde_name);
  if (!v) {
    throw BerylliumError(ErrorCode::UnknownSde,
                         "instance " + instance_id + " declares no SDE '" +
                             sde_name + "'");
  }
  return *v;
}

std::vector<InstanceInfo> ServiceContainer::list_instances() {
  std::vector<std::shared_ptr<Slot>> snapshot;
  {
    std::lock_guard<std::mutex> lock(registry_mu_);
    snapshot.reserve(slots_.size());
    for (auto& [id, slot] : slots_) snapshot.push_back(slot);
  }
  std::vector<InstanceInfo> out;
  for (auto& slot : snapshot) {
    std::lock_guard<std::mutex> lock(slot->mu);
    if (slot->instance.status_ == InstanceStatus::Destroyed) continue;
    out.push_back(InstanceInfo{slot->instance.id(), slot->instance.service_name(),
                               slot->instance.status_});
  }
  return out;
}

std::vector<std::string> ServiceContainer::instance_op_log(
    const std::string& instance_id) {
  auto slot = require_live_slot(instance_id);
  std::lock_guard<std::mutex> lock(slot->mu);
  return slot->instance.op_log();
}

void ServiceContainer::require_active(const std::string& instance_id) {
  auto slot = require_live_slot(instance_id);
  std::lock_guard<std::mutex> lock(slot->mu);
  if (slot->instance.status_ == InstanceStatus::Destroyed) {
    throw BerylliumError(ErrorCode::UnknownInstance,
                         "no such instance: " + instance_id);
  }
  if (slot->instance.status_ == InstanceStatus::Inactive) {
    throw BerylliumError(ErrorCode::InstanceInactive,
                         "instance is deactivated: " + instance_id);
  }
}

void ServiceContainer::set_sde(const std::string& instance_id,
                               const ServiceDataValue& v) {
  auto slot = require_live_slot(instance_id);
  std::lock_guard<std::mutex> lock(slot->mu);
  if (slot->instance.status_ == InstanceStatus::Destroyed) {
    throw BerylliumError(ErrorCode::UnknownInstance,
                         "no such instance: " + instance_id);
  }
  slot->instance.set_sde(v);
}

void ServiceContainer::dispatch(const std::string& instance_id,
                                const std::string& op_name, OpFn fn) {
  auto slot = require_live_slot(instance_id);
  std::lock_guard<std::mutex> lock(slot->mu);
  Instance& inst = slot->instance;
  if (inst.status_ == InstanceStatus::Destroyed) {
    throw BerylliumError(ErrorCode::UnknownInstance,
                         "no such instance: " + instance_id);
  }
  if (inst.status_ == InstanceStatus::Inactive) {
    throw BerylliumError(ErrorCode::InstanceInactive,
                         "instance is deactivated: " + instance_id);
  }

  auto record = [&](const std::string& outcome) {
    inst.op_log_.push_back(op_name + ":" + outcome);
    std::int64_t count = 0;
    if (auto c = inst.sde("operations_count"); c && c->kind == SdeKind::Integer) {
      count = std::get<std::int64_t>(c->value);
    }
    inst.set_sde(ServiceDataValue::integer("operations_count", count + 1));
    inst.set_sde(ServiceDataValue::string("last_operation", inst.op_log_.back()));
  };

  try {
    std::string outcome = fn(inst);
    record(outcome);
  } catch (const BerylliumError& e) {
    record(error_code_name(e.code()));
    throw;
  }
}

// ---- HTTP surface ----

void ServiceContainer::wrap_and_register(const std::string& method,
                                         const std::string& pattern,
                                         Handler h) {
  auto wrapped = [this, h = std::move(h), method,
                  pattern](const httplib::Request& req, httplib::Response& res) {
    requests_served_.fetch_add(1);
    try {
      if (shutting_down_.load()) {
        throw BerylliumError(ErrorCode::ServiceShuttingDown,
                             "container is shutting down");
      }
      h(req, res);
    } catch (const BerylliumError& e) {
      send_error(res, e.code(), e.detail());
    } catch (const std::exception& e) {
      log_.error(std::string("unhandled exception in ") + method + " " +
                 pattern + ": " + e.what());
      send_json(res,
                json{{"error", "invalid-argument"},
                     {"detail", std::string("internal error: ") + e.what()}},
                500);
    }
    log_.debug(method + " " + req.path + " -> " + std::to_string(res.status));
  };
  if (method == "GET") {
    svr_->Get(pattern, std::move(wrapped));
  } else if (method == "POST") {
    svr_->Post(pattern, std::move(wrapped));
  } else if (method == "DELETE") {
    svr_->Delete(pattern, std::move(wrapped));
  }
}

void ServiceContainer::route_get(const std::string& pattern, Handler h) {
  wrap_and_register("GET", pattern, std::move(h));
}
void ServiceContainer::route_post(const std::string& pattern, Handler h) {
  wrap_and_register("POST", pattern, std::move(h));
}
void ServiceContainer::route_delete(const std::string& pattern, Handler h) {
  wrap_and_register("DELETE", pattern, std::move(h));
}

void ServiceContainer::handle_admin_status(const httplib::Request&,
                                           httplib::Response& res) {
  ContainerStats s = stats();
  send_json(res, json{{"instance_count", s.instance_count},
                      {"log_level", log_level_name(s.log_level)},
                      {"requests_served", s.requests_served},
                      {"uptime_s", s.uptime_s}});
}

void ServiceContainer::mount_runtime_routes() {
  route_get("/admin/ping", [this](const httplib::Request&, httplib::Response& res) {
    std::int64_t up = started_at_ms_ ? (now_ms() - started_at_ms_) / 1000 : 0;
    send_json(res, json{{"alive", true}, {"uptime_s", up}});
  });

  // The shutdown reply must reach the client before the listener stops, so
  // the actual stop runs on a detached-from-request thread after a grace
  // period that lets in-flight handlers finish.
  route_post("/admin/shutdown",
             [this](const httplib::Request&, httplib::Response& res) {
               bool already = shutting_down_.exchange(true);
               send_json(res, json{{"ok", true}});
               if (already) return;
               log_.info("shutdown requested");
               shutdown_thread_ = std::thread([this] {
                 std::this_thread::sleep_for(std::chrono::milliseconds(150));
                 svr_->stop();
               });
             });

  route_post("/admin/loglevel",
             [this](const httplib::Request& req, httplib::Response& res) {
               json body = wire::decode_bytes(req.body);
               std::string name = wire::require_string(body, "level");
               auto level = log_level_from_name(name);
               if (!level) {
                 throw BerylliumError(ErrorCode::InvalidArgument,
                                      "invalid-level: '" + name + "'");
               }
               log_.set_level(*level);
               send_json(res, json{{"ok", true}});
             });

  route_get("/admin/status",
            [this](const httplib::Request& req, httplib::Response& res) {
              handle_admin_status(req, res);
            });

  route_post("/factory/:service_name",
             [this](const httplib::Request& req, httplib::Response& res) {
               std::string service_name = req.path_params.at("service_name");
               json args = req.body.empty() ? json::object()
                                            : wire::decode_bytes(req.body);
               InstanceInfo info = create_instance(service_name, args);
               json sdes = json::object();
               auto slot = find_slot(info.instance_id);
               if (slot) {
                 std::lock_guard<std::mutex> lock(slot->mu);
                 for (auto& [name, v] : slot->instance.sdes()) {
                   sdes[name] = wire::to_json(v);
                 }
               }
               send_json(res, json{{"instance_id", info.instance_id},
                                   {"sdes", sdes},
                                   {"service_name", info.service_name},
                                   {"state", instance_status_name(info.status)}});
             });

  route_delete("/instance/:id",
               [this](const httplib::Request& req, httplib::Response& res) {
                 destroy_instance(req.path_params.at("id"));
                 send_json(res, json{{"ok", true}});
               });

  route_post("/instance/:id/active",
             [this](const httplib::Request& req, httplib::Response& res) {
               json body = wire::decode_bytes(req.body);
               bool active = wire::require_bool(body, "active");
               set_instance_active(req.path_params.at("id"), active);
               send_json(res, json{{"ok", true}});
             });

  route_get("/instance/:id/sde/:name",
            [this](const httplib::Request& req, httplib::Response& res) {
              ServiceDataValue v = query_sde(req.path_params.at("id"),
                                             req.path_params.at("name"));
              send_json(res, wire::to_json(v));
            });
}

bool ServiceContainer::start(const std::string& host, int port) {
  host_ = host;
  if (port == 0) {
    bound_port_ = svr_->bind_to_any_port(host);
    if (bound_port_ <= 0) return false;
  } else {
    if (!svr_->bind_to_port(host, port)) {
      log_.error("failed to bind " + host + ":" + std::to_string(port));
      return false;
    }
    bound_port_ = port;
  }
  started_at_ms_ = now_ms();
  serve_thread_ = std::thread([this] { svr_->listen_after_bind(); });
  svr_->wait_until_ready();
  log_.info("listening on " + url());
  return true;
}

void ServiceContainer::wait() {
  if (serve_thread_.joinable()) serve_thread_.join();
  if (shutdown_thread_.joinable()) shutdown_thread_.join();
  std::lock_guard<std::mutex> lock(stopped_mu_);
  if (!stopped_fns_ran_) {
    stopped_fns_ran_ = true;
    for (auto& fn : stopped_fns_) fn();
    notifier_.stop_all();
  }
}

void ServiceContainer::stop() {
  shutting_down_.store(true);
  if (svr_) svr_->stop();
}

void ServiceContainer::on_stopped(std::function<void()> fn) {
  std::lock_guard<std::mutex> lock(stopped_mu_);
  stopped_fns_.push_back(std::move(fn));
}

std::string ServiceContainer::url() const {
  return "http://" + host_ + ":" + std::to_string(bound_port_);
}

ContainerStats ServiceContainer::stats() {
  ContainerStats s;
  s.uptime_s = started_at_ms_ ? (now_ms() - started_at_ms_) / 1000 : 0;
  s.requests_served = requests_served_.load();
  s.instance_count = static_cast<int>(list_instances().size());
  s.log_level = log_.level();
  return s;
}

}  // namespace beryllium
