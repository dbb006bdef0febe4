#pragma once

// Service hosting runtime.
//
// Every beryllium service process runs inside a ServiceContainer: an HTTP
// server that owns a registry of stateful service instances.  Instances are
// created through named factories, carry service data elements (SDEs) that
// can be queried individually, and can be deactivated, reactivated, and
// destroyed at runtime without restarting the process.  All service logic
// runs through ServiceContainer::dispatch, which enforces the instance
// lifecycle gate and maintains the per-instance operation log and the
// auto-maintained SDEs (operations_count, last_operation).
//
// The container also hosts the administrative surface shared by every
// service (/admin/ping, /admin/shutdown, /admin/loglevel, /admin/status,
// /factory/..., /instance/...) and a NotificationDispatcher that delivers
// event payloads to subscriber callback URLs with bounded retry.

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "beryllium/domain.hpp"
#include "beryllium/logging.hpp"
#include "beryllium/util.hpp"

// Forward-declare the httplib types so that container.hpp stays cheap to
// include; only container.cpp (and service code that registers routes) needs
// the full httplib header.
namespace httplib {
class Server;
struct Request;
struct Response;
}  // namespace httplib

namespace beryllium {

using json = nlohmann::json;

enum class InstanceStatus { Active, Inactive, Destroyed };

std::string instance_status_name(InstanceStatus s);

// One stateful service instance.  Mutable fields are guarded by the mutex in
// the registry slot; service code only touches an Instance inside a dispatch
// callback (or a factory callback), where that lock is already held.
class Instance {
 public:
  Instance(std::string id, std::string service_name)
      : id_(std::move(id)), service_name_(std::move(service_name)) {}

  const std::string& id() const { return id_; }
  const std::string& service_name() const { return service_name_; }

  void set_sde(const ServiceDataValue& v) { sdes_[v.name] = v; }
  std::optional<ServiceDataValue> sde(const std::string& name) const {
    auto it = sdes_.find(name);
    if (it == sdes_.end()) return std::nullopt;
    return it->second;
  }
  const std::map<std::string, ServiceDataValue>& sdes() const { return sdes_; }

  // Arbitrary service-specific state attached by the factory.  Held as a
  // shared_ptr<void> so the container does not need to know the type.
  template <typename T>
  std::shared_ptr<T> state() const {
    return std::static_pointer_cast<T>(state_);
  }
  void attach_state(std::shared_ptr<void> s) { state_ = std::move(s); }

  const std::vector<std::string>& op_log() const { return op_log_; }

 private:
  friend class ServiceContainer;

  std::string id_;
  std::string service_name_;
  InstanceStatus status_ = InstanceStatus::Active;
  std::map<std::string, ServiceDataValue> sdes_;
  std::vector<std::string> op_log_;
  std::shared_ptr<void> state_;
};

struct InstanceInfo {
  std::string instance_id;
  std::string service_name;
  InstanceStatus status = InstanceStatus::Active;
};

struct ContainerStats {
  std::int64_t uptime_s = 0;
  std::int64_t requests_served = 0;
  int instance_count = 0;  // live (non-destroyed) instances
  LogLevel log_level = LogLevel::Info;
};

// Delivers JSON payloads to subscriber callback URLs.  Each subscription has
// its own FIFO queue and worker thread, so deliveries to one subscriber are
// strictly ordered while independent subscribers do not block each other.
// Each payload gets an initial attempt plus up to three retries (200, 400,
// 800 ms backoff); a 2xx response counts as delivered, anything else after
// the final retry is recorded as a failure and the payload is dropped.
class NotificationDispatcher {
 public:
  explicit NotificationDispatcher(Logger& log);
  ~NotificationDispatcher();

  NotificationDispatcher(const NotificationDispatcher&) = delete;
  NotificationDispatcher& operator=(const NotificationDispatcher&) = delete;

  void add_subscription(const std::string& subscription_id,
                        const std::string& callback_url);
  // Returns false if the subscription id is unknown.
  bool remove_subscription(const std::string& subscription_id);
  bool has_subscription(const std::string& subscription_id) const;

  // Enqueue a payload for one subscriber.  Returns false if the subscription
  // id is unknown.  Never blocks on the network.
  bool publish(const std::string& subscription_id, const json& payload);

  std::int64_t deliveries() const { return deliveries_.load(); }
  std::int64_t failures() const { return failures_.load(); }

  // Block until every queue is empty and no worker is mid-delivery.  Test
  // hook; services never call this on a request path.
  void drain();

  void stop_all();

  // Overridable transport, injected by tests that simulate flaky receivers.
  // Returns the HTTP status code, or -1 on a connection-level failure.
  using PostFn = std::function<int(const std::string& url, const json& payload)>;
  void set_post_fn(PostFn fn);

  static int http_post_json(const std::string& url, const json& payload);

 private:
  struct Subscriber {
    std::string url;
    std::deque<json> queue;
    std::thread worker;
    std::mutex mu;
    std::condition_variable cv;
    bool stopping = false;
    bool busy = false;
  };

  void worker_loop(std::shared_ptr<Subscriber> sub);

  Logger& log_;
  mutable std::mutex mu_;
  std::map<std::string, std::shared_ptr<Subscriber>> subs_;
  std::atomic<std::int64_t> deliveries_{0};
  std::atomic<std::int64_t> failures_{0};
  PostFn post_fn_;
};

class ServiceContainer {
 public:
  // `service_kind` names the hosted service ("broker", "index", "lnb", "ce")
  // and doubles as the id of the root instance that the service's own
  // operations dispatch through.
  explicit ServiceContainer(std::string service_kind,
                            LogLevel level = LogLevel::Info);
  ~ServiceContainer();

  ServiceContainer(const ServiceContainer&) = delete;
  ServiceContainer& operator=(const ServiceContainer&) = delete;

  Logger& log() { return log_; }
  NotificationDispatcher& notifier() { return notifier_; }
  const std::string& service_kind() const { return service_kind_; }

  // ---- instance registry -------------------------------------------------

  // A factory builds the initial state of a fresh instance.  It runs with
  // the new instance's lock held; it may set SDEs and attach state.
  using FactoryFn = std::function<void(const json& init_args, Instance&)>;
  void register_factory(const std::string& service_name, FactoryFn fn);

  // Creates the root instance (id == service_kind) through the factory
  // registered under service_kind.  Called once during service startup.
  void create_root_instance(const json& init_args = json::object());

  // Throws unknown-service if no factory is registered under service_name.
  InstanceInfo create_instance(const std::string& service_name,
                               const json& init_args);
  // Throws unknown-instance / already-destroyed.
  void destroy_instance(const std::string& instance_id);
  // Throws unknown-instance / already-destroyed.
  void set_instance_active(const std::string& instance_id, bool active);
  // Throws unknown-instance (also for destroyed instances) / unknown-sde.
  ServiceDataValue query_sde(const std::string& instance_id,
                             const std::string& sde_name);
  // Snapshot of every non-destroyed instance, ordered by id.
  std::vector<InstanceInfo> list_instances();
  std::vector<std::string> instance_op_log(const std::string& instance_id);

  // Runs `fn` against a live, active instance with its lock held.  The
  // callback returns an outcome word ("accepted", "rejected", ...); the
  // container then appends "<op_name>:<outcome>" to the instance op log and
  // updates the operations_count / last_operation SDEs.  A BerylliumError
  // thrown by the callback is recorded the same way, with the error code as
  // the outcome, then rethrown.  Destroyed instances raise unknown-instance
  // and inactive instances raise instance-inactive; in both cases `fn` never
  // runs and nothing is recorded.
  using OpFn = std::function<std::string(Instance&)>;
  void dispatch(const std::string& instance_id, const std::string& op_name,
                OpFn fn);

  // The dispatch gate alone: raises unknown-instance / instance-inactive
  // without running or recording anything.  Used before operations whose
  // work must not hold the instance lock (e.g. brokering network calls).
  void require_active(const std::string& instance_id);

  // Direct SDE update, bypassing operation accounting.  For state mirrors
  // (free_slots and friends) maintained by background activities; works on
  // INACTIVE instances, throws unknown-instance for missing/destroyed ones.
  void set_sde(const std::string& instance_id, const ServiceDataValue& v);

  // ---- HTTP surface --------------------------------------------------------

  using Handler =
      std::function<void(const httplib::Request&, httplib::Response&)>;
  void route_get(const std::string& pattern, Handler h);
  void route_post(const std::string& pattern, Handler h);
  void route_delete(const std::string& pattern, Handler h);

  // Registers /admin/*, /factory/:service_name, and /instance/:id routes.
  void mount_runtime_routes();

  // Binds and starts serving on a background thread.  port 0 picks a free
  // port.  Returns false if the bind fails.
  bool start(const std::string& host, int port);
  // Blocks until the server stops (via /admin/shutdown or stop()).
  void wait();
  void stop();
  bool shutting_down() const { return shutting_down_.load(); }

  int port() const { return bound_port_; }
  std::string url() const;

  ContainerStats stats();

  // Hook run exactly once, after the listener has stopped, before wait()
  // returns.  Services use it to stop background threads and flush state.
  void on_stopped(std::function<void()> fn);

  // ---- reply helpers -------------------------------------------------------

  static void send_json(httplib::Response& res, const json& body,
                        int status = 200);
  static void send_error(httplib::Response& res, ErrorCode code,
                         const std::string& detail);
  static int http_status_for(ErrorCode code);

 private:
  struct Slot {
    std::mutex mu;
    Instance instance;
    Slot(std::string id, std::string service_name)
        : instance(std::move(id), std::move(service_name)) {}
  };

  std::shared_ptr<Slot> find_slot(const std::string& instance_id);
  std::shared_ptr<Slot> require_live_slot(const std::string& instance_id);
  void wrap_and_register(const std::string& method, const std::string& pattern,
                         Handler h);
  void handle_admin_status(const httplib::Request& req,
                           httplib::Response& res);

  std::string service_kind_;
  Logger log_;
  NotificationDispatcher notifier_;

  std::unique_ptr<httplib::Server> svr_;
  std::thread serve_thread_;
  std::atomic<bool> shutting_down_{false};
  std::thread shutdown_thread_;
  int bound_port_ = 0;
  std::string host_ = "127.0.0.1";

  std::atomic<std::int64_t> requests_served_{0};
  TimestampMs started_at_ms_ = 0;

  mutable std::mutex registry_mu_;
  std::map<std::string, FactoryFn> factories_;
  std::map<std::string, std::shared_ptr<Slot>> slots_;
  std::int64_t next_instance_serial_ = 0;

  std::mutex stopped_mu_;
  std::vector<std::function<void()>> stopped_fns_;
  bool stopped_fns_ran_ = false;
};

}  // namespace beryllium
