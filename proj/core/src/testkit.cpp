#include "beryllium/testkit.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netinet/in.h>
#include <poll.h>
#include <signal.h>
#include <spawn.h>
#include <sys/socket.h>
#include <sys/stat.h>
#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <stdexcept>

#include "beryllium/http_client.hpp"
#include "beryllium/wire.hpp"

extern char** environ;

namespace beryllium::testkit {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// utilities

int pick_free_port() {
  int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd < 0) throw std::runtime_error("socket() failed");
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = 0;
  if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
    ::close(fd);
    throw std::runtime_error("bind() failed");
  }
  socklen_t len = sizeof(addr);
  ::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len);
  int port = ntohs(addr.sin_port);
  ::close(fd);
  return port;
}

bool wait_until(const std::function<bool()>& pred, int timeout_ms) {
  auto deadline =
      std::chrono::steady_clock::now() + std::chrono::milliseconds(timeout_ms);
  for (;;) {
    if (pred()) return true;
    if (std::chrono::steady_clock::now() >= deadline) return false;
    std::this_thread::sleep_for(std::chrono::milliseconds(25));
  }
}

std::string find_binary(const std::string& name) {
  std::vector<fs::path> roots;
  if (const char* env = std::getenv("BERYLLIUM_BIN_DIR")) roots.emplace_back(env);
  std::error_code ec;
  fs::path self = fs::read_symlink("/proc/self/exe", ec);
  if (!ec) {
    roots.push_back(self.parent_path());
    roots.push_back(self.parent_path().parent_path() / "tools");
  }
  for (const auto& root : roots) {
    fs::path candidate = root / name;
    if (fs::exists(candidate)) return candidate.string();
  }
  throw std::runtime_error("cannot locate binary '" + name +
                           "' (set BERYLLIUM_BIN_DIR)");
}

RunResult run_capture(const std::string& exe, const std::vector<std::string>& args,
                      int timeout_s) {
  int pipefd[2];
  if (::pipe(pipefd) != 0) return RunResult{125, ""};

  std::vector<std::string> argv_store;
  argv_store.push_back(exe);
  for (const auto& a : args) argv_store.push_back(a);
  std::vector<char*> argv;
  for (auto& a : argv_store) argv.push_back(a.data());
  argv.push_back(nullptr);

  posix_spawn_file_actions_t fa;
  posix_spawn_file_actions_init(&fa);
  posix_spawn_file_actions_adddup2(&fa, pipefd[1], 1);
  posix_spawn_file_actions_addclose(&fa, pipefd[0]);
  posix_spawn_file_actions_addclose(&fa, pipefd[1]);

  pid_t pid = -1;
  int rc = posix_spawnp(&pid, exe.c_str(), &fa, nullptr, argv.data(), environ);
  posix_spawn_file_actions_destroy(&fa);
  ::close(pipefd[1]);
  if (rc != 0) {
    ::close(pipefd[0]);
    return RunResult{125, ""};
  }

  RunResult result;
  auto deadline =
      std::chrono::steady_clock::now() + std::chrono::seconds(timeout_s);
  char buf[4096];
  bool timed_out = false;
  for (;;) {
    pollfd pfd{pipefd[0], POLLIN, 0};
    int pr = ::poll(&pfd, 1, 200);
    if (pr > 0) {
      ssize_t n = ::read(pipefd[0], buf, sizeof(buf));
      if (n <= 0) break;
      result.out.append(buf, static_cast<size_t>(n));
    }
    if (std::chrono::steady_clock::now() >= deadline) {
      timed_out = true;
      ::kill(pid, SIGKILL);
      break;
    }
  }
  ::close(pipefd[0]);
  int status = 0;
  ::waitpid(pid, &status, 0);
  if (timed_out) {
    result.exit_code = 124;
  } else if (WIFEXITED(status)) {
    result.exit_code = WEXITSTATUS(status);
  } else {
    result.exit_code = 128 + (WIFSIGNALED(status) ? WTERMSIG(status) : 0);
  }
  return result;
}

// ---------------------------------------------------------------------------
// ServiceProcess

ServiceProcess::~ServiceProcess() { terminate(); }

void ServiceProcess::spawn(const std::string& exe,
                           const std::vector<std::string>& args,
                           const std::string& log_path) {
  exe_ = exe;
  args_ = args;
  log_path_ = log_path;
  respawn();
}

void ServiceProcess::respawn() {
  std::vector<std::string> argv_store;
  argv_store.push_back(exe_);
  for (const auto& a : args_) argv_store.push_back(a);
  std::vector<char*> argv;
  for (auto& a : argv_store) argv.push_back(a.data());
  argv.push_back(nullptr);

  posix_spawn_file_actions_t fa;
  posix_spawn_file_actions_init(&fa);
  posix_spawn_file_actions_addopen(&fa, 1, log_path_.c_str(),
                                   O_WRONLY | O_CREAT | O_APPEND, 0644);
  posix_spawn_file_actions_adddup2(&fa, 1, 2);

  pid_t pid = -1;
  int rc = posix_spawnp(&pid, exe_.c_str(), &fa, nullptr, argv.data(), environ);
  posix_spawn_file_actions_destroy(&fa);
  if (rc != 0) {
    throw std::runtime_error("failed to spawn " + exe_ + ": " +
                             std::strerror(rc));
  }
  pid_ = pid;
}

bool ServiceProcess::running() const {
  if (pid_ <= 0) return false;
  return ::kill(pid_, 0) == 0;
}

void ServiceProcess::reap() {
  if (pid_ <= 0) return;
  int status = 0;
  ::waitpid(pid_, &status, 0);
  pid_ = -1;
}

void ServiceProcess::terminate() {
  if (pid_ <= 0) return;
  ::kill(pid_, SIGTERM);
  auto deadline =
      std::chrono::steady_clock::now() + std::chrono::milliseconds(2000);
  for (;;) {
    int status = 0;
    pid_t r = ::waitpid(pid_, &status, WNOHANG);
    if (r == pid_) {
      pid_ = -1;
      return;
    }
    if (std::chrono::steady_clock::now() >= deadline) break;
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
  }
  ::kill(pid_, SIGKILL);
  reap();
}

void ServiceProcess::kill9() {
  if (pid_ <= 0) return;
  ::kill(pid_, SIGKILL);
  reap();
}

// ---------------------------------------------------------------------------
// RecordingProxy

RecordingProxy::RecordingProxy(const std::string& target_host, int target_port)
    : target_host_(target_host), target_port_(target_port) {
  listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (listen_fd_ < 0) throw std::runtime_error("proxy socket() failed");
  int one = 1;
  ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = 0;
  if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0 ||
      ::listen(listen_fd_, 64) != 0) {
    ::close(listen_fd_);
    throw std::runtime_error("proxy bind/listen failed");
  }
  socklen_t len = sizeof(addr);
  ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
  port_ = ntohs(addr.sin_port);
  acceptor_ = std::thread([this] { accept_loop(); });
}

RecordingProxy::~RecordingProxy() { stop(); }

void RecordingProxy::accept_loop() {
  while (!stopping_.load()) {
    pollfd pfd{listen_fd_, POLLIN, 0};
    int pr = ::poll(&pfd, 1, 100);
    if (pr <= 0) continue;
    int client = ::accept(listen_fd_, nullptr, nullptr);
    if (client < 0) continue;
    handle_connection(client);
  }
}

namespace {

void pump(int src, int dst, std::string* sink, std::mutex* mu) {
  char buf[8192];
  for (;;) {
    ssize_t n = ::read(src, buf, sizeof(buf));
    if (n <= 0) break;
    {
      std::lock_guard<std::mutex> lock(*mu);
      sink->append(buf, static_cast<size_t>(n));
    }
    ssize_t off = 0;
    while (off < n) {
      ssize_t w = ::write(dst, buf + off, static_cast<size_t>(n - off));
      if (w <= 0) return;
      off += w;
    }
  }
  ::shutdown(dst, SHUT_WR);
}

}  // namespace

void RecordingProxy::handle_connection(int client_fd) {
  int server_fd = ::socket(AF_INET, SOCK_STREAM, 0);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(static_cast<uint16_t>(target_port_));
  ::inet_pton(AF_INET, target_host_.c_str(), &addr.sin_addr);
  if (server_fd < 0 ||
      ::connect(server_fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
    if (server_fd >= 0) ::close(server_fd);
    ::close(client_fd);
    return;
  }

  auto capture = std::make_shared<Capture>();
  {
    std::lock_guard<std::mutex> lock(mu_);
    captures_.push_back(capture);
  }
  std::lock_guard<std::mutex> lock(mu_);
  pumps_.emplace_back([this, client_fd, server_fd, capture] {
    std::thread down(
        [&] { pump(server_fd, client_fd, &capture->server_to_client, &mu_); });
    pump(client_fd, server_fd, &capture->client_to_server, &mu_);
    down.join();
    ::close(client_fd);
    ::close(server_fd);
  });
}

void RecordingProxy::stop() {
  if (stopping_.exchange(true)) return;
  if (listen_fd_ >= 0) {
    ::shutdown(listen_fd_, SHUT_RDWR);
    ::close(listen_fd_);
    listen_fd_ = -1;
  }
  if (acceptor_.joinable()) acceptor_.join();
  std::vector<std::thread> pumps;
  {
    std::lock_guard<std::mutex> lock(mu_);
    pumps.swap(pumps_);
  }
  for (auto& t : pumps) {
    if (t.joinable()) t.join();
  }
}

std::vector<RecordingProxy::Capture> RecordingProxy::captures() const {
  std::lock_guard<std::mutex> lock(mu_);
  std::vector<Capture> out;
  out.reserve(captures_.size());
  for (const auto& c : captures_) out.push_back(*c);
  return out;
}

int RecordingProxy::capture_count() const {
  std::lock_guard<std::mutex> lock(mu_);
  return static_cast<int>(captures_.size());
}

bool RecordingProxy::any_capture_contains(const std::string& needle) const {
  std::lock_guard<std::mutex> lock(mu_);
  for (const auto& c : captures_) {
    if (c->client_to_server.find(needle) != std::string::npos) return true;
    if (c->server_to_client.find(needle) != std::string::npos) return true;
  }
  return false;
}

// ---------------------------------------------------------------------------
// Topology

TopologySpec TopologySpec::from_json(const json& j) {
  TopologySpec spec;
  if (j.contains("heartbeat_ttl_s")) spec.heartbeat_ttl_s = j["heartbeat_ttl_s"];
  if (j.contains("heartbeat_period_s")) spec.heartbeat_period_s = j["heartbeat_period_s"];
  if (j.contains("ticket_ttl_s")) spec.ticket_ttl_s = j["ticket_ttl_s"];
  if (j.contains("max_rounds")) spec.max_rounds = j["max_rounds"];
  if (j.contains("job_wall_limit_s")) spec.job_wall_limit_s = j["job_wall_limit_s"];
  if (j.contains("broker_timeout_ms")) spec.broker_timeout_ms = j["broker_timeout_ms"];
  if (j.contains("proxy_broker")) spec.proxy_broker = j["proxy_broker"];
  if (j.contains("proxy_index")) spec.proxy_index = j["proxy_index"];
  if (j.contains("scratch_dir")) spec.scratch_dir = j["scratch_dir"];
  if (j.contains("ces")) {
    for (const auto& c : j["ces"]) {
      CeSpec ce;
      ce.ce_id = c.at("ce_id").get<std::string>();
      if (c.contains("slots")) ce.slots = c["slots"];
      if (c.contains("tags")) {
        for (const auto& t : c["tags"]) ce.tags.insert(t.get<std::string>());
      }
      if (c.contains("reservation_ttl_s")) ce.reservation_ttl_s = c["reservation_ttl_s"];
      if (c.contains("always_reject")) ce.always_reject = c["always_reject"];
      if (c.contains("drop_confirms")) ce.drop_confirms = c["drop_confirms"];
      spec.ces.push_back(std::move(ce));
    }
  }
  return spec;
}

Topology::Topology(TopologySpec spec) : spec_(std::move(spec)) {
  std::set<std::string> seen;
  for (const auto& ce : spec_.ces) {
    if (ce.ce_id.empty() || !seen.insert(ce.ce_id).second) {
      throw std::runtime_error("duplicate or empty ce_id in topology spec: " +
                               ce.ce_id);
    }
  }
  if (spec_.scratch_dir.empty()) {
    std::string tmpl = (fs::temp_directory_path() / "beryllium-XXXXXX").string();
    std::vector<char> buf(tmpl.begin(), tmpl.end());
    buf.push_back('\0');
    if (!::mkdtemp(buf.data())) throw std::runtime_error("mkdtemp failed");
    scratch_ = buf.data();
    owns_scratch_ = true;
  } else {
    scratch_ = spec_.scratch_dir;
    fs::create_directories(scratch_);
  }
}

Topology::~Topology() { teardown(); }

std::string Topology::lnb_log_path() const {
  return (fs::path(scratch_) / "lnb-events.ndjson").string();
}

std::string Topology::ce_workdir_root(const std::string& ce_id) const {
  return (fs::path(scratch_) / ce_id).string();
}

std::string Topology::ce_ticket_db_path(const std::string& ce_id) const {
  return (fs::path(ce_workdir_root(ce_id)) / (ce_id + "-tickets.ndjson")).string();
}

void Topology::start() {
  if (started_) return;
  started_ = true;

  index_port_ = pick_free_port();
  lnb_port_ = pick_free_port();
  broker_port_ = pick_free_port();
  for (const auto& ce : spec_.ces) ce_ports_[ce.ce_id] = pick_free_port();

  if (spec_.proxy_index) {
    index_proxy_ = std::make_unique<RecordingProxy>("127.0.0.1", index_port_);
  }
  if (spec_.proxy_broker) {
    broker_proxy_ = std::make_unique<RecordingProxy>("127.0.0.1", broker_port_);
  }
  const std::string direct_index = "http://127.0.0.1:" + std::to_string(index_port_);
  const std::string service_index_url =
      index_proxy_ ? index_proxy_->url() : direct_index;
  const std::string lnb = "http://127.0.0.1:" + std::to_string(lnb_port_);

  index_ = std::make_unique<ServiceProcess>();
  index_->spawn(find_binary("beryllium-index"),
                {"--port", std::to_string(index_port_), "--heartbeat-ttl-s",
                 std::to_string(spec_.heartbeat_ttl_s)},
                (fs::path(scratch_) / "index.log").string());

  lnb_ = std::make_unique<ServiceProcess>();
  lnb_->spawn(find_binary("beryllium-lnb"),
              {"--port", std::to_string(lnb_port_), "--log-path", lnb_log_path()},
              (fs::path(scratch_) / "lnb.log").string());

  broker_ = std::make_unique<ServiceProcess>();
  broker_->spawn(find_binary("beryllium-broker"),
                 {"--port", std::to_string(broker_port_), "--index-url",
                  service_index_url, "--lnb-url", lnb, "--max-rounds",
                  std::to_string(spec_.max_rounds), "--ticket-ttl-s",
                  std::to_string(spec_.ticket_ttl_s), "--request-timeout-ms",
                  std::to_string(spec_.broker_timeout_ms)},
                 (fs::path(scratch_) / "broker.log").string());

  for (const auto& ce : spec_.ces) {
    std::vector<std::string> args = {
        "--port", std::to_string(ce_ports_[ce.ce_id]),
        "--ce-id", ce.ce_id,
        "--slots", std::to_string(ce.slots),
        "--index-url", service_index_url,
        "--lnb-url", lnb,
        "--workdir-root", ce_workdir_root(ce.ce_id),
        "--reservation-ttl-s", std::to_string(ce.reservation_ttl_s),
        "--job-wall-limit-s", std::to_string(spec_.job_wall_limit_s),
        "--heartbeat-period-s", std::to_string(spec_.heartbeat_period_s)};
    for (const auto& t : ce.tags) {
      args.push_back("--tags");
      args.push_back(t);
    }
    if (ce.always_reject) args.push_back("--always-reject");
    if (ce.drop_confirms) args.push_back("--drop-confirms");
    auto proc = std::make_unique<ServiceProcess>();
    proc->spawn(find_binary("beryllium-ce"), args,
                (fs::path(scratch_) / (ce.ce_id + ".log")).string());
    ces_[ce.ce_id] = std::move(proc);
  }

  HttpJsonClient client(1000);
  auto alive = [&](const std::string& base) {
    return [&client, base] { return client.get(base, "/admin/ping").ok(); };
  };
  std::vector<std::pair<std::string, std::string>> to_check = {
      {"index", direct_index},
      {"lnb", lnb},
      {"broker", "http://127.0.0.1:" + std::to_string(broker_port_)}};
  for (const auto& [id, port] : ce_ports_) {
    to_check.emplace_back(id, "http://127.0.0.1:" + std::to_string(port));
  }
  for (const auto& [name, base] : to_check) {
    if (!wait_until(alive(base), 10000)) {
      throw std::runtime_error("startup-timeout: " + name +
                               " never answered ping at " + base);
    }
  }
  await_registered(static_cast<int>(spec_.ces.size()));
}

void Topology::await_registered(int n, int timeout_ms) {
  HttpJsonClient client(1000);
  const std::string direct_index =
      "http://127.0.0.1:" + std::to_string(index_port_);
  bool ok = wait_until(
      [&] {
        HttpReply r = client.get(direct_index, "/index/sde/registered_count");
        return r.ok() && r.body.is_object() && r.body.contains("value") &&
               r.body["value"].is_number_integer() &&
               r.body["value"].get<int>() >= n;
      },
      timeout_ms);
  if (!ok) {
    throw std::runtime_error("startup-timeout: index never reported " +
                             std::to_string(n) + " registered resources");
  }
}

void Topology::teardown() {
  for (auto& [id, proc] : ces_) {
    if (proc) proc->terminate();
  }
  if (broker_) broker_->terminate();
  if (lnb_) lnb_->terminate();
  if (index_) index_->terminate();
  if (broker_proxy_) broker_proxy_->stop();
  if (index_proxy_) index_proxy_->stop();
}

std::string Topology::broker_url() const {
  if (broker_proxy_) return broker_proxy_->url();
  return "http://127.0.0.1:" + std::to_string(broker_port_);
}

std::string Topology::index_url() const {
  if (index_proxy_) return index_proxy_->url();
  return "http://127.0.0.1:" + std::to_string(index_port_);
}

std::string Topology::lnb_url() const {
  return "http://127.0.0.1:" + std::to_string(lnb_port_);
}

std::string Topology::ce_url(const std::string& ce_id) const {
  auto it = ce_ports_.find(ce_id);
  if (it == ce_ports_.end()) {
    throw std::runtime_error("no such CE in topology: " + ce_id);
  }
  return "http://127.0.0.1:" + std::to_string(it->second);
}

ServiceProcess& Topology::ce(const std::string& ce_id) {
  auto it = ces_.find(ce_id);
  if (it == ces_.end()) {
    throw std::runtime_error("no such CE in topology: " + ce_id);
  }
  return *it->second;
}

// ---------------------------------------------------------------------------
// oracles

std::optional<std::string> oracle_match(
    const std::vector<ResourceDescriptor>& candidates) {
  for (const auto& c : candidates) {
    bool beaten = false;
    for (const auto& other : candidates) {
      if (&other == &c) continue;
      if (other.free_slots > c.free_slots) beaten = true;
      if (other.free_slots == c.free_slots && other.ce_id < c.ce_id) beaten = true;
    }
    if (!beaten) return c.ce_id;
  }
  return std::nullopt;
}

std::vector<ResourceDescriptor> oracle_filter(
    const std::vector<IndexRegistry::Record>& records,
    std::int64_t min_free_slots, const std::set<std::string>& required_tags,
    TimestampMs now) {
  std::vector<ResourceDescriptor> out;
  for (const auto& rec : records) {
    if (rec.expires_at < now) continue;
    if (rec.descriptor.free_slots < min_free_slots) continue;
    bool all_tags = true;
    for (const auto& t : required_tags) {
      bool found = false;
      for (const auto& have : rec.descriptor.tags) {
        if (have == t) found = true;
      }
      if (!found) all_tags = false;
    }
    if (!all_tags) continue;
    out.push_back(rec.descriptor);
  }
  // Deliberately naive insertion sort by ce_id.
  for (size_t i = 1; i < out.size(); ++i) {
    for (size_t k = i; k > 0 && out[k].ce_id < out[k - 1].ce_id; --k) {
      std::swap(out[k], out[k - 1]);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// log normalization

std::vector<std::string> normalize_event_log(const std::string& ndjson) {
  std::map<std::string, std::string> job_names;
  std::map<std::string, std::string> source_names;
  std::vector<std::string> out;

  size_t pos = 0;
  while (pos < ndjson.size()) {
    size_t end = ndjson.find('\n', pos);
    if (end == std::string::npos) end = ndjson.size();
    std::string line = ndjson.substr(pos, end - pos);
    pos = end + 1;
    if (line.empty()) continue;

    json j = json::parse(line, nullptr, false);
    if (j.is_discarded()) continue;
    if (j.contains("job_id") && j["job_id"].is_string()) {
      const std::string id = j["job_id"];
      auto [it, fresh] =
          job_names.try_emplace(id, "J" + std::to_string(job_names.size() + 1));
      j["job_id"] = it->second;
    }
    if (j.contains("source") && j["source"].is_string()) {
      const std::string src = j["source"];
      auto [it, fresh] = source_names.try_emplace(
          src, "S" + std::to_string(source_names.size() + 1));
      j["source"] = it->second;
    }
    j.erase("at");
    out.push_back(j.dump());
  }
  return out;
}

}  // namespace beryllium::testkit
