#include "beryllium/ce_service.hpp"

#include <fcntl.h>
#include <spawn.h>
#include <sys/stat.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <filesystem>

#include <httplib.h>

#include "beryllium/wire.hpp"

extern char** environ;

namespace beryllium {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// TicketDb

TicketDb::TicketDb(std::string path) : path_(std::move(path)) {
  bool needs_newline = false;
  if (fs::exists(path_)) {
    std::ifstream in(path_, std::ios::binary);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      json j;
      try {
        j = wire::decode_bytes(line);
      } catch (const BerylliumError&) {
        // A crash mid-append can leave a torn line; it carries nothing that
        // was acknowledged, so replay skips it rather than refusing to start.
        continue;
      }
      if (j.contains("consumed_at")) {
        auto it = by_id_.find(wire::require_string(j, "ticket_id"));
        if (it != by_id_.end()) it->second.row.consumed = true;
      } else if (j.contains("expired_at")) {
        auto it = by_id_.find(wire::require_string(j, "ticket_id"));
        if (it != by_id_.end()) it->second.expired = true;
      } else {
        TicketDbEntry e = wire::ticket_db_entry_from_json(j);
        order_.push_back(e.ticket_id);
        by_id_[e.ticket_id] = Entry{std::move(e), false};
      }
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
                         "cannot open ticket database for append: " + path_);
  }
  if (needs_newline) out_ << '\n';
}

void TicketDb::persist(const json& j) {
  out_ << wire::encode(j) << '\n';
  out_.flush();
  if (!out_) {
    throw BerylliumError(ErrorCode::InvalidArgument,
                         "ticket database append failed: " + path_);
  }
}

void TicketDb::append(const TicketDbEntry& e) {
  if (by_id_.count(e.ticket_id)) {
    throw BerylliumError(ErrorCode::InvalidArgument,
                         "duplicate ticket_id in database: " + e.ticket_id);
  }
  persist(wire::to_json(e));
  order_.push_back(e.ticket_id);
  by_id_[e.ticket_id] = Entry{e, false};
}

void TicketDb::mark_consumed(const std::string& ticket_id, TimestampMs at) {
  auto it = by_id_.find(ticket_id);
  if (it == by_id_.end() || it->second.row.consumed) {
    throw BerylliumError(ErrorCode::InvalidArgument,
                         "cannot consume ticket: " + ticket_id);
  }
  persist(json{{"consumed_at", at}, {"ticket_id", ticket_id}});
  it->second.row.consumed = true;
}

void TicketDb::mark_expired(const std::string& ticket_id, TimestampMs at) {
  auto it = by_id_.find(ticket_id);
  if (it == by_id_.end() || it->second.row.consumed || it->second.expired) {
    throw BerylliumError(ErrorCode::InvalidArgument,
                         "cannot expire ticket: " + ticket_id);
  }
  persist(json{{"expired_at", at}, {"ticket_id", ticket_id}});
  it->second.expired = true;
}

const TicketDb::Entry* TicketDb::find(const std::string& ticket_id) const {
  auto it = by_id_.find(ticket_id);
  return it == by_id_.end() ? nullptr : &it->second;
}

std::vector<TicketDb::Entry> TicketDb::entries() const {
  std::vector<Entry> out;
  out.reserve(order_.size());
  for (const auto& id : order_) out.push_back(by_id_.at(id));
  return out;
}

// ---------------------------------------------------------------------------
// CeService

namespace {

// State held by each confirmation instance: the completed ticket, set at
// creation when a reservation was accepted, absent on bare factory calls.
struct ConfirmHolder {
  std::optional<JobTicket> ticket;
};

}  // namespace

CeService::CeService(Options opts)
    : opts_(std::move(opts)),
      container_("ce", opts_.log_level),
      client_(opts_.request_timeout_ms) {
  if (opts_.slots < 1) {
    throw BerylliumError(ErrorCode::InvalidArgument, "slots must be >= 1");
  }
  fs::create_directories(opts_.workdir_root);
  if (opts_.ticket_db_path.empty()) {
    opts_.ticket_db_path =
        (fs::path(opts_.workdir_root) / (opts_.ce_id + "-tickets.ndjson")).string();
  }

  state_.ledger.total_slots = opts_.slots;
  state_.db = std::make_unique<TicketDb>(opts_.ticket_db_path);
  // Replay: every live (unconsumed, unexpired, in-date) reservation still
  // holds its slots after a restart.
  TimestampMs now = now_ms();
  for (const auto& e : state_.db->entries()) {
    if (!e.row.consumed && !e.expired && e.row.expires_at >= now) {
      state_.ledger.reserved_slots += e.row.slots;
    }
  }

  container_.register_factory("ce", [this](const json&, Instance& inst) {
    inst.set_sde(ServiceDataValue::integer("free_slots", state_.ledger.free_slots()));
    inst.set_sde(ServiceDataValue::integer("reserved_slots", state_.ledger.reserved_slots));
    inst.set_sde(ServiceDataValue::integer("running_jobs", 0));
  });
  container_.register_factory("ceconfirm", [](const json& init_args, Instance& inst) {
    auto holder = std::make_shared<ConfirmHolder>();
    if (init_args.is_object() && init_args.contains("ticket_id")) {
      holder->ticket = wire::ticket_from_json(init_args);
    }
    inst.attach_state(holder);
  });
  container_.create_root_instance();
  mount_routes();
}

CeService::~CeService() { stop(); }

CeService::LedgerSdes CeService::ledger_sdes_locked() const {
  LedgerSdes s{state_.ledger.free_slots(), state_.ledger.reserved_slots, 0};
  for (const auto& [id, rec] : state_.jobs) {
    if (rec.state == JobState::Running) ++s.running;
  }
  return s;
}

void CeService::write_ledger_sdes(Instance* inst, const LedgerSdes& s) {
  const ServiceDataValue values[] = {
      ServiceDataValue::integer("free_slots", s.free),
      ServiceDataValue::integer("reserved_slots", s.reserved),
      ServiceDataValue::integer("running_jobs", s.running)};
  for (const auto& v : values) {
    if (inst) {
      inst->set_sde(v);
    } else {
      container_.set_sde("ce", v);
    }
  }
}

void CeService::emit_event(const std::string& job_id, JobState s,
                           const std::string& detail) {
  json e{{"detail", detail},
         {"job_id", job_id},
         {"source", container_.url()},
         {"state", job_state_name(s)}};
  HttpReply reply = client_.post(opts_.lnb_url, "/lnb/events", e);
  if (!reply.ok()) {
    container_.log().warn("failed to report " + std::string(job_state_name(s)) +
                          " for " + job_id);
  }
}

void CeService::renew_index() {
  if (opts_.index_url.empty()) return;
  std::int64_t free = 0;
  {
    std::lock_guard<std::mutex> lock(state_mu_);
    free = state_.ledger.free_slots();
  }
  HttpReply reply = client_.post(opts_.index_url, "/index/renew",
                                 json{{"ce_id", opts_.ce_id}, {"free_slots", free}});
  if (reply.transport_ok() && !reply.ok()) {
    // Index restarted and lost us: re-register from scratch.
    json reg{{"ce_id", opts_.ce_id},
             {"ce_url", container_.url()},
             {"free_slots", free},
             {"tags", json::array()},
             {"total_slots", opts_.slots}};
    for (const auto& t : opts_.tags) reg["tags"].push_back(t);
    reply = client_.post(opts_.index_url, "/index/register", reg);
  }
  if (!reply.transport_ok()) {
    container_.log().debug("index heartbeat unreachable");
  }
}

CeService::ConfirmResult CeService::confirm(const JobTicket& incomplete) {
  if (opts_.drop_confirms) {
    // Fault hook: stall until any sane client has timed out, then decline
    // without touching state — the caller sees a dropped confirmation.
    auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(30);
    while (std::chrono::steady_clock::now() < deadline && !stopping_.load()) {
      std::this_thread::sleep_for(std::chrono::milliseconds(100));
    }
    return ConfirmResult{false, {}, "", "confirmation dropped"};
  }

  ConfirmResult result;
  container_.dispatch("ce", "tkt_confirm", [&](Instance& inst) {
    if (incomplete.is_complete()) {
      throw BerylliumError(ErrorCode::InvalidArgument,
                           "ticket already carries a ce_url");
    }
    if (opts_.always_reject) {
      result.accepted = false;
      result.reason = "configured to reject";
      return "rejected";
    }
    std::lock_guard<std::mutex> lock(state_mu_);
    if (state_.ledger.free_slots() < incomplete.slots) {
      result.accepted = false;
      result.reason = error_code_name(ErrorCode::CapacityExceeded);
      return "rejected";
    }
    JobTicket complete = ticket_complete(incomplete, container_.url());
    TicketDbEntry entry;
    entry.ticket_id = complete.ticket_id;
    entry.job_id = complete.job_id;
    entry.slots = complete.slots;
    entry.issued_at = now_ms();
    entry.expires_at = entry.issued_at + complete.reservation_ttl * 1000;
    state_.db->append(entry);
    state_.ledger.reserved_slots += complete.slots;
    write_ledger_sdes(&inst, ledger_sdes_locked());

    InstanceInfo info =
        container_.create_instance("ceconfirm", wire::to_json(complete));
    result.accepted = true;
    result.ticket = std::move(complete);
    result.instance_id = info.instance_id;
    return "accepted";
  });
  return result;
}

std::optional<JobTicket> CeService::get_value(const std::string& instance_id) {
  std::optional<JobTicket> ticket;
  container_.dispatch(instance_id, "get_value", [&](Instance& inst) {
    if (inst.service_name() != "ceconfirm") {
      throw BerylliumError(ErrorCode::InvalidArgument,
                           "not a confirmation instance: " + instance_id);
    }
    auto holder = inst.state<ConfirmHolder>();
    ticket = holder ? holder->ticket : std::nullopt;
    return ticket ? "value" : "none";
  });
  return ticket;
}

std::string CeService::submit_job(const JobPayload& payload) {
  std::string workdir;
  try {
    container_.dispatch("ce", "submit_job", [&](Instance& inst) {
      if (!payload.ticket.is_complete()) {
        throw BerylliumError(ErrorCode::InvalidArgument, "ticket is incomplete");
      }
      if (*payload.ticket.ce_url != container_.url()) {
        throw BerylliumError(ErrorCode::InvalidArgument,
                             "ticket addressed to a different resource: " +
                                 *payload.ticket.ce_url);
      }
      std::lock_guard<std::mutex> lock(state_mu_);
      const TicketDb::Entry* entry = state_.db->find(payload.ticket.ticket_id);
      if (!entry) {
        throw BerylliumError(ErrorCode::TicketMismatch,
                             "no reservation matches the presented ticket");
      }
      if (entry->row.consumed) {
        throw BerylliumError(ErrorCode::TicketMismatch,
                             "ticket has already been used");
      }
      if (!ticket_matches(payload.ticket, entry->row)) {
        throw BerylliumError(ErrorCode::TicketMismatch,
                             "ticket does not match the stored reservation");
      }
      TimestampMs now = now_ms();
      if (entry->expired || now >= entry->row.expires_at) {
        throw BerylliumError(ErrorCode::TicketExpired,
                             "reservation expired before submission");
      }

      // Validation passed: consume the ticket and start bookkeeping.
      state_.db->mark_consumed(entry->row.ticket_id, now);
      state_.ledger.reserved_slots -= entry->row.slots;
      state_.ledger.running_slots += entry->row.slots;

      workdir = (fs::path(opts_.workdir_root) / payload.job_id).string();
      fs::create_directories(fs::path(workdir) / "out");
      for (const auto& f : payload.input_files) {
        write_file((fs::path(workdir) / f.name).string(), f.bytes);
      }

      CeJobRecord rec;
      rec.job_id = payload.job_id;
      rec.state = JobState::Submitted;
      rec.workdir = workdir;
      rec.slots = entry->row.slots;
      state_.jobs[payload.job_id] = std::move(rec);
      write_ledger_sdes(&inst, ledger_sdes_locked());
      return "accepted";
    });
  } catch (const BerylliumError& e) {
    if (e.code() == ErrorCode::TicketMismatch ||
        e.code() == ErrorCode::TicketExpired ||
        e.code() == ErrorCode::InvalidArgument) {
      // The abort and its cause go to the bookkeeping and to the caller in
      // the same words.
      {
        std::lock_guard<std::mutex> lock(state_mu_);
        state_.terminal_jobs.insert(payload.job_id);
      }
      emit_event(payload.job_id, JobState::Aborted,
                 std::string(error_code_name(e.code())) + ": " + e.detail());
    }
    throw;
  }

  emit_event(payload.job_id, JobState::Submitted, "ticket validated");
  std::int64_t slots = 0;
  {
    std::lock_guard<std::mutex> lock(state_mu_);
    slots = state_.jobs[payload.job_id].slots;
  }
  {
    std::lock_guard<std::mutex> lock(executors_mu_);
    executors_.emplace_back(&CeService::executor_main, this, payload.job_id,
                            payload, workdir, slots);
  }
  return payload.job_id;
}

CeJobRecord CeService::job_status(const std::string& job_id) {
  CeJobRecord out;
  container_.dispatch("ce", "job_status", [&](Instance&) {
    std::lock_guard<std::mutex> lock(state_mu_);
    auto it = state_.jobs.find(job_id);
    if (it == state_.jobs.end()) {
      throw BerylliumError(ErrorCode::UnknownJob, "job not known here: " + job_id);
    }
    out = it->second;
    return "ok";
  });
  return out;
}

CeJobRecord CeService::fetch_results(const std::string& job_id) {
  CeJobRecord out;
  container_.dispatch("ce", "fetch_results", [&](Instance&) {
    std::lock_guard<std::mutex> lock(state_mu_);
    auto it = state_.jobs.find(job_id);
    if (it == state_.jobs.end()) {
      throw BerylliumError(ErrorCode::UnknownJob, "job not known here: " + job_id);
    }
    if (it->second.state != JobState::Done && it->second.state != JobState::Failed) {
      throw BerylliumError(ErrorCode::InvalidArgument,
                           "job is not terminal yet: " +
                               std::string(job_state_name(it->second.state)));
    }
    out = it->second;
    return "ok";
  });
  return out;
}

int CeService::expire_reservations() {
  std::vector<std::string> expired_jobs;
  std::optional<LedgerSdes> sdes;
  int count = 0;
  {
    std::lock_guard<std::mutex> lock(state_mu_);
    TimestampMs now = now_ms();
    for (const auto& e : state_.db->entries()) {
      if (e.row.consumed || e.expired || e.row.expires_at >= now) continue;
      state_.db->mark_expired(e.row.ticket_id, now);
      state_.ledger.reserved_slots -= e.row.slots;
      ++count;
      // One EXPIRED event per job — and none at all if the job already
      // reached a terminal state here (say, aborted at validation): its
      // timeline is closed, only the slots come back.
      if (!state_.terminal_jobs.count(e.row.job_id)) {
        state_.terminal_jobs.insert(e.row.job_id);
        expired_jobs.push_back(e.row.job_id);
      }
    }
    if (count > 0) sdes = ledger_sdes_locked();
  }
  if (sdes) write_ledger_sdes(nullptr, *sdes);
  for (const auto& job_id : expired_jobs) {
    emit_event(job_id, JobState::Expired, "reservation expired unused");
  }
  if (count > 0) renew_index();
  return count;
}

SlotLedger CeService::ledger() const {
  std::lock_guard<std::mutex> lock(state_mu_);
  return state_.ledger;
}

std::vector<TicketDb::Entry> CeService::ticket_entries() const {
  std::lock_guard<std::mutex> lock(state_mu_);
  return state_.db->entries();
}

void CeService::executor_main(std::string job_id, JobPayload payload,
                              std::string workdir, std::int64_t slots) {
  LedgerSdes sdes;
  {
    std::lock_guard<std::mutex> lock(state_mu_);
    state_.jobs[job_id].state = JobState::Running;
    sdes = ledger_sdes_locked();
  }
  write_ledger_sdes(nullptr, sdes);
  emit_event(job_id, JobState::Running, "executor started");

  // Launch the command in its own process group inside the workdir, stdout
  // and stderr captured to files for post-mortems.
  std::vector<char*> argv;
  argv.reserve(payload.command.size() + 1);
  for (auto& a : payload.command) argv.push_back(a.data());
  argv.push_back(nullptr);

  posix_spawn_file_actions_t fa;
  posix_spawn_file_actions_init(&fa);
  posix_spawn_file_actions_addchdir_np(&fa, workdir.c_str());
  posix_spawn_file_actions_addopen(&fa, 1, (workdir + "/stdout.log").c_str(),
                                   O_WRONLY | O_CREAT | O_TRUNC, 0644);
  posix_spawn_file_actions_addopen(&fa, 2, (workdir + "/stderr.log").c_str(),
                                   O_WRONLY | O_CREAT | O_TRUNC, 0644);
  posix_spawnattr_t attr;
  posix_spawnattr_init(&attr);
  posix_spawnattr_setflags(&attr, POSIX_SPAWN_SETPGROUP);
  posix_spawnattr_setpgroup(&attr, 0);

  pid_t pid = -1;
  int spawn_rc = posix_spawnp(&pid, argv[0], &fa, &attr, argv.data(), environ);
  posix_spawn_file_actions_destroy(&fa);
  posix_spawnattr_destroy(&attr);

  JobState final_state = JobState::Failed;
  std::optional<std::int64_t> exit_code;
  std::string detail;

  if (spawn_rc != 0) {
    exit_code = 127;
    detail = "failed to start command";
  } else {
    auto deadline = std::chrono::steady_clock::now() +
                    std::chrono::seconds(opts_.job_wall_limit_s);
    int status = 0;
    bool reaped = false;
    bool timed_out = false;
    while (!reaped) {
      pid_t r = waitpid(pid, &status, WNOHANG);
      if (r == pid) {
        reaped = true;
        break;
      }
      if (stopping_.load()) {
        // Service shutdown: reap the child and leave without recording a
        // made-up outcome; job records are volatile anyway.
        kill(-pid, SIGKILL);
        waitpid(pid, &status, 0);
        return;
      }
      if (std::chrono::steady_clock::now() >= deadline) {
        timed_out = true;
        kill(-pid, SIGKILL);
        waitpid(pid, &status, 0);
        reaped = true;
        break;
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(20));
    }
    if (timed_out) {
      exit_code = 128 + SIGKILL;
      detail = "timeout";
    } else if (WIFEXITED(status)) {
      exit_code = WEXITSTATUS(status);
      detail = "exit " + std::to_string(*exit_code);
      if (*exit_code == 0) final_state = JobState::Done;
    } else if (WIFSIGNALED(status)) {
      exit_code = 128 + WTERMSIG(status);
      detail = "signal " + std::to_string(WTERMSIG(status));
    }
  }

  // Whatever the command left under out/ is the job's output.
  std::vector<InputFile> outputs;
  std::error_code ec;
  for (const auto& de : fs::directory_iterator(fs::path(workdir) / "out", ec)) {
    if (!de.is_regular_file()) continue;
    try {
      InputFile f;
      f.name = de.path().filename().string();
      f.bytes = read_file(de.path().string());
      outputs.push_back(std::move(f));
    } catch (const std::exception& e) {
      container_.log().warn("skipping unreadable output file: " +
                            de.path().string());
    }
  }
  std::sort(outputs.begin(), outputs.end(),
            [](const InputFile& a, const InputFile& b) { return a.name < b.name; });

  {
    std::lock_guard<std::mutex> lock(state_mu_);
    CeJobRecord& rec = state_.jobs[job_id];
    rec.state = final_state;
    rec.exit_code = exit_code;
    rec.output_files = std::move(outputs);
    rec.detail = detail;
    state_.ledger.running_slots -= slots;
    state_.terminal_jobs.insert(job_id);
    sdes = ledger_sdes_locked();
  }
  write_ledger_sdes(nullptr, sdes);
  emit_event(job_id, final_state, detail);
  renew_index();
}

void CeService::background_main() {
  // Register immediately, heartbeat every period, sweep stale reservations
  // twice per TTL.
  renew_index();
  auto last_sweep = std::chrono::steady_clock::now();
  const auto sweep_period = std::chrono::milliseconds(
      std::max<std::int64_t>(100, opts_.reservation_ttl_s * 1000 / 2));
  const auto beat_period = std::chrono::milliseconds(
      std::max<std::int64_t>(100, opts_.heartbeat_period_s * 1000));
  std::unique_lock<std::mutex> lock(bg_mu_);
  while (!bg_cv_.wait_for(lock, beat_period, [this] { return bg_stop_; })) {
    lock.unlock();
    renew_index();
    if (std::chrono::steady_clock::now() - last_sweep >= sweep_period) {
      expire_reservations();
      last_sweep = std::chrono::steady_clock::now();
    }
    lock.lock();
  }
}

void CeService::mount_routes() {
  container_.mount_runtime_routes();

  container_.route_post("/ce/confirm", [this](const httplib::Request& req,
                                              httplib::Response& res) {
    json body = wire::decode(req.body, *wire::find_schema("POST", "/ce/confirm"),
                             {"ticket_id", "job_id", "slots"});
    JobTicket t = wire::ticket_from_json(body);
    ConfirmResult r = confirm(t);
    if (!r.accepted) {
      ServiceContainer::send_json(res, json{{"accepted", false},
                                            {"reason", r.reason}});
      return;
    }
    json reply = wire::to_json(r.ticket);
    reply["accepted"] = true;
    reply["instance_id"] = r.instance_id;
    ServiceContainer::send_json(res, reply);
  });

  container_.route_get("/ce/instance/:id/value",
                       [this](const httplib::Request& req, httplib::Response& res) {
                         auto ticket = get_value(req.path_params.at("id"));
                         ServiceContainer::send_json(
                             res, ticket ? wire::to_json(*ticket) : json::object());
                       });

  container_.route_post("/ce/jobs", [this](const httplib::Request& req,
                                           httplib::Response& res) {
    json body = wire::decode(req.body, *wire::find_schema("POST", "/ce/jobs"),
                             {"job_id", "command", "ticket"});
    JobPayload p = wire::payload_from_json(body);
    std::string job_id = submit_job(p);
    ServiceContainer::send_json(res, json{{"job_id", job_id}, {"ok", true}});
  });

  container_.route_get("/ce/jobs/:id/status", [this](const httplib::Request& req,
                                                     httplib::Response& res) {
    CeJobRecord rec = job_status(req.path_params.at("id"));
    ServiceContainer::send_json(res, json{{"detail", rec.detail},
                                          {"job_id", rec.job_id},
                                          {"state", job_state_name(rec.state)}});
  });

  container_.route_get("/ce/jobs/:id/results", [this](const httplib::Request& req,
                                                      httplib::Response& res) {
    CeJobRecord rec = fetch_results(req.path_params.at("id"));
    json files = json::array();
    for (const auto& f : rec.output_files) files.push_back(wire::to_json(f));
    ServiceContainer::send_json(res, json{{"exit_code", *rec.exit_code},
                                          {"job_id", rec.job_id},
                                          {"output_files", std::move(files)}});
  });

  container_.route_get("/ce/sde/:name", [this](const httplib::Request& req,
                                               httplib::Response& res) {
    ServiceDataValue v = container_.query_sde("ce", req.path_params.at("name"));
    ServiceContainer::send_json(res, wire::to_json(v));
  });
}

bool CeService::start() {
  if (!container_.start(opts_.host, opts_.port)) return false;
  if (opts_.run_background) {
    background_ = std::thread(&CeService::background_main, this);
  }
  return true;
}

void CeService::stop() {
  stopping_.store(true);
  {
    std::lock_guard<std::mutex> lock(bg_mu_);
    bg_stop_ = true;
    bg_cv_.notify_all();
  }
  if (background_.joinable()) background_.join();
  std::vector<std::thread> executors;
  {
    std::lock_guard<std::mutex> lock(executors_mu_);
    executors.swap(executors_);
  }
  for (auto& t : executors) {
    if (t.joinable()) t.join();
  }
  container_.stop();
}

void CeService::wait() { container_.wait(); }

}  // namespace beryllium
