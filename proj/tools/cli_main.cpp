// beryllium: the command-line user interface.  Submits job requests to the
// broker, forwards the job payload with its ticket straight to the assigned
// computing element (requirements go to the broker; the job itself never
// does), inquires status, watches notifications, fetches results, and drives
// container admin operations.
//
// Exit codes are a stable contract:
//   0 success          1 other error        2 no resources
//   3 ticket abort     4 transport failure  5 unknown job
//   6 results not ready (job not terminal)

#include <CLI11.hpp>
#include <httplib.h>

#include <condition_variable>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <mutex>
#include <set>
#include <thread>
#include <vector>

#include "beryllium/domain.hpp"
#include "beryllium/http_client.hpp"
#include "beryllium/util.hpp"
#include "beryllium/wire.hpp"

namespace {

using beryllium::HttpJsonClient;
using beryllium::HttpReply;
using nlohmann::json;
namespace fs = std::filesystem;

constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitNoResources = 2;
constexpr int kExitTicketAbort = 3;
constexpr int kExitTransport = 4;
constexpr int kExitUnknownJob = 5;
constexpr int kExitNotTerminal = 6;

bool g_json = false;

void emit(const json& machine, const std::string& human) {
  if (g_json) {
    std::printf("%s\n", machine.dump().c_str());
  } else {
    std::printf("%s\n", human.c_str());
  }
}

void emit_error(const std::string& code, const std::string& detail) {
  if (g_json) {
    std::printf("%s\n", json{{"error", code}, {"detail", detail}}.dump().c_str());
  } else if (detail.empty()) {
    std::fprintf(stderr, "%s\n", code.c_str());
  } else {
    std::fprintf(stderr, "%s: %s\n", code.c_str(), detail.c_str());
  }
}

// Flag > environment variable > ~/.beryllium.json.
std::string resolve_url(const std::string& flag_value, const char* env_name,
                        const json& config, const char* config_key) {
  if (!flag_value.empty()) return flag_value;
  if (const char* env = std::getenv(env_name); env && *env) return env;
  if (config.is_object() && config.contains(config_key) &&
      config[config_key].is_string()) {
    return config[config_key].get<std::string>();
  }
  return "";
}

json load_config() {
  const char* home = std::getenv("HOME");
  if (!home || !*home) return json::object();
  fs::path path = fs::path(home) / ".beryllium.json";
  std::error_code ec;
  if (!fs::exists(path, ec)) return json::object();
  try {
    json parsed = json::parse(beryllium::read_file(path.string()), nullptr, false);
    if (parsed.is_object()) return parsed;
  } catch (const std::exception&) {
    // Unreadable config is ignored rather than fatal; flags still work.
  }
  return json::object();
}

int exit_code_for_reply(const HttpReply& reply) {
  if (!reply.transport_ok()) return kExitTransport;
  auto code = reply.error_code();
  if (!code) return kExitError;
  if (*code == "no-resources") return kExitNoResources;
  if (*code == "ticket-mismatch" || *code == "ticket-expired") return kExitTicketAbort;
  if (*code == "unknown-job") return kExitUnknownJob;
  return kExitError;
}

int report_failure(const HttpReply& reply, const std::string& during) {
  if (!reply.transport_ok()) {
    emit_error("transport", during + ": connection failed");
    return kExitTransport;
  }
  emit_error(reply.error_code().value_or("error"), reply.error_detail());
  return exit_code_for_reply(reply);
}

std::string format_event_line(const json& e) {
  std::string line = "#" + std::to_string(e.value("seq", 0LL)) + " " +
                     e.value("state", std::string("?"));
  if (e.contains("at") && e["at"].is_number_integer()) {
    line += " " + beryllium::format_iso8601(e["at"].get<std::int64_t>());
  }
  if (e.contains("source") && e["source"].is_string()) {
    line += " " + e["source"].get<std::string>();
  }
  if (e.contains("detail") && e["detail"].is_string() &&
      !e["detail"].get<std::string>().empty()) {
    line += " — " + e["detail"].get<std::string>();
  }
  if (e.value("anomalous", false)) line += " [anomalous]";
  return line;
}

// ---------------------------------------------------------------------------
// submit

struct SubmitArgs {
  std::string broker_url;
  std::int64_t slots = 1;
  std::int64_t min_free_slots = 0;
  std::vector<std::string> tags;
  std::vector<std::string> inputs;
  std::vector<std::string> command;
  bool tamper_ticket = false;
  int timeout_ms = 10000;
};

int cmd_submit(const SubmitArgs& args) {
  HttpJsonClient client(args.timeout_ms);

  json request = {{"slots", args.slots}};
  if (args.min_free_slots > 0) request["min_free_slots"] = args.min_free_slots;
  if (!args.tags.empty()) {
    request["required_tags"] = std::set<std::string>(args.tags.begin(), args.tags.end());
  }

  HttpReply brokered = client.post(args.broker_url, "/broker/submit", request);
  if (!brokered.ok()) return report_failure(brokered, "broker submit");

  std::string job_id, ce_url;
  beryllium::JobTicket ticket;
  try {
    job_id = brokered.body.at("job_id").get<std::string>();
    ce_url = brokered.body.at("ce_url").get<std::string>();
    ticket = beryllium::wire::ticket_from_json(brokered.body.at("ticket"));
  } catch (const std::exception& e) {
    emit_error("error", std::string("malformed broker reply: ") + e.what());
    return kExitError;
  }

  if (args.tamper_ticket) {
    // Flip one hex digit of the ticket id to exercise the validation abort.
    for (auto it = ticket.ticket_id.rbegin(); it != ticket.ticket_id.rend(); ++it) {
      if (std::isxdigit(static_cast<unsigned char>(*it))) {
        *it = (*it == '0') ? '1' : '0';
        break;
      }
    }
  }

  beryllium::JobPayload payload;
  payload.job_id = job_id;
  payload.command = args.command;
  payload.ticket = ticket;
  for (const auto& path : args.inputs) {
    beryllium::InputFile f;
    f.name = fs::path(path).filename().string();
    try {
      f.bytes = beryllium::read_file(path);
    } catch (const std::exception& e) {
      emit_error("error", std::string("cannot read input file: ") + e.what());
      return kExitError;
    }
    payload.input_files.push_back(std::move(f));
  }

  HttpReply submitted = client.post(ce_url, "/ce/jobs", beryllium::wire::to_json(payload));
  if (!submitted.ok()) {
    if (!submitted.transport_ok()) {
      return report_failure(submitted, "job submission to " + ce_url);
    }
    // The job already exists on the broker's books at this point, so the
    // error output carries its id for follow-up status inquiries.
    int rc = exit_code_for_reply(submitted);
    if (g_json) {
      std::printf("%s\n", json{{"error", submitted.error_code().value_or("error")},
                               {"detail", submitted.error_detail()},
                               {"job_id", job_id},
                               {"ce_url", ce_url}}
                               .dump()
                               .c_str());
    } else {
      emit_error(submitted.error_code().value_or("error"), submitted.error_detail());
      if (rc == kExitTicketAbort) {
        std::fprintf(stderr, "job %s aborted by the computing element\n", job_id.c_str());
      }
    }
    return rc;
  }

  emit(json{{"job_id", job_id},
            {"ce_url", ce_url},
            {"ticket_id", ticket.ticket_id},
            {"attempts", brokered.body.value("attempts", json::array())}},
       "job_id " + job_id + "\nce_url " + ce_url + "\nticket " + ticket.ticket_id);
  return kExitOk;
}

// ---------------------------------------------------------------------------
// status

int cmd_status(const std::string& lnb_url, const std::string& job_id) {
  HttpJsonClient client(10000);
  HttpReply reply = client.get(lnb_url, "/lnb/jobs/" + job_id);
  if (!reply.ok()) return report_failure(reply, "status inquiry");

  if (g_json) {
    std::printf("%s\n", reply.body.dump().c_str());
  } else {
    std::printf("%s\n", reply.body.value("current_state", std::string("?")).c_str());
    if (reply.body.contains("timeline") && reply.body["timeline"].is_array()) {
      for (const auto& e : reply.body["timeline"]) {
        std::printf("%s\n", format_event_line(e).c_str());
      }
    }
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// fetch

int cmd_fetch(const std::string& ce_url, const std::string& job_id,
              const std::string& out_dir) {
  HttpJsonClient client(10000);
  HttpReply reply = client.get(ce_url, "/ce/jobs/" + job_id + "/results");
  if (!reply.ok()) {
    if (reply.transport_ok() && reply.error_code() == "invalid-argument") {
      emit_error("not-terminal", reply.error_detail());
      return kExitNotTerminal;
    }
    return report_failure(reply, "result fetch");
  }

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  json written = json::array();
  if (reply.body.contains("output_files") && reply.body["output_files"].is_array()) {
    for (const auto& f : reply.body["output_files"]) {
      try {
        beryllium::InputFile file = beryllium::wire::input_file_from_json(f);
        // Keep only the basename: output names must not escape out_dir.
        fs::path dest = fs::path(out_dir) / fs::path(file.name).filename();
        beryllium::write_file(dest.string(), file.bytes);
        written.push_back(dest.string());
      } catch (const std::exception& e) {
        emit_error("error", std::string("cannot write output file: ") + e.what());
        return kExitError;
      }
    }
  }

  json machine = {{"job_id", job_id},
                  {"exit_code", reply.body.value("exit_code", 0LL)},
                  {"files", written}};
  std::string human = "exit_code " + std::to_string(reply.body.value("exit_code", 0LL));
  for (const auto& f : written) human += "\n" + f.get<std::string>();
  emit(machine, human);
  return kExitOk;
}

// ---------------------------------------------------------------------------
// watch

struct WatchArgs {
  std::string lnb_url;
  std::string job_id;
  int listen_delay_ms = 0;  // test hook: listener comes up late to force a retry
  int timeout_s = 300;
};

int cmd_watch(const WatchArgs& args) {
  HttpJsonClient client(10000);

  std::mutex mu;
  std::condition_variable cv;
  std::vector<json> inbox;

  httplib::Server listener;
  listener.new_task_queue = [] { return new httplib::ThreadPool(4); };
  listener.Post("/notify", [&](const httplib::Request& req, httplib::Response& res) {
    json body = json::parse(req.body, nullptr, false);
    if (!body.is_discarded() && body.is_object()) {
      std::lock_guard<std::mutex> lock(mu);
      inbox.push_back(std::move(body));
      cv.notify_all();
    }
    res.set_content(json{{"ok", true}}.dump(), "application/json");
  });

  int port = listener.bind_to_any_port("127.0.0.1");
  if (port <= 0) {
    emit_error("transport", "cannot bind notification listener");
    return kExitTransport;
  }

  // Subscribe before the listener accepts requests.  Any event published in
  // the gap gets its first delivery refused and arrives on a retry, which is
  // exactly the at-least-once behavior the seq dedup below absorbs.
  const std::string callback = "http://127.0.0.1:" + std::to_string(port) + "/notify";
  HttpReply sub = client.post(args.lnb_url, "/lnb/subscribe",
                              json{{"topic", "job:" + args.job_id},
                                   {"callback_url", callback}});
  if (!sub.ok()) return report_failure(sub, "subscribe");
  const std::string sub_id = sub.body.value("subscription_id", std::string());

  if (args.listen_delay_ms > 0) {
    std::this_thread::sleep_for(std::chrono::milliseconds(args.listen_delay_ms));
  }
  std::thread serve_thread([&] { listener.listen_after_bind(); });
  listener.wait_until_ready();

  auto finish = [&](int rc) {
    if (!sub_id.empty()) client.del(args.lnb_url, "/lnb/subscribe/" + sub_id);
    listener.stop();
    serve_thread.join();
    return rc;
  };

  std::set<std::int64_t> printed;
  bool terminal_seen = false;
  auto handle = [&](const json& e) {
    if (terminal_seen || !e.contains("seq")) return;
    std::int64_t seq = e["seq"].get<std::int64_t>();
    if (!printed.insert(seq).second) return;  // duplicate delivery
    if (g_json) {
      std::printf("%s\n", e.dump().c_str());
    } else {
      std::printf("%s\n", format_event_line(e).c_str());
    }
    std::fflush(stdout);
    auto state = beryllium::job_state_from_name(e.value("state", std::string()));
    if (state && beryllium::is_terminal(*state)) terminal_seen = true;
  };

  // Backfill events already on the books (the job may even be terminal).
  HttpReply history = client.get(args.lnb_url, "/lnb/jobs/" + args.job_id + "/events");
  if (history.ok() && history.body.contains("events")) {
    for (const auto& e : history.body["events"]) handle(e);
  } else if (!history.transport_ok()) {
    return finish(report_failure(history, "event backfill"));
  }

  auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(args.timeout_s);
  while (!terminal_seen) {
    std::vector<json> batch;
    {
      std::unique_lock<std::mutex> lock(mu);
      cv.wait_for(lock, std::chrono::milliseconds(200), [&] { return !inbox.empty(); });
      batch.swap(inbox);
    }
    std::sort(batch.begin(), batch.end(), [](const json& a, const json& b) {
      return a.value("seq", 0LL) < b.value("seq", 0LL);
    });
    for (const auto& e : batch) handle(e);
    if (std::chrono::steady_clock::now() >= deadline) {
      emit_error("timeout", "no terminal event within " +
                                std::to_string(args.timeout_s) + "s");
      return finish(kExitError);
    }
  }
  return finish(kExitOk);
}

// ---------------------------------------------------------------------------
// admin

int cmd_admin(const std::string& url, const std::string& action,
              const std::string& arg) {
  HttpJsonClient client(5000);
  HttpReply reply;
  if (action == "ping") {
    reply = client.get(url, "/admin/ping");
  } else if (action == "shutdown") {
    reply = client.post(url, "/admin/shutdown", json::object());
  } else if (action == "status") {
    reply = client.get(url, "/admin/status");
  } else if (action == "loglevel") {
    if (arg.empty()) {
      emit_error("usage", "admin loglevel needs a level argument");
      return kExitError;
    }
    reply = client.post(url, "/admin/loglevel", json{{"level", arg}});
  } else {
    emit_error("usage", "unknown admin action: " + action);
    return kExitError;
  }

  if (!reply.ok()) return report_failure(reply, "admin " + action);

  if (g_json) {
    std::printf("%s\n", reply.body.dump().c_str());
  } else if (action == "ping") {
    std::printf("alive uptime=%llds\n",
                static_cast<long long>(reply.body.value("uptime_s", 0LL)));
  } else if (action == "status") {
    std::printf("uptime=%llds instances=%lld requests=%lld log_level=%s\n",
                static_cast<long long>(reply.body.value("uptime_s", 0LL)),
                static_cast<long long>(reply.body.value("instance_count", 0LL)),
                static_cast<long long>(reply.body.value("requests_served", 0LL)),
                reply.body.value("log_level", std::string("?")).c_str());
  } else {
    std::printf("ok\n");
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"beryllium: submit and track jobs on the batch testbed"};
  app.require_subcommand(1);
  app.add_flag("--json", g_json, "Machine-readable JSON output");
  // The flag also works after the subcommand name, where most people type it.
  auto add_json_flag = [](CLI::App* sub) {
    sub->add_flag("--json", g_json, "Machine-readable JSON output");
  };

  json config = load_config();

  SubmitArgs submit_args;
  auto* submit = app.add_subcommand("submit", "Broker a reservation, then send the job to the assigned CE");
  add_json_flag(submit);
  submit->add_option("--broker-url", submit_args.broker_url, "Resource Broker base URL");
  submit->add_option("--slots", submit_args.slots, "Slots the job occupies")
      ->capture_default_str();
  submit->add_option("--min-free-slots", submit_args.min_free_slots,
                     "Extra headroom required on the chosen CE");
  submit->add_option("--tags", submit_args.tags, "Required capability tags (repeatable)");
  submit->add_option("--input", submit_args.inputs, "Input file to stage (repeatable)");
  submit->add_option("--request-timeout-ms", submit_args.timeout_ms,
                     "Per-call HTTP timeout")->capture_default_str();
  submit->add_flag("--tamper-ticket", submit_args.tamper_ticket,
                   "Debug: corrupt the ticket before sending the job")
      ->group("");  // hidden
  submit->add_option("command", submit_args.command, "Job command and arguments")
      ->required();
  submit->positionals_at_end();

  std::string status_lnb, status_job;
  auto* status = app.add_subcommand("status", "Print a job's current state and timeline");
  add_json_flag(status);
  status->add_option("--lnb-url", status_lnb, "Logging & Bookkeeping base URL");
  status->add_option("job_id", status_job, "Job id")->required();

  std::string fetch_ce, fetch_job, fetch_out = ".";
  auto* fetch = app.add_subcommand("fetch", "Download a finished job's output files");
  add_json_flag(fetch);
  fetch->add_option("--ce-url", fetch_ce, "Computing Element base URL")->required();
  fetch->add_option("--out", fetch_out, "Destination directory")->capture_default_str();
  fetch->add_option("job_id", fetch_job, "Job id")->required();

  WatchArgs watch_args;
  auto* watch = app.add_subcommand("watch", "Stream a job's events until it finishes");
  add_json_flag(watch);
  watch->add_option("--lnb-url", watch_args.lnb_url, "Logging & Bookkeeping base URL");
  watch->add_option("--timeout-s", watch_args.timeout_s, "Give up after this long")
      ->capture_default_str();
  watch->add_option("--listen-delay-ms", watch_args.listen_delay_ms,
                    "Debug: delay the callback listener to force a delivery retry")
      ->group("");  // hidden
  watch->add_option("job_id", watch_args.job_id, "Job id")->required();

  std::string admin_url, admin_action, admin_arg;
  auto* admin = app.add_subcommand("admin", "Container admin: ping | shutdown | loglevel <L> | status");
  add_json_flag(admin);
  admin->add_option("--url", admin_url, "Service base URL")->required();
  admin->add_option("action", admin_action, "ping | shutdown | loglevel | status")
      ->required();
  admin->add_option("arg", admin_arg, "Action argument (loglevel only)");

  CLI11_PARSE(app, argc, argv);

  if (submit->parsed()) {
    submit_args.broker_url = resolve_url(submit_args.broker_url,
                                         "BERYLLIUM_BROKER_URL", config, "broker_url");
    if (submit_args.broker_url.empty()) {
      emit_error("usage", "no broker URL: pass --broker-url, set BERYLLIUM_BROKER_URL, "
                          "or add broker_url to ~/.beryllium.json");
      return kExitError;
    }
    return cmd_submit(submit_args);
  }
  if (status->parsed() || watch->parsed()) {
    std::string* target = status->parsed() ? &status_lnb : &watch_args.lnb_url;
    *target = resolve_url(*target, "BERYLLIUM_LNB_URL", config, "lnb_url");
    if (target->empty()) {
      emit_error("usage", "no L&B URL: pass --lnb-url, set BERYLLIUM_LNB_URL, "
                          "or add lnb_url to ~/.beryllium.json");
      return kExitError;
    }
    return status->parsed() ? cmd_status(status_lnb, status_job) : cmd_watch(watch_args);
  }
  if (fetch->parsed()) return cmd_fetch(fetch_ce, fetch_job, fetch_out);
  if (admin->parsed()) return cmd_admin(admin_url, admin_action, admin_arg);
  return kExitError;
}
