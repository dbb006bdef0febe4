// The user interface binary, driven as a real process against a real
// multi-process topology: submit / status / fetch / watch / admin, the
// stable exit-code contract, and URL resolution (flag > environment >
// ~/.beryllium.json).
//
// run_capture collects stdout only, so machine-readable assertions use
// --json (errors go to stdout there); human-mode checks stick to exit codes
// and stdout lines.

#include <doctest.h>

#include <string>
#include <vector>

#include "beryllium/http_client.hpp"
#include "beryllium/testkit.hpp"
#include "beryllium/util.hpp"
#include "test_support.hpp"

using namespace beryllium;
using beryllium::test::ScratchDir;
using nlohmann::json;

namespace {

std::string cli() { return testkit::find_binary("beryllium"); }

std::vector<std::string> lines_of(const std::string& out) {
  std::vector<std::string> lines;
  std::string cur;
  for (char c : out) {
    if (c == '\n') {
      if (!cur.empty()) lines.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) lines.push_back(cur);
  return lines;
}

json last_json(const std::string& out) {
  auto lines = lines_of(out);
  REQUIRE(!lines.empty());
  json parsed = json::parse(lines.back(), nullptr, false);
  REQUIRE(!parsed.is_discarded());
  return parsed;
}

}  // namespace

TEST_CASE("cli round trip: submit, status, fetch, watch, and the failure exits") {
  testkit::TopologySpec spec;
  spec.ces.push_back(testkit::CeSpec{.ce_id = "ce-a", .slots = 2});
  testkit::Topology topo(spec);
  topo.start();
  topo.await_registered(1);
  HttpJsonClient http(3000);
  ScratchDir scratch;

  // ---- submit with a staged input file --------------------------------------
  std::string input_path = scratch.file("data.txt");
  write_file(input_path, "payload bytes");
  auto submitted = testkit::run_capture(
      cli(), {"submit", "--json", "--broker-url", topo.broker_url(), "--slots", "1",
              "--input", input_path, "--",
              "sh", "-c", "cat data.txt > out/copy.txt && printf 'hi\\n' > out/r.txt"});
  REQUIRE(submitted.exit_code == 0);
  json sub = last_json(submitted.out);
  std::string job_id = sub["job_id"];
  CHECK(job_id.substr(0, 4) == "job-");
  CHECK(sub["ce_url"] == topo.ce_url("ce-a"));
  CHECK(sub["ticket_id"].get<std::string>().size() == 32);
  REQUIRE(sub["attempts"].size() == 1);
  CHECK(sub["attempts"][0]["outcome"] == "accepted");

  REQUIRE(testkit::wait_until(
      [&] {
        return http.get(topo.lnb_url(), "/lnb/jobs/" + job_id)
                   .body.value("current_state", std::string()) == "DONE";
      },
      20000));

  // ---- status: human first line is the state, then the timeline -------------
  auto status = testkit::run_capture(
      cli(), {"status", "--lnb-url", topo.lnb_url(), job_id});
  REQUIRE(status.exit_code == 0);
  auto status_lines = lines_of(status.out);
  REQUIRE(status_lines.size() == 5);
  CHECK(status_lines[0] == "DONE");
  CHECK(status_lines[1].rfind("#1 RESERVED ", 0) == 0);
  CHECK(status_lines[1].find("reserved at ce-a") != std::string::npos);
  CHECK(status_lines[2].rfind("#2 SUBMITTED ", 0) == 0);
  CHECK(status_lines[3].rfind("#3 RUNNING ", 0) == 0);
  CHECK(status_lines[4].rfind("#4 DONE ", 0) == 0);
  CHECK(status_lines[4].find("exit 0") != std::string::npos);

  auto status_json = testkit::run_capture(
      cli(), {"status", "--json", "--lnb-url", topo.lnb_url(), job_id});
  REQUIRE(status_json.exit_code == 0);
  json view = last_json(status_json.out);
  CHECK(view["current_state"] == "DONE");
  CHECK(view["timeline"].size() == 4);

  // ---- fetch: outputs land in --out, byte-exact, idempotent ----------------
  std::string out_dir = scratch.file("results");
  auto fetch = testkit::run_capture(
      cli(), {"fetch", "--json", "--ce-url", topo.ce_url("ce-a"), "--out", out_dir, job_id});
  REQUIRE(fetch.exit_code == 0);
  json fetched = last_json(fetch.out);
  CHECK(fetched["exit_code"] == 0);
  REQUIRE(fetched["files"].size() == 2);
  CHECK(read_file(out_dir + "/copy.txt") == "payload bytes");
  CHECK(read_file(out_dir + "/r.txt") == "hi\n");

  auto fetch_again = testkit::run_capture(
      cli(), {"fetch", "--json", "--ce-url", topo.ce_url("ce-a"), "--out", out_dir, job_id});
  CHECK(fetch_again.exit_code == 0);
  CHECK(read_file(out_dir + "/copy.txt") == "payload bytes");

  auto fetch_human = testkit::run_capture(
      cli(), {"fetch", "--ce-url", topo.ce_url("ce-a"), "--out", out_dir, job_id});
  CHECK(lines_of(fetch_human.out)[0] == "exit_code 0");

  // ---- watch a finished job: pure backfill, exactly once, in order ----------
  auto watch = testkit::run_capture(
      cli(), {"watch", "--json", "--lnb-url", topo.lnb_url(), job_id});
  REQUIRE(watch.exit_code == 0);
  auto watch_lines = lines_of(watch.out);
  REQUIRE(watch_lines.size() == 4);
  for (int i = 0; i < 4; ++i) {
    json e = json::parse(watch_lines[i]);
    CHECK(e["seq"] == i + 1);
    CHECK(e["job_id"] == job_id);
  }
  CHECK(json::parse(watch_lines[3])["state"] == "DONE");

  // ---- watch a live job: events stream until terminal -----------------------
  auto live_submit = testkit::run_capture(
      cli(), {"submit", "--json", "--broker-url", topo.broker_url(), "--slots", "1",
              "--", "sh", "-c", "sleep 1"});
  REQUIRE(live_submit.exit_code == 0);
  std::string live_id = last_json(live_submit.out)["job_id"];
  auto live_watch = testkit::run_capture(
      cli(), {"watch", "--json", "--lnb-url", topo.lnb_url(), "--timeout-s", "30", live_id});
  REQUIRE(live_watch.exit_code == 0);
  auto live_lines = lines_of(live_watch.out);
  REQUIRE(live_lines.size() >= 2);  // joined mid-flight: at least RUNNING-ish tail
  std::int64_t prev_seq = 0;
  for (const auto& line : live_lines) {
    json e = json::parse(line);
    CHECK(e["seq"].get<std::int64_t>() > prev_seq);
    prev_seq = e["seq"].get<std::int64_t>();
  }
  CHECK(json::parse(live_lines.back())["state"] == "DONE");

  // ---- failure exits ---------------------------------------------------------
  auto starved = testkit::run_capture(
      cli(), {"submit", "--json", "--broker-url", topo.broker_url(), "--slots", "99",
              "--", "true"});
  CHECK(starved.exit_code == 2);
  CHECK(last_json(starved.out)["error"] == "no-resources");

  auto ghost_status = testkit::run_capture(
      cli(), {"status", "--json", "--lnb-url", topo.lnb_url(), "job-doesnotexist"});
  CHECK(ghost_status.exit_code == 5);
  CHECK(last_json(ghost_status.out)["error"] == "unknown-job");

  auto ghost_fetch = testkit::run_capture(
      cli(), {"fetch", "--json", "--ce-url", topo.ce_url("ce-a"), "job-doesnotexist"});
  CHECK(ghost_fetch.exit_code == 5);

  auto slow_submit = testkit::run_capture(
      cli(), {"submit", "--json", "--broker-url", topo.broker_url(), "--slots", "1",
              "--", "sleep", "3"});
  REQUIRE(slow_submit.exit_code == 0);
  std::string slow_id = last_json(slow_submit.out)["job_id"];
  auto early_fetch = testkit::run_capture(
      cli(), {"fetch", "--json", "--ce-url", topo.ce_url("ce-a"), slow_id});
  CHECK(early_fetch.exit_code == 6);
  CHECK(last_json(early_fetch.out)["error"] == "not-terminal");

  // ---- tampered ticket: abort reaches the user and the books ----------------
  auto tampered = testkit::run_capture(
      cli(), {"submit", "--json", "--tamper-ticket", "--broker-url", topo.broker_url(),
              "--slots", "1", "--", "true"});
  CHECK(tampered.exit_code == 3);
  json abort = last_json(tampered.out);
  CHECK(abort["error"] == "ticket-mismatch");
  CHECK(abort["detail"] == "no reservation matches the presented ticket");
  std::string aborted_id = abort["job_id"];
  CHECK(aborted_id.substr(0, 4) == "job-");

  auto aborted_view = testkit::run_capture(
      cli(), {"status", "--json", "--lnb-url", topo.lnb_url(), aborted_id});
  REQUIRE(aborted_view.exit_code == 0);
  json timeline = last_json(aborted_view.out)["timeline"];
  REQUIRE(timeline.size() == 2);
  CHECK(timeline[0]["state"] == "RESERVED");
  CHECK(timeline[1]["state"] == "ABORTED");
  CHECK(timeline[1]["detail"] ==
        "ticket-mismatch: no reservation matches the presented ticket");

  topo.teardown();
}

TEST_CASE("cli admin actions and URL resolution precedence") {
  testkit::TopologySpec spec;
  spec.ces.push_back(testkit::CeSpec{.ce_id = "ce-a", .slots = 1});
  testkit::Topology topo(spec);
  topo.start();
  topo.await_registered(1);
  ScratchDir scratch;

  SUBCASE("admin ping, status, loglevel") {
    auto ping = testkit::run_capture(cli(), {"admin", "--url", topo.broker_url(), "ping"});
    REQUIRE(ping.exit_code == 0);
    CHECK(lines_of(ping.out)[0].rfind("alive uptime=", 0) == 0);

    auto status = testkit::run_capture(
        cli(), {"admin", "--json", "--url", topo.broker_url(), "status"});
    REQUIRE(status.exit_code == 0);
    json s = last_json(status.out);
    CHECK(s["instance_count"] == 1);
    CHECK(s.contains("requests_served"));
    CHECK(s.contains("log_level"));

    auto set = testkit::run_capture(
        cli(), {"admin", "--url", topo.broker_url(), "loglevel", "DEBUG"});
    CHECK(set.exit_code == 0);
    CHECK(lines_of(set.out)[0] == "ok");

    auto bogus = testkit::run_capture(
        cli(), {"admin", "--json", "--url", topo.broker_url(), "loglevel", "BOGUS"});
    CHECK(bogus.exit_code == 1);
    CHECK(last_json(bogus.out)["error"] == "invalid-argument");

    CHECK(testkit::run_capture(cli(), {"admin", "--url", topo.broker_url(), "loglevel"})
              .exit_code == 1);
    CHECK(testkit::run_capture(cli(), {"admin", "--url", topo.broker_url(), "reboot"})
              .exit_code == 1);
  }

  SUBCASE("URL resolution: flag beats environment beats config file") {
    // A live L&B answers "unknown-job" (exit 5): proof the URL was used.
    // A dead URL gives a transport failure (exit 4). A missing URL is usage
    // (exit 1). Each probe isolates HOME so no real config interferes.
    std::string home = scratch.path();
    std::string dead = "http://127.0.0.1:" + std::to_string(testkit::pick_free_port());
    auto probe = [&](const std::string& env_assignments, const std::string& args) {
      std::string sh_cmd = "env -u BERYLLIUM_LNB_URL " + env_assignments +
                           " HOME=" + home + " " + cli() + " status " + args +
                           " job-ghost";
      return testkit::run_capture("/bin/sh", {"-c", sh_cmd});
    };

    CHECK(probe("", "").exit_code == 1);  // nowhere to look
    CHECK(probe("BERYLLIUM_LNB_URL=" + topo.lnb_url(), "").exit_code == 5);

    write_file(home + "/.beryllium.json", json{{"lnb_url", topo.lnb_url()}}.dump());
    CHECK(probe("", "").exit_code == 5);  // config file alone suffices
    // Environment overrides the config file...
    CHECK(probe("BERYLLIUM_LNB_URL=" + dead, "").exit_code == 4);
    // ...and the flag overrides the environment.
    CHECK(probe("BERYLLIUM_LNB_URL=" + topo.lnb_url(), "--lnb-url " + dead).exit_code == 4);
    CHECK(probe("BERYLLIUM_LNB_URL=" + dead, "--lnb-url " + topo.lnb_url()).exit_code == 5);

    SUBCASE("the broker URL resolves the same way for submit") {
      std::string sh_cmd = "env -u BERYLLIUM_BROKER_URL HOME=" + home + " " + cli() +
                           " submit --json --slots 1 -- true";
      write_file(home + "/.beryllium.json",
                 json{{"broker_url", topo.broker_url()}}.dump());
      auto r = testkit::run_capture("/bin/sh", {"-c", sh_cmd});
      CHECK(r.exit_code == 0);
      CHECK(last_json(r.out).contains("job_id"));
    }
  }

  SUBCASE("admin shutdown stops the service; later pings fail with exit 4") {
    auto down = testkit::run_capture(
        cli(), {"admin", "--url", topo.broker_url(), "shutdown"});
    REQUIRE(down.exit_code == 0);
    REQUIRE(testkit::wait_until(
        [&] {
          return testkit::run_capture(cli(), {"admin", "--url", topo.broker_url(), "ping"})
                     .exit_code == 4;
        },
        5000));
  }

  topo.teardown();
}
