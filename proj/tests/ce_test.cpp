// Computing element: the durable ticket database, slot accounting,
// reservation confirmation, ticket validation at submission, job execution
// with output collection, reservation expiry, and the HTTP surface.
// The CE under test reports to a real event log service; there is no broker
// here — tests mint incomplete tickets directly.

#include <doctest.h>

#include <atomic>
#include <chrono>
#include <fstream>
#include <string>
#include <thread>
#include <vector>

#include "beryllium/ce_service.hpp"
#include "beryllium/http_client.hpp"
#include "beryllium/lnb_service.hpp"
#include "beryllium/testkit.hpp"
#include "beryllium/wire.hpp"
#include "test_support.hpp"

using namespace beryllium;
using beryllium::test::ScratchDir;
using nlohmann::json;
using namespace std::chrono_literals;

// ---------------------------------------------------------------------------
// TicketDb

namespace {

TicketDbEntry db_row(const std::string& ticket_id, const std::string& job_id,
                     std::int64_t slots = 1, TimestampMs issued = 1000,
                     TimestampMs expires = 61000) {
  TicketDbEntry e;
  e.ticket_id = ticket_id;
  e.job_id = job_id;
  e.slots = slots;
  e.issued_at = issued;
  e.expires_at = expires;
  return e;
}

}  // namespace

TEST_CASE("ticket database: append, tombstones, and lookup") {
  ScratchDir dir;
  TicketDb db(dir.file("tickets.ndjson"));

  db.append(db_row("t1", "job-1"));
  db.append(db_row("t2", "job-2", 2));
  REQUIRE(db.entries().size() == 2);
  CHECK(db.entries()[0].row.ticket_id == "t1");  // insertion order
  CHECK(db.find("t1") != nullptr);
  CHECK(!db.find("t1")->row.consumed);
  CHECK(!db.find("t1")->expired);
  CHECK(db.find("ghost") == nullptr);

  CHECK_THROWS_WITH_AS(db.append(db_row("t1", "job-9")),
                       "invalid-argument: duplicate ticket_id in database: t1",
                       BerylliumError);

  SUBCASE("consumption is single-shot") {
    db.mark_consumed("t1", 5000);
    CHECK(db.find("t1")->row.consumed);
    CHECK_THROWS_AS(db.mark_consumed("t1", 6000), BerylliumError);
    CHECK_THROWS_AS(db.mark_consumed("ghost", 6000), BerylliumError);
    // A consumed ticket cannot also expire.
    CHECK_THROWS_AS(db.mark_expired("t1", 99000), BerylliumError);
  }
  SUBCASE("expiry marks without deleting and is single-shot") {
    db.mark_expired("t2", 70000);
    CHECK(db.find("t2")->expired);
    CHECK(!db.find("t2")->row.consumed);
    CHECK_THROWS_AS(db.mark_expired("t2", 71000), BerylliumError);
    CHECK(db.entries().size() == 2);  // nothing is ever removed
  }
}

TEST_CASE("ticket database: replay reconstructs rows and tombstones") {
  ScratchDir dir;
  std::string path = dir.file("tickets.ndjson");
  {
    TicketDb db(path);
    db.append(db_row("t1", "job-1"));
    db.append(db_row("t2", "job-2", 2));
    db.append(db_row("t3", "job-3"));
    db.mark_consumed("t1", 5000);
    db.mark_expired("t2", 70000);
  }

  TicketDb db(path);
  REQUIRE(db.entries().size() == 3);
  CHECK(db.find("t1")->row.consumed);
  CHECK(db.find("t2")->expired);
  CHECK(!db.find("t3")->row.consumed);
  CHECK(!db.find("t3")->expired);
  CHECK(db.entries()[2].row.expires_at == 61000);  // full row survives

  SUBCASE("replayed state keeps enforcing the same rules") {
    CHECK_THROWS_AS(db.mark_consumed("t1", 6000), BerylliumError);
    db.mark_consumed("t3", 6000);  // still available
  }
  SUBCASE("a torn trailing line is skipped and appends stay intact") {
    {
      std::ofstream out(path, std::ios::app | std::ios::binary);
      out << "{\"ticket_id\":\"t4\",\"job";  // crash mid-write, no newline
    }
    TicketDb torn(path);
    CHECK(torn.entries().size() == 3);
    torn.append(db_row("t5", "job-5"));

    TicketDb again(path);
    CHECK(again.entries().size() == 4);
    CHECK(again.find("t5") != nullptr);
  }
}

TEST_CASE("slot ledger arithmetic") {
  SlotLedger l{4, 1, 2};
  CHECK(l.free_slots() == 1);
  CHECK(l.conserved());
  CHECK(!SlotLedger{4, 3, 2}.conserved());  // over-committed
  CHECK(!SlotLedger{4, -1, 0}.conserved());
  CHECK(SlotLedger{4, 0, 0}.free_slots() == 4);
}

// ---------------------------------------------------------------------------
// CeService against a real event log

namespace {

struct CeRig {
  struct Tuning {
    std::int64_t slots = 4;
    std::int64_t job_wall_limit_s = 300;
    bool always_reject = false;
  };

  ScratchDir dir;
  LnbService lnb;
  CeService ce;
  HttpJsonClient client{3000};

  LnbService::Options lnb_opts() {
    LnbService::Options o;
    o.port = 0;
    o.log_path = dir.file("events.ndjson");
    o.log_level = LogLevel::Error;
    return o;
  }
  CeService::Options ce_opts(const Tuning& t) {
    CeService::Options o;
    o.port = 0;
    o.ce_id = "ce-t";
    o.slots = t.slots;
    o.lnb_url = lnb.url();       // requires lnb started first (comma shim below)
    o.index_url = "";            // no index in these tests
    o.workdir_root = dir.file("work");
    o.job_wall_limit_s = t.job_wall_limit_s;
    o.run_background = false;    // expiry/heartbeat driven by hand
    o.always_reject = t.always_reject;
    o.log_level = LogLevel::Error;
    return o;
  }

  CeRig() : CeRig(Tuning{}) {}
  explicit CeRig(Tuning t) : lnb(lnb_opts()), ce((start_lnb(), ce_opts(t))) {
    REQUIRE(ce.start());
  }
  void start_lnb() { REQUIRE(lnb.start()); }

  CeService::ConfirmResult accept(const std::string& job_id, std::int64_t slots = 1,
                                  std::int64_t ttl_s = 60) {
    auto r = ce.confirm(ticket_new_incomplete(job_id, slots, ttl_s));
    REQUIRE(r.accepted);
    return r;
  }

  static JobPayload payload_for(const JobTicket& ticket,
                                std::vector<std::string> command,
                                std::vector<InputFile> inputs = {}) {
    JobPayload p;
    p.job_id = ticket.job_id;
    p.ticket = ticket;
    p.command = std::move(command);
    p.input_files = std::move(inputs);
    return p;
  }

  CeJobRecord await_terminal(const std::string& job_id, int timeout_ms = 15000) {
    REQUIRE(testkit::wait_until(
        [&] {
          JobState s = ce.job_status(job_id).state;
          return s == JobState::Done || s == JobState::Failed;
        },
        timeout_ms));
    return ce.job_status(job_id);
  }

  json timeline(const std::string& job_id) {
    return client.get(lnb.url(), "/lnb/jobs/" + job_id).body;
  }
  std::int64_t sde(const std::string& name) {
    return client.get(ce.url(), "/ce/sde/" + name).body["value"].get<std::int64_t>();
  }
};

}  // namespace

TEST_CASE("confirmation: acceptance completes the ticket and reserves slots") {
  CeRig rig;
  auto r = rig.accept("job-aaa", 2, 60);

  CHECK(r.ticket.is_complete());
  CHECK(*r.ticket.ce_url == rig.ce.url());
  CHECK(r.ticket.job_id == "job-aaa");
  CHECK(!r.instance_id.empty());

  // The completed ticket is held by a fresh confirmation instance.
  auto held = rig.ce.get_value(r.instance_id);
  REQUIRE(held.has_value());
  CHECK(*held == r.ticket);

  // Durable row: unconsumed, expiry derived from the ticket's TTL.
  auto entries = rig.ce.ticket_entries();
  REQUIRE(entries.size() == 1);
  CHECK(entries[0].row.ticket_id == r.ticket.ticket_id);
  CHECK(entries[0].row.job_id == "job-aaa");
  CHECK(entries[0].row.slots == 2);
  CHECK(entries[0].row.expires_at == entries[0].row.issued_at + 60 * 1000);
  CHECK(!entries[0].row.consumed);

  SlotLedger l = rig.ce.ledger();
  CHECK(l.reserved_slots == 2);
  CHECK(l.free_slots() == 2);
  CHECK(rig.sde("free_slots") == 2);
  CHECK(rig.sde("reserved_slots") == 2);
}

TEST_CASE("confirmation: a complete ticket is a protocol violation") {
  CeRig rig;
  JobTicket t = ticket_new_incomplete("job-aaa", 1, 60);
  t = ticket_complete(t, "http://127.0.0.1:9999");
  CHECK_THROWS_WITH_AS(rig.ce.confirm(t),
                       "invalid-argument: ticket already carries a ce_url",
                       BerylliumError);
  CHECK(rig.ce.ticket_entries().empty());
}

TEST_CASE("confirmation: capacity and scripted rejection") {
  SUBCASE("a request beyond free slots is declined, state untouched") {
    CeRig rig;  // 4 slots
    rig.accept("job-1", 3);
    auto r = rig.ce.confirm(ticket_new_incomplete("job-2", 2, 60));
    CHECK(!r.accepted);
    CHECK(r.reason == "capacity-exceeded");
    CHECK(rig.ce.ticket_entries().size() == 1);  // no row for the rejection
    CHECK(rig.ce.ledger().reserved_slots == 3);
    CHECK(rig.client.get(rig.ce.url(), "/ce/sde/last_operation").body["value"] ==
          "tkt_confirm:rejected");
  }
  SUBCASE("always_reject declines everything and leaves no trace") {
    CeRig rig({.slots = 4, .job_wall_limit_s = 300, .always_reject = true});
    auto r = rig.ce.confirm(ticket_new_incomplete("job-1", 1, 60));
    CHECK(!r.accepted);
    CHECK(r.reason == "configured to reject");
    CHECK(rig.ce.ticket_entries().empty());
    CHECK(rig.ce.ledger().reserved_slots == 0);
    CHECK(rig.client.get(rig.ce.url(), "/ce/sde/last_operation").body["value"] ==
          "tkt_confirm:rejected");
  }
}

TEST_CASE("confirmation: concurrent requests never oversubscribe") {
  CeRig rig({.slots = 10});
  std::atomic<int> accepted{0};
  std::vector<std::thread> threads;
  threads.reserve(50);
  for (int i = 0; i < 50; ++i) {
    threads.emplace_back([&rig, &accepted, i] {
      auto r = rig.ce.confirm(
          ticket_new_incomplete("job-" + std::to_string(i), 1, 60));
      if (r.accepted) ++accepted;
    });
  }
  for (auto& t : threads) t.join();

  CHECK(accepted.load() == 10);
  CHECK(rig.ce.ticket_entries().size() == 10);
  SlotLedger l = rig.ce.ledger();
  CHECK(l.reserved_slots == 10);
  CHECK(l.free_slots() == 0);
  CHECK(l.conserved());
}

TEST_CASE("get_value distinguishes held tickets from empty instances") {
  CeRig rig;
  CHECK_THROWS_AS(rig.ce.get_value("ce"), BerylliumError);  // not a confirmation
  CHECK_THROWS_AS(rig.ce.get_value("ghost"), BerylliumError);

  InstanceInfo bare = rig.ce.container().create_instance("ceconfirm", json::object());
  CHECK(rig.ce.get_value(bare.instance_id) == std::nullopt);
}

TEST_CASE("execution: a job runs in its workdir and returns its outputs") {
  CeRig rig;
  auto r = rig.accept("job-run", 1);
  JobPayload p = CeRig::payload_for(
      r.ticket,
      {"sh", "-c", "cat data.txt > out/a.txt && printf 'hi\\n' > out/b.txt && echo logged"},
      {InputFile{"data.txt", "payload bytes"}});

  CHECK(rig.ce.submit_job(p) == "job-run");
  CeJobRecord rec = rig.await_terminal("job-run");

  CHECK(rec.state == JobState::Done);
  REQUIRE(rec.exit_code.has_value());
  CHECK(*rec.exit_code == 0);
  CHECK(rec.detail == "exit 0");
  REQUIRE(rec.output_files.size() == 2);  // sorted by name
  CHECK(rec.output_files[0].name == "a.txt");
  CHECK(rec.output_files[0].bytes == "payload bytes");  // staged input round-trip
  CHECK(rec.output_files[1].name == "b.txt");
  CHECK(rec.output_files[1].bytes == "hi\n");

  // The workdir is per-job; stdout was captured beside it.
  CHECK(rec.workdir == rig.ce.options().workdir_root + "/job-run");
  CHECK(read_file(rec.workdir + "/stdout.log") == "logged\n");

  // Ticket consumed durably; all slots back once terminal.
  CHECK(rig.ce.ticket_entries()[0].row.consumed);
  CHECK(rig.ce.ledger().free_slots() == 4);
  CHECK(rig.sde("running_jobs") == 0);

  // The record: SUBMITTED, RUNNING, DONE in order, none anomalous.
  json view = rig.timeline("job-run");
  REQUIRE(view["timeline"].size() == 3);
  CHECK(view["timeline"][0]["state"] == "SUBMITTED");
  CHECK(view["timeline"][0]["detail"] == "ticket validated");
  CHECK(view["timeline"][1]["state"] == "RUNNING");
  CHECK(view["timeline"][1]["detail"] == "executor started");
  CHECK(view["timeline"][2]["state"] == "DONE");
  CHECK(view["timeline"][2]["detail"] == "exit 0");
  for (const auto& e : view["timeline"]) {
    CHECK(e["anomalous"] == false);
    CHECK(e["source"] == rig.ce.url());
  }
  CHECK(view["current_state"] == "DONE");
}

TEST_CASE("execution: a nonzero exit lands in FAILED with the code preserved") {
  CeRig rig;
  auto r = rig.accept("job-rc", 1);
  rig.ce.submit_job(CeRig::payload_for(r.ticket, {"sh", "-c", "exit 3"}));
  CeJobRecord rec = rig.await_terminal("job-rc");
  CHECK(rec.state == JobState::Failed);
  CHECK(*rec.exit_code == 3);
  CHECK(rec.detail == "exit 3");
  CHECK(rig.timeline("job-rc")["current_state"] == "FAILED");

  // FAILED is terminal: results are fetchable.
  CHECK(*rig.ce.fetch_results("job-rc").exit_code == 3);
}

TEST_CASE("execution: the wall limit kills runaway jobs") {
  CeRig rig({.slots = 2, .job_wall_limit_s = 1});
  auto r = rig.accept("job-slow", 1);
  auto t0 = std::chrono::steady_clock::now();
  rig.ce.submit_job(CeRig::payload_for(r.ticket, {"sleep", "30"}));
  CeJobRecord rec = rig.await_terminal("job-slow", 10000);
  auto elapsed = std::chrono::steady_clock::now() - t0;

  CHECK(rec.state == JobState::Failed);
  CHECK(rec.detail == "timeout");
  CHECK(*rec.exit_code == 137);  // 128 + SIGKILL
  CHECK(elapsed < 8s);
  CHECK(rig.ce.ledger().free_slots() == 2);  // slots reclaimed
}

TEST_CASE("execution: an unstartable command fails cleanly") {
  CeRig rig;
  auto r = rig.accept("job-bad", 1);
  rig.ce.submit_job(CeRig::payload_for(r.ticket, {"no-such-binary-anywhere"}));
  CeJobRecord rec = rig.await_terminal("job-bad");
  CHECK(rec.state == JobState::Failed);
  CHECK(*rec.exit_code == 127);
  CHECK(rec.detail == "failed to start command");
}

TEST_CASE("ticket validation: every mismatch aborts with the cause on record") {
  CeRig rig;

  SUBCASE("a tampered ticket_id does not consume the real reservation") {
    auto r = rig.accept("job-tam", 1, 1);  // 1s TTL for the reclaim check below
    JobTicket forged = r.ticket;
    forged.ticket_id[0] = forged.ticket_id[0] == '0' ? '1' : '0';

    try {
      rig.ce.submit_job(CeRig::payload_for(forged, {"true"}));
      FAIL("expected ticket-mismatch");
    } catch (const BerylliumError& e) {
      CHECK(e.code() == ErrorCode::TicketMismatch);
      CHECK(e.detail() == "no reservation matches the presented ticket");
    }

    // The real row is untouched and its slot still held...
    CHECK(!rig.ce.ticket_entries()[0].row.consumed);
    CHECK(rig.ce.ledger().reserved_slots == 1);
    // ...and the abort reached the record in the caller's words.
    json view = rig.timeline("job-tam");
    REQUIRE(view["timeline"].size() == 1);
    CHECK(view["timeline"][0]["state"] == "ABORTED");
    CHECK(view["timeline"][0]["detail"] ==
          "ticket-mismatch: no reservation matches the presented ticket");

    // The leftover reservation is reclaimed by the sweep, but the job's
    // timeline is already closed: slots come back without an EXPIRED event.
    std::this_thread::sleep_for(1100ms);
    CHECK(rig.ce.expire_reservations() == 1);
    CHECK(rig.ce.ledger().reserved_slots == 0);
    view = rig.timeline("job-tam");
    CHECK(view["timeline"].size() == 1);
    CHECK(view["current_state"] == "ABORTED");
  }

  SUBCASE("a mutated field fails the stored-row comparison") {
    auto r = rig.accept("job-mut", 1);
    JobTicket forged = r.ticket;
    forged.slots = 2;
    try {
      rig.ce.submit_job(CeRig::payload_for(forged, {"true"}));
      FAIL("expected ticket-mismatch");
    } catch (const BerylliumError& e) {
      CHECK(e.code() == ErrorCode::TicketMismatch);
      CHECK(e.detail() == "ticket does not match the stored reservation");
    }
  }

  SUBCASE("an expired reservation refuses submission") {
    auto r = rig.accept("job-exp", 1, 1);
    std::this_thread::sleep_for(1100ms);
    try {
      rig.ce.submit_job(CeRig::payload_for(r.ticket, {"true"}));
      FAIL("expected ticket-expired");
    } catch (const BerylliumError& e) {
      CHECK(e.code() == ErrorCode::TicketExpired);
      CHECK(e.detail() == "reservation expired before submission");
    }
    json view = rig.timeline("job-exp");
    CHECK(view["timeline"][0]["state"] == "ABORTED");
    CHECK(view["timeline"][0]["detail"] ==
          "ticket-expired: reservation expired before submission");
  }

  SUBCASE("a ticket addressed elsewhere is refused") {
    auto r = rig.accept("job-url", 1);
    JobTicket forged = r.ticket;
    forged.ce_url = "http://127.0.0.1:1";
    CHECK_THROWS_WITH_AS(
        rig.ce.submit_job(CeRig::payload_for(forged, {"true"})),
        "invalid-argument: ticket addressed to a different resource: http://127.0.0.1:1",
        BerylliumError);
  }

  SUBCASE("an incomplete ticket is refused") {
    JobTicket bare = ticket_new_incomplete("job-inc", 1, 60);
    CHECK_THROWS_WITH_AS(rig.ce.submit_job(CeRig::payload_for(bare, {"true"})),
                         "invalid-argument: ticket is incomplete", BerylliumError);
  }

  SUBCASE("a ticket is single-use: the second submission aborts after DONE") {
    auto r = rig.accept("job-twice", 1);
    rig.ce.submit_job(CeRig::payload_for(r.ticket, {"true"}));
    rig.await_terminal("job-twice");
    try {
      rig.ce.submit_job(CeRig::payload_for(r.ticket, {"true"}));
      FAIL("expected ticket-mismatch");
    } catch (const BerylliumError& e) {
      CHECK(e.code() == ErrorCode::TicketMismatch);
      CHECK(e.detail() == "ticket has already been used");
    }
    // The late abort is on record but flagged: DONE stays current.
    json view = rig.timeline("job-twice");
    REQUIRE(view["timeline"].size() == 4);
    CHECK(view["timeline"][3]["state"] == "ABORTED");
    CHECK(view["timeline"][3]["anomalous"] == true);
    CHECK(view["current_state"] == "DONE");
  }
}

TEST_CASE("status and results guard their preconditions") {
  CeRig rig;
  CHECK_THROWS_AS(rig.ce.job_status("ghost"), BerylliumError);
  CHECK_THROWS_AS(rig.ce.fetch_results("ghost"), BerylliumError);

  auto r = rig.accept("job-wait", 1);
  rig.ce.submit_job(CeRig::payload_for(
      r.ticket, {"sh", "-c", "sleep 2; printf x > out/x.bin"}));
  try {
    rig.ce.fetch_results("job-wait");
    FAIL("expected invalid-argument");
  } catch (const BerylliumError& e) {
    CHECK(e.code() == ErrorCode::InvalidArgument);
    CHECK(e.detail().find("not terminal") != std::string::npos);
  }

  rig.await_terminal("job-wait");
  CeJobRecord first = rig.ce.fetch_results("job-wait");
  CeJobRecord second = rig.ce.fetch_results("job-wait");  // idempotent
  CHECK(first.output_files.size() == 1);
  CHECK(second.output_files.size() == 1);
  CHECK(first.output_files[0].bytes == second.output_files[0].bytes);
  CHECK(*first.exit_code == *second.exit_code);
}

TEST_CASE("reservation expiry returns slots and reports once") {
  CeRig rig;
  rig.accept("job-stale", 2, 1);
  CHECK(rig.ce.ledger().reserved_slots == 2);

  CHECK(rig.ce.expire_reservations() == 0);  // not due yet
  std::this_thread::sleep_for(1100ms);
  CHECK(rig.ce.expire_reservations() == 1);
  CHECK(rig.ce.expire_reservations() == 0);  // idempotent
  CHECK(rig.ce.ledger().reserved_slots == 0);
  CHECK(rig.ce.ticket_entries()[0].expired);

  json view = rig.timeline("job-stale");
  REQUIRE(view["timeline"].size() == 1);
  CHECK(view["timeline"][0]["state"] == "EXPIRED");
  CHECK(view["timeline"][0]["detail"] == "reservation expired unused");
  CHECK(view["current_state"] == "EXPIRED");

  SUBCASE("consumed tickets never expire") {
    auto r = rig.accept("job-used", 1, 1);
    rig.ce.submit_job(CeRig::payload_for(r.ticket, {"true"}));
    rig.await_terminal("job-used");
    std::this_thread::sleep_for(1100ms);
    CHECK(rig.ce.expire_reservations() == 0);
    CHECK(rig.timeline("job-used")["current_state"] == "DONE");
  }
}

TEST_CASE("restart replay: live reservations keep their slots, nothing else does") {
  ScratchDir dir;
  LnbService::Options lo;
  lo.port = 0;
  lo.log_path = dir.file("events.ndjson");
  lo.log_level = LogLevel::Error;
  LnbService lnb(lo);
  REQUIRE(lnb.start());

  CeService::Options co;
  co.port = 0;
  co.ce_id = "ce-r";
  co.slots = 8;
  co.lnb_url = lnb.url();
  co.workdir_root = dir.file("work");
  co.run_background = false;
  co.log_level = LogLevel::Error;

  {
    CeService ce(co);
    REQUIRE(ce.start());
    // live: 2 slots      consumed: 1 slot           expired: 1 slot
    ce.confirm(ticket_new_incomplete("job-live", 2, 60));
    auto used = ce.confirm(ticket_new_incomplete("job-used", 1, 60));
    ce.confirm(ticket_new_incomplete("job-old", 1, 1));
    JobPayload p;
    p.job_id = "job-used";
    p.ticket = used.ticket;
    p.command = {"true"};
    ce.submit_job(p);
    testkit::wait_until([&] { return ce.job_status("job-used").state == JobState::Done; },
                        15000);
    std::this_thread::sleep_for(1100ms);
    CHECK(ce.expire_reservations() == 1);
    CHECK(ce.ledger().reserved_slots == 2);
    ce.stop();
  }

  CeService revived(co);  // same workdir, same ticket database
  CHECK(revived.ledger().total_slots == 8);
  CHECK(revived.ledger().reserved_slots == 2);  // only job-live's row is live
  CHECK(revived.ledger().running_slots == 0);   // job records are volatile
  CHECK(revived.ticket_entries().size() == 3);
  CHECK_THROWS_AS(revived.job_status("job-used"), BerylliumError);
  lnb.stop();
}

TEST_CASE("CE over HTTP: confirmation, submission, status, results") {
  CeRig rig;
  std::string base = rig.ce.url();

  json incomplete = wire::to_json(ticket_new_incomplete("job-http", 1, 60));

  SUBCASE("confirm round-trip carries the completed ticket and instance") {
    HttpReply r = rig.client.post(base, "/ce/confirm", incomplete);
    REQUIRE(r.ok());
    CHECK(r.body["accepted"] == true);
    CHECK(r.body["ce_url"] == base);
    CHECK(r.body["ticket_id"] == incomplete["ticket_id"]);
    std::string instance_id = r.body["instance_id"];

    HttpReply held = rig.client.get(base, "/ce/instance/" + instance_id + "/value");
    REQUIRE(held.ok());
    CHECK(held.body["ticket_id"] == incomplete["ticket_id"]);
    CHECK(held.body["ce_url"] == base);

    SUBCASE("...and the job can be driven end to end over the wire") {
      json payload{{"command", json::array({"sh", "-c", "printf ok > out/r.txt"})},
                   {"input_files", json::array()},
                   {"job_id", "job-http"},
                   {"ticket", r.body}};
      payload["ticket"].erase("accepted");
      payload["ticket"].erase("instance_id");

      HttpReply sub = rig.client.post(base, "/ce/jobs", payload);
      REQUIRE(sub.ok());
      CHECK(sub.body == json{{"job_id", "job-http"}, {"ok", true}});

      REQUIRE(testkit::wait_until(
          [&] {
            return rig.client.get(base, "/ce/jobs/job-http/status").body["state"] == "DONE";
          },
          15000));
      HttpReply res = rig.client.get(base, "/ce/jobs/job-http/results");
      REQUIRE(res.ok());
      CHECK(res.body["exit_code"] == 0);
      REQUIRE(res.body["output_files"].size() == 1);
      CHECK(res.body["output_files"][0]["name"] == "r.txt");
      CHECK(res.body["output_files"][0]["bytes"] == base64_encode("ok"));
    }
  }

  SUBCASE("a declined confirmation is a 200 with accepted:false") {
    rig.client.post(base, "/ce/confirm",
                    wire::to_json(ticket_new_incomplete("job-big", 99, 60)));
    HttpReply r = rig.client.post(base, "/ce/confirm",
                                  wire::to_json(ticket_new_incomplete("job-big2", 99, 60)));
    CHECK(r.status == 200);
    CHECK(r.body["accepted"] == false);
    CHECK(r.body["reason"] == "capacity-exceeded");
  }

  SUBCASE("errors map to the closed code set") {
    json complete = incomplete;
    complete["ce_url"] = base;
    CHECK(rig.client.post(base, "/ce/confirm", complete).status == 400);

    json payload{{"command", json::array({"true"})},
                 {"input_files", json::array()},
                 {"job_id", "job-http"},
                 {"ticket", complete}};
    HttpReply mismatch = rig.client.post(base, "/ce/jobs", payload);
    CHECK(mismatch.status == 409);
    CHECK(mismatch.error_code() == "ticket-mismatch");

    CHECK(rig.client.get(base, "/ce/jobs/ghost/status").status == 404);
    CHECK(rig.client.get(base, "/ce/jobs/ghost/status").error_code() == "unknown-job");
    CHECK(rig.client.get(base, "/ce/jobs/ghost/results").status == 404);

    HttpReply missing = rig.client.post(base, "/ce/jobs",
                                        json{{"job_id", "x"}, {"ticket", complete}});
    CHECK(missing.status == 400);
    CHECK(missing.error_detail().find("command") != std::string::npos);

    CHECK(rig.client.get(base, "/ce/sde/no_such").status == 404);
  }
}
