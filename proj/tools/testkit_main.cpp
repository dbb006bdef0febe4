// beryllium-testkit: boots a loopback topology described by a JSON spec and
// keeps it up until interrupted.  Meant for manual experiments against the
// same harness the integration tests use.

#include <CLI11.hpp>

#include <signal.h>

#include <cstdio>

#include "beryllium/testkit.hpp"
#include "beryllium/util.hpp"

int main(int argc, char** argv) {
  using namespace beryllium;

  CLI::App app{"Topology harness for the batch testbed"};
  app.require_subcommand(1);
  auto* run = app.add_subcommand("run", "Start the topology in <spec.json>, block until Ctrl-C");
  std::string spec_path;
  run->add_option("spec", spec_path, "Topology spec JSON file")->required();
  CLI11_PARSE(app, argc, argv);

  sigset_t set;
  ::signal(SIGPIPE, SIG_IGN);
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);

  try {
    nlohmann::json spec_json = nlohmann::json::parse(read_file(spec_path));
    testkit::Topology topology(testkit::TopologySpec::from_json(spec_json));
    topology.start();

    std::printf("broker  %s\n", topology.broker_url().c_str());
    std::printf("index   %s\n", topology.index_url().c_str());
    std::printf("lnb     %s\n", topology.lnb_url().c_str());
    for (const auto& ce : topology.spec().ces) {
      std::printf("ce      %-12s %s\n", ce.ce_id.c_str(),
                  topology.ce_url(ce.ce_id).c_str());
    }
    std::printf("scratch %s\n", topology.scratch().c_str());
    std::printf("running — Ctrl-C to tear down\n");
    std::fflush(stdout);

    int sig = 0;
    sigwait(&set, &sig);
    topology.teardown();
    std::printf("topology stopped\n");
    return 0;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "beryllium-testkit: %s\n", e.what());
    return 1;
  }
}
