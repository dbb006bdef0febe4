#pragma once

// Shared run loop for the service daemons: start the service, then sleep in
// sigwait until SIGINT/SIGTERM arrives or the service stops itself (admin
// shutdown), and tear down cleanly either way.

#include <signal.h>
#include <unistd.h>

#include <atomic>
#include <cstdio>
#include <thread>

namespace beryllium::tools {

// Call before the service spawns any threads so every thread inherits the
// blocked mask and sigwait() is the only consumer.
inline void block_exit_signals(sigset_t* set) {
  ::signal(SIGPIPE, SIG_IGN);
  sigemptyset(set);
  sigaddset(set, SIGINT);
  sigaddset(set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, set, nullptr);
}

template <typename Service>
int run_daemon(Service& service, sigset_t* set, const char* name) {
  if (!service.start()) {
    std::fprintf(stderr, "%s: failed to bind listening socket\n", name);
    return 1;
  }
  std::fprintf(stderr, "%s: listening on %s\n", name, service.url().c_str());

  std::atomic<bool> stop_requested{false};
  std::thread waiter([&] {
    service.wait();
    // Self-stop (admin shutdown): wake the sigwait below.
    if (!stop_requested.load()) ::kill(::getpid(), SIGTERM);
  });
  int sig = 0;
  sigwait(set, &sig);
  stop_requested.store(true);
  service.stop();
  waiter.join();
  std::fprintf(stderr, "%s: stopped\n", name);
  return 0;
}

// CLI11 hook shared by every daemon's --log-level flag.
inline bool parse_log_level(const std::string& name, LogLevel* out) {
  auto parsed = log_level_from_name(name);
  if (!parsed) return false;
  *out = *parsed;
  return true;
}

}  // namespace beryllium::tools
