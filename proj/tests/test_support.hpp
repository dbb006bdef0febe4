#pragma once

// Shared helpers for the test suites: scratch directories that clean up
// after themselves and a seeded RNG wrapper for the randomized property
// tests (fixed seed: property tests must fail reproducibly).

#include <cstdlib>
#include <filesystem>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace beryllium::test {

class ScratchDir {
 public:
  ScratchDir() {
    std::string tmpl = (std::filesystem::temp_directory_path() / "beryllium-test-XXXXXX").string();
    std::vector<char> buf(tmpl.begin(), tmpl.end());
    buf.push_back('\0');
    if (!::mkdtemp(buf.data())) throw std::runtime_error("mkdtemp failed");
    path_ = buf.data();
  }
  ~ScratchDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  ScratchDir(const ScratchDir&) = delete;
  ScratchDir& operator=(const ScratchDir&) = delete;

  const std::string& path() const { return path_; }
  std::string file(const std::string& name) const { return path_ + "/" + name; }

 private:
  std::string path_;
};

class Rng {
 public:
  explicit Rng(unsigned seed) : gen_(seed) {}

  std::int64_t pick(std::int64_t lo, std::int64_t hi) {
    return std::uniform_int_distribution<std::int64_t>(lo, hi)(gen_);
  }
  bool chance(double p) { return std::uniform_real_distribution<>(0.0, 1.0)(gen_) < p; }

  std::string word(int len) {
    static const char alphabet[] = "abcdefghijklmnopqrstuvwxyz0123456789";
    std::string out;
    for (int i = 0; i < len; ++i) out += alphabet[pick(0, sizeof(alphabet) - 2)];
    return out;
  }

  std::set<std::string> tag_subset(const std::vector<std::string>& pool, int max_n) {
    std::set<std::string> out;
    int n = static_cast<int>(pick(0, max_n));
    for (int i = 0; i < n; ++i) out.insert(pool[pick(0, static_cast<std::int64_t>(pool.size()) - 1)]);
    return out;
  }

  std::mt19937& gen() { return gen_; }

 private:
  std::mt19937 gen_;
};

}  // namespace beryllium::test
