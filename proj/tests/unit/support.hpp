#pragma once

#include <atomic>
#include <filesystem>
#include <random>
#include <string>
#include <unistd.h>

#include <doctest.h>

#include "ntksel/error.hpp"

namespace testing {

class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("ntksel_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

}  // namespace testing

// Checks that `expr` throws ntksel::Error with the given code.
#define CHECK_ERROR_CODE(expr, expected)                            \
  do {                                                              \
    bool thrown_ = false;                                           \
    try {                                                           \
      (void)(expr);                                                 \
    } catch (const ntksel::Error& e_) {                             \
      thrown_ = true;                                               \
      CHECK_MESSAGE(e_.code() == (expected), e_.what());            \
    }                                                               \
    CHECK_MESSAGE(thrown_, "expected an ntksel::Error from " #expr); \
  } while (0)
