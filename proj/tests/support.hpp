// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <filesystem>
#include <memory>
#include <string>

#include <unistd.h>

#include "fpe/backend.hpp"

namespace fpe::test {

// Shared fixture backbone; building it once keeps the suites fast.
inline std::shared_ptr<const ModelAdapter> tiny_shared() {
  static std::shared_ptr<const ModelAdapter> model = make_tiny_backbone();
  return model;
}

inline const ModelAdapter& tiny() { return *tiny_shared(); }

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("fpe_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace fpe::test
