#pragma once

#include "ssf/dataio.hpp"

#include <atomic>
#include <filesystem>
#include <string>

#include <unistd.h>

namespace testutil {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("ssf_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() { std::filesystem::remove_all(path_); }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

/// Small synthetic dataset that keeps model tests fast.
inline ssf::SynthConfig small_config(unsigned long long seed = 11) {
  ssf::SynthConfig c;
  c.n_lat = 8;
  c.n_lon = 8;
  c.months = 72;
  c.train_end = 48;
  c.val_end = 60;
  c.members = 4;
  c.covariates = 2;
  c.sst_points = 20;
  c.seed = seed;
  return c;
}

}  // namespace testutil
