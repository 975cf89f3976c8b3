#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "cct/cct.hpp"

namespace cct::testing {

inline std::filesystem::path temp_dir(const std::string& tag) {
  auto d = std::filesystem::temp_directory_path() / ("cct_" + tag + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(d);
  std::filesystem::create_directories(d);
  return d;
}

/// Single-channel split of class-dependent Gaussian blobs on uniform noise.
inline DatasetSplit blobs(std::int64_t n, std::int64_t size, std::uint64_t seed) {
  Rng rng(seed);
  DatasetSplit s;
  s.name = "mnist";
  s.class_count = 10;
  s.images = Tensor<float>::empty({n, 1, size, size});
  std::tie(s.mean, s.std) = dataset_stats("mnist");
  for (std::int64_t i = 0; i < n; ++i) {
    const std::int64_t label = i % 10;
    s.labels.push_back(label);
    const double cy = 2.0 + static_cast<double>(label / 5) * (size - 4) / 2.0;
    const double cx = 2.0 + static_cast<double>(label % 5) * (size - 4) / 4.0;
    for (std::int64_t y = 0; y < size; ++y)
      for (std::int64_t x = 0; x < size; ++x) {
        const double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
        s.images.data()[(i * size + y) * size + x] = static_cast<float>(std::exp(-d2 / 4.0) + 0.1 * rng.uniform());
      }
  }
  return s;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

/// Metrics rows with the trailing wall-clock column removed.
inline std::vector<std::string> metrics_without_time(const std::filesystem::path& p) {
  std::vector<std::string> rows;
  std::istringstream is(read_file(p));
  std::string line;
  while (std::getline(is, line)) rows.push_back(line.substr(0, line.rfind(',')));
  return rows;
}

}  // namespace cct::testing
