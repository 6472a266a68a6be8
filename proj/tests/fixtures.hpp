// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <tuple>
#include <vector>

#include "muap/datasets.hpp"
#include "muap/episodes.hpp"
#include "muap/victim.hpp"

namespace muap::fixture {

/// A scratch directory removed when the object goes out of scope.
class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("muap_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline void write_file(const std::filesystem::path& p, const std::vector<unsigned char>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline void put_be32(std::vector<unsigned char>& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<unsigned char>((v >> s) & 0xff));
}

/// mlp_tiny trained on a synthetic source; cached per (shape, classes, seed).
inline std::shared_ptr<const VictimModel> trained_mlp(const ImageShape& shape, std::size_t classes,
                                                      std::uint64_t seed, std::size_t per_class = 100) {
  static std::mutex mu;
  static std::map<std::tuple<std::size_t, std::size_t, std::size_t, std::size_t, std::uint64_t, std::size_t>,
                  std::shared_ptr<const VictimModel>>
      cache;
  std::lock_guard<std::mutex> lock(mu);
  const auto key = std::make_tuple(shape.channels, shape.height, shape.width, classes, seed, per_class);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  const LabeledImages data = synth_source(shape, classes, per_class, seed);
  VictimTraining cfg;
  cfg.seed = seed;
  auto m = std::make_shared<const VictimModel>(train_victim(VictimArch(ArchKind::kMlpTiny, shape, classes), data, cfg));
  cache.emplace(key, m);
  return m;
}

/// Episode source built from a held-out synthetic pool and a trained victim.
inline EpisodeSource synth_episode_source(const ImageShape& shape, std::size_t classes, std::uint64_t seed,
                                          std::size_t pool_per_class = 20) {
  return {synth_source(shape, classes, pool_per_class, derive_seed(seed, 99)), trained_mlp(shape, classes, seed)};
}

}  // namespace muap::fixture
