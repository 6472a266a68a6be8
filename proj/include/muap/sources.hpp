// SPDX-License-Identifier: Apache-2.0
//
// Image-source specifications for command-line runs:
//
//   synth<C>x<H>x<W>:<classes>:<per-class>   synthetic gratings
//   idx:<images>,<labels>                     IDX pair (MNIST layout)
//   cifar:<dir>                               CIFAR-10 binary batches
//
// plus the aliases synth1 (1x28x28, 10 classes) and synth2 (3x32x32).
#pragma once

#include <algorithm>
#include <filesystem>
#include <memory>
#include <regex>
#include <string>
#include <vector>

#include "muap/datasets.hpp"
#include "muap/episodes.hpp"
#include "muap/victim.hpp"

namespace muap {

struct SourceSpec {
  enum class Kind { kSynth, kIdx, kCifar };
  Kind kind = Kind::kSynth;
  std::string text;
  ImageShape shape;
  std::size_t classes = 0;
  std::size_t per_class = 0;
  std::filesystem::path images, labels, dir;
};

inline SourceSpec parse_source_spec(const std::string& raw) {
  std::string s = raw;
  if (s == "synth1") s = "synth1x28x28:10:100";
  if (s == "synth2") s = "synth3x32x32:10:100";
  SourceSpec spec;
  spec.text = s;
  static const std::regex synth(R"(synth(\d+)x(\d+)x(\d+):(\d+):(\d+))");
  std::smatch m;
  if (std::regex_match(s, m, synth)) {
    spec.kind = SourceSpec::Kind::kSynth;
    spec.shape = {std::stoul(m[1]), std::stoul(m[2]), std::stoul(m[3])};
    spec.classes = std::stoul(m[4]);
    spec.per_class = std::stoul(m[5]);
    if (spec.shape.numel() == 0 || spec.classes < 2 || spec.per_class == 0) {
      throw InvalidArgument("source '" + raw + "': synthetic sources need positive sizes and at least 2 classes");
    }
    return spec;
  }
  if (s.rfind("idx:", 0) == 0) {
    const auto comma = s.find(',', 4);
    if (comma == std::string::npos) throw InvalidArgument("source '" + raw + "': expected idx:<images>,<labels>");
    spec.kind = SourceSpec::Kind::kIdx;
    spec.images = s.substr(4, comma - 4);
    spec.labels = s.substr(comma + 1);
    return spec;
  }
  if (s.rfind("cifar:", 0) == 0) {
    spec.kind = SourceSpec::Kind::kCifar;
    spec.dir = s.substr(6);
    return spec;
  }
  throw InvalidArgument("unrecognized source '" + raw + "' (expected synth<C>x<H>x<W>:<classes>:<per-class>, " +
                        "idx:<images>,<labels>, cifar:<dir>, synth1 or synth2)");
}

/// Splits a comma-separated list of specs. Commas inside an idx spec
/// belong to it, so a token that does not start a new spec is glued to the
/// previous one.
inline std::vector<std::string> split_source_list(const std::string& list) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= list.size()) {
    const auto end = std::min(list.find(',', start), list.size());
    std::string tok = list.substr(start, end - start);
    const bool fresh = tok.rfind("synth", 0) == 0 || tok.rfind("idx:", 0) == 0 || tok.rfind("cifar:", 0) == 0;
    if (!fresh && !out.empty() && out.back().rfind("idx:", 0) == 0 && out.back().find(',') == std::string::npos) {
      out.back() += "," + tok;
    } else if (!tok.empty()) {
      out.push_back(tok);
    }
    start = end + 1;
  }
  return out;
}

/// Victim-training data and episode pool of one source.
struct SourceData {
  SourceSpec spec;
  LabeledImages victim_data;
  LabeledImages pool;
};

inline constexpr std::size_t kSynthPoolPerClass = 40;

/// Synthetic sources draw victim data and the episode pool independently
/// from `data_seed`; real sources use the whole file for both.
inline SourceData load_source(const SourceSpec& spec, std::uint64_t data_seed) {
  SourceData d;
  d.spec = spec;
  switch (spec.kind) {
    case SourceSpec::Kind::kSynth:
      d.victim_data = synth_source(spec.shape, spec.classes, spec.per_class, derive_seed(data_seed, 1));
      d.pool = synth_source(spec.shape, spec.classes, kSynthPoolPerClass, derive_seed(data_seed, 2));
      break;
    case SourceSpec::Kind::kIdx:
      d.victim_data = load_idx(spec.images, spec.labels, "idx_" + spec.images.stem().string());
      d.pool = d.victim_data;
      break;
    case SourceSpec::Kind::kCifar: {
      std::vector<std::filesystem::path> files;
      if (!std::filesystem::is_directory(spec.dir)) throw DataFormatError(spec.dir.string() + " is not a directory");
      for (const auto& e : std::filesystem::directory_iterator(spec.dir)) {
        const std::string name = e.path().filename().string();
        if (name.rfind("data_batch_", 0) == 0 && e.path().extension() == ".bin") files.push_back(e.path());
      }
      std::sort(files.begin(), files.end());
      if (files.empty()) throw DataFormatError("no data_batch_*.bin files in " + spec.dir.string());
      d.victim_data = load_cifar10_bin(files);
      d.pool = d.victim_data;
      break;
    }
  }
  return d;
}

inline ArchKind default_arch(const SourceSpec& spec) {
  if (spec.kind == SourceSpec::Kind::kSynth) return ArchKind::kMlpTiny;
  return spec.kind == SourceSpec::Kind::kCifar ? ArchKind::kLenet7Rgb : ArchKind::kLenet5Gray;
}

inline VictimModel train_default_victim(const SourceData& d, std::uint64_t data_seed) {
  VictimTraining cfg;
  cfg.seed = derive_seed(data_seed, 3);
  const VictimArch arch(default_arch(d.spec), d.victim_data.shape(), d.victim_data.num_classes);
  return train_victim(arch, d.victim_data, cfg);
}

inline constexpr std::uint64_t kTrainStreamTag = 0x747261696eULL;
inline constexpr std::uint64_t kTestStreamTag = 0x74657374ULL;

struct SourceSplit {
  EpisodeSource meta_train, meta_test;
};

/// Splits a source's pool 80/20 per class into meta-train and meta-test
/// pools that share the victim.
inline SourceSplit split_source(const SourceData& d, std::shared_ptr<const VictimModel> victim,
                                std::uint64_t data_seed) {
  if (!(victim->arch.input == d.pool.shape())) {
    throw ShapeError("victim for source '" + d.spec.text + "' expects " + victim->arch.input.str() +
                     " images, source has " + d.pool.shape().str());
  }
  auto [tr, te] = split_meta_pools(d.pool, derive_seed(data_seed, 4));
  return {{std::move(tr), victim}, {std::move(te), victim}};
}

inline EpisodeStream make_stream(std::vector<EpisodeSource> sources, std::uint64_t global_seed,
                                 const EpisodeShape& shape = {}) {
  EpisodeStream s;
  s.sources = std::move(sources);
  s.global_seed = global_seed;
  s.shape = shape;
  return s;
}

}  // namespace muap
