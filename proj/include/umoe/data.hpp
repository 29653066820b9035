// Copyright 2026 The umoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "umoe/common.hpp"

namespace umoe {

// Token layout of the synthetic vocabulary.
inline constexpr std::size_t kPad = 0;
inline constexpr std::size_t kBos = 1;
inline constexpr std::size_t kSep = 2;
inline constexpr std::size_t kEos = 3;
inline constexpr std::size_t kWordBase = 16;      // prompt word of class c
inline constexpr std::size_t kCaptionBase = 32;   // caption is (32+c, 48+c)
inline constexpr std::size_t kCaptionBase2 = 48;

/// Shared geometry of the synthetic feature space.
struct DataSpace {
  std::size_t classes = 8;
  std::size_t raw_dim = 16;
  double noise = 0.3;
  std::size_t patches = 4;       // image / video tokens per frame
  std::size_t min_states = 3;    // audio / speech encoder states
  std::size_t max_states = 8;
  std::uint64_t seed = 7;        // prototype seed
};

enum class TaskKind : std::uint8_t { Caption, Instruct };

/// One (modality, answer format) pair a task can emit.
struct TaskComponent {
  Modality modality = Modality::Text;
  TaskKind kind = TaskKind::Caption;
  std::size_t answer_base = 0;  // Instruct: answer token is answer_base + class
  std::size_t instr_token = 0;  // Instruct: instruction token after the modality segment
};

struct SyntheticTask {
  std::string name;
  std::vector<TaskComponent> components;  // sampled uniformly per sample
  std::uint64_t seed = 0;
  std::size_t eval_samples = 64;
};

/// Modality families sharing prototypes: image and video read the same
/// visual space.
inline std::size_t prototype_family(Modality m) {
  switch (m) {
    case Modality::Image:
    case Modality::Video: return 0;
    case Modality::Audio: return 1;
    case Modality::Speech: return 2;
    case Modality::Text: return 3;
  }
  return 3;
}

/// Class prototype in raw feature space, unit-variance Gaussian.
inline std::vector<double> prototype(const DataSpace& s, Modality m, std::size_t c) {
  Rng rng(s.seed * 7919 + prototype_family(m) * 104729 + c);
  return gaussian<double>(s.raw_dim, 1.0, rng);
}

/// Target function: index of the prototype nearest to the mean feature row.
inline std::size_t nearest_class(const DataSpace& s, Modality m, const std::vector<double>& features) {
  const std::size_t rows = features.size() / s.raw_dim;
  std::vector<double> mean(s.raw_dim, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < s.raw_dim; ++j) mean[j] += features[r * s.raw_dim + j];
  for (auto& v : mean) v /= static_cast<double>(rows);
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < s.classes; ++c) {
    auto p = prototype(s, m, c);
    double d = 0;
    for (std::size_t j = 0; j < s.raw_dim; ++j) d += (mean[j] - p[j]) * (mean[j] - p[j]);
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  return best;
}

/// One training example. Raw features are a pure function of (modality,
/// raw_dims, seed); `targets` ends with EOS.
struct Sample {
  std::string task;
  Modality modality = Modality::Text;
  std::size_t component = 0;
  std::vector<std::size_t> raw_dims;  // text: {words}; image: {patches, raw}; video: {8, patches, raw}; audio/speech: {states, raw}
  std::uint64_t seed = 0;
  std::vector<double> features;       // flattened, empty for text
  std::size_t label = 0;
  std::vector<std::size_t> prompt;    // text tokens between modality segment and SEP
  std::vector<std::size_t> targets;   // answer tokens + EOS
};

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::vector<std::size_t> answer_tokens(const TaskComponent& c, std::size_t label) {
  if (c.kind == TaskKind::Caption) return {kCaptionBase + label, kCaptionBase2 + label, kEos};
  return {c.answer_base + label, kEos};
}

namespace detail {
inline void fill_features(const DataSpace& s, Sample& x, std::size_t cls, Rng& rng) {
  const auto proto = prototype(s, x.modality, cls);
  const std::size_t rows = numel(x.raw_dims) / s.raw_dim;
  std::normal_distribution<double> noise(0.0, s.noise);
  x.features.resize(rows * s.raw_dim);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < s.raw_dim; ++j) x.features[r * s.raw_dim + j] = proto[j] + noise(rng);
}
}  // namespace detail

/// Deterministic sample from (task, seed). The drawn class only seeds the
/// features; the label is recomputed by the target function.
inline Sample make_sample(const SyntheticTask& task, const DataSpace& s, std::uint64_t seed) {
  if (task.components.empty()) throw ConfigError("task '" + task.name + "' has no components");
  Rng rng(seed);
  Sample x;
  x.task = task.name;
  x.seed = seed;
  x.component = static_cast<std::size_t>(rng() % task.components.size());
  const auto& comp = task.components[x.component];
  x.modality = comp.modality;
  const std::size_t cls = static_cast<std::size_t>(rng() % s.classes);
  switch (comp.modality) {
    case Modality::Text: {
      static constexpr std::size_t kLens[] = {1, 2, 4, 8};
      const std::size_t n = kLens[rng() % 4];
      x.raw_dims = {n};
      x.label = cls;
      x.prompt.assign(n, kWordBase + cls);
      break;
    }
    case Modality::Image: x.raw_dims = {s.patches, s.raw_dim}; break;
    case Modality::Video: x.raw_dims = {8, s.patches, s.raw_dim}; break;
    case Modality::Audio:
    case Modality::Speech:
      x.raw_dims = {s.min_states + static_cast<std::size_t>(rng() % (s.max_states - s.min_states + 1)), s.raw_dim};
      break;
  }
  if (comp.modality != Modality::Text) {
    detail::fill_features(s, x, cls, rng);
    x.label = nearest_class(s, x.modality, x.features);
  }
  // text samples carry their words in `prompt`; the instruction follows
  if (comp.kind == TaskKind::Instruct) {
    if (comp.modality == Modality::Text) x.prompt.push_back(comp.instr_token);
    else x.prompt = {comp.instr_token};
  }
  x.targets = answer_tokens(comp, x.label);
  return x;
}

/// Training batch number `seed` of a task.
inline std::vector<Sample> generate_synthetic_batch(const SyntheticTask& task, const DataSpace& s, std::size_t batch,
                                                    std::uint64_t seed) {
  std::vector<Sample> out;
  out.reserve(batch);
  for (std::size_t i = 0; i < batch; ++i) out.push_back(make_sample(task, s, mix_seed(mix_seed(task.seed, seed), i)));
  return out;
}

/// Held-out evaluation split, disjoint from any training batch seed.
inline std::vector<Sample> eval_split(const SyntheticTask& task, const DataSpace& s) {
  return generate_synthetic_batch(task, s, task.eval_samples, 0xE7A1'0000'0000ULL);
}

inline nlohmann::json sample_to_json(const Sample& x) {
  return {{"task", x.task},         {"modality", std::string(modality_name(x.modality))}, {"component", x.component},
          {"raw_dims", x.raw_dims}, {"seed", x.seed},                        {"targets", x.targets}};
}

/// Rebuilds a sample from its record, regenerating features from the seed
/// and checking that the stored fields agree.
inline Sample sample_from_json(const nlohmann::json& j, const SyntheticTask& task, const DataSpace& s) {
  try {
    auto x = make_sample(task, s, j.at("seed").get<std::uint64_t>());
    if (j.at("task").get<std::string>() != task.name || modality_name(x.modality) != j.at("modality").get<std::string>() ||
        x.raw_dims != j.at("raw_dims").get<std::vector<std::size_t>>() ||
        x.targets != j.at("targets").get<std::vector<std::size_t>>())
      throw FormatError("sample record does not match its seed");
    return x;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("sample record: ") + e.what());
  }
}

// Built-in tasks of the toy pipeline.
inline TaskComponent instruct(Modality m, std::size_t answer_base, std::size_t instr) {
  return {m, TaskKind::Instruct, answer_base, instr};
}

inline SyntheticTask builtin_task(const std::string& name) {
  if (name == "text_caption") return {name, {{Modality::Text, TaskKind::Caption, 0, 0}}, 11, 64};
  if (name == "text_pretrain")
    return {name,
            {{Modality::Text, TaskKind::Caption, 0, 0}, instruct(Modality::Text, 64, 200),
             instruct(Modality::Text, 112, 203), instruct(Modality::Text, 80, 201), instruct(Modality::Text, 96, 202)},
            10, 96};
  if (name == "align")
    return {name,
            {{Modality::Image, TaskKind::Caption, 0, 0},
             {Modality::Audio, TaskKind::Caption, 0, 0},
             {Modality::Speech, TaskKind::Caption, 0, 0}},
            12, 96};
  if (name == "image_qa") return {name, {instruct(Modality::Image, 64, 200)}, 13, 64};
  if (name == "audio_qa") return {name, {instruct(Modality::Audio, 80, 201)}, 14, 64};
  if (name == "speech_qa") return {name, {instruct(Modality::Speech, 96, 202)}, 15, 64};
  if (name == "video_qa") return {name, {instruct(Modality::Video, 112, 203)}, 16, 64};
  if (name == "mixed_qa")
    return {name,
            {instruct(Modality::Image, 64, 200), instruct(Modality::Video, 112, 203),
             instruct(Modality::Audio, 80, 201), instruct(Modality::Speech, 96, 202)},
            17, 128};
  throw ConfigError("unknown task '" + name +
                    "' (text_pretrain|text_caption|align|image_qa|audio_qa|speech_qa|video_qa|mixed_qa)");
}

}  // namespace umoe
