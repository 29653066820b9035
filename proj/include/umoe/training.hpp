// Copyright 2026 The umoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "umoe/data.hpp"
#include "umoe/model.hpp"

namespace umoe {

enum class Stage : std::uint8_t { Pretrain = 0, Align = 1, Experts = 2, Moe = 3 };

inline Stage stage_from_index(int i) {
  if (i < 0 || i > 3) throw ConfigError("stage must be 0, 1, 2 or 3 (got " + std::to_string(i) + ")");
  return static_cast<Stage>(i);
}

enum class ExpertInit : std::uint8_t { Mixture, Pure };

/// Settings of one training stage.
struct StageSpec {
  Stage stage = Stage::Align;
  std::string task;
  std::size_t steps = 200;
  std::size_t batch = 8;
  double lr = 2e-5;
  double weight_decay = 0.0;
  std::size_t horizon = 0;   // cosine horizon; 0 means `steps`
  bool train_qformer = false;  // stage 2: also update the task's Q-Former
  std::size_t lora_rank = 0;
  double lora_alpha = 16.0;
  bool lora_attention = false;  // stage 3: adapters on q/k/v/o as well
  ExpertInit expert_init = ExpertInit::Mixture;
  std::vector<std::string> expert_sources;  // stage 3 mixture: one tag per expert
};

/// Paper defaults per stage; toy configs override learning rates and steps.
inline StageSpec default_stage_spec(Stage s) {
  StageSpec sp;
  sp.stage = s;
  switch (s) {
    case Stage::Pretrain:
      sp.task = "text_pretrain";
      sp.lr = 4e-5;
      break;
    case Stage::Align:
      sp.task = "align";
      sp.lr = 2e-5;
      break;
    case Stage::Experts:
      sp.lr = 4e-5;
      sp.lora_rank = 64;
      sp.lora_alpha = 16.0;
      break;
    case Stage::Moe:
      sp.task = "mixed_qa";
      sp.steps = 300;
      sp.lr = 4e-5;
      sp.lora_rank = 8;
      sp.lora_alpha = 16.0;
      sp.lora_attention = true;
      break;
  }
  return sp;
}

using TrainableMask = std::function<bool(const std::string&, ParamGroup)>;

/// Parameter families updated by each stage.
inline TrainableMask stage_mask(const StageSpec& sp) {
  switch (sp.stage) {
    case Stage::Pretrain:
      return [](const std::string&, ParamGroup g) {
        return g == ParamGroup::Embedding || g == ParamGroup::Attention || g == ParamGroup::Norm ||
               g == ParamGroup::Ffn || g == ParamGroup::Head;
      };
    case Stage::Align:
      return [](const std::string&, ParamGroup g) { return g == ParamGroup::QFormer || g == ParamGroup::Projection; };
    case Stage::Experts: {
      const bool qf = sp.train_qformer;
      return [qf](const std::string&, ParamGroup g) {
        return g == ParamGroup::Lora || g == ParamGroup::Projection || (qf && g == ParamGroup::QFormer);
      };
    }
    case Stage::Moe:
      return [](const std::string&, ParamGroup g) {
        return g == ParamGroup::Lora || g == ParamGroup::Router || g == ParamGroup::Projection;
      };
  }
  return [](const std::string&, ParamGroup) { return false; };
}

/// Fingerprint of every parameter the mask rejects.
template <class T>
std::string frozen_hash(UniMoeModel<T>& m, const TrainableMask& mask) {
  Fnv1a h;
  m.visit([&](const std::string& n, Tensor<T>& t, ParamGroup g) {
    if (mask(n, g)) return;
    h.update(n);
    h.update(t.data().data(), t.size() * sizeof(T));
  });
  return h.hex();
}

/// Fingerprint of all parameters.
template <class T>
std::string params_hash(UniMoeModel<T>& m) {
  return frozen_hash(m, [](const std::string&, ParamGroup) { return false; });
}

/// Model input for one sample: [BOS] modality-segment prompt [SEP] answer,
/// with next-token targets on the answer span only.
template <class T>
struct PreparedInput {
  AssembledInput<T> input;
  std::vector<std::size_t> targets;
  std::vector<bool> ignore;
};

template <class T>
ModalitySequence<T> encode_modality(const UniMoeModel<T>& m, const Sample& s) {
  const auto& c = m.conn;
  auto raw = [&](std::size_t offset, std::size_t rows) {
    const std::size_t w = s.raw_dims.back();
    std::vector<T> v(rows * w);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(s.features[offset + i]);
    return Tensor<T>::from({rows, w}, std::move(v));
  };
  switch (s.modality) {
    case Modality::Text:
      return embed_text(std::vector<std::size_t>(s.prompt.begin(), s.prompt.begin() + static_cast<std::ptrdiff_t>(s.raw_dims[0])),
                        m.lm.tok_emb);
    case Modality::Image: return encode_image(raw(0, s.raw_dims[0]), c.vision_enc, c.vision_proj);
    case Modality::Video: {
      std::vector<Tensor<T>> frames;
      const std::size_t per = s.raw_dims[1] * s.raw_dims[2];
      for (std::size_t f = 0; f < s.raw_dims[0]; ++f) frames.push_back(raw(f * per, s.raw_dims[1]));
      return encode_video(frames, c.vision_enc, c.vision_proj);
    }
    case Modality::Audio: return qformer_forward(c.audio_enc(raw(0, s.raw_dims[0])), c.audio_qf, Modality::Audio);
    case Modality::Speech: return qformer_forward(c.speech_enc(raw(0, s.raw_dims[0])), c.speech_qf, Modality::Speech);
  }
  throw ConfigError("unsupported modality");
}

/// `answer_prefix` answer tokens are appended after SEP (teacher forcing
/// uses all but the last target).
template <class T>
PreparedInput<T> prepare_input(const UniMoeModel<T>& m, const Sample& s, std::size_t answer_prefix) {
  std::vector<ModalitySequence<T>> segs;
  segs.push_back(embed_text<T>({kBos}, m.lm.tok_emb));
  segs.push_back(encode_modality(m, s));
  std::vector<std::size_t> tail;
  if (s.modality != Modality::Text) tail = s.prompt;
  else tail.assign(s.prompt.begin() + static_cast<std::ptrdiff_t>(s.raw_dims[0]), s.prompt.end());
  tail.push_back(kSep);
  const std::size_t sep_row = 1 + segs[1].length() + tail.size() - 1;
  tail.insert(tail.end(), s.targets.begin(), s.targets.begin() + static_cast<std::ptrdiff_t>(answer_prefix));
  segs.push_back(embed_text(tail, m.lm.tok_emb));
  PreparedInput<T> p;
  p.input = assemble_input(segs);
  const std::size_t n = p.input.tokens.rows();
  p.targets.assign(n, kPad);
  p.ignore.assign(n, true);
  for (std::size_t j = 0; j <= answer_prefix && j < s.targets.size(); ++j) {
    p.targets[sep_row + j] = s.targets[j];
    p.ignore[sep_row + j] = false;
  }
  return p;
}

template <class T>
struct SampleOutput {
  PreparedInput<T> prepared;
  LmOutput<T> out;
  Tensor<T> ce;
};

template <class T>
SampleOutput<T> sample_forward(const UniMoeModel<T>& m, const Sample& s, const MoeExecutor<T>& exec = {}) {
  SampleOutput<T> r;
  r.prepared = prepare_input(m, s, s.targets.size() - 1);
  r.out = forward_lm(r.prepared.input.tokens, m, exec);
  r.ce = ops::cross_entropy(r.out.logits, r.prepared.targets, r.prepared.ignore);
  return r;
}

struct LossSums {
  double ce = 0;
  double aux = 0;
  std::size_t samples = 0;

  double mean_total() const { return samples ? (ce + aux) / static_cast<double>(samples) : 0.0; }
  double mean_aux() const { return samples ? aux / static_cast<double>(samples) : 0.0; }
};

/// Backpropagates each listed sample's loss (CE + aux) into the model,
/// accumulating gradients in list order without scaling.
template <class T>
LossSums accumulate_gradients(const UniMoeModel<T>& m, const std::vector<Sample>& batch,
                              const std::vector<std::size_t>& indices, const MoeExecutor<T>& exec = {}) {
  LossSums sums;
  for (auto i : indices) {
    auto r = sample_forward(m, batch[i], exec);
    auto loss = ops::add(r.ce, r.out.aux_loss);
    const double v = static_cast<double>(loss.item());
    if (!std::isfinite(v)) throw NumericError("non-finite loss on sample " + std::to_string(i));
    loss.backward();
    sums.ce += static_cast<double>(r.ce.item());
    sums.aux += static_cast<double>(r.out.aux_loss.item());
    ++sums.samples;
  }
  return sums;
}

/// Multiplies every gradient buffer by `s`.
template <class T>
void scale_gradients(UniMoeModel<T>& m, T s) {
  m.visit([&](const std::string&, Tensor<T>& t, ParamGroup) {
    if (!t.has_grad()) return;
    for (auto& g : t.grad()) g *= s;
  });
}

/// Mean-loss gradients of a batch on one worker: zero, accumulate in order,
/// scale by 1/B.
template <class T>
LossSums batch_gradients(UniMoeModel<T>& m, const std::vector<Sample>& batch, const MoeExecutor<T>& exec = {}) {
  m.zero_grad();
  std::vector<std::size_t> all(batch.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  auto sums = accumulate_gradients(m, batch, all, exec);
  scale_gradients(m, T(1) / static_cast<T>(batch.size()));
  return sums;
}

struct EvalMetrics {
  double ce = 0;
  double exact_match = 0;
  std::size_t samples = 0;
};

/// Called once per evaluated sample with its teacher-forced forward pass.
template <class T>
using ForwardObserver = std::function<void(const Sample&, const PreparedInput<T>&, const LmOutput<T>&)>;

/// Greedy decode of as many tokens as the sample's answer has.
template <class T>
std::vector<std::size_t> greedy_decode(const UniMoeModel<T>& m, const Sample& s, const MoeExecutor<T>& exec = {}) {
  NoGradGuard guard;
  Sample probe = s;
  std::vector<std::size_t> out;
  for (std::size_t j = 0; j < s.targets.size(); ++j) {
    probe.targets = out;
    probe.targets.push_back(kPad);
    auto p = prepare_input(m, probe, j);
    auto o = forward_lm(p.input.tokens, m, exec);
    const std::size_t row = p.input.tokens.rows() - 1, v = o.logits.cols();
    std::size_t best = 0;
    for (std::size_t c = 1; c < v; ++c)
      if (o.logits.at(row, c) > o.logits.at(row, best)) best = c;
    out.push_back(best);
  }
  return out;
}

/// Mean CE and greedy exact-match rate over a fixed sample list.
template <class T>
EvalMetrics evaluate(const UniMoeModel<T>& m, const std::vector<Sample>& samples, bool decode = true,
                     const ForwardObserver<T>& observe = {}, const MoeExecutor<T>& exec = {}) {
  NoGradGuard guard;
  EvalMetrics em;
  std::size_t hits = 0;
  for (const auto& s : samples) {
    auto r = sample_forward(m, s, exec);
    em.ce += static_cast<double>(r.ce.item());
    if (observe) observe(s, r.prepared, r.out);
    if (decode && greedy_decode(m, s, exec) == s.targets) ++hits;
  }
  em.samples = samples.size();
  if (!samples.empty()) {
    em.ce /= static_cast<double>(samples.size());
    em.exact_match = static_cast<double>(hits) / static_cast<double>(samples.size());
  }
  return em;
}

}  // namespace umoe
