// Copyright 2026 The umoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include "umoe/layers.hpp"
#include "umoe/params.hpp"

namespace umoe {

/// Token embeddings of one modality segment, already in LLM width.
template <class T>
struct ModalitySequence {
  Modality modality = Modality::Text;
  Tensor<T> tokens;  // [len × d]

  std::size_t length() const { return tokens.rows(); }
};

/// Frozen random projection standing in for a pretrained modality encoder.
template <class T>
struct StubEncoder {
  Tensor<T> weight;  // [raw_dim × enc_dim], never trained
  Modality modality = Modality::Image;
  std::uint64_t seed = 0;

  static StubEncoder make(std::size_t raw_dim, std::size_t enc_dim, Modality m, std::uint64_t seed,
                          double stddev = 0.02) {
    Rng rng(seed);
    return {Tensor<T>::randn({raw_dim, enc_dim}, stddev, rng, false), m, seed};
  }

  std::size_t in_dim() const { return weight.dim(0); }
  std::size_t out_dim() const { return weight.dim(1); }

  Tensor<T> operator()(const Tensor<T>& raw) const {
    if (raw.rank() != 2 || raw.cols() != in_dim())
      throw DimensionError("encoder(" + std::string(modality_name(modality)) + "): raw features " +
                           shape_str(raw.shape()) + " do not match input dim " + std::to_string(in_dim()));
    return ops::matmul(raw, weight);
  }
};

/// Learnable affine map into the LLM token space.
template <class T>
struct ProjectionLayer {
  Tensor<T> weight;  // [in × d]
  Tensor<T> bias;    // [d]

  static ProjectionLayer make(std::size_t in, std::size_t d, double stddev, Rng& rng) {
    return {Tensor<T>::randn({in, d}, stddev, rng, true), Tensor<T>::zeros({d}, true)};
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    if (x.cols() != weight.dim(0))
      throw DimensionError("projection: input " + shape_str(x.shape()) + " vs weight " + shape_str(weight.shape()));
    return ops::add_bias(ops::matmul(x, weight), bias);
  }
};

template <class T>
struct QFormerLayer {
  LayerNormParams<T> ln_self, ln_cross, ln_mlp;
  AttentionParams<T> self_attn;
  AttentionParams<T> cross_attn;  // keys/values read encoder states
  Tensor<T> mlp_in;               // [dq × hidden]
  Tensor<T> mlp_out;              // [hidden × dq]
};

/// Fixed-length query distiller: AM learnable queries, four layers of
/// self-attention, cross-attention over encoder states and an MLP, then
/// a projection into LLM width.
template <class T>
struct QFormerParams {
  static constexpr std::size_t kLayers = 4;

  Tensor<T> queries;  // [AM × dq]
  std::vector<QFormerLayer<T>> layers;
  ProjectionLayer<T> proj;  // [dq × d]
  std::size_t heads = 1;

  static QFormerParams make(std::size_t num_queries, std::size_t d_q, std::size_t d_enc, std::size_t d_model,
                            std::size_t heads, Rng& rng, double stddev = 0.02) {
    if (d_q % heads != 0) throw ConfigError("qformer: width not divisible by heads");
    QFormerParams p;
    p.heads = heads;
    p.queries = Tensor<T>::randn({num_queries, d_q}, 1.0, rng, true);
    for (std::size_t l = 0; l < kLayers; ++l) {
      QFormerLayer<T> L{LayerNormParams<T>::make(d_q), LayerNormParams<T>::make(d_q), LayerNormParams<T>::make(d_q),
                        AttentionParams<T>::make(d_q, d_q, stddev, rng), AttentionParams<T>::make(d_q, d_enc, stddev, rng),
                        Tensor<T>::randn({d_q, 2 * d_q}, stddev, rng, true),
                        Tensor<T>::randn({2 * d_q, d_q}, stddev, rng, true)};
      p.layers.push_back(std::move(L));
    }
    p.proj = ProjectionLayer<T>::make(d_q, d_model, stddev, rng);
    return p;
  }

  std::size_t num_queries() const { return queries.rows(); }
  std::size_t kv_dim() const { return layers.front().cross_attn.wk.dim(0); }
};

/// Distills variable-length encoder states to exactly AM tokens.
template <class T>
ModalitySequence<T> qformer_forward(const Tensor<T>& encoder_states, const QFormerParams<T>& qf, Modality tag) {
  if (encoder_states.rank() != 2 || encoder_states.rows() == 0)
    throw DimensionError("qformer: need at least one encoder state, got " + shape_str(encoder_states.shape()));
  if (encoder_states.cols() != qf.kv_dim())
    throw DimensionError("qformer: encoder width " + std::to_string(encoder_states.cols()) +
                         " does not match cross-attention key/value width " + std::to_string(qf.kv_dim()));
  Tensor<T> h = qf.queries;
  for (const auto& L : qf.layers) {
    auto n = L.ln_self(h);
    h = ops::add(multi_head_attention(n, n, L.self_attn, qf.heads, false), h);
    h = ops::add(multi_head_attention(L.ln_cross(h), encoder_states, L.cross_attn, qf.heads, false), h);
    h = ops::add(ops::matmul(ops::silu(ops::matmul(L.ln_mlp(h), L.mlp_in)), L.mlp_out), h);
  }
  return {tag, qf.proj(h)};
}

template <class T>
ModalitySequence<T> encode_image(const Tensor<T>& raw, const StubEncoder<T>& enc, const ProjectionLayer<T>& proj) {
  return {Modality::Image, proj(enc(raw))};
}

inline constexpr std::size_t kVideoFrames = 8;

/// Per-patch mean of eight encoded frames, then projection.
template <class T>
ModalitySequence<T> encode_video(const std::vector<Tensor<T>>& frames, const StubEncoder<T>& enc,
                                 const ProjectionLayer<T>& proj) {
  if (frames.size() != kVideoFrames)
    throw ConfigError("video: expected exactly 8 frames, got " + std::to_string(frames.size()));
  std::vector<Tensor<T>> encoded;
  for (const auto& f : frames) {
    if (f.shape() != frames[0].shape())
      throw DimensionError("video: frame shapes differ, " + shape_str(frames[0].shape()) + " vs " +
                           shape_str(f.shape()));
    encoded.push_back(enc(f));
  }
  return {Modality::Video, proj(ops::mean_of(std::move(encoded)))};
}

template <class T>
ModalitySequence<T> embed_text(const std::vector<std::size_t>& ids, const Tensor<T>& embedding) {
  return {Modality::Text, ops::gather_rows(embedding, ids)};
}

template <class T>
struct AssembledInput {
  Tensor<T> tokens;              // [total × d]
  std::vector<Modality> labels;  // one per row
};

/// Concatenates segments in order, keeping a per-token modality label.
template <class T>
AssembledInput<T> assemble_input(const std::vector<ModalitySequence<T>>& seqs) {
  if (seqs.empty()) throw ConfigError("assemble_input: no sequences");
  const std::size_t d = seqs.front().tokens.cols();
  std::vector<Tensor<T>> parts;
  AssembledInput<T> out;
  for (const auto& s : seqs) {
    if (s.tokens.cols() != d)
      throw DimensionError("assemble_input: width " + std::to_string(s.tokens.cols()) + " differs from " +
                           std::to_string(d));
    parts.push_back(s.tokens);
    out.labels.insert(out.labels.end(), s.length(), s.modality);
  }
  out.tokens = parts.size() == 1 ? parts[0] : ops::concat_rows(parts);
  return out;
}

/// Contiguous runs of equal labels as (modality, begin, end) triples.
struct LabelRun {
  Modality modality;
  std::size_t begin, end;
};

inline std::vector<LabelRun> label_runs(const std::vector<Modality>& labels) {
  std::vector<LabelRun> runs;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (runs.empty() || runs.back().modality != labels[i]) runs.push_back({labels[i], i, i});
    runs.back().end = i + 1;
  }
  return runs;
}

struct ConnectorConfig {
  std::size_t d_model = 64;
  std::size_t raw_dim = 16;
  std::size_t enc_dim = 32;     // also the Q-Former width
  std::size_t num_queries = 32;  // AM
  std::size_t qformer_heads = 4;
  std::uint64_t encoder_seed = 1234;
  double init_std = 0.02;
};

/// All modality pipelines. Image and video share the visual encoder and
/// projection; audio and speech each own a Q-Former.
template <class T>
struct Connectors {
  StubEncoder<T> vision_enc, audio_enc, speech_enc;
  ProjectionLayer<T> vision_proj;
  QFormerParams<T> audio_qf, speech_qf;

  static Connectors make(const ConnectorConfig& c, Rng& rng) {
    Connectors k;
    k.vision_enc = StubEncoder<T>::make(c.raw_dim, c.enc_dim, Modality::Image, c.encoder_seed, c.init_std);
    k.audio_enc = StubEncoder<T>::make(c.raw_dim, c.enc_dim, Modality::Audio, c.encoder_seed + 1, c.init_std);
    k.speech_enc = StubEncoder<T>::make(c.raw_dim, c.enc_dim, Modality::Speech, c.encoder_seed + 2, c.init_std);
    k.vision_proj = ProjectionLayer<T>::make(c.enc_dim, c.d_model, c.init_std, rng);
    k.audio_qf = QFormerParams<T>::make(c.num_queries, c.enc_dim, c.enc_dim, c.d_model, c.qformer_heads, rng, c.init_std);
    k.speech_qf = QFormerParams<T>::make(c.num_queries, c.enc_dim, c.enc_dim, c.d_model, c.qformer_heads, rng, c.init_std);
    return k;
  }

  /// Calls f(name, tensor&, group) for every parameter.
  template <class F>
  void visit(F&& f) {
    f("connector.vision.encoder", vision_enc.weight, ParamGroup::Encoder);
    f("connector.audio.encoder", audio_enc.weight, ParamGroup::Encoder);
    f("connector.speech.encoder", speech_enc.weight, ParamGroup::Encoder);
    f("connector.vision.proj.weight", vision_proj.weight, ParamGroup::Projection);
    f("connector.vision.proj.bias", vision_proj.bias, ParamGroup::Projection);
    visit_qformer(f, "connector.audio", audio_qf);
    visit_qformer(f, "connector.speech", speech_qf);
  }

 private:
  template <class F>
  static void visit_qformer(F& f, const std::string& prefix, QFormerParams<T>& q) {
    const auto g = ParamGroup::QFormer;
    f(prefix + ".qformer.queries", q.queries, g);
    for (std::size_t l = 0; l < q.layers.size(); ++l) {
      auto& L = q.layers[l];
      const std::string p = prefix + ".qformer.l" + std::to_string(l) + ".";
      for (auto& [n, ln] : {std::pair{"ln_self", &L.ln_self}, {"ln_cross", &L.ln_cross}, {"ln_mlp", &L.ln_mlp}}) {
        f(p + n + ".gain", ln->gain, g);
        f(p + n + ".bias", ln->bias, g);
      }
      for (auto& [n, at] : {std::pair{"self", &L.self_attn}, {"cross", &L.cross_attn}}) {
        f(p + n + ".wq", at->wq, g);
        f(p + n + ".wk", at->wk, g);
        f(p + n + ".wv", at->wv, g);
        f(p + n + ".wo", at->wo, g);
      }
      f(p + "mlp_in", L.mlp_in, g);
      f(p + "mlp_out", L.mlp_out, g);
    }
    f(prefix + ".proj.weight", q.proj.weight, ParamGroup::Projection);
    f(prefix + ".proj.bias", q.proj.bias, ParamGroup::Projection);
  }
};

}  // namespace umoe
