// Copyright (c) 2026, The survlm Authors
// SPDX-License-Identifier: Apache-2.0
//
// Desk-scale vision-language survival model:
//
//   volume --encoder g--> Z_v [P x D_vis] --W--> H_v [P x D_text]
//   [clinical | H_v | question <boa> | answer <eoa>] --causal decoder--> hidden
//   hidden[last instruction position] --residual adaptor--> z_surv --head--> risk | probs
//
// Parameters live in named groups so stages can freeze them wholesale.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "survlm/losses.hpp"
#include "survlm/rng.hpp"
#include "survlm/tensor.hpp"
#include "survlm/tokenizer.hpp"
#include "survlm/volume.hpp"

namespace survlm {

enum class HeadType { Continuous, Discrete };

inline std::string to_string(HeadType h) { return h == HeadType::Continuous ? "continuous" : "discrete"; }

inline HeadType parse_head_type(const std::string& s) {
  if (s == "continuous" || s == "Continuous") return HeadType::Continuous;
  if (s == "discrete" || s == "Discrete") return HeadType::Discrete;
  throw std::invalid_argument("unknown head type '" + s + "'");
}

struct ModelConfig {
  std::array<std::size_t, 3> volume_shape{24, 24, 16};
  std::array<std::size_t, 3> stride1{2, 2, 2};
  std::array<std::size_t, 3> stride2{4, 4, 2};
  std::size_t encoder_channels = 16;
  std::size_t d_vis = 32;
  std::size_t d_text = 64;
  std::size_t n_heads = 4;
  std::size_t n_layers = 2;
  std::size_t d_ffn = 256;
  std::size_t vocab_size = 0;
  std::size_t max_len = 128;
  std::size_t bottleneck = 16;
  std::size_t k_bins = 5;
  HeadType head = HeadType::Continuous;
  bool tied_output = true;
  std::uint64_t init_seed = 0;

  std::array<std::size_t, 3> feature_grid() const {
    std::array<std::size_t, 3> g{};
    for (int i = 0; i < 3; ++i) {
      const std::size_t s = stride1[i] * stride2[i];
      if (s == 0 || volume_shape[i] % s != 0)
        throw std::invalid_argument("ModelConfig: volume axis " + std::to_string(i) + " of size " +
                                    std::to_string(volume_shape[i]) +
                                    " is not divisible by the encoder strides");
      g[i] = volume_shape[i] / s;
    }
    return g;
  }
  std::size_t visual_tokens() const {
    const auto g = feature_grid();
    return g[0] * g[1];
  }

  void validate() const {
    feature_grid();
    if (d_text % n_heads != 0) throw std::invalid_argument("ModelConfig: d_text must divide into heads");
    if (vocab_size < 5) throw std::invalid_argument("ModelConfig: vocabulary too small");
    if (k_bins < 2) throw std::invalid_argument("ModelConfig: k_bins must be at least 2");
    if (bottleneck == 0 || n_layers == 0 || max_len == 0)
      throw std::invalid_argument("ModelConfig: zero-sized dimension");
  }

  // Tiny configuration used by unit tests and gradient checks.
  static ModelConfig tiny(std::size_t vocab) {
    ModelConfig c;
    c.volume_shape = {8, 8, 4};
    c.stride1 = {2, 2, 2};
    c.stride2 = {2, 2, 1};
    c.encoder_channels = 3;
    c.d_vis = 4;
    c.d_text = 8;
    c.n_heads = 2;
    c.n_layers = 1;
    c.d_ffn = 12;
    c.vocab_size = vocab;
    c.max_len = 48;
    c.bottleneck = 2;
    c.k_bins = 3;
    return c;
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"volume_shape", c.volume_shape},
                     {"stride1", c.stride1},
                     {"stride2", c.stride2},
                     {"encoder_channels", c.encoder_channels},
                     {"d_vis", c.d_vis},
                     {"d_text", c.d_text},
                     {"n_heads", c.n_heads},
                     {"n_layers", c.n_layers},
                     {"d_ffn", c.d_ffn},
                     {"vocab_size", c.vocab_size},
                     {"max_len", c.max_len},
                     {"bottleneck", c.bottleneck},
                     {"k_bins", c.k_bins},
                     {"head", to_string(c.head)},
                     {"tied_output", c.tied_output},
                     {"init_seed", c.init_seed}};
}

// Strict: unknown keys are rejected, missing keys keep defaults.
inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  static const std::vector<std::string> known{
      "volume_shape", "stride1", "stride2", "encoder_channels", "d_vis", "d_text",
      "n_heads", "n_layers", "d_ffn", "vocab_size", "max_len", "bottleneck", "k_bins",
      "head", "tied_output", "init_seed"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (std::find(known.begin(), known.end(), it.key()) == known.end())
      throw std::invalid_argument("model config: unknown key '" + it.key() + "'");
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("volume_shape", c.volume_shape);
  get("stride1", c.stride1);
  get("stride2", c.stride2);
  get("encoder_channels", c.encoder_channels);
  get("d_vis", c.d_vis);
  get("d_text", c.d_text);
  get("n_heads", c.n_heads);
  get("n_layers", c.n_layers);
  get("d_ffn", c.d_ffn);
  get("vocab_size", c.vocab_size);
  get("max_len", c.max_len);
  get("bottleneck", c.bottleneck);
  get("k_bins", c.k_bins);
  if (j.contains("head")) c.head = parse_head_type(j.at("head").get<std::string>());
  get("tied_output", c.tied_output);
  get("init_seed", c.init_seed);
}

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

enum class ParamGroupId { Encoder, Projection, Decoder, Adaptor, HeadContinuous, HeadDiscrete };

inline constexpr std::array<ParamGroupId, 6> kAllGroups{
    ParamGroupId::Encoder, ParamGroupId::Projection,     ParamGroupId::Decoder,
    ParamGroupId::Adaptor, ParamGroupId::HeadContinuous, ParamGroupId::HeadDiscrete};

inline const char* group_name(ParamGroupId g) {
  switch (g) {
    case ParamGroupId::Encoder: return "encoder";
    case ParamGroupId::Projection: return "projection";
    case ParamGroupId::Decoder: return "decoder";
    case ParamGroupId::Adaptor: return "adaptor";
    case ParamGroupId::HeadContinuous: return "head_continuous";
    case ParamGroupId::HeadDiscrete: return "head_discrete";
  }
  return "?";
}

struct DecoderLayerParams {
  Tensor ln1_gain, ln1_shift;
  Tensor wq, wk, wv, wo;  // [D x D]
  Tensor ln2_gain, ln2_shift;
  Tensor w1, b1;  // [F x D], [F]
  Tensor w2, b2;  // [D x F], [D]
};

struct ModelParams {
  // encoder g: two non-overlapping strided 3D convolutions
  Tensor conv1_w, conv1_b;  // [C1 x k1], [C1]
  Tensor conv2_w, conv2_b;  // [D_vis x k2*C1], [D_vis]
  // projection W: [D_text x D_vis]
  Tensor projection;
  // decoder phi
  Tensor token_embedding;     // [V x D]
  Tensor position_embedding;  // [max_len x D]
  std::vector<DecoderLayerParams> layers;
  Tensor lnf_gain, lnf_shift;
  Tensor output;  // [V x D], only when the output projection is untied
  // residual adaptor
  Tensor adaptor_down;  // [B x D]
  Tensor adaptor_up;    // [D x B]
  // survival heads
  Tensor head_w, head_b;    // continuous: [D], scalar
  Tensor head_kw, head_kb;  // discrete: [K x D], [K]

  std::array<bool, 6> frozen{false, false, false, false, false, false};

  bool is_frozen(ParamGroupId g) const { return frozen[static_cast<std::size_t>(g)]; }

  void set_frozen(ParamGroupId g, bool on) {
    frozen[static_cast<std::size_t>(g)] = on;
    for (auto& nt : group(g)) nt.tensor.set_requires_grad(!on);
  }

  // Handles into one group, in the fixed declaration order.
  std::vector<NamedTensor> group(ParamGroupId g) const {
    switch (g) {
      case ParamGroupId::Encoder:
        return {{"conv1_w", conv1_w}, {"conv1_b", conv1_b}, {"conv2_w", conv2_w}, {"conv2_b", conv2_b}};
      case ParamGroupId::Projection:
        return {{"w", projection}};
      case ParamGroupId::Decoder: {
        std::vector<NamedTensor> out{{"token_embedding", token_embedding},
                                     {"position_embedding", position_embedding}};
        for (std::size_t i = 0; i < layers.size(); ++i) {
          const auto& l = layers[i];
          const std::string p = "layer" + std::to_string(i) + ".";
          out.push_back({p + "ln1_gain", l.ln1_gain});
          out.push_back({p + "ln1_shift", l.ln1_shift});
          out.push_back({p + "wq", l.wq});
          out.push_back({p + "wk", l.wk});
          out.push_back({p + "wv", l.wv});
          out.push_back({p + "wo", l.wo});
          out.push_back({p + "ln2_gain", l.ln2_gain});
          out.push_back({p + "ln2_shift", l.ln2_shift});
          out.push_back({p + "w1", l.w1});
          out.push_back({p + "b1", l.b1});
          out.push_back({p + "w2", l.w2});
          out.push_back({p + "b2", l.b2});
        }
        out.push_back({"lnf_gain", lnf_gain});
        out.push_back({"lnf_shift", lnf_shift});
        if (output.defined()) out.push_back({"output", output});
        return out;
      }
      case ParamGroupId::Adaptor:
        return {{"down", adaptor_down}, {"up", adaptor_up}};
      case ParamGroupId::HeadContinuous:
        return {{"w", head_w}, {"b", head_b}};
      case ParamGroupId::HeadDiscrete:
        return {{"w", head_kw}, {"b", head_kb}};
    }
    return {};
  }

  std::vector<NamedTensor> all() const {
    std::vector<NamedTensor> out;
    for (auto g : kAllGroups)
      for (auto& nt : group(g)) out.push_back({std::string(group_name(g)) + "." + nt.name, nt.tensor});
    return out;
  }

  void zero_grad() {
    for (auto& nt : all()) nt.tensor.zero_grad();
  }
};

// Allocates and initializes every parameter from the counter RNG; tensor
// i of the global order draws from stream i.
inline ModelParams init_params(const ModelConfig& cfg) {
  cfg.validate();
  ModelParams p;
  const std::size_t d = cfg.d_text;
  const std::size_t k1 = cfg.stride1[0] * cfg.stride1[1] * cfg.stride1[2];
  const std::size_t k2 = cfg.stride2[0] * cfg.stride2[1] * cfg.stride2[2] * cfg.encoder_channels;
  std::uint64_t stream = 0;
  auto normal = [&](Shape shape, double stddev) {
    CounterRng rng(cfg.init_seed, stream++);
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = rng.normal(0.0, stddev);
    return Tensor::from(std::move(shape), std::move(v), true);
  };
  auto constant = [&](Shape shape, double value) {
    ++stream;
    const auto n = shape_numel(shape);
    return Tensor::from(std::move(shape), std::vector<double>(n, value), true);
  };

  p.conv1_w = normal({cfg.encoder_channels, k1}, std::sqrt(2.0 / static_cast<double>(k1)));
  p.conv1_b = constant({cfg.encoder_channels}, 0.0);
  p.conv2_w = normal({cfg.d_vis, k2}, std::sqrt(2.0 / static_cast<double>(k2)));
  p.conv2_b = constant({cfg.d_vis}, 0.0);

  p.projection = normal({d, cfg.d_vis}, 1.0 / std::sqrt(static_cast<double>(cfg.d_vis)));

  p.token_embedding = normal({cfg.vocab_size, d}, 0.02);
  p.position_embedding = normal({cfg.max_len, d}, 0.02);
  const double resid_std = 0.02 / std::sqrt(2.0 * static_cast<double>(cfg.n_layers));
  for (std::size_t i = 0; i < cfg.n_layers; ++i) {
    DecoderLayerParams l;
    l.ln1_gain = constant({d}, 1.0);
    l.ln1_shift = constant({d}, 0.0);
    l.wq = normal({d, d}, 0.02);
    l.wk = normal({d, d}, 0.02);
    l.wv = normal({d, d}, 0.02);
    l.wo = normal({d, d}, resid_std);
    l.ln2_gain = constant({d}, 1.0);
    l.ln2_shift = constant({d}, 0.0);
    l.w1 = normal({cfg.d_ffn, d}, 0.02);
    l.b1 = constant({cfg.d_ffn}, 0.0);
    l.w2 = normal({d, cfg.d_ffn}, resid_std);
    l.b2 = constant({d}, 0.0);
    p.layers.push_back(std::move(l));
  }
  p.lnf_gain = constant({d}, 1.0);
  p.lnf_shift = constant({d}, 0.0);
  if (!cfg.tied_output) p.output = normal({cfg.vocab_size, d}, 0.02);

  p.adaptor_down = normal({cfg.bottleneck, d}, 1.0 / std::sqrt(static_cast<double>(d)));
  p.adaptor_up = constant({d, cfg.bottleneck}, 0.0);

  p.head_w = normal({d}, 1.0 / std::sqrt(static_cast<double>(d)));
  p.head_b = constant({}, 0.0);
  p.head_kw = normal({cfg.k_bins, d}, 1.0 / std::sqrt(static_cast<double>(d)));
  p.head_kb = constant({cfg.k_bins}, 0.0);
  return p;
}

// Deep copy with the same freeze flags.
inline ModelParams clone_params(const ModelParams& src) {
  ModelParams dst = src;
  auto copy = [](Tensor& t) {
    if (t.defined()) t = Tensor::from(t.shape(), t.values(), t.requires_grad());
  };
  copy(dst.conv1_w); copy(dst.conv1_b); copy(dst.conv2_w); copy(dst.conv2_b);
  copy(dst.projection);
  copy(dst.token_embedding); copy(dst.position_embedding);
  for (auto& l : dst.layers) {
    for (Tensor* t : {&l.ln1_gain, &l.ln1_shift, &l.wq, &l.wk, &l.wv, &l.wo, &l.ln2_gain,
                      &l.ln2_shift, &l.w1, &l.b1, &l.w2, &l.b2})
      copy(*t);
  }
  copy(dst.lnf_gain); copy(dst.lnf_shift); copy(dst.output);
  copy(dst.adaptor_down); copy(dst.adaptor_up);
  copy(dst.head_w); copy(dst.head_b); copy(dst.head_kw); copy(dst.head_kb);
  return dst;
}

// ---------------------------------------------------------------------------
// Encoder

namespace detail {

// Non-overlapping 3D patch extraction. `grid` is [X*Y*Z x C] in x-fastest
// position order; the result is [X'*Y'*Z' x kx*ky*kz*C].
inline Tensor patchify3d(const Tensor& grid, std::array<std::size_t, 3> dims,
                         std::array<std::size_t, 3> kernel) {
  const std::size_t c = grid.dim(1);
  const std::array<std::size_t, 3> out{dims[0] / kernel[0], dims[1] / kernel[1], dims[2] / kernel[2]};
  const std::size_t patch = kernel[0] * kernel[1] * kernel[2] * c;
  const std::size_t n_out = out[0] * out[1] * out[2];
  // source row for every (output row, patch slot)
  std::vector<std::size_t> src(n_out * kernel[0] * kernel[1] * kernel[2]);
  std::size_t s = 0;
  for (std::size_t oz = 0; oz < out[2]; ++oz)
    for (std::size_t oy = 0; oy < out[1]; ++oy)
      for (std::size_t ox = 0; ox < out[0]; ++ox)
        for (std::size_t dz = 0; dz < kernel[2]; ++dz)
          for (std::size_t dy = 0; dy < kernel[1]; ++dy)
            for (std::size_t dx = 0; dx < kernel[0]; ++dx) {
              const std::size_t x = ox * kernel[0] + dx, y = oy * kernel[1] + dy,
                                z = oz * kernel[2] + dz;
              src[s++] = x + dims[0] * (y + dims[1] * z);
            }
  std::vector<double> v(n_out * patch);
  for (std::size_t i = 0; i < src.size(); ++i)
    std::copy_n(grid.data().data() + src[i] * c, c, v.data() + i * c);
  return make_op({n_out, patch}, std::move(v), {grid}, [src, c](detail::Node& self) {
    if (auto* g = detail::grad_of(self, 0))
      for (std::size_t i = 0; i < src.size(); ++i)
        for (std::size_t ch = 0; ch < c; ++ch) (*g)[src[i] * c + ch] += self.grad[i * c + ch];
  });
}

// Mean over the slowest (z) axis of a [XY*Z x C] grid -> [XY x C]. Each
// mean sums its slice values in sorted order so the result is exactly
// invariant to permuting slices.
inline Tensor mean_over_slices(const Tensor& grid, std::size_t plane, std::size_t depth) {
  const std::size_t c = grid.dim(1);
  std::vector<double> v(plane * c);
  std::vector<double> buf(depth);
  for (std::size_t i = 0; i < plane; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t z = 0; z < depth; ++z) buf[z] = grid.data()[(i + plane * z) * c + ch];
      std::sort(buf.begin(), buf.end());
      double s = 0.0;
      for (double x : buf) s += x;
      v[i * c + ch] = s / static_cast<double>(depth);
    }
  return make_op({plane, c}, std::move(v), {grid}, [plane, depth, c](detail::Node& self) {
    if (auto* g = detail::grad_of(self, 0))
      for (std::size_t i = 0; i < plane; ++i)
        for (std::size_t z = 0; z < depth; ++z)
          for (std::size_t ch = 0; ch < c; ++ch)
            (*g)[(i + plane * z) * c + ch] += self.grad[i * c + ch] / static_cast<double>(depth);
  });
}

}  // namespace detail

// Stand-in volume encoder: two strided convolutions with a GELU between,
// then a mean over the out-of-plane axis. Returns Z_v as [P x D_vis] with
// P = p_x * p_y visual tokens.
inline Tensor encode_volume(const ModelConfig& cfg, const ModelParams& p, const Volume& vol) {
  if (vol.dims != cfg.volume_shape)
    throw std::invalid_argument("encode_volume: volume shape does not match model config");
  const auto grid = cfg.feature_grid();
  std::vector<double> scaled(vol.data.size());
  for (std::size_t i = 0; i < scaled.size(); ++i) scaled[i] = (vol.data[i] + 1000.0) / 2000.0;
  Tensor x = Tensor::matrix(vol.size(), 1, std::move(scaled));

  Tensor h = detail::patchify3d(x, vol.dims, cfg.stride1);
  h = gelu(add_row_broadcast(matmul_nt(h, p.conv1_w), p.conv1_b));
  const std::array<std::size_t, 3> mid{vol.dims[0] / cfg.stride1[0], vol.dims[1] / cfg.stride1[1],
                                       vol.dims[2] / cfg.stride1[2]};
  h = detail::patchify3d(h, mid, cfg.stride2);
  h = add_row_broadcast(matmul_nt(h, p.conv2_w), p.conv2_b);
  return detail::mean_over_slices(h, grid[0] * grid[1], grid[2]);
}

// H_v = Z_v W^T row-wise, i.e. each visual token mapped by W [D_text x D_vis].
inline Tensor project_visual(const Tensor& z_v, const Tensor& w) {
  if (z_v.rank() != 2 || w.rank() != 2 || z_v.dim(1) != w.dim(1))
    throw std::invalid_argument("project_visual: Z_v " + shape_str(z_v.shape()) +
                                " incompatible with W " + shape_str(w.shape()));
  return matmul_nt(z_v, w);
}

// ---------------------------------------------------------------------------
// Sequence packing

enum class Segment { Clinical, Image, Question, Answer };

struct TokenSequence {
  std::vector<int> ids;  // image positions carry Tokenizer::kPad
  Tensor embeddings;     // [L x D_text]
  std::vector<Segment> segments;
  std::vector<bool> loss_mask;  // true exactly on Answer positions

  std::size_t size() const { return ids.size(); }
  // Index of the last non-answer position; the survival branch reads here.
  std::size_t instruction_end() const {
    std::size_t i = 0;
    while (i < segments.size() && segments[i] != Segment::Answer) ++i;
    if (i == 0) throw std::logic_error("TokenSequence: no instruction positions");
    return i - 1;
  }
};

inline TokenSequence pack_sequence(const Tensor& token_embedding, const std::vector<int>& clinical,
                                   const Tensor& h_v, const std::vector<int>& question,
                                   const std::vector<int>& answer) {
  TokenSequence seq;
  std::vector<Tensor> parts;
  auto append_words = [&](const std::vector<int>& ids, Segment s) {
    if (ids.empty()) return;
    parts.push_back(embedding(token_embedding, ids));
    for (int id : ids) {
      seq.ids.push_back(id);
      seq.segments.push_back(s);
      seq.loss_mask.push_back(s == Segment::Answer);
    }
  };
  append_words(clinical, Segment::Clinical);
  if (h_v.dim(1) != token_embedding.dim(1))
    throw std::invalid_argument("pack_sequence: visual tokens must have the word-embedding width");
  parts.push_back(h_v);
  for (std::size_t i = 0; i < h_v.dim(0); ++i) {
    seq.ids.push_back(Tokenizer::kPad);
    seq.segments.push_back(Segment::Image);
    seq.loss_mask.push_back(false);
  }
  append_words(question, Segment::Question);
  append_words(answer, Segment::Answer);
  seq.embeddings = concat_rows(parts);
  return seq;
}

// ---------------------------------------------------------------------------
// Decoder

// Final-layer-normed hidden states, [L x D_text].
inline Tensor decode_hidden(const ModelConfig& cfg, const ModelParams& p, const TokenSequence& seq) {
  const std::size_t len = seq.size();
  if (len == 0) throw std::invalid_argument("decode: empty sequence");
  if (len > cfg.max_len)
    throw std::invalid_argument("decode: sequence length " + std::to_string(len) +
                                " exceeds max_len " + std::to_string(cfg.max_len));
  const std::size_t d = cfg.d_text, dh = d / cfg.n_heads;
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Tensor x = add(seq.embeddings, slice_rows(p.position_embedding, 0, len));
  for (const auto& l : p.layers) {
    Tensor h = layer_norm(x, l.ln1_gain, l.ln1_shift);
    Tensor q = matmul_nt(h, l.wq);
    Tensor k = matmul_nt(h, l.wk);
    Tensor v = matmul_nt(h, l.wv);
    std::vector<Tensor> heads;
    for (std::size_t hd = 0; hd < cfg.n_heads; ++hd) {
      Tensor qh = slice_cols(q, hd * dh, dh);
      Tensor kh = slice_cols(k, hd * dh, dh);
      Tensor vh = slice_cols(v, hd * dh, dh);
      Tensor probs = causal_softmax(scale(matmul_nt(qh, kh), attn_scale));
      heads.push_back(matmul(probs, vh));
    }
    x = add(x, matmul_nt(concat_cols(heads), l.wo));
    Tensor h2 = layer_norm(x, l.ln2_gain, l.ln2_shift);
    Tensor f = gelu(add_row_broadcast(matmul_nt(h2, l.w1), l.b1));
    x = add(x, add_row_broadcast(matmul_nt(f, l.w2), l.b2));
  }
  return layer_norm(x, p.lnf_gain, p.lnf_shift);
}

inline Tensor output_logits(const ModelConfig& cfg, const ModelParams& p, const Tensor& hidden) {
  return matmul_nt(hidden, cfg.tied_output ? p.token_embedding : p.output);
}

struct DecodeResult {
  Tensor hidden;  // [L x D_text]
  Tensor logits;  // [L x V]
};

inline DecodeResult decode(const ModelConfig& cfg, const ModelParams& p, const TokenSequence& seq) {
  Tensor hidden = decode_hidden(cfg, p, seq);
  return {hidden, output_logits(cfg, p, hidden)};
}

inline Tensor pool_hidden(const Tensor& hidden) { return mean_rows(hidden); }

// ---------------------------------------------------------------------------
// Survival branch

struct SurvivalOutput {
  Tensor z_surv;  // [D_text]
  Tensor risk;    // scalar, continuous head
  Tensor probs;   // [K], discrete head
};

inline SurvivalOutput survival_branch(const ModelConfig& cfg, const ModelParams& p,
                                      const Tensor& hidden, std::size_t position) {
  SurvivalOutput out;
  Tensor h = row(hidden, position);
  Tensor adapted = linear_vec(p.adaptor_up, gelu(linear_vec(p.adaptor_down, h)));
  out.z_surv = add(h, adapted);
  if (cfg.head == HeadType::Continuous) {
    out.risk = add(dot(p.head_w, out.z_surv), p.head_b);
  } else {
    out.probs = softmax(add(linear_vec(p.head_kw, out.z_surv), p.head_kb));
  }
  return out;
}

inline SurvivalOutput survival_branch(const ModelConfig& cfg, const ModelParams& p,
                                      const Tensor& hidden) {
  return survival_branch(cfg, p, hidden, hidden.dim(0) - 1);
}

// Sum of the cumulative incidence over bins; larger means earlier.
inline double discrete_risk_score(const std::vector<double>& probs) {
  double cdf = 0.0, score = 0.0;
  for (double p : probs) {
    cdf += p;
    score += cdf;
  }
  return score;
}

// Next-token NLL over the answer span: the row before each answer
// position predicts that position's id.
inline Tensor sequence_lm_loss(const ModelConfig& cfg, const ModelParams& p, const Tensor& hidden,
                               const TokenSequence& seq) {
  const std::size_t start = seq.instruction_end();
  const std::size_t rows = seq.size() - 1 - start;
  if (rows == 0) throw std::invalid_argument("no supervised tokens");
  Tensor logits = output_logits(cfg, p, slice_rows(hidden, start, rows));
  std::vector<int> targets(seq.ids.begin() + static_cast<std::ptrdiff_t>(start + 1), seq.ids.end());
  std::vector<bool> mask(seq.loss_mask.begin() + static_cast<std::ptrdiff_t>(start + 1),
                         seq.loss_mask.end());
  return lm_loss(logits, targets, mask);
}

// ---------------------------------------------------------------------------
// Inference

// One patient's inputs at inference: the frozen visual tokens Z_v and the
// tokenized clinical sentence (possibly empty).
struct PatientInput {
  Tensor z_v;
  std::vector<int> clinical;
};

inline constexpr std::size_t kEnsembleSize = 6;

// Runs the forward pass once per question and averages. Continuous heads
// average risks; discrete heads average the probability vectors before
// scoring. Sums are taken in sorted order so question order cannot change
// the result.
inline double ensemble_predict(const ModelConfig& cfg, const ModelParams& p, const PatientInput& in,
                               const std::vector<std::vector<int>>& questions,
                               bool allow_any_count = false) {
  if (questions.empty() || (!allow_any_count && questions.size() != kEnsembleSize))
    throw std::invalid_argument("ensemble_predict: expected " + std::to_string(kEnsembleSize) +
                                " questions, got " + std::to_string(questions.size()));
  NoGradGuard no_grad;
  Tensor h_v = project_visual(in.z_v, p.projection);
  std::vector<std::vector<double>> outputs;
  for (const auto& q : questions) {
    TokenSequence seq = pack_sequence(p.token_embedding, in.clinical, h_v, q, {});
    Tensor hidden = decode_hidden(cfg, p, seq);
    SurvivalOutput s = survival_branch(cfg, p, hidden);
    outputs.push_back(cfg.head == HeadType::Continuous ? std::vector<double>{s.risk.item()}
                                                        : s.probs.values());
  }
  const std::size_t width = outputs.front().size();
  std::vector<double> averaged(width);
  std::vector<double> column(outputs.size());
  for (std::size_t c = 0; c < width; ++c) {
    for (std::size_t i = 0; i < outputs.size(); ++i) column[i] = outputs[i][c];
    std::sort(column.begin(), column.end());
    double s = 0.0;
    for (double x : column) s += x;
    averaged[c] = s / static_cast<double>(outputs.size());
  }
  return cfg.head == HeadType::Continuous ? averaged[0] : discrete_risk_score(averaged);
}

// Greedy decoding after the instruction; stops at <eoa>, max_tokens or
// the context limit. The returned ids exclude <eoa>.
inline std::vector<int> generate(const ModelConfig& cfg, const ModelParams& p, const PatientInput& in,
                                 const std::vector<int>& question, std::size_t max_tokens) {
  NoGradGuard no_grad;
  std::vector<int> out;
  if (max_tokens == 0) return out;
  Tensor h_v = project_visual(in.z_v, p.projection);
  const std::size_t prefix = in.clinical.size() + h_v.dim(0) + question.size();
  while (out.size() < max_tokens && prefix + out.size() < cfg.max_len) {
    TokenSequence seq = pack_sequence(p.token_embedding, in.clinical, h_v, question, out);
    Tensor hidden = decode_hidden(cfg, p, seq);
    Tensor logits = output_logits(cfg, p, slice_rows(hidden, seq.size() - 1, 1));
    const auto v = logits.data();
    const int next = static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
    if (next == Tokenizer::kEndAnswer) break;
    out.push_back(next);
  }
  return out;
}

}  // namespace survlm
