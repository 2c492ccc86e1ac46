// SPDX-License-Identifier: Apache-2.0
#include "fpe/clip.hpp"

#include <cstring>

namespace fpe {

using ag::Var;
using nlohmann::json;

ClipTextConfig ClipTextConfig::from_json(const json& j) {
  ClipTextConfig c;
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.hidden_size = j.value("hidden_size", c.hidden_size);
  c.intermediate_size = j.value("intermediate_size", c.intermediate_size);
  c.num_layers = j.value("num_hidden_layers", c.num_layers);
  c.num_heads = j.value("num_attention_heads", c.num_heads);
  c.max_positions = j.value("max_position_embeddings", c.max_positions);
  c.hidden_act = j.value("hidden_act", c.hidden_act);
  c.layer_norm_eps = j.value("layer_norm_eps", c.layer_norm_eps);
  return c;
}

ClipVisionConfig ClipVisionConfig::from_json(const json& j) {
  ClipVisionConfig c;
  c.hidden_size = j.value("hidden_size", c.hidden_size);
  c.intermediate_size = j.value("intermediate_size", c.intermediate_size);
  c.num_layers = j.value("num_hidden_layers", c.num_layers);
  c.num_heads = j.value("num_attention_heads", c.num_heads);
  c.image_size = j.value("image_size", c.image_size);
  c.patch_size = j.value("patch_size", c.patch_size);
  c.hidden_act = j.value("hidden_act", c.hidden_act);
  c.layer_norm_eps = j.value("layer_norm_eps", c.layer_norm_eps);
  return c;
}

struct ClipEncoder::Layer {
  nn::LayerNorm ln1, ln2;
  nn::Linear q, k, v, out, fc1, fc2;
  int heads;
  std::string act;

  Layer(nn::ParamSource& p, const std::string& pre, int hidden, int inter, int h, std::string a, float eps)
      : ln1(p, pre + ".layer_norm1", hidden, eps),
        ln2(p, pre + ".layer_norm2", hidden, eps),
        q(p, pre + ".self_attn.q_proj", hidden, hidden),
        k(p, pre + ".self_attn.k_proj", hidden, hidden),
        v(p, pre + ".self_attn.v_proj", hidden, hidden),
        out(p, pre + ".self_attn.out_proj", hidden, hidden),
        fc1(p, pre + ".mlp.fc1", hidden, inter),
        fc2(p, pre + ".mlp.fc2", inter, hidden),
        heads(h),
        act(std::move(a)) {
    if (act != "quick_gelu" && act != "gelu") throw Error("unsupported CLIP activation '" + act + "'");
  }

  Var operator()(const Var& x, bool causal) const {
    Var h = ln1(x);
    h = out(ag::attention(q(h), k(h), v(h), heads, causal, nullptr));
    Var y = ag::add(x, h);
    Var m = fc1(ln2(y));
    m = act == "gelu" ? ag::gelu(m) : ag::quick_gelu(m);
    return ag::add(y, fc2(m));
  }
};

ClipEncoder::ClipEncoder(nn::ParamSource& p, const std::string& prefix, int hidden, int intermediate, int layers,
                         int heads, std::string act, float eps) {
  layers_.reserve(static_cast<size_t>(layers));
  for (int i = 0; i < layers; ++i) {
    layers_.emplace_back(p, prefix + "encoder.layers." + std::to_string(i), hidden, intermediate, heads, act, eps);
  }
}

ClipEncoder::~ClipEncoder() = default;
ClipEncoder::ClipEncoder(ClipEncoder&&) noexcept = default;

Var ClipEncoder::operator()(const Var& x, bool causal) const {
  Var h = x;
  for (const auto& layer : layers_) h = layer(h, causal);
  return h;
}

ClipTextModel::ClipTextModel(const ClipTextConfig& c, nn::ParamSource& p, const std::string& prefix)
    : config_(c),
      token_embedding_(p.take(prefix + "embeddings.token_embedding.weight", {c.vocab_size, c.hidden_size},
                              nn::Init::embedding)),
      position_embedding_(p.take(prefix + "embeddings.position_embedding.weight", {c.max_positions, c.hidden_size},
                                 nn::Init::embedding)),
      encoder_(p, prefix, c.hidden_size, c.intermediate_size, c.num_layers, c.num_heads, c.hidden_act,
               c.layer_norm_eps),
      final_norm_(p, prefix + "final_layer_norm", c.hidden_size, c.layer_norm_eps) {}

Var ClipTextModel::forward(const std::vector<int>& ids) const {
  const int64_t n = static_cast<int64_t>(ids.size());
  const int64_t d = config_.hidden_size;
  if (n == 0 || n > config_.max_positions) {
    throw ShapeError("text encoder takes 1.." + std::to_string(config_.max_positions) + " tokens, got " +
                     std::to_string(n));
  }
  Tensor x({n, d});
  for (int64_t i = 0; i < n; ++i) {
    const int id = ids[static_cast<size_t>(i)];
    if (id < 0 || id >= config_.vocab_size) throw Error("token id " + std::to_string(id) + " outside vocabulary");
    const float* tok = token_embedding_.data() + static_cast<int64_t>(id) * d;
    const float* pos = position_embedding_.data() + i * d;
    for (int64_t j = 0; j < d; ++j) x[i * d + j] = tok[j] + pos[j];
  }
  return final_norm_(encoder_(Var(std::move(x)), true));
}

Tensor ClipTextModel::pooled(const std::vector<int>& ids, int eos_id) const {
  const Tensor h = forward(ids).value();
  size_t at = ids.size() - 1;
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] == eos_id) {
      at = i;
      break;
    }
  }
  const int64_t d = config_.hidden_size;
  Tensor out({d});
  std::memcpy(out.data(), h.data() + static_cast<int64_t>(at) * d, static_cast<size_t>(d) * sizeof(float));
  return out;
}

ClipVisionModel::ClipVisionModel(const ClipVisionConfig& c, nn::ParamSource& p, const std::string& prefix)
    : config_(c),
      patch_embedding_(p, prefix + "embeddings.patch_embedding", 3, c.hidden_size, c.patch_size,
                       ag::ConvSpec{c.patch_size, 0, 0, 0, 0}, false),
      class_embedding_(p.take(prefix + "embeddings.class_embedding", {c.hidden_size}, nn::Init::embedding)),
      position_embedding_(p.take(prefix + "embeddings.position_embedding.weight",
                                 {static_cast<int64_t>(c.image_size / c.patch_size) * (c.image_size / c.patch_size) + 1,
                                  c.hidden_size},
                                 nn::Init::embedding)),
      pre_norm_(p, prefix + "pre_layrnorm", c.hidden_size, c.layer_norm_eps),
      encoder_(p, prefix, c.hidden_size, c.intermediate_size, c.num_layers, c.num_heads, c.hidden_act,
               c.layer_norm_eps),
      post_norm_(p, prefix + "post_layernorm", c.hidden_size, c.layer_norm_eps) {}

Tensor ClipVisionModel::pooled(const Tensor& pixels) const {
  const int64_t s = config_.image_size;
  if (pixels.shape() != Shape{3, s, s}) {
    throw ShapeError("vision encoder expects [3, " + std::to_string(s) + ", " + std::to_string(s) + "], got " +
                     shape_str(pixels.shape()));
  }
  ag::NoGradGuard no_grad;
  const Tensor patches = patch_embedding_(Var(pixels)).value();  // [D, g, g]
  const int64_t d = config_.hidden_size, g2 = patches.dim(1) * patches.dim(2);
  Tensor x({g2 + 1, d});
  for (int64_t j = 0; j < d; ++j) x[j] = class_embedding_[j] + position_embedding_[j];
  for (int64_t t = 0; t < g2; ++t) {
    for (int64_t j = 0; j < d; ++j) {
      x[(t + 1) * d + j] = patches[j * g2 + t] + position_embedding_[(t + 1) * d + j];
    }
  }
  const Tensor h = encoder_(pre_norm_(Var(std::move(x))), false).value();
  Tensor cls({1, d});
  std::memcpy(cls.data(), h.data(), static_cast<size_t>(d) * sizeof(float));
  return post_norm_(Var(std::move(cls))).value().reshaped({d});
}

}  // namespace fpe
