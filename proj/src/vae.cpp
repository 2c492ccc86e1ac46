// SPDX-License-Identifier: Apache-2.0
#include "fpe/vae.hpp"

#include <optional>

namespace fpe {

using ag::Var;

VaeConfig VaeConfig::tiny() {
  VaeConfig c;
  c.block_out_channels = {16, 16, 32, 32};
  c.layers_per_block = 1;
  c.norm_num_groups = 8;
  return c;
}

VaeConfig VaeConfig::from_json(const nlohmann::json& j) {
  VaeConfig c;
  c.in_channels = j.value("in_channels", 3);
  c.out_channels = j.value("out_channels", 3);
  c.block_out_channels = j.at("block_out_channels").get<std::vector<int>>();
  c.layers_per_block = j.value("layers_per_block", 2);
  c.latent_channels = j.value("latent_channels", 4);
  c.norm_num_groups = j.value("norm_num_groups", 32);
  c.scaling_factor = j.value("scaling_factor", 0.18215f);
  return c;
}

namespace {

constexpr float kEps = 1e-6f;

struct Resnet {
  nn::GroupNorm norm1, norm2;
  nn::Conv2d conv1, conv2;
  std::optional<nn::Conv2d> shortcut;

  Resnet(nn::ParamSource& p, const std::string& pre, int in, int out, int groups)
      : norm1(p, pre + ".norm1", groups, in, kEps),
        norm2(p, pre + ".norm2", groups, out, kEps),
        conv1(p, pre + ".conv1", in, out, 3, ag::ConvSpec::same(1)),
        conv2(p, pre + ".conv2", out, out, 3, ag::ConvSpec::same(1)) {
    if (in != out) shortcut.emplace(p, pre + ".conv_shortcut", in, out, 1, ag::ConvSpec{});
  }

  Var operator()(const Var& x) const {
    Var h = conv2(ag::silu(norm2(conv1(ag::silu(norm1(x))))));
    return ag::add(shortcut ? (*shortcut)(x) : x, h);
  }
};

// Single-head spatial self-attention of the autoencoder mid block. Older
// checkpoints name the projections query/key/value/proj_attn.
struct MidAttention {
  nn::GroupNorm norm;
  nn::Linear q, k, v, out;

  static std::string key(nn::ParamSource& p, const std::string& pre, const std::string& modern,
                         const std::string& legacy) {
    const std::string m = pre + "." + modern, l = pre + "." + legacy;
    return p.resolve({m + ".weight", l + ".weight"}) == l + ".weight" ? l : m;
  }

  MidAttention(nn::ParamSource& p, const std::string& pre, int ch, int groups)
      : norm(p, pre + ".group_norm", groups, ch, kEps),
        q(p, key(p, pre, "to_q", "query"), ch, ch),
        k(p, key(p, pre, "to_k", "key"), ch, ch),
        v(p, key(p, pre, "to_v", "value"), ch, ch),
        out(p, key(p, pre, "to_out.0", "proj_attn"), ch, ch) {}

  Var operator()(const Var& x) const {
    const Shape s = x.shape();
    Var h = ag::transpose2d(ag::reshape(norm(x), {s[0], s[1] * s[2]}));
    h = out(ag::attention(q(h), k(h), v(h), 1, false, nullptr));
    return ag::add(x, ag::reshape(ag::transpose2d(h), s));
  }
};

struct MidBlock {
  Resnet r0;
  MidAttention attn;
  Resnet r1;

  MidBlock(nn::ParamSource& p, const std::string& pre, int ch, int groups)
      : r0(p, pre + ".resnets.0", ch, ch, groups),
        attn(p, pre + ".attentions.0", ch, groups),
        r1(p, pre + ".resnets.1", ch, ch, groups) {}

  Var operator()(const Var& x) const { return r1(attn(r0(x))); }
};

struct Stage {
  std::vector<Resnet> resnets;
  std::optional<nn::Conv2d> resample;
};

}  // namespace

struct AutoencoderKL::Impl {
  // Encoder.
  nn::Conv2d enc_in;
  std::vector<Stage> down;
  std::optional<MidBlock> enc_mid;
  nn::GroupNorm enc_norm;
  nn::Conv2d enc_out;
  nn::Conv2d quant;
  // Decoder.
  nn::Conv2d post_quant;
  nn::Conv2d dec_in;
  std::optional<MidBlock> dec_mid;
  std::vector<Stage> up;
  nn::GroupNorm dec_norm;
  nn::Conv2d dec_out;
};

AutoencoderKL::AutoencoderKL(const VaeConfig& c, nn::ParamSource& p) : config_(c), impl_(std::make_unique<Impl>()) {
  const auto& ch = c.block_out_channels;
  const int n = static_cast<int>(ch.size());
  const int g = c.norm_num_groups;
  Impl& m = *impl_;

  m.enc_in = nn::Conv2d(p, "encoder.conv_in", c.in_channels, ch[0], 3, ag::ConvSpec::same(1));
  int prev = ch[0];
  for (int i = 0; i < n; ++i) {
    Stage st;
    const std::string pre = "encoder.down_blocks." + std::to_string(i);
    for (int j = 0; j < c.layers_per_block; ++j) {
      st.resnets.emplace_back(p, pre + ".resnets." + std::to_string(j), j == 0 ? prev : ch[i], ch[i], g);
    }
    if (i + 1 < n) {
      st.resample.emplace(p, pre + ".downsamplers.0.conv", ch[i], ch[i], 3, ag::ConvSpec{2, 0, 0, 1, 1});
    }
    prev = ch[i];
    m.down.push_back(std::move(st));
  }
  m.enc_mid.emplace(p, "encoder.mid_block", ch.back(), g);
  m.enc_norm = nn::GroupNorm(p, "encoder.conv_norm_out", g, ch.back(), kEps);
  m.enc_out = nn::Conv2d(p, "encoder.conv_out", ch.back(), 2 * c.latent_channels, 3, ag::ConvSpec::same(1));
  m.quant = nn::Conv2d(p, "quant_conv", 2 * c.latent_channels, 2 * c.latent_channels, 1, ag::ConvSpec{});

  m.post_quant = nn::Conv2d(p, "post_quant_conv", c.latent_channels, c.latent_channels, 1, ag::ConvSpec{});
  m.dec_in = nn::Conv2d(p, "decoder.conv_in", c.latent_channels, ch.back(), 3, ag::ConvSpec::same(1));
  m.dec_mid.emplace(p, "decoder.mid_block", ch.back(), g);
  prev = ch.back();
  for (int i = 0; i < n; ++i) {
    const int out_ch = ch[static_cast<size_t>(n - 1 - i)];
    Stage st;
    const std::string pre = "decoder.up_blocks." + std::to_string(i);
    for (int j = 0; j < c.layers_per_block + 1; ++j) {
      st.resnets.emplace_back(p, pre + ".resnets." + std::to_string(j), j == 0 ? prev : out_ch, out_ch, g);
    }
    if (i + 1 < n) st.resample.emplace(p, pre + ".upsamplers.0.conv", out_ch, out_ch, 3, ag::ConvSpec::same(1));
    prev = out_ch;
    m.up.push_back(std::move(st));
  }
  m.dec_norm = nn::GroupNorm(p, "decoder.conv_norm_out", g, ch.front(), kEps);
  m.dec_out = nn::Conv2d(p, "decoder.conv_out", ch.front(), c.out_channels, 3, ag::ConvSpec::same(1));
}

AutoencoderKL::~AutoencoderKL() = default;

Tensor AutoencoderKL::encode(const Tensor& image) const {
  const int f = config_.downsample_factor();
  if (image.rank() != 3 || image.dim(0) != config_.in_channels) {
    throw ValidationError("image must be [" + std::to_string(config_.in_channels) + ", H, W], got " +
                          shape_str(image.shape()));
  }
  if (image.dim(1) % f != 0 || image.dim(2) % f != 0) {
    throw ValidationError("image side lengths must be multiples of " + std::to_string(f) + ", got " +
                          std::to_string(image.dim(2)) + "x" + std::to_string(image.dim(1)));
  }
  ag::NoGradGuard no_grad;
  const Impl& m = *impl_;
  Var h = m.enc_in(Var(image));
  for (const auto& st : m.down) {
    for (const auto& r : st.resnets) h = r(h);
    if (st.resample) h = (*st.resample)(h);
  }
  h = (*m.enc_mid)(h);
  h = m.quant(m.enc_out(ag::silu(m.enc_norm(h))));
  const Tensor& moments = h.value();
  const int64_t lc = config_.latent_channels, hw = moments.dim(1) * moments.dim(2);
  Tensor mean({lc, moments.dim(1), moments.dim(2)});
  for (int64_t i = 0; i < lc * hw; ++i) mean[i] = moments[i] * config_.scaling_factor;
  return mean;
}

Tensor AutoencoderKL::decode(const Tensor& latent) const {
  if (latent.rank() != 3 || latent.dim(0) != config_.latent_channels) {
    throw ValidationError("latent must be [" + std::to_string(config_.latent_channels) + ", h, w], got " +
                          shape_str(latent.shape()));
  }
  ag::NoGradGuard no_grad;
  const Impl& m = *impl_;
  Var h = m.dec_in(m.post_quant(Var(latent * (1.0f / config_.scaling_factor))));
  h = (*m.dec_mid)(h);
  for (const auto& st : m.up) {
    for (const auto& r : st.resnets) h = r(h);
    if (st.resample) h = (*st.resample)(ag::upsample_nearest2x(h));
  }
  return m.dec_out(ag::silu(m.dec_norm(h))).value();
}

}  // namespace fpe
