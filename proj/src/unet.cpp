// SPDX-License-Identifier: Apache-2.0
#include "fpe/unet.hpp"

namespace fpe {

using ag::Var;
using nlohmann::json;

std::string to_string(BlockKind b) {
  switch (b) {
    case BlockKind::down:
      return "down";
    case BlockKind::mid:
      return "mid";
    case BlockKind::up:
      return "up";
  }
  return "?";
}

std::string to_string(AttnKind k) { return k == AttnKind::cross ? "cross" : "self"; }

std::string to_string(Branch b) {
  switch (b) {
    case Branch::uncond:
      return "uncond";
    case Branch::cond:
      return "cond";
    case Branch::single:
      return "single";
  }
  return "?";
}

AttnKind parse_attn_kind(const std::string& s) {
  if (s == "cross") return AttnKind::cross;
  if (s == "self") return AttnKind::self;
  throw ValidationError("unknown attention kind '" + s + "' (expected cross or self)");
}

Branch parse_branch(const std::string& s) {
  if (s == "uncond") return Branch::uncond;
  if (s == "cond") return Branch::cond;
  if (s == "single") return Branch::single;
  throw ValidationError("unknown branch '" + s + "'");
}

UNetConfig UNetConfig::sd15() { return UNetConfig{}; }

UNetConfig UNetConfig::tiny() {
  UNetConfig c;
  c.block_out_channels = {32, 64};
  c.layers_per_block = 1;
  c.down_block_types = {"CrossAttnDownBlock2D", "DownBlock2D"};
  c.up_block_types = {"UpBlock2D", "CrossAttnUpBlock2D"};
  c.num_attention_heads = {2, 2};
  c.cross_attention_dim = 32;
  c.norm_num_groups = 8;
  c.sample_size = 16;
  return c;
}

UNetConfig UNetConfig::from_json(const json& j) {
  UNetConfig c;
  c.in_channels = j.value("in_channels", 4);
  c.out_channels = j.value("out_channels", 4);
  c.block_out_channels = j.at("block_out_channels").get<std::vector<int>>();
  c.layers_per_block = j.value("layers_per_block", 2);
  c.down_block_types = j.at("down_block_types").get<std::vector<std::string>>();
  c.up_block_types = j.at("up_block_types").get<std::vector<std::string>>();
  c.cross_attention_dim = j.value("cross_attention_dim", 768);
  c.norm_num_groups = j.value("norm_num_groups", 32);
  c.norm_eps = j.value("norm_eps", 1e-5f);
  c.use_linear_projection = j.value("use_linear_projection", false);
  c.flip_sin_to_cos = j.value("flip_sin_to_cos", true);
  c.freq_shift = j.value("freq_shift", 0.0f);
  c.sample_size = j.value("sample_size", 64);
  if (j.contains("transformer_layers_per_block") && !j["transformer_layers_per_block"].is_null()) {
    const auto& t = j["transformer_layers_per_block"];
    const bool single = t.is_number() ? t.get<int>() == 1 : std::ranges::all_of(t, [](const json& v) {
      return v.get<int>() == 1;
    });
    if (!single) throw Error("transformer_layers_per_block other than 1 is not supported");
  }
  // diffusers uses attention_head_dim as the head count when
  // num_attention_heads is absent (the SD-1.x convention).
  json heads = j.contains("num_attention_heads") && !j["num_attention_heads"].is_null() ? j["num_attention_heads"]
                                                                                         : j.value("attention_head_dim", json(8));
  const size_t n = c.block_out_channels.size();
  if (heads.is_number()) {
    c.num_attention_heads.assign(n, heads.get<int>());
  } else {
    c.num_attention_heads = heads.get<std::vector<int>>();
  }
  if (c.num_attention_heads.size() != n || c.down_block_types.size() != n || c.up_block_types.size() != n) {
    throw Error("unet config: block lists must have equal length");
  }
  if (j.value("mid_block_type", std::string("UNetMidBlock2DCrossAttn")) != "UNetMidBlock2DCrossAttn") {
    throw Error("unet config: only UNetMidBlock2DCrossAttn is supported");
  }
  return c;
}

namespace {

struct ResnetBlock {
  nn::GroupNorm norm1, norm2;
  nn::Conv2d conv1, conv2;
  nn::Linear time_emb_proj;
  std::optional<nn::Conv2d> shortcut;

  ResnetBlock(nn::ParamSource& p, const std::string& pre, int in, int out, int temb_dim, const UNetConfig& c)
      : norm1(p, pre + ".norm1", c.norm_num_groups, in, c.norm_eps),
        norm2(p, pre + ".norm2", c.norm_num_groups, out, c.norm_eps),
        conv1(p, pre + ".conv1", in, out, 3, ag::ConvSpec::same(1)),
        conv2(p, pre + ".conv2", out, out, 3, ag::ConvSpec::same(1)),
        time_emb_proj(p, pre + ".time_emb_proj", temb_dim, out) {
    if (in != out) shortcut.emplace(p, pre + ".conv_shortcut", in, out, 1, ag::ConvSpec{});
  }

  Var operator()(const Var& x, const Var& temb_act) const {
    Var h = conv1(ag::silu(norm1(x)));
    Var t = time_emb_proj(temb_act);
    h = ag::add_channel_bias(h, ag::reshape(t, {t.shape()[1]}));
    h = conv2(ag::silu(norm2(h)));
    return ag::add(shortcut ? (*shortcut)(x) : x, h);
  }
};

struct SiteAttention {
  nn::Linear to_q, to_k, to_v, to_out;
  int heads;
  AttentionSite site;

  SiteAttention(nn::ParamSource& p, const std::string& pre, int dim, int context_dim, int h)
      : to_q(p, pre + ".to_q", dim, dim, false),
        to_k(p, pre + ".to_k", context_dim, dim, false),
        to_v(p, pre + ".to_v", context_dim, dim, false),
        to_out(p, pre + ".to_out.0", dim, dim, true),
        heads(h) {}

  Var operator()(const Var& x, const Var& context, AttentionObserver* observer, int64_t grid_h,
                 int64_t grid_w) const {
    Var q = to_q(x), k = to_k(context), v = to_v(context);
    ag::ProbsHook hook;
    if (observer) {
      AttentionSite live = site;
      live.spatial_len = x.shape()[0];
      live.context_len = context.shape()[0];
      live.grid_h = grid_h;
      live.grid_w = grid_w;
      hook = [observer, live](Tensor& probs) { return observer->on_attention(live, probs); };
    }
    return to_out(ag::attention(q, k, v, heads, false, hook));
  }
};

struct Transformer2D {
  nn::GroupNorm norm;
  nn::Linear proj_in_linear, proj_out_linear;
  nn::Conv2d proj_in_conv, proj_out_conv;
  bool linear_projection;
  nn::LayerNorm norm1, norm2, norm3;
  SiteAttention attn1, attn2;
  nn::Linear ff_proj, ff_out;
  int channels;

  Transformer2D(nn::ParamSource& p, const std::string& pre, int ch, int heads, int index, BlockKind block,
                const UNetConfig& c)
      : norm(p, pre + ".norm", c.norm_num_groups, ch, 1e-6f),
        linear_projection(c.use_linear_projection),
        norm1(p, pre + ".transformer_blocks.0.norm1", ch, 1e-5f),
        norm2(p, pre + ".transformer_blocks.0.norm2", ch, 1e-5f),
        norm3(p, pre + ".transformer_blocks.0.norm3", ch, 1e-5f),
        attn1(p, pre + ".transformer_blocks.0.attn1", ch, ch, heads),
        attn2(p, pre + ".transformer_blocks.0.attn2", ch, c.cross_attention_dim, heads),
        ff_proj(p, pre + ".transformer_blocks.0.ff.net.0.proj", ch, ch * 4 * 2),
        ff_out(p, pre + ".transformer_blocks.0.ff.net.2", ch * 4, ch),
        channels(ch) {
    if (linear_projection) {
      proj_in_linear = nn::Linear(p, pre + ".proj_in", ch, ch);
      proj_out_linear = nn::Linear(p, pre + ".proj_out", ch, ch);
    } else {
      proj_in_conv = nn::Conv2d(p, pre + ".proj_in", ch, ch, 1, ag::ConvSpec{});
      proj_out_conv = nn::Conv2d(p, pre + ".proj_out", ch, ch, 1, ag::ConvSpec{});
    }
    attn1.site = AttentionSite{index, block, AttnKind::self, 0, 0, heads};
    attn2.site = AttentionSite{index, block, AttnKind::cross, 0, 0, heads};
  }

  Var operator()(const Var& x, const Var& context, AttentionObserver* observer) const {
    const int64_t h = x.shape()[1], w = x.shape()[2];
    Var hs = norm(x);
    Var tokens;
    if (linear_projection) {
      tokens = proj_in_linear(ag::transpose2d(ag::reshape(hs, {channels, h * w})));
    } else {
      tokens = ag::transpose2d(ag::reshape(proj_in_conv(hs), {channels, h * w}));
    }
    Var normed = norm1(tokens);
    tokens = ag::add(attn1(normed, normed, observer, h, w), tokens);
    tokens = ag::add(attn2(norm2(tokens), context, observer, h, w), tokens);
    auto [val, gate] = ag::split_last(ff_proj(norm3(tokens)), channels * 4);
    tokens = ag::add(ff_out(ag::mul(val, ag::gelu(gate))), tokens);
    Var out;
    if (linear_projection) {
      out = ag::reshape(ag::transpose2d(proj_out_linear(tokens)), {channels, h, w});
    } else {
      out = proj_out_conv(ag::reshape(ag::transpose2d(tokens), {channels, h, w}));
    }
    return ag::add(out, x);
  }
};

struct Block {
  std::vector<ResnetBlock> resnets;
  std::vector<Transformer2D> attentions;
  std::optional<nn::Conv2d> resample;
};

}  // namespace

struct UNet2DCondition::Impl {
  nn::Conv2d conv_in;
  nn::Linear time_linear_1, time_linear_2;
  std::vector<Block> down, up;
  std::optional<ResnetBlock> mid_res0, mid_res1;
  std::optional<Transformer2D> mid_attn;
  nn::GroupNorm norm_out;
  nn::Conv2d conv_out;
};

UNet2DCondition::UNet2DCondition(const UNetConfig& c, nn::ParamSource& p) : config_(c), impl_(new Impl) {
  auto& m = *impl_;
  const auto& boc = c.block_out_channels;
  const int n = static_cast<int>(boc.size());
  const int temb_dim = boc[0] * 4;
  m.conv_in = nn::Conv2d(p, "conv_in", c.in_channels, boc[0], 3, ag::ConvSpec::same(1));
  m.time_linear_1 = nn::Linear(p, "time_embedding.linear_1", boc[0], temb_dim);
  m.time_linear_2 = nn::Linear(p, "time_embedding.linear_2", temb_dim, temb_dim);

  int index = 0;
  int out_ch = boc[0];
  for (int i = 0; i < n; ++i) {
    const int in_ch = out_ch;
    out_ch = boc[i];
    const bool cross = c.down_block_types[i] == "CrossAttnDownBlock2D";
    if (!cross && c.down_block_types[i] != "DownBlock2D") throw Error("unsupported down block " + c.down_block_types[i]);
    Block b;
    const std::string pre = "down_blocks." + std::to_string(i);
    for (int j = 0; j < c.layers_per_block; ++j) {
      b.resnets.emplace_back(p, pre + ".resnets." + std::to_string(j), j == 0 ? in_ch : out_ch, out_ch, temb_dim, c);
      if (cross) {
        b.attentions.emplace_back(p, pre + ".attentions." + std::to_string(j), out_ch, c.num_attention_heads[i],
                                  ++index, BlockKind::down, c);
      }
    }
    if (i != n - 1) b.resample.emplace(p, pre + ".downsamplers.0.conv", out_ch, out_ch, 3, ag::ConvSpec::same(1, 2));
    m.down.push_back(std::move(b));
  }

  const int mid_ch = boc.back();
  m.mid_res0.emplace(p, "mid_block.resnets.0", mid_ch, mid_ch, temb_dim, c);
  m.mid_attn.emplace(p, "mid_block.attentions.0", mid_ch, c.num_attention_heads.back(), ++index, BlockKind::mid, c);
  m.mid_res1.emplace(p, "mid_block.resnets.1", mid_ch, mid_ch, temb_dim, c);

  int prev_out = boc.back();
  for (int i = 0; i < n; ++i) {
    const int rev = n - 1 - i;
    const int up_out = boc[rev];
    const int up_in = boc[std::max(rev - 1, 0)];
    const bool cross = c.up_block_types[i] == "CrossAttnUpBlock2D";
    if (!cross && c.up_block_types[i] != "UpBlock2D") throw Error("unsupported up block " + c.up_block_types[i]);
    Block b;
    const std::string pre = "up_blocks." + std::to_string(i);
    for (int j = 0; j <= c.layers_per_block; ++j) {
      const int skip = j == c.layers_per_block ? up_in : up_out;
      const int res_in = j == 0 ? prev_out : up_out;
      b.resnets.emplace_back(p, pre + ".resnets." + std::to_string(j), res_in + skip, up_out, temb_dim, c);
      if (cross) {
        b.attentions.emplace_back(p, pre + ".attentions." + std::to_string(j), up_out, c.num_attention_heads[rev],
                                  ++index, BlockKind::up, c);
      }
    }
    if (i != n - 1) b.resample.emplace(p, pre + ".upsamplers.0.conv", up_out, up_out, 3, ag::ConvSpec::same(1));
    prev_out = up_out;
    m.up.push_back(std::move(b));
  }
  m.norm_out = nn::GroupNorm(p, "conv_norm_out", c.norm_num_groups, boc[0], c.norm_eps);
  m.conv_out = nn::Conv2d(p, "conv_out", boc[0], c.out_channels, 3, ag::ConvSpec::same(1));
  transformer_count_ = index;
}

UNet2DCondition::~UNet2DCondition() = default;

Var UNet2DCondition::forward(const Var& sample, float timestep, const Var& context,
                             AttentionObserver* observer) const {
  const auto& m = *impl_;
  if (sample.value().rank() != 3 || sample.shape()[0] != config_.in_channels) {
    throw ShapeError("unet expects a latent [" + std::to_string(config_.in_channels) + ", H, W], got " +
                     shape_str(sample.shape()));
  }
  const int64_t factor = int64_t{1} << (config_.block_out_channels.size() - 1);
  if (sample.shape()[1] % factor != 0 || sample.shape()[2] % factor != 0) {
    throw ShapeError("latent side lengths must be multiples of " + std::to_string(factor));
  }
  if (context.value().rank() != 2 || context.shape()[1] != config_.cross_attention_dim) {
    throw ShapeError("context must be [tokens, " + std::to_string(config_.cross_attention_dim) + "], got " +
                     shape_str(context.shape()));
  }
  Var temb = ag::silu(m.time_linear_2(ag::silu(m.time_linear_1(Var(nn::timestep_features(
      timestep, config_.block_out_channels[0], config_.flip_sin_to_cos, config_.freq_shift))))));

  Var x = m.conv_in(sample);
  std::vector<Var> skips{x};
  for (const auto& b : m.down) {
    for (size_t j = 0; j < b.resnets.size(); ++j) {
      x = b.resnets[j](x, temb);
      if (!b.attentions.empty()) x = b.attentions[j](x, context, observer);
      skips.push_back(x);
    }
    if (b.resample) {
      x = (*b.resample)(x);
      skips.push_back(x);
    }
  }
  x = (*m.mid_res0)(x, temb);
  x = (*m.mid_attn)(x, context, observer);
  x = (*m.mid_res1)(x, temb);
  for (const auto& b : m.up) {
    for (size_t j = 0; j < b.resnets.size(); ++j) {
      x = ag::concat0(x, skips.back());
      skips.pop_back();
      x = b.resnets[j](x, temb);
      if (!b.attentions.empty()) x = b.attentions[j](x, context, observer);
    }
    if (b.resample) x = (*b.resample)(ag::upsample_nearest2x(x));
  }
  return m.conv_out(ag::silu(m.norm_out(x)));
}

std::vector<AttentionSite> site_table(const UNetConfig& c, int64_t latent_h, int64_t latent_w, int64_t context_len) {
  const int n = static_cast<int>(c.block_out_channels.size());
  std::vector<std::pair<int, BlockKind>> order;  // resolution level and block of each transformer
  for (int i = 0; i < n; ++i) {
    if (c.down_block_types[i] != "CrossAttnDownBlock2D") continue;
    for (int j = 0; j < c.layers_per_block; ++j) order.emplace_back(i, BlockKind::down);
  }
  order.emplace_back(n - 1, BlockKind::mid);
  for (int i = 0; i < n; ++i) {
    if (c.up_block_types[i] != "CrossAttnUpBlock2D") continue;
    for (int j = 0; j <= c.layers_per_block; ++j) order.emplace_back(n - 1 - i, BlockKind::up);
  }
  std::vector<AttentionSite> out;
  for (AttnKind kind : {AttnKind::self, AttnKind::cross}) {
    for (size_t i = 0; i < order.size(); ++i) {
      const auto [level, block] = order[i];
      const int64_t gh = latent_h >> level, gw = latent_w >> level;
      const int heads = c.num_attention_heads[static_cast<size_t>(level)];
      out.push_back({static_cast<int>(i) + 1, block, kind, gh * gw, kind == AttnKind::self ? gh * gw : context_len,
                     heads, gh, gw});
    }
  }
  return out;
}

std::vector<AttentionSite> UNet2DCondition::sites(int64_t latent_h, int64_t latent_w, int64_t context_len) const {
  return site_table(config_, latent_h, latent_w, context_len);
}

}  // namespace fpe
