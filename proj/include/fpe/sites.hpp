// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fpe/tensor.hpp"

namespace fpe {

enum class BlockKind { down, mid, up };
enum class AttnKind { cross, self };
// Classifier-free-guidance branch a denoiser pass belongs to. `single` marks
// an unguided pass (no prompt, or a reconstruction branch).
enum class Branch { uncond, cond, single };

std::string to_string(BlockKind b);
std::string to_string(AttnKind k);
std::string to_string(Branch b);
AttnKind parse_attn_kind(const std::string& s);
Branch parse_branch(const std::string& s);

/// One addressable attention layer instance. Indices run 1..N in execution
/// order through the down, mid and up blocks; every transformer block owns one
/// self site and one cross site with the same index.
struct AttentionSite {
  int index = 0;
  BlockKind block = BlockKind::down;
  AttnKind kind = AttnKind::self;
  int64_t spatial_len = 0;  // query length
  int64_t context_len = 0;  // key length
  int heads = 1;
  int64_t grid_h = 0;
  int64_t grid_w = 0;

  bool operator==(const AttentionSite&) const = default;
};

struct PassContext {
  int step = 0;  // denoising ordinal, 0 = first (noisiest) step
  Branch branch = Branch::single;
};

/// Receives every attention probability tensor [heads, Q, K] as the denoiser
/// computes it. Returning true signals the tensor was overwritten in place.
class AttentionObserver {
 public:
  virtual ~AttentionObserver() = default;
  virtual void begin_pass(const PassContext& ctx) = 0;
  virtual bool on_attention(const AttentionSite& site, Tensor& probs) = 0;
};

}  // namespace fpe
