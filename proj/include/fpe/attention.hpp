// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "fpe/sites.hpp"
#include "fpe/tensor.hpp"

namespace fpe {

// Site records as served by the API and stored in capture manifests.
nlohmann::json site_json(const AttentionSite& s);
AttentionSite site_from_json(const nlohmann::json& j);
BlockKind parse_block(const std::string& s);

class InjectionError : public Error {
 public:
  using Error::Error;
};

// softmax(Q K^T / sqrt(d)) row-wise. Q: [n, d], K: [m, d] -> [n, m].
Tensor compute_attention(const Tensor& q, const Tensor& k, int d);

struct AttentionMapRecord {
  AttentionSite site;
  int step = 0;  // denoising ordinal; -1 for a step-mean record
  Branch branch = Branch::single;
  int heads = 1;
  Tensor matrix;  // [heads, Q, K]
};

enum class Retention { all_steps, step_mean, sites_subset };
std::string to_string(Retention r);
Retention parse_retention(const std::string& s);

struct StoreKey {
  int step;
  Branch branch;
  AttnKind kind;
  int site;
  auto operator<=>(const StoreKey&) const = default;
};

/// Captured attention maps keyed by (step, branch, kind, site).
///
/// all_steps keeps every capture; sites_subset keeps every step but only the
/// listed site indices; step_mean keeps one running mean per (branch, kind,
/// site) under step -1. With half precision enabled, matrices are stored as
/// IEEE binary16, which bounds the per-entry error by about 2.5e-4 for the
/// [0, 1] range of attention probabilities and halves memory.
class CaptureStore {
 public:
  struct Options {
    Retention retention = Retention::all_steps;
    std::set<int> sites;               // sites_subset only; empty keeps all
    std::set<AttnKind> kinds{AttnKind::cross, AttnKind::self};
    std::optional<Branch> branch;      // keep only this branch when set
    bool half_precision = false;
  };

  CaptureStore() = default;
  explicit CaptureStore(Options options) : options_(std::move(options)) {}

  const Options& options() const { return options_; }
  bool wants(const AttentionSite& site, Branch branch) const;
  void record(const AttentionSite& site, const PassContext& ctx, const Tensor& probs);

  bool contains(const StoreKey& key) const { return entries_.count(key) > 0; }
  // Materialized record; throws InjectionError when absent.
  AttentionMapRecord get(const StoreKey& key) const;
  // Writes the stored matrix into `out`, which must already have its shape.
  void copy_into(const StoreKey& key, Tensor& out) const;
  std::vector<StoreKey> keys() const;
  // Highest step recorded for any site, or -1.
  int latest_step() const { return latest_step_; }
  size_t size() const { return entries_.size(); }
  size_t payload_bytes() const;
  void clear();

  // Tensor container plus a sibling JSON manifest.
  void save(const std::filesystem::path& container, const std::filesystem::path& manifest) const;
  static CaptureStore load(const std::filesystem::path& container);
  nlohmann::json manifest() const;

 private:
  struct Entry {
    AttentionSite site;
    int heads = 1;
    Shape shape;
    std::vector<float> f32;
    std::vector<uint16_t> f16;
    std::vector<double> sum;  // step_mean accumulator
    int count = 0;
  };

  const Entry& entry(const StoreKey& key) const;
  void materialize(const Entry& e, float* out) const;

  Options options_;
  std::map<StoreKey, Entry> entries_;
  int latest_step_ = -1;
};

/// Which maps a target run takes from a source store.
struct InjectionPolicy {
  std::set<AttnKind> kinds;
  std::optional<std::set<int>> sites;  // nullopt selects every site
  double replace_ratio = 1.0;
  // Separate window for cross maps; replace_ratio applies when unset.
  std::optional<double> cross_replace_ratio;
  std::optional<std::vector<int>> token_map;  // target key position -> source position (cross only)

  double ratio_for(AttnKind kind) const;
  // Number of leading denoising steps with injection: floor(r * T).
  int window_steps(int step_count, AttnKind kind = AttnKind::self) const;
  bool selects_site(const AttentionSite& site) const;
  bool active(const AttentionSite& site, int step, int step_count) const;
  bool empty() const { return kinds.empty(); }
  void validate() const;

  static InjectionPolicy fpe_default();  // self maps, sites 4..14, ratio 0.6
  static InjectionPolicy none();
  nlohmann::json to_json() const;
  static InjectionPolicy from_json(const nlohmann::json& j);
};

/// Observer attached to one denoising run: optionally injects maps from a
/// source store per policy, then optionally captures the (post-injection)
/// maps. One instance per job; not thread-safe.
class InstrumentSet final : public AttentionObserver {
 public:
  InstrumentSet(int step_count, CaptureStore* capture, const CaptureStore* inject_from = nullptr,
                const InjectionPolicy* policy = nullptr);

  void begin_pass(const PassContext& ctx) override;
  bool on_attention(const AttentionSite& site, Tensor& probs) override;

  const PassContext& context() const { return ctx_; }
  int injections() const { return injections_; }
  // Row-stochasticity check over every map seen; returns the worst row-sum
  // deviation so far.
  double max_row_deviation() const { return max_row_dev_; }
  void set_check_rows(bool on) { check_rows_ = on; }

 private:
  int step_count_;
  CaptureStore* capture_;
  const CaptureStore* inject_from_;
  const InjectionPolicy* policy_;
  PassContext ctx_;
  int injections_ = 0;
  bool check_rows_ = false;
  double max_row_dev_ = 0.0;
};

// Head-averaged [Q, K] matrix of a record.
Tensor head_mean(const AttentionMapRecord& record);
// Largest |row sum - 1| and whether every entry lies in [0, 1].
std::pair<double, bool> row_stochastic_error(const Tensor& probs);

struct SvdResult {
  std::vector<Tensor> heatmaps;  // [grid, grid] each, min-max normalized
  std::vector<double> singular_values;
};

// Top-k right singular vectors of the head-averaged self map, reshaped to
// the spatial grid.
SvdResult svd_components(const AttentionMapRecord& record, int k);

// Flat probe feature: a head-averaged cross-map column reshaped to the grid,
// or the head-averaged self map (bilinearly resized to 256x256 when
// spatial_len >= 256).
Tensor normalize_map_for_probe(const AttentionMapRecord& record, std::optional<int> token_position);
int64_t probe_feature_length(const AttentionSite& site);

// Min-max normalized [grid_h, grid_w] heatmap of one cross-map token column.
Tensor cross_heatmap(const AttentionMapRecord& record, int token_position);

}  // namespace fpe
