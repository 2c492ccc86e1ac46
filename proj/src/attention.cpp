// SPDX-License-Identifier: Apache-2.0
#include "fpe/attention.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>

#include "fpe/image.hpp"
#include "fpe/io.hpp"
#include "fpe/kernels.hpp"

namespace fpe {

using nlohmann::json;

Tensor compute_attention(const Tensor& q, const Tensor& k, int d) {
  if (d <= 0) throw ValidationError("attention feature dimension d must be positive, got " + std::to_string(d));
  if (q.rank() != 2 || k.rank() != 2) {
    throw ShapeError("compute_attention expects 2-D Q and K, got " + shape_str(q.shape()) + " and " +
                     shape_str(k.shape()));
  }
  if (q.dim(1) != k.dim(1) || k.dim(1) != d) {
    throw ShapeError("compute_attention: Q " + shape_str(q.shape()) + " and K " + shape_str(k.shape()) +
                     " disagree with d = " + std::to_string(d));
  }
  Tensor out({q.dim(0), k.dim(0)});
  kernels::attention_probs(kernels::view(q.data(), q.dim(0), d), kernels::view(k.data(), k.dim(0), d),
                           1.0f / std::sqrt(static_cast<float>(d)), false, out.data());
  return out;
}

std::string to_string(Retention r) {
  switch (r) {
    case Retention::all_steps:
      return "all_steps";
    case Retention::step_mean:
      return "step_mean";
    case Retention::sites_subset:
      return "sites_subset";
  }
  return "?";
}

Retention parse_retention(const std::string& s) {
  if (s == "all_steps") return Retention::all_steps;
  if (s == "step_mean") return Retention::step_mean;
  if (s == "sites_subset") return Retention::sites_subset;
  throw ValidationError("unknown retention '" + s + "' (expected all_steps, step_mean or sites_subset)");
}

// ---------------------------------------------------------------------------
// CaptureStore

bool CaptureStore::wants(const AttentionSite& site, Branch branch) const {
  if (!options_.kinds.count(site.kind)) return false;
  if (options_.branch && *options_.branch != branch) return false;
  if (options_.retention == Retention::sites_subset && !options_.sites.empty() && !options_.sites.count(site.index)) {
    return false;
  }
  return true;
}

void CaptureStore::record(const AttentionSite& site, const PassContext& ctx, const Tensor& probs) {
  if (!wants(site, ctx.branch)) return;
  const bool mean = options_.retention == Retention::step_mean;
  const StoreKey key{mean ? -1 : ctx.step, ctx.branch, site.kind, site.index};
  Entry& e = entries_[key];
  if (e.shape.empty()) {
    e.site = site;
    e.heads = static_cast<int>(probs.dim(0));
    e.shape = probs.shape();
  } else if (e.shape != probs.shape()) {
    throw ShapeError("capture shape changed at " + to_string(site.kind) + " site " + std::to_string(site.index));
  }
  const size_t n = static_cast<size_t>(probs.numel());
  if (mean) {
    if (e.sum.empty()) e.sum.assign(n, 0.0);
    for (size_t i = 0; i < n; ++i) e.sum[i] += probs[static_cast<int64_t>(i)];
    ++e.count;
  } else if (options_.half_precision) {
    e.f16.resize(n);
    for (size_t i = 0; i < n; ++i) e.f16[i] = io::float_to_half(probs[static_cast<int64_t>(i)]);
    e.count = 1;
  } else {
    e.f32.assign(probs.data(), probs.data() + n);
    e.count = 1;
  }
  latest_step_ = std::max(latest_step_, ctx.step);
}

const CaptureStore::Entry& CaptureStore::entry(const StoreKey& key) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) {
    throw InjectionError("no stored " + to_string(key.kind) + " map for site " + std::to_string(key.site) +
                         " at step " + std::to_string(key.step) + " (" + to_string(key.branch) + " branch)");
  }
  return it->second;
}

void CaptureStore::materialize(const Entry& e, float* out) const {
  const size_t n = static_cast<size_t>(shape_numel(e.shape));
  if (!e.sum.empty()) {
    for (size_t i = 0; i < n; ++i) out[i] = static_cast<float>(e.sum[i] / e.count);
  } else if (!e.f16.empty()) {
    for (size_t i = 0; i < n; ++i) out[i] = io::half_to_float(e.f16[i]);
  } else {
    std::copy(e.f32.begin(), e.f32.end(), out);
  }
}

AttentionMapRecord CaptureStore::get(const StoreKey& key) const {
  const Entry& e = entry(key);
  AttentionMapRecord r;
  r.site = e.site;
  r.step = key.step;
  r.branch = key.branch;
  r.heads = e.heads;
  r.matrix = Tensor(e.shape);
  materialize(e, r.matrix.data());
  return r;
}

void CaptureStore::copy_into(const StoreKey& key, Tensor& out) const {
  const Entry& e = entry(key);
  if (e.shape != out.shape()) {
    throw InjectionError("stored " + to_string(key.kind) + " map for site " + std::to_string(key.site) + " at step " +
                         std::to_string(key.step) + " has shape " + shape_str(e.shape) + " (" +
                         std::to_string(e.heads) + " heads) but the live map is " + shape_str(out.shape()));
  }
  materialize(e, out.data());
}

std::vector<StoreKey> CaptureStore::keys() const {
  std::vector<StoreKey> out;
  out.reserve(entries_.size());
  for (const auto& [k, _] : entries_) out.push_back(k);
  return out;
}

size_t CaptureStore::payload_bytes() const {
  size_t total = 0;
  for (const auto& [_, e] : entries_) {
    total += e.f32.size() * sizeof(float) + e.f16.size() * sizeof(uint16_t) + e.sum.size() * sizeof(double);
  }
  return total;
}

void CaptureStore::clear() {
  entries_.clear();
  latest_step_ = -1;
}

namespace {

std::string entry_name(const StoreKey& k) {
  return "step" + std::to_string(k.step) + "/" + to_string(k.branch) + "/" + to_string(k.kind) + "/" +
         std::to_string(k.site);
}

}  // namespace

json site_json(const AttentionSite& s) {
  return {{"index", s.index},           {"block", to_string(s.block)},     {"kind", to_string(s.kind)},
          {"spatial_len", s.spatial_len}, {"context_len", s.context_len}, {"heads", s.heads},
          {"grid_h", s.grid_h},           {"grid_w", s.grid_w}};
}

BlockKind parse_block(const std::string& s) {
  if (s == "down") return BlockKind::down;
  if (s == "mid") return BlockKind::mid;
  if (s == "up") return BlockKind::up;
  throw ValidationError("unknown block '" + s + "'");
}

AttentionSite site_from_json(const json& j) {
  AttentionSite s;
  s.index = j.at("index");
  s.block = parse_block(j.at("block"));
  s.kind = parse_attn_kind(j.at("kind"));
  s.spatial_len = j.at("spatial_len");
  s.context_len = j.at("context_len");
  s.heads = j.at("heads");
  s.grid_h = j.at("grid_h");
  s.grid_w = j.at("grid_w");
  return s;
}

json CaptureStore::manifest() const {
  json records = json::array();
  const bool half = options_.half_precision && options_.retention != Retention::step_mean;
  for (const auto& [k, e] : entries_) {
    records.push_back({{"name", entry_name(k)},
                       {"step", k.step},
                       {"branch", to_string(k.branch)},
                       {"site", site_json(e.site)},
                       {"shape", e.shape},
                       {"dtype", half ? "f16" : "f32"},
                       {"count", e.count}});
  }
  return {{"format", "fpe-capture-store"},
          {"version", 1},
          {"retention", to_string(options_.retention)},
          {"half_precision", options_.half_precision},
          {"records", records}};
}

void CaptureStore::save(const std::filesystem::path& container, const std::filesystem::path& manifest_path) const {
  std::vector<io::ContainerEntry> entries;
  const bool half = options_.half_precision && options_.retention != Retention::step_mean;
  for (const auto& [k, e] : entries_) {
    io::ContainerEntry ce;
    ce.name = entry_name(k);
    ce.tensor = Tensor(e.shape);
    materialize(e, ce.tensor.data());
    ce.dtype = half ? io::DType::f16 : io::DType::f32;
    entries.push_back(std::move(ce));
  }
  io::write_container(container, entries);
  io::write_text_atomic(manifest_path, manifest().dump(2));
}

CaptureStore CaptureStore::load(const std::filesystem::path& container) {
  auto manifest_path = container;
  manifest_path.replace_extension(".json");
  const json m = json::parse(io::read_text(manifest_path));
  Options opts;
  opts.retention = parse_retention(m.at("retention"));
  opts.half_precision = m.value("half_precision", false);
  CaptureStore store(opts);
  std::map<std::string, Tensor> tensors;
  for (auto& ce : io::read_container(container)) tensors.emplace(ce.name, std::move(ce.tensor));
  for (const auto& r : m.at("records")) {
    const AttentionSite site = site_from_json(r.at("site"));
    const StoreKey key{r.at("step").get<int>(), parse_branch(r.at("branch")), site.kind, site.index};
    auto it = tensors.find(r.at("name").get<std::string>());
    if (it == tensors.end()) throw io::IoError("capture container lacks entry " + r.at("name").get<std::string>());
    Entry& e = store.entries_[key];
    e.site = site;
    e.shape = it->second.shape();
    e.heads = static_cast<int>(e.shape.front());
    e.count = r.value("count", 1);
    if (opts.retention == Retention::step_mean) {
      e.sum.assign(it->second.storage().begin(), it->second.storage().end());
      for (auto& v : e.sum) v *= e.count;
    } else if (opts.half_precision) {
      e.f16.resize(static_cast<size_t>(it->second.numel()));
      for (size_t i = 0; i < e.f16.size(); ++i) e.f16[i] = io::float_to_half(it->second[static_cast<int64_t>(i)]);
    } else {
      e.f32 = std::move(it->second.storage());
    }
    store.latest_step_ = std::max(store.latest_step_, key.step);
  }
  return store;
}

// ---------------------------------------------------------------------------
// InjectionPolicy

double InjectionPolicy::ratio_for(AttnKind kind) const {
  return kind == AttnKind::cross && cross_replace_ratio ? *cross_replace_ratio : replace_ratio;
}

int InjectionPolicy::window_steps(int step_count, AttnKind kind) const {
  // The epsilon keeps products such as 0.6 * 50 from flooring to 29.
  return static_cast<int>(std::floor(ratio_for(kind) * step_count + 1e-9));
}

bool InjectionPolicy::selects_site(const AttentionSite& site) const {
  return kinds.count(site.kind) && (!sites || sites->count(site.index));
}

bool InjectionPolicy::active(const AttentionSite& site, int step, int step_count) const {
  return selects_site(site) && step >= 0 && step < window_steps(step_count, site.kind);
}

void InjectionPolicy::validate() const {
  if (!(replace_ratio >= 0.0 && replace_ratio <= 1.0)) throw ValidationError("replace_ratio must be in range [0,1]");
  if (cross_replace_ratio && !(*cross_replace_ratio >= 0.0 && *cross_replace_ratio <= 1.0)) {
    throw ValidationError("cross_replace_ratio must be in range [0,1]");
  }
  if (sites) {
    for (int s : *sites) {
      if (s < 1) throw ValidationError("site indices start at 1, got " + std::to_string(s));
    }
  }
  if (token_map && !kinds.count(AttnKind::cross)) throw ValidationError("token_map applies to cross injection only");
}

InjectionPolicy InjectionPolicy::fpe_default() {
  InjectionPolicy p;
  p.kinds = {AttnKind::self};
  std::set<int> s;
  for (int i = 4; i <= 14; ++i) s.insert(i);
  p.sites = s;
  p.replace_ratio = 0.6;
  return p;
}

InjectionPolicy InjectionPolicy::none() {
  InjectionPolicy p;
  p.replace_ratio = 0.0;
  return p;
}

json InjectionPolicy::to_json() const {
  json k = json::array();
  for (auto kind : kinds) k.push_back(to_string(kind));
  json j = {{"kinds", k}, {"replace_ratio", replace_ratio}};
  if (sites) {
    j["sites"] = std::vector<int>(sites->begin(), sites->end());
  } else {
    j["sites"] = "all";
  }
  if (cross_replace_ratio) j["cross_replace_ratio"] = *cross_replace_ratio;
  if (token_map) j["token_map"] = *token_map;
  return j;
}

InjectionPolicy InjectionPolicy::from_json(const json& j) {
  InjectionPolicy p = fpe_default();
  if (j.contains("kinds")) {
    p.kinds.clear();
    for (const auto& k : j.at("kinds")) p.kinds.insert(parse_attn_kind(k.get<std::string>()));
  }
  if (j.contains("sites")) {
    const auto& s = j.at("sites");
    if (s.is_string()) {
      const std::string text = s.get<std::string>();
      if (text == "all") {
        p.sites.reset();
      } else {
        const auto dash = text.find('-');
        if (dash == std::string::npos) throw ValidationError("sites must be \"all\", \"a-b\" or a list");
        int lo = 0, hi = 0;
        try {
          size_t used_lo = 0, used_hi = 0;
          lo = std::stoi(text.substr(0, dash), &used_lo);
          hi = std::stoi(text.substr(dash + 1), &used_hi);
          if (used_lo != dash || used_hi != text.size() - dash - 1) throw std::invalid_argument(text);
        } catch (const std::logic_error&) {
          throw ValidationError("sites range must look like 4-14, got \"" + text + "\"");
        }
        if (lo > hi) throw ValidationError("sites range " + text + " is empty");
        std::set<int> range;
        for (int i = lo; i <= hi; ++i) range.insert(i);
        p.sites = range;
      }
    } else {
      p.sites = s.get<std::set<int>>();
    }
  }
  p.replace_ratio = j.value("replace_ratio", p.replace_ratio);
  if (j.contains("cross_replace_ratio") && !j["cross_replace_ratio"].is_null()) {
    p.cross_replace_ratio = j["cross_replace_ratio"].get<double>();
  }
  if (j.contains("token_map") && !j["token_map"].is_null()) p.token_map = j["token_map"].get<std::vector<int>>();
  p.validate();
  return p;
}

// ---------------------------------------------------------------------------
// InstrumentSet

InstrumentSet::InstrumentSet(int step_count, CaptureStore* capture, const CaptureStore* inject_from,
                             const InjectionPolicy* policy)
    : step_count_(step_count), capture_(capture), inject_from_(inject_from), policy_(policy) {
  if (policy_ && !policy_->empty() && !inject_from_) {
    throw InjectionError("an injection policy needs a source capture store");
  }
}

void InstrumentSet::begin_pass(const PassContext& ctx) { ctx_ = ctx; }

bool InstrumentSet::on_attention(const AttentionSite& site, Tensor& probs) {
  bool replaced = false;
  if (inject_from_ && policy_ && policy_->active(site, ctx_.step, step_count_)) {
    StoreKey key{ctx_.step, ctx_.branch, site.kind, site.index};
    // A single-branch source (unguided reconstruction) feeds both guided
    // target branches.
    if (!inject_from_->contains(key)) key.branch = Branch::single;
    if (!inject_from_->contains(key)) key.branch = ctx_.branch;
    if (site.kind == AttnKind::cross && policy_->token_map) {
      const AttentionMapRecord src = inject_from_->get(key);
      if (src.heads != probs.dim(0) || src.matrix.dim(1) != probs.dim(1)) {
        throw InjectionError("head or query count mismatch at cross site " + std::to_string(site.index));
      }
      const auto& map = *policy_->token_map;
      const int64_t heads = probs.dim(0), rows = probs.dim(1), cols = probs.dim(2), src_cols = src.matrix.dim(2);
      for (int64_t h = 0; h < heads; ++h) {
        for (int64_t r = 0; r < rows; ++r) {
          for (int64_t c = 0; c < cols && c < static_cast<int64_t>(map.size()); ++c) {
            const int s = map[static_cast<size_t>(c)];
            if (s >= 0 && s < src_cols) probs[(h * rows + r) * cols + c] = src.matrix[(h * rows + r) * src_cols + s];
          }
        }
      }
    } else {
      inject_from_->copy_into(key, probs);
    }
    replaced = true;
    ++injections_;
  }
  if (check_rows_) max_row_dev_ = std::max(max_row_dev_, row_stochastic_error(probs).first);
  if (capture_ && capture_->wants(site, ctx_.branch)) capture_->record(site, ctx_, probs);
  return replaced;
}

// ---------------------------------------------------------------------------
// Map post-processing

Tensor head_mean(const AttentionMapRecord& record) {
  const Tensor& m = record.matrix;
  const int64_t heads = m.dim(0), q = m.dim(1), k = m.dim(2), n = q * k;
  Tensor out({q, k});
  for (int64_t h = 0; h < heads; ++h) {
    const float* src = m.data() + h * n;
    for (int64_t i = 0; i < n; ++i) out[i] += src[i];
  }
  out *= 1.0f / static_cast<float>(heads);
  return out;
}

std::pair<double, bool> row_stochastic_error(const Tensor& probs) {
  const int64_t cols = probs.dim(-1), rows = probs.numel() / cols;
  double worst = 0.0;
  bool in_range = true;
  for (int64_t r = 0; r < rows; ++r) {
    double sum = 0.0;
    for (int64_t c = 0; c < cols; ++c) {
      const float v = probs[r * cols + c];
      if (!(v >= 0.0f && v <= 1.0f)) in_range = false;
      sum += v;
    }
    worst = std::max(worst, std::abs(sum - 1.0));
  }
  return {worst, in_range};
}

namespace {

void min_max_normalize(Tensor& t) {
  if (t.empty()) return;
  const auto [lo, hi] = std::minmax_element(t.storage().begin(), t.storage().end());
  const float mn = *lo, span = *hi - *lo;
  for (auto& v : t.storage()) v = span > 0.0f ? (v - mn) / span : 0.0f;
}

void check_square_grid(const AttentionSite& site) {
  if (site.grid_h != site.grid_w || site.grid_h * site.grid_w != site.spatial_len) {
    throw ShapeError("site " + std::to_string(site.index) + " has a non-square spatial grid " +
                     std::to_string(site.grid_h) + "x" + std::to_string(site.grid_w));
  }
}

}  // namespace

SvdResult svd_components(const AttentionMapRecord& record, int k) {
  if (record.site.kind != AttnKind::self) throw ValidationError("svd_components needs a self-attention record");
  check_square_grid(record.site);
  const Tensor mean = head_mean(record);
  const int64_t n = mean.dim(0);
  if (mean.dim(1) != n) throw ShapeError("self map must be square, got " + shape_str(mean.shape()));
  if (k < 1 || k > n) throw ValidationError("k must be in [1, " + std::to_string(n) + "], got " + std::to_string(k));

  using Mat = Eigen::MatrixXd;
  const Mat a = Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
                    mean.data(), n, n)
                    .cast<double>();
  // Deterministic subspace iteration on A^T A. The all-ones first column
  // makes exactly degenerate spectra (such as the identity) resolve to the
  // spatially uniform vector.
  const int64_t p = std::min<int64_t>(n, k + 8);
  Mat v(n, p);
  Rng rng(0x5eedULL);
  for (int64_t i = 0; i < n; ++i) {
    v(i, 0) = 1.0;
    for (int64_t j = 1; j < p; ++j) v(i, j) = rng.normal();
  }
  auto orthonormalize = [&](const Mat& m) {
    Eigen::HouseholderQR<Mat> qr(m);
    Mat q = qr.householderQ() * Mat::Identity(m.rows(), m.cols());
    // Householder QR may flip column signs; align with the input columns so
    // an invariant subspace is a fixed point.
    for (int64_t j = 0; j < q.cols(); ++j) {
      if (q.col(j).dot(m.col(j)) < 0.0) q.col(j) *= -1.0;
    }
    return q;
  };
  v = orthonormalize(v);
  Eigen::VectorXd prev = Eigen::VectorXd::Zero(p);
  Mat w;
  for (int it = 0; it < 500; ++it) {
    w = a * v;
    Eigen::SelfAdjointEigenSolver<Mat> es(w.transpose() * w, Eigen::EigenvaluesOnly);
    const Eigen::VectorXd vals = es.eigenvalues().reverse();
    const double change = (vals.head(k) - prev.head(k)).cwiseAbs().maxCoeff();
    prev = vals;
    if (it > 0 && change <= 1e-12 * std::max(1.0, vals(0))) break;
    v = orthonormalize(a.transpose() * w);
  }
  w = a * v;
  const Mat gram = w.transpose() * w;
  Eigen::SelfAdjointEigenSolver<Mat> es(gram);
  const Eigen::VectorXd vals = es.eigenvalues();
  Mat rot = es.eigenvectors();
  std::vector<int64_t> order(static_cast<size_t>(p));
  std::iota(order.begin(), order.end(), 0);
  if (vals.maxCoeff() - vals.minCoeff() <= 1e-9 * std::max(1.0, vals.maxCoeff())) {
    // Fully degenerate: every rotation is a valid basis, keep the iterate.
    rot = Mat::Identity(p, p);
  } else {
    std::stable_sort(order.begin(), order.end(), [&](int64_t x, int64_t y) { return vals(x) > vals(y); });
  }
  const Mat basis = v * rot;

  SvdResult out;
  const int64_t g = record.site.grid_h;
  for (int c = 0; c < k; ++c) {
    const int64_t col = order[static_cast<size_t>(c)];
    Eigen::VectorXd u = basis.col(col);
    Eigen::Index arg = 0;
    u.cwiseAbs().maxCoeff(&arg);
    if (u(arg) < 0.0) u = -u;
    Tensor map({g, g});
    for (int64_t i = 0; i < n; ++i) map[i] = static_cast<float>(u(i));
    min_max_normalize(map);
    out.heatmaps.push_back(std::move(map));
    out.singular_values.push_back(std::sqrt(std::max(0.0, vals(col))));
  }
  return out;
}

int64_t probe_feature_length(const AttentionSite& site) {
  if (site.kind == AttnKind::cross) return site.spatial_len;
  return site.spatial_len >= 256 ? 256 * 256 : site.spatial_len * site.spatial_len;
}

Tensor normalize_map_for_probe(const AttentionMapRecord& record, std::optional<int> token_position) {
  const Tensor mean = head_mean(record);
  const int64_t q = mean.dim(0), k = mean.dim(1);
  if (record.site.kind == AttnKind::cross) {
    if (!token_position) throw ValidationError("cross-map probe features need a token position");
    if (*token_position < 0 || *token_position >= k) {
      throw ValidationError("token position " + std::to_string(*token_position) + " outside [0, " +
                            std::to_string(k) + ")");
    }
    Tensor out({q});
    for (int64_t i = 0; i < q; ++i) out[i] = mean[i * k + *token_position];
    return out;
  }
  if (token_position) throw ValidationError("self-map probe features take no token position");
  if (q >= 256) return bilinear_resize_2d(mean, 256, 256).reshaped({256 * 256});
  return mean.reshaped({q * k});
}

Tensor cross_heatmap(const AttentionMapRecord& record, int token_position) {
  check_square_grid(record.site);
  Tensor col = normalize_map_for_probe(record, token_position);
  Tensor grid = std::move(col).reshaped({record.site.grid_h, record.site.grid_w});
  min_max_normalize(grid);
  return grid;
}

}  // namespace fpe
