// SPDX-License-Identifier: Apache-2.0
#include "fpe/eval.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <sstream>

#include "fpe/io.hpp"
#include "fpe/probing.hpp"

namespace fpe {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(DatasetId id) {
  switch (id) {
    case DatasetId::car_fake:
      return "car_fake";
    case DatasetId::car_real:
      return "car_real";
    case DatasetId::imagenet_fake:
      return "imagenet_fake";
    case DatasetId::imagenet_real:
      return "imagenet_real";
  }
  return "?";
}

DatasetId parse_dataset_id(const std::string& s) {
  for (auto id : {DatasetId::car_fake, DatasetId::car_real, DatasetId::imagenet_fake, DatasetId::imagenet_real}) {
    if (to_string(id) == s) return id;
  }
  throw ValidationError("unknown dataset '" + s + "' (expected car_fake, car_real, imagenet_fake or imagenet_real)");
}

json EditPair::to_json() const {
  json src = source.type == EditSource::Type::seeded_prompt
                 ? json{{"type", "seeded_prompt"}, {"seed", source.seed}, {"prompt", source.prompt}}
                 : json{{"type", "real_image"}, {"path", source.image_path}, {"prompt", source.prompt}};
  return {{"pair_id", pair_id},
          {"dataset", to_string(dataset)},
          {"source", src},
          {"source_prompt", source_prompt},
          {"target_prompt", target_prompt}};
}

// ---------------------------------------------------------------------------
// Datasets

namespace {

std::string fill(const std::string& tmpl, const std::string& word) {
  const auto at = tmpl.find("{}");
  return tmpl.substr(0, at) + word + tmpl.substr(at + 2);
}

std::string with_article(const std::string& noun) {
  const bool vowel = std::string("aeiou").find(noun.front()) != std::string::npos;
  return (vowel ? "an " : "a ") + noun;
}

std::vector<std::string> colors_for(const DatasetOptions& options) {
  std::vector<std::string> colors = words::edit_colors();
  if (options.color_limit) {
    if (*options.color_limit < 1 || *options.color_limit > static_cast<int>(colors.size())) {
      throw ValidationError("color_limit must be in range [1," + std::to_string(colors.size()) + "]");
    }
    colors.resize(static_cast<size_t>(*options.color_limit));
  }
  return colors;
}

json read_asset(const fs::path& assets_dir, const char* name, DatasetId id) {
  const fs::path p = assets_dir / name;
  if (!fs::exists(p)) {
    throw ValidationError("dataset " + to_string(id) + " needs the asset file " + p.string() +
                          " (see README, 'Evaluation assets')");
  }
  return json::parse(io::read_text(p));
}

void require_images(const fs::path& assets_dir, const std::vector<std::string>& images, DatasetId id) {
  std::vector<std::string> missing;
  for (const auto& rel : images) {
    if (!fs::exists(assets_dir / rel)) missing.push_back((assets_dir / rel).string());
  }
  if (missing.empty()) return;
  std::string msg = "dataset " + to_string(id) + " is missing " + std::to_string(missing.size()) + " image(s):";
  for (const auto& m : missing) msg += "\n  " + m;
  throw ValidationError(msg);
}

EditPair seeded_pair(DatasetId id, size_t index, const DatasetOptions& options, std::string src, std::string dst) {
  EditPair p;
  p.pair_id = to_string(id) + "-" + std::to_string(index);
  p.dataset = id;
  p.source.type = EditSource::Type::seeded_prompt;
  p.source.seed = options.base_seed + index;
  p.source.prompt = src;
  p.source_prompt = std::move(src);
  p.target_prompt = std::move(dst);
  return p;
}

EditPair image_pair(DatasetId id, size_t index, const fs::path& image, std::string src, std::string dst) {
  EditPair p;
  p.pair_id = to_string(id) + "-" + std::to_string(index);
  p.dataset = id;
  p.source.type = EditSource::Type::real_image;
  p.source.image_path = image.string();
  p.source.prompt = src;
  p.source_prompt = std::move(src);
  p.target_prompt = std::move(dst);
  return p;
}

}  // namespace

std::vector<EditPair> build_dataset(DatasetId id, const fs::path& assets_dir, const DatasetOptions& options) {
  std::vector<EditPair> pairs;
  switch (id) {
    case DatasetId::car_fake: {
      const auto colors = colors_for(options);
      for (const auto& src : colors) {
        for (const auto& dst : colors) {
          if (src == dst) continue;
          pairs.push_back(seeded_pair(id, pairs.size(), options, "a " + src + " car", "a " + dst + " car"));
        }
      }
      break;
    }
    case DatasetId::car_real: {
      const auto colors = colors_for(options);
      const json asset = read_asset(assets_dir, kCarRealAsset, id);
      std::vector<std::string> images;
      for (const auto& e : asset) images.push_back(e.at("image").get<std::string>());
      require_images(assets_dir, images, id);
      for (const auto& e : asset) {
        if (!e.contains("color")) {
          throw ValidationError("car_real entry " + e.at("image").get<std::string>() +
                                " has no source color; run `fpe_cli dataset align-colors` first");
        }
        const std::string src = e.at("color");
        for (const auto& dst : colors) {
          if (dst == src) continue;
          pairs.push_back(image_pair(id, pairs.size(), assets_dir / e.at("image").get<std::string>(),
                                     "a " + src + " car", "a " + dst + " car"));
        }
      }
      break;
    }
    case DatasetId::imagenet_fake: {
      const json queries = read_asset(assets_dir, kFlexitAsset, id);
      const auto& templates = words::imagenet_templates();
      auto add = [&](const std::string& src, const std::string& dst) {
        const std::string& tmpl = templates[pairs.size() % templates.size()];
        pairs.push_back(seeded_pair(id, pairs.size(), options, fill(tmpl, src), fill(tmpl, dst)));
      };
      for (const auto& q : queries) add(q.at("source"), q.at("target"));
      for (const auto& src : words::animals()) {
        for (const auto& dst : words::animals()) {
          if (src != dst) add(src, dst);
        }
      }
      break;
    }
    case DatasetId::imagenet_real: {
      const json queries = read_asset(assets_dir, kFlexitAsset, id);
      std::vector<std::string> images;
      for (const auto& q : queries) {
        if (!q.contains("image")) {
          throw ValidationError("imagenet_real needs an \"image\" field on every entry of " +
                                (assets_dir / kFlexitAsset).string());
        }
        images.push_back(q.at("image"));
      }
      require_images(assets_dir, images, id);
      for (const auto& q : queries) {
        pairs.push_back(image_pair(id, pairs.size(), assets_dir / q.at("image").get<std::string>(),
                                   "a photo of " + with_article(q.at("source")),
                                   "a photo of " + with_article(q.at("target"))));
      }
      break;
    }
  }
  return pairs;
}

json dataset_manifest(DatasetId id, const std::vector<EditPair>& pairs) {
  json rows = json::array();
  for (const auto& p : pairs) rows.push_back(p.to_json());
  return {{"format", "fpe-edit-dataset"}, {"version", 1}, {"dataset", to_string(id)}, {"count", pairs.size()},
          {"pairs", rows}};
}

// ---------------------------------------------------------------------------
// CLIP scorer

namespace {

Tensor project(const Tensor& w, const Tensor& x) {
  const int64_t out = w.dim(0), in = w.dim(1);
  if (x.numel() != in) throw ShapeError("projection expects " + std::to_string(in) + " inputs");
  Tensor y({out});
  for (int64_t i = 0; i < out; ++i) {
    double s = 0.0;
    for (int64_t j = 0; j < in; ++j) s += static_cast<double>(w[i * in + j]) * x[j];
    y[i] = static_cast<float>(s);
  }
  return y;
}

}  // namespace

ClipScorer::ClipScorer(std::string id, const ClipTextConfig& text_cfg, const ClipVisionConfig& vision_cfg,
                       int projection_dim, nn::ParamSource& params, std::unique_ptr<Tokenizer> tokenizer)
    : id_(std::move(id)),
      text_(text_cfg, params, "text_model."),
      vision_(vision_cfg, params, "vision_model."),
      text_projection_(params.take("text_projection.weight", {projection_dim, text_cfg.hidden_size}, nn::Init::fan_in)),
      visual_projection_(
          params.take("visual_projection.weight", {projection_dim, vision_cfg.hidden_size}, nn::Init::fan_in)),
      tokenizer_(std::move(tokenizer)) {}

fs::path clip_root() {
  if (const char* env = std::getenv("FPE_CLIP_DIR")) return env;
  const char* home = std::getenv("HOME");
  return fs::path(home ? home : ".") / ".cache" / "fpe" / "clip-vit-large-patch14";
}

std::unique_ptr<ClipScorer> ClipScorer::load(const fs::path& dir) {
  for (const char* f : {"config.json", "model.safetensors", "vocab.json", "merges.txt"}) {
    if (!fs::exists(dir / f)) throw io::IoError("missing weights file " + (dir / f).string());
  }
  const json cfg = json::parse(io::read_text(dir / "config.json"));
  const ClipTextConfig tc = ClipTextConfig::from_json(cfg.at("text_config"));
  const ClipVisionConfig vc = ClipVisionConfig::from_json(cfg.at("vision_config"));
  const int proj = cfg.value("projection_dim", 768);
  nn::LoadedParams params(io::load_safetensors(dir / "model.safetensors"), (dir / "model.safetensors").string());
  auto tok = BpeTokenizer::from_files(dir / "vocab.json", dir / "merges.txt", tc.max_positions);
  const std::string id = cfg.value("_name_or_path", std::string(kPinnedClipId));
  return std::make_unique<ClipScorer>(id.empty() ? kPinnedClipId : id, tc, vc, proj, params, std::move(tok));
}

std::unique_ptr<ClipScorer> ClipScorer::tiny(uint64_t seed) {
  ClipTextConfig tc;
  tc.vocab_size = 1000;
  tc.hidden_size = 32;
  tc.intermediate_size = 64;
  tc.num_layers = 2;
  tc.num_heads = 2;
  tc.max_positions = 16;
  ClipVisionConfig vc;
  vc.hidden_size = 32;
  vc.intermediate_size = 64;
  vc.num_layers = 2;
  vc.num_heads = 2;
  vc.image_size = 32;
  vc.patch_size = 8;
  nn::RandomParams params(seed);
  return std::make_unique<ClipScorer>("tiny-clip", tc, vc, 16, params,
                                      std::make_unique<WordTokenizer>(tc.vocab_size, tc.max_positions));
}

Tensor ClipScorer::preprocess(const Image& image) const {
  static const float kMean[3] = {0.48145466f, 0.4578275f, 0.40821073f};
  static const float kStd[3] = {0.26862954f, 0.26130258f, 0.27577711f};
  const int s = vision_.config().image_size;
  const double scale = static_cast<double>(s) / std::min(image.width, image.height);
  const int w = std::max(s, static_cast<int>(std::lround(image.width * scale)));
  const int h = std::max(s, static_cast<int>(std::lround(image.height * scale)));
  const Image fitted = center_crop(resize(image, w, h, Filter::bicubic), s, s);
  Tensor px({3, s, s});
  const int64_t plane = static_cast<int64_t>(s) * s;
  for (int64_t i = 0; i < plane; ++i) {
    for (int c = 0; c < 3; ++c) {
      const float v = fitted.rgb[static_cast<size_t>(i * 3 + c)] / 255.0f;
      px[c * plane + i] = (v - kMean[c]) / kStd[c];
    }
  }
  return px;
}

Tensor ClipScorer::embed_image(const Image& image) const {
  return project(visual_projection_, vision_.pooled(preprocess(image)));
}

Tensor ClipScorer::embed_text(const std::string& text) const {
  if (text.empty()) throw ValidationError("clip score needs a non-empty text");
  const TokenizedPrompt tp = tokenizer_->encode(text);
  return project(text_projection_, text_.pooled(tp.ids, tokenizer_->eos_id()));
}

// ---------------------------------------------------------------------------
// Metrics

namespace {

std::vector<double> unit(const Tensor& t) {
  double n = 0.0;
  for (float v : t.storage()) n += static_cast<double>(v) * v;
  n = std::sqrt(n);
  if (!(n > 0.0)) throw ValidationError("embedding has zero norm");
  std::vector<double> out(static_cast<size_t>(t.numel()));
  for (size_t i = 0; i < out.size(); ++i) out[i] = t[static_cast<int64_t>(i)] / n;
  return out;
}

void require_same_size(const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel()) throw ShapeError("embedding sizes differ: " + shape_str(a.shape()) + " vs " +
                                               shape_str(b.shape()));
}

}  // namespace

double cosine_similarity(const Tensor& a, const Tensor& b) {
  require_same_size(a, b);
  const auto ua = unit(a), ub = unit(b);
  double dot = 0.0;
  for (size_t i = 0; i < ua.size(); ++i) dot += ua[i] * ub[i];
  return dot;
}

double clip_score(const Tensor& image_embedding, const Tensor& text_embedding) {
  return 100.0 * std::max(cosine_similarity(image_embedding, text_embedding), 0.0);
}

std::optional<double> clip_directional_similarity(const Tensor& src_image, const Tensor& dst_image,
                                                  const Tensor& src_text, const Tensor& dst_text) {
  require_same_size(src_image, dst_image);
  require_same_size(src_text, dst_text);
  require_same_size(src_image, src_text);
  const auto si = unit(src_image), di = unit(dst_image), st = unit(src_text), dt = unit(dst_text);
  double dot = 0.0, ni = 0.0, nt = 0.0;
  for (size_t i = 0; i < si.size(); ++i) {
    const double a = di[i] - si[i], b = dt[i] - st[i];
    dot += a * b;
    ni += a * a;
    nt += b * b;
  }
  // Embeddings are float32, so unit-vector deltas below this norm are
  // rounding noise (a rescaled copy of the same embedding lands near 1e-7).
  constexpr double kZero = 1e-6;
  if (ni <= kZero * kZero || nt <= kZero * kZero) return std::nullopt;
  return dot / (std::sqrt(ni) * std::sqrt(nt));
}

std::string align_car_color(const ImageTextEmbedder& scorer, const Image& image,
                            const std::vector<std::string>& colors) {
  if (colors.empty()) throw ValidationError("align_car_color needs at least one color");
  const Tensor img = scorer.embed_image(image);
  std::string best;
  double best_sim = -2.0;
  for (const auto& c : colors) {
    const double sim = cosine_similarity(img, scorer.embed_text("a " + c + " car"));
    if (sim > best_sim) {
      best_sim = sim;
      best = c;
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Benchmark

int MetricTable::successes() const {
  int n = 0;
  for (const auto& r : rows) n += r.ok;
  return n;
}

int MetricTable::cds_count() const {
  int n = 0;
  for (const auto& r : rows) n += r.ok && r.cds.has_value();
  return n;
}

double MetricTable::mean_cs() const {
  double s = 0.0;
  for (const auto& r : rows) {
    if (r.ok) s += r.cs;
  }
  return successes() ? s / successes() : 0.0;
}

double MetricTable::mean_cds() const {
  double s = 0.0;
  for (const auto& r : rows) {
    if (r.ok && r.cds) s += *r.cds;
  }
  return cds_count() ? s / cds_count() : 0.0;
}

double MetricTable::mean_edit_seconds() const {
  double s = 0.0;
  for (const auto& r : rows) {
    if (r.ok) s += r.edit_seconds;
  }
  return successes() ? s / successes() : 0.0;
}

namespace {

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace

std::string MetricTable::to_csv() const {
  std::ostringstream os;
  os << "pair_id,status,cs,cds,edit_seconds,denoise_seconds,error\n";
  for (const auto& r : rows) {
    os << csv_field(r.pair_id) << ',' << (r.ok ? "ok" : "failed") << ',' << (r.ok ? num(r.cs) : "") << ','
       << (r.ok && r.cds ? num(*r.cds) : "") << ',' << (r.ok ? num(r.edit_seconds) : "") << ','
       << (r.ok ? num(r.denoise_seconds) : "") << ',' << csv_field(r.error) << '\n';
  }
  return os.str();
}

json MetricTable::summary_json() const {
  return {{"dataset", dataset},
          {"encoder", encoder_id},
          {"method", method},
          {"pairs", rows.size()},
          {"successes", successes()},
          {"failures", static_cast<int>(rows.size()) - successes()},
          {"cds_defined", cds_count()},
          {"mean_cs", mean_cs()},
          {"mean_cds", mean_cds()},
          {"mean_edit_seconds", mean_edit_seconds()}};
}

std::string MetricTable::summary() const {
  char buf[256];
  std::ostringstream os;
  os << "Method  Dataset         CS      CDS     Time(s)  OK/Total\n";
  std::snprintf(buf, sizeof buf, "%-7s %-14s %6.2f  %7.4f  %7.2f  %d/%zu\n", method.value("method", "fpe").c_str(),
                dataset.c_str(), mean_cs(), mean_cds(), mean_edit_seconds(), successes(), rows.size());
  os << buf << "encoder: " << encoder_id << '\n';
  return os.str();
}

MetricTable benchmark_run(const ModelAdapter& model, const ImageTextEmbedder& scorer,
                          const std::vector<EditPair>& pairs, const EditJob& method,
                          const BenchmarkOptions& options) {
  MetricTable table;
  table.encoder_id = scorer.id();
  table.method = method.to_json();
  table.method.erase("source");
  table.method.erase("target_prompt");
  if (!pairs.empty()) table.dataset = to_string(pairs.front().dataset);
  size_t n = pairs.size();
  if (options.limit) n = std::min(n, static_cast<size_t>(std::max(0, *options.limit)));
  if (!options.out_dir.empty()) fs::create_directories(options.out_dir / "images");
  for (size_t i = 0; i < n; ++i) {
    const EditPair& pair = pairs[i];
    MetricRow row;
    row.pair_id = pair.pair_id;
    try {
      EditJob job = method;
      job.source = pair.source;
      job.target_prompt = pair.target_prompt;
      if (pair.source.type == EditSource::Type::seeded_prompt) job.sampler.seed = pair.source.seed;
      const EditOutcome out = run_edit(model, job);
      row.edit_seconds = out.edit_seconds;
      row.denoise_seconds = out.denoise_seconds;
      const Tensor dst_img = scorer.embed_image(out.edited);
      row.cs = clip_score(dst_img, scorer.embed_text(pair.target_prompt));
      if (!pair.source_prompt.empty()) {
        row.cds = clip_directional_similarity(scorer.embed_image(out.source_image), dst_img,
                                              scorer.embed_text(pair.source_prompt),
                                              scorer.embed_text(pair.target_prompt));
      }
      if (!options.out_dir.empty()) write_png(options.out_dir / "images" / (pair.pair_id + ".png"), out.edited);
    } catch (const std::exception& e) {
      row.ok = false;
      row.error = e.what();
    }
    table.rows.push_back(std::move(row));
  }
  if (!options.out_dir.empty()) {
    io::write_text_atomic(options.out_dir / "metrics.csv", table.to_csv());
    io::write_text_atomic(options.out_dir / "summary.json", table.summary_json().dump(2));
  }
  return table;
}

}  // namespace fpe
