// SPDX-License-Identifier: Apache-2.0
#include "fpe/probing.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "fpe/io.hpp"

namespace fpe {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Names

std::string to_string(CorpusFamily f) {
  switch (f) {
    case CorpusFamily::color_car:
      return "color_car";
    case CorpusFamily::color_object:
      return "color_object";
    case CorpusFamily::animal_park:
      return "animal_park";
    case CorpusFamily::complex_color:
      return "complex_color";
    case CorpusFamily::token_probe:
      return "token_probe";
  }
  return "?";
}

std::string to_string(TokenRole r) {
  switch (r) {
    case TokenRole::edit_word:
      return "edit_word";
    case TokenRole::article_a:
      return "article_a";
    case TokenRole::noun_car:
      return "noun_car";
  }
  return "?";
}

CorpusFamily parse_corpus_family(const std::string& s) {
  for (auto f : {CorpusFamily::color_car, CorpusFamily::color_object, CorpusFamily::animal_park,
                 CorpusFamily::complex_color, CorpusFamily::token_probe}) {
    if (to_string(f) == s) return f;
  }
  throw ValidationError("unknown corpus family '" + s +
                        "' (expected color_car, color_object, animal_park, complex_color or token_probe)");
}

TokenRole parse_token_role(const std::string& s) {
  for (auto r : {TokenRole::edit_word, TokenRole::article_a, TokenRole::noun_car}) {
    if (to_string(r) == s) return r;
  }
  throw ValidationError("unknown token role '" + s + "' (expected edit_word, article_a or noun_car)");
}

std::string CellKey::name() const { return to_string(kind) + "/" + std::to_string(layer) + "/" + to_string(role); }

// ---------------------------------------------------------------------------
// Word lists

namespace words {

const std::vector<std::string>& probe_colors() {
  static const std::vector<std::string> v{"red",  "blue",   "green", "yellow", "brown",
                                          "pink", "purple", "black", "white",  "orange"};
  return v;
}

const std::vector<std::string>& animals() {
  static const std::vector<std::string> v{"dog",   "giraffe", "horse",  "lion",    "rabbit",
                                          "sheep", "cat",     "monkey", "leopard", "tiger"};
  return v;
}

// The published list shows its first ten and last twenty-five entries; the
// middle sixty-five are everyday objects chosen for this toolkit.
const std::vector<std::string>& objects() {
  static const std::vector<std::string> v{
      "apple",     "banana",   "carrot",     "dog",        "flower",     "giraffe",   "hat",       "car",
      "train",     "bicycle",  "chair",      "table",      "lamp",       "clock",     "book",      "pen",
      "bottle",    "umbrella", "backpack",   "shoe",       "boot",       "sock",      "shirt",     "dress",
      "guitar",    "piano",    "drum",       "violin",     "ball",       "kite",      "balloon",   "bucket",
      "basket",    "bowl",     "plate",      "spoon",      "fork",       "knife",     "teapot",    "kettle",
      "vase",      "candle",   "pillow",     "blanket",    "sofa",       "bed",       "door",      "window",
      "mirror",    "phone",    "laptop",     "camera",     "television", "radio",     "key",       "wallet",
      "ring",      "necklace", "glasses",    "helmet",     "boat",       "airplane",  "bus",       "truck",
      "motorcycle", "tractor", "rocket",     "house",      "bridge",     "tower",     "tent",      "fence",
      "bench",     "mailbox",  "pumpkin",    "yak",        "acorn",      "bear",      "caterpillar", "turtle",
      "dandelion", "elephant", "feather",    "grape",      "hedgehog",   "inchworm",  "jackfruit", "kiwi",
      "lemon",     "zebra",    "mushroom",   "otter",      "peacock",    "rose",      "strawberry", "volcano",
      "watermelon", "xenops",  "yucca",      "cup"};
  return v;
}

// Published first three and last three; the middle six are toolkit choices.
const std::vector<std::string>& complex_templates() {
  static const std::vector<std::string> v{"a photo of a {} car and a dog",
                                          "a photo of {} car",
                                          "the painting of a {} car",
                                          "a {} car parked on the street",
                                          "a picture of a {} car in the city",
                                          "a {} car on the road",
                                          "a drawing of a {} car",
                                          "an old {} car near a house",
                                          "a small {} car in the snow",
                                          "a cool painting of an old {} car",
                                          "a man and a {} car",
                                          "a {} car and a dog"};
  return v;
}

const std::vector<std::string>& edit_colors() {
  static const std::vector<std::string> v{
      "red",   "green",  "blue",   "yellow", "orange", "purple", "pink",   "black",     "white",     "gray",
      "brown", "beige",  "cyan",   "magenta", "teal",  "lime",   "olive",  "navy",      "maroon",    "silver",
      "gold",  "bronze", "peach",  "coral",  "indigo", "violet", "turquoise", "chocolate"};
  return v;
}

const std::vector<std::string>& imagenet_templates() {
  static const std::vector<std::string> v{"a photo of a {}",
                                          "a rendering of a {}",
                                          "a cropped photo of the {}",
                                          "the photo of a {}",
                                          "a photo of a clean {}",
                                          "a photo of a dirty {}",
                                          "a dark photo of the {}",
                                          "a photo of my {}",
                                          "a photo of the cool {}",
                                          "a close-up photo of a {}",
                                          "a bright photo of the {}",
                                          "a cropped photo of a {}",
                                          "a photo of the {}",
                                          "a good photo of the {}",
                                          "a photo of one {}",
                                          "a close-up photo of the {}",
                                          "a rendition of the {}",
                                          "a photo of the clean {}",
                                          "a rendition of a {}",
                                          "a photo of a nice {}",
                                          "a good photo of a {}",
                                          "a photo of the nice {}",
                                          "a photo of the small {}",
                                          "a photo of the weird {}",
                                          "a photo of the large {}",
                                          "a photo of a cool {}",
                                          "a photo of a small {}",
                                          "a {} in the park"};
  return v;
}

}  // namespace words

// ---------------------------------------------------------------------------
// Corpora

namespace {

std::string fill(const std::string& tmpl, const std::string& word) {
  const auto at = tmpl.find("{}");
  return tmpl.substr(0, at) + word + tmpl.substr(at + 2);
}

std::string article_for(const std::string& noun) {
  return std::string("aeiou").find(noun.front()) != std::string::npos ? "an" : "a";
}

int find_word(const TokenizedPrompt& tp, const std::string& word) {
  for (const auto& span : tp.words) {
    if (span.word == word) return span.positions.front();
  }
  return -1;
}

CorpusPrompt make_prompt(const Tokenizer& tokenizer, std::string text, int label, uint64_t seed,
                         const std::string& target) {
  CorpusPrompt p;
  p.prompt = std::move(text);
  p.label = label;
  p.seed = seed;
  p.target_word = target;
  const TokenizedPrompt tp = tokenizer.encode(p.prompt);
  p.positions[TokenRole::edit_word] = tp.position_of(target);
  p.multi_token = tp.is_multi_token(target);
  if (int a = find_word(tp, "a"); a >= 0) p.positions[TokenRole::article_a] = a;
  if (int c = find_word(tp, "car"); c >= 0 && target != "car") p.positions[TokenRole::noun_car] = c;
  return p;
}

}  // namespace

std::vector<std::string> PromptCorpus::multi_token_words() const {
  std::set<std::string> out;
  for (const auto& p : prompts) {
    if (p.multi_token) out.insert(p.target_word);
  }
  return {out.begin(), out.end()};
}

json PromptCorpus::to_json() const {
  json rows = json::array();
  for (const auto& p : prompts) {
    json pos = json::object();
    for (const auto& [role, at] : p.positions) pos[to_string(role)] = at;
    rows.push_back({{"prompt", p.prompt}, {"label", p.label}, {"seed", p.seed}, {"target", p.target_word},
                    {"positions", pos}, {"multi_token", p.multi_token}});
  }
  return {{"family", to_string(family)}, {"class_labels", class_labels}, {"seeds", seeds},
          {"size", prompts.size()}, {"multi_token_words", multi_token_words()}, {"prompts", rows}};
}

PromptCorpus build_corpus(CorpusFamily family, const std::vector<uint64_t>& seeds, const Tokenizer& tokenizer) {
  PromptCorpus c;
  c.family = family;
  c.seeds = seeds;
  c.class_labels = family == CorpusFamily::animal_park ? words::animals() : words::probe_colors();
  for (uint64_t seed : seeds) {
    switch (family) {
      case CorpusFamily::color_car:
      case CorpusFamily::token_probe:
        for (size_t i = 0; i < c.class_labels.size(); ++i) {
          const auto& color = c.class_labels[i];
          c.prompts.push_back(make_prompt(tokenizer, "a " + color + " car", static_cast<int>(i), seed, color));
        }
        break;
      case CorpusFamily::color_object:
        for (const auto& object : words::objects()) {
          for (size_t i = 0; i < c.class_labels.size(); ++i) {
            const auto& color = c.class_labels[i];
            c.prompts.push_back(
                make_prompt(tokenizer, "a " + color + " " + object, static_cast<int>(i), seed, color));
          }
        }
        break;
      case CorpusFamily::animal_park:
        for (size_t i = 0; i < c.class_labels.size(); ++i) {
          const auto& animal = c.class_labels[i];
          c.prompts.push_back(make_prompt(tokenizer, article_for(animal) + " " + animal + " standing in the park",
                                          static_cast<int>(i), seed, animal));
        }
        break;
      case CorpusFamily::complex_color:
        for (const auto& tmpl : words::complex_templates()) {
          for (size_t i = 0; i < c.class_labels.size(); ++i) {
            const auto& color = c.class_labels[i];
            c.prompts.push_back(make_prompt(tokenizer, fill(tmpl, color), static_cast<int>(i), seed, color));
          }
        }
        break;
    }
  }
  return c;
}

// ---------------------------------------------------------------------------
// Harvest

std::map<CellKey, Tensor> harvest_features(const ModelAdapter& model, const CorpusPrompt& prompt,
                                           const HarvestOptions& options) {
  SamplerConfig cfg = options.sampler;
  cfg.seed = prompt.seed;
  CaptureStore::Options so;
  so.retention = Retention::step_mean;
  so.kinds = options.kinds;
  so.branch = Branch::cond;
  CaptureStore store(so);
  InstrumentSet instruments(cfg.step_count, &store);
  const ContextEmbedding emb = model.encode_prompt(prompt.prompt);
  model.denoise(model.initial_latent(cfg), &emb, cfg, &instruments);

  std::map<CellKey, Tensor> out;
  for (const auto& key : store.keys()) {
    const AttentionMapRecord rec = store.get(key);
    if (key.kind == AttnKind::self) {
      out.emplace(CellKey{AttnKind::self, key.site, TokenRole::edit_word}, normalize_map_for_probe(rec, std::nullopt));
      continue;
    }
    for (TokenRole role : options.roles) {
      auto it = prompt.positions.find(role);
      if (it == prompt.positions.end()) {
        throw ValidationError("prompt '" + prompt.prompt + "' has no " + to_string(role) + " token");
      }
      out.emplace(CellKey{AttnKind::cross, key.site, role}, normalize_map_for_probe(rec, it->second));
    }
  }
  return out;
}

namespace {

std::string shard_name(size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "shard_%04zu.fpet", index);
  return buf;
}

std::vector<CellKey> expected_cells(const ModelAdapter& model, const HarvestOptions& options) {
  std::vector<CellKey> cells;
  for (const auto& site : model.sites()) {
    if (!options.kinds.count(site.kind)) continue;
    if (site.kind == AttnKind::self) {
      cells.push_back({AttnKind::self, site.index, TokenRole::edit_word});
    } else {
      for (TokenRole role : options.roles) cells.push_back({AttnKind::cross, site.index, role});
    }
  }
  std::sort(cells.begin(), cells.end());
  return cells;
}

int64_t feature_length_of(const ModelAdapter& model, const CellKey& cell) {
  for (const auto& site : model.sites()) {
    if (site.kind == cell.kind && site.index == cell.layer) return probe_feature_length(site);
  }
  throw Error("no site for cell " + cell.name());
}

CellKey cell_from_name(const std::string& name) {
  const auto a = name.find('/'), b = name.rfind('/');
  return {parse_attn_kind(name.substr(0, a)), std::stoi(name.substr(a + 1, b - a - 1)),
          parse_token_role(name.substr(b + 1))};
}

}  // namespace

HarvestSummary harvest(const PromptCorpus& corpus, const ModelAdapter& model, const HarvestOptions& options,
                       const fs::path& out_dir) {
  if (options.shard_size < 1) throw ValidationError("shard_size must be >= 1");
  if (options.kinds.empty()) throw ValidationError("harvest needs at least one attention kind");
  for (TokenRole role : options.roles) {
    for (const auto& p : corpus.prompts) {
      if (!p.positions.count(role)) {
        throw ValidationError("token role " + to_string(role) + " does not occur in prompt '" + p.prompt + "'");
      }
    }
  }
  fs::create_directories(out_dir);
  const std::vector<CellKey> cells = expected_cells(model, options);
  json kinds = json::array(), roles = json::array();
  for (auto k : options.kinds) kinds.push_back(to_string(k));
  for (auto r : options.roles) roles.push_back(to_string(r));
  SamplerConfig sampler = options.sampler;
  if (sampler.schedule_id.empty()) sampler.schedule_id = model.schedule().id();
  json corpus_json = corpus.to_json();
  json identity = {{"corpus", corpus_json}, {"backbone", model.backbone_id()}, {"sampler", sampler.to_json()},
                   {"kinds", kinds}, {"roles", roles}, {"shard_size", options.shard_size}};
  const std::string fingerprint = std::to_string(fnv1a64(identity.dump()));

  const fs::path manifest_path = out_dir / "manifest.json";
  std::map<size_t, json> done;
  HarvestSummary summary;
  if (fs::exists(manifest_path)) {
    const json old = json::parse(io::read_text(manifest_path));
    if (old.value("fingerprint", "") == fingerprint) {
      for (const auto& s : old.at("shards")) {
        const bool present = s.at("file").is_null() || fs::exists(out_dir / s.at("file").get<std::string>());
        if (present) done.emplace(s.at("index").get<size_t>(), s);
      }
    }
  }

  json cell_list = json::array();
  for (const auto& c : cells) {
    cell_list.push_back({{"name", c.name()}, {"kind", to_string(c.kind)}, {"layer", c.layer},
                         {"role", to_string(c.role)}, {"features", feature_length_of(model, c)}});
  }
  const size_t n = corpus.prompts.size();
  const size_t shard_count = (n + static_cast<size_t>(options.shard_size) - 1) / static_cast<size_t>(options.shard_size);
  auto write_manifest = [&](bool finished) {
    json shards = json::array();
    int completed = 0, skipped = 0;
    json skipped_list = json::array();
    for (const auto& [i, s] : done) {
      shards.push_back(s);
      completed += s.at("rows").get<int>();
      skipped += static_cast<int>(s.at("skipped").size());
      for (const auto& sk : s.at("skipped")) skipped_list.push_back(sk);
    }
    json m = {{"format", "fpe-probe-dataset"},
              {"version", 1},
              {"fingerprint", fingerprint},
              {"family", to_string(corpus.family)},
              {"class_labels", corpus.class_labels},
              {"multi_token_words", corpus.multi_token_words()},
              {"backbone", model.backbone_id()},
              {"sampler", sampler.to_json()},
              {"retention", "step_mean"},
              {"branch", "cond"},
              {"kinds", kinds},
              {"roles", roles},
              {"shard_size", options.shard_size},
              {"total", n},
              {"completed", completed},
              {"skipped", skipped},
              {"skipped_prompts", skipped_list},
              {"complete", finished && done.size() == shard_count},
              {"cells", cell_list},
              {"shards", shards},
              {"corpus", corpus_json}};
    io::write_text_atomic(manifest_path, m.dump(2));
    summary.completed = completed;
    summary.skipped = skipped;
  };

  summary.total = static_cast<int>(n);
  summary.resumed_shards = static_cast<int>(done.size());
  for (size_t s = 0; s < shard_count; ++s) {
    if (done.count(s)) continue;
    const size_t first = s * static_cast<size_t>(options.shard_size);
    const size_t last = std::min(n, first + static_cast<size_t>(options.shard_size));
    std::map<CellKey, std::vector<float>> rows;
    std::vector<float> labels, indices;
    json skipped = json::array();
    for (size_t i = first; i < last; ++i) {
      const CorpusPrompt& p = corpus.prompts[i];
      std::map<CellKey, Tensor> feats;
      try {
        if (options.before_prompt) options.before_prompt(p);
        feats = harvest_features(model, p, options);
      } catch (const std::exception& e) {
        skipped.push_back({{"index", i}, {"prompt", p.prompt}, {"seed", p.seed}, {"error", e.what()}});
        continue;
      }
      for (const auto& c : cells) {
        const Tensor& f = feats.at(c);
        auto& dst = rows[c];
        dst.insert(dst.end(), f.storage().begin(), f.storage().end());
      }
      labels.push_back(static_cast<float>(p.label));
      indices.push_back(static_cast<float>(i));
    }
    json shard = {{"index", s}, {"first", first}, {"count", last - first}, {"rows", labels.size()},
                  {"skipped", skipped}, {"file", nullptr}};
    if (!labels.empty()) {
      const auto r = static_cast<int64_t>(labels.size());
      std::vector<io::ContainerEntry> entries;
      for (const auto& c : cells) {
        const int64_t width = static_cast<int64_t>(rows[c].size()) / r;
        entries.push_back({c.name(), Tensor({r, width}, std::move(rows[c]))});
      }
      entries.push_back({"labels", Tensor({r}, std::move(labels))});
      entries.push_back({"indices", Tensor({r}, std::move(indices))});
      io::write_container(out_dir / shard_name(s), entries);
      shard["file"] = shard_name(s);
    }
    done.emplace(s, shard);
    write_manifest(false);
  }
  write_manifest(true);
  return summary;
}

ProbeDataset ProbeDataset::open(const fs::path& dir) {
  ProbeDataset ds;
  ds.dir_ = dir;
  const fs::path m = dir / "manifest.json";
  if (!fs::exists(m)) throw io::IoError("no probe dataset manifest at " + m.string());
  ds.manifest_ = json::parse(io::read_text(m));
  if (ds.manifest_.value("format", "") != "fpe-probe-dataset") {
    throw io::IoError(m.string() + " is not a probe dataset manifest");
  }
  return ds;
}

std::vector<CellKey> ProbeDataset::cells() const {
  std::vector<CellKey> out;
  for (const auto& c : manifest_.at("cells")) out.push_back(cell_from_name(c.at("name")));
  return out;
}

std::vector<std::string> ProbeDataset::class_labels() const {
  return manifest_.at("class_labels").get<std::vector<std::string>>();
}

bool ProbeDataset::complete() const { return manifest_.value("complete", false); }

FeatureMatrix ProbeDataset::load(const CellKey& cell) const {
  int64_t width = -1;
  for (const auto& c : manifest_.at("cells")) {
    if (c.at("name") == cell.name()) width = c.at("features");
  }
  if (width < 0) throw ValidationError("dataset has no cell " + cell.name());
  FeatureMatrix fm;
  fm.num_classes = static_cast<int>(class_labels().size());
  std::vector<float> x;
  for (const auto& s : manifest_.at("shards")) {
    if (s.at("file").is_null()) continue;
    for (auto& e : io::read_container(dir_ / s.at("file").get<std::string>())) {
      if (e.name == cell.name()) {
        x.insert(x.end(), e.tensor.storage().begin(), e.tensor.storage().end());
      } else if (e.name == "labels") {
        for (float v : e.tensor.storage()) fm.labels.push_back(static_cast<int>(v));
      }
    }
  }
  const auto n = static_cast<int64_t>(fm.labels.size());
  if (static_cast<int64_t>(x.size()) != n * width) throw io::IoError("dataset shards disagree with manifest");
  fm.x = Tensor({n, width}, std::move(x));
  return fm;
}

// ---------------------------------------------------------------------------
// Probe training

json SplitSpec::to_json() const { return {{"test_fraction", test_fraction}, {"seed", seed}, {"stratified", true}}; }

json ProbeConfig::to_json() const {
  return {{"hidden", hidden}, {"activation", "relu"},        {"epochs", epochs},
          {"batch", batch},   {"learning_rate", learning_rate}, {"optimizer", "adam"},
          {"seed", seed}};
}

std::pair<std::vector<int64_t>, std::vector<int64_t>> stratified_split(const std::vector<int>& labels,
                                                                       int num_classes, const SplitSpec& split) {
  if (split.test_fraction < 0.0 || split.test_fraction >= 1.0) {
    throw ValidationError("test_fraction must be in range [0,1)");
  }
  Rng rng(split.seed);
  std::vector<int64_t> train, test;
  for (int c = 0; c < num_classes; ++c) {
    std::vector<int64_t> members;
    for (size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == c) members.push_back(static_cast<int64_t>(i));
    }
    std::shuffle(members.begin(), members.end(), rng.engine());
    const auto n_test = static_cast<size_t>(std::llround(split.test_fraction * static_cast<double>(members.size())));
    test.insert(test.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(n_test));
    train.insert(train.end(), members.begin() + static_cast<std::ptrdiff_t>(n_test), members.end());
  }
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  return {train, test};
}

namespace {

using MatF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using VecF = Eigen::VectorXf;

Eigen::Map<MatF> as_mat(Tensor& t) { return {t.data(), t.dim(0), t.dim(1)}; }
Eigen::Map<const MatF> as_mat(const Tensor& t) { return {t.data(), t.dim(0), t.dim(1)}; }
Eigen::Map<VecF> as_vec(Tensor& t) { return {t.data(), t.numel()}; }
Eigen::Map<const VecF> as_vec(const Tensor& t) { return {t.data(), t.numel()}; }

MatF gather_rows(const Tensor& x, const std::vector<int64_t>& rows) {
  const auto src = as_mat(x);
  MatF out(static_cast<Eigen::Index>(rows.size()), src.cols());
  for (size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = src.row(rows[i]);
  return out;
}

// PyTorch-style Linear initialization: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
Tensor uniform_init(Rng& rng, Shape shape, int64_t fan_in) {
  Tensor t(std::move(shape));
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (auto& v : t.storage()) v = static_cast<float>((rng.uniform() * 2.0 - 1.0) * bound);
  return t;
}

MatF logits_of(const ProbeModel& m, const MatF& x) {
  MatF h = (x * as_mat(m.w1).transpose()).rowwise() + as_vec(m.b1).transpose();
  h = h.cwiseMax(0.0f);
  return (h * as_mat(m.w2).transpose()).rowwise() + as_vec(m.b2).transpose();
}

struct Adam {
  double lr, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  int t = 0;
  std::vector<Tensor> m, v;

  explicit Adam(double learning_rate, const std::vector<Tensor*>& params) : lr(learning_rate) {
    for (auto* p : params) {
      m.emplace_back(p->shape());
      v.emplace_back(p->shape());
    }
  }
  void step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads) {
    ++t;
    const double c1 = 1.0 - std::pow(b1, t), c2 = 1.0 - std::pow(b2, t);
    for (size_t i = 0; i < params.size(); ++i) {
      float* p = params[i]->data();
      const float* g = grads[i].data();
      float* mi = m[i].data();
      float* vi = v[i].data();
      for (int64_t j = 0; j < params[i]->numel(); ++j) {
        mi[j] = static_cast<float>(b1 * mi[j] + (1.0 - b1) * g[j]);
        vi[j] = static_cast<float>(b2 * vi[j] + (1.0 - b2) * g[j] * g[j]);
        const double mhat = mi[j] / c1, vhat = vi[j] / c2;
        p[j] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + eps));
      }
    }
  }
};

ProbeReportRow score(const std::vector<int>& predicted, const std::vector<int>& truth, int num_classes) {
  ProbeReportRow row;
  std::vector<int> hit(static_cast<size_t>(num_classes), 0), total(static_cast<size_t>(num_classes), 0);
  int correct = 0;
  for (size_t i = 0; i < truth.size(); ++i) {
    const auto c = static_cast<size_t>(truth[i]);
    ++total[c];
    if (predicted[i] == truth[i]) {
      ++hit[c];
      ++correct;
    }
  }
  row.per_class.resize(static_cast<size_t>(num_classes), 0.0);
  std::vector<std::string> missing;
  for (size_t c = 0; c < row.per_class.size(); ++c) {
    if (total[c] == 0) {
      row.valid = false;
      missing.push_back(std::to_string(c));
      continue;
    }
    row.per_class[c] = static_cast<double>(hit[c]) / total[c];
  }
  if (!missing.empty()) {
    std::string list;
    for (const auto& m : missing) list += (list.empty() ? "" : ",") + m;
    row.note = "classes missing from evaluation rows: " + list;
  }
  row.overall = truth.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(truth.size());
  return row;
}

}  // namespace

std::vector<int> ProbeModel::predict(const Tensor& x) const {
  if (x.rank() != 2 || x.dim(1) != input_dim()) {
    throw ValidationError("probe expects " + std::to_string(input_dim()) + " features, got " + shape_str(x.shape()));
  }
  const MatF logits = logits_of(*this, as_mat(x));
  std::vector<int> out(static_cast<size_t>(logits.rows()));
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::Index arg = 0;
    logits.row(i).maxCoeff(&arg);
    out[static_cast<size_t>(i)] = static_cast<int>(arg);
  }
  return out;
}

ProbeReportRow evaluate(const ProbeModel& model, const FeatureMatrix& data) {
  if (data.cols() != model.input_dim()) {
    throw ValidationError("feature dimension mismatch: model takes " + std::to_string(model.input_dim()) +
                          ", data has " + std::to_string(data.cols()));
  }
  return score(model.predict(data.x), data.labels, model.num_classes());
}

ProbeReportRow evaluate_transfer(const ProbeModel& model, const FeatureMatrix& data) { return evaluate(model, data); }

std::pair<ProbeModel, ProbeReportRow> train_probe(const FeatureMatrix& data, const SplitSpec& split,
                                                  const ProbeConfig& config) {
  if (config.hidden < 1 || config.epochs < 0 || config.batch < 1 || !(config.learning_rate > 0.0)) {
    throw ValidationError("probe config needs hidden >= 1, epochs >= 0, batch >= 1 and learning_rate > 0");
  }
  const int classes = data.num_classes;
  auto [train_idx, test_idx] = stratified_split(data.labels, classes, split);
  std::set<int> train_classes;
  for (auto i : train_idx) train_classes.insert(data.labels[static_cast<size_t>(i)]);
  if (train_classes.size() < 2) throw ValidationError("train split needs at least 2 classes");

  const int64_t in = data.cols();
  Rng rng(config.seed);
  ProbeModel m;
  m.w1 = uniform_init(rng, {config.hidden, in}, in);
  m.b1 = uniform_init(rng, {config.hidden}, in);
  m.w2 = uniform_init(rng, {classes, config.hidden}, config.hidden);
  m.b2 = uniform_init(rng, {classes}, config.hidden);
  std::vector<Tensor*> params{&m.w1, &m.b1, &m.w2, &m.b2};
  Adam adam(config.learning_rate, params);
  std::vector<Tensor> grads{Tensor(m.w1.shape()), Tensor(m.b1.shape()), Tensor(m.w2.shape()), Tensor(m.b2.shape())};

  const MatF x_train = gather_rows(data.x, train_idx);
  std::vector<int> order(train_idx.size());
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng.engine());
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(config.batch)) {
      const size_t end = std::min(order.size(), start + static_cast<size_t>(config.batch));
      const auto b = static_cast<Eigen::Index>(end - start);
      MatF xb(b, in);
      std::vector<int> yb(static_cast<size_t>(b));
      for (Eigen::Index r = 0; r < b; ++r) {
        const int row = order[start + static_cast<size_t>(r)];
        xb.row(r) = x_train.row(row);
        yb[static_cast<size_t>(r)] = data.labels[static_cast<size_t>(train_idx[static_cast<size_t>(row)])];
      }
      const MatF pre = (xb * as_mat(m.w1).transpose()).rowwise() + as_vec(m.b1).transpose();
      const MatF h = pre.cwiseMax(0.0f);
      MatF p = (h * as_mat(m.w2).transpose()).rowwise() + as_vec(m.b2).transpose();
      for (Eigen::Index r = 0; r < b; ++r) {
        p.row(r).array() -= p.row(r).maxCoeff();
        p.row(r) = p.row(r).array().exp().matrix();
        p.row(r) /= p.row(r).sum();
        p(r, yb[static_cast<size_t>(r)]) -= 1.0f;
      }
      p /= static_cast<float>(b);  // dL/dlogits for mean cross-entropy
      as_mat(grads[2]) = p.transpose() * h;
      as_vec(grads[3]) = p.colwise().sum().transpose();
      MatF dh = p * as_mat(m.w2);
      dh = dh.cwiseProduct((pre.array() > 0.0f).cast<float>().matrix());
      as_mat(grads[0]) = dh.transpose() * xb;
      as_vec(grads[1]) = dh.colwise().sum().transpose();
      adam.step(params, grads);
    }
  }

  FeatureMatrix test;
  test.num_classes = classes;
  Tensor xt({static_cast<int64_t>(test_idx.size()), in});
  as_mat(xt) = gather_rows(data.x, test_idx);
  test.x = std::move(xt);
  for (auto i : test_idx) test.labels.push_back(data.labels[static_cast<size_t>(i)]);
  ProbeReportRow row = test.rows() > 0 ? evaluate(m, test) : score({}, {}, classes);
  return {std::move(m), std::move(row)};
}

// ---------------------------------------------------------------------------
// Reports

const std::vector<int>& ProbeReport::main_text_layers() {
  static const std::vector<int> v{3, 6, 9, 10, 12, 14, 16};
  return v;
}

std::vector<int> ProbeReport::shown(const std::vector<int>& subset) const {
  if (subset.empty()) return layers;
  std::vector<int> out;
  for (int l : subset) {
    if (std::find(layers.begin(), layers.end(), l) != layers.end()) out.push_back(l);
  }
  return out;
}

double ProbeReport::average(size_t cls, const std::vector<int>& subset) const {
  const auto cols = shown(subset);
  if (cols.empty()) return 0.0;
  double sum = 0.0;
  for (int l : cols) {
    const auto at = static_cast<size_t>(std::find(layers.begin(), layers.end(), l) - layers.begin());
    sum += accuracy[cls][at];
  }
  return sum / static_cast<double>(cols.size());
}

namespace {

std::string fixed(double v, int digits) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

size_t layer_pos(const std::vector<int>& layers, int l) {
  return static_cast<size_t>(std::find(layers.begin(), layers.end(), l) - layers.begin());
}

}  // namespace

std::string ProbeReport::to_csv(const std::vector<int>& subset) const {
  const auto cols = shown(subset);
  std::ostringstream os;
  os << "class";
  for (int l : cols) os << ",layer_" << l;
  os << ",avg\n";
  for (size_t c = 0; c < class_labels.size(); ++c) {
    os << class_labels[c];
    for (int l : cols) os << ',' << fixed(accuracy[c][layer_pos(layers, l)], 4);
    os << ',' << fixed(average(c, subset), 4) << '\n';
  }
  return os.str();
}

std::string ProbeReport::to_table(const std::vector<int>& subset) const {
  const auto cols = shown(subset);
  size_t name_w = 5;
  for (const auto& n : class_labels) name_w = std::max(name_w, n.size());
  std::ostringstream os;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%-*s", static_cast<int>(name_w), "Class");
  os << buf;
  for (int l : cols) {
    std::snprintf(buf, sizeof buf, " %6s", ("L" + std::to_string(l)).c_str());
    os << buf;
  }
  os << "   Avg.\n";
  for (size_t c = 0; c < class_labels.size(); ++c) {
    std::snprintf(buf, sizeof buf, "%-*s", static_cast<int>(name_w), class_labels[c].c_str());
    os << buf;
    for (int l : cols) {
      std::snprintf(buf, sizeof buf, " %6.2f", accuracy[c][layer_pos(layers, l)]);
      os << buf;
    }
    std::snprintf(buf, sizeof buf, " %6.2f\n", average(c, subset));
    os << buf;
  }
  return os.str();
}

namespace {

ProbeReport empty_report(const ProbeDataset& ds, AttnKind kind, TokenRole role, const SplitSpec& split,
                         const ProbeConfig& config) {
  ProbeReport r;
  r.class_labels = ds.class_labels();
  r.accuracy.assign(r.class_labels.size(), {});
  r.metadata = {{"family", ds.manifest().value("family", "")},
                {"backbone", ds.manifest().value("backbone", "")},
                {"kind", to_string(kind)},
                {"role", to_string(role)},
                {"split", split.to_json()},
                {"classifier", config.to_json()},
                {"features", "head-averaged, step-averaged, conditional branch"},
                {"multi_token_words", ds.manifest().value("multi_token_words", json::array())}};
  return r;
}

void add_row(ProbeReport& r, int layer, const ProbeReportRow& row) {
  r.layers.push_back(layer);
  r.valid.push_back(row.valid);
  for (size_t c = 0; c < r.accuracy.size(); ++c) r.accuracy[c].push_back(row.per_class[c]);
  if (!row.valid) r.metadata["invalid_layers"].push_back({{"layer", layer}, {"note", row.note}});
}

std::vector<int> layers_for(const ProbeDataset& ds, AttnKind kind, TokenRole role) {
  std::vector<int> out;
  for (const auto& c : ds.cells()) {
    if (c.kind == kind && c.role == role) out.push_back(c.layer);
  }
  if (out.empty()) {
    throw ValidationError("dataset has no " + to_string(kind) + " cells for role " + to_string(role));
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

ProbeReport probe_layers(const ProbeDataset& dataset, AttnKind kind, TokenRole role, const SplitSpec& split,
                         const ProbeConfig& config) {
  ProbeReport r = empty_report(dataset, kind, role, split, config);
  for (int layer : layers_for(dataset, kind, role)) {
    add_row(r, layer, train_probe(dataset.load({kind, layer, role}), split, config).second);
  }
  return r;
}

ProbeReport token_probe(const ProbeDataset& dataset, TokenRole role, const SplitSpec& split,
                        const ProbeConfig& config) {
  if (role == TokenRole::edit_word) throw ValidationError("token_probe needs a non-edit token role");
  return probe_layers(dataset, AttnKind::cross, role, split, config);
}

ProbeReport transfer_report(const ProbeDataset& train_set, const ProbeDataset& test_set, AttnKind kind,
                            const SplitSpec& split, const ProbeConfig& config) {
  ProbeReport r = empty_report(train_set, kind, TokenRole::edit_word, split, config);
  r.metadata["transfer_to"] = test_set.manifest().value("family", "");
  for (int layer : layers_for(train_set, kind, TokenRole::edit_word)) {
    const CellKey cell{kind, layer, TokenRole::edit_word};
    const auto [model, in_dist] = train_probe(train_set.load(cell), split, config);
    add_row(r, layer, evaluate_transfer(model, test_set.load(cell)));
  }
  return r;
}

// ---------------------------------------------------------------------------
// Sanity controls

FeatureMatrix planted_signal_dataset(int per_class, int num_classes, int features, int block, double amplitude,
                                     uint64_t seed) {
  if (block * num_classes > features) throw ValidationError("planted blocks do not fit the feature width");
  Rng rng(seed);
  FeatureMatrix fm;
  fm.num_classes = num_classes;
  const int64_t n = static_cast<int64_t>(per_class) * num_classes;
  fm.x = rng.randn({n, features});
  for (int64_t i = 0; i < n; ++i) {
    const int c = static_cast<int>(i % num_classes);
    fm.labels.push_back(c);
    for (int j = 0; j < block; ++j) fm.x[i * features + c * block + j] += static_cast<float>(amplitude);
  }
  return fm;
}

FeatureMatrix shuffle_labels(FeatureMatrix data, uint64_t seed) {
  Rng rng(seed);
  std::shuffle(data.labels.begin(), data.labels.end(), rng.engine());
  return data;
}

std::string SanityResult::summary() const {
  double lo = 1.0;
  for (double v : planted_per_class) lo = std::min(lo, v);
  return std::string(pass() ? "PASS" : "FAIL") + " planted_min=" + fixed(lo, 4) +
         " shuffled_mean=" + fixed(shuffled_mean, 4);
}

SanityResult probe_sanity_gate(const ProbeConfig& config, uint64_t seed) {
  const FeatureMatrix planted = planted_signal_dataset(200, 10, 100, 10, 2.0, seed);
  const SplitSpec split{0.2, seed};
  SanityResult r;
  r.planted_per_class = train_probe(planted, split, config).second.per_class;
  r.planted_ok = std::all_of(r.planted_per_class.begin(), r.planted_per_class.end(),
                             [](double v) { return v >= 0.95; });
  r.shuffled_mean = train_probe(shuffle_labels(planted, seed + 1), split, config).second.overall;
  r.shuffled_ok = std::abs(r.shuffled_mean - 0.10) <= 0.05;
  return r;
}

}  // namespace fpe
