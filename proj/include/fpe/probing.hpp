// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "fpe/attention.hpp"
#include "fpe/backend.hpp"

namespace fpe {

enum class CorpusFamily { color_car, color_object, animal_park, complex_color, token_probe };
enum class TokenRole { edit_word, article_a, noun_car };

std::string to_string(CorpusFamily f);
std::string to_string(TokenRole r);
CorpusFamily parse_corpus_family(const std::string& s);
TokenRole parse_token_role(const std::string& s);

namespace words {
// Probe vocabularies.
const std::vector<std::string>& probe_colors();      // 10
const std::vector<std::string>& animals();           // 10
const std::vector<std::string>& objects();           // 100
const std::vector<std::string>& complex_templates(); // 12, "{}" marks the color
// Edit-dataset vocabularies.
const std::vector<std::string>& edit_colors();       // 28
const std::vector<std::string>& imagenet_templates();  // 28
}  // namespace words

struct CorpusPrompt {
  std::string prompt;
  int label = 0;
  uint64_t seed = 0;
  std::string target_word;
  // Token position of each role present in the prompt. Multi-token words use
  // their first sub-token.
  std::map<TokenRole, int> positions;
  bool multi_token = false;
};

struct PromptCorpus {
  CorpusFamily family = CorpusFamily::color_car;
  std::vector<std::string> class_labels;
  std::vector<uint64_t> seeds;
  std::vector<CorpusPrompt> prompts;

  // Class words the tokenizer splits into several tokens.
  std::vector<std::string> multi_token_words() const;
  nlohmann::json to_json() const;
};

// Deterministic corpus: seeds outermost, then objects/templates, then
// classes. Token positions come from `tokenizer`.
PromptCorpus build_corpus(CorpusFamily family, const std::vector<uint64_t>& seeds, const Tokenizer& tokenizer);

/// Features for one (kind, layer, role) cell: rows are samples.
struct FeatureMatrix {
  Tensor x;  // [n, features]
  std::vector<int> labels;
  int num_classes = 10;

  int64_t rows() const { return x.empty() ? 0 : x.dim(0); }
  int64_t cols() const { return x.empty() ? 0 : x.dim(1); }
};

struct CellKey {
  AttnKind kind = AttnKind::cross;
  int layer = 1;
  TokenRole role = TokenRole::edit_word;  // edit_word for self maps
  auto operator<=>(const CellKey&) const = default;
  std::string name() const;  // "cross/3/edit_word"
};

struct HarvestOptions {
  std::set<AttnKind> kinds{AttnKind::cross};
  std::set<TokenRole> roles{TokenRole::edit_word};
  SamplerConfig sampler;  // seed is taken from each prompt
  int shard_size = 64;
  // Test hook: called before each prompt; throwing skips that prompt.
  std::function<void(const CorpusPrompt&)> before_prompt;
};

struct HarvestSummary {
  int total = 0;
  int completed = 0;
  int skipped = 0;
  int resumed_shards = 0;
};

/// Sharded on-disk dataset: shard_NNNN.fpet holds one entry per cell plus a
/// "labels" entry, manifest.json lists shards, feature lengths and skipped
/// prompts.
class ProbeDataset {
 public:
  static ProbeDataset open(const std::filesystem::path& dir);

  const std::filesystem::path& dir() const { return dir_; }
  const nlohmann::json& manifest() const { return manifest_; }
  std::vector<CellKey> cells() const;
  std::vector<std::string> class_labels() const;
  bool complete() const;
  FeatureMatrix load(const CellKey& cell) const;

 private:
  std::filesystem::path dir_;
  nlohmann::json manifest_;
};

// Generates every prompt with capture-only instruments (step-mean retention,
// conditional branch) and writes probe features shard by shard. Shards
// already listed in an existing manifest for the same corpus are kept.
HarvestSummary harvest(const PromptCorpus& corpus, const ModelAdapter& model, const HarvestOptions& options,
                       const std::filesystem::path& out_dir);

// Probe features of every site for one generation.
std::map<CellKey, Tensor> harvest_features(const ModelAdapter& model, const CorpusPrompt& prompt,
                                           const HarvestOptions& options);

struct SplitSpec {
  double test_fraction = 0.2;
  uint64_t seed = 0;
  nlohmann::json to_json() const;
};

struct ProbeConfig {
  int hidden = 512;
  int epochs = 50;
  int batch = 64;
  double learning_rate = 1e-3;
  uint64_t seed = 0;
  nlohmann::json to_json() const;
};

// Per-class stratified split; each class contributes round(n * fraction)
// test rows chosen by a seeded shuffle. Indices are sorted.
std::pair<std::vector<int64_t>, std::vector<int64_t>> stratified_split(const std::vector<int>& labels,
                                                                       int num_classes, const SplitSpec& split);

/// Two-layer perceptron: features -> hidden (ReLU) -> classes.
struct ProbeModel {
  Tensor w1, b1, w2, b2;  // [hidden, in], [hidden], [classes, hidden], [classes]

  int64_t input_dim() const { return w1.dim(1); }
  int num_classes() const { return static_cast<int>(w2.dim(0)); }
  std::vector<int> predict(const Tensor& x) const;
};

struct ProbeReportRow {
  CellKey cell;
  std::vector<double> per_class;  // accuracy per class on the evaluated rows
  double overall = 0.0;
  bool valid = true;
  std::string note;
};

// Accuracy of `model` on every row of `data`; classes absent from `data`
// mark the row invalid.
ProbeReportRow evaluate(const ProbeModel& model, const FeatureMatrix& data);

// Adam on softmax cross-entropy over the train split; evaluates on the test
// split.
std::pair<ProbeModel, ProbeReportRow> train_probe(const FeatureMatrix& data, const SplitSpec& split,
                                                  const ProbeConfig& config);

// Applies a model trained on one corpus to every row of another.
ProbeReportRow evaluate_transfer(const ProbeModel& model, const FeatureMatrix& data);

/// Accuracy table: classes x layers plus an Avg. column over the shown layers.
struct ProbeReport {
  std::vector<std::string> class_labels;
  std::vector<int> layers;                 // every layer with a row
  std::vector<std::vector<double>> accuracy;  // [class][layer position]
  std::vector<bool> valid;                 // per layer position
  nlohmann::json metadata;

  static const std::vector<int>& main_text_layers();  // {3, 6, 9, 10, 12, 14, 16}
  // Layers of `subset` present in the report, or all layers when empty.
  std::vector<int> shown(const std::vector<int>& subset) const;
  double average(size_t cls, const std::vector<int>& subset = {}) const;
  std::string to_csv(const std::vector<int>& subset = {}) const;
  std::string to_table(const std::vector<int>& subset = {}) const;
};

// Trains one probe per layer of `kind`/`role` in the dataset.
ProbeReport probe_layers(const ProbeDataset& dataset, AttnKind kind, TokenRole role, const SplitSpec& split,
                         const ProbeConfig& config);
// Cross-map probes at a non-edit token position.
ProbeReport token_probe(const ProbeDataset& dataset, TokenRole role, const SplitSpec& split,
                        const ProbeConfig& config);
// Trains on `train_set` and reports accuracy on all of `test_set`, per layer.
ProbeReport transfer_report(const ProbeDataset& train_set, const ProbeDataset& test_set, AttnKind kind,
                            const SplitSpec& split, const ProbeConfig& config);

// Synthetic control data: Gaussian noise with the class index written as a
// raised block of `block` features.
FeatureMatrix planted_signal_dataset(int per_class, int num_classes, int features, int block, double amplitude,
                                     uint64_t seed);
FeatureMatrix shuffle_labels(FeatureMatrix data, uint64_t seed);

struct SanityResult {
  std::vector<double> planted_per_class;
  double shuffled_mean = 0.0;
  bool planted_ok = false;
  bool shuffled_ok = false;
  bool pass() const { return planted_ok && shuffled_ok; }
  std::string summary() const;
};

// Planted signal must reach >= 0.95 on every class; shuffled labels must
// land within 0.05 of 10-class chance.
SanityResult probe_sanity_gate(const ProbeConfig& config = {}, uint64_t seed = 0);

}  // namespace fpe
