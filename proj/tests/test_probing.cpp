// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>
#include <set>
#include <sstream>

#include "fpe/io.hpp"
#include "fpe/probing.hpp"
#include "fpe/unet.hpp"
#include "support.hpp"

using namespace fpe;
using fpe::test::TempDir;
using fpe::test::tiny;
namespace fs = std::filesystem;

namespace {

// Splits every word longer than five letters into two tokens, so corpora
// exercise the multi-token path without a trained vocabulary.
class SplittingTokenizer final : public Tokenizer {
 public:
  TokenizedPrompt encode(const std::string& text) const override {
    TokenizedPrompt tp;
    tp.ids.push_back(0);
    std::string word;
    std::istringstream in(text);
    while (in >> word) {
      WordSpan span{word, {}};
      const int pieces = word.size() > 5 ? 2 : 1;
      for (int i = 0; i < pieces; ++i) {
        span.positions.push_back(static_cast<int>(tp.ids.size()));
        tp.ids.push_back(static_cast<int>(tp.ids.size()) + 2);
      }
      tp.words.push_back(span);
    }
    tp.ids.push_back(1);
    tp.length = static_cast<int>(tp.ids.size());
    tp.ids.resize(static_cast<size_t>(max_length()), 1);
    return tp;
  }
  int max_length() const override { return 32; }
  int eos_id() const override { return 1; }
};

std::vector<uint64_t> seeds(int n) {
  std::vector<uint64_t> s;
  for (int i = 0; i < n; ++i) s.push_back(static_cast<uint64_t>(i));
  return s;
}

ProbeConfig small_probe() {
  ProbeConfig c;
  c.hidden = 32;
  c.epochs = 30;
  c.batch = 32;
  c.learning_rate = 1e-2;
  return c;
}

bool all_finite(const Tensor& t) {
  return std::all_of(t.values().begin(), t.values().end(), [](float v) { return std::isfinite(v); });
}

}  // namespace

TEST_CASE("vocabulary sizes") {
  CHECK(words::probe_colors().size() == 10);
  CHECK(words::animals().size() == 10);
  CHECK(words::objects().size() == 100);
  CHECK(words::complex_templates().size() == 12);
  CHECK(words::edit_colors().size() == 28);
  CHECK(words::imagenet_templates().size() == 28);
  for (const auto* list : {&words::probe_colors(), &words::animals(), &words::objects(), &words::edit_colors()}) {
    CHECK(std::set<std::string>(list->begin(), list->end()).size() == list->size());
  }
  for (const auto& t : words::complex_templates()) CHECK(t.find("{}") != std::string::npos);
}

TEST_CASE("corpus sizes") {
  const Tokenizer& tok = tiny().tokenizer();
  CHECK(build_corpus(CorpusFamily::color_car, seeds(200), tok).prompts.size() == 2000);
  CHECK(build_corpus(CorpusFamily::color_object, seeds(2), tok).prompts.size() == 2000);
  CHECK(build_corpus(CorpusFamily::animal_park, seeds(200), tok).prompts.size() == 2000);
  CHECK(build_corpus(CorpusFamily::token_probe, seeds(200), tok).prompts.size() == 2000);
  // Complex templates exceed the fixture's 8-token window.
  const WordTokenizer wide(1000, 77);
  CHECK(build_corpus(CorpusFamily::complex_color, seeds(3), wide).prompts.size() == 3 * 12 * 10);
  for (auto family : {CorpusFamily::color_car, CorpusFamily::color_object, CorpusFamily::animal_park,
                      CorpusFamily::complex_color, CorpusFamily::token_probe}) {
    const PromptCorpus empty = build_corpus(family, {}, wide);
    CHECK(empty.prompts.empty());
    CHECK(empty.class_labels.size() == 10);
  }
}

TEST_CASE("corpus labels are balanced and ordered seeds first") {
  const PromptCorpus c = build_corpus(CorpusFamily::color_object, seeds(2), tiny().tokenizer());
  std::vector<int> per_class(10, 0);
  for (const auto& p : c.prompts) ++per_class[static_cast<size_t>(p.label)];
  for (int n : per_class) CHECK(n == 200);
  CHECK(c.prompts.front().seed == 0);
  CHECK(c.prompts[999].seed == 0);
  CHECK(c.prompts[1000].seed == 1);
  CHECK(c.prompts[0].prompt == "a " + words::probe_colors()[0] + " " + words::objects()[0]);
  CHECK(c.prompts[1].prompt == "a " + words::probe_colors()[1] + " " + words::objects()[0]);
}

TEST_CASE("corpus token positions") {
  const PromptCorpus cars = build_corpus(CorpusFamily::token_probe, {5}, tiny().tokenizer());
  for (const auto& p : cars.prompts) {
    CHECK(p.positions.at(TokenRole::article_a) == 1);
    CHECK(p.positions.at(TokenRole::edit_word) == 2);
    CHECK(p.positions.at(TokenRole::noun_car) == 3);
    CHECK(p.prompt == "a " + p.target_word + " car");
  }
  const PromptCorpus park = build_corpus(CorpusFamily::animal_park, {0}, tiny().tokenizer());
  for (const auto& p : park.prompts) {
    CHECK(p.positions.at(TokenRole::edit_word) == 2);
    CHECK(p.prompt.find(" standing in the park") != std::string::npos);
  }
  // "an" precedes vowel-initial animals, so the article role is absent there.
  for (const auto& p : park.prompts) {
    if (p.prompt.rfind("an ", 0) == 0) CHECK(p.positions.count(TokenRole::article_a) == 0);
  }
}

TEST_CASE("multi-token class words use the first sub-token") {
  SplittingTokenizer tok;
  const PromptCorpus c = build_corpus(CorpusFamily::animal_park, {0}, tok);
  std::set<std::string> expected;
  for (const auto& a : words::animals()) {
    if (a.size() > 5) expected.insert(a);
  }
  const auto flagged = c.multi_token_words();
  CHECK(std::set<std::string>(flagged.begin(), flagged.end()) == expected);
  for (const auto& p : c.prompts) {
    CHECK(p.multi_token == (p.target_word.size() > 5));
    CHECK(p.positions.at(TokenRole::edit_word) == 2);
  }
  CHECK(c.to_json().at("multi_token_words").size() == expected.size());
}

TEST_CASE("corpus construction is deterministic") {
  const WordTokenizer wide(1000, 77);
  const auto a = build_corpus(CorpusFamily::complex_color, seeds(2), wide).to_json();
  const auto b = build_corpus(CorpusFamily::complex_color, seeds(2), wide).to_json();
  CHECK(a == b);
}

TEST_CASE("stratified split properties") {
  std::vector<int> labels;
  for (int c = 0; c < 10; ++c) {
    for (int i = 0; i < 17 + c; ++i) labels.push_back(c);
  }
  std::mt19937 shuffle_rng(3);
  std::shuffle(labels.begin(), labels.end(), shuffle_rng);
  for (uint64_t seed : {0ULL, 1ULL, 99ULL}) {
    CAPTURE(seed);
    const auto [train, test] = stratified_split(labels, 10, {0.2, seed});
    CHECK(std::is_sorted(train.begin(), train.end()));
    CHECK(std::is_sorted(test.begin(), test.end()));
    std::vector<int64_t> all(train);
    all.insert(all.end(), test.begin(), test.end());
    std::sort(all.begin(), all.end());
    CHECK(all.size() == labels.size());
    for (size_t i = 0; i < all.size(); ++i) CHECK(all[i] == static_cast<int64_t>(i));
    std::vector<int> test_per_class(10, 0);
    for (int64_t i : test) ++test_per_class[static_cast<size_t>(labels[static_cast<size_t>(i)])];
    for (int c = 0; c < 10; ++c) CHECK(test_per_class[static_cast<size_t>(c)] == std::lround((17 + c) * 0.2));
    const auto again = stratified_split(labels, 10, {0.2, seed});
    CHECK(again.first == train);
    CHECK(again.second == test);
  }
  CHECK(stratified_split(labels, 10, {0.2, 0}).second != stratified_split(labels, 10, {0.2, 1}).second);
}

TEST_CASE("probe feature length depends only on the site") {
  for (const auto& site : site_table(UNetConfig::sd15(), 64, 64, 77)) {
    const int64_t expected = site.kind == AttnKind::cross ? site.spatial_len
                             : site.spatial_len >= 256    ? 256 * 256
                                                          : site.spatial_len * site.spatial_len;
    CHECK(probe_feature_length(site) == expected);
  }
  const HarvestOptions opts = [] {
    HarvestOptions o;
    o.kinds = {AttnKind::cross, AttnKind::self};
    o.sampler.step_count = 2;
    return o;
  }();
  const PromptCorpus c = build_corpus(CorpusFamily::color_car, {0, 1}, tiny().tokenizer());
  for (size_t i : {size_t{0}, size_t{13}}) {
    const auto feats = harvest_features(tiny(), c.prompts[i], opts);
    CHECK(feats.size() == tiny().sites().size());
    for (const auto& [cell, f] : feats) {
      const auto& sites = tiny().sites();
      const auto site = *std::find_if(sites.begin(), sites.end(), [&](const AttentionSite& s) {
        return s.kind == cell.kind && s.index == cell.layer;
      });
      CHECK(f.numel() == probe_feature_length(site));
      CHECK(all_finite(f));
    }
  }
}

TEST_CASE("harvest a mini corpus and resume it") {
  TempDir dir("harvest");
  const PromptCorpus corpus = build_corpus(CorpusFamily::color_car, {0, 1}, tiny().tokenizer());
  REQUIRE(corpus.prompts.size() == 20);
  HarvestOptions opts;
  opts.sampler.step_count = 2;
  opts.shard_size = 8;
  const HarvestSummary first = harvest(corpus, tiny(), opts, dir.path());
  CHECK(first.total == 20);
  CHECK(first.completed == 20);
  CHECK(first.skipped == 0);
  CHECK(first.resumed_shards == 0);

  const ProbeDataset ds = ProbeDataset::open(dir.path());
  CHECK(ds.complete());
  CHECK(ds.cells().size() == 4);
  CHECK(ds.class_labels() == words::probe_colors());
  const FeatureMatrix fm = ds.load(ds.cells().front());
  CHECK(fm.rows() == 20);
  CHECK(all_finite(fm.x));
  for (size_t i = 0; i < 20; ++i) CHECK(fm.labels[i] == corpus.prompts[i].label);

  // Losing a shard file re-runs only that shard, with identical features.
  fs::remove(dir.path() / "shard_0001.fpet");
  const HarvestSummary resumed = harvest(corpus, tiny(), opts, dir.path());
  CHECK(resumed.resumed_shards == 2);
  CHECK(resumed.completed == 20);
  const FeatureMatrix again = ProbeDataset::open(dir.path()).load(ds.cells().front());
  CHECK(again.x.bit_equal(fm.x));
  CHECK(again.labels == fm.labels);
}

TEST_CASE("harvest records prompts that fail") {
  TempDir dir("harvest_skip");
  const PromptCorpus corpus = build_corpus(CorpusFamily::color_car, {3}, tiny().tokenizer());
  HarvestOptions opts;
  opts.sampler.step_count = 2;
  opts.shard_size = 4;
  opts.before_prompt = [](const CorpusPrompt& p) {
    if (p.label == 6) throw std::runtime_error("simulated failure");
  };
  const HarvestSummary s = harvest(corpus, tiny(), opts, dir.path());
  CHECK(s.completed == 9);
  CHECK(s.skipped == 1);
  const ProbeDataset ds = ProbeDataset::open(dir.path());
  REQUIRE(ds.manifest().at("skipped_prompts").size() == 1);
  CHECK(ds.manifest()["skipped_prompts"][0]["index"] == 6);
  CHECK(ds.manifest()["skipped_prompts"][0]["error"] == "simulated failure");
  CHECK(ds.load(ds.cells().front()).rows() == 9);
}

TEST_CASE("harvest rejects a role missing from the corpus") {
  TempDir dir("harvest_role");
  const PromptCorpus park = build_corpus(CorpusFamily::animal_park, {0}, tiny().tokenizer());
  HarvestOptions opts;
  opts.roles = {TokenRole::noun_car};
  CHECK_THROWS_AS(harvest(park, tiny(), opts, dir.path()), ValidationError);
}

TEST_CASE("planted signal is learned and shuffled labels are not") {
  const FeatureMatrix planted = planted_signal_dataset(60, 10, 40, 4, 3.0, 11);
  CHECK(planted.rows() == 600);
  const auto [model, row] = train_probe(planted, {0.2, 0}, small_probe());
  REQUIRE(row.valid);
  for (double acc : row.per_class) CHECK(acc >= 0.95);
  const auto shuffled = train_probe(shuffle_labels(planted, 5), {0.2, 0}, small_probe()).second;
  CHECK(shuffled.overall < 0.3);
}

TEST_CASE("self-transfer equals in-distribution accuracy") {
  const FeatureMatrix data = planted_signal_dataset(30, 10, 40, 4, 1.0, 2);
  const SplitSpec split{0.2, 4};
  const auto [model, row] = train_probe(data, split, small_probe());
  const auto [train_idx, test_idx] = stratified_split(data.labels, 10, split);
  FeatureMatrix test;
  test.num_classes = 10;
  const int64_t f = data.cols();
  std::vector<float> rows;
  for (int64_t i : test_idx) {
    const auto v = data.x.values();
    rows.insert(rows.end(), v.begin() + i * f, v.begin() + (i + 1) * f);
    test.labels.push_back(data.labels[static_cast<size_t>(i)]);
  }
  test.x = Tensor({static_cast<int64_t>(test_idx.size()), f}, rows);
  const ProbeReportRow transfer = evaluate_transfer(model, test);
  CHECK(transfer.overall == doctest::Approx(row.overall));
  CHECK(transfer.per_class == row.per_class);
}

TEST_CASE("transfer checks feature width and missing classes") {
  const FeatureMatrix data = planted_signal_dataset(20, 10, 40, 4, 3.0, 2);
  const auto model = train_probe(data, {0.2, 0}, small_probe()).first;
  const FeatureMatrix narrow = planted_signal_dataset(5, 10, 30, 3, 3.0, 2);
  CHECK_THROWS(evaluate_transfer(model, narrow));

  FeatureMatrix partial = planted_signal_dataset(5, 10, 40, 4, 3.0, 9);
  for (int& l : partial.labels) l = std::min(l, 4);
  const ProbeReportRow row = evaluate_transfer(model, partial);
  CHECK_FALSE(row.valid);
}

TEST_CASE("a random-feature model is near chance") {
  const FeatureMatrix train = planted_signal_dataset(40, 10, 40, 4, 0.0, 1);
  const auto model = train_probe(train, {0.2, 0}, small_probe()).first;
  const FeatureMatrix fresh = planted_signal_dataset(200, 10, 40, 4, 0.0, 77);
  const ProbeReportRow row = evaluate_transfer(model, fresh);
  CHECK(std::abs(row.overall - 0.1) <= 0.05);
}

TEST_CASE("probe report layout") {
  ProbeReport r;
  r.class_labels = {"red", "orange"};
  r.layers = {1, 3, 6, 9};
  r.accuracy = {{1.0, 0.5, 0.25, 0.0}, {0.2, 0.4, 0.6, 0.8}};
  r.valid = {true, true, true, true};
  CHECK(r.shown({}) == r.layers);
  CHECK(r.shown(ProbeReport::main_text_layers()) == std::vector<int>{3, 6, 9});
  CHECK(r.average(0) == doctest::Approx(0.4375));
  CHECK(r.average(0, ProbeReport::main_text_layers()) == doctest::Approx(0.25));
  CHECK(r.to_csv() ==
        "class,layer_1,layer_3,layer_6,layer_9,avg\n"
        "red,1.0000,0.5000,0.2500,0.0000,0.4375\n"
        "orange,0.2000,0.4000,0.6000,0.8000,0.5000\n");
  CHECK(r.to_table(ProbeReport::main_text_layers()) ==
        "Class      L3     L6     L9   Avg.\n"
        "red      0.50   0.25   0.00   0.25\n"
        "orange   0.40   0.60   0.80   0.60\n");
}

TEST_CASE("per-layer probes on a harvested dataset") {
  TempDir dir("probe_layers");
  const PromptCorpus corpus = build_corpus(CorpusFamily::token_probe, seeds(3), tiny().tokenizer());
  HarvestOptions opts;
  opts.kinds = {AttnKind::cross, AttnKind::self};
  opts.roles = {TokenRole::edit_word, TokenRole::article_a, TokenRole::noun_car};
  opts.sampler.step_count = 2;
  harvest(corpus, tiny(), opts, dir.path());
  const ProbeDataset ds = ProbeDataset::open(dir.path());
  CHECK(ds.cells().size() == 4 * 3 + 4);
  ProbeConfig cfg = small_probe();
  cfg.epochs = 5;
  const SplitSpec split{0.34, 0};
  for (const ProbeReport& rep : {probe_layers(ds, AttnKind::cross, TokenRole::edit_word, split, cfg),
                                 probe_layers(ds, AttnKind::self, TokenRole::edit_word, split, cfg),
                                 token_probe(ds, TokenRole::noun_car, split, cfg),
                                 transfer_report(ds, ds, AttnKind::cross, split, cfg)}) {
    CHECK(rep.layers.size() == 4);
    CHECK(rep.class_labels.size() == 10);
    for (const auto& row : rep.accuracy) {
      for (double v : row) CHECK((v >= 0.0 && v <= 1.0));
    }
    CHECK(rep.metadata.contains("classifier"));
    CHECK(rep.metadata.contains("split"));
    CHECK(rep.to_table() == rep.to_table());
  }
}
