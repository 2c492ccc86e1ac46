// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <map>
#include <set>

#include "fpe/eval.hpp"
#include "fpe/io.hpp"
#include "fpe/probing.hpp"
#include "support.hpp"
#include "synthetic_assets.hpp"

using namespace fpe;
using fpe::test::TempDir;
using fpe::test::tiny;
namespace fs = std::filesystem;

namespace {

Tensor random_vec(Rng& rng, int64_t n) { return rng.randn({n}); }

// Hand computation in double, written independently of the library.
double oracle_cos(const Tensor& a, const Tensor& b) {
  double dot = 0, na = 0, nb = 0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  return dot / std::sqrt(na * nb);
}

double oracle_cds(const Tensor& si, const Tensor& di, const Tensor& st, const Tensor& dt) {
  auto normed = [](const Tensor& t) {
    double n = 0;
    for (int64_t i = 0; i < t.numel(); ++i) n += static_cast<double>(t[i]) * t[i];
    std::vector<double> out;
    for (int64_t i = 0; i < t.numel(); ++i) out.push_back(t[i] / std::sqrt(n));
    return out;
  };
  const auto a = normed(si), b = normed(di), c = normed(st), d = normed(dt);
  double dot = 0, n1 = 0, n2 = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    const double x = b[i] - a[i], y = d[i] - c[i];
    dot += x * y;
    n1 += x * x;
    n2 += y * y;
  }
  return dot / std::sqrt(n1 * n2);
}

// Embeds text by hashing, and images by the text they were labeled with.
class LookupEmbedder final : public ImageTextEmbedder {
 public:
  std::map<uint8_t, std::string> image_text;  // first pixel value -> text
  Tensor embed_image(const Image& image) const override { return embed_text(image_text.at(image.rgb[0])); }
  Tensor embed_text(const std::string& text) const override {
    Rng rng(std::hash<std::string>{}(text));
    return rng.randn({24});
  }
  std::string id() const override { return "lookup"; }
};

}  // namespace

TEST_CASE("car_fake has every ordered color pair") {
  const auto pairs = build_dataset(DatasetId::car_fake, {});
  CHECK(pairs.size() == 756);
  std::set<std::pair<std::string, std::string>> seen;
  for (size_t i = 0; i < pairs.size(); ++i) {
    const EditPair& p = pairs[i];
    CHECK(p.pair_id == "car_fake-" + std::to_string(i));
    CHECK(p.source.type == EditSource::Type::seeded_prompt);
    CHECK(p.source.seed == i);
    CHECK(p.source_prompt != p.target_prompt);
    seen.insert({p.source_prompt, p.target_prompt});
  }
  CHECK(seen.size() == 756);
  CHECK(pairs[0].source_prompt == "a " + words::edit_colors()[0] + " car");
  CHECK(pairs[0].target_prompt == "a " + words::edit_colors()[1] + " car");

  DatasetOptions opts;
  opts.color_limit = 3;
  opts.base_seed = 100;
  const auto small = build_dataset(DatasetId::car_fake, {}, opts);
  CHECK(small.size() == 6);
  CHECK(small[5].source.seed == 105);
  opts.color_limit = 0;
  CHECK_THROWS_AS(build_dataset(DatasetId::car_fake, {}, opts), ValidationError);
}

TEST_CASE("dataset counts with synthetic assets") {
  TempDir dir("assets");
  fpe::test::write_synthetic_assets(dir.path());
  CHECK(build_dataset(DatasetId::car_real, dir.path()).size() == 3321);
  CHECK(build_dataset(DatasetId::imagenet_fake, dir.path()).size() == 1182);
  CHECK(build_dataset(DatasetId::imagenet_real, dir.path()).size() == 1092);

  const auto real = build_dataset(DatasetId::car_real, dir.path());
  for (const auto& p : real) {
    CHECK(p.source.type == EditSource::Type::real_image);
    CHECK(fs::exists(p.source.image_path));
    CHECK(p.source_prompt != p.target_prompt);
  }
  const auto fake = build_dataset(DatasetId::imagenet_fake, dir.path());
  for (size_t i = 0; i < fake.size(); ++i) CHECK(fake[i].source.seed == i);
  // Builds are deterministic.
  CHECK(dataset_manifest(DatasetId::imagenet_fake, fake) ==
        dataset_manifest(DatasetId::imagenet_fake, build_dataset(DatasetId::imagenet_fake, dir.path())));
  CHECK(dataset_manifest(DatasetId::car_real, real).at("count") == 3321);
}

TEST_CASE("real datasets report missing assets") {
  TempDir dir("assets_missing");
  CHECK_THROWS_WITH_AS(build_dataset(DatasetId::car_real, dir.path()), doctest::Contains("car_real.json"),
                       ValidationError);
  CHECK_THROWS_AS(build_dataset(DatasetId::imagenet_fake, dir.path()), ValidationError);

  fpe::test::write_synthetic_assets(dir.path(), 4, 5);
  fs::remove(dir.path() / "cars" / "car_2.png");
  fs::remove(dir.path() / "imagenet" / "img_0.png");
  CHECK_THROWS_WITH_AS(build_dataset(DatasetId::car_real, dir.path()), doctest::Contains("car_2.png"),
                       ValidationError);
  CHECK_THROWS_WITH_AS(build_dataset(DatasetId::imagenet_real, dir.path()), doctest::Contains("img_0.png"),
                       ValidationError);
  // The fake set needs only the query list.
  CHECK(build_dataset(DatasetId::imagenet_fake, dir.path()).size() == 5 + 90);

  io::write_text_atomic(dir.path() / kCarRealAsset, R"([{"image": "cars/car_0.png"}])");
  CHECK_THROWS_WITH_AS(build_dataset(DatasetId::car_real, dir.path()), doctest::Contains("align-colors"),
                       ValidationError);
}

TEST_CASE("dataset id names") {
  for (auto id : {DatasetId::car_fake, DatasetId::car_real, DatasetId::imagenet_fake, DatasetId::imagenet_real}) {
    CHECK(parse_dataset_id(to_string(id)) == id);
  }
  CHECK_THROWS_AS(parse_dataset_id("coco"), ValidationError);
}

TEST_CASE("clip score and directional similarity match hand computation") {
  Rng rng(2024);
  for (int trial = 0; trial < 200; ++trial) {
    const int64_t n = 4 + trial % 60;
    const Tensor a = random_vec(rng, n), b = random_vec(rng, n), c = random_vec(rng, n), d = random_vec(rng, n);
    CHECK(std::abs(cosine_similarity(a, b) - oracle_cos(a, b)) <= 1e-6);
    CHECK(std::abs(clip_score(a, b) - 100.0 * std::max(0.0, oracle_cos(a, b))) <= 1e-6);
    const auto cds = clip_directional_similarity(a, b, c, d);
    REQUIRE(cds.has_value());
    CHECK(std::abs(*cds - oracle_cds(a, b, c, d)) <= 1e-6);
  }
}

TEST_CASE("clip score clips negative similarity") {
  const Tensor a({3}, {1, 0, 0});
  const Tensor b({3}, {-1, 0.5f, 0});
  CHECK(clip_score(a, b) == 0.0);
  CHECK(clip_score(a, a) == doctest::Approx(100.0));
}

TEST_CASE("directional similarity is null for unchanged images or texts") {
  Rng rng(5);
  const Tensor img = random_vec(rng, 16), txt_a = random_vec(rng, 16), txt_b = random_vec(rng, 16);
  CHECK_FALSE(clip_directional_similarity(img, img, txt_a, txt_b).has_value());
  CHECK_FALSE(clip_directional_similarity(img, random_vec(rng, 16), txt_a, txt_a).has_value());
  // Scaling an embedding does not change its direction.
  Tensor scaled = img;
  for (int64_t i = 0; i < scaled.numel(); ++i) scaled[i] *= 3.0f;
  CHECK_FALSE(clip_directional_similarity(img, scaled, txt_a, txt_b).has_value());
}

TEST_CASE("metric inputs are checked") {
  CHECK_THROWS_AS(cosine_similarity(Tensor({3}), Tensor({3}, 1.0f)), ValidationError);
  CHECK_THROWS_AS(cosine_similarity(Tensor({3}, 1.0f), Tensor({4}, 1.0f)), ShapeError);
}

TEST_CASE("metric table csv and summary") {
  MetricTable t;
  t.dataset = "car_fake";
  t.encoder_id = "tiny-clip";
  t.method = {{"method", "fpe"}};
  t.rows.push_back({"car_fake-0", 30.0, 0.5, 2.0, 1.5, true, ""});
  t.rows.push_back({"car_fake-1", 20.0, std::nullopt, 4.0, 3.0, true, ""});
  t.rows.push_back({"car_fake-2", 0.0, std::nullopt, 0.0, 0.0, false, "bad \"input\", twice"});
  CHECK(t.successes() == 2);
  CHECK(t.cds_count() == 1);
  CHECK(t.mean_cs() == doctest::Approx(25.0));
  CHECK(t.mean_cds() == doctest::Approx(0.5));
  CHECK(t.mean_edit_seconds() == doctest::Approx(3.0));
  CHECK(t.to_csv() ==
        "pair_id,status,cs,cds,edit_seconds,denoise_seconds,error\n"
        "car_fake-0,ok,30.000000,0.500000,2.000000,1.500000,\n"
        "car_fake-1,ok,20.000000,,4.000000,3.000000,\n"
        "car_fake-2,failed,,,,,\"bad \"\"input\"\", twice\"\n");
  const auto s = t.summary_json();
  CHECK(s.at("failures") == 1);
  CHECK(s.at("cds_defined") == 1);
  CHECK(t.summary().find("25.00") != std::string::npos);
}

TEST_CASE("tiny clip scorer") {
  const auto scorer = ClipScorer::tiny();
  const Image img(40, 24, 90);
  CHECK(scorer->preprocess(img).shape() == Shape{3, 32, 32});
  const Tensor e = scorer->embed_image(img);
  CHECK(e.numel() == 16);
  CHECK(e.bit_equal(ClipScorer::tiny()->embed_image(img)));
  CHECK(scorer->embed_text("a red car").numel() == 16);
  CHECK_THROWS_AS(scorer->embed_text(""), ValidationError);
  const double cs = clip_score(e, scorer->embed_text("a red car"));
  CHECK((cs >= 0.0 && cs <= 100.0));
}

TEST_CASE("missing clip weights are named") {
  TempDir dir("clip_missing");
  CHECK_THROWS_WITH(ClipScorer::load(dir.path()), doctest::Contains("config.json"));
}

TEST_CASE("align_car_color picks the closest prompt") {
  LookupEmbedder e;
  e.image_text[10] = "a blue car";
  e.image_text[20] = "a red car";
  CHECK(align_car_color(e, Image(4, 4, 10), {"red", "green", "blue"}) == "blue");
  CHECK(align_car_color(e, Image(4, 4, 20), {"red", "green", "blue"}) == "red");
  CHECK_THROWS_AS(align_car_color(e, Image(4, 4, 10), {}), ValidationError);
}

TEST_CASE("benchmark run on the fixture") {
  TempDir dir("bench");
  auto pairs = build_dataset(DatasetId::car_fake, {});
  pairs.resize(3);
  // A pair whose image is missing fails alone.
  pairs[1].source.type = EditSource::Type::real_image;
  pairs[1].source.image_path = (dir.path() / "absent.png").string();
  EditJob method;
  method.sampler.step_count = 3;
  const auto scorer = ClipScorer::tiny();
  BenchmarkOptions opts;
  opts.out_dir = dir.path() / "out";
  const MetricTable t = benchmark_run(tiny(), *scorer, pairs, method, opts);
  REQUIRE(t.rows.size() == 3);
  CHECK(t.rows[0].ok);
  CHECK_FALSE(t.rows[1].ok);
  CHECK(t.rows[2].ok);
  CHECK(t.dataset == "car_fake");
  CHECK(t.encoder_id == "tiny-clip");
  CHECK_FALSE(t.method.contains("target_prompt"));
  for (const auto& r : {t.rows[0], t.rows[2]}) {
    CHECK((r.cs >= 0.0 && r.cs <= 100.0));
    CHECK(r.edit_seconds > 0.0);
    CHECK(r.edit_seconds >= r.denoise_seconds);
  }
  CHECK(fs::exists(opts.out_dir / "metrics.csv"));
  CHECK(fs::exists(opts.out_dir / "summary.json"));
  CHECK(fs::exists(opts.out_dir / "images" / "car_fake-0.png"));
  CHECK(io::read_text(opts.out_dir / "metrics.csv") == t.to_csv());

  // Scores follow from the written image and the direct edit.
  EditJob job = method;
  job.source = pairs[0].source;
  job.target_prompt = pairs[0].target_prompt;
  job.sampler.seed = pairs[0].source.seed;
  const EditOutcome direct = run_edit(tiny(), job);
  CHECK(t.rows[0].cs == doctest::Approx(clip_score(scorer->embed_image(direct.edited),
                                                   scorer->embed_text(pairs[0].target_prompt))));

  BenchmarkOptions limited;
  limited.limit = 1;
  CHECK(benchmark_run(tiny(), *scorer, pairs, method, limited).rows.size() == 1);
}
