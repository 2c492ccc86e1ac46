// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fpe/clip.hpp"
#include "fpe/editing.hpp"

namespace fpe {

enum class DatasetId { car_fake, car_real, imagenet_fake, imagenet_real };
std::string to_string(DatasetId id);
DatasetId parse_dataset_id(const std::string& s);

struct EditPair {
  std::string pair_id;  // "<dataset>-<index>"
  DatasetId dataset = DatasetId::car_fake;
  EditSource source;    // seeded prompt for fake sets, image path for real sets
  std::string source_prompt;
  std::string target_prompt;

  nlohmann::json to_json() const;
};

struct DatasetOptions {
  // Debug: use only the first N of the 28 color words (car datasets).
  std::optional<int> color_limit;
  // Seed of pair i in a fake dataset is base_seed + i.
  uint64_t base_seed = 0;
};

// Asset files, relative to the assets directory:
//   car_real.json         [{"image": path, "color": word}, ...]
//   flexit_queries.json   [{"source": label, "target": label, "image": path?}, ...]
// Image paths are relative to the assets directory.
inline constexpr const char* kCarRealAsset = "car_real.json";
inline constexpr const char* kFlexitAsset = "flexit_queries.json";

// Deterministic pair list. Raises ValidationError naming every missing file
// when a real dataset's assets are absent; never subsamples.
std::vector<EditPair> build_dataset(DatasetId id, const std::filesystem::path& assets_dir,
                                    const DatasetOptions& options = {});
nlohmann::json dataset_manifest(DatasetId id, const std::vector<EditPair>& pairs);

/// Joint image/text embedding space used for scoring.
class ImageTextEmbedder {
 public:
  virtual ~ImageTextEmbedder() = default;
  virtual Tensor embed_image(const Image& image) const = 0;
  virtual Tensor embed_text(const std::string& text) const = 0;
  virtual std::string id() const = 0;
};

/// CLIP towers with their output projections, in the transformers layout
/// (config.json, model.safetensors, vocab.json, merges.txt).
class ClipScorer final : public ImageTextEmbedder {
 public:
  ClipScorer(std::string id, const ClipTextConfig& text_cfg, const ClipVisionConfig& vision_cfg, int projection_dim,
             nn::ParamSource& params, std::unique_ptr<Tokenizer> tokenizer);

  static std::unique_ptr<ClipScorer> load(const std::filesystem::path& dir);
  // Small random-weight scorer for tests and desk-scale smoke runs.
  static std::unique_ptr<ClipScorer> tiny(uint64_t seed = 7);

  Tensor embed_image(const Image& image) const override;
  Tensor embed_text(const std::string& text) const override;
  std::string id() const override { return id_; }
  // Shorter-side bicubic resize, center crop and per-channel normalization.
  Tensor preprocess(const Image& image) const;

 private:
  std::string id_;
  ClipTextModel text_;
  ClipVisionModel vision_;
  Tensor text_projection_;    // [projection, text hidden]
  Tensor visual_projection_;  // [projection, vision hidden]
  std::unique_ptr<Tokenizer> tokenizer_;
};

// FPE_CLIP_DIR or ~/.cache/fpe/clip-vit-large-patch14.
std::filesystem::path clip_root();
inline constexpr const char* kPinnedClipId = "openai/clip-vit-large-patch14";

double cosine_similarity(const Tensor& a, const Tensor& b);
// 100 * max(cos(image, text), 0).
double clip_score(const Tensor& image_embedding, const Tensor& text_embedding);
// Cosine between the normalized image delta and the normalized text delta.
// nullopt when either delta is zero.
std::optional<double> clip_directional_similarity(const Tensor& src_image, const Tensor& dst_image,
                                                  const Tensor& src_text, const Tensor& dst_text);

struct MetricRow {
  std::string pair_id;
  double cs = 0.0;
  std::optional<double> cds;
  double edit_seconds = 0.0;
  double denoise_seconds = 0.0;
  bool ok = true;
  std::string error;
};

struct MetricTable {
  std::string dataset;
  std::string encoder_id;
  nlohmann::json method;
  std::vector<MetricRow> rows;

  int successes() const;
  int cds_count() const;
  double mean_cs() const;
  double mean_cds() const;
  double mean_edit_seconds() const;

  // Fixed column order: pair_id,status,cs,cds,edit_seconds,denoise_seconds,error
  std::string to_csv() const;
  std::string summary() const;
  nlohmann::json summary_json() const;
};

struct BenchmarkOptions {
  // Only the first N pairs when set.
  std::optional<int> limit;
  // Edited images and the CSV are written here when non-empty.
  std::filesystem::path out_dir;
};

// Runs each pair sequentially with `method` as the job template (its source
// and target prompt are replaced per pair) and scores the result. Edit time
// is measured around the edit call alone.
MetricTable benchmark_run(const ModelAdapter& model, const ImageTextEmbedder& scorer,
                          const std::vector<EditPair>& pairs, const EditJob& method,
                          const BenchmarkOptions& options = {});

// Zero-shot choice among `colors` for the "a <color> car" prompt closest to
// the image; used to label car_real sources.
std::string align_car_color(const ImageTextEmbedder& scorer, const Image& image,
                            const std::vector<std::string>& colors);

}  // namespace fpe
