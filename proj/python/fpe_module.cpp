// SPDX-License-Identifier: Apache-2.0
// Python bindings. JSON crosses the boundary as text; the package wrapper
// parses it into dicts.
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <json.hpp>

#include "fpe/attention.hpp"
#include "fpe/backend.hpp"
#include "fpe/editing.hpp"
#include "fpe/eval.hpp"
#include "fpe/jobs.hpp"
#include "fpe/probing.hpp"
#include "fpe/service.hpp"
#include "fpe/tokenizer.hpp"

namespace py = pybind11;
using nlohmann::json;

namespace {

fpe::Tensor to_tensor(const py::array_t<float, py::array::c_style | py::array::forcecast>& a) {
  fpe::Shape shape(a.shape(), a.shape() + a.ndim());
  fpe::Tensor t(shape);
  std::copy(a.data(), a.data() + a.size(), t.data());
  return t;
}

py::array_t<float> to_array(const fpe::Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<float> out(shape);
  std::copy(t.data(), t.data() + t.numel(), out.mutable_data());
  return out;
}

py::array_t<uint8_t> image_array(const fpe::Image& img) {
  py::array_t<uint8_t> out({img.height, img.width, 3});
  std::copy(img.rgb.begin(), img.rgb.end(), out.mutable_data());
  return out;
}

std::shared_ptr<const fpe::ModelAdapter> backbone(const std::string& id) {
  static auto loader = fpe::cached_backbone_loader("cpu");
  return loader(id.empty() ? "tiny-test" : id);
}

fpe::ToolkitConfig config_for(const std::string& storage_root) {
  fpe::ToolkitConfig cfg = fpe::ToolkitConfig::load();
  if (!storage_root.empty()) cfg.storage_root = storage_root;
  cfg.validate();
  return cfg;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Attention-map editing, probing and evaluation toolkit";

  // Translators run newest first, so the base class is registered first.
  py::register_exception<fpe::Error>(m, "ToolkitError", PyExc_RuntimeError);
  py::register_exception<fpe::ValidationError>(m, "ValidationError", PyExc_ValueError);

  m.def("schemas_json", [] { return fpe::api_schemas().dump(); }, "All request schemas as one JSON document.");

  m.def(
      "check_request",
      [](const std::string& kind, const std::string& request) -> py::object {
        const auto err = fpe::validate_schema(fpe::request_schema(kind), json::parse(request));
        if (!err) return py::none();
        return py::make_tuple(err->pointer, err->message);
      },
      py::arg("kind"), py::arg("request_json"),
      "Schema check; returns None or a (pointer, message) tuple.");

  m.def(
      "sites_json",
      [](const std::string& backbone_id, const std::string& storage_root) {
        fpe::JobService service(config_for(storage_root));
        return service.sites(backbone_id).dump();
      },
      py::arg("backbone_id") = "", py::arg("storage_root") = "");

  m.def(
      "run_job_json",
      [](const std::string& kind, const std::string& request, const std::string& storage_root) {
        fpe::JobService service(config_for(storage_root));
        fpe::JobRecord r;
        {
          py::gil_scoped_release release;
          r = service.run_sync(kind, json::parse(request));
        }
        json out = r.to_json();
        out["artifacts_dir"] = service.store().artifact_dir(r.id).string();
        return out.dump();
      },
      py::arg("kind"), py::arg("request_json"), py::arg("storage_root") = "",
      "Validates, records and runs one job synchronously; returns the job record.");

  m.def(
      "generate",
      [](const std::string& prompt, uint64_t seed, int steps, float guidance, const std::string& backbone_id) {
        const auto model = backbone(backbone_id);
        fpe::SamplerConfig cfg;
        cfg.seed = seed;
        cfg.step_count = steps;
        cfg.guidance_scale = guidance;
        cfg.validate();
        fpe::Image img;
        {
          py::gil_scoped_release release;
          const fpe::ContextEmbedding p = model->encode_prompt(prompt);
          img = model->decode_latent(model->denoise(model->initial_latent(cfg), &p, cfg, nullptr));
        }
        return image_array(img);
      },
      py::arg("prompt"), py::arg("seed") = 0, py::arg("steps") = 50, py::arg("guidance") = 7.5f,
      py::arg("backbone_id") = "", "Direct text-to-image generation; returns an HxWx3 uint8 array.");

  m.def(
      "edit",
      [](const std::string& src, const std::string& dst, uint64_t seed, int steps, double ratio,
         std::vector<std::string> kinds, const std::string& backbone_id) {
        const auto model = backbone(backbone_id);
        fpe::SamplerConfig cfg;
        cfg.seed = seed;
        cfg.step_count = steps;
        cfg.validate();
        fpe::InjectionPolicy policy = fpe::InjectionPolicy::fpe_default();
        policy.kinds.clear();
        for (const auto& k : kinds) policy.kinds.insert(fpe::parse_attn_kind(k));
        policy.replace_ratio = ratio;
        policy.validate();
        fpe::EditOutcome out;
        {
          py::gil_scoped_release release;
          out = fpe::fpe_generated(*model, src, dst, cfg, policy);
        }
        py::dict d;
        d["source"] = image_array(out.source_image);
        d["edited"] = image_array(out.edited);
        d["injections"] = out.injections;
        d["latent_distance"] = fpe::l2_distance(out.edited_latent.z, out.source_latent.z);
        return d;
      },
      py::arg("src"), py::arg("dst"), py::arg("seed") = 0, py::arg("steps") = 50, py::arg("ratio") = 0.6,
      py::arg("kinds") = std::vector<std::string>{"self"}, py::arg("backbone_id") = "",
      "Generated-image edit with the default site selection.");

  m.def(
      "compute_attention",
      [](const py::array_t<float, py::array::c_style | py::array::forcecast>& q,
         const py::array_t<float, py::array::c_style | py::array::forcecast>& k, int d) {
        return to_array(fpe::compute_attention(to_tensor(q), to_tensor(k), d));
      },
      py::arg("q"), py::arg("k"), py::arg("d"), "Row-wise softmax(Q K^T / sqrt(d)).");

  m.def(
      "clip_score",
      [](const py::array_t<float>& image, const py::array_t<float>& text) {
        return fpe::clip_score(to_tensor(image), to_tensor(text));
      },
      py::arg("image_embedding"), py::arg("text_embedding"));

  m.def(
      "clip_directional_similarity",
      [](const py::array_t<float>& si, const py::array_t<float>& di, const py::array_t<float>& st,
         const py::array_t<float>& dt) {
        return fpe::clip_directional_similarity(to_tensor(si), to_tensor(di), to_tensor(st), to_tensor(dt));
      },
      py::arg("src_image"), py::arg("dst_image"), py::arg("src_text"), py::arg("dst_text"),
      "Cosine of the image and text deltas; None when either delta vanishes.");

  m.def(
      "dataset_manifest_json",
      [](const std::string& id, const std::string& assets_dir) {
        const fpe::DatasetId dataset = fpe::parse_dataset_id(id);
        return fpe::dataset_manifest(dataset, fpe::build_dataset(dataset, assets_dir)).dump();
      },
      py::arg("dataset"), py::arg("assets_dir") = "");

  m.def(
      "probe_sanity_gate",
      [](uint64_t seed) {
        fpe::SanityResult r;
        {
          py::gil_scoped_release release;
          r = fpe::probe_sanity_gate({}, seed);
        }
        py::dict d;
        d["planted_per_class"] = r.planted_per_class;
        d["shuffled_mean"] = r.shuffled_mean;
        d["pass"] = r.pass();
        return d;
      },
      py::arg("seed") = 0);

  m.def(
      "bpe_encode",
      [](const std::string& vocab_json, const std::string& merges_txt, const std::string& text, int max_length) {
        const auto tok = fpe::BpeTokenizer::from_files(vocab_json, merges_txt, max_length);
        const fpe::TokenizedPrompt tp = tok->encode(text);
        return std::vector<int>(tp.ids.begin(), tp.ids.begin() + tp.length);
      },
      py::arg("vocab_json"), py::arg("merges_txt"), py::arg("text"), py::arg("max_length") = 77,
      "Unpadded token ids, including the start and end markers.");
}
