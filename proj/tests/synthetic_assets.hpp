// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

#include "fpe/eval.hpp"
#include "fpe/image.hpp"
#include "fpe/io.hpp"
#include "fpe/probing.hpp"

namespace fpe::test {

// Writes stand-in evaluation assets with the real datasets' shapes: 123
// labeled car photos and 1,092 source/target queries with images. Pixel
// content is a flat color per file.
inline void write_synthetic_assets(const std::filesystem::path& dir, int car_images = 123, int queries = 1092) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "cars");
  fs::create_directories(dir / "imagenet");
  const auto& colors = words::edit_colors();
  const auto& animals = words::animals();
  nlohmann::json cars = nlohmann::json::array();
  for (int i = 0; i < car_images; ++i) {
    const std::string rel = "cars/car_" + std::to_string(i) + ".png";
    write_png(dir / rel, Image(8, 8, static_cast<uint8_t>(i % 256)));
    cars.push_back({{"image", rel}, {"color", colors[static_cast<size_t>(i) % colors.size()]}});
  }
  io::write_text_atomic(dir / kCarRealAsset, cars.dump(1));
  nlohmann::json flexit = nlohmann::json::array();
  for (int i = 0; i < queries; ++i) {
    const std::string rel = "imagenet/img_" + std::to_string(i) + ".png";
    write_png(dir / rel, Image(8, 8, static_cast<uint8_t>((i * 7) % 256)));
    // Offsets 1..9 never map an animal onto itself.
    const size_t a = static_cast<size_t>(i) % animals.size();
    const size_t b = (a + 1 + (static_cast<size_t>(i) / animals.size()) % (animals.size() - 1)) % animals.size();
    flexit.push_back({{"source", animals[a]}, {"target", animals[b]}, {"image", rel}});
  }
  io::write_text_atomic(dir / kFlexitAsset, flexit.dump(1));
}

}  // namespace fpe::test
