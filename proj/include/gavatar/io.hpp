#pragma once

// PNG images and JSON encodings of cameras and head parameters.

#include "gavatar/headmodel.hpp"
#include "gavatar/raster.hpp"

#include <filesystem>
#include <nlohmann/json_fwd.hpp>

namespace gavatar::io {

/// 8-bit PNG with 1 (gray) or 3 (RGB) channels; values are clamped to [0,1] and rounded.
void write_png(const std::filesystem::path& path, const Image& img);
/// Values are k / 255. Grayscale files give 1 channel, RGB(A) files give 3.
Image read_png(const std::filesystem::path& path);

/// Round every value to the nearest multiple of 1/255 after clamping, as write_png stores it.
void quantize8(Image& img);

/// Row-major tiling of equally sized images into one image with `cols` columns.
Image tile_images(const std::vector<Image>& images, int cols);

nlohmann::json camera_to_json(const raster::Camera& cam);
raster::Camera camera_from_json(const nlohmann::json& j);

/// `include_delta` controls whether the V x 3 offsets are serialized.
nlohmann::json params_to_json(const headmodel::HeadParams& p, bool include_delta = true);
headmodel::HeadParams params_from_json(const nlohmann::json& j);

nlohmann::json matrix_to_json(const MatX& m);
MatX matrix_from_json(const nlohmann::json& j);

nlohmann::json read_json(const std::filesystem::path& path);
void write_json(const std::filesystem::path& path, const nlohmann::json& j);

}  // namespace gavatar::io
