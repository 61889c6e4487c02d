#include "gavatar/io.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <nlohmann/json.hpp>

namespace gavatar::io {

namespace {

using File = std::unique_ptr<FILE, int (*)(FILE*)>;

File open_file(const std::filesystem::path& path, const char* mode) {
  File f(std::fopen(path.c_str(), mode), &std::fclose);
  if (!f) throw Error("cannot open " + path.string());
  return f;
}

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace

void quantize8(Image& img) {
  for (double& v : img.data) v = to_byte(v) / 255.0;
}

void write_png(const std::filesystem::path& path, const Image& img) {
  require(img.channels == 1 || img.channels == 3, "write_png: need 1 or 3 channels");
  require(img.width > 0 && img.height > 0, "write_png: empty image");
  File f = open_file(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw Error("write_png: libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("write_png: failed writing " + path.string());
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, img.width, img.height, 8, img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<std::uint8_t> row(static_cast<size_t>(img.width) * img.channels);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < img.channels; ++c) row[x * img.channels + c] = to_byte(img.at(c, y, x));
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  if (std::fflush(f.get()) != 0) throw Error("write_png: failed writing " + path.string());
}

Image read_png(const std::filesystem::path& path) {
  File f = open_file(path, "rb");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw Error("read_png: libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError("read_png: corrupt file " + path.string());
  }
  png_init_io(png, f.get());
  png_read_info(png, info);
  png_set_strip_16(png);
  png_set_packing(png);
  png_set_strip_alpha(png);
  png_set_palette_to_rgb(png);
  png_set_expand_gray_1_2_4_to_8(png);
  png_read_update_info(png, info);
  const int w = static_cast<int>(png_get_image_width(png, info));
  const int h = static_cast<int>(png_get_image_height(png, info));
  const int c = png_get_channels(png, info);
  std::vector<std::uint8_t> row(png_get_rowbytes(png, info));
  Image img(c, h, w);
  for (int y = 0; y < h; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (int x = 0; x < w; ++x)
      for (int k = 0; k < c; ++k) img.at(k, y, x) = row[x * c + k] / 255.0;
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

Image tile_images(const std::vector<Image>& images, int cols) {
  require(!images.empty() && cols >= 1, "tile_images: need images and cols >= 1");
  const Image& first = images[0];
  for (const Image& im : images) require_same_shape(im, first, "tile_images");
  const int rows = (static_cast<int>(images.size()) + cols - 1) / cols;
  Image out(first.channels, rows * first.height, cols * first.width);
  for (size_t k = 0; k < images.size(); ++k) {
    const int oy = static_cast<int>(k) / cols * first.height, ox = static_cast<int>(k) % cols * first.width;
    for (int c = 0; c < first.channels; ++c)
      for (int y = 0; y < first.height; ++y)
        for (int x = 0; x < first.width; ++x) out.at(c, oy + y, ox + x) = images[k].at(c, y, x);
  }
  return out;
}

nlohmann::json matrix_to_json(const MatX& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    std::vector<double> row(m.cols());
    for (Eigen::Index c = 0; c < m.cols(); ++c) row[c] = m(r, c);
    rows.push_back(row);
  }
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", rows}};
}

MatX matrix_from_json(const nlohmann::json& j) {
  try {
    MatX m(j.at("rows").get<Eigen::Index>(), j.at("cols").get<Eigen::Index>());
    const auto& rows = j.at("data");
    if (static_cast<Eigen::Index>(rows.size()) != m.rows()) throw FormatError("matrix: row count mismatch");
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      if (static_cast<Eigen::Index>(rows[r].size()) != m.cols()) throw FormatError("matrix: column count mismatch");
      for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = rows[r][c].get<double>();
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("matrix: ") + e.what());
  }
}

nlohmann::json camera_to_json(const raster::Camera& cam) {
  return {{"width", cam.width}, {"height", cam.height}, {"K", matrix_to_json(cam.K)}, {"E", matrix_to_json(cam.E)}};
}

raster::Camera camera_from_json(const nlohmann::json& j) {
  raster::Camera cam;
  try {
    cam.width = j.at("width").get<int>();
    cam.height = j.at("height").get<int>();
    const MatX K = matrix_from_json(j.at("K")), E = matrix_from_json(j.at("E"));
    if (K.rows() != 3 || K.cols() != 3 || E.rows() != 4 || E.cols() != 4) throw FormatError("camera: bad matrix shape");
    cam.K = K;
    cam.E = E;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("camera: ") + e.what());
  }
  cam.check();
  return cam;
}

nlohmann::json params_to_json(const headmodel::HeadParams& p, bool include_delta) {
  auto vec = [](const VecX& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
  nlohmann::json j = {{"beta", vec(p.beta)}, {"theta", vec(p.theta)}, {"phi", vec(p.phi)}};
  if (include_delta) j["delta"] = matrix_to_json(MatX(p.delta));
  return j;
}

headmodel::HeadParams params_from_json(const nlohmann::json& j) {
  auto vec = [](const nlohmann::json& a) {
    const auto v = a.get<std::vector<double>>();
    return VecX(Eigen::Map<const VecX>(v.data(), static_cast<Eigen::Index>(v.size())));
  };
  headmodel::HeadParams p;
  try {
    p.beta = vec(j.at("beta"));
    p.theta = vec(j.at("theta"));
    p.phi = vec(j.at("phi"));
    if (j.contains("delta")) {
      const MatX d = matrix_from_json(j.at("delta"));
      if (d.cols() != 3 && d.rows() != 0) throw FormatError("params: delta must have 3 columns");
      p.delta = d.rows() == 0 ? MatX3(0, 3) : MatX3(d);
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("params: ") + e.what());
  }
  return p;
}

nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << j.dump(1) << '\n';
  if (!out) throw Error("failed writing " + path.string());
}

}  // namespace gavatar::io
