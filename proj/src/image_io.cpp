// SPDX-License-Identifier: Apache-2.0
#include "picr/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

namespace picr {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

std::string lower_extension(const std::filesystem::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext;
}

// Interleaved samples to C×H×W with the requested channel count.
Tensor planar(const std::vector<double>& samples, std::size_t h, std::size_t w, std::size_t src_c,
              std::size_t channels) {
  std::vector<double> out(channels * h * w);
  const std::size_t colour = src_c >= 3 ? 3 : 1;
  for (std::size_t i = 0; i < h * w; ++i) {
    const double* px = &samples[i * src_c];
    if (channels == 1) {
      out[i] = colour == 3 ? (px[0] + px[1] + px[2]) / 3.0 : px[0];
    } else {
      for (std::size_t c = 0; c < 3; ++c) out[c * h * w + i] = px[colour == 3 ? c : 0];
    }
  }
  return Tensor({channels, h, w}, std::move(out));
}

Tensor read_png(const std::filesystem::path& path, std::size_t channels) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw ImageIoError("cannot read PNG " + path.string() + ": " + img.message);
  }
  // 8-bit sRGB code values; 16-bit files are reduced by libpng.
  img.format = PNG_FORMAT_RGB;
  std::vector<png_byte> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&img);
    throw ImageIoError("cannot decode PNG " + path.string() + ": " + img.message);
  }
  const std::size_t h = img.height, w = img.width;
  std::vector<double> samples(h * w * 3);
  for (std::size_t i = 0; i < samples.size(); ++i) samples[i] = buf[i] / 255.0;
  return planar(samples, h, w, 3, channels);
}

// Next whitespace-delimited token of a netpbm header, skipping comments.
std::string header_token(std::istream& in) {
  std::string tok;
  char c;
  while (in.get(c)) {
    if (c == '#') {
      std::string ignored;
      std::getline(in, ignored);
      if (!tok.empty()) break;
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(c);
  }
  return tok;
}

Tensor read_netpbm(const std::filesystem::path& path, std::size_t channels) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageIoError("cannot open " + path.string());
  const std::string magic = header_token(in);
  if (magic != "P5" && magic != "P6") throw ImageIoError(path.string() + ": unsupported netpbm type");
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(header_token(in));
    h = std::stoul(header_token(in));
    maxval = std::stoul(header_token(in));
  } catch (const std::exception&) {
    throw ImageIoError(path.string() + ": malformed netpbm header");
  }
  if (w == 0 || h == 0 || maxval == 0 || maxval > 65535) throw ImageIoError(path.string() + ": bad netpbm header");
  const std::size_t src_c = magic == "P6" ? 3 : 1;
  const std::size_t bytes_per = maxval > 255 ? 2 : 1;
  std::vector<unsigned char> raw(w * h * src_c * bytes_per);
  if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
    throw ImageIoError(path.string() + ": truncated pixel data");
  }
  std::vector<double> samples(w * h * src_c);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const unsigned v = bytes_per == 2 ? (raw[2 * i] << 8) | raw[2 * i + 1] : raw[i];
    samples[i] = static_cast<double>(v) / static_cast<double>(maxval);
  }
  return planar(samples, h, w, src_c, channels);
}

}  // namespace

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

Tensor read_image(const std::filesystem::path& path, std::size_t channels) {
  if (channels != 1 && channels != 3) throw std::invalid_argument("read_image: channels must be 1 or 3");
  if (!std::filesystem::exists(path)) throw ImageIoError("no such file: " + path.string());
  const std::string ext = lower_extension(path);
  if (ext == ".ppm" || ext == ".pgm" || ext == ".pnm") return read_netpbm(path, channels);
  return read_png(path, channels);
}

void write_image(const std::filesystem::path& path, const Tensor& image) {
  if (image.rank() != 3 || (image.dim(0) != 1 && image.dim(0) != 3)) {
    throw ShapeError("write_image: expected 1xHxW or 3xHxW, got " + shape_string(image.shape()));
  }
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  std::vector<std::uint8_t> pixels(c * h * w);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < h * w; ++i) pixels[i * c + ch] = to_byte(image[ch * h * w + i]);

  const std::string ext = lower_extension(path);
  if (ext == ".ppm" || ext == ".pgm") {
    if ((ext == ".ppm") != (c == 3)) throw ImageIoError(path.string() + ": channel count does not match extension");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ImageIoError("cannot write " + path.string());
    out << (c == 3 ? "P6" : "P5") << '\n' << w << ' ' << h << "\n255\n";
    out.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
    if (!out) throw ImageIoError("write failed: " + path.string());
    return;
  }
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(w);
  img.height = static_cast<png_uint_32>(h);
  img.format = c == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&img, path.c_str(), 0, pixels.data(), 0, nullptr)) {
    throw ImageIoError("cannot write PNG " + path.string() + ": " + img.message);
  }
}

}  // namespace picr
