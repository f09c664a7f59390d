// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <stdexcept>

#include "picr/tensor.hpp"

namespace picr {

class ImageIoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Reads a PNG, PPM (P6) or PGM (P5) file as a C×H×W tensor in [0,1].
///
/// `channels` is 1 or 3: colour images are averaged to gray for 1, gray images
/// are replicated for 3. Alpha is composited away by libpng; 16-bit netpbm
/// samples keep full precision.
Tensor read_image(const std::filesystem::path& path, std::size_t channels);

/// Writes a 1- or 3-channel tensor as 8-bit PNG, or PGM/PPM when the
/// extension is .pgm/.ppm. Values are clamped to [0,1] and rounded.
void write_image(const std::filesystem::path& path, const Tensor& image);

/// 8-bit quantization used by the writers: round(clamp(v,0,1)*255).
std::uint8_t to_byte(double v);

}  // namespace picr
