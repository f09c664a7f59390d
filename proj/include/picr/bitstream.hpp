// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "picr/codec.hpp"
#include "picr/conditioning.hpp"
#include "picr/entropy.hpp"

namespace picr {

inline constexpr std::size_t kHeaderBytes = 10;
inline constexpr std::uint8_t kBitstreamVersion = 1;
inline constexpr std::size_t kPadMultiple = 64;

/// Raised for a stream that is not a bitstream of this format at all.
class FormatError : public BitstreamError {
 public:
  using BitstreamError::BitstreamError;
};

/// "PICR", version, height and width (u16 big-endian), m_q: 10 bytes.
struct BitstreamHeader {
  std::uint16_t height = 0;  // original, before padding
  std::uint16_t width = 0;
  std::uint8_t m_q = 0;

  std::array<std::uint8_t, kHeaderBytes> serialize() const;
  static BitstreamHeader parse(std::span<const std::uint8_t> bytes);
  double m_lambda() const { return m_q / 255.0; }
};

/// round(m·255), half away from zero. Throws for m outside [0,1].
std::uint8_t quantize_rate(double m);

/// Mirror-pads a C×H×W tensor on the bottom/right to multiples of `multiple`.
Tensor pad_to_multiple(const Tensor& chw, std::size_t multiple = kPadMultiple);
/// Keeps the top-left height×width region of a C×H×W tensor.
Tensor crop_chw(const Tensor& chw, std::size_t height, std::size_t width);

/// Quantized CDF tables derived from a codec's entropy models.
struct CodingTables {
  GaussianConditional gaussian;
  CdfTable y_table;
  CdfTable z_table;

  explicit CodingTables(const Codec& codec);
};

struct EncodeResult {
  std::vector<std::uint8_t> bytes;
  Tensor y_hat;               // encoder-side quantized latent
  double estimated_bpp = 0;   // model rate over original pixels
  double actual_bpp = 0;      // file bytes·8 over original pixels
  std::size_t z_payload = 0;  // range-coder bytes per chunk
  std::size_t y_payload = 0;
};

struct DecodeResult {
  BitstreamHeader header;
  Tensor y_hat;
  Tensor image;  // 3×height×width in [0,1]
};

/// Encodes an image (3×H×W) with ROI mask (1×H×W) at rate parameter m.
EncodeResult encode_image(const Codec& codec, const CodingTables& tables, const Tensor& image,
                          const Tensor& roi_mask, double m_lambda);
DecodeResult decode_image(const Codec& codec, const CodingTables& tables, std::span<const std::uint8_t> bytes);

/// The mask comes from an image file, a JSON MaskSpec file, or defaults to 1.
struct MaskSource {
  std::optional<std::filesystem::path> path;
  std::optional<MaskSpec> spec;
};

EncodeResult encode_file(const std::filesystem::path& image_path, const MaskSource& mask, double m_lambda,
                         const std::filesystem::path& checkpoint, const std::filesystem::path& out_path);
/// Writes the output image only after the whole stream decoded successfully.
DecodeResult decode_file(const std::filesystem::path& in_path, const std::filesystem::path& checkpoint,
                         const std::filesystem::path& out_image_path);

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);
void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace picr
