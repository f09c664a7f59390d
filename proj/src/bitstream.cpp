// SPDX-License-Identifier: Apache-2.0
#include "picr/bitstream.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "picr/attention.hpp"
#include "picr/image_io.hpp"

namespace picr {

namespace {

constexpr char kMagic[4] = {'P', 'I', 'C', 'R'};

std::size_t round_up(std::size_t v, std::size_t m) { return (v + m - 1) / m * m; }

}  // namespace

std::array<std::uint8_t, kHeaderBytes> BitstreamHeader::serialize() const {
  return {static_cast<std::uint8_t>(kMagic[0]), static_cast<std::uint8_t>(kMagic[1]),
          static_cast<std::uint8_t>(kMagic[2]), static_cast<std::uint8_t>(kMagic[3]),
          kBitstreamVersion,
          static_cast<std::uint8_t>(height >> 8), static_cast<std::uint8_t>(height & 0xFF),
          static_cast<std::uint8_t>(width >> 8), static_cast<std::uint8_t>(width & 0xFF),
          m_q};
}

BitstreamHeader BitstreamHeader::parse(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("not a PICR bitstream");
  if (bytes.size() < kHeaderBytes) throw TruncatedStreamError("bitstream header is truncated");
  if (bytes[4] != kBitstreamVersion) {
    throw FormatError("unsupported bitstream version " + std::to_string(bytes[4]));
  }
  BitstreamHeader h;
  h.height = static_cast<std::uint16_t>((bytes[5] << 8) | bytes[6]);
  h.width = static_cast<std::uint16_t>((bytes[7] << 8) | bytes[8]);
  h.m_q = bytes[9];
  if (h.height == 0 || h.width == 0) throw CorruptStreamError("bitstream header has a zero dimension");
  return h;
}

std::uint8_t quantize_rate(double m) {
  if (!(m >= 0.0 && m <= 1.0)) throw std::out_of_range("rate parameter must lie in [0,1]");
  return static_cast<std::uint8_t>(round_half_away(m * 255.0));
}

Tensor pad_to_multiple(const Tensor& chw, std::size_t multiple) {
  const std::size_t h = chw.dim(1), w = chw.dim(2);
  const std::size_t ph = round_up(h, multiple), pw = round_up(w, multiple);
  if (ph == h && pw == w) return chw;
  return hwc_to_chw(reflect_pad(chw_to_hwc(chw), ph, pw));
}

Tensor crop_chw(const Tensor& chw, std::size_t height, std::size_t width) {
  return hwc_to_chw(crop(chw_to_hwc(chw), height, width));
}

CodingTables::CodingTables(const Codec& codec)
    : y_table(build_cdf_tables(gaussian)), z_table(build_cdf_tables(codec.prior())) {}

EncodeResult encode_image(const Codec& codec, const CodingTables& tables, const Tensor& image,
                          const Tensor& roi_mask, double m_lambda) {
  if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("encoder expects a 3xHxW image");
  const std::size_t h = image.dim(1), w = image.dim(2);
  if (roi_mask.shape() != Shape{1, h, w}) {
    throw ShapeError("mask " + shape_string(roi_mask.shape()) + " does not match image " + shape_string(image.shape()));
  }
  if (h > std::numeric_limits<std::uint16_t>::max() || w > std::numeric_limits<std::uint16_t>::max()) {
    throw std::invalid_argument("image dimensions exceed the header's 16-bit fields");
  }
  NoGradGuard no_grad;
  BitstreamHeader header{static_cast<std::uint16_t>(h), static_cast<std::uint16_t>(w), quantize_rate(m_lambda)};
  // Condition on the transmitted rate so both sides agree.
  const auto cond = ConditioningInput::make(pad_to_multiple(image), pad_to_multiple(roi_mask), header.m_lambda());
  const LatentBundle lat = codec.analyze(cond, Mode::Eval);

  const std::size_t zn = lat.z_hat.dim(1) * lat.z_hat.dim(2);
  std::vector<std::int32_t> z_sym(lat.z_hat.size());
  std::vector<std::uint32_t> z_ctx(lat.z_hat.size());
  for (std::size_t i = 0; i < z_sym.size(); ++i) {
    z_sym[i] = static_cast<std::int32_t>(lat.z_hat[i]);
    z_ctx[i] = static_cast<std::uint32_t>(i / zn);
  }
  std::vector<std::int32_t> y_sym(lat.y_hat.size());
  std::vector<std::uint32_t> y_ctx(lat.y_hat.size());
  for (std::size_t i = 0; i < y_sym.size(); ++i) {
    y_sym[i] = static_cast<std::int32_t>(round_half_away(lat.y[i] - lat.mu[i]));
    y_ctx[i] = static_cast<std::uint32_t>(tables.gaussian.scale_index(lat.sigma[i]));
  }

  EncodeResult r;
  const auto head = header.serialize();
  r.bytes.assign(head.begin(), head.end());
  const auto z_bytes = range_encode(z_sym, tables.z_table, z_ctx);
  const auto y_bytes = range_encode(y_sym, tables.y_table, y_ctx);
  append_chunk(r.bytes, z_bytes);
  append_chunk(r.bytes, y_bytes);
  r.z_payload = z_bytes.size();
  r.y_payload = y_bytes.size();
  r.y_hat = lat.y_hat;
  const double pixels = static_cast<double>(h * w);
  r.estimated_bpp = rate_bpp(lat.likelihood_y, lat.likelihood_z, pixels).item();
  r.actual_bpp = static_cast<double>(r.bytes.size()) * 8.0 / pixels;
  return r;
}

DecodeResult decode_image(const Codec& codec, const CodingTables& tables, std::span<const std::uint8_t> bytes) {
  NoGradGuard no_grad;
  DecodeResult d;
  d.header = BitstreamHeader::parse(bytes);
  const std::size_t ph = round_up(d.header.height, kPadMultiple), pw = round_up(d.header.width, kPadMultiple);
  const std::size_t cy = codec.config().latent_channels, cz = codec.config().hyper_channels;
  const std::size_t yh = ph / 16, yw = pw / 16, zh = ph / 64, zw = pw / 64;

  std::size_t pos = kHeaderBytes;
  const auto z_chunk = read_chunk(bytes, pos);
  const auto y_chunk = read_chunk(bytes, pos);
  if (pos != bytes.size()) throw CorruptStreamError("trailing bytes after the last chunk");

  std::vector<std::uint32_t> z_ctx(cz * zh * zw);
  for (std::size_t i = 0; i < z_ctx.size(); ++i) z_ctx[i] = static_cast<std::uint32_t>(i / (zh * zw));
  const auto z_sym = range_decode(z_chunk, tables.z_table, z_ctx, z_ctx.size());
  Buffer zv(z_sym.begin(), z_sym.end());
  const Tensor z_hat({cz, zh, zw}, std::move(zv));
  const auto [mu, sigma] = codec.hyper_synthesis(z_hat);

  std::vector<std::uint32_t> y_ctx(cy * yh * yw);
  for (std::size_t i = 0; i < y_ctx.size(); ++i) {
    y_ctx[i] = static_cast<std::uint32_t>(tables.gaussian.scale_index(sigma[i]));
  }
  const auto y_sym = range_decode(y_chunk, tables.y_table, y_ctx, y_ctx.size());
  Buffer yv(y_sym.size());
  for (std::size_t i = 0; i < yv.size(); ++i) yv[i] = static_cast<double>(y_sym[i]) + mu[i];
  d.y_hat = Tensor({cy, yh, yw}, std::move(yv));

  const Tensor small({1, yh, yw}, d.header.m_lambda());
  d.image = crop_chw(codec.synthesize(d.y_hat, small, Mode::Eval), d.header.height, d.header.width);
  return d;
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

EncodeResult encode_file(const std::filesystem::path& image_path, const MaskSource& mask, double m_lambda,
                         const std::filesystem::path& checkpoint, const std::filesystem::path& out_path) {
  if (!std::filesystem::exists(checkpoint)) throw std::runtime_error("checkpoint not found: " + checkpoint.string());
  const Codec codec = Codec::load(checkpoint);
  const CodingTables tables(codec);
  const Tensor image = read_image(image_path, 3);
  const std::size_t h = image.dim(1), w = image.dim(2);
  Tensor roi;
  if (mask.path) {
    roi = load_mask(*mask.path, h, w);
  } else if (mask.spec) {
    roi = generate_mask(*mask.spec, h, w);
  } else {
    roi = Tensor({1, h, w}, 1.0);
  }
  EncodeResult r = encode_image(codec, tables, image, roi, m_lambda);
  write_bytes(out_path, r.bytes);
  return r;
}

DecodeResult decode_file(const std::filesystem::path& in_path, const std::filesystem::path& checkpoint,
                         const std::filesystem::path& out_image_path) {
  if (!std::filesystem::exists(checkpoint)) throw std::runtime_error("checkpoint not found: " + checkpoint.string());
  const auto bytes = read_bytes(in_path);
  const Codec codec = Codec::load(checkpoint);
  const CodingTables tables(codec);
  DecodeResult d = decode_image(codec, tables, bytes);
  write_image(out_image_path, d.image);
  return d;
}

}  // namespace picr
