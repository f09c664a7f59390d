// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "picr/layers.hpp"
#include "picr/tensor.hpp"

namespace picr {

enum class Mode { Train, Eval };

class BitstreamError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class CorruptStreamError : public BitstreamError {
 public:
  using BitstreamError::BitstreamError;
};
class TruncatedStreamError : public BitstreamError {
 public:
  using BitstreamError::BitstreamError;
};

inline constexpr double kLikelihoodFloor = 2.3283064365386963e-10;  // 2^-32
inline constexpr int kCdfPrecision = 16;
inline constexpr std::uint32_t kCdfTotal = 1u << kCdfPrecision;

double round_half_away(double v);
double standard_normal_cdf(double x);

/// Train: v + u with u ~ U[-0.5, 0.5), gradients pass to v.
/// Eval: round(v - offset) + offset, detached.
Tensor quantize(const Tensor& v, Mode mode, Rng* rng = nullptr, const Tensor& offset = {});

/// Φ((ŷ-μ+½)/σ) - Φ((ŷ-μ-½)/σ), floored at 2^-32. σ is clamped to `sigma_min`.
Tensor gaussian_likelihood(const Tensor& y_hat, const Tensor& mu, const Tensor& sigma,
                           double sigma_min);

/// Σ -log2 p over both likelihood tensors, divided by `pixels`.
Tensor rate_bpp(const Tensor& likelihood_y, const Tensor& likelihood_z, double pixels);

/// Per-channel learned univariate CDF for the hyper-latent.
///
/// Each channel maps x through a monotone 1→3→3→3→1 network; the CDF is the
/// sigmoid of its output.
class FactorizedPrior {
 public:
  FactorizedPrior() = default;
  FactorizedPrior(std::size_t channels, Rng& rng, double init_scale = 10.0);

  /// Likelihood of each element of a C×H×W tensor (floored at 2^-32).
  Tensor likelihood(const Tensor& z_hat) const;
  /// Probability mass of integer `k` in `channel`, without gradients.
  double pmf(std::size_t channel, double k) const;
  double cdf(std::size_t channel, double x) const;

  std::size_t channels() const { return channels_; }
  void collect(ParameterList& out, const std::string& prefix) const;

 private:
  Tensor logits_cumulative(const Tensor& x) const;  // x: C×1×N
  double logit(std::size_t channel, double x) const;

  std::size_t channels_ = 0;
  std::vector<Tensor> matrices_, biases_, factors_;
};

/// Scale table for coding the Gaussian-modelled latent.
class GaussianConditional {
 public:
  static constexpr double kSigmaMin = 0.11;
  static constexpr double kSigmaMax = 256.0;
  static constexpr std::size_t kLevels = 64;

  GaussianConditional();

  const std::vector<double>& scale_table() const { return scales_; }
  /// Index of the table entry nearest to sigma in the log domain.
  std::size_t scale_index(double sigma) const;
  /// Probability mass of integer offset k from the mean at scale sigma.
  static double pmf(double k, double sigma);

 private:
  std::vector<double> scales_;
};

/// Quantized CDFs, one row per coding context.
///
/// Row r covers symbols offset[r] .. offset[r]+n-1 at indices 0..n-1 and an
/// escape symbol at index n; cdf has n+2 entries, cdf[0] = 0 and
/// cdf[n+1] = 2^16.
struct CdfTable {
  std::vector<std::vector<std::uint32_t>> cdf;
  std::vector<std::int32_t> offset;

  std::size_t rows() const { return cdf.size(); }
  std::size_t symbols(std::size_t row) const { return cdf[row].size() - 2; }
  std::size_t escape(std::size_t row) const { return cdf[row].size() - 2; }
  /// Model probability of a symbol index (escape included).
  double probability(std::size_t row, std::size_t index) const;
};

/// Quantizes a probability vector (the last entry being the escape mass) to
/// 2^16 with the largest-remainder rule; every bin receives at least 1.
std::vector<std::uint32_t> quantize_cdf(const std::vector<double>& pmf);

CdfTable build_cdf_tables(const GaussianConditional& gaussian);
CdfTable build_cdf_tables(const FactorizedPrior& prior);

/// Bits needed by the quantized tables for the given symbols, counting
/// escape bypass bits.
double coded_bits(std::span<const std::int32_t> symbols, std::span<const std::uint32_t> contexts,
                  const CdfTable& table);

/// Carry-propagating range coder over 16-bit frequency tables.
class RangeEncoder {
 public:
  void encode(std::uint32_t cum, std::uint32_t freq);
  void encode_bits(std::uint32_t value, int count);
  std::vector<std::uint8_t> finish();

 private:
  void normalize();
  void shift_low();

  std::uint64_t low_ = 0;
  std::uint32_t range_ = 0xFFFFFFFFu;
  std::uint8_t cache_ = 0;
  std::uint64_t cache_size_ = 1;
  std::vector<std::uint8_t> out_;
};

class RangeDecoder {
 public:
  explicit RangeDecoder(std::span<const std::uint8_t> bytes);

  /// Decodes a symbol index from a CDF row.
  std::size_t decode(std::span<const std::uint32_t> cdf);
  std::uint32_t decode_bits(int count);
  /// Throws unless every byte was consumed.
  void finish() const;

 private:
  void normalize();
  std::uint8_t next();

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
  std::uint32_t code_ = 0;
  std::uint32_t range_ = 0xFFFFFFFFu;
};

std::vector<std::uint8_t> range_encode(std::span<const std::int32_t> symbols, const CdfTable& table,
                                       std::span<const std::uint32_t> contexts);
std::vector<std::int32_t> range_decode(std::span<const std::uint8_t> bytes, const CdfTable& table,
                                       std::span<const std::uint32_t> contexts, std::size_t count);

/// Chunk wire format: big-endian u32 length, payload, u16 sentinel 0xBEEF.
inline constexpr std::uint16_t kChunkSentinel = 0xBEEF;
void append_chunk(std::vector<std::uint8_t>& out, std::span<const std::uint8_t> payload);
/// Reads one chunk at `pos`, advancing it. Throws on truncation or a bad sentinel.
std::span<const std::uint8_t> read_chunk(std::span<const std::uint8_t> in, std::size_t& pos);

}  // namespace picr
