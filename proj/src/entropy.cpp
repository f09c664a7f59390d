// SPDX-License-Identifier: Apache-2.0
#include "picr/entropy.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numbers>
#include <numeric>

#include "picr/ops.hpp"

namespace picr {

namespace {

constexpr double kSupportThreshold = 1.0 / 131072.0;  // 2^-17: half a 16-bit bin
constexpr double kQuantileTail = 1.0 / 1048576.0;     // 2^-20
constexpr int kMaxEscapeBits = 31;

double normal_pdf(double x) { return std::exp(-0.5 * x * x) * 0.39894228040143267794; }

std::uint32_t escape_value(std::int64_t index, std::size_t n) {
  // Zig-zag of the distance beyond the row's range.
  if (index < 0) return static_cast<std::uint32_t>(2 * (-index - 1));
  return static_cast<std::uint32_t>(2 * (index - static_cast<std::int64_t>(n)) + 1);
}

int gamma_bits(std::uint32_t u) {
  const int nb = std::bit_width(static_cast<std::uint64_t>(u) + 1) - 1;
  return 2 * nb + 1;
}

}  // namespace

double round_half_away(double v) { return std::round(v); }

double standard_normal_cdf(double x) { return 0.5 * std::erfc(-x * std::numbers::sqrt2 / 2.0); }

Tensor quantize(const Tensor& v, Mode mode, Rng* rng, const Tensor& offset) {
  if (offset.defined() && offset.shape() != v.shape()) {
    throw ShapeError("quantize: offset shape mismatch");
  }
  if (mode == Mode::Train) {
    if (!rng) throw std::invalid_argument("quantize: training mode needs a random source");
    std::uniform_real_distribution<double> dist(-0.5, 0.5);
    std::vector<double> noise(v.size());
    for (double& u : noise) u = dist(*rng);
    return ops::add(v, Tensor(v.shape(), std::move(noise)));
  }
  const auto x = v.values();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double o = offset.defined() ? offset[i] : 0.0;
    out[i] = round_half_away(x[i] - o) + o;
  }
  return Tensor(v.shape(), std::move(out));
}

Tensor gaussian_likelihood(const Tensor& y_hat, const Tensor& mu, const Tensor& sigma,
                           double sigma_min) {
  if (y_hat.shape() != mu.shape() || y_hat.shape() != sigma.shape()) {
    throw ShapeError("gaussian_likelihood: operand shapes differ");
  }
  const Tensor s = ops::lower_bound(sigma, sigma_min);
  const auto y = y_hat.values();
  const auto m = mu.values();
  const auto sv = s.values();
  std::vector<double> p(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double v = std::fabs(y[i] - m[i]);
    p[i] = standard_normal_cdf((0.5 - v) / sv[i]) - standard_normal_cdf((-0.5 - v) / sv[i]);
  }
  Tensor raw = make_result(y_hat.shape(), std::move(p), {y_hat, mu, s}, [](TensorNode& self) {
    auto& yn = *self.inputs[0];
    auto& mn = *self.inputs[1];
    auto& sn = *self.inputs[2];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double r = yn.value[i] - mn.value[i];
      const double sig = sn.value[i];
      const double v = std::fabs(r);
      const double a = (0.5 - v) / sig;
      const double b = (-0.5 - v) / sig;
      const double pa = normal_pdf(a), pb = normal_pdf(b);
      const double sign = r > 0 ? 1.0 : (r < 0 ? -1.0 : 0.0);
      const double dr = sign * (pb - pa) / sig;
      if (yn.requires_grad) yn.ensure_grad()[i] += self.grad[i] * dr;
      if (mn.requires_grad) mn.ensure_grad()[i] -= self.grad[i] * dr;
      if (sn.requires_grad) sn.ensure_grad()[i] += self.grad[i] * (-(a * pa - b * pb) / sig);
    }
  });
  return ops::lower_bound(raw, kLikelihoodFloor);
}

Tensor rate_bpp(const Tensor& likelihood_y, const Tensor& likelihood_z, double pixels) {
  Tensor total = ops::sum(ops::log(likelihood_y));
  if (likelihood_z.defined() && likelihood_z.size() > 0) {
    total = ops::add(total, ops::sum(ops::log(likelihood_z)));
  }
  return ops::scale(total, -1.0 / (std::numbers::ln2 * pixels));
}

FactorizedPrior::FactorizedPrior(std::size_t channels, Rng& rng, double init_scale)
    : channels_(channels) {
  const std::vector<std::size_t> filters{1, 3, 3, 3, 1};
  const double scale = std::pow(init_scale, 1.0 / static_cast<double>(filters.size() - 1));
  std::uniform_real_distribution<double> bias_dist(-0.5, 0.5);
  for (std::size_t i = 0; i + 1 < filters.size(); ++i) {
    const double init = std::log(std::expm1(1.0 / scale / static_cast<double>(filters[i + 1])));
    matrices_.push_back(constant_parameter({channels, filters[i + 1], filters[i]}, init));
    std::vector<double> b(channels * filters[i + 1]);
    for (double& x : b) x = bias_dist(rng);
    biases_.push_back(Tensor::parameter({channels, filters[i + 1], 1}, std::move(b)));
    if (i + 2 < filters.size()) {
      factors_.push_back(constant_parameter({channels, filters[i + 1], 1}, 0.0));
    }
  }
}

Tensor FactorizedPrior::logits_cumulative(const Tensor& x) const {
  Tensor logits = x;
  for (std::size_t i = 0; i < matrices_.size(); ++i) {
    logits = ops::bmm(ops::softplus(matrices_[i]), logits);
    logits = ops::add_broadcast(logits, biases_[i]);
    if (i < factors_.size()) {
      logits = ops::add(logits, ops::mul_broadcast(ops::tanh(logits), ops::tanh(factors_[i])));
    }
  }
  return logits;
}

Tensor FactorizedPrior::likelihood(const Tensor& z_hat) const {
  if (z_hat.rank() != 3 || z_hat.dim(0) != channels_) {
    throw ShapeError("factorized prior: expected " + std::to_string(channels_) +
                     " channels, got " + shape_string(z_hat.shape()));
  }
  const std::size_t n = z_hat.dim(1) * z_hat.dim(2);
  const Tensor x = z_hat.reshape({channels_, 1, n});
  const Tensor lower = logits_cumulative(ops::add_scalar(x, -0.5));
  const Tensor upper = logits_cumulative(ops::add_scalar(x, 0.5));
  // Evaluate in the tail where the sigmoids are far from saturation.
  std::vector<double> sign(lower.size());
  for (std::size_t i = 0; i < sign.size(); ++i) sign[i] = (lower[i] + upper[i]) > 0 ? -1.0 : 1.0;
  const Tensor s(lower.shape(), std::move(sign));
  const Tensor lik = ops::abs(
      ops::sub(ops::sigmoid(ops::mul(s, upper)), ops::sigmoid(ops::mul(s, lower))));
  return ops::lower_bound(lik, kLikelihoodFloor).reshape(z_hat.shape());
}

double FactorizedPrior::logit(std::size_t channel, double x) const {
  std::vector<double> h{x};
  for (std::size_t i = 0; i < matrices_.size(); ++i) {
    const auto& m = matrices_[i];
    const std::size_t rows = m.dim(1), cols = m.dim(2);
    const auto mv = m.values().subspan(channel * rows * cols, rows * cols);
    const auto bv = biases_[i].values().subspan(channel * rows, rows);
    std::vector<double> next(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      double acc = bv[r];
      for (std::size_t c = 0; c < cols; ++c) {
        const double w = mv[r * cols + c];
        acc += (w > 30.0 ? w : std::log1p(std::exp(w))) * h[c];
      }
      if (i < factors_.size()) {
        acc += std::tanh(factors_[i].values()[channel * rows + r]) * std::tanh(acc);
      }
      next[r] = acc;
    }
    h = std::move(next);
  }
  return h[0];
}

double FactorizedPrior::cdf(std::size_t channel, double x) const {
  return 1.0 / (1.0 + std::exp(-logit(channel, x)));
}

double FactorizedPrior::pmf(std::size_t channel, double k) const {
  const double lo = logit(channel, k - 0.5);
  const double hi = logit(channel, k + 0.5);
  const double s = (lo + hi) > 0 ? -1.0 : 1.0;
  auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  return std::fabs(sig(s * hi) - sig(s * lo));
}

void FactorizedPrior::collect(ParameterList& out, const std::string& prefix) const {
  for (std::size_t i = 0; i < matrices_.size(); ++i) {
    out.push_back({prefix + ".matrix" + std::to_string(i), matrices_[i]});
    out.push_back({prefix + ".bias" + std::to_string(i), biases_[i]});
    if (i < factors_.size()) out.push_back({prefix + ".factor" + std::to_string(i), factors_[i]});
  }
}

GaussianConditional::GaussianConditional() : scales_(kLevels) {
  const double lo = std::log(kSigmaMin), hi = std::log(kSigmaMax);
  for (std::size_t i = 0; i < kLevels; ++i) {
    scales_[i] = std::exp(lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(kLevels - 1));
  }
}

std::size_t GaussianConditional::scale_index(double sigma) const {
  const double ls = std::log(std::max(sigma, kSigmaMin));
  const double lo = std::log(kSigmaMin), hi = std::log(kSigmaMax);
  const double pos = (ls - lo) / (hi - lo) * static_cast<double>(kLevels - 1);
  const long idx = std::lround(pos);
  return static_cast<std::size_t>(std::clamp<long>(idx, 0, static_cast<long>(kLevels) - 1));
}

double GaussianConditional::pmf(double k, double sigma) {
  const double v = std::fabs(k);
  return standard_normal_cdf((0.5 - v) / sigma) - standard_normal_cdf((-0.5 - v) / sigma);
}

double CdfTable::probability(std::size_t row, std::size_t index) const {
  const auto& c = cdf.at(row);
  return static_cast<double>(c.at(index + 1) - c.at(index)) / static_cast<double>(kCdfTotal);
}

std::vector<std::uint32_t> quantize_cdf(const std::vector<double>& pmf) {
  const std::size_t n = pmf.size();
  if (n == 0 || n > kCdfTotal) throw std::invalid_argument("quantize_cdf: bad row length");
  double mass = 0.0;
  for (double p : pmf) mass += std::max(p, 0.0);
  if (!(mass > 0.0)) throw std::invalid_argument("quantize_cdf: empty distribution");

  const double spare = static_cast<double>(kCdfTotal - n);
  std::vector<std::uint32_t> freq(n, 1);
  std::vector<std::pair<double, std::size_t>> remainder(n);
  std::uint64_t assigned = n;
  for (std::size_t i = 0; i < n; ++i) {
    const double share = std::max(pmf[i], 0.0) / mass * spare;
    const double base = std::floor(share);
    freq[i] += static_cast<std::uint32_t>(base);
    assigned += static_cast<std::uint64_t>(base);
    remainder[i] = {share - base, i};
  }
  std::uint64_t left = kCdfTotal - assigned;
  std::stable_sort(remainder.begin(), remainder.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t i = 0; left > 0; ++i, --left) ++freq[remainder[i % n].second];

  std::vector<std::uint32_t> cdf(n + 1, 0);
  for (std::size_t i = 0; i < n; ++i) cdf[i + 1] = cdf[i] + freq[i];
  return cdf;
}

namespace {

void add_row(CdfTable& table, std::int32_t first, const std::vector<double>& pmf_row) {
  std::vector<double> with_escape = pmf_row;
  const double covered = std::accumulate(pmf_row.begin(), pmf_row.end(), 0.0);
  with_escape.push_back(std::max(1.0 - covered, 0.0));
  table.cdf.push_back(quantize_cdf(with_escape));
  table.offset.push_back(first);
}

}  // namespace

CdfTable build_cdf_tables(const GaussianConditional& gaussian) {
  CdfTable table;
  for (double sigma : gaussian.scale_table()) {
    long k = 0;
    while (GaussianConditional::pmf(static_cast<double>(k + 1), sigma) >= kSupportThreshold) ++k;
    std::vector<double> row;
    for (long s = -k; s <= k; ++s) row.push_back(GaussianConditional::pmf(static_cast<double>(s), sigma));
    add_row(table, static_cast<std::int32_t>(-k), row);
  }
  return table;
}

CdfTable build_cdf_tables(const FactorizedPrior& prior) {
  CdfTable table;
  constexpr long kMaxBound = 1 << 15;
  for (std::size_t c = 0; c < prior.channels(); ++c) {
    long lo = -1, hi = 1;
    while (lo > -kMaxBound && prior.cdf(c, static_cast<double>(lo) - 0.5) > kQuantileTail) lo *= 2;
    while (hi < kMaxBound && prior.cdf(c, static_cast<double>(hi) + 0.5) < 1.0 - kQuantileTail) hi *= 2;
    long first = hi + 1, last = lo - 1;
    for (long k = lo; k <= hi; ++k) {
      if (prior.pmf(c, static_cast<double>(k)) >= kSupportThreshold) {
        first = std::min(first, k);
        last = std::max(last, k);
      }
    }
    if (first > last) {
      // Degenerate density: keep the single most likely symbol.
      double best = -1.0;
      for (long k = lo; k <= hi; ++k) {
        const double p = prior.pmf(c, static_cast<double>(k));
        if (p > best) {
          best = p;
          first = last = k;
        }
      }
    }
    if (last - first + 2 > static_cast<long>(kCdfTotal)) last = first + static_cast<long>(kCdfTotal) - 2;
    std::vector<double> row;
    for (long k = first; k <= last; ++k) row.push_back(prior.pmf(c, static_cast<double>(k)));
    add_row(table, static_cast<std::int32_t>(first), row);
  }
  return table;
}

double coded_bits(std::span<const std::int32_t> symbols, std::span<const std::uint32_t> contexts,
                  const CdfTable& table) {
  double bits = 0.0;
  for (std::size_t i = 0; i < symbols.size(); ++i) {
    const std::size_t row = contexts[i];
    const std::size_t n = table.symbols(row);
    const std::int64_t index = static_cast<std::int64_t>(symbols[i]) - table.offset[row];
    if (index >= 0 && index < static_cast<std::int64_t>(n)) {
      bits -= std::log2(table.probability(row, static_cast<std::size_t>(index)));
    } else {
      bits -= std::log2(table.probability(row, n));
      bits += gamma_bits(escape_value(index, n));
    }
  }
  return bits;
}

void RangeEncoder::encode(std::uint32_t cum, std::uint32_t freq) {
  const std::uint32_t r = range_ >> kCdfPrecision;
  low_ += static_cast<std::uint64_t>(r) * cum;
  range_ = r * freq;
  normalize();
}

void RangeEncoder::encode_bits(std::uint32_t value, int count) {
  for (int i = count - 1; i >= 0; --i) {
    range_ >>= 1;
    if ((value >> i) & 1u) low_ += range_;
    normalize();
  }
}

void RangeEncoder::normalize() {
  while (range_ < (1u << 24)) {
    range_ <<= 8;
    shift_low();
  }
}

void RangeEncoder::shift_low() {
  if (static_cast<std::uint32_t>(low_) < 0xFF000000u || (low_ >> 32) != 0) {
    const auto carry = static_cast<std::uint8_t>(low_ >> 32);
    std::uint8_t pending = cache_;
    do {
      out_.push_back(static_cast<std::uint8_t>(pending + carry));
      pending = 0xFF;
    } while (--cache_size_ != 0);
    cache_ = static_cast<std::uint8_t>(low_ >> 24);
  }
  ++cache_size_;
  low_ = (low_ & 0x00FFFFFFu) << 8;
}

std::vector<std::uint8_t> RangeEncoder::finish() {
  for (int i = 0; i < 5; ++i) shift_low();
  return std::move(out_);
}

RangeDecoder::RangeDecoder(std::span<const std::uint8_t> bytes) : bytes_(bytes) {
  for (int i = 0; i < 5; ++i) code_ = (code_ << 8) | next();
}

std::uint8_t RangeDecoder::next() {
  if (pos_ >= bytes_.size()) throw TruncatedStreamError("range decoder ran past the end of its chunk");
  return bytes_[pos_++];
}

void RangeDecoder::normalize() {
  while (range_ < (1u << 24)) {
    code_ = (code_ << 8) | next();
    range_ <<= 8;
  }
}

std::size_t RangeDecoder::decode(std::span<const std::uint32_t> cdf) {
  const std::uint32_t r = range_ >> kCdfPrecision;
  const std::uint32_t v = code_ / r;
  if (v >= kCdfTotal) throw CorruptStreamError("range decoder: code outside the coding interval");
  const auto it = std::upper_bound(cdf.begin(), cdf.end(), v);
  const auto index = static_cast<std::size_t>(it - cdf.begin()) - 1;
  code_ -= r * cdf[index];
  range_ = r * (cdf[index + 1] - cdf[index]);
  normalize();
  return index;
}

std::uint32_t RangeDecoder::decode_bits(int count) {
  std::uint32_t value = 0;
  for (int i = 0; i < count; ++i) {
    range_ >>= 1;
    std::uint32_t bit = 0;
    if (code_ >= range_) {
      code_ -= range_;
      bit = 1;
    }
    value = (value << 1) | bit;
    normalize();
  }
  return value;
}

void RangeDecoder::finish() const {
  if (pos_ != bytes_.size()) {
    throw CorruptStreamError("range decoder: " + std::to_string(bytes_.size() - pos_) +
                             " trailing bytes in chunk");
  }
}

std::vector<std::uint8_t> range_encode(std::span<const std::int32_t> symbols, const CdfTable& table,
                                       std::span<const std::uint32_t> contexts) {
  if (symbols.size() != contexts.size()) throw std::invalid_argument("range_encode: context count mismatch");
  RangeEncoder enc;
  for (std::size_t i = 0; i < symbols.size(); ++i) {
    const std::size_t row = contexts[i];
    if (row >= table.rows()) throw std::out_of_range("range_encode: context out of range");
    const auto& cdf = table.cdf[row];
    const std::size_t n = table.symbols(row);
    const std::int64_t index = static_cast<std::int64_t>(symbols[i]) - table.offset[row];
    if (index >= 0 && index < static_cast<std::int64_t>(n)) {
      const auto k = static_cast<std::size_t>(index);
      enc.encode(cdf[k], cdf[k + 1] - cdf[k]);
      continue;
    }
    enc.encode(cdf[n], cdf[n + 1] - cdf[n]);
    // Elias-gamma code of the overflow, sent as equiprobable bits.
    const std::uint64_t v = static_cast<std::uint64_t>(escape_value(index, n)) + 1;
    const int nb = std::bit_width(v) - 1;
    enc.encode_bits(0, nb);
    enc.encode_bits(static_cast<std::uint32_t>(v), nb + 1);
  }
  return enc.finish();
}

std::vector<std::int32_t> range_decode(std::span<const std::uint8_t> bytes, const CdfTable& table,
                                       std::span<const std::uint32_t> contexts, std::size_t count) {
  if (contexts.size() != count) throw std::invalid_argument("range_decode: context count mismatch");
  RangeDecoder dec(bytes);
  std::vector<std::int32_t> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t row = contexts[i];
    if (row >= table.rows()) throw std::out_of_range("range_decode: context out of range");
    const std::size_t n = table.symbols(row);
    const std::size_t index = dec.decode(table.cdf[row]);
    if (index < n) {
      out[i] = table.offset[row] + static_cast<std::int32_t>(index);
      continue;
    }
    int nb = 0;
    while (dec.decode_bits(1) == 0) {
      if (++nb > kMaxEscapeBits) throw CorruptStreamError("range decoder: runaway escape code");
    }
    const std::uint64_t v = (std::uint64_t{1} << nb) | dec.decode_bits(nb);
    const std::uint64_t u = v - 1;
    const std::int64_t beyond = static_cast<std::int64_t>(u / 2);
    out[i] = (u & 1) ? table.offset[row] + static_cast<std::int32_t>(n + beyond)
                     : table.offset[row] - 1 - static_cast<std::int32_t>(beyond);
  }
  dec.finish();
  return out;
}

void append_chunk(std::vector<std::uint8_t>& out, std::span<const std::uint8_t> payload) {
  const auto len = static_cast<std::uint32_t>(payload.size());
  for (int shift = 24; shift >= 0; shift -= 8) out.push_back(static_cast<std::uint8_t>(len >> shift));
  out.insert(out.end(), payload.begin(), payload.end());
  out.push_back(static_cast<std::uint8_t>(kChunkSentinel >> 8));
  out.push_back(static_cast<std::uint8_t>(kChunkSentinel & 0xFF));
}

std::span<const std::uint8_t> read_chunk(std::span<const std::uint8_t> in, std::size_t& pos) {
  if (in.size() < pos + 4) throw TruncatedStreamError("chunk length field is truncated");
  std::uint32_t len = 0;
  for (int i = 0; i < 4; ++i) len = (len << 8) | in[pos + static_cast<std::size_t>(i)];
  const std::size_t start = pos + 4;
  if (in.size() < start + len + 2) throw TruncatedStreamError("chunk payload is truncated");
  const std::uint16_t sentinel =
      static_cast<std::uint16_t>((in[start + len] << 8) | in[start + len + 1]);
  if (sentinel != kChunkSentinel) throw CorruptStreamError("chunk sentinel mismatch");
  pos = start + len + 2;
  return in.subspan(start, len);
}

}  // namespace picr
