// SPDX-License-Identifier: Apache-2.0
#include "picr/codec.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <json.hpp>
#include <map>
#include <stdexcept>

#include "picr/ops.hpp"

namespace picr {

CodecConfig CodecConfig::toy() {
  CodecConfig c;
  c.stage_channels = {16, 24, 32, 48};
  c.latent_channels = 48;
  c.hyper_channels = 32;
  c.heads = {2, 2, 2, 3};
  c.prompt_channels = {8, 12, 16, 24};
  c.hyper_heads = 2;
  return c;
}

void CodecConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("codec config: " + msg); };
  for (std::size_t i = 0; i < 4; ++i) {
    if (stage_channels[i] == 0 || heads[i] == 0 || prompt_channels[i] == 0) fail("zero width or head count");
    if (stage_channels[i] % heads[i] != 0) fail("stage channels not divisible by heads");
  }
  const auto dec = decoder_stage_channels(*this);
  const std::array<std::size_t, 4> dec_heads{heads[2], heads[1], heads[0], heads[0]};
  for (std::size_t i = 0; i < 4; ++i) {
    if (dec[i] % dec_heads[i] != 0) fail("decoder stage channels not divisible by heads");
  }
  if (latent_channels == 0 || hyper_channels == 0 || hyper_heads == 0) fail("zero latent width");
  if (hyper_channels % hyper_heads != 0) fail("hyper channels not divisible by hyper heads");
  if (swin_layers == 0) fail("need at least one Swin layer per block");
  if (window < 2 || window % 2 != 0) fail("window must be even and at least 2");
  if (mlp_ratio == 0) fail("mlp ratio must be positive");
  if (!(sigma_min > 0.0)) fail("sigma_min must be positive");
}

std::string CodecConfig::to_json() const {
  nlohmann::json j;
  j["stage_channels"] = stage_channels;
  j["latent_channels"] = latent_channels;
  j["hyper_channels"] = hyper_channels;
  j["swin_layers"] = swin_layers;
  j["window"] = window;
  j["heads"] = heads;
  j["prompt_channels"] = prompt_channels;
  j["hyper_heads"] = hyper_heads;
  j["mlp_ratio"] = mlp_ratio;
  j["share_prompts"] = share_prompts;
  j["sigma_min"] = sigma_min;
  return j.dump();
}

CodecConfig CodecConfig::from_json(const std::string& text) {
  CodecConfig c;
  try {
    const auto j = nlohmann::json::parse(text);
    if (j.contains("preset")) {
      const auto preset = j.at("preset").get<std::string>();
      if (preset == "toy") c = toy();
      else if (preset != "default") throw std::invalid_argument("unknown codec preset '" + preset + "'");
    }
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) j.at(key).get_to(field);
    };
    get("stage_channels", c.stage_channels);
    get("latent_channels", c.latent_channels);
    get("hyper_channels", c.hyper_channels);
    get("swin_layers", c.swin_layers);
    get("window", c.window);
    get("heads", c.heads);
    get("prompt_channels", c.prompt_channels);
    get("hyper_heads", c.hyper_heads);
    get("mlp_ratio", c.mlp_ratio);
    get("share_prompts", c.share_prompts);
    get("sigma_min", c.sigma_min);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("codec config: ") + e.what());
  }
  c.validate();
  return c;
}

std::array<std::size_t, 4> decoder_stage_channels(const CodecConfig& c) {
  return {c.stage_channels[2], c.stage_channels[1], c.stage_channels[0], c.stage_channels[0]};
}

ConditioningInput ConditioningInput::make(const Tensor& image, const Tensor& roi_mask, double m_lambda) {
  if (image.rank() != 3) throw ShapeError("image must be 3xHxW");
  ConditioningInput c{image, roi_mask, Tensor({1, image.dim(1), image.dim(2)}, m_lambda)};
  c.validate();
  return c;
}

void ConditioningInput::validate() const {
  if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("image must be 3xHxW, got " + shape_string(image.shape()));
  const Shape plane{1, image.dim(1), image.dim(2)};
  if (roi_mask.shape() != plane) {
    throw ShapeError("ROI mask " + shape_string(roi_mask.shape()) + " does not match image " +
                     shape_string(image.shape()));
  }
  if (lambda_map.shape() != plane) {
    throw ShapeError("lambda map " + shape_string(lambda_map.shape()) + " does not match image " +
                     shape_string(image.shape()));
  }
  for (double v : roi_mask.values()) {
    if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("ROI mask values must lie in [0,1]");
  }
  const double m = lambda_map[0];
  if (!(m >= 0.0 && m <= 1.0)) throw std::invalid_argument("lambda map value must lie in [0,1]");
  for (double v : lambda_map.values()) {
    if (v != m) throw std::invalid_argument("lambda map must be spatially constant");
  }
}

Codec::Codec(const CodecConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  const auto& sc = config_.stage_channels;
  const auto& pc = config_.prompt_channels;
  const std::size_t cy = config_.latent_channels, cz = config_.hyper_channels;

  pa_in_ = Conv2d(5, pc[0], 3, 1, 1, rng);
  for (std::size_t i = 0; i < 3; ++i) pa_down_[i] = Conv2d(pc[i], pc[i + 1], 3, 2, 1, rng);
  ps_in_ = Conv2d(cy + 1, pc[3], 3, 1, 1, rng);
  for (std::size_t i = 0; i < 3; ++i) ps_up_[i] = ConvTranspose2d(pc[3 - i], pc[2 - i], 3, 2, 1, 1, rng);

  for (std::size_t i = 0; i < 4; ++i) {
    StbConfig bc;
    bc.in_channels = i == 0 ? 3 : sc[i - 1];
    bc.out_channels = sc[i];
    bc.resample = Resample::Down;
    bc.layers = config_.swin_layers;
    bc.window = config_.window;
    bc.heads = config_.heads[i];
    bc.mlp_ratio = config_.mlp_ratio;
    bc.prompt_channels = pc[i];
    bc.prompt_stride = 4;
    bc.share_prompts = config_.share_prompts;
    g_a_[i] = StbBlock(bc, rng);
  }
  ga_out_ = Conv2d(sc[3], cy, 3, 1, 1, rng);

  const auto dc = decoder_stage_channels(config_);
  const std::array<std::size_t, 4> dh{config_.heads[2], config_.heads[1], config_.heads[0], config_.heads[0]};
  for (std::size_t i = 0; i < 4; ++i) {
    StbConfig bc;
    bc.in_channels = i == 0 ? cy : dc[i - 1];
    bc.out_channels = dc[i];
    bc.resample = Resample::Up;
    bc.layers = config_.swin_layers;
    bc.window = config_.window;
    bc.heads = dh[i];
    bc.mlp_ratio = config_.mlp_ratio;
    bc.prompt_channels = pc[3 - i];
    bc.prompt_stride = 1;
    bc.share_prompts = config_.share_prompts;
    g_s_[i] = StbBlock(bc, rng);
  }
  gs_out_ = Conv2d(dc[3], 3, 3, 1, 1, rng);

  ha_in_ = Conv2d(cy, cz, 3, 1, 1, rng);
  for (std::size_t i = 0; i < 2; ++i) {
    StbConfig bc;
    bc.in_channels = cz;
    bc.out_channels = cz;
    bc.resample = Resample::Down;
    bc.layers = config_.swin_layers;
    bc.window = config_.window;
    bc.heads = config_.hyper_heads;
    bc.mlp_ratio = config_.mlp_ratio;
    h_a_[i] = StbBlock(bc, rng);
    bc.resample = Resample::Up;
    h_s_[i] = StbBlock(bc, rng);
  }
  hs_out_ = Conv2d(cz, 2 * cy, 3, 1, 1, rng);
  prior_ = FactorizedPrior(cz, rng);
}

PromptPyramid Codec::encoder_prompts(const ConditioningInput& cond) const {
  cond.validate();
  PromptPyramid p;
  const Tensor in = ops::concat({cond.roi_mask, cond.lambda_map, cond.image}, 0);
  p[0] = ops::gelu(pa_in_.forward(in));
  for (std::size_t i = 0; i < 3; ++i) p[i + 1] = ops::gelu(pa_down_[i].forward(p[i]));
  return p;
}

PromptPyramid Codec::decoder_prompts(const Tensor& y_hat, const Tensor& lambda_small) const {
  if (y_hat.rank() != 3 || y_hat.dim(0) != config_.latent_channels) {
    throw ShapeError("decoder prompts: latent " + shape_string(y_hat.shape()) + " does not match config");
  }
  if (lambda_small.shape() != Shape{1, y_hat.dim(1), y_hat.dim(2)}) {
    throw ShapeError("decoder prompts: lambda map " + shape_string(lambda_small.shape()) +
                     " does not match latent grid " + shape_string(y_hat.shape()));
  }
  PromptPyramid p;
  p[0] = ops::gelu(ps_in_.forward(ops::concat({y_hat, lambda_small}, 0)));
  for (std::size_t i = 0; i < 3; ++i) p[i + 1] = ops::gelu(ps_up_[i].forward(p[i]));
  return p;
}

Tensor Codec::encode_latent(const ConditioningInput& cond, bool use_prompts, StageProbes* probes) const {
  cond.validate();
  const std::size_t h = cond.image.dim(1), w = cond.image.dim(2);
  if (h % 64 != 0 || w % 64 != 0) {
    throw ShapeError("analysis needs H and W padded to multiples of 64, got " + std::to_string(h) + "x" +
                     std::to_string(w));
  }
  PromptPyramid prompts;
  if (use_prompts) prompts = encoder_prompts(cond);
  Tensor x = cond.image;
  for (std::size_t i = 0; i < 4; ++i) {
    x = g_a_[i].forward(x, use_prompts ? prompts[i] : Tensor(), probes ? &(*probes)[i] : nullptr);
  }
  return ga_out_.forward(x);
}

std::pair<Tensor, Tensor> Codec::hyper_synthesis(const Tensor& z_hat) const {
  Tensor h = z_hat;
  for (const auto& b : h_s_) h = b.forward(h);
  const Tensor params = hs_out_.forward(h);
  const std::size_t cy = config_.latent_channels;
  Tensor mu = ops::slice(params, 0, 0, cy);
  Tensor sigma = ops::add_scalar(ops::softplus(ops::slice(params, 0, cy, 2 * cy)), config_.sigma_min);
  return {mu, sigma};
}

LatentBundle Codec::analyze(const ConditioningInput& cond, Mode mode, Rng* rng, bool use_prompts,
                            StageProbes* probes) const {
  LatentBundle b;
  b.y = encode_latent(cond, use_prompts, probes);
  Tensor h = ha_in_.forward(b.y);
  for (const auto& blk : h_a_) h = blk.forward(h);
  b.z = h;
  b.z_hat = quantize(b.z, mode, rng);
  std::tie(b.mu, b.sigma) = hyper_synthesis(b.z_hat);
  if (mode == Mode::Train) {
    b.y_hat = quantize(b.y, mode, rng);
  } else {
    b.y_hat = quantize(b.y.detach(), mode, nullptr, b.mu.detach());
  }
  b.likelihood_y = gaussian_likelihood(b.y_hat, b.mu, b.sigma, config_.sigma_min);
  b.likelihood_z = prior_.likelihood(b.z_hat);
  return b;
}

Tensor Codec::synthesize(const Tensor& y_hat, const Tensor& lambda_small, Mode mode, bool use_prompts,
                         StageProbes* probes) const {
  PromptPyramid prompts;
  if (use_prompts) {
    prompts = decoder_prompts(y_hat, lambda_small);
  } else if (y_hat.rank() != 3 || y_hat.dim(0) != config_.latent_channels) {
    throw ShapeError("synthesis: latent " + shape_string(y_hat.shape()) + " does not match config");
  }
  Tensor x = y_hat;
  for (std::size_t i = 0; i < 4; ++i) {
    x = g_s_[i].forward(x, use_prompts ? prompts[i] : Tensor(), probes ? &(*probes)[i] : nullptr);
  }
  x = gs_out_.forward(x);
  if (mode == Mode::Eval) {
    std::vector<double> v(x.values().begin(), x.values().end());
    for (double& e : v) e = std::clamp(e, 0.0, 1.0);
    return Tensor(x.shape(), std::move(v));
  }
  return x;
}

ForwardResult Codec::forward(const ConditioningInput& cond, Mode mode, Rng* rng, bool use_prompts) const {
  ForwardResult r;
  r.latents = analyze(cond, mode, rng, use_prompts);
  const Tensor small({1, r.latents.y_hat.dim(1), r.latents.y_hat.dim(2)}, cond.m_lambda());
  r.reconstruction = synthesize(r.latents.y_hat, small, mode, use_prompts);
  const double pixels = static_cast<double>(cond.image.dim(1) * cond.image.dim(2));
  r.bpp = rate_bpp(r.latents.likelihood_y, r.latents.likelihood_z, pixels);
  return r;
}

ParameterList Codec::parameters() const {
  ParameterList out;
  pa_in_.collect(out, "p_a.conv_in");
  for (std::size_t i = 0; i < 3; ++i) pa_down_[i].collect(out, "p_a.down" + std::to_string(i));
  ps_in_.collect(out, "p_s.conv_in");
  for (std::size_t i = 0; i < 3; ++i) ps_up_[i].collect(out, "p_s.up" + std::to_string(i));
  for (std::size_t i = 0; i < 4; ++i) g_a_[i].collect(out, "g_a.stage" + std::to_string(i));
  ga_out_.collect(out, "g_a.conv_out");
  for (std::size_t i = 0; i < 4; ++i) g_s_[i].collect(out, "g_s.stage" + std::to_string(i));
  gs_out_.collect(out, "g_s.conv_out");
  ha_in_.collect(out, "h_a.conv_in");
  for (std::size_t i = 0; i < 2; ++i) h_a_[i].collect(out, "h_a.stage" + std::to_string(i));
  for (std::size_t i = 0; i < 2; ++i) h_s_[i].collect(out, "h_s.stage" + std::to_string(i));
  hs_out_.collect(out, "h_s.conv_out");
  prior_.collect(out, "prior");
  return out;
}

std::size_t Codec::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.size();
  return n;
}

namespace {

constexpr char kCheckpointMagic[8] = {'P', 'I', 'C', 'R', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCheckpointVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in, const std::filesystem::path& path) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) {
    throw std::runtime_error("checkpoint " + path.string() + " is truncated");
  }
  return v;
}

}  // namespace

void Codec::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  put<std::uint32_t>(out, kCheckpointVersion);
  const std::string cfg = config_.to_json();
  put<std::uint64_t>(out, cfg.size());
  out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  const auto params = parameters();
  put<std::uint64_t>(out, params.size());
  for (const auto& p : params) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
    out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p.tensor.rank()));
    for (std::size_t d : p.tensor.shape()) put<std::uint64_t>(out, d);
    const auto v = p.tensor.values();
    out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("write failed for checkpoint " + path.string());
}

Codec Codec::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
    throw std::runtime_error(path.string() + " is not a checkpoint");
  }
  if (get<std::uint32_t>(in, path) != kCheckpointVersion) {
    throw std::runtime_error("unsupported checkpoint version in " + path.string());
  }
  const auto cfg_len = get<std::uint64_t>(in, path);
  if (cfg_len > (1u << 20)) throw std::runtime_error("checkpoint config block is implausibly large");
  std::string cfg(cfg_len, '\0');
  if (!in.read(cfg.data(), static_cast<std::streamsize>(cfg_len))) {
    throw std::runtime_error("checkpoint " + path.string() + " is truncated");
  }
  Codec codec(CodecConfig::from_json(cfg));
  std::map<std::string, Tensor> by_name;
  for (auto& p : codec.parameters()) by_name.emplace(p.name, p.tensor);

  const auto count = get<std::uint64_t>(in, path);
  if (count != by_name.size()) {
    throw std::runtime_error("checkpoint holds " + std::to_string(count) + " arrays, model expects " +
                             std::to_string(by_name.size()));
  }
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = get<std::uint32_t>(in, path);
    if (name_len > 4096) throw std::runtime_error("checkpoint array name is implausibly long");
    std::string name(name_len, '\0');
    if (!in.read(name.data(), name_len)) throw std::runtime_error("checkpoint " + path.string() + " is truncated");
    const auto rank = get<std::uint32_t>(in, path);
    if (rank > 8) throw std::runtime_error("checkpoint array rank is implausible");
    Shape shape(rank);
    for (auto& d : shape) d = get<std::uint64_t>(in, path);
    auto it = by_name.find(name);
    if (it == by_name.end()) throw std::runtime_error("unexpected array '" + name + "' in checkpoint");
    if (it->second.shape() != shape) {
      throw std::runtime_error("array '" + name + "' has shape " + shape_string(shape) + ", model expects " +
                               shape_string(it->second.shape()));
    }
    auto v = it->second.mutable_values();
    if (!in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)))) {
      throw std::runtime_error("checkpoint " + path.string() + " is truncated");
    }
    by_name.erase(it);
  }
  return codec;
}

}  // namespace picr
