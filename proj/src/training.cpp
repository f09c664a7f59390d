// SPDX-License-Identifier: Apache-2.0
#include "picr/training.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "picr/bitstream.hpp"
#include "picr/image_io.hpp"
#include "picr/ops.hpp"

namespace picr {

using nlohmann::json;

RdLoss rd_loss(const Tensor& x, const Tensor& x_hat, const Tensor& roi_mask, double m_lambda, const Tensor& bpp,
               const RateMapping& mapping) {
  if (x.shape() != x_hat.shape() || x.shape().size() != 3) {
    throw ShapeError("rd_loss: image " + shape_string(x.shape()) + " vs reconstruction " +
                     shape_string(x_hat.shape()));
  }
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (roi_mask.shape() != Shape{1, h, w}) {
    throw ShapeError("rd_loss: mask " + shape_string(roi_mask.shape()) + " for image " + shape_string(x.shape()));
  }
  const double lambda = lambda_of(m_lambda, mapping);

  Buffer mask(c * h * w);
  for (std::size_t ch = 0; ch < c; ++ch)
    std::copy(roi_mask.values().begin(), roi_mask.values().end(), mask.begin() + ch * h * w);
  const Tensor err = ops::mul(ops::square(ops::sub(x_hat, x)), Tensor(x.shape(), std::move(mask)));
  const Tensor mse = ops::scale(ops::sum(err), 1.0 / static_cast<double>(c * h * w));
  const Tensor total = ops::add(ops::scale(mse, lambda * kDistortionScale), bpp.reshape({}));

  RdLoss out;
  out.total = total;
  out.values = {mse.item(), bpp.item(), lambda, total.item()};
  return out;
}

StagePlan StagePlan::preset(int stage) {
  StagePlan p;
  p.stage = stage;
  switch (stage) {
    case 1:
      p.lambda_rule = LambdaRule::Fixed;
      p.fixed_m = 1.0;
      p.mask_rule = MaskRule::Ones;
      p.use_prompts = false;
      break;
    case 2:
      p.lambda_rule = LambdaRule::Uniform;
      p.mask_rule = MaskRule::Ones;
      p.use_prompts = true;
      break;
    case 3:
      p.steps = 20000;
      p.lambda_rule = LambdaRule::Uniform;
      p.mask_rule = MaskRule::Random;
      p.use_prompts = true;
      break;
    default:
      throw std::invalid_argument("stage must be 1, 2 or 3, got " + std::to_string(stage));
  }
  return p;
}

StageSampler::StageSampler(const StagePlan& plan, std::uint64_t seed)
    : plan_(plan), rng_(CounterRng::at(seed, 0x5a3b)), mask_seed_(CounterRng::at(seed, 0x3a5c)) {}

double StageSampler::next_m() {
  if (plan_.lambda_rule == LambdaRule::Fixed) return plan_.fixed_m;
  return rng_.uniform();
}

Tensor StageSampler::next_mask(std::size_t height, std::size_t width) {
  if (plan_.mask_rule == MaskRule::Ones) return Tensor({1, height, width}, 1.0);
  const MaskSpec spec = MaskSpec::random(CounterRng::at(mask_seed_, mask_count_++));
  return generate_mask(spec, height, width);
}

Adam::Adam(ParameterList params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& p : params_) {
    m_.emplace_back(p.tensor.size(), 0.0);
    v_.emplace_back(p.tensor.size(), 0.0);
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

void Adam::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& t = params_[i].tensor;
    if (!t.has_grad()) continue;
    auto g = t.grad();
    auto w = t.mutable_values();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = beta1_ * m[k] + (1.0 - beta1_) * g[k];
      v[k] = beta2_ * v[k] + (1.0 - beta2_) * g[k] * g[k];
      w[k] -= lr_ * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps_);
    }
  }
}

double clip_grad_norm(const ParameterList& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params)
    for (double g : p.tensor.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm && std::isfinite(norm)) {
    const double s = max_norm / norm;
    for (const auto& p : params) {
      Tensor t = p.tensor;
      if (!t.has_grad()) continue;
      for (double& g : t.mutable_grad()) g *= s;
    }
  }
  return norm;
}

ParameterList trainable_parameters(const Codec& codec, const StagePlan& plan) {
  ParameterList out;
  for (auto& p : codec.parameters()) {
    const bool prompt_net = p.name.rfind("p_a.", 0) == 0 || p.name.rfind("p_s.", 0) == 0;
    if (prompt_net && !plan.use_prompts) continue;
    out.push_back(p);
  }
  return out;
}

Dataset Dataset::from_folder(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw ImageIoError("dataset: not a directory: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    std::string ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
    if (ext == ".png" || ext == ".ppm" || ext == ".pgm" || ext == ".pnm") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  Dataset d;
  for (const auto& f : files) d.images.push_back(read_image(f, 3));
  if (d.images.empty()) throw ImageIoError("dataset: no images in " + dir.string());
  return d;
}

Dataset Dataset::synthetic(std::size_t count, std::size_t size, std::uint64_t seed) {
  Dataset d;
  d.images.reserve(count);
  const double n = static_cast<double>(size);
  for (std::size_t i = 0; i < count; ++i) {
    CounterRng rng(CounterRng::at(seed, i));
    Buffer px(3 * size * size);
    std::array<double, 3> c0{}, c1{};
    for (auto& v : c0) v = rng.uniform();
    for (auto& v : c1) v = rng.uniform();
    const double angle = rng.uniform(0, 2 * M_PI);
    const double ca = std::cos(angle), sa = std::sin(angle);

    struct Shape2 {
      int kind;  // 0 disc, 1 box, 2 striped disc
      double cy, cx, r, ry, rx, freq;
      std::array<double, 3> color;
    };
    std::vector<Shape2> shapes(2 + rng.next() % 5);
    for (auto& s : shapes) {
      s.kind = static_cast<int>(rng.next() % 3);
      s.cy = rng.uniform(0, n);
      s.cx = rng.uniform(0, n);
      s.r = rng.uniform(0.08, 0.3) * n;
      s.ry = rng.uniform(0.05, 0.3) * n;
      s.rx = rng.uniform(0.05, 0.3) * n;
      s.freq = rng.uniform(0.2, 1.2);
      for (auto& v : s.color) v = rng.uniform();
    }
    const double noise = rng.uniform(0.0, 0.04);

    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        const double u = ((static_cast<double>(x) - n / 2) * ca + (static_cast<double>(y) - n / 2) * sa) / n + 0.5;
        const double t = std::clamp(u, 0.0, 1.0);
        std::array<double, 3> c{};
        for (int k = 0; k < 3; ++k) c[k] = c0[k] * (1 - t) + c1[k] * t;
        for (const auto& s : shapes) {
          const double dy = static_cast<double>(y) - s.cy, dx = static_cast<double>(x) - s.cx;
          double a = 0.0;
          if (s.kind == 1) {
            const double e = std::max(std::fabs(dy) - s.ry, std::fabs(dx) - s.rx);
            a = std::clamp(0.5 - e, 0.0, 1.0);
          } else {
            a = std::clamp(s.r - std::sqrt(dy * dy + dx * dx) + 0.5, 0.0, 1.0);
            if (s.kind == 2) a *= 0.5 + 0.5 * std::sin(s.freq * (dx + dy));
          }
          for (int k = 0; k < 3; ++k) c[k] = c[k] * (1 - a) + s.color[k] * a;
        }
        for (int k = 0; k < 3; ++k) {
          const double z = (rng.uniform() - 0.5) * 2.0 * noise;
          px[(k * size + y) * size + x] = std::clamp(c[k] + z, 0.0, 1.0);
        }
      }
    d.images.emplace_back(Shape{3, size, size}, std::move(px));
  }
  return d;
}

Tensor Dataset::sample(Rng& rng, std::size_t crop) const {
  if (images.empty()) throw std::runtime_error("dataset is empty");
  const Tensor& img = images[std::uniform_int_distribution<std::size_t>(0, images.size() - 1)(rng)];
  Tensor src = img;
  if (img.dim(1) < crop || img.dim(2) < crop) src = pad_to_multiple(img, crop);
  const std::size_t h = src.dim(1), w = src.dim(2);
  const std::size_t oy = std::uniform_int_distribution<std::size_t>(0, h - crop)(rng);
  const std::size_t ox = std::uniform_int_distribution<std::size_t>(0, w - crop)(rng);
  Buffer out(3 * crop * crop);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < crop; ++y)
      for (std::size_t x = 0; x < crop; ++x) out[(c * crop + y) * crop + x] = src[(c * h + oy + y) * w + ox + x];
  return Tensor({3, crop, crop}, std::move(out));
}

std::string to_ndjson(const StepRecord& r) {
  json j{{"step", r.step},       {"stage", r.stage},   {"m_lambda", r.m_lambda},
         {"bpp", r.loss.bpp},    {"masked_mse", r.loss.masked_mse}, {"total", r.loss.total}};
  return j.dump();
}

StageReport train_stage(const StagePlan& plan, Codec& codec, const Dataset& data, const TrainOptions& options) {
  if (plan.crop == 0 || plan.crop % kPadMultiple != 0) {
    throw std::invalid_argument("crop must be a positive multiple of " + std::to_string(kPadMultiple));
  }
  if (plan.batch_size == 0) throw std::invalid_argument("batch_size must be positive");

  const ParameterList all = codec.parameters();
  Adam adam(trainable_parameters(codec, plan), plan.learning_rate);
  StageSampler sampler(plan, options.seed);
  Rng rng(CounterRng::at(options.seed, 0xc0de));
  const double inv_batch = 1.0 / static_cast<double>(plan.batch_size);

  StageReport report;
  report.records.reserve(plan.steps);
  for (std::size_t step = 0; step < plan.steps; ++step) {
    for (const auto& p : all) Tensor(p.tensor).zero_grad();
    StepRecord rec;
    rec.step = step;
    rec.stage = plan.stage;
    for (std::size_t b = 0; b < plan.batch_size; ++b) {
      const Tensor x = data.sample(rng, plan.crop);
      const double m = sampler.next_m();
      const Tensor mask = sampler.next_mask(plan.crop, plan.crop);
      const ForwardResult fr = codec.forward(ConditioningInput::make(x, mask, m), Mode::Train, &rng, plan.use_prompts);
      const RdLoss loss = rd_loss(x, fr.reconstruction, mask, m, fr.bpp);
      if (!std::isfinite(loss.values.total)) {
        throw TrainingDiverged("stage " + std::to_string(plan.stage) + " step " + std::to_string(step) +
                               ": non-finite loss");
      }
      backward(ops::scale(loss.total, inv_batch));
      rec.m_lambda += m * inv_batch;
      rec.loss.masked_mse += loss.values.masked_mse * inv_batch;
      rec.loss.bpp += loss.values.bpp * inv_batch;
      rec.loss.lambda += loss.values.lambda * inv_batch;
      rec.loss.total += loss.values.total * inv_batch;
    }
    const double norm = clip_grad_norm(adam.parameters(), plan.grad_clip);
    if (!std::isfinite(norm)) {
      throw TrainingDiverged("stage " + std::to_string(plan.stage) + " step " + std::to_string(step) +
                             ": non-finite gradient");
    }
    adam.step();

    if (options.log) *options.log << to_ndjson(rec) << '\n';
    if (options.on_step) options.on_step(rec);
    report.records.push_back(rec);
    if (options.checkpoint_every && !options.checkpoint_path.empty() && (step + 1) % options.checkpoint_every == 0) {
      codec.save(options.checkpoint_path);
    }
  }
  if (options.log) options.log->flush();
  if (!options.checkpoint_path.empty()) codec.save(options.checkpoint_path);
  return report;
}

namespace {

LambdaRule lambda_rule_from(const std::string& s) {
  if (s == "fixed") return LambdaRule::Fixed;
  if (s == "uniform") return LambdaRule::Uniform;
  throw std::invalid_argument("lambda_rule must be 'fixed' or 'uniform', got '" + s + "'");
}

MaskRule mask_rule_from(const std::string& s) {
  if (s == "ones") return MaskRule::Ones;
  if (s == "random") return MaskRule::Random;
  throw std::invalid_argument("mask_rule must be 'ones' or 'random', got '" + s + "'");
}

}  // namespace

TrainConfig TrainConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("training config: ") + e.what());
  }
  TrainConfig c;
  try {
    if (j.contains("codec")) c.codec = CodecConfig::from_json(j["codec"].dump());
    c.seed = j.value("seed", std::uint64_t{0});
    c.output_dir = j.value("output_dir", std::string("run"));
    c.checkpoint_every = j.value("checkpoint_every", std::size_t{0});
    if (j.contains("dataset")) {
      const auto& d = j["dataset"];
      if (d.contains("path")) c.dataset_dir = d["path"].get<std::string>();
      if (d.contains("synthetic")) {
        c.synthetic_count = d["synthetic"].value("count", c.synthetic_count);
        c.synthetic_size = d["synthetic"].value("size", c.synthetic_size);
      }
    }
    if (!j.contains("stages") || !j["stages"].is_array() || j["stages"].empty()) {
      throw std::invalid_argument("training config: 'stages' must be a non-empty array");
    }
    for (const auto& s : j["stages"]) {
      StagePlan p = StagePlan::preset(s.at("stage").get<int>());
      p.steps = s.value("steps", p.steps);
      p.learning_rate = s.value("learning_rate", p.learning_rate);
      p.batch_size = s.value("batch_size", p.batch_size);
      p.grad_clip = s.value("grad_clip", p.grad_clip);
      p.crop = s.value("crop", p.crop);
      if (s.contains("lambda_rule")) p.lambda_rule = lambda_rule_from(s["lambda_rule"].get<std::string>());
      if (s.contains("m")) p.fixed_m = s["m"].get<double>();
      if (s.contains("mask_rule")) p.mask_rule = mask_rule_from(s["mask_rule"].get<std::string>());
      if (s.contains("use_prompts")) p.use_prompts = s["use_prompts"].get<bool>();
      if (!(p.learning_rate > 0)) throw std::invalid_argument("learning_rate must be positive");
      c.stages.push_back(p);
    }
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("training config: ") + e.what());
  }
  return c;
}

std::filesystem::path run_training(const TrainConfig& config, std::ostream* progress) {
  std::filesystem::create_directories(config.output_dir);
  const Dataset data = config.dataset_dir ? Dataset::from_folder(*config.dataset_dir)
                                          : Dataset::synthetic(config.synthetic_count, config.synthetic_size,
                                                               config.seed);
  std::ofstream log(config.output_dir / "metrics.ndjson");
  if (!log) throw std::runtime_error("cannot write " + (config.output_dir / "metrics.ndjson").string());

  std::filesystem::path previous;
  for (std::size_t i = 0; i < config.stages.size(); ++i) {
    const StagePlan& plan = config.stages[i];
    Codec codec = previous.empty() ? Codec(config.codec, config.seed) : Codec::load(previous);
    TrainOptions opt;
    opt.seed = CounterRng::at(config.seed, 100 + i);
    opt.log = &log;
    opt.checkpoint_every = config.checkpoint_every;
    opt.checkpoint_path = config.output_dir / ("stage" + std::to_string(plan.stage) + ".ckpt");
    if (progress) {
      opt.on_step = [&](const StepRecord& r) {
        if ((r.step + 1) % 10 == 0 || r.step + 1 == plan.steps) *progress << to_ndjson(r) << '\n';
      };
    }
    train_stage(plan, codec, data, opt);
    previous = opt.checkpoint_path;
  }
  return previous;
}

}  // namespace picr
