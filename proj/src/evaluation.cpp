// SPDX-License-Identifier: Apache-2.0
#include "picr/evaluation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <json.hpp>
#include <sstream>

#include "picr/image_io.hpp"

namespace picr {

namespace {

double db_from_mse(double mse) {
  if (!(mse > 0)) return kPsnrCap;
  return std::min(kPsnrCap, -10.0 * std::log10(mse));
}

void require_same_image_shape(const Tensor& x, const Tensor& x_hat) {
  if (x.shape() != x_hat.shape() || x.rank() != 3) {
    throw ShapeError("psnr: " + shape_string(x.shape()) + " vs " + shape_string(x_hat.shape()));
  }
}

}  // namespace

Tensor binarize_mask(const Tensor& mask) {
  Buffer v(mask.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = mask[i] >= 0.5 ? 1.0 : 0.0;
  return Tensor(mask.shape(), std::move(v));
}

double psnr(const Tensor& x, const Tensor& x_hat) {
  require_same_image_shape(x, x_hat);
  double sse = 0;
  for (std::size_t i = 0; i < x.size(); ++i) sse += (x[i] - x_hat[i]) * (x[i] - x_hat[i]);
  return db_from_mse(sse / static_cast<double>(x.size()));
}

double weighted_psnr(const Tensor& x, const Tensor& x_hat, const WeightedPsnrSpec& spec) {
  if (!(spec.alpha >= 0) || !(spec.beta >= 0) || spec.alpha + spec.beta <= 0) {
    throw std::invalid_argument("weighted psnr: need alpha, beta >= 0 with alpha + beta > 0");
  }
  require_same_image_shape(x, x_hat);
  const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
  if (spec.roi_mask.shape() != Shape{1, x.dim(1), x.dim(2)}) {
    throw ShapeError("weighted psnr: mask " + shape_string(spec.roi_mask.shape()) + " for image " +
                     shape_string(x.shape()));
  }
  double sse_roi = 0, sse_out = 0;
  std::size_t n_roi = 0, n_out = 0;
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t p = 0; p < hw; ++p) {
      const double e = x[ch * hw + p] - x_hat[ch * hw + p];
      if (spec.roi_mask[p] >= 0.5) {
        sse_roi += e * e;
        ++n_roi;
      } else {
        sse_out += e * e;
        ++n_out;
      }
    }
  }
  const double den = spec.alpha * static_cast<double>(n_roi) + spec.beta * static_cast<double>(n_out);
  if (den <= 0) return kPsnrCap;
  return db_from_mse((spec.alpha * sse_roi + spec.beta * sse_out) / den);
}

std::vector<RdPoint> rd_sweep(const Codec& codec, const std::vector<EvalImage>& images,
                              const SweepOptions& options) {
  const CodingTables tables(codec);
  std::vector<RdPoint> points;
  using clock = std::chrono::steady_clock;

  auto run = [&](const EvalImage& img, const Tensor& enc_mask, const Tensor& metric_mask, double m,
                 std::optional<double> roi_value) {
    const auto t0 = clock::now();
    const EncodeResult enc = encode_image(codec, tables, img.image, enc_mask, m);
    const auto t1 = clock::now();
    const DecodeResult dec = decode_image(codec, tables, enc.bytes);
    const auto t2 = clock::now();
    if (dec.y_hat.shape() != enc.y_hat.shape() ||
        !std::equal(dec.y_hat.values().begin(), dec.y_hat.values().end(), enc.y_hat.values().begin())) {
      throw DecodeMismatch("decoded latent differs from the encoder's for image '" + img.name + "'");
    }
    RdPoint p;
    p.image = img.name;
    p.m_lambda = m;
    p.roi_value = roi_value;
    p.bpp = enc.actual_bpp;
    p.estimated_bpp = enc.estimated_bpp;
    p.wpsnr_db = weighted_psnr(img.image, dec.image, {options.alpha, options.beta, metric_mask});
    p.bytes = enc.bytes.size();
    p.ms_encode = std::chrono::duration<double, std::milli>(t1 - t0).count();
    p.ms_decode = std::chrono::duration<double, std::milli>(t2 - t1).count();
    points.push_back(std::move(p));
  };

  for (const auto& img : images) {
    const std::size_t h = img.image.dim(1), w = img.image.dim(2);
    const Tensor ones({1, h, w}, 1.0);
    const Tensor roi = img.roi ? binarize_mask(*img.roi) : ones;
    for (double m : options.m_values) run(img, img.roi ? *img.roi : ones, roi, m, std::nullopt);
    if (!img.roi) continue;
    for (double v : options.roi_values) {
      Buffer mv(roi.size());
      for (std::size_t i = 0; i < mv.size(); ++i) mv[i] = roi[i] * v;
      run(img, Tensor(roi.shape(), std::move(mv)), roi, options.roi_m, v);
    }
  }
  std::stable_sort(points.begin(), points.end(), [](const RdPoint& a, const RdPoint& b) {
    if (a.image != b.image) return a.image < b.image;
    if (a.roi_value.has_value() != b.roi_value.has_value()) return !a.roi_value.has_value();
    if (a.roi_value != b.roi_value) return *a.roi_value < *b.roi_value;
    return a.m_lambda < b.m_lambda;
  });
  return points;
}

namespace {

void write_svg(const std::vector<RdPoint>& points, const std::filesystem::path& path) {
  std::vector<const RdPoint*> main;
  for (const auto& p : points)
    if (!p.roi_value) main.push_back(&p);
  double x0 = 0, x1 = 1e-9, y0 = 1e300, y1 = -1e300;
  for (const auto* p : main) {
    x1 = std::max(x1, p->bpp);
    y0 = std::min(y0, p->wpsnr_db);
    y1 = std::max(y1, p->wpsnr_db);
  }
  if (main.empty()) y0 = 0, y1 = 1;
  if (y1 - y0 < 1e-6) y0 -= 0.5, y1 += 0.5;
  const double W = 640, H = 480, L = 70, R = 20, T = 20, B = 60;
  auto px = [&](double v) { return L + (v - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double v) { return H - B - (v - y0) / (y1 - y0) * (H - T - B); };

  std::ofstream out(path);
  out << std::fixed << std::setprecision(2);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
      << "\" stroke=\"black\"/>\n";
  out << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  out << "<text x=\"" << W / 2 << "\" y=\"" << H - 15 << "\" text-anchor=\"middle\">bpp (0 to " << x1
      << ")</text>\n";
  out << "<text x=\"15\" y=\"" << H / 2 << "\" transform=\"rotate(-90 15 " << H / 2
      << ")\" text-anchor=\"middle\">weighted PSNR dB (" << y0 << " to " << y1 << ")</text>\n";
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"};
  std::size_t series = 0;
  for (std::size_t i = 0; i < main.size();) {
    std::size_t j = i;
    out << "<polyline fill=\"none\" stroke=\"" << colors[series % 6] << "\" points=\"";
    for (; j < main.size() && main[j]->image == main[i]->image; ++j) {
      out << px(main[j]->bpp) << ',' << py(main[j]->wpsnr_db) << ' ';
    }
    out << "\"/>\n";
    for (std::size_t k = i; k < j; ++k) {
      out << "<circle cx=\"" << px(main[k]->bpp) << "\" cy=\"" << py(main[k]->wpsnr_db) << "\" r=\"3\" fill=\""
          << colors[series % 6] << "\"/>\n";
    }
    ++series;
    i = j;
  }
  out << "</svg>\n";
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

}  // namespace

void write_rd_report(const std::vector<RdPoint>& points, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream csv(dir / "rd.csv");
  csv << "image,m_lambda,bpp,wpsnr_db,bytes,ms_encode,ms_decode\n";
  bool any_roi = false;
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& p : points) {
    nlohmann::json j{{"image", p.image},       {"m_lambda", p.m_lambda}, {"bpp", p.bpp},
                     {"estimated_bpp", p.estimated_bpp}, {"wpsnr_db", p.wpsnr_db}, {"bytes", p.bytes},
                     {"ms_encode", p.ms_encode}, {"ms_decode", p.ms_decode}};
    j["roi_value"] = p.roi_value ? nlohmann::json(*p.roi_value) : nlohmann::json(nullptr);
    arr.push_back(std::move(j));
    if (p.roi_value) {
      any_roi = true;
      continue;
    }
    csv << p.image << ',' << p.m_lambda << ',' << p.bpp << ',' << p.wpsnr_db << ',' << p.bytes << ','
        << p.ms_encode << ',' << p.ms_decode << '\n';
  }
  if (!csv) throw std::runtime_error("cannot write " + (dir / "rd.csv").string());
  std::ofstream(dir / "rd.json") << arr.dump(2) << '\n';
  if (any_roi) {
    std::ofstream roi(dir / "roi_sweep.csv");
    roi << "image,roi_value,m_lambda,bpp,wpsnr_db,bytes,ms_encode,ms_decode\n";
    for (const auto& p : points) {
      if (!p.roi_value) continue;
      roi << p.image << ',' << *p.roi_value << ',' << p.m_lambda << ',' << p.bpp << ',' << p.wpsnr_db << ','
          << p.bytes << ',' << p.ms_encode << ',' << p.ms_decode << '\n';
    }
  }
  write_svg(points, dir / "rd.svg");
}

std::uint64_t conv_macs(std::size_t h_out, std::size_t w_out, std::size_t c_in, std::size_t c_out, std::size_t k) {
  return static_cast<std::uint64_t>(h_out) * w_out * c_in * c_out * k * k;
}

std::uint64_t conv_transpose_macs(std::size_t h_in, std::size_t w_in, std::size_t c_in, std::size_t c_out,
                                  std::size_t k) {
  return static_cast<std::uint64_t>(h_in) * w_in * c_in * c_out * k * k;
}

std::uint64_t attention_macs(std::size_t s_i, std::size_t s_p, std::size_t d) {
  return static_cast<std::uint64_t>(s_i) * (s_i + s_p) * d * 2;
}

std::size_t attention_projection_params(std::size_t d) { return 4 * (d * d + d); }

namespace {

struct Walk {
  ComplexityProfile& prof;

  void add(const std::string& name, const char* kind, std::uint64_t macs) {
    prof.layers.push_back({name, kind, macs});
    prof.by_kind[kind] += macs;
    prof.total_macs += macs;
  }

  // Returns the output size.
  std::pair<std::size_t, std::size_t> conv(const std::string& name, std::size_t ci, std::size_t co, std::size_t k,
                                           std::size_t s, std::size_t p, std::size_t h, std::size_t w) {
    const std::size_t ho = (h + 2 * p - k) / s + 1, wo = (w + 2 * p - k) / s + 1;
    add(name, "conv", conv_macs(ho, wo, ci, co, k));
    return {ho, wo};
  }

  std::pair<std::size_t, std::size_t> up(const std::string& name, std::size_t ci, std::size_t co, std::size_t h,
                                         std::size_t w) {
    add(name, "conv_transpose", conv_transpose_macs(h, w, ci, co, 3));
    return {2 * h, 2 * w};
  }

  void swin(const std::string& name, const CodecConfig& cfg, std::size_t c, std::size_t h, std::size_t w,
            bool prompts) {
    const std::size_t win = runtime_window(cfg.window, h, w, prompts);
    const std::size_t hp = (h + win - 1) / win * win, wp = (w + win - 1) / win * win;
    const std::size_t nw = (hp / win) * (wp / win);
    const std::size_t s_i = win * win, s_p = prompts ? (win / 2) * (win / 2) : 0;
    const std::uint64_t cc = static_cast<std::uint64_t>(c) * c;
    add(name + ".q", "linear", nw * s_i * cc);
    add(name + ".k", "linear", nw * (s_i + s_p) * cc);
    add(name + ".v", "linear", nw * (s_i + s_p) * cc);
    add(name + ".attn", "attention", nw * attention_macs(s_i, s_p, c));
    add(name + ".proj", "linear", nw * s_i * cc);
    const std::uint64_t hidden = c * cfg.mlp_ratio;
    add(name + ".fc1", "linear", h * w * c * hidden);
    add(name + ".fc2", "linear", h * w * hidden * c);
  }

  // STB: resampling conv, prompt projections, Swin layers.
  std::pair<std::size_t, std::size_t> block(const std::string& name, const CodecConfig& cfg, bool down,
                                            std::size_t ci, std::size_t co, std::size_t h, std::size_t w,
                                            std::size_t prompt_c, int prompt_stride) {
    auto [ho, wo] = down ? conv(name + ".conv", ci, co, 3, 2, 1, h, w) : up(name + ".up", ci, co, h, w);
    const bool prompts = prompt_c > 0;
    if (prompts) {
      const std::size_t n = cfg.share_prompts ? 1 : cfg.swin_layers;
      for (std::size_t i = 0; i < n; ++i) {
        const std::string pn = name + ".prompt_proj" + std::to_string(i);
        if (prompt_stride == 1) {
          conv(pn, prompt_c, co, 3, 1, 1, h, w);
        } else {
          conv(pn, prompt_c, co, static_cast<std::size_t>(prompt_stride), static_cast<std::size_t>(prompt_stride),
               0, h, w);
        }
      }
    }
    for (std::size_t l = 0; l < cfg.swin_layers; ++l) swin(name + ".layer" + std::to_string(l), cfg, co, ho, wo, prompts);
    return {ho, wo};
  }
};

}  // namespace

ComplexityProfile profile_complexity(const CodecConfig& cfg, std::size_t height, std::size_t width) {
  cfg.validate();
  if (height == 0 || width == 0) throw std::invalid_argument("profile: empty image size");
  ComplexityProfile prof;
  prof.height = height;
  prof.width = width;
  Walk walk{prof};
  const std::size_t hp = (height + kPadMultiple - 1) / kPadMultiple * kPadMultiple;
  const std::size_t wp = (width + kPadMultiple - 1) / kPadMultiple * kPadMultiple;
  const auto& sc = cfg.stage_channels;
  const auto& pc = cfg.prompt_channels;
  const std::size_t cy = cfg.latent_channels, cz = cfg.hyper_channels;

  // p_a
  walk.conv("p_a.conv_in", 5, pc[0], 3, 1, 1, hp, wp);
  for (std::size_t i = 0; i < 3; ++i)
    walk.conv("p_a.down" + std::to_string(i), pc[i], pc[i + 1], 3, 2, 1, hp >> i, wp >> i);
  // g_a
  std::size_t h = hp, w = wp, c = 3;
  for (std::size_t i = 0; i < 4; ++i) {
    std::tie(h, w) = walk.block("g_a.stage" + std::to_string(i), cfg, true, c, sc[i], h, w, pc[i], 4);
    c = sc[i];
  }
  walk.conv("g_a.conv_out", sc[3], cy, 3, 1, 1, h, w);
  const std::size_t hy = h, wy = w;
  // h_a / h_s
  walk.conv("h_a.conv_in", cy, cz, 3, 1, 1, hy, wy);
  for (std::size_t i = 0; i < 2; ++i) std::tie(h, w) = walk.block("h_a.stage" + std::to_string(i), cfg, true, cz, cz, h, w, 0, 1);
  for (std::size_t i = 0; i < 2; ++i) std::tie(h, w) = walk.block("h_s.stage" + std::to_string(i), cfg, false, cz, cz, h, w, 0, 1);
  walk.conv("h_s.conv_out", cz, 2 * cy, 3, 1, 1, h, w);
  // p_s
  walk.conv("p_s.conv_in", cy + 1, pc[3], 3, 1, 1, hy, wy);
  for (std::size_t i = 0; i < 3; ++i) walk.up("p_s.up" + std::to_string(i), pc[3 - i], pc[2 - i], hy << i, wy << i);
  // g_s
  const auto dc = decoder_stage_channels(cfg);
  h = hy, w = wy, c = cy;
  for (std::size_t i = 0; i < 4; ++i) {
    std::tie(h, w) = walk.block("g_s.stage" + std::to_string(i), cfg, false, c, dc[i], h, w, pc[3 - i], 1);
    c = dc[i];
  }
  walk.conv("g_s.conv_out", dc[3], 3, 3, 1, 1, h, w);

  prof.kmacs_per_pixel = static_cast<double>(prof.total_macs) / static_cast<double>(height * width) / 1000.0;
  return prof;
}

MacTally measure_macs(const Codec& codec, std::size_t height, std::size_t width) {
  const Tensor img = pad_to_multiple(Tensor({3, height, width}, 0.5));
  const ConditioningInput cond = ConditioningInput::make(img, Tensor({1, img.dim(1), img.dim(2)}, 1.0), 0.5);
  MacTally tally;
  NoGradGuard guard;
  MacRecorder rec(tally);
  codec.forward(cond, Mode::Eval);
  return tally;
}

Tensor prompt_mass_map(const AttentionProbe& probe, std::size_t gh, std::size_t gw) {
  if (probe.total_tokens <= probe.image_tokens) {
    throw std::logic_error("attention call has no prompt tokens to attend to");
  }
  const WindowLayout& l = probe.layout;
  const std::size_t win = l.window, nwx = l.windows_x();
  if (win * win != probe.image_tokens || probe.windows != l.window_count()) {
    throw ShapeError("attention probe does not match its window layout");
  }
  Buffer out(gh * gw, 0.0);
  for (std::size_t wi = 0; wi < probe.windows; ++wi) {
    for (std::size_t t = 0; t < probe.image_tokens; ++t) {
      double acc = 0;
      for (std::size_t hd = 0; hd < probe.heads; ++hd)
        for (std::size_t j = probe.image_tokens; j < probe.total_tokens; ++j) acc += probe.prob(wi, hd, t, j);
      acc /= static_cast<double>(probe.heads);
      const std::size_t y = ((wi / nwx) * win + t / win + l.shift) % l.height;
      const std::size_t x = ((wi % nwx) * win + t % win + l.shift) % l.width;
      if (y < gh && x < gw) out[y * gw + x] = std::clamp(acc, 0.0, 1.0);
    }
  }
  return Tensor({1, gh, gw}, std::move(out));
}

std::vector<Tensor> prompt_attention_map(const Codec& codec, const ConditioningInput& cond, std::size_t stage,
                                         CodecSide side) {
  if (stage >= 4) throw std::out_of_range("stage index " + std::to_string(stage) + " is not in 0..3");
  NoGradGuard guard;
  StageProbes probes;
  const std::size_t h = cond.image.dim(1), w = cond.image.dim(2);
  std::size_t gh, gw;
  if (side == CodecSide::Encoder) {
    codec.encode_latent(cond, true, &probes);
    gh = h >> (stage + 1);
    gw = w >> (stage + 1);
  } else {
    const LatentBundle b = codec.analyze(cond, Mode::Eval);
    const Tensor small({1, b.y_hat.dim(1), b.y_hat.dim(2)}, cond.m_lambda());
    codec.synthesize(b.y_hat, small, Mode::Eval, true, &probes);
    gh = (h / 16) << (stage + 1);
    gw = (w / 16) << (stage + 1);
  }

  std::vector<Tensor> maps;
  for (const auto& probe : probes[stage]) maps.push_back(prompt_mass_map(probe, gh, gw));
  if (maps.empty()) throw std::logic_error("stage " + std::to_string(stage) + " recorded no attention");
  return maps;
}

void write_heat_map(const std::filesystem::path& path, const Tensor& map) {
  if (map.rank() != 3 || map.dim(0) != 1) throw ShapeError("heat map must be 1×H×W");
  write_image(path, map);
}

}  // namespace picr
