// Acceptance suite: one PASS/FAIL line per criterion.
//
//   dsat_acceptance [--workdir DIR] [--dsat PATH] [--only 1,4,...] [--quick]

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>

#include "dsat/image_io.hpp"
#include "dsat/train.hpp"
#include "gradcheck.hpp"
#include "reference_swin.hpp"

using namespace dsat;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int prec = 4) {
  std::ostringstream o;
  o << std::setprecision(prec) << v;
  return o.str();
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// ---- 1: gradient suite -----------------------------------------------------

Outcome gradient_suite() {
  using gradcheck::random;
  const auto t0 = Clock::now();
  double worst = 0;
  std::string worst_name;
  int checks = 0;
  std::size_t coords = 0;
  const auto run = [&](const std::string& name, const gradcheck::Fn& f, std::vector<Tensor<double>> in,
                       std::size_t max_coords = 0) {
    const auto r = gradcheck::check(f, std::move(in), max_coords);
    ++checks;
    coords += r.coords;
    if (r.worst > worst) {
      worst = r.worst;
      worst_name = name + ":" + r.worst_input;
    }
  };

  const auto a = random({3, 4}, 1), b = random({3, 4}, 2);
  run("add", [](auto& v) { return ops::add(v[0], v[1]); }, {a, b});
  run("sub", [](auto& v) { return ops::sub(v[0], v[1]); }, {a, b});
  run("mul", [](auto& v) { return ops::mul(v[0], v[1]); }, {a, b});
  run("scale", [](auto& v) { return ops::scale(v[0], -2.5); }, {a});
  run("sum", [](auto& v) { return ops::sum(v[0]); }, {a});
  run("mean", [](auto& v) { return ops::mean(v[0]); }, {a});
  const auto x3 = random({2, 3, 4}, 3);
  run("add_trailing", [](auto& v) { return ops::add_trailing(v[0], v[1]); }, {x3, random({3, 4}, 4)});
  run("mul_last_dim", [](auto& v) { return ops::mul_last_dim(v[0], v[1]); }, {x3, random({4}, 5)});
  run("mul_channels", [](auto& v) { return ops::mul_channels(v[0], v[1]); }, {x3, random({2}, 6)});
  const auto x = random({3, 5}, 7, -2, 2);
  run("sigmoid", [](auto& v) { return ops::sigmoid(v[0]); }, {x});
  run("gelu", [](auto& v) { return ops::gelu(v[0]); }, {x});
  run("leaky_relu", [](auto& v) { return ops::leaky_relu(v[0], 0.1); }, {random({3, 5}, 8, -2, 2, 0.05)});
  run("softmax", [](auto& v) { return ops::softmax(v[0]); }, {x});
  run("layer_norm", [](auto& v) { return ops::layer_norm(v[0], v[1], v[2]); },
      {random({4, 6}, 9), random({6}, 10), random({6}, 11)});
  run("l2_normalize", [](auto& v) { return ops::l2_normalize(v[0]); }, {random({3, 4}, 12)});
  const auto target = random({3, 4}, 13, -1, 1, 0, false);
  run("l1_loss", [target](auto& v) { return ops::l1_loss(v[0], target); }, {random({3, 4}, 14, -1, 1, 0.05)});
  run("linear", [](auto& v) { return ops::linear(v[0], v[1], v[2]); },
      {random({2, 3, 4}, 15), random({4, 5}, 16), random({5}, 17)});
  run("bmm", [](auto& v) { return ops::bmm(v[0], v[1]); }, {random({2, 3, 4}, 18), random({2, 4, 5}, 19)});
  run("bmm_t", [](auto& v) { return ops::bmm(v[0], v[1], true); }, {random({2, 3, 4}, 20), random({2, 5, 4}, 21)});
  const auto img = random({2, 5, 6}, 22);
  run("conv2d", [](auto& v) { return ops::conv2d(v[0], v[1], v[2], 1); },
      {img, random({3, 2, 3, 3}, 23), random({3}, 24)});
  run("conv2d_stride2", [](auto& v) { return ops::conv2d(v[0], v[1], v[2], 1, 2); },
      {img, random({3, 2, 3, 3}, 25), random({3}, 26)});
  run("depthwise_conv2d", [](auto& v) { return ops::depthwise_conv2d(v[0], v[1]); }, {img, random({2, 1, 3, 3}, 27)});
  run("global_avg_pool", [](auto& v) { return ops::global_avg_pool(v[0]); }, {img});
  const auto hw = random({4, 4, 3}, 28);
  run("reshape", [](auto& v) { return ops::reshape(v[0], {16, 3}); }, {hw});
  run("permute", [](auto& v) { return ops::permute(v[0], {2, 0, 1}); }, {hw});
  run("chw_to_hwc", [](auto& v) { return ops::chw_to_hwc(v[0]); }, {hw});
  run("hwc_to_chw", [](auto& v) { return ops::hwc_to_chw(v[0]); }, {hw});
  run("slice_last", [](auto& v) { return ops::slice_last(v[0], 1, 2); }, {hw});
  run("gather_rows", [](auto& v) { return ops::gather_rows(v[0], {2, 0, 2, 1}); }, {random({3, 2}, 29)});
  run("pixel_shuffle", [](auto& v) { return ops::pixel_shuffle(v[0], 2); }, {random({8, 2, 3}, 30)});
  run("pixel_unshuffle", [](auto& v) { return ops::pixel_unshuffle(v[0], 2); }, {random({2, 4, 6}, 31)});
  run("window_partition", [](auto& v) { return ops::window_partition(v[0], 2); }, {hw});
  run("window_reverse", [](auto& v) { return ops::window_reverse(v[0], 2, 4, 4); }, {random({4, 4, 3}, 32)});
  run("cyclic_shift", [](auto& v) { return ops::cyclic_shift(v[0], -1, 2); }, {hw});
  run("pad_reflect_hw", [](auto& v) { return ops::pad_reflect_hw(v[0], 2, 1); }, {hw});
  run("crop_hw", [](auto& v) { return ops::crop_hw(v[0], 3, 2); }, {hw});
  const auto neg = random({6, 5}, 33, -1, 1, 0, false).vec();
  run("degradation_loss", [neg](auto& v) { return degradation_loss(v[0], v[1], neg, 0.2); },
      {random({3, 5}, 34), random({3, 5}, 35)});
  run("stack_rows", [](auto& v) { return stack_rows(std::vector<Tensor<double>>{v[0], v[1]}); },
      {random({3}, 36), random({3}, 37)});

  // Full desk-config forward at x4: 12x12 input pads to 16x16, so the shifted
  // layers see four windows and a live mask. Every parameter tensor is checked
  // on a fixed sample of coordinates.
  auto cfg = DsatConfig::desk(4);
  cfg.seed = 11;
  DsatNet<double> net(cfg);
  const auto lq = random({3, 12, 12}, 38, 0.0, 1.0);
  const auto D = random({static_cast<std::int64_t>(cfg.degradation_dim)}, 39);
  std::vector<Tensor<double>> inputs{lq, D};
  for (const auto& p : net.params().items()) inputs.push_back(p.tensor);
  run("desk_forward", [&](auto&) { return net.forward(lq, D); }, inputs, 3);

  auto ecfg = EncoderConfig::desk(8);
  DegradationEncoder<double> enc(ecfg);
  const auto patch = random({3, 8, 8}, 40, 0.0, 1.0, 0.0, false);
  const Tensor<double> key({1, ecfg.dim}, random({ecfg.dim}, 41, -1, 1, 0, false).vec());
  const auto qneg = random({4, ecfg.dim}, 42, -1, 1, 0, false).vec();
  std::vector<Tensor<double>> eparams;
  for (const auto& p : enc.params().items()) eparams.push_back(p.tensor);
  run("encoder_loss",
      [&](auto&) { return degradation_loss(ops::reshape(enc.encode(patch).embedding, {1, ecfg.dim}), key, qneg, 0.07); },
      eparams, 4);

  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = worst < 1e-4 && secs < 300;
  o.detail = std::to_string(checks) + " checks, " + std::to_string(coords) + " coordinates, worst relative error " +
             fmt(worst) + " (" + worst_name + "), " + fmt(secs, 3) + " s";
  return o;
}

// ---- 2: degradation synthesis ---------------------------------------------

Outcome degradation_synthesis() {
  std::mt19937_64 rng(2024);
  double worst_sum = 0;
  int kernels = 0;
  for (int scale : {2, 3, 4})
    for (auto mode : {SpecMode::isotropic_noisefree, SpecMode::general})
      for (int i = 0; i < 200; ++i) {
        const auto k = gaussian_kernel(sample_spec(rng, scale, mode));
        double s = 0;
        for (double v : k.data()) s += v;
        worst_sum = std::max(worst_sum, std::abs(s - 1.0));
        ++kernels;
      }

  // Second moments over a grid covering the sampled eigenvalue range.
  double worst_cov = 0, worst_cov_above = 0;
  std::string worst_at;
  int pairs = 0, within = 0;
  const std::vector<double> lambdas{0.2, 0.3, 0.4, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0, 4.0};
  for (double l1 : lambdas)
    for (double l2 : lambdas)
      for (double th : {0.0, 0.4, 1.1, 2.5}) {
        DegradationSpec s;
        s.kind = Anisotropic{l1, l2, th};
        const auto k = gaussian_kernel(s);
        const int n = static_cast<int>(k.dim(0)), r = n / 2;
        double sxx = 0, sxy = 0, syy = 0;
        for (int y = -r; y <= r; ++y)
          for (int x = -r; x <= r; ++x) {
            const double w = k[(y + r) * n + x + r];
            sxx += w * x * x;
            sxy += w * x * y;
            syy += w * y * y;
          }
        const auto e = kernel_covariance(s);
        const double err = std::sqrt((sxx - e[0]) * (sxx - e[0]) + 2 * (sxy - e[1]) * (sxy - e[1]) +
                                     (syy - e[3]) * (syy - e[3]));
        const double ref = std::sqrt(e[0] * e[0] + 2 * e[1] * e[1] + e[3] * e[3]);
        const double rel = err / ref;
        ++pairs;
        if (rel < 0.02) ++within;
        if (rel > worst_cov) {
          worst_cov = rel;
          worst_at = "l1=" + fmt(l1) + " l2=" + fmt(l2) + " theta=" + fmt(th);
        }
        if (std::min(l1, l2) >= 0.5) worst_cov_above = std::max(worst_cov_above, rel);
      }

  double worst_const = 0;
  std::mt19937_64 srng(7);
  for (int i = 0; i < 30; ++i) {
    const int scale = 2 + i % 3;
    auto spec = sample_spec(srng, scale, SpecMode::general);
    spec.noise_sigma = 0;
    const float c = 0.1f + 0.8f * static_cast<float>(i) / 30.0f;
    const auto lr = degrade(ImageBuffer(48, 48, 3, c), spec, 1);
    for (float v : lr.pixels) worst_const = std::max(worst_const, static_cast<double>(std::abs(v - c)));
  }

  Outcome o;
  o.pass = worst_sum <= 1e-8 && worst_cov < 0.02 && worst_const == 0.0;
  o.detail = std::to_string(kernels) + " kernels, max |sum-1| " + fmt(worst_sum) + "; covariance within 2% for " +
             std::to_string(within) + "/" + std::to_string(pairs) + " (l1,l2,theta) grid points, worst " +
             fmt(worst_cov) + " at " + worst_at + ", worst with both eigenvalues >= 0.5: " + fmt(worst_cov_above) +
             "; constant images max deviation " + fmt(worst_const);
  return o;
}

// ---- 3: identity reduction -------------------------------------------------

Outcome identity_reduction() {
  int cases = 0, exact = 0;
  for (int scale : {2, 4})
    for (auto [h, w] : {std::pair{16, 16}, {12, 20}, {8, 8}}) {
      auto cfg = DsatConfig::desk(scale);
      cfg.seed = static_cast<std::uint64_t>(scale * 100 + h);
      DsatNet<float> net(cfg);
      const auto lq = tensor_cast<float>(gradcheck::random({3, h, w}, 50 + cases, 0, 1, 0, false));
      const auto D = tensor_cast<float>(gradcheck::random({cfg.degradation_dim}, 70 + cases, -1, 1, 0, false));
      ForwardOptions<float> id{Modulation::identity};
      NoGradGuard ng;
      const auto a = net.forward(lq, D, id);
      const auto b = reference::forward(net, lq);
      exact += bit_equal(a, b);
      ++cases;
    }
  return {exact == cases, std::to_string(exact) + "/" + std::to_string(cases) +
                              " desk-config forwards with D1=0, D2=1 bit-identical to plain window-attention SR"};
}

// ---- shared toy-set helpers ------------------------------------------------

ConfigFile toy_config(int lr_patch, std::uint64_t seed) {
  ConfigFile f;
  f.set("seed", std::to_string(seed));
  f.set("model.preset", "desk");
  f.set("model.scale", "4");
  f.set("data.degradation", "two_spec");
  f.set("data.sigma_a", "0.5");
  f.set("data.sigma_b", "3.5");
  f.set("data.synthetic_images", "32");
  f.set("data.synthetic_size", "96");
  f.set("data.synthetic_kind", "texture");
  f.set("data.lr_patch", std::to_string(lr_patch));
  f.set("data.images_per_batch", "4");
  return f;
}

struct EmbedStats {
  double separability = 0, positive_cos = 0, cross_cos = 0, null_mean = 0;
};

double cosine(const std::vector<float>& a, const std::vector<float>& b) {
  double d = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    d += double(a[i]) * b[i];
    na += double(a[i]) * a[i];
    nb += double(b[i]) * b[i];
  }
  return d / std::sqrt(na * nb);
}

// Held-out textures under both toy specs. For each (image, spec) two
// non-overlapping LR crops are embedded; the first crop is the point used for
// separability, the pair gives the positive cosine, and crops of different
// images under different specs give the cross cosine.
EmbedStats embedding_stats(const DegradationEncoder<float>& enc, int lr_patch, std::uint64_t seed) {
  const auto fam = SpecFamily::two_spec(0.5, 3.5, 4);
  const auto pool = synthetic_pool(16, 96, 9000 + seed, SyntheticKind::texture);
  std::vector<std::vector<float>> first, second;
  std::vector<int> labels, image;
  for (std::size_t i = 0; i < pool.size(); ++i)
    for (int l = 0; l < 2; ++l) {
      const auto lr = degrade(pool[i], fam.fixed[static_cast<std::size_t>(l)], seed * 131 + i * 2 + l);
      const int far = lr.height - lr_patch;
      NoGradGuard ng;
      const auto e1 = enc.encode(to_tensor<float>(crop(lr, 0, 0, lr_patch, lr_patch))).embedding;
      const auto e2 = enc.encode(to_tensor<float>(crop(lr, far, far, lr_patch, lr_patch))).embedding;
      first.push_back(e1.vec());
      second.push_back(e2.vec());
      labels.push_back(l);
      image.push_back(static_cast<int>(i));
    }
  EmbedStats s;
  std::vector<double> rows;
  for (const auto& e : first) rows.insert(rows.end(), e.begin(), e.end());
  const auto dim = first.front().size();
  s.separability = separability(rows, dim, labels);
  double pos = 0, cross = 0;
  int ncross = 0;
  for (std::size_t i = 0; i < first.size(); ++i) {
    pos += cosine(first[i], second[i]);
    for (std::size_t j = 0; j < first.size(); ++j)
      if (image[i] != image[j] && labels[i] != labels[j]) {
        cross += cosine(first[i], first[j]);
        ++ncross;
      }
  }
  s.positive_cos = pos / static_cast<double>(first.size());
  s.cross_cos = cross / ncross;
  std::mt19937_64 rng(seed + 77);
  auto shuffled = labels;
  double null = 0;
  const int perms = 50;
  for (int p = 0; p < perms; ++p) {
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    null += separability(rows, dim, shuffled);
  }
  s.null_mean = null / perms;
  return s;
}

// ---- 4: contrastive trend --------------------------------------------------

constexpr int kEncoderPatch = 16;

Outcome contrastive_trend(const std::string& work) {
  const auto t0 = Clock::now();
  auto f = toy_config(kEncoderPatch, 4);
  f.set("train.encoder_pretrain_steps", "500");
  const auto cfg = resolve_train_config(f);
  TrainState s(cfg);
  RunOptions o;
  o.out_dir = work + "/crit4";
  o.warn = {};
  run_encoder_pretraining(s, load_pool(cfg), o);
  const auto trained = embedding_stats(s.query, kEncoderPatch, 4);

  // model1 flags: degradation learning off, so the encoder keeps its init.
  auto f1 = f;
  f1.set("ablation.model", "1");
  TrainState m1(resolve_train_config(f1));
  const auto ablated = embedding_stats(m1.query, kEncoderPatch, 4);
  const double secs = seconds_since(t0);

  const double margin = trained.positive_cos - trained.cross_cos;
  const double gap = std::abs(ablated.separability - ablated.null_mean);
  Outcome out;
  out.pass = trained.separability > 0.3 && margin > 0.2 && gap <= 0.1 && secs < 600;
  out.detail = "500 encoder steps: separability " + fmt(trained.separability) + " (null " + fmt(trained.null_mean) +
               "), positive cos " + fmt(trained.positive_cos) + " vs cross cos " + fmt(trained.cross_cos) +
               " (margin " + fmt(margin) + "); model1 separability " + fmt(ablated.separability) + " vs null " +
               fmt(ablated.null_mean) + " (gap " + fmt(gap) + "); " + fmt(secs, 3) + " s";
  return out;
}

// ---- 5: ablation ordering --------------------------------------------------

constexpr int kSrPatch = 8;
constexpr int kAblationSteps = 2000;
constexpr int kAblationPretrain = 500;

std::vector<EvalItem> toy_eval_items(const TrainConfig& cfg) {
  const auto pool = load_pool(cfg);
  const auto fam = SpecFamily::two_spec(cfg.sigma_a, cfg.sigma_b, cfg.model.scale);
  std::vector<EvalItem> items;
  for (std::size_t i = 0; i < pool.size(); ++i)
    for (std::size_t l = 0; l < 2; ++l)
      items.push_back({"img" + std::to_string(i), pool[i], fam.fixed[l], static_cast<int>(l)});
  return items;
}

Outcome ablation_ordering(const std::string& work) {
  const auto t0 = Clock::now();
  int holds = 0;
  std::string detail;
  for (std::uint64_t seed : {1, 2, 3}) {
    double psnr_of[2] = {0, 0};
    for (int k = 0; k < 2; ++k) {
      const int model = k == 0 ? 5 : 1;
      auto f = toy_config(kSrPatch, seed);
      f.set("ablation.model", std::to_string(model));
      f.set("train.steps", std::to_string(kAblationSteps));
      f.set("train.encoder_pretrain_steps", std::to_string(model == 5 ? kAblationPretrain : 0));
      f.set("optim.lr0", "5e-4");
      const auto cfg = resolve_train_config(f);
      TrainState s(cfg);
      const auto pool = load_pool(cfg);
      RunOptions o;
      o.out_dir = work + "/crit5/seed" + std::to_string(seed) + "_model" + std::to_string(model);
      o.warn = {};
      if (cfg.encoder_pretrain_steps > 0) run_encoder_pretraining(s, pool, o);
      run_training(s, pool, o);
      psnr_of[k] = evaluate(model_from(s), toy_eval_items(cfg), 100 + seed).mean_psnr;
    }
    const bool ok = psnr_of[0] >= psnr_of[1];
    holds += ok;
    detail += "seed " + std::to_string(seed) + ": model5 " + fmt(psnr_of[0], 5) + " dB vs model1 " +
              fmt(psnr_of[1], 5) + " dB" + (ok ? "" : " (reversed)") + "; ";
  }
  return {holds >= 2, std::to_string(holds) + "/3 seeds ordered; " + detail + fmt(seconds_since(t0), 4) + " s"};
}

// ---- 6: training sanity ----------------------------------------------------

Outcome training_sanity(const std::string& work) {
  const auto t0 = Clock::now();
  ConfigFile f;
  f.set("seed", "6");
  f.set("model.scale", "4");
  f.set("data.synthetic_images", "32");
  f.set("data.synthetic_size", "96");
  f.set("data.lr_patch", "12");
  f.set("data.images_per_batch", "8");
  f.set("train.steps", "500");
  f.set("optim.lr0", "5e-4");
  const auto cfg = resolve_train_config(f);
  TrainState s(cfg);
  const auto pool = load_pool(cfg);
  std::vector<double> losses;
  RunOptions o;
  o.out_dir = work + "/crit6";
  o.warn = {};
  o.on_step = [&](const LogRow& r) { losses.push_back(r.l_sr); };
  run_training(s, pool, o);

  // Mean over 25-step windows at the start and the end.
  const auto window_mean = [&](std::size_t from) {
    return std::accumulate(losses.begin() + from, losses.begin() + from + 25, 0.0) / 25.0;
  };
  const double first = window_mean(0), last = window_mean(losses.size() - 25);
  const double drop = 1.0 - last / first;

  // Train-set PSNR under freshly drawn training-distribution degradations.
  std::mt19937_64 rng(606);
  std::vector<EvalItem> items;
  for (std::size_t i = 0; i < pool.size(); ++i)
    items.push_back({"img" + std::to_string(i), pool[i], cfg.batch_config().family.draw(rng, 4).first, 0});
  const auto rep = evaluate(model_from(s), items, 66);
  const double gain = rep.mean_psnr - rep.mean_bicubic_psnr;
  const double secs = seconds_since(t0);
  return {drop >= 0.5 && gain >= 0.5 && secs < 1200,
          "smoothed L1 " + fmt(first) + " -> " + fmt(last) + " (drop " + fmt(100 * drop, 3) + "%), train-set PSNR " +
              fmt(rep.mean_psnr, 5) + " dB vs bicubic " + fmt(rep.mean_bicubic_psnr, 5) + " dB (gain " +
              fmt(gain, 3) + " dB), " + fmt(secs, 3) + " s"};
}

// ---- 7: metric oracles -----------------------------------------------------

Outcome metric_oracles(const std::string& work) {
  ImageBuffer a(48, 48, 1, 0.25f), b(48, 48, 1, 0.35f);
  const double p = psnr(a, b);
  const auto img = synthetic_image(48, 3);
  const double s = ssim(img, img);

  // Halving every 250 epochs, read back from the metrics log. One step per
  // epoch keeps the run short while crossing two boundaries.
  ConfigFile f;
  f.set("model.scale", "2");
  f.set("model.channels", "8");
  f.set("model.blocks", "1");
  f.set("model.layers", "2");
  f.set("model.window", "4");
  f.set("encoder.widths", "4,4,8,8,8,8");
  f.set("encoder.dim", "8");
  f.set("data.synthetic_images", "4");
  f.set("data.synthetic_size", "32");
  f.set("data.lr_patch", "12");
  f.set("data.images_per_batch", "1");
  f.set("data.steps_per_epoch", "1");
  f.set("contrast.queue_size", "8");
  f.set("train.steps", "600");
  const auto cfg = resolve_train_config(f);
  TrainState st(cfg);
  RunOptions o;
  o.out_dir = work + "/crit7";
  o.warn = {};
  run_training(st, load_pool(cfg), o);
  std::ifstream in(o.out_dir + "/metrics.csv");
  std::string line;
  std::getline(in, line);
  int rows = 0, bad = 0;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) cells.push_back(c);
    const auto epoch = std::stoll(cells.at(1));
    const double lr = std::stod(cells.at(4));
    const double want = cfg.lr0 * std::pow(0.5, static_cast<double>(epoch / 250));
    if (std::abs(lr - want) > 1e-12 * want) ++bad;
    ++rows;
  }
  const bool ok = std::abs(p - 20.0) <= 0.01 && s == 1.0 && rows == 600 && bad == 0;
  return {ok, "PSNR(offset 0.1) " + fmt(p, 8) + " dB, SSIM(x,x) " + fmt(s, 17) + ", lr law held on " +
                  std::to_string(rows - bad) + "/" + std::to_string(rows) + " logged steps (epochs 0..599)"};
}

// ---- 8: determinism --------------------------------------------------------

bool same_file(const std::string& a, const std::string& b) {
  std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
  if (!fa || !fb) return false;
  return std::string(std::istreambuf_iterator<char>(fa), {}) == std::string(std::istreambuf_iterator<char>(fb), {});
}

int sh(const std::string& cmd) { return std::system((cmd + " >/dev/null 2>&1").c_str()); }

Outcome determinism(const std::string& work, const std::string& dsat) {
  std::vector<std::string> failures;
  int compared = 0;
  const auto check = [&](const std::string& what, const std::string& a, const std::string& b) {
    ++compared;
    if (!same_file(a, b)) failures.push_back(what);
  };
  const auto dir = work + "/crit8";
  fs::create_directories(dir);
  const auto hr = dir + "/hr.png";
  write_png(hr, synthetic_image(64, 8));

  if (!dsat.empty()) {
    const std::string tiny =
        " --set model.channels=8 --set model.blocks=1 --set model.heads=2 --set model.window=4"
        " --set encoder.widths=8,8,8,8,8,8 --set encoder.dim=16 --set contrast.queue_size=32"
        " --set data.synthetic_images=4 --set data.synthetic_size=64 --set data.images_per_batch=2"
        " --set data.lr_patch=12 --seed 5";
    for (const char* run : {"a", "b"}) {
      const auto d = dir + "/" + run;
      fs::create_directories(d);
      std::ofstream(d + "/hr.txt") << hr << '\n';
      if (sh(dsat + " degrade --input " + hr + " --out " + d + "/lr.png --scale 4 --aniso 2.5,0.7,0.9 --noise 8 --seed 3") ||
          sh(dsat + " train-encoder --out " + d + "/enc --set train.encoder_pretrain_steps=6" + tiny) ||
          sh(dsat + " train --out " + d + "/train --set train.steps=6 --init-encoder " + d + "/enc/encoder.ckpt" + tiny) ||
          sh(dsat + " eval --model " + d + "/train/final.ckpt --input " + d + "/lr.png --out " + d + "/sr.png") ||
          sh(dsat + " eval --model " + d + "/train/final.ckpt --manifest " + d + "/hr.txt --spec iso:1.5/5 --spec aniso:3,1,0.5 --report " + d + "/report.csv --seed 4") ||
          sh("cd " + d + " && " + dsat + " embed --model train/final.ckpt --input lr.png --out emb.csv"))
        return {false, "a CLI subcommand failed in run " + std::string(run)};
    }
    for (const char* f : {"lr.png", "enc/encoder.ckpt", "enc/encoder_metrics.csv", "enc/config.txt", "train/final.ckpt",
                          "train/metrics.csv", "train/config.txt", "sr.png", "report.csv", "emb.csv"})
      check(std::string("cli:") + f, dir + "/a/" + f, dir + "/b/" + f);
  }

  // Library-level: a run split by a resume reproduces the uninterrupted run.
  ConfigFile f;
  f.set("seed", "9");
  f.set("model.scale", "2");
  f.set("model.channels", "8");
  f.set("model.blocks", "1");
  f.set("model.window", "4");
  f.set("encoder.widths", "8,8,8,8,8,8");
  f.set("encoder.dim", "16");
  f.set("data.synthetic_images", "4");
  f.set("data.synthetic_size", "32");
  f.set("data.lr_patch", "12");
  f.set("data.images_per_batch", "2");
  f.set("contrast.queue_size", "16");
  f.set("train.steps", "8");
  f.set("train.checkpoint_every", "4");
  const auto cfg = resolve_train_config(f);
  const auto pool = load_pool(cfg);
  TrainState whole(cfg), split(cfg);
  RunOptions o1;
  o1.out_dir = dir + "/lib_whole";
  o1.warn = {};
  run_training(whole, pool, o1);
  RunOptions o2;
  o2.out_dir = dir + "/lib_resumed";
  o2.resume = dir + "/lib_whole/step4.ckpt";
  o2.warn = {};
  run_training(split, pool, o2);
  check("resume:final.ckpt", dir + "/lib_whole/final.ckpt", dir + "/lib_resumed/final.ckpt");

  std::string detail = std::to_string(compared - static_cast<int>(failures.size())) + "/" + std::to_string(compared) +
                       " artifacts bit-identical across reruns";
  if (dsat.empty()) detail += " (CLI binary not given; library only)";
  for (const auto& f2 : failures) detail += "; differs: " + f2;
  return {failures.empty() && !dsat.empty(), detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks"};
  std::string work = "acceptance_work", dsat;
  std::vector<int> only;
  app.add_option("--workdir", work, "Scratch directory");
  app.add_option("--dsat", dsat, "Path to the dsat CLI (criterion 8)");
  app.add_option("--only", only, "Run only these criteria")->delimiter(',');
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(work);
  work = fs::absolute(work).string();
  if (!dsat.empty()) dsat = fs::absolute(dsat).string();

  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"gradient suite", [] { return gradient_suite(); }},
      {"degradation synthesis", [] { return degradation_synthesis(); }},
      {"identity reduction", [] { return identity_reduction(); }},
      {"contrastive trend", [&] { return contrastive_trend(work); }},
      {"ablation ordering", [&] { return ablation_ordering(work); }},
      {"training sanity", [&] { return training_sanity(work); }},
      {"metric oracles", [&] { return metric_oracles(work); }},
      {"determinism", [&] { return determinism(work, dsat); }},
  };
  const std::set<int> selected(only.begin(), only.end());
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int n = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.count(n)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << "criterion " << n << " " << (o.pass ? "PASS" : "FAIL") << " [" << criteria[i].first << "] "
              << o.detail << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
