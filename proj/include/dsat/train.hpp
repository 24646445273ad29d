#pragma once

// Joint training of the degradation encoder and the SR network, encoder
// pretraining, checkpoint/resume, and evaluation reports.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "dsat/checkpoint.hpp"
#include "dsat/config.hpp"
#include "dsat/degradation.hpp"
#include "dsat/encoder.hpp"
#include "dsat/image_io.hpp"
#include "dsat/metrics.hpp"
#include "dsat/network.hpp"
#include "dsat/optim.hpp"

namespace dsat {

struct Ablation {
  bool degradation_learning = true;
  bool dcl = true;
  bool attention_weights = true;

  bool operator==(const Ablation&) const = default;
};

/// Ablation rows: model1 drops degradation learning, model2 the attention
/// weights, model3 the DCL, model4 both; model5 is the full network.
inline Ablation ablation_preset(int model) {
  switch (model) {
    case 1: return {false, true, true};
    case 2: return {true, true, false};
    case 3: return {true, false, true};
    case 4: return {true, false, false};
    case 5: return {true, true, true};
    default: throw ConfigError("ablation.model must be 1..5, got " + std::to_string(model));
  }
}

enum class DegradationSource { isotropic, general, two_spec };

struct TrainConfig {
  DsatConfig model;
  EncoderConfig encoder;

  std::string manifest;  // empty: synthetic pool
  int synthetic_images = 32;
  int synthetic_size = 96;
  std::uint64_t synthetic_seed = 1;
  SyntheticKind synthetic_kind = SyntheticKind::scene;
  int images_per_batch = 4;
  int lr_patch = 16;
  bool augment = true;
  DegradationSource degradation = DegradationSource::isotropic;
  double sigma_a = 0.5, sigma_b = 3.5;
  std::int64_t steps_per_epoch = 0;  // 0: ceil(pool / images_per_batch)

  double lr0 = 2e-4, beta1 = 0.9, beta2 = 0.999;
  std::int64_t halving_period_epochs = 250;

  std::int64_t steps = 500;
  std::int64_t encoder_pretrain_steps = 0;
  std::int64_t checkpoint_every = 0;  // 0: final checkpoint only
  bool freeze_encoder = false;

  int queue_size = 256;
  double momentum = 0.999;
  double temperature = 0.07;
  bool include_positive = true;

  Ablation ablation;
  std::uint64_t seed = 0;

  BatchConfig batch_config() const {
    BatchConfig b;
    b.images = images_per_batch;
    b.lr_patch = lr_patch;
    b.scale = model.scale;
    b.augment = augment;
    if (degradation == DegradationSource::two_spec)
      b.family = SpecFamily::two_spec(sigma_a, sigma_b, model.scale);
    else
      b.family.mode = degradation == DegradationSource::general ? SpecMode::general : SpecMode::isotropic_noisefree;
    return b;
  }

  void validate() const {
    model.validate();
    encoder.validate();
    if (encoder.dim != model.degradation_dim)
      throw ConfigError("encoder.dim (" + std::to_string(encoder.dim) + ") must equal the model's degradation dim (" +
                        std::to_string(model.degradation_dim) + ")");
    if (images_per_batch <= 0 || lr_patch <= 0) throw ConfigError("data: batch and patch sizes must be positive");
    if (manifest.empty() && (synthetic_images <= 0 || synthetic_size < lr_patch * model.scale))
      throw ConfigError("data: synthetic images must be at least lr_patch * scale pixels wide");
    if (steps < 0 || encoder_pretrain_steps < 0 || checkpoint_every < 0 || steps_per_epoch < 0)
      throw ConfigError("train: step counts must be non-negative");
    if (!(lr0 >= 0)) throw ConfigError("optim.lr0 must be non-negative");
    if (halving_period_epochs <= 0) throw ConfigError("optim.halving_period_epochs must be positive");
    if (queue_size <= 0) throw ConfigError("contrast.queue_size must be positive");
    if (momentum < 0 || momentum > 1) throw ConfigError("contrast.momentum must lie in [0,1]");
    if (!(temperature > 0)) throw ConfigError("contrast.temperature must be positive");
  }
};

inline const std::set<std::string>& train_config_keys() {
  static const std::set<std::string> keys = {
      "seed",
      "model.preset", "model.blocks", "model.layers", "model.channels", "model.window", "model.heads",
      "model.scale", "model.mlp_ratio", "model.modulation_hidden",
      "encoder.widths", "encoder.strides", "encoder.dim",
      "data.manifest", "data.synthetic_images", "data.synthetic_size", "data.synthetic_seed", "data.synthetic_kind",
      "data.images_per_batch", "data.lr_patch", "data.augment", "data.degradation", "data.sigma_a",
      "data.sigma_b", "data.steps_per_epoch",
      "optim.lr0", "optim.beta1", "optim.beta2", "optim.halving_period_epochs",
      "train.steps", "train.encoder_pretrain_steps", "train.checkpoint_every", "train.freeze_encoder",
      "contrast.queue_size", "contrast.momentum", "contrast.temperature", "contrast.include_positive",
      "ablation.model", "ablation.degradation_learning", "ablation.dcl", "ablation.attention_weights",
  };
  return keys;
}

inline const char* source_name(DegradationSource s) {
  switch (s) {
    case DegradationSource::general: return "general";
    case DegradationSource::two_spec: return "two_spec";
    default: return "isotropic";
  }
}

/// Defaults come from model.preset (desk or full); ablation.model then sets
/// the three flags; explicit keys override both.
inline TrainConfig resolve_train_config(const ConfigFile& f) {
  f.require_known(train_config_keys());
  TrainConfig c;
  const auto preset = f.get_string("model.preset", "desk");
  const int scale = static_cast<int>(f.get_int("model.scale", 4));
  if (preset == "full") {
    c.model = DsatConfig::full(scale);
    c.encoder = EncoderConfig::full();
    c.images_per_batch = 16;
    c.lr_patch = 48;
    c.synthetic_size = 48 * scale + 32;
    c.queue_size = 8192;
  } else if (preset == "desk") {
    c.model = DsatConfig::desk(scale);
    c.encoder = EncoderConfig::desk(c.lr_patch);
  } else {
    throw ConfigError("model.preset must be desk or full, got '" + preset + "'");
  }
  c.seed = static_cast<std::uint64_t>(f.get_int("seed", 0));
  c.model.blocks = static_cast<int>(f.get_int("model.blocks", c.model.blocks));
  c.model.layers = static_cast<int>(f.get_int("model.layers", c.model.layers));
  c.model.channels = static_cast<int>(f.get_int("model.channels", c.model.channels));
  c.model.window = static_cast<int>(f.get_int("model.window", c.model.window));
  c.model.heads = static_cast<int>(f.get_int("model.heads", c.model.heads));
  c.model.mlp_ratio = f.get_double("model.mlp_ratio", c.model.mlp_ratio);
  c.model.modulation_hidden = static_cast<int>(f.get_int("model.modulation_hidden", c.model.modulation_hidden));

  c.encoder.widths = f.get_int_list("encoder.widths", c.encoder.widths);
  c.encoder.strides = f.get_int_list("encoder.strides", c.encoder.strides);
  c.encoder.dim = static_cast<int>(f.get_int("encoder.dim", c.encoder.dim));
  c.model.degradation_dim = c.encoder.dim;

  c.manifest = f.get_string("data.manifest", "");
  c.synthetic_images = static_cast<int>(f.get_int("data.synthetic_images", c.synthetic_images));
  c.synthetic_size = static_cast<int>(f.get_int("data.synthetic_size", c.synthetic_size));
  c.synthetic_seed = static_cast<std::uint64_t>(f.get_int("data.synthetic_seed", static_cast<std::int64_t>(c.synthetic_seed)));
  const auto kind = f.get_string("data.synthetic_kind", "scene");
  if (kind == "scene") c.synthetic_kind = SyntheticKind::scene;
  else if (kind == "texture") c.synthetic_kind = SyntheticKind::texture;
  else throw ConfigError("data.synthetic_kind must be scene or texture, got '" + kind + "'");
  c.images_per_batch = static_cast<int>(f.get_int("data.images_per_batch", c.images_per_batch));
  c.lr_patch = static_cast<int>(f.get_int("data.lr_patch", c.lr_patch));
  c.encoder.patch = c.lr_patch;
  c.augment = f.get_bool("data.augment", c.augment);
  const auto deg = f.get_string("data.degradation", source_name(c.degradation));
  if (deg == "isotropic") c.degradation = DegradationSource::isotropic;
  else if (deg == "general") c.degradation = DegradationSource::general;
  else if (deg == "two_spec") c.degradation = DegradationSource::two_spec;
  else throw ConfigError("data.degradation must be isotropic, general or two_spec, got '" + deg + "'");
  c.sigma_a = f.get_double("data.sigma_a", c.sigma_a);
  c.sigma_b = f.get_double("data.sigma_b", c.sigma_b);
  c.steps_per_epoch = f.get_int("data.steps_per_epoch", c.steps_per_epoch);

  c.lr0 = f.get_double("optim.lr0", c.lr0);
  c.beta1 = f.get_double("optim.beta1", c.beta1);
  c.beta2 = f.get_double("optim.beta2", c.beta2);
  c.halving_period_epochs = f.get_int("optim.halving_period_epochs", c.halving_period_epochs);

  c.steps = f.get_int("train.steps", c.steps);
  c.encoder_pretrain_steps = f.get_int("train.encoder_pretrain_steps", c.encoder_pretrain_steps);
  c.checkpoint_every = f.get_int("train.checkpoint_every", c.checkpoint_every);
  c.freeze_encoder = f.get_bool("train.freeze_encoder", c.freeze_encoder);

  c.queue_size = static_cast<int>(f.get_int("contrast.queue_size", c.queue_size));
  c.momentum = f.get_double("contrast.momentum", c.momentum);
  c.temperature = f.get_double("contrast.temperature", c.temperature);
  c.include_positive = f.get_bool("contrast.include_positive", c.include_positive);

  if (f.has("ablation.model")) c.ablation = ablation_preset(static_cast<int>(f.get_int("ablation.model", 5)));
  c.ablation.degradation_learning = f.get_bool("ablation.degradation_learning", c.ablation.degradation_learning);
  c.ablation.dcl = f.get_bool("ablation.dcl", c.ablation.dcl);
  c.ablation.attention_weights = f.get_bool("ablation.attention_weights", c.ablation.attention_weights);
  c.model.dcl = c.ablation.dcl;
  c.model.attention_weights = c.ablation.attention_weights;
  c.model.seed = c.seed;
  c.encoder.seed = c.seed + 1;
  c.validate();
  return c;
}

inline std::string join_ints(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

/// Every resolved field as a config that resolves back to the same values.
inline ConfigFile describe(const TrainConfig& c) {
  ConfigFile f;
  const auto b = [](bool v) { return std::string(v ? "true" : "false"); };
  f.set("seed", std::to_string(c.seed));
  f.set("model.blocks", std::to_string(c.model.blocks));
  f.set("model.layers", std::to_string(c.model.layers));
  f.set("model.channels", std::to_string(c.model.channels));
  f.set("model.window", std::to_string(c.model.window));
  f.set("model.heads", std::to_string(c.model.heads));
  f.set("model.scale", std::to_string(c.model.scale));
  f.set("model.mlp_ratio", format_number(c.model.mlp_ratio));
  f.set("model.modulation_hidden", std::to_string(c.model.modulation_hidden));
  f.set("encoder.widths", join_ints(c.encoder.widths));
  f.set("encoder.strides", join_ints(c.encoder.strides));
  f.set("encoder.dim", std::to_string(c.encoder.dim));
  if (!c.manifest.empty()) f.set("data.manifest", c.manifest);
  f.set("data.synthetic_images", std::to_string(c.synthetic_images));
  f.set("data.synthetic_size", std::to_string(c.synthetic_size));
  f.set("data.synthetic_seed", std::to_string(c.synthetic_seed));
  f.set("data.synthetic_kind", c.synthetic_kind == SyntheticKind::texture ? "texture" : "scene");
  f.set("data.images_per_batch", std::to_string(c.images_per_batch));
  f.set("data.lr_patch", std::to_string(c.lr_patch));
  f.set("data.augment", b(c.augment));
  f.set("data.degradation", source_name(c.degradation));
  f.set("data.sigma_a", format_number(c.sigma_a));
  f.set("data.sigma_b", format_number(c.sigma_b));
  f.set("data.steps_per_epoch", std::to_string(c.steps_per_epoch));
  f.set("optim.lr0", format_number(c.lr0));
  f.set("optim.beta1", format_number(c.beta1));
  f.set("optim.beta2", format_number(c.beta2));
  f.set("optim.halving_period_epochs", std::to_string(c.halving_period_epochs));
  f.set("train.steps", std::to_string(c.steps));
  f.set("train.encoder_pretrain_steps", std::to_string(c.encoder_pretrain_steps));
  f.set("train.checkpoint_every", std::to_string(c.checkpoint_every));
  f.set("train.freeze_encoder", b(c.freeze_encoder));
  f.set("contrast.queue_size", std::to_string(c.queue_size));
  f.set("contrast.momentum", format_number(c.momentum));
  f.set("contrast.temperature", format_number(c.temperature));
  f.set("contrast.include_positive", b(c.include_positive));
  f.set("ablation.degradation_learning", b(c.ablation.degradation_learning));
  f.set("ablation.dcl", b(c.ablation.dcl));
  f.set("ablation.attention_weights", b(c.ablation.attention_weights));
  return f;
}

/// Independent generator per (seed, stream, index): a step's randomness does
/// not depend on what ran before it, which makes resume exact.
inline std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(index),
                    static_cast<std::uint32_t>(index >> 32)};
  return std::mt19937_64(seq);
}

enum Stream : std::uint64_t { kQueueInit = 1, kPretrainBatch = 2, kJointBatch = 3, kEvalDegrade = 4 };

inline std::vector<ImageBuffer> load_pool(const TrainConfig& c) {
  if (!c.manifest.empty()) return load_manifest(c.manifest);
  return synthetic_pool(c.synthetic_images, c.synthetic_size, c.synthetic_seed, c.synthetic_kind);
}

inline std::int64_t steps_per_epoch(const TrainConfig& c, std::size_t pool_size) {
  if (c.steps_per_epoch > 0) return c.steps_per_epoch;
  const auto B = static_cast<std::size_t>(c.images_per_batch);
  return static_cast<std::int64_t>(std::max<std::size_t>(1, (pool_size + B - 1) / B));
}

/// Everything that evolves during training.
struct TrainState {
  TrainConfig cfg;
  DsatNet<float> net;
  DegradationEncoder<float> query, key;
  MomentumQueue queue;
  Adam<float> opt, encoder_opt;
  std::vector<std::string> opt_names, encoder_opt_names;
  std::int64_t step = 0, encoder_step = 0;

  explicit TrainState(const TrainConfig& c)
      : cfg(c), net(c.model), query(c.encoder), key(c.encoder),
        queue(static_cast<std::size_t>(c.queue_size), static_cast<std::size_t>(c.encoder.dim)),
        opt(AdamOptions{c.beta1, c.beta2}), encoder_opt(AdamOptions{c.beta1, c.beta2}) {
    key.copy_from(query);
    auto rng = stream_rng(c.seed, kQueueInit, 0);
    queue.fill_random(rng);
    std::vector<Tensor<float>> joint, enc;
    for (const auto& p : net.params().items()) {
      joint.push_back(p.tensor);
      opt_names.push_back("net." + p.name);
    }
    if (encoder_trained_jointly()) {
      for (const auto& p : query.params().items()) {
        joint.push_back(p.tensor);
        opt_names.push_back("query." + p.name);
      }
    }
    for (const auto& p : query.params().items()) {
      enc.push_back(p.tensor);
      encoder_opt_names.push_back("query." + p.name);
    }
    opt.attach(joint);
    encoder_opt.attach(enc);
  }

  bool encoder_trained_jointly() const { return cfg.ablation.degradation_learning && !cfg.freeze_encoder; }
};

struct StepLosses {
  double sr = 0.0, degrad = 0.0;
  double total() const { return sr + degrad; }
};

inline Tensor<float> sr_loss(const Tensor<float>& sr, const Tensor<float>& hq) { return ops::l1_loss(sr, hq); }

namespace detail {

struct ContrastPass {
  std::vector<Tensor<float>> representations;  // per image
  Tensor<float> loss;                           // undefined without degradation learning
  std::vector<Tensor<float>> keys;              // per image, detached
};

// Query embeddings from the first patch of each image, keys from the second.
inline ContrastPass contrast_pass(TrainState& s, const TrainBatch& batch, bool with_grad) {
  ContrastPass out;
  std::vector<Tensor<float>> q;
  for (int i = 0; i < batch.images(); ++i) {
    const auto lr1 = to_tensor<float>(batch.lr[2 * i]);
    EncoderOutput<float> e;
    if (with_grad) {
      e = s.query.encode(lr1);
    } else {
      NoGradGuard ng;
      e = s.query.encode(lr1);
    }
    out.representations.push_back(e.representation);
    q.push_back(e.embedding);
    NoGradGuard ng;
    out.keys.push_back(s.key.encode(to_tensor<float>(batch.lr[2 * i + 1])).embedding.detach());
  }
  out.loss = degradation_loss(stack_rows(q), stack_rows(out.keys), s.queue.matrix<float>(),
                              static_cast<float>(s.cfg.temperature), s.cfg.include_positive);
  return out;
}

inline void finish_contrast(TrainState& s, const ContrastPass& pass) {
  momentum_update(s.query.params(), s.key.params(), s.cfg.momentum);
  for (const auto& k : pass.keys) s.queue.enqueue(k);
}

inline void require_finite(double v, const std::string& what, std::int64_t step) {
  if (!std::isfinite(v))
    throw NumericError(what + " is non-finite (" + std::to_string(v) + ") at step " + std::to_string(step));
}

}  // namespace detail

/// L_SR (mean over the 2B patches) and, with degradation learning, L_degrad.
/// Builds the graph for both; the caller decides what to backpropagate.
struct LossGraph {
  Tensor<float> sr, degrad;
  detail::ContrastPass pass;
};

inline LossGraph total_loss(TrainState& s, const TrainBatch& batch) {
  LossGraph g;
  const bool learn = s.cfg.ablation.degradation_learning;
  if (learn) g.pass = detail::contrast_pass(s, batch, !s.cfg.freeze_encoder);
  if (learn && !s.cfg.freeze_encoder) g.degrad = g.pass.loss;
  const auto zero_d = Tensor<float>::zeros({s.cfg.model.degradation_dim});
  std::vector<Tensor<float>> losses;
  for (std::size_t p = 0; p < batch.lr.size(); ++p) {
    const int img = batch.image_of_patch[p];
    const auto& D = learn ? g.pass.representations[static_cast<std::size_t>(img)] : zero_d;
    const auto out = s.net.forward(to_tensor<float>(batch.lr[p]), D);
    losses.push_back(sr_loss(out, to_tensor<float>(batch.hr[p])));
  }
  auto sum = losses.front();
  for (std::size_t i = 1; i < losses.size(); ++i) sum = ops::add(sum, losses[i]);
  g.sr = ops::scale(sum, 1.0f / static_cast<float>(losses.size()));
  return g;
}

/// One joint update at state.step with learning rate `lr`.
inline StepLosses train_step(TrainState& s, const TrainBatch& batch, double lr) {
  s.opt.zero_grad();
  s.query.params().zero_grad();
  auto g = total_loss(s, batch);
  StepLosses out;
  out.sr = g.sr.item();
  if (s.cfg.ablation.degradation_learning) out.degrad = g.pass.loss.item();
  detail::require_finite(out.sr, "L_SR", s.step);
  detail::require_finite(out.degrad, "L_degrad", s.step);
  auto total = g.degrad.defined() ? ops::add(g.sr, g.degrad) : g.sr;
  total.backward();
  s.opt.step(lr);
  if (s.cfg.ablation.degradation_learning) detail::finish_contrast(s, g.pass);
  ++s.step;
  return out;
}

/// One encoder-only update (L_degrad).
inline double encoder_step(TrainState& s, const TrainBatch& batch, double lr) {
  s.encoder_opt.zero_grad();
  auto pass = detail::contrast_pass(s, batch, true);
  const double l = pass.loss.item();
  detail::require_finite(l, "L_degrad", s.encoder_step);
  pass.loss.backward();
  s.encoder_opt.step(lr);
  detail::finish_contrast(s, pass);
  ++s.encoder_step;
  return l;
}

// ---- checkpoints -----------------------------------------------------------

namespace detail {

inline void append_moments(std::vector<Record>& out, const std::string& tag, Adam<float>& opt,
                           const std::vector<std::string>& names) {
  const auto& params = opt.parameters();
  for (std::size_t i = 0; i < names.size(); ++i) {
    out.push_back({tag + ".m." + names[i], params[i].shape(), opt.first_moments()[i]});
    out.push_back({tag + ".v." + names[i], params[i].shape(), opt.second_moments()[i]});
  }
  out.push_back(scalar_record(tag + ".steps", static_cast<double>(opt.steps())));
}

inline void load_moments(const RecordIndex& idx, const std::string& tag, Adam<float>& opt,
                         const std::vector<std::string>& names) {
  for (std::size_t i = 0; i < names.size(); ++i)
    for (const char* which : {".m.", ".v."}) {
      const auto name = tag + which + names[i];
      auto it = idx.find(name);
      if (it == idx.end()) throw DataError("checkpoint is missing optimizer state " + name);
      auto& dst = which[1] == 'm' ? opt.first_moments()[i] : opt.second_moments()[i];
      if (it->second->values.size() != dst.size()) throw DataError("optimizer state " + name + " has the wrong size");
      dst = it->second->values;
    }
  opt.set_steps(static_cast<std::int64_t>(record_scalar(idx, tag + ".steps")));
}

// The seed as four exact 16-bit pieces (records hold f32).
inline Record seed_record(std::uint64_t seed) {
  std::vector<float> v(4);
  for (int i = 0; i < 4; ++i) v[i] = static_cast<float>((seed >> (16 * i)) & 0xffff);
  return {"meta.seed", {4}, v};
}

inline std::uint64_t read_seed(const RecordIndex& idx) {
  auto it = idx.find("meta.seed");
  if (it == idx.end() || it->second->values.size() != 4) throw DataError("checkpoint is missing meta.seed");
  std::uint64_t s = 0;
  for (int i = 0; i < 4; ++i) s |= static_cast<std::uint64_t>(it->second->values[i]) << (16 * i);
  return s;
}

inline Record int_list_record(const std::string& name, const std::vector<int>& v) {
  return {name, {static_cast<std::int64_t>(v.size())}, std::vector<float>(v.begin(), v.end())};
}

inline std::vector<int> read_int_list(const RecordIndex& idx, const std::string& name) {
  auto it = idx.find(name);
  if (it == idx.end()) throw DataError("checkpoint is missing " + name);
  return std::vector<int>(it->second->values.begin(), it->second->values.end());
}

}  // namespace detail

/// Architecture records: enough to rebuild the network and encoder.
inline void append_architecture(std::vector<Record>& out, const DsatConfig& m, const EncoderConfig& e,
                                bool degradation_learning) {
  out.push_back(scalar_record("meta.model.blocks", m.blocks));
  out.push_back(scalar_record("meta.model.layers", m.layers));
  out.push_back(scalar_record("meta.model.channels", m.channels));
  out.push_back(scalar_record("meta.model.window", m.window));
  out.push_back(scalar_record("meta.model.heads", m.heads));
  out.push_back(scalar_record("meta.model.scale", m.scale));
  out.push_back(scalar_record("meta.model.mlp_ratio", m.mlp_ratio));
  out.push_back(scalar_record("meta.model.in_channels", m.in_channels));
  out.push_back(scalar_record("meta.model.degradation_dim", m.degradation_dim));
  out.push_back(scalar_record("meta.model.modulation_hidden", m.modulation_hidden));
  out.push_back(scalar_record("meta.model.dcl", m.dcl));
  out.push_back(scalar_record("meta.model.attention_weights", m.attention_weights));
  out.push_back(detail::int_list_record("meta.encoder.widths", e.widths));
  out.push_back(detail::int_list_record("meta.encoder.strides", e.strides));
  out.push_back(scalar_record("meta.encoder.patch", e.patch));
  out.push_back(scalar_record("meta.encoder.dim", e.dim));
  out.push_back(scalar_record("meta.degradation_learning", degradation_learning));
}

inline std::vector<Record> state_records(TrainState& s) {
  std::vector<Record> out;
  append_architecture(out, s.cfg.model, s.cfg.encoder, s.cfg.ablation.degradation_learning);
  out.push_back(detail::seed_record(s.cfg.seed));
  out.push_back(scalar_record("state.step", static_cast<double>(s.step)));
  out.push_back(scalar_record("state.encoder_step", static_cast<double>(s.encoder_step)));
  append_records(out, s.net.params(), "net.");
  append_records(out, s.query.params(), "query.");
  append_records(out, s.key.params(), "key.");
  detail::append_moments(out, "opt", s.opt, s.opt_names);
  detail::append_moments(out, "encoder_opt", s.encoder_opt, s.encoder_opt_names);
  out.push_back({"queue.entries", {static_cast<std::int64_t>(s.queue.size()), static_cast<std::int64_t>(s.queue.dim())},
                 s.queue.matrix<float>()});
  return out;
}

inline void save_state(TrainState& s, const std::string& path) { write_checkpoint(path, state_records(s)); }

/// Restores a state saved with the same configuration.
inline void load_state(TrainState& s, const std::string& path) {
  const auto records = read_checkpoint(path);
  const auto idx = index_records(records);
  if (detail::read_seed(idx) != s.cfg.seed)
    throw ConfigError(path + ": checkpoint was written with a different seed");
  if (record_scalar(idx, "meta.degradation_learning") != double(s.cfg.ablation.degradation_learning))
    throw ConfigError(path + ": checkpoint ablation flags differ from the config");
  load_records(s.net.params(), idx, "net.");
  load_records(s.query.params(), idx, "query.");
  load_records(s.key.params(), idx, "key.");
  detail::load_moments(idx, "opt", s.opt, s.opt_names);
  detail::load_moments(idx, "encoder_opt", s.encoder_opt, s.encoder_opt_names);
  auto it = idx.find("queue.entries");
  if (it == idx.end() || it->second->shape.size() != 2) throw DataError(path + ": checkpoint is missing queue.entries");
  s.queue.assign(it->second->values, static_cast<std::size_t>(it->second->shape[0]));
  s.step = static_cast<std::int64_t>(record_scalar(idx, "state.step"));
  s.encoder_step = static_cast<std::int64_t>(record_scalar(idx, "state.encoder_step"));
}

/// Copies only the encoder weights (query, key) and queue from a checkpoint:
/// how joint training picks up a separately pretrained encoder.
inline void load_encoder_from(TrainState& s, const std::string& path) {
  const auto records = read_checkpoint(path);
  const auto idx = index_records(records);
  load_records(s.query.params(), idx, "query.");
  load_records(s.key.params(), idx, "key.");
  auto it = idx.find("queue.entries");
  if (it != idx.end() && it->second->shape.size() == 2 &&
      static_cast<std::size_t>(it->second->shape[1]) == s.queue.dim())
    s.queue.assign(it->second->values, std::min<std::size_t>(static_cast<std::size_t>(it->second->shape[0]),
                                                             s.queue.capacity()));
  s.encoder_step = static_cast<std::int64_t>(record_scalar(idx, "state.encoder_step"));
}

/// A trained network plus the encoder that feeds it.
struct Model {
  DsatNet<float> net;
  DegradationEncoder<float> encoder;
  bool degradation_learning = true;

  Tensor<float> representation(const ImageBuffer& lr) const {
    NoGradGuard ng;
    if (!degradation_learning) return Tensor<float>::zeros({net.config().degradation_dim});
    return encoder.encode(to_tensor<float>(lr)).representation;
  }

  Tensor<float> embedding(const ImageBuffer& lr) const {
    NoGradGuard ng;
    return encoder.encode(to_tensor<float>(lr)).embedding;
  }

  ImageBuffer super_resolve(const ImageBuffer& lr) const {
    NoGradGuard ng;
    return to_image(net.forward(to_tensor<float>(lr), representation(lr)));
  }
};

inline Model model_from(const TrainState& s) {
  return {s.net, s.query, s.cfg.ablation.degradation_learning};
}

inline Model load_model(const std::string& path) {
  const auto records = read_checkpoint(path);
  const auto idx = index_records(records);
  const auto geti = [&](const char* n) { return static_cast<int>(record_scalar(idx, n)); };
  DsatConfig m;
  m.blocks = geti("meta.model.blocks");
  m.layers = geti("meta.model.layers");
  m.channels = geti("meta.model.channels");
  m.window = geti("meta.model.window");
  m.heads = geti("meta.model.heads");
  m.scale = geti("meta.model.scale");
  m.mlp_ratio = record_scalar(idx, "meta.model.mlp_ratio");
  m.in_channels = geti("meta.model.in_channels");
  m.degradation_dim = geti("meta.model.degradation_dim");
  m.modulation_hidden = geti("meta.model.modulation_hidden");
  m.dcl = geti("meta.model.dcl") != 0;
  m.attention_weights = geti("meta.model.attention_weights") != 0;
  EncoderConfig e;
  e.widths = detail::read_int_list(idx, "meta.encoder.widths");
  e.strides = detail::read_int_list(idx, "meta.encoder.strides");
  e.patch = geti("meta.encoder.patch");
  e.dim = geti("meta.encoder.dim");
  e.in_channels = m.in_channels;
  try {
    m.validate();
    e.validate();
  } catch (const ConfigError& err) {
    throw DataError(path + ": inconsistent architecture records: " + err.what());
  }
  Model model{DsatNet<float>(m), DegradationEncoder<float>(e), geti("meta.degradation_learning") != 0};
  load_records(model.net.params(), idx, "net.");
  load_records(model.encoder.params(), idx, "query.");
  return model;
}

/// Model-only checkpoint (network, encoder, architecture).
inline void save_model(const Model& m, const std::string& path) {
  std::vector<Record> out;
  append_architecture(out, m.net.config(), m.encoder.config(), m.degradation_learning);
  append_records(out, m.net.params(), "net.");
  append_records(out, m.encoder.params(), "query.");
  write_checkpoint(path, out);
}

// ---- training loops --------------------------------------------------------

struct LogRow {
  std::int64_t step, epoch;
  double l_sr, l_degrad, lr;
};

/// CSV metrics: step,epoch,l_sr,l_degrad,lr. l_sr is empty for encoder-only rows.
class MetricsLog {
 public:
  MetricsLog() = default;
  MetricsLog(const std::string& path, bool append) : path_(path) {
    const bool fresh = !append || !std::filesystem::exists(path);
    out_.open(path, fresh ? std::ios::trunc : std::ios::app);
    if (!out_) throw DataError(path + ": cannot open metrics log");
    if (fresh) out_ << "step,epoch,l_sr,l_degrad,lr\n";
  }

  void write(const LogRow& r, bool has_sr) {
    if (!out_.is_open()) return;
    out_ << r.step << ',' << r.epoch << ',';
    if (has_sr) out_ << format_number(r.l_sr);
    out_ << ',' << format_number(r.l_degrad) << ',' << format_number(r.lr) << '\n';
    if (!out_) throw DataError(path_ + ": write failed");
  }

  void flush() {
    if (out_.is_open()) out_.flush();
  }

 private:
  std::string path_;
  std::ofstream out_;
};

struct RunOptions {
  std::string out_dir;       // empty: no files written
  std::string resume;        // full training-state checkpoint
  std::string init_encoder;  // checkpoint from encoder pretraining
  std::function<void(const LogRow&)> on_step;
  WarningSink warn = warn_stderr;
};

namespace detail {

inline std::string join_path(const std::string& dir, const std::string& name) {
  return (std::filesystem::path(dir) / name).string();
}

inline void ensure_dir(const std::string& dir) {
  if (dir.empty()) return;
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw DataError(dir + ": cannot create directory: " + ec.message());
}

}  // namespace detail

/// Contrastive pretraining of the query encoder for cfg.encoder_pretrain_steps.
inline void run_encoder_pretraining(TrainState& s, const std::vector<ImageBuffer>& pool, const RunOptions& o = {}) {
  detail::ensure_dir(o.out_dir);
  MetricsLog log;
  if (!o.out_dir.empty()) log = MetricsLog(detail::join_path(o.out_dir, "encoder_metrics.csv"), !o.resume.empty());
  const auto spe = steps_per_epoch(s.cfg, pool.size());
  const auto bc = s.cfg.batch_config();
  bool warned = false;
  while (s.encoder_step < s.cfg.encoder_pretrain_steps) {
    const auto epoch = s.encoder_step / spe;
    const double lr = step_decay_lr(s.cfg.lr0, epoch, s.cfg.halving_period_epochs);
    auto rng = stream_rng(s.cfg.seed, kPretrainBatch, static_cast<std::uint64_t>(s.encoder_step));
    const auto batch = make_batch(pool, rng, bc, warned ? WarningSink{} : o.warn);
    warned = true;
    const LogRow row{s.encoder_step, epoch, 0.0, encoder_step(s, batch, lr), lr};
    log.write(row, false);
    if (o.on_step) o.on_step(row);
    if (!o.out_dir.empty() && s.cfg.checkpoint_every > 0 && s.encoder_step % s.cfg.checkpoint_every == 0)
      save_state(s, detail::join_path(o.out_dir, "encoder_step" + std::to_string(s.encoder_step) + ".ckpt"));
  }
  log.flush();
  if (!o.out_dir.empty()) save_state(s, detail::join_path(o.out_dir, "encoder.ckpt"));
}

/// Joint training until cfg.steps. Writes metrics.csv, periodic
/// step<N>.ckpt files and final.ckpt into out_dir.
inline void run_training(TrainState& s, const std::vector<ImageBuffer>& pool, const RunOptions& o = {}) {
  detail::ensure_dir(o.out_dir);
  if (!o.resume.empty()) load_state(s, o.resume);
  else if (!o.init_encoder.empty()) load_encoder_from(s, o.init_encoder);
  MetricsLog log;
  if (!o.out_dir.empty()) log = MetricsLog(detail::join_path(o.out_dir, "metrics.csv"), !o.resume.empty());
  const auto spe = steps_per_epoch(s.cfg, pool.size());
  const auto bc = s.cfg.batch_config();
  bool warned = false;
  while (s.step < s.cfg.steps) {
    const auto epoch = s.step / spe;
    const double lr = step_decay_lr(s.cfg.lr0, epoch, s.cfg.halving_period_epochs);
    auto rng = stream_rng(s.cfg.seed, kJointBatch, static_cast<std::uint64_t>(s.step));
    const auto batch = make_batch(pool, rng, bc, warned ? WarningSink{} : o.warn);
    warned = true;
    const auto at = s.step;
    const auto l = train_step(s, batch, lr);
    const LogRow row{at, epoch, l.sr, l.degrad, lr};
    log.write(row, true);
    if (o.on_step) o.on_step(row);
    if (!o.out_dir.empty() && s.cfg.checkpoint_every > 0 && s.step % s.cfg.checkpoint_every == 0)
      save_state(s, detail::join_path(o.out_dir, "step" + std::to_string(s.step) + ".ckpt"));
  }
  log.flush();
  if (!o.out_dir.empty()) save_state(s, detail::join_path(o.out_dir, "final.ckpt"));
}

// ---- evaluation ------------------------------------------------------------

struct ImageScore {
  std::string name;
  std::string spec;
  double psnr = 0, ssim = 0, bicubic_psnr = 0, bicubic_ssim = 0;
};

struct EvalReport {
  std::vector<ImageScore> images;
  double mean_psnr = 0, mean_ssim = 0, mean_bicubic_psnr = 0, mean_bicubic_ssim = 0;
  double separability = std::numeric_limits<double>::quiet_NaN();

  void write_csv(std::ostream& out) const {
    out << "image,spec,psnr_y,ssim_y,bicubic_psnr_y,bicubic_ssim_y\n";
    out << std::setprecision(17);
    for (const auto& r : images)
      out << r.name << ',' << r.spec << ',' << r.psnr << ',' << r.ssim << ',' << r.bicubic_psnr << ','
          << r.bicubic_ssim << '\n';
    out << "mean,";
    if (std::isfinite(separability)) out << "separability=" << separability;
    out << ',' << mean_psnr << ',' << mean_ssim << ',' << mean_bicubic_psnr << ',' << mean_bicubic_ssim << '\n';
  }
};

inline std::string describe_spec(const DegradationSpec& s) {
  std::ostringstream o;
  o << std::setprecision(6);
  if (s.isotropic()) {
    o << "iso(sigma=" << std::get<Isotropic>(s.kind).sigma << ")";
  } else {
    const auto& a = std::get<Anisotropic>(s.kind);
    o << "aniso(l1=" << a.lambda1 << " l2=" << a.lambda2 << " theta=" << a.theta << ")";
  }
  o << " x" << s.scale << " noise=" << s.noise_sigma;
  return o.str();
}

/// HR images, the spec applied to each, and its cluster label.
struct EvalItem {
  std::string name;
  ImageBuffer hr;
  DegradationSpec spec;
  int label = 0;
};

inline ImageBuffer crop_to_multiple(const ImageBuffer& img, int s) {
  const int h = img.height / s * s, w = img.width / s * s;
  if (h == 0 || w == 0) throw DataError("image smaller than the scale factor");
  return crop(img, 0, 0, h, w);
}

/// Degrades each HR image with its spec (seeded per item), super-resolves it
/// and scores it against the bicubic baseline with a `scale`-pixel border crop.
/// With >= 2 labels of >= 2 items each, also reports embedding separability.
inline EvalReport evaluate(const Model& model, const std::vector<EvalItem>& items, std::uint64_t seed) {
  EvalReport rep;
  const int s = model.net.config().scale;
  std::vector<double> emb;
  std::vector<int> labels;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto hr = crop_to_multiple(items[i].hr, s);
    auto rng = stream_rng(seed, kEvalDegrade, i);
    const auto lr = degrade(hr, items[i].spec, rng());
    const auto sr = model.super_resolve(lr);
    const auto bic = bicubic_baseline(lr, s);
    ImageScore r{items[i].name, describe_spec(items[i].spec), psnr(sr, hr, s), ssim(sr, hr, s), psnr(bic, hr, s),
                 ssim(bic, hr, s)};
    rep.images.push_back(r);
    const auto e = model.embedding(lr);
    emb.insert(emb.end(), e.data().begin(), e.data().end());
    labels.push_back(items[i].label);
  }
  const double n = static_cast<double>(rep.images.size());
  for (const auto& r : rep.images) {
    rep.mean_psnr += r.psnr / n;
    rep.mean_ssim += r.ssim / n;
    rep.mean_bicubic_psnr += r.bicubic_psnr / n;
    rep.mean_bicubic_ssim += r.bicubic_ssim / n;
  }
  std::map<int, int> counts;
  for (int l : labels) ++counts[l];
  bool ok = counts.size() >= 2;
  for (const auto& [l, c] : counts) ok = ok && c >= 2;
  if (ok) {
    try {
      rep.separability = separability(emb, static_cast<std::size_t>(model.encoder.config().dim), labels);
    } catch (const ParameterError&) {
    }
  }
  return rep;
}

}  // namespace dsat
