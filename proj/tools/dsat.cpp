// dsat: degrade, train-encoder, train, eval, embed.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "dsat/image_io.hpp"
#include "dsat/train.hpp"

namespace fs = std::filesystem;
using namespace dsat;

namespace {

enum ExitCode { kOk = 0, kInternal = 1, kConfig = 2, kData = 3, kNumeric = 4 };

int fail(ExitCode code, const char* kind, const std::string& message) {
  nlohmann::json j{{"error", kind}, {"code", static_cast<int>(code)}, {"message", message}};
  std::cerr << j.dump() << '\n';
  return code;
}

void log_options(const std::string& cmd, const std::vector<std::pair<std::string, std::string>>& kv) {
  std::cerr << "# " << cmd << " resolved options\n";
  for (const auto& [k, v] : kv) std::cerr << k << " = " << v << '\n';
}

struct CommonOpts {
  std::string config;
  std::vector<std::string> set;
  std::optional<std::int64_t> seed;
  std::optional<int> ablation;
};

void add_common(CLI::App* cmd, CommonOpts& o) {
  cmd->add_option("--config", o.config, "Config file (key = value, [section] headers)")->check(CLI::ExistingFile);
  cmd->add_option("--set", o.set, "Override a config key, e.g. --set optim.lr0=1e-4 (repeatable)");
  cmd->add_option("--seed", o.seed, "Seed (overrides the config)");
  cmd->add_option("--ablation", o.ablation, "Ablation preset 1..5 (model5 is the full network)");
}

TrainConfig resolve(const CommonOpts& o) {
  auto f = o.config.empty() ? ConfigFile{} : ConfigFile::load(o.config);
  for (const auto& a : o.set) f.set_assignment(a);
  if (o.seed) f.set("seed", std::to_string(*o.seed));
  if (o.ablation) f.set("ablation.model", std::to_string(*o.ablation));
  return resolve_train_config(f);
}

void log_config(const TrainConfig& c, const std::string& out_dir) {
  const auto text = describe(c).dump();
  std::cerr << "# resolved config\n" << text;
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    std::ofstream(fs::path(out_dir) / "config.txt") << text;
  }
}

struct SpecOpts {
  int scale = 4;
  std::optional<double> sigma;
  std::vector<double> aniso;
  double noise = 0.0;
};

DegradationSpec build_spec(const SpecOpts& o) {
  DegradationSpec s;
  s.scale = o.scale;
  s.noise_sigma = o.noise;
  if (!o.aniso.empty()) {
    if (o.aniso.size() != 3) throw ConfigError("--aniso expects lambda1,lambda2,theta");
    s.kind = Anisotropic{o.aniso[0], o.aniso[1], o.aniso[2]};
  } else {
    s.kind = Isotropic{o.sigma.value_or(1.0)};
  }
  try {
    validate(s);
  } catch (const ParameterError& e) {
    throw ConfigError(std::string("degradation spec: ") + e.what());
  }
  return s;
}

// iso:SIGMA[/NOISE] or aniso:L1,L2,THETA[/NOISE]
DegradationSpec parse_spec(const std::string& text, int scale) {
  const auto colon = text.find(':');
  if (colon == std::string::npos) throw ConfigError("--spec '" + text + "': expected iso:SIGMA or aniso:L1,L2,THETA");
  const auto kind = text.substr(0, colon);
  auto rest = text.substr(colon + 1);
  SpecOpts o;
  o.scale = scale;
  const auto slash = rest.find('/');
  try {
    if (slash != std::string::npos) {
      o.noise = std::stod(rest.substr(slash + 1));
      rest.erase(slash);
    }
    std::vector<double> nums;
    std::stringstream ss(rest);
    std::string item;
    while (std::getline(ss, item, ',')) nums.push_back(std::stod(item));
    if (kind == "iso" && nums.size() == 1) o.sigma = nums[0];
    else if (kind == "aniso" && nums.size() == 3) o.aniso = nums;
    else throw ConfigError("");
  } catch (const std::exception&) {
    throw ConfigError("--spec '" + text + "': expected iso:SIGMA or aniso:L1,L2,THETA, optionally /NOISE");
  }
  return build_spec(o);
}

std::string stem(const std::string& path) { return fs::path(path).stem().string(); }

std::vector<std::string> input_paths(const std::vector<std::string>& inputs, const std::string& manifest) {
  auto paths = inputs;
  if (!manifest.empty()) {
    const auto listed = read_manifest(manifest);
    paths.insert(paths.end(), listed.begin(), listed.end());
  }
  if (paths.empty()) throw ConfigError("no input images: pass --input or --manifest");
  return paths;
}

void progress(const LogRow& r, std::int64_t total, bool encoder) {
  const auto every = std::max<std::int64_t>(1, total / 20);
  if ((r.step + 1) % every != 0 && r.step + 1 != total) return;
  std::cerr << (encoder ? "encoder " : "train ") << "step " << r.step + 1 << "/" << total << " epoch " << r.epoch;
  if (!encoder) std::cerr << " l_sr " << r.l_sr;
  std::cerr << " l_degrad " << r.l_degrad << " lr " << r.lr << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Degradation-aware Swin transformer for blind super-resolution"};
  app.name("dsat");
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Print help for every subcommand and exit");

  // degrade
  std::string dg_in, dg_out;
  SpecOpts dg_spec;
  std::uint64_t dg_seed = 0;
  auto* degrade_cmd = app.add_subcommand("degrade", "Synthesise an LR image from an HR PNG");
  degrade_cmd->add_option("--input", dg_in, "HR PNG")->required();
  degrade_cmd->add_option("--out", dg_out, "LR PNG to write")->required();
  degrade_cmd->add_option("--scale", dg_spec.scale, "Downsampling factor (2, 3 or 4)")->capture_default_str();
  auto* sigma_opt = degrade_cmd->add_option("--sigma", dg_spec.sigma, "Isotropic kernel width (default 1.0)");
  degrade_cmd->add_option("--aniso", dg_spec.aniso, "Anisotropic kernel lambda1,lambda2,theta")
      ->delimiter(',')
      ->expected(3)
      ->excludes(sigma_opt);
  degrade_cmd->add_option("--noise", dg_spec.noise, "Noise std on the [0,255] scale")->capture_default_str();
  degrade_cmd->add_option("--seed", dg_seed, "Noise seed")->capture_default_str();

  // train-encoder
  CommonOpts te;
  std::string te_out, te_resume;
  auto* train_encoder_cmd = app.add_subcommand("train-encoder", "Contrastive pretraining of the degradation encoder");
  add_common(train_encoder_cmd, te);
  train_encoder_cmd->add_option("--out", te_out, "Output directory")->required();
  train_encoder_cmd->add_option("--resume", te_resume, "Resume from a training-state checkpoint");

  // train
  CommonOpts tr;
  std::string tr_out, tr_resume, tr_init;
  auto* train_cmd = app.add_subcommand("train", "Joint SR and degradation training");
  add_common(train_cmd, tr);
  train_cmd->add_option("--out", tr_out, "Output directory")->required();
  auto* resume_opt =
      train_cmd->add_option("--resume", tr_resume, "Resume from a training-state checkpoint");
  train_cmd->add_option("--init-encoder", tr_init, "Start from a pretrained encoder checkpoint")->excludes(resume_opt);

  // eval
  std::string ev_model, ev_input, ev_out, ev_manifest, ev_report;
  std::vector<std::string> ev_specs;
  std::uint64_t ev_seed = 0;
  auto* eval_cmd = app.add_subcommand("eval", "Super-resolve an LR PNG, or score a model on degraded HR images");
  eval_cmd->add_option("--model", ev_model, "Model or training-state checkpoint")->required();
  auto* ev_in_opt = eval_cmd->add_option("--input", ev_input, "LR PNG to super-resolve");
  eval_cmd->add_option("--out", ev_out, "SR PNG to write (with --input)");
  auto* ev_man_opt =
      eval_cmd->add_option("--manifest", ev_manifest, "HR image list to score")->excludes(ev_in_opt);
  eval_cmd->add_option("--spec", ev_specs, "Degradation per image: iso:SIGMA or aniso:L1,L2,THETA, optional /NOISE (repeatable)");
  eval_cmd->add_option("--report", ev_report, "CSV report to write (with --manifest)");
  eval_cmd->add_option("--seed", ev_seed, "Degradation noise seed")->capture_default_str();
  ev_in_opt->excludes(ev_man_opt);

  // embed
  std::string em_model, em_manifest, em_out;
  std::vector<std::string> em_inputs;
  int em_patch = 0;
  auto* embed_cmd = app.add_subcommand("embed", "Write one degradation embedding per LR patch as CSV");
  embed_cmd->add_option("--model", em_model, "Model, encoder or training-state checkpoint")->required();
  embed_cmd->add_option("--input", em_inputs, "LR PNG (repeatable)");
  embed_cmd->add_option("--manifest", em_manifest, "LR image list");
  embed_cmd->add_option("--out", em_out, "CSV to write")->required();
  embed_cmd->add_option("--patch", em_patch, "Patch side (default: the encoder's training patch)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail(kConfig, "config", e.what());
  }

  try {
    if (*degrade_cmd) {
      const auto spec = build_spec(dg_spec);
      log_options("degrade", {{"input", dg_in}, {"out", dg_out}, {"spec", describe_spec(spec)},
                              {"seed", std::to_string(dg_seed)}});
      write_png(dg_out, degrade(read_png(dg_in), spec, dg_seed));
    } else if (*train_encoder_cmd) {
      const auto cfg = resolve(te);
      if (cfg.encoder_pretrain_steps <= 0)
        throw ConfigError("train.encoder_pretrain_steps must be positive for train-encoder");
      log_config(cfg, te_out);
      TrainState s(cfg);
      if (!te_resume.empty()) load_state(s, te_resume);
      RunOptions o;
      o.out_dir = te_out;
      o.resume = te_resume;
      o.on_step = [&](const LogRow& r) { progress(r, cfg.encoder_pretrain_steps, true); };
      run_encoder_pretraining(s, load_pool(cfg), o);
    } else if (*train_cmd) {
      const auto cfg = resolve(tr);
      log_config(cfg, tr_out);
      TrainState s(cfg);
      const auto pool = load_pool(cfg);
      if (tr_resume.empty() && tr_init.empty() && cfg.encoder_pretrain_steps > 0 &&
          cfg.ablation.degradation_learning) {
        RunOptions pre;
        pre.out_dir = tr_out;
        pre.on_step = [&](const LogRow& r) { progress(r, cfg.encoder_pretrain_steps, true); };
        run_encoder_pretraining(s, pool, pre);
      }
      RunOptions o;
      o.out_dir = tr_out;
      o.resume = tr_resume;
      o.init_encoder = tr_init;
      o.on_step = [&](const LogRow& r) { progress(r, cfg.steps, false); };
      run_training(s, pool, o);
    } else if (*eval_cmd) {
      const auto model = load_model(ev_model);
      const int scale = model.net.config().scale;
      if (!ev_input.empty()) {
        if (ev_out.empty()) throw ConfigError("eval --input needs --out");
        log_options("eval", {{"model", ev_model}, {"input", ev_input}, {"out", ev_out}});
        write_png(ev_out, model.super_resolve(read_png(ev_input)));
      } else if (!ev_manifest.empty()) {
        if (ev_report.empty()) throw ConfigError("eval --manifest needs --report");
        if (ev_specs.empty()) throw ConfigError("eval --manifest needs at least one --spec");
        std::vector<DegradationSpec> specs;
        for (const auto& t : ev_specs) specs.push_back(parse_spec(t, scale));
        std::vector<std::pair<std::string, std::string>> kv{
            {"model", ev_model}, {"manifest", ev_manifest}, {"report", ev_report}, {"seed", std::to_string(ev_seed)}};
        for (const auto& sp : specs) kv.emplace_back("spec", describe_spec(sp));
        log_options("eval", kv);
        std::vector<EvalItem> items;
        for (const auto& path : read_manifest(ev_manifest)) {
          const auto hr = read_png(path);
          for (std::size_t k = 0; k < specs.size(); ++k)
            items.push_back({stem(path), hr, specs[k], static_cast<int>(k)});
        }
        const auto rep = evaluate(model, items, ev_seed);
        std::ofstream out(ev_report);
        if (!out) throw DataError(ev_report + ": cannot open for writing");
        rep.write_csv(out);
        if (!out) throw DataError(ev_report + ": write failed");
        std::cerr << "mean psnr_y " << rep.mean_psnr << " (bicubic " << rep.mean_bicubic_psnr << ")\n";
      } else {
        throw ConfigError("eval needs --input or --manifest");
      }
    } else if (*embed_cmd) {
      const auto model = load_model(em_model);
      const auto paths = input_paths(em_inputs, em_manifest);
      const int patch = em_patch > 0 ? em_patch : model.encoder.config().patch;
      log_options("embed", {{"model", em_model}, {"out", em_out}, {"patch", std::to_string(patch)},
                            {"images", std::to_string(paths.size())}});
      std::ofstream out(em_out);
      if (!out) throw DataError(em_out + ": cannot open for writing");
      out << "image,y,x";
      for (int d = 0; d < model.encoder.config().dim; ++d) out << ",e" << d;
      out << '\n' << std::setprecision(9);
      for (const auto& path : paths) {
        const auto img = read_png(path);
        const int ph = std::min(patch, img.height), pw = std::min(patch, img.width);
        for (int y = 0; y + ph <= img.height; y += ph)
          for (int x = 0; x + pw <= img.width; x += pw) {
            const auto e = model.embedding(crop(img, y, x, ph, pw));
            out << path << ',' << y << ',' << x;
            for (float v : e.data()) out << ',' << v;
            out << '\n';
          }
      }
      if (!out) throw DataError(em_out + ": write failed");
    }
  } catch (const ConfigError& e) {
    return fail(kConfig, "config", e.what());
  } catch (const ParameterError& e) {
    return fail(kConfig, "config", e.what());
  } catch (const DataError& e) {
    return fail(kData, "data", e.what());
  } catch (const DimensionError& e) {
    return fail(kData, "data", e.what());
  } catch (const NumericError& e) {
    return fail(kNumeric, "numeric", e.what());
  } catch (const fs::filesystem_error& e) {
    return fail(kData, "data", e.what());
  } catch (const std::exception& e) {
    return fail(kInternal, "internal", e.what());
  }
  return kOk;
}
