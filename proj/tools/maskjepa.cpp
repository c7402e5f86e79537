// maskjepa: data generation, pretraining, evaluation, gradient checking, export.

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "maskjepa/checkpoint.hpp"
#include "maskjepa/evalkit.hpp"
#include "maskjepa/synthdata.hpp"
#include "maskjepa/trainer.hpp"

namespace fs = std::filesystem;
using namespace mjepa;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::trunc);
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

// Flags that map straight onto config keys; only the ones given on the command
// line override the file.
struct ConfigFlags {
  std::string config_file;
  nlohmann::json given = nlohmann::json::object();
  std::vector<std::function<void()>> collectors;

  template <typename V>
  void add(CLI::App* app, const std::string& flag, const std::string& key, const std::string& help) {
    auto value = std::make_shared<V>();
    CLI::Option* opt = app->add_option(flag, *value, help);
    collectors.push_back([this, opt, value, key] {
      if (opt->count() > 0) given[key] = *value;
    });
  }
  void add_switch(CLI::App* app, const std::string& flag, const std::string& key, nlohmann::json value_when_set,
                  const std::string& help) {
    CLI::Option* opt = app->add_flag(flag, help);
    collectors.push_back([this, opt, key, value_when_set] {
      if (opt->count() > 0) given[key] = value_when_set;
    });
  }

  TrainConfig resolve() {
    for (auto& c : collectors) c();
    TrainConfig config;
    try {
      if (!config_file.empty()) config = apply_config(config, parse_config_text(read_text(config_file)));
      config = apply_config(config, given);
      config.validate();
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
    return config;
  }
};

void add_model_flags(CLI::App* app, ConfigFlags& flags) {
  app->add_option("--config", flags.config_file, "key = value config file (flags override it)");
  flags.add<std::size_t>(app, "--hw", "image_size", "image side in pixels (multiple of 32)");
  flags.add<std::size_t>(app, "--channels", "channels", "pixel-decoder width C");
  flags.add<int>(app, "--s-i1", "s_i1", "stride of the masked feature F_i1 (8, 16 or 32)");
  flags.add<std::size_t>(app, "--blocks-l", "blocks_l", "cross-attention blocks L");
  flags.add<std::size_t>(app, "--blocks-m", "blocks_m", "extra self-attention blocks M");
  flags.add<std::size_t>(app, "--queries", "queries", "number of queries N");
  flags.add<int>(app, "--heads", "heads", "attention heads");
  flags.add<std::uint64_t>(app, "--seed", "seed", "random seed");
}

void add_train_flags(CLI::App* app, ConfigFlags& flags) {
  flags.add<double>(app, "--sigma", "sigma", "noise standard deviation");
  flags.add<double>(app, "--ratio", "ratio", "masking ratio r");
  flags.add<std::size_t>(app, "--patch", "patch", "mask patch side p in F_i1 cells");
  flags.add<std::string>(app, "--denoise-target", "denoise_target", "noise | image");
  flags.add_switch(app, "--no-recon", "use_recon", false, "drop the reconstruction loss");
  flags.add_switch(app, "--no-denoise", "use_denoise", false, "drop the denoising loss");
  flags.add_switch(app, "--no-attn-scale", "attn_scale", false, "drop the 1/sqrt(d) attention scaling");
  flags.add_switch(app, "--freeze-backbone", "freeze_backbone", true, "keep backbone weights fixed");
  flags.add<double>(app, "--lr", "lr", "learning rate");
  flags.add<double>(app, "--weight-decay", "weight_decay", "AdamW weight decay");
  flags.add<std::size_t>(app, "--batch-size", "batch_size", "images per step");
  flags.add<std::size_t>(app, "--steps", "total_steps", "total optimisation steps");
  flags.add<std::size_t>(app, "--warmup", "warmup_steps", "linear warmup steps");
  flags.add<double>(app, "--clip-grad-norm", "clip_grad_norm", "global gradient norm clip (0 = off)");
}

// Online encoder of a checkpoint, or a fresh one from `config` when `ckpt` is empty.
struct EvalModel {
  TrainConfig config;
  ModelState<float> model;
  std::string source;
};

EvalModel eval_model(const std::string& ckpt, ConfigFlags& flags) {
  if (!ckpt.empty()) {
    LoadedCheckpoint loaded = load_checkpoint(ckpt);
    return {loaded.config, std::move(loaded.state.model), "pretrained"};
  }
  TrainConfig config = flags.resolve();
  return {config, ModelState<float>::create(config.model_config(), config.seed), "random_init"};
}

std::vector<int> stacked_labels(const ImageFolder& folder, std::size_t size, std::size_t stride) {
  std::vector<int> out;
  for (const auto& lbl : folder.labels) {
    const auto cell = downsample_labels(lbl, size, size, stride);
    out.insert(out.end(), cell.begin(), cell.end());
  }
  return out;
}

int run_datagen(const std::string& out, std::size_t n, std::size_t hw, int classes, int shapes, double jitter,
                std::uint64_t seed) {
  SceneSetConfig cfg;
  cfg.count = n;
  cfg.size = hw;
  cfg.classes = classes;
  cfg.shapes_per_image = shapes;
  cfg.color_jitter = jitter;
  cfg.seed = seed;
  if (hw == 0 || hw % 32) throw UsageError("--hw must be a positive multiple of 32");
  if (classes < 2) throw UsageError("--classes must be >= 2");
  write_scene_folder(out, gen_scenes(cfg));
  std::cout << "wrote " << n << " scenes to " << out << '\n';
  return 0;
}

int run_pretrain(const std::string& data, const std::string& out, const std::string& resume, std::size_t save_every,
                 ConfigFlags& flags) {
  TrainConfig config;
  TrainState<float> state;
  if (!resume.empty()) {
    LoadedCheckpoint loaded = load_checkpoint(resume);
    config = loaded.config;
    state = std::move(loaded.state);
    for (auto& c : flags.collectors) c();
    if (flags.given.contains("total_steps")) config.total_steps = flags.given["total_steps"].get<std::size_t>();
  } else {
    config = flags.resolve();
    state = TrainState<float>::create(config);
  }

  const ImageFolder folder = load_image_folder(data, config.image_size, config.image_size);
  fs::create_directories(out);
  nlohmann::json resolved = to_json(config);
  resolved["data"] = data;
  if (!resume.empty()) resolved["resumed_from"] = resume;
  write_json(fs::path(out) / "config.resolved.json", resolved);

  std::ofstream metrics(fs::path(out) / "metrics.csv", std::ios::trunc);
  metrics << metrics_header() << '\n';
  const auto start = std::chrono::steady_clock::now();
  train_loop(state, config, folder.images, [&](const MetricsRow& row) {
    metrics << format_metrics_row(row) << '\n';
    metrics.flush();
    if (row.step % 50 == 0 || row.step == config.total_steps) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      std::printf("step %llu/%zu  l_final %.5f  smoothed %.5f  (%.1fs)\n", static_cast<unsigned long long>(row.step),
                  config.total_steps, row.loss.l_final, state.smoothed_loss, secs);
      std::fflush(stdout);
    }
    if (save_every && row.step % save_every == 0 && row.step != config.total_steps) {
      save_checkpoint(state, config, fs::path(out) / ("checkpoint_" + std::to_string(row.step)));
    }
  });
  save_checkpoint(state, config, fs::path(out) / "checkpoint");
  std::cout << "checkpoint: " << (fs::path(out) / "checkpoint").string() << '\n';
  return 0;
}

int run_cluster(const std::string& ckpt, const std::string& data, std::size_t k, bool l2, std::size_t max_iters,
                std::uint64_t kmeans_seed, std::size_t visualize, const std::string& out, ConfigFlags& flags) {
  EvalModel em = eval_model(ckpt, flags);
  const std::size_t size = em.config.image_size;
  const ImageFolder folder = load_image_folder(data, size, size, true);
  const int stride = em.model.config.encoder.s_last;
  Tensor<float> feats = extract_features(em.model.online, folder.images, stride);
  if (l2) feats = l2_normalize_rows(feats);
  const ClusterResult cr = kmeans(feats, k, max_iters, kmeans_seed);
  const std::vector<int> gt = stacked_labels(folder, size, static_cast<std::size_t>(stride));
  const double acc = matched_accuracy(cr.labels, gt, k);

  fs::create_directories(out);
  const std::size_t fh = size / static_cast<std::size_t>(stride), per = fh * fh;
  for (std::size_t i = 0; i < std::min(visualize, folder.images.size()); ++i) {
    std::vector<int> lab(cr.labels.begin() + static_cast<std::ptrdiff_t>(i * per),
                         cr.labels.begin() + static_cast<std::ptrdiff_t>((i + 1) * per));
    std::vector<int> full(size * size);
    for (std::size_t y = 0; y < size; ++y) {
      for (std::size_t x = 0; x < size; ++x) full[y * size + x] = lab[(y / stride) * fh + x / stride];
    }
    char name[64];
    std::snprintf(name, sizeof(name), "cluster_%05zu.ppm", i);
    write_ppm(fs::path(out) / name, colorize(full, size, size));
  }
  nlohmann::json summary = {{"inertia", cr.inertia},
                            {"matched_accuracy", acc},
                            {"k", k},
                            {"iterations", cr.iterations},
                            {"l2_normalize", l2},
                            {"images", folder.images.size()},
                            {"encoder", em.source},
                            {"checkpoint", ckpt}};
  write_json(fs::path(out) / "cluster.json", summary);
  std::cout << summary.dump() << '\n';
  return 0;
}

int run_probe(const std::string& ckpt, const std::string& data, const std::string& eval_data, ProbeConfig pc,
              const std::string& out, ConfigFlags& flags) {
  EvalModel em = eval_model(ckpt, flags);
  const std::size_t size = em.config.image_size;
  const int stride = em.model.config.encoder.s_last;
  ImageFolder train = load_image_folder(data, size, size, true);
  ImageFolder eval;
  if (!eval_data.empty()) {
    eval = load_image_folder(eval_data, size, size, true);
  } else {
    // Hold out the last quarter of the folder.
    const std::size_t n_eval = std::max<std::size_t>(1, train.images.size() / 4);
    if (train.images.size() < 2) throw std::runtime_error("probe: need at least 2 images to hold some out");
    const auto cut = static_cast<std::ptrdiff_t>(train.images.size() - n_eval);
    eval.images.assign(train.images.begin() + cut, train.images.end());
    eval.labels.assign(train.labels.begin() + cut, train.labels.end());
    train.images.resize(static_cast<std::size_t>(cut));
    train.labels.resize(static_cast<std::size_t>(cut));
  }
  const auto s = static_cast<std::size_t>(stride);
  const ProbeResult r = linear_probe(extract_features(em.model.online, train.images, stride),
                                     stacked_labels(train, size, s),
                                     extract_features(em.model.online, eval.images, stride),
                                     stacked_labels(eval, size, s), pc);

  fs::create_directories(out);
  const fs::path csv = fs::path(out) / "probe_results.csv";
  const bool fresh = !fs::exists(csv);
  std::ofstream f(csv, std::ios::app);
  if (fresh) {
    f << "encoder,checkpoint,seed,steps,lr,miou,pixel_accuracy";
    for (std::size_t c = 0; c < pc.classes; ++c) f << ",iou_" << c;
    f << '\n';
  }
  char buf[64];
  f << em.source << ',' << ckpt << ',' << (ckpt.empty() ? em.config.seed : pc.seed) << ',' << pc.steps << ',' << pc.lr;
  std::snprintf(buf, sizeof(buf), ",%.6f,%.6f", r.miou, r.pixel_accuracy);
  f << buf;
  for (const auto& iou : r.iou) {
    if (iou) {
      std::snprintf(buf, sizeof(buf), ",%.6f", *iou);
      f << buf;
    } else {
      f << ",";
    }
  }
  f << '\n';
  std::printf("%s miou %.4f pixel_accuracy %.4f\n", em.source.c_str(), r.miou, r.pixel_accuracy);
  return 0;
}

int run_gradcheck(const std::string& config_file, std::size_t probes, double tolerance) {
  TrainConfig config;
  config.image_size = 32;
  config.channels = 16;
  config.blocks_l = 2;
  config.blocks_m = 1;
  config.queries = 8;
  config.heads = 2;
  try {
    if (!config_file.empty()) config = apply_config(config, parse_config_text(read_text(config_file)));
    config.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  GradCheckOptions opts;
  opts.max_probes = probes;
  opts.tolerance = tolerance;
  opts.seed = config.seed;
  const auto start = std::chrono::steady_clock::now();
  const GradCheckReport report = toy_grad_check(config, opts);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  for (const auto& e : report.entries) {
    if (e.max_rel_error > 0.1 * tolerance) std::printf("  %-48s rel %.3e\n", e.name.c_str(), e.max_rel_error);
  }
  std::printf("gradcheck: %zu tensors, max relative error %.3e (tolerance %.0e), %.1fs: %s\n", report.entries.size(),
              report.max_rel_error, tolerance, secs, report.passed() ? "PASS" : "FAIL");
  return report.passed() ? 0 : 1;
}

int run_export(const std::string& ckpt, const std::vector<std::string>& exclude, const std::string& out) {
  const auto dropped = export_checkpoint(ckpt, exclude, out);
  std::cout << "exported " << out << " without " << dropped.size() << " tensors\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mask-JEPA pretraining and evaluation"};
  app.require_subcommand(1);

  // datagen
  auto* datagen = app.add_subcommand("datagen", "write a synthetic shapes corpus (PPM images, PGM labels)");
  std::string dg_out;
  std::size_t dg_n = 256, dg_hw = 64;
  int dg_classes = 5, dg_shapes = 3;
  double dg_jitter = 0.12;
  std::uint64_t dg_seed = 0;
  datagen->add_option("--out", dg_out, "output directory")->required();
  datagen->add_option("--n", dg_n, "number of scenes");
  datagen->add_option("--hw", dg_hw, "image side");
  datagen->add_option("--classes", dg_classes, "classes including background");
  datagen->add_option("--shapes", dg_shapes, "shapes per image");
  datagen->add_option("--jitter", dg_jitter, "per-instance color jitter half-range");
  datagen->add_option("--seed", dg_seed, "seed");

  // pretrain
  auto* pretrain = app.add_subcommand("pretrain", "self-supervised pretraining");
  ConfigFlags pre_flags;
  std::string pre_data, pre_out, pre_resume;
  std::size_t pre_save_every = 0;
  pretrain->add_option("--data", pre_data, "folder of PPM images")->required()->check(CLI::ExistingDirectory);
  pretrain->add_option("--out", pre_out, "run directory")->required();
  pretrain->add_option("--resume", pre_resume, "checkpoint directory to continue from")->check(CLI::ExistingDirectory);
  pretrain->add_option("--save-every", pre_save_every, "extra checkpoint every N steps");
  add_model_flags(pretrain, pre_flags);
  add_train_flags(pretrain, pre_flags);
  pre_flags.add_switch(pretrain, "--no-extra-sa", "blocks_m", 0, "M = 0 extra self-attention blocks");

  // cluster
  auto* cluster = app.add_subcommand("cluster", "k-means on F_last and matched accuracy");
  ConfigFlags cl_flags;
  std::string cl_ckpt, cl_data, cl_out = "cluster_out";
  std::size_t cl_k = 5, cl_iters = 100, cl_vis = 8;
  std::uint64_t cl_seed = 0;
  bool cl_l2 = false, cl_random = false;
  auto* cl_ckpt_opt = cluster->add_option("--ckpt", cl_ckpt, "checkpoint directory")->check(CLI::ExistingDirectory);
  auto* cl_random_opt = cluster->add_flag("--random-init", cl_random, "use a freshly initialized encoder");
  cl_ckpt_opt->excludes(cl_random_opt);
  cluster->add_option("--data", cl_data, "labeled scene folder")->required()->check(CLI::ExistingDirectory);
  cluster->add_option("--k", cl_k, "clusters");
  cluster->add_option("--max-iters", cl_iters, "Lloyd iterations");
  cluster->add_option("--kmeans-seed", cl_seed, "k-means++ seed");
  cluster->add_flag("--l2-normalize", cl_l2, "unit-normalize features first");
  cluster->add_option("--visualize", cl_vis, "images to render as PPM");
  cluster->add_option("--out", cl_out, "output directory");
  add_model_flags(cluster, cl_flags);

  // probe
  auto* probe = app.add_subcommand("probe", "linear probe on frozen F_last");
  ConfigFlags pr_flags;
  std::string pr_ckpt, pr_data, pr_eval, pr_out = ".";
  bool pr_random = false;
  ProbeConfig pr_cfg;
  auto* pr_ckpt_opt = probe->add_option("--ckpt", pr_ckpt, "checkpoint directory")->check(CLI::ExistingDirectory);
  auto* pr_random_opt = probe->add_flag("--random-init", pr_random, "use a freshly initialized encoder");
  pr_ckpt_opt->excludes(pr_random_opt);
  probe->add_option("--data", pr_data, "labeled training scenes")->required()->check(CLI::ExistingDirectory);
  probe->add_option("--eval-data", pr_eval, "held-out labeled scenes")->check(CLI::ExistingDirectory);
  probe->add_option("--probe-steps", pr_cfg.steps, "classifier steps");
  probe->add_option("--probe-lr", pr_cfg.lr, "classifier learning rate");
  probe->add_option("--probe-seed", pr_cfg.seed, "classifier init seed");
  probe->add_option("--classes", pr_cfg.classes, "classes including background");
  probe->add_option("--out", pr_out, "directory holding probe_results.csv");
  add_model_flags(probe, pr_flags);

  // gradcheck
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of the full loss in 64-bit");
  std::string gc_config;
  std::size_t gc_probes = 4;
  double gc_tol = 1e-4;
  gradcheck->add_option("--config", gc_config, "key = value config for the toy model")->check(CLI::ExistingFile);
  gradcheck->add_option("--probes", gc_probes, "entries probed per tensor (0 = all)");
  gradcheck->add_option("--tolerance", gc_tol, "max relative error");

  // export
  auto* exporter = app.add_subcommand("export", "copy a checkpoint without selected tensors");
  std::string ex_ckpt, ex_out;
  std::vector<std::string> ex_exclude;
  exporter->add_option("--ckpt", ex_ckpt, "checkpoint directory")->required()->check(CLI::ExistingDirectory);
  exporter->add_option("--exclude", ex_exclude, "fnmatch glob of tensor names to drop (repeatable)");
  exporter->add_option("--out", ex_out, "output checkpoint directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*datagen) return run_datagen(dg_out, dg_n, dg_hw, dg_classes, dg_shapes, dg_jitter, dg_seed);
    if (*pretrain) return run_pretrain(pre_data, pre_out, pre_resume, pre_save_every, pre_flags);
    if (*cluster) {
      if (cl_ckpt.empty() && !cl_random) throw UsageError("cluster: give --ckpt or --random-init");
      return run_cluster(cl_ckpt, cl_data, cl_k, cl_l2, cl_iters, cl_seed, cl_vis, cl_out, cl_flags);
    }
    if (*probe) {
      if (pr_ckpt.empty() && !pr_random) throw UsageError("probe: give --ckpt or --random-init");
      return run_probe(pr_ckpt, pr_data, pr_eval, pr_cfg, pr_out, pr_flags);
    }
    if (*gradcheck) return run_gradcheck(gc_config, gc_probes, gc_tol);
    if (*exporter) return run_export(ex_ckpt, ex_exclude, ex_out);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
