// Acceptance run: one PASS/FAIL line per criterion; exits 1 if any fails.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <functional>
#include <iterator>
#include <set>
#include <sstream>

#include "helpers.hpp"
#include "maskjepa/checkpoint.hpp"
#include "maskjepa/evalkit.hpp"
#include "maskjepa/ops.hpp"
#include "maskjepa/synthdata.hpp"
#include "maskjepa/trainer.hpp"

namespace fs = std::filesystem;
using namespace mjepa;
using testutil::random_tensor;

namespace {

// Tolerances and budgets.
constexpr double kGradTol = 1e-4;
constexpr double kGradSeconds = 120.0;
constexpr double kFixpointTol = 1e-6;
constexpr double kSanityRatio = 0.7;
constexpr double kSanitySeconds = 600.0;
constexpr double kClusterGap = 0.10;
constexpr double kClusterSeconds = 1800.0;
constexpr double kProbeGap = 0.05;
constexpr std::size_t kPretrainSteps = 1000;
constexpr std::size_t kClusterSeeds = 5;
constexpr std::size_t kProbeSeeds = 3;

int failures = 0;

void report(bool ok, const std::string& name, const std::string& detail) {
  std::printf("%s  %-28s %s\n", ok ? "PASS" : "FAIL", name.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

double seconds_since(std::chrono::steady_clock::time_point t) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(MASKJEPA_CLI) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Runs `check`, turning an exception into a failed criterion.
void criterion(const std::string& name, const std::function<std::pair<bool, std::string>()>& check) {
  try {
    const auto [ok, detail] = check();
    report(ok, name, detail);
  } catch (const std::exception& e) {
    report(false, name, std::string("exception: ") + e.what());
  }
}

std::pair<bool, std::string> gradient_correctness() {
  TrainConfig cfg;
  cfg.image_size = 32;
  cfg.channels = 16;
  cfg.blocks_l = 2;
  cfg.blocks_m = 1;
  cfg.queries = 8;
  cfg.heads = 2;
  GradCheckOptions opts;
  opts.tolerance = kGradTol;
  opts.max_probes = 64;
  const auto start = std::chrono::steady_clock::now();
  const auto r = toy_grad_check(cfg, opts);
  const double secs = seconds_since(start);
  std::size_t probed = 0;
  for (const auto& e : r.entries) probed += e.probed;
  return {r.passed() && secs < kGradSeconds,
          fmt("max rel err %.3e over %zu entries of %zu tensors (< %.0e), %.1fs (< %.0fs)", r.max_rel_error, probed,
              r.entries.size(), kGradTol, secs, kGradSeconds)};
}

std::pair<bool, std::string> exact_mechanisms() {
  std::vector<std::string> broken;
  std::mt19937_64 rng(2024);

  // Masked-patch count.
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t gh = 1 + rng() % 16, gw = 1 + rng() % 16;
    const double r = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    const auto g = sample_mask(gh, gw, 1 + rng() % 3, r, rng);
    if (g.masked_count() != static_cast<std::size_t>(std::llround(r * static_cast<double>(gh * gw)))) {
      broken.push_back("mask count");
      break;
    }
  }

  // Block-noise constancy.
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t s = 1 + rng() % 8, h = s * (1 + rng() % 8), w = s * (1 + rng() % 8);
    const auto np = make_block_noise<float>(h, w, static_cast<int>(s), 0.4, rng);
    bool ok = true;
    for (std::size_t c = 0; c < 3 && ok; ++c) {
      for (std::size_t i = 0; i < h && ok; ++i) {
        for (std::size_t j = 0; j < w; ++j) {
          if (np.full[(c * h + i) * w + j] != np.low[(c * (h / s) + i / s) * (w / s) + j / s]) ok = false;
        }
      }
    }
    if (!ok) {
      broken.push_back("block noise");
      break;
    }
  }

  // EMA arithmetic.
  for (double tau : {0.0, 0.5, 1.0}) {
    ParameterList<float> t{{"w", Var<float>::leaf(random_tensor<float>({7}, 1), false), false}};
    ParameterList<float> o{{"w", Var<float>::leaf(random_tensor<float>({7}, 2), true), true}};
    const Tensor<float> t0 = t[0].var.value(), o0 = o[0].var.value();
    ema_update(t, o, tau);
    const auto keep = static_cast<float>(tau), take = static_cast<float>(1.0 - tau);
    for (std::size_t i = 0; i < 7; ++i) {
      if (t[0].var.value()[i] != keep * t0[i] + take * o0[i]) {
        broken.push_back(fmt("ema tau=%.1f", tau));
        break;
      }
    }
    if (tau == 1.0 && !bitwise_equal(t[0].var.value(), t0)) broken.push_back("ema tau=1 identity");
    if (tau == 0.0 && !bitwise_equal(t[0].var.value(), o0)) broken.push_back("ema tau=0 copy");
  }

  // Tau schedule endpoints.
  if (tau_schedule(0, 1000) != 0.996 || tau_schedule(1000, 1000) != 1.0) broken.push_back("tau endpoints");

  // L_final = L_recon + L_denoise, and stop-gradient into the target.
  TrainConfig cfg;
  cfg.image_size = 32;
  cfg.channels = 16;
  cfg.blocks_l = 1;
  cfg.blocks_m = 1;
  cfg.queries = 4;
  cfg.heads = 2;
  auto model = ModelState<float>::create(cfg.model_config(), 3);
  std::mt19937_64 irng(4);
  const auto image = random_tensor<float>({2, 3, 32, 32}, 5, 0.0, 1.0);
  const auto inputs = draw_step_inputs<float>(cfg, 2, irng);
  const auto g = compute_losses(model, image, inputs, LossSwitches{});
  if (g.l_final.item() != g.l_recon.item() + g.l_denoise.item()) broken.push_back("final sum");
  backward(g.l_final);
  for (const auto& p : model.target_parameters()) {
    if (p.var.has_grad() || p.var.requires_grad()) {
      broken.push_back("target gradient " + p.name);
      break;
    }
  }

  // Visible-cell invariance.
  const MaskGrid half{2, 2, 2, 0.5, {1, 0, 0, 1}};
  auto pred = random_tensor<float>({16, 8}, 6), target = random_tensor<float>({16, 8}, 7);
  const float before = recon_loss(Var<float>::constant(pred), Var<float>::constant(target), half).item();
  const auto cells = half.cell_mask();
  for (std::size_t r = 0; r < 16; ++r) {
    if (cells[r]) continue;
    for (std::size_t c = 0; c < 8; ++c) {
      pred[r * 8 + c] += 5.0f;
      target[r * 8 + c] *= -2.0f;
    }
  }
  const float after = recon_loss(Var<float>::constant(pred), Var<float>::constant(target), half).item();
  if (std::memcmp(&before, &after, sizeof(float)) != 0) broken.push_back("visible cells");

  std::string detail = "mask count x200, block noise x20, EMA tau 0/0.5/1, tau endpoints, final sum, "
                       "visible cells, stop-gradient";
  if (!broken.empty()) {
    detail = "broken:";
    for (const auto& b : broken) detail += " [" + b + "]";
  }
  return {broken.empty(), detail};
}

std::pair<bool, std::string> loss_fixpoints() {
  const auto target = random_tensor<float>({64, 16}, 8, -3.0, 3.0);
  Tensor<float> ln;
  {
    NoGradGuard ng;
    ln = ops::layer_norm(Var<float>::constant(target), {}, {}).value();
  }
  std::mt19937_64 rng(9);
  const auto mask = sample_mask_for_feature(8, 8, 2, 0.5, rng);
  const double recon = recon_loss(Var<float>::constant(ln), Var<float>::constant(target), mask).item();

  const auto clean = random_tensor<float>({2, 3, 16, 16}, 10, 0.0, 1.0);
  const auto noise = random_tensor<float>({2, 3, 4, 4}, 11);
  const double dn = denoise_loss(Var<float>::constant(noise), clean, noise, DenoiseTarget::gaussian_noise).item();
  Tensor<float> pooled({2, 3, 4, 4});
  for (std::size_t nc = 0; nc < 6; ++nc) {
    for (std::size_t y = 0; y < 4; ++y) {
      for (std::size_t x = 0; x < 4; ++x) {
        float s = 0.0f;
        for (std::size_t dy = 0; dy < 4; ++dy) {
          for (std::size_t dx = 0; dx < 4; ++dx) s += clean[nc * 256 + (y * 4 + dy) * 16 + x * 4 + dx];
        }
        pooled[nc * 16 + y * 4 + x] = s / 16.0f;
      }
    }
  }
  const double di = denoise_loss(Var<float>::constant(pooled), clean, noise, DenoiseTarget::raw_image).item();
  const bool ok = std::abs(recon) <= kFixpointTol && dn == 0.0 && std::abs(di) <= kFixpointTol;
  return {ok, fmt("L_recon %.2e, L_denoise(noise) %.2e, L_denoise(image) %.2e (tol %.0e)", recon, dn, di,
                  kFixpointTol)};
}

struct Corpus {
  std::vector<Tensor<float>> train_images, eval_images;
  std::vector<int> train_labels, eval_labels;
};

std::vector<int> cell_labels(const std::vector<ShapeScene>& scenes, std::size_t stride) {
  std::vector<int> out;
  for (const auto& s : scenes) {
    const auto cells = downsample_labels(s.labels, s.height, s.width, stride);
    out.insert(out.end(), cells.begin(), cells.end());
  }
  return out;
}

Corpus make_corpus(const TrainConfig& cfg) {
  SceneSetConfig sc;
  sc.size = cfg.image_size;
  sc.count = 256;
  sc.seed = 1;
  const auto train = gen_scenes(sc);
  sc.count = 64;
  sc.seed = 2;
  const auto eval = gen_scenes(sc);
  const auto stride = static_cast<std::size_t>(cfg.model_config().encoder.s_last);
  return {scene_images(train), scene_images(eval), cell_labels(train, stride), cell_labels(eval, stride)};
}

std::pair<bool, std::string> training_sanity(const Corpus& corpus) {
  TrainConfig cfg;
  cfg.total_steps = 200;
  auto state = TrainState<float>::create(cfg);
  double first = 0.0;
  bool finite = true;
  const auto start = std::chrono::steady_clock::now();
  train_loop(state, cfg, corpus.train_images, [&](const MetricsRow& row) {
    if (row.step <= 10) first += row.loss.l_final / 10.0;
    finite = finite && std::isfinite(row.loss.l_final) && std::isfinite(row.loss.l_recon) &&
             std::isfinite(row.loss.l_denoise);
  });
  const double secs = seconds_since(start);
  const double last = state.smoothed_loss;
  return {finite && last < kSanityRatio * first && secs < kSanitySeconds,
          fmt("smoothed L_final %.4f at step 200 vs %.4f over steps 1-10 (ratio %.3f < %.1f), finite=%s, %.0fs", last,
              first, last / first, kSanityRatio, finite ? "yes" : "no", secs)};
}

struct SeedResult {
  double cluster_pre = 0.0, cluster_rand = 0.0;
  double miou_pre = 0.0, miou_rand = 0.0;
};

double cluster_accuracy(const Encoder<float>& enc, const Corpus& c, std::uint64_t seed, int stride) {
  const auto feats = extract_features(enc, c.eval_images, stride);
  const auto r = kmeans(feats, 5, 100, seed);
  return matched_accuracy(r.labels, c.eval_labels, 5);
}

double probe_miou(const Encoder<float>& enc, const Corpus& c, std::uint64_t seed, int stride) {
  ProbeConfig pc;
  pc.seed = seed;
  return linear_probe(extract_features(enc, c.train_images, stride), c.train_labels,
                      extract_features(enc, c.eval_images, stride), c.eval_labels, pc)
      .miou;
}

void representation_claims(const Corpus& corpus) {
  std::vector<SeedResult> results;
  const auto start = std::chrono::steady_clock::now();
  for (std::uint64_t seed = 0; seed < kClusterSeeds; ++seed) {
    TrainConfig cfg;
    cfg.seed = seed;
    cfg.total_steps = kPretrainSteps;
    auto state = TrainState<float>::create(cfg);
    train_loop(state, cfg, corpus.train_images, [](const MetricsRow&) {});
    const auto fresh = ModelState<float>::create(cfg.model_config(), seed);
    const int stride = cfg.model_config().encoder.s_last;
    SeedResult r;
    r.cluster_pre = cluster_accuracy(state.model.online, corpus, seed, stride);
    r.cluster_rand = cluster_accuracy(fresh.online, corpus, seed, stride);
    if (seed < kProbeSeeds) {
      r.miou_pre = probe_miou(state.model.online, corpus, seed, stride);
      r.miou_rand = probe_miou(fresh.online, corpus, seed, stride);
    }
    std::printf("      seed %llu: k-means acc %.4f vs %.4f", static_cast<unsigned long long>(seed), r.cluster_pre,
                r.cluster_rand);
    if (seed < kProbeSeeds) std::printf(", probe mIoU %.4f vs %.4f", r.miou_pre, r.miou_rand);
    std::printf("  (%.0fs)\n", seconds_since(start));
    std::fflush(stdout);
    results.push_back(r);
  }
  const double secs = seconds_since(start);

  double pre = 0.0, rnd = 0.0;
  for (const auto& r : results) {
    pre += r.cluster_pre / kClusterSeeds;
    rnd += r.cluster_rand / kClusterSeeds;
  }
  report(pre - rnd >= kClusterGap && secs < kClusterSeconds, "representation (k-means)",
         fmt("mean matched acc %.4f pretrained vs %.4f random, gap %+.4f (>= %.2f) over %zu seeds, %.0fs (< %.0fs)",
             pre, rnd, pre - rnd, kClusterGap, kClusterSeeds, secs, kClusterSeconds));

  double mp = 0.0, mr = 0.0;
  for (std::size_t i = 0; i < kProbeSeeds; ++i) {
    mp += results[i].miou_pre / kProbeSeeds;
    mr += results[i].miou_rand / kProbeSeeds;
  }
  report(mp - mr >= kProbeGap, "probe (linear mIoU)",
         fmt("mean mIoU %.4f pretrained vs %.4f random, gap %+.4f (>= %.2f) over %zu seeds", mp, mr, mp - mr,
             kProbeGap, kProbeSeeds));
}

std::pair<bool, std::string> ablation_mechanics(const fs::path& work) {
  const fs::path data = work / "scenes";
  if (run_cli("datagen --out " + data.string() + " --n 16 --hw 64 --seed 5") != 0) return {false, "datagen failed"};
  const std::vector<std::pair<std::string, std::string>> variants{
      {"base", ""},
      {"no_recon", "--no-recon"},
      {"no_denoise", "--no-denoise"},
      {"no_extra_sa", "--no-extra-sa"},
      {"target_image", "--denoise-target image"},
      {"target_noise", "--denoise-target noise --sigma 0.2"},
      {"sigma", "--sigma 0.8"},
      {"ratio", "--ratio 0.25"},
      {"patch", "--patch 1"},
      {"s_i1", "--s-i1 16"},
  };
  std::vector<std::string> failed;
  std::set<std::string> configs, metrics;
  for (const auto& [name, flags] : variants) {
    const fs::path out = work / name;
    if (run_cli("pretrain --data " + data.string() + " --out " + out.string() + " --steps 3 " + flags) != 0 ||
        !fs::exists(out / "metrics.csv") || !fs::exists(out / "checkpoint" / "manifest.json")) {
      failed.push_back(name);
      continue;
    }
    auto cfg = nlohmann::json::parse(slurp(out / "config.resolved.json"));
    cfg.erase("data");
    configs.insert(cfg.dump());
    metrics.insert(slurp(out / "metrics.csv"));
  }
  const fs::path slim = work / "exported";
  if (run_cli("export --ckpt " + (work / "base" / "checkpoint").string() + " --exclude 'predictor.*' --out " +
              slim.string()) != 0) {
    failed.push_back("export");
  } else {
    for (const auto& nt : read_checkpoint(slim).tensors) {
      if (nt.name.find("predictor.") != std::string::npos) {
        failed.push_back("export kept " + nt.name);
        break;
      }
    }
    load_checkpoint(slim);
  }
  std::string detail = fmt("%zu variants + export; %zu distinct configs, %zu distinct metrics files", variants.size(),
                           configs.size(), metrics.size());
  for (const auto& f : failed) detail += " [failed " + f + "]";
  return {failed.empty() && configs.size() == variants.size() && metrics.size() == variants.size(), detail};
}

std::pair<bool, std::string> determinism(const fs::path& work) {
  const fs::path data = work / "scenes";
  if (run_cli("datagen --out " + data.string() + " --n 16 --hw 64 --seed 6") != 0) return {false, "datagen failed"};
  const std::string common = "pretrain --data " + data.string() + " --steps 20 --seed 11 --out ";
  if (run_cli(common + (work / "a").string() + " --save-every 10") != 0 || run_cli(common + (work / "b").string()) != 0) {
    return {false, "pretrain failed"};
  }
  const bool same_metrics = slurp(work / "a" / "metrics.csv") == slurp(work / "b" / "metrics.csv");

  const auto loaded = load_checkpoint(work / "a" / "checkpoint");
  save_checkpoint(loaded.state, loaded.config, work / "resaved");
  const bool byte_identical =
      slurp(work / "a" / "checkpoint" / "manifest.json") == slurp(work / "resaved" / "manifest.json") &&
      slurp(work / "a" / "checkpoint" / "tensors.bin") == slurp(work / "resaved" / "tensors.bin");

  // Resume from the step-10 checkpoint of run a; the resumed rows must match its tail.
  bool resume_ok = run_cli("pretrain --data " + data.string() + " --resume " + (work / "a" / "checkpoint_10").string() +
                           " --out " + (work / "resumed").string()) == 0;
  if (resume_ok) {
    auto lines = [](const std::string& text) {
      std::vector<std::string> out;
      std::istringstream in(text);
      for (std::string l; std::getline(in, l);) out.push_back(l);
      return out;
    };
    const auto full = lines(slurp(work / "a" / "metrics.csv"));
    const auto tail = lines(slurp(work / "resumed" / "metrics.csv"));
    std::vector<std::string> joined(full.begin(), full.begin() + 11);
    joined.insert(joined.end(), tail.begin() + 1, tail.end());
    resume_ok = full.size() == 21 && joined == full;
  }
  return {same_metrics && byte_identical && resume_ok,
          fmt("metrics.csv identical: %s; save-load-save byte identical: %s; resume matches: %s",
              same_metrics ? "yes" : "no", byte_identical ? "yes" : "no", resume_ok ? "yes" : "no")};
}

}  // namespace

int main() {
  const fs::path work = testutil::scratch_dir("acceptance");
  criterion("gradient correctness", gradient_correctness);
  criterion("exact mechanisms", exact_mechanisms);
  criterion("loss-zero fixpoints", loss_fixpoints);
  criterion("ablation mechanics", [&] { return ablation_mechanics(work / "ablation"); });
  criterion("determinism & persistence", [&] { return determinism(work / "determinism"); });

  const TrainConfig desk;
  const Corpus corpus = make_corpus(desk);
  criterion("training sanity", [&] { return training_sanity(corpus); });
  try {
    representation_claims(corpus);
  } catch (const std::exception& e) {
    report(false, "representation (k-means)", std::string("exception: ") + e.what());
    report(false, "probe (linear mIoU)", "not run");
  }
  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
