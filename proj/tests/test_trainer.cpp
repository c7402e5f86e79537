#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <set>

#include "doctest.h"
#include "helpers.hpp"
#include "maskjepa/checkpoint.hpp"
#include "maskjepa/trainer.hpp"

using namespace mjepa;
using testutil::random_tensor;

namespace fs = std::filesystem;

namespace {

TrainConfig tiny_config() {
  TrainConfig c;
  c.image_size = 32;
  c.channels = 16;
  c.blocks_l = 1;
  c.blocks_m = 1;
  c.queries = 4;
  c.heads = 2;
  c.batch_size = 2;
  c.total_steps = 6;
  c.lr = 1e-3;
  return c;
}

std::vector<Tensor<float>> tiny_images(std::size_t n, std::uint64_t seed) {
  std::vector<Tensor<float>> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(random_tensor<float>({3, 32, 32}, seed + i, 0.0, 1.0));
  return out;
}

std::vector<std::string> trace(TrainState<float>& st, const TrainConfig& cfg, const std::vector<Tensor<float>>& imgs,
                               std::size_t steps = SIZE_MAX) {
  std::vector<std::string> rows;
  train_loop(st, cfg, imgs, [&](const MetricsRow& r) { rows.push_back(format_metrics_row(r)); }, steps);
  return rows;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

ParameterList<float> single(const std::string& name, Tensor<float> v) {
  return {{name, Var<float>::leaf(std::move(v), true), true}};
}

}  // namespace

TEST_CASE("tau schedule") {
  CHECK(tau_schedule(0, 1000) == 0.996);
  CHECK(tau_schedule(1000, 1000) == 1.0);
  CHECK(tau_schedule(500, 1000) == doctest::Approx(0.998).epsilon(1e-15));
  CHECK(tau_schedule(2000, 1000) == 1.0);
  double prev = 0.0;
  for (std::size_t s = 0; s <= 100; ++s) {
    CHECK(tau_schedule(s, 100) >= prev);
    prev = tau_schedule(s, 100);
  }
}

TEST_CASE("EMA arithmetic") {
  auto target = single("w", Tensor<float>({3}, 2.0f));
  const auto online = single("w", Tensor<float>({3}, 4.0f));
  ema_update(target, online, 0.5);
  for (float v : target[0].var.value().data()) CHECK(v == 3.0f);

  auto t1 = single("w", random_tensor<float>({4}, 1));
  const Tensor<float> before = t1[0].var.value();
  ema_update(t1, single("w", random_tensor<float>({4}, 2)), 1.0);
  CHECK(bitwise_equal(t1[0].var.value(), before));

  const auto src = single("w", random_tensor<float>({4}, 3));
  ema_update(t1, src, 0.0);
  CHECK(bitwise_equal(t1[0].var.value(), src[0].var.value()));
}

TEST_CASE("EMA name mismatch lists the difference") {
  auto target = single("a", Tensor<float>({1}));
  try {
    ema_update(target, single("b", Tensor<float>({1})), 0.5);
    FAIL("expected an error");
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    CHECK(msg.find("a") != std::string::npos);
    CHECK(msg.find("b") != std::string::npos);
  }
}

TEST_CASE("AdamW first step and parameter filtering") {
  ParameterList<double> params{
      {"w", Var<double>::leaf(Tensor<double>({2, 1}, std::vector<double>{1.0, -2.0}), true), true},
      {"b", Var<double>::leaf(Tensor<double>({1}, 0.5), true), true},
      {"frozen", Var<double>::leaf(Tensor<double>({1}, 0.5), true), false},
      {"no_grad", Var<double>::leaf(Tensor<double>({1}, 0.5), true), true}};
  params[0].var.mutable_grad() = Tensor<double>({2, 1}, std::vector<double>{0.3, -0.7});
  params[1].var.mutable_grad() = Tensor<double>({1}, 2.0);
  params[2].var.mutable_grad() = Tensor<double>({1}, 2.0);
  AdamW<double> opt(0.9, 0.999, 1e-8, 0.1);
  opt.step(params, 0.01);
  // Bias-corrected first step moves by lr * g / (|g| + eps); decay only on matrices.
  CHECK(params[0].var.value()[0] == doctest::Approx(1.0 * (1 - 0.001) - 0.01 * 0.3 / (0.3 + 1e-8)).epsilon(1e-12));
  CHECK(params[0].var.value()[1] == doctest::Approx(-2.0 * (1 - 0.001) + 0.01 * 0.7 / (0.7 + 1e-8)).epsilon(1e-12));
  CHECK(params[1].var.value()[0] == doctest::Approx(0.5 - 0.01 * 2.0 / (2.0 + 1e-8)).epsilon(1e-12));
  CHECK(params[2].var.value()[0] == 0.5);
  CHECK(params[3].var.value()[0] == 0.5);
  CHECK(opt.moments().count("frozen") == 0);
}

TEST_CASE("training is bitwise deterministic") {
  const auto cfg = tiny_config();
  const auto imgs = tiny_images(4, 10);
  auto a = TrainState<float>::create(cfg), b = TrainState<float>::create(cfg);
  CHECK(trace(a, cfg, imgs) == trace(b, cfg, imgs));
}

TEST_CASE("target parameters change only through EMA and never get gradients") {
  auto cfg = tiny_config();
  auto st = TrainState<float>::create(cfg);
  const auto batch = sample_batch(tiny_images(4, 20), 2, st.rng);

  std::vector<Tensor<float>> target_before;
  for (const auto& p : st.model.target_parameters()) target_before.push_back(p.var.value());
  const double tau = tau_schedule(st.step, cfg.total_steps);
  train_step(batch, st, cfg);

  const auto target = st.model.target_parameters();
  const auto online = st.model.online.parameters();
  for (std::size_t i = 0; i < target.size(); ++i) {
    CHECK_FALSE(target[i].var.has_grad());
    CHECK_FALSE(target[i].trainable);
    Tensor<float> expected = target_before[i];
    const auto keep = static_cast<float>(tau), take = static_cast<float>(1.0 - tau);
    for (std::size_t j = 0; j < expected.numel(); ++j) expected[j] = keep * expected[j] + take * online[i].var.value()[j];
    CHECK(bitwise_equal(target[i].var.value(), expected));
  }
}

TEST_CASE("target names are exactly the encoder names of the online model") {
  auto st = TrainState<float>::create(tiny_config());
  std::set<std::string> online, target;
  for (const auto& p : st.model.online.parameters()) online.insert(p.name);
  for (const auto& p : st.model.target_parameters()) target.insert(p.name);
  CHECK(online == target);
  for (const auto& p : st.model.online_parameters()) {
    const bool encoder = p.name.rfind("backbone.", 0) == 0 || p.name.rfind("pixel_decoder.", 0) == 0;
    CHECK(encoder == (target.count(p.name) == 1));
  }
}

TEST_CASE("frozen backbone target converges to the frozen online backbone") {
  auto cfg = tiny_config();
  cfg.freeze_backbone = true;
  cfg.tau_start = 0.5;
  cfg.tau_end = 0.5;
  auto st = TrainState<float>::create(cfg);
  for (auto& p : st.model.target_parameters()) {
    if (p.name.rfind("backbone.", 0) == 0) {
      for (auto& v : p.var.mutable_value().storage()) v += 1.0f;
    }
  }
  auto gap = [&] {
    double g = 0.0;
    const auto on = st.model.online.parameters();
    const auto tg = st.model.target_parameters();
    for (std::size_t i = 0; i < on.size(); ++i) {
      if (on[i].name.rfind("backbone.", 0) != 0) continue;
      for (std::size_t j = 0; j < on[i].var.numel(); ++j) {
        g = std::max(g, static_cast<double>(std::abs(on[i].var.value()[j] - tg[i].var.value()[j])));
      }
    }
    return g;
  };
  const auto imgs = tiny_images(2, 30);
  double prev = gap();
  for (int s = 0; s < 4; ++s) {
    trace(st, cfg, imgs, 1);
    const double now = gap();
    CHECK(now == doctest::Approx(prev * 0.5).epsilon(1e-3));
    prev = now;
  }
}

TEST_CASE("non-finite loss aborts with the step number") {
  const auto cfg = tiny_config();
  auto st = TrainState<float>::create(cfg);
  Tensor<float> batch({2, 3, 32, 32}, 0.5f);
  batch[7] = std::numeric_limits<float>::quiet_NaN();
  try {
    train_step(batch, st, cfg);
    FAIL("expected NonFiniteLossError");
  } catch (const NonFiniteLossError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("step 1") != std::string::npos);
    CHECK(msg.find("l_recon") != std::string::npos);
  }
}

TEST_CASE("metrics rows") {
  CHECK(metrics_header() == "step,l_recon,l_denoise,l_final,tau,lr");
  MetricsRow r;
  r.step = 3;
  r.loss.l_recon = 0.5;
  r.loss.l_denoise = 0.25;
  r.loss.l_final = 0.75;
  r.tau = 0.9968;
  r.lr = 1e-4;
  CHECK(format_metrics_row(r) == "3,0.5,0.25,0.75,0.9968,0.0001");
}

TEST_CASE("config echo, config text and precedence") {
  const TrainConfig d;
  const auto j = to_json(d);
  CHECK(j.at("sigma") == 0.4);
  CHECK(j.at("ratio") == 0.5);
  CHECK(j.at("patch") == 8);
  CHECK(j.at("blocks_l") == 9);
  CHECK(j.at("blocks_m") == 2);
  CHECK(j.at("s_i1") == 8);
  CHECK(j.at("lr") == 1e-4);
  CHECK(j.at("tau_start") == 0.996);
  CHECK(j.at("tau_end") == 1.0);
  CHECK(j.at("denoise_target") == "gaussian_noise");

  const auto file = parse_config_text("# desk run\nsigma = 0.3\nratio=0.25  # trailing\ndenoise_target = image\n\n");
  TrainConfig c = apply_config(d, file);
  CHECK(c.sigma == 0.3);
  CHECK(c.ratio == 0.25);
  CHECK(c.denoise_mode == DenoiseTarget::raw_image);
  c = apply_config(c, nlohmann::json{{"sigma", 0.2}});
  CHECK(c.sigma == 0.2);
  CHECK(c.ratio == 0.25);
  CHECK(train_config_from_json(to_json(c)).sigma == 0.2);

  CHECK_THROWS_AS(parse_config_text("sigmaa = 1\n"), std::invalid_argument);
  CHECK_THROWS_AS(parse_config_text("sigma 0.4\n"), std::invalid_argument);
  TrainConfig none;
  none.use_recon = none.use_denoise = false;
  CHECK_THROWS_AS(none.validate(), std::invalid_argument);
}

TEST_CASE("effective patch keeps at least four patches per side") {
  TrainConfig c;
  CHECK(c.effective_patch() == 2);  // 64 px -> 8x8 grid
  c.image_size = 512;
  CHECK(c.effective_patch() == 8);  // 64x64 grid at the paper's resolution
  c.image_size = 32;
  CHECK(c.effective_patch() == 1);
}

TEST_CASE("checkpoint save, load, save is byte identical") {
  const auto cfg = tiny_config();
  auto st = TrainState<float>::create(cfg);
  trace(st, cfg, tiny_images(4, 40), 2);
  const auto dir = testutil::scratch_dir("ckpt_roundtrip");
  save_checkpoint(st, cfg, dir / "a");
  auto loaded = load_checkpoint(dir / "a");
  save_checkpoint(loaded.state, loaded.config, dir / "b");
  CHECK(file_bytes(dir / "a" / "manifest.json") == file_bytes(dir / "b" / "manifest.json"));
  CHECK(file_bytes(dir / "a" / "tensors.bin") == file_bytes(dir / "b" / "tensors.bin"));
  CHECK(loaded.state.step == 2);
}

TEST_CASE("resume reproduces the uninterrupted loss trace") {
  const auto cfg = tiny_config();
  const auto imgs = tiny_images(4, 50);
  auto full = TrainState<float>::create(cfg);
  const auto reference = trace(full, cfg, imgs);

  auto part = TrainState<float>::create(cfg);
  auto first = trace(part, cfg, imgs, 3);
  const auto dir = testutil::scratch_dir("ckpt_resume");
  save_checkpoint(part, cfg, dir);
  auto resumed = load_checkpoint(dir);
  const auto rest = trace(resumed.state, resumed.config, imgs);
  first.insert(first.end(), rest.begin(), rest.end());
  CHECK(first == reference);
}

TEST_CASE("excluded names keep a fresh initialization") {
  const auto cfg = tiny_config();
  auto st = TrainState<float>::create(cfg);
  trace(st, cfg, tiny_images(4, 60), 2);
  const auto dir = testutil::scratch_dir("ckpt_exclude");
  save_checkpoint(st, cfg, dir);
  auto loaded = load_checkpoint(dir, {"predictor.*"});
  const auto fresh = TrainState<float>::create(cfg).model.online_parameters();
  const auto got = loaded.state.model.online_parameters();
  const auto trained = st.model.online_parameters();
  for (std::size_t i = 0; i < got.size(); ++i) {
    const bool pred = got[i].name.rfind("predictor.", 0) == 0;
    CHECK(bitwise_equal(got[i].var.value(), (pred ? fresh : trained)[i].var.value()));
  }
}

TEST_CASE("checkpoint errors are descriptive") {
  const auto cfg = tiny_config();
  auto st = TrainState<float>::create(cfg);
  const auto dir = testutil::scratch_dir("ckpt_errors");

  SUBCASE("version mismatch") {
    save_checkpoint(st, cfg, dir);
    auto man = nlohmann::json::parse(file_bytes(dir / "manifest.json"));
    man["format_version"] = 99;
    std::ofstream(dir / "manifest.json") << man.dump();
    CHECK_THROWS_WITH_AS(read_checkpoint(dir), doctest::Contains("format_version 99"), CheckpointError);
  }
  SUBCASE("missing tensor") {
    CheckpointBlob blob;
    blob.meta = {{"config", to_json(cfg)}};
    write_checkpoint(dir, blob);
    CHECK_THROWS_WITH_AS(load_checkpoint(dir), doctest::Contains("missing tensors"), CheckpointError);
  }
  SUBCASE("truncated blob") {
    save_checkpoint(st, cfg, dir);
    const auto bytes = file_bytes(dir / "tensors.bin");
    std::ofstream(dir / "tensors.bin", std::ios::binary | std::ios::trunc).write(bytes.data(), 100);
    CHECK_THROWS_WITH_AS(read_checkpoint(dir), doctest::Contains("truncated"), CheckpointError);
  }
  SUBCASE("checksum") {
    save_checkpoint(st, cfg, dir);
    auto bytes = file_bytes(dir / "tensors.bin");
    bytes[5] = static_cast<char>(bytes[5] ^ 0x40);
    std::ofstream(dir / "tensors.bin", std::ios::binary | std::ios::trunc).write(bytes.data(),
                                                                               static_cast<std::streamsize>(bytes.size()));
    CHECK_THROWS_WITH_AS(read_checkpoint(dir), doctest::Contains("checksum"), CheckpointError);
  }
}

TEST_CASE("checkpoint tensors are little-endian float32 in manifest order") {
  CheckpointBlob blob;
  blob.tensors.push_back({"a", Tensor<float>({2}, std::vector<float>{1.0f, -2.5f})});
  blob.tensors.push_back({"b", Tensor<float>({1, 1}, 0.25f)});
  const auto dir = testutil::scratch_dir("ckpt_layout");
  write_checkpoint(dir, blob);
  const auto bytes = file_bytes(dir / "tensors.bin");
  REQUIRE(bytes.size() == 12);
  const unsigned char one[4] = {0x00, 0x00, 0x80, 0x3f};
  CHECK(std::memcmp(bytes.data(), one, 4) == 0);
  const auto man = nlohmann::json::parse(file_bytes(dir / "manifest.json"));
  CHECK(man.at("tensors").at(1).at("offset") == 8);
  CHECK(man.at("tensors").at(1).at("dtype") == "float32");
  CHECK(read_checkpoint(dir).find("b")->tensor.shape() == Shape{1, 1});
}

TEST_CASE("toy model gradient check passes on sampled entries") {
  auto cfg = tiny_config();
  cfg.queries = 3;
  GradCheckOptions opts;
  opts.max_probes = 1;
  const auto r = toy_grad_check(cfg, opts);
  INFO("max rel error " << r.max_rel_error);
  CHECK(r.passed());
}
