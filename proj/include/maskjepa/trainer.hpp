#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "maskjepa/gradcheck.hpp"
#include "maskjepa/model.hpp"

namespace mjepa {

struct TrainConfig {
  // Model geometry.
  std::size_t image_size = 64;
  std::size_t channels = 64;
  int s_i1 = 8;
  std::size_t blocks_l = 9;
  std::size_t blocks_m = 2;
  std::size_t queries = 100;
  int heads = 4;
  bool attn_scale = true;
  bool freeze_backbone = false;

  // Objective.
  double sigma = 0.4;
  double ratio = 0.5;
  std::size_t patch = 8;  // requested patch side in F_{i1} cells
  DenoiseTarget denoise_mode = DenoiseTarget::gaussian_noise;
  bool use_recon = true;
  bool use_denoise = true;

  // Optimisation.
  double lr = 1e-4;
  double weight_decay = 0.05;
  std::size_t batch_size = 8;
  std::size_t total_steps = 200;
  std::size_t warmup_steps = 0;
  double clip_grad_norm = 0.0;  // 0 = off
  double tau_start = 0.996;
  double tau_end = 1.0;
  std::uint64_t seed = 0;

  ModelConfig model_config() const;
  LossSwitches loss_switches() const;
  // Side of the F_{i1} grid for the configured image size.
  std::size_t feature_side() const { return image_size / static_cast<std::size_t>(s_i1); }
  // Largest divisor of the F_{i1} grid side not above `patch` that still
  // leaves >= 4 patches per side (1 if none does).
  std::size_t effective_patch() const;
  void validate() const;
};

nlohmann::json to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& j);

// `key = value` lines ('#' starts a comment) over the keys of to_json.
// Values parse as JSON when they can, else as plain strings. Unknown keys and
// malformed lines throw std::invalid_argument naming the line.
nlohmann::json parse_config_text(const std::string& text);
TrainConfig apply_config(const TrainConfig& base, const nlohmann::json& overrides);

// τ = τ_start + (τ_end - τ_start) * step / total, clamped to τ_end past the end.
double tau_schedule(std::size_t step, std::size_t total_steps, double tau_start = 0.996, double tau_end = 1.0);

// θ̄ <- τ θ̄ + (1 - τ) θ, matched by name. Throws if the name sets differ.
template <typename T>
void ema_update(const ParameterList<T>& target, const ParameterList<T>& online, double tau);

// Decoupled weight decay Adam. Non-trainable parameters and parameters
// without a gradient are never touched.
template <typename T>
class AdamW {
 public:
  struct Moments {
    Tensor<T> m;
    Tensor<T> v;
  };

  AdamW() = default;
  AdamW(double beta1, double beta2, double eps, double weight_decay)
      : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

  void step(const ParameterList<T>& params, double lr);

  std::uint64_t steps_taken() const { return t_; }
  void set_steps_taken(std::uint64_t t) { t_ = t; }
  std::map<std::string, Moments>& moments() { return moments_; }
  const std::map<std::string, Moments>& moments() const { return moments_; }

 private:
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8, weight_decay_ = 0.0;
  std::uint64_t t_ = 0;
  std::map<std::string, Moments> moments_;
};

class NonFiniteLossError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename T>
struct TrainState {
  ModelState<T> model;
  AdamW<T> optimizer;
  std::uint64_t step = 0;
  std::mt19937_64 rng;
  double smoothed_loss = 0.0;  // EMA(0.9) of l_final; 0 before the first step

  static TrainState create(const TrainConfig& config);
};

// Draws noise then one mask per image from `rng`.
template <typename T>
StepInputs<T> draw_step_inputs(const TrainConfig& config, std::size_t batch, std::mt19937_64& rng);

// Learning rate at a 0-based step (linear warmup when configured).
double learning_rate_at(const TrainConfig& config, std::uint64_t step);

// One optimisation step: noise, target/online forwards, masking, losses,
// backward, AdamW on trainable θ, then EMA of θ̄ with τ(step).
template <typename T>
LossReport train_step(const Tensor<T>& batch, TrainState<T>& state, const TrainConfig& config);

// [B,3,H,W] batch of distinct images drawn with `rng` (with replacement when B > n).
Tensor<float> sample_batch(const std::vector<Tensor<float>>& images, std::size_t batch, std::mt19937_64& rng);

struct MetricsRow {
  std::uint64_t step = 0;
  LossReport loss;
  double tau = 0.0;
  double lr = 0.0;
};

std::string metrics_header();
std::string format_metrics_row(const MetricsRow& row);

// Runs steps until state.step == config.total_steps (or `max_steps` more),
// sampling batches from `images`. The callback sees every finished step.
void train_loop(TrainState<float>& state, const TrainConfig& config, const std::vector<Tensor<float>>& images,
                const std::function<void(const MetricsRow&)>& on_step, std::size_t max_steps = SIZE_MAX);

// Checkpoint directory: manifest.json + tensors.bin.
void save_checkpoint(const TrainState<float>& state, const TrainConfig& config, const std::filesystem::path& dir);

struct LoadedCheckpoint {
  TrainConfig config;
  TrainState<float> state;
};
// `exclude` globs (fnmatch) name online parameters to skip; skipped ones keep
// the fresh initialization derived from the stored config seed.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir, const std::vector<std::string>& exclude = {});

// Finite-difference check of the full L_final graph in 64-bit on one random
// image of the configured geometry.
GradCheckReport toy_grad_check(const TrainConfig& config, const GradCheckOptions& options);

}  // namespace mjepa
