#include "maskjepa/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <set>
#include <sstream>

#include "maskjepa/checkpoint.hpp"

namespace mjepa {

ModelConfig TrainConfig::model_config() const {
  ModelConfig m;
  m.encoder.channels = channels;
  m.encoder.s_i1 = s_i1;
  m.encoder.s_last = 4;
  m.encoder.freeze_backbone = freeze_backbone;
  m.predictor.cross_blocks = blocks_l;
  m.predictor.self_blocks = blocks_m;
  m.predictor.queries = queries;
  m.predictor.heads = heads;
  m.predictor.channels = channels;
  m.predictor.attn_scale = attn_scale;
  return m;
}

LossSwitches TrainConfig::loss_switches() const { return {use_recon, use_denoise, denoise_mode}; }

std::size_t TrainConfig::effective_patch() const {
  const std::size_t side = feature_side();
  for (std::size_t d = std::min(patch, side); d >= 1; --d) {
    if (side % d == 0 && side / d >= 4) return d;
  }
  return 1;
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("config: " + msg); };
  if (image_size == 0 || image_size % 32) fail("image size must be a positive multiple of 32");
  if (channels == 0 || channels % 4) fail("channels must be a positive multiple of 4");
  if (heads < 1 || channels % static_cast<std::size_t>(heads)) fail("channels must be divisible by heads");
  if (s_i1 != 8 && s_i1 != 16 && s_i1 != 32) fail("s_i1 must be one of 8, 16, 32");
  if (blocks_l < 1) fail("L (cross-attention blocks) must be >= 1");
  if (queries < 1) fail("N (queries) must be >= 1");
  if (!(sigma >= 0.0)) fail("sigma must be >= 0");
  if (!(ratio >= 0.0 && ratio <= 1.0)) fail("masking ratio must lie in [0,1]");
  if (patch < 1) fail("patch must be >= 1");
  if (!use_recon && !use_denoise) fail("both losses disabled; nothing to train");
  if (!(lr > 0.0)) fail("lr must be > 0");
  if (!(weight_decay >= 0.0)) fail("weight decay must be >= 0");
  if (batch_size < 1) fail("batch size must be >= 1");
  if (!(tau_start > 0.0 && tau_start <= tau_end && tau_end <= 1.0)) fail("need 0 < tau_start <= tau_end <= 1");
  if (!(clip_grad_norm >= 0.0)) fail("clip_grad_norm must be >= 0");
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"image_size", c.image_size},
          {"channels", c.channels},
          {"s_i1", c.s_i1},
          {"s_last", 4},
          {"blocks_l", c.blocks_l},
          {"blocks_m", c.blocks_m},
          {"queries", c.queries},
          {"heads", c.heads},
          {"attn_scale", c.attn_scale},
          {"freeze_backbone", c.freeze_backbone},
          {"sigma", c.sigma},
          {"ratio", c.ratio},
          {"patch", c.patch},
          {"patch_effective", c.effective_patch()},
          {"denoise_target", to_string(c.denoise_mode)},
          {"use_recon", c.use_recon},
          {"use_denoise", c.use_denoise},
          {"lr", c.lr},
          {"weight_decay", c.weight_decay},
          {"batch_size", c.batch_size},
          {"total_steps", c.total_steps},
          {"warmup_steps", c.warmup_steps},
          {"clip_grad_norm", c.clip_grad_norm},
          {"tau_start", c.tau_start},
          {"tau_end", c.tau_end},
          {"seed", c.seed}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.image_size = j.value("image_size", c.image_size);
  c.channels = j.value("channels", c.channels);
  c.s_i1 = j.value("s_i1", c.s_i1);
  c.blocks_l = j.value("blocks_l", c.blocks_l);
  c.blocks_m = j.value("blocks_m", c.blocks_m);
  c.queries = j.value("queries", c.queries);
  c.heads = j.value("heads", c.heads);
  c.attn_scale = j.value("attn_scale", c.attn_scale);
  c.freeze_backbone = j.value("freeze_backbone", c.freeze_backbone);
  c.sigma = j.value("sigma", c.sigma);
  c.ratio = j.value("ratio", c.ratio);
  c.patch = j.value("patch", c.patch);
  c.denoise_mode = parse_denoise_target(j.value("denoise_target", to_string(c.denoise_mode)));
  c.use_recon = j.value("use_recon", c.use_recon);
  c.use_denoise = j.value("use_denoise", c.use_denoise);
  c.lr = j.value("lr", c.lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.total_steps = j.value("total_steps", c.total_steps);
  c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
  c.clip_grad_norm = j.value("clip_grad_norm", c.clip_grad_norm);
  c.tau_start = j.value("tau_start", c.tau_start);
  c.tau_end = j.value("tau_end", c.tau_end);
  c.seed = j.value("seed", c.seed);
  return c;
}

nlohmann::json parse_config_text(const std::string& text) {
  const nlohmann::json known = to_json(TrainConfig{});
  nlohmann::json out = nlohmann::json::object();
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return std::string{};
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line.substr(0, line.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (!known.contains(key) || key == "patch_effective" || key == "s_last") {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    }
    nlohmann::json parsed = nlohmann::json::parse(value, nullptr, false);
    out[key] = parsed.is_discarded() ? nlohmann::json(value) : parsed;
  }
  return out;
}

TrainConfig apply_config(const TrainConfig& base, const nlohmann::json& overrides) {
  nlohmann::json merged = to_json(base);
  for (const auto& [key, value] : overrides.items()) merged[key] = value;
  try {
    return train_config_from_json(merged);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("config: bad value type: ") + e.what());
  }
}

double tau_schedule(std::size_t step, std::size_t total_steps, double tau_start, double tau_end) {
  if (total_steps == 0 || step >= total_steps) return tau_end;
  return tau_start + (tau_end - tau_start) * static_cast<double>(step) / static_cast<double>(total_steps);
}

template <typename T>
void ema_update(const ParameterList<T>& target, const ParameterList<T>& online, double tau) {
  std::map<std::string, const Parameter<T>*> by_name;
  for (const auto& p : online) by_name[p.name] = &p;
  std::set<std::string> target_names;
  std::vector<std::string> missing;
  for (const auto& p : target) {
    target_names.insert(p.name);
    if (!by_name.count(p.name)) missing.push_back("-" + p.name);
  }
  for (const auto& [name, _] : by_name) {
    if (!target_names.count(name)) missing.push_back("+" + name);
  }
  if (!missing.empty()) {
    std::string msg = "ema_update: parameter name sets differ:";
    for (const auto& m : missing) msg += " " + m;
    throw std::invalid_argument(msg);
  }
  const T keep = static_cast<T>(tau);
  const T take = static_cast<T>(1.0 - tau);
  for (const auto& p : target) {
    Var<T> tv = p.var;
    const Tensor<T>& src = by_name.at(p.name)->var.value();
    Tensor<T>& dst = tv.mutable_value();
    if (src.shape() != dst.shape()) throw_shape_error("ema_update " + p.name, dst.shape(), src.shape());
    for (std::size_t i = 0; i < dst.numel(); ++i) dst[i] = keep * dst[i] + take * src[i];
  }
}

template <typename T>
void AdamW<T>::step(const ParameterList<T>& params, double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  const T b1 = static_cast<T>(beta1_), b2 = static_cast<T>(beta2_);
  const T step_size = static_cast<T>(lr / bc1);
  const T inv_bc2_sqrt = static_cast<T>(1.0 / std::sqrt(bc2));
  const T eps = static_cast<T>(eps_);
  const T decay = static_cast<T>(1.0 - lr * weight_decay_);
  for (const auto& p : params) {
    if (!p.trainable || !p.var.has_grad()) continue;
    Var<T> var = p.var;
    Tensor<T>& value = var.mutable_value();
    const Tensor<T>& grad = var.grad();
    auto [it, inserted] = moments_.try_emplace(p.name);
    Moments& mo = it->second;
    if (inserted) {
      mo.m = Tensor<T>(value.shape());
      mo.v = Tensor<T>(value.shape());
    }
    const bool decayed = value.rank() >= 2;
    for (std::size_t i = 0; i < value.numel(); ++i) {
      const T g = grad[i];
      mo.m[i] = b1 * mo.m[i] + (T(1) - b1) * g;
      mo.v[i] = b2 * mo.v[i] + (T(1) - b2) * g * g;
      if (decayed) value[i] *= decay;
      value[i] -= step_size * mo.m[i] / (std::sqrt(mo.v[i]) * inv_bc2_sqrt + eps);
    }
  }
}

template <typename T>
TrainState<T> TrainState<T>::create(const TrainConfig& config) {
  config.validate();
  TrainState state;
  state.model = ModelState<T>::create(config.model_config(), config.seed);
  state.optimizer = AdamW<T>(0.9, 0.999, 1e-8, config.weight_decay);
  // Separate stream for data, noise and masks so it does not alias the init stream.
  state.rng.seed(config.seed ^ 0x9E3779B97F4A7C15ULL);
  return state;
}

template <typename T>
StepInputs<T> draw_step_inputs(const TrainConfig& config, std::size_t batch, std::mt19937_64& rng) {
  StepInputs<T> in;
  in.noise = make_batch_noise<T>(batch, config.image_size, config.image_size, 4, config.sigma, rng);
  if (config.use_recon) {
    const std::size_t side = config.feature_side();
    for (std::size_t n = 0; n < batch; ++n) {
      in.masks.push_back(sample_mask_for_feature(side, side, config.effective_patch(), config.ratio, rng));
    }
  }
  return in;
}

double learning_rate_at(const TrainConfig& config, std::uint64_t step) {
  if (config.warmup_steps == 0) return config.lr;
  const double frac = static_cast<double>(step + 1) / static_cast<double>(config.warmup_steps);
  return config.lr * std::min(1.0, frac);
}

namespace {

template <typename T>
void clip_gradients(const ParameterList<T>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    if (!p.trainable || !p.var.has_grad()) continue;
    for (T g : p.var.grad().data()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(sq);
  if (norm <= max_norm || norm == 0.0) return;
  const T factor = static_cast<T>(max_norm / norm);
  for (const auto& p : params) {
    if (!p.trainable || !p.var.has_grad()) continue;
    Var<T> v = p.var;
    for (auto& g : v.mutable_grad().storage()) g *= factor;
  }
}

}  // namespace

template <typename T>
LossReport train_step(const Tensor<T>& batch, TrainState<T>& state, const TrainConfig& config) {
  check_input_geometry(batch.shape());
  const StepInputs<T> inputs = draw_step_inputs<T>(config, batch.dim(0), state.rng);
  const ParameterList<T> online = state.model.online_parameters();
  zero_grads(online);

  LossReport report;
  report.denoise_mode = config.denoise_mode;
  {
    LossGraph<T> graph = compute_losses(state.model, batch, inputs, config.loss_switches());
    report.l_recon = graph.l_recon.defined() ? static_cast<double>(graph.l_recon.item()) : 0.0;
    report.l_denoise = graph.l_denoise.defined() ? static_cast<double>(graph.l_denoise.item()) : 0.0;
    report.l_final = static_cast<double>(graph.l_final.item());
    report.masked_cell_count = graph.masked_cells;
    if (!std::isfinite(report.l_final) || !std::isfinite(report.l_recon) || !std::isfinite(report.l_denoise)) {
      std::ostringstream msg;
      msg << "non-finite loss at step " << state.step + 1 << ": l_recon=" << report.l_recon
          << " l_denoise=" << report.l_denoise << " l_final=" << report.l_final;
      throw NonFiniteLossError(msg.str());
    }
    backward(graph.l_final);
  }

  if (config.clip_grad_norm > 0.0) clip_gradients(online, config.clip_grad_norm);
  state.optimizer.step(online, learning_rate_at(config, state.step));
  ema_update(state.model.target_parameters(), state.model.online.parameters(),
             tau_schedule(state.step, config.total_steps, config.tau_start, config.tau_end));
  zero_grads(online);

  ++state.step;
  state.smoothed_loss = state.step == 1 ? report.l_final : 0.9 * state.smoothed_loss + 0.1 * report.l_final;
  return report;
}

Tensor<float> sample_batch(const std::vector<Tensor<float>>& images, std::size_t batch, std::mt19937_64& rng) {
  if (images.empty()) throw std::invalid_argument("sample_batch: empty dataset");
  const Shape& s = images.front().shape();
  const std::size_t per = images.front().numel();
  Tensor<float> out({batch, s.at(0), s.at(1), s.at(2)});
  std::vector<std::size_t> order(images.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t b = 0; b < batch; ++b) {
    std::size_t idx;
    if (batch <= images.size()) {
      std::uniform_int_distribution<std::size_t> pick(b, images.size() - 1);
      std::swap(order[b], order[pick(rng)]);
      idx = order[b];
    } else {
      std::uniform_int_distribution<std::size_t> pick(0, images.size() - 1);
      idx = pick(rng);
    }
    if (images[idx].shape() != s) throw_shape_error("sample_batch", s, images[idx].shape());
    std::copy_n(images[idx].ptr(), per, out.ptr() + b * per);
  }
  return out;
}

std::string metrics_header() { return "step,l_recon,l_denoise,l_final,tau,lr"; }

std::string format_metrics_row(const MetricsRow& row) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%llu,%.9g,%.9g,%.9g,%.12g,%.12g", static_cast<unsigned long long>(row.step),
                row.loss.l_recon, row.loss.l_denoise, row.loss.l_final, row.tau, row.lr);
  return buf;
}

void train_loop(TrainState<float>& state, const TrainConfig& config, const std::vector<Tensor<float>>& images,
                const std::function<void(const MetricsRow&)>& on_step, std::size_t max_steps) {
  std::size_t done = 0;
  while (state.step < config.total_steps && done < max_steps) {
    const Tensor<float> batch = sample_batch(images, config.batch_size, state.rng);
    MetricsRow row;
    row.tau = tau_schedule(state.step, config.total_steps, config.tau_start, config.tau_end);
    row.lr = learning_rate_at(config, state.step);
    row.loss = train_step(batch, state, config);
    row.step = state.step;
    if (on_step) on_step(row);
    ++done;
  }
}

namespace {
const std::string kTargetPrefix = "target.";
const std::string kMomentM = "optim.m.";
const std::string kMomentV = "optim.v.";
}  // namespace

void save_checkpoint(const TrainState<float>& state, const TrainConfig& config, const std::filesystem::path& dir) {
  CheckpointBlob blob;
  std::ostringstream rng_text;
  rng_text << state.rng;
  blob.meta = {{"kind", "train_state"},
               {"step", state.step},
               {"optimizer_steps", state.optimizer.steps_taken()},
               {"rng_state", rng_text.str()},
               {"smoothed_loss", state.smoothed_loss},
               {"config", to_json(config)}};
  for (const auto& p : state.model.online_parameters()) blob.tensors.push_back({p.name, p.var.value()});
  for (const auto& p : state.model.target_parameters()) blob.tensors.push_back({kTargetPrefix + p.name, p.var.value()});
  for (const auto& [name, mo] : state.optimizer.moments()) {
    blob.tensors.push_back({kMomentM + name, mo.m});
    blob.tensors.push_back({kMomentV + name, mo.v});
  }
  write_checkpoint(dir, blob);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir, const std::vector<std::string>& exclude) {
  const CheckpointBlob blob = read_checkpoint(dir);
  if (!blob.meta.contains("config")) throw CheckpointError("checkpoint: manifest has no config echo");
  LoadedCheckpoint out{train_config_from_json(blob.meta.at("config")), {}};
  out.state = TrainState<float>::create(out.config);

  std::vector<std::string> missing;
  auto restore = [&](const std::string& stored_name, Var<float> var) {
    const NamedTensor* nt = blob.find(stored_name);
    if (!nt) {
      missing.push_back(stored_name);
      return;
    }
    if (nt->tensor.shape() != var.shape()) throw_shape_error("load_checkpoint " + stored_name, var.shape(), nt->tensor.shape());
    var.mutable_value() = nt->tensor;
  };
  // Exported checkpoints record the globs they dropped; those names stay fresh.
  std::vector<std::string> globs = exclude;
  if (blob.meta.contains("excluded")) {
    for (const auto& g : blob.meta.at("excluded")) globs.push_back(g.get<std::string>());
  }
  auto excluded = [&](const std::string& name) {
    return std::any_of(globs.begin(), globs.end(), [&](const std::string& g) { return glob_match(g, name); });
  };
  for (const auto& p : out.state.model.online_parameters()) {
    if (!excluded(p.name)) restore(p.name, p.var);
  }
  for (const auto& p : out.state.model.target_parameters()) restore(kTargetPrefix + p.name, p.var);
  if (!missing.empty()) {
    std::string msg = "checkpoint: missing tensors:";
    for (const auto& m : missing) msg += " " + m;
    throw CheckpointError(msg);
  }

  for (const auto& nt : blob.tensors) {
    const bool is_m = nt.name.rfind(kMomentM, 0) == 0, is_v = nt.name.rfind(kMomentV, 0) == 0;
    if ((is_m || is_v) && excluded(nt.name.substr(kMomentM.size()))) continue;
    if (is_m) {
      out.state.optimizer.moments()[nt.name.substr(kMomentM.size())].m = nt.tensor;
    } else if (is_v) {
      out.state.optimizer.moments()[nt.name.substr(kMomentV.size())].v = nt.tensor;
    }
  }
  for (const auto& [name, mo] : out.state.optimizer.moments()) {
    if (mo.m.shape() != mo.v.shape()) throw CheckpointError("checkpoint: optimizer moments incomplete for " + name);
  }
  out.state.step = blob.meta.value("step", std::uint64_t{0});
  out.state.optimizer.set_steps_taken(blob.meta.value("optimizer_steps", std::uint64_t{0}));
  out.state.smoothed_loss = blob.meta.value("smoothed_loss", 0.0);
  if (blob.meta.contains("rng_state")) {
    std::istringstream rng_text(blob.meta.at("rng_state").get<std::string>());
    rng_text >> out.state.rng;
    if (!rng_text) throw CheckpointError("checkpoint: malformed rng_state");
  }
  return out;
}

template void ema_update(const ParameterList<float>&, const ParameterList<float>&, double);
template void ema_update(const ParameterList<double>&, const ParameterList<double>&, double);
template class AdamW<float>;
template class AdamW<double>;
template struct TrainState<float>;
template struct TrainState<double>;
template StepInputs<float> draw_step_inputs(const TrainConfig&, std::size_t, std::mt19937_64&);
template StepInputs<double> draw_step_inputs(const TrainConfig&, std::size_t, std::mt19937_64&);
template LossReport train_step(const Tensor<float>&, TrainState<float>&, const TrainConfig&);
template LossReport train_step(const Tensor<double>&, TrainState<double>&, const TrainConfig&);

GradCheckReport toy_grad_check(const TrainConfig& config, const GradCheckOptions& options) {
  config.validate();
  ModelState<double> model = ModelState<double>::create(config.model_config(), config.seed);
  std::mt19937_64 rng(config.seed + 1);
  Tensor<double> image({1, 3, config.image_size, config.image_size});
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (auto& v : image.storage()) v = unit(rng);
  const StepInputs<double> inputs = draw_step_inputs<double>(config, 1, rng);
  ParameterList<double> params;
  for (const auto& p : model.online_parameters()) {
    if (p.trainable) params.push_back(p);
  }
  auto loss = [&] { return compute_losses(model, image, inputs, config.loss_switches()).l_final; };
  return grad_check(loss, params, options);
}

}  // namespace mjepa
