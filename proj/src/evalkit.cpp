#include "maskjepa/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>

#include "maskjepa/checkpoint.hpp"
#include "maskjepa/ops.hpp"

namespace mjepa {

namespace {

double sq_dist(const float* a, const float* b, std::size_t c) {
  double d = 0.0;
  for (std::size_t i = 0; i < c; ++i) {
    const double t = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    d += t * t;
  }
  return d;
}

// Nearest centroid per row (ties to the lower id); returns the inertia.
double assign(const Tensor<float>& x, const Tensor<float>& centroids, std::vector<int>& labels,
              std::vector<double>& dist) {
  const std::size_t p = x.dim(0), c = x.dim(1), k = centroids.dim(0);
  double inertia = 0.0;
  for (std::size_t i = 0; i < p; ++i) {
    double best = std::numeric_limits<double>::infinity();
    int best_j = 0;
    for (std::size_t j = 0; j < k; ++j) {
      const double d = sq_dist(x.ptr() + i * c, centroids.ptr() + j * c, c);
      if (d < best) {
        best = d;
        best_j = static_cast<int>(j);
      }
    }
    labels[i] = best_j;
    dist[i] = best;
    inertia += best;
  }
  return inertia;
}

}  // namespace

ClusterResult kmeans(const Tensor<float>& features, std::size_t k, std::size_t max_iters, std::uint64_t seed) {
  if (features.rank() != 2) throw ShapeError("kmeans: expected [P,C] features, got " + shape_str(features.shape()));
  const std::size_t p = features.dim(0), c = features.dim(1);
  if (k < 1) throw std::invalid_argument("kmeans: k must be >= 1");
  if (p < k) {
    throw std::invalid_argument("kmeans: need at least k points (P=" + std::to_string(p) + ", k=" + std::to_string(k) +
                                ")");
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  ClusterResult out;
  out.centroids = Tensor<float>({k, c});
  auto set_centroid = [&](std::size_t j, std::size_t row) {
    std::copy_n(features.ptr() + row * c, c, out.centroids.ptr() + j * c);
  };

  // k-means++ seeding.
  std::vector<double> d2(p, std::numeric_limits<double>::infinity());
  set_centroid(0, std::min(p - 1, static_cast<std::size_t>(unit(rng) * static_cast<double>(p))));
  for (std::size_t j = 1; j < k; ++j) {
    double total = 0.0;
    for (std::size_t i = 0; i < p; ++i) {
      d2[i] = std::min(d2[i], sq_dist(features.ptr() + i * c, out.centroids.ptr() + (j - 1) * c, c));
      total += d2[i];
    }
    std::size_t pick = p - 1;
    if (total > 0.0) {
      double r = unit(rng) * total;
      for (std::size_t i = 0; i < p; ++i) {
        r -= d2[i];
        if (r < 0.0) {
          pick = i;
          break;
        }
      }
    } else {
      pick = std::min(p - 1, static_cast<std::size_t>(unit(rng) * static_cast<double>(p)));
    }
    set_centroid(j, pick);
  }

  std::vector<int> labels(p, -1), previous;
  std::vector<double> dist(p, 0.0);
  bool converged = false;
  for (std::size_t it = 0; it < max_iters; ++it) {
    previous = labels;
    out.inertia = assign(features, out.centroids, labels, dist);
    out.inertia_trace.push_back(out.inertia);
    out.iterations = it + 1;
    if (labels == previous) {
      converged = true;
      break;
    }

    std::vector<double> sums(k * c, 0.0);
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < p; ++i) {
      const auto j = static_cast<std::size_t>(labels[i]);
      ++counts[j];
      for (std::size_t q = 0; q < c; ++q) sums[j * c + q] += features[i * c + q];
    }
    for (std::size_t j = 0; j < k; ++j) {
      if (counts[j] == 0) {
        const auto far = static_cast<std::size_t>(std::max_element(dist.begin(), dist.end()) - dist.begin());
        set_centroid(j, far);
        dist[far] = 0.0;
        continue;
      }
      for (std::size_t q = 0; q < c; ++q) {
        out.centroids[j * c + q] = static_cast<float>(sums[j * c + q] / static_cast<double>(counts[j]));
      }
    }
  }
  if (!converged) {
    out.inertia = assign(features, out.centroids, labels, dist);
    out.inertia_trace.push_back(out.inertia);
  }
  out.labels = std::move(labels);
  return out;
}

Tensor<float> l2_normalize_rows(const Tensor<float>& features) {
  Tensor<float> out = features;
  const std::size_t p = features.dim(0), c = features.dim(1);
  for (std::size_t i = 0; i < p; ++i) {
    double norm = 0.0;
    for (std::size_t q = 0; q < c; ++q) norm += static_cast<double>(out[i * c + q]) * out[i * c + q];
    if (norm == 0.0) continue;
    const double inv = 1.0 / std::sqrt(norm);
    for (std::size_t q = 0; q < c; ++q) out[i * c + q] = static_cast<float>(out[i * c + q] * inv);
  }
  return out;
}

std::vector<int> downsample_labels(const std::vector<std::uint8_t>& labels, std::size_t h, std::size_t w,
                                   std::size_t stride) {
  if (labels.size() != h * w) throw ShapeError("downsample_labels: label count does not match geometry");
  if (stride == 0 || h % stride || w % stride) throw std::invalid_argument("downsample_labels: stride must divide H and W");
  const std::size_t oh = h / stride, ow = w / stride;
  std::vector<int> out(oh * ow);
  std::array<std::size_t, 256> votes{};
  for (std::size_t y = 0; y < oh; ++y) {
    for (std::size_t x = 0; x < ow; ++x) {
      votes.fill(0);
      for (std::size_t dy = 0; dy < stride; ++dy) {
        for (std::size_t dx = 0; dx < stride; ++dx) ++votes[labels[(y * stride + dy) * w + x * stride + dx]];
      }
      out[y * ow + x] = static_cast<int>(std::max_element(votes.begin(), votes.end()) - votes.begin());
    }
  }
  return out;
}

std::vector<int> hungarian(const std::vector<std::vector<double>>& cost) {
  const std::size_t n = cost.size();
  for (const auto& row : cost) {
    if (row.size() != n) throw std::invalid_argument("hungarian: cost matrix must be square");
  }
  // Potentials formulation, 1-based with a virtual column 0.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> match(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    match[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<bool> used(n + 1, false);
    do {
      used[j0] = true;
      const std::size_t i0 = match[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[match[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (match[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      match[j0] = match[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> row_to_col(n, 0);
  for (std::size_t j = 1; j <= n; ++j) row_to_col[match[j] - 1] = static_cast<int>(j - 1);
  return row_to_col;
}

double matched_accuracy(const std::vector<int>& pred, const std::vector<int>& gt, std::size_t k) {
  if (pred.size() != gt.size()) throw ShapeError("matched_accuracy: prediction and ground truth sizes differ");
  if (pred.empty()) return 0.0;
  std::size_t n = k;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] < 0 || gt[i] < 0) throw std::invalid_argument("matched_accuracy: negative label");
    n = std::max({n, static_cast<std::size_t>(pred[i]) + 1, static_cast<std::size_t>(gt[i]) + 1});
  }
  std::vector<std::vector<double>> counts(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < pred.size(); ++i) counts[static_cast<std::size_t>(pred[i])][static_cast<std::size_t>(gt[i])] += 1.0;
  std::vector<std::vector<double>> cost = counts;
  for (auto& row : cost) {
    for (auto& v : row) v = -v;
  }
  const std::vector<int> assignment = hungarian(cost);
  double agree = 0.0;
  for (std::size_t r = 0; r < n; ++r) agree += counts[r][static_cast<std::size_t>(assignment[r])];
  return agree / static_cast<double>(pred.size());
}

Tensor<float> extract_features(const Encoder<float>& encoder, const std::vector<Tensor<float>>& images, int stride,
                               std::size_t batch) {
  if (images.empty()) throw std::invalid_argument("extract_features: no images");
  NoGradGuard no_grad;
  const Shape& s = images.front().shape();
  const std::size_t per = images.front().numel();
  Tensor<float> out;
  std::size_t rows = 0, c = 0, hw = 0;
  for (std::size_t start = 0; start < images.size(); start += batch) {
    const std::size_t count = std::min(batch, images.size() - start);
    Tensor<float> x({count, s[0], s[1], s[2]});
    for (std::size_t i = 0; i < count; ++i) std::copy_n(images[start + i].ptr(), per, x.ptr() + i * per);
    const FeaturePyramid<float> pyr = encoder.forward(Var<float>::constant(std::move(x)));
    const Tensor<float>& f = pyr.at(stride).value();
    if (out.numel() == 0) {
      c = f.dim(1);
      hw = f.dim(2) * f.dim(3);
      out = Tensor<float>({images.size() * hw, c});
    }
    for (std::size_t n = 0; n < count; ++n) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        const float* src = f.ptr() + (n * c + ch) * hw;
        for (std::size_t q = 0; q < hw; ++q) out[(rows + q) * c + ch] = src[q];
      }
      rows += hw;
    }
  }
  return out;
}

ProbeResult score_segmentation(const std::vector<int>& pred, const std::vector<int>& gt, std::size_t classes) {
  if (pred.size() != gt.size()) throw ShapeError("score_segmentation: prediction and ground truth sizes differ");
  std::vector<std::size_t> tp(classes, 0), fp(classes, 0), fn(classes, 0), present(classes, 0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const auto g = static_cast<std::size_t>(gt[i]), p = static_cast<std::size_t>(pred[i]);
    if (g >= classes || p >= classes) throw std::invalid_argument("score_segmentation: label out of range");
    ++present[g];
    if (g == p) {
      ++tp[g];
      ++correct;
    } else {
      ++fp[p];
      ++fn[g];
    }
  }
  ProbeResult r;
  r.iou.resize(classes);
  double sum = 0.0;
  std::size_t defined = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    if (present[c] == 0) continue;
    const double iou = static_cast<double>(tp[c]) / static_cast<double>(tp[c] + fp[c] + fn[c]);
    r.iou[c] = iou;
    sum += iou;
    ++defined;
  }
  r.miou = defined ? sum / static_cast<double>(defined) : 0.0;
  r.pixel_accuracy = pred.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(pred.size());
  return r;
}

ProbeResult linear_probe(const Tensor<float>& train_features, const std::vector<int>& train_labels,
                         const Tensor<float>& eval_features, const std::vector<int>& eval_labels,
                         const ProbeConfig& config) {
  if (train_features.rank() != 2 || eval_features.rank() != 2 || train_features.dim(1) != eval_features.dim(1)) {
    throw_shape_error("linear_probe", train_features.shape(), eval_features.shape());
  }
  if (train_labels.size() != train_features.dim(0) || eval_labels.size() != eval_features.dim(0)) {
    throw ShapeError("linear_probe: label count does not match feature rows");
  }
  const std::size_t c = train_features.dim(1), p = train_features.dim(0);

  std::vector<double> mean(c, 0.0), var(c, 0.0);
  for (std::size_t i = 0; i < p; ++i) {
    for (std::size_t q = 0; q < c; ++q) mean[q] += train_features[i * c + q];
  }
  for (auto& m : mean) m /= static_cast<double>(p);
  for (std::size_t i = 0; i < p; ++i) {
    for (std::size_t q = 0; q < c; ++q) {
      const double d = train_features[i * c + q] - mean[q];
      var[q] += d * d;
    }
  }
  auto standardize = [&](const Tensor<float>& f) {
    Tensor<float> out = f;
    for (std::size_t i = 0; i < f.dim(0); ++i) {
      for (std::size_t q = 0; q < c; ++q) {
        const double sd = std::sqrt(var[q] / static_cast<double>(p)) + 1e-6;
        out[i * c + q] = static_cast<float>((f[i * c + q] - mean[q]) / sd);
      }
    }
    return out;
  };
  const Var<float> x_train = Var<float>::constant(standardize(train_features));

  std::mt19937_64 rng(config.seed);
  Var<float> weight = make_param<float>({config.classes, c});
  init_normal(weight, 0.01, rng);
  Var<float> bias = make_param<float>({config.classes});
  const ParameterList<float> params{{"probe.weight", weight, true}, {"probe.bias", bias, true}};
  AdamW<float> adam(0.9, 0.999, 1e-8, 0.0);
  for (std::size_t step = 0; step < config.steps; ++step) {
    zero_grads(params);
    backward(ops::softmax_cross_entropy(ops::linear(x_train, weight, bias), train_labels));
    adam.step(params, config.lr);
  }

  NoGradGuard no_grad;
  const Tensor<float> logits = ops::linear(Var<float>::constant(standardize(eval_features)), weight, bias).value();
  std::vector<int> pred(eval_features.dim(0));
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const float* row = logits.ptr() + i * config.classes;
    pred[i] = static_cast<int>(std::max_element(row, row + config.classes) - row);
  }
  return score_segmentation(pred, eval_labels, config.classes);
}

Transplanted transplant(const std::filesystem::path& checkpoint, bool include_predictor, std::uint64_t fresh_seed) {
  const std::vector<std::string> exclude = include_predictor ? std::vector<std::string>{}
                                                             : std::vector<std::string>{"predictor.*"};
  LoadedCheckpoint loaded = load_checkpoint(checkpoint, exclude);
  Transplanted out{loaded.config, std::move(loaded.state.model), {}};
  if (!include_predictor) out.model.reinit_predictor(fresh_seed);
  for (const auto& p : out.model.online_parameters()) {
    const bool fresh = !include_predictor && glob_match("predictor.*", p.name);
    (fresh ? out.report.reinitialized : out.report.loaded).push_back(p.name);
  }
  return out;
}

std::vector<std::string> export_checkpoint(const std::filesystem::path& checkpoint,
                                           const std::vector<std::string>& exclude,
                                           const std::filesystem::path& out) {
  CheckpointBlob blob = read_checkpoint(checkpoint);
  auto matches = [&](const std::string& name) {
    return std::any_of(exclude.begin(), exclude.end(), [&](const std::string& g) { return glob_match(g, name); });
  };
  std::vector<std::string> dropped;
  std::vector<NamedTensor> kept;
  for (auto& nt : blob.tensors) {
    std::string base = nt.name;
    for (const char* prefix : {"optim.m.", "optim.v."}) {
      if (base.rfind(prefix, 0) == 0) base = base.substr(std::char_traits<char>::length(prefix));
    }
    if (base.rfind("target.", 0) != 0 && matches(base)) {
      dropped.push_back(nt.name);
    } else {
      kept.push_back(std::move(nt));
    }
  }
  blob.tensors = std::move(kept);
  nlohmann::json recorded = blob.meta.value("excluded", nlohmann::json::array());
  for (const auto& g : exclude) recorded.push_back(g);
  blob.meta["excluded"] = recorded;
  write_checkpoint(out, blob);
  return dropped;
}

std::array<float, 3> cluster_color(int id) {
  static constexpr std::array<std::array<float, 3>, 10> palette{{{0.12f, 0.47f, 0.71f},
                                                                 {1.00f, 0.50f, 0.05f},
                                                                 {0.17f, 0.63f, 0.17f},
                                                                 {0.84f, 0.15f, 0.16f},
                                                                 {0.58f, 0.40f, 0.74f},
                                                                 {0.55f, 0.34f, 0.29f},
                                                                 {0.89f, 0.47f, 0.76f},
                                                                 {0.50f, 0.50f, 0.50f},
                                                                 {0.74f, 0.74f, 0.13f},
                                                                 {0.09f, 0.75f, 0.81f}}};
  return palette[static_cast<std::size_t>(std::abs(id)) % palette.size()];
}

Tensor<float> colorize(const std::vector<int>& labels, std::size_t h, std::size_t w) {
  if (labels.size() != h * w) throw ShapeError("colorize: label count does not match geometry");
  Tensor<float> img({3, h, w});
  for (std::size_t i = 0; i < h * w; ++i) {
    const auto col = cluster_color(labels[i]);
    for (std::size_t ch = 0; ch < 3; ++ch) img[ch * h * w + i] = col[ch];
  }
  return img;
}

}  // namespace mjepa
