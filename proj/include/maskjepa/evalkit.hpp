#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "maskjepa/trainer.hpp"

namespace mjepa {

struct ClusterResult {
  std::vector<int> labels;  // one per feature row, in 0..k-1
  Tensor<float> centroids;  // [k, C]
  double inertia = 0.0;     // sum of squared distances to the assigned centroid
  std::vector<double> inertia_trace;  // after every Lloyd iteration
  std::size_t iterations = 0;
};

// k-means++ seeding, then Lloyd until the assignment stops changing or
// `max_iters`. An emptied cluster is re-seeded at the point farthest from its
// centroid. Distances are accumulated in double.
ClusterResult kmeans(const Tensor<float>& features, std::size_t k, std::size_t max_iters, std::uint64_t seed);

// Row-wise unit-norm copy (zero rows stay zero).
Tensor<float> l2_normalize_rows(const Tensor<float>& features);

// Majority class per stride x stride cell; ties go to the lowest class id.
std::vector<int> downsample_labels(const std::vector<std::uint8_t>& labels, std::size_t h, std::size_t w,
                                   std::size_t stride);

// Minimum-cost assignment of rows to columns of a square matrix. Returns the
// column chosen for every row.
std::vector<int> hungarian(const std::vector<std::vector<double>>& cost);

// Best one-to-one mapping from cluster ids to classes, as a fraction of pixels.
double matched_accuracy(const std::vector<int>& pred, const std::vector<int>& gt, std::size_t k);

// F at `stride` of every image, as rows [B*h*w, C] in image-major, row-major order.
Tensor<float> extract_features(const Encoder<float>& encoder, const std::vector<Tensor<float>>& images,
                               int stride = 4, std::size_t batch = 8);

struct ProbeConfig {
  std::size_t classes = 5;
  std::size_t steps = 500;
  double lr = 1e-2;
  std::uint64_t seed = 0;
};

struct ProbeResult {
  std::vector<std::optional<double>> iou;  // empty when the class never occurs in eval labels
  double miou = 0.0;                       // mean over the defined entries
  double pixel_accuracy = 0.0;
};

// 1x1 classifier on standardized frozen features, full-batch Adam on
// cross-entropy; evaluated on held-out rows. Features are only read.
ProbeResult linear_probe(const Tensor<float>& train_features, const std::vector<int>& train_labels,
                         const Tensor<float>& eval_features, const std::vector<int>& eval_labels,
                         const ProbeConfig& config);

// Per-class IoU of predictions against ground truth.
ProbeResult score_segmentation(const std::vector<int>& pred, const std::vector<int>& gt, std::size_t classes);

struct TransplantReport {
  std::vector<std::string> loaded;
  std::vector<std::string> reinitialized;
};

struct Transplanted {
  TrainConfig config;
  ModelState<float> model;
  TransplantReport report;
};

// Loads backbone and pixel decoder; the predictor too when `include_predictor`,
// otherwise it is re-initialized from `fresh_seed`.
Transplanted transplant(const std::filesystem::path& checkpoint, bool include_predictor, std::uint64_t fresh_seed);

// Copies a checkpoint without the online tensors (and their optimizer moments)
// matching any glob. The globs are recorded so the copy still loads.
std::vector<std::string> export_checkpoint(const std::filesystem::path& checkpoint,
                                           const std::vector<std::string>& exclude,
                                           const std::filesystem::path& out);

// Fixed palette for cluster id visualizations.
std::array<float, 3> cluster_color(int id);
Tensor<float> colorize(const std::vector<int>& labels, std::size_t h, std::size_t w);

}  // namespace mjepa
