#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "maskjepa/tensor.hpp"

namespace mjepa {

enum class ShapeKind { circle, rectangle, triangle, ellipse };

struct ShapeDesc {
  ShapeKind kind = ShapeKind::circle;
  double cx = 0.0, cy = 0.0;  // center in pixels
  double size = 1.0;          // radius / half-extent along x
  double aspect = 1.0;        // y extent = size * aspect (rectangle, ellipse)
  std::array<float, 3> color{};
  int class_id = 1;
};

struct ShapeScene {
  Tensor<float> image;               // [3,H,W] in [0,1]
  std::vector<std::uint8_t> labels;  // H*W, 0 = background
  std::vector<ShapeDesc> shapes;     // draw order, later ones on top
  std::size_t height = 0, width = 0;
};

// Kind assigned to a class id (class 1..k-1 cycle through the four kinds).
ShapeKind kind_for_class(int class_id);
// Base color of a class; class 0 is the background.
std::array<float, 3> class_color(int class_id);

// Point-in-shape test at pixel-center coordinates.
bool shape_contains(const ShapeDesc& shape, double x, double y);

// Rasterizes shapes over a flat background, no anti-aliasing. Labels are the
// class of the topmost covering shape, else 0.
ShapeScene render_scene(const std::vector<ShapeDesc>& shapes, std::size_t h, std::size_t w,
                        const std::array<float, 3>& background);

// Deterministic per seed. k_classes >= 2 (background + shape classes).
// `color_jitter` is the per-channel uniform half-range added to a class's base color.
ShapeScene gen_scene(std::uint64_t seed, std::size_t h, std::size_t w, int k_classes, int shapes_per_image,
                     double color_jitter = 0.12);

struct SceneSetConfig {
  std::size_t count = 256;
  std::size_t size = 64;
  int classes = 5;
  int shapes_per_image = 3;
  double color_jitter = 0.12;
  std::uint64_t seed = 0;
};

// Scene i uses a seed derived from (config.seed, i).
std::vector<ShapeScene> gen_scenes(const SceneSetConfig& config);
std::vector<Tensor<float>> scene_images(const std::vector<ShapeScene>& scenes);

// Binary PPM (P6) / PGM (P5), maxval 255.
void write_ppm(const std::filesystem::path& path, const Tensor<float>& image);
void write_pgm(const std::filesystem::path& path, const std::vector<std::uint8_t>& values, std::size_t h,
               std::size_t w);
Tensor<float> read_ppm(const std::filesystem::path& path);  // [3,H,W] scaled to [0,1]
std::vector<std::uint8_t> read_pgm(const std::filesystem::path& path, std::size_t& h, std::size_t& w);

// Half-pixel-center bilinear resize of a [C,H,W] image.
Tensor<float> resize_bilinear(const Tensor<float>& image, std::size_t h, std::size_t w);
std::vector<std::uint8_t> resize_nearest(const std::vector<std::uint8_t>& labels, std::size_t h, std::size_t w,
                                         std::size_t out_h, std::size_t out_w);

// Writes img_%05d.ppm and lbl_%05d.pgm for every scene.
void write_scene_folder(const std::filesystem::path& dir, const std::vector<ShapeScene>& scenes);

struct ImageFolder {
  std::vector<Tensor<float>> images;                // [3,H,W]
  std::vector<std::vector<std::uint8_t>> labels;    // empty, or one H*W map per image
  std::vector<std::string> files;
  std::vector<std::string> warnings;
  std::size_t skipped = 0;
};

// Every *.ppm in lexicographic order, resized to h x w. Unreadable files are
// skipped with a warning; throws if none is usable. With `with_labels`, the
// matching lbl_*.pgm is loaded too and images without one are skipped.
ImageFolder load_image_folder(const std::filesystem::path& dir, std::size_t h, std::size_t w,
                              bool with_labels = false);

// Batch of images [B,3,H,W] plus optional per-pixel labels.
struct ImageBatch {
  Tensor<float> images;
  std::vector<std::vector<std::uint8_t>> labels;
};

// Consecutive batches in order; the last one may be short.
std::vector<ImageBatch> make_batches(const ImageFolder& folder, std::size_t batch_size);

}  // namespace mjepa
