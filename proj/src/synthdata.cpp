#include "maskjepa/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <random>
#include <stdexcept>

namespace mjepa {

namespace fs = std::filesystem;

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// Triangle with circumradius `size`, apex up.
std::array<std::array<double, 2>, 3> triangle_vertices(const ShapeDesc& s) {
  const double r = s.size;
  return {{{s.cx, s.cy - r}, {s.cx - r * 0.8660254037844386, s.cy + 0.5 * r}, {s.cx + r * 0.8660254037844386, s.cy + 0.5 * r}}};
}

double edge(const std::array<double, 2>& a, const std::array<double, 2>& b, double x, double y) {
  return (b[0] - a[0]) * (y - a[1]) - (b[1] - a[1]) * (x - a[0]);
}

// Skips whitespace and '#' comments in a PNM header.
int read_header_int(std::istream& in, const fs::path& path) {
  int c = in.peek();
  while (c != EOF) {
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else if (std::isspace(c)) {
      in.get();
    } else {
      break;
    }
    c = in.peek();
  }
  int value = -1;
  if (!(in >> value) || value <= 0) throw std::runtime_error("malformed PNM header in " + path.string());
  return value;
}

std::vector<unsigned char> read_pnm(const fs::path& path, const std::string& magic, int channels, std::size_t& h,
                                    std::size_t& w) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string tag(2, '\0');
  in.read(tag.data(), 2);
  if (!in || tag != magic) throw std::runtime_error(path.string() + ": expected " + magic + " file");
  w = static_cast<std::size_t>(read_header_int(in, path));
  h = static_cast<std::size_t>(read_header_int(in, path));
  const int maxval = read_header_int(in, path);
  if (maxval > 255) throw std::runtime_error(path.string() + ": only 8-bit PNM is supported");
  in.get();  // single whitespace before the raster
  std::vector<unsigned char> data(h * w * static_cast<std::size_t>(channels));
  in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (static_cast<std::size_t>(in.gcount()) != data.size()) {
    throw std::runtime_error(path.string() + ": truncated raster (" + std::to_string(in.gcount()) + " of " +
                             std::to_string(data.size()) + " bytes)");
  }
  if (maxval != 255) {
    for (auto& v : data) v = static_cast<unsigned char>(std::lround(255.0 * v / maxval));
  }
  return data;
}

}  // namespace

ShapeKind kind_for_class(int class_id) {
  static constexpr std::array<ShapeKind, 4> kinds{ShapeKind::circle, ShapeKind::rectangle, ShapeKind::triangle,
                                                  ShapeKind::ellipse};
  return kinds[static_cast<std::size_t>(std::max(class_id - 1, 0)) % 4];
}

std::array<float, 3> class_color(int class_id) {
  static constexpr std::array<std::array<float, 3>, 5> palette{{{0.45f, 0.45f, 0.45f},
                                                                {0.85f, 0.25f, 0.20f},
                                                                {0.20f, 0.70f, 0.30f},
                                                                {0.25f, 0.35f, 0.85f},
                                                                {0.90f, 0.80f, 0.20f}}};
  if (class_id < 5) return palette[static_cast<std::size_t>(class_id)];
  // Further classes: rotate channels of the base palette and darken.
  const auto& base = palette[static_cast<std::size_t>(1 + (class_id - 1) % 4)];
  const int rot = (class_id - 1) / 4;
  return {base[rot % 3] * 0.7f, base[(rot + 1) % 3] * 0.7f, base[(rot + 2) % 3] * 0.7f};
}

bool shape_contains(const ShapeDesc& s, double x, double y) {
  const double dx = x - s.cx, dy = y - s.cy;
  switch (s.kind) {
    case ShapeKind::circle:
      return dx * dx + dy * dy <= s.size * s.size;
    case ShapeKind::rectangle:
      return std::abs(dx) <= s.size && std::abs(dy) <= s.size * s.aspect;
    case ShapeKind::ellipse: {
      const double ax = dx / s.size, ay = dy / (s.size * s.aspect);
      return ax * ax + ay * ay <= 1.0;
    }
    case ShapeKind::triangle: {
      const auto v = triangle_vertices(s);
      const double e0 = edge(v[0], v[1], x, y), e1 = edge(v[1], v[2], x, y), e2 = edge(v[2], v[0], x, y);
      return (e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0);
    }
  }
  return false;
}

ShapeScene render_scene(const std::vector<ShapeDesc>& shapes, std::size_t h, std::size_t w,
                        const std::array<float, 3>& background) {
  ShapeScene scene;
  scene.height = h;
  scene.width = w;
  scene.shapes = shapes;
  scene.image = Tensor<float>({3, h, w});
  scene.labels.assign(h * w, 0);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      std::array<float, 3> color = background;
      std::uint8_t label = 0;
      for (const auto& s : shapes) {
        if (shape_contains(s, static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5)) {
          color = s.color;
          label = static_cast<std::uint8_t>(s.class_id);
        }
      }
      for (std::size_t c = 0; c < 3; ++c) scene.image[(c * h + y) * w + x] = color[c];
      scene.labels[y * w + x] = label;
    }
  }
  return scene;
}

ShapeScene gen_scene(std::uint64_t seed, std::size_t h, std::size_t w, int k_classes, int shapes_per_image,
                     double color_jitter) {
  if (k_classes < 2) throw std::invalid_argument("gen_scene: k_classes must be >= 2");
  if (h % 32 || w % 32 || h == 0 || w == 0) throw std::invalid_argument("gen_scene: H and W must be multiples of 32");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto jitter = [&](std::array<float, 3> base, double amount) {
    for (auto& v : base) v = static_cast<float>(std::clamp(v + amount * (2.0 * unit(rng) - 1.0), 0.0, 1.0));
    return base;
  };

  const std::array<float, 3> background = jitter(class_color(0), 0.15);
  const double min_side = static_cast<double>(std::min(h, w));
  std::vector<ShapeDesc> shapes;
  std::uniform_int_distribution<int> pick_class(1, k_classes - 1);
  for (int i = 0; i < shapes_per_image; ++i) {
    ShapeDesc s;
    s.class_id = pick_class(rng);
    s.kind = kind_for_class(s.class_id);
    s.size = min_side * (0.10 + 0.12 * unit(rng));
    s.aspect = s.kind == ShapeKind::ellipse ? 0.45 + 0.2 * unit(rng)
               : s.kind == ShapeKind::rectangle ? 0.6 + 0.4 * unit(rng)
                                                : 1.0;
    s.cx = s.size + (static_cast<double>(w) - 2.0 * s.size) * unit(rng);
    s.cy = s.size + (static_cast<double>(h) - 2.0 * s.size) * unit(rng);
    s.color = jitter(class_color(s.class_id), color_jitter);
    shapes.push_back(s);
  }
  return render_scene(shapes, h, w, background);
}

std::vector<ShapeScene> gen_scenes(const SceneSetConfig& config) {
  std::vector<ShapeScene> out;
  out.reserve(config.count);
  for (std::size_t i = 0; i < config.count; ++i) {
    out.push_back(gen_scene(splitmix64(config.seed * 0x100000001B3ULL + i), config.size, config.size, config.classes,
                            config.shapes_per_image, config.color_jitter));
  }
  return out;
}

std::vector<Tensor<float>> scene_images(const std::vector<ShapeScene>& scenes) {
  std::vector<Tensor<float>> out;
  out.reserve(scenes.size());
  for (const auto& s : scenes) out.push_back(s.image);
  return out;
}

void write_ppm(const fs::path& path, const Tensor<float>& image) {
  if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("write_ppm: expected [3,H,W], got " + shape_str(image.shape()));
  const std::size_t h = image.dim(1), w = image.dim(2);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "P6\n" << w << ' ' << h << "\n255\n";
  std::vector<unsigned char> raster(h * w * 3);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        const float v = std::clamp(image[(c * h + y) * w + x], 0.0f, 1.0f);
        raster[(y * w + x) * 3 + c] = static_cast<unsigned char>(std::lround(v * 255.0f));
      }
    }
  }
  out.write(reinterpret_cast<const char*>(raster.data()), static_cast<std::streamsize>(raster.size()));
}

void write_pgm(const fs::path& path, const std::vector<std::uint8_t>& values, std::size_t h, std::size_t w) {
  if (values.size() != h * w) throw ShapeError("write_pgm: value count does not match geometry");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "P5\n" << w << ' ' << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size()));
}

Tensor<float> read_ppm(const fs::path& path) {
  std::size_t h = 0, w = 0;
  const auto raster = read_pnm(path, "P6", 3, h, w);
  Tensor<float> image({3, h, w});
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < 3; ++c) image[(c * h + y) * w + x] = static_cast<float>(raster[(y * w + x) * 3 + c]) / 255.0f;
    }
  }
  return image;
}

std::vector<std::uint8_t> read_pgm(const fs::path& path, std::size_t& h, std::size_t& w) {
  return read_pnm(path, "P5", 1, h, w);
}

Tensor<float> resize_bilinear(const Tensor<float>& image, std::size_t out_h, std::size_t out_w) {
  const std::size_t ch = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (h == out_h && w == out_w) return image;
  Tensor<float> out({ch, out_h, out_w});
  const double sy = static_cast<double>(h) / static_cast<double>(out_h);
  const double sx = static_cast<double>(w) / static_cast<double>(out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, h - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, w - 1);
      const double wx = fx - static_cast<double>(x0);
      for (std::size_t c = 0; c < ch; ++c) {
        const float* p = image.ptr() + c * h * w;
        const double top = p[y0 * w + x0] * (1 - wx) + p[y0 * w + x1] * wx;
        const double bot = p[y1 * w + x0] * (1 - wx) + p[y1 * w + x1] * wx;
        out[(c * out_h + y) * out_w + x] = static_cast<float>(top * (1 - wy) + bot * wy);
      }
    }
  }
  return out;
}

std::vector<std::uint8_t> resize_nearest(const std::vector<std::uint8_t>& labels, std::size_t h, std::size_t w,
                                         std::size_t out_h, std::size_t out_w) {
  if (h == out_h && w == out_w) return labels;
  std::vector<std::uint8_t> out(out_h * out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    const std::size_t sy = std::min(h - 1, static_cast<std::size_t>((static_cast<double>(y) + 0.5) * h / out_h));
    for (std::size_t x = 0; x < out_w; ++x) {
      const std::size_t sx = std::min(w - 1, static_cast<std::size_t>((static_cast<double>(x) + 0.5) * w / out_w));
      out[y * out_w + x] = labels[sy * w + sx];
    }
  }
  return out;
}

void write_scene_folder(const fs::path& dir, const std::vector<ShapeScene>& scenes) {
  fs::create_directories(dir);
  char name[64];
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    std::snprintf(name, sizeof(name), "img_%05zu.ppm", i);
    write_ppm(dir / name, scenes[i].image);
    std::snprintf(name, sizeof(name), "lbl_%05zu.pgm", i);
    write_pgm(dir / name, scenes[i].labels, scenes[i].height, scenes[i].width);
  }
}

ImageFolder load_image_folder(const fs::path& dir, std::size_t h, std::size_t w, bool with_labels) {
  if (!fs::is_directory(dir)) throw std::runtime_error("image folder not found: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".ppm") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());

  ImageFolder folder;
  for (const auto& file : files) {
    try {
      Tensor<float> image = resize_bilinear(read_ppm(file), h, w);
      std::vector<std::uint8_t> labels;
      if (with_labels) {
        std::string stem = file.stem().string();
        if (stem.rfind("img_", 0) == 0) stem.replace(0, 4, "lbl_");
        const fs::path label_path = file.parent_path() / (stem + ".pgm");
        std::size_t lh = 0, lw = 0;
        const std::vector<std::uint8_t> raw = read_pgm(label_path, lh, lw);
        labels = resize_nearest(raw, lh, lw, h, w);
      }
      folder.images.push_back(std::move(image));
      if (with_labels) folder.labels.push_back(std::move(labels));
      folder.files.push_back(file.filename().string());
    } catch (const std::exception& e) {
      ++folder.skipped;
      folder.warnings.push_back(file.filename().string() + ": " + e.what());
      std::cerr << "warning: skipping " << file.filename().string() << ": " << e.what() << '\n';
    }
  }
  if (folder.images.empty()) {
    throw std::runtime_error("no usable images in " + dir.string() + " (" + std::to_string(folder.skipped) +
                             " skipped)");
  }
  return folder;
}

std::vector<ImageBatch> make_batches(const ImageFolder& folder, std::size_t batch_size) {
  if (batch_size == 0) throw std::invalid_argument("make_batches: batch size must be >= 1");
  std::vector<ImageBatch> out;
  const std::size_t n = folder.images.size();
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t count = std::min(batch_size, n - start);
    const Shape& s = folder.images[start].shape();
    ImageBatch batch{Tensor<float>({count, s[0], s[1], s[2]}), {}};
    const std::size_t per = folder.images[start].numel();
    for (std::size_t i = 0; i < count; ++i) {
      std::copy_n(folder.images[start + i].ptr(), per, batch.images.ptr() + i * per);
      if (!folder.labels.empty()) batch.labels.push_back(folder.labels[start + i]);
    }
    out.push_back(std::move(batch));
  }
  return out;
}

}  // namespace mjepa
