#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ps2kit/geometry.hpp"
#include "ps2kit/image_io.hpp"
#include "ps2kit/lightspace.hpp"
#include "ps2kit/photometry.hpp"
#include "ps2kit/tensor.hpp"

namespace ps2kit {

/// One captured object: raw images exactly as stored on disk plus per-image
/// light metadata. Normalization is applied when pairs are built, never to
/// the stored data.
struct ObjectCapture {
  std::string name;
  std::vector<TensorF> images;    // (3,H,W) in [0,1]
  std::vector<Vec3> lights;       // unit
  std::vector<Vec3> intensities;  // per-image RGB source intensity
  TensorF mask;                   // (1,H,W) in {0,1}
  std::optional<TensorF> gt_normals;  // evaluation only
  std::optional<TensorF> gt_albedo;   // evaluation only
  int height = 0, width = 0;

  std::size_t size() const { return images.size(); }
};

/// Two differently binned views of one object, intensity-normalized into [0,1].
struct ImagePair {
  TensorF i1, i2;  // (3,H,W)
  TensorF mask;    // shared with the capture
  LightBin b1, b2;
  Vec3 l1, l2;  // true lights; only some training modes may look at them
  int idx1 = -1, idx2 = -1;
};

namespace detail {

inline std::vector<std::string> read_lines(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw format_error("missing file: " + p.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ' || line.back() == '\t')) line.pop_back();
    std::size_t start = line.find_first_not_of(" \t");
    if (start == std::string::npos) continue;
    lines.push_back(line.substr(start));
  }
  return lines;
}

inline Vec3 parse_triple(const std::filesystem::path& file, std::size_t lineno, const std::string& line) {
  std::istringstream ss(line);
  double x, y, z;
  if (!(ss >> x >> y >> z))
    throw format_error(file.filename().string() + ":" + std::to_string(lineno + 1) + ": expected three numbers, got '" + line + "'");
  return {x, y, z};
}

inline std::vector<Vec3> read_triples(const std::filesystem::path& p) {
  std::vector<std::string> lines = read_lines(p);
  std::vector<Vec3> out;
  out.reserve(lines.size());
  for (std::size_t i = 0; i < lines.size(); ++i) out.push_back(parse_triple(p, i, lines[i]));
  return out;
}

inline TensorF binarize_mask(TensorF m) {
  if (m.dim(0) != 1) {
    // collapse RGB masks
    TensorF g({1, m.dim(1), m.dim(2)});
    for (int y = 0; y < m.dim(1); ++y)
      for (int x = 0; x < m.dim(2); ++x) g.at(0, y, x) = m.at(0, y, x);
    m = g;
  }
  for (std::size_t i = 0; i < m.numel(); ++i) m[i] = m[i] > 0.5f ? 1.0f : 0.0f;
  return m;
}

inline TensorF renormalize_normals(TensorF n, const TensorF& mask) {
  for (int y = 0; y < n.dim(1); ++y)
    for (int x = 0; x < n.dim(2); ++x) {
      if (mask.at(0, y, x) == 0.0f) {
        for (int c = 0; c < 3; ++c) n.at(c, y, x) = 0.0f;
        continue;
      }
      double nx = n.at(0, y, x), ny = n.at(1, y, x), nz = n.at(2, y, x);
      double len = std::sqrt(nx * nx + ny * ny + nz * nz);
      if (len < 1e-6) {
        n.at(0, y, x) = 0.0f, n.at(1, y, x) = 0.0f, n.at(2, y, x) = 1.0f;
      } else {
        n.at(0, y, x) = static_cast<float>(nx / len);
        n.at(1, y, x) = static_cast<float>(ny / len);
        n.at(2, y, x) = static_cast<float>(nz / len);
      }
    }
  return n;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// DiLiGenT-format directories

/// Layout: filenames.txt, light_directions.txt, light_intensities.txt (all
/// index-aligned), mask.png, optional normals.f32 or normals.png
/// (16-bit, [-1,1] mapped to [0,65535]).
inline ObjectCapture load_diligent(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::vector<std::string> names = detail::read_lines(dir / "filenames.txt");
  if (names.size() < 2) throw format_error("filenames.txt: need at least 2 images, got " + std::to_string(names.size()));
  std::vector<Vec3> dirs = detail::read_triples(dir / "light_directions.txt");
  std::vector<Vec3> ints = detail::read_triples(dir / "light_intensities.txt");
  if (dirs.size() != names.size())
    throw format_error("light_directions.txt: " + std::to_string(dirs.size()) + " entries but filenames.txt lists " +
                       std::to_string(names.size()));
  if (ints.size() != names.size())
    throw format_error("light_intensities.txt: " + std::to_string(ints.size()) + " entries but filenames.txt lists " +
                       std::to_string(names.size()));

  ObjectCapture cap;
  cap.name = dir.filename().string();
  if (cap.name.empty()) cap.name = dir.parent_path().filename().string();

  if (!fs::exists(dir / "mask.png")) throw format_error("missing file: " + (dir / "mask.png").string());
  cap.mask = detail::binarize_mask(read_png((dir / "mask.png").string()));
  cap.height = cap.mask.dim(1);
  cap.width = cap.mask.dim(2);

  for (std::size_t j = 0; j < names.size(); ++j) {
    TensorF img = read_png((dir / names[j]).string());
    if (img.dim(0) == 1) {
      TensorF rgb({3, img.dim(1), img.dim(2)});
      for (int c = 0; c < 3; ++c)
        for (int y = 0; y < img.dim(1); ++y)
          for (int x = 0; x < img.dim(2); ++x) rgb.at(c, y, x) = img.at(0, y, x);
      img = std::move(rgb);
    }
    if (img.dim(1) != cap.height || img.dim(2) != cap.width)
      throw format_error(names[j] + ": resolution " + std::to_string(img.dim(2)) + "x" + std::to_string(img.dim(1)) +
                         " does not match mask " + std::to_string(cap.width) + "x" + std::to_string(cap.height));
    cap.images.push_back(std::move(img));

    double len = dirs[j].norm();
    if (len < 0.5 || len > 2.0)
      throw format_error("light_directions.txt:" + std::to_string(j + 1) + ": not a unit direction (norm " +
                         std::to_string(len) + ")");
    cap.lights.push_back(dirs[j] * (1.0 / len));
    if (ints[j].x <= 0.0 || ints[j].y <= 0.0 || ints[j].z <= 0.0)
      throw format_error("light_intensities.txt:" + std::to_string(j + 1) + ": intensities must be positive");
    cap.intensities.push_back(ints[j]);
  }

  if (fs::exists(dir / "normals.f32")) {
    cap.gt_normals = detail::renormalize_normals(read_f32((dir / "normals.f32").string(), 3, cap.height, cap.width), cap.mask);
  } else if (fs::exists(dir / "normals.png")) {
    TensorF n = read_png((dir / "normals.png").string());
    if (n.dim(0) != 3) throw format_error("normals.png: expected 3 channels");
    for (std::size_t i = 0; i < n.numel(); ++i) n[i] = 2.0f * n[i] - 1.0f;
    cap.gt_normals = detail::renormalize_normals(std::move(n), cap.mask);
  }
  return cap;
}

/// Inverse of load_diligent over already-loaded data; 16-bit images round-trip
/// bit-exactly because stored values are 16-bit quantized.
inline void save_diligent_dir(const std::filesystem::path& dir, const ObjectCapture& cap) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::ofstream fn(dir / "filenames.txt");
  std::ofstream ld(dir / "light_directions.txt");
  std::ofstream li(dir / "light_intensities.txt");
  ld.precision(17);
  li.precision(17);
  char name[32];
  for (std::size_t j = 0; j < cap.size(); ++j) {
    std::snprintf(name, sizeof(name), "img_%03zu.png", j);
    write_png((dir / name).string(), cap.images[j], 16);
    fn << name << "\n";
    ld << cap.lights[j].x << " " << cap.lights[j].y << " " << cap.lights[j].z << "\n";
    li << cap.intensities[j].x << " " << cap.intensities[j].y << " " << cap.intensities[j].z << "\n";
  }
  write_png((dir / "mask.png").string(), cap.mask, 8);
  if (cap.gt_normals) write_f32((dir / "normals.f32").string(), *cap.gt_normals);
}

// ---------------------------------------------------------------------------
// Synthetic scene directories (photometry's serialization)

inline ObjectCapture load_synthetic(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::ifstream mf(dir / "scene.json");
  if (!mf) throw format_error("missing file: " + (dir / "scene.json").string());
  nlohmann::json meta;
  try {
    mf >> meta;
  } catch (const nlohmann::json::exception& e) {
    throw format_error("scene.json: " + std::string(e.what()));
  }
  std::string schema = meta.value("schema", "");
  if (schema != kSceneSchema)
    throw format_error("scene.json: schema '" + schema + "' not supported (expected " + kSceneSchema + ")");

  ObjectCapture cap;
  cap.name = dir.filename().string();
  if (cap.name.empty()) cap.name = dir.parent_path().filename().string();
  cap.height = meta.at("height").get<int>();
  cap.width = meta.at("width").get<int>();
  cap.mask = detail::binarize_mask(read_png((dir / "mask.png").string()));
  cap.gt_normals = read_f32((dir / "normals.f32").string(), 3, cap.height, cap.width);
  cap.gt_albedo = read_png((dir / "albedo.png").string());

  std::vector<std::string> lightLines = detail::read_lines(dir / "lights.txt");
  char name[32];
  for (std::size_t j = 0; j < lightLines.size(); ++j) {
    Vec3 l = detail::parse_triple(dir / "lights.txt", j, lightLines[j]);
    cap.lights.push_back(l.normalized());
    cap.intensities.push_back({1.0, 1.0, 1.0});
    std::snprintf(name, sizeof(name), "img_%03zu.png", j);
    TensorF img = read_png((dir / name).string());
    if (img.dim(1) != cap.height || img.dim(2) != cap.width)
      throw format_error(std::string(name) + ": resolution does not match scene.json");
    cap.images.push_back(std::move(img));
  }
  if (cap.size() < 2) throw format_error("lights.txt: need at least 2 entries");
  return cap;
}

// ---------------------------------------------------------------------------
// Pair construction

/// Largest per-channel intensity-normalized value across the capture; pair
/// images are divided by this so every pair lands in [0,1] on a shared scale.
inline float normalization_scale(const ObjectCapture& cap) {
  double vmax = 0.0;
  for (std::size_t j = 0; j < cap.size(); ++j) {
    const double inv[3] = {1.0 / cap.intensities[j].x, 1.0 / cap.intensities[j].y, 1.0 / cap.intensities[j].z};
    const TensorF& img = cap.images[j];
    for (int c = 0; c < 3; ++c) {
      const float* p = img.data() + static_cast<std::size_t>(c) * cap.height * cap.width;
      for (int i = 0; i < cap.height * cap.width; ++i) vmax = std::max(vmax, p[i] * inv[c]);
    }
  }
  return static_cast<float>(std::max(vmax, 1e-12));
}

inline TensorF normalized_image(const ObjectCapture& cap, std::size_t j, float scale) {
  TensorF out = cap.images[j];
  for (int c = 0; c < 3; ++c) {
    double k = 1.0 / ((c == 0 ? cap.intensities[j].x : c == 1 ? cap.intensities[j].y : cap.intensities[j].z) *
                      static_cast<double>(scale));
    float* p = out.data() + static_cast<std::size_t>(c) * cap.height * cap.width;
    for (int i = 0; i < cap.height * cap.width; ++i)
      p[i] = std::clamp(static_cast<float>(p[i] * k), 0.0f, 1.0f);
  }
  for (std::size_t i = 0; i < out.numel(); ++i)
    out[i] *= cap.mask[i % (static_cast<std::size_t>(cap.height) * cap.width)];
  return out;
}

inline ImagePair make_pair(const ObjectCapture& cap, int idx1, int idx2, float scale) {
  ImagePair p;
  p.idx1 = idx1;
  p.idx2 = idx2;
  p.i1 = normalized_image(cap, static_cast<std::size_t>(idx1), scale);
  p.i2 = normalized_image(cap, static_cast<std::size_t>(idx2), scale);
  p.mask = cap.mask;
  p.l1 = cap.lights[static_cast<std::size_t>(idx1)];
  p.l2 = cap.lights[static_cast<std::size_t>(idx2)];
  p.b1 = bin_of_dir(p.l1);
  p.b2 = bin_of_dir(p.l2);
  return p;
}

/// n pairs with replacement, both indices uniform, rejecting same-bin draws.
inline std::vector<ImagePair> sample_pairs(const ObjectCapture& cap, int n, std::uint32_t seed) {
  std::vector<int> bins;
  bins.reserve(cap.size());
  bool diverse = false;
  for (const Vec3& l : cap.lights) {
    bins.push_back(bin_of_dir(l).flat());
    if (bins.back() != bins.front()) diverse = true;
  }
  if (cap.size() < 2 || !diverse)
    throw std::invalid_argument("sample_pairs: capture needs images in at least two distinct light bins");

  float scale = normalization_scale(cap);
  std::mt19937 rng(seed);
  std::uniform_int_distribution<int> pick(0, static_cast<int>(cap.size()) - 1);
  std::vector<ImagePair> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int k = 0; k < n; ++k) {
    int a = pick(rng), b = pick(rng);
    while (bins[static_cast<std::size_t>(b)] == bins[static_cast<std::size_t>(a)]) b = pick(rng);
    out.push_back(make_pair(cap, a, b, scale));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Mask-aware crop + resize

namespace detail {

inline TensorF resize_bilinear(const TensorF& src, int y0, int x0, int side, int res) {
  const int C = src.dim(0), H = src.dim(1), W = src.dim(2);
  TensorF out({C, res, res});
  const double step = static_cast<double>(side) / res;
  for (int yo = 0; yo < res; ++yo)
    for (int xo = 0; xo < res; ++xo) {
      double sy = y0 + (yo + 0.5) * step - 0.5;
      double sx = x0 + (xo + 0.5) * step - 0.5;
      int iy = static_cast<int>(std::floor(sy)), ix = static_cast<int>(std::floor(sx));
      double fy = sy - iy, fx = sx - ix;
      int y1 = std::clamp(iy, 0, H - 1), y2 = std::clamp(iy + 1, 0, H - 1);
      int x1 = std::clamp(ix, 0, W - 1), x2 = std::clamp(ix + 1, 0, W - 1);
      for (int c = 0; c < C; ++c) {
        double top = src.at(c, y1, x1) * (1.0 - fx) + src.at(c, y1, x2) * fx;
        double bot = src.at(c, y2, x1) * (1.0 - fx) + src.at(c, y2, x2) * fx;
        out.at(c, yo, xo) = static_cast<float>(top * (1.0 - fy) + bot * fy);
      }
    }
  return out;
}

inline TensorF resize_nearest(const TensorF& src, int y0, int x0, int side, int res) {
  const int C = src.dim(0), H = src.dim(1), W = src.dim(2);
  TensorF out({C, res, res});
  const double step = static_cast<double>(side) / res;
  for (int yo = 0; yo < res; ++yo)
    for (int xo = 0; xo < res; ++xo) {
      int sy = std::clamp(y0 + static_cast<int>((yo + 0.5) * step), 0, H - 1);
      int sx = std::clamp(x0 + static_cast<int>((xo + 0.5) * step), 0, W - 1);
      for (int c = 0; c < C; ++c) out.at(c, yo, xo) = src.at(c, sy, sx);
    }
  return out;
}

}  // namespace detail

/// Crops to the square around the mask bounding box, then resamples to
/// res x res: bilinear for images, nearest for the mask and ground truth.
inline ObjectCapture crop_resize(const ObjectCapture& cap, int res) {
  if (res < 4) throw std::invalid_argument("crop_resize: resolution too small");
  int ymin = cap.height, ymax = -1, xmin = cap.width, xmax = -1;
  for (int y = 0; y < cap.height; ++y)
    for (int x = 0; x < cap.width; ++x)
      if (cap.mask.at(0, y, x) != 0.0f) {
        ymin = std::min(ymin, y), ymax = std::max(ymax, y);
        xmin = std::min(xmin, x), xmax = std::max(xmax, x);
      }
  if (ymax < 0) throw std::invalid_argument("crop_resize: empty mask");

  int side = std::max(ymax - ymin + 1, xmax - xmin + 1);
  side = std::min(side, std::min(cap.height, cap.width));
  int y0 = std::clamp((ymin + ymax + 1 - side) / 2, 0, cap.height - side);
  int x0 = std::clamp((xmin + xmax + 1 - side) / 2, 0, cap.width - side);

  ObjectCapture out;
  out.name = cap.name;
  out.height = out.width = res;
  out.lights = cap.lights;
  out.intensities = cap.intensities;
  out.mask = detail::resize_nearest(cap.mask, y0, x0, side, res);
  for (const TensorF& img : cap.images) out.images.push_back(detail::resize_bilinear(img, y0, x0, side, res));
  if (cap.gt_normals) out.gt_normals = detail::resize_nearest(*cap.gt_normals, y0, x0, side, res);
  if (cap.gt_albedo) out.gt_albedo = detail::resize_nearest(*cap.gt_albedo, y0, x0, side, res);
  return out;
}

}  // namespace ps2kit
