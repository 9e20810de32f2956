#pragma once

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "ps2kit/geometry.hpp"
#include "ps2kit/image_io.hpp"
#include "ps2kit/lightspace.hpp"
#include "ps2kit/tensor.hpp"

namespace ps2kit {

// Maps are CHW float tensors: normals (3,H,W) unit inside the mask and zero
// outside, albedo (3,H,W) in [0,1], masks (1,H,W) in {0,1}.

struct PhotometryOptions {
  double tau_specular = 0.99;    // n.h above this counts as a highlight
  double eps_div = 1e-6;         // shading division guard
  double eps_rho = 1e-4;         // below this the recovered albedo marks a pixel invalid
  double shading_floor = 0.1;    // minimum shading for albedo supervision
  double tau_shadow_rel = 0.05;  // per-pixel relative intensity floor for least-squares rows
};

enum class GeometryKind { Sphere, Heightfield };

inline std::string to_string(GeometryKind k) {
  return k == GeometryKind::Sphere ? "sphere" : "heightfield";
}

inline GeometryKind geometry_kind_from(const std::string& s) {
  if (s == "sphere") return GeometryKind::Sphere;
  if (s == "heightfield") return GeometryKind::Heightfield;
  throw format_error("unknown geometry kind: " + s);
}

/// Desk-scale ground-truth source: geometry plus reflectance parameters.
struct SyntheticScene {
  GeometryKind kind = GeometryKind::Sphere;
  int height = 64, width = 64;
  TensorF heights;  // (1,H,W), heightfield only, z in pixel units
  TensorF normals;  // (3,H,W)
  TensorF albedo;   // (3,H,W)
  TensorF mask;     // (1,H,W)
  float ks = 0.0f;     // specular strength
  float alpha = 32.0f; // shininess, >= 1
  float sigma = 0.0f;  // additive Gaussian noise level
  std::uint32_t seed = 0;
};

struct RenderedImage {
  TensorF image;  // (3,H,W) in [0,1]
  Vec3 light;
  TensorF mask;  // shared with the scene
};

inline TensorF shade_lambert(const TensorF& normals, const Vec3& l) {
  const int H = normals.dim(1), W = normals.dim(2);
  TensorF s({1, H, W});
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      float d = normals.at(0, y, x) * static_cast<float>(l.x) +
                normals.at(1, y, x) * static_cast<float>(l.y) +
                normals.at(2, y, x) * static_cast<float>(l.z);
      s.at(0, y, x) = std::max(d, 0.0f);
    }
  return s;
}

/// Lambertian term plus an isotropic half-vector specular lobe and optional
/// Gaussian noise; attached shadows only, view fixed at [0,0,1].
inline RenderedImage render(const SyntheticScene& scene, const Vec3& l, std::mt19937& rng) {
  const int H = scene.height, W = scene.width;
  TensorF shading = shade_lambert(scene.normals, l);
  Vec3 h = half_vector(l, kViewDir);
  std::normal_distribution<float> noise(0.0f, scene.sigma);

  RenderedImage out;
  out.light = l;
  out.mask = scene.mask;
  out.image = TensorF({3, H, W});
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      if (scene.mask.at(0, y, x) == 0.0f) continue;
      float s = shading.at(0, y, x);
      float spec = 0.0f;
      if (scene.ks > 0.0f && s > 0.0f) {
        float nh = scene.normals.at(0, y, x) * static_cast<float>(h.x) +
                   scene.normals.at(1, y, x) * static_cast<float>(h.y) +
                   scene.normals.at(2, y, x) * static_cast<float>(h.z);
        if (nh > 0.0f) spec = scene.ks * std::pow(nh, scene.alpha);
      }
      for (int c = 0; c < 3; ++c) {
        float v = scene.albedo.at(c, y, x) * s + spec;
        if (scene.sigma > 0.0f) v += noise(rng);
        out.image.at(c, y, x) = std::clamp(v, 0.0f, 1.0f);
      }
    }
  return out;
}

inline RenderedImage render(const SyntheticScene& scene, const Vec3& l, std::uint32_t seed) {
  std::mt19937 rng(seed);
  return render(scene, l, rng);
}

// ---------------------------------------------------------------------------
// Synthetic scene construction

/// Procedural spatially varying albedo in [0.15, 0.95].
inline TensorF make_albedo(int H, int W, std::uint32_t seed) {
  std::mt19937 rng(seed ^ 0xa1b2c3u);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  float base[3], alt[3];
  for (int c = 0; c < 3; ++c) {
    base[c] = 0.35f + 0.55f * u(rng);
    alt[c] = 0.15f + 0.5f * u(rng);
  }
  int cell = std::max(4, H / 8);
  TensorF a({3, H, W});
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      bool check = ((y / cell) + (x / cell)) % 2 == 0;
      float g = 0.75f + 0.25f * static_cast<float>(x) / static_cast<float>(W);
      for (int c = 0; c < 3; ++c) {
        float v = (check ? base[c] : alt[c]) * g;
        a.at(c, y, x) = std::clamp(v, 0.15f, 0.95f);
      }
    }
  return a;
}

inline SyntheticScene make_sphere_scene(int res, float ks, float alpha, float sigma, std::uint32_t seed) {
  SyntheticScene s;
  s.kind = GeometryKind::Sphere;
  s.height = s.width = res;
  s.ks = ks;
  s.alpha = alpha;
  s.sigma = sigma;
  s.seed = seed;
  s.normals = TensorF({3, res, res});
  s.mask = TensorF({1, res, res});
  const double cx = res / 2.0, cy = res / 2.0, r = 0.45 * res;
  for (int y = 0; y < res; ++y)
    for (int x = 0; x < res; ++x) {
      double u = (x + 0.5 - cx) / r;
      double v = -(y + 0.5 - cy) / r;  // image y down, world y up
      double q = u * u + v * v;
      if (q >= 1.0) continue;
      s.mask.at(0, y, x) = 1.0f;
      s.normals.at(0, y, x) = static_cast<float>(u);
      s.normals.at(1, y, x) = static_cast<float>(v);
      s.normals.at(2, y, x) = static_cast<float>(std::sqrt(1.0 - q));
    }
  s.albedo = make_albedo(res, res, seed);
  for (int y = 0; y < res; ++y)
    for (int x = 0; x < res; ++x)
      if (s.mask.at(0, y, x) == 0.0f)
        for (int c = 0; c < 3; ++c) s.albedo.at(c, y, x) = 0.0f;
  return s;
}

/// Smooth random bump field: a few cosine waves with analytic normals.
inline SyntheticScene make_heightfield_scene(int res, float ks, float alpha, float sigma, std::uint32_t seed) {
  SyntheticScene s;
  s.kind = GeometryKind::Heightfield;
  s.height = s.width = res;
  s.ks = ks;
  s.alpha = alpha;
  s.sigma = sigma;
  s.seed = seed;
  s.heights = TensorF({1, res, res});
  s.normals = TensorF({3, res, res});
  s.mask = TensorF::full({1, res, res}, 1.0f);

  std::mt19937 rng(seed ^ 0x5eedu);
  std::uniform_real_distribution<double> uamp(0.35, 1.0), uphase(0.0, 2.0 * kPi);
  std::uniform_int_distribution<int> ufreq(1, 3);
  struct Wave {
    double a, fx, fy, ph;
  };
  std::vector<Wave> waves;
  const double amp = 0.055 * res;  // slopes up to roughly tan(40 deg)
  for (int i = 0; i < 6; ++i)
    waves.push_back({amp * uamp(rng), static_cast<double>(ufreq(rng)), static_cast<double>(ufreq(rng)), uphase(rng)});

  for (int y = 0; y < res; ++y)
    for (int x = 0; x < res; ++x) {
      double u = (x + 0.5) / res, v = (y + 0.5) / res;
      double z = 0.0, dzdx = 0.0, dzdy_img = 0.0;
      for (const Wave& w : waves) {
        double arg = 2.0 * kPi * (w.fx * u + w.fy * v) + w.ph;
        z += w.a * std::cos(arg);
        double d = -w.a * std::sin(arg) * 2.0 * kPi;
        dzdx += d * w.fx / res;      // per pixel along +x (columns)
        dzdy_img += d * w.fy / res;  // per pixel along image rows (down)
      }
      s.heights.at(0, y, x) = static_cast<float>(z);
      double dzdy = -dzdy_img;  // world y is up
      double nx = -dzdx, ny = -dzdy, nz = 1.0;
      double n = std::sqrt(nx * nx + ny * ny + nz * nz);
      s.normals.at(0, y, x) = static_cast<float>(nx / n);
      s.normals.at(1, y, x) = static_cast<float>(ny / n);
      s.normals.at(2, y, x) = static_cast<float>(nz / n);
    }
  s.albedo = make_albedo(res, res, seed);
  return s;
}

inline SyntheticScene make_scene(GeometryKind kind, int res, float ks, float alpha, float sigma, std::uint32_t seed) {
  return kind == GeometryKind::Sphere ? make_sphere_scene(res, ks, alpha, sigma, seed)
                                      : make_heightfield_scene(res, ks, alpha, sigma, seed);
}

// ---------------------------------------------------------------------------
// Classical least-squares recovery (the weak-supervision oracle)

struct LstsqResult {
  TensorF normals;  // (3,H,W)
  TensorF albedo;   // (3,H,W)
  TensorF valid;    // (1,H,W)
};

inline TensorF grayscale_mean(const TensorF& img) {
  const int H = img.dim(1), W = img.dim(2);
  TensorF g({1, H, W});
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      g.at(0, y, x) = (img.at(0, y, x) + img.at(1, y, x) + img.at(2, y, x)) / 3.0f;
  return g;
}

/// Per-pixel solve of L (rho n) = I by pseudo-inverse over the lit
/// observations; rho = |rho n|, n = rho n / rho.
inline LstsqResult lstsq_normals(const std::vector<TensorF>& images, const std::vector<Vec3>& lights,
                                 const TensorF& mask, const PhotometryOptions& opt = {}) {
  const std::size_t m = images.size();
  if (m < 3 || lights.size() != m)
    throw std::invalid_argument("lstsq_normals: need >= 3 images with matching lights");
  const int H = mask.dim(1), W = mask.dim(2);

  Eigen::MatrixXd L(static_cast<Eigen::Index>(m), 3);
  for (std::size_t j = 0; j < m; ++j) L(static_cast<Eigen::Index>(j), 0) = lights[j].x,
                                      L(static_cast<Eigen::Index>(j), 1) = lights[j].y,
                                      L(static_cast<Eigen::Index>(j), 2) = lights[j].z;
  {
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(L);
    if (svd.singularValues()(2) < 1e-6 * svd.singularValues()(0))
      throw singular_error("lstsq_normals: light directions are coplanar or rank-deficient");
  }

  std::vector<TensorF> grays;
  grays.reserve(m);
  for (const TensorF& img : images) grays.push_back(grayscale_mean(img));

  LstsqResult out;
  out.normals = TensorF({3, H, W});
  out.albedo = TensorF({3, H, W});
  out.valid = TensorF({1, H, W});

  std::vector<int> rows;
  rows.reserve(m);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      if (mask.at(0, y, x) == 0.0f) continue;
      double gmax = 0.0;
      for (std::size_t j = 0; j < m; ++j) gmax = std::max(gmax, static_cast<double>(grays[j].at(0, y, x)));
      rows.clear();
      for (std::size_t j = 0; j < m; ++j)
        if (grays[j].at(0, y, x) > opt.tau_shadow_rel * gmax) rows.push_back(static_cast<int>(j));
      if (rows.size() < 3 || gmax <= 0.0) continue;

      Eigen::MatrixXd A(static_cast<Eigen::Index>(rows.size()), 3);
      Eigen::VectorXd b(static_cast<Eigen::Index>(rows.size()));
      for (std::size_t k = 0; k < rows.size(); ++k) {
        A.row(static_cast<Eigen::Index>(k)) = L.row(rows[k]);
        b(static_cast<Eigen::Index>(k)) = grays[static_cast<std::size_t>(rows[k])].at(0, y, x);
      }
      Eigen::JacobiSVD<Eigen::MatrixXd> svd(A, Eigen::ComputeThinU | Eigen::ComputeThinV);
      if (svd.singularValues()(2) < 1e-8 * svd.singularValues()(0)) continue;
      Eigen::Vector3d g = svd.solve(b);
      double rho = g.norm();
      if (rho < opt.eps_rho) continue;
      Eigen::Vector3d n = g / rho;

      out.valid.at(0, y, x) = 1.0f;
      for (int c = 0; c < 3; ++c) out.normals.at(c, y, x) = static_cast<float>(n(c));

      // per-channel albedo against the lit shadings
      double ss = 0.0, si[3] = {0.0, 0.0, 0.0};
      for (int j : rows) {
        double s = std::max(L.row(j).dot(n), 0.0);
        ss += s * s;
        for (int c = 0; c < 3; ++c) si[c] += s * images[static_cast<std::size_t>(j)].at(c, y, x);
      }
      if (ss > 0.0)
        for (int c = 0; c < 3; ++c)
          out.albedo.at(c, y, x) = static_cast<float>(std::clamp(si[c] / ss, 0.0, 1.0));
    }
  return out;
}

// ---------------------------------------------------------------------------
// Weak labels for warm-up supervision

struct WeakImageLabels {
  TensorF albedo;         // (3,H,W), image / shading, clamped to [0,1]
  TensorF shading;        // (1,H,W)
  TensorF specular_mask;  // (1,H,W), highlight pixels
  TensorF supervised;     // (1,H,W), where the albedo label is trustworthy
  LightBin bin;
};

/// Splits each image into shading and albedo against an estimated normal map;
/// highlight pixels and dim shading are excluded from supervision.
inline std::vector<WeakImageLabels> decompose_weak_labels(const std::vector<TensorF>& images,
                                                          const std::vector<Vec3>& lights,
                                                          const TensorF& normals, const TensorF& mask,
                                                          const PhotometryOptions& opt = {}) {
  if (images.size() != lights.size())
    throw std::invalid_argument("decompose_weak_labels: image/light count mismatch");
  const int H = mask.dim(1), W = mask.dim(2);
  std::vector<WeakImageLabels> out;
  out.reserve(images.size());
  for (std::size_t j = 0; j < images.size(); ++j) {
    const Vec3& l = lights[j];
    Vec3 h = half_vector(l, kViewDir);
    WeakImageLabels lab;
    lab.bin = bin_of_dir(l);
    lab.shading = shade_lambert(normals, l);
    lab.albedo = TensorF({3, H, W});
    lab.specular_mask = TensorF({1, H, W});
    lab.supervised = TensorF({1, H, W});
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        if (mask.at(0, y, x) == 0.0f) continue;
        float s = lab.shading.at(0, y, x);
        float nh = normals.at(0, y, x) * static_cast<float>(h.x) +
                   normals.at(1, y, x) * static_cast<float>(h.y) +
                   normals.at(2, y, x) * static_cast<float>(h.z);
        bool spec = nh > static_cast<float>(opt.tau_specular);
        if (spec) lab.specular_mask.at(0, y, x) = 1.0f;
        if (s > 0.0f)
          for (int c = 0; c < 3; ++c)
            lab.albedo.at(c, y, x) =
                std::clamp(images[j].at(c, y, x) / (s + static_cast<float>(opt.eps_div)), 0.0f, 1.0f);
        if (!spec && s > static_cast<float>(opt.shading_floor)) lab.supervised.at(0, y, x) = 1.0f;
      }
    out.push_back(std::move(lab));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Scene directory serialization

inline constexpr const char* kSceneSchema = "ps2kit-scene-v1";

inline std::vector<Vec3> bin_center_lights() {
  std::vector<Vec3> lights;
  lights.reserve(kNumBins);
  for (int f = 0; f < kNumBins; ++f) lights.push_back(center_dir_of(LightBin::from_flat(f)));
  return lights;
}

/// Writes scene.json, albedo.png, normals.f32, mask.png plus one 16-bit
/// render per light and an index-aligned lights.txt.
inline void save_scene_dir(const std::filesystem::path& dir, const SyntheticScene& scene,
                           const std::vector<Vec3>& lights) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);

  nlohmann::json meta;
  meta["schema"] = kSceneSchema;
  meta["kind"] = to_string(scene.kind);
  meta["height"] = scene.height;
  meta["width"] = scene.width;
  meta["ks"] = scene.ks;
  meta["alpha"] = scene.alpha;
  meta["sigma"] = scene.sigma;
  meta["seed"] = scene.seed;
  if (scene.kind == GeometryKind::Heightfield) {
    std::vector<float> hv(scene.heights.data(), scene.heights.data() + scene.heights.numel());
    meta["heights"] = hv;
  }
  std::ofstream(dir / "scene.json") << meta.dump(2) << "\n";

  write_png((dir / "albedo.png").string(), scene.albedo, 8);
  write_png((dir / "mask.png").string(), scene.mask, 8);
  write_f32((dir / "normals.f32").string(), scene.normals);

  std::ofstream lf(dir / "lights.txt");
  lf.precision(17);
  char name[32];
  for (std::size_t j = 0; j < lights.size(); ++j) {
    RenderedImage r = render(scene, lights[j], static_cast<std::uint32_t>(scene.seed + 1000003u * (j + 1)));
    std::snprintf(name, sizeof(name), "img_%03zu.png", j);
    write_png((dir / name).string(), r.image, 16);
    lf << lights[j].x << " " << lights[j].y << " " << lights[j].z << "\n";
  }
}

}  // namespace ps2kit
