#include "ps2kit/photometry.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

using namespace ps2kit;

namespace {

double normal_mae_deg(const TensorF& est, const TensorF& gt, const TensorF& sel) {
  double sum = 0.0;
  int n = 0;
  for (int y = 0; y < sel.dim(1); ++y)
    for (int x = 0; x < sel.dim(2); ++x) {
      if (sel.at(0, y, x) == 0.0f) continue;
      Vec3 a{est.at(0, y, x), est.at(1, y, x), est.at(2, y, x)};
      Vec3 b{gt.at(0, y, x), gt.at(1, y, x), gt.at(2, y, x)};
      sum += angular_error_deg(a, b);
      ++n;
    }
  return n ? sum / n : 0.0;
}

TensorF intersect(const TensorF& a, const TensorF& b) {
  TensorF out = a;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b[i];
  return out;
}

std::vector<int> oracle_light_flats() { return {1, 3, 6, 8, 11, 12, 13, 16, 18, 21}; }

}  // namespace

TEST(Render, LambertianMatchesAlbedoTimesShadingExactly) {
  SyntheticScene s = make_sphere_scene(48, 0.0f, 32.0f, 0.0f, 7);
  Vec3 l = spherical_to_dir({30.0, 70.0});
  RenderedImage r = render(s, l, 99u);
  TensorF shading = shade_lambert(s.normals, l);
  for (int y = 0; y < 48; ++y)
    for (int x = 0; x < 48; ++x)
      for (int c = 0; c < 3; ++c) {
        float expect = s.mask.at(0, y, x) * s.albedo.at(c, y, x) * shading.at(0, y, x);
        EXPECT_EQ(r.image.at(c, y, x), expect) << "pixel " << y << "," << x << " ch " << c;
      }
}

TEST(Render, LinearInAlbedoWithoutSpecular) {
  SyntheticScene s = make_heightfield_scene(32, 0.0f, 32.0f, 0.0f, 3);
  SyntheticScene half = s;
  for (std::size_t i = 0; i < half.albedo.numel(); ++i) half.albedo[i] *= 0.5f;
  Vec3 l = spherical_to_dir({-20.0, 110.0});
  RenderedImage a = render(s, l, 1u), b = render(half, l, 1u);
  for (std::size_t i = 0; i < a.image.numel(); ++i) EXPECT_NEAR(b.image[i], 0.5f * a.image[i], 1e-6f);
}

TEST(Render, MaskedPixelsStayZero) {
  SyntheticScene s = make_sphere_scene(32, 0.3f, 16.0f, 0.05f, 11);
  RenderedImage r = render(s, spherical_to_dir({10.0, 45.0}), 5u);
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x)
      if (s.mask.at(0, y, x) == 0.0f)
        for (int c = 0; c < 3; ++c) EXPECT_EQ(r.image.at(c, y, x), 0.0f);
}

TEST(Render, DeterministicForFixedSeed) {
  SyntheticScene s = make_sphere_scene(24, 0.2f, 24.0f, 0.02f, 13);
  Vec3 l = spherical_to_dir({36.0, 126.0});
  RenderedImage a = render(s, l, 42u), b = render(s, l, 42u);
  for (std::size_t i = 0; i < a.image.numel(); ++i) EXPECT_EQ(a.image[i], b.image[i]);
  RenderedImage c = render(s, l, 43u);
  std::size_t diff = 0;
  for (std::size_t i = 0; i < a.image.numel(); ++i) diff += a.image[i] != c.image[i];
  EXPECT_GT(diff, 0u);
}

TEST(Render, SpecularPeakSitsWhereNormalAlignsWithHalfVector) {
  SyntheticScene plain = make_sphere_scene(96, 0.0f, 0.0f, 0.0f, 5);
  SyntheticScene shiny = plain;
  shiny.ks = 0.6f;
  shiny.alpha = 120.0f;
  Vec3 l = spherical_to_dir({20.0, 60.0});
  Vec3 h = half_vector(l, kViewDir);
  RenderedImage base = render(plain, l, 1u), spec = render(shiny, l, 1u);
  int by = -1, bx = -1;
  float best = -1.0f;
  for (int y = 0; y < 96; ++y)
    for (int x = 0; x < 96; ++x) {
      float excess = spec.image.at(0, y, x) - base.image.at(0, y, x);
      if (excess > best) best = excess, by = y, bx = x;
    }
  ASSERT_GT(best, 0.05f);
  Vec3 n{plain.normals.at(0, by, bx), plain.normals.at(1, by, bx), plain.normals.at(2, by, bx)};
  EXPECT_LT(angular_error_deg(n, h.normalized()), 3.0);
}

TEST(SceneGeometry, SphereNormalsUnitAndFrontFacing) {
  SyntheticScene s = make_sphere_scene(64, 0.0f, 1.0f, 0.0f, 2);
  int inside = 0;
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x) {
      if (s.mask.at(0, y, x) == 0.0f) continue;
      ++inside;
      Vec3 n{s.normals.at(0, y, x), s.normals.at(1, y, x), s.normals.at(2, y, x)};
      EXPECT_NEAR(n.norm(), 1.0, 1e-6);
      EXPECT_GT(n.z, 0.0);
    }
  EXPECT_GT(inside, 64 * 64 / 2);
  int cx = 32, cy = 32;
  Vec3 center{s.normals.at(0, cy, cx), s.normals.at(1, cy, cx), s.normals.at(2, cy, cx)};
  EXPECT_LT(angular_error_deg(center, {0.0, 0.0, 1.0}), 3.0);
}

TEST(SceneGeometry, HeightfieldNormalsMatchFiniteDifferences) {
  SyntheticScene s = make_heightfield_scene(64, 0.0f, 1.0f, 0.0f, 9);
  double worst = 0.0;
  for (int y = 1; y < 63; ++y)
    for (int x = 1; x < 63; ++x) {
      double dzdx = 0.5 * (s.heights.at(0, y, x + 1) - s.heights.at(0, y, x - 1));
      double dzdy_img = 0.5 * (s.heights.at(0, y + 1, x) - s.heights.at(0, y - 1, x));
      Vec3 fd = Vec3{-dzdx, dzdy_img, 1.0}.normalized();
      Vec3 n{s.normals.at(0, y, x), s.normals.at(1, y, x), s.normals.at(2, y, x)};
      worst = std::max(worst, angular_error_deg(n, fd));
    }
  EXPECT_LT(worst, 2.0);  // central differences on smooth waves
}

TEST(Lstsq, ExactOnHandBuiltOrthogonalSystem) {
  // one pixel, n = (1,1,1)/sqrt(3), rho known, orthonormal lights: every
  // observation is lit so the solve is exact
  TensorF mask = TensorF::full({1, 1, 1}, 1.0f);
  Vec3 n = Vec3{1.0, 1.0, 1.0}.normalized();
  float rho[3] = {0.8f, 0.5f, 0.3f};
  std::vector<Vec3> lights = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
  std::vector<TensorF> images;
  for (const Vec3& l : lights) {
    TensorF img({3, 1, 1});
    for (int c = 0; c < 3; ++c) img.at(c, 0, 0) = rho[c] * static_cast<float>(n.dot(l));
    images.push_back(img);
  }
  LstsqResult r = lstsq_normals(images, lights, mask);
  ASSERT_EQ(r.valid.at(0, 0, 0), 1.0f);
  Vec3 est{r.normals.at(0, 0, 0), r.normals.at(1, 0, 0), r.normals.at(2, 0, 0)};
  // float32 storage alone costs ~0.01 deg through acos near parallel
  EXPECT_LT(angular_error_deg(est, n), 0.02);
  for (int c = 0; c < 3; ++c) EXPECT_NEAR(r.albedo.at(c, 0, 0), rho[c], 1e-5f);
}

TEST(Lstsq, RecoversSphereBelowHalfDegreeNoiseless) {
  SyntheticScene s = make_sphere_scene(48, 0.0f, 1.0f, 0.0f, 21);
  std::vector<Vec3> lights;
  std::vector<TensorF> images;
  for (int f : oracle_light_flats()) {
    Vec3 l = center_dir_of(LightBin::from_flat(f));
    lights.push_back(l);
    images.push_back(render(s, l, 0u).image);
  }
  LstsqResult r = lstsq_normals(images, lights, s.mask);
  TensorF sel = intersect(r.valid, s.mask);
  std::size_t nsel = 0;
  for (std::size_t i = 0; i < sel.numel(); ++i) nsel += sel[i] != 0.0f;
  EXPECT_GT(nsel, s.mask.numel() / 4);
  EXPECT_LT(normal_mae_deg(r.normals, s.normals, sel), 0.5);
  double aerr = 0.0;
  for (int y = 0; y < 48; ++y)
    for (int x = 0; x < 48; ++x)
      if (sel.at(0, y, x) != 0.0f)
        for (int c = 0; c < 3; ++c)
          aerr = std::max(aerr, std::abs(static_cast<double>(r.albedo.at(c, y, x) - s.albedo.at(c, y, x))));
  EXPECT_LT(aerr, 1e-3);
}

TEST(Lstsq, StaysUnderFiveDegreesWithNoise) {
  SyntheticScene s = make_sphere_scene(48, 0.0f, 1.0f, 0.01f, 22);
  std::vector<Vec3> lights;
  std::vector<TensorF> images;
  std::uint32_t k = 0;
  for (int f : oracle_light_flats()) {
    Vec3 l = center_dir_of(LightBin::from_flat(f));
    lights.push_back(l);
    images.push_back(render(s, l, 1000u + 7u * k++).image);
  }
  LstsqResult r = lstsq_normals(images, lights, s.mask);
  EXPECT_LT(normal_mae_deg(r.normals, s.normals, intersect(r.valid, s.mask)), 5.0);
}

TEST(Lstsq, InvariantToUniformIntensityScaling) {
  SyntheticScene s = make_heightfield_scene(32, 0.0f, 1.0f, 0.0f, 23);
  std::vector<Vec3> lights;
  std::vector<TensorF> images, scaled;
  for (int f : oracle_light_flats()) {
    Vec3 l = center_dir_of(LightBin::from_flat(f));
    lights.push_back(l);
    TensorF img = render(s, l, 0u).image;
    TensorF img2 = img;
    for (std::size_t i = 0; i < img2.numel(); ++i) img2[i] *= 0.5f;
    images.push_back(img);
    scaled.push_back(img2);
  }
  LstsqResult a = lstsq_normals(images, lights, s.mask);
  LstsqResult b = lstsq_normals(scaled, lights, s.mask);
  for (std::size_t i = 0; i < a.valid.numel(); ++i) ASSERT_EQ(a.valid[i], b.valid[i]);
  EXPECT_LT(normal_mae_deg(a.normals, b.normals, a.valid), 0.05);
}

TEST(Lstsq, RejectsTooFewImages) {
  SyntheticScene s = make_sphere_scene(8, 0.0f, 1.0f, 0.0f, 1);
  std::vector<Vec3> lights = {{0, 0, 1}, {1, 0, 0}};
  std::vector<TensorF> images = {render(s, lights[0], 0u).image, render(s, lights[1], 0u).image};
  EXPECT_THROW(lstsq_normals(images, lights, s.mask), std::invalid_argument);
}

TEST(Lstsq, RejectsCoplanarLights) {
  SyntheticScene s = make_sphere_scene(8, 0.0f, 1.0f, 0.0f, 1);
  std::vector<Vec3> lights = {Vec3{1, 0, 1}.normalized(), Vec3{0, 0, 1}, Vec3{-0.5, 0, 1}.normalized(),
                              Vec3{0.25, 0, 1}.normalized()};
  std::vector<TensorF> images;
  for (const Vec3& l : lights) images.push_back(render(s, l, 0u).image);
  EXPECT_THROW(lstsq_normals(images, lights, s.mask), singular_error);
}

TEST(WeakLabels, AlbedoRoundTripsWhereSupervised) {
  SyntheticScene s = make_sphere_scene(48, 0.0f, 1.0f, 0.0f, 31);
  std::vector<Vec3> lights = {center_dir_of({1, 2}), center_dir_of({3, 1})};
  std::vector<TensorF> images;
  for (const Vec3& l : lights) images.push_back(render(s, l, 0u).image);
  auto labs = decompose_weak_labels(images, lights, s.normals, s.mask);
  ASSERT_EQ(labs.size(), 2u);
  for (std::size_t j = 0; j < 2; ++j) {
    EXPECT_EQ(labs[j].bin.flat(), bin_of_dir(lights[j]).flat());
    int covered = 0;
    for (int y = 0; y < 48; ++y)
      for (int x = 0; x < 48; ++x) {
        if (labs[j].supervised.at(0, y, x) == 0.0f) continue;
        ++covered;
        for (int c = 0; c < 3; ++c)
          EXPECT_NEAR(labs[j].albedo.at(c, y, x), s.albedo.at(c, y, x), 1e-3f);
      }
    EXPECT_GT(covered, 100);
  }
}

TEST(WeakLabels, ShadowedPixelsAreZeroAndUnsupervised) {
  SyntheticScene s = make_sphere_scene(48, 0.0f, 1.0f, 0.0f, 32);
  Vec3 l = center_dir_of({0, 0});  // low grazing light, plenty of attached shadow
  auto labs = decompose_weak_labels({render(s, l, 0u).image}, {l}, s.normals, s.mask);
  int shadowed = 0;
  for (int y = 0; y < 48; ++y)
    for (int x = 0; x < 48; ++x) {
      if (s.mask.at(0, y, x) == 0.0f || labs[0].shading.at(0, y, x) != 0.0f) continue;
      ++shadowed;
      EXPECT_EQ(labs[0].supervised.at(0, y, x), 0.0f);
      for (int c = 0; c < 3; ++c) EXPECT_EQ(labs[0].albedo.at(c, y, x), 0.0f);
    }
  EXPECT_GT(shadowed, 50);
}

TEST(WeakLabels, HighlightPixelsExcluded) {
  SyntheticScene s = make_sphere_scene(64, 0.5f, 80.0f, 0.0f, 33);
  Vec3 l = center_dir_of({2, 2});
  auto labs = decompose_weak_labels({render(s, l, 0u).image}, {l}, s.normals, s.mask,
                                    PhotometryOptions{});
  Vec3 h = half_vector(l, kViewDir);
  int hot = 0;
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x) {
      if (s.mask.at(0, y, x) == 0.0f) continue;
      float nh = s.normals.at(0, y, x) * static_cast<float>(h.x) +
                 s.normals.at(1, y, x) * static_cast<float>(h.y) +
                 s.normals.at(2, y, x) * static_cast<float>(h.z);
      bool expect_hot = nh > 0.99f;
      EXPECT_EQ(labs[0].specular_mask.at(0, y, x), expect_hot ? 1.0f : 0.0f);
      if (expect_hot) {
        ++hot;
        EXPECT_EQ(labs[0].supervised.at(0, y, x), 0.0f);
      }
    }
  EXPECT_GT(hot, 0);
}

TEST(SceneDir, RoundTripsThroughDisk) {
  namespace fs = std::filesystem;
  fs::path dir = fs::path(::testing::TempDir()) / "ps2kit_scene_rt";
  fs::remove_all(dir);
  SyntheticScene s = make_heightfield_scene(32, 0.1f, 24.0f, 0.0f, 77);
  std::vector<Vec3> lights = bin_center_lights();
  save_scene_dir(dir, s, lights);

  ASSERT_TRUE(fs::exists(dir / "scene.json"));
  nlohmann::json meta;
  std::ifstream(dir / "scene.json") >> meta;
  EXPECT_EQ(meta.at("schema").get<std::string>(), kSceneSchema);
  EXPECT_EQ(meta.at("kind").get<std::string>(), "heightfield");
  EXPECT_EQ(meta.at("height").get<int>(), 32);
  ASSERT_EQ(meta.at("heights").size(), 32u * 32u);

  TensorF normals = read_f32((dir / "normals.f32").string(), 3, 32, 32);
  for (std::size_t i = 0; i < normals.numel(); ++i) ASSERT_EQ(normals[i], s.normals[i]);

  TensorF mask = read_png((dir / "mask.png").string());
  ASSERT_EQ(mask.dim(0), 1);
  for (std::size_t i = 0; i < mask.numel(); ++i) ASSERT_EQ(mask[i], s.mask[i]);

  TensorF albedo = read_png((dir / "albedo.png").string());
  for (std::size_t i = 0; i < albedo.numel(); ++i)
    ASSERT_NEAR(albedo[i], s.albedo[i], 0.5f / 255.0f + 1e-6f);

  std::ifstream lf(dir / "lights.txt");
  std::string line;
  int rows = 0;
  while (std::getline(lf, line)) {
    std::istringstream ss(line);
    double x, y, z;
    ASSERT_TRUE(static_cast<bool>(ss >> x >> y >> z)) << line;
    EXPECT_NEAR(x, lights[static_cast<std::size_t>(rows)].x, 1e-12);
    EXPECT_NEAR(y, lights[static_cast<std::size_t>(rows)].y, 1e-12);
    EXPECT_NEAR(z, lights[static_cast<std::size_t>(rows)].z, 1e-12);
    ++rows;
  }
  EXPECT_EQ(rows, 25);

  for (int j = 0; j < 25; ++j) {
    char name[32];
    std::snprintf(name, sizeof(name), "img_%03d.png", j);
    ASSERT_TRUE(fs::exists(dir / name));
  }
  TensorF img0 = read_png((dir / "img_000.png").string());
  RenderedImage expect = render(s, lights[0], static_cast<std::uint32_t>(s.seed + 1000003u));
  for (std::size_t i = 0; i < img0.numel(); ++i)
    ASSERT_NEAR(img0[i], expect.image[i], 0.5f / 65535.0f + 1e-6f);
  fs::remove_all(dir);
}

TEST(SceneDir, BinCenterLightsCoverAllBins) {
  std::vector<Vec3> lights = bin_center_lights();
  ASSERT_EQ(lights.size(), 25u);
  for (int f = 0; f < 25; ++f) EXPECT_EQ(bin_of_dir(lights[static_cast<std::size_t>(f)]).flat(), f);
}
