#pragma once

#include <array>
#include <cmath>
#include <stdexcept>

#include "ps2kit/geometry.hpp"

namespace ps2kit {

// 5x5 discretization of the upper hemisphere: azimuth bins over [0, 180],
// elevation bins over [-90, 90], both with 36 degree pitch.
inline constexpr int kBinsPerAxis = 5;
inline constexpr int kNumBins = kBinsPerAxis * kBinsPerAxis;
inline constexpr double kBinPitchDeg = 36.0;
inline constexpr double kBinHalfWidthDeg = 18.0;

inline constexpr std::array<double, 5> kAzimuthCentersDeg = {18.0, 54.0, 90.0, 126.0, 162.0};
inline constexpr std::array<double, 5> kElevationCentersDeg = {-72.0, -36.0, 0.0, 36.0, 72.0};

struct LightBin {
  int az_idx = 0;  // [0, 4]
  int el_idx = 0;  // [0, 4]

  bool operator==(const LightBin&) const = default;
  int flat() const { return kBinsPerAxis * el_idx + az_idx; }
  static LightBin from_flat(int f) { return {f % kBinsPerAxis, f / kBinsPerAxis}; }
};

inline bool valid_bin(const LightBin& b) {
  return b.az_idx >= 0 && b.az_idx < kBinsPerAxis && b.el_idx >= 0 && b.el_idx < kBinsPerAxis;
}

/// Boundary angles (multiples of 36) fall into the higher-index bin; the top
/// boundary of each axis clamps down into the last bin.
inline LightBin bin_of(const SphericalLight& s) {
  if (!in_light_range(s)) throw std::domain_error("bin_of: angles out of range");
  int az = static_cast<int>(std::floor(s.azimuth_deg / kBinPitchDeg));
  int el = static_cast<int>(std::floor((s.elevation_deg + 90.0) / kBinPitchDeg));
  return {std::clamp(az, 0, kBinsPerAxis - 1), std::clamp(el, 0, kBinsPerAxis - 1)};
}

inline LightBin bin_of_dir(const Vec3& d) { return bin_of(dir_to_spherical(d)); }

inline SphericalLight center_of(const LightBin& b) {
  if (!valid_bin(b)) throw std::domain_error("center_of: invalid bin");
  return {kElevationCentersDeg[b.el_idx], kAzimuthCentersDeg[b.az_idx]};
}

inline Vec3 center_dir_of(const LightBin& b) { return spherical_to_dir(center_of(b)); }

struct BinOneHot {
  std::array<double, 5> elevation{};
  std::array<double, 5> azimuth{};
};

/// Classification targets for the two 5-way lighting heads.
inline BinOneHot one_hot_targets(const LightBin& b) {
  if (!valid_bin(b)) throw std::domain_error("one_hot_targets: invalid bin");
  BinOneHot t;
  t.elevation[b.el_idx] = 1.0;
  t.azimuth[b.az_idx] = 1.0;
  return t;
}

}  // namespace ps2kit
