#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "ps2kit/errors.hpp"

namespace ps2kit {

inline constexpr double kPi = 3.14159265358979323846;

inline double deg2rad(double d) { return d * kPi / 180.0; }
inline double rad2deg(double r) { return r * 180.0 / kPi; }

struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  double norm() const { return std::sqrt(x * x + y * y + z * z); }

  Vec3 normalized() const {
    double n = norm();
    if (n == 0.0) throw std::domain_error("Vec3::normalized: zero vector");
    return {x / n, y / n, z / n};
  }
};

/// Camera looks down +z; image plane is the xy plane.
inline constexpr Vec3 kViewDir{0.0, 0.0, 1.0};

/// Light direction in angles: elevation about the y axis, azimuth sweeping
/// the upper hemisphere from +x (0 deg) through +z (90 deg) to -x (180 deg).
struct SphericalLight {
  double elevation_deg = 0.0;  // [-90, 90]
  double azimuth_deg = 90.0;   // [0, 180]
};

inline bool in_light_range(const SphericalLight& s) {
  return s.elevation_deg >= -90.0 && s.elevation_deg <= 90.0 &&
         s.azimuth_deg >= 0.0 && s.azimuth_deg <= 180.0;
}

/// (theta=0, phi=90) maps to [0,0,1]; z component is always >= 0.
inline Vec3 spherical_to_dir(const SphericalLight& s) {
  if (!in_light_range(s))
    throw std::domain_error("spherical_to_dir: angles out of range");
  double th = deg2rad(s.elevation_deg);
  double ph = deg2rad(s.azimuth_deg);
  return {std::cos(th) * std::cos(ph), std::sin(th), std::cos(th) * std::sin(ph)};
}

/// Inverse of spherical_to_dir for unit vectors with z >= 0.
inline SphericalLight dir_to_spherical(const Vec3& d) {
  double y = std::clamp(d.y, -1.0, 1.0);
  double th = std::asin(y);
  double ph = std::atan2(d.z, d.x);
  return {rad2deg(th), rad2deg(ph)};
}

/// h = (l + v) / ||l + v||. Inputs must be unit and not antiparallel.
inline Vec3 half_vector(const Vec3& l, const Vec3& v) {
  Vec3 s = l + v;
  double n = s.norm();
  if (n < 1e-9)
    throw std::domain_error("half_vector: antiparallel directions");
  return {s.x / n, s.y / n, s.z / n};
}

/// [p, gamma(p)] with gamma(eta) = [sin(2^0 pi eta), cos(2^0 pi eta), ...,
/// sin(2^(m-1) pi eta), cos(2^(m-1) pi eta)] applied per scalar.
/// Output length = len(p) * (1 + 2m).
inline std::vector<double> positional_encode(const std::vector<double>& p, int m) {
  if (m < 1) throw std::domain_error("positional_encode: m must be >= 1");
  std::vector<double> out;
  out.reserve(p.size() * (1 + 2 * static_cast<std::size_t>(m)));
  out.insert(out.end(), p.begin(), p.end());
  for (double eta : p) {
    double freq = kPi;
    for (int k = 0; k < m; ++k) {
      out.push_back(std::sin(freq * eta));
      out.push_back(std::cos(freq * eta));
      freq *= 2.0;
    }
  }
  return out;
}

/// arccos of the clamped dot product, in degrees in [0, 180].
inline double angular_error_deg(const Vec3& n1, const Vec3& n2) {
  double d = std::clamp(n1.dot(n2), -1.0, 1.0);
  return rad2deg(std::acos(d));
}

}  // namespace ps2kit
