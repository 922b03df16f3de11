#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "segqa/grid.hpp"
#include "segqa/rng.hpp"

namespace segqa {

struct NoiseLevel {
  double n = 1.0;
  NoiseLevel() = default;
  explicit NoiseLevel(double level) : n(level) {
    if (!(n > 0.0)) throw ValidationError("NoiseLevel: n must be > 0");
  }
};

inline const std::vector<double>& default_noise_levels() {
  static const std::vector<double> levels{0.01, 1.0, 2.0, 4.0, 6.0, 8.0};
  return levels;
}

// One sample of the photon-noise model on the [0, 255] intensity scale:
// draw k ~ Poisson(intensity / n) and return k * n.
inline double poisson_sample_255(double intensity, double n, Rng& rng) {
  if (!(n > 0.0)) throw ValidationError("poisson_sample_255: n must be > 0");
  return static_cast<double>(rng.poisson(intensity / n)) * n;
}

// Poisson noise at level n: intensities are discretized to [0, 255],
// per voxel a Poisson sample with mean I/n is drawn and scaled back by n,
// then the result is mapped back to [0, 1] (clamped).
inline Volume add_poisson_noise(const Volume& vol, NoiseLevel level, std::uint64_t seed) {
  vol.validate();
  for (float v : vol.data)
    if (!std::isfinite(v)) throw ValidationError("add_poisson_noise: non-finite intensity");
  Rng rng(hash_combine(seed, 0x9051a7a5u));
  Volume out(vol.dims, vol.spacing);
  for (std::size_t i = 0; i < vol.data.size(); ++i) {
    double disc = std::llround(std::clamp(static_cast<double>(vol.data[i]), 0.0, 1.0) * 255.0);
    double noisy = poisson_sample_255(disc, level.n, rng);
    out.data[i] = static_cast<float>(std::clamp(noisy / 255.0, 0.0, 1.0));
  }
  return out;
}

// Raises intensities inside the mask by delta, with a one-voxel smooth
// falloff at the mask boundary; output clamped to [0, 1].
inline Volume contrast_enhance(const Volume& vol, const LabelMap& heart_mask, double delta) {
  vol.validate();
  heart_mask.validate();
  if (vol.dims != heart_mask.dims) throw ValidationError("contrast_enhance: dims mismatch");
  bool any = false;
  for (std::uint8_t v : heart_mask.labels)
    if (v != 0) {
      any = true;
      break;
    }
  if (!any) throw ValidationError("contrast_enhance: empty mask");

  // one-voxel blur of the mask indicator: separable 3-tap binomial kernel
  const Dims& d = vol.dims;
  std::vector<float> w(vol.size()), tmp(vol.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = heart_mask.labels[i] != 0 ? 1.0f : 0.0f;
  auto pass = [&](const std::vector<float>& src, std::vector<float>& dst, int axis) {
    for (int z = 0; z < d[2]; ++z)
      for (int y = 0; y < d[1]; ++y)
        for (int x = 0; x < d[0]; ++x) {
          auto sample = [&](int i) {
            int xx = x, yy = y, zz = z;
            if (axis == 0) xx = std::clamp(x + i, 0, d[0] - 1);
            if (axis == 1) yy = std::clamp(y + i, 0, d[1] - 1);
            if (axis == 2) zz = std::clamp(z + i, 0, d[2] - 1);
            return src[vol.index(xx, yy, zz)];
          };
          dst[vol.index(x, y, z)] = 0.25f * sample(-1) + 0.5f * sample(0) + 0.25f * sample(1);
        }
  };
  pass(w, tmp, 0);
  pass(tmp, w, 1);
  pass(w, tmp, 2);

  Volume out = vol;
  for (std::size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = static_cast<float>(
        std::clamp(static_cast<double>(vol.data[i]) + delta * tmp[i], 0.0, 1.0));
  return out;
}

namespace detail {

template <typename Grid>
inline Grid flip_grid(const Grid& g, int axis) {
  Grid out = g;
  const Dims& d = g.dims;
  for (int z = 0; z < d[2]; ++z)
    for (int y = 0; y < d[1]; ++y)
      for (int x = 0; x < d[0]; ++x) {
        int sx = axis == 0 ? d[0] - 1 - x : x;
        int sy = axis == 1 ? d[1] - 1 - y : y;
        int sz = axis == 2 ? d[2] - 1 - z : z;
        out.at(x, y, z) = g.at(sx, sy, sz);
      }
  return out;
}

}  // namespace detail

// Mirrors both grids along the given axis (0 = x, 1 = y, 2 = z).
inline std::pair<Volume, LabelMap> flip_axis(const Volume& vol, const LabelMap& labels, int axis) {
  if (axis < 0 || axis > 2) throw ValidationError("flip_axis: axis must be 0, 1 or 2");
  if (vol.dims != labels.dims) throw ValidationError("flip_axis: dims mismatch");
  return {detail::flip_grid(vol, axis), detail::flip_grid(labels, axis)};
}

// Emulates a coarser reconstruction: downsample along z by `factor`, then
// sample back onto the original grid (trilinear for the volume, nearest for
// labels). Dims and spacing are restored exactly.
inline std::pair<Volume, LabelMap> resample_degrade(const Volume& vol, const LabelMap& labels,
                                                    double factor) {
  if (factor < 1.0) throw ValidationError("resample_degrade: factor must be >= 1");
  vol.validate();
  labels.validate();
  if (vol.dims != labels.dims) throw ValidationError("resample_degrade: dims mismatch");
  if (factor == 1.0) return {vol, labels};
  Spacing coarse = vol.spacing;
  coarse[2] *= factor;
  Volume down_v = resample(vol, coarse);
  LabelMap down_l = resample(labels, coarse);
  return {resample_to(down_v, vol.dims, vol.spacing), resample_to(down_l, labels.dims, labels.spacing)};
}

// Inserts a saturated ellipsoidal blob plus 4-8 radial high/low streaks
// through it, approximating a metal implant with beam artifacts.
inline Volume insert_artifact(const Volume& vol, std::uint64_t seed) {
  vol.validate();
  Rng rng(hash_combine(seed, 0xa37f00du));
  const Dims& d = vol.dims;
  Volume out = vol;

  double cx = d[0] * rng.uniform(0.38, 0.62);
  double cy = d[1] * rng.uniform(0.38, 0.62);
  double cz = d[2] * rng.uniform(0.40, 0.60);
  double rx = std::max(1.5, d[0] * rng.uniform(0.03, 0.06));
  double ry = std::max(1.5, d[1] * rng.uniform(0.03, 0.06));
  double rz = std::max(1.5, d[2] * rng.uniform(0.03, 0.06));

  int n_streaks = rng.range(4, 8);
  struct Streak {
    double dx, dy, amp;
  };
  std::vector<Streak> streaks(static_cast<std::size_t>(n_streaks));
  for (int s = 0; s < n_streaks; ++s) {
    double angle = rng.uniform(0.0, std::numbers::pi);
    double amp = rng.uniform(0.25, 0.45) * (s % 2 == 0 ? 1.0 : -1.0);
    streaks[static_cast<std::size_t>(s)] = {std::cos(angle), std::sin(angle), amp};
  }

  const double decay = 0.35 * std::max({d[0], d[1], d[2]});
  for (int z = 0; z < d[2]; ++z)
    for (int y = 0; y < d[1]; ++y)
      for (int x = 0; x < d[0]; ++x) {
        double ex = (x - cx) / rx, ey = (y - cy) / ry, ez = (z - cz) / rz;
        if (ex * ex + ey * ey + ez * ez <= 1.0) {
          out.at(x, y, z) = 1.0f;
          continue;
        }
        if (std::abs(z - cz) > rz + 1.5) continue;  // streaks live near the blob plane
        double px = x - cx, py = y - cy;
        double rad = std::sqrt(px * px + py * py);
        if (rad < 1e-9) continue;
        double v = out.at(x, y, z);
        for (const Streak& s : streaks) {
          // distance of the voxel from the streak line through the blob center
          double dist = std::abs(px * s.dy - py * s.dx);
          if (dist < 0.9) v += s.amp * std::exp(-rad / decay);
        }
        out.at(x, y, z) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
  return out;
}

// Smooth random displacement field (Gaussian-smoothed noise scaled so the
// peak displacement equals `magnitude` voxels) warped identically into both
// grids; trilinear sampling for the volume, nearest for labels.
inline std::pair<Volume, LabelMap> deform(const Volume& vol, const LabelMap& labels,
                                          double magnitude, std::uint64_t seed) {
  if (magnitude < 0.0) throw ValidationError("deform: magnitude must be >= 0");
  vol.validate();
  labels.validate();
  if (vol.dims != labels.dims) throw ValidationError("deform: dims mismatch");
  if (magnitude == 0.0) return {vol, labels};

  Rng rng(hash_combine(seed, 0xdef0421u));
  const Dims& d = vol.dims;
  std::array<Volume, 3> field;
  double peak = 0.0;
  for (int c = 0; c < 3; ++c) {
    Volume noise(d, vol.spacing);
    for (float& v : noise.data) v = static_cast<float>(rng.normal());
    field[c] = gaussian_blur(noise, 4.0);
    for (float v : field[c].data) peak = std::max(peak, static_cast<double>(std::abs(v)));
  }
  double scale = peak > 0.0 ? magnitude / peak : 0.0;

  Volume out_v(d, vol.spacing);
  LabelMap out_l(d, labels.spacing);
  for (int z = 0; z < d[2]; ++z)
    for (int y = 0; y < d[1]; ++y)
      for (int x = 0; x < d[0]; ++x) {
        std::size_t i = vol.index(x, y, z);
        double ux = std::clamp(x - scale * field[0].data[i], 0.0, static_cast<double>(d[0] - 1));
        double uy = std::clamp(y - scale * field[1].data[i], 0.0, static_cast<double>(d[1] - 1));
        double uz = std::clamp(z - scale * field[2].data[i], 0.0, static_cast<double>(d[2] - 1));
        int x0 = static_cast<int>(ux), y0 = static_cast<int>(uy), z0 = static_cast<int>(uz);
        int x1 = std::min(x0 + 1, d[0] - 1), y1 = std::min(y0 + 1, d[1] - 1),
            z1 = std::min(z0 + 1, d[2] - 1);
        double fx = ux - x0, fy = uy - y0, fz = uz - z0;
        double c00 = vol.at(x0, y0, z0) * (1 - fx) + vol.at(x1, y0, z0) * fx;
        double c10 = vol.at(x0, y1, z0) * (1 - fx) + vol.at(x1, y1, z0) * fx;
        double c01 = vol.at(x0, y0, z1) * (1 - fx) + vol.at(x1, y0, z1) * fx;
        double c11 = vol.at(x0, y1, z1) * (1 - fx) + vol.at(x1, y1, z1) * fx;
        out_v.at(x, y, z) = static_cast<float>((c00 * (1 - fy) + c10 * fy) * (1 - fz) +
                                               (c01 * (1 - fy) + c11 * fy) * fz);
        out_l.at(x, y, z) =
            labels.at(static_cast<int>(std::llround(ux)), static_cast<int>(std::llround(uy)),
                      static_cast<int>(std::llround(uz)));
      }
  return {std::move(out_v), std::move(out_l)};
}

}  // namespace segqa
