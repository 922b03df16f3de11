#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "segqa/rng.hpp"

namespace segqa {

inline constexpr int kNumLabels = 10;  // background + 9 structures

using Dims = std::array<int, 3>;
using Spacing = std::array<double, 3>;

inline std::int64_t voxel_count(const Dims& d) {
  return static_cast<std::int64_t>(d[0]) * d[1] * d[2];
}

// 3D scalar intensity grid with physical spacing, x-fastest layout.
struct Volume {
  Dims dims{0, 0, 0};
  Spacing spacing{1.0, 1.0, 1.0};
  std::vector<float> data;

  Volume() = default;
  Volume(Dims d, Spacing s, float fill = 0.0f)
      : dims(d), spacing(s), data(static_cast<std::size_t>(voxel_count(d)), fill) {
    validate();
  }

  std::size_t index(int x, int y, int z) const {
    return static_cast<std::size_t>(x) +
           static_cast<std::size_t>(dims[0]) * (static_cast<std::size_t>(y) +
                                                static_cast<std::size_t>(dims[1]) * z);
  }
  float& at(int x, int y, int z) { return data[index(x, y, z)]; }
  float at(int x, int y, int z) const { return data[index(x, y, z)]; }
  std::size_t size() const { return data.size(); }

  void validate() const {
    for (int k = 0; k < 3; ++k) {
      if (dims[k] <= 0) throw ValidationError("Volume: dims must be positive");
      if (!(spacing[k] > 0.0)) throw ValidationError("Volume: spacing must be positive");
    }
    if (static_cast<std::int64_t>(data.size()) != voxel_count(dims))
      throw ValidationError("Volume: data length does not match dims");
  }
};

// 3D integer grid of structure labels, 0 = background.
struct LabelMap {
  Dims dims{0, 0, 0};
  Spacing spacing{1.0, 1.0, 1.0};
  std::vector<std::uint8_t> labels;

  LabelMap() = default;
  LabelMap(Dims d, Spacing s, std::uint8_t fill = 0)
      : dims(d), spacing(s), labels(static_cast<std::size_t>(voxel_count(d)), fill) {
    validate();
  }

  std::size_t index(int x, int y, int z) const {
    return static_cast<std::size_t>(x) +
           static_cast<std::size_t>(dims[0]) * (static_cast<std::size_t>(y) +
                                                static_cast<std::size_t>(dims[1]) * z);
  }
  std::uint8_t& at(int x, int y, int z) { return labels[index(x, y, z)]; }
  std::uint8_t at(int x, int y, int z) const { return labels[index(x, y, z)]; }
  std::size_t size() const { return labels.size(); }

  void validate() const {
    for (int k = 0; k < 3; ++k) {
      if (dims[k] <= 0) throw ValidationError("LabelMap: dims must be positive");
      if (!(spacing[k] > 0.0)) throw ValidationError("LabelMap: spacing must be positive");
    }
    if (static_cast<std::int64_t>(labels.size()) != voxel_count(dims))
      throw ValidationError("LabelMap: label length does not match dims");
    for (std::uint8_t v : labels)
      if (v >= kNumLabels) throw ValidationError("LabelMap: label value out of range");
  }
};

// Per-structure probability channels; channel sums are 1 at every voxel.
struct OneHotMap {
  Dims dims{0, 0, 0};
  std::vector<float> data;  // [channel][z][y][x]

  std::size_t channel_size() const { return static_cast<std::size_t>(voxel_count(dims)); }
  float& at(int c, std::size_t voxel) { return data[c * channel_size() + voxel]; }
  float at(int c, std::size_t voxel) const { return data[c * channel_size() + voxel]; }
};

inline OneHotMap one_hot(const LabelMap& lm) {
  OneHotMap oh;
  oh.dims = lm.dims;
  oh.data.assign(static_cast<std::size_t>(kNumLabels) * lm.size(), 0.0f);
  for (std::size_t i = 0; i < lm.size(); ++i) oh.data[lm.labels[i] * lm.size() + i] = 1.0f;
  return oh;
}

namespace detail {

inline int floor_div(int a, int b) {
  int q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

inline Dims resampled_dims(const Dims& dims, const Spacing& from, const Spacing& to) {
  Dims out;
  for (int k = 0; k < 3; ++k) {
    if (dims[k] == 1) {
      out[k] = 1;
      continue;
    }
    double extent = static_cast<double>(dims[k] - 1) * from[k];
    out[k] = static_cast<int>(std::llround(extent / to[k])) + 1;
    if (out[k] < 1) out[k] = 1;
  }
  return out;
}

}  // namespace detail

// Trilinear resampling of a volume onto an explicit output grid. Grid nodes
// sit at index * spacing; samples outside the input extent clamp to the border.
inline Volume resample_to(const Volume& vol, const Dims& out_dims, const Spacing& out_spacing) {
  vol.validate();
  Volume out(out_dims, out_spacing);
  const Dims& d = vol.dims;
  for (int z = 0; z < out_dims[2]; ++z) {
    double uz = std::clamp(z * out_spacing[2] / vol.spacing[2], 0.0, static_cast<double>(d[2] - 1));
    int z0 = static_cast<int>(uz);
    int z1 = std::min(z0 + 1, d[2] - 1);
    double fz = uz - z0;
    for (int y = 0; y < out_dims[1]; ++y) {
      double uy = std::clamp(y * out_spacing[1] / vol.spacing[1], 0.0, static_cast<double>(d[1] - 1));
      int y0 = static_cast<int>(uy);
      int y1 = std::min(y0 + 1, d[1] - 1);
      double fy = uy - y0;
      for (int x = 0; x < out_dims[0]; ++x) {
        double ux = std::clamp(x * out_spacing[0] / vol.spacing[0], 0.0, static_cast<double>(d[0] - 1));
        int x0 = static_cast<int>(ux);
        int x1 = std::min(x0 + 1, d[0] - 1);
        double fx = ux - x0;
        double c00 = vol.at(x0, y0, z0) * (1 - fx) + vol.at(x1, y0, z0) * fx;
        double c10 = vol.at(x0, y1, z0) * (1 - fx) + vol.at(x1, y1, z0) * fx;
        double c01 = vol.at(x0, y0, z1) * (1 - fx) + vol.at(x1, y0, z1) * fx;
        double c11 = vol.at(x0, y1, z1) * (1 - fx) + vol.at(x1, y1, z1) * fx;
        double c0 = c00 * (1 - fy) + c10 * fy;
        double c1 = c01 * (1 - fy) + c11 * fy;
        out.at(x, y, z) = static_cast<float>(c0 * (1 - fz) + c1 * fz);
      }
    }
  }
  return out;
}

inline LabelMap resample_to(const LabelMap& lm, const Dims& out_dims, const Spacing& out_spacing) {
  lm.validate();
  LabelMap out(out_dims, out_spacing);
  const Dims& d = lm.dims;
  for (int z = 0; z < out_dims[2]; ++z) {
    int zi = std::clamp(static_cast<int>(std::llround(z * out_spacing[2] / lm.spacing[2])), 0, d[2] - 1);
    for (int y = 0; y < out_dims[1]; ++y) {
      int yi = std::clamp(static_cast<int>(std::llround(y * out_spacing[1] / lm.spacing[1])), 0, d[1] - 1);
      for (int x = 0; x < out_dims[0]; ++x) {
        int xi = std::clamp(static_cast<int>(std::llround(x * out_spacing[0] / lm.spacing[0])), 0, d[0] - 1);
        out.at(x, y, z) = lm.at(xi, yi, zi);
      }
    }
  }
  return out;
}

template <typename Grid>
inline Grid resample(const Grid& g, const Spacing& target_spacing) {
  for (double s : target_spacing)
    if (!(s > 0.0)) throw ValidationError("resample: target spacing must be positive");
  if (g.size() == 0) throw ValidationError("resample: empty grid");
  if (target_spacing == g.spacing) return g;  // exact identity
  return resample_to(g, detail::resampled_dims(g.dims, g.spacing, target_spacing), target_spacing);
}

// Tight inclusive bounding box of nonzero labels; throws if all background.
inline std::array<int, 6> label_bounding_box(const LabelMap& lm) {
  std::array<int, 6> box{lm.dims[0], lm.dims[1], lm.dims[2], -1, -1, -1};
  for (int z = 0; z < lm.dims[2]; ++z)
    for (int y = 0; y < lm.dims[1]; ++y)
      for (int x = 0; x < lm.dims[0]; ++x)
        if (lm.at(x, y, z) != 0) {
          box[0] = std::min(box[0], x);
          box[1] = std::min(box[1], y);
          box[2] = std::min(box[2], z);
          box[3] = std::max(box[3], x);
          box[4] = std::max(box[4], y);
          box[5] = std::max(box[5], z);
        }
  if (box[3] < 0) throw ValidationError("label_bounding_box: all-background label map");
  return box;
}

// Crops both grids to roi_size, centered on the bounding box of nonzero
// labels. Regions outside the input are padded with 0 (normalized background).
inline std::pair<Volume, LabelMap> crop_roi(const Volume& vol, const LabelMap& labels,
                                            const Dims& roi_size) {
  vol.validate();
  labels.validate();
  if (vol.dims != labels.dims) throw ValidationError("crop_roi: volume/label dims mismatch");
  for (int k = 0; k < 3; ++k)
    if (roi_size[k] <= 0) throw ValidationError("crop_roi: roi_size must be positive");
  auto box = label_bounding_box(labels);
  std::array<int, 3> start;
  for (int k = 0; k < 3; ++k) {
    int extent = box[k + 3] - box[k] + 1;
    if (extent > roi_size[k])
      std::fprintf(stderr, "crop_roi: roi axis %d (%d) smaller than label box (%d); center-cropping\n",
                   k, roi_size[k], extent);
    start[k] = box[k] + detail::floor_div(extent - roi_size[k], 2);
  }
  Volume out_v(roi_size, vol.spacing);
  LabelMap out_l(roi_size, labels.spacing);
  for (int z = 0; z < roi_size[2]; ++z)
    for (int y = 0; y < roi_size[1]; ++y)
      for (int x = 0; x < roi_size[0]; ++x) {
        int sx = start[0] + x, sy = start[1] + y, sz = start[2] + z;
        if (sx >= 0 && sx < vol.dims[0] && sy >= 0 && sy < vol.dims[1] && sz >= 0 &&
            sz < vol.dims[2]) {
          out_v.at(x, y, z) = vol.at(sx, sy, sz);
          out_l.at(x, y, z) = labels.at(sx, sy, sz);
        }
      }
  return {std::move(out_v), std::move(out_l)};
}

// Affine min/max normalization to [0, 1]; a constant volume maps to zeros.
inline Volume normalize(const Volume& vol) {
  vol.validate();
  auto [lo_it, hi_it] = std::minmax_element(vol.data.begin(), vol.data.end());
  float lo = *lo_it, hi = *hi_it;
  Volume out = vol;
  if (hi == lo) {
    std::fill(out.data.begin(), out.data.end(), 0.0f);
    return out;
  }
  float scale = 1.0f / (hi - lo);
  for (float& v : out.data) v = (v - lo) * scale;
  return out;
}

// 3x3x3 median filter with clamp-to-border replication.
inline Volume median_filter3(const Volume& vol) {
  vol.validate();
  for (int k = 0; k < 3; ++k)
    if (vol.dims[k] < 1) throw ValidationError("median_filter3: empty grid");
  Volume out(vol.dims, vol.spacing);
  const Dims& d = vol.dims;
#pragma omp parallel for schedule(static)
  for (int z = 0; z < d[2]; ++z) {
    float window[27];
    for (int y = 0; y < d[1]; ++y)
      for (int x = 0; x < d[0]; ++x) {
        int n = 0;
        for (int dz = -1; dz <= 1; ++dz) {
          int zz = std::clamp(z + dz, 0, d[2] - 1);
          for (int dy = -1; dy <= 1; ++dy) {
            int yy = std::clamp(y + dy, 0, d[1] - 1);
            for (int dx = -1; dx <= 1; ++dx) {
              int xx = std::clamp(x + dx, 0, d[0] - 1);
              window[n++] = vol.at(xx, yy, zz);
            }
          }
        }
        std::nth_element(window, window + 13, window + 27);
        out.at(x, y, z) = window[13];
      }
  }
  return out;
}

// Separable Gaussian blur, kernel truncated at ceil(3*sigma) voxels.
inline Volume gaussian_blur(const Volume& vol, double sigma) {
  vol.validate();
  if (sigma <= 0.0) return vol;
  int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> kernel(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
    sum += kernel[i + radius];
  }
  for (double& k : kernel) k /= sum;

  Volume tmp = vol, out = vol;
  const Dims& d = vol.dims;
  auto pass = [&](const Volume& src, Volume& dst, int axis) {
    for (int z = 0; z < d[2]; ++z)
      for (int y = 0; y < d[1]; ++y)
        for (int x = 0; x < d[0]; ++x) {
          double acc = 0.0;
          for (int i = -radius; i <= radius; ++i) {
            int xx = x, yy = y, zz = z;
            if (axis == 0) xx = std::clamp(x + i, 0, d[0] - 1);
            if (axis == 1) yy = std::clamp(y + i, 0, d[1] - 1);
            if (axis == 2) zz = std::clamp(z + i, 0, d[2] - 1);
            acc += kernel[i + radius] * src.at(xx, yy, zz);
          }
          dst.at(x, y, z) = static_cast<float>(acc);
        }
  };
  pass(vol, tmp, 0);
  pass(tmp, out, 1);
  pass(out, tmp, 2);
  return tmp;
}

// ---------------------------------------------------------------------------
// File I/O: raw little-endian payload at `path`, JSON sidecar at `path.json`
// naming dims, spacing, dtype and byte order. Round-trips are bit-exact.
// ---------------------------------------------------------------------------

namespace detail {

static_assert(std::endian::native == std::endian::little,
              "grid I/O assumes a little-endian host");

inline nlohmann::json read_sidecar(const std::string& path, const char* expected_dtype) {
  std::ifstream hf(path + ".json");
  if (!hf) throw ValidationError("cannot open header: " + path + ".json");
  nlohmann::json h;
  try {
    hf >> h;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("malformed header " + path + ".json: " + e.what());
  }
  if (!h.contains("dims") || !h.contains("spacing") || !h.contains("dtype"))
    throw ValidationError("header missing required fields: " + path + ".json");
  if (h["dtype"] != expected_dtype)
    throw ValidationError("unsupported dtype '" + h["dtype"].get<std::string>() + "' in " + path);
  if (h.value("byte_order", "little") != "little")
    throw ValidationError("unsupported byte order in " + path);
  return h;
}

template <typename T>
inline std::vector<T> read_payload(const std::string& path, std::int64_t count) {
  std::ifstream pf(path, std::ios::binary);
  if (!pf) throw ValidationError("cannot open payload: " + path);
  pf.seekg(0, std::ios::end);
  auto bytes = static_cast<std::int64_t>(pf.tellg());
  if (bytes != count * static_cast<std::int64_t>(sizeof(T)))
    throw ValidationError("payload length mismatch in " + path);
  pf.seekg(0);
  std::vector<T> data(static_cast<std::size_t>(count));
  pf.read(reinterpret_cast<char*>(data.data()), bytes);
  if (!pf) throw ValidationError("short read on " + path);
  return data;
}

template <typename T>
inline void write_grid(const std::string& path, const Dims& dims, const Spacing& spacing,
                       const char* dtype, const std::vector<T>& data) {
  nlohmann::json h{{"dims", dims}, {"spacing", spacing}, {"dtype", dtype}, {"byte_order", "little"}};
  std::ofstream hf(path + ".json");
  if (!hf) throw ValidationError("cannot write header: " + path + ".json");
  hf << h.dump(2) << "\n";
  std::ofstream pf(path, std::ios::binary);
  if (!pf) throw ValidationError("cannot write payload: " + path);
  pf.write(reinterpret_cast<const char*>(data.data()),
           static_cast<std::streamsize>(data.size() * sizeof(T)));
}

}  // namespace detail

inline void write_volume(const Volume& vol, const std::string& path) {
  vol.validate();
  detail::write_grid(path, vol.dims, vol.spacing, "float32", vol.data);
}

inline Volume read_volume(const std::string& path) {
  auto h = detail::read_sidecar(path, "float32");
  Volume v;
  v.dims = h["dims"].get<Dims>();
  v.spacing = h["spacing"].get<Spacing>();
  for (int k = 0; k < 3; ++k)
    if (v.dims[k] <= 0 || !(v.spacing[k] > 0.0))
      throw ValidationError("invalid dims/spacing in header: " + path);
  v.data = detail::read_payload<float>(path, voxel_count(v.dims));
  return v;
}

inline void write_labels(const LabelMap& lm, const std::string& path) {
  lm.validate();
  detail::write_grid(path, lm.dims, lm.spacing, "uint8", lm.labels);
}

inline LabelMap read_labels(const std::string& path) {
  auto h = detail::read_sidecar(path, "uint8");
  LabelMap lm;
  lm.dims = h["dims"].get<Dims>();
  lm.spacing = h["spacing"].get<Spacing>();
  for (int k = 0; k < 3; ++k)
    if (lm.dims[k] <= 0 || !(lm.spacing[k] > 0.0))
      throw ValidationError("invalid dims/spacing in header: " + path);
  lm.labels = detail::read_payload<std::uint8_t>(path, voxel_count(lm.dims));
  lm.validate();  // rejects label values >= 10
  return lm;
}

}  // namespace segqa
