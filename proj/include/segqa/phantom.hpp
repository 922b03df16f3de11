#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <string>
#include <vector>

#include <json.hpp>

#include "segqa/grid.hpp"
#include "segqa/perturb.hpp"
#include "segqa/rng.hpp"

namespace segqa {

struct GridConfig {
  Dims dims{48, 48, 48};
  Spacing spacing{2.0, 2.0, 2.0};
};

enum class DomainKind { Common, Av, Ce, Mip, Prone, RpvBase, RpvNoisy };

inline const char* domain_kind_name(DomainKind k) {
  switch (k) {
    case DomainKind::Common: return "common";
    case DomainKind::Av: return "av";
    case DomainKind::Ce: return "ce";
    case DomainKind::Mip: return "mip";
    case DomainKind::Prone: return "prone";
    case DomainKind::RpvBase: return "rpv_base";
    case DomainKind::RpvNoisy: return "rpv_noisy";
  }
  return "unknown";
}

inline DomainKind domain_kind_from_name(const std::string& s) {
  for (DomainKind k : {DomainKind::Common, DomainKind::Av, DomainKind::Ce, DomainKind::Mip,
                       DomainKind::Prone, DomainKind::RpvBase, DomainKind::RpvNoisy})
    if (s == domain_kind_name(k)) return k;
  throw ValidationError("unknown domain kind: " + s);
}

struct DomainTag {
  DomainKind kind = DomainKind::Common;
  double parameter = 0.0;  // noise level, contrast delta, deform magnitude, ...
};

// One patient-analog: image, ground truth, provenance.
struct CaseRecord {
  std::string id;
  Volume volume;
  LabelMap truth;
  DomainTag domain;
  std::uint64_t seed = 0;
  int removed_label = 0;  // 0 = all structures present
};

enum class Split { SegTrain, QaTrain, QaTest };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::SegTrain: return "seg_train";
    case Split::QaTrain: return "qa_train";
    case Split::QaTest: return "qa_test";
  }
  return "unknown";
}

inline Split split_from_name(const std::string& s) {
  for (Split v : {Split::SegTrain, Split::QaTrain, Split::QaTest})
    if (s == split_name(v)) return v;
  throw ValidationError("unknown split: " + s);
}

struct BenchmarkDataset {
  std::vector<CaseRecord> cases;
  std::vector<Split> splits;  // parallel to cases

  std::vector<std::size_t> indices_of(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < cases.size(); ++i)
      if (splits[i] == s) out.push_back(i);
    return out;
  }
};

struct BenchmarkConfig {
  double scale = 1.0;
  std::uint64_t seed = 1;
  GridConfig grid;
  // per-domain counts at scale 1, mirroring the benchmark composition
  int n_common = 39, n_av = 74, n_ce = 20, n_mip = 12, n_prone = 16, n_rpv = 20;
  double rpv_base_fraction = 0.25;
  double ce_delta_lo = 0.12, ce_delta_hi = 0.35;
  double av_magnitude_lo = 1.0, av_magnitude_hi = 4.0;
  double av_removal_prob = 0.15;
  double degrade_factor_lo = 1.5, degrade_factor_hi = 2.5;
};

// ---------------------------------------------------------------------------
// Base anatomy: body and heart ellipsoids plus 9 substructures with distinct
// intensity bands and graded volumes (each rank ~1.42x the previous), laid
// out asymmetrically so axis flips produce a genuinely different constellation.
// ---------------------------------------------------------------------------

struct StructureSpec {
  std::array<double, 3> center;  // offset from heart center, fraction of grid
  std::array<double, 3> axes;    // semi-axes, fraction of grid
  double intensity;
};

inline constexpr double kAirIntensity = 0.05;
inline constexpr double kBodyIntensity = 0.24;
inline constexpr double kHeartIntensity = 0.40;
inline constexpr std::array<double, 3> kHeartCenter{0.50, 0.48, 0.50};
inline constexpr std::array<double, 3> kHeartAxes{0.30, 0.28, 0.27};
inline constexpr std::array<double, 3> kBodyCenter{0.50, 0.52, 0.50};
inline constexpr std::array<double, 3> kBodyAxes{0.46, 0.40, 0.48};

inline const std::array<StructureSpec, 9>& structure_specs() {
  static const std::array<StructureSpec, 9> specs{{
      {{+0.100, +0.020, +0.215}, {0.048, 0.042, 0.038}, 0.494},
      {{-0.115, -0.005, +0.175}, {0.055, 0.047, 0.042}, 0.528},
      {{+0.040, +0.210, -0.080}, {0.062, 0.051, 0.049}, 0.562},
      {{-0.190, -0.130, +0.070}, {0.068, 0.060, 0.054}, 0.596},
      {{+0.160, -0.155, -0.115}, {0.078, 0.066, 0.0605}, 0.630},
      {{-0.030, +0.195, +0.115}, {0.088, 0.074, 0.068}, 0.664},
      {{+0.020, -0.175, +0.090}, {0.098, 0.084, 0.0763}, 0.698},
      {{+0.145, +0.040, +0.020}, {0.110, 0.095, 0.0854}, 0.732},
      {{-0.130, +0.050, -0.090}, {0.124, 0.106, 0.0964}, 0.766},
  }};
  return specs;
}

namespace detail {

struct CaseGeometry {
  std::array<std::array<double, 3>, 9> centers;  // voxel coordinates
  std::array<std::array<double, 3>, 9> axes;     // voxel units
  std::array<double, 9> intensities;
  int removed_label = 0;  // 1..9, or 0
};

inline CaseGeometry base_geometry(const Dims& d) {
  CaseGeometry g;
  const auto& specs = structure_specs();
  for (int l = 0; l < 9; ++l) {
    for (int k = 0; k < 3; ++k) {
      g.centers[l][k] = (kHeartCenter[k] + specs[l].center[k]) * (d[k] - 1);
      g.axes[l][k] = specs[l].axes[k] * d[k];
    }
    g.intensities[l] = specs[l].intensity;
  }
  return g;
}

inline void paint_case(const CaseGeometry& g, const Dims& d, const Spacing& sp, Volume& vol,
                       LabelMap& labels) {
  vol = Volume(d, sp, static_cast<float>(kAirIntensity));
  labels = LabelMap(d, sp, 0);
  auto inside = [](double x, double y, double z, const std::array<double, 3>& c,
                   const std::array<double, 3>& a) {
    double ex = (x - c[0]) / a[0], ey = (y - c[1]) / a[1], ez = (z - c[2]) / a[2];
    return ex * ex + ey * ey + ez * ez;
  };
  std::array<double, 3> body_c, body_a, heart_c, heart_a;
  for (int k = 0; k < 3; ++k) {
    body_c[k] = kBodyCenter[k] * (d[k] - 1);
    body_a[k] = kBodyAxes[k] * d[k];
    heart_c[k] = kHeartCenter[k] * (d[k] - 1);
    heart_a[k] = kHeartAxes[k] * d[k];
  }
  for (int z = 0; z < d[2]; ++z)
    for (int y = 0; y < d[1]; ++y)
      for (int x = 0; x < d[0]; ++x) {
        double v = kAirIntensity;
        if (inside(x, y, z, body_c, body_a) <= 1.0) v = kBodyIntensity;
        if (inside(x, y, z, heart_c, heart_a) <= 1.0) v = kHeartIntensity;
        int best = -1;
        double best_q = 1.0;
        for (int l = 0; l < 9; ++l) {
          if (g.removed_label == l + 1) continue;
          double q = inside(x, y, z, g.centers[l], g.axes[l]);
          if (q <= best_q) {
            best_q = q;
            best = l;
          }
        }
        if (best >= 0) {
          v = g.intensities[best];
          labels.at(x, y, z) = static_cast<std::uint8_t>(best + 1);
        }
        vol.at(x, y, z) = static_cast<float>(v);
      }
}

// Reference statistics of the jitter-free anatomy at a given resolution,
// used by the template and band segmenters. Deterministic per dims.
struct BaseModel {
  LabelMap labels;
  std::array<double, 3> tissue_centroid{};        // intensity-weighted, voxels
  std::array<double, 9> structure_volume{};       // voxel counts
  std::array<std::array<double, 3>, 9> structure_centroid{};
  std::array<double, 9> core_intensity{};         // blurred peak per structure
  double structure_mean = 0.0;                    // mean blurred intensity over all structures
  // integer voxel offsets of each structure's ellipsoid relative to its
  // center: the full extent and an inner core (axes scaled by 0.7)
  std::array<std::vector<std::array<int, 3>>, 9> full_offsets{};
  std::array<std::vector<std::array<int, 3>>, 9> inner_offsets{};
};

inline const BaseModel& base_model(const Dims& d, const Spacing& sp) {
  static std::mutex mu;
  static std::map<Dims, BaseModel> cache;
  std::scoped_lock lock(mu);
  auto it = cache.find(d);
  if (it != cache.end()) return it->second;

  BaseModel m;
  CaseGeometry g = base_geometry(d);
  Volume clean;
  paint_case(g, d, sp, clean, m.labels);
  Volume blurred = gaussian_blur(clean, 0.7);

  double wsum = 0.0;
  std::array<double, 3> acc{0.0, 0.0, 0.0};
  std::array<double, 9> isum{};
  for (int z = 0; z < d[2]; ++z)
    for (int y = 0; y < d[1]; ++y)
      for (int x = 0; x < d[0]; ++x) {
        double w = std::max(0.0, blurred.at(x, y, z) - 0.5 * (kAirIntensity + kBodyIntensity));
        wsum += w;
        acc[0] += w * x;
        acc[1] += w * y;
        acc[2] += w * z;
        int l = m.labels.at(x, y, z);
        if (l > 0) {
          m.structure_volume[l - 1] += 1.0;
          m.structure_centroid[l - 1][0] += x;
          m.structure_centroid[l - 1][1] += y;
          m.structure_centroid[l - 1][2] += z;
          m.core_intensity[l - 1] = std::max(m.core_intensity[l - 1],
                                             static_cast<double>(blurred.at(x, y, z)));
          isum[l - 1] += blurred.at(x, y, z);
        }
      }
  for (int k = 0; k < 3; ++k) m.tissue_centroid[k] = acc[k] / wsum;
  double itotal = 0.0, vtotal = 0.0;
  for (int l = 0; l < 9; ++l) {
    for (int k = 0; k < 3; ++k) m.structure_centroid[l][k] /= m.structure_volume[l];
    itotal += isum[l];
    vtotal += m.structure_volume[l];
  }
  m.structure_mean = itotal / vtotal;
  for (int l = 0; l < 9; ++l) {
    const auto& a = g.axes[l];
    int rx = static_cast<int>(a[0]) + 1, ry = static_cast<int>(a[1]) + 1,
        rz = static_cast<int>(a[2]) + 1;
    for (int dz = -rz; dz <= rz; ++dz)
      for (int dy = -ry; dy <= ry; ++dy)
        for (int dx = -rx; dx <= rx; ++dx) {
          double q = dx * dx / (a[0] * a[0]) + dy * dy / (a[1] * a[1]) + dz * dz / (a[2] * a[2]);
          if (q <= 1.0) m.full_offsets[l].push_back({dx, dy, dz});
          if (q <= 0.49) m.inner_offsets[l].push_back({dx, dy, dz});
        }
    if (m.inner_offsets[l].empty()) m.inner_offsets[l].push_back({0, 0, 0});
  }
  auto pos = cache.emplace(d, std::move(m)).first;
  return pos->second;
}

}  // namespace detail

namespace detail {

inline CaseRecord generate_case_impl(std::uint64_t seed, const DomainTag& domain,
                                     const GridConfig& grid, int removed_label) {
  Rng rng(hash_combine(seed, 0xCA5Eu));
  Rng geo = rng.fork("geometry");
  Rng tex = rng.fork("texture");
  Rng noise = rng.fork("noise");
  Rng dom = rng.fork("domain");

  const Dims& d = grid.dims;
  CaseGeometry g = base_geometry(d);
  g.removed_label = removed_label;

  double jitter = 0.10;
  if (domain.kind == DomainKind::Av) jitter += 0.02 * domain.parameter;
  for (int l = 0; l < 9; ++l) {
    for (int k = 0; k < 3; ++k) {
      g.centers[l][k] += geo.uniform(-1.0, 1.0) * jitter * g.axes[l][k];
      g.axes[l][k] *= 1.0 + geo.uniform(-1.0, 1.0) * jitter;
    }
    g.intensities[l] += geo.uniform(-1.0, 1.0) * 0.006;
  }

  CaseRecord rec;
  rec.seed = seed;
  rec.domain = domain;
  rec.removed_label = removed_label;

  paint_case(g, d, grid.spacing, rec.volume, rec.truth);
  rec.volume = gaussian_blur(rec.volume, 0.7);

  // low-frequency texture plus voxel noise
  Volume texture(d, grid.spacing);
  for (float& v : texture.data) v = static_cast<float>(tex.normal());
  texture = gaussian_blur(texture, 4.0);
  float tex_peak = 0.0f;
  for (float v : texture.data) tex_peak = std::max(tex_peak, std::abs(v));
  double tex_scale = tex_peak > 0.0f ? 0.010 / tex_peak : 0.0;
  double tissue_wobble = tex.uniform(-0.008, 0.008);
  for (std::size_t i = 0; i < rec.volume.data.size(); ++i) {
    double v = rec.volume.data[i] + tex_scale * texture.data[i] + noise.normal(0.0, 0.008);
    if (rec.volume.data[i] > 0.15) v += tissue_wobble;  // tissue only, air stays put
    rec.volume.data[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
  }

  switch (domain.kind) {
    case DomainKind::Common:
      break;
    case DomainKind::Av: {
      auto [v2, l2] = deform(rec.volume, rec.truth, domain.parameter, dom.next());
      rec.volume = std::move(v2);
      rec.truth = std::move(l2);
      break;
    }
    case DomainKind::Ce: {
      rec.volume = contrast_enhance(rec.volume, rec.truth, domain.parameter);
      break;
    }
    case DomainKind::Mip:
      rec.volume = insert_artifact(rec.volume, dom.next());
      break;
    case DomainKind::Prone: {
      auto [v2, l2] = flip_axis(rec.volume, rec.truth, 1);
      rec.volume = std::move(v2);
      rec.truth = std::move(l2);
      break;
    }
    case DomainKind::RpvBase: {
      auto [v2, l2] = resample_degrade(rec.volume, rec.truth, domain.parameter);
      rec.volume = std::move(v2);
      rec.truth = std::move(l2);
      break;
    }
    case DomainKind::RpvNoisy:
      rec.volume = add_poisson_noise(rec.volume, NoiseLevel(domain.parameter), dom.next());
      break;
  }
  return rec;
}

}  // namespace detail

// Deterministic phantom generation: smooth background, nine ellipsoidal
// substructures with per-structure intensity bands, Gaussian blur, mild
// baseline noise, then the domain transform selected by the tag.
inline CaseRecord generate_case(std::uint64_t seed, const DomainTag& domain,
                                const GridConfig& grid) {
  return detail::generate_case_impl(seed, domain, grid, 0);
}

// AV variant where the anatomical variation removes one structure entirely;
// the removed label is recorded on the case.
inline CaseRecord generate_case_with_removal(std::uint64_t seed, const DomainTag& domain,
                                             const GridConfig& grid, int removed_label) {
  if (removed_label < 1 || removed_label > 9)
    throw ValidationError("generate_case_with_removal: label must be in 1..9");
  return detail::generate_case_impl(seed, domain, grid, removed_label);
}

inline BenchmarkDataset generate_benchmark(const BenchmarkConfig& cfg) {
  auto scaled = [&](int base) { return static_cast<int>(std::llround(base * cfg.scale)); };
  const int n_common = scaled(cfg.n_common);
  const int n_av = scaled(cfg.n_av);
  const int n_ce = scaled(cfg.n_ce);
  const int n_mip = scaled(cfg.n_mip);
  const int n_prone = scaled(cfg.n_prone);
  const int n_rpv = scaled(cfg.n_rpv);
  if (n_common < 1)
    throw ValidationError("generate_benchmark: common-domain count must be >= 1");
  for (int n : {n_av, n_ce, n_mip, n_prone, n_rpv})
    if (n < 1) throw ValidationError("generate_benchmark: per-domain counts must be >= 1");

  int n_rpv_base = std::max(1, static_cast<int>(std::llround(n_rpv * cfg.rpv_base_fraction)));
  int n_rpv_noisy = std::max(1, n_rpv - n_rpv_base);

  Rng rng(hash_combine(cfg.seed, 0xBEDCu));
  Rng removal = rng.fork("av-removal");

  BenchmarkDataset ds;
  char buf[64];
  auto spread = [](int i, int n, double lo, double hi) {
    return n <= 1 ? 0.5 * (lo + hi) : lo + (hi - lo) * i / static_cast<double>(n - 1);
  };

  auto add_case = [&](DomainKind kind, int index, double param, int removed) {
    std::snprintf(buf, sizeof buf, "%s_%03d", domain_kind_name(kind), index);
    std::uint64_t case_seed = hash_combine(cfg.seed, fnv1a(std::string_view(buf)));
    DomainTag tag{kind, param};
    CaseRecord rec = removed > 0 ? generate_case_with_removal(case_seed, tag, cfg.grid, removed)
                                 : generate_case(case_seed, tag, cfg.grid);
    rec.id = buf;
    ds.cases.push_back(std::move(rec));
  };

  for (int i = 0; i < n_common; ++i) add_case(DomainKind::Common, i, 0.0, 0);
  for (int i = 0; i < n_av; ++i) {
    double mag = spread(i, n_av, cfg.av_magnitude_lo, cfg.av_magnitude_hi);
    int removed = removal.uniform() < cfg.av_removal_prob ? removal.range(1, 9) : 0;
    add_case(DomainKind::Av, i, mag, removed);
  }
  for (int i = 0; i < n_ce; ++i)
    add_case(DomainKind::Ce, i, spread(i, n_ce, cfg.ce_delta_lo, cfg.ce_delta_hi), 0);
  for (int i = 0; i < n_mip; ++i) add_case(DomainKind::Mip, i, 0.0, 0);
  for (int i = 0; i < n_prone; ++i) add_case(DomainKind::Prone, i, 0.0, 0);
  for (int i = 0; i < n_rpv_base; ++i)
    add_case(DomainKind::RpvBase, i,
             spread(i, n_rpv_base, cfg.degrade_factor_lo, cfg.degrade_factor_hi), 0);
  const auto& levels = default_noise_levels();
  for (int i = 0; i < n_rpv_noisy; ++i)
    add_case(DomainKind::RpvNoisy, i, levels[i % levels.size()], 0);

  // Split assignment follows the 60:120:61 proportions of the source data.
  // A largest-deficit walk keeps every prefix (and so every domain block)
  // close to the target fractions.
  const double total = 241.0;
  const std::array<double, 3> frac{60.0 / total, 120.0 / total, 61.0 / total};
  std::array<double, 3> assigned{0.0, 0.0, 0.0};
  ds.splits.resize(ds.cases.size());
  for (std::size_t i = 0; i < ds.cases.size(); ++i) {
    int best = 0;
    double best_deficit = -1e300;
    for (int s = 0; s < 3; ++s) {
      double deficit = frac[s] * static_cast<double>(i + 1) - assigned[s];
      if (deficit > best_deficit) {
        best_deficit = deficit;
        best = s;
      }
    }
    assigned[best] += 1.0;
    ds.splits[i] = static_cast<Split>(best);
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Manifest I/O
// ---------------------------------------------------------------------------

inline void save_benchmark(const BenchmarkDataset& ds, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "cases");
  nlohmann::json manifest;
  manifest["cases"] = nlohmann::json::array();
  for (std::size_t i = 0; i < ds.cases.size(); ++i) {
    const CaseRecord& c = ds.cases[i];
    std::string vol_rel = "cases/" + c.id + ".vol";
    std::string lab_rel = "cases/" + c.id + ".lab";
    write_volume(c.volume, (fs::path(dir) / vol_rel).string());
    write_labels(c.truth, (fs::path(dir) / lab_rel).string());
    manifest["cases"].push_back({{"id", c.id},
                                 {"domain", domain_kind_name(c.domain.kind)},
                                 {"parameter", c.domain.parameter},
                                 {"split", split_name(ds.splits[i])},
                                 {"seed", c.seed},
                                 {"removed_label", c.removed_label},
                                 {"volume", vol_rel},
                                 {"labels", lab_rel}});
  }
  std::ofstream mf(fs::path(dir) / "manifest.json");
  if (!mf) throw ValidationError("cannot write manifest in " + dir);
  mf << manifest.dump(2) << "\n";
}

inline BenchmarkDataset load_benchmark(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream mf(fs::path(dir) / "manifest.json");
  if (!mf) throw ValidationError("cannot open manifest in " + dir);
  nlohmann::json manifest;
  try {
    mf >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed manifest: ") + e.what());
  }
  BenchmarkDataset ds;
  for (const auto& j : manifest.at("cases")) {
    CaseRecord c;
    c.id = j.at("id").get<std::string>();
    c.domain.kind = domain_kind_from_name(j.at("domain").get<std::string>());
    c.domain.parameter = j.at("parameter").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.removed_label = j.value("removed_label", 0);
    c.volume = read_volume((fs::path(dir) / j.at("volume").get<std::string>()).string());
    c.truth = read_labels((fs::path(dir) / j.at("labels").get<std::string>()).string());
    ds.cases.push_back(std::move(c));
    ds.splits.push_back(split_from_name(j.at("split").get<std::string>()));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Black-box segmenter stand-ins
// ---------------------------------------------------------------------------

enum class SegmenterFamily { Atlas, Threshold, Robust };

inline const char* family_name(SegmenterFamily f) {
  switch (f) {
    case SegmenterFamily::Atlas: return "atlas";
    case SegmenterFamily::Threshold: return "threshold";
    case SegmenterFamily::Robust: return "robust";
  }
  return "unknown";
}

struct SegmenterProfile {
  SegmenterFamily family = SegmenterFamily::Atlas;
  double intensity_sensitivity = 1.0;
  double noise_sensitivity = 1.0;
  double base_jitter = 0.05;
  std::uint64_t seed = 0;
  std::string id;
  DomainKind target_domain = DomainKind::Ce;  // domain this profile degrades on
};

namespace detail {

// Random churn on label boundaries: each round, voxels adjacent to a
// different label either drop to background or adopt a neighbor's label.
inline void boundary_churn(LabelMap& lm, double strength, Rng& rng) {
  if (strength <= 0.0) return;
  const Dims& d = lm.dims;
  int rounds = 1 + static_cast<int>(strength);
  double p = std::clamp(0.9 * strength / rounds, 0.0, 0.95);
  static const int off[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
  for (int r = 0; r < rounds; ++r) {
    LabelMap prev = lm;
    for (int z = 0; z < d[2]; ++z)
      for (int y = 0; y < d[1]; ++y)
        for (int x = 0; x < d[0]; ++x) {
          std::uint8_t own = prev.at(x, y, z);
          std::uint8_t neighbors[6];
          int n_diff = 0;
          for (const auto& o : off) {
            int xx = x + o[0], yy = y + o[1], zz = z + o[2];
            if (xx < 0 || yy < 0 || zz < 0 || xx >= d[0] || yy >= d[1] || zz >= d[2]) continue;
            std::uint8_t v = prev.at(xx, yy, zz);
            if (v != own) neighbors[n_diff++] = v;
          }
          if (n_diff == 0) continue;
          if (rng.uniform() < p) {
            lm.at(x, y, z) = rng.uniform() < 0.5
                                 ? 0
                                 : neighbors[rng.below(static_cast<std::uint64_t>(n_diff))];
          }
        }
  }
}

// 6-connected components of a binary mask; returns component id per voxel
// (-1 outside) and component sizes.
inline std::vector<int> connected_components(const std::vector<char>& mask, const Dims& d,
                                             std::vector<int>& sizes) {
  std::vector<int> comp(mask.size(), -1);
  sizes.clear();
  std::vector<std::size_t> stack;
  auto idx = [&](int x, int y, int z) {
    return static_cast<std::size_t>(x) +
           static_cast<std::size_t>(d[0]) * (static_cast<std::size_t>(y) +
                                             static_cast<std::size_t>(d[1]) * z);
  };
  for (int z = 0; z < d[2]; ++z)
    for (int y = 0; y < d[1]; ++y)
      for (int x = 0; x < d[0]; ++x) {
        std::size_t i = idx(x, y, z);
        if (!mask[i] || comp[i] >= 0) continue;
        int id = static_cast<int>(sizes.size());
        sizes.push_back(0);
        comp[i] = id;
        stack.assign(1, i);
        while (!stack.empty()) {
          std::size_t cur = stack.back();
          stack.pop_back();
          ++sizes[id];
          int cz = static_cast<int>(cur / (static_cast<std::size_t>(d[0]) * d[1]));
          int rem = static_cast<int>(cur % (static_cast<std::size_t>(d[0]) * d[1]));
          int cy = rem / d[0], cx = rem % d[0];
          static const int off[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0},
                                        {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
          for (const auto& o : off) {
            int xx = cx + o[0], yy = cy + o[1], zz = cz + o[2];
            if (xx < 0 || yy < 0 || zz < 0 || xx >= d[0] || yy >= d[1] || zz >= d[2]) continue;
            std::size_t ni = idx(xx, yy, zz);
            if (mask[ni] && comp[ni] < 0) {
              comp[ni] = id;
              stack.push_back(ni);
            }
          }
        }
      }
  return comp;
}

inline double median_residual_energy(const Volume& vol) {
  Volume filtered = median_filter3(vol);
  double acc = 0.0;
  for (std::size_t i = 0; i < vol.data.size(); ++i) {
    double diff = static_cast<double>(vol.data[i]) - filtered.data[i];
    acc += diff * diff;
  }
  return acc / static_cast<double>(vol.data.size());
}

inline LabelMap segment_atlas(const SegmenterProfile& prof, const Volume& vol, Rng& rng) {
  const Dims& d = vol.dims;
  const BaseModel& base = base_model(d, vol.spacing);
  Volume work = median_filter3(vol);

  // global alignment by tissue-weighted intensity centroid
  double wsum = 0.0;
  std::array<double, 3> acc{0.0, 0.0, 0.0};
  for (int z = 0; z < d[2]; ++z)
    for (int y = 0; y < d[1]; ++y)
      for (int x = 0; x < d[0]; ++x) {
        double w = std::max(0.0, work.at(x, y, z) - 0.5 * (kAirIntensity + kBodyIntensity));
        wsum += w;
        acc[0] += w * x;
        acc[1] += w * y;
        acc[2] += w * z;
      }
  std::array<int, 3> shift{0, 0, 0};
  if (wsum > 0.0)
    for (int k = 0; k < 3; ++k)
      shift[k] = static_cast<int>(std::llround(acc[k] / wsum - base.tissue_centroid[k]));

  // measured physical quantities driving the degradation
  double mean_in_template = 0.0;
  std::int64_t n_in = 0;
  for (int z = 0; z < d[2]; ++z)
    for (int y = 0; y < d[1]; ++y)
      for (int x = 0; x < d[0]; ++x) {
        int sx = x - shift[0], sy = y - shift[1], sz = z - shift[2];
        if (sx < 0 || sy < 0 || sz < 0 || sx >= d[0] || sy >= d[1] || sz >= d[2]) continue;
        if (base.labels.at(sx, sy, sz) != 0) {
          mean_in_template += work.at(x, y, z);
          ++n_in;
        }
      }
  double intensity_offset =
      n_in > 0 ? mean_in_template / static_cast<double>(n_in) - base.structure_mean : 0.0;
  double noise_energy = median_residual_energy(vol);

  double s = prof.base_jitter + prof.intensity_sensitivity * std::abs(intensity_offset) * 1.2 +
             prof.noise_sensitivity * noise_energy * 28.0;

  LabelMap out(d, vol.spacing, 0);
  // per-structure misplacement grows with the degradation strength
  std::array<std::array<int, 3>, 9> extra{};
  for (int l = 0; l < 9; ++l)
    for (int k = 0; k < 3; ++k)
      extra[l][k] = static_cast<int>(std::llround(rng.normal() * s * 2.5));
  for (int z = 0; z < d[2]; ++z)
    for (int y = 0; y < d[1]; ++y)
      for (int x = 0; x < d[0]; ++x) {
        int sx = x - shift[0], sy = y - shift[1], sz = z - shift[2];
        if (sx < 0 || sy < 0 || sz < 0 || sx >= d[0] || sy >= d[1] || sz >= d[2]) continue;
        std::uint8_t l = base.labels.at(sx, sy, sz);
        if (l == 0) continue;
        int tx = x + extra[l - 1][0], ty = y + extra[l - 1][1], tz = z + extra[l - 1][2];
        if (tx < 0 || ty < 0 || tz < 0 || tx >= d[0] || ty >= d[1] || tz >= d[2]) continue;
        out.at(tx, ty, tz) = l;
      }
  boundary_churn(out, s, rng);
  return out;
}

// BFS flood from seed voxels over a value predicate, optionally bounded to a
// ball around a centroid.
inline std::vector<char> grow_region(const Volume& work, const std::vector<std::size_t>& seeds,
                                     double lower_bound, const std::array<double, 3>& centroid,
                                     double max_radius) {
  const Dims& d = work.dims;
  std::vector<char> region(work.size(), 0);
  std::vector<std::size_t> stack;
  for (std::size_t s : seeds)
    if (!region[s]) {
      region[s] = 1;
      stack.push_back(s);
    }
  const double r2 = max_radius * max_radius;
  static const int off[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
  while (!stack.empty()) {
    std::size_t cur = stack.back();
    stack.pop_back();
    int cz = static_cast<int>(cur / (static_cast<std::size_t>(d[0]) * d[1]));
    int rem = static_cast<int>(cur % (static_cast<std::size_t>(d[0]) * d[1]));
    int cy = rem / d[0], cx = rem % d[0];
    for (const auto& o : off) {
      int xx = cx + o[0], yy = cy + o[1], zz = cz + o[2];
      if (xx < 0 || yy < 0 || zz < 0 || xx >= d[0] || yy >= d[1] || zz >= d[2]) continue;
      std::size_t ni = work.index(xx, yy, zz);
      if (region[ni] || work.data[ni] <= lower_bound) continue;
      double dx = xx - centroid[0], dy = yy - centroid[1], dz = zz - centroid[2];
      if (dx * dx + dy * dy + dz * dz > r2) continue;
      region[ni] = 1;
      stack.push_back(ni);
    }
  }
  return region;
}

inline LabelMap segment_threshold(const SegmenterProfile& prof, const Volume& vol, Rng& rng) {
  const Dims& d = vol.dims;
  const BaseModel& base = base_model(d, vol.spacing);
  Volume work = median_filter3(vol);
  if (prof.noise_sensitivity <= 0.5) work = median_filter3(work);

  // estimate the structure-intensity offset for band compensation
  double cand_sum = 0.0;
  std::int64_t cand_n = 0;
  std::array<double, 3> center{(d[0] - 1) * 0.5, (d[1] - 1) * 0.5, (d[2] - 1) * 0.5};
  double radius = 0.30 * std::min({d[0], d[1], d[2]});
  for (int z = 0; z < d[2]; ++z)
    for (int y = 0; y < d[1]; ++y)
      for (int x = 0; x < d[0]; ++x) {
        double dx = x - center[0], dy = y - center[1], dz = z - center[2];
        if (dx * dx + dy * dy + dz * dz > radius * radius) continue;
        if (work.at(x, y, z) > kHeartIntensity + 0.05) {
          cand_sum += work.at(x, y, z);
          ++cand_n;
        }
      }
  double offset = cand_n > 20 ? cand_sum / static_cast<double>(cand_n) - base.structure_mean : 0.0;
  double compensation = std::clamp(1.0 - prof.intensity_sensitivity, 0.0, 1.0);

  // seed voxels: nearest structure band; band widens toward the heart level
  // for small structures whose blurred plateau sits below the design value
  double band_base = 0.016 + 0.010 * (1.0 - std::clamp(prof.noise_sensitivity, 0.0, 1.0));
  LabelMap raw(d, vol.spacing, 0);
  for (std::size_t i = 0; i < vol.size(); ++i) {
    double v = static_cast<double>(work.data[i]) - compensation * offset;
    int best = 0;
    double best_dist = 1e300;
    for (int l = 0; l < 9; ++l) {
      double band = std::max(band_base, 0.25 * (base.core_intensity[l] - kHeartIntensity));
      double dist = std::abs(v - base.core_intensity[l]);
      if (dist <= band && dist < best_dist) {
        best_dist = dist;
        best = l + 1;
      }
    }
    raw.labels[i] = static_cast<std::uint8_t>(best);
  }

  // largest seed component per label, then grow down to the half-max level
  LabelMap out(d, vol.spacing, 0);
  std::vector<char> mask(vol.size());
  std::vector<int> sizes;
  for (int l = 1; l <= 9; ++l) {
    for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = raw.labels[i] == l;
    std::vector<int> comp = connected_components(mask, d, sizes);
    if (sizes.empty()) continue;
    int best = static_cast<int>(std::max_element(sizes.begin(), sizes.end()) - sizes.begin());
    if (sizes[best] < 3) continue;
    std::vector<std::size_t> seeds;
    std::array<double, 3> centroid{0, 0, 0};
    for (int z = 0; z < d[2]; ++z)
      for (int y = 0; y < d[1]; ++y)
        for (int x = 0; x < d[0]; ++x) {
          std::size_t i = vol.index(x, y, z);
          if (comp[i] == best) {
            seeds.push_back(i);
            centroid[0] += x;
            centroid[1] += y;
            centroid[2] += z;
          }
        }
    for (int k = 0; k < 3; ++k) centroid[k] /= static_cast<double>(seeds.size());
    double expected_r = std::cbrt(base.structure_volume[l - 1] * 3.0 / (4.0 * std::numbers::pi));
    double grow_bound =
        0.5 * (kHeartIntensity + base.core_intensity[l - 1]) + compensation * offset;
    std::vector<char> region = grow_region(work, seeds, grow_bound, centroid, 1.8 * expected_r + 2.0);
    for (std::size_t i = 0; i < region.size(); ++i)
      if (region[i]) out.labels[i] = static_cast<std::uint8_t>(l);
  }
  boundary_churn(out, prof.base_jitter, rng);
  return out;
}

inline LabelMap segment_robust(const SegmenterProfile& prof, const Volume& vol, Rng& rng) {
  const Dims& d = vol.dims;
  const BaseModel& base = base_model(d, vol.spacing);
  Volume work = median_filter3(median_filter3(vol));

  // metal rejection + robust heart-medium estimate from the central ball
  std::array<double, 3> center{(d[0] - 1) * 0.5, (d[1] - 1) * 0.5, (d[2] - 1) * 0.5};
  double radius = 0.30 * std::min({d[0], d[1], d[2]});
  std::vector<float> ball;
  for (int z = 0; z < d[2]; ++z)
    for (int y = 0; y < d[1]; ++y)
      for (int x = 0; x < d[0]; ++x) {
        double dx = x - center[0], dy = y - center[1], dz = z - center[2];
        if (dx * dx + dy * dy + dz * dz > radius * radius) continue;
        if (vol.at(x, y, z) >= 0.97f) continue;
        ball.push_back(work.at(x, y, z));
      }
  double medium = kHeartIntensity;
  if (!ball.empty()) {
    auto mid = ball.begin() + static_cast<std::ptrdiff_t>(ball.size() / 2);
    std::nth_element(ball.begin(), mid, ball.end());
    medium = *mid;
  }
  double threshold = medium + 0.030;

  std::vector<char> mask(vol.size());
  for (int z = 0; z < d[2]; ++z)
    for (int y = 0; y < d[1]; ++y)
      for (int x = 0; x < d[0]; ++x) {
        std::size_t i = vol.index(x, y, z);
        mask[i] = work.data[i] > threshold && vol.data[i] < 0.97f;
      }
  std::vector<int> sizes;
  std::vector<int> comp = connected_components(mask, d, sizes);

  struct Blob {
    int id;
    double size;
    std::array<double, 3> centroid{0, 0, 0};
    double plateau = 0.0;  // robust peak level of the blob
    std::vector<std::size_t> voxels;
  };
  std::vector<Blob> blobs;
  for (int id = 0; id < static_cast<int>(sizes.size()); ++id)
    if (sizes[id] >= 4) blobs.push_back({id, static_cast<double>(sizes[id]), {0, 0, 0}, 0.0, {}});
  std::sort(blobs.begin(), blobs.end(), [](const Blob& a, const Blob& b) {
    return a.size > b.size;
  });
  if (blobs.size() > 12) blobs.resize(12);
  for (Blob& b : blobs) {
    for (int z = 0; z < d[2]; ++z)
      for (int y = 0; y < d[1]; ++y)
        for (int x = 0; x < d[0]; ++x)
          if (comp[vol.index(x, y, z)] == b.id) {
            b.voxels.push_back(vol.index(x, y, z));
            b.centroid[0] += x;
            b.centroid[1] += y;
            b.centroid[2] += z;
          }
    for (int k = 0; k < 3; ++k) b.centroid[k] /= b.size;
    std::vector<float> vals;
    vals.reserve(b.voxels.size());
    for (std::size_t i : b.voxels) vals.push_back(work.data[i]);
    auto q90 = vals.begin() + static_cast<std::ptrdiff_t>(vals.size() * 9 / 10);
    std::nth_element(vals.begin(), q90, vals.end());
    b.plateau = *q90;
  }

  // match blobs to structures by size and position, trying axis flips to
  // cope with mirrored acquisitions
  double heart_r = 0.30 * std::min({d[0], d[1], d[2]});
  double best_total = 1e300;
  std::vector<int> best_assign;  // blob index -> label, -1 unassigned
  for (int flip = -1; flip < 3; ++flip) {
    std::array<std::array<double, 3>, 9> expect = base.structure_centroid;
    if (flip >= 0)
      for (int l = 0; l < 9; ++l) expect[l][flip] = (d[flip] - 1) - expect[l][flip];
    // greedy min-cost assignment
    std::vector<int> assign(blobs.size(), -1);
    std::array<bool, 9> used{};
    double total = 0.0;
    for (std::size_t step = 0; step < std::min<std::size_t>(blobs.size(), 9); ++step) {
      double best_cost = 1e300;
      int bi = -1, bl = -1;
      for (std::size_t i = 0; i < blobs.size(); ++i) {
        if (assign[i] >= 0) continue;
        for (int l = 0; l < 9; ++l) {
          if (used[l]) continue;
          double size_cost = std::abs(std::log(blobs[i].size / base.structure_volume[l]));
          double dx = blobs[i].centroid[0] - expect[l][0];
          double dy = blobs[i].centroid[1] - expect[l][1];
          double dz = blobs[i].centroid[2] - expect[l][2];
          double pos_cost = std::sqrt(dx * dx + dy * dy + dz * dz) / heart_r;
          double cost = size_cost + 1.2 * pos_cost;
          if (cost < best_cost) {
            best_cost = cost;
            bi = static_cast<int>(i);
            bl = l;
          }
        }
      }
      if (bi < 0) break;
      assign[static_cast<std::size_t>(bi)] = bl;
      used[bl] = true;
      total += best_cost;
    }
    if (total < best_total) {
      best_total = total;
      best_assign = assign;
    }
  }

  // Each matched blob is grown from its detected core down to the half-max
  // level between the heart medium and the blob's own plateau, which adapts
  // to global intensity shifts without further tuning.
  LabelMap out(d, vol.spacing, 0);
  for (std::size_t i = 0; i < blobs.size(); ++i) {
    if (best_assign.empty() || best_assign[i] < 0) continue;
    std::uint8_t l = static_cast<std::uint8_t>(best_assign[i] + 1);
    double bound = medium + 0.5 * (blobs[i].plateau - medium);
    double expected_r =
        std::cbrt(base.structure_volume[best_assign[i]] * 3.0 / (4.0 * std::numbers::pi));
    std::vector<char> region =
        grow_region(work, blobs[i].voxels, bound, blobs[i].centroid, 1.8 * expected_r + 2.0);
    for (std::size_t v = 0; v < region.size(); ++v)
      if (region[v]) out.labels[v] = l;
  }

  double j = prof.base_jitter * rng.uniform(0.25, 1.75);
  boundary_churn(out, j, rng);
  return out;
}

}  // namespace detail

// Runs the black-box segmenter stand-in. Deterministic for a fixed
// (profile, volume) pair: the internal randomness is seeded from both.
inline LabelMap segment(const SegmenterProfile& prof, const Volume& vol) {
  vol.validate();
  Rng rng(hash_combine(prof.seed, fnv1a(vol.data.data(), vol.data.size() * sizeof(float))));
  switch (prof.family) {
    case SegmenterFamily::Atlas: return detail::segment_atlas(prof, vol, rng);
    case SegmenterFamily::Threshold: return detail::segment_threshold(prof, vol, rng);
    case SegmenterFamily::Robust: return detail::segment_robust(prof, vol, rng);
  }
  throw ValidationError("segment: unknown family");
}

// Deterministic bank of segmenter profiles spanning the fragility space.
inline std::vector<SegmenterProfile> profile_bank(int count) {
  if (count < 1) throw ValidationError("profile_bank: count must be >= 1");
  using F = SegmenterFamily;
  using D = DomainKind;
  struct Entry {
    F family;
    double int_sens, noise_sens, base;
    D target;
  };
  static const std::array<Entry, 19> table{{
      {F::Atlas, 1.6, 1.2, 0.05, D::Ce},
      {F::Threshold, 1.0, 1.0, 0.03, D::RpvNoisy},
      {F::Robust, 0.0, 0.0, 0.06, D::Common},
      {F::Atlas, 0.9, 0.25, 0.07, D::Ce},
      {F::Threshold, 0.25, 0.9, 0.05, D::RpvNoisy},
      {F::Atlas, 0.3, 1.5, 0.05, D::RpvNoisy},
      {F::Robust, 0.0, 0.0, 0.095, D::Common},
      {F::Atlas, 2.2, 0.6, 0.04, D::Ce},
      {F::Threshold, 1.4, 0.5, 0.06, D::Ce},
      {F::Atlas, 1.2, 0.9, 0.08, D::Ce},
      {F::Robust, 0.0, 0.0, 0.075, D::Common},
      {F::Atlas, 0.6, 0.4, 0.05, D::Av},
      {F::Threshold, 0.6, 1.3, 0.04, D::RpvNoisy},
      {F::Atlas, 1.9, 1.0, 0.06, D::Ce},
      {F::Threshold, 0.15, 0.7, 0.07, D::RpvNoisy},
      {F::Atlas, 0.8, 1.6, 0.05, D::RpvNoisy},
      {F::Atlas, 1.4, 0.3, 0.09, D::Ce},
      {F::Threshold, 0.9, 1.1, 0.05, D::RpvNoisy},
      {F::Atlas, 1.1, 1.3, 0.07, D::RpvNoisy},
  }};
  std::vector<SegmenterProfile> bank;
  bank.reserve(static_cast<std::size_t>(count));
  char buf[64];
  for (int i = 0; i < count; ++i) {
    const Entry& e = table[static_cast<std::size_t>(i) % table.size()];
    SegmenterProfile p;
    p.family = e.family;
    p.intensity_sensitivity = e.int_sens;
    p.noise_sensitivity = e.noise_sens;
    p.base_jitter = e.base * (1.0 + 0.15 * (i / static_cast<int>(table.size())));
    p.seed = hash_combine(0xBA4Cu, static_cast<std::uint64_t>(i));
    p.target_domain = e.target;
    std::snprintf(buf, sizeof buf, "%s_%02d", family_name(e.family), i);
    p.id = buf;
    bank.push_back(std::move(p));
  }
  return bank;
}

}  // namespace segqa
