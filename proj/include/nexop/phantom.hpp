#pragma once

// Synthetic complex brain-like phantoms and multi-repetition noisy datasets.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "nexop/error.hpp"
#include "nexop/fft.hpp"
#include "nexop/io.hpp"
#include "nexop/random.hpp"
#include "nexop/tensor.hpp"

namespace nexop::phantom {

struct PhantomSpec {
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t min_ellipses = 4;  // including the outer head ellipse
  std::size_t max_ellipses = 8;
  double intensity_min = 0.1;
  double intensity_max = 1.0;
  double phase_scale = 0.6;        // bound on each phase polynomial coefficient (rad)
  double texture_amplitude = 0.08; // per fine-texture grating
  std::uint64_t seed = 0;
};

/// Random ellipses inside a head outline, modulated by fine gratings, with a
/// smooth quadratic phase. Magnitude is scaled so its maximum is 1.
inline ComplexImage generate_phantom(const PhantomSpec& spec) {
  const std::size_t h = spec.height, w = spec.width;
  ComplexImage out(h, w);
  if (spec.max_ellipses == 0 || spec.min_ellipses > spec.max_ellipses) return out;
  Rng rng(spec.seed, 0x5048414Eull);
  const std::size_t count =
      spec.min_ellipses + static_cast<std::size_t>(rng.below(spec.max_ellipses - spec.min_ellipses + 1));
  if (count == 0) return out;

  struct Ellipse {
    double cx, cy, a, b, angle, value;
  };
  std::vector<Ellipse> shapes;
  const double head_a = rng.uniform(0.68, 0.88), head_b = rng.uniform(0.75, 0.92);
  shapes.push_back({rng.uniform(-0.04, 0.04), rng.uniform(-0.04, 0.04), head_a, head_b, rng.uniform(-0.2, 0.2),
                    rng.uniform(0.55, 0.8)});
  for (std::size_t k = 1; k < count; ++k) {
    const double r = 0.55 * std::sqrt(rng.uniform()), t = rng.uniform(0.0, 2.0 * std::numbers::pi);
    shapes.push_back({r * std::cos(t) * head_a, r * std::sin(t) * head_b, rng.uniform(0.05, 0.3),
                      rng.uniform(0.05, 0.3), rng.uniform(0.0, std::numbers::pi),
                      rng.uniform(-0.35, 0.45) * (spec.intensity_max - spec.intensity_min)});
  }

  struct Grating {
    double fu, fv, phase;
  };
  std::vector<Grating> texture;
  for (int k = 0; k < 3; ++k) {
    // Periods of 2.5–6 pixels in a random direction.
    const double period = rng.uniform(2.5, 6.0), dir = rng.uniform(0.0, std::numbers::pi);
    texture.push_back({std::cos(dir) / period, std::sin(dir) / period, rng.uniform(0.0, 2.0 * std::numbers::pi)});
  }
  double coef[6];
  for (double& c : coef) c = rng.uniform(-spec.phase_scale, spec.phase_scale);

  auto inside = [](const Ellipse& e, double u, double v) {
    const double du = u - e.cx, dv = v - e.cy, c = std::cos(e.angle), s = std::sin(e.angle);
    const double x = (c * du + s * dv) / e.a, y = (-s * du + c * dv) / e.b;
    return x * x + y * y <= 1.0;
  };

  Tensor mag({h, w});
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      const double u = (static_cast<double>(c) - static_cast<double>(w) / 2) / (static_cast<double>(w) / 2);
      const double v = (static_cast<double>(r) - static_cast<double>(h) / 2) / (static_cast<double>(h) / 2);
      if (!inside(shapes[0], u, v)) continue;
      double m = shapes[0].value;
      for (std::size_t k = 1; k < shapes.size(); ++k)
        if (inside(shapes[k], u, v)) m += shapes[k].value;
      for (const auto& g : texture)
        m += spec.texture_amplitude *
             std::sin(2.0 * std::numbers::pi * (g.fu * static_cast<double>(c) + g.fv * static_cast<double>(r)) + g.phase);
      mag.at(r, c) = std::max(m, spec.intensity_min * 0.5);
    }
  const double peak = mag.max();
  if (peak > 0) mag *= 1.0 / peak;
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      const double u = (static_cast<double>(c) - static_cast<double>(w) / 2) / (static_cast<double>(w) / 2);
      const double v = (static_cast<double>(r) - static_cast<double>(h) / 2) / (static_cast<double>(h) / 2);
      const double phi = coef[0] + coef[1] * u + coef[2] * v + coef[3] * u * v + coef[4] * u * u + coef[5] * v * v;
      const double m = mag.at(r, c);
      out.re.at(r, c) = m * std::cos(phi);
      out.im.at(r, c) = m * std::sin(phi);
    }
  return out;
}

/// NEX fully sampled noisy repetitions of one image and their target.
struct MultiNexSample {
  Tensor kspace;  // [NEX,2,H,W], F x + ε_n
  Tensor images;  // [NEX,2,H,W], F⁻¹ of the above
  Tensor target;  // [H,W], mean of |x_n|
};

inline Tensor magnitude_mean(const Tensor& images) {
  const std::size_t n = images.dim(0), h = images.dim(2), w = images.dim(3), hw = h * w;
  Tensor out({h, w});
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t i = 0; i < hw; ++i) out[i] += std::hypot(images[2 * k * hw + i], images[(2 * k + 1) * hw + i]);
  out *= 1.0 / static_cast<double>(n);
  return out;
}

/// Independent complex Gaussian k-space noise (σ per component) per repetition.
inline MultiNexSample make_multinex(const ComplexImage& x, double sigma, std::size_t nex, std::uint64_t seed) {
  if (sigma < 0) throw ConfigError("noise sigma must be >= 0");
  const ComplexImage k = fft2c(x);
  std::vector<ComplexImage> reps(nex, k);
  Rng rng(seed, 0x4E4558ull);
  for (auto& r : reps) {
    if (sigma == 0) break;
    for (std::size_t i = 0; i < r.size(); ++i) {
      r.re[i] += sigma * rng.normal();
      r.im[i] += sigma * rng.normal();
    }
  }
  MultiNexSample s;
  s.kspace = stack_planar(reps);
  s.images = fft2c_planar(s.kspace, true);
  s.target = magnitude_mean(s.images);
  return s;
}

// ---------------------------------------------------------------------------
// Datasets

struct ExampleInfo {
  std::size_t index = 0;
  std::uint64_t phantom_seed = 0;
  std::uint64_t noise_seed = 0;
};

struct DatasetManifest {
  PhantomSpec spec;  // seed field unused; each example carries its own
  std::size_t nex = 3;
  double sigma = 0.15;
  std::uint64_t seed = 0;
  std::vector<ExampleInfo> train, val, test;
};

struct Example {
  ExampleInfo info;
  MultiNexSample data;
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<Example> train, val, test;

  const std::vector<Example>& split(const std::string& name) const {
    if (name == "train") return train;
    if (name == "val") return val;
    if (name == "test") return test;
    throw ConfigError("unknown split '" + name + "'");
  }
};

inline DatasetManifest make_manifest(const PhantomSpec& spec, std::size_t nex, double sigma, std::uint64_t seed,
                                     std::size_t n_train, std::size_t n_val, std::size_t n_test) {
  DatasetManifest m{spec, nex, sigma, seed, {}, {}, {}};
  std::size_t index = 0;
  std::set<std::uint64_t> seen;
  auto fill = [&](std::vector<ExampleInfo>& out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i, ++index) {
      ExampleInfo e{index, stream_seed(seed, 2 * index), stream_seed(seed, 2 * index + 1)};
      if (!seen.insert(e.phantom_seed).second) throw NumericError("phantom seed collision");
      out.push_back(e);
    }
  };
  fill(m.train, n_train);
  fill(m.val, n_val);
  fill(m.test, n_test);
  return m;
}

inline Example realize(const DatasetManifest& m, const ExampleInfo& info) {
  PhantomSpec s = m.spec;
  s.seed = info.phantom_seed;
  return {info, make_multinex(generate_phantom(s), m.sigma, m.nex, info.noise_seed)};
}

/// Regenerates every example from the manifest alone.
inline Dataset generate_dataset(const DatasetManifest& m) {
  Dataset d{m, {}, {}, {}};
  for (const auto& e : m.train) d.train.push_back(realize(m, e));
  for (const auto& e : m.val) d.val.push_back(realize(m, e));
  for (const auto& e : m.test) d.test.push_back(realize(m, e));
  return d;
}

inline nlohmann::json to_json(const DatasetManifest& m) {
  using nlohmann::json;
  auto list = [](const std::vector<ExampleInfo>& v) {
    json a = json::array();
    for (const auto& e : v)
      a.push_back({{"index", e.index}, {"phantom_seed", e.phantom_seed}, {"noise_seed", e.noise_seed}});
    return a;
  };
  return json{{"format", "nexop-dataset-1"},
              {"height", m.spec.height},
              {"width", m.spec.width},
              {"min_ellipses", m.spec.min_ellipses},
              {"max_ellipses", m.spec.max_ellipses},
              {"intensity_min", m.spec.intensity_min},
              {"intensity_max", m.spec.intensity_max},
              {"phase_scale", m.spec.phase_scale},
              {"texture_amplitude", m.spec.texture_amplitude},
              {"nex", m.nex},
              {"sigma", m.sigma},
              {"seed", m.seed},
              {"train", list(m.train)},
              {"val", list(m.val)},
              {"test", list(m.test)}};
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format") != "nexop-dataset-1") throw FormatError("unsupported dataset manifest format");
    DatasetManifest m;
    m.spec.height = j.at("height");
    m.spec.width = j.at("width");
    m.spec.min_ellipses = j.at("min_ellipses");
    m.spec.max_ellipses = j.at("max_ellipses");
    m.spec.intensity_min = j.at("intensity_min");
    m.spec.intensity_max = j.at("intensity_max");
    m.spec.phase_scale = j.at("phase_scale");
    m.spec.texture_amplitude = j.at("texture_amplitude");
    m.nex = j.at("nex");
    m.sigma = j.at("sigma");
    m.seed = j.at("seed");
    auto list = [](const nlohmann::json& a) {
      std::vector<ExampleInfo> v;
      for (const auto& e : a) v.push_back({e.at("index"), e.at("phantom_seed"), e.at("noise_seed")});
      return v;
    };
    m.train = list(j.at("train"));
    m.val = list(j.at("val"));
    m.test = list(j.at("test"));
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed dataset manifest: ") + e.what());
  }
}

namespace detail {

inline std::string example_stem(const std::string& split, std::size_t index) {
  std::ostringstream os;
  os << split << "/" << std::setw(4) << std::setfill('0') << index;
  return os.str();
}

}  // namespace detail

/// manifest.json plus, per example, one complex NXT of fully sampled noisy
/// k-space per repetition and a real NXT of the target.
inline void write_dataset(const std::filesystem::path& dir, const Dataset& d) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "manifest.json");
    out << to_json(d.manifest).dump(2) << "\n";
  }
  for (const std::string split : {"train", "val", "test"}) {
    for (const auto& e : d.split(split)) {
      const std::string stem = detail::example_stem(split, e.info.index);
      const std::size_t nex = e.data.kspace.dim(0), h = e.data.kspace.dim(2), w = e.data.kspace.dim(3);
      for (std::size_t n = 0; n < nex; ++n) {
        Tensor plane({1, 2, h, w});
        std::copy_n(e.data.kspace.vec().begin() + 2 * n * h * w, 2 * h * w, plane.vec().begin());
        io::write_nxt_complex(dir / (stem + "_rep" + std::to_string(n + 1) + ".nxt"), plane);
      }
      io::write_nxt(dir / (stem + "_target.nxt"), e.data.target);
    }
  }
}

inline DatasetManifest read_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw FormatError("cannot open " + (dir / "manifest.json").string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed dataset manifest: ") + e.what());
  }
  return manifest_from_json(j);
}

inline Dataset read_dataset(const std::filesystem::path& dir) {
  Dataset d;
  d.manifest = read_manifest(dir);
  const auto& m = d.manifest;
  auto load = [&](const std::string& split, const std::vector<ExampleInfo>& infos, std::vector<Example>& out) {
    for (const auto& info : infos) {
      const std::string stem = detail::example_stem(split, info.index);
      std::vector<ComplexImage> reps;
      for (std::size_t n = 0; n < m.nex; ++n) {
        const Tensor p = io::read_nxt(dir / (stem + "_rep" + std::to_string(n + 1) + ".nxt")).to_planar();
        if (p.dim(0) != 1 || p.dim(2) != m.spec.height || p.dim(3) != m.spec.width)
          throw FormatError(stem + ": repetition shape does not match the manifest");
        reps.push_back(unstack_planar(p)[0]);
      }
      Example e;
      e.info = info;
      e.data.kspace = stack_planar(reps);
      e.data.images = fft2c_planar(e.data.kspace, true);
      e.data.target = io::read_nxt(dir / (stem + "_target.nxt")).to_tensor();
      out.push_back(std::move(e));
    }
  };
  load("train", m.train, d.train);
  load("val", m.val, d.val);
  load("test", m.test, d.test);
  return d;
}

}  // namespace nexop::phantom
