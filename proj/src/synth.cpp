#include "phg/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <fmt/format.h>

#include "phg/derive.hpp"
#include "phg/error.hpp"
#include "phg/rng.hpp"

namespace phg {

void SyntheticSceneSpec::validate() const {
  if (frames < 3) throw DataError("scene '" + name + "': at least 3 frames required");
  if (height < 16 || width < 16) throw DataError("scene '" + name + "': resolution must be at least 16x16");
  if (feature_scale < 2.0 || octaves == 0) throw DataError("scene '" + name + "': invalid terrain noise");
  for (const auto& e : experts)
    if (e.flip_rate < 0.0 || e.flip_rate > 1.0 || e.blob_min <= 0.0 || e.blob_max < e.blob_min)
      throw DataError("scene '" + name + "': invalid expert noise");
  if (depth_noise < 0.0 || noise_jitter < 0.0) throw DataError("scene '" + name + "': negative noise");
}

namespace {

void apply_overrides(SyntheticSceneSpec& s, const Config& c, const std::string& sec) {
  const std::string k = sec.empty() ? "" : sec + ".";
  auto sz = [&](const char* key, std::size_t& v) { v = static_cast<std::size_t>(c.get_int(k + key, static_cast<long>(v))); };
  auto dbl = [&](const char* key, double& v) { v = c.get_double(k + key, v); };
  if (c.has(k + "seed")) s.seed = static_cast<std::uint64_t>(c.get_int(k + "seed", 0));
  sz("frames", s.frames);
  sz("height", s.height);
  sz("width", s.width);
  s.vx = static_cast<int>(c.get_int(k + "vx", s.vx));
  s.vy = static_cast<int>(c.get_int(k + "vy", s.vy));
  sz("octaves", s.octaves);
  dbl("feature_scale", s.feature_scale);
  sz("buildings", s.buildings);
  sz("roads", s.roads);
  sz("cars", s.cars);
  sz("persons", s.persons);
  dbl("water_quantile", s.water_quantile);
  dbl("hill_quantile", s.hill_quantile);
  dbl("forest_threshold", s.forest_threshold);
  dbl("sky_rows", s.sky_rows);
  dbl("sky_wave", s.sky_wave);
  dbl("rgb_noise", s.rgb_noise);
  dbl("texture", s.texture);
  dbl("color_cast", s.color_cast);
  for (std::size_t e = 0; e < 3; ++e) {
    const std::string p = fmt::format("expert{}_", e + 1);
    s.experts[e].flip_rate = c.get_double(k + p + "flip_rate", s.experts[e].flip_rate);
    s.experts[e].blob_min = c.get_double(k + p + "blob_min", s.experts[e].blob_min);
    s.experts[e].blob_max = c.get_double(k + p + "blob_max", s.experts[e].blob_max);
  }
  dbl("noise_jitter", s.noise_jitter);
  dbl("depth_noise", s.depth_noise);
  dbl("depth_noise_scale", s.depth_noise_scale);
  dbl("depth_bias", s.depth_bias);
}

}  // namespace

std::vector<SyntheticSceneSpec> scene_specs_from_config(const Config& config) {
  SyntheticSceneSpec base;
  apply_overrides(base, config, "gen");
  const std::uint64_t base_seed = base.seed;
  std::vector<SyntheticSceneSpec> out;
  for (const auto& sec : config.sections()) {
    if (sec.rfind("scene.", 0) != 0) continue;
    SyntheticSceneSpec s = base;
    s.name = sec.substr(6);
    s.seed = mix_seed(base_seed, fnv1a(s.name));
    apply_overrides(s, config, sec);
    s.validate();
    out.push_back(s);
  }
  if (out.empty()) {
    const long count = config.get_int("gen.scenes", 1);
    const std::string prefix = config.get("gen.prefix", "scene");
    const long first = config.get_int("gen.first_index", 0);
    for (long i = first; i < first + count; ++i) {
      SyntheticSceneSpec s = base;
      s.name = fmt::format("{}-{:02d}", prefix, i);
      s.seed = mix_seed(base_seed, static_cast<std::uint64_t>(i));
      s.validate();
      out.push_back(s);
    }
  }
  return out;
}

namespace {

// Smooth value noise in [0,1] over a canvas.
class ValueNoise {
 public:
  ValueNoise(std::size_t h, std::size_t w, double period, std::size_t octaves, Rng rng) : h_(h), w_(w) {
    double amp = 1.0, p = period;
    for (std::size_t o = 0; o < octaves && p >= 1.0; ++o) {
      Layer l;
      l.period = p;
      l.amp = amp;
      l.gh = static_cast<std::size_t>(std::ceil(static_cast<double>(h) / p)) + 2;
      l.gw = static_cast<std::size_t>(std::ceil(static_cast<double>(w) / p)) + 2;
      l.grid.resize(l.gh * l.gw);
      for (auto& v : l.grid) v = rng.uniform();
      total_ += amp;
      layers_.push_back(std::move(l));
      amp *= 0.5;
      p *= 0.5;
    }
  }

  double at(double y, double x) const {
    double s = 0.0;
    for (const Layer& l : layers_) {
      const double gy = y / l.period, gx = x / l.period;
      const std::size_t iy = static_cast<std::size_t>(gy), ix = static_cast<std::size_t>(gx);
      const double fy = smooth(gy - static_cast<double>(iy)), fx = smooth(gx - static_cast<double>(ix));
      const double a = l.grid[iy * l.gw + ix], b = l.grid[iy * l.gw + ix + 1];
      const double c = l.grid[(iy + 1) * l.gw + ix], d = l.grid[(iy + 1) * l.gw + ix + 1];
      s += l.amp * ((a * (1 - fx) + b * fx) * (1 - fy) + (c * (1 - fx) + d * fx) * fy);
    }
    return s / total_;
  }

 private:
  struct Layer {
    double period = 1.0, amp = 1.0;
    std::size_t gh = 0, gw = 0;
    std::vector<double> grid;
  };
  static double smooth(double t) { return t * t * (3.0 - 2.0 * t); }

  std::size_t h_, w_;
  double total_ = 0.0;
  std::vector<Layer> layers_;
};

enum Fine : std::uint8_t {
  kGrass, kDirt, kTree, kBush, kBuilding, kRoof, kRoad, kSidewalk,
  kCar, kPerson, kRiver, kLake, kSky, kCloud, kMountain, kRock,
};

constexpr std::array<std::array<double, 3>, kSourceClasses> kColors{{
    {0.38, 0.58, 0.24}, {0.46, 0.54, 0.22}, {0.12, 0.30, 0.12}, {0.16, 0.36, 0.14},
    {0.74, 0.72, 0.68}, {0.70, 0.30, 0.24}, {0.30, 0.30, 0.33}, {0.50, 0.50, 0.52},
    {0.80, 0.15, 0.15}, {0.92, 0.82, 0.22}, {0.15, 0.30, 0.60}, {0.18, 0.34, 0.55},
    {0.58, 0.74, 0.94}, {0.88, 0.90, 0.95}, {0.58, 0.40, 0.30}, {0.64, 0.52, 0.44},
}};

// Classes sharing a layer meet without a depth step.
int surface_layer(std::uint8_t c) {
  switch (c) {
    case kSky: case kCloud: return 0;
    case kBuilding: case kRoof: return 1;
    default: return 3;
  }
}

struct World {
  std::size_t h = 0, w = 0;
  std::vector<double> height;     // terrain relief in [0,1]
  std::vector<std::uint8_t> fine;
  std::vector<float> depth;       // terrain depth
  std::vector<float> texture;     // world-anchored shading texture
};

double quantile(std::vector<double> v, double q) {
  const std::size_t k = std::min(v.size() - 1, static_cast<std::size_t>(q * static_cast<double>(v.size())));
  std::nth_element(v.begin(), v.begin() + static_cast<long>(k), v.end());
  return v[k];
}

World build_world(const SyntheticSceneSpec& s, Rng& rng) {
  World wd;
  const std::size_t pad = 2;
  wd.h = s.height + static_cast<std::size_t>(std::abs(s.vy)) * s.frames + pad;
  wd.w = s.width + static_cast<std::size_t>(std::abs(s.vx)) * s.frames + pad;
  const std::size_t n = wd.h * wd.w;
  const ValueNoise relief(wd.h, wd.w, s.feature_scale, s.octaves, rng.split(1));
  const ValueNoise detail(wd.h, wd.w, s.feature_scale / 4, 2, rng.split(2));
  const ValueNoise forest(wd.h, wd.w, s.feature_scale * 0.75, 3, rng.split(3));
  const ValueNoise tex(wd.h, wd.w, 3.0, 2, rng.split(4));
  wd.height.resize(n);
  wd.texture.resize(n);
  for (std::size_t y = 0; y < wd.h; ++y)
    for (std::size_t x = 0; x < wd.w; ++x) {
      wd.height[y * wd.w + x] = relief.at(static_cast<double>(y), static_cast<double>(x));
      wd.texture[y * wd.w + x] = static_cast<float>(tex.at(static_cast<double>(y), static_cast<double>(x)) - 0.5);
    }
  const double water = quantile(wd.height, s.water_quantile);
  const double hill = quantile(wd.height, s.hill_quantile);

  wd.fine.assign(n, kGrass);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t y = i / wd.w, x = i % wd.w;
    const double d = detail.at(static_cast<double>(y), static_cast<double>(x));
    const double hgt = wd.height[i];
    std::uint8_t c = d > 0.55 ? kDirt : kGrass;
    if (forest.at(static_cast<double>(y), static_cast<double>(x)) > s.forest_threshold) c = d > 0.6 ? kBush : kTree;
    if (hgt < water) {
      c = d > 0.5 ? kRiver : kLake;
      wd.height[i] = water;  // flat water surface
    } else if (hgt > hill) {
      c = d > 0.5 ? kRock : kMountain;
    }
    wd.fine[i] = c;
  }
  auto is_water = [&](std::size_t i) { return wd.fine[i] == kRiver || wd.fine[i] == kLake; };

  // Roads: straight bands with sidewalks, skipping water.
  for (std::size_t r = 0; r < s.roads; ++r) {
    const bool horizontal = rng.below(2) == 0;
    const std::size_t span = horizontal ? wd.h : wd.w;
    const std::size_t at = 6 + rng.below(std::max<std::size_t>(1, span - 12));
    const double slope = rng.uniform(-0.15, 0.15);
    const std::size_t len = horizontal ? wd.w : wd.h;
    for (std::size_t t = 0; t < len; ++t) {
      const long centre = static_cast<long>(std::lround(static_cast<double>(at) + slope * static_cast<double>(t)));
      for (long o = -2; o <= 2; ++o) {
        const long p = centre + o;
        if (p < 0 || p >= static_cast<long>(span)) continue;
        const std::size_t i = horizontal ? static_cast<std::size_t>(p) * wd.w + t : t * wd.w + static_cast<std::size_t>(p);
        if (is_water(i)) continue;
        wd.fine[i] = (o == -2 || o == 2) ? kSidewalk : kRoad;
      }
    }
  }

  // Buildings inside the region the camera sees.
  std::vector<std::uint8_t> raised(n, 0);
  for (std::size_t b = 0; b < s.buildings; ++b) {
    const std::size_t bh = 5 + rng.below(8), bw = 5 + rng.below(10);
    const std::size_t y0 = s.sky_rows > 0 ? static_cast<std::size_t>(s.sky_rows + s.sky_wave) + rng.below(wd.h - bh - static_cast<std::size_t>(s.sky_rows + s.sky_wave))
                                          : rng.below(wd.h - bh);
    const std::size_t x0 = rng.below(wd.w - bw);
    for (std::size_t y = y0; y < y0 + bh; ++y)
      for (std::size_t x = x0; x < x0 + bw; ++x) {
        const std::size_t i = y * wd.w + x;
        if (is_water(i)) continue;
        const bool edge = y == y0 || x == x0 || y + 1 == y0 + bh || x + 1 == x0 + bw;
        wd.fine[i] = edge ? kBuilding : kRoof;
        raised[i] = 1;
      }
  }

  // Little objects: cars on roads, people on open ground.
  std::vector<std::size_t> road_px, open_px;
  for (std::size_t i = 0; i < n; ++i) {
    if (wd.fine[i] == kRoad) road_px.push_back(i);
    if (wd.fine[i] == kGrass || wd.fine[i] == kDirt || wd.fine[i] == kSidewalk) open_px.push_back(i);
  }
  for (std::size_t c = 0; c < s.cars && !road_px.empty(); ++c) {
    const std::size_t i = road_px[rng.below(road_px.size())];
    const std::size_t y = i / wd.w, x = i % wd.w;
    for (std::size_t dy = 0; dy < 2; ++dy)
      for (std::size_t dx = 0; dx < 3; ++dx)
        if (y + dy < wd.h && x + dx < wd.w && !is_water((y + dy) * wd.w + x + dx)) wd.fine[(y + dy) * wd.w + x + dx] = kCar;
  }
  for (std::size_t p = 0; p < s.persons && !open_px.empty(); ++p) {
    const std::size_t i = open_px[rng.below(open_px.size())];
    wd.fine[i] = kPerson;
    if (i + wd.w < n) wd.fine[i + wd.w] = kPerson;
  }

  wd.depth.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    double d = 0.82 - 0.22 * wd.height[i];
    if (raised[i]) d -= 0.38;
    wd.depth[i] = static_cast<float>(std::clamp(d, 0.02, 0.95));
  }
  return wd;
}

Tensor normals_from_depth_gradient(const Tensor& depth) {
  const std::size_t h = depth.dim(1), w = depth.dim(2);
  const double zs = static_cast<double>(std::max(h, w));
  Tensor out({3, h, w});
  auto d = [&](std::size_t y, std::size_t x) { return static_cast<double>(depth[y * w + x]); };
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t xl = x > 0 ? x - 1 : x, xr = x + 1 < w ? x + 1 : x;
      const std::size_t yu = y > 0 ? y - 1 : y, yd = y + 1 < h ? y + 1 : y;
      const double gx = (d(y, xr) - d(y, xl)) / static_cast<double>(xr - xl);
      const double gy = (d(yd, x) - d(yu, x)) / static_cast<double>(yd - yu);
      const double nx = -zs * gx, ny = -zs * gy, norm = std::sqrt(nx * nx + ny * ny + 1.0);
      out.at(0, y, x) = static_cast<float>((nx / norm + 1.0) / 2.0);
      out.at(1, y, x) = static_cast<float>((ny / norm + 1.0) / 2.0);
      out.at(2, y, x) = static_cast<float>((1.0 / norm + 1.0) / 2.0);
    }
  return out;
}

}  // namespace

RenderedScene gen_scene(const SyntheticSceneSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const World wd = build_world(spec, rng);
  const std::size_t h = spec.height, w = spec.width, plane = h * w;

  Rng look = rng.split(10);
  std::array<double, 3> cast{};
  for (auto& c : cast) c = 1.0 + look.uniform(-spec.color_cast, spec.color_cast);
  const double brightness = 1.0 + look.uniform(-0.08, 0.08);
  const double phase = look.uniform(0.0, 2.0 * std::numbers::pi);
  const double waves = 1.0 + look.uniform(0.0, 2.0);
  const ValueNoise clouds(h, w, 12.0, 2, rng.split(11));
  std::vector<std::uint8_t> sky(plane, 0);
  for (std::size_t x = 0; x < w; ++x) {
    const double rows = spec.sky_rows + spec.sky_wave * std::sin(phase + waves * 2.0 * std::numbers::pi * static_cast<double>(x) / static_cast<double>(w));
    for (std::size_t y = 0; y < h && static_cast<double>(y) < rows; ++y) sky[y * w + x] = 1;
  }

  // Origin of frame t on the canvas; negative velocities start from the far side.
  const std::size_t ox0 = spec.vx < 0 ? static_cast<std::size_t>(-spec.vx) * spec.frames : 0;
  const std::size_t oy0 = spec.vy < 0 ? static_cast<std::size_t>(-spec.vy) * spec.frames : 0;
  const std::vector<std::uint8_t> table = default_conversion_table();
  const double lx = -0.35, ly = -0.45, lz = 0.82;

  RenderedScene scene;
  scene.spec = spec;
  for (std::size_t t = 0; t < spec.frames; ++t) {
    const std::size_t ox = ox0 + static_cast<std::size_t>(static_cast<long>(t) * spec.vx);
    const std::size_t oy = oy0 + static_cast<std::size_t>(static_cast<long>(t) * spec.vy);
    RenderedFrame f;
    f.fine = LabelMap(h, w);
    f.depth = Tensor({1, h, w});
    f.flow_fwd = Tensor({2, h, w});
    f.flow_bwd = Tensor({2, h, w});
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t i = y * w + x;
        if (sky[i]) {
          f.fine.labels[i] = clouds.at(static_cast<double>(y), static_cast<double>(x)) > 0.6 ? kCloud : kSky;
          f.depth[i] = 1.0f;
          continue;
        }
        const std::size_t wi = (y + oy) * wd.w + (x + ox);
        f.fine.labels[i] = wd.fine[wi];
        f.depth[i] = wd.depth[wi];
        f.flow_fwd[i] = static_cast<float>(-spec.vx);
        f.flow_fwd[plane + i] = static_cast<float>(-spec.vy);
        f.flow_bwd[i] = static_cast<float>(spec.vx);
        f.flow_bwd[plane + i] = static_cast<float>(spec.vy);
      }
    f.semantic = convert_classes(f.fine, table);
    f.normals = normals_from_depth_gradient(f.depth);
    f.border.assign(plane, 0);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        bool jump = false;
        for (long dy = -1; dy <= 1 && !jump; ++dy)
          for (long dx = -1; dx <= 1 && !jump; ++dx) {
            const long yy = static_cast<long>(y) + dy, xx = static_cast<long>(x) + dx;
            if (yy < 0 || xx < 0 || yy >= static_cast<long>(h) || xx >= static_cast<long>(w)) continue;
            jump = surface_layer(f.fine.labels[static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx)]) !=
                   surface_layer(f.fine.labels[y * w + x]);
          }
        f.border[y * w + x] = jump;
      }

    Rng pix = rng.split(100 + t);
    f.rgb = Tensor({3, h, w});
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t i = y * w + x;
        const double nx = 2.0 * f.normals.at(0, y, x) - 1, ny = 2.0 * f.normals.at(1, y, x) - 1,
                     nz = 2.0 * f.normals.at(2, y, x) - 1;
        const double shade = sky[i] ? 1.0 : 0.55 + 0.45 * std::max(0.0, nx * lx + ny * ly + nz * lz);
        const double tx = sky[i] ? 0.0 : spec.texture * wd.texture[(y + oy) * wd.w + (x + ox)];
        const auto& col = kColors[f.fine.labels[i]];
        for (std::size_t c = 0; c < 3; ++c) {
          const double v = (col[c] * shade + tx) * cast[c] * brightness + spec.rgb_noise * pix.normal();
          f.rgb[c * plane + i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
      }
    scene.frames.push_back(std::move(f));
  }
  return scene;
}

std::vector<ExpertFrame> simulate_experts(const RenderedScene& scene) {
  const SyntheticSceneSpec& spec = scene.spec;
  const std::size_t h = spec.height, w = spec.width;
  Rng rng = Rng(spec.seed).split(0xe4e47);
  std::vector<ExpertFrame> out;
  for (std::size_t t = 0; t < scene.frames.size(); ++t) {
    const RenderedFrame& f = scene.frames[t];
    ExpertFrame ef;
    Rng frame_rng = rng.split(t);
    ef.noise_scale = std::exp(frame_rng.uniform(-spec.noise_jitter, spec.noise_jitter));
    for (std::size_t e = 0; e < 3; ++e) {
      Rng er = frame_rng.split(e + 1);
      LabelMap m = f.fine;
      const ExpertNoise& nz = spec.experts[e];
      const double rate = std::min(0.9, nz.flip_rate * ef.noise_scale);
      const double target = rate * static_cast<double>(h * w);
      double covered = 0.0;
      while (covered < target && nz.flip_rate > 0.0) {
        const double r = er.uniform(nz.blob_min, nz.blob_max);
        const double cy = er.uniform(0.0, static_cast<double>(h)), cx = er.uniform(0.0, static_cast<double>(w));
        const auto cls = static_cast<std::uint8_t>(er.below(kSourceClasses));
        for (long y = static_cast<long>(cy - r); y <= static_cast<long>(cy + r); ++y)
          for (long x = static_cast<long>(cx - r); x <= static_cast<long>(cx + r); ++x) {
            if (y < 0 || x < 0 || y >= static_cast<long>(h) || x >= static_cast<long>(w)) continue;
            if ((y - cy) * (y - cy) + (x - cx) * (x - cx) > r * r) continue;
            m.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = cls;
          }
        covered += std::numbers::pi * r * r;
      }
      ef.semantic[e] = std::move(m);
    }
    Rng dr = frame_rng.split(7);
    ef.depth = f.depth;
    if (spec.depth_noise > 0.0 || spec.depth_bias != 0.0) {
      const ValueNoise noise(h, w, spec.depth_noise_scale, 2, dr.split(1));
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          const double v = f.depth[y * w + x] + spec.depth_bias +
                           spec.depth_noise * 2.0 * (noise.at(static_cast<double>(y), static_cast<double>(x)) - 0.5) * std::sqrt(3.0);
          ef.depth[y * w + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
    }
    out.push_back(std::move(ef));
  }
  return out;
}

void write_scene(const fs::path& dir, const RenderedScene& scene, const std::vector<ExpertFrame>& experts) {
  for (std::size_t t = 0; t < scene.frames.size(); ++t) {
    const RenderedFrame& f = scene.frames[t];
    write_phgt(frame_path(dir, "rgb", t), f.rgb, DType::f32);
    write_label_map(frame_path(dir, "gt-semantic", t), f.semantic);
    write_phgt(frame_path(dir, "gt-depth", t), f.depth, DType::f32);
    write_phgt(frame_path(dir, "gt-normals", t), f.normals, DType::f32);
    write_phgt(frame_path(dir, "flow-fwd", t), f.flow_fwd, DType::f32);
    write_phgt(frame_path(dir, "flow-bwd", t), f.flow_bwd, DType::f32);
    if (t < experts.size()) {
      for (std::size_t e = 0; e < 3; ++e)
        write_label_map(frame_path(dir, fmt::format("semantic-expert-{}", e + 1), t), experts[t].semantic[e]);
      write_phgt(frame_path(dir, "depth-expert", t), experts[t].depth, DType::f32);
    }
  }
}

}  // namespace phg
