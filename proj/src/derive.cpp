#include "phg/derive.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <map>
#include <set>

#include <fmt/format.h>

#include "phg/error.hpp"
#include "phg/metrics.hpp"

namespace phg {

std::optional<std::uint8_t> source_class_index(const std::string& name) {
  for (std::size_t i = 0; i < kSourceClasses; ++i)
    if (name == kSourceClassNames[i]) return static_cast<std::uint8_t>(i);
  return std::nullopt;
}

std::optional<std::uint8_t> target_class_index(const std::string& name) {
  for (std::size_t i = 0; i < kSemanticClasses; ++i)
    if (name == kClassNames[i]) return static_cast<std::uint8_t>(i);
  return std::nullopt;
}

std::vector<std::uint8_t> default_conversion_table() {
  std::vector<std::uint8_t> t(kSourceClasses);
  for (std::size_t i = 0; i < kSourceClasses; ++i) t[i] = static_cast<std::uint8_t>(i / 2);
  return t;
}

namespace {

constexpr std::array<std::pair<DeriveKind, const char*>, 9> kKindNames{{
    {DeriveKind::convert, "convert"},
    {DeriveKind::binarize, "binarize"},
    {DeriveKind::binarize_median, "binarize-median"},
    {DeriveKind::median, "median"},
    {DeriveKind::normals_svd, "normals-svd"},
    {DeriveKind::safe_landing_geometric, "safe-landing-geometric"},
    {DeriveKind::safe_landing_semantic, "safe-landing-semantic"},
    {DeriveKind::buildings_nearby, "buildings-nearby"},
    {DeriveKind::match_distribution, "match-distribution"},
}};

void require_same_size(const LabelMap& a, const LabelMap& b) {
  if (a.height != b.height || a.width != b.width) throw DataError("class maps differ in size");
}

// Accepts [H,W] or [1,H,W].
Tensor as_plane(const Tensor& t, const char* what) {
  if (t.rank() == 2) return t.reshaped({1, t.dim(0), t.dim(1)});
  if (t.rank() == 3 && t.dim(0) == 1) return t;
  throw DataError(std::string(what) + " must be [H,W] or [1,H,W], got " + shape_str(t.shape()));
}

}  // namespace

const char* kind_name(DeriveKind kind) {
  for (const auto& [k, n] : kKindNames)
    if (k == kind) return n;
  return "?";
}

DeriveKind parse_kind(const std::string& name) {
  for (const auto& [k, n] : kKindNames)
    if (name == n) return k;
  throw DataError("unknown derivation kind '" + name + "'");
}

std::string DerivationNode::params_key() const {
  std::string k = fmt::format("{}|{}|", name, kind_name(kind));
  for (const auto& d : deps) k += d + ",";
  k += "|set:";
  for (auto c : class_set) k += std::to_string(c) + ",";
  k += "|table:";
  for (auto c : table) k += std::to_string(c) + ",";
  k += fmt::format("|w{}|z{:.17g}|up{}|{:.17g}|{:.17g}|{:.17g}|near{:.17g}|src{:.17g},{:.17g}|tgt{:.17g},{:.17g}", window,
                   z_scale, landing.up_channel, landing.up_min, landing.side_max, landing.depth_max, near_depth,
                   source_stats.mean, source_stats.std, target_stats.mean, target_stats.std);
  return k;
}

void DerivationNode::validate() const {
  auto need = [&](bool ok, const std::string& msg) {
    if (!ok) throw DataError("node '" + name + "': " + msg);
  };
  need(!name.empty(), "empty name");
  need(!deps.empty(), "no dependencies");
  for (const auto& d : deps) need(d != name, "depends on itself");
  switch (kind) {
    case DeriveKind::convert:
      need(deps.size() == 1, "convert takes one dependency");
      need(!table.empty(), "empty conversion table");
      for (auto c : table) need(c < kSemanticClasses, "conversion target out of range");
      break;
    case DeriveKind::binarize:
      need(deps.size() == 1, "binarize takes one dependency");
      break;
    case DeriveKind::binarize_median:
    case DeriveKind::median:
      need(deps.size() % 2 == 1, "median needs an odd number of maps");
      break;
    case DeriveKind::normals_svd:
      need(deps.size() == 1, "normals-svd takes one depth map");
      need(window >= 3 && window % 2 == 1, "window must be odd and at least 3");
      break;
    case DeriveKind::safe_landing_geometric:
      need(deps.size() == 2, "safe-landing-geometric takes normals and depth");
      need(landing.up_channel < 3, "up channel must be 0, 1 or 2");
      break;
    case DeriveKind::safe_landing_semantic:
      need(deps.size() >= 2 && (deps.size() - 1) % 2 == 1, "safe-landing-semantic takes a geometric map and an odd number of class maps");
      break;
    case DeriveKind::buildings_nearby:
      need(deps.size() == 2, "buildings-nearby takes buildings and depth");
      break;
    case DeriveKind::match_distribution:
      need(deps.size() == 1, "match-distribution takes one dependency");
      need(source_stats.std > 0.0, "source std must be positive");
      break;
  }
  for (auto c : class_set) need(c < kSourceClasses, "class index out of range");
}

std::vector<std::size_t> topo_order(const std::vector<DerivationNode>& nodes, Rng* shuffle) {
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < nodes.size(); ++i)
    if (!index.emplace(nodes[i].name, i).second) throw DataError("duplicate node '" + nodes[i].name + "'");

  std::vector<std::size_t> pending(nodes.size(), 0);
  std::vector<std::vector<std::size_t>> users(nodes.size());
  for (std::size_t i = 0; i < nodes.size(); ++i)
    for (const auto& d : nodes[i].deps)
      if (const auto it = index.find(d); it != index.end()) {
        ++pending[i];
        users[it->second].push_back(i);
      }

  auto by_name = [&](std::size_t a, std::size_t b) { return nodes[a].name < nodes[b].name; };
  std::vector<std::size_t> ready, order;
  for (std::size_t i = 0; i < nodes.size(); ++i)
    if (pending[i] == 0) ready.push_back(i);
  while (!ready.empty()) {
    std::sort(ready.begin(), ready.end(), by_name);
    const std::size_t pick = shuffle ? shuffle->below(ready.size()) : 0;
    const std::size_t n = ready[pick];
    ready.erase(ready.begin() + static_cast<long>(pick));
    order.push_back(n);
    for (std::size_t u : users[n])
      if (--pending[u] == 0) ready.push_back(u);
  }
  if (order.size() == nodes.size()) return order;

  // Walk unresolved dependencies until a node repeats to name the cycle.
  std::size_t cur = 0;
  while (pending[cur] == 0) ++cur;
  std::vector<std::size_t> path;
  std::vector<int> seen(nodes.size(), -1);
  while (seen[cur] < 0) {
    seen[cur] = static_cast<int>(path.size());
    path.push_back(cur);
    for (const auto& d : nodes[cur].deps)
      if (const auto it = index.find(d); it != index.end() && pending[it->second] > 0) {
        cur = it->second;
        break;
      }
  }
  std::string cycle;
  for (std::size_t i = static_cast<std::size_t>(seen[cur]); i < path.size(); ++i) cycle += nodes[path[i]].name + " -> ";
  throw DataError("dependency cycle: " + cycle + nodes[cur].name);
}

Tensor binarize(const LabelMap& map, const std::vector<std::uint8_t>& class_set) {
  std::array<bool, 256> in{};
  for (auto c : class_set) in[c] = true;
  Tensor out({1, map.height, map.width});
  for (std::size_t i = 0; i < map.size(); ++i) out[i] = in[map.labels[i]] ? 1.0f : 0.0f;
  return out;
}

LabelMap convert_classes(const LabelMap& map, const std::vector<std::uint8_t>& table) {
  LabelMap out(map.height, map.width);
  for (std::size_t i = 0; i < map.size(); ++i) {
    if (map.labels[i] >= table.size()) throw DataError("class " + std::to_string(map.labels[i]) + " outside the conversion table");
    out.labels[i] = table[map.labels[i]];
  }
  return out;
}

LabelMap median_of_experts(const std::vector<LabelMap>& maps) {
  if (maps.empty() || maps.size() % 2 == 0) throw DataError("median needs an odd number of maps");
  for (const auto& m : maps) require_same_size(m, maps[0]);
  LabelMap out(maps[0].height, maps[0].width);
  std::vector<std::uint8_t> v(maps.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    for (std::size_t k = 0; k < maps.size(); ++k) v[k] = maps[k].labels[i];
    std::nth_element(v.begin(), v.begin() + static_cast<long>(v.size() / 2), v.end());
    out.labels[i] = v[v.size() / 2];
  }
  return out;
}

Tensor binary_median(const std::vector<Tensor>& maps) {
  if (maps.empty() || maps.size() % 2 == 0) throw DataError("median needs an odd number of maps");
  Tensor out(maps[0].shape());
  for (const auto& m : maps)
    if (m.shape() != out.shape()) throw DataError("binary maps differ in shape");
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::size_t ones = 0;
    for (const auto& m : maps) ones += m[i] > 0.5f;
    out[i] = 2 * ones > maps.size() ? 1.0f : 0.0f;
  }
  return out;
}

Tensor normals_from_depth_svd(const Tensor& depth_in, std::size_t window, double z_scale) {
  if (window < 3 || window % 2 == 0) throw DataError("normals window must be odd and at least 3");
  const Tensor depth = as_plane(depth_in, "depth");
  const std::size_t h = depth.dim(1), w = depth.dim(2);
  if (z_scale <= 0.0) z_scale = static_cast<double>(std::max(h, w));
  const long r = static_cast<long>(window / 2);
  Tensor out({3, h, w});
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> solver;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      Eigen::Vector3d mean = Eigen::Vector3d::Zero();
      std::size_t n = 0;
      const long y0 = std::max(0L, static_cast<long>(y) - r), y1 = std::min(static_cast<long>(h) - 1, static_cast<long>(y) + r);
      const long x0 = std::max(0L, static_cast<long>(x) - r), x1 = std::min(static_cast<long>(w) - 1, static_cast<long>(x) + r);
      for (long yy = y0; yy <= y1; ++yy)
        for (long xx = x0; xx <= x1; ++xx) {
          mean += Eigen::Vector3d(static_cast<double>(xx), static_cast<double>(yy),
                                  depth[static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx)] * z_scale);
          ++n;
        }
      mean /= static_cast<double>(n);
      Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
      for (long yy = y0; yy <= y1; ++yy)
        for (long xx = x0; xx <= x1; ++xx) {
          const Eigen::Vector3d p(static_cast<double>(xx), static_cast<double>(yy),
                                  depth[static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx)] * z_scale);
          const Eigen::Vector3d d = p - mean;
          cov += d * d.transpose();
        }
      Eigen::Vector3d normal(0.0, 0.0, 1.0);
      solver.computeDirect(cov);
      const Eigen::Vector3d ev = solver.eigenvalues();
      // A plane needs two spread directions; otherwise keep the default.
      if (ev(1) > 1e-12 * std::max(1.0, ev(2))) {
        normal = solver.eigenvectors().col(0).normalized();
        if (normal.z() < 0.0) normal = -normal;
      }
      for (std::size_t c = 0; c < 3; ++c) out.at(c, y, x) = static_cast<float>((normal(static_cast<long>(c)) + 1.0) / 2.0);
    }
  return out;
}

Tensor safe_landing_geometric(const Tensor& normals, const Tensor& depth_in, const SafeLandingParams& p) {
  const Tensor depth = as_plane(depth_in, "depth");
  if (normals.rank() != 3 || normals.dim(0) != 3 || normals.dim(1) != depth.dim(1) || normals.dim(2) != depth.dim(2))
    throw DataError("safe landing: normals must be [3,H,W] matching depth");
  if (p.up_channel > 2) throw DataError("safe landing: up channel must be 0, 1 or 2");
  const std::size_t a = p.up_channel == 0 ? 1 : 0;
  const std::size_t b = p.up_channel == 2 ? 1 : 2;
  const std::size_t plane = depth.size();
  Tensor out({1, depth.dim(1), depth.dim(2)});
  // Thresholds compare at storage precision so a stored 0.8 is not above 0.8.
  const float up_min = static_cast<float>(p.up_min), side_max = static_cast<float>(p.side_max);
  const float depth_max = static_cast<float>(p.depth_max);
  for (std::size_t i = 0; i < plane; ++i) {
    const float v2 = normals[p.up_channel * plane + i];
    const float side = normals[a * plane + i] + normals[b * plane + i];
    out[i] = (v2 > up_min && side < side_max && depth[i] <= depth_max) ? 1.0f : 0.0f;
  }
  return out;
}

Tensor binary_and(const Tensor& a_in, const Tensor& b_in) {
  const Tensor a = as_plane(a_in, "binary map"), b = as_plane(b_in, "binary map");
  if (a.shape() != b.shape()) throw DataError("binary maps differ in shape");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = (a[i] > 0.5f && b[i] > 0.5f) ? 1.0f : 0.0f;
  return out;
}

Tensor buildings_nearby(const Tensor& buildings_in, const Tensor& depth_in, double near_depth) {
  const Tensor buildings = as_plane(buildings_in, "buildings"), depth = as_plane(depth_in, "depth");
  if (buildings.shape() != depth.shape()) throw DataError("buildings and depth differ in shape");
  Tensor out(buildings.shape());
  const float near = static_cast<float>(near_depth);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (buildings[i] > 0.5f && depth[i] < near) ? 1.0f : 0.0f;
  return out;
}

DistributionStats compute_stats(const Tensor& x) {
  if (x.empty()) throw DataError("statistics of an empty tensor");
  double s = 0.0;
  for (float v : x.data()) s += v;
  const double mean = s / static_cast<double>(x.size());
  double var = 0.0;
  for (float v : x.data()) var += (v - mean) * (v - mean);
  return {mean, std::sqrt(var / static_cast<double>(x.size()))};
}

Tensor match_distribution(const Tensor& x, const DistributionStats& source, const DistributionStats& target) {
  if (!(source.std > 0.0)) throw NumericError("match_distribution: source std must be positive");
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i)
    out[i] = static_cast<float>((x[i] - source.mean) / source.std * target.std + target.mean);
  ensure_finite(out, "match_distribution output");
  return out;
}

namespace {

std::vector<std::uint8_t> classes_of(std::initializer_list<const char*> names) {
  std::vector<std::uint8_t> out;
  for (const char* n : names) out.push_back(*source_class_index(n));
  return out;
}

const std::vector<std::string> kRawExperts{"semantic-expert-1", "semantic-expert-2", "semantic-expert-3"};

DerivationNode binary_node(const std::string& name, std::initializer_list<const char*> classes) {
  DerivationNode n;
  n.name = name;
  n.kind = DeriveKind::binarize_median;
  n.deps = kRawExperts;
  n.class_set = classes_of(classes);
  return n;
}

}  // namespace

std::vector<DerivationNode> default_derivation_graph() {
  std::vector<DerivationNode> g;
  for (const auto& raw : kRawExperts) {
    DerivationNode n;
    n.name = raw + "-converted";
    n.kind = DeriveKind::convert;
    n.deps = {raw};
    n.table = default_conversion_table();
    g.push_back(n);
  }
  {
    DerivationNode n;
    n.name = "normals-svd";
    n.kind = DeriveKind::normals_svd;
    n.deps = {"depth-expert"};
    g.push_back(n);
  }
  g.push_back(binary_node("vegetation", {"grass", "dirt", "tree", "bush", "river", "lake", "mountain", "rock"}));
  g.push_back(binary_node("sky-and-water", {"sky", "cloud", "river", "lake"}));
  g.push_back(binary_node("containing", {"grass", "dirt", "road", "sidewalk", "river", "lake", "mountain"}));
  g.push_back(binary_node("transportation", {"road", "sidewalk", "car"}));
  g.push_back(binary_node("buildings", {"building", "roof"}));
  {
    DerivationNode n;
    n.name = "buildings-nearby";
    n.kind = DeriveKind::buildings_nearby;
    n.deps = {"buildings", "depth-expert"};
    g.push_back(n);
  }
  {
    DerivationNode n;
    n.name = "safe-landing-geometric";
    n.kind = DeriveKind::safe_landing_geometric;
    n.deps = {"normals-svd", "depth-expert"};
    g.push_back(n);
  }
  {
    DerivationNode n;
    n.name = "safe-landing-semantic";
    n.kind = DeriveKind::safe_landing_semantic;
    n.deps = {"safe-landing-geometric", kRawExperts[0], kRawExperts[1], kRawExperts[2]};
    n.class_set = classes_of({"grass", "dirt", "road", "sidewalk", "roof", "tree", "mountain", "rock"});
    g.push_back(n);
  }
  {
    DerivationNode n;
    n.name = "semantic-median";
    n.kind = DeriveKind::median;
    n.deps = {"semantic-expert-1-converted", "semantic-expert-2-converted", "semantic-expert-3-converted"};
    g.push_back(n);
  }
  return g;
}

namespace {

std::uint8_t parse_class(const std::string& s, bool target) {
  if (const auto i = target ? target_class_index(s) : source_class_index(s)) return *i;
  try {
    std::size_t used = 0;
    const unsigned long v = std::stoul(s, &used);
    if (used == s.size() && v < 256) return static_cast<std::uint8_t>(v);
  } catch (const std::exception&) {
  }
  throw DataError("unknown class '" + s + "'");
}

}  // namespace

std::vector<DerivationNode> nodes_from_config(const Config& config) {
  std::vector<DerivationNode> nodes;
  const std::string prefix = "node.";
  for (const auto& section : config.sections()) {
    if (section.rfind(prefix, 0) != 0) continue;
    const std::string key = section + ".";
    DerivationNode n;
    n.name = section.substr(prefix.size());
    n.kind = parse_kind(config.get(key + "kind"));
    n.deps = config.get_list(key + "deps");
    if (config.has(key + "classes"))
      for (const auto& c : config.get_list(key + "classes")) n.class_set.push_back(parse_class(c, false));
    if (n.kind == DeriveKind::convert) {
      if (config.has(key + "table")) {
        for (const auto& c : config.get_list(key + "table")) n.table.push_back(parse_class(c, true));
      } else {
        n.table = default_conversion_table();
      }
    }
    n.window = static_cast<std::size_t>(config.get_int(key + "window", static_cast<long>(n.window)));
    n.z_scale = config.get_double(key + "z_scale", n.z_scale);
    n.landing.up_channel = static_cast<std::size_t>(config.get_int(key + "up_channel", static_cast<long>(n.landing.up_channel)));
    n.landing.up_min = config.get_double(key + "up_min", n.landing.up_min);
    n.landing.side_max = config.get_double(key + "side_max", n.landing.side_max);
    n.landing.depth_max = config.get_double(key + "depth_max", n.landing.depth_max);
    n.near_depth = config.get_double(key + "near_depth", n.near_depth);
    n.source_stats = {config.get_double(key + "source_mean", 0.0), config.get_double(key + "source_std", 1.0)};
    n.target_stats = {config.get_double(key + "target_mean", 0.0), config.get_double(key + "target_std", 1.0)};
    n.validate();
    nodes.push_back(std::move(n));
  }
  return nodes;
}

namespace {

struct Loaded {
  Tensor tensor;
  DType dtype = DType::f32;
  std::uint64_t hash = 0;
};

LabelMap class_map(const Loaded& l, const std::string& name) {
  if (l.dtype != DType::u8 || l.tensor.rank() != 2) throw DataError("'" + name + "' is not a class map");
  return to_label_map(l.tensor);
}

std::pair<Tensor, DType> evaluate(const DerivationNode& n, const std::vector<const Loaded*>& deps) {
  auto maps = [&](std::size_t from) {
    std::vector<LabelMap> out;
    for (std::size_t i = from; i < deps.size(); ++i) out.push_back(class_map(*deps[i], n.deps[i]));
    return out;
  };
  switch (n.kind) {
    case DeriveKind::convert:
      return {from_label_map(convert_classes(class_map(*deps[0], n.deps[0]), n.table)), DType::u8};
    case DeriveKind::binarize:
      return {binarize(class_map(*deps[0], n.deps[0]), n.class_set), DType::u8};
    case DeriveKind::binarize_median: {
      std::vector<Tensor> bins;
      for (const auto& m : maps(0)) bins.push_back(binarize(m, n.class_set));
      return {binary_median(bins), DType::u8};
    }
    case DeriveKind::median:
      return {from_label_map(median_of_experts(maps(0))), DType::u8};
    case DeriveKind::normals_svd:
      return {normals_from_depth_svd(deps[0]->tensor, n.window, n.z_scale), DType::f32};
    case DeriveKind::safe_landing_geometric:
      return {safe_landing_geometric(deps[0]->tensor, deps[1]->tensor, n.landing), DType::u8};
    case DeriveKind::safe_landing_semantic: {
      std::vector<Tensor> bins;
      for (const auto& m : maps(1)) bins.push_back(binarize(m, n.class_set));
      return {binary_and(deps[0]->tensor, binary_median(bins)), DType::u8};
    }
    case DeriveKind::buildings_nearby:
      return {buildings_nearby(deps[0]->tensor, deps[1]->tensor, n.near_depth), DType::u8};
    case DeriveKind::match_distribution:
      return {match_distribution(deps[0]->tensor, n.source_stats, n.target_stats), DType::f32};
  }
  throw DataError("unhandled derivation kind");
}

}  // namespace

PipelineResult run_pipeline(const fs::path& scene, const std::vector<DerivationNode>& nodes,
                            const PipelineOptions& options) {
  if (nodes.empty()) return {};
  for (const auto& n : nodes) n.validate();
  std::optional<Rng> shuffle;
  if (options.shuffle_seed) shuffle.emplace(*options.shuffle_seed);
  const std::vector<std::size_t> order = topo_order(nodes, shuffle ? &*shuffle : nullptr);
  const std::vector<std::size_t> frames = list_frames(scene, "rgb");

  std::atomic<std::size_t> written{0}, skipped{0};
  parallel_for(frames.size(), options.jobs, [&](std::size_t fi) {
    const std::size_t frame = frames[fi];
    std::map<std::string, Loaded> cache;
    auto load = [&](const std::string& name) -> const Loaded& {
      if (auto it = cache.find(name); it != cache.end()) return it->second;
      const fs::path p = frame_path(scene, name, frame);
      if (!fs::exists(p)) throw DataError("missing dependency file " + p.string());
      const std::string bytes = read_file(p);
      Loaded l;
      l.tensor = decode_phgt(bytes, &l.dtype, p.string());
      l.hash = fnv1a(bytes);
      return cache.emplace(name, std::move(l)).first->second;
    };
    for (std::size_t idx : order) {
      const DerivationNode& n = nodes[idx];
      std::vector<const Loaded*> deps;
      std::uint64_t h = fnv1a(n.params_key());
      for (const auto& d : n.deps) {
        deps.push_back(&load(d));
        h = fnv1a(hex64(deps.back()->hash), h);
      }
      const fs::path out = frame_path(scene, n.name, frame);
      fs::path sidecar = out;
      sidecar += ".hash";
      if (fs::exists(out) && fs::exists(sidecar) && read_file(sidecar) == hex64(h)) {
        ++skipped;
        continue;
      }
      auto [tensor, dtype] = evaluate(n, deps);
      const std::string bytes = encode_phgt(tensor, dtype);
      atomic_write(out, bytes);
      atomic_write(sidecar, hex64(h));
      cache[n.name] = Loaded{std::move(tensor), dtype, fnv1a(bytes)};
      ++written;
    }
  });
  return {written.load(), skipped.load()};
}

}  // namespace phg
