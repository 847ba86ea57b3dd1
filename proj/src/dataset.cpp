#include "phg/dataset.hpp"

#include <sstream>

#include "phg/error.hpp"

namespace phg {

ModalitySet default_modality_set(bool with_intermediates) {
  std::vector<ModalitySpec> specs{{"rgb", Role::input, 3, 0}};
  if (with_intermediates) {
    for (int e = 1; e <= 3; ++e)
      specs.push_back({"semantic-expert-" + std::to_string(e) + "-converted", Role::intermediate, 8, 8});
    specs.push_back({"depth-expert", Role::intermediate, 1, 0});
    specs.push_back({"normals-svd", Role::intermediate, 3, 0});
    for (const char* name : {"buildings", "buildings-nearby", "containing", "safe-landing-geometric",
                             "safe-landing-semantic", "sky-and-water", "transportation", "vegetation"})
      specs.push_back({name, Role::intermediate, 1, 0});
  }
  specs.push_back({"gt-semantic", Role::output, 8, 8});
  specs.push_back({"gt-depth", Role::output, 1, 0});
  specs.push_back({"gt-normals", Role::output, 3, 0});
  return ModalitySet(std::move(specs));
}

namespace {

void parse_role_list(const std::string& list, Role role, std::vector<ModalitySpec>& out) {
  for (const std::string& item : split_list(list)) {
    const auto colon = item.rfind(':');
    if (colon == std::string::npos || colon == 0 || colon + 1 == item.size())
      throw DataError("modality entry '" + item + "' is not name:C or name:Kc");
    std::string count = item.substr(colon + 1);
    const bool categorical = count.back() == 'c';
    if (categorical) count.pop_back();
    std::size_t n = 0;
    try {
      std::size_t used = 0;
      n = std::stoul(count, &used);
      if (used != count.size()) throw std::invalid_argument(count);
    } catch (const std::exception&) {
      throw DataError("modality entry '" + item + "' has a bad channel count");
    }
    out.push_back({item.substr(0, colon), role, n, categorical ? n : 0});
  }
}

std::string role_list(const ModalitySet& set, const std::vector<std::size_t>& idx) {
  std::string s;
  for (std::size_t i : idx) {
    if (!s.empty()) s += ", ";
    s += set[i].name + ":" + std::to_string(set[i].channels) + (set[i].categorical() ? "c" : "");
  }
  return s;
}

}  // namespace

ModalitySet modality_set_from_config(const Config& config) {
  if (!config.has("modalities.inputs")) return default_modality_set(config.get_bool("modalities.intermediates", true));
  std::vector<ModalitySpec> specs;
  parse_role_list(config.get("modalities.inputs"), Role::input, specs);
  parse_role_list(config.get("modalities.intermediates", ""), Role::intermediate, specs);
  parse_role_list(config.get("modalities.outputs"), Role::output, specs);
  return ModalitySet(std::move(specs));
}

std::string describe_modality_set(const ModalitySet& set) {
  return "[modalities]\ninputs = " + role_list(set, set.inputs()) + "\nintermediates = " +
         role_list(set, set.intermediates()) + "\noutputs = " + role_list(set, set.outputs()) + "\n";
}

ModalitySet parse_modality_set(const std::string& text) { return modality_set_from_config(Config::parse(text)); }

ModalityBundle load_bundle(const fs::path& scene, std::size_t frame, const ModalitySet& set, bool with_outputs) {
  ModalityBundle b;
  b.scene = scene.filename().string();
  b.frame = frame;
  for (const ModalitySpec& s : set.specs()) {
    if (!with_outputs && s.role == Role::output) continue;
    const fs::path path = frame_path(scene, s.name, frame);
    if (!fs::exists(path)) throw DataError("missing modality file " + path.string());
    Tensor t = read_phgt(path);
    if (s.categorical() && t.rank() == 2) {
      t = one_hot(to_label_map(t), s.classes);
    } else if (t.rank() == 2) {
      t = t.reshaped({1, t.dim(0), t.dim(1)});
    }
    if (t.rank() != 3 || t.dim(0) != s.channels)
      throw DataError(path.string() + ": shape " + shape_str(t.shape()) + " does not fit modality '" + s.name + "'");
    b.maps.emplace(s.name, std::move(t));
  }
  if (with_outputs) validate_bundle(set, b);
  return b;
}

std::vector<ModalityBundle> load_bundles(const std::vector<fs::path>& roots, const ModalitySet& set, bool with_outputs,
                                         std::size_t jobs) {
  std::vector<std::pair<fs::path, std::size_t>> items;
  for (const fs::path& root : roots)
    for (const fs::path& scene : list_scenes(root))
      for (std::size_t f : list_frames(scene, set[set.inputs().front()].name)) items.emplace_back(scene, f);
  if (items.empty()) throw DataError("no frames found");
  std::vector<ModalityBundle> out(items.size());
  parallel_for(items.size(), jobs, [&](std::size_t i) { out[i] = load_bundle(items[i].first, items[i].second, set, with_outputs); });
  return out;
}

}  // namespace phg
