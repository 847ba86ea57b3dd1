#include "phg/modality.hpp"

#include <algorithm>
#include <set>
#include <stdexcept>

#include "phg/error.hpp"

namespace phg {

const char* role_name(Role role) {
  switch (role) {
    case Role::input: return "input";
    case Role::intermediate: return "intermediate";
    case Role::output: return "output";
  }
  return "?";
}

Role parse_role(const std::string& name) {
  if (name == "input") return Role::input;
  if (name == "intermediate") return Role::intermediate;
  if (name == "output") return Role::output;
  throw DataError("unknown modality role '" + name + "'");
}

ModalitySet::ModalitySet(std::vector<ModalitySpec> specs) : specs_(std::move(specs)) {
  std::set<std::string> names;
  for (std::size_t i = 0; i < specs_.size(); ++i) {
    const ModalitySpec& s = specs_[i];
    if (s.name.empty()) throw DataError("modality with empty name");
    if (!names.insert(s.name).second) throw DataError("duplicate modality '" + s.name + "'");
    if (s.channels == 0) throw DataError("modality '" + s.name + "' has zero channels");
    if (s.categorical()) {
      if (s.classes < 2) throw DataError("categorical modality '" + s.name + "' needs at least 2 classes");
      if (s.channels != s.classes)
        throw DataError("categorical modality '" + s.name + "' must have channels == classes");
    }
    offsets_.push_back(offsets_.back() + s.channels);
    switch (s.role) {
      case Role::input: inputs_.push_back(i); break;
      case Role::intermediate: intermediates_.push_back(i); break;
      case Role::output: outputs_.push_back(i); break;
    }
    if (s.role == Role::output) {
      network_offsets_.push_back(0);
    } else {
      network_offsets_.push_back(network_channels_);
      network_channels_ += s.channels;
    }
  }
  if (inputs_.empty()) throw DataError("modality set has no input modality");
  if (outputs_.empty()) throw DataError("modality set has no output modality");
}

std::optional<std::size_t> ModalitySet::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < specs_.size(); ++i)
    if (specs_[i].name == name) return i;
  return std::nullopt;
}

const ModalitySpec& ModalitySet::get(const std::string& name) const {
  const auto i = index_of(name);
  if (!i) throw DataError("unknown modality '" + name + "'");
  return specs_[*i];
}

std::size_t ModalitySet::network_offset(std::size_t i) const {
  if (specs_.at(i).role == Role::output)
    throw DataError("output modality '" + specs_[i].name + "' is not part of the network input");
  return network_offsets_[i];
}

std::size_t HyperEdgeMask::visible_count() const {
  return static_cast<std::size_t>(std::count(visible.begin(), visible.end(), true));
}

std::string HyperEdgeMask::key() const {
  std::string k;
  for (bool v : visible) k.push_back(v ? '1' : '0');
  return k;
}

HyperEdgeMask HyperEdgeMask::all(std::size_t intermediates, bool visible) {
  return HyperEdgeMask{std::vector<bool>(intermediates, visible)};
}

HyperEdgeMask HyperEdgeMask::from_key(const std::string& key) {
  HyperEdgeMask m;
  for (char c : key) {
    if (c != '0' && c != '1') throw DataError("invalid mask key '" + key + "'");
    m.visible.push_back(c == '1');
  }
  return m;
}

HyperEdgeMask sample_mask(const ModalitySet& set, double p_visible, Rng& rng) {
  if (!(p_visible >= 0.0 && p_visible <= 1.0))
    throw std::invalid_argument("p_visible must lie in [0, 1]");
  HyperEdgeMask m;
  m.visible.reserve(set.intermediates().size());
  for (std::size_t i = 0; i < set.intermediates().size(); ++i) m.visible.push_back(rng.bernoulli(p_visible));
  return m;
}

std::vector<HyperEdgeMask> enumerate_masks(const ModalitySet& set, bool allow_all_masked) {
  const std::size_t k = set.intermediates().size();
  if (k > kMaxEnumeratedIntermediates)
    throw DataError("cannot enumerate masks over " + std::to_string(k) + " intermediates (limit " +
                    std::to_string(kMaxEnumeratedIntermediates) + ")");
  std::vector<HyperEdgeMask> masks;
  const std::uint64_t count = std::uint64_t{1} << k;
  masks.reserve(count);
  for (std::uint64_t bits = allow_all_masked ? 0 : 1; bits < count; ++bits) {
    HyperEdgeMask m;
    m.visible.resize(k);
    for (std::size_t i = 0; i < k; ++i) m.visible[i] = (bits >> i) & 1;
    masks.push_back(std::move(m));
  }
  return masks;
}

const Tensor& ModalityBundle::at(const std::string& name) const {
  const auto it = maps.find(name);
  if (it == maps.end()) throw DataError("bundle " + scene + "/" + std::to_string(frame) + " lacks '" + name + "'");
  return it->second;
}

void validate_bundle(const ModalitySet& set, const ModalityBundle& bundle) {
  std::size_t h = 0, w = 0;
  for (const ModalitySpec& s : set.specs()) {
    const Tensor& t = bundle.at(s.name);
    if (t.rank() != 3 || t.dim(0) != s.channels)
      throw DataError("modality '" + s.name + "' has shape " + shape_str(t.shape()) + ", expected " +
                      std::to_string(s.channels) + " channels");
    if (h == 0) {
      h = t.dim(1);
      w = t.dim(2);
    } else if (t.dim(1) != h || t.dim(2) != w) {
      throw DataError("modality '" + s.name + "' resolution differs within the bundle");
    }
  }
  if (bundle.maps.size() != set.size()) throw DataError("bundle holds modalities outside the set");
}

Tensor apply_mask(const ModalitySet& set, const ModalityBundle& bundle, const HyperEdgeMask& mask) {
  if (mask.visible.size() != set.intermediates().size())
    throw DataError("mask covers " + std::to_string(mask.visible.size()) + " intermediates, set has " +
                    std::to_string(set.intermediates().size()));
  const Tensor& first = bundle.at(set[set.inputs().front()].name);
  if (first.rank() != 3) throw DataError("input modality is not [C,H,W]");
  const std::size_t h = first.dim(1), w = first.dim(2), plane = h * w;

  std::vector<bool> visible(set.size(), false);
  for (std::size_t i : set.inputs()) visible[i] = true;
  for (std::size_t j = 0; j < set.intermediates().size(); ++j) visible[set.intermediates()[j]] = mask.visible[j];

  Tensor out({set.network_channels(), h, w});
  for (std::size_t i = 0; i < set.size(); ++i) {
    const ModalitySpec& s = set[i];
    if (s.role == Role::output) continue;
    const Tensor& t = bundle.at(s.name);
    if (t.shape() != Shape{s.channels, h, w})
      throw DataError("modality '" + s.name + "' has shape " + shape_str(t.shape()));
    if (!visible[i]) continue;
    std::copy(t.data().begin(), t.data().end(), out.data().begin() + set.network_offset(i) * plane);
  }
  return out;
}

}  // namespace phg
