#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "phg/rng.hpp"
#include "phg/tensor.hpp"

namespace phg {

enum class Role { input, intermediate, output };

const char* role_name(Role role);
Role parse_role(const std::string& name);

struct ModalitySpec {
  std::string name;
  Role role = Role::input;
  std::size_t channels = 1;
  // 0 for continuous modalities, otherwise the class count K. Categorical
  // modalities are stored one-hot, so channels == classes.
  std::size_t classes = 0;

  bool categorical() const { return classes != 0; }
  friend bool operator==(const ModalitySpec&, const ModalitySpec&) = default;
};

// Ordered modality declarations. The order fixes the channel layout of the
// network input and is stable across runs.
class ModalitySet {
 public:
  ModalitySet() = default;
  explicit ModalitySet(std::vector<ModalitySpec> specs);

  const std::vector<ModalitySpec>& specs() const { return specs_; }
  std::size_t size() const { return specs_.size(); }
  const ModalitySpec& operator[](std::size_t i) const { return specs_[i]; }

  std::optional<std::size_t> index_of(const std::string& name) const;
  const ModalitySpec& get(const std::string& name) const;

  // Prefix-sum channel offset of modality i over the whole set.
  std::size_t offset(std::size_t i) const { return offsets_[i]; }
  std::size_t total_channels() const { return offsets_.back(); }

  const std::vector<std::size_t>& inputs() const { return inputs_; }
  const std::vector<std::size_t>& intermediates() const { return intermediates_; }
  const std::vector<std::size_t>& outputs() const { return outputs_; }

  // Channels fed to the network: inputs and intermediates in set order.
  std::size_t network_channels() const { return network_channels_; }
  // Offset of an input or intermediate modality inside the network input.
  std::size_t network_offset(std::size_t i) const;

  friend bool operator==(const ModalitySet& a, const ModalitySet& b) { return a.specs_ == b.specs_; }

 private:
  std::vector<ModalitySpec> specs_;
  std::vector<std::size_t> offsets_{0};
  std::vector<std::size_t> inputs_, intermediates_, outputs_;
  std::vector<std::size_t> network_offsets_;
  std::size_t network_channels_ = 0;
};

// Visibility per intermediate modality, in ModalitySet order. Inputs are
// always visible and outputs always masked, so neither is stored.
struct HyperEdgeMask {
  std::vector<bool> visible;

  std::size_t visible_count() const;
  // Bit string such as "0110", intermediate 0 first.
  std::string key() const;
  static HyperEdgeMask all(std::size_t intermediates, bool visible);
  static HyperEdgeMask from_key(const std::string& key);

  friend bool operator==(const HyperEdgeMask&, const HyperEdgeMask&) = default;
};

// Each intermediate visible independently with probability p_visible. Always
// draws one uniform per intermediate, whatever p_visible is.
HyperEdgeMask sample_mask(const ModalitySet& set, double p_visible, Rng& rng);

inline constexpr std::size_t kMaxEnumeratedIntermediates = 20;

// All 2^k masks in bitmask order (bit i = intermediate i visible), without the
// all-masked one unless allowed.
std::vector<HyperEdgeMask> enumerate_masks(const ModalitySet& set, bool allow_all_masked);

struct ModalityBundle {
  std::string scene;
  std::size_t frame = 0;
  std::map<std::string, Tensor> maps;

  const Tensor& at(const std::string& name) const;
};

// Throws DataError on a missing or extra modality or a shape mismatch.
void validate_bundle(const ModalitySet& set, const ModalityBundle& bundle);

// Network input: inputs and intermediates stacked in set order, masked
// intermediates zero-filled. Outputs are never included.
Tensor apply_mask(const ModalitySet& set, const ModalityBundle& bundle, const HyperEdgeMask& mask);

}  // namespace phg
