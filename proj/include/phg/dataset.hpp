#pragma once

#include <optional>
#include <string>
#include <vector>

#include "phg/io.hpp"
#include "phg/modality.hpp"

namespace phg {

// rgb input, the thirteen derived intermediates and the three labelled tasks.
// Without intermediates the set is rgb -> tasks.
ModalitySet default_modality_set(bool with_intermediates = true);

// [modalities] inputs / intermediates / outputs lists of "name:C" (continuous,
// C channels) or "name:Kc" (categorical, K classes). Falls back to the default
// set when the section is absent.
ModalitySet modality_set_from_config(const Config& config);

// Inverse of the list grammar above, one role per line.
std::string describe_modality_set(const ModalitySet& set);
ModalitySet parse_modality_set(const std::string& text);

// Categorical modalities are stored as [H,W] class maps and returned one-hot;
// rank-2 continuous maps gain a leading channel axis. Output modalities are
// skipped when with_outputs is false.
ModalityBundle load_bundle(const fs::path& scene, std::size_t frame, const ModalitySet& set, bool with_outputs = true);

// Every frame of every scene under the roots, ordered by scene then frame.
std::vector<ModalityBundle> load_bundles(const std::vector<fs::path>& roots, const ModalitySet& set,
                                         bool with_outputs = true, std::size_t jobs = 1);

}  // namespace phg
