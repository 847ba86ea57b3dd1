#include "phg/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "phg/error.hpp"

namespace phg {

bool zero_preserving(Activation a) { return a != Activation::sigmoid; }

Tensor apply_activation(Tensor x, Activation a) {
  switch (a) {
    case Activation::identity: break;
    case Activation::relu:
      for (float& v : x.data()) v = std::max(v, 0.0f);
      break;
    case Activation::sigmoid:
      for (float& v : x.data()) v = static_cast<float>(1.0 / (1.0 + std::exp(-static_cast<double>(v))));
      break;
  }
  return x;
}

// Direct convolution with double accumulation. Zero kernel entries then add
// exactly nothing, so a fused network reproduces each edge independent of how
// many cross-edge zeros its sums contain.
Tensor conv_layer_forward(const ConvLayer& layer, const Tensor& input) {
  const Tensor& k = layer.kernels;
  if (input.rank() != 3 || k.rank() != 4 || input.dim(0) != k.dim(1))
    throw DataError("conv layer expects " + std::to_string(k.dim(1)) + " input channels, got " +
                    shape_str(input.shape()));
  const std::size_t ci = k.dim(1), co = k.dim(0), kh = k.dim(2), kw = k.dim(3), pad = layer.padding;
  const std::size_t h = input.dim(1), w = input.dim(2);
  if (h + 2 * pad < kh || w + 2 * pad < kw) throw DataError("conv input smaller than kernel");
  const std::size_t ho = h + 2 * pad - kh + 1, wo = w + 2 * pad - kw + 1;
  Tensor out({co, ho, wo});
  std::vector<double> acc(ho * wo);
  for (std::size_t o = 0; o < co; ++o) {
    std::fill(acc.begin(), acc.end(), layer.bias.empty() ? 0.0 : static_cast<double>(layer.bias[o]));
    for (std::size_t c = 0; c < ci; ++c)
      for (std::size_t dy = 0; dy < kh; ++dy)
        for (std::size_t dx = 0; dx < kw; ++dx) {
          const double kv = k[((o * ci + c) * kh + dy) * kw + dx];
          if (kv == 0.0) continue;
          for (std::size_t y = 0; y < ho; ++y) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y + dy) - static_cast<std::ptrdiff_t>(pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
            for (std::size_t x = 0; x < wo; ++x) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(x + dx) - static_cast<std::ptrdiff_t>(pad);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
              acc[y * wo + x] += kv * input.at(c, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix));
            }
          }
        }
    for (std::size_t i = 0; i < acc.size(); ++i) out[o * ho * wo + i] = static_cast<float>(acc[i]);
  }
  return apply_activation(std::move(out), layer.activation);
}

std::size_t EdgeNet::input_channels() const {
  std::size_t c = 0;
  for (const auto& s : sources) c += s.channels;
  return c;
}

void EdgeNet::validate() const {
  if (sources.empty()) throw DataError("edge to '" + target + "' has no sources");
  if (layers.empty()) throw DataError("edge to '" + target + "' has no layers");
  std::set<std::string> names;
  for (const auto& s : sources) {
    if (s.channels == 0) throw DataError("source '" + s.name + "' has zero channels");
    if (!names.insert(s.name).second) throw DataError("source '" + s.name + "' listed twice");
    if (s.name == target) throw DataError("edge '" + target + "' reads its own target");
  }
  std::size_t c = input_channels();
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const ConvLayer& layer = layers[l];
    if (layer.kernels.rank() != 4) throw DataError("layer kernels must be [Co,Ci,kh,kw]");
    if (layer.in_channels() != c)
      throw DataError("edge '" + target + "' layer " + std::to_string(l) + " expects " +
                      std::to_string(layer.in_channels()) + " channels, chain provides " + std::to_string(c));
    if (!layer.bias.empty() && layer.bias.shape() != Shape{layer.out_channels()})
      throw DataError("edge '" + target + "' layer " + std::to_string(l) + " bias size mismatch");
    c = layer.out_channels();
  }
}

Tensor edge_forward(const EdgeNet& edge, const Tensor& stacked_sources) {
  edge.validate();
  Tensor x = stacked_sources;
  for (const ConvLayer& layer : edge.layers) x = conv_layer_forward(layer, x);
  return x;
}

std::size_t FusedNet::input_channels() const {
  std::size_t c = 0;
  for (const auto& s : input_space) c += s.channels;
  return c;
}

FusedNet fuse_conv_edges(const std::vector<EdgeNet>& edges) {
  if (edges.empty()) throw DataError("no edges to fuse");
  for (const EdgeNet& e : edges) e.validate();

  std::set<std::string> targets;
  for (const EdgeNet& e : edges) targets.insert(e.target);
  for (const EdgeNet& e : edges)
    for (const auto& s : e.sources)
      if (targets.count(s.name)) throw DataError("two-hop edge through '" + s.name + "' is not supported");

  const std::size_t depth = edges.front().layers.size();
  for (const EdgeNet& e : edges) {
    if (e.layers.size() != depth) throw DataError("edges differ in layer count");
    for (std::size_t l = 0; l < depth; ++l) {
      const ConvLayer& a = edges.front().layers[l];
      const ConvLayer& b = e.layers[l];
      if (a.kernels.dim(2) != b.kernels.dim(2) || a.kernels.dim(3) != b.kernels.dim(3) || a.padding != b.padding)
        throw DataError("edges differ in kernel geometry at layer " + std::to_string(l));
      if (a.activation != b.activation) throw DataError("edges differ in activation at layer " + std::to_string(l));
      if (!zero_preserving(b.activation))
        throw DataError("activation at layer " + std::to_string(l) + " is not zero-preserving");
    }
  }

  FusedNet fused;
  std::map<std::string, std::size_t> row_of;
  for (const EdgeNet& e : edges)
    for (const auto& s : e.sources) {
      const auto it = std::find_if(fused.input_space.begin(), fused.input_space.end(),
                                   [&](const SourceSpec& x) { return x.name == s.name; });
      if (it == fused.input_space.end()) {
        row_of[s.name] = fused.input_channels();
        fused.input_space.push_back(s);
      } else if (it->channels != s.channels) {
        throw DataError("source '" + s.name + "' declared with conflicting channel counts");
      }
    }

  for (const EdgeNet& e : edges) {
    EdgeSelector sel;
    for (const auto& s : e.sources)
      for (std::size_t c = 0; c < s.channels; ++c) sel.input_rows.push_back(row_of[s.name] + c);
    fused.selectors.push_back(std::move(sel));
  }

  for (std::size_t l = 0; l < depth; ++l) {
    const ConvLayer& ref = edges.front().layers[l];
    const std::size_t kh = ref.kernels.dim(2), kw = ref.kernels.dim(3);
    std::size_t co_total = 0;
    for (const EdgeNet& e : edges) co_total += e.layers[l].out_channels();
    const std::size_t ci_total =
        l == 0 ? fused.input_channels() : fused.layers.back().out_channels();
    bool any_bias = false;
    for (const EdgeNet& e : edges) any_bias |= !e.layers[l].bias.empty();

    ConvLayer layer{Tensor({co_total, ci_total, kh, kw}), any_bias ? Tensor({co_total}) : Tensor(), ref.padding,
                    ref.activation};
    std::size_t out_off = 0;
    for (std::size_t i = 0; i < edges.size(); ++i) {
      const ConvLayer& src = edges[i].layers[l];
      EdgeSelector& sel = fused.selectors[i];
      std::vector<std::size_t> in_rows;
      if (l == 0) {
        in_rows = sel.input_rows;
      } else {
        for (std::size_t r = sel.out_rows[l - 1].first; r < sel.out_rows[l - 1].second; ++r) in_rows.push_back(r);
      }
      for (std::size_t o = 0; o < src.out_channels(); ++o) {
        for (std::size_t c = 0; c < src.in_channels(); ++c)
          for (std::size_t k = 0; k < kh * kw; ++k)
            layer.kernels[((out_off + o) * ci_total + in_rows[c]) * kh * kw + k] =
                src.kernels[(o * src.in_channels() + c) * kh * kw + k];
        if (!src.bias.empty()) layer.bias[out_off + o] = src.bias[o];
      }
      sel.out_rows.emplace_back(out_off, out_off + src.out_channels());
      out_off += src.out_channels();
    }
    fused.layers.push_back(std::move(layer));
  }
  return fused;
}

Tensor stack_input_space(const FusedNet& fused, const std::map<std::string, Tensor>& modalities) {
  std::vector<float> values;
  Shape spatial;
  for (const auto& s : fused.input_space) {
    const auto it = modalities.find(s.name);
    if (it == modalities.end()) throw DataError("missing source modality '" + s.name + "'");
    const Tensor& t = it->second;
    if (t.rank() != 3 || t.dim(0) != s.channels) throw DataError("source '" + s.name + "' has wrong shape");
    if (spatial.empty()) {
      spatial = {t.dim(1), t.dim(2)};
    } else if (spatial != Shape{t.dim(1), t.dim(2)}) {
      throw DataError("source '" + s.name + "' differs in spatial resolution");
    }
    values.insert(values.end(), t.data().begin(), t.data().end());
  }
  return Tensor({fused.input_channels(), spatial[0], spatial[1]}, std::move(values));
}

Tensor fused_forward(const FusedNet& fused, const Tensor& stacked_input) {
  if (stacked_input.rank() != 3 || stacked_input.dim(0) != fused.input_channels())
    throw DataError("stacked input has shape " + shape_str(stacked_input.shape()) + ", expected " +
                    std::to_string(fused.input_channels()) + " channels");
  Tensor x = stacked_input;
  for (const ConvLayer& layer : fused.layers) x = conv_layer_forward(layer, x);
  return x;
}

Tensor recover_edge(const FusedNet& fused, std::size_t edge_index, const Tensor& stacked_input) {
  if (edge_index >= fused.edge_count())
    throw DataError("edge index " + std::to_string(edge_index) + " out of range");
  if (stacked_input.rank() != 3 || stacked_input.dim(0) != fused.input_channels())
    throw DataError("stacked input does not match the fused input space");
  const EdgeSelector& sel = fused.selectors[edge_index];
  const std::size_t plane = stacked_input.dim(1) * stacked_input.dim(2);
  Tensor masked(stacked_input.shape());
  for (std::size_t r : sel.input_rows)
    std::copy_n(stacked_input.data().begin() + r * plane, plane, masked.data().begin() + r * plane);
  const Tensor out = fused_forward(fused, masked);
  return out.channels(sel.out_rows.back().first, sel.out_rows.back().second);
}

Tensor edge_block_mask(const FusedNet& fused, std::size_t layer) {
  const Tensor& k = fused.layers.at(layer).kernels;
  const std::size_t ci = k.dim(1), kk = k.dim(2) * k.dim(3);
  Tensor mask(k.shape());
  for (const EdgeSelector& sel : fused.selectors) {
    std::vector<std::size_t> in_rows;
    if (layer == 0) {
      in_rows = sel.input_rows;
    } else {
      for (std::size_t r = sel.out_rows[layer - 1].first; r < sel.out_rows[layer - 1].second; ++r)
        in_rows.push_back(r);
    }
    for (std::size_t o = sel.out_rows[layer].first; o < sel.out_rows[layer].second; ++o)
      for (std::size_t c : in_rows)
        for (std::size_t j = 0; j < kk; ++j) mask[(o * ci + c) * kk + j] = 1.0f;
  }
  return mask;
}

FusionCost fusion_cost(const std::vector<EdgeNet>& edges) {
  FusionCost cost;
  if (edges.empty()) return cost;
  for (const EdgeNet& e : edges)
    for (const ConvLayer& l : e.layers) {
      cost.params_separate += l.kernels.size();
      cost.bias_separate += l.bias.size();
    }
  const FusedNet fused = fuse_conv_edges(edges);
  for (const ConvLayer& l : fused.layers) {
    cost.params_fused += l.kernels.size();
    cost.bias_fused += l.bias.size();
  }
  cost.zero_fraction =
      cost.params_fused == 0 ? 0.0 : 1.0 - static_cast<double>(cost.params_separate) / cost.params_fused;
  return cost;
}

}  // namespace phg
