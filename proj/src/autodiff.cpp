#include "phg/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <memory>

#include "phg/error.hpp"

namespace phg {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DataError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                    shape_str(b.shape()));
  }
}

void require_rank3(const Tensor& t, const char* op) {
  if (t.rank() != 3) throw DataError(std::string(op) + ": expected [C,H,W], got " + shape_str(t.shape()));
}

struct ConvGeometry {
  std::size_t ci, h, w, co, kh, kw, pad, ho, wo;
};

ConvGeometry conv_geometry(const Tensor& input, const Tensor& kernels, std::size_t padding) {
  require_rank3(input, "conv2d");
  if (kernels.rank() != 4) throw DataError("conv2d: kernels must be [Co,Ci,kh,kw], got " + shape_str(kernels.shape()));
  ConvGeometry g{input.dim(0), input.dim(1), input.dim(2), kernels.dim(0), kernels.dim(2),
                 kernels.dim(3), padding, 0, 0};
  if (kernels.dim(1) != g.ci) {
    throw DataError("conv2d: input has " + std::to_string(g.ci) + " channels but kernels expect " +
                    std::to_string(kernels.dim(1)));
  }
  if (g.h + 2 * padding < g.kh || g.w + 2 * padding < g.kw) throw DataError("conv2d: kernel larger than input");
  g.ho = g.h + 2 * padding - g.kh + 1;
  g.wo = g.w + 2 * padding - g.kw + 1;
  return g;
}

// Unfolds the input into a [Ci*kh*kw, Ho*Wo] matrix.
std::vector<float> im2col(const Tensor& input, const ConvGeometry& g) {
  const std::size_t cols = g.ho * g.wo;
  std::vector<float> out(g.ci * g.kh * g.kw * cols, 0.0f);
  const auto in = input.data();
  for (std::size_t c = 0; c < g.ci; ++c) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        float* row = out.data() + ((c * g.kh + ky) * g.kw + kx) * cols;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + ky) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          const float* src = in.data() + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          float* dst = row + oy * g.wo;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox + kx) - static_cast<std::ptrdiff_t>(g.pad);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.w)) dst[ox] = src[ix];
          }
        }
      }
    }
  }
  return out;
}

void col2im_add(const float* cols_data, const ConvGeometry& g, Tensor& grad_input) {
  const std::size_t cols = g.ho * g.wo;
  auto out = grad_input.data();
  for (std::size_t c = 0; c < g.ci; ++c) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const float* row = cols_data + ((c * g.kh + ky) * g.kw + kx) * cols;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + ky) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          float* dst = out.data() + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          const float* src = row + oy * g.wo;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox + kx) - static_cast<std::ptrdiff_t>(g.pad);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.w)) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

bool is_pointwise(const ConvGeometry& g) { return g.kh == 1 && g.kw == 1 && g.pad == 0; }

Tensor conv_forward(const Tensor& input, const Tensor& kernels, const Tensor* bias, const ConvGeometry& g,
                    const std::vector<float>* cols) {
  Tensor out({g.co, g.ho, g.wo});
  const std::size_t n = g.ho * g.wo, k = g.ci * g.kh * g.kw;
  const float* cols_ptr = cols ? cols->data() : input.data().data();
  ConstMapMat a(kernels.data().data(), static_cast<Eigen::Index>(g.co), static_cast<Eigen::Index>(k));
  ConstMapMat b(cols_ptr, static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
  MapMat c(out.data().data(), static_cast<Eigen::Index>(g.co), static_cast<Eigen::Index>(n));
  c.noalias() = a * b;
  if (bias) {
    if (bias->size() != g.co) throw DataError("conv2d: bias has " + std::to_string(bias->size()) + " entries, expected " + std::to_string(g.co));
    for (std::size_t o = 0; o < g.co; ++o) c.row(static_cast<Eigen::Index>(o)).array() += (*bias)[o];
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Tape

Var Tape::constant(Tensor value) {
  Node n;
  n.owned = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

Var Tape::parameter(std::size_t index, const Tensor& value) {
  Node n;
  n.ref = &value;
  n.param = index;
  n.needs_grad = true;
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

Var Tape::record(Tensor value, std::span<const Var> inputs, Backward backward) {
  Node n;
  n.owned = std::move(value);
  for (Var v : inputs) {
    if (v.valid() && nodes_.at(v.id).needs_grad) n.needs_grad = true;
  }
  if (n.needs_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

const Tensor& Tape::value(Var v) const {
  const Node& n = nodes_.at(v.id);
  return n.ref ? *n.ref : n.owned;
}

void Tape::accumulate(Var v, const Tensor& g) {
  if (!v.valid() || !nodes_.at(v.id).needs_grad) return;
  Tensor& slot = grads_.at(v.id);
  if (slot.empty()) {
    slot = g;
    return;
  }
  auto d = slot.data();
  const auto s = g.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

std::vector<Tensor> Tape::gradients(Var loss, std::span<const Tensor> params) {
  if (nodes_.empty()) throw DataError("backward: tape is empty");
  if (!loss.valid() || loss.id >= nodes_.size()) throw DataError("backward: loss not on this tape");
  if (value(loss).size() != 1) throw DataError("backward: loss must be scalar, got " + shape_str(value(loss).shape()));

  grads_.assign(nodes_.size(), Tensor());
  visited_.clear();
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (const Tensor& p : params) out.emplace_back(p.shape());

  if (nodes_[loss.id].needs_grad) {
    grads_[loss.id] = Tensor(value(loss).shape(), 1.0f);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (grads_[i].empty()) continue;
      visited_.push_back(i);
      if (n.backward) {
        n.backward(*this, grads_[i]);
      } else if (n.param && *n.param < params.size()) {
        Tensor& dst = out[*n.param];
        if (dst.shape() != grads_[i].shape()) throw DataError("backward: parameter shape changed while recording");
        auto d = dst.data();
        const auto s = grads_[i].data();
        for (std::size_t j = 0; j < d.size(); ++j) d[j] += s[j];
      }
    }
  }
  grads_.clear();
  return out;
}

// ---------------------------------------------------------------------------
// Forward kernels

Tensor conv2d(const Tensor& input, const Tensor& kernels, const Tensor* bias, std::size_t padding) {
  const ConvGeometry g = conv_geometry(input, kernels, padding);
  if (is_pointwise(g)) return conv_forward(input, kernels, bias, g, nullptr);
  const std::vector<float> cols = im2col(input, g);
  return conv_forward(input, kernels, bias, g, &cols);
}

double loss_cross_entropy(const Tensor& logits, const LabelMap& target) {
  require_rank3(logits, "cross_entropy");
  const std::size_t k = logits.dim(0), plane = logits.dim(1) * logits.dim(2);
  if (target.height != logits.dim(1) || target.width != logits.dim(2)) {
    throw DataError("cross_entropy: target size does not match logits " + shape_str(logits.shape()));
  }
  const auto in = logits.data();
  double total = 0.0;
  for (std::size_t p = 0; p < plane; ++p) {
    const std::size_t t = target.labels[p];
    if (t >= k) throw DataError("cross_entropy: class index " + std::to_string(t) + " out of range");
    float m = in[p];
    for (std::size_t c = 1; c < k; ++c) m = std::max(m, in[c * plane + p]);
    double z = 0.0;
    for (std::size_t c = 0; c < k; ++c) z += std::exp(static_cast<double>(in[c * plane + p] - m));
    total += static_cast<double>(m) + std::log(z) - static_cast<double>(in[t * plane + p]);
  }
  return total / static_cast<double>(plane);
}

double loss_l2(const Tensor& pred, const Tensor& target) {
  require_same_shape(pred, target, "l2_loss");
  double total = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = static_cast<double>(pred[i]) - static_cast<double>(target[i]);
    total += d * d;
  }
  return pred.size() ? total / static_cast<double>(pred.size()) : 0.0;
}

namespace {

// Per-pixel log-softmax of a [K,H,W] tensor, in double precision.
std::vector<double> log_softmax(const Tensor& logits) {
  const std::size_t k = logits.dim(0), plane = logits.dim(1) * logits.dim(2);
  std::vector<double> out(logits.size());
  const auto in = logits.data();
  for (std::size_t p = 0; p < plane; ++p) {
    double m = in[p];
    for (std::size_t c = 1; c < k; ++c) m = std::max(m, static_cast<double>(in[c * plane + p]));
    double z = 0.0;
    for (std::size_t c = 0; c < k; ++c) z += std::exp(in[c * plane + p] - m);
    const double lse = m + std::log(z);
    for (std::size_t c = 0; c < k; ++c) out[c * plane + p] = in[c * plane + p] - lse;
  }
  return out;
}

}  // namespace

double loss_kl_logits(const Tensor& student_logits, const Tensor& teacher_logits) {
  require_same_shape(student_logits, teacher_logits, "kl_logits");
  require_rank3(student_logits, "kl_logits");
  const std::size_t plane = student_logits.dim(1) * student_logits.dim(2);
  const std::vector<double> log_q = log_softmax(student_logits);
  const std::vector<double> log_p = log_softmax(teacher_logits);
  double total = 0.0;
  for (std::size_t i = 0; i < log_p.size(); ++i) {
    const double p = std::exp(log_p[i]);
    if (p > 0.0) total += p * (log_p[i] - log_q[i]);
  }
  return total / static_cast<double>(plane);
}

// ---------------------------------------------------------------------------
// Tape ops

namespace ad {

Var conv2d(Tape& tape, Var input, Var kernels, Var bias, std::size_t padding) {
  const Tensor& x = tape.value(input);
  const Tensor& k = tape.value(kernels);
  const ConvGeometry g = conv_geometry(x, k, padding);
  const Tensor* b = bias.valid() ? &tape.value(bias) : nullptr;

  std::shared_ptr<std::vector<float>> cols;
  if (!is_pointwise(g)) cols = std::make_shared<std::vector<float>>(im2col(x, g));
  Tensor out = conv_forward(x, k, b, g, cols.get());
  ensure_finite(out, "conv2d");

  const Var inputs[] = {input, kernels, bias};
  return tape.record(std::move(out), inputs, [=](Tape& t, const Tensor& gout) {
    const std::size_t n = g.ho * g.wo, kk = g.ci * g.kh * g.kw;
    const Tensor& xin = t.value(input);
    const float* cols_ptr = cols ? cols->data() : xin.data().data();
    ConstMapMat go(gout.data().data(), static_cast<Eigen::Index>(g.co), static_cast<Eigen::Index>(n));
    ConstMapMat colm(cols_ptr, static_cast<Eigen::Index>(kk), static_cast<Eigen::Index>(n));
    if (t.needs_grad(kernels)) {
      Tensor gk(t.value(kernels).shape());
      MapMat gkm(gk.data().data(), static_cast<Eigen::Index>(g.co), static_cast<Eigen::Index>(kk));
      gkm.noalias() = go * colm.transpose();
      t.accumulate(kernels, gk);
    }
    if (bias.valid() && t.needs_grad(bias)) {
      Tensor gb({g.co});
      for (std::size_t o = 0; o < g.co; ++o) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += gout[o * n + i];
        gb[o] = static_cast<float>(s);
      }
      t.accumulate(bias, gb);
    }
    if (t.needs_grad(input)) {
      ConstMapMat km(t.value(kernels).data().data(), static_cast<Eigen::Index>(g.co), static_cast<Eigen::Index>(kk));
      Tensor gx(xin.shape());
      if (is_pointwise(g)) {
        MapMat gxm(gx.data().data(), static_cast<Eigen::Index>(kk), static_cast<Eigen::Index>(n));
        gxm.noalias() = km.transpose() * go;
      } else {
        RowMat gcols = km.transpose() * go;
        col2im_add(gcols.data(), g, gx);
      }
      t.accumulate(input, gx);
    }
  });
}

Var relu(Tape& tape, Var x) {
  const Tensor& in = tape.value(x);
  Tensor out(in.shape());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] > 0.0f ? in[i] : 0.0f;
  const Var inputs[] = {x};
  return tape.record(std::move(out), inputs, [x](Tape& t, const Tensor& gout) {
    const Tensor& in = t.value(x);
    Tensor g(in.shape());
    for (std::size_t i = 0; i < in.size(); ++i) g[i] = in[i] > 0.0f ? gout[i] : 0.0f;
    t.accumulate(x, g);
  });
}

Var max_pool2(Tape& tape, Var x) {
  const Tensor& in = tape.value(x);
  require_rank3(in, "max_pool2");
  const std::size_t c = in.dim(0), h = in.dim(1), w = in.dim(2);
  if (h % 2 || w % 2) throw DataError("max_pool2: spatial size must be even, got " + shape_str(in.shape()));
  const std::size_t ho = h / 2, wo = w / 2;
  Tensor out({c, ho, wo});
  auto argmax = std::make_shared<std::vector<std::uint32_t>>(out.size());
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < ho; ++y) {
      for (std::size_t xx = 0; xx < wo; ++xx) {
        std::size_t best = (ch * h + 2 * y) * w + 2 * xx;
        const std::size_t cand[] = {best + 1, best + w, best + w + 1};
        for (std::size_t idx : cand) {
          if (in[idx] > in[best]) best = idx;
        }
        const std::size_t o = (ch * ho + y) * wo + xx;
        out[o] = in[best];
        (*argmax)[o] = static_cast<std::uint32_t>(best);
      }
    }
  }
  const Var inputs[] = {x};
  return tape.record(std::move(out), inputs, [x, argmax](Tape& t, const Tensor& gout) {
    Tensor g(t.value(x).shape());
    for (std::size_t o = 0; o < gout.size(); ++o) g[(*argmax)[o]] += gout[o];
    t.accumulate(x, g);
  });
}

Var upsample2(Tape& tape, Var x) {
  const Tensor& in = tape.value(x);
  require_rank3(in, "upsample2");
  const std::size_t c = in.dim(0), h = in.dim(1), w = in.dim(2);
  Tensor out({c, 2 * h, 2 * w});
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < 2 * h; ++y) {
      for (std::size_t xx = 0; xx < 2 * w; ++xx) out.at(ch, y, xx) = in.at(ch, y / 2, xx / 2);
    }
  }
  const Var inputs[] = {x};
  return tape.record(std::move(out), inputs, [x, c, h, w](Tape& t, const Tensor& gout) {
    Tensor g({c, h, w});
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t y = 0; y < 2 * h; ++y) {
        for (std::size_t xx = 0; xx < 2 * w; ++xx) g.at(ch, y / 2, xx / 2) += gout.at(ch, y, xx);
      }
    }
    t.accumulate(x, g);
  });
}

Var concat_channels(Tape& tape, std::span<const Var> parts) {
  if (parts.empty()) throw DataError("concat_channels: nothing to concatenate");
  const Tensor& first = tape.value(parts[0]);
  require_rank3(first, "concat_channels");
  const std::size_t h = first.dim(1), w = first.dim(2);
  std::size_t total = 0;
  std::vector<std::size_t> offsets;
  for (Var p : parts) {
    const Tensor& t = tape.value(p);
    require_rank3(t, "concat_channels");
    if (t.dim(1) != h || t.dim(2) != w) throw DataError("concat_channels: spatial size mismatch");
    offsets.push_back(total);
    total += t.dim(0);
  }
  Tensor out({total, h, w});
  const std::size_t plane = h * w;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const auto src = tape.value(parts[i]).data();
    std::copy(src.begin(), src.end(), out.data().begin() + static_cast<std::ptrdiff_t>(offsets[i] * plane));
  }
  std::vector<Var> ins(parts.begin(), parts.end());
  return tape.record(std::move(out), parts, [ins, offsets](Tape& t, const Tensor& gout) {
    for (std::size_t i = 0; i < ins.size(); ++i) {
      if (!t.needs_grad(ins[i])) continue;
      const std::size_t c = t.value(ins[i]).dim(0);
      t.accumulate(ins[i], gout.channels(offsets[i], offsets[i] + c));
    }
  });
}

Var slice_channels(Tape& tape, Var x, std::size_t begin, std::size_t end) {
  Tensor out = tape.value(x).channels(begin, end);
  const Var inputs[] = {x};
  return tape.record(std::move(out), inputs, [x, begin, end](Tape& t, const Tensor& gout) {
    const Tensor& in = t.value(x);
    Tensor g(in.shape());
    const std::size_t plane = in.dim(1) * in.dim(2);
    std::copy(gout.data().begin(), gout.data().end(), g.data().begin() + static_cast<std::ptrdiff_t>(begin * plane));
    (void)end;
    t.accumulate(x, g);
  });
}

Var softmax(Tape& tape, Var logits) {
  auto out = std::make_shared<const Tensor>(softmax_channels(tape.value(logits)));
  const Var inputs[] = {logits};
  return tape.record(*out, inputs, [logits, out](Tape& t, const Tensor& gout) {
    const Tensor& s = *out;
    const std::size_t k = s.dim(0), plane = s.dim(1) * s.dim(2);
    Tensor g(s.shape());
    for (std::size_t p = 0; p < plane; ++p) {
      double dot = 0.0;
      for (std::size_t c = 0; c < k; ++c) dot += static_cast<double>(gout[c * plane + p]) * s[c * plane + p];
      for (std::size_t c = 0; c < k; ++c) {
        g[c * plane + p] = static_cast<float>(s[c * plane + p] * (gout[c * plane + p] - dot));
      }
    }
    t.accumulate(logits, g);
  });
}

Var add(Tape& tape, Var a, Var b) {
  const Tensor& ta = tape.value(a);
  const Tensor& tb = tape.value(b);
  require_same_shape(ta, tb, "add");
  Tensor out(ta.shape());
  for (std::size_t i = 0; i < ta.size(); ++i) out[i] = ta[i] + tb[i];
  const Var inputs[] = {a, b};
  return tape.record(std::move(out), inputs, [a, b](Tape& t, const Tensor& gout) {
    t.accumulate(a, gout);
    t.accumulate(b, gout);
  });
}

Var mul(Tape& tape, Var a, Var b) {
  const Tensor& ta = tape.value(a);
  const Tensor& tb = tape.value(b);
  require_same_shape(ta, tb, "mul");
  Tensor out(ta.shape());
  for (std::size_t i = 0; i < ta.size(); ++i) out[i] = ta[i] * tb[i];
  const Var inputs[] = {a, b};
  return tape.record(std::move(out), inputs, [a, b](Tape& t, const Tensor& gout) {
    const Tensor& va = t.value(a);
    const Tensor& vb = t.value(b);
    if (t.needs_grad(a)) {
      Tensor g(va.shape());
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = gout[i] * vb[i];
      t.accumulate(a, g);
    }
    if (t.needs_grad(b)) {
      Tensor g(vb.shape());
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = gout[i] * va[i];
      t.accumulate(b, g);
    }
  });
}

Var scale(Tape& tape, Var x, float factor) {
  const Tensor& in = tape.value(x);
  Tensor out(in.shape());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] * factor;
  const Var inputs[] = {x};
  return tape.record(std::move(out), inputs, [x, factor](Tape& t, const Tensor& gout) {
    Tensor g(gout.shape());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = gout[i] * factor;
    t.accumulate(x, g);
  });
}

Var sum(Tape& tape, Var x) {
  const Tensor& in = tape.value(x);
  double s = 0.0;
  for (float v : in.data()) s += v;
  Tensor out({1}, static_cast<float>(s));
  ensure_finite(out, "sum");
  const Var inputs[] = {x};
  return tape.record(std::move(out), inputs, [x](Tape& t, const Tensor& gout) {
    t.accumulate(x, Tensor(t.value(x).shape(), gout[0]));
  });
}

Var cross_entropy(Tape& tape, Var logits, const LabelMap& target) {
  const Tensor& l = tape.value(logits);
  const double loss = loss_cross_entropy(l, target);
  if (!std::isfinite(loss)) throw NumericError("cross_entropy produced a non-finite loss");
  const Var inputs[] = {logits};
  return tape.record(Tensor({1}, static_cast<float>(loss)), inputs, [logits, target](Tape& t, const Tensor& gout) {
    Tensor g = softmax_channels(t.value(logits));
    const std::size_t plane = target.size();
    const float s = gout[0] / static_cast<float>(plane);
    for (std::size_t p = 0; p < plane; ++p) g[target.labels[p] * plane + p] -= 1.0f;
    for (float& v : g.data()) v *= s;
    t.accumulate(logits, g);
  });
}

Var l2_loss(Tape& tape, Var pred, const Tensor& target) {
  const double loss = loss_l2(tape.value(pred), target);
  if (!std::isfinite(loss)) throw NumericError("l2_loss produced a non-finite loss");
  const Var inputs[] = {pred};
  return tape.record(Tensor({1}, static_cast<float>(loss)), inputs, [pred, target](Tape& t, const Tensor& gout) {
    const Tensor& p = t.value(pred);
    Tensor g(p.shape());
    const float s = 2.0f * gout[0] / static_cast<float>(p.size());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = s * (p[i] - target[i]);
    t.accumulate(pred, g);
  });
}

Var kl_logits(Tape& tape, Var student_logits, const Tensor& teacher_logits) {
  const double loss = loss_kl_logits(tape.value(student_logits), teacher_logits);
  if (!std::isfinite(loss)) throw NumericError("kl_logits produced a non-finite loss");
  Tensor teacher_probs = softmax_channels(teacher_logits);
  const Var inputs[] = {student_logits};
  return tape.record(Tensor({1}, static_cast<float>(loss)), inputs,
                     [student_logits, teacher_probs = std::move(teacher_probs)](Tape& t, const Tensor& gout) {
                       Tensor g = softmax_channels(t.value(student_logits));
                       const std::size_t plane = g.dim(1) * g.dim(2);
                       const float s = gout[0] / static_cast<float>(plane);
                       for (std::size_t i = 0; i < g.size(); ++i) g[i] = s * (g[i] - teacher_probs[i]);
                       t.accumulate(student_logits, g);
                     });
}

}  // namespace ad
}  // namespace phg
