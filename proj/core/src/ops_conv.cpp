#include <Eigen/Core>

#include <cmath>
#include <limits>
#include <memory>

#include "drm/graph.hpp"

namespace drm {

namespace {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const EMat>;
using MMap = Eigen::Map<EMat>;

// Images processed in chunks of this many per im2col buffer to bound the
// transient memory of large detection-sequence forward passes.
constexpr std::int64_t kConvChunk = 128;

struct ConvDims {
  std::int64_t B, C, H, W, F, kh, kw, OH, OW;
  int stride, pad;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, int stride, int pad) {
  ConvDims d;
  d.B = x.dim(0);
  d.C = x.dim(1);
  d.H = x.dim(2);
  d.W = x.dim(3);
  d.F = w.dim(0);
  d.kh = w.dim(2);
  d.kw = w.dim(3);
  d.stride = stride;
  d.pad = pad;
  d.OH = (d.H + 2 * pad - d.kh) / stride + 1;
  d.OW = (d.W + 2 * pad - d.kw) / stride + 1;
  return d;
}

// cols: [chunk*OH*OW, C*kh*kw] for images [b0, b0+chunk).
void im2col(const Tensor& x, const ConvDims& d, std::int64_t b0, std::int64_t chunk, double* cols) {
  const std::int64_t patch = d.C * d.kh * d.kw;
  for (std::int64_t b = 0; b < chunk; ++b) {
    const double* img = x.data() + (b0 + b) * d.C * d.H * d.W;
    for (std::int64_t oh = 0; oh < d.OH; ++oh) {
      for (std::int64_t ow = 0; ow < d.OW; ++ow) {
        double* row = cols + ((b * d.OH + oh) * d.OW + ow) * patch;
        for (std::int64_t c = 0; c < d.C; ++c) {
          for (std::int64_t ki = 0; ki < d.kh; ++ki) {
            const std::int64_t ih = oh * d.stride - d.pad + ki;
            for (std::int64_t kj = 0; kj < d.kw; ++kj) {
              const std::int64_t iw = ow * d.stride - d.pad + kj;
              const std::int64_t col = (c * d.kh + ki) * d.kw + kj;
              row[col] = (ih >= 0 && ih < d.H && iw >= 0 && iw < d.W)
                             ? img[(c * d.H + ih) * d.W + iw]
                             : 0.0;
            }
          }
        }
      }
    }
  }
}

void col2im_add(const double* cols, const ConvDims& d, std::int64_t b0, std::int64_t chunk,
                Tensor& gx) {
  const std::int64_t patch = d.C * d.kh * d.kw;
  for (std::int64_t b = 0; b < chunk; ++b) {
    double* img = gx.data() + (b0 + b) * d.C * d.H * d.W;
    for (std::int64_t oh = 0; oh < d.OH; ++oh) {
      for (std::int64_t ow = 0; ow < d.OW; ++ow) {
        const double* row = cols + ((b * d.OH + oh) * d.OW + ow) * patch;
        for (std::int64_t c = 0; c < d.C; ++c) {
          for (std::int64_t ki = 0; ki < d.kh; ++ki) {
            const std::int64_t ih = oh * d.stride - d.pad + ki;
            if (ih < 0 || ih >= d.H) continue;
            for (std::int64_t kj = 0; kj < d.kw; ++kj) {
              const std::int64_t iw = ow * d.stride - d.pad + kj;
              if (iw < 0 || iw >= d.W) continue;
              img[(c * d.H + ih) * d.W + iw] += row[(c * d.kh + ki) * d.kw + kj];
            }
          }
        }
      }
    }
  }
}

}  // namespace

Node* conv2d(Node* x, Node* w, Node* bias, int stride, int pad) {
  const Tensor& xv = x->value;
  const Tensor& wv = w->value;
  if (xv.rank() != 4 || wv.rank() != 4 || xv.dim(1) != wv.dim(1)) {
    throw GraphError("conv2d: shape mismatch " + xv.shape_str() + " vs " + wv.shape_str());
  }
  if (stride < 1 || pad < 0) throw GraphError("conv2d: invalid stride/pad");
  const ConvDims d = conv_dims(xv, wv, stride, pad);
  if (d.OH < 1 || d.OW < 1) {
    throw GraphError("conv2d: input " + xv.shape_str() + " too small for kernel " + wv.shape_str());
  }
  if (bias != nullptr && (bias->value.rank() != 1 || bias->value.dim(0) != d.F)) {
    throw GraphError("conv2d: bias shape " + bias->value.shape_str() + " does not match filters " +
                     std::to_string(d.F));
  }
  const std::int64_t patch = d.C * d.kh * d.kw;
  Tensor out({d.B, d.F, d.OH, d.OW});
  std::vector<double> cols;
  EMat result;
  for (std::int64_t b0 = 0; b0 < d.B; b0 += kConvChunk) {
    const std::int64_t chunk = std::min(kConvChunk, d.B - b0);
    const std::int64_t rows = chunk * d.OH * d.OW;
    cols.resize(static_cast<std::size_t>(rows * patch));
    im2col(xv, d, b0, chunk, cols.data());
    CMap cmat(cols.data(), rows, patch);
    CMap wmat(wv.data(), d.F, patch);
    result.noalias() = cmat * wmat.transpose();  // [rows, F]
    for (std::int64_t b = 0; b < chunk; ++b) {
      for (std::int64_t f = 0; f < d.F; ++f) {
        const double bval = bias ? bias->value[static_cast<std::size_t>(f)] : 0.0;
        double* dst = out.data() + (((b0 + b) * d.F + f) * d.OH) * d.OW;
        for (std::int64_t pix = 0; pix < d.OH * d.OW; ++pix) {
          dst[pix] = result(b * d.OH * d.OW + pix, f) + bval;
        }
      }
    }
  }
  std::vector<Node*> parents{x, w};
  if (bias) parents.push_back(bias);
  Node* r = x->graph->make(std::move(out), parents, {}, "conv2d");
  r->backward_fn = [=]() {
    const Tensor& g = r->grad;
    Tensor gx(x->value.shape());
    Tensor gw(w->value.shape());
    Tensor gb = bias ? Tensor(bias->value.shape()) : Tensor();
    const std::int64_t rows_full = d.OH * d.OW;
    std::vector<double> cols_local;
    std::vector<double> gmat_buf;
    EMat dcols;
    MMap gw_map(gw.data(), d.F, patch);
    for (std::int64_t b0 = 0; b0 < d.B; b0 += kConvChunk) {
      const std::int64_t chunk = std::min(kConvChunk, d.B - b0);
      const std::int64_t rows = chunk * rows_full;
      gmat_buf.resize(static_cast<std::size_t>(rows * d.F));
      for (std::int64_t b = 0; b < chunk; ++b) {
        for (std::int64_t f = 0; f < d.F; ++f) {
          const double* src = g.data() + (((b0 + b) * d.F + f) * d.OH) * d.OW;
          for (std::int64_t pix = 0; pix < rows_full; ++pix) {
            gmat_buf[static_cast<std::size_t>((b * rows_full + pix) * d.F + f)] = src[pix];
          }
        }
      }
      CMap gmat(gmat_buf.data(), rows, d.F);
      if (w->requires_grad || x->requires_grad) {
        cols_local.resize(static_cast<std::size_t>(rows * patch));
        im2col(x->value, d, b0, chunk, cols_local.data());
      }
      if (w->requires_grad) {
        CMap cmat(cols_local.data(), rows, patch);
        gw_map.noalias() += gmat.transpose() * cmat;
      }
      if (x->requires_grad) {
        CMap wmat(w->value.data(), d.F, patch);
        dcols.noalias() = gmat * wmat;  // [rows, patch]
        col2im_add(dcols.data(), d, b0, chunk, gx);
      }
      if (bias && bias->requires_grad) {
        for (std::int64_t row = 0; row < rows; ++row) {
          for (std::int64_t f = 0; f < d.F; ++f) {
            gb[static_cast<std::size_t>(f)] += gmat(row, f);
          }
        }
      }
    }
    if (x->requires_grad) x->add_grad(gx);
    if (w->requires_grad) w->add_grad(gw);
    if (bias && bias->requires_grad) bias->add_grad(gb);
  };
  return r;
}

Node* maxpool2d(Node* x, int k, int stride) {
  const Tensor& xv = x->value;
  if (xv.rank() != 4) {
    throw GraphError("maxpool2d: expected [B,C,H,W], got " + xv.shape_str());
  }
  if (k < 1 || stride < 1) throw GraphError("maxpool2d: invalid kernel/stride");
  const std::int64_t B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const std::int64_t OH = (H - k) / stride + 1;
  const std::int64_t OW = (W - k) / stride + 1;
  if (OH < 1 || OW < 1) {
    throw GraphError("maxpool2d: input " + xv.shape_str() + " too small for kernel " +
                     std::to_string(k));
  }
  Tensor out({B, C, OH, OW});
  auto argmax = std::make_shared<std::vector<std::int64_t>>(out.size());
  std::size_t oi = 0;
  for (std::int64_t b = 0; b < B; ++b) {
    for (std::int64_t c = 0; c < C; ++c) {
      const double* plane = xv.data() + (b * C + c) * H * W;
      for (std::int64_t oh = 0; oh < OH; ++oh) {
        for (std::int64_t ow = 0; ow < OW; ++ow, ++oi) {
          double best = -std::numeric_limits<double>::infinity();
          std::int64_t best_idx = 0;
          for (std::int64_t ki = 0; ki < k; ++ki) {
            for (std::int64_t kj = 0; kj < k; ++kj) {
              const std::int64_t idx = (oh * stride + ki) * W + (ow * stride + kj);
              if (plane[idx] > best) {
                best = plane[idx];
                best_idx = (b * C + c) * H * W + idx;
              }
            }
          }
          out[oi] = best;
          (*argmax)[oi] = best_idx;
        }
      }
    }
  }
  Node* r = x->graph->make(std::move(out), {x}, {}, "maxpool2d");
  r->backward_fn = [=]() {
    if (!x->requires_grad) return;
    Tensor gx(x->value.shape());
    for (std::size_t i = 0; i < argmax->size(); ++i) {
      gx[static_cast<std::size_t>((*argmax)[i])] += r->grad[i];
    }
    x->add_grad(gx);
  };
  return r;
}

}  // namespace drm
