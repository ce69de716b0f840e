// Convolution kernels for the autograd engine: im2col + GEMM for dense and
// transposed convolutions, direct loops for depthwise 3x3.

#include <Eigen/Core>
#include <algorithm>
#include <cstring>
#include <vector>

#include "mdc/autograd.hpp"

namespace mdc::ag {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

struct Geometry {
  int cin, h, w;  // image side
  int k, stride, pad;
  int oh, ow;  // column side
  int rows() const { return cin * k * k; }
  int cols() const { return oh * ow; }
};

// Columns ox with 0 <= ox*stride - pad + kx < w.
std::pair<int, int> valid_range(const Geometry& g, int kx) {
  const int shift = kx - g.pad;
  const int lo = std::clamp((-shift + g.stride - 1) / g.stride, 0, g.ow);
  const int hi = std::clamp((g.w - shift + g.stride - 1) / g.stride, lo, g.ow);
  return {lo, hi};
}

// col[(c*k+ky)*k+kx][oy*ow+ox] = img[c][oy*s-p+ky][ox*s-p+kx]
void im2col(const float* img, const Geometry& g, float* col) {
  for (int c = 0; c < g.cin; ++c)
    for (int ky = 0; ky < g.k; ++ky)
      for (int kx = 0; kx < g.k; ++kx) {
        float* row = col + static_cast<std::size_t>((c * g.k + ky) * g.k + kx) * g.cols();
        const float* plane = img + static_cast<std::size_t>(c) * g.h * g.w;
        for (int oy = 0; oy < g.oh; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          float* dst = row + oy * g.ow;
          if (iy < 0 || iy >= g.h) {
            std::memset(dst, 0, sizeof(float) * g.ow);
            continue;
          }
          const float* src = plane + iy * g.w;
          const auto [lo, hi] = valid_range(g, kx);
          const int shift = kx - g.pad;
          std::fill(dst, dst + lo, 0.0f);
          if (g.stride == 1) {
            std::memcpy(dst + lo, src + lo + shift, sizeof(float) * (hi - lo));
          } else {
            for (int ox = lo; ox < hi; ++ox) dst[ox] = src[ox * g.stride + shift];
          }
          std::fill(dst + hi, dst + g.ow, 0.0f);
        }
      }
}

// Adjoint of im2col: accumulates columns back into the image.
void col2im(const float* col, const Geometry& g, float* img) {
  for (int c = 0; c < g.cin; ++c)
    for (int ky = 0; ky < g.k; ++ky)
      for (int kx = 0; kx < g.k; ++kx) {
        const float* row = col + static_cast<std::size_t>((c * g.k + ky) * g.k + kx) * g.cols();
        float* plane = img + static_cast<std::size_t>(c) * g.h * g.w;
        for (int oy = 0; oy < g.oh; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) continue;
          const float* src = row + oy * g.ow;
          float* dst = plane + iy * g.w;
          const auto [lo, hi] = valid_range(g, kx);
          const int shift = kx - g.pad;
          for (int ox = lo; ox < hi; ++ox) dst[ox * g.stride + shift] += src[ox];
        }
      }
}

void add_bias(float* out, const float* bias, int channels, int plane_size) {
  for (int c = 0; c < channels; ++c) {
    const float b = bias[c];
    float* p = out + static_cast<std::size_t>(c) * plane_size;
    for (int i = 0; i < plane_size; ++i) p[i] += b;
  }
}

void accumulate_bias_grad(const float* grad, float* gbias, int channels,
                          int plane_size) {
  for (int c = 0; c < channels; ++c) {
    const float* p = grad + static_cast<std::size_t>(c) * plane_size;
    double acc = 0.0;
    for (int i = 0; i < plane_size; ++i) acc += p[i];
    gbias[c] += static_cast<float>(acc);
  }
}

// Buffers reused across calls; every user overwrites what it reads.
float* scratch(int slot, std::size_t n) {
  thread_local std::vector<float> bufs[3];
  if (bufs[slot].size() < n) bufs[slot].resize(n);
  return bufs[slot].data();
}

float* col_scratch(const Geometry& g) {
  return scratch(0, static_cast<std::size_t>(g.rows()) * g.cols());
}

// Stride-1 forward pass. Output rows are computed at the padded row pitch, so
// each column-matrix row is one contiguous slice of the padded input; the
// trailing k-1 columns of every row are junk and dropped.
void conv2d_stride1(const float* img, const Geometry& g, const float* weight, int cout,
                    float* out) {
  const int hp = g.h + 2 * g.pad;
  const int wp = g.w + 2 * g.pad;
  const std::size_t plane = static_cast<std::size_t>(hp) * wp;
  const std::size_t cols = static_cast<std::size_t>(g.oh) * wp;
  float* padded = scratch(1, g.cin * plane + g.k);
  std::fill(padded, padded + g.cin * plane + g.k, 0.0f);
  for (int c = 0; c < g.cin; ++c)
    for (int y = 0; y < g.h; ++y) {
      std::memcpy(padded + c * plane + (y + g.pad) * wp + g.pad,
                  img + (static_cast<std::size_t>(c) * g.h + y) * g.w, sizeof(float) * g.w);
    }
  float* col = scratch(0, g.rows() * cols);
  for (int c = 0; c < g.cin; ++c)
    for (int ky = 0; ky < g.k; ++ky)
      for (int kx = 0; kx < g.k; ++kx) {
        std::memcpy(col + ((c * g.k + ky) * g.k + kx) * cols,
                    padded + c * plane + ky * wp + kx, sizeof(float) * cols);
      }
  float* wide = scratch(2, cout * cols);
  MapMat(wide, cout, cols).noalias() =
      ConstMapMat(weight, cout, g.rows()) * ConstMapMat(col, g.rows(), cols);
  for (int co = 0; co < cout; ++co)
    for (int oy = 0; oy < g.oh; ++oy) {
      std::memcpy(out + (static_cast<std::size_t>(co) * g.oh + oy) * g.ow,
                  wide + co * cols + oy * wp, sizeof(float) * g.ow);
    }
}

bool wants(const Var& v) { return v && v->requires_grad; }

Var finish(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> fn) {
  auto node = std::make_shared<Node>(std::move(value));
  if (!grad_enabled()) return node;
  bool any = false;
  for (const Var& v : inputs) any = any || wants(v);
  if (any) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward_fn = std::move(fn);
  }
  return node;
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
  const Shape& xs = x->shape();
  const Shape& ws = w->shape();
  if (ws.c != xs.c || ws.h != ws.w) {
    throw ShapeError("conv2d: weight " + ws.str() + " for input " + xs.str());
  }
  Geometry g{xs.c, xs.h, xs.w, ws.h, stride, pad,
             (xs.h + 2 * pad - ws.h) / stride + 1,
             (xs.w + 2 * pad - ws.w) / stride + 1};
  if (g.oh < 1 || g.ow < 1) throw ShapeError("conv2d: input too small");
  const int cout = ws.n;
  Tensor out({xs.n, cout, g.oh, g.ow});
  ConstMapMat W(w->value.data(), cout, g.rows());
  for (int n = 0; n < xs.n; ++n) {
    if (stride == 1) {
      conv2d_stride1(x->value.plane(n, 0), g, w->value.data(), cout, out.plane(n, 0));
    } else {
      float* col = col_scratch(g);
      im2col(x->value.plane(n, 0), g, col);
      MapMat(out.plane(n, 0), cout, g.cols()).noalias() = W * ConstMapMat(col, g.rows(), g.cols());
    }
    if (b) add_bias(out.plane(n, 0), b->value.data(), cout, g.cols());
  }
  return finish(std::move(out), {x, w, b}, [x, w, b, g, cout](Node& self) {
    const int batch = self.shape().n;
    float* col = col_scratch(g);
    ConstMapMat W(w->value.data(), cout, g.rows());
    for (int n = 0; n < batch; ++n) {
      ConstMapMat dO(self.grad.plane(n, 0), cout, g.cols());
      if (wants(w)) {
        im2col(x->value.plane(n, 0), g, col);
        MapMat dW(w->grad_buffer().data(), cout, g.rows());
        dW.noalias() += dO * ConstMapMat(col, g.rows(), g.cols()).transpose();
      }
      if (wants(b)) {
        accumulate_bias_grad(self.grad.plane(n, 0), b->grad_buffer().data(), cout,
                             g.cols());
      }
      if (wants(x)) {
        MapMat dcol(col, g.rows(), g.cols());
        dcol.noalias() = W.transpose() * dO;
        col2im(col, g, x->grad_buffer().plane(n, 0));
      }
    }
  });
}

Var conv_transpose2d(const Var& x, const Var& w, const Var& b, int stride,
                     int pad, int output_pad) {
  const Shape& xs = x->shape();
  const Shape& ws = w->shape();
  if (ws.n != xs.c || ws.h != ws.w) {
    throw ShapeError("conv_transpose2d: weight " + ws.str() + " for input " +
                     xs.str());
  }
  const int cout = ws.c;
  const int oh = (xs.h - 1) * stride - 2 * pad + ws.h + output_pad;
  const int ow = (xs.w - 1) * stride - 2 * pad + ws.w + output_pad;
  // The transposed conv is the adjoint of a conv from the output grid back to
  // the input grid; `g` describes that forward conv.
  Geometry g{cout, oh, ow, ws.h, stride, pad, xs.h, xs.w};
  if ((oh + 2 * pad - ws.h) / stride + 1 != xs.h) {
    throw ShapeError("conv_transpose2d: inconsistent geometry");
  }
  Tensor out({xs.n, cout, oh, ow});
  float* col = col_scratch(g);
  ConstMapMat W(w->value.data(), xs.c, g.rows());
  for (int n = 0; n < xs.n; ++n) {
    MapMat C(col, g.rows(), g.cols());
    C.noalias() = W.transpose() * ConstMapMat(x->value.plane(n, 0), xs.c, g.cols());
    col2im(col, g, out.plane(n, 0));
    if (b) add_bias(out.plane(n, 0), b->value.data(), cout, oh * ow);
  }
  const int cin = xs.c;
  return finish(std::move(out), {x, w, b}, [x, w, b, g, cin, cout](Node& self) {
    const int batch = self.shape().n;
    float* col = col_scratch(g);
    ConstMapMat W(w->value.data(), cin, g.rows());
    for (int n = 0; n < batch; ++n) {
      im2col(self.grad.plane(n, 0), g, col);
      ConstMapMat C(col, g.rows(), g.cols());
      if (wants(w)) {
        MapMat dW(w->grad_buffer().data(), cin, g.rows());
        dW.noalias() += ConstMapMat(x->value.plane(n, 0), cin, g.cols()) * C.transpose();
      }
      if (wants(x)) {
        MapMat dX(x->grad_buffer().plane(n, 0), cin, g.cols());
        dX.noalias() += W * C;
      }
      if (wants(b)) {
        accumulate_bias_grad(self.grad.plane(n, 0), b->grad_buffer().data(), cout,
                             g.h * g.w);
      }
    }
  });
}

Var depthwise_conv2d(const Var& x, const Var& w, const Var& b, int pad) {
  const Shape& xs = x->shape();
  const Shape& ws = w->shape();
  if (ws.n != xs.c || ws.c != 1 || ws.h != ws.w) {
    throw ShapeError("depthwise_conv2d: weight " + ws.str() + " for input " +
                     xs.str());
  }
  const int k = ws.h;
  const int oh = xs.h + 2 * pad - k + 1;
  const int ow = xs.w + 2 * pad - k + 1;
  Tensor out({xs.n, xs.c, oh, ow});
  for (int n = 0; n < xs.n; ++n)
    for (int c = 0; c < xs.c; ++c) {
      const float* src = x->value.plane(n, c);
      const float* kern = w->value.data() + c * k * k;
      float* dst = out.plane(n, c);
      std::fill(dst, dst + oh * ow, b ? b->value[c] : 0.0f);
      // One tap at a time so the inner loop is a contiguous axpy.
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
          const float wv = kern[ky * k + kx];
          const int shift = kx - pad;
          const int lo = std::clamp(-shift, 0, ow);
          const int hi = std::clamp(xs.w - shift, lo, ow);
          for (int oy = 0; oy < oh; ++oy) {
            const int iy = oy - pad + ky;
            if (iy < 0 || iy >= xs.h) continue;
            const float* in = src + iy * xs.w + shift;
            float* o = dst + oy * ow;
            for (int ox = lo; ox < hi; ++ox) o[ox] += wv * in[ox];
          }
        }
    }
  return finish(std::move(out), {x, w, b}, [x, w, b, k, pad](Node& self) {
    const Shape& s = self.shape();
    const Shape& xs = x->shape();
    Tensor* gx = wants(x) ? &x->grad_buffer() : nullptr;
    Tensor* gw = wants(w) ? &w->grad_buffer() : nullptr;
    Tensor* gb = wants(b) ? &b->grad_buffer() : nullptr;
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c) {
        const float* go = self.grad.plane(n, c);
        const float* src = x->value.plane(n, c);
        const float* kern = w->value.data() + c * k * k;
        for (int oy = 0; oy < s.h; ++oy)
          for (int ox = 0; ox < s.w; ++ox) {
            const float gv = go[oy * s.w + ox];
            if (gb) (*gb)[c] += gv;
            for (int ky = 0; ky < k; ++ky) {
              const int iy = oy - pad + ky;
              if (iy < 0 || iy >= xs.h) continue;
              for (int kx = 0; kx < k; ++kx) {
                const int ix = ox - pad + kx;
                if (ix < 0 || ix >= xs.w) continue;
                if (gw) (*gw)[c * k * k + ky * k + kx] += gv * src[iy * xs.w + ix];
                if (gx) gx->plane(n, c)[iy * xs.w + ix] += gv * kern[ky * k + kx];
              }
            }
          }
      }
  });
}

}  // namespace mdc::ag
