#include "mdc/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <unordered_set>

#include "mdc/gaussian.hpp"

namespace mdc::ag {

namespace {

thread_local bool g_grad_enabled = true;

using BackwardFn = std::function<void(Node&)>;

Var make_op(Tensor value, std::vector<Var> inputs, BackwardFn fn) {
  auto node = std::make_shared<Node>(std::move(value));
  if (!g_grad_enabled) return node;
  const bool any = std::any_of(inputs.begin(), inputs.end(), [](const Var& v) {
    return v && v->requires_grad;
  });
  if (any) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward_fn = std::move(fn);
  }
  return node;
}

bool wants(const Var& v) { return v && v->requires_grad; }

Tensor scalar_tensor(float v) { return Tensor({1, 1, 1, 1}, v); }

}  // namespace

Tensor& Node::grad_buffer() {
  if (grad.empty()) grad = Tensor(value.shape(), 0.0f);
  return grad;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) {
  g_grad_enabled = false;
}
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Var constant(Tensor t) { return std::make_shared<Node>(std::move(t)); }

Var parameter(Tensor t) {
  auto node = std::make_shared<Node>(std::move(t));
  node->requires_grad = true;
  return node;
}

float scalar(const Var& v) {
  if (v->value.numel() != 1) throw ShapeError("scalar: not a 1-element tensor");
  return v->value[0];
}

void backward(const Var& root) {
  if (root->value.numel() != 1) {
    throw ShapeError("backward: root must be a scalar");
  }
  if (!root->requires_grad) return;
  // Iterative post-order DFS for a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child && child->requires_grad && !seen.count(child)) {
        seen.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root->grad_buffer()[0] += 1.0f;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
  }
  // Interior gradients are no longer needed; parameters (leaves) keep theirs.
  for (Node* node : order) {
    if (node->backward_fn) node->grad = Tensor();
  }
}

// ---------------------------------------------------------------------------
// Elementwise

Var add(const Var& a, const Var& b) {
  require_same_shape(a->shape(), b->shape(), "add");
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b->value[i];
  return make_op(std::move(out), {a, b}, [a, b](Node& self) {
    for (const Var& v : {a, b}) {
      if (!wants(v)) continue;
      Tensor& g = v->grad_buffer();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a->shape(), b->shape(), "sub");
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= b->value[i];
  return make_op(std::move(out), {a, b}, [a, b](Node& self) {
    if (wants(a)) {
      Tensor& g = a->grad_buffer();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
    }
    if (wants(b)) {
      Tensor& g = b->grad_buffer();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] -= self.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a->shape(), b->shape(), "mul");
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b->value[i];
  return make_op(std::move(out), {a, b}, [a, b](Node& self) {
    if (wants(a)) {
      Tensor& g = a->grad_buffer();
      for (std::size_t i = 0; i < g.numel(); ++i)
        g[i] += self.grad[i] * b->value[i];
    }
    if (wants(b)) {
      Tensor& g = b->grad_buffer();
      for (std::size_t i = 0; i < g.numel(); ++i)
        g[i] += self.grad[i] * a->value[i];
    }
  });
}

Var scale(const Var& a, float s) {
  Tensor out = a->value;
  for (float& v : out.values()) v *= s;
  return make_op(std::move(out), {a}, [a, s](Node& self) {
    Tensor& g = a->grad_buffer();
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] += s * self.grad[i];
  });
}

Var add_scalar(const Var& a, float s) {
  Tensor out = a->value;
  for (float& v : out.values()) v += s;
  return make_op(std::move(out), {a}, [a](Node& self) {
    Tensor& g = a->grad_buffer();
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
  });
}

Var sum_all(std::span<const Var> terms) {
  if (terms.empty()) return constant(scalar_tensor(0.0f));
  Var acc = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
  return acc;
}

Var leaky_relu(const Var& a, float slope) {
  Tensor out = a->value;
  // Branch-free so it vectorizes; signs of activations are unpredictable.
  for (float& v : out.values()) v = std::max(v, 0.0f) + slope * std::min(v, 0.0f);
  return make_op(std::move(out), {a}, [a, slope](Node& self) {
    Tensor& g = a->grad_buffer();
    const Tensor& x = a->value;
    for (std::size_t i = 0; i < g.numel(); ++i)
      g[i] += self.grad[i] * (x[i] > 0.0f ? 1.0f : slope);
  });
}

Var softplus(const Var& a) {
  Tensor out = a->value;
  for (float& v : out.values()) {
    v = v > 20.0f ? v : std::log1p(std::exp(v));
  }
  return make_op(std::move(out), {a}, [a](Node& self) {
    Tensor& g = a->grad_buffer();
    const Tensor& x = a->value;
    for (std::size_t i = 0; i < g.numel(); ++i)
      g[i] += self.grad[i] / (1.0f + std::exp(-x[i]));
  });
}

Var clamp_min(const Var& a, float lo) {
  Tensor out = a->value;
  for (float& v : out.values()) v = std::max(v, lo);
  return make_op(std::move(out), {a}, [a, lo](Node& self) {
    Tensor& g = a->grad_buffer();
    const Tensor& x = a->value;
    for (std::size_t i = 0; i < g.numel(); ++i)
      if (x[i] > lo) g[i] += self.grad[i];
  });
}

Var clamp01_ste(const Var& a) {
  Tensor out = a->value;
  for (float& v : out.values()) v = std::clamp(v, 0.0f, 1.0f);
  return make_op(std::move(out), {a}, [a](Node& self) {
    Tensor& g = a->grad_buffer();
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
  });
}

Var ste_round(const Var& a) {
  Tensor out = a->value;
  for (float& v : out.values()) v = std::round(v);
  return make_op(std::move(out), {a}, [a](Node& self) {
    Tensor& g = a->grad_buffer();
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Layout

Var concat_channels(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  Shape s = parts.front()->shape();
  s.c = 0;
  for (const Var& p : parts) {
    const Shape& ps = p->shape();
    if (ps.n != s.n || ps.h != s.h || ps.w != s.w) {
      throw ShapeError("concat_channels: " + ps.str() + " does not match");
    }
    s.c += ps.c;
  }
  Tensor out(s);
  const std::size_t hw = static_cast<std::size_t>(s.h) * s.w;
  for (int n = 0; n < s.n; ++n) {
    int c0 = 0;
    for (const Var& p : parts) {
      const int pc = p->shape().c;
      std::copy_n(p->value.plane(n, 0), pc * hw, out.plane(n, c0));
      c0 += pc;
    }
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return make_op(std::move(out), inputs, [inputs, hw](Node& self) {
    const int batch = self.shape().n;
    int c0 = 0;
    for (const Var& p : inputs) {
      const int pc = p->shape().c;
      if (wants(p)) {
        Tensor& g = p->grad_buffer();
        for (int n = 0; n < batch; ++n) {
          const float* src = self.grad.plane(n, c0);
          float* dst = g.plane(n, 0);
          for (std::size_t i = 0; i < pc * hw; ++i) dst[i] += src[i];
        }
      }
      c0 += pc;
    }
  });
}

Var slice_channels(const Var& a, int begin, int count) {
  const Shape& as = a->shape();
  if (begin < 0 || count < 1 || begin + count > as.c) {
    throw ShapeError("slice_channels: range outside " + as.str());
  }
  Tensor out({as.n, count, as.h, as.w});
  const std::size_t hw = static_cast<std::size_t>(as.h) * as.w;
  for (int n = 0; n < as.n; ++n) {
    std::copy_n(a->value.plane(n, begin), count * hw, out.plane(n, 0));
  }
  return make_op(std::move(out), {a}, [a, begin, count, hw](Node& self) {
    Tensor& g = a->grad_buffer();
    for (int n = 0; n < self.shape().n; ++n) {
      const float* src = self.grad.plane(n, 0);
      float* dst = g.plane(n, begin);
      for (std::size_t i = 0; i < count * hw; ++i) dst[i] += src[i];
    }
  });
}

Var crop_spatial(const Var& a, int height, int width) {
  const Shape& as = a->shape();
  if (height == as.h && width == as.w) return a;
  Tensor out = a->value.crop(0, 0, height, width);
  return make_op(std::move(out), {a}, [a](Node& self) {
    Tensor& g = a->grad_buffer();
    const Shape& s = self.shape();
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c)
        for (int y = 0; y < s.h; ++y)
          for (int x = 0; x < s.w; ++x)
            g.at(n, c, y, x) += self.grad.at(n, c, y, x);
  });
}

Var broadcast_channels(const Var& per_channel, const Shape& target) {
  const Shape& ps = per_channel->shape();
  if (ps.n != 1 || ps.h != 1 || ps.w != 1 || ps.c != target.c) {
    throw ShapeError("broadcast_channels: " + ps.str() + " -> " + target.str());
  }
  Tensor out(target);
  const std::size_t hw = static_cast<std::size_t>(target.h) * target.w;
  for (int n = 0; n < target.n; ++n)
    for (int c = 0; c < target.c; ++c)
      std::fill_n(out.plane(n, c), hw, per_channel->value[c]);
  return make_op(std::move(out), {per_channel},
                 [per_channel, hw](Node& self) {
                   Tensor& g = per_channel->grad_buffer();
                   const Shape& s = self.shape();
                   for (int n = 0; n < s.n; ++n)
                     for (int c = 0; c < s.c; ++c) {
                       const float* src = self.grad.plane(n, c);
                       double acc = 0.0;
                       for (std::size_t i = 0; i < hw; ++i) acc += src[i];
                       g[c] += static_cast<float>(acc);
                     }
                 });
}

Var avg_pool2(const Var& a) {
  const Shape& as = a->shape();
  const int oh = as.h / 2;
  const int ow = as.w / 2;
  if (oh < 1 || ow < 1) throw ShapeError("avg_pool2: input too small");
  Tensor out({as.n, as.c, oh, ow});
  for (int n = 0; n < as.n; ++n)
    for (int c = 0; c < as.c; ++c) {
      const float* src = a->value.plane(n, c);
      float* dst = out.plane(n, c);
      for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
          const float* p = src + (2 * y) * as.w + 2 * x;
          dst[y * ow + x] = 0.25f * (p[0] + p[1] + p[as.w] + p[as.w + 1]);
        }
    }
  return make_op(std::move(out), {a}, [a](Node& self) {
    Tensor& g = a->grad_buffer();
    const Shape& s = self.shape();
    const int iw = a->shape().w;
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c) {
        const float* src = self.grad.plane(n, c);
        float* dst = g.plane(n, c);
        for (int y = 0; y < s.h; ++y)
          for (int x = 0; x < s.w; ++x) {
            const float v = 0.25f * src[y * s.w + x];
            float* p = dst + (2 * y) * iw + 2 * x;
            p[0] += v;
            p[1] += v;
            p[iw] += v;
            p[iw + 1] += v;
          }
      }
  });
}

Var upsample_nearest2(const Var& a) {
  const Shape& as = a->shape();
  Tensor out({as.n, as.c, as.h * 2, as.w * 2});
  const int ow = as.w * 2;
  for (int n = 0; n < as.n; ++n)
    for (int c = 0; c < as.c; ++c) {
      const float* src = a->value.plane(n, c);
      float* dst = out.plane(n, c);
      for (int y = 0; y < as.h * 2; ++y)
        for (int x = 0; x < ow; ++x) dst[y * ow + x] = src[(y / 2) * as.w + x / 2];
    }
  return make_op(std::move(out), {a}, [a](Node& self) {
    Tensor& g = a->grad_buffer();
    const Shape& s = self.shape();
    const int iw = a->shape().w;
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c) {
        const float* src = self.grad.plane(n, c);
        float* dst = g.plane(n, c);
        for (int y = 0; y < s.h; ++y)
          for (int x = 0; x < s.w; ++x) dst[(y / 2) * iw + x / 2] += src[y * s.w + x];
      }
  });
}

// ---------------------------------------------------------------------------
// Warping

Var warp_bilinear(const Var& img, const Var& flow) {
  const Shape& is = img->shape();
  const Shape& fs = flow->shape();
  if (fs.n != is.n || fs.c != 2 || fs.h != is.h || fs.w != is.w) {
    throw ShapeError("warp_bilinear: flow " + fs.str() + " for image " +
                     is.str());
  }
  const int H = is.h;
  const int W = is.w;
  Tensor out(is);
  for (int n = 0; n < is.n; ++n) {
    const float* fy = flow->value.plane(n, 0);
    const float* fx = flow->value.plane(n, 1);
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j) {
        const int p = i * W + j;
        const float sy = std::clamp(i + fy[p], 0.0f, static_cast<float>(H - 1));
        const float sx = std::clamp(j + fx[p], 0.0f, static_cast<float>(W - 1));
        const int y0 = static_cast<int>(std::floor(sy));
        const int x0 = static_cast<int>(std::floor(sx));
        const int y1 = std::min(y0 + 1, H - 1);
        const int x1 = std::min(x0 + 1, W - 1);
        const float wy = sy - y0;
        const float wx = sx - x0;
        for (int c = 0; c < is.c; ++c) {
          const float* src = img->value.plane(n, c);
          const float top = src[y0 * W + x0] * (1.0f - wx) + src[y0 * W + x1] * wx;
          const float bot = src[y1 * W + x0] * (1.0f - wx) + src[y1 * W + x1] * wx;
          out.plane(n, c)[p] = top * (1.0f - wy) + bot * wy;
        }
      }
  }
  return make_op(std::move(out), {img, flow}, [img, flow](Node& self) {
    const Shape& s = self.shape();
    const int H = s.h;
    const int W = s.w;
    Tensor* gi = wants(img) ? &img->grad_buffer() : nullptr;
    Tensor* gf = wants(flow) ? &flow->grad_buffer() : nullptr;
    for (int n = 0; n < s.n; ++n) {
      const float* fy = flow->value.plane(n, 0);
      const float* fx = flow->value.plane(n, 1);
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) {
          const int p = i * W + j;
          const float ry = i + fy[p];
          const float rx = j + fx[p];
          const bool iny = ry > 0.0f && ry < static_cast<float>(H - 1);
          const bool inx = rx > 0.0f && rx < static_cast<float>(W - 1);
          const float sy = std::clamp(ry, 0.0f, static_cast<float>(H - 1));
          const float sx = std::clamp(rx, 0.0f, static_cast<float>(W - 1));
          const int y0 = static_cast<int>(std::floor(sy));
          const int x0 = static_cast<int>(std::floor(sx));
          const int y1 = std::min(y0 + 1, H - 1);
          const int x1 = std::min(x0 + 1, W - 1);
          const float wy = sy - y0;
          const float wx = sx - x0;
          float dfy = 0.0f;
          float dfx = 0.0f;
          for (int c = 0; c < s.c; ++c) {
            const float go = self.grad.plane(n, c)[p];
            if (go == 0.0f) continue;
            const float* src = img->value.plane(n, c);
            const float v00 = src[y0 * W + x0];
            const float v01 = src[y0 * W + x1];
            const float v10 = src[y1 * W + x0];
            const float v11 = src[y1 * W + x1];
            if (gi) {
              float* g = gi->plane(n, c);
              g[y0 * W + x0] += go * (1.0f - wy) * (1.0f - wx);
              g[y0 * W + x1] += go * (1.0f - wy) * wx;
              g[y1 * W + x0] += go * wy * (1.0f - wx);
              g[y1 * W + x1] += go * wy * wx;
            }
            if (gf) {
              if (iny)
                dfy += go * ((v10 - v00) * (1.0f - wx) + (v11 - v01) * wx);
              if (inx)
                dfx += go * ((v01 - v00) * (1.0f - wy) + (v11 - v10) * wy);
            }
          }
          if (gf) {
            gf->plane(n, 0)[p] += dfy;
            gf->plane(n, 1)[p] += dfx;
          }
        }
    }
  });
}

// ---------------------------------------------------------------------------
// Normalisation and reductions

Var channel_normalize(const Var& a, float eps) {
  const Shape& s = a->shape();
  const std::size_t hw = static_cast<std::size_t>(s.h) * s.w;
  Tensor out(s);
  Tensor norms({s.n, 1, s.h, s.w});
  for (int n = 0; n < s.n; ++n)
    for (std::size_t p = 0; p < hw; ++p) {
      double acc = 0.0;
      for (int c = 0; c < s.c; ++c) {
        const float v = a->value.plane(n, c)[p];
        acc += static_cast<double>(v) * v;
      }
      const float norm = static_cast<float>(std::sqrt(acc + eps));
      norms.plane(n, 0)[p] = norm;
      for (int c = 0; c < s.c; ++c)
        out.plane(n, c)[p] = a->value.plane(n, c)[p] / norm;
    }
  return make_op(out, {a}, [a, out, norms, hw](Node& self) {
    const Shape& s = self.shape();
    Tensor& g = a->grad_buffer();
    for (int n = 0; n < s.n; ++n)
      for (std::size_t p = 0; p < hw; ++p) {
        // d(x/|x|) = (g - u <u,g>) / |x|
        double dot = 0.0;
        for (int c = 0; c < s.c; ++c)
          dot += static_cast<double>(out.plane(n, c)[p]) * self.grad.plane(n, c)[p];
        const float norm = norms.plane(n, 0)[p];
        for (int c = 0; c < s.c; ++c)
          g.plane(n, c)[p] += (self.grad.plane(n, c)[p] -
                               out.plane(n, c)[p] * static_cast<float>(dot)) /
                              norm;
      }
  });
}

Var sum(const Var& a) {
  double acc = 0.0;
  for (float v : a->value.values()) acc += v;
  return make_op(scalar_tensor(static_cast<float>(acc)), {a}, [a](Node& self) {
    Tensor& g = a->grad_buffer();
    const float go = self.grad[0];
    for (float& v : g.values()) v += go;
  });
}

Var mean(const Var& a) {
  return scale(sum(a), 1.0f / static_cast<float>(a->value.numel()));
}

Var mse(const Var& a, const Var& b) {
  require_same_shape(a->shape(), b->shape(), "mse");
  const std::size_t count = a->value.numel();
  double acc = 0.0;
  for (std::size_t i = 0; i < count; ++i) {
    const double d = static_cast<double>(a->value[i]) - b->value[i];
    acc += d * d;
  }
  return make_op(scalar_tensor(static_cast<float>(acc / count)), {a, b},
                 [a, b, count](Node& self) {
                   const float k = 2.0f * self.grad[0] / count;
                   Tensor* ga = wants(a) ? &a->grad_buffer() : nullptr;
                   Tensor* gb = wants(b) ? &b->grad_buffer() : nullptr;
                   for (std::size_t i = 0; i < count; ++i) {
                     const float d = k * (a->value[i] - b->value[i]);
                     if (ga) (*ga)[i] += d;
                     if (gb) (*gb)[i] -= d;
                   }
                 });
}

Var l1(const Var& a, const Var& b) {
  require_same_shape(a->shape(), b->shape(), "l1");
  const std::size_t count = a->value.numel();
  double acc = 0.0;
  for (std::size_t i = 0; i < count; ++i)
    acc += std::abs(static_cast<double>(a->value[i]) - b->value[i]);
  return make_op(scalar_tensor(static_cast<float>(acc / count)), {a, b},
                 [a, b, count](Node& self) {
                   const float k = self.grad[0] / count;
                   Tensor* ga = wants(a) ? &a->grad_buffer() : nullptr;
                   Tensor* gb = wants(b) ? &b->grad_buffer() : nullptr;
                   for (std::size_t i = 0; i < count; ++i) {
                     const float d = a->value[i] - b->value[i];
                     const float sgn = d > 0.0f ? k : (d < 0.0f ? -k : 0.0f);
                     if (ga) (*ga)[i] += sgn;
                     if (gb) (*gb)[i] -= sgn;
                   }
                 });
}

Var gaussian_bits(const Var& y, const Var& mu, const Var& sigma,
                  double p_min) {
  require_same_shape(y->shape(), mu->shape(), "gaussian_bits(mu)");
  require_same_shape(y->shape(), sigma->shape(), "gaussian_bits(sigma)");
  const std::size_t count = y->value.numel();
  const bool track = grad_enabled() && (wants(y) || wants(mu) || wants(sigma));
  // Per-element d(bits)/dy and d(bits)/dsigma; d/dmu = -d/dy.
  std::vector<float> d_y(track ? count : 0);
  std::vector<float> d_sigma(track ? count : 0);
  constexpr double kInvLn2 = 1.0 / std::numbers::ln2;
  double total = 0.0;
  for (std::size_t i = 0; i < count; ++i) {
    const double s = sigma->value[i];
    const double c = static_cast<double>(y->value[i]) - mu->value[i];
    const double p = gaussian_bin_mass(c, 0.0, s);
    total += -std::log2(std::max(p, p_min));
    if (track) {
      const double hi = (c + 0.5) / s;
      const double lo = (c - 0.5) / s;
      const double ph = std_normal_pdf(hi);
      const double pl = std_normal_pdf(lo);
      const double denom = std::max(p, 1e-12);
      d_y[i] = static_cast<float>(-kInvLn2 * (ph - pl) / s / denom);
      d_sigma[i] = static_cast<float>(-kInvLn2 * (-hi * ph + lo * pl) / s / denom);
    }
  }
  return make_op(scalar_tensor(static_cast<float>(total)), {y, mu, sigma},
                 [y, mu, sigma, d_y = std::move(d_y),
                  d_sigma = std::move(d_sigma)](Node& self) {
                   const float go = self.grad[0];
                   if (wants(y)) {
                     Tensor& g = y->grad_buffer();
                     for (std::size_t i = 0; i < g.numel(); ++i) g[i] += go * d_y[i];
                   }
                   if (wants(mu)) {
                     Tensor& g = mu->grad_buffer();
                     for (std::size_t i = 0; i < g.numel(); ++i) g[i] -= go * d_y[i];
                   }
                   if (wants(sigma)) {
                     Tensor& g = sigma->grad_buffer();
                     for (std::size_t i = 0; i < g.numel(); ++i)
                       g[i] += go * d_sigma[i];
                   }
                 });
}

}  // namespace mdc::ag
