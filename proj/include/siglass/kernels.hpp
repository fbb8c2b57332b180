#pragma once

// Linear operator kernels, templated on the element type. Weights are always
// concrete doubles; the data operand is `double` for plain evaluation and an
// affine pair for line propagation, so one implementation serves both.

#include <cmath>
#include <cstdint>
#include <vector>

#include "siglass/ops.hpp"
#include "siglass/tensor.hpp"

namespace siglass::kernels {

/// Offset of every output element into an input broadcast to `out`.
inline std::vector<std::size_t> broadcast_offsets(const Shape& in, const Shape& out) {
  const std::size_t r = out.size();
  Shape in_strides(r, 0);
  const Shape s = strides_of(in);
  for (std::size_t i = 0; i < in.size(); ++i) {
    const std::size_t d = r - in.size() + i;
    in_strides[d] = in[i] == 1 ? 0 : s[i];
  }
  std::vector<std::size_t> offs(static_cast<std::size_t>(numel(out)));
  std::vector<std::int64_t> idx(r, 0);
  std::int64_t off = 0;
  for (std::size_t flat = 0; flat < offs.size(); ++flat) {
    offs[flat] = static_cast<std::size_t>(off);
    for (std::size_t d = r; d-- > 0;) {
      if (++idx[d] < out[d]) {
        off += in_strides[d];
        break;
      }
      off -= in_strides[d] * (out[d] - 1);
      idx[d] = 0;
    }
  }
  return offs;
}

template <class R, class TA, class TB, class F>
BasicTensor<R> broadcast_binary(const BasicTensor<TA>& a, const BasicTensor<TB>& b, const Shape& out, F&& f) {
  const auto oa = broadcast_offsets(a.shape, out);
  const auto ob = broadcast_offsets(b.shape, out);
  BasicTensor<R> y;
  y.shape = out;
  y.data.reserve(oa.size());
  for (std::size_t i = 0; i < oa.size(); ++i) y.data.push_back(f(a.data[oa[i]], b.data[ob[i]]));
  return y;
}

template <class T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const Tensor& w, const Tensor* bias, const WindowParams& p,
                      const Shape& out) {
  const auto N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
  const auto M = w.shape[0], KH = w.shape[2], KW = w.shape[3];
  const auto OH = out[2], OW = out[3];
  const auto Cg = C / p.group, Mg = M / p.group;
  BasicTensor<T> y(out);
  for (std::int64_t n = 0; n < N; ++n) {
    for (std::int64_t m = 0; m < M; ++m) {
      const auto g = m / Mg;
      for (std::int64_t oh = 0; oh < OH; ++oh) {
        for (std::int64_t ow = 0; ow < OW; ++ow) {
          T acc{};
          for (std::int64_t c = 0; c < Cg; ++c) {
            const auto ic = g * Cg + c;
            for (std::int64_t kh = 0; kh < KH; ++kh) {
              const auto ih = oh * p.sh - p.pt + kh * p.dh;
              if (ih < 0 || ih >= H) continue;
              for (std::int64_t kw = 0; kw < KW; ++kw) {
                const auto iw = ow * p.sw - p.pl + kw * p.dw;
                if (iw < 0 || iw >= W) continue;
                acc += x.data[((n * C + ic) * H + ih) * W + iw] * w.data[((m * Cg + c) * KH + kh) * KW + kw];
              }
            }
          }
          if (bias) acc += bias->data[m];
          y.data[((n * M + m) * OH + oh) * OW + ow] = acc;
        }
      }
    }
  }
  return y;
}

template <class T>
BasicTensor<T> conv_transpose2d(const BasicTensor<T>& x, const Tensor& w, const Tensor* bias,
                                const WindowParams& p, const Shape& out) {
  const auto N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
  const auto Mg = w.shape[1], KH = w.shape[2], KW = w.shape[3];
  const auto M = out[1], OH = out[2], OW = out[3];
  const auto Cg = C / p.group;
  BasicTensor<T> y(out);
  for (std::int64_t n = 0; n < N; ++n) {
    for (std::int64_t ic = 0; ic < C; ++ic) {
      const auto g = ic / Cg;
      for (std::int64_t ih = 0; ih < H; ++ih) {
        for (std::int64_t iw = 0; iw < W; ++iw) {
          const T& xv = x.data[((n * C + ic) * H + ih) * W + iw];
          for (std::int64_t m = 0; m < Mg; ++m) {
            const auto om = g * Mg + m;
            for (std::int64_t kh = 0; kh < KH; ++kh) {
              const auto oh = ih * p.sh - p.pt + kh * p.dh;
              if (oh < 0 || oh >= OH) continue;
              for (std::int64_t kw = 0; kw < KW; ++kw) {
                const auto ow = iw * p.sw - p.pl + kw * p.dw;
                if (ow < 0 || ow >= OW) continue;
                y.data[((n * M + om) * OH + oh) * OW + ow] += xv * w.data[((ic * Mg + m) * KH + kh) * KW + kw];
              }
            }
          }
        }
      }
    }
  }
  if (bias) {
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t m = 0; m < M; ++m)
        for (std::int64_t i = 0; i < OH * OW; ++i) y.data[(n * M + m) * OH * OW + i] += bias->data[m];
  }
  return y;
}

/// alpha * op(A) * op(B) + beta * C, with exactly one of A, B non-double for
/// affine evaluation.
template <class R, class TA, class TB>
BasicTensor<R> gemm(const BasicTensor<TA>& a, const BasicTensor<TB>& b, const Tensor* c, const GemmParams& g,
                    const Shape& out) {
  const auto M = out[0], Nn = out[1];
  const auto K = g.trans_a ? a.shape[0] : a.shape[1];
  auto at = [&](std::int64_t i, std::int64_t k) -> const TA& {
    return g.trans_a ? a.data[k * a.shape[1] + i] : a.data[i * a.shape[1] + k];
  };
  auto bt = [&](std::int64_t k, std::int64_t j) -> const TB& {
    return g.trans_b ? b.data[j * b.shape[1] + k] : b.data[k * b.shape[1] + j];
  };
  BasicTensor<R> y(out);
  for (std::int64_t i = 0; i < M; ++i) {
    for (std::int64_t j = 0; j < Nn; ++j) {
      R acc{};
      for (std::int64_t k = 0; k < K; ++k) acc += at(i, k) * bt(k, j);
      y.data[i * Nn + j] = acc * g.alpha;
    }
  }
  if (c) {
    const auto offs = broadcast_offsets(c->shape, out);
    for (std::size_t i = 0; i < y.data.size(); ++i) y.data[i] += g.beta * c->data[offs[i]];
  }
  return y;
}

template <class R, class TA, class TB>
BasicTensor<R> matmul(const BasicTensor<TA>& a, const BasicTensor<TB>& b, const Shape& out) {
  const std::size_t r = out.size();
  const auto M = out[r - 2], Nn = out[r - 1];
  const auto K = a.shape[a.rank() - 1];
  Shape batch(out.begin(), out.end() - 2);
  Shape ba(a.shape.begin(), a.shape.end() - 2), bb(b.shape.begin(), b.shape.end() - 2);
  const auto oa = broadcast_offsets(ba, batch);
  const auto ob = broadcast_offsets(bb, batch);
  BasicTensor<R> y(out);
  for (std::size_t bi = 0; bi < oa.size(); ++bi) {
    const auto a0 = oa[bi] * M * K, b0 = ob[bi] * K * Nn, y0 = bi * M * Nn;
    for (std::int64_t i = 0; i < M; ++i) {
      for (std::int64_t j = 0; j < Nn; ++j) {
        R acc{};
        for (std::int64_t k = 0; k < K; ++k) acc += a.data[a0 + i * K + k] * b.data[b0 + k * Nn + j];
        y.data[y0 + i * Nn + j] = acc;
      }
    }
  }
  return y;
}

/// Calls f(out_flat, window) for each pooling output; `window` lists the flat
/// input offsets of the in-bounds positions, in row-major kernel order.
template <class F>
void for_each_pool_window(const Shape& in, const WindowParams& p, const Shape& out, F&& f) {
  const auto N = in[0], C = in[1], H = in[2], W = in[3];
  const auto OH = out[2], OW = out[3];
  std::vector<std::size_t> window;
  window.reserve(static_cast<std::size_t>(p.kh * p.kw));
  for (std::int64_t nc = 0; nc < N * C; ++nc) {
    for (std::int64_t oh = 0; oh < OH; ++oh) {
      for (std::int64_t ow = 0; ow < OW; ++ow) {
        window.clear();
        for (std::int64_t kh = 0; kh < p.kh; ++kh) {
          const auto ih = oh * p.sh - p.pt + kh * p.dh;
          if (ih < 0 || ih >= H) continue;
          for (std::int64_t kw = 0; kw < p.kw; ++kw) {
            const auto iw = ow * p.sw - p.pl + kw * p.dw;
            if (iw < 0 || iw >= W) continue;
            window.push_back(static_cast<std::size_t>((nc * H + ih) * W + iw));
          }
        }
        f(static_cast<std::size_t>((nc * OH + oh) * OW + ow), window);
      }
    }
  }
}

template <class T>
BasicTensor<T> average_pool(const BasicTensor<T>& x, const WindowParams& p, const Shape& out) {
  BasicTensor<T> y(out);
  for_each_pool_window(x.shape, p, out, [&](std::size_t o, const std::vector<std::size_t>& win) {
    T acc{};
    for (auto i : win) acc += x.data[i];
    const double count = p.count_include_pad ? static_cast<double>(p.kh * p.kw) : static_cast<double>(win.size());
    y.data[o] = acc * (1.0 / count);
  });
  return y;
}

template <class T>
BasicTensor<T> global_average_pool(const BasicTensor<T>& x) {
  const auto NC = x.shape[0] * x.shape[1], HW = x.shape[2] * x.shape[3];
  BasicTensor<T> y(Shape{x.shape[0], x.shape[1], 1, 1});
  for (std::int64_t i = 0; i < NC; ++i) {
    T acc{};
    for (std::int64_t k = 0; k < HW; ++k) acc += x.data[i * HW + k];
    y.data[i] = acc * (1.0 / static_cast<double>(HW));
  }
  return y;
}

template <class T>
BasicTensor<T> batch_norm(const BasicTensor<T>& x, const Tensor& scale, const Tensor& shift, const Tensor& mean,
                          const Tensor& var, double eps) {
  const auto C = x.shape[1];
  std::int64_t inner = 1;
  for (std::size_t i = 2; i < x.rank(); ++i) inner *= x.shape[i];
  BasicTensor<T> y(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const auto c = (static_cast<std::int64_t>(i) / inner) % C;
    const double s = scale.data[c] / std::sqrt(var.data[c] + eps);
    const double t = shift.data[c] - mean.data[c] * s;
    T v = x.data[i] * s;
    v += t;
    y.data[i] = v;
  }
  return y;
}

template <class T>
BasicTensor<T> transpose(const BasicTensor<T>& x, const std::vector<std::int64_t>& perm, const Shape& out) {
  const Shape in_strides = strides_of(x.shape);
  Shape src(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) src[i] = in_strides[perm[i]];
  BasicTensor<T> y(out);
  std::vector<std::int64_t> idx(out.size(), 0);
  for (std::size_t flat = 0; flat < y.size(); ++flat) {
    std::int64_t off = 0;
    for (std::size_t d = 0; d < idx.size(); ++d) off += idx[d] * src[d];
    y.data[flat] = x.data[off];
    for (std::size_t d = idx.size(); d-- > 0;) {
      if (++idx[d] < out[d]) break;
      idx[d] = 0;
    }
  }
  return y;
}

template <class T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, std::int64_t axis, const Shape& out) {
  std::int64_t outer = 1, inner = 1;
  for (std::int64_t d = 0; d < axis; ++d) outer *= out[d];
  for (std::size_t d = axis + 1; d < out.size(); ++d) inner *= out[d];
  BasicTensor<T> y;
  y.shape = out;
  y.data.reserve(static_cast<std::size_t>(numel(out)));
  for (std::int64_t o = 0; o < outer; ++o) {
    for (const auto& p : parts) {
      const auto chunk = p.shape[axis] * inner;
      y.data.insert(y.data.end(), p.data.begin() + o * chunk, p.data.begin() + (o + 1) * chunk);
    }
  }
  return y;
}

template <class T>
BasicTensor<T> slice(const BasicTensor<T>& x, const SliceSpec& s, const Shape& out) {
  const Shape st = strides_of(x.shape);
  BasicTensor<T> y(out);
  std::vector<std::int64_t> idx(out.size(), 0);
  for (std::size_t flat = 0; flat < y.size(); ++flat) {
    std::int64_t off = 0;
    for (std::size_t d = 0; d < idx.size(); ++d) off += (s.start[d] + idx[d] * s.step[d]) * st[d];
    y.data[flat] = x.data[off];
    for (std::size_t d = idx.size(); d-- > 0;) {
      if (++idx[d] < out[d]) break;
      idx[d] = 0;
    }
  }
  return y;
}

template <class T>
BasicTensor<T> upsample_nearest(const BasicTensor<T>& x, const std::vector<std::int64_t>& scales, const Shape& out) {
  const Shape st = strides_of(x.shape);
  BasicTensor<T> y(out);
  std::vector<std::int64_t> idx(out.size(), 0);
  for (std::size_t flat = 0; flat < y.size(); ++flat) {
    std::int64_t off = 0;
    for (std::size_t d = 0; d < idx.size(); ++d) off += (idx[d] / scales[d]) * st[d];
    y.data[flat] = x.data[off];
    for (std::size_t d = idx.size(); d-- > 0;) {
      if (++idx[d] < out[d]) break;
      idx[d] = 0;
    }
  }
  return y;
}

template <class T>
BasicTensor<T> scale(const BasicTensor<T>& x, double factor) {
  BasicTensor<T> y(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) y.data[i] = x.data[i] * factor;
  return y;
}

/// Operand access used by `eval_linear`. `Env` provides:
///   bool is_static(i); const Tensor& constant(i); const BasicTensor<T>& value(i);
///   const Shape& output_shape(k); StaticLookup statics().
template <class T, class Env>
std::vector<BasicTensor<T>> eval_linear(const NodeSpec& n, const Env& env) {
  const Shape& out = env.output_shape(0);
  auto lifted = [&](std::size_t i) -> BasicTensor<T> {
    if constexpr (std::is_same_v<T, double>) {
      return env.is_static(i) ? env.constant(i) : env.value(i);
    } else {
      if (env.is_static(i)) return map_tensor<T>(env.constant(i), [](double v) { return T(v); });
      return env.value(i);
    }
  };
  switch (n.op) {
    case OpType::Conv: {
      const auto& w = env.constant(1);
      const auto p = window_params(n, std::make_pair(w.shape[2], w.shape[3]));
      return {conv2d(env.value(0), w, n.has_input(2) ? &env.constant(2) : nullptr, p, out)};
    }
    case OpType::ConvTranspose: {
      const auto& w = env.constant(1);
      const auto p = window_params(n, std::make_pair(w.shape[2], w.shape[3]));
      return {conv_transpose2d(env.value(0), w, n.has_input(2) ? &env.constant(2) : nullptr, p, out)};
    }
    case OpType::Gemm: {
      const Tensor* c = n.has_input(2) ? &env.constant(2) : nullptr;
      const auto g = gemm_params(n);
      if (!env.is_static(0)) return {gemm<T>(env.value(0), env.constant(1), c, g, out)};
      return {gemm<T>(env.constant(0), env.value(1), c, g, out)};
    }
    case OpType::MatMul:
      if (!env.is_static(0)) return {matmul<T>(env.value(0), env.constant(1), out)};
      return {matmul<T>(env.constant(0), env.value(1), out)};
    case OpType::Add:
    case OpType::Sub: {
      const double sign = n.op == OpType::Add ? 1.0 : -1.0;
      auto combine = [sign](const auto& x, const auto& y) {
        T r = T{} + x;
        r += y * sign;
        return r;
      };
      if (env.is_static(0)) return {broadcast_binary<T>(env.constant(0), env.value(1), out, combine)};
      if (env.is_static(1)) return {broadcast_binary<T>(env.value(0), env.constant(1), out, combine)};
      return {broadcast_binary<T>(env.value(0), env.value(1), out, combine)};
    }
    case OpType::Neg:
      return {scale(env.value(0), -1.0)};
    case OpType::MulScalar:
      return {scale(env.value(0), attr::get_float(n, "scale", 1.0))};
    case OpType::AveragePool:
      return {average_pool(env.value(0), window_params(n, std::nullopt), out)};
    case OpType::GlobalAveragePool:
      return {global_average_pool(env.value(0))};
    case OpType::BatchNormalization:
      return {batch_norm(env.value(0), env.constant(1), env.constant(2), env.constant(3), env.constant(4),
                         attr::get_float(n, "epsilon", 1e-5))};
    case OpType::Flatten:
    case OpType::Reshape: {
      BasicTensor<T> y = env.value(0);
      y.shape = out;
      return {y};
    }
    case OpType::Transpose:
      return {transpose(env.value(0), transpose_perm(n, env.value(0).rank()), out)};
    case OpType::Concat: {
      std::vector<BasicTensor<T>> parts;
      for (std::size_t i = 0; i < n.inputs.size(); ++i) parts.push_back(lifted(i));
      return {concat(parts, normalize_axis(n, attr::get_int(n, "axis", 0), out.size()), out)};
    }
    case OpType::Slice:
      return {slice(env.value(0), slice_spec(n, env.value(0).shape, env.statics()), out)};
    case OpType::UpsampleNearest:
      return {upsample_nearest(env.value(0), upsample_scales(n, out.size()), out)};
    default:
      break;
  }
  throw Error(ErrorKind::InternalInconsistency, n.name + ": not a linear operator");
}

/// Plain evaluation of any registered op on concrete values. When
/// `signature` is given, piecewise ops append their branch choices (ReLU-type
/// sign bits, MaxPool argmax window positions).
template <class Env>
std::vector<Tensor> eval_concrete(const NodeSpec& n, const Env& env, std::vector<int>* signature = nullptr) {
  auto record = [&](int v) {
    if (signature) signature->push_back(v);
  };
  switch (n.op) {
    case OpType::Relu:
      return {map_tensor<double>(env.value(0), [&](double v) {
        record(v > 0.0);
        return v > 0.0 ? v : 0.0;
      })};
    case OpType::LeakyRelu: {
      const double alpha = attr::get_float(n, "alpha", 0.01);
      return {map_tensor<double>(env.value(0), [&](double v) {
        record(v > 0.0);
        return v > 0.0 ? v : alpha * v;
      })};
    }
    case OpType::Abs:
      return {map_tensor<double>(env.value(0), [&](double v) {
        record(v > 0.0);
        return v > 0.0 ? v : -v;
      })};
    case OpType::Sigmoid:
      return {map_tensor<double>(env.value(0), [](double v) { return 1.0 / (1.0 + std::exp(-v)); })};
    case OpType::MaxPool: {
      const auto& x = env.value(0);
      const auto& out = env.output_shape(0);
      Tensor y(out);
      for_each_pool_window(x.shape, window_params(n, std::nullopt), out,
                           [&](std::size_t o, const std::vector<std::size_t>& win) {
                             std::size_t best = 0;
                             for (std::size_t k = 1; k < win.size(); ++k)
                               if (x.data[win[k]] > x.data[win[best]]) best = k;
                             record(static_cast<int>(best));
                             y.data[o] = x.data[win[best]];
                           });
      return {y};
    }
    default:
      return eval_linear<double>(n, env);
  }
}

}  // namespace siglass::kernels
