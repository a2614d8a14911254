#pragma once

#include <Eigen/Dense>
#include <functional>
#include <string>
#include <vector>

#include "mdseg/errors.hpp"
#include "mdseg/mathutil.hpp"
#include "mdseg/tensor.hpp"

namespace mdseg {

/// Reverse-mode tape over dense tensors. Primitives append one node per
/// application; backward replays nodes in reverse creation order (a valid
/// reverse-topological order) exactly once per call. Gradients accumulate
/// into the tape slots; callers harvest them afterwards.
template <class S>
class Tape {
 public:
  using Id = int32_t;

  struct Slot {
    Tensor<S> value;
    Tensor<S> grad;  // allocated on demand, zeroed at each backward()
    bool needs_grad = false;
  };

  bool check_finite = true;

  Id input(Tensor<S> value, bool needs_grad) {
    slots_.push_back(Slot{std::move(value), {}, needs_grad});
    return static_cast<Id>(slots_.size() - 1);
  }

  const Tensor<S>& value(Id id) const { return slots_[static_cast<size_t>(id)].value; }
  bool needs_grad(Id id) const { return slots_[static_cast<size_t>(id)].needs_grad; }

  Tensor<S>& grad(Id id) {
    Slot& s = slots_[static_cast<size_t>(id)];
    if (s.grad.shape.empty()) s.grad = Tensor<S>(s.value.shape);
    return s.grad;
  }

  /// Record a primitive application. `bw` receives the tape and the output id
  /// and must accumulate (+=) into the parents' grad buffers.
  Id emit(const char* kind, Tensor<S> out, const std::vector<Id>& parents,
          std::function<void(Tape&, Id)> bw) {
    bool ng = false;
    for (Id p : parents) ng = ng || slots_[static_cast<size_t>(p)].needs_grad;
    if (check_finite && !all_finite(out))
      throw std::runtime_error(std::string("non-finite values after primitive '") + kind + "'");
    slots_.push_back(Slot{std::move(out), {}, ng});
    const Id id = static_cast<Id>(slots_.size() - 1);
    nodes_.push_back(Node{id, std::move(bw), ng, kind, parents});
    return id;
  }

  /// Visits recorded applications in creation (topological) order:
  /// fn(kind, parent ids, output id).
  template <class Fn>
  void visit_nodes(Fn&& fn) const {
    for (const auto& n : nodes_) fn(n.kind, n.parents, n.out);
  }

  /// Seeds `root` with `seed` and propagates to all inputs. Each call zeroes
  /// the internal grad buffers first, so repeated calls are independent; the
  /// caller decides whether harvested gradients accumulate.
  void backward(Id root, const Tensor<S>& seed) {
    if (!value(root).same_shape(seed)) throw std::invalid_argument("backward: seed shape mismatch");
    for (auto& s : slots_)
      if (!s.grad.shape.empty()) s.grad.fill(S(0));
    grad(root) = seed;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (!it->needs_grad) continue;
      Slot& out = slots_[static_cast<size_t>(it->out)];
      if (out.grad.shape.empty()) continue;  // never influenced the root
      it->bw(*this, it->out);
    }
  }

  size_t num_nodes() const { return nodes_.size(); }

 private:
  struct Node {
    Id out;
    std::function<void(Tape&, Id)> bw;
    bool needs_grad;
    const char* kind;
    std::vector<Id> parents;
  };
  std::vector<Slot> slots_;
  std::vector<Node> nodes_;
};

namespace detail {

template <class S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline int64_t conv_out_extent(int64_t d, int k, int stride) {
  const int64_t pad = (k - 1) / 2;
  return (d + 2 * pad - k) / stride + 1;
}

/// Unfolds x [Ci,X,Y,Z] into [Ci*k^3, Xo*Yo*Zo] with zero padding.
template <class S>
void im2col(const Tensor<S>& x, int k, int stride, RowMat<S>& cols) {
  const int64_t Ci = x.shape[0], X = x.shape[1], Y = x.shape[2], Z = x.shape[3];
  const int64_t Xo = conv_out_extent(X, k, stride), Yo = conv_out_extent(Y, k, stride),
                Zo = conv_out_extent(Z, k, stride);
  const int64_t pad = (k - 1) / 2, vox = Xo * Yo * Zo;
  cols.resize(Ci * k * k * k, vox);
  const S* xd = x.ptr();
  for (int64_t ci = 0; ci < Ci; ++ci)
    for (int kx = 0; kx < k; ++kx)
      for (int ky = 0; ky < k; ++ky)
        for (int kz = 0; kz < k; ++kz) {
          S* row = cols.data() + (((ci * k + kx) * k + ky) * k + kz) * vox;
          for (int64_t xo = 0; xo < Xo; ++xo) {
            const int64_t xi = xo * stride + kx - pad;
            for (int64_t yo = 0; yo < Yo; ++yo) {
              const int64_t yi = yo * stride + ky - pad;
              S* dst = row + (xo * Yo + yo) * Zo;
              if (xi < 0 || xi >= X || yi < 0 || yi >= Y) {
                for (int64_t zo = 0; zo < Zo; ++zo) dst[zo] = S(0);
                continue;
              }
              const S* src = xd + ((ci * X + xi) * Y + yi) * Z;
              for (int64_t zo = 0; zo < Zo; ++zo) {
                const int64_t zi = zo * stride + kz - pad;
                dst[zo] = (zi >= 0 && zi < Z) ? src[zi] : S(0);
              }
            }
          }
        }
}

/// Scatter-add of the unfolded gradient back onto dx (transpose of im2col).
template <class S>
void col2im_add(const RowMat<S>& cols, int k, int stride, Tensor<S>& dx) {
  const int64_t Ci = dx.shape[0], X = dx.shape[1], Y = dx.shape[2], Z = dx.shape[3];
  const int64_t Xo = conv_out_extent(X, k, stride), Yo = conv_out_extent(Y, k, stride),
                Zo = conv_out_extent(Z, k, stride);
  const int64_t pad = (k - 1) / 2, vox = Xo * Yo * Zo;
  S* xd = dx.ptr();
  for (int64_t ci = 0; ci < Ci; ++ci)
    for (int kx = 0; kx < k; ++kx)
      for (int ky = 0; ky < k; ++ky)
        for (int kz = 0; kz < k; ++kz) {
          const S* row = cols.data() + (((ci * k + kx) * k + ky) * k + kz) * vox;
          for (int64_t xo = 0; xo < Xo; ++xo) {
            const int64_t xi = xo * stride + kx - pad;
            if (xi < 0 || xi >= X) continue;
            for (int64_t yo = 0; yo < Yo; ++yo) {
              const int64_t yi = yo * stride + ky - pad;
              if (yi < 0 || yi >= Y) continue;
              const S* src = row + (xo * Yo + yo) * Zo;
              S* dst = xd + ((ci * X + xi) * Y + yi) * Z;
              for (int64_t zo = 0; zo < Zo; ++zo) {
                const int64_t zi = zo * stride + kz - pad;
                if (zi >= 0 && zi < Z) dst[zi] += src[zo];
              }
            }
          }
        }
}

}  // namespace detail

/// 3-D convolution, odd kernel, stride 1 (size-preserving zero padding) or 2.
/// x: [Ci,X,Y,Z], w: [Co,Ci,k,k,k], b: [Co] -> [Co,Xo,Yo,Zo].
template <class S>
typename Tape<S>::Id conv3d(Tape<S>& tape, typename Tape<S>::Id x_id,
                            typename Tape<S>::Id w_id, typename Tape<S>::Id b_id, int stride) {
  using detail::RowMat;
  const Tensor<S>& x = tape.value(x_id);
  const Tensor<S>& w = tape.value(w_id);
  const Tensor<S>& b = tape.value(b_id);
  if (x.rank() != 4 || w.rank() != 5) throw std::invalid_argument("conv3d: bad ranks");
  const int k = static_cast<int>(w.shape[2]);
  if (k % 2 == 0 || w.shape[3] != k || w.shape[4] != k)
    throw std::invalid_argument("conv3d: kernel must be cubic and odd");
  if (stride != 1 && stride != 2) throw std::invalid_argument("conv3d: stride must be 1 or 2");
  if (w.shape[1] != x.shape[0]) throw std::invalid_argument("conv3d: channel mismatch");
  if (b.shape != std::vector<int64_t>{w.shape[0]})
    throw std::invalid_argument("conv3d: bias shape mismatch");

  const int64_t Co = w.shape[0], Ci = x.shape[0];
  const int64_t Xo = detail::conv_out_extent(x.shape[1], k, stride),
                Yo = detail::conv_out_extent(x.shape[2], k, stride),
                Zo = detail::conv_out_extent(x.shape[3], k, stride);
  const int64_t vox = Xo * Yo * Zo;

  Tensor<S> out({Co, Xo, Yo, Zo});
  Eigen::Map<RowMat<S>> O(out.ptr(), Co, vox);
  Eigen::Map<const RowMat<S>> W(w.ptr(), Co, Ci * k * k * k);
  if (k == 1 && stride == 1) {
    Eigen::Map<const RowMat<S>> X(x.ptr(), Ci, vox);
    O.noalias() = W * X;
  } else {
    RowMat<S> cols;
    detail::im2col(x, k, stride, cols);
    O.noalias() = W * cols;
  }
  for (int64_t co = 0; co < Co; ++co) O.row(co).array() += b[co];

  auto bw = [x_id, w_id, b_id, k, stride, Co, Ci, vox](Tape<S>& t, typename Tape<S>::Id out_id) {
    using detail::RowMat;
    const Tensor<S>& g = t.grad(out_id);
    Eigen::Map<const RowMat<S>> dO(g.ptr(), Co, vox);
    const Tensor<S>& xv = t.value(x_id);
    if (t.needs_grad(b_id)) {
      Tensor<S>& db = t.grad(b_id);
      for (int64_t co = 0; co < Co; ++co) db[co] += dO.row(co).sum();
    }
    if (k == 1 && stride == 1) {
      Eigen::Map<const RowMat<S>> X(xv.ptr(), Ci, vox);
      if (t.needs_grad(w_id)) {
        Eigen::Map<RowMat<S>> dW(t.grad(w_id).ptr(), Co, Ci);
        dW.noalias() += dO * X.transpose();
      }
      if (t.needs_grad(x_id)) {
        Eigen::Map<const RowMat<S>> W(t.value(w_id).ptr(), Co, Ci);
        Eigen::Map<RowMat<S>> dX(t.grad(x_id).ptr(), Ci, vox);
        dX.noalias() += W.transpose() * dO;
      }
      return;
    }
    RowMat<S> cols;
    detail::im2col(xv, k, stride, cols);  // recomputed, not stored on the tape
    if (t.needs_grad(w_id)) {
      Eigen::Map<RowMat<S>> dW(t.grad(w_id).ptr(), Co, Ci * k * k * k);
      dW.noalias() += dO * cols.transpose();
    }
    if (t.needs_grad(x_id)) {
      RowMat<S> dcols(Ci * k * k * k, vox);
      Eigen::Map<const RowMat<S>> W(t.value(w_id).ptr(), Co, Ci * k * k * k);
      dcols.noalias() = W.transpose() * dO;
      detail::col2im_add(dcols, k, stride, t.grad(x_id));
    }
  };
  return tape.emit("conv3d", std::move(out), {x_id, w_id, b_id}, std::move(bw));
}

/// Nearest-neighbor ^2 upsampling of [C,X,Y,Z].
template <class S>
typename Tape<S>::Id upsample_nearest2(Tape<S>& tape, typename Tape<S>::Id x_id) {
  const Tensor<S>& x = tape.value(x_id);
  if (x.rank() != 4) throw std::invalid_argument("upsample: rank must be 4");
  const int64_t C = x.shape[0], X = x.shape[1], Y = x.shape[2], Z = x.shape[3];
  Tensor<S> out({C, 2 * X, 2 * Y, 2 * Z});
  for (int64_t c = 0; c < C; ++c)
    for (int64_t xo = 0; xo < 2 * X; ++xo)
      for (int64_t yo = 0; yo < 2 * Y; ++yo) {
        const S* src = x.ptr() + ((c * X + xo / 2) * Y + yo / 2) * Z;
        S* dst = out.ptr() + ((c * 2 * X + xo) * 2 * Y + yo) * 2 * Z;
        for (int64_t zo = 0; zo < 2 * Z; ++zo) dst[zo] = src[zo / 2];
      }
  auto bw = [x_id, C, X, Y, Z](Tape<S>& t, typename Tape<S>::Id out_id) {
    if (!t.needs_grad(x_id)) return;
    const Tensor<S>& g = t.grad(out_id);
    Tensor<S>& dx = t.grad(x_id);
    for (int64_t c = 0; c < C; ++c)
      for (int64_t xo = 0; xo < 2 * X; ++xo)
        for (int64_t yo = 0; yo < 2 * Y; ++yo) {
          const S* src = g.ptr() + ((c * 2 * X + xo) * 2 * Y + yo) * 2 * Z;
          S* dst = dx.ptr() + ((c * X + xo / 2) * Y + yo / 2) * Z;
          for (int64_t zo = 0; zo < 2 * Z; ++zo) dst[zo / 2] += src[zo];
        }
  };
  return tape.emit("upsample_nearest2", std::move(out), {x_id}, std::move(bw));
}

/// Concatenation along the channel axis of [C_i,X,Y,Z] tensors.
template <class S>
typename Tape<S>::Id concat_channels(Tape<S>& tape,
                                     const std::vector<typename Tape<S>::Id>& ids) {
  if (ids.empty()) throw std::invalid_argument("concat: empty input list");
  const auto& first = tape.value(ids[0]);
  int64_t C = 0;
  for (auto id : ids) {
    const auto& t = tape.value(id);
    if (t.rank() != 4 || t.shape[1] != first.shape[1] || t.shape[2] != first.shape[2] ||
        t.shape[3] != first.shape[3])
      throw std::invalid_argument("concat: spatial shape mismatch");
    C += t.shape[0];
  }
  Tensor<S> out({C, first.shape[1], first.shape[2], first.shape[3]});
  const int64_t spatial = first.shape[1] * first.shape[2] * first.shape[3];
  int64_t off = 0;
  for (auto id : ids) {
    const auto& t = tape.value(id);
    std::copy(t.data.begin(), t.data.end(), out.data.begin() + off * spatial);
    off += t.shape[0];
  }
  auto bw = [ids, spatial](Tape<S>& t, typename Tape<S>::Id out_id) {
    const Tensor<S>& g = t.grad(out_id);
    int64_t off = 0;
    for (auto id : ids) {
      const int64_t c = t.value(id).shape[0];
      if (t.needs_grad(id)) {
        Tensor<S>& dx = t.grad(id);
        for (int64_t i = 0; i < c * spatial; ++i) dx[i] += g[off * spatial + i];
      }
      off += c;
    }
  };
  return tape.emit("concat_channels", std::move(out), ids, std::move(bw));
}

template <class S>
typename Tape<S>::Id add(Tape<S>& tape, typename Tape<S>::Id a_id, typename Tape<S>::Id b_id) {
  const Tensor<S>& a = tape.value(a_id);
  const Tensor<S>& b = tape.value(b_id);
  if (!a.same_shape(b)) throw std::invalid_argument("add: shape mismatch");
  Tensor<S> out = a;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] += b[i];
  auto bw = [a_id, b_id](Tape<S>& t, typename Tape<S>::Id out_id) {
    const Tensor<S>& g = t.grad(out_id);
    if (t.needs_grad(a_id)) axpy(S(1), g, t.grad(a_id));
    if (t.needs_grad(b_id)) axpy(S(1), g, t.grad(b_id));
  };
  return tape.emit("add", std::move(out), {a_id, b_id}, std::move(bw));
}

template <class S>
typename Tape<S>::Id leaky_relu(Tape<S>& tape, typename Tape<S>::Id x_id, S slope) {
  const Tensor<S>& x = tape.value(x_id);
  Tensor<S> out = x;
  for (auto& v : out.data)
    if (v < S(0)) v *= slope;
  auto bw = [x_id, slope](Tape<S>& t, typename Tape<S>::Id out_id) {
    if (!t.needs_grad(x_id)) return;
    const Tensor<S>& g = t.grad(out_id);
    const Tensor<S>& xv = t.value(x_id);
    Tensor<S>& dx = t.grad(x_id);
    for (int64_t i = 0; i < g.numel(); ++i) dx[i] += (xv[i] > S(0) ? S(1) : slope) * g[i];
  };
  return tape.emit("leaky_relu", std::move(out), {x_id}, std::move(bw));
}

/// Instance normalization of [C,X,Y,Z]: per channel over the spatial axes,
/// biased variance, no learned affine.
template <class S>
typename Tape<S>::Id instance_norm(Tape<S>& tape, typename Tape<S>::Id x_id, S eps) {
  const Tensor<S>& x = tape.value(x_id);
  if (x.rank() != 4) throw std::invalid_argument("instance_norm: rank must be 4");
  const int64_t C = x.shape[0], N = x.shape[1] * x.shape[2] * x.shape[3];
  Tensor<S> out(x.shape);
  std::vector<S> mean(C), inv_std(C);
  for (int64_t c = 0; c < C; ++c) {
    const S* xc = x.ptr() + c * N;
    S mu = S(0);
    for (int64_t i = 0; i < N; ++i) mu += xc[i];
    mu /= static_cast<S>(N);
    S var = S(0);
    for (int64_t i = 0; i < N; ++i) var += (xc[i] - mu) * (xc[i] - mu);
    var /= static_cast<S>(N);
    const S inv = S(1) / std::sqrt(var + eps);
    mean[c] = mu;
    inv_std[c] = inv;
    S* oc = out.ptr() + c * N;
    for (int64_t i = 0; i < N; ++i) oc[i] = (xc[i] - mu) * inv;
  }
  auto bw = [x_id, C, N, mean, inv_std](Tape<S>& t, typename Tape<S>::Id out_id) {
    if (!t.needs_grad(x_id)) return;
    const Tensor<S>& g = t.grad(out_id);
    const Tensor<S>& xv = t.value(x_id);
    Tensor<S>& dx = t.grad(x_id);
    for (int64_t c = 0; c < C; ++c) {
      const S* xc = xv.ptr() + c * N;
      const S* gc = g.ptr() + c * N;
      S* dc = dx.ptr() + c * N;
      S sum_g = S(0), sum_gx = S(0);
      for (int64_t i = 0; i < N; ++i) {
        sum_g += gc[i];
        sum_gx += gc[i] * (xc[i] - mean[c]) * inv_std[c];
      }
      const S mg = sum_g / static_cast<S>(N), mgx = sum_gx / static_cast<S>(N);
      for (int64_t i = 0; i < N; ++i) {
        const S xh = (xc[i] - mean[c]) * inv_std[c];
        dc[i] += inv_std[c] * (gc[i] - mg - xh * mgx);
      }
    }
  };
  return tape.emit("instance_norm", std::move(out), {x_id}, std::move(bw));
}

template <class S>
typename Tape<S>::Id sigmoid(Tape<S>& tape, typename Tape<S>::Id x_id) {
  Tensor<S> out = tape.value(x_id);
  for (auto& v : out.data) v = stable_sigmoid(v);
  auto bw = [x_id](Tape<S>& t, typename Tape<S>::Id out_id) {
    if (!t.needs_grad(x_id)) return;
    const Tensor<S>& g = t.grad(out_id);
    const Tensor<S>& y = t.value(out_id);
    Tensor<S>& dx = t.grad(x_id);
    for (int64_t i = 0; i < g.numel(); ++i) dx[i] += g[i] * y[i] * (S(1) - y[i]);
  };
  return tape.emit("sigmoid", std::move(out), {x_id}, std::move(bw));
}

/// Softmax over the channel axis of [C,X,Y,Z] (baseline only).
template <class S>
typename Tape<S>::Id softmax_channels(Tape<S>& tape, typename Tape<S>::Id x_id) {
  const Tensor<S>& x = tape.value(x_id);
  if (x.rank() != 4) throw std::invalid_argument("softmax: rank must be 4");
  const int64_t C = x.shape[0], N = x.shape[1] * x.shape[2] * x.shape[3];
  Tensor<S> out(x.shape);
  for (int64_t i = 0; i < N; ++i) {
    S mx = x[i];
    for (int64_t c = 1; c < C; ++c) mx = std::max(mx, x[c * N + i]);
    S denom = S(0);
    for (int64_t c = 0; c < C; ++c) {
      const S e = std::exp(x[c * N + i] - mx);
      out[c * N + i] = e;
      denom += e;
    }
    for (int64_t c = 0; c < C; ++c) out[c * N + i] /= denom;
  }
  auto bw = [x_id, C, N](Tape<S>& t, typename Tape<S>::Id out_id) {
    if (!t.needs_grad(x_id)) return;
    const Tensor<S>& g = t.grad(out_id);
    const Tensor<S>& y = t.value(out_id);
    Tensor<S>& dx = t.grad(x_id);
    for (int64_t i = 0; i < N; ++i) {
      S dot = S(0);
      for (int64_t c = 0; c < C; ++c) dot += g[c * N + i] * y[c * N + i];
      for (int64_t c = 0; c < C; ++c)
        dx[c * N + i] += y[c * N + i] * (g[c * N + i] - dot);
    }
  };
  return tape.emit("softmax_channels", std::move(out), {x_id}, std::move(bw));
}

namespace detail {
template <class S>
void reduce_shapes(const Tensor<S>& x, const std::vector<int>& axes,
                   std::vector<int64_t>& out_shape, std::vector<bool>& reduced) {
  reduced.assign(x.shape.size(), false);
  for (int a : axes) {
    if (a < 0 || a >= x.rank()) throw std::invalid_argument("reduce: axis out of range");
    reduced[static_cast<size_t>(a)] = true;
  }
  out_shape.clear();
  for (size_t i = 0; i < x.shape.size(); ++i)
    if (!reduced[i]) out_shape.push_back(x.shape[i]);
  if (out_shape.empty()) out_shape.push_back(1);
}

template <class S>
void for_each_mapped(const Tensor<S>& x, const std::vector<bool>& reduced,
                     const std::function<void(int64_t, int64_t)>& fn) {
  const int r = x.rank();
  std::vector<int64_t> idx(static_cast<size_t>(r), 0);
  std::vector<int64_t> out_stride;
  {
    std::vector<int64_t> kept;
    for (int i = 0; i < r; ++i)
      if (!reduced[static_cast<size_t>(i)]) kept.push_back(x.shape[static_cast<size_t>(i)]);
    out_stride.assign(static_cast<size_t>(r), 0);
    int64_t stride = 1;
    for (int i = r - 1, k = static_cast<int>(kept.size()) - 1; i >= 0; --i) {
      if (!reduced[static_cast<size_t>(i)]) {
        out_stride[static_cast<size_t>(i)] = stride;
        stride *= kept[static_cast<size_t>(k--)];
      }
    }
  }
  for (int64_t lin = 0; lin < x.numel(); ++lin) {
    int64_t rem = lin, out = 0;
    for (int i = r - 1; i >= 0; --i) {
      const int64_t e = x.shape[static_cast<size_t>(i)];
      const int64_t pos = rem % e;
      rem /= e;
      out += pos * out_stride[static_cast<size_t>(i)] *
             (reduced[static_cast<size_t>(i)] ? 0 : 1);
    }
    fn(lin, out);
  }
}
}  // namespace detail

/// Sum (or mean) over the given axes; reduced axes are dropped from the shape.
template <class S>
typename Tape<S>::Id reduce(Tape<S>& tape, typename Tape<S>::Id x_id,
                            const std::vector<int>& axes, bool mean) {
  const Tensor<S>& x = tape.value(x_id);
  std::vector<int64_t> out_shape;
  std::vector<bool> reduced;
  detail::reduce_shapes(x, axes, out_shape, reduced);
  Tensor<S> out(out_shape);
  detail::for_each_mapped<S>(x, reduced, [&](int64_t in, int64_t o) { out[o] += x[in]; });
  S scale = S(1);
  if (mean) {
    int64_t n = 1;
    for (int a : axes) n *= x.shape[static_cast<size_t>(a)];
    scale = S(1) / static_cast<S>(n);
    for (auto& v : out.data) v *= scale;
  }
  auto bw = [x_id, reduced, scale](Tape<S>& t, typename Tape<S>::Id out_id) {
    if (!t.needs_grad(x_id)) return;
    const Tensor<S>& g = t.grad(out_id);
    Tensor<S>& dx = t.grad(x_id);
    detail::for_each_mapped<S>(t.value(x_id), reduced,
                               [&](int64_t in, int64_t o) { dx[in] += scale * g[o]; });
  };
  return tape.emit(mean ? "reduce_mean" : "reduce_sum", std::move(out), {x_id}, std::move(bw));
}

}  // namespace mdseg
