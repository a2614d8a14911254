#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "mdseg/autodiff.hpp"
#include "mdseg/parallel.hpp"
#include "mdseg/rng.hpp"
#include "mdseg/tensor.hpp"

namespace mdseg {

enum class NormKind { None, Instance };

struct NetConfig {
  int stages = 3;                 // >= 2 resolution levels
  int base_channels = 8;
  double channel_growth = 2.0;
  bool residual_encoder = false;
  NormKind normalization = NormKind::Instance;
  double leaky_slope = 0.01;
  int num_global_classes = 1;
  std::array<int64_t, 3> patch_shape{32, 32, 32};
  int kernel = 3;  // odd

  int channels_at(int stage) const {
    return static_cast<int>(std::lround(base_channels * std::pow(channel_growth, stage)));
  }
  /// Backbone equality; classes and patch shape may differ between a
  /// pre-training and a fine-tuning run.
  bool backbone_compatible(const NetConfig& o) const {
    return stages == o.stages && base_channels == o.base_channels &&
           channel_growth == o.channel_growth && residual_encoder == o.residual_encoder &&
           normalization == o.normalization && kernel == o.kernel;
  }
};

enum class ParamRole { Backbone, Head };

template <class S>
struct Parameter {
  std::string name;
  Tensor<S> value;
  Tensor<S> grad;
  ParamRole role = ParamRole::Backbone;
  int head_class = -1;  // global class index for Head parameters
};

/// Shared-backbone 3-D U-Net with one independent 1x1x1 sigmoid head per
/// global class. Stores pre-sigmoid logits; activations live on per-sample
/// tapes so samples never couple (instance norm is per sample).
template <class S>
class Network {
 public:
  using Id = typename Tape<S>::Id;

  struct ForwardRecord {
    std::vector<Tape<S>> tapes;                // one per batch sample
    std::vector<Id> logit_ids;
    std::vector<std::vector<Id>> param_ids;    // [sample][param]
  };

  Network() = default;

  Network(const NetConfig& cfg, uint64_t seed) : cfg_(cfg) {
    if (cfg.stages < 2) throw InputError("net: stages must be >= 2");
    if (cfg.kernel % 2 == 0) throw InputError("net: kernel must be odd");
    if (cfg.num_global_classes < 1) throw InputError("net: needs at least one class");
    const int64_t div = int64_t(1) << (cfg.stages - 1);
    for (int64_t d : cfg.patch_shape)
      if (d % div != 0)
        throw InputError("net: patch shape must be divisible by 2^(stages-1) = " +
                         std::to_string(div));
    build();
    init_parameters(seed);
  }

  const NetConfig& config() const { return cfg_; }
  std::vector<Parameter<S>>& parameters() { return params_; }
  const std::vector<Parameter<S>>& parameters() const { return params_; }

  void zero_grad() {
    for (auto& p : params_) p.grad.fill(S(0));
  }

  int64_t num_parameters() const {
    int64_t n = 0;
    for (const auto& p : params_) n += p.value.numel();
    return n;
  }

  /// batch [B,1,X,Y,Z] -> logits [B,C,X,Y,Z]. Pass a record to enable
  /// backward(). Sample tapes are independent, so `workers` only changes
  /// wall time, never values.
  Tensor<S> forward(const Tensor<S>& batch, ForwardRecord* rec = nullptr,
                    int workers = 1) const {
    if (batch.rank() != 5 || batch.shape[1] != 1)
      throw std::invalid_argument("forward: expected batch shape [B,1,X,Y,Z]");
    for (int a = 0; a < 3; ++a)
      if (batch.shape[static_cast<size_t>(2 + a)] != cfg_.patch_shape[static_cast<size_t>(a)])
        throw std::invalid_argument("forward: batch spatial shape differs from patch_shape");
    const int64_t B = batch.shape[0];
    const int64_t C = cfg_.num_global_classes;
    const int64_t X = batch.shape[2], Y = batch.shape[3], Z = batch.shape[4];
    const int64_t vox = X * Y * Z;

    ForwardRecord local;
    ForwardRecord& r = rec ? *rec : local;
    r.tapes.clear();
    r.tapes.resize(static_cast<size_t>(B));
    r.logit_ids.assign(static_cast<size_t>(B), 0);
    r.param_ids.assign(static_cast<size_t>(B), {});

    Tensor<S> logits({B, C, X, Y, Z});
    parallel_for(B, workers, [&](int64_t bi) {
      Tape<S>& tape = r.tapes[static_cast<size_t>(bi)];
      Tensor<S> x({1, X, Y, Z});
      std::copy(batch.data.begin() + bi * vox, batch.data.begin() + (bi + 1) * vox,
                x.data.begin());
      const Id x_id = tape.input(std::move(x), rec != nullptr);
      auto& pids = r.param_ids[static_cast<size_t>(bi)];
      pids.reserve(params_.size());
      for (const auto& p : params_) pids.push_back(tape.input(p.value, rec != nullptr));
      const Id out = forward_sample(tape, x_id, pids);
      r.logit_ids[static_cast<size_t>(bi)] = out;
      const Tensor<S>& lv = tape.value(out);
      std::copy(lv.data.begin(), lv.data.end(), logits.data.begin() + bi * C * vox);
    });
    return logits;
  }

  /// Accumulates dL/dparam into each Parameter::grad (callers clear with
  /// zero_grad). Per-sample contributions are summed in sample order.
  void backward(ForwardRecord& rec, const Tensor<S>& logits_grad, int workers = 1) {
    const int64_t B = static_cast<int64_t>(rec.tapes.size());
    if (logits_grad.rank() != 5 || logits_grad.shape[0] != B)
      throw std::invalid_argument("backward: gradient/tape mismatch");
    const int64_t per = logits_grad.numel() / B;
    parallel_for(B, workers, [&](int64_t bi) {
      Tape<S>& tape = rec.tapes[static_cast<size_t>(bi)];
      const Id out = rec.logit_ids[static_cast<size_t>(bi)];
      Tensor<S> seed(tape.value(out).shape);
      if (seed.numel() != per) throw std::invalid_argument("backward: gradient shape mismatch");
      std::copy(logits_grad.data.begin() + bi * per, logits_grad.data.begin() + (bi + 1) * per,
                seed.data.begin());
      tape.backward(out, seed);
    });
    for (int64_t bi = 0; bi < B; ++bi) {
      Tape<S>& tape = rec.tapes[static_cast<size_t>(bi)];
      const auto& pids = rec.param_ids[static_cast<size_t>(bi)];
      for (size_t pi = 0; pi < params_.size(); ++pi)
        axpy(S(1), tape.grad(pids[pi]), params_[pi].grad);
    }
  }

  /// Gradient of the scalar objective w.r.t. the batch input, available after
  /// backward(); used by gradient checking.
  Tensor<S> input_gradient(ForwardRecord& rec) const {
    const int64_t B = static_cast<int64_t>(rec.tapes.size());
    const int64_t X = cfg_.patch_shape[0], Y = cfg_.patch_shape[1], Z = cfg_.patch_shape[2];
    Tensor<S> g({B, 1, X, Y, Z});
    for (int64_t bi = 0; bi < B; ++bi) {
      const Tensor<S>& gx = rec.tapes[static_cast<size_t>(bi)].grad(0);
      std::copy(gx.data.begin(), gx.data.end(), g.data.begin() + bi * X * Y * Z);
    }
    return g;
  }

  template <class Other>
  Network<Other> cast() const {
    Network<Other> out;
    out.cfg_ = cfg_;
    out.enc_blocks_ = enc_blocks_;
    out.downs_ = downs_;
    out.dec_blocks_ = dec_blocks_;
    out.heads_ = heads_;
    out.params_.reserve(params_.size());
    for (const auto& p : params_) {
      Parameter<Other> q;
      q.name = p.name;
      q.value = p.value.template cast<Other>();
      q.grad = Tensor<Other>(p.value.shape);
      q.role = p.role;
      q.head_class = p.head_class;
      out.params_.push_back(std::move(q));
    }
    return out;
  }

 private:
  template <class>
  friend class Network;

  struct ConvRef {
    int w = -1, b = -1;
    int stride = 1;
  };
  struct BlockRef {
    ConvRef a, b, proj;
    bool residual = false;
    bool has_proj = false;
  };

  NetConfig cfg_;
  std::vector<Parameter<S>> params_;
  std::vector<BlockRef> enc_blocks_;
  std::vector<ConvRef> downs_;
  std::vector<BlockRef> dec_blocks_;  // index i = decoder level i
  std::vector<ConvRef> heads_;

  ConvRef add_conv(const std::string& name, int ci, int co, int k, int stride, ParamRole role,
                   int head_class) {
    ConvRef ref;
    ref.stride = stride;
    Parameter<S> w;
    w.name = name + ".w";
    w.value = Tensor<S>({co, ci, k, k, k});
    w.grad = Tensor<S>(w.value.shape);
    w.role = role;
    w.head_class = head_class;
    params_.push_back(std::move(w));
    ref.w = static_cast<int>(params_.size() - 1);
    Parameter<S> b;
    b.name = name + ".b";
    b.value = Tensor<S>({co});
    b.grad = Tensor<S>(b.value.shape);
    b.role = role;
    b.head_class = head_class;
    params_.push_back(std::move(b));
    ref.b = static_cast<int>(params_.size() - 1);
    return ref;
  }

  void build() {
    const int k = cfg_.kernel;
    for (int i = 0; i < cfg_.stages; ++i) {
      const int ch = cfg_.channels_at(i);
      if (i > 0) {
        const int prev = cfg_.channels_at(i - 1);
        downs_.push_back(add_conv("enc" + std::to_string(i) + ".down", prev, ch, k, 2,
                                  ParamRole::Backbone, -1));
      }
      const int in_ch = i == 0 ? 1 : ch;
      BlockRef blk;
      blk.residual = cfg_.residual_encoder;
      const std::string base = "enc" + std::to_string(i);
      blk.a = add_conv(base + ".conv_a", in_ch, ch, k, 1, ParamRole::Backbone, -1);
      blk.b = add_conv(base + ".conv_b", ch, ch, k, 1, ParamRole::Backbone, -1);
      if (blk.residual && in_ch != ch) {
        blk.proj = add_conv(base + ".proj", in_ch, ch, 1, 1, ParamRole::Backbone, -1);
        blk.has_proj = true;
      }
      enc_blocks_.push_back(blk);
    }
    dec_blocks_.resize(static_cast<size_t>(cfg_.stages - 1));
    for (int i = cfg_.stages - 2; i >= 0; --i) {
      const int ch = cfg_.channels_at(i);
      const int above = cfg_.channels_at(i + 1);
      BlockRef blk;
      const std::string base = "dec" + std::to_string(i);
      blk.a = add_conv(base + ".conv_a", above + ch, ch, k, 1, ParamRole::Backbone, -1);
      blk.b = add_conv(base + ".conv_b", ch, ch, k, 1, ParamRole::Backbone, -1);
      dec_blocks_[static_cast<size_t>(i)] = blk;
    }
    for (int c = 0; c < cfg_.num_global_classes; ++c)
      heads_.push_back(add_conv("head" + std::to_string(c), cfg_.base_channels, 1, 1, 1,
                                ParamRole::Head, c));
  }

  void init_parameters(uint64_t seed) {
    Rng rng = Rng::derive({seed, 0x1217ull});
    for (auto& p : params_) {
      if (p.value.rank() == 5) {
        const int64_t fan_in = p.value.shape[1] * p.value.shape[2] * p.value.shape[3] *
                               p.value.shape[4];
        const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
        for (auto& v : p.value.data) v = static_cast<S>(rng.uniform(-bound, bound));
      } else {
        p.value.fill(S(0));
      }
    }
  }

  Id apply_norm_act(Tape<S>& tape, Id h) const {
    if (cfg_.normalization == NormKind::Instance) h = instance_norm(tape, h, S(1e-5));
    return leaky_relu(tape, h, static_cast<S>(cfg_.leaky_slope));
  }

  Id apply_block(Tape<S>& tape, Id x, const BlockRef& blk, const std::vector<Id>& pids) const {
    const auto conv = [&](Id in, const ConvRef& c) {
      return conv3d(tape, in, pids[static_cast<size_t>(c.w)], pids[static_cast<size_t>(c.b)],
                    c.stride);
    };
    if (!blk.residual) {
      Id h = apply_norm_act(tape, conv(x, blk.a));
      return apply_norm_act(tape, conv(h, blk.b));
    }
    Id t = apply_norm_act(tape, conv(x, blk.a));
    t = conv(t, blk.b);
    if (cfg_.normalization == NormKind::Instance) t = instance_norm(tape, t, S(1e-5));
    const Id skip = blk.has_proj ? conv(x, blk.proj) : x;
    return leaky_relu(tape, add(tape, t, skip), static_cast<S>(cfg_.leaky_slope));
  }

  Id forward_sample(Tape<S>& tape, Id x, const std::vector<Id>& pids) const {
    const auto conv = [&](Id in, const ConvRef& c) {
      return conv3d(tape, in, pids[static_cast<size_t>(c.w)], pids[static_cast<size_t>(c.b)],
                    c.stride);
    };
    std::vector<Id> skips;
    Id h = x;
    for (int i = 0; i < cfg_.stages; ++i) {
      if (i > 0) h = conv(h, downs_[static_cast<size_t>(i - 1)]);
      h = apply_block(tape, h, enc_blocks_[static_cast<size_t>(i)], pids);
      if (i < cfg_.stages - 1) skips.push_back(h);
    }
    for (int i = cfg_.stages - 2; i >= 0; --i) {
      h = upsample_nearest2(tape, h);
      h = concat_channels(tape, {h, skips[static_cast<size_t>(i)]});
      const BlockRef& blk = dec_blocks_[static_cast<size_t>(i)];
      h = apply_norm_act(tape, conv(h, blk.a));
      h = apply_norm_act(tape, conv(h, blk.b));
    }
    std::vector<Id> head_logits;
    head_logits.reserve(heads_.size());
    for (const auto& hd : heads_) head_logits.push_back(conv(h, hd));
    return head_logits.size() == 1 ? head_logits[0] : concat_channels(tape, head_logits);
  }
};

using Networkf = Network<float>;
using Networkd = Network<double>;

}  // namespace mdseg
