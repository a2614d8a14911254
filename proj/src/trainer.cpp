#include "mdseg/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <map>

#include "mdseg/errors.hpp"
#include "mdseg/fmt.hpp"
#include "mdseg/parallel.hpp"

namespace mdseg {

using nlohmann::json;

TrainConfig train_config_from_json(const json& j) {
  TrainConfig cfg;
  cfg.batch_size = j.value("batch_size", cfg.batch_size);
  cfg.epochs = j.value("epochs", cfg.epochs);
  cfg.iterations_per_epoch = j.value("iterations_per_epoch", cfg.iterations_per_epoch);
  cfg.momentum = j.value("momentum", cfg.momentum);
  cfg.clip_norm = j.value("clip_norm", cfg.clip_norm);
  cfg.seed = j.value("seed", cfg.seed);
  cfg.fg_bias = j.value("fg_bias", cfg.fg_bias);
  cfg.workers = j.value("workers", cfg.workers);
  if (j.contains("net")) cfg.net = net_config_from_json(j.at("net"));
  if (j.contains("schedule")) {
    const auto& js = j.at("schedule");
    if (js.contains("mode")) {
      const std::string m = js.at("mode").get<std::string>();
      if (m == "standard")
        cfg.schedule.mode = ScheduleSpec::Mode::Standard;
      else if (m == "finetune")
        cfg.schedule.mode = ScheduleSpec::Mode::Finetune;
      else
        throw InputError("train config: unknown schedule mode '" + m + "'");
    }
    cfg.schedule.base_lr = js.value("base_lr", cfg.schedule.base_lr);
    cfg.schedule.head_warmup_epochs =
        js.value("head_warmup_epochs", cfg.schedule.head_warmup_epochs);
    cfg.schedule.full_warmup_epochs =
        js.value("full_warmup_epochs", cfg.schedule.full_warmup_epochs);
    cfg.schedule.poly_exponent = js.value("poly_exponent", cfg.schedule.poly_exponent);
  }
  if (j.contains("loss")) {
    const auto& jl = j.at("loss");
    cfg.loss.dice_smooth = jl.value("dice_smooth", cfg.loss.dice_smooth);
    cfg.loss.dice_eps = jl.value("dice_eps", cfg.loss.dice_eps);
    cfg.loss.bce_literal_norm = jl.value("bce_literal_norm", cfg.loss.bce_literal_norm);
  }
  if (cfg.batch_size < 1 || cfg.epochs < 1 || cfg.iterations_per_epoch < 1)
    throw InputError("train config: batch_size, epochs, iterations_per_epoch must be >= 1");
  if (!(cfg.clip_norm > 0) || !std::isfinite(cfg.clip_norm))
    throw InputError("train config: clip_norm must be positive and finite");
  return cfg;
}

json train_config_to_json(const TrainConfig& cfg) {
  json j;
  j["batch_size"] = cfg.batch_size;
  j["epochs"] = cfg.epochs;
  j["iterations_per_epoch"] = cfg.iterations_per_epoch;
  j["momentum"] = cfg.momentum;
  j["clip_norm"] = cfg.clip_norm;
  j["seed"] = cfg.seed;
  j["fg_bias"] = cfg.fg_bias;
  j["workers"] = cfg.workers;
  j["net"] = net_config_to_json(cfg.net);
  json js;
  js["mode"] = cfg.schedule.mode == ScheduleSpec::Mode::Standard ? "standard" : "finetune";
  js["base_lr"] = cfg.schedule.base_lr;
  js["total_epochs"] = cfg.schedule.total_epochs;
  js["head_warmup_epochs"] = cfg.schedule.head_warmup_epochs;
  js["full_warmup_epochs"] = cfg.schedule.full_warmup_epochs;
  js["poly_exponent"] = cfg.schedule.poly_exponent;
  j["schedule"] = js;
  json jl;
  jl["dice_smooth"] = cfg.loss.dice_smooth;
  jl["dice_eps"] = cfg.loss.dice_eps;
  jl["bce_literal_norm"] = cfg.loss.bce_literal_norm;
  j["loss"] = jl;
  return j;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw InputError("train config: cannot open " + path.string());
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw InputError("train config: invalid JSON: " + std::string(e.what()));
  }
  return train_config_from_json(j);
}

void TrainLog::write_csv(const std::filesystem::path& path) const {
  std::ofstream os(path);
  if (!os) throw InputError("train log: cannot write " + path.string());
  os << "epoch,iter,loss_total,loss_bce,loss_dice,lr_backbone,lr_heads,gnorm_pre,gnorm_post,"
        "seconds\n";
  for (const auto& r : rows) {
    os << r.epoch << ',' << r.iter << ',' << format_double(r.loss_total) << ','
       << format_double(r.loss_bce) << ',' << format_double(r.loss_dice) << ','
       << format_double(r.lr_backbone) << ',' << format_double(r.lr_heads) << ','
       << format_double(r.gnorm_pre) << ',' << format_double(r.gnorm_post) << ','
       << format_double(r.seconds, 4) << '\n';
  }
}

Trainer::Trainer(Network<float> net, const TrainConfig& cfg) : net_(std::move(net)), cfg_(cfg) {
  momentum_.reserve(net_.parameters().size());
  for (const auto& p : net_.parameters()) momentum_.emplace_back(p.value.shape);
}

std::pair<double, double> clip_global_norm(std::vector<Parameter<float>>& params,
                                           double clip_norm) {
  double sq = 0.0;
  for (const auto& p : params)
    for (float g : p.grad.data) sq += static_cast<double>(g) * static_cast<double>(g);
  const double pre = std::sqrt(sq);
  if (pre <= clip_norm) return {pre, pre};
  const float scale = static_cast<float>(clip_norm / pre);
  double sq2 = 0.0;
  for (auto& p : params)
    for (float& g : p.grad.data) {
      g *= scale;
      sq2 += static_cast<double>(g) * static_cast<double>(g);
    }
  return {pre, std::sqrt(sq2)};
}

void Trainer::clip_and_apply(double lr_backbone, double lr_heads, StepStats& stats) {
  auto& params = net_.parameters();
  std::tie(stats.gnorm_pre, stats.gnorm_post) = clip_global_norm(params, cfg_.clip_norm);

  const float mu = static_cast<float>(cfg_.momentum);
  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    auto& v = momentum_[pi];
    const float lr =
        static_cast<float>(p.role == ParamRole::Backbone ? lr_backbone : lr_heads);
    if (lr == 0.0f) continue;  // frozen: neither parameters nor momentum move
    for (int64_t i = 0; i < p.value.numel(); ++i) {
      v[i] = mu * v[i] + p.grad[i];
      p.value[i] -= lr * (p.grad[i] + mu * v[i]);  // Nesterov step
    }
  }
}

Trainer::StepStats Trainer::step_multidataset(const Tensor<float>& images,
                                              const Tensor<float>& targets,
                                              const Tensor<float>& annotation,
                                              double lr_backbone, double lr_heads) {
  net_.zero_grad();
  Network<float>::ForwardRecord rec;
  const Tensor<float> logits = net_.forward(images, &rec, cfg_.workers);
  LossBatch<float> lb{logits, targets, annotation};
  LossValue<float> loss = multidataset_loss(lb, cfg_.loss);
  net_.backward(rec, loss.voxel_gradient, cfg_.workers);

  StepStats stats;
  stats.per_class = loss.per_class;
  stats.loss_total = loss.total;
  for (const auto& [bce, dice_term] : loss.per_class) {
    stats.loss_bce += bce;
    stats.loss_dice += dice_term;
  }
  clip_and_apply(lr_backbone, lr_heads, stats);
  return stats;
}

Trainer::StepStats Trainer::step_softmax(const Tensor<float>& images,
                                         const std::vector<int32_t>& labelmap, double lr) {
  net_.zero_grad();
  Network<float>::ForwardRecord rec;
  const Tensor<float> logits = net_.forward(images, &rec, cfg_.workers);
  auto [loss, grad] = baseline_softmax_ce_dice(logits, labelmap, cfg_.loss);
  net_.backward(rec, grad, cfg_.workers);

  StepStats stats;
  stats.loss_total = loss;
  clip_and_apply(lr, lr, stats);
  return stats;
}

namespace {

enum class LoopMode { Multidataset, SoftmaxBaseline };

struct LoadedCases {
  std::map<size_t, Case> by_index;
  const Case& get(size_t idx) const { return by_index.at(idx); }
};

LoadedCases preload_cases(const CollectionManifest& m, const SamplerSpec& sampler) {
  LoadedCases out;
  for (size_t idx : sampler.case_indices)
    out.by_index.emplace(idx, load_case(m, m.cases[idx]));
  return out;
}

TrainOutput run_training_loop(Network<float> net, const CollectionManifest& manifest,
                              const TrainConfig& cfg_in, const std::filesystem::path& out_dir,
                              LoopMode mode, const ProgressFn& progress) {
  TrainConfig cfg = cfg_in;
  cfg.schedule.total_epochs = cfg.epochs;  // the loop defines the horizon

  std::filesystem::create_directories(out_dir);
  const SamplerSpec sampler = build_sampler(manifest, Split::Train);
  const LoadedCases cases = preload_cases(manifest, sampler);

  const int C = manifest.num_classes();
  const auto& patch = cfg.net.patch_shape;
  const int64_t vox = patch[0] * patch[1] * patch[2];
  const int B = cfg.batch_size;

  Trainer trainer(std::move(net), cfg);

  Model model;
  model.classes = manifest.global_classes;
  model.activation =
      mode == LoopMode::Multidataset ? HeadActivation::Sigmoid : HeadActivation::SoftmaxBg;

  TrainOutput out;
  out.last_checkpoint = out_dir / "last.mtckpt";
  out.best_checkpoint = out_dir / "best.mtckpt";

  double smoothed = 0.0, best = std::numeric_limits<double>::infinity();
  int64_t step_count = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr_backbone = learning_rate(cfg.schedule, epoch, ParamRole::Backbone);
    const double lr_heads = learning_rate(cfg.schedule, epoch, ParamRole::Head);
    double epoch_loss = 0.0;

    for (int iter = 0; iter < cfg.iterations_per_epoch; ++iter) {
      const auto t0 = std::chrono::steady_clock::now();
      const uint64_t t = static_cast<uint64_t>(epoch) * cfg.iterations_per_epoch + iter;
      Rng draw_rng = Rng::derive({cfg.seed, 0xD7A3ull, t});
      const std::vector<size_t> refs = sample_batch(sampler, B, draw_rng);

      std::vector<Patch> patches(static_cast<size_t>(B));
      parallel_for(B, cfg.workers, [&](int64_t b) {
        Rng rng = Rng::derive({cfg.seed, 0xBA7C4ull, t, static_cast<uint64_t>(b)});
        patches[static_cast<size_t>(b)] =
            extract_patch(cases.get(refs[static_cast<size_t>(b)]), manifest, patch, rng,
                          cfg.fg_bias);
      });

      Tensor<float> images({B, 1, patch[0], patch[1], patch[2]});
      for (int b = 0; b < B; ++b)
        std::copy(patches[static_cast<size_t>(b)].image.data.begin(),
                  patches[static_cast<size_t>(b)].image.data.end(),
                  images.data.begin() + static_cast<int64_t>(b) * vox);

      Trainer::StepStats stats;
      if (mode == LoopMode::Multidataset) {
        Tensor<float> targets({B, C, patch[0], patch[1], patch[2]});
        Tensor<float> annotation({B, C});
        for (int b = 0; b < B; ++b) {
          const auto& p = patches[static_cast<size_t>(b)];
          std::copy(p.target.data.begin(), p.target.data.end(),
                    targets.data.begin() + static_cast<int64_t>(b) * C * vox);
          for (int c = 0; c < C; ++c)
            annotation[static_cast<int64_t>(b) * C + c] = p.annotation[static_cast<size_t>(c)];
        }
        stats = trainer.step_multidataset(images, targets, annotation, lr_backbone, lr_heads);
        if (!std::isfinite(stats.loss_total)) {
          std::string who;
          for (size_t c = 0; c < stats.per_class.size(); ++c)
            if (!std::isfinite(stats.per_class[c].first) ||
                !std::isfinite(stats.per_class[c].second))
              who += (who.empty() ? "" : ", ") + manifest.global_classes[c].name;
          throw std::runtime_error("non-finite loss at epoch " + std::to_string(epoch) +
                                   " iter " + std::to_string(iter) +
                                   (who.empty() ? "" : " (classes: " + who + ")"));
        }
      } else {
        // Collapse the multi-hot patch target into an exclusive label map;
        // later local classes win, so nested substructures keep their label.
        std::vector<int32_t> labelmap(static_cast<size_t>(B) * vox, 0);
        for (int b = 0; b < B; ++b) {
          const auto& p = patches[static_cast<size_t>(b)];
          for (int c = 0; c < C; ++c)
            for (int64_t i = 0; i < vox; ++i)
              if (p.target[c * vox + i] != 0.0f)
                labelmap[static_cast<size_t>(b) * vox + i] = c + 1;
        }
        stats = trainer.step_softmax(images, labelmap, lr_heads);
        if (!std::isfinite(stats.loss_total))
          throw std::runtime_error("non-finite baseline loss at epoch " +
                                   std::to_string(epoch) + " iter " + std::to_string(iter));
      }
      ++step_count;
      epoch_loss += stats.loss_total;

      TrainLogRow row;
      row.epoch = epoch;
      row.iter = iter;
      row.loss_total = stats.loss_total;
      row.loss_bce = stats.loss_bce;
      row.loss_dice = stats.loss_dice;
      row.lr_backbone = lr_backbone;
      row.lr_heads = lr_heads;
      row.gnorm_pre = stats.gnorm_pre;
      row.gnorm_post = stats.gnorm_post;
      row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      out.log.rows.push_back(row);
    }

    epoch_loss /= cfg.iterations_per_epoch;
    smoothed = epoch == 0 ? epoch_loss : 0.9 * smoothed + 0.1 * epoch_loss;
    if (progress) progress(epoch, epoch_loss);

    model.net = trainer.net();
    model.step = step_count;
    save_checkpoint(model, out.last_checkpoint);
    if (smoothed < best) {
      best = smoothed;
      save_checkpoint(model, out.best_checkpoint);
    }
  }

  out.log.write_csv(out_dir / "train_log.csv");
  out.model = std::move(model);
  return out;
}

}  // namespace

TrainOutput train(const CollectionManifest& manifest, const TrainConfig& cfg,
                  const std::filesystem::path& out_dir, const ProgressFn& progress) {
  NetConfig nc = cfg.net;
  nc.num_global_classes = manifest.num_classes();
  Network<float> net(nc, cfg.seed);
  TrainConfig resolved = cfg;
  resolved.net = nc;
  return run_training_loop(std::move(net), manifest, resolved, out_dir, LoopMode::Multidataset,
                           progress);
}

TrainOutput train_single_dataset_baseline(const CollectionManifest& manifest, int dataset_id,
                                          const TrainConfig& cfg,
                                          const std::filesystem::path& out_dir,
                                          const ProgressFn& progress) {
  const CollectionManifest sub = filter_datasets(manifest, {dataset_id});
  NetConfig nc = cfg.net;
  nc.num_global_classes = sub.num_classes() + 1;  // channel 0 = background
  Network<float> net(nc, cfg.seed);
  TrainConfig resolved = cfg;
  resolved.net = nc;
  return run_training_loop(std::move(net), sub, resolved, out_dir, LoopMode::SoftmaxBaseline,
                           progress);
}

TrainOutput finetune(const std::filesystem::path& checkpoint_path,
                     const CollectionManifest& manifest, const TrainConfig& cfg,
                     const std::filesystem::path& out_dir, const ProgressFn& progress) {
  const Model src = load_checkpoint(checkpoint_path);
  NetConfig nc = cfg.net;
  nc.num_global_classes = manifest.num_classes();
  if (!nc.backbone_compatible(src.net.config()))
    throw InputError("finetune: checkpoint backbone incompatible with configured network");
  Network<float> net(nc, cfg.seed);  // fresh heads for the new class set
  load_backbone(net, checkpoint_path);
  TrainConfig resolved = cfg;
  resolved.net = nc;
  resolved.schedule.mode = ScheduleSpec::Mode::Finetune;
  return run_training_loop(std::move(net), manifest, resolved, out_dir, LoopMode::Multidataset,
                           progress);
}

std::vector<GridF> predict(const Model& model, const GridF& volume, const PredictOptions& opt) {
  const NetConfig& cfg = model.net.config();
  const auto& patch = cfg.patch_shape;
  const int C = cfg.num_global_classes;

  std::array<int64_t, 3> padded{}, pad_lo{};
  for (int a = 0; a < 3; ++a) {
    padded[a] = std::max(volume.dims[a], patch[a]);
    pad_lo[a] = (padded[a] - volume.dims[a]) / 2;
  }

  // Evenly spaced window starts; last window flush with the far edge.
  std::array<std::vector<int64_t>, 3> starts;
  for (int a = 0; a < 3; ++a) {
    const int64_t span = padded[a] - patch[a];
    if (span == 0) {
      starts[a] = {0};
      continue;
    }
    const double stride = std::max(1.0, patch[a] * (1.0 - opt.overlap));
    const int64_t n = static_cast<int64_t>(std::ceil(span / stride)) + 1;
    for (int64_t i = 0; i < n; ++i) {
      const int64_t s = n == 1 ? 0 : std::llround(static_cast<double>(i) * span / (n - 1));
      if (starts[a].empty() || starts[a].back() != s) starts[a].push_back(s);
    }
  }

  // Gaussian window weights, sigma = patch/8.
  const int64_t pvox = patch[0] * patch[1] * patch[2];
  std::vector<double> weight(static_cast<size_t>(pvox));
  {
    int64_t w = 0;
    for (int64_t x = 0; x < patch[0]; ++x)
      for (int64_t y = 0; y < patch[1]; ++y)
        for (int64_t z = 0; z < patch[2]; ++z, ++w) {
          double e = 0.0;
          const int64_t c[3] = {x, y, z};
          for (int a = 0; a < 3; ++a) {
            const double sigma = patch[a] / 8.0;
            const double d = (c[a] - (patch[a] - 1) / 2.0) / sigma;
            e += 0.5 * d * d;
          }
          weight[static_cast<size_t>(w)] = std::exp(-e) + 1e-8;
        }
  }

  struct Window {
    std::array<int64_t, 3> start;
    std::vector<float> probs;  // [C, patch...]
  };
  std::vector<Window> windows;
  for (int64_t sx : starts[0])
    for (int64_t sy : starts[1])
      for (int64_t sz : starts[2]) windows.push_back({{sx, sy, sz}, {}});

  const auto src = [&](int64_t p, int a) {
    return std::clamp<int64_t>(p - pad_lo[a], 0, volume.dims[a] - 1);
  };

  parallel_for(static_cast<int64_t>(windows.size()), opt.workers, [&](int64_t wi) {
    Window& win = windows[static_cast<size_t>(wi)];
    Tensor<float> input({1, 1, patch[0], patch[1], patch[2]});
    int64_t w = 0;
    for (int64_t x = 0; x < patch[0]; ++x)
      for (int64_t y = 0; y < patch[1]; ++y)
        for (int64_t z = 0; z < patch[2]; ++z, ++w)
          input[w] = volume.at(src(win.start[0] + x, 0), src(win.start[1] + y, 1),
                               src(win.start[2] + z, 2));
    const Tensor<float> logits = model.net.forward(input, nullptr, 1);
    win.probs.resize(static_cast<size_t>(C) * pvox);
    if (model.activation == HeadActivation::Sigmoid) {
      for (int64_t i = 0; i < C * pvox; ++i) win.probs[static_cast<size_t>(i)] =
          stable_sigmoid(logits[i]);
    } else {
      for (int64_t i = 0; i < pvox; ++i) {
        float mx = logits[i];
        for (int c = 1; c < C; ++c) mx = std::max(mx, logits[c * pvox + i]);
        double denom = 0.0;
        for (int c = 0; c < C; ++c) denom += std::exp(static_cast<double>(logits[c * pvox + i] - mx));
        for (int c = 0; c < C; ++c)
          win.probs[static_cast<size_t>(c * pvox + i)] = static_cast<float>(
              std::exp(static_cast<double>(logits[c * pvox + i] - mx)) / denom);
      }
    }
  });

  // Deterministic accumulation in window order.
  std::vector<std::vector<double>> acc(static_cast<size_t>(C));
  for (auto& a : acc) a.assign(static_cast<size_t>(padded[0] * padded[1] * padded[2]), 0.0);
  std::vector<double> wsum(static_cast<size_t>(padded[0] * padded[1] * padded[2]), 0.0);
  for (const auto& win : windows) {
    int64_t w = 0;
    for (int64_t x = 0; x < patch[0]; ++x)
      for (int64_t y = 0; y < patch[1]; ++y)
        for (int64_t z = 0; z < patch[2]; ++z, ++w) {
          const int64_t gi = (win.start[0] + x) + padded[0] * ((win.start[1] + y) +
                             padded[1] * (win.start[2] + z));
          wsum[static_cast<size_t>(gi)] += weight[static_cast<size_t>(w)];
          for (int c = 0; c < C; ++c)
            acc[static_cast<size_t>(c)][static_cast<size_t>(gi)] +=
                weight[static_cast<size_t>(w)] * win.probs[static_cast<size_t>(c * pvox + w)];
        }
  }

  std::vector<GridF> out;
  out.reserve(static_cast<size_t>(C));
  for (int c = 0; c < C; ++c) {
    GridF g(volume.dims[0], volume.dims[1], volume.dims[2]);
    g.spacing = volume.spacing;
    for (int64_t z = 0; z < volume.dims[2]; ++z)
      for (int64_t y = 0; y < volume.dims[1]; ++y)
        for (int64_t x = 0; x < volume.dims[0]; ++x) {
          const int64_t gi =
              (x + pad_lo[0]) + padded[0] * ((y + pad_lo[1]) + padded[1] * (z + pad_lo[2]));
          g.at(x, y, z) = static_cast<float>(acc[static_cast<size_t>(c)][static_cast<size_t>(gi)] /
                                             wsum[static_cast<size_t>(gi)]);
        }
    out.push_back(std::move(g));
  }
  return out;
}

std::vector<GridU8> binarize(const std::vector<GridF>& probabilities, double threshold) {
  std::vector<GridU8> out;
  out.reserve(probabilities.size());
  for (const auto& p : probabilities) {
    GridU8 m(p.dims[0], p.dims[1], p.dims[2]);
    m.spacing = p.spacing;
    for (int64_t i = 0; i < p.numel(); ++i)
      m.data[static_cast<size_t>(i)] =
          p.data[static_cast<size_t>(i)] >= threshold ? uint8_t(1) : uint8_t(0);
    out.push_back(std::move(m));
  }
  return out;
}

std::vector<GridU8> binarize_argmax(const std::vector<GridF>& probabilities) {
  if (probabilities.size() < 2)
    throw std::invalid_argument("binarize_argmax: needs background plus foreground channels");
  const auto& bg = probabilities[0];
  std::vector<GridU8> out;
  for (size_t c = 1; c < probabilities.size(); ++c) {
    GridU8 m(bg.dims[0], bg.dims[1], bg.dims[2]);
    m.spacing = bg.spacing;
    out.push_back(std::move(m));
  }
  for (int64_t i = 0; i < bg.numel(); ++i) {
    size_t best = 0;
    float bv = bg.data[static_cast<size_t>(i)];
    for (size_t c = 1; c < probabilities.size(); ++c)
      if (probabilities[c].data[static_cast<size_t>(i)] > bv) {
        bv = probabilities[c].data[static_cast<size_t>(i)];
        best = c;
      }
    if (best > 0) out[best - 1].data[static_cast<size_t>(i)] = 1;
  }
  return out;
}

}  // namespace mdseg
