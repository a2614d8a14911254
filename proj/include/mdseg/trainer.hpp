#pragma once

#include <filesystem>
#include <functional>
#include <vector>

#include "mdseg/checkpoint.hpp"
#include "mdseg/collection.hpp"
#include "mdseg/losses.hpp"
#include "mdseg/sampling.hpp"

namespace mdseg {

struct TrainConfig {
  int batch_size = 4;
  int epochs = 50;
  int iterations_per_epoch = 50;
  double momentum = 0.99;  // SGD with Nesterov momentum
  double clip_norm = 12.0;
  uint64_t seed = 0;
  double fg_bias = 0.33;
  int workers = 1;
  NetConfig net;
  ScheduleSpec schedule;
  LossOptions loss;
};

TrainConfig train_config_from_json(const nlohmann::json& j);
nlohmann::json train_config_to_json(const TrainConfig& cfg);
TrainConfig load_train_config(const std::filesystem::path& path);

struct TrainLogRow {
  int epoch = 0;
  int iter = 0;
  double loss_total = 0, loss_bce = 0, loss_dice = 0;
  double lr_backbone = 0, lr_heads = 0;
  double gnorm_pre = 0, gnorm_post = 0;
  double seconds = 0;
};

struct TrainLog {
  std::vector<TrainLogRow> rows;
  void write_csv(const std::filesystem::path& path) const;
};

/// Scales all gradients so their global L2 norm does not exceed clip_norm;
/// direction is preserved. Returns (pre-clip norm, post-clip norm).
std::pair<double, double> clip_global_norm(std::vector<Parameter<float>>& params,
                                           double clip_norm);

/// Owns the network and the SGD-Nesterov momentum state; one step = forward,
/// loss, backward, global-norm clip, role-wise parameter update.
class Trainer {
 public:
  Trainer(Network<float> net, const TrainConfig& cfg);

  struct StepStats {
    double loss_total = 0, loss_bce = 0, loss_dice = 0;
    double gnorm_pre = 0, gnorm_post = 0;
    std::vector<std::pair<float, float>> per_class;  // (bce_c, dice_term_c)
  };

  StepStats step_multidataset(const Tensor<float>& images, const Tensor<float>& targets,
                              const Tensor<float>& annotation, double lr_backbone,
                              double lr_heads);
  StepStats step_softmax(const Tensor<float>& images, const std::vector<int32_t>& labelmap,
                         double lr);

  Network<float>& net() { return net_; }
  const std::vector<Tensor<float>>& momentum() const { return momentum_; }

 private:
  void clip_and_apply(double lr_backbone, double lr_heads, StepStats& stats);

  Network<float> net_;
  TrainConfig cfg_;
  std::vector<Tensor<float>> momentum_;
};

struct TrainOutput {
  Model model;
  TrainLog log;
  std::filesystem::path last_checkpoint;
  std::filesystem::path best_checkpoint;
};

/// Called after each epoch with (epoch, mean epoch loss).
using ProgressFn = std::function<void(int, double)>;

/// Multi-dataset training on every non-holdout case of the manifest.
/// Writes last.mtckpt (each epoch), best.mtckpt (best smoothed loss) and
/// train_log.csv under out_dir. Deterministic given (seed, config, manifest),
/// independent of the worker count.
TrainOutput train(const CollectionManifest& manifest, const TrainConfig& cfg,
                  const std::filesystem::path& out_dir, const ProgressFn& progress = {});

/// Softmax(+background) baseline trained on one dataset only.
TrainOutput train_single_dataset_baseline(const CollectionManifest& manifest, int dataset_id,
                                          const TrainConfig& cfg,
                                          const std::filesystem::path& out_dir,
                                          const ProgressFn& progress = {});

/// Loads the checkpoint's backbone, re-initializes heads for the new class
/// set and trains with the staged fine-tuning schedule.
TrainOutput finetune(const std::filesystem::path& checkpoint_path,
                     const CollectionManifest& manifest, const TrainConfig& cfg,
                     const std::filesystem::path& out_dir, const ProgressFn& progress = {});

struct PredictOptions {
  double overlap = 0.5;  // window stride = patch * (1 - overlap)
  int workers = 1;
};

/// Sliding-window inference with Gaussian-weighted aggregation
/// (sigma = patch/8). One probability volume per output channel: per-class
/// sigmoid probabilities, or the full softmax (background first) for
/// baseline models.
std::vector<GridF> predict(const Model& model, const GridF& volume,
                           const PredictOptions& opt = {});

/// Independent thresholding per class (>= threshold); overlaps permitted.
std::vector<GridU8> binarize(const std::vector<GridF>& probabilities, double threshold = 0.5);

/// Exclusive argmax decoding for the softmax baseline; drops the background
/// channel and returns one mask per foreground class.
std::vector<GridU8> binarize_argmax(const std::vector<GridF>& probabilities);

}  // namespace mdseg
