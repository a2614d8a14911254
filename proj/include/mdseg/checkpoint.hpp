#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "mdseg/collection.hpp"
#include "mdseg/net.hpp"

namespace mdseg {

enum class HeadActivation { Sigmoid, SoftmaxBg };

/// Trained model bundle: network, the global class list its heads bind to
/// (declaration order = head order), and how outputs turn into probabilities.
/// SoftmaxBg marks the single-dataset baseline whose channel 0 is background.
struct Model {
  Network<float> net;
  std::vector<ClassRef> classes;
  HeadActivation activation = HeadActivation::Sigmoid;
  int64_t step = 0;
};

// Checkpoint file: magic "MTCKPT1", u64 header length, JSON header
// (net config, class list, step, activation), then parameter tensors in
// declaration order as little-endian f32 blobs.
void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

/// Backbone-only restore for fine-tuning: `net` keeps its fresh heads and
/// receives the checkpoint's backbone parameters (class lists may differ).
void load_backbone(Network<float>& net, const std::filesystem::path& path);

nlohmann::json net_config_to_json(const NetConfig& cfg);
NetConfig net_config_from_json(const nlohmann::json& j);
nlohmann::json class_ref_to_json(const ClassRef& c);
ClassRef class_ref_from_json(const nlohmann::json& j);

}  // namespace mdseg
