#include "mdseg/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "mdseg/errors.hpp"

namespace mdseg {

using nlohmann::json;

namespace {
constexpr char kMagic[7] = {'M', 'T', 'C', 'K', 'P', 'T', '1'};
}

nlohmann::json net_config_to_json(const NetConfig& cfg) {
  json j;
  j["stages"] = cfg.stages;
  j["base_channels"] = cfg.base_channels;
  j["channel_growth"] = cfg.channel_growth;
  j["residual_encoder"] = cfg.residual_encoder;
  j["normalization"] = cfg.normalization == NormKind::Instance ? "instance" : "none";
  j["leaky_slope"] = cfg.leaky_slope;
  j["num_global_classes"] = cfg.num_global_classes;
  j["patch_shape"] = {cfg.patch_shape[0], cfg.patch_shape[1], cfg.patch_shape[2]};
  j["kernel"] = cfg.kernel;
  return j;
}

NetConfig net_config_from_json(const nlohmann::json& j) {
  NetConfig cfg;
  cfg.stages = j.value("stages", cfg.stages);
  cfg.base_channels = j.value("base_channels", cfg.base_channels);
  cfg.channel_growth = j.value("channel_growth", cfg.channel_growth);
  cfg.residual_encoder = j.value("residual_encoder", cfg.residual_encoder);
  if (j.contains("normalization")) {
    const std::string n = j.at("normalization").get<std::string>();
    if (n == "instance")
      cfg.normalization = NormKind::Instance;
    else if (n == "none")
      cfg.normalization = NormKind::None;
    else
      throw InputError("net config: unknown normalization '" + n + "'");
  }
  cfg.leaky_slope = j.value("leaky_slope", cfg.leaky_slope);
  cfg.num_global_classes = j.value("num_global_classes", cfg.num_global_classes);
  if (j.contains("patch_shape"))
    for (int i = 0; i < 3; ++i) cfg.patch_shape[i] = j.at("patch_shape").at(i).get<int64_t>();
  cfg.kernel = j.value("kernel", cfg.kernel);
  return cfg;
}

nlohmann::json class_ref_to_json(const ClassRef& c) {
  json j;
  j["dataset_id"] = c.dataset_id;
  j["local_index"] = c.local_index;
  j["name"] = c.name;
  j["group_tags"] = json::array();
  for (const auto& t : c.group_tags) j["group_tags"].push_back(t);
  return j;
}

ClassRef class_ref_from_json(const nlohmann::json& j) {
  ClassRef c;
  c.dataset_id = j.at("dataset_id").get<int>();
  c.local_index = j.at("local_index").get<int>();
  c.name = j.at("name").get<std::string>();
  if (j.contains("group_tags"))
    for (const auto& t : j.at("group_tags")) c.group_tags.insert(t.get<std::string>());
  return c;
}

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  json header;
  header["net"] = net_config_to_json(model.net.config());
  header["classes"] = json::array();
  for (const auto& c : model.classes) header["classes"].push_back(class_ref_to_json(c));
  header["step"] = model.step;
  header["activation"] = model.activation == HeadActivation::Sigmoid ? "sigmoid" : "softmax_bg";
  const std::string hs = header.dump();

  // write-temp-then-rename keeps checkpoints atomic
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw InputError("checkpoint: cannot write " + tmp.string());
    os.write(kMagic, sizeof(kMagic));
    const uint64_t len = hs.size();
    os.write(reinterpret_cast<const char*>(&len), sizeof(len));
    os.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const auto& p : model.net.parameters())
      os.write(reinterpret_cast<const char*>(p.value.ptr()),
               static_cast<std::streamsize>(p.value.numel() * sizeof(float)));
    if (!os) throw InputError("checkpoint: write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("checkpoint: cannot open " + path.string());
  char magic[7];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw InputError("checkpoint: bad magic in " + path.string());
  uint64_t len = 0;
  is.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!is || len == 0 || len > (1ull << 30))
    throw InputError("checkpoint: corrupt header length");
  std::string hs(len, '\0');
  is.read(hs.data(), static_cast<std::streamsize>(len));
  if (!is) throw InputError("checkpoint: truncated header");
  json header;
  try {
    header = json::parse(hs);
  } catch (const json::exception& e) {
    throw InputError(std::string("checkpoint: invalid header JSON: ") + e.what());
  }

  Model model;
  const NetConfig cfg = net_config_from_json(header.at("net"));
  model.net = Network<float>(cfg, 0);
  for (const auto& jc : header.at("classes"))
    model.classes.push_back(class_ref_from_json(jc));
  if (static_cast<int>(model.classes.size()) != cfg.num_global_classes &&
      !(header.value("activation", "sigmoid") == std::string("softmax_bg") &&
        static_cast<int>(model.classes.size()) + 1 == cfg.num_global_classes))
    throw InputError("checkpoint: class list does not match head count");
  model.step = header.value("step", int64_t(0));
  model.activation = header.value("activation", "sigmoid") == std::string("softmax_bg")
                         ? HeadActivation::SoftmaxBg
                         : HeadActivation::Sigmoid;
  for (auto& p : model.net.parameters()) {
    is.read(reinterpret_cast<char*>(p.value.ptr()),
            static_cast<std::streamsize>(p.value.numel() * sizeof(float)));
    if (is.gcount() != static_cast<std::streamsize>(p.value.numel() * sizeof(float)))
      throw InputError("checkpoint: truncated parameter payload in " + path.string());
  }
  return model;
}

void load_backbone(Network<float>& net, const std::filesystem::path& path) {
  Model src = load_checkpoint(path);
  if (!src.net.config().backbone_compatible(net.config()))
    throw InputError("checkpoint: backbone shape mismatch with target network");
  auto& dst_params = net.parameters();
  const auto& src_params = src.net.parameters();
  size_t si = 0, di = 0;
  while (si < src_params.size() && di < dst_params.size()) {
    while (si < src_params.size() && src_params[si].role != ParamRole::Backbone) ++si;
    while (di < dst_params.size() && dst_params[di].role != ParamRole::Backbone) ++di;
    if (si >= src_params.size() || di >= dst_params.size()) break;
    if (src_params[si].value.shape != dst_params[di].value.shape)
      throw InputError("checkpoint: backbone shape mismatch at " + dst_params[di].name);
    dst_params[di].value = src_params[si].value;
    ++si;
    ++di;
  }
}

}  // namespace mdseg
