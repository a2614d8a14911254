// Command-line front end: gen-data, train, finetune, predict, eval, gradcheck.
// Exit codes: 0 success, 1 internal/tolerance failure, 2 usage/input error.

#include <array>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <set>

#include <CLI11.hpp>
#include <json.hpp>

#include "mdseg/errors.hpp"
#include "mdseg/evalreport.hpp"
#include "mdseg/fmt.hpp"
#include "mdseg/gradcheck.hpp"
#include "mdseg/phantom.hpp"
#include "mdseg/trainer.hpp"

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

json load_json_file(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw mdseg::InputError("cannot open config file: " + path.string());
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw mdseg::InputError("invalid JSON in " + path.string() + ": " + e.what());
  }
  return j;
}

/// `--set a.b.c=value`; value parsed as JSON when possible, else as a string.
void apply_override(json& j, const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos)
    throw mdseg::InputError("--set expects key=value, got '" + kv + "'");
  const std::string key = kv.substr(0, eq);
  const std::string val = kv.substr(eq + 1);
  json parsed;
  try {
    parsed = json::parse(val);
  } catch (const json::exception&) {
    parsed = val;
  }
  json* cur = &j;
  size_t pos = 0;
  for (;;) {
    const auto dot = key.find('.', pos);
    const std::string part = key.substr(pos, dot == std::string::npos ? dot : dot - pos);
    if (part.empty()) throw mdseg::InputError("--set: empty path segment in '" + key + "'");
    if (dot == std::string::npos) {
      (*cur)[part] = parsed;
      return;
    }
    cur = &((*cur)[part]);
    pos = dot + 1;
  }
}

void write_resolved_config(const fs::path& out_dir, const json& j) {
  fs::create_directories(out_dir);
  std::ofstream os(out_dir / "resolved_config.json");
  if (!os) throw mdseg::InputError("cannot write resolved_config.json under " + out_dir.string());
  os << j.dump(2) << "\n";
}

struct CommonArgs {
  std::string out;
  int64_t seed = -1;  // -1 = keep the config's seed
  int workers = 1;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--out", args.out, "output directory")->required();
  cmd->add_option("--seed", args.seed, "seed override");
  cmd->add_option("--workers", args.workers, "worker threads")->check(CLI::PositiveNumber);
  cmd->add_option("--set", args.overrides, "config override key=value (dotted path)");
}

void progress_printer(int epoch, double loss) {
  std::printf("epoch %d  loss %.5f\n", epoch, loss);
  std::fflush(stdout);
}

int cmd_gen_data(const std::string& config_path, const CommonArgs& args) {
  json j = load_json_file(config_path);
  for (const auto& kv : args.overrides) apply_override(j, kv);
  if (args.seed >= 0) j["seed"] = args.seed;
  const mdseg::GenConfig cfg = mdseg::gen_config_from_json(j);
  write_resolved_config(args.out, mdseg::gen_config_to_json(cfg));
  const auto manifest = mdseg::generate_collection(cfg, args.out);
  std::printf("generated %zu cases across %zu datasets -> %s\n", manifest.cases.size(),
              manifest.datasets.size(), (fs::path(args.out) / "manifest.json").c_str());
  return 0;
}

mdseg::TrainConfig resolve_train_config(const std::string& config_path, const CommonArgs& args,
                                        json& out_json) {
  json j = config_path.empty() ? json::object() : load_json_file(config_path);
  for (const auto& kv : args.overrides) apply_override(j, kv);
  if (args.seed >= 0) j["seed"] = args.seed;
  j["workers"] = args.workers;
  mdseg::TrainConfig cfg = mdseg::train_config_from_json(j);
  out_json = mdseg::train_config_to_json(cfg);
  return cfg;
}

int cmd_train(const std::string& config_path, const std::string& manifest_path,
              int single_dataset, const CommonArgs& args) {
  json resolved;
  const mdseg::TrainConfig cfg = resolve_train_config(config_path, args, resolved);
  resolved["command"] = "train";
  resolved["manifest"] = manifest_path;
  if (single_dataset >= 0) resolved["single_dataset"] = single_dataset;
  write_resolved_config(args.out, resolved);
  const auto manifest = mdseg::load_manifest(manifest_path);
  const auto out =
      single_dataset >= 0
          ? mdseg::train_single_dataset_baseline(manifest, single_dataset, cfg, args.out,
                                                 progress_printer)
          : mdseg::train(manifest, cfg, args.out, progress_printer);
  std::printf("done; checkpoints: %s, %s\n", out.last_checkpoint.c_str(),
              out.best_checkpoint.c_str());
  return 0;
}

int cmd_finetune(const std::string& config_path, const std::string& checkpoint,
                 const std::string& manifest_path, const CommonArgs& args) {
  json resolved;
  const mdseg::TrainConfig cfg = resolve_train_config(config_path, args, resolved);
  resolved["command"] = "finetune";
  resolved["manifest"] = manifest_path;
  resolved["checkpoint"] = checkpoint;
  write_resolved_config(args.out, resolved);
  const auto manifest = mdseg::load_manifest(manifest_path);
  const auto out = mdseg::finetune(checkpoint, manifest, cfg, args.out, progress_printer);
  std::printf("done; checkpoints: %s, %s\n", out.last_checkpoint.c_str(),
              out.best_checkpoint.c_str());
  return 0;
}

int cmd_predict(const std::string& checkpoint, const std::string& volume_path, double overlap,
                double threshold, const CommonArgs& args) {
  json resolved;
  resolved["command"] = "predict";
  resolved["checkpoint"] = checkpoint;
  resolved["volume"] = volume_path;
  resolved["overlap"] = overlap;
  resolved["threshold"] = threshold;
  resolved["workers"] = args.workers;
  write_resolved_config(args.out, resolved);

  const mdseg::Model model = mdseg::load_checkpoint(checkpoint);
  const mdseg::GridF volume = mdseg::read_volume_f32(volume_path);
  mdseg::PredictOptions opt;
  opt.overlap = overlap;
  opt.workers = args.workers;
  const auto probs = mdseg::predict(model, volume, opt);
  const auto masks = model.activation == mdseg::HeadActivation::Sigmoid
                         ? mdseg::binarize(probs, threshold)
                         : mdseg::binarize_argmax(probs);

  json index;
  index["classes"] = json::array();
  for (size_t c = 0; c < model.classes.size(); ++c) {
    const auto& cr = model.classes[c];
    char name[64];
    std::snprintf(name, sizeof(name), "class_%02zu", c);
    mdseg::write_volume(masks[c], fs::path(args.out) / (std::string(name) + "_mask.mtvol"));
    const size_t prob_ch = model.activation == mdseg::HeadActivation::Sigmoid ? c : c + 1;
    mdseg::write_volume(probs[prob_ch],
                        fs::path(args.out) / (std::string(name) + "_prob.mtvol"));
    index["classes"].push_back(mdseg::class_ref_to_json(cr));
  }
  std::ofstream os(fs::path(args.out) / "classes.json");
  os << index.dump(2) << "\n";
  std::printf("wrote %zu class volumes under %s\n", model.classes.size(), args.out.c_str());
  return 0;
}

mdseg::EvalTable read_reference_table(const fs::path& per_class_csv) {
  std::ifstream is(per_class_csv);
  if (!is) throw mdseg::InputError("cannot open reference table: " + per_class_csv.string());
  mdseg::EvalTable table;
  std::string line;
  std::getline(is, line);  // header
  std::map<int, int> next_local;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::array<std::string, 4> cols;
    size_t pos = 0;
    for (int i = 0; i < 4; ++i) {
      const auto comma = line.find(',', pos);
      cols[static_cast<size_t>(i)] =
          line.substr(pos, comma == std::string::npos ? comma : comma - pos);
      if (comma == std::string::npos) break;
      pos = comma + 1;
    }
    mdseg::EvalRow row;
    row.class_ref.dataset_id = std::stoi(cols[0]);
    row.class_ref.local_index = next_local[row.class_ref.dataset_id]++;
    row.class_ref.name = cols[1];
    row.case_id = "reference";
    row.dice = std::stod(cols[2]);
    table.rows.push_back(std::move(row));
  }
  return table;
}

int cmd_eval(const std::string& checkpoint, const std::string& manifest_path,
             const std::string& split_name, const std::string& reference,
             const CommonArgs& args) {
  json resolved;
  resolved["command"] = "eval";
  resolved["checkpoint"] = checkpoint;
  resolved["manifest"] = manifest_path;
  resolved["split"] = split_name;
  resolved["workers"] = args.workers;
  if (!reference.empty()) resolved["reference"] = reference;
  write_resolved_config(args.out, resolved);

  mdseg::Split split = mdseg::Split::Holdout;
  if (split_name == "train")
    split = mdseg::Split::Train;
  else if (split_name == "all")
    split = mdseg::Split::All;
  else if (split_name != "holdout")
    throw mdseg::InputError("--split must be one of holdout|train|all");

  const mdseg::Model model = mdseg::load_checkpoint(checkpoint);
  const auto manifest = mdseg::load_manifest(manifest_path);
  mdseg::PredictOptions opt;
  opt.workers = args.workers;
  const auto table = mdseg::evaluate(model, manifest, split, opt);

  std::vector<mdseg::GroupSummary> groups;
  groups.push_back(mdseg::aggregate(table, mdseg::GroupRule::all()));
  groups.push_back(mdseg::aggregate(table, mdseg::GroupRule::dataset_average()));
  mdseg::EvalTable ref;
  if (!reference.empty()) {
    ref = read_reference_table(reference);
    groups.push_back(mdseg::aggregate(table, mdseg::GroupRule::difficult(ref)));
  }
  std::set<std::string> tags;
  for (const auto& c : manifest.global_classes)
    for (const auto& t : c.group_tags) tags.insert(t);
  for (const auto& t : tags) groups.push_back(mdseg::aggregate(table, mdseg::GroupRule::tagged(t)));

  mdseg::write_report(table, groups, args.out);
  for (const auto& g : groups)
    std::printf("%-16s mean dice %7.3f  (%d classes)\n", g.group.c_str(), g.mean_dice,
                g.n_classes);
  return 0;
}

int cmd_gradcheck(const CommonArgs& args) {
  json resolved;
  resolved["command"] = "gradcheck";
  resolved["seed"] = args.seed >= 0 ? args.seed : 7;
  write_resolved_config(args.out, resolved);
  const auto report =
      mdseg::run_gradcheck(args.seed >= 0 ? static_cast<uint64_t>(args.seed) : 7);
  for (const auto& e : report.entries)
    std::printf("%-28s max_rel_err %.3e  tol %.1e  %s\n", e.name.c_str(), e.max_rel_err,
                e.tolerance, e.pass ? "pass" : "FAIL");
  mdseg::write_gradcheck_csv(report, fs::path(args.out) / "gradcheck.csv");
  return report.all_pass() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-dataset volumetric segmentation trainer"};
  app.require_subcommand(1);

  CommonArgs gen_args, train_args, ft_args, pred_args, eval_args, gc_args;
  std::string gen_config, train_config, train_manifest, ft_config, ft_ckpt, ft_manifest;
  std::string pred_ckpt, pred_volume, eval_ckpt, eval_manifest, eval_reference;
  std::string eval_split = "holdout";
  int single_dataset = -1;
  double overlap = 0.5, threshold = 0.5;

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic phantom collection");
  gen->add_option("--config", gen_config, "generation config JSON")->required();
  add_common(gen, gen_args);

  auto* tr = app.add_subcommand("train", "multi-dataset training");
  tr->add_option("--config", train_config, "training config JSON");
  tr->add_option("--manifest", train_manifest, "collection manifest")->required();
  tr->add_option("--single-dataset", single_dataset,
                 "train a softmax baseline on this dataset id only");
  add_common(tr, train_args);

  auto* ft = app.add_subcommand("finetune", "fine-tune from a checkpoint backbone");
  ft->add_option("--config", ft_config, "training config JSON");
  ft->add_option("--checkpoint", ft_ckpt, "source checkpoint")->required();
  ft->add_option("--manifest", ft_manifest, "target collection manifest")->required();
  add_common(ft, ft_args);

  auto* pr = app.add_subcommand("predict", "sliding-window inference on one volume");
  pr->add_option("--checkpoint", pred_ckpt, "model checkpoint")->required();
  pr->add_option("--volume", pred_volume, "input MTVOL volume")->required();
  pr->add_option("--overlap", overlap, "window overlap fraction");
  pr->add_option("--threshold", threshold, "binarization threshold");
  add_common(pr, pred_args);

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a collection");
  ev->add_option("--checkpoint", eval_ckpt, "model checkpoint")->required();
  ev->add_option("--manifest", eval_manifest, "collection manifest")->required();
  ev->add_option("--split", eval_split, "holdout|train|all");
  ev->add_option("--reference", eval_reference,
                 "per_class.csv of a reference run (enables the difficult group)");
  add_common(ev, eval_args);

  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of all primitives");
  add_common(gc, gc_args);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(gen_config, gen_args);
    if (tr->parsed()) return cmd_train(train_config, train_manifest, single_dataset, train_args);
    if (ft->parsed()) return cmd_finetune(ft_config, ft_ckpt, ft_manifest, ft_args);
    if (pr->parsed()) return cmd_predict(pred_ckpt, pred_volume, overlap, threshold, pred_args);
    if (ev->parsed()) return cmd_eval(eval_ckpt, eval_manifest, eval_split, eval_reference,
                                      eval_args);
    if (gc->parsed()) return cmd_gradcheck(gc_args);
  } catch (const mdseg::InputError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
