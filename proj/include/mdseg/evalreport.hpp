#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "mdseg/checkpoint.hpp"
#include "mdseg/collection.hpp"
#include "mdseg/trainer.hpp"

namespace mdseg {

/// 100 * 2|P^G| / (|P|+|G|); both-empty pairs score 100 (correct absence).
double dice_score(const GridU8& pred, const GridU8& gt);

struct EvalRow {
  ClassRef class_ref;
  std::string case_id;
  double dice = 0.0;  // [0,100]
};

struct EvalTable {
  std::vector<EvalRow> rows;

  struct ClassMean {
    ClassRef class_ref;
    double mean_dice = 0.0;
    int n_cases = 0;
  };
  /// Per-class means ordered by (dataset_id, local_index).
  std::vector<ClassMean> class_means() const;
  /// Per-dataset mean of its class means (not pooled over cases, which would
  /// bias toward datasets with many cases or classes).
  std::vector<std::pair<int, double>> dataset_means() const;
};

struct GroupRule {
  enum class Kind { All, DatasetAverage, ThresholdDifficult, Tag };
  Kind kind = Kind::All;
  double threshold = 75.0;               // strict `<` per the difficult-class rule
  const EvalTable* reference = nullptr;  // required for ThresholdDifficult
  std::string tag;

  static GroupRule all() { return {}; }
  static GroupRule dataset_average() { return {Kind::DatasetAverage, 75.0, nullptr, ""}; }
  static GroupRule difficult(const EvalTable& ref, double t = 75.0) {
    return {Kind::ThresholdDifficult, t, &ref, ""};
  }
  static GroupRule tagged(std::string tag) { return {Kind::Tag, 75.0, nullptr, std::move(tag)}; }
};

struct GroupSummary {
  std::string group;
  double mean_dice = 0.0;
  int n_classes = 0;
};

GroupSummary aggregate(const EvalTable& table, const GroupRule& rule);

/// One-sided paired test of mean(a-b) > 0. Degenerate conventions:
/// zero-variance nonzero-mean differences give 0 (positive) or 1 (negative);
/// all-zero differences give 0.5.
double paired_one_sided_t_test(const std::vector<double>& a, const std::vector<double>& b);

/// Student-t CDF via the regularized incomplete beta function.
double student_t_cdf(double t, int df);

/// Runs predict+binarize on every case of the split and scores each annotated
/// class against that dataset's own protocol masks.
EvalTable evaluate(const Model& model, const CollectionManifest& manifest,
                   Split split = Split::Holdout, const PredictOptions& opt = {});

/// Writes per_class.csv, per_dataset.csv and groups.csv; byte-identical for
/// identical inputs.
void write_report(const EvalTable& table, const std::vector<GroupSummary>& aggregates,
                  const std::filesystem::path& dir);

}  // namespace mdseg
