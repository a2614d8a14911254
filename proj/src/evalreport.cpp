#include "mdseg/evalreport.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include "mdseg/errors.hpp"
#include "mdseg/fmt.hpp"
#include "mdseg/parallel.hpp"

namespace mdseg {

double dice_score(const GridU8& pred, const GridU8& gt) {
  if (pred.dims != gt.dims) throw std::invalid_argument("dice_score: shape mismatch");
  int64_t inter = 0, p = 0, g = 0;
  for (int64_t i = 0; i < pred.numel(); ++i) {
    const bool pv = pred.data[static_cast<size_t>(i)] != 0;
    const bool gv = gt.data[static_cast<size_t>(i)] != 0;
    inter += pv && gv;
    p += pv;
    g += gv;
  }
  if (p + g == 0) return 100.0;
  return 100.0 * 2.0 * static_cast<double>(inter) / static_cast<double>(p + g);
}

std::vector<EvalTable::ClassMean> EvalTable::class_means() const {
  std::map<std::pair<int, int>, ClassMean> acc;
  for (const auto& r : rows) {
    auto& cm = acc[{r.class_ref.dataset_id, r.class_ref.local_index}];
    cm.class_ref = r.class_ref;
    cm.mean_dice += r.dice;
    cm.n_cases += 1;
  }
  std::vector<ClassMean> out;
  out.reserve(acc.size());
  for (auto& [key, cm] : acc) {
    cm.mean_dice /= cm.n_cases;
    out.push_back(cm);
  }
  return out;
}

std::vector<std::pair<int, double>> EvalTable::dataset_means() const {
  std::map<int, std::pair<double, int>> acc;  // dataset -> (sum of class means, count)
  for (const auto& cm : class_means()) {
    auto& a = acc[cm.class_ref.dataset_id];
    a.first += cm.mean_dice;
    a.second += 1;
  }
  std::vector<std::pair<int, double>> out;
  out.reserve(acc.size());
  for (const auto& [id, a] : acc) out.emplace_back(id, a.first / a.second);
  return out;
}

GroupSummary aggregate(const EvalTable& table, const GroupRule& rule) {
  const auto means = table.class_means();
  GroupSummary s;
  switch (rule.kind) {
    case GroupRule::Kind::All: {
      s.group = "all";
      for (const auto& cm : means) s.mean_dice += cm.mean_dice;
      s.n_classes = static_cast<int>(means.size());
      if (s.n_classes) s.mean_dice /= s.n_classes;
      return s;
    }
    case GroupRule::Kind::DatasetAverage: {
      s.group = "dataset_average";
      const auto dm = table.dataset_means();
      for (const auto& [id, m] : dm) s.mean_dice += m;
      s.n_classes = static_cast<int>(dm.size());
      if (s.n_classes) s.mean_dice /= s.n_classes;
      return s;
    }
    case GroupRule::Kind::ThresholdDifficult: {
      if (!rule.reference)
        throw InputError("aggregate: threshold_difficult needs a reference table");
      s.group = "difficult";
      std::map<std::pair<int, int>, bool> difficult;
      for (const auto& cm : rule.reference->class_means())
        if (cm.mean_dice < rule.threshold)
          difficult[{cm.class_ref.dataset_id, cm.class_ref.local_index}] = true;
      for (const auto& cm : means)
        if (difficult.count({cm.class_ref.dataset_id, cm.class_ref.local_index})) {
          s.mean_dice += cm.mean_dice;
          s.n_classes += 1;
        }
      if (s.n_classes) s.mean_dice /= s.n_classes;
      return s;
    }
    case GroupRule::Kind::Tag: {
      s.group = rule.tag;
      for (const auto& cm : means)
        if (cm.class_ref.group_tags.count(rule.tag)) {
          s.mean_dice += cm.mean_dice;
          s.n_classes += 1;
        }
      if (s.n_classes) s.mean_dice /= s.n_classes;
      return s;
    }
  }
  throw std::logic_error("aggregate: unreachable");
}

namespace {

// Continued-fraction evaluation of the incomplete beta (Lentz's method).
double betacf(double a, double b, double x) {
  constexpr int kMaxIter = 300;
  constexpr double kEps = 3e-16, kFpMin = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0, d = 1.0 - qab * x / qap;
  if (std::abs(d) < kFpMin) d = kFpMin;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kFpMin) d = kFpMin;
    c = 1.0 + aa / c;
    if (std::abs(c) < kFpMin) c = kFpMin;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kFpMin) d = kFpMin;
    c = 1.0 + aa / c;
    if (std::abs(c) < kFpMin) c = kFpMin;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) break;
  }
  return h;
}

double reg_inc_beta(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double ln = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) +
                    b * std::log1p(-x);
  const double bt = std::exp(ln);
  if (x < (a + 1.0) / (a + b + 2.0)) return bt * betacf(a, b, x) / a;
  return 1.0 - bt * betacf(b, a, 1.0 - x) / b;
}

}  // namespace

double student_t_cdf(double t, int df) {
  if (df < 1) throw std::invalid_argument("student_t_cdf: df must be >= 1");
  const double x = df / (df + t * t);
  const double tail = 0.5 * reg_inc_beta(df / 2.0, 0.5, x);
  return t > 0 ? 1.0 - tail : tail;
}

double paired_one_sided_t_test(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("t-test: length mismatch");
  const size_t n = a.size();
  if (n < 2) throw std::invalid_argument("t-test: needs n >= 2 pairs");
  double mean = 0.0;
  for (size_t i = 0; i < n; ++i) mean += a[i] - b[i];
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (size_t i = 0; i < n; ++i) {
    const double d = a[i] - b[i] - mean;
    ss += d * d;
  }
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  if (sd == 0.0) {
    if (mean > 0.0) return 0.0;
    if (mean < 0.0) return 1.0;
    return 0.5;
  }
  const double t = mean / (sd / std::sqrt(static_cast<double>(n)));
  return 1.0 - student_t_cdf(t, static_cast<int>(n) - 1);
}

EvalTable evaluate(const Model& model, const CollectionManifest& manifest, Split split,
                   const PredictOptions& opt) {
  // Bind every manifest class to a model output channel up front.
  std::map<std::pair<int, int>, size_t> channel_of;
  for (size_t i = 0; i < model.classes.size(); ++i)
    channel_of[{model.classes[i].dataset_id, model.classes[i].local_index}] = i;
  for (const auto& c : manifest.global_classes)
    if (!channel_of.count({c.dataset_id, c.local_index}))
      throw InputError("evaluate: model has no head for class '" + c.name + "' of dataset " +
                       std::to_string(c.dataset_id));

  std::vector<size_t> case_ids;
  for (size_t i = 0; i < manifest.cases.size(); ++i) {
    const auto& e = manifest.cases[i];
    const bool in = split == Split::All || (split == Split::Holdout ? e.holdout : !e.holdout);
    if (in) case_ids.push_back(i);
  }
  if (case_ids.empty()) throw InputError("evaluate: empty split");

  std::vector<std::vector<EvalRow>> per_case(case_ids.size());
  parallel_for(static_cast<int64_t>(case_ids.size()), opt.workers, [&](int64_t k) {
    const auto& entry = manifest.cases[case_ids[static_cast<size_t>(k)]];
    const Case c = load_case(manifest, entry);
    PredictOptions single = opt;
    single.workers = 1;  // parallelism lives at the case level here
    const auto probs = predict(model, c.image, single);
    const auto masks = model.activation == HeadActivation::Sigmoid ? binarize(probs)
                                                                   : binarize_argmax(probs);
    const auto& dclasses = manifest.dataset(entry.dataset_id).classes;
    auto& rows = per_case[static_cast<size_t>(k)];
    for (size_t j = 0; j < dclasses.size(); ++j) {
      const size_t ch = channel_of.at({entry.dataset_id, static_cast<int>(j)});
      EvalRow row;
      row.class_ref = dclasses[j];
      row.case_id = entry.image.stem().string();
      row.dice = dice_score(masks[ch], c.masks[j]);
      rows.push_back(std::move(row));
    }
  });

  EvalTable table;
  for (auto& rows : per_case)
    for (auto& r : rows) table.rows.push_back(std::move(r));
  return table;
}

void write_report(const EvalTable& table, const std::vector<GroupSummary>& aggregates,
                  const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream os(dir / "per_class.csv");
    if (!os) throw InputError("report: cannot write per_class.csv");
    os << "dataset_id,class_name,mean_dice,n_cases\n";
    for (const auto& cm : table.class_means())
      os << cm.class_ref.dataset_id << ',' << cm.class_ref.name << ','
         << format_double(cm.mean_dice, 4) << ',' << cm.n_cases << '\n';
  }
  {
    std::ofstream os(dir / "per_dataset.csv");
    if (!os) throw InputError("report: cannot write per_dataset.csv");
    os << "dataset_id,mean_dice\n";
    for (const auto& [id, m] : table.dataset_means())
      os << id << ',' << format_double(m, 4) << '\n';
  }
  {
    std::ofstream os(dir / "groups.csv");
    if (!os) throw InputError("report: cannot write groups.csv");
    os << "group,mean_dice,n_classes\n";
    for (const auto& g : aggregates)
      os << g.group << ',' << format_double(g.mean_dice, 4) << ',' << g.n_classes << '\n';
  }
}

}  // namespace mdseg
