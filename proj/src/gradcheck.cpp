#include "mdseg/gradcheck.hpp"

#include <cmath>
#include <fstream>
#include <functional>
#include <string_view>

#include "mdseg/autodiff.hpp"
#include "mdseg/errors.hpp"
#include "mdseg/fmt.hpp"
#include "mdseg/losses.hpp"
#include "mdseg/net.hpp"
#include "mdseg/rng.hpp"

namespace mdseg {

namespace {

using Td = Tensor<double>;

Td random_tensor(Rng& rng, std::vector<int64_t> shape, double scale = 1.0) {
  Td t(std::move(shape));
  for (auto& v : t.data) v = scale * rng.normal();
  return t;
}

/// Sign pattern of every leaky-ReLU input on the tape; a coordinate whose
/// perturbation flips any sign straddles the kink and is excluded from the
/// finite-difference comparison (the objective is not C^1 there).
void collect_kink_signs(const Tape<double>& tape, std::vector<uint8_t>& out) {
  tape.visit_nodes([&](const char* kind, const std::vector<Tape<double>::Id>& parents,
                       Tape<double>::Id) {
    if (std::string_view(kind) != "leaky_relu") return;
    const Td& x = tape.value(parents[0]);
    for (double v : x.data) out.push_back(v > 0.0 ? 1 : 0);
  });
}

struct CheckCase {
  std::string name;
  double tol = 1e-6;
  std::vector<Td> inputs;
  // Returns the scalar objective; when grads != nullptr, fills one analytic
  // gradient tensor per input; when signs != nullptr, appends the kink trace.
  std::function<double(std::vector<Td>&, std::vector<Td>*, std::vector<uint8_t>*)> eval;
};

GradCheckEntry run_case(CheckCase& c) {
  std::vector<Td> analytic;
  std::vector<uint8_t> signs0;
  c.eval(c.inputs, &analytic, &signs0);
  double max_rel = 0.0;
  int64_t total = 0, excluded = 0;
  for (size_t ii = 0; ii < c.inputs.size(); ++ii) {
    Td& x = c.inputs[ii];
    for (int64_t j = 0; j < x.numel(); ++j) {
      const double orig = x[j];
      const double h = 1e-4 * std::max(1.0, std::abs(orig));
      std::vector<uint8_t> sp, sm;
      x[j] = orig + h;
      const double fp = c.eval(c.inputs, nullptr, &sp);
      x[j] = orig - h;
      const double fm = c.eval(c.inputs, nullptr, &sm);
      x[j] = orig;
      ++total;
      if (sp != signs0 || sm != signs0) {
        ++excluded;
        continue;
      }
      const double fd = (fp - fm) / (2.0 * h);
      const double an = analytic[ii][j];
      const double rel = std::abs(an - fd) / std::max({1.0, std::abs(an), std::abs(fd)});
      max_rel = std::max(max_rel, rel);
    }
  }
  // Exclusions must stay rare or the check would stop meaning anything.
  if (total > 0 && excluded * 20 > total) return {c.name, 1.0, c.tol, false};
  return {c.name, max_rel, c.tol, max_rel < c.tol};
}

/// Wraps a single primitive: objective = sum(weights * primitive(inputs)).
template <class Apply>
CheckCase primitive_case(const std::string& name, double tol, std::vector<Td> inputs,
                         Td weights, Apply apply) {
  CheckCase c;
  c.name = name;
  c.tol = tol;
  c.inputs = std::move(inputs);
  c.eval = [weights = std::move(weights), apply](std::vector<Td>& ins, std::vector<Td>* grads,
                                                 std::vector<uint8_t>* signs) -> double {
    Tape<double> tape;
    std::vector<Tape<double>::Id> ids;
    ids.reserve(ins.size());
    for (auto& t : ins) ids.push_back(tape.input(t, true));
    const auto out = apply(tape, ids);
    const Td& ov = tape.value(out);
    if (!ov.same_shape(weights)) throw std::logic_error("gradcheck: weight shape mismatch");
    double obj = 0.0;
    for (int64_t i = 0; i < ov.numel(); ++i) obj += weights[i] * ov[i];
    if (grads) {
      tape.backward(out, weights);
      grads->clear();
      for (auto id : ids) grads->push_back(tape.grad(id));
    }
    if (signs) collect_kink_signs(tape, *signs);
    return obj;
  };
  return c;
}

CheckCase composed_case(const std::string& name, Rng& rng, bool residual, NormKind norm) {
  NetConfig cfg;
  cfg.stages = 2;
  cfg.base_channels = 2;
  cfg.channel_growth = 2.0;
  cfg.residual_encoder = residual;
  cfg.normalization = norm;
  cfg.leaky_slope = 0.01;
  cfg.num_global_classes = 2;
  cfg.patch_shape = {4, 4, 4};
  auto net = std::make_shared<Network<double>>(cfg, rng.next_u64());

  const int64_t B = 2, C = 2, vox = 4 * 4 * 4;
  Td targets({B, C, 4, 4, 4});
  Td annotation({B, C});
  annotation[0 * C + 0] = 1.0;  // sample 0 annotates class 0 only
  annotation[1 * C + 1] = 1.0;  // sample 1 annotates class 1 only
  for (int64_t b = 0; b < B; ++b)
    for (int64_t cc = 0; cc < C; ++cc) {
      if (annotation[b * C + cc] == 0.0) continue;
      for (int64_t i = 0; i < vox; ++i)
        targets[(b * C + cc) * vox + i] = rng.uniform() < 0.4 ? 1.0 : 0.0;
    }

  CheckCase c;
  c.name = name;
  c.tol = 1e-5;
  c.inputs.push_back(random_tensor(rng, {B, 1, 4, 4, 4}, 0.7));
  for (const auto& p : net->parameters()) c.inputs.push_back(p.value);

  c.eval = [net, targets = std::move(targets), annotation = std::move(annotation)](
               std::vector<Td>& ins, std::vector<Td>* grads,
               std::vector<uint8_t>* signs) -> double {
    auto& params = net->parameters();
    for (size_t pi = 0; pi < params.size(); ++pi) params[pi].value = ins[pi + 1];
    typename Network<double>::ForwardRecord rec;
    const Td logits = net->forward(ins[0], &rec, 1);
    LossBatch<double> lb{logits, targets, annotation};
    const LossValue<double> loss = multidataset_loss(lb);
    if (grads) {
      net->zero_grad();
      net->backward(rec, loss.voxel_gradient, 1);
      grads->clear();
      grads->push_back(net->input_gradient(rec));
      for (const auto& p : params) grads->push_back(p.grad);
    }
    if (signs)
      for (const auto& tape : rec.tapes) collect_kink_signs(tape, *signs);
    return loss.total;
  };
  return c;
}

}  // namespace

GradCheckReport run_gradcheck(uint64_t seed) {
  Rng rng = Rng::derive({seed, 0x6CADull});
  GradCheckReport report;
  std::vector<CheckCase> cases;

  {
    std::vector<Td> ins;
    ins.push_back(random_tensor(rng, {2, 6, 6, 6}));
    ins.push_back(random_tensor(rng, {3, 2, 3, 3, 3}, 0.5));
    ins.push_back(random_tensor(rng, {3}, 0.2));
    Td w = random_tensor(rng, {3, 6, 6, 6});
    cases.push_back(primitive_case("conv3d_k3_s1", 1e-6, std::move(ins), std::move(w),
                                   [](Tape<double>& t, const std::vector<Tape<double>::Id>& id) {
                                     return conv3d(t, id[0], id[1], id[2], 1);
                                   }));
  }
  {
    std::vector<Td> ins;
    ins.push_back(random_tensor(rng, {2, 6, 6, 6}));
    ins.push_back(random_tensor(rng, {3, 2, 3, 3, 3}, 0.5));
    ins.push_back(random_tensor(rng, {3}, 0.2));
    Td w = random_tensor(rng, {3, 3, 3, 3});
    cases.push_back(primitive_case("conv3d_k3_s2", 1e-6, std::move(ins), std::move(w),
                                   [](Tape<double>& t, const std::vector<Tape<double>::Id>& id) {
                                     return conv3d(t, id[0], id[1], id[2], 2);
                                   }));
  }
  {
    std::vector<Td> ins;
    ins.push_back(random_tensor(rng, {3, 4, 4, 4}));
    ins.push_back(random_tensor(rng, {2, 3, 1, 1, 1}, 0.5));
    ins.push_back(random_tensor(rng, {2}, 0.2));
    Td w = random_tensor(rng, {2, 4, 4, 4});
    cases.push_back(primitive_case("conv3d_k1_s1", 1e-6, std::move(ins), std::move(w),
                                   [](Tape<double>& t, const std::vector<Tape<double>::Id>& id) {
                                     return conv3d(t, id[0], id[1], id[2], 1);
                                   }));
  }
  {
    std::vector<Td> ins{random_tensor(rng, {2, 3, 3, 3})};
    Td w = random_tensor(rng, {2, 6, 6, 6});
    cases.push_back(primitive_case("upsample_nearest2", 1e-6, std::move(ins), std::move(w),
                                   [](Tape<double>& t, const std::vector<Tape<double>::Id>& id) {
                                     return upsample_nearest2(t, id[0]);
                                   }));
  }
  {
    std::vector<Td> ins{random_tensor(rng, {2, 3, 3, 3}), random_tensor(rng, {3, 3, 3, 3})};
    Td w = random_tensor(rng, {5, 3, 3, 3});
    cases.push_back(primitive_case("concat_channels", 1e-6, std::move(ins), std::move(w),
                                   [](Tape<double>& t, const std::vector<Tape<double>::Id>& id) {
                                     return concat_channels(t, {id[0], id[1]});
                                   }));
  }
  {
    std::vector<Td> ins{random_tensor(rng, {2, 4, 4, 4}), random_tensor(rng, {2, 4, 4, 4})};
    Td w = random_tensor(rng, {2, 4, 4, 4});
    cases.push_back(primitive_case("add", 1e-6, std::move(ins), std::move(w),
                                   [](Tape<double>& t, const std::vector<Tape<double>::Id>& id) {
                                     return add(t, id[0], id[1]);
                                   }));
  }
  {
    std::vector<Td> ins{random_tensor(rng, {2, 4, 4, 4})};
    Td w = random_tensor(rng, {2, 4, 4, 4});
    // Coordinates straddling the kink at 0 are excluded via the sign trace.
    cases.push_back(primitive_case("leaky_relu", 1e-6, std::move(ins), std::move(w),
                                   [](Tape<double>& t, const std::vector<Tape<double>::Id>& id) {
                                     return leaky_relu(t, id[0], 0.01);
                                   }));
  }
  {
    std::vector<Td> ins{random_tensor(rng, {2, 4, 4, 4})};
    Td w = random_tensor(rng, {2, 4, 4, 4});
    cases.push_back(primitive_case("instance_norm", 1e-5, std::move(ins), std::move(w),
                                   [](Tape<double>& t, const std::vector<Tape<double>::Id>& id) {
                                     return instance_norm(t, id[0], 1e-5);
                                   }));
  }
  {
    std::vector<Td> ins{random_tensor(rng, {2, 4, 4, 4})};
    Td w = random_tensor(rng, {2, 4, 4, 4});
    cases.push_back(primitive_case("sigmoid", 1e-6, std::move(ins), std::move(w),
                                   [](Tape<double>& t, const std::vector<Tape<double>::Id>& id) {
                                     return sigmoid(t, id[0]);
                                   }));
  }
  {
    std::vector<Td> ins{random_tensor(rng, {3, 3, 3, 3})};
    Td w = random_tensor(rng, {3, 3, 3, 3});
    cases.push_back(primitive_case("softmax_channels", 1e-6, std::move(ins), std::move(w),
                                   [](Tape<double>& t, const std::vector<Tape<double>::Id>& id) {
                                     return softmax_channels(t, id[0]);
                                   }));
  }
  {
    std::vector<Td> ins{random_tensor(rng, {2, 3, 4, 5})};
    Td w = random_tensor(rng, {3, 5});
    cases.push_back(primitive_case("reduce_sum", 1e-6, std::move(ins), std::move(w),
                                   [](Tape<double>& t, const std::vector<Tape<double>::Id>& id) {
                                     return reduce(t, id[0], {0, 2}, false);
                                   }));
  }
  {
    std::vector<Td> ins{random_tensor(rng, {2, 3, 4, 5})};
    Td w = random_tensor(rng, {2, 4});
    cases.push_back(primitive_case("reduce_mean", 1e-6, std::move(ins), std::move(w),
                                   [](Tape<double>& t, const std::vector<Tape<double>::Id>& id) {
                                     return reduce(t, id[0], {1, 3}, true);
                                   }));
  }

  // Full loss w.r.t. logits.
  {
    const int64_t B = 2, C = 3, vox = 4 * 4 * 4;
    Td targets({B, C, 4, 4, 4});
    Td annotation({B, C});
    for (int64_t b = 0; b < B; ++b)
      for (int64_t cc = 0; cc < C; ++cc)
        annotation[b * C + cc] = rng.uniform() < 0.7 ? 1.0 : 0.0;
    annotation[0] = 1.0;
    for (int64_t b = 0; b < B; ++b)
      for (int64_t cc = 0; cc < C; ++cc) {
        if (annotation[b * C + cc] == 0.0) continue;
        for (int64_t i = 0; i < vox; ++i)
          targets[(b * C + cc) * vox + i] = rng.uniform() < 0.4 ? 1.0 : 0.0;
      }
    CheckCase c;
    c.name = "multidataset_loss";
    c.tol = 1e-6;
    c.inputs.push_back(random_tensor(rng, {B, C, 4, 4, 4}, 1.5));
    c.eval = [targets = std::move(targets), annotation = std::move(annotation)](
                 std::vector<Td>& ins, std::vector<Td>* grads, std::vector<uint8_t>*) -> double {
      LossBatch<double> lb{ins[0], targets, annotation};
      const LossValue<double> loss = multidataset_loss(lb);
      if (grads) {
        grads->clear();
        grads->push_back(loss.voxel_gradient);
      }
      return loss.total;
    };
    cases.push_back(std::move(c));
  }

  // Baseline softmax CE + dice w.r.t. logits.
  {
    const int64_t B = 2, CH = 3, vox = 4 * 4 * 4;
    std::vector<int32_t> labels(static_cast<size_t>(B * vox));
    for (auto& l : labels) l = static_cast<int32_t>(rng.uniform_int(CH));
    CheckCase c;
    c.name = "baseline_softmax_ce_dice";
    c.tol = 1e-6;
    c.inputs.push_back(random_tensor(rng, {B, CH, 4, 4, 4}, 1.5));
    c.eval = [labels = std::move(labels)](std::vector<Td>& ins, std::vector<Td>* grads,
                                          std::vector<uint8_t>*) -> double {
      auto [loss, grad] = baseline_softmax_ce_dice(ins[0], labels);
      if (grads) {
        grads->clear();
        grads->push_back(std::move(grad));
      }
      return loss;
    };
    cases.push_back(std::move(c));
  }

  cases.push_back(composed_case("unet_plus_loss_instance", rng, false, NormKind::Instance));
  cases.push_back(composed_case("unet_plus_loss_resenc_nonorm", rng, true, NormKind::None));

  for (auto& c : cases) report.entries.push_back(run_case(c));
  return report;
}

void write_gradcheck_csv(const GradCheckReport& report, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw InputError("gradcheck: cannot write " + path.string());
  os << "name,max_rel_err,tolerance,pass\n";
  for (const auto& e : report.entries)
    os << e.name << ',' << format_double(e.max_rel_err) << ',' << format_double(e.tolerance)
       << ',' << (e.pass ? 1 : 0) << '\n';
}

}  // namespace mdseg
