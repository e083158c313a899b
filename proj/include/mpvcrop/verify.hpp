#pragma once

// Self-check suite behind `mpvcrop verify`: metric oracles, finite-difference
// gradient checks, the EMA closed form, head-variance examples and the
// structural loss properties of a few real training steps.

#include "mpvcrop/trainer.hpp"

#include <chrono>
#include <cmath>
#include <functional>
#include <unordered_set>
#include <string>
#include <vector>

namespace mpvcrop {

struct CheckResult {
  std::string name;
  bool pass = false;
  double value = 0.0;     ///< the measured quantity (max error, count, ...)
  double threshold = 0.0; ///< what it was compared against
  std::string detail;
  double seconds = 0.0;
};

struct VerifyReport {
  std::vector<CheckResult> checks;
  bool all_pass() const {
    for (const auto& c : checks)
      if (!c.pass) return false;
    return !checks.empty();
  }
  std::size_t failures() const {
    std::size_t n = 0;
    for (const auto& c : checks) n += c.pass ? 0 : 1;
    return n;
  }
};

inline nlohmann::json verify_report_json(const VerifyReport& r) {
  nlohmann::json checks = nlohmann::json::array();
  for (const auto& c : r.checks)
    checks.push_back({{"name", c.name},
                      {"pass", c.pass},
                      {"value", c.value},
                      {"threshold", c.threshold},
                      {"detail", c.detail},
                      {"seconds", c.seconds}});
  return {{"pass", r.all_pass()}, {"failures", r.failures()}, {"checks", checks}};
}

namespace verify {

inline Box random_box(Rng& rng, double min_side) {
  auto axis = [&](double& a, double& b) {
    const double side = rng.uniform(min_side, 1.0);
    a = rng.uniform(0.0, 1.0 - side);
    b = a + side;
  };
  Box out;
  axis(out.x1, out.x2);
  axis(out.y1, out.y2);
  return out;
}

/// IoU by counting grid-cell centers covered by each box.
inline double raster_iou(const Box& a, const Box& b, int grid) {
  long inter = 0, uni = 0;
  for (int i = 0; i < grid; ++i) {
    const double y = (i + 0.5) / grid;
    for (int j = 0; j < grid; ++j) {
      const double x = (j + 0.5) / grid;
      const bool ia = x >= a.x1 && x < a.x2 && y >= a.y1 && y < a.y2;
      const bool ib = x >= b.x1 && x < b.x2 && y >= b.y1 && y < b.y2;
      inter += ia && ib;
      uni += ia || ib;
    }
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

inline double four_edge_bde(const Box& p, const Box& g) {
  const auto pc = p.coords();
  const auto gc = g.coords();
  double s = 0.0;
  for (int k = 0; k < 4; ++k) s += std::fabs(pc[k] - gc[k]);
  return s / 4.0;
}

struct FdResult {
  double max_rel_error = 0.0;
  std::size_t coords = 0;
  std::size_t kink_skipped = 0; ///< probes whose stencil crossed a relu or |.| kink
};

/// Sign pattern of every relu output and every l1 residual on the tape. Two
/// evaluations with equal signatures lie on the same smooth piece.
inline std::vector<bool> kink_signature(const Tensor<double>& loss) {
  using Node = Tensor<double>::Node;
  std::vector<bool> sig;
  std::vector<const Node*> stack{loss.node()};
  std::unordered_set<const Node*> seen;
  while (!stack.empty()) {
    const Node* n = stack.back();
    stack.pop_back();
    if (!seen.insert(n).second) continue;
    const std::string op = n->op;
    if (op == "relu") {
      for (double v : n->value) sig.push_back(v > 0.0);
    } else if (op == "l1_loss" && n->parents.size() == 2) {
      const auto& a = n->parents[0]->value;
      const auto& b = n->parents[1]->value;
      for (std::size_t i = 0; i < a.size(); ++i) sig.push_back(a[i] > b[i]);
    }
    for (auto it = n->parents.rbegin(); it != n->parents.rend(); ++it) stack.push_back(it->get());
  }
  return sig;
}

/// Central finite differences of `loss_fn` against reverse-mode gradients for
/// the tensors in `wrt`. At most `max_coords` coordinates are probed (chosen
/// at random when there are more). Relative error uses a floor of 1e-6 on
/// the denominator so that vanishing gradients compare absolutely. Probes
/// whose stencil crosses a kink are not differentiable there and are skipped.
inline FdResult finite_difference_check(std::vector<Tensor<double>> wrt, const std::function<Tensor<double>()>& loss_fn,
                                        Rng& rng, std::size_t max_coords = 100000, double step = 1e-5) {
  for (auto& t : wrt) {
    t.set_requires_grad(true);
    if (t.has_grad()) std::fill(t.grad().begin(), t.grad().end(), 0.0);
  }
  const auto base = loss_fn();
  const auto base_sig = kink_signature(base);
  backward(base);
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t i = 0; i < wrt.size(); ++i)
    for (std::size_t k = 0; k < wrt[i].numel(); ++k) coords.emplace_back(i, k);
  if (coords.size() > max_coords) {
    for (std::size_t k = 0; k < max_coords; ++k) std::swap(coords[k], coords[k + rng.index(coords.size() - k)]);
    coords.resize(max_coords);
  }
  FdResult r;
  r.coords = coords.size();
  for (auto [i, k] : coords) {
    const double analytic = wrt[i].has_grad() ? wrt[i].grad()[k] : 0.0;
    double& v = wrt[i].value()[k];
    const double orig = v;
    v = orig + step;
    const auto lp = loss_fn();
    v = orig - step;
    const auto lm = loss_fn();
    v = orig;
    if (kink_signature(lp) != base_sig || kink_signature(lm) != base_sig) {
      ++r.kink_skipped;
      continue;
    }
    const double fp = lp.item(), fm = lm.item();
    const double numeric = (fp - fm) / (2.0 * step);
    const double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-6});
    r.max_rel_error = std::max(r.max_rel_error, std::fabs(analytic - numeric) / denom);
  }
  return r;
}

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  auto t = Tensor<double>::zeros(std::move(shape));
  for (auto& v : t.value()) v = rng.uniform(lo, hi);
  return t;
}

/// Values bounded away from zero (keeps relu and |.| kinks out of the FD stencil).
inline Tensor<double> random_tensor_off_zero(Shape shape, Rng& rng, double gap = 0.05) {
  auto t = random_tensor(std::move(shape), rng);
  for (auto& v : t.value()) v = (v < 0 ? -gap : gap) + v * (1.0 - gap);
  return t;
}

/// Scalar readout mean(flat(y) . w) with fixed random weights w.
inline Tensor<double> project(const Tensor<double>& y, const Tensor<double>& w) {
  auto flat = ad::reshape(y, {1, y.numel()});
  return ad::mean(ad::linear(flat, w, Tensor<double>::zeros({1})));
}

struct OpCase {
  std::vector<Tensor<double>> wrt;
  std::function<Tensor<double>()> loss;
};

inline std::vector<std::pair<std::string, std::function<OpCase(Rng&)>>> op_cases() {
  auto readout = [](Rng& rng, std::size_t n) { return random_tensor({1, n}, rng); };
  std::vector<std::pair<std::string, std::function<OpCase(Rng&)>>> cases;
  cases.emplace_back("linear", [=](Rng& rng) {
    const std::size_t N = 1 + rng.index(4), D = 1 + rng.index(6), O = 1 + rng.index(5);
    auto x = random_tensor({N, D}, rng), W = random_tensor({O, D}, rng), b = random_tensor({O}, rng);
    auto w = readout(rng, N * O);
    return OpCase{{x, W, b}, [=] { return project(ad::linear(x, W, b), w); }};
  });
  for (std::size_t stride : {1, 2}) {
    cases.emplace_back("conv2d/stride" + std::to_string(stride), [=](Rng& rng) {
      const std::size_t N = 1 + rng.index(2), C = 1 + rng.index(3), O = 1 + rng.index(3), H = 3 + rng.index(5);
      const std::size_t k = rng.bernoulli(0.5) ? 3 : 1;
      auto x = random_tensor({N, C, H, H}, rng), K = random_tensor({O, C, k, k}, rng), b = random_tensor({O}, rng);
      const std::size_t Ho = (H + 2 * (k / 2) - k) / stride + 1;
      auto w = readout(rng, N * O * Ho * Ho);
      return OpCase{{x, K, b}, [=] { return project(ad::conv2d(x, K, b, stride), w); }};
    });
  }
  auto unary_case = [&](const std::string& name, std::function<Tensor<double>(const Tensor<double>&)> f, bool off_zero) {
    cases.emplace_back(name, [=](Rng& rng) {
      const std::size_t n = 1 + rng.index(12);
      auto x = off_zero ? random_tensor_off_zero({n}, rng) : random_tensor({n}, rng, -3.0, 3.0);
      auto w = readout(rng, n);
      return OpCase{{x}, [=] { return project(f(x), w); }};
    });
  };
  unary_case("relu", [](const Tensor<double>& x) { return ad::relu(x); }, true);
  unary_case("sigmoid", [](const Tensor<double>& x) { return ad::sigmoid(x); }, false);
  unary_case("tanh", [](const Tensor<double>& x) { return ad::tanh(x); }, false);
  unary_case("scale", [](const Tensor<double>& x) { return ad::scale(x, -0.7); }, false);
  cases.emplace_back("add", [=](Rng& rng) {
    const std::size_t n = 1 + rng.index(10);
    auto a = random_tensor({n}, rng), b = random_tensor({n}, rng);
    auto w = readout(rng, n);
    return OpCase{{a, b}, [=] { return project(ad::add(a, b), w); }};
  });
  cases.emplace_back("mean", [=](Rng& rng) {
    auto x = random_tensor({1 + rng.index(5), 1 + rng.index(5)}, rng);
    return OpCase{{x}, [=] { return ad::mean(x); }};
  });
  cases.emplace_back("l1_loss", [=](Rng& rng) {
    const std::size_t n = 1 + rng.index(10);
    auto p = random_tensor({n}, rng);
    auto d = random_tensor_off_zero({n}, rng);
    auto t = Tensor<double>::zeros({n});
    for (std::size_t i = 0; i < n; ++i) t.value()[i] = p.value()[i] + d.value()[i];
    return OpCase{{p, t}, [=] { return ad::l1_loss(p, t); }};
  });
  cases.emplace_back("global_avg_pool", [=](Rng& rng) {
    const std::size_t N = 1 + rng.index(3), C = 1 + rng.index(4), H = 1 + rng.index(5), W = 1 + rng.index(5);
    auto x = random_tensor({N, C, H, W}, rng);
    auto w = readout(rng, N * C);
    return OpCase{{x}, [=] { return project(ad::global_avg_pool(x), w); }};
  });
  cases.emplace_back("reshape", [=](Rng& rng) {
    const std::size_t a = 1 + rng.index(4), b = 1 + rng.index(4);
    auto x = random_tensor({a, b}, rng);
    auto w = readout(rng, a * b);
    return OpCase{{x}, [=] { return project(ad::reshape(x, {b, a}), w); }};
  });
  cases.emplace_back("concat_cols", [=](Rng& rng) {
    const std::size_t N = 1 + rng.index(3), A = 1 + rng.index(4), B = 1 + rng.index(4);
    auto a = random_tensor({N, A}, rng), b = random_tensor({N, B}, rng);
    auto w = readout(rng, N * (A + B));
    return OpCase{{a, b}, [=] { return project(ad::concat_cols(a, b), w); }};
  });
  cases.emplace_back("center_to_corners", [=](Rng& rng) {
    const std::size_t N = 1 + rng.index(4);
    auto x = random_tensor({N, 4}, rng, 0.0, 1.0);
    auto w = readout(rng, N * 4);
    return OpCase{{x}, [=] { return project(ad::center_to_corners(x), w); }};
  });
  cases.emplace_back("bilinear_roi_sample", [=](Rng& rng) {
    const std::size_t N = 1 + rng.index(2), C = 1 + rng.index(3), H = 2 + rng.index(5), W = 2 + rng.index(5);
    const std::size_t P = 1 + rng.index(4);
    auto f = random_tensor({N, C, H, W}, rng);
    std::vector<Box> boxes;
    for (std::size_t n = 0; n < N; ++n) boxes.push_back(random_box(rng, 0.05));
    auto w = readout(rng, N * C * P * P);
    return OpCase{{f}, [=] { return project(ad::bilinear_roi_sample(f, std::span<const Box>(boxes), P), w); }};
  });
  return cases;
}

inline Tensor<double> random_images(std::size_t n, std::size_t side, Rng& rng) {
  return random_tensor({n, 1, side, side}, rng, 0.0, 1.0);
}

inline std::vector<Box> random_targets(std::size_t n, Rng& rng) {
  std::vector<Box> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(random_box(rng, 0.1));
  return out;
}

/// Tiny dataset used by the structural training checks.
inline Dataset tiny_dataset(std::uint64_t seed) {
  DataConfig dc;
  dc.n_labeled = 16;
  dc.n_unlabeled = 32;
  dc.n_val = 8;
  dc.n_test = 8;
  return make_dataset(dc, seed);
}

} // namespace verify

struct VerifyOptions {
  std::uint64_t seed = 0;
  std::size_t instances = 10; ///< random instances per gradient check
  std::size_t raster_pairs = 1000;
  int raster_grid = 400;
  std::size_t composer_coords = 4500; ///< probed coordinates per composer instance (covers every gap parameter)
  std::size_t mpv_coords = 400;       ///< probed coordinates per MPV instance
};

inline VerifyReport run_verify(const VerifyOptions& opt = {}) {
  using clock = std::chrono::steady_clock;
  VerifyReport report;
  auto timed = [&](const std::string& name, const std::function<CheckResult()>& body) {
    const auto t0 = clock::now();
    CheckResult r;
    try {
      r = body();
    } catch (const std::exception& e) {
      r.pass = false;
      r.detail = std::string("exception: ") + e.what();
    }
    r.name = name;
    r.seconds = std::chrono::duration<double>(clock::now() - t0).count();
    report.checks.push_back(r);
  };

  timed("metrics/iou-vs-raster", [&] {
    // Edges on multiples of 1/G make the pixel count exact, so the analytic
    // IoU must agree with the raster to rounding error.
    Rng rng(derive_seed(opt.seed, Stream::policy, {0xA1}));
    const int G = opt.raster_grid;
    auto aligned = [&] {
      auto axis = [&](double& lo, double& hi) {
        const int a = static_cast<int>(rng.index(static_cast<std::size_t>(G)));
        const int b = static_cast<int>(rng.index(static_cast<std::size_t>(G)));
        lo = std::min(a, b) / static_cast<double>(G);
        hi = (std::max(a, b) + 1) / static_cast<double>(G);
      };
      Box out;
      axis(out.x1, out.x2);
      axis(out.y1, out.y2);
      return out;
    };
    double worst = 0.0;
    for (std::size_t k = 0; k < opt.raster_pairs; ++k) {
      const Box a = aligned(), b = aligned();
      worst = std::max(worst, std::fabs(iou(a, b) - verify::raster_iou(a, b, G)));
    }
    return CheckResult{"", worst < 1e-12, worst, 1e-12, std::to_string(opt.raster_pairs) + " grid-aligned pairs", 0.0};
  });
  timed("metrics/bde-four-edge", [&] {
    Rng rng(derive_seed(opt.seed, Stream::policy, {0xA2}));
    std::size_t mismatches = 0;
    for (std::size_t k = 0; k < opt.raster_pairs; ++k) {
      const Box a = verify::random_box(rng, 0.001), b = verify::random_box(rng, 0.001);
      if (bde(a, b) != verify::four_edge_bde(a, b)) ++mismatches;
    }
    return CheckResult{"", mismatches == 0, static_cast<double>(mismatches), 0.0, "exact equality", 0.0};
  });

  std::uint64_t case_tag = 0;
  for (const auto& [name, make] : verify::op_cases()) {
    ++case_tag;
    timed("grad/" + name, [&, tag = case_tag] {
      Rng rng(derive_seed(opt.seed, Stream::policy, {0xB0, tag}));
      double worst = 0.0;
      for (std::size_t i = 0; i < opt.instances; ++i) {
        auto c = make(rng);
        worst = std::max(worst, verify::finite_difference_check(c.wrt, c.loss, rng).max_rel_error);
      }
      return CheckResult{"", worst < 1e-4, worst, 1e-4, std::to_string(opt.instances) + " instances", 0.0};
    });
  }

  // Whole-model checks: at most 1% of probes may be lost to kink crossings.
  auto model_result = [](double worst, std::size_t probed, std::size_t skipped) {
    const bool ok = worst < 1e-4 && skipped * 100 <= probed;
    return CheckResult{"", ok, worst, 1e-4,
                       std::to_string(probed) + " probes, " + std::to_string(skipped) + " skipped at kinks", 0.0};
  };
  for (const std::string pool : {"gap", "flatten"}) {
    timed("grad/composer-" + pool, [&] {
      Rng rng(derive_seed(opt.seed, Stream::policy, {0xC0, pool == "gap" ? 0u : 1u}));
      ModelConfig mc;
      mc.composer_pool = pool;
      double worst = 0.0;
      std::size_t probed = 0, skipped = 0;
      for (std::size_t i = 0; i < opt.instances; ++i) {
        auto p = init_composer<double>(derive_seed(opt.seed, Stream::init_composer, {i}), mc);
        auto images = verify::random_images(2, mc.image_size, rng);
        auto target = boxes_tensor<double>(verify::random_targets(2, rng));
        auto loss = [=] { return ad::l1_loss(composer_forward_raw(p, images), target); };
        const auto fd = verify::finite_difference_check(parameters(p), loss, rng, opt.composer_coords);
        worst = std::max(worst, fd.max_rel_error);
        probed += fd.coords;
        skipped += fd.kink_skipped;
      }
      return model_result(worst, probed, skipped);
    });
  }
  timed("grad/mpv", [&] {
    Rng rng(derive_seed(opt.seed, Stream::policy, {0xC2}));
    ModelConfig mc;
    double worst = 0.0;
    std::size_t probed = 0, skipped = 0;
    for (std::size_t i = 0; i < opt.instances; ++i) {
      auto p = init_mpv<double>(derive_seed(opt.seed, Stream::init_mpv_encoder, {i}), mc);
      const std::size_t head = i % mc.heads;
      auto images = verify::random_images(2, mc.image_size, rng);
      const auto refs = verify::random_targets(2, rng);
      auto target = boxes_tensor<double>(verify::random_targets(2, rng));
      auto loss = [=] {
        return ad::l1_loss(rectified_raw(p, mpv_encode(p, images), std::span<const Box>(refs), head), target);
      };
      auto wrt = p.encoder.tensors();
      for (auto& t : p.heads[head].tensors()) wrt.push_back(t);
      const auto fd = verify::finite_difference_check(wrt, loss, rng, opt.mpv_coords);
      worst = std::max(worst, fd.max_rel_error);
      probed += fd.coords;
      skipped += fd.kink_skipped;
    }
    return model_result(worst, probed, skipped);
  });

  timed("ema/closed-form", [&] {
    Rng rng(derive_seed(opt.seed, Stream::policy, {0xD0}));
    const double alpha = 0.995;
    auto teacher = verify::random_tensor({64}, rng);
    const auto student = verify::random_tensor({64}, rng);
    auto gap = [&] {
      double m = 0.0;
      for (std::size_t k = 0; k < 64; ++k) m = std::max(m, std::fabs(teacher.value()[k] - student.value()[k]));
      return m;
    };
    const double g0 = gap();
    std::vector<NamedTensor<double>> t{{"w", teacher}}, s{{"w", student}};
    double worst = 0.0;
    for (int n = 1; n <= 1000; ++n) {
      ema_update(t, s, alpha);
      worst = std::max(worst, std::fabs(gap() - std::pow(alpha, n) * g0));
    }
    return CheckResult{"", worst <= 1e-12, worst, 1e-12, "n = 1..1000", 0.0};
  });

  timed("variance/worked-example", [&] {
    const std::vector<Box> r{{0, 0, 0.5, 0.5}, {0, 0, 0.5, 0.6}};
    const double err = std::fabs(head_variance(r) - 0.025);
    return CheckResult{"", err <= 1e-12, err, 1e-12, "", 0.0};
  });
  timed("variance/identical-set", [&] {
    const Box b{0.1, 0.2, 0.7, 0.9};
    const std::vector<Box> r(9, b);
    const double v = head_variance(r);
    return CheckResult{"", v == 0.0, v, 0.0, "", 0.0};
  });
  timed("variance/argmin-scale-invariance", [&] {
    Rng rng(derive_seed(opt.seed, Stream::policy, {0xD1}));
    std::size_t changed = 0;
    for (int k = 0; k < 1000; ++k) {
      std::vector<double> s(5);
      for (auto& v : s) v = rng.uniform(0.0, 1.0);
      const double c = std::exp(rng.uniform(-5.0, 5.0));
      std::vector<double> scaled;
      for (double v : s) scaled.push_back(c * v);
      if (argmin_index(s) != argmin_index(scaled)) ++changed;
    }
    return CheckResult{"", changed == 0, static_cast<double>(changed), 0.0, "1000 random score vectors", 0.0};
  });

  timed("train/loss-recombination", [&] {
    const auto data = verify::tiny_dataset(opt.seed);
    TrainConfig cfg;
    cfg.seed = opt.seed;
    cfg.epochs = 2;
    cfg.warmup_epochs = 1;
    cfg.batch_size = 8;
    ModelConfig mc;
    TeacherStudentState<double> st(init_models<double>(cfg.seed, mc), cfg.alpha, AdamConfig{cfg.lr});
    double worst = 0.0;
    std::size_t steps = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
      const bool semi = epoch >= cfg.warmup_epochs;
      PseudoLabelCache cache;
      if (semi) {
        st.copy_student_to_teacher();
        cache = generate_pseudo_labels(st.teacher, data.unlabeled, cfg.source, cfg.policy, epoch, cfg.seed);
      }
      for (std::size_t s = 0; s < 3; ++s, ++steps) {
        const auto r = train_step(st, data, cfg, semi ? &cache : nullptr, epoch, s);
        worst = std::max(worst, std::fabs(r.total - total_loss(r, cfg.lambda)) / std::max(1.0, std::fabs(r.total)));
        if (!semi && (r.composer_unsup != 0.0 || r.mpv_unsup != 0.0)) worst = 1.0;
      }
    }
    return CheckResult{"", worst <= 1e-14, worst, 1e-14, std::to_string(steps) + " steps", 0.0};
  });
  timed("train/head-gradient-isolation", [&] {
    Rng rng(derive_seed(opt.seed, Stream::policy, {0xE0}));
    ModelConfig mc;
    double leaked = 0.0;
    bool own_nonzero = true;
    for (std::size_t j = 0; j < mc.heads; ++j) {
      auto p = init_mpv<double>(opt.seed + j, mc);
      auto all = parameters(p);
      for (auto& t : all) t.set_requires_grad(true);
      auto images = verify::random_images(3, mc.image_size, rng);
      const auto refs = verify::random_targets(3, rng);
      auto target = boxes_tensor<double>(verify::random_targets(3, rng));
      backward(ad::l1_loss(rectified_raw(p, mpv_encode(p, images), std::span<const Box>(refs), j), target));
      for (std::size_t k = 0; k < mc.heads; ++k) {
        double mag = 0.0;
        for (auto& t : p.heads[k].tensors())
          if (t.has_grad())
            for (double g : t.grad()) mag += std::fabs(g);
        if (k == j)
          own_nonzero = own_nonzero && mag > 0.0;
        else
          leaked += mag;
      }
    }
    return CheckResult{"", leaked == 0.0 && own_nonzero, leaked, 0.0, own_nonzero ? "" : "a head received no gradient", 0.0};
  });
  return report;
}

} // namespace mpvcrop
