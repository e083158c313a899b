#pragma once

// Two-stage training: a supervised warm-up on labeled data, then a
// semi-supervised stage in which an EMA teacher labels the unlabeled pool
// once per epoch and the student learns from both pools.

#include "mpvcrop/checkpoint.hpp"
#include "mpvcrop/data.hpp"
#include "mpvcrop/metrics.hpp"
#include "mpvcrop/models.hpp"
#include "mpvcrop/policy.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <unordered_set>
#include <vector>

namespace mpvcrop {

struct TrainConfig {
  int epochs = 60;
  int warmup_epochs = 9;
  std::size_t steps_per_epoch = 50;
  std::size_t batch_size = 64;
  double labeled_fraction = 0.5;
  double lr = 3e-4;
  int lr_decay_epoch = 30; ///< lr is multiplied by lr_decay_factor from this epoch on
  double lr_decay_factor = 0.5;
  double lambda = 4.0;
  double alpha = 0.995;
  double rho_start = 0.2;
  double rho_end = 0.05;
  bool use_mpv = true;
  PseudoLabelSource source = PseudoLabelSource::select;
  PolicyConfig policy;
  StrongAugmentConfig strong;
  std::uint64_t seed = 0;
  bool check_tape = true; ///< assert every step that no teacher tensor is on the tape

  int semi_epochs() const { return epochs - warmup_epochs; }

  void validate() const {
    auto fail = [](const std::string& m) { throw usage_error("train config: " + m); };
    if (epochs < 1) fail("epochs must be positive");
    if (warmup_epochs < 0 || warmup_epochs > epochs) fail("warmup_epochs must lie in [0, epochs]");
    if (steps_per_epoch < 1) fail("steps_per_epoch must be positive");
    if (batch_size < 2) fail("batch_size must be at least 2");
    if (!(labeled_fraction > 0.0 && labeled_fraction < 1.0)) fail("labeled_fraction must lie in (0,1)");
    if (!(lambda >= 0.0)) fail("lambda must be non-negative");
    if (!(alpha > 0.0 && alpha < 1.0)) fail("alpha must lie in (0,1)");
    if (rho_start < 0.0 || rho_end < 0.0) fail("jitter ranges must be non-negative");
    if (policy.jitters < 1) fail("policy.jitters must be at least 1");
    if (!use_mpv && source != PseudoLabelSource::composer) fail("pseudo-label source needs the MPV-Net (set use_mpv)");
  }
};

struct LossReport {
  double composer_sup = 0.0;   ///< l_s^c
  double composer_unsup = 0.0; ///< l_u^c
  double mpv_sup = 0.0;        ///< l_s^f
  double mpv_unsup = 0.0;      ///< l_u^f
  double total = 0.0;
};

inline double total_loss(const LossReport& r, double lambda) {
  return r.composer_sup + r.mpv_sup + lambda * (r.composer_unsup + r.mpv_unsup);
}

template <class T>
struct TeacherStudentState {
  ModelPair<T> student;
  ModelPair<T> teacher;
  bool teacher_ready = false;
  double alpha = 0.995;
  Adam<T> optimizer;

  TeacherStudentState(ModelPair<T> s, double a, AdamConfig adam)
      : student(std::move(s)), alpha(a), optimizer(all_parameters(student), adam) {}

  /// Independent copy: parameters, teacher and optimizer moments are duplicated.
  TeacherStudentState deep_copy() const {
    TeacherStudentState out = *this;
    out.student.composer = clone_params(student.composer, true);
    out.student.mpv = clone_params(student.mpv, true);
    if (teacher_ready) {
      out.teacher.composer = clone_params(teacher.composer, false);
      out.teacher.mpv = clone_params(teacher.mpv, false);
    }
    out.optimizer = optimizer.rebound(all_parameters(out.student));
    return out;
  }

  static std::vector<Tensor<T>> all_parameters(const ModelPair<T>& m) {
    auto out = parameters(m.composer);
    for (auto& t : parameters(m.mpv)) out.push_back(t);
    return out;
  }

  /// Teacher <- exact copy of the student, detached from all gradients.
  void copy_student_to_teacher() {
    teacher.composer = clone_params(student.composer, false);
    teacher.mpv = clone_params(student.mpv, false);
    teacher_ready = true;
  }

  /// The model used for inference: the teacher once it exists.
  const ModelPair<T>& inference_model() const { return teacher_ready ? teacher : student; }
};

template <class T>
ModelPair<T> init_models(std::uint64_t seed, const ModelConfig& cfg) {
  return {init_composer<T>(seed, cfg), init_mpv<T>(seed, cfg)};
}

/// teacher <- alpha * teacher + (1 - alpha) * student, tensor by tensor.
template <class T>
void ema_update(const std::vector<NamedTensor<T>>& teacher, const std::vector<NamedTensor<T>>& student, double alpha) {
  if (teacher.size() != student.size()) throw contract_error("ema_update: parameter count mismatch");
  const T a = static_cast<T>(alpha), b = static_cast<T>(1.0 - alpha);
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    auto t = teacher[i].tensor;
    const auto& s = student[i].tensor;
    if (t.shape() != s.shape())
      throw contract_error("ema_update: shape mismatch for " + teacher[i].name + ": " + shape_str(t.shape()) + " vs " +
                           shape_str(s.shape()));
    auto tv = t.value();
    auto sv = s.value();
    for (std::size_t k = 0; k < tv.size(); ++k) tv[k] = a * tv[k] + b * sv[k];
  }
}

template <class T>
void ema_update(TeacherStudentState<T>& st, double alpha) {
  ema_update(st.teacher.composer.named_parameters(), st.student.composer.named_parameters(), alpha);
  ema_update(st.teacher.mpv.named_parameters(), st.student.mpv.named_parameters(), alpha);
}

/// Box-jitter range for MPV training at `epoch`: rho_start through warm-up,
/// then linear from rho_start (first semi-supervised epoch) to rho_end (last).
inline double anneal_rho(int epoch, const TrainConfig& cfg) {
  if (epoch < cfg.warmup_epochs) return cfg.rho_start;
  const int semi = cfg.semi_epochs();
  if (semi <= 1) return cfg.rho_start;
  const double t = std::clamp(static_cast<double>(epoch - cfg.warmup_epochs) / static_cast<double>(semi - 1), 0.0, 1.0);
  return cfg.rho_start + t * (cfg.rho_end - cfg.rho_start);
}

inline double learning_rate(int epoch, const TrainConfig& cfg) {
  return epoch >= cfg.lr_decay_epoch ? cfg.lr * cfg.lr_decay_factor : cfg.lr;
}

/// Collects every tensor node reachable from `root` through recorded history.
template <class T>
std::unordered_set<const void*> tape_nodes(const Tensor<T>& root) {
  std::unordered_set<const void*> seen;
  std::vector<const typename Tensor<T>::Node*> stack{root.node()};
  while (!stack.empty()) {
    const auto* n = stack.back();
    stack.pop_back();
    if (!seen.insert(n).second) continue;
    for (const auto& p : n->parents) stack.push_back(p.get());
  }
  return seen;
}

namespace detail {

template <class T>
struct SubsetLosses {
  std::optional<Tensor<T>> composer;
  std::optional<Tensor<T>> mpv;
};

/// Composer and MPV losses for one pool (labeled or unlabeled) of the batch.
template <class T>
SubsetLosses<T> subset_losses(const ModelPair<T>& student, const std::vector<Augmented>& views, bool use_mpv, double rho,
                              std::uint64_t jitter_seed) {
  SubsetLosses<T> out;
  if (views.empty()) return out;
  std::vector<const Image*> ptrs;
  std::vector<Box> targets;
  for (const auto& v : views) {
    ptrs.push_back(&v.image);
    targets.push_back(v.box);
  }
  const auto images = image_batch<T>(ptrs);
  const auto target = boxes_tensor<T>(targets);
  const auto center_size = composer_center_size(student.composer, images);
  out.composer = ad::l1_loss(ad::center_to_corners(center_size), target);
  if (!use_mpv) return out;

  // Detached composer boxes, jittered independently for every head.
  const auto predicted = decode_boxes(center_size);
  const std::size_t H = student.mpv.num_heads();
  std::vector<std::vector<Box>> refs(H, std::vector<Box>(views.size()));
  for (std::size_t n = 0; n < views.size(); ++n) {
    Rng rng(derive_seed(jitter_seed, Stream::mpv_jitter, {n}));
    for (std::size_t j = 0; j < H; ++j) refs[j][n] = jitter(predicted[n], {rho}, rng);
  }
  const auto features = mpv_encode(student.mpv, images);
  std::optional<Tensor<T>> sum;
  for (std::size_t j = 0; j < H; ++j) {
    auto lj = ad::l1_loss(rectified_raw(student.mpv, features, refs[j], j), target);
    sum = sum ? ad::add(*sum, lj) : lj;
  }
  out.mpv = ad::scale(*sum, static_cast<T>(1.0 / static_cast<double>(H)));
  return out;
}

template <class T>
double value_of(const std::optional<Tensor<T>>& t) {
  return t ? static_cast<double>(t->item()) : 0.0;
}

} // namespace detail

/// One optimizer step. `cache` must be non-null in the semi-supervised stage.
template <class T>
LossReport train_step(TeacherStudentState<T>& st, const Dataset& data, const TrainConfig& cfg, const PseudoLabelCache* cache,
                      int epoch, std::size_t step) {
  const bool semi = epoch >= cfg.warmup_epochs;
  const auto e = static_cast<std::uint64_t>(epoch);
  const double rho = anneal_rho(epoch, cfg);
  const auto idx = sample_batch(data, cfg.batch_size, semi ? cfg.labeled_fraction : 1.0,
                                derive_seed(cfg.seed, Stream::batch, {e, step}));

  std::vector<Augmented> labeled, unlabeled;
  for (std::size_t k = 0; k < idx.labeled.size(); ++k) {
    const auto& sc = data.labeled[idx.labeled[k]];
    labeled.push_back(weak_augment(sc.image, sc.gt_crop, derive_seed(cfg.seed, Stream::augment, {e, step, 0, k})));
  }
  if (semi) {
    if (!cache || cache->entries.size() != data.unlabeled.size())
      throw contract_error("train_step: pseudo labels missing for epoch " + std::to_string(epoch) + " step " +
                           std::to_string(step));
    for (std::size_t k = 0; k < idx.unlabeled.size(); ++k) {
      const std::size_t i = idx.unlabeled[k];
      // Pseudo label mapped to the original frame; strong_augment remaps it
      // into the student's view alongside the image.
      unlabeled.push_back(strong_augment(data.unlabeled[i].image, cache->entries[i].in_original_frame(),
                                         derive_seed(cfg.seed, Stream::augment, {e, step, 1, k}), cfg.strong));
    }
  }

  const auto jseed = derive_seed(cfg.seed, Stream::mpv_jitter, {e, step});
  auto sup = detail::subset_losses(st.student, labeled, cfg.use_mpv, rho, derive_seed(jseed, Stream::mpv_jitter, {0}));
  auto uns = detail::subset_losses(st.student, unlabeled, cfg.use_mpv, rho, derive_seed(jseed, Stream::mpv_jitter, {1}));

  LossReport rep;
  rep.composer_sup = detail::value_of(sup.composer);
  rep.mpv_sup = detail::value_of(sup.mpv);
  rep.composer_unsup = detail::value_of(uns.composer);
  rep.mpv_unsup = detail::value_of(uns.mpv);

  // l = l_s^c + l_s^f + lambda * (l_u^c + l_u^f)
  Tensor<T> total = *sup.composer;
  if (sup.mpv) total = ad::add(total, *sup.mpv);
  std::optional<Tensor<T>> unsup = uns.composer;
  if (uns.mpv) unsup = ad::add(*unsup, *uns.mpv);
  if (unsup) total = ad::add(total, ad::scale(*unsup, static_cast<T>(cfg.lambda)));
  rep.total = static_cast<double>(total.item());

  if (cfg.check_tape && st.teacher_ready) {
    const auto nodes = tape_nodes(total);
    for (const auto& t : TeacherStudentState<T>::all_parameters(st.teacher))
      if (nodes.count(t.node()) || t.requires_grad() || t.has_grad())
        throw contract_error("train_step: teacher tensor reached the gradient tape at epoch " + std::to_string(epoch));
  }

  zero_grads(st.optimizer.params());
  backward(total);
  st.optimizer.step();
  if (semi) ema_update(st, cfg.alpha);
  return rep;
}

struct EpochRecord {
  int epoch = 0;
  bool semi = false;
  double val_iou = 0.0;
  double val_bde = 0.0;
  LossReport loss; ///< means over the epoch's steps
  double rho = 0.0;
  double lr = 0.0;
  double pseudo_label_iou = 0.0; ///< diagnostic, semi-supervised epochs only
  double seconds = 0.0;
};

template <class T>
struct TrainResult {
  TeacherStudentState<T> state;
  std::vector<EpochRecord> history;
  std::vector<PseudoLabelCache> caches; ///< one per semi-supervised epoch when kept
};

struct RunOptions {
  std::optional<std::filesystem::path> out_dir{}; ///< where metrics, pseudo labels and checkpoints go
  bool keep_caches = false;
  bool evaluate_each_epoch = true;
  std::function<void(const EpochRecord&)> on_epoch{};
  /// Resume from a state captured at the end of this many epochs (skips them).
  int start_epoch = 0;
  /// Stop before this epoch (negative: run to the end). A stopped run keeps
  /// the state exactly as a longer run would have it at that point.
  int stop_epoch = -1;
};

inline constexpr const char* kMetricsHeader =
    "epoch,stage,val_iou,val_bde,loss_comp_sup,loss_comp_unsup,loss_mpv_sup,loss_mpv_unsup,loss_total,rho,lr,pl_diag_iou";

inline std::string metrics_row(const EpochRecord& r) {
  char buf[512];
  char pl[32] = "";
  if (r.semi) std::snprintf(pl, sizeof pl, "%.6f", r.pseudo_label_iou);
  std::snprintf(buf, sizeof buf, "%d,%s,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.8f,%s", r.epoch, r.semi ? "semi" : "warmup",
                r.val_iou, r.val_bde, r.loss.composer_sup, r.loss.composer_unsup, r.loss.mpv_sup, r.loss.mpv_unsup,
                r.loss.total, r.rho, r.lr, pl);
  return buf;
}

template <class T>
nlohmann::json state_checkpoint_json(const TeacherStudentState<T>& st, const nlohmann::json& meta) {
  std::vector<NamedTensor<T>> all;
  auto add = [&](const std::string& prefix, const ModelPair<T>& m) {
    for (auto& nt : m.composer.named_parameters()) all.push_back({prefix + nt.name, nt.tensor});
    for (auto& nt : m.mpv.named_parameters()) all.push_back({prefix + nt.name, nt.tensor});
  };
  add("student.", st.student);
  add("teacher.", st.inference_model());
  return tensors_to_json(all, meta);
}

/// Loads a checkpoint's teacher tensors into `model` (shapes must match).
template <class T>
void load_teacher_from_checkpoint(const nlohmann::json& j, ModelPair<T>& model, const std::string& prefix = "teacher.") {
  std::vector<NamedTensor<T>> all;
  for (auto& nt : model.composer.named_parameters()) all.push_back({prefix + nt.name, nt.tensor});
  for (auto& nt : model.mpv.named_parameters()) all.push_back({prefix + nt.name, nt.tensor});
  tensors_from_json(j, all);
}

/// Runs warm-up then semi-supervised training on `data`. When there are no
/// semi-supervised epochs the result is the supervised baseline, and the
/// teacher is set to a copy of the final student for inference.
template <class T>
TrainResult<T> run_training(const TrainConfig& cfg, const ModelConfig& mcfg, const Dataset& data, const RunOptions& opts = {},
                            std::optional<TeacherStudentState<T>> resume = std::nullopt) {
  cfg.validate();
  if (data.labeled.empty()) throw usage_error("run_training: no labeled data");
  if (cfg.semi_epochs() > 0 && data.unlabeled.empty()) throw usage_error("run_training: no unlabeled data");
  TrainResult<T> result{resume ? std::move(*resume)
                               : TeacherStudentState<T>(init_models<T>(cfg.seed, mcfg), cfg.alpha, AdamConfig{cfg.lr}),
                        {}, {}};
  auto& st = result.state;
  st.alpha = cfg.alpha;

  std::ofstream metrics;
  if (opts.out_dir) {
    std::filesystem::create_directories(*opts.out_dir / "pseudo_labels");
    std::filesystem::create_directories(*opts.out_dir / "checkpoints");
    metrics.open(*opts.out_dir / "metrics.csv");
    if (!metrics) throw checkpoint_error("cannot write metrics.csv in " + opts.out_dir->string());
    metrics << kMetricsHeader << '\n';
  }

  const PseudoLabelSource source = cfg.use_mpv ? cfg.source : PseudoLabelSource::composer;
  PseudoLabelCache cache;
  const int end_epoch = opts.stop_epoch >= 0 ? std::min(opts.stop_epoch, cfg.epochs) : cfg.epochs;
  for (int epoch = opts.start_epoch; epoch < end_epoch; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const bool semi = epoch >= cfg.warmup_epochs;
    if (semi && !st.teacher_ready) st.copy_student_to_teacher();
    if (semi) {
      cache = generate_pseudo_labels(st.teacher, data.unlabeled, source, cfg.policy, epoch, cfg.seed);
      if (opts.out_dir) {
        char name[64];
        std::snprintf(name, sizeof name, "epoch_%03d.csv", epoch);
        write_cache_csv(*opts.out_dir / "pseudo_labels" / name, cache);
      }
    }
    st.optimizer.set_lr(learning_rate(epoch, cfg));

    EpochRecord rec;
    rec.epoch = epoch;
    rec.semi = semi;
    rec.rho = anneal_rho(epoch, cfg);
    rec.lr = st.optimizer.lr();
    rec.pseudo_label_iou = semi ? cache.mean_diagnostic_iou() : 0.0;
    for (std::size_t s = 0; s < cfg.steps_per_epoch; ++s) {
      LossReport r;
      try {
        r = train_step(st, data, cfg, semi ? &cache : nullptr, epoch, s);
      } catch (const contract_error& e) {
        throw contract_error(std::string(e.what()) + " [epoch " + std::to_string(epoch) + ", step " + std::to_string(s) + "]");
      }
      rec.loss.composer_sup += r.composer_sup;
      rec.loss.composer_unsup += r.composer_unsup;
      rec.loss.mpv_sup += r.mpv_sup;
      rec.loss.mpv_unsup += r.mpv_unsup;
      rec.loss.total += r.total;
    }
    const double inv = 1.0 / static_cast<double>(cfg.steps_per_epoch);
    rec.loss.composer_sup *= inv;
    rec.loss.composer_unsup *= inv;
    rec.loss.mpv_sup *= inv;
    rec.loss.mpv_unsup *= inv;
    rec.loss.total *= inv;

    if (opts.evaluate_each_epoch) {
      const auto rep = evaluate_split(st.inference_model(), data, Split::val, InferenceMode::composer_only, cfg.policy, cfg.seed);
      rec.val_iou = rep.mean_iou;
      rec.val_bde = rep.mean_bde;
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (opts.keep_caches && semi) result.caches.push_back(cache);
    if (metrics.is_open()) metrics << metrics_row(rec) << '\n' << std::flush;
    if (opts.on_epoch) opts.on_epoch(rec);
    result.history.push_back(rec);

    if (opts.out_dir && epoch + 1 == cfg.warmup_epochs)
      write_json_file(*opts.out_dir / "checkpoints" / "warmup.json",
                      state_checkpoint_json(st, {{"epoch", epoch}, {"stage", "warmup"}, {"seed", cfg.seed},
                                                {"model", model_config_json(mcfg)}}));
  }
  if (end_epoch < cfg.epochs) return result;
  if (!st.teacher_ready) st.copy_student_to_teacher();
  if (opts.out_dir)
    write_json_file(*opts.out_dir / "checkpoints" / "final.json",
                    state_checkpoint_json(st, {{"epoch", cfg.epochs - 1}, {"stage", "final"}, {"seed", cfg.seed},
                                                {"model", model_config_json(mcfg)}}));
  return result;
}

} // namespace mpvcrop
