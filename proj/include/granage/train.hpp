#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "granage/checkpoint.hpp"
#include "granage/data.hpp"
#include "granage/losses.hpp"
#include "granage/model.hpp"
#include "granage/optim.hpp"

namespace granage::train {

namespace stream {
inline constexpr uint64_t kShuffle = 0x7368756666ULL;
inline constexpr uint64_t kAugment = 0x617567ULL;
}  // namespace stream

class DivergenceError : public RuntimeError {
public:
  DivergenceError(int epoch, int step, const std::string& what)
      : RuntimeError("training diverged at epoch " + std::to_string(epoch) + ", step " +
                     std::to_string(step) + ": " + what),
        epoch_(epoch), step_(step) {}
  int epoch() const { return epoch_; }
  int step() const { return step_; }

private:
  int epoch_, step_;
};

struct TrainResult {
  model::Model model;
  TrainHistory history;
};

namespace detail {

// Deterministic Fisher-Yates driven by the epoch's derived stream.
inline std::vector<size_t> shuffled_indices(size_t n, uint64_t seed, int epoch) {
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  Rng rng = Rng::derive(seed, {stream::kShuffle, static_cast<uint64_t>(epoch)});
  for (size_t i = n; i > 1; --i)
    std::swap(order[i - 1], order[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(i) - 1))]);
  return order;
}

inline void stack_into(Tensor& batch, size_t row, const Tensor& image) {
  const size_t stride = image.numel();
  std::copy(image.data.begin(), image.data.end(), batch.data.begin() + row * stride);
}

}  // namespace detail

// Mean aggregate loss over a dataset with augmentation off.
template <class Dataset>
double dataset_loss(const model::Model& model, const Dataset& ds, const losses::LossConfig& loss,
                    int batch_size) {
  const size_t n = ds.size();
  const int s = model.spec().input_size;
  double total = 0.0;
  for (size_t start = 0; start < n; start += static_cast<size_t>(batch_size)) {
    const size_t b = std::min(static_cast<size_t>(batch_size), n - start);
    Tensor batch({static_cast<int64_t>(b), 3, s, s});
    std::vector<double> ages(b);
    for (size_t i = 0; i < b; ++i) {
      data::Sample sample = ds.sample(start + i);
      detail::stack_into(batch, i, sample.image);
      ages[i] = sample.age;
    }
    const auto outs = model.forward(batch);
    for (size_t i = 0; i < b; ++i)
      total += losses::aggregate_loss(outs[i], AgeLabel{ages[i]}, loss).aggregate;
  }
  return total / static_cast<double>(n);
}

// One shuffled pass over the training split followed by a validation pass;
// repeats until max_epochs or early stop. Checkpoints (last + best) and
// history.csv land in cfg.out_dir when set.
template <class TrainSet, class ValSet>
TrainResult train(model::Model model, const TrainSet& train_set, const ValSet& val_set,
                  const TrainConfig& cfg, const data::AugmentConfig& augment_cfg = {},
                  std::optional<Checkpoint> resume = std::nullopt) {
  validate(cfg);
  data::validate(augment_cfg);
  if (train_set.size() == 0 || val_set.size() == 0)
    throw ValueError("train: empty dataset split");
  for (int w : cfg.loss.granularities)
    if (!model.has_branch(w))
      throw ValueError("train: model is missing branch " + branch_label(w) +
                       " required by the loss config");
  if (cfg.loss.use_regression && !model.has_regression())
    throw ValueError("train: model is missing branch regression required by the loss config");

  TrainHistory history;
  std::unique_ptr<Optimizer> optimizer;
  if (resume) {
    history = resume->history;
    optimizer = restore_optimizer(*resume, model);
  }
  if (!optimizer) optimizer = make_optimizer(cfg.optimizer_id);

  const std::string out_dir = cfg.out_dir;
  if (!out_dir.empty()) std::filesystem::create_directories(out_dir);

  const auto params = model.parameters();
  std::vector<Tensor> grads = model.zero_grads();
  const int s = model.spec().input_size;
  const size_t n = train_set.size();

  double best_val = std::numeric_limits<double>::infinity();
  int best_epoch = 0;
  for (const auto& r : history.epochs)
    if (r.val_loss < best_val) {
      best_val = r.val_loss;
      best_epoch = r.epoch;
    }

  for (int epoch = static_cast<int>(history.epochs.size()) + 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = plateau_lr(history, cfg);
    const auto order = detail::shuffled_indices(n, cfg.seed, epoch);

    double loss_sum = 0.0;
    std::map<int, double> term_sums;
    double reg_sum = 0.0;
    int steps = 0;

    for (size_t start = 0; start < n; start += static_cast<size_t>(cfg.batch_size)) {
      const size_t b = std::min(static_cast<size_t>(cfg.batch_size), n - start);
      Tensor batch({static_cast<int64_t>(b), 3, s, s});
      std::vector<double> ages(b);
      for (size_t i = 0; i < b; ++i) {
        const size_t idx = order[start + i];
        data::Sample sample = train_set.sample(idx);
        if (augment_cfg.enabled) {
          Rng rng = Rng::derive(cfg.seed, {stream::kAugment, static_cast<uint64_t>(epoch),
                                           static_cast<uint64_t>(idx)});
          sample.image = data::augment(sample.image, augment_cfg, rng);
        }
        detail::stack_into(batch, i, sample.image);
        ages[i] = sample.age;
      }

      model::ForwardContext ctx;
      const auto outs = model.forward(batch, &ctx);

      model::BatchGradients bg;
      for (int w : cfg.loss.granularities)
        bg.logit_grads.emplace(w, Tensor({static_cast<int64_t>(b),
                                          spec_for_width(w).num_classes}));
      if (cfg.loss.use_regression)
        bg.regression_grads = Tensor({static_cast<int64_t>(b)});

      for (size_t i = 0; i < b; ++i) {
        const AgeLabel age{ages[i]};
        const auto bd = losses::aggregate_loss(outs[i], age, cfg.loss);
        if (!std::isfinite(bd.aggregate))
          throw DivergenceError(epoch, steps + 1, "non-finite training loss");
        loss_sum += bd.aggregate;
        for (const auto& [w, v] : bd.classification) term_sums[w] += v;
        if (bd.regression) reg_sum += *bd.regression;

        const auto g = losses::loss_gradients(outs[i], age, cfg.loss);
        for (int w : cfg.loss.granularities) {
          const auto& gv = g.logit_grads.at(w);
          double* row = bg.logit_grads.at(w).data.data() + i * gv.size();
          for (size_t k = 0; k < gv.size(); ++k) row[k] = gv[k] / static_cast<double>(b);
        }
        if (cfg.loss.use_regression)
          bg.regression_grads.data[i] = *g.regression_grad / static_cast<double>(b);
      }

      for (auto& g : grads) g.fill(0.0);
      model.backward(ctx, bg, grads);
      optimizer->step(params, grads, lr);
      ++steps;
    }

    const double val_loss = dataset_loss(model, val_set, cfg.loss, cfg.batch_size);
    if (!std::isfinite(val_loss))
      throw DivergenceError(epoch, steps, "non-finite validation loss");

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.train_loss = loss_sum / static_cast<double>(n);
    for (const auto& [w, v] : term_sums)
      rec.train_terms.classification[w] = v / static_cast<double>(n);
    if (cfg.loss.use_regression)
      rec.train_terms.regression = reg_sum / static_cast<double>(n);
    rec.train_terms.aggregate = rec.train_loss;
    rec.val_loss = val_loss;
    rec.steps = steps;
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    history.epochs.push_back(rec);

    if (val_loss < best_val) {
      best_val = val_loss;
      best_epoch = epoch;
    }
    if (!out_dir.empty()) {
      save_checkpoint(model, history, cfg.seed, optimizer.get(), out_dir + "/last.ckpt");
      if (best_epoch == epoch)
        save_checkpoint(model, history, cfg.seed, optimizer.get(), out_dir + "/best.ckpt");
      std::ofstream csv(out_dir + "/history.csv", std::ios::trunc);
      csv << history_csv(history);
    }
    if (cfg.early_stop_patience > 0 && epoch - best_epoch >= cfg.early_stop_patience) break;
  }

  return {std::move(model), std::move(history)};
}

}  // namespace granage::train
