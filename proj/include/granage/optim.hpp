#pragma once

#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "granage/common.hpp"
#include "granage/losses.hpp"
#include "granage/nn.hpp"
#include "granage/serialize.hpp"

namespace granage::train {

struct TrainConfig {
  double initial_lr = 1e-3;
  int plateau_patience_epochs = 8;
  double lr_decay_factor = 10.0;
  int max_epochs = 30;
  int batch_size = 32;
  uint64_t seed = 0;
  losses::LossConfig loss;
  std::string optimizer_id = "adam";
  int early_stop_patience = 0;  // 0 disables early stopping
  std::string out_dir;          // empty: no checkpoints or history files
};

inline void validate(const TrainConfig& cfg) {
  // initial_lr == 0 is allowed and freezes the model (used by tests).
  if (cfg.initial_lr < 0.0) throw ValueError("train config: initial_lr must be >= 0");
  if (cfg.plateau_patience_epochs < 1)
    throw ValueError("train config: plateau_patience_epochs must be >= 1");
  if (!(cfg.lr_decay_factor > 1.0))
    throw ValueError("train config: lr_decay_factor must be > 1");
  if (cfg.max_epochs < 1) throw ValueError("train config: max_epochs must be >= 1");
  if (cfg.batch_size < 1) throw ValueError("train config: batch_size must be >= 1");
  if (cfg.early_stop_patience < 0)
    throw ValueError("train config: early_stop_patience must be >= 0");
  losses::validate(cfg.loss);
}

struct EpochRecord {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  losses::LossBreakdown train_terms;  // per-branch means over the epoch
  double val_loss = 0.0;
  double seconds = 0.0;
  int steps = 0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
};

// Learning rate for the epoch after `history`: the initial rate divided by
// the decay factor once per completed stagnation window. A window is
// `plateau_patience_epochs` consecutive epochs without strict improvement
// over the best validation loss seen since the last decay.
inline double plateau_lr(const TrainHistory& history, const TrainConfig& cfg) {
  int decays = 0;
  int stagnant = 0;
  double best = std::numeric_limits<double>::infinity();
  for (const auto& rec : history.epochs) {
    if (rec.val_loss < best) {
      best = rec.val_loss;
      stagnant = 0;
    } else if (++stagnant >= cfg.plateau_patience_epochs) {
      ++decays;
      stagnant = 0;
      best = std::numeric_limits<double>::infinity();
    }
  }
  double lr = cfg.initial_lr;
  for (int i = 0; i < decays; ++i) lr /= cfg.lr_decay_factor;
  return lr;
}

// ---------------------------------------------------------------------------
// History CSV export. Column set is fixed; branches that were inactive in the
// run leave their field empty.
// ---------------------------------------------------------------------------

inline constexpr const char* kHistoryCsvHeader =
    "epoch,lr,train_loss,val_loss,ce100,ce20,ce10,ce5,mse,seconds";

namespace detail {
inline std::string fmt_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}
}  // namespace detail

inline std::string history_csv(const TrainHistory& history) {
  std::string out = std::string(kHistoryCsvHeader) + "\n";
  char buf[64];
  for (const auto& r : history.epochs) {
    out += std::to_string(r.epoch) + "," + detail::fmt_g17(r.lr) + "," +
           detail::fmt_g17(r.train_loss) + "," + detail::fmt_g17(r.val_loss);
    for (int w : kCanonicalWidths) {
      auto it = r.train_terms.classification.find(w);
      out += ",";
      if (it != r.train_terms.classification.end()) out += detail::fmt_g17(it->second);
    }
    out += ",";
    if (r.train_terms.regression) out += detail::fmt_g17(*r.train_terms.regression);
    std::snprintf(buf, sizeof buf, "%.3f", r.seconds);
    out += std::string(",") + buf + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// First-order optimizers.
// ---------------------------------------------------------------------------

class Optimizer {
public:
  virtual ~Optimizer() = default;
  virtual std::string id() const = 0;
  virtual void step(const std::vector<nn::ParamRef>& params, const std::vector<Tensor>& grads,
                    double lr) = 0;
  virtual serialize::json meta() const { return serialize::json::object(); }
  virtual void set_meta(const serialize::json&) {}
  virtual std::vector<std::pair<std::string, Tensor*>> state_tensors(
      const std::vector<nn::ParamRef>&) {
    return {};
  }
};

class Sgd final : public Optimizer {
public:
  std::string id() const override { return "sgd"; }
  void step(const std::vector<nn::ParamRef>& params, const std::vector<Tensor>& grads,
            double lr) override {
    for (size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i].tensor->data;
      const auto& g = grads[i].data;
      for (size_t j = 0; j < p.size(); ++j) p[j] -= lr * g[j];
    }
  }
};

class Adam final : public Optimizer {
public:
  std::string id() const override { return "adam"; }

  void step(const std::vector<nn::ParamRef>& params, const std::vector<Tensor>& grads,
            double lr) override {
    ensure(params);
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i].tensor->data;
      const auto& g = grads[i].data;
      auto& m = m_[i].data;
      auto& v = v_[i].data;
      for (size_t j = 0; j < p.size(); ++j) {
        m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
        v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
        p[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps_);
      }
    }
  }

  serialize::json meta() const override {
    return {{"t", t_}, {"beta1", beta1_}, {"beta2", beta2_}, {"eps", eps_}};
  }

  void set_meta(const serialize::json& j) override {
    t_ = j.at("t").get<int64_t>();
    beta1_ = j.at("beta1").get<double>();
    beta2_ = j.at("beta2").get<double>();
    eps_ = j.at("eps").get<double>();
  }

  std::vector<std::pair<std::string, Tensor*>> state_tensors(
      const std::vector<nn::ParamRef>& params) override {
    ensure(params);
    std::vector<std::pair<std::string, Tensor*>> out;
    for (size_t i = 0; i < params.size(); ++i) {
      out.emplace_back("opt.m." + params[i].name, &m_[i]);
      out.emplace_back("opt.v." + params[i].name, &v_[i]);
    }
    return out;
  }

private:
  void ensure(const std::vector<nn::ParamRef>& params) {
    if (!m_.empty()) return;
    for (const auto& p : params) {
      m_.emplace_back(p.tensor->shape);
      v_.emplace_back(p.tensor->shape);
    }
  }

  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  int64_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

inline std::unique_ptr<Optimizer> make_optimizer(const std::string& id) {
  if (id == "adam") return std::make_unique<Adam>();
  if (id == "sgd") return std::make_unique<Sgd>();
  throw ValueError("train: unknown optimizer '" + id + "' (registered: adam, sgd)");
}

// ---------------------------------------------------------------------------
// History <-> JSON (for checkpoints).
// ---------------------------------------------------------------------------

inline serialize::json breakdown_to_json(const losses::LossBreakdown& bd) {
  serialize::json cls = serialize::json::object();
  for (const auto& [w, v] : bd.classification) cls[std::to_string(w)] = v;
  serialize::json j{{"classification", cls}, {"aggregate", bd.aggregate}};
  if (bd.regression) j["regression"] = *bd.regression;
  return j;
}

inline losses::LossBreakdown breakdown_from_json(const serialize::json& j) {
  losses::LossBreakdown bd;
  for (const auto& [k, v] : j.at("classification").items())
    bd.classification[std::stoi(k)] = v.get<double>();
  bd.aggregate = j.at("aggregate").get<double>();
  if (j.contains("regression")) bd.regression = j.at("regression").get<double>();
  return bd;
}

inline serialize::json history_to_json(const TrainHistory& h) {
  serialize::json arr = serialize::json::array();
  for (const auto& r : h.epochs)
    arr.push_back({{"epoch", r.epoch},
                   {"lr", r.lr},
                   {"train_loss", r.train_loss},
                   {"train_terms", breakdown_to_json(r.train_terms)},
                   {"val_loss", r.val_loss},
                   {"seconds", r.seconds},
                   {"steps", r.steps}});
  return arr;
}

inline TrainHistory history_from_json(const serialize::json& arr) {
  TrainHistory h;
  for (const auto& j : arr) {
    EpochRecord r;
    r.epoch = j.at("epoch").get<int>();
    r.lr = j.at("lr").get<double>();
    r.train_loss = j.at("train_loss").get<double>();
    r.train_terms = breakdown_from_json(j.at("train_terms"));
    r.val_loss = j.at("val_loss").get<double>();
    r.seconds = j.at("seconds").get<double>();
    r.steps = j.at("steps").get<int>();
    h.epochs.push_back(std::move(r));
  }
  return h;
}

}  // namespace granage::train
