#pragma once

#include <algorithm>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "granage/branches.hpp"
#include "granage/common.hpp"
#include "granage/losses.hpp"
#include "granage/nn.hpp"
#include "granage/serialize.hpp"
#include "granage/tensor.hpp"

namespace granage::model {

struct ModelSpec {
  std::string backbone_id = "desk";
  int input_size = 224;
  std::vector<int> branch_widths = {1, 5, 10, 20};  // ascending
  bool with_regression = true;
  bool pretrained = false;
  std::string pretrained_path;
};

inline void validate(const ModelSpec& spec) {
  if (spec.input_size < 32)
    throw ValueError("model: input_size must be >= 32, got " + std::to_string(spec.input_size));
  if (spec.branch_widths.empty() && !spec.with_regression)
    throw ValueError("model: at least one output head is required");
  int prev = 0;
  for (int w : spec.branch_widths) {
    if (!is_canonical_width(w))
      throw ValueError("model: branch width " + std::to_string(w) + " is not one of {1,5,10,20}");
    if (w <= prev) throw ValueError("model: branch widths must be strictly ascending");
    prev = w;
  }
}

inline int feature_dim(const nn::LayerStack& stack) {
  for (auto it = stack.layers.rbegin(); it != stack.layers.rend(); ++it) {
    if (const auto* d = std::get_if<nn::Dense>(&*it)) return d->out_dim;
    if (const auto* c = std::get_if<nn::Conv2d>(&*it)) return c->out_ch;
  }
  throw ValueError("model: backbone has no parameterized layers");
}

// Externally supplied backbone weights ("GRANAGE-BB-1"): the serialized layer
// stack plus its parameters.
inline nn::LayerStack load_backbone_weights(const std::string& path) {
  if (!std::filesystem::exists(path))
    throw RuntimeError("model: pretrained backbone weights not found: " +
                       (path.empty() ? std::string("(no path configured)") : path));
  auto reader = serialize::open_archive(path, "GRANAGE-BB", 1);
  nn::LayerStack stack = serialize::layers_from_json(reader.header.at("layers"));
  std::vector<nn::ParamRef> params;
  nn::collect_params(stack.layers, "backbone", params);
  const auto& manifest = reader.header.at("tensors");
  if (manifest.size() != params.size())
    throw RuntimeError("model: backbone archive tensor count mismatch in " + path);
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor t = reader.next_tensor(manifest[i]);
    if (!t.same_shape(*params[i].tensor))
      throw RuntimeError("model: backbone tensor shape mismatch for " + params[i].name);
    *params[i].tensor = std::move(t);
  }
  return stack;
}

struct BackboneEntry {
  // Named large backbones are identifiers that bind to externally supplied
  // weight archives; only the desk network is constructed natively.
  bool external = false;
  std::function<nn::LayerStack(int input_size, Rng& rng)> build;
};

inline nn::LayerStack build_desk_backbone(int /*input_size*/, Rng& rng) {
  nn::LayerStack stack;
  stack.layers.emplace_back(nn::Conv2d(3, 16, 3, 2, 1, rng));
  stack.layers.emplace_back(nn::ReLU{});
  stack.layers.emplace_back(nn::Conv2d(16, 32, 3, 2, 1, rng));
  stack.layers.emplace_back(nn::ReLU{});
  stack.layers.emplace_back(nn::GlobalAvgPool{});
  stack.layers.emplace_back(nn::Dense(32, 64, rng));
  stack.layers.emplace_back(nn::ReLU{});
  return stack;
}

inline const std::map<std::string, BackboneEntry>& backbone_registry() {
  static const std::map<std::string, BackboneEntry> registry = [] {
    std::map<std::string, BackboneEntry> r;
    r["desk"] = {false, build_desk_backbone};
    for (const char* id : {"alexnet", "mobilenet_v1", "resnet50", "densenet121", "vgg16_bn"})
      r[id] = {true, nullptr};
    return r;
  }();
  return registry;
}

enum class Policy { ExpectedValue, ArgmaxRepresentative, Regression };

inline Policy parse_policy(const std::string& s) {
  if (s == "expected_value") return Policy::ExpectedValue;
  if (s == "argmax_representative") return Policy::ArgmaxRepresentative;
  if (s == "regression") return Policy::Regression;
  throw ValueError("model: unknown inference policy '" + s + "'");
}

inline std::string policy_name(Policy p) {
  switch (p) {
    case Policy::ExpectedValue: return "expected_value";
    case Policy::ArgmaxRepresentative: return "argmax_representative";
    case Policy::Regression: return "regression";
  }
  return "?";
}

// Softmax-weighted mean of the class representatives; lands in [age_min, age_max].
inline double expected_age(std::span<const double> logits, const GranularitySpec& spec) {
  const std::vector<double> p = losses::softmax(logits);
  double acc = 0.0;
  for (size_t k = 0; k < p.size(); ++k) acc += p[k] * representative(static_cast<int>(k), spec);
  return acc;
}

// Batch forward caches for backpropagation.
struct ForwardContext {
  std::vector<Tensor> backbone_inputs;
  Tensor features;
  int64_t batch = 0;
};

// Gradients of the batch loss w.r.t. the raw head outputs, stacked across the
// batch: one {N,K} matrix per branch plus {N} for the regression head.
struct BatchGradients {
  std::map<int, Tensor> logit_grads;
  Tensor regression_grads{std::vector<int64_t>{0}};
};

// Shared backbone plus one dense head per granularity and an optional linear
// single-output regression head.
class Model {
public:
  Model() = default;

  Model(ModelSpec spec, uint64_t seed) : spec_(std::move(spec)) {
    validate(spec_);
    const auto& registry = backbone_registry();
    auto it = registry.find(spec_.backbone_id);
    if (it == registry.end())
      throw ValueError("model: unknown backbone '" + spec_.backbone_id + "'");
    Rng rng = Rng::derive(seed, {0x6d6f64656cULL});
    if (it->second.external || spec_.pretrained) {
      backbone_ = load_backbone_weights(spec_.pretrained_path);
    } else {
      backbone_ = it->second.build(spec_.input_size, rng);
    }
    const int f = feature_dim(backbone_);
    for (int w : spec_.branch_widths)
      heads_.emplace(w, nn::Dense(f, spec_for_width(w).num_classes, rng));
    if (spec_.with_regression) regression_head_ = nn::Dense(f, 1, rng);
  }

  const ModelSpec& spec() const { return spec_; }
  nn::LayerStack& backbone() { return backbone_; }
  const nn::LayerStack& backbone() const { return backbone_; }

  std::vector<nn::ParamRef> parameters() {
    std::vector<nn::ParamRef> out;
    nn::collect_params(backbone_.layers, "backbone", out);
    for (auto& [w, head] : heads_) {
      out.push_back({"head." + branch_label(w) + ".w", &head.w});
      out.push_back({"head." + branch_label(w) + ".b", &head.b});
    }
    if (regression_head_) {
      out.push_back({"head.mse.w", &regression_head_->w});
      out.push_back({"head.mse.b", &regression_head_->b});
    }
    return out;
  }

  std::vector<Tensor> zero_grads() {
    std::vector<Tensor> grads;
    for (const auto& p : parameters()) grads.emplace_back(p.tensor->shape);
    return grads;
  }

  std::vector<BranchOutputs> forward(const Tensor& images, ForwardContext* ctx = nullptr) const {
    if (images.shape.size() != 4)
      throw ValueError("model: expected image batch {N,3,H,W}, got " + images.shape_str());
    const int64_t n = images.dim(0);
    if (n == 0) return {};
    if (images.dim(1) != 3 || images.dim(2) != spec_.input_size || images.dim(3) != spec_.input_size)
      throw ValueError("model: expected {N,3," + std::to_string(spec_.input_size) + "," +
                       std::to_string(spec_.input_size) + "}, got " + images.shape_str());

    Tensor features = backbone_.forward(images, ctx ? &ctx->backbone_inputs : nullptr);
    std::vector<BranchOutputs> out(static_cast<size_t>(n));
    for (const auto& [w, head] : heads_) {
      const Tensor logits = head.forward(features);
      const int k = head.out_dim;
      for (int64_t i = 0; i < n; ++i) {
        const double* row = logits.data.data() + static_cast<size_t>(i) * k;
        out[static_cast<size_t>(i)].class_logits[w].assign(row, row + k);
      }
    }
    if (regression_head_) {
      const Tensor reg = regression_head_->forward(features);
      for (int64_t i = 0; i < n; ++i)
        out[static_cast<size_t>(i)].regression = reg.data[static_cast<size_t>(i)];
    }
    for (const auto& o : out) {
      for (const auto& [w, logits] : o.class_logits)
        for (double v : logits)
          if (!std::isfinite(v))
            throw RuntimeError("model: non-finite logit in branch " + branch_label(w));
      if (o.regression && !std::isfinite(*o.regression))
        throw RuntimeError("model: non-finite regression output");
    }
    if (ctx) {
      ctx->features = std::move(features);
      ctx->batch = n;
    }
    return out;
  }

  // Accumulates parameter gradients for a batch; `grads` must come from
  // zero_grads(). Heads absent from `bg` receive zero gradient.
  void backward(const ForwardContext& ctx, const BatchGradients& bg, std::vector<Tensor>& grads) {
    auto params = parameters();
    if (grads.size() != params.size())
      throw ValueError("model: gradient buffer count mismatch");
    std::vector<nn::ParamRef> backbone_params;
    nn::collect_params(backbone_.layers, "backbone", backbone_params);
    size_t slot = backbone_params.size();

    const int64_t n = ctx.batch;
    const int f = feature_dim(backbone_);
    Tensor grad_features({n, f});
    for (auto& [w, head] : heads_) {
      auto it = bg.logit_grads.find(w);
      if (it != bg.logit_grads.end()) {
        if (it->second.dim(0) != n || it->second.dim(1) != head.out_dim)
          throw ValueError("model: gradient shape mismatch for branch " + branch_label(w));
        Tensor gx = head.backward(ctx.features, it->second, grads[slot], grads[slot + 1], true);
        for (size_t i = 0; i < gx.data.size(); ++i) grad_features.data[i] += gx.data[i];
      }
      slot += 2;
    }
    if (regression_head_ && bg.regression_grads.numel() > 0) {
      if (bg.regression_grads.dim(0) != n)
        throw ValueError("model: regression gradient batch mismatch");
      Tensor gy({n, 1}, bg.regression_grads.data);
      Tensor gx = regression_head_->backward(ctx.features, gy, grads[slot], grads[slot + 1], true);
      for (size_t i = 0; i < gx.data.size(); ++i) grad_features.data[i] += gx.data[i];
    }

    std::vector<Tensor*> backbone_grads;
    for (size_t i = 0; i < backbone_params.size(); ++i) backbone_grads.push_back(&grads[i]);
    backbone_.backward(grad_features, ctx.backbone_inputs, backbone_grads);
  }

  bool has_branch(int width) const { return heads_.count(width) > 0; }
  bool has_regression() const { return regression_head_.has_value(); }

  // Restores architecture and parameters from serialized form (checkpoints).
  static Model restore(ModelSpec spec, nn::LayerStack backbone,
                       std::map<int, nn::Dense> heads, std::optional<nn::Dense> reg) {
    Model m;
    m.spec_ = std::move(spec);
    m.backbone_ = std::move(backbone);
    m.heads_ = std::move(heads);
    m.regression_head_ = std::move(reg);
    return m;
  }

  std::map<int, nn::Dense>& heads() { return heads_; }
  const std::map<int, nn::Dense>& heads() const { return heads_; }
  const std::optional<nn::Dense>& regression_head() const { return regression_head_; }

private:
  ModelSpec spec_;
  nn::LayerStack backbone_;
  std::map<int, nn::Dense> heads_;
  std::optional<nn::Dense> regression_head_;
};

inline Model build_model(const ModelSpec& spec, uint64_t seed) { return Model(spec, seed); }

// Decodes one sample's outputs into years. The classification policies read
// the 1-year branch (the most accurate single predictor).
inline double predict_age(const BranchOutputs& outputs, Policy policy) {
  switch (policy) {
    case Policy::ExpectedValue:
    case Policy::ArgmaxRepresentative: {
      auto it = outputs.class_logits.find(1);
      if (it == outputs.class_logits.end())
        throw ValueError("predict: outputs missing branch ce100");
      const GranularitySpec spec = spec_for_width(1);
      if (policy == Policy::ExpectedValue) return expected_age(it->second, spec);
      const auto arg = std::max_element(it->second.begin(), it->second.end());
      return representative(static_cast<int>(arg - it->second.begin()), spec);
    }
    case Policy::Regression:
      if (!outputs.regression) throw ValueError("predict: outputs missing branch regression");
      return *outputs.regression;
  }
  throw ValueError("predict: unknown policy");
}

// Saves just the backbone as an external-weights archive ("GRANAGE-BB-1").
inline void save_backbone_weights(Model& model, const std::string& path) {
  std::vector<nn::ParamRef> params;
  nn::collect_params(model.backbone().layers, "backbone", params);
  serialize::json header;
  header["layers"] = serialize::layers_to_json(model.backbone());
  header["tensors"] = serialize::tensor_manifest(params);
  serialize::write_archive(path, "GRANAGE-BB-1", header, params);
}

}  // namespace granage::model
