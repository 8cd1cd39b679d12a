#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "granage/common.hpp"
#include "granage/model.hpp"
#include "granage/optim.hpp"
#include "granage/serialize.hpp"

namespace granage::train {

inline constexpr const char* kCheckpointFamily = "GRANAGE-CKPT";
inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  model::Model model;
  TrainHistory history;
  uint64_t seed = 0;
  std::string optimizer_id;
  serialize::json optimizer_meta;
  std::map<std::string, Tensor> optimizer_state;
};

// Single archive: spec + architecture + parameters + optimizer state +
// history + the master seed (all derived rng streams are functions of the
// seed and epoch, so this is the complete generator state).
inline void save_checkpoint(model::Model& model, const TrainHistory& history, uint64_t seed,
                            Optimizer* optimizer, const std::string& path) {
  const auto& spec = model.spec();
  serialize::json header;
  header["model_spec"] = {{"backbone_id", spec.backbone_id},
                          {"input_size", spec.input_size},
                          {"branch_widths", spec.branch_widths},
                          {"with_regression", spec.with_regression},
                          {"pretrained", spec.pretrained},
                          {"pretrained_path", spec.pretrained_path}};
  header["backbone_layers"] = serialize::layers_to_json(model.backbone());
  header["epochs_completed"] = history.epochs.size();
  header["seed"] = seed;
  header["history"] = history_to_json(history);

  std::vector<nn::ParamRef> tensors = model.parameters();
  if (optimizer) {
    header["optimizer"] = {{"id", optimizer->id()}, {"meta", optimizer->meta()}};
    for (auto& [name, tensor] : optimizer->state_tensors(model.parameters()))
      tensors.push_back({name, tensor});
  }
  header["tensors"] = serialize::tensor_manifest(tensors);
  serialize::write_archive(path, std::string(kCheckpointFamily) + "-" +
                                     std::to_string(kCheckpointVersion),
                           header, tensors);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  auto reader = serialize::open_archive(path, kCheckpointFamily, kCheckpointVersion);
  const auto& h = reader.header;

  model::ModelSpec spec;
  const auto& js = h.at("model_spec");
  spec.backbone_id = js.at("backbone_id").get<std::string>();
  spec.input_size = js.at("input_size").get<int>();
  spec.branch_widths = js.at("branch_widths").get<std::vector<int>>();
  spec.with_regression = js.at("with_regression").get<bool>();
  spec.pretrained = js.at("pretrained").get<bool>();
  spec.pretrained_path = js.at("pretrained_path").get<std::string>();

  nn::LayerStack backbone = serialize::layers_from_json(h.at("backbone_layers"));
  const int f = model::feature_dim(backbone);
  std::map<int, nn::Dense> heads;
  for (int w : spec.branch_widths) {
    nn::Dense d;
    d.in_dim = f;
    d.out_dim = spec_for_width(w).num_classes;
    d.w = Tensor({d.out_dim, d.in_dim});
    d.b = Tensor({d.out_dim});
    heads.emplace(w, std::move(d));
  }
  std::optional<nn::Dense> reg;
  if (spec.with_regression) {
    nn::Dense d;
    d.in_dim = f;
    d.out_dim = 1;
    d.w = Tensor({1, f});
    d.b = Tensor({1});
    reg = std::move(d);
  }

  Checkpoint ckpt;
  ckpt.model = model::Model::restore(std::move(spec), std::move(backbone), std::move(heads),
                                     std::move(reg));
  ckpt.history = history_from_json(h.at("history"));
  ckpt.seed = h.at("seed").get<uint64_t>();
  if (h.contains("optimizer")) {
    ckpt.optimizer_id = h.at("optimizer").at("id").get<std::string>();
    ckpt.optimizer_meta = h.at("optimizer").at("meta");
  }

  std::map<std::string, Tensor*> by_name;
  for (auto& p : ckpt.model.parameters()) by_name[p.name] = p.tensor;
  for (const auto& entry : h.at("tensors")) {
    const std::string name = entry.at("name").get<std::string>();
    Tensor t = reader.next_tensor(entry);
    auto it = by_name.find(name);
    if (it != by_name.end()) {
      if (!t.same_shape(*it->second))
        throw RuntimeError("checkpoint: tensor shape mismatch for " + name + " in " + path);
      *it->second = std::move(t);
    } else if (name.rfind("opt.", 0) == 0) {
      ckpt.optimizer_state.emplace(name, std::move(t));
    } else {
      throw RuntimeError("checkpoint: unexpected tensor '" + name + "' in " + path);
    }
  }
  return ckpt;
}

// Rebuilds the optimizer recorded in a checkpoint, with its state tensors.
inline std::unique_ptr<Optimizer> restore_optimizer(const Checkpoint& ckpt, model::Model& model) {
  if (ckpt.optimizer_id.empty()) return nullptr;
  auto opt = make_optimizer(ckpt.optimizer_id);
  opt->set_meta(ckpt.optimizer_meta);
  for (auto& [name, tensor] : opt->state_tensors(model.parameters())) {
    auto it = ckpt.optimizer_state.find(name);
    if (it == ckpt.optimizer_state.end())
      throw RuntimeError("checkpoint: missing optimizer state tensor " + name);
    if (!it->second.same_shape(*tensor))
      throw RuntimeError("checkpoint: optimizer state shape mismatch for " + name);
    *tensor = it->second;
  }
  return opt;
}

}  // namespace granage::train
