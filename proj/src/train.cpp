#include "protodet/train.hpp"

#include "protodet/imageio.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace protodet {

void validate(const TrainConfig& c) {
  c.model.validate();
  if (c.epochs < 0) throw std::invalid_argument("epochs must be >= 0");
  if (c.lr < 0) throw std::invalid_argument("lr must be >= 0");
  if (c.momentum < 0 || c.momentum >= 1) throw std::invalid_argument("momentum must lie in [0, 1)");
  if (c.weight_decay < 0) throw std::invalid_argument("weight_decay must be >= 0");
  if (c.batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (c.warmup_steps < 0) throw std::invalid_argument("warmup_steps must be >= 0");
  if (c.lr_final < 0 || c.lr_final > 1) throw std::invalid_argument("lr_final must lie in [0, 1]");
  if (c.grad_clip < 0) throw std::invalid_argument("grad_clip must be >= 0");
}

std::string to_json_line(const StepRecord& r) {
  nlohmann::ordered_json j;
  j["step"] = r.step;
  j["epoch"] = r.epoch;
  j["lr"] = r.lr;
  j["total"] = r.loss.total;
  for (const auto& [name, value] : r.loss.components) j[name] = value;
  return j.dump();
}

LossReport train_step(const TrainConfig& config, ModelParams& params, std::vector<Tensor>& momentum,
                      const std::vector<const DatasetSample*>& batch, double lr) {
  if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
  const std::size_t n = params.size();
  std::vector<Tensor> grads;
  for (std::size_t i = 0; i < n; ++i) grads.emplace_back(params.tensor(i).shape());
  if (momentum.empty()) {
    for (std::size_t i = 0; i < n; ++i) momentum.emplace_back(params.tensor(i).shape());
  }

  LossPieces pieces;
  pieces.rpc.assign(3, 0.0);
  pieces.pr.assign(3, 0.0);
  const float inv_batch = 1.0f / static_cast<float>(batch.size());
  for (const DatasetSample* sample : batch) {
    ag::Tape tape;
    const auto fwd = forward<float>(tape, params, sample->image);
    const auto loss = image_loss<float>(tape, fwd.levels, sample->boxes, config.toggles);
    tape.backward(loss.total);
    for (std::size_t i = 0; i < n; ++i) {
      if (tape.has_grad(fwd.params[i])) grads[i].data() += inv_batch * tape.grad(fwd.params[i]).data();
    }
    pieces.cls += loss.cls.value()[0] * inv_batch;
    pieces.reg += loss.reg.value()[0] * inv_batch;
    pieces.dfl += loss.dfl.value()[0] * inv_batch;
    for (std::size_t l = 0; l < loss.rpc.size(); ++l) pieces.rpc[l] += loss.rpc[l].value()[0] * inv_batch;
  }

  if (config.toggles.pr != PrVariant::Off) {
    ag::Tape tape;
    std::vector<ag::Var> leaves;
    for (std::size_t i = 0; i < n; ++i) leaves.push_back(tape.leaf(params.tensor(i)));
    const auto terms = prototype_losses<float>(params, leaves, config.toggles.pr);
    ag::Var total = terms.at(0);
    for (std::size_t l = 1; l < terms.size(); ++l) total = ag::add(total, terms[l]);
    tape.backward(total);
    for (std::size_t i = 0; i < n; ++i)
      if (tape.has_grad(leaves[i])) grads[i].data() += tape.grad(leaves[i]).data();
    for (std::size_t l = 0; l < terms.size(); ++l) pieces.pr[l] = terms[l].value()[0];
  }

  const auto report = total_loss(pieces);  // throws naming a non-finite component

  if (config.grad_clip > 0) {
    double sq = 0;
    for (const auto& g : grads) sq += g.data().template cast<double>().squaredNorm();
    const double norm = std::sqrt(sq);
    if (norm > config.grad_clip) {
      const auto f = static_cast<float>(config.grad_clip / norm);
      for (auto& g : grads) g.data() *= f;
    }
  }

  const auto mu = static_cast<float>(config.momentum);
  const auto step = static_cast<float>(lr);
  const auto decay = static_cast<float>(lr * config.weight_decay);
  for (std::size_t i = 0; i < n; ++i) {
    auto& p = params.tensor(i).data();
    auto& v = momentum[i].data();
    v = mu * v + grads[i].data();
    if (params.decays(i)) p -= decay * p;
    p -= step * v;
  }
  return report;
}

Checkpoint train(const TrainConfig& config, const Dataset& dataset, const std::filesystem::path& out_dir,
                 const std::optional<Checkpoint>& resume, const ProgressFn& progress) {
  validate(config);
  const auto samples = dataset.split("train");
  if (samples.empty()) throw std::invalid_argument("train: dataset has no training samples");
  if (config.model.num_classes != dataset.manifest.num_classes() + 1) {
    throw std::invalid_argument("train: model has " + std::to_string(config.model.num_classes - 1) +
                                " foreground classes, dataset has " + std::to_string(dataset.manifest.num_classes()));
  }
  for (const auto* s : samples) {
    if (s->image.height() != config.model.image_size || s->image.width() != config.model.image_size) {
      throw std::invalid_argument("train: image " + s->id + " is not " + std::to_string(config.model.image_size) +
                                  " px square");
    }
  }

  Checkpoint ckpt;
  if (resume) {
    if (!(resume->params.config() == config.model)) throw std::invalid_argument("train: resume checkpoint model differs");
    ckpt = *resume;
  } else {
    ckpt.params = ModelParams::initialize(config.model, config.seed);
    ckpt.class_names = dataset.manifest.class_names;
  }

  std::filesystem::create_directories(out_dir);
  const auto log_path = out_dir / "train_log.jsonl";
  std::string log = resume && std::filesystem::exists(log_path) ? read_file(log_path) : std::string();

  std::vector<std::size_t> order(samples.size());
  const auto per_epoch = (samples.size() + static_cast<std::size_t>(config.batch_size) - 1) / config.batch_size;
  const double last_step = std::max(1.0, static_cast<double>(per_epoch) * config.epochs - 1);
  for (int epoch = ckpt.state.epoch; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(mix_seed(config.seed, 0x5EED0000ull + static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i) - 1))]);
    }
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      std::vector<const DatasetSample*> batch;
      for (std::size_t k = start; k < std::min(order.size(), start + config.batch_size); ++k) {
        batch.push_back(samples[order[k]]);
      }
      const double progress_frac = std::min(1.0, static_cast<double>(ckpt.state.step) / last_step);
      double lr = config.lr * (1.0 - (1.0 - config.lr_final) * progress_frac);
      if (config.warmup_steps > 0 && ckpt.state.step < config.warmup_steps) {
        lr *= static_cast<double>(ckpt.state.step + 1) / config.warmup_steps;
      }
      StepRecord rec;
      rec.loss = train_step(config, ckpt.params, ckpt.state.momentum, batch, lr);
      rec.step = ++ckpt.state.step;
      rec.epoch = epoch + 1;
      rec.lr = lr;
      log += to_json_line(rec) + "\n";
      if (progress) progress(rec);
    }
    ckpt.state.epoch = epoch + 1;
    write_file(log_path, log);
    save_checkpoint(out_dir / "checkpoint.json", ckpt);
  }
  if (config.epochs <= ckpt.state.epoch && !std::filesystem::exists(out_dir / "checkpoint.json")) {
    write_file(log_path, log);
    save_checkpoint(out_dir / "checkpoint.json", ckpt);
  }
  return ckpt;
}

}  // namespace protodet
