#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <thread>
#include <vector>

#include "vphype/config.hpp"
#include "vphype/data.hpp"
#include "vphype/metrics.hpp"
#include "vphype/model.hpp"

namespace vphype {

// --- optimizer -----------------------------------------------------------------

struct AdamMoments {
  std::vector<double> m;
  std::vector<double> v;
};

// Decoupled weight decay applied before the bias-corrected adaptive step.
inline void adamw_step(Tensor& param, const std::vector<double>& grad, AdamMoments& moments,
                       std::int64_t t, double lr, const TrainConfig& cfg) {
  auto& theta = param.mutable_data();
  if (moments.m.size() != theta.size()) {
    moments.m.assign(theta.size(), 0.0);
    moments.v.assign(theta.size(), 0.0);
  }
  double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < theta.size(); ++i) {
    theta[i] -= lr * cfg.weight_decay * theta[i];
    double g = grad[i];
    moments.m[i] = cfg.beta1 * moments.m[i] + (1.0 - cfg.beta1) * g;
    moments.v[i] = cfg.beta2 * moments.v[i] + (1.0 - cfg.beta2) * g * g;
    double m_hat = moments.m[i] / bc1;
    double v_hat = moments.v[i] / bc2;
    theta[i] -= lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
  }
}

// Cosine decay to zero with linear warmup.
inline double lr_at_step(const TrainConfig& cfg, std::int64_t step, std::int64_t total_steps) {
  std::int64_t warmup = cfg.warmup_steps >= 0
                            ? cfg.warmup_steps
                            : static_cast<std::int64_t>(std::ceil(0.05 * static_cast<double>(total_steps)));
  if (warmup > 0 && step < warmup) {
    return cfg.lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
  }
  std::int64_t decay_span = std::max<std::int64_t>(total_steps - warmup, 1);
  double progress = static_cast<double>(step - warmup) / static_cast<double>(decay_span);
  progress = std::min(std::max(progress, 0.0), 1.0);
  return cfg.lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

inline double global_grad_norm(const ParamList& params) {
  double sq = 0.0;
  for (const auto& p : params) {
    for (double g : p.tensor.grad()) sq += g * g;
  }
  return std::sqrt(sq);
}

// --- evaluation -----------------------------------------------------------------

// Shards the pixel list across threads; each shard accumulates its own
// confusion matrix and the shards merge at the end (order-independent integer
// counts). Thread count is capped by the VPHYPE_THREADS env var.
inline ConfusionMatrix evaluate_pixels(VpHypeModel& model, const HsiScene& scene,
                                       const std::vector<PixelRef>& pixels,
                                       const BandStats& stats, std::int64_t patch_size,
                                       std::int64_t batch_size = 32) {
  if (pixels.empty()) throw EvalError("empty evaluation: no pixels to classify");
  unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("VPHYPE_THREADS")) {
    long cap = std::strtol(env, nullptr, 10);
    if (cap >= 1) hw = std::min<unsigned>(hw, static_cast<unsigned>(cap));
  }
  unsigned n_threads = std::min<unsigned>(hw, static_cast<unsigned>((pixels.size() + 7) / 8));
  n_threads = std::max(1u, n_threads);

  std::vector<ConfusionMatrix> shards(n_threads,
                                      ConfusionMatrix(scene.num_classes, scene.class_names));
  std::vector<std::string> errors(n_threads);
  auto worker = [&](unsigned tid) {
    try {
      NoGradGuard ng;
      std::size_t begin = pixels.size() * tid / n_threads;
      std::size_t end = pixels.size() * (tid + 1) / n_threads;
      for (std::size_t i = begin; i < end; i += static_cast<std::size_t>(batch_size)) {
        std::size_t stop = std::min(end, i + static_cast<std::size_t>(batch_size));
        std::vector<PixelRef> chunk(pixels.begin() + i, pixels.begin() + stop);
        auto [batch, labels] = extract_batch(scene, chunk, patch_size, stats);
        Tensor logits = model.forward(batch, {}, /*training=*/false, nullptr);
        std::int64_t n = logits.dim(1);
        for (std::size_t b = 0; b < chunk.size(); ++b) {
          std::int64_t best = 0;
          for (std::int64_t c = 1; c < n; ++c) {
            if (logits.at(static_cast<std::int64_t>(b) * n + c) > logits.at(static_cast<std::int64_t>(b) * n + best)) {
              best = c;
            }
          }
          shards[tid].add(labels[b], best);
        }
      }
    } catch (const std::exception& e) {
      errors[tid] = e.what();
    }
  };
  if (n_threads == 1) {
    worker(0);
  } else {
    std::vector<std::thread> threads;
    for (unsigned t = 0; t < n_threads; ++t) threads.emplace_back(worker, t);
    for (auto& t : threads) t.join();
  }
  for (const auto& err : errors) {
    if (!err.empty()) throw EvalError("evaluation worker failed: " + err);
  }
  ConfusionMatrix total = shards[0];
  for (unsigned t = 1; t < n_threads; ++t) total = ConfusionMatrix::merge(total, shards[t]);
  return total;
}

// --- checkpointing -----------------------------------------------------------------

constexpr std::int64_t kCheckpointVersion = 1;

inline std::uint64_t fnv1a64(const unsigned char* data, std::size_t len) {
  std::uint64_t h = 1469598103934665603ULL;
  for (std::size_t i = 0; i < len; ++i) {
    h ^= data[i];
    h *= 1099511628211ULL;
  }
  return h;
}

struct CheckpointState {
  std::int64_t version = kCheckpointVersion;
  ModelConfig model_config;
  PromptConfig prompt_config;
  TrainConfig train_config;
  SplitSpec split_spec;
  std::string arm = "full";
  std::int64_t patch_size = 15;
  std::int64_t step = 0;
  std::string rng_state;       // batch-order stream
  std::string drop_rng_state;  // droppath stream
  std::vector<std::string> task_names;  // prompt bank rides along
  std::map<std::string, std::vector<double>> tensors;          // params
  std::map<std::string, std::vector<std::int64_t>> shapes;
  std::map<std::string, AdamMoments> moments;                  // per trainable param
};

// Single file: one JSON header line (index with named spans into the blob,
// blob checksum, config snapshots) followed by the concatenated little-endian
// f64 blob.
inline void save_checkpoint(const std::string& path, const CheckpointState& state) {
  std::vector<double> blob;
  json index;
  json entries = json::object();
  auto append_span = [&](const std::string& name, const std::vector<double>& data,
                         const std::vector<std::int64_t>& shape) {
    json e;
    e["dtype"] = "f64";
    e["shape"] = shape;
    e["offset"] = blob.size() * 8;
    e["length"] = data.size() * 8;
    entries[name] = e;
    blob.insert(blob.end(), data.begin(), data.end());
  };
  for (const auto& [name, data] : state.tensors) {
    append_span(name, data, state.shapes.at(name));
  }
  for (const auto& [name, mom] : state.moments) {
    std::vector<std::int64_t> shape{static_cast<std::int64_t>(mom.m.size())};
    append_span("adam_m/" + name, mom.m, shape);
    append_span("adam_v/" + name, mom.v, shape);
  }
  index["version"] = state.version;
  index["model"] = state.model_config.to_json();
  index["prompts"] = state.prompt_config.to_json();
  index["train"] = state.train_config.to_json();
  index["split"] = state.split_spec.to_json();
  index["arm"] = state.arm;
  index["patch_size"] = state.patch_size;
  index["step"] = state.step;
  index["rng_state"] = state.rng_state;
  index["drop_rng_state"] = state.drop_rng_state;
  index["task_names"] = state.task_names;
  index["tensors"] = entries;
  index["checksum"] =
      fnv1a64(reinterpret_cast<const unsigned char*>(blob.data()), blob.size() * 8);

  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot open " + path + " for writing");
  std::string header = index.dump();
  out << header << "\n";
  out.write(reinterpret_cast<const char*>(blob.data()),
            static_cast<std::streamsize>(blob.size() * 8));
  if (!out) throw CheckpointError("short write to " + path);
}

inline CheckpointState load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path);
  std::string header;
  if (!std::getline(in, header)) throw CheckpointError("missing header line in " + path);
  json index;
  try {
    index = json::parse(header);
  } catch (const json::exception& e) {
    throw CheckpointError("bad header: " + std::string(e.what()));
  }
  std::int64_t version = index.value("version", std::int64_t{-1});
  if (version != kCheckpointVersion) {
    throw CheckpointError("version mismatch: file has " + std::to_string(version) + ", expected " +
                          std::to_string(kCheckpointVersion));
  }
  std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (raw.size() % 8 != 0) throw CheckpointError("blob length not a multiple of 8");
  std::uint64_t digest = fnv1a64(reinterpret_cast<const unsigned char*>(raw.data()), raw.size());
  std::uint64_t expected = index.value("checksum", std::uint64_t{0});
  if (digest != expected) {
    throw CheckpointError("digest mismatch: blob hash " + std::to_string(digest) +
                          " != recorded " + std::to_string(expected));
  }
  const double* doubles = reinterpret_cast<const double*>(raw.data());
  std::size_t n_doubles = raw.size() / 8;

  CheckpointState state;
  state.version = version;
  state.model_config = ModelConfig::from_json(index.at("model"));
  state.prompt_config = PromptConfig::from_json(index.at("prompts"));
  state.train_config = TrainConfig::from_json(index.at("train"));
  state.split_spec = SplitSpec::from_json(index.at("split"));
  state.arm = index.value("arm", "full");
  state.patch_size = index.value("patch_size", std::int64_t{15});
  state.step = index.value("step", std::int64_t{0});
  state.rng_state = index.value("rng_state", "");
  state.drop_rng_state = index.value("drop_rng_state", "");
  if (index.contains("task_names")) {
    state.task_names = index.at("task_names").get<std::vector<std::string>>();
  }

  std::map<std::string, AdamMoments>& moments = state.moments;
  for (auto it = index.at("tensors").begin(); it != index.at("tensors").end(); ++it) {
    const json& e = it.value();
    std::size_t offset = e.at("offset").get<std::size_t>() / 8;
    std::size_t length = e.at("length").get<std::size_t>() / 8;
    if (offset + length > n_doubles) {
      throw CheckpointError("span '" + it.key() + "' exceeds blob size");
    }
    std::vector<double> data(doubles + offset, doubles + offset + length);
    const std::string& key = it.key();
    if (key.rfind("adam_m/", 0) == 0) {
      moments[key.substr(7)].m = std::move(data);
    } else if (key.rfind("adam_v/", 0) == 0) {
      moments[key.substr(7)].v = std::move(data);
    } else {
      state.tensors[key] = std::move(data);
      state.shapes[key] = e.at("shape").get<std::vector<std::int64_t>>();
    }
  }
  return state;
}

inline PromptBank bank_from_checkpoint(const CheckpointState& state) {
  auto it = state.tensors.find("prompt_bank.e_clip");
  if (it == state.tensors.end()) return make_default_bank(1);
  PromptBank bank;
  bank.e_clip = Tensor::from_data(it->second, state.shapes.at("prompt_bank.e_clip"));
  bank.task_names = state.task_names;
  if (bank.task_names.empty()) {
    for (std::int64_t t = 0; t < bank.e_clip.dim(0); ++t) {
      bank.task_names.push_back("task" + std::to_string(t));
    }
  }
  return bank;
}

// Copies checkpointed tensors into a freshly constructed model, insisting the
// stored configuration matches and every parameter is covered.
inline void restore_model(VpHypeModel& model, const CheckpointState& state) {
  if (!(state.model_config == model.cfg)) {
    std::string diffs;
    json a = state.model_config.to_json(), b = model.cfg.to_json();
    for (auto it = a.begin(); it != a.end(); ++it) {
      if (b.at(it.key()) != it.value()) {
        if (!diffs.empty()) diffs += ", ";
        diffs += it.key();
      }
    }
    throw CheckpointError("model config mismatch in keys: " + diffs);
  }
  if (!(state.prompt_config == model.pcfg)) {
    throw CheckpointError("prompt config mismatch between checkpoint and model");
  }
  for (auto& p : model.parameters()) {
    auto it = state.tensors.find(p.name);
    if (it == state.tensors.end()) {
      throw CheckpointError("checkpoint missing parameter '" + p.name + "'");
    }
    if (it->second.size() != p.tensor.data().size()) {
      throw CheckpointError("checkpoint parameter '" + p.name + "' has wrong length");
    }
    p.tensor.mutable_data() = it->second;
  }
  // running BN statistics ride along as pseudo-tensors
  auto restore_bn = [&](const std::string& name, BatchNormState& bn) {
    auto mean_it = state.tensors.find(name + ".running_mean");
    auto var_it = state.tensors.find(name + ".running_var");
    if (mean_it != state.tensors.end() && var_it != state.tensors.end()) {
      bn.running_mean = mean_it->second;
      bn.running_var = var_it->second;
      bn.initialized = true;
    }
  };
  restore_bn("backbone.patch_embed.bn1", model.backbone.patch_embed.bn1.state);
  restore_bn("backbone.patch_embed.bn2", model.backbone.patch_embed.bn2.state);
  for (std::size_t l = 0; l + 1 < model.backbone.stages.size(); ++l) {
    restore_bn("backbone.downsample" + std::to_string(l), model.backbone.downsamples[l].bn.state);
  }
  restore_bn("head.bn", model.head.bn.state);
}

// Snapshot of everything needed to reproduce forward passes bit-exactly.
inline CheckpointState snapshot_model(VpHypeModel& model, const TrainConfig& tcfg,
                                      const SplitSpec& split, const std::string& arm,
                                      std::int64_t patch_size, std::int64_t step,
                                      const std::string& rng_state,
                                      const std::string& drop_rng_state,
                                      const std::map<std::string, AdamMoments>& moments) {
  CheckpointState state;
  state.model_config = model.cfg;
  state.prompt_config = model.pcfg;
  state.train_config = tcfg;
  state.split_spec = split;
  state.arm = arm;
  state.patch_size = patch_size;
  state.step = step;
  state.rng_state = rng_state;
  state.drop_rng_state = drop_rng_state;
  for (auto& p : model.parameters()) {
    state.tensors[p.name] = p.tensor.data();
    state.shapes[p.name] = p.tensor.shape();
  }
  if (model.prompts.bank.e_clip.defined()) {
    state.tensors["prompt_bank.e_clip"] = model.prompts.bank.e_clip.data();
    state.shapes["prompt_bank.e_clip"] = model.prompts.bank.e_clip.shape();
    state.task_names = model.prompts.bank.task_names;
  }
  auto save_bn = [&](const std::string& name, const BatchNormState& bn) {
    if (!bn.initialized) return;
    state.tensors[name + ".running_mean"] = bn.running_mean;
    state.shapes[name + ".running_mean"] = {static_cast<std::int64_t>(bn.running_mean.size())};
    state.tensors[name + ".running_var"] = bn.running_var;
    state.shapes[name + ".running_var"] = {static_cast<std::int64_t>(bn.running_var.size())};
  };
  save_bn("backbone.patch_embed.bn1", model.backbone.patch_embed.bn1.state);
  save_bn("backbone.patch_embed.bn2", model.backbone.patch_embed.bn2.state);
  for (std::size_t l = 0; l + 1 < model.backbone.stages.size(); ++l) {
    save_bn("backbone.downsample" + std::to_string(l), model.backbone.downsamples[l].bn.state);
  }
  save_bn("head.bn", model.head.bn.state);
  state.moments = moments;
  return state;
}

// --- training loop -----------------------------------------------------------------

struct EpochLog {
  std::int64_t epoch = 0;
  double loss = 0.0;
  double lr = 0.0;
  double val_oa = 0.0;
};

struct TrainResult {
  std::vector<EpochLog> epochs;
  MetricsReport test_metrics;
  ConfusionMatrix test_confusion;
  std::map<std::string, AdamMoments> moments;
  std::int64_t steps = 0;
  std::string rng_state;
  std::string drop_rng_state;
};

// Deterministic given the seed: fixed shuffle order, seeded DropPath, and
// single-threaded loss/updates. Logs loss and validation OA per epoch and
// evaluates the full test split at the end.
inline TrainResult train(VpHypeModel& model, const HsiScene& scene, const SceneSplit& split,
                         const TrainConfig& tcfg, std::int64_t patch_size,
                         const std::function<void(const EpochLog&)>& on_epoch = nullptr) {
  tcfg.validate();
  if (split.train.empty()) throw TrainError("empty training split");
  ParamList params = model.trainable_parameters();
  std::map<std::string, AdamMoments> moments;

  Rng batch_rng(derive_seed(tcfg.seed, 11));
  Rng drop_rng(derive_seed(tcfg.seed, 22));
  Rng val_rng(derive_seed(tcfg.seed, 33));

  // fixed validation slice drawn once from the test split
  std::vector<PixelRef> val_pixels = split.test;
  if (tcfg.val_subset > 0 && static_cast<std::int64_t>(val_pixels.size()) > tcfg.val_subset) {
    detail::deterministic_shuffle(val_pixels, val_rng);
    val_pixels.resize(static_cast<std::size_t>(tcfg.val_subset));
  }

  std::int64_t steps_per_epoch =
      (static_cast<std::int64_t>(split.train.size()) + tcfg.batch_size - 1) / tcfg.batch_size;
  std::int64_t total_steps = steps_per_epoch * tcfg.epochs;
  std::int64_t step = 0;

  TrainResult result;
  std::vector<PixelRef> order = split.train;
  for (std::int64_t epoch = 0; epoch < tcfg.epochs; ++epoch) {
    detail::deterministic_shuffle(order, batch_rng);
    double loss_sum = 0.0;
    double last_lr = 0.0;
    for (std::int64_t b = 0; b < steps_per_epoch; ++b) {
      std::size_t begin = static_cast<std::size_t>(b * tcfg.batch_size);
      std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(tcfg.batch_size));
      std::vector<PixelRef> chunk(order.begin() + begin, order.begin() + end);
      auto [batch, labels] = extract_batch(scene, chunk, patch_size, split.stats);

      Tensor logits = model.forward(batch, {}, /*training=*/true, &drop_rng);
      Tensor loss = cross_entropy(logits, labels);
      double loss_val = loss.item();
      if (!std::isfinite(loss_val)) {
        throw TrainError("non-finite loss at step " + std::to_string(step));
      }
      loss_sum += loss_val;

      Tape tape(loss);
      tape.backward();
      for (auto& p : params) {
        for (double g : p.tensor.grad()) {
          if (!std::isfinite(g)) {
            throw TrainError("non-finite gradient in parameter '" + p.name + "' at step " +
                             std::to_string(step));
          }
        }
      }
      double norm = global_grad_norm(params);
      double scale = (tcfg.grad_clip_norm > 0.0 && norm > tcfg.grad_clip_norm)
                         ? tcfg.grad_clip_norm / norm
                         : 1.0;
      double lr = lr_at_step(tcfg, step, total_steps);
      last_lr = lr;
      ++step;
      for (auto& p : params) {
        if (scale != 1.0) {
          std::vector<double> clipped = p.tensor.grad();
          for (auto& g : clipped) g *= scale;
          adamw_step(p.tensor, clipped, moments[p.name], step, lr, tcfg);
        } else {
          adamw_step(p.tensor, p.tensor.grad(), moments[p.name], step, lr, tcfg);
        }
      }
    }

    EpochLog log;
    log.epoch = epoch;
    log.loss = loss_sum / static_cast<double>(steps_per_epoch);
    log.lr = last_lr;
    if (!val_pixels.empty()) {
      ConfusionMatrix cm = evaluate_pixels(model, scene, val_pixels, split.stats, patch_size);
      log.val_oa = compute_metrics(cm).overall_accuracy;
    }
    result.epochs.push_back(log);
    if (on_epoch) on_epoch(log);
  }

  if (!split.test.empty()) {
    result.test_confusion = evaluate_pixels(model, scene, split.test, split.stats, patch_size);
    result.test_metrics = compute_metrics(result.test_confusion);
  }
  result.moments = std::move(moments);
  result.steps = step;
  result.rng_state = batch_rng.save_state();
  result.drop_rng_state = drop_rng.save_state();
  return result;
}

}  // namespace vphype
