#pragma once

// Multi-task training: round-robin task scheduling, per-step contrastive
// batches with mined hard negatives, AdamW with the warmup/decay schedule,
// bit-exact checkpointing, and the evaluation runner.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "scimult/contrastive.hpp"
#include "scimult/dataio.hpp"
#include "scimult/encoder.hpp"
#include "scimult/evaluation.hpp"
#include "scimult/optim.hpp"

namespace scimult {

enum class Precision : int { F32 = 0, F64 = 1 };

inline const char* precision_name(Precision p) {
  return p == Precision::F32 ? "f32" : "f64";
}

struct TaskDataPaths {
  std::string papers;
  std::string labels;    // classification
  std::string queries;   // search
  std::string triplets;  // link prediction
};

struct TrainConfig {
  EncoderVariant variant = EncoderVariant::Vanilla;
  std::size_t n_layers = 2;
  std::size_t model_dim = 32;
  std::size_t head_count = 2;
  std::size_t ffn_dim = 64;
  std::size_t vocab_size = 4096;
  std::size_t max_len = 64;
  std::size_t batch_size = 32;
  std::size_t epochs = 20;
  double peak_lr = 3e-4;
  double warmup_fraction = 0.05;
  double weight_decay = 0.01;
  std::uint64_t seed = 0;
  std::string warmstart_checkpoint;
  std::map<TaskId, TaskDataPaths> task_data;
  bool raw_softmax_loss = false;
  bool pool_cross_hard_negatives = true;
  std::string first_block = "typical";
  bool proportional_sampling = false;
  bool use_mined_hard_negatives = true;
  std::size_t per_label_cap = 0;  // 0 = unlimited (p, l) pairs per label
  std::size_t stage1_epochs = 0;  // 0 = same as epochs
  Precision precision = Precision::F32;
  double ln_eps = 1e-5;
  double init_std = 0.02;
  std::map<TaskId, std::string> instructions;  // empty = built-in defaults

  static TrainConfig from_json_text(const std::string& text);
  static TrainConfig from_json_file(const std::filesystem::path& path);
  std::string to_json() const;
  EncoderConfig encoder_config() const;
  InstructionSet instruction_set() const;
};

template <class S>
struct ModelBundle {
  EncoderParams<S> params;
  OptimizerState<S> opt;
};

struct TaskProgress {
  std::uint64_t epoch = 0;   // per-task pass counter
  std::uint64_t cursor = 0;  // position inside the epoch permutation
};

struct TrainerProgress {
  std::int64_t global_step = 0;
  std::int64_t steps_per_epoch = 0;
  std::int64_t total_steps = 0;
  std::map<TaskId, TaskProgress> tasks;
  std::uint64_t hard_negative_fallbacks = 0;
  std::vector<double> loss_history;  // one entry per step
};

struct Checkpoint {
  TrainConfig config;
  std::variant<ModelBundle<float>, ModelBundle<double>> model;
  TrainerProgress progress;

  Precision precision() const {
    return std::holds_alternative<ModelBundle<float>>(model) ? Precision::F32
                                                             : Precision::F64;
  }
  std::string fingerprint() const;
  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);
};

// Deep copy (fresh storage, gradients dropped, requires_grad kept).
template <class S>
EncoderParams<S> clone_params(const EncoderParams<S>& src);

// Expands a Vanilla parameter set into the requested variant: Expert copies
// each vanilla MHA into all K experts of its layer; Instruction copies
// verbatim. Dimensions must agree.
template <class S>
EncoderParams<S> warmstart_variant(const EncoderParams<S>& vanilla,
                                   const EncoderConfig& target);

// Fresh training run; max_steps >= 0 stops early (for checkpoint tests).
Checkpoint train_steps(const TrainConfig& config, std::int64_t max_steps);
inline Checkpoint train(const TrainConfig& config) {
  return train_steps(config, -1);
}

// Continues a loaded checkpoint to completion (or for max_steps more steps).
Checkpoint resume_training(const Checkpoint& ckpt, std::int64_t max_steps = -1);

// Stage 1 trains Vanilla (stage1_epochs), stage 2 warm-starts the requested
// variant from it and trains for `epochs`.
Checkpoint two_stage_pretrain(const TrainConfig& config);

// Renders nothing itself: ids/texts must already be rendered templates.
EmbeddedCorpus embed_texts(const Checkpoint& ckpt,
                           const std::vector<std::string>& ids,
                           const std::vector<std::string>& rendered,
                           TaskId task);

void write_embeddings(const std::filesystem::path& path,
                      const EmbeddedCorpus& corpus);

double epoch_mean_loss(const TrainerProgress& progress, std::size_t epoch);

struct EvalRequest {
  std::string protocol;  // retrieval | reranking | classification | search
  std::filesystem::path data_dir;
  std::vector<std::size_t> ks = {20, 50, 100};
  std::optional<TaskId> task_override;
  std::filesystem::path trec_out;  // empty = no run-file export
};

MetricReport run_eval(const Checkpoint& ckpt, const EvalRequest& request);

}  // namespace scimult
