#pragma once

// Transformer building blocks: the shared ("typical") pre-layer-norm
// residual block, and the task-routed block holding one MHA per task plus a
// shared FFN. Routing is by TaskId only; there is no learned gate.

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "scimult/tensor.hpp"

namespace scimult {

enum class TaskId : int { Classification = 0, LinkPrediction = 1, Search = 2 };

inline constexpr int kTaskCount = 3;
inline constexpr std::array<TaskId, 3> kAllTasks = {
    TaskId::Classification, TaskId::LinkPrediction, TaskId::Search};

inline const char* task_name(TaskId t) {
  switch (t) {
    case TaskId::Classification: return "classification";
    case TaskId::LinkPrediction: return "link_prediction";
    case TaskId::Search: return "search";
  }
  throw contract_error("task_name: unknown task id");
}

inline TaskId task_from_name(const std::string& s) {
  for (TaskId t : kAllTasks)
    if (s == task_name(t)) return t;
  throw config_error("unknown task name: " + s);
}

template <class S>
struct MhaParams {
  std::size_t model_dim = 0;
  std::size_t head_count = 0;
  Tensor<S> wq, wk, wv, wo;      // each model_dim x model_dim
  Tensor<S> ln_gain, ln_bias;    // pre-attention norm
};

template <class S>
struct FfnParams {
  std::size_t model_dim = 0;
  std::size_t ffn_dim = 0;
  Tensor<S> w1, b1;              // model_dim -> ffn_dim
  Tensor<S> w2, b2;              // ffn_dim -> model_dim
  Tensor<S> ln_gain, ln_bias;    // pre-ffn norm
};

template <class S>
struct TypicalBlock {
  MhaParams<S> mha;
  FfnParams<S> ffn;
};

template <class S>
struct TaskSpecificBlock {
  std::array<MhaParams<S>, kTaskCount> mha_by_task;
  FfnParams<S> shared_ffn;
};

template <class S>
using Block = std::variant<TypicalBlock<S>, TaskSpecificBlock<S>>;

struct StackConfig {
  std::size_t n_layers = 2;
  std::size_t model_dim = 32;
  std::size_t head_count = 2;
  std::size_t ffn_dim = 64;
  bool expert_mode = false;
  std::string first_block = "typical";
  double ln_eps = 1e-5;
  double init_std = 0.02;
};

namespace detail {

template <class S>
Tensor<S> init_weight(std::vector<std::size_t> shape, std::uint64_t seed,
                      const std::string& name, double stddev) {
  rng::Stream stream(seed, "init/" + name);
  auto t = Tensor<S>::randn(std::move(shape), stream, static_cast<S>(stddev));
  t.set_requires_grad(true);
  return t;
}

template <class S>
MhaParams<S> init_mha(const StackConfig& cfg, std::uint64_t seed,
                      const std::string& prefix) {
  if (cfg.model_dim == 0 || cfg.head_count == 0 ||
      cfg.model_dim % cfg.head_count != 0)
    throw config_error("attention: model_dim must be divisible by head_count");
  MhaParams<S> p;
  p.model_dim = cfg.model_dim;
  p.head_count = cfg.head_count;
  const std::vector<std::size_t> sq{cfg.model_dim, cfg.model_dim};
  p.wq = init_weight<S>(sq, seed, prefix + ".wq", cfg.init_std);
  p.wk = init_weight<S>(sq, seed, prefix + ".wk", cfg.init_std);
  p.wv = init_weight<S>(sq, seed, prefix + ".wv", cfg.init_std);
  p.wo = init_weight<S>(sq, seed, prefix + ".wo", cfg.init_std);
  p.ln_gain = Tensor<S>::full({cfg.model_dim}, S(1)).set_requires_grad(true);
  p.ln_bias = Tensor<S>::zeros({cfg.model_dim}).set_requires_grad(true);
  return p;
}

template <class S>
FfnParams<S> init_ffn(const StackConfig& cfg, std::uint64_t seed,
                      const std::string& prefix) {
  if (cfg.ffn_dim < cfg.model_dim)
    throw config_error("ffn: inner dimension must be >= model_dim");
  FfnParams<S> p;
  p.model_dim = cfg.model_dim;
  p.ffn_dim = cfg.ffn_dim;
  p.w1 = init_weight<S>({cfg.model_dim, cfg.ffn_dim}, seed, prefix + ".w1",
                        cfg.init_std);
  p.b1 = Tensor<S>::zeros({cfg.ffn_dim}).set_requires_grad(true);
  p.w2 = init_weight<S>({cfg.ffn_dim, cfg.model_dim}, seed, prefix + ".w2",
                        cfg.init_std);
  p.b2 = Tensor<S>::zeros({cfg.model_dim}).set_requires_grad(true);
  p.ln_gain = Tensor<S>::full({cfg.model_dim}, S(1)).set_requires_grad(true);
  p.ln_bias = Tensor<S>::zeros({cfg.model_dim}).set_requires_grad(true);
  return p;
}

}  // namespace detail

// mask: one flag per context row (non-zero = attend); empty means all rows.
template <class S>
Tensor<S> multi_head_attention(const MhaParams<S>& p, const Tensor<S>& queries,
                               const Tensor<S>& context,
                               std::span<const std::uint8_t> mask,
                               double ln_eps) {
  if (queries.rank() != 2 || context.rank() != 2 ||
      queries.cols() != p.model_dim || context.cols() != p.model_dim)
    throw contract_error("attention: input width does not match model_dim");
  if (!mask.empty() && mask.size() != context.rows())
    throw contract_error("attention: mask length does not match context");
  const std::size_t dk = p.model_dim / p.head_count;
  const Tensor<S> qn = layer_norm(queries, p.ln_gain, p.ln_bias,
                                  static_cast<S>(ln_eps));
  const Tensor<S> cn = context.node() == queries.node()
                           ? qn
                           : layer_norm(context, p.ln_gain, p.ln_bias,
                                        static_cast<S>(ln_eps));
  const Tensor<S> q_all = matmul(qn, p.wq);
  const Tensor<S> k_all = matmul(cn, p.wk);
  const Tensor<S> v_all = matmul(cn, p.wv);

  Tensor<S> mask_bias;
  bool any_masked = false;
  if (!mask.empty()) {
    std::vector<S> bias(mask.size(), S(0));
    for (std::size_t i = 0; i < mask.size(); ++i) {
      if (!mask[i]) {
        bias[i] = S(-1e30);
        any_masked = true;
      }
    }
    if (any_masked)
      mask_bias = Tensor<S>::from_data({mask.size()}, std::move(bias));
  }

  std::vector<Tensor<S>> head_outputs;
  head_outputs.reserve(p.head_count);
  const S inv_sqrt_dk = S(1) / std::sqrt(static_cast<S>(dk));
  for (std::size_t h = 0; h < p.head_count; ++h) {
    const std::size_t c0 = h * dk, c1 = (h + 1) * dk;
    const Tensor<S> qh = slice_cols(q_all, c0, c1);
    const Tensor<S> kh = slice_cols(k_all, c0, c1);
    const Tensor<S> vh = slice_cols(v_all, c0, c1);
    Tensor<S> scores = scale(matmul(qh, transpose(kh)), inv_sqrt_dk);
    if (any_masked) scores = add(scores, mask_bias);
    const Tensor<S> weights = softmax(scores, 1);
    head_outputs.push_back(matmul(weights, vh));
  }
  const Tensor<S> merged =
      p.head_count == 1 ? head_outputs.front() : concat_cols(head_outputs);
  return add(queries, matmul(merged, p.wo));
}

template <class S>
Tensor<S> ffn_forward(const FfnParams<S>& p, const Tensor<S>& hidden,
                      double ln_eps) {
  if (hidden.rank() != 2 || hidden.cols() != p.model_dim)
    throw contract_error("ffn: input width does not match model_dim");
  const Tensor<S> normed =
      layer_norm(hidden, p.ln_gain, p.ln_bias, static_cast<S>(ln_eps));
  const Tensor<S> inner = gelu(add(matmul(normed, p.w1), p.b1));
  return add(hidden, add(matmul(inner, p.w2), p.b2));
}

template <class S>
Tensor<S> typical_block_forward(const TypicalBlock<S>& block,
                                const Tensor<S>& hidden,
                                const Tensor<S>& context,
                                std::span<const std::uint8_t> mask,
                                double ln_eps) {
  if (context.rows() < hidden.rows())
    throw contract_error("block: context shorter than hidden states");
  const Tensor<S> attended =
      multi_head_attention(block.mha, hidden, context, mask, ln_eps);
  return ffn_forward(block.ffn, attended, ln_eps);
}

template <class S>
Tensor<S> task_block_forward(const TaskSpecificBlock<S>& block, TaskId task,
                             const Tensor<S>& hidden, const Tensor<S>& context,
                             std::span<const std::uint8_t> mask,
                             double ln_eps) {
  if (context.rows() < hidden.rows())
    throw contract_error("block: context shorter than hidden states");
  const auto& mha = block.mha_by_task.at(static_cast<std::size_t>(task));
  const Tensor<S> attended =
      multi_head_attention(mha, hidden, context, mask, ln_eps);
  return ffn_forward(block.shared_ffn, attended, ln_eps);
}

template <class S>
Tensor<S> block_forward(const Block<S>& block, TaskId task,
                        const Tensor<S>& hidden, const Tensor<S>& context,
                        std::span<const std::uint8_t> mask, double ln_eps) {
  if (const auto* typ = std::get_if<TypicalBlock<S>>(&block))
    return typical_block_forward(*typ, hidden, context, mask, ln_eps);
  return task_block_forward(std::get<TaskSpecificBlock<S>>(block), task,
                            hidden, context, mask, ln_eps);
}

template <class S>
std::vector<Block<S>> build_stack(const StackConfig& cfg, std::uint64_t seed) {
  if (cfg.n_layers == 0 || cfg.n_layers % 2 != 0)
    throw config_error("stack: n_layers must be a positive even number");
  if (cfg.first_block != "typical")
    throw config_error("stack: unsupported first_block value: " +
                       cfg.first_block);
  std::vector<Block<S>> stack;
  stack.reserve(cfg.n_layers);
  for (std::size_t i = 0; i < cfg.n_layers; ++i) {
    const std::string prefix = "blk" + std::to_string(i);
    const bool task_layer = cfg.expert_mode && (i % 2 == 1);
    if (task_layer) {
      TaskSpecificBlock<S> b;
      for (TaskId t : kAllTasks)
        b.mha_by_task[static_cast<std::size_t>(t)] = detail::init_mha<S>(
            cfg, seed, prefix + ".att." + task_name(t));
      b.shared_ffn = detail::init_ffn<S>(cfg, seed, prefix + ".ffn");
      stack.emplace_back(std::move(b));
    } else {
      TypicalBlock<S> b;
      b.mha = detail::init_mha<S>(cfg, seed, prefix + ".att");
      b.ffn = detail::init_ffn<S>(cfg, seed, prefix + ".ffn");
      stack.emplace_back(std::move(b));
    }
  }
  return stack;
}

// Stable traversal used by the optimizer, checkpoints and parameter counts.
template <class S, class Fn>
void visit_mha_params(MhaParams<S>& p, const std::string& prefix, Fn&& fn) {
  fn(prefix + ".wq", p.wq);
  fn(prefix + ".wk", p.wk);
  fn(prefix + ".wv", p.wv);
  fn(prefix + ".wo", p.wo);
  fn(prefix + ".ln_g", p.ln_gain);
  fn(prefix + ".ln_b", p.ln_bias);
}

template <class S, class Fn>
void visit_ffn_params(FfnParams<S>& p, const std::string& prefix, Fn&& fn) {
  fn(prefix + ".w1", p.w1);
  fn(prefix + ".b1", p.b1);
  fn(prefix + ".w2", p.w2);
  fn(prefix + ".b2", p.b2);
  fn(prefix + ".ln_g", p.ln_gain);
  fn(prefix + ".ln_b", p.ln_bias);
}

template <class S, class Fn>
void visit_block_params(Block<S>& block, std::size_t layer, Fn&& fn) {
  const std::string prefix = "blk" + std::to_string(layer);
  if (auto* typ = std::get_if<TypicalBlock<S>>(&block)) {
    visit_mha_params(typ->mha, prefix + ".att", fn);
    visit_ffn_params(typ->ffn, prefix + ".ffn", fn);
  } else {
    auto& tb = std::get<TaskSpecificBlock<S>>(block);
    for (TaskId t : kAllTasks)
      visit_mha_params(tb.mha_by_task[static_cast<std::size_t>(t)],
                       prefix + ".att." + std::string(task_name(t)), fn);
    visit_ffn_params(tb.shared_ffn, prefix + ".ffn", fn);
  }
}

}  // namespace scimult
