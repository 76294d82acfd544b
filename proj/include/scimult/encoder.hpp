#pragma once

// The three bi-encoder variants. All of them embed a rendered text as the
// position-0 ([CLS]) hidden state after the last layer, normalized by a
// final layer norm:
//   - Vanilla: plain self-attention stack.
//   - Expert: every other block routes its MHA by TaskId.
//   - Instruction: a per-task instruction is encoded once per parameter
//     state; its cached per-layer states are prepended as attention context
//     at every layer, and text token positions start after the prefix.

#include <atomic>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "scimult/blocks.hpp"
#include "scimult/tensor.hpp"
#include "scimult/text.hpp"

namespace scimult {

enum class EncoderVariant : int { Vanilla = 0, Expert = 1, Instruction = 2 };

inline const char* variant_name(EncoderVariant v) {
  switch (v) {
    case EncoderVariant::Vanilla: return "vanilla";
    case EncoderVariant::Expert: return "expert";
    case EncoderVariant::Instruction: return "instruction";
  }
  throw contract_error("variant_name: unknown variant");
}

inline EncoderVariant variant_from_name(const std::string& s) {
  if (s == "vanilla") return EncoderVariant::Vanilla;
  if (s == "expert") return EncoderVariant::Expert;
  if (s == "instruction") return EncoderVariant::Instruction;
  throw config_error("unknown encoder variant: " + s);
}

struct EncoderConfig {
  EncoderVariant variant = EncoderVariant::Vanilla;
  std::size_t n_layers = 2;
  std::size_t model_dim = 32;
  std::size_t head_count = 2;
  std::size_t ffn_dim = 64;
  std::size_t vocab_size = 4096;
  std::size_t max_len = 64;
  std::string first_block = "typical";
  double ln_eps = 1e-5;
  double init_std = 0.02;
};

struct InstructionSet {
  std::map<TaskId, std::string> text;

  static InstructionSet defaults() {
    InstructionSet s;
    s.text[TaskId::Classification] =
        "Tag a scientific paper with relevant scientific topic classes.";
    s.text[TaskId::LinkPrediction] =
        "Find a pair of scientific papers that one paper cites the other.";
    s.text[TaskId::Search] =
        "Retrieve a scientific paper that is relevant to the query.";
    return s;
  }

  const std::string& for_task(TaskId t) const {
    const auto it = text.find(t);
    if (it == text.end())
      throw contract_error(std::string("no instruction for task ") +
                           task_name(t));
    return it->second;
  }
};

// Copyable atomic tally (encoding may fan out over worker threads).
struct EventCounter {
  std::atomic<std::uint64_t> value{0};
  EventCounter() = default;
  EventCounter(const EventCounter& o) : value(o.value.load()) {}
  EventCounter& operator=(const EventCounter& o) {
    value.store(o.value.load());
    return *this;
  }
};

template <class S>
struct EncoderParams {
  EncoderVariant variant = EncoderVariant::Vanilla;
  EncoderConfig config;
  Tensor<S> token_embedding;     // vocab x d
  Tensor<S> position_embedding;  // max_len x d
  std::vector<Block<S>> stack;
  Tensor<S> final_ln_gain, final_ln_bias;
  mutable EventCounter truncation_count;

  template <class Fn>
  void visit_params(Fn&& fn) {
    fn(std::string("tok_emb"), token_embedding);
    fn(std::string("pos_emb"), position_embedding);
    for (std::size_t i = 0; i < stack.size(); ++i)
      visit_block_params(stack[i], i, fn);
    fn(std::string("final_ln_g"), final_ln_gain);
    fn(std::string("final_ln_b"), final_ln_bias);
  }

  std::vector<Tensor<S>> parameters() {
    std::vector<Tensor<S>> out;
    visit_params([&](const std::string&, Tensor<S>& t) { out.push_back(t); });
    return out;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    visit_params([&](const std::string&, Tensor<S>& t) { n += t.numel(); });
    return n;
  }

  void zero_grad() {
    visit_params([](const std::string&, Tensor<S>& t) { t.zero_grad(); });
  }
};

template <class S>
EncoderParams<S> init_encoder(const EncoderConfig& cfg, std::uint64_t seed) {
  if (cfg.vocab_size <= 2) throw config_error("encoder: vocab_size too small");
  if (cfg.max_len == 0) throw config_error("encoder: max_len must be positive");
  EncoderParams<S> p;
  p.variant = cfg.variant;
  p.config = cfg;
  p.token_embedding = detail::init_weight<S>({cfg.vocab_size, cfg.model_dim},
                                             seed, "tok_emb", cfg.init_std);
  p.position_embedding = detail::init_weight<S>(
      {cfg.max_len, cfg.model_dim}, seed, "pos_emb", cfg.init_std);
  StackConfig sc;
  sc.n_layers = cfg.n_layers;
  sc.model_dim = cfg.model_dim;
  sc.head_count = cfg.head_count;
  sc.ffn_dim = cfg.ffn_dim;
  sc.expert_mode = cfg.variant == EncoderVariant::Expert;
  sc.first_block = cfg.first_block;
  sc.ln_eps = cfg.ln_eps;
  sc.init_std = cfg.init_std;
  p.stack = build_stack<S>(sc, seed);
  p.final_ln_gain =
      Tensor<S>::full({cfg.model_dim}, S(1)).set_requires_grad(true);
  p.final_ln_bias = Tensor<S>::zeros({cfg.model_dim}).set_requires_grad(true);
  return p;
}

// Per-layer hidden states of one task's encoded instruction; layers[0] is
// the token+position embedding, layers[n] the output of block n.
template <class S>
struct InstructionCache {
  TaskId task = TaskId::Classification;
  std::size_t length = 0;  // M
  std::vector<Tensor<S>> layers;
  const EncoderParams<S>* origin = nullptr;
};

namespace detail {

template <class S>
Tensor<S> embed_tokens(const EncoderParams<S>& p, std::span<const int> ids,
                       std::size_t position_offset) {
  const Tensor<S> tok = embedding_rows(p.token_embedding, ids);
  const Tensor<S> pos = slice_rows(p.position_embedding, position_offset,
                                   position_offset + ids.size());
  return add(tok, pos);
}

// Shared trunk: run `ids` through the stack; with a cache, each layer's
// attention context is [cache layer n-1; current hidden states].
template <class S>
Tensor<S> encode_core(const EncoderParams<S>& p, std::span<const int> ids,
                      TaskId task, const InstructionCache<S>* cache) {
  if (ids.empty() || ids.front() != Tokenizer::kClsId)
    throw contract_error("encode: input must start with the [CLS] marker");
  const std::size_t prefix = cache ? cache->length : 0;
  if (prefix >= p.config.max_len)
    throw contract_error("encode: instruction prefix fills max_len");
  std::span<const int> use = ids;
  if (prefix + use.size() > p.config.max_len) {
    use = use.subspan(0, p.config.max_len - prefix);
    p.truncation_count.value.fetch_add(1, std::memory_order_relaxed);
  }
  Tensor<S> hidden = embed_tokens(p, use, prefix);
  for (std::size_t n = 0; n < p.stack.size(); ++n) {
    if (cache && cache->length > 0) {
      const Tensor<S> context =
          concat_rows<S>({cache->layers[n], hidden});
      hidden = block_forward(p.stack[n], task, hidden, context, {},
                             p.config.ln_eps);
    } else {
      hidden = block_forward(p.stack[n], task, hidden, hidden, {},
                             p.config.ln_eps);
    }
  }
  const Tensor<S> cls = take_row(hidden, 0);
  return layer_norm(cls, p.final_ln_gain, p.final_ln_bias,
                    static_cast<S>(p.config.ln_eps));
}

}  // namespace detail

template <class S>
Tensor<S> encode_vanilla(const EncoderParams<S>& p, std::span<const int> ids) {
  if (p.variant == EncoderVariant::Expert)
    throw contract_error("encode_vanilla: params belong to the expert variant");
  return detail::encode_core<S>(p, ids, TaskId::Classification, nullptr);
}

template <class S>
Tensor<S> encode_expert(const EncoderParams<S>& p, std::span<const int> ids,
                        TaskId task) {
  if (p.variant != EncoderVariant::Expert)
    throw contract_error("encode_expert: params are not the expert variant");
  return detail::encode_core<S>(p, ids, task, nullptr);
}

// Encodes the instruction with plain self-attention and keeps every layer's
// states. Rebuild after any parameter update; encode_instruction checks the
// cache still points at the params it was built from.
template <class S>
InstructionCache<S> build_instruction_cache(const EncoderParams<S>& p,
                                            std::span<const int> instr_ids,
                                            TaskId task) {
  if (p.variant != EncoderVariant::Instruction)
    throw contract_error("instruction cache: params are not the instruction variant");
  InstructionCache<S> cache;
  cache.task = task;
  cache.length = instr_ids.size();
  cache.origin = &p;
  if (instr_ids.empty()) return cache;
  if (instr_ids.size() >= p.config.max_len)
    throw contract_error("instruction cache: instruction exceeds max_len");
  Tensor<S> hidden = detail::embed_tokens(p, instr_ids, 0);
  cache.layers.push_back(hidden);
  for (std::size_t n = 0; n < p.stack.size(); ++n) {
    hidden = block_forward(p.stack[n], task, hidden, hidden, {},
                           p.config.ln_eps);
    cache.layers.push_back(hidden);
  }
  return cache;
}

template <class S>
InstructionCache<S> build_instruction_cache(const EncoderParams<S>& p,
                                            const InstructionSet& instructions,
                                            TaskId task,
                                            const Tokenizer& tokenizer) {
  const std::vector<int> ids = tokenizer.tokenize(instructions.for_task(task));
  return build_instruction_cache(p, std::span<const int>(ids), task);
}

template <class S>
Tensor<S> encode_instruction(const EncoderParams<S>& p,
                             std::span<const int> ids,
                             const InstructionCache<S>& cache) {
  if (p.variant != EncoderVariant::Instruction)
    throw contract_error("encode_instruction: params are not the instruction variant");
  if (cache.origin != &p)
    throw contract_error("encode_instruction: cache was built from different params");
  if (cache.length > 0 && cache.layers.size() != p.stack.size() + 1)
    throw contract_error("encode_instruction: cache depth does not match stack");
  return detail::encode_core(p, ids, cache.task, &cache);
}

}  // namespace scimult
