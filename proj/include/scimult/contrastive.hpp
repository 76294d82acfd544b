#pragma once

// Dot-product similarity and the in-batch contrastive objective: each query
// is scored against every positive and every hard negative in the batch
// (2B-1 candidates besides its own positive when cross-pooling is on, B
// candidates when off). The default loss is the softmax negative
// log-likelihood of the positive; `raw_softmax_loss` switches to the bare
// negated softmax probability for comparison runs.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "scimult/encoder.hpp"
#include "scimult/tensor.hpp"

namespace scimult {

struct ContrastiveBatch {
  TaskId task = TaskId::Classification;
  std::vector<std::string> queries;
  std::vector<std::string> positives;
  std::vector<std::string> hard_negatives;
};

struct LossReport {
  double loss = 0.0;
  double accuracy_in_batch = 0.0;
};

struct ContrastiveOptions {
  bool pool_cross_hard_negatives = true;
  bool raw_softmax_loss = false;
};

template <class S>
Tensor<S> similarity(const Tensor<S>& q_emb, const Tensor<S>& c_emb) {
  if (q_emb.numel() != c_emb.numel())
    throw contract_error("similarity: embedding dimensions disagree");
  return dot(q_emb, c_emb);
}

inline double contrastive_loss(double sim_pos,
                               const std::vector<double>& sim_negs,
                               bool raw_softmax_loss = false) {
  if (sim_negs.empty())
    throw contract_error("contrastive_loss: no negatives supplied");
  double m = sim_pos;
  for (const double s : sim_negs) m = std::max(m, s);
  double denom = std::exp(sim_pos - m);
  for (const double s : sim_negs) denom += std::exp(s - m);
  if (raw_softmax_loss) return -std::exp(sim_pos - m) / denom;
  return -(sim_pos - m - std::log(denom));
}

// Encoder parameters bound to their tokenizer (and, for the Instruction
// variant, the per-task instruction strings).
template <class S>
struct BoundEncoder {
  EncoderParams<S>* params = nullptr;
  const Tokenizer* tokenizer = nullptr;
  InstructionSet instructions = InstructionSet::defaults();

  Tensor<S> encode(const std::string& rendered, TaskId task,
                   const InstructionCache<S>* cache = nullptr) const {
    const std::vector<int> ids = tokenizer->tokenize(rendered);
    switch (params->variant) {
      case EncoderVariant::Vanilla:
        return encode_vanilla(*params, std::span<const int>(ids));
      case EncoderVariant::Expert:
        return encode_expert(*params, std::span<const int>(ids), task);
      case EncoderVariant::Instruction: {
        if (cache) return encode_instruction(*params, std::span<const int>(ids), *cache);
        const auto fresh =
            build_instruction_cache(*params, instructions, task, *tokenizer);
        return encode_instruction(*params, std::span<const int>(ids), fresh);
      }
    }
    throw contract_error("encode: unknown variant");
  }
};

template <class S>
struct BatchLossResult {
  Tensor<S> loss;
  LossReport report;
};

template <class S>
BatchLossResult<S> batch_loss(const BoundEncoder<S>& enc,
                              const ContrastiveBatch& batch,
                              const ContrastiveOptions& opt = {}) {
  const std::size_t b = batch.queries.size();
  if (b == 0) throw contract_error("batch_loss: empty batch");
  if (batch.positives.size() != b || batch.hard_negatives.size() != b)
    throw contract_error("batch_loss: query/positive/hard lists must align");

  InstructionCache<S> cache;
  const InstructionCache<S>* cache_ptr = nullptr;
  if (enc.params->variant == EncoderVariant::Instruction) {
    cache = build_instruction_cache(*enc.params, enc.instructions, batch.task,
                                    *enc.tokenizer);
    cache_ptr = &cache;
  }

  std::vector<Tensor<S>> query_rows, cand_rows;
  query_rows.reserve(b);
  cand_rows.reserve(2 * b);
  for (const auto& text : batch.queries)
    query_rows.push_back(enc.encode(text, batch.task, cache_ptr));
  for (const auto& text : batch.positives)
    cand_rows.push_back(enc.encode(text, batch.task, cache_ptr));
  for (const auto& text : batch.hard_negatives)
    cand_rows.push_back(enc.encode(text, batch.task, cache_ptr));

  const Tensor<S> q_mat = stack_rows(query_rows);       // B x d
  const Tensor<S> c_mat = stack_rows(cand_rows);        // 2B x d
  Tensor<S> scores = matmul(q_mat, transpose(c_mat));   // B x 2B

  // With cross-pooling off, a query only sees its own hard negative: other
  // hard-negative columns are pushed to -inf before the softmax.
  if (!opt.pool_cross_hard_negatives && b > 1) {
    std::vector<S> bias(b * 2 * b, S(0));
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < b; ++j)
        if (j != i) bias[i * 2 * b + b + j] = S(-1e30);
    scores = add(scores, Tensor<S>::from_data({b, 2 * b}, std::move(bias)));
  }

  std::vector<std::size_t> positive_cols(b);
  for (std::size_t i = 0; i < b; ++i) positive_cols[i] = i;

  Tensor<S> loss;
  if (opt.raw_softmax_loss) {
    loss = neg(mean_all(pick(softmax(scores, 1), positive_cols)));
  } else {
    loss = neg(mean_all(pick(log_softmax(scores, 1), positive_cols)));
  }

  LossReport report;
  report.loss = static_cast<double>(loss.value());
  std::size_t hits = 0;
  for (std::size_t i = 0; i < b; ++i) {
    const S pos = scores.at(i, i);
    bool best = true;
    for (std::size_t j = 0; j < 2 * b; ++j) {
      if (j == i) continue;
      if (scores.at(i, j) > pos) {
        best = false;
        break;
      }
    }
    hits += best ? 1 : 0;
  }
  report.accuracy_in_batch = static_cast<double>(hits) / static_cast<double>(b);

  return {loss, report};
}

}  // namespace scimult
