#pragma once

// Exhaustive inner-product retrieval and the ranking metric suite, all in
// 64-bit regardless of training precision.

#include <filesystem>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "scimult/blocks.hpp"
#include "scimult/tensor.hpp"

namespace scimult {

struct EmbeddedCorpus {
  std::vector<std::string> ids;
  Tensor<double> matrix;  // |ids| x d, row i embeds ids[i]
  TaskId task = TaskId::Classification;
  std::string fingerprint;  // of the checkpoint that produced it
};

struct RankedEntry {
  std::string id;
  double score = 0.0;
};

struct RankedList {
  std::string query_id;
  std::vector<RankedEntry> entries;  // score descending, ties by id ascending
  bool k_truncated = false;          // k exceeded the corpus size
};

struct MetricReport {
  std::string run_id;
  std::string task;
  std::string protocol;
  std::vector<std::size_t> k_values;
  std::map<std::string, double> metrics;
  std::vector<std::pair<std::string, std::map<std::string, double>>> per_query;
  std::size_t skipped_queries = 0;

  std::string to_json() const;
};

// Exact top-k by dot product over the whole corpus.
RankedList retrieve_topk(std::span<const double> query_emb,
                         const EmbeddedCorpus& corpus, std::size_t k);

double recall_at_k(const RankedList& ranked,
                   const std::set<std::string>& relevant, std::size_t k);

// Gain 2^rel - 1, discount log2(rank+1); k = 0 means full depth.
double ndcg_at_k(const RankedList& ranked,
                 const std::map<std::string, int>& gains, std::size_t k);

// Average precision of one ranked list (the report aggregates over queries).
double mean_average_precision(const RankedList& ranked,
                              const std::set<std::string>& relevant);

double macro_f1(const std::vector<std::string>& gold,
                const std::vector<std::string>& predicted,
                const std::vector<std::string>& label_space);

// Nearest-label-embedding prediction, then macro-F1 over the label space.
double macro_f1_bienc(const EmbeddedCorpus& paper_embeddings,
                      const EmbeddedCorpus& label_embeddings,
                      const std::map<std::string, std::string>& gold);

// Stable partition: labels whose name occurs in the paper text (case-
// insensitive, on word boundaries) move in front of the rest.
RankedList label_name_rerank(const std::string& paper_text,
                             const RankedList& ranked_labels,
                             const std::map<std::string, std::string>& label_names);

struct RerankOutcome {
  std::map<std::string, double> metrics;
  bool graded = false;
  bool skipped = false;  // pool had no positive relevance
};

// Scores one provided candidate pool. Binary pools report ap + ndcg; graded
// pools report ndcg, ndcg@5, ndcg@10. Requesting "map" on a graded pool is
// a contract violation. `force_graded` applies the graded treatment even to
// a binary pool, so runs that mix grades stay on one metric set.
RerankOutcome rerank_eval(
    const std::string& query_id,
    const std::vector<std::pair<std::string, int>>& scored_candidates,
    const std::vector<double>& candidate_scores,
    const std::vector<std::string>* requested_metrics = nullptr,
    bool force_graded = false);

void write_trec_run(const std::filesystem::path& path,
                    const std::vector<RankedList>& lists,
                    const std::string& tag);

}  // namespace scimult
