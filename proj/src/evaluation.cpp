#include "scimult/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "json.hpp"
#include "scimult/text.hpp"

namespace scimult {

std::string MetricReport::to_json() const {
  nlohmann::ordered_json o;
  o["run_id"] = run_id;
  o["task"] = task;
  o["protocol"] = protocol;
  if (!k_values.empty()) o["k_values"] = k_values;
  nlohmann::ordered_json m;
  for (const auto& [name, value] : metrics) m[name] = value;
  o["metrics"] = std::move(m);
  o["skipped_queries"] = skipped_queries;
  nlohmann::ordered_json pq = nlohmann::ordered_json::array();
  for (const auto& [qid, qmetrics] : per_query) {
    nlohmann::ordered_json row;
    row["id"] = qid;
    for (const auto& [name, value] : qmetrics) row[name] = value;
    pq.push_back(std::move(row));
  }
  o["per_query"] = std::move(pq);
  return o.dump(2);
}

RankedList retrieve_topk(std::span<const double> query_emb,
                         const EmbeddedCorpus& corpus, std::size_t k) {
  if (k == 0) throw contract_error("retrieve_topk: k must be >= 1");
  const std::size_t n = corpus.ids.size();
  if (n == 0) throw contract_error("retrieve_topk: empty corpus");
  const std::size_t d = corpus.matrix.cols();
  if (query_emb.size() != d)
    throw contract_error("retrieve_topk: query dimension does not match corpus");
  const auto mat = corpus.matrix.data();
  std::vector<std::pair<double, std::size_t>> scored(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0;
    const double* row = mat.data() + i * d;
    for (std::size_t j = 0; j < d; ++j) s += row[j] * query_emb[j];
    scored[i] = {s, i};
  }
  const auto better = [&](const std::pair<double, std::size_t>& a,
                          const std::pair<double, std::size_t>& b) {
    if (a.first != b.first) return a.first > b.first;
    return corpus.ids[a.second] < corpus.ids[b.second];
  };
  RankedList out;
  if (k >= n) {
    out.k_truncated = k > n;
    std::sort(scored.begin(), scored.end(), better);
  } else {
    std::partial_sort(scored.begin(), scored.begin() + k, scored.end(), better);
    scored.resize(k);
  }
  out.entries.reserve(scored.size());
  for (const auto& [score, idx] : scored)
    out.entries.push_back({corpus.ids[idx], score});
  return out;
}

double recall_at_k(const RankedList& ranked,
                   const std::set<std::string>& relevant, std::size_t k) {
  if (relevant.empty()) throw contract_error("recall: empty relevant set");
  std::size_t hit = 0;
  const std::size_t depth = std::min(k, ranked.entries.size());
  for (std::size_t i = 0; i < depth; ++i)
    if (relevant.count(ranked.entries[i].id)) ++hit;
  return static_cast<double>(hit) / static_cast<double>(relevant.size());
}

double ndcg_at_k(const RankedList& ranked,
                 const std::map<std::string, int>& gains, std::size_t k) {
  std::vector<int> positive;
  for (const auto& [id, g] : gains) {
    if (g < 0) throw contract_error("ndcg: negative gain");
    if (g > 0) positive.push_back(g);
  }
  if (positive.empty()) throw contract_error("ndcg: no positive gain");
  const std::size_t depth =
      k == 0 ? ranked.entries.size() : std::min(k, ranked.entries.size());
  double dcg = 0;
  for (std::size_t i = 0; i < depth; ++i) {
    const auto it = gains.find(ranked.entries[i].id);
    const int g = it == gains.end() ? 0 : it->second;
    if (g > 0)
      dcg += (std::exp2(static_cast<double>(g)) - 1.0) /
             std::log2(static_cast<double>(i) + 2.0);
  }
  std::sort(positive.begin(), positive.end(), std::greater<int>());
  const std::size_t ideal_depth =
      k == 0 ? positive.size() : std::min(k, positive.size());
  double idcg = 0;
  for (std::size_t i = 0; i < ideal_depth; ++i)
    idcg += (std::exp2(static_cast<double>(positive[i])) - 1.0) /
            std::log2(static_cast<double>(i) + 2.0);
  return dcg / idcg;
}

double mean_average_precision(const RankedList& ranked,
                              const std::set<std::string>& relevant) {
  if (relevant.empty()) throw contract_error("ap: empty relevant set");
  double sum = 0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < ranked.entries.size(); ++i) {
    if (relevant.count(ranked.entries[i].id)) {
      ++hits;
      sum += static_cast<double>(hits) / static_cast<double>(i + 1);
    }
  }
  return sum / static_cast<double>(relevant.size());
}

double macro_f1(const std::vector<std::string>& gold,
                const std::vector<std::string>& predicted,
                const std::vector<std::string>& label_space) {
  if (label_space.empty()) throw contract_error("macro_f1: empty label space");
  if (gold.size() != predicted.size())
    throw contract_error("macro_f1: gold/predicted lengths disagree");
  double total = 0;
  for (const auto& label : label_space) {
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < gold.size(); ++i) {
      const bool g = gold[i] == label;
      const bool p = predicted[i] == label;
      if (g && p) ++tp;
      else if (p) ++fp;
      else if (g) ++fn;
    }
    const std::size_t denom = 2 * tp + fp + fn;
    total += denom == 0 ? 0.0
                        : 2.0 * static_cast<double>(tp) /
                              static_cast<double>(denom);
  }
  return total / static_cast<double>(label_space.size());
}

double macro_f1_bienc(const EmbeddedCorpus& paper_embeddings,
                      const EmbeddedCorpus& label_embeddings,
                      const std::map<std::string, std::string>& gold) {
  if (label_embeddings.ids.empty())
    throw contract_error("macro_f1_bienc: empty label set");
  const std::size_t d = paper_embeddings.matrix.cols();
  if (label_embeddings.matrix.cols() != d)
    throw contract_error("macro_f1_bienc: embedding dimensions disagree");
  std::vector<std::string> gold_vec, pred_vec;
  const auto mat = paper_embeddings.matrix.data();
  for (std::size_t i = 0; i < paper_embeddings.ids.size(); ++i) {
    const auto it = gold.find(paper_embeddings.ids[i]);
    if (it == gold.end())
      throw contract_error("macro_f1_bienc: paper without a gold label: " +
                           paper_embeddings.ids[i]);
    gold_vec.push_back(it->second);
    const std::span<const double> row(mat.data() + i * d, d);
    const RankedList top = retrieve_topk(row, label_embeddings, 1);
    pred_vec.push_back(top.entries.front().id);
  }
  return macro_f1(gold_vec, pred_vec, label_embeddings.ids);
}

namespace {

std::string joined_words(const std::string& text) {
  std::string out = " ";
  for (const auto& w : split_words(text)) {
    out += w;
    out += ' ';
  }
  return out;
}

}  // namespace

RankedList label_name_rerank(const std::string& paper_text,
                             const RankedList& ranked_labels,
                             const std::map<std::string, std::string>& label_names) {
  const std::string haystack = joined_words(paper_text);
  RankedList out;
  out.query_id = ranked_labels.query_id;
  out.k_truncated = ranked_labels.k_truncated;
  std::vector<RankedEntry> matched, unmatched;
  for (const auto& entry : ranked_labels.entries) {
    bool hit = false;
    if (const auto it = label_names.find(entry.id); it != label_names.end()) {
      // Both sides carry boundary spaces, so this is a whole-word phrase
      // match; a bare " " means the name had no words at all.
      const std::string needle = joined_words(it->second);
      if (needle.size() > 1 && haystack.find(needle) != std::string::npos)
        hit = true;
    }
    (hit ? matched : unmatched).push_back(entry);
  }
  out.entries = std::move(matched);
  out.entries.insert(out.entries.end(), unmatched.begin(), unmatched.end());
  return out;
}

RerankOutcome rerank_eval(
    const std::string& query_id,
    const std::vector<std::pair<std::string, int>>& scored_candidates,
    const std::vector<double>& candidate_scores,
    const std::vector<std::string>* requested_metrics, bool force_graded) {
  if (scored_candidates.empty())
    throw contract_error("rerank_eval: empty candidate pool");
  if (candidate_scores.size() != scored_candidates.size())
    throw contract_error("rerank_eval: scores must align with candidates");

  RerankOutcome out;
  out.graded = force_graded;
  std::map<std::string, int> gains;
  std::set<std::string> relevant;
  for (const auto& [id, rel] : scored_candidates) {
    if (rel < 0) throw contract_error("rerank_eval: negative relevance");
    gains[id] = rel;
    if (rel > 1) out.graded = true;
    if (rel > 0) relevant.insert(id);
  }
  if (requested_metrics && out.graded) {
    for (const auto& m : *requested_metrics)
      if (m == "map")
        throw contract_error(
            "rerank_eval: map is undefined on graded relevance pools");
  }
  if (relevant.empty()) {
    out.skipped = true;
    return out;
  }

  RankedList ranked;
  ranked.query_id = query_id;
  ranked.entries.reserve(scored_candidates.size());
  for (std::size_t i = 0; i < scored_candidates.size(); ++i)
    ranked.entries.push_back(
        {scored_candidates[i].first, candidate_scores[i]});
  std::sort(ranked.entries.begin(), ranked.entries.end(),
            [](const RankedEntry& a, const RankedEntry& b) {
              if (a.score != b.score) return a.score > b.score;
              return a.id < b.id;
            });

  if (out.graded) {
    out.metrics["ndcg"] = ndcg_at_k(ranked, gains, 0);
    out.metrics["ndcg@5"] = ndcg_at_k(ranked, gains, 5);
    out.metrics["ndcg@10"] = ndcg_at_k(ranked, gains, 10);
  } else {
    out.metrics["map"] = mean_average_precision(ranked, relevant);
    out.metrics["ndcg"] = ndcg_at_k(ranked, gains, 0);
  }
  return out;
}

void write_trec_run(const std::filesystem::path& path,
                    const std::vector<RankedList>& lists,
                    const std::string& tag) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw data_error("cannot write " + path.string());
  for (const auto& list : lists) {
    std::size_t rank = 1;
    for (const auto& entry : list.entries) {
      out << list.query_id << " Q0 " << entry.id << ' ' << rank << ' '
          << entry.score << ' ' << tag << '\n';
      ++rank;
    }
  }
}

}  // namespace scimult
