#pragma once

// Corpus records and their JSONL formats, the metadata graph with
// hard-negative mining, and the synthetic corpus generator.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "scimult/common.hpp"
#include "scimult/text.hpp"

namespace scimult {

struct PaperRecord {
  std::string id;
  std::string title;
  std::string abstract;  // empty = absent
  std::vector<std::string> cited_ids;
  std::vector<std::string> author_ids;
  std::string venue_id;  // empty = absent
  std::vector<std::string> label_ids;
};

struct LabelRecord {
  std::string id;
  std::string name;
  std::string description;  // empty = absent
};

struct QueryRecord {
  std::string id;
  std::string text;
  std::vector<std::string> positive_paper_ids;
  // (paper_id, relevance); non-empty only when the source had the field.
  std::vector<std::pair<std::string, int>> scored_candidates;
  bool has_scored_candidates = false;
};

struct TripletRecord {
  std::string query_id;
  std::string positive_id;
  std::string negative_id;
  bool negative_is_hard = false;
};

inline std::string render_paper(const PaperRecord& p) {
  return render_text_pair(p.title, p.abstract, "render_paper: empty title");
}

inline std::string render_label(const LabelRecord& l) {
  return render_text_pair(l.name, l.description, "render_label: empty name");
}

std::vector<PaperRecord> load_papers(const std::filesystem::path& path);
std::vector<LabelRecord> load_labels(const std::filesystem::path& path);
std::vector<QueryRecord> load_queries(const std::filesystem::path& path);
std::vector<TripletRecord> load_triplets(const std::filesystem::path& path);

void save_papers(const std::filesystem::path&, const std::vector<PaperRecord>&);
void save_labels(const std::filesystem::path&, const std::vector<LabelRecord>&);
void save_queries(const std::filesystem::path&, const std::vector<QueryRecord>&);
void save_triplets(const std::filesystem::path&,
                   const std::vector<TripletRecord>&);

// Citation (directed, out-edges), co-author and shared-venue relations over
// one paper corpus, plus the paper -> label assignment.
class MetadataGraph {
 public:
  static MetadataGraph build(const std::vector<PaperRecord>& papers);

  bool contains(const std::string& paper_id) const;
  std::size_t paper_count() const { return ids_.size(); }
  // Union of cited / co-author / same-venue papers, deduplicated, sorted.
  const std::vector<std::string>& neighbors(const std::string& paper_id) const;
  const std::vector<std::string>& labels_of(const std::string& paper_id) const;
  std::size_t dropped_edge_count() const { return dropped_edges_; }

 private:
  std::size_t index_of(const std::string& paper_id) const;
  std::vector<std::string> ids_;
  std::map<std::string, std::size_t> index_;
  std::vector<std::vector<std::string>> neighbors_;
  std::vector<std::vector<std::string>> labels_;
  std::size_t dropped_edges_ = 0;
};

// All labels carried by any neighbor of the paper that the paper itself
// does not carry; sorted by label id.
std::vector<std::string> mine_hard_negative_labels(const MetadataGraph& graph,
                                                   const std::string& paper_id);

// Same, for one (paper, label) training pair.
std::vector<std::string> mine_classification_hard_negatives(
    const MetadataGraph& graph, const std::string& paper_id,
    const std::string& label_id);

// ---- synthetic corpus ----

// Papers carry three disjoint word populations: per-label topic words (and
// per-family shared words) that drive classification relevance, per-
// community citation-marker words that drive link structure, and filler.
// The conflict knob decouples a paper's community from its label family, so
// classification and link prediction pull the encoder toward different
// features. Every paper also carries one paper-unique slug word, used by
// planted search queries.
struct SynthSpec {
  std::size_t vocab_words = 2000;
  std::size_t n_papers = 1000;
  std::size_t n_labels = 200;
  std::size_t n_queries = 200;
  std::size_t labels_per_family = 25;
  std::size_t topic_words_per_label = 3;
  std::size_t family_words = 5;
  std::size_t n_communities = 8;
  std::size_t marker_words_per_community = 6;
  std::size_t hubs_per_community = 5;
  std::size_t venues_per_community = 3;
  std::size_t authors_per_community = 20;
  double conflict = 0.0;  // 0 = community follows label family, 1 = random
  std::size_t title_topic_words = 4;
  std::size_t title_marker_words = 2;
  std::size_t abstract_topic_words = 8;
  std::size_t abstract_marker_words = 4;
  std::size_t abstract_filler_words = 6;
  std::size_t citations_per_paper = 4;
  std::size_t authors_per_paper = 2;
  double sibling_label_prob = 0.4;
  double heldout_fraction = 0.15;
  double hard_negative_ratio = 0.4;  // hard triplet probability
  std::size_t triplets_per_paper = 2;
  std::size_t cocite_threshold = 10;
  std::size_t query_words = 5;
  std::size_t rerank_positives = 5;
  std::size_t rerank_negatives = 25;
  std::vector<std::string> tasks = {"classification", "link_prediction",
                                    "search"};

  static SynthSpec from_json_file(const std::filesystem::path& path);
  std::string to_json() const;
};

// Writes train/{papers,labels,queries,triplets}.jsonl plus per-protocol
// eval directories under out_dir. Same seed+spec => byte-identical files.
void generate_synthetic_corpus(std::uint64_t seed, const SynthSpec& spec,
                               const std::filesystem::path& out_dir);

// The generator's own relevance notion, exposed so tests can recompute it:
// number of distinct query words present in the candidate text.
std::size_t lexical_overlap(const std::string& query_text,
                            const std::string& candidate_text);

}  // namespace scimult
