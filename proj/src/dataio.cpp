#include "scimult/dataio.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "scimult/blocks.hpp"

namespace scimult {

namespace {

using ordered_json = nlohmann::ordered_json;

std::string loc(const std::filesystem::path& path, std::size_t line) {
  return path.string() + ":" + std::to_string(line);
}

std::string need_string(const nlohmann::json& obj, const char* key,
                        const std::filesystem::path& path, std::size_t line) {
  const auto it = obj.find(key);
  if (it == obj.end() || !it->is_string())
    throw data_error(loc(path, line) + ": field '" + key +
                     "' missing or not a string");
  return it->get<std::string>();
}

std::string opt_string(const nlohmann::json& obj, const char* key,
                       const std::filesystem::path& path, std::size_t line) {
  const auto it = obj.find(key);
  if (it == obj.end() || it->is_null()) return "";
  if (!it->is_string())
    throw data_error(loc(path, line) + ": field '" + key + "' must be a string");
  return it->get<std::string>();
}

std::vector<std::string> opt_string_list(const nlohmann::json& obj,
                                         const char* key,
                                         const std::filesystem::path& path,
                                         std::size_t line) {
  const auto it = obj.find(key);
  if (it == obj.end() || it->is_null()) return {};
  if (!it->is_array())
    throw data_error(loc(path, line) + ": field '" + key + "' must be an array");
  std::vector<std::string> out;
  for (const auto& v : *it) {
    if (!v.is_string())
      throw data_error(loc(path, line) + ": field '" + key +
                       "' must hold strings");
    out.push_back(v.get<std::string>());
  }
  return out;
}

// Applies fn(line_number, parsed_object) to every non-blank line.
template <class Fn>
void for_each_record(const std::filesystem::path& path, Fn&& fn) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot open " + path.string());
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line.find_first_not_of(" \t\r") == std::string::npos)
      continue;
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw data_error(loc(path, line_no) + ": malformed JSON (" + e.what() +
                       ")");
    }
    if (!obj.is_object())
      throw data_error(loc(path, line_no) + ": record is not a JSON object");
    fn(line_no, obj);
  }
}

class DuplicateIdCheck {
 public:
  explicit DuplicateIdCheck(const std::filesystem::path& path) : path_(path) {}
  void check(const std::string& id, std::size_t line) {
    const auto [it, fresh] = seen_.emplace(id, line);
    if (!fresh)
      throw data_error("duplicate id '" + id + "' at " + loc(path_, it->second) +
                       " and " + loc(path_, line));
  }

 private:
  std::filesystem::path path_;
  std::map<std::string, std::size_t> seen_;
};

void write_lines(const std::filesystem::path& path,
                 const std::vector<std::string>& lines) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw data_error("cannot write " + path.string());
  for (const auto& l : lines) out << l << '\n';
}

}  // namespace

std::vector<PaperRecord> load_papers(const std::filesystem::path& path) {
  std::vector<PaperRecord> out;
  DuplicateIdCheck dup(path);
  for_each_record(path, [&](std::size_t line, const nlohmann::json& obj) {
    PaperRecord p;
    p.id = need_string(obj, "id", path, line);
    if (p.id.empty()) throw data_error(loc(path, line) + ": empty id");
    dup.check(p.id, line);
    p.title = need_string(obj, "title", path, line);
    if (p.title.empty()) throw data_error(loc(path, line) + ": empty title");
    p.abstract = opt_string(obj, "abstract", path, line);
    p.cited_ids = opt_string_list(obj, "cited_ids", path, line);
    p.author_ids = opt_string_list(obj, "author_ids", path, line);
    p.venue_id = opt_string(obj, "venue_id", path, line);
    p.label_ids = opt_string_list(obj, "label_ids", path, line);
    out.push_back(std::move(p));
  });
  return out;
}

std::vector<LabelRecord> load_labels(const std::filesystem::path& path) {
  std::vector<LabelRecord> out;
  DuplicateIdCheck dup(path);
  for_each_record(path, [&](std::size_t line, const nlohmann::json& obj) {
    LabelRecord l;
    l.id = need_string(obj, "id", path, line);
    if (l.id.empty()) throw data_error(loc(path, line) + ": empty id");
    dup.check(l.id, line);
    l.name = need_string(obj, "name", path, line);
    if (l.name.empty()) throw data_error(loc(path, line) + ": empty name");
    l.description = opt_string(obj, "description", path, line);
    out.push_back(std::move(l));
  });
  return out;
}

std::vector<QueryRecord> load_queries(const std::filesystem::path& path) {
  std::vector<QueryRecord> out;
  DuplicateIdCheck dup(path);
  for_each_record(path, [&](std::size_t line, const nlohmann::json& obj) {
    QueryRecord q;
    q.id = need_string(obj, "id", path, line);
    if (q.id.empty()) throw data_error(loc(path, line) + ": empty id");
    dup.check(q.id, line);
    q.text = need_string(obj, "text", path, line);
    q.positive_paper_ids = opt_string_list(obj, "positive_paper_ids", path, line);
    if (const auto it = obj.find("scored_candidates");
        it != obj.end() && !it->is_null()) {
      if (!it->is_array())
        throw data_error(loc(path, line) + ": scored_candidates must be an array");
      q.has_scored_candidates = true;
      for (const auto& entry : *it) {
        if (!entry.is_array() || entry.size() != 2 || !entry[0].is_string() ||
            !entry[1].is_number_integer())
          throw data_error(loc(path, line) +
                           ": scored_candidates entries must be [paper_id, rel]");
        const int rel = entry[1].get<int>();
        if (rel < 0)
          throw data_error(loc(path, line) + ": negative relevance");
        q.scored_candidates.emplace_back(entry[0].get<std::string>(), rel);
      }
    }
    out.push_back(std::move(q));
  });
  return out;
}

std::vector<TripletRecord> load_triplets(const std::filesystem::path& path) {
  std::vector<TripletRecord> out;
  for_each_record(path, [&](std::size_t line, const nlohmann::json& obj) {
    TripletRecord t;
    t.query_id = need_string(obj, "query_id", path, line);
    t.positive_id = need_string(obj, "positive_id", path, line);
    t.negative_id = need_string(obj, "negative_id", path, line);
    if (t.query_id == t.positive_id || t.query_id == t.negative_id ||
        t.positive_id == t.negative_id)
      throw data_error(loc(path, line) + ": triplet ids must be distinct");
    const auto it = obj.find("negative_is_hard");
    if (it != obj.end()) {
      if (!it->is_boolean())
        throw data_error(loc(path, line) + ": negative_is_hard must be boolean");
      t.negative_is_hard = it->get<bool>();
    }
    out.push_back(std::move(t));
  });
  return out;
}

void save_papers(const std::filesystem::path& path,
                 const std::vector<PaperRecord>& papers) {
  std::vector<std::string> lines;
  lines.reserve(papers.size());
  for (const auto& p : papers) {
    ordered_json o;
    o["id"] = p.id;
    o["title"] = p.title;
    if (!p.abstract.empty()) o["abstract"] = p.abstract;
    if (!p.cited_ids.empty()) o["cited_ids"] = p.cited_ids;
    if (!p.author_ids.empty()) o["author_ids"] = p.author_ids;
    if (!p.venue_id.empty()) o["venue_id"] = p.venue_id;
    if (!p.label_ids.empty()) o["label_ids"] = p.label_ids;
    lines.push_back(o.dump());
  }
  write_lines(path, lines);
}

void save_labels(const std::filesystem::path& path,
                 const std::vector<LabelRecord>& labels) {
  std::vector<std::string> lines;
  lines.reserve(labels.size());
  for (const auto& l : labels) {
    ordered_json o;
    o["id"] = l.id;
    o["name"] = l.name;
    if (!l.description.empty()) o["description"] = l.description;
    lines.push_back(o.dump());
  }
  write_lines(path, lines);
}

void save_queries(const std::filesystem::path& path,
                  const std::vector<QueryRecord>& queries) {
  std::vector<std::string> lines;
  lines.reserve(queries.size());
  for (const auto& q : queries) {
    ordered_json o;
    o["id"] = q.id;
    o["text"] = q.text;
    if (!q.positive_paper_ids.empty())
      o["positive_paper_ids"] = q.positive_paper_ids;
    if (q.has_scored_candidates) {
      ordered_json arr = ordered_json::array();
      for (const auto& [pid, rel] : q.scored_candidates)
        arr.push_back(ordered_json::array({pid, rel}));
      o["scored_candidates"] = std::move(arr);
    }
    lines.push_back(o.dump());
  }
  write_lines(path, lines);
}

void save_triplets(const std::filesystem::path& path,
                   const std::vector<TripletRecord>& triplets) {
  std::vector<std::string> lines;
  lines.reserve(triplets.size());
  for (const auto& t : triplets) {
    ordered_json o;
    o["query_id"] = t.query_id;
    o["positive_id"] = t.positive_id;
    o["negative_id"] = t.negative_id;
    o["negative_is_hard"] = t.negative_is_hard;
    lines.push_back(o.dump());
  }
  write_lines(path, lines);
}

// ---- metadata graph ----

MetadataGraph MetadataGraph::build(const std::vector<PaperRecord>& papers) {
  MetadataGraph g;
  g.ids_.reserve(papers.size());
  for (const auto& p : papers) {
    const auto [it, fresh] = g.index_.emplace(p.id, g.ids_.size());
    if (!fresh) throw data_error("graph: duplicate paper id '" + p.id + "'");
    g.ids_.push_back(p.id);
  }
  g.labels_.resize(papers.size());
  g.neighbors_.resize(papers.size());
  std::map<std::string, std::vector<std::size_t>> by_author, by_venue;
  for (std::size_t i = 0; i < papers.size(); ++i) {
    g.labels_[i] = papers[i].label_ids;
    for (const auto& a : papers[i].author_ids) by_author[a].push_back(i);
    if (!papers[i].venue_id.empty()) by_venue[papers[i].venue_id].push_back(i);
  }
  std::vector<std::set<std::string>> nbr(papers.size());
  for (std::size_t i = 0; i < papers.size(); ++i) {
    for (const auto& cited : papers[i].cited_ids) {
      const auto it = g.index_.find(cited);
      if (it == g.index_.end()) {
        ++g.dropped_edges_;  // citation pointing outside the corpus
        continue;
      }
      if (it->second != i) nbr[i].insert(cited);
    }
  }
  const auto link_group = [&](const std::vector<std::size_t>& members) {
    for (const std::size_t a : members)
      for (const std::size_t b : members)
        if (a != b) nbr[a].insert(g.ids_[b]);
  };
  for (const auto& [author, members] : by_author) link_group(members);
  for (const auto& [venue, members] : by_venue) link_group(members);
  for (std::size_t i = 0; i < papers.size(); ++i)
    g.neighbors_[i].assign(nbr[i].begin(), nbr[i].end());
  return g;
}

std::size_t MetadataGraph::index_of(const std::string& paper_id) const {
  const auto it = index_.find(paper_id);
  if (it == index_.end())
    throw data_error("graph: unknown paper id '" + paper_id + "'");
  return it->second;
}

bool MetadataGraph::contains(const std::string& paper_id) const {
  return index_.count(paper_id) != 0;
}

const std::vector<std::string>& MetadataGraph::neighbors(
    const std::string& paper_id) const {
  return neighbors_[index_of(paper_id)];
}

const std::vector<std::string>& MetadataGraph::labels_of(
    const std::string& paper_id) const {
  return labels_[index_of(paper_id)];
}

std::vector<std::string> mine_hard_negative_labels(const MetadataGraph& graph,
                                                   const std::string& paper_id) {
  const auto& own = graph.labels_of(paper_id);
  const std::set<std::string> own_set(own.begin(), own.end());
  std::set<std::string> mined;
  for (const auto& nbr : graph.neighbors(paper_id))
    for (const auto& label : graph.labels_of(nbr))
      if (!own_set.count(label)) mined.insert(label);
  return {mined.begin(), mined.end()};
}

std::vector<std::string> mine_classification_hard_negatives(
    const MetadataGraph& graph, const std::string& paper_id,
    const std::string& label_id) {
  (void)label_id;  // the rule depends only on labels(p), which contains l
  return mine_hard_negative_labels(graph, paper_id);
}

// ---- synthetic corpus ----

SynthSpec SynthSpec::from_json_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw config_error("cannot open spec file " + path.string());
  nlohmann::json obj;
  try {
    obj = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw config_error("spec file " + path.string() + ": " + e.what());
  }
  SynthSpec s;
  const auto u = [&](const char* key, std::size_t& field) {
    if (const auto it = obj.find(key); it != obj.end()) {
      if (!it->is_number_unsigned())
        throw config_error(std::string("spec field '") + key +
                           "' must be a non-negative integer");
      field = it->get<std::size_t>();
    }
  };
  const auto f = [&](const char* key, double& field) {
    if (const auto it = obj.find(key); it != obj.end()) {
      if (!it->is_number())
        throw config_error(std::string("spec field '") + key +
                           "' must be a number");
      field = it->get<double>();
      if (field < 0.0 || field > 1.0)
        throw config_error(std::string("spec field '") + key +
                           "' must lie in [0, 1]");
    }
  };
  u("vocab_words", s.vocab_words);
  u("n_papers", s.n_papers);
  u("n_labels", s.n_labels);
  u("n_queries", s.n_queries);
  u("labels_per_family", s.labels_per_family);
  u("topic_words_per_label", s.topic_words_per_label);
  u("family_words", s.family_words);
  u("n_communities", s.n_communities);
  u("marker_words_per_community", s.marker_words_per_community);
  u("hubs_per_community", s.hubs_per_community);
  u("venues_per_community", s.venues_per_community);
  u("authors_per_community", s.authors_per_community);
  f("conflict", s.conflict);
  u("title_topic_words", s.title_topic_words);
  u("title_marker_words", s.title_marker_words);
  u("abstract_topic_words", s.abstract_topic_words);
  u("abstract_marker_words", s.abstract_marker_words);
  u("abstract_filler_words", s.abstract_filler_words);
  u("citations_per_paper", s.citations_per_paper);
  u("authors_per_paper", s.authors_per_paper);
  f("sibling_label_prob", s.sibling_label_prob);
  f("heldout_fraction", s.heldout_fraction);
  f("hard_negative_ratio", s.hard_negative_ratio);
  u("triplets_per_paper", s.triplets_per_paper);
  u("cocite_threshold", s.cocite_threshold);
  u("query_words", s.query_words);
  u("rerank_positives", s.rerank_positives);
  u("rerank_negatives", s.rerank_negatives);
  if (const auto it = obj.find("tasks"); it != obj.end()) {
    if (!it->is_array())
      throw config_error("spec field 'tasks' must be an array of task names");
    s.tasks.clear();
    for (const auto& v : *it) {
      if (!v.is_string())
        throw config_error("spec field 'tasks' must hold strings");
      task_from_name(v.get<std::string>());  // validates
      s.tasks.push_back(v.get<std::string>());
    }
  }
  return s;
}

std::string SynthSpec::to_json() const {
  ordered_json o;
  o["vocab_words"] = vocab_words;
  o["n_papers"] = n_papers;
  o["n_labels"] = n_labels;
  o["n_queries"] = n_queries;
  o["labels_per_family"] = labels_per_family;
  o["topic_words_per_label"] = topic_words_per_label;
  o["family_words"] = family_words;
  o["n_communities"] = n_communities;
  o["marker_words_per_community"] = marker_words_per_community;
  o["hubs_per_community"] = hubs_per_community;
  o["venues_per_community"] = venues_per_community;
  o["authors_per_community"] = authors_per_community;
  o["conflict"] = conflict;
  o["title_topic_words"] = title_topic_words;
  o["title_marker_words"] = title_marker_words;
  o["abstract_topic_words"] = abstract_topic_words;
  o["abstract_marker_words"] = abstract_marker_words;
  o["abstract_filler_words"] = abstract_filler_words;
  o["citations_per_paper"] = citations_per_paper;
  o["authors_per_paper"] = authors_per_paper;
  o["sibling_label_prob"] = sibling_label_prob;
  o["heldout_fraction"] = heldout_fraction;
  o["hard_negative_ratio"] = hard_negative_ratio;
  o["triplets_per_paper"] = triplets_per_paper;
  o["cocite_threshold"] = cocite_threshold;
  o["query_words"] = query_words;
  o["rerank_positives"] = rerank_positives;
  o["rerank_negatives"] = rerank_negatives;
  o["tasks"] = tasks;
  return o.dump(2);
}

std::size_t lexical_overlap(const std::string& query_text,
                            const std::string& candidate_text) {
  const auto qwords = split_words(query_text);
  const auto cwords = split_words(candidate_text);
  const std::set<std::string> cset(cwords.begin(), cwords.end());
  std::set<std::string> counted;
  for (const auto& w : qwords)
    if (cset.count(w)) counted.insert(w);
  return counted.size();
}

namespace {

struct PaperPlan {
  std::string id;
  std::vector<std::size_t> labels;  // primary first
  std::size_t family = 0;
  std::size_t community = 0;
  bool heldout = false;
};

std::string padded(const char* prefix, std::size_t i, int width) {
  std::string n = std::to_string(i);
  while (static_cast<int>(n.size()) < width) n.insert(n.begin(), '0');
  return prefix + n;
}

template <class T>
const T& pick_from(const std::vector<T>& v, rng::Stream& s) {
  return v[s.next_below(v.size())];
}

}  // namespace

void generate_synthetic_corpus(std::uint64_t seed, const SynthSpec& spec,
                               const std::filesystem::path& out_dir) {
  if (spec.n_labels == 0 || spec.n_papers == 0 || spec.n_communities == 0 ||
      spec.labels_per_family == 0)
    throw config_error("corpus spec: counts must be positive");
  const std::size_t n_families =
      (spec.n_labels + spec.labels_per_family - 1) / spec.labels_per_family;
  const std::size_t words_needed =
      spec.n_labels * spec.topic_words_per_label +
      n_families * spec.family_words +
      spec.n_communities * spec.marker_words_per_community;
  constexpr std::size_t kMinFiller = 20;
  if (words_needed + kMinFiller > spec.vocab_words)
    throw config_error(
        "corpus spec: vocabulary too small for the requested labels, "
        "families and communities (need " +
        std::to_string(words_needed + kMinFiller) + ", have " +
        std::to_string(spec.vocab_words) + ")");
  if (spec.topic_words_per_label == 0)
    throw config_error("corpus spec: topic_words_per_label must be positive");

  // Carve the word pool.
  std::size_t next_word = 0;
  const auto take_word = [&] { return padded("v", next_word++, 4); };
  std::vector<std::vector<std::string>> label_words(spec.n_labels);
  for (auto& lw : label_words)
    for (std::size_t j = 0; j < spec.topic_words_per_label; ++j)
      lw.push_back(take_word());
  std::vector<std::vector<std::string>> family_words(n_families);
  for (auto& fw : family_words)
    for (std::size_t j = 0; j < spec.family_words; ++j)
      fw.push_back(take_word());
  std::vector<std::vector<std::string>> marker_words(spec.n_communities);
  for (auto& mw : marker_words)
    for (std::size_t j = 0; j < spec.marker_words_per_community; ++j)
      mw.push_back(take_word());
  std::vector<std::string> filler;
  while (next_word < spec.vocab_words) filler.push_back(take_word());

  // Labels.
  std::vector<LabelRecord> labels(spec.n_labels);
  for (std::size_t i = 0; i < spec.n_labels; ++i) {
    const std::size_t fam = i / spec.labels_per_family;
    labels[i].id = padded("L", i, 4);
    const auto& lw = label_words[i];
    labels[i].name = lw.size() >= 2 ? lw[0] + " " + lw[1] : lw[0];
    std::string desc;
    for (const auto& w : family_words[fam]) desc += (desc.empty() ? "" : " ") + w;
    for (std::size_t j = 2; j < lw.size(); ++j)
      desc += (desc.empty() ? "" : " ") + lw[j];
    labels[i].description = desc;
  }

  // Paper skeletons: labels, family, community, split.
  std::vector<PaperPlan> plans(spec.n_papers);
  for (std::size_t i = 0; i < spec.n_papers; ++i) {
    auto& plan = plans[i];
    plan.id = padded("p", i, 5);
    rng::Stream ps(seed, "paper/" + plan.id);
    const std::size_t primary = i % spec.n_labels;
    plan.labels.push_back(primary);
    plan.family = primary / spec.labels_per_family;
    if (ps.next_unit() < spec.sibling_label_prob && spec.labels_per_family > 1) {
      const std::size_t base = plan.family * spec.labels_per_family;
      const std::size_t span =
          std::min(spec.labels_per_family, spec.n_labels - base);
      const std::size_t sibling = base + ps.next_below(span);
      if (sibling != primary) plan.labels.push_back(sibling);
    }
    plan.community = ps.next_unit() < spec.conflict
                         ? ps.next_below(spec.n_communities)
                         : plan.family % spec.n_communities;
    plan.heldout = ps.next_unit() < spec.heldout_fraction;
  }

  // Community membership (train papers only; held-out papers cite into the
  // training pool so evaluation positives stay retrievable).
  std::vector<std::vector<std::size_t>> community_train(spec.n_communities);
  for (std::size_t i = 0; i < spec.n_papers; ++i)
    if (!plans[i].heldout) community_train[plans[i].community].push_back(i);
  std::vector<std::vector<std::size_t>> community_hubs(spec.n_communities);
  for (std::size_t c = 0; c < spec.n_communities; ++c) {
    const std::size_t n_hubs =
        std::min(spec.hubs_per_community, community_train[c].size());
    community_hubs[c].assign(community_train[c].begin(),
                             community_train[c].begin() + n_hubs);
  }

  // Full paper records.
  std::vector<PaperRecord> papers(spec.n_papers);
  for (std::size_t i = 0; i < spec.n_papers; ++i) {
    const auto& plan = plans[i];
    auto& p = papers[i];
    p.id = plan.id;
    rng::Stream ws(seed, "words/" + plan.id);

    std::vector<std::string> topic_pool = family_words[plan.family];
    for (const std::size_t l : plan.labels)
      topic_pool.insert(topic_pool.end(), label_words[l].begin(),
                        label_words[l].end());
    const auto& markers = marker_words[plan.community];

    std::vector<std::string> title;
    const auto& primary_words = label_words[plan.labels.front()];
    title.push_back(primary_words[0]);
    if (primary_words.size() > 1) title.push_back(primary_words[1]);
    while (title.size() < std::max<std::size_t>(spec.title_topic_words, 1))
      title.push_back(pick_from(topic_pool, ws));
    for (std::size_t j = 0; j < spec.title_marker_words; ++j)
      title.push_back(pick_from(markers, ws));
    rng::shuffle(title, ws);
    std::string title_text;
    for (const auto& w : title) title_text += (title_text.empty() ? "" : " ") + w;
    p.title = title_text;

    std::vector<std::string> body;
    body.push_back("s" + plan.id + "x");  // paper-unique slug word
    for (std::size_t j = 0; j < spec.abstract_topic_words; ++j)
      body.push_back(pick_from(topic_pool, ws));
    for (std::size_t j = 0; j < spec.abstract_marker_words; ++j)
      body.push_back(pick_from(markers, ws));
    for (std::size_t j = 0; j < spec.abstract_filler_words && !filler.empty();
         ++j)
      body.push_back(pick_from(filler, ws));
    rng::shuffle(body, ws);
    std::string abstract_text;
    for (const auto& w : body)
      abstract_text += (abstract_text.empty() ? "" : " ") + w;
    p.abstract = abstract_text;

    for (const std::size_t l : plan.labels) p.label_ids.push_back(labels[l].id);

    rng::Stream es(seed, "edges/" + plan.id);
    const auto& pool = community_train[plan.community];
    const auto& hubs = community_hubs[plan.community];
    if (!pool.empty()) {
      std::set<std::size_t> cited;
      const std::size_t want = spec.citations_per_paper;
      for (std::size_t attempt = 0; attempt < want * 10 && cited.size() < want;
           ++attempt) {
        const bool to_hub = cited.size() < (want + 1) / 2 && !hubs.empty();
        const std::size_t target =
            to_hub ? hubs[es.next_below(hubs.size())]
                   : pool[es.next_below(pool.size())];
        if (target != i) cited.insert(target);
      }
      for (const std::size_t c : cited) p.cited_ids.push_back(plans[c].id);
    }
    for (std::size_t j = 0; j < spec.authors_per_paper &&
                            spec.authors_per_community > 0;
         ++j)
      p.author_ids.push_back(
          "a" + std::to_string(plan.community) + "x" +
          std::to_string(es.next_below(spec.authors_per_community)));
    std::sort(p.author_ids.begin(), p.author_ids.end());
    p.author_ids.erase(std::unique(p.author_ids.begin(), p.author_ids.end()),
                       p.author_ids.end());
    if (spec.venues_per_community > 0)
      p.venue_id = "ven" + std::to_string(plan.community) + "x" +
                   std::to_string(es.next_below(spec.venues_per_community));
  }

  std::vector<PaperRecord> train_papers, heldout_papers;
  for (std::size_t i = 0; i < spec.n_papers; ++i)
    (plans[i].heldout ? heldout_papers : train_papers).push_back(papers[i]);
  if (train_papers.empty())
    throw config_error("corpus spec: held-out fraction leaves no training papers");

  std::map<std::string, std::size_t> paper_index;
  for (std::size_t i = 0; i < spec.n_papers; ++i)
    paper_index.emplace(papers[i].id, i);
  std::vector<std::size_t> train_indices;
  for (std::size_t i = 0; i < spec.n_papers; ++i)
    if (!plans[i].heldout) train_indices.push_back(i);

  const auto cited_set = [&](std::size_t i) {
    std::set<std::string> s(papers[i].cited_ids.begin(),
                            papers[i].cited_ids.end());
    return s;
  };

  // Citation triplets over training papers.
  std::vector<TripletRecord> triplets;
  for (const std::size_t qi : train_indices) {
    if (papers[qi].cited_ids.empty()) continue;
    rng::Stream ts(seed, "triplet/" + papers[qi].id);
    std::vector<std::string> cited = papers[qi].cited_ids;
    rng::shuffle(cited, ts);
    const std::set<std::string> q_cited = cited_set(qi);
    const std::size_t n_emit = std::min(spec.triplets_per_paper, cited.size());
    for (std::size_t j = 0; j < n_emit; ++j) {
      const std::string& pos = cited[j];
      TripletRecord t;
      t.query_id = papers[qi].id;
      t.positive_id = pos;
      const bool try_hard = ts.next_unit() < spec.hard_negative_ratio;
      if (try_hard) {
        // Negatives cited by the positive but not by the query.
        const std::size_t pos_idx = paper_index.at(pos);
        std::vector<std::string> cands;
        for (const auto& c : papers[pos_idx].cited_ids)
          if (!q_cited.count(c) && c != papers[qi].id && c != pos)
            cands.push_back(c);
        if (!cands.empty()) {
          t.negative_id = pick_from(cands, ts);
          t.negative_is_hard = true;
        }
      }
      if (t.negative_id.empty()) {
        for (std::size_t attempt = 0; attempt < 64; ++attempt) {
          const std::size_t r = train_indices[ts.next_below(train_indices.size())];
          const std::string& rid = papers[r].id;
          if (rid != papers[qi].id && rid != pos && !q_cited.count(rid)) {
            t.negative_id = rid;
            break;
          }
        }
        t.negative_is_hard = false;
      }
      if (!t.negative_id.empty()) triplets.push_back(std::move(t));
    }
  }

  // Search queries: each plants one training paper via its slug word plus a
  // few of its own words; scored candidates mimic a result list with the
  // click marked. Every fifth query is multi-segment.
  const auto make_query = [&](const std::string& qid, std::size_t serial,
                              rng::Stream& qs) {
    QueryRecord q;
    q.id = qid;
    const std::size_t target =
        train_indices[qs.next_below(train_indices.size())];
    const auto& tp = papers[target];
    std::vector<std::string> words = split_words(tp.title + " " + tp.abstract);
    std::vector<std::string> chosen;
    chosen.push_back("s" + tp.id + "x");
    const std::size_t extra =
        spec.query_words > 0 ? spec.query_words - 1 : std::size_t{3};
    for (std::size_t j = 0; j < extra; ++j) chosen.push_back(pick_from(words, qs));
    std::string text;
    for (std::size_t j = 0; j < chosen.size(); ++j) {
      if (j > 0) text += serial % 5 == 4 && j == chosen.size() / 2
                             ? " [SEP] "
                             : " ";
      text += chosen[j];
    }
    q.text = text;
    q.positive_paper_ids.push_back(tp.id);
    q.has_scored_candidates = true;
    q.scored_candidates.emplace_back(tp.id, 1);
    const auto& community = community_train[plans[target].community];
    std::set<std::string> seen{tp.id};
    for (std::size_t j = 0; j < 5 && community.size() > 1; ++j) {
      const std::string& cid = papers[community[qs.next_below(community.size())]].id;
      if (seen.insert(cid).second) q.scored_candidates.emplace_back(cid, 0);
    }
    for (std::size_t j = 0; j < 4; ++j) {
      const std::string& cid =
          papers[train_indices[qs.next_below(train_indices.size())]].id;
      if (seen.insert(cid).second) q.scored_candidates.emplace_back(cid, 0);
    }
    return q;
  };

  std::vector<QueryRecord> train_queries;
  for (std::size_t i = 0; i < spec.n_queries; ++i) {
    rng::Stream qs(seed, "query/" + std::to_string(i));
    train_queries.push_back(make_query(padded("q", i, 4), i, qs));
  }
  const std::size_t n_eval_queries = std::max<std::size_t>(spec.n_queries / 4, 25);
  std::vector<QueryRecord> eval_queries;
  for (std::size_t i = 0; i < n_eval_queries; ++i) {
    rng::Stream qs(seed, "evalquery/" + std::to_string(i));
    eval_queries.push_back(make_query(padded("eq", i, 4), i, qs));
  }

  // Link-prediction evaluation: held-out papers retrieve their citations
  // from the training pool.
  std::vector<QueryRecord> lp_queries;
  for (const auto& hp : heldout_papers) {
    if (hp.cited_ids.empty()) continue;
    QueryRecord q;
    q.id = "lp-" + hp.id;
    q.text = hp.title + " [SEP] " + hp.abstract;
    q.positive_paper_ids = hp.cited_ids;
    lp_queries.push_back(std::move(q));
  }

  // Reranking evaluation: binary pools of cited positives + random negatives.
  std::vector<QueryRecord> rerank_queries;
  for (const auto& hp : heldout_papers) {
    if (hp.cited_ids.empty()) continue;
    rng::Stream rs(seed, "rerank/" + hp.id);
    QueryRecord q;
    q.id = "rr-" + hp.id;
    q.text = hp.title + " [SEP] " + hp.abstract;
    q.has_scored_candidates = true;
    const std::set<std::string> pos_set(hp.cited_ids.begin(), hp.cited_ids.end());
    std::vector<std::string> pos(hp.cited_ids);
    rng::shuffle(pos, rs);
    pos.resize(std::min(pos.size(), spec.rerank_positives));
    std::set<std::string> seen(pos.begin(), pos.end());
    std::vector<std::pair<std::string, int>> pool;
    for (const auto& pid : pos) pool.emplace_back(pid, 1);
    for (std::size_t attempt = 0;
         attempt < spec.rerank_negatives * 10 &&
         pool.size() < pos.size() + spec.rerank_negatives;
         ++attempt) {
      const std::string& cid =
          papers[train_indices[rs.next_below(train_indices.size())]].id;
      if (!pos_set.count(cid) && cid != hp.id && seen.insert(cid).second)
        pool.emplace_back(cid, 0);
    }
    rng::shuffle(pool, rs);
    q.scored_candidates = std::move(pool);
    for (const auto& pid : pos) q.positive_paper_ids.push_back(pid);
    rerank_queries.push_back(std::move(q));
  }

  // Graded recommendation evaluation from co-citation counts: candidates
  // co-cited with the query at least cocite_threshold/4 times, graded into
  // 1..5 by how far above the threshold they sit.
  std::map<std::string, std::map<std::string, std::size_t>> cocite;
  for (const std::size_t i : train_indices) {
    const auto& cited = papers[i].cited_ids;
    for (std::size_t a = 0; a < cited.size(); ++a)
      for (std::size_t b = 0; b < cited.size(); ++b)
        if (a != b) cocite[cited[a]][cited[b]]++;
  }
  std::vector<QueryRecord> recommend_queries;
  for (const std::size_t c : train_indices) {
    const auto it = cocite.find(papers[c].id);
    if (it == cocite.end() || it->second.size() < 3) continue;
    if (recommend_queries.size() >= 50) break;
    const std::size_t t = spec.cocite_threshold;
    QueryRecord q;
    q.id = "rec-" + papers[c].id;
    q.text = papers[c].title + " [SEP] " + papers[c].abstract;
    q.has_scored_candidates = true;
    for (const auto& [other, count] : it->second) {
      int grade = 1;
      if (count >= 2 * t) grade = 5;
      else if (count >= t) grade = 4;
      else if (count * 2 >= t) grade = 3;
      else if (count * 4 >= t) grade = 2;
      q.scored_candidates.emplace_back(other, grade);
    }
    if (q.scored_candidates.size() >= 3) recommend_queries.push_back(std::move(q));
  }

  // Write everything.
  namespace fs = std::filesystem;
  const fs::path train_dir = out_dir / "train";
  save_papers(train_dir / "papers.jsonl", train_papers);
  save_labels(train_dir / "labels.jsonl", labels);
  save_queries(train_dir / "queries.jsonl", train_queries);
  save_triplets(train_dir / "triplets.jsonl", triplets);

  save_papers(out_dir / "eval" / "classification" / "papers.jsonl",
              heldout_papers);
  save_labels(out_dir / "eval" / "classification" / "labels.jsonl", labels);
  save_papers(out_dir / "eval" / "link_prediction" / "papers.jsonl",
              train_papers);
  save_queries(out_dir / "eval" / "link_prediction" / "queries.jsonl",
               lp_queries);
  save_papers(out_dir / "eval" / "search" / "papers.jsonl", train_papers);
  save_queries(out_dir / "eval" / "search" / "queries.jsonl", eval_queries);
  save_papers(out_dir / "eval" / "reranking" / "papers.jsonl", train_papers);
  save_queries(out_dir / "eval" / "reranking" / "queries.jsonl",
               rerank_queries);
  save_papers(out_dir / "eval" / "recommendation" / "papers.jsonl",
              train_papers);
  save_queries(out_dir / "eval" / "recommendation" / "queries.jsonl",
               recommend_queries);

  std::ofstream spec_out(out_dir / "spec.json", std::ios::binary);
  if (!spec_out) throw data_error("cannot write spec.json");
  ordered_json meta = ordered_json::parse(spec.to_json());
  meta["seed"] = seed;
  spec_out << meta.dump(2) << '\n';
}

}  // namespace scimult
