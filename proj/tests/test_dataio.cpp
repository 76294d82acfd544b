// Record formats and loaders, input templates, the hashing tokenizer, the
// metadata graph with label mining, and the synthetic corpus generator.

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "scimult/dataio.hpp"

using namespace scimult;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
  const fs::path dir = fs::temp_directory_path() / ("scimult_test_" + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_file(const fs::path& path, const std::string& content) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << content;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string error_text(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const std::exception& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("paper and label templates render with the fixed markers") {
  PaperRecord p;
  p.title = "Fast Matrix Multiplication";
  p.abstract = "We study algorithms.";
  CHECK(render_paper(p) ==
        "[CLS] Fast Matrix Multiplication [SEP] We study algorithms. [SEP]");
  p.abstract.clear();
  CHECK(render_paper(p) == "[CLS] Fast Matrix Multiplication [SEP]");
  p.title = "   ";
  CHECK_THROWS_AS(render_paper(p), data_error);

  LabelRecord l;
  l.name = "Databases";
  CHECK(render_label(l) == "[CLS] Databases [SEP]");
  l.description = "Storage systems";
  CHECK(render_label(l) == "[CLS] Databases [SEP] Storage systems [SEP]");

  CHECK(render_query("deep learning") == "[CLS] deep learning [SEP]");
  CHECK(render_query("part one [SEP] part two") ==
        "[CLS] part one [SEP] part two [SEP]");
}

TEST_CASE("field sanitization removes markers and reaches a fixpoint") {
  CHECK(sanitize_field("plain words") == "plain words");
  CHECK(sanitize_field("  padded  ") == "padded");
  CHECK(sanitize_field("[CLS]") == "");
  CHECK(sanitize_field("[sep]") == "");  // case-insensitive
  CHECK(sanitize_field("a [SEP] b").find("[SEP]") == std::string::npos);
  // Deleting an inner marker must not reassemble an outer one: the space
  // left behind keeps "[[SEP]CLS]" from collapsing into a live "[CLS]".
  const std::string once = sanitize_field("[[SEP]CLS] x");
  CHECK(once.find("[SEP]") == std::string::npos);
  CHECK(once.find("[CLS]") == std::string::npos);
  CHECK(sanitize_field(once) == once);  // idempotent
  Tokenizer probe(100);
  for (int id : probe.tokenize(once)) CHECK(id >= 2);
  // Rendered templates therefore contain exactly the markers they add.
  PaperRecord p;
  p.title = "Echo [CLS] inside";
  p.abstract = "and [SEP] here";
  const std::string rendered = render_paper(p);
  std::size_t seps = 0;
  for (std::size_t i = 0; (i = rendered.find("[SEP]", i)) != std::string::npos;
       ++i)
    ++seps;
  CHECK(seps == 2);
  CHECK(rendered.find("[CLS]") == 0);
  CHECK(rendered.find("[CLS]", 1) == std::string::npos);
}

TEST_CASE("tokenizer reserves marker ids and hashes words stably") {
  Tokenizer tok(30000);
  const auto ids = tok.tokenize("[CLS] Deep Learning [SEP] deep nets [SEP]");
  REQUIRE(ids.size() == 7);
  CHECK(ids[0] == Tokenizer::kClsId);
  CHECK(ids[3] == Tokenizer::kSepId);
  CHECK(ids[6] == Tokenizer::kSepId);
  CHECK(ids[1] == ids[4]);  // "Deep" and "deep" collapse
  for (int id : ids) {
    CHECK(id >= 0);
    CHECK(id < 30000);
  }
  CHECK(ids[1] >= 2);  // words never land on the reserved ids
  CHECK(tok.tokenize("deep") == tok.tokenize("DEEP"));
  CHECK_THROWS_AS(Tokenizer(2), config_error);
}

TEST_CASE("hash collisions stay under a fifth of a 10k-word sample") {
  Tokenizer tok(30000);
  std::set<int> distinct;
  const std::size_t n = 10000;
  for (std::size_t i = 0; i < n; ++i)
    distinct.insert(tok.word_id("word" + std::to_string(i)));
  const double collision_rate =
      static_cast<double>(n - distinct.size()) / static_cast<double>(n);
  CHECK(collision_rate < 0.20);
}

TEST_CASE("metadata graph links citations, co-authors and venues") {
  std::vector<PaperRecord> papers(3);
  papers[0].id = "a";
  papers[0].title = "t";
  papers[0].cited_ids = {"b", "ghost"};
  papers[0].venue_id = "v1";
  papers[0].author_ids = {"x"};
  papers[0].label_ids = {"L1"};
  papers[1].id = "b";
  papers[1].title = "t";
  papers[1].venue_id = "v2";
  papers[1].author_ids = {"x"};
  papers[1].label_ids = {"L2"};
  papers[2].id = "c";
  papers[2].title = "t";
  papers[2].venue_id = "v1";
  papers[2].label_ids = {"L1", "L3"};

  const auto graph = MetadataGraph::build(papers);
  CHECK(graph.paper_count() == 3);
  CHECK(graph.contains("a"));
  CHECK_FALSE(graph.contains("ghost"));
  CHECK(graph.dropped_edge_count() == 1);

  CHECK(graph.neighbors("a") == std::vector<std::string>{"b", "c"});
  // Citation reaches the cited side too; co-authorship is symmetric.
  CHECK(graph.neighbors("b") == std::vector<std::string>{"a"});
  CHECK(graph.neighbors("c") == std::vector<std::string>{"a"});
  CHECK(graph.labels_of("c") == std::vector<std::string>{"L1", "L3"});

  // Neighbor labels minus the paper's own labels, sorted.
  CHECK(mine_hard_negative_labels(graph, "a") ==
        std::vector<std::string>{"L2", "L3"});
  CHECK(mine_classification_hard_negatives(graph, "a", "L1") ==
        std::vector<std::string>{"L2", "L3"});
  CHECK(mine_hard_negative_labels(graph, "c") == std::vector<std::string>{});
  CHECK_THROWS_AS(graph.neighbors("ghost"), data_error);
}

TEST_CASE("paper loader reports the offending line") {
  const auto dir = temp_dir("loader");
  const auto path = dir / "papers.jsonl";

  write_file(path, R"({"id":"p1","title":"One"})"
                   "\n\n"
                   R"({"id":"p2","title":"Two","abstract":"text"})"
                   "\n");
  const auto papers = load_papers(path);
  REQUIRE(papers.size() == 2);
  CHECK(papers[0].id == "p1");
  CHECK(papers[1].abstract == "text");

  write_file(path, R"({"id":"p1","title":"One"})"
                   "\nnot json\n");
  auto msg = error_text([&] { load_papers(path); });
  CHECK(msg.find(":2") != std::string::npos);
  CHECK(msg.find("malformed JSON") != std::string::npos);

  write_file(path, R"({"id":"p1"})"
                   "\n");
  msg = error_text([&] { load_papers(path); });
  CHECK(msg.find("title") != std::string::npos);

  write_file(path, R"({"id":"dup","title":"A"})"
                   "\n"
                   R"({"id":"x","title":"B"})"
                   "\n"
                   R"({"id":"dup","title":"C"})"
                   "\n");
  msg = error_text([&] { load_papers(path); });
  CHECK(msg.find("duplicate id 'dup'") != std::string::npos);
  CHECK(msg.find(":1") != std::string::npos);
  CHECK(msg.find(":3") != std::string::npos);

  CHECK_THROWS_AS(load_papers(dir / "missing.jsonl"), data_error);
}

TEST_CASE("query loader understands optional scored candidates") {
  const auto dir = temp_dir("queries");
  const auto path = dir / "queries.jsonl";
  write_file(path,
             R"({"id":"q1","text":"find this","positive_paper_ids":["p1"]})"
             "\n"
             R"({"id":"q2","text":"rank these","positive_paper_ids":[],)"
             R"("scored_candidates":[["p1",2],["p2",0]]})"
             "\n");
  const auto queries = load_queries(path);
  REQUIRE(queries.size() == 2);
  CHECK_FALSE(queries[0].has_scored_candidates);
  CHECK(queries[1].has_scored_candidates);
  REQUIRE(queries[1].scored_candidates.size() == 2);
  CHECK(queries[1].scored_candidates[0] == std::pair<std::string, int>{"p1", 2});

  write_file(path, R"({"id":"q","text":"x","scored_candidates":[["p",-1]]})"
                   "\n");
  const auto msg = error_text([&] { load_queries(path); });
  CHECK(msg.find("negative relevance") != std::string::npos);
}

TEST_CASE("save then load is the identity and re-saving is byte-stable") {
  const auto dir = temp_dir("roundtrip");

  std::vector<PaperRecord> papers(2);
  papers[0].id = "p1";
  papers[0].title = "First";
  papers[0].abstract = "Alpha";
  papers[0].cited_ids = {"p2"};
  papers[0].author_ids = {"a1", "a2"};
  papers[0].venue_id = "v";
  papers[0].label_ids = {"L1"};
  papers[1].id = "p2";
  papers[1].title = "Second";

  save_papers(dir / "papers.jsonl", papers);
  const auto loaded = load_papers(dir / "papers.jsonl");
  REQUIRE(loaded.size() == 2);
  CHECK(loaded[0].cited_ids == papers[0].cited_ids);
  CHECK(loaded[0].venue_id == "v");
  CHECK(loaded[1].abstract.empty());
  save_papers(dir / "papers2.jsonl", loaded);
  CHECK(read_file(dir / "papers.jsonl") == read_file(dir / "papers2.jsonl"));

  std::vector<TripletRecord> trips(1);
  trips[0].query_id = "p1";
  trips[0].positive_id = "p2";
  trips[0].negative_id = "p3";
  trips[0].negative_is_hard = true;
  save_triplets(dir / "t.jsonl", trips);
  const auto tl = load_triplets(dir / "t.jsonl");
  REQUIRE(tl.size() == 1);
  CHECK(tl[0].negative_is_hard);
  save_triplets(dir / "t2.jsonl", tl);
  CHECK(read_file(dir / "t.jsonl") == read_file(dir / "t2.jsonl"));
}

TEST_CASE("corpus generation is deterministic in seed and spec") {
  SynthSpec spec;
  spec.n_papers = 60;
  spec.n_labels = 12;
  spec.n_queries = 12;
  spec.labels_per_family = 4;
  spec.n_communities = 3;
  spec.vocab_words = 400;

  const auto dir_a = temp_dir("gen_a");
  const auto dir_b = temp_dir("gen_b");
  const auto dir_c = temp_dir("gen_c");
  generate_synthetic_corpus(11, spec, dir_a);
  generate_synthetic_corpus(11, spec, dir_b);
  generate_synthetic_corpus(12, spec, dir_c);

  bool saw_file = false;
  for (const auto& entry : fs::recursive_directory_iterator(dir_a)) {
    if (!entry.is_regular_file()) continue;
    saw_file = true;
    const auto rel = fs::relative(entry.path(), dir_a);
    CHECK(read_file(entry.path()) == read_file(dir_b / rel));
  }
  CHECK(saw_file);
  CHECK(read_file(dir_a / "train" / "papers.jsonl") !=
        read_file(dir_c / "train" / "papers.jsonl"));

  // Layout: training split plus one directory per evaluation protocol.
  for (const char* sub :
       {"train/papers.jsonl", "train/labels.jsonl", "train/queries.jsonl",
        "train/triplets.jsonl", "eval/classification/papers.jsonl",
        "eval/classification/labels.jsonl", "eval/link_prediction/queries.jsonl",
        "eval/search/queries.jsonl", "eval/reranking/queries.jsonl",
        "eval/recommendation/queries.jsonl", "spec.json"})
    CHECK(fs::exists(dir_a / sub));
}

TEST_CASE("generated corpus is internally consistent") {
  SynthSpec spec;
  spec.n_papers = 80;
  spec.n_labels = 12;
  spec.n_queries = 15;
  spec.labels_per_family = 4;
  spec.n_communities = 3;
  spec.vocab_words = 500;
  const auto dir = temp_dir("gen_check");
  generate_synthetic_corpus(21, spec, dir);

  const auto papers = load_papers(dir / "train" / "papers.jsonl");
  const auto labels = load_labels(dir / "train" / "labels.jsonl");
  const auto triplets = load_triplets(dir / "train" / "triplets.jsonl");
  CHECK(labels.size() == 12);
  CHECK(papers.size() >= 60);  // the held-out split is small but nonzero
  CHECK(papers.size() < 80);

  std::set<std::string> label_ids, paper_ids;
  for (const auto& l : labels) label_ids.insert(l.id);
  for (const auto& p : papers) paper_ids.insert(p.id);
  for (const auto& p : papers) {
    CHECK_FALSE(p.title.empty());
    REQUIRE(!p.label_ids.empty());
    for (const auto& lid : p.label_ids) CHECK(label_ids.count(lid) == 1);
    for (const auto& cid : p.cited_ids) CHECK(paper_ids.count(cid) == 1);
  }
  for (const auto& t : triplets) {
    CHECK(paper_ids.count(t.query_id) == 1);
    CHECK(paper_ids.count(t.positive_id) == 1);
    CHECK(paper_ids.count(t.negative_id) == 1);
    CHECK(t.positive_id != t.negative_id);
  }

  // Held-out classification papers reuse the same label inventory.
  const auto heldout =
      load_papers(dir / "eval" / "classification" / "papers.jsonl");
  CHECK(!heldout.empty());
  for (const auto& p : heldout) {
    REQUIRE(!p.label_ids.empty());
    for (const auto& lid : p.label_ids) CHECK(label_ids.count(lid) == 1);
    // Held-out papers cite into the training pool only.
    for (const auto& cid : p.cited_ids) CHECK(paper_ids.count(cid) == 1);
  }
}

TEST_CASE("planted search queries lexically point at their positive") {
  SynthSpec spec;
  spec.n_papers = 80;
  spec.n_labels = 12;
  spec.n_queries = 20;
  spec.labels_per_family = 4;
  spec.n_communities = 3;
  spec.vocab_words = 500;
  const auto dir = temp_dir("gen_search");
  generate_synthetic_corpus(31, spec, dir);

  const auto papers = load_papers(dir / "eval" / "search" / "papers.jsonl");
  const auto queries = load_queries(dir / "eval" / "search" / "queries.jsonl");
  CHECK(!queries.empty());
  std::map<std::string, const PaperRecord*> by_id;
  for (const auto& p : papers) by_id[p.id] = &p;

  for (const auto& q : queries) {
    REQUIRE(q.positive_paper_ids.size() == 1);
    const auto* pos = by_id.at(q.positive_paper_ids.front());
    const std::string pos_text = pos->title + " " + pos->abstract;
    const std::size_t pos_overlap = lexical_overlap(q.text, pos_text);
    // The planted slug word alone guarantees overlap with the target.
    CHECK(pos_overlap >= 1);
    REQUIRE(q.has_scored_candidates);
    CHECK(q.scored_candidates.front().first == pos->id);
    CHECK(q.scored_candidates.front().second == 1);
    for (std::size_t j = 1; j < q.scored_candidates.size(); ++j) {
      CHECK(q.scored_candidates[j].second == 0);
      // No other candidate carries the query's slug word.
      const auto* neg = by_id.at(q.scored_candidates[j].first);
      const std::size_t neg_overlap =
          lexical_overlap("s" + pos->id + "x", neg->title + " " + neg->abstract);
      CHECK(neg_overlap == 0);
    }
  }

  CHECK(lexical_overlap("alpha beta gamma", "gamma delta alpha") == 2);
  CHECK(lexical_overlap("alpha alpha beta", "alpha") == 1);  // distinct words
  CHECK(lexical_overlap("x", "y") == 0);
}

TEST_CASE("mined label negatives cover most generated training pairs") {
  SynthSpec spec;
  spec.n_papers = 100;
  spec.n_labels = 16;
  spec.n_queries = 10;
  spec.labels_per_family = 4;
  spec.n_communities = 4;
  spec.vocab_words = 500;
  const auto dir = temp_dir("gen_mine");
  generate_synthetic_corpus(41, spec, dir);

  const auto papers = load_papers(dir / "train" / "papers.jsonl");
  const auto graph = MetadataGraph::build(papers);
  std::size_t pairs = 0, nonempty = 0;
  for (const auto& p : papers) {
    for (const auto& lid : p.label_ids) {
      ++pairs;
      if (!mine_classification_hard_negatives(graph, p.id, lid).empty())
        ++nonempty;
    }
  }
  REQUIRE(pairs > 0);
  CHECK(static_cast<double>(nonempty) / static_cast<double>(pairs) >= 0.5);
}

TEST_CASE("spec files round-trip through JSON") {
  SynthSpec spec;
  spec.n_papers = 77;
  spec.conflict = 0.25;
  spec.tasks = {"classification", "search"};
  const auto dir = temp_dir("specjson");
  write_file(dir / "spec.json", spec.to_json());
  const auto back = SynthSpec::from_json_file(dir / "spec.json");
  CHECK(back.n_papers == 77);
  CHECK(back.conflict == doctest::Approx(0.25));
  CHECK(back.tasks == std::vector<std::string>{"classification", "search"});

  write_file(dir / "bad.json", "{ nope");
  CHECK_THROWS_AS(SynthSpec::from_json_file(dir / "bad.json"), config_error);
  CHECK_THROWS_AS(SynthSpec::from_json_file(dir / "absent.json"), config_error);
}
