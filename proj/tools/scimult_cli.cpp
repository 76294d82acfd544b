// Command-line front end: synthetic corpus generation, hard-negative mining,
// training, embedding, and evaluation.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "scimult/dataio.hpp"
#include "scimult/training.hpp"

namespace {

using namespace scimult;

std::vector<std::size_t> parse_ks(const std::string& csv) {
  std::vector<std::size_t> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      const long v = std::stol(item);
      if (v <= 0) throw std::invalid_argument("non-positive");
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw config_error("bad k value '" + item + "' (expected e.g. 20,50,100)");
    }
  }
  if (out.empty()) throw config_error("--k needs at least one value");
  return out;
}

int run_synth(const std::string& spec_path, std::uint64_t seed,
              const std::string& out_dir) {
  const SynthSpec spec = SynthSpec::from_json_file(spec_path);
  generate_synthetic_corpus(seed, spec, out_dir);
  std::cout << "wrote corpus to " << out_dir << "\n";
  return 0;
}

int run_mine(const std::string& papers_path, const std::string& labels_path,
             const std::string& out_path) {
  const auto papers = load_papers(papers_path);
  const auto labels = load_labels(labels_path);
  std::set<std::string> known;
  for (const auto& l : labels) known.insert(l.id);
  for (const auto& p : papers)
    for (const auto& lid : p.label_ids)
      if (!known.count(lid))
        throw data_error("paper " + p.id + " references unknown label " + lid);
  const MetadataGraph graph = MetadataGraph::build(papers);
  std::ofstream out(out_path, std::ios::binary | std::ios::trunc);
  if (!out) throw data_error("cannot write " + out_path);
  std::size_t nonempty = 0;
  for (const auto& p : papers) {
    const auto mined = mine_hard_negative_labels(graph, p.id);
    nlohmann::ordered_json o;
    o["paper_id"] = p.id;
    o["hard_negative_label_ids"] = mined;
    out << o.dump() << "\n";
    if (!mined.empty()) ++nonempty;
  }
  if (!out) throw data_error("short write for " + out_path);
  std::cout << "mined hard negatives for " << papers.size() << " papers ("
            << nonempty << " non-empty); dropped "
            << graph.dropped_edge_count() << " dangling citations\n";
  return 0;
}

int run_train(const std::string& config_path, const std::string& warmstart,
              const std::string& out_path, bool two_stage) {
  TrainConfig config = TrainConfig::from_json_file(config_path);
  if (!warmstart.empty()) config.warmstart_checkpoint = warmstart;
  const Checkpoint ckpt = two_stage ? two_stage_pretrain(config) : train(config);
  ckpt.save(out_path);
  const auto& hist = ckpt.progress.loss_history;
  std::cout << "trained " << ckpt.progress.global_step << " steps";
  if (!hist.empty())
    std::cout << "; first loss " << hist.front() << ", last loss "
              << hist.back();
  std::cout << "; fallbacks " << ckpt.progress.hard_negative_fallbacks
            << "; checkpoint " << out_path << " (" << ckpt.fingerprint()
            << ")\n";
  return 0;
}

// The corpus file may hold papers, labels, or queries; the first record's
// fields decide which template renders each line.
void load_corpus_texts(const std::string& path, std::vector<std::string>& ids,
                       std::vector<std::string>& texts) {
  std::ifstream probe(path, std::ios::binary);
  if (!probe) throw data_error("cannot open corpus " + path);
  std::string first;
  while (std::getline(probe, first))
    if (first.find_first_not_of(" \t\r") != std::string::npos) break;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(first);
  } catch (const nlohmann::json::parse_error& e) {
    throw data_error(std::string("corpus line 1 is not JSON: ") + e.what());
  }
  if (j.contains("title")) {
    for (const auto& p : load_papers(path)) {
      ids.push_back(p.id);
      texts.push_back(render_paper(p));
    }
  } else if (j.contains("name")) {
    for (const auto& l : load_labels(path)) {
      ids.push_back(l.id);
      texts.push_back(render_label(l));
    }
  } else if (j.contains("text")) {
    for (const auto& q : load_queries(path)) {
      ids.push_back(q.id);
      texts.push_back(render_query(q.text));
    }
  } else {
    throw data_error("corpus records need a title, name, or text field");
  }
}

int run_embed(const std::string& ckpt_path, const std::string& corpus_path,
              const std::string& task_key, const std::string& out_path) {
  const Checkpoint ckpt = Checkpoint::load(ckpt_path);
  const TaskId task = task_from_name(task_key);
  std::vector<std::string> ids, texts;
  load_corpus_texts(corpus_path, ids, texts);
  const EmbeddedCorpus corpus = embed_texts(ckpt, ids, texts, task);
  write_embeddings(out_path, corpus);
  std::cout << "embedded " << ids.size() << " texts ("
            << task_name(task) << ") to " << out_path << "\n";
  return 0;
}

int run_evaluate(const std::string& ckpt_path, const std::string& protocol,
                 const std::string& data_dir, const std::string& ks_csv,
                 const std::string& out_path, const std::string& task_key,
                 const std::string& trec_path) {
  const Checkpoint ckpt = Checkpoint::load(ckpt_path);
  EvalRequest request;
  request.protocol = protocol;
  request.data_dir = data_dir;
  request.ks = parse_ks(ks_csv);
  if (!task_key.empty()) request.task_override = task_from_name(task_key);
  if (!trec_path.empty()) request.trec_out = trec_path;
  const MetricReport report = run_eval(ckpt, request);
  std::ofstream out(out_path, std::ios::binary | std::ios::trunc);
  if (!out) throw data_error("cannot write " + out_path);
  out << report.to_json() << "\n";
  if (!out) throw data_error("short write for " + out_path);
  for (const auto& [name, value] : report.metrics)
    std::cout << name << " = " << value << "\n";
  std::cout << "report written to " << out_path << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-task contrastive bi-encoder toolkit"};
  app.require_subcommand(1);

  auto* synth = app.add_subcommand("synth-data", "Generate a synthetic corpus");
  std::string synth_spec, synth_out;
  std::uint64_t synth_seed = 0;
  synth->add_option("--spec", synth_spec, "Generator spec JSON")->required();
  synth->add_option("--seed", synth_seed, "Generator seed")->required();
  synth->add_option("--out", synth_out, "Output directory")->required();

  auto* mine = app.add_subcommand("mine-negatives",
                                  "Mine hard-negative labels from metadata");
  std::string mine_papers, mine_labels, mine_out;
  mine->add_option("--papers", mine_papers, "papers.jsonl")->required();
  mine->add_option("--labels", mine_labels, "labels.jsonl")->required();
  mine->add_option("--out", mine_out, "Output JSONL")->required();

  auto* train_cmd = app.add_subcommand("train", "Train a bi-encoder");
  std::string train_config, train_warm, train_out = "checkpoint.bin";
  bool train_two_stage = false;
  train_cmd->add_option("--config", train_config, "TrainConfig JSON")->required();
  train_cmd->add_option("--warmstart", train_warm, "Checkpoint to warm-start from");
  train_cmd->add_option("--out", train_out, "Checkpoint output path");
  train_cmd->add_flag("--two-stage", train_two_stage,
                      "Train vanilla first, then expand to the target variant");

  auto* embed_cmd = app.add_subcommand("embed", "Embed a corpus file");
  std::string embed_ckpt, embed_corpus, embed_task, embed_out;
  embed_cmd->add_option("--ckpt", embed_ckpt, "Checkpoint")->required();
  embed_cmd->add_option("--corpus", embed_corpus, "JSONL corpus")->required();
  embed_cmd->add_option("--task", embed_task,
                        "classification|link_prediction|search")->required();
  embed_cmd->add_option("--out", embed_out, "Output embeddings")->required();

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  std::string eval_ckpt, eval_protocol, eval_data, eval_ks = "20,50,100";
  std::string eval_out, eval_task, eval_trec;
  eval_cmd->add_option("--ckpt", eval_ckpt, "Checkpoint")->required();
  eval_cmd->add_option("--protocol", eval_protocol,
                       "retrieval|reranking|classification|search")->required();
  eval_cmd->add_option("--data", eval_data, "Data directory")->required();
  eval_cmd->add_option("--k", eval_ks, "Comma-separated cutoffs");
  eval_cmd->add_option("--out", eval_out, "Report JSON path")->required();
  eval_cmd->add_option("--task", eval_task, "Override the task routing");
  eval_cmd->add_option("--trec", eval_trec, "Also export a TREC run file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (synth->parsed()) return run_synth(synth_spec, synth_seed, synth_out);
    if (mine->parsed()) return run_mine(mine_papers, mine_labels, mine_out);
    if (train_cmd->parsed())
      return run_train(train_config, train_warm, train_out, train_two_stage);
    if (embed_cmd->parsed())
      return run_embed(embed_ckpt, embed_corpus, embed_task, embed_out);
    if (eval_cmd->parsed())
      return run_evaluate(eval_ckpt, eval_protocol, eval_data, eval_ks,
                          eval_out, eval_task, eval_trec);
  } catch (const scimult::config_error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const scimult::data_error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const scimult::contract_error& e) {
    std::cerr << "contract violation: " << e.what() << "\n";
    return 4;
  }
  return 2;
}
