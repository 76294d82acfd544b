// Acceptance gate: ten end-to-end criteria, one printed verdict line each.
// Run with no arguments for the full gate, or pass criterion numbers to run
// a subset (e.g. "./acceptance 5 7"). Exit code 0 iff every criterion run
// passed. All tolerances and thresholds are pinned here as constants.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "scimult/training.hpp"

using namespace scimult;
namespace fs = std::filesystem;

namespace {

// ---- pinned tolerances and thresholds ----
constexpr double kGradRelTol = 1e-4;     // criterion 1
constexpr double kGradFdStep = 1e-5;     // criterion 1
constexpr double kGradBudgetSec = 120.0; // criterion 1
constexpr double kOracleNdcgTol = 1e-12; // criterion 4
constexpr double kOracleBudgetSec = 60.0;    // criterion 4
constexpr double kConcatOracleTol = 1e-10;   // criterion 3
constexpr double kLossHalving = 0.5;         // criterion 5
constexpr double kSanityRecallFloor = 0.80;  // criterion 5
constexpr double kSanityBudgetSec = 600.0;   // criterion 5
constexpr double kInterferenceSlack = 0.02;  // criterion 6
constexpr int kAblationSeeds[3] = {1, 2, 3}; // criteria 6-7

struct Outcome {
  bool pass = false;
  std::string note;
};

double seconds_since(
    const std::chrono::steady_clock::time_point& t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
      .count();
}

fs::path work_dir() {
  static const fs::path dir = [] {
    const fs::path d = fs::temp_directory_path() / "scimult_acceptance";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::string fmt(const char* f, ...) {
  char buf[512];
  va_list args;
  va_start(args, f);
  std::vsnprintf(buf, sizeof buf, f, args);
  va_end(args);
  return buf;
}

// ---------------------------------------------------------------------------
// Criterion 1: reverse-mode gradients of the batch loss match central finite
// differences for every parameter of every encoder variant.
// ---------------------------------------------------------------------------

Outcome criterion_gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  std::string worst_at = "-";
  std::size_t checked = 0;

  for (EncoderVariant variant : {EncoderVariant::Vanilla,
                                 EncoderVariant::Expert,
                                 EncoderVariant::Instruction}) {
    EncoderConfig cfg;
    cfg.variant = variant;
    cfg.n_layers = 2;
    cfg.model_dim = 8;
    cfg.head_count = 2;
    cfg.ffn_dim = 16;
    cfg.vocab_size = 50;
    cfg.max_len = 32;
    auto params = init_encoder<double>(cfg, 42);
    Tokenizer tokenizer(cfg.vocab_size);
    BoundEncoder<double> enc;
    enc.params = &params;
    enc.tokenizer = &tokenizer;

    ContrastiveBatch batch;
    batch.task = TaskId::Classification;
    batch.queries = {"[CLS] red apple [SEP]", "[CLS] blue sky [SEP]"};
    batch.positives = {"[CLS] ripe fruit [SEP]", "[CLS] clear air [SEP]"};
    batch.hard_negatives = {"[CLS] iron nail [SEP]", "[CLS] wet sand [SEP]"};

    params.zero_grad();
    backward(batch_loss(enc, batch).loss);

    const auto loss_at = [&] {
      NoGradGuard guard;
      return batch_loss(enc, batch).report.loss;
    };

    bool ok = true;
    params.visit_params([&](const std::string& name, Tensor<double>& t) {
      if (!ok) return;
      for (std::size_t i = 0; i < t.numel(); ++i) {
        const double saved = t.data()[i];
        t.data()[i] = saved + kGradFdStep;
        const double up = loss_at();
        t.data()[i] = saved - kGradFdStep;
        const double down = loss_at();
        t.data()[i] = saved;
        const double fd = (up - down) / (2.0 * kGradFdStep);
        const double ad = t.grad()[i];
        const double rel = std::abs(ad - fd) /
                           std::max({1.0, std::abs(ad), std::abs(fd)});
        ++checked;
        if (rel > worst) {
          worst = rel;
          worst_at = fmt("%s[%zu] (%s)", name.c_str(), i,
                         variant == EncoderVariant::Vanilla     ? "vanilla"
                         : variant == EncoderVariant::Expert    ? "expert"
                                                                : "instruction");
        }
        if (rel > kGradRelTol) {
          ok = false;
          return;
        }
      }
    });
    if (!ok)
      return {false, fmt("gradient mismatch at %s: rel err %.3e > %.0e",
                         worst_at.c_str(), worst, kGradRelTol)};
  }

  const double elapsed = seconds_since(t0);
  if (elapsed >= kGradBudgetSec)
    return {false, fmt("runtime %.1fs exceeds %.0fs budget", elapsed,
                       kGradBudgetSec)};
  return {true, fmt("%zu parameter entries, max rel err %.2e at %s",
                    checked, worst, worst_at.c_str())};
}

// ---------------------------------------------------------------------------
// Criterion 2: mixture-of-experts identities.
// ---------------------------------------------------------------------------

Outcome criterion_moe() {
  EncoderConfig cfg;
  cfg.variant = EncoderVariant::Expert;
  cfg.n_layers = 4;
  cfg.model_dim = 16;
  cfg.head_count = 2;
  cfg.ffn_dim = 32;
  cfg.vocab_size = 64;
  cfg.max_len = 24;

  // (a) equalized experts make routing a no-op, bit for bit.
  {
    auto p = init_encoder<double>(cfg, 7);
    for (auto& block : p.stack) {
      if (auto* tb = std::get_if<TaskSpecificBlock<double>>(&block)) {
        for (std::size_t t = 1; t < kTaskCount; ++t) {
          const auto& src = tb->mha_by_task[0];
          auto& dst = tb->mha_by_task[t];
          for (auto [from, to] :
               {std::pair{&src.wq, &dst.wq}, {&src.wk, &dst.wk},
                {&src.wv, &dst.wv}, {&src.wo, &dst.wo},
                {&src.ln_gain, &dst.ln_gain}, {&src.ln_bias, &dst.ln_bias}})
            std::copy(from->data().begin(), from->data().end(),
                      to->data().begin());
        }
      }
    }
    const std::vector<int> ids = {0, 9, 17, 33, 1};
    const auto a =
        encode_expert(p, std::span<const int>(ids), TaskId::Classification);
    for (TaskId t : {TaskId::LinkPrediction, TaskId::Search}) {
      const auto b = encode_expert(p, std::span<const int>(ids), t);
      for (std::size_t i = 0; i < a.numel(); ++i)
        if (a.data()[i] != b.data()[i])
          return {false, "equalized experts gave task-dependent output"};
    }
  }

  // (b) off-task expert gradients are exactly zero after a training loss.
  {
    auto p = init_encoder<double>(cfg, 8);
    Tokenizer tokenizer(cfg.vocab_size);
    BoundEncoder<double> enc;
    enc.params = &p;
    enc.tokenizer = &tokenizer;
    ContrastiveBatch batch;
    batch.task = TaskId::Classification;
    batch.queries = {"[CLS] alpha [SEP]", "[CLS] beta [SEP]"};
    batch.positives = {"[CLS] gamma [SEP]", "[CLS] delta [SEP]"};
    batch.hard_negatives = {"[CLS] epsilon [SEP]", "[CLS] zeta [SEP]"};
    p.zero_grad();
    backward(batch_loss(enc, batch).loss);
    bool on_task_moved = false;
    std::string offender;
    p.visit_params([&](const std::string& name, Tensor<double>& t) {
      const bool off_task =
          name.find(".att.link_prediction.") != std::string::npos ||
          name.find(".att.search.") != std::string::npos;
      bool any = false;
      for (std::size_t i = 0; i < t.numel(); ++i)
        if (t.grad()[i] != 0.0) any = true;
      if (off_task && any && offender.empty()) offender = name;
      if (name.find(".att.classification.") != std::string::npos && any)
        on_task_moved = true;
    });
    if (!offender.empty())
      return {false, "off-task expert received gradient: " + offender};
    if (!on_task_moved)
      return {false, "routed expert received no gradient at all"};
  }

  // (c) parameter count: Expert adds (K-1) extra attention sets on each of
  // the n/2 task-specific layers; one set is 4d^2 weights + 2d layer-norm.
  {
    EncoderConfig vcfg = cfg;
    vcfg.variant = EncoderVariant::Vanilla;
    auto vanilla = init_encoder<double>(vcfg, 9);
    auto expert = init_encoder<double>(cfg, 9);
    const auto count = [](EncoderParams<double>& p) {
      std::size_t n = 0;
      p.visit_params(
          [&](const std::string&, Tensor<double>& t) { n += t.numel(); });
      return n;
    };
    const std::size_t d = cfg.model_dim;
    const std::size_t per_set = 4 * d * d + 2 * d;
    const std::size_t expect =
        count(vanilla) + (kTaskCount - 1) * per_set * (cfg.n_layers / 2);
    if (count(expert) != expect)
      return {false, fmt("expert parameter count %zu, expected %zu",
                         count(expert), expect)};
  }

  return {true, "routing no-op, gradient isolation, and parameter count all hold"};
}

// ---------------------------------------------------------------------------
// Criterion 3: instruction-conditioning identities.
// ---------------------------------------------------------------------------

Outcome criterion_instruction() {
  EncoderConfig cfg;
  cfg.variant = EncoderVariant::Instruction;
  cfg.n_layers = 2;
  cfg.model_dim = 16;
  cfg.head_count = 2;
  cfg.ffn_dim = 32;
  cfg.vocab_size = 128;
  cfg.max_len = 32;
  auto p = init_encoder<double>(cfg, 11);
  rng::Stream ids_stream(12, "acceptance/instr");

  const auto random_ids = [&](std::size_t len) {
    std::vector<int> ids = {0};
    for (std::size_t i = 0; i + 1 < len; ++i)
      ids.push_back(2 + static_cast<int>(ids_stream.next_below(126)));
    return ids;
  };

  // Empty instruction reproduces the vanilla encoding bit for bit.
  for (std::size_t trial = 0; trial < 20; ++trial) {
    const auto ids = random_ids(3 + ids_stream.next_below(8));
    const std::vector<int> none;
    const auto cache = build_instruction_cache(
        p, std::span<const int>(none), TaskId::Search);
    const auto a = encode_instruction(p, std::span<const int>(ids), cache);
    const auto b = encode_vanilla(p, std::span<const int>(ids));
    for (std::size_t i = 0; i < a.numel(); ++i)
      if (a.data()[i] != b.data()[i])
        return {false, "empty instruction differs from vanilla encoding"};
  }

  // Explicit concatenation oracle: rebuild both streams by hand, feeding
  // each layer the cached prefix states copied into fresh tensors.
  double worst = 0.0;
  for (std::size_t trial = 0; trial < 10; ++trial) {
    const auto instr = random_ids(3 + ids_stream.next_below(6));
    const auto text = random_ids(3 + ids_stream.next_below(8));
    const auto cache = build_instruction_cache(
        p, std::span<const int>(instr), TaskId::Search);
    const auto got = encode_instruction(p, std::span<const int>(text), cache);

    const std::size_t m = instr.size();
    Tensor<double> inst_h =
        add(embedding_rows(p.token_embedding, std::span<const int>(instr)),
            slice_rows(p.position_embedding, 0, m));
    Tensor<double> txt_h =
        add(embedding_rows(p.token_embedding, std::span<const int>(text)),
            slice_rows(p.position_embedding, m, m + text.size()));
    for (const auto& block : p.stack) {
      const Tensor<double> prefix = Tensor<double>::from_data(
          inst_h.shape(),
          std::vector<double>(inst_h.data().begin(), inst_h.data().end()));
      const Tensor<double> ctx = concat_rows<double>({prefix, txt_h});
      const Tensor<double> next_txt =
          block_forward(block, TaskId::Search, txt_h, ctx, {}, cfg.ln_eps);
      inst_h =
          block_forward(block, TaskId::Search, inst_h, inst_h, {}, cfg.ln_eps);
      txt_h = next_txt;
    }
    const auto ref = layer_norm(take_row(txt_h, 0), p.final_ln_gain,
                                p.final_ln_bias, cfg.ln_eps);
    for (std::size_t i = 0; i < got.numel(); ++i)
      worst = std::max(worst, std::abs(got.data()[i] - ref.data()[i]));
  }
  if (worst > kConcatOracleTol)
    return {false, fmt("concatenation oracle off by %.3e > %.0e", worst,
                       kConcatOracleTol)};
  return {true, fmt("bit-exact empty-instruction identity; oracle gap %.2e",
                    worst)};
}

// ---------------------------------------------------------------------------
// Criterion 4: ranking metrics against brute-force oracles.
// ---------------------------------------------------------------------------

Outcome criterion_metric_oracles() {
  const auto t0 = std::chrono::steady_clock::now();
  rng::Stream s(77, "acceptance/metrics");
  const auto pad = [](std::size_t i) {
    char b[16];
    std::snprintf(b, sizeof b, "c%04zu", i);
    return std::string(b);
  };

  std::size_t instances = 0;
  double worst_ndcg = 0.0;
  for (std::size_t trial = 0; trial < 1200; ++trial) {
    const std::size_t n = 5 + s.next_below(25);
    RankedList ranked;
    ranked.query_id = "q";
    std::vector<RankedEntry> entries;
    std::map<std::string, int> gains;
    std::set<std::string> relevant;
    for (std::size_t i = 0; i < n; ++i) {
      entries.push_back({pad(i), static_cast<double>(s.next_below(9))});
      const int g = static_cast<int>(s.next_below(6));
      if (g > 0) {
        gains[pad(i)] = g;
        relevant.insert(pad(i));
      }
    }
    if (relevant.empty()) continue;
    ++instances;
    std::sort(entries.begin(), entries.end(),
              [](const RankedEntry& a, const RankedEntry& b) {
                if (a.score != b.score) return a.score > b.score;
                return a.id < b.id;
              });
    ranked.entries = entries;
    const std::size_t k = 1 + s.next_below(n);

    std::size_t hits = 0;
    for (std::size_t i = 0; i < std::min(k, n); ++i)
      if (relevant.count(ranked.entries[i].id)) ++hits;
    const double recall_oracle =
        static_cast<double>(hits) / static_cast<double>(relevant.size());
    if (recall_at_k(ranked, relevant, k) != recall_oracle)
      return {false, "recall mismatch vs oracle"};

    double ap = 0;
    std::size_t seen = 0;
    for (std::size_t i = 0; i < n; ++i)
      if (relevant.count(ranked.entries[i].id)) {
        ++seen;
        ap += static_cast<double>(seen) / static_cast<double>(i + 1);
      }
    ap /= static_cast<double>(relevant.size());
    if (mean_average_precision(ranked, relevant) != ap)
      return {false, "average precision mismatch vs oracle"};

    const auto dcg = [&](const std::vector<int>& rels) {
      double acc = 0;
      for (std::size_t i = 0; i < std::min(k, rels.size()); ++i)
        acc += (std::pow(2.0, rels[i]) - 1.0) /
               (std::log(static_cast<double>(i) + 2.0) / std::log(2.0));
      return acc;
    };
    std::vector<int> in_order, ideal;
    for (const auto& e : ranked.entries) {
      const auto it = gains.find(e.id);
      in_order.push_back(it == gains.end() ? 0 : it->second);
    }
    ideal = in_order;
    std::sort(ideal.begin(), ideal.end(), std::greater<int>());
    const double oracle = dcg(in_order) / dcg(ideal);
    const double gap = std::abs(ndcg_at_k(ranked, gains, k) - oracle);
    worst_ndcg = std::max(worst_ndcg, gap);
    if (gap > kOracleNdcgTol)
      return {false, fmt("nDCG off by %.3e > %.0e", gap, kOracleNdcgTol)};
  }
  if (instances < 1000)
    return {false, fmt("only %zu usable random instances", instances)};

  // Exhaustive retrieval vs full sort.
  const std::size_t n = 200, d = 16;
  EmbeddedCorpus corpus;
  std::vector<double> data(n * d);
  for (auto& v : data) v = s.next_normal();
  corpus.matrix = Tensor<double>::from_data({n, d}, std::move(data));
  for (std::size_t i = 0; i < n; ++i) corpus.ids.push_back(pad(i));
  for (std::size_t trial = 0; trial < 25; ++trial) {
    std::vector<double> q(d);
    for (auto& v : q) v = s.next_normal();
    std::vector<std::pair<double, std::string>> all;
    for (std::size_t i = 0; i < n; ++i) {
      double sum = 0;
      for (std::size_t j = 0; j < d; ++j)
        sum += corpus.matrix.data()[i * d + j] * q[j];
      all.emplace_back(sum, corpus.ids[i]);
    }
    std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return a.second < b.second;
    });
    for (std::size_t k : {std::size_t{1}, std::size_t{7}, std::size_t{50},
                          std::size_t{200}}) {
      const auto got = retrieve_topk(std::span<const double>(q), corpus, k);
      for (std::size_t i = 0; i < k; ++i)
        if (got.entries[i].id != all[i].second ||
            got.entries[i].score != all[i].first)
          return {false, "retrieve_topk disagrees with full sort"};
    }
  }

  const double elapsed = seconds_since(t0);
  if (elapsed >= kOracleBudgetSec)
    return {false, fmt("runtime %.1fs exceeds %.0fs budget", elapsed,
                       kOracleBudgetSec)};
  return {true, fmt("%zu metric instances, nDCG gap %.1e; top-k exact",
                    instances, worst_ndcg)};
}

// ---------------------------------------------------------------------------
// Shared ablation plumbing: generate a corpus, train, evaluate recall@20.
// ---------------------------------------------------------------------------

fs::path make_corpus(const std::string& tag, std::uint64_t seed,
                     const SynthSpec& spec) {
  const fs::path dir = work_dir() / tag;
  if (!fs::exists(dir / "spec.json"))
    generate_synthetic_corpus(seed, spec, dir);
  return dir;
}

SynthSpec ablation_spec() {
  SynthSpec spec;
  spec.n_papers = 600;
  spec.n_labels = 120;
  spec.labels_per_family = 20;
  spec.n_communities = 6;
  spec.n_queries = 150;
  return spec;
}

TrainConfig ablation_config(const fs::path& corpus,
                            const std::set<TaskId>& tasks,
                            EncoderVariant variant, std::uint64_t seed) {
  TrainConfig c;
  c.variant = variant;
  c.n_layers = 2;
  c.model_dim = 16;
  c.head_count = 2;
  c.ffn_dim = 32;
  c.vocab_size = 4096;
  c.max_len = 64;
  c.batch_size = 32;
  c.epochs = 8;
  c.peak_lr = 2e-3;
  c.seed = seed;
  const fs::path train = corpus / "train";
  if (tasks.count(TaskId::Classification)) {
    TaskDataPaths p;
    p.papers = (train / "papers.jsonl").string();
    p.labels = (train / "labels.jsonl").string();
    c.task_data[TaskId::Classification] = p;
  }
  if (tasks.count(TaskId::LinkPrediction)) {
    TaskDataPaths p;
    p.papers = (train / "papers.jsonl").string();
    p.triplets = (train / "triplets.jsonl").string();
    c.task_data[TaskId::LinkPrediction] = p;
  }
  if (tasks.count(TaskId::Search)) {
    TaskDataPaths p;
    p.papers = (train / "papers.jsonl").string();
    p.queries = (train / "queries.jsonl").string();
    c.task_data[TaskId::Search] = p;
  }
  return c;
}

double heldout_recall20(const Checkpoint& ckpt, const fs::path& corpus,
                        TaskId task) {
  EvalRequest req;
  req.ks = {20};
  switch (task) {
    case TaskId::Classification:
      req.protocol = "classification";
      req.data_dir = corpus / "eval" / "classification";
      break;
    case TaskId::LinkPrediction:
      req.protocol = "retrieval";
      req.data_dir = corpus / "eval" / "link_prediction";
      break;
    case TaskId::Search:
      req.protocol = "search";
      req.data_dir = corpus / "eval" / "search";
      break;
  }
  return run_eval(ckpt, req).metrics.at("recall@20");
}

// ---------------------------------------------------------------------------
// Criterion 5: training sanity on the default single-task corpus.
// ---------------------------------------------------------------------------

Outcome criterion_training_sanity() {
  const auto t0 = std::chrono::steady_clock::now();
  SynthSpec spec;  // library defaults: 1000 papers, 200 labels
  const fs::path corpus = make_corpus("sanity", 7, spec);

  TrainConfig c = ablation_config(corpus, {TaskId::Classification},
                                  EncoderVariant::Vanilla, 7);
  c.model_dim = 32;
  c.ffn_dim = 64;
  c.epochs = 14;  // must stay within the criterion's 20-epoch allowance
  const Checkpoint ckpt = train(c);

  const double first = epoch_mean_loss(ckpt.progress, 0);
  const double last = epoch_mean_loss(ckpt.progress, c.epochs - 1);
  const double recall = heldout_recall20(ckpt, corpus, TaskId::Classification);
  const double elapsed = seconds_since(t0);

  if (elapsed >= kSanityBudgetSec)
    return {false, fmt("runtime %.0fs exceeds %.0fs budget", elapsed,
                       kSanityBudgetSec)};
  if (!(last < kLossHalving * first))
    return {false, fmt("loss %.3f -> %.3f did not halve", first, last)};
  if (!(recall >= kSanityRecallFloor))
    return {false, fmt("held-out recall@20 %.3f < %.2f", recall,
                       kSanityRecallFloor)};
  return {true,
          fmt("loss %.3f -> %.3f, held-out recall@20 %.3f, %.0fs", first,
              last, recall, elapsed)};
}

// ---------------------------------------------------------------------------
// Criterion 6: task-interference ablation on a conflicting two-task corpus.
// ---------------------------------------------------------------------------

Outcome criterion_interference() {
  int expert_wins = 0;
  double worst_gap = 0.0;
  std::string per_seed;
  for (const int seed : kAblationSeeds) {
    SynthSpec spec = ablation_spec();
    spec.conflict = 1.0;  // labels and link structure disagree
    const fs::path corpus =
        make_corpus("conflict" + std::to_string(seed), seed, spec);
    const std::set<TaskId> tasks = {TaskId::Classification,
                                    TaskId::LinkPrediction};

    const TrainConfig vanilla_cfg =
        ablation_config(corpus, tasks, EncoderVariant::Vanilla, seed);
    TrainConfig expert_cfg =
        ablation_config(corpus, tasks, EncoderVariant::Expert, seed);
    const Checkpoint vanilla = train(vanilla_cfg);
    const Checkpoint expert = train(expert_cfg);

    const double v =
        0.5 * (heldout_recall20(vanilla, corpus, TaskId::Classification) +
               heldout_recall20(vanilla, corpus, TaskId::LinkPrediction));
    const double e =
        0.5 * (heldout_recall20(expert, corpus, TaskId::Classification) +
               heldout_recall20(expert, corpus, TaskId::LinkPrediction));
    if (e >= v) ++expert_wins;
    else worst_gap = std::max(worst_gap, v - e);
    per_seed += fmt("s%d:%.3f/%.3f ", seed, e, v);
  }
  if (expert_wins < 2)
    return {false, fmt("experts won only %d/3 seeds (%s)", expert_wins,
                       per_seed.c_str())};
  if (expert_wins < 3 && worst_gap > kInterferenceSlack)
    return {false, fmt("losing seed trails by %.3f > %.2f (%s)", worst_gap,
                       kInterferenceSlack, per_seed.c_str())};
  return {true, fmt("expert/vanilla mean recall@20: %swins %d/3",
                    per_seed.c_str(), expert_wins)};
}

// ---------------------------------------------------------------------------
// Criterion 7: mined hard negatives vs random negatives.
// ---------------------------------------------------------------------------

Outcome criterion_hard_negatives() {
  int mined_wins = 0;
  std::string per_seed;
  for (const int seed : kAblationSeeds) {
    // Labels carry only two distinctive words while the family vocabulary
    // dominates the text, and each family (40 labels) is wider than k=20,
    // so sibling-level discrimination is what recall@20 measures.
    SynthSpec spec = ablation_spec();
    spec.n_papers = 1200;
    spec.n_labels = 240;
    spec.labels_per_family = 40;
    spec.sibling_label_prob = 0.0;
    const fs::path corpus =
        make_corpus("hardneg" + std::to_string(seed), seed, spec);
    TrainConfig mined_cfg =
        ablation_config(corpus, {TaskId::Classification},
                        EncoderVariant::Vanilla, seed);
    mined_cfg.epochs = 2;
    mined_cfg.batch_size = 8;
    mined_cfg.pool_cross_hard_negatives = false;
    TrainConfig random_cfg = mined_cfg;
    random_cfg.use_mined_hard_negatives = false;

    const double mined = heldout_recall20(train(mined_cfg), corpus,
                                          TaskId::Classification);
    const double random = heldout_recall20(train(random_cfg), corpus,
                                           TaskId::Classification);
    if (mined >= random) ++mined_wins;
    per_seed += fmt("s%d:%.3f/%.3f ", seed, mined, random);
  }
  if (mined_wins < 2)
    return {false, fmt("mined negatives won only %d/3 seeds (%s)",
                       mined_wins, per_seed.c_str())};
  return {true, fmt("mined/random recall@20: %swins %d/3", per_seed.c_str(),
                    mined_wins)};
}

// ---------------------------------------------------------------------------
// Criterion 8: two-stage warm-up vs direct specialized training.
// ---------------------------------------------------------------------------

Outcome criterion_warmup() {
  SynthSpec spec = ablation_spec();
  spec.conflict = 0.5;
  const fs::path corpus = make_corpus("warmup", 3, spec);
  const std::set<TaskId> tasks = {TaskId::Classification,
                                  TaskId::LinkPrediction, TaskId::Search};

  TrainConfig direct_cfg =
      ablation_config(corpus, tasks, EncoderVariant::Instruction, 3);
  TrainConfig staged_cfg = direct_cfg;
  staged_cfg.stage1_epochs = 4;

  const Checkpoint direct = train(direct_cfg);
  const Checkpoint staged = two_stage_pretrain(staged_cfg);

  int staged_wins = 0;
  std::string detail;
  for (TaskId task :
       {TaskId::Classification, TaskId::LinkPrediction, TaskId::Search}) {
    const double d = heldout_recall20(direct, corpus, task);
    const double s = heldout_recall20(staged, corpus, task);
    if (s >= d) ++staged_wins;
    detail += fmt("%s:%.3f/%.3f ", task_name(task), s, d);
  }
  if (staged_wins < 2)
    return {false, fmt("warm-up won only %d/3 tasks (%s)", staged_wins,
                       detail.c_str())};
  return {true, fmt("staged/direct recall@20: %swins %d/3", detail.c_str(),
                    staged_wins)};
}

// ---------------------------------------------------------------------------
// Criterion 9: determinism and bit-exact persistence.
// ---------------------------------------------------------------------------

Outcome criterion_determinism() {
  SynthSpec spec;
  spec.n_papers = 120;
  spec.n_labels = 24;
  spec.labels_per_family = 6;
  spec.n_communities = 3;
  spec.n_queries = 30;
  const fs::path corpus = make_corpus("determinism", 5, spec);
  TrainConfig c = ablation_config(corpus, {TaskId::Classification,
                                           TaskId::Search},
                                  EncoderVariant::Vanilla, 5);
  c.epochs = 2;

  const auto bytes_of = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::vector<char>((std::istreambuf_iterator<char>(in)),
                             std::istreambuf_iterator<char>());
  };

  // (a) identical config and seed give bit-identical checkpoints.
  const Checkpoint a = train(c);
  const Checkpoint b = train(c);
  if (a.fingerprint() != b.fingerprint())
    return {false, "repeat run changed the parameter fingerprint"};
  const fs::path fa = work_dir() / "det_a.bin";
  const fs::path fb = work_dir() / "det_b.bin";
  a.save(fa);
  b.save(fb);
  if (bytes_of(fa) != bytes_of(fb))
    return {false, "repeat run changed the checkpoint bytes"};

  // (b) save/load/continue equals the uninterrupted run.
  Checkpoint half = train_steps(c, a.progress.total_steps / 2);
  const fs::path fh = work_dir() / "det_half.bin";
  half.save(fh);
  const Checkpoint resumed = resume_training(Checkpoint::load(fh));
  if (resumed.fingerprint() != a.fingerprint())
    return {false, "resumed run diverged from the uninterrupted run"};
  if (resumed.progress.loss_history != a.progress.loss_history)
    return {false, "resumed run logged a different loss history"};

  // (c) embeddings are identical before save and after load.
  const std::vector<std::string> ids = {"t1", "t2"};
  const std::vector<std::string> texts = {"[CLS] alpha beta [SEP]",
                                          "[CLS] gamma delta [SEP]"};
  const auto before = embed_texts(a, ids, texts, TaskId::Classification);
  const auto after = embed_texts(Checkpoint::load(fa), ids, texts,
                                 TaskId::Classification);
  for (std::size_t i = 0; i < before.matrix.numel(); ++i)
    if (before.matrix.data()[i] != after.matrix.data()[i])
      return {false, "embeddings changed across save/load"};

  return {true, "repeat runs, resumed runs, and reloaded embeddings all bit-identical"};
}

// ---------------------------------------------------------------------------
// Criterion 10: label-name reranker properties.
// ---------------------------------------------------------------------------

Outcome criterion_reranker() {
  rng::Stream s(99, "acceptance/rerank");
  const std::vector<std::string> pool = {
      "parsing", "networks", "search",  "graph",   "protein", "neural",
      "matrix",  "quantum",  "optimal", "storage", "art",     "particle"};

  for (std::size_t trial = 0; trial < 1000; ++trial) {
    const std::size_t n_labels = 4 + s.next_below(12);
    std::map<std::string, std::string> names;
    RankedList ranked;
    ranked.query_id = "q";
    for (std::size_t i = 0; i < n_labels; ++i) {
      const std::string id = "L" + std::to_string(i);
      std::string name = pool[s.next_below(pool.size())];
      if (s.next_below(3) == 0) name += " " + pool[s.next_below(pool.size())];
      names[id] = name;
      ranked.entries.push_back(
          {id, static_cast<double>(1000 - i)});
    }
    std::string text = "[CLS]";
    const std::size_t n_words = 3 + s.next_below(8);
    for (std::size_t i = 0; i < n_words; ++i)
      text += " " + pool[s.next_below(pool.size())];

    const auto once = label_name_rerank(text, ranked, names);
    std::multiset<std::string> in_ids, out_ids;
    for (const auto& e : ranked.entries) in_ids.insert(e.id);
    for (const auto& e : once.entries) out_ids.insert(e.id);
    if (in_ids != out_ids) return {false, "rerank dropped or invented labels"};
    const auto twice = label_name_rerank(text, once, names);
    for (std::size_t i = 0; i < once.entries.size(); ++i)
      if (twice.entries[i].id != once.entries[i].id)
        return {false, "rerank is not idempotent"};
  }

  // The matching rule on hand-built cases: a mentioned label overtakes all
  // unmentioned ones; matches keep their model order; boundaries respected.
  const std::map<std::string, std::string> names = {{"L1", "Parsing"},
                                                    {"L2", "Neural Networks"},
                                                    {"L3", "Art"}};
  RankedList ranked;
  ranked.query_id = "q";
  ranked.entries = {{"L3", 3.0}, {"L2", 2.0}, {"L1", 1.0}};
  const auto out = label_name_rerank(
      "dependency parsing with neural networks", ranked, names);
  if (out.entries[0].id != "L2" || out.entries[1].id != "L1" ||
      out.entries[2].id != "L3")
    return {false, "toy rerank order wrong"};
  const auto none = label_name_rerank("particle physics", ranked, names);
  for (std::size_t i = 0; i < 3; ++i)
    if (none.entries[i].id != ranked.entries[i].id)
      return {false, "boundary rule violated: 'art' matched 'particle'"};
  return {true, "1000 random rankings: permutation + idempotence; toy rule holds"};
}

}  // namespace

int main(int argc, char** argv) {
  struct Entry {
    int id;
    const char* name;
    Outcome (*run)();
  };
  const std::vector<Entry> entries = {
      {1, "gradient correctness (all variants, FD oracle)", criterion_gradients},
      {2, "mixture-of-experts identities", criterion_moe},
      {3, "instruction-conditioning identities", criterion_instruction},
      {4, "ranking metrics vs brute-force oracles", criterion_metric_oracles},
      {5, "training sanity on the default corpus", criterion_training_sanity},
      {6, "task-interference ablation", criterion_interference},
      {7, "mined vs random hard negatives", criterion_hard_negatives},
      {8, "two-stage warm-up ablation", criterion_warmup},
      {9, "determinism and persistence", criterion_determinism},
      {10, "label-name reranker properties", criterion_reranker},
  };

  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

  bool all_pass = true;
  for (const auto& entry : entries) {
    if (!selected.empty() && !selected.count(entry.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome outcome;
    try {
      outcome = entry.run();
    } catch (const std::exception& e) {
      outcome = {false, std::string("exception: ") + e.what()};
    }
    std::printf("[criterion %d] %s (%.1fs) %s — %s\n", entry.id,
                outcome.pass ? "PASS" : "FAIL", seconds_since(t0),
                entry.name, outcome.note.c_str());
    std::fflush(stdout);
    all_pass = all_pass && outcome.pass;
  }
  std::printf(all_pass ? "ACCEPTANCE: ALL PASS\n" : "ACCEPTANCE: FAILURES\n");
  return all_pass ? 0 : 1;
}
