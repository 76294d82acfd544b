#include "scimult/training.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <type_traits>

#include "json.hpp"

namespace scimult {

namespace {

using ordered_json = nlohmann::ordered_json;

Precision precision_from_name(const std::string& s) {
  if (s == "f32") return Precision::F32;
  if (s == "f64") return Precision::F64;
  throw config_error("unknown precision: " + s + " (expected f32 or f64)");
}

const std::set<std::string>& known_config_keys() {
  static const std::set<std::string> keys = {
      "variant", "n_layers", "model_dim", "head_count", "ffn_dim",
      "vocab_size", "max_len", "batch_size", "epochs", "peak_lr",
      "warmup_fraction", "weight_decay", "seed", "warmstart_checkpoint",
      "task_data", "raw_softmax_loss", "pool_cross_hard_negatives",
      "first_block", "proportional_sampling", "use_mined_hard_negatives",
      "per_label_cap", "stage1_epochs", "precision", "ln_eps", "init_std",
      "instructions"};
  return keys;
}

}  // namespace

TrainConfig TrainConfig::from_json_text(const std::string& text) {
  nlohmann::json obj;
  try {
    obj = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw config_error(std::string("config is not valid JSON: ") + e.what());
  }
  if (!obj.is_object()) throw config_error("config must be a JSON object");
  for (const auto& [key, value] : obj.items())
    if (!known_config_keys().count(key))
      throw config_error("unknown config field '" + key + "'");

  TrainConfig c;
  const auto u = [&](const char* key, std::size_t& field) {
    if (const auto it = obj.find(key); it != obj.end()) {
      if (!it->is_number_unsigned())
        throw config_error(std::string("config field '") + key +
                           "' must be a non-negative integer");
      field = it->get<std::size_t>();
    }
  };
  const auto f = [&](const char* key, double& field) {
    if (const auto it = obj.find(key); it != obj.end()) {
      if (!it->is_number())
        throw config_error(std::string("config field '") + key +
                           "' must be a number");
      field = it->get<double>();
    }
  };
  const auto b = [&](const char* key, bool& field) {
    if (const auto it = obj.find(key); it != obj.end()) {
      if (!it->is_boolean())
        throw config_error(std::string("config field '") + key +
                           "' must be a boolean");
      field = it->get<bool>();
    }
  };
  const auto s = [&](const char* key, std::string& field) {
    if (const auto it = obj.find(key); it != obj.end()) {
      if (!it->is_string())
        throw config_error(std::string("config field '") + key +
                           "' must be a string");
      field = it->get<std::string>();
    }
  };

  std::string variant = "vanilla", precision = "f32";
  s("variant", variant);
  c.variant = variant_from_name(variant);
  u("n_layers", c.n_layers);
  u("model_dim", c.model_dim);
  u("head_count", c.head_count);
  u("ffn_dim", c.ffn_dim);
  u("vocab_size", c.vocab_size);
  u("max_len", c.max_len);
  u("batch_size", c.batch_size);
  u("epochs", c.epochs);
  f("peak_lr", c.peak_lr);
  f("warmup_fraction", c.warmup_fraction);
  f("weight_decay", c.weight_decay);
  if (const auto it = obj.find("seed"); it != obj.end()) {
    if (!it->is_number_unsigned())
      throw config_error("config field 'seed' must be a non-negative integer");
    c.seed = it->get<std::uint64_t>();
  }
  s("warmstart_checkpoint", c.warmstart_checkpoint);
  b("raw_softmax_loss", c.raw_softmax_loss);
  b("pool_cross_hard_negatives", c.pool_cross_hard_negatives);
  s("first_block", c.first_block);
  b("proportional_sampling", c.proportional_sampling);
  b("use_mined_hard_negatives", c.use_mined_hard_negatives);
  u("per_label_cap", c.per_label_cap);
  u("stage1_epochs", c.stage1_epochs);
  s("precision", precision);
  c.precision = precision_from_name(precision);
  f("ln_eps", c.ln_eps);
  f("init_std", c.init_std);

  if (const auto it = obj.find("task_data"); it != obj.end()) {
    if (!it->is_object())
      throw config_error("config field 'task_data' must map task -> paths");
    for (const auto& [task_key, paths] : it->items()) {
      const TaskId task = task_from_name(task_key);
      if (!paths.is_object())
        throw config_error("task_data entry for '" + task_key +
                           "' must be an object");
      TaskDataPaths p;
      for (const auto& [k, v] : paths.items()) {
        if (!v.is_string())
          throw config_error("task_data paths must be strings");
        if (k == "papers") p.papers = v.get<std::string>();
        else if (k == "labels") p.labels = v.get<std::string>();
        else if (k == "queries") p.queries = v.get<std::string>();
        else if (k == "triplets") p.triplets = v.get<std::string>();
        else throw config_error("unknown task_data path key '" + k + "'");
      }
      c.task_data[task] = std::move(p);
    }
  }
  if (const auto it = obj.find("instructions"); it != obj.end()) {
    if (!it->is_object())
      throw config_error("config field 'instructions' must map task -> text");
    for (const auto& [task_key, text] : it->items()) {
      if (!text.is_string())
        throw config_error("instructions entries must be strings");
      c.instructions[task_from_name(task_key)] = text.get<std::string>();
    }
  }

  if (c.batch_size == 0) throw config_error("batch_size must be positive");
  if (c.epochs == 0) throw config_error("epochs must be positive");
  if (c.model_dim == 0 || c.head_count == 0 ||
      c.model_dim % c.head_count != 0)
    throw config_error("model_dim must be divisible by head_count");
  if (c.warmup_fraction < 0.0 || c.warmup_fraction > 1.0)
    throw config_error("warmup_fraction must lie in [0, 1]");
  if (c.peak_lr <= 0.0) throw config_error("peak_lr must be positive");
  if (c.weight_decay < 0.0) throw config_error("weight_decay must be >= 0");
  return c;
}

TrainConfig TrainConfig::from_json_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw config_error("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json_text(ss.str());
}

std::string TrainConfig::to_json() const {
  ordered_json o;
  o["variant"] = variant_name(variant);
  o["n_layers"] = n_layers;
  o["model_dim"] = model_dim;
  o["head_count"] = head_count;
  o["ffn_dim"] = ffn_dim;
  o["vocab_size"] = vocab_size;
  o["max_len"] = max_len;
  o["batch_size"] = batch_size;
  o["epochs"] = epochs;
  o["peak_lr"] = peak_lr;
  o["warmup_fraction"] = warmup_fraction;
  o["weight_decay"] = weight_decay;
  o["seed"] = seed;
  if (!warmstart_checkpoint.empty())
    o["warmstart_checkpoint"] = warmstart_checkpoint;
  ordered_json td;
  for (const auto& [task, paths] : task_data) {
    ordered_json p;
    if (!paths.papers.empty()) p["papers"] = paths.papers;
    if (!paths.labels.empty()) p["labels"] = paths.labels;
    if (!paths.queries.empty()) p["queries"] = paths.queries;
    if (!paths.triplets.empty()) p["triplets"] = paths.triplets;
    td[task_name(task)] = std::move(p);
  }
  o["task_data"] = std::move(td);
  o["raw_softmax_loss"] = raw_softmax_loss;
  o["pool_cross_hard_negatives"] = pool_cross_hard_negatives;
  o["first_block"] = first_block;
  o["proportional_sampling"] = proportional_sampling;
  o["use_mined_hard_negatives"] = use_mined_hard_negatives;
  o["per_label_cap"] = per_label_cap;
  o["stage1_epochs"] = stage1_epochs;
  o["precision"] = precision_name(precision);
  o["ln_eps"] = ln_eps;
  o["init_std"] = init_std;
  if (!instructions.empty()) {
    ordered_json instr;
    for (const auto& [task, text] : instructions)
      instr[task_name(task)] = text;
    o["instructions"] = std::move(instr);
  }
  return o.dump();
}

EncoderConfig TrainConfig::encoder_config() const {
  EncoderConfig ec;
  ec.variant = variant;
  ec.n_layers = n_layers;
  ec.model_dim = model_dim;
  ec.head_count = head_count;
  ec.ffn_dim = ffn_dim;
  ec.vocab_size = vocab_size;
  ec.max_len = max_len;
  ec.first_block = first_block;
  ec.ln_eps = ln_eps;
  ec.init_std = init_std;
  return ec;
}

InstructionSet TrainConfig::instruction_set() const {
  InstructionSet set = InstructionSet::defaults();
  for (const auto& [task, text] : instructions) set.text[task] = text;
  return set;
}

// ---- parameter surgery ----

template <class S>
EncoderParams<S> clone_params(const EncoderParams<S>& src) {
  EncoderParams<S> dst = init_encoder<S>(src.config, /*seed=*/0);
  auto& mutable_src = const_cast<EncoderParams<S>&>(src);
  std::vector<const Tensor<S>*> src_tensors;
  mutable_src.visit_params([&](const std::string&, Tensor<S>& t) {
    src_tensors.push_back(&t);
  });
  std::size_t i = 0;
  dst.visit_params([&](const std::string&, Tensor<S>& t) {
    const auto from = src_tensors.at(i++)->data();
    std::copy(from.begin(), from.end(), t.data().begin());
  });
  dst.truncation_count = src.truncation_count;
  return dst;
}

template EncoderParams<float> clone_params(const EncoderParams<float>&);
template EncoderParams<double> clone_params(const EncoderParams<double>&);

template <class S>
EncoderParams<S> warmstart_variant(const EncoderParams<S>& vanilla,
                                   const EncoderConfig& target) {
  if (vanilla.variant != EncoderVariant::Vanilla)
    throw config_error("warm start expects a vanilla source checkpoint");
  const EncoderConfig& sc = vanilla.config;
  if (sc.n_layers != target.n_layers || sc.model_dim != target.model_dim ||
      sc.head_count != target.head_count || sc.ffn_dim != target.ffn_dim ||
      sc.vocab_size != target.vocab_size || sc.max_len != target.max_len)
    throw config_error("warm start: stage dimensions are incompatible");

  EncoderParams<S> dst = init_encoder<S>(target, /*seed=*/0);
  // Collect source tensors by name, then fill each target tensor from the
  // matching source; expert copies drop the task segment from their name.
  std::map<std::string, const Tensor<S>*> source;
  auto& mutable_src = const_cast<EncoderParams<S>&>(vanilla);
  mutable_src.visit_params([&](const std::string& name, Tensor<S>& t) {
    source.emplace(name, &t);
  });
  dst.visit_params([&](const std::string& name, Tensor<S>& t) {
    std::string lookup = name;
    for (TaskId task : kAllTasks) {
      const std::string seg = std::string(".att.") + task_name(task) + ".";
      const auto pos = lookup.find(seg);
      if (pos != std::string::npos) {
        lookup = lookup.substr(0, pos) + ".att." +
                 lookup.substr(pos + seg.size());
        break;
      }
    }
    const auto it = source.find(lookup);
    if (it == source.end())
      throw config_error("warm start: no source parameter for " + name);
    if (it->second->shape() != t.shape())
      throw config_error("warm start: shape mismatch for " + name);
    const auto from = it->second->data();
    std::copy(from.begin(), from.end(), t.data().begin());
  });
  return dst;
}

template EncoderParams<float> warmstart_variant(const EncoderParams<float>&,
                                                const EncoderConfig&);
template EncoderParams<double> warmstart_variant(const EncoderParams<double>&,
                                                 const EncoderConfig&);

// ---- checkpoint container ----

namespace {

constexpr char kCheckpointMagic[8] = {'S', 'M', 'C', 'K', 'P', 'T', '0', '1'};

template <class S>
void collect_tensors(EncoderParams<S>& params,
                     std::vector<std::string>& names,
                     std::vector<Tensor<S>>& tensors) {
  params.visit_params([&](const std::string& name, Tensor<S>& t) {
    names.push_back(name);
    tensors.push_back(t);
  });
}

template <class S>
void append_bytes(std::string& out, const std::vector<S>& v) {
  const char* p = reinterpret_cast<const char*>(v.data());
  out.append(p, v.size() * sizeof(S));
}

template <class S>
void append_span(std::string& out, std::span<const S> v) {
  const char* p = reinterpret_cast<const char*>(v.data());
  out.append(p, v.size() * sizeof(S));
}

template <class S>
std::string checkpoint_payload(const Checkpoint& ckpt) {
  const auto& bundle = std::get<ModelBundle<S>>(ckpt.model);
  auto& params = const_cast<EncoderParams<S>&>(bundle.params);
  std::vector<std::string> names;
  std::vector<Tensor<S>> tensors;
  collect_tensors(params, names, tensors);
  std::string payload;
  for (const auto& t : tensors) append_span<S>(payload, t.data());
  for (const auto& m : bundle.opt.m) append_bytes(payload, m);
  for (const auto& v : bundle.opt.v) append_bytes(payload, v);
  append_bytes(payload, ckpt.progress.loss_history);
  return payload;
}

template <class S>
ordered_json tensor_manifest(const Checkpoint& ckpt) {
  const auto& bundle = std::get<ModelBundle<S>>(ckpt.model);
  auto& params = const_cast<EncoderParams<S>&>(bundle.params);
  ordered_json arr = ordered_json::array();
  params.visit_params([&](const std::string& name, Tensor<S>& t) {
    ordered_json o;
    o["name"] = name;
    o["shape"] = t.shape();
    arr.push_back(std::move(o));
  });
  return arr;
}

}  // namespace

std::string Checkpoint::fingerprint() const {
  std::uint64_t h = kFnvBasis;
  const auto fold = [&h](const auto& bundle) {
    auto& params =
        const_cast<std::remove_cvref_t<decltype(bundle.params)>&>(bundle.params);
    params.visit_params([&h](const std::string& name, auto& t) {
      h = fnv1a64(name, h);
      const auto d = t.data();
      h = fnv1a64(d.data(), d.size_bytes(), h);
    });
  };
  std::visit(fold, model);
  h = fnv1a64(config.to_json(), h);
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(h));
  return buf;
}

void Checkpoint::save(const std::filesystem::path& path) const {
  ordered_json header;
  header["format_version"] = 1;
  header["precision"] = precision_name(precision());
  header["config"] = nlohmann::ordered_json::parse(config.to_json());
  header["tensors"] = precision() == Precision::F32
                          ? tensor_manifest<float>(*this)
                          : tensor_manifest<double>(*this);
  const auto fold_opt = [&](const auto& bundle) {
    ordered_json o;
    o["step_count"] = bundle.opt.step_count;
    o["total_steps"] = bundle.opt.total_steps;
    o["beta1"] = bundle.opt.beta1;
    o["beta2"] = bundle.opt.beta2;
    o["eps"] = bundle.opt.eps;
    o["weight_decay"] = bundle.opt.weight_decay;
    o["peak_lr"] = bundle.opt.peak_lr;
    o["warmup_fraction"] = bundle.opt.warmup_fraction;
    header["optimizer"] = std::move(o);
  };
  std::visit(fold_opt, model);
  ordered_json prog;
  prog["global_step"] = progress.global_step;
  prog["steps_per_epoch"] = progress.steps_per_epoch;
  prog["total_steps"] = progress.total_steps;
  ordered_json tasks;
  for (const auto& [task, tp] : progress.tasks) {
    ordered_json t;
    t["epoch"] = tp.epoch;
    t["cursor"] = tp.cursor;
    tasks[task_name(task)] = std::move(t);
  }
  prog["tasks"] = std::move(tasks);
  prog["hard_negative_fallbacks"] = progress.hard_negative_fallbacks;
  prog["loss_count"] = progress.loss_history.size();
  header["progress"] = std::move(prog);

  const std::string header_text = header.dump();
  const std::string payload = precision() == Precision::F32
                                  ? checkpoint_payload<float>(*this)
                                  : checkpoint_payload<double>(*this);

  std::filesystem::path tmp = path;
  tmp += ".tmp";
  if (path.has_parent_path())
    std::filesystem::create_directories(path.parent_path());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw data_error("cannot write checkpoint " + path.string());
    out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    const std::uint64_t len = header_text.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(header_text.data(),
              static_cast<std::streamsize>(header_text.size()));
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!out) throw data_error("short write for checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

namespace {

template <class S>
void load_model_bundle(Checkpoint& ckpt, const nlohmann::json& header,
                       const std::string& payload) {
  ModelBundle<S> bundle;
  bundle.params = init_encoder<S>(ckpt.config.encoder_config(), 0);
  std::vector<std::string> names;
  std::vector<Tensor<S>> tensors;
  collect_tensors(bundle.params, names, tensors);

  const auto& manifest = header.at("tensors");
  if (manifest.size() != names.size())
    throw data_error("checkpoint: tensor manifest does not match this config");
  std::size_t off = 0;
  const auto take = [&](void* dst, std::size_t bytes) {
    if (off + bytes > payload.size())
      throw data_error("checkpoint: payload truncated");
    std::memcpy(dst, payload.data() + off, bytes);
    off += bytes;
  };
  for (std::size_t i = 0; i < names.size(); ++i) {
    const auto& entry = manifest.at(i);
    if (entry.at("name").get<std::string>() != names[i])
      throw data_error("checkpoint: tensor order mismatch at " + names[i]);
    const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
    if (shape != tensors[i].shape())
      throw data_error("checkpoint: tensor shape mismatch at " + names[i]);
    take(tensors[i].data().data(), tensors[i].numel() * sizeof(S));
  }

  const auto& opt_json = header.at("optimizer");
  bundle.opt.step_count = opt_json.at("step_count").get<std::int64_t>();
  bundle.opt.total_steps = opt_json.at("total_steps").get<std::int64_t>();
  bundle.opt.beta1 = opt_json.at("beta1").get<double>();
  bundle.opt.beta2 = opt_json.at("beta2").get<double>();
  bundle.opt.eps = opt_json.at("eps").get<double>();
  bundle.opt.weight_decay = opt_json.at("weight_decay").get<double>();
  bundle.opt.peak_lr = opt_json.at("peak_lr").get<double>();
  bundle.opt.warmup_fraction = opt_json.at("warmup_fraction").get<double>();
  for (const auto& t : tensors) {
    bundle.opt.m.emplace_back(t.numel());
    bundle.opt.v.emplace_back(t.numel());
  }
  for (auto& m : bundle.opt.m) take(m.data(), m.size() * sizeof(S));
  for (auto& v : bundle.opt.v) take(v.data(), v.size() * sizeof(S));

  const std::size_t loss_count =
      header.at("progress").at("loss_count").get<std::size_t>();
  ckpt.progress.loss_history.resize(loss_count);
  take(ckpt.progress.loss_history.data(), loss_count * sizeof(double));
  if (off != payload.size())
    throw data_error("checkpoint: trailing bytes in payload");
  ckpt.model = std::move(bundle);
}

}  // namespace

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot open checkpoint " + path.string());
  char magic[sizeof(kCheckpointMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw data_error("not a checkpoint file: " + path.string());
  std::uint64_t header_len = 0;
  in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
  if (!in) throw data_error("checkpoint header truncated");
  std::string header_text(header_len, '\0');
  in.read(header_text.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw data_error("checkpoint header truncated");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_text);
  } catch (const nlohmann::json::parse_error& e) {
    throw data_error(std::string("checkpoint header is not JSON: ") + e.what());
  }
  if (header.at("format_version").get<int>() != 1)
    throw data_error("unsupported checkpoint format version");

  Checkpoint ckpt;
  ckpt.config = TrainConfig::from_json_text(header.at("config").dump());

  const auto& prog = header.at("progress");
  ckpt.progress.global_step = prog.at("global_step").get<std::int64_t>();
  ckpt.progress.steps_per_epoch = prog.at("steps_per_epoch").get<std::int64_t>();
  ckpt.progress.total_steps = prog.at("total_steps").get<std::int64_t>();
  for (const auto& [key, value] : prog.at("tasks").items()) {
    TaskProgress tp;
    tp.epoch = value.at("epoch").get<std::uint64_t>();
    tp.cursor = value.at("cursor").get<std::uint64_t>();
    ckpt.progress.tasks[task_from_name(key)] = tp;
  }
  ckpt.progress.hard_negative_fallbacks =
      prog.at("hard_negative_fallbacks").get<std::uint64_t>();

  std::string payload((std::istreambuf_iterator<char>(in)),
                      std::istreambuf_iterator<char>());
  const Precision prec =
      precision_from_name(header.at("precision").get<std::string>());
  if (prec != ckpt.config.precision)
    throw data_error("checkpoint precision disagrees with its config");
  if (prec == Precision::F32)
    load_model_bundle<float>(ckpt, header, payload);
  else
    load_model_bundle<double>(ckpt, header, payload);
  return ckpt;
}

// ---- training ----

namespace {

struct ClassPair {
  std::uint32_t paper = 0;
  std::uint32_t label = 0;
};
struct LinkTriple {
  std::uint32_t query = 0, positive = 0, negative = 0;
};
struct SearchPair {
  std::uint32_t query = 0;
  std::uint32_t positive = 0;
};

template <class S>
class Trainer {
 public:
  Trainer(const TrainConfig& config, ModelBundle<S> bundle,
          TrainerProgress progress, bool fresh)
      : cfg_(config),
        bundle_(std::move(bundle)),
        progress_(std::move(progress)),
        tokenizer_(config.vocab_size),
        instructions_(config.instruction_set()) {
    load_corpora();
    const std::int64_t k = static_cast<std::int64_t>(tasks_.size());
    std::size_t max_pairs = 1;
    for (const TaskId t : tasks_) max_pairs = std::max(max_pairs, pair_count(t));
    const std::int64_t per_task_steps = static_cast<std::int64_t>(
        (max_pairs + cfg_.batch_size - 1) / cfg_.batch_size);
    const std::int64_t steps_per_epoch = k * per_task_steps;
    const std::int64_t total_steps =
        steps_per_epoch * static_cast<std::int64_t>(cfg_.epochs);
    if (fresh) {
      progress_.steps_per_epoch = steps_per_epoch;
      progress_.total_steps = total_steps;
      bundle_.opt.peak_lr = cfg_.peak_lr;
      bundle_.opt.warmup_fraction = cfg_.warmup_fraction;
      bundle_.opt.weight_decay = cfg_.weight_decay;
      bundle_.opt.total_steps = total_steps;
      bundle_.opt.init(param_list_);
      for (const TaskId t : tasks_) progress_.tasks[t];
    } else {
      if (progress_.steps_per_epoch != steps_per_epoch ||
          progress_.total_steps != total_steps)
        throw data_error(
            "resume: corpus size or schedule changed since the checkpoint");
    }
    build_schedule();
    build_masks();
  }

  bool finished() const {
    return progress_.global_step >= progress_.total_steps;
  }

  void run(std::int64_t max_steps) {
    std::int64_t remaining =
        max_steps < 0 ? progress_.total_steps - progress_.global_step
                      : std::min<std::int64_t>(
                            max_steps,
                            progress_.total_steps - progress_.global_step);
    while (remaining-- > 0) step();
  }

  Checkpoint checkpoint() const {
    Checkpoint ckpt;
    ckpt.config = cfg_;
    ModelBundle<S> copy;
    copy.params = clone_params(bundle_.params);
    copy.opt = bundle_.opt;
    ckpt.model = std::move(copy);
    ckpt.progress = progress_;
    return ckpt;
  }

 private:
  std::size_t pair_count(TaskId t) const {
    switch (t) {
      case TaskId::Classification: return class_pairs_.size();
      case TaskId::LinkPrediction: return link_triples_.size();
      case TaskId::Search: return search_pairs_.size();
    }
    return 0;
  }

  void load_corpora() {
    if (cfg_.task_data.empty())
      throw config_error("training requires at least one task_data entry");
    for (const auto& [task, paths] : cfg_.task_data) tasks_.push_back(task);
    std::sort(tasks_.begin(), tasks_.end());

    for (const TaskId task : tasks_) {
      const TaskDataPaths& paths = cfg_.task_data.at(task);
      if (paths.papers.empty())
        throw config_error(std::string("task ") + task_name(task) +
                           " needs a papers file");
      switch (task) {
        case TaskId::Classification: {
          class_papers_ = load_papers(paths.papers);
          if (paths.labels.empty())
            throw config_error("classification needs a labels file");
          class_labels_ = load_labels(paths.labels);
          if (class_labels_.size() < 2)
            throw data_error("classification needs at least two labels");
          prep_classification();
          break;
        }
        case TaskId::LinkPrediction: {
          link_papers_ = load_papers(paths.papers);
          if (paths.triplets.empty())
            throw config_error("link prediction needs a triplets file");
          link_triplets_ = load_triplets(paths.triplets);
          prep_link();
          break;
        }
        case TaskId::Search: {
          search_papers_ = load_papers(paths.papers);
          if (paths.queries.empty())
            throw config_error("search needs a queries file");
          search_queries_ = load_queries(paths.queries);
          prep_search();
          break;
        }
      }
      if (pair_count(task) == 0)
        throw data_error(std::string("no training pairs for task ") +
                         task_name(task));
    }
    param_list_ = bundle_.params.parameters();
  }

  void prep_classification() {
    class_paper_texts_.reserve(class_papers_.size());
    for (const auto& p : class_papers_) class_paper_texts_.push_back(render_paper(p));
    for (std::size_t i = 0; i < class_labels_.size(); ++i) {
      class_label_texts_.push_back(render_label(class_labels_[i]));
      class_label_index_[class_labels_[i].id] = static_cast<std::uint32_t>(i);
    }
    std::vector<std::vector<std::size_t>> per_label(class_labels_.size());
    for (std::size_t pi = 0; pi < class_papers_.size(); ++pi) {
      for (const auto& lid : class_papers_[pi].label_ids) {
        const auto it = class_label_index_.find(lid);
        if (it == class_label_index_.end())
          throw data_error("paper " + class_papers_[pi].id +
                           " references unknown label " + lid);
        per_label[it->second].push_back(class_pairs_.size());
        class_pairs_.push_back({static_cast<std::uint32_t>(pi), it->second});
      }
    }
    if (cfg_.per_label_cap > 0) {
      std::vector<std::uint8_t> keep(class_pairs_.size(), 1);
      for (std::size_t li = 0; li < per_label.size(); ++li) {
        if (per_label[li].size() <= cfg_.per_label_cap) continue;
        std::vector<std::size_t> order = per_label[li];
        rng::Stream cs(cfg_.seed, "cap/" + class_labels_[li].id);
        rng::shuffle(order, cs);
        for (std::size_t j = cfg_.per_label_cap; j < order.size(); ++j)
          keep[order[j]] = 0;
      }
      std::vector<ClassPair> kept;
      for (std::size_t i = 0; i < class_pairs_.size(); ++i)
        if (keep[i]) kept.push_back(class_pairs_[i]);
      class_pairs_ = std::move(kept);
    }
    // Mined hard-negative label lists per paper.
    const MetadataGraph graph = MetadataGraph::build(class_papers_);
    class_gold_.resize(class_papers_.size());
    class_mined_.resize(class_papers_.size());
    for (std::size_t pi = 0; pi < class_papers_.size(); ++pi) {
      for (const auto& lid : class_papers_[pi].label_ids)
        class_gold_[pi].push_back(class_label_index_.at(lid));
      if (!cfg_.use_mined_hard_negatives) continue;
      for (const auto& lid :
           mine_hard_negative_labels(graph, class_papers_[pi].id)) {
        const auto it = class_label_index_.find(lid);
        if (it != class_label_index_.end())
          class_mined_[pi].push_back(it->second);
      }
    }
  }

  void prep_link() {
    link_paper_texts_.reserve(link_papers_.size());
    for (std::size_t i = 0; i < link_papers_.size(); ++i) {
      link_paper_texts_.push_back(render_paper(link_papers_[i]));
      link_paper_index_[link_papers_[i].id] = static_cast<std::uint32_t>(i);
    }
    for (const auto& t : link_triplets_) {
      const auto qi = link_paper_index_.find(t.query_id);
      const auto pi = link_paper_index_.find(t.positive_id);
      const auto ni = link_paper_index_.find(t.negative_id);
      if (qi == link_paper_index_.end() || pi == link_paper_index_.end() ||
          ni == link_paper_index_.end())
        throw data_error("triplet references a paper missing from the corpus");
      link_triples_.push_back({qi->second, pi->second, ni->second});
    }
  }

  void prep_search() {
    search_paper_texts_.reserve(search_papers_.size());
    for (std::size_t i = 0; i < search_papers_.size(); ++i) {
      search_paper_texts_.push_back(render_paper(search_papers_[i]));
      search_paper_index_[search_papers_[i].id] = static_cast<std::uint32_t>(i);
    }
    search_negatives_.resize(search_queries_.size());
    search_positive_sets_.resize(search_queries_.size());
    for (std::size_t qi = 0; qi < search_queries_.size(); ++qi) {
      const auto& q = search_queries_[qi];
      if (q.positive_paper_ids.empty())
        throw data_error("training query " + q.id + " has no positives");
      for (const auto& pid : q.positive_paper_ids) {
        const auto it = search_paper_index_.find(pid);
        if (it == search_paper_index_.end())
          throw data_error("query " + q.id + " references unknown paper " + pid);
        search_pairs_.push_back({static_cast<std::uint32_t>(qi), it->second});
        search_positive_sets_[qi].insert(it->second);
      }
      for (const auto& [pid, rel] : q.scored_candidates) {
        if (rel != 0) continue;
        const auto it = search_paper_index_.find(pid);
        if (it != search_paper_index_.end())
          search_negatives_[qi].push_back(it->second);
      }
    }
  }

  void build_schedule() {
    schedule_.clear();
    const std::size_t window =
        static_cast<std::size_t>(progress_.steps_per_epoch);
    if (!cfg_.proportional_sampling) {
      for (std::size_t s = 0; s < window; ++s)
        schedule_.push_back(tasks_[s % tasks_.size()]);
      return;
    }
    // Proportional: quota per task by pair count (largest remainder), then
    // interleave by fractional position so tasks spread across the window.
    double total = 0;
    for (const TaskId t : tasks_) total += static_cast<double>(pair_count(t));
    std::vector<std::size_t> quota(tasks_.size(), 0);
    std::size_t assigned = 0;
    std::vector<std::pair<double, std::size_t>> remainders;
    for (std::size_t i = 0; i < tasks_.size(); ++i) {
      const double exact =
          static_cast<double>(window) * pair_count(tasks_[i]) / total;
      quota[i] = static_cast<std::size_t>(exact);
      assigned += quota[i];
      remainders.emplace_back(exact - static_cast<double>(quota[i]), i);
    }
    std::sort(remainders.begin(), remainders.end(),
              [](const auto& a, const auto& b) {
                if (a.first != b.first) return a.first > b.first;
                return a.second < b.second;
              });
    for (std::size_t j = 0; assigned < window; ++j, ++assigned)
      quota[remainders[j % remainders.size()].second]++;
    std::vector<std::pair<double, TaskId>> slots;
    for (std::size_t i = 0; i < tasks_.size(); ++i)
      for (std::size_t o = 0; o < quota[i]; ++o)
        slots.emplace_back((static_cast<double>(o) + 0.5) /
                               static_cast<double>(quota[i]),
                           tasks_[i]);
    std::stable_sort(slots.begin(), slots.end(),
                     [](const auto& a, const auto& b) {
                       return a.first < b.first;
                     });
    for (const auto& [pos, t] : slots) schedule_.push_back(t);
  }

  void build_masks() {
    for (const TaskId task : kAllTasks) {
      auto& mask = masks_[static_cast<std::size_t>(task)];
      mask.clear();
      bundle_.params.visit_params([&](const std::string& name, Tensor<S>&) {
        bool active = true;
        for (const TaskId other : kAllTasks) {
          if (other == task) continue;
          if (name.find(std::string(".att.") + task_name(other) + ".") !=
              std::string::npos)
            active = false;
        }
        mask.push_back(active ? 1 : 0);
      });
    }
  }

  // Next pair index for a task, advancing its epoch permutation.
  std::size_t draw_pair(TaskId task) {
    TaskProgress& tp = progress_.tasks.at(task);
    const std::size_t n = pair_count(task);
    if (perm_task_ != task || perm_epoch_ != tp.epoch || perm_.size() != n) {
      perm_.resize(n);
      std::iota(perm_.begin(), perm_.end(), std::size_t{0});
      rng::Stream ps(cfg_.seed, "perm/" + std::string(task_name(task)) + "/" +
                                    std::to_string(tp.epoch));
      rng::shuffle(perm_, ps);
      perm_task_ = task;
      perm_epoch_ = tp.epoch;
    }
    const std::size_t idx = perm_[tp.cursor++];
    if (tp.cursor >= n) {
      tp.cursor = 0;
      ++tp.epoch;
      perm_epoch_ = ~std::uint64_t{0};  // force re-permute on next draw
    }
    return idx;
  }

  ContrastiveBatch assemble(TaskId task) {
    ContrastiveBatch batch;
    batch.task = task;
    for (std::size_t slot = 0; slot < cfg_.batch_size; ++slot) {
      rng::Stream hs(cfg_.seed,
                     "hardneg/" + std::to_string(progress_.global_step) + "/" +
                         std::to_string(slot));
      const std::size_t idx = draw_pair(task);
      switch (task) {
        case TaskId::Classification: {
          const ClassPair& pair = class_pairs_[idx];
          batch.queries.push_back(class_paper_texts_[pair.paper]);
          batch.positives.push_back(class_label_texts_[pair.label]);
          const auto& mined = class_mined_[pair.paper];
          std::uint32_t hard_label = 0;
          if (cfg_.use_mined_hard_negatives && !mined.empty()) {
            hard_label = mined[hs.next_below(mined.size())];
          } else {
            ++progress_.hard_negative_fallbacks;
            const auto& gold = class_gold_[pair.paper];
            bool found = false;
            for (int attempt = 0; attempt < 64 && !found; ++attempt) {
              const auto cand = static_cast<std::uint32_t>(
                  hs.next_below(class_labels_.size()));
              if (std::find(gold.begin(), gold.end(), cand) == gold.end()) {
                hard_label = cand;
                found = true;
              }
            }
            if (!found)
              throw data_error("could not sample a negative label");
          }
          batch.hard_negatives.push_back(class_label_texts_[hard_label]);
          break;
        }
        case TaskId::LinkPrediction: {
          const LinkTriple& t = link_triples_[idx];
          batch.queries.push_back(link_paper_texts_[t.query]);
          batch.positives.push_back(link_paper_texts_[t.positive]);
          batch.hard_negatives.push_back(link_paper_texts_[t.negative]);
          break;
        }
        case TaskId::Search: {
          const SearchPair& pair = search_pairs_[idx];
          batch.queries.push_back(
              render_query(search_queries_[pair.query].text));
          batch.positives.push_back(search_paper_texts_[pair.positive]);
          const auto& negs = search_negatives_[pair.query];
          std::uint32_t hard = 0;
          if (!negs.empty()) {
            hard = negs[hs.next_below(negs.size())];
          } else {
            ++progress_.hard_negative_fallbacks;
            const auto& pos_set = search_positive_sets_[pair.query];
            bool found = false;
            for (int attempt = 0; attempt < 64 && !found; ++attempt) {
              const auto cand = static_cast<std::uint32_t>(
                  hs.next_below(search_papers_.size()));
              if (!pos_set.count(cand)) {
                hard = cand;
                found = true;
              }
            }
            if (!found) throw data_error("could not sample a negative paper");
          }
          batch.hard_negatives.push_back(search_paper_texts_[hard]);
          break;
        }
      }
    }
    return batch;
  }

  void step() {
    const TaskId task =
        schedule_[static_cast<std::size_t>(progress_.global_step) %
                  schedule_.size()];
    const ContrastiveBatch batch = assemble(task);
    bundle_.params.zero_grad();
    BoundEncoder<S> enc{&bundle_.params, &tokenizer_, instructions_};
    ContrastiveOptions opts;
    opts.pool_cross_hard_negatives = cfg_.pool_cross_hard_negatives;
    opts.raw_softmax_loss = cfg_.raw_softmax_loss;
    auto result = batch_loss(enc, batch, opts);
    backward(result.loss);
    const double lr = bundle_.opt.lr_at(bundle_.opt.step_count);
    adamw_step(param_list_, bundle_.opt, lr,
               &masks_[static_cast<std::size_t>(task)]);
    progress_.loss_history.push_back(result.report.loss);
    ++progress_.global_step;
  }

  TrainConfig cfg_;
  ModelBundle<S> bundle_;
  TrainerProgress progress_;
  Tokenizer tokenizer_;
  InstructionSet instructions_;
  std::vector<TaskId> tasks_;
  std::vector<Tensor<S>> param_list_;
  std::array<std::vector<std::uint8_t>, kTaskCount> masks_;
  std::vector<TaskId> schedule_;

  std::vector<PaperRecord> class_papers_;
  std::vector<LabelRecord> class_labels_;
  std::vector<std::string> class_paper_texts_, class_label_texts_;
  std::map<std::string, std::uint32_t> class_label_index_;
  std::vector<ClassPair> class_pairs_;
  std::vector<std::vector<std::uint32_t>> class_mined_, class_gold_;

  std::vector<PaperRecord> link_papers_;
  std::vector<TripletRecord> link_triplets_;
  std::vector<std::string> link_paper_texts_;
  std::map<std::string, std::uint32_t> link_paper_index_;
  std::vector<LinkTriple> link_triples_;

  std::vector<PaperRecord> search_papers_;
  std::vector<QueryRecord> search_queries_;
  std::vector<std::string> search_paper_texts_;
  std::map<std::string, std::uint32_t> search_paper_index_;
  std::vector<SearchPair> search_pairs_;
  std::vector<std::vector<std::uint32_t>> search_negatives_;
  std::vector<std::set<std::uint32_t>> search_positive_sets_;

  // Cached permutation for the task currently drawing pairs.
  std::vector<std::size_t> perm_;
  TaskId perm_task_ = TaskId::Classification;
  std::uint64_t perm_epoch_ = ~std::uint64_t{0};
};

template <class S>
Checkpoint train_steps_impl(const TrainConfig& config, std::int64_t max_steps) {
  ModelBundle<S> bundle;
  if (!config.warmstart_checkpoint.empty()) {
    const Checkpoint warm = Checkpoint::load(config.warmstart_checkpoint);
    if (warm.precision() != config.precision)
      throw config_error("warm-start checkpoint precision differs");
    const auto& src = std::get<ModelBundle<S>>(warm.model);
    const EncoderConfig& sc = src.params.config;
    const EncoderConfig tc = config.encoder_config();
    if (sc.n_layers != tc.n_layers || sc.model_dim != tc.model_dim ||
        sc.head_count != tc.head_count || sc.ffn_dim != tc.ffn_dim ||
        sc.vocab_size != tc.vocab_size || sc.max_len != tc.max_len)
      throw config_error("warm start: checkpoint dimensions differ from config");
    if (src.params.variant == config.variant) {
      bundle.params = clone_params(src.params);
      bundle.params.config = tc;
    } else {
      bundle.params = warmstart_variant(src.params, tc);
    }
  } else {
    bundle.params = init_encoder<S>(config.encoder_config(), config.seed);
  }
  Trainer<S> trainer(config, std::move(bundle), TrainerProgress{}, true);
  trainer.run(max_steps);
  return trainer.checkpoint();
}

template <class S>
Checkpoint resume_impl(const Checkpoint& ckpt, std::int64_t max_steps) {
  const auto& src = std::get<ModelBundle<S>>(ckpt.model);
  ModelBundle<S> bundle;
  bundle.params = clone_params(src.params);
  bundle.opt = src.opt;
  Trainer<S> trainer(ckpt.config, std::move(bundle), ckpt.progress, false);
  trainer.run(max_steps);
  return trainer.checkpoint();
}

}  // namespace

Checkpoint train_steps(const TrainConfig& config, std::int64_t max_steps) {
  return config.precision == Precision::F32
             ? train_steps_impl<float>(config, max_steps)
             : train_steps_impl<double>(config, max_steps);
}

Checkpoint resume_training(const Checkpoint& ckpt, std::int64_t max_steps) {
  return ckpt.precision() == Precision::F32
             ? resume_impl<float>(ckpt, max_steps)
             : resume_impl<double>(ckpt, max_steps);
}

Checkpoint two_stage_pretrain(const TrainConfig& config) {
  if (config.variant == EncoderVariant::Vanilla)
    throw config_error("two-stage training needs an Expert or Instruction target");
  TrainConfig stage1 = config;
  stage1.variant = EncoderVariant::Vanilla;
  stage1.epochs = config.stage1_epochs > 0 ? config.stage1_epochs : config.epochs;
  stage1.warmstart_checkpoint.clear();
  const Checkpoint warm = train(stage1);

  TrainConfig stage2 = config;
  stage2.warmstart_checkpoint.clear();
  if (stage2.precision == Precision::F32) {
    const auto& src = std::get<ModelBundle<float>>(warm.model);
    ModelBundle<float> bundle;
    bundle.params = warmstart_variant(src.params, stage2.encoder_config());
    Trainer<float> trainer(stage2, std::move(bundle), TrainerProgress{}, true);
    trainer.run(-1);
    return trainer.checkpoint();
  }
  const auto& src = std::get<ModelBundle<double>>(warm.model);
  ModelBundle<double> bundle;
  bundle.params = warmstart_variant(src.params, stage2.encoder_config());
  Trainer<double> trainer(stage2, std::move(bundle), TrainerProgress{}, true);
  trainer.run(-1);
  return trainer.checkpoint();
}

// ---- embedding + evaluation runner ----

namespace {

template <class S>
void embed_rows(const Checkpoint& ckpt, const std::vector<std::string>& rendered,
                TaskId task, std::vector<double>& out, std::size_t d) {
  const auto& bundle = std::get<ModelBundle<S>>(ckpt.model);
  const EncoderParams<S>& params = bundle.params;
  const Tokenizer tokenizer(ckpt.config.vocab_size);
  InstructionCache<S> cache;
  NoGradGuard main_guard;
  if (params.variant == EncoderVariant::Instruction)
    cache = build_instruction_cache(params, ckpt.config.instruction_set(), task,
                                    tokenizer);
  parallel_for(rendered.size(), [&](std::size_t begin, std::size_t end) {
    NoGradGuard guard;
    for (std::size_t i = begin; i < end; ++i) {
      const std::vector<int> ids = tokenizer.tokenize(rendered[i]);
      Tensor<S> emb;
      switch (params.variant) {
        case EncoderVariant::Vanilla:
          emb = encode_vanilla(params, std::span<const int>(ids));
          break;
        case EncoderVariant::Expert:
          emb = encode_expert(params, std::span<const int>(ids), task);
          break;
        case EncoderVariant::Instruction:
          emb = encode_instruction(params, std::span<const int>(ids), cache);
          break;
      }
      const auto row = emb.data();
      for (std::size_t j = 0; j < d; ++j)
        out[i * d + j] = static_cast<double>(row[j]);
    }
  });
}

}  // namespace

EmbeddedCorpus embed_texts(const Checkpoint& ckpt,
                           const std::vector<std::string>& ids,
                           const std::vector<std::string>& rendered,
                           TaskId task) {
  if (ids.size() != rendered.size())
    throw contract_error("embed_texts: ids and texts must align");
  EmbeddedCorpus corpus;
  corpus.ids = ids;
  corpus.task = task;
  corpus.fingerprint = ckpt.fingerprint();
  const std::size_t d = ckpt.config.model_dim;
  std::vector<double> data(ids.size() * d, 0.0);
  if (ckpt.precision() == Precision::F32)
    embed_rows<float>(ckpt, rendered, task, data, d);
  else
    embed_rows<double>(ckpt, rendered, task, data, d);
  corpus.matrix = Tensor<double>::from_data({ids.size(), d}, std::move(data));
  return corpus;
}

void write_embeddings(const std::filesystem::path& path,
                      const EmbeddedCorpus& corpus) {
  if (path.has_parent_path())
    std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw data_error("cannot write " + path.string());
  out.write("SMEMB001", 8);
  const std::uint64_t n = corpus.ids.size();
  const std::uint64_t d = n == 0 ? 0 : corpus.matrix.cols();
  out.write(reinterpret_cast<const char*>(&n), sizeof(n));
  out.write(reinterpret_cast<const char*>(&d), sizeof(d));
  const std::string task = task_name(corpus.task);
  const std::uint64_t task_len = task.size();
  out.write(reinterpret_cast<const char*>(&task_len), sizeof(task_len));
  out.write(task.data(), static_cast<std::streamsize>(task.size()));
  for (const auto& id : corpus.ids) {
    const std::uint64_t len = id.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(id.data(), static_cast<std::streamsize>(id.size()));
  }
  const auto data = corpus.matrix.data();
  out.write(reinterpret_cast<const char*>(data.data()),
            static_cast<std::streamsize>(data.size_bytes()));
  if (!out) throw data_error("short write for " + path.string());
}

double epoch_mean_loss(const TrainerProgress& progress, std::size_t epoch) {
  const std::size_t spe = static_cast<std::size_t>(progress.steps_per_epoch);
  const std::size_t begin = epoch * spe;
  const std::size_t end = std::min(begin + spe, progress.loss_history.size());
  if (begin >= end) throw contract_error("epoch_mean_loss: epoch out of range");
  double sum = 0;
  for (std::size_t i = begin; i < end; ++i) sum += progress.loss_history[i];
  return sum / static_cast<double>(end - begin);
}

namespace {

TaskId default_task_for(const std::string& protocol) {
  if (protocol == "classification") return TaskId::Classification;
  if (protocol == "search") return TaskId::Search;
  if (protocol == "retrieval" || protocol == "reranking")
    return TaskId::LinkPrediction;
  throw config_error("unknown protocol: " + protocol);
}

}  // namespace

MetricReport run_eval(const Checkpoint& ckpt, const EvalRequest& request) {
  const TaskId task = request.task_override.value_or(
      default_task_for(request.protocol));
  MetricReport report;
  report.protocol = request.protocol;
  report.task = task_name(task);
  report.run_id = ckpt.fingerprint() + "-" + request.protocol;
  report.k_values = request.ks;
  if (request.ks.empty())
    throw config_error("evaluation needs at least one k value");
  const std::size_t max_k =
      *std::max_element(request.ks.begin(), request.ks.end());

  std::map<std::string, std::pair<double, std::size_t>> sums;
  const auto add_metric = [&](const std::string& name, double value) {
    auto& [sum, count] = sums[name];
    sum += value;
    ++count;
  };
  std::vector<RankedList> trec_lists;

  if (request.protocol == "classification") {
    const auto papers = load_papers(request.data_dir / "papers.jsonl");
    const auto labels = load_labels(request.data_dir / "labels.jsonl");
    std::vector<std::string> label_ids, label_texts;
    std::map<std::string, std::string> label_names;
    for (const auto& l : labels) {
      label_ids.push_back(l.id);
      label_texts.push_back(render_label(l));
      label_names[l.id] = l.name;
    }
    const EmbeddedCorpus label_corpus =
        embed_texts(ckpt, label_ids, label_texts, task);
    std::vector<std::string> paper_ids, paper_texts;
    for (const auto& p : papers) {
      paper_ids.push_back(p.id);
      paper_texts.push_back(render_paper(p));
    }
    const EmbeddedCorpus paper_corpus =
        embed_texts(ckpt, paper_ids, paper_texts, task);
    const std::size_t d = paper_corpus.matrix.cols();
    const auto mat = paper_corpus.matrix.data();
    std::map<std::string, std::string> gold_primary;
    for (std::size_t i = 0; i < papers.size(); ++i) {
      if (papers[i].label_ids.empty()) {
        ++report.skipped_queries;
        continue;
      }
      gold_primary[papers[i].id] = papers[i].label_ids.front();
      const std::span<const double> row(mat.data() + i * d, d);
      const RankedList full = retrieve_topk(row, label_corpus,
                                             label_corpus.ids.size());
      const std::set<std::string> relevant(papers[i].label_ids.begin(),
                                           papers[i].label_ids.end());
      std::map<std::string, double> qm;
      for (const std::size_t k : request.ks) {
        const double r = recall_at_k(full, relevant, k);
        add_metric("recall@" + std::to_string(k), r);
        qm["recall@" + std::to_string(k)] = r;
      }
      const RankedList matched = label_name_rerank(
          papers[i].title + " " + papers[i].abstract, full, label_names);
      for (const std::size_t k : request.ks)
        add_metric("recall@" + std::to_string(k) + "_matched",
                   recall_at_k(matched, relevant, k));
      report.per_query.emplace_back(papers[i].id, std::move(qm));
      if (!request.trec_out.empty()) {
        RankedList head = full;
        head.query_id = papers[i].id;
        if (head.entries.size() > max_k) head.entries.resize(max_k);
        trec_lists.push_back(std::move(head));
      }
    }
    // Macro-F1 over single (primary) gold labels.
    if (!gold_primary.empty()) {
      std::vector<std::string> kept_ids;
      std::vector<std::string> kept_texts;
      for (std::size_t i = 0; i < papers.size(); ++i)
        if (gold_primary.count(papers[i].id)) {
          kept_ids.push_back(papers[i].id);
          kept_texts.push_back(paper_texts[i]);
        }
      const EmbeddedCorpus kept =
          embed_texts(ckpt, kept_ids, kept_texts, task);
      report.metrics["macro_f1"] = macro_f1_bienc(kept, label_corpus,
                                                  gold_primary);
    }
  } else if (request.protocol == "retrieval" || request.protocol == "search") {
    const auto papers = load_papers(request.data_dir / "papers.jsonl");
    const auto queries = load_queries(request.data_dir / "queries.jsonl");
    std::vector<std::string> paper_ids, paper_texts;
    for (const auto& p : papers) {
      paper_ids.push_back(p.id);
      paper_texts.push_back(render_paper(p));
    }
    const EmbeddedCorpus corpus = embed_texts(ckpt, paper_ids, paper_texts, task);
    std::vector<std::string> query_ids, query_texts;
    for (const auto& q : queries) {
      query_ids.push_back(q.id);
      query_texts.push_back(render_query(q.text));
    }
    const EmbeddedCorpus query_embs =
        embed_texts(ckpt, query_ids, query_texts, task);
    const std::size_t d = query_embs.matrix.cols();
    const auto mat = query_embs.matrix.data();
    for (std::size_t i = 0; i < queries.size(); ++i) {
      std::set<std::string> relevant;
      for (const auto& pid : queries[i].positive_paper_ids)
        if (std::find(paper_ids.begin(), paper_ids.end(), pid) !=
            paper_ids.end())
          relevant.insert(pid);
      if (relevant.empty()) {
        ++report.skipped_queries;
        continue;
      }
      const std::span<const double> row(mat.data() + i * d, d);
      const RankedList ranked = retrieve_topk(
          row, corpus, std::min(max_k, corpus.ids.size()));
      std::map<std::string, double> qm;
      for (const std::size_t k : request.ks) {
        const double r = recall_at_k(ranked, relevant, k);
        add_metric("recall@" + std::to_string(k), r);
        qm["recall@" + std::to_string(k)] = r;
      }
      if (request.protocol == "search") {
        std::map<std::string, int> gains;
        for (const auto& pid : relevant) gains[pid] = 1;
        const double n = ndcg_at_k(ranked, gains, 10);
        add_metric("ndcg@10", n);
        qm["ndcg@10"] = n;
      }
      report.per_query.emplace_back(queries[i].id, std::move(qm));
      if (!request.trec_out.empty()) {
        RankedList head = ranked;
        head.query_id = queries[i].id;
        trec_lists.push_back(std::move(head));
      }
    }
  } else if (request.protocol == "reranking") {
    const auto papers = load_papers(request.data_dir / "papers.jsonl");
    const auto queries = load_queries(request.data_dir / "queries.jsonl");
    std::map<std::string, std::size_t> paper_index;
    std::vector<std::string> paper_ids, paper_texts;
    for (const auto& p : papers) {
      paper_index[p.id] = paper_ids.size();
      paper_ids.push_back(p.id);
      paper_texts.push_back(render_paper(p));
    }
    const EmbeddedCorpus corpus = embed_texts(ckpt, paper_ids, paper_texts, task);
    std::vector<std::string> query_ids, query_texts;
    for (const auto& q : queries) {
      if (!q.has_scored_candidates || q.scored_candidates.empty())
        throw data_error("reranking query " + q.id + " has no candidate pool");
      query_ids.push_back(q.id);
      query_texts.push_back(render_query(q.text));
    }
    const EmbeddedCorpus query_embs =
        embed_texts(ckpt, query_ids, query_texts, task);
    const std::size_t d = query_embs.matrix.cols();
    const auto qmat = query_embs.matrix.data();
    const auto cmat = corpus.matrix.data();
    // Gradedness is a property of the whole run: one graded pool switches
    // every query to the nDCG metric set, so no metric averages over a
    // biased subset of queries.
    bool run_graded = false;
    for (const auto& q : queries)
      for (const auto& [pid, rel] : q.scored_candidates)
        if (rel > 1) run_graded = true;
    for (std::size_t i = 0; i < queries.size(); ++i) {
      const auto& q = queries[i];
      std::vector<double> scores;
      scores.reserve(q.scored_candidates.size());
      for (const auto& [pid, rel] : q.scored_candidates) {
        const auto it = paper_index.find(pid);
        if (it == paper_index.end())
          throw data_error("reranking candidate " + pid +
                           " missing from papers file");
        double s = 0;
        for (std::size_t j = 0; j < d; ++j)
          s += qmat[i * d + j] * cmat[it->second * d + j];
        scores.push_back(s);
      }
      const RerankOutcome outcome = rerank_eval(
          q.id, q.scored_candidates, scores, nullptr, run_graded);
      if (outcome.skipped) {
        ++report.skipped_queries;
        continue;
      }
      for (const auto& [name, value] : outcome.metrics) add_metric(name, value);
      report.per_query.emplace_back(q.id, outcome.metrics);
    }
  } else {
    throw config_error("unknown protocol: " + request.protocol);
  }

  for (const auto& [name, sc] : sums)
    report.metrics[name] = sc.first / static_cast<double>(sc.second);
  if (!request.trec_out.empty() && !trec_lists.empty())
    write_trec_run(request.trec_out, trec_lists, "scimult");
  return report;
}

}  // namespace scimult
