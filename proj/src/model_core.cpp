#include <cmath>

#include "escm/model.hpp"
#include "json.hpp"

namespace escm {

void ModelConfig::validate() const {
  auto require = [](bool ok, const std::string& msg) {
    if (!ok) throw ValidationError("config: " + msg);
  };
  require(d > 0 && d_s > 0 && d_e > 0 && d_pr > 0, "dimensions must be positive");
  require(d_e == static_cast<int>(emotion_labels().size()),
          "d_e must equal the emotion label count (32)");
  require(heads >= 1, "heads must be >= 1");
  require(layers >= 1, "layers must be >= 1");
  require(d % heads == 0, "d must be divisible by heads");
  require(fused_width() % heads == 0,
          "d_s + d_e must be divisible by heads");
  require(dropout >= 0.0 && dropout < 1.0, "dropout must be in [0, 1)");
  require(vocab_size >= Vocabulary::kReservedCount, "vocab_size too small");
  require(n_pos >= 3 && n_deprel >= 3, "tag inventories too small");
}

Mat self_attention_allow(int len, int true_len) {
  Mat allow = Mat::Zero(len, len);
  for (int i = 0; i < len; ++i) {
    if (i < true_len) {
      allow.row(i).head(true_len).setOnes();
    } else {
      allow(i, i) = 1.0;
    }
  }
  return allow;
}

Mat causal_allow(int len) {
  Mat allow = Mat::Zero(len, len);
  for (int i = 0; i < len; ++i) allow.row(i).head(i + 1).setOnes();
  return allow;
}

Mat cross_attention_allow(int query_len, int memory_len, int memory_true_len) {
  if (memory_true_len < 1 || memory_true_len > memory_len)
    throw ValidationError("cross_attention_allow: bad memory length");
  Mat allow = Mat::Zero(query_len, memory_len);
  allow.leftCols(memory_true_len).setOnes();
  return allow;
}

int argmax_row(const Mat& row) {
  if (row.rows() != 1 || row.cols() < 1)
    throw ValidationError("argmax_row: expected a nonempty row vector");
  int best = 0;
  for (int j = 1; j < row.cols(); ++j)
    if (row(0, j) > row(0, best)) best = j;
  return best;
}

namespace {

enum class Init { kEmbed, kXavier, kZero, kOne };

struct ParamSpec {
  std::string name;
  int rows;
  int cols;
  Init init;
};

std::vector<ParamSpec> encoder_specs(const std::string& prefix, int width,
                                     int kv_width) {
  return {
      {prefix + ".wq", width, width, Init::kXavier},
      {prefix + ".bq", 1, width, Init::kZero},
      {prefix + ".wk", width, kv_width, Init::kXavier},
      {prefix + ".bk", 1, width, Init::kZero},
      {prefix + ".wv", width, kv_width, Init::kXavier},
      {prefix + ".bv", 1, width, Init::kZero},
      {prefix + ".wo", width, width, Init::kXavier},
      {prefix + ".bo", 1, width, Init::kZero},
  };
}

std::vector<ParamSpec> encoder_layer_specs(const std::string& prefix,
                                           int width) {
  std::vector<ParamSpec> specs = encoder_specs(prefix, width, width);
  const int ff = 4 * width;
  const std::vector<ParamSpec> rest = {
      {prefix + ".ln1_g", 1, width, Init::kOne},
      {prefix + ".ln1_b", 1, width, Init::kZero},
      {prefix + ".ff1_w", ff, width, Init::kXavier},
      {prefix + ".ff1_b", 1, ff, Init::kZero},
      {prefix + ".ff2_w", width, ff, Init::kXavier},
      {prefix + ".ff2_b", 1, width, Init::kZero},
      {prefix + ".ln2_g", 1, width, Init::kOne},
      {prefix + ".ln2_b", 1, width, Init::kZero},
  };
  specs.insert(specs.end(), rest.begin(), rest.end());
  return specs;
}

std::vector<ParamSpec> emotion_head_specs(const std::string& prefix,
                                          int width, int n_labels) {
  return {
      {prefix + ".w1", width, width, Init::kXavier},
      {prefix + ".b1", 1, width, Init::kZero},
      {prefix + ".w1s", 1, width, Init::kXavier},
      {prefix + ".b1s", 1, 1, Init::kZero},
      {prefix + ".w2", width, width, Init::kXavier},
      {prefix + ".b2", 1, width, Init::kZero},
      {prefix + ".w2s", n_labels, width, Init::kXavier},
      {prefix + ".b2s", 1, n_labels, Init::kZero},
  };
}

}  // namespace

EscmModel::EscmModel(const ModelConfig& config, const Vocabulary& vocab,
                     const TagIndex& tags, const PretrainedVectors* vectors)
    : EscmModel(config, vocab, tags, /*initialize=*/true, vectors) {}

EscmModel::EscmModel(const ModelConfig& config, const Vocabulary& vocab,
                     const TagIndex& tags, bool initialize,
                     const PretrainedVectors* vectors)
    : config_(config), vocab_(vocab), tags_(tags) {
  if (config_.vocab_size == 0) config_.vocab_size = vocab_.size();
  if (config_.n_pos == 0) config_.n_pos = tags_.n_pos();
  if (config_.n_deprel == 0) config_.n_deprel = tags_.n_deprel();
  if (config_.vocab_size != vocab_.size())
    throw ValidationError("config vocab_size disagrees with vocabulary");
  if (config_.n_pos != tags_.n_pos() || config_.n_deprel != tags_.n_deprel())
    throw ValidationError("config tag counts disagree with tag index");
  config_.validate();
  if (vectors && vectors->dim != config_.d)
    throw ValidationError("pretrained vector dimension " +
                          std::to_string(vectors->dim) + " != d " +
                          std::to_string(config_.d));
  register_params();
  if (initialize) initialize_params(vectors);
}

void EscmModel::register_params() {
  const int d = config_.d;
  const int f = config_.fused_width();
  const int n_labels = config_.d_e;
  const int mem_w = config_.memory_width();

  std::vector<ParamSpec> specs = {
      {"word", config_.vocab_size, d, Init::kEmbed},
      {"state", kStateCount, d, Init::kEmbed},
      {"emotion", n_labels, d, Init::kEmbed},
      {"pos_tag", config_.n_pos, config_.d_pr, Init::kEmbed},
      {"deprel", config_.n_deprel, config_.d_pr, Init::kEmbed},
  };
  auto append = [&specs](std::vector<ParamSpec> more) {
    specs.insert(specs.end(), more.begin(), more.end());
  };
  for (int l = 0; l < config_.layers; ++l)
    append(encoder_layer_specs("ctx_enc.l" + std::to_string(l), d));
  append({{"sem.w", config_.d_s, d, Init::kXavier},
          {"sem.b", 1, config_.d_s, Init::kZero},
          {"emoint.wc", d, d, Init::kXavier},
          {"emoint.bc", 1, d, Init::kZero},
          {"emoint.we", d, d, Init::kXavier},
          {"emoint.be", 1, d, Init::kZero},
          {"emoint.wce", n_labels, n_labels, Init::kXavier},
          {"emoint.bce", 1, n_labels, Init::kZero}});
  for (int l = 0; l < config_.layers; ++l)
    append(encoder_layer_specs("des_enc.l" + std::to_string(l), f));
  append({{"dcgcn.wv", f, f, Init::kXavier},
          {"dcgcn.bv", 1, f, Init::kZero}});
  append(emotion_head_specs("emo_ctx", d, n_labels));
  append(emotion_head_specs("emo_cor", f, n_labels));
  if (config_.memory_projection)
    append({{"mem.proj_w", d, d + f, Init::kXavier},
            {"mem.proj_b", 1, d, Init::kZero}});
  append(encoder_specs("dec.self", d, d));
  append({{"dec.ln1_g", 1, d, Init::kOne}, {"dec.ln1_b", 1, d, Init::kZero}});
  append(encoder_specs("dec.cross", d, mem_w));
  append({{"dec.ln2_g", 1, d, Init::kOne}, {"dec.ln2_b", 1, d, Init::kZero}});
  append({{"dec.ff1_w", 4 * d, d, Init::kXavier},
          {"dec.ff1_b", 1, 4 * d, Init::kZero},
          {"dec.ff2_w", d, 4 * d, Init::kXavier},
          {"dec.ff2_b", 1, d, Init::kZero},
          {"dec.ln3_g", 1, d, Init::kOne},
          {"dec.ln3_b", 1, d, Init::kZero}});
  append({{"dec.out_w", config_.vocab_size, d, Init::kXavier},
          {"dec.out_b", 1, config_.vocab_size, Init::kZero},
          {"dec.pgen_w", 1, d + mem_w + d, Init::kXavier},
          {"dec.pgen_b", 1, 1, Init::kZero}});

  init_kinds_.clear();
  for (const auto& s : specs) {
    params_.add(s.name, s.rows, s.cols);
    init_kinds_.push_back(static_cast<int>(s.init));
  }
}

void EscmModel::initialize_params(const PretrainedVectors* vectors) {
  Rng rng(mix_seed(config_.seed, 0x45534d4ull));  // parameter-init stream
  auto entries = params_.entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    ParamRef p = entries[i];
    switch (static_cast<Init>(init_kinds_[i])) {
      case Init::kEmbed:
        for (int r = 0; r < p->value.rows(); ++r)
          for (int c = 0; c < p->value.cols(); ++c)
            p->value(r, c) = 0.02 * rng.normal();
        break;
      case Init::kXavier: {
        const double limit =
            std::sqrt(6.0 / (p->value.rows() + p->value.cols()));
        for (int r = 0; r < p->value.rows(); ++r)
          for (int c = 0; c < p->value.cols(); ++c)
            p->value(r, c) = (2.0 * rng.uniform() - 1.0) * limit;
        break;
      }
      case Init::kZero:
        p->value.setZero();
        break;
      case Init::kOne:
        p->value.setOnes();
        break;
    }
  }
  if (!vectors) return;
  // Word rows take their pretrained vectors; emotion rows take the vectors
  // of their label words. Rows are drawn first so the remaining random rows
  // do not depend on the vector file's contents.
  ParamRef word = params_.get("word");
  for (int id = 0; id < vocab_.size(); ++id) {
    auto it = vectors->vectors.find(vocab_.token(id));
    if (it == vectors->vectors.end()) continue;
    for (int c = 0; c < config_.d; ++c) word->value(id, c) = it->second[c];
  }
  ParamRef emotion = params_.get("emotion");
  const auto& labels = emotion_labels();
  for (int e = 0; e < static_cast<int>(labels.size()); ++e) {
    auto it = vectors->vectors.find(labels[e]);
    if (it == vectors->vectors.end()) continue;
    for (int c = 0; c < config_.d; ++c) emotion->value(e, c) = it->second[c];
  }
}

Var EscmModel::param(Tape& t, const std::string& name) const {
  ParamRef p = params_.get(name);
  return t.leaf(p->value, p->grad);
}

std::pair<Var, Var> EscmModel::embed_context(Tape& t,
                                             const EncodedExample& ex) const {
  ParamRef word = params_.get("word");
  ParamRef state = params_.get("state");
  Var e_c = t.embedding(word->value, word->grad, ex.context_ids);
  Var e_state = t.embedding(state->value, state->grad, ex.state_ids);
  Var pos = t.constant(sinusoidal_positions(ex.length(), config_.d));
  Var e_tilde = t.add(t.add(e_c, pos), e_state);
  return {e_c, e_tilde};
}

Var EscmModel::attention_block(Tape& t, Var x, Var kv,
                               const std::string& prefix, const Mat& allow,
                               const DropoutCtx& drop, ForwardTrace* trace,
                               Var* avg_probs) const {
  const int width = x.cols();
  const int dk = width / config_.heads;
  Var q = t.linear(x, param(t, prefix + ".wq"), param(t, prefix + ".bq"));
  Var k = t.linear(kv, param(t, prefix + ".wk"), param(t, prefix + ".bk"));
  Var v = t.linear(kv, param(t, prefix + ".wv"), param(t, prefix + ".bv"));
  std::vector<Var> head_outs;
  Var prob_sum;
  for (int h = 0; h < config_.heads; ++h) {
    Var qh = t.slice_cols(q, h * dk, dk);
    Var kh = t.slice_cols(k, h * dk, dk);
    Var vh = t.slice_cols(v, h * dk, dk);
    Var scores = t.scale(t.matmul_nt(qh, kh), 1.0 / std::sqrt(double(dk)));
    Var probs = t.masked_row_softmax(scores, allow);
    if (trace)
      trace->add(prefix + ".attn.h" + std::to_string(h), probs.val());
    if (avg_probs) prob_sum = h == 0 ? probs : t.add(prob_sum, probs);
    Var applied = drop.rate > 0.0 && drop.rng
                      ? t.dropout(probs, drop.rate, *drop.rng)
                      : probs;
    head_outs.push_back(t.matmul(applied, vh));
  }
  if (avg_probs) *avg_probs = t.scale(prob_sum, 1.0 / config_.heads);
  Var merged = t.concat_cols(head_outs);
  return t.linear(merged, param(t, prefix + ".wo"), param(t, prefix + ".bo"));
}

Var EscmModel::encoder_stack(Tape& t, Var x, const std::string& prefix,
                             const Mat& allow, const DropoutCtx& drop,
                             ForwardTrace* trace) const {
  for (int l = 0; l < config_.layers; ++l) {
    const std::string p = prefix + ".l" + std::to_string(l);
    Var attn = attention_block(t, x, x, p, allow, drop, trace, nullptr);
    x = t.layer_norm(t.add(x, attn), param(t, p + ".ln1_g"),
                     param(t, p + ".ln1_b"));
    Var h1 = t.relu(t.linear(x, param(t, p + ".ff1_w"),
                             param(t, p + ".ff1_b")));
    if (drop.rate > 0.0 && drop.rng) h1 = t.dropout(h1, drop.rate, *drop.rng);
    Var ff = t.linear(h1, param(t, p + ".ff2_w"), param(t, p + ".ff2_b"));
    x = t.layer_norm(t.add(x, ff), param(t, p + ".ln2_g"),
                     param(t, p + ".ln2_b"));
  }
  return x;
}

Var EscmModel::encode_context(Tape& t, Var e_tilde, const Mat& attn_allow,
                              const DropoutCtx& drop,
                              ForwardTrace* trace) const {
  return encoder_stack(t, e_tilde, "ctx_enc", attn_allow, drop, trace);
}

std::string EscmModel::config_json() const {
  nlohmann::ordered_json cfg;
  cfg["d"] = config_.d;
  cfg["d_s"] = config_.d_s;
  cfg["d_e"] = config_.d_e;
  cfg["d_pr"] = config_.d_pr;
  cfg["heads"] = config_.heads;
  cfg["layers"] = config_.layers;
  cfg["dropout"] = config_.dropout;
  cfg["memory_projection"] = config_.memory_projection;
  cfg["seed"] = config_.seed;
  cfg["vocab_size"] = config_.vocab_size;
  cfg["n_pos"] = config_.n_pos;
  cfg["n_deprel"] = config_.n_deprel;
  return cfg.dump();
}

Checkpoint EscmModel::to_checkpoint() const {
  Checkpoint ckpt;
  ckpt.strings["config"] = config_json();
  ckpt.strings["vocab"] = nlohmann::json(vocab_.tokens()).dump();
  ckpt.strings["pos_tags"] = nlohmann::json(tags_.pos_tags).dump();
  ckpt.strings["deprels"] = nlohmann::json(tags_.deprels).dump();
  ckpt.strings["emotions"] = nlohmann::json(emotion_labels()).dump();
  for (const ParamEntry* p : params_.entries()) ckpt.arrays[p->name] = p->value;
  return ckpt;
}

EscmModel EscmModel::from_checkpoint(const Checkpoint& ckpt) {
  auto str = [&ckpt](const std::string& key) -> const std::string& {
    auto it = ckpt.strings.find(key);
    if (it == ckpt.strings.end())
      throw ValidationError("checkpoint missing '" + key + "'");
    return it->second;
  };
  nlohmann::json cfg;
  try {
    cfg = nlohmann::json::parse(str("config"));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("checkpoint config: ") + e.what());
  }
  ModelConfig config;
  try {
    config.d = cfg.at("d").get<int>();
    config.d_s = cfg.at("d_s").get<int>();
    config.d_e = cfg.at("d_e").get<int>();
    config.d_pr = cfg.at("d_pr").get<int>();
    config.heads = cfg.at("heads").get<int>();
    config.layers = cfg.at("layers").get<int>();
    config.dropout = cfg.at("dropout").get<double>();
    config.memory_projection = cfg.at("memory_projection").get<bool>();
    config.seed = cfg.at("seed").get<std::uint64_t>();
    config.vocab_size = cfg.at("vocab_size").get<int>();
    config.n_pos = cfg.at("n_pos").get<int>();
    config.n_deprel = cfg.at("n_deprel").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("checkpoint config: ") + e.what());
  }
  auto parse_list = [&str](const std::string& key) {
    try {
      return nlohmann::json::parse(str(key)).get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("checkpoint " + key + ": " + e.what());
    }
  };
  Vocabulary vocab(parse_list("vocab"));
  TagIndex tags;
  tags.pos_tags = parse_list("pos_tags");
  tags.deprels = parse_list("deprels");
  if (parse_list("emotions") != emotion_labels())
    throw ValidationError("checkpoint emotion labels differ from this build");
  EscmModel model(config, vocab, tags, /*initialize=*/false, nullptr);
  std::size_t used = 0;
  for (ParamRef p : model.params_.entries()) {
    auto it = ckpt.arrays.find(p->name);
    if (it == ckpt.arrays.end())
      throw ValidationError("checkpoint missing array '" + p->name + "'");
    if (it->second.rows() != p->value.rows() ||
        it->second.cols() != p->value.cols())
      throw ValidationError("checkpoint array '" + p->name +
                            "' has the wrong shape");
    p->value = it->second;
    ++used;
  }
  if (used != ckpt.arrays.size())
    throw ValidationError("checkpoint carries unknown arrays");
  return model;
}

}  // namespace escm
