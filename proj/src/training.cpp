#include "escm/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace escm {

void TrainConfig::validate() const {
  // Zero inventory counts mean "derive from the corpus"; stand-ins keep the
  // dimension checks meaningful before the data has been read.
  ModelConfig m = model;
  if (m.vocab_size == 0) m.vocab_size = Vocabulary::kReservedCount;
  if (m.n_pos == 0) m.n_pos = 3;
  if (m.n_deprel == 0) m.n_deprel = 3;
  m.validate();
  auto require = [](bool ok, const std::string& msg) {
    if (!ok) throw ValidationError("config: " + msg);
  };
  require(batch_size >= 1, "batch_size must be >= 1");
  require(learning_rate > 0.0, "learning_rate must be positive");
  require(grad_clip >= 0.0, "grad_clip must be >= 0");
  require(max_iterations >= 1, "max_iterations must be >= 1");
  require(checkpoint_interval >= 1, "checkpoint_interval must be >= 1");
  require(min_freq >= 1, "min_freq must be >= 1");
}

namespace {

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return "";
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

int parse_int(const std::string& where, const std::string& v) {
  try {
    std::size_t used = 0;
    const int out = std::stoi(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ValidationError(where + ": expected an integer, got '" + v + "'");
  }
}

double parse_real(const std::string& where, const std::string& v) {
  try {
    std::size_t used = 0;
    const double out = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ValidationError(where + ": expected a number, got '" + v + "'");
  }
}

std::uint64_t parse_u64(const std::string& where, const std::string& v) {
  try {
    std::size_t used = 0;
    const unsigned long long out = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ValidationError(where + ": expected an unsigned integer, got '" +
                          v + "'");
  }
}

bool parse_flag(const std::string& where, const std::string& v) {
  if (v == "on" || v == "true" || v == "1") return true;
  if (v == "off" || v == "false" || v == "0") return false;
  throw ValidationError(where + ": expected on|off, got '" + v + "'");
}

}  // namespace

TrainConfig TrainConfig::parse_text(const std::string& text,
                                    const std::string& origin) {
  TrainConfig cfg;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  std::set<std::string> seen;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = origin + ":" + std::to_string(line_no);
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ValidationError(where + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty() || value.empty())
      throw ValidationError(where + ": expected key = value");
    if (!seen.insert(key).second)
      throw ValidationError(where + ": duplicate key '" + key + "'");
    if (key == "d") cfg.model.d = parse_int(where, value);
    else if (key == "d_s") cfg.model.d_s = parse_int(where, value);
    else if (key == "d_e") cfg.model.d_e = parse_int(where, value);
    else if (key == "d_pr") cfg.model.d_pr = parse_int(where, value);
    else if (key == "heads") cfg.model.heads = parse_int(where, value);
    else if (key == "layers") cfg.model.layers = parse_int(where, value);
    else if (key == "dropout") cfg.model.dropout = parse_real(where, value);
    else if (key == "memory_projection")
      cfg.model.memory_projection = parse_flag(where, value);
    else if (key == "seed") cfg.model.seed = parse_u64(where, value);
    else if (key == "batch_size") cfg.batch_size = parse_int(where, value);
    else if (key == "learning_rate")
      cfg.learning_rate = parse_real(where, value);
    else if (key == "grad_clip") cfg.grad_clip = parse_real(where, value);
    else if (key == "max_iterations")
      cfg.max_iterations = parse_int(where, value);
    else if (key == "checkpoint_interval")
      cfg.checkpoint_interval = parse_int(where, value);
    else if (key == "min_freq") cfg.min_freq = parse_int(where, value);
    else
      throw ValidationError(where + ": unknown key '" + key + "'");
  }
  return cfg;
}

TrainConfig TrainConfig::parse_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_text(buf.str(), path);
}

std::vector<EncodedExample> encode_corpus(
    const std::vector<ParsedDialogue>& dialogues, const ParseMap& parses,
    const Vocabulary& vocab, const TagIndex& tags) {
  std::vector<EncodedExample> out;
  out.reserve(dialogues.size());
  for (const auto& d : dialogues)
    out.push_back(encode_example(d, parses, vocab, tags));
  return out;
}

namespace {

std::string checkpoint_name(int iteration) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "checkpoint_%06d.bin", iteration);
  return buf;
}

void check_finite(double v, const char* term) {
  if (!std::isfinite(v))
    throw Error(std::string("training aborted: ") + term +
                " loss is non-finite");
}

}  // namespace

TrainResult train(const TrainConfig& config,
                  const std::vector<ParsedDialogue>& dialogues,
                  const ParseMap& parses, const PretrainedVectors* vectors,
                  const std::string& out_dir) {
  config.validate();
  if (dialogues.empty()) throw ValidationError("train: empty corpus");
  std::filesystem::create_directories(out_dir);

  Vocabulary vocab = build_vocab(dialogues, config.min_freq);
  TagIndex tags = build_tag_index(parses);
  ModelConfig mc = config.model;
  mc.vocab_size = vocab.size();
  mc.n_pos = tags.n_pos();
  mc.n_deprel = tags.n_deprel();
  EscmModel model(mc, vocab, tags, vectors);
  std::vector<EncodedExample> examples =
      encode_corpus(dialogues, parses, vocab, tags);

  AdamOptimizer opt;
  opt.learning_rate = config.learning_rate;
  opt.grad_clip = config.grad_clip;

  Rng dropout_rng(mix_seed(config.model.seed, 0x64726f70ull));
  std::ofstream log(out_dir + "/train_log.csv");
  if (!log) throw IoError("cannot write " + out_dir + "/train_log.csv");
  log << "iteration,total,generation,context_emotion,correlation_emotion\n";
  log.precision(17);

  TrainResult result;
  int iteration = 0;
  std::uint64_t epoch = 0;
  while (iteration < config.max_iterations) {
    const auto batches =
        make_batches(examples, config.batch_size,
                     mix_seed(config.model.seed, 0x65706f63ull + epoch));
    ++epoch;
    for (const auto& batch : batches) {
      if (iteration >= config.max_iterations) break;
      Tape tape;
      DropoutCtx drop{config.model.dropout, &dropout_rng};
      BatchLoss loss = model.forward_batch(tape, batch, drop, nullptr);
      const double gen = loss.gen.val()(0, 0);
      const double ctx = loss.ctx.val()(0, 0);
      const double cor = loss.cor.val()(0, 0);
      check_finite(gen, "generation");
      check_finite(ctx, "context-emotion");
      check_finite(cor, "correlation-emotion");
      const double total = loss.total.val()(0, 0);
      model.params().zero_grad();
      tape.backward(loss.total);
      opt.step(model.params());
      ++iteration;
      result.losses.push_back(total);
      log << iteration << ',' << total << ',' << gen << ',' << ctx << ','
          << cor << '\n';
      if (iteration % config.checkpoint_interval == 0 &&
          iteration < config.max_iterations)
        model.to_checkpoint().save(out_dir + "/" + checkpoint_name(iteration));
    }
  }
  result.iterations = iteration;
  result.final_checkpoint = out_dir + "/" + checkpoint_name(iteration);
  model.to_checkpoint().save(result.final_checkpoint);
  return result;
}

double perplexity_from_probs(const std::vector<double>& gold_token_probs) {
  if (gold_token_probs.empty())
    throw ValidationError("perplexity over an empty token set");
  double nll = 0.0;
  for (double p : gold_token_probs) {
    if (!(p > 0.0))
      throw ValidationError("perplexity: gold token probability not positive");
    nll -= std::log(p);
  }
  return std::exp(nll / static_cast<double>(gold_token_probs.size()));
}

double accuracy_from_predictions(const std::vector<int>& predicted,
                                 const std::vector<int>& gold) {
  if (predicted.size() != gold.size() || predicted.empty())
    throw ValidationError("accuracy: prediction/gold size mismatch");
  long long hits = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i)
    if (predicted[i] == gold[i]) ++hits;
  return static_cast<double>(hits) / static_cast<double>(predicted.size());
}

double distinct_n(const std::vector<std::vector<std::string>>& responses,
                  int n) {
  if (n < 1) throw ValidationError("distinct_n: n must be >= 1");
  std::set<std::vector<std::string>> seen;
  long long total = 0;
  for (const auto& r : responses) {
    const int len = static_cast<int>(r.size());
    for (int i = 0; i + n <= len; ++i) {
      seen.insert(std::vector<std::string>(r.begin() + i, r.begin() + i + n));
      ++total;
    }
  }
  if (total == 0) return 0.0;
  return static_cast<double>(seen.size()) / static_cast<double>(total);
}

namespace {

// Teacher-forced per-example forward; returns (summed NLL, token count).
std::pair<double, long long> example_nll(const EscmModel& model,
                                         const EncodedExample& ex) {
  Tape t;
  DropoutCtx no_drop;
  ExampleForward f = model.forward_example(
      t, ex, ex.length(), static_cast<int>(ex.target_ids.size()), no_drop,
      nullptr);
  return {f.nll_sum.val()(0, 0), f.n_tokens};
}

}  // namespace

double perplexity(const EscmModel& model,
                  const std::vector<EncodedExample>& examples) {
  if (examples.empty()) throw ValidationError("perplexity: empty split");
  double nll = 0.0;
  long long tokens = 0;
  for (const auto& ex : examples) {
    auto [n, c] = example_nll(model, ex);
    nll += n;
    tokens += c;
  }
  return std::exp(nll / static_cast<double>(tokens));
}

double emotion_accuracy(const EscmModel& model,
                        const std::vector<EncodedExample>& examples) {
  if (examples.empty())
    throw ValidationError("emotion_accuracy: empty split");
  std::vector<int> pred, gold;
  for (const auto& ex : examples) {
    pred.push_back(model.predict_emotion_id(ex));
    gold.push_back(ex.emotion_id);
  }
  return accuracy_from_predictions(pred, gold);
}

EvalReport evaluate(const EscmModel& model,
                    const std::vector<EncodedExample>& examples,
                    const std::string& split,
                    const std::string& checkpoint_path,
                    int generation_max_len) {
  if (examples.empty()) throw ValidationError("evaluate: empty split");
  // Stable order, independent of input file order.
  std::vector<const EncodedExample*> ordered;
  for (const auto& ex : examples) ordered.push_back(&ex);
  std::stable_sort(ordered.begin(), ordered.end(),
                   [](const EncodedExample* a, const EncodedExample* b) {
                     return a->id < b->id;
                   });
  EvalReport report;
  report.split = split;
  report.n_examples = static_cast<int>(examples.size());
  report.seed = model.config().seed;
  report.checkpoint_path = checkpoint_path;

  double nll = 0.0;
  long long tokens = 0;
  std::vector<int> pred, gold;
  std::vector<std::vector<std::string>> generated;
  GenerateOptions gen_opts;
  gen_opts.max_len = generation_max_len;
  for (const EncodedExample* ex : ordered) {
    auto [n, c] = example_nll(model, *ex);
    nll += n;
    tokens += c;
    pred.push_back(model.predict_emotion_id(*ex));
    gold.push_back(ex->emotion_id);
    std::vector<std::string> words;
    for (int id : model.generate(*ex, gen_opts))
      words.push_back(model.vocab().token(id));
    generated.push_back(std::move(words));
  }
  report.ppl = std::exp(nll / static_cast<double>(tokens));
  report.emotion_accuracy = accuracy_from_predictions(pred, gold);
  report.dist1 = distinct_n(generated, 1);
  report.dist2 = distinct_n(generated, 2);

  report.config_hash = git_blob_sha1(model.config_json());
  return report;
}

std::string EvalReport::to_json() const {
  nlohmann::ordered_json j;
  j["ppl"] = ppl;
  j["emotion_accuracy"] = emotion_accuracy;
  j["dist1"] = dist1;
  j["dist2"] = dist2;
  j["n_examples"] = n_examples;
  j["split"] = split;
  j["seed"] = seed;
  j["checkpoint"] = checkpoint_path;
  j["config_hash"] = config_hash;
  return j.dump(2) + "\n";
}

}  // namespace escm
