#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "escm/miner.hpp"
#include "escm/model.hpp"
#include "escm/training.hpp"
#include "json.hpp"

namespace {

constexpr int kExitValidation = 2;

escm::EscmModel load_model(const std::string& checkpoint_path) {
  return escm::EscmModel::from_checkpoint(
      escm::Checkpoint::load(checkpoint_path));
}

int run_train(const std::string& config_path, const std::string& corpus_path,
              const std::string& parses_path, const std::string& vectors_path,
              const std::string& out_dir) {
  escm::TrainConfig config = escm::TrainConfig::parse_file(config_path);
  auto dialogues = escm::load_corpus(corpus_path);
  auto parses = escm::load_parses(parses_path);
  escm::PretrainedVectors vectors;
  if (!vectors_path.empty()) vectors = escm::load_vectors(vectors_path);
  escm::TrainResult result =
      escm::train(config, dialogues, parses,
                  vectors_path.empty() ? nullptr : &vectors, out_dir);
  std::cout << "trained " << result.iterations << " iterations; final loss "
            << (result.losses.empty() ? 0.0 : result.losses.back())
            << "; checkpoint " << result.final_checkpoint << "\n";
  return 0;
}

int run_evaluate(const std::string& checkpoint_path,
                 const std::string& corpus_path,
                 const std::string& parses_path, const std::string& split) {
  escm::EscmModel model = load_model(checkpoint_path);
  auto dialogues = escm::load_corpus(corpus_path);
  auto parses = escm::load_parses(parses_path);
  auto examples =
      escm::encode_corpus(dialogues, parses, model.vocab(), model.tags());
  escm::EvalReport report =
      escm::evaluate(model, examples, split, checkpoint_path);
  std::cout << report.to_json();
  return 0;
}

int run_generate(const std::string& checkpoint_path,
                 const std::string& corpus_path,
                 const std::string& parses_path, const std::string& out_path,
                 int max_len) {
  escm::EscmModel model = load_model(checkpoint_path);
  auto dialogues = escm::load_corpus(corpus_path);
  auto parses = escm::load_parses(parses_path);
  std::ofstream out(out_path);
  if (!out) throw escm::IoError("cannot write " + out_path);
  escm::GenerateOptions opts;
  opts.max_len = max_len;
  for (const auto& d : dialogues) {
    escm::EncodedExample ex =
        escm::encode_example(d, parses, model.vocab(), model.tags());
    std::string response;
    for (int id : model.generate(ex, opts)) {
      if (!response.empty()) response += ' ';
      response += model.vocab().token(id);
    }
    nlohmann::ordered_json j;
    j["id"] = d.id;
    j["gold_emotion"] = d.emotion;
    j["pred_emotion"] =
        escm::emotion_labels()[model.predict_emotion_id(ex)];
    j["response"] = response;
    out << j.dump() << "\n";
  }
  return 0;
}

int run_mine(const std::string& corpus_path, const std::string& parses_path,
             const std::string& lexicon_path, const std::string& out_dir,
             double fraction, int top_k, bool include_responses) {
  auto dialogues = escm::load_corpus(corpus_path);
  auto parses = escm::load_parses(parses_path);
  auto lexicon = escm::EmotionLexicon::load(lexicon_path);
  escm::CorrelationCounts counts =
      escm::mine(dialogues, parses, lexicon, include_responses, &std::cerr);
  escm::write_report(counts, out_dir, top_k);
  std::cout << "patterns " << counts.global.size() << ", occurrences "
            << counts.total;
  if (!counts.global.empty())
    std::cout << ", top-" << fraction << " coverage "
              << escm::coverage_stats(counts, fraction);
  std::cout << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"empathetic dialogue model: train, evaluate, generate, mine"};
  app.require_subcommand(1);

  std::string config_path, corpus_path, parses_path, vectors_path, out_dir;
  std::string checkpoint_path, split = "test", out_path, lexicon_path;
  double fraction = 0.1;
  int top_k = 5;
  int max_len = 32;
  bool include_responses = false;

  auto* train = app.add_subcommand("train", "train a model from scratch");
  train->add_option("--config", config_path)->required();
  train->add_option("--corpus", corpus_path)->required();
  train->add_option("--parses", parses_path)->required();
  train->add_option("--vectors", vectors_path);
  train->add_option("--out", out_dir)->required();

  auto* evaluate = app.add_subcommand("evaluate", "metrics on a split");
  evaluate->add_option("--checkpoint", checkpoint_path)->required();
  evaluate->add_option("--corpus", corpus_path)->required();
  evaluate->add_option("--parses", parses_path)->required();
  evaluate->add_option("--split", split);

  auto* generate = app.add_subcommand("generate", "write greedy responses");
  generate->add_option("--checkpoint", checkpoint_path)->required();
  generate->add_option("--corpus", corpus_path)->required();
  generate->add_option("--parses", parses_path)->required();
  generate->add_option("--out", out_path)->required();
  generate->add_option("--max-len", max_len);

  auto* mine = app.add_subcommand("mine", "emotion correlation statistics");
  mine->add_option("--corpus", corpus_path)->required();
  mine->add_option("--parses", parses_path)->required();
  mine->add_option("--lexicon", lexicon_path)->required();
  mine->add_option("--out", out_dir)->required();
  mine->add_option("--fraction", fraction);
  mine->add_option("--top-k", top_k);
  mine->add_flag("--include-responses", include_responses);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitValidation;
  }

  try {
    if (train->parsed())
      return run_train(config_path, corpus_path, parses_path, vectors_path,
                       out_dir);
    if (evaluate->parsed())
      return run_evaluate(checkpoint_path, corpus_path, parses_path, split);
    if (generate->parsed())
      return run_generate(checkpoint_path, corpus_path, parses_path, out_path,
                          max_len);
    if (mine->parsed())
      return run_mine(corpus_path, parses_path, lexicon_path, out_dir,
                      fraction, top_k, include_responses);
  } catch (const escm::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
