#pragma once

#include <string>
#include <vector>

#include "escm/corpus.hpp"
#include "escm/model.hpp"

namespace escm {

struct TrainConfig {
  ModelConfig model;
  int batch_size = 16;
  double learning_rate = 1e-4;
  double grad_clip = 0.0;  // 0 disables clipping
  int max_iterations = 13500;
  int checkpoint_interval = 500;
  int min_freq = 1;

  void validate() const;
  // Flat `key = value` lines, '#' comments; unknown keys are errors.
  static TrainConfig parse_text(const std::string& text,
                                const std::string& origin = "config");
  static TrainConfig parse_file(const std::string& path);
};

struct TrainResult {
  std::string final_checkpoint;
  int iterations = 0;
  std::vector<double> losses;  // total loss per iteration
};

// Optimizes the summed generation + dual emotion losses with Adam, logging
// per-iteration losses to <out_dir>/train_log.csv and writing checkpoints at
// the configured interval plus a final one. Aborts (Error) if any loss term
// turns non-finite, naming the term.
TrainResult train(const TrainConfig& config,
                  const std::vector<ParsedDialogue>& dialogues,
                  const ParseMap& parses, const PretrainedVectors* vectors,
                  const std::string& out_dir);

struct EvalReport {
  double ppl = 0.0;
  double emotion_accuracy = 0.0;
  double dist1 = 0.0;
  double dist2 = 0.0;
  int n_examples = 0;
  std::string split;
  std::uint64_t seed = 0;
  std::string checkpoint_path;
  std::string config_hash;  // git-style blob hash of the stored config
  std::string to_json() const;
};

// Metric cores, pure over their inputs.
double perplexity_from_probs(const std::vector<double>& gold_token_probs);
double accuracy_from_predictions(const std::vector<int>& predicted,
                                 const std::vector<int>& gold);
double distinct_n(const std::vector<std::vector<std::string>>& responses,
                  int n);

// Teacher-forced perplexity over gold responses.
double perplexity(const EscmModel& model,
                  const std::vector<EncodedExample>& examples);
double emotion_accuracy(const EscmModel& model,
                        const std::vector<EncodedExample>& examples);

EvalReport evaluate(const EscmModel& model,
                    const std::vector<EncodedExample>& examples,
                    const std::string& split,
                    const std::string& checkpoint_path,
                    int generation_max_len = 32);

std::vector<EncodedExample> encode_corpus(
    const std::vector<ParsedDialogue>& dialogues, const ParseMap& parses,
    const Vocabulary& vocab, const TagIndex& tags);

}  // namespace escm
