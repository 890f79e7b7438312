#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "escm/corpus.hpp"
#include "escm/params.hpp"
#include "escm/tape.hpp"

namespace escm {

struct ModelConfig {
  int d = 300;    // word / encoder / decoder width
  int d_s = 10;   // dynamic semantic width
  int d_e = 32;   // emotion interaction width (= number of labels)
  int d_pr = 50;  // POS / relation embedding width
  int heads = 2;
  int layers = 1;
  double dropout = 0.1;
  bool memory_projection = true;
  std::uint64_t seed = 0;
  int vocab_size = 0;
  int n_pos = 0;
  int n_deprel = 0;

  int fused_width() const { return d_s + d_e; }
  int guide_width() const { return d_s + d_e + 2 * d_pr; }
  int memory_width() const { return memory_projection ? d : d + d_s + d_e; }
  void validate() const;  // throws ValidationError
};

// Names every probability row emitted during a forward pass so invariants
// can be checked over a whole trace.
struct ForwardTrace {
  std::vector<std::pair<std::string, Mat>> softmax_rows;
  void add(const std::string& name, const Mat& m) {
    softmax_rows.emplace_back(name, m);
  }
};

struct DropoutCtx {
  double rate = 0.0;
  Rng* rng = nullptr;
};

struct DecodeResult {
  Var probs;    // T x V mixed distribution
  Var p_vocab;  // T x V
  Var p_copy;   // T x V
  Var p_gen;    // T x 1
};

struct ExampleForward {
  Var h_ctx;
  Var h_cor;
  Var p_ctx;  // 1 x 32
  Var p_cor;  // 1 x 32
  Var p_e;    // 1 x 32, sum of the two heads
  DecodeResult dec;
  Var nll_sum;    // 1 x 1, summed over non-pad predicted tokens
  int n_tokens = 0;
};

struct BatchLoss {
  Var total;  // 1 x 1
  Var gen;
  Var ctx;
  Var cor;
  double token_count = 0;
};

struct GenerateOptions {
  int max_len = 32;
  bool sample_top_k = false;
  int top_k = 5;
  std::uint64_t seed = 0;
};

// Attention allow-masks. Rows at or beyond `true_len` keep a self-loop so
// every softmax row stays well-defined.
Mat self_attention_allow(int len, int true_len);
Mat causal_allow(int len);
Mat cross_attention_allow(int query_len, int memory_len, int memory_true_len);

int argmax_row(const Mat& row);  // ties resolve to the lowest index

class EscmModel {
 public:
  EscmModel(const ModelConfig& config, const Vocabulary& vocab,
            const TagIndex& tags,
            const PretrainedVectors* vectors = nullptr);

  static EscmModel from_checkpoint(const Checkpoint& ckpt);
  Checkpoint to_checkpoint() const;
  std::string config_json() const;

  const ModelConfig& config() const { return config_; }
  const Vocabulary& vocab() const { return vocab_; }
  const TagIndex& tags() const { return tags_; }
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }

  // --- context path ---
  // (E_c, E_tilde): word embeddings and word+position+state sums.
  std::pair<Var, Var> embed_context(Tape& t, const EncodedExample& ex) const;
  Var encode_context(Tape& t, Var e_tilde, const Mat& attn_allow,
                     const DropoutCtx& drop, ForwardTrace* trace) const;

  // --- dynamic emotion-semantic path ---
  Var dynamic_semantic(Tape& t, Var e_c) const;            // L x d_s
  std::pair<Var, Var> dynamic_emotion(Tape& t, Var e_c) const;  // E_dot, E_de
  std::pair<Var, Var> fuse_and_encode(Tape& t, Var e_de, Var e_ds,
                                      const Mat& attn_allow,
                                      const DropoutCtx& drop,
                                      ForwardTrace* trace) const;
  Var guiding_vectors(Tape& t, Var h_des, const std::vector<int>& pos_ids,
                      const std::vector<int>& deprel_in_ids) const;
  // (p, H_cor); throws ValidationError on an all-zero adjacency row.
  std::pair<Var, Var> dcgcn(Tape& t, Var v_qk, Var v_des,
                            const Mat& adjacency, ForwardTrace* trace) const;

  // --- emotion heads ---
  // head_prefix is "emo_ctx" or "emo_cor"; pos_mask is 1 x L (1 = real).
  Var aggregate_attention(Tape& t, Var h, const std::string& head_prefix,
                          const Mat& pos_mask, ForwardTrace* trace) const;
  std::tuple<Var, Var, Var> predict_emotion(Tape& t, Var h_ctx, Var h_cor,
                                            const Mat& pos_mask,
                                            ForwardTrace* trace) const;
  std::pair<Var, Var> emotion_losses(Tape& t, Var p_ctx, Var p_cor,
                                     int gold) const;

  // --- decoder ---
  Var fuse_memory(Tape& t, Var h_ctx, Var h_cor) const;
  // forced_gate in [0,1] overrides p_gen (diagnostic); negative = learned.
  DecodeResult decode(Tape& t, const std::vector<int>& target_ids,
                      int target_len, Var memory, const Mat& memory_mask,
                      const std::vector<int>& context_ids,
                      const DropoutCtx& drop, ForwardTrace* trace,
                      double forced_gate = -1.0) const;
  // (summed NLL over steps 0..target_len-2, token count)
  std::pair<Var, int> generation_nll(Tape& t, Var probs,
                                     const std::vector<int>& target_ids,
                                     int target_len) const;

  // --- composition ---
  ExampleForward forward_example(Tape& t, const EncodedExample& ex,
                                 int ctx_len, int tgt_len,
                                 const DropoutCtx& drop,
                                 ForwardTrace* trace) const;
  BatchLoss forward_batch(Tape& t, const Batch& batch, const DropoutCtx& drop,
                          ForwardTrace* trace) const;

  std::vector<int> generate(const EncodedExample& ex,
                            const GenerateOptions& opts) const;
  int predict_emotion_id(const EncodedExample& ex) const;

 private:
  EscmModel(const ModelConfig& config, const Vocabulary& vocab,
            const TagIndex& tags, bool initialize,
            const PretrainedVectors* vectors);
  void register_params();
  void initialize_params(const PretrainedVectors* vectors);

  Var attention_block(Tape& t, Var x, Var kv, const std::string& prefix,
                      const Mat& allow, const DropoutCtx& drop,
                      ForwardTrace* trace, Var* avg_probs) const;
  Var encoder_stack(Tape& t, Var x, const std::string& prefix,
                    const Mat& allow, const DropoutCtx& drop,
                    ForwardTrace* trace) const;
  Var param(Tape& t, const std::string& name) const;

  ModelConfig config_;
  Vocabulary vocab_;
  TagIndex tags_;
  // Gradient buffers are written during backward passes, which are logically
  // read-only uses of the model.
  mutable ParameterStore params_;
  std::vector<int> init_kinds_;
};

}  // namespace escm
