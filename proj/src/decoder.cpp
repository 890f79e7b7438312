#include <algorithm>
#include <cmath>

#include "escm/model.hpp"

namespace escm {

Var EscmModel::aggregate_attention(Tape& t, Var h,
                                   const std::string& head_prefix,
                                   const Mat& pos_mask,
                                   ForwardTrace* trace) const {
  if (pos_mask.rows() != 1 || pos_mask.cols() != h.rows())
    throw ValidationError("aggregate_attention: mask must be 1 x L");
  Var h1 = t.tanh_(t.linear(h, param(t, head_prefix + ".w1"),
                            param(t, head_prefix + ".b1")));
  Var scores = t.linear(h1, param(t, head_prefix + ".w1s"),
                        param(t, head_prefix + ".b1s"));  // L x 1
  Var p_s = t.masked_row_softmax(t.transpose(scores), pos_mask);  // 1 x L
  if (trace) trace->add(head_prefix + ".P_s", p_s.val());
  Var h2 = t.masked_weighted_sum(p_s, h, pos_mask);  // 1 x w
  Var h2a = t.tanh_(t.linear(h2, param(t, head_prefix + ".w2"),
                             param(t, head_prefix + ".b2")));
  Var logits = t.linear(h2a, param(t, head_prefix + ".w2s"),
                        param(t, head_prefix + ".b2s"));  // 1 x 32
  Var p_e = t.masked_row_softmax(logits, Mat::Ones(1, config_.d_e));
  if (trace) trace->add(head_prefix + ".P_e", p_e.val());
  return p_e;
}

std::tuple<Var, Var, Var> EscmModel::predict_emotion(Tape& t, Var h_ctx,
                                                     Var h_cor,
                                                     const Mat& pos_mask,
                                                     ForwardTrace* trace) const {
  Var p_ctx = aggregate_attention(t, h_ctx, "emo_ctx", pos_mask, trace);
  Var p_cor = aggregate_attention(t, h_cor, "emo_cor", pos_mask, trace);
  Var p_e = t.add(p_ctx, p_cor);
  return {p_ctx, p_cor, p_e};
}

std::pair<Var, Var> EscmModel::emotion_losses(Tape& t, Var p_ctx, Var p_cor,
                                              int gold) const {
  if (gold < 0 || gold >= config_.d_e)
    throw ValidationError("emotion_losses: gold id out of range");
  const std::vector<std::pair<int, int>> cell = {{0, gold}};
  Var l_ctx = t.scale(t.log_(t.pick(p_ctx, cell)), -1.0);
  Var l_cor = t.scale(t.log_(t.pick(p_cor, cell)), -1.0);
  return {l_ctx, l_cor};
}

Var EscmModel::fuse_memory(Tape& t, Var h_ctx, Var h_cor) const {
  if (h_ctx.rows() != h_cor.rows())
    throw ValidationError("fuse_memory: misaligned lengths");
  Var fused = t.concat_cols({h_ctx, h_cor});  // L x (d + 42)
  if (!config_.memory_projection) return fused;
  return t.linear(fused, param(t, "mem.proj_w"), param(t, "mem.proj_b"));
}

DecodeResult EscmModel::decode(Tape& t, const std::vector<int>& target_ids,
                               int target_len, Var memory,
                               const Mat& memory_mask,
                               const std::vector<int>& context_ids,
                               const DropoutCtx& drop, ForwardTrace* trace,
                               double forced_gate) const {
  const int steps = target_len - 1;
  if (steps < 1 || steps > static_cast<int>(target_ids.size()))
    throw ValidationError("decode: need at least BOS plus one predicted step");
  if (target_ids.empty() || target_ids[0] != Vocabulary::kBos)
    throw ValidationError("decode: target must begin with BOS");
  if (static_cast<int>(context_ids.size()) != memory.rows())
    throw ValidationError("decode: context ids misaligned with memory");
  if (memory_mask.rows() != steps || memory_mask.cols() != memory.rows())
    throw ValidationError("decode: memory mask has the wrong shape");

  const std::vector<int> in_ids(target_ids.begin(),
                                target_ids.begin() + steps);
  ParamRef word = params_.get("word");
  Var e_y = t.embedding(word->value, word->grad, in_ids);  // steps x d
  Var x = t.add(e_y, t.constant(sinusoidal_positions(steps, config_.d)));

  Var self_attn = attention_block(t, x, x, "dec.self", causal_allow(steps),
                                  drop, trace, nullptr);
  x = t.layer_norm(t.add(x, self_attn), param(t, "dec.ln1_g"),
                   param(t, "dec.ln1_b"));
  Var cross_probs;
  Var cross = attention_block(t, x, memory, "dec.cross", memory_mask, drop,
                              trace, &cross_probs);
  x = t.layer_norm(t.add(x, cross), param(t, "dec.ln2_g"),
                   param(t, "dec.ln2_b"));
  Var h1 = t.relu(t.linear(x, param(t, "dec.ff1_w"), param(t, "dec.ff1_b")));
  if (drop.rate > 0.0 && drop.rng) h1 = t.dropout(h1, drop.rate, *drop.rng);
  Var ff = t.linear(h1, param(t, "dec.ff2_w"), param(t, "dec.ff2_b"));
  x = t.layer_norm(t.add(x, ff), param(t, "dec.ln3_g"),
                   param(t, "dec.ln3_b"));

  Var logits = t.linear(x, param(t, "dec.out_w"), param(t, "dec.out_b"));
  Var p_vocab =
      t.masked_row_softmax(logits, Mat::Ones(steps, config_.vocab_size));
  if (trace) trace->add("dec.P_vocab", p_vocab.val());

  // Copy path and gate use the pre-dropout head-averaged attention.
  Var attn_ctx = t.matmul(cross_probs, memory);  // steps x mem_w
  Var p_copy = t.scatter_cols(cross_probs, context_ids, config_.vocab_size);
  Var p_gen;
  if (forced_gate >= 0.0) {
    p_gen = t.constant(Mat::Constant(steps, 1, forced_gate));
  } else {
    Var gate_in = t.concat_cols({x, attn_ctx, e_y});
    p_gen = t.sigmoid(
        t.linear(gate_in, param(t, "dec.pgen_w"), param(t, "dec.pgen_b")));
  }
  Var probs = t.add(t.row_scale(p_vocab, p_gen),
                    t.row_scale(p_copy, t.one_minus(p_gen)));
  if (trace) trace->add("dec.P_final", probs.val());
  DecodeResult out;
  out.probs = probs;
  out.p_vocab = p_vocab;
  out.p_copy = p_copy;
  out.p_gen = p_gen;
  return out;
}

std::pair<Var, int> EscmModel::generation_nll(Tape& t, Var probs,
                                              const std::vector<int>& target_ids,
                                              int target_len) const {
  const int steps = target_len - 1;
  if (probs.rows() < steps)
    throw ValidationError("generation_nll: fewer steps than gold tokens");
  std::vector<std::pair<int, int>> cells;
  for (int s = 0; s < steps; ++s) cells.push_back({s, target_ids[s + 1]});
  Var picked = t.pick(probs, cells);  // steps x 1
  Var nll = t.scale(t.sum_all(t.log_(picked)), -1.0);
  return {nll, steps};
}

ExampleForward EscmModel::forward_example(Tape& t, const EncodedExample& ex,
                                          int ctx_len, int tgt_len,
                                          const DropoutCtx& drop,
                                          ForwardTrace* trace) const {
  const int len = ex.length();
  if (ctx_len < 1 || ctx_len > len || tgt_len < 2 ||
      tgt_len > static_cast<int>(ex.target_ids.size()))
    throw ValidationError("forward_example: bad true lengths");
  ExampleForward out;
  auto [e_c, e_tilde] = embed_context(t, ex);
  const Mat attn_allow = self_attention_allow(len, ctx_len);
  out.h_ctx = encode_context(t, e_tilde, attn_allow, drop, trace);
  Var e_ds = dynamic_semantic(t, e_c);
  auto [e_dot, e_de] = dynamic_emotion(t, e_c);
  auto [v_des, h_des] = fuse_and_encode(t, e_de, e_ds, attn_allow, drop, trace);
  Var v_qk = guiding_vectors(t, h_des, ex.pos_ids, ex.deprel_in_ids);
  auto [p, h_cor] = dcgcn(t, v_qk, v_des, ex.adjacency, trace);
  out.h_cor = h_cor;
  Mat pos_mask = Mat::Zero(1, len);
  pos_mask.leftCols(ctx_len).setOnes();
  auto [p_ctx, p_cor, p_e] = predict_emotion(t, out.h_ctx, out.h_cor,
                                             pos_mask, trace);
  out.p_ctx = p_ctx;
  out.p_cor = p_cor;
  out.p_e = p_e;
  Var memory = fuse_memory(t, out.h_ctx, out.h_cor);
  out.dec = decode(t, ex.target_ids, tgt_len, memory,
                   cross_attention_allow(tgt_len - 1, len, ctx_len),
                   ex.context_ids, drop, trace);
  auto [nll, n_tokens] = generation_nll(t, out.dec.probs, ex.target_ids,
                                        tgt_len);
  out.nll_sum = nll;
  out.n_tokens = n_tokens;
  return out;
}

BatchLoss EscmModel::forward_batch(Tape& t, const Batch& batch,
                                   const DropoutCtx& drop,
                                   ForwardTrace* trace) const {
  if (batch.size() == 0) throw ValidationError("forward_batch: empty batch");
  Var nll_sum, ctx_sum, cor_sum;
  long long tokens = 0;
  for (int i = 0; i < batch.size(); ++i) {
    const EncodedExample& ex = batch.examples[i];
    ExampleForward f = forward_example(t, ex, batch.context_len[i],
                                       batch.target_len[i], drop, trace);
    auto [l_ctx, l_cor] = emotion_losses(t, f.p_ctx, f.p_cor, ex.emotion_id);
    nll_sum = i == 0 ? f.nll_sum : t.add(nll_sum, f.nll_sum);
    ctx_sum = i == 0 ? l_ctx : t.add(ctx_sum, l_ctx);
    cor_sum = i == 0 ? l_cor : t.add(cor_sum, l_cor);
    tokens += f.n_tokens;
  }
  BatchLoss loss;
  loss.token_count = static_cast<double>(tokens);
  loss.gen = t.scale(nll_sum, 1.0 / loss.token_count);
  loss.ctx = t.scale(ctx_sum, 1.0 / batch.size());
  loss.cor = t.scale(cor_sum, 1.0 / batch.size());
  loss.total = t.add(t.add(loss.gen, loss.ctx), loss.cor);
  return loss;
}

std::vector<int> EscmModel::generate(const EncodedExample& ex,
                                     const GenerateOptions& opts) const {
  if (opts.max_len < 1)
    throw ValidationError("generate: max_len must be >= 1");
  if (opts.sample_top_k && opts.top_k < 1)
    throw ValidationError("generate: top_k must be >= 1");
  const DropoutCtx no_drop;
  Tape t;
  auto [e_c, e_tilde] = embed_context(t, ex);
  const int len = ex.length();
  const Mat attn_allow = self_attention_allow(len, len);
  Var h_ctx = encode_context(t, e_tilde, attn_allow, no_drop, nullptr);
  Var e_ds = dynamic_semantic(t, e_c);
  auto [e_dot, e_de] = dynamic_emotion(t, e_c);
  auto [v_des, h_des] =
      fuse_and_encode(t, e_de, e_ds, attn_allow, no_drop, nullptr);
  Var v_qk = guiding_vectors(t, h_des, ex.pos_ids, ex.deprel_in_ids);
  auto [p, h_cor] = dcgcn(t, v_qk, v_des, ex.adjacency, nullptr);
  Var memory = fuse_memory(t, h_ctx, h_cor);

  Rng rng(mix_seed(opts.seed, 0x67656eull));
  std::vector<int> prefix = {Vocabulary::kBos};
  std::vector<int> emitted;
  for (int step = 0; step < opts.max_len; ++step) {
    const int plen = static_cast<int>(prefix.size());
    DecodeResult dec = decode(t, prefix, plen + 1, memory,
                              cross_attention_allow(plen, len, len),
                              ex.context_ids, no_drop, nullptr);
    const Mat dist = dec.probs.val().row(plen - 1);
    int next;
    if (opts.sample_top_k) {
      const int k = std::min(opts.top_k, static_cast<int>(dist.cols()));
      std::vector<int> order(dist.cols());
      for (int j = 0; j < static_cast<int>(order.size()); ++j) order[j] = j;
      std::sort(order.begin(), order.end(), [&dist](int a, int b) {
        if (dist(0, a) != dist(0, b)) return dist(0, a) > dist(0, b);
        return a < b;
      });
      double mass = 0.0;
      for (int j = 0; j < k; ++j) mass += dist(0, order[j]);
      double r = rng.uniform() * mass;
      next = order[k - 1];
      for (int j = 0; j < k; ++j) {
        r -= dist(0, order[j]);
        if (r <= 0.0) {
          next = order[j];
          break;
        }
      }
    } else {
      next = argmax_row(dist);
    }
    if (next == Vocabulary::kEos) break;
    emitted.push_back(next);
    prefix.push_back(next);
  }
  return emitted;
}

int EscmModel::predict_emotion_id(const EncodedExample& ex) const {
  const DropoutCtx no_drop;
  Tape t;
  auto [e_c, e_tilde] = embed_context(t, ex);
  const int len = ex.length();
  const Mat attn_allow = self_attention_allow(len, len);
  Var h_ctx = encode_context(t, e_tilde, attn_allow, no_drop, nullptr);
  Var e_ds = dynamic_semantic(t, e_c);
  auto [e_dot, e_de] = dynamic_emotion(t, e_c);
  auto [v_des, h_des] =
      fuse_and_encode(t, e_de, e_ds, attn_allow, no_drop, nullptr);
  Var v_qk = guiding_vectors(t, h_des, ex.pos_ids, ex.deprel_in_ids);
  auto [p, h_cor] = dcgcn(t, v_qk, v_des, ex.adjacency, nullptr);
  Mat pos_mask = Mat::Ones(1, len);
  auto [p_ctx, p_cor, p_e] = predict_emotion(t, h_ctx, h_cor, pos_mask,
                                             nullptr);
  return argmax_row(p_e.val());
}

}  // namespace escm
