#include "escm/model.hpp"

namespace escm {

Var EscmModel::dynamic_semantic(Tape& t, Var e_c) const {
  return t.linear(e_c, param(t, "sem.w"), param(t, "sem.b"));
}

std::pair<Var, Var> EscmModel::dynamic_emotion(Tape& t, Var e_c) const {
  Var proj_c =
      t.linear(e_c, param(t, "emoint.wc"), param(t, "emoint.bc"));  // L x d
  Var proj_e = t.linear(param(t, "emotion"), param(t, "emoint.we"),
                        param(t, "emoint.be"));  // 32 x d
  Var e_dot = t.matmul_nt(proj_c, proj_e);       // L x 32
  Var e_de = t.linear(e_dot, param(t, "emoint.wce"), param(t, "emoint.bce"));
  return {e_dot, e_de};
}

std::pair<Var, Var> EscmModel::fuse_and_encode(Tape& t, Var e_de, Var e_ds,
                                               const Mat& attn_allow,
                                               const DropoutCtx& drop,
                                               ForwardTrace* trace) const {
  Var v_des = t.concat_cols({e_de, e_ds});
  Var h_des = encoder_stack(t, v_des, "des_enc", attn_allow, drop, trace);
  return {v_des, h_des};
}

Var EscmModel::guiding_vectors(Tape& t, Var h_des,
                               const std::vector<int>& pos_ids,
                               const std::vector<int>& deprel_in_ids) const {
  if (static_cast<int>(pos_ids.size()) != h_des.rows() ||
      static_cast<int>(deprel_in_ids.size()) != h_des.rows())
    throw ValidationError("guiding_vectors: id sequences misaligned with H");
  ParamRef pos = params_.get("pos_tag");
  ParamRef rel = params_.get("deprel");
  Var pos_e = t.embedding(pos->value, pos->grad, pos_ids);
  Var rel_e = t.embedding(rel->value, rel->grad, deprel_in_ids);
  return t.concat_cols({h_des, pos_e, rel_e});
}

std::pair<Var, Var> EscmModel::dcgcn(Tape& t, Var v_qk, Var v_des,
                                     const Mat& adjacency,
                                     ForwardTrace* trace) const {
  if (adjacency.rows() != adjacency.cols() ||
      adjacency.rows() != v_qk.rows() || v_des.rows() != v_qk.rows())
    throw ValidationError("dcgcn: adjacency misaligned with inputs");
  for (int i = 0; i < adjacency.rows(); ++i)
    if ((adjacency.row(i).array() != 0.0).count() == 0)
      throw ValidationError("dcgcn: adjacency row " + std::to_string(i) +
                            " has no neighbors");
  Var scores = t.matmul_nt(v_qk, v_qk);
  Var p = t.masked_row_softmax(scores, adjacency);
  if (trace) trace->add("dcgcn.p", p.val());
  Var messages = t.linear(v_des, param(t, "dcgcn.wv"), param(t, "dcgcn.bv"));
  Var h_cor = t.relu(t.masked_weighted_sum(p, messages, adjacency));
  return {p, h_cor};
}

}  // namespace escm
