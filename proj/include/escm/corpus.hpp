#pragma once

#include <array>
#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "escm/common.hpp"

namespace escm {

// The 32 dialogue emotion labels, in canonical id order.
const std::vector<std::string>& emotion_labels();
int emotion_id(const std::string& label);  // throws ValidationError
bool is_emotion_label(const std::string& label);

// Head index of a token that attaches to the virtual root.
constexpr int kRootHead = -1;
// Utterance index key used for parses of the gold response ("r" in files).
constexpr int kResponseUtterance = -1;

struct Token {
  std::string surface;
  std::string upos;
  int head = kRootHead;  // 0-based index into its utterance, or kRootHead
  std::string deprel;
};

enum class SpeakerRole { Speaker, Listener };

struct Utterance {
  SpeakerRole role = SpeakerRole::Speaker;
  std::vector<std::string> tokens;
};

struct ParsedDialogue {
  std::string id;
  std::string emotion;  // one of the 32 labels
  std::vector<Utterance> utterances;
  std::vector<std::string> response;
};

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kCls = 2;
  static constexpr int kBos = 3;
  static constexpr int kEos = 4;
  static constexpr int kReservedCount = 5;

  Vocabulary();
  explicit Vocabulary(const std::vector<std::string>& tokens_in_id_order);

  int add(const std::string& token);  // returns existing id if present
  int id(const std::string& token) const;  // kUnk when absent
  const std::string& token(int id) const;
  bool contains(const std::string& token) const;
  int size() const { return static_cast<int>(id_to_token_.size()); }
  const std::vector<std::string>& tokens() const { return id_to_token_; }

 private:
  std::unordered_map<std::string, int> token_to_id_;
  std::vector<std::string> id_to_token_;
};

// Part-of-speech and dependency-relation inventories used for embedding
// lookups. Ids 0..2 are reserved; data tags are appended in sorted order so
// construction is deterministic.
struct TagIndex {
  static constexpr int kPad = 0;
  static constexpr int kClsPos = 1;  // POS id of the [CLS] position
  static constexpr int kUnkPos = 2;
  static constexpr int kRootRel = 1;  // relation id for utterance roots / CLS
  static constexpr int kUnkRel = 2;

  std::vector<std::string> pos_tags;  // id order; [0]=<pad>, [1]=<cls>, [2]=<unk>
  std::vector<std::string> deprels;   // id order; [0]=<pad>, [1]=<root>, [2]=<unk>

  int pos_id(const std::string& upos) const;
  int deprel_id(const std::string& rel) const;
  int n_pos() const { return static_cast<int>(pos_tags.size()); }
  int n_deprel() const { return static_cast<int>(deprels.size()); }
};

using ParseMap = std::map<std::pair<std::string, int>, std::vector<Token>>;

struct EncodedExample {
  std::string id;
  std::vector<int> context_ids;     // starts with CLS id
  std::vector<int> state_ids;       // kStateSpeaker/kStateListener/kStateCls
  std::vector<int> pos_ids;
  std::vector<int> deprel_in_ids;   // incoming relation per token
  Mat adjacency;                    // L x L binary
  std::vector<int> target_ids;      // BOS ... EOS
  int emotion_id = 0;
  int length() const { return static_cast<int>(context_ids.size()); }
};

constexpr int kStateSpeaker = 0;
constexpr int kStateListener = 1;
constexpr int kStateCls = 2;
constexpr int kStateCount = 3;

class EmotionLexicon {
 public:
  // TSV lines: word<TAB>emotion<TAB>0|1
  static EmotionLexicon load(const std::string& path);

  void add(const std::string& word, const std::string& emotion);
  // Case-normalized lookup; empty set means non-emotion word.
  const std::set<std::string>& tags(const std::string& word) const;
  bool is_emotion_word(const std::string& word) const;
  size_t size() const { return word_tags_.size(); }

 private:
  std::unordered_map<std::string, std::set<std::string>> word_tags_;
  static const std::set<std::string> kEmpty;
};

// Whitespace tokenization + ASCII lowercasing, the only segmentation the
// pipeline performs.
std::vector<std::string> tokenize(const std::string& text);
std::string lowercase(const std::string& s);

// JSON-lines corpus reader; errors name the offending line.
std::vector<ParsedDialogue> load_corpus(const std::string& path);

// CoNLL-U-style reader: columns ID FORM UPOS HEAD DEPREL, sentences keyed by
// `# sent_id = <dialogue_id>/<utterance_index>` (index `r` for responses).
ParseMap load_parses(const std::string& path);

// Frequency-filtered vocabulary: reserved ids, then corpus tokens with
// count >= min_freq in frequency-descending order (ties lexicographic).
Vocabulary build_vocab(const std::vector<ParsedDialogue>& dialogues,
                       int min_freq);

// Tag inventories over every parse in the map.
TagIndex build_tag_index(const ParseMap& parses);

// Dependency adjacency over the flattened context [CLS] + utterances:
// self-loops everywhere, head-dependent edges within each utterance,
// symmetric, CLS connected only to itself.
Mat build_adjacency(const std::vector<const std::vector<Token>*>& parses);

EncodedExample encode_example(const ParsedDialogue& dialogue,
                              const ParseMap& parses, const Vocabulary& vocab,
                              const TagIndex& tags);

struct Batch {
  std::vector<EncodedExample> examples;  // padded to common lengths
  std::vector<int> context_len;          // true lengths
  std::vector<int> target_len;
  Mat context_mask;  // B x max_len, 1 = real token, 0 = pad
  Mat target_mask;   // B x max_target_len
  int max_len = 0;
  int max_target_len = 0;
  int size() const { return static_cast<int>(examples.size()); }
};

// Seed-deterministic shuffle, then fixed-size chunks padded per batch.
std::vector<Batch> make_batches(const std::vector<EncodedExample>& examples,
                                int batch_size, std::uint64_t seed);

// Pads a single example to the given lengths (identity adjacency rows for
// pad positions).
EncodedExample pad_example(const EncodedExample& ex, int ctx_len, int tgt_len);

struct PretrainedVectors {
  int dim = 0;
  std::unordered_map<std::string, std::vector<double>> vectors;
};

// Text lines `word v1 ... vD`; every line must share one dimension.
PretrainedVectors load_vectors(const std::string& path);

}  // namespace escm
