#include "escm/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace escm {

namespace {

using nlohmann::json;

std::ifstream open_or_throw(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  return in;
}

}  // namespace

const std::vector<std::string>& emotion_labels() {
  static const std::vector<std::string> kLabels = {
      "surprised",  "excited",      "annoyed",      "proud",
      "angry",      "sad",          "grateful",     "lonely",
      "impressed",  "afraid",       "disgusted",    "confident",
      "terrified",  "hopeful",      "anxious",      "disappointed",
      "joyful",     "prepared",     "guilty",       "furious",
      "nostalgic",  "jealous",      "anticipating", "embarrassed",
      "content",    "devastated",   "sentimental",  "caring",
      "trusting",   "ashamed",      "apprehensive", "faithful",
  };
  return kLabels;
}

int emotion_id(const std::string& label) {
  const auto& labels = emotion_labels();
  auto it = std::find(labels.begin(), labels.end(), label);
  if (it == labels.end())
    throw ValidationError("unknown emotion label: " + label);
  return static_cast<int>(it - labels.begin());
}

bool is_emotion_label(const std::string& label) {
  const auto& labels = emotion_labels();
  return std::find(labels.begin(), labels.end(), label) != labels.end();
}

Vocabulary::Vocabulary() {
  for (const char* t : {"<pad>", "<unk>", "<cls>", "<bos>", "<eos>"}) add(t);
}

Vocabulary::Vocabulary(const std::vector<std::string>& tokens_in_id_order) {
  for (const auto& t : tokens_in_id_order) {
    if (token_to_id_.count(t))
      throw ValidationError("duplicate vocabulary token: " + t);
    add(t);
  }
  if (size() < kReservedCount)
    throw ValidationError("vocabulary missing reserved tokens");
}

int Vocabulary::add(const std::string& token) {
  auto it = token_to_id_.find(token);
  if (it != token_to_id_.end()) return it->second;
  int id = static_cast<int>(id_to_token_.size());
  token_to_id_.emplace(token, id);
  id_to_token_.push_back(token);
  return id;
}

int Vocabulary::id(const std::string& token) const {
  auto it = token_to_id_.find(token);
  return it == token_to_id_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || id >= size())
    throw ValidationError("vocabulary id out of range: " + std::to_string(id));
  return id_to_token_[id];
}

bool Vocabulary::contains(const std::string& token) const {
  return token_to_id_.count(token) != 0;
}

int TagIndex::pos_id(const std::string& upos) const {
  for (int i = 0; i < n_pos(); ++i)
    if (pos_tags[i] == upos) return i;
  return kUnkPos;
}

int TagIndex::deprel_id(const std::string& rel) const {
  for (int i = 0; i < n_deprel(); ++i)
    if (deprels[i] == rel) return i;
  return kUnkRel;
}

const std::set<std::string> EmotionLexicon::kEmpty;

EmotionLexicon EmotionLexicon::load(const std::string& path) {
  auto in = open_or_throw(path);
  EmotionLexicon lex;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::size_t start = 0;
    while (true) {
      std::size_t tab = line.find('\t', start);
      cols.push_back(line.substr(start, tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (cols.size() != 3)
      throw ParseError(path + ":" + std::to_string(line_no) +
                       ": expected word<TAB>emotion<TAB>flag");
    if (cols[2] == "0") continue;
    if (cols[2] != "1")
      throw ParseError(path + ":" + std::to_string(line_no) +
                       ": membership flag must be 0 or 1");
    lex.add(cols[0], cols[1]);
  }
  return lex;
}

void EmotionLexicon::add(const std::string& word, const std::string& emotion) {
  word_tags_[lowercase(word)].insert(emotion);
}

const std::set<std::string>& EmotionLexicon::tags(
    const std::string& word) const {
  auto it = word_tags_.find(lowercase(word));
  return it == word_tags_.end() ? kEmpty : it->second;
}

bool EmotionLexicon::is_emotion_word(const std::string& word) const {
  return !tags(word).empty();
}

std::string lowercase(const std::string& s) {
  std::string out = s;
  for (char& c : out)
    c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream iss(text);
  std::string tok;
  while (iss >> tok) out.push_back(lowercase(tok));
  return out;
}

std::vector<ParsedDialogue> load_corpus(const std::string& path) {
  auto in = open_or_throw(path);
  std::vector<ParsedDialogue> dialogues;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::string where = path + ":" + std::to_string(line_no);
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw ParseError(where + ": " + e.what());
    }
    ParsedDialogue d;
    try {
      d.id = j.at("id").get<std::string>();
      d.emotion = j.at("emotion").get<std::string>();
      for (const auto& u : j.at("utterances")) {
        Utterance ut;
        const std::string role = u.at("speaker").get<std::string>();
        if (role == "speaker") {
          ut.role = SpeakerRole::Speaker;
        } else if (role == "listener") {
          ut.role = SpeakerRole::Listener;
        } else {
          throw ValidationError(where + ": speaker must be speaker|listener");
        }
        ut.tokens = tokenize(u.at("text").get<std::string>());
        d.utterances.push_back(std::move(ut));
      }
      d.response = tokenize(j.at("response").get<std::string>());
    } catch (const json::exception& e) {
      throw ParseError(where + ": " + e.what());
    }
    if (!is_emotion_label(d.emotion))
      throw ValidationError(where + ": unknown emotion label: " + d.emotion);
    if (d.utterances.empty())
      throw ValidationError(where + ": dialogue has no utterances");
    for (const auto& u : d.utterances)
      if (u.tokens.empty())
        throw ValidationError(where + ": empty utterance");
    dialogues.push_back(std::move(d));
  }
  return dialogues;
}

namespace {

void flush_sentence(ParseMap& map, const std::string& path, int header_line,
                    const std::string& sent_id,
                    std::vector<Token>&& tokens) {
  if (tokens.empty()) return;
  if (sent_id.empty())
    throw ParseError(path + ":" + std::to_string(header_line) +
                     ": sentence without a sent_id header");
  std::size_t slash = sent_id.rfind('/');
  if (slash == std::string::npos)
    throw ParseError(path + ":" + std::to_string(header_line) +
                     ": sent_id must be dialogue_id/utterance_index");
  const std::string dialogue_id = sent_id.substr(0, slash);
  const std::string idx_str = sent_id.substr(slash + 1);
  int utter_idx;
  if (idx_str == "r") {
    utter_idx = kResponseUtterance;
  } else {
    try {
      utter_idx = std::stoi(idx_str);
    } catch (const std::exception&) {
      throw ParseError(path + ":" + std::to_string(header_line) +
                       ": bad utterance index '" + idx_str + "'");
    }
    if (utter_idx < 0)
      throw ParseError(path + ":" + std::to_string(header_line) +
                       ": negative utterance index");
  }
  const int n = static_cast<int>(tokens.size());
  for (int i = 0; i < n; ++i) {
    if (tokens[i].head == kRootHead) continue;
    if (tokens[i].head < 0 || tokens[i].head >= n)
      throw ParseError(path + ": sentence " + sent_id + ": head of token " +
                       std::to_string(i + 1) + " out of range");
    if (tokens[i].head == i)
      throw ParseError(path + ": sentence " + sent_id + ": token " +
                       std::to_string(i + 1) + " is its own head");
  }
  auto key = std::make_pair(dialogue_id, utter_idx);
  if (map.count(key))
    throw ParseError(path + ": duplicate sent_id " + sent_id);
  map.emplace(std::move(key), std::move(tokens));
}

}  // namespace

ParseMap load_parses(const std::string& path) {
  auto in = open_or_throw(path);
  ParseMap map;
  std::string line;
  int line_no = 0;
  std::string sent_id;
  int header_line = 0;
  std::vector<Token> tokens;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) {
      flush_sentence(map, path, header_line, sent_id, std::move(tokens));
      tokens.clear();
      sent_id.clear();
      continue;
    }
    if (line[0] == '#') {
      static const std::string kKey = "# sent_id =";
      if (line.rfind(kKey, 0) == 0) {
        flush_sentence(map, path, header_line, sent_id, std::move(tokens));
        tokens.clear();
        sent_id = line.substr(kKey.size());
        sent_id.erase(0, sent_id.find_first_not_of(" \t"));
        header_line = line_no;
      }
      continue;
    }
    std::vector<std::string> cols;
    std::size_t start = 0;
    while (true) {
      std::size_t tab = line.find('\t', start);
      cols.push_back(line.substr(start, tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (cols.size() != 5)
      throw ParseError(path + ":" + std::to_string(line_no) +
                       ": expected 5 tab-separated columns");
    if (sent_id.empty())
      throw ParseError(path + ":" + std::to_string(line_no) +
                       ": token line before any sent_id header");
    int id, head;
    try {
      id = std::stoi(cols[0]);
      head = std::stoi(cols[3]);
    } catch (const std::exception&) {
      throw ParseError(path + ":" + std::to_string(line_no) +
                       ": non-numeric ID or HEAD");
    }
    if (id != static_cast<int>(tokens.size()) + 1)
      throw ParseError(path + ":" + std::to_string(line_no) +
                       ": token IDs must be sequential from 1");
    if (head < 0)
      throw ParseError(path + ":" + std::to_string(line_no) +
                       ": negative head");
    if (cols[2].empty() || cols[4].empty())
      throw ParseError(path + ":" + std::to_string(line_no) +
                       ": empty UPOS or DEPREL");
    Token t;
    t.surface = cols[1];
    t.upos = cols[2];
    t.head = head == 0 ? kRootHead : head - 1;
    t.deprel = cols[4];
    tokens.push_back(std::move(t));
  }
  flush_sentence(map, path, header_line, sent_id, std::move(tokens));
  return map;
}

Vocabulary build_vocab(const std::vector<ParsedDialogue>& dialogues,
                       int min_freq) {
  if (min_freq < 1) throw ValidationError("min_freq must be >= 1");
  std::map<std::string, long long> counts;
  for (const auto& d : dialogues) {
    for (const auto& u : d.utterances)
      for (const auto& t : u.tokens) ++counts[t];
    for (const auto& t : d.response) ++counts[t];
  }
  std::vector<std::pair<std::string, long long>> kept;
  for (const auto& [tok, c] : counts)
    if (c >= min_freq) kept.emplace_back(tok, c);
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  Vocabulary vocab;
  for (const auto& [tok, c] : kept) vocab.add(tok);
  return vocab;
}

TagIndex build_tag_index(const ParseMap& parses) {
  std::set<std::string> pos, rel;
  for (const auto& [key, tokens] : parses) {
    for (const auto& t : tokens) {
      pos.insert(t.upos);
      if (t.head != kRootHead) rel.insert(t.deprel);
    }
  }
  TagIndex idx;
  idx.pos_tags = {"<pad>", "<cls>", "<unk>"};
  idx.pos_tags.insert(idx.pos_tags.end(), pos.begin(), pos.end());
  idx.deprels = {"<pad>", "<root>", "<unk>"};
  idx.deprels.insert(idx.deprels.end(), rel.begin(), rel.end());
  return idx;
}

Mat build_adjacency(const std::vector<const std::vector<Token>*>& parses) {
  int total = 1;
  for (const auto* p : parses) total += static_cast<int>(p->size());
  Mat a = Mat::Identity(total, total);
  int offset = 1;
  for (const auto* p : parses) {
    const int n = static_cast<int>(p->size());
    for (int i = 0; i < n; ++i) {
      const int h = (*p)[i].head;
      if (h == kRootHead) continue;
      a(offset + i, offset + h) = 1.0;
      a(offset + h, offset + i) = 1.0;
    }
    offset += n;
  }
  return a;
}

EncodedExample encode_example(const ParsedDialogue& dialogue,
                              const ParseMap& parses, const Vocabulary& vocab,
                              const TagIndex& tags) {
  EncodedExample ex;
  ex.id = dialogue.id;
  ex.emotion_id = emotion_id(dialogue.emotion);
  ex.context_ids.push_back(Vocabulary::kCls);
  ex.state_ids.push_back(kStateCls);
  ex.pos_ids.push_back(TagIndex::kClsPos);
  ex.deprel_in_ids.push_back(TagIndex::kRootRel);
  std::vector<const std::vector<Token>*> utter_parses;
  for (std::size_t ui = 0; ui < dialogue.utterances.size(); ++ui) {
    const auto& u = dialogue.utterances[ui];
    auto it = parses.find({dialogue.id, static_cast<int>(ui)});
    if (it == parses.end())
      throw ValidationError("dialogue " + dialogue.id + ": missing parse for utterance " +
                            std::to_string(ui));
    const auto& toks = it->second;
    if (toks.size() != u.tokens.size())
      throw ValidationError(
          "dialogue " + dialogue.id + ": utterance " + std::to_string(ui) +
          " has " + std::to_string(u.tokens.size()) + " tokens but parse has " +
          std::to_string(toks.size()));
    utter_parses.push_back(&toks);
    const int state =
        u.role == SpeakerRole::Speaker ? kStateSpeaker : kStateListener;
    for (std::size_t k = 0; k < u.tokens.size(); ++k) {
      ex.context_ids.push_back(vocab.id(u.tokens[k]));
      ex.state_ids.push_back(state);
      ex.pos_ids.push_back(tags.pos_id(toks[k].upos));
      ex.deprel_in_ids.push_back(toks[k].head == kRootHead
                                     ? TagIndex::kRootRel
                                     : tags.deprel_id(toks[k].deprel));
    }
  }
  ex.adjacency = build_adjacency(utter_parses);
  ex.target_ids.push_back(Vocabulary::kBos);
  for (const auto& t : dialogue.response)
    ex.target_ids.push_back(vocab.id(t));
  ex.target_ids.push_back(Vocabulary::kEos);
  return ex;
}

EncodedExample pad_example(const EncodedExample& ex, int ctx_len,
                           int tgt_len) {
  if (ctx_len < ex.length() ||
      tgt_len < static_cast<int>(ex.target_ids.size()))
    throw ValidationError("pad_example: target lengths shorter than example");
  EncodedExample out = ex;
  out.context_ids.resize(ctx_len, Vocabulary::kPad);
  out.state_ids.resize(ctx_len, kStateSpeaker);
  out.pos_ids.resize(ctx_len, TagIndex::kPad);
  out.deprel_in_ids.resize(ctx_len, TagIndex::kPad);
  out.target_ids.resize(tgt_len, Vocabulary::kPad);
  // Pad rows keep a self-loop so every attention row stays well-defined.
  Mat a = Mat::Identity(ctx_len, ctx_len);
  a.topLeftCorner(ex.adjacency.rows(), ex.adjacency.cols()) = ex.adjacency;
  out.adjacency = std::move(a);
  return out;
}

std::vector<Batch> make_batches(const std::vector<EncodedExample>& examples,
                                int batch_size, std::uint64_t seed) {
  if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
  std::vector<int> order(examples.size());
  for (std::size_t i = 0; i < order.size(); ++i)
    order[i] = static_cast<int>(i);
  Rng rng(seed);
  rng.shuffle(order);
  std::vector<Batch> batches;
  for (std::size_t begin = 0; begin < order.size(); begin += batch_size) {
    const std::size_t end =
        std::min(order.size(), begin + static_cast<std::size_t>(batch_size));
    Batch b;
    for (std::size_t k = begin; k < end; ++k) {
      const auto& ex = examples[order[k]];
      b.context_len.push_back(ex.length());
      b.target_len.push_back(static_cast<int>(ex.target_ids.size()));
      b.max_len = std::max(b.max_len, ex.length());
      b.max_target_len =
          std::max(b.max_target_len, static_cast<int>(ex.target_ids.size()));
    }
    b.context_mask = Mat::Zero(static_cast<int>(end - begin), b.max_len);
    b.target_mask =
        Mat::Zero(static_cast<int>(end - begin), b.max_target_len);
    for (std::size_t k = begin; k < end; ++k) {
      const int row = static_cast<int>(k - begin);
      b.examples.push_back(
          pad_example(examples[order[k]], b.max_len, b.max_target_len));
      b.context_mask.row(row).head(b.context_len[row]).setOnes();
      b.target_mask.row(row).head(b.target_len[row]).setOnes();
    }
    batches.push_back(std::move(b));
  }
  return batches;
}

PretrainedVectors load_vectors(const std::string& path) {
  auto in = open_or_throw(path);
  PretrainedVectors out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream iss(line);
    std::string word;
    iss >> word;
    std::vector<double> vec;
    double v;
    while (iss >> v) vec.push_back(v);
    if (word.empty() || vec.empty())
      throw ParseError(path + ":" + std::to_string(line_no) +
                       ": expected `word v1 ... vD`");
    if (out.dim == 0) {
      out.dim = static_cast<int>(vec.size());
    } else if (static_cast<int>(vec.size()) != out.dim) {
      throw ParseError(path + ":" + std::to_string(line_no) +
                       ": vector dimension mismatch");
    }
    out.vectors.emplace(word, std::move(vec));
  }
  return out;
}

}  // namespace escm
