#pragma once

#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "escm/corpus.hpp"

namespace escm {

// A dependency edge touching an emotion word, keyed HEADPOS-rel-DEPPOS-slot.
// Slot `f` marks the emotion word in the head (first) position, `b` in the
// dependent (second) position. Root edges use head POS "ROOT" and relation
// "root".
struct CorrelationPattern {
  std::string head_pos;
  std::string rel;
  std::string dep_pos;
  char slot = 'b';
  std::string key() const;
};

struct CorrelationCounts {
  std::map<std::string, long long> global;                        // key -> n
  std::map<std::string, std::map<std::string, long long>> per_emotion;
  long long total = 0;
  long long skipped_sentences = 0;  // utterances/responses with no parse
};

std::vector<CorrelationPattern> extract_patterns(
    const std::vector<Token>& tokens, const EmotionLexicon& lexicon);

// Counts every extracted pattern occurrence, attributed to the dialogue's
// gold emotion. Sentences without a parse are skipped with a warning.
CorrelationCounts mine(const std::vector<ParsedDialogue>& dialogues,
                       const ParseMap& parses, const EmotionLexicon& lexicon,
                       bool include_responses = false,
                       std::ostream* warnings = nullptr);

// Share of total occurrences covered by the ceil(fraction * #patterns) most
// frequent patterns (ties by key).
double coverage_stats(const CorrelationCounts& counts, double fraction);

// Top-k patterns for one emotion with percentages of that emotion's total.
std::vector<std::pair<std::string, double>> per_emotion_top(
    const CorrelationCounts& counts, const std::string& emotion, int k);

// Writes patterns.csv, coverage.csv, and report.md; byte-deterministic.
void write_report(const CorrelationCounts& counts, const std::string& out_dir,
                  int top_k);

}  // namespace escm
