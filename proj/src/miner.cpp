#include "escm/miner.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

namespace escm {

namespace {

std::string upper(const std::string& s) {
  std::string out = s;
  for (char& c : out)
    c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return out;
}

// Frequency-descending, ties by key ascending.
std::vector<std::pair<std::string, long long>> ranked(
    const std::map<std::string, long long>& counts) {
  std::vector<std::pair<std::string, long long>> out(counts.begin(),
                                                     counts.end());
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  return out;
}

}  // namespace

std::string CorrelationPattern::key() const {
  return head_pos + "-" + rel + "-" + dep_pos + "-" + std::string(1, slot);
}

std::vector<CorrelationPattern> extract_patterns(
    const std::vector<Token>& tokens, const EmotionLexicon& lexicon) {
  std::vector<CorrelationPattern> out;
  for (const Token& dep : tokens) {
    if (dep.head == kRootHead) {
      if (lexicon.is_emotion_word(dep.surface))
        out.push_back({"ROOT", "root", upper(dep.upos), 'b'});
      continue;
    }
    const Token& head = tokens[dep.head];
    const std::string rel = lowercase(dep.deprel);
    if (lexicon.is_emotion_word(dep.surface))
      out.push_back({upper(head.upos), rel, upper(dep.upos), 'b'});
    if (lexicon.is_emotion_word(head.surface))
      out.push_back({upper(head.upos), rel, upper(dep.upos), 'f'});
  }
  return out;
}

CorrelationCounts mine(const std::vector<ParsedDialogue>& dialogues,
                       const ParseMap& parses, const EmotionLexicon& lexicon,
                       bool include_responses, std::ostream* warnings) {
  CorrelationCounts counts;
  for (const auto& d : dialogues) {
    emotion_id(d.emotion);  // validates
    auto count_sentence = [&](int utter_idx) {
      auto it = parses.find({d.id, utter_idx});
      if (it == parses.end()) {
        ++counts.skipped_sentences;
        if (warnings)
          *warnings << "warning: no parse for dialogue " << d.id
                    << " sentence "
                    << (utter_idx == kResponseUtterance
                            ? std::string("r")
                            : std::to_string(utter_idx))
                    << "; skipped\n";
        return;
      }
      for (const auto& pat : extract_patterns(it->second, lexicon)) {
        const std::string key = pat.key();
        ++counts.global[key];
        ++counts.per_emotion[d.emotion][key];
        ++counts.total;
      }
    };
    for (std::size_t ui = 0; ui < d.utterances.size(); ++ui)
      count_sentence(static_cast<int>(ui));
    if (include_responses) count_sentence(kResponseUtterance);
  }
  return counts;
}

double coverage_stats(const CorrelationCounts& counts, double fraction) {
  if (counts.global.empty())
    throw ValidationError("coverage_stats: no patterns counted");
  if (!(fraction > 0.0 && fraction <= 1.0))
    throw ValidationError("coverage_stats: fraction must be in (0, 1]");
  const auto order = ranked(counts.global);
  const auto take = static_cast<std::size_t>(
      std::ceil(fraction * static_cast<double>(order.size())));
  long long covered = 0;
  for (std::size_t i = 0; i < take && i < order.size(); ++i)
    covered += order[i].second;
  return static_cast<double>(covered) / static_cast<double>(counts.total);
}

std::vector<std::pair<std::string, double>> per_emotion_top(
    const CorrelationCounts& counts, const std::string& emotion, int k) {
  if (k < 1) throw ValidationError("per_emotion_top: k must be >= 1");
  if (!is_emotion_label(emotion))
    throw ValidationError("per_emotion_top: unknown emotion '" + emotion +
                          "'");
  auto it = counts.per_emotion.find(emotion);
  if (it == counts.per_emotion.end())
    throw ValidationError("per_emotion_top: no counts for emotion '" +
                          emotion + "'");
  long long total = 0;
  for (const auto& [key, n] : it->second) total += n;
  std::vector<std::pair<std::string, double>> out;
  for (const auto& [key, n] : ranked(it->second)) {
    if (static_cast<int>(out.size()) >= k) break;
    out.emplace_back(key, 100.0 * static_cast<double>(n) /
                              static_cast<double>(total));
  }
  return out;
}

void write_report(const CorrelationCounts& counts, const std::string& out_dir,
                  int top_k) {
  if (top_k < 1) throw ValidationError("write_report: top_k must be >= 1");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  auto open = [&out_dir](const std::string& name) {
    std::ofstream out(out_dir + "/" + name);
    if (!out) throw IoError("cannot write " + out_dir + "/" + name);
    return out;
  };
  char buf[128];

  auto patterns_csv = open("patterns.csv");
  patterns_csv << "pattern,count\n";
  for (const auto& [key, n] : ranked(counts.global))
    patterns_csv << key << ',' << n << '\n';

  auto coverage_csv = open("coverage.csv");
  coverage_csv << "fraction,coverage\n";
  if (!counts.global.empty()) {
    for (int pct = 5; pct <= 100; pct += 5) {
      const double fraction = pct / 100.0;
      std::snprintf(buf, sizeof(buf), "%.2f,%.6f\n", fraction,
                    coverage_stats(counts, fraction));
      coverage_csv << buf;
    }
  }

  auto md = open("report.md");
  md << "# Correlation mining report\n\n";
  md << "- Distinct patterns: " << counts.global.size() << "\n";
  md << "- Total occurrences: " << counts.total << "\n";
  md << "- Skipped sentences (no parse): " << counts.skipped_sentences
     << "\n\n";
  if (counts.global.empty()) {
    md << "No patterns were extracted.\n";
    return;
  }
  md << "## Coverage by top fraction of patterns\n\n";
  md << "| fraction | coverage |\n|---|---|\n";
  for (int pct = 10; pct <= 100; pct += 10) {
    std::snprintf(buf, sizeof(buf), "| %.2f | %.4f |\n", pct / 100.0,
                  coverage_stats(counts, pct / 100.0));
    md << buf;
  }
  md << "\n## Most frequent patterns\n\n";
  md << "| pattern | count | share |\n|---|---|---|\n";
  const auto order = ranked(counts.global);
  for (std::size_t i = 0;
       i < order.size() && i < static_cast<std::size_t>(top_k); ++i) {
    std::snprintf(buf, sizeof(buf), " %.2f%% |\n",
                  100.0 * static_cast<double>(order[i].second) /
                      static_cast<double>(counts.total));
    md << "| " << order[i].first << " | " << order[i].second << " |" << buf;
  }
  md << "\n## Top patterns per emotion\n\n";
  md << "| emotion | total |";
  for (int r = 1; r <= top_k; ++r) md << " top" << r << " |";
  md << "\n|---|---|";
  for (int r = 1; r <= top_k; ++r) md << "---|";
  md << "\n";
  for (const auto& label : emotion_labels()) {
    auto it = counts.per_emotion.find(label);
    if (it == counts.per_emotion.end()) continue;
    long long total = 0;
    for (const auto& [key, n] : it->second) total += n;
    md << "| " << label << " | " << total << " |";
    const auto top = per_emotion_top(counts, label, top_k);
    for (int r = 0; r < top_k; ++r) {
      if (r < static_cast<int>(top.size())) {
        std::snprintf(buf, sizeof(buf), " %s(%.2f) |", top[r].first.c_str(),
                      top[r].second);
        md << buf;
      } else {
        md << " |";
      }
    }
    md << "\n";
  }
}

}  // namespace escm
