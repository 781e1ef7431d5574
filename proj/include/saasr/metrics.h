// saasr/metrics.h
//
// Speaker-attributed scoring: word-level edit alignment, minimum-permutation
// assignment between reference and hypothesis speakers, and reclassification
// of cross-speaker errors into leakage and omission.

#pragma once

#include <map>
#include <string>
#include <vector>

#include "saasr/common.h"

namespace saasr {

enum class EditOp { kMatch, kSub, kDel, kIns };

struct EditStep {
  EditOp op;
  int ref_pos;  // -1 for insertions
  int hyp_pos;  // -1 for deletions
};

struct Alignment {
  int sub = 0, del = 0, ins = 0, matches = 0;
  std::vector<EditStep> script;
  int errors() const { return sub + del + ins; }
};

// Levenshtein alignment with unit costs. Equal-cost choices resolve as
// match > substitution > deletion > insertion.
Alignment wer_align(const std::vector<std::string>& ref, const std::vector<std::string>& hyp);

struct TimedWord {
  std::string word;
  double start_s = 0.0;
  double end_s = 0.0;
  bool has_time = false;
};

// speaker label -> that speaker's words in time order
using TranscriptSet = std::map<std::string, std::vector<TimedWord>>;

struct EvalReport {
  double cpwer = 0.0;
  long sub = 0, del = 0, ins = 0;
  long ref_words = 0;
  long leakage = 0, omission = 0;
  double leakage_pct = 0.0, omission_pct = 0.0;
  bool empty_reference = false;
  // False when some word lacked timing and the leakage matcher fell back to
  // word identity alone.
  bool time_gate_used = true;
  // ref label -> hyp label; empty hyp label means the ref speaker was matched
  // against an empty padding stream.
  std::vector<std::pair<std::string, std::string>> assignment;
};

// Exact minimum-cost perfect assignment on a square matrix, O(n^3).
// assign[row] = chosen column.
double solve_assignment(const std::vector<std::vector<double>>& cost, std::vector<int>* assign);

// Lowercases ASCII and strips punctuation, keeping letters, digits and
// apostrophes. Returns the empty string for words that vanish entirely.
std::string normalize_word(const std::string& word);

struct EvalOptions {
  bool normalize = true;
  double leakage_time_gate_s = 2.0;
};

// Minimum-permutation word error rate over speaker bijections, plus the
// leakage/omission split of deletions. Unequal speaker counts are padded
// with empty streams.
EvalReport evaluate_transcripts(const TranscriptSet& ref, const TranscriptSet& hyp,
                                const EvalOptions& options = {});

// One JSON object per recording; keys cpwer, sub, del, ins, leakage,
// omission, ref_words, assignment, flags.
std::string report_to_json(const EvalReport& report);

// Aggregate CSV, one row per recording plus a TOTAL row recomputed from
// summed counts. Error columns are percentages of reference words, columns:
// recording,cpWER,S,D,I,L,O. Fixed formatting keeps reruns byte-identical.
void write_reports_csv(const std::string& path,
                       const std::vector<std::pair<std::string, EvalReport>>& reports);

}  // namespace saasr
