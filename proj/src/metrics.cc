// saasr/metrics.cc

#include "saasr/metrics.h"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <limits>

#include "json.hpp"

namespace saasr {

Alignment wer_align(const std::vector<std::string>& ref, const std::vector<std::string>& hyp) {
  const int r = static_cast<int>(ref.size()), h = static_cast<int>(hyp.size());
  // dp[i][j] = cost of aligning ref[i:] with hyp[j:], so the backtrace walks
  // forward and emits the script left to right.
  std::vector<std::vector<int>> dp(static_cast<size_t>(r) + 1,
                                   std::vector<int>(static_cast<size_t>(h) + 1, 0));
  for (int i = r - 1; i >= 0; --i) dp[static_cast<size_t>(i)][static_cast<size_t>(h)] = r - i;
  for (int j = h - 1; j >= 0; --j) dp[static_cast<size_t>(r)][static_cast<size_t>(j)] = h - j;
  for (int i = r - 1; i >= 0; --i)
    for (int j = h - 1; j >= 0; --j) {
      const int diag = dp[static_cast<size_t>(i) + 1][static_cast<size_t>(j) + 1] +
                       (ref[static_cast<size_t>(i)] == hyp[static_cast<size_t>(j)] ? 0 : 1);
      const int del = dp[static_cast<size_t>(i) + 1][static_cast<size_t>(j)] + 1;
      const int ins = dp[static_cast<size_t>(i)][static_cast<size_t>(j) + 1] + 1;
      dp[static_cast<size_t>(i)][static_cast<size_t>(j)] = std::min({diag, del, ins});
    }

  Alignment out;
  int i = 0, j = 0;
  while (i < r || j < h) {
    const int cur = dp[static_cast<size_t>(i)][static_cast<size_t>(j)];
    if (i < r && j < h && ref[static_cast<size_t>(i)] == hyp[static_cast<size_t>(j)] &&
        cur == dp[static_cast<size_t>(i) + 1][static_cast<size_t>(j) + 1]) {
      out.script.push_back({EditOp::kMatch, i, j});
      ++out.matches;
      ++i, ++j;
    } else if (i < r && j < h &&
               cur == dp[static_cast<size_t>(i) + 1][static_cast<size_t>(j) + 1] + 1) {
      out.script.push_back({EditOp::kSub, i, j});
      ++out.sub;
      ++i, ++j;
    } else if (i < r && cur == dp[static_cast<size_t>(i) + 1][static_cast<size_t>(j)] + 1) {
      out.script.push_back({EditOp::kDel, i, -1});
      ++out.del;
      ++i;
    } else {
      out.script.push_back({EditOp::kIns, -1, j});
      ++out.ins;
      ++j;
    }
  }
  return out;
}

double solve_assignment(const std::vector<std::vector<double>>& cost, std::vector<int>* assign) {
  const int n = static_cast<int>(cost.size());
  SAASR_REQUIRE(n > 0, DimensionError, "assignment needs a non-empty matrix");
  for (const auto& row : cost)
    SAASR_REQUIRE(static_cast<int>(row.size()) == n, DimensionError,
                  "assignment matrix must be square");
  constexpr double kInf = std::numeric_limits<double>::infinity();
  // Potential-based shortest augmenting paths, 1-indexed with column 0 as the
  // virtual source.
  std::vector<double> u(static_cast<size_t>(n) + 1, 0.0), v(static_cast<size_t>(n) + 1, 0.0);
  std::vector<int> p(static_cast<size_t>(n) + 1, 0), way(static_cast<size_t>(n) + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<size_t>(n) + 1, kInf);
    std::vector<char> used(static_cast<size_t>(n) + 1, 0);
    do {
      used[static_cast<size_t>(j0)] = 1;
      const int i0 = p[static_cast<size_t>(j0)];
      int j1 = -1;
      double delta = kInf;
      for (int j = 1; j <= n; ++j) {
        if (used[static_cast<size_t>(j)]) continue;
        const double cur = cost[static_cast<size_t>(i0) - 1][static_cast<size_t>(j) - 1] -
                           u[static_cast<size_t>(i0)] - v[static_cast<size_t>(j)];
        if (cur < minv[static_cast<size_t>(j)]) {
          minv[static_cast<size_t>(j)] = cur;
          way[static_cast<size_t>(j)] = j0;
        }
        if (minv[static_cast<size_t>(j)] < delta) {
          delta = minv[static_cast<size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[static_cast<size_t>(j)]) {
          u[static_cast<size_t>(p[static_cast<size_t>(j)])] += delta;
          v[static_cast<size_t>(j)] -= delta;
        } else {
          minv[static_cast<size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<size_t>(j0)];
      p[static_cast<size_t>(j0)] = p[static_cast<size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }
  assign->assign(static_cast<size_t>(n), -1);
  double total = 0.0;
  for (int j = 1; j <= n; ++j) {
    const int i = p[static_cast<size_t>(j)];
    (*assign)[static_cast<size_t>(i) - 1] = j - 1;
    total += cost[static_cast<size_t>(i) - 1][static_cast<size_t>(j) - 1];
  }
  return total;
}

std::string normalize_word(const std::string& word) {
  std::string out;
  for (char ch : word) {
    const unsigned char c = static_cast<unsigned char>(ch);
    if (std::isalnum(c) || c == '\'') out += static_cast<char>(std::tolower(c));
  }
  return out;
}

namespace {

std::vector<TimedWord> normalized_stream(const std::vector<TimedWord>& in, bool normalize) {
  if (!normalize) return in;
  std::vector<TimedWord> out;
  out.reserve(in.size());
  for (const auto& w : in) {
    auto norm = normalize_word(w.word);
    if (norm.empty()) continue;
    TimedWord t = w;
    t.word = std::move(norm);
    out.push_back(std::move(t));
  }
  return out;
}

std::vector<std::string> words_only(const std::vector<TimedWord>& stream) {
  std::vector<std::string> out;
  out.reserve(stream.size());
  for (const auto& w : stream) out.push_back(w.word);
  return out;
}

struct LooseWord {
  std::string word;
  std::string label;   // owning speaker label (ref label for dels, hyp label for ins)
  std::string partner; // for insertions: the ref label their stream was assigned to
  double start_s, end_s;
  bool has_time;
  int position;
};

}  // namespace

EvalReport evaluate_transcripts(const TranscriptSet& ref, const TranscriptSet& hyp,
                                const EvalOptions& options) {
  std::vector<std::string> ref_labels, hyp_labels;
  std::vector<std::vector<TimedWord>> ref_streams, hyp_streams;
  for (const auto& [label, words] : ref) {
    ref_labels.push_back(label);
    ref_streams.push_back(normalized_stream(words, options.normalize));
  }
  for (const auto& [label, words] : hyp) {
    hyp_labels.push_back(label);
    hyp_streams.push_back(normalized_stream(words, options.normalize));
  }
  const int n = std::max(static_cast<int>(ref_labels.size()), static_cast<int>(hyp_labels.size()));
  EvalReport report;
  for (const auto& s : ref_streams) report.ref_words += static_cast<long>(s.size());
  if (n == 0) {
    report.empty_reference = true;
    return report;
  }
  while (static_cast<int>(ref_streams.size()) < n) {
    ref_labels.emplace_back();
    ref_streams.emplace_back();
  }
  while (static_cast<int>(hyp_streams.size()) < n) {
    hyp_labels.emplace_back();
    hyp_streams.emplace_back();
  }

  std::vector<std::vector<Alignment>> aligned(static_cast<size_t>(n),
                                              std::vector<Alignment>(static_cast<size_t>(n)));
  std::vector<std::vector<double>> cost(static_cast<size_t>(n),
                                        std::vector<double>(static_cast<size_t>(n)));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      aligned[static_cast<size_t>(i)][static_cast<size_t>(j)] =
          wer_align(words_only(ref_streams[static_cast<size_t>(i)]),
                    words_only(hyp_streams[static_cast<size_t>(j)]));
      cost[static_cast<size_t>(i)][static_cast<size_t>(j)] =
          aligned[static_cast<size_t>(i)][static_cast<size_t>(j)].errors();
    }
  std::vector<int> assign;
  solve_assignment(cost, &assign);

  std::vector<LooseWord> deletions, insertions;
  for (int i = 0; i < n; ++i) {
    const int j = assign[static_cast<size_t>(i)];
    const auto& al = aligned[static_cast<size_t>(i)][static_cast<size_t>(j)];
    report.sub += al.sub;
    report.del += al.del;
    report.ins += al.ins;
    if (!ref_labels[static_cast<size_t>(i)].empty() || !hyp_labels[static_cast<size_t>(j)].empty())
      report.assignment.emplace_back(ref_labels[static_cast<size_t>(i)],
                                     hyp_labels[static_cast<size_t>(j)]);
    for (const auto& step : al.script) {
      if (step.op == EditOp::kDel) {
        const auto& w = ref_streams[static_cast<size_t>(i)][static_cast<size_t>(step.ref_pos)];
        deletions.push_back({w.word, ref_labels[static_cast<size_t>(i)], "", w.start_s, w.end_s,
                             w.has_time, step.ref_pos});
      } else if (step.op == EditOp::kIns) {
        const auto& w = hyp_streams[static_cast<size_t>(j)][static_cast<size_t>(step.hyp_pos)];
        insertions.push_back({w.word, hyp_labels[static_cast<size_t>(j)],
                              ref_labels[static_cast<size_t>(i)], w.start_s, w.end_s, w.has_time,
                              step.hyp_pos});
      }
    }
  }
  std::sort(report.assignment.begin(), report.assignment.end());

  if (report.ref_words == 0) {
    report.empty_reference = true;
    report.cpwer = 0.0;
    return report;
  }
  report.cpwer = static_cast<double>(report.sub + report.del + report.ins) /
                 static_cast<double>(report.ref_words);

  // Leakage: a deleted reference word reappearing as an insertion under a
  // different speaker within the time gate. Greedy earliest-first matching.
  bool all_timed = true;
  for (const auto& w : deletions) all_timed = all_timed && w.has_time;
  for (const auto& w : insertions) all_timed = all_timed && w.has_time;
  report.time_gate_used = all_timed;

  auto order = [all_timed](const LooseWord& a, const LooseWord& b) {
    if (all_timed && a.start_s != b.start_s) return a.start_s < b.start_s;
    if (a.label != b.label) return a.label < b.label;
    return a.position < b.position;
  };
  std::sort(deletions.begin(), deletions.end(), order);
  std::sort(insertions.begin(), insertions.end(), order);
  std::vector<char> taken(insertions.size(), 0);
  const double gate = options.leakage_time_gate_s;
  for (const auto& d : deletions) {
    for (size_t k = 0; k < insertions.size(); ++k) {
      if (taken[k]) continue;
      const auto& ins = insertions[k];
      if (ins.word != d.word) continue;
      if (ins.partner == d.label) continue;  // same stream, not cross-speaker
      if (all_timed &&
          (ins.start_s > d.end_s + gate || ins.end_s < d.start_s - gate))
        continue;
      taken[k] = 1;
      ++report.leakage;
      break;
    }
  }
  report.omission = report.del - report.leakage;
  report.leakage_pct = 100.0 * static_cast<double>(report.leakage) /
                       static_cast<double>(report.ref_words);
  report.omission_pct = 100.0 * static_cast<double>(report.omission) /
                        static_cast<double>(report.ref_words);
  return report;
}

std::string report_to_json(const EvalReport& report) {
  nlohmann::json j;
  j["cpwer"] = report.cpwer;
  j["sub"] = report.sub;
  j["del"] = report.del;
  j["ins"] = report.ins;
  j["ref_words"] = report.ref_words;
  j["leakage"] = report.leakage;
  j["omission"] = report.omission;
  j["leakage_pct"] = report.leakage_pct;
  j["omission_pct"] = report.omission_pct;
  j["empty_reference"] = report.empty_reference;
  j["time_gate_used"] = report.time_gate_used;
  auto pairs = nlohmann::json::array();
  for (const auto& [r, h] : report.assignment) pairs.push_back({r, h});
  j["assignment"] = pairs;
  return j.dump();
}

void write_reports_csv(const std::string& path,
                       const std::vector<std::pair<std::string, EvalReport>>& reports) {
  std::ofstream out(path, std::ios::trunc);
  SAASR_REQUIRE(out.good(), Error, "cannot open '", path, "' for writing");
  out << "recording,cpWER,S,D,I,L,O\n";
  auto row = [&out](const std::string& name, double cpwer, long s, long d, long i, long l, long o,
                    long ref_words) {
    const double denom = ref_words > 0 ? static_cast<double>(ref_words) : 1.0;
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%s,%.4f,%.4f,%.4f,%.4f,%.4f,%.4f\n", name.c_str(),
                  100.0 * cpwer, 100.0 * static_cast<double>(s) / denom,
                  100.0 * static_cast<double>(d) / denom, 100.0 * static_cast<double>(i) / denom,
                  100.0 * static_cast<double>(l) / denom, 100.0 * static_cast<double>(o) / denom);
    out << buf;
  };
  long sub = 0, del = 0, ins = 0, leak = 0, omit = 0, words = 0;
  for (const auto& [name, r] : reports) {
    row(name, r.cpwer, r.sub, r.del, r.ins, r.leakage, r.omission, r.ref_words);
    sub += r.sub;
    del += r.del;
    ins += r.ins;
    leak += r.leakage;
    omit += r.omission;
    words += r.ref_words;
  }
  const double total_cpwer =
      words > 0 ? static_cast<double>(sub + del + ins) / static_cast<double>(words) : 0.0;
  row("TOTAL", total_cpwer, sub, del, ins, leak, omit, words);
  SAASR_REQUIRE(out.good(), Error, "short write to '", path, "'");
}

}  // namespace saasr
