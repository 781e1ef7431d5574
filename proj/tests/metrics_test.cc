// tests/metrics_test.cc

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "saasr/metrics.h"
#include "saasr/rng.h"
#include "test_support.h"

using saasr::EvalReport;
using saasr::TimedWord;
using saasr::TranscriptSet;

namespace {

std::vector<std::string> split(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string w;
  while (ss >> w) out.push_back(w);
  return out;
}

std::vector<TimedWord> stream(const std::string& words, double start = 0.0, double step = 1.0) {
  std::vector<TimedWord> out;
  double t = start;
  for (const auto& w : split(words)) {
    out.push_back({w, t, t + step, true});
    t += step;
  }
  return out;
}

// Independent reference: classic prefix-formulation Levenshtein distance.
int lev_distance(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  std::vector<std::vector<int>> d(a.size() + 1, std::vector<int>(b.size() + 1, 0));
  for (size_t i = 0; i <= a.size(); ++i) d[i][0] = static_cast<int>(i);
  for (size_t j = 0; j <= b.size(); ++j) d[0][j] = static_cast<int>(j);
  for (size_t i = 1; i <= a.size(); ++i)
    for (size_t j = 1; j <= b.size(); ++j)
      d[i][j] = std::min({d[i - 1][j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1), d[i - 1][j] + 1,
                          d[i][j - 1] + 1});
  return d[a.size()][b.size()];
}

std::vector<std::string> random_words(saasr::Rng& rng, int max_len) {
  static const std::vector<std::string> pool{"a", "b", "c", "d", "e", "f"};
  std::vector<std::string> out;
  const int len = static_cast<int>(rng.uniform_int(0, max_len));
  for (int i = 0; i < len; ++i)
    out.push_back(pool[static_cast<size_t>(rng.uniform_int(0, pool.size() - 1))]);
  return out;
}

}  // namespace

TEST_CASE("wer alignment on the hand-solved cases") {
  auto same = saasr::wer_align(split("a b c"), split("a b c"));
  CHECK(same.sub == 0);
  CHECK(same.del == 0);
  CHECK(same.ins == 0);
  CHECK(same.matches == 3);

  auto suffix = saasr::wer_align(split("a b c"), split("a b"));
  CHECK(suffix.sub == 0);
  CHECK(suffix.del == 1);
  CHECK(suffix.ins == 0);

  auto mixed = saasr::wer_align(split("a b c"), split("x b c d"));
  CHECK(mixed.sub == 1);
  CHECK(mixed.del == 0);
  CHECK(mixed.ins == 1);

  auto empty = saasr::wer_align({}, {});
  CHECK(empty.errors() == 0);
}

TEST_CASE("alignment totals equal the independent distance and replay to hyp") {
  saasr::Rng rng(515);
  for (int trial = 0; trial < 300; ++trial) {
    auto ref = random_words(rng, 12);
    auto hyp = random_words(rng, 12);
    auto al = saasr::wer_align(ref, hyp);
    CHECK(al.errors() == lev_distance(ref, hyp));
    // Replaying the script must reproduce hyp from ref.
    std::vector<std::string> rebuilt;
    for (const auto& step : al.script) {
      if (step.op == saasr::EditOp::kMatch)
        rebuilt.push_back(ref[static_cast<size_t>(step.ref_pos)]);
      else if (step.op == saasr::EditOp::kSub || step.op == saasr::EditOp::kIns)
        rebuilt.push_back(hyp[static_cast<size_t>(step.hyp_pos)]);
    }
    CHECK(rebuilt == hyp);
  }
}

TEST_CASE("assignment solver equals exhaustive search on 500 instances") {
  saasr::Rng rng(8080);
  for (int trial = 0; trial < 500; ++trial) {
    const int n = 1 + static_cast<int>(rng.uniform_int(0, 4));
    std::vector<std::vector<double>> cost(static_cast<size_t>(n),
                                          std::vector<double>(static_cast<size_t>(n)));
    for (auto& row : cost)
      for (auto& c : row) c = static_cast<double>(rng.uniform_int(0, 40));
    std::vector<int> assign;
    const double fast = saasr::solve_assignment(cost, &assign);
    const double slow = test_support::brute_force_assignment(cost);
    CHECK(fast == slow);
    // The returned assignment must realize the reported total.
    double realized = 0.0;
    std::vector<bool> used(static_cast<size_t>(n), false);
    for (int i = 0; i < n; ++i) {
      REQUIRE(assign[static_cast<size_t>(i)] >= 0);
      CHECK_FALSE(used[static_cast<size_t>(assign[static_cast<size_t>(i)])]);
      used[static_cast<size_t>(assign[static_cast<size_t>(i)])] = true;
      realized += cost[static_cast<size_t>(i)][static_cast<size_t>(assign[static_cast<size_t>(i)])];
    }
    CHECK(realized == fast);
  }
}

TEST_CASE("permuted labels score zero") {
  TranscriptSet ref{{"A", stream("the quick fox")}, {"B", stream("lazy dog")}};
  TranscriptSet hyp{{"zz", stream("the quick fox")}, {"aa", stream("lazy dog")}};
  std::swap(hyp["zz"], hyp["aa"]);
  auto r = saasr::evaluate_transcripts(ref, hyp);
  CHECK(r.cpwer == 0.0);
  CHECK(r.sub + r.del + r.ins == 0);
}

TEST_CASE("hand-worked two-speaker case: one deletion plus one insertion") {
  TranscriptSet ref{{"A", stream("a b c")}, {"B", stream("d e")}};
  TranscriptSet hyp{{"1", stream("a b")}, {"2", stream("d e f")}};
  auto r = saasr::evaluate_transcripts(ref, hyp);
  CHECK(r.del == 1);
  CHECK(r.ins == 1);
  CHECK(r.sub == 0);
  CHECK(r.cpwer == doctest::Approx(0.4));
  REQUIRE(r.assignment.size() == 2);
  CHECK(r.assignment[0] == std::pair<std::string, std::string>{"A", "1"});
  CHECK(r.assignment[1] == std::pair<std::string, std::string>{"B", "2"});
}

TEST_CASE("an extra all-empty hypothesis speaker changes nothing") {
  TranscriptSet ref{{"A", stream("a b c")}, {"B", stream("d e")}};
  TranscriptSet hyp{{"1", stream("a b")}, {"2", stream("d e f")}};
  auto base = saasr::evaluate_transcripts(ref, hyp);
  hyp["3"] = {};
  auto padded = saasr::evaluate_transcripts(ref, hyp);
  CHECK(padded.cpwer == base.cpwer);
  CHECK(padded.sub == base.sub);
  CHECK(padded.del == base.del);
  CHECK(padded.ins == base.ins);
}

TEST_CASE("self-evaluation is exactly zero on random transcript sets") {
  saasr::Rng rng(616);
  for (int trial = 0; trial < 50; ++trial) {
    TranscriptSet x;
    const int speakers = 1 + static_cast<int>(rng.uniform_int(0, 3));
    for (int u = 0; u < speakers; ++u) {
      std::vector<TimedWord> words;
      for (const auto& w : random_words(rng, 8)) words.push_back({w, 0.0, 1.0, true});
      x[saasr::str_cat("spk", u)] = words;
    }
    auto r = saasr::evaluate_transcripts(x, x);
    CHECK(r.cpwer == 0.0);
  }
}

TEST_CASE("relabeling hypothesis speakers never changes the score") {
  saasr::Rng rng(717);
  for (int trial = 0; trial < 30; ++trial) {
    TranscriptSet ref, hyp;
    const int speakers = 1 + static_cast<int>(rng.uniform_int(0, 3));
    for (int u = 0; u < speakers; ++u) {
      ref[saasr::str_cat("r", u)] = stream("a b c d");
      std::vector<TimedWord> words;
      for (const auto& w : random_words(rng, 6)) words.push_back({w, 0.0, 1.0, true});
      hyp[saasr::str_cat("h", u)] = words;
    }
    auto base = saasr::evaluate_transcripts(ref, hyp);
    TranscriptSet relabeled;
    int k = 9;
    for (const auto& [_, words] : hyp) relabeled[saasr::str_cat("x", k--)] = words;
    auto again = saasr::evaluate_transcripts(ref, relabeled);
    CHECK(base.cpwer == again.cpwer);
    CHECK(base.sub == again.sub);
    CHECK(base.del == again.del);
    CHECK(base.ins == again.ins);
  }
}

TEST_CASE("cpwer equals the exhaustive minimum over label bijections") {
  saasr::Rng rng(818);
  for (int trial = 0; trial < 60; ++trial) {
    TranscriptSet ref, hyp;
    const int nr = 1 + static_cast<int>(rng.uniform_int(0, 2));
    const int nh = 1 + static_cast<int>(rng.uniform_int(0, 2));
    long ref_words = 0;
    std::vector<std::vector<std::string>> ref_w, hyp_w;
    for (int u = 0; u < nr; ++u) {
      auto words = random_words(rng, 7);
      ref_words += static_cast<long>(words.size());
      ref_w.push_back(words);
      std::vector<TimedWord> tws;
      for (const auto& w : words) tws.push_back({w, 0.0, 1.0, true});
      ref[saasr::str_cat("r", u)] = tws;
    }
    for (int u = 0; u < nh; ++u) {
      auto words = random_words(rng, 7);
      hyp_w.push_back(words);
      std::vector<TimedWord> tws;
      for (const auto& w : words) tws.push_back({w, 0.0, 1.0, true});
      hyp[saasr::str_cat("h", u)] = tws;
    }
    if (ref_words == 0) continue;
    const int n = std::max(nr, nh);
    ref_w.resize(static_cast<size_t>(n));
    hyp_w.resize(static_cast<size_t>(n));
    std::vector<std::vector<double>> cost(static_cast<size_t>(n),
                                          std::vector<double>(static_cast<size_t>(n)));
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        cost[static_cast<size_t>(i)][static_cast<size_t>(j)] =
            lev_distance(ref_w[static_cast<size_t>(i)], hyp_w[static_cast<size_t>(j)]);
    const double expected = test_support::brute_force_assignment(cost) / ref_words;
    auto r = saasr::evaluate_transcripts(ref, hyp);
    CHECK(r.cpwer == doctest::Approx(expected).epsilon(1e-12));
  }
}

TEST_CASE("empty reference is flagged rather than scored") {
  TranscriptSet ref{{"A", {}}};
  TranscriptSet hyp{{"1", stream("a b")}};
  auto r = saasr::evaluate_transcripts(ref, hyp);
  CHECK(r.empty_reference);
  CHECK(r.ref_words == 0);
}

TEST_CASE("perfect transcript has zero leakage and omission") {
  TranscriptSet ref{{"A", stream("hello world")}, {"B", stream("good day")}};
  auto r = saasr::evaluate_transcripts(ref, ref);
  CHECK(r.leakage == 0);
  CHECK(r.omission == 0);
}

TEST_CASE("word attributed to the wrong speaker counts as leakage") {
  TranscriptSet ref{{"A", stream("hello there boom", 0.0)}, {"B", stream("world", 0.0)}};
  TranscriptSet hyp{{"X", stream("hello there", 0.0)}, {"Y", stream("world boom", 0.0)}};
  // boom sits at [2,3]s in ref A and [1,2]s in hyp Y, inside the 2 s gate.
  auto r = saasr::evaluate_transcripts(ref, hyp);
  CHECK(r.del == 1);
  CHECK(r.ins == 1);
  CHECK(r.leakage == 1);
  CHECK(r.omission == 0);
  CHECK(r.leakage_pct == doctest::Approx(25.0));
}

TEST_CASE("word missed entirely counts as omission") {
  TranscriptSet ref{{"A", stream("hello there boom")}, {"B", stream("world")}};
  TranscriptSet hyp{{"X", stream("hello there")}, {"Y", stream("world")}};
  auto r = saasr::evaluate_transcripts(ref, hyp);
  CHECK(r.del == 1);
  CHECK(r.leakage == 0);
  CHECK(r.omission == 1);
}

TEST_CASE("cross-speaker match outside the time gate is omission, not leakage") {
  TranscriptSet ref{{"A", {{"hello", 0, 1, true}, {"boom", 2, 3, true}}},
                    {"B", {{"world", 0, 1, true}}}};
  TranscriptSet hyp{{"X", {{"hello", 0, 1, true}}},
                    {"Y", {{"world", 0, 1, true}, {"boom", 10, 11, true}}}};
  auto r = saasr::evaluate_transcripts(ref, hyp);
  CHECK(r.leakage == 0);
  CHECK(r.omission == 1);
}

TEST_CASE("missing timing falls back to identity matching and is flagged") {
  TranscriptSet ref{{"A", {{"hello", 0, 1, true}, {"boom", 0, 0, false}}},
                    {"B", {{"world", 0, 1, true}}}};
  TranscriptSet hyp{{"X", {{"hello", 0, 1, true}}},
                    {"Y", {{"world", 0, 1, true}, {"boom", 50, 51, true}}}};
  auto r = saasr::evaluate_transcripts(ref, hyp);
  CHECK_FALSE(r.time_gate_used);
  CHECK(r.leakage == 1);  // identity-only matching ignores the far-away time
}

TEST_CASE("decomposition conserves deletions on random cases") {
  saasr::Rng rng(919);
  for (int trial = 0; trial < 40; ++trial) {
    TranscriptSet ref, hyp;
    for (int u = 0; u < 3; ++u) {
      std::vector<TimedWord> rw, hw;
      double t = 0;
      for (const auto& w : random_words(rng, 10)) {
        rw.push_back({w, t, t + 1, true});
        t += 1;
      }
      t = 0;
      for (const auto& w : random_words(rng, 10)) {
        hw.push_back({w, t, t + 1, true});
        t += 1;
      }
      ref[saasr::str_cat("r", u)] = rw;
      hyp[saasr::str_cat("h", u)] = hw;
    }
    auto r = saasr::evaluate_transcripts(ref, hyp);
    CHECK(r.leakage + r.omission == r.del);
    CHECK(r.leakage >= 0);
    CHECK(r.omission >= 0);
  }
}

TEST_CASE("normalization lowercases and strips punctuation") {
  CHECK(saasr::normalize_word("Hello,") == "hello");
  CHECK(saasr::normalize_word("DON'T") == "don't");
  CHECK(saasr::normalize_word("--") == "");
  TranscriptSet ref{{"A", stream("Hello world")}};
  TranscriptSet hyp{{"1", stream("hello, WORLD!")}};
  CHECK(saasr::evaluate_transcripts(ref, hyp).cpwer == 0.0);
  saasr::EvalOptions raw;
  raw.normalize = false;
  CHECK(saasr::evaluate_transcripts(ref, hyp, raw).cpwer > 0.0);
}

TEST_CASE("report JSON carries counts and CSV output is deterministic") {
  TranscriptSet ref{{"A", stream("a b c d")}, {"B", stream("e f")}};
  TranscriptSet hyp{{"1", stream("a b x d")}, {"2", stream("e")}};
  auto r = saasr::evaluate_transcripts(ref, hyp);
  auto json = saasr::report_to_json(r);
  CHECK(json.find("\"cpwer\"") != std::string::npos);
  CHECK(json.find("\"assignment\"") != std::string::npos);

  std::vector<std::pair<std::string, EvalReport>> rows{{"rec1", r}, {"rec2", r}};
  saasr::write_reports_csv("metrics_test.csv", rows);
  std::ifstream f1("metrics_test.csv");
  std::stringstream s1;
  s1 << f1.rdbuf();
  saasr::write_reports_csv("metrics_test.csv", rows);
  std::ifstream f2("metrics_test.csv");
  std::stringstream s2;
  s2 << f2.rdbuf();
  CHECK(s1.str() == s2.str());
  CHECK(s1.str().rfind("recording,cpWER,S,D,I,L,O\n", 0) == 0);
  CHECK(s1.str().find("TOTAL,") != std::string::npos);
  std::remove("metrics_test.csv");
}
