// tests/stno_test.cc

#include <cstdio>
#include <set>
#include <string>
#include <vector>

#include "doctest.h"
#include "saasr/rng.h"
#include "saasr/stno.h"

using saasr::DiarizationSegment;
using saasr::StnoMask;

namespace {

DiarizationSegment seg(const std::string& spk, double start, double end) {
  return {"rec", spk, start, end, ""};
}

// Independent reference: build the active-speaker set per frame midpoint from
// first principles, then classify.
int oracle_class(const std::vector<DiarizationSegment>& segments, const std::string& target,
                 double mid) {
  std::set<std::string> active;
  for (const auto& s : segments)
    if (s.start_s <= mid && mid < s.end_s) active.insert(s.speaker_id);
  const bool tgt = active.count(target) > 0;
  const size_t others = active.size() - (tgt ? 1 : 0);
  if (tgt && others > 0) return saasr::kOverlap;
  if (tgt) return saasr::kTargetOnly;
  if (others > 0) return saasr::kNonTarget;
  return saasr::kSilence;
}

}  // namespace

TEST_CASE("no segments gives all-silence") {
  auto m = saasr::compute_stno({}, "a", 0.0, 10.0, 10, 1.0);
  for (int t = 0; t < 10; ++t) {
    CHECK(m.class_at(t) == saasr::kSilence);
    CHECK(m.prob(t, saasr::kSilence) == 1.0f);
  }
}

TEST_CASE("single full-window target segment gives all-target") {
  auto m = saasr::compute_stno({seg("a", 0.0, 10.0)}, "a", 0.0, 10.0, 10, 1.0);
  for (int t = 0; t < 10; ++t) CHECK(m.class_at(t) == saasr::kTargetOnly);
}

TEST_CASE("target and interfering speaker partition the window into T O N S") {
  std::vector<DiarizationSegment> segs{seg("a", 0.0, 4.0), seg("b", 2.0, 6.0)};
  auto m = saasr::compute_stno(segs, "a", 0.0, 10.0, 10, 1.0);
  const int expected[10] = {saasr::kTargetOnly, saasr::kTargetOnly, saasr::kOverlap,
                            saasr::kOverlap,    saasr::kNonTarget,  saasr::kNonTarget,
                            saasr::kSilence,    saasr::kSilence,    saasr::kSilence,
                            saasr::kSilence};
  for (int t = 0; t < 10; ++t) CHECK(m.class_at(t) == expected[t]);
}

TEST_CASE("classification matches the membership oracle on random layouts") {
  saasr::Rng rng(311);
  const std::vector<std::string> speakers{"s0", "s1", "s2"};
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<DiarizationSegment> segs;
    for (const auto& spk : speakers) {
      double cursor = rng.uniform(0.0, 3.0);
      while (cursor < 18.0) {
        const double len = rng.uniform(0.5, 4.0);
        segs.push_back(seg(spk, cursor, cursor + len));
        cursor += len + rng.uniform(0.2, 3.0);
      }
    }
    const std::string target = speakers[static_cast<size_t>(rng.uniform_int(0, 2))];
    auto m = saasr::compute_stno(segs, target, 0.0, 20.0, 100, 0.2);
    for (int t = 0; t < 100; ++t) {
      const double mid = (t + 0.5) * 0.2;
      CHECK(m.class_at(t) == oracle_class(segs, target, mid));
      float row_sum = 0.0f;
      int ones = 0;
      for (int c = 0; c < 4; ++c) {
        row_sum += m.prob(t, c);
        if (m.prob(t, c) == 1.0f) ++ones;
      }
      CHECK(row_sum == 1.0f);
      CHECK(ones == 1);
    }
  }
}

TEST_CASE("segment boundary on a frame midpoint resolves half-open") {
  // Midpoint of frame 1 is exactly 1.5; a segment ending at 1.5 excludes it,
  // a segment starting at 1.5 includes it.
  auto ends = saasr::compute_stno({seg("a", 0.0, 1.5)}, "a", 0.0, 3.0, 3, 1.0);
  CHECK(ends.class_at(0) == saasr::kTargetOnly);
  CHECK(ends.class_at(1) == saasr::kSilence);
  auto starts = saasr::compute_stno({seg("a", 1.5, 3.0)}, "a", 0.0, 3.0, 3, 1.0);
  CHECK(starts.class_at(1) == saasr::kTargetOnly);
  CHECK(starts.class_at(0) == saasr::kSilence);
}

TEST_CASE("swapping target and interferer swaps T and N, fixes S and O") {
  saasr::Rng rng(77);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<DiarizationSegment> segs;
    for (const auto& spk : {"a", "b"}) {
      double cursor = rng.uniform(0.0, 2.0);
      while (cursor < 9.0) {
        const double len = rng.uniform(0.4, 3.0);
        segs.push_back(seg(spk, cursor, cursor + len));
        cursor += len + rng.uniform(0.1, 2.0);
      }
    }
    auto ma = saasr::compute_stno(segs, "a", 0.0, 10.0, 50, 0.2);
    auto mb = saasr::compute_stno(segs, "b", 0.0, 10.0, 50, 0.2);
    for (int t = 0; t < 50; ++t) {
      const int ca = ma.class_at(t), cb = mb.class_at(t);
      if (ca == saasr::kSilence || ca == saasr::kOverlap)
        CHECK(cb == ca);
      else if (ca == saasr::kTargetOnly)
        CHECK(cb == saasr::kNonTarget);
      else
        CHECK(cb == saasr::kTargetOnly);
    }
  }
}

TEST_CASE("frame count follows the request, frames beyond annotations are silence") {
  auto m = saasr::compute_stno({seg("a", 0.0, 2.0)}, "a", 0.0, 30.0, 150, 0.2);
  CHECK(m.frames == 150);
  CHECK(static_cast<int>(m.probs.size()) == 150 * 4);
  CHECK(m.class_at(149) == saasr::kSilence);
}

TEST_CASE("per-speaker masks follow the provided order") {
  std::vector<DiarizationSegment> segs{seg("x", 0.0, 5.0), seg("y", 5.0, 10.0)};
  auto masks = saasr::stno_for_all_speakers(segs, {"x", "y"}, 0.0, 10.0, 10, 1.0, 8);
  REQUIRE(masks.size() == 2);
  CHECK(masks[0].speaker_index == 0);
  CHECK(masks[1].speaker_index == 1);
  for (int t = 0; t < 5; ++t) {
    CHECK(masks[0].class_at(t) == saasr::kTargetOnly);
    CHECK(masks[1].class_at(t) == saasr::kNonTarget);
  }
  for (int t = 5; t < 10; ++t) {
    CHECK(masks[0].class_at(t) == saasr::kNonTarget);
    CHECK(masks[1].class_at(t) == saasr::kTargetOnly);
  }
}

TEST_CASE("fully overlapped speakers are overlap for both") {
  std::vector<DiarizationSegment> segs{seg("x", 0.0, 10.0), seg("y", 0.0, 10.0)};
  auto masks = saasr::stno_for_all_speakers(segs, {"x", "y"}, 0.0, 10.0, 10, 1.0, 8);
  for (const auto& m : masks)
    for (int t = 0; t < 10; ++t) CHECK(m.class_at(t) == saasr::kOverlap);
}

TEST_CASE("speaker inventory errors") {
  CHECK_THROWS_AS((void)saasr::stno_for_all_speakers({}, {}, 0.0, 1.0, 1, 1.0, 8),
                  saasr::ConfigError);
  std::vector<std::string> many{"a", "b", "c"};
  CHECK_THROWS_AS((void)saasr::stno_for_all_speakers({}, many, 0.0, 1.0, 1, 1.0, 2),
                  saasr::ConfigError);
}

TEST_CASE("speaker order is first onset with lexicographic ties") {
  std::vector<DiarizationSegment> segs{seg("zeta", 1.0, 2.0), seg("beta", 0.5, 1.5),
                                       seg("alpha", 1.0, 3.0), seg("beta", 4.0, 5.0)};
  auto order = saasr::first_onset_speaker_order(segs);
  REQUIRE(order.size() == 3);
  CHECK(order[0] == "beta");
  CHECK(order[1] == "alpha");
  CHECK(order[2] == "zeta");
}

TEST_CASE("validator rejects self-overlap and bad spans") {
  CHECK_THROWS_AS(saasr::validate_segments({seg("a", 2.0, 1.0)}), saasr::ConfigError);
  CHECK_THROWS_AS(saasr::validate_segments({seg("a", 0.0, 2.0), seg("a", 1.0, 3.0)}),
                  saasr::ConfigError);
  // Different speakers may overlap, the same speaker may touch.
  CHECK_NOTHROW(saasr::validate_segments({seg("a", 0.0, 2.0), seg("b", 1.0, 3.0)}));
  CHECK_NOTHROW(saasr::validate_segments({seg("a", 0.0, 2.0), seg("a", 2.0, 3.0)}));
}

TEST_CASE("segments survive a JSONL round trip") {
  std::vector<DiarizationSegment> segs{{"r1", "spk a", 0.25, 1.75, "hello there"},
                                       {"r2", "spk_b", 3.0, 4.5, ""}};
  const std::string path = "stno_roundtrip_test.jsonl";
  saasr::save_segments_jsonl(path, segs);
  auto back = saasr::load_segments_jsonl(path);
  REQUIRE(back.size() == segs.size());
  for (size_t i = 0; i < segs.size(); ++i) {
    CHECK(back[i].recording_id == segs[i].recording_id);
    CHECK(back[i].speaker_id == segs[i].speaker_id);
    CHECK(back[i].start_s == segs[i].start_s);
    CHECK(back[i].end_s == segs[i].end_s);
    CHECK(back[i].text == segs[i].text);
  }
  std::remove(path.c_str());
}
