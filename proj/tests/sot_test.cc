// tests/sot_test.cc

#include <algorithm>
#include <cstdio>
#include <string>
#include <vector>

#include "doctest.h"
#include "saasr/rng.h"
#include "saasr/sot.h"

using saasr::AttributedSegment;
using saasr::Vocabulary;

namespace {

Vocabulary toy_vocab() {
  return Vocabulary({"hello", "hi", "a", "b", "there", "friend"}, 4, 151, 30.0);
}

std::vector<AttributedSegment> random_segments(saasr::Rng& rng, const Vocabulary& vocab) {
  std::vector<AttributedSegment> segs;
  const int speakers = 1 + static_cast<int>(rng.uniform_int(0, vocab.num_speakers() - 1));
  for (int u = 0; u < speakers; ++u) {
    int cursor = static_cast<int>(rng.uniform_int(0, 20));
    const int count = static_cast<int>(rng.uniform_int(0, 3));
    for (int k = 0; k < count && cursor < vocab.num_timestamps() - 2; ++k) {
      const int len = static_cast<int>(rng.uniform_int(1, 25));
      const int end = std::min(cursor + len, vocab.num_timestamps() - 1);
      AttributedSegment s;
      s.speaker_index = u;
      s.start_s = vocab.time_of_index(cursor);
      s.end_s = vocab.time_of_index(end);
      const int words = static_cast<int>(rng.uniform_int(0, 4));
      for (int i = 0; i < words; ++i)
        s.word_ids.push_back(static_cast<int>(rng.uniform_int(0, vocab.num_words() - 1)));
      segs.push_back(std::move(s));
      cursor = end + static_cast<int>(rng.uniform_int(1, 10));
    }
  }
  // Presentation order should not matter, shuffle.
  for (size_t i = segs.size(); i > 1; --i)
    std::swap(segs[i - 1], segs[static_cast<size_t>(rng.uniform_int(0, i - 1))]);
  return segs;
}

std::vector<AttributedSegment> fifo_normalize(std::vector<AttributedSegment> segs) {
  std::stable_sort(segs.begin(), segs.end(),
                   [](const AttributedSegment& a, const AttributedSegment& b) {
                     if (a.start_s != b.start_s) return a.start_s < b.start_s;
                     return a.speaker_index < b.speaker_index;
                   });
  return segs;
}

}  // namespace

TEST_CASE("speaker-timestamp ids form a bijection with (speaker, index) pairs") {
  auto vocab = toy_vocab();
  std::vector<bool> hit(static_cast<size_t>(vocab.num_speakers() * vocab.num_timestamps()));
  for (int u = 0; u < vocab.num_speakers(); ++u)
    for (int w = 0; w < vocab.num_timestamps(); ++w) {
      const int id = vocab.speaker_ts_id(u, w);
      CHECK(vocab.is_speaker_ts(id));
      CHECK(vocab.speaker_of(id) == u);
      CHECK(vocab.timestamp_of(id) == w);
      const size_t flat = static_cast<size_t>(id - vocab.num_words());
      CHECK_FALSE(hit[flat]);
      hit[flat] = true;
    }
  CHECK(vocab.total_tokens() ==
        vocab.num_words() + vocab.num_speakers() * vocab.num_timestamps() + 4);
}

TEST_CASE("time quantization rounds to the nearest grid point, half up") {
  auto vocab = toy_vocab();  // resolution 0.2
  CHECK(vocab.quantize_time(0.0) == 0);
  CHECK(vocab.quantize_time(30.0) == 150);
  CHECK(vocab.quantize_time(0.09) == 0);
  CHECK(vocab.quantize_time(0.11) == 1);
  CHECK(vocab.quantize_time(0.1) == 1);  // halfway rounds up
  CHECK_THROWS_AS((void)vocab.quantize_time(-0.01), saasr::IndexError);
  CHECK_THROWS_AS((void)vocab.quantize_time(30.3), saasr::IndexError);

  Vocabulary fine({"x"}, 8, 1501, 30.0);  // resolution 0.02
  CHECK(fine.quantize_time(2.207) == 110);
  CHECK(fine.time_of_index(110) == doctest::Approx(2.20));
}

TEST_CASE("single segment serializes to begin, words, end") {
  auto vocab = toy_vocab();
  AttributedSegment s{0, 0.0, 2.2, {vocab.word_id("hello")}};
  auto tokens = saasr::serialize({s}, vocab);
  REQUIRE(tokens.size() == 3);
  CHECK(tokens[0] == vocab.speaker_ts_id(0, 0));
  CHECK(tokens[1] == vocab.word_id("hello"));
  CHECK(tokens[2] == vocab.speaker_ts_id(0, 11));
  CHECK(vocab.render_stream(tokens) == "<|s0_0.00|> hello <|s0_2.20|>");
}

TEST_CASE("later speaker may roll time back across a speaker change") {
  auto vocab = toy_vocab();
  AttributedSegment a{0, 0.0, 2.2, {vocab.word_id("hello")}};
  AttributedSegment b{1, 1.0, 3.0, {vocab.word_id("hi")}};
  auto tokens = saasr::serialize({b, a}, vocab);
  CHECK(vocab.render_stream(tokens) ==
        "<|s0_0.00|> hello <|s0_2.20|> <|s1_1.00|> hi <|s1_3.00|>");
  CHECK(saasr::validate_stream(tokens, vocab).empty());
}

TEST_CASE("same-speaker timestamps never decrease") {
  auto vocab = toy_vocab();
  AttributedSegment a{0, 0.0, 1.0, {vocab.word_id("a")}};
  AttributedSegment b{0, 2.0, 3.0, {vocab.word_id("b")}};
  auto tokens = saasr::serialize({b, a}, vocab);
  REQUIRE(tokens.size() == 6);
  int prev = -1;
  for (int id : tokens)
    if (vocab.is_speaker_ts(id)) {
      CHECK(vocab.timestamp_of(id) >= prev);
      prev = vocab.timestamp_of(id);
    }
}

TEST_CASE("equal onsets order by ascending speaker index") {
  auto vocab = toy_vocab();
  AttributedSegment a{2, 1.0, 2.0, {}};
  AttributedSegment b{0, 1.0, 3.0, {}};
  auto tokens = saasr::serialize({a, b}, vocab);
  CHECK(vocab.speaker_of(tokens[0]) == 0);
  CHECK(vocab.speaker_of(tokens[2]) == 2);
}

TEST_CASE("serialize rejects out-of-window and self-overlapping segments") {
  auto vocab = toy_vocab();
  CHECK_THROWS_AS((void)saasr::serialize({{0, 0.0, 31.0, {}}}, vocab), saasr::ConfigError);
  CHECK_THROWS_AS((void)saasr::serialize({{0, 0.0, 2.0, {}}, {0, 1.0, 3.0, {}}}, vocab),
                  saasr::ConfigError);
  // Different speakers may overlap freely.
  CHECK_NOTHROW((void)saasr::serialize({{0, 0.0, 2.0, {}}, {1, 1.0, 3.0, {}}}, vocab));
}

TEST_CASE("deserialize inverts serialize and reports defects with positions") {
  auto vocab = toy_vocab();
  CHECK(saasr::deserialize({}, vocab).empty());

  AttributedSegment a{0, 0.0, 2.2, {vocab.word_id("hello")}};
  AttributedSegment b{1, 1.0, 3.0, {vocab.word_id("hi")}};
  auto tokens = saasr::serialize({a, b}, vocab);
  auto back = saasr::deserialize(tokens, vocab);
  REQUIRE(back.size() == 2);
  CHECK(back[0].speaker_index == 0);
  CHECK(back[0].start_s == doctest::Approx(0.0));
  CHECK(back[0].end_s == doctest::Approx(2.2));
  CHECK(back[0].word_ids == a.word_ids);
  CHECK(back[1].speaker_index == 1);

  // Mismatched end speaker.
  std::vector<int> bad{vocab.speaker_ts_id(0, 0), vocab.word_id("a"), vocab.speaker_ts_id(1, 5)};
  try {
    (void)saasr::deserialize(bad, vocab);
    FAIL("expected ParseError");
  } catch (const saasr::ParseError& e) {
    CHECK(e.position == 2);
  }

  // Word outside a segment.
  std::vector<int> naked{vocab.word_id("a")};
  CHECK_THROWS_AS((void)saasr::deserialize(naked, vocab), saasr::ParseError);

  // Dangling begin.
  std::vector<int> dangling{vocab.speaker_ts_id(0, 0), vocab.word_id("a")};
  CHECK_THROWS_AS((void)saasr::deserialize(dangling, vocab), saasr::ParseError);

  // Stream wrappers outside segments are fine.
  std::vector<int> wrapped{vocab.bos_id(), vocab.transcribe_id()};
  wrapped.insert(wrapped.end(), tokens.begin(), tokens.end());
  wrapped.push_back(vocab.eos_id());
  CHECK(saasr::deserialize(wrapped, vocab).size() == 2);
}

TEST_CASE("validator flags monotonicity and onset-order defects") {
  auto vocab = toy_vocab();
  // Speaker 0 closes at index 10 and reopens at 5: timestamps go backward.
  std::vector<int> shrink{vocab.speaker_ts_id(0, 0), vocab.speaker_ts_id(0, 10),
                          vocab.speaker_ts_id(0, 5), vocab.speaker_ts_id(0, 12)};
  auto v1 = saasr::validate_stream(shrink, vocab);
  REQUIRE(v1.size() >= 1);
  CHECK(v1[0].kind == saasr::StreamViolation::kMonotonicity);
  CHECK(v1[0].position == 2);

  // Second segment (speaker 1) opens earlier than the first segment's onset.
  std::vector<int> unordered{vocab.speaker_ts_id(0, 10), vocab.speaker_ts_id(0, 12),
                             vocab.speaker_ts_id(1, 5), vocab.speaker_ts_id(1, 8)};
  auto v2 = saasr::validate_stream(unordered, vocab);
  REQUIRE(v2.size() == 1);
  CHECK(v2[0].kind == saasr::StreamViolation::kFifo);
  CHECK(v2[0].position == 2);

  std::vector<int> good = saasr::serialize({{0, 0.0, 2.0, {0}}, {1, 1.0, 3.0, {1}}}, vocab);
  CHECK(saasr::validate_stream(good, vocab).empty());
}

TEST_CASE("round trip holds on 1000 randomized segment sets") {
  auto vocab = toy_vocab();
  saasr::Rng rng(90210);
  int nonempty = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    auto segs = random_segments(rng, vocab);
    if (!segs.empty()) ++nonempty;
    auto tokens = saasr::serialize(segs, vocab);
    CHECK(saasr::validate_stream(tokens, vocab).empty());
    auto back = saasr::deserialize(tokens, vocab);
    auto expected = fifo_normalize(segs);
    REQUIRE(back.size() == expected.size());
    for (size_t i = 0; i < back.size(); ++i) {
      CHECK(back[i].speaker_index == expected[i].speaker_index);
      CHECK(back[i].start_s == expected[i].start_s);
      CHECK(back[i].end_s == expected[i].end_s);
      CHECK(back[i].word_ids == expected[i].word_ids);
    }
  }
  CHECK(nonempty > 800);  // the generator must actually exercise the codec
}

TEST_CASE("vocabulary survives a file round trip") {
  auto vocab = toy_vocab();
  const std::string path = "vocab_test.txt";
  vocab.save(path);
  auto back = Vocabulary::load(path);
  CHECK(back.words() == vocab.words());
  CHECK(back.num_speakers() == vocab.num_speakers());
  CHECK(back.num_timestamps() == vocab.num_timestamps());
  CHECK(back.window_s() == vocab.window_s());
  CHECK(back.resolution_s() == vocab.resolution_s());
  std::remove(path.c_str());
}

TEST_CASE("vocabulary rejects malformed word tokens") {
  CHECK_THROWS_AS(Vocabulary({"ok", "ok"}, 2, 151, 30.0), saasr::ConfigError);
  CHECK_THROWS_AS(Vocabulary({"has space"}, 2, 151, 30.0), saasr::ConfigError);
  CHECK_THROWS_AS(Vocabulary({"#lead"}, 2, 151, 30.0), saasr::ConfigError);
  CHECK_THROWS_AS(Vocabulary({}, 2, 151, 30.0), saasr::ConfigError);
}
