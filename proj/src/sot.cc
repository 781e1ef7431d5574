// saasr/sot.cc

#include "saasr/sot.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

namespace saasr {

Vocabulary::Vocabulary(std::vector<std::string> word_tokens, int num_speakers,
                       int num_timestamps, double window_s)
    : words_(std::move(word_tokens)),
      num_speakers_(num_speakers),
      num_timestamps_(num_timestamps),
      window_s_(window_s) {
  SAASR_REQUIRE(!words_.empty(), ConfigError, "vocabulary needs at least one word token");
  SAASR_REQUIRE(num_speakers_ > 0, ConfigError, "num_speakers must be positive");
  SAASR_REQUIRE(num_timestamps_ > 1, ConfigError, "need at least two timestamp bins");
  SAASR_REQUIRE(window_s_ > 0.0, ConfigError, "window_s must be positive");
  std::map<std::string, int> seen;
  for (size_t i = 0; i < words_.size(); ++i) {
    const auto& w = words_[i];
    SAASR_REQUIRE(!w.empty(), ConfigError, "empty word token at index ", i);
    SAASR_REQUIRE(w.find_first_of(" \t\n") == std::string::npos, ConfigError, "word token '", w,
                  "' contains whitespace");
    SAASR_REQUIRE(w[0] != '#', ConfigError, "word token '", w, "' may not start with '#'");
    SAASR_REQUIRE(seen.emplace(w, static_cast<int>(i)).second, ConfigError,
                  "duplicate word token '", w, "'");
  }
}

int Vocabulary::speaker_ts_id(int speaker, int timestamp) const {
  SAASR_REQUIRE(0 <= speaker && speaker < num_speakers_, IndexError, "speaker ", speaker,
                " outside [0,", num_speakers_, ")");
  SAASR_REQUIRE(0 <= timestamp && timestamp < num_timestamps_, IndexError, "timestamp index ",
                timestamp, " outside [0,", num_timestamps_, ")");
  return num_words() + speaker * num_timestamps_ + timestamp;
}

int Vocabulary::speaker_of(int id) const {
  SAASR_REQUIRE(is_speaker_ts(id), IndexError, "token ", id, " is not a speaker-timestamp");
  return (id - num_words()) / num_timestamps_;
}

int Vocabulary::timestamp_of(int id) const {
  SAASR_REQUIRE(is_speaker_ts(id), IndexError, "token ", id, " is not a speaker-timestamp");
  return (id - num_words()) % num_timestamps_;
}

int Vocabulary::quantize_time(double t) const {
  SAASR_REQUIRE(t >= 0.0 && t <= window_s_ + 1e-9, IndexError, "time ", t,
                "s outside window [0,", window_s_, "]");
  // The 1e-9 nudge keeps intended half-way points rounding up despite
  // binary representation of the quotient.
  const int w = static_cast<int>(std::floor(t / resolution_s() + 0.5 + 1e-9));
  return std::min(w, num_timestamps_ - 1);
}

int Vocabulary::word_id(const std::string& token) const {
  for (size_t i = 0; i < words_.size(); ++i)
    if (words_[i] == token) return static_cast<int>(i);
  throw IndexError(str_cat("unknown word token '", token, "'"));
}

const std::string& Vocabulary::word(int id) const {
  SAASR_REQUIRE(is_word(id), IndexError, "token ", id, " is not a word");
  return words_[static_cast<size_t>(id)];
}

std::string Vocabulary::render_token(int id) const {
  if (is_word(id)) return words_[static_cast<size_t>(id)];
  if (is_speaker_ts(id)) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "<|s%d_%.2f|>", speaker_of(id),
                  time_of_index(timestamp_of(id)));
    return buf;
  }
  if (id == bos_id()) return "<|bos|>";
  if (id == eos_id()) return "<|eos|>";
  if (id == pad_id()) return "<|pad|>";
  if (id == transcribe_id()) return "<|transcribe|>";
  throw IndexError(str_cat("token id ", id, " outside vocabulary of ", total_tokens()));
}

std::string Vocabulary::render_stream(const std::vector<int>& tokens) const {
  std::string out;
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += " ";
    out += render_token(tokens[i]);
  }
  return out;
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream out(path, std::ios::trunc);
  SAASR_REQUIRE(out.good(), Error, "cannot open '", path, "' for writing");
  for (const auto& w : words_) out << w << "\n";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", window_s_);
  out << "# num_speakers " << num_speakers_ << "\n";
  out << "# num_timestamps " << num_timestamps_ << "\n";
  out << "# window_s " << buf << "\n";
  SAASR_REQUIRE(out.good(), Error, "short write to '", path, "'");
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream in(path);
  SAASR_REQUIRE(in.good(), Error, "cannot open '", path, "'");
  std::vector<std::string> words;
  int num_speakers = -1, num_timestamps = -1;
  double window_s = -1.0;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::stringstream ss(line);
      std::string hash, key;
      ss >> hash >> key;
      if (key == "num_speakers")
        ss >> num_speakers;
      else if (key == "num_timestamps")
        ss >> num_timestamps;
      else if (key == "window_s")
        ss >> window_s;
      else
        throw ConfigError(str_cat(path, ": unknown header key '", key, "'"));
      SAASR_REQUIRE(!ss.fail(), ConfigError, path, ": malformed header line '", line, "'");
    } else {
      SAASR_REQUIRE(num_speakers < 0 && num_timestamps < 0 && window_s < 0, ConfigError, path,
                    ": word token after header block");
      words.push_back(line);
    }
  }
  SAASR_REQUIRE(num_speakers > 0 && num_timestamps > 0 && window_s > 0, ConfigError, path,
                ": header block must declare num_speakers, num_timestamps, window_s");
  return Vocabulary(std::move(words), num_speakers, num_timestamps, window_s);
}

std::vector<int> serialize(std::vector<AttributedSegment> segments, const Vocabulary& vocab) {
  for (const auto& s : segments) {
    SAASR_REQUIRE(0 <= s.speaker_index && s.speaker_index < vocab.num_speakers(), IndexError,
                  "segment speaker ", s.speaker_index, " outside [0,", vocab.num_speakers(), ")");
    SAASR_REQUIRE(s.end_s >= s.start_s, ConfigError, "segment of speaker ", s.speaker_index,
                  " ends at ", s.end_s, "s before it starts at ", s.start_s, "s");
    SAASR_REQUIRE(s.start_s >= 0.0 && s.end_s <= vocab.window_s() + 1e-9, ConfigError,
                  "segment [", s.start_s, ",", s.end_s, "]s of speaker ", s.speaker_index,
                  " exceeds the ", vocab.window_s(),
                  "s window; re-window the recording into chunks first");
    for (int id : s.word_ids)
      SAASR_REQUIRE(vocab.is_word(id), IndexError, "segment of speaker ", s.speaker_index,
                    " holds non-word token ", id);
  }
  // Per-speaker self-overlap check on the unquantized times.
  std::map<int, std::vector<std::pair<double, double>>> spans;
  for (const auto& s : segments) spans[s.speaker_index].emplace_back(s.start_s, s.end_s);
  for (auto& [u, sp] : spans) {
    std::sort(sp.begin(), sp.end());
    for (size_t i = 1; i < sp.size(); ++i)
      SAASR_REQUIRE(sp[i].first >= sp[i - 1].second, ConfigError, "speaker ", u,
                    " has overlapping segments near ", sp[i].first, "s");
  }

  std::stable_sort(segments.begin(), segments.end(),
                   [](const AttributedSegment& a, const AttributedSegment& b) {
                     if (a.start_s != b.start_s) return a.start_s < b.start_s;
                     return a.speaker_index < b.speaker_index;
                   });
  std::vector<int> tokens;
  for (const auto& s : segments) {
    tokens.push_back(vocab.speaker_ts_id(s.speaker_index, vocab.quantize_time(s.start_s)));
    tokens.insert(tokens.end(), s.word_ids.begin(), s.word_ids.end());
    tokens.push_back(vocab.speaker_ts_id(s.speaker_index, vocab.quantize_time(s.end_s)));
  }
  return tokens;
}

std::vector<AttributedSegment> deserialize(const std::vector<int>& tokens,
                                           const Vocabulary& vocab) {
  std::vector<AttributedSegment> segments;
  int open_speaker = -1;
  AttributedSegment current;
  for (int i = 0; i < static_cast<int>(tokens.size()); ++i) {
    const int id = tokens[static_cast<size_t>(i)];
    SAASR_REQUIRE(0 <= id && id < vocab.total_tokens(), IndexError, "token id ", id,
                  " at position ", i, " outside vocabulary");
    if (vocab.is_special(id)) {
      if (open_speaker >= 0)
        throw ParseError(i, str_cat("special token '", vocab.render_token(id),
                                    "' inside an open segment of speaker ", open_speaker));
      continue;  // stream wrappers are legal between segments
    }
    if (vocab.is_word(id)) {
      if (open_speaker < 0)
        throw ParseError(i, str_cat("word token '", vocab.render_token(id),
                                    "' outside any segment"));
      current.word_ids.push_back(id);
      continue;
    }
    const int u = vocab.speaker_of(id);
    const int w = vocab.timestamp_of(id);
    if (open_speaker < 0) {
      current = AttributedSegment{};
      current.speaker_index = u;
      current.start_s = vocab.time_of_index(w);
      open_speaker = u;
    } else {
      if (u != open_speaker)
        throw ParseError(i, str_cat("end token names speaker ", u, " but segment opened for ",
                                    open_speaker));
      current.end_s = vocab.time_of_index(w);
      segments.push_back(current);
      open_speaker = -1;
    }
  }
  if (open_speaker >= 0)
    throw ParseError(static_cast<int>(tokens.size()),
                     str_cat("stream ends inside an open segment of speaker ", open_speaker));
  return segments;
}

std::vector<StreamViolation> validate_stream(const std::vector<int>& tokens,
                                             const Vocabulary& vocab) {
  std::vector<StreamViolation> out;
  auto flag = [&out](StreamViolation::Kind kind, int pos, std::string msg) {
    out.push_back({kind, pos, std::move(msg)});
  };
  int open_speaker = -1;
  int last_begin_w = -1;
  std::vector<int> last_ts(static_cast<size_t>(vocab.num_speakers()), -1);
  for (int i = 0; i < static_cast<int>(tokens.size()); ++i) {
    const int id = tokens[static_cast<size_t>(i)];
    if (id < 0 || id >= vocab.total_tokens()) {
      flag(StreamViolation::kStructure, i, str_cat("token id ", id, " outside vocabulary"));
      continue;
    }
    if (vocab.is_special(id)) {
      if (open_speaker >= 0)
        flag(StreamViolation::kStructure, i, "special token inside an open segment");
      continue;
    }
    if (vocab.is_word(id)) {
      if (open_speaker < 0)
        flag(StreamViolation::kStructure, i, "word token outside any segment");
      continue;
    }
    const int u = vocab.speaker_of(id);
    const int w = vocab.timestamp_of(id);
    if (open_speaker < 0) {
      if (last_begin_w > w)
        flag(StreamViolation::kFifo, i,
             str_cat("segment onset index ", w, " precedes previous onset ", last_begin_w));
      last_begin_w = std::max(last_begin_w, w);
      open_speaker = u;
    } else {
      if (u != open_speaker)
        flag(StreamViolation::kStructure, i,
             str_cat("end token speaker ", u, " mismatches open segment speaker ", open_speaker));
      open_speaker = -1;
    }
    if (last_ts[static_cast<size_t>(u)] > w)
      flag(StreamViolation::kMonotonicity, i,
           str_cat("speaker ", u, " timestamp index ", w, " decreases from ",
                   last_ts[static_cast<size_t>(u)]));
    last_ts[static_cast<size_t>(u)] = std::max(last_ts[static_cast<size_t>(u)], w);
  }
  if (open_speaker >= 0)
    flag(StreamViolation::kStructure, static_cast<int>(tokens.size()),
         "stream ends inside an open segment");
  return out;
}

}  // namespace saasr
