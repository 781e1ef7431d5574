// saasr/sot.h
//
// Extended vocabulary and the codec between speaker-attributed segments and
// serialized token streams. Flat token ids are laid out as:
//   [0, V)            word tokens
//   [V, V + U*W)      speaker-timestamp tokens, id = V + u*W + w
//   tail              specials: BOS, EOS, PAD, task prefix
// Timestamp index w maps to time w * resolution with resolution
// window_s / (W - 1), so index W-1 lands exactly on the window end.

#pragma once

#include <string>
#include <vector>

#include "saasr/common.h"

namespace saasr {

class ParseError : public Error {
 public:
  ParseError(int position, const std::string& what)
      : Error(str_cat("token ", position, ": ", what)), position(position) {}
  int position;
};

class Vocabulary {
 public:
  Vocabulary(std::vector<std::string> word_tokens, int num_speakers, int num_timestamps,
             double window_s);

  int num_words() const { return static_cast<int>(words_.size()); }
  int num_speakers() const { return num_speakers_; }
  int num_timestamps() const { return num_timestamps_; }
  double window_s() const { return window_s_; }
  double resolution_s() const { return window_s_ / (num_timestamps_ - 1); }

  int total_tokens() const { return num_words() + num_speakers_ * num_timestamps_ + 4; }
  int num_specials() const { return 4; }

  int bos_id() const { return num_words() + num_speakers_ * num_timestamps_ + 0; }
  int eos_id() const { return num_words() + num_speakers_ * num_timestamps_ + 1; }
  int pad_id() const { return num_words() + num_speakers_ * num_timestamps_ + 2; }
  int transcribe_id() const { return num_words() + num_speakers_ * num_timestamps_ + 3; }

  bool is_word(int id) const { return 0 <= id && id < num_words(); }
  bool is_speaker_ts(int id) const {
    return num_words() <= id && id < num_words() + num_speakers_ * num_timestamps_;
  }
  bool is_special(int id) const {
    return num_words() + num_speakers_ * num_timestamps_ <= id && id < total_tokens();
  }

  int speaker_ts_id(int speaker, int timestamp) const;
  int speaker_of(int id) const;
  int timestamp_of(int id) const;

  // Nearest grid index, ties round half-up. Throws on t outside [0, window].
  int quantize_time(double t) const;
  double time_of_index(int w) const { return w * resolution_s(); }

  int word_id(const std::string& token) const;
  const std::string& word(int id) const;
  const std::vector<std::string>& words() const { return words_; }

  // Speaker-timestamp tokens render as <|s{u}_{t:.2f}|>.
  std::string render_token(int id) const;
  std::string render_stream(const std::vector<int>& tokens) const;

  void save(const std::string& path) const;
  static Vocabulary load(const std::string& path);

 private:
  std::vector<std::string> words_;
  int num_speakers_;
  int num_timestamps_;
  double window_s_;
};

struct AttributedSegment {
  int speaker_index = 0;
  double start_s = 0.0;
  double end_s = 0.0;
  std::vector<int> word_ids;
};

struct StreamViolation {
  enum Kind { kStructure, kMonotonicity, kFifo };
  Kind kind;
  int position;
  std::string message;
};

// Emits segments in onset order (ties: ascending speaker index), each as a
// begin speaker-timestamp, its words, and an end speaker-timestamp. Within
// one speaker timestamps never decrease; a speaker change may roll time back.
std::vector<int> serialize(std::vector<AttributedSegment> segments, const Vocabulary& vocab);

// Exact inverse over on-grid segment lists. Throws ParseError on structural
// defects, naming the token position.
std::vector<AttributedSegment> deserialize(const std::vector<int>& tokens,
                                           const Vocabulary& vocab);

// Non-throwing structural check; empty result means the stream satisfies the
// segment alternation, per-speaker monotonicity, and onset-order constraints.
std::vector<StreamViolation> validate_stream(const std::vector<int>& tokens,
                                             const Vocabulary& vocab);

}  // namespace saasr
