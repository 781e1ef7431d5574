// saasr/corpus.h
//
// Deterministic synthetic multi-talker corpora. Every vocabulary word owns a
// fixed random feature signature spanning a few frames; a speaker renders an
// utterance as back-to-back word signatures scaled by a per-speaker spectral
// envelope, streams are summed and Gaussian noise is added. Two placement
// modes: all speakers starting at zero (full overlap) and sparse turn-taking
// with occasional overlapped onsets.

#pragma once

#include <map>
#include <string>
#include <vector>

#include "saasr/common.h"
#include "saasr/rng.h"
#include "saasr/stno.h"

namespace saasr {

enum class OverlapMode { kLeftAlignedFull, kMeetingSparse };

std::string overlap_mode_name(OverlapMode mode);
OverlapMode overlap_mode_from_name(const std::string& name);

struct CorpusSpec {
  int num_train = 64;
  int num_dev = 8;
  int num_test = 8;
  int speakers_min = 2;
  int speakers_max = 2;
  int max_speaker_slots = 8;
  int vocab_size = 64;
  OverlapMode overlap_mode = OverlapMode::kLeftAlignedFull;
  double window_s = 30.0;
  double noise_std = 0.05;
  std::uint64_t seed = 1;

  // Feature geometry. Encoder-side masks run at 2x this frame duration
  // because of the stride-2 front end.
  int feature_dim = 16;
  double frame_duration_s = 0.1;

  // Utterance shape.
  int signature_frames = 6;
  int words_min = 3;
  int words_max = 8;

  // Speaker voice: multiplicative envelope exp(strength * N(0,1)) per
  // feature channel, fixed per speaker per recording.
  double voice_strength = 0.5;

  // Turn-taking for the sparse mode.
  double gap_mean_s = 1.0;
  double overlap_prob = 0.2;
  double overlap_max_frac = 0.5;  // overlapped onset backs into at most this fraction of the previous turn

  int frames() const { return static_cast<int>(window_s / frame_duration_s + 0.5); }
  void validate() const;
};

struct SyntheticRecording {
  std::string id;
  int feature_dim = 0;
  int frames = 0;
  double frame_duration_s = 0.0;
  std::vector<float> features;  // feature_dim x frames, row-major
  std::vector<DiarizationSegment> segments;
  // speaker label -> words in time order, one entry per speaker slot used
  std::map<std::string, std::vector<std::string>> speaker_words;
  // per-speaker feature contributions before noise, parallel to speaker ids
  // in label order; kept in memory only
  std::map<std::string, std::vector<float>> contributions;
};

struct Corpus {
  CorpusSpec spec;
  std::vector<std::string> words;  // generator word list, index = word id
  std::vector<SyntheticRecording> train, dev, test;
};

// Word list used by generated corpora: w0, w1, ...
std::vector<std::string> make_word_list(int vocab_size);

Corpus generate_corpus(const CorpusSpec& spec);

struct MixtureSnapshot {
  double overlap_ratio = 0.0;     // frames with >=2 active / frames with >=1 active
  double silence_fraction = 0.0;  // frames with none active
  std::vector<double> active_fraction;  // per speaker, in label order
  std::vector<double> solo_fraction;    // per speaker, alone-active frames / total
};

MixtureSnapshot mixture_snapshot(const SyntheticRecording& rec);

// Directory layout: features/<id>.bin + features/<id>.manifest holding one
// tensor named "features", annotations.jsonl over all splits, spec.json with
// the generator parameters and split membership.
void write_corpus(const Corpus& corpus, const std::string& dir);
Corpus load_corpus(const std::string& dir);

}  // namespace saasr
