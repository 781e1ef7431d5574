// saasr/stno.h
//
// Frame-level speaker-activity masks derived from oracle diarization. Each
// frame of each speaker's mask carries a one-hot distribution over four
// classes: silence, target-only, non-target-only, and overlap (target plus
// at least one other speaker).

#pragma once

#include <string>
#include <vector>

#include "saasr/common.h"

namespace saasr {

struct DiarizationSegment {
  std::string recording_id;
  std::string speaker_id;
  double start_s = 0.0;
  double end_s = 0.0;
  std::string text;
};

enum StnoClass : int {
  kSilence = 0,
  kTargetOnly = 1,
  kNonTarget = 2,
  kOverlap = 3,
};

struct StnoMask {
  int speaker_index = 0;
  int frames = 0;
  double frame_duration_s = 0.0;
  // Row-major frames x 4; every row is one-hot under oracle diarization.
  std::vector<float> probs;

  float prob(int frame, int cls) const { return probs[static_cast<size_t>(frame) * 4 + cls]; }
  int class_at(int frame) const;
};

// Rejects non-positive durations and same-speaker self-overlap within a
// recording. Segments of different recordings or speakers never conflict.
void validate_segments(const std::vector<DiarizationSegment>& segments);

// Classifies each frame by whether its midpoint falls inside the half-open
// span [start_s, end_s) of any segment. Empty segment lists yield all-silence.
StnoMask compute_stno(const std::vector<DiarizationSegment>& segments,
                      const std::string& target_speaker, double window_start_s,
                      double window_end_s, int frames, double frame_duration_s);

// One mask per listed speaker, speaker_index equal to list position.
std::vector<StnoMask> stno_for_all_speakers(const std::vector<DiarizationSegment>& segments,
                                            const std::vector<std::string>& speaker_order,
                                            double window_start_s, double window_end_s,
                                            int frames, double frame_duration_s,
                                            int max_speakers);

// Unique speakers ordered by first onset, ties broken by speaker_id.
std::vector<std::string> first_onset_speaker_order(
    const std::vector<DiarizationSegment>& segments);

// JSON-lines annotation files, one segment per line with fields
// recording_id, speaker_id, start_s, end_s, text.
std::vector<DiarizationSegment> load_segments_jsonl(const std::string& path);
void save_segments_jsonl(const std::string& path,
                         const std::vector<DiarizationSegment>& segments);

}  // namespace saasr
