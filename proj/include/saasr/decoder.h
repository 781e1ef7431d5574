// saasr/decoder.h
//
// Beam search over the joint word/speaker-timestamp vocabulary with optional
// enforcement of the serialized-stream constraints (segment alternation,
// per-speaker timestamp monotonicity, first-in-first-out onset order), plus
// chunked long-form decoding that keeps one speaker order for the whole
// recording and shifts per-window times to absolute ones.

#pragma once

#include <string>
#include <vector>

#include "saasr/model.h"
#include "saasr/sot.h"
#include "saasr/stno.h"

namespace saasr {

struct DecodeError : Error {
  using Error::Error;
};

struct BeamConfig {
  int beam_size = 10;
  // Emission budget per window including the closing EOS; 0 derives the
  // budget from the model's text positions minus the decode prefix.
  int max_tokens = 0;
  // Hypotheses are ranked by logprob / len^length_norm.
  double length_norm = 0.6;
  bool enforce_constraints = true;
  bool dump_attention = false;

  void validate() const;
};

struct DecodeResult {
  std::vector<int> tokens;  // emitted stream, EOS included when produced
  double logprob = 0.0;
  double score = 0.0;  // length-normalized
};

// Single-window beam decode. With enforcement on, tokens that would break the
// stream constraints are masked to -inf, and the final step is restricted to
// closing tokens so the emitted stream always validates.
DecodeResult beam_decode(const Tensor<float>& features, const std::vector<StnoMask>& masks,
                         const SaDicowModel<float>& model, const BeamConfig& config);

struct WindowReport {
  int index = 0;
  double start_s = 0.0;
  double end_s = 0.0;
  bool ok = false;
  std::string error;
  DecodeResult result;
  std::vector<AttributedSegment> segments;  // absolute times
};

struct LongformResult {
  std::vector<std::string> speaker_order;  // global, first-onset
  std::vector<AttributedSegment> segments;
  std::vector<WindowReport> windows;
  // One map per decoded window when dump_attention is set; row i holds the
  // cross-attention of prefix-plus-token position i over the memory columns.
  std::vector<CrossAttentionMap<float>> attention;
};

// Splits the feature matrix into consecutive model-window chunks, decodes
// each against masks built from the global speaker order, and merges the
// deserialized segments with window offsets applied. A failing window is
// reported and skipped.
LongformResult longform_decode(const Tensor<float>& features,
                               const std::vector<DiarizationSegment>& segments,
                               const SaDicowModel<float>& model, const Vocabulary& vocab,
                               const BeamConfig& config);

}  // namespace saasr
