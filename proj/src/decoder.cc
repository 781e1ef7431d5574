#include "saasr/decoder.h"

#include <algorithm>
#include <cmath>
#include <limits>

namespace saasr {
namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

std::vector<double> log_softmax(const std::vector<float>& logits) {
  double mx = kNegInf;
  for (float x : logits) mx = std::max(mx, static_cast<double>(x));
  double se = 0.0;
  for (float x : logits) se += std::exp(static_cast<double>(x) - mx);
  const double lse = mx + std::log(se);
  std::vector<double> out(logits.size());
  for (size_t i = 0; i < logits.size(); ++i) out[i] = static_cast<double>(logits[i]) - lse;
  return out;
}

// Constraint bookkeeping mirroring the stream validator: which speaker's
// segment is open, each speaker's latest timestamp index, and the latest
// segment onset index.
struct StreamState {
  int open_speaker = -1;
  int last_onset = -1;
  std::vector<int> last_ts;

  explicit StreamState(int speakers) : last_ts(static_cast<size_t>(speakers), -1) {}

  void advance(const ModelConfig& mc, int token) {
    if (!mc.is_speaker_ts(token)) return;
    const int u = mc.speaker_of(token);
    const int w = mc.timestamp_of(token);
    if (open_speaker < 0) {
      open_speaker = u;
      last_onset = std::max(last_onset, w);
    } else {
      open_speaker = -1;
    }
    last_ts[static_cast<size_t>(u)] = std::max(last_ts[static_cast<size_t>(u)], w);
  }
};

// Marks the tokens a hypothesis may emit next; `remaining` is the emission
// budget including this step, and the final step only admits tokens that
// leave the stream closed.
void allowed_tokens(const ModelConfig& mc, const StreamState& st, int remaining,
                    std::vector<char>& allowed) {
  allowed.assign(static_cast<size_t>(mc.total_tokens()), 0);
  const bool last_step = remaining <= 1;
  if (st.open_speaker >= 0) {
    if (!last_step) {
      for (int w = 0; w < mc.vocab_words; ++w) allowed[static_cast<size_t>(w)] = 1;
    }
    const int u = st.open_speaker;
    const int floor_w = std::max(0, st.last_ts[static_cast<size_t>(u)]);
    for (int w = floor_w; w < mc.num_timestamps; ++w) {
      allowed[static_cast<size_t>(mc.vocab_words + u * mc.num_timestamps + w)] = 1;
    }
    return;
  }
  allowed[static_cast<size_t>(mc.eos_id())] = 1;
  if (last_step) return;
  for (int u = 0; u < mc.max_speakers; ++u) {
    const int floor_w =
        std::max({0, st.last_onset, st.last_ts[static_cast<size_t>(u)]});
    for (int w = floor_w; w < mc.num_timestamps; ++w) {
      allowed[static_cast<size_t>(mc.vocab_words + u * mc.num_timestamps + w)] = 1;
    }
  }
}

struct Hyp {
  DecodeState<float> state;
  StreamState stream;
  std::vector<int> tokens;
  double logprob = 0.0;
  std::vector<double> next_logp;
};

struct Candidate {
  double logprob;
  int parent;
  int token;
};

double normalized(double logprob, size_t len, double exponent) {
  return logprob / std::pow(static_cast<double>(std::max<size_t>(len, 1)), exponent);
}

DecodeResult beam_decode_memory(const Tensor<float>& memory,
                                const SaDicowModel<float>& model, const BeamConfig& config) {
  const ModelConfig& mc = model.config();
  int budget = config.max_tokens > 0 ? config.max_tokens : mc.max_text_positions - 2;
  budget = std::min(budget, mc.max_text_positions - 2);

  Hyp root{model.begin_decode(memory), StreamState(mc.max_speakers), {}, 0.0, {}};
  model.extend(root.state, mc.bos_id());
  root.next_logp = log_softmax(model.extend(root.state, mc.transcribe_id()));

  std::vector<Hyp> active;
  active.push_back(std::move(root));
  struct Finished {
    std::vector<int> tokens;
    double logprob;
  };
  std::vector<Finished> finished;

  std::vector<char> allowed;
  std::string blocked_reason;
  for (int emitted = 0; emitted < budget && !active.empty(); ++emitted) {
    const int remaining = budget - emitted;
    std::vector<Candidate> candidates;
    for (size_t h = 0; h < active.size(); ++h) {
      const Hyp& hyp = active[h];
      if (config.enforce_constraints) {
        allowed_tokens(mc, hyp.stream, remaining, allowed);
        bool any = false;
        for (int t = 0; t < mc.total_tokens(); ++t) {
          if (!allowed[static_cast<size_t>(t)]) continue;
          any = true;
          candidates.push_back({hyp.logprob + hyp.next_logp[static_cast<size_t>(t)],
                                static_cast<int>(h), t});
        }
        if (!any && blocked_reason.empty()) {
          blocked_reason = hyp.stream.open_speaker >= 0
                               ? str_cat("no closing timestamp for speaker ",
                                         hyp.stream.open_speaker, " at or after index ",
                                         hyp.stream.last_ts[static_cast<size_t>(
                                             hyp.stream.open_speaker)])
                               : str_cat("no onset at or after index ", hyp.stream.last_onset);
        }
      } else {
        for (int t = 0; t < mc.total_tokens(); ++t) {
          candidates.push_back({hyp.logprob + hyp.next_logp[static_cast<size_t>(t)],
                                static_cast<int>(h), t});
        }
      }
    }
    if (candidates.empty()) {
      throw DecodeError(str_cat("every hypothesis is blocked: ", blocked_reason));
    }

    const size_t keep = std::min(candidates.size(), static_cast<size_t>(config.beam_size));
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<long>(keep),
                      candidates.end(), [](const Candidate& a, const Candidate& b) {
                        if (a.logprob != b.logprob) return a.logprob > b.logprob;
                        if (a.parent != b.parent) return a.parent < b.parent;
                        return a.token < b.token;
                      });

    std::vector<Hyp> next;
    for (size_t c = 0; c < keep; ++c) {
      const Candidate& cand = candidates[c];
      const Hyp& parent = active[static_cast<size_t>(cand.parent)];
      if (cand.token == mc.eos_id()) {
        Finished f{parent.tokens, cand.logprob};
        f.tokens.push_back(cand.token);
        finished.push_back(std::move(f));
        continue;
      }
      // Forking by copy: the cached key/value columns are immutable.
      Hyp hyp{parent.state, parent.stream, parent.tokens, cand.logprob, {}};
      hyp.tokens.push_back(cand.token);
      hyp.stream.advance(mc, cand.token);
      hyp.next_logp = log_softmax(model.extend(hyp.state, cand.token));
      next.push_back(std::move(hyp));
    }
    active = std::move(next);
  }

  DecodeResult best;
  bool have = false;
  auto consider = [&](const std::vector<int>& tokens, double logprob) {
    const double score = normalized(logprob, tokens.size(), config.length_norm);
    if (!have || score > best.score ||
        (score == best.score &&
         (tokens.size() < best.tokens.size() ||
          (tokens.size() == best.tokens.size() && tokens < best.tokens)))) {
      best = {tokens, logprob, score};
      have = true;
    }
  };
  for (const auto& f : finished) consider(f.tokens, f.logprob);
  for (const auto& h : active) consider(h.tokens, h.logprob);
  SAASR_REQUIRE(have, DecodeError, "beam search produced no hypotheses");
  return best;
}

Tensor<float> slice_feature_cols(const Tensor<float>& features, int c0, int c1) {
  const int rows = features.rows();
  const int cols = features.cols();
  std::vector<float> out(static_cast<size_t>(rows) * (c1 - c0));
  for (int r = 0; r < rows; ++r) {
    for (int c = c0; c < c1; ++c) {
      out[static_cast<size_t>(r) * (c1 - c0) + (c - c0)] =
          features.value()[static_cast<size_t>(r) * cols + c];
    }
  }
  return Tensor<float>::from_data({rows, c1 - c0}, std::move(out));
}

}  // namespace

void BeamConfig::validate() const {
  SAASR_REQUIRE(beam_size >= 1, ConfigError, "beam_size ", beam_size);
  SAASR_REQUIRE(max_tokens >= 0, ConfigError, "max_tokens ", max_tokens);
  SAASR_REQUIRE(length_norm >= 0, ConfigError, "length_norm ", length_norm);
}

DecodeResult beam_decode(const Tensor<float>& features, const std::vector<StnoMask>& masks,
                         const SaDicowModel<float>& model, const BeamConfig& config) {
  config.validate();
  NoGradGuard guard;
  return beam_decode_memory(model.encode(features, masks), model, config);
}

LongformResult longform_decode(const Tensor<float>& features,
                               const std::vector<DiarizationSegment>& segments,
                               const SaDicowModel<float>& model, const Vocabulary& vocab,
                               const BeamConfig& config) {
  config.validate();
  const ModelConfig& mc = model.config();
  SAASR_REQUIRE(features.ndim() == 2 && features.dim(0) == mc.feature_dim, DimensionError,
                "features must be ", mc.feature_dim, " x frames");
  SAASR_REQUIRE(!segments.empty(), ConfigError,
                "long-form decoding needs diarization segments for the speaker inventory");
  SAASR_REQUIRE(vocab.total_tokens() == mc.total_tokens() &&
                    vocab.num_words() == mc.vocab_words &&
                    vocab.num_speakers() == mc.max_speakers &&
                    vocab.num_timestamps() == mc.num_timestamps,
                ConfigError, "vocabulary does not match the model's token layout");

  NoGradGuard guard;
  LongformResult out;
  out.speaker_order = first_onset_speaker_order(segments);
  SAASR_REQUIRE(static_cast<int>(out.speaker_order.size()) <= mc.max_speakers, ConfigError,
                "recording has ", out.speaker_order.size(), " speakers, model limit ",
                mc.max_speakers);

  const int window_cols = 2 * mc.max_frames;
  const double in_frame_s = mc.window_s / window_cols;
  const int total_cols = features.cols();
  int index = 0;
  for (int off = 0; off < total_cols; off += window_cols, ++index) {
    int len = std::min(window_cols, total_cols - off);
    len -= len % 2;  // the stride-2 front end consumes input frames in pairs
    if (len == 0) break;

    WindowReport report;
    report.index = index;
    report.start_s = off * in_frame_s;
    report.end_s = (off + len) * in_frame_s;

    const auto window = slice_feature_cols(features, off, off + len);
    const auto masks =
        stno_for_all_speakers(segments, out.speaker_order, report.start_s, report.end_s,
                              len / 2, 2.0 * in_frame_s, mc.max_speakers);
    try {
      const auto memory = model.encode(window, masks);
      report.result = beam_decode_memory(memory, model, config);
      report.segments = deserialize(report.result.tokens, vocab);
      for (auto& seg : report.segments) {
        seg.start_s += report.start_s;
        seg.end_s += report.start_s;
      }
      report.ok = true;
      if (config.dump_attention) {
        std::vector<int> ids = {mc.bos_id(), mc.transcribe_id()};
        ids.insert(ids.end(), report.result.tokens.begin(), report.result.tokens.end());
        out.attention.push_back(model.dump_cross_attention(ids, memory));
      }
      out.segments.insert(out.segments.end(), report.segments.begin(), report.segments.end());
    } catch (const Error& e) {
      report.ok = false;
      report.error = e.what();
    }
    out.windows.push_back(std::move(report));
  }
  return out;
}

}  // namespace saasr
