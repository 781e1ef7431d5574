// saasr/model.h
//
// Speaker-attributed encoder-decoder. The encoder runs once per target
// speaker, conditioned by that speaker's STNO activity mask through
// class-specific affine layers inserted before every transformer block.
// Each speaker channel is tagged with a per-speaker affine and the channels
// are aggregated into a single memory. The decoder embeds speaker-timestamp
// tokens through a shared timestamp table followed by a per-speaker affine
// and produces joint logits through a factored lexical/speaker/time head.
//
// Every conditioning parameter initializes to an identity mapping, so a
// freshly built model driven with a single speaker computes exactly the same
// function as the plain encoder-decoder it wraps (see forward_baseline).

#pragma once

#include <array>
#include <string>
#include <vector>

#include "saasr/common.h"
#include "saasr/rng.h"
#include "saasr/stno.h"
#include "saasr/tensor.h"

namespace saasr {

enum class Aggregation {
  kConcatenation,
  kAverage,
  kWeightedSum,
  kMaskedAverage,
};

std::string aggregation_name(Aggregation a);
Aggregation aggregation_from_name(const std::string& name);

struct ModelConfig {
  int feature_dim = 16;
  int model_dim = 64;
  int encoder_layers = 2;
  int decoder_layers = 2;
  int heads = 4;
  int ffn_dim = 128;
  int vocab_words = 64;
  int max_speakers = 8;
  int num_timestamps = 151;
  double window_s = 30.0;
  Aggregation aggregation = Aggregation::kConcatenation;
  // Encoder output frames per window; inputs carry twice as many frames
  // before the stride-2 convolution.
  int max_frames = 150;
  int max_text_positions = 512;

  void validate() const;

  // Flat token id layout, identical to the serialization vocabulary:
  // words, then speaker-timestamp grid, then BOS/EOS/PAD/transcribe.
  int total_tokens() const { return vocab_words + max_speakers * num_timestamps + 4; }
  // Rows of the lexical head: words plus the four specials.
  int num_lexical() const { return vocab_words + 4; }
  int bos_id() const { return vocab_words + max_speakers * num_timestamps + 0; }
  int eos_id() const { return vocab_words + max_speakers * num_timestamps + 1; }
  int pad_id() const { return vocab_words + max_speakers * num_timestamps + 2; }
  int transcribe_id() const { return vocab_words + max_speakers * num_timestamps + 3; }
  bool is_word(int id) const { return 0 <= id && id < vocab_words; }
  bool is_speaker_ts(int id) const {
    return vocab_words <= id && id < vocab_words + max_speakers * num_timestamps;
  }
  bool is_special(int id) const {
    return vocab_words + max_speakers * num_timestamps <= id && id < total_tokens();
  }
  int speaker_of(int id) const { return (id - vocab_words) / num_timestamps; }
  int timestamp_of(int id) const { return (id - vocab_words) % num_timestamps; }

  double encoder_frame_s() const { return window_s / max_frames; }
  double timestamp_resolution_s() const { return window_s / (num_timestamps - 1); }
};

void save_model_config(const std::string& path, const ModelConfig& config);
ModelConfig load_model_config(const std::string& path);

template <class S>
struct ParamRef {
  std::string name;
  Tensor<S> tensor;
  // Conditioning and head parameters added on top of the base encoder-decoder;
  // the first training stage updates only these.
  bool is_new = false;
};

template <class S>
struct CrossAttentionMap {
  int positions = 0;
  int memory_cols = 0;
  // Row-major positions x memory_cols, heads averaged; rows sum to 1.
  std::vector<S> weights;
};

// Incremental decoding state. Copies share the underlying buffers, so a
// search may fork a hypothesis by copying its state and extending the copy.
template <class S>
struct DecodeState {
  int length = 0;
  int memory_cols = 0;
  std::vector<Tensor<S>> self_k, self_v;    // per decoder layer, [d_m x length]
  std::vector<Tensor<S>> cross_k, cross_v;  // per decoder layer, [d_m x memory_cols]
};

// out_t = sum_c (w[c] h_t + b[c]) * p_c(t) over the four STNO classes,
// indexed by StnoClass. One-hot masks reduce to the selected class transform.
template <class S>
Tensor<S> fddt_apply(const Tensor<S>& h, const StnoMask& mask,
                     const std::array<Tensor<S>, 4>& w, const std::array<Tensor<S>, 4>& b);

template <class S>
class SaDicowModel {
 public:
  // Base weights are drawn from rng in registration order; conditioning
  // parameters start as identity mappings.
  SaDicowModel(ModelConfig config, Rng& rng);

  const ModelConfig& config() const { return config_; }
  const std::vector<ParamRef<S>>& parameters() const { return params_; }
  Tensor<S> param(const std::string& name) const;

  // Conv front end shared by every speaker channel: d_f x 2T in, d_m x T out,
  // fixed sinusoid positions added.
  Tensor<S> front_end(const Tensor<S>& features) const;
  Tensor<S> encode_speaker_channel(const Tensor<S>& features, const StnoMask& mask) const;
  Tensor<S> speaker_affine(const Tensor<S>& channel, int speaker) const;
  Tensor<S> aggregate(const std::vector<Tensor<S>>& channels,
                      const std::vector<StnoMask>& masks, Aggregation strategy) const;
  // Full conditioned path; channel order follows `masks`, each conditioned on
  // its own mask and tagged with the affine of its mask's speaker_index.
  Tensor<S> encode(const Tensor<S>& features, const std::vector<StnoMask>& masks) const;
  // Plain unconditioned encoder with the same base weights.
  Tensor<S> encode_baseline(const Tensor<S>& features) const;

  // Token embeddings, d_m x N. The baseline flavor embeds speaker-timestamp
  // tokens through the shared timestamp table without the speaker affine.
  Tensor<S> embed_tokens(const std::vector<int>& ids, bool baseline = false) const;
  // Logits [N x total_tokens], one row per prefix position. `attention`
  // optionally receives the last layer's head-averaged cross-attention.
  Tensor<S> decode(const std::vector<int>& ids, const Tensor<S>& memory,
                   CrossAttentionMap<S>* attention = nullptr, bool baseline = false) const;

  Tensor<S> forward(const Tensor<S>& features, const std::vector<StnoMask>& masks,
                    const std::vector<int>& ids) const;
  Tensor<S> forward_baseline(const Tensor<S>& features, const std::vector<int>& ids) const;

  CrossAttentionMap<S> dump_cross_attention(const std::vector<int>& ids,
                                            const Tensor<S>& memory) const;

  // Incremental decoding. extend() appends one token and returns the logits
  // for the next position; they match the corresponding row of decode().
  DecodeState<S> begin_decode(const Tensor<S>& memory) const;
  std::vector<S> extend(DecodeState<S>& state, int token) const;

  // Checkpoint directory: model.bin + model.manifest + config.json. Loading
  // rejects missing tensors and shape disagreements.
  void save(const std::string& dir) const;
  static SaDicowModel load(const std::string& dir);

 private:
  struct LayerNorm {
    Tensor<S> gamma, beta;
  };
  struct Attention {
    Tensor<S> wq, bq, wk, bk, wv, bv, wo, bo;
  };
  struct Ffn {
    Tensor<S> w1, b1, w2, b2;
  };
  struct EncoderLayer {
    LayerNorm ln1, ln2;
    Attention attn;
    Ffn ffn;
  };
  struct DecoderLayer {
    LayerNorm ln1, ln2, ln3;
    Attention self_attn, cross_attn;
    Ffn ffn;
  };
  struct Fddt {
    std::array<Tensor<S>, 4> w, b;
  };

  Tensor<S> norm(const Tensor<S>& x, const LayerNorm& p) const;
  // Scores q against full-width keys and mixes values, one softmax per query
  // row; `allowed` empty means unmasked.
  Tensor<S> mix_heads(const Attention& p, const Tensor<S>& q, const Tensor<S>& k,
                      const Tensor<S>& v, const std::vector<std::uint8_t>& allowed,
                      std::vector<S>* probs_out) const;
  Tensor<S> attention(const Attention& p, const Tensor<S>& q_in, const Tensor<S>& kv_in,
                      bool causal, std::vector<S>* probs_out) const;
  Tensor<S> ffn(const Ffn& p, const Tensor<S>& x) const;
  Tensor<S> encode_from_front_end(const Tensor<S>& h0, const StnoMask& mask) const;
  Tensor<S> embed_column(int id, int position, bool baseline) const;

  Tensor<S> register_param(const std::string& name, Tensor<S> t, bool is_new);

  ModelConfig config_;
  Tensor<S> conv1_w_, conv1_b_, conv2_w_, conv2_b_;
  std::vector<EncoderLayer> enc_layers_;
  std::vector<Fddt> fddt_;
  LayerNorm enc_ln_post_;
  std::vector<Tensor<S>> spk_w_, spk_b_;
  Tensor<S> agg_alpha_;
  Tensor<S> token_emb_, ts_emb_, pos_emb_;
  std::vector<DecoderLayer> dec_layers_;
  LayerNorm dec_ln_post_;
  std::vector<Tensor<S>> ts_aff_w_, ts_aff_b_;
  Tensor<S> head_lex_w_, head_lex_b_, head_spk_w_, head_spk_b_, head_time_w_, head_time_b_;
  std::vector<ParamRef<S>> params_;
};

}  // namespace saasr
