// saasr/model.cc

#include "saasr/model.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <utility>

#include "json.hpp"
#include "saasr/tensor_io.h"

namespace saasr {

namespace {

namespace fs = std::filesystem;

const char* const kStnoClassNames[4] = {"silence", "target", "nontarget", "overlap"};

// Fixed encoder positions: row i carries sin(t * f_i) for i < d/2 and
// cos(t * f_i) above, frequencies log-spaced from 1 down to 1/10000.
template <class S>
std::vector<S> sinusoid_positions(int d, int t) {
  const int half = d / 2;
  std::vector<S> pos(static_cast<size_t>(d) * t);
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * (half > 1 ? double(i) / (half - 1) : 0.0));
    for (int j = 0; j < t; ++j) {
      pos[static_cast<size_t>(i) * t + j] = static_cast<S>(std::sin(j * freq));
      pos[static_cast<size_t>(half + i) * t + j] = static_cast<S>(std::cos(j * freq));
    }
  }
  return pos;
}

std::string shape_str(const std::vector<int>& shape) {
  std::string s;
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += 'x';
    s += std::to_string(shape[i]);
  }
  return s;
}

}  // namespace

std::string aggregation_name(Aggregation a) {
  switch (a) {
    case Aggregation::kConcatenation: return "concatenation";
    case Aggregation::kAverage: return "average";
    case Aggregation::kWeightedSum: return "weighted_sum";
    case Aggregation::kMaskedAverage: return "masked_average";
  }
  throw ConfigError("unknown aggregation value");
}

Aggregation aggregation_from_name(const std::string& name) {
  if (name == "concatenation") return Aggregation::kConcatenation;
  if (name == "average") return Aggregation::kAverage;
  if (name == "weighted_sum") return Aggregation::kWeightedSum;
  if (name == "masked_average") return Aggregation::kMaskedAverage;
  throw ConfigError(str_cat("unknown aggregation '", name,
                            "'; expected concatenation, average, weighted_sum or "
                            "masked_average"));
}

void ModelConfig::validate() const {
  SAASR_REQUIRE(feature_dim >= 1, ConfigError, "feature_dim must be positive");
  SAASR_REQUIRE(model_dim >= 2 && model_dim % 2 == 0, ConfigError,
                "model_dim must be even for the sinusoid positions");
  SAASR_REQUIRE(heads >= 1 && model_dim % heads == 0, ConfigError, "model_dim ", model_dim,
                " not divisible by ", heads, " heads");
  SAASR_REQUIRE(encoder_layers >= 1 && decoder_layers >= 1, ConfigError,
                "need at least one encoder and one decoder layer");
  SAASR_REQUIRE(ffn_dim >= 1, ConfigError, "ffn_dim must be positive");
  SAASR_REQUIRE(vocab_words >= 1, ConfigError, "vocab_words must be positive");
  SAASR_REQUIRE(max_speakers >= 1, ConfigError, "max_speakers must be positive");
  SAASR_REQUIRE(num_timestamps >= 2, ConfigError, "num_timestamps must be at least 2");
  SAASR_REQUIRE(window_s > 0, ConfigError, "window_s must be positive");
  SAASR_REQUIRE(max_frames >= 1, ConfigError, "max_frames must be positive");
  SAASR_REQUIRE(max_text_positions >= 4, ConfigError, "max_text_positions too small");
}

void save_model_config(const std::string& path, const ModelConfig& config) {
  nlohmann::json j;
  j["feature_dim"] = config.feature_dim;
  j["model_dim"] = config.model_dim;
  j["encoder_layers"] = config.encoder_layers;
  j["decoder_layers"] = config.decoder_layers;
  j["heads"] = config.heads;
  j["ffn_dim"] = config.ffn_dim;
  j["vocab_words"] = config.vocab_words;
  j["max_speakers"] = config.max_speakers;
  j["num_timestamps"] = config.num_timestamps;
  j["window_s"] = config.window_s;
  j["aggregation"] = aggregation_name(config.aggregation);
  j["max_frames"] = config.max_frames;
  j["max_text_positions"] = config.max_text_positions;
  std::ofstream out(path, std::ios::trunc);
  SAASR_REQUIRE(out.good(), Error, "cannot open '", path, "' for writing");
  out << j.dump(2) << "\n";
  SAASR_REQUIRE(out.good(), Error, "short write to '", path, "'");
}

ModelConfig load_model_config(const std::string& path) {
  std::ifstream in(path);
  SAASR_REQUIRE(in.good(), Error, "cannot open '", path, "'");
  ModelConfig c;
  try {
    nlohmann::json j;
    in >> j;
    c.feature_dim = j.at("feature_dim").get<int>();
    c.model_dim = j.at("model_dim").get<int>();
    c.encoder_layers = j.at("encoder_layers").get<int>();
    c.decoder_layers = j.at("decoder_layers").get<int>();
    c.heads = j.at("heads").get<int>();
    c.ffn_dim = j.at("ffn_dim").get<int>();
    c.vocab_words = j.at("vocab_words").get<int>();
    c.max_speakers = j.at("max_speakers").get<int>();
    c.num_timestamps = j.at("num_timestamps").get<int>();
    c.window_s = j.at("window_s").get<double>();
    c.aggregation = aggregation_from_name(j.at("aggregation").get<std::string>());
    c.max_frames = j.at("max_frames").get<int>();
    c.max_text_positions = j.at("max_text_positions").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(str_cat(path, ": ", e.what()));
  }
  c.validate();
  return c;
}

template <class S>
Tensor<S> fddt_apply(const Tensor<S>& h, const StnoMask& mask,
                     const std::array<Tensor<S>, 4>& w, const std::array<Tensor<S>, 4>& b) {
  SAASR_REQUIRE(h.ndim() == 2, DimensionError, "fddt_apply: rank-2 input expected");
  const int t = h.cols();
  SAASR_REQUIRE(mask.frames == t, DimensionError, "fddt_apply: mask has ", mask.frames,
                " frames, input has ", t);
  Tensor<S> out;
  std::vector<S> p(static_cast<size_t>(t));
  for (int c = 0; c < 4; ++c) {
    for (int i = 0; i < t; ++i) p[static_cast<size_t>(i)] = static_cast<S>(mask.prob(i, c));
    auto term = scale_cols(add_bias_cols(matmul(w[static_cast<size_t>(c)], h),
                                         b[static_cast<size_t>(c)]),
                           p);
    out = out.defined() ? add(out, term) : term;
  }
  return out;
}

template <class S>
Tensor<S> SaDicowModel<S>::register_param(const std::string& name, Tensor<S> t, bool is_new) {
  params_.push_back(ParamRef<S>{name, t, is_new});
  return t;
}

template <class S>
SaDicowModel<S>::SaDicowModel(ModelConfig config, Rng& rng) : config_(std::move(config)) {
  config_.validate();
  const int d = config_.model_dim;
  const int df = config_.feature_dim;
  const int ffn = config_.ffn_dim;
  const int u = config_.max_speakers;

  auto weight = [&](const std::string& name, int r, int c, bool is_new) {
    return register_param(
        name, Tensor<S>::randn({r, c}, rng, 1.0 / std::sqrt(static_cast<double>(c)), true),
        is_new);
  };
  auto table = [&](const std::string& name, int r, int c) {
    return register_param(name, Tensor<S>::randn({r, c}, rng, 0.1, true), false);
  };
  auto zeros = [&](const std::string& name, int n, bool is_new) {
    return register_param(name, Tensor<S>::zeros({n}, true), is_new);
  };
  auto ident = [&](const std::string& name, bool is_new) {
    return register_param(name, Tensor<S>::identity(d, true), is_new);
  };
  auto make_ln = [&](const std::string& prefix) {
    LayerNorm ln;
    ln.gamma = register_param(prefix + ".gamma", Tensor<S>::full({d}, S(1), true), false);
    ln.beta = zeros(prefix + ".beta", d, false);
    return ln;
  };
  auto make_attn = [&](const std::string& prefix) {
    Attention a;
    a.wq = weight(prefix + ".q.weight", d, d, false);
    a.bq = zeros(prefix + ".q.bias", d, false);
    a.wk = weight(prefix + ".k.weight", d, d, false);
    a.bk = zeros(prefix + ".k.bias", d, false);
    a.wv = weight(prefix + ".v.weight", d, d, false);
    a.bv = zeros(prefix + ".v.bias", d, false);
    a.wo = weight(prefix + ".out.weight", d, d, false);
    a.bo = zeros(prefix + ".out.bias", d, false);
    return a;
  };
  auto make_ffn = [&](const std::string& prefix) {
    Ffn f;
    f.w1 = weight(prefix + ".in.weight", ffn, d, false);
    f.b1 = zeros(prefix + ".in.bias", ffn, false);
    f.w2 = weight(prefix + ".out.weight", d, ffn, false);
    f.b2 = zeros(prefix + ".out.bias", d, false);
    return f;
  };

  conv1_w_ = register_param(
      "encoder.conv1.weight",
      Tensor<S>::randn({d, df, 3}, rng, 1.0 / std::sqrt(3.0 * df), true), false);
  conv1_b_ = zeros("encoder.conv1.bias", d, false);
  conv2_w_ = register_param(
      "encoder.conv2.weight", Tensor<S>::randn({d, d, 3}, rng, 1.0 / std::sqrt(3.0 * d), true),
      false);
  conv2_b_ = zeros("encoder.conv2.bias", d, false);

  enc_layers_.resize(static_cast<size_t>(config_.encoder_layers));
  for (int l = 0; l < config_.encoder_layers; ++l) {
    const std::string prefix = str_cat("encoder.layers.", l);
    auto& layer = enc_layers_[static_cast<size_t>(l)];
    layer.ln1 = make_ln(prefix + ".ln1");
    layer.attn = make_attn(prefix + ".attn");
    layer.ln2 = make_ln(prefix + ".ln2");
    layer.ffn = make_ffn(prefix + ".ffn");
  }
  enc_ln_post_ = make_ln("encoder.ln_post");

  token_emb_ = table("decoder.token_embedding", config_.num_lexical(), d);
  ts_emb_ = table("decoder.timestamp_embedding", config_.num_timestamps, d);
  pos_emb_ = table("decoder.position_embedding", config_.max_text_positions, d);

  dec_layers_.resize(static_cast<size_t>(config_.decoder_layers));
  for (int l = 0; l < config_.decoder_layers; ++l) {
    const std::string prefix = str_cat("decoder.layers.", l);
    auto& layer = dec_layers_[static_cast<size_t>(l)];
    layer.ln1 = make_ln(prefix + ".ln1");
    layer.self_attn = make_attn(prefix + ".self_attn");
    layer.ln2 = make_ln(prefix + ".ln2");
    layer.cross_attn = make_attn(prefix + ".cross_attn");
    layer.ln3 = make_ln(prefix + ".ln3");
    layer.ffn = make_ffn(prefix + ".ffn");
  }
  dec_ln_post_ = make_ln("decoder.ln_post");

  fddt_.resize(static_cast<size_t>(config_.encoder_layers));
  for (int l = 0; l < config_.encoder_layers; ++l) {
    for (int c = 0; c < 4; ++c) {
      const std::string prefix = str_cat("fddt.", l, ".", kStnoClassNames[c]);
      fddt_[static_cast<size_t>(l)].w[static_cast<size_t>(c)] = ident(prefix + ".weight", true);
      fddt_[static_cast<size_t>(l)].b[static_cast<size_t>(c)] = zeros(prefix + ".bias", d, true);
    }
  }
  for (int s = 0; s < u; ++s) {
    spk_w_.push_back(ident(str_cat("speaker_affine.", s, ".weight"), true));
    spk_b_.push_back(zeros(str_cat("speaker_affine.", s, ".bias"), d, true));
  }
  agg_alpha_ = register_param("aggregation.alpha", Tensor<S>::zeros({u, 1}, true), true);
  for (int s = 0; s < u; ++s) {
    ts_aff_w_.push_back(ident(str_cat("speaker_ts_affine.", s, ".weight"), true));
    ts_aff_b_.push_back(zeros(str_cat("speaker_ts_affine.", s, ".bias"), d, true));
  }
  head_lex_w_ = weight("head.lexical.weight", config_.num_lexical(), d, true);
  head_lex_b_ = zeros("head.lexical.bias", config_.num_lexical(), true);
  head_spk_w_ = weight("head.speaker.weight", u, d, true);
  head_spk_b_ = zeros("head.speaker.bias", u, true);
  head_time_w_ = weight("head.time.weight", config_.num_timestamps, d, true);
  head_time_b_ = zeros("head.time.bias", config_.num_timestamps, true);
}

template <class S>
Tensor<S> SaDicowModel<S>::param(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return p.tensor;
  throw ConfigError(str_cat("unknown parameter '", name, "'"));
}

template <class S>
Tensor<S> SaDicowModel<S>::norm(const Tensor<S>& x, const LayerNorm& p) const {
  return layer_norm_cols(x, p.gamma, p.beta);
}

template <class S>
Tensor<S> SaDicowModel<S>::mix_heads(const Attention& p, const Tensor<S>& q, const Tensor<S>& k,
                                     const Tensor<S>& v,
                                     const std::vector<std::uint8_t>& allowed,
                                     std::vector<S>* probs_out) const {
  const int heads = config_.heads;
  const int hd = config_.model_dim / heads;
  const S inv_sqrt = static_cast<S>(1.0 / std::sqrt(static_cast<double>(hd)));
  const int nq = q.cols(), nk = k.cols();
  if (probs_out) probs_out->assign(static_cast<size_t>(nq) * nk, S(0));
  std::vector<Tensor<S>> outs;
  outs.reserve(static_cast<size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    auto qh = slice_rows(q, h * hd, (h + 1) * hd);
    auto kh = slice_rows(k, h * hd, (h + 1) * hd);
    auto vh = slice_rows(v, h * hd, (h + 1) * hd);
    auto scores = scale(matmul_tn(qh, kh), inv_sqrt);
    auto probs = allowed.empty() ? softmax_rows(scores) : softmax_rows_masked(scores, allowed);
    if (probs_out) {
      const auto& pv = probs.value();
      for (size_t i = 0; i < pv.size(); ++i) (*probs_out)[i] += pv[i] / static_cast<S>(heads);
    }
    outs.push_back(matmul_nt(vh, probs));
  }
  return add_bias_cols(matmul(p.wo, concat_rows(outs)), p.bo);
}

template <class S>
Tensor<S> SaDicowModel<S>::attention(const Attention& p, const Tensor<S>& q_in,
                                     const Tensor<S>& kv_in, bool causal,
                                     std::vector<S>* probs_out) const {
  auto q = add_bias_cols(matmul(p.wq, q_in), p.bq);
  auto k = add_bias_cols(matmul(p.wk, kv_in), p.bk);
  auto v = add_bias_cols(matmul(p.wv, kv_in), p.bv);
  std::vector<std::uint8_t> allowed;
  if (causal) {
    const int n = q_in.cols();
    SAASR_REQUIRE(kv_in.cols() == n, DimensionError,
                  "causal attention needs matching query/key counts");
    allowed.assign(static_cast<size_t>(n) * n, 0);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j <= i; ++j) allowed[static_cast<size_t>(i) * n + j] = 1;
  }
  return mix_heads(p, q, k, v, allowed, probs_out);
}

template <class S>
Tensor<S> SaDicowModel<S>::ffn(const Ffn& p, const Tensor<S>& x) const {
  return add_bias_cols(matmul(p.w2, gelu(add_bias_cols(matmul(p.w1, x), p.b1))), p.b2);
}

template <class S>
Tensor<S> SaDicowModel<S>::front_end(const Tensor<S>& features) const {
  SAASR_REQUIRE(features.ndim() == 2 && features.rows() == config_.feature_dim, DimensionError,
                "front_end: expected ", config_.feature_dim, " feature rows, got shape ",
                shape_str(features.shape()));
  const int len = features.cols();
  SAASR_REQUIRE(len >= 2 && len % 2 == 0, DimensionError, "front_end: input length ", len,
                " must be even");
  SAASR_REQUIRE(len / 2 <= config_.max_frames, DimensionError, "front_end: ", len / 2,
                " output frames exceed max_frames ", config_.max_frames);
  auto h = gelu(conv1d(features, conv1_w_, conv1_b_, 1));
  h = gelu(conv1d(h, conv2_w_, conv2_b_, 2));
  return add_const(h, sinusoid_positions<S>(config_.model_dim, len / 2));
}

template <class S>
Tensor<S> SaDicowModel<S>::encode_from_front_end(const Tensor<S>& h0,
                                                 const StnoMask& mask) const {
  auto h = h0;
  for (int l = 0; l < config_.encoder_layers; ++l) {
    const auto& fd = fddt_[static_cast<size_t>(l)];
    h = fddt_apply(h, mask, fd.w, fd.b);
    const auto& layer = enc_layers_[static_cast<size_t>(l)];
    auto n1 = norm(h, layer.ln1);
    h = add(h, attention(layer.attn, n1, n1, false, nullptr));
    h = add(h, ffn(layer.ffn, norm(h, layer.ln2)));
  }
  return norm(h, enc_ln_post_);
}

template <class S>
Tensor<S> SaDicowModel<S>::encode_speaker_channel(const Tensor<S>& features,
                                                  const StnoMask& mask) const {
  return encode_from_front_end(front_end(features), mask);
}

template <class S>
Tensor<S> SaDicowModel<S>::encode_baseline(const Tensor<S>& features) const {
  auto h = front_end(features);
  for (const auto& layer : enc_layers_) {
    auto n1 = norm(h, layer.ln1);
    h = add(h, attention(layer.attn, n1, n1, false, nullptr));
    h = add(h, ffn(layer.ffn, norm(h, layer.ln2)));
  }
  return norm(h, enc_ln_post_);
}

template <class S>
Tensor<S> SaDicowModel<S>::speaker_affine(const Tensor<S>& channel, int speaker) const {
  SAASR_REQUIRE(0 <= speaker && speaker < config_.max_speakers, IndexError, "speaker ", speaker,
                " outside the ", config_.max_speakers, " slots");
  const auto s = static_cast<size_t>(speaker);
  return add_bias_cols(matmul(spk_w_[s], channel), spk_b_[s]);
}

template <class S>
Tensor<S> SaDicowModel<S>::aggregate(const std::vector<Tensor<S>>& channels,
                                     const std::vector<StnoMask>& masks,
                                     Aggregation strategy) const {
  SAASR_REQUIRE(!channels.empty(), DimensionError, "aggregate: no channels");
  SAASR_REQUIRE(masks.size() == channels.size(), DimensionError, "aggregate: ", channels.size(),
                " channels but ", masks.size(), " masks");
  const int n = static_cast<int>(channels.size());
  const int t = channels[0].cols();
  for (const auto& c : channels)
    SAASR_REQUIRE(c.shape() == channels[0].shape(), DimensionError,
                  "aggregate: channel shapes disagree");
  switch (strategy) {
    case Aggregation::kConcatenation:
      return n == 1 ? channels[0] : concat_cols(channels);
    case Aggregation::kAverage: {
      auto acc = channels[0];
      for (int i = 1; i < n; ++i) acc = add(acc, channels[static_cast<size_t>(i)]);
      return scale(acc, S(1) / static_cast<S>(n));
    }
    case Aggregation::kWeightedSum: {
      std::vector<int> slots;
      slots.reserve(static_cast<size_t>(n));
      for (const auto& m : masks) {
        SAASR_REQUIRE(0 <= m.speaker_index && m.speaker_index < config_.max_speakers, IndexError,
                      "speaker ", m.speaker_index, " outside the ", config_.max_speakers,
                      " slots");
        slots.push_back(m.speaker_index);
      }
      auto wts = transpose(softmax_rows(embedding_cols(agg_alpha_, slots)));  // [n x 1]
      Tensor<S> acc;
      for (int i = 0; i < n; ++i) {
        auto term = scale_by(channels[static_cast<size_t>(i)], slice_rows(wts, i, i + 1));
        acc = acc.defined() ? add(acc, term) : term;
      }
      return acc;
    }
    case Aggregation::kMaskedAverage: {
      // Per-frame weights from each channel's own target activity; frames
      // where every channel is inactive fall back to the uniform mean.
      std::vector<std::vector<S>> wcol(static_cast<size_t>(n),
                                       std::vector<S>(static_cast<size_t>(t)));
      for (const auto& m : masks)
        SAASR_REQUIRE(m.frames == t, DimensionError, "aggregate: mask has ", m.frames,
                      " frames, channels have ", t);
      for (int j = 0; j < t; ++j) {
        S total = S(0);
        for (int i = 0; i < n; ++i) {
          const auto& m = masks[static_cast<size_t>(i)];
          const S a = static_cast<S>(m.prob(j, kTargetOnly)) + static_cast<S>(m.prob(j, kOverlap));
          wcol[static_cast<size_t>(i)][static_cast<size_t>(j)] = a;
          total += a;
        }
        for (int i = 0; i < n; ++i) {
          auto& w = wcol[static_cast<size_t>(i)][static_cast<size_t>(j)];
          w = total > S(0) ? w / total : S(1) / static_cast<S>(n);
        }
      }
      Tensor<S> acc;
      for (int i = 0; i < n; ++i) {
        auto term = scale_cols(channels[static_cast<size_t>(i)], wcol[static_cast<size_t>(i)]);
        acc = acc.defined() ? add(acc, term) : term;
      }
      return acc;
    }
  }
  throw ConfigError("unknown aggregation value");
}

template <class S>
Tensor<S> SaDicowModel<S>::encode(const Tensor<S>& features,
                                  const std::vector<StnoMask>& masks) const {
  SAASR_REQUIRE(!masks.empty(), ConfigError, "encode: empty speaker mask list");
  auto h0 = front_end(features);
  std::vector<Tensor<S>> channels;
  channels.reserve(masks.size());
  for (const auto& mask : masks)
    channels.push_back(speaker_affine(encode_from_front_end(h0, mask), mask.speaker_index));
  return aggregate(channels, masks, config_.aggregation);
}

template <class S>
Tensor<S> SaDicowModel<S>::embed_tokens(const std::vector<int>& ids, bool baseline) const {
  const int n = static_cast<int>(ids.size());
  SAASR_REQUIRE(n > 0, DimensionError, "embed_tokens: empty sequence");
  SAASR_REQUIRE(n <= config_.max_text_positions, DimensionError, "sequence of ", n,
                " tokens exceeds max_text_positions ", config_.max_text_positions);
  const int grid_base = config_.vocab_words;
  std::vector<int> lex_ids(static_cast<size_t>(n), 0), ts_ids(static_cast<size_t>(n), 0),
      pos_ids(static_cast<size_t>(n));
  std::vector<S> lex_mask(static_cast<size_t>(n), S(0)), ts_mask(static_cast<size_t>(n), S(0));
  std::vector<std::vector<S>> spk_mask;
  std::vector<int> spk_used;
  bool any_ts = false;
  for (int j = 0; j < n; ++j) {
    const int id = ids[static_cast<size_t>(j)];
    SAASR_REQUIRE(0 <= id && id < config_.total_tokens(), IndexError, "token id ", id,
                  " outside vocabulary of ", config_.total_tokens());
    pos_ids[static_cast<size_t>(j)] = j;
    if (config_.is_speaker_ts(id)) {
      any_ts = true;
      ts_ids[static_cast<size_t>(j)] = config_.timestamp_of(id);
      ts_mask[static_cast<size_t>(j)] = S(1);
      const int u = config_.speaker_of(id);
      size_t slot = 0;
      while (slot < spk_used.size() && spk_used[slot] != u) ++slot;
      if (slot == spk_used.size()) {
        spk_used.push_back(u);
        spk_mask.emplace_back(static_cast<size_t>(n), S(0));
      }
      spk_mask[slot][static_cast<size_t>(j)] = S(1);
    } else {
      lex_ids[static_cast<size_t>(j)] =
          config_.is_word(id) ? id : config_.vocab_words + (id - grid_base -
                                                            config_.max_speakers *
                                                                config_.num_timestamps);
      lex_mask[static_cast<size_t>(j)] = S(1);
    }
  }
  auto emb = scale_cols(embedding_cols(token_emb_, lex_ids), lex_mask);
  if (any_ts) {
    auto base = embedding_cols(ts_emb_, ts_ids);
    if (baseline) {
      emb = add(emb, scale_cols(base, ts_mask));
    } else {
      for (size_t slot = 0; slot < spk_used.size(); ++slot) {
        const auto u = static_cast<size_t>(spk_used[slot]);
        auto aff = add_bias_cols(matmul(ts_aff_w_[u], base), ts_aff_b_[u]);
        emb = add(emb, scale_cols(aff, spk_mask[slot]));
      }
    }
  }
  return add(emb, embedding_cols(pos_emb_, pos_ids));
}

template <class S>
Tensor<S> SaDicowModel<S>::embed_column(int id, int position, bool baseline) const {
  SAASR_REQUIRE(0 <= id && id < config_.total_tokens(), IndexError, "token id ", id,
                " outside vocabulary of ", config_.total_tokens());
  Tensor<S> emb;
  if (config_.is_speaker_ts(id)) {
    auto base = embedding_cols(ts_emb_, {config_.timestamp_of(id)});
    if (baseline) {
      emb = base;
    } else {
      const auto u = static_cast<size_t>(config_.speaker_of(id));
      emb = add_bias_cols(matmul(ts_aff_w_[u], base), ts_aff_b_[u]);
    }
  } else {
    const int row = config_.is_word(id)
                        ? id
                        : config_.vocab_words +
                              (id - config_.vocab_words -
                               config_.max_speakers * config_.num_timestamps);
    emb = embedding_cols(token_emb_, {row});
  }
  return add(emb, embedding_cols(pos_emb_, {position}));
}

template <class S>
Tensor<S> SaDicowModel<S>::decode(const std::vector<int>& ids, const Tensor<S>& memory,
                                  CrossAttentionMap<S>* attention_map, bool baseline) const {
  SAASR_REQUIRE(memory.ndim() == 2 && memory.rows() == config_.model_dim, DimensionError,
                "decode: memory shape ", shape_str(memory.shape()), " vs model_dim ",
                config_.model_dim);
  auto x = embed_tokens(ids, baseline);
  std::vector<S> probs;
  const int last = config_.decoder_layers - 1;
  for (int l = 0; l < config_.decoder_layers; ++l) {
    const auto& layer = dec_layers_[static_cast<size_t>(l)];
    auto n1 = norm(x, layer.ln1);
    x = add(x, attention(layer.self_attn, n1, n1, true, nullptr));
    x = add(x, attention(layer.cross_attn, norm(x, layer.ln2), memory, false,
                         attention_map && l == last ? &probs : nullptr));
    x = add(x, ffn(layer.ffn, norm(x, layer.ln3)));
  }
  auto h = norm(x, dec_ln_post_);
  auto o_lex = add_bias_cols(matmul(head_lex_w_, h), head_lex_b_);
  auto o_spk = add_bias_cols(matmul(head_spk_w_, h), head_spk_b_);
  auto o_time = add_bias_cols(matmul(head_time_w_, h), head_time_b_);
  if (attention_map) {
    attention_map->positions = static_cast<int>(ids.size());
    attention_map->memory_cols = memory.cols();
    attention_map->weights = std::move(probs);
  }
  return factored_logits(o_lex, o_spk, o_time, config_.vocab_words);
}

template <class S>
Tensor<S> SaDicowModel<S>::forward(const Tensor<S>& features, const std::vector<StnoMask>& masks,
                                   const std::vector<int>& ids) const {
  return decode(ids, encode(features, masks));
}

template <class S>
Tensor<S> SaDicowModel<S>::forward_baseline(const Tensor<S>& features,
                                            const std::vector<int>& ids) const {
  return decode(ids, encode_baseline(features), nullptr, true);
}

template <class S>
CrossAttentionMap<S> SaDicowModel<S>::dump_cross_attention(const std::vector<int>& ids,
                                                           const Tensor<S>& memory) const {
  NoGradGuard guard;
  CrossAttentionMap<S> map;
  decode(ids, memory, &map);
  return map;
}

template <class S>
DecodeState<S> SaDicowModel<S>::begin_decode(const Tensor<S>& memory) const {
  SAASR_REQUIRE(memory.ndim() == 2 && memory.rows() == config_.model_dim, DimensionError,
                "begin_decode: memory shape ", shape_str(memory.shape()), " vs model_dim ",
                config_.model_dim);
  NoGradGuard guard;
  DecodeState<S> state;
  state.memory_cols = memory.cols();
  state.self_k.resize(static_cast<size_t>(config_.decoder_layers));
  state.self_v.resize(static_cast<size_t>(config_.decoder_layers));
  for (const auto& layer : dec_layers_) {
    state.cross_k.push_back(add_bias_cols(matmul(layer.cross_attn.wk, memory),
                                          layer.cross_attn.bk));
    state.cross_v.push_back(add_bias_cols(matmul(layer.cross_attn.wv, memory),
                                          layer.cross_attn.bv));
  }
  return state;
}

template <class S>
std::vector<S> SaDicowModel<S>::extend(DecodeState<S>& state, int token) const {
  NoGradGuard guard;
  const int j = state.length;
  SAASR_REQUIRE(j < config_.max_text_positions, DimensionError, "sequence of ", j + 1,
                " tokens exceeds max_text_positions ", config_.max_text_positions);
  auto x = embed_column(token, j, false);
  static const std::vector<std::uint8_t> kUnmasked;
  for (int l = 0; l < config_.decoder_layers; ++l) {
    const auto& layer = dec_layers_[static_cast<size_t>(l)];
    const auto li = static_cast<size_t>(l);
    auto xn = norm(x, layer.ln1);
    auto q = add_bias_cols(matmul(layer.self_attn.wq, xn), layer.self_attn.bq);
    auto k = add_bias_cols(matmul(layer.self_attn.wk, xn), layer.self_attn.bk);
    auto v = add_bias_cols(matmul(layer.self_attn.wv, xn), layer.self_attn.bv);
    state.self_k[li] = state.self_k[li].defined() ? concat_cols<S>({state.self_k[li], k}) : k;
    state.self_v[li] = state.self_v[li].defined() ? concat_cols<S>({state.self_v[li], v}) : v;
    x = add(x, mix_heads(layer.self_attn, q, state.self_k[li], state.self_v[li], kUnmasked,
                         nullptr));
    auto qc = add_bias_cols(matmul(layer.cross_attn.wq, norm(x, layer.ln2)),
                            layer.cross_attn.bq);
    x = add(x, mix_heads(layer.cross_attn, qc, state.cross_k[li], state.cross_v[li], kUnmasked,
                         nullptr));
    x = add(x, ffn(layer.ffn, norm(x, layer.ln3)));
  }
  auto h = norm(x, dec_ln_post_);
  auto o_lex = add_bias_cols(matmul(head_lex_w_, h), head_lex_b_);
  auto o_spk = add_bias_cols(matmul(head_spk_w_, h), head_spk_b_);
  auto o_time = add_bias_cols(matmul(head_time_w_, h), head_time_b_);
  auto logits = factored_logits(o_lex, o_spk, o_time, config_.vocab_words);
  ++state.length;
  return logits.value();
}

template <class S>
void SaDicowModel<S>::save(const std::string& dir) const {
  fs::create_directories(dir);
  TensorWriter writer;
  for (const auto& p : params_) {
    if constexpr (std::is_same_v<S, float>) {
      writer.add_f32(p.name, p.tensor.shape(), p.tensor.value().data());
    } else {
      writer.add_f64(p.name, p.tensor.shape(), p.tensor.value().data());
    }
  }
  writer.save((fs::path(dir) / "model.bin").string(), (fs::path(dir) / "model.manifest").string());
  save_model_config((fs::path(dir) / "config.json").string(), config_);
}

template <class S>
SaDicowModel<S> SaDicowModel<S>::load(const std::string& dir) {
  auto cfg = load_model_config((fs::path(dir) / "config.json").string());
  Rng rng(0);
  SaDicowModel<S> model(cfg, rng);
  auto reader = TensorReader::open((fs::path(dir) / "model.bin").string(),
                                   (fs::path(dir) / "model.manifest").string());
  for (auto& p : model.params_) {
    SAASR_REQUIRE(reader.has(p.name), ConfigError, "checkpoint lacks tensor '", p.name, "'");
    const auto& entry = reader.entry(p.name);
    SAASR_REQUIRE(entry.shape == p.tensor.shape(), ConfigError, "checkpoint tensor '", p.name,
                  "' has shape ", shape_str(entry.shape), ", model expects ",
                  shape_str(p.tensor.shape()));
    if constexpr (std::is_same_v<S, float>) {
      p.tensor.value() = reader.read_f32(p.name);
    } else {
      p.tensor.value() = reader.read_f64(p.name);
    }
  }
  return model;
}

#define SAASR_INSTANTIATE_MODEL(S)                                              \
  template Tensor<S> fddt_apply(const Tensor<S>&, const StnoMask&,              \
                                const std::array<Tensor<S>, 4>&,                \
                                const std::array<Tensor<S>, 4>&);               \
  template class SaDicowModel<S>;

SAASR_INSTANTIATE_MODEL(float)
SAASR_INSTANTIATE_MODEL(double)

#undef SAASR_INSTANTIATE_MODEL

}  // namespace saasr
