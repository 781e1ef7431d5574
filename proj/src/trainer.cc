#include "saasr/trainer.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <deque>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace fs = std::filesystem;

namespace saasr {
namespace {

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string tok;
  while (in >> tok) out.push_back(tok);
  return out;
}

void require_permutation(const std::vector<int>& perm, int n) {
  SAASR_REQUIRE(static_cast<int>(perm.size()) == n, ConfigError, "permutation size ",
                perm.size(), " for ", n, " speaker slots");
  std::vector<char> seen(static_cast<size_t>(n), 0);
  for (int v : perm) {
    SAASR_REQUIRE(0 <= v && v < n && !seen[static_cast<size_t>(v)], ConfigError,
                  "invalid permutation entry ", v);
    seen[static_cast<size_t>(v)] = 1;
  }
}

std::string format_double(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

void shuffle_indices(std::vector<int>& order, Rng& rng) {
  for (int i = static_cast<int>(order.size()) - 1; i > 0; --i) {
    std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(rng.uniform_int(0, i))]);
  }
}

bool has_frozen_prefix(const std::string& name, const std::vector<std::string>& prefixes) {
  for (const auto& p : prefixes) {
    if (name.compare(0, p.size(), p) == 0) return true;
  }
  return false;
}

void save_checkpoint(const SaDicowModel<float>& model, const std::string& dir, int step) {
  model.save(dir);
  nlohmann::json j;
  j["step"] = step;
  std::ofstream out(fs::path(dir) / "state.json");
  SAASR_REQUIRE(out.good(), ConfigError, "cannot write ", dir, "/state.json");
  out << j.dump(2) << '\n';
}

}  // namespace

int checkpoint_step(const std::string& dir) {
  const fs::path path = fs::path(dir) / "state.json";
  std::ifstream in(path);
  SAASR_REQUIRE(in.good(), ConfigError, "cannot read ", path.string());
  nlohmann::json j;
  try {
    in >> j;
    return j.at("step").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(str_cat("malformed ", path.string(), ": ", e.what()));
  }
}

void TrainConfig::validate() const {
  SAASR_REQUIRE(max_steps >= 0, ConfigError, "max_steps ", max_steps);
  SAASR_REQUIRE(stage1_steps >= 0 && stage1_steps <= max_steps, ConfigError, "stage1_steps ",
                stage1_steps, " must lie in [0, max_steps=", max_steps, "]");
  SAASR_REQUIRE(warmup_steps >= 0, ConfigError, "warmup_steps ", warmup_steps);
  SAASR_REQUIRE(stage1_lr > 0 && stage2_lr_new > 0 && stage2_lr_base > 0, ConfigError,
                "learning rates must be positive");
  SAASR_REQUIRE(effective_batch >= 1, ConfigError, "effective_batch ", effective_batch);
  SAASR_REQUIRE(spk_ts_loss_weight > 0, ConfigError, "spk_ts_loss_weight ", spk_ts_loss_weight);
  SAASR_REQUIRE(weight_decay >= 0, ConfigError, "weight_decay ", weight_decay);
  SAASR_REQUIRE(0 <= beta1 && beta1 < 1 && 0 <= beta2 && beta2 < 1, ConfigError,
                "betas must lie in [0, 1)");
  SAASR_REQUIRE(eps > 0, ConfigError, "eps ", eps);
  SAASR_REQUIRE(checkpoint_every >= 0 && val_every >= 0, ConfigError,
                "cadences must be non-negative");
  SAASR_REQUIRE(early_stop_loss >= 0, ConfigError, "early_stop_loss ", early_stop_loss);
  SAASR_REQUIRE(start_step >= 0 && start_step <= max_steps, ConfigError, "start_step ",
                start_step, " must lie in [0, max_steps=", max_steps, "]");
}

TrainingExample make_training_example(const SyntheticRecording& recording,
                                      const Vocabulary& vocab, const ModelConfig& config) {
  SAASR_REQUIRE(recording.frames % 2 == 0, DimensionError, "recording ", recording.id, " has ",
                recording.frames, " frames; the stride-2 front end needs an even count");
  SAASR_REQUIRE(recording.feature_dim == config.feature_dim, DimensionError, "recording ",
                recording.id, " feature dim ", recording.feature_dim, " vs model ",
                config.feature_dim);
  const int enc_frames = recording.frames / 2;
  SAASR_REQUIRE(enc_frames <= config.max_frames, DimensionError, "recording ", recording.id,
                " spans ", enc_frames, " encoder frames, model limit ", config.max_frames);
  const double enc_dur = 2.0 * recording.frame_duration_s;

  std::vector<std::string> order = first_onset_speaker_order(recording.segments);
  for (const auto& [label, words] : recording.speaker_words) {
    (void)words;
    if (std::find(order.begin(), order.end(), label) == order.end()) order.push_back(label);
  }
  SAASR_REQUIRE(static_cast<int>(order.size()) <= config.max_speakers, ConfigError, "recording ",
                recording.id, " uses ", order.size(), " speakers, model limit ",
                config.max_speakers);

  TrainingExample ex;
  ex.recording_id = recording.id;
  ex.features = Tensor<float>::from_data({recording.feature_dim, recording.frames},
                                         recording.features);
  ex.masks = stno_for_all_speakers(recording.segments, order, 0.0, enc_frames * enc_dur,
                                   enc_frames, enc_dur, config.max_speakers);

  std::vector<AttributedSegment> segs;
  for (const auto& seg : recording.segments) {
    AttributedSegment a;
    a.speaker_index = static_cast<int>(
        std::find(order.begin(), order.end(), seg.speaker_id) - order.begin());
    a.start_s = seg.start_s;
    a.end_s = seg.end_s;
    for (const auto& w : split_words(seg.text)) a.word_ids.push_back(vocab.word_id(w));
    segs.push_back(std::move(a));
  }
  ex.target = serialize(std::move(segs), vocab);
  ex.target.push_back(vocab.eos_id());
  ex.permutation.resize(order.size());
  std::iota(ex.permutation.begin(), ex.permutation.end(), 0);
  return ex;
}

TrainingExample apply_speaker_permutation(const TrainingExample& example,
                                          const std::vector<int>& perm,
                                          const Vocabulary& vocab) {
  const int n = static_cast<int>(example.masks.size());
  require_permutation(perm, n);

  TrainingExample out = example;
  for (auto& mask : out.masks) {
    SAASR_REQUIRE(0 <= mask.speaker_index && mask.speaker_index < n, ConfigError,
                  "mask speaker index ", mask.speaker_index, " outside the ", n, " active slots");
    mask.speaker_index = perm[static_cast<size_t>(mask.speaker_index)];
  }
  std::sort(out.masks.begin(), out.masks.end(),
            [](const StnoMask& a, const StnoMask& b) { return a.speaker_index < b.speaker_index; });

  for (auto& id : out.target) {
    if (!vocab.is_speaker_ts(id)) continue;
    const int u = vocab.speaker_of(id);
    SAASR_REQUIRE(u < n, ConfigError, "target references speaker ", u, " but only ", n,
                  " slots are active");
    id = vocab.speaker_ts_id(perm[static_cast<size_t>(u)], vocab.timestamp_of(id));
  }
  for (auto& slot : out.permutation) slot = perm[static_cast<size_t>(slot)];
  return out;
}

TrainingExample speaker_order_augment(const TrainingExample& example, Rng& rng,
                                      const Vocabulary& vocab) {
  const int n = static_cast<int>(example.masks.size());
  std::vector<int> perm(static_cast<size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  for (int i = n - 1; i > 0; --i) {
    std::swap(perm[static_cast<size_t>(i)], perm[static_cast<size_t>(rng.uniform_int(0, i))]);
  }
  return apply_speaker_permutation(example, perm, vocab);
}

LossInfo compute_loss(const SaDicowModel<float>& model, const TrainingExample& example,
                      const Vocabulary& vocab, double spk_ts_loss_weight) {
  SAASR_REQUIRE(spk_ts_loss_weight > 0, ConfigError, "spk_ts_loss_weight ", spk_ts_loss_weight);
  SAASR_REQUIRE(!example.target.empty(), ConfigError, "empty training target for ",
                example.recording_id);
  const auto violations = validate_stream(example.target, vocab);
  if (!violations.empty()) {
    const auto& v = violations.front();
    throw Error(str_cat("training target for ", example.recording_id, " is malformed at token ",
                        v.position, ": ", v.message));
  }

  // Position fed BOS predicts the fixed task prefix at weight zero; the
  // remaining positions predict the target tokens themselves.
  std::vector<int> inputs = {vocab.bos_id(), vocab.transcribe_id()};
  inputs.insert(inputs.end(), example.target.begin(), example.target.end() - 1);
  std::vector<int> labels = {vocab.transcribe_id()};
  labels.insert(labels.end(), example.target.begin(), example.target.end());

  std::vector<float> weights(labels.size(), 1.0f);
  weights[0] = 0.0f;
  for (size_t i = 1; i < labels.size(); ++i) {
    if (vocab.is_speaker_ts(labels[i])) weights[i] = static_cast<float>(spk_ts_loss_weight);
  }

  const Tensor<float> logits = model.forward(example.features, example.masks, inputs);
  LossInfo info;
  info.loss = softmax_cross_entropy(logits, labels, weights);
  info.target_tokens = static_cast<int>(example.target.size());
  info.total_weight = std::accumulate(weights.begin(), weights.end(), 0.0);
  info.token_weights.assign(weights.begin() + 1, weights.end());
  return info;
}

AdamW::AdamW(std::vector<Tensor<float>> params, double beta1, double beta2, double eps,
             double weight_decay)
    : params_(std::move(params)),
      beta1_(beta1),
      beta2_(beta2),
      eps_(eps),
      weight_decay_(weight_decay) {
  m_.resize(params_.size());
  v_.resize(params_.size());
  t_.assign(params_.size(), 0);
  for (size_t i = 0; i < params_.size(); ++i) {
    m_[i].assign(params_[i].value().size(), 0.0);
    v_[i].assign(params_[i].value().size(), 0.0);
  }
}

void AdamW::step(const std::vector<double>& lr) {
  SAASR_REQUIRE(lr.size() == params_.size(), DimensionError, "lr entries ", lr.size(), " for ",
                params_.size(), " parameters");
  for (size_t i = 0; i < params_.size(); ++i) {
    if (lr[i] < 0) continue;
    t_[i] += 1;
    const double corr1 = 1.0 - std::pow(beta1_, static_cast<double>(t_[i]));
    const double corr2 = 1.0 - std::pow(beta2_, static_cast<double>(t_[i]));
    auto& val = params_[i].value();
    const auto& grad = params_[i].grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (size_t e = 0; e < val.size(); ++e) {
      const double g = static_cast<double>(grad[e]);
      m[e] = beta1_ * m[e] + (1.0 - beta1_) * g;
      v[e] = beta2_ * v[e] + (1.0 - beta2_) * g * g;
      const double update = (m[e] / corr1) / (std::sqrt(v[e] / corr2) + eps_) +
                            weight_decay_ * static_cast<double>(val[e]);
      val[e] = static_cast<float>(static_cast<double>(val[e]) - lr[i] * update);
    }
  }
}

TrainResult train(const Corpus& corpus, SaDicowModel<float>& model, const TrainConfig& config,
                  const std::string& out_dir, const ValidationFn& validate) {
  config.validate();
  SAASR_REQUIRE(!corpus.train.empty(), ConfigError, "training split is empty");
  fs::create_directories(out_dir);

  const ModelConfig& mc = model.config();
  const Vocabulary vocab(corpus.words, mc.max_speakers, mc.num_timestamps, mc.window_s);
  SAASR_REQUIRE(vocab.total_tokens() == mc.total_tokens(), ConfigError,
                "corpus vocabulary (", vocab.total_tokens(), " tokens) does not match the model (",
                mc.total_tokens(), ")");

  std::vector<TrainingExample> examples;
  examples.reserve(corpus.train.size());
  for (const auto& rec : corpus.train) examples.push_back(make_training_example(rec, vocab, mc));

  auto params = model.parameters();
  std::vector<Tensor<float>> tensors;
  for (const auto& p : params) tensors.push_back(p.tensor);
  AdamW optimizer(tensors, config.beta1, config.beta2, config.eps, config.weight_decay);

  Rng data_rng = Rng(config.seed).fork(0xDA7A);
  Rng aug_rng = Rng(config.seed).fork(0xA06);
  std::vector<int> order(examples.size());
  std::iota(order.begin(), order.end(), 0);
  shuffle_indices(order, data_rng);
  size_t cursor = 0;

  const std::string metrics_path = (fs::path(out_dir) / "metrics.csv").string();
  std::ofstream csv(metrics_path);
  SAASR_REQUIRE(csv.good(), ConfigError, "cannot write ", metrics_path);
  csv << "step,stage,lr_new,lr_base,loss,val_cpwer\n";

  // Parameter values from before the most recent update; restored on a
  // non-finite loss so the saved checkpoint predates the divergence.
  std::vector<std::vector<float>> rollback;
  for (const auto& t : tensors) rollback.push_back(t.value());

  std::deque<double> recent;
  TrainResult result;
  result.steps_run = config.start_step;
  result.metrics_path = metrics_path;
  double last_loss = 0.0;

  for (int step = config.start_step + 1; step <= config.max_steps; ++step) {
    const int stage = step <= config.stage1_steps ? 1 : 2;
    double lr_new;
    if (stage == 1) {
      lr_new = config.warmup_steps > 0 && step <= config.warmup_steps
                   ? config.stage1_lr * step / config.warmup_steps
                   : config.stage1_lr;
    } else {
      lr_new = config.stage2_lr_new;
    }
    const double lr_base = stage == 1 ? 0.0 : config.stage2_lr_base;

    for (auto& t : tensors) t.zero_grad();
    double batch_loss = 0.0;
    for (int b = 0; b < config.effective_batch; ++b) {
      if (cursor == order.size()) {
        shuffle_indices(order, data_rng);
        cursor = 0;
      }
      const TrainingExample& base = examples[static_cast<size_t>(order[cursor++])];
      const TrainingExample ex = config.augment_speaker_order
                                     ? speaker_order_augment(base, aug_rng, vocab)
                                     : base;
      LossInfo info = compute_loss(model, ex, vocab, config.spk_ts_loss_weight);
      batch_loss += static_cast<double>(info.loss.item());
      scale(info.loss, 1.0f / static_cast<float>(config.effective_batch)).backward();
    }
    const double loss = batch_loss / config.effective_batch;

    if (!std::isfinite(loss)) {
      for (size_t i = 0; i < tensors.size(); ++i) tensors[i].value() = rollback[i];
      const std::string dir = (fs::path(out_dir) / "diverged_last_good").string();
      save_checkpoint(model, dir, step - 1);
      throw Error(str_cat("loss diverged at step ", step, "; last good checkpoint saved to ",
                          dir));
    }
    for (size_t i = 0; i < tensors.size(); ++i) rollback[i] = tensors[i].value();

    std::vector<double> lr(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
      if (has_frozen_prefix(params[i].name, config.freeze_prefixes)) {
        lr[i] = -1.0;
      } else if (params[i].is_new) {
        lr[i] = lr_new;
      } else {
        lr[i] = stage == 1 ? -1.0 : lr_base;
      }
    }
    optimizer.step(lr);

    std::string val_field;
    if (validate && config.val_every > 0 && step % config.val_every == 0) {
      val_field = format_double(validate(model, step));
    }
    csv << step << ',' << stage << ',' << format_double(lr_new) << ','
        << format_double(stage == 1 ? 0.0 : lr_base) << ',' << format_double(loss) << ','
        << val_field << '\n';
    csv.flush();

    if (config.checkpoint_every > 0 && step % config.checkpoint_every == 0) {
      char name[32];
      std::snprintf(name, sizeof name, "step_%06d", step);
      save_checkpoint(model, (fs::path(out_dir) / name).string(), step);
    }

    last_loss = loss;
    result.steps_run = step;
    recent.push_back(loss);
    if (recent.size() > 10) recent.pop_front();
    if (config.early_stop_loss > 0 && recent.size() == 10) {
      const double avg = std::accumulate(recent.begin(), recent.end(), 0.0) / 10.0;
      if (avg < config.early_stop_loss) break;
    }
  }

  result.final_loss = last_loss;
  result.checkpoint_dir = (fs::path(out_dir) / "final").string();
  save_checkpoint(model, result.checkpoint_dir, result.steps_run);
  return result;
}

}  // namespace saasr
