// saasr/trainer.h
//
// Two-stage fine-tuning loop. Stage one updates only the conditioning and
// head parameters with a linear learning-rate warmup; stage two unfreezes the
// base encoder-decoder weights at a separate (typically much lower) rate.
// Targets are teacher-forced serialized streams; speaker-timestamp labels can
// carry a larger cross-entropy weight, and speaker labels may be permuted
// per example so the model cannot tie a tag to a fixed channel.

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "saasr/corpus.h"
#include "saasr/model.h"
#include "saasr/sot.h"
#include "saasr/stno.h"

namespace saasr {

struct TrainConfig {
  int stage1_steps = 1000;
  double stage1_lr = 2e-4;
  int warmup_steps = 500;
  double stage2_lr_new = 2e-4;
  double stage2_lr_base = 2e-6;
  // Examples accumulated per optimizer update.
  int effective_batch = 16;
  int max_steps = 5000;
  double spk_ts_loss_weight = 5.0;
  std::uint64_t seed = 1;
  bool augment_speaker_order = true;
  // Parameters whose registry name starts with one of these are never
  // updated, e.g. {"fddt."} pins the conditioning at identity.
  std::vector<std::string> freeze_prefixes;
  // First step to run is start_step + 1; schedules use absolute steps, so a
  // resumed run continues where the checkpoint's recorded step left off.
  int start_step = 0;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int checkpoint_every = 0;  // 0: only the final checkpoint
  int val_every = 0;         // 0: never call the validation hook
  // Stop once the mean loss over the last 10 steps drops below this; 0 = off.
  double early_stop_loss = 0.0;

  void validate() const;
};

struct TrainingExample {
  std::string recording_id;
  Tensor<float> features;        // d_f x 2T
  std::vector<StnoMask> masks;   // encoder frame grid, ascending speaker_index
  std::vector<int> target;       // serialized segment stream, terminated by EOS
  // Current label of each originally assigned speaker slot (audit trail).
  std::vector<int> permutation;
};

// Speaker slots are assigned by first onset (silent inventory speakers come
// last); masks live on the encoder frame grid, twice the input frame size.
TrainingExample make_training_example(const SyntheticRecording& recording,
                                      const Vocabulary& vocab, const ModelConfig& config);

// Relabels speaker slots by perm (old slot u becomes perm[u]) consistently
// across masks, channel order, and target speaker-timestamp tokens.
TrainingExample apply_speaker_permutation(const TrainingExample& example,
                                          const std::vector<int>& perm,
                                          const Vocabulary& vocab);

// Applies a uniformly random permutation over the example's active slots.
TrainingExample speaker_order_augment(const TrainingExample& example, Rng& rng,
                                      const Vocabulary& vocab);

struct LossInfo {
  Tensor<float> loss;
  int target_tokens = 0;      // supervised positions, one per target token
  double total_weight = 0.0;  // normalizer: sum of per-token weights
  std::vector<float> token_weights;
};

// Teacher-forced weighted cross-entropy over the joint output distribution,
// supervising exactly the target tokens (the decoder sees BOS and the task
// prefix in front of them). The target stream is validated first and
// rejected if malformed.
LossInfo compute_loss(const SaDicowModel<float>& model, const TrainingExample& example,
                      const Vocabulary& vocab, double spk_ts_loss_weight);

// Decoupled-weight-decay Adam over float parameters with double moments.
// A negative learning rate leaves that parameter completely untouched
// (no moment or step-count update), which is how freezing is implemented.
class AdamW {
 public:
  AdamW(std::vector<Tensor<float>> params, double beta1, double beta2, double eps,
        double weight_decay);
  void step(const std::vector<double>& lr);

 private:
  std::vector<Tensor<float>> params_;
  std::vector<std::vector<double>> m_, v_;
  std::vector<long> t_;
  double beta1_, beta2_, eps_, weight_decay_;
};

struct TrainResult {
  int steps_run = 0;
  double final_loss = 0.0;
  std::string checkpoint_dir;
  std::string metrics_path;
};

using ValidationFn = std::function<double(const SaDicowModel<float>& model, int step)>;

// Reads the step recorded in <dir>/state.json, written next to every saved
// checkpoint so a resumed run knows where the schedule left off.
int checkpoint_step(const std::string& dir);

// Trains on corpus.train, logging step,stage,lr_new,lr_base,loss,val_cpwer to
// <out_dir>/metrics.csv and saving the final model to <out_dir>/final. A
// non-finite batch loss aborts after writing <out_dir>/diverged_last_good.
TrainResult train(const Corpus& corpus, SaDicowModel<float>& model, const TrainConfig& config,
                  const std::string& out_dir, const ValidationFn& validate = {});

}  // namespace saasr
