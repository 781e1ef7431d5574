// tools/saasr_main.cc
//
// Command-line front end: gen / train / decode / eval / pipeline. All knobs
// come from one flat config (file plus --set overrides plus shortcut flags);
// the effective configuration is echoed into every run directory so a run
// can be reproduced from its outputs alone. Exit codes: 0 success, 1 runtime
// failure, 2 configuration error.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "saasr/corpus.h"
#include "saasr/decoder.h"
#include "saasr/metrics.h"
#include "saasr/run_config.h"
#include "saasr/trainer.h"

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

// Speaker -> words in start-time order, word times inherited from their
// segment. Used for references and for decoded hypotheses alike.
TranscriptSet transcripts_from_segments(std::vector<DiarizationSegment> segments) {
  std::stable_sort(segments.begin(), segments.end(),
                   [](const DiarizationSegment& a, const DiarizationSegment& b) {
                     if (a.start_s != b.start_s) return a.start_s < b.start_s;
                     if (a.end_s != b.end_s) return a.end_s < b.end_s;
                     return a.speaker_id < b.speaker_id;
                   });
  TranscriptSet out;
  for (const auto& seg : segments) {
    for (const auto& word : split_words(seg.text)) {
      out[seg.speaker_id].push_back(TimedWord{word, seg.start_s, seg.end_s, true});
    }
  }
  return out;
}

std::vector<DiarizationSegment> segments_from_longform(const std::string& recording_id,
                                                       const LongformResult& lf,
                                                       const Vocabulary& vocab) {
  std::vector<DiarizationSegment> out;
  for (const auto& seg : lf.segments) {
    DiarizationSegment d;
    d.recording_id = recording_id;
    // Slots beyond the diarized inventory carry no identity; keep them
    // distinct so misfires show up as leakage instead of vanishing.
    d.speaker_id = seg.speaker_index < static_cast<int>(lf.speaker_order.size())
                       ? lf.speaker_order[static_cast<size_t>(seg.speaker_index)]
                       : str_cat("slot", seg.speaker_index);
    d.start_s = seg.start_s;
    d.end_s = seg.end_s;
    std::string text;
    for (size_t i = 0; i < seg.word_ids.size(); ++i) {
      if (i) text += ' ';
      text += vocab.word(seg.word_ids[i]);
    }
    d.text = text;
    out.push_back(std::move(d));
  }
  return out;
}

const std::vector<SyntheticRecording>& pick_split(const Corpus& corpus,
                                                  const std::string& split) {
  if (split == "train") return corpus.train;
  if (split == "dev") return corpus.dev;
  return corpus.test;
}

Tensor<float> recording_features(const SyntheticRecording& rec) {
  return Tensor<float>::from_data({rec.feature_dim, rec.frames}, rec.features);
}

std::vector<std::pair<std::string, EvalReport>> evaluate_segment_files(
    const std::vector<DiarizationSegment>& ref, const std::vector<DiarizationSegment>& hyp) {
  std::map<std::string, std::vector<DiarizationSegment>> ref_by_rec, hyp_by_rec;
  for (const auto& s : ref) ref_by_rec[s.recording_id].push_back(s);
  for (const auto& s : hyp) hyp_by_rec[s.recording_id].push_back(s);

  std::map<std::string, char> ids;
  for (const auto& [id, segs] : ref_by_rec) ids[id] = 1, (void)segs;
  for (const auto& [id, segs] : hyp_by_rec) ids[id] = 1, (void)segs;

  std::vector<std::pair<std::string, EvalReport>> reports;
  for (const auto& [id, unused] : ids) {
    (void)unused;
    const auto r = transcripts_from_segments(ref_by_rec.count(id) ? ref_by_rec[id]
                                                                  : std::vector<DiarizationSegment>{});
    const auto h = transcripts_from_segments(hyp_by_rec.count(id) ? hyp_by_rec[id]
                                                                  : std::vector<DiarizationSegment>{});
    reports.emplace_back(id, evaluate_transcripts(r, h));
  }
  return reports;
}

// Sum-then-divide over recordings: total errors over total reference words.
double aggregate_cpwer(const std::vector<std::pair<std::string, EvalReport>>& reports) {
  long errors = 0, ref_words = 0;
  for (const auto& [id, r] : reports) {
    (void)id;
    errors += r.sub + r.del + r.ins;
    ref_words += r.ref_words;
  }
  if (ref_words == 0) return errors == 0 ? 0.0 : 1.0;
  return static_cast<double>(errors) / static_cast<double>(ref_words);
}

void echo_config(const RunConfig& config, const std::string& dir) {
  fs::create_directories(dir);
  save_run_config(config, (fs::path(dir) / "run_config.cfg").string());
}

// Row i covers decode position i: bos, the task token, then the window's
// emitted tokens in order.
void write_attention_csv(const std::string& path, const CrossAttentionMap<float>& map,
                         const std::vector<int>& tokens, const ModelConfig& mc) {
  std::ofstream out(path);
  SAASR_REQUIRE(out.good(), ConfigError, "cannot write ", path);
  out << "position,token";
  for (int c = 0; c < map.memory_cols; ++c) out << ",m" << c;
  out << '\n';
  const size_t cols = static_cast<size_t>(map.memory_cols);
  for (int i = 0; i < map.positions; ++i) {
    const int token = i == 0   ? mc.bos_id()
                      : i == 1 ? mc.transcribe_id()
                               : tokens[static_cast<size_t>(i - 2)];
    out << i << ',' << token;
    for (size_t c = 0; c < cols; ++c) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.8g",
                    static_cast<double>(map.weights[static_cast<size_t>(i) * cols + c]));
      out << ',' << buf;
    }
    out << '\n';
  }
}

int cmd_gen(const RunConfig& config) {
  echo_config(config, config.out_dir);
  const Corpus corpus = generate_corpus(config.corpus);
  write_corpus(corpus, config.out_dir);
  std::cout << "corpus " << config.out_dir << ": " << corpus.train.size() << " train, "
            << corpus.dev.size() << " dev, " << corpus.test.size() << " test\n";
  return 0;
}

// cpWER of the dev split under the current beam settings; wired into the
// trainer's validation cadence.
double dev_cpwer(const Corpus& corpus, const SaDicowModel<float>& model, const Vocabulary& vocab,
                 const BeamConfig& beam) {
  std::vector<DiarizationSegment> ref, hyp;
  for (const auto& rec : corpus.dev) {
    const auto lf = longform_decode(recording_features(rec), rec.segments, model, vocab, beam);
    const auto h = segments_from_longform(rec.id, lf, vocab);
    hyp.insert(hyp.end(), h.begin(), h.end());
    ref.insert(ref.end(), rec.segments.begin(), rec.segments.end());
  }
  return aggregate_cpwer(evaluate_segment_files(ref, hyp));
}

int cmd_train(const RunConfig& config) {
  SAASR_REQUIRE(!config.corpus_dir.empty(), ConfigError,
                "train needs corpus_dir (use gen first)");
  echo_config(config, config.out_dir);
  const Corpus corpus = load_corpus(config.corpus_dir);

  TrainConfig tc = config.train;
  SaDicowModel<float> model = [&] {
    if (!config.checkpoint.empty()) {
      auto m = SaDicowModel<float>::load(config.checkpoint);
      if (tc.start_step == 0) tc.start_step = checkpoint_step(config.checkpoint);
      std::cout << "resuming " << config.checkpoint << " at step " << tc.start_step << '\n';
      return m;
    }
    Rng init_rng = Rng(tc.seed).fork(0x0DE1);
    return SaDicowModel<float>(config.model, init_rng);
  }();

  const ModelConfig& mc = model.config();
  const Vocabulary vocab(corpus.words, mc.max_speakers, mc.num_timestamps, mc.window_s);
  ValidationFn validator;
  if (tc.val_every > 0 && !corpus.dev.empty()) {
    const BeamConfig beam = config.beam;
    validator = [&corpus, &vocab, beam](const SaDicowModel<float>& m, int step) {
      (void)step;
      return dev_cpwer(corpus, m, vocab, beam);
    };
  }

  const TrainResult result = train(corpus, model, tc, config.out_dir, validator);
  std::cout << "trained " << result.steps_run << " steps, final loss " << result.final_loss
            << ", checkpoint " << result.checkpoint_dir << '\n';
  return 0;
}

int cmd_decode(const RunConfig& config) {
  SAASR_REQUIRE(!config.corpus_dir.empty(), ConfigError, "decode needs corpus_dir");
  SAASR_REQUIRE(!config.checkpoint.empty(), ConfigError, "decode needs checkpoint");
  echo_config(config, config.out_dir);
  const Corpus corpus = load_corpus(config.corpus_dir);
  const auto model = SaDicowModel<float>::load(config.checkpoint);
  const ModelConfig& mc = model.config();
  const Vocabulary vocab(corpus.words, mc.max_speakers, mc.num_timestamps, mc.window_s);
  const auto& recordings = pick_split(corpus, config.split);
  SAASR_REQUIRE(!recordings.empty(), ConfigError, "split '", config.split, "' is empty");

  if (config.beam.dump_attention) fs::create_directories(fs::path(config.out_dir) / "attention");
  std::vector<DiarizationSegment> ref, hyp;
  std::ofstream tokens_out(fs::path(config.out_dir) / "tokens.jsonl");
  SAASR_REQUIRE(tokens_out.good(), ConfigError, "cannot write tokens.jsonl");

  for (const auto& rec : recordings) {
    const LongformResult lf =
        longform_decode(recording_features(rec), rec.segments, model, vocab, config.beam);
    const auto h = segments_from_longform(rec.id, lf, vocab);
    hyp.insert(hyp.end(), h.begin(), h.end());
    ref.insert(ref.end(), rec.segments.begin(), rec.segments.end());

    nlohmann::json windows = nlohmann::json::array();
    size_t att = 0;
    for (const auto& w : lf.windows) {
      nlohmann::json jw;
      jw["index"] = w.index;
      jw["start_s"] = w.start_s;
      jw["end_s"] = w.end_s;
      jw["ok"] = w.ok;
      if (!w.ok) jw["error"] = w.error;
      jw["tokens"] = w.result.tokens;
      jw["logprob"] = w.result.logprob;
      jw["score"] = w.result.score;
      windows.push_back(jw);
      if (w.ok && config.beam.dump_attention && att < lf.attention.size()) {
        const auto path = fs::path(config.out_dir) / "attention" /
                          str_cat(rec.id, "_w", w.index, ".csv");
        write_attention_csv(path.string(), lf.attention[att++], w.result.tokens, mc);
      }
    }
    nlohmann::json line;
    line["recording_id"] = rec.id;
    line["speaker_order"] = lf.speaker_order;
    line["windows"] = windows;
    tokens_out << line.dump() << '\n';
  }

  save_segments_jsonl((fs::path(config.out_dir) / "hyp.jsonl").string(), hyp);
  save_segments_jsonl((fs::path(config.out_dir) / "ref.jsonl").string(), ref);
  std::cout << "decoded " << recordings.size() << " recordings to " << config.out_dir << '\n';
  return 0;
}

int cmd_eval(const RunConfig& config, const std::string& ref_path, const std::string& hyp_path) {
  echo_config(config, config.out_dir);
  const auto ref = load_segments_jsonl(ref_path);
  const auto hyp = load_segments_jsonl(hyp_path);
  const auto reports = evaluate_segment_files(ref, hyp);

  write_reports_csv((fs::path(config.out_dir) / "eval.csv").string(), reports);
  std::ofstream jsonl(fs::path(config.out_dir) / "reports.jsonl");
  SAASR_REQUIRE(jsonl.good(), ConfigError, "cannot write reports.jsonl");
  for (const auto& [id, report] : reports) {
    nlohmann::json line;
    line["recording"] = id;
    line["report"] = nlohmann::json::parse(report_to_json(report));
    jsonl << line.dump() << '\n';
  }

  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", aggregate_cpwer(reports));
  std::cout << "cpWER " << buf << " over " << reports.size() << " recordings\n";
  return 0;
}

int cmd_pipeline(const RunConfig& config) {
  echo_config(config, config.out_dir);
  const fs::path out(config.out_dir);

  RunConfig gen = config;
  gen.out_dir = (out / "corpus").string();
  cmd_gen(gen);

  RunConfig tr = config;
  tr.corpus_dir = (out / "corpus").string();
  tr.out_dir = (out / "train").string();
  cmd_train(tr);

  RunConfig dec = config;
  dec.corpus_dir = (out / "corpus").string();
  dec.checkpoint = (out / "train" / "final").string();
  dec.out_dir = (out / "decode").string();
  cmd_decode(dec);

  RunConfig ev = config;
  ev.out_dir = (out / "eval").string();
  return cmd_eval(ev, (out / "decode" / "ref.jsonl").string(),
                  (out / "decode" / "hyp.jsonl").string());
}

int run(int argc, char** argv) {
  CLI::App app{"speaker-attributed multi-talker ASR toolkit"};
  app.require_subcommand(1);

  std::string config_path, out_dir, corpus_dir, checkpoint, split, aggregation;
  std::vector<std::string> sets;
  long long seed = 0;
  int beam = 0;
  double spk_ts_weight = 0.0;
  bool dump_attention = false;
  std::string ref_path, hyp_path;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "config file of key = value lines");
    cmd->add_option("--set", sets, "override one config key, key=value")->take_all();
    cmd->add_option("--seed", seed, "corpus and trainer seed");
    cmd->add_option("--out", out_dir, "run directory");
    cmd->add_option("--corpus", corpus_dir, "directory written by gen");
    cmd->add_option("--checkpoint", checkpoint, "model checkpoint directory");
    cmd->add_option("--split", split, "train, dev or test");
    cmd->add_option("--beam", beam, "beam size");
    cmd->add_option("--aggregation", aggregation,
                    "weighted_sum, average, masked_average or concatenation");
    cmd->add_option("--spk-ts-weight", spk_ts_weight, "speaker-timestamp loss weight");
    cmd->add_flag("--dump-attention", dump_attention, "write cross-attention CSVs per window");
  };

  CLI::App* gen = app.add_subcommand("gen", "generate a synthetic corpus");
  CLI::App* tr = app.add_subcommand("train", "train on a generated corpus");
  CLI::App* dec = app.add_subcommand("decode", "decode a split with a trained model");
  CLI::App* ev = app.add_subcommand("eval", "score hypothesis segments against references");
  CLI::App* pipe = app.add_subcommand("pipeline", "gen, train, decode and eval in one run dir");
  for (CLI::App* cmd : {gen, tr, dec, ev, pipe}) add_common(cmd);
  ev->add_option("--ref", ref_path, "reference segments JSONL")->required();
  ev->add_option("--hyp", hyp_path, "hypothesis segments JSONL")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  CLI::App* cmd = app.get_subcommands().front();
  RunConfig config = config_path.empty() ? RunConfig{} : load_run_config(config_path);
  for (const auto& kv : sets) {
    const size_t eq = kv.find('=');
    SAASR_REQUIRE(eq != std::string::npos, ConfigError, "--set expects key=value, got '", kv,
                  "'");
    apply_run_override(config, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (cmd->count("--seed")) apply_run_override(config, "seed", std::to_string(seed));
  if (cmd->count("--out")) config.out_dir = out_dir;
  if (cmd->count("--corpus")) config.corpus_dir = corpus_dir;
  if (cmd->count("--checkpoint")) config.checkpoint = checkpoint;
  if (cmd->count("--split")) config.split = split;
  if (cmd->count("--beam")) config.beam.beam_size = beam;
  if (cmd->count("--aggregation"))
    config.model.aggregation = aggregation_from_name(aggregation);
  if (cmd->count("--spk-ts-weight")) config.train.spk_ts_loss_weight = spk_ts_weight;
  if (cmd->count("--dump-attention")) config.beam.dump_attention = true;
  config.validate();

  if (cmd == gen) return cmd_gen(config);
  if (cmd == tr) return cmd_train(config);
  if (cmd == dec) return cmd_decode(config);
  if (cmd == ev) return cmd_eval(config, ref_path, hyp_path);
  return cmd_pipeline(config);
}

}  // namespace
}  // namespace saasr

int main(int argc, char** argv) {
  try {
    return saasr::run(argc, argv);
  } catch (const saasr::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
