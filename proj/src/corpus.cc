// saasr/corpus.cc

#include "saasr/corpus.h"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "saasr/tensor_io.h"

namespace saasr {

namespace {

namespace fs = std::filesystem;

constexpr std::uint64_t kSignatureStream = 0x516e;

}  // namespace

std::string overlap_mode_name(OverlapMode mode) {
  return mode == OverlapMode::kLeftAlignedFull ? "left_aligned_full" : "meeting_sparse";
}

OverlapMode overlap_mode_from_name(const std::string& name) {
  if (name == "left_aligned_full") return OverlapMode::kLeftAlignedFull;
  if (name == "meeting_sparse") return OverlapMode::kMeetingSparse;
  throw ConfigError(str_cat("unknown overlap mode '", name, "'"));
}

void CorpusSpec::validate() const {
  SAASR_REQUIRE(num_train >= 0 && num_dev >= 0 && num_test >= 0, ConfigError,
                "split sizes must be non-negative");
  SAASR_REQUIRE(num_train + num_dev + num_test > 0, ConfigError, "corpus would be empty");
  SAASR_REQUIRE(1 <= speakers_min && speakers_min <= speakers_max, ConfigError,
                "speaker range [", speakers_min, ",", speakers_max, "] is malformed");
  SAASR_REQUIRE(speakers_max <= max_speaker_slots, ConfigError, "speakers_max ", speakers_max,
                " exceeds the ", max_speaker_slots, " speaker slots");
  SAASR_REQUIRE(vocab_size >= 2, ConfigError, "vocab_size must be at least 2");
  SAASR_REQUIRE(words_min >= 1 && words_min <= words_max, ConfigError, "word range [",
                words_min, ",", words_max, "] is malformed");
  SAASR_REQUIRE(words_max <= vocab_size, ConfigError, "utterances draw ", words_max,
                " distinct words but the vocabulary has only ", vocab_size);
  SAASR_REQUIRE(window_s > 0 && frame_duration_s > 0, ConfigError,
                "window and frame duration must be positive");
  SAASR_REQUIRE(signature_frames >= 1, ConfigError, "signature_frames must be positive");
  SAASR_REQUIRE(feature_dim >= 1, ConfigError, "feature_dim must be positive");
  SAASR_REQUIRE(noise_std >= 0, ConfigError, "noise_std must be non-negative");
  SAASR_REQUIRE(overlap_prob >= 0 && overlap_prob <= 1, ConfigError,
                "overlap_prob must be a probability");
  SAASR_REQUIRE(overlap_max_frac >= 0 && overlap_max_frac <= 1, ConfigError,
                "overlap_max_frac must be in [0,1]");
  const double utt_max = words_max * signature_frames * frame_duration_s;
  SAASR_REQUIRE(utt_max <= window_s, ConfigError, "longest utterance (", utt_max,
                "s) does not fit the ", window_s, "s window");
}

std::vector<std::string> make_word_list(int vocab_size) {
  std::vector<std::string> words;
  words.reserve(static_cast<size_t>(vocab_size));
  for (int i = 0; i < vocab_size; ++i) words.push_back(str_cat("w", i));
  return words;
}

namespace {

struct Utterance {
  int speaker = 0;
  double start_s = 0.0;
  std::vector<int> word_ids;
  double duration_s(const CorpusSpec& spec) const {
    return static_cast<double>(word_ids.size()) * spec.signature_frames * spec.frame_duration_s;
  }
};

std::vector<int> draw_words(Rng& rng, const CorpusSpec& spec) {
  const int count =
      spec.words_min + static_cast<int>(rng.uniform_int(0, spec.words_max - spec.words_min));
  // Distinct words within one utterance: partial Fisher-Yates over the ids.
  std::vector<int> ids(static_cast<size_t>(spec.vocab_size));
  for (int i = 0; i < spec.vocab_size; ++i) ids[static_cast<size_t>(i)] = i;
  for (int i = 0; i < count; ++i) {
    const auto j = i + static_cast<int>(rng.uniform_int(0, spec.vocab_size - 1 - i));
    std::swap(ids[static_cast<size_t>(i)], ids[static_cast<size_t>(j)]);
  }
  ids.resize(static_cast<size_t>(count));
  return ids;
}

std::vector<Utterance> place_left_aligned(Rng& rng, const CorpusSpec& spec, int speakers) {
  std::vector<Utterance> utts;
  for (int u = 0; u < speakers; ++u) {
    Utterance utt;
    utt.speaker = u;
    utt.start_s = 0.0;
    utt.word_ids = draw_words(rng, spec);
    utts.push_back(std::move(utt));
  }
  return utts;
}

std::vector<Utterance> place_meeting(Rng& rng, const CorpusSpec& spec, int speakers) {
  std::vector<Utterance> utts;
  std::vector<double> last_end(static_cast<size_t>(speakers), 0.0);
  // Onsets snap to the post-subsampling frame grid so segment boundaries sit
  // exactly on mask frames and timestamp bins.
  const double grid = 2.0 * spec.frame_duration_s;
  double prev_start = 0.0, prev_end = 0.0;
  int prev_speaker = -1;
  double cursor = rng.uniform(0.0, spec.gap_mean_s);
  while (true) {
    Utterance utt;
    utt.word_ids = draw_words(rng, spec);
    int speaker = static_cast<int>(rng.uniform_int(0, speakers - 1));
    double onset;
    const bool overlap = prev_speaker >= 0 && rng.uniform() < spec.overlap_prob;
    if (overlap) {
      if (speaker == prev_speaker) speaker = (speaker + 1) % speakers;
      const double back = rng.uniform(0.0, spec.overlap_max_frac * (prev_end - prev_start));
      onset = prev_end - back;
    } else {
      onset = cursor - std::log(1.0 - rng.uniform()) * spec.gap_mean_s;
    }
    onset = std::round(onset / grid) * grid;
    onset = std::max(onset, last_end[static_cast<size_t>(speaker)]);
    utt.speaker = speaker;
    utt.start_s = onset;
    const double end = onset + utt.duration_s(spec);
    if (end > spec.window_s) break;
    last_end[static_cast<size_t>(speaker)] = end;
    prev_start = onset;
    prev_end = end;
    prev_speaker = speaker;
    cursor = std::max(cursor, end);
    utts.push_back(std::move(utt));
  }
  return utts;
}

// Signature bank: word w occupies rows [w*signature_frames, (w+1)*...) of a
// conceptual (vocab * sig_frames) x feature_dim table, drawn from a stream
// that depends only on the corpus seed.
std::vector<float> draw_signatures(const CorpusSpec& spec, Rng& corpus_rng) {
  Rng rng = corpus_rng.fork(kSignatureStream);
  std::vector<float> bank(static_cast<size_t>(spec.vocab_size) * spec.signature_frames *
                          spec.feature_dim);
  for (auto& x : bank) x = static_cast<float>(rng.normal());
  return bank;
}

SyntheticRecording render_recording(const CorpusSpec& spec, const std::vector<float>& signatures,
                                    const std::vector<std::string>& words, const std::string& id,
                                    Rng rng) {
  const int speakers =
      spec.speakers_min + static_cast<int>(rng.uniform_int(0, spec.speakers_max - spec.speakers_min));
  auto utts = spec.overlap_mode == OverlapMode::kLeftAlignedFull
                  ? place_left_aligned(rng, spec, speakers)
                  : place_meeting(rng, spec, speakers);

  SyntheticRecording rec;
  rec.id = id;
  rec.feature_dim = spec.feature_dim;
  rec.frames = spec.frames();
  rec.frame_duration_s = spec.frame_duration_s;
  rec.features.assign(static_cast<size_t>(rec.feature_dim) * rec.frames, 0.0f);

  std::vector<std::vector<float>> envelopes(static_cast<size_t>(speakers));
  for (int u = 0; u < speakers; ++u) {
    envelopes[static_cast<size_t>(u)].resize(static_cast<size_t>(spec.feature_dim));
    for (auto& e : envelopes[static_cast<size_t>(u)])
      e = static_cast<float>(std::exp(spec.voice_strength * rng.normal()));
  }
  std::vector<std::string> labels;
  for (int u = 0; u < speakers; ++u) {
    labels.push_back(str_cat("spk", u));
    rec.speaker_words[labels.back()] = {};
    rec.contributions[labels.back()].assign(rec.features.size(), 0.0f);
  }

  std::sort(utts.begin(), utts.end(), [](const Utterance& a, const Utterance& b) {
    if (a.start_s != b.start_s) return a.start_s < b.start_s;
    return a.speaker < b.speaker;
  });
  for (const auto& utt : utts) {
    const auto& label = labels[static_cast<size_t>(utt.speaker)];
    auto& contrib = rec.contributions[label];
    const auto& env = envelopes[static_cast<size_t>(utt.speaker)];
    const int start_frame = static_cast<int>(std::lround(utt.start_s / spec.frame_duration_s));
    std::string text;
    for (size_t k = 0; k < utt.word_ids.size(); ++k) {
      const int word = utt.word_ids[k];
      if (!text.empty()) text += " ";
      text += words[static_cast<size_t>(word)];
      rec.speaker_words[label].push_back(words[static_cast<size_t>(word)]);
      for (int f = 0; f < spec.signature_frames; ++f) {
        const int frame = start_frame + static_cast<int>(k) * spec.signature_frames + f;
        if (frame < 0 || frame >= rec.frames) continue;
        const size_t sig_base =
            (static_cast<size_t>(word) * spec.signature_frames + f) * spec.feature_dim;
        for (int d = 0; d < spec.feature_dim; ++d)
          contrib[static_cast<size_t>(d) * rec.frames + frame] +=
              env[static_cast<size_t>(d)] * signatures[sig_base + static_cast<size_t>(d)];
      }
    }
    DiarizationSegment seg;
    seg.recording_id = id;
    seg.speaker_id = label;
    seg.start_s = utt.start_s;
    seg.end_s = utt.start_s + utt.duration_s(spec);
    seg.text = text;
    rec.segments.push_back(std::move(seg));
  }

  for (const auto& [label, contrib] : rec.contributions)
    for (size_t i = 0; i < rec.features.size(); ++i) rec.features[i] += contrib[i];
  if (spec.noise_std > 0)
    for (auto& x : rec.features) x += static_cast<float>(rng.normal(0.0, spec.noise_std));
  validate_segments(rec.segments);
  return rec;
}

}  // namespace

Corpus generate_corpus(const CorpusSpec& spec) {
  spec.validate();
  Corpus corpus;
  corpus.spec = spec;
  corpus.words = make_word_list(spec.vocab_size);
  Rng corpus_rng(spec.seed);
  const auto signatures = draw_signatures(spec, corpus_rng);
  const struct {
    const char* name;
    int count;
    std::vector<SyntheticRecording>* out;
    std::uint64_t base;
  } splits[] = {{"train", spec.num_train, &corpus.train, 1u << 20},
                {"dev", spec.num_dev, &corpus.dev, 2u << 20},
                {"test", spec.num_test, &corpus.test, 3u << 20}};
  for (const auto& split : splits) {
    for (int i = 0; i < split.count; ++i) {
      char id[64];
      std::snprintf(id, sizeof(id), "%s_%04d", split.name, i);
      split.out->push_back(render_recording(spec, signatures, corpus.words, id,
                                            corpus_rng.fork(split.base + static_cast<std::uint64_t>(i))));
    }
  }
  return corpus;
}

MixtureSnapshot mixture_snapshot(const SyntheticRecording& rec) {
  MixtureSnapshot snap;
  std::vector<std::string> labels;
  for (const auto& [label, _] : rec.speaker_words) labels.push_back(label);
  snap.active_fraction.assign(labels.size(), 0.0);
  snap.solo_fraction.assign(labels.size(), 0.0);
  int any = 0, multi = 0, silent = 0;
  for (int t = 0; t < rec.frames; ++t) {
    const double mid = (t + 0.5) * rec.frame_duration_s;
    int active = 0;
    int last_active = -1;
    for (size_t u = 0; u < labels.size(); ++u) {
      for (const auto& seg : rec.segments) {
        if (seg.speaker_id != labels[u]) continue;
        if (seg.start_s <= mid && mid < seg.end_s) {
          ++active;
          last_active = static_cast<int>(u);
          snap.active_fraction[u] += 1.0;
          break;
        }
      }
    }
    if (active == 0) ++silent;
    if (active >= 1) ++any;
    if (active >= 2) ++multi;
    if (active == 1) snap.solo_fraction[static_cast<size_t>(last_active)] += 1.0;
  }
  for (auto& f : snap.active_fraction) f /= rec.frames;
  for (auto& f : snap.solo_fraction) f /= rec.frames;
  snap.silence_fraction = static_cast<double>(silent) / rec.frames;
  snap.overlap_ratio = any > 0 ? static_cast<double>(multi) / any : 0.0;
  return snap;
}

namespace {

nlohmann::json spec_to_json(const CorpusSpec& spec) {
  nlohmann::json j;
  j["num_train"] = spec.num_train;
  j["num_dev"] = spec.num_dev;
  j["num_test"] = spec.num_test;
  j["speakers_min"] = spec.speakers_min;
  j["speakers_max"] = spec.speakers_max;
  j["max_speaker_slots"] = spec.max_speaker_slots;
  j["vocab_size"] = spec.vocab_size;
  j["overlap_mode"] = overlap_mode_name(spec.overlap_mode);
  j["window_s"] = spec.window_s;
  j["noise_std"] = spec.noise_std;
  j["seed"] = spec.seed;
  j["feature_dim"] = spec.feature_dim;
  j["frame_duration_s"] = spec.frame_duration_s;
  j["signature_frames"] = spec.signature_frames;
  j["words_min"] = spec.words_min;
  j["words_max"] = spec.words_max;
  j["voice_strength"] = spec.voice_strength;
  j["gap_mean_s"] = spec.gap_mean_s;
  j["overlap_prob"] = spec.overlap_prob;
  j["overlap_max_frac"] = spec.overlap_max_frac;
  return j;
}

CorpusSpec spec_from_json(const nlohmann::json& j) {
  CorpusSpec spec;
  spec.num_train = j.at("num_train").get<int>();
  spec.num_dev = j.at("num_dev").get<int>();
  spec.num_test = j.at("num_test").get<int>();
  spec.speakers_min = j.at("speakers_min").get<int>();
  spec.speakers_max = j.at("speakers_max").get<int>();
  spec.max_speaker_slots = j.at("max_speaker_slots").get<int>();
  spec.vocab_size = j.at("vocab_size").get<int>();
  spec.overlap_mode = overlap_mode_from_name(j.at("overlap_mode").get<std::string>());
  spec.window_s = j.at("window_s").get<double>();
  spec.noise_std = j.at("noise_std").get<double>();
  spec.seed = j.at("seed").get<std::uint64_t>();
  spec.feature_dim = j.at("feature_dim").get<int>();
  spec.frame_duration_s = j.at("frame_duration_s").get<double>();
  spec.signature_frames = j.at("signature_frames").get<int>();
  spec.words_min = j.at("words_min").get<int>();
  spec.words_max = j.at("words_max").get<int>();
  spec.voice_strength = j.at("voice_strength").get<double>();
  spec.gap_mean_s = j.at("gap_mean_s").get<double>();
  spec.overlap_prob = j.at("overlap_prob").get<double>();
  spec.overlap_max_frac = j.at("overlap_max_frac").get<double>();
  return spec;
}

void write_split_features(const Corpus& corpus, const fs::path& dir) {
  for (const auto* split : {&corpus.train, &corpus.dev, &corpus.test}) {
    for (const auto& rec : *split) {
      TensorWriter w;
      w.add_f32("features", {rec.feature_dim, rec.frames}, rec.features.data());
      w.save((dir / (rec.id + ".bin")).string(), (dir / (rec.id + ".manifest")).string());
    }
  }
}

}  // namespace

void write_corpus(const Corpus& corpus, const std::string& dir) {
  const fs::path root(dir);
  fs::create_directories(root / "features");
  write_split_features(corpus, root / "features");

  std::vector<DiarizationSegment> all;
  nlohmann::json splits;
  nlohmann::json speakers;
  for (const auto& [name, split] :
       std::initializer_list<std::pair<const char*, const std::vector<SyntheticRecording>*>>{
           {"train", &corpus.train}, {"dev", &corpus.dev}, {"test", &corpus.test}}) {
    auto ids = nlohmann::json::array();
    for (const auto& rec : *split) {
      ids.push_back(rec.id);
      all.insert(all.end(), rec.segments.begin(), rec.segments.end());
      auto labels = nlohmann::json::array();
      for (const auto& [label, _] : rec.speaker_words) labels.push_back(label);
      speakers[rec.id] = labels;
    }
    splits[name] = ids;
  }
  save_segments_jsonl((root / "annotations.jsonl").string(), all);

  nlohmann::json j;
  j["spec"] = spec_to_json(corpus.spec);
  j["splits"] = splits;
  j["speakers"] = speakers;
  j["words"] = corpus.words;
  std::ofstream out(root / "spec.json", std::ios::trunc);
  SAASR_REQUIRE(out.good(), Error, "cannot open '", (root / "spec.json").string(),
                "' for writing");
  out << j.dump(2) << "\n";
  SAASR_REQUIRE(out.good(), Error, "short write to spec.json");
}

Corpus load_corpus(const std::string& dir) {
  const fs::path root(dir);
  std::ifstream in(root / "spec.json");
  SAASR_REQUIRE(in.good(), Error, "cannot open '", (root / "spec.json").string(), "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(str_cat("spec.json: ", e.what()));
  }
  Corpus corpus;
  corpus.spec = spec_from_json(j.at("spec"));
  corpus.words = j.at("words").get<std::vector<std::string>>();

  auto all = load_segments_jsonl((root / "annotations.jsonl").string());
  std::map<std::string, std::vector<DiarizationSegment>> by_rec;
  for (auto& seg : all) by_rec[seg.recording_id].push_back(seg);

  for (const auto& [name, out] :
       std::initializer_list<std::pair<const char*, std::vector<SyntheticRecording>*>>{
           {"train", &corpus.train}, {"dev", &corpus.dev}, {"test", &corpus.test}}) {
    for (const auto& id : j.at("splits").at(name)) {
      SyntheticRecording rec;
      rec.id = id.get<std::string>();
      auto reader = TensorReader::open((root / "features" / (rec.id + ".bin")).string(),
                                       (root / "features" / (rec.id + ".manifest")).string());
      const auto& entry = reader.entry("features");
      SAASR_REQUIRE(entry.shape.size() == 2, ConfigError, "features of '", rec.id,
                    "' must be rank-2");
      rec.feature_dim = entry.shape[0];
      rec.frames = entry.shape[1];
      rec.frame_duration_s = corpus.spec.frame_duration_s;
      rec.features = reader.read_f32("features");
      rec.segments = by_rec[rec.id];
      if (j.contains("speakers") && j.at("speakers").contains(rec.id))
        for (const auto& label : j.at("speakers").at(rec.id))
          rec.speaker_words[label.get<std::string>()] = {};
      for (const auto& seg : rec.segments) {
        auto& words = rec.speaker_words[seg.speaker_id];
        std::stringstream ss(seg.text);
        std::string w;
        while (ss >> w) words.push_back(w);
      }
      out->push_back(std::move(rec));
    }
  }
  return corpus;
}

}  // namespace saasr
