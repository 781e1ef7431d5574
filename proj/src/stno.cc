// saasr/stno.cc

#include "saasr/stno.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>

#include "json.hpp"

namespace saasr {

int StnoMask::class_at(int frame) const {
  const size_t base = static_cast<size_t>(frame) * 4;
  int best = 0;
  for (int c = 1; c < 4; ++c)
    if (probs[base + c] > probs[base + best]) best = c;
  return best;
}

void validate_segments(const std::vector<DiarizationSegment>& segments) {
  std::map<std::pair<std::string, std::string>, std::vector<std::pair<double, double>>> by_key;
  for (const auto& s : segments) {
    SAASR_REQUIRE(s.end_s > s.start_s, ConfigError, "segment of '", s.speaker_id, "' in '",
                  s.recording_id, "' has end ", s.end_s, " <= start ", s.start_s);
    SAASR_REQUIRE(s.start_s >= 0.0, ConfigError, "segment of '", s.speaker_id, "' in '",
                  s.recording_id, "' starts before zero");
    by_key[{s.recording_id, s.speaker_id}].emplace_back(s.start_s, s.end_s);
  }
  for (auto& [key, spans] : by_key) {
    std::sort(spans.begin(), spans.end());
    for (size_t i = 1; i < spans.size(); ++i)
      SAASR_REQUIRE(spans[i].first >= spans[i - 1].second, ConfigError, "speaker '", key.second,
                    "' self-overlaps in '", key.first, "' near ", spans[i].first, "s");
  }
}

StnoMask compute_stno(const std::vector<DiarizationSegment>& segments,
                      const std::string& target_speaker, double window_start_s,
                      double window_end_s, int frames, double frame_duration_s) {
  SAASR_REQUIRE(frames > 0 && frame_duration_s > 0.0, ConfigError,
                "mask needs positive frame count and duration");
  const double window = window_end_s - window_start_s;
  SAASR_REQUIRE(std::abs(frames * frame_duration_s - window) <= 0.5 * frame_duration_s,
                ConfigError, "frame grid ", frames, "x", frame_duration_s,
                "s does not cover window of ", window, "s");

  StnoMask mask;
  mask.frames = frames;
  mask.frame_duration_s = frame_duration_s;
  mask.probs.assign(static_cast<size_t>(frames) * 4, 0.0f);
  for (int t = 0; t < frames; ++t) {
    const double mid = window_start_s + (t + 0.5) * frame_duration_s;
    bool target_active = false, other_active = false;
    for (const auto& s : segments) {
      if (mid < s.start_s || mid >= s.end_s) continue;
      if (s.speaker_id == target_speaker)
        target_active = true;
      else
        other_active = true;
      if (target_active && other_active) break;
    }
    int cls = kSilence;
    if (target_active && other_active)
      cls = kOverlap;
    else if (target_active)
      cls = kTargetOnly;
    else if (other_active)
      cls = kNonTarget;
    mask.probs[static_cast<size_t>(t) * 4 + cls] = 1.0f;
  }
  return mask;
}

std::vector<StnoMask> stno_for_all_speakers(const std::vector<DiarizationSegment>& segments,
                                            const std::vector<std::string>& speaker_order,
                                            double window_start_s, double window_end_s,
                                            int frames, double frame_duration_s,
                                            int max_speakers) {
  SAASR_REQUIRE(!speaker_order.empty(), ConfigError, "empty speaker inventory");
  SAASR_REQUIRE(static_cast<int>(speaker_order.size()) <= max_speakers, ConfigError,
                speaker_order.size(), " speakers exceed capacity of ", max_speakers);
  std::vector<StnoMask> masks;
  masks.reserve(speaker_order.size());
  for (size_t u = 0; u < speaker_order.size(); ++u) {
    auto m = compute_stno(segments, speaker_order[u], window_start_s, window_end_s, frames,
                          frame_duration_s);
    m.speaker_index = static_cast<int>(u);
    masks.push_back(std::move(m));
  }
  return masks;
}

std::vector<std::string> first_onset_speaker_order(
    const std::vector<DiarizationSegment>& segments) {
  std::map<std::string, double> onset;
  for (const auto& s : segments) {
    auto it = onset.find(s.speaker_id);
    if (it == onset.end() || s.start_s < it->second) onset[s.speaker_id] = s.start_s;
  }
  std::vector<std::string> order;
  order.reserve(onset.size());
  for (const auto& [id, _] : onset) order.push_back(id);
  std::sort(order.begin(), order.end(), [&onset](const std::string& a, const std::string& b) {
    if (onset[a] != onset[b]) return onset[a] < onset[b];
    return a < b;
  });
  return order;
}

std::vector<DiarizationSegment> load_segments_jsonl(const std::string& path) {
  std::ifstream in(path);
  SAASR_REQUIRE(in.good(), Error, "cannot open '", path, "'");
  std::vector<DiarizationSegment> segments;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(str_cat(path, ":", lineno, ": ", e.what()));
    }
    DiarizationSegment s;
    try {
      s.recording_id = j.at("recording_id").get<std::string>();
      s.speaker_id = j.at("speaker_id").get<std::string>();
      s.start_s = j.at("start_s").get<double>();
      s.end_s = j.at("end_s").get<double>();
      s.text = j.value("text", std::string());
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(str_cat(path, ":", lineno, ": ", e.what()));
    }
    segments.push_back(std::move(s));
  }
  return segments;
}

void save_segments_jsonl(const std::string& path,
                         const std::vector<DiarizationSegment>& segments) {
  std::ofstream out(path, std::ios::trunc);
  SAASR_REQUIRE(out.good(), Error, "cannot open '", path, "' for writing");
  for (const auto& s : segments) {
    nlohmann::json j;
    j["recording_id"] = s.recording_id;
    j["speaker_id"] = s.speaker_id;
    j["start_s"] = s.start_s;
    j["end_s"] = s.end_s;
    j["text"] = s.text;
    out << j.dump() << "\n";
  }
  SAASR_REQUIRE(out.good(), Error, "short write to '", path, "'");
}

}  // namespace saasr
