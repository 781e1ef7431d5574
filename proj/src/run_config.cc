#include "saasr/run_config.h"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>

namespace saasr {
namespace {

std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

long long parse_ll(const std::string& key, const std::string& value) {
  char* end = nullptr;
  const long long v = std::strtoll(value.c_str(), &end, 10);
  SAASR_REQUIRE(!value.empty() && end == value.c_str() + value.size(), ConfigError, "key ", key,
                ": '", value, "' is not an integer");
  return v;
}

int parse_int(const std::string& key, const std::string& value) {
  return static_cast<int>(parse_ll(key, value));
}

std::uint64_t parse_u64(const std::string& key, const std::string& value) {
  const long long v = parse_ll(key, value);
  SAASR_REQUIRE(v >= 0, ConfigError, "key ", key, ": seed must be non-negative");
  return static_cast<std::uint64_t>(v);
}

double parse_double(const std::string& key, const std::string& value) {
  char* end = nullptr;
  const double v = std::strtod(value.c_str(), &end);
  SAASR_REQUIRE(!value.empty() && end == value.c_str() + value.size(), ConfigError, "key ", key,
                ": '", value, "' is not a number");
  return v;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError(str_cat("key ", key, ": '", value, "' is not a boolean"));
}

std::string format_double(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<std::string> split_list(const std::string& value) {
  std::vector<std::string> out;
  std::stringstream in(value);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string join_list(const std::vector<std::string>& items) {
  std::string out;
  for (size_t i = 0; i < items.size(); ++i) {
    if (i) out += ',';
    out += items[i];
  }
  return out;
}

struct Field {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

std::vector<Field> make_fields() {
  std::vector<Field> f;
  auto ints = [&](const char* key, std::function<int&(RunConfig&)> ref) {
    f.push_back({key,
                 [ref](const RunConfig& c) {
                   return std::to_string(ref(const_cast<RunConfig&>(c)));
                 },
                 [key = std::string(key), ref](RunConfig& c, const std::string& v) {
                   ref(c) = parse_int(key, v);
                 }});
  };
  auto doubles = [&](const char* key, std::function<double&(RunConfig&)> ref) {
    f.push_back({key,
                 [ref](const RunConfig& c) {
                   return format_double(ref(const_cast<RunConfig&>(c)));
                 },
                 [key = std::string(key), ref](RunConfig& c, const std::string& v) {
                   ref(c) = parse_double(key, v);
                 }});
  };
  auto bools = [&](const char* key, std::function<bool&(RunConfig&)> ref) {
    f.push_back({key,
                 [ref](const RunConfig& c) {
                   return ref(const_cast<RunConfig&>(c)) ? "true" : "false";
                 },
                 [key = std::string(key), ref](RunConfig& c, const std::string& v) {
                   ref(c) = parse_bool(key, v);
                 }});
  };
  auto strings = [&](const char* key, std::function<std::string&(RunConfig&)> ref) {
    f.push_back({key,
                 [ref](const RunConfig& c) { return ref(const_cast<RunConfig&>(c)); },
                 [ref](RunConfig& c, const std::string& v) { ref(c) = v; }});
  };

  strings("out_dir", [](RunConfig& c) -> std::string& { return c.out_dir; });
  strings("corpus_dir", [](RunConfig& c) -> std::string& { return c.corpus_dir; });
  strings("checkpoint", [](RunConfig& c) -> std::string& { return c.checkpoint; });
  strings("split", [](RunConfig& c) -> std::string& { return c.split; });

  ints("model.feature_dim", [](RunConfig& c) -> int& { return c.model.feature_dim; });
  ints("model.model_dim", [](RunConfig& c) -> int& { return c.model.model_dim; });
  ints("model.encoder_layers", [](RunConfig& c) -> int& { return c.model.encoder_layers; });
  ints("model.decoder_layers", [](RunConfig& c) -> int& { return c.model.decoder_layers; });
  ints("model.heads", [](RunConfig& c) -> int& { return c.model.heads; });
  ints("model.ffn_dim", [](RunConfig& c) -> int& { return c.model.ffn_dim; });
  ints("model.vocab_words", [](RunConfig& c) -> int& { return c.model.vocab_words; });
  ints("model.max_speakers", [](RunConfig& c) -> int& { return c.model.max_speakers; });
  ints("model.num_timestamps", [](RunConfig& c) -> int& { return c.model.num_timestamps; });
  doubles("model.window_s", [](RunConfig& c) -> double& { return c.model.window_s; });
  f.push_back({"model.aggregation",
               [](const RunConfig& c) { return aggregation_name(c.model.aggregation); },
               [](RunConfig& c, const std::string& v) {
                 c.model.aggregation = aggregation_from_name(v);
               }});
  ints("model.max_frames", [](RunConfig& c) -> int& { return c.model.max_frames; });
  ints("model.max_text_positions",
       [](RunConfig& c) -> int& { return c.model.max_text_positions; });

  ints("train.stage1_steps", [](RunConfig& c) -> int& { return c.train.stage1_steps; });
  doubles("train.stage1_lr", [](RunConfig& c) -> double& { return c.train.stage1_lr; });
  ints("train.warmup_steps", [](RunConfig& c) -> int& { return c.train.warmup_steps; });
  doubles("train.stage2_lr_new", [](RunConfig& c) -> double& { return c.train.stage2_lr_new; });
  doubles("train.stage2_lr_base", [](RunConfig& c) -> double& { return c.train.stage2_lr_base; });
  ints("train.effective_batch", [](RunConfig& c) -> int& { return c.train.effective_batch; });
  ints("train.max_steps", [](RunConfig& c) -> int& { return c.train.max_steps; });
  doubles("train.spk_ts_loss_weight",
          [](RunConfig& c) -> double& { return c.train.spk_ts_loss_weight; });
  f.push_back({"train.seed",
               [](const RunConfig& c) { return std::to_string(c.train.seed); },
               [](RunConfig& c, const std::string& v) { c.train.seed = parse_u64("train.seed", v); }});
  bools("train.augment_speaker_order",
        [](RunConfig& c) -> bool& { return c.train.augment_speaker_order; });
  f.push_back({"train.freeze_prefixes",
               [](const RunConfig& c) { return join_list(c.train.freeze_prefixes); },
               [](RunConfig& c, const std::string& v) { c.train.freeze_prefixes = split_list(v); }});
  ints("train.start_step", [](RunConfig& c) -> int& { return c.train.start_step; });
  doubles("train.weight_decay", [](RunConfig& c) -> double& { return c.train.weight_decay; });
  doubles("train.beta1", [](RunConfig& c) -> double& { return c.train.beta1; });
  doubles("train.beta2", [](RunConfig& c) -> double& { return c.train.beta2; });
  doubles("train.eps", [](RunConfig& c) -> double& { return c.train.eps; });
  ints("train.checkpoint_every", [](RunConfig& c) -> int& { return c.train.checkpoint_every; });
  ints("train.val_every", [](RunConfig& c) -> int& { return c.train.val_every; });
  doubles("train.early_stop_loss",
          [](RunConfig& c) -> double& { return c.train.early_stop_loss; });

  ints("beam.beam_size", [](RunConfig& c) -> int& { return c.beam.beam_size; });
  ints("beam.max_tokens", [](RunConfig& c) -> int& { return c.beam.max_tokens; });
  doubles("beam.length_norm", [](RunConfig& c) -> double& { return c.beam.length_norm; });
  bools("beam.enforce_constraints",
        [](RunConfig& c) -> bool& { return c.beam.enforce_constraints; });
  bools("beam.dump_attention", [](RunConfig& c) -> bool& { return c.beam.dump_attention; });

  ints("corpus.num_train", [](RunConfig& c) -> int& { return c.corpus.num_train; });
  ints("corpus.num_dev", [](RunConfig& c) -> int& { return c.corpus.num_dev; });
  ints("corpus.num_test", [](RunConfig& c) -> int& { return c.corpus.num_test; });
  ints("corpus.speakers_min", [](RunConfig& c) -> int& { return c.corpus.speakers_min; });
  ints("corpus.speakers_max", [](RunConfig& c) -> int& { return c.corpus.speakers_max; });
  ints("corpus.max_speaker_slots",
       [](RunConfig& c) -> int& { return c.corpus.max_speaker_slots; });
  ints("corpus.vocab_size", [](RunConfig& c) -> int& { return c.corpus.vocab_size; });
  f.push_back({"corpus.overlap_mode",
               [](const RunConfig& c) { return overlap_mode_name(c.corpus.overlap_mode); },
               [](RunConfig& c, const std::string& v) {
                 c.corpus.overlap_mode = overlap_mode_from_name(v);
               }});
  doubles("corpus.window_s", [](RunConfig& c) -> double& { return c.corpus.window_s; });
  doubles("corpus.noise_std", [](RunConfig& c) -> double& { return c.corpus.noise_std; });
  f.push_back({"corpus.seed",
               [](const RunConfig& c) { return std::to_string(c.corpus.seed); },
               [](RunConfig& c, const std::string& v) {
                 c.corpus.seed = parse_u64("corpus.seed", v);
               }});
  ints("corpus.feature_dim", [](RunConfig& c) -> int& { return c.corpus.feature_dim; });
  doubles("corpus.frame_duration_s",
          [](RunConfig& c) -> double& { return c.corpus.frame_duration_s; });
  ints("corpus.signature_frames",
       [](RunConfig& c) -> int& { return c.corpus.signature_frames; });
  ints("corpus.words_min", [](RunConfig& c) -> int& { return c.corpus.words_min; });
  ints("corpus.words_max", [](RunConfig& c) -> int& { return c.corpus.words_max; });
  doubles("corpus.voice_strength",
          [](RunConfig& c) -> double& { return c.corpus.voice_strength; });
  doubles("corpus.gap_mean_s", [](RunConfig& c) -> double& { return c.corpus.gap_mean_s; });
  doubles("corpus.overlap_prob", [](RunConfig& c) -> double& { return c.corpus.overlap_prob; });
  doubles("corpus.overlap_max_frac",
          [](RunConfig& c) -> double& { return c.corpus.overlap_max_frac; });
  return f;
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = make_fields();
  return table;
}

const Field* find_field(const std::string& key) {
  for (const auto& field : fields()) {
    if (field.key == key) return &field;
  }
  return nullptr;
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  train.validate();
  beam.validate();
  corpus.validate();
  SAASR_REQUIRE(split == "train" || split == "dev" || split == "test", ConfigError, "split '",
                split, "' is not one of train, dev, test");
}

std::vector<std::string> run_config_keys() {
  std::vector<std::string> keys;
  for (const auto& field : fields()) keys.push_back(field.key);
  return keys;
}

void apply_run_override(RunConfig& config, const std::string& key, const std::string& value) {
  if (key == "seed") {
    const std::uint64_t seed = parse_u64(key, value);
    config.corpus.seed = seed;
    config.train.seed = seed;
    return;
  }
  const Field* field = find_field(key);
  SAASR_REQUIRE(field != nullptr, ConfigError, "unknown config key '", key, "'");
  field->set(config, value);
}

std::string run_config_value(const RunConfig& config, const std::string& key) {
  const Field* field = find_field(key);
  SAASR_REQUIRE(field != nullptr, ConfigError, "unknown config key '", key, "'");
  return field->get(config);
}

RunConfig parse_run_config(std::istream& in, const std::string& origin) {
  RunConfig config;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    SAASR_REQUIRE(eq != std::string::npos, ConfigError, origin, ":", lineno,
                  ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    SAASR_REQUIRE(!key.empty(), ConfigError, origin, ":", lineno, ": empty key");
    try {
      apply_run_override(config, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(str_cat(origin, ":", lineno, ": ", e.what()));
    }
  }
  return config;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  SAASR_REQUIRE(in.good(), ConfigError, "cannot read config file ", path);
  return parse_run_config(in, path);
}

void save_run_config(const RunConfig& config, const std::string& path) {
  std::ofstream out(path);
  SAASR_REQUIRE(out.good(), ConfigError, "cannot write ", path);
  out << "# effective configuration\n";
  std::string group;
  for (const auto& field : fields()) {
    const size_t dot = field.key.find('.');
    const std::string g = dot == std::string::npos ? "" : field.key.substr(0, dot);
    if (g != group) {
      out << '\n';
      group = g;
    }
    out << field.key << " = " << field.get(config) << '\n';
  }
  SAASR_REQUIRE(out.good(), ConfigError, "failed writing ", path);
}

}  // namespace saasr
