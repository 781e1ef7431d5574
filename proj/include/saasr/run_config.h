// Flat configuration surface shared by the command-line tools. Every knob of
// the model, trainer, decoder and corpus generator is reachable through one
// namespaced key (model.*, train.*, beam.*, corpus.*); a handful of top-level
// keys carry paths and the split selection. The same key names work in a
// config file and as command-line overrides.
#pragma once

#include <string>
#include <vector>

#include "saasr/corpus.h"
#include "saasr/decoder.h"
#include "saasr/model.h"
#include "saasr/trainer.h"

namespace saasr {

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  BeamConfig beam;
  CorpusSpec corpus;
  std::string out_dir = "run";
  std::string corpus_dir;
  std::string checkpoint;
  std::string split = "test";

  // An omitted seed means seed 0 for the tools, overriding the library
  // defaults of the individual structs.
  RunConfig() {
    corpus.seed = 0;
    train.seed = 0;
  }

  void validate() const;
};

// Every addressable key, in the order the effective-config echo writes them.
// The virtual key "seed" (sets corpus.seed and train.seed together) is
// accepted by apply_run_override but never echoed.
std::vector<std::string> run_config_keys();

// Sets one field from its textual form. Unknown keys and unparseable values
// raise ConfigError naming the key.
void apply_run_override(RunConfig& config, const std::string& key, const std::string& value);

// Textual form of one field, lossless for floating-point values.
std::string run_config_value(const RunConfig& config, const std::string& key);

// key = value lines; blank lines and #-comments are ignored.
RunConfig parse_run_config(std::istream& in, const std::string& origin);
RunConfig load_run_config(const std::string& path);

// Writes every real key so the file reparses to an identical config.
void save_run_config(const RunConfig& config, const std::string& path);

}  // namespace saasr
