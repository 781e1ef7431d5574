// tests/run_config_test.cc

#include <filesystem>
#include <set>
#include <sstream>
#include <string>

#include "doctest.h"
#include "saasr/run_config.h"

namespace fs = std::filesystem;

using saasr::ConfigError;
using saasr::RunConfig;
using saasr::run_config_keys;

TEST_CASE("tool defaults start from seed zero and expose every key once") {
  RunConfig config;
  CHECK(config.corpus.seed == 0);
  CHECK(config.train.seed == 0);
  CHECK(config.split == "test");
  config.validate();

  const auto keys = run_config_keys();
  std::set<std::string> unique(keys.begin(), keys.end());
  CHECK(unique.size() == keys.size());
  for (const auto& key : keys) (void)saasr::run_config_value(config, key);
  CHECK(saasr::run_config_value(config, "train.seed") == "0");
  CHECK(saasr::run_config_value(config, "corpus.seed") == "0");
  CHECK(saasr::run_config_value(config, "model.aggregation") == "concatenation");
}

TEST_CASE("config files parse key = value lines with comments") {
  std::istringstream in(
      "# corpus shape\n"
      "corpus.num_train = 12   # inline comment\n"
      "corpus.overlap_mode = meeting_sparse\n"
      "\n"
      "model.model_dim=32\n"
      "train.spk_ts_loss_weight = 2.5\n"
      "beam.enforce_constraints = false\n"
      "train.freeze_prefixes = fddt., speaker_affine.\n"
      "out_dir = /tmp/somewhere\n"
      "corpus.num_train = 24\n");
  const RunConfig config = saasr::parse_run_config(in, "inline");
  CHECK(config.corpus.num_train == 24);
  CHECK(config.corpus.overlap_mode == saasr::OverlapMode::kMeetingSparse);
  CHECK(config.model.model_dim == 32);
  CHECK(config.train.spk_ts_loss_weight == 2.5);
  CHECK(config.beam.enforce_constraints == false);
  CHECK(config.train.freeze_prefixes ==
        std::vector<std::string>{"fddt.", "speaker_affine."});
  CHECK(config.out_dir == "/tmp/somewhere");
}

TEST_CASE("the seed key reaches the corpus and the trainer together") {
  RunConfig config;
  saasr::apply_run_override(config, "seed", "42");
  CHECK(config.corpus.seed == 42);
  CHECK(config.train.seed == 42);

  saasr::apply_run_override(config, "train.seed", "7");
  CHECK(config.train.seed == 7);
  CHECK(config.corpus.seed == 42);
}

TEST_CASE("bad keys and values are rejected with their location") {
  RunConfig config;
  CHECK_THROWS_AS(saasr::apply_run_override(config, "model.depth", "3"), ConfigError);
  CHECK_THROWS_AS(saasr::apply_run_override(config, "model.model_dim", "3.5"), ConfigError);
  CHECK_THROWS_AS(saasr::apply_run_override(config, "train.stage1_lr", "fast"), ConfigError);
  CHECK_THROWS_AS(saasr::apply_run_override(config, "beam.dump_attention", "yes"), ConfigError);
  CHECK_THROWS_AS(saasr::apply_run_override(config, "model.aggregation", "stack"), ConfigError);
  CHECK_THROWS_AS(saasr::apply_run_override(config, "seed", "-1"), ConfigError);
  CHECK_THROWS_AS(saasr::run_config_value(config, "model.depth"), ConfigError);

  std::istringstream missing_eq("model.model_dim 32\n");
  try {
    saasr::parse_run_config(missing_eq, "bad.cfg");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("bad.cfg:1") != std::string::npos);
  }

  std::istringstream bad_value("\n\nmodel.heads = none\n");
  try {
    saasr::parse_run_config(bad_value, "bad.cfg");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("bad.cfg:3") != std::string::npos);
    CHECK(std::string(e.what()).find("model.heads") != std::string::npos);
  }

  config.split = "validation";
  CHECK_THROWS_AS(config.validate(), ConfigError);
}

TEST_CASE("saved configs reparse to the same values") {
  RunConfig config;
  saasr::apply_run_override(config, "seed", "99");
  config.model.aggregation = saasr::Aggregation::kMaskedAverage;
  config.model.window_s = 8.4;
  config.train.stage1_lr = 0.1 + 0.2;
  config.train.freeze_prefixes = {"fddt."};
  config.train.augment_speaker_order = false;
  config.beam.length_norm = 1.0 / 3.0;
  config.corpus.overlap_mode = saasr::OverlapMode::kMeetingSparse;
  config.corpus.gap_mean_s = 0.7;
  config.out_dir = "runs/exp1";
  config.corpus_dir = "runs/corpus";
  config.checkpoint = "runs/exp0/final";
  config.split = "dev";

  const auto path = fs::temp_directory_path() / "saasr_run_config_echo.cfg";
  saasr::save_run_config(config, path.string());
  const RunConfig loaded = saasr::load_run_config(path.string());
  for (const auto& key : run_config_keys()) {
    CAPTURE(key);
    CHECK(saasr::run_config_value(loaded, key) == saasr::run_config_value(config, key));
  }
  CHECK(loaded.train.stage1_lr == config.train.stage1_lr);
  CHECK(loaded.beam.length_norm == config.beam.length_norm);
  fs::remove(path);
}
