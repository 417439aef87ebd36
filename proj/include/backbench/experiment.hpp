#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "backbench/attack.hpp"
#include "backbench/corpus.hpp"
#include "backbench/defense.hpp"
#include "backbench/metrics.hpp"
#include "backbench/victim.hpp"

namespace backbench::experiment {

// Either synthetic generator settings or a file/directory on disk.
struct DatasetSource {
  std::optional<corpus::SyntheticSpec> synthetic;
  std::filesystem::path path;
  corpus::Format format = corpus::Format::tsv;
  int num_classes = 2;
  std::string name;
};

enum class DefenseName { none, cube, bki, strip, onion };
enum class DefenseStage { train, inference };

const char* to_string(DefenseName name);
DefenseName parse_defense_name(const std::string& name);
const char* to_string(DefenseStage stage);
DefenseStage parse_defense_stage(const std::string& name);

struct DefenseConfig {
  DefenseName name = DefenseName::none;
  DefenseStage stage = DefenseStage::train;

  defense::CubeConfig cube;
  bool dump_embeddings = false;

  std::size_t bki_top_k = 4;
  std::size_t bki_per_sample_top = 5;

  std::size_t strip_copies = 16;
  double strip_replace_frac = 0.5;

  // ONION language model; fitted on the clean train split of the source.
  int onion_lm_order = 2;
  double onion_lm_add_k = 1.0;

  // STRIP and ONION thresholds are calibrated on the clean dev split.
  double target_frr = 0.05;

  // Only the keys relevant to `name`, as written to the report.
  nlohmann::json params_json() const;
};

struct MetricToggles {
  bool clean_model = true;
  bool oracle = true;
  bool stealthiness = true;
  bool similarity = true;
  int lm_order = 2;
  double lm_add_k = 1.0;
};

struct SweepAxes {
  std::vector<double> rates{0.0, 0.01, 0.05, 0.1, 0.2};
  std::vector<attack::Consistency> consistencies{attack::Consistency::clean,
                                                 attack::Consistency::mix,
                                                 attack::Consistency::dirty};
  std::vector<std::uint64_t> seeds{1, 2, 3};
};

struct ExperimentConfig {
  DatasetSource dataset;
  attack::TriggerSpec trigger;
  int target_label = 0;
  // Used by `attack`; `run` takes rate and consistency from the sweep.
  double poison_rate = 0.1;
  attack::Consistency consistency = attack::Consistency::mix;
  victim::VictimConfig victim;
  DefenseConfig defense;
  MetricToggles metrics;
  SweepAxes sweep;
  std::filesystem::path output_dir = "backbench-out";

  // Throws ConfigError.
  void validate() const;
};

// Missing keys take the defaults above; unknown keys are rejected.
ExperimentConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const ExperimentConfig& config);
ExperimentConfig load_config(const std::filesystem::path& path);

// FNV-1a of the canonical JSON form, output_dir excluded; 16 hex digits.
std::string config_hash(const ExperimentConfig& config);

corpus::Dataset load_source(const DatasetSource& source);

struct Cell {
  double rate = 0.0;
  attack::Consistency consistency = attack::Consistency::mix;
  std::uint64_t seed = 0;
};

// rate-major, then consistency, then seed.
std::vector<Cell> expand_cells(const SweepAxes& sweep);
// "rate,consistency,seed"
Cell parse_cell(const std::string& text);

// Poisoning and victim training draw from independent streams of the cell seed.
std::uint64_t poison_seed(std::uint64_t cell_seed);
std::uint64_t victim_seed(std::uint64_t cell_seed);

struct RunOptions {
  std::optional<std::filesystem::path> out;
  std::optional<std::uint64_t> seed_override;
  std::optional<Cell> cell;
};

struct RunRecord {
  std::string config_hash;
  std::vector<metrics::EvalReport> reports;
  std::vector<std::vector<std::string>> warnings;  // per report
  double wall_seconds = 0.0;

  bool all_ok() const;
};

// Evaluates one cell. Throws on failure; cmd_run records the failure instead.
metrics::EvalReport run_cell(const ExperimentConfig& config, const corpus::Dataset& source,
                             const Cell& cell, std::vector<std::string>& warnings,
                             const std::filesystem::path& out_dir);

// Writes results.csv, results.json and run.json under the output directory.
RunRecord cmd_run(const ExperimentConfig& config, const RunOptions& options = {});

struct AttackSummary {
  std::filesystem::path dir;
  std::size_t train_size = 0;
  std::size_t num_poisoned = 0;
  std::vector<std::string> warnings;
};

// Writes the poisoned corpus (config format) and manifest.json.
AttackSummary cmd_attack(const ExperimentConfig& config, const RunOptions& options = {});

struct SeriesRow {
  std::string attacker;
  std::string defense;
  std::string defense_stage;
  std::string consistency;
  double poison_rate = 0.0;
  std::size_t n = 0;
  std::optional<double> asr_mean, asr_sd, cacc_mean, cacc_sd;
};

// Mean and sample standard deviation over seeds (sd = 0 for one seed).
// Rows with a non-ok status are skipped.
std::vector<SeriesRow> aggregate(const std::vector<metrics::EvalReport>& reports);

// Reads <run_dir>/results.csv, writes summary.csv, one series file per
// (attacker, defense, stage, consistency), and copies embedding dumps.
std::vector<SeriesRow> cmd_report(const std::filesystem::path& run_dir,
                                  const std::optional<std::filesystem::path>& out = {});

}  // namespace backbench::experiment
