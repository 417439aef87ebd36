#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "backbench/cluster.hpp"
#include "backbench/corpus.hpp"
#include "backbench/text.hpp"
#include "backbench/victim.hpp"

namespace backbench::defense {

struct SampleDiagnostic {
  std::int64_t id = 0;
  double score = 0.0;  // defense-specific (cluster id, keyword hits, suspicion)
  std::string note;
};

// Partition of the train ids into kept and dropped.
struct FilterResult {
  std::vector<std::int64_t> kept;     // train order
  std::vector<std::int64_t> dropped;  // train order
  std::vector<SampleDiagnostic> diagnostics;
  std::vector<std::string> warnings;

  corpus::Samples apply(const corpus::Samples& train) const;
};

struct CubeConfig {
  std::size_t reduce_dim = 10;
  cluster::HdbscanConfig hdbscan{10, 2};
};

struct CubeResult {
  FilterResult filter;
  victim::VictimModel model;          // the diagnostic model from step 1
  cluster::Matrix embeddings;         // reduced, one row per train sample
  cluster::ClusterAssignment clusters;
};

// Clustering-based filtering: train on the suspect set, embed every sample
// with the hidden layer, reduce with PCA, cluster with HDBSCAN, then keep
// only the largest cluster within each observed label. Noise is dropped. If
// every point is noise the dataset is kept whole and a warning is recorded.
CubeResult cube_filter(const corpus::Samples& train, std::size_t num_classes,
                       const victim::VictimConfig& victim_config, const CubeConfig& config);

struct Keyword {
  std::string word;
  double score = 0.0;
  std::size_t frequency = 0;
};

struct BkiResult {
  FilterResult filter;
  std::vector<Keyword> keywords;  // ranked, top_k
};

// Backdoor keyword identification. A word's per-sample salience is the L2
// change of the hidden representation when all its occurrences are deleted.
// Each sample contributes its `per_sample_top` most salient words; a word's
// corpus score is mean(salience) * log(1 + frequency) over the samples that
// nominated it. Samples containing any of the top_k words are dropped.
BkiResult bki_filter(const corpus::Samples& train, const victim::VictimModel& model,
                     std::size_t top_k, std::size_t per_sample_top = 5);

// score_i = PPL(tokens) - PPL(tokens without token i).
std::vector<double> onion_suspicion(const text::Tokens& tokens, const text::NGramLM& lm);

// Repeatedly removes the highest-scoring token while its score exceeds the
// threshold, rescoring after every removal, never removing more than
// floor(0.2 * n) tokens.
text::Tokens onion_correct(const text::Tokens& tokens, const text::NGramLM& lm, double threshold);

// Largest suspicion score of a token list (-inf when empty).
double onion_max_suspicion(const text::Tokens& tokens, const text::NGramLM& lm);

enum class FlagDirection { below, above };

struct DetectionVerdict {
  std::int64_t id = 0;
  double score = 0.0;
  bool flagged = false;
  double threshold = 0.0;
  std::string note;
};

struct StripConfig {
  std::size_t copies = 16;
  double replace_frac = 0.5;
  std::uint64_t seed = 0;
};

// Mean Shannon entropy (nats) of the victim's class distribution over K
// perturbed copies of the text; each copy replaces round(frac * len)
// (at least one) randomly chosen positions with uniform vocabulary words.
double strip_entropy(const std::string& text, std::int64_t id, const victim::VictimModel& model,
                     const text::Vocabulary& vocab, const StripConfig& config);

// Flagged iff entropy < threshold.
DetectionVerdict strip_detect(const corpus::TextSample& sample, const victim::VictimModel& model,
                              const text::Vocabulary& vocab, const StripConfig& config,
                              double threshold);

// Linear-interpolation quantile of sorted data at probability p.
double quantile(std::vector<double> values, double p);

// The target_frr quantile of clean scores in the flagging direction: for
// `below`, quantile(target_frr); for `above`, quantile(1 - target_frr).
// Requires >= 20 scores and target_frr in (0, 0.5].
double calibrate_threshold(const std::vector<double>& clean_scores, double target_frr,
                           FlagDirection direction);

inline bool is_flagged(double score, double threshold, FlagDirection direction) {
  return direction == FlagDirection::below ? score < threshold : score > threshold;
}

// id, score, flagged, threshold, note
void write_verdicts_csv(const std::filesystem::path& path,
                        const std::vector<DetectionVerdict>& verdicts);
// id, kept, score, note
void write_filter_csv(const std::filesystem::path& path, const FilterResult& result);

}  // namespace backbench::defense
