#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "backbench/corpus.hpp"
#include "backbench/defense.hpp"
#include "backbench/text.hpp"
#include "backbench/victim.hpp"

namespace backbench::metrics {

// --- effectiveness -------------------------------------------------------

std::vector<int> predict_all(const victim::VictimModel& model, const corpus::Samples& samples);

// Fraction of predictions equal to the target. Throws UndefinedRateError on empty input.
double asr(std::span<const int> predictions, int target_label);
double asr(const victim::VictimModel& model, const corpus::Samples& poisoned_test,
           int target_label);

double cacc(std::span<const int> predictions, std::span<const int> labels);
double cacc(const victim::VictimModel& model, const corpus::Samples& clean_test);

// asr(poisoned model) - asr(clean model) on the same triggered set.
double asr_margin(const victim::VictimModel& poisoned_model,
                  const victim::VictimModel& clean_model, const corpus::Samples& poisoned_test,
                  int target_label);

// A sample counts as a success only if it passes the detector and hits the
// target; the denominator is every poisoned sample.
double asr_under_detection(std::span<const int> predictions, const std::vector<bool>& flagged,
                           int target_label);
// A flagged clean sample counts as a wrong prediction.
double cacc_under_detection(std::span<const int> predictions, std::span<const int> labels,
                            const std::vector<bool>& flagged);

// --- stealthiness ---------------------------------------------------------

// Mean over aligned pairs of PPL(poisoned) - PPL(clean).
double delta_ppl(const std::vector<std::string>& clean_texts,
                 const std::vector<std::string>& poisoned_texts, const text::NGramLM& lm);

// Surrogate for grammar-error increase: mean increase of the count of
// tokens outside the clean-corpus lexicon.
double delta_ge(const std::vector<std::string>& clean_texts,
                const std::vector<std::string>& poisoned_texts,
                const std::set<std::string>& lexicon);

std::set<std::string> build_lexicon(const corpus::Samples& samples);

// --- validity --------------------------------------------------------------

// Cosine similarity of tf-idf token vectors, idf fitted on a clean corpus
// as log((1 + N) / (1 + df)) + 1.
class SimilarityScorer {
 public:
  static SimilarityScorer fit(const std::vector<text::Tokens>& docs);
  static SimilarityScorer fit(const corpus::Samples& samples);

  double idf(const std::string& token) const;
  // 0 when either text has no tokens.
  double score(const std::string& a, const std::string& b) const;

 private:
  std::size_t num_docs_ = 0;
  std::unordered_map<std::string, std::size_t> df_;
};

double mean_similarity(const SimilarityScorer& scorer, const std::vector<std::string>& clean,
                       const std::vector<std::string>& poisoned);

// --- detection -------------------------------------------------------------

struct DetectionRates {
  std::optional<double> far;  // unflagged poisoned / poisoned
  std::optional<double> frr;  // flagged clean / clean
  std::size_t n_poisoned = 0;
  std::size_t n_clean = 0;
};

// `is_poisoned` is the manifest ground truth. Throws ValidationError if a
// verdict id is missing from it. A component with an empty denominator is
// left unset; use value_or_throw to insist on it.
DetectionRates far_frr(const std::vector<defense::DetectionVerdict>& verdicts,
                       const std::map<std::int64_t, bool>& is_poisoned);

double value_or_throw(const std::optional<double>& rate, const char* what);

// --- report ----------------------------------------------------------------

// One evaluated cell. Optional fields are empty when not computed or
// undefined and serialize as empty CSV cells.
struct EvalReport {
  std::string config_hash;
  std::string dataset;
  std::string attacker;
  std::string defense;
  std::string defense_stage;
  std::string defense_params;
  double poison_rate = 0.0;
  std::string consistency;
  std::uint64_t seed = 0;
  int target_label = 0;
  std::string status = "ok";

  std::optional<double> asr, cacc, clean_model_asr, clean_model_cacc, asr_margin;
  std::optional<double> delta_ppl, ge_surrogate, similarity;
  std::optional<double> far, frr, asr_under_detection, cacc_under_detection;
  std::optional<double> oracle_asr, oracle_cacc;
  std::optional<double> no_defense_asr, no_defense_cacc;
  std::optional<double> filter_recall, filter_retention;
  std::optional<std::int64_t> kept, dropped;
  std::int64_t n_poisoned_train = 0;
  std::int64_t n_poisoned_eval = 0;
  std::int64_t n_clean_eval = 0;
  std::string error;

  bool operator==(const EvalReport&) const = default;
};

const std::vector<std::string>& report_columns();
std::string csv_header();
std::string to_csv_row(const EvalReport& r);
EvalReport from_csv_row(const std::string& line);

void write_reports_csv(const std::filesystem::path& path, const std::vector<EvalReport>& rows);
std::vector<EvalReport> read_reports_csv(const std::filesystem::path& path);

// Doubles are written with 17 significant digits so values round-trip exactly.
std::string format_double(double v);

// Splits one CSV line, honoring double-quoted fields.
std::vector<std::string> split_csv_line(const std::string& line);
std::string csv_escape(const std::string& field);

}  // namespace backbench::metrics
