#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "backbench/corpus.hpp"
#include "backbench/random.hpp"
#include "backbench/text.hpp"

namespace backbench::attack {

enum class TriggerKind { badnet, addsent };
enum class Consistency { clean, mix, dirty };

const char* to_string(TriggerKind kind);
TriggerKind parse_trigger_kind(const std::string& name);
const char* to_string(Consistency c);
Consistency parse_consistency(const std::string& name);

struct TriggerSpec {
  TriggerKind kind = TriggerKind::badnet;
  std::vector<std::string> badnet_words{"cf", "mn", "bb", "tq"};
  std::size_t insertions_per_sample = 1;
  std::vector<std::string> addsent_sentence{"I", "watch", "this", "3D", "movie"};

  void validate() const;
  // "badnet" or "addsent".
  std::string name() const { return to_string(kind); }
};

TriggerSpec badnet_trigger();
TriggerSpec addsent_trigger();

struct PoisonSpec {
  TriggerSpec trigger;
  double poison_rate = 0.1;
  Consistency consistency = Consistency::mix;
  int target_label = 0;
  std::uint64_t seed = 0;

  // Throws ConfigError.
  void validate(int num_classes) const;
};

// Surface tokens with the words inserted. Each of the k insertions draws a
// word uniformly (with replacement) and an independent uniform position in
// [0, current length].
text::Tokens insert_badnet(text::Tokens tokens, const std::vector<std::string>& words,
                           std::size_t k, Rng& rng);
// Places `word` before index `position` (position == size appends).
text::Tokens insert_word_at(text::Tokens tokens, const std::string& word, std::size_t position);

// Splices the sentence contiguously at one uniform position in [0, len].
text::Tokens insert_addsent(text::Tokens tokens, const text::Tokens& sentence, Rng& rng);
text::Tokens insert_sentence_at(text::Tokens tokens, const text::Tokens& sentence,
                                std::size_t position);

// Applies the trigger to a surface text (whitespace tokens, joined by single spaces).
std::string apply_trigger(const std::string& text, const TriggerSpec& trigger, Rng& rng);

struct Selection {
  std::vector<std::int64_t> ids;  // ascending
  std::size_t requested = 0;
  std::optional<std::string> warning;
};

// round-half-up(rate * n)
std::size_t poison_count(double rate, std::size_t n);

Selection select_poison_indices(const corpus::Samples& split, const PoisonSpec& spec);

struct PoisonedDataset {
  corpus::Dataset dataset;
  PoisonSpec spec;
  corpus::Split split = corpus::Split::train;
  std::vector<std::int64_t> mask;  // ascending ids within `split`
  // Pre-trigger text of every masked sample.
  std::map<std::int64_t, std::string> clean_text;
  std::vector<std::string> warnings;

  bool is_poisoned(std::int64_t id) const;
  const corpus::Samples& samples() const { return dataset.at(split); }
};

// Poisons the train split: selected samples get the trigger, the target
// label and poisoned=true. Dev and test are copied untouched.
PoisonedDataset poison(const corpus::Dataset& dataset, const PoisonSpec& spec);

// Triggered evaluation set: every test sample whose original label differs
// from the target, relabeled to the target. Target-label samples are
// excluded, so the returned test split holds only poisoned samples.
PoisonedDataset poison_test_set(const corpus::Dataset& dataset, const PoisonSpec& spec);

// Sidecar manifest (JSON): spec, split, mask ids, warnings.
void write_manifest(const std::filesystem::path& path, const PoisonedDataset& poisoned);

struct Manifest {
  PoisonSpec spec;
  corpus::Split split = corpus::Split::train;
  std::vector<std::int64_t> mask;
  std::vector<std::string> warnings;
};

Manifest read_manifest(const std::filesystem::path& path);

}  // namespace backbench::attack
