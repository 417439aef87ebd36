#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace backbench::corpus {

struct TextSample {
  std::int64_t id = 0;
  std::string text;
  int label = 0;
  bool poisoned = false;
  // Label before any poison-time relabeling.
  int original_label = 0;

  bool operator==(const TextSample&) const = default;
};

using Samples = std::vector<TextSample>;

enum class Split { train, dev, test };

const char* to_string(Split split);
Split parse_split(const std::string& name);

enum class Format { tsv, jsonl };

const char* to_string(Format format);
Format parse_format(const std::string& name);

struct Dataset {
  std::string name;
  int num_classes = 2;
  std::map<Split, Samples> splits;

  bool has(Split split) const { return splits.count(split) != 0; }
  // Throws ValidationError if the split is absent.
  const Samples& at(Split split) const;
  Samples& at(Split split);

  // Checks every invariant (unique ids, label bounds, provenance
  // consistency, nonempty splits). Throws ValidationError.
  void validate() const;

  bool operator==(const Dataset&) const = default;
};

// Per-class counts of a sample list; sums to samples.size().
std::vector<std::size_t> label_histogram(const Samples& samples, int num_classes);

// Reads one split from a TSV (text<TAB>label) or JSONL ({"text","label"})
// file. Record order is preserved and ids are assigned 0..n-1.
Samples load_samples(const std::filesystem::path& path, Format format, int num_classes);

void write_samples(const std::filesystem::path& path, const Samples& samples, Format format);

// If `path` is a directory, loads {train,dev,test}.<ext> where present
// (train is required). Otherwise the file is loaded as the train split.
Dataset load_dataset(const std::filesystem::path& path, Format format, int num_classes,
                     const std::string& name = {});

// Writes each split to <dir>/<split>.<ext>.
void write_dataset(const std::filesystem::path& dir, const Dataset& dataset, Format format);

struct SyntheticSpec {
  int num_classes = 2;
  std::size_t train_size = 2000;
  std::size_t dev_size = 500;
  std::size_t test_size = 500;
  std::vector<std::vector<std::string>> class_keywords;
  std::size_t filler_vocab_size = 40;
  std::size_t min_length = 6;
  std::size_t max_length = 14;
  // Probability that a token is drawn from the sample's class keyword list.
  double keyword_rate = 0.01;
  std::uint64_t seed = 7;

  // Throws ConfigError when an invariant is violated.
  void validate() const;
};

// Two-class sentiment-flavored defaults sized 2000/500/500.
SyntheticSpec default_synthetic_spec();

// Filler word for index i: lowercase letters only, never shorter than five
// characters, so it cannot collide with short keyword or trigger tokens.
std::string filler_word(std::size_t index);

Dataset generate_synthetic(const SyntheticSpec& spec);

}  // namespace backbench::corpus
