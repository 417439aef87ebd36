#include "backbench/corpus.hpp"

#include <fstream>
#include <set>
#include <sstream>
#include <unordered_set>

#include <json.hpp>

#include "backbench/error.hpp"
#include "backbench/random.hpp"

namespace backbench::corpus {

namespace fs = std::filesystem;
using nlohmann::json;

const char* to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::dev: return "dev";
    case Split::test: return "test";
  }
  return "?";
}

Split parse_split(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "dev") return Split::dev;
  if (name == "test") return Split::test;
  throw ConfigError("unknown split '" + name + "'");
}

const char* to_string(Format format) { return format == Format::tsv ? "tsv" : "jsonl"; }

Format parse_format(const std::string& name) {
  if (name == "tsv") return Format::tsv;
  if (name == "jsonl") return Format::jsonl;
  throw ConfigError("unknown dataset format '" + name + "' (expected tsv or jsonl)");
}

const Samples& Dataset::at(Split split) const {
  auto it = splits.find(split);
  if (it == splits.end()) {
    throw ValidationError("dataset '" + name + "' has no " + to_string(split) + " split");
  }
  return it->second;
}

Samples& Dataset::at(Split split) {
  auto it = splits.find(split);
  if (it == splits.end()) {
    throw ValidationError("dataset '" + name + "' has no " + to_string(split) + " split");
  }
  return it->second;
}

void Dataset::validate() const {
  if (num_classes < 2) throw ValidationError("num_classes must be >= 2");
  for (const auto& [split, samples] : splits) {
    const std::string where = std::string(to_string(split)) + " split";
    if (samples.empty()) throw ValidationError(where + " is empty");
    std::unordered_set<std::int64_t> ids;
    for (const auto& s : samples) {
      if (!ids.insert(s.id).second) {
        throw ValidationError(where + ": duplicate sample id " + std::to_string(s.id));
      }
      if (s.label < 0 || s.label >= num_classes || s.original_label < 0 ||
          s.original_label >= num_classes) {
        throw ValidationError(where + ": sample " + std::to_string(s.id) + " label out of range");
      }
      if (!s.poisoned && s.label != s.original_label) {
        throw ValidationError(where + ": unpoisoned sample " + std::to_string(s.id) +
                              " has label != original_label");
      }
      if (s.text.empty()) {
        throw ValidationError(where + ": sample " + std::to_string(s.id) + " has empty text");
      }
    }
  }
}

std::vector<std::size_t> label_histogram(const Samples& samples, int num_classes) {
  std::vector<std::size_t> hist(static_cast<std::size_t>(num_classes), 0);
  for (const auto& s : samples) ++hist.at(static_cast<std::size_t>(s.label));
  return hist;
}

namespace {

int parse_label(const std::string& field, long line) {
  std::size_t used = 0;
  int label = 0;
  try {
    label = std::stoi(field, &used);
  } catch (const std::exception&) {
    throw ParseError("label '" + field + "' is not an integer", line);
  }
  if (used != field.size()) throw ParseError("label '" + field + "' is not an integer", line);
  return label;
}

void check_label(int label, int num_classes, long line) {
  if (label < 0 || label >= num_classes) {
    throw ValidationError("line " + std::to_string(line) + ": label " + std::to_string(label) +
                          " out of range for " + std::to_string(num_classes) + " classes");
  }
}

}  // namespace

Samples load_samples(const fs::path& path, Format format, int num_classes) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());

  Samples samples;
  std::string line;
  long lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;

    std::string text;
    int label = 0;
    if (format == Format::tsv) {
      const auto tab = line.rfind('\t');
      if (tab == std::string::npos) throw ParseError("expected text<TAB>label", lineno);
      text = line.substr(0, tab);
      label = parse_label(line.substr(tab + 1), lineno);
    } else {
      json record;
      try {
        record = json::parse(line);
      } catch (const json::parse_error& e) {
        throw ParseError(std::string("invalid JSON: ") + e.what(), lineno);
      }
      if (!record.is_object() || !record.contains("text") || !record.contains("label") ||
          !record["text"].is_string() || !record["label"].is_number_integer()) {
        throw ParseError("record needs string \"text\" and integer \"label\"", lineno);
      }
      text = record["text"].get<std::string>();
      label = record["label"].get<int>();
    }
    if (text.empty()) throw ParseError("empty text", lineno);
    check_label(label, num_classes, lineno);

    TextSample s;
    s.id = static_cast<std::int64_t>(samples.size());
    s.text = std::move(text);
    s.label = label;
    s.original_label = label;
    samples.push_back(std::move(s));
  }
  if (samples.empty()) throw ParseError("no records in " + path.string(), 0);
  return samples;
}

void write_samples(const fs::path& path, const Samples& samples, Format format) {
  // Write to a sibling temp file and rename so readers never see a partial file.
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    for (const auto& s : samples) {
      if (format == Format::tsv) {
        if (s.text.find_first_of("\t\n\r") != std::string::npos) {
          throw ValidationError("sample " + std::to_string(s.id) +
                                " contains a tab or newline; use jsonl");
        }
        out << s.text << '\t' << s.label << '\n';
      } else {
        json record;
        record["text"] = s.text;
        record["label"] = s.label;
        out << record.dump() << '\n';
      }
    }
  }
  fs::rename(tmp, path);
}

Dataset load_dataset(const fs::path& path, Format format, int num_classes,
                     const std::string& name) {
  Dataset ds;
  ds.num_classes = num_classes;
  ds.name = name.empty() ? path.stem().string() : name;
  if (fs::is_directory(path)) {
    const std::string ext = std::string(".") + to_string(format);
    for (Split split : {Split::train, Split::dev, Split::test}) {
      const fs::path file = path / (std::string(to_string(split)) + ext);
      if (fs::exists(file)) ds.splits[split] = load_samples(file, format, num_classes);
    }
    if (!ds.has(Split::train)) throw Error("no train" + ext + " in " + path.string());
  } else {
    ds.splits[Split::train] = load_samples(path, format, num_classes);
  }
  ds.validate();
  return ds;
}

void write_dataset(const fs::path& dir, const Dataset& dataset, Format format) {
  fs::create_directories(dir);
  for (const auto& [split, samples] : dataset.splits) {
    write_samples(dir / (std::string(to_string(split)) + "." + to_string(format)), samples,
                  format);
  }
}

std::string filler_word(std::size_t index) {
  static constexpr char kOnsets[] = "bdfgklmnprstvz";
  static constexpr char kVowels[] = "aeiou";
  constexpr std::size_t kSyllables = (sizeof(kOnsets) - 1) * (sizeof(kVowels) - 1);
  std::string word;
  std::size_t x = index;
  for (int i = 0; i < 3 || x > 0; ++i) {
    const std::size_t syl = x % kSyllables;
    x /= kSyllables;
    word += kOnsets[syl / (sizeof(kVowels) - 1)];
    word += kVowels[syl % (sizeof(kVowels) - 1)];
  }
  return word;
}

void SyntheticSpec::validate() const {
  if (num_classes < 2) throw ConfigError("synthetic: num_classes must be >= 2");
  if (class_keywords.size() != static_cast<std::size_t>(num_classes)) {
    throw ConfigError("synthetic: need one keyword list per class");
  }
  if (!(keyword_rate > 0.0 && keyword_rate <= 1.0)) {
    throw ConfigError("synthetic: keyword_rate must be in (0, 1]");
  }
  if (min_length < 1 || min_length > max_length) {
    throw ConfigError("synthetic: need 1 <= min_length <= max_length");
  }
  if (filler_vocab_size == 0 && keyword_rate < 1.0) {
    throw ConfigError("synthetic: filler_vocab_size must be > 0 when keyword_rate < 1");
  }
  std::set<std::string> seen;
  for (const auto& list : class_keywords) {
    if (list.empty()) throw ConfigError("synthetic: empty class keyword list");
    for (const auto& w : list) {
      if (!seen.insert(w).second) {
        throw ConfigError("synthetic: keyword '" + w + "' appears in more than one class list");
      }
    }
  }
  for (std::size_t i = 0; i < filler_vocab_size; ++i) {
    if (seen.count(filler_word(i))) {
      throw ConfigError("synthetic: keyword '" + filler_word(i) + "' collides with filler vocab");
    }
  }
}

SyntheticSpec default_synthetic_spec() {
  SyntheticSpec spec;
  spec.class_keywords = {
      {"bad", "awful", "boring", "dull", "terrible", "poor", "weak", "bland", "tedious",
       "clumsy", "messy", "stale"},
      {"good", "great", "superb", "brilliant", "lovely", "fine", "strong", "vivid", "moving",
       "smart", "charming", "fresh"},
  };
  return spec;
}

Dataset generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Dataset ds;
  ds.name = "synthetic";
  ds.num_classes = spec.num_classes;

  std::vector<std::string> filler;
  filler.reserve(spec.filler_vocab_size);
  for (std::size_t i = 0; i < spec.filler_vocab_size; ++i) filler.push_back(filler_word(i));

  const auto make_split = [&](Split split, std::size_t n) {
    Rng rng(derive_seed(spec.seed, to_string(split)));
    Samples samples;
    samples.reserve(n);
    const std::size_t span = spec.max_length - spec.min_length + 1;
    for (std::size_t i = 0; i < n; ++i) {
      const int label = static_cast<int>(i % static_cast<std::size_t>(spec.num_classes));
      const auto& keywords = spec.class_keywords[static_cast<std::size_t>(label)];
      const std::size_t len = spec.min_length + rng.below(span);
      std::vector<std::string> tokens;
      tokens.reserve(len);
      bool has_keyword = false;
      for (std::size_t t = 0; t < len; ++t) {
        if (spec.keyword_rate >= 1.0 || rng.uniform() < spec.keyword_rate) {
          tokens.push_back(keywords[rng.below(keywords.size())]);
          has_keyword = true;
        } else {
          tokens.push_back(filler[rng.below(filler.size())]);
        }
      }
      if (!has_keyword) tokens[rng.below(len)] = keywords[rng.below(keywords.size())];

      TextSample s;
      s.id = static_cast<std::int64_t>(i);
      for (std::size_t t = 0; t < tokens.size(); ++t) {
        if (t) s.text += ' ';
        s.text += tokens[t];
      }
      s.label = label;
      s.original_label = label;
      samples.push_back(std::move(s));
    }
    if (n) ds.splits[split] = std::move(samples);
  };

  make_split(Split::train, spec.train_size);
  make_split(Split::dev, spec.dev_size);
  make_split(Split::test, spec.test_size);
  return ds;
}

}  // namespace backbench::corpus
