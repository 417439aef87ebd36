#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace backbench::text {

using Tokens = std::vector<std::string>;

// Lowercases ASCII letters, splits on whitespace, and emits every ASCII
// punctuation character as its own token. Bytes >= 0x80 are kept verbatim.
Tokens tokenize(std::string_view text);

// Inverse of tokenize for punctuation-free lowercase token lists.
std::string detokenize(std::span<const std::string> tokens);

// Splits on ASCII whitespace only; preserves case and punctuation. Trigger
// insertion operates on these surface tokens.
Tokens split_whitespace(std::string_view text);

// Token <-> index map with <unk> fixed at index 0; remaining entries are
// sorted so the mapping does not depend on document order.
class Vocabulary {
 public:
  static constexpr std::size_t kUnkIndex = 0;

  Vocabulary();
  static Vocabulary build(const std::vector<Tokens>& docs);

  std::size_t size() const { return tokens_.size(); }
  std::size_t index(const std::string& token) const;
  const std::string& token(std::size_t index) const { return tokens_.at(index); }
  bool contains(const std::string& token) const { return index_.count(token) != 0; }
  // Non-special entries, in index order.
  std::span<const std::string> words() const {
    return std::span<const std::string>(tokens_).subspan(1);
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
};

// 64-bit FNV-1a over the UTF-8 bytes.
std::uint64_t fnv1a(std::string_view bytes);

inline constexpr std::size_t kDefaultFeatureDims = std::size_t{1} << 14;

enum class Weighting { count, tfidf };

// Per-bucket document frequencies for tf-idf weighting of hashed features.
struct DocumentFrequency {
  std::size_t dims = 0;
  std::size_t num_docs = 0;
  std::vector<std::uint32_t> df;

  static DocumentFrequency fit(const std::vector<Tokens>& docs, std::size_t dims);
  double idf(std::size_t bucket) const;
};

// Hashed bag-of-words vector. Stored sparsely (sorted unique buckets); the
// dense view is available through dense()/operator[].
class FeatureVector {
 public:
  struct Entry {
    std::uint32_t bucket;
    double value;
    bool operator==(const Entry&) const = default;
  };

  FeatureVector() = default;
  FeatureVector(std::size_t dims, std::vector<Entry> entries, double l2_norm)
      : dims_(dims), entries_(std::move(entries)), norm_(l2_norm) {}

  std::size_t dims() const { return dims_; }
  std::span<const Entry> entries() const { return entries_; }
  // L2 norm of the vector before any normalization was applied.
  double raw_norm() const { return norm_; }

  double operator[](std::size_t bucket) const;
  std::vector<double> dense() const;

  bool operator==(const FeatureVector&) const = default;

 private:
  std::size_t dims_ = 0;
  std::vector<Entry> entries_;
  double norm_ = 0.0;
};

inline std::size_t bucket_of(std::string_view token, std::size_t dims) {
  return static_cast<std::size_t>(fnv1a(token) % dims);
}

// Throws ConfigError unless dims is a power of two >= 2, and StateError
// when tfidf is requested without a df table of matching dimension.
FeatureVector featurize(std::span<const std::string> tokens, std::size_t dims,
                        Weighting weighting = Weighting::count,
                        const DocumentFrequency* df = nullptr);

inline const std::string kUnk = "<unk>";
inline const std::string kBos = "<s>";
inline const std::string kEos = "</s>";

// Add-k smoothed n-gram language model (order 2 or 3). The predicted
// vocabulary is every training token plus <unk> and </s>; <s> appears only
// as context padding.
class NGramLM {
 public:
  static NGramLM fit(const std::vector<Tokens>& corpus, int order, double add_k);

  int order() const { return order_; }
  double add_k() const { return add_k_; }
  // Size of the predicted vocabulary (includes <unk> and </s>).
  std::size_t vocab_size() const { return vocab_.size(); }
  const std::vector<std::string>& vocab() const { return vocab_; }
  bool contains(const std::string& token) const { return index_.count(token) != 0; }

  // P(word | context); context holds the previous order-1 tokens, oldest
  // first. Unknown words and context tokens map to <unk>.
  double prob(std::span<const std::string> context, const std::string& word) const;

  // Every context observed in training, as token lists.
  std::vector<Tokens> contexts() const;

  // exp of the mean negative log-probability over len+1 predictions (the
  // tokens and the end marker). An empty input scores the lone end marker.
  double perplexity(std::span<const std::string> tokens) const;

  void save(const std::filesystem::path& path) const;
  static NGramLM load(const std::filesystem::path& path);

  bool operator==(const NGramLM&) const = default;

 private:
  using Key = std::vector<std::uint32_t>;

  std::uint32_t id_of(const std::string& token) const;
  double prob_ids(const Key& context, std::uint32_t word) const;

  int order_ = 2;
  double add_k_ = 1.0;
  std::vector<std::string> vocab_;  // index 0 is <unk>
  std::unordered_map<std::string, std::uint32_t> index_;
  std::uint32_t bos_ = 0;
  // Context ids (order-1) -> (next id -> count). <s> has id vocab_.size().
  std::map<Key, std::map<std::uint32_t, std::uint64_t>> ngram_counts_;
  std::map<Key, std::uint64_t> context_totals_;
  std::vector<std::uint64_t> unigram_counts_;
};

}  // namespace backbench::text
