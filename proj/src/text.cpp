#include "backbench/text.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include <json.hpp>

#include "backbench/error.hpp"

namespace backbench::text {

namespace {

bool is_space(unsigned char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

bool is_punct(unsigned char c) {
  return (c >= 33 && c <= 47) || (c >= 58 && c <= 64) || (c >= 91 && c <= 96) ||
         (c >= 123 && c <= 126);
}

}  // namespace

Tokens tokenize(std::string_view text) {
  Tokens out;
  std::string cur;
  const auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (unsigned char c : text) {
    if (is_space(c)) {
      flush();
    } else if (is_punct(c)) {
      flush();
      out.emplace_back(1, static_cast<char>(c));
    } else if (c >= 'A' && c <= 'Z') {
      cur += static_cast<char>(c - 'A' + 'a');
    } else {
      cur += static_cast<char>(c);
    }
  }
  flush();
  return out;
}

std::string detokenize(std::span<const std::string> tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += tokens[i];
  }
  return out;
}

Tokens split_whitespace(std::string_view text) {
  Tokens out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_space(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !is_space(static_cast<unsigned char>(text[j]))) ++j;
    if (j > i) out.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

Vocabulary::Vocabulary() : tokens_{kUnk} { index_.emplace(kUnk, kUnkIndex); }

Vocabulary Vocabulary::build(const std::vector<Tokens>& docs) {
  std::set<std::string> uniq;
  for (const auto& d : docs) uniq.insert(d.begin(), d.end());
  uniq.erase(kUnk);
  Vocabulary v;
  for (const auto& t : uniq) {
    v.index_.emplace(t, v.tokens_.size());
    v.tokens_.push_back(t);
  }
  return v;
}

std::size_t Vocabulary::index(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnkIndex : it->second;
}

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

DocumentFrequency DocumentFrequency::fit(const std::vector<Tokens>& docs, std::size_t dims) {
  DocumentFrequency out;
  out.dims = dims;
  out.num_docs = docs.size();
  out.df.assign(dims, 0);
  std::vector<std::size_t> buckets;
  for (const auto& d : docs) {
    buckets.clear();
    for (const auto& t : d) buckets.push_back(bucket_of(t, dims));
    std::sort(buckets.begin(), buckets.end());
    buckets.erase(std::unique(buckets.begin(), buckets.end()), buckets.end());
    for (auto b : buckets) ++out.df[b];
  }
  return out;
}

double DocumentFrequency::idf(std::size_t bucket) const {
  return std::log((1.0 + static_cast<double>(num_docs)) / (1.0 + df.at(bucket))) + 1.0;
}

double FeatureVector::operator[](std::size_t bucket) const {
  auto it = std::lower_bound(entries_.begin(), entries_.end(), bucket,
                             [](const Entry& e, std::size_t b) { return e.bucket < b; });
  return (it != entries_.end() && it->bucket == bucket) ? it->value : 0.0;
}

std::vector<double> FeatureVector::dense() const {
  std::vector<double> out(dims_, 0.0);
  for (const auto& e : entries_) out[e.bucket] = e.value;
  return out;
}

FeatureVector featurize(std::span<const std::string> tokens, std::size_t dims,
                        Weighting weighting, const DocumentFrequency* df) {
  if (dims < 2 || (dims & (dims - 1)) != 0) {
    throw ConfigError("feature dims must be a power of two >= 2, got " + std::to_string(dims));
  }
  if (weighting == Weighting::tfidf && (df == nullptr || df->dims != dims)) {
    throw StateError("tfidf featurization requires a fitted document-frequency table");
  }
  std::vector<std::uint32_t> buckets;
  buckets.reserve(tokens.size());
  for (const auto& t : tokens) buckets.push_back(static_cast<std::uint32_t>(bucket_of(t, dims)));
  std::sort(buckets.begin(), buckets.end());

  std::vector<FeatureVector::Entry> entries;
  for (std::size_t i = 0; i < buckets.size();) {
    std::size_t j = i;
    while (j < buckets.size() && buckets[j] == buckets[i]) ++j;
    entries.push_back({buckets[i], static_cast<double>(j - i)});
    i = j;
  }
  if (weighting == Weighting::tfidf) {
    for (auto& e : entries) e.value *= df->idf(e.bucket);
  }
  double sq = 0.0;
  for (const auto& e : entries) sq += e.value * e.value;
  const double norm = std::sqrt(sq);
  if (weighting == Weighting::tfidf && norm > 0.0) {
    for (auto& e : entries) e.value /= norm;
  }
  return FeatureVector(dims, std::move(entries), norm);
}

// ---------------------------------------------------------------------------
// NGramLM

NGramLM NGramLM::fit(const std::vector<Tokens>& corpus, int order, double add_k) {
  if (order != 2 && order != 3) {
    throw ConfigError("n-gram order must be 2 or 3, got " + std::to_string(order));
  }
  if (!(add_k > 0.0)) throw ConfigError("add_k must be > 0");
  if (corpus.empty()) throw ConfigError("language model corpus is empty");

  NGramLM lm;
  lm.order_ = order;
  lm.add_k_ = add_k;

  std::set<std::string> uniq;
  for (const auto& sent : corpus) uniq.insert(sent.begin(), sent.end());
  uniq.erase(kUnk);
  uniq.erase(kEos);
  uniq.erase(kBos);
  lm.vocab_ = {kUnk, kEos};
  lm.vocab_.insert(lm.vocab_.end(), uniq.begin(), uniq.end());
  for (std::uint32_t i = 0; i < lm.vocab_.size(); ++i) lm.index_.emplace(lm.vocab_[i], i);
  lm.bos_ = static_cast<std::uint32_t>(lm.vocab_.size());
  lm.unigram_counts_.assign(lm.vocab_.size(), 0);

  const std::size_t ctx_len = static_cast<std::size_t>(order - 1);
  for (const auto& sent : corpus) {
    Key ctx(ctx_len, lm.bos_);
    const auto add = [&](std::uint32_t w) {
      ++lm.ngram_counts_[ctx][w];
      ++lm.context_totals_[ctx];
      ++lm.unigram_counts_[w];
      ctx.erase(ctx.begin());
      ctx.push_back(w);
    };
    for (const auto& tok : sent) add(lm.id_of(tok));
    add(1);  // </s>
  }
  return lm;
}

std::uint32_t NGramLM::id_of(const std::string& token) const {
  if (token == kBos) return bos_;
  auto it = index_.find(token);
  return it == index_.end() ? 0u : it->second;
}

double NGramLM::prob_ids(const Key& context, std::uint32_t word) const {
  const double v = static_cast<double>(vocab_.size());
  auto tot = context_totals_.find(context);
  if (tot == context_totals_.end()) return 1.0 / v;
  const auto& nexts = ngram_counts_.at(context);
  auto it = nexts.find(word);
  const double c = it == nexts.end() ? 0.0 : static_cast<double>(it->second);
  return (c + add_k_) / (static_cast<double>(tot->second) + add_k_ * v);
}

double NGramLM::prob(std::span<const std::string> context, const std::string& word) const {
  const std::size_t ctx_len = static_cast<std::size_t>(order_ - 1);
  if (context.size() != ctx_len) {
    throw ConfigError("context must hold exactly " + std::to_string(ctx_len) + " tokens");
  }
  Key key;
  for (const auto& t : context) key.push_back(id_of(t));
  const std::uint32_t w = word == kBos ? 0u : id_of(word);
  return prob_ids(key, w);
}

std::vector<Tokens> NGramLM::contexts() const {
  std::vector<Tokens> out;
  for (const auto& [key, total] : context_totals_) {
    Tokens ctx;
    for (auto id : key) ctx.push_back(id == bos_ ? kBos : vocab_[id]);
    out.push_back(std::move(ctx));
  }
  return out;
}

double NGramLM::perplexity(std::span<const std::string> tokens) const {
  Key ctx(static_cast<std::size_t>(order_ - 1), bos_);
  double nll = 0.0;
  const auto step = [&](std::uint32_t w) {
    nll -= std::log(prob_ids(ctx, w));
    ctx.erase(ctx.begin());
    ctx.push_back(w);
  };
  for (const auto& t : tokens) step(t == kBos ? 0u : id_of(t));
  step(1);
  return std::exp(nll / static_cast<double>(tokens.size() + 1));
}

void NGramLM::save(const std::filesystem::path& path) const {
  nlohmann::json j;
  j["format"] = "backbench-ngram";
  j["version"] = 1;
  j["order"] = order_;
  j["add_k"] = add_k_;
  j["vocab"] = vocab_;
  auto counts = nlohmann::json::array();
  for (const auto& [ctx, nexts] : ngram_counts_) {
    for (const auto& [w, c] : nexts) {
      auto row = nlohmann::json::array();
      for (auto id : ctx) row.push_back(id);
      row.push_back(w);
      row.push_back(c);
      counts.push_back(std::move(row));
    }
  }
  j["counts"] = std::move(counts);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump() << '\n';
}

NGramLM NGramLM::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("language model file: ") + e.what(), 0);
  }
  if (j.value("format", "") != "backbench-ngram" || j.value("version", 0) != 1) {
    throw ParseError("unsupported language model file " + path.string(), 0);
  }
  NGramLM lm;
  lm.order_ = j.at("order").get<int>();
  lm.add_k_ = j.at("add_k").get<double>();
  lm.vocab_ = j.at("vocab").get<std::vector<std::string>>();
  for (std::uint32_t i = 0; i < lm.vocab_.size(); ++i) lm.index_.emplace(lm.vocab_[i], i);
  lm.bos_ = static_cast<std::uint32_t>(lm.vocab_.size());
  lm.unigram_counts_.assign(lm.vocab_.size(), 0);
  const std::size_t ctx_len = static_cast<std::size_t>(lm.order_ - 1);
  for (const auto& row : j.at("counts")) {
    if (row.size() != ctx_len + 2) throw ParseError("malformed count row", 0);
    Key ctx;
    for (std::size_t i = 0; i < ctx_len; ++i) ctx.push_back(row[i].get<std::uint32_t>());
    const auto w = row[ctx_len].get<std::uint32_t>();
    const auto c = row[ctx_len + 1].get<std::uint64_t>();
    if (w >= lm.vocab_.size()) throw ParseError("count row references unknown token", 0);
    lm.ngram_counts_[ctx][w] = c;
    lm.context_totals_[ctx] += c;
    lm.unigram_counts_[w] += c;
  }
  return lm;
}

}  // namespace backbench::text
