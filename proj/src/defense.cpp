#include "backbench/defense.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <unordered_map>
#include <unordered_set>

#include "backbench/error.hpp"
#include "backbench/random.hpp"

namespace backbench::defense {

corpus::Samples FilterResult::apply(const corpus::Samples& train) const {
  const std::unordered_set<std::int64_t> keep(kept.begin(), kept.end());
  corpus::Samples out;
  for (const auto& s : train) {
    if (keep.count(s.id)) out.push_back(s);
  }
  return out;
}

// ---------------------------------------------------------------------------
// CUBE

CubeResult cube_filter(const corpus::Samples& train, std::size_t num_classes,
                       const victim::VictimConfig& victim_config, const CubeConfig& config) {
  if (train.empty()) throw ConfigError("cube_filter: train split is empty");
  if (victim_config.hidden_dim < config.reduce_dim) {
    throw ConfigError("cube_filter: hidden_dim must be >= reduce_dim");
  }
  config.hdbscan.validate();

  CubeResult out;
  out.model = victim::train(train, num_classes, victim_config);

  const std::size_t n = train.size();
  cluster::Matrix reps(n, victim_config.hidden_dim);
  for (std::size_t i = 0; i < n; ++i) {
    const auto h = out.model.represent(train[i].text);
    std::copy(h.begin(), h.end(), reps.data.begin() + static_cast<std::ptrdiff_t>(i * reps.cols));
  }

  if (n >= 2 * config.hdbscan.min_cluster_size) {
    const std::size_t dim = std::min({config.reduce_dim, n, reps.cols});
    out.embeddings = cluster::pca_fit_transform(reps, dim).reduced;
    out.clusters = cluster::hdbscan(out.embeddings, config.hdbscan);
  } else {
    out.embeddings = reps;
    out.clusters.labels.assign(n, cluster::ClusterAssignment::kNoise);
  }

  const auto& labels = out.clusters.labels;
  FilterResult& f = out.filter;
  if (out.clusters.num_clusters == 0) {
    f.warnings.push_back("cube: every sample is HDBSCAN noise; filtering refused, keeping all " +
                         std::to_string(n) + " samples");
    for (std::size_t i = 0; i < n; ++i) {
      f.kept.push_back(train[i].id);
      f.diagnostics.push_back({train[i].id, -1.0, "noise"});
    }
    return out;
  }

  // Largest cluster per observed label; ties go to the lower cluster id.
  std::map<int, std::map<int, std::size_t>> counts;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] != cluster::ClusterAssignment::kNoise) ++counts[train[i].label][labels[i]];
  }
  std::map<int, int> keep_cluster;
  for (const auto& [label, per_cluster] : counts) {
    int best = -1;
    std::size_t best_size = 0;
    for (const auto& [cid, size] : per_cluster) {
      if (size > best_size) {
        best = cid;
        best_size = size;
      }
    }
    keep_cluster[label] = best;
  }
  for (std::size_t i = 0; i < n; ++i) {
    const auto it = keep_cluster.find(train[i].label);
    const bool keep = labels[i] != cluster::ClusterAssignment::kNoise &&
                      it != keep_cluster.end() && it->second == labels[i];
    (keep ? f.kept : f.dropped).push_back(train[i].id);
    f.diagnostics.push_back({train[i].id, static_cast<double>(labels[i]),
                             labels[i] == cluster::ClusterAssignment::kNoise
                                 ? "noise"
                                 : (keep ? "largest" : "minor")});
  }
  return out;
}

// ---------------------------------------------------------------------------
// BKI

BkiResult bki_filter(const corpus::Samples& train, const victim::VictimModel& model,
                     std::size_t top_k, std::size_t per_sample_top) {
  struct Acc {
    double sum = 0.0;
    std::size_t count = 0;
  };
  std::map<std::string, Acc> acc;
  BkiResult out;
  std::vector<text::Tokens> tokenized;
  tokenized.reserve(train.size());

  for (const auto& s : train) {
    tokenized.push_back(text::tokenize(s.text));
    const auto& tokens = tokenized.back();
    if (tokens.empty()) {
      out.filter.diagnostics.push_back({s.id, 0.0, "empty text skipped"});
      continue;
    }
    const auto base = model.represent(text::featurize(tokens, model.dims()));
    const std::set<std::string> uniq(tokens.begin(), tokens.end());
    std::vector<std::pair<double, std::string>> scored;
    text::Tokens rest;
    for (const auto& w : uniq) {
      rest.clear();
      for (const auto& t : tokens) {
        if (t != w) rest.push_back(t);
      }
      const auto h = model.represent(text::featurize(rest, model.dims()));
      double sq = 0.0;
      for (std::size_t j = 0; j < h.size(); ++j) sq += (h[j] - base[j]) * (h[j] - base[j]);
      scored.emplace_back(std::sqrt(sq), w);
    }
    // Highest salience first; ties by word for determinism.
    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
      return a.first != b.first ? a.first > b.first : a.second < b.second;
    });
    const std::size_t take = std::min(per_sample_top, scored.size());
    for (std::size_t i = 0; i < take; ++i) {
      if (scored[i].first <= 0.0) break;
      auto& a = acc[scored[i].second];
      a.sum += scored[i].first;
      ++a.count;
    }
  }

  std::vector<Keyword> ranked;
  for (const auto& [word, a] : acc) {
    ranked.push_back({word, a.sum / static_cast<double>(a.count) *
                                std::log(1.0 + static_cast<double>(a.count)),
                      a.count});
  }
  std::sort(ranked.begin(), ranked.end(), [](const Keyword& a, const Keyword& b) {
    return a.score != b.score ? a.score > b.score : a.word < b.word;
  });
  if (ranked.size() > top_k) ranked.resize(top_k);
  out.keywords = ranked;

  std::set<std::string> bad;
  for (const auto& k : ranked) bad.insert(k.word);
  for (std::size_t i = 0; i < train.size(); ++i) {
    std::size_t hits = 0;
    for (const auto& t : tokenized[i]) hits += bad.count(t);
    (hits ? out.filter.dropped : out.filter.kept).push_back(train[i].id);
    if (!tokenized[i].empty()) {
      out.filter.diagnostics.push_back({train[i].id, static_cast<double>(hits), ""});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// ONION

std::vector<double> onion_suspicion(const text::Tokens& tokens, const text::NGramLM& lm) {
  std::vector<double> scores;
  scores.reserve(tokens.size());
  const double full = lm.perplexity(tokens);
  text::Tokens rest;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    rest.clear();
    for (std::size_t j = 0; j < tokens.size(); ++j) {
      if (j != i) rest.push_back(tokens[j]);
    }
    scores.push_back(full - lm.perplexity(rest));
  }
  return scores;
}

double onion_max_suspicion(const text::Tokens& tokens, const text::NGramLM& lm) {
  const auto s = onion_suspicion(tokens, lm);
  return s.empty() ? -std::numeric_limits<double>::infinity() : *std::max_element(s.begin(), s.end());
}

text::Tokens onion_correct(const text::Tokens& tokens, const text::NGramLM& lm, double threshold) {
  text::Tokens out = tokens;
  const std::size_t cap = tokens.size() / 5;  // floor(0.2 n)
  for (std::size_t removed = 0; removed < cap; ++removed) {
    const auto scores = onion_suspicion(out, lm);
    if (scores.empty()) break;
    const auto it = std::max_element(scores.begin(), scores.end());
    if (!(*it > threshold)) break;
    out.erase(out.begin() + (it - scores.begin()));
  }
  return out;
}

// ---------------------------------------------------------------------------
// STRIP

double strip_entropy(const std::string& text, std::int64_t id, const victim::VictimModel& model,
                     const text::Vocabulary& vocab, const StripConfig& config) {
  const auto tokens = text::tokenize(text);
  if (tokens.empty()) throw ConfigError("strip: empty text");
  if (vocab.words().empty()) throw ConfigError("strip: replacement vocabulary is empty");
  const auto words = vocab.words();
  const std::size_t n = tokens.size();
  const std::size_t replace = std::max<std::size_t>(
      1, std::min(n, static_cast<std::size_t>(std::floor(config.replace_frac * n + 0.5))));

  Rng rng(derive_seed(config.seed, static_cast<std::uint64_t>(id)));
  std::vector<std::size_t> positions(n);
  double total = 0.0;
  for (std::size_t k = 0; k < config.copies; ++k) {
    for (std::size_t i = 0; i < n; ++i) positions[i] = i;
    text::Tokens copy = tokens;
    for (std::size_t i = 0; i < replace; ++i) {
      std::swap(positions[i], positions[i + rng.below(n - i)]);
      copy[positions[i]] = words[rng.below(words.size())];
    }
    const auto p = model.predict_proba(text::featurize(copy, model.dims()));
    double h = 0.0;
    for (double q : p) {
      if (q > 0.0) h -= q * std::log(q);
    }
    total += h;
  }
  return total / static_cast<double>(config.copies);
}

DetectionVerdict strip_detect(const corpus::TextSample& sample, const victim::VictimModel& model,
                              const text::Vocabulary& vocab, const StripConfig& config,
                              double threshold) {
  if (config.copies < 8) throw ConfigError("strip: need at least 8 perturbed copies");
  DetectionVerdict v;
  v.id = sample.id;
  v.threshold = threshold;
  if (text::tokenize(sample.text).empty()) {
    v.score = std::numeric_limits<double>::quiet_NaN();
    v.note = "empty text; not flagged";
    return v;
  }
  v.score = strip_entropy(sample.text, sample.id, model, vocab, config);
  v.flagged = is_flagged(v.score, threshold, FlagDirection::below);
  return v;
}

double quantile(std::vector<double> values, double p) {
  if (values.empty()) throw ConfigError("quantile of an empty list");
  std::sort(values.begin(), values.end());
  const double h = (static_cast<double>(values.size()) - 1.0) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (h - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

double calibrate_threshold(const std::vector<double>& clean_scores, double target_frr,
                           FlagDirection direction) {
  if (!(target_frr > 0.0 && target_frr <= 0.5)) {
    throw ConfigError("target_frr must be in (0, 0.5]");
  }
  if (clean_scores.size() < 20) {
    throw ConfigError("threshold calibration needs at least 20 clean scores, got " +
                      std::to_string(clean_scores.size()));
  }
  return quantile(clean_scores, direction == FlagDirection::below ? target_frr : 1.0 - target_frr);
}

namespace {

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void write_verdicts_csv(const std::filesystem::path& path,
                        const std::vector<DetectionVerdict>& verdicts) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << "id,score,flagged,threshold,note\n";
  for (const auto& v : verdicts) {
    out << v.id << ',' << fmt_double(v.score) << ',' << (v.flagged ? 1 : 0) << ','
        << fmt_double(v.threshold) << ',' << v.note << '\n';
  }
}

void write_filter_csv(const std::filesystem::path& path, const FilterResult& result) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  std::unordered_map<std::int64_t, const SampleDiagnostic*> diag;
  for (const auto& d : result.diagnostics) diag.emplace(d.id, &d);
  std::vector<std::pair<std::int64_t, bool>> rows;
  for (auto id : result.kept) rows.emplace_back(id, true);
  for (auto id : result.dropped) rows.emplace_back(id, false);
  std::sort(rows.begin(), rows.end());
  out << "id,kept,score,note\n";
  for (const auto& [id, kept] : rows) {
    auto it = diag.find(id);
    out << id << ',' << (kept ? 1 : 0) << ','
        << (it == diag.end() ? std::string() : fmt_double(it->second->score)) << ','
        << (it == diag.end() ? std::string() : it->second->note) << '\n';
  }
}

}  // namespace backbench::defense
