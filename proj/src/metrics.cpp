#include "backbench/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

#include "backbench/error.hpp"

namespace backbench::metrics {

std::vector<int> predict_all(const victim::VictimModel& model, const corpus::Samples& samples) {
  std::vector<int> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(model.predict(s.text));
  return out;
}

double asr(std::span<const int> predictions, int target_label) {
  if (predictions.empty()) throw UndefinedRateError("ASR of an empty poisoned test set");
  std::size_t hit = 0;
  for (int p : predictions) hit += p == target_label;
  return static_cast<double>(hit) / static_cast<double>(predictions.size());
}

double asr(const victim::VictimModel& model, const corpus::Samples& poisoned_test,
           int target_label) {
  return asr(predict_all(model, poisoned_test), target_label);
}

double cacc(std::span<const int> predictions, std::span<const int> labels) {
  if (predictions.size() != labels.size()) throw ConfigError("cacc: length mismatch");
  if (predictions.empty()) throw UndefinedRateError("CACC of an empty test set");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) hit += predictions[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(predictions.size());
}

namespace {

std::vector<int> labels_of(const corpus::Samples& samples) {
  std::vector<int> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(s.label);
  return out;
}

}  // namespace

double cacc(const victim::VictimModel& model, const corpus::Samples& clean_test) {
  return cacc(predict_all(model, clean_test), labels_of(clean_test));
}

double asr_margin(const victim::VictimModel& poisoned_model,
                  const victim::VictimModel& clean_model, const corpus::Samples& poisoned_test,
                  int target_label) {
  return asr(poisoned_model, poisoned_test, target_label) -
         asr(clean_model, poisoned_test, target_label);
}

double asr_under_detection(std::span<const int> predictions, const std::vector<bool>& flagged,
                           int target_label) {
  if (predictions.size() != flagged.size()) throw ConfigError("asr_under_detection: length mismatch");
  if (predictions.empty()) throw UndefinedRateError("ASR of an empty poisoned test set");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    hit += !flagged[i] && predictions[i] == target_label;
  }
  return static_cast<double>(hit) / static_cast<double>(predictions.size());
}

double cacc_under_detection(std::span<const int> predictions, std::span<const int> labels,
                            const std::vector<bool>& flagged) {
  if (predictions.size() != labels.size() || predictions.size() != flagged.size()) {
    throw ConfigError("cacc_under_detection: length mismatch");
  }
  if (predictions.empty()) throw UndefinedRateError("CACC of an empty test set");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    hit += !flagged[i] && predictions[i] == labels[i];
  }
  return static_cast<double>(hit) / static_cast<double>(predictions.size());
}

// ---------------------------------------------------------------------------

double delta_ppl(const std::vector<std::string>& clean_texts,
                 const std::vector<std::string>& poisoned_texts, const text::NGramLM& lm) {
  if (clean_texts.size() != poisoned_texts.size()) {
    throw ConfigError("delta_ppl: clean and poisoned lists differ in length");
  }
  if (clean_texts.empty()) throw UndefinedRateError("delta_ppl of an empty list");
  double sum = 0.0;
  for (std::size_t i = 0; i < clean_texts.size(); ++i) {
    sum += lm.perplexity(text::tokenize(poisoned_texts[i])) -
           lm.perplexity(text::tokenize(clean_texts[i]));
  }
  return sum / static_cast<double>(clean_texts.size());
}

double delta_ge(const std::vector<std::string>& clean_texts,
                const std::vector<std::string>& poisoned_texts,
                const std::set<std::string>& lexicon) {
  if (clean_texts.size() != poisoned_texts.size()) {
    throw ConfigError("delta_ge: clean and poisoned lists differ in length");
  }
  if (clean_texts.empty()) throw UndefinedRateError("delta_ge of an empty list");
  const auto oov = [&](const std::string& t) {
    long c = 0;
    for (const auto& tok : text::tokenize(t)) c += lexicon.count(tok) == 0;
    return c;
  };
  long total = 0;
  for (std::size_t i = 0; i < clean_texts.size(); ++i) {
    total += oov(poisoned_texts[i]) - oov(clean_texts[i]);
  }
  return static_cast<double>(total) / static_cast<double>(clean_texts.size());
}

std::set<std::string> build_lexicon(const corpus::Samples& samples) {
  std::set<std::string> lex;
  for (const auto& s : samples) {
    for (auto& t : text::tokenize(s.text)) lex.insert(std::move(t));
  }
  return lex;
}

// ---------------------------------------------------------------------------

SimilarityScorer SimilarityScorer::fit(const std::vector<text::Tokens>& docs) {
  SimilarityScorer s;
  s.num_docs_ = docs.size();
  for (const auto& d : docs) {
    const std::set<std::string> uniq(d.begin(), d.end());
    for (const auto& t : uniq) ++s.df_[t];
  }
  return s;
}

SimilarityScorer SimilarityScorer::fit(const corpus::Samples& samples) {
  std::vector<text::Tokens> docs;
  docs.reserve(samples.size());
  for (const auto& s : samples) docs.push_back(text::tokenize(s.text));
  return fit(docs);
}

double SimilarityScorer::idf(const std::string& token) const {
  const auto it = df_.find(token);
  const double df = it == df_.end() ? 0.0 : static_cast<double>(it->second);
  return std::log((1.0 + static_cast<double>(num_docs_)) / (1.0 + df)) + 1.0;
}

double SimilarityScorer::score(const std::string& a, const std::string& b) const {
  const auto weights = [&](const std::string& t) {
    std::map<std::string, double> w;
    for (const auto& tok : text::tokenize(t)) w[tok] += 1.0;
    for (auto& [tok, v] : w) v *= idf(tok);
    return w;
  };
  const auto wa = weights(a), wb = weights(b);
  if (wa.empty() || wb.empty()) return 0.0;
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (const auto& [tok, v] : wa) {
    na += v * v;
    const auto it = wb.find(tok);
    if (it != wb.end()) dot += v * it->second;
  }
  for (const auto& [tok, v] : wb) nb += v * v;
  return std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
}

double mean_similarity(const SimilarityScorer& scorer, const std::vector<std::string>& clean,
                       const std::vector<std::string>& poisoned) {
  if (clean.size() != poisoned.size()) throw ConfigError("similarity: length mismatch");
  if (clean.empty()) throw UndefinedRateError("similarity of an empty list");
  double sum = 0.0;
  for (std::size_t i = 0; i < clean.size(); ++i) sum += scorer.score(clean[i], poisoned[i]);
  return sum / static_cast<double>(clean.size());
}

// ---------------------------------------------------------------------------

DetectionRates far_frr(const std::vector<defense::DetectionVerdict>& verdicts,
                       const std::map<std::int64_t, bool>& is_poisoned) {
  DetectionRates r;
  std::size_t accepted_poison = 0, rejected_clean = 0;
  for (const auto& v : verdicts) {
    const auto it = is_poisoned.find(v.id);
    if (it == is_poisoned.end()) {
      throw ValidationError("verdict for id " + std::to_string(v.id) + " has no ground truth");
    }
    if (it->second) {
      ++r.n_poisoned;
      accepted_poison += !v.flagged;
    } else {
      ++r.n_clean;
      rejected_clean += v.flagged;
    }
  }
  if (r.n_poisoned) r.far = static_cast<double>(accepted_poison) / static_cast<double>(r.n_poisoned);
  if (r.n_clean) r.frr = static_cast<double>(rejected_clean) / static_cast<double>(r.n_clean);
  return r;
}

double value_or_throw(const std::optional<double>& rate, const char* what) {
  if (!rate) throw UndefinedRateError(std::string(what) + " is undefined (empty denominator)");
  return *rate;
}

// ---------------------------------------------------------------------------
// CSV

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string csv_escape(const std::string& field) {
  if (field.find_first_of(",\"\n") == std::string::npos) return field;
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(std::move(cur));
  return out;
}

namespace {

struct Column {
  std::string name;
  std::function<std::string(const EvalReport&)> get;
  std::function<void(EvalReport&, const std::string&)> set;
};

template <typename T>
Column text_col(const char* name, T EvalReport::*field) {
  return {name, [field](const EvalReport& r) { return csv_escape(r.*field); },
          [field](EvalReport& r, const std::string& v) { r.*field = v; }};
}

Column opt_col(const char* name, std::optional<double> EvalReport::*field) {
  return {name,
          [field](const EvalReport& r) {
            return (r.*field) ? format_double(*(r.*field)) : std::string();
          },
          [field](EvalReport& r, const std::string& v) {
            if (v.empty()) {
              r.*field = std::nullopt;
            } else {
              r.*field = std::stod(v);
            }
          }};
}

Column opt_int_col(const char* name, std::optional<std::int64_t> EvalReport::*field) {
  return {name,
          [field](const EvalReport& r) {
            return (r.*field) ? std::to_string(*(r.*field)) : std::string();
          },
          [field](EvalReport& r, const std::string& v) {
            if (v.empty()) {
              r.*field = std::nullopt;
            } else {
              r.*field = std::stoll(v);
            }
          }};
}

Column int_col(const char* name, std::int64_t EvalReport::*field) {
  return {name, [field](const EvalReport& r) { return std::to_string(r.*field); },
          [field](EvalReport& r, const std::string& v) { r.*field = std::stoll(v); }};
}

const std::vector<Column>& columns() {
  static const std::vector<Column> cols = {
      text_col("config_hash", &EvalReport::config_hash),
      text_col("dataset", &EvalReport::dataset),
      text_col("attacker", &EvalReport::attacker),
      text_col("defense", &EvalReport::defense),
      text_col("defense_stage", &EvalReport::defense_stage),
      text_col("defense_params", &EvalReport::defense_params),
      {"poison_rate", [](const EvalReport& r) { return format_double(r.poison_rate); },
       [](EvalReport& r, const std::string& v) { r.poison_rate = std::stod(v); }},
      text_col("consistency", &EvalReport::consistency),
      {"seed", [](const EvalReport& r) { return std::to_string(r.seed); },
       [](EvalReport& r, const std::string& v) { r.seed = std::stoull(v); }},
      {"target_label", [](const EvalReport& r) { return std::to_string(r.target_label); },
       [](EvalReport& r, const std::string& v) { r.target_label = std::stoi(v); }},
      text_col("status", &EvalReport::status),
      opt_col("asr", &EvalReport::asr),
      opt_col("cacc", &EvalReport::cacc),
      opt_col("clean_model_asr", &EvalReport::clean_model_asr),
      opt_col("clean_model_cacc", &EvalReport::clean_model_cacc),
      opt_col("asr_margin", &EvalReport::asr_margin),
      opt_col("delta_ppl", &EvalReport::delta_ppl),
      opt_col("ge_surrogate", &EvalReport::ge_surrogate),
      opt_col("similarity", &EvalReport::similarity),
      opt_col("far", &EvalReport::far),
      opt_col("frr", &EvalReport::frr),
      opt_col("asr_under_detection", &EvalReport::asr_under_detection),
      opt_col("cacc_under_detection", &EvalReport::cacc_under_detection),
      opt_col("oracle_asr", &EvalReport::oracle_asr),
      opt_col("oracle_cacc", &EvalReport::oracle_cacc),
      opt_col("no_defense_asr", &EvalReport::no_defense_asr),
      opt_col("no_defense_cacc", &EvalReport::no_defense_cacc),
      opt_col("filter_recall", &EvalReport::filter_recall),
      opt_col("filter_retention", &EvalReport::filter_retention),
      opt_int_col("kept", &EvalReport::kept),
      opt_int_col("dropped", &EvalReport::dropped),
      int_col("n_poisoned_train", &EvalReport::n_poisoned_train),
      int_col("n_poisoned_eval", &EvalReport::n_poisoned_eval),
      int_col("n_clean_eval", &EvalReport::n_clean_eval),
      text_col("error", &EvalReport::error),
  };
  return cols;
}

}  // namespace

const std::vector<std::string>& report_columns() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> n;
    for (const auto& c : columns()) n.push_back(c.name);
    return n;
  }();
  return names;
}

std::string csv_header() {
  std::string out;
  for (const auto& c : columns()) {
    if (!out.empty()) out += ',';
    out += c.name;
  }
  return out;
}

std::string to_csv_row(const EvalReport& r) {
  std::string out;
  bool first = true;
  for (const auto& c : columns()) {
    if (!first) out += ',';
    first = false;
    out += c.get(r);
  }
  return out;
}

EvalReport from_csv_row(const std::string& line) {
  const auto fields = split_csv_line(line);
  const auto& cols = columns();
  if (fields.size() != cols.size()) {
    throw ParseError("report row has " + std::to_string(fields.size()) + " fields, expected " +
                         std::to_string(cols.size()),
                     0);
  }
  EvalReport r;
  try {
    for (std::size_t i = 0; i < cols.size(); ++i) cols[i].set(r, fields[i]);
  } catch (const std::logic_error& e) {
    throw ParseError(std::string("bad numeric field in report row: ") + e.what(), 0);
  }
  return r;
}

void write_reports_csv(const std::filesystem::path& path, const std::vector<EvalReport>& rows) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp);
    out << csv_header() << '\n';
    for (const auto& r : rows) out << to_csv_row(r) << '\n';
  }
  std::filesystem::rename(tmp, path);
}

std::vector<EvalReport> read_reports_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != csv_header()) {
    throw ParseError(path.string() + ": missing or unexpected report header", 1);
  }
  std::vector<EvalReport> rows;
  long lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      rows.push_back(from_csv_row(line));
    } catch (const ParseError& e) {
      throw ParseError(e.what(), lineno);
    }
  }
  return rows;
}

}  // namespace backbench::metrics
