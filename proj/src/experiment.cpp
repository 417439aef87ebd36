#include "backbench/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "backbench/cluster.hpp"
#include "backbench/error.hpp"
#include "backbench/random.hpp"
#include "backbench/text.hpp"

namespace backbench::experiment {

using nlohmann::json;

const char* to_string(DefenseName name) {
  switch (name) {
    case DefenseName::none: return "none";
    case DefenseName::cube: return "cube";
    case DefenseName::bki: return "bki";
    case DefenseName::strip: return "strip";
    case DefenseName::onion: return "onion";
  }
  return "?";
}

DefenseName parse_defense_name(const std::string& name) {
  for (auto d : {DefenseName::none, DefenseName::cube, DefenseName::bki, DefenseName::strip,
                 DefenseName::onion}) {
    if (name == to_string(d)) return d;
  }
  throw ConfigError("unknown defense '" + name + "' (expected none, cube, bki, strip, onion)");
}

const char* to_string(DefenseStage stage) {
  return stage == DefenseStage::train ? "train" : "inference";
}

DefenseStage parse_defense_stage(const std::string& name) {
  if (name == "train") return DefenseStage::train;
  if (name == "inference") return DefenseStage::inference;
  throw ConfigError("unknown defense stage '" + name + "' (expected train or inference)");
}

json DefenseConfig::params_json() const {
  switch (name) {
    case DefenseName::none: return json::object();
    case DefenseName::cube:
      return {{"reduce_dim", cube.reduce_dim},
              {"min_cluster_size", cube.hdbscan.min_cluster_size},
              {"min_samples", cube.hdbscan.effective_min_samples()},
              {"dump_embeddings", dump_embeddings}};
    case DefenseName::bki:
      return {{"top_k", bki_top_k}, {"per_sample_top", bki_per_sample_top}};
    case DefenseName::strip:
      return {{"copies", strip_copies},
              {"replace_frac", strip_replace_frac},
              {"target_frr", target_frr}};
    case DefenseName::onion:
      return {{"lm_order", onion_lm_order},
              {"lm_add_k", onion_lm_add_k},
              {"target_frr", target_frr}};
  }
  return json::object();
}

// ---------------------------------------------------------------------------
// config parsing

namespace {

// Reads keys out of one JSON object and rejects anything left over.
class Section {
 public:
  Section(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  template <typename T>
  void get(const std::string& key, T& out) {
    if (!j_.contains(key)) return;
    used_.insert(key);
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }

  const json& sub(const std::string& key) {
    used_.insert(key);
    return j_.at(key);
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!used_.count(it.key())) throw ConfigError(where_ + ": unknown key '" + it.key() + "'");
    }
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> used_;
};

corpus::SyntheticSpec synthetic_from_json(const json& j) {
  auto spec = corpus::default_synthetic_spec();
  Section s(j, "dataset.synthetic");
  s.get("num_classes", spec.num_classes);
  s.get("train_size", spec.train_size);
  s.get("dev_size", spec.dev_size);
  s.get("test_size", spec.test_size);
  s.get("class_keywords", spec.class_keywords);
  s.get("filler_vocab_size", spec.filler_vocab_size);
  s.get("min_length", spec.min_length);
  s.get("max_length", spec.max_length);
  s.get("keyword_rate", spec.keyword_rate);
  s.get("seed", spec.seed);
  s.finish();
  return spec;
}

json synthetic_to_json(const corpus::SyntheticSpec& spec) {
  return {{"num_classes", spec.num_classes},
          {"train_size", spec.train_size},
          {"dev_size", spec.dev_size},
          {"test_size", spec.test_size},
          {"class_keywords", spec.class_keywords},
          {"filler_vocab_size", spec.filler_vocab_size},
          {"min_length", spec.min_length},
          {"max_length", spec.max_length},
          {"keyword_rate", spec.keyword_rate},
          {"seed", spec.seed}};
}

void defense_from_json(const json& j, DefenseConfig& d) {
  Section s(j, "defense");
  std::string name = "none", stage = "train";
  s.get("name", name);
  s.get("stage", stage);
  d.name = parse_defense_name(name);
  d.stage = parse_defense_stage(stage);
  if (!s.has("params")) {
    s.finish();
    return;
  }
  Section p(s.sub("params"), "defense.params");
  switch (d.name) {
    case DefenseName::none: break;
    case DefenseName::cube:
      p.get("reduce_dim", d.cube.reduce_dim);
      p.get("min_cluster_size", d.cube.hdbscan.min_cluster_size);
      p.get("min_samples", d.cube.hdbscan.min_samples);
      p.get("dump_embeddings", d.dump_embeddings);
      break;
    case DefenseName::bki:
      p.get("top_k", d.bki_top_k);
      p.get("per_sample_top", d.bki_per_sample_top);
      break;
    case DefenseName::strip:
      p.get("copies", d.strip_copies);
      p.get("replace_frac", d.strip_replace_frac);
      p.get("target_frr", d.target_frr);
      break;
    case DefenseName::onion:
      p.get("lm_order", d.onion_lm_order);
      p.get("lm_add_k", d.onion_lm_add_k);
      p.get("target_frr", d.target_frr);
      break;
  }
  p.finish();
  s.finish();
}

}  // namespace

ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c;
  Section top(j, "config");

  if (top.has("dataset")) {
    Section d(top.sub("dataset"), "dataset");
    if (d.has("synthetic")) {
      if (d.has("path")) throw ConfigError("dataset: give either 'synthetic' or 'path', not both");
      c.dataset.synthetic = synthetic_from_json(d.sub("synthetic"));
      c.dataset.num_classes = c.dataset.synthetic->num_classes;
    } else {
      std::string path, format = "tsv";
      d.get("path", path);
      if (path.empty()) throw ConfigError("dataset: 'synthetic' or 'path' is required");
      d.get("format", format);
      d.get("num_classes", c.dataset.num_classes);
      d.get("name", c.dataset.name);
      c.dataset.path = path;
      c.dataset.format = corpus::parse_format(format);
    }
    d.finish();
  } else {
    c.dataset.synthetic = corpus::default_synthetic_spec();
  }

  if (top.has("attack")) {
    Section a(top.sub("attack"), "attack");
    if (a.has("trigger")) {
      Section t(a.sub("trigger"), "attack.trigger");
      std::string kind = "badnet";
      t.get("kind", kind);
      c.trigger.kind = attack::parse_trigger_kind(kind);
      t.get("badnet_words", c.trigger.badnet_words);
      t.get("insertions_per_sample", c.trigger.insertions_per_sample);
      t.get("addsent_sentence", c.trigger.addsent_sentence);
      t.finish();
    }
    a.get("target_label", c.target_label);
    a.get("poison_rate", c.poison_rate);
    std::string consistency = attack::to_string(c.consistency);
    a.get("consistency", consistency);
    c.consistency = attack::parse_consistency(consistency);
    a.finish();
  }

  if (top.has("victim")) {
    Section v(top.sub("victim"), "victim");
    v.get("feature_dims", c.victim.feature_dims);
    v.get("hidden_dim", c.victim.hidden_dim);
    v.get("epochs", c.victim.epochs);
    v.get("batch_size", c.victim.batch_size);
    v.get("learning_rate", c.victim.learning_rate);
    v.get("l2", c.victim.l2);
    v.get("init_scale", c.victim.init_scale);
    v.finish();
  }

  if (top.has("defense")) defense_from_json(top.sub("defense"), c.defense);

  if (top.has("metrics")) {
    Section m(top.sub("metrics"), "metrics");
    m.get("clean_model", c.metrics.clean_model);
    m.get("oracle", c.metrics.oracle);
    m.get("stealthiness", c.metrics.stealthiness);
    m.get("similarity", c.metrics.similarity);
    m.get("lm_order", c.metrics.lm_order);
    m.get("lm_add_k", c.metrics.lm_add_k);
    m.finish();
  }

  if (top.has("sweep")) {
    Section s(top.sub("sweep"), "sweep");
    s.get("rates", c.sweep.rates);
    s.get("seeds", c.sweep.seeds);
    if (s.has("consistencies")) {
      std::vector<std::string> names;
      s.get("consistencies", names);
      c.sweep.consistencies.clear();
      for (const auto& n : names) c.sweep.consistencies.push_back(attack::parse_consistency(n));
    }
    s.finish();
  }

  std::string out = c.output_dir.string();
  top.get("output_dir", out);
  c.output_dir = out;
  top.finish();

  c.validate();
  return c;
}

json config_to_json(const ExperimentConfig& c) {
  json j;
  if (c.dataset.synthetic) {
    j["dataset"] = {{"synthetic", synthetic_to_json(*c.dataset.synthetic)}};
  } else {
    j["dataset"] = {{"path", c.dataset.path.generic_string()},
                    {"format", corpus::to_string(c.dataset.format)},
                    {"num_classes", c.dataset.num_classes},
                    {"name", c.dataset.name}};
  }
  j["attack"] = {{"trigger",
                  {{"kind", attack::to_string(c.trigger.kind)},
                   {"badnet_words", c.trigger.badnet_words},
                   {"insertions_per_sample", c.trigger.insertions_per_sample},
                   {"addsent_sentence", c.trigger.addsent_sentence}}},
                 {"target_label", c.target_label},
                 {"poison_rate", c.poison_rate},
                 {"consistency", attack::to_string(c.consistency)}};
  j["victim"] = {{"feature_dims", c.victim.feature_dims},
                 {"hidden_dim", c.victim.hidden_dim},
                 {"epochs", c.victim.epochs},
                 {"batch_size", c.victim.batch_size},
                 {"learning_rate", c.victim.learning_rate},
                 {"l2", c.victim.l2},
                 {"init_scale", c.victim.init_scale}};
  j["defense"] = {{"name", to_string(c.defense.name)},
                  {"stage", to_string(c.defense.stage)},
                  {"params", c.defense.params_json()}};
  j["metrics"] = {{"clean_model", c.metrics.clean_model},
                  {"oracle", c.metrics.oracle},
                  {"stealthiness", c.metrics.stealthiness},
                  {"similarity", c.metrics.similarity},
                  {"lm_order", c.metrics.lm_order},
                  {"lm_add_k", c.metrics.lm_add_k}};
  std::vector<std::string> cons;
  for (auto x : c.sweep.consistencies) cons.push_back(attack::to_string(x));
  j["sweep"] = {{"rates", c.sweep.rates}, {"consistencies", cons}, {"seeds", c.sweep.seeds}};
  j["output_dir"] = c.output_dir.generic_string();
  return j;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

void ExperimentConfig::validate() const {
  if (dataset.synthetic) dataset.synthetic->validate();
  if (dataset.num_classes < 2) throw ConfigError("dataset.num_classes must be >= 2");
  trigger.validate();
  if (target_label < 0 || target_label >= dataset.num_classes) {
    throw ConfigError("attack.target_label must be in [0, num_classes)");
  }
  if (!(poison_rate >= 0.0 && poison_rate <= 1.0)) {
    throw ConfigError("attack.poison_rate must be in [0, 1]");
  }
  victim.validate();
  if (sweep.rates.empty()) throw ConfigError("sweep.rates is empty");
  for (double r : sweep.rates) {
    if (!(r >= 0.0 && r <= 1.0)) throw ConfigError("sweep.rates must lie in [0, 1]");
  }
  if (sweep.consistencies.empty()) throw ConfigError("sweep.consistencies is empty");
  if (sweep.seeds.empty()) throw ConfigError("sweep.seeds is empty");

  const auto& d = defense;
  if (d.stage == DefenseStage::inference && d.name != DefenseName::strip &&
      d.name != DefenseName::onion && d.name != DefenseName::none) {
    throw ConfigError(std::string("defense '") + to_string(d.name) +
                      "' only runs at the train stage");
  }
  if (d.name == DefenseName::cube) {
    d.cube.hdbscan.validate();
    if (d.cube.reduce_dim < 1) throw ConfigError("cube.reduce_dim must be >= 1");
    if (victim.hidden_dim < d.cube.reduce_dim) {
      throw ConfigError("victim.hidden_dim must be >= cube.reduce_dim");
    }
  }
  if (d.name == DefenseName::bki && (d.bki_top_k < 1 || d.bki_per_sample_top < 1)) {
    throw ConfigError("bki.top_k and bki.per_sample_top must be >= 1");
  }
  if (d.name == DefenseName::strip) {
    if (d.strip_copies < 8) throw ConfigError("strip.copies must be >= 8");
    if (!(d.strip_replace_frac > 0.0 && d.strip_replace_frac <= 1.0)) {
      throw ConfigError("strip.replace_frac must be in (0, 1]");
    }
  }
  if (d.name == DefenseName::onion) {
    if (d.onion_lm_order != 2 && d.onion_lm_order != 3) {
      throw ConfigError("onion.lm_order must be 2 or 3");
    }
    if (!(d.onion_lm_add_k > 0.0)) throw ConfigError("onion.lm_add_k must be > 0");
  }
  if ((d.name == DefenseName::strip || d.name == DefenseName::onion) &&
      !(d.target_frr > 0.0 && d.target_frr <= 0.5)) {
    throw ConfigError("defense target_frr must be in (0, 0.5]");
  }
  if (metrics.lm_order != 2 && metrics.lm_order != 3) {
    throw ConfigError("metrics.lm_order must be 2 or 3");
  }
  if (!(metrics.lm_add_k > 0.0)) throw ConfigError("metrics.lm_add_k must be > 0");
}

std::string config_hash(const ExperimentConfig& config) {
  json j = config_to_json(config);
  j.erase("output_dir");
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(text::fnv1a(j.dump())));
  return buf;
}

corpus::Dataset load_source(const DatasetSource& source) {
  if (source.synthetic) return corpus::generate_synthetic(*source.synthetic);
  auto name = source.name.empty() ? source.path.stem().string() : source.name;
  return corpus::load_dataset(source.path, source.format, source.num_classes, name);
}

// ---------------------------------------------------------------------------
// cells

std::vector<Cell> expand_cells(const SweepAxes& sweep) {
  std::vector<Cell> cells;
  for (double r : sweep.rates) {
    for (auto c : sweep.consistencies) {
      for (auto s : sweep.seeds) cells.push_back({r, c, s});
    }
  }
  return cells;
}

Cell parse_cell(const std::string& text) {
  std::vector<std::string> parts;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) parts.push_back(part);
  if (parts.size() != 3) throw ConfigError("--cell expects rate,consistency,seed; got '" + text + "'");
  Cell c;
  try {
    std::size_t used = 0;
    c.rate = std::stod(parts[0], &used);
    if (used != parts[0].size()) throw std::invalid_argument(parts[0]);
    c.seed = std::stoull(parts[2], &used);
    if (used != parts[2].size()) throw std::invalid_argument(parts[2]);
  } catch (const std::logic_error&) {
    throw ConfigError("--cell: cannot parse '" + text + "'");
  }
  if (!(c.rate >= 0.0 && c.rate <= 1.0)) throw ConfigError("--cell: rate must be in [0, 1]");
  c.consistency = attack::parse_consistency(parts[1]);
  return c;
}

std::uint64_t poison_seed(std::uint64_t cell_seed) { return derive_seed(cell_seed, "poison"); }
std::uint64_t victim_seed(std::uint64_t cell_seed) { return derive_seed(cell_seed, "victim"); }

bool RunRecord::all_ok() const {
  return std::all_of(reports.begin(), reports.end(),
                     [](const metrics::EvalReport& r) { return r.status == "ok"; });
}

// ---------------------------------------------------------------------------
// cell evaluation

namespace {

std::string cell_name(const Cell& cell) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "rate%g_%s_seed%llu", cell.rate,
                attack::to_string(cell.consistency), static_cast<unsigned long long>(cell.seed));
  return buf;
}

std::vector<text::Tokens> tokenize_all(const corpus::Samples& samples) {
  std::vector<text::Tokens> docs;
  docs.reserve(samples.size());
  for (const auto& s : samples) docs.push_back(text::tokenize(s.text));
  return docs;
}

std::optional<double> maybe_asr(const victim::VictimModel& m, const corpus::Samples& poisoned,
                                int target) {
  if (poisoned.empty()) return std::nullopt;
  return metrics::asr(m, poisoned, target);
}

// Models and LMs that do not depend on the poisoning, shared across cells.
struct Cache {
  std::map<std::uint64_t, victim::VictimModel> clean_models;
  std::map<std::pair<int, double>, text::NGramLM> lms;
};

const text::NGramLM& clean_lm(Cache& cache, const corpus::Dataset& source, int order,
                              double add_k) {
  const auto key = std::make_pair(order, add_k);
  auto it = cache.lms.find(key);
  if (it == cache.lms.end()) {
    it = cache.lms
             .emplace(key, text::NGramLM::fit(tokenize_all(source.at(corpus::Split::train)),
                                               order, add_k))
             .first;
  }
  return it->second;
}

const victim::VictimModel& clean_model(Cache& cache, const corpus::Dataset& source,
                                       const victim::VictimConfig& vc) {
  auto it = cache.clean_models.find(vc.seed);
  if (it == cache.clean_models.end()) {
    it = cache.clean_models
             .emplace(vc.seed, victim::train(source.at(corpus::Split::train),
                                             static_cast<std::size_t>(source.num_classes), vc))
             .first;
  }
  return it->second;
}

void fill_filter_stats(metrics::EvalReport& r, const defense::FilterResult& f,
                       const attack::PoisonedDataset& pd) {
  r.kept = static_cast<std::int64_t>(f.kept.size());
  r.dropped = static_cast<std::int64_t>(f.dropped.size());
  std::size_t caught = 0, retained = 0;
  for (auto id : f.dropped) caught += pd.is_poisoned(id);
  for (auto id : f.kept) retained += !pd.is_poisoned(id);
  const std::size_t n_poison = pd.mask.size();
  const std::size_t n_clean = pd.samples().size() - n_poison;
  if (n_poison > 0) r.filter_recall = static_cast<double>(caught) / static_cast<double>(n_poison);
  if (n_clean > 0) {
    r.filter_retention = static_cast<double>(retained) / static_cast<double>(n_clean);
  }
}

std::vector<double> strip_scores(const corpus::Samples& samples, const victim::VictimModel& m,
                                 const text::Vocabulary& vocab, const defense::StripConfig& sc) {
  std::vector<double> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    if (text::tokenize(s.text).empty()) continue;
    out.push_back(defense::strip_entropy(s.text, s.id, m, vocab, sc));
  }
  return out;
}

std::vector<defense::DetectionVerdict> strip_verdicts(const corpus::Samples& samples,
                                                      const victim::VictimModel& m,
                                                      const text::Vocabulary& vocab,
                                                      const defense::StripConfig& sc,
                                                      double threshold) {
  std::vector<defense::DetectionVerdict> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(defense::strip_detect(s, m, vocab, sc, threshold));
  return out;
}

std::vector<defense::DetectionVerdict> onion_verdicts(const corpus::Samples& samples,
                                                      const text::NGramLM& lm, double threshold) {
  std::vector<defense::DetectionVerdict> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    defense::DetectionVerdict v;
    v.id = s.id;
    v.threshold = threshold;
    v.score = defense::onion_max_suspicion(text::tokenize(s.text), lm);
    v.flagged = defense::is_flagged(v.score, threshold, defense::FlagDirection::above);
    out.push_back(v);
  }
  return out;
}

double onion_threshold(const corpus::Samples& clean_dev, const text::NGramLM& lm, double frr) {
  std::vector<double> scores;
  for (const auto& s : clean_dev) {
    const auto t = text::tokenize(s.text);
    if (!t.empty()) scores.push_back(defense::onion_max_suspicion(t, lm));
  }
  return defense::calibrate_threshold(scores, frr, defense::FlagDirection::above);
}

corpus::Samples onion_rewrite(const corpus::Samples& samples, const text::NGramLM& lm,
                              double threshold) {
  corpus::Samples out = samples;
  for (auto& s : out) {
    const auto corrected = defense::onion_correct(text::tokenize(s.text), lm, threshold);
    s.text = text::detokenize(corrected);
  }
  return out;
}

std::vector<bool> flags_of(const std::vector<defense::DetectionVerdict>& v) {
  std::vector<bool> out;
  out.reserve(v.size());
  for (const auto& x : v) out.push_back(x.flagged);
  return out;
}

std::map<std::int64_t, bool> truth_all(const corpus::Samples& samples, bool value) {
  std::map<std::int64_t, bool> out;
  for (const auto& s : samples) out[s.id] = value;
  return out;
}

void detection_metrics(metrics::EvalReport& r, const victim::VictimModel& model,
                       const corpus::Samples& poisoned_test, const corpus::Samples& clean_test,
                       const std::vector<defense::DetectionVerdict>& vp,
                       const std::vector<defense::DetectionVerdict>& vc) {
  r.far = metrics::far_frr(vp, truth_all(poisoned_test, true)).far;
  r.frr = metrics::far_frr(vc, truth_all(clean_test, false)).frr;
  if (!poisoned_test.empty()) {
    const auto preds = metrics::predict_all(model, poisoned_test);
    r.asr_under_detection = metrics::asr_under_detection(preds, flags_of(vp), r.target_label);
  }
  const auto preds = metrics::predict_all(model, clean_test);
  std::vector<int> labels;
  for (const auto& s : clean_test) labels.push_back(s.label);
  r.cacc_under_detection = metrics::cacc_under_detection(preds, labels, flags_of(vc));
}

metrics::EvalReport evaluate_cell(const ExperimentConfig& config, const corpus::Dataset& source,
                                  const Cell& cell, std::vector<std::string>& warnings,
                                  const std::filesystem::path& out_dir, Cache& cache) {
  const auto& dcfg = config.defense;
  metrics::EvalReport r;
  r.config_hash = config_hash(config);
  r.dataset = source.name;
  r.attacker = config.trigger.name();
  r.defense = to_string(dcfg.name);
  r.defense_stage = dcfg.name == DefenseName::none ? "" : to_string(dcfg.stage);
  r.defense_params = dcfg.params_json().dump();
  r.poison_rate = cell.rate;
  r.consistency = attack::to_string(cell.consistency);
  r.seed = cell.seed;
  r.target_label = config.target_label;

  attack::PoisonSpec ps;
  ps.trigger = config.trigger;
  ps.poison_rate = cell.rate;
  ps.consistency = cell.consistency;
  ps.target_label = config.target_label;
  ps.seed = poison_seed(cell.seed);

  const auto pd = attack::poison(source, ps);
  const auto pt = attack::poison_test_set(source, ps);
  warnings.insert(warnings.end(), pd.warnings.begin(), pd.warnings.end());
  warnings.insert(warnings.end(), pt.warnings.begin(), pt.warnings.end());

  const auto num_classes = static_cast<std::size_t>(source.num_classes);
  const auto& train = pd.samples();
  const auto& clean_test = source.at(corpus::Split::test);
  const auto& poisoned_test = pt.samples();
  r.n_poisoned_train = static_cast<std::int64_t>(pd.mask.size());
  r.n_poisoned_eval = static_cast<std::int64_t>(poisoned_test.size());
  r.n_clean_eval = static_cast<std::int64_t>(clean_test.size());

  auto vc = config.victim;
  vc.seed = victim_seed(cell.seed);
  const auto poisoned_model = victim::train(train, num_classes, vc);
  const auto raw_asr = maybe_asr(poisoned_model, poisoned_test, config.target_label);
  const double raw_cacc = metrics::cacc(poisoned_model, clean_test);

  auto retrain = [&](const corpus::Samples& filtered) {
    if (filtered.empty()) throw StateError("defense removed every training sample");
    return victim::train(filtered, num_classes, vc);
  };

  if (dcfg.name == DefenseName::none) {
    r.asr = raw_asr;
    r.cacc = raw_cacc;
  } else {
    r.no_defense_asr = raw_asr;
    r.no_defense_cacc = raw_cacc;
  }

  const bool needs_dev = dcfg.name == DefenseName::strip || dcfg.name == DefenseName::onion;
  if (needs_dev && !source.has(corpus::Split::dev)) {
    throw ConfigError(std::string(to_string(dcfg.name)) +
                      " calibrates its threshold on a clean dev split, which is missing");
  }

  defense::StripConfig sc;
  sc.copies = dcfg.strip_copies;
  sc.replace_frac = dcfg.strip_replace_frac;
  sc.seed = derive_seed(cell.seed, "strip");

  std::optional<victim::VictimModel> defended;
  switch (dcfg.name) {
    case DefenseName::none: break;
    case DefenseName::cube: {
      const auto cr = defense::cube_filter(train, num_classes, vc, dcfg.cube);
      warnings.insert(warnings.end(), cr.filter.warnings.begin(), cr.filter.warnings.end());
      fill_filter_stats(r, cr.filter, pd);
      if (dcfg.dump_embeddings) {
        std::vector<std::int64_t> ids;
        for (const auto& s : train) ids.push_back(s.id);
        std::filesystem::create_directories(out_dir / "embeddings");
        cluster::write_embeddings_csv(out_dir / "embeddings" / (cell_name(cell) + ".csv"), ids,
                                      cr.embeddings, cr.clusters.labels);
      }
      defended = retrain(cr.filter.apply(train));
      break;
    }
    case DefenseName::bki: {
      const auto br = defense::bki_filter(train, poisoned_model, dcfg.bki_top_k,
                                          dcfg.bki_per_sample_top);
      fill_filter_stats(r, br.filter, pd);
      defended = retrain(br.filter.apply(train));
      break;
    }
    case DefenseName::strip: {
      const auto vocab = text::Vocabulary::build(tokenize_all(train));
      const double thr = defense::calibrate_threshold(
          strip_scores(source.at(corpus::Split::dev), poisoned_model, vocab, sc), dcfg.target_frr,
          defense::FlagDirection::below);
      if (dcfg.stage == DefenseStage::train) {
        defense::FilterResult f;
        for (const auto& v : strip_verdicts(train, poisoned_model, vocab, sc, thr)) {
          (v.flagged ? f.dropped : f.kept).push_back(v.id);
        }
        fill_filter_stats(r, f, pd);
        defended = retrain(f.apply(train));
      } else {
        r.asr = raw_asr;
        r.cacc = raw_cacc;
        detection_metrics(r, poisoned_model, poisoned_test, clean_test,
                          strip_verdicts(poisoned_test, poisoned_model, vocab, sc, thr),
                          strip_verdicts(clean_test, poisoned_model, vocab, sc, thr));
      }
      break;
    }
    case DefenseName::onion: {
      const auto& lm = clean_lm(cache, source, dcfg.onion_lm_order, dcfg.onion_lm_add_k);
      const double thr = onion_threshold(source.at(corpus::Split::dev), lm, dcfg.target_frr);
      if (dcfg.stage == DefenseStage::train) {
        defended = retrain(onion_rewrite(train, lm, thr));
      } else {
        const auto fixed_poison = onion_rewrite(poisoned_test, lm, thr);
        const auto fixed_clean = onion_rewrite(clean_test, lm, thr);
        r.asr = maybe_asr(poisoned_model, fixed_poison, config.target_label);
        r.cacc = metrics::cacc(poisoned_model, fixed_clean);
        detection_metrics(r, poisoned_model, poisoned_test, clean_test,
                          onion_verdicts(poisoned_test, lm, thr),
                          onion_verdicts(clean_test, lm, thr));
      }
      break;
    }
  }
  if (defended) {
    r.asr = maybe_asr(*defended, poisoned_test, config.target_label);
    r.cacc = metrics::cacc(*defended, clean_test);
  }

  if (config.metrics.clean_model) {
    const auto& cm = clean_model(cache, source, vc);
    r.clean_model_asr = maybe_asr(cm, poisoned_test, config.target_label);
    r.clean_model_cacc = metrics::cacc(cm, clean_test);
    if (r.asr && r.clean_model_asr) r.asr_margin = *r.asr - *r.clean_model_asr;
  }

  if (config.metrics.oracle) {
    if (pd.mask.empty()) {
      r.oracle_asr = raw_asr;
      r.oracle_cacc = raw_cacc;
    } else {
      corpus::Samples kept;
      for (const auto& s : train) {
        if (!pd.is_poisoned(s.id)) kept.push_back(s);
      }
      const auto om = retrain(kept);
      r.oracle_asr = maybe_asr(om, poisoned_test, config.target_label);
      r.oracle_cacc = metrics::cacc(om, clean_test);
    }
  }

  if (!pd.mask.empty() && (config.metrics.stealthiness || config.metrics.similarity)) {
    std::vector<std::string> before, after;
    for (const auto& s : train) {
      if (!s.poisoned) continue;
      before.push_back(pd.clean_text.at(s.id));
      after.push_back(s.text);
    }
    const auto& clean_train = source.at(corpus::Split::train);
    if (config.metrics.stealthiness) {
      const auto& lm = clean_lm(cache, source, config.metrics.lm_order, config.metrics.lm_add_k);
      r.delta_ppl = metrics::delta_ppl(before, after, lm);
      r.ge_surrogate = metrics::delta_ge(before, after, metrics::build_lexicon(clean_train));
    }
    if (config.metrics.similarity) {
      r.similarity =
          metrics::mean_similarity(metrics::SimilarityScorer::fit(clean_train), before, after);
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// output

void write_atomic(const std::filesystem::path& path, const std::string& content) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp);
    out << content;
    if (!out) throw Error("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

json report_to_json(const metrics::EvalReport& r) {
  static const std::set<std::string> strings = {
      "config_hash", "dataset", "attacker", "defense", "defense_stage",
      "defense_params", "consistency", "status", "error"};
  static const std::set<std::string> integers = {
      "seed", "target_label", "kept", "dropped", "n_poisoned_train", "n_poisoned_eval",
      "n_clean_eval"};
  const auto& names = metrics::report_columns();
  const auto cells = metrics::split_csv_line(metrics::to_csv_row(r));
  json j = json::object();
  for (std::size_t i = 0; i < names.size(); ++i) {
    const auto& name = names[i];
    const auto& v = cells[i];
    if (strings.count(name)) {
      j[name] = v;
    } else if (v.empty()) {
      j[name] = nullptr;
    } else if (name == "seed") {
      j[name] = std::stoull(v);
    } else if (integers.count(name)) {
      j[name] = std::stoll(v);
    } else {
      const double d = std::stod(v);
      if (std::isfinite(d)) {
        j[name] = d;
      } else {
        j[name] = v;
      }
    }
  }
  return j;
}

std::filesystem::path resolve_out(const ExperimentConfig& config, const RunOptions& options) {
  const auto dir = options.out ? *options.out : config.output_dir;
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) {
    throw ConfigError("output directory " + dir.string() + " is not writable");
  }
  return dir;
}

}  // namespace

metrics::EvalReport run_cell(const ExperimentConfig& config, const corpus::Dataset& source,
                             const Cell& cell, std::vector<std::string>& warnings,
                             const std::filesystem::path& out_dir) {
  Cache cache;
  return evaluate_cell(config, source, cell, warnings, out_dir, cache);
}

RunRecord cmd_run(const ExperimentConfig& base, const RunOptions& options) {
  const auto start = std::chrono::steady_clock::now();
  ExperimentConfig config = base;
  if (options.seed_override) config.sweep.seeds = {*options.seed_override};
  config.validate();
  const auto out_dir = resolve_out(config, options);

  RunRecord record;
  record.config_hash = config_hash(config);
  const auto source = load_source(config.dataset);
  source.validate();

  const auto cells = options.cell ? std::vector<Cell>{*options.cell} : expand_cells(config.sweep);
  Cache cache;
  for (const auto& cell : cells) {
    std::vector<std::string> warnings;
    metrics::EvalReport r;
    try {
      r = evaluate_cell(config, source, cell, warnings, out_dir, cache);
    } catch (const std::exception& e) {
      r = metrics::EvalReport{};
      r.config_hash = record.config_hash;
      r.dataset = source.name;
      r.attacker = config.trigger.name();
      r.defense = to_string(config.defense.name);
      r.defense_stage =
          config.defense.name == DefenseName::none ? "" : to_string(config.defense.stage);
      r.defense_params = config.defense.params_json().dump();
      r.poison_rate = cell.rate;
      r.consistency = attack::to_string(cell.consistency);
      r.seed = cell.seed;
      r.target_label = config.target_label;
      r.status = "error";
      r.error = e.what();
    }
    record.reports.push_back(std::move(r));
    record.warnings.push_back(std::move(warnings));
  }

  metrics::write_reports_csv(out_dir / "results.csv", record.reports);
  json rows = json::array();
  for (const auto& r : record.reports) rows.push_back(report_to_json(r));
  write_atomic(out_dir / "results.json", rows.dump(2) + "\n");

  record.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  json run;
  run["config"] = config_to_json(config);
  run["config"]["output_dir"] = out_dir.generic_string();
  run["config_hash"] = record.config_hash;
  json cell_log = json::array();
  for (std::size_t i = 0; i < record.reports.size(); ++i) {
    const auto& r = record.reports[i];
    cell_log.push_back({{"poison_rate", r.poison_rate},
                        {"consistency", r.consistency},
                        {"seed", r.seed},
                        {"status", r.status},
                        {"error", r.error},
                        {"warnings", record.warnings[i]}});
  }
  run["cells"] = cell_log;
  run["wall_seconds"] = record.wall_seconds;
  write_atomic(out_dir / "run.json", run.dump(2) + "\n");
  return record;
}

AttackSummary cmd_attack(const ExperimentConfig& base, const RunOptions& options) {
  ExperimentConfig config = base;
  if (options.seed_override) config.sweep.seeds = {*options.seed_override};
  config.validate();
  const auto out_dir = resolve_out(config, options);

  Cell cell{config.poison_rate, config.consistency, config.sweep.seeds.front()};
  if (options.cell) cell = *options.cell;

  const auto source = load_source(config.dataset);
  source.validate();
  attack::PoisonSpec ps;
  ps.trigger = config.trigger;
  ps.poison_rate = cell.rate;
  ps.consistency = cell.consistency;
  ps.target_label = config.target_label;
  ps.seed = poison_seed(cell.seed);

  const auto pd = attack::poison(source, ps);
  corpus::write_dataset(out_dir, pd.dataset, config.dataset.format);
  attack::write_manifest(out_dir / "manifest.json", pd);

  AttackSummary s;
  s.dir = out_dir;
  s.train_size = pd.samples().size();
  s.num_poisoned = pd.mask.size();
  s.warnings = pd.warnings;
  return s;
}

// ---------------------------------------------------------------------------
// report

namespace {

struct Stats {
  std::optional<double> mean, sd;
};

// Sorted before summation so the result does not depend on row order.
Stats mean_sd(std::vector<double> v) {
  Stats s;
  if (v.empty()) return s;
  std::sort(v.begin(), v.end());
  double sum = 0.0;
  for (double x : v) sum += x;
  const double mean = sum / static_cast<double>(v.size());
  double ss = 0.0;
  std::vector<double> dev;
  for (double x : v) dev.push_back((x - mean) * (x - mean));
  std::sort(dev.begin(), dev.end());
  for (double d : dev) ss += d;
  s.mean = mean;
  s.sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
  return s;
}

std::string opt_str(const std::optional<double>& v) {
  return v ? metrics::format_double(*v) : std::string();
}

}  // namespace

std::vector<SeriesRow> aggregate(const std::vector<metrics::EvalReport>& reports) {
  using Key = std::tuple<std::string, std::string, std::string, std::string, double>;
  std::map<Key, std::vector<const metrics::EvalReport*>> groups;
  for (const auto& r : reports) {
    if (r.status != "ok") continue;
    groups[{r.attacker, r.defense, r.defense_stage, r.consistency, r.poison_rate}].push_back(&r);
  }
  std::vector<SeriesRow> out;
  for (const auto& [key, rows] : groups) {
    SeriesRow s;
    std::tie(s.attacker, s.defense, s.defense_stage, s.consistency, s.poison_rate) = key;
    s.n = rows.size();
    std::vector<double> asr, cacc;
    for (const auto* r : rows) {
      if (r->asr) asr.push_back(*r->asr);
      if (r->cacc) cacc.push_back(*r->cacc);
    }
    const auto a = mean_sd(asr);
    const auto c = mean_sd(cacc);
    s.asr_mean = a.mean;
    s.asr_sd = a.sd;
    s.cacc_mean = c.mean;
    s.cacc_sd = c.sd;
    out.push_back(s);
  }
  return out;
}

std::vector<SeriesRow> cmd_report(const std::filesystem::path& run_dir,
                                  const std::optional<std::filesystem::path>& out) {
  const auto results = run_dir / "results.csv";
  if (!std::filesystem::exists(results)) {
    throw ConfigError("no results.csv in " + run_dir.string());
  }
  const auto reports = metrics::read_reports_csv(results);
  if (reports.empty()) throw ConfigError(results.string() + " has no rows");
  const auto rows = aggregate(reports);

  const auto dir = out ? *out : run_dir / "report";
  std::filesystem::create_directories(dir);
  const std::string header =
      "attacker,defense,defense_stage,consistency,poison_rate,n,asr_mean,asr_sd,cacc_mean,"
      "cacc_sd\n";
  std::string summary = header;
  std::map<std::string, std::string> series;
  for (const auto& s : rows) {
    const std::string tail = metrics::format_double(s.poison_rate) + "," + std::to_string(s.n) +
                             "," + opt_str(s.asr_mean) + "," + opt_str(s.asr_sd) + "," +
                             opt_str(s.cacc_mean) + "," + opt_str(s.cacc_sd) + "\n";
    summary += metrics::csv_escape(s.attacker) + "," + metrics::csv_escape(s.defense) + "," +
               metrics::csv_escape(s.defense_stage) + "," + metrics::csv_escape(s.consistency) +
               "," + tail;
    std::string name = "series_" + s.attacker + "_" + s.defense;
    if (!s.defense_stage.empty()) name += "_" + s.defense_stage;
    name += "_" + s.consistency + ".csv";
    auto& body = series[name];
    if (body.empty()) body = "poison_rate,n,asr_mean,asr_sd,cacc_mean,cacc_sd\n";
    body += tail;
  }
  write_atomic(dir / "summary.csv", summary);
  for (const auto& [name, body] : series) write_atomic(dir / name, body);

  const auto emb = run_dir / "embeddings";
  if (std::filesystem::is_directory(emb)) {
    std::filesystem::create_directories(dir / "embeddings");
    for (const auto& entry : std::filesystem::directory_iterator(emb)) {
      if (entry.path().extension() == ".csv") {
        std::filesystem::copy_file(entry.path(), dir / "embeddings" / entry.path().filename(),
                                   std::filesystem::copy_options::overwrite_existing);
      }
    }
  }
  return rows;
}

}  // namespace backbench::experiment
