#include "backbench/attack.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "backbench/error.hpp"

namespace backbench::attack {

using corpus::Samples;
using corpus::Split;
using nlohmann::json;

const char* to_string(TriggerKind kind) {
  return kind == TriggerKind::badnet ? "badnet" : "addsent";
}

TriggerKind parse_trigger_kind(const std::string& name) {
  if (name == "badnet") return TriggerKind::badnet;
  if (name == "addsent") return TriggerKind::addsent;
  throw ConfigError("unknown trigger kind '" + name + "' (expected badnet or addsent)");
}

const char* to_string(Consistency c) {
  switch (c) {
    case Consistency::clean: return "clean";
    case Consistency::mix: return "mix";
    case Consistency::dirty: return "dirty";
  }
  return "?";
}

Consistency parse_consistency(const std::string& name) {
  if (name == "clean") return Consistency::clean;
  if (name == "mix") return Consistency::mix;
  if (name == "dirty") return Consistency::dirty;
  throw ConfigError("unknown label consistency '" + name + "' (expected clean, mix or dirty)");
}

void TriggerSpec::validate() const {
  if (kind == TriggerKind::badnet) {
    if (badnet_words.empty()) throw ConfigError("badnet trigger needs at least one word");
    if (insertions_per_sample < 1) throw ConfigError("insertions_per_sample must be >= 1");
  } else if (addsent_sentence.empty()) {
    throw ConfigError("addsent trigger needs a nonempty sentence");
  }
}

TriggerSpec badnet_trigger() { return TriggerSpec{}; }

TriggerSpec addsent_trigger() {
  TriggerSpec t;
  t.kind = TriggerKind::addsent;
  return t;
}

void PoisonSpec::validate(int num_classes) const {
  trigger.validate();
  if (!(poison_rate >= 0.0 && poison_rate <= 1.0)) {
    throw ConfigError("poison_rate must be in [0, 1]");
  }
  if (target_label < 0 || target_label >= num_classes) {
    throw ConfigError("target_label " + std::to_string(target_label) + " out of range for " +
                      std::to_string(num_classes) + " classes");
  }
}

text::Tokens insert_word_at(text::Tokens tokens, const std::string& word, std::size_t position) {
  position = std::min(position, tokens.size());
  tokens.insert(tokens.begin() + static_cast<std::ptrdiff_t>(position), word);
  return tokens;
}

text::Tokens insert_badnet(text::Tokens tokens, const std::vector<std::string>& words,
                           std::size_t k, Rng& rng) {
  for (std::size_t i = 0; i < k; ++i) {
    const auto& word = words[rng.below(words.size())];
    const std::size_t pos = rng.below(tokens.size() + 1);
    tokens = insert_word_at(std::move(tokens), word, pos);
  }
  return tokens;
}

text::Tokens insert_sentence_at(text::Tokens tokens, const text::Tokens& sentence,
                                std::size_t position) {
  position = std::min(position, tokens.size());
  tokens.insert(tokens.begin() + static_cast<std::ptrdiff_t>(position), sentence.begin(),
                sentence.end());
  return tokens;
}

text::Tokens insert_addsent(text::Tokens tokens, const text::Tokens& sentence, Rng& rng) {
  const std::size_t pos = rng.below(tokens.size() + 1);
  return insert_sentence_at(std::move(tokens), sentence, pos);
}

std::string apply_trigger(const std::string& text, const TriggerSpec& trigger, Rng& rng) {
  auto tokens = text::split_whitespace(text);
  if (trigger.kind == TriggerKind::badnet) {
    tokens = insert_badnet(std::move(tokens), trigger.badnet_words,
                           trigger.insertions_per_sample, rng);
  } else {
    tokens = insert_addsent(std::move(tokens), trigger.addsent_sentence, rng);
  }
  return text::detokenize(tokens);
}

std::size_t poison_count(double rate, std::size_t n) {
  return static_cast<std::size_t>(std::floor(rate * static_cast<double>(n) + 0.5));
}

Selection select_poison_indices(const Samples& split, const PoisonSpec& spec) {
  Selection sel;
  sel.requested = poison_count(spec.poison_rate, split.size());
  if (sel.requested == 0) return sel;

  std::vector<std::int64_t> pool;
  for (const auto& s : split) {
    const bool is_target = s.original_label == spec.target_label;
    if (spec.consistency == Consistency::mix ||
        (spec.consistency == Consistency::clean && is_target) ||
        (spec.consistency == Consistency::dirty && !is_target)) {
      pool.push_back(s.id);
    }
  }
  if (pool.size() < sel.requested) {
    sel.warning = "poison pool exhausted: requested " + std::to_string(sel.requested) + " " +
                  to_string(spec.consistency) + "-label samples but only " +
                  std::to_string(pool.size()) + " are eligible";
    sel.ids = pool;
  } else {
    // Partial Fisher-Yates: the first `requested` slots are a uniform sample.
    Rng rng(derive_seed(spec.seed, "select"));
    for (std::size_t i = 0; i < sel.requested; ++i) {
      std::swap(pool[i], pool[i + rng.below(pool.size() - i)]);
    }
    sel.ids.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(sel.requested));
  }
  std::sort(sel.ids.begin(), sel.ids.end());
  return sel;
}

bool PoisonedDataset::is_poisoned(std::int64_t id) const {
  return std::binary_search(mask.begin(), mask.end(), id);
}

PoisonedDataset poison(const corpus::Dataset& dataset, const PoisonSpec& spec) {
  spec.validate(dataset.num_classes);
  const Samples& train = dataset.at(Split::train);
  if (train.empty()) throw ConfigError("cannot poison an empty train split");

  PoisonedDataset out;
  out.dataset = dataset;
  out.spec = spec;
  out.split = Split::train;
  Selection sel = select_poison_indices(train, spec);
  if (sel.warning) out.warnings.push_back(*sel.warning);
  out.mask = sel.ids;

  Rng rng(derive_seed(spec.seed, "insert"));
  for (auto& s : out.dataset.at(Split::train)) {
    if (!out.is_poisoned(s.id)) continue;
    out.clean_text.emplace(s.id, s.text);
    s.text = apply_trigger(s.text, spec.trigger, rng);
    s.label = spec.target_label;
    s.poisoned = true;
  }
  return out;
}

PoisonedDataset poison_test_set(const corpus::Dataset& dataset, const PoisonSpec& spec) {
  spec.validate(dataset.num_classes);
  PoisonedDataset out;
  out.dataset.name = dataset.name;
  out.dataset.num_classes = dataset.num_classes;
  out.spec = spec;
  out.split = Split::test;

  Rng rng(derive_seed(spec.seed, "test-insert"));
  Samples poisoned;
  for (const auto& s : dataset.at(Split::test)) {
    if (s.original_label == spec.target_label) continue;
    corpus::TextSample p = s;
    out.clean_text.emplace(s.id, s.text);
    p.text = apply_trigger(s.text, spec.trigger, rng);
    p.label = spec.target_label;
    p.poisoned = true;
    out.mask.push_back(s.id);
    poisoned.push_back(std::move(p));
  }
  if (poisoned.empty()) {
    out.warnings.push_back("test split has no non-target samples; poisoned evaluation set is empty");
  }
  std::sort(out.mask.begin(), out.mask.end());
  out.dataset.splits[Split::test] = std::move(poisoned);
  return out;
}

namespace {

json trigger_to_json(const TriggerSpec& t) {
  return json{{"kind", to_string(t.kind)},
              {"badnet_words", t.badnet_words},
              {"insertions_per_sample", t.insertions_per_sample},
              {"addsent_sentence", t.addsent_sentence}};
}

TriggerSpec trigger_from_json(const json& j) {
  TriggerSpec t;
  t.kind = parse_trigger_kind(j.at("kind").get<std::string>());
  t.badnet_words = j.at("badnet_words").get<std::vector<std::string>>();
  t.insertions_per_sample = j.at("insertions_per_sample").get<std::size_t>();
  t.addsent_sentence = j.at("addsent_sentence").get<std::vector<std::string>>();
  return t;
}

}  // namespace

void write_manifest(const std::filesystem::path& path, const PoisonedDataset& poisoned) {
  json j;
  j["format"] = "backbench-manifest";
  j["version"] = 1;
  j["spec"] = {{"trigger", trigger_to_json(poisoned.spec.trigger)},
               {"poison_rate", poisoned.spec.poison_rate},
               {"consistency", to_string(poisoned.spec.consistency)},
               {"target_label", poisoned.spec.target_label},
               {"seed", poisoned.spec.seed}};
  j["split"] = corpus::to_string(poisoned.split);
  j["num_poisoned"] = poisoned.mask.size();
  j["mask_ids"] = poisoned.mask;
  j["warnings"] = poisoned.warnings;
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp);
    out << j.dump(2) << '\n';
  }
  std::filesystem::rename(tmp, path);
}

Manifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("manifest: ") + e.what(), 0);
  }
  if (j.value("format", "") != "backbench-manifest") {
    throw ParseError(path.string() + " is not a poison manifest", 0);
  }
  Manifest m;
  const auto& s = j.at("spec");
  m.spec.trigger = trigger_from_json(s.at("trigger"));
  m.spec.poison_rate = s.at("poison_rate").get<double>();
  m.spec.consistency = parse_consistency(s.at("consistency").get<std::string>());
  m.spec.target_label = s.at("target_label").get<int>();
  m.spec.seed = s.at("seed").get<std::uint64_t>();
  m.split = corpus::parse_split(j.at("split").get<std::string>());
  m.mask = j.at("mask_ids").get<std::vector<std::int64_t>>();
  m.warnings = j.at("warnings").get<std::vector<std::string>>();
  return m;
}

}  // namespace backbench::attack
