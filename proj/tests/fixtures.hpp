#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <unistd.h>

#include "backbench/attack.hpp"
#include "backbench/corpus.hpp"
#include "backbench/text.hpp"
#include "backbench/victim.hpp"

namespace fixture {

using namespace backbench;

// The default two-class synthetic corpus, generated once per process.
inline const corpus::Dataset& synthetic() {
  static const corpus::Dataset ds = corpus::generate_synthetic(corpus::default_synthetic_spec());
  return ds;
}

inline attack::PoisonSpec badnet_spec(std::uint64_t seed = 1) {
  attack::PoisonSpec spec;
  spec.trigger = attack::badnet_trigger();
  spec.poison_rate = 0.1;
  spec.consistency = attack::Consistency::mix;
  spec.target_label = 0;
  spec.seed = seed;
  return spec;
}

inline const attack::PoisonedDataset& badnet_train() {
  static const attack::PoisonedDataset p = attack::poison(synthetic(), badnet_spec());
  return p;
}

inline const attack::PoisonedDataset& badnet_test() {
  static const attack::PoisonedDataset p = attack::poison_test_set(synthetic(), badnet_spec());
  return p;
}

inline const victim::VictimModel& clean_model() {
  static const victim::VictimModel m =
      victim::train(synthetic().at(corpus::Split::train), 2, victim::VictimConfig{});
  return m;
}

inline const victim::VictimModel& badnet_model() {
  static const victim::VictimModel m =
      victim::train(badnet_train().samples(), 2, victim::VictimConfig{});
  return m;
}

inline std::vector<text::Tokens> tokenized(const corpus::Samples& samples) {
  std::vector<text::Tokens> docs;
  for (const auto& s : samples) docs.push_back(text::tokenize(s.text));
  return docs;
}

inline const text::NGramLM& clean_lm() {
  static const text::NGramLM lm =
      text::NGramLM::fit(tokenized(synthetic().at(corpus::Split::train)), 2, 1.0);
  return lm;
}

// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() /
             ("backbench-" + name + "-" + std::to_string(::getpid()));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void spit(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  out << content;
}

}  // namespace fixture
