#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string_view>
#include <vector>

#include "backbench/corpus.hpp"
#include "backbench/text.hpp"

namespace backbench::victim {

struct VictimConfig {
  std::size_t feature_dims = text::kDefaultFeatureDims;
  std::size_t hidden_dim = 64;
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  double learning_rate = 0.1;
  double l2 = 1e-2;
  // Multiplier on the uniform initialization ranges (see random_init).
  double init_scale = 0.1;
  std::uint64_t seed = 1;

  void validate() const;
};

// One labeled training example in feature space.
struct Example {
  text::FeatureVector x;
  int label = 0;
};

// Featurizes texts with the victim's hashed count features.
text::FeatureVector featurize_text(std::string_view text, std::size_t dims);
std::vector<Example> make_examples(const corpus::Samples& samples, std::size_t dims);

// Gradient of the training objective, laid out like the parameters.
struct Gradient {
  std::vector<double> w1, b1, w2, b2;
};

// One-hidden-layer MLP: h = tanh(W1^T x + b1), p = softmax(W2^T h + b2).
// W1 is D x H row-major (one row per feature bucket), W2 is H x C row-major.
class VictimModel {
 public:
  VictimModel() = default;
  // All parameters zero.
  static VictimModel zeros(std::size_t dims, std::size_t hidden, std::size_t classes);
  // W1 ~ U(-0.1s, 0.1s), W2 ~ U(-s/sqrt(H), s/sqrt(H)) for scale s; zero biases.
  static VictimModel random_init(std::size_t dims, std::size_t hidden, std::size_t classes,
                                 double scale, std::uint64_t seed);

  std::size_t dims() const { return dims_; }
  std::size_t hidden_dim() const { return hidden_; }
  std::size_t num_classes() const { return classes_; }

  std::vector<double> represent(const text::FeatureVector& x) const;
  std::vector<double> represent(std::string_view text) const;
  std::vector<double> predict_proba(const text::FeatureVector& x) const;
  std::vector<double> predict_proba(std::string_view text) const;
  int predict(const text::FeatureVector& x) const;
  int predict(std::string_view text) const;

  // Mean cross-entropy over the batch plus (l2/2)(|W1|^2 + |W2|^2).
  double loss(std::span<const Example> batch, double l2) const;
  Gradient gradient(std::span<const Example> batch, double l2) const;

  std::vector<double>& w1() { return w1_; }
  std::vector<double>& b1() { return b1_; }
  std::vector<double>& w2() { return w2_; }
  std::vector<double>& b2() { return b2_; }
  const std::vector<double>& w1() const { return w1_; }
  const std::vector<double>& b1() const { return b1_; }
  const std::vector<double>& w2() const { return w2_; }
  const std::vector<double>& b2() const { return b2_; }

  // Training metadata.
  std::uint64_t seed = 0;
  std::size_t epochs_run = 0;
  double final_loss = 0.0;
  std::vector<double> epoch_losses;

  bool all_finite() const;

  void save(const std::filesystem::path& path) const;
  static VictimModel load(const std::filesystem::path& path);

  bool operator==(const VictimModel&) const = default;

 private:
  friend VictimModel train(const std::vector<Example>&, std::size_t, const VictimConfig&);

  void hidden_pre(const text::FeatureVector& x, std::vector<double>& pre) const;
  void forward(const text::FeatureVector& x, std::vector<double>& h,
               std::vector<double>& p) const;
  struct StepScratch;
  void sgd_step(std::span<const Example* const> batch, double lr, double l2, StepScratch& s);

  std::size_t dims_ = 0, hidden_ = 0, classes_ = 0;
  std::vector<double> w1_, b1_, w2_, b2_;
};

// Mini-batch SGD on mean cross-entropy with L2. Per-epoch shuffling is
// driven only by config.seed. Throws TrainingError on a non-finite loss.
VictimModel train(const std::vector<Example>& examples, std::size_t num_classes,
                  const VictimConfig& config);
VictimModel train(const corpus::Samples& samples, std::size_t num_classes,
                  const VictimConfig& config);

// Central finite differences (step 1e-4) of the objective against the
// analytic gradient over a seeded subset of parameters. Relative error is
// |a - n| / max(|a|, |n|, 1e-6). Returns the maximum.
double gradient_check(const VictimModel& model, std::span<const Example> batch, double l2,
                      std::size_t num_params = 200, std::uint64_t seed = 0);

double accuracy(const VictimModel& model, const corpus::Samples& samples);

}  // namespace backbench::victim
