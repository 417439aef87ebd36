#include "backbench/victim.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "backbench/error.hpp"
#include "backbench/random.hpp"

namespace backbench::victim {

void VictimConfig::validate() const {
  if (feature_dims < 2 || (feature_dims & (feature_dims - 1)) != 0) {
    throw ConfigError("victim.feature_dims must be a power of two >= 2");
  }
  if (hidden_dim == 0 || epochs == 0 || batch_size == 0) {
    throw ConfigError("victim.hidden_dim, epochs and batch_size must be positive");
  }
  if (!(learning_rate > 0.0) || !(init_scale > 0.0) || l2 < 0.0) {
    throw ConfigError("victim.learning_rate and init_scale must be positive, l2 non-negative");
  }
}

text::FeatureVector featurize_text(std::string_view text, std::size_t dims) {
  return text::featurize(text::tokenize(text), dims);
}

std::vector<Example> make_examples(const corpus::Samples& samples, std::size_t dims) {
  std::vector<Example> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back({featurize_text(s.text, dims), s.label});
  return out;
}

VictimModel VictimModel::zeros(std::size_t dims, std::size_t hidden, std::size_t classes) {
  VictimModel m;
  m.dims_ = dims;
  m.hidden_ = hidden;
  m.classes_ = classes;
  m.w1_.assign(dims * hidden, 0.0);
  m.b1_.assign(hidden, 0.0);
  m.w2_.assign(hidden * classes, 0.0);
  m.b2_.assign(classes, 0.0);
  return m;
}

VictimModel VictimModel::random_init(std::size_t dims, std::size_t hidden, std::size_t classes,
                                     double scale, std::uint64_t seed) {
  VictimModel m = zeros(dims, hidden, classes);
  Rng rng(seed);
  const double a1 = 0.1 * scale;
  const double a2 = scale / std::sqrt(static_cast<double>(hidden));
  for (auto& w : m.w1_) w = rng.uniform(-a1, a1);
  for (auto& w : m.w2_) w = rng.uniform(-a2, a2);
  m.seed = seed;
  return m;
}

void VictimModel::hidden_pre(const text::FeatureVector& x, std::vector<double>& pre) const {
  if (x.dims() != dims_) throw ConfigError("feature dimension does not match the model");
  pre.assign(b1_.begin(), b1_.end());
  for (const auto& e : x.entries()) {
    const double* row = &w1_[static_cast<std::size_t>(e.bucket) * hidden_];
    for (std::size_t j = 0; j < hidden_; ++j) pre[j] += e.value * row[j];
  }
}

namespace {

void softmax_inplace(std::vector<double>& z) {
  const double mx = *std::max_element(z.begin(), z.end());
  double sum = 0.0;
  for (auto& v : z) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (auto& v : z) v /= sum;
}

}  // namespace

void VictimModel::forward(const text::FeatureVector& x, std::vector<double>& h,
                          std::vector<double>& p) const {
  hidden_pre(x, h);
  for (auto& v : h) v = std::tanh(v);
  p.assign(b2_.begin(), b2_.end());
  for (std::size_t j = 0; j < hidden_; ++j) {
    const double* row = &w2_[j * classes_];
    for (std::size_t c = 0; c < classes_; ++c) p[c] += h[j] * row[c];
  }
  softmax_inplace(p);
}

std::vector<double> VictimModel::represent(const text::FeatureVector& x) const {
  std::vector<double> h;
  hidden_pre(x, h);
  for (auto& v : h) v = std::tanh(v);
  return h;
}

std::vector<double> VictimModel::represent(std::string_view text) const {
  return represent(featurize_text(text, dims_));
}

std::vector<double> VictimModel::predict_proba(const text::FeatureVector& x) const {
  std::vector<double> h, p;
  forward(x, h, p);
  return p;
}

std::vector<double> VictimModel::predict_proba(std::string_view text) const {
  return predict_proba(featurize_text(text, dims_));
}

int VictimModel::predict(const text::FeatureVector& x) const {
  const auto p = predict_proba(x);
  return static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
}

int VictimModel::predict(std::string_view text) const {
  return predict(featurize_text(text, dims_));
}

double VictimModel::loss(std::span<const Example> batch, double l2) const {
  std::vector<double> h, p;
  double ce = 0.0;
  for (const auto& ex : batch) {
    forward(ex.x, h, p);
    ce -= std::log(std::max(p[static_cast<std::size_t>(ex.label)], 1e-300));
  }
  ce /= static_cast<double>(batch.size());
  double sq = 0.0;
  for (double w : w1_) sq += w * w;
  for (double w : w2_) sq += w * w;
  return ce + 0.5 * l2 * sq;
}

Gradient VictimModel::gradient(std::span<const Example> batch, double l2) const {
  Gradient g;
  g.w1.assign(w1_.size(), 0.0);
  g.b1.assign(hidden_, 0.0);
  g.w2.assign(w2_.size(), 0.0);
  g.b2.assign(classes_, 0.0);
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  std::vector<double> h, p, dh(hidden_);
  for (const auto& ex : batch) {
    forward(ex.x, h, p);
    p[static_cast<std::size_t>(ex.label)] -= 1.0;
    for (auto& v : p) v *= inv_n;
    for (std::size_t j = 0; j < hidden_; ++j) {
      double acc = 0.0;
      for (std::size_t c = 0; c < classes_; ++c) {
        g.w2[j * classes_ + c] += h[j] * p[c];
        acc += w2_[j * classes_ + c] * p[c];
      }
      dh[j] = acc * (1.0 - h[j] * h[j]);
      g.b1[j] += dh[j];
    }
    for (std::size_t c = 0; c < classes_; ++c) g.b2[c] += p[c];
    for (const auto& e : ex.x.entries()) {
      double* row = &g.w1[static_cast<std::size_t>(e.bucket) * hidden_];
      for (std::size_t j = 0; j < hidden_; ++j) row[j] += e.value * dh[j];
    }
  }
  for (std::size_t i = 0; i < w1_.size(); ++i) g.w1[i] += l2 * w1_[i];
  for (std::size_t i = 0; i < w2_.size(); ++i) g.w2[i] += l2 * w2_[i];
  return g;
}

struct VictimModel::StepScratch {
  std::vector<double> h, p, dh;
  std::vector<std::uint32_t> rows;
  std::vector<double> row_grads;  // rows.size() x H
  std::vector<double> gw2, gb1, gb2;
};

void VictimModel::sgd_step(std::span<const Example* const> batch, double lr, double l2,
                           StepScratch& s) {
  s.rows.clear();
  for (const Example* ex : batch) {
    for (const auto& e : ex->x.entries()) s.rows.push_back(e.bucket);
  }
  std::sort(s.rows.begin(), s.rows.end());
  s.rows.erase(std::unique(s.rows.begin(), s.rows.end()), s.rows.end());
  s.row_grads.assign(s.rows.size() * hidden_, 0.0);
  s.gw2.assign(w2_.size(), 0.0);
  s.gb1.assign(hidden_, 0.0);
  s.gb2.assign(classes_, 0.0);
  s.dh.resize(hidden_);

  const double inv_n = 1.0 / static_cast<double>(batch.size());
  for (const Example* ex : batch) {
    forward(ex->x, s.h, s.p);
    s.p[static_cast<std::size_t>(ex->label)] -= 1.0;
    for (auto& v : s.p) v *= inv_n;
    for (std::size_t j = 0; j < hidden_; ++j) {
      double acc = 0.0;
      for (std::size_t c = 0; c < classes_; ++c) {
        s.gw2[j * classes_ + c] += s.h[j] * s.p[c];
        acc += w2_[j * classes_ + c] * s.p[c];
      }
      s.dh[j] = acc * (1.0 - s.h[j] * s.h[j]);
      s.gb1[j] += s.dh[j];
    }
    for (std::size_t c = 0; c < classes_; ++c) s.gb2[c] += s.p[c];
    for (const auto& e : ex->x.entries()) {
      const auto slot = static_cast<std::size_t>(
          std::lower_bound(s.rows.begin(), s.rows.end(), e.bucket) - s.rows.begin());
      double* row = &s.row_grads[slot * hidden_];
      for (std::size_t j = 0; j < hidden_; ++j) row[j] += e.value * s.dh[j];
    }
  }

  if (l2 > 0.0) {
    const double decay = 1.0 - lr * l2;
    for (auto& w : w1_) w *= decay;
    for (auto& w : w2_) w *= decay;
  }
  for (std::size_t r = 0; r < s.rows.size(); ++r) {
    double* row = &w1_[static_cast<std::size_t>(s.rows[r]) * hidden_];
    const double* g = &s.row_grads[r * hidden_];
    for (std::size_t j = 0; j < hidden_; ++j) row[j] -= lr * g[j];
  }
  for (std::size_t i = 0; i < w2_.size(); ++i) w2_[i] -= lr * s.gw2[i];
  for (std::size_t j = 0; j < hidden_; ++j) b1_[j] -= lr * s.gb1[j];
  for (std::size_t c = 0; c < classes_; ++c) b2_[c] -= lr * s.gb2[c];
}

bool VictimModel::all_finite() const {
  const auto ok = [](const std::vector<double>& v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
  };
  return ok(w1_) && ok(b1_) && ok(w2_) && ok(b2_);
}

VictimModel train(const std::vector<Example>& examples, std::size_t num_classes,
                  const VictimConfig& config) {
  config.validate();
  if (examples.empty()) throw ConfigError("cannot train on an empty split");
  if (num_classes < 2) throw ConfigError("need at least 2 classes");
  for (const auto& ex : examples) {
    if (ex.label < 0 || static_cast<std::size_t>(ex.label) >= num_classes) {
      throw ValidationError("training label out of range");
    }
    if (ex.x.dims() != config.feature_dims) {
      throw ConfigError("example feature dims do not match victim.feature_dims");
    }
  }

  VictimModel model =
      VictimModel::random_init(config.feature_dims, config.hidden_dim, num_classes,
                               config.init_scale, derive_seed(config.seed, "init"));
  model.seed = config.seed;
  Rng order_rng(derive_seed(config.seed, "shuffle"));
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<const Example*> batch;
  VictimModel::StepScratch scratch;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    order_rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      batch.clear();
      for (std::size_t i = start; i < end; ++i) batch.push_back(&examples[order[i]]);
      model.sgd_step(batch, config.learning_rate, config.l2, scratch);
    }
    const double loss = model.loss(examples, config.l2);
    if (!std::isfinite(loss)) {
      std::ostringstream msg;
      msg << "non-finite training loss at epoch " << epoch + 1 << " (learning_rate "
          << config.learning_rate << " is probably too high)";
      throw TrainingError(msg.str());
    }
    model.epoch_losses.push_back(loss);
    model.final_loss = loss;
    model.epochs_run = epoch + 1;
  }
  return model;
}

VictimModel train(const corpus::Samples& samples, std::size_t num_classes,
                  const VictimConfig& config) {
  config.validate();
  return train(make_examples(samples, config.feature_dims), num_classes, config);
}

double gradient_check(const VictimModel& model, std::span<const Example> batch, double l2,
                      std::size_t num_params, std::uint64_t seed) {
  if (batch.empty()) throw ConfigError("gradient_check needs a nonempty batch");
  const Gradient analytic = model.gradient(batch, l2);

  // Candidate parameters: W1 rows touched by the batch, a few untouched W1
  // entries, and every b1 / W2 / b2 entry.
  enum Tensor { kW1, kB1, kW2, kB2 };
  std::vector<std::pair<Tensor, std::size_t>> candidates;
  std::vector<std::uint32_t> rows;
  for (const auto& ex : batch) {
    for (const auto& e : ex.x.entries()) rows.push_back(e.bucket);
  }
  std::sort(rows.begin(), rows.end());
  rows.erase(std::unique(rows.begin(), rows.end()), rows.end());
  const std::size_t H = model.hidden_dim();
  for (auto r : rows) {
    for (std::size_t j = 0; j < H; ++j) candidates.emplace_back(kW1, r * H + j);
  }
  Rng rng(seed);
  for (int i = 0; i < 8; ++i) candidates.emplace_back(kW1, rng.below(model.w1().size()));
  for (std::size_t i = 0; i < model.b1().size(); ++i) candidates.emplace_back(kB1, i);
  for (std::size_t i = 0; i < model.w2().size(); ++i) candidates.emplace_back(kW2, i);
  for (std::size_t i = 0; i < model.b2().size(); ++i) candidates.emplace_back(kB2, i);
  rng.shuffle(candidates);
  candidates.resize(std::min(num_params, candidates.size()));

  VictimModel probe = model;
  constexpr double kStep = 1e-4;
  double worst = 0.0;
  for (const auto& [tensor, idx] : candidates) {
    std::vector<double>* params = nullptr;
    const std::vector<double>* grads = nullptr;
    switch (tensor) {
      case kW1: params = &probe.w1(); grads = &analytic.w1; break;
      case kB1: params = &probe.b1(); grads = &analytic.b1; break;
      case kW2: params = &probe.w2(); grads = &analytic.w2; break;
      case kB2: params = &probe.b2(); grads = &analytic.b2; break;
    }
    const double orig = (*params)[idx];
    (*params)[idx] = orig + kStep;
    const double up = probe.loss(batch, l2);
    (*params)[idx] = orig - kStep;
    const double down = probe.loss(batch, l2);
    (*params)[idx] = orig;
    const double numeric = (up - down) / (2.0 * kStep);
    const double a = (*grads)[idx];
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-6});
    worst = std::max(worst, std::abs(a - numeric) / denom);
  }
  return worst;
}

double accuracy(const VictimModel& model, const corpus::Samples& samples) {
  if (samples.empty()) throw UndefinedRateError("accuracy of an empty sample list");
  std::size_t hit = 0;
  for (const auto& s : samples) hit += model.predict(s.text) == s.label;
  return static_cast<double>(hit) / static_cast<double>(samples.size());
}

// ---------------------------------------------------------------------------
// Binary format: "BBVM" magic, u32 version, u64 dims/hidden/classes/seed/
// epochs_run, f64 final_loss, u64 n + n f64 epoch losses, then W1, b1, W2, b2
// as row-major little-endian f64.

namespace {

constexpr char kMagic[4] = {'B', 'B', 'V', 'M'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "model files are little-endian; add byte swapping for this platform");

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw ParseError("truncated victim model file", 0);
  return v;
}

void put_vec(std::ostream& out, const std::vector<double>& v) {
  out.write(reinterpret_cast<const char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(double)));
}

void get_vec(std::istream& in, std::vector<double>& v) {
  in.read(reinterpret_cast<char*>(v.data()),
          static_cast<std::streamsize>(v.size() * sizeof(double)));
  if (!in) throw ParseError("truncated victim model file", 0);
}

}  // namespace

void VictimModel::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(kMagic, 4);
  put<std::uint32_t>(out, kVersion);
  put<std::uint64_t>(out, dims_);
  put<std::uint64_t>(out, hidden_);
  put<std::uint64_t>(out, classes_);
  put<std::uint64_t>(out, seed);
  put<std::uint64_t>(out, epochs_run);
  put<double>(out, final_loss);
  put<std::uint64_t>(out, epoch_losses.size());
  put_vec(out, epoch_losses);
  put_vec(out, w1_);
  put_vec(out, b1_);
  put_vec(out, w2_);
  put_vec(out, b2_);
}

VictimModel VictimModel::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) {
    throw ParseError(path.string() + " is not a victim model file", 0);
  }
  if (get<std::uint32_t>(in) != kVersion) throw ParseError("unsupported model version", 0);
  const auto dims = get<std::uint64_t>(in);
  const auto hidden = get<std::uint64_t>(in);
  const auto classes = get<std::uint64_t>(in);
  if (dims == 0 || hidden == 0 || classes < 2 || dims > (1ULL << 26) || hidden > 4096 ||
      classes > 4096) {
    throw ParseError("implausible model dimensions", 0);
  }
  VictimModel m = zeros(dims, hidden, classes);
  m.seed = get<std::uint64_t>(in);
  m.epochs_run = get<std::uint64_t>(in);
  m.final_loss = get<double>(in);
  const auto n_losses = get<std::uint64_t>(in);
  if (n_losses > (1ULL << 24)) throw ParseError("implausible epoch count", 0);
  m.epoch_losses.resize(n_losses);
  get_vec(in, m.epoch_losses);
  get_vec(in, m.w1_);
  get_vec(in, m.b1_);
  get_vec(in, m.w2_);
  get_vec(in, m.b2_);
  return m;
}

}  // namespace backbench::victim
