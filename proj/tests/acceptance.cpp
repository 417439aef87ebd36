// Acceptance checks: one PASS/FAIL line per criterion. Exit status is
// nonzero when any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <string>

#include "backbench/cluster.hpp"
#include "backbench/experiment.hpp"
#include "backbench/metrics.hpp"
#include "backbench/text.hpp"
#include "backbench/victim.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace backbench;
namespace ex = backbench::experiment;
using nlohmann::json;

namespace {

int failures = 0;

void report(int id, const std::string& name, bool ok, const std::string& detail) {
  std::printf("%s criterion %d (%s): %s\n", ok ? "PASS" : "FAIL", id, name.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

double mean(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

struct Sweep {
  ex::RunRecord record;
  double seconds_per_cell = 0.0;

  std::vector<const metrics::EvalReport*> cells(double rate, const std::string& consistency) const {
    std::vector<const metrics::EvalReport*> out;
    for (const auto& r : record.reports)
      if (r.poison_rate == rate && r.consistency == consistency) out.push_back(&r);
    return out;
  }

  double mean_of(double rate, const std::string& consistency,
                 std::optional<double> metrics::EvalReport::*field) const {
    std::vector<double> v;
    for (const auto* r : cells(rate, consistency)) v.push_back(r->*field ? *(r->*field) : NAN);
    return mean(v);
  }
};

ex::ExperimentConfig base_config(attack::TriggerKind kind, const std::string& out) {
  auto c = ex::config_from_json(json::object());
  c.trigger = kind == attack::TriggerKind::badnet ? attack::badnet_trigger() : attack::addsent_trigger();
  c.output_dir = fixture::temp_dir(out);
  return c;
}

Sweep run_sweep(ex::ExperimentConfig c) {
  const auto t0 = std::chrono::steady_clock::now();
  Sweep s;
  s.record = ex::cmd_run(c);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  s.seconds_per_cell = secs / static_cast<double>(s.record.reports.size());
  return s;
}

const std::vector<double> kRates{0.01, 0.05, 0.1, 0.2};

Sweep attack_sweep(attack::TriggerKind kind) {
  auto c = base_config(kind, std::string("accept-") + attack::to_string(kind));
  c.sweep.rates = kRates;
  c.sweep.consistencies = {attack::Consistency::mix, attack::Consistency::dirty};
  c.metrics.oracle = false;
  return run_sweep(c);
}

Sweep cube_sweep(attack::TriggerKind kind) {
  auto c = base_config(kind, std::string("accept-cube-") + attack::to_string(kind));
  c.sweep.rates = {0.1};
  c.sweep.consistencies = {attack::Consistency::mix};
  c.defense.name = ex::DefenseName::cube;
  c.metrics.stealthiness = false;
  return run_sweep(c);
}

void criterion_effectiveness(const std::map<std::string, Sweep>& sweeps) {
  bool ok = true;
  std::string detail;
  for (const auto& [name, s] : sweeps) {
    const double asr = s.mean_of(0.1, "mix", &metrics::EvalReport::asr);
    const double cacc = s.mean_of(0.1, "mix", &metrics::EvalReport::cacc);
    const double clean = s.mean_of(0.1, "mix", &metrics::EvalReport::clean_model_cacc);
    const bool pass = s.cells(0.1, "mix").size() == 3 && asr >= 0.95 &&
                      std::abs(cacc - clean) <= 0.03 && s.seconds_per_cell < 120.0;
    ok = ok && pass;
    detail += name + " asr " + fmt("%.4f", asr) + " cacc " + fmt("%.4f", cacc) + " clean-model cacc " +
              fmt("%.4f", clean) + " " + fmt("%.1fs/cell", s.seconds_per_cell) + "; ";
  }
  report(1, "attack effectiveness at rate 0.1", ok, detail);
}

void criterion_monotone(const std::map<std::string, Sweep>& sweeps) {
  bool ok = true;
  std::string detail;
  for (const auto& [name, s] : sweeps) {
    detail += name + " dirty asr";
    double prev = -1.0;
    for (double rate : kRates) {
      const double a = s.mean_of(rate, "dirty", &metrics::EvalReport::asr);
      detail += " " + fmt("%.4f", a);
      if (a < prev - 0.02) ok = false;
      prev = a;
    }
    detail += "; ";
  }
  report(2, "dirty-label rate monotonicity", ok, detail);
}

void criterion_margin(const std::map<std::string, Sweep>& sweeps) {
  bool ok = true;
  std::string detail;
  for (const auto& [name, s] : sweeps) {
    for (const auto& r : s.record.reports) ok = ok && r.clean_model_asr.has_value();
    const double asr = s.mean_of(0.1, "mix", &metrics::EvalReport::asr);
    const double clean = s.mean_of(0.1, "mix", &metrics::EvalReport::clean_model_asr);
    ok = ok && asr - clean >= 0.30;
    detail += name + " margin " + fmt("%.4f", asr - clean) + " (clean-model asr " + fmt("%.4f", clean) + "); ";
  }
  report(3, "clean-model baseline margin", ok, detail);
}

void criterion_cube() {
  bool ok = true;
  std::string detail;
  for (auto kind : {attack::TriggerKind::badnet, attack::TriggerKind::addsent}) {
    const auto s = cube_sweep(kind);
    const auto cells = s.cells(0.1, "mix");
    if (cells.size() != 3) ok = false;
    for (const auto* r : cells) ok = ok && r->status == "ok";
    const double asr = s.mean_of(0.1, "mix", &metrics::EvalReport::asr);
    const double oracle = s.mean_of(0.1, "mix", &metrics::EvalReport::oracle_asr);
    const double recall = s.mean_of(0.1, "mix", &metrics::EvalReport::filter_recall);
    const double retention = s.mean_of(0.1, "mix", &metrics::EvalReport::filter_retention);
    ok = ok && std::abs(asr - oracle) <= 0.10 && recall >= 0.9 && retention >= 0.8;
    detail += std::string(attack::to_string(kind)) + " cube asr " + fmt("%.4f", asr) + " oracle asr " +
              fmt("%.4f", oracle) + " recall " + fmt("%.4f", recall) + " retention " +
              fmt("%.4f", retention) + " [per seed asr";
    for (const auto* r : cells) detail += " " + fmt("%.3f", r->asr.value_or(NAN));
    detail += "]; ";
  }
  report(4, "CUBE efficacy", ok, detail);
}

void criterion_hdbscan() {
  std::mt19937_64 gen(5150);
  std::uniform_int_distribution<std::size_t> size(2, 8), dim(1, 3);
  std::uniform_real_distribution<double> u(0.0, 10.0);
  std::size_t exact = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = size(gen), d = dim(gen);
    cluster::Matrix y(n, d);
    for (auto& v : y.data) v = u(gen);
    const std::size_t k = n > 2 ? 1 + static_cast<std::size_t>(trial) % std::min<std::size_t>(3, n - 1) : 1;
    const auto core = cluster::core_distances(y, k);
    oracle::Dense pts(n), w(n, std::vector<double>(n, 0.0));
    for (std::size_t i = 0; i < n; ++i) pts[i].assign(y.row(i).begin(), y.row(i).end());
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) w[i][j] = std::max({core[i], core[j], oracle::dist(pts[i], pts[j])});
    const double got = cluster::total_weight(cluster::mutual_reachability_mst(y, core));
    const double want = oracle::brute_force_mst_weight(w);
    exact += std::abs(got - want) <= 1e-12 * std::max(1.0, want);
  }

  std::normal_distribution<double> noise(0.0, 0.05);
  std::vector<std::vector<double>> rows;
  std::vector<int> truth;
  for (int blob = 0; blob < 2; ++blob)
    for (int i = 0; i < 50; ++i) {
      rows.push_back({blob * 10.0 + noise(gen), noise(gen)});
      truth.push_back(blob);
    }
  const auto res = cluster::hdbscan(cluster::Matrix::from_rows(rows), cluster::HdbscanConfig{10, 0});
  const auto cut = oracle::single_linkage_components(rows, 5.0);
  std::size_t mislabeled = 0;
  for (std::size_t i = 0; i < truth.size(); ++i)
    if (res.labels[i] < 0) ++mislabeled;
  const bool partition_ok = oracle::same_partition(res.labels, truth) && oracle::same_partition(cut, truth);
  report(5, "HDBSCAN oracle equivalence", exact == 100 && res.num_clusters == 2 && mislabeled == 0 && partition_ok,
         std::to_string(exact) + "/100 MST weights exact; two blobs -> " + std::to_string(res.num_clusters) +
             " clusters, " + std::to_string(mislabeled) + " noise, partition " +
             (partition_ok ? "matches" : "differs"));
}

void criterion_pca() {
  std::mt19937_64 gen(42);
  std::normal_distribution<double> g(0.0, 1.0), tiny(0.0, 1e-9);
  std::vector<std::vector<double>> basis(2, std::vector<double>(50));
  for (auto& b : basis)
    for (auto& v : b) v = g(gen);
  cluster::Matrix x(200, 50);
  for (std::size_t r = 0; r < 200; ++r) {
    const double a = 3.0 * g(gen), b = g(gen);
    for (std::size_t c = 0; c < 50; ++c) x(r, c) = a * basis[0][c] + b * basis[1][c] + tiny(gen);
  }
  const auto res = cluster::pca_fit_transform(x, 2);
  const double evr = res.reducer.total_explained_variance();
  double worst = 0.0;
  const auto& p = res.reducer.projection;
  for (std::size_t a = 0; a < 2; ++a)
    for (std::size_t b = 0; b < 2; ++b) {
      double dot = 0.0;
      for (std::size_t r = 0; r < p.rows; ++r) dot += p(r, a) * p(r, b);
      worst = std::max(worst, std::abs(dot - (a == b ? 1.0 : 0.0)));
    }
  oracle::Dense dense(200);
  for (std::size_t r = 0; r < 200; ++r) dense[r].assign(x.row(r).begin(), x.row(r).end());
  const auto evals = oracle::jacobi_eigen(oracle::covariance(dense));
  double total = 0.0;
  for (double e : evals) total += std::max(e, 0.0);
  const double oracle_evr = (evals[0] + evals[1]) / total;
  report(6, "PCA spectral check", evr >= 0.9999 && worst <= 1e-8 && std::abs(evr - oracle_evr) <= 1e-9,
         "explained variance " + fmt("%.10f", evr) + " (eigen oracle " + fmt("%.10f", oracle_evr) +
             "), orthonormality error " + fmt("%.2e", worst));
}

void criterion_gradient() {
  const auto& m = fixture::badnet_model();
  const auto& train = fixture::badnet_train().samples();
  corpus::Samples picked;
  for (std::size_t i = 0; i < 64; ++i) picked.push_back(train[i * 31 % train.size()]);
  const auto batch = victim::make_examples(picked, m.dims());
  const double err = victim::gradient_check(m, batch, victim::VictimConfig{}.l2, 400, 1);
  report(7, "victim gradient check", err < 1e-4, "max relative error " + fmt("%.3e", err));
}

void criterion_lm() {
  const auto lm = text::NGramLM::fit({{"a", "a", "b"}}, 2, 1.0);
  const text::Tokens ctx{"a"};
  const bool hand = lm.prob(ctx, "a") == 1.0 / 3.0 && lm.vocab_size() == 4;

  std::mt19937_64 gen(77);
  std::uniform_int_distribution<int> n_sent(1, 12), len(0, 9), word(0, 7);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<text::Tokens> corpus(static_cast<std::size_t>(n_sent(gen)));
    for (auto& s : corpus) {
      const int l = len(gen);
      for (int i = 0; i < l; ++i) s.push_back(std::string(1, static_cast<char>('a' + word(gen))));
    }
    const auto fitted = text::NGramLM::fit(corpus, trial % 2 == 0 ? 2 : 3, 1.0);
    for (const auto& c : fitted.contexts()) {
      double sum = 0.0;
      for (const auto& w : fitted.vocab()) sum += fitted.prob(c, w);
      worst = std::max(worst, std::abs(sum - 1.0));
    }
  }
  report(8, "language model correctness", hand && worst <= 1e-9,
         std::string("P(a|a) ") + (hand ? "= 1/3" : "!= 1/3") + ", max |sum - 1| " + fmt("%.2e", worst));
}

void criterion_metrics() {
  std::vector<defense::DetectionVerdict> v;
  std::map<std::int64_t, bool> truth;
  for (std::int64_t i = 0; i < 30; ++i) {
    const bool poisoned = i < 10;
    v.push_back({i, 0.0, poisoned ? i < 8 : i == 10, 0.0, ""});
    truth[i] = poisoned;
  }
  const auto r = metrics::far_frr(v, truth);
  const bool far_ok = r.far && r.frr && std::abs(*r.far - 0.2) < 1e-15 && std::abs(*r.frr - 0.05) < 1e-15;

  const std::vector<int> preds{0, 0, 0, 0, 0, 1, 0, 0, 0, 0};
  const std::vector<bool> flagged{true, true, false, false, false, false, false, false, true, true};
  const bool asr_ok = metrics::asr_under_detection(preds, flagged, 0) == 0.5;

  std::vector<int> labels(20, 1), p2(20, 1);
  p2[0] = 0;
  std::vector<bool> f2(20, false);
  f2[18] = f2[19] = true;
  const bool cacc_ok = metrics::cacc_under_detection(p2, labels, f2) == 0.85;

  // Detection cells on the fixture.
  auto c = ex::config_from_json(json::object());
  c.sweep.rates = {0.05, 0.1, 0.2};
  c.sweep.consistencies = {attack::Consistency::mix};
  c.sweep.seeds = {1};
  c.defense.name = ex::DefenseName::strip;
  c.defense.stage = ex::DefenseStage::inference;
  c.metrics.oracle = false;
  c.metrics.clean_model = false;
  c.metrics.stealthiness = false;
  c.output_dir = fixture::temp_dir("accept-strip");
  const auto rec = ex::cmd_run(c);
  bool bound_ok = rec.all_ok();
  std::string runs;
  for (const auto& rep : rec.reports) {
    bound_ok = bound_ok && rep.asr_under_detection && rep.asr && *rep.asr_under_detection <= *rep.asr;
    runs += " " + fmt("%.3f", rep.asr_under_detection.value_or(NAN)) + "<=" + fmt("%.3f", rep.asr.value_or(NAN));
  }
  report(9, "metric arithmetic", far_ok && asr_ok && cacc_ok && bound_ok,
         std::string("far/frr ") + (far_ok ? "ok" : "wrong") + ", asr_under_detection " +
             (asr_ok ? "ok" : "wrong") + ", cacc_under_detection " + (cacc_ok ? "ok" : "wrong") +
             ", strip runs:" + runs);
}

void criterion_stealth(const Sweep& badnet) {
  const double dppl = badnet.mean_of(0.1, "mix", &metrics::EvalReport::delta_ppl);
  const double sim = badnet.mean_of(0.1, "mix", &metrics::EvalReport::similarity);

  // Control: every poisoned text rewritten into tokens the original never uses.
  const auto& ds = fixture::synthetic();
  const auto scorer = metrics::SimilarityScorer::fit(ds.at(corpus::Split::train));
  std::vector<std::string> clean, rewritten;
  for (const auto& s : ds.at(corpus::Split::train)) {
    if (clean.size() == 200) break;
    clean.push_back(s.text);
    std::string r;
    for (std::size_t i = 0; i < text::split_whitespace(s.text).size(); ++i)
      r += (i ? " w" : "w") + std::to_string(i);
    rewritten.push_back(r);
  }
  const double control = metrics::mean_similarity(scorer, clean, rewritten);
  report(10, "stealthiness directionality", dppl > 0.0 && sim > control,
         "badnet delta_ppl " + fmt("%.4f", dppl) + ", similarity " + fmt("%.4f", sim) +
             " vs token-disjoint rewrite " + fmt("%.4f", control));
}

void criterion_determinism() {
  auto c = ex::config_from_json(json::object());
  c.sweep.rates = {0.0, 0.1};
  c.sweep.consistencies = {attack::Consistency::mix};
  c.sweep.seeds = {2};
  c.defense.name = ex::DefenseName::cube;
  c.output_dir = fixture::temp_dir("accept-det-a");
  ex::cmd_run(c);
  auto c2 = c;
  c2.output_dir = fixture::temp_dir("accept-det-b");
  ex::cmd_run(c2);
  bool same = true;
  for (auto name : {"results.csv", "results.json"})
    same = same && fixture::slurp(c.output_dir / name) == fixture::slurp(c2.output_dir / name) &&
           !fixture::slurp(c.output_dir / name).empty();
  report(11, "pipeline determinism", same, same ? "results.csv and results.json byte-identical" : "outputs differ");
}

}  // namespace

int main() {
  criterion_hdbscan();
  criterion_pca();
  criterion_gradient();
  criterion_lm();

  std::map<std::string, Sweep> sweeps;
  sweeps["badnet"] = attack_sweep(attack::TriggerKind::badnet);
  sweeps["addsent"] = attack_sweep(attack::TriggerKind::addsent);
  criterion_effectiveness(sweeps);
  criterion_monotone(sweeps);
  criterion_margin(sweeps);
  criterion_cube();
  criterion_metrics();
  criterion_stealth(sweeps.at("badnet"));
  criterion_determinism();

  std::printf("%d of 11 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
