#include <cstdio>
#include <exception>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "backbench/experiment.hpp"

namespace ex = backbench::experiment;

namespace {

struct Flags {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed_override;
  std::string cell;
};

void add_common(CLI::App* cmd, Flags& f) {
  cmd->add_option("--config", f.config, "experiment config (JSON)")->required();
  cmd->add_option("--out", f.out, "output directory (overrides output_dir)");
  cmd->add_option("--seed-override", f.seed_override, "replace the sweep seeds with one seed");
  cmd->add_option("--cell", f.cell, "run a single cell: rate,consistency,seed");
}

ex::RunOptions options_of(const Flags& f) {
  ex::RunOptions o;
  if (!f.out.empty()) o.out = f.out;
  o.seed_override = f.seed_override;
  if (!f.cell.empty()) o.cell = ex::parse_cell(f.cell);
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"backbench: textual backdoor attack and defense benchmark"};
  app.require_subcommand(1);

  Flags attack_flags, run_flags;
  auto* attack = app.add_subcommand("attack", "write a poisoned corpus and its manifest");
  add_common(attack, attack_flags);
  auto* run = app.add_subcommand("run", "poison, train, defend and evaluate every sweep cell");
  add_common(run, run_flags);

  std::string run_dir, report_out;
  auto* report = app.add_subcommand("report", "aggregate results.csv into mean/sd series");
  report->add_option("run_dir", run_dir, "directory written by `run`")->required();
  report->add_option("--out", report_out, "output directory (default <run_dir>/report)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*attack) {
      const auto s = ex::cmd_attack(ex::load_config(attack_flags.config), options_of(attack_flags));
      std::printf("poisoned %zu of %zu train samples -> %s\n", s.num_poisoned, s.train_size,
                  s.dir.string().c_str());
      for (const auto& w : s.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
      return 0;
    }
    if (*run) {
      const auto rec = ex::cmd_run(ex::load_config(run_flags.config), options_of(run_flags));
      std::size_t failed = 0;
      for (std::size_t i = 0; i < rec.reports.size(); ++i) {
        const auto& r = rec.reports[i];
        for (const auto& w : rec.warnings[i]) std::fprintf(stderr, "warning: %s\n", w.c_str());
        if (r.status != "ok") {
          ++failed;
          std::fprintf(stderr, "cell rate=%g %s seed=%llu failed: %s\n", r.poison_rate,
                       r.consistency.c_str(), static_cast<unsigned long long>(r.seed),
                       r.error.c_str());
        }
      }
      std::printf("%zu cells, %zu failed, %.1fs, config %s\n", rec.reports.size(), failed,
                  rec.wall_seconds, rec.config_hash.c_str());
      return failed == 0 ? 0 : 1;
    }
    if (*report) {
      std::optional<std::filesystem::path> out;
      if (!report_out.empty()) out = report_out;
      const auto rows = ex::cmd_report(run_dir, out);
      std::printf("%zu series rows\n", rows.size());
      return 0;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
