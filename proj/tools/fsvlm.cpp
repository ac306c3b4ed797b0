// Command-line front end: run, report, verify, ingest, synth.

#include "fsvlm/fsvlm.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <map>
#include <memory>
#include <sstream>

namespace {

using namespace fsvlm;

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) {
    if (item.empty()) continue;
    std::size_t used = 0;
    const auto v = std::stoull(item, &used);
    if (used != item.size()) throw std::invalid_argument("bad seed: " + item);
    out.push_back(v);
  }
  if (out.empty()) throw std::invalid_argument("--seeds lists no seeds");
  return out;
}

int cmd_run(const std::string& config_path, const std::string& out, const std::string& seeds,
            const std::string& only, bool quiet) {
  ExperimentConfig config = load_experiment_config(config_path);
  if (!out.empty()) config.output_dir = out;
  config.output_dir = fs::absolute(config.output_dir).lexically_normal();
  if (!seeds.empty()) config.seeds = parse_seeds(seeds);
  config.validate();
  RunOptions options;
  options.only = CellFilter::parse(only);
  options.quiet = quiet;
  const GridResult result = run_grid(config, options);
  const auto all = load_records(config.output_dir);
  write_results_tables(config.output_dir, all);
  std::cout << result.records.size() << " records (" << result.executed << " run now, " << result.failed()
            << " failed) in " << config.output_dir.string() << "\n";
  return result.failed() == 0 ? 0 : 1;
}

int cmd_report(const std::string& records_dir, bool table, bool roc, bool boxplot) {
  const fs::path run_dir = run_dir_of(records_dir);
  const auto records = load_records(run_dir);
  if (records.empty()) throw std::runtime_error("no records in " + run_dir.string());
  if (!table && !roc && !boxplot) table = roc = boxplot = true;
  if (table) {
    write_results_tables(run_dir, records);
    std::cout << (run_dir / "results.csv").string() << "\n" << (run_dir / "results_pivot.csv").string() << "\n";
  }
  if (roc) std::cout << emit_roc_data(records, run_dir / "roc").size() << " ROC files in " << (run_dir / "roc").string() << "\n";
  if (boxplot)
    std::cout << emit_boxplot_data(records, run_dir / "boxplot").size() << " box-plot files in "
              << (run_dir / "boxplot").string() << "\n";
  const auto failed = std::count_if(records.begin(), records.end(), [](const auto& r) { return !r.ok; });
  return failed == 0 ? 0 : 1;
}

int cmd_verify(const std::string& records_dir) {
  const VerifyReport rep = verify(records_dir);
  for (const auto& f : rep.failures) std::cout << "FAIL " << f << "\n";
  std::cout << rep.records << " records, " << rep.reevaluated << " re-evaluated, " << rep.failures.size()
            << " problems\n";
  return rep.ok() ? 0 : 1;
}

// Slides are PNG files named <slide_id>.png inside `slides_dir`.
int cmd_ingest(const std::string& annotations, const std::string& slides_dir, const std::string& out, int margin) {
  const auto instances = read_annotations(annotations);
  std::map<std::string, std::unique_ptr<InMemorySlide>> slides;
  std::vector<PatchSample> patches;
  std::vector<std::size_t> indices;
  for (std::size_t i = 0; i < instances.size(); ++i) {
    const auto& inst = instances[i];
    auto& slide = slides[inst.slide_id];
    if (!slide) slide = std::make_unique<InMemorySlide>(inst.slide_id, read_png(fs::path(slides_dir) / (inst.slide_id + ".png")));
    patches.push_back(extract_patch(*slide, inst, margin));
    indices.push_back(i);
  }
  write_patch_set(out, patches, indices);
  const auto clamped = std::count_if(patches.begin(), patches.end(), [](const auto& p) { return p.source.clamped; });
  std::cout << patches.size() << " patches (" << clamped << " clamped) in " << out << "\n";
  return 0;
}

int cmd_synth(const std::string& out, int n, int side, std::uint64_t seed) {
  const auto data = generate_synthetic_dataset(n, side, seed);
  std::vector<std::size_t> indices(data.size());
  for (std::size_t i = 0; i < indices.size(); ++i) indices[i] = i;
  write_patch_set(out, data, indices);
  std::cout << data.size() << " patches in " << out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Few-shot adaptation of contrastive vision-language classifiers"};
  app.require_subcommand(1);

  std::string config_path, out, seeds, only;
  bool quiet = false;
  auto* run = app.add_subcommand("run", "Run an experiment grid");
  run->add_option("--config", config_path, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  run->add_option("--out", out, "Output directory (overrides the config)");
  run->add_option("--seeds", seeds, "Comma-separated seeds (overrides the config)");
  run->add_option("--only", only, "Cell filter, e.g. backbone=toy,strategy=lora,shots=8");
  run->add_flag("--quiet", quiet, "No per-trial progress");

  std::string records;
  bool table = false, roc = false, boxplot = false;
  auto* report = app.add_subcommand("report", "Emit tables and plot data from records");
  report->add_option("--records", records, "Run directory")->required()->check(CLI::ExistingDirectory);
  report->add_flag("--table", table, "results.csv and results_pivot.csv");
  report->add_flag("--roc", roc, "Per-trial ROC curves");
  report->add_flag("--boxplot", boxplot, "True-class probability box statistics");

  std::string verify_dir;
  auto* ver = app.add_subcommand("verify", "Re-check checkpoints and invariants of a run");
  ver->add_option("--records", verify_dir, "Run directory")->required()->check(CLI::ExistingDirectory);

  std::string annotations, slides, patch_out;
  int margin = 50;
  auto* ingest = app.add_subcommand("ingest", "Cut square patches from slides");
  ingest->add_option("--annotations", annotations, "Annotation JSONL")->required()->check(CLI::ExistingFile);
  ingest->add_option("--slides", slides, "Directory of <slide_id>.png")->required()->check(CLI::ExistingDirectory);
  ingest->add_option("--out", patch_out, "Patch output directory")->required();
  ingest->add_option("--margin", margin, "Context margin in pixels")->check(CLI::NonNegativeNumber);

  std::string synth_out;
  int n_per_class = 100, side = 32;
  std::uint64_t synth_seed = 7;
  auto* synth = app.add_subcommand("synth", "Write a synthetic patch set");
  synth->add_option("--out", synth_out, "Patch output directory")->required();
  synth->add_option("--n-per-class", n_per_class, "Samples per class");
  synth->add_option("--side", side, "Image side in pixels");
  synth->add_option("--seed", synth_seed, "Generator seed");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*run) return cmd_run(config_path, out, seeds, only, quiet);
    if (*report) return cmd_report(records, table, roc, boxplot);
    if (*ver) return cmd_verify(verify_dir);
    if (*ingest) return cmd_ingest(annotations, slides, patch_out, margin);
    if (*synth) return cmd_synth(synth_out, n_per_class, side, synth_seed);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}
