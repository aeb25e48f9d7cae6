// Command-line front end for the detection pipeline.

#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "ucan/errors.hpp"
#include "ucan/pipeline.hpp"

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kData = 3, kConvergence = 4 };

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool quiet = false;
};

ucan::RunConfig resolve(const Common& c) {
  ucan::RunConfig cfg = c.config.empty() ? ucan::RunConfig{} : ucan::load_config(c.config);
  if (const char* env = std::getenv("UCAN_OUT_DIR"); env && *env) cfg.out_dir = env;
  if (!c.out.empty()) cfg.out_dir = c.out;
  if (c.seed) cfg.seeds = {*c.seed};
  cfg.validate();
  return cfg;
}

void for_each_seed(const Common& c, const std::function<void(const ucan::StageContext&)>& stage) {
  const auto cfg = resolve(c);
  for (auto seed : cfg.seeds) stage(ucan::make_context(cfg, seed, c.quiet ? nullptr : &std::cerr));
}

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "Run configuration (INI)")->check(CLI::ExistingFile);
  app->add_option("--seed", c.seed, "Run a single seed, overriding run.seeds");
  app->add_option("--out", c.out, "Output directory, overriding run.out_dir");
  app->add_flag("-q,--quiet", c.quiet, "No progress output");
}

void write_file(const std::filesystem::path& p, const std::string& text) {
  std::filesystem::create_directories(p.parent_path().empty() ? "." : p.parent_path());
  std::ofstream(p, std::ios::binary) << text;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adversarial example detection with refined layer embeddings"};
  app.require_subcommand(1);
  Common common;

  struct Command {
    const char* name;
    const char* help;
    std::function<void()> run;
  };
  const std::vector<Command> commands{
      {"gen-data", "Generate (or ingest) and split the dataset",
       [&] { for_each_seed(common, ucan::stage_gen_data); }},
      {"train-backbone", "Train and freeze the backbone classifier",
       [&] { for_each_seed(common, ucan::stage_train_backbone); }},
      {"train-aux", "Train the auxiliary blocks on the frozen backbone",
       [&] { for_each_seed(common, ucan::stage_train_aux); }},
      {"select-layers", "Score layers on validation data and pick the layer set",
       [&] { for_each_seed(common, [](const ucan::StageContext& c) { ucan::stage_select_layers(c); }); }},
      {"attack", "Craft PGD and C&W batches on the test split",
       [&] { for_each_seed(common, ucan::stage_attack); }},
      {"build-detector", "Fit detectors (and adaptive batches against DKNN)",
       [&] { for_each_seed(common, ucan::stage_build_detectors); }},
      {"evaluate", "Run the detector x attack grid",
       [&] { for_each_seed(common, [](const ucan::StageContext& c) { ucan::stage_evaluate(c); }); }},
      {"report", "Overhead table and the cross-seed summary",
       [&] {
         const auto cfg = resolve(common);
         std::vector<std::pair<std::uint64_t, ucan::EvalReport>> runs;
         for (auto seed : cfg.seeds) {
           const auto ctx = ucan::make_context(cfg, seed, common.quiet ? nullptr : &std::cerr);
           ucan::stage_report(ctx);
           runs.emplace_back(seed, ucan::read_report_json(ctx.paths.eval_dir() / "report.json"));
         }
         write_file(cfg.out_dir / "summary.csv", ucan::summary_csv(runs));
       }},
      {"bench", "Per-batch detection latency",
       [&] { for_each_seed(common, [](const ucan::StageContext& c) { ucan::stage_bench(c); }); }},
      {"pipeline", "Every stage from gen-data to report",
       [&] {
         const auto cfg = resolve(common);
         std::vector<std::pair<std::uint64_t, ucan::EvalReport>> runs;
         for (auto seed : cfg.seeds) {
           runs.emplace_back(seed, ucan::run_pipeline(ucan::make_context(cfg, seed, common.quiet ? nullptr : &std::cerr)));
         }
         write_file(cfg.out_dir / "summary.csv", ucan::summary_csv(runs));
       }},
  };

  std::function<void()> selected;
  for (const auto& cmd : commands) {
    auto* sub = app.add_subcommand(cmd.name, cmd.help);
    add_common(sub, common);
    sub->callback([&selected, run = cmd.run] { selected = run; });
  }
  bool dump = false;
  auto* cfg_cmd = app.add_subcommand("config", "Print the effective configuration");
  add_common(cfg_cmd, common);
  cfg_cmd->callback([&] { dump = true; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (dump) {
      std::cout << ucan::dump_config(resolve(common));
      return kOk;
    }
    selected();
    return kOk;
  } catch (const ucan::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const ucan::ConvergenceError& e) {
    std::cerr << "convergence error: " << e.what() << " (residual " << e.residual() << ")\n";
    return kConvergence;
  } catch (const ucan::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const ucan::ResolutionError& e) {
    std::cerr << "missing artifact '" << e.artifact() << "': " << e.what() << "\n";
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
}
