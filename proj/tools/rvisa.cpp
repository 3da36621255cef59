// Command-line driver: rvisa <ingest|generate|build|train|search|eval|report> --config run.toml

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "rvisa/pipeline.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Three-hop rationale generation and multi-task fine-tuning pipeline"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::string run_id;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;
  app.add_option("--config", config_path, "pipeline TOML file")->required();
  app.add_option("--run-id", run_id, "run directory name (default: hash of the effective config)");
  app.add_option("--seed", seed, "top-level seed; sub-seeds inherit it unless set");
  app.add_option("--set", overrides, "override a config key, e.g. --set train.epochs=2");

  bool validate_only = false;
  auto* ingest = app.add_subcommand("ingest", "convert sources into the canonical dataset");
  ingest->add_flag("--validate-only", validate_only, "check inputs without writing files");
  auto* generate = app.add_subcommand("generate", "generate and verify rationales");
  auto* build = app.add_subcommand("build", "assemble the multi-task training set");
  auto* train = app.add_subcommand("train", "fine-tune with the combined loss");
  auto* search = app.add_subcommand("search", "grid search over loss weights");
  std::string slice = "both";
  auto* eval = app.add_subcommand("eval", "evaluate the best checkpoint on the test split");
  eval->add_option("--slice", slice, "all, isa or both")->check(CLI::IsMember({"all", "isa", "both"}));
  auto* report = app.add_subcommand("report", "write tables and curves for a finished run");

  CLI11_PARSE(app, argc, argv);

  return rvisa::run_command(
      [&]() -> int {
        const auto cfg = rvisa::load_pipeline_config(
            config_path, overrides, run_id.empty() ? std::nullopt : std::optional<std::string>(run_id), seed);
        std::cout << "run: " << (cfg.output_dir / cfg.run_id).string() << '\n';
        if (ingest->parsed()) return rvisa::cmd_ingest(cfg, validate_only, std::cout);
        if (generate->parsed()) return rvisa::cmd_generate(cfg, std::cout);
        if (build->parsed()) return rvisa::cmd_build(cfg, std::cout);
        if (train->parsed()) return rvisa::cmd_train(cfg, std::cout);
        if (search->parsed()) return rvisa::cmd_search(cfg, std::cout);
        if (eval->parsed()) {
          auto which = slice == "all"   ? rvisa::SliceSelection::all
                       : slice == "isa" ? rvisa::SliceSelection::isa
                                        : rvisa::SliceSelection::both;
          return rvisa::cmd_eval(cfg, which, std::cout);
        }
        if (report->parsed()) return rvisa::cmd_report(cfg, std::cout);
        return 1;
      },
      std::cerr);
}
