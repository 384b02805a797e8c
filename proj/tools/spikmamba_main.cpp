// spikmamba command-line entry point: synth, train, eval, count,
// export-attention. Every run is driven by an INI config plus a seed; see the
// README for the schema.

#include <cstdio>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "spikmamba/cli.hpp"

using namespace spikmamba;

namespace {

struct CommonArgs {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  int threads = 0;  // 0: take the config's value
  std::string out_dir;
};

cli::RunConfig load_config(const CommonArgs& args, bool config_required) {
  cli::RunConfig cfg;
  if (!args.config_path.empty()) {
    cfg = cli::parse_config_file(args.config_path);
  } else if (config_required) {
    throw ConfigError("--config is required for this command");
  }
  if (args.seed) cfg.seed = args.seed;
  if (args.threads > 0) cfg.threads = args.threads;
  if (!args.out_dir.empty()) cfg.out_dir = args.out_dir;
  return cfg;
}

void add_common(CLI::App* cmd, CommonArgs& args, bool need_config) {
  auto* opt = cmd->add_option("--config", args.config_path, "run configuration file (INI)");
  if (need_config) opt->required();
  cmd->add_option("--seed", args.seed, "seed overriding the config's [run] seed");
  cmd->add_option("--threads", args.threads,
                  "worker threads for matmul row partitions (1 = deterministic mode)");
  cmd->add_option("--out", args.out_dir, "output directory overriding [run] out_dir");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SpikMamba: spiking windowed linear attention + selective state space "
               "training engine for event-camera action recognition"};
  app.require_subcommand(1);

  CommonArgs synth_args, train_args, count_args;
  bool synth_force = false;
  std::string count_preset;
  std::string eval_ckpt, eval_manifest, export_ckpt, export_events, export_out;
  int eval_threads = 1;

  CLI::App* synth = app.add_subcommand("synth", "generate a labeled synthetic event dataset");
  add_common(synth, synth_args, true);
  synth->add_flag("--force", synth_force, "overwrite a non-empty output directory");

  CLI::App* train = app.add_subcommand("train", "train a model and write checkpoints + log");
  add_common(train, train_args, true);

  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset manifest");
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  eval->add_option("--data", eval_manifest, "dataset manifest (JSON lines)")->required();
  eval->add_option("--threads", eval_threads, "worker threads (1 = deterministic mode)");

  CLI::App* count = app.add_subcommand("count", "report parameter count and forward GFLOPs");
  add_common(count, count_args, false);
  count->add_option("--preset", count_preset, "desk | paper | tiny; `paper` also prints the "
                    "reported full-scale figures next to the computed ones")
      ->check(CLI::IsMember({"desk", "paper", "tiny"}));

  CLI::App* exp = app.add_subcommand("export-attention",
                                     "write per-frame attention maps as 8-bit PGM images");
  exp->add_option("--checkpoint", export_ckpt, "checkpoint file")->required();
  exp->add_option("--events", export_events, "event file (.csv or binary)")->required();
  exp->add_option("--out", export_out, "output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) return cli::cmd_synth(load_config(synth_args, true), synth_force);
    if (train->parsed()) return cli::cmd_train(load_config(train_args, true));
    if (eval->parsed()) return cli::cmd_eval(eval_ckpt, eval_manifest, eval_threads);
    if (count->parsed()) return cli::cmd_count(load_config(count_args, false), count_preset);
    if (exp->parsed()) return cli::cmd_export_attention(export_ckpt, export_events, export_out);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
