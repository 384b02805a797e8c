#ifndef SPIKMAMBA_CLI_HPP
#define SPIKMAMBA_CLI_HPP

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "spikmamba/events.hpp"
#include "spikmamba/model.hpp"
#include "spikmamba/train.hpp"

namespace spikmamba::cli {

// [data] section: either manifest paths or a synthetic-generation spec.
struct DataConfig {
  int t_bins = 8;
  int height = 64;
  int width = 64;
  std::string train_manifest;
  std::string eval_manifest;
  bool synthetic = true;
  std::vector<MotionClass> classes{MotionClass::up, MotionClass::down, MotionClass::left,
                                   MotionClass::right};
  int n_per_class = 16;
  int eval_per_class = 8;
  std::uint64_t duration_us = 100000;
  double event_rate_hz = 20000;
  double noise_rate_hz = 1000;
  std::uint32_t sensor_h = 64;
  std::uint32_t sensor_w = 64;
};

// [train] section.
struct TrainSection {
  int epochs = 100;
  int batch_size = 32;
  double lr_max = 1e-5;
  double lr_min = 1e-6;
  int lr_epochs = 0;  // cosine horizon; 0 -> epochs
  double weight_decay = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 0.0;
  double stop_train_acc = -1.0;
  double stop_eval_acc = -1.0;
  bool calibrate = true;
};

struct RunConfig {
  ModelConfig model;
  TrainSection train;
  DataConfig data;
  std::string out_dir = "runs/default";
  std::optional<std::uint64_t> seed;
  int threads = 1;
};

// Strict INI-style parsing: `[section]` headers and `key = value` lines;
// '#' starts a comment. Unknown sections or keys are fatal.
RunConfig parse_config_file(const std::string& path);
RunConfig parse_config_text(const std::string& text, const std::string& origin = "<config>");

// Canonical echo of the effective config; parse_config_text(render_config(c))
// reproduces c.
std::string render_config(const RunConfig& cfg);

// Dataset manifest: JSON lines {"path": ..., "label": int}; paths relative to
// the manifest location. Event format chosen by extension (.csv, else binary).
std::vector<Sample> load_manifest_dataset(const std::string& manifest_path, int t_bins, int h,
                                          int w);

// Subcommand bodies; each returns a process exit code.
int cmd_synth(const RunConfig& cfg, bool force);
int cmd_train(RunConfig cfg);
int cmd_eval(const std::string& checkpoint_path, const std::string& manifest_path, int threads);
int cmd_count(const RunConfig& cfg, const std::string& preset = "");
int cmd_export_attention(const std::string& checkpoint_path, const std::string& event_path,
                         const std::string& out_dir);

// 8-bit PGM (P5) writer used by the attention exporter.
void write_pgm(const std::string& path, const std::vector<std::uint8_t>& pixels, int width,
               int height);

}  // namespace spikmamba::cli

#endif  // SPIKMAMBA_CLI_HPP
