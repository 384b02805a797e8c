#ifndef SPIKMAMBA_TRAIN_HPP
#define SPIKMAMBA_TRAIN_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "spikmamba/events.hpp"
#include "spikmamba/model.hpp"
#include "spikmamba/tensor.hpp"

namespace spikmamba {

// Mean over the batch of -log softmax(logits)[label], max-stabilized.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 2e-4;  // decoupled: theta <- theta - lr*wd*theta
};

// Adam with decoupled weight decay. Moments live in the parameter dtype;
// the step consumes populated gradients (missing grad is a contract error)
// and leaves them untouched for the caller to zero.
class Adam {
 public:
  explicit Adam(std::vector<Parameter> params, AdamConfig cfg = {});
  void step(double lr);
  void zero_grad();
  std::int64_t step_count() const { return step_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  std::vector<Parameter> params_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  AdamConfig cfg_;
  std::int64_t step_ = 0;
};

struct LrSchedule {
  double eta_max = 1e-5;
  double eta_min = 1e-6;
  int total_epochs = 100;
};

// lr(e) = eta_min + (eta_max - eta_min) * (1 + cos(pi * e / E)) / 2,
// clamped to eta_min past the horizon.
double cosine_lr(int epoch, const LrSchedule& s);

struct EpochRecord {
  int epoch = 0;
  double lr = 0;
  double train_loss = 0;
  double train_acc = 0;
  double eval_acc = 0;  // NaN when no eval split
  double seconds = 0;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  std::string best_checkpoint;
  std::string last_checkpoint;
  std::string log_path;
};

struct TrainOptions {
  int epochs = 100;
  int batch_size = 32;
  std::uint64_t seed = 0;
  LrSchedule schedule;
  AdamConfig adam;
  double grad_clip = 0.0;        // global L2 clip; 0 disables
  double stop_train_acc = -1.0;  // early stop once both thresholds hold (>= 0 enables)
  double stop_eval_acc = -1.0;
  std::string out_dir;  // empty: no checkpoints or log file written
  bool verbose = false;
};

// Shuffle, batch, forward/backward/step per epoch; evaluates on the held-out
// split, appends one JSON line per epoch, keeps best- and last-accuracy
// checkpoints. Aborts with a diagnostic naming the epoch/batch/step on a
// non-finite loss.
TrainReport train_loop(SpikMambaModel& model, const std::vector<Sample>& train_set,
                       const std::vector<Sample>& eval_set, const TrainOptions& opts);

// Top-1 accuracy in eval mode; no parameter or BN mutation, no recording.
double evaluate(SpikMambaModel& model, const std::vector<Sample>& dataset, int batch_size = 32);

std::string epoch_record_to_json(const EpochRecord& r);

}  // namespace spikmamba

#endif  // SPIKMAMBA_TRAIN_HPP
