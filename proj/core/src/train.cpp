#include "spikmamba/train.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "kernel_utils.hpp"

namespace spikmamba {

using detail::i64;

namespace {

template <typename T>
void ce_forward(const Tensor& logits, const std::vector<int>& labels, Tensor& loss,
                std::vector<T>& probs) {
  i64 b = logits.dim(0), c = logits.dim(1);
  const T* z = logits.data<T>();
  probs.resize(static_cast<std::size_t>(b * c));
  double total = 0;
  for (i64 i = 0; i < b; ++i) {
    const T* row = z + i * c;
    double mx = row[0];
    for (i64 j = 1; j < c; ++j) mx = std::max<double>(mx, row[j]);
    double sum = 0;
    for (i64 j = 0; j < c; ++j) sum += std::exp(static_cast<double>(row[j]) - mx);
    double lse = mx + std::log(sum);
    for (i64 j = 0; j < c; ++j) {
      probs[static_cast<std::size_t>(i * c + j)] =
          static_cast<T>(std::exp(static_cast<double>(row[j]) - lse));
    }
    total += lse - static_cast<double>(row[labels[static_cast<std::size_t>(i)]]);
  }
  if (loss.dtype() == DType::F32) {
    loss.data<float>()[0] = static_cast<float>(total / static_cast<double>(b));
  } else {
    loss.data<double>()[0] = total / static_cast<double>(b);
  }
}

template <typename T>
void ce_backward(Tensor& logits, const std::vector<int>& labels, Tensor& loss,
                 const std::vector<T>& probs) {
  i64 b = logits.dim(0), c = logits.dim(1);
  T gy = loss.grad_data<T>()[0];
  T* gz = logits.grad_data<T>();
  T inv_b = static_cast<T>(1.0 / static_cast<double>(b));
  for (i64 i = 0; i < b; ++i) {
    int label = labels[static_cast<std::size_t>(i)];
    for (i64 j = 0; j < c; ++j) {
      T p = probs[static_cast<std::size_t>(i * c + j)];
      T onehot = j == label ? T(1) : T(0);
      gz[i * c + j] += gy * inv_b * (p - onehot);
    }
  }
}

}  // namespace

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.ndim() != 2) {
    throw ShapeError("cross_entropy expects (B, C) logits, got " + shape_str(logits.shape()));
  }
  i64 b = logits.dim(0), c = logits.dim(1);
  if (static_cast<i64>(labels.size()) != b) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch " +
                     std::to_string(b));
  }
  for (int label : labels) {
    if (label < 0 || label >= c) {
      throw ValidationError("label " + std::to_string(label) + " outside [0, " +
                            std::to_string(c) + ")");
    }
  }
  Tensor loss = Tensor::zeros({1}, logits.dtype());
  if (logits.dtype() == DType::F32) {
    auto probs = std::make_shared<std::vector<float>>();
    ce_forward<float>(logits, labels, loss, *probs);
    if (detail::wants_grad({&logits})) {
      loss.set_requires_grad(true);
      Tensor lc = logits, oc = loss;
      Tape::active()->record([lc, oc, labels, probs]() mutable {
        if (!oc.has_grad()) return;
        ce_backward<float>(lc, labels, oc, *probs);
      });
    }
  } else {
    auto probs = std::make_shared<std::vector<double>>();
    ce_forward<double>(logits, labels, loss, *probs);
    if (detail::wants_grad({&logits})) {
      loss.set_requires_grad(true);
      Tensor lc = logits, oc = loss;
      Tape::active()->record([lc, oc, labels, probs]() mutable {
        if (!oc.has_grad()) return;
        ce_backward<double>(lc, labels, oc, *probs);
      });
    }
  }
  return loss;
}

Adam::Adam(std::vector<Parameter> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  for (const auto& p : params_) {
    m_.push_back(Tensor::zeros(p.tensor.shape(), p.tensor.dtype()));
    v_.push_back(Tensor::zeros(p.tensor.shape(), p.tensor.dtype()));
  }
}

namespace {

template <typename T>
void adam_step_kernel(Tensor& theta, Tensor& m, Tensor& v, double lr, const AdamConfig& cfg,
                      double bc1, double bc2) {
  i64 n = theta.numel();
  T* pt = theta.data<T>();
  const T* g = theta.grad_data<T>();
  T* pm = m.data<T>();
  T* pv = v.data<T>();
  for (i64 i = 0; i < n; ++i) {
    double gi = g[i];
    double mi = cfg.beta1 * pm[i] + (1.0 - cfg.beta1) * gi;
    double vi = cfg.beta2 * pv[i] + (1.0 - cfg.beta2) * gi * gi;
    pm[i] = static_cast<T>(mi);
    pv[i] = static_cast<T>(vi);
    double mhat = mi / bc1;
    double vhat = vi / bc2;
    double value = pt[i];
    value -= lr * cfg.weight_decay * value;  // decoupled decay
    value -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
    pt[i] = static_cast<T>(value);
  }
}

template <typename T>
double grad_sq_norm(Tensor& t) {
  const T* g = t.grad_data<T>();
  double acc = 0;
  for (i64 i = 0; i < t.numel(); ++i) acc += static_cast<double>(g[i]) * g[i];
  return acc;
}

template <typename T>
void scale_grad(Tensor& t, double factor) {
  T* g = t.grad_data<T>();
  for (i64 i = 0; i < t.numel(); ++i) g[i] = static_cast<T>(g[i] * factor);
}

}  // namespace

void Adam::step(double lr) {
  for (const auto& p : params_) {
    if (!p.tensor.has_grad()) {
      throw ContractError("adam step: parameter '" + p.name + "' has no gradient");
    }
  }
  ++step_;
  double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
  double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& t = params_[i].tensor;
    if (t.dtype() == DType::F32) {
      adam_step_kernel<float>(t, m_[i], v_[i], lr, cfg_, bc1, bc2);
    } else {
      adam_step_kernel<double>(t, m_[i], v_[i], lr, cfg_, bc1, bc2);
    }
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

double cosine_lr(int epoch, const LrSchedule& s) {
  if (epoch < 0) throw ConfigError("epoch must be >= 0");
  if (epoch >= s.total_epochs) return s.eta_min;
  double phase = M_PI * static_cast<double>(epoch) / static_cast<double>(s.total_epochs);
  return s.eta_min + 0.5 * (s.eta_max - s.eta_min) * (1.0 + std::cos(phase));
}

namespace {

void clip_gradients(std::vector<Parameter>& params, double clip) {
  double sq = 0;
  for (auto& p : params) {
    sq += p.tensor.dtype() == DType::F32 ? grad_sq_norm<float>(p.tensor)
                                         : grad_sq_norm<double>(p.tensor);
  }
  double norm = std::sqrt(sq);
  if (norm > clip && norm > 0) {
    double factor = clip / norm;
    for (auto& p : params) {
      if (p.tensor.dtype() == DType::F32) {
        scale_grad<float>(p.tensor, factor);
      } else {
        scale_grad<double>(p.tensor, factor);
      }
    }
  }
}

int argmax_row(const Tensor& logits, i64 row) {
  i64 c = logits.dim(1);
  int best = 0;
  double best_v = logits.at(row * c);
  for (i64 j = 1; j < c; ++j) {
    double v = logits.at(row * c + j);
    if (v > best_v) {
      best_v = v;
      best = static_cast<int>(j);
    }
  }
  return best;
}

}  // namespace

std::string epoch_record_to_json(const EpochRecord& r) {
  nlohmann::json j;
  j["epoch"] = r.epoch;
  j["lr"] = r.lr;
  j["train_loss"] = r.train_loss;
  j["train_acc"] = r.train_acc;
  if (std::isnan(r.eval_acc)) {
    j["eval_acc"] = nullptr;
  } else {
    j["eval_acc"] = r.eval_acc;
  }
  j["seconds"] = r.seconds;
  return j.dump();
}

double evaluate(SpikMambaModel& model, const std::vector<Sample>& dataset, int batch_size) {
  if (dataset.empty()) throw ContractError("evaluate: empty dataset");
  if (batch_size < 1) throw ConfigError("evaluate: batch size must be >= 1");
  NoGradScope ng;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < dataset.size();
       start += static_cast<std::size_t>(batch_size)) {
    std::size_t end = std::min(dataset.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < end; ++i) idx.push_back(i);
    Batch batch = stack_samples(dataset, idx);
    Tensor logits = model.forward(batch.frames, false);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      if (argmax_row(logits, static_cast<i64>(i)) == batch.labels[i]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(dataset.size());
}

TrainReport train_loop(SpikMambaModel& model, const std::vector<Sample>& train_set,
                       const std::vector<Sample>& eval_set, const TrainOptions& opts) {
  if (train_set.empty()) throw ContractError("train_loop: empty dataset");
  TrainReport report;
  bool persist = !opts.out_dir.empty();
  std::ofstream log;
  if (persist) {
    std::filesystem::create_directories(opts.out_dir);
    report.log_path = opts.out_dir + "/train_log.jsonl";
    report.last_checkpoint = opts.out_dir + "/last.ckpt";
    report.best_checkpoint = opts.out_dir + "/best.ckpt";
    log.open(report.log_path, std::ios::trunc);
    if (!log) throw IoError("cannot write " + report.log_path);
    save_checkpoint(model, report.last_checkpoint);  // initial state
  }

  DatasetBatcher batcher(train_set, opts.batch_size, opts.seed);
  Adam adam(model.active_parameters(), opts.adam);
  double best_metric = -1.0;
  i64 global_step = 0;

  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    auto t0 = std::chrono::steady_clock::now();
    double lr = cosine_lr(epoch, opts.schedule);
    double loss_sum = 0;
    std::size_t seen = 0, correct = 0;
    auto batches = batcher.epoch(epoch);
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      Batch& batch = batches[bi];
      Tape tape;
      Tensor loss;
      Tensor logits;
      {
        TapeScope scope(tape);
        logits = model.forward(batch.frames, true);
        loss = cross_entropy(logits, batch.labels);
        double lv = loss.item();
        if (!std::isfinite(lv)) {
          throw Error("non-finite loss " + std::to_string(lv) + " at epoch " +
                      std::to_string(epoch) + ", batch " + std::to_string(bi) + ", step " +
                      std::to_string(global_step));
        }
        tape.backward(loss);
      }
      auto params = model.active_parameters();
      if (opts.grad_clip > 0) clip_gradients(params, opts.grad_clip);
      adam.step(lr);
      adam.zero_grad();
      ++global_step;
      loss_sum += loss.item() * static_cast<double>(batch.labels.size());
      for (std::size_t i = 0; i < batch.labels.size(); ++i) {
        if (argmax_row(logits, static_cast<i64>(i)) == batch.labels[i]) ++correct;
      }
      seen += batch.labels.size();
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.train_loss = loss_sum / static_cast<double>(seen);
    rec.train_acc = static_cast<double>(correct) / static_cast<double>(seen);
    rec.eval_acc = eval_set.empty() ? std::nan("") : evaluate(model, eval_set, opts.batch_size);
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    report.epochs.push_back(rec);

    if (persist) {
      log << epoch_record_to_json(rec) << '\n';
      log.flush();
      save_checkpoint(model, report.last_checkpoint);
      double metric = eval_set.empty() ? rec.train_acc : rec.eval_acc;
      if (metric > best_metric) {
        best_metric = metric;
        save_checkpoint(model, report.best_checkpoint);
      }
    }
    if (opts.verbose) {
      std::string line = epoch_record_to_json(rec);
      std::fputs(line.c_str(), stdout);
      std::fputc('\n', stdout);
      std::fflush(stdout);
    }
    if (opts.stop_train_acc >= 0 && rec.train_acc >= opts.stop_train_acc &&
        (opts.stop_eval_acc < 0 ||
         (!std::isnan(rec.eval_acc) && rec.eval_acc >= opts.stop_eval_acc))) {
      break;
    }
  }
  return report;
}

}  // namespace spikmamba
