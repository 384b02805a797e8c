#ifndef SPIKMAMBA_EVENTS_HPP
#define SPIKMAMBA_EVENTS_HPP

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "spikmamba/tensor.hpp"

namespace spikmamba {

// One brightness-change record from an event camera.
struct Event {
  std::uint64_t t = 0;  // microseconds
  std::uint16_t x = 0;  // column
  std::uint16_t y = 0;  // row
  std::int8_t p = 1;    // polarity, -1 or +1
};

struct EventStream {
  std::uint32_t sensor_h = 0;
  std::uint32_t sensor_w = 0;
  std::vector<Event> events;  // non-decreasing t
  std::optional<int> label;

  bool sorted() const;
};

enum class EventFormat { csv, binary };

// CSV: header-less `t,x,y,p` rows. The sensor size is taken from
// `sensor_hint` when given, otherwise inferred as the tight bounding box.
// Binary: "EVS1" magic, LE u32 H, u32 W, u64 count, then (u64 t, u16 x,
// u16 y, i8 p) records. Events are sorted on load (stable for equal t).
EventStream load_events(const std::string& path, EventFormat format,
                        std::optional<std::pair<std::uint32_t, std::uint32_t>> sensor_hint = {});
void save_events(const EventStream& stream, const std::string& path, EventFormat format);

// The 3 x T x H x W frame representation fed to the model: channel 0/1 are
// max-normalized positive/negative counts per (bin, pixel); channel 2 is the
// within-bin last-event time at each pixel, normalized over the stream span.
// Sensors larger than (h, w) are reduced by integer-factor pixel binning.
Tensor to_frames(const EventStream& stream, int t_bins, int h, int w, DType dt = DType::F32);

enum class MotionClass { up, down, left, right };
const char* motion_class_name(MotionClass c);

struct SyntheticSpec {
  std::vector<MotionClass> classes{MotionClass::up, MotionClass::down, MotionClass::left,
                                   MotionClass::right};
  std::uint64_t duration_us = 100000;
  double event_rate_hz = 50000;  // signal events per second per edge
  double noise_rate_hz = 0;      // uniform background events per second
  std::uint32_t sensor_h = 64;
  std::uint32_t sensor_w = 64;
  std::uint64_t seed = 0;

  void validate() const;
};

// Labeled moving-bar streams: positive events on the leading edge, negative
// on the trailing edge, plus uniform Poisson noise. Deterministic per seed.
std::vector<EventStream> synth_generate(const SyntheticSpec& spec, int n_per_class);

// Frame tensor + label pairs ready for batching.
struct Sample {
  Tensor frames;  // (3, T, H, W)
  int label = 0;
};

struct Batch {
  Tensor frames;  // (B, 3, T, H, W)
  std::vector<int> labels;
};

// Deterministic per-epoch shuffling batcher; the last partial batch is kept.
class DatasetBatcher {
 public:
  DatasetBatcher(std::vector<Sample> samples, int batch_size, std::uint64_t shuffle_seed);
  std::vector<Batch> epoch(int epoch_index) const;
  std::size_t size() const { return samples_.size(); }
  int batch_size() const { return batch_size_; }

 private:
  std::vector<Sample> samples_;
  int batch_size_;
  std::uint64_t seed_;
};

// Stacks samples into one (B, 3, T, H, W) batch.
Batch stack_samples(const std::vector<Sample>& samples, const std::vector<std::size_t>& indices);

}  // namespace spikmamba

#endif  // SPIKMAMBA_EVENTS_HPP
