#include "spikmamba/events.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

namespace spikmamba {

bool EventStream::sorted() const {
  for (std::size_t i = 1; i < events.size(); ++i) {
    if (events[i - 1].t > events[i].t) return false;
  }
  return true;
}

namespace {

void validate_coords(const EventStream& s, const std::string& path) {
  for (std::size_t i = 0; i < s.events.size(); ++i) {
    const Event& e = s.events[i];
    if (e.x >= s.sensor_w || e.y >= s.sensor_h) {
      throw ValidationError("event " + std::to_string(i) + " in " + path + " at (" +
                            std::to_string(e.x) + "," + std::to_string(e.y) +
                            ") outside sensor " + std::to_string(s.sensor_w) + "x" +
                            std::to_string(s.sensor_h));
    }
    if (e.p != 1 && e.p != -1) {
      throw ValidationError("event " + std::to_string(i) + " in " + path + " has polarity " +
                            std::to_string(static_cast<int>(e.p)));
    }
  }
}

EventStream load_csv(const std::string& path,
                     std::optional<std::pair<std::uint32_t, std::uint32_t>> sensor_hint) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  EventStream s;
  std::string line;
  std::size_t line_no = 0;
  std::uint32_t max_x = 0, max_y = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    long long t, x, y, p;
    char c1, c2, c3;
    std::istringstream ls(line);
    if (!(ls >> t >> c1 >> x >> c2 >> y >> c3 >> p) || c1 != ',' || c2 != ',' || c3 != ',') {
      throw ParseError(path + ":" + std::to_string(line_no) + ": expected `t,x,y,p`, got \"" +
                       line + "\"");
    }
    std::string rest;
    if (ls >> rest) {
      throw ParseError(path + ":" + std::to_string(line_no) + ": trailing content \"" + rest +
                       "\"");
    }
    if (t < 0 || x < 0 || y < 0 || x > 0xFFFF || y > 0xFFFF || (p != 1 && p != -1)) {
      throw ParseError(path + ":" + std::to_string(line_no) + ": value out of range");
    }
    s.events.push_back(Event{static_cast<std::uint64_t>(t), static_cast<std::uint16_t>(x),
                             static_cast<std::uint16_t>(y), static_cast<std::int8_t>(p)});
    max_x = std::max<std::uint32_t>(max_x, static_cast<std::uint32_t>(x));
    max_y = std::max<std::uint32_t>(max_y, static_cast<std::uint32_t>(y));
  }
  if (sensor_hint) {
    s.sensor_h = sensor_hint->first;
    s.sensor_w = sensor_hint->second;
  } else {
    s.sensor_h = s.events.empty() ? 0 : max_y + 1;
    s.sensor_w = s.events.empty() ? 0 : max_x + 1;
  }
  return s;
}

template <typename T>
void read_le(std::istream& in, T& v, const std::string& path) {
  unsigned char buf[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(buf), sizeof(T))) throw IoError("short read in " + path);
  std::uint64_t acc = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) acc |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  std::memcpy(&v, &acc, sizeof(T));
}

template <typename T>
void write_le(std::ostream& out, T v) {
  std::uint64_t acc = 0;
  std::memcpy(&acc, &v, sizeof(T));
  unsigned char buf[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<unsigned char>(acc >> (8 * i));
  out.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

EventStream load_binary(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "EVS1", 4) != 0) {
    throw ParseError(path + ": bad magic, expected EVS1");
  }
  EventStream s;
  std::uint64_t count;
  read_le(in, s.sensor_h, path);
  read_le(in, s.sensor_w, path);
  read_le(in, count, path);
  s.events.resize(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    Event& e = s.events[i];
    read_le(in, e.t, path);
    read_le(in, e.x, path);
    read_le(in, e.y, path);
    std::uint8_t p;
    read_le(in, p, path);
    e.p = static_cast<std::int8_t>(p);
  }
  return s;
}

}  // namespace

EventStream load_events(const std::string& path, EventFormat format,
                        std::optional<std::pair<std::uint32_t, std::uint32_t>> sensor_hint) {
  EventStream s = format == EventFormat::csv ? load_csv(path, sensor_hint) : load_binary(path);
  std::stable_sort(s.events.begin(), s.events.end(),
                   [](const Event& a, const Event& b) { return a.t < b.t; });
  validate_coords(s, path);
  return s;
}

void save_events(const EventStream& stream, const std::string& path, EventFormat format) {
  if (format == EventFormat::csv) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    for (const Event& e : stream.events) {
      out << e.t << ',' << e.x << ',' << e.y << ',' << static_cast<int>(e.p) << '\n';
    }
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out.write("EVS1", 4);
  write_le(out, stream.sensor_h);
  write_le(out, stream.sensor_w);
  write_le(out, static_cast<std::uint64_t>(stream.events.size()));
  for (const Event& e : stream.events) {
    write_le(out, e.t);
    write_le(out, e.x);
    write_le(out, e.y);
    write_le(out, static_cast<std::uint8_t>(e.p));
  }
  if (!out) throw IoError("write failed for " + path);
}

Tensor to_frames(const EventStream& stream, int t_bins, int h, int w, DType dt) {
  if (t_bins < 1) throw ConfigError("to_frames needs t_bins >= 1");
  if (h < 1 || w < 1) throw ConfigError("to_frames needs positive output size");
  Tensor out = Tensor::zeros({3, t_bins, h, w}, dt);
  if (stream.events.empty()) return out;
  if (!stream.sorted()) throw ContractError("to_frames input stream is unsorted");

  std::uint32_t fy = 1, fx = 1;
  if (stream.sensor_h > static_cast<std::uint32_t>(h) ||
      stream.sensor_w > static_cast<std::uint32_t>(w)) {
    if (stream.sensor_h % static_cast<std::uint32_t>(h) ||
        stream.sensor_w % static_cast<std::uint32_t>(w)) {
      throw ShapeError("sensor " + std::to_string(stream.sensor_w) + "x" +
                       std::to_string(stream.sensor_h) + " is not an integer multiple of output " +
                       std::to_string(w) + "x" + std::to_string(h));
    }
    fy = stream.sensor_h / static_cast<std::uint32_t>(h);
    fx = stream.sensor_w / static_cast<std::uint32_t>(w);
  }

  std::uint64_t t_min = stream.events.front().t;
  std::uint64_t t_max = stream.events.back().t;
  std::uint64_t span = t_max - t_min;

  // Equal-width bins over [t_min, t_max]; the final instant folds into the
  // last bin. Each event lands in exactly one (bin, pixel) cell.
  std::vector<double> pos(static_cast<std::size_t>(t_bins) * static_cast<std::size_t>(h) *
                              static_cast<std::size_t>(w),
                          0.0);
  std::vector<double> neg(pos.size(), 0.0);
  std::vector<double> last(pos.size(), 0.0);
  for (const Event& e : stream.events) {
    std::uint64_t rel = e.t - t_min;
    std::int64_t bin = 0;
    if (span > 0) {
      bin = static_cast<std::int64_t>((static_cast<unsigned __int128>(rel) *
                                       static_cast<unsigned __int128>(t_bins)) /
                                      span);
      if (bin >= t_bins) bin = t_bins - 1;  // t == t_max
    }
    std::int64_t py = e.y / fy;
    std::int64_t px = e.x / fx;
    std::size_t idx = static_cast<std::size_t>((bin * h + py) * w + px);
    if (e.p > 0) {
      pos[idx] += 1.0;
    } else {
      neg[idx] += 1.0;
    }
    last[idx] = span ? static_cast<double>(rel) / static_cast<double>(span) : 0.0;
  }
  double max_pos = *std::max_element(pos.begin(), pos.end());
  double max_neg = *std::max_element(neg.begin(), neg.end());
  std::size_t plane = pos.size();
  auto store = [&](std::size_t channel, const std::vector<double>& src, double scale_v) {
    if (dt == DType::F32) {
      float* p = out.data<float>() + channel * plane;
      for (std::size_t i = 0; i < plane; ++i) p[i] = static_cast<float>(src[i] * scale_v);
    } else {
      double* p = out.data<double>() + channel * plane;
      for (std::size_t i = 0; i < plane; ++i) p[i] = src[i] * scale_v;
    }
  };
  store(0, pos, max_pos > 0 ? 1.0 / max_pos : 0.0);
  store(1, neg, max_neg > 0 ? 1.0 / max_neg : 0.0);
  store(2, last, 1.0);
  return out;
}

const char* motion_class_name(MotionClass c) {
  switch (c) {
    case MotionClass::up: return "up";
    case MotionClass::down: return "down";
    case MotionClass::left: return "left";
    case MotionClass::right: return "right";
  }
  return "?";
}

void SyntheticSpec::validate() const {
  if (classes.size() < 2) throw ConfigError("synthetic spec needs at least 2 classes");
  if (event_rate_hz < 0 || noise_rate_hz < 0) throw ConfigError("synthetic rates must be >= 0");
  if (duration_us == 0) throw ConfigError("synthetic duration must be positive");
  if (sensor_h < 4 || sensor_w < 4) throw ConfigError("synthetic sensor too small");
}

namespace {

// Bar sweep: at time fraction u in [0,1] the bar occupies `bar` rows or
// columns starting at floor(u * (extent - bar)). Positive events trace the
// edge facing the motion, negative events the opposite edge.
struct BarPose {
  std::uint16_t lead_x, lead_y, trail_x, trail_y;
};

BarPose bar_pose(MotionClass c, double u, std::uint32_t h, std::uint32_t w, std::uint32_t bar,
                 std::uint32_t cross) {
  BarPose p{};
  switch (c) {
    case MotionClass::right: {
      auto c0 = static_cast<std::uint32_t>(u * static_cast<double>(w - bar));
      p.lead_x = static_cast<std::uint16_t>(c0 + bar - 1);
      p.trail_x = static_cast<std::uint16_t>(c0);
      p.lead_y = p.trail_y = static_cast<std::uint16_t>(cross);
      break;
    }
    case MotionClass::left: {
      auto c0 = static_cast<std::uint32_t>(u * static_cast<double>(w - bar));
      p.lead_x = static_cast<std::uint16_t>(w - 1 - (c0 + bar - 1));
      p.trail_x = static_cast<std::uint16_t>(w - 1 - c0);
      p.lead_y = p.trail_y = static_cast<std::uint16_t>(cross);
      break;
    }
    case MotionClass::down: {
      auto r0 = static_cast<std::uint32_t>(u * static_cast<double>(h - bar));
      p.lead_y = static_cast<std::uint16_t>(r0 + bar - 1);
      p.trail_y = static_cast<std::uint16_t>(r0);
      p.lead_x = p.trail_x = static_cast<std::uint16_t>(cross);
      break;
    }
    case MotionClass::up: {
      auto r0 = static_cast<std::uint32_t>(u * static_cast<double>(h - bar));
      p.lead_y = static_cast<std::uint16_t>(h - 1 - (r0 + bar - 1));
      p.trail_y = static_cast<std::uint16_t>(h - 1 - r0);
      p.lead_x = p.trail_x = static_cast<std::uint16_t>(cross);
      break;
    }
  }
  return p;
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream_id) {
  // splitmix64 step keyed by stream id
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (stream_id + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

}  // namespace

std::vector<EventStream> synth_generate(const SyntheticSpec& spec, int n_per_class) {
  spec.validate();
  if (n_per_class < 1) throw ConfigError("synth_generate needs n_per_class >= 1 (empty dataset)");
  std::vector<EventStream> out;
  out.reserve(spec.classes.size() * static_cast<std::size_t>(n_per_class));
  std::uint32_t bar = std::max<std::uint32_t>(2, std::min(spec.sensor_h, spec.sensor_w) / 16);
  double dur_s = static_cast<double>(spec.duration_us) * 1e-6;
  auto n_signal = static_cast<std::uint64_t>(spec.event_rate_hz * dur_s);
  auto n_noise = static_cast<std::uint64_t>(spec.noise_rate_hz * dur_s);

  for (std::size_t ci = 0; ci < spec.classes.size(); ++ci) {
    MotionClass mc = spec.classes[ci];
    bool horizontal = mc == MotionClass::left || mc == MotionClass::right;
    std::uint32_t cross_extent = horizontal ? spec.sensor_h : spec.sensor_w;
    for (int k = 0; k < n_per_class; ++k) {
      std::mt19937_64 rng(mix_seed(spec.seed, ci * 1000003ull + static_cast<std::uint64_t>(k)));
      std::uniform_int_distribution<std::uint64_t> time_d(0, spec.duration_us - 1);
      std::uniform_int_distribution<std::uint32_t> cross_d(0, cross_extent - 1);
      EventStream s;
      s.sensor_h = spec.sensor_h;
      s.sensor_w = spec.sensor_w;
      s.label = static_cast<int>(ci);
      s.events.reserve(2 * n_signal + n_noise);
      for (std::uint64_t i = 0; i < n_signal; ++i) {
        std::uint64_t t = time_d(rng);
        double u = static_cast<double>(t) / static_cast<double>(spec.duration_us);
        BarPose pose = bar_pose(mc, u, spec.sensor_h, spec.sensor_w, bar, cross_d(rng));
        s.events.push_back(Event{t, pose.lead_x, pose.lead_y, +1});
        pose = bar_pose(mc, u, spec.sensor_h, spec.sensor_w, bar, cross_d(rng));
        s.events.push_back(Event{t, pose.trail_x, pose.trail_y, -1});
      }
      if (n_noise > 0) {
        std::uniform_int_distribution<std::uint32_t> xd(0, spec.sensor_w - 1);
        std::uniform_int_distribution<std::uint32_t> yd(0, spec.sensor_h - 1);
        std::bernoulli_distribution pd(0.5);
        for (std::uint64_t i = 0; i < n_noise; ++i) {
          s.events.push_back(Event{time_d(rng), static_cast<std::uint16_t>(xd(rng)),
                                   static_cast<std::uint16_t>(yd(rng)),
                                   static_cast<std::int8_t>(pd(rng) ? 1 : -1)});
        }
      }
      std::stable_sort(s.events.begin(), s.events.end(),
                       [](const Event& a, const Event& b) { return a.t < b.t; });
      out.push_back(std::move(s));
    }
  }
  return out;
}

Batch stack_samples(const std::vector<Sample>& samples, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw ContractError("cannot stack an empty batch");
  const Tensor& first = samples[indices[0]].frames;
  Shape s = first.shape();
  Shape bs = s;
  bs.insert(bs.begin(), static_cast<std::int64_t>(indices.size()));
  Batch b;
  b.frames = Tensor::empty(bs, first.dtype());
  std::size_t stride = static_cast<std::size_t>(first.numel()) * dtype_size(first.dtype());
  auto* dst = first.dtype() == DType::F32
                  ? reinterpret_cast<std::byte*>(b.frames.data<float>())
                  : reinterpret_cast<std::byte*>(b.frames.data<double>());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const Sample& smp = samples[indices[i]];
    if (smp.frames.shape() != s) throw ShapeError("ragged sample shapes in batch");
    const void* src = smp.frames.dtype() == DType::F32
                          ? static_cast<const void*>(smp.frames.data<float>())
                          : static_cast<const void*>(smp.frames.data<double>());
    std::memcpy(dst + i * stride, src, stride);
    b.labels.push_back(smp.label);
  }
  return b;
}

DatasetBatcher::DatasetBatcher(std::vector<Sample> samples, int batch_size,
                               std::uint64_t shuffle_seed)
    : samples_(std::move(samples)), batch_size_(batch_size), seed_(shuffle_seed) {
  if (batch_size_ < 1) throw ConfigError("batch size must be >= 1");
  if (samples_.empty()) throw ContractError("dataset is empty");
}

std::vector<Batch> DatasetBatcher::epoch(int epoch_index) const {
  std::vector<std::size_t> order(samples_.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 rng(mix_seed(seed_, static_cast<std::uint64_t>(epoch_index)));
  // Fisher-Yates with explicit draws; identical across standard libraries
  for (std::size_t i = order.size(); i > 1; --i) {
    std::uint64_t j = rng() % i;
    std::swap(order[i - 1], order[static_cast<std::size_t>(j)]);
  }
  std::vector<Batch> batches;
  for (std::size_t start = 0; start < order.size();
       start += static_cast<std::size_t>(batch_size_)) {
    std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(batch_size_));
    std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                 order.begin() + static_cast<std::ptrdiff_t>(end));
    batches.push_back(stack_samples(samples_, idx));
  }
  return batches;
}

}  // namespace spikmamba
