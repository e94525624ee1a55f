#include "rundet/pipeline.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

namespace rundet {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

void Schedule::validate() const {
  if (!(base_lr > 0)) throw ConfigError("schedule: base_lr must be positive");
  if (total_iterations < 1) throw ConfigError("schedule: total_iterations must be at least 1");
  if (batch_size < 1) throw ConfigError("schedule: batch_size must be at least 1");
  for (std::size_t i = 0; i < milestones.size(); ++i) {
    if (milestones[i] < 1 || milestones[i] >= total_iterations) {
      throw ConfigError("schedule: milestone " + std::to_string(milestones[i]) + " outside [1, total)");
    }
    if (i > 0 && milestones[i] <= milestones[i - 1]) {
      throw ConfigError("schedule: milestones must be strictly increasing");
    }
  }
}

double Schedule::lr_at(int iteration) const {
  const auto passed = std::count_if(milestones.begin(), milestones.end(), [&](int m) { return m < iteration; });
  return base_lr * std::pow(decay, static_cast<double>(passed));
}

namespace {

// Milestones at fractions of the run; very short runs lose the ones that
// collapse onto each other or onto the ends.
Schedule fractional(int total, double base_lr, int batch_size, std::initializer_list<std::pair<int, int>> at) {
  Schedule s{base_lr, {}, 0.1, total, batch_size};
  for (auto [num, den] : at) {
    const int m = total * num / den;
    if (m >= 1 && m < total && (s.milestones.empty() || m > s.milestones.back())) s.milestones.push_back(m);
  }
  return s;
}

}  // namespace

// 120k total with drops at 80k and 100k
Schedule stage1_schedule(int total, double base_lr, int batch_size) {
  return fractional(total, base_lr, batch_size, {{2, 3}, {5, 6}});
}

// 40k + 20k + 10k iterations
Schedule stage2_schedule(int total, double base_lr, int batch_size) {
  return fractional(total, base_lr, batch_size, {{4, 7}, {6, 7}});
}

const char* stage_name(StageTag tag) {
  switch (tag) {
    case StageTag::kBaseline: return "baseline";
    case StageTag::kTwoWay: return "2way";
    case StageTag::kThreeWay: return "3way";
  }
  return "?";
}

StageTag stage_for(ResblockMode mode) {
  switch (mode) {
    case ResblockMode::kNone: return StageTag::kBaseline;
    case ResblockMode::kTwoWay: return StageTag::kTwoWay;
    case ResblockMode::kThreeWay: return StageTag::kThreeWay;
  }
  return StageTag::kBaseline;
}

// ---- checkpoints -------------------------------------------------------------

const Blob* Checkpoint::find(const std::string& name) const {
  auto it = std::find_if(blobs.begin(), blobs.end(), [&](const Blob& b) { return b.name == name; });
  return it == blobs.end() ? nullptr : &*it;
}

Checkpoint capture(const ParamStore& params, StageTag stage, std::uint64_t iteration,
                   const std::mt19937_64* rng) {
  Checkpoint c;
  c.stage = stage;
  c.iteration = iteration;
  for (const Param& p : params.params()) {
    const auto d = p.tensor().data();
    c.blobs.push_back({p.name(), p.tensor().shape().extents(), {d.begin(), d.end()}});
  }
  if (rng) {
    // engine state words are kept bit-for-bit inside doubles
    std::stringstream ss;
    ss << *rng;
    Blob b{kRngBlob, {}, {}};
    std::uint64_t word = 0;
    while (ss >> word) b.data.push_back(std::bit_cast<double>(word));
    b.extents = {static_cast<int>(b.data.size())};
    c.blobs.push_back(std::move(b));
  }
  return c;
}

bool restore_rng(const Checkpoint& ckpt, std::mt19937_64& rng) {
  const Blob* b = ckpt.find(kRngBlob);
  if (!b) return false;
  std::stringstream ss;
  for (double v : b->data) ss << std::bit_cast<std::uint64_t>(v) << ' ';
  std::mt19937_64 loaded;
  if (!(ss >> loaded)) throw CheckpointShapeError("blob rng.state does not hold a generator state");
  rng = loaded;
  return true;
}

void restore(const Checkpoint& ckpt, ParamStore& params,
             const std::function<bool(const std::string&)>& may_be_absent) {
  for (const Blob& b : ckpt.blobs) {
    if (b.name == kRngBlob) continue;
    const Param* p = params.find(b.name);
    if (!p) throw CheckpointShapeError("blob " + b.name + " has no matching parameter in this model");
    if (p->tensor().shape().extents() != b.extents) {
      throw CheckpointShapeError("blob " + b.name + " has shape " + Shape(b.extents).str() + ", model expects " +
                                 p->tensor().shape().str());
    }
  }
  for (const Param& p : params.params()) {
    if (!ckpt.find(p.name()) && !(may_be_absent && may_be_absent(p.name()))) {
      throw CheckpointShapeError("checkpoint lacks blob " + p.name());
    }
  }
  for (const Blob& b : ckpt.blobs) {
    if (b.name == kRngBlob) continue;
    auto dst = params.find(b.name)->tensor().mutable_data();
    std::copy(b.data.begin(), b.data.end(), dst.begin());
  }
}

namespace {

constexpr char kMagic[8] = {'R', 'U', 'N', 'C', 'K', 'P', 'T', '1'};

template <class T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <class T>
  T get(const char* what) {
    T v;
    need(sizeof(T), what);
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void doubles(std::vector<double>& out, std::size_t n, const std::string& what) {
    need(n * sizeof(double), what.c_str());
    out.resize(n);
    std::memcpy(out.data(), bytes_.data() + pos_, n * sizeof(double));
    pos_ += n * sizeof(double);
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) {
      throw CheckpointTruncatedError(std::string("checkpoint truncated while reading ") + what);
    }
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string serialize(const Checkpoint& c) {
  std::string out(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, c.version);
  put<std::uint8_t>(out, static_cast<std::uint8_t>(c.stage));
  put<std::uint64_t>(out, c.iteration);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(c.blobs.size()));
  for (const Blob& b : c.blobs) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(b.name.size()));
    out += b.name;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(b.extents.size()));
    for (int e : b.extents) put<std::uint32_t>(out, static_cast<std::uint32_t>(e));
    out.append(reinterpret_cast<const char*>(b.data.data()), b.data.size() * sizeof(double));
  }
  return out;
}

Checkpoint deserialize(const std::string& bytes) {
  Reader r(bytes);
  if (r.str(sizeof(kMagic), "magic") != std::string(kMagic, sizeof(kMagic))) {
    throw CheckpointError("not a checkpoint (bad magic)");
  }
  Checkpoint c;
  c.version = r.get<std::uint32_t>("version");
  if (c.version != Checkpoint::kVersion) {
    throw CheckpointVersionError("checkpoint version " + std::to_string(c.version) + ", expected " +
                                 std::to_string(Checkpoint::kVersion));
  }
  const auto stage = r.get<std::uint8_t>("stage tag");
  if (stage > 2) throw CheckpointError("unknown stage tag " + std::to_string(stage));
  c.stage = static_cast<StageTag>(stage);
  c.iteration = r.get<std::uint64_t>("iteration");
  const auto count = r.get<std::uint32_t>("blob count");
  for (std::uint32_t i = 0; i < count; ++i) {
    Blob b;
    b.name = r.str(r.get<std::uint32_t>("blob name length"), "blob name");
    const auto rank = r.get<std::uint32_t>("blob rank");
    if (rank > 8) throw CheckpointError("blob " + b.name + " has implausible rank " + std::to_string(rank));
    std::size_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      b.extents.push_back(static_cast<int>(r.get<std::uint32_t>("blob extents")));
      n *= static_cast<std::size_t>(b.extents.back());
    }
    r.doubles(b.data, n, "blob " + b.name);
    c.blobs.push_back(std::move(b));
  }
  if (!r.done()) throw CheckpointError("trailing bytes after the last blob");
  return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const std::string bytes = serialize(ckpt);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + tmp.string());
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("short write to " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into " + path.string() + ": " + ec.message());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read checkpoint " + path.string());
  std::string bytes{std::istreambuf_iterator<char>(f), {}};
  return deserialize(bytes);
}

// ---- training ----------------------------------------------------------------

std::string format_log_row(const LogRow& row) {
  std::ostringstream os;
  os.precision(17);
  os << row.iteration << ' ' << row.lr << ' ' << row.loc << ' ' << row.conf << ' ' << row.total;
  return os.str();
}

bool stage2_trainable(const std::string& name) {
  return name.rfind("branch3.", 0) == 0 || name.rfind("head.", 0) == 0;
}

namespace {

TrainResult run(Detector& model, const std::vector<ShapesSample>& data, const TrainConfig& cfg,
                StageTag tag, const LogSink& sink) {
  cfg.schedule.validate();
  if (data.empty()) throw ConfigError("training set is empty");
  std::mt19937_64 rng(cfg.seed);
  Sgd sgd(cfg.sgd);
  ParamStore& params = model.params();
  TrainResult result;

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t cursor = order.size();
  const auto batch = static_cast<std::size_t>(cfg.schedule.batch_size);
  std::vector<ShapesSample> samples(batch);
  std::vector<const ShapesSample*> ptrs(batch);
  std::vector<std::vector<GroundTruth>> objects(batch);

  for (int it = 1; it <= cfg.schedule.total_iterations; ++it) {
    for (std::size_t b = 0; b < batch; ++b) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const ShapesSample& src = data[order[cursor++]];
      samples[b] = cfg.augment ? augment(src, rng, cfg.augmentation) : src;
      ptrs[b] = &samples[b];
      objects[b] = to_ground_truth(samples[b].objects);
    }
    const auto fwd = model.forward(to_batch(ptrs));
    const auto targets = build_targets(model.defaults(), objects, model.config().match_threshold);
    const auto report = multibox_loss(fwd.preds, model.defaults(), targets, cfg.loss);
    const LogRow row{it, cfg.schedule.lr_at(it), report.loc(), report.conf(), report.total.item()};
    if (!std::isfinite(row.total)) {
      throw NumericalError("non-finite loss at iteration " + std::to_string(it) + " (" + stage_name(tag) + ")");
    }
    result.log.push_back(row);
    if (sink) sink(row);
    params.zero_grad();
    backward(report.total);
    sgd.step(params, row.lr);
  }
  result.checkpoint = capture(params, tag, static_cast<std::uint64_t>(cfg.schedule.total_iterations), &rng);
  return result;
}

}  // namespace

TrainResult train_end_to_end(Detector& model, const std::vector<ShapesSample>& data, const TrainConfig& config,
                             const LogSink& sink) {
  model.params().freeze_where([](const std::string&) { return false; });
  return run(model, data, config, stage_for(model.mode()), sink);
}

TrainResult train_stage1_2way(Detector& model, const std::vector<ShapesSample>& data, const TrainConfig& config,
                              const LogSink& sink) {
  if (model.mode() != ResblockMode::kTwoWay) throw ContractError("stage 1 trains a 2-way model");
  return train_end_to_end(model, data, config, sink);
}

TrainResult train_stage2_3way(const Checkpoint& stage1, Detector& model, const std::vector<ShapesSample>& data,
                              const TrainConfig& config, const LogSink& sink) {
  if (stage1.stage != StageTag::kTwoWay) {
    throw ContractError(std::string("stage 2 needs a 2way checkpoint, got ") + stage_name(stage1.stage));
  }
  if (model.mode() != ResblockMode::kThreeWay) throw ContractError("stage 2 fine-tunes a 3-way model");
  restore(stage1, model.params(), [](const std::string& name) { return name.rfind("branch3.", 0) == 0; });
  model.params().freeze_where([](const std::string& name) { return !stage2_trainable(name); });
  return run(model, data, config, StageTag::kThreeWay, sink);
}

}  // namespace rundet
