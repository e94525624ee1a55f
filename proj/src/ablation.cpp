#include "rundet/ablation.hpp"

#include <chrono>
#include <cstring>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace rundet {

const char* variant_name(Variant v) {
  switch (v) {
    case Variant::kBaseline: return "baseline";
    case Variant::kTwoWay: return "2way";
    case Variant::kThreeWay: return "3way";
  }
  return "?";
}

ModelConfig variant_config(const ModelConfig& base, Variant v) {
  ModelConfig c = base;
  switch (v) {
    case Variant::kBaseline:
      c.resblock.mode = ResblockMode::kNone;
      c.head.mode = HeadMode::kSeparate;
      break;
    case Variant::kTwoWay:
      c.resblock.mode = ResblockMode::kTwoWay;
      c.head.mode = HeadMode::kUnified;
      break;
    case Variant::kThreeWay:
      c.resblock.mode = ResblockMode::kThreeWay;
      c.head.mode = HeadMode::kUnified;
      break;
  }
  return c;
}

void ablation_split(std::uint64_t seed, int train, int test, std::vector<ShapesSample>& train_out,
                    std::vector<ShapesSample>& test_out) {
  train_out.clear();
  test_out.clear();
  for (int id = 0; id < train + test; ++id) {
    (id < train ? train_out : test_out).push_back(generate_sample(seed, id));
  }
}

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

bool bitwise_equal(std::span<const double> a, const std::vector<double>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

}  // namespace

SeedRun run_ablation_seed(const AblationConfig& cfg, std::uint64_t seed, const ProgressSink& progress) {
  std::vector<ShapesSample> train, test;
  ablation_split(seed, cfg.train_images, cfg.test_images, train, test);
  const auto gts = ground_truth_of(test);
  EvalOptions eval;
  eval.num_classes = cfg.model.head.num_classes;
  eval.image_size = cfg.model.backbone.input_size;

  TrainConfig tc;
  tc.sgd = cfg.sgd;
  tc.augment = cfg.augment;
  tc.seed = seed;
  tc.schedule = stage1_schedule(cfg.stage1_iterations, cfg.base_lr, cfg.batch_size);

  SeedRun out;
  out.seed = seed;
  out.runs.resize(kVariants);
  auto finish = [&](Variant v, Detector& model, TrainResult result, double secs) {
    VariantRun& r = out.runs[static_cast<std::size_t>(v)];
    r.report = evaluate(detect_all(model, test), gts, test.size(), eval);
    r.checkpoint = std::move(result.checkpoint);
    r.log = std::move(result.log);
    r.train_seconds = secs;
    if (progress) {
      std::ostringstream os;
      os << "seed " << seed << ' ' << variant_name(v) << ": mAP " << std::fixed << std::setprecision(4)
         << r.report.map << " (" << std::setprecision(0) << secs << " s)";
      progress(os.str());
    }
  };

  {
    Detector model(variant_config(cfg.model, Variant::kBaseline), seed);
    const auto t0 = std::chrono::steady_clock::now();
    auto result = train_end_to_end(model, train, tc);
    finish(Variant::kBaseline, model, std::move(result), seconds_since(t0));
  }
  {
    Detector model(variant_config(cfg.model, Variant::kTwoWay), seed);
    const auto t0 = std::chrono::steady_clock::now();
    auto result = train_stage1_2way(model, train, tc);
    finish(Variant::kTwoWay, model, std::move(result), seconds_since(t0));
  }
  {
    Detector model(variant_config(cfg.model, Variant::kThreeWay), seed);
    TrainConfig tc2 = tc;
    tc2.schedule = stage2_schedule(cfg.stage2_iterations, cfg.base_lr, cfg.batch_size);
    const Checkpoint& stage1 = out.runs[static_cast<std::size_t>(Variant::kTwoWay)].checkpoint;
    const auto t0 = std::chrono::steady_clock::now();
    auto result = train_stage2_3way(stage1, model, train, tc2);
    out.frozen_intact = true;
    for (const Param& p : model.params().params()) {
      if (stage2_trainable(p.name())) continue;
      const Blob* b = stage1.find(p.name());
      out.frozen_intact = out.frozen_intact && b && bitwise_equal(p.tensor().data(), b->data);
    }
    finish(Variant::kThreeWay, model, std::move(result), seconds_since(t0));
  }
  return out;
}

AblationSummary run_ablation(const AblationConfig& cfg, const ProgressSink& progress) {
  AblationSummary s;
  s.mean_map.assign(kVariants, 0.0);
  s.mean_small_ap.assign(kVariants, 0.0);
  s.mean_box_in_box.assign(kVariants, 0.0);
  std::vector<int> small_count(kVariants, 0);
  for (std::uint64_t seed : cfg.seeds) {
    s.seeds.push_back(run_ablation_seed(cfg, seed, progress));
    for (int v = 0; v < kVariants; ++v) {
      const EvalReport& r = s.seeds.back().runs[static_cast<std::size_t>(v)].report;
      s.mean_map[v] += r.map;
      s.mean_box_in_box[v] += r.box_in_box;
      if (r.bucket_ap[0]) s.mean_small_ap[v] += *r.bucket_ap[0], ++small_count[v];
    }
  }
  const double n = static_cast<double>(cfg.seeds.size());
  for (int v = 0; v < kVariants; ++v) {
    s.mean_map[v] /= n;
    s.mean_box_in_box[v] /= n;
    if (small_count[v]) s.mean_small_ap[v] /= small_count[v];
  }
  return s;
}

void AblationSummary::write_text(std::ostream& os) const {
  os << std::fixed << std::setprecision(4);
  os << "variant    mAP     AP-small  box-in-box\n";
  for (int v = 0; v < kVariants; ++v) {
    os << std::left << std::setw(10) << variant_name(static_cast<Variant>(v)) << ' ' << mean_map[v] << "  "
       << mean_small_ap[v] << "    " << mean_box_in_box[v] << '\n';
  }
  for (const auto& sr : seeds) {
    os << "seed " << sr.seed << ':';
    for (int v = 0; v < kVariants; ++v) os << ' ' << variant_name(static_cast<Variant>(v)) << '=' << sr.runs[v].report.map;
    os << " frozen_intact=" << (sr.frozen_intact ? "yes" : "no") << '\n';
  }
}

}  // namespace rundet
