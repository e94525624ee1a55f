// Acceptance gate: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails. Criteria 6 to 9 and 11 share one seeded ablation run.

#include <CLI11.hpp>
#include <chrono>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <optional>
#include <random>
#include <set>
#include <sstream>

#include "rundet/ablation.hpp"
#include "rundet/evalkit.hpp"
#include "rundet/ops.hpp"
#include "rundet/runtime.hpp"
#include "support/ap_oracle.hpp"
#include "support/box_oracles.hpp"
#include "support/testing.hpp"
#include "support/tiny.hpp"

using namespace rundet;
using testing::grad_check;
using testing::random_tensor;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int digits = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

std::string sci(double v) {
  std::ostringstream os;
  os << std::scientific << std::setprecision(2) << v;
  return os.str();
}

bool bitwise_equal(std::span<const double> a, std::span<const double> b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

bool same_predictions(const Detector& a, const Detector& b, const Tensor& x) {
  NoGradGuard guard;
  const auto fa = a.forward(x), fb = b.forward(x);
  for (std::size_t l = 0; l < fa.preds.loc.size(); ++l) {
    if (!bitwise_equal(fa.preds.loc[l].data(), fb.preds.loc[l].data())) return false;
    if (!bitwise_equal(fa.preds.conf[l].data(), fb.preds.conf[l].data())) return false;
  }
  return true;
}

Tensor shapes_batch(std::uint64_t seed, int n) {
  std::vector<ShapesSample> s;
  for (int i = 0; i < n; ++i) s.push_back(generate_sample(seed, i));
  std::vector<const ShapesSample*> p;
  for (const auto& x : s) p.push_back(&x);
  return to_batch(p);
}

ModelConfig desk(ResblockMode mode, HeadMode head = HeadMode::kUnified) {
  ModelConfig c;
  c.resblock.mode = mode;
  c.head.mode = head;
  return c;
}

// ---- 1 --------------------------------------------------------------------

Outcome gradient_suite() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(101);
  double worst = 0;
  int probes = 0;
  std::string worst_name;
  auto record = [&](const std::string& name, const testing::GradCheckResult& r) {
    probes += r.probes;
    if (r.max_rel_error >= worst) worst = r.max_rel_error, worst_name = name;
  };

  {
    Tensor x = random_tensor(Shape{2, 3, 6, 6}, rng, true);
    Tensor w = random_tensor(Shape{4, 3, 3, 3}, rng, true);
    Tensor b = random_tensor(Shape{4}, rng, true);
    Tensor t = random_tensor(Shape{2, 4, 6, 6}, rng);
    record("conv2d 3x3", grad_check([&] { return smooth_l1(conv2d(x, w, b, {1, 1}), t); }, {x, w, b}, 30, rng));
    Tensor w1 = random_tensor(Shape{4, 3, 1, 1}, rng, true);
    record("conv2d 1x1", grad_check([&] { return smooth_l1(conv2d(x, w1, b, {1, 0}), t); }, {x, w1, b}, 20, rng));
    Tensor ts = random_tensor(Shape{2, 4, 3, 3}, rng);
    record("conv2d strided",
           grad_check([&] { return smooth_l1(conv2d(x, w, b, {2, 1}), ts); }, {x, w, b}, 20, rng));
  }
  {
    Tensor x = random_tensor(Shape{2, 3, 3, 3}, rng, true);
    Tensor w = random_tensor(Shape{3, 2, 2, 2}, rng, true);
    Tensor b = random_tensor(Shape{2}, rng, true);
    Tensor t = random_tensor(Shape{2, 2, 6, 6}, rng);
    record("deconv2d", grad_check([&] { return smooth_l1(deconv2d(x, w, b, {2, 0}), t); }, {x, w, b}, 30, rng));
  }
  {
    Tensor x = random_tensor(Shape{1, 2, 6, 6}, rng, true);
    Tensor t = random_tensor(Shape{1, 2, 3, 3}, rng);
    record("relu+maxpool", grad_check([&] { return smooth_l1(maxpool2d(relu(x), 2, 2), t); }, {x}, 30, rng));
  }
  {
    Tensor x = random_tensor(Shape{2, 3, 2, 2}, rng, true);
    Tensor g = random_tensor(Shape{3}, rng, true, 0.5, 2.0);
    Tensor t = random_tensor(Shape{2, 3, 2, 2}, rng);
    record("l2norm", grad_check([&] { return smooth_l1(l2norm_channels(x, g), t); }, {x, g}, 30, rng));
  }
  {
    Tensor z = random_tensor(Shape{2, 6, 2, 2}, rng, true, -3, 3);
    std::vector<int> targets(softmax_row_count(z.shape(), 3));
    for (std::size_t i = 0; i < targets.size(); ++i) targets[i] = static_cast<int>(i % 4) - 1;
    record("softmax_ce", grad_check([&] { return softmax_ce(z, targets, 3); }, {z}, 30, rng));
  }
  {
    // residuals spread over both pieces of smooth L1, with per-element weights
    Tensor p = random_tensor(Shape{1, 2, 3, 3}, rng, true, -3, 3);
    Tensor t = random_tensor(Shape{1, 2, 3, 3}, rng);
    std::vector<double> wts(18);
    for (std::size_t i = 0; i < wts.size(); ++i) wts[i] = 0.25 * static_cast<double>(i % 4);
    record("smooth_l1", grad_check([&] { return smooth_l1(p, t, wts); }, {p}, 20, rng));
  }
  {
    Tensor a = random_tensor(Shape{1, 2, 2, 2}, rng, true);
    Tensor b = random_tensor(Shape{1, 2, 2, 2}, rng, true);
    Tensor c = random_tensor(Shape{1, 1, 2, 2}, rng, true);
    Tensor t = random_tensor(Shape{1, 3, 2, 2}, rng, false, -3, 3);
    record("add/concat/affine", grad_check(
                                    [&] {
                                      const Tensor cat[] = {affine(add(a, b), 1.7, -0.2), c};
                                      return smooth_l1(concat_channels(cat), t);
                                    },
                                    {a, b, c}, 30, rng));
  }
  for (auto mode : {ResblockMode::kThreeWay, ResblockMode::kTwoWay, ResblockMode::kNone}) {
    auto cfg = testing::tiny_config(mode, mode == ResblockMode::kNone ? HeadMode::kSeparate : HeadMode::kUnified);
    Detector model(cfg, 13);
    // nonzero branch3 weights so they carry gradient; small random biases keep
    // pre-activations off the ReLU kink
    std::uniform_real_distribution<double> small(-0.05, 0.05), wide(-0.3, 0.3);
    for (auto& p : model.params().params()) {
      const bool bias = p.name().size() > 2 && p.name().compare(p.name().size() - 2, 2, ".b") == 0;
      if (p.name().rfind("branch3", 0) == 0 && !bias) {
        for (double& v : p.tensor().mutable_data()) v = wide(rng);
      } else if (bias) {
        for (double& v : p.tensor().mutable_data()) v = small(rng);
      }
    }
    const auto objects = testing::random_objects(rng, 2, 2);
    const Tensor img = random_tensor({2, 3, 16, 16}, rng);
    std::vector<Tensor> wrt;
    for (auto& p : model.params().params()) wrt.push_back(p.tensor());
    const auto loss = [&] {
      const auto fwd = model.forward(img);
      return multibox_loss(fwd.preds, model.defaults(), build_targets(model.defaults(), objects)).total;
    };
    record(std::string("tiny ") + mode_name(mode), grad_check(loss, wrt, 200, rng, 1e-4));
  }
  const double secs = seconds_since(t0);
  const bool pass = worst < 1e-4 && probes >= 200 && secs < 120;
  return {pass, std::to_string(probes) + " probes, max rel err " + sci(worst) + " (" + worst_name + "), " +
                    fmt(secs, 1) + " s"};
}

// ---- 2 --------------------------------------------------------------------

Outcome adjoint_suite() {
  struct Geometry {
    int k, stride, pad;
  };
  // 3x3 convs (backbone, context, branch3, head), 1x1 projections, 2x2/2 deconv
  const Geometry used[] = {{3, 1, 1}, {1, 1, 0}, {2, 2, 0}};
  std::mt19937_64 rng(202);
  std::uniform_int_distribution<int> ch(1, 5), batch(1, 2), half(1, 5);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const Geometry g = used[trial % 3];
    const int B = batch(rng), C = ch(rng), O = ch(rng), H = 2 * half(rng), W = 2 * half(rng);
    const Tensor x = random_tensor(Shape{B, C, H, W}, rng);
    const Tensor w = random_tensor(Shape{O, C, g.k, g.k}, rng);
    const Tensor fx = conv2d(x, w, Tensor(), {g.stride, g.pad});
    const Tensor y = random_tensor(fx.shape(), rng);
    const Tensor aty = deconv2d(y, w, Tensor(), {g.stride, g.pad});
    if (!(aty.shape() == x.shape())) return {false, "adjoint shape mismatch at trial " + std::to_string(trial)};
    worst = std::max(worst, std::abs(testing::inner(fx.data(), y.data()) - testing::inner(x.data(), aty.data())));
  }
  return {worst < 1e-9, "100 trials over (3,1) (1,1) (2,2), max |<Ax,y> - <x,A'y>| " + sci(worst)};
}

// ---- 3 --------------------------------------------------------------------

Outcome oracle_equivalence() {
  std::mt19937_64 rng(303);
  int nms_bad = 0, match_bad = 0, ap_bad = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto dets = oracle::random_detections(rng, 20, i % 3 == 0);
    if (!oracle::same_detections(nms(dets, 0.45, 200), oracle::brute_force_nms(dets, 0.45))) ++nms_bad;
  }
  std::uniform_int_distribution<int> ndef(1, 30), ngt(1, 5);
  for (int i = 0; i < 500; ++i) {
    std::vector<BoxCorners> defaults, gts;
    for (int k = ndef(rng); k > 0; --k) defaults.push_back(oracle::random_box(rng, i % 2 == 0));
    for (int k = ngt(rng); k > 0; --k) gts.push_back(oracle::random_box(rng, i % 2 == 0));
    const auto got = match(defaults, gts, 0.5);
    const auto want = oracle::brute_force_match(defaults, gts, 0.5);
    if (got.default_to_gt != want.default_to_gt || got.gt_best_default != want.gt_best_default) ++match_bad;
  }
  for (int i = 0; i < 50; ++i) {
    std::vector<Detection> dets;
    std::vector<GtBox> gts;
    oracle::random_fixture(rng, dets, gts);
    if (std::abs(*average_precision(dets, gts) - oracle::oracle_ap(dets, gts, 0.5)) > 1e-12) ++ap_bad;
  }
  return {nms_bad + match_bad + ap_bad == 0, "mismatches: nms " + std::to_string(nms_bad) + "/1000, matching " +
                                                  std::to_string(match_bad) + "/500, AP " + std::to_string(ap_bad) +
                                                  "/50"};
}

// ---- 4 --------------------------------------------------------------------

Outcome codec_round_trip() {
  std::mt19937_64 rng(404);
  double worst = 0;
  int nonzero_identity = 0;
  for (int i = 0; i < 10000; ++i) {
    const BoxCenter b = to_center(oracle::random_box(rng));
    const BoxCenter d = to_center(oracle::random_box(rng));
    const BoxCenter r = decode(encode(b, d), d);
    worst = std::max({worst, std::abs(r.cx - b.cx), std::abs(r.cy - b.cy), std::abs(r.w - b.w), std::abs(r.h - b.h)});
    if (encode(b, b) != Offsets{0.0, 0.0, 0.0, 0.0}) ++nonzero_identity;
  }
  return {worst < 1e-12 && nonzero_identity == 0, "10000 pairs, max error " + sci(worst) +
                                                       ", nonzero encode(b,b): " + std::to_string(nonzero_identity)};
}

// ---- 5 --------------------------------------------------------------------

std::size_t head_params(const Detector& m) {
  std::size_t n = 0;
  for (const Param& p : m.params().params())
    if (p.name().rfind("head.", 0) == 0) n += p.tensor().numel();
  return n;
}

Outcome structural_invariants() {
  std::vector<std::string> failed;
  const Tensor images = shapes_batch(55, 4);

  Detector unified(desk(ResblockMode::kTwoWay), 1);
  std::size_t rows = 0;
  {
    NoGradGuard guard;
    for (const Tensor& t : unified.forward(images).preds.loc) rows += t.numel() / (4 * images.shape()[0]);
  }
  if (unified.defaults().size() != 2040 || rows != 2040) failed.push_back("anchor count");

  Detector separate(desk(ResblockMode::kTwoWay, HeadMode::kSeparate), 1);
  const std::size_t k = unified.config().backbone.sources.size();
  if (head_params(separate) != k * head_params(unified) || head_params(unified) == 0) failed.push_back("head params");

  // 3-way with every branch3 parameter zeroed is the 2-way function
  Detector two(desk(ResblockMode::kTwoWay), 7), three(desk(ResblockMode::kThreeWay), 7);
  for (Param& p : three.params().params()) {
    if (p.name().rfind("branch3.", 0) == 0) {
      for (double& v : p.tensor().mutable_data()) v = 0.0;
    }
  }
  if (!same_predictions(two, three, images)) failed.push_back("zeroed branch3");

  // stage 2 starts at the trained stage-1 function
  std::vector<ShapesSample> data;
  for (int i = 0; i < 64; ++i) data.push_back(generate_sample(56, i));
  Detector trained(desk(ResblockMode::kTwoWay), 8);
  TrainConfig tc;
  tc.schedule = stage1_schedule(20, 1e-3, 8);
  tc.seed = 8;
  const auto stage1 = train_stage1_2way(trained, data, tc);
  Detector warm(desk(ResblockMode::kThreeWay), 9);
  restore(stage1.checkpoint, warm.params(), [](const std::string& n) { return n.rfind("branch3.", 0) == 0; });
  if (!same_predictions(trained, warm, images)) failed.push_back("stage-2 warm start");

  std::string detail = "anchors " + std::to_string(unified.defaults().size()) + ", head params unified " +
                       std::to_string(head_params(unified)) + " x " + std::to_string(k) + " = separate " +
                       std::to_string(head_params(separate));
  for (const auto& f : failed) detail += "; FAILED " + f;
  if (failed.empty()) detail += "; zeroed branch3 and stage-2 start bitwise equal";
  return {failed.empty(), detail};
}

// ---- 6-9, 11: the seeded ablation ------------------------------------------

struct AblationRun {
  AblationSummary summary;
  double seconds = 0;
};

AblationRun run_benchmark_ablation(const AblationConfig& cfg) {
  const auto t0 = Clock::now();
  AblationRun r;
  r.summary = run_ablation(cfg, [](const std::string& line) { std::cerr << "  " << line << std::endl; });
  r.seconds = seconds_since(t0);
  return r;
}

Outcome freeze_invariant(const AblationRun& a) {
  int intact = 0;
  for (const SeedRun& s : a.summary.seeds) intact += s.frozen_intact;
  const int n = static_cast<int>(a.summary.seeds.size());
  return {intact == n, std::to_string(intact) + "/" + std::to_string(n) +
                           " stage-2 runs left every backbone/branch1/branch2 parameter bitwise unchanged"};
}

Outcome ablation_ordering(const AblationRun& a) {
  const auto& m = a.summary.mean_map;
  const double base = m[0], two = m[1], three = m[2];
  const bool order = three >= two && two >= base && three - base >= 0.01;
  const bool budget = a.seconds < 25 * 60;
  std::string per_seed;
  for (const SeedRun& s : a.summary.seeds) {
    per_seed += " [seed " + std::to_string(s.seed) + ": " + fmt(s.runs[0].report.map) + " " +
                fmt(s.runs[1].report.map) + " " + fmt(s.runs[2].report.map) + "]";
  }
  return {order && budget, "mean mAP baseline " + fmt(base) + ", 2way " + fmt(two) + ", 3way " + fmt(three) +
                               " (3way - baseline " + fmt(100 * (three - base), 2) + " pts);" + per_seed + "; " +
                               fmt(a.seconds / 60, 1) + " min"};
}

Outcome small_objects(const AblationRun& a) {
  const auto& s = a.summary.mean_small_ap;
  return {s[2] >= s[0], "mean small-bucket AP baseline " + fmt(s[0]) + ", 2way " + fmt(s[1]) + ", 3way " + fmt(s[2])};
}

Outcome box_in_box(const AblationRun& a) {
  const auto& b = a.summary.mean_box_in_box;
  return {b[2] <= b[0], "mean box-in-box rate baseline " + fmt(b[0]) + ", 2way " + fmt(b[1]) + ", 3way " + fmt(b[2])};
}

// ---- 10 -------------------------------------------------------------------

Outcome determinism() {
  std::vector<ShapesSample> data;
  for (int i = 0; i < 96; ++i) data.push_back(generate_sample(1010, i));
  const auto dir = std::filesystem::temp_directory_path();
  auto once = [&](int k) {
    Detector model(desk(ResblockMode::kThreeWay), 21);
    TrainConfig tc;
    tc.schedule = stage1_schedule(30, 1e-3, 8);
    tc.seed = 22;
    const auto r = train_end_to_end(model, data, tc);
    const auto path = dir / ("rundet_accept_" + std::to_string(k) + ".ckpt");
    save_checkpoint(r.checkpoint, path);
    std::ifstream f(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    std::filesystem::remove(path);
    std::string log;
    for (const auto& row : r.log) log += format_log_row(row) + "\n";
    return std::make_pair(log, bytes);
  };
  const auto a = once(0), b = once(1);
  const bool pass = a.first == b.first && a.second == b.second && !a.second.empty();
  return {pass, "two seeded 30-iteration 3way runs: loss logs " + std::string(a.first == b.first ? "identical" : "differ") +
                    ", checkpoint files (" + std::to_string(a.second.size()) + " bytes) " +
                    (a.second == b.second ? "identical" : "differ")};
}

// ---- 11 -------------------------------------------------------------------

Outcome throughput(const AblationRun& a) {
  // trained weights from the first seed so post-processing sees realistic scores
  std::vector<std::unique_ptr<Detector>> models;
  std::vector<std::uint64_t> macs;
  std::vector<double> latency;
  const Tensor images = shapes_batch(1111, 8);
  for (int v = 0; v < kVariants; ++v) {
    models.push_back(std::make_unique<Detector>(variant_config(ModelConfig{}, static_cast<Variant>(v)), 0));
    restore(a.summary.seeds.front().runs[v].checkpoint, models.back()->params());
    macs.push_back(count_macs(*models.back()));
  }
  for (int v = 0; v < kVariants; ++v) latency.push_back(benchmark(*models[v], images, 15).median_ms_per_image);
  const bool mac_order = macs[2] > macs[1] && macs[1] > macs[0];
  const int agree = (latency[2] > latency[1]) + (latency[1] > latency[0]) + (latency[2] > latency[0]);
  return {mac_order && agree >= 2, "MACs/image baseline " + std::to_string(macs[0]) + ", 2way " +
                                       std::to_string(macs[1]) + ", 3way " + std::to_string(macs[2]) +
                                       "; median ms/image " + fmt(latency[0], 3) + ", " + fmt(latency[1], 3) + ", " +
                                       fmt(latency[2], 3) + " (" + std::to_string(agree) + "/3 pairs agree)"};
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"acceptance gate"};
  std::vector<int> only;
  app.add_option("--only", only, "run just these criteria (1-11)")->check(CLI::Range(1, 11));
  CLI11_PARSE(app, argc, argv);
  const std::set<int> selected(only.begin(), only.end());
  auto wanted = [&](int n) { return selected.empty() || selected.count(n); };

  const char* names[] = {"",
                         "gradient suite",
                         "adjoint suite",
                         "oracle equivalence",
                         "codec round trip",
                         "structural invariants",
                         "freeze invariant",
                         "ablation ordering",
                         "small-object AP",
                         "box-in-box rate",
                         "determinism",
                         "throughput sanity"};

  std::optional<AblationRun> ablation;
  auto need_ablation = [&]() -> const AblationRun& {
    if (!ablation) {
      std::cerr << "running the seeded ablation (3 seeds x baseline / 2way / 3way)" << std::endl;
      ablation = run_benchmark_ablation(AblationConfig{});
    }
    return *ablation;
  };

  const std::function<Outcome()> checks[] = {
      {},
      gradient_suite,
      adjoint_suite,
      oracle_equivalence,
      codec_round_trip,
      structural_invariants,
      [&] { return freeze_invariant(need_ablation()); },
      [&] { return ablation_ordering(need_ablation()); },
      [&] { return small_objects(need_ablation()); },
      [&] { return box_in_box(need_ablation()); },
      determinism,
      [&] { return throughput(need_ablation()); },
  };

  int failures = 0, ran = 0;
  for (int n = 1; n <= 11; ++n) {
    if (!wanted(n)) continue;
    Outcome o;
    try {
      o = checks[n]();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    ++ran;
    failures += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  " << std::setw(2) << n << ' ' << names[n] << ": " << o.detail
              << std::endl;
  }
  std::cout << (ran - failures) << "/" << ran << " criteria passed" << std::endl;
  return failures == 0 ? 0 : 1;
}
