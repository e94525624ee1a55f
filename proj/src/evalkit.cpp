#include "rundet/evalkit.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <map>
#include <numeric>
#include <unordered_map>
#include <unordered_set>

#include "rundet/errors.hpp"

namespace rundet {

std::vector<GtBox> ground_truth_of(std::span<const ShapesSample> samples) {
  std::vector<GtBox> out;
  for (const auto& s : samples)
    for (const auto& o : s.objects) out.push_back({s.id, o.class_id, o.box});
  return out;
}

namespace {

std::vector<std::size_t> by_score(std::span<const Detection> dets) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
  return order;
}

// Greedy matching in score order; true-positive flag per visited detection.
std::vector<bool> greedy_tp(std::span<const Detection> dets, const std::vector<std::size_t>& order,
                            std::span<const GtBox> gts, double iou_threshold) {
  std::unordered_map<int, std::vector<std::size_t>> per_image;
  for (std::size_t g = 0; g < gts.size(); ++g) per_image[gts[g].image_id].push_back(g);
  std::vector<bool> used(gts.size(), false), tp;
  tp.reserve(order.size());
  for (std::size_t i : order) {
    const auto it = per_image.find(dets[i].image_id);
    double best = -1;
    std::size_t best_g = 0;
    if (it != per_image.end()) {
      for (std::size_t g : it->second) {
        const double o = iou(dets[i].box, gts[g].box);
        if (o > best) best = o, best_g = g;
      }
    }
    const bool hit = best >= iou_threshold && !used[best_g];
    if (hit) used[best_g] = true;
    tp.push_back(hit);
  }
  return tp;
}

template <class T, class Pred>
std::vector<T> filtered(std::span<const T> in, Pred pred) {
  std::vector<T> out;
  std::copy_if(in.begin(), in.end(), std::back_inserter(out), pred);
  return out;
}

}  // namespace

std::optional<double> average_precision(std::span<const Detection> dets, std::span<const GtBox> gts,
                                        double iou_threshold) {
  if (gts.empty()) return std::nullopt;
  const auto order = by_score(dets);
  const auto tp = greedy_tp(dets, order, gts, iou_threshold);
  // precision envelope over the recall steps
  std::vector<double> recall{0.0}, precision{0.0};
  std::size_t hits = 0;
  for (std::size_t k = 0; k < tp.size(); ++k) {
    hits += tp[k];
    recall.push_back(static_cast<double>(hits) / gts.size());
    precision.push_back(static_cast<double>(hits) / (k + 1));
  }
  recall.push_back(1.0);
  precision.push_back(0.0);
  for (std::size_t i = precision.size() - 1; i > 0; --i) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0;
  for (std::size_t i = 1; i < recall.size(); ++i) ap += (recall[i] - recall[i - 1]) * precision[i];
  return ap;
}

SizeBucket size_bucket(const BoxCorners& box, int image_size) {
  const double px = box.area() * image_size * image_size;
  if (px < kSmallArea) return SizeBucket::kSmall;
  if (px < kMediumArea) return SizeBucket::kMedium;
  return SizeBucket::kLarge;
}

const char* bucket_name(SizeBucket b) {
  switch (b) {
    case SizeBucket::kSmall: return "small";
    case SizeBucket::kMedium: return "medium";
    case SizeBucket::kLarge: return "large";
  }
  return "?";
}

std::array<std::optional<double>, 3> size_bucketed_ap(std::span<const Detection> dets, std::span<const GtBox> gts,
                                                      int num_classes, int image_size, double iou_threshold) {
  std::array<std::vector<double>, 3> per_bucket;
  for (int c = 0; c < num_classes; ++c) {
    const auto cg = filtered(gts, [&](const GtBox& g) { return g.class_id == c; });
    const auto cd = filtered(dets, [&](const Detection& d) { return d.class_id == c; });
    std::vector<SizeBucket> det_bucket;
    for (const auto& d : cd) {
      double best = -1;
      const GtBox* nearest = nullptr;
      for (const auto& g : cg) {
        if (g.image_id != d.image_id) continue;
        if (const double o = iou(d.box, g.box); o > best) best = o, nearest = &g;
      }
      det_bucket.push_back(best >= iou_threshold ? size_bucket(nearest->box, image_size)
                                                 : size_bucket(d.box, image_size));
    }
    for (int b = 0; b < 3; ++b) {
      const auto bucket = static_cast<SizeBucket>(b);
      const auto bg = filtered(std::span<const GtBox>(cg),
                               [&](const GtBox& g) { return size_bucket(g.box, image_size) == bucket; });
      std::vector<Detection> bd;
      for (std::size_t i = 0; i < cd.size(); ++i)
        if (det_bucket[i] == bucket) bd.push_back(cd[i]);
      if (const auto ap = average_precision(bd, bg, iou_threshold)) per_bucket[b].push_back(*ap);
    }
  }
  std::array<std::optional<double>, 3> out;
  for (int b = 0; b < 3; ++b) {
    if (per_bucket[b].empty()) continue;
    out[b] = std::accumulate(per_bucket[b].begin(), per_bucket[b].end(), 0.0) / per_bucket[b].size();
  }
  return out;
}

double box_in_box_at(std::span<const Detection> dets, double min_score, double containment) {
  const auto kept = filtered(dets, [&](const Detection& d) { return d.score >= min_score; });
  return box_in_box_rate(kept, containment);
}

EvalReport evaluate(std::span<const Detection> dets, std::span<const GtBox> gts, std::size_t images,
                    const EvalOptions& opt) {
  EvalReport r;
  r.images = images;
  r.detections = dets.size();
  std::vector<double> present;
  for (int c = 0; c < opt.num_classes; ++c) {
    const auto cg = filtered(gts, [&](const GtBox& g) { return g.class_id == c; });
    const auto cd = filtered(dets, [&](const Detection& d) { return d.class_id == c; });
    r.class_ap.push_back(average_precision(cd, cg, opt.iou_threshold));
    if (r.class_ap.back()) present.push_back(*r.class_ap.back());
  }
  r.map = present.empty() ? 0.0 : std::accumulate(present.begin(), present.end(), 0.0) / present.size();
  r.bucket_ap = size_bucketed_ap(dets, gts, opt.num_classes, opt.image_size, opt.iou_threshold);

  // recall with at most 100 detections per image
  std::map<int, std::vector<Detection>> per_image;
  for (const auto& d : dets) per_image[d.image_id].push_back(d);
  std::vector<Detection> top;
  for (auto& [id, v] : per_image) {
    std::stable_sort(v.begin(), v.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
    top.insert(top.end(), v.begin(), v.begin() + static_cast<std::ptrdiff_t>(std::min<std::size_t>(100, v.size())));
  }
  std::size_t found = 0;
  for (int c = 0; c < opt.num_classes; ++c) {
    const auto cg = filtered(gts, [&](const GtBox& g) { return g.class_id == c; });
    const auto cd = filtered(std::span<const Detection>(top), [&](const Detection& d) { return d.class_id == c; });
    const auto tp = greedy_tp(cd, by_score(cd), cg, opt.iou_threshold);
    found += static_cast<std::size_t>(std::count(tp.begin(), tp.end(), true));
  }
  r.recall_at_100 = gts.empty() ? 0.0 : static_cast<double>(found) / gts.size();

  r.detections_per_image.assign(static_cast<std::size_t>(opt.histogram_bins), 0);
  std::map<int, int> counts;
  for (const auto& d : dets)
    if (d.score >= opt.histogram_score) ++counts[d.image_id];
  const auto last = static_cast<int>(opt.histogram_bins) - 1;
  for (const auto& [id, n] : counts) ++r.detections_per_image[static_cast<std::size_t>(std::min(n, last))];
  r.detections_per_image[0] += static_cast<int>(images > counts.size() ? images - counts.size() : 0);

  r.box_in_box = box_in_box_at(dets, opt.box_in_box_score, opt.containment);
  return r;
}

void EvalReport::write_text(std::ostream& os) const {
  auto show = [&](const std::optional<double>& v) {
    if (v) os << std::fixed << std::setprecision(4) << *v;
    else os << "absent";
  };
  os << "images " << images << ", detections " << detections << '\n';
  os << "mAP@0.5 " << std::fixed << std::setprecision(4) << map << '\n';
  for (std::size_t c = 0; c < class_ap.size(); ++c) {
    os << "  AP " << shape_name(static_cast<int>(c)) << ' ';
    show(class_ap[c]);
    os << '\n';
  }
  for (int b = 0; b < 3; ++b) {
    os << "  AP " << bucket_name(static_cast<SizeBucket>(b)) << ' ';
    show(bucket_ap[static_cast<std::size_t>(b)]);
    os << '\n';
  }
  os << "recall@100 " << recall_at_100 << '\n';
  os << "box-in-box " << box_in_box << '\n';
  os << "detections per image:";
  for (int n : detections_per_image) os << ' ' << n;
  os << '\n';
}

void EvalReport::write_keyvalue(std::ostream& os) const {
  os << std::setprecision(17);
  os << "images=" << images << "\ndetections=" << detections << "\nmap=" << map << '\n';
  for (std::size_t c = 0; c < class_ap.size(); ++c) {
    os << "ap." << shape_name(static_cast<int>(c)) << '=';
    if (class_ap[c]) os << *class_ap[c];
    else os << "absent";
    os << '\n';
  }
  for (int b = 0; b < 3; ++b) {
    os << "ap." << bucket_name(static_cast<SizeBucket>(b)) << '=';
    if (bucket_ap[static_cast<std::size_t>(b)]) os << *bucket_ap[static_cast<std::size_t>(b)];
    else os << "absent";
    os << '\n';
  }
  os << "recall_at_100=" << recall_at_100 << "\nbox_in_box=" << box_in_box << "\nhistogram=";
  for (std::size_t i = 0; i < detections_per_image.size(); ++i) os << (i ? "," : "") << detections_per_image[i];
  os << '\n';
}

std::vector<Detection> detect_all(const Detector& model, std::span<const ShapesSample> samples, int batch_size) {
  std::vector<Detection> out;
  for (std::size_t start = 0; start < samples.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(samples.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<const ShapesSample*> ptrs;
    for (std::size_t i = start; i < end; ++i) ptrs.push_back(&samples[i]);
    for (Detection d : model.detect(to_batch(ptrs))) {
      d.image_id = samples[start + static_cast<std::size_t>(d.image_id)].id;
      out.push_back(d);
    }
  }
  return out;
}

BenchReport benchmark(const Detector& model, const Tensor& images, int repeats, int warmup) {
  if (repeats < 1) throw ConfigError("benchmark needs at least one timed repeat");
  BenchReport r;
  r.batch = images.shape()[0];
  r.repeats = repeats;
  for (int i = 0; i < warmup; ++i) (void)model.detect(images);
  std::vector<double> ms;
  for (int i = 0; i < repeats; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    (void)model.detect(images);
    const auto t1 = std::chrono::steady_clock::now();
    ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count() / r.batch);
  }
  std::sort(ms.begin(), ms.end());
  const std::size_t n = ms.size();
  r.median_ms_per_image = n % 2 ? ms[n / 2] : 0.5 * (ms[n / 2 - 1] + ms[n / 2]);
  r.p95_ms_per_image = ms[static_cast<std::size_t>(std::ceil(0.95 * n)) - 1];
  r.images_per_second = 1000.0 / r.median_ms_per_image;
  r.macs_per_image = count_macs(model);
  return r;
}

std::uint64_t count_macs(const Detector& model) {
  const int s = model.config().backbone.input_size;
  const auto fwd = model.forward(Tensor::zeros({1, 3, s, s}));
  std::vector<Tensor> stack(fwd.preds.loc.begin(), fwd.preds.loc.end());
  stack.insert(stack.end(), fwd.preds.conf.begin(), fwd.preds.conf.end());
  std::unordered_set<const void*> seen;
  std::uint64_t macs = 0;
  while (!stack.empty()) {
    const Tensor t = stack.back();
    stack.pop_back();
    if (!seen.insert(t.id()).second) continue;
    if (t.op() == OpKind::kConv2d || t.op() == OpKind::kDeconv2d) {
      const Shape& w = t.inputs()[1].shape();
      const std::uint64_t per = static_cast<std::uint64_t>(w[1]) * w[2] * w[3];
      const std::size_t n = t.op() == OpKind::kConv2d ? t.numel() : t.inputs()[0].numel();
      macs += per * n;
    }
    for (const Tensor& in : t.inputs()) stack.push_back(in);
  }
  return macs;
}

}  // namespace rundet
