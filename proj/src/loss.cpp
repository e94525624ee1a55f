#include "rundet/loss.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "rundet/errors.hpp"
#include "rundet/ops.hpp"

namespace rundet {

namespace {

// Location of a flattened anchor inside the per-level maps.
struct AnchorSite {
  std::size_t level;
  int y, x, a;
};

AnchorSite locate(const RawPredictions& p, std::size_t anchor) {
  const int na = p.boxes_per_location;
  for (std::size_t l = 0; l < p.loc.size(); ++l) {
    const int h = p.loc[l].shape()[2], w = p.loc[l].shape()[3];
    const std::size_t n = static_cast<std::size_t>(h) * w * na;
    if (anchor < n) {
      const int cell = static_cast<int>(anchor / na);
      return {l, cell / w, cell % w, static_cast<int>(anchor % na)};
    }
    anchor -= n;
  }
  throw IndexError("anchor index out of range");
}

void check_layout(const RawPredictions& p, const DefaultBoxSet& d) {
  if (p.loc.size() != d.level_count() || p.conf.size() != d.level_count()) {
    throw ContractError("prediction levels do not match the default box set");
  }
  for (std::size_t l = 0; l < p.loc.size(); ++l) {
    const auto& g = d.grids()[l];
    const Shape& ls = p.loc[l].shape();
    const Shape& cs = p.conf[l].shape();
    if (ls[2] != g.height || ls[3] != g.width || cs[2] != g.height || cs[3] != g.width ||
        ls[1] != p.boxes_per_location * 4 || cs[1] != p.boxes_per_location * p.num_classes) {
      throw ContractError("level " + std::to_string(l) + " prediction layout " + ls.str() + " / " +
                          cs.str() + " disagrees with the default boxes");
    }
  }
  if (p.boxes_per_location != d.boxes_per_location()) {
    throw ContractError("boxes per location disagree with the default box set");
  }
}

}  // namespace

std::vector<ImageTargets> build_targets(const DefaultBoxSet& defaults,
                                        std::span<const std::vector<GroundTruth>> objects,
                                        double threshold) {
  std::vector<ImageTargets> out;
  out.reserve(objects.size());
  for (const auto& objs : objects) {
    std::vector<BoxCorners> boxes;
    for (const auto& o : objs) boxes.push_back(o.box);
    out.push_back({objs, match(defaults.corners(), boxes, threshold)});
  }
  return out;
}

std::vector<double> background_ce(const RawPredictions& p) {
  const std::size_t batch = p.batch();
  const int k = p.num_classes, na = p.boxes_per_location;
  std::vector<double> out;
  out.reserve(batch * p.anchor_count());
  for (std::size_t b = 0; b < batch; ++b) {
    for (const Tensor& conf : p.conf) {
      const int ch = conf.shape()[1], h = conf.shape()[2], w = conf.shape()[3];
      const std::size_t plane = static_cast<std::size_t>(h) * w;
      const double* base = conf.data().data() + b * ch * plane;
      for (std::size_t pos = 0; pos < plane; ++pos) {
        for (int a = 0; a < na; ++a) {
          const double* z = base + static_cast<std::size_t>(a) * k * plane + pos;
          double m = z[0];
          for (int c = 1; c < k; ++c) m = std::max(m, z[c * plane]);
          double s = 0;
          for (int c = 0; c < k; ++c) s += std::exp(z[c * plane] - m);
          out.push_back(m + std::log(s) - z[0]);
        }
      }
    }
  }
  return out;
}

void anchor_softmax(const RawPredictions& p, std::size_t image, std::size_t anchor,
                    std::span<double> probs) {
  const AnchorSite s = locate(p, anchor);
  const Tensor& conf = p.conf[s.level];
  const int ch = conf.shape()[1], h = conf.shape()[2], w = conf.shape()[3];
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const int k = p.num_classes;
  const double* z = conf.data().data() + image * ch * plane +
                    static_cast<std::size_t>(s.a) * k * plane + static_cast<std::size_t>(s.y) * w + s.x;
  double m = z[0];
  for (int c = 1; c < k; ++c) m = std::max(m, z[c * plane]);
  double sum = 0;
  for (int c = 0; c < k; ++c) sum += (probs[c] = std::exp(z[c * plane] - m));
  for (int c = 0; c < k; ++c) probs[c] /= sum;
}

MultiboxLossReport multibox_loss(const RawPredictions& preds, const DefaultBoxSet& defaults,
                                 std::span<const ImageTargets> targets,
                                 const MultiboxLossConfig& config) {
  check_layout(preds, defaults);
  const std::size_t batch = preds.batch();
  const std::size_t anchors = defaults.size();
  if (targets.size() != batch) {
    throw ContractError("got targets for " + std::to_string(targets.size()) + " images, batch is " +
                        std::to_string(batch));
  }
  for (const auto& t : targets) {
    if (t.match.default_to_gt.size() != anchors) {
      throw ContractError("match result is not over the prediction's default boxes");
    }
  }

  const std::vector<double> bg = background_ce(preds);
  MultiboxLossReport report;
  report.mined.resize(batch);
  // flattened (image, anchor) class targets; -1 = not in the conf term
  std::vector<int> cls(batch * anchors, -1);
  std::vector<std::size_t> pool;
  for (std::size_t b = 0; b < batch; ++b) {
    const auto& m = targets[b].match.default_to_gt;
    std::size_t n_pos = 0;
    pool.clear();
    for (std::size_t i = 0; i < anchors; ++i) {
      if (m[i] >= 0) {
        const int label = targets[b].objects.at(static_cast<std::size_t>(m[i])).label;
        if (label < 1 || label >= preds.num_classes) {
          throw IndexError("object label " + std::to_string(label) + " outside 1.." +
                           std::to_string(preds.num_classes - 1));
        }
        cls[b * anchors + i] = label;
        ++n_pos;
      } else {
        pool.push_back(i);
      }
    }
    report.positives += n_pos;
    const auto want = static_cast<std::size_t>(std::floor(config.neg_pos_ratio * static_cast<double>(n_pos)));
    const std::size_t take = std::min(want, pool.size());
    if (take == 0) continue;
    const double* ce = bg.data() + b * anchors;
    std::partial_sort(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(take), pool.end(),
                      [ce](std::size_t a, std::size_t c) {
                        return ce[a] != ce[c] ? ce[a] > ce[c] : a < c;
                      });
    auto& mined = report.mined[b];
    mined.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(take));
    std::sort(mined.begin(), mined.end());
    for (std::size_t i : mined) cls[b * anchors + i] = 0;
    report.negatives += take;
  }

  Tensor loc_total, conf_total;
  const int na = preds.boxes_per_location;
  for (std::size_t l = 0; l < preds.loc.size(); ++l) {
    const Tensor& loc = preds.loc[l];
    const int h = loc.shape()[2], w = loc.shape()[3];
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    const std::size_t off = defaults.level_offset(l);
    const std::size_t count = plane * na;

    std::vector<int> level_cls(batch * count);
    Tensor target = Tensor::zeros(loc.shape());
    std::vector<double> weight(loc.numel(), 0.0);
    auto tdata = target.mutable_data();
    for (std::size_t b = 0; b < batch; ++b) {
      const auto& m = targets[b].match.default_to_gt;
      for (std::size_t j = 0; j < count; ++j) {
        const std::size_t anchor = off + j;
        level_cls[b * count + j] = cls[b * anchors + anchor];
        if (m[anchor] < 0) continue;
        const auto& obj = targets[b].objects[static_cast<std::size_t>(m[anchor])];
        const Offsets t = encode(to_center(obj.box), defaults[anchor], config.variances);
        const std::size_t pos = j / na;
        const std::size_t a = j % na;
        for (std::size_t c = 0; c < 4; ++c) {
          const std::size_t idx = (b * na * 4 + a * 4 + c) * plane + pos;
          tdata[idx] = t[c];
          weight[idx] = 1.0;
        }
      }
    }
    Tensor lsum = smooth_l1(loc, target, weight);
    Tensor csum = softmax_ce(preds.conf[l], level_cls, preds.num_classes);
    loc_total = l == 0 ? lsum : add(loc_total, lsum);
    conf_total = l == 0 ? csum : add(conf_total, csum);
  }
  report.loc_sum = loc_total.item();
  report.conf_sum = conf_total.item();
  report.total = affine(add(loc_total, conf_total), 1.0 / report.normalizer(), 0.0);
  return report;
}

}  // namespace rundet
