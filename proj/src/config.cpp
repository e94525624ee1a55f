#include "rundet/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "rundet/errors.hpp"

namespace rundet {

namespace {

using Getter = std::function<std::string(const ExperimentConfig&)>;
using Setter = std::function<void(ExperimentConfig&, std::string_view)>;

struct Key {
  const char* section;
  const char* name;
  const char* doc;
  Getter get;
  Setter set;
};

// ---- value codecs ----

std::string show(int v) { return std::to_string(v); }
std::string show(std::uint64_t v) { return std::to_string(v); }
std::string show(bool v) { return v ? "true" : "false"; }
std::string show(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}
std::string show(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}
std::string show(ResblockMode m) { return m == ResblockMode::kNone ? "none" : mode_name(m); }
std::string show(HeadMode m) { return m == HeadMode::kUnified ? "unified" : "separate"; }

[[noreturn]] void bad_value(std::string_view text, const char* what) {
  throw ConfigError("expected " + std::string(what) + ", got '" + std::string(text) + "'");
}

template <class T>
T read_number(std::string_view s, const char* what) {
  T v{};
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || r.ec != std::errc() || r.ptr != s.data() + s.size()) bad_value(s, what);
  return v;
}

void read(std::string_view s, int& out) { out = read_number<int>(s, "an integer"); }
void read(std::string_view s, std::uint64_t& out) { out = read_number<std::uint64_t>(s, "an unsigned integer"); }
void read(std::string_view s, double& out) { out = read_number<double>(s, "a number"); }
void read(std::string_view s, bool& out) {
  if (s == "true" || s == "yes" || s == "1") out = true;
  else if (s == "false" || s == "no" || s == "0") out = false;
  else bad_value(s, "true or false");
}
void read(std::string_view s, std::vector<int>& out) {
  std::vector<int> v;
  std::size_t start = 0;
  while (start <= s.size()) {
    const std::size_t comma = std::min(s.find(',', start), s.size());
    std::string_view item = s.substr(start, comma - start);
    while (!item.empty() && item.front() == ' ') item.remove_prefix(1);
    while (!item.empty() && item.back() == ' ') item.remove_suffix(1);
    v.push_back(read_number<int>(item, "a comma separated integer list"));
    start = comma + 1;
  }
  out = std::move(v);
}
void read(std::string_view s, ResblockMode& out) {
  if (s == "none") out = ResblockMode::kNone;
  else if (s == "2way") out = ResblockMode::kTwoWay;
  else if (s == "3way") out = ResblockMode::kThreeWay;
  else bad_value(s, "none, 2way or 3way");
}
void read(std::string_view s, HeadMode& out) {
  if (s == "unified") out = HeadMode::kUnified;
  else if (s == "separate") out = HeadMode::kSeparate;
  else bad_value(s, "unified or separate");
}

// `access` is a generic lambda returning a reference into the config.
template <class Access>
Key key(const char* section, const char* name, const char* doc, Access access) {
  return Key{section, name, doc,
             [access](const ExperimentConfig& c) { return show(access(c)); },
             [access](ExperimentConfig& c, std::string_view v) { read(v, access(c)); }};
}

#define FIELD(expr) [](auto& c) -> auto& { return c.expr; }

const std::vector<Key>& keys() {
  static const std::vector<Key> table{
      key("backbone", "input_size", "square input side in pixels", FIELD(model.backbone.input_size)),
      key("backbone", "widths", "output channels of the conv-relu-pool stages", FIELD(model.backbone.widths)),
      key("backbone", "sources", "1-based stages feeding the prediction side", FIELD(model.backbone.sources)),
      key("backbone", "l2norm", "L2-normalise the first source", FIELD(model.backbone.l2norm_first_source)),
      key("backbone", "l2norm_gamma", "initial per-channel L2Norm gain", FIELD(model.backbone.l2norm_gamma)),

      key("resblock", "mode", "none, 2way or 3way (train --stage overrides)", FIELD(model.resblock.mode)),
      key("resblock", "depth", "channels of every residual feature map", FIELD(model.resblock.depth)),
      key("resblock", "branch1", "1x1 projection branch", FIELD(model.resblock.branch1)),
      key("resblock", "branch2", "1x1 then 3x3 context branch", FIELD(model.resblock.branch2)),
      key("resblock", "branch3", "deconv branch from the next level (3way only)", FIELD(model.resblock.branch3)),
      key("resblock", "post_relu", "ReLU after the branch sum", FIELD(model.resblock.post_relu)),

      key("head", "mode", "unified (shared weights) or separate", FIELD(model.head.mode)),
      key("head", "num_classes", "foreground classes", FIELD(model.head.num_classes)),

      key("boxes", "s_min", "default box scale of the first level", FIELD(model.priors.s_min)),
      key("boxes", "s_max", "default box scale of the last level", FIELD(model.priors.s_max)),
      key("boxes", "center_variance", "centre offset encoding variance", FIELD(model.variances.center)),
      key("boxes", "size_variance", "log size encoding variance", FIELD(model.variances.size)),
      key("boxes", "match_threshold", "IoU for a default box to become positive", FIELD(model.match_threshold)),
      key("boxes", "nms_iou", "suppression IoU", FIELD(model.nms.iou_threshold)),
      key("boxes", "score_floor", "minimum class score kept before NMS", FIELD(model.nms.score_floor)),
      key("boxes", "top_k", "detections kept per class and image", FIELD(model.nms.top_k)),
      key("boxes", "pre_top_k", "candidates per class entering NMS", FIELD(model.nms.pre_top_k)),

      key("loss", "neg_pos_ratio", "hard negatives per positive", FIELD(loss.neg_pos_ratio)),

      key("schedule", "base_lr", "initial learning rate", FIELD(base_lr)),
      key("schedule", "iterations", "stage 1 and end-to-end iterations (drops at 2/3, 5/6)", FIELD(iterations)),
      key("schedule", "stage2_iterations", "3-way fine-tuning iterations (drops at 4/7, 6/7)",
          FIELD(stage2_iterations)),
      key("schedule", "batch_size", "images per iteration", FIELD(batch_size)),
      key("schedule", "momentum", "SGD momentum", FIELD(sgd.momentum)),
      key("schedule", "weight_decay", "L2 weight decay", FIELD(sgd.weight_decay)),
      key("schedule", "checkpoint_every", "iterations between checkpoints, 0 for final only",
          FIELD(checkpoint_every)),
      key("schedule", "seed", "initialisation and sampling seed", FIELD(seed)),

      key("data", "augment", "random flip and scale-crop during training", FIELD(augment)),
      key("data", "flip_probability", "horizontal flip probability", FIELD(augmentation.flip_probability)),
      key("data", "min_scale", "smallest crop side as a fraction of the image", FIELD(augmentation.min_scale)),
      key("data", "max_scale", "largest crop side as a fraction of the image", FIELD(augmentation.max_scale)),
      key("data", "crop_tries", "crop attempts before falling back to the full image",
          FIELD(augmentation.crop_tries)),
      key("data", "min_kept_area", "object area fraction that must survive a crop",
          FIELD(augmentation.min_kept_area)),

      key("eval", "iou_threshold", "IoU for a detection to count as a hit", FIELD(eval.iou_threshold)),
      key("eval", "report_score", "score cut for box-in-box and the per-image histogram",
          FIELD(eval.box_in_box_score)),
      key("eval", "containment", "inner area fraction for the box-in-box pair test", FIELD(eval.containment)),
      key("eval", "batch_size", "images per detection forward", FIELD(eval_batch)),
  };
  return table;
}

#undef FIELD

void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

void sync(ExperimentConfig& c) {
  c.loss.variances = c.model.variances;
  c.eval.histogram_score = c.eval.box_in_box_score;
  c.eval.num_classes = c.model.head.num_classes;
  c.eval.image_size = c.model.backbone.input_size;
}

std::string_view trim(std::string_view s) {
  const auto ws = " \t\r";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  return s.substr(b, s.find_last_not_of(ws) - b + 1);
}

}  // namespace

void ExperimentConfig::validate() const {
  model.backbone.validate();
  model.resblock.validate();
  require(model.head.num_classes == kShapeClasses,
          "head.num_classes must be " + std::to_string(kShapeClasses) + " for the shapes data");
  require(model.priors.s_min > 0 && model.priors.s_min < model.priors.s_max && model.priors.s_max <= 1,
          "boxes.s_min / s_max must satisfy 0 < s_min < s_max <= 1");
  require(model.variances.center > 0 && model.variances.size > 0, "boxes variances must be positive");
  require(model.match_threshold > 0 && model.match_threshold <= 1, "boxes.match_threshold must be in (0, 1]");
  require(model.nms.iou_threshold > 0 && model.nms.iou_threshold <= 1, "boxes.nms_iou must be in (0, 1]");
  require(model.nms.score_floor >= 0 && model.nms.score_floor < 1, "boxes.score_floor must be in [0, 1)");
  require(model.nms.top_k >= 1 && model.nms.pre_top_k >= model.nms.top_k,
          "boxes.top_k must be >= 1 and pre_top_k >= top_k");
  require(loss.neg_pos_ratio > 0, "loss.neg_pos_ratio must be positive");
  require(base_lr > 0, "schedule.base_lr must be positive");
  require(iterations >= 1 && stage2_iterations >= 1, "schedule iterations must be >= 1");
  require(batch_size >= 1, "schedule.batch_size must be >= 1");
  require(sgd.momentum >= 0 && sgd.momentum < 1, "schedule.momentum must be in [0, 1)");
  require(sgd.weight_decay >= 0, "schedule.weight_decay must be >= 0");
  require(checkpoint_every >= 0, "schedule.checkpoint_every must be >= 0");
  require(augmentation.flip_probability >= 0 && augmentation.flip_probability <= 1,
          "data.flip_probability must be in [0, 1]");
  require(augmentation.min_scale > 0 && augmentation.min_scale <= augmentation.max_scale &&
              augmentation.max_scale <= 1,
          "data scales must satisfy 0 < min_scale <= max_scale <= 1");
  require(augmentation.crop_tries >= 1, "data.crop_tries must be >= 1");
  require(augmentation.min_kept_area > 0 && augmentation.min_kept_area <= 1, "data.min_kept_area must be in (0, 1]");
  require(eval.iou_threshold > 0 && eval.iou_threshold <= 1, "eval.iou_threshold must be in (0, 1]");
  require(eval.containment > 0 && eval.containment <= 1, "eval.containment must be in (0, 1]");
  require(eval_batch >= 1, "eval.batch_size must be >= 1");
}

TrainConfig ExperimentConfig::stage1_train() const {
  TrainConfig t;
  t.schedule = stage1_schedule(iterations, base_lr, batch_size);
  t.sgd = sgd;
  t.loss = loss;
  t.augment = augment;
  t.augmentation = augmentation;
  t.seed = seed;
  return t;
}

TrainConfig ExperimentConfig::stage2_train() const {
  TrainConfig t = stage1_train();
  t.schedule = stage2_schedule(stage2_iterations, base_lr, batch_size);
  return t;
}

std::string ExperimentConfig::to_text() const {
  std::ostringstream os;
  std::string section;
  for (const Key& k : keys()) {
    if (section != k.section) {
      os << (section.empty() ? "" : "\n") << '[' << k.section << "]\n";
      section = k.section;
    }
    os << k.name << " = " << k.get(*this) << '\n';
  }
  return os.str();
}

ExperimentConfig parse_config(std::string_view text, const std::string& origin) {
  std::map<std::pair<std::string, std::string>, const Key*> index;
  std::set<std::string> sections;
  for (const Key& k : keys()) {
    index[{k.section, k.name}] = &k;
    sections.insert(k.section);
  }

  ExperimentConfig c;
  std::set<std::pair<std::string, std::string>> seen;
  std::string section;
  int line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t eol = std::min(text.find('\n', pos), text.size());
    const std::string_view line = trim(text.substr(pos, eol - pos));
    pos = eol + 1;
    ++line_no;
    const std::string where = origin + ":" + std::to_string(line_no) + ": ";
    if (line.empty() || line.front() == '#' || line.front() == ';') continue;

    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + "malformed section header");
      section = std::string(trim(line.substr(1, line.size() - 2)));
      if (!sections.count(section)) throw ConfigError(where + "unknown section [" + section + "]");
      continue;
    }
    const std::size_t eq = line.find('=');
    if (eq == std::string_view::npos) throw ConfigError(where + "expected key = value");
    if (section.empty()) throw ConfigError(where + "key outside of any section");
    const std::string name(trim(line.substr(0, eq)));
    const auto it = index.find({section, name});
    if (it == index.end()) throw ConfigError(where + "unknown key '" + name + "' in [" + section + "]");
    if (!seen.insert({section, name}).second) throw ConfigError(where + "duplicate key " + section + "." + name);
    try {
      it->second->set(c, trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(where + section + "." + name + ": " + e.what());
    }
  }
  sync(c);
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return parse_config(os.str(), path.string());
}

std::vector<ConfigKeyDoc> config_reference() {
  const ExperimentConfig defaults;
  std::vector<ConfigKeyDoc> out;
  for (const Key& k : keys()) out.push_back({k.section, k.name, k.get(defaults), k.doc});
  return out;
}

}  // namespace rundet
