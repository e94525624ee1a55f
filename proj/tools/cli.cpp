#include "cli.hpp"

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <memory>
#include <optional>
#include <sstream>

#include "rundet/ablation.hpp"
#include "rundet/config.hpp"
#include "rundet/errors.hpp"
#include "rundet/evalkit.hpp"
#include "rundet/imageio.hpp"
#include "rundet/pipeline.hpp"
#include "rundet/runtime.hpp"

namespace rundet::cli {

namespace {

namespace fs = std::filesystem;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Context {
  std::ostream& out;
  std::ostream& err;
  std::string command_line;
};

// ---- output directories ----

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create directory " + dir.string());
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream f(path);
  if (!f || !(f << text) || !f.flush()) throw IoError("cannot write " + path.string());
}

using Facts = std::vector<std::pair<std::string, std::string>>;

/// config.ini (when there is one) and provenance.txt: build, command line and
/// whatever seeds and inputs the command used.
void describe(const fs::path& dir, const Context& ctx, const ExperimentConfig* config, const Facts& facts) {
  if (config) write_file(dir / "config.ini", config->to_text());
  std::ostringstream os;
  os << "build = " << build_info() << "\ncommand = " << ctx.command_line
     << "\ncheckpoint_format = " << Checkpoint::kVersion << '\n';
  if (config) os << "seed = " << config->seed << '\n';
  for (const auto& [k, v] : facts) os << k << " = " << v << '\n';
  write_file(dir / "provenance.txt", os.str());
}

std::string manifest_header(const fs::path& data) {
  std::ifstream f(data / "manifest.txt");
  std::string line;
  std::getline(f, line);
  return line;
}

// ---- models from checkpoints ----

ResblockMode mode_of(StageTag tag) {
  switch (tag) {
    case StageTag::kBaseline: return ResblockMode::kNone;
    case StageTag::kTwoWay: return ResblockMode::kTwoWay;
    case StageTag::kThreeWay: return ResblockMode::kThreeWay;
  }
  return ResblockMode::kNone;
}

struct LoadedModel {
  ExperimentConfig config;
  StageTag stage = StageTag::kBaseline;
  std::unique_ptr<Detector> model;
};

// The model shape comes from --config, else the config.ini that train left
// next to the checkpoint, else the defaults; the stage tag fixes the mode.
LoadedModel load_model(const fs::path& checkpoint, const std::string& config_path) {
  const Checkpoint ckpt = load_checkpoint(checkpoint);
  LoadedModel m;
  m.stage = ckpt.stage;
  const fs::path beside = checkpoint.parent_path() / "config.ini";
  if (!config_path.empty()) {
    m.config = load_config(config_path);
  } else if (fs::exists(beside)) {
    m.config = load_config(beside);
  } else {
    m.config = parse_config("", "defaults");
    if (ckpt.stage == StageTag::kBaseline) m.config.model.head.mode = HeadMode::kSeparate;
  }
  m.config.model.resblock.mode = mode_of(ckpt.stage);
  m.model = std::make_unique<Detector>(m.config.model, m.config.seed);
  restore(ckpt, m.model->params());
  return m;
}

ExperimentConfig config_or_defaults(const std::string& path) {
  return path.empty() ? parse_config("", "defaults") : load_config(path);
}

std::vector<ShapesSample> load_dataset(const fs::path& dir, int expected_size) {
  const ShapesDataset ds = ShapesDataset::open(dir);
  if (ds.image_size() != expected_size) {
    throw UsageError("dataset images are " + std::to_string(ds.image_size()) + " px but the model expects " +
                     std::to_string(expected_size));
  }
  return ds.load_all();
}

std::vector<Detection> read_dump(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read " + path.string());
  return read_detections(f);
}

// ---- commands ----

struct GenDataArgs {
  int n = 0;
  std::uint64_t seed = 0;
  std::string out;
};

int gen_data(const GenDataArgs& a, Context& ctx) {
  make_dir(a.out);
  generate_dataset(a.n, a.seed, a.out);
  describe(a.out, ctx, nullptr,
           {{"images", std::to_string(a.n)}, {"data_seed", std::to_string(a.seed)}, {"image_size", "64"}});
  ctx.out << (fs::path(a.out) / "manifest.txt").string() << '\n';
  return kOk;
}

struct TrainArgs {
  std::string config, stage, resume, data, out;
  std::optional<std::uint64_t> seed;
};

int train(const TrainArgs& a, Context& ctx) {
  if (a.stage == "3way" && a.resume.empty()) throw UsageError("--stage 3way needs --resume <2-way checkpoint>");
  if (a.stage != "3way" && !a.resume.empty()) throw UsageError("--resume is only used by --stage 3way");

  ExperimentConfig cfg = config_or_defaults(a.config);
  if (a.seed) cfg.seed = *a.seed;
  if (a.stage == "baseline") {
    cfg.model = variant_config(cfg.model, Variant::kBaseline);
  } else {
    cfg.model.resblock.mode = a.stage == "2way" ? ResblockMode::kTwoWay : ResblockMode::kThreeWay;
  }
  cfg.validate();

  std::optional<Checkpoint> stage1;
  if (!a.resume.empty()) stage1 = load_checkpoint(a.resume);
  if (stage1 && stage1->stage != StageTag::kTwoWay) {
    throw UsageError("--resume must point at a 2way checkpoint, got " + std::string(stage_name(stage1->stage)));
  }
  const auto data = load_dataset(a.data, cfg.model.backbone.input_size);

  const fs::path out(a.out);
  make_dir(out);
  describe(out, ctx, &cfg,
           {{"stage", a.stage}, {"data", a.data}, {"data_manifest", manifest_header(a.data)},
            {"resume", a.resume.empty() ? "-" : a.resume}});

  Detector model(cfg.model, cfg.seed);
  const TrainConfig tc = a.stage == "3way" ? cfg.stage2_train() : cfg.stage1_train();
  const StageTag tag = stage_for(cfg.model.resblock.mode);
  std::ofstream log(out / "loss.log");
  if (!log) throw IoError("cannot write " + (out / "loss.log").string());
  const LogSink sink = [&](const LogRow& row) {
    log << format_log_row(row) << '\n';
    if (cfg.checkpoint_every > 0 && row.iteration % cfg.checkpoint_every == 0 &&
        row.iteration < tc.schedule.total_iterations) {
      std::ostringstream name;
      name << "iter_" << std::setw(6) << std::setfill('0') << row.iteration << ".ckpt";
      save_checkpoint(capture(model.params(), tag, row.iteration), out / name.str());
    }
  };

  // on a non-finite loss the rows so far stay in loss.log
  TrainResult result;
  if (a.stage == "3way") result = train_stage2_3way(*stage1, model, data, tc, sink);
  else if (a.stage == "2way") result = train_stage1_2way(model, data, tc, sink);
  else result = train_end_to_end(model, data, tc, sink);
  if (!log.flush()) throw IoError("cannot write " + (out / "loss.log").string());
  save_checkpoint(result.checkpoint, out / "model.ckpt");
  ctx.out << "final " << format_log_row(result.log.back()) << '\n'
          << "checkpoint " << (out / "model.ckpt").string() << '\n';
  return kOk;
}

struct EvalArgs {
  std::vector<std::string> checkpoints;
  std::string dets, data, out, config;
};

int eval(const EvalArgs& a, Context& ctx) {
  if (a.checkpoints.empty() == a.dets.empty()) throw UsageError("give either --checkpoint (repeatable) or --dets");

  struct Entry {
    std::string label;
    EvalReport report;
    std::optional<ExperimentConfig> config;
    std::string source;
  };
  std::vector<Entry> entries;
  std::map<std::string, int> seen;
  auto label_for = [&](std::string base) {
    const int k = ++seen[base];
    return k == 1 ? base : base + "_" + std::to_string(k);
  };

  if (!a.dets.empty()) {
    const ExperimentConfig cfg = config_or_defaults(a.config);
    const auto samples = load_dataset(a.data, cfg.model.backbone.input_size);
    const auto dets = read_dump(a.dets);
    entries.push_back({label_for("dets"), evaluate(dets, ground_truth_of(samples), samples.size(), cfg.eval), cfg,
                       a.dets});
  }
  std::vector<ShapesSample> samples;
  for (const std::string& path : a.checkpoints) {
    LoadedModel m = load_model(path, a.config);
    if (samples.empty()) samples = load_dataset(a.data, m.config.model.backbone.input_size);
    const auto dets = detect_all(*m.model, samples, m.config.eval_batch);
    entries.push_back({label_for(stage_name(m.stage)),
                       evaluate(dets, ground_truth_of(samples), samples.size(), m.config.eval), m.config, path});
  }

  std::ostringstream table;
  table << std::fixed << std::setprecision(4) << std::left << std::setw(12) << "model"
        << "mAP     AP-small  AP-medium AP-large  box-in-box\n";
  auto bucket = [](const EvalReport& r, int b) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(4);
    if (r.bucket_ap[b]) os << *r.bucket_ap[b];
    else os << "-";
    return os.str();
  };
  for (const Entry& e : entries) {
    table << std::setw(12) << e.label << std::setw(8) << e.report.map << std::setw(10) << bucket(e.report, 0)
          << std::setw(10) << bucket(e.report, 1) << std::setw(10) << bucket(e.report, 2) << e.report.box_in_box
          << '\n';
  }
  ctx.out << table.str();

  if (!a.out.empty()) {
    const fs::path out(a.out);
    make_dir(out);
    std::ostringstream full;
    Facts facts{{"data", a.data}, {"data_manifest", manifest_header(a.data)}};
    for (const Entry& e : entries) {
      full << "== " << e.label << " (" << e.source << ")\n";
      e.report.write_text(full);
      full << '\n';
      std::ostringstream kv;
      e.report.write_keyvalue(kv);
      write_file(out / ("metrics_" + e.label + ".txt"), kv.str());
      write_file(out / ("config_" + e.label + ".ini"), e.config->to_text());
      facts.emplace_back("input_" + e.label, e.source);
      facts.emplace_back("seed_" + e.label, std::to_string(e.config->seed));
    }
    write_file(out / "summary.txt", table.str());
    write_file(out / "report.txt", full.str());
    describe(out, ctx, &*entries.front().config, facts);
  }
  return kOk;
}

struct DetectArgs {
  std::string checkpoint, image, out, config;
  double min_score = 0.5;
  int scale = 4;
};

int detect(const DetectArgs& a, Context& ctx) {
  LoadedModel m = load_model(a.checkpoint, a.config);
  const ShapesSample img = read_image(a.image);
  if (img.size != m.config.model.backbone.input_size) {
    throw UsageError("image is " + std::to_string(img.size) + " px but the model expects " +
                     std::to_string(m.config.model.backbone.input_size));
  }
  const ShapesSample* ptr = &img;
  const auto dets = m.model->detect(to_batch({&ptr, 1}));

  const fs::path out(a.out);
  make_dir(out);
  {
    std::ofstream f(out / "detections.txt");
    write_detections(f, dets);
    if (!f.flush()) throw IoError("cannot write " + (out / "detections.txt").string());
  }
  std::vector<Detection> shown;
  for (const Detection& d : dets)
    if (d.score >= a.min_score) shown.push_back(d);
  Raster r = to_raster(img, a.scale);
  draw_detections(r, shown);
  write_ppm(out / "overlay.ppm", r);
  describe(out, ctx, &m.config, {{"checkpoint", a.checkpoint}, {"image", a.image}});

  ctx.out << dets.size() << " detections, " << shown.size() << " drawn at score >= " << a.min_score << '\n';
  for (const Detection& d : shown) {
    ctx.out << "  " << shape_name(d.class_id) << ' ' << std::fixed << std::setprecision(3)
            << d.score << " [" << d.box.x1 << ", " << d.box.y1 << ", " << d.box.x2 << ", " << d.box.y2 << "]\n";
  }
  return kOk;
}

struct DiagnoseArgs {
  std::string dets;
  double min_score = 0.5;
  double containment = 0.9;
};

int diagnose(const DiagnoseArgs& a, Context& ctx) {
  const auto dets = read_dump(a.dets);
  std::vector<Detection> kept;
  for (const Detection& d : dets)
    if (d.score >= a.min_score) kept.push_back(d);
  const ContainmentCount c = count_containment(kept, a.containment);
  ctx.out << "box_in_box_rate " << box_in_box_rate(kept, a.containment) << '\n'
          << "detections " << kept.size() << " of " << dets.size() << "\npairs " << c.pairs << "\ncontained "
          << c.contained << '\n';
  return kOk;
}

struct BenchArgs {
  std::string checkpoint, config;
  int repeats = 20;
  int batch = 1;
  int warmup = 3;
};

int bench(const BenchArgs& a, Context& ctx) {
  LoadedModel m = load_model(a.checkpoint, a.config);
  std::vector<ShapesSample> imgs;
  ShapesConfig sc;
  sc.image_size = m.config.model.backbone.input_size;
  for (int i = 0; i < a.batch; ++i) imgs.push_back(generate_sample(0, i, sc));
  std::vector<const ShapesSample*> ptrs;
  for (const auto& s : imgs) ptrs.push_back(&s);
  const BenchReport r = benchmark(*m.model, to_batch(ptrs), a.repeats, a.warmup);
  ctx.out << std::fixed << std::setprecision(3) << "model " << stage_name(m.stage) << "\nbatch " << r.batch
          << "\nrepeats " << r.repeats << "\nmedian_ms_per_image " << r.median_ms_per_image
          << "\np95_ms_per_image " << r.p95_ms_per_image << "\nimages_per_second " << std::setprecision(1)
          << r.images_per_second << "\nmacs_per_image " << r.macs_per_image << '\n';
  return kOk;
}

struct AblateArgs {
  std::string config, out;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  int train_images = 3000, test_images = 500;
  int stage1 = 1500, stage2 = 700, batch = 16;
};

int ablate(const AblateArgs& a, Context& ctx) {
  const ExperimentConfig cfg = config_or_defaults(a.config);
  AblationConfig ac;
  ac.model = cfg.model;
  ac.train_images = a.train_images;
  ac.test_images = a.test_images;
  ac.seeds = a.seeds;
  ac.stage1_iterations = a.stage1;
  ac.stage2_iterations = a.stage2;
  ac.base_lr = cfg.base_lr;
  ac.batch_size = a.batch;
  ac.sgd = cfg.sgd;
  ac.augment = cfg.augment;

  const fs::path out(a.out);
  if (!a.out.empty()) make_dir(out);
  const auto summary = run_ablation(ac, [&](const std::string& line) { ctx.out << line << std::endl; });
  std::ostringstream os;
  summary.write_text(os);
  ctx.out << os.str();
  if (!a.out.empty()) {
    write_file(out / "summary.txt", os.str());
    std::ostringstream full;
    std::string seeds;
    for (const SeedRun& sr : summary.seeds) {
      seeds += (seeds.empty() ? "" : ",") + std::to_string(sr.seed);
      for (int v = 0; v < kVariants; ++v) {
        full << "== seed " << sr.seed << ' ' << variant_name(static_cast<Variant>(v)) << '\n';
        sr.runs[v].report.write_text(full);
        full << '\n';
      }
    }
    write_file(out / "report.txt", full.str());
    describe(out, ctx, &cfg,
             {{"seeds", seeds},
              {"train_images", std::to_string(a.train_images)},
              {"test_images", std::to_string(a.test_images)},
              {"stage1_iterations", std::to_string(a.stage1)},
              {"stage2_iterations", std::to_string(a.stage2)},
              {"batch_size", std::to_string(a.batch)}});
  }
  return kOk;
}

int print_config(Context& ctx) {
  std::string section;
  for (const ConfigKeyDoc& k : config_reference()) {
    if (k.section != section) {
      ctx.out << (section.empty() ? "" : "\n") << '[' << k.section << "]\n";
      section = k.section;
    }
    ctx.out << "# " << k.doc << '\n' << k.key << " = " << k.default_value << '\n';
  }
  return kOk;
}

std::string join(const std::vector<std::string>& args) {
  std::string s = "rundet";
  for (const auto& a : args) s += ' ' + a;
  return s;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Context ctx{out, err, join(args)};
  CLI::App app{"Residual feature pyramid detector on generated shapes", "rundet"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(version()));

  std::function<int()> action;
  const CLI::Range kPositive(1, 1 << 30);

  GenDataArgs gd;
  auto* c_gen = app.add_subcommand("gen-data", "Generate a shapes dataset");
  c_gen->add_option("-n,--n", gd.n, "number of images")->required()->check(kPositive);
  c_gen->add_option("--seed", gd.seed, "generation seed")->capture_default_str();
  c_gen->add_option("--out", gd.out, "output directory")->required();
  c_gen->callback([&] { action = [&] { return gen_data(gd, ctx); }; });

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "Train a model and write checkpoints plus a loss log");
  c_train->add_option("--config", tr.config, "experiment config file (defaults when omitted)");
  c_train->add_option("--stage", tr.stage, "baseline, 2way, 3way (fine-tune from --resume) or e2e3way")
      ->required()
      ->check(CLI::IsMember({"baseline", "2way", "3way", "e2e3way"}));
  c_train->add_option("--resume", tr.resume, "2way checkpoint to fine-tune (stage 3way)");
  c_train->add_option("--data", tr.data, "dataset directory")->required();
  c_train->add_option("--out", tr.out, "output directory")->required();
  c_train->add_option("--seed", tr.seed, "overrides schedule.seed");
  c_train->callback([&] { action = [&] { return train(tr, ctx); }; });

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("eval", "Evaluate checkpoints or a detection dump on a dataset");
  c_eval->add_option("--checkpoint", ev.checkpoints, "checkpoint (repeat for a side by side report)");
  c_eval->add_option("--dets", ev.dets, "detection dump instead of a checkpoint");
  c_eval->add_option("--data", ev.data, "dataset directory")->required();
  c_eval->add_option("--out", ev.out, "report directory");
  c_eval->add_option("--config", ev.config, "config overriding the one beside each checkpoint");
  c_eval->callback([&] { action = [&] { return eval(ev, ctx); }; });

  DetectArgs dt;
  auto* c_det = app.add_subcommand("detect", "Detect objects in one image and draw them");
  c_det->add_option("--checkpoint", dt.checkpoint)->required();
  c_det->add_option("--image", dt.image, "raw planar .rgb or binary .ppm")->required();
  c_det->add_option("--out", dt.out, "output directory")->required();
  c_det->add_option("--config", dt.config);
  c_det->add_option("--min-score", dt.min_score, "score for drawn boxes")->capture_default_str();
  c_det->add_option("--scale", dt.scale, "overlay upscale factor")->capture_default_str()->check(CLI::Range(1, 32));
  c_det->callback([&] { action = [&] { return detect(dt, ctx); }; });

  DiagnoseArgs dg;
  auto* c_diag = app.add_subcommand("diagnose", "Box-in-box rate of a detection dump");
  c_diag->add_option("--dets", dg.dets)->required();
  c_diag->add_option("--min-score", dg.min_score, "ignore detections below")->capture_default_str();
  c_diag->add_option("--containment", dg.containment, "inner area fraction")
      ->capture_default_str()
      ->check(CLI::Range(1e-9, 1.0));
  c_diag->callback([&] { action = [&] { return diagnose(dg, ctx); }; });

  BenchArgs bn;
  auto* c_bench = app.add_subcommand("bench", "Time detection and count MACs");
  c_bench->add_option("--checkpoint", bn.checkpoint)->required();
  c_bench->add_option("--config", bn.config);
  c_bench->add_option("--repeats", bn.repeats)->capture_default_str()->check(kPositive);
  c_bench->add_option("--batch", bn.batch)->capture_default_str()->check(kPositive);
  c_bench->add_option("--warmup", bn.warmup)->capture_default_str()->check(CLI::Range(0, 1 << 30));
  c_bench->callback([&] { action = [&] { return bench(bn, ctx); }; });

  AblateArgs ab;
  auto* c_abl = app.add_subcommand("ablate", "Train and evaluate baseline, 2way and 3way per seed");
  c_abl->add_option("--config", ab.config);
  c_abl->add_option("--out", ab.out, "report directory");
  c_abl->add_option("--seeds", ab.seeds)->capture_default_str();
  c_abl->add_option("--train-images", ab.train_images)->capture_default_str()->check(kPositive);
  c_abl->add_option("--test-images", ab.test_images)->capture_default_str()->check(kPositive);
  c_abl->add_option("--stage1", ab.stage1, "baseline and 2way iterations")
      ->capture_default_str()
      ->check(kPositive);
  c_abl->add_option("--stage2", ab.stage2, "3way fine-tuning iterations")
      ->capture_default_str()
      ->check(kPositive);
  c_abl->add_option("--batch", ab.batch)->capture_default_str()->check(kPositive);
  c_abl->callback([&] { action = [&] { return ablate(ab, ctx); }; });

  auto* c_cfg = app.add_subcommand("print-config", "Print every config key with its default");
  c_cfg->callback([&] { action = [&] { return print_config(ctx); }; });

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    app.exit(e, out, err);
    return kOk;
  } catch (const CLI::CallForAllHelp& e) {
    app.exit(e, out, err);
    return kOk;
  } catch (const CLI::CallForVersion& e) {
    app.exit(e, out, err);
    return kOk;
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kUsage;
  }

  try {
    return action();
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kUsage;
  } catch (const ContractError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << '\n';
    return kNumerical;
  } catch (const IoError& e) {
    err << "I/O error: " << e.what() << '\n';
    return kIo;
  } catch (const fs::filesystem_error& e) {
    err << "I/O error: " << e.what() << '\n';
    return kIo;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  }
}

}  // namespace rundet::cli
