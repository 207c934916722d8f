// ddep: command-line driver for the pretraining / fine-tuning pipeline.
//
// Exit codes: 0 success, 1 invalid configuration or missing input, 2 runtime
// failure.

#include <CLI11.hpp>

#include <malloc.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "ddep/error.hpp"
#include "ddep/pipelines.hpp"
#include "ddep/sweep.hpp"

namespace fs = std::filesystem;
using namespace ddep;

namespace {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string out;
};

Config assemble(const Common& c) {
  try {
    Config cfg = c.config_path.empty() ? Config::defaults() : Config::load(c.config_path);
    for (const std::string& o : c.overrides) cfg.apply_override(o);
    if (c.seed) {
      const std::string s = std::to_string(*c.seed);
      for (const char* key : {"encoder.seed", "denoise.seed", "finetune.seed", "sweep.seeds"}) cfg.set(key, s);
    }
    validate_config(cfg);
    return cfg;
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
}

fs::path out_root(const Common& c) {
  if (!c.out.empty()) return c.out;
  if (const char* env = std::getenv("DDEP_OUT"); env && *env) return env;
  return "out";
}

void require_input(const std::string& path, const std::string& what) {
  if (!fs::exists(path)) throw ConfigError("invalid-config: missing " + what + ": " + path);
}

void progress(const std::string& line) { std::cerr << line << '\n'; }

void write_stage(const fs::path& dir, const StageOutput& out, const Config& cfg) {
  fs::create_directories(dir);
  out.log.write((dir / "").string());
  for (const std::string& w : out.warnings) std::cerr << "warning: " << w << '\n';
  {
    std::ofstream f(dir / "config.txt");
    f << cfg.text();
  }
  if (out.report) write_report((dir / "eval.csv").string(), *out.report);
  save_checkpoint((dir / "model.ckpt").string(), out.checkpoint);
  std::cout << (dir / "model.ckpt").string() << '\n';
}

int cmd_gen_data(const Common& c, const std::vector<std::string>& splits) {
  const Config cfg = assemble(c);
  for (const std::string& split : splits) {
    if (split != "pretrain_data" && split != "finetune_data" && split != "val_data") {
      throw ConfigError("invalid-config: unknown split '" + split + "' (pretrain_data, finetune_data or val_data)");
    }
    if (!cfg.get(split + ".manifest").empty()) throw ConfigError("invalid-config: key '" + split + ".manifest': already set; nothing to generate");
    const fs::path dir = out_root(c) / "data" / split;
    fs::create_directories(dir);
    const std::vector<Sample> samples = gen_dataset(dataset_spec(cfg, split));
    std::vector<ManifestEntry> entries;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      char stem[32];
      std::snprintf(stem, sizeof(stem), "%06zu", i);
      entries.push_back(save_sample(dir.string(), stem, samples[i]));
    }
    const fs::path manifest = dir / (split + ".manifest");
    write_manifest(manifest.string(), entries);
    std::cout << manifest.string() << '\n';
  }
  return 0;
}

int cmd_evaluate(const Common& c, const std::string& checkpoint, const std::string& predictions,
                 const std::string& ground_truth, const std::string& report_path) {
  const Config cfg = assemble(c);
  const int classes = static_cast<int>(cfg.get_int("model.num_classes"));
  if (checkpoint.empty() == predictions.empty()) throw ConfigError("invalid-config: evaluate needs exactly one of --checkpoint or --predictions");
  if (!ground_truth.empty()) require_input(ground_truth, "ground-truth manifest");

  EvalReport report;
  if (!predictions.empty()) {
    require_input(predictions, "predictions manifest");
    if (ground_truth.empty()) throw ConfigError("invalid-config: --predictions needs --ground-truth");
    const auto pred = read_manifest(predictions);
    const auto gt = read_manifest(ground_truth);
    if (pred.size() != gt.size()) {
      fail(ErrorKind::InvalidData, "predictions list " + std::to_string(pred.size()) + " masks, ground truth " +
                                       std::to_string(gt.size()));
    }
    ConfusionMatrix cm(classes);
    for (std::size_t i = 0; i < gt.size(); ++i) {
      confusion_update(cm, load_mask_png(pred[i].mask_path, classes), load_mask_png(gt[i].mask_path, classes));
    }
    report = miou(cm, "predictions");
  } else {
    require_input(checkpoint, "checkpoint");
    const Checkpoint ckpt = load_checkpoint(checkpoint);
    if (ckpt.model.head != Head::Segmenter) {
      fail(ErrorKind::ContractViolation, checkpoint + ": evaluate needs a fine-tuned segmenter checkpoint, got " +
                                             to_string(ckpt.model.head) + " head");
    }
    std::vector<Sample> samples;
    if (ground_truth.empty()) {
      samples = load_dataset(cfg, "val_data");
    } else {
      for (const ManifestEntry& e : read_manifest(ground_truth)) samples.push_back(load_sample(e, classes));
    }
    std::vector<Tensor> images;
    std::vector<Mask> masks;
    for (Sample& s : samples) {
      images.push_back(normalize(s.image, ckpt.norm));
      masks.push_back(std::move(s.mask));
    }
    const Model model(ckpt.model, ckpt.params);
    report = evaluate(model, images, masks, inference_protocol(cfg), static_cast<int>(cfg.get_int("eval.batch_size")));
  }
  const fs::path path = report_path.empty() ? out_root(c) / "eval.csv" : fs::path(report_path);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_report(path.string(), report);
  std::cout << format_report(report);
  return 0;
}

int cmd_sweep(const Common& c, int jobs) {
  const Config cfg = assemble(c);
  try {
    for (const SweepArm& arm : expand_sweep(cfg)) validate_config(arm.cfg);
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  SweepOptions options;
  options.out_dir = out_root(c).string();
  options.jobs = jobs;
  options.progress = progress;
  const SweepSummary s = run_sweep(cfg, options);
  std::cerr << s.arms << " arms: " << s.executed << " run, " << s.skipped << " already done, " << s.failed << " failed\n";
  std::cout << s.results_path << '\n' << s.aggregate_path << '\n';
  return s.failed == 0 ? 0 : 2;
}

int cmd_plot_data(const Common& c, const std::string& results, const std::string& metric) {
  require_input(results, "sweep csv");
  CsvTable table = read_csv(results);
  std::vector<std::string> files;
  try {
    files = plot_data(table, (out_root(c) / "plot").string(), metric);
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::InvalidConfig) throw ConfigError(e.what());
    throw;
  }
  for (const std::string& f : files) std::cout << f << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  // Keep large activation buffers on the heap between steps instead of
  // returning them to the kernel (and faulting them back in) every batch.
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  CLI::App app{"Denoising pretraining and fine-tuning harness"};
  app.require_subcommand(1);
  app.fallthrough();
  Common common;
  app.add_option("--config", common.config_path, "config file (key = value lines)");
  app.add_option("--set", common.overrides, "override, key=value (repeatable; wins over --config)")->allow_extra_args(false);
  app.add_option("--seed", common.seed, "sets encoder.seed, denoise.seed, finetune.seed and sweep.seeds");
  app.add_option("--out", common.out, "output root (default $DDEP_OUT, else ./out)");

  std::vector<std::string> splits{"pretrain_data", "finetune_data", "val_data"};
  auto* gen = app.add_subcommand("gen-data", "write the synthetic datasets as PNG + manifest");
  gen->add_option("--split", splits, "pretrain_data, finetune_data and/or val_data");

  auto* enc = app.add_subcommand("pretrain-encoder", "supervised classification pretraining of the encoder");

  std::string encoder_ckpt;
  auto* den = app.add_subcommand("pretrain-denoise", "denoising pretraining (denoise.mode = ddep or dep)");
  den->add_option("--encoder", encoder_ckpt, "encoder checkpoint (sets denoise.init_from)");

  std::string init_from;
  auto* ft = app.add_subcommand("finetune", "segmentation fine-tuning on the label-fraction subset");
  ft->add_option("--init-from", init_from, "pretrained checkpoint (sets finetune.init_from)");

  std::string checkpoint, predictions, ground_truth, report_path;
  auto* ev = app.add_subcommand("evaluate", "mIoU of a checkpoint or of predicted masks");
  ev->add_option("--checkpoint", checkpoint, "fine-tuned checkpoint");
  ev->add_option("--predictions", predictions, "manifest of predicted masks");
  ev->add_option("--ground-truth", ground_truth, "manifest of ground-truth masks (default: val_data)");
  ev->add_option("--report", report_path, "report path (default <out>/eval.csv)");

  int jobs = 1;
  auto* sw = app.add_subcommand("sweep", "run the sweep.axis.* grid with result caching and resume");
  sw->add_option("--jobs", jobs, "arms run in parallel")->check(CLI::PositiveNumber);

  std::string results, metric = "best_miou";
  auto* pd = app.add_subcommand("plot-data", "per-regime label-fraction series from a sweep csv");
  pd->add_option("--results", results, "sweep results.csv")->required();
  pd->add_option("--metric", metric, "best_miou or final_miou");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*gen) return cmd_gen_data(common, splits);
    if (*ev) return cmd_evaluate(common, checkpoint, predictions, ground_truth, report_path);
    if (*sw) return cmd_sweep(common, jobs);
    if (*pd) return cmd_plot_data(common, results, metric);
    if (*den && !encoder_ckpt.empty()) {
      require_input(encoder_ckpt, "encoder checkpoint");
      common.overrides.push_back("denoise.init_from=" + encoder_ckpt);
    }
    if (*ft && !init_from.empty()) {
      require_input(init_from, "checkpoint");
      common.overrides.push_back("finetune.init_from=" + init_from);
    }
    const Config cfg = assemble(common);
    const fs::path root = out_root(common);
    if (*enc) write_stage(root / "encoder", pretrain_encoder(cfg, progress), cfg);
    if (*den) write_stage(root / to_string(denoise_stage(cfg)), pretrain_denoise(cfg, progress), cfg);
    if (*ft) {
      const StageOutput out = finetune(cfg, progress);
      write_stage(root / "finetune", out, cfg);
      std::cerr << "best val mIoU " << out.report->miou << ", final " << out.final_report->miou << '\n';
    }
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "ddep: " << e.what() << '\n';
    return 1;
  } catch (const Error& e) {
    std::cerr << "ddep: " << e.what() << '\n';
    return e.kind() == ErrorKind::InvalidConfig ? 1 : 2;
  } catch (const std::exception& e) {
    std::cerr << "ddep: " << e.what() << '\n';
    return 2;
  }
}
