#pragma once

#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "ddep/config.hpp"
#include "ddep/pipelines.hpp"

namespace ddep {

/// One cell of the sweep grid: the base config with one value per axis and
/// finetune.seed set from sweep.seeds.
struct SweepArm {
  Config cfg;
  /// (swept key, value) in axis order.
  std::vector<std::pair<std::string, std::string>> axis_values;
  std::uint64_t seed = 0;
  /// Stable across processes; identifies the row for resume.
  std::string run_hash;
};

/// Cross product of axes x seeds. InvalidConfig when it exceeds sweep.cap.
std::vector<SweepArm> expand_sweep(const Config& cfg);

/// Hash of every key a run reads, minus checkpoint paths and sweep.* keys.
std::string run_hash(const Config& cfg);

/// Stage outputs under `<root>/<stage>-<hash>/`. Each entry is produced once;
/// concurrent requests for the same entry (threads or processes) wait on an
/// advisory lock and then reuse it. Each entry records its production time
/// in wall_seconds.txt.
class StageCache {
 public:
  explicit StageCache(std::string root);

  /// Path of the cached checkpoint, running `produce` when absent.
  std::string get_or_run(Stage stage, const std::string& hash, const std::function<StageOutput()>& produce);

  int produced() const { return produced_; }

 private:
  std::string root_;
  std::mutex mutex_;
  std::map<std::string, std::unique_ptr<std::mutex>> entry_locks_;
  int produced_ = 0;
};

/// Runs the pretraining stages finetune.init needs (through `cache`), then
/// fine-tunes. An explicit finetune.init_from or denoise.init_from skips the
/// corresponding stage. finetune.init = ddep / dep also sets denoise.mode.
StageOutput run_pipeline(Config cfg, StageCache& cache, const ProgressFn& progress = {});

struct SweepOptions {
  std::string out_dir;
  int jobs = 1;
  ProgressFn progress;
  /// Stage cache root; `<out_dir>/cache` when empty. Sweeps that share a
  /// cache share their pretraining stages.
  std::string cache_dir;
};

struct SweepSummary {
  int arms = 0;
  int executed = 0;
  int skipped = 0;
  int failed = 0;
  std::string results_path;
  std::string aggregate_path;
};

/// Executes the missing arms of the sweep, appending one row per arm to
/// `<out>/results.csv` as each finishes, then rewrites `<out>/aggregate.csv`
/// from every row on disk. Run outputs go to `<out>/runs/<run_hash>/`;
/// timing.csv there splits wall time into triggered pretraining and the
/// fine-tune itself. A failing arm is recorded with its error kind in
/// the status column and does not stop the sweep.
SweepSummary run_sweep(const Config& cfg, const SweepOptions& options);

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  /// Column index, or -1.
  int column(const std::string& name) const;
};

/// Plain comma-separated text; fields never contain commas or quotes.
CsvTable parse_csv(const std::string& text);
CsvTable read_csv(const std::string& path);

std::string results_header(const std::vector<std::string>& axis_keys);

/// Mean and sample standard deviation (0 for a single value).
std::pair<double, double> mean_std(const std::vector<double>& values);

/// Groups the ok rows by every column between run_hash and seed; one output
/// row per group with runs, mean and std of best_miou and final_miou.
std::string aggregate_csv(const CsvTable& results);

/// One series file per finetune.init regime (further split by any other
/// axis columns) with label_fraction, log10_fraction, mean_miou, std_miou and
/// runs, sorted by label_fraction. `metric` is best_miou or final_miou.
/// Missing columns raise InvalidConfig naming them. Returns the files written.
std::vector<std::string> plot_data(const CsvTable& results, const std::string& out_dir,
                                   const std::string& metric = "best_miou");

}  // namespace ddep
