#include "ddep/sweep.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

#include "ddep/error.hpp"
#include "ddep/hash.hpp"

namespace ddep {

namespace fs = std::filesystem;

namespace {

constexpr const char* kRunSections[] = {"pretrain_data.", "finetune_data.", "val_data.", "model.",
                                        "encoder.",       "denoise.",       "finetune.", "eval."};

std::string num(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

// Exclusive flock on a file, released on destruction.
class FileLock {
 public:
  explicit FileLock(const std::string& path) : fd_(::open(path.c_str(), O_RDWR | O_CREAT, 0644)) {
    require(fd_ >= 0, ErrorKind::Io, "cannot open lock file " + path);
    if (::flock(fd_, LOCK_EX) != 0) {
      ::close(fd_);
      fail(ErrorKind::Io, "cannot lock " + path);
    }
  }
  ~FileLock() {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
  FileLock(const FileLock&) = delete;
  FileLock& operator=(const FileLock&) = delete;

 private:
  int fd_;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorKind::Io, "cannot write " + path.string());
  out << text;
}

void write_stage_dir(const fs::path& dir, const StageOutput& out, const std::string& config_text) {
  fs::create_directories(dir);
  out.log.write((dir / "").string());
  write_text(dir / "config.txt", config_text);
  if (out.report) write_report((dir / "eval.csv").string(), *out.report);
  save_checkpoint((dir / "model.ckpt").string(), out.checkpoint);
}

// Field text safe for the comma-separated layout.
std::string field(std::string s) {
  std::replace(s.begin(), s.end(), ',', ';');
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

// Seconds this thread spent producing cache entries, so a sweep run can
// report its fine-tune time apart from the pretraining it triggered.
thread_local double produce_seconds = 0.0;

}  // namespace

std::string run_hash(const Config& cfg) {
  return sha256_hex(cfg.text(std::vector<std::string>(std::begin(kRunSections), std::end(kRunSections)),
                             {"denoise.init_from", "finetune.init_from"}));
}

std::vector<SweepArm> expand_sweep(const Config& cfg) {
  const auto axes = cfg.axes();
  if (axes.contains("finetune.seed")) {
    fail(ErrorKind::InvalidConfig, "key 'sweep.axis.finetune.seed': list repeat seeds in sweep.seeds instead");
  }
  std::vector<std::uint64_t> seeds;
  for (const std::string& s : split_list(cfg.get("sweep.seeds"))) {
    std::uint64_t v = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) {
      fail(ErrorKind::InvalidConfig, "key 'sweep.seeds': bad seed '" + s + "'");
    }
    seeds.push_back(v);
  }
  if (seeds.empty()) fail(ErrorKind::InvalidConfig, "key 'sweep.seeds': needs at least one seed");
  const long long cap = cfg.get_int("sweep.cap");
  long long size = static_cast<long long>(seeds.size());
  for (const auto& [key, values] : axes) size *= static_cast<long long>(values.size());
  if (size > cap) {
    fail(ErrorKind::InvalidConfig, "sweep expands to " + std::to_string(size) + " runs, above sweep.cap = " +
                                       std::to_string(cap));
  }

  Config base = cfg;
  base.erase_axes();
  std::vector<SweepArm> arms;
  std::vector<std::size_t> pick(axes.size(), 0);
  for (;;) {
    std::vector<std::pair<std::string, std::string>> values;
    Config c = base;
    std::size_t a = 0;
    for (const auto& [key, list] : axes) {
      c.set(key, list[pick[a++]]);
      values.emplace_back(key, c.get(key));
    }
    for (std::uint64_t seed : seeds) {
      SweepArm arm{c, values, seed, {}};
      arm.cfg.set("finetune.seed", std::to_string(seed));
      arm.run_hash = run_hash(arm.cfg);
      arms.push_back(std::move(arm));
    }
    // Odometer increment, last axis fastest.
    std::size_t i = pick.size();
    while (i > 0) {
      const auto& list = std::next(axes.begin(), static_cast<std::ptrdiff_t>(i - 1))->second;
      if (++pick[i - 1] < list.size()) break;
      pick[i - 1] = 0;
      --i;
    }
    if (i == 0) break;
  }
  return arms;
}

StageCache::StageCache(std::string root) : root_(std::move(root)) { fs::create_directories(root_); }

std::string StageCache::get_or_run(Stage stage, const std::string& hash, const std::function<StageOutput()>& produce) {
  const std::string name = to_string(stage) + "-" + hash;
  const fs::path dir = fs::path(root_) / name;
  const fs::path ckpt = dir / "model.ckpt";
  std::mutex* entry = nullptr;
  {
    std::lock_guard<std::mutex> lock(mutex_);
    auto& slot = entry_locks_[name];
    if (!slot) slot = std::make_unique<std::mutex>();
    entry = slot.get();
  }
  std::lock_guard<std::mutex> in_process(*entry);
  FileLock across_processes((fs::path(root_) / (name + ".lock")).string());
  if (fs::exists(ckpt)) return ckpt.string();
  const auto start = std::chrono::steady_clock::now();
  const StageOutput out = produce();
  require(out.checkpoint.config_hash == hash, ErrorKind::ContractViolation,
          "stage " + to_string(stage) + " produced hash " + out.checkpoint.config_hash + ", cache expected " + hash);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  produce_seconds += seconds;
  fs::create_directories(dir);
  write_text(dir / "wall_seconds.txt", num(seconds) + "\n");
  write_stage_dir(dir, out, out.checkpoint.config_text);
  {
    std::lock_guard<std::mutex> lock(mutex_);
    ++produced_;
  }
  return ckpt.string();
}

StageOutput run_pipeline(Config cfg, StageCache& cache, const ProgressFn& progress) {
  const std::string init = cfg.get_choice("finetune.init", {"none", "encoder", "ddep", "dep"});
  if (init == "none" || !cfg.get("finetune.init_from").empty()) return finetune(cfg, progress);

  if (init == "ddep" || init == "dep") cfg.set("denoise.mode", init);
  const bool needs_encoder = init == "encoder" || denoise_needs_encoder(cfg);
  std::string encoder_hash;
  std::string encoder_path;
  if (needs_encoder && (init == "encoder" || cfg.get("denoise.init_from").empty())) {
    encoder_hash = stage_hash(cfg, Stage::EncoderSupervised, "");
    encoder_path = cache.get_or_run(Stage::EncoderSupervised, encoder_hash, [&] { return pretrain_encoder(cfg, progress); });
  } else if (needs_encoder) {
    encoder_path = cfg.get("denoise.init_from");
    encoder_hash = load_checkpoint(encoder_path).config_hash;
  }
  if (init == "encoder") {
    cfg.set("finetune.init_from", encoder_path);
    return finetune(cfg, progress);
  }
  if (needs_encoder) cfg.set("denoise.init_from", encoder_path);
  const Stage stage = denoise_stage(cfg);
  const std::string hash = stage_hash(cfg, stage, encoder_hash);
  cfg.set("finetune.init_from", cache.get_or_run(stage, hash, [&] { return pretrain_denoise(cfg, progress); }));
  return finetune(cfg, progress);
}

std::string results_header(const std::vector<std::string>& axis_keys) {
  std::string h = "run_hash";
  for (const std::string& k : axis_keys) h += "," + k;
  return h + ",seed,best_miou,final_miou,wall_seconds,status,checkpoint";
}

SweepSummary run_sweep(const Config& cfg, const SweepOptions& options) {
  const std::vector<SweepArm> arms = expand_sweep(cfg);
  std::vector<std::string> axis_keys;
  for (const auto& [key, values] : cfg.axes()) axis_keys.push_back(key);
  const std::string header = results_header(axis_keys);

  const fs::path out(options.out_dir);
  fs::create_directories(out);
  SweepSummary summary;
  summary.arms = static_cast<int>(arms.size());
  summary.results_path = (out / "results.csv").string();
  summary.aggregate_path = (out / "aggregate.csv").string();
  const std::string lock_path = (out / "results.csv.lock").string();

  std::set<std::string> done;
  {
    FileLock lock(lock_path);
    if (fs::exists(summary.results_path) && fs::file_size(summary.results_path) > 0) {
      const CsvTable existing = read_csv(summary.results_path);
      std::string found;
      for (const std::string& h : existing.header) found += (found.empty() ? "" : ",") + h;
      require(found == header, ErrorKind::InvalidConfig,
              summary.results_path + " has columns '" + found + "', this sweep writes '" + header +
                  "'; use a fresh --out directory");
      for (const auto& row : existing.rows) done.insert(row[0]);
    } else {
      write_text(summary.results_path, header + "\n");
    }
  }

  std::vector<const SweepArm*> todo;
  for (const SweepArm& arm : arms) {
    if (done.contains(arm.run_hash)) {
      ++summary.skipped;
    } else {
      todo.push_back(&arm);
      done.insert(arm.run_hash);
    }
  }

  StageCache cache(options.cache_dir.empty() ? (out / "cache").string() : options.cache_dir);
  std::mutex append_mutex;
  std::atomic<std::size_t> next{0};
  std::atomic<int> failed{0};
  const auto say = [&](const std::string& line) {
    if (options.progress) {
      std::lock_guard<std::mutex> lock(append_mutex);
      options.progress(line);
    }
  };
  const auto worker = [&] {
    for (std::size_t i = next++; i < todo.size(); i = next++) {
      const SweepArm& arm = *todo[i];
      const fs::path dir = out / "runs" / arm.run_hash;
      std::string label;
      for (const auto& [k, v] : arm.axis_values) label += k + "=" + v + " ";
      label += "seed=" + std::to_string(arm.seed);
      say("[" + std::to_string(i + 1) + "/" + std::to_string(todo.size()) + "] " + label);
      const auto start = std::chrono::steady_clock::now();
      produce_seconds = 0.0;
      std::string best, final_miou, status = "ok", checkpoint;
      try {
        const StageOutput result = run_pipeline(arm.cfg, cache, options.jobs == 1 ? options.progress : ProgressFn{});
        write_stage_dir(dir, result, arm.cfg.text());
        const double total = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        write_text(dir / "timing.csv", "pretrain_seconds,finetune_seconds\n" + num(produce_seconds) + "," +
                                           num(total - produce_seconds) + "\n");
        best = num(result.report->miou);
        final_miou = num(result.final_report->miou);
        checkpoint = (dir / "model.ckpt").string();
      } catch (const Error& e) {
        status = "failed:" + std::string(to_string(e.kind()));
        ++failed;
        say("run " + arm.run_hash.substr(0, 12) + " failed: " + e.what());
      } catch (const std::exception& e) {
        status = "failed:exception";
        ++failed;
        say("run " + arm.run_hash.substr(0, 12) + " failed: " + e.what());
      }
      const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      std::string row = arm.run_hash;
      for (const auto& [k, v] : arm.axis_values) row += "," + field(v);
      row += "," + std::to_string(arm.seed) + "," + best + "," + final_miou + "," + num(std::round(wall * 1000.0) / 1000.0) +
             "," + status + "," + field(checkpoint) + "\n";
      std::lock_guard<std::mutex> lock(append_mutex);
      FileLock file_lock(lock_path);
      std::ofstream append(summary.results_path, std::ios::app);
      append << row;
      append.flush();
      if (!append) fail(ErrorKind::Io, "cannot append to " + summary.results_path);
    }
  };
  const int jobs = std::max(1, std::min<int>(options.jobs, static_cast<int>(todo.size())));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    for (int j = 0; j < jobs; ++j) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
  }
  summary.executed = static_cast<int>(todo.size());
  summary.failed = failed;

  FileLock lock(lock_path);
  write_text(summary.aggregate_path, aggregate_csv(read_csv(summary.results_path)));
  return summary;
}

int CsvTable::column(const std::string& name) const {
  const auto it = std::find(header.begin(), header.end(), name);
  return it == header.end() ? -1 : static_cast<int>(it - header.begin());
}

CsvTable parse_csv(const std::string& text) {
  CsvTable t;
  std::istringstream in(text);
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    for (;;) {
      const std::size_t comma = line.find(',', start);
      fields.push_back(line.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (first) {
      t.header = std::move(fields);
      first = false;
    } else {
      require(fields.size() == t.header.size(), ErrorKind::InvalidData,
              "csv row has " + std::to_string(fields.size()) + " fields, header has " + std::to_string(t.header.size()));
      t.rows.push_back(std::move(fields));
    }
  }
  return t;
}

CsvTable read_csv(const std::string& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::Io, "cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return parse_csv(ss.str());
  } catch (const Error& e) {
    fail(e.kind(), path + ": " + e.what());
  }
}

std::pair<double, double> mean_std(const std::vector<double>& values) {
  require(!values.empty(), ErrorKind::InvalidArgument, "mean of an empty set");
  // Sorted so the result does not depend on row order.
  std::vector<double> v = values;
  std::sort(v.begin(), v.end());
  double sum = 0.0;
  for (double x : v) sum += x;
  const double mean = sum / static_cast<double>(v.size());
  if (v.size() == 1) return {mean, 0.0};
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / static_cast<double>(v.size() - 1))};
}

namespace {

void require_columns(const CsvTable& t, const std::vector<std::string>& names) {
  std::string missing;
  for (const std::string& n : names) {
    if (t.column(n) < 0) missing += (missing.empty() ? "" : ", ") + n;
  }
  if (!missing.empty()) fail(ErrorKind::InvalidConfig, "sweep csv lacks column(s): " + missing);
}

double parse_value(const std::string& s, const std::string& what) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  require(ec == std::errc() && ptr == s.data() + s.size(), ErrorKind::InvalidData, what + ": bad number '" + s + "'");
  return v;
}

}  // namespace

std::string aggregate_csv(const CsvTable& results) {
  require_columns(results, {"run_hash", "seed", "best_miou", "final_miou", "status"});
  const int seed_col = results.column("seed");
  const int best_col = results.column("best_miou");
  const int final_col = results.column("final_miou");
  const int status_col = results.column("status");

  std::map<std::vector<std::string>, std::pair<std::vector<double>, std::vector<double>>> groups;
  for (const auto& row : results.rows) {
    if (row[static_cast<std::size_t>(status_col)] != "ok") continue;
    const std::vector<std::string> key(row.begin() + 1, row.begin() + seed_col);
    auto& g = groups[key];
    g.first.push_back(parse_value(row[static_cast<std::size_t>(best_col)], "best_miou"));
    g.second.push_back(parse_value(row[static_cast<std::size_t>(final_col)], "final_miou"));
  }
  std::string out;
  for (int c = 1; c < seed_col; ++c) out += results.header[static_cast<std::size_t>(c)] + ",";
  out += "runs,mean_best_miou,std_best_miou,mean_final_miou,std_final_miou\n";
  for (const auto& [key, g] : groups) {
    for (const std::string& k : key) out += k + ",";
    const auto [bm, bs] = mean_std(g.first);
    const auto [fm, fsd] = mean_std(g.second);
    out += std::to_string(g.first.size()) + "," + num(bm) + "," + num(bs) + "," + num(fm) + "," + num(fsd) + "\n";
  }
  return out;
}

std::vector<std::string> plot_data(const CsvTable& results, const std::string& out_dir, const std::string& metric) {
  if (metric != "best_miou" && metric != "final_miou") {
    fail(ErrorKind::InvalidConfig, "metric must be best_miou or final_miou, got '" + metric + "'");
  }
  require_columns(results, {"run_hash", "finetune.init", "finetune.label_fraction", "seed", metric, "status"});
  const int init_col = results.column("finetune.init");
  const int frac_col = results.column("finetune.label_fraction");
  const int seed_col = results.column("seed");
  const int metric_col = results.column(metric);
  const int status_col = results.column("status");

  // series name -> fraction text -> values
  std::map<std::string, std::map<std::string, std::vector<double>>> series;
  for (const auto& row : results.rows) {
    if (row[static_cast<std::size_t>(status_col)] != "ok") continue;
    std::string name = row[static_cast<std::size_t>(init_col)];
    for (int c = 1; c < seed_col; ++c) {
      if (c == init_col || c == frac_col) continue;
      name += "__" + results.header[static_cast<std::size_t>(c)] + "=" + row[static_cast<std::size_t>(c)];
    }
    for (char& ch : name) {
      if (!std::isalnum(static_cast<unsigned char>(ch)) && ch != '.' && ch != '_' && ch != '-' && ch != '=') ch = '_';
    }
    series[name][row[static_cast<std::size_t>(frac_col)]].push_back(
        parse_value(row[static_cast<std::size_t>(metric_col)], metric));
  }

  fs::create_directories(out_dir);
  std::vector<std::string> files;
  for (const auto& [name, points] : series) {
    std::vector<std::pair<double, const std::vector<double>*>> sorted;
    for (const auto& [frac, values] : points) sorted.emplace_back(parse_value(frac, "finetune.label_fraction"), &values);
    std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    std::string text = "label_fraction,log10_fraction,mean_miou,std_miou,runs\n";
    for (const auto& [frac, values] : sorted) {
      const auto [m, s] = mean_std(*values);
      text += num(frac) + "," + num(std::log10(frac)) + "," + num(m) + "," + num(s) + "," + std::to_string(values->size()) + "\n";
    }
    const fs::path path = fs::path(out_dir) / ("series_" + name + ".csv");
    write_text(path, text);
    files.push_back(path.string());
  }
  return files;
}

}  // namespace ddep
