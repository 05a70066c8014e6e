#include <malloc.h>

#include <CLI11.hpp>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>

#include "bwcloud/dataset.hpp"
#include "bwcloud/experiments.hpp"
#include "bwcloud/synthetic.hpp"
#include "bwcloud/workers.hpp"

namespace fs = std::filesystem;
using namespace bwcloud;

namespace {

constexpr std::uint64_t kDefaultSeed = 20240611;

struct RunConfig {
  std::string command;
  std::string plan;
  std::string manifest;
  std::string camera;
  std::string input;
  std::string results;
  std::vector<std::string> profiles;
  std::string out;
  std::uint64_t seed = kDefaultSeed;
  bool seed_given = false;
  std::size_t workers = 1;
  bool quiet = false;
};

std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : bytes) h = (h ^ c) * 1099511628211ull;
  return h;
}

std::string hex(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// run_manifest.txt: everything needed to rerun the command. Kept apart from
/// the result files because it records wall-clock timings.
class RunManifest {
 public:
  RunManifest(const RunConfig& cfg, int argc, char** argv) {
    os_ << "tool = bwcloud " << BWCLOUD_VERSION << "\n";
    os_ << "command = " << cfg.command << "\n";
    std::string line;
    for (int i = 0; i < argc; ++i) line += (i ? " " : "") + std::string(argv[i]);
    os_ << "argv = " << line << "\n";
    os_ << "seed = " << cfg.seed << "\n";
    os_ << "workers = " << cfg.workers << "\n";
    os_ << "compiler = " << __VERSION__ << "\n";
  }

  void input(const std::string& path) {
    const auto bytes = read_text_file(path);
    os_ << "input." << n_inputs_++ << " = " << path << " fnv1a64=" << hex(fnv1a(bytes)) << " bytes=" << bytes.size() << "\n";
  }

  void line(const std::string& key, const std::string& value) { os_ << key << " = " << value << "\n"; }

  void write(const std::string& dir, double seconds) {
    os_ << "elapsed_seconds = " << fmt(seconds, 3) << "\n";
    write_text_file((fs::path(dir) / "run_manifest.txt").string(), os_.str());
  }

 private:
  std::ostringstream os_;
  std::size_t n_inputs_ = 0;
};

std::string cloud_path(const std::string& out, const ManifestRecord& r) {
  return (fs::path(out) / r.farm_id / r.cow_id / (r.frame_id + ".bwpc")).string();
}

void cmd_convert(const RunConfig& cfg, RunManifest& rm) {
  const auto manifest = load_manifest(cfg.manifest);
  const auto camera = load_camera_profile(cfg.camera);
  rm.input(cfg.manifest);
  rm.input(cfg.camera);
  std::vector<Task> tasks;
  for (const auto& r : manifest.records)
    tasks.push_back([&] {
      if (r.farm_id != camera.farm_id) fail(ErrorKind::config, "frame of farm '" + r.farm_id + "' with camera '" + camera.farm_id + "'");
      const auto frame = clip_depth(load_depth_csv(manifest.resolve(r), {r.farm_id, r.cow_id, r.frame_id}));
      const auto path = cloud_path(cfg.out, r);
      fs::create_directories(fs::path(path).parent_path());
      save_cloud(path, deproject(frame, camera));
    });
  thread_pool_executor(cfg.workers)(tasks);
  if (!cfg.quiet) std::cout << "converted " << manifest.records.size() << " frames into " << cfg.out << "\n";
}

void cmd_preprocess(const RunConfig& cfg, RunManifest&) {
  std::vector<fs::path> files;
  if (!fs::is_directory(cfg.input)) fail(ErrorKind::io, "input directory " + cfg.input + " does not exist");
  for (const auto& e : fs::recursive_directory_iterator(cfg.input))
    if (e.is_regular_file() && e.path().extension() == ".bwpc") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) fail(ErrorKind::empty_input, "no .bwpc clouds under " + cfg.input);
  std::vector<Task> tasks;
  for (const auto& f : files)
    tasks.push_back([&] {
      const auto out = fs::path(cfg.out) / fs::relative(f, cfg.input);
      fs::create_directories(out.parent_path());
      save_cloud(out.string(), preprocess(load_cloud(f.string()), cfg.seed));
    });
  thread_pool_executor(cfg.workers)(tasks);
  if (!cfg.quiet) std::cout << "preprocessed " << files.size() << " clouds into " << cfg.out << "\n";
}

FarmProfile resolve_profile(const std::string& spec, RunManifest& rm) {
  if (spec == "large") return synthetic_large_profile();
  if (spec == "medium") return synthetic_medium_profile();
  if (spec == "small") return synthetic_small_profile();
  rm.input(spec);
  return parse_farm_profile(read_text_file(spec), spec);
}

void cmd_synth(const RunConfig& cfg, RunManifest& rm) {
  std::vector<FarmProfile> profiles;
  for (const auto& p : cfg.profiles) profiles.push_back(resolve_profile(p, rm));
  for (const auto& p : profiles) {
    const auto farm = generate_farm(p, cfg.seed, cfg.out);
    if (!cfg.quiet)
      std::cout << "farm " << p.farm_id << ": " << farm.cows.size() << " cows, " << farm.manifest.records.size() << " frames -> "
                << farm.manifest_path << "\n";
  }
}

void cmd_experiment(const RunConfig& cfg, RunManifest& rm) {
  auto plan = load_plan(cfg.plan);
  rm.input(cfg.plan);
  if (cfg.seed_given) plan.master_seed = cfg.seed;
  rm.line("master_seed", std::to_string(plan.master_seed));
  for (const auto& [farm, src] : plan.farms) {
    rm.input(src.manifest);
    rm.input(src.camera);
  }
  const Executor exec = thread_pool_executor(cfg.workers);
  const auto t0 = std::chrono::steady_clock::now();
  const auto bank = load_plan_farms(plan, exec);
  if (!cfg.quiet) std::cerr << "loaded " << bank.size() << " frames\n";
  Logger log;
  if (!cfg.quiet) log = [](const std::string& s) { std::cerr << s << "\n"; };
  const auto run = run_design(plan, bank, exec, log);

  const fs::path out(cfg.out);
  write_text_file((out / "results.csv").string(), results_csv(run.results));
  write_text_file((out / "predictions.csv").string(), predictions_csv(run.results));
  write_text_file((out / "splits.csv").string(), splits_csv(run.splits));
  const auto table = results_table(result_rows(run.results));
  write_text_file((out / "summary.csv").string(), summary_csv(table));
  write_text_file((out / "summary.txt").string(), summary_console(table));
  if (!cfg.quiet) std::cout << summary_console(table);

  const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  for (const auto& t : run.timings) rm.line("job.phase" + std::to_string(t.phase) + "." + t.name, fmt(t.seconds, 3));
  rm.line("experiment_seconds", fmt(elapsed, 3));
  rm.line("projected_makespan_8_workers", fmt(projected_makespan(run.timings, 8), 3));
}

void cmd_report(const RunConfig& cfg, RunManifest& rm) {
  rm.input(cfg.results);
  const auto rows = parse_results_csv(read_text_file(cfg.results), cfg.results);
  const auto table = results_table(rows);
  if (!cfg.out.empty()) {
    write_text_file((fs::path(cfg.out) / "summary.csv").string(), summary_csv(table));
    write_text_file((fs::path(cfg.out) / "summary.txt").string(), summary_console(table));
  }
  if (!cfg.quiet) std::cout << summary_console(table);
}

std::string one_line(std::string s) {
  for (auto& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  return s;
}

void tune_allocator() {
  // Training allocates and frees large activation buffers every step; keeping
  // them on the heap instead of fresh mmaps avoids repeated page faults.
  mallopt(M_MMAP_THRESHOLD, 32 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 512 << 20);
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Cattle body weight estimation from dorsal point clouds"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(BWCLOUD_VERSION));
  RunConfig cfg;

  auto add_common = [&](CLI::App* sub, bool with_out_required) {
    auto* o = sub->add_option("--out", cfg.out, "Output directory");
    if (with_out_required) o->required();
    sub->add_option("--seed", cfg.seed, "Master seed (default " + std::to_string(kDefaultSeed) + ")")
        ->each([&](const std::string&) { cfg.seed_given = true; });
    sub->add_option("--workers", cfg.workers, "Parallel workers")->check(CLI::PositiveNumber);
    sub->add_flag("--quiet", cfg.quiet, "Suppress progress output");
  };

  auto* convert = app.add_subcommand("convert", "Depth CSV frames -> raw point-cloud binaries");
  convert->add_option("--manifest", cfg.manifest, "Frame manifest")->required()->check(CLI::ExistingFile);
  convert->add_option("--camera", cfg.camera, "Camera profile")->required()->check(CLI::ExistingFile);
  add_common(convert, true);

  auto* prep = app.add_subcommand("preprocess", "Clean, normalize and standardize point-cloud binaries");
  prep->add_option("--input", cfg.input, "Directory of .bwpc clouds")->required()->check(CLI::ExistingDirectory);
  add_common(prep, true);

  auto* synth = app.add_subcommand("synth", "Generate synthetic farms");
  synth->add_option("--profile", cfg.profiles, "Farm profile file, or preset large|medium|small")->required();
  add_common(synth, true);

  auto* experiment = app.add_subcommand("experiment", "Run an experiment plan end to end");
  experiment->add_option("--plan", cfg.plan, "Plan file")->required()->check(CLI::ExistingFile);
  add_common(experiment, true);

  auto* report = app.add_subcommand("report", "Summarize a results file");
  report->add_option("--results", cfg.results, "results.csv written by experiment")->required()->check(CLI::ExistingFile);
  add_common(report, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    const CLI::App* where = &app;
    if (!app.get_subcommands().empty()) where = app.get_subcommands().front();
    std::cerr << "error: usage: " << one_line(e.what()) << "\n" << where->help();
    return 2;
  }

  cfg.command = app.get_subcommands().front()->get_name();
  const auto t0 = std::chrono::steady_clock::now();
  try {
    RunManifest rm(cfg, argc, argv);
    if (cfg.command == "convert") cmd_convert(cfg, rm);
    else if (cfg.command == "preprocess") cmd_preprocess(cfg, rm);
    else if (cfg.command == "synth") cmd_synth(cfg, rm);
    else if (cfg.command == "experiment") cmd_experiment(cfg, rm);
    else if (cfg.command == "report") cmd_report(cfg, rm);
    if (!cfg.out.empty()) rm.write(cfg.out, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  } catch (const Error& e) {
    std::cerr << "error: " << one_line(e.what()) << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: io: " << one_line(e.what()) << "\n";
    return 1;
  }
  return 0;
}
