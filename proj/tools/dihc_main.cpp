#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>

#include "dihc/config.hpp"
#include "dihc/data.hpp"
#include "dihc/gradcheck.hpp"
#include "dihc/trainer.hpp"

namespace fs = std::filesystem;
using namespace dihc;

namespace {

constexpr const char* kVersion = "dihc 0.1.0";

int effective_threads() {
  // kernels are single-threaded; DIHC_THREADS can only cap, never raise
  int threads = 1;
  if (const char* env = std::getenv("DIHC_THREADS")) {
    const int cap = std::atoi(env);
    if (cap >= 1) threads = std::min(threads, cap);
  }
  return threads;
}

std::string mask_path_for(const std::string& vol_path) {
  fs::path p(vol_path);
  std::string name = p.filename().string();
  const auto pos = name.find("vol");
  if (pos != std::string::npos) name.replace(pos, 3, "msk");
  return (p.parent_path() / name).string();
}

struct LoadedData {
  std::vector<Sample> labelled_pool;      // entries with masks on disk
  std::vector<Volume> extra_unlabelled;   // manifest-unlabelled entries
};

LoadedData load_data_dir(const std::string& dir) {
  LoadedData out;
  const auto entries = read_manifest(dir + "/manifest.txt");
  for (const auto& e : entries) {
    const std::string vp = dir + "/" + e.path;
    if (e.labelled) {
      Sample s;
      s.vol = read_volume(vp);
      s.mask = read_mask(mask_path_for(vp));
      zscore(s.vol);
      out.labelled_pool.push_back(std::move(s));
    } else {
      Volume v = read_volume(vp);
      zscore(v);
      out.extra_unlabelled.push_back(std::move(v));
    }
  }
  return out;
}

void parse_ablation(const std::string& spec, AblationFlags& flags) {
  flags = {false, false, false};
  if (spec == "none") return;
  std::stringstream ss(spec);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok == "imd") flags.imd = true;
    else if (tok == "ms") flags.ms = true;
    else if (tok == "dihc") flags.dihc = true;
    else if (tok == "full") flags = {true, true, true};
    else if (!tok.empty()) throw ConfigError("unknown ablation token: " + tok);
  }
}

int cmd_gen_data(const std::string& out_dir, int n, int shape, uint64_t seed, bool noise_free) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) {
    std::cerr << "error: cannot create " << out_dir << ": " << ec.message() << "\n";
    return 2;
  }
  auto samples = generate_synthetic(n, shape, seed, noise_free);
  std::vector<ManifestEntry> manifest;
  char name[64];
  for (int i = 0; i < n; ++i) {
    std::snprintf(name, sizeof(name), "vol_%03d.dvol", i);
    write_volume(out_dir + "/" + name, samples[i].vol);
    manifest.push_back({name, true});
    std::snprintf(name, sizeof(name), "msk_%03d.dvol", i);
    write_mask(out_dir + "/" + name, samples[i].mask);
  }
  write_manifest(out_dir + "/manifest.txt", manifest);
  std::cout << "wrote " << n << " volumes (" << shape << "^3, seed " << seed << ") to "
            << out_dir << "\n";
  return 0;
}

int cmd_train(TrainConfig cfg, const std::string& data_dir, const std::string& out_dir,
              const std::string& resume) {
  validate_config(cfg);
  LoadedData data = load_data_dir(data_dir);
  if (static_cast<int>(data.labelled_pool.size()) <= cfg.test_count) {
    throw ConfigError("not enough labelled-capable volumes for test_count");
  }

  // held-out evaluation split, then the semi-supervised label split
  std::vector<int> order(data.labelled_pool.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  Rng rng = derive_rng(cfg.seed, {0xd474});
  rng.shuffle(order);
  std::vector<Sample> eval_set, train_pool;
  for (size_t i = 0; i < order.size(); ++i) {
    auto& s = data.labelled_pool[order[i]];
    if (static_cast<int>(i) < cfg.test_count) eval_set.push_back(std::move(s));
    else train_pool.push_back(std::move(s));
  }
  DatasetSplit split = split_dataset(std::move(train_pool), cfg.labelled_fraction, cfg.seed);
  for (auto& v : data.extra_unlabelled) split.unlabelled.push_back(std::move(v));

  Trainer trainer(cfg, std::move(split), std::move(eval_set));
  if (!resume.empty()) trainer.load_checkpoint(resume);

  fs::create_directories(out_dir);
  {
    std::ofstream mf(out_dir + "/manifest.txt");
    mf << dump_config(cfg);
    mf << "version = " << kVersion << "\n";
    mf << "threads = " << effective_threads() << "\n";
    mf << "data_dir = " << data_dir << "\n";
    mf << "out_dir = " << out_dir << "\n";
    if (!resume.empty()) mf << "resume = " << resume << "\n";
  }

  trainer.run(out_dir);
  const auto& log = trainer.log();
  if (!log.evals.empty()) {
    const auto mean = mean_report(log.evals.back().second);
    std::cout << "final mean dice " << mean.dice << " over " << log.evals.back().second.size()
              << " cases\n";
  }
  std::cout << "run complete: " << out_dir << "\n";
  return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_dir,
             const std::string& out_csv) {
  const auto blobs = read_checkpoint(ckpt_path);
  const CheckpointArch arch = checkpoint_arch(blobs);
  TrainConfig cfg;
  cfg.base_channels = arch.base_channels;
  cfg.depth = arch.depth;
  cfg.patch = arch.patch;
  cfg.ablation.imd = arch.imd;
  cfg.seed = checkpoint_seed(blobs);

  LoadedData data = load_data_dir(data_dir);
  if (data.labelled_pool.empty()) {
    std::cerr << "error: no labelled volumes in " << data_dir << "\n";
    return 2;
  }
  Trainer trainer(cfg, DatasetSplit{}, std::move(data.labelled_pool));
  trainer.load_checkpoint(ckpt_path);
  const auto reports = trainer.evaluate();
  std::ofstream os(out_csv);
  if (!os) {
    std::cerr << "error: cannot write " << out_csv << "\n";
    return 2;
  }
  os << metrics_csv(reports, /*include_mean=*/true);
  std::cout << "mean dice " << mean_report(reports).dice << " over " << reports.size()
            << " cases\n";
  return 0;
}

int cmd_gradcheck(uint64_t seed, int seeds_per_op, const std::string& corrupt) {
  const auto results = run_gradcheck_suite(seed, seeds_per_op, corrupt);
  bool all_pass = true;
  std::vector<std::string> failed;
  for (const auto& r : results) {
    std::printf("%-22s worst_rel=%.3e seeds=%d %s\n", r.op.c_str(), r.worst_rel, r.seeds,
                r.pass ? "ok" : "FAIL");
    all_pass = all_pass && r.pass;
    if (!r.pass) failed.push_back(r.op);
  }
  if (!all_pass) {
    std::cout << "gradcheck FAILED:";
    for (const auto& f : failed) std::cout << " " << f;
    std::cout << "\n";
    return 1;
  }
  std::cout << "gradcheck passed: " << results.size() << " ops\n";
  return 0;
}

std::map<std::string, std::string> read_kv_file(const std::string& path) {
  std::map<std::string, std::string> kv;
  std::ifstream is(path);
  std::string line;
  while (std::getline(is, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t\r");
      const auto b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

int cmd_report(const std::string& runs_dir, const std::string& out_csv) {
  std::vector<std::string> run_dirs;
  if (fs::is_directory(runs_dir)) {
    for (const auto& entry : fs::directory_iterator(runs_dir)) {
      if (entry.is_directory() && fs::exists(entry.path() / "manifest.txt")) {
        run_dirs.push_back(entry.path().string());
      }
    }
  }
  std::sort(run_dirs.begin(), run_dirs.end());
  if (run_dirs.empty()) {
    std::cerr << "error: no runs found under " << runs_dir << "\n";
    return 2;
  }

  std::ostringstream table, curves;
  table << "run,labelled_fraction,enable_imd,enable_ms,enable_dihc,consistency,dice,jaccard,asd,hd95\n";
  curves << "run,step,l_sup,l_mc,l_dihc,lambda_cst,l_total,disagreement\n";
  for (const auto& dir : run_dirs) {
    const std::string run = fs::path(dir).filename().string();
    auto kv = read_kv_file(dir + "/manifest.txt");
    std::string mean_cells = ",,,";
    {
      std::ifstream is(dir + "/eval_final.csv");
      std::string line;
      while (std::getline(is, line)) {
        if (line.rfind("mean,", 0) == 0) {
          mean_cells = line.substr(5);
          break;
        }
      }
    }
    table << run << ',' << kv["labelled_fraction"] << ',' << kv["enable_imd"] << ','
          << kv["enable_ms"] << ',' << kv["enable_dihc"] << ',' << kv["consistency"] << ','
          << mean_cells << "\n";
    std::ifstream rl(dir + "/runlog.csv");
    std::string line;
    bool header = true;
    while (std::getline(rl, line)) {
      if (header) {
        header = false;
        continue;
      }
      if (!line.empty()) curves << run << ',' << line << "\n";
    }
  }

  std::ofstream ot(out_csv);
  if (!ot) {
    std::cerr << "error: cannot write " << out_csv << "\n";
    return 2;
  }
  ot << table.str();
  std::string curves_path = out_csv;
  const auto dot = curves_path.rfind(".csv");
  if (dot != std::string::npos && dot == curves_path.size() - 4) {
    curves_path = curves_path.substr(0, dot) + "_curves.csv";
  } else {
    curves_path += "_curves.csv";
  }
  std::ofstream oc(curves_path);
  oc << curves.str();
  std::cout << "report: " << run_dirs.size() << " runs -> " << out_csv << ", " << curves_path
            << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DiHC-Net semi-supervised segmentation workbench"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  std::string gen_out;
  int gen_n = 0, gen_shape = 32;
  uint64_t gen_seed = 1;
  bool gen_noise_free = false;
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--n", gen_n, "number of volumes")->required()->check(CLI::PositiveNumber);
  gen->add_option("--shape", gen_shape, "cubic volume side (divisible by 8)");
  gen->add_option("--seed", gen_seed, "generator seed");
  gen->add_flag("--noise-free", gen_noise_free, "disable noise and bias field");

  // train
  auto* train = app.add_subcommand("train", "train the three-model ensemble");
  std::string tr_data, tr_out, tr_config, tr_resume, tr_ablation;
  TrainConfig cfg;
  double tr_fraction = -1;
  int tr_tmax = -1, tr_eval_every = -1, tr_test_count = -1;
  uint64_t tr_seed = 0;
  bool tr_seed_set = false, tr_no_consistency = false, tr_no_augment = false,
       tr_no_detach = false, tr_ramp_squared = false;
  double tr_lr = -1;
  train->add_option("--data", tr_data, "dataset directory (gen-data output)")->required();
  train->add_option("--out", tr_out, "run output directory")->required();
  train->add_option("--config", tr_config, "key = value config file");
  train->add_option("--labelled-fraction", tr_fraction, "fraction of training volumes keeping masks");
  train->add_option("--t-max", tr_tmax, "training steps");
  train->add_option("--seed", tr_seed, "run seed")->each([&](const std::string&) { tr_seed_set = true; });
  train->add_option("--ablation", tr_ablation, "comma list of imd,ms,dihc; or none/full");
  train->add_option("--eval-every", tr_eval_every, "evaluation interval");
  train->add_option("--test-count", tr_test_count, "volumes held out for evaluation");
  train->add_option("--lr", tr_lr, "learning rate");
  train->add_option("--resume", tr_resume, "checkpoint to resume from");
  train->add_flag("--no-consistency", tr_no_consistency, "zero all consistency weights");
  train->add_flag("--no-augment", tr_no_augment, "disable flips/rotations");
  train->add_flag("--no-detach-pseudo", tr_no_detach, "let gradients flow into pseudo labels");
  train->add_flag("--ramp-squared", tr_ramp_squared, "squared warm-up ramp variant");

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string ev_ckpt, ev_data, ev_out;
  ev->add_option("--checkpoint", ev_ckpt, "checkpoint file")->required();
  ev->add_option("--data", ev_data, "dataset directory")->required();
  ev->add_option("--out", ev_out, "output CSV")->required();

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of all ops");
  uint64_t gc_seed = 1;
  int gc_seeds_per_op = 20;
  std::string gc_corrupt;
  gc->add_option("--seed", gc_seed, "base seed");
  gc->add_option("--seeds-per-op", gc_seeds_per_op, "random cases per op");
  gc->add_option("--corrupt", gc_corrupt, "perturb this op's gradient (negative control)");

  // report
  auto* rp = app.add_subcommand("report", "aggregate run logs into a comparison table");
  std::string rp_runs, rp_out;
  rp->add_option("--runs", rp_runs, "directory of run outputs")->required();
  rp->add_option("--out", rp_out, "output CSV")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(gen_out, gen_n, gen_shape, gen_seed, gen_noise_free);
    if (train->parsed()) {
      if (!tr_config.empty()) apply_config_file(cfg, tr_config);
      if (tr_fraction >= 0) cfg.labelled_fraction = tr_fraction;
      if (tr_tmax >= 0) cfg.t_max = tr_tmax;
      if (tr_seed_set) cfg.seed = tr_seed;
      if (tr_eval_every >= 0) cfg.eval_every = tr_eval_every;
      if (tr_test_count >= 0) cfg.test_count = tr_test_count;
      if (tr_lr > 0) cfg.lr = static_cast<float>(tr_lr);
      if (!tr_ablation.empty()) parse_ablation(tr_ablation, cfg.ablation);
      if (tr_no_consistency) cfg.consistency = false;
      if (tr_no_augment) cfg.augment = false;
      if (tr_no_detach) cfg.detach_pseudo = false;
      if (tr_ramp_squared) cfg.ramp_squared = true;
      return cmd_train(cfg, tr_data, tr_out, tr_resume);
    }
    if (ev->parsed()) return cmd_eval(ev_ckpt, ev_data, ev_out);
    if (gc->parsed()) return cmd_gradcheck(gc_seed, gc_seeds_per_op, gc_corrupt);
    if (rp->parsed()) return cmd_report(rp_runs, rp_out);
  } catch (const NumericalError& e) {
    std::cerr << "numerical abort: " << e.what() << "\n";
    return 3;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DvolError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
