// mcdit command-line front end.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "mcdit/mcdit.hpp"

namespace fs = std::filesystem;
using namespace mcdit;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitNumeric = 3;

struct Common {
  std::string config;
};

RunConfig resolve_config(const Common& c) {
  RunConfig cfg;
  if (!c.config.empty()) {
    if (!fs::exists(c.config)) throw ConfigError("config file not found: " + c.config);
    cfg = load_config(c.config);
  }
  apply_env_overrides(cfg);
  cfg.validate();
  return cfg;
}

std::string utc_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream s;
  s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return s.str();
}

std::ofstream open_out(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + p.string());
  return out;
}

void write_text(const fs::path& p, const std::string& text) {
  auto out = open_out(p);
  out << text;
}

// Timestamps stay out of the logs so that logs of identical runs compare equal
// (apart from the elapsed-time column).
class MetaFile {
 public:
  explicit MetaFile(fs::path path) : path_(std::move(path)), started_(utc_now()), t0_(std::chrono::steady_clock::now()) {}

  void finish(const std::string& status, std::int64_t steps) const {
    const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count();
    std::ostringstream s;
    s << "started = " << started_ << "\nfinished = " << utc_now() << "\nwall_seconds = " << sec
      << "\nsteps_completed = " << steps << "\nstatus = " << status << '\n';
    write_text(path_, s.str());
  }

 private:
  fs::path path_;
  std::string started_;
  std::chrono::steady_clock::time_point t0_;
};

Model load_model(const RunConfig& cfg, const std::string& ckpt) {
  if (!fs::exists(ckpt)) throw FormatError("checkpoint not found: " + ckpt);
  auto model = make_model(cfg);
  model.load(load_checkpoint(ckpt));
  return model;
}

int cmd_train_stage1(const Common& common, const std::string& out_dir, std::optional<std::int64_t> max_steps) {
  auto cfg = resolve_config(common);
  if (max_steps) cfg.stage1.max_steps = *max_steps;
  cfg.validate();
  const fs::path dir(out_dir);
  fs::create_directories(dir);
  write_text(dir / "config.ini", write_config(cfg));
  MetaFile meta(dir / "stage1_meta.txt");
  auto model = make_model(cfg);
  OptimizerState<float> opt;
  opt.config = cfg.optimizer;
  const auto data = make_training_set(cfg);
  auto log = open_out(dir / "stage1_log.csv");
  write_stage1_header(log);
  std::int64_t done = 0;
  Stage1Log hooks{&log, [&](std::int64_t step) {
                    done = step;
                    if (step % 100 == 0) std::cerr << "stage1 step " << step << "/" << cfg.stage1.max_steps << '\n';
                  }};
  try {
    train_stage1(model, opt, data, cfg, hooks);
  } catch (const NumericError& e) {
    log.flush();
    save_checkpoint(model.params(), dir / "stage1.ckpt");
    meta.finish("numeric_error", done);
    std::cerr << "error: " << e.what() << " at step " << done + 1 << "; kept checkpoint of step " << done << '\n';
    return kExitNumeric;
  }
  save_checkpoint(model.params(), dir / "stage1.ckpt");
  meta.finish("ok", done);
  std::cout << "wrote " << (dir / "stage1.ckpt").string() << " after " << done << " steps\n";
  return 0;
}

int cmd_train_stage2(const Common& common, const std::string& stage1, const std::string& out_dir,
                     std::optional<std::int64_t> max_steps) {
  auto cfg = resolve_config(common);
  if (max_steps) cfg.stage2.max_steps = *max_steps;
  cfg.validate();
  auto model = load_model(cfg, stage1);
  if (model.adapters().bank(BankId::Distill).materialized()) {
    throw StateError("checkpoint already contains a Distill bank; expected a Stage-1 checkpoint");
  }
  const fs::path dir(out_dir);
  fs::create_directories(dir);
  write_text(dir / "config.ini", write_config(cfg));
  MetaFile meta(dir / "stage2_meta.txt");
  const auto heads = prepare_stage2(model, cfg.distill, derive_seed(cfg.seed, 0x57A6E2));
  std::cerr << "building " << to_string(cfg.distill.real_source) << " pool ("
            << std::min(cfg.stage2.pool_size, cfg.data.n_train) << " samples)\n";
  const auto pool = make_distill_pool(model, cfg);
  auto opt = make_stage2_optimizers(cfg);
  auto log = open_out(dir / "stage2_log.csv");
  write_stage2_header(log);
  std::int64_t done = 0;
  try {
    train_stage2(model, heads, opt, pool, cfg, &log, [&](std::int64_t step) {
      done = step;
      if (step % 50 == 0) std::cerr << "stage2 step " << step << "/" << cfg.stage2.max_steps << '\n';
    });
  } catch (const NumericError& e) {
    log.flush();
    save_checkpoint(model.params(), dir / "stage2.ckpt");
    meta.finish("numeric_error", done);
    std::cerr << "error: " << e.what() << " at step " << done + 1 << "; kept checkpoint of step " << done << '\n';
    return kExitNumeric;
  }
  save_checkpoint(model.params(), dir / "stage2.ckpt");
  meta.finish("ok", done);
  std::cout << "wrote " << (dir / "stage2.ckpt").string() << " after " << done << " steps\n";
  return 0;
}

int cmd_sample(const Common& common, const std::string& ckpt, const std::string& garment_path,
               const std::string& masked_path, const std::string& mask_path, int steps, std::uint64_t seed,
               const std::string& out, bool no_distill) {
  const auto cfg = resolve_config(common);
  if (steps < 1) throw ConfigError("--steps must be >= 1");
  const auto garment = read_ppm(garment_path);
  const auto masked = read_ppm(masked_path);
  const auto mask = read_mask_pgm(mask_path);
  if (!garment.same_shape(masked) || mask.height != masked.height || mask.width != masked.width) {
    throw DimensionError("garment, masked person and mask must share one canvas size");
  }
  const auto model = load_model(cfg, ckpt);
  const auto img = generate_image(model, garment, make_masked_person(masked, mask), steps, seed,
                                  inference_switches(model, !no_distill));
  write_ppm(out, img);
  std::cout << "wrote " << out << '\n';
  return 0;
}

int cmd_eval(const Common& common, const std::string& ckpt, const std::string& mode, int steps, std::size_t n,
             bool per_sample, const std::string& out, bool oracle, std::size_t swap_offset, bool paste_back,
             bool no_distill) {
  auto cfg = resolve_config(common);
  if (steps < 1) throw ConfigError("--steps must be >= 1");
  if (n == 0) throw ConfigError("--n must be >= 1");
  EvalOptions opts;
  opts.mode = parse_eval_mode(mode);
  opts.swap_offset = swap_offset;
  opts.paste_back = paste_back;
  MetricsReport report;
  if (oracle) {
    report = evaluate(oracle_generator(), cfg.data, n, opts);
  } else {
    if (ckpt.empty()) throw ConfigError("eval needs --checkpoint or --oracle");
    const auto model = load_model(cfg, ckpt);
    report = evaluate(model_generator(model, steps, inference_switches(model, !no_distill)), cfg.data, n, opts);
  }
  std::ostringstream csv;
  write_report_csv(csv, report, per_sample);
  if (!out.empty()) write_text(out, csv.str());
  std::cout << csv.str();
  return 0;
}

void print_report(std::ostream& os, const std::string& role, const ParamReport& r, bool csv) {
  if (csv) {
    for (const auto& b : r.banks) {
      os << role << ',' << to_string(b.bank) << ',' << b.rank << ',' << b.count << ',' << (b.trainable ? 1 : 0) << ','
         << std::setprecision(6) << b.ratio << '\n';
    }
    os << role << ",backbone,," << r.backbone << ',' << (r.backbone_trainable ? 1 : 0) << ",1\n";
    os << role << ",trainable_total,," << r.trainable_total << ",," << r.trainable_ratio << '\n';
    return;
  }
  os << role << ":\n  backbone " << r.backbone << (r.backbone_trainable ? " (training)" : " (frozen)") << '\n';
  for (const auto& b : r.banks) {
    os << "  " << std::left << std::setw(8) << to_string(b.bank) << std::right << " rank " << std::setw(3) << b.rank
       << "  params " << std::setw(8) << b.count << "  " << std::fixed << std::setprecision(3) << 100.0 * b.ratio
       << "% of backbone" << (b.trainable ? "  training" : "") << std::defaultfloat << '\n';
  }
  os << "  trainable total " << r.trainable_total << " (" << std::fixed << std::setprecision(3)
     << 100.0 * r.trainable_ratio << "%)" << std::defaultfloat << '\n';
}

int cmd_params(const Common& common, bool csv) {
  const auto cfg = resolve_config(common);
  if (csv) std::cout << "role,entry,rank,count,trainable,ratio\n";
  print_report(std::cout, "stage1", count_params(cfg.model, cfg.adapters, stage1_switches(), true), csv);
  print_report(std::cout, "stage2", count_params(cfg.model, cfg.adapters, student_switches(), false), csv);
  return 0;
}

int cmd_gen_data(const Common& common, const std::string& out, const std::string& split, std::optional<std::size_t> n) {
  const auto cfg = resolve_config(common);
  const bool test = split == "test";
  if (!test && split != "train") throw ConfigError("--split must be train or test");
  const auto count = n.value_or(test ? cfg.data.n_test : cfg.data.n_train);
  for (std::size_t i = 0; i < count; ++i)
    dump_sample(out, gen_sample(test ? test_seed(cfg.data, i) : train_seed(cfg.data, i)));
  std::cout << "wrote " << count << " samples to " << out << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mcdit: multi-condition diffusion transformer try-on toolkit"};
  app.require_subcommand(1);
  Common common;
  auto add_config = [&](CLI::App* sub) { sub->add_option("--config", common.config, "INI run configuration"); };

  std::string out_dir = "run";
  std::optional<std::int64_t> max_steps;
  auto* s1 = app.add_subcommand("train-stage1", "train the try-on model (G and MP adapters, backbone)");
  add_config(s1);
  s1->add_option("--out", out_dir, "output directory");
  s1->add_option("--max-steps", max_steps, "override run.max_steps");

  std::string stage1_ckpt;
  auto* s2 = app.add_subcommand("train-stage2", "distill an 8-step student from a Stage-1 checkpoint");
  add_config(s2);
  s2->add_option("--stage1", stage1_ckpt, "Stage-1 checkpoint")->required();
  s2->add_option("--out", out_dir, "output directory");
  s2->add_option("--max-steps", max_steps, "override distill.max_steps");

  std::string ckpt, garment, masked, mask, out;
  int steps = 50;
  std::uint64_t seed = 0;
  bool no_distill = false;
  auto* sa = app.add_subcommand("sample", "generate one try-on image");
  add_config(sa);
  sa->add_option("--checkpoint", ckpt)->required();
  sa->add_option("--garment", garment, "garment image (PPM)")->required();
  sa->add_option("--masked-person", masked, "masked person image (PPM)")->required();
  sa->add_option("--mask", mask, "try-on region mask (PGM)")->required();
  sa->add_option("--steps", steps, "Euler steps");
  sa->add_option("--seed", seed, "noise seed");
  sa->add_option("--out", out, "output PPM")->required();
  sa->add_flag("--no-distill", no_distill, "sample with the Distill bank disabled");

  std::string mode = "paired", eval_out;
  std::optional<std::size_t> eval_n;
  std::size_t swap_offset = 1;
  bool per_sample = false, oracle = false, paste_back = false;
  auto* se = app.add_subcommand("eval", "evaluate on the synthetic test split");
  add_config(se);
  se->add_option("--checkpoint", ckpt);
  se->add_option("--mode", mode, "paired or unpaired");
  se->add_option("--steps", steps, "Euler steps");
  se->add_option("--n", eval_n, "number of test samples (default run.eval_n)");
  se->add_option("--swap-offset", swap_offset, "unpaired: garment donor offset");
  se->add_option("--out", eval_out, "metrics CSV path");
  se->add_flag("--per-sample", per_sample, "add one row per sample");
  se->add_flag("--paste-back", paste_back, "keep the known pixels outside the mask");
  se->add_flag("--oracle", oracle, "score the compositing oracle instead of a model");
  se->add_flag("--no-distill", no_distill, "evaluate with the Distill bank disabled");

  bool csv = false;
  auto* sp = app.add_subcommand("params", "report parameter counts");
  add_config(sp);
  sp->add_flag("--csv", csv, "CSV output");

  std::string split = "train";
  std::optional<std::size_t> gen_n;
  auto* sg = app.add_subcommand("gen-data", "write synthetic samples as PPM/PGM files");
  add_config(sg);
  sg->add_option("--out", out, "output directory")->required();
  sg->add_option("--split", split, "train or test");
  sg->add_option("--n", gen_n, "number of samples");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*s1) return cmd_train_stage1(common, out_dir, max_steps);
    if (*s2) return cmd_train_stage2(common, stage1_ckpt, out_dir, max_steps);
    if (*sa) return cmd_sample(common, ckpt, garment, masked, mask, steps, seed, out, no_distill);
    if (*se) {
      const auto n = eval_n ? *eval_n : resolve_config(common).eval_n;
      return cmd_eval(common, ckpt, mode, steps, n, per_sample, eval_out, oracle, swap_offset, paste_back, no_distill);
    }
    if (*sp) return cmd_params(common, csv);
    if (*sg) return cmd_gen_data(common, out, split, gen_n);
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  }
  return kExitUsage;
}
