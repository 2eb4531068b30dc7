#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "dbconformer/dbconformer.hpp"

namespace fs = std::filesystem;
using namespace dbc;

namespace {

constexpr std::size_t kReferenceParams = 92066;

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> overrides;
};

RunConfig load_config(const Globals& g) {
  RunConfig cfg = g.config_path.empty() ? RunConfig{} : load_run_config(g.config_path);
  for (const auto& kv : g.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    set_config_value(cfg, detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)));
  }
  cfg.validate();
  return cfg;
}

std::uint64_t pick_seed(const Globals& g, const RunConfig& cfg) { return g.seed ? *g.seed : cfg.seeds.front(); }

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path);
  if (!f) throw Error("cannot open " + path.string() + " for writing");
  f << text;
}

std::vector<TrialSet> load_data(const std::vector<std::string>& files, const std::string& dir) {
  if (!dir.empty()) return read_trialset_dir(dir);
  if (files.empty()) throw ConfigError("no data given (use --data or --data-dir)");
  std::vector<TrialSet> sets;
  for (const auto& f : files) sets.push_back(read_trialset(f));
  return sets;
}

int cmd_synth(const Globals& g, SynthConfig sc, std::string out_dir) {
  if (out_dir.empty()) out_dir = g.out.empty() ? "synthetic" : g.out;
  if (g.seed) sc.seed = *g.seed;
  const auto sets = generate_synthetic(sc);
  fs::create_directories(out_dir);
  for (const auto& s : sets) {
    std::ostringstream name;
    name << "subject_" << std::setw(2) << std::setfill('0') << s.subject_id << ".eegb";
    write_trialset(fs::path(out_dir) / name.str(), s);
  }
  write_text(fs::path(out_dir) / "synthetic.json", to_json(sc).dump(2) + "\n");
  std::cout << "wrote " << sets.size() << " subjects to " << out_dir << " (informative channels " << sc.left_channel()
            << ", " << sc.right_channel() << ")\n";
  return 0;
}

int cmd_align(const Globals& g, const std::string& in, bool online) {
  RunConfig cfg = load_config(g);
  cfg.ea.enabled = true;
  const TrialSet set = read_trialset(in);
  const TrialSet out = online ? align_online(cfg, set) : align_offline(cfg, set);
  const std::string path = g.out.empty() ? fs::path(in).replace_extension(".aligned.eegb").string() : g.out;
  write_trialset(path, out);
  std::cout << "aligned " << out.size() << " trials (" << (online ? "online" : "offline") << ") -> " << path << '\n';
  return 0;
}

int cmd_train(const Globals& g, const std::vector<std::string>& files, const std::string& dir) {
  const RunConfig cfg = load_config(g);
  const auto sets = load_data(files, dir);
  TrialSet train = detail::empty_like(sets.front(), 0);
  for (const auto& s : sets) {
    const TrialSet a = align_offline(cfg, s);
    if (a.channels != train.channels || a.samples != train.samples) {
      throw DimensionError("subject " + std::to_string(s.subject_id) + " has a different trial shape");
    }
    for (std::size_t i = 0; i < a.size(); ++i) detail::append(train, a.trial(i), a.labels[i]);
  }
  const std::uint64_t seed = pick_seed(g, cfg);
  auto result = train_one(cfg, train, seed);
  const fs::path ckpt = g.out.empty() ? fs::path("model.dbcf") : fs::path(g.out);
  if (ckpt.has_parent_path()) fs::create_directories(ckpt.parent_path());
  save_checkpoint(ckpt, result.model);
  nlohmann::json history{{"seed", seed},
                         {"trials", train.size()},
                         {"epoch_loss", result.epoch_loss},
                         {"config", to_json(cfg)},
                         {"checkpoint", ckpt.string()}};
  fs::path hist = ckpt;
  hist += ".history.json";
  write_text(hist, history.dump(2) + "\n");
  std::cout << "trained on " << train.size() << " trials, final loss " << result.epoch_loss.back() << " -> "
            << ckpt.string() << '\n';
  return 0;
}

int cmd_eval(const Globals& g, const std::string& checkpoint, const std::string& data) {
  const RunConfig cfg = load_config(g);
  DBConformer model = load_checkpoint(checkpoint);
  const TrialSet test = align_online(cfg, read_trialset(data));
  const MetricsReport r = evaluate(model, test);
  std::cout << to_kv(r);
  if (!g.out.empty()) write_text(g.out, to_json(r).dump(2) + "\n");
  return 0;
}

int cmd_run(const Globals& g, const std::string& dir) {
  RunConfig cfg = load_config(g);
  if (g.seed) cfg.seeds = {*g.seed};
  if (!g.out.empty()) cfg.out_dir = g.out;
  if (!dir.empty()) cfg.data_dir = dir;
  if (cfg.data_dir.empty()) throw ConfigError("run needs paths.data_dir or --data-dir");
  const auto sets = read_trialset_dir(cfg.data_dir);
  RunOptions opts;
  opts.on_unit_done = [](const UnitRecord& u) {
    std::ostringstream line;
    line << "seed " << u.seed << " subject " << u.subject << " fold " << u.fold << ": accuracy " << u.report.accuracy
         << " (" << std::fixed << std::setprecision(1) << u.seconds << " s)\n";
    std::cerr << line.str();
  };
  const RunRecord rec = run_protocol(cfg, sets, opts);
  std::cout << to_kv(rec);
  if (!cfg.out_dir.empty()) {
    write_text(fs::path(cfg.out_dir) / "run_record.json", to_json(rec).dump(2) + "\n");
    write_text(fs::path(cfg.out_dir) / "summary.txt", to_kv(rec));
  }
  return 0;
}

int cmd_attention(const Globals& g, const std::string& checkpoint, const std::string& data) {
  const RunConfig cfg = load_config(g);
  DBConformer model = load_checkpoint(checkpoint);
  const TrialSet set = align_online(cfg, read_trialset(data));
  const AttentionTable t = attention_scores(model, set);
  const fs::path out = g.out.empty() ? fs::path("attention.csv") : fs::path(g.out);
  write_attention_csv(out, t);
  std::cout << "channel ranking:";
  for (auto c : attention_ranking(t)) std::cout << ' ' << c;
  std::cout << "\nwrote " << t.rows.size() << " rows -> " << out.string() << '\n';
  return 0;
}

int cmd_params(const Globals& g, bool no_spatial) {
  RunConfig cfg = load_config(g);
  if (no_spatial) cfg.model.no_spatial_branch = true;
  const ParamBreakdown b = parameter_count(cfg.model);
  for (const auto& blk : b.blocks) {
    std::cout << std::left << std::setw(28) << blk.name << std::right << std::setw(10) << blk.count << '\n';
  }
  std::cout << std::left << std::setw(28) << "total" << std::right << std::setw(10) << b.total << '\n';
  const double dev = 100.0 * (static_cast<double>(b.total) - kReferenceParams) / kReferenceParams;
  std::ostringstream line;
  line << "reference 92066, deviation " << std::showpos << std::fixed << std::setprecision(3) << dev << "%\n";
  std::cout << line.str();
  return 0;
}

int cmd_gradcheck(const Globals& g, std::optional<double> step, double fault_scale) {
  ModelConfig mc = ModelConfig::small();
  if (!g.config_path.empty() || !g.overrides.empty()) mc = load_config(g).model;
  fault::gelu_backward_scale = fault_scale;
  const auto steps = step ? std::vector<double>{*step} : kModelCheckSteps;
  const GradcheckReport r = run_gradcheck(mc, g.seed.value_or(1), steps);
  for (const auto& b : r.blocks) {
    std::cout << std::left << std::setw(44) << b.name << std::right << std::setw(8) << b.elements << "  "
              << std::scientific << std::setprecision(3) << b.max_rel_error << std::defaultfloat << '\n';
  }
  std::cout << "max relative error " << std::scientific << r.max_error << " (threshold " << r.threshold << ") "
            << (r.pass() ? "PASS" : "FAIL") << '\n';
  return r.pass() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  runtime::tune_allocator();
  CLI::App app{"Dual-branch convolution/Transformer EEG decoder"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config_path, "Run config file (flat key = value)")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Seed (synth data seed, training seed, or a single-seed run)");
  app.add_option("--out", g.out, "Output path (file or directory, per subcommand)");
  app.add_option("--set", g.overrides, "Config override key=value (repeatable)");

  SynthConfig sc;
  std::string synth_dir;
  auto* synth = app.add_subcommand("synth", "Generate synthetic MI-like EEGB files");
  synth->add_option("--subjects", sc.subjects)->capture_default_str();
  synth->add_option("--trials", sc.trials, "Trials per subject")->capture_default_str();
  synth->add_option("--channels", sc.channels)->capture_default_str();
  synth->add_option("--samples", sc.samples)->capture_default_str();
  synth->add_option("--rate", sc.sample_rate, "Sample rate (Hz)")->capture_default_str();
  synth->add_option("--attenuation", sc.attenuation, "Class-dependent rhythm attenuation (1 = no signal)")
      ->capture_default_str();
  synth->add_option("--noise", sc.noise_amplitude, "1/f noise amplitude")->capture_default_str();
  synth->add_option("--out-dir", synth_dir, "Output directory");

  std::string in_file;
  bool online = false;
  auto* align_cmd = app.add_subcommand("align", "Euclidean-align one EEGB file");
  align_cmd->add_option("--in", in_file)->required()->check(CLI::ExistingFile);
  align_cmd->add_flag("--online", online, "Causal update-then-align in recording order");

  std::vector<std::string> data_files;
  std::string data_dir;
  auto* train = app.add_subcommand("train", "Train one model on all given trials");
  train->add_option("--data", data_files, "EEGB files")->check(CLI::ExistingFile);
  train->add_option("--data-dir", data_dir, "Directory of EEGB files")->check(CLI::ExistingDirectory);

  std::string checkpoint, data_file;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on one EEGB file");
  eval->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  eval->add_option("--data", data_file)->required()->check(CLI::ExistingFile);

  auto* run = app.add_subcommand("run", "Full protocol (CO, CV or LOSO) over all seeds");
  run->add_option("--data-dir", data_dir, "Directory of EEGB files")->check(CLI::ExistingDirectory);

  auto* attention = app.add_subcommand("attention", "Export per-trial channel attention scores as CSV");
  attention->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  attention->add_option("--data", data_file)->required()->check(CLI::ExistingFile);

  bool no_spatial = false;
  auto* params = app.add_subcommand("params", "Per-block trainable parameter counts");
  params->add_flag("--no-spatial-branch", no_spatial);

  std::optional<double> step;
  double fault_scale = 1.0;
  auto* gradcheck = app.add_subcommand("gradcheck", "Full-model finite-difference gradient check");
  gradcheck->add_option("--step", step, "Single finite-difference step instead of the default set");
  gradcheck->add_option("--inject-fault", fault_scale)->group("");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) return cmd_synth(g, sc, synth_dir);
    if (*align_cmd) return cmd_align(g, in_file, online);
    if (*train) return cmd_train(g, data_files, data_dir);
    if (*eval) return cmd_eval(g, checkpoint, data_file);
    if (*run) return cmd_run(g, data_dir);
    if (*attention) return cmd_attention(g, checkpoint, data_file);
    if (*params) return cmd_params(g, no_spatial);
    if (*gradcheck) return cmd_gradcheck(g, step, fault_scale);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
