#pragma once

// Command-line front end: gen | fit-ppca | train | bracket | check.
// Diagnostics go to stderr; data and summaries go to files or stdout.
// Exit codes: 0 ok, 2 input/config errors, 3 internal invariant failures.

#include <cstdio>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "evb/check.hpp"
#include "evb/dataset.hpp"
#include "evb/ppca.hpp"
#include "evb/trainer.hpp"

namespace evb::cli {

inline std::vector<std::size_t> parse_hidden(const std::string& s) {
  std::vector<std::size_t> widths;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok.empty()) continue;
    widths.push_back(static_cast<std::size_t>(std::stoul(tok)));
  }
  if (widths.empty()) throw std::invalid_argument("hidden: expected comma-separated widths");
  return widths;
}

inline void apply_kv(TrainConfig& cfg, const std::string& key, const std::string& value) {
  try {
    if (key == "objective") cfg.objective = objective_from_string(value);
    else if (key == "n_x") cfg.n_x = std::stoul(value);
    else if (key == "n_z") cfg.n_z = std::stoul(value);
    else if (key == "data") cfg.data_csv = value;
    else if (key == "header") cfg.csv_header = (value == "true" || value == "1");
    else if (key == "model") cfg.model_file = value;
    else if (key == "synth_points") cfg.synth_points = std::stoul(value);
    else if (key == "synth_sigma") cfg.synth_sigma = std::stod(value);
    else if (key == "epochs") cfg.epochs = std::stoul(value);
    else if (key == "batch_size") cfg.batch_size = std::stoul(value);
    else if (key == "lr") cfg.lr = std::stod(value);
    else if (key == "lr_decay") cfg.lr_decay = std::stod(value);
    else if (key == "optimizer")
      cfg.optimizer = value == "sgd" ? Optimizer::Kind::Sgd : Optimizer::Kind::Adam;
    else if (key == "mc_samples") cfg.mc_samples = std::stoul(value);
    else if (key == "seed") {
      cfg.seed = std::stoull(value);
      cfg.seed_set = true;
    } else if (key == "eval_every") cfg.eval_every = std::stoul(value);
    else if (key == "eval_mc") cfg.eval_mc = std::stoul(value);
    else if (key == "aux_lr_scale") cfg.aux_lr_scale = std::stod(value);
    else if (key == "hidden") cfg.hidden = parse_hidden(value);
    else if (key == "decoder") {
      if (value == "ppca") cfg.ppca_decoder = true;
      else if (value == "learned") cfg.ppca_decoder = false;
      else throw std::invalid_argument("decoder must be 'learned' or 'ppca'");
    }
    else if (key == "metrics") cfg.metrics_path = value;
    else if (key == "checkpoint") cfg.checkpoint_path = value;
    else if (key == "bracket_partner") cfg.bracket_partner = objective_from_string(value);
    else throw std::invalid_argument("unknown config key: " + key);
  } catch (const std::invalid_argument&) {
    throw;
  } catch (const std::exception&) {
    throw std::invalid_argument("bad value for config key '" + key + "': " + value);
  }
}

// `key = value` lines; '#' starts a comment.
inline void load_config_file(TrainConfig& cfg, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file " + path);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const auto strip = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      if (b == std::string::npos) return std::string();
      const auto e = s.find_last_not_of(" \t\r");
      return s.substr(b, e - b + 1);
    };
    const std::string stripped = strip(line);
    if (stripped.empty()) continue;
    const std::size_t eq = stripped.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument(path + ":" + std::to_string(lineno) + ": expected key = value");
    apply_kv(cfg, strip(stripped.substr(0, eq)), strip(stripped.substr(eq + 1)));
  }
}

inline std::string resolved_config(const TrainConfig& cfg) {
  std::ostringstream os;
  os << "objective = " << to_string(cfg.objective) << '\n'
     << "n_x = " << cfg.n_x << '\n'
     << "n_z = " << cfg.n_z << '\n'
     << "data = " << (cfg.data_csv.empty() ? "(synthetic)" : cfg.data_csv) << '\n'
     << "model = " << (cfg.model_file.empty() ? "(none)" : cfg.model_file) << '\n'
     << "synth_points = " << cfg.synth_points << '\n'
     << "synth_sigma = " << cfg.synth_sigma << '\n'
     << "epochs = " << cfg.epochs << '\n'
     << "batch_size = " << cfg.batch_size << '\n'
     << "lr = " << cfg.lr << '\n'
     << "lr_decay = " << cfg.lr_decay << '\n'
     << "optimizer = " << (cfg.optimizer == Optimizer::Kind::Sgd ? "sgd" : "adam") << '\n'
     << "mc_samples = " << cfg.mc_samples << '\n'
     << "seed = " << cfg.seed << '\n'
     << "eval_every = " << cfg.eval_every << '\n'
     << "eval_mc = " << cfg.eval_mc << '\n'
     << "aux_lr_scale = " << cfg.aux_lr_scale << '\n';
  os << "hidden = ";
  for (std::size_t i = 0; i < cfg.hidden.size(); ++i)
    os << cfg.hidden[i] << (i + 1 < cfg.hidden.size() ? "," : "");
  os << '\n';
  os << "decoder = " << (cfg.ppca_decoder ? "ppca" : "learned") << '\n';
  os << "metrics = " << (cfg.metrics_path.empty() ? "(none)" : cfg.metrics_path) << '\n'
     << "checkpoint = " << (cfg.checkpoint_path.empty() ? "(none)" : cfg.checkpoint_path) << '\n';
  if (cfg.bracket_partner) os << "bracket_partner = " << to_string(*cfg.bracket_partner) << '\n';
  return os.str();
}

struct TrainFlags {
  std::string config, objective, data, model, metrics, checkpoint, hidden, optimizer, partner,
      decoder;
  std::size_t nx = 0, nz = 0, synth_n = 0, epochs = 0, batch = 0, mc = 0, eval_every = 0,
              eval_mc = 0;
  double synth_sigma = 0, lr = 0, lr_decay = 0, aux_lr_scale = 0;
  std::uint64_t seed = 0;
};

inline void add_train_flags(CLI::App* cmd, TrainFlags& f) {
  cmd->add_option("--config", f.config, "config file (key = value lines)");
  cmd->add_option("--objective", f.objective,
                  "elbo | anchored-elbo | eubo | twin-elbo | jsd-eubo");
  cmd->add_option("--nx", f.nx, "data dimension");
  cmd->add_option("--nz", f.nz, "latent dimension");
  cmd->add_option("--data", f.data, "CSV dataset (omit for synthetic)");
  cmd->add_option("--model", f.model, "P-PCA model file (anchor / evidence reference)");
  cmd->add_option("--synth-n", f.synth_n, "synthetic sample count");
  cmd->add_option("--synth-sigma", f.synth_sigma, "synthetic noise scale");
  cmd->add_option("--epochs", f.epochs, "training epochs");
  cmd->add_option("--batch", f.batch, "minibatch size");
  cmd->add_option("--lr", f.lr, "learning rate");
  cmd->add_option("--lr-decay", f.lr_decay, "multiplicative lr decay per epoch");
  cmd->add_option("--optimizer", f.optimizer, "sgd | adam");
  cmd->add_option("--mc", f.mc, "MC samples per point during training");
  cmd->add_option("--seed", f.seed, "global seed (required unless set in config)");
  cmd->add_option("--eval-every", f.eval_every, "eval cadence in epochs");
  cmd->add_option("--eval-mc", f.eval_mc, "MC samples per point at eval");
  cmd->add_option("--aux-lr-scale", f.aux_lr_scale, "auxiliary encoder lr multiplier");
  cmd->add_option("--hidden", f.hidden, "hidden widths, comma separated");
  cmd->add_option("--decoder", f.decoder, "learned | ppca (fixed model likelihood)");
  cmd->add_option("--metrics", f.metrics, "JSON-lines metrics path");
  cmd->add_option("--checkpoint", f.checkpoint, "checkpoint path");
  cmd->add_option("--partner", f.partner, "bracket partner objective");
}

inline TrainConfig merge_train_config(const CLI::App* cmd, const TrainFlags& f) {
  TrainConfig cfg;
  if (!f.config.empty()) load_config_file(cfg, f.config);
  const auto set = [&](const char* name) { return cmd->count(name) > 0; };
  if (set("--objective")) cfg.objective = objective_from_string(f.objective);
  if (set("--nx")) cfg.n_x = f.nx;
  if (set("--nz")) cfg.n_z = f.nz;
  if (set("--data")) cfg.data_csv = f.data;
  if (set("--model")) cfg.model_file = f.model;
  if (set("--synth-n")) cfg.synth_points = f.synth_n;
  if (set("--synth-sigma")) cfg.synth_sigma = f.synth_sigma;
  if (set("--epochs")) cfg.epochs = f.epochs;
  if (set("--batch")) cfg.batch_size = f.batch;
  if (set("--lr")) cfg.lr = f.lr;
  if (set("--lr-decay")) cfg.lr_decay = f.lr_decay;
  if (set("--optimizer"))
    cfg.optimizer = f.optimizer == "sgd" ? Optimizer::Kind::Sgd : Optimizer::Kind::Adam;
  if (set("--mc")) cfg.mc_samples = f.mc;
  if (set("--seed")) {
    cfg.seed = f.seed;
    cfg.seed_set = true;
  }
  if (set("--eval-every")) cfg.eval_every = f.eval_every;
  if (set("--eval-mc")) cfg.eval_mc = f.eval_mc;
  if (set("--aux-lr-scale")) cfg.aux_lr_scale = f.aux_lr_scale;
  if (set("--hidden")) cfg.hidden = parse_hidden(f.hidden);
  if (set("--decoder")) apply_kv(cfg, "decoder", f.decoder);
  if (set("--metrics")) cfg.metrics_path = f.metrics;
  if (set("--checkpoint")) cfg.checkpoint_path = f.checkpoint;
  if (set("--partner")) cfg.bracket_partner = objective_from_string(f.partner);
  return cfg;
}

inline int run(int argc, const char* const* argv) {
  CLI::App app{"evb: evidence bounds for linear-Gaussian latent-variable models"};
  app.require_subcommand(1);

  // gen
  auto* gen = app.add_subcommand("gen", "sample a synthetic dataset with known evidence");
  std::size_t g_nx = 16, g_nz = 3, g_n = 2000;
  double g_sigma = 0.1;
  std::uint64_t g_seed = 0;
  std::string g_out, g_model_out;
  gen->add_option("--nx", g_nx, "data dimension");
  gen->add_option("--nz", g_nz, "latent dimension");
  gen->add_option("--sigma", g_sigma, "noise scale");
  gen->add_option("--n", g_n, "number of rows");
  gen->add_option("--seed", g_seed, "seed")->required();
  gen->add_option("--out", g_out, "output CSV")->required();
  gen->add_option("--model-out", g_model_out, "ground-truth model file (default <out>.model.json)");

  // fit-ppca
  auto* fit = app.add_subcommand("fit-ppca", "fit a P-PCA model from CSV data");
  std::string f_in, f_sigma = "auto", f_out;
  std::size_t f_nz = 0;
  bool f_header = false, f_raw = false;
  fit->add_option("--in", f_in, "input CSV")->required();
  fit->add_option("--nz", f_nz, "latent dimension")->required();
  fit->add_option("--sigma", f_sigma, "noise scale, or 'auto' (mean discarded eigenvalue)");
  fit->add_flag("--header", f_header, "skip a header line");
  fit->add_flag("--raw-eigenvectors", f_raw, "keep unit eigenvector columns (no ML scaling)");
  fit->add_option("--out", f_out, "output model file")->required();

  // train
  auto* tr = app.add_subcommand("train", "train one objective");
  TrainFlags tf;
  add_train_flags(tr, tf);

  // bracket
  auto* br = app.add_subcommand("bracket", "co-train lower and upper bounds");
  TrainFlags bf;
  add_train_flags(br, bf);

  // check
  auto* ck = app.add_subcommand("check", "run the property suites");
  std::size_t c_trials = 100;
  std::uint64_t c_seed = 1;
  ck->add_option("--trials", c_trials, "trials per suite");
  ck->add_option("--seed", c_seed, "seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) {
      if (g_model_out.empty()) g_model_out = g_out + ".model.json";
      std::cerr << "gen: nx=" << g_nx << " nz=" << g_nz << " sigma=" << g_sigma
                << " n=" << g_n << " seed=" << g_seed << " out=" << g_out
                << " model-out=" << g_model_out << '\n';
      auto [data, model] = generate_synthetic(g_nx, g_nz, g_sigma, g_n, g_seed);
      write_csv(g_out, data);
      model.save(g_model_out);
      return 0;
    }
    if (fit->parsed()) {
      std::cerr << "fit-ppca: in=" << f_in << " nz=" << f_nz << " sigma=" << f_sigma
                << " header=" << f_header << " raw=" << f_raw << " out=" << f_out << '\n';
      const Dataset data = read_csv(f_in, f_header);
      FitOptions opts;
      opts.raw_eigenvectors = f_raw;
      const double sigma = f_sigma == "auto" ? suggest_sigma(data, f_nz) : std::stod(f_sigma);
      const PpcaModel model = fit_ppca(data, f_nz, sigma, opts);
      model.save(f_out);
      std::cerr << "fit-ppca: sigma resolved to " << sigma << '\n';
      return 0;
    }
    if (tr->parsed()) {
      const TrainConfig cfg = merge_train_config(tr, tf);
      std::cerr << "resolved config:\n" << resolved_config(cfg);
      const TrainOutcome out = train_full(cfg);
      const EvalRow& last = out.report.rows.back();
      nlohmann::ordered_json j = detail::row_to_json(last);
      j["aborted"] = out.report.aborted;
      std::cout << j.dump() << '\n';
      std::cerr << "train: finished in " << last.wall_time_s << " s\n";
      return out.report.aborted ? 3 : 0;
    }
    if (br->parsed()) {
      const TrainConfig cfg = merge_train_config(br, bf);
      std::cerr << "resolved config:\n" << resolved_config(cfg);
      const BracketOutcome out = co_train_bracket(cfg);
      nlohmann::ordered_json j;
      j["bracket_width"] = out.status.bracket_width;
      j["trend"] = to_string(out.status.trend);
      j["encoder_gap"] = out.status.encoder_gap;
      j["final_lower"] = out.lower.report.rows.back().value;
      j["final_upper"] = out.upper.report.rows.back().value;
      if (out.lower.report.rows.back().evidence)
        j["evidence"] = *out.lower.report.rows.back().evidence;
      std::cout << j.dump() << '\n';
      return (out.lower.report.aborted || out.upper.report.aborted) ? 3 : 0;
    }
    if (ck->parsed()) {
      std::cerr << "check: trials=" << c_trials << " seed=" << c_seed << '\n';
      const auto results = check::run_all(c_trials, c_seed);
      std::size_t passed = 0;
      for (const auto& r : results) {
        std::printf("[%s] %-26s trials=%zu failures=%zu (%s, %.2fs)\n",
                    r.pass ? "PASS" : "FAIL", r.name.c_str(), r.trials, r.failures,
                    r.detail.c_str(), r.elapsed_s);
        if (r.pass) ++passed;
      }
      std::printf("%zu/%zu suites passed\n", passed, results.size());
      return passed == results.size() ? 0 : 3;
    }
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::logic_error& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 2;
}

}  // namespace evb::cli
