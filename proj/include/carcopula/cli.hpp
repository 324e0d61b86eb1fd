#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "csv.hpp"
#include "diagnostics.hpp"
#include "error.hpp"
#include "graph.hpp"
#include "inference.hpp"
#include "marginals.hpp"
#include "panel.hpp"
#include "sim.hpp"

namespace carcopula::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitNumerical = 2;

/// Everything a command needs, merged from defaults, an optional JSON config
/// file and command-line flags (flags win).
struct RunConfig {
  std::string panel_path;
#ifdef CARCOPULA_DEFAULT_ADJACENCY
  std::string adjacency_path = CARCOPULA_DEFAULT_ADJACENCY;
#else
  std::string adjacency_path;
#endif
  std::string out_dir = "carcopula_out";
  std::optional<std::uint64_t> seed;
  ModelSpec model{DataLayer::Car, PriorLayer::Icar};
  std::vector<ModelSpec> models = all_model_specs();
  ChainConfig chain = ChainConfig::desk_scale();
  bool paper_scale = false;
  bool paper_tables = false;
  bool ppc = true;
  // Simulation study.
  int replicates = 10;
  std::vector<double> rho_grid{0.0, 0.5, 0.9};
  int study_T = 64;
  std::vector<ModelSpec> variants = all_model_specs();
  unsigned workers = 0;
};

inline std::vector<ModelSpec> parse_model_list(const std::vector<std::string>& names) {
  std::vector<ModelSpec> out;
  for (const auto& n : names) out.push_back(parse_model_spec(n));
  return out;
}

/// Applies a JSON config object. Unknown keys are rejected so typos surface.
inline void apply_json_config(RunConfig& rc, const nlohmann::json& j) {
  if (!j.is_object()) throw InputError("config: top level must be a JSON object");
  static const std::vector<std::string> known{"panel",  "adjacency",  "out",     "seed",    "model", "models",
                                              "chain",  "replicates", "rho_grid", "T",      "variants",
                                              "workers", "ppc",       "paper_scale", "paper_tables"};
  for (const auto& [key, value] : j.items())
    if (std::find(known.begin(), known.end(), key) == known.end()) throw InputError("config: unknown key '" + key + "'");
  try {
    if (j.contains("paper_scale") && j["paper_scale"].get<bool>()) {
      rc.paper_scale = true;
      rc.chain = ChainConfig{};
      rc.replicates = 100;
    }
    if (j.contains("panel")) rc.panel_path = j["panel"].get<std::string>();
    if (j.contains("adjacency")) rc.adjacency_path = j["adjacency"].get<std::string>();
    if (j.contains("out")) rc.out_dir = j["out"].get<std::string>();
    if (j.contains("seed")) rc.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("model")) rc.model = parse_model_spec(j["model"].get<std::string>());
    if (j.contains("models")) rc.models = parse_model_list(j["models"].get<std::vector<std::string>>());
    if (j.contains("chain")) {
      const auto& c = j["chain"];
      if (!c.is_object()) throw InputError("config: 'chain' must be an object");
      for (const auto& [key, value] : c.items())
        if (key != "iterations" && key != "burn_in" && key != "thin")
          throw InputError("config: unknown chain key '" + key + "'");
      if (c.contains("iterations")) rc.chain.iterations = c["iterations"].get<long>();
      if (c.contains("burn_in")) rc.chain.burn_in = c["burn_in"].get<long>();
      if (c.contains("thin")) rc.chain.thin = c["thin"].get<long>();
    }
    if (j.contains("replicates")) rc.replicates = j["replicates"].get<int>();
    if (j.contains("rho_grid")) rc.rho_grid = j["rho_grid"].get<std::vector<double>>();
    if (j.contains("T")) rc.study_T = j["T"].get<int>();
    if (j.contains("variants")) rc.variants = parse_model_list(j["variants"].get<std::vector<std::string>>());
    if (j.contains("workers")) rc.workers = j["workers"].get<unsigned>();
    if (j.contains("ppc")) rc.ppc = j["ppc"].get<bool>();
    if (j.contains("paper_tables")) rc.paper_tables = j["paper_tables"].get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("config: ") + e.what());
  }
}

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open config file '" + path + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw InputError("config file '" + path + "': " + e.what());
  }
}

inline std::uint64_t fresh_seed() {
  std::random_device rd;
  return (static_cast<std::uint64_t>(rd()) << 32) ^ rd();
}

/// Output directory plus helpers that write each artifact in one place.
class OutputDir {
 public:
  explicit OutputDir(const std::string& dir) : dir_(dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir_, ec);
    if (ec || !std::filesystem::is_directory(dir_))
      throw InputError("cannot create output directory '" + dir + "'");
  }

  [[nodiscard]] std::filesystem::path path(const std::string& name) const { return dir_ / name; }

  template <class Writer>
  void write(const std::string& name, Writer&& writer) const {
    std::ofstream out(path(name), std::ios::binary);
    if (!out) throw InputError("cannot write '" + path(name).string() + "'");
    writer(out);
    if (!out) throw InputError("write failed for '" + path(name).string() + "'");
  }

  void write_json(const std::string& name, const nlohmann::json& j) const {
    write(name, [&](std::ostream& o) { o << j.dump(2) << '\n'; });
  }

 private:
  std::filesystem::path dir_;
};

inline nlohmann::json chain_config_json(const ChainConfig& c) {
  return {{"iterations", c.iterations}, {"burn_in", c.burn_in}, {"thin", c.thin}, {"seed", c.seed}};
}

/// Result of parsing the command line: the chosen subcommand and the merged
/// configuration, or an exit code when parsing ends the run.
struct ParsedCommand {
  std::string command;
  RunConfig config;
  std::optional<int> exit_code;
};

inline ParsedCommand parse_command_line(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Gamma marginal regression with a CAR copula for areal panel data"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir, panel, adjacency, model;
  std::vector<std::string> models;
  bool paper_scale = false, paper_tables = false, no_ppc = false;
  std::optional<long> iterations, burn_in, thin;
  std::optional<int> replicates;
  std::optional<unsigned> workers;

  app.add_option("--config", config_path, "JSON configuration file");
  app.add_option("--seed", seed, "Random seed (generated and recorded when absent)");
  app.add_flag("--paper-scale", paper_scale, "200k-iteration chains and 100 study replicates");
  app.add_flag("--paper-tables", paper_tables, "Apply the published presentation scalings to tables");
  app.add_option("--out", out_dir, "Output directory");
  app.add_option("--panel", panel, "Panel CSV (region,<year>,...; empty cell = missing)");
  app.add_option("--adjacency", adjacency, "Adjacency CSV of 1-based index pairs");
  app.add_option("--iterations", iterations, "MCMC iterations");
  app.add_option("--burn-in", burn_in, "Burn-in iterations");
  app.add_option("--thin", thin, "Thinning interval");

  auto* explore = app.add_subcommand("explore", "Marginal fits, QQ discrepancy and Moran's I of latent scores");
  auto* fit = app.add_subcommand("fit", "Fit one model and summarize the posterior");
  fit->add_option("--model", model, "Model name such as CAR-ICAR");
  auto* compare = app.add_subcommand("compare", "Fit several models and compare DIC, WAIC and predictive checks");
  compare->add_option("--models", models, "Model names (default: all six)")->delimiter(',');
  compare->add_flag("--no-ppc", no_ppc, "Skip posterior predictive checks");
  auto* study = app.add_subcommand("study", "Simulation study over a grid of true rho");
  study->add_option("--replicates", replicates, "Replicates per rho value");
  study->add_option("--models", models, "Model variants (default: all six)")->delimiter(',');
  study->add_option("--workers", workers, "Worker threads (0 = hardware concurrency)");

  ParsedCommand pc;
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    pc.exit_code = app.exit(e, out, err) == 0 ? kExitOk : kExitUsage;
    return pc;
  }
  pc.command = explore->parsed() ? "explore" : fit->parsed() ? "fit" : compare->parsed() ? "compare" : "study";

  RunConfig& rc = pc.config;
  if (!config_path.empty()) apply_json_config(rc, read_json_file(config_path));
  if (paper_scale) {
    rc.paper_scale = true;
    rc.chain = ChainConfig{};
    rc.replicates = 100;
  }
  if (paper_tables) rc.paper_tables = true;
  if (seed) rc.seed = seed;
  if (!out_dir.empty()) rc.out_dir = out_dir;
  if (!panel.empty()) rc.panel_path = panel;
  if (!adjacency.empty()) rc.adjacency_path = adjacency;
  if (iterations) rc.chain.iterations = *iterations;
  if (burn_in) rc.chain.burn_in = *burn_in;
  if (thin) rc.chain.thin = *thin;
  if (!model.empty()) rc.model = parse_model_spec(model);
  if (no_ppc) rc.ppc = false;
  if (replicates) rc.replicates = *replicates;
  if (workers) rc.workers = *workers;
  if (!models.empty()) {
    if (pc.command == "study") rc.variants = parse_model_list(models);
    else rc.models = parse_model_list(models);
  }
  if (!rc.seed) rc.seed = fresh_seed();
  rc.chain.seed = *rc.seed;
  rc.chain.validate();
  return pc;
}

class Application {
 public:
  Application(std::ostream& out, std::ostream& err) : out_(out), err_(err) {}

  int run(int argc, const char* const* argv) {
    try {
      const auto pc = parse_command_line(argc, argv, out_, err_);
      if (pc.exit_code) return *pc.exit_code;
      if (pc.command == "explore") return cmd_explore(pc.config);
      if (pc.command == "fit") return cmd_fit(pc.config);
      if (pc.command == "compare") return cmd_compare(pc.config);
      return cmd_study(pc.config);
    } catch (const InputError& e) {
      err_ << "error: " << e.what() << '\n';
      return kExitUsage;
    } catch (const NumericalError& e) {
      err_ << "numerical failure: " << e.what() << '\n';
      return kExitNumerical;
    } catch (const std::exception& e) {
      err_ << "failure: " << e.what() << '\n';
      return kExitNumerical;
    }
  }

 private:
  std::ostream& out_;
  std::ostream& err_;

  static RegionalPanel load_panel(const RunConfig& rc) {
    if (rc.panel_path.empty()) throw InputError("a panel CSV is required (--panel)");
    return read_panel_csv(rc.panel_path);
  }

  static ArealGraph load_graph(const RunConfig& rc, int expected_n) {
    if (rc.adjacency_path.empty()) throw InputError("an adjacency CSV is required (--adjacency)");
    auto g = read_adjacency_csv(rc.adjacency_path, expected_n);
    if (expected_n > 0 && g.n != expected_n)
      throw InputError("adjacency has " + std::to_string(g.n) + " regions but the panel has " + std::to_string(expected_n));
    return g;
  }

  static nlohmann::json run_header(const RunConfig& rc, const std::string& command) {
    return {{"command", command}, {"seed", *rc.seed}, {"chain", chain_config_json(rc.chain)},
            {"paper_scale", rc.paper_scale}};
  }

  int cmd_explore(const RunConfig& rc) {
    const auto panel = load_panel(rc);
    const auto graph = load_graph(rc, panel.n());
    const auto ts = standardize_time(panel.T());
    const OutputDir out(rc.out_dir);

    const auto gamma = fit_panel_gamma(panel, ts);
    std::vector<LognormalRegionParams> lognormal;
    std::vector<double> row(static_cast<std::size_t>(panel.T()));
    for (int i = 0; i < panel.n(); ++i) {
      for (int t = 0; t < panel.T(); ++t) row[static_cast<std::size_t>(t)] = panel.values(i, t);
      lognormal.push_back(fit_region_lognormal(row, ts));
    }
    out.write("gamma_mle.csv", [&](std::ostream& o) {
      csv::write_row(o, {"region", "n_obs", "a", "b", "c", "se_a", "se_b", "se_c", "loglik"});
      for (int i = 0; i < panel.n(); ++i) {
        const auto& f = gamma.regions[static_cast<std::size_t>(i)];
        csv::write_row(o, {panel.regions[static_cast<std::size_t>(i)], std::to_string(f.n_obs), csv::format_double(f.a),
                           csv::format_double(f.b), csv::format_double(f.c), csv::format_double(f.se_a),
                           csv::format_double(f.se_b), csv::format_double(f.se_c), csv::format_double(f.loglik)});
      }
    });
    out.write("lognormal_mle.csv", [&](std::ostream& o) {
      csv::write_row(o, {"region", "alpha_star", "beta_star", "sigma2", "se_alpha_star", "se_beta_star", "se_sigma2"});
      for (int i = 0; i < panel.n(); ++i) {
        const auto& f = lognormal[static_cast<std::size_t>(i)];
        csv::write_row(o, {panel.regions[static_cast<std::size_t>(i)], csv::format_double(f.alpha_star),
                           csv::format_double(f.beta_star), csv::format_double(f.sigma2),
                           csv::format_double(f.se_alpha_star), csv::format_double(f.se_beta_star),
                           csv::format_double(f.se_sigma2)});
      }
    });

    const auto pit_gamma = pit_transform(panel, gamma.params, ts);
    const auto pit_lognormal = pit_transform_lognormal(panel, lognormal);
    const auto qq_gamma = qq_discrepancy(pit_gamma.u);
    const auto qq_lognormal = qq_discrepancy(pit_lognormal.u);
    auto sorted_values = [](const Eigen::MatrixXd& u) {
      std::vector<double> v;
      for (Eigen::Index k = 0; k < u.size(); ++k)
        if (!std::isnan(u.data()[k])) v.push_back(u.data()[k]);
      std::sort(v.begin(), v.end());
      return v;
    };
    const auto ug = sorted_values(pit_gamma.u), ul = sorted_values(pit_lognormal.u);
    out.write("qq_pairs.csv", [&](std::ostream& o) {
      csv::write_row(o, {"plotting_position", "u_gamma", "u_lognormal"});
      const double n = static_cast<double>(ug.size());
      for (std::size_t k = 0; k < ug.size(); ++k)
        csv::write_row(o, {csv::format_double(static_cast<double>(k + 1) / (n + 1.0)), csv::format_double(ug[k]),
                           csv::format_double(ul[k])});
    });

    const auto moran = yearly_moran(latent_scores(pit_gamma.u), graph);
    out.write("moran_by_year.csv", [&](std::ostream& o) {
      csv::write_row(o, {"year", "I", "expected", "z", "p_value"});
      for (std::size_t k = 0; k < moran.years.size(); ++k) {
        const auto& m = moran.per_year[k];
        csv::write_row(o, {panel.years[static_cast<std::size_t>(moran.years[k])], csv::format_double(m.I),
                           csv::format_double(m.expected), csv::format_double(m.z_score), csv::format_double(m.p_value)});
      }
    });

    nlohmann::json j = run_header(rc, "explore");
    j.erase("chain");
    j["n"] = panel.n();
    j["T"] = panel.T();
    j["missing_cells"] = panel.missing_count();
    j["pit_clamps"] = pit_gamma.clamp_count;
    j["qq"] = {{"gamma", {{"rmse_u", qq_gamma.rmse}, {"mae_u", qq_gamma.mae}}},
               {"lognormal", {{"rmse_u", qq_lognormal.rmse}, {"mae_u", qq_lognormal.mae}}},
               {"gamma_lower_rmse", qq_gamma.rmse < qq_lognormal.rmse},
               {"gamma_lower_mae", qq_gamma.mae < qq_lognormal.mae}};
    j["moran"] = {{"mean_I", moran.mean_I},
                  {"mean_z", moran.mean_z},
                  {"combined_z", moran.combined_z},
                  {"combined_p", moran.combined_p},
                  {"years_used", moran.years.size()}};
    out.write_json("explore.json", j);
    out_ << "explore: mean Moran's I " << moran.mean_I << ", RMSE_U gamma " << qq_gamma.rmse << " vs lognormal "
         << qq_lognormal.rmse << "\n";
    return kExitOk;
  }

  int cmd_fit(const RunConfig& rc) {
    const auto panel = load_panel(rc);
    const auto graph = load_graph(rc, panel.n());
    const OutputDir out(rc.out_dir);
    const auto chain = run_chain(panel, graph, rc.model, rc.chain);
    write_fit_outputs(out, rc, panel, graph, chain);
    return kExitOk;
  }

  void write_fit_outputs(const OutputDir& out, const RunConfig& rc, const RegionalPanel& panel, const ArealGraph& graph,
                         const ChainOutput& chain) {
    const auto summaries = summarize_chain(chain);
    out.write("draws.csv", [&](std::ostream& o) { write_draws_csv(o, chain.columns, chain.draws); });
    out.write("summary.csv", [&](std::ostream& o) { write_summary_csv(o, summaries); });

    nlohmann::json trends = nlohmann::json::array();
    out.write("regions.csv", [&](std::ostream& o) {
      csv::Row header{"region"};
      for (const char* g : {"a", "b", "c"})
        for (const char* s : {"mean", "sd", "q2.5", "q97.5"}) header.push_back(std::string(g) + "_" + s);
      header.push_back("c_interval_excludes_zero");
      header.push_back("mean_trend");
      csv::write_row(o, header);
      for (int i = 0; i < chain.n; ++i) {
        csv::Row r{panel.regions[static_cast<std::size_t>(i)]};
        for (int g = 0; g < 3; ++g) {
          const auto& s = summaries[static_cast<std::size_t>(g * chain.n + i)];
          r.insert(r.end(), {csv::format_double(s.mean), csv::format_double(s.sd), csv::format_double(s.q025),
                             csv::format_double(s.q975)});
        }
        const auto& c = summaries[static_cast<std::size_t>(2 * chain.n + i)];
        const bool excludes = c.q025 > 0.0 || c.q975 < 0.0;
        // The mean a / rate = 1 / (b exp(c t)) falls over time when c > 0.
        const char* trend = c.mean > 0 ? "decreasing" : "increasing";
        r.push_back(excludes ? (c.mean > 0 ? "positive" : "negative") : "");
        r.push_back(excludes ? trend : "");
        csv::write_row(o, r);
        if (excludes)
          trends.push_back({{"region", panel.regions[static_cast<std::size_t>(i)]},
                            {"c_sign", c.mean > 0 ? "positive" : "negative"},
                            {"mean_trend", trend},
                            {"mean", c.mean},
                            {"q2.5", c.q025},
                            {"q97.5", c.q975}});
      }
    });

    out.write("imputed.csv", [&](std::ostream& o) {
      csv::write_row(o, {"region", "year", "mean", "sd", "q2.5", "q97.5"});
      for (std::size_t k = 0; k < chain.missing_cells.size(); ++k) {
        const auto [i, t] = chain.missing_cells[k];
        const Eigen::VectorXd col = chain.imputed.col(static_cast<Eigen::Index>(k));
        const auto s = summarize_draws("", std::span<const double>(col.data(), static_cast<std::size_t>(col.size())));
        csv::write_row(o, {panel.regions[static_cast<std::size_t>(i)], panel.years[static_cast<std::size_t>(t)],
                           csv::format_double(s.mean), csv::format_double(s.sd), csv::format_double(s.q025),
                           csv::format_double(s.q975)});
      }
    });

    const auto d = chain_dic(chain, panel, graph);
    const auto w = waic(chain.pointwise_loglik);
    const auto wl = waic(chain.pointwise_loglik, WaicVariant::Lppd);
    nlohmann::json j = run_header(rc, "fit");
    j["model"] = chain.spec.name();
    j["n"] = chain.n;
    j["T"] = chain.T;
    j["retained_draws"] = chain.draws.rows();
    j["missing_cells"] = chain.missing_cells.size();
    j["acceptance"] = chain.acceptance;
    j["clamp_events"] = chain.clamp_events;
    j["nonfinite_rejections"] = chain.nonfinite_rejections;
    j["notes"] = chain.notes;
    j["DIC"] = {{"DIC", d.dic}, {"p_D", d.p_d}, {"Dbar", d.dbar}, {"D_hat", d.d_hat}};
    j["WAIC"] = {{"WAIC", w.waic}, {"p_W", w.p_w}, {"WAIC_lppd", wl.waic}, {"p_W_lppd", wl.p_w}};
    if (chain.has_column("rho")) {
      const auto& s = summaries[static_cast<std::size_t>(chain.column_index("rho"))];
      j["rho"] = {{"mean", s.mean}, {"sd", s.sd}, {"q2.5", s.q025}, {"q97.5", s.q975}, {"ess", json_number(s.ess)}};
    }
    j["trend_intervals_excluding_zero"] = trends;
    out.write_json("run.json", j);
    out_ << "fit " << chain.spec.name() << ": " << chain.draws.rows() << " draws, DIC " << d.dic << ", WAIC " << w.waic;
    if (chain.has_column("rho")) out_ << ", rho " << j["rho"]["mean"].get<double>();
    out_ << "\n";
  }

  int cmd_compare(const RunConfig& rc) {
    const auto panel = load_panel(rc);
    const auto graph = load_graph(rc, panel.n());
    const OutputDir out(rc.out_dir);
    if (rc.models.empty()) throw InputError("compare: no models given");
    ComparisonReport report;
    for (std::size_t v = 0; v < rc.models.size(); ++v) {
      const auto chain = run_chain(panel, graph, rc.models[v], rc.chain);
      report.rows.push_back(comparison_row(chain, panel, graph));
      if (rc.ppc)
        report.ppc[chain.spec.name()] =
            posterior_predictive_check(panel, chain, graph, derive_seed(*rc.seed, {static_cast<std::uint64_t>(v), 1}));
      out_ << "compare " << chain.spec.name() << ": DIC " << report.rows.back().dic.dic << ", WAIC "
           << report.rows.back().waic.waic << "\n";
    }
    out.write("comparison.csv", [&](std::ostream& o) { write_comparison_csv(o, report, rc.paper_tables); });
    if (rc.ppc) out.write("ppc.csv", [&](std::ostream& o) { write_ppc_csv(o, report); });
    nlohmann::json j = run_header(rc, "compare");
    j["report"] = to_json(report);
    out.write_json("comparison.json", j);
    return kExitOk;
  }

  int cmd_study(const RunConfig& rc) {
    std::optional<RegionalPanel> panel;
    if (!rc.panel_path.empty()) panel = read_panel_csv(rc.panel_path);
    const auto graph = load_graph(rc, panel ? panel->n() : 0);
    const OutputDir out(rc.out_dir);
    StudyConfig sc;
    sc.true_params = panel ? true_params_from_panel(*panel) : default_true_params(graph);
    sc.rho_grid = rc.rho_grid;
    sc.replicates = rc.replicates;
    sc.T = panel ? panel->T() : rc.study_T;
    sc.variants = rc.variants;
    sc.chain = rc.chain;
    sc.seed = *rc.seed;
    sc.workers = rc.workers;
    const auto tables = run_study(sc, graph);
    out.write("study_accuracy.csv", [&](std::ostream& o) { write_accuracy_csv(o, tables, rc.paper_tables); });
    out.write("study_criteria.csv", [&](std::ostream& o) { write_criteria_csv(o, tables); });
    nlohmann::json manifest = study_manifest(sc, tables);
    manifest["command"] = "study";
    manifest["true_params_source"] = panel ? "panel MLE" : "default smooth field";
    out.write_json("study_manifest.json", manifest);
    out.write("timing.txt", [&](std::ostream& o) { o << "wall_seconds " << tables.wall_seconds << '\n'; });
    out_ << "study: " << tables.rho_grid.size() * tables.variants.size() * static_cast<std::size_t>(sc.replicates)
         << " fits, " << tables.failures.size() << " excluded\n";
    return kExitOk;
  }
};

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  return Application(out, err).run(argc, argv);
}

}  // namespace carcopula::cli
