// Simulates a rainfall-like panel on the 34-subdivision graph, fits the
// CAR-ICAR model with a short chain and prints the main posterior summaries.

#include <iomanip>
#include <iostream>
#include <string>

#include <carcopula/diagnostics.hpp>
#include <carcopula/sim.hpp>

int main(int argc, char** argv) {
  using namespace carcopula;
  const std::string adjacency = argc > 1 ? argv[1] : std::string(CARCOPULA_DATA_DIR) + "/india_subdivisions_adjacency.csv";
  const auto graph = read_adjacency_csv(adjacency);
  const auto truth = default_true_params(graph);
  const auto ts = standardize_time(64);

  Rng rng(2024);
  MissingMask mask = MissingMask::Constant(graph.n, 64, false);
  mask(0, 10) = mask(1, 10) = mask(2, 40) = true;
  const auto panel = simulate_panel(rng, graph, truth, ts, 0.9, mask);

  ChainConfig config;
  config.iterations = 6000;
  config.burn_in = 2000;
  config.thin = 5;
  config.seed = 7;
  const auto chain = run_chain(panel, graph, {DataLayer::Car, PriorLayer::Icar}, config);

  const auto rho = summarize_draws("rho", std::span<const double>(chain.column("rho").data(), chain.draws.rows()));
  const auto dic = chain_dic(chain, panel, graph);
  const auto w = waic(chain.pointwise_loglik);
  std::cout << std::fixed << std::setprecision(4);
  std::cout << "rho: mean " << rho.mean << ", 95% interval (" << rho.q025 << ", " << rho.q975 << "), true 0.9\n";
  std::cout << std::setprecision(1) << "DIC " << dic.dic << " (p_D " << dic.p_d << "), WAIC " << w.waic << "\n";
  std::cout << std::setprecision(4);
  for (int i = 0; i < 3; ++i) {
    const Eigen::VectorXd c = chain.draws.col(2 * graph.n + i);
    const auto s = summarize_draws("c", std::span<const double>(c.data(), static_cast<std::size_t>(c.size())));
    std::cout << "c_" << i + 1 << ": mean " << s.mean << " (" << s.q025 << ", " << s.q975 << "), true "
              << truth.c(i) << "\n";
  }
  return 0;
}
