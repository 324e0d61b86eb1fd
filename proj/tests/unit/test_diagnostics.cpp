#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <vector>

#include <gtest/gtest.h>

#include <carcopula/diagnostics.hpp>

#include "test_support.hpp"

using namespace carcopula;
using namespace carcopula::testing;

namespace {

std::vector<double> ar1_series(Rng& rng, std::size_t M, double phi) {
  std::vector<double> x(M);
  double v = standard_normal(rng) / std::sqrt(1.0 - phi * phi);
  for (auto& e : x) {
    v = phi * v + standard_normal(rng);
    e = v;
  }
  return x;
}

}  // namespace

TEST(Geweke, IidChainsRejectAtNominalRate) {
  Rng rng(101);
  int rejections = 0;
  const int reps = 400;
  for (int r = 0; r < reps; ++r) {
    auto x = ar1_series(rng, 4000, 0.0);
    if (std::abs(geweke(x)) > 1.96) ++rejections;
  }
  EXPECT_GE(rejections, 6);
  EXPECT_LE(rejections, 40);
}

TEST(Geweke, DetectsDrift) {
  std::vector<double> x(2000);
  Rng rng(102);
  for (std::size_t k = 0; k < x.size(); ++k) x[k] = 0.01 * static_cast<double>(k) + standard_normal(rng);
  EXPECT_GT(std::abs(geweke(x)), 5.0);
}

TEST(Geweke, RejectsDegenerateInput) {
  std::vector<double> constant(1000, 2.5);
  EXPECT_THROW(geweke(constant), InputError);
  std::vector<double> tiny(10, 1.0);
  EXPECT_THROW(geweke(tiny), InputError);
  std::vector<double> x(1000, 1.0);
  EXPECT_THROW(geweke(x, 0.6, 0.5), InputError);
}

TEST(EssBatchMeans, MatchesAr1Theory) {
  Rng rng(103);
  const std::size_t M = 200000;
  for (double phi : {0.0, 0.5, 0.9}) {
    auto x = ar1_series(rng, M, phi);
    const double theory = static_cast<double>(M) * (1.0 - phi) / (1.0 + phi);
    EXPECT_NEAR(ess_batch_means(x) / theory, 1.0, 0.15) << "phi=" << phi;
  }
}

TEST(EssBatchMeans, CappedAtChainLength) {
  // Anti-correlated series has long-run variance below the marginal variance.
  Rng rng(104);
  auto x = ar1_series(rng, 10000, -0.7);
  EXPECT_DOUBLE_EQ(ess_batch_means(x), 10000.0);
}

TEST(EssBatchMeans, RequiresHundredDraws) {
  std::vector<double> x(99);
  std::iota(x.begin(), x.end(), 0.0);
  EXPECT_THROW(ess_batch_means(x), InputError);
  std::vector<double> c(500, 1.0);
  EXPECT_THROW(ess_batch_means(c), InputError);
}

TEST(Dic, HandCase) {
  const std::vector<double> d{1.0, 2.0, 3.0};
  const auto r = dic(d, 1.5);
  EXPECT_DOUBLE_EQ(r.dbar, 2.0);
  EXPECT_DOUBLE_EQ(r.p_d, 0.5);
  EXPECT_DOUBLE_EQ(r.dic, 2.5);
  EXPECT_THROW(dic(std::vector<double>{}, 0.0), InputError);
}

TEST(Waic, HandCaseBothVariants) {
  Eigen::MatrixXd ll(3, 2);
  ll << 0.0, -1.0, 1.0, -1.0, 2.0, -1.0;
  const auto r = waic(ll);
  EXPECT_NEAR(r.sum_m, 0.0, 1e-12);
  EXPECT_NEAR(r.p_w, 1.0, 1e-12);
  EXPECT_NEAR(r.waic, 2.0, 1e-12);
  const auto l = waic(ll, WaicVariant::Lppd);
  const double expected_m = std::log((1.0 + std::exp(1.0) + std::exp(2.0)) / 3.0) - 1.0;
  EXPECT_NEAR(l.sum_m, expected_m, 1e-12);
  EXPECT_NEAR(l.waic, -2.0 * expected_m + 2.0, 1e-12);
}

TEST(Waic, LppdMatchesNaiveTwoPass) {
  Rng rng(105);
  Eigen::MatrixXd ll(500, 40);
  for (Eigen::Index k = 0; k < ll.size(); ++k) ll.data()[k] = -3.0 + 2.0 * standard_normal(rng);
  double naive = 0.0;
  for (Eigen::Index t = 0; t < ll.cols(); ++t) {
    double s = 0.0;
    for (Eigen::Index k = 0; k < ll.rows(); ++k) s += std::exp(ll(k, t));
    naive += std::log(s / static_cast<double>(ll.rows()));
  }
  EXPECT_NEAR(waic(ll, WaicVariant::Lppd).sum_m, naive, 1e-10);
}

TEST(Waic, LppdStableForLargeNegativeLogDensities) {
  Eigen::MatrixXd ll = Eigen::MatrixXd::Constant(4, 1, -2000.0);
  ll(0, 0) = -1999.0;
  const double expected = -2000.0 + std::log((std::exp(1.0) + 3.0) / 4.0);
  EXPECT_NEAR(waic(ll, WaicVariant::Lppd).sum_m, expected, 1e-9);
}

TEST(Waic, RequiresTwoDraws) { EXPECT_THROW(waic(Eigen::MatrixXd::Zero(1, 3)), InputError); }

TEST(QqDiscrepancy, HandCaseAndExactPositions) {
  const std::vector<double> half{0.5, 0.5, 0.5};
  const auto q = qq_discrepancy(half);
  EXPECT_NEAR(q.rmse, std::sqrt(2.0 * 0.0625 / 3.0), 1e-15);
  EXPECT_NEAR(q.mae, 0.5 / 3.0, 1e-15);
  std::vector<double> exact;
  for (int i = 9; i >= 1; --i) exact.push_back(i / 10.0);
  EXPECT_NEAR(qq_discrepancy(exact).rmse, 0.0, 1e-15);
}

TEST(QqDiscrepancy, SkipsMissingAndShrinksForUniform) {
  Rng rng(106);
  std::vector<double> u(20000);
  for (auto& v : u) v = uniform01(rng);
  u[3] = std::numeric_limits<double>::quiet_NaN();
  const auto q = qq_discrepancy(u);
  EXPECT_EQ(q.count, 19999u);
  EXPECT_LT(q.rmse, 0.01);
  EXPECT_LE(q.mae, q.rmse);
  EXPECT_THROW(qq_discrepancy(std::vector<double>{std::nan("")}), InputError);
}

TEST(Summaries, QuantileAndMoments) {
  const std::vector<double> sorted{1.0, 2.0, 3.0, 4.0, 5.0};
  EXPECT_DOUBLE_EQ(sorted_quantile(sorted, 0.5), 3.0);
  EXPECT_DOUBLE_EQ(sorted_quantile(sorted, 0.1), 1.4);
  EXPECT_DOUBLE_EQ(sorted_quantile(sorted, 1.0), 5.0);
  const auto s = summarize_draws("x", sorted);
  EXPECT_DOUBLE_EQ(s.mean, 3.0);
  EXPECT_DOUBLE_EQ(s.sd, std::sqrt(2.5));
  EXPECT_TRUE(std::isnan(s.ess));
}

TEST(PanelStatisticsTest, HandCase) {
  Eigen::MatrixXd y(2, 4);
  y << 1.0, 2.0, 3.0, kMissing, 2.0, 4.0, 6.0, 8.0;
  const auto g = two_node_graph();
  const auto s = panel_statistics(y, &g);
  EXPECT_DOUBLE_EQ(s.mean, 26.0 / 7.0);
  EXPECT_DOUBLE_EQ(s.min, 1.0);
  EXPECT_DOUBLE_EQ(s.max, 8.0);
  EXPECT_DOUBLE_EQ(s.site_mean, (2.0 + 5.0) / 2.0);
  EXPECT_DOUBLE_EQ(s.site_min, 1.5);
  EXPECT_DOUBLE_EQ(s.site_max, 5.5);
  EXPECT_DOUBLE_EQ(s.site_sd, (1.0 + std::sqrt(20.0 / 3.0)) / 2.0);
  EXPECT_NEAR(s.neighbor_corr, 1.0, 1e-15);
  EXPECT_TRUE(std::isnan(panel_statistics(y, nullptr).neighbor_corr));
}

class FittedChainTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    graph_ = new ArealGraph(ring_graph(8));
    Rng rng(107);
    MissingMask mask = MissingMask::Constant(8, 30, false);
    mask(2, 5) = mask(6, 20) = true;
    panel_ = new RegionalPanel(simulate_panel(rng, *graph_, smooth_params(8), standardize_time(30), 0.7, mask));
    car_ = new ChainOutput(run_chain(*panel_, *graph_, {DataLayer::Car, PriorLayer::Icar}, short_config(6000, 2000, 10, 108)));
    ind_ = new ChainOutput(run_chain(*panel_, *graph_, {DataLayer::Indep, PriorLayer::Indep}, short_config(6000, 2000, 10, 109)));
  }
  static void TearDownTestSuite() {
    delete car_;
    delete ind_;
    delete panel_;
    delete graph_;
  }
  static ArealGraph* graph_;
  static RegionalPanel* panel_;
  static ChainOutput* car_;
  static ChainOutput* ind_;
};

ArealGraph* FittedChainTest::graph_ = nullptr;
RegionalPanel* FittedChainTest::panel_ = nullptr;
ChainOutput* FittedChainTest::car_ = nullptr;
ChainOutput* FittedChainTest::ind_ = nullptr;

TEST_F(FittedChainTest, DicEffectiveParametersPlausible) {
  for (const auto* chain : {car_, ind_}) {
    const auto r = chain_dic(*chain, *panel_, *graph_);
    // Between no parameters and the unshrunk count (3 per region plus hyperparameters).
    EXPECT_GT(r.p_d, 0.0) << chain->spec.name();
    EXPECT_LT(r.p_d, 3.0 * 8 + 8) << chain->spec.name();
    EXPECT_NEAR(r.dic, r.dbar + r.p_d, 1e-9);
  }
}

TEST_F(FittedChainTest, WaicCloseToDicForWellSpecifiedModel) {
  const auto d = chain_dic(*car_, *panel_, *graph_);
  const auto w = waic(car_->pointwise_loglik);
  EXPECT_NEAR(w.waic, d.dic, 0.05 * std::abs(d.dic) + 10.0);
}

TEST_F(FittedChainTest, CorrelatedModelPreferredOnCorrelatedData) {
  EXPECT_LT(chain_dic(*car_, *panel_, *graph_).dic, chain_dic(*ind_, *panel_, *graph_).dic);
}

TEST_F(FittedChainTest, PredictiveChecksCalibrated) {
  for (const auto* chain : {car_, ind_}) {
    const auto p = posterior_predictive_check(*panel_, *chain, *graph_, 5);
    EXPECT_EQ(p.draws_used, 400);
    EXPECT_TRUE(p.warnings.empty());
    EXPECT_GT(p.coverage, 0.88) << chain->spec.name();
    EXPECT_EQ(p.p_values.count("neighbor_corr"), chain->spec.car_data() ? 1u : 0u);
    for (const auto& name : {"mean", "sd", "site_mean"}) {
      EXPECT_GT(p.p_values.at(name), 0.005) << chain->spec.name() << " " << name;
      EXPECT_LT(p.p_values.at(name), 0.995) << chain->spec.name() << " " << name;
    }
  }
}

TEST_F(FittedChainTest, PredictiveCheckDeterministicAndWarnsOnFewDraws) {
  const auto a = posterior_predictive_check(*panel_, *car_, *graph_, 9);
  const auto b = posterior_predictive_check(*panel_, *car_, *graph_, 9);
  EXPECT_EQ(a.p_values, b.p_values);
  EXPECT_EQ(a.coverage, b.coverage);
  ChainOutput few = *car_;
  few.draws = car_->draws.topRows(50);
  const auto c = posterior_predictive_check(*panel_, few, *graph_, 9);
  EXPECT_EQ(c.draws_used, 50);
  EXPECT_EQ(c.warnings.size(), 1u);
}

TEST_F(FittedChainTest, ReportSerialization) {
  ComparisonReport report;
  report.rows.push_back(comparison_row(*car_, *panel_, *graph_));
  report.rows.push_back(comparison_row(*ind_, *panel_, *graph_));
  report.ppc["CAR-ICAR"] = posterior_predictive_check(*panel_, *car_, *graph_, 3);
  const auto j = to_json(report);
  ASSERT_EQ(j["models"].size(), 2u);
  EXPECT_EQ(j["models"][0]["model"], "CAR-ICAR");
  EXPECT_TRUE(j["models"][1]["sd_rho"].is_null());
  EXPECT_GT(j["models"][0]["sd_rho"].get<double>(), 0.0);
  EXPECT_TRUE(j["ppc"]["CAR-ICAR"]["p_values"].contains("neighbor_corr"));
  EXPECT_GT(report.rows[0].avg_sd_a, 0.0);
  EXPECT_GT(report.rows[0].waic_lppd.sum_m, report.rows[0].waic.sum_m);

  std::ostringstream csv_out, scaled;
  write_comparison_csv(csv_out, report);
  write_comparison_csv(scaled, report, true);
  std::istringstream in(csv_out.str());
  const auto rows = csv::read_rows(in);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0][0], "model");
  EXPECT_EQ(rows[2][10], "NA");
  std::istringstream sin(scaled.str());
  const auto srows = csv::read_rows(sin);
  EXPECT_EQ(srows[1][7], rows[1][7]);
  EXPECT_NEAR(std::stod(srows[1][8]), 100.0 * std::stod(rows[1][8]), 1e-9 * std::stod(srows[1][8]));
  std::ostringstream ppc_out;
  write_ppc_csv(ppc_out, report);
  EXPECT_NE(ppc_out.str().find("CAR-ICAR"), std::string::npos);
}

TEST_F(FittedChainTest, ChainSummaryCoversColumns) {
  const auto s = summarize_chain(*car_);
  ASSERT_EQ(s.size(), car_->columns.size());
  for (const auto& p : s) {
    EXPECT_LE(p.q025, p.mean) << p.name;
    EXPECT_GE(p.q975, p.mean) << p.name;
    EXPECT_FALSE(std::isnan(p.ess)) << p.name;
    EXPECT_LE(p.ess, 400.0);
  }
}

TEST(Geweke, StepChangeDetected) {
  Rng rng(110);
  int detected = 0;
  for (int r = 0; r < 100; ++r) {
    auto x = ar1_series(rng, 10000, 0.0);
    for (std::size_t k = x.size() / 2; k < x.size(); ++k) x[k] += 0.5;
    if (std::abs(geweke(x)) > 1.96) ++detected;
  }
  EXPECT_GE(detected, 95);
}

TEST(Geweke, NullAcceptanceOverHundredChains) {
  Rng rng(111);
  int accepted = 0;
  for (int r = 0; r < 100; ++r)
    if (std::abs(geweke(ar1_series(rng, 10000, 0.0))) < 1.96) ++accepted;
  EXPECT_GE(accepted, 90);
}

TEST(EssBatchMeans, IidWithinBandInMostReplicates) {
  Rng rng(112);
  int inside = 0;
  for (int r = 0; r < 100; ++r) {
    const double e = ess_batch_means(ar1_series(rng, 8000, 0.0));
    if (e >= 0.7 * 8000 && e <= 8000) ++inside;
  }
  EXPECT_GE(inside, 90);
}

TEST(Dic, ConstantDevianceHasNoEffectiveParameters) {
  const std::vector<double> d(50, 123.5);
  const auto r = dic(d, 123.5);
  EXPECT_EQ(r.p_d, 0.0);
  EXPECT_EQ(r.dic, 123.5);
}

TEST(Waic, PointMassPosterior) {
  Eigen::MatrixXd ll(20, 3);
  ll.rowwise() = Eigen::RowVector3d(-1.5, -2.0, -0.25);
  for (auto v : {WaicVariant::PosteriorMeanLog, WaicVariant::Lppd}) {
    const auto r = waic(ll, v);
    EXPECT_NEAR(r.p_w, 0.0, 1e-15);
    EXPECT_NEAR(r.waic, 2.0 * 3.75, 1e-12);
  }
}

TEST(InformationCriteria, InvariantToDrawOrder) {
  Rng rng(113);
  Eigen::MatrixXd ll(200, 15);
  for (Eigen::Index k = 0; k < ll.size(); ++k) ll.data()[k] = -2.0 + standard_normal(rng);
  std::vector<int> perm(200);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Eigen::MatrixXd shuffled(200, 15);
  for (int k = 0; k < 200; ++k) shuffled.row(k) = ll.row(perm[static_cast<std::size_t>(k)]);
  for (auto v : {WaicVariant::PosteriorMeanLog, WaicVariant::Lppd})
    EXPECT_NEAR(waic(ll, v).waic, waic(shuffled, v).waic, 1e-10);
  const Eigen::VectorXd dev = -2.0 * ll.rowwise().sum();
  const Eigen::VectorXd dev_s = -2.0 * shuffled.rowwise().sum();
  EXPECT_NEAR(dic(std::span<const double>(dev.data(), 200), 50.0).dic,
              dic(std::span<const double>(dev_s.data(), 200), 50.0).dic, 1e-9);
}

TEST(PosteriorPredictive, SelfConsistentPValues) {
  const auto g = ring_graph(6);
  const auto ts = standardize_time(25);
  int inside = 0, total = 0;
  for (int trial = 0; trial < 30; ++trial) {
    Rng rng(derive_seed(114, {static_cast<std::uint64_t>(trial)}));
    const auto panel = simulate_panel(rng, g, smooth_params(6), ts, 0.0);
    const auto chain = run_chain(panel, g, {DataLayer::Indep, PriorLayer::Indep},
                                 short_config(3000, 1000, 10, 200 + static_cast<std::uint64_t>(trial)));
    const auto p = posterior_predictive_check(panel, chain, g, 300 + static_cast<std::uint64_t>(trial));
    for (const auto& [name, v] : p.p_values) {
      ++total;
      if (v > 0.05 && v < 0.95) ++inside;
    }
    EXPECT_GE(p.coverage, 0.0);
    EXPECT_LE(p.coverage, 1.0);
  }
  EXPECT_GE(inside, static_cast<int>(0.9 * total));
}

TEST_F(FittedChainTest, DrawsCsvRoundTripReproducesDiagnostics) {
  std::stringstream file;
  write_draws_csv(file, car_->columns, car_->draws);
  const auto table = read_draws_csv(file);
  EXPECT_EQ(table.columns, car_->columns);
  EXPECT_EQ(table.draws, car_->draws);
  std::ostringstream before, after;
  write_summary_csv(before, summarize_chain(*car_));
  write_summary_csv(after, summarize_columns(table.columns, table.draws));
  EXPECT_EQ(before.str(), after.str());
  std::istringstream bad("x,y\n1\n");
  EXPECT_THROW(read_draws_csv(bad), InputError);
}
