#include <gtest/gtest.h>

#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "evb/trainer.hpp"
#include "test_util.hpp"

using evb::Dataset;
using evb::EvalRow;
using evb::Matrix;
using evb::ObjectiveKind;
using evb::PpcaModel;
using evb::Rng;
using evb::TrainConfig;
using evb::Trend;
using evb::Vec;

namespace {

TrainConfig tiny_config(std::uint64_t seed) {
  TrainConfig cfg;
  cfg.objective = ObjectiveKind::Elbo;
  cfg.n_x = 6;
  cfg.n_z = 2;
  cfg.synth_points = 240;
  cfg.synth_sigma = 0.2;
  cfg.epochs = 4;
  cfg.batch_size = 32;
  cfg.lr = 5e-3;
  cfg.mc_samples = 1;
  cfg.eval_every = 2;
  cfg.eval_mc = 16;
  cfg.hidden = {8};
  cfg.seed = seed;
  cfg.seed_set = true;
  return cfg;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST(GenerateSyntheticTest, NoiselessDataIsRankOne) {
  auto [data, model] = evb::generate_synthetic(5, 1, 1e-8, 300, 17);
  const evb::ThinSvd s = evb::thin_svd(Matrix(data.n_rows, data.n_cols, data.values));
  EXPECT_LE(s.singular_values[1], 1e-4 * s.singular_values[0]);
}

TEST(GenerateSyntheticTest, EmpiricalCovarianceMatchesModel) {
  auto [data, model] = evb::generate_synthetic(6, 2, 0.3, 100000, 18);
  const Matrix c = evb::data_covariance(data);
  Matrix expected(6, 6);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 6; ++j) {
      double s = i == j ? 0.09 : 0.0;
      for (std::size_t k = 0; k < 2; ++k)
        s += model.loadings()(i, k) * model.loadings()(j, k);
      expected(i, j) = s;
    }
  EXPECT_LE((c - expected).frobenius(), 0.05 * expected.frobenius());
}

TEST(GenerateSyntheticTest, DeterministicInSeed) {
  auto [a, ma] = evb::generate_synthetic(4, 2, 0.1, 50, 19);
  auto [b, mb] = evb::generate_synthetic(4, 2, 0.1, 50, 19);
  EXPECT_EQ(a.values, b.values);
  EXPECT_EQ(ma.loadings().data(), mb.loadings().data());
}

TEST(GenerateSyntheticTest, RejectsBadArguments) {
  EXPECT_THROW(evb::generate_synthetic(3, 4, 0.1, 10, 1), std::invalid_argument);
  EXPECT_THROW(evb::generate_synthetic(3, 1, 0.0, 10, 1), std::invalid_argument);
}

TEST(TrainTest, ZeroLearningRateLeavesParametersUntouched) {
  TrainConfig cfg = tiny_config(23);
  cfg.epochs = 1;
  cfg.lr = 0.0;
  const evb::TrainOutcome out = evb::train_full(cfg);
  const evb::MlpGaussianNet fresh =
      evb::MlpGaussianNet::glorot({6, 8, 4}, Rng::derive(cfg.seed, 101));
  EXPECT_EQ(out.enc.params, fresh.params);
  ASSERT_GE(out.report.rows.size(), 2u);
  EXPECT_EQ(out.report.rows.front().value, out.report.rows.back().value);
}

TEST(TrainTest, SgdTrajectoriesAreBitIdentical) {
  TrainConfig cfg = tiny_config(29);
  cfg.optimizer = evb::Optimizer::Kind::Sgd;
  cfg.lr = 1e-3;
  const evb::TrainOutcome a = evb::train_full(cfg);
  const evb::TrainOutcome b = evb::train_full(cfg);
  EXPECT_EQ(a.enc.params, b.enc.params);
  EXPECT_EQ(a.dec.params, b.dec.params);
}

TEST(TrainTest, SmokeRunProducesOrderedFiniteRowsAndFiles) {
  TrainConfig cfg = tiny_config(31);
  cfg.objective = ObjectiveKind::Eubo;
  const std::string metrics = ::testing::TempDir() + "evb_metrics_smoke.jsonl";
  const std::string ckpt = ::testing::TempDir() + "evb_ckpt_smoke.json";
  cfg.metrics_path = metrics;
  cfg.checkpoint_path = ckpt;

  const evb::TrainOutcome out = evb::train_full(cfg);
  EXPECT_FALSE(out.report.aborted);
  ASSERT_GE(out.report.rows.size(), 3u);
  for (std::size_t i = 0; i + 1 < out.report.rows.size(); ++i)
    EXPECT_LT(out.report.rows[i].epoch, out.report.rows[i + 1].epoch);
  for (const EvalRow& r : out.report.rows) {
    EXPECT_TRUE(std::isfinite(r.value));
    EXPECT_TRUE(std::isfinite(r.recon));
    EXPECT_TRUE(std::isfinite(r.gap));
    ASSERT_TRUE(r.evidence.has_value());
    EXPECT_TRUE(std::isfinite(*r.evidence));
  }

  // metrics parse as JSON lines with the report's keys
  std::ifstream in(metrics);
  ASSERT_TRUE(in.good());
  std::string line;
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_TRUE(j.contains("epoch"));
    EXPECT_TRUE(j.contains("value"));
    EXPECT_TRUE(j.contains("recon"));
    EXPECT_TRUE(j.contains("regu"));
    EXPECT_TRUE(j.contains("extra"));
    EXPECT_TRUE(j.contains("evidence"));
    EXPECT_TRUE(j.contains("gap"));
    EXPECT_FALSE(j.contains("wall_time_s"));
    ++rows;
  }
  EXPECT_EQ(rows, out.report.rows.size());

  const auto ck = nlohmann::json::parse(slurp(ckpt));
  const auto enc = evb::MlpGaussianNet::from_json(ck.at("nets").at("enc"));
  EXPECT_EQ(enc.params, out.enc.params);
  EXPECT_TRUE(ck.at("nets").contains("aux"));
  EXPECT_TRUE(ck.at("optimizers").contains("enc"));
}

TEST(TrainTest, MetricsAreByteIdenticalAcrossReruns) {
  TrainConfig cfg = tiny_config(37);
  const std::string m1 = ::testing::TempDir() + "evb_metrics_a.jsonl";
  const std::string m2 = ::testing::TempDir() + "evb_metrics_b.jsonl";
  cfg.metrics_path = m1;
  (void)evb::train(cfg);
  cfg.metrics_path = m2;
  (void)evb::train(cfg);
  EXPECT_EQ(slurp(m1), slurp(m2));
  EXPECT_FALSE(slurp(m1).empty());
}

TEST(TrainTest, DivergentRunAbortsWithDiagnosticRow) {
  TrainConfig cfg = tiny_config(41);
  cfg.optimizer = evb::Optimizer::Kind::Sgd;
  cfg.lr = 1e25;  // guaranteed overflow
  cfg.epochs = 6;
  const std::string metrics = ::testing::TempDir() + "evb_metrics_abort.jsonl";
  cfg.metrics_path = metrics;
  const evb::TrainOutcome out = evb::train_full(cfg);
  EXPECT_TRUE(out.report.aborted);
  ASSERT_GE(out.report.rows.size(), 2u);
  EXPECT_TRUE(out.report.rows.back().aborted);

  std::ifstream in(metrics);
  std::string line, last;
  while (std::getline(in, line))
    if (!line.empty()) last = line;
  const auto j = nlohmann::json::parse(last);
  EXPECT_EQ(j.at("status"), "aborted_non_finite");
}

TEST(TrainTest, CsvDataSourceWorks) {
  auto [data, model] = evb::generate_synthetic(5, 2, 0.2, 120, 43);
  const std::string csv = ::testing::TempDir() + "evb_train_data.csv";
  evb::write_csv(csv, data);

  TrainConfig cfg = tiny_config(47);
  cfg.n_x = 5;
  cfg.data_csv = csv;
  cfg.epochs = 2;
  const evb::TrainOutcome out = evb::train_full(cfg);
  EXPECT_FALSE(out.report.rows.empty());
  EXPECT_FALSE(out.report.rows.back().evidence.has_value());  // no reference model

  TrainConfig bad = cfg;
  bad.n_x = 7;
  EXPECT_THROW(evb::train_full(bad), std::runtime_error);
}

TEST(TrainTest, AnchoredObjectiveFitsItsOwnAnchor) {
  TrainConfig cfg = tiny_config(53);
  cfg.objective = ObjectiveKind::AnchoredElbo;
  cfg.epochs = 2;
  const evb::TrainOutcome out = evb::train_full(cfg);
  ASSERT_TRUE(out.anchor.has_value());
  EXPECT_EQ(out.anchor->n_z(), cfg.n_z);
  EXPECT_FALSE(out.report.aborted);
}

TEST(TrainTest, FixedPpcaDecoderStaysFrozenAndTightensFast) {
  TrainConfig cfg = tiny_config(67);
  cfg.objective = ObjectiveKind::AnchoredElbo;
  cfg.ppca_decoder = true;
  cfg.epochs = 6;
  const evb::TrainOutcome out = evb::train_full(cfg);
  ASSERT_TRUE(out.anchor.has_value());
  const evb::MlpGaussianNet fixed = evb::likelihood_net(*out.anchor);
  EXPECT_EQ(out.dec.widths, fixed.widths);
  EXPECT_EQ(out.dec.params, fixed.params);  // never updated
  EXPECT_FALSE(out.report.aborted);
  // with the exact likelihood as decoder the bound closes on the evidence
  // much faster than six epochs of decoder learning could
  const evb::EvalRow& last = out.report.rows.back();
  ASSERT_TRUE(last.evidence.has_value());
  EXPECT_GT(last.value, *last.evidence - 2.0);
}

TEST(TrainTest, ConfigValidation) {
  TrainConfig cfg = tiny_config(59);
  cfg.seed_set = false;
  EXPECT_THROW(evb::train(cfg), std::invalid_argument);
  cfg = tiny_config(59);
  cfg.batch_size = 100000;
  EXPECT_THROW(evb::train(cfg), std::invalid_argument);
  cfg = tiny_config(59);
  cfg.epochs = 0;
  EXPECT_THROW(evb::train(cfg), std::invalid_argument);
  cfg = tiny_config(59);
  cfg.mc_samples = 0;
  EXPECT_THROW(evb::train(cfg), std::invalid_argument);
}

TEST(BracketMonitorTest, ConstantIdenticalRowsAreStalledAtZeroWidth) {
  std::vector<EvalRow> rows(5);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    rows[i].epoch = i * 10;
    rows[i].value = -3.25;
  }
  const auto st = evb::bracket_monitor(rows, rows);
  EXPECT_EQ(st.bracket_width, 0.0);
  EXPECT_EQ(st.trend, Trend::Stalled);
}

TEST(BracketMonitorTest, ConvergingSeriesIsShrinking) {
  std::vector<EvalRow> lower(12), upper(12);
  for (std::size_t i = 0; i < 12; ++i) {
    lower[i].epoch = i;
    upper[i].epoch = i;
    lower[i].value = 1.0 - 1.0 / static_cast<double>(i + 1);
    upper[i].value = 1.0 + 1.0 / static_cast<double>(i + 1);
  }
  EXPECT_EQ(evb::bracket_monitor(lower, upper).trend, Trend::Shrinking);

  // widening the other way
  for (std::size_t i = 0; i < 12; ++i) {
    upper[i].value = 1.0 + 0.1 * static_cast<double>(i);
    lower[i].value = 1.0 - 0.1 * static_cast<double>(i);
  }
  EXPECT_EQ(evb::bracket_monitor(lower, upper).trend, Trend::Diverging);
}

TEST(BracketMonitorTest, CadenceMismatchThrows) {
  std::vector<EvalRow> a(3), b(3);
  for (std::size_t i = 0; i < 3; ++i) {
    a[i].epoch = i;
    b[i].epoch = i * 2;
  }
  EXPECT_THROW(evb::bracket_monitor(a, b), std::invalid_argument);
  b.pop_back();
  EXPECT_THROW(evb::bracket_monitor(a, b), std::invalid_argument);
}

TEST(BracketTest, CoTrainedSmokeRunSharesEvalGrid) {
  TrainConfig cfg = tiny_config(61);
  cfg.epochs = 4;
  const evb::BracketOutcome out = evb::co_train_bracket(cfg);
  ASSERT_EQ(out.lower.report.rows.size(), out.upper.report.rows.size());
  for (std::size_t i = 0; i < out.lower.report.rows.size(); ++i)
    EXPECT_EQ(out.lower.report.rows[i].epoch, out.upper.report.rows[i].epoch);
  EXPECT_TRUE(std::isfinite(out.status.bracket_width));
  // both runs saw the same data
  EXPECT_EQ(out.lower.data.values, out.upper.data.values);
  // upper minus lower can only dip below zero by MC noise
  const double se = std::hypot(out.lower.report.rows.back().mc_se,
                               out.upper.report.rows.back().mc_se);
  EXPECT_GE(out.status.bracket_width, -3.0 * se);
}
