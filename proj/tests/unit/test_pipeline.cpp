#include <gtest/gtest.h>

#include <filesystem>

#include "gufu/pipeline.hpp"
#include "gufu/simenv.hpp"

using namespace gufu;

namespace {

RunConfig small_config() {
  RunConfig c;
  c.epochs = 4;
  c.retrain_epochs = 2;
  c.update_epochs = 20;
  c.ae_hidden = 16;
  c.mlp_hidden = 8;
  c.seed = 5;
  return c;
}

struct Scenario {
  sim::SimConfig sim = sim::desk_config(1, false);
  FingerprintDatabase survey = sim::survey(sim);
  SignalBatch batch(int week, std::size_t n = 30) const { return sim::crowdsource_batch(sim, week, n).batch; }
};

std::filesystem::path scratch_dir(const std::string& name) {
  const auto d = std::filesystem::temp_directory_path() / "gufu_test_pipeline" / name;
  std::filesystem::remove_all(d);
  return d;
}

}  // namespace

TEST(Pipeline, RunsAreBitIdentical) {
  const Scenario sc;
  auto run = [&] {
    GufuState s = initialize(sc.survey, small_config());
    auto r = update_cycle(s, sc.batch(1));
    return std::make_pair(s.db, r.report.dump());
  };
  const auto a = run(), b = run();
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
}

TEST(Pipeline, SampleCountInvariantAndCycleCounter) {
  const Scenario sc;
  GufuState s = initialize(sc.survey, small_config());
  EXPECT_EQ(s.cycle, 0);
  for (int w = 1; w <= 2; ++w) {
    const auto r = update_cycle(s, sc.batch(w));
    EXPECT_EQ(s.db.size(), sc.survey.size());
    EXPECT_EQ(s.graph.samples().size(), sc.survey.size());
    EXPECT_EQ(s.db.locations, sc.survey.locations);
    EXPECT_EQ(s.cycle, w);
    EXPECT_EQ(r.report.at("cycle").get<int>(), w);
    EXPECT_EQ(r.report.at("status").get<std::string>(), "updated");
    EXPECT_EQ(r.predicted_locations.rows(), 30u);
    EXPECT_NO_THROW(validate(s.db));
  }
}

TEST(Pipeline, SaveLoadContinuesIdentically) {
  const Scenario sc;
  GufuState s = initialize(sc.survey, small_config());
  update_cycle(s, sc.batch(1));
  const auto dir = scratch_dir("resume");
  save_state(s, dir);
  GufuState t = load_state(dir);
  EXPECT_EQ(t.cycle, s.cycle);
  EXPECT_EQ(t.db, s.db);
  EXPECT_TRUE(t.ae.params() == s.ae.params());
  EXPECT_TRUE(t.gnn.params() == s.gnn.params());
  EXPECT_TRUE(t.upd.params() == s.upd.params());
  const auto a = update_cycle(s, sc.batch(2));
  const auto b = update_cycle(t, sc.batch(2));
  EXPECT_EQ(a.report.dump(), b.report.dump());
  EXPECT_EQ(s.db, t.db);
}

TEST(Pipeline, StateLockIsExclusive) {
  const auto dir = scratch_dir("lock");
  {
    StateLock lock(dir);
    EXPECT_THROW(StateLock again(dir), ValidationError);
  }
  EXPECT_NO_THROW(StateLock after(dir));
}

TEST(Pipeline, EmptyBatchIsNoOp) {
  const Scenario sc;
  GufuState s = initialize(sc.survey, small_config());
  const auto before = s.db;
  SignalBatch empty{Matrix(0, 0), {}, "nothing"};
  const auto r = update_cycle(s, empty);
  EXPECT_EQ(r.report.at("status").get<std::string>(), "empty");
  EXPECT_EQ(s.db, before);
  EXPECT_EQ(s.cycle, 1);
}

TEST(Pipeline, DisjointBatchSkipsUpdateStep) {
  const Scenario sc;
  GufuState s = initialize(sc.survey, small_config());
  SignalBatch b{Matrix::from_rows({{-50.0}, {-60.0}}), {"0a:00:00:00:00:01"}, "foreign"};
  const auto r = update_cycle(s, b);
  EXPECT_EQ(r.report.at("status").get<std::string>(), "ap_changes_only");
  EXPECT_EQ(s.db.size(), sc.survey.size());
}

TEST(Pipeline, NewApReported) {
  const Scenario sc;
  GufuState s = initialize(sc.survey, small_config());
  SignalBatch b = sc.batch(1);
  Matrix rss(b.rss.rows(), b.rss.cols() + 1, kUndetectedDbm);
  for (std::size_t i = 0; i < b.rss.rows(); ++i) {
    for (std::size_t j = 0; j < b.rss.cols(); ++j) rss(i, j) = b.rss(i, j);
    if (i % 3 == 0) rss(i, b.rss.cols()) = -55.0;
  }
  b.rss = rss;
  b.macs.push_back("0a:00:00:00:00:99");
  const auto r = update_cycle(s, b);
  const auto added = r.report.at("added_ap_nodes").get<std::vector<std::string>>();
  EXPECT_NE(std::find(added.begin(), added.end(), "0a:00:00:00:00:99"), added.end());
}

TEST(Pipeline, SingleSampleSurvey) {
  const Scenario sc;
  FingerprintDatabase one;
  one.macs = sc.survey.macs;
  const std::vector<std::size_t> first{0};
  one.rss = gather_rows(sc.survey.rss, first);
  one.locations = gather_rows(sc.survey.locations, first);
  one.bounds = sc.survey.bounds;
  GufuState s = initialize(one, small_config());
  EXPECT_EQ(s.graph.samples().size(), 1u);
  EXPECT_NO_THROW(update_cycle(s, sc.batch(1, 5)));
  EXPECT_EQ(s.db.size(), 1u);
}

TEST(Pipeline, InvalidInputsRejected) {
  const Scenario sc;
  RunConfig bad = small_config();
  bad.sigma = 1.5;
  EXPECT_THROW(initialize(sc.survey, bad), ValidationError);
  FingerprintDatabase empty;
  EXPECT_THROW(initialize(empty, small_config()), ValidationError);
  EXPECT_THROW(run_config_from_json(nlohmann::json{{"sigmaa", 0.9}}), ValidationError);
  EXPECT_THROW(run_config_from_json(nlohmann::json{{"alpha", 2.0}}), ValidationError);
  const RunConfig c = run_config_from_json(nlohmann::json{{"alpha", 0.25}, {"layers", 3}});
  EXPECT_EQ(c.alpha, 0.25);
  EXPECT_EQ(c.layers, 3);
  EXPECT_EQ(run_config_from_json(to_json(c)).alpha, 0.25);
}

TEST(Pipeline, ColumnMapMatchesNames) {
  const auto m = detail::column_map({"a", "b", "c"}, {"c", "a", "d"});
  EXPECT_EQ(m, (std::vector<long>{1, -1, 0}));
}
