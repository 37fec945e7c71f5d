// gufu: fingerprint database maintenance from the command line.
//
//   gufu simulate --config sim.json --out DIR
//   gufu init     --survey survey.jsonl --out STATE [--config run.json] [flags]
//   gufu update   --state STATE --batch batch.jsonl
//   gufu export   --state STATE --out db.jsonl
//   gufu eval     --state STATE --truth truth.jsonl --report eval.json [--batch-truth b.jsonl]
//
// Exit codes: 0 success, 2 bad input, 1 internal failure. Diagnostics go to
// stderr; stdout carries one JSON object per command.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "gufu/data/jsonl.hpp"
#include "gufu/error.hpp"
#include "gufu/log.hpp"
#include "gufu/pipeline.hpp"
#include "gufu/simenv.hpp"

namespace fs = std::filesystem;
using gufu::ValidationError;
using nlohmann::ordered_json;

namespace {

constexpr int kExitInput = 2;
constexpr int kExitInternal = 1;

nlohmann::json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path.string());
  try {
    nlohmann::json j;
    in >> j;
    return j;
  } catch (const nlohmann::json::parse_error& e) {
    throw gufu::ParseError(path.string() + ": " + e.what(), 0);
  }
}

void require_file(const std::string& path) {
  if (!fs::is_regular_file(path)) throw ValidationError("no such file: " + path);
}

std::optional<std::uint64_t> env_seed() {
  const char* v = std::getenv("GUFU_SEED");
  if (v == nullptr || *v == '\0') return std::nullopt;
  try {
    std::size_t used = 0;
    const unsigned long long s = std::stoull(v, &used);
    if (used != std::string(v).size()) throw std::invalid_argument(v);
    return s;
  } catch (const std::exception&) {
    throw ValidationError(std::string("GUFU_SEED is not an unsigned integer: ") + v);
  }
}

void emit(const ordered_json& j) { std::cout << j.dump() << std::endl; }

struct InitArgs {
  std::string survey, out, config;
  std::optional<double> sigma, alpha, epsilon, lr, retrain_lr;
  std::optional<int> epochs, retrain_epochs, update_epochs, layers;
  std::optional<std::size_t> negatives;
  std::optional<std::uint64_t> seed;
  std::optional<bool> edge_prediction, strict_loss, strict_delta, fresh_start;
};

gufu::RunConfig effective_config(const InitArgs& a) {
  gufu::RunConfig c;
  if (!a.config.empty()) {
    require_file(a.config);
    c = gufu::run_config_from_json(read_json_file(a.config));
  }
  if (auto s = env_seed()) c.seed = *s;
  if (a.sigma) c.sigma = *a.sigma;
  if (a.alpha) c.alpha = *a.alpha;
  if (a.epsilon) c.epsilon = *a.epsilon;
  if (a.lr) c.lr = *a.lr;
  if (a.retrain_lr) c.retrain_lr = *a.retrain_lr;
  if (a.epochs) c.epochs = *a.epochs;
  if (a.retrain_epochs) c.retrain_epochs = *a.retrain_epochs;
  if (a.update_epochs) c.update_epochs = *a.update_epochs;
  if (a.layers) c.layers = *a.layers;
  if (a.negatives) c.negatives_per_edge = *a.negatives;
  if (a.seed) c.seed = *a.seed;
  if (a.edge_prediction) c.edge_prediction = *a.edge_prediction;
  if (a.strict_loss) c.strict_loss = *a.strict_loss;
  if (a.strict_delta) c.strict_delta = *a.strict_delta;
  if (a.fresh_start) c.fresh_start = *a.fresh_start;
  c.validate();
  return c;
}

int cmd_init(const InitArgs& a) {
  require_file(a.survey);
  const gufu::RunConfig config = effective_config(a);
  std::optional<gufu::SiteBounds> bounds = config.site_bounds;
  gufu::FingerprintDatabase survey = gufu::jsonl::load_survey(a.survey, bounds);
  gufu::StateLock lock(a.out);
  const gufu::GufuState s = gufu::initialize(std::move(survey), config);
  gufu::save_state(s, a.out);
  emit({{"command", "init"},
        {"state", a.out},
        {"rows", s.db.size()},
        {"aps", s.db.ap_count()},
        {"config", gufu::to_json(s.config)}});
  return 0;
}

int cmd_update(const std::string& state, const std::string& batch_path) {
  require_file(batch_path);
  gufu::StateLock lock(state);
  gufu::GufuState s = gufu::load_state(state);
  const gufu::SignalBatch batch = gufu::jsonl::load_batch(batch_path);
  const gufu::CycleResult r = gufu::update_cycle(s, batch);
  gufu::save_state(s, state);
  gufu::save_report(state, s.cycle, r);
  emit({{"command", "update"},
        {"state", state},
        {"cycle", s.cycle},
        {"status", r.report.value("status", "")},
        {"rows", s.db.size()},
        {"aps", s.db.ap_count()},
        {"report", (fs::path(state) / "reports" / ("cycle_" + std::to_string(s.cycle) + ".json")).string()}});
  return 0;
}

int cmd_export(const std::string& state, const std::string& out) {
  const gufu::GufuState s = gufu::load_state(state);
  gufu::jsonl::save_survey(out, s.db);
  emit({{"command", "export"}, {"state", state}, {"out", out}, {"rows", s.db.size()}, {"aps", s.db.ap_count()}});
  return 0;
}

int cmd_simulate(const std::string& config_path, const std::string& out) {
  require_file(config_path);
  gufu::sim::SimConfig cfg = gufu::sim::from_json(read_json_file(config_path));
  if (auto s = env_seed()) cfg.seed = *s;
  const fs::path dir(out);
  fs::create_directories(dir);
  std::ofstream(dir / "sim_config.json") << gufu::sim::to_json(cfg).dump(2) << '\n';
  const gufu::FingerprintDatabase survey = gufu::sim::survey(cfg);
  gufu::jsonl::save_survey(dir / "survey.jsonl", survey);
  gufu::jsonl::save_survey(dir / "truth_0.jsonl", gufu::sim::truth_db(cfg, 0, survey.locations));
  for (int w = 1; w <= cfg.weeks; ++w) {
    const auto b = gufu::sim::crowdsource_batch(cfg, w, static_cast<std::size_t>(cfg.batch_size));
    const std::string k = std::to_string(w);
    gufu::jsonl::save_batch(dir / ("batch_" + k + ".jsonl"), b.batch);
    gufu::jsonl::save_batch(dir / ("batch_" + k + "_truth.jsonl"), b.batch, &b.locations);
    gufu::jsonl::save_survey(dir / ("truth_" + k + ".jsonl"), gufu::sim::truth_db(cfg, w, survey.locations));
  }
  emit({{"command", "simulate"},
        {"out", out},
        {"seed", cfg.seed},
        {"weeks", cfg.weeks},
        {"survey_rows", survey.size()},
        {"aps", cfg.aps.size()}});
  return 0;
}

int cmd_eval(const std::string& state, const std::string& truth_path, const std::string& report,
             const std::string& batch_truth) {
  require_file(truth_path);
  const gufu::GufuState s = gufu::load_state(state);
  const gufu::FingerprintDatabase truth = gufu::jsonl::load_survey(truth_path, s.db.bounds);
  if (truth.size() != s.db.size()) {
    throw ValidationError("truth has " + std::to_string(truth.size()) + " rows, database has " +
                          std::to_string(s.db.size()));
  }
  for (std::size_t i = 0; i < truth.size(); ++i)
    if (std::abs(truth.locations(i, 0) - s.db.locations(i, 0)) > 1e-6 ||
        std::abs(truth.locations(i, 1) - s.db.locations(i, 1)) > 1e-6)
      throw ValidationError("truth row " + std::to_string(i) + " is at a different location");
  const auto err = gufu::sim::rss_error(s.db, truth);
  ordered_json j{{"state", state},
                 {"cycle", s.cycle},
                 {"rss_error_db", err.mean_abs_db},
                 {"rss_entries", err.entries},
                 {"missing_in_updated", err.missing_in_updated},
                 {"extra_in_updated", err.extra_in_updated},
                 {"mean_location_error_m", nullptr},
                 {"cdf", ordered_json::array()}};
  if (!batch_truth.empty()) {
    require_file(batch_truth);
    const fs::path rp = fs::path(state) / "reports" / ("cycle_" + std::to_string(s.cycle) + ".json");
    const nlohmann::json r = read_json_file(rp);
    const auto& rows = r.at("predicted_locations");
    gufu::Matrix pred(rows.size(), 2);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      pred(i, 0) = rows[i].at(0).get<double>();
      pred(i, 1) = rows[i].at(1).get<double>();
    }
    const gufu::Matrix truth_loc = gufu::jsonl::load_locations(batch_truth);
    if (truth_loc.rows() != pred.rows()) {
      throw ValidationError("batch truth has " + std::to_string(truth_loc.rows()) + " rows, cycle " +
                            std::to_string(s.cycle) + " predicted " + std::to_string(pred.rows()));
    }
    const auto loc = gufu::sim::location_error(pred, truth_loc);
    j["mean_location_error_m"] = loc.mean_m;
    for (auto [m, f] : loc.cdf) j["cdf"].push_back({m, f});
  }
  gufu::write_text(report, j.dump(2) + "\n");
  emit(j);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Fingerprint database maintenance with crowdsourced WiFi batches"};
  app.require_subcommand(1);
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "Log progress to stderr");

  InitArgs ia;
  auto* init = app.add_subcommand("init", "Train the initial model on a labeled survey");
  init->add_option("--survey", ia.survey, "Survey JSONL")->required();
  init->add_option("--out", ia.out, "State directory")->required();
  init->add_option("--config", ia.config, "Run config JSON");
  init->add_option("--sigma", ia.sigma, "Virtual-edge cosine threshold");
  init->add_option("--alpha", ia.alpha, "Update-loss mix");
  init->add_option("--epsilon", ia.epsilon, "Trust convergence threshold");
  init->add_option("--lr", ia.lr, "Learning rate");
  init->add_option("--retrain-lr", ia.retrain_lr, "Per-cycle fine-tuning learning rate");
  init->add_option("--epochs", ia.epochs, "Initial training epochs");
  init->add_option("--retrain-epochs", ia.retrain_epochs, "Per-cycle retraining epochs");
  init->add_option("--update-epochs", ia.update_epochs, "Update-module epochs per cycle");
  init->add_option("--layers", ia.layers, "GNN layers");
  init->add_option("--negatives", ia.negatives, "Negative samples per edge");
  init->add_option("--seed", ia.seed, "Seed (overrides GUFU_SEED and the config file)");
  init->add_option("--edge-prediction", ia.edge_prediction, "Enable edge prediction (true/false)");
  init->add_option("--strict-loss", ia.strict_loss, "Graph loss without negative sampling");
  init->add_option("--strict-delta", ia.strict_delta, "Decision threshold fixed at 0");
  init->add_option("--fresh-start", ia.fresh_start, "Reinitialize the update module every cycle");

  std::string state, batch, out, sim_config, truth, report, batch_truth;
  auto* update = app.add_subcommand("update", "Apply one crowdsourced batch");
  update->add_option("--state", state, "State directory")->required();
  update->add_option("--batch", batch, "Batch JSONL")->required();

  auto* exp = app.add_subcommand("export", "Write the current database as a survey file");
  exp->add_option("--state", state, "State directory")->required();
  exp->add_option("--out", out, "Output JSONL")->required();

  auto* sim = app.add_subcommand("simulate", "Generate a synthetic survey, batches and ground truth");
  sim->add_option("--config", sim_config, "Simulation config JSON")->required();
  sim->add_option("--out", out, "Output directory")->required();

  auto* ev = app.add_subcommand("eval", "Compare the database (and last predictions) with ground truth");
  ev->add_option("--state", state, "State directory")->required();
  ev->add_option("--truth", truth, "Ground-truth fingerprints at the survey locations")->required();
  ev->add_option("--report", report, "Output JSON")->required();
  ev->add_option("--batch-truth", batch_truth, "Labeled copy of the last applied batch");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitInput;
  }
  gufu::log::set_level(verbose ? gufu::log::Level::info : gufu::log::Level::warn);

  try {
    if (init->parsed()) return cmd_init(ia);
    if (update->parsed()) return cmd_update(state, batch);
    if (exp->parsed()) return cmd_export(state, out);
    if (sim->parsed()) return cmd_simulate(sim_config, out);
    if (ev->parsed()) return cmd_eval(state, truth, report, batch_truth);
  } catch (const gufu::ValidationError& e) {
    std::cerr << "gufu: " << e.what() << '\n';
    return kExitInput;
  } catch (const gufu::ParseError& e) {
    std::cerr << "gufu: " << e.what() << '\n';
    return kExitInput;
  } catch (const std::exception& e) {
    std::cerr << "gufu: internal error: " << e.what() << '\n';
    return kExitInternal;
  }
  return kExitInternal;
}
