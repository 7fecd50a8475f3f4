#pragma once

// Experiment orchestration: domains, models and attack suites wired into the
// CD/CDCA settings, with per-sample records and aggregate metrics.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "tes/attacks.hpp"
#include "tes/data.hpp"
#include "tes/models.hpp"

namespace tes::harness {

using attacks::AttackConfig;
using attacks::ExitKind;
using models::ArchId;
using models::AttackMode;

/// CD: f_B fine-tuned from f_A's architecture. CDCA: from a different one.
enum class Setting { cd, cdca };
std::string_view to_string(Setting s);
Setting setting_from_string(std::string_view name);

enum class AttackKind { FGSM, PGD, AG, TREMBA, TES, TES_INPUT };
std::string_view to_string(AttackKind kind);
AttackKind attack_from_string(std::string_view name);
/// Zero-query transfer attacks report no query counts.
bool is_query_attack(AttackKind kind);

/// A pipeline stage failed; the message starts with the stage name.
class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& what)
      : std::runtime_error(stage + ": " + what), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  Setting setting = Setting::cd;
  data::DomainSpec source;
  std::vector<data::DomainSpec> targets;
  ArchId source_arch = ArchId::ConvA;  // white-box surrogate f_A
  ArchId target_arch = ArchId::ConvA;  // architecture f_B is fine-tuned from

  models::TrainOptions source_training;
  models::FinetuneOptions finetuning;
  models::GeneratorTrainOptions generator_training;

  std::vector<AttackKind> attacks{AttackKind::FGSM, AttackKind::PGD, AttackKind::AG,
                                  AttackKind::TREMBA, AttackKind::TES};
  /// Mode, target class, epsilon, budget, population, eta and margin; the
  /// per-run alpha/beta/sigma come from the grids below.
  AttackConfig attack;
  std::vector<double> alphas{0.1, 0.5, 0.75};
  std::vector<double> betas{1.0, 2.0};
  std::vector<double> sigmas{0.1, 1.0};

  /// Test samples evaluated per target domain (seeded subset); 0 means all.
  std::size_t eval_limit = 0;
  std::size_t workers = 1;
  std::filesystem::path out_dir = "tes-out";
  /// Reuse and store stage artifacts under out_dir/cache.
  bool use_cache = true;

  /// Desk-scale defaults: synthetic source plus the two target domains.
  static ExperimentConfig defaults(std::uint64_t seed = 0);

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
};

/// Digest of every field that affects results (not out_dir, workers, caching).
Digest config_digest(const ExperimentConfig& config);

struct SampleRecord {
  std::string domain;
  std::string attack;  // variant label, e.g. "TES[a=0.5;b=1;s=1]"
  AttackMode mode = AttackMode::untargeted;
  std::size_t sample_id = 0;  // index into the domain's test split
  std::size_t true_label = 0;
  bool success = false;
  std::optional<std::size_t> queries;
  std::optional<double> final_loss;

  // Audit fields, not part of the CSV schema.
  std::optional<ExitKind> exit;
  std::size_t iterations = 0;
  std::size_t trace_queries = 0;  // queries of the last trace entry
  std::size_t oracle_queries = 0;
  std::size_t oracle_refused = 0;
  bool scores_only = true;  // the oracle saw only image-shaped inputs
  double linf_distance = 0.0;
};

struct MetricsRow {
  std::string domain;
  std::string attack;
  AttackKind kind = AttackKind::TES;
  AttackMode mode = AttackMode::untargeted;
  std::optional<double> alpha, beta, sigma;
  std::size_t search_dim = 0;  // 0 for zero-query attacks
  double clean_accuracy = 0.0;  // f_B on the evaluated test samples
  double fool_rate = 0.0;       // successes / evaluated
  std::optional<double> mean_queries_successful;
  std::optional<double> mean_queries_all;
  std::size_t evaluated = 0;
  std::size_t attacked = 0;
  std::size_t successes = 0;
};

struct ModelSummary {
  double source_accuracy = 0.0;                // f_A on the source test split
  std::map<std::string, double> target_accuracy;  // f_B on the full target test split
  std::map<std::string, double> generator_fool_rate;  // white-box vs f_A, source test split
};

struct QueryItemization {
  std::size_t budget = 0;
  std::size_t initial_check = 1;
  std::size_t probes_per_iteration = 0;
  std::size_t checks_per_iteration = 1;
};

struct MetricsReport {
  std::string config_digest;
  std::string setting;
  QueryItemization itemization;
  ModelSummary models;
  std::vector<MetricsRow> rows;
  std::vector<SampleRecord> samples;

  const MetricsRow* find(std::string_view domain, std::string_view attack) const;
};

std::string variant_label(AttackKind kind, std::optional<double> alpha = {},
                          std::optional<double> beta = {}, std::optional<double> sigma = {});

/// Columns: domain,attack,mode,sample_id,true_label,success,queries,final_loss.
std::string samples_csv(const MetricsReport& report);
std::string report_json(const MetricsReport& report);
MetricsReport parse_report_json(std::string_view text);
/// Writes report.json and samples.csv into `dir`.
void write_report(const MetricsReport& report, const std::filesystem::path& dir);

/// Stage-by-stage pipeline with lazily built, disk-cached artifacts.
class Pipeline {
 public:
  explicit Pipeline(ExperimentConfig config);
  ~Pipeline();
  Pipeline(const Pipeline&) = delete;
  Pipeline& operator=(const Pipeline&) = delete;

  const ExperimentConfig& config() const { return config_; }

  const data::Dataset& source_data();
  const data::Dataset& target_data(std::size_t domain);
  const models::Classifier& surrogate();
  /// The model f_B is fine-tuned from: f_A under CD, a separately trained
  /// source model of target_arch under CDCA.
  const models::Classifier& target_base();
  const models::Classifier& target_model(std::size_t domain);
  /// Untargeted mode shares one generator across domains; targeted mode
  /// trains one per domain toward the source class that dominates s_{y_t}.
  const models::AdversarialGenerator& generator(std::size_t domain);
  const attacks::SoftLabelTable& soft_labels(std::size_t domain);
  /// Test indices of the evaluation subset, before filtering.
  std::vector<std::size_t> evaluation_indices(std::size_t domain);

  /// Runs the configured attack grid over every target domain.
  MetricsReport run();

  /// Names of stages that were trained rather than loaded from cache.
  const std::vector<std::string>& built_stages() const { return built_; }

 private:
  struct State;
  ExperimentConfig config_;
  std::unique_ptr<State> state_;
  std::vector<std::string> built_;
};

MetricsReport run_experiment(const ExperimentConfig& config);

/// The same guided search over full-resolution perturbations instead of
/// generator latents; every TES entry in `config.attacks` becomes TES_INPUT.
MetricsReport ablation_no_generator(ExperimentConfig config);

struct SoftLabelRow {
  std::size_t target_class = 0;
  std::vector<std::pair<std::size_t, double>> top;  // (source class, score), descending
};

std::vector<SoftLabelRow> soft_label_report(const attacks::SoftLabelTable& table,
                                            std::size_t top_n);

enum class SweepParameter { alpha, epsilon };
std::string_view to_string(SweepParameter p);
SweepParameter sweep_parameter_from_string(std::string_view name);

struct SweepResult {
  std::vector<double> values;
  std::vector<MetricsReport> reports;
};

/// One run per value. Alpha sweeps run TES only (alpha = 1 is TREMBA);
/// epsilon sweeps retrain the generator and keep the configured attacks.
SweepResult sweep(const ExperimentConfig& config, SweepParameter parameter,
                  const std::vector<double>& values);
/// Long format: parameter,value,domain,attack,fool_rate,mean_queries_successful,mean_queries_all,attacked.
std::string sweep_csv(const SweepResult& result, SweepParameter parameter);

}  // namespace tes::harness
