#pragma once

// Score-based black-box attacks on a fine-tuned target model, guided by a
// white-box source model, plus the transfer baselines they are compared to.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tes/data.hpp"
#include "tes/models.hpp"
#include "tes/rng.hpp"

namespace tes::attacks {

using models::AdversarialGenerator;
using models::AttackMode;
using models::Classifier;

/// Probability scores of the attacked model under a hard query budget. The
/// wrapped model is not reachable through this type.
class QueryOracle {
 public:
  using ScoreFn = std::function<std::vector<double>(std::span<const double>)>;

  QueryOracle(const Classifier& target, std::size_t budget);
  QueryOracle(ScoreFn scores, std::size_t budget);

  /// Empty once the budget is spent; refused calls are not counted as queries.
  std::optional<std::vector<double>> query(std::span<const double> image);

  std::size_t queries_used() const { return used_; }
  std::size_t budget() const { return budget_; }
  std::size_t remaining() const { return budget_ - used_; }
  std::size_t refused() const { return refused_; }

 private:
  ScoreFn scores_;
  std::size_t budget_;
  std::size_t used_ = 0;
  std::size_t refused_ = 0;
};

/// Per target class: the mean source-model probability vector over that
/// class's target-domain training samples.
struct SoftLabelTable {
  std::vector<std::vector<double>> labels;
  std::vector<std::size_t> counts;

  std::size_t target_classes() const { return labels.size(); }
  std::size_t source_classes() const { return labels.empty() ? 0 : labels.front().size(); }
  const std::vector<double>& operator[](std::size_t k) const { return labels.at(k); }
};

SoftLabelTable compute_soft_labels(const Classifier& source_model, const data::Dataset& target);

/// Argument order of the surrogate divergence.
enum class KlOrder {
  soft_label_first,  // KL(s || f_A(x))
  prediction_first,  // KL(f_A(x) || s)
};

struct AttackConfig {
  AttackMode mode = AttackMode::untargeted;
  std::size_t target_class = 0;  // target label space; targeted mode only
  double epsilon = 8.0 / 255.0;
  std::size_t budget = 2100;
  std::size_t population = 20;
  double alpha = 0.5;
  double beta = 1.0;
  double sigma = 1.0;
  double eta = 0.5;
  double margin = 0.0;
  std::uint64_t seed = 0;
  KlOrder kl_order = KlOrder::soft_label_first;
  /// Targeted attacks guide with s_{y_t}; false uses s_y.
  bool targeted_uses_target_soft_label = true;
  /// Antithetic probes that already fool the target end the attack.
  bool stop_on_probe_success = true;

  /// Throws std::invalid_argument on P < 1, alpha outside (0,1], eps <= 0 or sigma <= 0.
  void validate() const;
};

struct TraceEntry {
  std::size_t iteration = 0;
  double loss = 0.0;
  std::size_t queries = 0;
  friend bool operator==(const TraceEntry&, const TraceEntry&) = default;
};

enum class ExitKind { initial_check, iteration_check, probe, budget };
std::string_view to_string(ExitKind kind);

struct AttackResult {
  bool success = false;
  std::size_t queries_used = 0;
  std::vector<double> adversarial_image;
  std::vector<TraceEntry> trace;
  std::string failure_reason;
  ExitKind exit = ExitKind::budget;
  std::size_t iterations = 0;
  std::size_t degenerate_iterations = 0;
  double final_loss = 0.0;
};

// ---- building blocks -------------------------------------------------------------

/// Success predicate on a score vector: argmax != label (untargeted) or
/// argmax == target (targeted).
bool is_adversarial(std::span<const double> scores, std::size_t cls, AttackMode mode);

/// C&W margin with logits replaced by log-probabilities (clamped at 1e-12).
/// `cls` is the true label (untargeted) or the target class (targeted).
double black_box_margin(std::span<const double> scores, std::size_t cls, AttackMode mode);
/// max(black_box_margin, -margin).
double black_box_loss(std::span<const double> scores, std::size_t cls, double margin,
                      AttackMode mode);

/// Gradient w.r.t. the latent code of the divergence between `soft_label`
/// and f_A(decode_perturb(G, x, z)); white-box, no oracle queries.
std::vector<double> surrogate_gradient(const Classifier& source_model,
                                       const AdversarialGenerator& generator,
                                       std::span<const double> image,
                                       std::span<const double> latent,
                                       std::span<const double> soft_label,
                                       KlOrder order = KlOrder::soft_label_first);

/// Gradient w.r.t. the input image of the same divergence at `image`.
std::vector<double> input_gradient(const Classifier& source_model, std::span<const double> image,
                                   std::span<const double> soft_label,
                                   KlOrder order = KlOrder::soft_label_first);

struct Subspace {
  std::vector<double> basis;  // unit vector, or zeros when degenerate
  bool degenerate = false;
};

/// Orthonormal basis of span{grad}; degenerate when ||grad|| < 1e-12.
Subspace guided_subspace(std::span<const double> grad);

/// P draws from N(0, sigma^2 [(alpha/d) I + (1 - alpha) U U^T]). A
/// degenerate subspace samples isotropically (alpha treated as 1). Each draw
/// consumes d standard normals then one more, whatever alpha is.
std::vector<std::vector<double>> sample_noise(const Subspace& subspace, double alpha, double sigma,
                                              std::size_t dim, std::size_t population, Rng& rng);

/// g = beta / (sigma^2 P) * sum_i nu_i [L(+nu_i) - L(-nu_i)].
std::vector<double> antithetic_gradient(std::span<const std::vector<double>> noise, double beta,
                                        double sigma,
                                        const std::function<double(std::span<const double>)>& loss,
                                        std::span<const double> center);

struct GradientEstimate {
  std::vector<double> gradient;  // empty when the estimate was abandoned
  bool budget_exhausted = false;
  /// Set when a probe fooled the target and stopping on probes is enabled.
  std::optional<std::vector<double>> adversarial_probe;
  double probe_loss = 0.0;
};

/// Latent-space antithetic estimate against the oracle; spends exactly 2P
/// queries unless it stops early on a successful probe or runs out of budget.
GradientEstimate estimate_gradient(QueryOracle& oracle, const AdversarialGenerator& generator,
                                   std::span<const double> image, std::span<const double> latent,
                                   std::span<const std::vector<double>> noise, double beta,
                                   double sigma, std::size_t cls, double margin, AttackMode mode,
                                   bool stop_on_probe_success = false);

// ---- search spaces -------------------------------------------------------------

/// A parameterisation of candidate images searched by guided ES.
class SearchSpace {
 public:
  virtual ~SearchSpace() = default;
  virtual std::size_t dim() const = 0;
  virtual std::vector<double> initial() const = 0;
  virtual std::vector<double> image(std::span<const double> point) const = 0;
  /// Surrogate gradient at `point`, or empty when no surrogate is available.
  virtual std::optional<std::vector<double>> surrogate(std::span<const double> point) const = 0;
};

/// Latent codes of the adversarial generator.
class LatentSpace final : public SearchSpace {
 public:
  LatentSpace(const AdversarialGenerator& generator, std::span<const double> image,
              const Classifier* source_model, std::span<const double> soft_label,
              KlOrder order);
  std::size_t dim() const override { return generator_.spec.latent_dim; }
  std::vector<double> initial() const override;
  std::vector<double> image(std::span<const double> point) const override;
  std::optional<std::vector<double>> surrogate(std::span<const double> point) const override;

 private:
  const AdversarialGenerator& generator_;
  std::vector<double> x_;
  const Classifier* source_;
  std::vector<double> soft_label_;
  KlOrder order_;
};

/// Full-resolution perturbations: clip01(x + eps * tanh(w)), starting at w = 0.
class InputSpace final : public SearchSpace {
 public:
  InputSpace(std::span<const double> image, double epsilon, const Classifier* source_model,
             std::span<const double> soft_label, KlOrder order);
  std::size_t dim() const override { return x_.size(); }
  std::vector<double> initial() const override;
  std::vector<double> image(std::span<const double> point) const override;
  std::optional<std::vector<double>> surrogate(std::span<const double> point) const override;

 private:
  std::vector<double> x_;
  double epsilon_;
  const Classifier* source_;
  std::vector<double> soft_label_;
  KlOrder order_;
};

/// Query-accounted guided evolutionary search: one initial check, then per
/// iteration 2P antithetic probes and one check of the updated point.
AttackResult guided_search(const SearchSpace& space, QueryOracle& oracle, std::size_t label,
                           const AttackConfig& config);

// ---- attacks ------------------------------------------------------------------------

/// Soft label guiding an attack on a sample of class `label`.
const std::vector<double>& guiding_soft_label(const SoftLabelTable& table, std::size_t label,
                                              const AttackConfig& config);

AttackResult tes_attack(const Classifier& source_model, const AdversarialGenerator& generator,
                        const SoftLabelTable& soft_labels, QueryOracle& oracle,
                        std::span<const double> image, std::size_t label,
                        const AttackConfig& config);

/// Latent ES without surrogate guidance (alpha forced to 1).
AttackResult tremba_attack(const AdversarialGenerator& generator, QueryOracle& oracle,
                           std::span<const double> image, std::size_t label,
                           const AttackConfig& config);

/// Guided ES directly over input-space perturbations (no generator).
AttackResult input_space_attack(const Classifier& source_model, const SoftLabelTable& soft_labels,
                                QueryOracle& oracle, std::span<const double> image,
                                std::size_t label, const AttackConfig& config);

std::vector<double> fgsm_attack(const Classifier& source_model, const SoftLabelTable& soft_labels,
                                std::span<const double> image, std::size_t label,
                                const AttackConfig& config);

std::vector<double> pgd_attack(const Classifier& source_model, const SoftLabelTable& soft_labels,
                               std::span<const double> image, std::size_t label,
                               const AttackConfig& config, std::size_t steps = 40,
                               double step_size = 2.0 / 255.0);

std::vector<double> ag_attack(const AdversarialGenerator& generator,
                              std::span<const double> image);

}  // namespace tes::attacks
