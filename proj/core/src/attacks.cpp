#include "tes/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace tes::attacks {

namespace {

constexpr double kScoreFloor = 1e-12;
constexpr double kDegenerateNorm = 1e-12;
constexpr std::size_t kSide = data::kSide;

Tensor image_tensor(std::span<const double> image) {
  if (image.size() != kSide * kSide)
    throw ShapeError("expected a 16x16 image, got " + std::to_string(image.size()) + " pixels");
  return Tensor({1, 1, kSide, kSide}, std::vector<double>(image.begin(), image.end()));
}

Var divergence(const Var& soft_label, const Var& probs, KlOrder order) {
  return order == KlOrder::soft_label_first ? kl_divergence(soft_label, probs)
                                            : kl_divergence(probs, soft_label);
}

/// d KL / d(point) through `to_image`, which maps a point leaf to a [1,1,16,16] image Var.
template <class ToImage>
std::vector<double> divergence_gradient(const Classifier& model, std::span<const double> point,
                                        Shape point_shape, std::span<const double> soft_label,
                                        KlOrder order, ToImage&& to_image) {
  if (soft_label.size() != model.label_space_size)
    throw ShapeError("soft label has " + std::to_string(soft_label.size()) +
                     " entries, source model has " + std::to_string(model.label_space_size) +
                     " classes");
  Tape tape;
  Var p = tape.leaf(Tensor(std::move(point_shape), std::vector<double>(point.begin(), point.end())),
                    true);
  Var probs = reshape(softmax(model.forward(to_image(tape, p))), {soft_label.size()});
  Var s = tape.leaf(Tensor::vector(std::vector<double>(soft_label.begin(), soft_label.end())));
  tape.backward(divergence(s, probs, order));
  return p.grad().values();
}

double dot(std::span<const double> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

std::vector<double> offset(std::span<const double> center, std::span<const double> delta,
                           double sign) {
  std::vector<double> out(center.begin(), center.end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += sign * delta[i];
  return out;
}

std::size_t attack_class(std::size_t label, const AttackConfig& config) {
  return config.mode == AttackMode::targeted ? config.target_class : label;
}

void signed_step(std::vector<double>& adv, std::span<const double> grad, double step) {
  for (std::size_t i = 0; i < adv.size(); ++i)
    adv[i] += step * (grad[i] > 0.0 ? 1.0 : grad[i] < 0.0 ? -1.0 : 0.0);
}

void project(std::vector<double>& adv, std::span<const double> x, double eps) {
  project_linf_ball(adv, x, eps);
  for (double& v : adv) v = std::clamp(v, 0.0, 1.0);
}

}  // namespace

// ---- oracle -------------------------------------------------------------------------

QueryOracle::QueryOracle(const Classifier& target, std::size_t budget)
    : scores_([&target](std::span<const double> image) {
        return models::predict_scores(target, image);
      }),
      budget_(budget) {}

QueryOracle::QueryOracle(ScoreFn scores, std::size_t budget)
    : scores_(std::move(scores)), budget_(budget) {}

std::optional<std::vector<double>> QueryOracle::query(std::span<const double> image) {
  if (used_ >= budget_) {
    ++refused_;
    return std::nullopt;
  }
  ++used_;
  return scores_(image);
}

// ---- soft labels ---------------------------------------------------------------------

SoftLabelTable compute_soft_labels(const Classifier& source_model, const data::Dataset& target) {
  SoftLabelTable table;
  const std::size_t k_src = source_model.label_space_size;
  table.labels.assign(target.class_count, std::vector<double>(k_src, 0.0));
  table.counts.assign(target.class_count, 0);
  std::vector<std::vector<double>> images;
  images.reserve(target.train.size());
  for (const auto& s : target.train) images.push_back(s.pixels);
  const auto logits = source_model.batch_logits(images);
  for (std::size_t i = 0; i < target.train.size(); ++i) {
    const std::size_t k = target.train[i].label;
    Tape tape;
    Var p = softmax(tape.leaf(Tensor::vector(logits[i])));
    for (std::size_t j = 0; j < k_src; ++j) table.labels[k][j] += p.value()[j];
    ++table.counts[k];
  }
  for (std::size_t k = 0; k < target.class_count; ++k) {
    if (table.counts[k] == 0)
      throw std::invalid_argument("target class " + std::to_string(k) +
                                  " has no training samples for its soft label");
    for (double& v : table.labels[k]) v /= static_cast<double>(table.counts[k]);
  }
  return table;
}

// ---- config ---------------------------------------------------------------------------

void AttackConfig::validate() const {
  if (population < 1) throw std::invalid_argument("population P must be at least 1");
  if (!(alpha > 0.0 && alpha <= 1.0)) throw std::invalid_argument("alpha must lie in (0,1]");
  if (!(epsilon > 0.0)) throw std::invalid_argument("epsilon must be positive");
  if (!(sigma > 0.0)) throw std::invalid_argument("sigma must be positive");
  if (!(beta > 0.0)) throw std::invalid_argument("beta must be positive");
  if (!(eta >= 0.0)) throw std::invalid_argument("eta must be non-negative");
  if (!(margin >= 0.0)) throw std::invalid_argument("margin must be non-negative");
}

std::string_view to_string(ExitKind kind) {
  switch (kind) {
    case ExitKind::initial_check: return "initial_check";
    case ExitKind::iteration_check: return "iteration_check";
    case ExitKind::probe: return "probe";
    case ExitKind::budget: return "budget";
  }
  return "budget";
}

// ---- losses -----------------------------------------------------------------------------

bool is_adversarial(std::span<const double> scores, std::size_t cls, AttackMode mode) {
  const std::size_t pred = models::argmax(scores);
  return mode == AttackMode::targeted ? pred == cls : pred != cls;
}

double black_box_margin(std::span<const double> scores, std::size_t cls, AttackMode mode) {
  if (scores.size() < 2 || cls >= scores.size())
    throw std::invalid_argument("black_box_margin: class outside score vector");
  auto logp = [&](std::size_t j) { return std::log(std::max(scores[j], kScoreFloor)); };
  double best_other = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < scores.size(); ++j)
    if (j != cls) best_other = std::max(best_other, logp(j));
  return mode == AttackMode::targeted ? best_other - logp(cls) : logp(cls) - best_other;
}

double black_box_loss(std::span<const double> scores, std::size_t cls, double margin,
                      AttackMode mode) {
  return std::max(black_box_margin(scores, cls, mode), -margin);
}

// ---- surrogate gradients -------------------------------------------------------------------

std::vector<double> surrogate_gradient(const Classifier& source_model,
                                       const AdversarialGenerator& generator,
                                       std::span<const double> image,
                                       std::span<const double> latent,
                                       std::span<const double> soft_label, KlOrder order) {
  if (latent.size() != generator.spec.latent_dim)
    throw ShapeError("latent code has dimension " + std::to_string(latent.size()) +
                     ", generator expects " + std::to_string(generator.spec.latent_dim));
  const Tensor x = image_tensor(image);
  return divergence_gradient(source_model, latent, {1, latent.size()}, soft_label, order,
                             [&](Tape& tape, const Var& z) {
                               auto bound = generator.params.bind(tape, false);
                               return generator.perturb(tape.borrow(x), z, bound);
                             });
}

std::vector<double> input_gradient(const Classifier& source_model, std::span<const double> image,
                                   std::span<const double> soft_label, KlOrder order) {
  return divergence_gradient(source_model, image, {1, 1, kSide, kSide}, soft_label, order,
                             [](Tape&, const Var& x) { return x; });
}

// ---- guided ES ---------------------------------------------------------------------------------

Subspace guided_subspace(std::span<const double> grad) {
  Subspace u;
  const double norm = std::sqrt(dot(grad, grad));
  if (!(norm >= kDegenerateNorm) || !std::isfinite(norm)) {
    u.basis.assign(grad.size(), 0.0);
    u.degenerate = true;
    return u;
  }
  u.basis.assign(grad.begin(), grad.end());
  for (double& v : u.basis) v /= norm;
  return u;
}

std::vector<std::vector<double>> sample_noise(const Subspace& subspace, double alpha, double sigma,
                                              std::size_t dim, std::size_t population, Rng& rng) {
  if (!(alpha > 0.0 && alpha <= 1.0)) throw std::invalid_argument("alpha must lie in (0,1]");
  if (subspace.basis.size() != dim) throw ShapeError("subspace dimension mismatch");
  const double a = subspace.degenerate ? 1.0 : alpha;
  const double iso = sigma * std::sqrt(a / static_cast<double>(dim));
  const double guided = sigma * std::sqrt(1.0 - a);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<std::vector<double>> noise(population, std::vector<double>(dim));
  for (auto& nu : noise) {
    for (double& v : nu) v = iso * normal(rng);
    const double zeta = normal(rng);
    for (std::size_t j = 0; j < dim; ++j) nu[j] += guided * subspace.basis[j] * zeta;
  }
  return noise;
}

std::vector<double> antithetic_gradient(std::span<const std::vector<double>> noise, double beta,
                                        double sigma,
                                        const std::function<double(std::span<const double>)>& loss,
                                        std::span<const double> center) {
  std::vector<double> g(center.size(), 0.0);
  for (const auto& nu : noise) {
    const double diff = loss(offset(center, nu, 1.0)) - loss(offset(center, nu, -1.0));
    for (std::size_t j = 0; j < g.size(); ++j) g[j] += nu[j] * diff;
  }
  const double s = beta / (sigma * sigma * static_cast<double>(noise.size()));
  for (double& v : g) v *= s;
  return g;
}

namespace {

/// Shared antithetic loop over oracle probes of `to_image(point)`.
template <class ToImage>
GradientEstimate oracle_estimate(QueryOracle& oracle, ToImage&& to_image,
                                 std::span<const double> center,
                                 std::span<const std::vector<double>> noise, double beta,
                                 double sigma, std::size_t cls, double margin, AttackMode mode,
                                 bool stop_on_probe_success) {
  GradientEstimate est;
  std::vector<double> g(center.size(), 0.0);
  for (const auto& nu : noise) {
    double losses[2];
    for (int arm = 0; arm < 2; ++arm) {
      auto img = to_image(offset(center, nu, arm == 0 ? 1.0 : -1.0));
      auto scores = oracle.query(img);
      if (!scores) {
        est.budget_exhausted = true;
        return est;
      }
      losses[arm] = black_box_loss(*scores, cls, margin, mode);
      if (stop_on_probe_success && is_adversarial(*scores, cls, mode)) {
        est.adversarial_probe = std::move(img);
        est.probe_loss = losses[arm];
        return est;
      }
    }
    const double diff = losses[0] - losses[1];
    for (std::size_t j = 0; j < g.size(); ++j) g[j] += nu[j] * diff;
  }
  const double s = beta / (sigma * sigma * static_cast<double>(noise.size()));
  for (double& v : g) v *= s;
  est.gradient = std::move(g);
  return est;
}

}  // namespace

GradientEstimate estimate_gradient(QueryOracle& oracle, const AdversarialGenerator& generator,
                                   std::span<const double> image, std::span<const double> latent,
                                   std::span<const std::vector<double>> noise, double beta,
                                   double sigma, std::size_t cls, double margin, AttackMode mode,
                                   bool stop_on_probe_success) {
  return oracle_estimate(
      oracle, [&](const std::vector<double>& z) { return generator.decode_perturb(image, z); },
      latent, noise, beta, sigma, cls, margin, mode, stop_on_probe_success);
}

// ---- search spaces ---------------------------------------------------------------------------

LatentSpace::LatentSpace(const AdversarialGenerator& generator, std::span<const double> image,
                         const Classifier* source_model, std::span<const double> soft_label,
                         KlOrder order)
    : generator_(generator),
      x_(image.begin(), image.end()),
      source_(source_model),
      soft_label_(soft_label.begin(), soft_label.end()),
      order_(order) {}

std::vector<double> LatentSpace::initial() const { return generator_.encode(x_); }

std::vector<double> LatentSpace::image(std::span<const double> point) const {
  return generator_.decode_perturb(x_, point);
}

std::optional<std::vector<double>> LatentSpace::surrogate(std::span<const double> point) const {
  if (!source_) return std::nullopt;
  return surrogate_gradient(*source_, generator_, x_, point, soft_label_, order_);
}

InputSpace::InputSpace(std::span<const double> image, double epsilon,
                       const Classifier* source_model, std::span<const double> soft_label,
                       KlOrder order)
    : x_(image.begin(), image.end()),
      epsilon_(epsilon),
      source_(source_model),
      soft_label_(soft_label.begin(), soft_label.end()),
      order_(order) {}

std::vector<double> InputSpace::initial() const { return std::vector<double>(x_.size(), 0.0); }

std::vector<double> InputSpace::image(std::span<const double> point) const {
  std::vector<double> adv(x_);
  for (std::size_t i = 0; i < adv.size(); ++i) adv[i] += epsilon_ * std::tanh(point[i]);
  project(adv, x_, epsilon_);
  return adv;
}

std::optional<std::vector<double>> InputSpace::surrogate(std::span<const double> point) const {
  if (!source_) return std::nullopt;
  const Tensor x = image_tensor(x_);
  const double eps = epsilon_;
  return divergence_gradient(*source_, point, {1, 1, kSide, kSide}, soft_label_, order_,
                             [&](Tape& tape, const Var& w) {
                               Var moved = add(tape.borrow(x), scale(tanh_op(w), eps));
                               return clamp(linf_project(moved, x.data(), eps), 0.0, 1.0);
                             });
}

AttackResult guided_search(const SearchSpace& space, QueryOracle& oracle, std::size_t label,
                           const AttackConfig& config) {
  config.validate();
  const std::size_t cls = attack_class(label, config);
  const std::size_t per_iteration = 2 * config.population + 1;
  Rng rng = keyed_rng({config.seed, 0xe5});
  AttackResult result;

  std::vector<double> point = space.initial();
  std::vector<double> img = space.image(point);
  auto scores = oracle.query(img);
  if (!scores) {
    result.failure_reason = "budget: no query available for the initial check";
    result.adversarial_image = std::move(img);
    return result;
  }
  result.final_loss = black_box_loss(*scores, cls, config.margin, config.mode);
  result.trace.push_back({0, result.final_loss, oracle.queries_used()});
  result.adversarial_image = img;
  if (is_adversarial(*scores, cls, config.mode)) {
    result.success = true;
    result.exit = ExitKind::initial_check;
    result.queries_used = oracle.queries_used();
    return result;
  }

  while (oracle.remaining() >= per_iteration) {
    const std::size_t iteration = ++result.iterations;
    auto grad = space.surrogate(point);
    Subspace u = grad ? guided_subspace(*grad) : Subspace{std::vector<double>(space.dim(), 0.0), true};
    if (u.degenerate) ++result.degenerate_iterations;
    auto noise = sample_noise(u, config.alpha, config.sigma, space.dim(), config.population, rng);

    GradientEstimate est =
        oracle_estimate(oracle, [&](const std::vector<double>& p) { return space.image(p); },
                        point, noise, config.beta, config.sigma, cls, config.margin, config.mode,
                        config.stop_on_probe_success);
    if (est.adversarial_probe) {
      result.success = true;
      result.exit = ExitKind::probe;
      result.final_loss = est.probe_loss;
      result.adversarial_image = std::move(*est.adversarial_probe);
      result.trace.push_back({iteration, est.probe_loss, oracle.queries_used()});
      result.queries_used = oracle.queries_used();
      return result;
    }
    if (est.budget_exhausted) break;

    for (std::size_t j = 0; j < point.size(); ++j) point[j] -= config.eta * est.gradient[j];
    img = space.image(point);
    scores = oracle.query(img);
    if (!scores) break;
    result.final_loss = black_box_loss(*scores, cls, config.margin, config.mode);
    result.trace.push_back({iteration, result.final_loss, oracle.queries_used()});
    result.adversarial_image = img;
    if (is_adversarial(*scores, cls, config.mode)) {
      result.success = true;
      result.exit = ExitKind::iteration_check;
      result.queries_used = oracle.queries_used();
      return result;
    }
  }
  result.exit = ExitKind::budget;
  result.queries_used = oracle.queries_used();
  result.failure_reason = "budget: " + std::to_string(oracle.remaining()) +
                          " queries left, an iteration needs " + std::to_string(per_iteration);
  return result;
}

// ---- attacks ------------------------------------------------------------------------------------

const std::vector<double>& guiding_soft_label(const SoftLabelTable& table, std::size_t label,
                                              const AttackConfig& config) {
  if (config.mode == AttackMode::targeted && config.targeted_uses_target_soft_label)
    return table[config.target_class];
  return table[label];
}

AttackResult tes_attack(const Classifier& source_model, const AdversarialGenerator& generator,
                        const SoftLabelTable& soft_labels, QueryOracle& oracle,
                        std::span<const double> image, std::size_t label,
                        const AttackConfig& config) {
  LatentSpace space(generator, image, &source_model, guiding_soft_label(soft_labels, label, config),
                    config.kl_order);
  return guided_search(space, oracle, label, config);
}

AttackResult tremba_attack(const AdversarialGenerator& generator, QueryOracle& oracle,
                           std::span<const double> image, std::size_t label,
                           const AttackConfig& config) {
  AttackConfig isotropic = config;
  isotropic.alpha = 1.0;
  LatentSpace space(generator, image, nullptr, {}, config.kl_order);
  return guided_search(space, oracle, label, isotropic);
}

AttackResult input_space_attack(const Classifier& source_model, const SoftLabelTable& soft_labels,
                                QueryOracle& oracle, std::span<const double> image,
                                std::size_t label, const AttackConfig& config) {
  InputSpace space(image, config.epsilon, &source_model,
                   guiding_soft_label(soft_labels, label, config), config.kl_order);
  return guided_search(space, oracle, label, config);
}

std::vector<double> fgsm_attack(const Classifier& source_model, const SoftLabelTable& soft_labels,
                                std::span<const double> image, std::size_t label,
                                const AttackConfig& config) {
  return pgd_attack(source_model, soft_labels, image, label, config, 1, config.epsilon);
}

std::vector<double> pgd_attack(const Classifier& source_model, const SoftLabelTable& soft_labels,
                               std::span<const double> image, std::size_t label,
                               const AttackConfig& config, std::size_t steps, double step_size) {
  const auto& s = guiding_soft_label(soft_labels, label, config);
  // Untargeted: move away from the class's own signature; targeted: toward the target's.
  const double direction = config.mode == AttackMode::targeted ? -1.0 : 1.0;
  std::vector<double> adv(image.begin(), image.end());
  for (std::size_t step = 0; step < steps; ++step) {
    auto grad = input_gradient(source_model, adv, s, config.kl_order);
    signed_step(adv, grad, direction * step_size);
    project(adv, image, config.epsilon);
  }
  return adv;
}

std::vector<double> ag_attack(const AdversarialGenerator& generator,
                              std::span<const double> image) {
  return generator.generate(image);
}

}  // namespace tes::attacks
