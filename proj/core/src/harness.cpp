#include "tes/harness.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <iostream>
#include <mutex>
#include <json.hpp>
#include <sstream>
#include <thread>

#include "tes/rng.hpp"

namespace tes::harness {

namespace fs = std::filesystem;
using json = nlohmann::json;
using models::AdversarialGenerator;
using models::Classifier;

// ---- names ------------------------------------------------------------------------

std::string_view to_string(Setting s) { return s == Setting::cd ? "cd" : "cdca"; }

Setting setting_from_string(std::string_view name) {
  if (name == "cd") return Setting::cd;
  if (name == "cdca") return Setting::cdca;
  throw std::invalid_argument("unknown setting '" + std::string(name) + "' (expected cd or cdca)");
}

namespace {
constexpr std::pair<AttackKind, std::string_view> kAttackNames[] = {
    {AttackKind::FGSM, "FGSM"},     {AttackKind::PGD, "PGD"}, {AttackKind::AG, "AG"},
    {AttackKind::TREMBA, "TREMBA"}, {AttackKind::TES, "TES"}, {AttackKind::TES_INPUT, "TES_INPUT"},
};
}  // namespace

std::string_view to_string(AttackKind kind) {
  for (auto [k, name] : kAttackNames)
    if (k == kind) return name;
  return "?";
}

AttackKind attack_from_string(std::string_view name) {
  for (auto [k, n] : kAttackNames)
    if (n == name) return k;
  throw std::invalid_argument("unknown attack '" + std::string(name) + "'");
}

bool is_query_attack(AttackKind kind) {
  return kind == AttackKind::TREMBA || kind == AttackKind::TES || kind == AttackKind::TES_INPUT;
}

std::string_view to_string(SweepParameter p) { return p == SweepParameter::alpha ? "alpha" : "epsilon"; }

SweepParameter sweep_parameter_from_string(std::string_view name) {
  if (name == "alpha") return SweepParameter::alpha;
  if (name == "epsilon" || name == "eps") return SweepParameter::epsilon;
  throw std::invalid_argument("unknown sweep parameter '" + std::string(name) + "'");
}

namespace {

std::string format_double(double v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

}  // namespace

std::string variant_label(AttackKind kind, std::optional<double> alpha, std::optional<double> beta,
                          std::optional<double> sigma) {
  std::string out(to_string(kind));
  std::vector<std::string> parts;
  if (alpha) parts.push_back("a=" + format_double(*alpha));
  if (beta) parts.push_back("b=" + format_double(*beta));
  if (sigma) parts.push_back("s=" + format_double(*sigma));
  if (parts.empty()) return out;
  out += '[';
  for (std::size_t i = 0; i < parts.size(); ++i) out += (i ? ";" : "") + parts[i];
  return out + ']';
}

// ---- config -----------------------------------------------------------------------

ExperimentConfig ExperimentConfig::defaults(std::uint64_t seed) {
  ExperimentConfig c;
  c.seed = seed;
  c.source = data::default_source_spec(seed);
  c.targets = data::default_target_specs(seed);
  return c;
}

void ExperimentConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument(what); };
  if (targets.empty()) fail("targets: at least one target domain is required");
  if (source.class_glyphs.size() < 2) fail("source: at least two classes are required");
  for (const auto& t : targets) {
    if (t.class_glyphs.size() < 2) fail("target " + t.domain_id + ": at least two classes are required");
    if (t.domain_id.empty()) fail("target domain id must not be empty");
  }
  for (std::size_t i = 0; i < targets.size(); ++i)
    for (std::size_t j = i + 1; j < targets.size(); ++j)
      if (targets[i].domain_id == targets[j].domain_id)
        fail("targets: duplicate domain id '" + targets[i].domain_id + "'");
  if (setting == Setting::cd && source_arch != target_arch)
    fail("setting cd requires source_arch == target_arch");
  if (setting == Setting::cdca && source_arch == target_arch)
    fail("setting cdca requires source_arch != target_arch");
  if (attacks.empty()) fail("attacks: list is empty");
  auto positive = [&](const std::vector<double>& grid, const char* name) {
    if (grid.empty()) fail(std::string(name) + ": grid is empty");
    for (double v : grid)
      if (!(v > 0.0) || !std::isfinite(v)) fail(std::string(name) + ": grid values must be positive");
  };
  positive(alphas, "alpha");
  positive(betas, "beta");
  positive(sigmas, "sigma");
  for (double a : alphas)
    if (a > 1.0) fail("alpha: grid values must be in (0, 1]");
  AttackConfig probe = attack;
  probe.alpha = alphas.front();
  probe.sigma = sigmas.front();
  probe.validate();
  if (attack.mode == AttackMode::targeted)
    for (const auto& t : targets)
      if (attack.target_class >= t.class_glyphs.size())
        fail("target_class out of range for domain " + t.domain_id);
  if (source_training.epochs == 0 || generator_training.epochs == 0)
    fail("training epochs must be positive");
  if (workers == 0) fail("workers must be positive");
}

namespace {

void add_train(DigestBuilder& b, const models::TrainOptions& o) {
  b.add(std::uint64_t{o.epochs}).add(o.learning_rate).add(std::uint64_t{o.batch_size}).add(o.seed);
}

void add_finetune(DigestBuilder& b, const models::FinetuneOptions& o) {
  b.add(std::uint64_t{o.epochs})
      .add(o.head_learning_rate)
      .add(o.body_learning_rate)
      .add(std::uint64_t{o.batch_size})
      .add(o.seed);
}

void add_generator(DigestBuilder& b, const models::GeneratorTrainOptions& o) {
  b.add(std::uint64_t{o.spec.latent_dim})
      .add(o.spec.epsilon)
      .add(models::to_string(o.spec.mode))
      .add(std::uint64_t{o.spec.target_class})
      .add(o.spec.margin)
      .add(std::uint64_t{o.epochs})
      .add(o.learning_rate)
      .add(std::uint64_t{o.batch_size})
      .add(o.seed);
}

}  // namespace

Digest config_digest(const ExperimentConfig& c) {
  DigestBuilder b;
  b.add("tes-experiment/1").add(c.seed).add(to_string(c.setting));
  b.add(data::spec_digest(c.source));
  b.add(std::uint64_t{c.targets.size()});
  for (const auto& t : c.targets) b.add(data::spec_digest(t));
  b.add(models::to_string(c.source_arch)).add(models::to_string(c.target_arch));
  add_train(b, c.source_training);
  add_finetune(b, c.finetuning);
  add_generator(b, c.generator_training);
  b.add(std::uint64_t{c.attacks.size()});
  for (auto k : c.attacks) b.add(to_string(k));
  const auto& a = c.attack;
  b.add(models::to_string(a.mode))
      .add(std::uint64_t{a.target_class})
      .add(a.epsilon)
      .add(std::uint64_t{a.budget})
      .add(std::uint64_t{a.population})
      .add(a.eta)
      .add(a.margin)
      .add(std::uint64_t{a.kl_order == attacks::KlOrder::soft_label_first ? 0u : 1u})
      .add(std::uint64_t{a.targeted_uses_target_soft_label})
      .add(std::uint64_t{a.stop_on_probe_success});
  for (const auto* grid : {&c.alphas, &c.betas, &c.sigmas}) {
    b.add(std::uint64_t{grid->size()});
    for (double v : *grid) b.add(v);
  }
  b.add(std::uint64_t{c.eval_limit});
  return b.finish();
}

// ---- report -----------------------------------------------------------------------

const MetricsRow* MetricsReport::find(std::string_view domain, std::string_view attack) const {
  for (const auto& r : rows)
    if (r.domain == domain && r.attack == attack) return &r;
  return nullptr;
}

std::string samples_csv(const MetricsReport& report) {
  std::string out = "domain,attack,mode,sample_id,true_label,success,queries,final_loss\n";
  for (const auto& s : report.samples) {
    out += s.domain + ',' + s.attack + ',' + std::string(models::to_string(s.mode)) + ',' +
           std::to_string(s.sample_id) + ',' + std::to_string(s.true_label) + ',' +
           (s.success ? "1" : "0") + ',' + (s.queries ? std::to_string(*s.queries) : "") + ',' +
           (s.final_loss ? format_double(*s.final_loss) : "") + '\n';
  }
  return out;
}

namespace {

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::optional<double> optional_double(const json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}

}  // namespace

std::string report_json(const MetricsReport& r) {
  json j;
  j["schema"] = "tes-report/1";
  j["config_digest"] = r.config_digest;
  j["setting"] = r.setting;
  j["query_itemization"] = {
      {"budget", r.itemization.budget},
      {"initial_check", r.itemization.initial_check},
      {"probes_per_iteration", r.itemization.probes_per_iteration},
      {"checks_per_iteration", r.itemization.checks_per_iteration},
  };
  json m;
  m["source_accuracy"] = r.models.source_accuracy;
  m["target_accuracy"] = r.models.target_accuracy;
  m["generator_fool_rate"] = r.models.generator_fool_rate;
  j["models"] = m;
  json rows = json::array();
  for (const auto& row : r.rows) {
    rows.push_back({
        {"domain", row.domain},
        {"attack", row.attack},
        {"kind", to_string(row.kind)},
        {"mode", models::to_string(row.mode)},
        {"alpha", optional_json(row.alpha)},
        {"beta", optional_json(row.beta)},
        {"sigma", optional_json(row.sigma)},
        {"search_dim", row.search_dim},
        {"clean_accuracy", row.clean_accuracy},
        {"fool_rate", row.fool_rate},
        {"mean_queries_successful", optional_json(row.mean_queries_successful)},
        {"mean_queries_all", optional_json(row.mean_queries_all)},
        {"evaluated", row.evaluated},
        {"attacked", row.attacked},
        {"successes", row.successes},
    });
  }
  j["rows"] = rows;
  return j.dump(2) + "\n";
}

MetricsReport parse_report_json(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("report is not valid JSON: ") + e.what());
  }
  if (j.value("schema", "") != "tes-report/1")
    throw std::invalid_argument("report schema is not tes-report/1");
  MetricsReport r;
  try {
    r.config_digest = j.at("config_digest").get<std::string>();
    r.setting = j.at("setting").get<std::string>();
    const auto& q = j.at("query_itemization");
    r.itemization.budget = q.at("budget").get<std::size_t>();
    r.itemization.initial_check = q.at("initial_check").get<std::size_t>();
    r.itemization.probes_per_iteration = q.at("probes_per_iteration").get<std::size_t>();
    r.itemization.checks_per_iteration = q.at("checks_per_iteration").get<std::size_t>();
    const auto& m = j.at("models");
    r.models.source_accuracy = m.at("source_accuracy").get<double>();
    r.models.target_accuracy = m.at("target_accuracy").get<std::map<std::string, double>>();
    r.models.generator_fool_rate = m.at("generator_fool_rate").get<std::map<std::string, double>>();
    for (const auto& jr : j.at("rows")) {
      MetricsRow row;
      row.domain = jr.at("domain").get<std::string>();
      row.attack = jr.at("attack").get<std::string>();
      row.kind = attack_from_string(jr.at("kind").get<std::string>());
      row.mode = models::mode_from_string(jr.at("mode").get<std::string>());
      row.alpha = optional_double(jr, "alpha");
      row.beta = optional_double(jr, "beta");
      row.sigma = optional_double(jr, "sigma");
      row.search_dim = jr.at("search_dim").get<std::size_t>();
      row.clean_accuracy = jr.at("clean_accuracy").get<double>();
      row.fool_rate = jr.at("fool_rate").get<double>();
      row.mean_queries_successful = optional_double(jr, "mean_queries_successful");
      row.mean_queries_all = optional_double(jr, "mean_queries_all");
      row.evaluated = jr.at("evaluated").get<std::size_t>();
      row.attacked = jr.at("attacked").get<std::size_t>();
      row.successes = jr.at("successes").get<std::size_t>();
      r.rows.push_back(std::move(row));
    }
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("malformed report: ") + e.what());
  }
  return r;
}

void write_report(const MetricsReport& report, const fs::path& dir) {
  fs::create_directories(dir);
  auto put = [&](const char* name, const std::string& text) {
    write_file(dir / name, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  };
  put("report.json", report_json(report));
  put("samples.csv", samples_csv(report));
}

// ---- pipeline ---------------------------------------------------------------------

struct Pipeline::State {
  std::optional<data::Dataset> source;
  std::vector<std::optional<data::Dataset>> targets;
  std::optional<Classifier> surrogate;
  Digest surrogate_key{};
  std::optional<Classifier> target_base;
  Digest target_base_key{};
  std::vector<std::optional<Classifier>> target_models;
  std::vector<std::optional<attacks::SoftLabelTable>> soft_labels;
  std::map<Digest, AdversarialGenerator> generators;  // keyed by cache key
  std::vector<std::optional<Digest>> generator_keys;
  std::map<std::string, double> generator_rates;
};

namespace {

void log_stage(const std::string& msg) { std::clog << "[tes] " << msg << std::endl; }

std::string short_hex(const Digest& d) { return to_hex(d).substr(0, 16); }

template <class F>
auto stage(const std::string& name, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(name, e.what());
  }
}

}  // namespace

Pipeline::Pipeline(ExperimentConfig config) : config_(std::move(config)), state_(std::make_unique<State>()) {
  config_.validate();
  // The generator perturbs within the attack's ball.
  config_.generator_training.spec.epsilon = config_.attack.epsilon;
  config_.generator_training.spec.margin = config_.attack.margin;
  config_.generator_training.spec.mode = config_.attack.mode;
  const std::size_t n = config_.targets.size();
  state_->targets.resize(n);
  state_->target_models.resize(n);
  state_->soft_labels.resize(n);
  state_->generator_keys.resize(n);
}

Pipeline::~Pipeline() = default;

namespace {

fs::path cache_path(const ExperimentConfig& c, std::string_view kind, const Digest& key,
                    std::string_view ext) {
  return c.out_dir / "cache" / (std::string(kind) + "-" + short_hex(key) + std::string(ext));
}

data::Dataset load_or_generate(const ExperimentConfig& c, const data::DomainSpec& spec,
                               std::vector<std::string>& built) {
  const Digest key = data::spec_digest(spec);
  const fs::path path = cache_path(c, "data-" + spec.domain_id, key, ".tesd");
  if (c.use_cache && fs::exists(path)) {
    try {
      data::Dataset d = data::load_dataset(path);
      d.spec = spec;
      return d;
    } catch (const std::exception& e) {
      log_stage("discarding unreadable cache " + path.string() + ": " + e.what());
    }
  }
  log_stage("generating domain " + spec.domain_id);
  data::Dataset d = data::generate_domain(spec);
  built.push_back("data:" + spec.domain_id);
  if (c.use_cache) data::save_dataset(d, path);
  return d;
}

std::optional<Classifier> try_load_classifier(const fs::path& path, ArchId arch,
                                              std::optional<Digest> source) {
  if (!fs::exists(path)) return std::nullopt;
  try {
    return models::load_classifier(path, arch, source);
  } catch (const std::exception& e) {
    log_stage("discarding unreadable cache " + path.string() + ": " + e.what());
    return std::nullopt;
  }
}

Classifier train_source_model(const ExperimentConfig& c, const data::Dataset& source, ArchId arch,
                              Digest& key_out, std::vector<std::string>& built) {
  models::TrainOptions opts = c.source_training;
  opts.seed = stream_key({c.seed, opts.seed, fnv1a("source-model"), fnv1a(models::to_string(arch))});
  DigestBuilder b;
  b.add("source-model").add(data::spec_digest(c.source)).add(models::to_string(arch));
  add_train(b, opts);
  key_out = b.finish();
  const fs::path path = cache_path(c, "source-" + std::string(models::to_string(arch)), key_out, ".tesw");
  if (c.use_cache)
    if (auto m = try_load_classifier(path, arch, std::nullopt)) return std::move(*m);
  log_stage("training source model " + std::string(models::to_string(arch)));
  models::TrainReport report;
  Classifier m = models::train_classifier(source, arch, opts, &report);
  log_stage("source model test accuracy " + format_double(report.test_accuracy));
  built.push_back("source:" + std::string(models::to_string(arch)));
  if (c.use_cache) models::save_classifier(m, path);
  return m;
}

}  // namespace

const data::Dataset& Pipeline::source_data() {
  if (!state_->source)
    state_->source = stage("gen-data", [&] { return load_or_generate(config_, config_.source, built_); });
  return *state_->source;
}

const data::Dataset& Pipeline::target_data(std::size_t domain) {
  auto& slot = state_->targets.at(domain);
  if (!slot)
    slot = stage("gen-data", [&] { return load_or_generate(config_, config_.targets[domain], built_); });
  return *slot;
}

const Classifier& Pipeline::surrogate() {
  if (!state_->surrogate) {
    const auto& src = source_data();
    state_->surrogate = stage("train-source", [&] {
      return train_source_model(config_, src, config_.source_arch, state_->surrogate_key, built_);
    });
  }
  return *state_->surrogate;
}

const Classifier& Pipeline::target_base() {
  if (config_.target_arch == config_.source_arch) {
    surrogate();
    state_->target_base_key = state_->surrogate_key;
    return *state_->surrogate;
  }
  if (!state_->target_base) {
    const auto& src = source_data();
    state_->target_base = stage("train-source", [&] {
      return train_source_model(config_, src, config_.target_arch, state_->target_base_key, built_);
    });
  }
  return *state_->target_base;
}

const Classifier& Pipeline::target_model(std::size_t domain) {
  auto& slot = state_->target_models.at(domain);
  if (slot) return *slot;
  const Classifier& base = target_base();
  const data::Dataset& target = target_data(domain);
  slot = stage("finetune", [&]() -> Classifier {
    const auto& spec = config_.targets[domain];
    models::FinetuneOptions opts = config_.finetuning;
    opts.seed = stream_key({config_.seed, opts.seed, fnv1a("finetune"), fnv1a(spec.domain_id)});
    DigestBuilder b;
    b.add("finetune").add(state_->target_base_key).add(data::spec_digest(spec));
    add_finetune(b, opts);
    const Digest key = b.finish();
    const fs::path path = cache_path(config_, "target-" + spec.domain_id, key, ".tesw");
    if (config_.use_cache)
      if (auto m = try_load_classifier(path, config_.target_arch, models::model_digest(base)))
        return std::move(*m);
    log_stage("fine-tuning target model for " + spec.domain_id);
    models::TrainReport report;
    Classifier m = models::finetune(base, target, opts, &report);
    log_stage(spec.domain_id + " target test accuracy " + format_double(report.test_accuracy));
    built_.push_back("finetune:" + spec.domain_id);
    if (config_.use_cache) models::save_classifier(m, path);
    return m;
  });
  return *slot;
}

const attacks::SoftLabelTable& Pipeline::soft_labels(std::size_t domain) {
  auto& slot = state_->soft_labels.at(domain);
  if (!slot) {
    const Classifier& fa = surrogate();
    const data::Dataset& target = target_data(domain);
    slot = stage("soft-labels", [&] { return attacks::compute_soft_labels(fa, target); });
  }
  return *slot;
}

const AdversarialGenerator& Pipeline::generator(std::size_t domain) {
  if (auto& k = state_->generator_keys.at(domain)) return state_->generators.at(*k);
  const Classifier& fa = surrogate();
  const data::Dataset& src = source_data();
  models::GeneratorTrainOptions opts = config_.generator_training;
  std::string tag = "generator";
  if (config_.attack.mode == AttackMode::targeted) {
    // Stage-I target: the source class carrying most of s_{y_t}.
    const auto& s = soft_labels(domain)[config_.attack.target_class];
    opts.spec.target_class = models::argmax(s);
    tag += "-" + config_.targets[domain].domain_id;
  } else {
    opts.spec.target_class = 0;
  }
  opts.seed = stream_key({config_.seed, opts.seed, fnv1a("generator"), opts.spec.target_class});
  DigestBuilder b;
  b.add("generator").add(state_->surrogate_key).add(data::spec_digest(config_.source));
  add_generator(b, opts);
  const Digest key = b.finish();
  state_->generator_keys[domain] = key;
  if (state_->generators.count(key)) return state_->generators.at(key);

  AdversarialGenerator g = stage("train-gen", [&]() -> AdversarialGenerator {
    const fs::path path = cache_path(config_, tag, key, ".tesw");
    if (config_.use_cache && fs::exists(path)) {
      try {
        return models::load_generator(path);
      } catch (const std::exception& e) {
        log_stage("discarding unreadable cache " + path.string() + ": " + e.what());
      }
    }
    log_stage("training generator (" + std::string(models::to_string(opts.spec.mode)) + ")");
    models::GeneratorReport report;
    AdversarialGenerator trained = models::train_generator(fa, src, opts, &report);
    log_stage("generator white-box fool rate " + format_double(report.white_box_fool_rate));
    built_.push_back(tag);
    if (config_.use_cache) models::save_generator(trained, path);
    return trained;
  });
  return state_->generators.emplace(key, std::move(g)).first->second;
}

std::vector<std::size_t> Pipeline::evaluation_indices(std::size_t domain) {
  const data::Dataset& target = target_data(domain);
  std::vector<std::pair<std::uint64_t, std::size_t>> keyed;
  for (std::size_t i = 0; i < target.test.size(); ++i) {
    if (config_.attack.mode == AttackMode::targeted && target.test[i].label == config_.attack.target_class)
      continue;
    keyed.emplace_back(stream_key({config_.seed, fnv1a("eval"), domain, i}), i);
  }
  std::sort(keyed.begin(), keyed.end());
  if (config_.eval_limit > 0 && keyed.size() > config_.eval_limit) keyed.resize(config_.eval_limit);
  std::vector<std::size_t> out;
  for (auto [k, i] : keyed) out.push_back(i);
  std::sort(out.begin(), out.end());
  return out;
}

namespace {

struct Variant {
  AttackKind kind;
  std::optional<double> alpha, beta, sigma;
  std::string label;
};

std::vector<Variant> expand(const ExperimentConfig& c) {
  std::vector<Variant> out;
  for (AttackKind k : c.attacks) {
    if (!is_query_attack(k)) {
      out.push_back({k, {}, {}, {}, variant_label(k)});
      continue;
    }
    const std::vector<double> alphas = k == AttackKind::TREMBA ? std::vector<double>{1.0} : c.alphas;
    for (double a : alphas)
      for (double b : c.betas)
        for (double s : c.sigmas) {
          std::optional<double> shown_alpha;
          if (k != AttackKind::TREMBA) shown_alpha = a;
          out.push_back({k, a, b, s, variant_label(k, shown_alpha, b, s)});
        }
  }
  return out;
}

void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < n;) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

double linf(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

MetricsReport Pipeline::run() {
  const auto& c = config_;
  MetricsReport report;
  report.config_digest = to_hex(config_digest(c));
  report.setting = std::string(to_string(c.setting));
  report.itemization.budget = c.attack.budget;
  report.itemization.probes_per_iteration = 2 * c.attack.population;

  const Classifier& fa = surrogate();
  report.models.source_accuracy = models::accuracy(fa, source_data().test);
  const std::vector<Variant> variants = expand(c);
  const std::size_t side = data::kSide * data::kSide;

  for (std::size_t d = 0; d < c.targets.size(); ++d) {
    const std::string& domain = c.targets[d].domain_id;
    const data::Dataset& target = target_data(d);
    const Classifier& fb = target_model(d);
    const auto& table = soft_labels(d);
    const AdversarialGenerator& g = generator(d);
    report.models.target_accuracy[domain] = models::accuracy(fb, target.test);
    report.models.generator_fool_rate[domain] = models::generator_fool_rate(g, fa, source_data().test);

    const std::vector<std::size_t> evaluated = evaluation_indices(d);
    std::vector<std::size_t> attacked;
    for (std::size_t i : evaluated)
      if (models::predict_label(fb, target.test[i].pixels) == target.test[i].label) attacked.push_back(i);
    const double clean = evaluated.empty() ? 0.0 : double(attacked.size()) / double(evaluated.size());
    log_stage(domain + ": " + std::to_string(attacked.size()) + " of " + std::to_string(evaluated.size()) +
              " evaluated samples correctly classified");

    for (const Variant& v : variants) {
      std::vector<SampleRecord> records(attacked.size());
      stage("attack", [&] {
        parallel_for(attacked.size(), c.workers, [&](std::size_t j) {
          const std::size_t id = attacked[j];
          const auto& sample = target.test[id];
          const std::size_t label = sample.label;
          const std::size_t cls = c.attack.mode == AttackMode::targeted ? c.attack.target_class : label;
          AttackConfig ac = c.attack;
          ac.alpha = v.alpha.value_or(ac.alpha);
          ac.beta = v.beta.value_or(ac.beta);
          ac.sigma = v.sigma.value_or(ac.sigma);
          ac.seed = stream_key({c.seed, d, id});

          SampleRecord& rec = records[j];
          rec.domain = domain;
          rec.attack = v.label;
          rec.mode = c.attack.mode;
          rec.sample_id = id;
          rec.true_label = label;

          std::vector<double> adv;
          if (is_query_attack(v.kind)) {
            bool scores_only = true;
            attacks::QueryOracle oracle(
                [&](std::span<const double> img) {
                  if (img.size() != side) scores_only = false;
                  for (double p : img)
                    if (!(p >= 0.0 && p <= 1.0)) scores_only = false;
                  return models::predict_scores(fb, img);
                },
                c.attack.budget);
            attacks::AttackResult r;
            if (v.kind == AttackKind::TES)
              r = attacks::tes_attack(fa, g, table, oracle, sample.pixels, label, ac);
            else if (v.kind == AttackKind::TREMBA)
              r = attacks::tremba_attack(g, oracle, sample.pixels, label, ac);
            else
              r = attacks::input_space_attack(fa, table, oracle, sample.pixels, label, ac);
            rec.success = r.success;
            rec.queries = r.queries_used;
            rec.final_loss = r.final_loss;
            rec.exit = r.exit;
            rec.iterations = r.iterations;
            rec.trace_queries = r.trace.empty() ? 0 : r.trace.back().queries;
            rec.oracle_queries = oracle.queries_used();
            rec.oracle_refused = oracle.refused();
            rec.scores_only = scores_only;
            adv = std::move(r.adversarial_image);
          } else {
            if (v.kind == AttackKind::FGSM)
              adv = attacks::fgsm_attack(fa, table, sample.pixels, label, ac);
            else if (v.kind == AttackKind::PGD)
              adv = attacks::pgd_attack(fa, table, sample.pixels, label, ac);
            else
              adv = attacks::ag_attack(g, sample.pixels);
            const auto scores = models::predict_scores(fb, adv);
            rec.success = attacks::is_adversarial(scores, cls, c.attack.mode);
            rec.final_loss = attacks::black_box_loss(scores, cls, c.attack.margin, c.attack.mode);
          }
          rec.linf_distance = linf(adv, sample.pixels);
        });
        return 0;
      });

      MetricsRow row;
      row.domain = domain;
      row.attack = v.label;
      row.kind = v.kind;
      row.mode = c.attack.mode;
      if (v.kind != AttackKind::TREMBA) row.alpha = v.alpha;
      row.beta = v.beta;
      row.sigma = v.sigma;
      row.clean_accuracy = clean;
      row.evaluated = evaluated.size();
      row.attacked = attacked.size();
      if (v.kind == AttackKind::TES || v.kind == AttackKind::TREMBA)
        row.search_dim = g.spec.latent_dim;
      else if (v.kind == AttackKind::TES_INPUT)
        row.search_dim = side;
      std::size_t q_success = 0, q_all = 0;
      for (const auto& r : records) {
        row.successes += r.success;
        if (r.queries) {
          q_all += *r.queries;
          if (r.success) q_success += *r.queries;
        }
      }
      row.fool_rate = evaluated.empty() ? 0.0 : double(row.successes) / double(evaluated.size());
      if (is_query_attack(v.kind)) {
        if (row.successes > 0) row.mean_queries_successful = double(q_success) / double(row.successes);
        if (!records.empty()) row.mean_queries_all = double(q_all) / double(records.size());
      }
      log_stage(domain + " " + v.label + ": fool rate " + format_double(row.fool_rate));
      report.rows.push_back(row);
      for (auto& r : records) report.samples.push_back(std::move(r));
    }
  }
  return report;
}

MetricsReport run_experiment(const ExperimentConfig& config) {
  Pipeline p(config);
  MetricsReport r = p.run();
  write_report(r, config.out_dir);
  return r;
}

MetricsReport ablation_no_generator(ExperimentConfig config) {
  std::vector<AttackKind> kinds;
  for (AttackKind k : config.attacks)
    if (k == AttackKind::TES || k == AttackKind::TES_INPUT) kinds.push_back(AttackKind::TES_INPUT);
  if (kinds.empty()) kinds.push_back(AttackKind::TES_INPUT);
  kinds.erase(std::unique(kinds.begin(), kinds.end()), kinds.end());
  config.attacks = kinds;
  return run_experiment(config);
}

std::vector<SoftLabelRow> soft_label_report(const attacks::SoftLabelTable& table, std::size_t top_n) {
  std::vector<SoftLabelRow> rows;
  for (std::size_t k = 0; k < table.target_classes(); ++k) {
    SoftLabelRow row;
    row.target_class = k;
    for (std::size_t j = 0; j < table[k].size(); ++j) row.top.emplace_back(j, table[k][j]);
    std::stable_sort(row.top.begin(), row.top.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    if (row.top.size() > top_n) row.top.resize(top_n);
    rows.push_back(std::move(row));
  }
  return rows;
}

SweepResult sweep(const ExperimentConfig& config, SweepParameter parameter,
                  const std::vector<double>& values) {
  if (values.empty()) throw std::invalid_argument("sweep: no values given");
  SweepResult out;
  for (double v : values) {
    ExperimentConfig c = config;
    if (parameter == SweepParameter::alpha) {
      c.attacks = {AttackKind::TES};
      c.alphas = {v};
    } else {
      c.attack.epsilon = v;
    }
    c.out_dir = config.out_dir / ("sweep-" + std::string(to_string(parameter)) + "-" + format_double(v));
    // Reuse the parent cache so unchanged stages are loaded, not retrained.
    Pipeline p([&] {
      ExperimentConfig pc = c;
      pc.out_dir = config.out_dir;
      return pc;
    }());
    MetricsReport r = p.run();
    write_report(r, c.out_dir);
    out.values.push_back(v);
    out.reports.push_back(std::move(r));
  }
  return out;
}

std::string sweep_csv(const SweepResult& result, SweepParameter parameter) {
  std::string out =
      "parameter,value,domain,attack,fool_rate,mean_queries_successful,mean_queries_all,attacked\n";
  auto opt = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string(); };
  for (std::size_t i = 0; i < result.values.size(); ++i)
    for (const auto& row : result.reports[i].rows)
      out += std::string(to_string(parameter)) + ',' + format_double(result.values[i]) + ',' + row.domain +
             ',' + row.attack + ',' + format_double(row.fool_rate) + ',' +
             opt(row.mean_queries_successful) + ',' + opt(row.mean_queries_all) + ',' +
             std::to_string(row.attacked) + '\n';
  return out;
}

}  // namespace tes::harness
