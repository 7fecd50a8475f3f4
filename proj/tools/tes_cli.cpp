// tes: command-line driver for the transfer black-box attack benchmark.
//
//   tes gen-data | train-source | finetune | train-gen | soft-labels
//   tes attack [--ablation]
//   tes sweep --param alpha --values 0.1,0.5,1
//   tes report [--check]
//
// Every option can also come from an INI file given with --config; options on
// the command line win over the file.

#include <CLI11.hpp>
#include <cstdio>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "tes/harness.hpp"

namespace {

using namespace tes;
using namespace tes::harness;

constexpr int kOk = 0;
constexpr int kConfigError = 1;
constexpr int kStageFailure = 2;
constexpr int kThresholdFailure = 3;

struct Options {
  std::uint64_t seed = 0;
  std::string out = "tes-out";
  std::string mode = "untargeted";
  std::string setting = "cd";
  std::string source_arch = "ConvA";
  std::string target_arch;  // defaults to source_arch (cd) or the other one (cdca)
  std::size_t target_class = 0;
  double epsilon = 8.0 / 255.0;
  std::size_t budget = 2100;
  std::size_t population = 20;
  double eta = 0.5;
  double margin = 0.0;
  std::vector<double> alphas{0.1, 0.5, 0.75};
  std::vector<double> betas{1.0, 2.0};
  std::vector<double> sigmas{0.1, 1.0};
  std::vector<std::string> attacks{"FGSM", "PGD", "AG", "TREMBA", "TES"};
  std::size_t eval_limit = 0;
  std::size_t workers = 1;
  std::size_t source_epochs = models::TrainOptions{}.epochs;
  std::size_t finetune_epochs = models::FinetuneOptions{}.epochs;
  std::size_t generator_epochs = models::GeneratorTrainOptions{}.epochs;
  std::size_t latent_dim = 32;
  bool no_cache = false;
  bool no_probe_stop = false;
  std::string kl_order = "soft-label-first";
};

ExperimentConfig build_config(const Options& o) {
  ExperimentConfig c = ExperimentConfig::defaults(o.seed);
  c.setting = setting_from_string(o.setting);
  c.source_arch = models::arch_from_string(o.source_arch);
  if (!o.target_arch.empty())
    c.target_arch = models::arch_from_string(o.target_arch);
  else if (c.setting == Setting::cdca)
    c.target_arch = c.source_arch == ArchId::ConvA ? ArchId::ConvB : ArchId::ConvA;
  else
    c.target_arch = c.source_arch;
  c.attack.mode = models::mode_from_string(o.mode);
  c.attack.target_class = o.target_class;
  c.attack.epsilon = o.epsilon;
  c.attack.budget = o.budget;
  c.attack.population = o.population;
  c.attack.eta = o.eta;
  c.attack.margin = o.margin;
  c.attack.stop_on_probe_success = !o.no_probe_stop;
  if (o.kl_order == "soft-label-first")
    c.attack.kl_order = attacks::KlOrder::soft_label_first;
  else if (o.kl_order == "prediction-first")
    c.attack.kl_order = attacks::KlOrder::prediction_first;
  else
    throw std::invalid_argument("kl-order must be soft-label-first or prediction-first");
  c.alphas = o.alphas;
  c.betas = o.betas;
  c.sigmas = o.sigmas;
  c.attacks.clear();
  for (const auto& a : o.attacks) c.attacks.push_back(attack_from_string(a));
  c.eval_limit = o.eval_limit;
  c.workers = o.workers;
  c.source_training.epochs = o.source_epochs;
  c.finetuning.epochs = o.finetune_epochs;
  c.generator_training.epochs = o.generator_epochs;
  c.generator_training.spec.latent_dim = o.latent_dim;
  c.out_dir = o.out;
  c.use_cache = !o.no_cache;
  c.validate();
  return c;
}

void add_global_options(CLI::App& app, Options& o) {
  app.add_option("--seed", o.seed, "Master seed")->capture_default_str();
  app.add_option("--out", o.out, "Output and cache directory")->capture_default_str();
  app.add_option("--mode", o.mode, "untargeted or targeted")
      ->check(CLI::IsMember({"untargeted", "targeted"}))
      ->capture_default_str();
  app.add_option("--setting", o.setting, "cd or cdca")
      ->check(CLI::IsMember({"cd", "cdca"}))
      ->capture_default_str();
  app.add_option("--source-arch", o.source_arch, "Surrogate architecture (ConvA, ConvB)")
      ->capture_default_str();
  app.add_option("--target-arch", o.target_arch, "Architecture the target model is fine-tuned from");
  app.add_option("--target-class", o.target_class, "Targeted mode: target label")->capture_default_str();
  app.add_option("--epsilon", o.epsilon, "L-inf radius")->capture_default_str();
  app.add_option("--budget", o.budget, "Query budget per sample")->capture_default_str();
  app.add_option("--population", o.population, "Antithetic pairs per iteration")->capture_default_str();
  app.add_option("--eta", o.eta, "Latent step size")->capture_default_str();
  app.add_option("--margin", o.margin, "C&W confidence margin")->capture_default_str();
  app.add_option("--alphas", o.alphas, "Alpha grid")->delimiter(',')->capture_default_str();
  app.add_option("--betas", o.betas, "Beta grid")->delimiter(',')->capture_default_str();
  app.add_option("--sigmas", o.sigmas, "Sigma grid")->delimiter(',')->capture_default_str();
  app.add_option("--attacks", o.attacks, "FGSM,PGD,AG,TREMBA,TES,TES_INPUT")
      ->delimiter(',')
      ->capture_default_str();
  app.add_option("--eval-limit", o.eval_limit, "Test samples evaluated per domain (0 = all)")
      ->capture_default_str();
  app.add_option("--workers", o.workers, "Attack worker threads")->capture_default_str();
  app.add_option("--source-epochs", o.source_epochs)->capture_default_str();
  app.add_option("--finetune-epochs", o.finetune_epochs)->capture_default_str();
  app.add_option("--generator-epochs", o.generator_epochs)->capture_default_str();
  app.add_option("--latent-dim", o.latent_dim)->capture_default_str();
  app.add_option("--kl-order", o.kl_order, "soft-label-first or prediction-first")->capture_default_str();
  app.add_flag("--no-cache", o.no_cache, "Do not read or write cached artifacts");
  app.add_flag("--no-probe-stop", o.no_probe_stop, "Do not stop on a fooling probe");
}

void print_rows(const MetricsReport& r) {
  std::printf("%-10s %-24s %8s %8s %10s %10s %6s\n", "domain", "attack", "clean", "fool", "mq_succ",
              "mq_all", "n");
  for (const auto& row : r.rows) {
    auto opt = [](const std::optional<double>& v) {
      char buf[32];
      if (!v) return std::string("-");
      std::snprintf(buf, sizeof buf, "%.1f", *v);
      return std::string(buf);
    };
    std::printf("%-10s %-24s %8.3f %8.3f %10s %10s %6zu\n", row.domain.c_str(), row.attack.c_str(),
                row.clean_accuracy, row.fool_rate, opt(row.mean_queries_successful).c_str(),
                opt(row.mean_queries_all).c_str(), row.attacked);
  }
}

/// Invariants checked by `report --check`.
std::vector<std::string> check_report(const MetricsReport& r) {
  std::vector<std::string> failures;
  for (const auto& row : r.rows) {
    if (row.fool_rate < 0.0 || row.fool_rate > 1.0)
      failures.push_back(row.domain + " " + row.attack + ": fool rate outside [0,1]");
    if (row.fool_rate > row.clean_accuracy)
      failures.push_back(row.domain + " " + row.attack + ": fool rate above clean accuracy");
    if (!is_query_attack(row.kind) && (row.mean_queries_all || row.mean_queries_successful))
      failures.push_back(row.domain + " " + row.attack + ": zero-query attack reports queries");
  }
  for (const auto& row : r.rows) {
    if (row.kind != AttackKind::TES) continue;
    const MetricsRow* ag = r.find(row.domain, "AG");
    if (ag && row.fool_rate < ag->fool_rate)
      failures.push_back(row.domain + " " + row.attack + ": fool rate below AG");
  }
  return failures;
}

void save_text(const std::filesystem::path& path, const std::string& text) {
  std::filesystem::create_directories(path.parent_path());
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Transferred evolutionary strategies: black-box attack benchmark"};
  app.set_config("--config", "", "INI file with [section] per subcommand");
  app.require_subcommand(1);
  app.fallthrough();
  Options o;
  add_global_options(app, o);

  auto* gen = app.add_subcommand("gen-data", "Generate and save the source and target domains");
  auto* train = app.add_subcommand("train-source", "Train the source model(s)");
  auto* ft = app.add_subcommand("finetune", "Fine-tune one target model per domain");
  auto* tg = app.add_subcommand("train-gen", "Train the adversarial generator against the surrogate");
  std::size_t top_n = 3;
  auto* sl = app.add_subcommand("soft-labels", "Top source classes per target class");
  sl->add_option("--top", top_n, "Classes listed per row")->capture_default_str();
  bool ablation = false;
  auto* atk = app.add_subcommand("attack", "Run the attack suite and write report.json / samples.csv");
  atk->add_flag("--ablation", ablation, "Replace TES with guided search in input space");
  std::string param = "alpha";
  std::vector<double> values;
  auto* sw = app.add_subcommand("sweep", "Run the suite once per parameter value");
  sw->add_option("--param", param, "alpha or epsilon")->check(CLI::IsMember({"alpha", "epsilon"}));
  sw->add_option("--values", values, "Comma-separated values")->delimiter(',')->required();
  std::string report_file;
  bool check = false;
  auto* rep = app.add_subcommand("report", "Print a saved report");
  rep->add_option("--file", report_file, "Report path (default <out>/report.json)");
  rep->add_flag("--check", check, "Exit 3 if report invariants fail");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  ExperimentConfig config;
  try {
    config = build_config(o);
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  }
  const std::filesystem::path out = config.out_dir;

  try {
    if (*rep) {
      const std::filesystem::path path = report_file.empty() ? out / "report.json" : std::filesystem::path(report_file);
      const auto bytes = read_file(path);
      const MetricsReport r = parse_report_json(std::string(bytes.begin(), bytes.end()));
      print_rows(r);
      if (check) {
        const auto failures = check_report(r);
        for (const auto& f : failures) std::cerr << "check failed: " << f << "\n";
        if (!failures.empty()) return kThresholdFailure;
        std::cout << "all report checks passed\n";
      }
      return kOk;
    }

    Pipeline p(config);
    const std::size_t domains = config.targets.size();
    if (*gen) {
      data::save_dataset(p.source_data(), out / "data" / (config.source.domain_id + ".tesd"));
      for (std::size_t d = 0; d < domains; ++d)
        data::save_dataset(p.target_data(d), out / "data" / (config.targets[d].domain_id + ".tesd"));
    } else if (*train) {
      const auto& fa = p.surrogate();
      models::save_classifier(fa, out / "models" / "source.tesw");
      std::cout << "source accuracy " << models::accuracy(fa, p.source_data().test) << "\n";
      if (config.target_arch != config.source_arch)
        models::save_classifier(p.target_base(), out / "models" / "target-base.tesw");
    } else if (*ft) {
      for (std::size_t d = 0; d < domains; ++d) {
        const auto& fb = p.target_model(d);
        const auto& id = config.targets[d].domain_id;
        models::save_classifier(fb, out / "models" / ("target-" + id + ".tesw"));
        std::cout << id << " accuracy " << models::accuracy(fb, p.target_data(d).test) << "\n";
      }
    } else if (*tg) {
      for (std::size_t d = 0; d < domains; ++d) {
        const auto& g = p.generator(d);
        const auto& id = config.targets[d].domain_id;
        models::save_generator(g, out / "models" / ("generator-" + id + ".tesw"));
        std::cout << id << " generator white-box fool rate "
                  << models::generator_fool_rate(g, p.surrogate(), p.source_data().test) << "\n";
      }
    } else if (*sl) {
      std::ostringstream csv;
      csv << "domain,target_class,rank,source_class,score\n";
      for (std::size_t d = 0; d < domains; ++d) {
        const auto& id = config.targets[d].domain_id;
        std::cout << id << "\n";
        for (const auto& row : soft_label_report(p.soft_labels(d), top_n)) {
          std::cout << "  " << config.targets[d].class_glyphs[row.target_class] << ":";
          for (std::size_t r = 0; r < row.top.size(); ++r) {
            const auto [cls, score] = row.top[r];
            std::printf(" %s %.3f", config.source.class_glyphs[cls].c_str(), score);
            std::fflush(stdout);
            csv << id << ',' << row.target_class << ',' << r << ',' << cls << ',' << score << '\n';
          }
          std::cout << "\n";
        }
      }
      save_text(out / "soft_labels.csv", csv.str());
    } else if (*atk) {
      MetricsReport r = ablation ? ablation_no_generator(config) : run_experiment(config);
      print_rows(r);
    } else if (*sw) {
      const auto which = sweep_parameter_from_string(param);
      const SweepResult result = sweep(config, which, values);
      save_text(out / ("sweep-" + param + ".csv"), sweep_csv(result, which));
      for (const auto& r : result.reports) print_rows(r);
    }
  } catch (const StageError& e) {
    std::cerr << "stage failure: " << e.what() << "\n";
    return kStageFailure;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "stage failure: " << e.what() << "\n";
    return kStageFailure;
  }
  return kOk;
}
