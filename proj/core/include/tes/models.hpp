#pragma once

// Small convolutional classifiers, whole-network fine-tuning, and the
// encoder-decoder adversarial generator trained against a source model.

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "tes/autodiff.hpp"
#include "tes/data.hpp"
#include "tes/io.hpp"
#include "tes/tensor.hpp"

namespace tes::models {

enum class ArchId { ConvA, ConvB };
std::string_view to_string(ArchId arch);
ArchId arch_from_string(std::string_view name);

enum class AttackMode { untargeted, targeted };
std::string_view to_string(AttackMode mode);
AttackMode mode_from_string(std::string_view name);

struct Layer {
  enum class Kind { conv, relu, flatten, affine, reshape, upsample };
  Kind kind;
  std::string name;  // parameter prefix for conv/affine
  std::size_t in = 0, out = 0, kernel = 0, stride = 1, padding = 0;
  Shape shape;  // reshape target without the batch axis
};

/// Layer list for an architecture with a k-way head. Everything before the
/// final affine layer is the body and does not depend on k.
std::vector<Layer> architecture(ArchId arch, std::size_t classes);

struct NamedTensor {
  std::string name;
  Tensor value;
  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

/// Ordered named parameters.
class ParamSet {
 public:
  void add(std::string name, Tensor value);
  Tensor& at(std::string_view name);
  const Tensor& at(std::string_view name) const;
  bool contains(std::string_view name) const;
  std::size_t size() const { return items_.size(); }
  std::size_t scalar_count() const;

  std::vector<NamedTensor>& items() { return items_; }
  const std::vector<NamedTensor>& items() const { return items_; }

  /// Borrows every tensor onto the tape.
  std::vector<Var> bind(Tape& tape, bool requires_grad) const;
  std::vector<Tensor*> pointers();

  friend bool operator==(const ParamSet&, const ParamSet&) = default;

 private:
  std::vector<NamedTensor> items_;
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(std::size_t epoch, std::size_t step)
      : std::runtime_error("training diverged (non-finite loss) at epoch " +
                           std::to_string(epoch) + ", step " + std::to_string(step)),
        epoch(epoch),
        step(step) {}
  std::size_t epoch, step;
};

/// Runs a layer list; `bound` comes from ParamSet::bind on the same tape.
Var run_layers(std::span<const Layer> layers, const ParamSet& params, std::span<const Var> bound,
               Var x);

class Classifier {
 public:
  ArchId arch = ArchId::ConvA;
  std::size_t label_space_size = 0;
  ParamSet params;
  Digest source_digest{};  // zero when trained from scratch

  bool fine_tuned() const { return !is_zero(source_digest); }
  std::vector<Layer> layers() const { return architecture(arch, label_space_size); }
  /// Parameter names of the final affine layer.
  static bool is_head_param(std::string_view name);

  /// images: [batch,1,16,16]; returns logits [batch,k].
  Var forward(const Var& images, std::span<const Var> bound) const;
  /// Parameters borrowed as constants.
  Var forward(const Var& images) const;

  /// Logits for a batch of flattened images.
  std::vector<std::vector<double>> batch_logits(std::span<const std::vector<double>> images) const;
};

Classifier init_classifier(ArchId arch, std::size_t classes, std::uint64_t seed);

/// White-box logits of one 16x16 image.
std::vector<double> predict_logits(const Classifier& model, std::span<const double> image);
/// softmax(logits).
std::vector<double> predict_scores(const Classifier& model, std::span<const double> image);
std::size_t predict_label(const Classifier& model, std::span<const double> image);
std::size_t argmax(std::span<const double> values);

double accuracy(const Classifier& model, std::span<const data::ImageSample> samples);

struct TrainOptions {
  std::size_t epochs = 10;
  double learning_rate = 1e-3;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
};

struct FinetuneOptions {
  std::size_t epochs = 60;
  double head_learning_rate = 1e-3;
  double body_learning_rate = 1e-4;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
};

struct TrainReport {
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
  double final_loss = 0.0;
};

Classifier train_classifier(const data::Dataset& dataset, ArchId arch, const TrainOptions& opts,
                            TrainReport* report = nullptr);

/// New randomly initialised head; body copied from `source`; all parameters
/// updated. Provenance records the source digest.
Classifier finetune(const Classifier& source, const data::Dataset& target,
                    const FinetuneOptions& opts, TrainReport* report = nullptr);

/// Fine-tune starting point: the source body plus a fresh k-way head.
Classifier finetune_init(const Classifier& source, std::size_t classes, std::uint64_t seed);

// ---- adversarial generator ----------------------------------------------------

struct GeneratorSpec {
  std::size_t latent_dim = 32;
  double epsilon = 8.0 / 255.0;
  AttackMode mode = AttackMode::untargeted;
  std::size_t target_class = 0;  // source label space; targeted mode only
  double margin = 0.0;
};

class AdversarialGenerator {
 public:
  GeneratorSpec spec;
  ParamSet params;

  std::vector<Layer> encoder_layers() const;
  std::vector<Layer> decoder_layers() const;

  /// [batch,1,16,16] -> [batch,d].
  Var encode(const Var& images, std::span<const Var> bound) const;
  /// Unnormalised perturbation [batch,1,16,16].
  Var decode(const Var& latent, std::span<const Var> bound) const;
  /// clip01(x + eps * tanh(D(z))) projected onto the eps-ball of x.
  Var perturb(const Var& images, const Var& latent, std::span<const Var> bound) const;

  std::vector<double> encode(std::span<const double> image) const;
  std::vector<double> decode_perturb(std::span<const double> image,
                                     std::span<const double> latent) const;
  std::vector<double> generate(std::span<const double> image) const;

  /// Process-wide counters of single-image encode/decode calls.
  static std::size_t encode_calls();
  static std::size_t decode_calls();
};

AdversarialGenerator init_generator(const GeneratorSpec& spec, std::uint64_t seed);

struct GeneratorTrainOptions {
  GeneratorSpec spec;
  std::size_t epochs = 60;
  double learning_rate = 1e-3;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
};

struct GeneratorReport {
  double white_box_fool_rate = 0.0;  // against the surrogate on the source test split
  double final_loss = 0.0;
};

/// Minimises the C&W loss of the frozen surrogate on generated images.
AdversarialGenerator train_generator(const Classifier& surrogate, const data::Dataset& source,
                                     const GeneratorTrainOptions& opts,
                                     GeneratorReport* report = nullptr);

/// Fraction of samples whose generated image is misclassified (untargeted) or
/// classified as spec.target_class (targeted) by `model`.
double generator_fool_rate(const AdversarialGenerator& g, const Classifier& model,
                           std::span<const data::ImageSample> samples);

// ---- weight files -------------------------------------------------------------

std::vector<std::uint8_t> encode_classifier(const Classifier& model);
Classifier decode_classifier(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_generator(const AdversarialGenerator& g);
AdversarialGenerator decode_generator(std::span<const std::uint8_t> bytes);

void save_classifier(const Classifier& model, const std::filesystem::path& path);
/// Rejects a file whose architecture differs from `expected_arch` or whose
/// provenance differs from `expected_source` when those are given.
Classifier load_classifier(const std::filesystem::path& path,
                           std::optional<ArchId> expected_arch = std::nullopt,
                           std::optional<Digest> expected_source = std::nullopt);
void save_generator(const AdversarialGenerator& g, const std::filesystem::path& path);
AdversarialGenerator load_generator(const std::filesystem::path& path);

/// SHA-256 of the encoded weight file.
Digest model_digest(const Classifier& model);
Digest model_digest(const AdversarialGenerator& g);

}  // namespace tes::models
