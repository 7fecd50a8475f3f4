#include "tes/models.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "tes/optim.hpp"
#include "tes/rng.hpp"

namespace tes::models {

namespace {

constexpr std::size_t kSide = data::kSide;
constexpr std::size_t kPixels = kSide * kSide;

std::atomic<std::size_t> g_encode_calls{0};
std::atomic<std::size_t> g_decode_calls{0};

Layer conv(std::string name, std::size_t in, std::size_t out, std::size_t k, std::size_t stride,
           std::size_t pad) {
  return {Layer::Kind::conv, std::move(name), in, out, k, stride, pad, {}};
}
Layer affine_layer(std::string name, std::size_t in, std::size_t out) {
  return {Layer::Kind::affine, std::move(name), in, out, 0, 1, 0, {}};
}
Layer relu_layer() { return {Layer::Kind::relu, "", 0, 0, 0, 1, 0, {}}; }
Layer flatten_layer() { return {Layer::Kind::flatten, "", 0, 0, 0, 1, 0, {}}; }
Layer upsample_layer() { return {Layer::Kind::upsample, "", 0, 0, 0, 1, 0, {}}; }
Layer reshape_layer(Shape s) { return {Layer::Kind::reshape, "", 0, 0, 0, 1, 0, std::move(s)}; }

std::size_t index_of(const ParamSet& params, const std::string& name) {
  const auto& items = params.items();
  for (std::size_t i = 0; i < items.size(); ++i)
    if (items[i].name == name) return i;
  throw std::out_of_range("no parameter named '" + name + "'");
}

void init_layers(ParamSet& params, std::span<const Layer> layers, std::uint64_t seed) {
  for (const Layer& l : layers) {
    if (l.kind != Layer::Kind::conv && l.kind != Layer::Kind::affine) continue;
    Rng rng = keyed_rng({seed, fnv1a(l.name)});
    const std::size_t fan_in = l.kind == Layer::Kind::conv ? l.in * l.kernel * l.kernel : l.in;
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> u(-bound, bound);
    Shape wshape = l.kind == Layer::Kind::conv ? Shape{l.out, l.in, l.kernel, l.kernel}
                                               : Shape{l.in, l.out};
    Tensor w(wshape);
    for (double& v : w.data()) v = u(rng);
    params.add(l.name + ".weight", std::move(w));
    params.add(l.name + ".bias", Tensor({l.out}, 0.0));
  }
}

Tensor image_batch(std::span<const std::vector<double>> images) {
  Tensor t({images.size(), 1, kSide, kSide});
  for (std::size_t b = 0; b < images.size(); ++b) {
    if (images[b].size() != kPixels)
      throw ShapeError("expected a 16x16 image, got " + std::to_string(images[b].size()) +
                       " pixels");
    std::copy(images[b].begin(), images[b].end(), t.data().begin() + b * kPixels);
  }
  return t;
}

Tensor image_tensor(std::span<const double> image) {
  if (image.size() != kPixels)
    throw ShapeError("expected a 16x16 image, got " + std::to_string(image.size()) + " pixels");
  return Tensor({1, 1, kSide, kSide}, std::vector<double>(image.begin(), image.end()));
}

std::vector<double> row(const Tensor& t, std::size_t r) {
  const std::size_t cols = t.dim(1);
  return {t.data().begin() + r * cols, t.data().begin() + (r + 1) * cols};
}

// Adam over mini-batches of cross-entropy; shared by scratch training and fine-tuning.
void fit(Classifier& model, const data::Dataset& ds, std::size_t epochs, std::size_t batch_size,
         std::uint64_t seed, std::span<const double> rates, double base_rate,
         TrainReport* report) {
  if (ds.class_count != model.label_space_size)
    throw std::invalid_argument("dataset has " + std::to_string(ds.class_count) +
                                " classes but model head has " +
                                std::to_string(model.label_space_size));
  AdamState state;
  AdamHyper hyper;
  hyper.learning_rate = base_rate;
  std::vector<std::size_t> order(ds.train.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng = keyed_rng({seed, 0x5f0ffe});
  const auto layers = model.layers();
  double last_loss = 0.0;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += batch_size, ++step) {
      const std::size_t n = std::min(batch_size, order.size() - start);
      Tensor x({n, 1, kSide, kSide});
      std::vector<std::size_t> labels(n);
      for (std::size_t b = 0; b < n; ++b) {
        const auto& s = ds.train[order[start + b]];
        std::copy(s.pixels.begin(), s.pixels.end(), x.data().begin() + b * kPixels);
        labels[b] = s.label;
      }
      Tape tape;
      auto bound = model.params.bind(tape, true);
      Var logits = run_layers(layers, model.params, bound, tape.leaf(std::move(x)));
      Var loss = cross_entropy(logits, labels);
      last_loss = loss.value().item();
      if (!std::isfinite(last_loss)) throw TrainingDiverged(epoch, step);
      tape.backward(loss);
      std::vector<const Tensor*> grads;
      for (const Var& v : bound) grads.push_back(&v.grad());
      auto ptrs = model.params.pointers();
      try {
        adam_step(ptrs, grads, state, hyper, rates);
      } catch (const NonFiniteGradient&) {
        throw TrainingDiverged(epoch, step);
      }
    }
  }
  if (report) {
    report->final_loss = last_loss;
    report->train_accuracy = accuracy(model, ds.train);
    report->test_accuracy = accuracy(model, ds.test);
  }
}

}  // namespace

std::string_view to_string(ArchId arch) { return arch == ArchId::ConvA ? "ConvA" : "ConvB"; }

ArchId arch_from_string(std::string_view name) {
  if (name == "ConvA") return ArchId::ConvA;
  if (name == "ConvB") return ArchId::ConvB;
  throw std::invalid_argument("unknown architecture '" + std::string(name) + "'");
}

std::string_view to_string(AttackMode mode) {
  return mode == AttackMode::untargeted ? "untargeted" : "targeted";
}

AttackMode mode_from_string(std::string_view name) {
  if (name == "untargeted") return AttackMode::untargeted;
  if (name == "targeted") return AttackMode::targeted;
  throw std::invalid_argument("unknown attack mode '" + std::string(name) + "'");
}

std::vector<Layer> architecture(ArchId arch, std::size_t classes) {
  if (classes < 2) throw std::invalid_argument("classifier needs at least two classes");
  switch (arch) {
    case ArchId::ConvA:
      return {conv("conv1", 1, 8, 3, 1, 1), relu_layer(), conv("conv2", 8, 16, 3, 2, 1),
              relu_layer(), flatten_layer(), affine_layer("fc1", 16 * 8 * 8, 64), relu_layer(),
              affine_layer("head", 64, classes)};
    case ArchId::ConvB:
      return {conv("conv1", 1, 6, 5, 1, 2),  relu_layer(), conv("conv2", 6, 12, 3, 2, 1),
              relu_layer(), conv("conv3", 12, 24, 3, 2, 1), relu_layer(), flatten_layer(),
              affine_layer("head", 24 * 4 * 4, classes)};
  }
  throw std::invalid_argument("unknown architecture");
}

// ---- ParamSet ---------------------------------------------------------------------

void ParamSet::add(std::string name, Tensor value) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
  items_.push_back({std::move(name), std::move(value)});
}

Tensor& ParamSet::at(std::string_view name) {
  for (auto& item : items_)
    if (item.name == name) return item.value;
  throw std::out_of_range("no parameter named '" + std::string(name) + "'");
}

const Tensor& ParamSet::at(std::string_view name) const {
  return const_cast<ParamSet*>(this)->at(name);
}

bool ParamSet::contains(std::string_view name) const {
  return std::any_of(items_.begin(), items_.end(),
                     [&](const NamedTensor& t) { return t.name == name; });
}

std::size_t ParamSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& item : items_) n += item.value.size();
  return n;
}

std::vector<Var> ParamSet::bind(Tape& tape, bool requires_grad) const {
  std::vector<Var> vars;
  vars.reserve(items_.size());
  for (const auto& item : items_) vars.push_back(tape.borrow(item.value, requires_grad));
  return vars;
}

std::vector<Tensor*> ParamSet::pointers() {
  std::vector<Tensor*> out;
  for (auto& item : items_) out.push_back(&item.value);
  return out;
}

// ---- forward ------------------------------------------------------------------------

Var run_layers(std::span<const Layer> layers, const ParamSet& params, std::span<const Var> bound,
               Var x) {
  if (bound.size() != params.size())
    throw std::invalid_argument("bound parameter count does not match parameter set");
  for (const Layer& l : layers) {
    switch (l.kind) {
      case Layer::Kind::conv:
        x = conv2d(x, bound[index_of(params, l.name + ".weight")],
                   bound[index_of(params, l.name + ".bias")], l.stride, l.padding);
        break;
      case Layer::Kind::affine:
        x = affine(x, bound[index_of(params, l.name + ".weight")],
                   bound[index_of(params, l.name + ".bias")]);
        break;
      case Layer::Kind::relu: x = relu(x); break;
      case Layer::Kind::flatten: x = flatten(x); break;
      case Layer::Kind::upsample: x = upsample2x(x); break;
      case Layer::Kind::reshape: {
        Shape s{x.shape()[0]};
        s.insert(s.end(), l.shape.begin(), l.shape.end());
        x = reshape(x, std::move(s));
        break;
      }
    }
  }
  return x;
}

bool Classifier::is_head_param(std::string_view name) { return name.starts_with("head."); }

Var Classifier::forward(const Var& images, std::span<const Var> bound) const {
  const auto l = layers();
  return run_layers(l, params, bound, images);
}

Var Classifier::forward(const Var& images) const {
  auto bound = params.bind(images.tape(), false);
  return forward(images, bound);
}

std::vector<std::vector<double>> Classifier::batch_logits(
    std::span<const std::vector<double>> images) const {
  std::vector<std::vector<double>> out;
  out.reserve(images.size());
  constexpr std::size_t kChunk = 128;
  for (std::size_t start = 0; start < images.size(); start += kChunk) {
    const std::size_t n = std::min(kChunk, images.size() - start);
    Tape tape;
    Var logits = forward(tape.leaf(image_batch(images.subspan(start, n))));
    for (std::size_t r = 0; r < n; ++r) out.push_back(row(logits.value(), r));
  }
  return out;
}

Classifier init_classifier(ArchId arch, std::size_t classes, std::uint64_t seed) {
  Classifier c;
  c.arch = arch;
  c.label_space_size = classes;
  init_layers(c.params, c.layers(), seed);
  return c;
}

std::vector<double> predict_logits(const Classifier& model, std::span<const double> image) {
  Tape tape;
  Var logits = model.forward(tape.leaf(image_tensor(image)));
  return row(logits.value(), 0);
}

std::vector<double> predict_scores(const Classifier& model, std::span<const double> image) {
  Tape tape;
  Var scores = softmax(model.forward(tape.leaf(image_tensor(image))));
  return row(scores.value(), 0);
}

std::size_t argmax(std::span<const double> values) {
  return static_cast<std::size_t>(std::max_element(values.begin(), values.end()) - values.begin());
}

std::size_t predict_label(const Classifier& model, std::span<const double> image) {
  return argmax(predict_logits(model, image));
}

double accuracy(const Classifier& model, std::span<const data::ImageSample> samples) {
  if (samples.empty()) return 0.0;
  std::vector<std::vector<double>> images;
  images.reserve(samples.size());
  for (const auto& s : samples) images.push_back(s.pixels);
  const auto logits = model.batch_logits(images);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < samples.size(); ++i)
    correct += argmax(logits[i]) == samples[i].label;
  return static_cast<double>(correct) / static_cast<double>(samples.size());
}

Classifier train_classifier(const data::Dataset& dataset, ArchId arch, const TrainOptions& opts,
                            TrainReport* report) {
  Classifier model = init_classifier(arch, dataset.class_count, opts.seed);
  fit(model, dataset, opts.epochs, opts.batch_size, opts.seed, {}, opts.learning_rate, report);
  return model;
}

Classifier finetune_init(const Classifier& source, std::size_t classes, std::uint64_t seed) {
  Classifier fresh = init_classifier(source.arch, classes, seed);
  for (auto& item : fresh.params.items())
    if (!Classifier::is_head_param(item.name)) item.value = source.params.at(item.name);
  fresh.source_digest = model_digest(source);
  return fresh;
}

Classifier finetune(const Classifier& source, const data::Dataset& target,
                    const FinetuneOptions& opts, TrainReport* report) {
  Classifier model = finetune_init(source, target.class_count, opts.seed);
  std::vector<double> rates;
  for (const auto& item : model.params.items())
    rates.push_back(Classifier::is_head_param(item.name) ? opts.head_learning_rate
                                                         : opts.body_learning_rate);
  fit(model, target, opts.epochs, opts.batch_size, opts.seed, rates, opts.head_learning_rate,
      report);
  return model;
}

// ---- generator ----------------------------------------------------------------------

std::vector<Layer> AdversarialGenerator::encoder_layers() const {
  return {conv("enc.conv1", 1, 8, 3, 2, 1), relu_layer(), conv("enc.conv2", 8, 16, 3, 2, 1),
          relu_layer(), flatten_layer(), affine_layer("enc.fc", 16 * 4 * 4, spec.latent_dim)};
}

std::vector<Layer> AdversarialGenerator::decoder_layers() const {
  return {affine_layer("dec.fc", spec.latent_dim, 16 * 4 * 4), relu_layer(),
          reshape_layer({16, 4, 4}), upsample_layer(), conv("dec.conv1", 16, 8, 3, 1, 1),
          relu_layer(), upsample_layer(), conv("dec.conv2", 8, 1, 3, 1, 1)};
}

Var AdversarialGenerator::encode(const Var& images, std::span<const Var> bound) const {
  const auto l = encoder_layers();
  return run_layers(l, params, bound, images);
}

Var AdversarialGenerator::decode(const Var& latent, std::span<const Var> bound) const {
  if (latent.shape().size() != 2 || latent.shape()[1] != spec.latent_dim)
    throw ShapeError("latent code must be [batch," + std::to_string(spec.latent_dim) + "], got " +
                     shape_string(latent.shape()));
  const auto l = decoder_layers();
  return run_layers(l, params, bound, latent);
}

Var AdversarialGenerator::perturb(const Var& images, const Var& latent,
                                  std::span<const Var> bound) const {
  Var delta = scale(tanh_op(decode(latent, bound)), spec.epsilon);
  Var moved = linf_project(add(images, delta), images.value().data(), spec.epsilon);
  return clamp(moved, 0.0, 1.0);
}

std::vector<double> AdversarialGenerator::encode(std::span<const double> image) const {
  g_encode_calls.fetch_add(1, std::memory_order_relaxed);
  Tape tape;
  auto bound = params.bind(tape, false);
  Var z = encode(tape.leaf(image_tensor(image)), bound);
  return z.value().values();
}

std::vector<double> AdversarialGenerator::decode_perturb(std::span<const double> image,
                                                         std::span<const double> latent) const {
  g_decode_calls.fetch_add(1, std::memory_order_relaxed);
  if (latent.size() != spec.latent_dim)
    throw ShapeError("latent code has dimension " + std::to_string(latent.size()) +
                     ", generator expects " + std::to_string(spec.latent_dim));
  Tape tape;
  auto bound = params.bind(tape, false);
  Var z = tape.leaf(Tensor({1, spec.latent_dim}, std::vector<double>(latent.begin(), latent.end())));
  Var x = tape.leaf(image_tensor(image));
  return perturb(x, z, bound).value().values();
}

std::vector<double> AdversarialGenerator::generate(std::span<const double> image) const {
  return decode_perturb(image, encode(image));
}

std::size_t AdversarialGenerator::encode_calls() { return g_encode_calls.load(); }
std::size_t AdversarialGenerator::decode_calls() { return g_decode_calls.load(); }

AdversarialGenerator init_generator(const GeneratorSpec& spec, std::uint64_t seed) {
  if (spec.latent_dim == 0) throw std::invalid_argument("latent dimension must be positive");
  if (!(spec.epsilon >= 0.0)) throw std::invalid_argument("epsilon must be non-negative");
  AdversarialGenerator g;
  g.spec = spec;
  init_layers(g.params, g.encoder_layers(), seed);
  init_layers(g.params, g.decoder_layers(), seed);
  return g;
}

AdversarialGenerator train_generator(const Classifier& surrogate, const data::Dataset& source,
                                     const GeneratorTrainOptions& opts, GeneratorReport* report) {
  if (source.class_count != surrogate.label_space_size)
    throw std::invalid_argument("surrogate label space does not match the source dataset");
  if (opts.spec.mode == AttackMode::targeted && opts.spec.target_class >= source.class_count)
    throw std::invalid_argument("generator target class outside source label space");
  AdversarialGenerator g = init_generator(opts.spec, opts.seed);
  AdamState state;
  AdamHyper hyper;
  hyper.learning_rate = opts.learning_rate;
  std::vector<std::size_t> order(source.train.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng = keyed_rng({opts.seed, 0x6e4});
  double last_loss = 0.0;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += opts.batch_size, ++step) {
      const std::size_t n = std::min(opts.batch_size, order.size() - start);
      Tensor x({n, 1, kSide, kSide});
      std::vector<std::size_t> classes(n);
      for (std::size_t b = 0; b < n; ++b) {
        const auto& s = source.train[order[start + b]];
        std::copy(s.pixels.begin(), s.pixels.end(), x.data().begin() + b * kPixels);
        classes[b] = opts.spec.mode == AttackMode::targeted ? opts.spec.target_class : s.label;
      }
      Tape tape;
      auto bound = g.params.bind(tape, true);
      Var images = tape.leaf(std::move(x));
      Var adv = g.perturb(images, g.encode(images, bound), bound);
      Var logits = surrogate.forward(adv);
      Var loss = opts.spec.mode == AttackMode::targeted
                     ? cw_loss_targeted(logits, classes, opts.spec.margin)
                     : cw_loss_untargeted(logits, classes, opts.spec.margin);
      last_loss = loss.value().item();
      if (!std::isfinite(last_loss)) throw TrainingDiverged(epoch, step);
      tape.backward(loss);
      std::vector<const Tensor*> grads;
      for (const Var& v : bound) grads.push_back(&v.grad());
      auto ptrs = g.params.pointers();
      try {
        adam_step(ptrs, grads, state, hyper);
      } catch (const NonFiniteGradient&) {
        throw TrainingDiverged(epoch, step);
      }
    }
  }
  if (report) {
    report->final_loss = last_loss;
    report->white_box_fool_rate = generator_fool_rate(g, surrogate, source.test);
  }
  return g;
}

double generator_fool_rate(const AdversarialGenerator& g, const Classifier& model,
                           std::span<const data::ImageSample> samples) {
  if (samples.empty()) return 0.0;
  std::size_t fooled = 0;
  constexpr std::size_t kChunk = 128;
  for (std::size_t start = 0; start < samples.size(); start += kChunk) {
    const std::size_t n = std::min(kChunk, samples.size() - start);
    Tensor x({n, 1, kSide, kSide});
    for (std::size_t b = 0; b < n; ++b)
      std::copy(samples[start + b].pixels.begin(), samples[start + b].pixels.end(),
                x.data().begin() + b * kPixels);
    Tape tape;
    auto bound = g.params.bind(tape, false);
    Var images = tape.leaf(std::move(x));
    Var logits = model.forward(g.perturb(images, g.encode(images, bound), bound));
    for (std::size_t b = 0; b < n; ++b) {
      const std::size_t pred = argmax(row(logits.value(), b));
      fooled += g.spec.mode == AttackMode::targeted ? pred == g.spec.target_class
                                                    : pred != samples[start + b].label;
    }
  }
  return static_cast<double>(fooled) / static_cast<double>(samples.size());
}

// ---- weight files ----------------------------------------------------------------------

namespace {

constexpr std::string_view kWeightMagic = "TESW";
constexpr std::uint32_t kWeightVersion = 1;
constexpr std::string_view kGeneratorArch = "Generator";
constexpr std::string_view kGeneratorMeta = "meta.spec";

std::vector<std::uint8_t> encode_weights(std::string_view arch, std::uint32_t k,
                                         const Digest& provenance,
                                         std::span<const NamedTensor> blocks) {
  ByteWriter w;
  w.raw(kWeightMagic);
  w.u32(kWeightVersion);
  w.str16(arch);
  w.u32(k);
  w.raw(provenance);
  w.u32(static_cast<std::uint32_t>(blocks.size()));
  for (const NamedTensor& b : blocks) {
    w.str16(b.name);
    w.u8(static_cast<std::uint8_t>(b.value.rank()));
    for (std::size_t d : b.value.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (double v : b.value.data()) w.f64(v);
  }
  return w.take();
}

struct WeightFile {
  std::string arch;
  std::uint32_t k = 0;
  Digest provenance{};
  std::vector<NamedTensor> blocks;
};

WeightFile decode_weights(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  r.need(8, "weight header");
  if (r.raw(4) != kWeightMagic) throw FormatError("bad weight-file magic, expected TESW", 0);
  const std::uint32_t version = r.u32();
  if (version != kWeightVersion)
    throw FormatError("unsupported weight-file version " + std::to_string(version), 4);
  WeightFile f;
  f.arch = r.str16();
  f.k = r.u32();
  r.need(32, "provenance digest");
  const std::string digest = r.raw(32);
  std::copy(digest.begin(), digest.end(), f.provenance.begin());
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor b;
    b.name = r.str16();
    const std::size_t at = r.position();
    const std::uint8_t rank = r.u8();
    if (rank == 0) throw FormatError("block '" + b.name + "' has rank 0", at);
    Shape shape(rank);
    for (auto& d : shape) {
      d = r.u32();
      if (d == 0) throw FormatError("block '" + b.name + "' has a zero dimension", at);
    }
    const std::size_t n = shape_size(shape);
    r.need(8 * n, "block '" + b.name + "' values");
    std::vector<double> values(n);
    for (double& v : values) v = r.f64();
    b.value = Tensor(std::move(shape), std::move(values));
    f.blocks.push_back(std::move(b));
  }
  if (r.remaining() != 0)
    throw FormatError("trailing bytes after weight blocks", r.position());
  return f;
}

}  // namespace

std::vector<std::uint8_t> encode_classifier(const Classifier& model) {
  return encode_weights(to_string(model.arch), static_cast<std::uint32_t>(model.label_space_size),
                        model.source_digest, model.params.items());
}

Classifier decode_classifier(std::span<const std::uint8_t> bytes) {
  WeightFile f = decode_weights(bytes);
  Classifier c;
  try {
    c.arch = arch_from_string(f.arch);
  } catch (const std::invalid_argument&) {
    throw FormatError("weight file holds '" + f.arch + "', not a classifier", 8);
  }
  c.label_space_size = f.k;
  c.source_digest = f.provenance;
  // Validate against the architecture's expected layout.
  Classifier expected = init_classifier(c.arch, c.label_space_size, 0);
  if (expected.params.size() != f.blocks.size())
    throw FormatError("weight file has " + std::to_string(f.blocks.size()) + " blocks, " +
                          std::string(to_string(c.arch)) + " needs " +
                          std::to_string(expected.params.size()),
                      8);
  for (std::size_t i = 0; i < f.blocks.size(); ++i) {
    const auto& want = expected.params.items()[i];
    if (want.name != f.blocks[i].name || want.value.shape() != f.blocks[i].value.shape())
      throw FormatError("block '" + f.blocks[i].name + "' does not match " + want.name + " " +
                            shape_string(want.value.shape()),
                        8);
    c.params.add(f.blocks[i].name, std::move(f.blocks[i].value));
  }
  return c;
}

std::vector<std::uint8_t> encode_generator(const AdversarialGenerator& g) {
  std::vector<NamedTensor> blocks = g.params.items();
  blocks.push_back({std::string(kGeneratorMeta),
                    Tensor::vector({g.spec.epsilon, g.spec.margin,
                                    g.spec.mode == AttackMode::targeted ? 1.0 : 0.0,
                                    static_cast<double>(g.spec.target_class)})});
  return encode_weights(kGeneratorArch, static_cast<std::uint32_t>(g.spec.latent_dim), Digest{},
                        blocks);
}

AdversarialGenerator decode_generator(std::span<const std::uint8_t> bytes) {
  WeightFile f = decode_weights(bytes);
  if (f.arch != kGeneratorArch)
    throw FormatError("weight file holds '" + f.arch + "', not a generator", 8);
  if (f.blocks.empty() || f.blocks.back().name != kGeneratorMeta ||
      f.blocks.back().value.size() != 4)
    throw FormatError("generator file lacks its spec block", 8);
  const Tensor meta = f.blocks.back().value;
  f.blocks.pop_back();
  GeneratorSpec spec;
  spec.latent_dim = f.k;
  spec.epsilon = meta[0];
  spec.margin = meta[1];
  spec.mode = meta[2] != 0.0 ? AttackMode::targeted : AttackMode::untargeted;
  spec.target_class = static_cast<std::size_t>(meta[3]);
  AdversarialGenerator expected = init_generator(spec, 0);
  if (expected.params.size() != f.blocks.size())
    throw FormatError("generator block count mismatch", 8);
  AdversarialGenerator g;
  g.spec = spec;
  for (std::size_t i = 0; i < f.blocks.size(); ++i) {
    const auto& want = expected.params.items()[i];
    if (want.name != f.blocks[i].name || want.value.shape() != f.blocks[i].value.shape())
      throw FormatError("generator block '" + f.blocks[i].name + "' has unexpected layout", 8);
    g.params.add(f.blocks[i].name, std::move(f.blocks[i].value));
  }
  return g;
}

void save_classifier(const Classifier& model, const std::filesystem::path& path) {
  write_file(path, encode_classifier(model));
}

Classifier load_classifier(const std::filesystem::path& path, std::optional<ArchId> expected_arch,
                           std::optional<Digest> expected_source) {
  Classifier c = decode_classifier(read_file(path));
  if (expected_arch && c.arch != *expected_arch)
    throw std::invalid_argument(path.string() + ": architecture " + std::string(to_string(c.arch)) +
                                " does not match expected " +
                                std::string(to_string(*expected_arch)));
  if (expected_source && c.source_digest != *expected_source)
    throw std::invalid_argument(path.string() + ": provenance digest " + to_hex(c.source_digest) +
                                " does not match expected " + to_hex(*expected_source));
  return c;
}

void save_generator(const AdversarialGenerator& g, const std::filesystem::path& path) {
  write_file(path, encode_generator(g));
}

AdversarialGenerator load_generator(const std::filesystem::path& path) {
  return decode_generator(read_file(path));
}

Digest model_digest(const Classifier& model) { return sha256(encode_classifier(model)); }
Digest model_digest(const AdversarialGenerator& g) { return sha256(encode_generator(g)); }

}  // namespace tes::models
