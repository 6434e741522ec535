#pragma once

// Heterogeneous client networks: an MLP feature extractor of per-client
// widths followed by a classifier onto the shared class count.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "fccl/numerics.hpp"
#include "fccl/rng.hpp"

namespace fccl {

enum class Activation { Tanh, Relu, Identity };

inline const char* to_string(Activation a) {
  switch (a) {
    case Activation::Tanh: return "tanh";
    case Activation::Relu: return "relu";
    case Activation::Identity: return "identity";
  }
  return "?";
}

inline Activation activation_from_string(const std::string& s) {
  if (s == "tanh") return Activation::Tanh;
  if (s == "relu") return Activation::Relu;
  if (s == "identity") return Activation::Identity;
  throw ParameterError("unknown activation '" + s + "'");
}

struct DenseLayer {
  Matrix weight;  // in × out
  Matrix bias;    // 1 × out
  Activation activation = Activation::Identity;
};

class ClientModel {
 public:
  ClientModel(std::vector<DenseLayer> extractor, DenseLayer classifier)
      : extractor_(std::move(extractor)), classifier_(std::move(classifier)) {
    if (extractor_.empty()) throw ParameterError("ClientModel: extractor needs at least one layer");
    std::size_t width = extractor_.front().weight.rows();
    for (std::size_t i = 0; i < extractor_.size(); ++i) {
      const auto& l = extractor_[i];
      if (l.weight.rows() != width || l.bias.rows() != 1 || l.bias.cols() != l.weight.cols()) {
        throw ShapeError("ClientModel: extractor layer " + std::to_string(i) + " does not chain (" +
                         l.weight.shape_string() + ", bias " + l.bias.shape_string() + ")");
      }
      width = l.weight.cols();
    }
    if (classifier_.weight.rows() != width || classifier_.bias.rows() != 1 ||
        classifier_.bias.cols() != classifier_.weight.cols()) {
      throw ShapeError("ClientModel: classifier does not chain from feature dim " + std::to_string(width));
    }
    classifier_.activation = Activation::Identity;
  }

  // Copies are new objects; caches taken from the source do not apply to them.
  ClientModel(const ClientModel& o) : extractor_(o.extractor_), classifier_(o.classifier_) {}
  ClientModel& operator=(const ClientModel& o) {
    extractor_ = o.extractor_;
    classifier_ = o.classifier_;
    ++version_;
    return *this;
  }
  ClientModel(ClientModel&&) noexcept = default;
  ClientModel& operator=(ClientModel&&) noexcept = default;

  std::size_t input_dim() const { return extractor_.front().weight.rows(); }
  std::size_t feature_dim() const { return classifier_.weight.rows(); }
  std::size_t class_count() const { return classifier_.weight.cols(); }

  const std::vector<DenseLayer>& extractor() const { return extractor_; }
  const DenseLayer& classifier() const { return classifier_; }

  /// Parameters in canonical order: extractor weight/bias pairs, then classifier.
  std::vector<const Matrix*> parameters() const {
    std::vector<const Matrix*> p;
    for (const auto& l : extractor_) {
      p.push_back(&l.weight);
      p.push_back(&l.bias);
    }
    p.push_back(&classifier_.weight);
    p.push_back(&classifier_.bias);
    return p;
  }

  /// Mutable access; invalidates outstanding forward caches.
  std::vector<Matrix*> mutable_parameters() {
    ++version_;
    std::vector<Matrix*> p;
    for (auto& l : extractor_) {
      p.push_back(&l.weight);
      p.push_back(&l.bias);
    }
    p.push_back(&classifier_.weight);
    p.push_back(&classifier_.bias);
    return p;
  }

  std::vector<std::string> parameter_names() const {
    std::vector<std::string> names;
    for (std::size_t i = 0; i < extractor_.size(); ++i) {
      names.push_back("extractor." + std::to_string(i) + ".weight");
      names.push_back("extractor." + std::to_string(i) + ".bias");
    }
    names.push_back("classifier.weight");
    names.push_back("classifier.bias");
    return names;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const Matrix* m : parameters()) n += m->size();
    return n;
  }

  bool same_architecture(const ClientModel& o) const {
    if (extractor_.size() != o.extractor_.size()) return false;
    for (std::size_t i = 0; i < extractor_.size(); ++i) {
      if (!extractor_[i].weight.same_shape(o.extractor_[i].weight) ||
          extractor_[i].activation != o.extractor_[i].activation) {
        return false;
      }
    }
    return classifier_.weight.same_shape(o.classifier_.weight);
  }

  std::uint64_t version() const { return version_; }

  bool operator==(const ClientModel& o) const {
    if (!same_architecture(o)) return false;
    auto a = parameters();
    auto b = o.parameters();
    for (std::size_t i = 0; i < a.size(); ++i)
      if (!(*a[i] == *b[i])) return false;
    return true;
  }

 private:
  std::vector<DenseLayer> extractor_;
  DenseLayer classifier_;
  std::uint64_t version_ = 0;
};

/// Frozen copy of a model's parameters tagged with the epoch that produced it.
class Snapshot {
 public:
  Snapshot(const ClientModel& model, int epoch_tag)
      : model_(std::make_shared<const ClientModel>(model)), epoch_tag_(epoch_tag) {}

  const ClientModel& model() const { return *model_; }
  int epoch_tag() const { return epoch_tag_; }

 private:
  std::shared_ptr<const ClientModel> model_;
  int epoch_tag_;
};

struct ForwardCache {
  const ClientModel* model = nullptr;
  std::uint64_t model_version = 0;
  std::vector<Matrix> activations;  // input, then each extractor layer output
};

struct ForwardResult {
  Matrix h;  // final extractor output (post-activation)
  Matrix z;  // logits
  ForwardCache cache;
};

namespace detail {

inline void add_bias(Matrix& m, const Matrix& bias) {
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    for (std::size_t c = 0; c < m.cols(); ++c) row[c] += bias(0, c);
  }
}

inline void apply_activation(Matrix& m, Activation a) {
  switch (a) {
    case Activation::Tanh:
      for (double& v : m.data()) v = std::tanh(v);
      break;
    case Activation::Relu:
      for (double& v : m.data()) v = v > 0.0 ? v : 0.0;
      break;
    case Activation::Identity:
      break;
  }
}

inline Matrix column_sums(const Matrix& m) {
  Matrix s(1, m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) s(0, c) += m(r, c);
  return s;
}

}  // namespace detail

inline ForwardResult forward(const ClientModel& model, const Matrix& x) {
  if (x.cols() != model.input_dim()) {
    throw ShapeError("forward: input has " + std::to_string(x.cols()) + " columns, model expects " +
                     std::to_string(model.input_dim()));
  }
  ForwardResult out;
  out.cache.model = &model;
  out.cache.model_version = model.version();
  out.cache.activations.reserve(model.extractor().size() + 1);
  out.cache.activations.push_back(x);
  for (const auto& layer : model.extractor()) {
    Matrix a = matmul(out.cache.activations.back(), layer.weight);
    detail::add_bias(a, layer.bias);
    detail::apply_activation(a, layer.activation);
    out.cache.activations.push_back(std::move(a));
  }
  out.h = out.cache.activations.back();
  out.z = matmul(out.h, model.classifier().weight);
  detail::add_bias(out.z, model.classifier().bias);
  return out;
}

inline ForwardResult forward(const Snapshot& snapshot, const Matrix& x) { return forward(snapshot.model(), x); }

/// Parameter gradients, aligned with ClientModel::parameters().
struct ModelGrads {
  std::vector<Matrix> params;

  ModelGrads& operator+=(const ModelGrads& o) {
    if (params.size() != o.params.size()) throw ShapeError("ModelGrads +=: parameter count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) params[i] += o.params[i];
    return *this;
  }

  bool all_zero() const {
    for (const auto& m : params)
      for (double v : m.data())
        if (v != 0.0) return false;
    return true;
  }
};

inline ModelGrads zero_grads(const ClientModel& model) {
  ModelGrads g;
  for (const Matrix* p : model.parameters()) g.params.emplace_back(p->rows(), p->cols());
  return g;
}

/// Backpropagates logit gradients (and optionally feature gradients, which
/// attach at h) through the classifier and extractor.
inline ModelGrads backward(const ClientModel& model, const ForwardCache& cache, const Matrix& grad_z,
                           const Matrix* grad_h = nullptr) {
  if (cache.model != &model || cache.model_version != model.version()) {
    throw StateError("backward: forward cache does not belong to the current model parameters");
  }
  const Matrix& h = cache.activations.back();
  if (grad_z.rows() != h.rows() || grad_z.cols() != model.class_count()) {
    throw ShapeError("backward: grad_z is " + grad_z.shape_string());
  }
  if (grad_h != nullptr && !grad_h->same_shape(h)) {
    throw ShapeError("backward: grad_h is " + grad_h->shape_string() + ", features are " + h.shape_string());
  }

  const auto& layers = model.extractor();
  ModelGrads g;
  g.params.resize(2 * layers.size() + 2);
  g.params[2 * layers.size()] = matmul_tn(h, grad_z);
  g.params[2 * layers.size() + 1] = detail::column_sums(grad_z);

  Matrix upstream = matmul_nt(grad_z, model.classifier().weight);
  if (grad_h != nullptr) upstream += *grad_h;

  for (std::size_t li = layers.size(); li-- > 0;) {
    const Matrix& out = cache.activations[li + 1];
    const Matrix& in = cache.activations[li];
    switch (layers[li].activation) {
      case Activation::Tanh:
        for (std::size_t k = 0; k < upstream.size(); ++k) upstream.data()[k] *= 1.0 - out.data()[k] * out.data()[k];
        break;
      case Activation::Relu:
        for (std::size_t k = 0; k < upstream.size(); ++k)
          if (out.data()[k] <= 0.0) upstream.data()[k] = 0.0;
        break;
      case Activation::Identity:
        break;
    }
    g.params[2 * li] = matmul_tn(in, upstream);
    g.params[2 * li + 1] = detail::column_sums(upstream);
    if (li > 0) upstream = matmul_nt(upstream, layers[li].weight);
  }
  return g;
}

struct AdamState {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::vector<Matrix> first;
  std::vector<Matrix> second;
};

inline AdamState make_adam(double lr = 0.001) {
  AdamState s;
  s.lr = lr;
  return s;
}

/// One bias-corrected Adam update. Moments are allocated lazily on first use.
inline void adam_step(AdamState& state, std::span<Matrix* const> params, std::span<const Matrix> grads) {
  if (params.size() != grads.size()) throw ShapeError("adam_step: parameter/gradient count mismatch");
  if (state.first.empty()) {
    for (const Matrix* p : params) {
      state.first.emplace_back(p->rows(), p->cols());
      state.second.emplace_back(p->rows(), p->cols());
    }
  }
  if (state.first.size() != params.size()) throw ShapeError("adam_step: state tracks a different parameter count");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i]->same_shape(grads[i]) || !params[i]->same_shape(state.first[i])) {
      throw ShapeError("adam_step: parameter " + std::to_string(i) + " is " + params[i]->shape_string() +
                       ", gradient " + grads[i].shape_string());
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i]->data();
    const auto& g = grads[i].data();
    auto& m = state.first[i].data();
    auto& v = state.second[i].data();
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * g[k];
      v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * g[k] * g[k];
      const double m_hat = m[k] / c1;
      const double v_hat = v[k] / c2;
      p[k] -= state.lr * m_hat / (std::sqrt(v_hat) + state.eps);
    }
  }
}

inline void adam_step(AdamState& state, ClientModel& model, const ModelGrads& grads) {
  auto params = model.mutable_parameters();
  adam_step(state, params, grads.params);
}

/// Hidden widths of one client's extractor; the last entry is the feature dim.
struct ModelSpec {
  std::vector<std::size_t> widths;
  Activation activation = Activation::Tanh;
};

/// He-style fan-in uniform initialization: U(−√(6/fan_in), √(6/fan_in)), zero biases.
inline ClientModel init_model(const ModelSpec& spec, std::size_t input_dim, std::size_t classes, std::uint64_t seed) {
  if (spec.widths.empty()) throw ParameterError("init_model: empty layer list");
  if (input_dim == 0 || classes == 0) throw ParameterError("init_model: dimensions must be positive");
  Rng rng(seed);
  auto dense = [&](std::size_t in, std::size_t out, Activation act) {
    const double limit = std::sqrt(6.0 / static_cast<double>(in));
    DenseLayer l{Matrix(in, out), Matrix(1, out), act};
    for (double& w : l.weight.data()) w = rng.uniform(-limit, limit);
    return l;
  };
  std::vector<DenseLayer> layers;
  std::size_t width = input_dim;
  for (std::size_t w : spec.widths) {
    if (w == 0) throw ParameterError("init_model: layer width must be at least 1");
    layers.push_back(dense(width, w, spec.activation));
    width = w;
  }
  return ClientModel(std::move(layers), dense(width, classes, Activation::Identity));
}

/// One model per spec; client i draws from its own init sub-stream.
inline std::vector<ClientModel> build_scenario_models(const std::vector<ModelSpec>& specs, std::size_t input_dim,
                                                      std::size_t classes, std::uint64_t seed) {
  if (specs.empty()) throw ParameterError("build_scenario_models: no client specs");
  std::vector<ClientModel> models;
  models.reserve(specs.size());
  for (std::size_t i = 0; i < specs.size(); ++i) {
    models.push_back(init_model(specs[i], input_dim, classes, derive_seed(seed, "init", i)));
  }
  return models;
}

// Model container format, text, version 1:
//
//   FCCL-MODEL 1
//   layers <L>
//   activation extractor.<i> <tanh|relu|identity>     (L lines)
//   matrix <name> <rows> <cols>                        (2L + 2 blocks)
//   <cols values per line, %.17g>
//   end
inline constexpr const char* kModelMagic = "FCCL-MODEL";
inline constexpr int kModelFormatVersion = 1;

inline void write_matrix_block(std::ostream& os, const std::string& name, const Matrix& m) {
  os << "matrix " << name << ' ' << m.rows() << ' ' << m.cols() << '\n';
  char buf[32];
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t c = 0; c < m.cols(); ++c) {
      std::snprintf(buf, sizeof buf, "%.17g", m(r, c));
      os << (c ? " " : "") << buf;
    }
    os << '\n';
  }
}

inline Matrix read_matrix_block(std::istream& is, const std::string& expected_name) {
  std::string tag, name;
  std::size_t rows = 0, cols = 0;
  if (!(is >> tag >> name >> rows >> cols) || tag != "matrix" || name != expected_name) {
    throw ParameterError("model file: expected matrix '" + expected_name + "'");
  }
  Matrix m(rows, cols);
  for (double& v : m.data()) {
    std::string tok;
    if (!(is >> tok)) throw ParameterError("model file: truncated matrix '" + expected_name + "'");
    v = std::strtod(tok.c_str(), nullptr);
  }
  return m;
}

inline void save_model(const ClientModel& model, std::ostream& os) {
  os << kModelMagic << ' ' << kModelFormatVersion << '\n';
  os << "layers " << model.extractor().size() << '\n';
  for (std::size_t i = 0; i < model.extractor().size(); ++i) {
    os << "activation extractor." << i << ' ' << to_string(model.extractor()[i].activation) << '\n';
  }
  const auto names = model.parameter_names();
  const auto params = model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) write_matrix_block(os, names[i], *params[i]);
  os << "end\n";
}

inline ClientModel load_model(std::istream& is) {
  std::string magic;
  int version = 0;
  if (!(is >> magic >> version) || magic != kModelMagic) throw ParameterError("model file: bad magic");
  if (version != kModelFormatVersion) throw ParameterError("model file: unsupported version " + std::to_string(version));
  std::string tag;
  std::size_t layers = 0;
  if (!(is >> tag >> layers) || tag != "layers" || layers == 0) throw ParameterError("model file: bad layer count");
  std::vector<Activation> acts;
  for (std::size_t i = 0; i < layers; ++i) {
    std::string name, act;
    if (!(is >> tag >> name >> act) || tag != "activation") throw ParameterError("model file: bad activation line");
    acts.push_back(activation_from_string(act));
  }
  std::vector<DenseLayer> ext;
  for (std::size_t i = 0; i < layers; ++i) {
    const std::string base = "extractor." + std::to_string(i);
    Matrix w = read_matrix_block(is, base + ".weight");
    Matrix b = read_matrix_block(is, base + ".bias");
    ext.push_back({std::move(w), std::move(b), acts[i]});
  }
  Matrix cw = read_matrix_block(is, "classifier.weight");
  Matrix cb = read_matrix_block(is, "classifier.bias");
  if (!(is >> tag) || tag != "end") throw ParameterError("model file: missing end marker");
  return ClientModel(std::move(ext), {std::move(cw), std::move(cb), Activation::Identity});
}

inline void save_model(const ClientModel& model, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  save_model(model, os);
  if (!os) throw std::runtime_error("write failed: " + path);
}

inline ClientModel load_model(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path);
  return load_model(is);
}

}  // namespace fccl
