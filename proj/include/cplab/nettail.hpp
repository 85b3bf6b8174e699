#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "cplab/dataset.hpp"
#include "cplab/io.hpp"

namespace cplab {

enum class Activation { identity, relu, softmax };

inline const char* activation_name(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::relu: return "relu";
    default: return "softmax";
  }
}

inline Activation parse_activation(const std::string& s) {
  if (s == "identity") return Activation::identity;
  if (s == "relu") return Activation::relu;
  if (s == "softmax") return Activation::softmax;
  throw std::invalid_argument("unknown activation: " + s);
}

struct TailLayer {
  std::size_t rows = 0;          // output dimension
  std::size_t cols = 0;          // input dimension
  std::vector<double> weights;   // row-major, rows x cols
  std::vector<double> bias;      // rows
  Activation activation = Activation::identity;
};

// The trailing, differentiable part of a classifier: an ordered chain of
// affine layers with identity/relu activations and an optional final softmax.
struct NetworkTail {
  std::vector<TailLayer> layers;

  std::size_t input_dim() const { return layers.empty() ? 0 : layers.front().cols; }
  std::size_t output_dim() const { return layers.empty() ? 0 : layers.back().rows; }
};

inline void validate_tail(const NetworkTail& tail) {
  if (tail.layers.empty()) throw std::invalid_argument("tail: no layers");
  for (std::size_t l = 0; l < tail.layers.size(); ++l) {
    const auto& layer = tail.layers[l];
    if (layer.rows == 0 || layer.cols == 0) {
      throw std::invalid_argument("tail: layer " + std::to_string(l) + " has zero dimension");
    }
    if (layer.weights.size() != layer.rows * layer.cols) {
      throw std::invalid_argument("tail: layer " + std::to_string(l) +
                                  " weight count does not match rows x cols");
    }
    if (layer.bias.size() != layer.rows) {
      throw std::invalid_argument("tail: layer " + std::to_string(l) +
                                  " bias size does not match rows");
    }
    for (const double w : layer.weights) {
      if (!std::isfinite(w)) throw std::invalid_argument("tail: non-finite weight");
    }
    for (const double b : layer.bias) {
      if (!std::isfinite(b)) throw std::invalid_argument("tail: non-finite bias");
    }
    if (l + 1 < tail.layers.size()) {
      if (layer.activation == Activation::softmax) {
        throw std::invalid_argument("tail: softmax may only be the final activation");
      }
      if (tail.layers[l + 1].cols != layer.rows) {
        throw std::invalid_argument("tail: layer " + std::to_string(l + 1) +
                                    " input dim " + std::to_string(tail.layers[l + 1].cols) +
                                    " does not chain with previous output " +
                                    std::to_string(layer.rows));
      }
    }
  }
}

// Identity-weight layer followed by softmax; maps logit-like features onto the
// simplex. This is the canonical tail paired with synthetic feature data.
inline NetworkTail softmax_tail(std::size_t n) {
  TailLayer layer;
  layer.rows = layer.cols = n;
  layer.weights.assign(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) layer.weights[i * n + i] = 1.0;
  layer.bias.assign(n, 0.0);
  layer.activation = Activation::softmax;
  NetworkTail tail;
  tail.layers.push_back(std::move(layer));
  return tail;
}

namespace detail {

inline std::vector<double> affine(const TailLayer& layer, std::span<const double> x) {
  std::vector<double> z(layer.rows);
  for (std::size_t r = 0; r < layer.rows; ++r) {
    double acc = layer.bias[r];
    const double* w = layer.weights.data() + r * layer.cols;
    for (std::size_t c = 0; c < layer.cols; ++c) acc += w[c] * x[c];
    z[r] = acc;
  }
  return z;
}

inline std::vector<double> activate(Activation act, const std::vector<double>& z) {
  switch (act) {
    case Activation::identity:
      return z;
    case Activation::relu: {
      std::vector<double> out(z.size());
      for (std::size_t i = 0; i < z.size(); ++i) out[i] = z[i] > 0.0 ? z[i] : 0.0;
      return out;
    }
    default:
      return softmax(z);
  }
}

}  // namespace detail

inline std::vector<double> tail_forward(const NetworkTail& tail, std::span<const double> v) {
  if (v.size() != tail.input_dim()) {
    throw std::invalid_argument("tail_forward: input dimension " +
                                std::to_string(v.size()) + ", expected " +
                                std::to_string(tail.input_dim()));
  }
  std::vector<double> x(v.begin(), v.end());
  for (const auto& layer : tail.layers) {
    x = detail::activate(layer.activation, detail::affine(layer, x));
  }
  return x;
}

struct LossGrad {
  double loss = 0.0;
  std::vector<double> grad;  // with respect to the input feature vector
};

// Scalar objective h(v) = ||target - g(v)||_2 and its gradient, computed by
// backpropagation through the layer chain. At zero loss the norm is not
// differentiable and the gradient is reported as zero (the minimum). The relu
// subgradient at 0 is taken as 0.
inline LossGrad tail_loss_grad(const NetworkTail& tail, std::span<const double> v,
                               std::span<const double> target) {
  if (v.size() != tail.input_dim()) {
    throw std::invalid_argument("tail_loss_grad: input dimension mismatch");
  }
  if (target.size() != tail.output_dim()) {
    throw std::invalid_argument("tail_loss_grad: target dimension " +
                                std::to_string(target.size()) + ", expected " +
                                std::to_string(tail.output_dim()));
  }

  const std::size_t n_layers = tail.layers.size();
  std::vector<std::vector<double>> inputs(n_layers);       // activation fed to each layer
  std::vector<std::vector<double>> pre(n_layers);          // affine outputs
  std::vector<std::vector<double>> post(n_layers);         // activated outputs
  std::vector<double> x(v.begin(), v.end());
  for (std::size_t l = 0; l < n_layers; ++l) {
    inputs[l] = x;
    pre[l] = detail::affine(tail.layers[l], x);
    post[l] = detail::activate(tail.layers[l].activation, pre[l]);
    x = post[l];
  }
  for (const double y : x) {
    if (!std::isfinite(y)) throw std::runtime_error("tail_loss_grad: non-finite intermediate");
  }

  double loss_sq = 0.0;
  std::vector<double> delta(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - target[i];
    delta[i] = d;
    loss_sq += d * d;
  }
  const double loss = std::sqrt(loss_sq);
  if (loss == 0.0) {
    return {0.0, std::vector<double>(v.size(), 0.0)};
  }
  for (double& d : delta) d /= loss;  // d loss / d output

  for (std::size_t li = n_layers; li-- > 0;) {
    const auto& layer = tail.layers[li];
    // through the activation
    switch (layer.activation) {
      case Activation::identity:
        break;
      case Activation::relu:
        for (std::size_t i = 0; i < delta.size(); ++i) {
          if (pre[li][i] <= 0.0) delta[i] = 0.0;
        }
        break;
      case Activation::softmax: {
        const auto& s = post[li];
        double dot = 0.0;
        for (std::size_t i = 0; i < s.size(); ++i) dot += delta[i] * s[i];
        for (std::size_t i = 0; i < s.size(); ++i) delta[i] = s[i] * (delta[i] - dot);
        break;
      }
    }
    // through the affine map: grad_in = W^T delta
    std::vector<double> prev(layer.cols, 0.0);
    for (std::size_t r = 0; r < layer.rows; ++r) {
      const double* w = layer.weights.data() + r * layer.cols;
      const double d = delta[r];
      for (std::size_t c = 0; c < layer.cols; ++c) prev[c] += w[c] * d;
    }
    delta = std::move(prev);
  }
  for (const double g : delta) {
    if (!std::isfinite(g)) throw std::runtime_error("tail_loss_grad: non-finite gradient");
  }
  return {loss, std::move(delta)};
}

// JSON tail file: {"layers": [{"rows": R, "cols": C, "weights": [row-major],
// "bias": [...], "activation": "identity"|"relu"|"softmax"}]}.
inline nlohmann::json tail_to_json(const NetworkTail& tail) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& layer : tail.layers) {
    layers.push_back({{"rows", layer.rows},
                      {"cols", layer.cols},
                      {"weights", layer.weights},
                      {"bias", layer.bias},
                      {"activation", activation_name(layer.activation)}});
  }
  return {{"layers", layers}};
}

inline NetworkTail tail_from_json(const nlohmann::json& j) {
  NetworkTail tail;
  if (!j.contains("layers") || !j["layers"].is_array()) {
    throw std::invalid_argument("tail json: missing 'layers' array");
  }
  for (const auto& lj : j["layers"]) {
    TailLayer layer;
    layer.rows = lj.at("rows").get<std::size_t>();
    layer.cols = lj.at("cols").get<std::size_t>();
    layer.weights = lj.at("weights").get<std::vector<double>>();
    layer.bias = lj.at("bias").get<std::vector<double>>();
    layer.activation = parse_activation(lj.at("activation").get<std::string>());
    tail.layers.push_back(std::move(layer));
  }
  validate_tail(tail);
  return tail;
}

inline void save_tail(const NetworkTail& tail, const std::string& path) {
  write_file_atomic(path, tail_to_json(tail).dump(2) + "\n");
}

inline NetworkTail load_tail(const std::string& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw std::invalid_argument("tail json: " + path + ": " + e.what());
  }
  return tail_from_json(j);
}

}  // namespace cplab
