#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "ddcf/autodiff.hpp"
#include "ddcf/random.hpp"
#include "ddcf/sparse.hpp"
#include "ddcf/tensor.hpp"

namespace ddcf {

enum class Activation { identity, tanh };

struct DenseLayer {
    Parameter weight; // [in x out]
    Parameter bias;   // [out]
    Activation activation = Activation::identity;

    std::size_t in_dim() const { return weight.value.rows(); }
    std::size_t out_dim() const { return weight.value.cols(); }
};

/// Stack of affine layers; every layer but the last applies its activation.
struct MlpParams {
    std::vector<DenseLayer> layers;

    /// dims = {in, hidden..., out}. Hidden layers use tanh, the last is linear.
    static MlpParams create(const std::string& prefix, const std::vector<std::size_t>& dims, std::uint64_t seed) {
        if (dims.size() < 2) {
            throw ParameterError("mlp '" + prefix + "' needs at least an input and an output dimension");
        }
        MlpParams mlp;
        for (std::size_t l = 0; l + 1 < dims.size(); l++) {
            std::string name = prefix + "." + std::to_string(l);
            std::size_t in = dims[l], out = dims[l + 1];
            Tensor w(Shape{in, out});
            CounterRng rng{seed, fnv1a(name)};
            double limit = std::sqrt(6.0 / static_cast<double>(in + out));
            for (auto& v : w.values()) {
                v = (2.0 * rng.uniform() - 1.0) * limit;
            }
            bool last = l + 2 == dims.size();
            mlp.layers.push_back(DenseLayer{Parameter(name + ".weight", std::move(w)),
                                            Parameter(name + ".bias", Tensor(Shape{out})),
                                            last ? Activation::identity : Activation::tanh});
        }
        return mlp;
    }

    std::size_t input_dim() const { return layers.front().in_dim(); }
    std::size_t output_dim() const { return layers.back().out_dim(); }

    void validate() const {
        if (layers.empty()) {
            throw ShapeError("mlp has no layers");
        }
        for (std::size_t l = 0; l < layers.size(); l++) {
            const auto& layer = layers[l];
            if (layer.bias.value.size() != layer.out_dim()) {
                throw ShapeError("layer " + layer.weight.name + ": bias " + shape_string(layer.bias.value.shape())
                                 + " does not match weight " + shape_string(layer.weight.value.shape()));
            }
            if (l + 1 < layers.size() && layers[l + 1].in_dim() != layer.out_dim()) {
                throw ShapeError("layer " + layers[l + 1].weight.name + " expects input "
                                 + std::to_string(layers[l + 1].in_dim()) + " but previous layer emits "
                                 + std::to_string(layer.out_dim()));
            }
        }
    }

    std::vector<Parameter*> parameters() {
        std::vector<Parameter*> out;
        for (auto& layer : layers) {
            out.push_back(&layer.weight);
            out.push_back(&layer.bias);
        }
        return out;
    }
};

namespace detail {

inline void apply_activation(std::span<double> v, Activation a) {
    if (a == Activation::tanh) {
        for (double& x : v) {
            x = std::tanh(x);
        }
    }
}

inline Var apply_activation(Var v, Activation a) {
    return a == Activation::tanh ? op::tanh(v) : v;
}

inline Var mlp_tail(Tape& tape, MlpParams& mlp, Var h, std::size_t from) {
    for (std::size_t l = from; l < mlp.layers.size(); l++) {
        auto& layer = mlp.layers[l];
        h = op::add_row(op::matmul(h, tape.parameter(layer.weight)), tape.parameter(layer.bias));
        h = apply_activation(h, layer.activation);
    }
    return h;
}

} // namespace detail

/// Dense forward pass; `input` is a vector or a [batch x in] matrix.
inline Tensor mlp_forward(const MlpParams& mlp, const Tensor& input) {
    mlp.validate();
    if (input.cols() != mlp.input_dim()) {
        throw ShapeError("mlp_forward: input " + shape_string(input.shape()) + " vs first layer "
                         + shape_string(mlp.layers.front().weight.value.shape()));
    }
    Tensor h = input;
    std::size_t batch = input.rows();
    for (const auto& layer : mlp.layers) {
        const Tensor& w = layer.weight.value;
        Tensor out(Shape{batch, layer.out_dim()});
        for (std::size_t b = 0; b < batch; b++) {
            auto o = out.row(b);
            std::copy(layer.bias.value.values().begin(), layer.bias.value.values().end(), o.begin());
            auto in = h.row(b);
            for (std::size_t i = 0; i < in.size(); i++) {
                if (in[i] == 0.0) {
                    continue;
                }
                auto wr = w.row(i);
                for (std::size_t j = 0; j < o.size(); j++) {
                    o[j] += in[i] * wr[j];
                }
            }
            detail::apply_activation(o, layer.activation);
        }
        h = std::move(out);
    }
    if (input.rank() == 1) {
        return Tensor(Shape{h.cols()}, std::move(h.values()));
    }
    return h;
}

/// Plain forward where the input is sparse: the first layer is a weighted
/// lookup of weight rows. Returns a vector for one row.
inline Tensor mlp_forward_sparse(const MlpParams& mlp, const SparseRow& row) {
    const auto& first = mlp.layers.front();
    const Tensor& w = first.weight.value;
    Tensor h(Shape{1, first.out_dim()});
    auto o = h.row(0);
    std::copy(first.bias.value.values().begin(), first.bias.value.values().end(), o.begin());
    for (std::size_t e = 0; e < row.nnz(); e++) {
        if (row.indices[e] >= w.rows()) {
            throw ShapeError("mlp_forward_sparse: index " + std::to_string(row.indices[e]) + " out of range for "
                             + shape_string(w.shape()));
        }
        auto wr = w.row(row.indices[e]);
        for (std::size_t j = 0; j < o.size(); j++) {
            o[j] += row.values[e] * wr[j];
        }
    }
    detail::apply_activation(o, first.activation);
    if (mlp.layers.size() == 1) {
        return Tensor(Shape{h.cols()}, std::move(h.values()));
    }
    Tensor x = h;
    for (std::size_t l = 1; l < mlp.layers.size(); l++) {
        const auto& layer = mlp.layers[l];
        Tensor out(Shape{1, layer.out_dim()});
        auto orow = out.row(0);
        std::copy(layer.bias.value.values().begin(), layer.bias.value.values().end(), orow.begin());
        auto in = x.row(0);
        for (std::size_t i = 0; i < in.size(); i++) {
            auto wr = layer.weight.value.row(i);
            for (std::size_t j = 0; j < orow.size(); j++) {
                orow[j] += in[i] * wr[j];
            }
        }
        detail::apply_activation(orow, layer.activation);
        x = std::move(out);
    }
    return Tensor(Shape{x.cols()}, std::move(x.values()));
}

/// Taped forward pass on a dense input.
inline Var mlp_forward(Tape& tape, MlpParams& mlp, Var input) {
    if (input.value().cols() != mlp.input_dim()) {
        throw ShapeError("mlp_forward: input " + shape_string(input.value().shape()) + " vs first layer "
                         + shape_string(mlp.layers.front().weight.value.shape()));
    }
    return detail::mlp_tail(tape, mlp, input, 0);
}

/// Taped forward pass where the first layer is a weighted lookup of the rows
/// of its weight matrix: x W = sum_j x_j W_j over the nonzeros of x.
inline Var mlp_forward_sparse(Tape& tape, MlpParams& mlp, std::shared_ptr<const std::vector<SparseRow>> rows) {
    auto& first = mlp.layers.front();
    Var h = op::add_row(op::sparse_matmul(std::move(rows), tape.parameter(first.weight)), tape.parameter(first.bias));
    h = detail::apply_activation(h, first.activation);
    return detail::mlp_tail(tape, mlp, h, 1);
}

/// Softmax of logits / tau, row-wise for matrices.
inline Tensor softmax_temp(const Tensor& logits, double tau) {
    if (!(tau > 0.0)) {
        throw ParameterError("softmax temperature must be positive, got " + std::to_string(tau));
    }
    Tensor out(logits.shape());
    for (std::size_t r = 0; r < logits.rows(); r++) {
        auto in = logits.row(r);
        auto o = out.row(r);
        double mx = *std::max_element(in.begin(), in.end());
        double z = 0.0;
        for (std::size_t j = 0; j < in.size(); j++) {
            o[j] = std::exp((in[j] - mx) / tau);
            z += o[j];
        }
        for (double& v : o) {
            v /= z;
        }
    }
    return out;
}

/// Unit-norm rescaling; the zero vector maps to itself.
inline Tensor l2_normalize(const Tensor& v) {
    Tensor out = v;
    double n = norm(v.values());
    if (n > 0.0) {
        for (double& x : out.values()) {
            x /= n;
        }
    }
    return out;
}

inline void l2_normalize(SparseRow& row) {
    double n = std::sqrt(row.sum_squares());
    if (n > 0.0) {
        for (double& x : row.values) {
            x /= n;
        }
    }
}

/// mu + noise * sigma, with sigma a standard deviation.
inline Tensor gaussian_reparameterize(const Tensor& mu, const Tensor& sigma, const Tensor& noise) {
    require_same_shape(mu, sigma, "gaussian_reparameterize");
    require_same_shape(mu, noise, "gaussian_reparameterize");
    Tensor out = mu;
    for (std::size_t i = 0; i < out.size(); i++) {
        out[i] += noise[i] * sigma[i];
    }
    return out;
}

} // namespace ddcf
