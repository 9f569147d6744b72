#include "textregion/head.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace textregion {

std::string_view to_string(Activation a) {
    switch (a) {
    case Activation::gelu_tanh:
        return "gelu_tanh";
    case Activation::gelu_exact:
        return "gelu_exact";
    }
    return "?";
}

Activation activation_from_string(std::string_view s) {
    if (s == "gelu_tanh") {
        return Activation::gelu_tanh;
    }
    if (s == "gelu_exact") {
        return Activation::gelu_exact;
    }
    throw std::invalid_argument("unknown activation '" + std::string(s) + "'");
}

namespace {

void require(bool ok, const std::string& what) {
    if (!ok) {
        throw std::invalid_argument("head spec: " + what);
    }
}

int linear_out(const Matrix& w, const std::vector<float>& b, int in_dim, const char* name) {
    require(static_cast<int>(w.cols()) == in_dim,
            std::string(name) + " expects input " + std::to_string(w.cols()) + ", got " +
                std::to_string(in_dim));
    require(b.size() == w.rows(), std::string(name) + " bias length does not match rows");
    return static_cast<int>(w.rows());
}

std::vector<double> affine(const Matrix& w, const std::vector<float>& b, std::span<const double> x) {
    std::vector<double> out(w.rows());
    for (std::size_t r = 0; r < w.rows(); ++r) {
        double acc = b[r];
        const auto row = w.row(r);
        for (std::size_t c = 0; c < row.size(); ++c) {
            acc += static_cast<double>(row[c]) * x[c];
        }
        out[r] = acc;
    }
    return out;
}

double gelu(double x, Activation a) {
    if (a == Activation::gelu_exact) {
        return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2));
    }
    const double k = std::sqrt(2.0 / std::numbers::pi);
    return 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x)));
}

} // namespace

int HeadSpec::output_dim(int in_dim) const {
    int dim = in_dim;
    for (const auto& layer : post_pool_layers) {
        if (const auto* lin = std::get_if<LinearLayer>(&layer)) {
            dim = linear_out(lin->weight, lin->bias, dim, "linear");
        } else if (const auto* ln = std::get_if<LayerNormLayer>(&layer)) {
            require(static_cast<int>(ln->scale.size()) == dim && static_cast<int>(ln->shift.size()) == dim,
                    "layer_norm width does not match input " + std::to_string(dim));
            require(ln->epsilon >= 0.0, "layer_norm epsilon must be non-negative");
        } else {
            const auto& mlp = std::get<ResidualMlpLayer>(layer);
            const int hidden = linear_out(mlp.w1, mlp.b1, dim, "residual_mlp.w1");
            const int out = linear_out(mlp.w2, mlp.b2, hidden, "residual_mlp.w2");
            require(out == dim, "residual_mlp output must equal its input width");
        }
    }
    return dim;
}

std::vector<float> apply_head(const HeadSpec& head, std::span<const float> input) {
    (void)head.output_dim(static_cast<int>(input.size()));
    std::vector<double> x(input.begin(), input.end());
    for (const auto& layer : head.post_pool_layers) {
        if (const auto* lin = std::get_if<LinearLayer>(&layer)) {
            x = affine(lin->weight, lin->bias, x);
        } else if (const auto* ln = std::get_if<LayerNormLayer>(&layer)) {
            double mean = 0.0;
            for (double v : x) {
                mean += v;
            }
            mean /= static_cast<double>(x.size());
            double var = 0.0;
            for (double v : x) {
                var += (v - mean) * (v - mean);
            }
            var /= static_cast<double>(x.size());
            const double inv = 1.0 / std::sqrt(var + ln->epsilon);
            for (std::size_t k = 0; k < x.size(); ++k) {
                x[k] = (x[k] - mean) * inv * ln->scale[k] + ln->shift[k];
            }
        } else {
            const auto& mlp = std::get<ResidualMlpLayer>(layer);
            auto hidden = affine(mlp.w1, mlp.b1, x);
            for (double& h : hidden) {
                h = gelu(h, mlp.activation);
            }
            const auto delta = affine(mlp.w2, mlp.b2, hidden);
            for (std::size_t k = 0; k < x.size(); ++k) {
                x[k] += delta[k];
            }
        }
    }
    return {x.begin(), x.end()};
}

} // namespace textregion
