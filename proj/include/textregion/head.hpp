#pragma once

#include "textregion/tensor.hpp"

#include <span>
#include <string_view>
#include <variant>
#include <vector>

namespace textregion {

enum class Activation { gelu_tanh, gelu_exact };

std::string_view to_string(Activation a);
Activation activation_from_string(std::string_view s);

// weight is d_out x d_in
struct LinearLayer {
    Matrix weight;
    std::vector<float> bias;
    bool operator==(const LinearLayer&) const = default;
};

struct LayerNormLayer {
    std::vector<float> scale;
    std::vector<float> shift;
    double epsilon = 1e-6;
    bool operator==(const LayerNormLayer&) const = default;
};

// x + W2 act(W1 x + b1) + b2
struct ResidualMlpLayer {
    Matrix w1;
    std::vector<float> b1;
    Matrix w2;
    std::vector<float> b2;
    Activation activation = Activation::gelu_tanh;
    bool operator==(const ResidualMlpLayer&) const = default;
};

using HeadLayer = std::variant<LinearLayer, LayerNormLayer, ResidualMlpLayer>;

/// Token-wise layers applied after delegate-query pooling.
struct HeadSpec {
    bool enabled = true;
    std::vector<HeadLayer> post_pool_layers;

    /// Output dimension for an input of `in_dim`; throws if consecutive layers don't compose.
    [[nodiscard]] int output_dim(int in_dim) const;

    bool operator==(const HeadSpec&) const = default;
};

std::vector<float> apply_head(const HeadSpec& head, std::span<const float> input);

} // namespace textregion
