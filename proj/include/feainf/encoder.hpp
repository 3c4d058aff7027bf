#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "feainf/graph.hpp"
#include "feainf/tensor.hpp"

namespace feainf {

struct ConvSpec {
    int kernel = 3;
    int stride = 1;
    int pad = 0;
    int out_channels = 1;
};

/// Convolutional stack plus a shaping stage of two 1x1 convolutions, all with
/// ReLU. The stack must reduce the input plane to the feature grid exactly.
struct EncoderConfig {
    int height = 64;
    int width = 64;
    int channels = 1;
    std::vector<ConvSpec> convs = {
        {3, 2, 1, 16},
        {3, 2, 1, 32},
        {3, 2, 1, 64},
        {2, 1, 0, 64},
    };
    int feature_channels = 128; // width of the shaping stage

    int feature_height() const;
    int feature_width() const;
    int regions() const { return feature_height() * feature_width(); }
    void validate() const; // throws ShapeError on an impossible stride plan
};

/// Named parameter tensors: convN.kernel/convN.bias plus shaping0/shaping1.
struct EncoderParams {
    std::map<std::string, Tensor> tensors;
};

/// Kaiming fan-in initialization (normal, std sqrt(2/fan_in)), zero biases.
EncoderParams init_encoder(const EncoderConfig& config, uint64_t seed);

/// Binds a named parameter into a graph; returns the node id.
using ParamBinder = std::function<int(const std::string& name, const Tensor& value)>;

/// Appends the encoder to a graph and returns the feature-map node {H1,W1,C1}.
/// `prefix` namespaces the parameter names (normally "enc.").
int build_encoder(Graph& g, const EncoderConfig& config, const EncoderParams& params,
                  const std::string& prefix, const ParamBinder& bind, int image_node);

/// Convenience forward pass for a single image.
Tensor encode(const Tensor& image, const EncoderConfig& config, const EncoderParams& params);

} // namespace feainf
