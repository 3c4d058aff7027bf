#include "feainf/encoder.hpp"

#include <cmath>

#include "feainf/rng.hpp"

namespace feainf {

namespace {

int reduced(int extent, const ConvSpec& c) {
    return (extent + 2 * c.pad - c.kernel) / c.stride + 1;
}

} // namespace

int EncoderConfig::feature_height() const {
    int h = height;
    for (const ConvSpec& c : convs) h = reduced(h, c);
    return h;
}

int EncoderConfig::feature_width() const {
    int w = width;
    for (const ConvSpec& c : convs) w = reduced(w, c);
    return w;
}

void EncoderConfig::validate() const {
    if (height < 1 || width < 1 || channels < 1)
        throw ShapeError("encoder input extents must be positive");
    if (feature_channels < 1) throw ShapeError("feature channel count must be positive");
    if (convs.empty()) throw ShapeError("encoder needs at least one convolution");
    int h = height, w = width;
    for (size_t i = 0; i < convs.size(); ++i) {
        const ConvSpec& c = convs[i];
        if (c.kernel < 1 || c.stride < 1 || c.pad < 0 || c.out_channels < 1)
            throw ShapeError("conv layer " + std::to_string(i) + " has invalid geometry");
        if (c.kernel > h + 2 * c.pad || c.kernel > w + 2 * c.pad)
            throw ShapeError("conv layer " + std::to_string(i) + " kernel exceeds the padded plane (" +
                             std::to_string(h) + "x" + std::to_string(w) + ")");
        h = reduced(h, c);
        w = reduced(w, c);
        if (h < 1 || w < 1)
            throw ShapeError("conv layer " + std::to_string(i) + " collapses the plane to zero extent");
    }
}

EncoderParams init_encoder(const EncoderConfig& config, uint64_t seed) {
    config.validate();
    Rng rng(seed);
    EncoderParams params;
    int cin = config.channels;
    for (size_t i = 0; i < config.convs.size(); ++i) {
        const ConvSpec& c = config.convs[i];
        Tensor kernel({c.kernel, c.kernel, cin, c.out_channels});
        const double std_dev = std::sqrt(2.0 / (c.kernel * c.kernel * cin));
        for (double& v : kernel.data) v = rng.normal() * std_dev;
        params.tensors["conv" + std::to_string(i) + ".kernel"] = std::move(kernel);
        params.tensors["conv" + std::to_string(i) + ".bias"] = Tensor({c.out_channels});
        cin = c.out_channels;
    }
    const int widths[2] = {config.feature_channels, config.feature_channels};
    for (int i = 0; i < 2; ++i) {
        Tensor kernel({1, 1, cin, widths[i]});
        const double std_dev = std::sqrt(2.0 / cin);
        for (double& v : kernel.data) v = rng.normal() * std_dev;
        params.tensors["shaping" + std::to_string(i) + ".kernel"] = std::move(kernel);
        params.tensors["shaping" + std::to_string(i) + ".bias"] = Tensor({widths[i]});
        cin = widths[i];
    }
    return params;
}

int build_encoder(Graph& g, const EncoderConfig& config, const EncoderParams& params,
                  const std::string& prefix, const ParamBinder& bind, int image_node) {
    auto layer = [&](int x, const std::string& name, int stride, int pad) {
        const Tensor& kernel = params.tensors.at(name + ".kernel");
        const Tensor& bias = params.tensors.at(name + ".bias");
        int k = bind(prefix + name + ".kernel", kernel);
        int b = bind(prefix + name + ".bias", bias);
        return g.relu(g.conv2d(x, k, b, stride, pad));
    };
    int x = image_node;
    for (size_t i = 0; i < config.convs.size(); ++i)
        x = layer(x, "conv" + std::to_string(i), config.convs[i].stride, config.convs[i].pad);
    for (int i = 0; i < 2; ++i) x = layer(x, "shaping" + std::to_string(i), 1, 0);
    return x;
}

Tensor encode(const Tensor& image, const EncoderConfig& config, const EncoderParams& params) {
    if (image.shape != Shape{config.height, config.width, config.channels})
        throw ShapeError("image shape " + shape_str(image.shape) + " does not match encoder input " +
                         shape_str({config.height, config.width, config.channels}));
    Graph g;
    int img = g.constant(image);
    auto baked = [&](const std::string&, const Tensor& value) { return g.constant(value); };
    int out = build_encoder(g, config, params, "enc.", baked, img);
    return g.forward(out);
}

} // namespace feainf
