#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "feainf/encoder.hpp"
#include "feainf/rng.hpp"
#include "helpers.hpp"

using namespace feainf;

TEST_CASE("default geometry lands on the 7x7x128 feature grid") {
    EncoderConfig cfg;
    cfg.validate();
    CHECK(cfg.feature_height() == 7);
    CHECK(cfg.feature_width() == 7);
    CHECK(cfg.regions() == 49);
}

TEST_CASE("initialization is deterministic per seed") {
    EncoderConfig cfg = helpers::tiny_config();
    EncoderParams a = init_encoder(cfg, 42);
    EncoderParams b = init_encoder(cfg, 42);
    EncoderParams c = init_encoder(cfg, 43);
    for (const auto& [name, tensor] : a.tensors) {
        CHECK(b.tensors.at(name).data == tensor.data);
    }
    bool any_diff = false;
    for (const auto& [name, tensor] : a.tensors)
        if (c.tensors.at(name).data != tensor.data) any_diff = true;
    CHECK(any_diff);
}

TEST_CASE("kernel spread tracks the fan-in rule over 10 seeds") {
    EncoderConfig cfg;
    for (uint64_t seed = 0; seed < 10; ++seed) {
        EncoderParams p = init_encoder(cfg, seed);
        const Tensor& k = p.tensors.at("conv1.kernel"); // 3x3x16 -> 32
        const double expected = std::sqrt(2.0 / (3 * 3 * 16));
        double mean = 0.0;
        for (double v : k.data) mean += v;
        mean /= k.numel();
        double var = 0.0;
        for (double v : k.data) var += (v - mean) * (v - mean);
        const double sd = std::sqrt(var / k.numel());
        CHECK(sd > 0.7 * expected);
        CHECK(sd < 1.3 * expected);
    }
}

TEST_CASE("zero image with zero biases encodes to zero") {
    EncoderConfig cfg = helpers::tiny_config();
    EncoderParams p = init_encoder(cfg, 1);
    for (auto& [name, tensor] : p.tensors)
        if (name.find("bias") != std::string::npos) tensor.fill(0.0);
    Tensor image({cfg.height, cfg.width, cfg.channels});
    Tensor out = encode(image, cfg, p);
    CHECK(out.shape == Shape{cfg.feature_height(), cfg.feature_width(), cfg.feature_channels});
    for (double v : out.data) CHECK(v == 0.0);
}

TEST_CASE("outputs are non-negative and correctly shaped for any input") {
    EncoderConfig cfg = helpers::tiny_config();
    EncoderParams p = init_encoder(cfg, 9);
    Rng rng(17);
    for (int trial = 0; trial < 5; ++trial) {
        Tensor image = helpers::random_image(cfg.height, cfg.width, rng);
        Tensor out = encode(image, cfg, p);
        CHECK(out.shape == Shape{cfg.feature_height(), cfg.feature_width(), cfg.feature_channels});
        for (double v : out.data) CHECK(v >= 0.0);
    }
}

TEST_CASE("fixed seed and fixed 56x56 input reproduce the pinned checksum") {
    EncoderConfig cfg;
    cfg.height = 56;
    cfg.width = 56;
    EncoderParams p = init_encoder(cfg, 2024);
    Rng rng(56);
    Tensor image = helpers::random_image(56, 56, rng);
    Tensor out = encode(image, cfg, p);
    double sum = 0.0;
    for (double v : out.data) sum += v;
    // Regression value recorded from the first run.
    CHECK(sum == doctest::Approx(1136.5700245131684).epsilon(1e-12));
}

TEST_CASE("impossible stride plans are rejected") {
    EncoderConfig cfg = helpers::tiny_config();
    cfg.convs.push_back({9, 1, 0, 4}); // kernel larger than the remaining 3x3 plane
    CHECK_THROWS_AS(cfg.validate(), ShapeError);

    EncoderConfig bad = helpers::tiny_config();
    bad.convs[0].stride = 0;
    CHECK_THROWS_AS(bad.validate(), ShapeError);

    EncoderParams p = init_encoder(helpers::tiny_config(), 1);
    Tensor wrong({4, 4, 1});
    CHECK_THROWS_AS(encode(wrong, helpers::tiny_config(), p), ShapeError);
}

TEST_CASE("a scalar loss through the encoder passes the gradient check") {
    EncoderConfig cfg = helpers::tiny_config(8);
    cfg.convs = {{3, 2, 1, 4}, {2, 1, 0, 4}};
    cfg.feature_channels = 6;
    EncoderParams params = init_encoder(cfg, 3);

    Graph g;
    int image = g.input("image", {cfg.height, cfg.width, cfg.channels}, true);
    std::map<std::string, int> bound;
    ParamBinder bind = [&](const std::string& name, const Tensor& value) {
        int id = g.input(name, value.shape, true);
        bound[name] = id;
        return id;
    };
    int fmap = build_encoder(g, cfg, params, "enc.", bind, image);
    int loss = g.sq_dist(g.spatial_mean(fmap), g.constant(Tensor({cfg.feature_channels}, 0.3)));

    Rng rng(5);
    Tensor img = helpers::random_image(cfg.height, cfg.width, rng);
    TensorRefMap refs{{"image", &img}};
    for (const auto& [name, tensor] : params.tensors) refs["enc." + name] = &tensor;

    CHECK(g.finite_diff_check(loss, refs, "image", 1e-6) < 1e-3);
    CHECK(g.finite_diff_check(loss, refs, "enc.conv0.kernel", 1e-6) < 1e-3);
    CHECK(g.finite_diff_check(loss, refs, "enc.shaping1.kernel", 1e-6) < 1e-3);
}
