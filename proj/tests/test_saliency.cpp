#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <map>

#include "feainf/saliency.hpp"
#include "feainf/training.hpp"
#include "feainf/synthdata.hpp"
#include "helpers.hpp"
#include "oracles.hpp"

using namespace feainf;

namespace {

SaliencyOptions tiny_options() {
    SaliencyOptions o;
    o.sizes = 2;
    o.first_size = 4;
    o.iterations = 12;
    o.lr = 2e-2;
    o.lambda_candidates = {0.1, 1.0, 10.0};
    o.max_refinements = 6;
    return o;
}

ModelState tiny_model(uint64_t seed = 3) {
    return ModelState::init(helpers::tiny_config(), 2, 2, 0.1, seed);
}

} // namespace

TEST_CASE("node selection matches the predicted peak region") {
    ModelState single = ModelState::init(helpers::single_region_config(), 2, 2, 0.1, 5);
    Rng rng(1);
    Tensor img = helpers::random_image(16, 16, rng);
    DetectionNode node = select_node(single, img);
    CHECK(node.region == 0);
    CHECK(node.reference.shape == Shape{single.encoder_config.feature_channels});

    ModelState m = tiny_model();
    for (int trial = 0; trial < 5; ++trial) {
        Tensor x = helpers::random_image(16, 16, rng);
        DetectionNode n = select_node(m, x);
        CHECK(n.region == predict(x, m).best_region);
        // cached activation recomputes bit-identically
        std::vector<Tensor> z = model_features(x, m);
        CHECK(n.reference.data == z[static_cast<size_t>(n.region)].data);
    }
}

TEST_CASE("prototype nodes land on the projected source region") {
    SynthConfig sc;
    sc.height = 16;
    sc.width = 16;
    sc.train_count = 8;
    sc.test_count = 1;
    sc.lesion_radius_min = 2;
    sc.lesion_radius_max = 3;
    sc.seed = 9;
    auto data = generate_dataset(sc).train;
    ModelState m = tiny_model(7);
    project_prototypes(m, data);

    for (int j = 0; j < m.prototypes.kpos; ++j) {
        const PrototypeSource& src = m.prototypes.pos_sources[static_cast<size_t>(j)];
        REQUIRE(src.projected);
        const LabeledImage* source = nullptr;
        for (const auto& img : data)
            if (img.id == src.image_id) source = &img;
        REQUIRE(source != nullptr);
        DetectionNode node = select_prototype_node(m, j, source->pixels);
        CHECK(node.region == src.region); // distance 0 is the global minimum
        CHECK(node.proto_index == j);
    }
}

TEST_CASE("mask upsampling: constants stay constant") {
    Tensor c({3, 5}, 0.7);
    Tensor up = upsample_mask(c, 11, 13);
    CHECK(up.shape == Shape{11, 13});
    for (double v : up.data) CHECK(v == doctest::Approx(0.7).epsilon(1e-15));

    Tensor one({1, 1}, 0.7);
    for (double v : upsample_mask(one, 4, 4).data) CHECK(v == doctest::Approx(0.7).epsilon(1e-15));
}

TEST_CASE("2x2 grid upsampled to 4x4 matches the hand computation") {
    Tensor d({2, 2});
    d.at2(0, 1) = 1.0;
    d.at2(1, 0) = 1.0;
    Tensor up = upsample_mask(d, 4, 4);
    // Half-pixel sampling: per-axis source weights over the two cells are
    // index 0 -> (1, 0), 1 -> (.75, .25), 2 -> (.25, .75), 3 -> (0, 1).
    const double wy[4][2] = {{1, 0}, {0.75, 0.25}, {0.25, 0.75}, {0, 1}};
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) {
            double expect = 0.0;
            for (int i = 0; i < 2; ++i)
                for (int j = 0; j < 2; ++j) expect += wy[y][i] * wy[x][j] * d.at2(i, j);
            CHECK(up.at2(y, x) == doctest::Approx(expect).epsilon(1e-12));
        }
    CHECK(up.at2(1, 1) == doctest::Approx(0.375).epsilon(1e-12));
    CHECK(up.at2(1, 2) == doctest::Approx(0.625).epsilon(1e-12));
}

TEST_CASE("upsampled masks stay inside the grid's range") {
    Rng rng(3);
    Tensor d({5, 6});
    for (double& v : d.data) v = rng.uniform01();
    Tensor up = upsample_mask(d, 17, 23);
    for (double v : up.data) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
}

TEST_CASE("consistency terms at the trivial masks") {
    ModelState m = tiny_model();
    Rng rng(4);
    DetectionNode node = select_node(m, helpers::random_image(16, 16, rng));

    Tensor ones({5, 5}, 1.0);
    ConsistencyTerms t = consistency_loss(ones, node, m, 3.5);
    CHECK(t.sim == 0.0); // masked image is bit-identical to the original
    CHECK(t.mas == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(t.con == doctest::Approx(3.5).epsilon(1e-12));

    Tensor half({7, 7}, 0.5);
    CHECK(consistency_loss(half, node, m, 0.0).mas == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("consistency gradient matches central differences") {
    ModelState m = tiny_model(11);
    Rng rng(6);
    DetectionNode node = select_node(m, helpers::random_image(16, 16, rng));
    for (uint64_t seed = 0; seed < 3; ++seed) {
        Rng r2(100 + seed);
        Tensor delta({4, 4});
        for (double& v : delta.data) v = r2.uniform(0.2, 0.8);
        const double lambda = r2.uniform(0.0, 2.0);
        Tensor analytic = consistency_gradient(delta, node, m, lambda);
        const double h = 1e-6;
        double worst = 0.0;
        for (int i = 0; i < delta.numel(); ++i) {
            const double saved = delta[i];
            delta[i] = saved + h;
            const double fp = consistency_loss(delta, node, m, lambda).con;
            delta[i] = saved - h;
            const double fm = consistency_loss(delta, node, m, lambda).con;
            delta[i] = saved;
            const double numeric = (fp - fm) / (2.0 * h);
            worst = std::max(worst, std::fabs(analytic[i] - numeric) / (std::fabs(analytic[i]) + 1e-8));
        }
        CHECK(worst < 1e-3);
    }
}

TEST_CASE("mask training descends and respects the box constraint") {
    ModelState m = tiny_model(13);
    Rng rng(8);
    DetectionNode node = select_node(m, helpers::random_image(16, 16, rng));
    SaliencyOptions opts = tiny_options();
    opts.iterations = 40;

    Tensor delta0({opts.first_size, opts.first_size}, opts.xi);
    const ConsistencyTerms initial0 = consistency_loss(delta0, node, m, 0.0);

    // lambda = 0: pure similarity descent
    MaskTrainResult zero = optimize_masks(node, m, {0.0, 0.0}, opts);
    CHECK(zero.sim[0] <= initial0.sim);
    for (const MaskVector& mv : zero.masks)
        for (double v : mv.delta.data) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }

    // huge lambda: mask driven to zero
    MaskTrainResult crushed = optimize_masks(node, m, {1e6, 1e6}, opts);
    CHECK(crushed.mas[0] < 0.01);
    CHECK(crushed.mas[1] < 0.01);

    // best-so-far retention: final objective never above the initial one
    for (double lambda : {0.0, 0.3, 7.0}) {
        ConsistencyTerms init = consistency_loss(delta0, node, m, lambda);
        MaskTrainResult r = optimize_masks(node, m, {lambda, lambda}, opts);
        CHECK(r.con[0] <= init.con + 1e-12);
    }
}

TEST_CASE("mask training is bit-deterministic") {
    ModelState m = tiny_model(17);
    Rng rng(9);
    DetectionNode node = select_node(m, helpers::random_image(16, 16, rng));
    SaliencyOptions opts = tiny_options();
    MaskTrainResult a = optimize_masks(node, m, {0.5, 0.5}, opts);
    MaskTrainResult b = optimize_masks(node, m, {0.5, 0.5}, opts);
    for (size_t i = 0; i < a.masks.size(); ++i) CHECK(a.masks[i].delta.data == b.masks[i].delta.data);
}

TEST_CASE("stacking a single constant mask degenerates to the zero map") {
    std::vector<MaskVector> masks{{4, 4, Tensor({4, 4}, 0.6)}};
    SaliencyMap s = stack_saliency(masks, 8, 8, 20.0);
    for (double v : s.values.data) CHECK(v == 0.0);
}

TEST_CASE("one pixel above the threshold becomes the lone peak") {
    // full-size mask, so the stacked sum equals the mask itself
    Tensor d({5, 5}, 0.2);
    d.at2(2, 3) = 0.9;
    SaliencyMap s = stack_saliency({{5, 5, d}}, 5, 5, 20.0);
    int nonzero = 0;
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 5; ++j)
            if (s.values.at2(i, j) != 0.0) {
                ++nonzero;
                CHECK(i == 2);
                CHECK(j == 3);
                CHECK(s.values.at2(i, j) == 1.0);
            }
    CHECK(nonzero == 1);
}

TEST_CASE("the kept fraction is the ceiling of the percentile") {
    Rng rng(21);
    for (int trial = 0; trial < 20; ++trial) {
        const int h = 6 + rng.uniform_int(6), w = 6 + rng.uniform_int(6);
        Tensor d({h, w});
        for (double& v : d.data) v = rng.uniform01(); // distinct with probability 1
        SaliencyMap s = stack_saliency({{h, w, d}}, h, w, 20.0);
        int nonzero = 0;
        for (double v : s.values.data) {
            nonzero += v != 0.0;
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
        CHECK(nonzero == static_cast<int>(std::ceil(20.0 * h * w / 100.0)));
        double peak = 0.0;
        for (double v : s.values.data) peak = std::max(peak, v);
        CHECK(peak == 1.0);
    }
}

TEST_CASE("extreme counting on flat and single-bump maps") {
    Tensor flat({4, 5}, 0.3);
    ExtremeRates r = discrete_extreme_rate(flat);
    CHECK(r.rh == 0.0);
    CHECK(r.rv == 0.0);
    CHECK(r.rt == 0.0);

    // one row [0,1,0] in an otherwise-zero 3x3 map: exactly one horizontal
    // extreme from that row (u=2, v=3, empty interior)
    Tensor bump({3, 3});
    bump.at2(1, 1) = 1.0;
    ExtremeRates rb = discrete_extreme_rate(bump);
    CHECK(rb.rh == 1.0);
    CHECK(rb.rv == 1.0);
    CHECK(rb.rt == doctest::Approx(2.0 / (3.0 * 1 + 3.0 * 1)).epsilon(1e-15));

    CHECK_THROWS_AS(discrete_extreme_rate(Tensor({2, 5})), ShapeError);
}

TEST_CASE("fast extreme counting equals the exhaustive triple enumeration") {
    Rng rng(23);
    for (int trial = 0; trial < 60; ++trial) {
        const int h = 5 + rng.uniform_int(4), w = 5 + rng.uniform_int(4);
        Tensor map({h, w});
        for (double& v : map.data) v = rng.uniform_int(5) * 0.25; // plateaus included
        ExtremeRates fast = discrete_extreme_rate(map);
        oracles::BruteRates brute = oracles::extreme_rates_brute(map);
        CHECK(fast.rh == static_cast<double>(brute.rh));
        CHECK(fast.rv == static_cast<double>(brute.rv));
    }
}

TEST_CASE("tau factors recompute exactly") {
    Tensor zero({5, 5});
    CHECK(quality_tau(zero) == 0.0);
    Tensor flat({5, 5}, 0.8);
    CHECK(quality_tau(flat) == 0.0); // no extremes on a constant map

    Rng rng(29);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor map({6, 6});
        for (double& v : map.data) v = rng.uniform01();
        ExtremeRates r = discrete_extreme_rate(map);
        double act = 0.0;
        for (double v : map.data) act += std::fabs(v);
        CHECK(quality_tau(map) == doctest::Approx(r.rt * act).epsilon(1e-12));
        CHECK(quality_tau(map) >= 0.0);
    }
}

TEST_CASE("weight search: single candidate, convex objective, flat objective") {
    int evals = 0;
    auto q = [&](double x) {
        ++evals;
        return (x - 5.0) * (x - 5.0) + 1.0;
    };
    CHECK(adaptive_weight_search({3.0}, q, 1.0, 1.0) == 3.0);

    std::vector<double> grid{1, 2, 3, 4, 5, 6, 7, 8, 9};
    const double chosen = adaptive_weight_search(grid, q, 1.0, 1.0);
    CHECK(q(chosen) <= q(5.0));

    auto flat = [](double) { return 2.0; };
    CHECK(adaptive_weight_search(grid, flat, 1.0, 1.0) == 1.0); // smallest candidate
}

TEST_CASE("weight search never returns worse than the best initial candidate") {
    Rng rng(31);
    for (int trial = 0; trial < 50; ++trial) {
        // random piecewise-smooth objective, memoized as the contract requires
        const double a = rng.uniform(-3.0, 3.0), b = rng.uniform(0.1, 4.0), c = rng.uniform(0.0, 6.0);
        std::map<double, double> memo;
        auto q = [&](double x) {
            auto it = memo.find(x);
            if (it != memo.end()) return it->second;
            const double v = std::fabs(std::sin(a + b * x)) + 0.3 * std::fabs(x - c) + 0.05;
            memo[x] = v;
            return v;
        };
        std::vector<double> grid;
        for (int i = 1; i <= 9; ++i) grid.push_back(i * rng.uniform(0.5, 1.5));
        std::sort(grid.begin(), grid.end());

        double best_initial = std::numeric_limits<double>::infinity();
        for (double g : grid) best_initial = std::min(best_initial, q(g));

        const double chosen = adaptive_weight_search(grid, q, 1.0, 1.0);
        CHECK(q(chosen) <= best_initial + 1e-15);
    }
}

TEST_CASE("explanations are deterministic and pick the best evaluated weight") {
    ModelState m = tiny_model(37);
    Rng rng(41);
    Tensor img = helpers::random_image(16, 16, rng);
    SaliencyOptions opts = tiny_options();

    Explanation a = explain(m, img, DetectionNode::Kind::Feature, opts);
    Explanation b = explain(m, img, DetectionNode::Kind::Feature, opts);
    CHECK(a.lambda_nu == b.lambda_nu);
    CHECK(a.map.tau == b.map.tau);
    CHECK(a.map.values.data == b.map.values.data);

    // the chosen weight has minimal tau among non-degenerate evaluations
    for (const CandidateRecord& rec : a.evaluations) {
        if (rec.zero_map) continue;
        CHECK(a.map.tau <= rec.tau + 1e-12);
    }
    // lambda0 entries are shared across sizes and non-negative
    for (double l0 : a.lambda0) {
        CHECK(l0 >= 0.0);
        CHECK(l0 == a.lambda0[0]);
    }
}

TEST_CASE("prototype explanations require projection metadata") {
    ModelState m = tiny_model(43);
    Rng rng(47);
    Tensor img = helpers::random_image(16, 16, rng);
    CHECK_THROWS_AS(explain(m, img, DetectionNode::Kind::Prototype, tiny_options()), DataError);
}

TEST_CASE("the similarity baseline degenerates to zero on a single-region model") {
    ModelState m = ModelState::init(helpers::single_region_config(), 2, 2, 0.1, 53);
    Rng rng(59);
    Tensor img = helpers::random_image(16, 16, rng);
    DetectionNode node = select_node(m, img);
    SaliencyMap s = upsampled_similarity_baseline(m, img, node);
    for (double v : s.values.data) CHECK(v == 0.0); // 1x1 grid: max == min
}

TEST_CASE("the similarity baseline peaks near the dominant region") {
    ModelState m = tiny_model(61);
    Rng rng(67);
    Tensor img = helpers::random_image(16, 16, rng);
    std::vector<Tensor> z = model_features(img, m);
    // make prototype 0 equal to region 4's vector: that cell dominates
    const int target = 4;
    for (int c = 0; c < m.encoder_config.feature_channels; ++c)
        m.prototypes.pos.at2(0, c) = z[target][c];

    DetectionNode node = select_node(m, img);
    SaliencyMap s = upsampled_similarity_baseline(m, img, node);
    int peak = 0;
    for (int i = 1; i < s.values.numel(); ++i)
        if (s.values.data[static_cast<size_t>(i)] > s.values.data[static_cast<size_t>(peak)]) peak = i;
    const int py = peak / 16, px = peak % 16;
    // region 4 of the 3x3 grid is the center cell; 16x16 maps it to ~(8,8)
    CHECK(std::abs(py - 8) <= 3);
    CHECK(std::abs(px - 8) <= 3);

    double sum = 0.0;
    for (double v : s.values.data) sum += v;
    // Regression checksum recorded from the first run.
    CHECK(sum == doctest::Approx(57.73861738722136).epsilon(1e-10));
}
