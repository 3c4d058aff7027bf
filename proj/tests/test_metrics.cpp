#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "feainf/metrics.hpp"
#include "feainf/rng.hpp"

using namespace feainf;

namespace {

Tensor random_map(int h, int w, Rng& rng) {
    Tensor m({h, w});
    for (double& v : m.data) v = rng.uniform01();
    return m;
}

Tensor random_binary(int h, int w, Rng& rng, double fill = 0.4) {
    Tensor m({h, w});
    for (double& v : m.data) v = rng.uniform01() < fill ? 1.0 : 0.0;
    return m;
}

} // namespace

TEST_CASE("binarize keeps all pixels of a constant map") {
    Tensor flat({4, 5}, 0.3);
    Tensor out = binarize(flat, 20.0);
    for (double v : out.data) CHECK(v == 1.0);
}

TEST_CASE("binarize keeps exactly 20 of 100 distinct values") {
    Tensor m({10, 10});
    for (int i = 0; i < 100; ++i) m[i] = (i * 37 % 100) + 1; // 1..100 shuffled
    Tensor out = binarize(m, 20.0);
    int ones = 0;
    for (double v : out.data) ones += v == 1.0;
    CHECK(ones == 20);
    for (int i = 0; i < 100; ++i) CHECK(out[i] == (m[i] >= 81 ? 1.0 : 0.0));
}

TEST_CASE("binarize count stays within the tie-adjusted band") {
    Rng rng(5);
    for (int trial = 0; trial < 30; ++trial) {
        const int h = 3 + rng.uniform_int(10), w = 3 + rng.uniform_int(10);
        Tensor m = random_map(h, w, rng);
        Tensor out = binarize(m, 20.0);
        int ones = 0;
        for (double v : out.data) ones += v == 1.0;
        CHECK(ones >= std::max(1, static_cast<int>(std::floor(0.2 * h * w))));
        CHECK(ones <= 0.2 * h * w + 1.0); // distinct values: at most one past the exact fraction
    }
}

TEST_CASE("confusion metrics on identical, disjoint and hand-counted masks") {
    Rng rng(7);
    Tensor a = random_binary(6, 6, rng);
    a[0] = 1.0; // nonempty
    ConfusionMetrics same = confusion_metrics(a, a);
    CHECK(same.dice == 1.0);
    CHECK(same.ppv == 1.0);
    CHECK(same.sensitivity == 1.0);

    Tensor left({2, 2}), right({2, 2});
    left[0] = 1.0;
    right[3] = 1.0;
    ConfusionMetrics none = confusion_metrics(left, right);
    CHECK(none.dice == 0.0);
    CHECK(none.ppv == 0.0);
    CHECK(none.sensitivity == 0.0);

    // TP=2, FP=1, FN=1
    Tensor pred({2, 3}), gt({2, 3});
    pred[0] = pred[1] = pred[2] = 1.0;
    gt[0] = gt[1] = gt[3] = 1.0;
    ConfusionMetrics m = confusion_metrics(pred, gt);
    CHECK(m.dice == doctest::Approx(4.0 / 6.0).epsilon(1e-12));
    CHECK(m.ppv == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
    CHECK(m.sensitivity == doctest::Approx(2.0 / 3.0).epsilon(1e-12));

    CHECK_THROWS_AS(confusion_metrics(Tensor({2, 2}), Tensor({3, 2})), ShapeError);
}

TEST_CASE("empty masks give zero, not NaN") {
    Tensor empty({3, 3});
    ConfusionMetrics m = confusion_metrics(empty, empty);
    CHECK(m.dice == 0.0);
    CHECK(m.ppv == 0.0);
    CHECK(m.sensitivity == 0.0);
}

TEST_CASE("dice is the harmonic mean of ppv and sensitivity") {
    Rng rng(11);
    for (int trial = 0; trial < 100; ++trial) {
        const int h = 3 + rng.uniform_int(8), w = 3 + rng.uniform_int(8);
        ConfusionMetrics m = confusion_metrics(random_binary(h, w, rng), random_binary(h, w, rng));
        if (m.ppv + m.sensitivity > 0.0)
            CHECK(m.dice ==
                  doctest::Approx(2.0 * m.ppv * m.sensitivity / (m.ppv + m.sensitivity)).epsilon(1e-12));
        CHECK(m.dice >= 0.0);
        CHECK(m.dice <= 1.0);
        CHECK(m.ppv <= 1.0);
        CHECK(m.sensitivity <= 1.0);
    }
}

TEST_CASE("proportion of a uniform map equals the box area fraction") {
    Tensor m({8, 8}, 0.4);
    GroundTruth box = GroundTruth::from_box(0, 0, 3, 3); // 16 of 64 pixels
    CHECK(proportion(m, box) == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("proportion is 1 when the mass sits inside the region and 0 on empty maps") {
    Tensor m({6, 6});
    m.at2(2, 2) = 0.7;
    m.at2(3, 3) = 0.1;
    GroundTruth box = GroundTruth::from_box(2, 2, 3, 3);
    CHECK(proportion(m, box) == 1.0);
    CHECK(proportion(Tensor({6, 6}), box) == 0.0);
}

TEST_CASE("proportion matches explicit double-loop summation") {
    Rng rng(13);
    for (int trial = 0; trial < 30; ++trial) {
        const int h = 5 + rng.uniform_int(8), w = 5 + rng.uniform_int(8);
        Tensor m = random_map(h, w, rng);
        const int r0 = rng.uniform_int(h - 1), c0 = rng.uniform_int(w - 1);
        const int r1 = r0 + rng.uniform_int(h - r0), c1 = c0 + rng.uniform_int(w - c0);
        double inside = 0, total = 0;
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j) {
                total += m.at2(i, j);
                if (i >= r0 && i <= r1 && j >= c0 && j <= c1) inside += m.at2(i, j);
            }
        CHECK(proportion(m, GroundTruth::from_box(r0, c0, r1, c1)) ==
              doctest::Approx(inside / total).epsilon(1e-12));
    }
}

TEST_CASE("proportion is invariant to positive scaling") {
    Rng rng(17);
    Tensor m = random_map(7, 9, rng);
    Tensor gt = random_binary(7, 9, rng);
    const double base = proportion(m, GroundTruth::from_mask(gt));
    Tensor scaled = m;
    for (double& v : scaled.data) v *= 12.5;
    CHECK(proportion(scaled, GroundTruth::from_mask(gt)) == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("accuracy counts matches") {
    CHECK(accuracy({1, 0, 1}, {1, 0, 1}) == 1.0);
    CHECK(accuracy({1, 0, 1}, {0, 1, 0}) == 0.0);
    CHECK(accuracy({1, 0, 1, 0}, {1, 0, 1, 1}) == 0.75);
    CHECK_THROWS_AS(accuracy({}, {}), DataError);
    CHECK_THROWS_AS(accuracy({1}, {1, 0}), ShapeError);
}
