#pragma once

#include <vector>

#include "feainf/tensor.hpp"

namespace feainf {

struct GroundTruth {
    enum class Kind { Mask, Box };
    Kind kind = Kind::Mask;
    Tensor mask;                        // {H,W} binary, Kind::Mask
    int row0 = 0, col0 = 0, row1 = 0, col1 = 0; // inclusive bounds, Kind::Box

    static GroundTruth from_mask(Tensor mask);
    static GroundTruth from_box(int row0, int col0, int row1, int col1);
};

/// Keeps the pixels at or above the descending-percentile cutoff (ties kept).
Tensor binarize(const Tensor& map, double percentile);

struct ConfusionMetrics {
    double dice = 0.0;
    double ppv = 0.0;
    double sensitivity = 0.0;
};

/// dice = 2TP/(FP+2TP+FN), ppv = TP/(TP+FP), sensitivity = TP/(TP+FN);
/// empty denominators give 0 so per-image averages stay total.
ConfusionMetrics confusion_metrics(const Tensor& pred, const Tensor& gt_mask);

/// Fraction of the map's mass inside the ground-truth region; 0 for an
/// all-zero map.
double proportion(const Tensor& map, const GroundTruth& gt);

double accuracy(const std::vector<int>& predictions, const std::vector<int>& truths);

} // namespace feainf
