#include "feainf/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

namespace feainf {

GroundTruth GroundTruth::from_mask(Tensor mask) {
    if (mask.rank() != 2) throw ShapeError("ground-truth mask must be rank 2");
    for (double v : mask.data)
        if (v != 0.0 && v != 1.0) throw DomainError("ground-truth mask must be binary");
    GroundTruth gt;
    gt.kind = Kind::Mask;
    gt.mask = std::move(mask);
    return gt;
}

GroundTruth GroundTruth::from_box(int row0, int col0, int row1, int col1) {
    if (row0 > row1 || col0 > col1 || row0 < 0 || col0 < 0) throw DomainError("empty or negative box");
    GroundTruth gt;
    gt.kind = Kind::Box;
    gt.row0 = row0;
    gt.col0 = col0;
    gt.row1 = row1;
    gt.col1 = col1;
    return gt;
}

Tensor binarize(const Tensor& map, double percentile) {
    if (map.rank() != 2) throw ShapeError("saliency map must be rank 2");
    if (percentile <= 0.0 || percentile >= 100.0) throw DomainError("percentile must be in (0,100)");
    const int hw = map.numel();
    const int keep = std::min(hw, std::max(1, static_cast<int>(std::floor(percentile * hw / 100.0))));
    std::vector<double> sorted(map.data.begin(), map.data.end());
    std::sort(sorted.begin(), sorted.end(), std::greater<double>());
    const double cutoff = sorted[static_cast<size_t>(keep - 1)];
    Tensor out(map.shape);
    for (int i = 0; i < hw; ++i) out[i] = map[i] >= cutoff ? 1.0 : 0.0;
    return out;
}

ConfusionMetrics confusion_metrics(const Tensor& pred, const Tensor& gt_mask) {
    if (pred.shape != gt_mask.shape)
        throw ShapeError("prediction " + shape_str(pred.shape) + " and ground truth " +
                         shape_str(gt_mask.shape) + " differ");
    double tp = 0, fp = 0, fn = 0;
    for (int i = 0; i < pred.numel(); ++i) {
        const bool p = pred[i] != 0.0;
        const bool g = gt_mask[i] != 0.0;
        tp += p && g;
        fp += p && !g;
        fn += !p && g;
    }
    ConfusionMetrics m;
    m.dice = (fp + 2 * tp + fn) > 0 ? 2 * tp / (fp + 2 * tp + fn) : 0.0;
    m.ppv = (tp + fp) > 0 ? tp / (tp + fp) : 0.0;
    m.sensitivity = (tp + fn) > 0 ? tp / (tp + fn) : 0.0;
    return m;
}

double proportion(const Tensor& map, const GroundTruth& gt) {
    if (map.rank() != 2) throw ShapeError("saliency map must be rank 2");
    double inside = 0.0, total = 0.0;
    if (gt.kind == GroundTruth::Kind::Mask) {
        if (gt.mask.shape != map.shape) throw ShapeError("ground-truth mask shape mismatch");
        for (int i = 0; i < map.numel(); ++i) {
            total += map[i];
            if (gt.mask[i] != 0.0) inside += map[i];
        }
    } else {
        if (gt.row1 >= map.shape[0] || gt.col1 >= map.shape[1]) throw ShapeError("box exceeds map bounds");
        for (int i = 0; i < map.shape[0]; ++i)
            for (int j = 0; j < map.shape[1]; ++j) {
                total += map.at2(i, j);
                if (i >= gt.row0 && i <= gt.row1 && j >= gt.col0 && j <= gt.col1) inside += map.at2(i, j);
            }
    }
    return total > 0.0 ? inside / total : 0.0;
}

double accuracy(const std::vector<int>& predictions, const std::vector<int>& truths) {
    if (predictions.empty()) throw DataError("accuracy of an empty set");
    if (predictions.size() != truths.size()) throw ShapeError("prediction/label count mismatch");
    int correct = 0;
    for (size_t i = 0; i < predictions.size(); ++i) correct += predictions[i] == truths[i];
    return static_cast<double>(correct) / static_cast<double>(predictions.size());
}

} // namespace feainf
