#pragma once

#include <functional>
#include <string>
#include <vector>

#include "feainf/model.hpp"
#include "feainf/tensor.hpp"

namespace feainf {

/// Trainable low-resolution perturbation grid, kept inside [0,1].
struct MaskVector {
    int u = 0, v = 0;
    Tensor delta; // {u,v}
};

/// The network quantity whose stability under input masking is optimized:
/// either the peak-region vector of an image, or the matched region of the
/// image a prototype was projected from.
struct DetectionNode {
    enum class Kind { Feature, Prototype };
    Kind kind = Kind::Feature;
    Tensor image;     // reference image the masks perturb
    int region = -1;  // detection region t
    int proto_index = -1;
    Tensor reference; // cached z_region(image)
};

DetectionNode select_node(const ModelState& model, const Tensor& image);
DetectionNode select_prototype_node(const ModelState& model, int proto_index, const Tensor& source_image);

/// Bilinear map of a mask grid to {H,W}; values stay inside the grid's range.
Tensor upsample_mask(const Tensor& delta, int out_h, int out_w);

struct ConsistencyTerms {
    double sim = 0.0; // squared node drift under the masked image
    double mas = 0.0; // L1 of the mask normalized by its cell count
    double con = 0.0; // sim + lambda * mas
};

ConsistencyTerms consistency_loss(const Tensor& delta, const DetectionNode& node, const ModelState& model,
                                  double lambda);

/// d(con)/d(delta) at the given mask.
Tensor consistency_gradient(const Tensor& delta, const DetectionNode& node, const ModelState& model,
                            double lambda);

struct SaliencyOptions {
    int sizes = 9;       // number of mask grids
    int first_size = 6;  // grid i is (first_size+i) x (first_size+i)
    int iterations = 400;
    double lr = 2e-3;
    double xi = 0.5;     // initial mask value
    double percentile = 20.0;
    double gamma = 1.0;  // merge weight of the refinement step
    double theta = 1.0;  // stop threshold of the refinement loop
    int max_refinements = 50;
    std::vector<double> lambda_candidates; // empty -> default 45-value grid

    std::vector<double> candidates_or_default() const;
    void validate(int image_h, int image_w) const;
};

/// The 45-value grid {i*j : i in {1e-2,1e-1,1,1e1,1e2}, j in 1..9}, ascending.
std::vector<double> default_lambda_candidates();

struct MaskTrainResult {
    std::vector<MaskVector> masks;
    std::vector<double> sim, mas, con; // per size, at the retained iterate
};

/// Trains each mask grid independently: Adam on the consistency objective,
/// projection to [0,1] after every step, best-seen iterate retained.
MaskTrainResult optimize_masks(const DetectionNode& node, const ModelState& model,
                               const std::vector<double>& lambdas, const SaliencyOptions& options);

struct SaliencyMap {
    Tensor values; // {H,W} in [0,1]
    double omega = 0.0;
    double lambda_nu = 0.0;
    double tau = 0.0;
};

/// Sums the upsampled masks, clips at the descending-percentile threshold and
/// min-max normalizes. A flat sum yields the all-zero map.
SaliencyMap stack_saliency(const std::vector<MaskVector>& masks, int out_h, int out_w, double percentile);

struct ExtremeRates {
    double rh = 0.0, rv = 0.0, rt = 0.0;
};

/// Counts direction reversals separated by monotone runs along rows (rh) and
/// columns (rv); rt normalizes by H(W-2) + W(H-2). Needs H,W >= 3.
ExtremeRates discrete_extreme_rate(const Tensor& map);

/// tau = rt * total activation; small for smooth, sparse maps.
double quality_tau(const Tensor& map);

/// Coordinate search over the candidate weights: start from the best
/// candidate, then repeatedly blend toward the runner-up. Q must be total;
/// callers memoize it. Returns the best weight evaluated.
double adaptive_weight_search(const std::vector<double>& candidates, const std::function<double(double)>& Q,
                              double gamma, double theta, int max_refinements = 50);

struct CandidateRecord {
    double lambda_nu = 0.0;
    double tau = 0.0;   // raw quality of the stacked map
    bool zero_map = false;
    SaliencyMap map;
    std::vector<double> sim, mas; // per size at the retained iterate
};

struct Explanation {
    SaliencyMap map;
    DetectionNode node;
    std::vector<double> lambda0; // per size
    double lambda_nu = 0.0;
    std::vector<CandidateRecord> evaluations; // every lambda_nu tried, ascending
};

/// Per-size balance point sim/mas of the untrained masks; the weight search
/// scales these by its candidate factor.
std::vector<double> initial_lambda0(const ModelState& model, const DetectionNode& node,
                                    const SaliencyOptions& options);

/// One full candidate evaluation: trains every mask size at lambda0*lambda_nu,
/// stacks the result and scores it.
CandidateRecord evaluate_candidate(const ModelState& model, const DetectionNode& node,
                                   const std::vector<double>& lambda0, double lambda_nu,
                                   const SaliencyOptions& options);

/// Resolves a training image by id (needed for prototype detection nodes).
using ImageResolver = std::function<Tensor(const std::string& image_id)>;

/// Full explanation pass: select the node, derive per-size lambda0 from the
/// initial masks, search lambda_nu by map quality, return the winning map.
/// All-zero candidate maps are rejected while any non-degenerate one exists.
Explanation explain(const ModelState& model, const Tensor& image, DetectionNode::Kind kind,
                    const SaliencyOptions& options, const ImageResolver& resolve = nullptr);

/// Comparator: the per-region similarity scores of the node's best disease
/// prototype, placed on the feature grid, upsampled and min-max normalized.
SaliencyMap upsampled_similarity_baseline(const ModelState& model, const Tensor& image,
                                          const DetectionNode& node);

} // namespace feainf
