#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "feainf/encoder.hpp"
#include "feainf/graph.hpp"
#include "feainf/lfm.hpp"
#include "feainf/tensor.hpp"

namespace feainf {

// Pole guard inside the similarity score; keeps log((d+1)/(d+eps)) finite.
inline constexpr double kSimilarityEps = 1e-12;

struct PrototypeSource {
    bool projected = false;
    std::string image_id;
    int region = -1;
};

/// Disease prototypes are shared across regions; normal prototypes belong to
/// one region each. Row t*kneg+j of `neg` is prototype j of region t.
struct PrototypeSet {
    Tensor pos; // {Kpos, C1}
    Tensor neg; // {T*Kneg, C1}
    int kpos = 0;
    int kneg = 0;
    std::vector<PrototypeSource> pos_sources;
    std::vector<PrototypeSource> neg_sources;
};

struct ClassifierWeights {
    Tensor pos; // {T, Kpos}
    Tensor neg; // {T, Kneg}
};

struct ModelState {
    EncoderConfig encoder_config;
    EncoderParams encoder;
    MaskBank masks;
    PrototypeSet prototypes;
    ClassifierWeights weights;
    uint64_t seed = 0;

    int regions() const { return masks.count(); }

    /// Fresh model: Kaiming encoder, frozen mask bank, prototypes uniform in
    /// [0,1]^C1, classifier weights all +1. Deterministic under seed.
    static ModelState init(const EncoderConfig& config, int kpos, int kneg, double alpha, uint64_t seed);

    std::map<std::string, Tensor*> trainable();
    std::map<std::string, const Tensor*> param_refs() const;
};

/// ln((|z-p|^2 + 1) / (|z-p|^2 + eps)): positive, decreasing in the distance.
double similarity_score(const Tensor& z, const Tensor& p, double eps = kSimilarityEps);

/// P_t = sum_j |w_pos| g_pos - sum_j |w_neg| g_neg per region.
std::vector<double> region_logits(const std::vector<Tensor>& features, const PrototypeSet& protos,
                                  const ClassifierWeights& weights, double eps = kSimilarityEps);

enum class HeadKind { MaxRegion, MeanPool };

struct PredictionOutcome {
    std::vector<double> logits; // P_t per region
    int best_region = 0;        // argmax, ties broken by lowest index
    Tensor g_pos, g_neg;        // score tables {T,Kpos}, {T,Kneg}
    double p_disease = 0.0;
    double p_normal = 0.0;
    int label = 0; // 1 = disease
};

/// Completes the reasoning head from extracted region vectors: score tables,
/// region logits, peak selection, two-way normalization.
PredictionOutcome head_outcome(const std::vector<Tensor>& features, const PrototypeSet& protos,
                               const ClassifierWeights& weights, HeadKind head,
                               double eps = kSimilarityEps);

// ---------------------------------------------------------------------------
// Graph assembly

enum class Bind {
    Baked,     // constants frozen into the graph
    Frozen,    // inputs bound per forward, no gradients
    Trainable, // inputs with gradients
};

ParamBinder make_binder(Graph& g, Bind bind);

struct HeadNodes {
    int features = -1;
    std::vector<int> z;
    std::vector<std::vector<int>> d2_pos, d2_neg; // squared distances [T][K]
    std::vector<std::vector<int>> g_pos, g_neg;   // similarity scores [T][K]
    std::vector<int> logit;                       // T scalars
    int logits = -1;                              // {T}
    int peak_max = -1, p_max = -1;
    int peak_mean = -1, p_mean = -1;
    int last = -1; // forward up to here evaluates everything above
};

/// Appends encoder, extraction and both classification heads to a graph.
/// Parameter names: enc.*, protos.pos, protos.neg, cls.pos, cls.neg.
HeadNodes build_head(Graph& g, const ModelState& model, Bind bind, int image_node,
                     double eps = kSimilarityEps);

/// Reusable inference engine; parameters are bound by reference, so updates
/// to the model are picked up on the next run. Copy one per thread.
class Predictor {
public:
    explicit Predictor(const ModelState& model);
    PredictionOutcome run(const Tensor& image, HeadKind head = HeadKind::MaxRegion);
    /// Region vectors z_t(image) (forward only).
    std::vector<Tensor> features(const Tensor& image);

private:
    const ModelState* model_;
    Graph graph_;
    int image_node_ = -1;
    HeadNodes nodes_;
};

PredictionOutcome predict(const Tensor& image, const ModelState& model);
PredictionOutcome mean_pooled_baseline_predict(const Tensor& image, const ModelState& model);

/// Region vectors of one image under the current parameters.
std::vector<Tensor> model_features(const Tensor& image, const ModelState& model);

} // namespace feainf
