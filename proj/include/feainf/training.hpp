#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "feainf/model.hpp"
#include "feainf/synthdata.hpp"
#include "feainf/tensor.hpp"

namespace feainf {

struct TrainConfig {
    double kappa = 2.0;
    // The separation terms are unbounded below; with a from-scratch encoder
    // they dominate at 1e-3 and inflate feature norms until every similarity
    // score saturates near zero (accuracy stays at chance). 1e-5 keeps the
    // repulsion while the balance term still controls the encoder.
    double eta1 = 1e-3; // normal clustering
    double eta2 = 1e-5; // normal separation
    double eta3 = 1e-3; // disease clustering
    double eta4 = 1e-5; // disease separation
    double lr_encoder = 1e-4;
    double lr_shaping = 3e-3;
    // With a from-scratch encoder the prototype layer and classifier carry
    // the learning; at 1e-4 they cannot move far enough within 30 epochs and
    // the separation terms run away instead (feature norms explode until all
    // similarity scores saturate near zero). They share the shaping rate.
    double lr_prototypes = 3e-3;
    double lr_classifier = 3e-3;
    int batch_size = 20;
    int epochs = 30;
    int projection_period = 10;
    int kpos = 10;
    int kneg = 4;
    double alpha = 0.1; // mask bank blend weight
    uint64_t seed = 7;

    void validate() const;
};

struct LossBreakdown {
    double balance = 0.0;
    double pos_clst = 0.0;
    double neg_clst = 0.0;
    double neg_sep = 0.0;
    double pos_sep = 0.0;
    double total = 0.0;
};

/// Weighted balance term for one prediction; p is clamped to [1e-7, 1-1e-7]
/// before the logs since the expression is singular at 0 and 1.
double balance_loss(double p, int y, double kappa);

struct ProtoLossTerms {
    double pos_clst = 0.0;
    double neg_clst = 0.0;
    double neg_sep = 0.0;
    double pos_sep = 0.0;
};

/// The four prototype terms from per-image region vectors. Terms over an
/// absent class are 0.
ProtoLossTerms prototype_losses(const std::vector<std::vector<Tensor>>& features,
                                const std::vector<int>& labels, const PrototypeSet& protos);

/// Batch objective: mean balance term plus the four weighted prototype terms.
LossBreakdown total_loss(const std::vector<const LabeledImage*>& batch, const ModelState& model,
                         const TrainConfig& config);

/// Same, also returning d(total)/d(parameter) for every trainable tensor.
LossBreakdown total_loss_with_grads(const std::vector<const LabeledImage*>& batch, const ModelState& model,
                                    const TrainConfig& config, std::map<std::string, Tensor>& grads);

struct ProjectionReport {
    int pos_updated = 0;
    int neg_updated = 0;
    bool pos_skipped = false; // no disease images available
    bool neg_skipped = false; // no normal images available
};

/// Replaces each prototype with its nearest training region vector (disease
/// prototypes search every region of disease images; normal prototypes search
/// their own region of normal images) and records the source.
ProjectionReport project_prototypes(ModelState& model, const std::vector<LabeledImage>& train);

struct EpochLog {
    int epoch = 0;
    LossBreakdown loss; // batch-size weighted mean over the epoch
    double train_accuracy = 0.0;
    double test_accuracy = 0.0;
};

struct TrainResult {
    ModelState model;
    std::vector<EpochLog> log;
};

/// Full optimization loop: shuffled minibatches, Adam with per-group learning
/// rates, prototype projection every projection_period epochs. Deterministic
/// under config.seed. Throws NumericalError when the loss stops being finite.
TrainResult run_training(const std::vector<LabeledImage>& train, const std::vector<LabeledImage>& test,
                         const EncoderConfig& encoder_config, const TrainConfig& config);

/// Fraction of images whose predicted label matches; parallel over images.
double evaluate_accuracy(const ModelState& model, const std::vector<LabeledImage>& images);

} // namespace feainf
