#include "feainf/training.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>

#include "feainf/optim.hpp"
#include "feainf/parallel.hpp"
#include "feainf/rng.hpp"

namespace feainf {

void TrainConfig::validate() const {
    if (kappa < 0.0) throw DataError("kappa must be >= 0");
    if (lr_encoder <= 0.0 || lr_shaping <= 0.0 || lr_prototypes <= 0.0 || lr_classifier <= 0.0)
        throw DataError("learning rates must be positive");
    if (batch_size < 1) throw DataError("batch size must be >= 1");
    if (epochs < 0) throw DataError("epoch count must be >= 0");
    if (projection_period < 1) throw DataError("projection period must be >= 1");
    if (kpos < 1 || kneg < 1) throw DataError("prototype counts must be >= 1");
    if (alpha < 0.0) throw DataError("mask alpha must be >= 0");
}

double balance_loss(double p, int y, double kappa) {
    if (kappa < 0.0) throw DomainError("kappa must be >= 0");
    p = std::clamp(p, 1e-7, 1.0 - 1e-7);
    if (y == 1) return -std::pow(1.0 - p, kappa) * std::log(p);
    return -std::pow(p, kappa) * std::log(1.0 - p);
}

namespace {

double sq_distance(const Tensor& z, const double* row) {
    double acc = 0.0;
    for (int i = 0; i < z.numel(); ++i) {
        const double d = z[i] - row[i];
        acc += d * d;
    }
    return acc;
}

} // namespace

ProtoLossTerms prototype_losses(const std::vector<std::vector<Tensor>>& features,
                                const std::vector<int>& labels, const PrototypeSet& protos) {
    if (features.size() != labels.size()) throw ShapeError("feature/label count mismatch");
    const int c1 = protos.pos.shape[1];
    ProtoLossTerms out;
    int n_pos = 0, n_neg = 0;

    for (size_t h = 0; h < features.size(); ++h) {
        const auto& z = features[h];
        const int T = static_cast<int>(z.size());

        // min over all regions and disease prototypes
        double minmin_pos = std::numeric_limits<double>::infinity();
        for (int t = 0; t < T; ++t)
            for (int j = 0; j < protos.kpos; ++j)
                minmin_pos = std::min(minmin_pos, sq_distance(z[static_cast<size_t>(t)],
                                                              protos.pos.data.data() + static_cast<size_t>(j) * c1));

        if (labels[h] == 1) {
            // max over regions, max over that region's normal prototypes
            double maxmax_neg = -std::numeric_limits<double>::infinity();
            for (int t = 0; t < T; ++t)
                for (int j = 0; j < protos.kneg; ++j)
                    maxmax_neg = std::max(maxmax_neg,
                                          sq_distance(z[static_cast<size_t>(t)],
                                                      protos.neg.data.data() +
                                                          static_cast<size_t>(t * protos.kneg + j) * c1));
            out.pos_clst += minmin_pos;
            out.pos_sep += maxmax_neg;
            ++n_pos;
        } else {
            // max over regions of the per-region nearest normal prototype
            double maxmin_neg = -std::numeric_limits<double>::infinity();
            for (int t = 0; t < T; ++t) {
                double best = std::numeric_limits<double>::infinity();
                for (int j = 0; j < protos.kneg; ++j)
                    best = std::min(best, sq_distance(z[static_cast<size_t>(t)],
                                                      protos.neg.data.data() +
                                                          static_cast<size_t>(t * protos.kneg + j) * c1));
                maxmin_neg = std::max(maxmin_neg, best);
            }
            out.neg_clst += maxmin_neg;
            out.neg_sep += minmin_pos;
            ++n_neg;
        }
    }

    if (n_pos > 0) {
        out.pos_clst /= n_pos;
        out.pos_sep = -out.pos_sep / n_pos;
    }
    if (n_neg > 0) {
        out.neg_clst /= n_neg;
        out.neg_sep = -out.neg_sep / n_neg;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Batch graph

namespace {

struct BatchGraph {
    Graph g;
    int balance = -1;
    int pos_clst = -1, neg_clst = -1, neg_sep = -1, pos_sep = -1;
    int total = -1;
};

// Builds the whole-batch objective in one graph. Parameters enter as
// trainable inputs shared by every image subgraph; images are constants.
BatchGraph build_batch_graph(const std::vector<const LabeledImage*>& batch, const ModelState& model,
                             const TrainConfig& config) {
    BatchGraph b;
    Graph& g = b.g;
    const int T = model.regions();
    const int kpos = model.prototypes.kpos;
    const int kneg = model.prototypes.kneg;

    std::vector<int> balance_terms;
    std::vector<int> pos_clst_terms, neg_clst_terms, neg_sep_terms, pos_sep_terms;

    // Every image subgraph shares one binding per parameter.
    ParamBinder bind_new = make_binder(g, Bind::Trainable);
    std::map<std::string, int> bound_nodes;
    ParamBinder bind = [&](const std::string& name, const Tensor& value) {
        auto it = bound_nodes.find(name);
        if (it != bound_nodes.end()) return it->second;
        int id = bind_new(name, value);
        bound_nodes[name] = id;
        return id;
    };

    for (const LabeledImage* img : batch) {
        int image_node = g.constant(img->pixels);
        int fmap = build_encoder(g, model.encoder_config, model.encoder, "enc.", bind, image_node);
        std::vector<int> z = build_extract(g, fmap, model.masks);

        const int protos_pos = bind("protos.pos", model.prototypes.pos);
        const int protos_neg = bind("protos.neg", model.prototypes.neg);
        const int w_pos = bind("cls.pos", model.weights.pos);
        const int w_neg = bind("cls.neg", model.weights.neg);

        std::vector<std::vector<int>> d2_pos(static_cast<size_t>(T)), d2_neg(static_cast<size_t>(T));
        std::vector<int> logit_nodes(static_cast<size_t>(T));
        auto score = [&](int d2) {
            return g.sub(g.log(g.offset(d2, 1.0)), g.log(g.offset(d2, kSimilarityEps)));
        };
        for (int t = 0; t < T; ++t) {
            std::vector<int> gp, gn;
            for (int j = 0; j < kpos; ++j) {
                int d2 = g.sq_dist(z[static_cast<size_t>(t)], g.row(protos_pos, j));
                d2_pos[static_cast<size_t>(t)].push_back(d2);
                gp.push_back(score(d2));
            }
            for (int j = 0; j < kneg; ++j) {
                int d2 = g.sq_dist(z[static_cast<size_t>(t)], g.row(protos_neg, t * kneg + j));
                d2_neg[static_cast<size_t>(t)].push_back(d2);
                gn.push_back(score(d2));
            }
            int pos_term = g.sum(g.mul(g.abs(g.row(w_pos, t)), g.stack(gp)));
            int neg_term = g.sum(g.mul(g.abs(g.row(w_neg, t)), g.stack(gn)));
            logit_nodes[static_cast<size_t>(t)] = g.sub(pos_term, neg_term);
        }

        int peak = g.max(g.stack(logit_nodes));
        int p = g.clamp(g.sigmoid(g.scale(peak, 2.0)), 1e-7, 1.0 - 1e-7);
        int one_minus_p = g.offset(g.scale(p, -1.0), 1.0);
        int h_term;
        if (img->label == 1)
            h_term = g.scale(g.mul(g.powc(one_minus_p, config.kappa), g.log(p)), -1.0);
        else
            h_term = g.scale(g.mul(g.powc(p, config.kappa), g.log(one_minus_p)), -1.0);
        balance_terms.push_back(h_term);

        // min over every region and disease prototype
        std::vector<int> region_pos_mins;
        for (int t = 0; t < T; ++t) region_pos_mins.push_back(g.min(g.stack(d2_pos[static_cast<size_t>(t)])));
        int minmin_pos = g.min(g.stack(region_pos_mins));

        if (img->label == 1) {
            std::vector<int> region_neg_maxs;
            for (int t = 0; t < T; ++t) region_neg_maxs.push_back(g.max(g.stack(d2_neg[static_cast<size_t>(t)])));
            int maxmax_neg = g.max(g.stack(region_neg_maxs));
            pos_clst_terms.push_back(minmin_pos);
            pos_sep_terms.push_back(maxmax_neg);
        } else {
            std::vector<int> region_neg_mins;
            for (int t = 0; t < T; ++t) region_neg_mins.push_back(g.min(g.stack(d2_neg[static_cast<size_t>(t)])));
            int maxmin_neg = g.max(g.stack(region_neg_mins));
            neg_clst_terms.push_back(maxmin_neg);
            neg_sep_terms.push_back(minmin_pos);
        }
    }

    auto mean_of = [&](const std::vector<int>& terms, double sign) {
        if (terms.empty()) return g.constant(Tensor::scalar(0.0));
        return g.scale(g.sum(g.stack(terms)), sign / static_cast<double>(terms.size()));
    };

    b.balance = mean_of(balance_terms, 1.0);
    b.pos_clst = mean_of(pos_clst_terms, 1.0);
    b.neg_clst = mean_of(neg_clst_terms, 1.0);
    b.neg_sep = mean_of(neg_sep_terms, -1.0);
    b.pos_sep = mean_of(pos_sep_terms, -1.0);

    int total = b.balance;
    total = g.add(total, g.scale(b.neg_clst, config.eta1));
    total = g.add(total, g.scale(b.neg_sep, config.eta2));
    total = g.add(total, g.scale(b.pos_clst, config.eta3));
    total = g.add(total, g.scale(b.pos_sep, config.eta4));
    b.total = total;
    return b;
}

LossBreakdown run_batch(BatchGraph& b, const ModelState& model, std::map<std::string, Tensor>* grads) {
    TensorRefMap refs;
    for (const auto& [name, tensor] : model.param_refs()) refs[name] = tensor;
    b.g.forward(b.total, refs);

    LossBreakdown out;
    out.balance = b.g.value(b.balance)[0];
    out.pos_clst = b.g.value(b.pos_clst)[0];
    out.neg_clst = b.g.value(b.neg_clst)[0];
    out.neg_sep = b.g.value(b.neg_sep)[0];
    out.pos_sep = b.g.value(b.pos_sep)[0];
    out.total = b.g.value(b.total)[0];

    if (grads) {
        std::vector<std::string> names;
        for (const auto& [name, tensor] : model.param_refs()) names.push_back(name);
        *grads = b.g.gradient(b.total, names);
    }
    return out;
}

} // namespace

LossBreakdown total_loss(const std::vector<const LabeledImage*>& batch, const ModelState& model,
                         const TrainConfig& config) {
    if (batch.empty()) throw ShapeError("empty batch");
    BatchGraph b = build_batch_graph(batch, model, config);
    return run_batch(b, model, nullptr);
}

LossBreakdown total_loss_with_grads(const std::vector<const LabeledImage*>& batch, const ModelState& model,
                                    const TrainConfig& config, std::map<std::string, Tensor>& grads) {
    if (batch.empty()) throw ShapeError("empty batch");
    BatchGraph b = build_batch_graph(batch, model, config);
    return run_batch(b, model, &grads);
}

// ---------------------------------------------------------------------------
// Prototype projection

ProjectionReport project_prototypes(ModelState& model, const std::vector<LabeledImage>& train) {
    const int T = model.regions();
    const int c1 = model.encoder_config.feature_channels;
    const int kpos = model.prototypes.kpos;
    const int kneg = model.prototypes.kneg;

    std::vector<const LabeledImage*> pos_images, neg_images;
    for (const LabeledImage& img : train) (img.label == 1 ? pos_images : neg_images).push_back(&img);

    ProjectionReport report;
    if (pos_images.empty()) {
        std::cerr << "warning: no disease images; skipping disease prototype projection\n";
        report.pos_skipped = true;
    }
    if (neg_images.empty()) {
        std::cerr << "warning: no normal images; skipping normal prototype projection\n";
        report.neg_skipped = true;
    }

    // Region vectors for every image, computed in parallel, consumed in order.
    auto all_features = [&](const std::vector<const LabeledImage*>& images) {
        std::vector<std::vector<Tensor>> feats(images.size());
        Predictor proto(model);
        std::vector<Predictor> workers(static_cast<size_t>(thread_budget()), proto);
        parallel_for(static_cast<int>(images.size()), [&](int worker, int i) {
            feats[static_cast<size_t>(i)] =
                workers[static_cast<size_t>(worker)].features(images[static_cast<size_t>(i)]->pixels);
        });
        return feats;
    };

    if (!pos_images.empty()) {
        auto feats = all_features(pos_images);
        for (int j = 0; j < kpos; ++j) {
            double* proto_row = model.prototypes.pos.data.data() + static_cast<size_t>(j) * c1;
            double best = std::numeric_limits<double>::infinity();
            int best_img = -1, best_t = -1;
            for (size_t h = 0; h < feats.size(); ++h)
                for (int t = 0; t < T; ++t) {
                    const double d = sq_distance(feats[h][static_cast<size_t>(t)], proto_row);
                    if (d < best) {
                        best = d;
                        best_img = static_cast<int>(h);
                        best_t = t;
                    }
                }
            const Tensor& src = feats[static_cast<size_t>(best_img)][static_cast<size_t>(best_t)];
            std::copy(src.data.begin(), src.data.end(), proto_row);
            model.prototypes.pos_sources[static_cast<size_t>(j)] = {
                true, pos_images[static_cast<size_t>(best_img)]->id, best_t};
            ++report.pos_updated;
        }
    }

    if (!neg_images.empty()) {
        auto feats = all_features(neg_images);
        for (int t = 0; t < T; ++t)
            for (int j = 0; j < kneg; ++j) {
                double* proto_row =
                    model.prototypes.neg.data.data() + static_cast<size_t>(t * kneg + j) * c1;
                double best = std::numeric_limits<double>::infinity();
                int best_img = -1;
                for (size_t h = 0; h < feats.size(); ++h) {
                    const double d = sq_distance(feats[h][static_cast<size_t>(t)], proto_row);
                    if (d < best) {
                        best = d;
                        best_img = static_cast<int>(h);
                    }
                }
                const Tensor& src = feats[static_cast<size_t>(best_img)][static_cast<size_t>(t)];
                std::copy(src.data.begin(), src.data.end(), proto_row);
                model.prototypes.neg_sources[static_cast<size_t>(t * kneg + j)] = {
                    true, neg_images[static_cast<size_t>(best_img)]->id, t};
                ++report.neg_updated;
            }
    }
    return report;
}

// ---------------------------------------------------------------------------
// Training loop

double evaluate_accuracy(const ModelState& model, const std::vector<LabeledImage>& images) {
    if (images.empty()) return 0.0;
    std::vector<int> correct(images.size(), 0);
    Predictor proto(model);
    std::vector<Predictor> workers(static_cast<size_t>(thread_budget()), proto);
    parallel_for(static_cast<int>(images.size()), [&](int worker, int i) {
        PredictionOutcome out = workers[static_cast<size_t>(worker)].run(images[static_cast<size_t>(i)].pixels);
        correct[static_cast<size_t>(i)] = out.label == images[static_cast<size_t>(i)].label ? 1 : 0;
    });
    int acc = 0;
    for (int c : correct) acc += c;
    return static_cast<double>(acc) / static_cast<double>(images.size());
}

TrainResult run_training(const std::vector<LabeledImage>& train, const std::vector<LabeledImage>& test,
                         const EncoderConfig& encoder_config, const TrainConfig& config) {
    config.validate();
    if (train.empty()) throw DataError("training set is empty");

    TrainResult result;
    result.model = ModelState::init(encoder_config, config.kpos, config.kneg, config.alpha, config.seed);
    ModelState& model = result.model;

    Rng shuffle_rng(config.seed ^ 0x5deece66dULL);
    std::vector<int> order(train.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

    auto params = model.trainable();
    AdamState adam;
    auto group_lr = [&](const std::string& name) {
        if (name.rfind("enc.shaping", 0) == 0) return config.lr_shaping;
        if (name.rfind("enc.", 0) == 0) return config.lr_encoder;
        if (name.rfind("protos.", 0) == 0) return config.lr_prototypes;
        return config.lr_classifier;
    };

    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        shuffle_rng.shuffle(order);

        LossBreakdown epoch_loss;
        int seen = 0;
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(config.batch_size)) {
            std::vector<const LabeledImage*> batch;
            for (size_t i = start; i < std::min(order.size(), start + static_cast<size_t>(config.batch_size)); ++i)
                batch.push_back(&train[static_cast<size_t>(order[i])]);

            std::map<std::string, Tensor> grads;
            LossBreakdown loss = total_loss_with_grads(batch, model, config, grads);
            if (!std::isfinite(loss.total))
                throw NumericalError("training diverged: non-finite loss at epoch " + std::to_string(epoch));

            for (auto& [name, grad] : grads)
                adam_step(*params.at(name), grad, group_lr(name), adam.by_name[name]);

            const int nb = static_cast<int>(batch.size());
            epoch_loss.balance += loss.balance * nb;
            epoch_loss.pos_clst += loss.pos_clst * nb;
            epoch_loss.neg_clst += loss.neg_clst * nb;
            epoch_loss.neg_sep += loss.neg_sep * nb;
            epoch_loss.pos_sep += loss.pos_sep * nb;
            epoch_loss.total += loss.total * nb;
            seen += nb;
        }
        epoch_loss.balance /= seen;
        epoch_loss.pos_clst /= seen;
        epoch_loss.neg_clst /= seen;
        epoch_loss.neg_sep /= seen;
        epoch_loss.pos_sep /= seen;
        epoch_loss.total /= seen;

        if (epoch % config.projection_period == 0) project_prototypes(model, train);

        EpochLog row;
        row.epoch = epoch;
        row.loss = epoch_loss;
        row.train_accuracy = evaluate_accuracy(model, train);
        row.test_accuracy = evaluate_accuracy(model, test);
        result.log.push_back(row);
    }
    return result;
}

} // namespace feainf
