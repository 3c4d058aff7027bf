#include "feainf/model.hpp"

#include <cmath>

#include "feainf/rng.hpp"

namespace feainf {

ModelState ModelState::init(const EncoderConfig& config, int kpos, int kneg, double alpha, uint64_t seed) {
    config.validate();
    if (kpos < 1 || kneg < 1) throw ShapeError("prototype counts must be >= 1");
    Rng master(seed);
    const uint64_t enc_seed = master.next_u64();
    const uint64_t mask_seed = master.next_u64();
    const uint64_t proto_seed = master.next_u64();

    ModelState m;
    m.seed = seed;
    m.encoder_config = config;
    m.encoder = init_encoder(config, enc_seed);
    m.masks = MaskBank::build(config.feature_height(), config.feature_width(), config.feature_channels,
                              alpha, mask_seed);
    const int T = m.masks.count();
    const int C1 = config.feature_channels;

    Rng protos(proto_seed);
    m.prototypes.kpos = kpos;
    m.prototypes.kneg = kneg;
    m.prototypes.pos = Tensor({kpos, C1});
    for (double& v : m.prototypes.pos.data) v = protos.uniform01();
    m.prototypes.neg = Tensor({T * kneg, C1});
    for (double& v : m.prototypes.neg.data) v = protos.uniform01();
    m.prototypes.pos_sources.resize(static_cast<size_t>(kpos));
    m.prototypes.neg_sources.resize(static_cast<size_t>(T * kneg));

    m.weights.pos = Tensor({T, kpos}, 1.0);
    m.weights.neg = Tensor({T, kneg}, 1.0);
    return m;
}

std::map<std::string, Tensor*> ModelState::trainable() {
    std::map<std::string, Tensor*> out;
    for (auto& [name, tensor] : encoder.tensors) out["enc." + name] = &tensor;
    out["protos.pos"] = &prototypes.pos;
    out["protos.neg"] = &prototypes.neg;
    out["cls.pos"] = &weights.pos;
    out["cls.neg"] = &weights.neg;
    return out;
}

std::map<std::string, const Tensor*> ModelState::param_refs() const {
    std::map<std::string, const Tensor*> out;
    for (const auto& [name, tensor] : encoder.tensors) out["enc." + name] = &tensor;
    out["protos.pos"] = &prototypes.pos;
    out["protos.neg"] = &prototypes.neg;
    out["cls.pos"] = &weights.pos;
    out["cls.neg"] = &weights.neg;
    return out;
}

double similarity_score(const Tensor& z, const Tensor& p, double eps) {
    if (!z.same_shape(p))
        throw ShapeError("similarity operands differ: " + shape_str(z.shape) + " vs " + shape_str(p.shape));
    if (eps <= 0.0) throw DomainError("similarity eps must be positive");
    double d2 = 0.0;
    for (int i = 0; i < z.numel(); ++i) {
        const double d = z[i] - p[i];
        d2 += d * d;
    }
    return std::log((d2 + 1.0) / (d2 + eps));
}

namespace {

double row_similarity(const Tensor& z, const double* row, double eps) {
    double d2 = 0.0;
    for (int i = 0; i < z.numel(); ++i) {
        const double d = z[i] - row[i];
        d2 += d * d;
    }
    return std::log((d2 + 1.0) / (d2 + eps));
}

double stable_sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

} // namespace

std::vector<double> region_logits(const std::vector<Tensor>& features, const PrototypeSet& protos,
                                  const ClassifierWeights& weights, double eps) {
    const int T = static_cast<int>(features.size());
    const int c1 = protos.pos.shape[1];
    std::vector<double> logits(static_cast<size_t>(T));
    for (int t = 0; t < T; ++t) {
        const Tensor& z = features[static_cast<size_t>(t)];
        if (z.numel() != c1) throw ShapeError("feature length does not match prototype width");
        double pos_term = 0.0;
        for (int j = 0; j < protos.kpos; ++j)
            pos_term += std::fabs(weights.pos.at2(t, j)) *
                        row_similarity(z, protos.pos.data.data() + static_cast<size_t>(j) * c1, eps);
        double neg_term = 0.0;
        for (int j = 0; j < protos.kneg; ++j)
            neg_term += std::fabs(weights.neg.at2(t, j)) *
                        row_similarity(z, protos.neg.data.data() + static_cast<size_t>(t * protos.kneg + j) * c1, eps);
        logits[static_cast<size_t>(t)] = pos_term - neg_term;
    }
    return logits;
}

PredictionOutcome head_outcome(const std::vector<Tensor>& features, const PrototypeSet& protos,
                               const ClassifierWeights& weights, HeadKind head, double eps) {
    const int T = static_cast<int>(features.size());
    PredictionOutcome out;
    out.g_pos = Tensor({T, protos.kpos});
    out.g_neg = Tensor({T, protos.kneg});
    const int c1 = protos.pos.shape[1];
    for (int t = 0; t < T; ++t) {
        const Tensor& z = features[static_cast<size_t>(t)];
        for (int j = 0; j < protos.kpos; ++j)
            out.g_pos.at2(t, j) = row_similarity(z, protos.pos.data.data() + static_cast<size_t>(j) * c1, eps);
        for (int j = 0; j < protos.kneg; ++j)
            out.g_neg.at2(t, j) =
                row_similarity(z, protos.neg.data.data() + static_cast<size_t>(t * protos.kneg + j) * c1, eps);
    }
    out.logits.resize(static_cast<size_t>(T));
    for (int t = 0; t < T; ++t) {
        double pos_term = 0.0, neg_term = 0.0;
        for (int j = 0; j < protos.kpos; ++j) pos_term += std::fabs(weights.pos.at2(t, j)) * out.g_pos.at2(t, j);
        for (int j = 0; j < protos.kneg; ++j) neg_term += std::fabs(weights.neg.at2(t, j)) * out.g_neg.at2(t, j);
        out.logits[static_cast<size_t>(t)] = pos_term - neg_term;
    }
    out.best_region = 0;
    for (int t = 1; t < T; ++t)
        if (out.logits[static_cast<size_t>(t)] > out.logits[static_cast<size_t>(out.best_region)]) out.best_region = t;
    double peak = out.logits[static_cast<size_t>(out.best_region)];
    if (head == HeadKind::MeanPool) {
        double acc = 0.0;
        for (double v : out.logits) acc += v;
        peak = acc / T;
    }
    out.p_disease = stable_sigmoid(2.0 * peak);
    out.p_normal = 1.0 - out.p_disease;
    out.label = peak > 0.0 ? 1 : 0;
    return out;
}

ParamBinder make_binder(Graph& g, Bind bind) {
    switch (bind) {
        case Bind::Baked:
            return [&g](const std::string&, const Tensor& value) { return g.constant(value); };
        case Bind::Frozen:
            return [&g](const std::string& name, const Tensor& value) { return g.input(name, value.shape, false); };
        case Bind::Trainable:
            return [&g](const std::string& name, const Tensor& value) { return g.input(name, value.shape, true); };
    }
    throw ShapeError("unknown bind mode");
}

HeadNodes build_head(Graph& g, const ModelState& model, Bind bind, int image_node, double eps) {
    const int T = model.regions();
    const int kpos = model.prototypes.kpos;
    const int kneg = model.prototypes.kneg;
    ParamBinder binder = make_binder(g, bind);

    HeadNodes h;
    h.features = build_encoder(g, model.encoder_config, model.encoder, "enc.", binder, image_node);
    h.z = build_extract(g, h.features, model.masks);

    const int protos_pos = binder("protos.pos", model.prototypes.pos);
    const int protos_neg = binder("protos.neg", model.prototypes.neg);
    const int w_pos = binder("cls.pos", model.weights.pos);
    const int w_neg = binder("cls.neg", model.weights.neg);

    std::vector<int> pos_rows(static_cast<size_t>(kpos));
    for (int j = 0; j < kpos; ++j) pos_rows[static_cast<size_t>(j)] = g.row(protos_pos, j);

    auto score = [&](int d2) { return g.sub(g.log(g.offset(d2, 1.0)), g.log(g.offset(d2, eps))); };

    h.d2_pos.resize(static_cast<size_t>(T));
    h.d2_neg.resize(static_cast<size_t>(T));
    h.g_pos.resize(static_cast<size_t>(T));
    h.g_neg.resize(static_cast<size_t>(T));
    h.logit.resize(static_cast<size_t>(T));
    for (int t = 0; t < T; ++t) {
        auto& dp = h.d2_pos[static_cast<size_t>(t)];
        auto& gp = h.g_pos[static_cast<size_t>(t)];
        for (int j = 0; j < kpos; ++j) {
            dp.push_back(g.sq_dist(h.z[static_cast<size_t>(t)], pos_rows[static_cast<size_t>(j)]));
            gp.push_back(score(dp.back()));
        }
        auto& dn = h.d2_neg[static_cast<size_t>(t)];
        auto& gn = h.g_neg[static_cast<size_t>(t)];
        for (int j = 0; j < kneg; ++j) {
            dn.push_back(g.sq_dist(h.z[static_cast<size_t>(t)], g.row(protos_neg, t * kneg + j)));
            gn.push_back(score(dn.back()));
        }
        const int pos_term = g.sum(g.mul(g.abs(g.row(w_pos, t)), g.stack(gp)));
        const int neg_term = g.sum(g.mul(g.abs(g.row(w_neg, t)), g.stack(gn)));
        h.logit[static_cast<size_t>(t)] = g.sub(pos_term, neg_term);
    }

    h.logits = g.stack(h.logit);
    h.peak_max = g.max(h.logits);
    h.p_max = g.sigmoid(g.scale(h.peak_max, 2.0));
    h.peak_mean = g.scale(g.sum(h.logits), 1.0 / T);
    h.p_mean = g.sigmoid(g.scale(h.peak_mean, 2.0));
    h.last = h.p_mean;
    return h;
}

Predictor::Predictor(const ModelState& model) : model_(&model) {
    const EncoderConfig& cfg = model.encoder_config;
    image_node_ = graph_.input("image", {cfg.height, cfg.width, cfg.channels}, false);
    nodes_ = build_head(graph_, model, Bind::Frozen, image_node_);
}

PredictionOutcome Predictor::run(const Tensor& image, HeadKind head) {
    TensorRefMap refs;
    for (const auto& [name, tensor] : model_->param_refs()) refs[name] = tensor;
    refs["image"] = &image;
    graph_.forward(nodes_.last, refs);

    const int T = model_->regions();
    PredictionOutcome out;
    out.logits.resize(static_cast<size_t>(T));
    for (int t = 0; t < T; ++t) out.logits[static_cast<size_t>(t)] = graph_.value(nodes_.logit[static_cast<size_t>(t)])[0];
    out.best_region = graph_.arg_extremum(nodes_.peak_max);
    out.g_pos = Tensor({T, model_->prototypes.kpos});
    out.g_neg = Tensor({T, model_->prototypes.kneg});
    for (int t = 0; t < T; ++t) {
        for (int j = 0; j < model_->prototypes.kpos; ++j)
            out.g_pos.at2(t, j) = graph_.value(nodes_.g_pos[static_cast<size_t>(t)][static_cast<size_t>(j)])[0];
        for (int j = 0; j < model_->prototypes.kneg; ++j)
            out.g_neg.at2(t, j) = graph_.value(nodes_.g_neg[static_cast<size_t>(t)][static_cast<size_t>(j)])[0];
    }
    const double peak =
        head == HeadKind::MaxRegion ? graph_.value(nodes_.peak_max)[0] : graph_.value(nodes_.peak_mean)[0];
    out.p_disease = head == HeadKind::MaxRegion ? graph_.value(nodes_.p_max)[0] : graph_.value(nodes_.p_mean)[0];
    out.p_normal = 1.0 - out.p_disease;
    out.label = peak > 0.0 ? 1 : 0;
    return out;
}

std::vector<Tensor> Predictor::features(const Tensor& image) {
    TensorRefMap refs;
    for (const auto& [name, tensor] : model_->param_refs()) refs[name] = tensor;
    refs["image"] = &image;
    graph_.forward(nodes_.z.back(), refs);
    std::vector<Tensor> out;
    out.reserve(nodes_.z.size());
    for (int id : nodes_.z) out.push_back(graph_.value(id));
    return out;
}

PredictionOutcome predict(const Tensor& image, const ModelState& model) {
    Predictor p(model);
    return p.run(image, HeadKind::MaxRegion);
}

PredictionOutcome mean_pooled_baseline_predict(const Tensor& image, const ModelState& model) {
    Predictor p(model);
    return p.run(image, HeadKind::MeanPool);
}

std::vector<Tensor> model_features(const Tensor& image, const ModelState& model) {
    Predictor p(model);
    return p.features(image);
}

} // namespace feainf
