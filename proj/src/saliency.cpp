#include "feainf/saliency.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <mutex>

#include "feainf/optim.hpp"
#include "feainf/parallel.hpp"

namespace feainf {

DetectionNode select_node(const ModelState& model, const Tensor& image) {
    Predictor p(model);
    PredictionOutcome out = p.run(image);
    DetectionNode node;
    node.kind = DetectionNode::Kind::Feature;
    node.image = image;
    node.region = out.best_region;
    node.reference = p.features(image)[static_cast<size_t>(out.best_region)];
    return node;
}

DetectionNode select_prototype_node(const ModelState& model, int proto_index, const Tensor& source_image) {
    if (proto_index < 0 || proto_index >= model.prototypes.kpos)
        throw ShapeError("prototype index out of range");
    std::vector<Tensor> feats = model_features(source_image, model);
    const int c1 = model.encoder_config.feature_channels;
    const double* row = model.prototypes.pos.data.data() + static_cast<size_t>(proto_index) * c1;
    int best_t = 0;
    double best = std::numeric_limits<double>::infinity();
    for (size_t t = 0; t < feats.size(); ++t) {
        double d2 = 0.0;
        for (int i = 0; i < c1; ++i) {
            const double d = feats[t][i] - row[i];
            d2 += d * d;
        }
        if (d2 < best) {
            best = d2;
            best_t = static_cast<int>(t);
        }
    }
    DetectionNode node;
    node.kind = DetectionNode::Kind::Prototype;
    node.image = source_image;
    node.region = best_t;
    node.proto_index = proto_index;
    node.reference = feats[static_cast<size_t>(best_t)];
    return node;
}

Tensor upsample_mask(const Tensor& delta, int out_h, int out_w) {
    Graph g;
    int d = g.constant(delta);
    return g.forward(g.upsample(d, out_h, out_w));
}

namespace {

struct MaskGraph {
    Graph g;
    int sim = -1, mas = -1, con = -1;
};

MaskGraph build_mask_graph(const DetectionNode& node, const ModelState& model, int u, int v, double lambda) {
    MaskGraph mg;
    Graph& g = mg.g;
    const EncoderConfig& cfg = model.encoder_config;
    int delta = g.input("delta", {u, v}, true);
    int lifted = g.upsample(delta, cfg.height, cfg.width);
    int masked = g.mask_apply(g.constant(node.image), lifted);
    ParamBinder baked = make_binder(g, Bind::Baked);
    int fmap = build_encoder(g, cfg, model.encoder, "enc.", baked, masked);
    int z = build_extract_region(g, fmap, model.masks, node.region);
    mg.sim = g.sq_dist(z, g.constant(node.reference));
    mg.mas = g.scale(g.l1_norm(delta), 1.0 / (static_cast<double>(u) * v));
    mg.con = g.add(mg.sim, g.scale(mg.mas, lambda));
    return mg;
}

} // namespace

ConsistencyTerms consistency_loss(const Tensor& delta, const DetectionNode& node, const ModelState& model,
                                  double lambda) {
    if (lambda < 0.0) throw DomainError("lambda must be >= 0");
    if (delta.rank() != 2) throw ShapeError("mask grid must be rank 2");
    MaskGraph mg = build_mask_graph(node, model, delta.shape[0], delta.shape[1], lambda);
    TensorRefMap refs{{"delta", &delta}};
    mg.g.forward(mg.con, refs);
    return {mg.g.value(mg.sim)[0], mg.g.value(mg.mas)[0], mg.g.value(mg.con)[0]};
}

Tensor consistency_gradient(const Tensor& delta, const DetectionNode& node, const ModelState& model,
                            double lambda) {
    if (lambda < 0.0) throw DomainError("lambda must be >= 0");
    if (delta.rank() != 2) throw ShapeError("mask grid must be rank 2");
    MaskGraph mg = build_mask_graph(node, model, delta.shape[0], delta.shape[1], lambda);
    TensorRefMap refs{{"delta", &delta}};
    mg.g.forward(mg.con, refs);
    return mg.g.gradient(mg.con, {"delta"})["delta"];
}

std::vector<double> default_lambda_candidates() {
    std::vector<double> out;
    for (double scale : {1e-2, 1e-1, 1.0, 1e1, 1e2})
        for (int j = 1; j <= 9; ++j) out.push_back(scale * j);
    std::sort(out.begin(), out.end());
    return out;
}

std::vector<double> SaliencyOptions::candidates_or_default() const {
    if (lambda_candidates.empty()) return default_lambda_candidates();
    std::vector<double> out = lambda_candidates;
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

void SaliencyOptions::validate(int image_h, int image_w) const {
    if (sizes < 1) throw DataError("need at least one mask size");
    if (first_size < 1) throw DataError("mask sizes must be positive");
    if (first_size + sizes - 1 > std::min(image_h, image_w))
        throw DataError("largest mask grid exceeds the image");
    if (iterations < 0) throw DataError("iterations must be >= 0");
    if (lr <= 0.0) throw DataError("mask learning rate must be positive");
    if (xi <= 0.0 || xi > 1.0) throw DataError("xi must be in (0,1]");
    if (percentile <= 0.0 || percentile >= 100.0) throw DataError("percentile must be in (0,100)");
    if (gamma <= 0.0) throw DataError("gamma must be positive");
    if (theta <= 0.0) throw DataError("theta must be positive");
    if (max_refinements < 0) throw DataError("refinement cap must be >= 0");
}

MaskTrainResult optimize_masks(const DetectionNode& node, const ModelState& model,
                               const std::vector<double>& lambdas, const SaliencyOptions& options) {
    const EncoderConfig& cfg = model.encoder_config;
    options.validate(cfg.height, cfg.width);
    if (static_cast<int>(lambdas.size()) != options.sizes)
        throw ShapeError("need one lambda per mask size");

    MaskTrainResult result;
    for (int i = 0; i < options.sizes; ++i) {
        const int u = options.first_size + i, v = options.first_size + i;
        const double lambda = lambdas[static_cast<size_t>(i)];
        if (lambda < 0.0) throw DomainError("lambda must be >= 0");

        MaskGraph mg = build_mask_graph(node, model, u, v, lambda);
        Tensor delta({u, v}, options.xi);
        AdamState::Moments moments;

        Tensor best_delta = delta;
        double best_con = std::numeric_limits<double>::infinity();
        double best_sim = 0.0, best_mas = 0.0;

        TensorRefMap refs{{"delta", &delta}};
        auto observe = [&]() {
            mg.g.forward(mg.con, refs);
            const double con = mg.g.value(mg.con)[0];
            if (!std::isfinite(con)) throw NumericalError("mask training diverged (non-finite objective)");
            if (con < best_con) {
                best_con = con;
                best_sim = mg.g.value(mg.sim)[0];
                best_mas = mg.g.value(mg.mas)[0];
                best_delta = delta;
            }
            return con;
        };

        for (int iter = 0; iter < options.iterations; ++iter) {
            observe();
            Tensor grad = mg.g.gradient(mg.con, {"delta"})["delta"];
            adam_step(delta, grad, options.lr, moments);
            for (double& x : delta.data) x = std::clamp(x, 0.0, 1.0);
        }
        observe(); // the final iterate competes too

        result.masks.push_back({u, v, std::move(best_delta)});
        result.sim.push_back(best_sim);
        result.mas.push_back(best_mas);
        result.con.push_back(best_con);
    }
    return result;
}

SaliencyMap stack_saliency(const std::vector<MaskVector>& masks, int out_h, int out_w, double percentile) {
    if (masks.empty()) throw ShapeError("no masks to stack");
    if (percentile <= 0.0 || percentile >= 100.0) throw DomainError("percentile must be in (0,100)");

    Tensor acc({out_h, out_w});
    for (const MaskVector& m : masks) {
        Tensor up = upsample_mask(m.delta, out_h, out_w);
        for (int i = 0; i < acc.numel(); ++i) acc[i] += up[i];
    }

    // Threshold: the value just below the kept top fraction, so ceil(p% * HW)
    // pixels land strictly above it (ties at the threshold survive with
    // activation zero).
    const int hw = acc.numel();
    const int keep = std::min(hw, std::max(1, static_cast<int>(std::ceil(percentile * hw / 100.0))));
    std::vector<double> sorted(acc.data.begin(), acc.data.end());
    std::sort(sorted.begin(), sorted.end(), std::greater<double>());
    const double omega = keep < hw ? sorted[static_cast<size_t>(keep)] : sorted.back();

    SaliencyMap out;
    out.omega = omega;
    out.values = Tensor({out_h, out_w});
    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < hw; ++i) {
        const double b = acc[i] >= omega ? acc[i] - omega : 0.0;
        out.values[i] = b;
        lo = std::min(lo, b);
        hi = std::max(hi, b);
    }
    if (hi - lo <= 0.0) {
        out.values.fill(0.0); // flat stack: no salient region to report
    } else {
        for (int i = 0; i < hw; ++i) out.values[i] = (out.values[i] - lo) / (hi - lo);
    }
    return out;
}

ExtremeRates discrete_extreme_rate(const Tensor& map) {
    if (map.rank() != 2) throw ShapeError("saliency map must be rank 2");
    const int H = map.shape[0], W = map.shape[1];
    if (H < 3 || W < 3) throw ShapeError("extreme counting needs at least 3x3, got " + shape_str(map.shape));

    // Counts pairs of opposite-sign steps with no strict sign change between
    // them, per line. diffs[k] = s[k+1] - s[k].
    auto count_line = [](const std::vector<double>& diffs) {
        const int n = static_cast<int>(diffs.size());
        long long count = 0;
        for (int a = 0; a < n; ++a) {
            bool interior_ok = true;
            for (int b = a + 1; b < n; ++b) {
                if (b - 2 >= a + 1) interior_ok = interior_ok && diffs[static_cast<size_t>(b - 2)] * diffs[static_cast<size_t>(b - 1)] >= 0.0;
                if (interior_ok && diffs[static_cast<size_t>(a)] * diffs[static_cast<size_t>(b)] < 0.0) ++count;
            }
        }
        return count;
    };

    long long rh = 0, rv = 0;
    std::vector<double> diffs;
    diffs.resize(static_cast<size_t>(W - 1));
    for (int i = 0; i < H; ++i) {
        for (int j = 0; j < W - 1; ++j) diffs[static_cast<size_t>(j)] = map.at2(i, j + 1) - map.at2(i, j);
        rh += count_line(diffs);
    }
    diffs.resize(static_cast<size_t>(H - 1));
    for (int j = 0; j < W; ++j) {
        for (int i = 0; i < H - 1; ++i) diffs[static_cast<size_t>(i)] = map.at2(i + 1, j) - map.at2(i, j);
        rv += count_line(diffs);
    }

    ExtremeRates out;
    out.rh = static_cast<double>(rh);
    out.rv = static_cast<double>(rv);
    out.rt = (out.rh + out.rv) / (static_cast<double>(H) * (W - 2) + static_cast<double>(W) * (H - 2));
    return out;
}

double quality_tau(const Tensor& map) {
    ExtremeRates r = discrete_extreme_rate(map);
    double activation = 0.0;
    for (double v : map.data) activation += std::fabs(v);
    return r.rt * activation;
}

double adaptive_weight_search(const std::vector<double>& candidates, const std::function<double(double)>& Q,
                              double gamma, double theta, int max_refinements) {
    if (candidates.empty()) throw DomainError("empty candidate set");
    std::vector<double> cands = candidates;
    std::sort(cands.begin(), cands.end());

    size_t i1 = 0;
    std::vector<double> q(cands.size());
    for (size_t i = 0; i < cands.size(); ++i) {
        q[i] = Q(cands[i]);
        if (q[i] < q[i1]) i1 = i;
    }
    if (cands.size() == 1) return cands[0];

    double lam1 = cands[i1], q1 = q[i1];
    double lam2, q2;
    if (i1 == 0) {
        lam2 = cands[1];
        q2 = q[1];
    } else if (i1 + 1 == cands.size()) {
        lam2 = cands[i1 - 1];
        q2 = q[i1 - 1];
    } else if (q[i1 - 1] <= q[i1 + 1]) {
        lam2 = cands[i1 - 1];
        q2 = q[i1 - 1];
    } else {
        lam2 = cands[i1 + 1];
        q2 = q[i1 + 1];
    }

    double lam3 = (lam1 + gamma * lam2) / (1.0 + gamma);
    for (int step = 0; step < max_refinements; ++step) {
        if (!(q2 > 0.0)) break;            // ratio undefined or can't improve on zero
        if (!(q1 / q2 < theta)) break;
        const double q3 = Q(lam3);
        if (q3 < q1) {
            lam2 = lam1;
            q2 = q1;
            lam1 = lam3;
            q1 = q3;
            lam3 = (lam1 + gamma * lam2) / (1.0 + gamma);
        } else if (q3 < q2) {
            lam2 = lam3;
            q2 = q3;
            lam3 = (lam1 + gamma * lam2) / (1.0 + gamma);
        } else {
            lam2 = lam1;
            q2 = q1;
        }
    }
    return lam1;
}

std::vector<double> initial_lambda0(const ModelState& model, const DetectionNode& node,
                                    const SaliencyOptions& options) {
    // The untrained mask upsamples to the same constant plane for every grid
    // size, so one evaluation covers all of them.
    Tensor delta0({options.first_size, options.first_size}, options.xi);
    ConsistencyTerms t0 = consistency_loss(delta0, node, model, 0.0);
    const double lambda0 = t0.mas > 0.0 ? t0.sim / t0.mas : 0.0;
    return std::vector<double>(static_cast<size_t>(options.sizes), lambda0);
}

CandidateRecord evaluate_candidate(const ModelState& model, const DetectionNode& node,
                                   const std::vector<double>& lambda0, double lambda_nu,
                                   const SaliencyOptions& options) {
    std::vector<double> lambdas(static_cast<size_t>(options.sizes));
    for (int i = 0; i < options.sizes; ++i) lambdas[static_cast<size_t>(i)] = lambda0[static_cast<size_t>(i)] * lambda_nu;
    MaskTrainResult trained = optimize_masks(node, model, lambdas, options);
    CandidateRecord rec;
    rec.lambda_nu = lambda_nu;
    rec.map = stack_saliency(trained.masks, model.encoder_config.height, model.encoder_config.width,
                             options.percentile);
    rec.map.lambda_nu = lambda_nu;
    rec.zero_map = true;
    for (double v : rec.map.values.data)
        if (v != 0.0) {
            rec.zero_map = false;
            break;
        }
    rec.tau = quality_tau(rec.map.values);
    rec.map.tau = rec.tau;
    rec.sim = trained.sim;
    rec.mas = trained.mas;
    return rec;
}

Explanation explain(const ModelState& model, const Tensor& image, DetectionNode::Kind kind,
                    const SaliencyOptions& options, const ImageResolver& resolve) {
    const EncoderConfig& cfg = model.encoder_config;
    options.validate(cfg.height, cfg.width);

    Explanation ex;
    if (kind == DetectionNode::Kind::Feature) {
        ex.node = select_node(model, image);
    } else {
        Predictor p(model);
        PredictionOutcome out = p.run(image);
        int best_j = 0;
        for (int j = 1; j < model.prototypes.kpos; ++j)
            if (out.g_pos.at2(out.best_region, j) > out.g_pos.at2(out.best_region, best_j)) best_j = j;
        const PrototypeSource& src = model.prototypes.pos_sources[static_cast<size_t>(best_j)];
        if (!src.projected)
            throw DataError("prototype " + std::to_string(best_j) +
                            " has no projection source; train with projection first");
        if (!resolve) throw DataError("prototype explanations need an image resolver for id '" + src.image_id + "'");
        ex.node = select_prototype_node(model, best_j, resolve(src.image_id));
    }

    ex.lambda0 = initial_lambda0(model, ex.node, options);

    const std::vector<double> candidates = options.candidates_or_default();

    std::map<double, CandidateRecord> memo;
    std::mutex memo_mutex;
    auto evaluate = [&](double lambda_nu) -> CandidateRecord {
        {
            std::lock_guard<std::mutex> lock(memo_mutex);
            auto it = memo.find(lambda_nu);
            if (it != memo.end()) return it->second;
        }
        CandidateRecord rec = evaluate_candidate(model, ex.node, ex.lambda0, lambda_nu, options);
        std::lock_guard<std::mutex> lock(memo_mutex);
        memo.emplace(lambda_nu, rec);
        return rec;
    };

    // Degenerate all-zero maps score 0 by construction; they are pushed to
    // the back of the ranking so a map with actual content wins when one
    // exists.
    auto effective_q = [&](double lambda_nu) {
        CandidateRecord rec = evaluate(lambda_nu);
        return rec.zero_map ? std::numeric_limits<double>::infinity() : rec.tau;
    };

    // The search starts by scoring every candidate; those runs are
    // independent, so precompute them in parallel.
    parallel_for(static_cast<int>(candidates.size()), [&](int, int i) { evaluate(candidates[static_cast<size_t>(i)]); });

    ex.lambda_nu = adaptive_weight_search(candidates, effective_q, options.gamma, options.theta,
                                          options.max_refinements);
    ex.map = memo.at(ex.lambda_nu).map;

    ex.evaluations.reserve(memo.size());
    for (const auto& [lv, rec] : memo) ex.evaluations.push_back(rec);
    return ex;
}

SaliencyMap upsampled_similarity_baseline(const ModelState& model, const Tensor& image,
                                          const DetectionNode& node) {
    std::vector<Tensor> feats = model_features(image, model);
    PredictionOutcome out = head_outcome(feats, model.prototypes, model.weights, HeadKind::MaxRegion);
    int j = node.proto_index;
    if (j < 0) {
        j = 0;
        for (int cand = 1; cand < model.prototypes.kpos; ++cand)
            if (out.g_pos.at2(node.region, cand) > out.g_pos.at2(node.region, j)) j = cand;
    }

    Tensor grid({model.masks.h1, model.masks.w1});
    for (int t = 0; t < model.regions(); ++t) grid[t] = out.g_pos.at2(t, j);

    Tensor up = upsample_mask(grid, model.encoder_config.height, model.encoder_config.width);
    double lo = up[0], hi = up[0];
    for (double v : up.data) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    SaliencyMap map;
    if (hi - lo <= 0.0) {
        map.values = Tensor({model.encoder_config.height, model.encoder_config.width});
    } else {
        for (double& v : up.data) v = (v - lo) / (hi - lo);
        map.values = std::move(up);
    }
    map.tau = quality_tau(map.values);
    return map;
}

} // namespace feainf
