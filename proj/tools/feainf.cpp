#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "feainf/checkpoint.hpp"
#include "feainf/config.hpp"
#include "feainf/metrics.hpp"
#include "feainf/model.hpp"
#include "feainf/saliency.hpp"
#include "feainf/synthdata.hpp"
#include "feainf/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace feainf;

namespace {

SynthConfig synth_config_from(const Config& cfg) {
    cfg.check_known({"height", "width", "channels", "train_count", "test_count", "disease_fraction",
                     "lesion_radius_min", "lesion_radius_max", "lesion_contrast", "noise", "seed"});
    SynthConfig s;
    s.height = cfg.get_int("height", s.height);
    s.width = cfg.get_int("width", s.width);
    s.channels = cfg.get_int("channels", s.channels);
    s.train_count = cfg.get_int("train_count", s.train_count);
    s.test_count = cfg.get_int("test_count", s.test_count);
    s.disease_fraction = cfg.get_double("disease_fraction", s.disease_fraction);
    s.lesion_radius_min = cfg.get_int("lesion_radius_min", s.lesion_radius_min);
    s.lesion_radius_max = cfg.get_int("lesion_radius_max", s.lesion_radius_max);
    s.lesion_contrast = cfg.get_double("lesion_contrast", s.lesion_contrast);
    s.noise = cfg.get_double("noise", s.noise);
    s.seed = cfg.get_u64("seed", s.seed);
    return s;
}

TrainConfig train_config_from(const Config& cfg) {
    cfg.check_known({"kappa", "eta1", "eta2", "eta3", "eta4", "lr_encoder", "lr_shaping", "lr_prototypes",
                     "lr_classifier", "batch_size", "epochs", "projection_period", "kpos", "kneg", "alpha",
                     "seed"});
    TrainConfig t;
    t.kappa = cfg.get_double("kappa", t.kappa);
    t.eta1 = cfg.get_double("eta1", t.eta1);
    t.eta2 = cfg.get_double("eta2", t.eta2);
    t.eta3 = cfg.get_double("eta3", t.eta3);
    t.eta4 = cfg.get_double("eta4", t.eta4);
    t.lr_encoder = cfg.get_double("lr_encoder", t.lr_encoder);
    t.lr_shaping = cfg.get_double("lr_shaping", t.lr_shaping);
    t.lr_prototypes = cfg.get_double("lr_prototypes", t.lr_prototypes);
    t.lr_classifier = cfg.get_double("lr_classifier", t.lr_classifier);
    t.batch_size = cfg.get_int("batch_size", t.batch_size);
    t.epochs = cfg.get_int("epochs", t.epochs);
    t.projection_period = cfg.get_int("projection_period", t.projection_period);
    t.kpos = cfg.get_int("kpos", t.kpos);
    t.kneg = cfg.get_int("kneg", t.kneg);
    t.alpha = cfg.get_double("alpha", t.alpha);
    t.seed = cfg.get_u64("seed", t.seed);
    return t;
}

SaliencyOptions saliency_options_from(const Config& cfg) {
    cfg.check_known({"sizes", "first_size", "iterations", "lr", "xi", "percentile", "gamma", "theta",
                     "max_refinements", "candidates", "lambda", "seed"});
    SaliencyOptions o;
    o.sizes = cfg.get_int("sizes", o.sizes);
    o.first_size = cfg.get_int("first_size", o.first_size);
    o.iterations = cfg.get_int("iterations", o.iterations);
    o.lr = cfg.get_double("lr", o.lr);
    o.xi = cfg.get_double("xi", o.xi);
    o.percentile = cfg.get_double("percentile", o.percentile);
    o.gamma = cfg.get_double("gamma", o.gamma);
    o.theta = cfg.get_double("theta", o.theta);
    o.max_refinements = cfg.get_int("max_refinements", o.max_refinements);
    o.lambda_candidates = cfg.get_list("candidates", {});
    return o;
}

EncoderConfig encoder_config_for(const Tensor& sample) {
    EncoderConfig cfg;
    cfg.height = sample.shape[0];
    cfg.width = sample.shape[1];
    cfg.channels = sample.shape[2];
    cfg.validate();
    return cfg;
}

json outcome_to_json(const PredictionOutcome& o) {
    json scores_pos = json::array(), scores_neg = json::array();
    const int T = static_cast<int>(o.logits.size());
    for (int t = 0; t < T; ++t) {
        json rp = json::array(), rn = json::array();
        for (int j = 0; j < o.g_pos.shape[1]; ++j) rp.push_back(o.g_pos.at2(t, j));
        for (int j = 0; j < o.g_neg.shape[1]; ++j) rn.push_back(o.g_neg.at2(t, j));
        scores_pos.push_back(rp);
        scores_neg.push_back(rn);
    }
    return json{{"label", o.label == 1 ? "disease" : "normal"},
                {"p_disease", o.p_disease},
                {"p_normal", o.p_normal},
                {"best_region", o.best_region},
                {"region_logits", o.logits},
                {"similarity_scores", {{"pos", scores_pos}, {"neg", scores_neg}}}};
}

void write_map_csv(const std::string& path, const Tensor& map) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot write '" + path + "'");
    os.precision(17);
    for (int i = 0; i < map.shape[0]; ++i) {
        for (int j = 0; j < map.shape[1]; ++j) os << (j ? "," : "") << map.at2(i, j);
        os << "\n";
    }
}

void write_map_pgm(const std::string& path, const Tensor& map) {
    Tensor img({map.shape[0], map.shape[1], 1});
    for (int i = 0; i < img.numel(); ++i) img[i] = map.data[static_cast<size_t>(i)];
    write_image(path, img);
}

Tensor load_mask(const std::string& path) {
    Tensor m = read_image(path);
    Tensor out({m.shape[0], m.shape[1]});
    for (int i = 0; i < out.numel(); ++i) out[i] = m.data[static_cast<size_t>(i)] >= 0.5 ? 1.0 : 0.0;
    return out;
}

ImageResolver dataset_resolver(const std::string& data_dir) {
    if (data_dir.empty()) return nullptr;
    return [data_dir](const std::string& id) {
        fs::path pgm = fs::path(data_dir) / "images" / (id + ".pgm");
        fs::path ppm = fs::path(data_dir) / "images" / (id + ".ppm");
        if (fs::exists(pgm)) return read_image(pgm.string());
        if (fs::exists(ppm)) return read_image(ppm.string());
        // the id may live in a train/ or test/ split below the given root
        for (const char* split : {"train", "test"}) {
            fs::path p = fs::path(data_dir) / split / "images" / (id + ".pgm");
            if (fs::exists(p)) return read_image(p.string());
        }
        throw DataError("cannot resolve image id '" + id + "' under '" + data_dir + "'");
    };
}

// ---------------------------------------------------------------------------

struct GenDataArgs {
    std::string config_path, out_dir;
    int64_t seed = -1;
};

void cmd_gen_data(const GenDataArgs& a) {
    Config cfg = a.config_path.empty() ? Config::from_string("") : Config::from_file(a.config_path);
    SynthConfig s = synth_config_from(cfg);
    if (a.seed >= 0) s.seed = static_cast<uint64_t>(a.seed);
    Dataset d = generate_dataset(s);
    write_dataset_dir(d.train, (fs::path(a.out_dir) / "train").string());
    write_dataset_dir(d.test, (fs::path(a.out_dir) / "test").string());
    std::cout << "wrote " << d.train.size() << " train and " << d.test.size() << " test images to "
              << a.out_dir << "\n";
}

struct TrainArgs {
    std::string data_dir, config_path, out_checkpoint, log_csv;
    int64_t seed = -1;
};

void cmd_train(const TrainArgs& a) {
    Config cfg = a.config_path.empty() ? Config::from_string("") : Config::from_file(a.config_path);
    TrainConfig tc = train_config_from(cfg);
    if (a.seed >= 0) tc.seed = static_cast<uint64_t>(a.seed);

    std::vector<LabeledImage> train = read_dataset_dir((fs::path(a.data_dir) / "train").string());
    std::vector<LabeledImage> test = read_dataset_dir((fs::path(a.data_dir) / "test").string());
    if (train.empty()) throw DataError("no training images under '" + a.data_dir + "'");

    EncoderConfig enc = encoder_config_for(train.front().pixels);
    TrainResult result = run_training(train, test, enc, tc);

    save_checkpoint(a.out_checkpoint, result.model, tc);

    if (!a.log_csv.empty()) {
        std::ofstream os(a.log_csv);
        if (!os) throw DataError("cannot write '" + a.log_csv + "'");
        os.precision(17);
        os << "epoch,balance,neg_clst,neg_sep,pos_clst,pos_sep,total,train_accuracy,test_accuracy\n";
        for (const EpochLog& row : result.log)
            os << row.epoch << "," << row.loss.balance << "," << row.loss.neg_clst << "," << row.loss.neg_sep
               << "," << row.loss.pos_clst << "," << row.loss.pos_sep << "," << row.loss.total << ","
               << row.train_accuracy << "," << row.test_accuracy << "\n";
    }

    const double train_acc = evaluate_accuracy(result.model, train);
    const double test_acc = evaluate_accuracy(result.model, test);
    std::cout << "final train accuracy " << train_acc << ", test accuracy " << test_acc << "\n";
}

struct PredictArgs {
    std::string checkpoint, image, out_json;
};

void cmd_predict(const PredictArgs& a) {
    Checkpoint cp = load_checkpoint(a.checkpoint);
    Tensor image = read_image(a.image);
    PredictionOutcome out = predict(image, cp.model);
    json doc = outcome_to_json(out);
    if (a.out_json.empty()) {
        std::cout << doc.dump(2) << "\n";
    } else {
        std::ofstream os(a.out_json);
        if (!os) throw DataError("cannot write '" + a.out_json + "'");
        os << doc.dump(2) << "\n";
    }
}

struct ExplainArgs {
    std::string checkpoint, image, out_dir, config_path, node = "feature", data_dir, gt_mask;
};

void cmd_explain(const ExplainArgs& a) {
    Checkpoint cp = load_checkpoint(a.checkpoint);
    Tensor image = read_image(a.image);
    Config cfg = a.config_path.empty() ? Config::from_string("") : Config::from_file(a.config_path);
    SaliencyOptions opts = saliency_options_from(cfg);

    DetectionNode::Kind kind;
    if (a.node == "feature")
        kind = DetectionNode::Kind::Feature;
    else if (a.node == "prototype")
        kind = DetectionNode::Kind::Prototype;
    else
        throw DataError("node kind must be 'feature' or 'prototype', got '" + a.node + "'");

    PredictionOutcome outcome = predict(image, cp.model);
    Explanation ex = explain(cp.model, image, kind, opts, dataset_resolver(a.data_dir));

    fs::create_directories(a.out_dir);
    write_map_pgm((fs::path(a.out_dir) / "saliency.pgm").string(), ex.map.values);
    write_map_csv((fs::path(a.out_dir) / "saliency.csv").string(), ex.map.values);

    json evals = json::array();
    for (const CandidateRecord& rec : ex.evaluations)
        evals.push_back({{"lambda_nu", rec.lambda_nu}, {"tau", rec.tau}, {"zero_map", rec.zero_map}});
    json sidecar{{"node",
                  {{"kind", ex.node.kind == DetectionNode::Kind::Feature ? "feature" : "prototype"},
                   {"region", ex.node.region},
                   {"proto_index", ex.node.proto_index}}},
                 {"prediction", outcome_to_json(outcome)},
                 {"lambda0", ex.lambda0},
                 {"lambda_nu", ex.lambda_nu},
                 {"tau", ex.map.tau},
                 {"omega", ex.map.omega},
                 {"evaluations", evals}};

    if (!a.gt_mask.empty()) {
        Tensor gt = load_mask(a.gt_mask);
        const double prop = proportion(ex.map.values, GroundTruth::from_mask(gt));
        double area = 0.0;
        for (double v : gt.data) area += v;
        area /= gt.numel();
        sidecar["proportion"] = prop;
        sidecar["gt_area_fraction"] = area;
        std::cout << "proportion inside ground truth: " << prop << " (area fraction " << area << ")\n";
    }

    std::ofstream os(fs::path(a.out_dir) / "explain.json");
    if (!os) throw DataError("cannot write explain.json under '" + a.out_dir + "'");
    os << sidecar.dump(2) << "\n";
    std::cout << "explained region " << ex.node.region << " with lambda_nu " << ex.lambda_nu << ", tau "
              << ex.map.tau << "\n";
}

struct EvalSaliencyArgs {
    std::string checkpoint, data_dir, method = "adaptive-dm", out_csv, config_path;
};

void cmd_eval_saliency(const EvalSaliencyArgs& a) {
    if (a.method != "adaptive-dm" && a.method != "dm-fixed-lambda" && a.method != "upsample")
        throw DataError("method must be adaptive-dm, dm-fixed-lambda or upsample, got '" + a.method + "'");
    Checkpoint cp = load_checkpoint(a.checkpoint);
    Config cfg = a.config_path.empty() ? Config::from_string("") : Config::from_file(a.config_path);
    SaliencyOptions opts = saliency_options_from(cfg);
    const double fixed_lambda = cfg.get_double("lambda", 1.0);

    std::vector<LabeledImage> images = read_dataset_dir(a.data_dir);
    int skipped = 0;

    std::ofstream os(a.out_csv);
    if (!os) throw DataError("cannot write '" + a.out_csv + "'");
    os.precision(17);
    os << "id,dice,ppv,sensitivity,proportion\n";

    double sum_dice = 0, sum_ppv = 0, sum_sens = 0, sum_prop = 0;
    int rows = 0;
    for (const LabeledImage& img : images) {
        if (img.label != 1) continue;
        if (img.gt_mask.numel() == 0) {
            ++skipped;
            continue;
        }
        Tensor map;
        if (a.method == "upsample") {
            DetectionNode node = select_node(cp.model, img.pixels);
            map = upsampled_similarity_baseline(cp.model, img.pixels, node).values;
        } else if (a.method == "dm-fixed-lambda") {
            DetectionNode node = select_node(cp.model, img.pixels);
            Tensor delta0({opts.first_size, opts.first_size}, opts.xi);
            ConsistencyTerms t0 = consistency_loss(delta0, node, cp.model, 0.0);
            const double lambda0 = t0.mas > 0.0 ? t0.sim / t0.mas : 0.0;
            std::vector<double> lambdas(static_cast<size_t>(opts.sizes), lambda0 * fixed_lambda);
            MaskTrainResult trained = optimize_masks(node, cp.model, lambdas, opts);
            map = stack_saliency(trained.masks, cp.model.encoder_config.height,
                                 cp.model.encoder_config.width, opts.percentile)
                      .values;
        } else {
            Explanation ex = explain(cp.model, img.pixels, DetectionNode::Kind::Feature, opts);
            map = ex.map.values;
        }

        GroundTruth gt = GroundTruth::from_mask(img.gt_mask);
        ConfusionMetrics m = confusion_metrics(binarize(map, opts.percentile), img.gt_mask);
        const double prop = proportion(map, gt);
        os << img.id << "," << m.dice << "," << m.ppv << "," << m.sensitivity << "," << prop << "\n";
        sum_dice += m.dice;
        sum_ppv += m.ppv;
        sum_sens += m.sensitivity;
        sum_prop += prop;
        ++rows;
    }
    if (rows > 0)
        os << "mean," << sum_dice / rows << "," << sum_ppv / rows << "," << sum_sens / rows << ","
           << sum_prop / rows << "\n";
    if (skipped > 0) std::cerr << "warning: skipped " << skipped << " disease images without ground truth\n";
    if (rows == 0) std::cerr << "warning: no evaluable images found\n";
    std::cout << "evaluated " << rows << " images with method " << a.method << "\n";
}

struct SweepArgs {
    std::string checkpoint, image, out_csv, config_path, lambdas;
};

void cmd_sweep_lambda(const SweepArgs& a) {
    Checkpoint cp = load_checkpoint(a.checkpoint);
    Tensor image = read_image(a.image);
    Config cfg = a.config_path.empty() ? Config::from_string("") : Config::from_file(a.config_path);
    SaliencyOptions opts = saliency_options_from(cfg);

    std::vector<double> lambda_nus;
    if (!a.lambdas.empty()) {
        Config inline_cfg = Config::from_string("candidates = " + a.lambdas);
        lambda_nus = inline_cfg.get_list("candidates", {});
    } else {
        lambda_nus = opts.candidates_or_default();
    }

    DetectionNode node = select_node(cp.model, image);
    std::vector<double> lambda0 = initial_lambda0(cp.model, node, opts);

    std::ofstream os(a.out_csv);
    if (!os) throw DataError("cannot write '" + a.out_csv + "'");
    os.precision(17);
    os << "lambda_nu,sim,mas,tau,zero_map\n";
    for (double lv : lambda_nus) {
        CandidateRecord rec = evaluate_candidate(cp.model, node, lambda0, lv, opts);
        double sim = 0, mas = 0;
        for (double v : rec.sim) sim += v;
        for (double v : rec.mas) mas += v;
        sim /= rec.sim.size();
        mas /= rec.mas.size();
        os << lv << "," << sim << "," << mas << "," << rec.tau << "," << (rec.zero_map ? 1 : 0) << "\n";
    }
    std::cout << "swept " << lambda_nus.size() << " weight candidates\n";
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Interpretable lesion classifier with mask-based saliency explanations"};
    app.require_subcommand(1);

    GenDataArgs gen;
    CLI::App* c_gen = app.add_subcommand("gen-data", "Generate the synthetic lesion dataset");
    c_gen->add_option("--out", gen.out_dir, "Output directory")->required();
    c_gen->add_option("--config", gen.config_path, "Config file");
    c_gen->add_option("--seed", gen.seed, "Seed override");

    TrainArgs train;
    CLI::App* c_train = app.add_subcommand("train", "Train a model on a dataset directory");
    c_train->add_option("--data", train.data_dir, "Dataset root (train/ and test/)")->required();
    c_train->add_option("--out", train.out_checkpoint, "Checkpoint output path")->required();
    c_train->add_option("--config", train.config_path, "Config file");
    c_train->add_option("--log", train.log_csv, "Per-epoch loss/accuracy CSV");
    c_train->add_option("--seed", train.seed, "Seed override");

    PredictArgs pred;
    CLI::App* c_pred = app.add_subcommand("predict", "Classify one image");
    c_pred->add_option("--checkpoint", pred.checkpoint, "Checkpoint path")->required();
    c_pred->add_option("--image", pred.image, "Image path (PGM/PPM)")->required();
    c_pred->add_option("--out", pred.out_json, "JSON output path (default stdout)");

    ExplainArgs expl;
    CLI::App* c_expl = app.add_subcommand("explain", "Produce a saliency map for one image");
    c_expl->add_option("--checkpoint", expl.checkpoint, "Checkpoint path")->required();
    c_expl->add_option("--image", expl.image, "Image path")->required();
    c_expl->add_option("--out", expl.out_dir, "Output directory")->required();
    c_expl->add_option("--node", expl.node, "Detection node kind: feature|prototype");
    c_expl->add_option("--config", expl.config_path, "Config file");
    c_expl->add_option("--data", expl.data_dir, "Dataset root for prototype source images");
    c_expl->add_option("--gt", expl.gt_mask, "Ground-truth mask to report proportion against");

    EvalSaliencyArgs evalr;
    CLI::App* c_eval = app.add_subcommand("eval-saliency", "Localization metrics over a dataset");
    c_eval->add_option("--checkpoint", evalr.checkpoint, "Checkpoint path")->required();
    c_eval->add_option("--data", evalr.data_dir, "Dataset split directory")->required();
    c_eval->add_option("--method", evalr.method, "adaptive-dm|dm-fixed-lambda|upsample");
    c_eval->add_option("--out", evalr.out_csv, "Report CSV path")->required();
    c_eval->add_option("--config", evalr.config_path, "Config file");

    SweepArgs sweep;
    CLI::App* c_sweep = app.add_subcommand("sweep-lambda", "Quality table over weight candidates");
    c_sweep->add_option("--checkpoint", sweep.checkpoint, "Checkpoint path")->required();
    c_sweep->add_option("--image", sweep.image, "Image path")->required();
    c_sweep->add_option("--out", sweep.out_csv, "CSV output path")->required();
    c_sweep->add_option("--config", sweep.config_path, "Config file");
    c_sweep->add_option("--lambdas", sweep.lambdas, "Comma-separated lambda_nu list");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (c_gen->parsed()) cmd_gen_data(gen);
        if (c_train->parsed()) cmd_train(train);
        if (c_pred->parsed()) cmd_predict(pred);
        if (c_expl->parsed()) cmd_explain(expl);
        if (c_eval->parsed()) cmd_eval_saliency(evalr);
        if (c_sweep->parsed()) cmd_sweep_lambda(sweep);
    } catch (const NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
