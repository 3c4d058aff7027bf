#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "feainf/checkpoint.hpp"
#include "feainf/metrics.hpp"
#include "feainf/model.hpp"
#include "feainf/saliency.hpp"
#include "feainf/synthdata.hpp"
#include "feainf/training.hpp"

namespace py = pybind11;
using namespace feainf;

namespace {

using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor tensor_from(const DoubleArray& a) {
    Shape shape(static_cast<size_t>(a.ndim()));
    for (py::ssize_t i = 0; i < a.ndim(); ++i) shape[static_cast<size_t>(i)] = static_cast<int>(a.shape(i));
    Tensor t(shape);
    std::copy(a.data(), a.data() + a.size(), t.data.begin());
    return t;
}

Tensor image_from(const DoubleArray& a) {
    Tensor t = tensor_from(a);
    if (t.rank() == 2) t.shape = {t.shape[0], t.shape[1], 1};
    if (t.rank() != 3) throw ShapeError("image array must be (H,W) or (H,W,C)");
    return t;
}

Tensor map_from(const DoubleArray& a) {
    Tensor t = tensor_from(a);
    if (t.rank() != 2) throw ShapeError("map array must be 2-D");
    return t;
}

py::array array_from(const Tensor& t) {
    std::vector<py::ssize_t> shape(t.shape.begin(), t.shape.end());
    py::array_t<double> out(shape);
    std::copy(t.data.begin(), t.data.end(), out.mutable_data());
    return out;
}

SaliencyOptions options_from_kwargs(int sizes, int first_size, int iterations, double lr, double xi,
                                    double percentile, double gamma, double theta, int max_refinements,
                                    const std::vector<double>& candidates) {
    SaliencyOptions o;
    o.sizes = sizes;
    o.first_size = first_size;
    o.iterations = iterations;
    o.lr = lr;
    o.xi = xi;
    o.percentile = percentile;
    o.gamma = gamma;
    o.theta = theta;
    o.max_refinements = max_refinements;
    o.lambda_candidates = candidates;
    return o;
}

py::dict outcome_dict(const PredictionOutcome& o) {
    py::dict d;
    d["label"] = o.label;
    d["p_disease"] = o.p_disease;
    d["p_normal"] = o.p_normal;
    d["best_region"] = o.best_region;
    d["region_logits"] = o.logits;
    d["g_pos"] = array_from(o.g_pos);
    d["g_neg"] = array_from(o.g_neg);
    return d;
}

struct PyModel {
    ModelState state;
    TrainConfig config;
};

py::dict labeled_image_dict(const LabeledImage& img) {
    py::dict d;
    d["id"] = img.id;
    d["image"] = array_from(img.pixels);
    d["label"] = img.label;
    if (img.gt_mask.numel() > 0)
        d["mask"] = array_from(img.gt_mask);
    else
        d["mask"] = py::none();
    return d;
}

} // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Interpretable lesion classifier with mask-based saliency explanations";

    py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
    py::register_exception<DomainError>(m, "DomainError", PyExc_ValueError);
    py::register_exception<DataError>(m, "DataError", PyExc_RuntimeError);
    py::register_exception<NumericalError>(m, "NumericalError", PyExc_RuntimeError);

    m.def(
        "similarity_score",
        [](const DoubleArray& z, const DoubleArray& p, double eps) {
            return similarity_score(tensor_from(z), tensor_from(p), eps);
        },
        py::arg("z"), py::arg("p"), py::arg("eps") = kSimilarityEps);

    m.def("balance_loss", &balance_loss, py::arg("p"), py::arg("y"), py::arg("kappa") = 2.0);

    m.def(
        "confusion_metrics",
        [](const DoubleArray& pred, const DoubleArray& gt) {
            ConfusionMetrics c = confusion_metrics(map_from(pred), map_from(gt));
            return py::make_tuple(c.dice, c.ppv, c.sensitivity);
        },
        py::arg("pred"), py::arg("gt"));

    m.def(
        "binarize",
        [](const DoubleArray& map, double percentile) { return array_from(binarize(map_from(map), percentile)); },
        py::arg("map"), py::arg("percentile") = 20.0);

    m.def(
        "proportion",
        [](const DoubleArray& map, const DoubleArray& gt_mask) {
            return proportion(map_from(map), GroundTruth::from_mask(map_from(gt_mask)));
        },
        py::arg("map"), py::arg("gt_mask"));

    m.def(
        "proportion_box",
        [](const DoubleArray& map, int row0, int col0, int row1, int col1) {
            return proportion(map_from(map), GroundTruth::from_box(row0, col0, row1, col1));
        },
        py::arg("map"), py::arg("row0"), py::arg("col0"), py::arg("row1"), py::arg("col1"));

    m.def("accuracy", &accuracy, py::arg("predictions"), py::arg("truths"));

    m.def(
        "discrete_extreme_rate",
        [](const DoubleArray& map) {
            ExtremeRates r = discrete_extreme_rate(map_from(map));
            return py::make_tuple(r.rh, r.rv, r.rt);
        },
        py::arg("map"));

    m.def(
        "quality_tau", [](const DoubleArray& map) { return quality_tau(map_from(map)); }, py::arg("map"));

    m.def(
        "upsample",
        [](const DoubleArray& grid, int out_h, int out_w) {
            return array_from(upsample_mask(map_from(grid), out_h, out_w));
        },
        py::arg("grid"), py::arg("out_h"), py::arg("out_w"));

    m.def(
        "adaptive_weight_search",
        [](const std::vector<double>& candidates, const std::function<double(double)>& q, double gamma,
           double theta, int max_refinements) {
            return adaptive_weight_search(candidates, q, gamma, theta, max_refinements);
        },
        py::arg("candidates"), py::arg("q"), py::arg("gamma") = 1.0, py::arg("theta") = 1.0,
        py::arg("max_refinements") = 50);

    m.def(
        "generate_dataset",
        [](int height, int width, int channels, int train_count, int test_count, double disease_fraction,
           uint64_t seed) {
            SynthConfig cfg;
            cfg.height = height;
            cfg.width = width;
            cfg.channels = channels;
            cfg.train_count = train_count;
            cfg.test_count = test_count;
            cfg.disease_fraction = disease_fraction;
            cfg.seed = seed;
            Dataset d = generate_dataset(cfg);
            py::list train, test;
            for (const LabeledImage& img : d.train) train.append(labeled_image_dict(img));
            for (const LabeledImage& img : d.test) test.append(labeled_image_dict(img));
            py::dict out;
            out["train"] = train;
            out["test"] = test;
            return out;
        },
        py::arg("height") = 64, py::arg("width") = 64, py::arg("channels") = 1, py::arg("train_count") = 200,
        py::arg("test_count") = 100, py::arg("disease_fraction") = 0.5, py::arg("seed") = 1);

    m.def(
        "gen_data",
        [](const std::string& out_dir, int height, int width, int channels, int train_count, int test_count,
           double disease_fraction, uint64_t seed) {
            SynthConfig cfg;
            cfg.height = height;
            cfg.width = width;
            cfg.channels = channels;
            cfg.train_count = train_count;
            cfg.test_count = test_count;
            cfg.disease_fraction = disease_fraction;
            cfg.seed = seed;
            Dataset d = generate_dataset(cfg);
            write_dataset_dir(d.train, out_dir + "/train");
            write_dataset_dir(d.test, out_dir + "/test");
        },
        py::arg("out_dir"), py::arg("height") = 64, py::arg("width") = 64, py::arg("channels") = 1,
        py::arg("train_count") = 200, py::arg("test_count") = 100, py::arg("disease_fraction") = 0.5,
        py::arg("seed") = 1);

    m.def(
        "read_image", [](const std::string& path) { return array_from(read_image(path)); }, py::arg("path"));
    m.def(
        "write_image",
        [](const std::string& path, const DoubleArray& image) { write_image(path, image_from(image)); },
        py::arg("path"), py::arg("image"));

    py::class_<PyModel>(m, "Model")
        .def_static(
            "create",
            [](int height, int width, int channels, int kpos, int kneg, double alpha, uint64_t seed) {
                EncoderConfig cfg;
                cfg.height = height;
                cfg.width = width;
                cfg.channels = channels;
                PyModel pm;
                pm.state = ModelState::init(cfg, kpos, kneg, alpha, seed);
                pm.config.kpos = kpos;
                pm.config.kneg = kneg;
                pm.config.alpha = alpha;
                pm.config.seed = seed;
                return pm;
            },
            py::arg("height") = 64, py::arg("width") = 64, py::arg("channels") = 1, py::arg("kpos") = 10,
            py::arg("kneg") = 4, py::arg("alpha") = 0.1, py::arg("seed") = 7)
        .def_static("load",
                    [](const std::string& path) {
                        Checkpoint cp = load_checkpoint(path);
                        return PyModel{std::move(cp.model), cp.train_config};
                    })
        .def("save",
             [](const PyModel& pm, const std::string& path) { save_checkpoint(path, pm.state, pm.config); })
        .def("predict",
             [](const PyModel& pm, const DoubleArray& image) {
                 return outcome_dict(predict(image_from(image), pm.state));
             })
        .def("predict_baseline",
             [](const PyModel& pm, const DoubleArray& image) {
                 return outcome_dict(mean_pooled_baseline_predict(image_from(image), pm.state));
             })
        .def("features",
             [](const PyModel& pm, const DoubleArray& image) {
                 std::vector<Tensor> feats = model_features(image_from(image), pm.state);
                 const int T = static_cast<int>(feats.size());
                 const int c1 = feats.empty() ? 0 : feats[0].numel();
                 Tensor all({T, c1});
                 for (int t = 0; t < T; ++t)
                     std::copy(feats[static_cast<size_t>(t)].data.begin(), feats[static_cast<size_t>(t)].data.end(),
                               all.data.begin() + static_cast<size_t>(t) * c1);
                 return array_from(all);
             })
        .def(
            "explain",
            [](const PyModel& pm, const DoubleArray& image, const std::string& node, int sizes, int first_size,
               int iterations, double lr, double xi, double percentile, double gamma, double theta,
               int max_refinements, const std::vector<double>& candidates, const std::string& data_dir) {
                DetectionNode::Kind kind = node == "prototype" ? DetectionNode::Kind::Prototype
                                                               : DetectionNode::Kind::Feature;
                SaliencyOptions opts = options_from_kwargs(sizes, first_size, iterations, lr, xi, percentile,
                                                           gamma, theta, max_refinements, candidates);
                ImageResolver resolve = nullptr;
                if (!data_dir.empty())
                    resolve = [data_dir](const std::string& id) {
                        return read_image(data_dir + "/images/" + id + ".pgm");
                    };
                Explanation ex = explain(pm.state, image_from(image), kind, opts, resolve);
                py::dict d;
                d["map"] = array_from(ex.map.values);
                d["lambda_nu"] = ex.lambda_nu;
                d["tau"] = ex.map.tau;
                d["region"] = ex.node.region;
                d["lambda0"] = ex.lambda0;
                py::list evals;
                for (const CandidateRecord& rec : ex.evaluations) {
                    py::dict e;
                    e["lambda_nu"] = rec.lambda_nu;
                    e["tau"] = rec.tau;
                    e["zero_map"] = rec.zero_map;
                    evals.append(e);
                }
                d["evaluations"] = evals;
                return d;
            },
            py::arg("image"), py::arg("node") = "feature", py::arg("sizes") = 9, py::arg("first_size") = 6,
            py::arg("iterations") = 400, py::arg("lr") = 2e-3, py::arg("xi") = 0.5, py::arg("percentile") = 20.0,
            py::arg("gamma") = 1.0, py::arg("theta") = 1.0, py::arg("max_refinements") = 50,
            py::arg("candidates") = std::vector<double>{}, py::arg("data_dir") = "")
        .def(
            "baseline_saliency",
            [](const PyModel& pm, const DoubleArray& image) {
                Tensor img = image_from(image);
                DetectionNode node = select_node(pm.state, img);
                return array_from(upsampled_similarity_baseline(pm.state, img, node).values);
            },
            py::arg("image"));

    m.def(
        "train",
        [](const std::string& data_dir, int epochs, int batch_size, double kappa, double eta, double lr_encoder,
           double lr_shaping, double lr_prototypes, double lr_classifier, int projection_period, int kpos,
           int kneg, double alpha, uint64_t seed) {
            TrainConfig tc;
            tc.epochs = epochs;
            tc.batch_size = batch_size;
            tc.kappa = kappa;
            tc.eta1 = tc.eta2 = tc.eta3 = tc.eta4 = eta;
            tc.lr_encoder = lr_encoder;
            tc.lr_shaping = lr_shaping;
            tc.lr_prototypes = lr_prototypes;
            tc.lr_classifier = lr_classifier;
            tc.projection_period = projection_period;
            tc.kpos = kpos;
            tc.kneg = kneg;
            tc.alpha = alpha;
            tc.seed = seed;
            std::vector<LabeledImage> train_set = read_dataset_dir(data_dir + "/train");
            std::vector<LabeledImage> test_set = read_dataset_dir(data_dir + "/test");
            if (train_set.empty()) throw DataError("no training images under '" + data_dir + "'");
            EncoderConfig enc;
            enc.height = train_set.front().pixels.shape[0];
            enc.width = train_set.front().pixels.shape[1];
            enc.channels = train_set.front().pixels.shape[2];
            TrainResult result = run_training(train_set, test_set, enc, tc);
            py::list log;
            for (const EpochLog& row : result.log) {
                py::dict e;
                e["epoch"] = row.epoch;
                e["total"] = row.loss.total;
                e["balance"] = row.loss.balance;
                e["train_accuracy"] = row.train_accuracy;
                e["test_accuracy"] = row.test_accuracy;
                log.append(e);
            }
            py::dict out;
            out["model"] = PyModel{std::move(result.model), tc};
            out["log"] = log;
            return out;
        },
        py::arg("data_dir"), py::arg("epochs") = 30, py::arg("batch_size") = 20, py::arg("kappa") = 2.0,
        py::arg("eta") = 1e-3, py::arg("lr_encoder") = 1e-4, py::arg("lr_shaping") = 3e-3,
        py::arg("lr_prototypes") = 1e-4, py::arg("lr_classifier") = 1e-4, py::arg("projection_period") = 10,
        py::arg("kpos") = 10, py::arg("kneg") = 4, py::arg("alpha") = 0.1, py::arg("seed") = 7);
}
