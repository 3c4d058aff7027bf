#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "feainf/tensor.hpp"

namespace feainf {

/// Synthetic lesion dataset. Normal images carry a smooth position-dependent
/// background (so normal appearance differs by region); disease images add one
/// bright blob whose support is the ground-truth mask.
struct SynthConfig {
    int height = 64;
    int width = 64;
    int channels = 1;
    int train_count = 200;
    int test_count = 100;
    double disease_fraction = 0.5;
    int lesion_radius_min = 5;
    int lesion_radius_max = 9;
    double lesion_contrast = 0.55; // peak brightness added at the blob center
    double noise = 0.02;
    uint64_t seed = 1;

    void validate() const;
};

struct LabeledImage {
    std::string id;
    Tensor pixels;  // {H,W,C} in [0,1]
    int label = 0;  // 1 = disease
    Tensor gt_mask; // {H,W} binary; empty tensor when label = 0
};

struct Dataset {
    std::vector<LabeledImage> train, test;
};

/// Pure function of the config; train/test ids are disjoint by prefix.
Dataset generate_dataset(const SynthConfig& config);

/// Binary PGM (P5) / PPM (P6) with maxval 255. Values map to [0,1].
Tensor read_image(const std::string& path);
void write_image(const std::string& path, const Tensor& pixels);

/// Directory layout: images/<id>.pgm, masks/<id>.pgm (disease only),
/// labels.csv with "id,label" rows.
void write_dataset_dir(const std::vector<LabeledImage>& images, const std::string& dir);
std::vector<LabeledImage> read_dataset_dir(const std::string& dir);

} // namespace feainf
