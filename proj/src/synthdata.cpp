#include "feainf/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "feainf/rng.hpp"

namespace fs = std::filesystem;

namespace feainf {

void SynthConfig::validate() const {
    if (height < 8 || width < 8) throw DataError("synth image extents must be at least 8");
    if (channels != 1 && channels != 3) throw DataError("synth channels must be 1 or 3");
    if (train_count < 1 || test_count < 1) throw DataError("dataset counts must be >= 1");
    if (disease_fraction < 0.0 || disease_fraction > 1.0) throw DataError("disease fraction must be in [0,1]");
    if (lesion_radius_min < 1 || lesion_radius_max < lesion_radius_min)
        throw DataError("lesion radius range is empty");
    if (2 * lesion_radius_max + 4 > std::min(height, width))
        throw DataError("lesion radius does not fit the image");
    if (lesion_contrast <= 0.0) throw DataError("lesion contrast must be positive");
    if (noise < 0.0) throw DataError("noise must be non-negative");
}

namespace {

LabeledImage make_image(const SynthConfig& cfg, const std::string& id, int label, Rng& rng) {
    const int H = cfg.height, W = cfg.width, C = cfg.channels;
    LabeledImage img;
    img.id = id;
    img.label = label;
    img.pixels = Tensor({H, W, C});

    // Background: gentle plane gradient plus per-image brightness jitter.
    const double shift = rng.uniform(-0.05, 0.05);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const double base = 0.25 + 0.15 * (static_cast<double>(x) / (W - 1)) +
                                0.15 * (static_cast<double>(y) / (H - 1)) + shift;
            for (int c = 0; c < C; ++c) {
                double v = base + rng.uniform(-cfg.noise, cfg.noise);
                img.pixels.at3(y, x, c) = std::clamp(v, 0.0, 1.0);
            }
        }

    if (label == 1) {
        const int r = cfg.lesion_radius_min + rng.uniform_int(cfg.lesion_radius_max - cfg.lesion_radius_min + 1);
        const int cy = r + 2 + rng.uniform_int(H - 2 * (r + 2));
        const int cx = r + 2 + rng.uniform_int(W - 2 * (r + 2));
        img.gt_mask = Tensor({H, W});
        for (int y = cy - r; y <= cy + r; ++y)
            for (int x = cx - r; x <= cx + r; ++x) {
                const double d2 = static_cast<double>((y - cy) * (y - cy) + (x - cx) * (x - cx));
                if (d2 > static_cast<double>(r) * r) continue;
                img.gt_mask.at2(y, x) = 1.0;
                const double bump = cfg.lesion_contrast * (1.0 - 0.4 * d2 / (static_cast<double>(r) * r));
                for (int c = 0; c < C; ++c)
                    img.pixels.at3(y, x, c) = std::min(1.0, img.pixels.at3(y, x, c) + bump);
            }
    }
    return img;
}

std::vector<LabeledImage> make_split(const SynthConfig& cfg, const std::string& prefix, int count, Rng& rng) {
    std::vector<LabeledImage> out;
    out.reserve(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i) {
        // Interleaves labels evenly for any fraction.
        const int label = static_cast<int>(std::floor((i + 1) * cfg.disease_fraction) -
                                           std::floor(i * cfg.disease_fraction));
        char name[32];
        std::snprintf(name, sizeof(name), "%s-%04d", prefix.c_str(), i);
        out.push_back(make_image(cfg, name, label, rng));
    }
    return out;
}

} // namespace

Dataset generate_dataset(const SynthConfig& config) {
    config.validate();
    Rng rng(config.seed);
    Dataset d;
    d.train = make_split(config, "train", config.train_count, rng);
    d.test = make_split(config, "test", config.test_count, rng);
    return d;
}

// ---------------------------------------------------------------------------
// PGM / PPM codec

namespace {

// Reads one ASCII header token, skipping whitespace and '#' comment lines.
std::string next_token(std::istream& is) {
    std::string tok;
    int c;
    while ((c = is.get()) != EOF) {
        if (c == '#') {
            while ((c = is.get()) != EOF && c != '\n') {
            }
            continue;
        }
        if (!std::isspace(c)) {
            tok.push_back(static_cast<char>(c));
            break;
        }
    }
    while ((c = is.get()) != EOF && !std::isspace(c) && c != '#') tok.push_back(static_cast<char>(c));
    if (c == '#') is.unget();
    return tok;
}

int parse_dim(const std::string& tok, std::istream& is, const std::string& path, const char* what) {
    if (tok.empty())
        throw DataError(path + ": missing " + what + " at byte offset " + std::to_string(is.tellg()));
    try {
        return std::stoi(tok);
    } catch (...) {
        throw DataError(path + ": bad " + what + " '" + tok + "'");
    }
}

} // namespace

Tensor read_image(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open image '" + path + "'");

    const std::string magic = next_token(is);
    int channels;
    if (magic == "P5")
        channels = 1;
    else if (magic == "P6")
        channels = 3;
    else
        throw DataError(path + ": unsupported magic '" + magic + "' (want binary PGM/PPM)");

    const int width = parse_dim(next_token(is), is, path, "width");
    const int height = parse_dim(next_token(is), is, path, "height");
    const int maxval = parse_dim(next_token(is), is, path, "maxval");
    if (width < 1 || height < 1) throw DataError(path + ": non-positive image extents");
    if (maxval != 255) throw DataError(path + ": only maxval 255 is supported, got " + std::to_string(maxval));
    // The single whitespace byte after maxval was consumed by the tokenizer.

    const size_t expected = static_cast<size_t>(width) * height * channels;
    const std::streamoff payload_start = is.tellg();
    std::vector<unsigned char> bytes(expected);
    is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(expected));
    if (static_cast<size_t>(is.gcount()) != expected)
        throw DataError(path + ": truncated pixel data at byte offset " +
                        std::to_string(static_cast<long long>(payload_start + is.gcount())) + " (expected " +
                        std::to_string(expected) + " payload bytes)");

    Tensor t({height, width, channels});
    for (size_t i = 0; i < expected; ++i) t.data[i] = bytes[i] / 255.0;
    return t;
}

void write_image(const std::string& path, const Tensor& pixels) {
    if (pixels.rank() != 3 || (pixels.shape[2] != 1 && pixels.shape[2] != 3))
        throw DataError("write_image expects {H,W,1} or {H,W,3}, got " + shape_str(pixels.shape));
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open '" + path + "' for writing");
    const int H = pixels.shape[0], W = pixels.shape[1], C = pixels.shape[2];
    os << (C == 1 ? "P5" : "P6") << "\n" << W << " " << H << "\n255\n";
    std::vector<unsigned char> bytes(static_cast<size_t>(H) * W * C);
    for (size_t i = 0; i < bytes.size(); ++i) {
        const double v = std::clamp(pixels.data[i], 0.0, 1.0);
        bytes[i] = static_cast<unsigned char>(std::lround(v * 255.0));
    }
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw DataError("failed writing '" + path + "'");
}

void write_dataset_dir(const std::vector<LabeledImage>& images, const std::string& dir) {
    fs::create_directories(fs::path(dir) / "images");
    fs::create_directories(fs::path(dir) / "masks");
    std::ofstream labels(fs::path(dir) / "labels.csv");
    if (!labels) throw DataError("cannot write labels.csv under '" + dir + "'");
    labels << "id,label\n";
    const char* ext[2] = {".pgm", ".ppm"};
    for (const LabeledImage& img : images) {
        const char* e = ext[img.pixels.shape[2] == 3 ? 1 : 0];
        write_image((fs::path(dir) / "images" / (img.id + e)).string(), img.pixels);
        if (img.label == 1 && img.gt_mask.numel() > 0) {
            Tensor m({img.gt_mask.shape[0], img.gt_mask.shape[1], 1});
            for (int i = 0; i < m.numel(); ++i) m[i] = img.gt_mask[i];
            write_image((fs::path(dir) / "masks" / (img.id + ".pgm")).string(), m);
        }
        labels << img.id << "," << img.label << "\n";
    }
}

std::vector<LabeledImage> read_dataset_dir(const std::string& dir) {
    std::ifstream labels(fs::path(dir) / "labels.csv");
    if (!labels) throw DataError("missing labels.csv under '" + dir + "'");
    std::vector<LabeledImage> out;
    std::string line;
    while (std::getline(labels, line)) {
        if (line.empty() || line == "id,label") continue;
        const size_t comma = line.find(',');
        if (comma == std::string::npos) throw DataError(dir + "/labels.csv: malformed row '" + line + "'");
        LabeledImage img;
        img.id = line.substr(0, comma);
        img.label = std::stoi(line.substr(comma + 1));

        fs::path pgm = fs::path(dir) / "images" / (img.id + ".pgm");
        fs::path ppm = fs::path(dir) / "images" / (img.id + ".ppm");
        img.pixels = read_image(fs::exists(pgm) ? pgm.string() : ppm.string());

        fs::path mask = fs::path(dir) / "masks" / (img.id + ".pgm");
        if (img.label == 1 && fs::exists(mask)) {
            Tensor m = read_image(mask.string());
            img.gt_mask = Tensor({m.shape[0], m.shape[1]});
            for (int i = 0; i < img.gt_mask.numel(); ++i) img.gt_mask[i] = m.data[static_cast<size_t>(i)] >= 0.5 ? 1.0 : 0.0;
        }
        out.push_back(std::move(img));
    }
    return out;
}

} // namespace feainf
