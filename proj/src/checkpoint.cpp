#include "feainf/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

namespace feainf {

namespace {

template <typename T>
void put(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw DataError("checkpoint truncated");
    return v;
}

void put_string(std::ostream& os, const std::string& s) {
    put<uint32_t>(os, static_cast<uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& is) {
    uint32_t len = get<uint32_t>(is);
    if (len > (1u << 20)) throw DataError("checkpoint string length out of range");
    std::string s(len, '\0');
    is.read(s.data(), len);
    if (!is) throw DataError("checkpoint truncated");
    return s;
}

void put_section(std::ostream& os, const std::string& name, const std::string& payload) {
    put_string(os, name);
    put<uint64_t>(os, payload.size());
    os.write(payload.data(), static_cast<std::streamsize>(payload.size()));
}

void put_sources(std::ostream& os, const std::vector<PrototypeSource>& sources) {
    put<uint32_t>(os, static_cast<uint32_t>(sources.size()));
    for (const PrototypeSource& s : sources) {
        put<uint8_t>(os, s.projected ? 1 : 0);
        put_string(os, s.image_id);
        put<int32_t>(os, s.region);
    }
}

std::vector<PrototypeSource> get_sources(std::istream& is) {
    uint32_t count = get<uint32_t>(is);
    std::vector<PrototypeSource> out(count);
    for (uint32_t i = 0; i < count; ++i) {
        out[i].projected = get<uint8_t>(is) != 0;
        out[i].image_id = get_string(is);
        out[i].region = get<int32_t>(is);
    }
    return out;
}

} // namespace

void save_checkpoint(const std::string& path, const ModelState& model, const TrainConfig& train_config) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open checkpoint '" + path + "' for writing");
    os.write("FEIN", 4);
    put<uint32_t>(os, kCheckpointVersion);

    {
        std::ostringstream s;
        const EncoderConfig& c = model.encoder_config;
        put<uint32_t>(s, static_cast<uint32_t>(c.height));
        put<uint32_t>(s, static_cast<uint32_t>(c.width));
        put<uint32_t>(s, static_cast<uint32_t>(c.channels));
        put<uint32_t>(s, static_cast<uint32_t>(c.convs.size()));
        for (const ConvSpec& cv : c.convs) {
            put<uint32_t>(s, static_cast<uint32_t>(cv.kernel));
            put<uint32_t>(s, static_cast<uint32_t>(cv.stride));
            put<uint32_t>(s, static_cast<uint32_t>(cv.pad));
            put<uint32_t>(s, static_cast<uint32_t>(cv.out_channels));
        }
        put<uint32_t>(s, static_cast<uint32_t>(c.feature_channels));
        put_section(os, "encoder_config", s.str());
    }
    {
        std::ostringstream s;
        put<uint32_t>(s, static_cast<uint32_t>(model.encoder.tensors.size()));
        for (const auto& [name, tensor] : model.encoder.tensors) {
            put_string(s, name);
            write_tensor(s, tensor);
        }
        put_section(os, "encoder_params", s.str());
    }
    {
        std::ostringstream s;
        const MaskBank& b = model.masks;
        put<uint32_t>(s, static_cast<uint32_t>(b.h1));
        put<uint32_t>(s, static_cast<uint32_t>(b.w1));
        put<uint32_t>(s, static_cast<uint32_t>(b.c1));
        put<double>(s, b.alpha);
        put<uint64_t>(s, b.seed);
        put<uint32_t>(s, static_cast<uint32_t>(b.masks.size()));
        for (const Tensor& m : b.masks) write_tensor(s, m);
        put_section(os, "mask_bank", s.str());
    }
    {
        std::ostringstream s;
        put<uint32_t>(s, static_cast<uint32_t>(model.prototypes.kpos));
        put<uint32_t>(s, static_cast<uint32_t>(model.prototypes.kneg));
        write_tensor(s, model.prototypes.pos);
        write_tensor(s, model.prototypes.neg);
        put_sources(s, model.prototypes.pos_sources);
        put_sources(s, model.prototypes.neg_sources);
        put_section(os, "prototypes", s.str());
    }
    {
        std::ostringstream s;
        write_tensor(s, model.weights.pos);
        write_tensor(s, model.weights.neg);
        put_section(os, "classifier", s.str());
    }
    {
        std::ostringstream s;
        const TrainConfig& t = train_config;
        put<double>(s, t.kappa);
        put<double>(s, t.eta1);
        put<double>(s, t.eta2);
        put<double>(s, t.eta3);
        put<double>(s, t.eta4);
        put<double>(s, t.lr_encoder);
        put<double>(s, t.lr_shaping);
        put<double>(s, t.lr_prototypes);
        put<double>(s, t.lr_classifier);
        put<double>(s, t.alpha);
        put<uint32_t>(s, static_cast<uint32_t>(t.batch_size));
        put<uint32_t>(s, static_cast<uint32_t>(t.epochs));
        put<uint32_t>(s, static_cast<uint32_t>(t.projection_period));
        put<uint32_t>(s, static_cast<uint32_t>(t.kpos));
        put<uint32_t>(s, static_cast<uint32_t>(t.kneg));
        put<uint64_t>(s, t.seed);
        put_section(os, "train_config", s.str());
    }
    {
        std::ostringstream s;
        put<uint64_t>(s, model.seed);
        put_section(os, "rng", s.str());
    }
    if (!os) throw DataError("failed writing checkpoint '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open checkpoint '" + path + "'");
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "FEIN", 4) != 0)
        throw DataError("'" + path + "' is not a checkpoint (bad magic)");
    const uint32_t version = get<uint32_t>(is);
    if (version != kCheckpointVersion)
        throw DataError("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                        std::to_string(kCheckpointVersion) + ")");

    Checkpoint cp;
    bool have_encoder_config = false, have_encoder = false, have_masks = false, have_protos = false,
         have_classifier = false;

    while (is.peek() != EOF) {
        const std::string name = get_string(is);
        const uint64_t len = get<uint64_t>(is);
        std::string payload(len, '\0');
        is.read(payload.data(), static_cast<std::streamsize>(len));
        if (!is) throw DataError("checkpoint section '" + name + "' truncated");
        std::istringstream s(payload);

        if (name == "encoder_config") {
            EncoderConfig& c = cp.model.encoder_config;
            c.height = static_cast<int>(get<uint32_t>(s));
            c.width = static_cast<int>(get<uint32_t>(s));
            c.channels = static_cast<int>(get<uint32_t>(s));
            c.convs.resize(get<uint32_t>(s));
            for (ConvSpec& cv : c.convs) {
                cv.kernel = static_cast<int>(get<uint32_t>(s));
                cv.stride = static_cast<int>(get<uint32_t>(s));
                cv.pad = static_cast<int>(get<uint32_t>(s));
                cv.out_channels = static_cast<int>(get<uint32_t>(s));
            }
            c.feature_channels = static_cast<int>(get<uint32_t>(s));
            have_encoder_config = true;
        } else if (name == "encoder_params") {
            const uint32_t count = get<uint32_t>(s);
            for (uint32_t i = 0; i < count; ++i) {
                std::string pname = get_string(s);
                cp.model.encoder.tensors[pname] = read_tensor(s);
            }
            have_encoder = true;
        } else if (name == "mask_bank") {
            MaskBank& b = cp.model.masks;
            b.h1 = static_cast<int>(get<uint32_t>(s));
            b.w1 = static_cast<int>(get<uint32_t>(s));
            b.c1 = static_cast<int>(get<uint32_t>(s));
            b.alpha = get<double>(s);
            b.seed = get<uint64_t>(s);
            const uint32_t count = get<uint32_t>(s);
            b.masks.clear();
            for (uint32_t i = 0; i < count; ++i) b.masks.push_back(read_tensor(s));
            have_masks = true;
        } else if (name == "prototypes") {
            cp.model.prototypes.kpos = static_cast<int>(get<uint32_t>(s));
            cp.model.prototypes.kneg = static_cast<int>(get<uint32_t>(s));
            cp.model.prototypes.pos = read_tensor(s);
            cp.model.prototypes.neg = read_tensor(s);
            cp.model.prototypes.pos_sources = get_sources(s);
            cp.model.prototypes.neg_sources = get_sources(s);
            have_protos = true;
        } else if (name == "classifier") {
            cp.model.weights.pos = read_tensor(s);
            cp.model.weights.neg = read_tensor(s);
            have_classifier = true;
        } else if (name == "train_config") {
            TrainConfig& t = cp.train_config;
            t.kappa = get<double>(s);
            t.eta1 = get<double>(s);
            t.eta2 = get<double>(s);
            t.eta3 = get<double>(s);
            t.eta4 = get<double>(s);
            t.lr_encoder = get<double>(s);
            t.lr_shaping = get<double>(s);
            t.lr_prototypes = get<double>(s);
            t.lr_classifier = get<double>(s);
            t.alpha = get<double>(s);
            t.batch_size = static_cast<int>(get<uint32_t>(s));
            t.epochs = static_cast<int>(get<uint32_t>(s));
            t.projection_period = static_cast<int>(get<uint32_t>(s));
            t.kpos = static_cast<int>(get<uint32_t>(s));
            t.kneg = static_cast<int>(get<uint32_t>(s));
            t.seed = get<uint64_t>(s);
        } else if (name == "rng") {
            cp.model.seed = get<uint64_t>(s);
        }
        // other sections: written by a newer tool, skipped
    }

    if (!have_encoder_config || !have_encoder || !have_masks || !have_protos || !have_classifier)
        throw DataError("checkpoint '" + path + "' is missing required sections");
    return cp;
}

} // namespace feainf
