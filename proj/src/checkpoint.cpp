#include "crayonbox/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <map>

#include "crayonbox/errors.hpp"

namespace crayonbox {

namespace {

constexpr char kMagic[4] = {'C', 'R', 'Y', 'N'};
constexpr uint32_t kVersion = 1;

void put(std::ostream& out, const void* data, size_t n) {
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
}
template <typename T>
void put_pod(std::ostream& out, T v) {
    put(out, &v, sizeof(T));
}
void put_string(std::ostream& out, const std::string& s) {
    put_pod<uint16_t>(out, static_cast<uint16_t>(s.size()));
    put(out, s.data(), s.size());
}

void get(std::istream& in, void* data, size_t n) {
    in.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
    if (static_cast<size_t>(in.gcount()) != n)
        throw ArtifactError("checkpoint truncated");
}
template <typename T>
T get_pod(std::istream& in) {
    T v;
    get(in, &v, sizeof(T));
    return v;
}
std::string get_string(std::istream& in) {
    const uint16_t n = get_pod<uint16_t>(in);
    std::string s(n, '\0');
    get(in, s.data(), n);
    return s;
}

void put_shape(std::ostream& out, const std::vector<int>& shape) {
    put_pod<uint8_t>(out, static_cast<uint8_t>(shape.size()));
    for (int d : shape) put_pod<int32_t>(out, d);
}
std::vector<int> get_shape(std::istream& in) {
    const uint8_t ndim = get_pod<uint8_t>(in);
    std::vector<int> shape(ndim);
    for (auto& d : shape) d = get_pod<int32_t>(in);
    return shape;
}

}  // namespace

void save_checkpoint(Model& model, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ArtifactError("cannot write checkpoint: " + path);
    put(out, kMagic, 4);
    put_pod<uint32_t>(out, kVersion);

    const ModelConfig& cfg = model.config();
    for (int v : {cfg.d_model, cfg.n_layers, cfg.n_heads, cfg.patch_h, cfg.patch_w,
                  cfg.connector_d, cfg.connector_hidden, cfg.max_seq, cfg.img_size})
        put_pod<int32_t>(out, v);
    put_pod<float>(out, cfg.init_std);
    put_pod<float>(out, cfg.unembed_std);

    put_pod<uint8_t>(out, model.crayon_on ? 1 : 0);
    put_pod<uint8_t>(out, model.crayon_flags.sem_query ? 1 : 0);
    put_pod<uint8_t>(out, model.crayon_flags.num_query ? 1 : 0);
    put_pod<uint8_t>(out, model.backbone_quantized() ? 1 : 0);
    if (model.backbone_quantized()) {
        const auto& ad = model.blocks()[0].qq->image;
        const int rank = ad.a.dim(0);
        put_pod<int32_t>(out, rank);
        put_pod<float>(out, ad.scale * static_cast<float>(rank));
        put_pod<uint8_t>(out, model.blocks()[0].qq->dual ? 1 : 0);
        put_pod<uint8_t>(out, static_cast<uint8_t>(model.mode()));
    }

    auto params = model.named_params();
    put_pod<uint32_t>(out, static_cast<uint32_t>(params.size()));
    for (auto& [name, t] : params) {
        put_string(out, name);
        put_shape(out, t.shape());
        put(out, t.data().data(), t.numel() * sizeof(float));
    }

    if (model.backbone_quantized()) {
        auto sections = model.quantized_sections();
        put_pod<uint32_t>(out, static_cast<uint32_t>(sections.size()));
        for (const auto& [name, q] : sections) {
            put_string(out, name);
            put_shape(out, q->shape);
            put_pod<uint64_t>(out, q->packed.size());
            put(out, q->packed.data(), q->packed.size());
            put_pod<uint64_t>(out, q->absmax_codes.size());
            put(out, q->absmax_codes.data(), q->absmax_codes.size());
            put_pod<uint32_t>(out, static_cast<uint32_t>(q->group_scale.size()));
            put(out, q->group_scale.data(), q->group_scale.size() * sizeof(float));
            put_pod<uint32_t>(out, static_cast<uint32_t>(q->group_offset.size()));
            put(out, q->group_offset.data(), q->group_offset.size() * sizeof(float));
            put_pod<float>(out, q->max_absmax_error);
        }
    }
    if (!out) throw ArtifactError("checkpoint write failed: " + path);
}

Model load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ArtifactError("cannot read checkpoint: " + path);
    char magic[4];
    get(in, magic, 4);
    if (std::memcmp(magic, kMagic, 4) != 0)
        throw ArtifactError("not a checkpoint file: " + path);
    const uint32_t version = get_pod<uint32_t>(in);
    if (version != kVersion)
        throw ArtifactError("unsupported checkpoint version " + std::to_string(version));

    ModelConfig cfg;
    cfg.d_model = get_pod<int32_t>(in);
    cfg.n_layers = get_pod<int32_t>(in);
    cfg.n_heads = get_pod<int32_t>(in);
    cfg.patch_h = get_pod<int32_t>(in);
    cfg.patch_w = get_pod<int32_t>(in);
    cfg.connector_d = get_pod<int32_t>(in);
    cfg.connector_hidden = get_pod<int32_t>(in);
    cfg.max_seq = get_pod<int32_t>(in);
    cfg.img_size = get_pod<int32_t>(in);
    cfg.init_std = get_pod<float>(in);
    cfg.unembed_std = get_pod<float>(in);

    Model model = Model::init(cfg, 0);
    model.crayon_on = get_pod<uint8_t>(in) != 0;
    model.crayon_flags.sem_query = get_pod<uint8_t>(in) != 0;
    model.crayon_flags.num_query = get_pod<uint8_t>(in) != 0;
    const bool quantized = get_pod<uint8_t>(in) != 0;
    CitMode mode = CitMode::InferenceBoth;
    if (quantized) {
        const int rank = get_pod<int32_t>(in);
        const float alpha = get_pod<float>(in);
        const bool dual = get_pod<uint8_t>(in) != 0;
        mode = static_cast<CitMode>(get_pod<uint8_t>(in));
        model.quantize_backbone(rank, alpha, 0, dual);
    }

    auto params = model.named_params();
    std::map<std::string, Tensor> by_name;
    for (auto& [name, t] : params) by_name.emplace(name, t);
    const uint32_t n_tensors = get_pod<uint32_t>(in);
    if (n_tensors != params.size())
        throw ArtifactError("checkpoint tensor count mismatch");
    for (uint32_t i = 0; i < n_tensors; ++i) {
        const std::string name = get_string(in);
        const std::vector<int> shape = get_shape(in);
        auto it = by_name.find(name);
        if (it == by_name.end())
            throw ArtifactError("checkpoint tensor missing from model: " + name);
        if (shape != it->second.shape())
            throw ArtifactError("checkpoint shape mismatch for " + name);
        get(in, it->second.data().data(), it->second.numel() * sizeof(float));
    }

    if (quantized) {
        std::map<std::string, QLoraLinear*> sections;
        for (size_t l = 0; l < model.blocks().size(); ++l) {
            auto& blk = model.blocks()[l];
            const std::string p = "layer" + std::to_string(l) + ".";
            sections[p + "wq"] = &*blk.qq;
            sections[p + "wk"] = &*blk.qk;
            sections[p + "wv"] = &*blk.qv;
            sections[p + "wo"] = &*blk.qo;
        }
        const uint32_t n_sections = get_pod<uint32_t>(in);
        if (n_sections != sections.size())
            throw ArtifactError("checkpoint quantized section count mismatch");
        for (uint32_t i = 0; i < n_sections; ++i) {
            const std::string name = get_string(in);
            auto it = sections.find(name);
            if (it == sections.end())
                throw ArtifactError("unknown quantized section: " + name);
            QuantizedLinear& q = it->second->base;
            q.shape = get_shape(in);
            q.packed.resize(get_pod<uint64_t>(in));
            get(in, q.packed.data(), q.packed.size());
            q.absmax_codes.resize(get_pod<uint64_t>(in));
            get(in, q.absmax_codes.data(), q.absmax_codes.size());
            q.group_scale.resize(get_pod<uint32_t>(in));
            get(in, q.group_scale.data(), q.group_scale.size() * sizeof(float));
            q.group_offset.resize(get_pod<uint32_t>(in));
            get(in, q.group_offset.data(), q.group_offset.size() * sizeof(float));
            q.max_absmax_error = get_pod<float>(in);
            it->second->base_dequant = dequantize(q);
            it->second->base_dequant.set_requires_grad(false);
        }
        model.set_mode(mode);
    }
    return model;
}

}  // namespace crayonbox
