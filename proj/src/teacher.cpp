#include "dune/teacher.hpp"

#include <cstring>

namespace dune {

TeacherSpec build_synthetic_teacher(const std::string& id, std::uint64_t seed, const ViTConfig& cfg) {
    cfg.validate();
    TeacherSpec spec;
    spec.id = id;
    spec.seed = seed;
    spec.config = cfg;
    spec.out_dim = cfg.dim;
    Rng stream = make_stream(seed, "init/teacher");
    spec.params = std::make_shared<const ViTParams>(init_vit(cfg, stream));
    return spec;
}

TeacherSpec build_file_teacher(const std::string& id, const std::string& feature_path) {
    TeacherSpec spec;
    spec.id = id;
    spec.from_file = true;
    spec.feature_path = feature_path;
    auto f = std::make_shared<FeatureFile>(FeatureFile::read(feature_path));
    spec.out_dim = f->dim;
    spec.features = std::move(f);
    return spec;
}

TokenSet teacher_forward(const TeacherSpec& spec, const SampleMeta& sample) {
    NoGradScope frozen;
    if (spec.from_file) {
        const FeatureRecord& r = spec.features->lookup(sample.image_id);
        const std::size_t d = spec.features->dim;
        const std::size_t hw = static_cast<std::size_t>(spec.features->grid_h) * spec.features->grid_w;
        std::vector<double> vals((hw + 1) * d);
        for (std::size_t j = 0; j < d; ++j) vals[j] = static_cast<double>(r.cls[j]);
        for (std::size_t i = 0; i < hw * d; ++i) vals[d + i] = static_cast<double>(r.patches[i]);
        TokenSet z;
        z.tokens = Tensor::from_values({hw + 1, d}, std::move(vals));
        z.grid_h = spec.features->grid_h;
        z.grid_w = spec.features->grid_w;
        return z;
    }
    TokenSet embedded = patch_embed(sample.pixels, *spec.params);
    return encoder_forward(embedded, *spec.params, false).output;
}

TokenSet align_token_grid(const TokenSet& t, std::size_t h, std::size_t w) {
    if (h == 0 || w == 0) throw ContractError("align_token_grid: empty target grid");
    if (t.grid_h == h && t.grid_w == w) return t;
    Tensor cls_row = slice_rows(t.tokens, 0, 1);
    Tensor grid = slice_rows(t.tokens, 1, t.count() - 1);
    Tensor resized = resize_bilinear_grid(grid, t.grid_h, t.grid_w, h, w);
    TokenSet out;
    out.tokens = concat_rows({cls_row, resized});
    out.grid_h = h;
    out.grid_w = w;
    return out;
}

std::uint64_t params_checksum(const std::vector<std::pair<std::string, Tensor>>& params) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    auto mix_bytes = [&h](const void* p, std::size_t n) {
        const unsigned char* b = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 0x100000001b3ull;
        }
    };
    for (const auto& [name, t] : params) {
        mix_bytes(name.data(), name.size());
        mix_bytes(t.values().data(), t.values().size() * sizeof(double));
    }
    return h;
}

} // namespace dune
