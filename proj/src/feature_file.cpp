#include "dune/feature_file.hpp"

#include <cstring>
#include <fstream>

namespace dune {

namespace {

constexpr char kMagic[8] = {'D', 'U', 'N', 'E', 'F', 'E', 'A', 'T'};

void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

void put_f32(std::ostream& os, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(os, bits);
}

std::uint32_t get_u32(std::istream& is, const std::string& path) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw IoError("truncated feature file: " + path);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

std::uint64_t get_u64(std::istream& is, const std::string& path) {
    unsigned char b[8];
    if (!is.read(reinterpret_cast<char*>(b), 8)) throw IoError("truncated feature file: " + path);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

float get_f32(std::istream& is, const std::string& path) {
    const std::uint32_t bits = get_u32(is, path);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

} // namespace

void FeatureFile::write(const std::string& path) const {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open for writing: " + path);
    os.write(kMagic, 8);
    put_u32(os, kVersion);
    put_u32(os, dim);
    put_u32(os, grid_h);
    put_u32(os, grid_w);
    put_u64(os, records.size());
    const std::size_t patch_count = static_cast<std::size_t>(grid_h) * grid_w;
    for (const FeatureRecord& r : records) {
        if (r.cls.size() != dim || r.patches.size() != patch_count * dim) {
            throw ContractError("feature record '" + r.image_id + "' does not match header dims");
        }
        put_u32(os, static_cast<std::uint32_t>(r.image_id.size()));
        os.write(r.image_id.data(), static_cast<std::streamsize>(r.image_id.size()));
        for (float v : r.cls) put_f32(os, v);
        for (float v : r.patches) put_f32(os, v);
    }
    if (!os) throw IoError("write failed: " + path);
}

FeatureFile FeatureFile::read(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    char magic[8];
    if (!is.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) {
        throw IoError("not a feature file (bad magic): " + path);
    }
    const std::uint32_t version = get_u32(is, path);
    if (version != kVersion) {
        throw IoError("unsupported feature file version " + std::to_string(version) + ": " + path);
    }
    FeatureFile f;
    f.dim = get_u32(is, path);
    f.grid_h = get_u32(is, path);
    f.grid_w = get_u32(is, path);
    const std::uint64_t count = get_u64(is, path);
    const std::size_t patch_count = static_cast<std::size_t>(f.grid_h) * f.grid_w;
    f.records.resize(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        FeatureRecord& r = f.records[i];
        const std::uint32_t len = get_u32(is, path);
        r.image_id.resize(len);
        if (len > 0 && !is.read(r.image_id.data(), len)) throw IoError("truncated feature file: " + path);
        r.cls.resize(f.dim);
        for (float& v : r.cls) v = get_f32(is, path);
        r.patches.resize(patch_count * f.dim);
        for (float& v : r.patches) v = get_f32(is, path);
    }
    f.rebuild_index();
    return f;
}

void FeatureFile::rebuild_index() {
    index_.clear();
    for (std::size_t i = 0; i < records.size(); ++i) index_[records[i].image_id] = i;
}

const FeatureRecord& FeatureFile::lookup(const std::string& image_id) const {
    auto it = index_.find(image_id);
    if (it == index_.end()) throw IoError("no stored features for image '" + image_id + "'");
    return records[it->second];
}

} // namespace dune
