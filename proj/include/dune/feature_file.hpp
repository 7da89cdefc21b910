#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "dune/error.hpp"

namespace dune {

// One encoder output: a CLS vector plus an H x W grid of patch vectors,
// stored at 32-bit precision.
struct FeatureRecord {
    std::string image_id;
    std::vector<float> cls;     // dim values
    std::vector<float> patches; // H*W*dim values, row-major grid
};

// Binary feature container. Layout (little-endian):
//   magic "DUNEFEAT" (8 bytes), version u32, dim u32, grid_h u32, grid_w u32,
//   count u64, then per record: id length u32 + UTF-8 bytes,
//   cls dim*f32, patches grid_h*grid_w*dim*f32.
struct FeatureFile {
    static constexpr std::uint32_t kVersion = 1;

    std::uint32_t dim = 0;
    std::uint32_t grid_h = 0;
    std::uint32_t grid_w = 0;
    std::vector<FeatureRecord> records;

    void write(const std::string& path) const;
    static FeatureFile read(const std::string& path);

    // index by image id; built lazily after read/append
    void rebuild_index();
    const FeatureRecord& lookup(const std::string& image_id) const; // IoError when absent

private:
    std::unordered_map<std::string, std::size_t> index_;
};

} // namespace dune
