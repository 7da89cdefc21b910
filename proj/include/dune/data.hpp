#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dune/tensor.hpp"

namespace dune {

enum class SynthStyle { Noise, Gradients, Blobs, Stripes };

std::string to_string(SynthStyle s);
SynthStyle synth_style_from_string(const std::string& s); // throws ConfigError

// Owner "generic" marks web-style data shared under the generic strategy;
// any other owner must be a declared teacher id.
struct DatasetManifest {
    std::string id;
    std::string owner;
    bool synthetic = true;
    SynthStyle style = SynthStyle::Noise;
    std::size_t count = 0;
    std::uint64_t seed = 0;
    std::string dir;  // directory source
    std::string glob; // e.g. "*.ppm"
    std::size_t image_size = 0;
    std::size_t channels = 3;
};

struct SampleMeta {
    std::string image_id;
    std::string dataset_id;
    Tensor pixels; // [C x S x S], values in [0, 1]
};

// Validated dataset registry. Group = all datasets with the same owner;
// group order is teacher declaration order, generic last.
class DatasetRegistry {
public:
    DatasetRegistry() = default;

    const std::vector<DatasetManifest>& manifests() const { return manifests_; }
    bool has(const std::string& id) const;
    const DatasetManifest& find(const std::string& id) const; // ConfigError when unknown

    const std::vector<std::string>& group_order() const { return group_order_; }
    const std::vector<std::string>& group(const std::string& owner) const;
    std::vector<std::string> generic_ids() const;

    // files of a directory dataset, sorted; empty for synthetic
    const std::vector<std::string>& files(const std::string& id) const;

    friend DatasetRegistry load_registry(const std::vector<DatasetManifest>& manifests,
                                         const std::vector<std::string>& teacher_ids);

private:
    std::vector<DatasetManifest> manifests_;
    std::vector<std::string> group_order_;
    std::vector<std::pair<std::string, std::vector<std::string>>> groups_; // owner -> dataset ids
    std::vector<std::pair<std::string, std::vector<std::string>>> files_;  // dataset id -> paths
};

// Validates uniqueness, ownership and non-empty groups; scans directory
// datasets. Throws ConfigError naming the offending id.
DatasetRegistry load_registry(const std::vector<DatasetManifest>& manifests,
                              const std::vector<std::string>& teacher_ids);

// Deterministic procedural image for (style, seed); values in [0, 1]. The
// four styles have separated channel-mean signatures to emulate domain shift.
Tensor synth_image(SynthStyle style, std::uint64_t seed, std::size_t size, std::size_t channels);

// Fetch one sample by position; synthetic images are generated on the fly.
SampleMeta fetch_sample(const DatasetRegistry& registry, const std::string& dataset_id,
                        std::size_t index);

// Balanced batch: exactly k samples per group, dataset chosen uniformly
// within the group, then image uniformly within the dataset. Sample order is
// group-major in group_order().
std::vector<SampleMeta> compose_batch(const DatasetRegistry& registry, std::size_t k, Rng& rng);

// Minimal uncompressed image I/O: binary PGM (P5) and PPM (P6), maxval 255.
Tensor read_pnm(const std::string& path);
void write_pnm(const std::string& path, const Tensor& image);

} // namespace dune
