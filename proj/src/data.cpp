#include "dune/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

namespace dune {

std::string to_string(SynthStyle s) {
    switch (s) {
    case SynthStyle::Noise: return "noise";
    case SynthStyle::Gradients: return "gradients";
    case SynthStyle::Blobs: return "blobs";
    case SynthStyle::Stripes: return "stripes";
    }
    return "?";
}

SynthStyle synth_style_from_string(const std::string& s) {
    if (s == "noise") return SynthStyle::Noise;
    if (s == "gradients") return SynthStyle::Gradients;
    if (s == "blobs") return SynthStyle::Blobs;
    if (s == "stripes") return SynthStyle::Stripes;
    throw ConfigError("unknown synthetic style '" + s + "' (expected noise, gradients, blobs or stripes)");
}

// --- registry ----------------------------------------------------------------

namespace {

// minimal glob: '*' matches any run, '?' matches one character
bool glob_match(const std::string& pattern, const std::string& name) {
    std::size_t p = 0, n = 0, star = std::string::npos, star_n = 0;
    while (n < name.size()) {
        if (p < pattern.size() && (pattern[p] == '?' || pattern[p] == name[n])) {
            ++p;
            ++n;
        } else if (p < pattern.size() && pattern[p] == '*') {
            star = p++;
            star_n = n;
        } else if (star != std::string::npos) {
            p = star + 1;
            n = ++star_n;
        } else {
            return false;
        }
    }
    while (p < pattern.size() && pattern[p] == '*') ++p;
    return p == pattern.size();
}

} // namespace

bool DatasetRegistry::has(const std::string& id) const {
    for (const auto& m : manifests_)
        if (m.id == id) return true;
    return false;
}

const DatasetManifest& DatasetRegistry::find(const std::string& id) const {
    for (const auto& m : manifests_)
        if (m.id == id) return m;
    throw ConfigError("unknown dataset id '" + id + "'");
}

const std::vector<std::string>& DatasetRegistry::group(const std::string& owner) const {
    for (const auto& [o, ids] : groups_)
        if (o == owner) return ids;
    throw ConfigError("unknown dataset group owner '" + owner + "'");
}

std::vector<std::string> DatasetRegistry::generic_ids() const {
    for (const auto& [o, ids] : groups_)
        if (o == "generic") return ids;
    return {};
}

const std::vector<std::string>& DatasetRegistry::files(const std::string& id) const {
    for (const auto& [d, paths] : files_)
        if (d == id) return paths;
    throw ConfigError("unknown dataset id '" + id + "'");
}

DatasetRegistry load_registry(const std::vector<DatasetManifest>& manifests,
                              const std::vector<std::string>& teacher_ids) {
    if (manifests.empty()) throw ConfigError("dataset registry is empty");
    DatasetRegistry reg;
    std::set<std::string> seen;
    for (const DatasetManifest& m : manifests) {
        if (!seen.insert(m.id).second) throw ConfigError("duplicate dataset id '" + m.id + "'");
        const bool owner_known =
            m.owner == "generic" ||
            std::find(teacher_ids.begin(), teacher_ids.end(), m.owner) != teacher_ids.end();
        if (!owner_known) {
            throw ConfigError("dataset '" + m.id + "' has unknown owner '" + m.owner + "'");
        }
        if (m.image_size == 0) throw ConfigError("dataset '" + m.id + "' has no image size");
        if (m.synthetic && m.count == 0) {
            throw ConfigError("synthetic dataset '" + m.id + "' has zero images");
        }
        reg.manifests_.push_back(m);
    }
    // groups in teacher order, generic last
    for (const std::string& t : teacher_ids) {
        std::vector<std::string> ids;
        for (const auto& m : reg.manifests_)
            if (m.owner == t) ids.push_back(m.id);
        if (ids.empty()) throw ConfigError("teacher '" + t + "' owns no dataset");
        reg.groups_.emplace_back(t, std::move(ids));
        reg.group_order_.push_back(t);
    }
    std::vector<std::string> generic;
    for (const auto& m : reg.manifests_)
        if (m.owner == "generic") generic.push_back(m.id);
    if (!generic.empty()) {
        reg.groups_.emplace_back("generic", std::move(generic));
        reg.group_order_.push_back("generic");
    }
    // scan directory datasets
    for (auto& m : reg.manifests_) {
        std::vector<std::string> paths;
        if (!m.synthetic) {
            namespace fs = std::filesystem;
            if (!fs::is_directory(m.dir)) {
                throw ConfigError("dataset '" + m.id + "': directory not found: " + m.dir);
            }
            const std::string pattern = m.glob.empty() ? "*" : m.glob;
            for (const auto& e : fs::directory_iterator(m.dir)) {
                if (e.is_regular_file() && glob_match(pattern, e.path().filename().string())) {
                    paths.push_back(e.path().string());
                }
            }
            std::sort(paths.begin(), paths.end());
            if (paths.empty()) {
                throw ConfigError("dataset '" + m.id + "': no files match '" + pattern + "' in " + m.dir);
            }
            m.count = paths.size();
        }
        reg.files_.emplace_back(m.id, std::move(paths));
    }
    return reg;
}

// --- synthetic images ---------------------------------------------------------

namespace {

inline double clamp01(double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); }

} // namespace

Tensor synth_image(SynthStyle style, std::uint64_t seed, std::size_t size, std::size_t channels) {
    Rng rng(seed);
    Tensor img = Tensor::zeros({channels, size, size});
    double* px = img.values().data();
    const double s = static_cast<double>(size);
    // small fixed per-channel offsets keep channels distinguishable without
    // moving the style's mean anchor
    auto choff = [](std::size_t c) { return 0.01 * static_cast<double>(c); };

    switch (style) {
    case SynthStyle::Noise: {
        // anchor: mean 0.50
        for (std::size_t c = 0; c < channels; ++c)
            for (std::size_t i = 0; i < size * size; ++i)
                px[c * size * size + i] = clamp01(rng.uniform(0.25, 0.75) + choff(c));
        break;
    }
    case SynthStyle::Gradients: {
        // anchor: ramp 0.20 -> 0.50 along a random direction; centering the
        // projection on the image midpoint keeps the mean at 0.35 whatever
        // the direction
        const double theta = rng.uniform(0.0, 6.283185307179586);
        const double dx = std::cos(theta), dy = std::sin(theta);
        const double mid = 0.5 * (s - 1.0);
        for (std::size_t c = 0; c < channels; ++c)
            for (std::size_t y = 0; y < size; ++y)
                for (std::size_t x = 0; x < size; ++x) {
                    const double proj = ((static_cast<double>(x) - mid) * dx +
                                         (static_cast<double>(y) - mid) * dy) / s;
                    const double t = 0.5 * (proj + 1.0); // [0,1] for unit directions
                    px[(c * size + y) * size + x] = clamp01(0.20 + 0.30 * t + choff(c));
                }
        break;
    }
    case SynthStyle::Blobs: {
        // anchor: dark field 0.08 plus two gaussian bumps, mean ~0.18
        const std::size_t bumps = 2;
        std::vector<double> cx(bumps), cy(bumps);
        for (std::size_t b = 0; b < bumps; ++b) {
            cx[b] = rng.uniform(0.2, 0.8) * s;
            cy[b] = rng.uniform(0.2, 0.8) * s;
        }
        const double sigma = s / 8.0;
        for (std::size_t c = 0; c < channels; ++c)
            for (std::size_t y = 0; y < size; ++y)
                for (std::size_t x = 0; x < size; ++x) {
                    double v = 0.08 + choff(c);
                    for (std::size_t b = 0; b < bumps; ++b) {
                        const double ddx = static_cast<double>(x) - cx[b];
                        const double ddy = static_cast<double>(y) - cy[b];
                        v += 0.50 * std::exp(-(ddx * ddx + ddy * ddy) / (2.0 * sigma * sigma));
                    }
                    px[(c * size + y) * size + x] = clamp01(v);
                }
        break;
    }
    case SynthStyle::Stripes: {
        // anchor: bright field 0.72 with a sinusoidal weave, mean ~0.72
        const double theta = rng.uniform(0.0, 6.283185307179586);
        const double freq = 2.0 + std::floor(rng.uniform(0.0, 3.0)); // 2..4 periods
        const double phase = rng.uniform(0.0, 6.283185307179586);
        const double dx = std::cos(theta), dy = std::sin(theta);
        for (std::size_t c = 0; c < channels; ++c)
            for (std::size_t y = 0; y < size; ++y)
                for (std::size_t x = 0; x < size; ++x) {
                    const double proj = (static_cast<double>(x) * dx + static_cast<double>(y) * dy) / s;
                    const double v =
                        0.72 + 0.18 * std::sin(6.283185307179586 * freq * proj + phase) + choff(c);
                    px[(c * size + y) * size + x] = clamp01(v);
                }
        break;
    }
    }
    return img;
}

SampleMeta fetch_sample(const DatasetRegistry& registry, const std::string& dataset_id,
                        std::size_t index) {
    const DatasetManifest& m = registry.find(dataset_id);
    if (index >= m.count) {
        throw ContractError("sample index " + std::to_string(index) + " out of range for dataset '" +
                            dataset_id + "' of size " + std::to_string(m.count));
    }
    SampleMeta sm;
    sm.dataset_id = dataset_id;
    if (m.synthetic) {
        sm.image_id = dataset_id + "/" + std::to_string(index);
        sm.pixels = synth_image(m.style, derive_seed(m.seed, index), m.image_size, m.channels);
    } else {
        const std::string& path = registry.files(dataset_id)[index];
        sm.image_id = std::filesystem::path(path).filename().string();
        sm.pixels = read_pnm(path);
        if (sm.pixels.shape()[0] != m.channels || sm.pixels.shape()[1] != m.image_size ||
            sm.pixels.shape()[2] != m.image_size) {
            throw IoError("image " + path + " is " + sm.pixels.shape_str() + ", dataset '" + dataset_id +
                          "' expects " + std::to_string(m.channels) + "x" + std::to_string(m.image_size) +
                          "x" + std::to_string(m.image_size));
        }
    }
    return sm;
}

std::vector<SampleMeta> compose_batch(const DatasetRegistry& registry, std::size_t k, Rng& rng) {
    if (k == 0) throw ContractError("compose_batch: k must be at least 1");
    std::vector<SampleMeta> batch;
    batch.reserve(registry.group_order().size() * k);
    for (const std::string& owner : registry.group_order()) {
        const std::vector<std::string>& ids = registry.group(owner);
        for (std::size_t j = 0; j < k; ++j) {
            const std::string& ds = ids[rng.uniform_index(ids.size())];
            const std::size_t index = rng.uniform_index(registry.find(ds).count);
            batch.push_back(fetch_sample(registry, ds, index));
        }
    }
    return batch;
}

// --- PNM I/O -------------------------------------------------------------------

namespace {

int pnm_read_token(std::istream& is, const std::string& path) {
    // skips whitespace and '#' comments, then reads one unsigned decimal
    int c = is.get();
    while (c != EOF) {
        if (c == '#') {
            while (c != EOF && c != '\n') c = is.get();
        } else if (std::isspace(c)) {
            c = is.get();
        } else {
            break;
        }
    }
    if (c == EOF || !std::isdigit(c)) throw IoError("malformed PNM header: " + path);
    int v = 0;
    while (c != EOF && std::isdigit(c)) {
        v = v * 10 + (c - '0');
        c = is.get();
    }
    return v;
}

} // namespace

Tensor read_pnm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    char m0 = 0, m1 = 0;
    is.get(m0);
    is.get(m1);
    if (m0 != 'P' || (m1 != '5' && m1 != '6')) {
        throw IoError("not a binary PGM/PPM file: " + path);
    }
    const std::size_t channels = (m1 == '6') ? 3 : 1;
    const int w = pnm_read_token(is, path);
    const int h = pnm_read_token(is, path);
    const int maxval = pnm_read_token(is, path);
    if (w <= 0 || h <= 0 || maxval != 255) {
        throw IoError("unsupported PNM geometry or maxval (need maxval 255): " + path);
    }
    const std::size_t n = static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * channels;
    std::vector<unsigned char> raw(n);
    if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(n))) {
        throw IoError("truncated PNM payload: " + path);
    }
    // interleaved bytes -> planar [C x H x W] in [0,1]
    Tensor img = Tensor::zeros({channels, static_cast<std::size_t>(h), static_cast<std::size_t>(w)});
    double* px = img.values().data();
    const std::size_t hw = static_cast<std::size_t>(w) * static_cast<std::size_t>(h);
    for (std::size_t i = 0; i < hw; ++i)
        for (std::size_t c = 0; c < channels; ++c)
            px[c * hw + i] = static_cast<double>(raw[i * channels + c]) / 255.0;
    return img;
}

void write_pnm(const std::string& path, const Tensor& image) {
    if (image.rank() != 3 || (image.shape()[0] != 1 && image.shape()[0] != 3)) {
        throw ContractError("write_pnm expects [1|3 x H x W], got " + image.shape_str());
    }
    const std::size_t c = image.shape()[0], h = image.shape()[1], w = image.shape()[2];
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open for writing: " + path);
    os << (c == 3 ? "P6" : "P5") << "\n" << w << " " << h << "\n255\n";
    const double* px = image.values().data();
    std::vector<unsigned char> raw(c * h * w);
    for (std::size_t i = 0; i < h * w; ++i)
        for (std::size_t ch = 0; ch < c; ++ch) {
            const double v = std::clamp(px[ch * h * w + i], 0.0, 1.0);
            raw[i * c + ch] = static_cast<unsigned char>(std::lround(v * 255.0));
        }
    os.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!os) throw IoError("write failed: " + path);
}

} // namespace dune
