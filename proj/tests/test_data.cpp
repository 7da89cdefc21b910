#include <chrono>
#include <cmath>
#include <filesystem>
#include <map>
#include <set>

#include "doctest.h"
#include "dune/data.hpp"

using namespace dune;

namespace {

DatasetManifest synth(const std::string& id, const std::string& owner, SynthStyle style,
                      std::size_t count, std::uint64_t seed) {
    DatasetManifest m;
    m.id = id;
    m.owner = owner;
    m.style = style;
    m.count = count;
    m.seed = seed;
    m.image_size = 14;
    m.channels = 3;
    return m;
}

std::vector<DatasetManifest> three_teacher_manifests() {
    return {
        synth("a1", "alpha", SynthStyle::Noise, 8, 1),
        synth("a2", "alpha", SynthStyle::Gradients, 8, 2),
        synth("b1", "beta", SynthStyle::Blobs, 8, 3),
        synth("b2", "beta", SynthStyle::Stripes, 8, 4),
        synth("c1", "gamma", SynthStyle::Noise, 8, 5),
        synth("c2", "gamma", SynthStyle::Gradients, 8, 6),
        synth("web", "generic", SynthStyle::Stripes, 8, 7),
    };
}

const std::vector<std::string> kTeachers = {"alpha", "beta", "gamma"};

} // namespace

TEST_CASE("registry groups datasets by owner in declaration order") {
    DatasetRegistry r = load_registry(three_teacher_manifests(), kTeachers);
    CHECK(r.manifests().size() == 7);
    CHECK(r.group_order() == std::vector<std::string>{"alpha", "beta", "gamma", "generic"});
    CHECK(r.group("alpha") == std::vector<std::string>{"a1", "a2"});
    CHECK(r.generic_ids() == std::vector<std::string>{"web"});
    CHECK(r.has("b2"));
    CHECK_FALSE(r.has("zzz"));
    CHECK_THROWS_AS(r.find("zzz"), ConfigError);
}

TEST_CASE("registry rejects duplicate ids, unknown owners, and empty datasets") {
    auto ms = three_teacher_manifests();
    ms.push_back(synth("a1", "alpha", SynthStyle::Noise, 4, 9));
    CHECK_THROWS_WITH_AS(load_registry(ms, kTeachers), doctest::Contains("a1"), ConfigError);

    ms = three_teacher_manifests();
    ms[0].owner = "delta";
    CHECK_THROWS_WITH_AS(load_registry(ms, kTeachers), doctest::Contains("delta"), ConfigError);

    ms = three_teacher_manifests();
    ms[0].count = 0;
    CHECK_THROWS_WITH_AS(load_registry(ms, kTeachers), doctest::Contains("a1"), ConfigError);
}

TEST_CASE("registry rejects teachers that own no dataset") {
    auto ms = three_teacher_manifests();
    ms.erase(ms.begin() + 4, ms.begin() + 6); // drop gamma's datasets
    CHECK_THROWS_WITH_AS(load_registry(ms, kTeachers), doctest::Contains("gamma"), ConfigError);
}

TEST_CASE("synthetic images are deterministic and bounded") {
    for (SynthStyle style :
         {SynthStyle::Noise, SynthStyle::Gradients, SynthStyle::Blobs, SynthStyle::Stripes}) {
        Tensor a = synth_image(style, 77, 14, 3);
        Tensor b = synth_image(style, 77, 14, 3);
        CHECK(a.equals_bitwise(b));
        CHECK_FALSE(a.equals_bitwise(synth_image(style, 78, 14, 3)));
        CHECK(a.shape() == std::vector<std::size_t>{3, 14, 14});
    }
    for (std::uint64_t seed = 0; seed < 1000; ++seed) {
        Tensor img = synth_image(static_cast<SynthStyle>(seed % 4), seed, 8, 1);
        for (double v : img.values()) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
    }
}

TEST_CASE("styles have separated channel-mean signatures") {
    // domain shift emulation: mean pixel level must separate the styles by
    // far more than the within-style spread
    const int n = 250;
    std::map<int, std::vector<double>> means;
    for (int si = 0; si < 4; ++si)
        for (int i = 0; i < n; ++i) {
            Tensor img = synth_image(static_cast<SynthStyle>(si), 1000 + i, 14, 3);
            double m = 0.0;
            for (double v : img.values()) m += v;
            means[si].push_back(m / static_cast<double>(img.size()));
        }
    std::vector<double> mu(4), sigma(4);
    for (int si = 0; si < 4; ++si) {
        double s = 0.0;
        for (double v : means[si]) s += v;
        mu[si] = s / n;
        double var = 0.0;
        for (double v : means[si]) var += (v - mu[si]) * (v - mu[si]);
        sigma[si] = std::sqrt(var / n);
    }
    for (int a = 0; a < 4; ++a)
        for (int b = a + 1; b < 4; ++b)
            CHECK(std::abs(mu[a] - mu[b]) > 3.0 * std::max(sigma[a], sigma[b]));
}

TEST_CASE("fetch_sample is deterministic and stamps ids") {
    DatasetRegistry r = load_registry(three_teacher_manifests(), kTeachers);
    SampleMeta s1 = fetch_sample(r, "a1", 3);
    SampleMeta s2 = fetch_sample(r, "a1", 3);
    CHECK(s1.image_id == s2.image_id);
    CHECK(s1.dataset_id == "a1");
    CHECK(s1.pixels.equals_bitwise(s2.pixels));
    CHECK_FALSE(s1.pixels.equals_bitwise(fetch_sample(r, "a1", 4).pixels));
    CHECK(s1.image_id.find("a1") != std::string::npos);
    CHECK_THROWS_AS(fetch_sample(r, "a1", 8), ContractError);
}

TEST_CASE("compose_batch yields exactly k samples per group, group-major") {
    DatasetRegistry r = load_registry(three_teacher_manifests(), kTeachers);
    Rng rng = make_stream(42, "batch");
    for (int rep = 0; rep < 20; ++rep) {
        std::vector<SampleMeta> batch = compose_batch(r, 4, rng);
        REQUIRE(batch.size() == 16);
        std::map<std::string, int> per_group;
        for (std::size_t i = 0; i < batch.size(); ++i) {
            const std::string& owner = r.find(batch[i].dataset_id).owner;
            per_group[owner]++;
            CHECK(owner == r.group_order()[i / 4]);
        }
        for (const auto& [owner, count] : per_group) CHECK(count == 4);
    }
}

TEST_CASE("compose_batch is a pure function of the rng stream") {
    DatasetRegistry r = load_registry(three_teacher_manifests(), kTeachers);
    Rng r1 = make_stream(7, "batch");
    Rng r2 = make_stream(7, "batch");
    auto b1 = compose_batch(r, 4, r1);
    auto b2 = compose_batch(r, 4, r2);
    REQUIRE(b1.size() == b2.size());
    for (std::size_t i = 0; i < b1.size(); ++i) {
        CHECK(b1[i].image_id == b2[i].image_id);
        CHECK(b1[i].pixels.equals_bitwise(b2[i].pixels));
    }
}

TEST_CASE("pnm image io round trips at 8-bit depth") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() /
                         ("dune-pnm-" + std::to_string(std::chrono::steady_clock::now().time_since_epoch().count()));
    fs::create_directories(dir);

    Tensor rgb = Tensor::zeros({3, 5, 4});
    Rng rng(3);
    for (double& v : rgb.values()) v = std::round(rng.uniform() * 255.0) / 255.0;
    const std::string ppm = (dir / "x.ppm").string();
    write_pnm(ppm, rgb);
    Tensor back = read_pnm(ppm);
    REQUIRE(back.shape() == rgb.shape());
    for (std::size_t i = 0; i < rgb.size(); ++i)
        CHECK(back.values()[i] == doctest::Approx(rgb.values()[i]).epsilon(1e-12));

    Tensor gray = Tensor::zeros({1, 4, 6});
    for (double& v : gray.values()) v = std::round(rng.uniform() * 255.0) / 255.0;
    const std::string pgm = (dir / "y.pgm").string();
    write_pnm(pgm, gray);
    Tensor gback = read_pnm(pgm);
    CHECK(gback.shape() == gray.shape());

    CHECK_THROWS_AS(read_pnm((dir / "missing.ppm").string()), IoError);
    fs::remove_all(dir);
}

TEST_CASE("directory datasets enumerate files in sorted order") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() /
                         ("dune-dir-" + std::to_string(std::chrono::steady_clock::now().time_since_epoch().count()));
    fs::create_directories(dir);
    Rng rng(4);
    for (const char* name : {"c.ppm", "a.ppm", "b.ppm"}) {
        Tensor img = Tensor::zeros({3, 14, 14});
        for (double& v : img.values()) v = std::round(rng.uniform() * 255.0) / 255.0;
        write_pnm((dir / name).string(), img);
    }

    DatasetManifest m;
    m.id = "filed";
    m.owner = "alpha";
    m.synthetic = false;
    m.dir = dir.string();
    m.glob = "*.ppm";
    m.image_size = 14;
    m.channels = 3;
    m.count = 0; // filled by the registry scan

    auto ms = three_teacher_manifests();
    ms.push_back(m);
    DatasetRegistry r = load_registry(ms, kTeachers);
    CHECK(r.find("filed").count == 3);
    const auto& files = r.files("filed");
    REQUIRE(files.size() == 3);
    CHECK(files[0] < files[1]);
    CHECK(files[1] < files[2]);

    SampleMeta s = fetch_sample(r, "filed", 0);
    CHECK(s.image_id.find("a.ppm") != std::string::npos);
    CHECK(s.pixels.shape() == std::vector<std::size_t>{3, 14, 14});
    fs::remove_all(dir);
}
