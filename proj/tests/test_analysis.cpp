#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "dune/analysis.hpp"
#include "oracles.hpp"

using namespace dune;

namespace {

FeatureMatrix matrix_from(std::size_t rows, std::size_t cols, std::vector<double> data) {
    FeatureMatrix f;
    f.rows = rows;
    f.cols = cols;
    f.data = std::move(data);
    f.source = "test";
    return f;
}

FeatureMatrix random_matrix(std::size_t rows, std::size_t cols, Rng& rng) {
    FeatureMatrix f;
    f.rows = rows;
    f.cols = cols;
    f.data.resize(rows * cols);
    for (double& v : f.data) v = rng.uniform(-1.0, 1.0);
    f.source = "test";
    return f;
}

// random rotation via Gram-Schmidt on a random square matrix
std::vector<double> random_orthogonal(std::size_t d, Rng& rng) {
    std::vector<std::vector<double>> q(d, std::vector<double>(d));
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j < d; ++j) q[i][j] = rng.uniform(-1.0, 1.0);
        for (std::size_t k = 0; k < i; ++k) {
            double dot = 0.0;
            for (std::size_t j = 0; j < d; ++j) dot += q[i][j] * q[k][j];
            for (std::size_t j = 0; j < d; ++j) q[i][j] -= dot * q[k][j];
        }
        double norm = 0.0;
        for (std::size_t j = 0; j < d; ++j) norm += q[i][j] * q[i][j];
        norm = std::sqrt(norm);
        for (std::size_t j = 0; j < d; ++j) q[i][j] /= norm;
    }
    std::vector<double> flat(d * d);
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j) flat[i * d + j] = q[i][j];
    return flat;
}

} // namespace

TEST_CASE("jacobi eigenvalues of a diagonal matrix are its entries") {
    std::vector<double> a = {3.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 2.0};
    std::vector<double> eig = jacobi_eigenvalues(a, 3);
    REQUIRE(eig.size() == 3);
    CHECK(eig[0] == doctest::Approx(3.0).epsilon(1e-14));
    CHECK(eig[1] == doctest::Approx(2.0).epsilon(1e-14));
    CHECK(eig[2] == doctest::Approx(1.0).epsilon(1e-14));
}

TEST_CASE("jacobi eigenvalues of a hand 2x2") {
    // [[2, 1], [1, 2]] -> 3 and 1
    std::vector<double> eig = jacobi_eigenvalues({2.0, 1.0, 1.0, 2.0}, 2);
    CHECK(eig[0] == doctest::Approx(3.0).epsilon(1e-14));
    CHECK(eig[1] == doctest::Approx(1.0).epsilon(1e-14));
}

TEST_CASE("cyclic jacobi agrees with a greedy-pivot implementation") {
    Rng rng(1);
    for (int rep = 0; rep < 5; ++rep) {
        const std::size_t d = 6;
        std::vector<double> a(d * d);
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = 0; j <= i; ++j) {
                const double v = rng.uniform(-1.0, 1.0);
                a[i * d + j] = v;
                a[j * d + i] = v;
            }
        std::vector<double> lib = jacobi_eigenvalues(a, d);
        std::vector<double> ref = oracle::jacobi_greedy(a, d);
        for (std::size_t i = 0; i < d; ++i) CHECK(lib[i] == doctest::Approx(ref[i]).epsilon(1e-10));
    }
}

TEST_CASE("isotropic data has a linear variance curve") {
    // rows designed to give a scaled identity covariance: the standard basis
    // and its negation, twice
    const std::size_t d = 4;
    std::vector<double> data;
    for (int rep = 0; rep < 2; ++rep)
        for (std::size_t i = 0; i < d; ++i)
            for (int sign = -1; sign <= 1; sign += 2)
                for (std::size_t j = 0; j < d; ++j)
                    data.push_back(i == j ? sign * 1.0 : 0.0);
    FeatureMatrix f = matrix_from(2 * 2 * d, d, std::move(data));
    std::vector<double> curve = explained_variance_curve(f);
    REQUIRE(curve.size() == d);
    for (std::size_t k = 0; k < d; ++k)
        CHECK(curve[k] == doctest::Approx((k + 1.0) / d).epsilon(1e-10));
}

TEST_CASE("rank one data saturates immediately") {
    Rng rng(2);
    std::vector<double> dir(5);
    for (double& v : dir) v = rng.uniform(-1.0, 1.0);
    std::vector<double> data;
    for (int i = 0; i < 12; ++i) {
        const double t = rng.uniform(-2.0, 2.0);
        for (double v : dir) data.push_back(t * v);
    }
    FeatureMatrix f = matrix_from(12, 5, std::move(data));
    std::vector<double> curve = explained_variance_curve(f);
    for (double c : curve) CHECK(c == doctest::Approx(1.0).epsilon(1e-10));
}

TEST_CASE("variance curve matches the oracle on random data") {
    Rng rng(3);
    for (int rep = 0; rep < 5; ++rep) {
        FeatureMatrix f = random_matrix(60, 8, rng);
        std::vector<double> got = explained_variance_curve(f);
        oracle::Mat m;
        m.r = f.rows;
        m.c = f.cols;
        m.v = f.data;
        std::vector<double> ref = oracle::explained_variance(m);
        REQUIRE(got.size() == ref.size());
        for (std::size_t i = 0; i < got.size(); ++i) CHECK(std::abs(got[i] - ref[i]) < 1e-8);
        for (std::size_t i = 1; i < got.size(); ++i) CHECK(got[i] >= got[i - 1] - 1e-12);
        CHECK(got.back() == 1.0);
    }
}

TEST_CASE("variance curve is rotation invariant") {
    Rng rng(4);
    FeatureMatrix f = random_matrix(50, 6, rng);
    std::vector<double> base = explained_variance_curve(f);

    std::vector<double> q = random_orthogonal(6, rng);
    FeatureMatrix rotated = matrix_from(50, 6, std::vector<double>(50 * 6, 0.0));
    for (std::size_t i = 0; i < 50; ++i)
        for (std::size_t a = 0; a < 6; ++a)
            for (std::size_t b = 0; b < 6; ++b)
                rotated.data[i * 6 + a] += f.data[i * 6 + b] * q[b * 6 + a];
    std::vector<double> rot = explained_variance_curve(rotated);
    for (std::size_t i = 0; i < 6; ++i) CHECK(std::abs(base[i] - rot[i]) < 1e-8);
}

TEST_CASE("degenerate feature matrices are rejected") {
    FeatureMatrix constant = matrix_from(4, 3, std::vector<double>(12, 2.5));
    CHECK_THROWS_AS((void)explained_variance_curve(constant), ContractError);
    FeatureMatrix one_row = matrix_from(1, 3, {1.0, 2.0, 3.0});
    CHECK_THROWS_AS((void)explained_variance_curve(one_row), ContractError);
}

TEST_CASE("loss correlation anchors") {
    std::vector<double> a = {1.0, 0.8, 0.7, 0.55, 0.5, 0.42};
    std::vector<double> doubled(a.size());
    std::vector<double> flipped(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        doubled[i] = 2.0 * a[i] + 3.0;
        flipped[i] = -a[i];
    }
    CHECK(loss_update_correlation(a, doubled) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(loss_update_correlation(a, flipped) == doctest::Approx(-1.0).epsilon(1e-12));
    CHECK(loss_update_correlation(a, a) == doctest::Approx(1.0).epsilon(1e-14));
}

TEST_CASE("loss correlation matches a raw-sums oracle and is symmetric") {
    Rng rng(5);
    for (int rep = 0; rep < 5; ++rep) {
        std::vector<double> a(40), b(40);
        for (std::size_t i = 0; i < 40; ++i) {
            a[i] = rng.uniform(-1.0, 1.0);
            b[i] = rng.uniform(-1.0, 1.0);
        }
        const double r1 = loss_update_correlation(a, b);
        CHECK(std::abs(r1 - oracle::pearson_diff_raw(a, b)) < 1e-12);
        CHECK(loss_update_correlation(b, a) == doctest::Approx(r1).epsilon(1e-14));
        CHECK(r1 <= 1.0);
        CHECK(r1 >= -1.0);
    }
}

TEST_CASE("loss correlation rejects degenerate inputs") {
    CHECK_THROWS_AS((void)loss_update_correlation({1.0, 2.0}, {1.0, 2.0}), ContractError);
    CHECK_THROWS_AS((void)loss_update_correlation({1.0, 2.0, 3.0}, {1.0, 2.0}), ContractError);
    // constant deltas have zero variance
    CHECK_THROWS_AS((void)loss_update_correlation({1.0, 2.0, 3.0, 4.0}, {5.0, 4.0, 3.0, 2.0}),
                    ContractError);
}

TEST_CASE("kmedoids with k equal to n puts every point on its own medoid") {
    Rng rng = make_stream(42, "kmedoids");
    std::vector<std::vector<double>> pts = {{0.0, 0.0}, {1.0, 0.0}, {0.0, 1.0}};
    KMedoidsResult r = kmedoids(pts, 3, 10, rng);
    std::set<std::size_t> medoids(r.medoids.begin(), r.medoids.end());
    CHECK(medoids.size() == 3);
    CHECK(r.cost_history.back() == 0.0);
}

TEST_CASE("kmedoids recovers two planted clouds at the brute-force optimum") {
    Rng data_rng(6);
    std::vector<std::vector<double>> pts;
    for (int i = 0; i < 8; ++i)
        pts.push_back({data_rng.uniform(-0.1, 0.1), data_rng.uniform(-0.1, 0.1)});
    for (int i = 0; i < 8; ++i)
        pts.push_back({10.0 + data_rng.uniform(-0.1, 0.1), data_rng.uniform(-0.1, 0.1)});

    Rng rng = make_stream(42, "kmedoids");
    KMedoidsResult r = kmedoids(pts, 2, 50, rng);
    // one medoid per cloud
    CHECK(((r.medoids[0] < 8) != (r.medoids[1] < 8)));
    for (std::size_t i = 0; i < 16; ++i)
        CHECK((pts[r.medoids[r.assignment[i]]][0] > 5.0) == (pts[i][0] > 5.0));
    CHECK(r.cost_history.back() == doctest::Approx(oracle::best_pair_cost(pts)).epsilon(1e-12));
}

TEST_CASE("kmedoids cost history never increases and medoids are members") {
    Rng data_rng(7);
    std::vector<std::vector<double>> pts;
    for (int i = 0; i < 30; ++i)
        pts.push_back({data_rng.uniform(0.0, 1.0), data_rng.uniform(0.0, 1.0),
                       data_rng.uniform(0.0, 1.0)});
    Rng rng = make_stream(9, "kmedoids");
    KMedoidsResult r = kmedoids(pts, 4, 100, rng);
    for (std::size_t i = 1; i < r.cost_history.size(); ++i)
        CHECK(r.cost_history[i] <= r.cost_history[i - 1] + 1e-12);
    for (std::size_t m : r.medoids) CHECK(m < pts.size());
    for (std::size_t i = 0; i < pts.size(); ++i) CHECK(r.assignment[i] < r.medoids.size());
    // the reported final cost is the cost of the reported clustering
    CHECK(r.cost_history.back() ==
          doctest::Approx(oracle::clustering_cost(pts, r.medoids)).epsilon(1e-12));
}

TEST_CASE("kmedoids is deterministic for a fixed stream") {
    Rng data_rng(8);
    std::vector<std::vector<double>> pts;
    for (int i = 0; i < 20; ++i) pts.push_back({data_rng.uniform(0.0, 1.0), data_rng.uniform(0.0, 1.0)});
    Rng r1 = make_stream(11, "kmedoids");
    Rng r2 = make_stream(11, "kmedoids");
    KMedoidsResult a = kmedoids(pts, 3, 50, r1);
    KMedoidsResult b = kmedoids(pts, 3, 50, r2);
    CHECK(a.medoids == b.medoids);
    CHECK(a.assignment == b.assignment);
    CHECK(a.cost_history == b.cost_history);
}

TEST_CASE("kmedoids validates k") {
    Rng rng(12);
    std::vector<std::vector<double>> pts = {{0.0}, {1.0}};
    CHECK_THROWS_AS((void)kmedoids(pts, 0, 10, rng), ContractError);
    CHECK_THROWS_AS((void)kmedoids(pts, 3, 10, rng), ContractError);
}

TEST_CASE("feature matrix pooling picks the requested token rows") {
    FeatureFile f;
    f.dim = 2;
    f.grid_h = 1;
    f.grid_w = 2;
    for (int i = 0; i < 3; ++i) {
        FeatureRecord r;
        r.image_id = "img-" + std::to_string(i);
        r.cls = {static_cast<float>(i), 0.5f};
        r.patches = {1.0f, 2.0f, 3.0f, 4.0f};
        f.records.push_back(r);
    }
    FeatureMatrix patches = feature_matrix(f, FeaturePooling::Patches);
    CHECK(patches.rows == 6);
    CHECK(patches.cols == 2);
    FeatureMatrix cls = feature_matrix(f, FeaturePooling::Cls);
    CHECK(cls.rows == 3);
    CHECK(cls.data[0] == 0.0);
    CHECK(cls.data[2] == 1.0);
    FeatureMatrix all = feature_matrix(f, FeaturePooling::All);
    CHECK(all.rows == 9);
    CHECK(pooling_from_string("patches") == FeaturePooling::Patches);
    CHECK_THROWS_AS(pooling_from_string("mean"), ConfigError);
}

TEST_CASE("collect_features packs producer outputs and validates geometry") {
    std::vector<SampleMeta> samples;
    for (int i = 0; i < 3; ++i) {
        SampleMeta s;
        s.image_id = "img-" + std::to_string(i);
        s.dataset_id = "d";
        samples.push_back(s);
    }
    auto producer = [](const SampleMeta& s) {
        TokenSet z;
        z.tokens = Tensor::full({5, 3}, s.image_id.back() - '0' + 0.25);
        z.grid_h = 2;
        z.grid_w = 2;
        return z;
    };
    FeatureFile f = collect_features(samples, producer);
    CHECK(f.dim == 3);
    CHECK(f.grid_h == 2);
    REQUIRE(f.records.size() == 3);
    CHECK(f.records[1].image_id == "img-1");
    CHECK(f.records[1].cls[0] == 1.25f);

    auto bad = [](const SampleMeta& s) {
        TokenSet z;
        z.tokens = Tensor::full({s.image_id == "img-0" ? 5u : 10u, 3}, 1.0);
        z.grid_h = s.image_id == "img-0" ? 2 : 3;
        z.grid_w = s.image_id == "img-0" ? 2 : 3;
        return z;
    };
    CHECK_THROWS_WITH_AS((void)collect_features(samples, bad), doctest::Contains("img-1"),
                         ContractError);
}

TEST_CASE("training logs round trip through the csv reader") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() /
                         ("dune-log-" +
                          std::to_string(std::chrono::steady_clock::now().time_since_epoch().count()));
    fs::create_directories(dir);
    const std::string path = (dir / "log.csv").string();
    {
        std::ofstream f(path);
        f << "step,lr,total,alpha_cos,alpha_sl1,alpha_active,beta_cos,beta_sl1,beta_active\n";
        f << "1,0.001,2.5,1.0,0.25,4,1.0,0.25,4\n";
        f << "2,0.0009,2.0,0.8,0.2,4,0.8,0.2,0\n";
    }
    TrainingLog log = read_training_log(path);
    CHECK(log.teacher_ids == std::vector<std::string>{"alpha", "beta"});
    REQUIRE(log.steps.size() == 2);
    CHECK(log.steps[1] == 2);
    CHECK(log.lr[0] == 0.001);
    CHECK(log.total[1] == 2.0);
    CHECK(log.cos[1][1] == 0.8);
    CHECK(log.active[1][1] == 0);
    CHECK(log.teacher_index("beta") == 1);
    CHECK_THROWS_AS((void)log.teacher_index("gamma"), ConfigError);
    std::vector<double> bt = log.teacher_total(0);
    CHECK(bt[0] == 1.25);

    {
        std::ofstream f(path);
        f << "step,lr,total,alpha_cos,alpha_sl1,alpha_active\n";
        f << "1,0.001\n";
    }
    CHECK_THROWS_AS((void)read_training_log(path), IoError);

    {
        std::ofstream f(path);
        f << "step,total\n";
    }
    CHECK_THROWS_AS((void)read_training_log(path), IoError);
    fs::remove_all(dir);
}
