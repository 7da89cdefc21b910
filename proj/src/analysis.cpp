#include "dune/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "dune/error.hpp"

namespace dune {

std::string to_string(FeaturePooling p) {
    switch (p) {
        case FeaturePooling::Patches: return "patches";
        case FeaturePooling::Cls: return "cls";
        case FeaturePooling::All: return "all";
    }
    throw ContractError("unreachable pooling kind");
}

FeaturePooling pooling_from_string(const std::string& s) {
    if (s == "patches") return FeaturePooling::Patches;
    if (s == "cls") return FeaturePooling::Cls;
    if (s == "all") return FeaturePooling::All;
    throw ConfigError("unknown pooling '" + s + "' (expected patches, cls or all)");
}

FeatureMatrix feature_matrix(const FeatureFile& file, FeaturePooling pooling) {
    FeatureMatrix m;
    m.cols = file.dim;
    const bool take_cls = pooling != FeaturePooling::Patches;
    const bool take_patches = pooling != FeaturePooling::Cls;
    for (const FeatureRecord& rec : file.records) {
        if (take_cls) {
            for (float v : rec.cls) m.data.push_back(static_cast<double>(v));
            ++m.rows;
        }
        if (take_patches) {
            for (float v : rec.patches) m.data.push_back(static_cast<double>(v));
            m.rows += rec.patches.size() / file.dim;
        }
    }
    return m;
}

std::vector<double> jacobi_eigenvalues(std::vector<double> a, std::size_t n, double tol) {
    if (n == 0) throw ContractError("jacobi_eigenvalues: empty matrix");
    if (a.size() != n * n) throw ContractError("jacobi_eigenvalues: size does not match n");
    auto off_norm = [&]() {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j)
                if (i != j) s += a[i * n + j] * a[i * n + j];
        return std::sqrt(s);
    };
    const std::size_t max_sweeps = 100;
    for (std::size_t sweep = 0; sweep < max_sweeps && off_norm() > tol; ++sweep) {
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a[p * n + q];
                if (apq == 0.0) continue;
                const double app = a[p * n + p], aqq = a[q * n + q];
                const double theta = (aqq - app) / (2.0 * apq);
                // smaller-angle root keeps the rotation stable
                const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::size_t i = 0; i < n; ++i) {
                    const double aip = a[i * n + p], aiq = a[i * n + q];
                    a[i * n + p] = c * aip - s * aiq;
                    a[i * n + q] = s * aip + c * aiq;
                }
                for (std::size_t i = 0; i < n; ++i) {
                    const double api = a[p * n + i], aqi = a[q * n + i];
                    a[p * n + i] = c * api - s * aqi;
                    a[q * n + i] = s * api + c * aqi;
                }
            }
        }
    }
    std::vector<double> eig(n);
    for (std::size_t i = 0; i < n; ++i) eig[i] = a[i * n + i];
    std::sort(eig.begin(), eig.end(), std::greater<double>());
    return eig;
}

std::vector<double> explained_variance_curve(const FeatureMatrix& f) {
    if (f.rows < 2) throw ContractError("explained_variance_curve: need at least 2 rows");
    if (f.cols == 0 || f.data.size() != f.rows * f.cols) {
        throw ContractError("explained_variance_curve: malformed feature matrix");
    }
    const std::size_t n = f.rows, d = f.cols;
    std::vector<double> mean(d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) mean[j] += f.data[i * d + j];
    for (double& m : mean) m /= static_cast<double>(n);

    std::vector<double> cov(d * d, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t a = 0; a < d; ++a) {
            const double xa = f.data[i * d + a] - mean[a];
            for (std::size_t b = a; b < d; ++b) {
                cov[a * d + b] += xa * (f.data[i * d + b] - mean[b]);
            }
        }
    }
    const double norm = 1.0 / static_cast<double>(n - 1);
    for (std::size_t a = 0; a < d; ++a)
        for (std::size_t b = a; b < d; ++b) {
            cov[a * d + b] *= norm;
            cov[b * d + a] = cov[a * d + b];
        }

    std::vector<double> eig = jacobi_eigenvalues(std::move(cov), d);
    double total = 0.0;
    for (double& e : eig) {
        if (e < 0.0) e = 0.0; // round-off on a PSD matrix
        total += e;
    }
    if (total <= 0.0) throw ContractError("explained_variance_curve: zero total variance");
    std::vector<double> curve(d);
    double running = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
        running += eig[k];
        curve[k] = running / total;
    }
    curve[d - 1] = 1.0;
    return curve;
}

double loss_update_correlation(const std::vector<double>& loss_a,
                               const std::vector<double>& loss_b) {
    if (loss_a.size() != loss_b.size()) {
        throw ContractError("loss_update_correlation: sequences differ in length");
    }
    if (loss_a.size() < 3) throw ContractError("loss_update_correlation: need at least 3 steps");
    const std::size_t m = loss_a.size() - 1;
    std::vector<double> da(m), db(m);
    for (std::size_t k = 0; k < m; ++k) {
        da[k] = loss_a[k + 1] - loss_a[k];
        db[k] = loss_b[k + 1] - loss_b[k];
    }
    double mean_a = 0.0, mean_b = 0.0;
    for (std::size_t k = 0; k < m; ++k) {
        mean_a += da[k];
        mean_b += db[k];
    }
    mean_a /= static_cast<double>(m);
    mean_b /= static_cast<double>(m);
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t k = 0; k < m; ++k) {
        const double xa = da[k] - mean_a, xb = db[k] - mean_b;
        sab += xa * xb;
        saa += xa * xa;
        sbb += xb * xb;
    }
    if (saa == 0.0 || sbb == 0.0) {
        throw ContractError("loss_update_correlation: zero-variance delta sequence");
    }
    double r = sab / std::sqrt(saa * sbb);
    return std::clamp(r, -1.0, 1.0);
}

namespace {

double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

} // namespace

KMedoidsResult kmedoids(const std::vector<std::vector<double>>& points, std::size_t k,
                        std::size_t max_iters, Rng& rng) {
    const std::size_t n = points.size();
    if (k == 0 || k > n) throw ContractError("kmedoids: k must be in [1, n]");
    for (const auto& p : points) {
        if (p.size() != points[0].size()) throw ContractError("kmedoids: ragged point set");
    }

    KMedoidsResult res;
    res.medoids = rng.sample_distinct(n, k);
    res.assignment.assign(n, 0);

    auto dist = [&](std::size_t i, std::size_t j) {
        return std::sqrt(sq_dist(points[i], points[j]));
    };
    auto assign_all = [&]() {
        double cost = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double best = std::numeric_limits<double>::infinity();
            std::size_t who = 0;
            for (std::size_t c = 0; c < k; ++c) {
                const double d = dist(i, res.medoids[c]);
                if (d < best) {
                    best = d;
                    who = c;
                }
            }
            res.assignment[i] = who;
            cost += best;
        }
        return cost;
    };

    res.cost_history.push_back(assign_all());
    for (std::size_t iter = 0; iter < max_iters; ++iter) {
        bool changed = false;
        for (std::size_t c = 0; c < k; ++c) {
            // candidate medoid = member minimizing total in-cluster distance
            double best_cost = std::numeric_limits<double>::infinity();
            std::size_t best_idx = res.medoids[c];
            for (std::size_t i = 0; i < n; ++i) {
                if (res.assignment[i] != c) continue;
                double cost = 0.0;
                for (std::size_t j = 0; j < n; ++j) {
                    if (res.assignment[j] == c) cost += dist(j, i);
                }
                if (cost < best_cost) {
                    best_cost = cost;
                    best_idx = i;
                }
            }
            if (best_idx != res.medoids[c]) {
                res.medoids[c] = best_idx;
                changed = true;
            }
        }
        if (!changed) break;
        res.cost_history.push_back(assign_all());
    }
    return res;
}

std::size_t TrainingLog::teacher_index(const std::string& id) const {
    for (std::size_t i = 0; i < teacher_ids.size(); ++i) {
        if (teacher_ids[i] == id) return i;
    }
    throw ConfigError("log has no teacher '" + id + "'");
}

std::vector<double> TrainingLog::teacher_total(std::size_t i) const {
    if (i >= teacher_ids.size()) throw ContractError("teacher index out of range");
    std::vector<double> out(cos[i].size());
    for (std::size_t r = 0; r < out.size(); ++r) out[r] = cos[i][r] + sl1[i][r];
    return out;
}

TrainingLog read_training_log(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open: " + path);
    std::string line;
    if (!std::getline(is, line)) throw IoError("empty log: " + path);

    auto split = [](const std::string& s) {
        std::vector<std::string> out;
        std::stringstream ss(s);
        std::string cell;
        while (std::getline(ss, cell, ',')) out.push_back(cell);
        return out;
    };

    TrainingLog log;
    const std::vector<std::string> header = split(line);
    if (header.size() < 3 || header[0] != "step" || header[1] != "lr" || header[2] != "total") {
        throw IoError("unrecognized log header in " + path);
    }
    if ((header.size() - 3) % 3 != 0) throw IoError("unrecognized log header in " + path);
    const std::size_t n_teachers = (header.size() - 3) / 3;
    for (std::size_t i = 0; i < n_teachers; ++i) {
        const std::string& cos_col = header[3 + 3 * i];
        if (cos_col.size() < 5 || cos_col.substr(cos_col.size() - 4) != "_cos") {
            throw IoError("unrecognized log header in " + path);
        }
        log.teacher_ids.push_back(cos_col.substr(0, cos_col.size() - 4));
    }
    log.cos.resize(n_teachers);
    log.sl1.resize(n_teachers);
    log.active.resize(n_teachers);

    std::size_t lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        const std::vector<std::string> cells = split(line);
        if (cells.size() != header.size()) {
            throw IoError(path + ":" + std::to_string(lineno) + ": expected " +
                          std::to_string(header.size()) + " columns, got " +
                          std::to_string(cells.size()));
        }
        try {
            log.steps.push_back(std::stoull(cells[0]));
            log.lr.push_back(std::stod(cells[1]));
            log.total.push_back(std::stod(cells[2]));
            for (std::size_t i = 0; i < n_teachers; ++i) {
                log.cos[i].push_back(std::stod(cells[3 + 3 * i]));
                log.sl1[i].push_back(std::stod(cells[4 + 3 * i]));
                log.active[i].push_back(std::stoull(cells[5 + 3 * i]));
            }
        } catch (const std::exception&) {
            throw IoError(path + ":" + std::to_string(lineno) + ": malformed numeric cell");
        }
    }
    return log;
}

FeatureFile collect_features(const std::vector<SampleMeta>& samples,
                             const std::function<TokenSet(const SampleMeta&)>& producer) {
    if (samples.empty()) throw ContractError("collect_features: empty sample list");
    FeatureFile file;
    bool first = true;
    for (const SampleMeta& s : samples) {
        TokenSet out = producer(s);
        if (first) {
            file.dim = static_cast<std::uint32_t>(out.width());
            file.grid_h = static_cast<std::uint32_t>(out.grid_h);
            file.grid_w = static_cast<std::uint32_t>(out.grid_w);
            first = false;
        } else if (out.width() != file.dim || out.grid_h != file.grid_h ||
                   out.grid_w != file.grid_w) {
            throw ContractError("collect_features: producer changed output geometry at sample '" +
                                s.image_id + "'");
        }
        FeatureRecord rec;
        rec.image_id = s.image_id;
        const std::vector<double>& vals = out.tokens.values();
        const std::size_t d = out.width();
        rec.cls.reserve(d);
        for (std::size_t j = 0; j < d; ++j) rec.cls.push_back(static_cast<float>(vals[j]));
        rec.patches.reserve(vals.size() - d);
        for (std::size_t j = d; j < vals.size(); ++j) {
            rec.patches.push_back(static_cast<float>(vals[j]));
        }
        file.records.push_back(std::move(rec));
    }
    file.rebuild_index();
    return file;
}

} // namespace dune
