#pragma once

// Independent reference implementations the tests compare the library
// against. Everything here is straight-line loop code over plain vectors:
// no Tensor ops, no autodiff, and where the library has an algorithmic
// choice (Jacobi pivoting, Pearson accumulation) a different one.

#include <cmath>
#include <cstddef>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "dune/projector.hpp"
#include "dune/tensor.hpp"
#include "dune/vit.hpp"

namespace oracle {

struct Mat {
    std::size_t r = 0, c = 0;
    std::vector<double> v;

    Mat() = default;
    Mat(std::size_t rows, std::size_t cols) : r(rows), c(cols), v(rows * cols, 0.0) {}
    double& at(std::size_t i, std::size_t j) { return v[i * c + j]; }
    double at(std::size_t i, std::size_t j) const { return v[i * c + j]; }
};

// rank-1 tensors become a single row
inline Mat from_tensor(const dune::Tensor& t) {
    Mat m;
    if (t.rank() == 1) {
        m.r = 1;
        m.c = t.shape()[0];
    } else if (t.rank() == 2) {
        m.r = t.shape()[0];
        m.c = t.shape()[1];
    } else {
        throw std::runtime_error("from_tensor: rank > 2");
    }
    m.v = t.values();
    return m;
}

inline double max_abs_diff(const Mat& a, const Mat& b) {
    if (a.r != b.r || a.c != b.c) return std::numeric_limits<double>::infinity();
    double worst = 0.0;
    for (std::size_t i = 0; i < a.v.size(); ++i) worst = std::max(worst, std::abs(a.v[i] - b.v[i]));
    return worst;
}

inline double max_abs_diff(const dune::Tensor& a, const Mat& b) { return max_abs_diff(from_tensor(a), b); }

// ---------------------------------------------------------------- linear algebra

// Classical Jacobi: each rotation zeroes the currently largest off-diagonal
// element (the library sweeps cyclically instead). Returns eigenvalues
// sorted descending.
inline std::vector<double> jacobi_greedy(std::vector<double> a, std::size_t n) {
    auto idx = [n](std::size_t i, std::size_t j) { return i * n + j; };
    for (std::size_t iter = 0; iter < 200 * n * n; ++iter) {
        std::size_t p = 0, q = 1;
        double big = 0.0;
        for (std::size_t i = 0; i + 1 < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j)
                if (std::abs(a[idx(i, j)]) > big) {
                    big = std::abs(a[idx(i, j)]);
                    p = i;
                    q = j;
                }
        if (n < 2 || big < 1e-14) break;
        const double app = a[idx(p, p)], aqq = a[idx(q, q)], apq = a[idx(p, q)];
        const double theta = (aqq - app) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double cs = 1.0 / std::sqrt(t * t + 1.0);
        const double sn = t * cs;
        for (std::size_t k = 0; k < n; ++k) {
            const double akp = a[idx(k, p)], akq = a[idx(k, q)];
            a[idx(k, p)] = cs * akp - sn * akq;
            a[idx(k, q)] = sn * akp + cs * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
            const double apk = a[idx(p, k)], aqk = a[idx(q, k)];
            a[idx(p, k)] = cs * apk - sn * aqk;
            a[idx(q, k)] = sn * apk + cs * aqk;
        }
        a[idx(p, q)] = 0.0;
        a[idx(q, p)] = 0.0;
    }
    std::vector<double> eig(n);
    for (std::size_t i = 0; i < n; ++i) eig[i] = a[idx(i, i)];
    std::sort(eig.begin(), eig.end(), std::greater<double>());
    return eig;
}

// cumulative explained-variance curve from first principles
inline std::vector<double> explained_variance(const Mat& f) {
    const std::size_t n = f.r, d = f.c;
    std::vector<double> mean(d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) mean[j] += f.at(i, j);
    for (double& m : mean) m /= static_cast<double>(n);
    std::vector<double> cov(d * d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t a = 0; a < d; ++a)
            for (std::size_t b = 0; b < d; ++b)
                cov[a * d + b] += (f.at(i, a) - mean[a]) * (f.at(i, b) - mean[b]);
    for (double& x : cov) x /= static_cast<double>(n - 1);
    std::vector<double> eig = jacobi_greedy(cov, d);
    double total = 0.0;
    for (double& e : eig) {
        if (e < 0.0) e = 0.0;
        total += e;
    }
    std::vector<double> curve(d);
    double run = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        run += eig[i];
        curve[i] = run / total;
    }
    curve[d - 1] = 1.0;
    return curve;
}

// ---------------------------------------------------------------- statistics

// Pearson correlation of the first differences, via the raw-sums identity
// accumulated in long double (the library centers first).
inline double pearson_diff_raw(const std::vector<double>& a, const std::vector<double>& b) {
    const std::size_t n = a.size() - 1;
    long double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const long double x = a[i + 1] - a[i];
        const long double y = b[i + 1] - b[i];
        sx += x;
        sy += y;
        sxx += x * x;
        syy += y * y;
        sxy += x * y;
    }
    const long double nn = static_cast<long double>(n);
    const long double num = nn * sxy - sx * sy;
    const long double den = std::sqrt(nn * sxx - sx * sx) * std::sqrt(nn * syy - sy * sy);
    double r = static_cast<double>(num / den);
    if (r > 1.0) r = 1.0;
    if (r < -1.0) r = -1.0;
    return r;
}

// two-pass variant: mean first, centered sums second
inline double pearson_diff_two_pass(const std::vector<double>& a, const std::vector<double>& b) {
    const std::size_t n = a.size() - 1;
    long double mx = 0, my = 0;
    for (std::size_t i = 0; i < n; ++i) {
        mx += a[i + 1] - a[i];
        my += b[i + 1] - b[i];
    }
    mx /= static_cast<long double>(n);
    my /= static_cast<long double>(n);
    long double sxx = 0, syy = 0, sxy = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const long double x = (a[i + 1] - a[i]) - mx;
        const long double y = (b[i + 1] - b[i]) - my;
        sxx += x * x;
        syy += y * y;
        sxy += x * y;
    }
    double r = static_cast<double>(sxy / std::sqrt(sxx * syy));
    if (r > 1.0) r = 1.0;
    if (r < -1.0) r = -1.0;
    return r;
}

// regularized upper incomplete gamma Q(s, x); series for x < s + 1,
// Lentz continued fraction otherwise
inline double gamma_q(double s, double x) {
    if (x <= 0.0) return 1.0;
    const double lg = std::lgamma(s);
    if (x < s + 1.0) {
        double term = 1.0 / s, sum = term;
        for (int k = 1; k < 500; ++k) {
            term *= x / (s + k);
            sum += term;
            if (std::abs(term) < std::abs(sum) * 1e-16) break;
        }
        return 1.0 - sum * std::exp(-x + s * std::log(x) - lg);
    }
    const double tiny = 1e-300;
    double b = x + 1.0 - s, c = 1.0 / tiny, d = 1.0 / b, h = d;
    for (int k = 1; k < 500; ++k) {
        const double an = -k * (k - s);
        b += 2.0;
        d = an * d + b;
        if (std::abs(d) < tiny) d = tiny;
        c = b + an / c;
        if (std::abs(c) < tiny) c = tiny;
        d = 1.0 / d;
        const double delta = d * c;
        h *= delta;
        if (std::abs(delta - 1.0) < 1e-16) break;
    }
    return std::exp(-x + s * std::log(x) - lg) * h;
}

// chi-square tail probability P(X >= x) with k degrees of freedom
inline double chi2_tail(double x, double k) { return gamma_q(k / 2.0, x / 2.0); }

// ---------------------------------------------------------------- forward passes

inline Mat mm(const Mat& a, const Mat& b) {
    Mat out(a.r, b.c);
    for (std::size_t i = 0; i < a.r; ++i)
        for (std::size_t k = 0; k < a.c; ++k) {
            const double aik = a.at(i, k);
            for (std::size_t j = 0; j < b.c; ++j) out.at(i, j) += aik * b.at(k, j);
        }
    return out;
}

inline void add_row(Mat& a, const Mat& row) {
    for (std::size_t i = 0; i < a.r; ++i)
        for (std::size_t j = 0; j < a.c; ++j) a.at(i, j) += row.v[j];
}

inline Mat layernorm_rows(const Mat& x, const Mat& g, const Mat& b, double eps = 1e-6) {
    Mat out(x.r, x.c);
    for (std::size_t i = 0; i < x.r; ++i) {
        double mu = 0.0;
        for (std::size_t j = 0; j < x.c; ++j) mu += x.at(i, j);
        mu /= static_cast<double>(x.c);
        double var = 0.0;
        for (std::size_t j = 0; j < x.c; ++j) var += (x.at(i, j) - mu) * (x.at(i, j) - mu);
        var /= static_cast<double>(x.c);
        const double inv = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < x.c; ++j)
            out.at(i, j) = (x.at(i, j) - mu) * inv * g.v[j] + b.v[j];
    }
    return out;
}

inline void softmax_rows(Mat& x) {
    for (std::size_t i = 0; i < x.r; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < x.c; ++j) mx = std::max(mx, x.at(i, j));
        double sum = 0.0;
        for (std::size_t j = 0; j < x.c; ++j) {
            x.at(i, j) = std::exp(x.at(i, j) - mx);
            sum += x.at(i, j);
        }
        for (std::size_t j = 0; j < x.c; ++j) x.at(i, j) /= sum;
    }
}

inline double gelu1(double x) {
    return 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / 3.141592653589793238462643383279502884) *
                                      (x + 0.044715 * x * x * x)));
}

// per-head post-softmax attention matrices for input x
inline std::vector<Mat> attention_ref(const Mat& x, const dune::BlockParams& b, std::size_t heads) {
    const std::size_t d = x.c, dh = d / heads, t = x.r;
    Mat y = layernorm_rows(x, from_tensor(b.ln1_gamma), from_tensor(b.ln1_beta));
    Mat qkv = mm(y, from_tensor(b.qkv_w));
    if (b.qkv_b.defined()) add_row(qkv, from_tensor(b.qkv_b));
    std::vector<Mat> atts;
    for (std::size_t h = 0; h < heads; ++h) {
        Mat att(t, t);
        for (std::size_t i = 0; i < t; ++i)
            for (std::size_t j = 0; j < t; ++j) {
                double dot = 0.0;
                for (std::size_t k = 0; k < dh; ++k)
                    dot += qkv.at(i, h * dh + k) * qkv.at(j, d + h * dh + k);
                att.at(i, j) = dot / std::sqrt(static_cast<double>(dh));
            }
        softmax_rows(att);
        atts.push_back(att);
    }
    return atts;
}

inline Mat block_forward_ref(const Mat& x, const dune::BlockParams& b, std::size_t heads) {
    const std::size_t d = x.c, dh = d / heads, t = x.r;
    Mat y = layernorm_rows(x, from_tensor(b.ln1_gamma), from_tensor(b.ln1_beta));
    Mat qkv = mm(y, from_tensor(b.qkv_w));
    if (b.qkv_b.defined()) add_row(qkv, from_tensor(b.qkv_b));
    std::vector<Mat> atts = attention_ref(x, b, heads);
    Mat merged(t, d);
    for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < t; ++i)
            for (std::size_t k = 0; k < dh; ++k) {
                double acc = 0.0;
                for (std::size_t j = 0; j < t; ++j)
                    acc += atts[h].at(i, j) * qkv.at(j, 2 * d + h * dh + k);
                merged.at(i, h * dh + k) = acc;
            }
    Mat sa = mm(merged, from_tensor(b.proj_w));
    add_row(sa, from_tensor(b.proj_b));
    Mat a(t, d);
    const bool ls1 = b.ls1.defined();
    const Mat g1 = ls1 ? from_tensor(b.ls1) : Mat();
    for (std::size_t i = 0; i < t; ++i)
        for (std::size_t j = 0; j < d; ++j)
            a.at(i, j) = x.at(i, j) + (ls1 ? g1.v[j] : 1.0) * sa.at(i, j);
    Mat z = layernorm_rows(a, from_tensor(b.ln2_gamma), from_tensor(b.ln2_beta));
    Mat m1 = mm(z, from_tensor(b.mlp_w1));
    add_row(m1, from_tensor(b.mlp_b1));
    for (double& u : m1.v) u = gelu1(u);
    Mat m2 = mm(m1, from_tensor(b.mlp_w2));
    add_row(m2, from_tensor(b.mlp_b2));
    const bool ls2 = b.ls2.defined();
    const Mat g2 = ls2 ? from_tensor(b.ls2) : Mat();
    Mat out(t, d);
    for (std::size_t i = 0; i < t; ++i)
        for (std::size_t j = 0; j < d; ++j)
            out.at(i, j) = a.at(i, j) + (ls2 ? g2.v[j] : 1.0) * m2.at(i, j);
    return out;
}

// raster-order patch rows, channel-major inside each row
inline Mat patch_rows_ref(const dune::Tensor& image, std::size_t patch) {
    const std::size_t c = image.shape()[0], h = image.shape()[1], w = image.shape()[2];
    const std::size_t gh = h / patch, gw = w / patch;
    Mat out(gh * gw, c * patch * patch);
    const std::vector<double>& pix = image.values();
    for (std::size_t gy = 0; gy < gh; ++gy)
        for (std::size_t gx = 0; gx < gw; ++gx) {
            std::size_t col = 0;
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t py = 0; py < patch; ++py)
                    for (std::size_t px = 0; px < patch; ++px)
                        out.at(gy * gw + gx, col++) =
                            pix[ch * h * w + (gy * patch + py) * w + (gx * patch + px)];
        }
    return out;
}

inline Mat embed_ref(const dune::Tensor& image, const dune::ViTParams& p) {
    Mat flat = patch_rows_ref(image, p.config.patch_size);
    Mat proj = mm(flat, from_tensor(p.patch_w));
    add_row(proj, from_tensor(p.patch_b));
    Mat tokens(proj.r + 1, proj.c);
    const Mat cls = from_tensor(p.cls);
    for (std::size_t j = 0; j < tokens.c; ++j) tokens.at(0, j) = cls.v[j];
    for (std::size_t i = 0; i < proj.r; ++i)
        for (std::size_t j = 0; j < tokens.c; ++j) tokens.at(i + 1, j) = proj.at(i, j);
    const Mat pos = from_tensor(p.pos);
    for (std::size_t i = 0; i < tokens.r; ++i)
        for (std::size_t j = 0; j < tokens.c; ++j) tokens.at(i, j) += pos.at(i, j);
    return tokens;
}

// full encoder; when taps is non-null, stores every post-block token matrix
inline Mat encoder_ref(const dune::Tensor& image, const dune::ViTParams& p,
                       std::vector<Mat>* taps = nullptr) {
    Mat x = embed_ref(image, p);
    for (const dune::BlockParams& b : p.blocks) {
        x = block_forward_ref(x, b, p.config.heads);
        if (taps) taps->push_back(x);
    }
    return layernorm_rows(x, from_tensor(p.final_gamma), from_tensor(p.final_beta));
}

inline Mat avg_attention_ref(const dune::Tensor& image, const dune::ViTParams& p, std::size_t layer) {
    Mat x = embed_ref(image, p);
    for (std::size_t i = 0; i < layer; ++i) x = block_forward_ref(x, p.blocks[i], p.config.heads);
    std::vector<Mat> atts = attention_ref(x, p.blocks[layer], p.config.heads);
    Mat avg(x.r, x.r);
    for (const Mat& a : atts)
        for (std::size_t i = 0; i < avg.v.size(); ++i) avg.v[i] += a.v[i];
    for (double& u : avg.v) u /= static_cast<double>(atts.size());
    return avg;
}

inline Mat mlp_head_ref(const Mat& x, const dune::MlpHead& m) {
    Mat h = mm(x, from_tensor(m.w1));
    add_row(h, from_tensor(m.b1));
    for (double& u : h.v) u = gelu1(u);
    Mat out = mm(h, from_tensor(m.w2));
    add_row(out, from_tensor(m.b2));
    return out;
}

inline Mat sp_ref(const Mat& z, const dune::ProjectorParams& p) { return mlp_head_ref(z, p.sp); }

// blocks_out[k] is the token matrix after block k+1
inline Mat lp_ref(const std::vector<Mat>& blocks_out, const dune::ProjectorParams& p) {
    Mat sum;
    for (std::size_t i = 0; i < p.tap_blocks.size(); ++i) {
        Mat contrib = mlp_head_ref(blocks_out[p.tap_blocks[i] - 1], p.taps[i]);
        if (i == 0) {
            sum = contrib;
        } else {
            for (std::size_t k = 0; k < sum.v.size(); ++k) sum.v[k] += contrib.v[k];
        }
    }
    return sum;
}

inline Mat tp_ref(const Mat& z, const dune::ProjectorParams& p) {
    Mat m = block_forward_ref(z, p.tp_block, p.tp_heads);
    Mat out = mm(m, from_tensor(p.tp_head_w));
    add_row(out, from_tensor(p.tp_head_b));
    return out;
}

// ---------------------------------------------------------------- losses

inline double token_loss_ref(const Mat& s, const Mat& t) {
    double total = 0.0;
    for (std::size_t i = 0; i < s.r; ++i) {
        double ss = 0.0, tt = 0.0, st = 0.0, huber = 0.0;
        for (std::size_t j = 0; j < s.c; ++j) {
            const double a = s.at(i, j), b = t.at(i, j);
            ss += a * a;
            tt += b * b;
            st += a * b;
            const double d = std::abs(a - b);
            huber += d < 1.0 ? 0.5 * d * d : d - 0.5;
        }
        total += 1.0 - st / ((std::sqrt(ss) + 1e-12) * (std::sqrt(tt) + 1e-12));
        total += huber / static_cast<double>(s.c);
    }
    return total / static_cast<double>(s.r);
}

// ---------------------------------------------------------------- combinatorics

inline double clustering_cost(const std::vector<std::vector<double>>& pts,
                              const std::vector<std::size_t>& medoids) {
    double cost = 0.0;
    for (const std::vector<double>& p : pts) {
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t m : medoids) {
            double d2 = 0.0;
            for (std::size_t j = 0; j < p.size(); ++j)
                d2 += (p[j] - pts[m][j]) * (p[j] - pts[m][j]);
            best = std::min(best, std::sqrt(d2));
        }
        cost += best;
    }
    return cost;
}

// exact optimum over all medoid pairs (k = 2)
inline double best_pair_cost(const std::vector<std::vector<double>>& pts) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a + 1 < pts.size(); ++a)
        for (std::size_t b = a + 1; b < pts.size(); ++b)
            best = std::min(best, clustering_cost(pts, {a, b}));
    return best;
}

} // namespace oracle
