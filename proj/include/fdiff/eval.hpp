#ifndef FDIFF_EVAL_HPP
#define FDIFF_EVAL_HPP

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "fdiff/data.hpp"
#include "fdiff/diffusion.hpp"
#include "fdiff/svd.hpp"

namespace fdiff {

// ------------------------------------------------------------ shape counting

// Per-pixel nearest-palette classification: a pixel belongs to the target
// color when that palette entry is nearer than every other entry and the
// background, within a distance cutoff.
inline bool pixel_is_color(const std::vector<float>& px, int S, int x, int y, int target,
                           double cutoff) {
    auto dist2_to = [&](const std::array<float, 3>& rgb) {
        double s = 0;
        for (int c = 0; c < kImageChannels; ++c) {
            const double d = px[(static_cast<size_t>(c) * S + y) * S + x] - rgb[c];
            s += d * d;
        }
        return s;
    };
    const double d_target = dist2_to(color_palette()[target]);
    if (d_target > cutoff * cutoff) return false;
    if (dist2_to(kBackground) <= d_target) return false;
    for (int c = 0; c < 4; ++c)
        if (c != target && dist2_to(color_palette()[c]) < d_target) return false;
    return true;
}

// 4-connected component count over the target-color mask; components below
// the minimum area are speckle and ignored.
inline int count_shapes(const std::vector<float>& pixels, int S, Color target, double cutoff = 1.0,
                        int min_area = 4) {
    if (pixels.size() != static_cast<size_t>(kImageChannels) * S * S)
        throw ArgError("count_shapes: pixel count does not match 3x" + std::to_string(S) + "x" +
                       std::to_string(S));
    std::vector<char> mask(static_cast<size_t>(S) * S, 0);
    for (int y = 0; y < S; ++y)
        for (int x = 0; x < S; ++x)
            mask[static_cast<size_t>(y) * S + x] =
                pixel_is_color(pixels, S, x, y, static_cast<int>(target), cutoff);

    int count = 0;
    std::vector<int> stack;
    for (int start = 0; start < S * S; ++start) {
        if (!mask[start]) continue;
        int area = 0;
        stack.assign(1, start);
        mask[start] = 0;
        while (!stack.empty()) {
            const int cur = stack.back();
            stack.pop_back();
            ++area;
            const int x = cur % S, y = cur / S;
            const int nb[4] = {x > 0 ? cur - 1 : -1, x < S - 1 ? cur + 1 : -1,
                               y > 0 ? cur - S : -1, y < S - 1 ? cur + S : -1};
            for (int v : nb)
                if (v >= 0 && mask[v]) {
                    mask[v] = 0;
                    stack.push_back(v);
                }
        }
        if (area >= min_area) ++count;
    }
    return count;
}

// ------------------------------------------------------- count aggregation

struct CountPair {
    int prompted = 0, detected = 0;
};

inline double avg_error(const std::vector<CountPair>& pairs) {
    if (pairs.empty()) throw ArgError("avg_error: empty pair list");
    double s = 0;
    for (const auto& p : pairs) s += std::abs(p.prompted - p.detected);
    return s / pairs.size();
}

inline double match_ratio(const std::vector<CountPair>& pairs) {
    if (pairs.empty()) throw ArgError("match_ratio: empty pair list");
    double s = 0;
    for (const auto& p : pairs) s += p.prompted == p.detected;
    return s / pairs.size();
}

struct CountSample {
    int shape = 0, color = 0;
    int prompted = 0, detected = 0;
};

struct CountGroup {
    int shape = 0, color = 0, prompted = 0;
    int n = 0;
    double avg_error = 0, match_ratio = 0;
};

struct CountResult {
    std::vector<CountSample> samples;
    double avg_error = 0, match_ratio = 0;
    std::vector<CountGroup> groups;  // ordered by (shape, color, prompted)
};

inline CountResult aggregate_counts(std::vector<CountSample> samples) {
    if (samples.empty()) throw ArgError("aggregate_counts: no samples");
    CountResult r;
    r.samples = std::move(samples);
    std::vector<CountPair> all;
    for (const auto& s : r.samples) all.push_back({s.prompted, s.detected});
    r.avg_error = avg_error(all);
    r.match_ratio = match_ratio(all);
    for (int shape = 0; shape < 3; ++shape)
        for (int color = 0; color < 4; ++color)
            for (int cnt = 1; cnt <= 5; ++cnt) {
                std::vector<CountPair> g;
                for (const auto& s : r.samples)
                    if (s.shape == shape && s.color == color && s.prompted == cnt)
                        g.push_back({s.prompted, s.detected});
                if (!g.empty())
                    r.groups.push_back({shape, color, cnt, static_cast<int>(g.size()), avg_error(g),
                                        match_ratio(g)});
            }
    return r;
}

// ------------------------------------------------------------ pixel Frechet

// 8x8 per-channel average pooling, flattened: the fixed 192-dim feature.
inline std::vector<double> pooled_features(const std::vector<float>& pixels, int S) {
    constexpr int G = 8;
    if (S % G != 0 || pixels.size() != static_cast<size_t>(kImageChannels) * S * S)
        throw ArgError("pooled_features: image side must be a multiple of 8");
    const int cell = S / G;
    std::vector<double> f(kImageChannels * G * G, 0.0);
    for (int c = 0; c < kImageChannels; ++c)
        for (int y = 0; y < S; ++y)
            for (int x = 0; x < S; ++x)
                f[(static_cast<size_t>(c) * G + y / cell) * G + x / cell] +=
                    pixels[(static_cast<size_t>(c) * S + y) * S + x];
    for (auto& v : f) v /= cell * cell;
    return f;
}

namespace detail {

// Lower-triangular Cholesky; returns false when the matrix is not positive
// definite at working precision.
inline bool cholesky(const std::vector<double>& a, int n, std::vector<double>& l) {
    l.assign(static_cast<size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j <= i; ++j) {
            double s = a[static_cast<size_t>(i) * n + j];
            for (int k = 0; k < j; ++k) s -= l[static_cast<size_t>(i) * n + k] * l[static_cast<size_t>(j) * n + k];
            if (i == j) {
                if (s <= 0) return false;
                l[static_cast<size_t>(i) * n + i] = std::sqrt(s);
            } else {
                l[static_cast<size_t>(i) * n + j] = s / l[static_cast<size_t>(j) * n + j];
            }
        }
    return true;
}

inline std::vector<double> chol_factor(std::vector<double> cov, int n, bool* regularized) {
    std::vector<double> l;
    double eps = 1e-6;
    for (int tries = 0; tries < 8; ++tries) {
        if (cholesky(cov, n, l)) return l;
        for (int i = 0; i < n; ++i) cov[static_cast<size_t>(i) * n + i] += eps;
        if (regularized) *regularized = true;
        eps *= 10;
    }
    throw NumericError("covariance could not be factored even with regularization");
}

}  // namespace detail

// Frechet distance between two Gaussians:
// ||mu1-mu2||^2 + tr(S1) + tr(S2) - 2 tr((S1 S2)^{1/2}).
// The cross trace comes from singular values of L1^T L2 (Cholesky factors),
// whose squares are the eigenvalues of S1 S2 — no eigenvectors needed.
inline double frechet_from_moments(const std::vector<double>& mu1, const std::vector<double>& cov1,
                                   const std::vector<double>& mu2, const std::vector<double>& cov2,
                                   int n, bool* regularized = nullptr) {
    if (regularized) *regularized = false;
    std::vector<double> l1 = detail::chol_factor(cov1, n, regularized);
    std::vector<double> l2 = detail::chol_factor(cov2, n, regularized);
    std::vector<double> prod(static_cast<size_t>(n) * n, 0.0);  // L1^T L2
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            double s = 0;
            for (int k = std::max(i, j); k < n; ++k)
                s += l1[static_cast<size_t>(k) * n + i] * l2[static_cast<size_t>(k) * n + j];
            prod[static_cast<size_t>(i) * n + j] = s;
        }
    double cross = 0;
    for (double sv : svd_singular_values(prod, n, n, n)) cross += sv;
    double d = 0;
    for (int i = 0; i < n; ++i) {
        const double dm = mu1[i] - mu2[i];
        d += dm * dm + cov1[static_cast<size_t>(i) * n + i] + cov2[static_cast<size_t>(i) * n + i];
    }
    return std::max(0.0, d - 2.0 * cross);
}

inline void fit_gaussian(const std::vector<std::vector<double>>& feats, int n,
                         std::vector<double>& mu, std::vector<double>& cov) {
    const size_t m = feats.size();
    mu.assign(n, 0.0);
    for (const auto& f : feats)
        for (int i = 0; i < n; ++i) mu[i] += f[i];
    for (auto& v : mu) v /= static_cast<double>(m);
    cov.assign(static_cast<size_t>(n) * n, 0.0);
    for (const auto& f : feats)
        for (int i = 0; i < n; ++i)
            for (int j = 0; j <= i; ++j)
                cov[static_cast<size_t>(i) * n + j] += (f[i] - mu[i]) * (f[j] - mu[j]);
    const double denom = static_cast<double>(m > 1 ? m - 1 : 1);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j <= i; ++j) {
            cov[static_cast<size_t>(i) * n + j] /= denom;
            cov[static_cast<size_t>(j) * n + i] = cov[static_cast<size_t>(i) * n + j];
        }
}

inline double frechet_from_features(const std::vector<std::vector<double>>& a,
                                    const std::vector<std::vector<double>>& b, int n,
                                    bool* regularized = nullptr) {
    if (a.size() < 2 || b.size() < 2) throw ArgError("frechet: both sets need at least 2 items");
    std::vector<double> mu1, cov1, mu2, cov2;
    fit_gaussian(a, n, mu1, cov1);
    fit_gaussian(b, n, mu2, cov2);
    return frechet_from_moments(mu1, cov1, mu2, cov2, n, regularized);
}

inline double pixel_frechet(const std::vector<std::vector<float>>& real,
                            const std::vector<std::vector<float>>& gen, int S,
                            bool* regularized = nullptr) {
    std::vector<std::vector<double>> fa, fb;
    for (const auto& im : real) fa.push_back(pooled_features(im, S));
    for (const auto& im : gen) fb.push_back(pooled_features(im, S));
    return frechet_from_features(fa, fb, kImageChannels * 64, regularized);
}

// ---------------------------------------------------------------- CFG sweep

struct Prompt {
    std::vector<int> ids;
    int count = 0;
    Color color = Color::Red;
};

struct SweepRow {
    double omega = 0, frechet = 0, match_ratio = 0, avg_error = 0;
};

// For each guidance scale: sample over the fixed prompt set, count objects,
// and score distribution distance against the reference set. Deterministic
// per seed via one child stream per omega.
template <typename T>
std::vector<SweepRow> cfg_sweep(const DenoiseFn<T>& fn, const DiffusionSchedule& sched, int img_size,
                                const std::vector<Prompt>& prompts, const std::vector<int>& null_ids,
                                const std::vector<double>& omegas, int n_per_omega, int n_steps,
                                uint64_t seed, const std::vector<std::vector<float>>& real_set) {
    if (omegas.empty()) throw ArgError("cfg_sweep: omega list is empty");
    if (prompts.empty() || n_per_omega < 1) throw ArgError("cfg_sweep: need prompts and n_per_omega >= 1");
    Rng root(seed);
    std::vector<SweepRow> rows;
    for (size_t w = 0; w < omegas.size(); ++w) {
        Rng r = root.child(w);
        std::vector<CountPair> pairs;
        std::vector<std::vector<float>> images;
        for (int i = 0; i < n_per_omega; ++i) {
            const Prompt& p = prompts[i % prompts.size()];
            Tensor<T> img = sample<T>(fn, sched, {kImageChannels, img_size, img_size}, p.ids, null_ids,
                                      1, omegas[w], n_steps, r);
            std::vector<float> px(img.numel());
            for (size_t k = 0; k < px.size(); ++k) px[k] = static_cast<float>(img.vals()[k]);
            pairs.push_back({p.count, count_shapes(px, img_size, p.color)});
            images.push_back(std::move(px));
        }
        SweepRow row;
        row.omega = omegas[w];
        row.match_ratio = match_ratio(pairs);
        row.avg_error = avg_error(pairs);
        row.frechet = real_set.size() >= 2 && images.size() >= 2
                          ? pixel_frechet(real_set, images, img_size)
                          : -1.0;
        rows.push_back(row);
    }
    return rows;
}

// ------------------------------------------------------------------- output

inline void write_sweep_csv(const std::vector<SweepRow>& rows, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw DataError("cannot open for writing: " + path);
    os << "omega,frechet,match_ratio,avg_error\n";
    char buf[160];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%g,%.9e,%.6f,%.6f\n", r.omega, r.frechet, r.match_ratio,
                      r.avg_error);
        os << buf;
    }
    if (!os) throw DataError("write failure: " + path);
}

inline void write_count_csv(const CountResult& r, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw DataError("cannot open for writing: " + path);
    os << "shape,color,count,n,avg_error,match_ratio\n";
    char buf[160];
    for (const auto& g : r.groups) {
        std::snprintf(buf, sizeof buf, "%s,%s,%d,%d,%.6f,%.6f\n",
                      shape_word(static_cast<Shape>(g.shape), 1).c_str(),
                      color_word(static_cast<Color>(g.color)).c_str(), g.prompted, g.n, g.avg_error,
                      g.match_ratio);
        os << buf;
    }
    if (!os) throw DataError("write failure: " + path);
}

}  // namespace fdiff

#endif
