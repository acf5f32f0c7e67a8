#ifndef FDIFF_ANALYSIS_HPP
#define FDIFF_ANALYSIS_HPP

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "fdiff/model.hpp"
#include "fdiff/svd.hpp"

namespace fdiff {

// --------------------------------------------------------- FLOPs accounting

struct FlopsEntry {
    std::string site;
    int block = -1;  // image-branch block index, -1 for non-block sites
    std::string op_class;
    Branch branch = Branch::Image;
    double flops = 0;
};

struct FlopsReport {
    std::vector<FlopsEntry> entries;

    double total() const {
        double s = 0;
        for (const auto& e : entries) s += e.flops;
        return s;
    }
    double branch_total(Branch b) const {
        double s = 0;
        for (const auto& e : entries)
            if (e.branch == b) s += e.flops;
        return s;
    }
};

// Closed-form single-forward-pass accounting at 2 FLOPs per multiply-
// accumulate over linear layers. Attention score/value matmuls are excluded
// by default; they can be itemized separately. Norms and activations are
// below a percent of the total and are not counted.
inline FlopsReport count_flops(const ModelConfig& cfg, bool include_attention_matmuls = false) {
    cfg.validate();
    FlopsReport r;
    const double d = cfg.embed_dim;
    const double n_img = cfg.n_patches();
    const double L_txt = cfg.text_len;
    const double pd = cfg.patch_dim();
    auto add = [&](std::string site, int block, std::string op, Branch br, double f) {
        r.entries.push_back({std::move(site), block, std::move(op), br, f});
    };
    auto block_flops = [&](const std::string& site, int idx, Branch br, double L, bool cross) {
        add(site, idx, "qkvo-projection", br, 4 * 2 * L * d * d);
        add(site, idx, "mlp", br, 2 * 2 * L * d * (cfg.mlp_ratio * d));
        if (cross) add(site, idx, "qkvo-projection", br, 2 * 2 * L_txt * d * d);  // shared K/V on text
        if (include_attention_matmuls) {
            add(site, idx, "attention-matmul", br, 2 * 2 * L * L * d);
            if (cross) add(site, idx, "attention-matmul", br, 2 * 2 * L * L_txt * d);
        }
    };

    add("patch_embed", -1, "patch-embed", Branch::Image, 2 * n_img * pd * d);
    add("time_mlp", -1, "time-mlp", Branch::Shared, 2 * 2 * d * d);
    add("text_proj", -1, "text-projection", Branch::Text, 2 * L_txt * cfg.text_in_dim * d);
    for (int i = 0; i < cfg.n_text; ++i)
        block_flops("text_block." + std::to_string(i), i, Branch::Text, L_txt, false);

    const int joint_lo = (cfg.depth - cfg.n_joint()) / 2;
    const int joint_hi = joint_lo + cfg.n_joint();
    for (int i = 0; i < cfg.depth; ++i) {
        const bool joint = i >= joint_lo && i < joint_hi;
        const bool concat_text = joint && cfg.conditioning == Conditioning::Concat;
        const bool cross = joint && cfg.conditioning == Conditioning::CrossAttn;
        const double L = 1 + n_img + (concat_text ? L_txt : 0);
        block_flops("block." + std::to_string(i), i, Branch::Image, L, cross);
    }
    for (int i = 0; i < cfg.depth / 2; ++i)
        add("skip_merge." + std::to_string(i), cfg.depth - cfg.depth / 2 + i, "skip-merge", Branch::Image,
            2 * (1 + n_img) * (2 * d) * d);
    add("head", -1, "output-head", Branch::Image, 2 * n_img * d * pd);
    return r;
}

// ------------------------------------------------------ attention processing

inline void check_same_layout(const AttentionRecord& a, const AttentionRecord& b) {
    if (a.rows != b.rows || a.cols != b.cols)
        throw DataError("attention records disagree in shape: " + std::to_string(a.rows) + "x" +
                        std::to_string(a.cols) + " vs " + std::to_string(b.rows) + "x" +
                        std::to_string(b.cols));
    if (a.layer_index != b.layer_index || a.cross != b.cross ||
        a.queries.image_begin != b.queries.image_begin || a.queries.image_end != b.queries.image_end ||
        a.keys.text_begin != b.keys.text_begin || a.keys.text_end != b.keys.text_end)
        throw DataError("attention records disagree in layer or token partition");
}

// Elementwise mean across timesteps of one layer's (already head-averaged)
// maps. Convexity keeps rows stochastic.
inline AttentionRecord average_attention(const std::vector<AttentionRecord>& records) {
    if (records.empty()) throw DataError("average_attention: no records");
    AttentionRecord out = records[0];
    for (size_t i = 1; i < records.size(); ++i) {
        check_same_layout(out, records[i]);
        for (size_t k = 0; k < out.matrix.size(); ++k) out.matrix[k] += records[i].matrix[k];
    }
    for (auto& v : out.matrix) v /= static_cast<double>(records.size());
    out.timesteps_averaged = 0;
    for (const auto& rec : records) out.timesteps_averaged += rec.timesteps_averaged;
    return out;
}

namespace detail {

// Indices surviving a one-ring trim of the image span of a partition; other
// token positions pass through.
inline std::vector<int> interior_indices(const TokenPartition& p, int total) {
    const int g = p.grid_side;
    if (g < 3) throw ArgError("trim_border: patch grid side " + std::to_string(g) + " has no interior");
    std::vector<int> keep;
    for (int i = 0; i < total; ++i) {
        if (i < p.image_begin || i >= p.image_end) {
            keep.push_back(i);
            continue;
        }
        const int k = i - p.image_begin;
        const int row = k / g, col = k % g;
        if (row > 0 && row < g - 1 && col > 0 && col < g - 1) keep.push_back(i);
    }
    return keep;
}

inline TokenPartition trimmed_partition(const TokenPartition& p) {
    TokenPartition q = p;
    q.grid_side = p.grid_side - 2;
    q.image_end = p.image_begin + q.grid_side * q.grid_side;
    return q;
}

}  // namespace detail

// Drops the outermost ring of the patch grid from the query rows (and from
// image-key columns when present), then renormalizes each row to sum to 1.
inline AttentionRecord trim_border(const AttentionRecord& rec) {
    const std::vector<int> rows = detail::interior_indices(rec.queries, rec.rows);
    std::vector<int> cols;
    if (rec.keys.n_image() > 0) {
        cols = detail::interior_indices(rec.keys, rec.cols);
    } else {
        cols.resize(rec.cols);
        for (int i = 0; i < rec.cols; ++i) cols[i] = i;
    }
    AttentionRecord out;
    out.layer_index = rec.layer_index;
    out.cross = rec.cross;
    out.timesteps_averaged = rec.timesteps_averaged;
    out.rows = static_cast<int>(rows.size());
    out.cols = static_cast<int>(cols.size());
    out.queries = detail::trimmed_partition(rec.queries);
    out.keys = rec.keys.n_image() > 0 ? detail::trimmed_partition(rec.keys) : rec.keys;
    out.matrix.resize(static_cast<size_t>(out.rows) * out.cols);
    for (int i = 0; i < out.rows; ++i) {
        double sum = 0;
        for (int j = 0; j < out.cols; ++j) {
            const double v = rec.matrix[static_cast<size_t>(rows[i]) * rec.cols + cols[j]];
            out.matrix[static_cast<size_t>(i) * out.cols + j] = v;
            sum += v;
        }
        if (sum > 0)
            for (int j = 0; j < out.cols; ++j) out.matrix[static_cast<size_t>(i) * out.cols + j] /= sum;
    }
    return out;
}

struct AttnMatrix {
    int rows = 0, cols = 0;
    std::vector<double> m;
};

// Image-query x text-key sub-block of an attention record: on concat joint
// blocks a slice of the self map, on cross sites the text-keyed map itself
// restricted to image queries.
inline AttnMatrix text_to_image_block(const AttentionRecord& rec) {
    if (!rec.keys.has_text())
        throw ArgError("text_to_image_block: record has no text keys (image-only block)");
    AttnMatrix out;
    out.rows = rec.queries.n_image();
    out.cols = rec.keys.text_end - rec.keys.text_begin;
    out.m.resize(static_cast<size_t>(out.rows) * out.cols);
    for (int i = 0; i < out.rows; ++i)
        for (int j = 0; j < out.cols; ++j)
            out.m[static_cast<size_t>(i) * out.cols + j] =
                rec.matrix[static_cast<size_t>(rec.queries.image_begin + i) * rec.cols +
                           rec.keys.text_begin + j];
    return out;
}

inline std::vector<double> singular_spectrum(const AttnMatrix& mat, int k = 10) {
    return svd_singular_values(mat.m, mat.rows, mat.cols, k);
}

struct SpectrumLayer {
    int layer_index = 0;
    bool cross = false;
    std::vector<double> sigmas;  // descending
};

struct SpectrumReport {
    int trim_width = 1;
    std::vector<SpectrumLayer> layers;
};

// ------------------------------------------------------------------ reports

namespace detail {

inline std::ofstream open_out(const std::string& path, bool binary = false) {
    std::ofstream os(path, binary ? std::ios::binary | std::ios::trunc : std::ios::trunc);
    if (!os) throw DataError("cannot open for writing: " + path);
    return os;
}

inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.9e", v);
    return buf;
}

}  // namespace detail

inline void write_flops_csv(const FlopsReport& r, const std::string& path) {
    std::ofstream os = detail::open_out(path);
    os << "site,block,op_class,flops\n";
    for (const auto& e : r.entries)
        os << e.site << ',' << e.block << ',' << e.op_class << ','
           << static_cast<long long>(e.flops) << '\n';
    if (!os) throw DataError("write failure: " + path);
}

inline void write_spectrum_csv(const SpectrumReport& r, const std::string& path) {
    std::ofstream os = detail::open_out(path);
    os << "layer,order,sigma\n";
    for (const auto& layer : r.layers)
        for (size_t k = 0; k < layer.sigmas.size(); ++k)
            os << layer.layer_index << ',' << k + 1 << ',' << detail::fmt_double(layer.sigmas[k]) << '\n';
    if (!os) throw DataError("write failure: " + path);
}

// Grayscale PGM (P5) of an attention map, max-normalized.
inline void write_attention_pgm(const AttnMatrix& mat, const std::string& path) {
    std::ofstream os = detail::open_out(path, true);
    double mx = 0;
    for (double v : mat.m) mx = std::max(mx, v);
    if (mx <= 0) mx = 1;
    os << "P5\n" << mat.cols << " " << mat.rows << "\n255\n";
    for (double v : mat.m) os.put(static_cast<char>(std::lround(std::clamp(v / mx, 0.0, 1.0) * 255.0)));
    if (!os) throw DataError("write failure: " + path);
}

}  // namespace fdiff

#endif
