#include <doctest.h>

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "fdiff/analysis.hpp"

using namespace fdiff;

namespace {

std::string tmp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

std::string slurp(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

ModelConfig published_config(Fusion f, Conditioning c) {
    ModelConfig cfg;
    cfg.fusion = f;
    cfg.conditioning = c;
    if (f == Fusion::Intermediate) {
        cfg.n_image = 4;
        cfg.n_text = 1;
    }
    return cfg;
}

// Self-attention record over a bare g x g image grid with uniform rows.
AttentionRecord grid_record(int g, int layer = 0) {
    AttentionRecord r;
    r.layer_index = layer;
    r.rows = r.cols = g * g;
    r.queries.image_begin = 0;
    r.queries.image_end = g * g;
    r.queries.grid_side = g;
    r.keys = r.queries;
    r.matrix.assign(static_cast<size_t>(r.rows) * r.cols, 1.0 / r.cols);
    return r;
}

// Concat-style record: token 0 is time, then L_txt text keys, then the grid.
AttentionRecord concat_record(int g, int L_txt, int layer = 0) {
    AttentionRecord r;
    r.layer_index = layer;
    r.rows = r.cols = 1 + L_txt + g * g;
    r.queries.time_index = 0;
    r.queries.text_begin = 1;
    r.queries.text_end = 1 + L_txt;
    r.queries.image_begin = 1 + L_txt;
    r.queries.image_end = r.rows;
    r.queries.grid_side = g;
    r.keys = r.queries;
    r.matrix.assign(static_cast<size_t>(r.rows) * r.cols, 1.0 / r.cols);
    return r;
}

}  // namespace

TEST_CASE("count_flops: published four-config totals within five percent") {
    struct Row {
        Fusion f;
        Conditioning c;
        double gflops;
    };
    const Row rows[] = {
        {Fusion::Early, Conditioning::Concat, 29.56},
        {Fusion::Intermediate, Conditioning::Concat, 25.84},
        {Fusion::Early, Conditioning::CrossAttn, 23.82},
        {Fusion::Intermediate, Conditioning::CrossAttn, 23.66},
    };
    for (const Row& row : rows) {
        FlopsReport r = count_flops(published_config(row.f, row.c));
        const double g = r.total() / 1e9;
        INFO(to_string(row.f), "+", to_string(row.c), " -> ", g, " GFLOPs, published ", row.gflops);
        CHECK(std::abs(g - row.gflops) / row.gflops < 0.05);
    }
}

TEST_CASE("count_flops: additivity, purity, branch split, monotonicity") {
    ModelConfig early = published_config(Fusion::Early, Conditioning::Concat);
    FlopsReport a = count_flops(early), b = count_flops(early);
    CHECK(a.entries.size() == b.entries.size());
    CHECK(a.total() == b.total());
    for (const auto& e : a.entries) CHECK(e.flops >= 0);
    CHECK(a.total() == doctest::Approx(a.branch_total(Branch::Image) + a.branch_total(Branch::Text) +
                                       a.branch_total(Branch::Shared))
                           .epsilon(1e-12));

    // dropping text from the end blocks at equal depth strictly cuts FLOPs
    ModelConfig inter = published_config(Fusion::Intermediate, Conditioning::Concat);
    CHECK(count_flops(inter).total() < a.total());

    FlopsReport with_mm = count_flops(early, true);
    CHECK(with_mm.total() > a.total());
    bool has_mm = false;
    for (const auto& e : with_mm.entries)
        if (e.op_class == "attention-matmul") {
            has_mm = true;
            CHECK(e.flops > 0);
        }
    CHECK(has_mm);
}

TEST_CASE("count_flops: ablation grid orders as expected") {
    const double ec = count_flops(published_config(Fusion::Early, Conditioning::Concat)).total();
    const double ic = count_flops(published_config(Fusion::Intermediate, Conditioning::Concat)).total();
    const double ex = count_flops(published_config(Fusion::Early, Conditioning::CrossAttn)).total();
    const double ix = count_flops(published_config(Fusion::Intermediate, Conditioning::CrossAttn)).total();
    CHECK(ec > ic);
    CHECK(ic > ex);
    CHECK(ex > ix);
}

TEST_CASE("average_attention: identity, midpoint, stochastic rows, mismatch") {
    AttentionRecord r = grid_record(4);
    AttentionRecord same = average_attention({r, r, r});
    CHECK(same.matrix == r.matrix);
    CHECK(same.timesteps_averaged == 3);

    AttentionRecord b = r;
    for (auto& v : b.matrix) v = 0;
    for (int i = 0; i < b.rows; ++i) b.matrix[static_cast<size_t>(i) * b.cols + i] = 1.0;  // identity
    AttentionRecord mid = average_attention({r, b});
    for (int i = 0; i < mid.rows; ++i)
        for (int j = 0; j < mid.cols; ++j)
            CHECK(mid.matrix[static_cast<size_t>(i) * mid.cols + j] ==
                  doctest::Approx(0.5 * (r.matrix[static_cast<size_t>(i) * r.cols + j] +
                                         b.matrix[static_cast<size_t>(i) * b.cols + j]))
                      .epsilon(1e-12));
    for (int i = 0; i < mid.rows; ++i) {
        double s = 0;
        for (int j = 0; j < mid.cols; ++j) s += mid.matrix[static_cast<size_t>(i) * mid.cols + j];
        CHECK(s == doctest::Approx(1.0).epsilon(1e-5));
    }

    AttentionRecord other = grid_record(3);
    CHECK_THROWS_AS(average_attention({r, other}), DataError);
    CHECK_THROWS_AS(average_attention({}), DataError);
}

TEST_CASE("trim_border: ring removal arithmetic and renormalization") {
    AttentionRecord r4 = trim_border(grid_record(4));
    CHECK(r4.rows == 4);  // 2x2 interior of 16
    CHECK(r4.cols == 4);
    CHECK(r4.queries.grid_side == 2);

    AttentionRecord r3 = trim_border(grid_record(3));
    CHECK(r3.rows == 1);  // single center token
    CHECK(r3.cols == 1);
    CHECK(r3.matrix[0] == doctest::Approx(1.0).epsilon(1e-12));

    // non-uniform map still renormalizes to stochastic rows
    AttentionRecord biased = grid_record(4);
    for (size_t i = 0; i < biased.matrix.size(); ++i) biased.matrix[i] = 1.0 + static_cast<double>(i % 7);
    AttentionRecord t = trim_border(biased);
    for (int i = 0; i < t.rows; ++i) {
        double s = 0;
        for (int j = 0; j < t.cols; ++j) s += t.matrix[static_cast<size_t>(i) * t.cols + j];
        CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }

    CHECK_THROWS_AS(trim_border(grid_record(2)), ArgError);

    // time and text tokens pass through untouched; only the grid shrinks
    AttentionRecord mixed = trim_border(concat_record(4, 5));
    CHECK(mixed.rows == 1 + 5 + 4);
    CHECK(mixed.cols == 1 + 5 + 4);
    CHECK(mixed.queries.time_index == 0);
    CHECK(mixed.queries.text_end == 6);
    CHECK(mixed.queries.image_end == 10);
}

TEST_CASE("text_to_image_block: slicing and error on image-only records") {
    AttentionRecord rec = concat_record(4, 5);
    // tag each element so the slice is verifiable
    for (int i = 0; i < rec.rows; ++i)
        for (int j = 0; j < rec.cols; ++j)
            rec.matrix[static_cast<size_t>(i) * rec.cols + j] = 100.0 * i + j;
    AttnMatrix m = text_to_image_block(rec);
    CHECK(m.rows == 16);
    CHECK(m.cols == 5);
    CHECK(m.m[0] == 100.0 * 6 + 1);  // first image query row, first text key

    // cross-attention record: keys are all text
    AttentionRecord cross;
    cross.cross = true;
    cross.rows = 16;
    cross.cols = 5;
    cross.queries.image_begin = 0;
    cross.queries.image_end = 16;
    cross.queries.grid_side = 4;
    cross.keys.text_begin = 0;
    cross.keys.text_end = 5;
    cross.matrix.assign(16 * 5, 0.2);
    AttnMatrix mc = text_to_image_block(cross);
    CHECK(mc.rows == 16);
    CHECK(mc.cols == 5);

    CHECK_THROWS_AS(text_to_image_block(grid_record(4)), ArgError);

    // trimmed concat record yields the interior x text block
    AttnMatrix interior = text_to_image_block(trim_border(rec));
    CHECK(interior.rows == 4);
    CHECK(interior.cols == 5);
}

TEST_CASE("singular_spectrum: rank-one limit and one-hot multiplicity") {
    AttnMatrix uniform;
    uniform.rows = 16;
    uniform.cols = 5;
    uniform.m.assign(16 * 5, 1.0 / 5);
    std::vector<double> s = singular_spectrum(uniform, 5);
    CHECK(s[0] == doctest::Approx(std::sqrt(16.0 / 5)).epsilon(1e-9));
    CHECK(s[1] < 1e-9);
    for (size_t i = 1; i < s.size(); ++i) {
        CHECK(s[i] <= s[i - 1]);
        CHECK(s[i] >= 0);
    }

    AttnMatrix onehot;
    onehot.rows = 6;
    onehot.cols = 4;
    onehot.m.assign(6 * 4, 0.0);
    for (int i = 0; i < 6; ++i) onehot.m[static_cast<size_t>(i) * 4 + (i < 3 ? 0 : i - 2)] = 1.0;
    // column 0 multiplicity 3, others 1
    std::vector<double> t = singular_spectrum(onehot, 4);
    CHECK(t[0] == doctest::Approx(std::sqrt(3.0)).epsilon(1e-9));
    CHECK(t[1] == doctest::Approx(1.0).epsilon(1e-9));

    CHECK_THROWS_AS(singular_spectrum(uniform, 6), ArgError);
}

TEST_CASE("report emission: stable CSVs and PGM geometry") {
    FlopsReport fr;
    fr.entries = {{"patch_embed", -1, "patch-embed", Branch::Image, 123456.0},
                  {"block.0", 0, "qkvo-projection", Branch::Image, 789.0},
                  {"head", -1, "output-head", Branch::Image, 42.0}};
    std::string fpath = tmp_path("fdiff_test_flops.csv");
    write_flops_csv(fr, fpath);
    std::string text = slurp(fpath);
    CHECK(text == "site,block,op_class,flops\n"
                  "patch_embed,-1,patch-embed,123456\n"
                  "block.0,0,qkvo-projection,789\n"
                  "head,-1,output-head,42\n");
    write_flops_csv(fr, fpath);
    CHECK(slurp(fpath) == text);

    SpectrumReport sr;
    sr.layers = {{3, false, {2.0, 0.5}}};
    std::string spath = tmp_path("fdiff_test_spectrum.csv");
    write_spectrum_csv(sr, spath);
    std::string stext = slurp(spath);
    CHECK(stext.rfind("layer,order,sigma\n3,1,", 0) == 0);
    write_spectrum_csv(sr, spath);
    CHECK(slurp(spath) == stext);

    AttnMatrix m;
    m.rows = 3;
    m.cols = 7;
    m.m.assign(21, 0.3);
    std::string ppath = tmp_path("fdiff_test_map.pgm");
    write_attention_pgm(m, ppath);
    std::string pbytes = slurp(ppath);
    CHECK(pbytes.rfind("P5\n7 3\n255\n", 0) == 0);
    CHECK(pbytes.size() == strlen("P5\n7 3\n255\n") + 21);
    std::remove(fpath.c_str());
    std::remove(spath.c_str());
    std::remove(ppath.c_str());
}

TEST_CASE("pipeline: model capture through trim and spectrum") {
    ModelConfig cfg;
    cfg.depth = 3;
    cfg.embed_dim = 8;
    cfg.heads = 2;
    cfg.mlp_ratio = 2;
    cfg.patch_size = 4;
    cfg.img_channels = 3;
    cfg.img_size = 16;  // 4x4 patch grid so a trim ring exists
    cfg.text_len = 4;
    cfg.text_in_dim = 8;
    cfg.vocab_size = 8;
    Rng rng(55);
    Model<double> model = Model<double>::build(cfg, rng);
    Tensor<double> x = normal_draw<double>(rng, {1, 3, 16, 16});
    Tensor<double> txt = normal_draw<double>(rng, {1, 4, 8});

    std::vector<AttentionRecord> t1 = model.forward(x, {5}, txt, true).records;
    std::vector<AttentionRecord> t2 = model.forward(scale(x, 0.5), {9}, txt, true).records;
    REQUIRE(t1.size() == 3);
    SpectrumReport report;
    for (size_t i = 0; i < t1.size(); ++i) {
        AttentionRecord avg = average_attention({t1[i], t2[i]});
        AttnMatrix blockm = text_to_image_block(trim_border(avg));
        CHECK(blockm.rows == 4);
        CHECK(blockm.cols == 4);
        std::vector<double> sig = singular_spectrum(blockm, 4);
        for (size_t k = 1; k < sig.size(); ++k) CHECK(sig[k] <= sig[k - 1]);
        CHECK(sig.back() >= 0);
        report.layers.push_back({t1[i].layer_index, t1[i].cross, sig});
    }
    CHECK(report.layers.size() == 3);
}
