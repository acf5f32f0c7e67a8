#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "fdiff/checkpoint.hpp"
#include "fdiff/model.hpp"

using namespace fdiff;

namespace {

ModelConfig paper_config(Fusion f, Conditioning c) {
    ModelConfig cfg;
    cfg.fusion = f;
    cfg.conditioning = c;
    cfg.depth = 13;
    cfg.embed_dim = 512;
    cfg.heads = 8;
    cfg.mlp_ratio = 4;
    cfg.patch_size = 2;
    cfg.img_channels = 4;
    cfg.img_size = 32;
    cfg.text_len = 77;
    cfg.text_in_dim = 768;
    if (f == Fusion::Intermediate) {
        cfg.n_image = 4;
        cfg.n_text = 1;
    }
    return cfg;
}

ModelConfig tiny_config(Fusion f, Conditioning c) {
    ModelConfig cfg;
    cfg.fusion = f;
    cfg.conditioning = c;
    cfg.depth = 3;
    cfg.embed_dim = 8;
    cfg.heads = 2;
    cfg.mlp_ratio = 2;
    cfg.patch_size = 4;
    cfg.img_channels = 3;
    cfg.img_size = 8;
    cfg.text_len = 4;
    cfg.text_in_dim = 8;
    cfg.vocab_size = 8;
    if (f == Fusion::Intermediate) {
        cfg.n_image = 1;
        cfg.n_text = 1;
    }
    return cfg;
}

std::vector<int> caption_ids(const ModelConfig& cfg, Rng& rng, int batch) {
    std::vector<int> ids(static_cast<size_t>(batch) * cfg.text_len);
    for (auto& id : ids) id = static_cast<int>(rng.uniform_index(cfg.vocab_size));
    return ids;
}

}  // namespace

TEST_CASE("param_count reproduces the published sizes") {
    auto early = param_count(paper_config(Fusion::Early, Conditioning::Concat));
    auto inter = param_count(paper_config(Fusion::Intermediate, Conditioning::Concat));
    CHECK(std::abs(early.total() - 45e6) / 45e6 < 0.05);
    CHECK(std::abs(inter.total() - 48e6) / 48e6 < 0.05);
    CHECK(early.image == inter.image);

    // cross-attention adds no parameters
    CHECK(param_count(paper_config(Fusion::Early, Conditioning::CrossAttn)).total() == early.total());
    CHECK(param_count(paper_config(Fusion::Intermediate, Conditioning::CrossAttn)).total() == inter.total());

    // early text branch is exactly the d_txt -> d projection
    CHECK(early.text == 768LL * 512 + 512);
}

TEST_CASE("param_count matches the built registry exactly") {
    Rng rng(5);
    for (Fusion f : {Fusion::Early, Fusion::Intermediate})
        for (Conditioning c : {Conditioning::Concat, Conditioning::CrossAttn}) {
            ModelConfig cfg = tiny_config(f, c);
            auto m = Model<float>::build(cfg, rng);
            auto pc = param_count(cfg);
            CHECK(m.count(Branch::Image) == pc.image);
            CHECK(m.count(Branch::Text) == pc.text);
            CHECK(m.count(Branch::Shared) == pc.shared);
        }
}

TEST_CASE("invalid configs are rejected with the violated constraint") {
    ModelConfig cfg = tiny_config(Fusion::Early, Conditioning::Concat);
    cfg.depth = 4;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = tiny_config(Fusion::Early, Conditioning::Concat);
    cfg.n_image = 1;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = tiny_config(Fusion::Intermediate, Conditioning::Concat);
    cfg.n_image = 2;  // depth 3 - 4 < 1
    try {
        cfg.validate();
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("n_image") != std::string::npos);
    }
}

TEST_CASE("paper token count through joint blocks") {
    ModelConfig cfg = paper_config(Fusion::Early, Conditioning::Concat);
    CHECK(cfg.n_patches() + cfg.text_len + 1 == 334);
}

TEST_CASE("forward shape contract and capture counts") {
    Rng rng(9);
    for (Fusion f : {Fusion::Early, Fusion::Intermediate})
        for (Conditioning c : {Conditioning::Concat, Conditioning::CrossAttn}) {
            ModelConfig cfg = tiny_config(f, c);
            auto model = Model<float>::build(cfg, rng);
            auto emb = TextEmbedder<float>::build(cfg.vocab_size, cfg.text_len, cfg.text_in_dim, rng);
            auto x = normal_draw<float>(rng, {2, cfg.img_channels, cfg.img_size, cfg.img_size});
            auto text = emb.encode(caption_ids(cfg, rng, 2), 2);
            auto res = model.forward(x, {3, 7}, text, true);
            CHECK(res.eps_hat.shape == x.shape);

            int self_records = 0, cross_records = 0;
            for (const auto& r : res.records) (r.cross ? cross_records : self_records)++;
            CHECK(self_records == cfg.depth);
            const int expect_cross =
                c == Conditioning::CrossAttn ? (f == Fusion::Early ? cfg.depth : cfg.n_joint()) : 0;
            CHECK(cross_records == expect_cross);

            for (const auto& r : res.records)
                for (int row = 0; row < r.rows; ++row) {
                    double s = 0;
                    for (int col = 0; col < r.cols; ++col) s += r.matrix[static_cast<size_t>(row) * r.cols + col];
                    CHECK(std::abs(s - 1.0) < 1e-5);
                }
        }
}

TEST_CASE("forward is bitwise deterministic") {
    Rng rng(21);
    ModelConfig cfg = tiny_config(Fusion::Intermediate, Conditioning::CrossAttn);
    auto model = Model<float>::build(cfg, rng);
    auto emb = TextEmbedder<float>::build(cfg.vocab_size, cfg.text_len, cfg.text_in_dim, rng);
    auto x = normal_draw<float>(rng, {1, 3, 8, 8});
    auto ids = caption_ids(cfg, rng, 1);
    auto a = model.forward(x, {5}, emb.encode(ids, 1));
    auto b = model.forward(x, {5}, emb.encode(ids, 1));
    CHECK(*a.eps_hat.data == *b.eps_hat.data);
}

TEST_CASE("encode_text_tokens") {
    Rng rng(33);
    const int null_id = 1;
    auto emb = TextEmbedder<double>::build(8, 4, 6, rng);

    SUBCASE("all-NULL caption encodes to identical rows equal to the null embedding") {
        auto t = emb.encode({null_id, null_id, null_id, null_id}, 1);
        for (int row = 0; row < 4; ++row)
            for (int j = 0; j < 6; ++j)
                CHECK(t.vals()[row * 6 + j] == doctest::Approx(emb.table.vals()[null_id * 6 + j]));
    }

    SUBCASE("deterministic") {
        auto a = emb.encode({0, 3, 2, 1}, 1);
        auto b = emb.encode({0, 3, 2, 1}, 1);
        CHECK(*a.data == *b.data);
    }

    SUBCASE("id out of range is a data error") {
        CHECK_THROWS_AS(emb.encode({0, 1, 2, 99}, 1), DataError);
    }

    SUBCASE("gradient flows to exactly the looked-up rows") {
        auto out = emb.encode({2, 2, 5, 0}, 1);
        auto loss = sum_all(out);
        backward(loss);
        for (int row = 0; row < 8; ++row) {
            double g = 0;
            for (int j = 0; j < 6; ++j) g += std::abs((*emb.table.grad)[row * 6 + j]);
            const bool used = row == 2 || row == 5 || row == 0;
            CHECK((g > 0) == used);
        }
    }
}

TEST_CASE("permuting text tokens in concat mode leaves eps_hat invariant with positions zeroed") {
    Rng rng(41);
    ModelConfig cfg = tiny_config(Fusion::Early, Conditioning::Concat);
    auto model = Model<double>::build(cfg, rng);
    auto emb = TextEmbedder<double>::build(cfg.vocab_size, cfg.text_len, cfg.text_in_dim, rng);
    // text positional table is zero at build time; keep it that way

    std::vector<int> ids{3, 5, 2, 7};
    std::vector<int> perm_ids{7, 3, 5, 2};  // permutation of the same tokens
    auto x = normal_draw<double>(rng, {1, 3, 8, 8});
    auto a = model.forward(x, {4}, emb.encode(ids, 1), true);
    auto b = model.forward(x, {4}, emb.encode(perm_ids, 1), true);
    for (size_t i = 0; i < a.eps_hat.numel(); ++i)
        CHECK(std::abs(a.eps_hat.vals()[i] - b.eps_hat.vals()[i]) < 1e-9);

    // attention over image queries: text columns are permuted, image columns unchanged
    const int perm[4] = {3, 0, 1, 2};  // ids[perm[j]] == perm_ids[j]
    const auto& ra = a.records[0];
    const auto& rb = b.records[0];
    for (int row = ra.queries.image_begin; row < ra.queries.image_end; ++row) {
        for (int j = 0; j < 4; ++j) {
            double va = ra.matrix[static_cast<size_t>(row) * ra.cols + ra.keys.text_begin + perm[j]];
            double vb = rb.matrix[static_cast<size_t>(row) * rb.cols + rb.keys.text_begin + j];
            CHECK(std::abs(va - vb) < 1e-9);
        }
        for (int col = ra.keys.image_begin; col < ra.keys.image_end; ++col) {
            double va = ra.matrix[static_cast<size_t>(row) * ra.cols + col];
            double vb = rb.matrix[static_cast<size_t>(row) * rb.cols + col];
            CHECK(std::abs(va - vb) < 1e-9);
        }
    }
}

TEST_CASE("end-to-end gradients match finite differences") {
    Rng rng(55);
    ModelConfig cfg = tiny_config(Fusion::Intermediate, Conditioning::CrossAttn);
    auto model = Model<double>::build(cfg, rng);
    auto emb = TextEmbedder<double>::build(cfg.vocab_size, cfg.text_len, cfg.text_in_dim, rng);
    auto ids = caption_ids(cfg, rng, 1);
    auto x = normal_draw<double>(rng, {1, 3, 8, 8});
    auto target = normal_draw<double>(rng, {1, 3, 8, 8});

    auto loss_fn = [&] { return mse(model.forward(x, {2}, emb.encode(ids, 1)).eps_hat, target); };

    model.zero_grad();
    auto loss = loss_fn();
    backward(loss);

    auto& params = model.params();
    for (int pick = 0; pick < 10; ++pick) {
        auto& p = params[rng.uniform_index(params.size())].tensor;
        const size_t i = rng.uniform_index(p.numel());
        const double x0 = (*p.data)[i];
        const double h = 1e-5 * std::max(1.0, std::abs(x0));
        (*p.data)[i] = x0 + h;
        double fp = loss_fn().vals()[0];
        (*p.data)[i] = x0 - h;
        double fm = loss_fn().vals()[0];
        (*p.data)[i] = x0;
        const double g_fd = (fp - fm) / (2 * h);
        const double g = (*p.grad)[i];
        CHECK(std::abs(g - g_fd) / std::max({std::abs(g), std::abs(g_fd), 1e-3}) < 1e-3);
    }
}

TEST_CASE("checkpoint round trip is bit-exact") {
    namespace fs = std::filesystem;
    Rng rng(77);
    ModelConfig cfg = tiny_config(Fusion::Intermediate, Conditioning::Concat);
    auto model = Model<float>::build(cfg, rng);
    auto emb = TextEmbedder<float>::build(cfg.vocab_size, cfg.text_len, cfg.text_in_dim, rng);

    auto entries = model.params();
    for (auto& e : emb.entries()) entries.push_back(e);

    fs::path p1 = fs::temp_directory_path() / "fdiff_ck_test1.bin";
    fs::path p2 = fs::temp_directory_path() / "fdiff_ck_test2.bin";
    save_checkpoint(p1.string(), cfg.canonical_text(), entries);

    Rng rng2(1);
    auto model2 = Model<float>::build(cfg, rng2);
    auto emb2 = TextEmbedder<float>::build(cfg.vocab_size, cfg.text_len, cfg.text_in_dim, rng2);
    auto ck = load_checkpoint(p1.string());
    CHECK(ck.config_text == cfg.canonical_text());
    auto entries2 = model2.params();
    for (auto& e : emb2.entries()) entries2.push_back(e);
    restore_params(ck, entries2);

    for (size_t i = 0; i < entries.size(); ++i) CHECK(*entries[i].tensor.data == *entries2[i].tensor.data);

    save_checkpoint(p2.string(), cfg.canonical_text(), entries2);
    std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
    std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(s1 == s2);

    // truncation is a format error
    std::ofstream trunc(p2, std::ios::binary | std::ios::trunc);
    trunc.write(s1.data(), static_cast<std::streamsize>(s1.size() / 2));
    trunc.close();
    CHECK_THROWS_AS(load_checkpoint(p2.string()), FormatError);
    fs::remove(p1);
    fs::remove(p2);
}
