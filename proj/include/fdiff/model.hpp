#ifndef FDIFF_MODEL_HPP
#define FDIFF_MODEL_HPP

#include <cmath>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "fdiff/attention.hpp"
#include "fdiff/tensor.hpp"

namespace fdiff {

enum class Fusion { Early, Intermediate };
enum class Conditioning { Concat, CrossAttn };

inline std::string to_string(Fusion f) { return f == Fusion::Early ? "early" : "intermediate"; }
inline std::string to_string(Conditioning c) { return c == Conditioning::Concat ? "concat" : "crossattn"; }

struct ModelConfig {
    Fusion fusion = Fusion::Early;
    Conditioning conditioning = Conditioning::Concat;
    int depth = 13;        // total image-branch transformer blocks, odd
    int n_image = 0;       // image-only blocks at each end (Intermediate)
    int n_text = 0;        // text-only pre-fusion blocks (Intermediate)
    int embed_dim = 512;
    int heads = 8;
    int mlp_ratio = 4;
    int patch_size = 2;
    int img_channels = 4;
    int img_size = 32;
    int text_len = 77;
    int text_in_dim = 768;
    int vocab_size = 32;

    bool operator==(const ModelConfig&) const = default;

    int grid_side() const { return img_size / patch_size; }
    int n_patches() const { return grid_side() * grid_side(); }
    int n_joint() const { return fusion == Fusion::Early ? depth : depth - 2 * n_image; }
    int patch_dim() const { return patch_size * patch_size * img_channels; }

    void validate() const {
        auto fail = [](const std::string& m) { throw ConfigError("invalid model config: " + m); };
        if (depth < 1 || depth % 2 == 0) fail("depth must be odd and positive, got " + std::to_string(depth));
        if (embed_dim % heads != 0)
            fail("embed_dim " + std::to_string(embed_dim) + " not divisible by heads " + std::to_string(heads));
        if (img_size % patch_size != 0)
            fail("img_size " + std::to_string(img_size) + " not divisible by patch_size " + std::to_string(patch_size));
        if (fusion == Fusion::Early && (n_image != 0 || n_text != 0))
            fail("early fusion requires n_image == 0 and n_text == 0");
        if (fusion == Fusion::Intermediate && depth - 2 * n_image < 1)
            fail("depth - 2*n_image must be >= 1, got " + std::to_string(depth - 2 * n_image));
        if (n_image < 0 || n_text < 0) fail("n_image/n_text must be nonnegative");
        if (text_len < 1 || text_in_dim < 1 || vocab_size < 3) fail("text dims/vocab too small");
        if (mlp_ratio < 1 || patch_size < 1 || img_channels < 1) fail("dims must be positive");
    }

    std::string canonical_text() const {
        std::ostringstream os;
        os << "fusion=" << to_string(fusion) << "\nconditioning=" << to_string(conditioning)
           << "\ndepth=" << depth << "\nn_image=" << n_image << "\nn_text=" << n_text
           << "\nembed_dim=" << embed_dim << "\nheads=" << heads << "\nmlp_ratio=" << mlp_ratio
           << "\npatch_size=" << patch_size << "\nimg_channels=" << img_channels
           << "\nimg_size=" << img_size << "\ntext_len=" << text_len << "\ntext_in_dim=" << text_in_dim
           << "\nvocab_size=" << vocab_size << "\n";
        return os.str();
    }
};

enum class Branch { Image, Text, Shared };

inline std::string to_string(Branch b) {
    switch (b) {
        case Branch::Image: return "image";
        case Branch::Text: return "text";
        default: return "shared";
    }
}

struct ParamCounts {
    long long image = 0, text = 0, shared = 0;
    long long total() const { return image + text + shared; }
};

// Closed-form parameter accounting; matches the built registry exactly.
inline ParamCounts param_count(const ModelConfig& c) {
    c.validate();
    const long long d = c.embed_dim, r = c.mlp_ratio, pd = c.patch_dim();
    const long long block = 4 * (d * d + d)            // qkvo
                            + 4 * d                    // two layer norms
                            + (d * r * d + r * d)      // mlp in
                            + (r * d * d + d);         // mlp out
    ParamCounts pc;
    pc.image = c.depth * block                          // transformer blocks
               + (c.depth / 2) * (2 * d * d + d)        // skip merges
               + pd * d + d                             // patch embed
               + (c.n_patches() + 1) * d                // image+time positional table
               + 2 * d                                  // final norm
               + d * pd + pd;                           // output head
    pc.text = static_cast<long long>(c.text_in_dim) * d + d + static_cast<long long>(c.n_text) * block;
    pc.shared = 2 * (d * d + d);                        // time-embedding MLP
    return pc;
}

// Query/key token layout of a captured attention map.
struct TokenPartition {
    int time_index = -1;    // -1 when absent
    int text_begin = 0, text_end = 0;   // empty range when no text tokens
    int image_begin = 0, image_end = 0;
    int grid_side = 0;

    bool has_text() const { return text_end > text_begin; }
    int n_image() const { return image_end - image_begin; }
};

struct AttentionRecord {
    int layer_index = 0;                  // image-branch block index
    bool cross = false;                   // false: self, true: text-keyed cross
    int rows = 0, cols = 0;
    std::vector<double> matrix;           // head-and-batch averaged, row-stochastic
    TokenPartition queries;               // row layout
    TokenPartition keys;                  // column layout (all-text for cross)
    int timesteps_averaged = 1;
};

template <typename T>
struct NamedParam {
    std::string name;
    Branch branch;
    Tensor<T> tensor;
};

template <typename T>
struct TransformerBlock {
    Tensor<T> ln1g, ln1b, ln2g, ln2b;
    AttentionParams<T> attn;
    Tensor<T> w1, b1, w2, b2;
};

// The toy text embedder standing in for the frozen CLIP encoder: vocabulary
// lookup plus a learned positional table, both in d_txt space. Trained
// jointly with the backbone but kept out of the backbone's registry.
template <typename T>
struct TextEmbedder {
    int vocab_size = 0, text_len = 0, dim = 0;
    Tensor<T> table;  // [V, d_txt]
    Tensor<T> pos;    // [L_txt, d_txt]

    static TextEmbedder build(int vocab, int len, int d_txt, Rng& rng) {
        TextEmbedder e;
        e.vocab_size = vocab;
        e.text_len = len;
        e.dim = d_txt;
        e.table = Tensor<T>::zeros({vocab, d_txt}, true);
        e.pos = Tensor<T>::zeros({len, d_txt}, true);
        for (auto& v : *e.table.data) v = static_cast<T>(rng.trunc_normal(0.02));
        // positional table starts at zero so a fresh all-NULL caption encodes
        // to identical rows (the learned empty-caption embedding)
        return e;
    }

    // ids: B*text_len token ids, row-major. NULL/PAD are ordinary vocabulary
    // rows; the NULL row is the learned empty-caption embedding.
    Tensor<T> encode(const std::vector<int>& ids, int batch) const {
        if (static_cast<int>(ids.size()) != batch * text_len)
            throw DimError("encode_text_tokens: expected " + std::to_string(batch * text_len) + " ids, got " +
                           std::to_string(ids.size()));
        return add_broadcast(embedding_rows(table, ids, batch, text_len), pos);
    }

    std::vector<NamedParam<T>> entries() const {
        return {{"text_embedder.table", Branch::Text, table}, {"text_embedder.pos", Branch::Text, pos}};
    }
};

template <typename T>
struct ForwardResult {
    Tensor<T> eps_hat;  // [B, C, S, S]
    std::vector<AttentionRecord> records;
};

template <typename T>
class Model {
public:
    ModelConfig config;

    static Model build(const ModelConfig& cfg, Rng& rng) {
        cfg.validate();
        Model m;
        m.config = cfg;
        const int d = cfg.embed_dim, r = cfg.mlp_ratio, pd = cfg.patch_dim();

        m.patch_w_ = m.reg("patch_embed.w", Branch::Image, {pd, d});
        m.patch_b_ = m.reg("patch_embed.b", Branch::Image, {d});
        m.pos_img_ = m.reg("pos_img", Branch::Image, {cfg.n_patches() + 1, d});
        m.time_w1_ = m.reg("time_mlp.w1", Branch::Shared, {d, d});
        m.time_b1_ = m.reg("time_mlp.b1", Branch::Shared, {d});
        m.time_w2_ = m.reg("time_mlp.w2", Branch::Shared, {d, d});
        m.time_b2_ = m.reg("time_mlp.b2", Branch::Shared, {d});
        m.text_w_ = m.reg("text_proj.w", Branch::Text, {cfg.text_in_dim, d});
        m.text_b_ = m.reg("text_proj.b", Branch::Text, {d});
        for (int i = 0; i < cfg.n_text; ++i)
            m.text_blocks_.push_back(m.reg_block("text_block." + std::to_string(i), Branch::Text, d, r));
        for (int i = 0; i < cfg.depth; ++i)
            m.blocks_.push_back(m.reg_block("block." + std::to_string(i), Branch::Image, d, r));
        for (int i = 0; i < cfg.depth / 2; ++i) {
            m.merge_w_.push_back(m.reg("skip_merge." + std::to_string(i) + ".w", Branch::Image, {2 * d, d}));
            m.merge_b_.push_back(m.reg("skip_merge." + std::to_string(i) + ".b", Branch::Image, {d}));
        }
        m.out_ln_g_ = m.reg("out_norm.g", Branch::Image, {d});
        m.out_ln_b_ = m.reg("out_norm.b", Branch::Image, {d});
        m.head_w_ = m.reg("head.w", Branch::Image, {d, pd});
        m.head_b_ = m.reg("head.b", Branch::Image, {pd});

        m.init(rng);
        m.build_patch_maps();
        return m;
    }

    std::vector<NamedParam<T>>& params() { return registry_; }
    const std::vector<NamedParam<T>>& params() const { return registry_; }

    long long count(Branch b) const {
        long long n = 0;
        for (const auto& e : registry_)
            if (e.branch == b) n += static_cast<long long>(e.tensor.numel());
        return n;
    }

    void zero_grad() {
        for (auto& e : registry_) e.tensor.zero_grad();
    }

    // eps-prediction forward pass. x: [B,C,S,S]; t: per-item timesteps;
    // text: [B, L_txt, d_txt] embedded caption (from TextEmbedder::encode).
    ForwardResult<T> forward(const Tensor<T>& x, const std::vector<int>& t, const Tensor<T>& text,
                             bool capture = false) const {
        const ModelConfig& c = config;
        const int B = x.dim(0);
        if (x.ndim() != 4 || x.dim(1) != c.img_channels || x.dim(2) != c.img_size || x.dim(3) != c.img_size)
            throw DimError("forward: image " + shape_str(x.shape) + " does not match config");
        if (static_cast<int>(t.size()) != B) throw DimError("forward: timestep count != batch");
        if (text.ndim() != 3 || text.dim(0) != B || text.dim(1) != c.text_len || text.dim(2) != c.text_in_dim)
            throw DimError("forward: text " + shape_str(text.shape) + " does not match config");

        ForwardResult<T> res;
        const int d = c.embed_dim, N = c.n_patches();

        // patchify + embed, prepend the time token, add positions
        Tensor<T> patches = gather_items(reshape(x, {B, c.img_channels * c.img_size * c.img_size}),
                                         patchify_idx_, {N, c.patch_dim()});
        Tensor<T> img = linear(patches, patch_w_, patch_b_);
        Tensor<T> time_tok = time_embedding(t);
        Tensor<T> seq = add_broadcast(concat_tokens<T>({time_tok, img}), pos_img_);  // [B, 1+N, d]

        // text path
        Tensor<T> txt = linear(text, text_w_, text_b_);
        for (const auto& tb : text_blocks_) txt = run_block(txt, tb, nullptr, nullptr);

        const bool concat_mode = c.conditioning == Conditioning::Concat;
        const int first_joint = (c.fusion == Fusion::Early) ? 0 : c.n_image;
        const int last_joint = first_joint + c.n_joint() - 1;

        std::vector<Tensor<T>> skips;
        bool text_in_seq = false;
        for (int i = 0; i < c.depth; ++i) {
            const bool joint = i >= first_joint && i <= last_joint;

            if (concat_mode && joint && !text_in_seq) {
                seq = insert_text(seq, txt);
                text_in_seq = true;
            }
            if (concat_mode && !joint && text_in_seq) {
                seq = drop_text(seq);
                text_in_seq = false;
            }
            if (i >= c.depth - c.depth / 2) {
                Tensor<T> skip = skips.back();
                skips.pop_back();
                seq = merge_skip(seq, skip, i - (c.depth - c.depth / 2), text_in_seq);
            }

            const Tensor<T>* cross_src = (!concat_mode && joint) ? &txt : nullptr;
            AttentionOut<T> att;
            seq = run_block(seq, blocks_[i], cross_src, &att);
            if (capture) capture_block(res.records, i, att, text_in_seq);

            if (i < c.depth / 2) skips.push_back(text_in_seq ? image_time_rows(seq) : seq);
        }
        if (text_in_seq) seq = drop_text(seq);

        Tensor<T> y = linear(layer_norm(seq, out_ln_g_, out_ln_b_), head_w_, head_b_);
        Tensor<T> img_only = select_tokens(y, range_idx(1, 1 + N));
        res.eps_hat = gather_items(reshape(img_only, {B, N * c.patch_dim()}), unpatchify_idx_,
                                   {c.img_channels, c.img_size, c.img_size});
        return res;
    }

    TokenPartition seq_partition(bool with_text) const {
        TokenPartition p;
        p.time_index = 0;
        p.grid_side = config.grid_side();
        if (with_text) {
            p.text_begin = 1;
            p.text_end = 1 + config.text_len;
        }
        p.image_begin = with_text ? 1 + config.text_len : 1;
        p.image_end = p.image_begin + config.n_patches();
        return p;
    }

private:
    std::vector<NamedParam<T>> registry_;
    Tensor<T> patch_w_, patch_b_, pos_img_, time_w1_, time_b1_, time_w2_, time_b2_, text_w_, text_b_;
    std::vector<TransformerBlock<T>> text_blocks_, blocks_;
    std::vector<Tensor<T>> merge_w_, merge_b_;
    Tensor<T> out_ln_g_, out_ln_b_, head_w_, head_b_;
    std::vector<int> patchify_idx_, unpatchify_idx_;

    Tensor<T> reg(const std::string& name, Branch br, std::vector<int> shape) {
        Tensor<T> t = Tensor<T>::zeros(std::move(shape), true);
        registry_.push_back({name, br, t});
        return t;
    }

    TransformerBlock<T> reg_block(const std::string& prefix, Branch br, int d, int r) {
        TransformerBlock<T> b;
        b.ln1g = reg(prefix + ".ln1.g", br, {d});
        b.ln1b = reg(prefix + ".ln1.b", br, {d});
        b.attn.wq = reg(prefix + ".attn.wq", br, {d, d});
        b.attn.bq = reg(prefix + ".attn.bq", br, {d});
        b.attn.wk = reg(prefix + ".attn.wk", br, {d, d});
        b.attn.bk = reg(prefix + ".attn.bk", br, {d});
        b.attn.wv = reg(prefix + ".attn.wv", br, {d, d});
        b.attn.bv = reg(prefix + ".attn.bv", br, {d});
        b.attn.wo = reg(prefix + ".attn.wo", br, {d, d});
        b.attn.bo = reg(prefix + ".attn.bo", br, {d});
        b.ln2g = reg(prefix + ".ln2.g", br, {d});
        b.ln2b = reg(prefix + ".ln2.b", br, {d});
        b.w1 = reg(prefix + ".mlp.w1", br, {d, r * d});
        b.b1 = reg(prefix + ".mlp.b1", br, {r * d});
        b.w2 = reg(prefix + ".mlp.w2", br, {r * d, d});
        b.b2 = reg(prefix + ".mlp.b2", br, {d});
        return b;
    }

    // Truncated normal (0.02) weights, zero biases, unit norm gains,
    // zero-init output head. Order follows the registry so init is a pure
    // function of (config, seed).
    void init(Rng& rng) {
        for (auto& e : registry_) {
            const bool is_matrix = e.tensor.ndim() == 2;
            const bool is_gain = e.name.ends_with("ln1.g") || e.name.ends_with("ln2.g") || e.name == "out_norm.g";
            const bool is_head = e.name.rfind("head.", 0) == 0;
            if (is_head) continue;  // stays zero
            if (is_gain) {
                std::fill(e.tensor.data->begin(), e.tensor.data->end(), T(1));
            } else if (is_matrix || e.name == "pos_img") {
                for (auto& v : *e.tensor.data) v = static_cast<T>(rng.trunc_normal(0.02));
            }
            // biases and norm shifts stay zero
        }
    }

    void build_patch_maps() {
        const ModelConfig& c = config;
        const int S = c.img_size, p = c.patch_size, g = c.grid_side(), C = c.img_channels;
        patchify_idx_.resize(static_cast<size_t>(C) * S * S);
        size_t o = 0;
        for (int gy = 0; gy < g; ++gy)
            for (int gx = 0; gx < g; ++gx)
                for (int ch = 0; ch < C; ++ch)
                    for (int py = 0; py < p; ++py)
                        for (int px = 0; px < p; ++px)
                            patchify_idx_[o++] = ch * S * S + (gy * p + py) * S + (gx * p + px);
        unpatchify_idx_.resize(patchify_idx_.size());
        for (size_t i = 0; i < patchify_idx_.size(); ++i) unpatchify_idx_[patchify_idx_[i]] = static_cast<int>(i);
    }

    static std::vector<int> range_idx(int lo, int hi) {
        std::vector<int> v;
        for (int i = lo; i < hi; ++i) v.push_back(i);
        return v;
    }

    Tensor<T> time_embedding(const std::vector<int>& t) const {
        const int d = config.embed_dim, B = static_cast<int>(t.size());
        Tensor<T> sin_emb = Tensor<T>::zeros({B, 1, d});
        const int half = d / 2;
        for (int b = 0; b < B; ++b)
            for (int i = 0; i < half; ++i) {
                double freq = std::exp(-std::log(10000.0) * i / half);
                (*sin_emb.data)[static_cast<size_t>(b) * d + i] = static_cast<T>(std::sin(t[b] * freq));
                (*sin_emb.data)[static_cast<size_t>(b) * d + half + i] = static_cast<T>(std::cos(t[b] * freq));
            }
        return linear(gelu(linear(sin_emb, time_w1_, time_b1_)), time_w2_, time_b2_);
    }

    Tensor<T> run_block(const Tensor<T>& x, const TransformerBlock<T>& b, const Tensor<T>* cross_src,
                        AttentionOut<T>* att_out) const {
        Tensor<T> n1 = layer_norm(x, b.ln1g, b.ln1b);
        AttentionOut<T> att = multi_head_attention(n1, n1, b.attn, config.heads, cross_src);
        Tensor<T> h = add(x, att.out);
        Tensor<T> m = linear(gelu(linear(layer_norm(h, b.ln2g, b.ln2b), b.w1, b.b1)), b.w2, b.b2);
        if (att_out) *att_out = att;
        return add(h, m);
    }

    Tensor<T> insert_text(const Tensor<T>& ti_seq, const Tensor<T>& txt) const {
        const int N = config.n_patches();
        Tensor<T> time_part = select_tokens(ti_seq, {0});
        Tensor<T> img_part = select_tokens(ti_seq, range_idx(1, 1 + N));
        return concat_tokens<T>({time_part, txt, img_part});
    }

    Tensor<T> drop_text(const Tensor<T>& seq) const {
        std::vector<int> keep{0};
        for (int i : range_idx(1 + config.text_len, seq.dim(1))) keep.push_back(i);
        return select_tokens(seq, keep);
    }

    Tensor<T> image_time_rows(const Tensor<T>& seq) const {
        std::vector<int> keep{0};
        for (int i : range_idx(1 + config.text_len, seq.dim(1))) keep.push_back(i);
        return select_tokens(seq, keep);
    }

    // Long-skip merge: image+time rows of the current sequence are fused with
    // the saved skip by concat + linear 2d->d; text rows pass through.
    Tensor<T> merge_skip(const Tensor<T>& seq, const Tensor<T>& skip, int merge_idx, bool text_in_seq) const {
        const int N = config.n_patches();
        Tensor<T> ti = text_in_seq ? image_time_rows(seq) : seq;
        Tensor<T> merged = linear(concat_last(ti, skip), merge_w_[merge_idx], merge_b_[merge_idx]);
        if (!text_in_seq) return merged;
        Tensor<T> time_part = select_tokens(merged, {0});
        Tensor<T> img_part = select_tokens(merged, range_idx(1, 1 + N));
        Tensor<T> txt_part = select_tokens(seq, range_idx(1, 1 + config.text_len));
        return concat_tokens<T>({time_part, txt_part, img_part});
    }

    void capture_block(std::vector<AttentionRecord>& records, int layer, const AttentionOut<T>& att,
                       bool text_in_seq) const {
        records.push_back(average_heads(att.attn, layer, false, seq_partition(text_in_seq),
                                        seq_partition(text_in_seq)));
        if (att.cross) {
            TokenPartition keyp;
            keyp.text_begin = 0;
            keyp.text_end = config.text_len;
            records.push_back(average_heads(*att.cross, layer, true, seq_partition(false), keyp));
        }
    }

    static AttentionRecord average_heads(const Tensor<T>& attn, int layer, bool cross,
                                         const TokenPartition& qp, const TokenPartition& kp) {
        const int B = attn.dim(0), h = attn.dim(1), Lq = attn.dim(2), Lk = attn.dim(3);
        AttentionRecord r;
        r.layer_index = layer;
        r.cross = cross;
        r.rows = Lq;
        r.cols = Lk;
        r.queries = qp;
        r.keys = kp;
        r.matrix.assign(static_cast<size_t>(Lq) * Lk, 0.0);
        const double inv = 1.0 / (static_cast<double>(B) * h);
        for (int b = 0; b < B; ++b)
            for (int hh = 0; hh < h; ++hh) {
                const T* m = attn.ptr() + ((static_cast<size_t>(b) * h + hh) * Lq) * Lk;
                for (size_t i = 0; i < static_cast<size_t>(Lq) * Lk; ++i) r.matrix[i] += inv * m[i];
            }
        return r;
    }
};

}  // namespace fdiff

#endif
