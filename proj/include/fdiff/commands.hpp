#ifndef FDIFF_COMMANDS_HPP
#define FDIFF_COMMANDS_HPP

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "fdiff/analysis.hpp"
#include "fdiff/checkpoint.hpp"
#include "fdiff/data.hpp"
#include "fdiff/diffusion.hpp"
#include "fdiff/eval.hpp"
#include "fdiff/model.hpp"
#include "fdiff/runconfig.hpp"

namespace fdiff {

// Relative output paths can be rerooted with FDIFF_OUT_ROOT.
inline std::filesystem::path resolve_out(const std::string& out_dir) {
    std::filesystem::path p(out_dir);
    if (p.is_relative()) {
        if (const char* root = std::getenv("FDIFF_OUT_ROOT")) p = std::filesystem::path(root) / p;
    }
    std::filesystem::create_directories(p);
    return p;
}

// Every run directory carries the resolved config (seed included) so any
// artifact can be regenerated from it alone.
inline void write_provenance(const RunConfig& rc, const std::filesystem::path& dir) {
    std::ofstream os(dir / "config.ini", std::ios::trunc);
    if (!os) throw DataError("cannot write " + (dir / "config.ini").string());
    os << rc.to_text();
}

struct LoadedModel {
    ModelConfig config;
    Model<float> model;
    TextEmbedder<float> embedder;
};

inline std::vector<NamedParam<float>> all_params(Model<float>& m, TextEmbedder<float>& e) {
    std::vector<NamedParam<float>> params = m.params();
    for (auto& entry : e.entries()) params.push_back(entry);
    return params;
}

// Model config always comes from the checkpoint itself; explicit user
// overrides must agree or the load is refused with both configs shown.
inline LoadedModel load_model(const std::string& ckpt_path, const RunConfig& rc, bool model_overridden) {
    LoadedCheckpoint ck = load_checkpoint(ckpt_path);
    ModelConfig cfg = model_config_from_text(ck.config_text);
    if (model_overridden && rc.model.canonical_text() != cfg.canonical_text())
        throw DataError("checkpoint/config mismatch for " + ckpt_path +
                        "\n--- checkpoint model ---\n" + cfg.canonical_text() +
                        "--- requested model ---\n" + rc.model.canonical_text());
    Rng init(0);
    LoadedModel lm{cfg, Model<float>::build(cfg, init),
                   TextEmbedder<float>::build(cfg.vocab_size, cfg.text_len, cfg.text_in_dim, init)};
    std::vector<NamedParam<float>> params = all_params(lm.model, lm.embedder);
    restore_params(ck, params);
    return lm;
}

inline DenoiseFn<float> denoiser(LoadedModel& lm) {
    return [&lm](const Tensor<float>& x, const std::vector<int>& t, const std::vector<int>& ids) {
        return lm.model.forward(x, t, lm.embedder.encode(ids, x.dim(0))).eps_hat;
    };
}

// ------------------------------------------------------------------ gen-data

inline void cmd_gen_data(const RunConfig& rc, int n, const std::string& out_dir) {
    rc.validate();
    const std::filesystem::path dir = resolve_out(out_dir);
    Dataset ds = generate_dataset(rc.scene, n, rc.model.text_len, rc.seed);
    save_dataset((dir / "dataset.bin").string(), ds);
    for (int i = 0; i < std::min<int>(4, n); ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "preview_%03d.ppm", i);
        write_ppm((dir / name).string(), ds.items[i].pixels, rc.scene.img_size);
    }
    write_provenance(rc, dir);
}

// --------------------------------------------------------------------- train

inline void cmd_train(const RunConfig& rc, const std::string& data_path, const std::string& out_dir,
                      std::ostream* log = nullptr) {
    rc.validate();
    if (rc.preset == "paper")
        throw ConfigError("the paper preset is for flops/params analysis only, not training");
    if (rc.model.img_channels != kImageChannels)
        throw ConfigError("training requires img_channels=" + std::to_string(kImageChannels) +
                          " to match the dataset");
    Dataset ds = load_dataset(data_path);
    if (ds.spec.img_size != rc.model.img_size || ds.text_len != rc.model.text_len)
        throw DataError("dataset geometry (" + std::to_string(ds.spec.img_size) + "px, text_len " +
                        std::to_string(ds.text_len) + ") does not match model config");
    if (ds.items.empty()) throw DataError("dataset is empty: " + data_path);

    const std::filesystem::path dir = resolve_out(out_dir);
    Rng root(rc.seed);
    Rng init = root.child(0), train_rng = root.child(1);
    Model<float> model = Model<float>::build(rc.model, init);
    TextEmbedder<float> emb =
        TextEmbedder<float>::build(rc.model.vocab_size, rc.model.text_len, rc.model.text_in_dim, init);
    DenoiseFn<float> fn = [&](const Tensor<float>& x, const std::vector<int>& t,
                              const std::vector<int>& ids) {
        return model.forward(x, t, emb.encode(ids, x.dim(0))).eps_hat;
    };

    TrainState<float> state(all_params(model, emb), rc.opt);
    state.cfg_drop_prob = rc.cfg_drop;
    std::vector<TrainItem> items;
    for (const auto& it : ds.items) items.push_back({it.pixels.data(), it.token_ids.data()});

    std::ofstream metrics(dir / "metrics.csv", std::ios::trunc);
    metrics << "step,loss,lr\n";
    char row[96];
    train_loop<float>(state, fn, items, {kImageChannels, rc.model.img_size, rc.model.img_size},
                      rc.model.text_len, kNullId, rc.schedule(), rc.train_steps, rc.batch_size,
                      train_rng, [&](long long step, double loss, double lr) {
                          std::snprintf(row, sizeof row, "%lld,%.9e,%.9e\n", step, loss, lr);
                          metrics << row;
                          if (log && step % 100 == 0)
                              *log << "step " << step << " loss " << loss << "\n";
                      });
    metrics.close();
    save_checkpoint((dir / "checkpoint.fdcp").string(), rc.model.canonical_text(),
                    all_params(model, emb));
    write_provenance(rc, dir);
}

// -------------------------------------------------------------------- sample

inline void cmd_sample(const RunConfig& rc, bool model_overridden, const std::string& ckpt_path,
                       const std::vector<std::string>& prompts, const std::string& out_dir) {
    if (prompts.empty()) throw ArgError("sample: no prompts given");
    const std::filesystem::path dir = resolve_out(out_dir);
    LoadedModel lm = load_model(ckpt_path, rc, model_overridden);
    if (lm.config.img_channels != kImageChannels)
        throw DataError("sampling writes 3-channel images; checkpoint has img_channels=" +
                        std::to_string(lm.config.img_channels));
    DenoiseFn<float> fn = denoiser(lm);
    DiffusionSchedule sched = DiffusionSchedule::make(rc.timesteps, rc.beta_start, rc.beta_end);
    const std::vector<int> null_ids(lm.config.text_len, kNullId);
    Rng root(rc.seed);
    for (size_t i = 0; i < prompts.size(); ++i) {
        Rng r = root.child(i);
        std::vector<int> ids = tokenize(prompts[i], lm.config.text_len);
        Tensor<float> img = sample<float>(fn, sched, {kImageChannels, lm.config.img_size, lm.config.img_size},
                                          ids, null_ids, 1, rc.omega, rc.sample_steps, r);
        char name[32];
        std::snprintf(name, sizeof name, "sample_%03zu.ppm", i);
        write_ppm((dir / name).string(), *img.data, lm.config.img_size);
    }
    write_provenance(rc, dir);
}

// --------------------------------------------------------------------- flops

inline void cmd_flops(const RunConfig& rc, bool matrix, std::ostream& out,
                      const std::string& out_dir = "") {
    auto report_one = [&](Fusion f, Conditioning c) {
        ModelConfig m = rc.model;
        m.fusion = f;
        m.conditioning = c;
        if (f == Fusion::Early) {
            m.n_image = 0;
            m.n_text = 0;
        } else if (m.n_image == 0 && m.n_text == 0) {
            m.n_image = rc.preset == "paper" ? 4 : 1;
            m.n_text = 1;
        }
        FlopsReport fr = count_flops(m);
        ParamCounts pc = param_count(m);
        char line[160];
        std::snprintf(line, sizeof line, "%-13s %-10s %10.3f GFLOPs %12lld params\n", to_string(f).c_str(),
                      to_string(c).c_str(), fr.total() / 1e9, pc.total());
        out << line;
        return fr;
    };
    FlopsReport last;
    if (matrix) {
        for (Fusion f : {Fusion::Early, Fusion::Intermediate})
            for (Conditioning c : {Conditioning::Concat, Conditioning::CrossAttn})
                last = report_one(f, c);
    } else {
        last = report_one(rc.model.fusion, rc.model.conditioning);
    }
    if (!out_dir.empty()) {
        const std::filesystem::path dir = resolve_out(out_dir);
        write_flops_csv(last, (dir / "flops.csv").string());
        write_provenance(rc, dir);
    }
}

// -------------------------------------------------------------- analyze-attn

// Samples with capture on the conditional branch, averages each layer's map
// over all sampling timesteps, trims the border ring, and reports the
// text-to-image spectra.
inline void cmd_analyze_attn(const RunConfig& rc, bool model_overridden, const std::string& ckpt_path,
                             const std::string& prompt, const std::string& out_dir) {
    const std::filesystem::path dir = resolve_out(out_dir);
    LoadedModel lm = load_model(ckpt_path, rc, model_overridden);
    DiffusionSchedule sched = DiffusionSchedule::make(rc.timesteps, rc.beta_start, rc.beta_end);
    const std::vector<int> null_ids(lm.config.text_len, kNullId);
    std::vector<int> ids = tokenize(prompt, lm.config.text_len);

    std::map<std::pair<int, bool>, std::vector<AttentionRecord>> per_layer;
    DenoiseFn<float> fn = [&](const Tensor<float>& x, const std::vector<int>& t,
                              const std::vector<int>& got) {
        const bool cond = got == ids;
        ForwardResult<float> res =
            lm.model.forward(x, t, lm.embedder.encode(got, x.dim(0)), cond);
        if (cond)
            for (auto& rec : res.records) per_layer[{rec.layer_index, rec.cross}].push_back(rec);
        return res.eps_hat;
    };
    Rng r = Rng(rc.seed).child(0);
    sample<float>(fn, sched, {lm.config.img_channels, lm.config.img_size, lm.config.img_size}, ids,
                  null_ids, 1, rc.omega, rc.sample_steps, r);

    SpectrumReport report;
    for (auto& [key, records] : per_layer) {
        AttentionRecord avg = average_attention(records);
        if (!avg.keys.has_text()) continue;  // image-only blocks carry no text signal
        AttnMatrix block = text_to_image_block(trim_border(avg));
        const int k = std::min(10, std::min(block.rows, block.cols));
        report.layers.push_back({key.first, key.second, singular_spectrum(block, k)});
        char name[48];
        std::snprintf(name, sizeof name, "attn_layer_%02d_%s.pgm", key.first,
                      key.second ? "cross" : "self");
        write_attention_pgm(block, (dir / name).string());
    }
    write_spectrum_csv(report, (dir / "spectrum.csv").string());
    write_provenance(rc, dir);
}

// ---------------------------------------------------------------- eval-count

inline std::vector<Prompt> prompt_grid(int text_len, int max_count) {
    std::vector<Prompt> prompts;
    for (int shape = 0; shape < 3; ++shape)
        for (int color = 0; color < 4; ++color)
            for (int cnt = 1; cnt <= max_count; ++cnt) {
                const std::string cap = count_word(cnt) + " " + color_word(static_cast<Color>(color)) +
                                        " " + shape_word(static_cast<Shape>(shape), cnt);
                prompts.push_back({tokenize(cap, text_len), cnt, static_cast<Color>(color)});
            }
    return prompts;
}

inline CountResult cmd_eval_count(const RunConfig& rc, bool model_overridden,
                                  const std::string& ckpt_path, int n_samples,
                                  const std::string& out_dir) {
    if (n_samples < 1) throw ArgError("eval-count: n_samples must be >= 1");
    const std::filesystem::path dir = resolve_out(out_dir);
    LoadedModel lm = load_model(ckpt_path, rc, model_overridden);
    DenoiseFn<float> fn = denoiser(lm);
    DiffusionSchedule sched = DiffusionSchedule::make(rc.timesteps, rc.beta_start, rc.beta_end);
    const std::vector<int> null_ids(lm.config.text_len, kNullId);
    std::vector<Prompt> prompts = prompt_grid(lm.config.text_len, rc.scene.max_count);

    Rng root(rc.seed);
    std::vector<CountSample> samples;
    for (int i = 0; i < n_samples; ++i) {
        const Prompt& p = prompts[i % prompts.size()];
        Rng r = root.child(i);
        Tensor<float> img = sample<float>(fn, sched, {kImageChannels, lm.config.img_size, lm.config.img_size},
                                          p.ids, null_ids, 1, rc.omega, rc.sample_steps, r);
        const int detected = count_shapes(*img.data, lm.config.img_size, p.color);
        // shape index recoverable from the prompt grid layout
        const int shape = static_cast<int>((i % prompts.size()) / (4 * rc.scene.max_count));
        samples.push_back({shape, static_cast<int>(p.color), p.count, detected});
    }
    CountResult result = aggregate_counts(samples);
    write_count_csv(result, (dir / "counts.csv").string());
    write_provenance(rc, dir);
    return result;
}

// ----------------------------------------------------------------- cfg-sweep

inline std::vector<SweepRow> cmd_cfg_sweep(const RunConfig& rc, bool model_overridden,
                                           const std::string& ckpt_path,
                                           const std::vector<double>& omegas, int n_per_omega,
                                           const std::string& data_path, const std::string& out_dir) {
    const std::filesystem::path dir = resolve_out(out_dir);
    LoadedModel lm = load_model(ckpt_path, rc, model_overridden);
    DenoiseFn<float> fn = denoiser(lm);
    DiffusionSchedule sched = DiffusionSchedule::make(rc.timesteps, rc.beta_start, rc.beta_end);
    const std::vector<int> null_ids(lm.config.text_len, kNullId);
    std::vector<Prompt> prompts = prompt_grid(lm.config.text_len, rc.scene.max_count);

    std::vector<std::vector<float>> real_set;
    if (!data_path.empty()) {
        Dataset ds = load_dataset(data_path);
        if (ds.spec.img_size != lm.config.img_size)
            throw DataError("reference dataset image size does not match checkpoint");
        for (const auto& it : ds.items) real_set.push_back(it.pixels);
    }
    std::vector<SweepRow> rows = cfg_sweep<float>(fn, sched, lm.config.img_size, prompts, null_ids,
                                                  omegas, n_per_omega, rc.sample_steps, rc.seed,
                                                  real_set);
    write_sweep_csv(rows, (dir / "sweep.csv").string());
    write_provenance(rc, dir);
    return rows;
}

}  // namespace fdiff

#endif
