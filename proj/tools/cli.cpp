#include <CLI11.hpp>

#include <iostream>

#include "fdiff/commands.hpp"

namespace {

struct CommonOpts {
    std::string preset = "tiny";
    std::string config_file;
    std::string fusion, conditioning;
    std::vector<std::string> sets;
    uint64_t seed = 0;
    bool seed_given = false;

    void attach(CLI::App* cmd) {
        cmd->add_option("--preset", preset, "built-in preset: tiny|desk|paper");
        cmd->add_option("--config", config_file, "config file (overrides --preset)");
        cmd->add_option("--fusion", fusion, "early|intermediate");
        cmd->add_option("--conditioning", conditioning, "concat|crossattn");
        cmd->add_option("--set", sets, "override a config key, section.key=value")->take_all();
        cmd->add_option("--seed", seed, "run seed")->each([this](const std::string&) { seed_given = true; });
    }

    fdiff::RunConfig resolve(bool* model_overridden) const {
        fdiff::RunConfig rc = config_file.empty() ? fdiff::make_preset(preset)
                                                  : fdiff::load_run_config(config_file);
        bool touched = false;
        if (!fusion.empty()) {
            rc.set("model", "fusion", fusion);
            touched = true;
        }
        if (!conditioning.empty()) {
            rc.set("model", "conditioning", conditioning);
            touched = true;
        }
        for (const std::string& s : sets) {
            rc.set_path(s);
            touched = touched || s.rfind("model.", 0) == 0;
        }
        if (seed_given) rc.seed = seed;
        rc.validate();
        if (model_overridden) *model_overridden = touched;
        return rc;
    }
};

std::vector<double> parse_omegas(const std::string& csv) {
    std::vector<double> out;
    std::istringstream is(csv);
    std::string tok;
    while (std::getline(is, tok, ',')) {
        try {
            out.push_back(std::stod(tok));
        } catch (const std::exception&) {
            throw fdiff::ArgError("bad omega value '" + tok + "' in --omegas");
        }
    }
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"text-conditioned diffusion workbench"};
    app.require_subcommand(1);

    CommonOpts gen_o, train_o, sample_o, flops_o, attn_o, count_o, sweep_o;
    int gen_n = -1;
    std::string gen_out = "runs/data";
    CLI::App* gen = app.add_subcommand("gen-data", "generate a captioned-shapes dataset");
    gen_o.attach(gen);
    gen->add_option("-n,--count", gen_n, "number of records (default: config n_train)");
    gen->add_option("--out", gen_out, "output directory");

    std::string train_data, train_out = "runs/train";
    CLI::App* train = app.add_subcommand("train", "train a model on a dataset");
    train_o.attach(train);
    train->add_option("--data", train_data, "dataset file")->required();
    train->add_option("--out", train_out, "output directory");

    std::string sample_ckpt, sample_out = "runs/samples";
    std::vector<std::string> sample_prompts;
    CLI::App* smp = app.add_subcommand("sample", "sample images from a checkpoint");
    sample_o.attach(smp);
    smp->add_option("--checkpoint", sample_ckpt, "checkpoint file")->required();
    smp->add_option("--prompt", sample_prompts, "caption, repeatable")->required()->take_all();
    smp->add_option("--out", sample_out, "output directory");

    bool flops_all = false;
    std::string flops_out;
    CLI::App* flp = app.add_subcommand("flops", "analytic FLOPs and parameter accounting");
    flops_o.attach(flp);
    flp->add_flag("--all", flops_all, "report the full fusion x conditioning matrix");
    flp->add_option("--out", flops_out, "also write flops.csv to this directory");

    std::string attn_ckpt, attn_prompt = "two red circles", attn_out = "runs/attn";
    CLI::App* attn = app.add_subcommand("analyze-attn", "attention spectra from a sampling run");
    attn_o.attach(attn);
    attn->add_option("--checkpoint", attn_ckpt, "checkpoint file")->required();
    attn->add_option("--prompt", attn_prompt, "caption to condition on");
    attn->add_option("--out", attn_out, "output directory");

    std::string count_ckpt, count_out = "runs/counts";
    int count_n = 60;
    CLI::App* cnt = app.add_subcommand("eval-count", "object-count evaluation over the prompt grid");
    count_o.attach(cnt);
    cnt->add_option("--checkpoint", count_ckpt, "checkpoint file")->required();
    cnt->add_option("-n,--count", count_n, "number of sampled images");
    cnt->add_option("--out", count_out, "output directory");

    std::string sweep_ckpt, sweep_omegas = "0,1,3", sweep_data, sweep_out = "runs/sweep";
    int sweep_n = 12;
    CLI::App* swp = app.add_subcommand("cfg-sweep", "guidance-scale sweep");
    sweep_o.attach(swp);
    swp->add_option("--checkpoint", sweep_ckpt, "checkpoint file")->required();
    swp->add_option("--omegas", sweep_omegas, "comma-separated guidance scales");
    swp->add_option("-n,--count", sweep_n, "samples per omega");
    swp->add_option("--data", sweep_data, "reference dataset for the distribution metric");
    swp->add_option("--out", sweep_out, "output directory");

    try {
        app.parse(argc, argv);
        bool touched = false;
        if (*gen) {
            fdiff::RunConfig rc = gen_o.resolve(nullptr);
            fdiff::cmd_gen_data(rc, gen_n > 0 ? gen_n : rc.n_train, gen_out);
        } else if (*train) {
            fdiff::cmd_train(train_o.resolve(nullptr), train_data, train_out, &std::cout);
        } else if (*smp) {
            fdiff::cmd_sample(sample_o.resolve(&touched), touched, sample_ckpt, sample_prompts,
                              sample_out);
        } else if (*flp) {
            fdiff::cmd_flops(flops_o.resolve(nullptr), flops_all, std::cout, flops_out);
        } else if (*attn) {
            fdiff::cmd_analyze_attn(attn_o.resolve(&touched), touched, attn_ckpt, attn_prompt, attn_out);
        } else if (*cnt) {
            fdiff::CountResult r =
                fdiff::cmd_eval_count(count_o.resolve(&touched), touched, count_ckpt, count_n, count_out);
            std::cout << "avg_error " << r.avg_error << " match_ratio " << r.match_ratio << "\n";
        } else if (*swp) {
            fdiff::cmd_cfg_sweep(sweep_o.resolve(&touched), touched, sweep_ckpt,
                                 parse_omegas(sweep_omegas), sweep_n, sweep_data, sweep_out);
        }
        return 0;
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const fdiff::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const fdiff::ArgError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 1;
    } catch (const fdiff::FormatError& e) {
        std::cerr << "format error: " << e.what() << "\n";
        return 2;
    } catch (const fdiff::DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const fdiff::NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 3;
    }
}
