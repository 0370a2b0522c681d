// lanekeep: four-stage lane-keeping pipeline (collect, perception, memory,
// controller) against the built-in 2D simulator, plus evaluation tooling.

#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "lanekeep/pipeline.hpp"

using namespace lanekeep;

namespace {

struct CliOptions {
    std::string config_file;
    std::string out_dir = "run";
    std::vector<std::string> overrides;
    std::string seed_flag;

    RunConfig resolve() const {
        RunConfig cfg;
        if (!config_file.empty()) cfg = config_from_file(config_file);
        if (const char* env = std::getenv("LANEKEEP_SEED"); env && *env)
            config_set(cfg, "seed", env);
        for (const std::string& kv : overrides) {
            std::size_t eq = kv.find('=');
            if (eq == std::string::npos)
                throw ConfigError("--set expects key=value, got '" + kv + "'");
            config_set(cfg, kv.substr(0, eq), kv.substr(eq + 1));
        }
        if (!seed_flag.empty()) config_set(cfg, "seed", seed_flag);
        return cfg;
    }
};

void add_common(CLI::App* cmd, CliOptions& opt) {
    cmd->add_option("--config", opt.config_file, "flat key = value config file");
    cmd->add_option("--out", opt.out_dir, "run directory for artifacts")->capture_default_str();
    cmd->add_option("--set", opt.overrides, "override a config key, e.g. --set vae.epochs=4")
        ->take_all();
    cmd->add_option("--seed", opt.seed_flag, "master seed (also LANEKEEP_SEED)");
}

void log_line(const std::string& s) { std::cout << s << "\n" << std::flush; }

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"lane-keeping world-model pipeline"};
    app.require_subcommand(1);

    CliOptions opt;
    std::string condition = "train";
    int pairs = 0;
    std::uint64_t render_track = 0, render_palette = 0;
    std::string render_out;

    CLI::App* collect_cmd = app.add_subcommand("collect", "collect driving episodes");
    add_common(collect_cmd, opt);
    CLI::App* vae_cmd = app.add_subcommand("train-vae", "train the perception module");
    add_common(vae_cmd, opt);
    CLI::App* rnn_cmd = app.add_subcommand("train-rnn", "train the latent dynamics module");
    add_common(rnn_cmd, opt);
    CLI::App* ctrl_cmd = app.add_subcommand("train-controller", "evolve the controller");
    add_common(ctrl_cmd, opt);
    CLI::App* eval_cmd = app.add_subcommand("evaluate", "closed-loop evaluation of a condition");
    add_common(eval_cmd, opt);
    eval_cmd->add_option("--condition", condition, "train | new_town | new_weather | new_both")
        ->capture_default_str();
    eval_cmd->add_option("--pairs", pairs, "episode count (0 = eval.pairs from config)");
    CLI::App* render_cmd = app.add_subcommand("render", "dump one episode's frames + reconstructions");
    add_common(render_cmd, opt);
    render_cmd->add_option("--track-seed", render_track, "track seed")->capture_default_str();
    render_cmd->add_option("--palette-seed", render_palette, "palette seed")->capture_default_str();
    render_cmd->add_option("--render-out", render_out, "output directory (default <out>/render)");
    CLI::App* report_cmd = app.add_subcommand("report", "evaluate all conditions, write report");
    add_common(report_cmd, opt);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        RunConfig cfg = opt.resolve();
        RunPaths paths(opt.out_dir);

        if (collect_cmd->parsed()) {
            collect_stage(cfg, paths, log_line);
        } else if (vae_cmd->parsed()) {
            vae_stage(cfg, paths, log_line);
            log_line("vae checkpoint: " + paths.vae_ckpt());
        } else if (rnn_cmd->parsed()) {
            rnn_stage(cfg, paths, log_line);
            log_line("rnn checkpoint: " + paths.rnn_ckpt());
        } else if (ctrl_cmd->parsed()) {
            controller_stage(cfg, paths, log_line);
            log_line("controller checkpoint: " + paths.controller_ckpt());
        } else if (eval_cmd->parsed()) {
            EvalCondition c;
            if (condition == "train")
                c = EvalCondition::train;
            else if (condition == "new_town")
                c = EvalCondition::new_town;
            else if (condition == "new_weather")
                c = EvalCondition::new_weather;
            else if (condition == "new_both")
                c = EvalCondition::new_both;
            else
                throw ConfigError("evaluate: unknown condition '" + condition + "'");
            EvalReport r = evaluate(cfg, paths, c, pairs > 0 ? pairs : cfg.eval_pairs);
            std::printf("%s: %d/%d successes (%.1f%%), mean return %.3f\n", condition.c_str(),
                        r.successes, r.episodes, r.success_pct, r.mean_return);
        } else if (render_cmd->parsed()) {
            std::string out = render_out.empty() ? opt.out_dir + "/render" : render_out;
            int n = render_episode(cfg, paths, render_track, render_palette, out);
            std::printf("wrote %d observation/reconstruction pairs to %s\n", n, out.c_str());
        } else if (report_cmd->parsed()) {
            std::vector<EvalReport> reports = write_report(cfg, paths, log_line);
            std::ifstream txt(paths.report_txt());
            std::cout << txt.rdbuf();
        }
    } catch (const DependencyError& e) {
        std::fprintf(stderr, "dependency error: %s\n", e.what());
        return 3;
    } catch (const NumericalError& e) {
        std::fprintf(stderr, "numerical error: %s\n", e.what());
        return 4;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
