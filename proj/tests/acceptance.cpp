// Acceptance suite: one pass/fail line per criterion, nonzero exit if any
// fail. Criteria 5-7 drive the full desk-scale pipeline twice (the second run
// verifies bit-exact reproducibility), so expect a long runtime.

#include <chrono>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "fd_check.hpp"
#include "lanekeep/pipeline.hpp"
#include "sim_oracle.hpp"
#include "synthetic_rnn.hpp"

using namespace lanekeep;
using clk = std::chrono::steady_clock;

namespace {

constexpr std::uint64_t kSeed = 1;

struct Outcome {
    int criterion;
    bool pass;
    std::string detail;
    double seconds;
};

std::vector<Outcome> results;

void record(int criterion, bool pass, const std::string& detail, clk::time_point t0) {
    double secs = std::chrono::duration<double>(clk::now() - t0).count();
    results.push_back({criterion, pass, detail, secs});
    std::printf("%s criterion %d: %s (%.1f s)\n", pass ? "PASS" : "FAIL", criterion,
                detail.c_str(), secs);
    std::fflush(stdout);
}

double rel_err(double a, double b) {
    return std::fabs(a - b) / std::max({1.0, std::fabs(a), std::fabs(b)});
}

Frame sample_frame(std::uint64_t seed, double offset) {
    TrackSpec t = generate_track(seed, Difficulty::train);
    WeatherPalette p = generate_palette(seed);
    SimParams sim;
    return reset(t, p, offset, sim, 32).second;
}

// ---- criterion 1: gradient correctness --------------------------------------------

void criterion_gradients() {
    auto t0 = clk::now();
    std::string detail;
    bool ok = true;

    // primitives: <= 1e-5 over >= 100 randomized trials each
    double worst_prim = 0.0;
    for (const auto& c : fdcheck::primitive_battery()) {
        Rng rng(mix_seed(0xacce97, std::hash<std::string>{}(c.name)));
        for (int trial = 0; trial < c.trials; trial++)
            worst_prim = std::max(worst_prim, c.run(rng));
    }
    if (worst_prim > 1e-5) ok = false;

    // vae_loss: 32-parameter probe <= 1e-4
    VaeConfig vc;
    vc.frame_size = 32;
    vc.latent_dim = 4;
    vc.channels_base = 4;
    VaeParams vp = VaeParams::init(vc, 3);
    Frame frame = sample_frame(5, 8.0);
    VaeLossResult base = vae_loss(frame, vp, 17);
    auto named = vp.named_params();
    Rng probe(99);
    double worst_vae = 0.0;
    const double h = 1e-6;
    for (int i = 0; i < 32; i++) {
        int pi = static_cast<int>(probe.uniform_index(named.size()));
        long j = static_cast<long>(probe.uniform_index(named[pi].second->size()));
        double saved = (*named[pi].second)[j];
        (*named[pi].second)[j] = saved + h;
        double up = vae_loss(frame, vp, 17, false).total;
        (*named[pi].second)[j] = saved - h;
        double down = vae_loss(frame, vp, 17, false).total;
        (*named[pi].second)[j] = saved;
        worst_vae = std::max(worst_vae, rel_err(base.grads[pi][j], (up - down) / (2.0 * h)));
    }
    if (worst_vae > 1e-4) ok = false;

    // seq_loss at T = 1 and T = 3: 32-parameter probe <= 1e-4
    double worst_seq = 0.0;
    for (int T : {1, 3}) {
        LstmConfig lc;
        lc.latent_dim = 2;
        lc.hidden = 3;
        LstmParams lp = LstmParams::init(lc, 100 + T);
        Rng rng(31 + T);
        std::vector<SeqStep> steps(T);
        std::vector<LatentGaussian> targets(T);
        for (int t = 0; t < T; t++) {
            steps[t].z = {rng.normal(), rng.normal()};
            steps[t].action = {rng.uniform(-1, 1), rng.uniform(-1, 1)};
            targets[t].mu = {rng.normal(), rng.normal()};
            targets[t].sigma = {rng.uniform(0.5, 1.5), rng.uniform(0.5, 1.5)};
        }
        SeqLossResult sbase = seq_loss(steps, targets, lp);
        auto snamed = lp.named_params();
        Rng sprobe(7);
        for (int i = 0; i < 32; i++) {
            int pi = static_cast<int>(sprobe.uniform_index(snamed.size()));
            long j = static_cast<long>(sprobe.uniform_index(snamed[pi].second->size()));
            double saved = (*snamed[pi].second)[j];
            (*snamed[pi].second)[j] = saved + h;
            double up = seq_loss(steps, targets, lp, nullptr, false).total;
            (*snamed[pi].second)[j] = saved - h;
            double down = seq_loss(steps, targets, lp, nullptr, false).total;
            (*snamed[pi].second)[j] = saved;
            worst_seq = std::max(worst_seq, rel_err(sbase.grads[pi][j], (up - down) / (2.0 * h)));
        }
    }
    if (worst_seq > 1e-4) ok = false;

    double secs = std::chrono::duration<double>(clk::now() - t0).count();
    if (secs > 120.0) ok = false;
    char buf[256];
    std::snprintf(buf, sizeof buf,
                  "gradients vs central differences: primitives %.2e (<=1e-5), vae %.2e, "
                  "seq %.2e (<=1e-4), budget 120s",
                  worst_prim, worst_vae, worst_seq);
    record(1, ok, buf, t0);
}

// ---- criterion 2: KL properties --------------------------------------------------------

void criterion_kl() {
    auto t0 = clk::now();
    bool ok = true;
    Rng rng(2026);
    double min_kl = 1e300;
    for (int i = 0; i < 10000; i++) {
        std::vector<double> mu0 = {rng.normal(), rng.normal(), rng.normal()};
        std::vector<double> s0 = {rng.uniform(0.1, 3.0), rng.uniform(0.1, 3.0),
                                  rng.uniform(0.1, 3.0)};
        std::vector<double> mu1 = {rng.normal(), rng.normal(), rng.normal()};
        std::vector<double> s1 = {rng.uniform(0.1, 3.0), rng.uniform(0.1, 3.0),
                                  rng.uniform(0.1, 3.0)};
        min_kl = std::min(min_kl, kl_diag_gaussian(mu0, s0, mu1, s1));
        if (kl_diag_gaussian(mu0, s0, mu0, s0) != 0.0) ok = false;
    }
    if (min_kl < 0.0) ok = false;
    double unit = kl_to_standard_normal({1.0}, {1.0});
    if (std::fabs(unit - 0.5) > 1e-12) ok = false;
    double secs = std::chrono::duration<double>(clk::now() - t0).count();
    if (secs > 10.0) ok = false;
    char buf[192];
    std::snprintf(buf, sizeof buf,
                  "diagonal-Gaussian KL: min over 1e4 pairs %.3e (>=0), identical pairs exact 0, "
                  "1-d unit case %.12f (=0.5), budget 10s",
                  min_kl, unit);
    record(2, ok, buf, t0);
}

// ---- criterion 3: CMA-ES oracles ---------------------------------------------------------

void criterion_cmaes() {
    auto t0 = clk::now();
    bool ok = true;

    auto sphere = [](const std::vector<double>& x, std::uint64_t) {
        double s = 0.0;
        for (double v : x) s += v * v;
        return -s;
    };
    EsConfig sc;
    sc.dimension = 10;
    sc.lambda = 32;
    sc.sigma0 = 0.5;
    sc.initial_mean.assign(10, 1.0);
    sc.max_generations = 300;
    sc.target_fitness = -1e-12;
    EsResult sphere_res = optimize(sphere, sc, 2024);
    double sphere_best = -sphere_res.best_fitness;
    if (!(sphere_best < 1e-10)) ok = false;

    auto rosen = [](const std::vector<double>& x, std::uint64_t) {
        double s = 0.0;
        for (std::size_t i = 0; i + 1 < x.size(); i++) {
            double a = x[i + 1] - x[i] * x[i];
            double b = 1.0 - x[i];
            s += 100.0 * a * a + b * b;
        }
        return -s;
    };
    EsConfig rc;
    rc.dimension = 5;
    rc.lambda = 32;
    rc.sigma0 = 0.5;
    rc.max_generations = 3000;
    rc.target_fitness = -1e-8;
    EsResult rosen_res = optimize(rosen, rc, 7);
    if (!(rosen_res.best_fitness > -1e-6)) ok = false;

    // rank invariance over 100 random generations
    bool rank_ok = true;
    Rng rng(123);
    EsConfig ic;
    ic.dimension = 6;
    ic.lambda = 14;
    for (int trial = 0; trial < 100; trial++) {
        EsState s = EsState::init(ic);
        s.generation = trial;
        std::vector<Candidate> pop = ask(s, 500 + trial);
        for (auto& c : pop) c.fitness = rng.normal(0.0, 3.0);
        std::vector<Candidate> tr = pop;
        for (auto& c : tr) c.fitness = 3.0 * c.fitness - 11.0;
        EsState a = tell(s, pop);
        EsState b = tell(s, tr);
        if (a.mean != b.mean || a.cov != b.cov || a.sigma != b.sigma) rank_ok = false;
    }
    if (!rank_ok) ok = false;

    double secs = std::chrono::duration<double>(clk::now() - t0).count();
    if (secs > 180.0) ok = false;
    char buf[256];
    std::snprintf(buf, sizeof buf,
                  "cma-es: sphere best %.2e (<1e-10, %zu gens), rosenbrock best %.2e (>-1e-6, "
                  "%zu gens), rank invariance %s, budget 180s",
                  sphere_best, sphere_res.history.size(), rosen_res.best_fitness,
                  rosen_res.history.size(), rank_ok ? "exact" : "VIOLATED");
    record(3, ok, buf, t0);
}

// ---- criterion 4: simulator oracle ----------------------------------------------------------

void criterion_simulator(const RunConfig& cfg, const RunPaths& run_a, bool run_a_ready) {
    auto t0 = clk::now();
    bool ok = true;

    TrackSpec track;
    track.seed = 1;
    track.centerline = {{0.0, 0.0}, {200.0, 0.0}};
    track.lane_half_width = 50.0;
    track.goal_arc_length = 190.0;
    SimParams sim;
    TrackGeometry geom(track);

    auto schedule = [](int kind, int step) -> Action {
        switch (kind) {
            case 0: return {0.0, 1.0};
            case 1: return {0.0, step < 50 ? 0.6 : -0.8};
            case 2: return {(step / 10) % 2 ? 0.05 : -0.05, 0.35};
            case 3: return {0.02, 0.5};
            default: return {0.0, 0.0};
        }
    };
    double worst = 0.0;
    for (int kind = 0; kind < 5 && ok; kind++) {
        VehicleState s = reset_state(track, 5.0, geom);
        StepMetrics m;
        sim_oracle::State o;
        o.x = s.position.x;
        o.y = s.position.y;
        for (int step = 0; step < 100; step++) {
            Action a = schedule(kind, step);
            StepResult r = step_dynamics(s, m, a, track, sim, geom);
            o = sim_oracle::integrate_step(o, a.steer, a.throttle_brake);
            worst = std::max({worst, std::fabs(r.state.position.x - o.x),
                              std::fabs(r.state.position.y - o.y),
                              std::fabs(r.state.heading - o.heading),
                              std::fabs(r.state.speed - o.speed),
                              std::fabs(r.state.arc_progress -
                                        sim_oracle::straight_arc(o.x, 200.0))});
            s = r.state;
            m = r.metrics;
        }
    }
    if (worst > 1e-9) ok = false;

    // reward telescoping across every collected episode of the desk run
    double worst_tel = 0.0;
    long episodes_checked = 0;
    if (run_a_ready) {
        std::vector<EpisodeRecord> dataset = load_dataset(cfg, run_a);
        for (const EpisodeRecord& ep : dataset) {
            double total = 0.0;
            for (double r : ep.rewards) total += r;
            StepMetrics first{};  // metrics start at zero
            const StepMetrics& last = ep.metrics.back();
            double tel = cfg.reward.k1 * (last.d - first.d) + cfg.reward.k2 * (last.v - first.v) -
                         cfg.reward.k3 * (last.s - first.s) - cfg.reward.k4 * (last.o - first.o);
            worst_tel = std::max(worst_tel, std::fabs(total - tel));
            episodes_checked++;
        }
        if (worst_tel > 1e-9) ok = false;
    } else {
        ok = false;
    }

    double secs = std::chrono::duration<double>(clk::now() - t0).count();
    if (secs > 30.0) ok = false;
    char buf[256];
    std::snprintf(buf, sizeof buf,
                  "simulator vs independent integrator: max |delta| %.2e over 5x100 steps "
                  "(<=1e-9); reward telescoping max |delta| %.2e over %ld episodes, budget 30s",
                  worst, worst_tel, episodes_checked);
    record(4, ok, buf, t0);
}

// ---- criteria 5-7: pipeline runs ------------------------------------------------------------

struct CurveCheck {
    double first = 0.0;
    double last = 0.0;
    bool ok() const { return last < 0.5 * first; }
};

CurveCheck read_curve(const std::string& csv_path, int value_column) {
    CurveCheck c;
    std::ifstream in(csv_path);
    std::string line;
    std::getline(in, line);  // header
    bool first_row = true;
    while (std::getline(in, line)) {
        std::istringstream ls(line);
        std::string cell;
        double value = 0.0;
        for (int col = 0; std::getline(ls, cell, ','); col++)
            if (col == value_column) value = std::stod(cell);
        if (first_row) {
            c.first = value;
            first_row = false;
        }
        c.last = value;
    }
    return c;
}

void run_pipeline(const RunConfig& cfg, const RunPaths& paths, const LogFn& log) {
    collect_stage(cfg, paths, log);
    vae_stage(cfg, paths, log);
    rnn_stage(cfg, paths, log);
    controller_stage(cfg, paths, log);
    write_report(cfg, paths, log);
}

}  // namespace

int main(int argc, char** argv) {
    std::string workdir = "acceptance_run";
    std::vector<int> only;
    for (int i = 1; i < argc; i++) {
        if (!std::strcmp(argv[i], "--workdir") && i + 1 < argc) workdir = argv[++i];
        if (!std::strcmp(argv[i], "--only") && i + 1 < argc) only.push_back(std::atoi(argv[++i]));
    }
    auto wanted = [&](int c) {
        return only.empty() || std::find(only.begin(), only.end(), c) != only.end();
    };
    std::filesystem::create_directories(workdir);

    RunConfig cfg;  // desk defaults
    cfg.seed = kSeed;
    RunPaths run_a(workdir + "/run_a");
    RunPaths run_b(workdir + "/run_b");

    LogFn log = [](const std::string& s) {
        std::printf("  | %s\n", s.c_str());
        std::fflush(stdout);
    };

    if (wanted(1)) criterion_gradients();
    if (wanted(2)) criterion_kl();
    if (wanted(3)) criterion_cmaes();

    // ---- run A: the desk-scale end-to-end run shared by criteria 4-6 ----
    bool run_a_ready = false;
    double stage_train_secs = 0.0, run_a_secs = 0.0;
    std::vector<EvalReport> report_a;
    if (wanted(4) || wanted(5) || wanted(6) || wanted(7)) {
        std::printf("-- running desk pipeline (run A) --\n");
        auto t0 = clk::now();
        try {
            collect_stage(cfg, run_a, log);
            auto t1 = clk::now();
            vae_stage(cfg, run_a, log);
            rnn_stage(cfg, run_a, log);
            stage_train_secs = std::chrono::duration<double>(clk::now() - t1).count();
            controller_stage(cfg, run_a, log);
            report_a = write_report(cfg, run_a, log);
            run_a_ready = true;
        } catch (const std::exception& e) {
            std::printf("run A failed: %s\n", e.what());
        }
        run_a_secs = std::chrono::duration<double>(clk::now() - t0).count();
        std::printf("-- run A finished in %.0f s --\n", run_a_secs);
    }

    if (wanted(4)) criterion_simulator(cfg, run_a, run_a_ready);

    if (wanted(5)) {
        auto t0 = clk::now();
        bool ok = run_a_ready;
        CurveCheck vae_curve, rnn_curve;
        double synth_loss = 1e300;
        if (run_a_ready) {
            vae_curve = read_curve(run_a.vae_log(), 3);
            rnn_curve = read_curve(run_a.rnn_log(), 1);
            if (!vae_curve.ok() || !rnn_curve.ok()) ok = false;
        }
        synthetic_rnn::Setup setup = synthetic_rnn::make(1);
        auto [params, hist] = synthetic_rnn::train(setup, 2);
        synth_loss = hist.back();
        if (!(synth_loss < 0.05)) ok = false;
        if (stage_train_secs > 1800.0) ok = false;
        char buf[320];
        std::snprintf(buf, sizeof buf,
                      "training curves: vae %.4f -> %.4f, rnn %.4f -> %.4f (final < 0.5x first); "
                      "synthetic constant-latent loss %.4f (<0.05); vae+rnn wall %.0fs "
                      "(budget 1800s)",
                      vae_curve.first, vae_curve.last, rnn_curve.first, rnn_curve.last, synth_loss,
                      stage_train_secs);
        record(5, ok, buf, t0);
    }

    if (wanted(6)) {
        auto t0 = clk::now();
        bool ok = run_a_ready;
        double train_pct = 0.0, town_pct = 0.0, weather_pct = 0.0, both_pct = 0.0;
        double mae_episode = 0.0, mae_train = 0.0;
        if (run_a_ready) {
            for (const EvalReport& r : report_a) {
                if (r.condition == EvalCondition::train) train_pct = r.success_pct;
                if (r.condition == EvalCondition::new_town) town_pct = r.success_pct;
                if (r.condition == EvalCondition::new_weather) weather_pct = r.success_pct;
                if (r.condition == EvalCondition::new_both) both_pct = r.success_pct;
            }
            if (!(train_pct >= 80.0)) ok = false;
            if (!(town_pct >= 50.0)) ok = false;
            if (report_a.size() != 4) ok = false;

            // closed-loop reconstructions on a train track stay close to the
            // training-set reconstruction error
            try {
                VaeParams vae = require_vae(cfg, run_a, "acceptance");
                auto frame_mae = [&](const Frame& f) {
                    LatentGaussian g = encode(f, vae);
                    LatentSample z;
                    z.z = g.mu;
                    Tensor rec = decode(z, vae);
                    Tensor orig = frame_to_tensor(f);
                    double mae = 0.0;
                    for (long i = 0; i < rec.size(); i++) mae += std::fabs(rec[i] - orig[i]);
                    return mae / rec.size();
                };
                std::vector<EpisodeRecord> dataset = load_dataset(cfg, run_a);
                long count = 0;
                for (int e = 0; e < 3; e++)
                    for (int t = 0; t < dataset[e].length(); t += 4) {
                        mae_train += frame_mae(dataset[e].frames[t]);
                        count++;
                    }
                mae_train /= count;

                std::string render_dir = run_a.dir + "/render_check";
                int steps = render_episode(cfg, run_a, cfg.pool_train_track_base + 3,
                                           cfg.pool_train_palette_base + 1, render_dir);
                long pix_count = 0;
                double abs_sum = 0.0;
                for (int t = 0; t < steps; t += 4) {
                    char name[64];
                    std::snprintf(name, sizeof name, "/obs_%04d.rgb", t);
                    std::ifstream obs_in(render_dir + name, std::ios::binary);
                    std::snprintf(name, sizeof name, "/rec_%04d.rgb", t);
                    std::ifstream rec_in(render_dir + name, std::ios::binary);
                    Frame obs = read_frame_dump(obs_in);
                    Frame rec = read_frame_dump(rec_in);
                    for (long i = 0; i < obs.buffer_length(); i++)
                        abs_sum += std::fabs(double(obs.pixels[i]) - double(rec.pixels[i])) / 255.0;
                    pix_count += obs.buffer_length();
                }
                mae_episode = abs_sum / pix_count;
                if (!(mae_episode < 1.5 * mae_train)) ok = false;
            } catch (const std::exception& e) {
                std::printf("  | render check failed: %s\n", e.what());
                ok = false;
            }
        }
        if (run_a_secs > 4.0 * 3600.0) ok = false;
        char buf[448];
        std::snprintf(buf, sizeof buf,
                      "end-to-end desk run: success train %.0f%% (>=80), new_town %.0f%% (>=50), "
                      "new_weather %.0f%%, new_both %.0f%% over %d pairs each; closed-loop recon "
                      "MAE %.4f vs train %.4f (<1.5x); wall %.0fs (budget 14400s)",
                      train_pct, town_pct, weather_pct, both_pct, cfg.eval_pairs, mae_episode,
                      mae_train, run_a_secs);
        record(6, ok, buf, t0);
    }

    if (wanted(7)) {
        auto t0 = clk::now();
        bool ok = run_a_ready;
        std::string mismatch = "none";
        if (run_a_ready) {
            std::printf("-- repeating desk pipeline (run B) --\n");
            try {
                run_pipeline(cfg, run_b, log);
                for (const char* name :
                     {"/vae.ndar", "/rnn.ndar", "/controller.ndar", "/latents.ndar",
                      "/es_state.ndar", "/report.csv", "/report.txt", "/es_history.txt",
                      "/controller.txt"}) {
                    if (file_hash_hex(run_a.dir + name) != file_hash_hex(run_b.dir + name)) {
                        ok = false;
                        mismatch = name;
                        break;
                    }
                }
            } catch (const std::exception& e) {
                ok = false;
                mismatch = std::string("run B failed: ") + e.what();
            }
        }
        char buf[256];
        std::snprintf(buf, sizeof buf,
                      "determinism: repeated run reproduces checkpoints and report byte-for-byte "
                      "(first mismatch: %s)",
                      mismatch.c_str());
        record(7, ok, buf, t0);
    }

    int failed = 0;
    for (const Outcome& o : results)
        if (!o.pass) failed++;
    std::printf("ACCEPTANCE: %zu criteria run, %d failed\n", results.size(), failed);
    return failed == 0 ? 0 : 1;
}
