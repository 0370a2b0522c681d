#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "lanekeep/cmaes.hpp"
#include "lanekeep/config.hpp"
#include "lanekeep/container.hpp"
#include "lanekeep/controller.hpp"
#include "lanekeep/parallel.hpp"
#include "lanekeep/seqmodel.hpp"
#include "lanekeep/sim.hpp"
#include "lanekeep/vae.hpp"

namespace lanekeep {

using LogFn = std::function<void(const std::string&)>;

inline int resolve_threads(const RunConfig& cfg) {
    if (cfg.threads > 0) return cfg.threads;
    unsigned hw = std::thread::hardware_concurrency();
    return hw ? static_cast<int>(hw) : 1;
}

// ---- artifact layout ---------------------------------------------------------

struct RunPaths {
    std::string dir;

    explicit RunPaths(std::string d) : dir(std::move(d)) {}

    std::string dataset_dir() const { return dir + "/dataset"; }
    std::string manifest() const { return dataset_dir() + "/manifest.txt"; }
    std::string episode_file(int i) const {
        char buf[32];
        std::snprintf(buf, sizeof buf, "/episode_%04d.ndar", i);
        return dataset_dir() + buf;
    }
    std::string config_file() const { return dir + "/config.txt"; }
    std::string vae_ckpt() const { return dir + "/vae.ndar"; }
    std::string vae_log() const { return dir + "/vae_loss.csv"; }
    std::string latents() const { return dir + "/latents.ndar"; }
    std::string rnn_ckpt() const { return dir + "/rnn.ndar"; }
    std::string rnn_log() const { return dir + "/rnn_loss.csv"; }
    std::string controller_ckpt() const { return dir + "/controller.ndar"; }
    std::string controller_text() const { return dir + "/controller.txt"; }
    std::string es_history() const { return dir + "/es_history.txt"; }
    std::string es_state() const { return dir + "/es_state.ndar"; }
    std::string report_csv() const { return dir + "/report.csv"; }
    std::string report_txt() const { return dir + "/report.txt"; }
    std::string eval_file(const std::string& condition) const {
        return dir + "/eval_" + condition + ".txt";
    }

    void ensure_dirs() const {
        std::filesystem::create_directories(dataset_dir());
    }
};

// ---- episode records ------------------------------------------------------------

enum class DriverKind { scripted, random, controller };

inline const char* driver_name(DriverKind d) {
    switch (d) {
        case DriverKind::scripted: return "scripted";
        case DriverKind::random: return "random";
        case DriverKind::controller: return "controller";
    }
    return "?";
}

// One collected trajectory. Per-step lists share one length: frames[t] is the
// observation the driver saw when choosing actions[t].
struct EpisodeRecord {
    std::uint64_t track_seed = 0;
    std::uint64_t palette_seed = 0;
    double start_offset = 0.0;
    Difficulty difficulty = Difficulty::train;
    DriverKind driver = DriverKind::scripted;
    std::vector<Frame> frames;
    std::vector<Action> actions;
    std::vector<StepMetrics> metrics;
    std::vector<double> rewards;
    Termination termination = Termination::running;

    int length() const { return static_cast<int>(frames.size()); }
    double total_return() const {
        double s = 0.0;
        for (double r : rewards) s += r;
        return s;
    }
};

inline void save_episode(const EpisodeRecord& ep, const std::string& path,
                         const std::string& cfg_hash) {
    const int t = ep.length();
    const int h = ep.frames.empty() ? 0 : ep.frames[0].height;
    const int w = ep.frames.empty() ? 0 : ep.frames[0].width;
    ArrayContainer c;
    c.meta["kind"] = "episode";
    c.meta["config_hash"] = cfg_hash;
    c.meta["track_seed"] = std::to_string(ep.track_seed);
    c.meta["palette_seed"] = std::to_string(ep.palette_seed);
    c.meta["start_offset"] = detail::fmt_double(ep.start_offset);
    c.meta["difficulty"] = ep.difficulty == Difficulty::train ? "train" : "test";
    c.meta["driver"] = driver_name(ep.driver);
    c.meta["termination"] = termination_name(ep.termination);

    Tensor frames = Tensor::zeros({t, h, w, 3});
    for (int i = 0; i < t; i++)
        for (long p = 0; p < long(h) * w * 3; p++)
            frames[long(i) * h * w * 3 + p] = ep.frames[i].pixels[p];
    c.put("frames", std::move(frames));

    Tensor actions = Tensor::zeros({t, 2});
    Tensor metrics = Tensor::zeros({t, 4});
    Tensor rewards = Tensor::zeros({t});
    for (int i = 0; i < t; i++) {
        actions[i * 2] = ep.actions[i].steer;
        actions[i * 2 + 1] = ep.actions[i].throttle_brake;
        metrics[i * 4] = ep.metrics[i].d;
        metrics[i * 4 + 1] = ep.metrics[i].v;
        metrics[i * 4 + 2] = ep.metrics[i].s;
        metrics[i * 4 + 3] = ep.metrics[i].o;
        rewards[i] = ep.rewards[i];
    }
    c.put("actions", std::move(actions));
    c.put("metrics", std::move(metrics));
    c.put("rewards", std::move(rewards));
    c.save(path);
}

inline EpisodeRecord load_episode(const std::string& path, const std::string& expect_hash) {
    ArrayContainer c = ArrayContainer::load(path);
    if (!expect_hash.empty() && c.meta_or("config_hash", "") != expect_hash)
        throw DependencyError("episode " + path + " was built from a different config (hash " +
                              c.meta_or("config_hash", "?") + ")");
    EpisodeRecord ep;
    ep.track_seed = std::stoull(c.meta_or("track_seed", "0"));
    ep.palette_seed = std::stoull(c.meta_or("palette_seed", "0"));
    ep.start_offset = std::stod(c.meta_or("start_offset", "0"));
    ep.difficulty = c.meta_or("difficulty", "train") == "test" ? Difficulty::test : Difficulty::train;
    std::string drv = c.meta_or("driver", "scripted");
    ep.driver = drv == "random" ? DriverKind::random
                : drv == "controller" ? DriverKind::controller
                                      : DriverKind::scripted;
    std::string term = c.meta_or("termination", "timeout");
    ep.termination = term == "success" ? Termination::success
                     : term == "collision" ? Termination::collision
                                           : Termination::timeout;

    const Tensor& frames = c.get("frames");
    const int t = frames.shape[0], h = frames.shape[1], w = frames.shape[2];
    ep.frames.resize(t);
    for (int i = 0; i < t; i++) {
        Frame& f = ep.frames[i];
        f.width = w;
        f.height = h;
        f.pixels.resize(static_cast<std::size_t>(h) * w * 3);
        for (long p = 0; p < long(h) * w * 3; p++)
            f.pixels[p] = static_cast<std::uint8_t>(frames[long(i) * h * w * 3 + p]);
    }
    const Tensor& actions = c.get("actions");
    const Tensor& metrics = c.get("metrics");
    const Tensor& rewards = c.get("rewards");
    ep.actions.resize(t);
    ep.metrics.resize(t);
    ep.rewards.resize(t);
    for (int i = 0; i < t; i++) {
        ep.actions[i] = {actions[i * 2], actions[i * 2 + 1]};
        ep.metrics[i] = {metrics[i * 4], metrics[i * 4 + 1], metrics[i * 4 + 2],
                         metrics[i * 4 + 3]};
        ep.rewards[i] = rewards[i];
    }
    return ep;
}

// ---- collection -------------------------------------------------------------------

struct WorldModel {
    VaeParams vae;
    LstmParams rnn;
};

// Drives one episode and records it. The controller driver runs the usual
// closed loop; scripted and random drivers never touch the networks.
inline EpisodeRecord run_collect_episode(const RunConfig& cfg, DriverKind driver,
                                         std::uint64_t track_seed, std::uint64_t palette_seed,
                                         double start_offset, std::uint64_t episode_seed,
                                         const WorldModel* wm, const ControllerParams* ctrl) {
    EpisodeRecord rec;
    rec.track_seed = track_seed;
    rec.palette_seed = palette_seed;
    rec.start_offset = start_offset;
    rec.difficulty = Difficulty::train;
    rec.driver = driver;

    TrackSpec track = generate_track(track_seed, Difficulty::train, cfg.track);
    WeatherPalette palette = generate_palette(palette_seed);
    Episode ep(track, palette, cfg.sim, cfg.frame_size, start_offset);

    PurePursuitParams pp;
    pp.target_speed = cfg.collect_target_speed;
    RandomDriver rnd(episode_seed);
    RnnState h = RnnState::zero(cfg.rnn_hidden);
    Rng z_rng(mix_seed(episode_seed, 0x7a636f6cULL));

    while (!ep.done()) {
        Action a;
        LatentSample z;
        switch (driver) {
            case DriverKind::scripted:
                a = pure_pursuit_action(ep.state(), ep.geometry(), cfg.sim, pp);
                break;
            case DriverKind::random:
                a = rnd.next();
                break;
            case DriverKind::controller: {
                LatentGaussian g = encode(ep.frame(), wm->vae);
                z.z.resize(g.dim());
                for (int i = 0; i < g.dim(); i++) z.z[i] = g.mu[i] + g.sigma[i] * z_rng.normal();
                a = act(z, h, *ctrl);
                break;
            }
        }
        rec.frames.push_back(ep.frame());
        rec.actions.push_back(a);
        double r = ep.step(a, cfg.reward);
        rec.metrics.push_back(ep.metrics());
        rec.rewards.push_back(r);
        if (driver == DriverKind::controller) h = lstm_step(h, z, a, wm->rnn).first;
    }
    rec.termination = ep.termination();
    return rec;
}

// Collect n episodes with one driver. Deterministic in (config, driver,
// index_base); episodes may be produced in parallel.
inline std::vector<EpisodeRecord> collect(const RunConfig& cfg, DriverKind driver, int n_episodes,
                                          int index_base = 0, const WorldModel* wm = nullptr,
                                          const ControllerParams* ctrl = nullptr) {
    if (n_episodes < 1) throw ContractError("collect: n_episodes must be >= 1");
    if (driver == DriverKind::controller && (!wm || !ctrl))
        throw DependencyError("collect: controller driver needs vae/rnn/controller checkpoints");
    std::vector<EpisodeRecord> out(n_episodes);
    parallel_for(n_episodes, resolve_threads(cfg), [&](int i) {
        int e = index_base + i;
        std::uint64_t track_seed =
            cfg.pool_train_track_base + static_cast<std::uint64_t>(e % cfg.pool_train_track_count);
        std::uint64_t palette_seed =
            cfg.pool_train_palette_base + static_cast<std::uint64_t>(e % cfg.collect_palettes);
        std::uint64_t episode_seed = mix_seed(cfg.seed, 0x636f6cULL, static_cast<std::uint64_t>(e));
        Rng offset_rng(mix_seed(episode_seed, 0x6f6666ULL));
        double offset = offset_rng.uniform(0.0, cfg.collect_start_offset_max);
        out[i] = run_collect_episode(cfg, driver, track_seed, palette_seed, offset, episode_seed,
                                     wm, ctrl);
    });
    return out;
}

inline void write_run_config(const RunConfig& cfg, const RunPaths& paths) {
    paths.ensure_dirs();
    std::ofstream out(paths.config_file());
    out << config_to_text(cfg);
}

// Stage 1: scripted + random episodes, one container file each, plus the
// manifest.
inline void collect_stage(const RunConfig& cfg, const RunPaths& paths, const LogFn& log = {}) {
    paths.ensure_dirs();
    write_run_config(cfg, paths);
    const std::string hash = config_hash(cfg);

    std::vector<EpisodeRecord> all = collect(cfg, DriverKind::scripted,
                                             cfg.collect_scripted_episodes, 0);
    if (cfg.collect_random_episodes > 0) {
        std::vector<EpisodeRecord> rnd =
            collect(cfg, DriverKind::random, cfg.collect_random_episodes,
                    cfg.collect_scripted_episodes);
        all.insert(all.end(), std::make_move_iterator(rnd.begin()),
                   std::make_move_iterator(rnd.end()));
    }

    std::ostringstream manifest;
    manifest << "config_hash = " << hash << "\n";
    manifest << "episodes = " << all.size() << "\n";
    long frames = 0;
    int successes = 0;
    for (std::size_t i = 0; i < all.size(); i++) {
        const EpisodeRecord& ep = all[i];
        save_episode(ep, paths.episode_file(static_cast<int>(i)), hash);
        frames += ep.length();
        if (ep.termination == Termination::success) successes++;
        char line[256];
        std::snprintf(line, sizeof line,
                      "episode_%04zu.ndar driver=%s track_seed=%llu palette_seed=%llu "
                      "start_offset=%.6f steps=%d termination=%s return=%.6f\n",
                      i, driver_name(ep.driver), (unsigned long long)ep.track_seed,
                      (unsigned long long)ep.palette_seed, ep.start_offset, ep.length(),
                      termination_name(ep.termination), ep.total_return());
        manifest << line;
    }
    std::ofstream mf(paths.manifest());
    mf << manifest.str();
    if (log)
        log("collect: " + std::to_string(all.size()) + " episodes, " + std::to_string(frames) +
            " frames, " + std::to_string(successes) + " successes");
}

inline std::vector<EpisodeRecord> load_dataset(const RunConfig& cfg, const RunPaths& paths) {
    const std::string hash = config_hash(cfg);
    std::ifstream mf(paths.manifest());
    if (!mf)
        throw DependencyError("stage vae: dataset manifest missing at " + paths.manifest() +
                              " (run collect first)");
    std::string line;
    int n_episodes = -1;
    std::string file_hash;
    while (std::getline(mf, line)) {
        std::istringstream ls(line);
        std::string key, eq;
        if (ls >> key >> eq && eq == "=") {
            if (key == "episodes") ls >> n_episodes;
            if (key == "config_hash") ls >> file_hash;
        }
    }
    if (file_hash != hash)
        throw DependencyError("dataset at " + paths.dataset_dir() +
                              " was collected under a different config");
    if (n_episodes <= 0) throw DependencyError("dataset manifest lists no episodes");
    std::vector<EpisodeRecord> out(n_episodes);
    parallel_for(n_episodes, resolve_threads(cfg),
                 [&](int i) { out[i] = load_episode(paths.episode_file(i), hash); });
    return out;
}

// Stage 2: train the perception module.
inline void vae_stage(const RunConfig& cfg, const RunPaths& paths, const LogFn& log = {}) {
    std::vector<EpisodeRecord> dataset = load_dataset(cfg, paths);
    std::vector<Frame> frames;
    for (const EpisodeRecord& ep : dataset)
        frames.insert(frames.end(), ep.frames.begin(), ep.frames.end());

    VaeConfig vc;
    vc.frame_size = cfg.frame_size;
    vc.latent_dim = cfg.latent_dim;
    vc.channels_base = cfg.vae_channels_base;
    vc.beta = cfg.vae_beta;
    VaeTrainConfig tc;
    tc.epochs = cfg.vae_epochs;
    tc.batch_size = cfg.vae_batch;
    tc.lr = cfg.vae_lr;
    tc.seed = cfg.seed;
    tc.n_threads = resolve_threads(cfg);
    tc.max_frames = cfg.vae_max_frames;

    auto [params, history] = train_vae(frames, vc, tc);
    params.save(paths.vae_ckpt(), config_hash(cfg));
    std::ofstream out(paths.vae_log());
    out << "epoch,kl_term,recon_term,total\n";
    out.precision(12);
    for (std::size_t e = 0; e < history.size(); e++) {
        out << e << "," << history[e].kl << "," << history[e].recon << "," << history[e].total
            << "\n";
        if (log)
            log("vae epoch " + std::to_string(e) + ": total " + std::to_string(history[e].total) +
                " (kl " + std::to_string(history[e].kl) + ", recon " +
                std::to_string(history[e].recon) + ")");
    }
}

inline VaeConfig vae_config_of(const RunConfig& cfg) {
    VaeConfig vc;
    vc.frame_size = cfg.frame_size;
    vc.latent_dim = cfg.latent_dim;
    vc.channels_base = cfg.vae_channels_base;
    vc.beta = cfg.vae_beta;
    return vc;
}

inline LstmConfig lstm_config_of(const RunConfig& cfg) {
    LstmConfig lc;
    lc.latent_dim = cfg.latent_dim;
    lc.hidden = cfg.rnn_hidden;
    return lc;
}

inline ControllerConfig controller_config_of(const RunConfig& cfg) {
    ControllerConfig cc;
    cc.latent_dim = cfg.latent_dim;
    cc.hidden = cfg.rnn_hidden;
    return cc;
}

inline VaeParams require_vae(const RunConfig& cfg, const RunPaths& paths, const char* stage) {
    if (!std::filesystem::exists(paths.vae_ckpt()))
        throw DependencyError(std::string("stage ") + stage + ": vae checkpoint missing at " +
                              paths.vae_ckpt() + " (run train-vae first)");
    ArrayContainer probe = ArrayContainer::load(paths.vae_ckpt());
    if (probe.meta_or("config_hash", "") != config_hash(cfg))
        throw DependencyError(std::string("stage ") + stage +
                              ": vae checkpoint was trained under a different config");
    return VaeParams::load(paths.vae_ckpt(), vae_config_of(cfg));
}

inline LstmParams require_rnn(const RunConfig& cfg, const RunPaths& paths, const char* stage) {
    if (!std::filesystem::exists(paths.rnn_ckpt()))
        throw DependencyError(std::string("stage ") + stage + ": rnn checkpoint missing at " +
                              paths.rnn_ckpt() + " (run train-rnn first)");
    ArrayContainer probe = ArrayContainer::load(paths.rnn_ckpt());
    if (probe.meta_or("config_hash", "") != config_hash(cfg))
        throw DependencyError(std::string("stage ") + stage +
                              ": rnn checkpoint was trained under a different config");
    return LstmParams::load(paths.rnn_ckpt(), lstm_config_of(cfg));
}

inline ControllerParams require_controller(const RunConfig& cfg, const RunPaths& paths,
                                           const char* stage) {
    if (!std::filesystem::exists(paths.controller_ckpt()))
        throw DependencyError(std::string("stage ") + stage + ": controller checkpoint missing at " +
                              paths.controller_ckpt() + " (run train-controller first)");
    ArrayContainer probe = ArrayContainer::load(paths.controller_ckpt());
    if (probe.meta_or("config_hash", "") != config_hash(cfg))
        throw DependencyError(std::string("stage ") + stage +
                              ": controller checkpoint was trained under a different config");
    return ControllerParams::load(paths.controller_ckpt(), controller_config_of(cfg));
}

// Encode the collected dataset with the frozen VAE into per-episode
// (mu, sigma, z, a) arrays.
inline std::vector<LatentEpisode> encode_dataset(const RunConfig& cfg,
                                                 const std::vector<EpisodeRecord>& dataset,
                                                 const VaeParams& vae) {
    std::vector<LatentEpisode> out(dataset.size());
    parallel_for(static_cast<int>(dataset.size()), resolve_threads(cfg), [&](int e) {
        const EpisodeRecord& ep = dataset[e];
        LatentEpisode& le = out[e];
        Rng z_rng(mix_seed(cfg.seed, 0x656e63ULL, static_cast<std::uint64_t>(e)));
        for (int t = 0; t < ep.length(); t++) {
            LatentGaussian g = encode(ep.frames[t], vae);
            std::vector<double> z(g.dim());
            for (int i = 0; i < g.dim(); i++) z[i] = g.mu[i] + g.sigma[i] * z_rng.normal();
            le.mu.push_back(std::move(g.mu));
            le.sigma.push_back(std::move(g.sigma));
            le.z.push_back(std::move(z));
            le.actions.push_back(ep.actions[t]);
        }
    });
    return out;
}

inline void save_latents(const std::vector<LatentEpisode>& eps, const std::string& path,
                         const std::string& cfg_hash) {
    ArrayContainer c;
    c.meta["kind"] = "latents";
    c.meta["config_hash"] = cfg_hash;
    c.meta["episodes"] = std::to_string(eps.size());
    for (std::size_t e = 0; e < eps.size(); e++) {
        const LatentEpisode& ep = eps[e];
        const int t = ep.length();
        const int latent = t ? static_cast<int>(ep.mu[0].size()) : 0;
        char prefix[32];
        std::snprintf(prefix, sizeof prefix, "ep%04zu_", e);
        auto pack = [&](const std::vector<std::vector<double>>& rows) {
            Tensor m = Tensor::zeros({t, latent});
            for (int i = 0; i < t; i++)
                for (int j = 0; j < latent; j++) m[long(i) * latent + j] = rows[i][j];
            return m;
        };
        c.put(std::string(prefix) + "mu", pack(ep.mu));
        c.put(std::string(prefix) + "sigma", pack(ep.sigma));
        c.put(std::string(prefix) + "z", pack(ep.z));
        Tensor a = Tensor::zeros({t, 2});
        for (int i = 0; i < t; i++) {
            a[i * 2] = ep.actions[i].steer;
            a[i * 2 + 1] = ep.actions[i].throttle_brake;
        }
        c.put(std::string(prefix) + "a", std::move(a));
    }
    c.save(path);
}

inline std::vector<LatentEpisode> load_latents(const std::string& path,
                                               const std::string& expect_hash) {
    ArrayContainer c = ArrayContainer::load(path);
    if (c.meta_or("config_hash", "") != expect_hash)
        throw DependencyError("latent dataset " + path + " was built under a different config");
    int n = std::stoi(c.meta_or("episodes", "0"));
    std::vector<LatentEpisode> out(n);
    for (int e = 0; e < n; e++) {
        char prefix[32];
        std::snprintf(prefix, sizeof prefix, "ep%04d_", e);
        const Tensor& mu = c.get(std::string(prefix) + "mu");
        const Tensor& sigma = c.get(std::string(prefix) + "sigma");
        const Tensor& z = c.get(std::string(prefix) + "z");
        const Tensor& a = c.get(std::string(prefix) + "a");
        const int t = mu.shape[0], latent = mu.shape[1];
        LatentEpisode& le = out[e];
        for (int i = 0; i < t; i++) {
            le.mu.emplace_back(mu.data.begin() + long(i) * latent,
                               mu.data.begin() + long(i + 1) * latent);
            le.sigma.emplace_back(sigma.data.begin() + long(i) * latent,
                                  sigma.data.begin() + long(i + 1) * latent);
            le.z.emplace_back(z.data.begin() + long(i) * latent,
                              z.data.begin() + long(i + 1) * latent);
            le.actions.push_back({a[i * 2], a[i * 2 + 1]});
        }
    }
    return out;
}

// Stage 3: encode the dataset with the frozen VAE, then train the LSTM.
inline void rnn_stage(const RunConfig& cfg, const RunPaths& paths, const LogFn& log = {}) {
    VaeParams vae = require_vae(cfg, paths, "rnn");
    std::vector<EpisodeRecord> dataset = load_dataset(cfg, paths);
    std::vector<LatentEpisode> latents = encode_dataset(cfg, dataset, vae);
    save_latents(latents, paths.latents(), config_hash(cfg));

    RnnTrainConfig tc;
    tc.epochs = cfg.rnn_epochs;
    tc.window = cfg.rnn_window;
    tc.batch_episodes = cfg.rnn_batch_episodes;
    tc.lr = cfg.rnn_lr;
    tc.seed = cfg.seed;
    tc.n_threads = resolve_threads(cfg);

    auto [params, history] = train_rnn(latents, lstm_config_of(cfg), tc);
    params.save(paths.rnn_ckpt(), config_hash(cfg));
    std::ofstream out(paths.rnn_log());
    out << "epoch,kl\n";
    out.precision(12);
    for (std::size_t e = 0; e < history.size(); e++) {
        out << e << "," << history[e] << "\n";
        if (log) log("rnn epoch " + std::to_string(e) + ": kl " + std::to_string(history[e]));
    }
}

// ---- closed-loop rollouts ------------------------------------------------------------

// Optional per-step instrumentation: everything the action at step t was
// computed from, for verifying the (z_t, h_{t-1}) timing contract.
struct StepTrace {
    std::vector<std::vector<double>> z;
    std::vector<std::vector<double>> h_prev;
    std::vector<Action> actions;
};

struct RolloutResult {
    double total_return = 0.0;
    Termination termination = Termination::running;
    int steps = 0;
};

// frame -> encode -> (sampled z | posterior mean) -> act(z, h_{t-1}) ->
// env.step -> lstm_step updates h.
inline RolloutResult policy_rollout(const RunConfig& cfg, const WorldModel& wm,
                                    const ControllerParams& ctrl, std::uint64_t track_seed,
                                    Difficulty difficulty, std::uint64_t palette_seed,
                                    double start_offset, bool sample_z, std::uint64_t z_seed,
                                    StepTrace* trace = nullptr) {
    TrackSpec track = generate_track(track_seed, difficulty, cfg.track);
    WeatherPalette palette = generate_palette(palette_seed);
    Episode ep(track, palette, cfg.sim, cfg.frame_size, start_offset);
    RnnState h = RnnState::zero(cfg.rnn_hidden);
    Rng z_rng(mix_seed(z_seed, 0x726f6c6cULL));

    RolloutResult out;
    while (!ep.done()) {
        LatentGaussian g = encode(ep.frame(), wm.vae);
        LatentSample z;
        z.z.resize(g.dim());
        for (int i = 0; i < g.dim(); i++)
            z.z[i] = sample_z ? g.mu[i] + g.sigma[i] * z_rng.normal() : g.mu[i];
        Action a = act(z, h, ctrl);
        if (trace) {
            trace->z.push_back(z.z);
            trace->h_prev.push_back(h.h);
            trace->actions.push_back(a);
        }
        out.total_return += ep.step(a, cfg.reward);
        h = lstm_step(h, z, a, wm.rnn).first;
        out.steps++;
    }
    out.termination = ep.termination();
    return out;
}

// Stage 4: evolve the controller. Fitness is the mean return over
// es.rollouts episodes whose track seeds rotate per generation (shared by all
// candidates); the candidate shipped is the one with the best return on a
// fixed validation set, re-measured once per generation.
inline void controller_stage(const RunConfig& cfg, const RunPaths& paths, const LogFn& log = {}) {
    WorldModel wm{require_vae(cfg, paths, "controller"), require_rnn(cfg, paths, "controller")};
    const ControllerConfig cc = controller_config_of(cfg);
    const std::string hash = config_hash(cfg);
    const int threads = resolve_threads(cfg);
    const int k_rollouts = std::max(1, cfg.es_rollouts);
    const int v_rollouts = std::max(1, cfg.es_validation_rollouts);

    EsConfig es;
    es.dimension = cc.n_params();
    es.lambda = cfg.es_lambda;
    es.sigma0 = cfg.es_sigma0;
    es.elite_fraction = cfg.es_elite_fraction;
    es.equal_weights = cfg.es_equal_weights;
    es.max_generations = cfg.es_max_generations;
    es.initial_mean.assign(es.dimension, 0.0);
    es.initial_mean[es.dimension - 1] = cfg.es_throttle_bias;  // throttle bias pre-tanh
    EsState state = EsState::init(es);

    auto fitness_rollout = [&](const std::vector<double>& x, long gen, int j,
                               std::uint64_t z_seed) {
        ControllerParams ctrl = ControllerParams::unflatten(x, cc);
        std::uint64_t track_seed =
            cfg.pool_train_track_base +
            static_cast<std::uint64_t>((gen * k_rollouts + j) % cfg.pool_train_track_count);
        std::uint64_t palette_seed =
            cfg.pool_train_palette_base +
            static_cast<std::uint64_t>((gen * k_rollouts + j) % cfg.collect_palettes);
        return policy_rollout(cfg, wm, ctrl, track_seed, Difficulty::train, palette_seed, 0.0,
                              true, z_seed)
            .total_return;
    };
    // validation tracks: the tail of the train pool, fixed for the whole run
    auto validation_return = [&](const std::vector<double>& x) {
        ControllerParams ctrl = ControllerParams::unflatten(x, cc);
        std::vector<double> returns(v_rollouts);
        parallel_for(v_rollouts, threads, [&](int j) {
            std::uint64_t track_seed =
                cfg.pool_train_track_base +
                static_cast<std::uint64_t>(cfg.pool_train_track_count - 1 - j);
            // stride the palette pool so hard palettes participate in selection
            std::uint64_t palette_seed =
                cfg.pool_train_palette_base +
                static_cast<std::uint64_t>((j * 3 + 1) % cfg.collect_palettes);
            // z = posterior mean, exactly like the closed-loop evaluation the
            // shipped controller faces
            returns[j] = policy_rollout(cfg, wm, ctrl, track_seed, Difficulty::train, palette_seed,
                                        0.0, false, mix_seed(cfg.seed, 0x76616cULL, j))
                             .total_return;
        });
        double sum = 0.0;
        for (double r : returns) sum += r;
        return sum / v_rollouts;
    };

    std::ofstream hist(paths.es_history());
    hist.precision(10);
    std::vector<double> best_x;
    double best_val = -std::numeric_limits<double>::infinity();

    for (long gen = 0; gen < cfg.es_max_generations; gen++) {
        std::vector<Candidate> pop = ask(state, mix_seed(cfg.seed, 0x6374726cULL));
        const int lambda = static_cast<int>(pop.size());
        std::vector<double> fitness(lambda * k_rollouts);
        parallel_for(lambda * k_rollouts, threads, [&](int idx) {
            int i = idx / k_rollouts, j = idx % k_rollouts;
            fitness[idx] = fitness_rollout(
                pop[i].x, gen, j,
                mix_seed(cfg.seed, 0x726f6cULL, static_cast<std::uint64_t>(gen),
                         static_cast<std::uint64_t>(idx)));
        });
        int gen_best = 0;
        for (int i = 0; i < lambda; i++) {
            double sum = 0.0;
            for (int j = 0; j < k_rollouts; j++) sum += fitness[i * k_rollouts + j];
            pop[i].fitness = sum / k_rollouts;
            if (pop[i].fitness > pop[gen_best].fitness) gen_best = i;
        }

        // candidates for the incumbent: this generation's best and the
        // current distribution mean (often the more robust solution under
        // rollout noise)
        double val = validation_return(pop[gen_best].x);
        double val_mean = validation_return(state.mean);
        const std::vector<double>& val_x = val_mean > val ? state.mean : pop[gen_best].x;
        double val_best = std::max(val, val_mean);
        if (val_best > best_val) {
            best_val = val_best;
            best_x = val_x;
            // keep the incumbent on disk so long runs are inspectable
            ControllerParams(ControllerParams::unflatten(best_x, cc))
                .save(paths.controller_ckpt(), hash);
        }

        EsHistoryRow row;
        row.generation = gen;
        row.sigma = state.sigma;
        row.best_fitness = pop[gen_best].fitness;
        double mean_sum = 0.0;
        for (const Candidate& c : pop) mean_sum += c.fitness;
        row.mean_fitness = mean_sum / lambda;
        double norm2 = 0.0;
        for (double v : state.mean) norm2 += v * v;
        row.mean_norm = std::sqrt(norm2);
        hist << format_history_row(row) << "\n";
        hist.flush();
        if (log)
            log("controller gen " + std::to_string(gen) + ": best " +
                std::to_string(row.best_fitness) + " mean " + std::to_string(row.mean_fitness) +
                " val " + std::to_string(val) + "/" + std::to_string(val_mean) + " sigma " +
                std::to_string(row.sigma));

        state = tell(state, pop);
        if (!std::isnan(cfg.es_target_return) && best_val >= cfg.es_target_return) {
            if (log) log("controller: validation target reached, stopping early");
            break;
        }
    }

    ControllerParams best = ControllerParams::unflatten(best_x, cc);
    best.save(paths.controller_ckpt(), hash);
    best.save_text(paths.controller_text());
    state.save(paths.es_state(), hash);
}

// ---- evaluation ------------------------------------------------------------------------

enum class EvalCondition { train, new_town, new_weather, new_both };

inline const char* condition_name(EvalCondition c) {
    switch (c) {
        case EvalCondition::train: return "train";
        case EvalCondition::new_town: return "new_town";
        case EvalCondition::new_weather: return "new_weather";
        case EvalCondition::new_both: return "new_both";
    }
    return "?";
}

struct EvalEpisodeRow {
    std::uint64_t track_seed = 0;
    std::uint64_t palette_seed = 0;
    double start_offset = 0.0;
    Termination termination = Termination::running;
    double total_return = 0.0;
    int steps = 0;
};

struct EvalReport {
    EvalCondition condition = EvalCondition::train;
    int episodes = 0;
    int successes = 0;
    double success_pct = 0.0;
    double mean_return = 0.0;
    std::vector<EvalEpisodeRow> rows;
};

// Closed-loop evaluation over seeded start-goal pairs drawn from the
// condition's track/palette pools. The controller consumes the posterior
// mean (z = mu) at evaluation time.
inline EvalReport evaluate(const RunConfig& cfg, const RunPaths& paths, EvalCondition condition,
                           int n_pairs) {
    if (n_pairs < 1) throw ContractError("evaluate: n_pairs must be >= 1");
    WorldModel wm{require_vae(cfg, paths, "evaluate"), require_rnn(cfg, paths, "evaluate")};
    ControllerParams ctrl = require_controller(cfg, paths, "evaluate");

    const bool test_tracks =
        condition == EvalCondition::new_town || condition == EvalCondition::new_both;
    const bool test_palettes =
        condition == EvalCondition::new_weather || condition == EvalCondition::new_both;

    EvalReport report;
    report.condition = condition;
    report.episodes = n_pairs;
    report.rows.resize(n_pairs);

    parallel_for(n_pairs, resolve_threads(cfg), [&](int i) {
        Rng pair_rng(mix_seed(cfg.seed, 0x6576616cULL, static_cast<std::uint64_t>(condition),
                              static_cast<std::uint64_t>(i)));
        EvalEpisodeRow row;
        row.track_seed = test_tracks
                             ? cfg.pool_test_track_base +
                                   pair_rng.uniform_index(cfg.pool_test_track_count)
                             : cfg.pool_train_track_base +
                                   pair_rng.uniform_index(cfg.pool_train_track_count);
        row.palette_seed = test_palettes
                               ? cfg.pool_test_palette_base +
                                     pair_rng.uniform_index(cfg.pool_test_palette_count)
                               : cfg.pool_train_palette_base +
                                     pair_rng.uniform_index(cfg.collect_palettes);
        row.start_offset = pair_rng.uniform(0.0, cfg.collect_start_offset_max);
        RolloutResult r = policy_rollout(cfg, wm, ctrl, row.track_seed,
                                         test_tracks ? Difficulty::test : Difficulty::train,
                                         row.palette_seed, row.start_offset, false, 0);
        row.termination = r.termination;
        row.total_return = r.total_return;
        row.steps = r.steps;
        report.rows[i] = row;
    });

    double ret_sum = 0.0;
    for (const EvalEpisodeRow& row : report.rows) {
        if (row.termination == Termination::success) report.successes++;
        ret_sum += row.total_return;
    }
    report.success_pct = 100.0 * report.successes / report.episodes;
    report.mean_return = ret_sum / report.episodes;

    std::ofstream out(paths.eval_file(condition_name(condition)));
    out << "condition = " << condition_name(condition) << "\n";
    out << "episodes = " << report.episodes << "\n";
    out << "successes = " << report.successes << "\n";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.2f", report.success_pct);
    out << "success_pct = " << buf << "\n";
    std::snprintf(buf, sizeof buf, "%.6f", report.mean_return);
    out << "mean_return = " << buf << "\n";
    for (const EvalEpisodeRow& row : report.rows) {
        char line[192];
        std::snprintf(line, sizeof line,
                      "pair track_seed=%llu palette_seed=%llu start_offset=%.6f steps=%d "
                      "termination=%s return=%.6f\n",
                      (unsigned long long)row.track_seed, (unsigned long long)row.palette_seed,
                      row.start_offset, row.steps, termination_name(row.termination),
                      row.total_return);
        out << line;
    }
    return report;
}

// Runs all four conditions and writes the generalization report.
inline std::vector<EvalReport> write_report(const RunConfig& cfg, const RunPaths& paths,
                                            const LogFn& log = {}) {
    std::vector<EvalReport> reports;
    for (EvalCondition c : {EvalCondition::train, EvalCondition::new_town,
                            EvalCondition::new_weather, EvalCondition::new_both}) {
        reports.push_back(evaluate(cfg, paths, c, cfg.eval_pairs));
        if (log)
            log(std::string("evaluate ") + condition_name(c) + ": " +
                std::to_string(reports.back().successes) + "/" +
                std::to_string(reports.back().episodes) + " successes");
    }

    std::ofstream csv(paths.report_csv());
    csv << "condition,episodes,successes,success_pct,mean_return\n";
    for (const EvalReport& r : reports) {
        char line[160];
        std::snprintf(line, sizeof line, "%s,%d,%d,%.2f,%.6f\n", condition_name(r.condition),
                      r.episodes, r.successes, r.success_pct, r.mean_return);
        csv << line;
    }

    std::ofstream txt(paths.report_txt());
    txt << "Lane keeping generalization report\n";
    txt << "config_hash " << config_hash(cfg) << ", seed " << cfg.seed << "\n";
    txt << "Episodes per condition: " << cfg.eval_pairs
        << " seeded start-goal pairs (offsets drawn uniformly; seeds recorded in eval_* files).\n";
    txt << "Note: collection uses a scripted tracker plus random exploration, not human data;\n";
    txt << "coverage differs from human driving, so absolute numbers are not comparable across "
           "setups.\n\n";
    char header[160];
    std::snprintf(header, sizeof header, "%-12s %9s %10s %13s\n", "condition", "episodes",
                  "success%", "mean_return");
    txt << header;
    for (const EvalReport& r : reports) {
        char line[160];
        std::snprintf(line, sizeof line, "%-12s %9d %9.1f%% %13.3f\n", condition_name(r.condition),
                      r.episodes, r.success_pct, r.mean_return);
        txt << line;
    }
    return reports;
}

// Frame-by-frame dump of one closed-loop episode: observations and their VAE
// reconstructions, using the raw-RGB dump format.
inline int render_episode(const RunConfig& cfg, const RunPaths& paths, std::uint64_t track_seed,
                          std::uint64_t palette_seed, const std::string& out_dir) {
    WorldModel wm{require_vae(cfg, paths, "render"), require_rnn(cfg, paths, "render")};
    ControllerParams ctrl = require_controller(cfg, paths, "render");
    std::filesystem::create_directories(out_dir);

    TrackSpec track = generate_track(track_seed, Difficulty::train, cfg.track);
    WeatherPalette palette = generate_palette(palette_seed);
    {
        std::ofstream t(out_dir + "/track.txt");
        t << track_to_text(track);
        std::ofstream p(out_dir + "/palette.txt");
        p << palette_to_text(palette);
    }

    Episode ep(track, palette, cfg.sim, cfg.frame_size, 0.0);
    RnnState h = RnnState::zero(cfg.rnn_hidden);
    int t = 0;
    while (!ep.done()) {
        LatentGaussian g = encode(ep.frame(), wm.vae);
        LatentSample z;
        z.z = g.mu;
        Frame recon = tensor_to_frame(decode(z, wm.vae));

        char name[64];
        std::snprintf(name, sizeof name, "/obs_%04d.rgb", t);
        std::ofstream obs(out_dir + name, std::ios::binary);
        write_frame_dump(ep.frame(), obs);
        std::snprintf(name, sizeof name, "/rec_%04d.rgb", t);
        std::ofstream rec(out_dir + name, std::ios::binary);
        write_frame_dump(recon, rec);

        Action a = act(z, h, ctrl);
        ep.step(a, cfg.reward);
        h = lstm_step(h, z, a, wm.rnn).first;
        t++;
    }
    return t;
}

}  // namespace lanekeep
