#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "lanekeep/container.hpp"
#include "lanekeep/gaussian.hpp"
#include "lanekeep/optim.hpp"
#include "lanekeep/parallel.hpp"
#include "lanekeep/rng.hpp"
#include "lanekeep/sim.hpp"
#include "lanekeep/tape.hpp"

namespace lanekeep {

// Perception module: conv encoder to a diagonal-Gaussian latent, deconv
// decoder back to pixel space. Four conv / four deconv layers, 4x4 kernels,
// stride 2, ReLU inside, sigmoid output; spatial size halves per layer, so
// frame sizes 32/64/128 all map onto the same topology.
struct VaeConfig {
    int frame_size = 64;
    int latent_dim = 32;
    int channels_base = 32;  // conv channels: base, 2x, 4x, 8x
    double beta = 1.0;       // KL weight, applied as beta / pixel_count
    double logvar_clamp = 10.0;

    int bottleneck_hw() const { return frame_size / 16; }
    int feature_dim() const { return 8 * channels_base * bottleneck_hw() * bottleneck_hw(); }
    long pixel_count() const { return 3L * frame_size * frame_size; }
};

struct VaeParams {
    VaeConfig cfg;
    Tensor enc_w[4], enc_b[4];
    Tensor mu_w, mu_b;
    Tensor logvar_w, logvar_b;
    Tensor dec_fc_w, dec_fc_b;
    Tensor dec_w[4], dec_b[4];

    static VaeParams sized(const VaeConfig& cfg) {
        if (cfg.frame_size != 32 && cfg.frame_size != 64 && cfg.frame_size != 128)
            throw ConfigError("vae: frame_size must be 32, 64 or 128");
        if (cfg.latent_dim <= 0 || cfg.channels_base <= 0)
            throw ConfigError("vae: latent_dim and channels_base must be positive");
        VaeParams p;
        p.cfg = cfg;
        int b = cfg.channels_base;
        int ch[5] = {3, b, 2 * b, 4 * b, 8 * b};
        for (int i = 0; i < 4; i++) {
            p.enc_w[i] = Tensor::zeros({ch[i], 4, 4, ch[i + 1]});
            p.enc_b[i] = Tensor::zeros({ch[i + 1]});
        }
        int feat = cfg.feature_dim();
        p.mu_w = Tensor::zeros({feat, cfg.latent_dim});
        p.mu_b = Tensor::zeros({cfg.latent_dim});
        p.logvar_w = Tensor::zeros({feat, cfg.latent_dim});
        p.logvar_b = Tensor::zeros({cfg.latent_dim});
        p.dec_fc_w = Tensor::zeros({cfg.latent_dim, feat});
        p.dec_fc_b = Tensor::zeros({feat});
        int dch[5] = {8 * b, 4 * b, 2 * b, b, 3};
        for (int i = 0; i < 4; i++) {
            p.dec_w[i] = Tensor::zeros({dch[i], dch[i + 1], 4, 4});
            p.dec_b[i] = Tensor::zeros({dch[i + 1]});
        }
        return p;
    }

    static VaeParams init(const VaeConfig& cfg, std::uint64_t seed) {
        VaeParams p = sized(cfg);
        Rng rng(mix_seed(seed, 0x766165ULL));
        auto he = [&](Tensor& w, int fan_in) {
            double std = std::sqrt(2.0 / fan_in);
            for (double& x : w.data) x = rng.normal(0.0, std);
        };
        // Biases get a small random offset too: with all-zero biases, dead
        // input regions put ReLU pre-activations exactly on the kink, which
        // breaks finite-difference gradient checks.
        auto small = [&](Tensor& b) {
            for (double& x : b.data) x = rng.normal(0.0, 0.01);
        };
        int b = cfg.channels_base;
        int ch[5] = {3, b, 2 * b, 4 * b, 8 * b};
        for (int i = 0; i < 4; i++) {
            he(p.enc_w[i], ch[i] * 16);
            small(p.enc_b[i]);
        }
        int feat = cfg.feature_dim();
        auto xavier = [&](Tensor& w, int fan_in) {
            double std = std::sqrt(1.0 / fan_in);
            for (double& x : w.data) x = rng.normal(0.0, std);
        };
        xavier(p.mu_w, feat);
        small(p.mu_b);
        xavier(p.logvar_w, feat);
        small(p.logvar_b);
        xavier(p.dec_fc_w, cfg.latent_dim);
        small(p.dec_fc_b);
        int dch[5] = {8 * b, 4 * b, 2 * b, b, 3};
        for (int i = 0; i < 4; i++) {
            he(p.dec_w[i], dch[i] * 16 / 4);
            small(p.dec_b[i]);
        }
        return p;
    }

    std::vector<std::pair<std::string, Tensor*>> named_params() {
        std::vector<std::pair<std::string, Tensor*>> out;
        for (int i = 0; i < 4; i++) {
            out.emplace_back("enc_w" + std::to_string(i), &enc_w[i]);
            out.emplace_back("enc_b" + std::to_string(i), &enc_b[i]);
        }
        out.emplace_back("mu_w", &mu_w);
        out.emplace_back("mu_b", &mu_b);
        out.emplace_back("logvar_w", &logvar_w);
        out.emplace_back("logvar_b", &logvar_b);
        out.emplace_back("dec_fc_w", &dec_fc_w);
        out.emplace_back("dec_fc_b", &dec_fc_b);
        for (int i = 0; i < 4; i++) {
            out.emplace_back("dec_w" + std::to_string(i), &dec_w[i]);
            out.emplace_back("dec_b" + std::to_string(i), &dec_b[i]);
        }
        return out;
    }

    void save(const std::string& path, const std::string& config_hash) {
        ArrayContainer c;
        c.meta["kind"] = "vae";
        c.meta["config_hash"] = config_hash;
        c.meta["frame_size"] = std::to_string(cfg.frame_size);
        c.meta["latent_dim"] = std::to_string(cfg.latent_dim);
        c.meta["channels_base"] = std::to_string(cfg.channels_base);
        for (auto& [name, t] : named_params()) c.put(name, *t);
        c.save(path);
    }

    static VaeParams load(const std::string& path, const VaeConfig& expect) {
        ArrayContainer c = ArrayContainer::load(path);
        VaeParams p = sized(expect);
        if (c.meta_or("frame_size", "") != std::to_string(expect.frame_size) ||
            c.meta_or("latent_dim", "") != std::to_string(expect.latent_dim) ||
            c.meta_or("channels_base", "") != std::to_string(expect.channels_base))
            throw DependencyError("vae checkpoint " + path + " does not match the configured " +
                                  "frame_size/latent_dim/channels_base");
        for (auto& [name, t] : p.named_params()) {
            const Tensor& loaded = c.get(name);
            if (loaded.shape != t->shape)
                throw DependencyError("vae checkpoint " + path + ": array " + name + " has shape " +
                                      shape_str(loaded.shape) + ", expected " +
                                      shape_str(t->shape));
            *t = loaded;
        }
        return p;
    }
};

inline Tensor frame_to_tensor(const Frame& f) {
    Tensor t = Tensor::zeros({3, f.height, f.width});
    const long plane = static_cast<long>(f.height) * f.width;
    for (long i = 0; i < plane; i++)
        for (int ch = 0; ch < 3; ch++) t[ch * plane + i] = f.pixels[i * 3 + ch] / 255.0;
    return t;
}

inline Frame tensor_to_frame(const Tensor& t) {
    Frame f;
    f.height = t.shape[1];
    f.width = t.shape[2];
    const long plane = static_cast<long>(f.height) * f.width;
    f.pixels.resize(static_cast<std::size_t>(plane) * 3);
    for (long i = 0; i < plane; i++)
        for (int ch = 0; ch < 3; ch++)
            f.pixels[i * 3 + ch] = static_cast<std::uint8_t>(
                std::clamp(std::lround(t[ch * plane + i] * 255.0), 0L, 255L));
    return f;
}

namespace detail {

struct VaeLeafIds {
    int enc_w[4], enc_b[4];
    int mu_w, mu_b, logvar_w, logvar_b;
    int dec_fc_w, dec_fc_b;
    int dec_w[4], dec_b[4];
};

inline VaeLeafIds push_vae_leaves(Tape& t, const VaeParams& p) {
    VaeLeafIds ids;
    for (int i = 0; i < 4; i++) {
        ids.enc_w[i] = t.leaf_view(&p.enc_w[i]);
        ids.enc_b[i] = t.leaf_view(&p.enc_b[i]);
    }
    ids.mu_w = t.leaf_view(&p.mu_w);
    ids.mu_b = t.leaf_view(&p.mu_b);
    ids.logvar_w = t.leaf_view(&p.logvar_w);
    ids.logvar_b = t.leaf_view(&p.logvar_b);
    ids.dec_fc_w = t.leaf_view(&p.dec_fc_w);
    ids.dec_fc_b = t.leaf_view(&p.dec_fc_b);
    for (int i = 0; i < 4; i++) {
        ids.dec_w[i] = t.leaf_view(&p.dec_w[i]);
        ids.dec_b[i] = t.leaf_view(&p.dec_b[i]);
    }
    return ids;
}

inline std::vector<int> leaf_id_list(const VaeLeafIds& ids) {
    std::vector<int> out;
    for (int i = 0; i < 4; i++) {
        out.push_back(ids.enc_w[i]);
        out.push_back(ids.enc_b[i]);
    }
    out.push_back(ids.mu_w);
    out.push_back(ids.mu_b);
    out.push_back(ids.logvar_w);
    out.push_back(ids.logvar_b);
    out.push_back(ids.dec_fc_w);
    out.push_back(ids.dec_fc_b);
    for (int i = 0; i < 4; i++) {
        out.push_back(ids.dec_w[i]);
        out.push_back(ids.dec_b[i]);
    }
    return out;
}

// frame node -> (mu, clamped logvar), both (1, latent)
inline std::pair<int, int> encoder_graph(Tape& t, int x, const VaeLeafIds& ids,
                                         const VaeConfig& cfg) {
    int h = x;
    for (int i = 0; i < 4; i++) h = t.relu(t.conv2d(h, ids.enc_w[i], ids.enc_b[i], 2, 1));
    int flat = t.reshape(h, {1, cfg.feature_dim()});
    int mu = t.add(t.matmul(flat, ids.mu_w), ids.mu_b);
    int logvar = t.clamp(t.add(t.matmul(flat, ids.logvar_w), ids.logvar_b), -cfg.logvar_clamp,
                         cfg.logvar_clamp);
    return {mu, logvar};
}

// z node (1, latent) -> reconstruction (3, S, S) in [0, 1]
inline int decoder_graph(Tape& t, int z, const VaeLeafIds& ids, const VaeConfig& cfg) {
    int f = t.relu(t.add(t.matmul(z, ids.dec_fc_w), ids.dec_fc_b));
    int s = cfg.bottleneck_hw();
    int h = t.reshape(f, {8 * cfg.channels_base, s, s});
    for (int i = 0; i < 3; i++) h = t.relu(t.conv2d_transpose(h, ids.dec_w[i], ids.dec_b[i], 2, 1));
    return t.sigmoid(t.conv2d_transpose(h, ids.dec_w[3], ids.dec_b[3], 2, 1));
}

}  // namespace detail

// Deterministic posterior for one frame; sigma = exp(logvar / 2) > 0 always.
inline LatentGaussian encode(const Frame& frame, const VaeParams& p) {
    if (frame.width != p.cfg.frame_size || frame.height != p.cfg.frame_size)
        throw ShapeError("encode: frame is " + std::to_string(frame.width) + "x" +
                         std::to_string(frame.height) + ", vae expects " +
                         std::to_string(p.cfg.frame_size));
    Tape t(false);
    auto ids = detail::push_vae_leaves(t, p);
    int x = t.leaf(frame_to_tensor(frame));
    auto [mu, logvar] = detail::encoder_graph(t, x, ids, p.cfg);
    LatentGaussian g;
    g.mu = t.value(mu).data;
    g.sigma.resize(g.mu.size());
    for (std::size_t i = 0; i < g.sigma.size(); i++)
        g.sigma[i] = std::exp(0.5 * t.value(logvar)[i]);
    return g;
}

// z = mu + sigma * eps with eps drawn from the seeded stream (Eq. of the
// reparameterized sample; differentiable in the tape version used in training).
inline LatentSample sample_latent(const LatentGaussian& g, std::uint64_t seed) {
    Rng rng(mix_seed(seed, 0x7a73616dULL));
    LatentSample s;
    s.z.resize(g.mu.size());
    for (std::size_t i = 0; i < g.mu.size(); i++) s.z[i] = g.mu[i] + g.sigma[i] * rng.normal();
    return s;
}

inline Tensor decode(const LatentSample& z, const VaeParams& p) {
    if (static_cast<int>(z.z.size()) != p.cfg.latent_dim)
        throw ShapeError("decode: z has length " + std::to_string(z.z.size()) + ", vae expects " +
                         std::to_string(p.cfg.latent_dim));
    Tape t(false);
    auto ids = detail::push_vae_leaves(t, p);
    int zn = t.leaf(Tensor({1, p.cfg.latent_dim}, z.z));
    return t.value(detail::decoder_graph(t, zn, ids, p.cfg));
}

struct VaeLossResult {
    double total = 0.0;
    double kl = 0.0;     // unweighted divergence term
    double recon = 0.0;  // per-pixel mean squared error
    std::vector<Tensor> grads;  // aligned with VaeParams::named_params()
};

// Single-frame loss: beta/pixel_count * KL(N(mu, sigma) || N(0, I)) + MSE.
// The noise leaf is fixed by `seed`, so gradients are checkable against
// finite differences.
inline VaeLossResult vae_loss(const Frame& frame, const VaeParams& p, std::uint64_t seed,
                              bool want_grads = true) {
    Tape t(want_grads);
    auto ids = detail::push_vae_leaves(t, p);
    int x = t.leaf(frame_to_tensor(frame));
    auto [mu, logvar] = detail::encoder_graph(t, x, ids, p.cfg);
    int sigma = t.exp(t.scale(logvar, 0.5));

    Rng rng(mix_seed(seed, 0x766165707320ULL));
    Tensor eps = Tensor::zeros({1, p.cfg.latent_dim});
    for (double& e : eps.data) e = rng.normal();
    int z = t.add(mu, t.mul(sigma, t.leaf(eps)));

    int xhat = detail::decoder_graph(t, z, ids, p.cfg);

    // 0.5 * sum(mu^2 + exp(logvar) - 1 - logvar)
    int kl = t.scale(
        t.sum(t.sub(t.add(t.square(mu), t.exp(logvar)), t.add_const(logvar, 1.0))), 0.5);
    int recon = t.mean(t.square(t.sub(xhat, x)));
    int loss = t.add(t.scale(kl, p.cfg.beta / static_cast<double>(p.cfg.pixel_count())), recon);

    VaeLossResult out;
    out.kl = t.value(kl)[0];
    out.recon = t.value(recon)[0];
    out.total = t.value(loss)[0];
    if (want_grads) {
        t.backward(loss);
        for (int id : detail::leaf_id_list(ids)) out.grads.push_back(t.grad(id));
    }
    return out;
}

struct VaeTrainConfig {
    int epochs = 8;
    int batch_size = 64;
    double lr = 1e-3;
    std::uint64_t seed = 0;
    int n_threads = 2;
    int n_chunks = 8;   // fixed reduction granularity, independent of threads
    long max_frames = 0;  // 0 = use the whole dataset
};

struct VaeEpochStats {
    double kl = 0.0;
    double recon = 0.0;
    double total = 0.0;
};

// Seeded mini-batch training. Per-image gradients are accumulated into
// fixed chunk slots and reduced in chunk order, so checkpoints depend only on
// (dataset, config, seed), never on scheduling.
inline std::pair<VaeParams, std::vector<VaeEpochStats>> train_vae(const std::vector<Frame>& frames,
                                                                  const VaeConfig& cfg,
                                                                  const VaeTrainConfig& tc) {
    if (frames.empty()) throw ContractError("train_vae: empty dataset");
    std::vector<int> pool(frames.size());
    for (std::size_t i = 0; i < pool.size(); i++) pool[i] = static_cast<int>(i);
    if (tc.max_frames > 0 && tc.max_frames < static_cast<long>(pool.size())) {
        Rng sub(mix_seed(tc.seed, 0x737562ULL));
        for (std::size_t i = pool.size() - 1; i > 0; i--)
            std::swap(pool[i], pool[sub.uniform_index(i + 1)]);
        pool.resize(tc.max_frames);
        std::sort(pool.begin(), pool.end());
    }

    VaeParams params = VaeParams::init(cfg, tc.seed);
    auto named = params.named_params();
    const int n_params = static_cast<int>(named.size());
    Adam opt(AdamConfig{tc.lr, 0.9, 0.999, 1e-8});

    std::vector<VaeEpochStats> history;
    Rng shuffle_rng(mix_seed(tc.seed, 0x73687566ULL));
    long global_step = 0;

    for (int epoch = 0; epoch < tc.epochs; epoch++) {
        std::vector<int> order = pool;
        for (std::size_t i = order.size() - 1; i > 0; i--)
            std::swap(order[i], order[shuffle_rng.uniform_index(i + 1)]);

        VaeEpochStats stats;
        long seen = 0;
        for (std::size_t start = 0; start < order.size(); start += tc.batch_size) {
            int bsz = static_cast<int>(std::min<std::size_t>(tc.batch_size, order.size() - start));

            struct ChunkAcc {
                std::vector<Tensor> grads;
                double kl = 0.0, recon = 0.0, total = 0.0;
            };
            std::vector<ChunkAcc> acc(std::min(tc.n_chunks, bsz));
            parallel_chunks(bsz, tc.n_chunks, tc.n_threads, [&](int chunk, int begin, int end) {
                ChunkAcc& a = acc[chunk];
                for (int i = begin; i < end; i++) {
                    int frame_idx = order[start + i];
                    std::uint64_t eps_seed =
                        mix_seed(tc.seed, 0x657073ULL, static_cast<std::uint64_t>(epoch),
                                 static_cast<std::uint64_t>(frame_idx));
                    VaeLossResult r = vae_loss(frames[frame_idx], params, eps_seed);
                    if (a.grads.empty()) {
                        a.grads = std::move(r.grads);
                    } else {
                        for (int pi = 0; pi < n_params; pi++)
                            for (long j = 0; j < a.grads[pi].size(); j++)
                                a.grads[pi][j] += r.grads[pi][j];
                    }
                    a.kl += r.kl;
                    a.recon += r.recon;
                    a.total += r.total;
                }
            });

            std::vector<Tensor> batch_grads;
            double batch_total = 0.0;
            for (const ChunkAcc& a : acc) {
                if (a.grads.empty()) continue;
                if (batch_grads.empty())
                    batch_grads = a.grads;
                else
                    for (int pi = 0; pi < n_params; pi++)
                        for (long j = 0; j < batch_grads[pi].size(); j++)
                            batch_grads[pi][j] += a.grads[pi][j];
                stats.kl += a.kl;
                stats.recon += a.recon;
                stats.total += a.total;
                batch_total += a.total;
            }
            if (!std::isfinite(batch_total))
                throw TrainingError("train_vae: non-finite loss", global_step);
            for (int pi = 0; pi < n_params; pi++)
                for (long j = 0; j < batch_grads[pi].size(); j++) batch_grads[pi][j] /= bsz;

            std::vector<Tensor*> ps;
            std::vector<const Tensor*> gs;
            for (int pi = 0; pi < n_params; pi++) {
                ps.push_back(named[pi].second);
                gs.push_back(&batch_grads[pi]);
            }
            opt.step(ps, gs);
            seen += bsz;
            global_step++;
        }
        stats.kl /= seen;
        stats.recon /= seen;
        stats.total /= seen;
        history.push_back(stats);
    }
    return {std::move(params), std::move(history)};
}

}  // namespace lanekeep
