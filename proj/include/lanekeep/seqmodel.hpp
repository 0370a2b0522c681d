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

// Memory module: single-layer LSTM over (z_t, a_t) predicting the next
// latent Gaussian. Gate order throughout: input, forget, cell, output.
struct LstmConfig {
    int latent_dim = 32;
    int hidden = 64;
    double logvar_clamp = 10.0;

    int input_dim() const { return latent_dim + 2; }  // z plus (steer, throttle_brake)
};

struct RnnState {
    std::vector<double> h;
    std::vector<double> c;

    static RnnState zero(int hidden) {
        RnnState s;
        s.h.assign(hidden, 0.0);
        s.c.assign(hidden, 0.0);
        return s;
    }
};

struct PredictedLatent {
    std::vector<double> mu_hat;
    std::vector<double> sigma_hat;
};

struct LstmParams {
    LstmConfig cfg;
    Tensor wx;      // (input_dim, 4H)
    Tensor wh;      // (H, 4H)
    Tensor b;       // (4H)
    Tensor head_w;  // (H, 2 * latent_dim)
    Tensor head_b;  // (2 * latent_dim)

    static LstmParams sized(const LstmConfig& cfg) {
        if (cfg.latent_dim <= 0 || cfg.hidden <= 0)
            throw ConfigError("lstm: latent_dim and hidden must be positive");
        LstmParams p;
        p.cfg = cfg;
        p.wx = Tensor::zeros({cfg.input_dim(), 4 * cfg.hidden});
        p.wh = Tensor::zeros({cfg.hidden, 4 * cfg.hidden});
        p.b = Tensor::zeros({4 * cfg.hidden});
        p.head_w = Tensor::zeros({cfg.hidden, 2 * cfg.latent_dim});
        p.head_b = Tensor::zeros({2 * cfg.latent_dim});
        return p;
    }

    static LstmParams init(const LstmConfig& cfg, std::uint64_t seed) {
        LstmParams p = sized(cfg);
        Rng rng(mix_seed(seed, 0x6c73746dULL));
        double k = 1.0 / std::sqrt(static_cast<double>(cfg.hidden));
        for (double& x : p.wx.data) x = rng.uniform(-k, k);
        for (double& x : p.wh.data) x = rng.uniform(-k, k);
        for (double& x : p.b.data) x = rng.uniform(-k, k);
        // forget-gate bias starts at one so early training keeps memory
        for (int i = cfg.hidden; i < 2 * cfg.hidden; i++) p.b[i] += 1.0;
        for (double& x : p.head_w.data) x = rng.uniform(-k, k);
        for (double& x : p.head_b.data) x = rng.normal(0.0, 0.01);
        return p;
    }

    std::vector<std::pair<std::string, Tensor*>> named_params() {
        return {{"wx", &wx}, {"wh", &wh}, {"b", &b}, {"head_w", &head_w}, {"head_b", &head_b}};
    }

    void save(const std::string& path, const std::string& config_hash) {
        ArrayContainer c;
        c.meta["kind"] = "rnn";
        c.meta["config_hash"] = config_hash;
        c.meta["latent_dim"] = std::to_string(cfg.latent_dim);
        c.meta["hidden"] = std::to_string(cfg.hidden);
        for (auto& [name, t] : named_params()) c.put(name, *t);
        c.save(path);
    }

    static LstmParams load(const std::string& path, const LstmConfig& expect) {
        ArrayContainer c = ArrayContainer::load(path);
        if (c.meta_or("latent_dim", "") != std::to_string(expect.latent_dim) ||
            c.meta_or("hidden", "") != std::to_string(expect.hidden))
            throw DependencyError("rnn checkpoint " + path +
                                  " does not match the configured latent_dim/hidden");
        LstmParams p = sized(expect);
        for (auto& [name, t] : p.named_params()) {
            const Tensor& loaded = c.get(name);
            if (loaded.shape != t->shape)
                throw DependencyError("rnn checkpoint " + path + ": array " + name + " has shape " +
                                      shape_str(loaded.shape) + ", expected " +
                                      shape_str(t->shape));
            *t = loaded;
        }
        return p;
    }
};

// One step, plain arithmetic (rollout path; the tape version below is used
// for training). Output depends on history only through (h, c).
inline std::pair<RnnState, PredictedLatent> lstm_step(const RnnState& state,
                                                      const LatentSample& z, const Action& a,
                                                      const LstmParams& p) {
    const int hidden = p.cfg.hidden;
    const int latent = p.cfg.latent_dim;
    const int in_dim = p.cfg.input_dim();
    if (static_cast<int>(z.z.size()) != latent)
        throw ShapeError("lstm_step: z has length " + std::to_string(z.z.size()) + ", expected " +
                         std::to_string(latent));
    if (static_cast<int>(state.h.size()) != hidden || static_cast<int>(state.c.size()) != hidden)
        throw ShapeError("lstm_step: state size " + std::to_string(state.h.size()) +
                         ", expected " + std::to_string(hidden));

    std::vector<double> x(in_dim);
    for (int i = 0; i < latent; i++) x[i] = z.z[i];
    x[latent] = a.steer;
    x[latent + 1] = a.throttle_brake;

    std::vector<double> pre(p.b.data);
    for (int i = 0; i < in_dim; i++) {
        double xi = x[i];
        const double* row = p.wx.data.data() + static_cast<long>(i) * 4 * hidden;
        for (int j = 0; j < 4 * hidden; j++) pre[j] += xi * row[j];
    }
    for (int i = 0; i < hidden; i++) {
        double hi = state.h[i];
        const double* row = p.wh.data.data() + static_cast<long>(i) * 4 * hidden;
        for (int j = 0; j < 4 * hidden; j++) pre[j] += hi * row[j];
    }

    auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
    RnnState next = RnnState::zero(hidden);
    for (int j = 0; j < hidden; j++) {
        double ig = sig(pre[j]);
        double fg = sig(pre[hidden + j]);
        double gg = std::tanh(pre[2 * hidden + j]);
        double og = sig(pre[3 * hidden + j]);
        next.c[j] = fg * state.c[j] + ig * gg;
        next.h[j] = og * std::tanh(next.c[j]);
    }

    PredictedLatent pred;
    pred.mu_hat.assign(latent, 0.0);
    pred.sigma_hat.assign(latent, 0.0);
    std::vector<double> y(p.head_b.data);
    for (int i = 0; i < hidden; i++) {
        double hi = next.h[i];
        const double* row = p.head_w.data.data() + static_cast<long>(i) * 2 * latent;
        for (int j = 0; j < 2 * latent; j++) y[j] += hi * row[j];
    }
    for (int j = 0; j < latent; j++) {
        pred.mu_hat[j] = y[j];
        double lv = std::clamp(y[latent + j], -p.cfg.logvar_clamp, p.cfg.logvar_clamp);
        pred.sigma_hat[j] = std::exp(0.5 * lv);
    }
    return {next, pred};
}

namespace detail {

struct LstmLeafIds {
    int wx, wh, b, head_w, head_b;
};

inline LstmLeafIds push_lstm_leaves(Tape& t, const LstmParams& p) {
    return {t.leaf_view(&p.wx), t.leaf_view(&p.wh), t.leaf_view(&p.b), t.leaf_view(&p.head_w),
            t.leaf_view(&p.head_b)};
}

struct LstmStepNodes {
    int h, c;            // (1, H)
    int mu, logvar;      // (1, latent), logvar clamped
};

inline LstmStepNodes lstm_step_graph(Tape& t, int h, int c, int x, const LstmLeafIds& ids,
                                     const LstmConfig& cfg) {
    const int hid = cfg.hidden;
    int pre = t.add(t.add(t.matmul(x, ids.wx), t.matmul(h, ids.wh)), ids.b);
    int ig = t.sigmoid(t.slice(pre, 0, hid));
    int fg = t.sigmoid(t.slice(pre, hid, hid));
    int gg = t.tanh(t.slice(pre, 2 * hid, hid));
    int og = t.sigmoid(t.slice(pre, 3 * hid, hid));
    LstmStepNodes out;
    out.c = t.add(t.mul(fg, c), t.mul(ig, gg));
    out.h = t.mul(og, t.tanh(out.c));
    int y = t.add(t.matmul(out.h, ids.head_w), ids.head_b);
    out.mu = t.slice(y, 0, cfg.latent_dim);
    out.logvar = t.clamp(t.slice(y, cfg.latent_dim, cfg.latent_dim), -cfg.logvar_clamp,
                         cfg.logvar_clamp);
    return out;
}

// KL( N(mu_hat, sigma_hat) || N(mu_t, sigma_t) ) with constant targets, summed
// over latent dims:
//   sum log(sigma_t) - logvar_hat/2 + (sigma_hat^2 + (mu_hat-mu_t)^2)/(2 sigma_t^2) - 1/2
inline int kl_to_target_graph(Tape& t, int mu_hat, int logvar_hat,
                              const std::vector<double>& mu_target,
                              const std::vector<double>& sigma_target) {
    const int latent = static_cast<int>(mu_target.size());
    Tensor mu_t = Tensor::zeros({1, latent});
    Tensor inv2var = Tensor::zeros({1, latent});
    Tensor offset = Tensor::zeros({1, latent});
    for (int i = 0; i < latent; i++) {
        mu_t[i] = mu_target[i];
        inv2var[i] = 1.0 / (2.0 * sigma_target[i] * sigma_target[i]);
        offset[i] = std::log(sigma_target[i]) - 0.5;
    }
    int quad = t.mul(t.add(t.exp(logvar_hat), t.square(t.sub(mu_hat, t.leaf(mu_t)))),
                     t.leaf(inv2var));
    int lin = t.add(t.scale(logvar_hat, -0.5), t.leaf(offset));
    return t.sum(t.add(quad, lin));
}

}  // namespace detail

struct SeqStep {
    std::vector<double> z;
    Action action;
};

struct SeqLossResult {
    double total = 0.0;         // mean per-step KL
    std::vector<Tensor> grads;  // aligned with LstmParams::named_params()
    RnnState final_state;       // values at the end of the window
};

// Mean KL over a sequence with backpropagation through time across the whole
// window. Targets are the (frozen) posterior parameters at t+1.
inline SeqLossResult seq_loss(const std::vector<SeqStep>& steps,
                              const std::vector<LatentGaussian>& targets, const LstmParams& p,
                              const RnnState* init_state = nullptr, bool want_grads = true) {
    if (steps.empty()) throw ContractError("seq_loss: sequence must have length >= 1");
    if (steps.size() != targets.size())
        throw ContractError("seq_loss: " + std::to_string(steps.size()) + " steps vs " +
                            std::to_string(targets.size()) + " targets");
    const int latent = p.cfg.latent_dim;
    const int hidden = p.cfg.hidden;

    Tape t(want_grads);
    auto ids = detail::push_lstm_leaves(t, p);
    RnnState start = init_state ? *init_state : RnnState::zero(hidden);
    int h = t.leaf(Tensor({1, hidden}, start.h));
    int c = t.leaf(Tensor({1, hidden}, start.c));

    int loss_sum = -1;
    for (std::size_t i = 0; i < steps.size(); i++) {
        if (static_cast<int>(steps[i].z.size()) != latent)
            throw ShapeError("seq_loss: z length " + std::to_string(steps[i].z.size()) +
                             ", expected " + std::to_string(latent));
        Tensor x = Tensor::zeros({1, p.cfg.input_dim()});
        for (int j = 0; j < latent; j++) x[j] = steps[i].z[j];
        x[latent] = steps[i].action.steer;
        x[latent + 1] = steps[i].action.throttle_brake;
        auto nodes = detail::lstm_step_graph(t, h, c, t.leaf(x), ids, p.cfg);
        h = nodes.h;
        c = nodes.c;
        int kl = detail::kl_to_target_graph(t, nodes.mu, nodes.logvar, targets[i].mu,
                                            targets[i].sigma);
        loss_sum = loss_sum < 0 ? kl : t.add(loss_sum, kl);
    }
    int loss = t.scale(loss_sum, 1.0 / static_cast<double>(steps.size()));

    SeqLossResult out;
    out.total = t.value(loss)[0];
    out.final_state.h = t.value(h).data;
    out.final_state.c = t.value(c).data;
    if (want_grads) {
        t.backward(loss);
        out.grads = {t.grad(ids.wx), t.grad(ids.wh), t.grad(ids.b), t.grad(ids.head_w),
                     t.grad(ids.head_b)};
    }
    return out;
}

// One episode of the latent dataset: per-step posterior, sampled z, action.
struct LatentEpisode {
    std::vector<std::vector<double>> mu;
    std::vector<std::vector<double>> sigma;
    std::vector<std::vector<double>> z;
    std::vector<Action> actions;

    int length() const { return static_cast<int>(z.size()); }
};

struct RnnTrainConfig {
    int epochs = 12;
    int window = 32;  // truncated-BPTT span
    int batch_episodes = 8;
    double lr = 1e-3;
    std::uint64_t seed = 0;
    int n_threads = 2;
    int n_chunks = 8;
};

// Truncated BPTT: gradients stop at window boundaries, hidden state carries
// across them. Gradient accumulation is chunked the same deterministic way as
// the VAE trainer.
inline std::pair<LstmParams, std::vector<double>> train_rnn(
    const std::vector<LatentEpisode>& episodes, const LstmConfig& cfg, const RnnTrainConfig& tc) {
    if (episodes.empty()) throw ContractError("train_rnn: empty dataset");
    LstmParams params = LstmParams::init(cfg, tc.seed);
    auto named = params.named_params();
    const int n_params = static_cast<int>(named.size());
    Adam opt(AdamConfig{tc.lr, 0.9, 0.999, 1e-8});

    std::vector<double> history;
    Rng shuffle_rng(mix_seed(tc.seed, 0x726e6e73ULL));
    long global_step = 0;

    for (int epoch = 0; epoch < tc.epochs; epoch++) {
        std::vector<int> order(episodes.size());
        for (std::size_t i = 0; i < order.size(); i++) order[i] = static_cast<int>(i);
        for (std::size_t i = order.size() - 1; i > 0; i--)
            std::swap(order[i], order[shuffle_rng.uniform_index(i + 1)]);

        double epoch_loss = 0.0;
        long epoch_windows = 0;
        for (std::size_t start = 0; start < order.size(); start += tc.batch_episodes) {
            int bsz =
                static_cast<int>(std::min<std::size_t>(tc.batch_episodes, order.size() - start));
            struct ChunkAcc {
                std::vector<Tensor> grads;
                double loss = 0.0;
                long windows = 0;
            };
            std::vector<ChunkAcc> acc(std::min(tc.n_chunks, bsz));
            parallel_chunks(bsz, tc.n_chunks, tc.n_threads, [&](int chunk, int begin, int end) {
                ChunkAcc& a = acc[chunk];
                a.grads.resize(n_params);
                for (int pi = 0; pi < n_params; pi++)
                    a.grads[pi] = Tensor::zeros(named[pi].second->shape);
                for (int e = begin; e < end; e++) {
                    const LatentEpisode& ep = episodes[order[start + e]];
                    int usable = ep.length() - 1;  // target is the next-step posterior
                    RnnState carry = RnnState::zero(cfg.hidden);
                    for (int w0 = 0; w0 < usable; w0 += tc.window) {
                        int len = std::min(tc.window, usable - w0);
                        std::vector<SeqStep> steps(len);
                        std::vector<LatentGaussian> targets(len);
                        for (int i = 0; i < len; i++) {
                            steps[i].z = ep.z[w0 + i];
                            steps[i].action = ep.actions[w0 + i];
                            targets[i].mu = ep.mu[w0 + i + 1];
                            targets[i].sigma = ep.sigma[w0 + i + 1];
                        }
                        SeqLossResult r = seq_loss(steps, targets, params, &carry);
                        carry = r.final_state;
                        for (int pi = 0; pi < n_params; pi++)
                            for (long j = 0; j < a.grads[pi].size(); j++)
                                a.grads[pi][j] += r.grads[pi][j];
                        a.loss += r.total;
                        a.windows++;
                    }
                }
            });

            std::vector<Tensor> batch_grads;
            long batch_windows = 0;
            double batch_loss = 0.0;
            for (const ChunkAcc& a : acc) {
                if (a.grads.empty()) continue;
                if (batch_grads.empty())
                    batch_grads = a.grads;
                else
                    for (int pi = 0; pi < n_params; pi++)
                        for (long j = 0; j < batch_grads[pi].size(); j++)
                            batch_grads[pi][j] += a.grads[pi][j];
                batch_windows += a.windows;
                batch_loss += a.loss;
            }
            if (batch_windows == 0) continue;
            if (!std::isfinite(batch_loss))
                throw TrainingError("train_rnn: non-finite loss", global_step);
            for (int pi = 0; pi < n_params; pi++)
                for (long j = 0; j < batch_grads[pi].size(); j++)
                    batch_grads[pi][j] /= batch_windows;

            std::vector<Tensor*> ps;
            std::vector<const Tensor*> gs;
            for (int pi = 0; pi < n_params; pi++) {
                ps.push_back(named[pi].second);
                gs.push_back(&batch_grads[pi]);
            }
            opt.step(ps, gs);
            epoch_loss += batch_loss;
            epoch_windows += batch_windows;
            global_step++;
        }
        history.push_back(epoch_windows ? epoch_loss / epoch_windows : 0.0);
    }
    return {std::move(params), std::move(history)};
}

// Feeds its own sampled predictions forward; diagnostics only.
inline std::vector<PredictedLatent> dream_rollout(const LatentSample& z0,
                                                  const std::vector<Action>& actions,
                                                  const LstmParams& p, std::uint64_t seed) {
    std::vector<PredictedLatent> out;
    RnnState state = RnnState::zero(p.cfg.hidden);
    LatentSample z = z0;
    Rng rng(mix_seed(seed, 0x647265616dULL));
    for (const Action& a : actions) {
        auto [next, pred] = lstm_step(state, z, a, p);
        state = next;
        for (int i = 0; i < p.cfg.latent_dim; i++)
            z.z[i] = pred.mu_hat[i] + pred.sigma_hat[i] * rng.normal();
        out.push_back(std::move(pred));
    }
    return out;
}

}  // namespace lanekeep
