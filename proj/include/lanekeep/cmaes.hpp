#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "lanekeep/container.hpp"
#include "lanekeep/errors.hpp"
#include "lanekeep/parallel.hpp"
#include "lanekeep/rng.hpp"

namespace lanekeep {

// ---- symmetric eigendecomposition (cyclic Jacobi) ---------------------------

// A is n x n symmetric row-major. On return eigvecs is row-major with
// eigenvector j in column j, eigvals unordered.
inline void eigen_sym(std::vector<double> a, int n, std::vector<double>& eigvals,
                      std::vector<double>& eigvecs, int max_sweeps = 40) {
    eigvecs.assign(static_cast<std::size_t>(n) * n, 0.0);
    for (int i = 0; i < n; i++) eigvecs[static_cast<std::size_t>(i) * n + i] = 1.0;
    auto at = [&](int i, int j) -> double& { return a[static_cast<std::size_t>(i) * n + j]; };

    for (int sweep = 0; sweep < max_sweeps; sweep++) {
        double off = 0.0;
        for (int p = 0; p < n; p++)
            for (int q = p + 1; q < n; q++) off += at(p, q) * at(p, q);
        if (off <= 1e-22 * n * n) break;
        for (int p = 0; p < n; p++) {
            for (int q = p + 1; q < n; q++) {
                double apq = at(p, q);
                if (std::fabs(apq) < 1e-300) continue;
                double theta = 0.5 * std::atan2(2.0 * apq, at(q, q) - at(p, p));
                double c = std::cos(theta), s = std::sin(theta);
                for (int k = 0; k < n; k++) {
                    double akp = at(k, p), akq = at(k, q);
                    at(k, p) = c * akp - s * akq;
                    at(k, q) = s * akp + c * akq;
                }
                for (int k = 0; k < n; k++) {
                    double apk = at(p, k), aqk = at(q, k);
                    at(p, k) = c * apk - s * aqk;
                    at(q, k) = s * apk + c * aqk;
                }
                for (int k = 0; k < n; k++) {
                    double vkp = eigvecs[static_cast<std::size_t>(k) * n + p];
                    double vkq = eigvecs[static_cast<std::size_t>(k) * n + q];
                    eigvecs[static_cast<std::size_t>(k) * n + p] = c * vkp - s * vkq;
                    eigvecs[static_cast<std::size_t>(k) * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    eigvals.resize(n);
    for (int i = 0; i < n; i++) eigvals[i] = at(i, i);
}

// ---- configuration / state ----------------------------------------------------

struct EsConfig {
    int dimension = 0;
    int lambda = 0;                // 0 = 4 * (4 + floor(3 ln n)), sized for noisy rollouts
    double elite_fraction = 0.2;   // "best 20% of the population"
    double sigma0 = 0.5;
    std::vector<double> initial_mean;  // empty = origin
    int max_generations = 200;
    double target_fitness = std::numeric_limits<double>::quiet_NaN();  // NaN = disabled
    bool equal_weights = false;    // equal recombination weights instead of log-rank
    double eig_floor = 1e-12;
    int n_threads = 1;

    int resolved_lambda() const {
        if (lambda > 0) return lambda;
        return 4 * (4 + static_cast<int>(std::floor(3.0 * std::log(double(dimension)))));
    }

    void validate() const {
        if (dimension <= 0) throw ConfigError("cmaes: dimension must be positive");
        if (resolved_lambda() < 4) throw ConfigError("cmaes: lambda must be >= 4");
        if (elite_fraction <= 0.0 || elite_fraction > 0.5)
            throw ConfigError("cmaes: elite_fraction must be in (0, 0.5]");
        if (sigma0 <= 0.0) throw ConfigError("cmaes: sigma0 must be > 0");
    }
};

struct Candidate {
    std::vector<double> x;
    double fitness = std::numeric_limits<double>::quiet_NaN();  // higher is better
    std::uint64_t eval_seed = 0;
};

struct EsState {
    int n = 0;
    int lambda = 0;
    double elite_fraction = 0.2;
    bool equal_weights = false;
    double eig_floor = 1e-12;

    std::vector<double> mean;
    std::vector<double> cov;  // n x n row-major, symmetric, min eigenvalue >= eig_floor
    double sigma = 0.5;
    std::vector<double> p_sigma;
    std::vector<double> p_c;
    long generation = 0;

    // factorization of cov kept in sync by tell(): cov = B diag(eigvals) B^T
    std::vector<double> basis;    // B, row-major, eigenvector j in column j
    std::vector<double> eigvals;  // clamped to eig_floor

    static EsState init(const EsConfig& cfg) {
        cfg.validate();
        EsState s;
        s.n = cfg.dimension;
        s.lambda = cfg.resolved_lambda();
        s.elite_fraction = cfg.elite_fraction;
        s.equal_weights = cfg.equal_weights;
        s.eig_floor = cfg.eig_floor;
        s.mean = cfg.initial_mean.empty() ? std::vector<double>(s.n, 0.0) : cfg.initial_mean;
        if (static_cast<int>(s.mean.size()) != s.n)
            throw ConfigError("cmaes: initial_mean has length " + std::to_string(s.mean.size()) +
                              ", expected " + std::to_string(s.n));
        s.cov.assign(static_cast<std::size_t>(s.n) * s.n, 0.0);
        for (int i = 0; i < s.n; i++) s.cov[static_cast<std::size_t>(i) * s.n + i] = 1.0;
        s.sigma = cfg.sigma0;
        s.p_sigma.assign(s.n, 0.0);
        s.p_c.assign(s.n, 0.0);
        s.refactor();
        return s;
    }

    int elite_count() const {
        return static_cast<int>(std::ceil(elite_fraction * lambda));
    }

    // Recompute the eigen factorization, clamp eigenvalues to the floor and
    // rebuild cov if clamping changed anything.
    void refactor() {
        for (double v : cov)
            if (!std::isfinite(v)) throw NumericalError("cmaes: covariance has non-finite entries");
        eigen_sym(cov, n, eigvals, basis);
        bool clamped = false;
        for (double& ev : eigvals)
            if (ev < eig_floor) {
                ev = eig_floor;
                clamped = true;
            }
        for (double ev : eigvals)
            if (!std::isfinite(ev))
                throw NumericalError("cmaes: covariance factorization failed");
        if (clamped) {
            // cov = B diag(eigvals) B^T
            for (int i = 0; i < n; i++)
                for (int j = i; j < n; j++) {
                    double acc = 0.0;
                    for (int k = 0; k < n; k++)
                        acc += basis[static_cast<std::size_t>(i) * n + k] * eigvals[k] *
                               basis[static_cast<std::size_t>(j) * n + k];
                    cov[static_cast<std::size_t>(i) * n + j] = acc;
                    cov[static_cast<std::size_t>(j) * n + i] = acc;
                }
        }
    }

    void save(const std::string& path, const std::string& config_hash) const {
        ArrayContainer c;
        c.meta["kind"] = "es_state";
        c.meta["config_hash"] = config_hash;
        c.put("mean", Tensor({n}, mean));
        c.put("cov", Tensor({n, n}, cov));
        c.put("p_sigma", Tensor({n}, p_sigma));
        c.put("p_c", Tensor({n}, p_c));
        c.put("scalars", Tensor({5}, {sigma, double(generation), double(lambda), elite_fraction,
                                      equal_weights ? 1.0 : 0.0}));
        c.save(path);
    }

    static EsState load(const std::string& path) {
        ArrayContainer c = ArrayContainer::load(path);
        EsState s;
        const Tensor& mean = c.get("mean");
        s.n = mean.shape[0];
        s.mean = mean.data;
        s.cov = c.get("cov").data;
        s.p_sigma = c.get("p_sigma").data;
        s.p_c = c.get("p_c").data;
        const Tensor& sc = c.get("scalars");
        s.sigma = sc[0];
        s.generation = static_cast<long>(sc[1]);
        s.lambda = static_cast<int>(sc[2]);
        s.elite_fraction = sc[3];
        s.equal_weights = sc[4] != 0.0;
        s.refactor();
        return s;
    }
};

// ---- ask / tell -----------------------------------------------------------------

// Sample lambda candidates x_i = mean + sigma * B sqrt(D) eps_i. Deterministic
// given the seed; evaluation seeds are derived per candidate index.
inline std::vector<Candidate> ask(const EsState& state, std::uint64_t seed) {
    Rng rng(mix_seed(seed, 0x61736bULL, static_cast<std::uint64_t>(state.generation)));
    std::vector<Candidate> out(state.lambda);
    const int n = state.n;
    std::vector<double> scaled(n);
    for (int i = 0; i < state.lambda; i++) {
        for (int k = 0; k < n; k++) scaled[k] = std::sqrt(state.eigvals[k]) * rng.normal();
        out[i].x.assign(n, 0.0);
        for (int r = 0; r < n; r++) {
            const double* brow = state.basis.data() + static_cast<std::size_t>(r) * n;
            double acc = 0.0;
            for (int k = 0; k < n; k++) acc += brow[k] * scaled[k];
            out[i].x[r] = state.mean[r] + state.sigma * acc;
        }
        out[i].eval_seed = mix_seed(seed, 0x6576616cULL, static_cast<std::uint64_t>(state.generation),
                                    static_cast<std::uint64_t>(i));
    }
    return out;
}

// Rank-based selection plus the canonical cumulative step-size and rank-mu
// covariance updates. Ties break by candidate index; non-finite fitness ranks
// worst. A generation whose fitness values are all identical carries no
// selection information and leaves the distribution untouched.
inline EsState tell(const EsState& prev, const std::vector<Candidate>& evaluated) {
    if (static_cast<int>(evaluated.size()) != prev.lambda)
        throw ContractError("tell: got " + std::to_string(evaluated.size()) + " candidates, " +
                            "expected lambda = " + std::to_string(prev.lambda));
    const int n = prev.n;
    EsState next = prev;

    auto key = [&](int i) {
        double f = evaluated[i].fitness;
        return std::isfinite(f) ? f : -std::numeric_limits<double>::infinity();
    };
    std::vector<int> order(prev.lambda);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return key(a) > key(b); });

    bool all_equal = true;
    for (int i = 1; i < prev.lambda && all_equal; i++) all_equal = key(i) == key(0);
    if (all_equal) {
        next.generation++;
        return next;
    }

    const int mu = prev.elite_count();
    std::vector<double> w(mu);
    if (prev.equal_weights) {
        std::fill(w.begin(), w.end(), 1.0 / mu);
    } else {
        double sum = 0.0;
        for (int i = 0; i < mu; i++) {
            w[i] = std::log(mu + 0.5) - std::log(double(i + 1));
            sum += w[i];
        }
        for (double& v : w) v /= sum;
    }
    double sum_w2 = 0.0;
    for (double v : w) sum_w2 += v * v;
    const double mu_eff = 1.0 / sum_w2;

    const double c_sigma = (mu_eff + 2.0) / (n + mu_eff + 5.0);
    const double d_sigma =
        1.0 + 2.0 * std::max(0.0, std::sqrt((mu_eff - 1.0) / (n + 1.0)) - 1.0) + c_sigma;
    const double c_c = (4.0 + mu_eff / n) / (n + 4.0 + 2.0 * mu_eff / n);
    const double c_1 = 2.0 / ((n + 1.3) * (n + 1.3) + mu_eff);
    const double c_mu =
        std::min(1.0 - c_1, 2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((n + 2.0) * (n + 2.0) + mu_eff));
    const double chi_n = std::sqrt(double(n)) * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n));

    // recombination in sampling coordinates: y_i = (x_i - mean) / sigma
    std::vector<std::vector<double>> y(mu, std::vector<double>(n));
    std::vector<double> y_w(n, 0.0);
    for (int i = 0; i < mu; i++) {
        const std::vector<double>& x = evaluated[order[i]].x;
        for (int k = 0; k < n; k++) {
            y[i][k] = (x[k] - prev.mean[k]) / prev.sigma;
            y_w[k] += w[i] * y[i][k];
        }
    }
    for (int k = 0; k < n; k++) next.mean[k] = prev.mean[k] + prev.sigma * y_w[k];

    // p_sigma update needs C^(-1/2) y_w = B D^(-1) B^T y_w
    std::vector<double> tmp(n, 0.0), cinv_yw(n, 0.0);
    for (int k = 0; k < n; k++) {
        double acc = 0.0;
        for (int r = 0; r < n; r++) acc += prev.basis[static_cast<std::size_t>(r) * n + k] * y_w[r];
        tmp[k] = acc / std::sqrt(prev.eigvals[k]);
    }
    for (int r = 0; r < n; r++) {
        const double* brow = prev.basis.data() + static_cast<std::size_t>(r) * n;
        double acc = 0.0;
        for (int k = 0; k < n; k++) acc += brow[k] * tmp[k];
        cinv_yw[r] = acc;
    }

    double ps_norm2 = 0.0;
    for (int k = 0; k < n; k++) {
        next.p_sigma[k] = (1.0 - c_sigma) * prev.p_sigma[k] +
                          std::sqrt(c_sigma * (2.0 - c_sigma) * mu_eff) * cinv_yw[k];
        ps_norm2 += next.p_sigma[k] * next.p_sigma[k];
    }
    const double ps_norm = std::sqrt(ps_norm2);

    const double decay = 1.0 - std::pow(1.0 - c_sigma, 2.0 * double(prev.generation + 1));
    const bool h_sigma = ps_norm / std::sqrt(decay) < (1.4 + 2.0 / (n + 1.0)) * chi_n;
    for (int k = 0; k < n; k++)
        next.p_c[k] = (1.0 - c_c) * prev.p_c[k] +
                      (h_sigma ? std::sqrt(c_c * (2.0 - c_c) * mu_eff) * y_w[k] : 0.0);
    const double delta_h = h_sigma ? 0.0 : c_c * (2.0 - c_c);

    for (int i = 0; i < n; i++) {
        for (int j = i; j < n; j++) {
            double base = prev.cov[static_cast<std::size_t>(i) * n + j];
            double rank_mu = 0.0;
            for (int e = 0; e < mu; e++) rank_mu += w[e] * y[e][i] * y[e][j];
            double v = (1.0 - c_1 - c_mu) * base +
                       c_1 * (next.p_c[i] * next.p_c[j] + delta_h * base) + c_mu * rank_mu;
            next.cov[static_cast<std::size_t>(i) * n + j] = v;
            next.cov[static_cast<std::size_t>(j) * n + i] = v;
        }
    }

    next.sigma = prev.sigma * std::exp((c_sigma / d_sigma) * (ps_norm / chi_n - 1.0));
    if (!std::isfinite(next.sigma)) throw NumericalError("cmaes: step size became non-finite");
    next.generation = prev.generation + 1;
    next.refactor();
    return next;
}

// ---- full optimization loop -------------------------------------------------------

struct EsHistoryRow {
    long generation = 0;
    double best_fitness = 0.0;
    double mean_fitness = 0.0;
    double sigma = 0.0;
    double mean_norm = 0.0;
};

inline std::string format_history_row(const EsHistoryRow& r) {
    std::ostringstream out;
    out.precision(10);
    out << r.generation << " " << r.best_fitness << " " << r.mean_fitness << " " << r.sigma << " "
        << r.mean_norm;
    return out.str();
}

struct EsResult {
    std::vector<double> best_x;
    double best_fitness = -std::numeric_limits<double>::infinity();
    std::vector<EsHistoryRow> history;
    EsState final_state;
};

// Maximizes the objective. The objective must be a pure function of
// (x, eval_seed): candidates evaluate in parallel and results may not depend
// on scheduling.
inline EsResult optimize(const std::function<double(const std::vector<double>&, std::uint64_t)>& objective,
                         const EsConfig& cfg, std::uint64_t master_seed,
                         const std::function<void(const EsHistoryRow&)>& on_generation = {}) {
    EsState state = EsState::init(cfg);
    EsResult result;
    for (long gen = 0; gen < cfg.max_generations; gen++) {
        std::vector<Candidate> pop = ask(state, mix_seed(master_seed, 0x67656eULL));
        parallel_for(static_cast<int>(pop.size()), cfg.n_threads,
                     [&](int i) { pop[i].fitness = objective(pop[i].x, pop[i].eval_seed); });

        EsHistoryRow row;
        row.generation = gen;
        row.sigma = state.sigma;
        double best = -std::numeric_limits<double>::infinity(), sum = 0.0;
        int best_idx = 0;
        for (std::size_t i = 0; i < pop.size(); i++) {
            double f = std::isfinite(pop[i].fitness) ? pop[i].fitness
                                                     : -std::numeric_limits<double>::infinity();
            if (f > best) {
                best = f;
                best_idx = static_cast<int>(i);
            }
            sum += f;
        }
        row.best_fitness = best;
        row.mean_fitness = sum / pop.size();
        double norm2 = 0.0;
        for (double v : state.mean) norm2 += v * v;
        row.mean_norm = std::sqrt(norm2);
        result.history.push_back(row);

        if (best > result.best_fitness) {
            result.best_fitness = best;
            result.best_x = pop[best_idx].x;
        }
        if (on_generation) on_generation(row);

        state = tell(state, pop);
        if (!std::isnan(cfg.target_fitness) && result.best_fitness >= cfg.target_fitness) break;
    }
    if (result.best_x.empty()) result.best_x = state.mean;
    result.final_state = std::move(state);
    return result;
}

}  // namespace lanekeep
