#pragma once

#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "lanekeep/container.hpp"
#include "lanekeep/gaussian.hpp"
#include "lanekeep/seqmodel.hpp"
#include "lanekeep/sim.hpp"

namespace lanekeep {

// Single affine layer from [z, h] to the two action channels, tanh-squashed
// so outputs always land in [-1, 1]. Parameters flatten to one vector for
// evolutionary search: W row-major, then b.
struct ControllerConfig {
    int latent_dim = 32;
    int hidden = 64;

    int input_dim() const { return latent_dim + hidden; }
    int n_params() const { return 2 * input_dim() + 2; }
};

struct ControllerParams {
    ControllerConfig cfg;
    Tensor w;  // (2, latent_dim + hidden)
    Tensor b;  // (2)

    static ControllerParams zeros(const ControllerConfig& cfg) {
        ControllerParams p;
        p.cfg = cfg;
        p.w = Tensor::zeros({2, cfg.input_dim()});
        p.b = Tensor::zeros({2});
        return p;
    }

    std::vector<double> flatten() const {
        std::vector<double> out;
        out.reserve(cfg.n_params());
        out.insert(out.end(), w.data.begin(), w.data.end());
        out.insert(out.end(), b.data.begin(), b.data.end());
        return out;
    }

    static ControllerParams unflatten(const std::vector<double>& v, const ControllerConfig& cfg) {
        if (static_cast<int>(v.size()) != cfg.n_params())
            throw ShapeError("controller: flat vector has length " + std::to_string(v.size()) +
                             ", expected " + std::to_string(cfg.n_params()));
        ControllerParams p = zeros(cfg);
        std::copy(v.begin(), v.begin() + p.w.size(), p.w.data.begin());
        std::copy(v.begin() + p.w.size(), v.end(), p.b.data.begin());
        return p;
    }

    void save(const std::string& path, const std::string& config_hash) const {
        ArrayContainer c;
        c.meta["kind"] = "controller";
        c.meta["config_hash"] = config_hash;
        c.meta["latent_dim"] = std::to_string(cfg.latent_dim);
        c.meta["hidden"] = std::to_string(cfg.hidden);
        c.put("w", w);
        c.put("b", b);
        c.save(path);
    }

    static ControllerParams load(const std::string& path, const ControllerConfig& expect) {
        ArrayContainer c = ArrayContainer::load(path);
        if (c.meta_or("latent_dim", "") != std::to_string(expect.latent_dim) ||
            c.meta_or("hidden", "") != std::to_string(expect.hidden))
            throw DependencyError("controller checkpoint " + path +
                                  " does not match the configured latent_dim/hidden");
        ControllerParams p = zeros(expect);
        if (c.get("w").shape != p.w.shape || c.get("b").shape != p.b.shape)
            throw DependencyError("controller checkpoint " + path + ": unexpected array shapes");
        p.w = c.get("w");
        p.b = c.get("b");
        return p;
    }

    // plain-text export for inspection, one real per line, flatten order
    void save_text(const std::string& path) const {
        std::ofstream out(path);
        out.precision(17);
        for (double v : flatten()) out << v << "\n";
    }
};

inline Action act(const LatentSample& z, const RnnState& h, const ControllerParams& p) {
    if (static_cast<int>(z.z.size()) != p.cfg.latent_dim ||
        static_cast<int>(h.h.size()) != p.cfg.hidden)
        throw ShapeError("act: got z length " + std::to_string(z.z.size()) + ", h length " +
                         std::to_string(h.h.size()) + "; controller expects " +
                         std::to_string(p.cfg.latent_dim) + " + " + std::to_string(p.cfg.hidden));
    double raw[2] = {p.b[0], p.b[1]};
    const int latent = p.cfg.latent_dim;
    const int in_dim = p.cfg.input_dim();
    for (int row = 0; row < 2; row++) {
        const double* wr = p.w.data.data() + static_cast<long>(row) * in_dim;
        double acc = 0.0;
        for (int i = 0; i < latent; i++) acc += wr[i] * z.z[i];
        for (int i = 0; i < p.cfg.hidden; i++) acc += wr[latent + i] * h.h[i];
        raw[row] += acc;
    }
    return {std::tanh(raw[0]), std::tanh(raw[1])};
}

}  // namespace lanekeep
