#pragma once

#include <cmath>
#include <vector>

#include "lanekeep/tensor.hpp"

namespace lanekeep {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Adam with bias correction. One instance per parameter list; `step` must be
// called with tensors in a fixed order so moment slots line up.
class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    void step(std::vector<Tensor*> params, const std::vector<const Tensor*>& grads) {
        if (params.size() != grads.size())
            throw ShapeError("adam: " + std::to_string(params.size()) + " params vs " +
                             std::to_string(grads.size()) + " grads");
        if (m_.empty()) {
            for (const Tensor* p : params) {
                m_.push_back(Tensor::zeros(p->shape));
                v_.push_back(Tensor::zeros(p->shape));
            }
        }
        t_ += 1;
        double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
        double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
        for (std::size_t i = 0; i < params.size(); i++) {
            Tensor& p = *params[i];
            const Tensor& g = *grads[i];
            require_same_shape(p, g, "adam");
            Tensor& m = m_[i];
            Tensor& v = v_[i];
            for (long j = 0; j < p.size(); j++) {
                m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
                v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
                double mhat = m[j] / bc1;
                double vhat = v[j] / bc2;
                p[j] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
            }
        }
    }

    long steps_taken() const { return t_; }

private:
    AdamConfig cfg_;
    long t_ = 0;
    std::vector<Tensor> m_;
    std::vector<Tensor> v_;
};

// Plain SGD, available as the config alternative.
class Sgd {
public:
    explicit Sgd(double lr) : lr_(lr) {}

    void step(std::vector<Tensor*> params, const std::vector<const Tensor*>& grads) {
        if (params.size() != grads.size())
            throw ShapeError("sgd: " + std::to_string(params.size()) + " params vs " +
                             std::to_string(grads.size()) + " grads");
        for (std::size_t i = 0; i < params.size(); i++) {
            Tensor& p = *params[i];
            const Tensor& g = *grads[i];
            require_same_shape(p, g, "sgd");
            for (long j = 0; j < p.size(); j++) p[j] -= lr_ * g[j];
        }
    }

private:
    double lr_;
};

}  // namespace lanekeep
