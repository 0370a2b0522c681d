#pragma once

#include <cmath>
#include <vector>

#include "lanekeep/errors.hpp"

namespace lanekeep {

// Diagonal Gaussian over the latent space: mean and strictly positive stddev.
struct LatentGaussian {
    std::vector<double> mu;
    std::vector<double> sigma;

    int dim() const { return static_cast<int>(mu.size()); }
};

struct LatentSample {
    std::vector<double> z;
};

// KL( N(mu0, diag sigma0^2) || N(mu1, diag sigma1^2) ), summed over dimensions.
// Zero exactly when the two distributions coincide.
inline double kl_diag_gaussian(const std::vector<double>& mu0, const std::vector<double>& sigma0,
                               const std::vector<double>& mu1, const std::vector<double>& sigma1) {
    if (mu0.size() != sigma0.size() || mu0.size() != mu1.size() || mu0.size() != sigma1.size())
        throw ShapeError("kl_diag_gaussian: dimension mismatch");
    double kl = 0.0;
    for (std::size_t i = 0; i < mu0.size(); i++) {
        double r = sigma0[i] / sigma1[i];
        double dm = mu0[i] - mu1[i];
        kl += std::log(sigma1[i] / sigma0[i]) + (sigma0[i] * sigma0[i] + dm * dm) /
                                                    (2.0 * sigma1[i] * sigma1[i]) -
              0.5;
    }
    return kl;
}

// KL( N(mu, diag sigma^2) || N(0, I) ), the standard-normal special case.
inline double kl_to_standard_normal(const std::vector<double>& mu,
                                    const std::vector<double>& sigma) {
    double kl = 0.0;
    for (std::size_t i = 0; i < mu.size(); i++) {
        double s2 = sigma[i] * sigma[i];
        kl += 0.5 * (mu[i] * mu[i] + s2 - 1.0 - std::log(s2));
    }
    return kl;
}

}  // namespace lanekeep
