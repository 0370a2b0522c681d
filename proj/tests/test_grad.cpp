#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"
#include "fd_check.hpp"

using namespace lanekeep;

// Every primitive's analytic adjoint must match central finite differences
// (h = 1e-6) to a relative error of 1e-5 over at least 100 randomized trials.
TEST_CASE("primitive adjoints match finite differences") {
    for (const auto& c : fdcheck::primitive_battery()) {
        CAPTURE(c.name);
        Rng rng(mix_seed(0x5eed, std::hash<std::string>{}(c.name)));
        double worst = 0.0;
        for (int trial = 0; trial < c.trials; trial++) worst = std::max(worst, c.run(rng));
        INFO(c.name << " worst rel err " << worst);
        CHECK(worst <= 1e-5);
    }
}

TEST_CASE("composite graph gradient matches finite differences") {
    // conv -> relu -> reshape -> matmul -> tanh -> mean, all in one graph
    Rng rng(1234);
    Tensor x = fdcheck::rand_tensor({2, 6, 6}, rng);
    Tensor w = fdcheck::rand_tensor({2, 4, 4, 3}, rng, -0.5, 0.5);
    Tensor b = fdcheck::rand_tensor({3}, rng);
    Tensor dense = fdcheck::rand_tensor({27, 4}, rng, -0.5, 0.5);

    auto build = [](Tape& t, const std::vector<int>& ids) {
        int conv = t.relu(t.conv2d(ids[0], ids[1], ids[2], 2, 1));
        int flat = t.reshape(conv, {1, 27});
        return t.mean(t.tanh(t.matmul(flat, ids[3])));
    };
    double err = fdcheck::max_rel_err({x, w, b, dense}, build, 4);
    CHECK(err <= 1e-5);
}
