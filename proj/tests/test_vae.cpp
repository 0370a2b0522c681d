#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "lanekeep/gaussian.hpp"
#include "lanekeep/vae.hpp"

using namespace lanekeep;

static VaeConfig tiny_cfg() {
    VaeConfig cfg;
    cfg.frame_size = 32;
    cfg.latent_dim = 8;
    cfg.channels_base = 8;
    return cfg;
}

static Frame sim_frame(std::uint64_t track_seed, double offset, int size) {
    TrackSpec t = generate_track(track_seed, Difficulty::train);
    WeatherPalette p = generate_palette(track_seed);
    SimParams sim;
    auto [state, frame] = reset(t, p, offset, sim, size);
    return frame;
}

TEST_CASE("encode with zero parameters returns the zero posterior mean") {
    VaeParams p = VaeParams::sized(tiny_cfg());
    Frame f = sim_frame(1, 0.0, 32);
    LatentGaussian g = encode(f, p);
    REQUIRE(g.dim() == 8);
    for (double m : g.mu) CHECK(m == 0.0);
    for (double s : g.sigma) CHECK(s == 1.0);  // exp(0/2)
}

TEST_CASE("encode is pure and deterministic") {
    VaeParams p = VaeParams::init(tiny_cfg(), 77);
    Frame f = sim_frame(2, 5.0, 32);
    LatentGaussian a = encode(f, p);
    LatentGaussian b = encode(f, p);
    CHECK(a.mu == b.mu);
    CHECK(a.sigma == b.sigma);
}

TEST_CASE("encode rejects mismatched frame sizes") {
    VaeParams p = VaeParams::sized(tiny_cfg());
    Frame f = sim_frame(1, 0.0, 64);
    CHECK_THROWS_AS(encode(f, p), ShapeError);
}

TEST_CASE("sigma stays positive across 1000 randomized parameter draws") {
    Frame f = sim_frame(3, 10.0, 32);
    for (std::uint64_t seed = 0; seed < 1000; seed++) {
        VaeParams p = VaeParams::init(tiny_cfg(), seed);
        LatentGaussian g = encode(f, p);
        for (double s : g.sigma) {
            REQUIRE(s > 0.0);
            REQUIRE(std::isfinite(s));
        }
    }
}

TEST_CASE("sample_latent collapses to the mean in the zero-sigma limit") {
    LatentGaussian g;
    g.mu = {1.5, -2.0, 0.25};
    g.sigma = {1e-300, 1e-300, 1e-300};
    LatentSample s = sample_latent(g, 9);
    CHECK(s.z[0] == 1.5);
    CHECK(s.z[1] == -2.0);
    CHECK(s.z[2] == 0.25);
}

TEST_CASE("sample_latent is seed deterministic") {
    LatentGaussian g;
    g.mu = {0.0, 1.0};
    g.sigma = {0.5, 2.0};
    LatentSample a = sample_latent(g, 123);
    LatentSample b = sample_latent(g, 123);
    LatentSample c = sample_latent(g, 124);
    CHECK(a.z == b.z);
    CHECK(a.z != c.z);
}

TEST_CASE("sample_latent empirical mean matches mu within 4 sigma / sqrt(n)") {
    LatentGaussian g;
    g.mu = {0.7, -1.2, 3.0};
    g.sigma = {0.4, 1.5, 0.9};
    const int n = 100000;
    std::vector<double> mean(3, 0.0);
    for (int i = 0; i < n; i++) {
        LatentSample s = sample_latent(g, 1000 + i);
        for (int d = 0; d < 3; d++) mean[d] += s.z[d];
    }
    for (int d = 0; d < 3; d++) {
        mean[d] /= n;
        CHECK(std::fabs(mean[d] - g.mu[d]) <= 4.0 * g.sigma[d] / std::sqrt(double(n)));
    }
}

TEST_CASE("reparameterization: with frozen eps the sample is affine in mu and sigma") {
    LatentGaussian g;
    g.mu = {0.3, -0.8};
    g.sigma = {1.1, 0.6};
    LatentSample base = sample_latent(g, 5);
    LatentGaussian shifted = g;
    shifted.mu[0] += 0.25;
    LatentSample s2 = sample_latent(shifted, 5);
    CHECK(s2.z[0] == doctest::Approx(base.z[0] + 0.25).epsilon(1e-12));
    CHECK(s2.z[1] == base.z[1]);

    LatentGaussian scaled = g;
    scaled.sigma[1] *= 2.0;
    LatentSample s3 = sample_latent(scaled, 5);
    double eps1 = (base.z[1] - g.mu[1]) / g.sigma[1];
    CHECK(s3.z[1] == doctest::Approx(g.mu[1] + 2.0 * g.sigma[1] * eps1).epsilon(1e-12));
}

TEST_CASE("decode with zero parameters emits 0.5 everywhere") {
    VaeParams p = VaeParams::sized(tiny_cfg());
    LatentSample z;
    z.z.assign(8, 0.7);
    Tensor out = decode(z, p);
    CHECK(out.shape == std::vector<int>{3, 32, 32});
    for (double v : out.data) CHECK(v == 0.5);
}

TEST_CASE("decode rejects wrong latent length") {
    VaeParams p = VaeParams::sized(tiny_cfg());
    LatentSample z;
    z.z.assign(5, 0.0);
    CHECK_THROWS_AS(decode(z, p), ShapeError);
}

TEST_CASE("KL term closed-form cases") {
    CHECK(kl_to_standard_normal({0.0, 0.0}, {1.0, 1.0}) == 0.0);
    CHECK(kl_to_standard_normal({1.0}, {1.0}) == doctest::Approx(0.5).epsilon(1e-12));
    // zero-parameter vae: mu = 0, logvar = 0, so the tape KL is exactly zero
    VaeParams p = VaeParams::sized(tiny_cfg());
    Frame f = sim_frame(4, 0.0, 32);
    VaeLossResult r = vae_loss(f, p, 1, false);
    CHECK(r.kl == 0.0);
}

TEST_CASE("reconstruction term vanishes when the frames coincide") {
    Tape t;
    Rng rng(8);
    Tensor x = Tensor::randn({3, 4, 4}, rng);
    int a = t.leaf(x);
    int b = t.leaf(x);
    CHECK(t.value(t.mean(t.square(t.sub(a, b))))[0] == 0.0);
}

TEST_CASE("vae_loss gradients match finite differences on a 32-parameter probe") {
    VaeConfig cfg;
    cfg.frame_size = 32;
    cfg.latent_dim = 4;
    cfg.channels_base = 4;
    VaeParams p = VaeParams::init(cfg, 3);
    Frame f = sim_frame(5, 8.0, 32);
    const std::uint64_t eps_seed = 17;

    VaeLossResult base = vae_loss(f, p, eps_seed);
    auto named = p.named_params();

    Rng probe_rng(99);
    double worst = 0.0;
    const double h = 1e-6;
    for (int probe = 0; probe < 32; probe++) {
        int pi = static_cast<int>(probe_rng.uniform_index(named.size()));
        long j = static_cast<long>(probe_rng.uniform_index(named[pi].second->size()));
        double saved = (*named[pi].second)[j];
        (*named[pi].second)[j] = saved + h;
        double up = vae_loss(f, p, eps_seed, false).total;
        (*named[pi].second)[j] = saved - h;
        double down = vae_loss(f, p, eps_seed, false).total;
        (*named[pi].second)[j] = saved;
        double fd = (up - down) / (2.0 * h);
        double an = base.grads[pi][j];
        worst = std::max(worst, std::fabs(an - fd) / std::max({1.0, std::fabs(an), std::fabs(fd)}));
    }
    INFO("worst rel err " << worst);
    CHECK(worst <= 1e-4);
}

TEST_CASE("one-batch training is seed deterministic") {
    std::vector<Frame> data = {sim_frame(6, 0.0, 32), sim_frame(6, 6.0, 32)};
    VaeConfig cfg = tiny_cfg();
    VaeTrainConfig tc;
    tc.epochs = 1;
    tc.batch_size = 2;
    tc.seed = 11;
    auto [p1, h1] = train_vae(data, cfg, tc);
    auto [p2, h2] = train_vae(data, cfg, tc);
    for (auto [a, b] : {std::pair{&p1.enc_w[0], &p2.enc_w[0]}, std::pair{&p1.mu_w, &p2.mu_w},
                        std::pair{&p1.dec_w[3], &p2.dec_w[3]}})
        CHECK(a->data == b->data);
    CHECK(h1[0].total == h2[0].total);
}

TEST_CASE("training rejects an empty dataset") {
    CHECK_THROWS_AS(train_vae({}, tiny_cfg(), VaeTrainConfig{}), ContractError);
}

TEST_CASE("training halves the loss on a small desk dataset") {
    std::vector<Frame> data;
    for (std::uint64_t s = 0; s < 6; s++) {
        TrackSpec t = generate_track(s, Difficulty::train);
        WeatherPalette pal = generate_palette(s);
        SimParams sim;
        RewardCoefficients k;
        Episode ep(t, pal, sim, 32, 0.0);
        for (int i = 0; i < 20 && !ep.done(); i++) {
            data.push_back(ep.frame());
            ep.step(pure_pursuit_action(ep.state(), ep.geometry(), sim), k);
        }
    }
    REQUIRE(data.size() >= 100);
    VaeConfig cfg;
    cfg.frame_size = 32;
    cfg.latent_dim = 16;
    cfg.channels_base = 16;
    VaeTrainConfig tc;
    tc.epochs = 10;
    tc.batch_size = 16;
    tc.seed = 7;
    auto [params, history] = train_vae(data, cfg, tc);
    REQUIRE(history.size() == 10);
    CHECK(history.back().total < 0.5 * history.front().total);
}

TEST_CASE("overfitting two frames reconstructs them to per-pixel MSE below 0.01") {
    std::vector<Frame> data = {sim_frame(8, 0.0, 32), sim_frame(9, 30.0, 32)};
    VaeConfig cfg;
    cfg.frame_size = 32;
    cfg.latent_dim = 16;
    cfg.channels_base = 16;
    VaeTrainConfig tc;
    tc.epochs = 400;
    tc.batch_size = 2;
    tc.seed = 21;
    auto [params, history] = train_vae(data, cfg, tc);
    for (const Frame& f : data) {
        LatentGaussian g = encode(f, params);
        LatentSample mean;
        mean.z = g.mu;
        Tensor rec = decode(mean, params);
        Tensor orig = frame_to_tensor(f);
        double mse = 0.0;
        for (long i = 0; i < rec.size(); i++) {
            double d = rec[i] - orig[i];
            mse += d * d;
        }
        mse /= rec.size();
        INFO("mse " << mse);
        CHECK(mse < 0.01);
    }
}

TEST_CASE("checkpoint round-trip and config mismatch rejection") {
    VaeConfig cfg = tiny_cfg();
    VaeParams p = VaeParams::init(cfg, 55);
    std::string path = (std::filesystem::temp_directory_path() / "lanekeep_vae_test.ndar").string();
    p.save(path, "cafef00dcafef00d");

    VaeParams q = VaeParams::load(path, cfg);
    CHECK(q.enc_w[2].data == p.enc_w[2].data);
    CHECK(q.mu_b.data == p.mu_b.data);
    CHECK(ArrayContainer::load(path).meta_or("config_hash", "") == "cafef00dcafef00d");

    VaeConfig other = cfg;
    other.latent_dim = 16;
    CHECK_THROWS_AS(VaeParams::load(path, other), DependencyError);
    std::filesystem::remove(path);
}

TEST_CASE("paper-scale configuration is wired through") {
    // frame 128, latent 128, hidden-size analogue handled by seqmodel; this
    // exercises the conv topology at the larger geometry once
    VaeConfig cfg;
    cfg.frame_size = 128;
    cfg.latent_dim = 128;
    cfg.channels_base = 32;
    VaeParams p = VaeParams::sized(cfg);
    CHECK(cfg.feature_dim() == 8 * 32 * 8 * 8);

    TrackSpec t = generate_track(1, Difficulty::train);
    WeatherPalette pal = generate_palette(1);
    SimParams sim;
    auto [state, frame] = reset(t, pal, 0.0, sim, 128);
    LatentGaussian g = encode(frame, p);
    CHECK(g.dim() == 128);
    LatentSample z;
    z.z.assign(128, 0.0);
    Tensor out = decode(z, p);
    CHECK(out.shape == std::vector<int>{3, 128, 128});
}
