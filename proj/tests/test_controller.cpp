#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "lanekeep/controller.hpp"

using namespace lanekeep;

static ControllerConfig small_cfg() {
    ControllerConfig cfg;
    cfg.latent_dim = 4;
    cfg.hidden = 6;
    return cfg;
}

static LatentSample rand_z(Rng& rng, int n) {
    LatentSample z;
    for (int i = 0; i < n; i++) z.z.push_back(rng.normal());
    return z;
}

static RnnState rand_h(Rng& rng, int n) {
    RnnState h = RnnState::zero(n);
    for (double& v : h.h) v = rng.normal();
    return h;
}

TEST_CASE("zero controller emits the zero action") {
    ControllerParams p = ControllerParams::zeros(small_cfg());
    Rng rng(1);
    Action a = act(rand_z(rng, 4), rand_h(rng, 6), p);
    CHECK(a.steer == 0.0);
    CHECK(a.throttle_brake == 0.0);
}

TEST_CASE("bias-only controller saturates toward (1, -1) and stays in range") {
    ControllerParams p = ControllerParams::zeros(small_cfg());
    p.b[0] = 10.0;
    p.b[1] = -10.0;
    Rng rng(2);
    Action a = act(rand_z(rng, 4), rand_h(rng, 6), p);
    CHECK(a.steer == doctest::Approx(std::tanh(10.0)).epsilon(1e-15));
    CHECK(a.throttle_brake == doctest::Approx(-std::tanh(10.0)).epsilon(1e-15));
    CHECK(a.steer <= 1.0);
    CHECK(a.throttle_brake >= -1.0);
}

TEST_CASE("bias-only controller equals tanh of the bias componentwise") {
    ControllerParams p = ControllerParams::zeros(small_cfg());
    p.b[0] = 0.37;
    p.b[1] = -1.2;
    Rng rng(3);
    Action a = act(rand_z(rng, 4), rand_h(rng, 6), p);
    CHECK(a.steer == doctest::Approx(std::tanh(0.37)).epsilon(1e-15));
    CHECK(a.throttle_brake == doctest::Approx(std::tanh(-1.2)).epsilon(1e-15));
}

TEST_CASE("flatten/unflatten round-trips and has the documented length") {
    ControllerConfig cfg;
    cfg.latent_dim = 32;
    cfg.hidden = 64;
    CHECK(cfg.n_params() == 194);

    Rng rng(4);
    ControllerParams p = ControllerParams::zeros(cfg);
    for (double& v : p.w.data) v = rng.normal();
    for (double& v : p.b.data) v = rng.normal();
    std::vector<double> flat = p.flatten();
    CHECK(static_cast<int>(flat.size()) == 194);
    ControllerParams q = ControllerParams::unflatten(flat, cfg);
    CHECK(q.w.data == p.w.data);
    CHECK(q.b.data == p.b.data);

    std::vector<double> zeros(cfg.n_params(), 0.0);
    CHECK(ControllerParams::zeros(cfg).flatten() == zeros);
    CHECK_THROWS_AS(ControllerParams::unflatten(std::vector<double>(10), cfg), ShapeError);
}

TEST_CASE("actions always land in [-1,1] for random parameters and inputs") {
    Rng rng(5);
    ControllerConfig cfg = small_cfg();
    for (int trial = 0; trial < 500; trial++) {
        ControllerParams p = ControllerParams::zeros(cfg);
        for (double& v : p.w.data) v = rng.normal(0.0, 5.0);
        for (double& v : p.b.data) v = rng.normal(0.0, 5.0);
        Action a = act(rand_z(rng, 4), rand_h(rng, 6), p);
        CHECK(a.steer >= -1.0);
        CHECK(a.steer <= 1.0);
        CHECK(a.throttle_brake >= -1.0);
        CHECK(a.throttle_brake <= 1.0);
    }
}

TEST_CASE("act is pure and deterministic") {
    Rng rng(6);
    ControllerParams p = ControllerParams::zeros(small_cfg());
    for (double& v : p.w.data) v = rng.normal();
    LatentSample z = rand_z(rng, 4);
    RnnState h = rand_h(rng, 6);
    Action a = act(z, h, p);
    Action b = act(z, h, p);
    CHECK(a.steer == b.steer);
    CHECK(a.throttle_brake == b.throttle_brake);
}

TEST_CASE("positively scaling the affine map preserves action signs") {
    Rng rng(7);
    ControllerConfig cfg = small_cfg();
    for (int trial = 0; trial < 200; trial++) {
        ControllerParams p = ControllerParams::zeros(cfg);
        for (double& v : p.w.data) v = rng.normal();
        for (double& v : p.b.data) v = rng.normal();
        ControllerParams scaled = p;
        double c = rng.uniform(0.1, 4.0);
        for (double& v : scaled.w.data) v *= c;
        for (double& v : scaled.b.data) v *= c;
        LatentSample z = rand_z(rng, 4);
        RnnState h = rand_h(rng, 6);
        Action a = act(z, h, p);
        Action b = act(z, h, scaled);
        CHECK(std::signbit(a.steer) == std::signbit(b.steer));
        CHECK(std::signbit(a.throttle_brake) == std::signbit(b.throttle_brake));
    }
}

TEST_CASE("act rejects dimension mismatches") {
    ControllerParams p = ControllerParams::zeros(small_cfg());
    Rng rng(8);
    CHECK_THROWS_AS(act(rand_z(rng, 3), rand_h(rng, 6), p), ShapeError);
    CHECK_THROWS_AS(act(rand_z(rng, 4), rand_h(rng, 5), p), ShapeError);
}

TEST_CASE("checkpoint and text export round-trip") {
    ControllerConfig cfg = small_cfg();
    Rng rng(9);
    ControllerParams p = ControllerParams::zeros(cfg);
    for (double& v : p.w.data) v = rng.normal();
    for (double& v : p.b.data) v = rng.normal();

    auto dir = std::filesystem::temp_directory_path();
    std::string ckpt = (dir / "lanekeep_ctrl_test.ndar").string();
    std::string txt = (dir / "lanekeep_ctrl_test.txt").string();
    p.save(ckpt, "feedfacefeedface");
    p.save_text(txt);

    ControllerParams q = ControllerParams::load(ckpt, cfg);
    CHECK(q.w.data == p.w.data);
    CHECK(q.b.data == p.b.data);

    std::ifstream in(txt);
    std::vector<double> flat;
    double v;
    while (in >> v) flat.push_back(v);
    CHECK(flat.size() == p.flatten().size());

    ControllerConfig other = cfg;
    other.hidden = 12;
    CHECK_THROWS_AS(ControllerParams::load(ckpt, other), DependencyError);
    std::filesystem::remove(ckpt);
    std::filesystem::remove(txt);
}
