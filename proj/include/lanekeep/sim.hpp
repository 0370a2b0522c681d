#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "lanekeep/errors.hpp"
#include "lanekeep/rng.hpp"

namespace lanekeep {

struct Vec2 {
    double x = 0.0;
    double y = 0.0;
};

inline Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
inline Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
inline Vec2 operator*(double c, Vec2 a) { return {c * a.x, c * a.y}; }
inline double dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }
inline double cross(Vec2 a, Vec2 b) { return a.x * b.y - a.y * b.x; }
inline double norm(Vec2 a) { return std::sqrt(a.x * a.x + a.y * a.y); }

// ---- domain types -----------------------------------------------------------

enum class Difficulty { train, test };

struct TrackSpec {
    std::uint64_t seed = 0;
    std::vector<Vec2> centerline;  // ordered waypoints, meters
    double lane_half_width = 2.0;
    double goal_arc_length = 0.0;
};

struct WeatherPalette {
    std::uint64_t seed = 0;
    std::uint8_t road_color[3] = {0, 0, 0};
    std::uint8_t lane_color[3] = {0, 0, 0};
    std::uint8_t offroad_color[3] = {0, 0, 0};
    double noise_std = 0.0;  // per-channel pixel noise, fraction of full scale
};

struct VehicleState {
    Vec2 position;
    double heading = 0.0;       // radians
    double speed = 0.0;         // m/s, >= 0
    double arc_progress = 0.0;  // meters along the centerline
    int elapsed_steps = 0;
};

struct Action {
    double steer = 0.0;           // [-1, 1]
    double throttle_brake = 0.0;  // [-1, 1]; negative half is brake
};

// Episode-cumulative quantities feeding the reward. d (km), s and o
// (accumulated seconds of overlap) are non-decreasing; v is the current
// speed in km/h.
struct StepMetrics {
    double d = 0.0;
    double v = 0.0;
    double s = 0.0;
    double o = 0.0;
};

struct RewardCoefficients {
    double k1 = 1000.0;
    double k2 = 0.05;
    double k3 = 2.0;
    double k4 = 2.0;
};

struct Frame {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> pixels;  // row-major RGB

    long buffer_length() const { return static_cast<long>(pixels.size()); }
};

enum class Termination { running, success, collision, timeout };

inline const char* termination_name(Termination t) {
    switch (t) {
        case Termination::running: return "running";
        case Termination::success: return "success";
        case Termination::collision: return "collision";
        case Termination::timeout: return "timeout";
    }
    return "?";
}

// Dynamics and episode-protocol constants. Kinematic bicycle model with a
// fixed timestep; documented here because the acceptance tests integrate the
// same equations independently:
//   delta   = clamp(steer, -1, 1) * max_steer
//   accel   = tb >= 0 ? tb * throttle_gain : tb * brake_gain   (tb clamped)
//   v'      = clamp(v + accel * dt, 0, v_max)
//   heading'= heading + (v' / wheelbase) * tan(delta) * dt
//   pos'    = pos + v' * dt * (cos heading', sin heading')
struct SimParams {
    double dt = 0.1;
    double wheelbase = 2.5;
    double v_max = 20.0;
    double throttle_gain = 4.0;  // m/s^2 at full throttle
    double brake_gain = 8.0;     // m/s^2 at full brake
    double max_steer_deg = 35.0;
    double shoulder_margin = 0.5;  // collision when |lateral| > half_width + margin
    int step_budget = 1000;
    double divider_half_width = 0.15;  // painted divider at +lane_half_width

    double max_steer_rad() const { return max_steer_deg * 3.14159265358979323846 / 180.0; }
};

// ---- centerline geometry ------------------------------------------------------

struct Projection {
    double arc = 0.0;      // arc length of the foot point
    double lateral = 0.0;  // signed offset, left of travel positive
};

// Arc-length indexed view over a TrackSpec polyline.
class TrackGeometry {
public:
    explicit TrackGeometry(const TrackSpec& spec) : spec_(&spec) {
        const auto& pts = spec.centerline;
        if (pts.size() < 2) throw ContractError("track: centerline needs at least 2 waypoints");
        cum_.resize(pts.size());
        cum_[0] = 0.0;
        for (std::size_t i = 1; i < pts.size(); i++) {
            double seg = norm(pts[i] - pts[i - 1]);
            if (seg <= 0.0) throw ContractError("track: consecutive waypoints must be distinct");
            cum_[i] = cum_[i - 1] + seg;
        }
    }

    double total_length() const { return cum_.back(); }

    Vec2 point_at(double arc) const {
        int i = segment_index(arc);
        const auto& pts = spec_->centerline;
        double t = (arc - cum_[i]) / (cum_[i + 1] - cum_[i]);
        t = std::clamp(t, 0.0, 1.0);
        return pts[i] + t * (pts[i + 1] - pts[i]);
    }

    Vec2 tangent_at(double arc) const {
        int i = segment_index(arc);
        const auto& pts = spec_->centerline;
        Vec2 d = pts[i + 1] - pts[i];
        return (1.0 / norm(d)) * d;
    }

    // Nearest point on segments whose arc span intersects [arc_lo, arc_hi].
    Projection project(Vec2 p, double arc_lo, double arc_hi) const {
        const auto& pts = spec_->centerline;
        int lo = segment_index(arc_lo);
        int hi = segment_index(arc_hi);
        double best_d2 = 1e300;
        Projection best;
        for (int i = lo; i <= hi; i++) {
            Vec2 a = pts[i], b = pts[i + 1];
            Vec2 ab = b - a;
            double len2 = dot(ab, ab);
            double t = std::clamp(dot(p - a, ab) / len2, 0.0, 1.0);
            Vec2 foot = a + t * ab;
            Vec2 r = p - foot;
            double d2 = dot(r, r);
            if (d2 < best_d2) {
                best_d2 = d2;
                double sign = cross(ab, r) >= 0.0 ? 1.0 : -1.0;
                best.arc = cum_[i] + t * std::sqrt(len2);
                best.lateral = sign * std::sqrt(d2);
            }
        }
        return best;
    }

    Projection project_full(Vec2 p) const { return project(p, 0.0, total_length()); }

private:
    int segment_index(double arc) const {
        arc = std::clamp(arc, 0.0, cum_.back());
        auto it = std::upper_bound(cum_.begin(), cum_.end(), arc);
        int i = static_cast<int>(it - cum_.begin()) - 1;
        return std::clamp(i, 0, static_cast<int>(cum_.size()) - 2);
    }

    const TrackSpec* spec_;
    std::vector<double> cum_;
};

// ---- procedural generation -----------------------------------------------------

struct TrackGenParams {
    double waypoint_spacing = 1.0;
    double lead_in = 25.0;       // straight opening stretch
    double goal_margin = 55.0;   // road continues past the goal so the view never ends
    double goal_length_min = 105.0;
    double goal_length_max = 135.0;
    double seg_len_min = 18.0;
    double seg_len_max = 45.0;
    double straight_prob = 0.35;
    // Curvature magnitudes (1/m) are drawn from disjoint ranges so test tracks
    // are structurally out of the training family.
    double train_curv_min = 0.004;
    double train_curv_max = 0.012;
    double test_curv_min = 0.0135;
    double test_curv_max = 0.019;
    double max_heading_swing = 1.7;  // keep the course from looping onto itself
    double lane_half_width = 2.0;
};

inline TrackSpec generate_track(std::uint64_t seed, Difficulty difficulty,
                                const TrackGenParams& gp = {}) {
    Rng rng(mix_seed(seed, difficulty == Difficulty::train ? 0x7261696eULL : 0x74657374ULL));
    TrackSpec track;
    track.seed = seed;
    track.lane_half_width = gp.lane_half_width;
    track.goal_arc_length = rng.uniform(gp.goal_length_min, gp.goal_length_max);

    double curv_min = difficulty == Difficulty::train ? gp.train_curv_min : gp.test_curv_min;
    double curv_max = difficulty == Difficulty::train ? gp.train_curv_max : gp.test_curv_max;

    double total = track.goal_arc_length + gp.goal_margin;
    Vec2 pos{0.0, 0.0};
    double heading = 0.0;
    track.centerline.push_back(pos);

    double built = 0.0;
    bool lead_in_done = false;
    while (built < total) {
        double seg_len;
        double curvature;
        if (!lead_in_done) {
            seg_len = gp.lead_in;
            curvature = 0.0;
            lead_in_done = true;
        } else {
            seg_len = rng.uniform(gp.seg_len_min, gp.seg_len_max);
            if (rng.uniform() < gp.straight_prob) {
                curvature = 0.0;
            } else {
                double mag = rng.uniform(curv_min, curv_max);
                double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
                // flip inward if this bend would swing the course too far round
                if (std::fabs(heading + sign * mag * seg_len) > gp.max_heading_swing)
                    sign = -sign;
                curvature = sign * mag;
            }
        }
        int steps = std::max(1, static_cast<int>(std::ceil(seg_len / gp.waypoint_spacing)));
        double ds = seg_len / steps;
        for (int i = 0; i < steps && built < total; i++) {
            heading += curvature * ds;
            pos = pos + ds * Vec2{std::cos(heading), std::sin(heading)};
            track.centerline.push_back(pos);
            built += ds;
        }
    }
    return track;
}

struct PaletteGenParams {
    double noise_std_max = 0.03;
    int min_channel_gap = 32;  // pairwise distinguishability floor
};

inline WeatherPalette generate_palette(std::uint64_t seed, const PaletteGenParams& pp = {}) {
    Rng rng(mix_seed(seed, 0x70616cULL));
    WeatherPalette p;
    p.seed = seed;
    auto u8 = [&](double lo, double hi) {
        return static_cast<std::uint8_t>(std::lround(std::clamp(rng.uniform(lo, hi), 0.0, 255.0)));
    };
    auto gap_ok = [&](const std::uint8_t* a, const std::uint8_t* b) {
        int worst = 0;
        for (int i = 0; i < 3; i++) worst = std::max(worst, std::abs(int(a[i]) - int(b[i])));
        return worst >= pp.min_channel_gap;
    };
    for (int attempt = 0; attempt < 64; attempt++) {
        int base = 50 + static_cast<int>(rng.uniform_index(41));
        for (int i = 0; i < 3; i++) p.road_color[i] = u8(base - 10, base + 10);
        if (rng.uniform() < 0.6) {  // white divider
            for (int i = 0; i < 3; i++) p.lane_color[i] = u8(210, 250);
        } else {  // yellow divider
            p.lane_color[0] = u8(205, 245);
            p.lane_color[1] = u8(170, 215);
            p.lane_color[2] = u8(20, 70);
        }
        p.offroad_color[0] = u8(30, 100);
        p.offroad_color[1] = u8(80, 165);
        p.offroad_color[2] = u8(15, 75);
        if (gap_ok(p.road_color, p.lane_color) && gap_ok(p.road_color, p.offroad_color) &&
            gap_ok(p.lane_color, p.offroad_color))
            break;
    }
    p.noise_std = rng.uniform(0.0, pp.noise_std_max);
    return p;
}

// ---- reward ------------------------------------------------------------------

// Per-step reward from consecutive cumulative metrics:
//   r = k1*(d - d') + k2*(v - v') - k3*(s - s') - k4*(o - o')
inline double compute_reward(const StepMetrics& curr, const StepMetrics& prev,
                             const RewardCoefficients& k) {
    return k.k1 * (curr.d - prev.d) + k.k2 * (curr.v - prev.v) - k.k3 * (curr.s - prev.s) -
           k.k4 * (curr.o - prev.o);
}

// ---- rasterizer ----------------------------------------------------------------

// Forward-facing ground-plane render: each pixel row maps to a fixed distance
// ahead of the vehicle, columns fan out with distance (pinhole ground
// projection). Road band spans |lateral| <= half_width + shoulder, the divider
// is painted at +half_width, everything else takes the offroad color. Noise is
// seeded from (track seed, palette seed, elapsed step), so frames are a pure
// function of their inputs.
inline Frame rasterize(const VehicleState& state, const TrackSpec& track,
                       const WeatherPalette& palette, int size, const SimParams& sim,
                       const TrackGeometry* geom_hint = nullptr) {
    if (size != 32 && size != 64 && size != 128)
        throw ConfigError("rasterize: unsupported frame size " + std::to_string(size) +
                          " (expected 32, 64 or 128)");
    std::optional<TrackGeometry> local_geom;
    if (!geom_hint) local_geom.emplace(track);
    const TrackGeometry& geom = geom_hint ? *geom_hint : *local_geom;

    Frame frame;
    frame.width = size;
    frame.height = size;
    frame.pixels.assign(static_cast<std::size_t>(size) * size * 3, 0);

    const double far = 50.0, near = 2.0, cam_height = 1.2;
    const double r0 = near * (size - 1) / (far - near);
    const double a_const = far * r0;  // forward(row) = a_const / (row + r0)

    const double road_half = track.lane_half_width + sim.shoulder_margin;
    const Vec2 fwd{std::cos(state.heading), std::sin(state.heading)};
    const Vec2 left{-std::sin(state.heading), std::cos(state.heading)};

    Rng noise_rng(mix_seed(track.seed, palette.seed, static_cast<std::uint64_t>(state.elapsed_steps),
                           0x6e6f697365ULL));
    const double noise_scale = palette.noise_std * 255.0;

    std::uint8_t* px = frame.pixels.data();
    for (int row = 0; row < size; row++) {
        double f = a_const / (row + r0);
        double lat_per_col = f * cam_height / a_const;
        double arc_center = state.arc_progress + f;
        double arc_window = 0.75 * f + 12.0;
        double arc_lo = arc_center - arc_window;
        double arc_hi = arc_center + arc_window;
        for (int col = 0; col < size; col++) {
            double lat = (col - 0.5 * (size - 1)) * lat_per_col;
            Vec2 p = state.position + f * fwd + lat * left;
            Projection proj = geom.project(p, arc_lo, arc_hi);
            const std::uint8_t* color;
            double n = proj.lateral;
            if (std::fabs(n) <= road_half)
                color = std::fabs(n - track.lane_half_width) <= sim.divider_half_width
                            ? palette.lane_color
                            : palette.road_color;
            else
                color = palette.offroad_color;
            for (int ch = 0; ch < 3; ch++) {
                double v = color[ch];
                if (noise_scale > 0.0) v += noise_rng.normal(0.0, noise_scale);
                *px++ = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
            }
        }
    }
    return frame;
}

// ---- reset / step -----------------------------------------------------------------

inline VehicleState reset_state(const TrackSpec& track, double start_offset,
                                const TrackGeometry& geom) {
    if (start_offset < 0.0 || start_offset >= track.goal_arc_length)
        throw ContractError("reset: start_offset " + std::to_string(start_offset) +
                            " out of [0, goal_arc_length) = [0, " +
                            std::to_string(track.goal_arc_length) + ")");
    VehicleState s;
    s.position = geom.point_at(start_offset);
    Vec2 t = geom.tangent_at(start_offset);
    s.heading = std::atan2(t.y, t.x);
    s.speed = 0.0;
    s.arc_progress = start_offset;
    s.elapsed_steps = 0;
    return s;
}

inline std::pair<VehicleState, Frame> reset(const TrackSpec& track, const WeatherPalette& palette,
                                            double start_offset, const SimParams& sim,
                                            int frame_size) {
    TrackGeometry geom(track);
    VehicleState s = reset_state(track, start_offset, geom);
    return {s, rasterize(s, track, palette, frame_size, sim, &geom)};
}

struct StepResult {
    VehicleState state;
    StepMetrics metrics;
    Termination termination = Termination::running;
};

// Dynamics + metrics + termination, no rendering. Exactly one termination
// cause fires, checked in the order success, collision, timeout.
inline StepResult step_dynamics(const VehicleState& state, const StepMetrics& prev,
                                const Action& action, const TrackSpec& track,
                                const SimParams& sim, const TrackGeometry& geom) {
    if (state.elapsed_steps >= sim.step_budget)
        throw ContractError("step: episode already exhausted its step budget");
    if (!std::isfinite(action.steer) || !std::isfinite(action.throttle_brake))
        throw ContractError("step: non-finite action component");

    double steer = std::clamp(action.steer, -1.0, 1.0);
    double tb = std::clamp(action.throttle_brake, -1.0, 1.0);

    StepResult out;
    VehicleState& s = out.state;
    double delta = steer * sim.max_steer_rad();
    double accel = tb >= 0.0 ? tb * sim.throttle_gain : tb * sim.brake_gain;
    s.speed = std::clamp(state.speed + accel * sim.dt, 0.0, sim.v_max);
    s.heading = state.heading + s.speed / sim.wheelbase * std::tan(delta) * sim.dt;
    s.position = state.position + (s.speed * sim.dt) * Vec2{std::cos(s.heading), std::sin(s.heading)};
    s.elapsed_steps = state.elapsed_steps + 1;

    double window = 15.0 + state.speed * sim.dt;
    Projection proj =
        geom.project(s.position, state.arc_progress - window, state.arc_progress + window);
    s.arc_progress = proj.arc;

    out.metrics.d = std::max(prev.d, proj.arc / 1000.0);  // km, non-decreasing
    out.metrics.v = s.speed * 3.6;                        // km/h
    double off = std::fabs(proj.lateral);
    out.metrics.s = prev.s + (off > track.lane_half_width ? sim.dt : 0.0);
    out.metrics.o = prev.o + (proj.lateral > track.lane_half_width ? sim.dt : 0.0);

    if (proj.arc >= track.goal_arc_length)
        out.termination = Termination::success;
    else if (off > track.lane_half_width + sim.shoulder_margin)
        out.termination = Termination::collision;
    else if (s.elapsed_steps >= sim.step_budget)
        out.termination = Termination::timeout;
    else
        out.termination = Termination::running;
    return out;
}

// Owns one rollout: cumulative metrics, termination latch, cached geometry.
// Instances are independent value objects; run as many in parallel as needed.
class Episode {
public:
    Episode(TrackSpec track, WeatherPalette palette, SimParams sim, int frame_size,
            double start_offset)
        : track_(std::move(track)),
          palette_(palette),
          sim_(sim),
          frame_size_(frame_size),
          geom_(track_) {
        state_ = reset_state(track_, start_offset, geom_);
        frame_ = rasterize(state_, track_, palette_, frame_size_, sim_, &geom_);
    }

    const VehicleState& state() const { return state_; }
    const StepMetrics& metrics() const { return metrics_; }
    const Frame& frame() const { return frame_; }
    const TrackSpec& track() const { return track_; }
    const WeatherPalette& palette() const { return palette_; }
    const TrackGeometry& geometry() const { return geom_; }
    Termination termination() const { return termination_; }
    bool done() const { return termination_ != Termination::running; }

    // Advances one step and returns the reward of the transition.
    double step(const Action& action, const RewardCoefficients& k) {
        if (done()) throw ContractError("step: episode already terminated");
        StepResult r = step_dynamics(state_, metrics_, action, track_, sim_, geom_);
        double reward = compute_reward(r.metrics, metrics_, k);
        state_ = r.state;
        metrics_ = r.metrics;
        termination_ = r.termination;
        frame_ = rasterize(state_, track_, palette_, frame_size_, sim_, &geom_);
        return reward;
    }

private:
    TrackSpec track_;
    WeatherPalette palette_;
    SimParams sim_;
    int frame_size_;
    TrackGeometry geom_;
    VehicleState state_;
    StepMetrics metrics_;
    Frame frame_;
    Termination termination_ = Termination::running;
};

// ---- scripted drivers -------------------------------------------------------------

struct PurePursuitParams {
    double lookahead_base = 4.0;
    double lookahead_speed_gain = 0.6;
    double target_speed = 8.0;  // m/s
    double speed_kp = 0.6;
};

// Geometric path tracker used to collect training trajectories.
inline Action pure_pursuit_action(const VehicleState& state, const TrackGeometry& geom,
                                  const SimParams& sim, const PurePursuitParams& pp = {}) {
    double ld = pp.lookahead_base + pp.lookahead_speed_gain * state.speed;
    Vec2 target = geom.point_at(std::min(state.arc_progress + ld, geom.total_length()));
    Vec2 rel = target - state.position;
    double fwd = rel.x * std::cos(state.heading) + rel.y * std::sin(state.heading);
    double left = -rel.x * std::sin(state.heading) + rel.y * std::cos(state.heading);
    double alpha = std::atan2(left, std::max(fwd, 1e-6));
    double curvature = 2.0 * std::sin(alpha) / ld;
    double delta = std::atan(curvature * sim.wheelbase);
    Action a;
    a.steer = std::clamp(delta / sim.max_steer_rad(), -1.0, 1.0);
    a.throttle_brake = std::clamp(pp.speed_kp * (pp.target_speed - state.speed), -1.0, 1.0);
    return a;
}

// Smooth seeded random driver; supplies off-center and off-road views that the
// tracker never visits.
class RandomDriver {
public:
    explicit RandomDriver(std::uint64_t seed) : rng_(mix_seed(seed, 0x726e64ULL)) {}

    Action next() {
        steer_ = std::clamp(0.90 * steer_ + 0.28 * rng_.normal(), -1.0, 1.0);
        throttle_ = std::clamp(0.90 * throttle_ + 0.10 * rng_.normal() + 0.035, -1.0, 1.0);
        return {steer_, throttle_};
    }

private:
    Rng rng_;
    double steer_ = 0.0;
    double throttle_ = 0.3;
};

// ---- serialization ------------------------------------------------------------------

inline std::string track_to_text(const TrackSpec& t) {
    std::ostringstream out;
    out.precision(17);
    out << "seed = " << t.seed << "\n";
    out << "lane_half_width = " << t.lane_half_width << "\n";
    out << "goal_arc_length = " << t.goal_arc_length << "\n";
    for (const Vec2& p : t.centerline) out << "waypoint = " << p.x << " " << p.y << "\n";
    return out.str();
}

inline TrackSpec track_from_text(const std::string& text) {
    TrackSpec t;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        std::istringstream ls(line);
        std::string key, eq;
        if (!(ls >> key >> eq) || eq != "=") continue;
        if (key == "seed")
            ls >> t.seed;
        else if (key == "lane_half_width")
            ls >> t.lane_half_width;
        else if (key == "goal_arc_length")
            ls >> t.goal_arc_length;
        else if (key == "waypoint") {
            Vec2 p;
            ls >> p.x >> p.y;
            t.centerline.push_back(p);
        }
    }
    if (t.centerline.size() < 2) throw ConfigError("track text: fewer than 2 waypoints");
    if (t.lane_half_width <= 0.0) throw ConfigError("track text: lane_half_width must be > 0");
    TrackGeometry geom(t);  // validates distinct consecutive waypoints
    if (t.goal_arc_length > geom.total_length())
        throw ConfigError("track text: goal_arc_length exceeds centerline length");
    return t;
}

inline std::string palette_to_text(const WeatherPalette& p) {
    std::ostringstream out;
    out.precision(17);
    out << "seed = " << p.seed << "\n";
    auto rgb = [&](const char* key, const std::uint8_t* c) {
        out << key << " = " << int(c[0]) << " " << int(c[1]) << " " << int(c[2]) << "\n";
    };
    rgb("road_color", p.road_color);
    rgb("lane_color", p.lane_color);
    rgb("offroad_color", p.offroad_color);
    out << "noise_std = " << p.noise_std << "\n";
    return out.str();
}

inline WeatherPalette palette_from_text(const std::string& text) {
    WeatherPalette p;
    std::istringstream in(text);
    std::string line;
    auto read_rgb = [](std::istringstream& ls, std::uint8_t* c) {
        int r, g, b;
        ls >> r >> g >> b;
        c[0] = static_cast<std::uint8_t>(r);
        c[1] = static_cast<std::uint8_t>(g);
        c[2] = static_cast<std::uint8_t>(b);
    };
    while (std::getline(in, line)) {
        std::istringstream ls(line);
        std::string key, eq;
        if (!(ls >> key >> eq) || eq != "=") continue;
        if (key == "seed")
            ls >> p.seed;
        else if (key == "road_color")
            read_rgb(ls, p.road_color);
        else if (key == "lane_color")
            read_rgb(ls, p.lane_color);
        else if (key == "offroad_color")
            read_rgb(ls, p.offroad_color);
        else if (key == "noise_std")
            ls >> p.noise_std;
    }
    if (p.noise_std < 0.0) throw ConfigError("palette text: noise_std must be >= 0");
    return p;
}

// Raw RGB frame dump: u32 width, u32 height (little-endian), then pixels.
inline void write_frame_dump(const Frame& f, std::ostream& out) {
    auto put_u32 = [&](std::uint32_t v) {
        unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 24)};
        out.write(reinterpret_cast<const char*>(b), 4);
    };
    put_u32(static_cast<std::uint32_t>(f.width));
    put_u32(static_cast<std::uint32_t>(f.height));
    out.write(reinterpret_cast<const char*>(f.pixels.data()),
              static_cast<std::streamsize>(f.pixels.size()));
}

inline Frame read_frame_dump(std::istream& in) {
    auto get_u32 = [&]() {
        unsigned char b[4];
        in.read(reinterpret_cast<char*>(b), 4);
        return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
               (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
    };
    Frame f;
    f.width = static_cast<int>(get_u32());
    f.height = static_cast<int>(get_u32());
    f.pixels.resize(static_cast<std::size_t>(f.width) * f.height * 3);
    in.read(reinterpret_cast<char*>(f.pixels.data()),
            static_cast<std::streamsize>(f.pixels.size()));
    if (!in) throw DependencyError("frame dump: truncated stream");
    return f;
}

}  // namespace lanekeep
