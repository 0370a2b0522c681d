#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "lanekeep/errors.hpp"
#include "lanekeep/sim.hpp"

namespace lanekeep {

// Every tunable of the four-stage pipeline, persisted alongside each artifact.
// Defaults are the desk-scale configuration.
struct RunConfig {
    std::uint64_t seed = 0;
    int threads = 0;  // 0 = hardware concurrency

    int frame_size = 64;
    int latent_dim = 32;
    int rnn_hidden = 64;
    int vae_channels_base = 16;

    SimParams sim;
    RewardCoefficients reward;
    TrackGenParams track;

    int collect_scripted_episodes = 40;
    int collect_random_episodes = 10;
    int collect_palettes = 10;
    double collect_start_offset_max = 15.0;
    double collect_target_speed = 8.0;

    int vae_epochs = 8;
    int vae_batch = 64;
    double vae_lr = 1e-3;
    double vae_beta = 1.0;
    long vae_max_frames = 0;

    int rnn_epochs = 12;
    int rnn_window = 32;
    int rnn_batch_episodes = 8;
    double rnn_lr = 1e-3;

    int es_lambda = 32;
    int es_max_generations = 60;
    double es_sigma0 = 0.2;
    int es_rollouts = 4;             // fitness = mean return over this many rollouts
    int es_validation_rollouts = 8;  // fixed-seed re-evaluation of each generation's best
    double es_target_return = 115.0; // early stop when validation reaches this; nan disables
    double es_throttle_bias = 0.3;   // initial mean for the throttle bias entry
    double es_elite_fraction = 0.2;
    bool es_equal_weights = false;

    int eval_pairs = 20;

    std::uint64_t pool_train_track_base = 0;
    int pool_train_track_count = 100;
    std::uint64_t pool_test_track_base = 1000;
    int pool_test_track_count = 100;
    std::uint64_t pool_train_palette_base = 0;
    std::uint64_t pool_test_palette_base = 1000;
    int pool_test_palette_count = 100;
};

namespace detail {

struct ConfigKey {
    std::string name;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
};

inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline const std::vector<ConfigKey>& config_keys() {
    static const std::vector<ConfigKey> keys = [] {
        std::vector<ConfigKey> k;
        auto add_u64 = [&](const char* name, std::uint64_t RunConfig::*field) {
            k.push_back({name,
                         [field](const RunConfig& c) { return std::to_string(c.*field); },
                         [field, name](RunConfig& c, const std::string& v) {
                             try {
                                 c.*field = std::stoull(v);
                             } catch (...) {
                                 throw ConfigError(std::string("config: bad value for ") + name +
                                                   ": '" + v + "'");
                             }
                         }});
        };
        auto add_int = [&](const char* name, auto field_ptr) {
            k.push_back({name,
                         [field_ptr](const RunConfig& c) { return std::to_string(c.*field_ptr); },
                         [field_ptr, name](RunConfig& c, const std::string& v) {
                             try {
                                 c.*field_ptr = static_cast<std::remove_reference_t<decltype(c.*field_ptr)>>(std::stoll(v));
                             } catch (...) {
                                 throw ConfigError(std::string("config: bad value for ") + name +
                                                   ": '" + v + "'");
                             }
                         }});
        };
        auto add_dbl = [&](const char* name, auto field_ptr) {
            k.push_back({name,
                         [field_ptr](const RunConfig& c) { return fmt_double(c.*field_ptr); },
                         [field_ptr, name](RunConfig& c, const std::string& v) {
                             try {
                                 c.*field_ptr = std::stod(v);
                             } catch (...) {
                                 throw ConfigError(std::string("config: bad value for ") + name +
                                                   ": '" + v + "'");
                             }
                         }});
        };
        auto add_sim_dbl = [&](const char* name, double SimParams::*field) {
            k.push_back({name,
                         [field](const RunConfig& c) { return fmt_double(c.sim.*field); },
                         [field, name](RunConfig& c, const std::string& v) {
                             try {
                                 c.sim.*field = std::stod(v);
                             } catch (...) {
                                 throw ConfigError(std::string("config: bad value for ") + name +
                                                   ": '" + v + "'");
                             }
                         }});
        };
        auto add_track_dbl = [&](const char* name, double TrackGenParams::*field) {
            k.push_back({name,
                         [field](const RunConfig& c) { return fmt_double(c.track.*field); },
                         [field, name](RunConfig& c, const std::string& v) {
                             try {
                                 c.track.*field = std::stod(v);
                             } catch (...) {
                                 throw ConfigError(std::string("config: bad value for ") + name +
                                                   ": '" + v + "'");
                             }
                         }});
        };
        auto add_reward = [&](const char* name, double RewardCoefficients::*field) {
            k.push_back({name,
                         [field](const RunConfig& c) { return fmt_double(c.reward.*field); },
                         [field, name](RunConfig& c, const std::string& v) {
                             try {
                                 c.reward.*field = std::stod(v);
                             } catch (...) {
                                 throw ConfigError(std::string("config: bad value for ") + name +
                                                   ": '" + v + "'");
                             }
                         }});
        };

        add_u64("seed", &RunConfig::seed);
        add_int("threads", &RunConfig::threads);
        add_int("frame_size", &RunConfig::frame_size);
        add_int("latent_dim", &RunConfig::latent_dim);
        add_int("rnn_hidden", &RunConfig::rnn_hidden);
        add_int("vae.channels_base", &RunConfig::vae_channels_base);

        add_sim_dbl("sim.dt", &SimParams::dt);
        add_sim_dbl("sim.wheelbase", &SimParams::wheelbase);
        add_sim_dbl("sim.v_max", &SimParams::v_max);
        add_sim_dbl("sim.throttle_gain", &SimParams::throttle_gain);
        add_sim_dbl("sim.brake_gain", &SimParams::brake_gain);
        add_sim_dbl("sim.max_steer_deg", &SimParams::max_steer_deg);
        add_sim_dbl("sim.shoulder_margin", &SimParams::shoulder_margin);
        add_sim_dbl("sim.divider_half_width", &SimParams::divider_half_width);
        k.push_back({"sim.step_budget",
                     [](const RunConfig& c) { return std::to_string(c.sim.step_budget); },
                     [](RunConfig& c, const std::string& v) {
                         try {
                             c.sim.step_budget = std::stoi(v);
                         } catch (...) {
                             throw ConfigError("config: bad value for sim.step_budget: '" + v + "'");
                         }
                     }});

        add_reward("reward.k1", &RewardCoefficients::k1);
        add_reward("reward.k2", &RewardCoefficients::k2);
        add_reward("reward.k3", &RewardCoefficients::k3);
        add_reward("reward.k4", &RewardCoefficients::k4);

        add_track_dbl("track.waypoint_spacing", &TrackGenParams::waypoint_spacing);
        add_track_dbl("track.lead_in", &TrackGenParams::lead_in);
        add_track_dbl("track.goal_margin", &TrackGenParams::goal_margin);
        add_track_dbl("track.goal_length_min", &TrackGenParams::goal_length_min);
        add_track_dbl("track.goal_length_max", &TrackGenParams::goal_length_max);
        add_track_dbl("track.seg_len_min", &TrackGenParams::seg_len_min);
        add_track_dbl("track.seg_len_max", &TrackGenParams::seg_len_max);
        add_track_dbl("track.straight_prob", &TrackGenParams::straight_prob);
        add_track_dbl("track.train_curv_min", &TrackGenParams::train_curv_min);
        add_track_dbl("track.train_curv_max", &TrackGenParams::train_curv_max);
        add_track_dbl("track.test_curv_min", &TrackGenParams::test_curv_min);
        add_track_dbl("track.test_curv_max", &TrackGenParams::test_curv_max);
        add_track_dbl("track.max_heading_swing", &TrackGenParams::max_heading_swing);
        add_track_dbl("track.lane_half_width", &TrackGenParams::lane_half_width);

        add_int("collect.scripted_episodes", &RunConfig::collect_scripted_episodes);
        add_int("collect.random_episodes", &RunConfig::collect_random_episodes);
        add_int("collect.palettes", &RunConfig::collect_palettes);
        add_dbl("collect.start_offset_max", &RunConfig::collect_start_offset_max);
        add_dbl("collect.target_speed", &RunConfig::collect_target_speed);

        add_int("vae.epochs", &RunConfig::vae_epochs);
        add_int("vae.batch", &RunConfig::vae_batch);
        add_dbl("vae.lr", &RunConfig::vae_lr);
        add_dbl("vae.beta", &RunConfig::vae_beta);
        add_int("vae.max_frames", &RunConfig::vae_max_frames);

        add_int("rnn.epochs", &RunConfig::rnn_epochs);
        add_int("rnn.window", &RunConfig::rnn_window);
        add_int("rnn.batch_episodes", &RunConfig::rnn_batch_episodes);
        add_dbl("rnn.lr", &RunConfig::rnn_lr);

        add_int("es.lambda", &RunConfig::es_lambda);
        add_int("es.max_generations", &RunConfig::es_max_generations);
        add_dbl("es.sigma0", &RunConfig::es_sigma0);
        add_int("es.rollouts", &RunConfig::es_rollouts);
        add_int("es.validation_rollouts", &RunConfig::es_validation_rollouts);
        add_dbl("es.target_return", &RunConfig::es_target_return);
        add_dbl("es.throttle_bias", &RunConfig::es_throttle_bias);
        add_dbl("es.elite_fraction", &RunConfig::es_elite_fraction);
        k.push_back({"es.equal_weights",
                     [](const RunConfig& c) { return c.es_equal_weights ? "1" : "0"; },
                     [](RunConfig& c, const std::string& v) {
                         if (v == "1" || v == "true")
                             c.es_equal_weights = true;
                         else if (v == "0" || v == "false")
                             c.es_equal_weights = false;
                         else
                             throw ConfigError("config: bad value for es.equal_weights: '" + v +
                                               "'");
                     }});

        add_int("eval.pairs", &RunConfig::eval_pairs);

        add_u64("pools.train_track_base", &RunConfig::pool_train_track_base);
        add_int("pools.train_track_count", &RunConfig::pool_train_track_count);
        add_u64("pools.test_track_base", &RunConfig::pool_test_track_base);
        add_int("pools.test_track_count", &RunConfig::pool_test_track_count);
        add_u64("pools.train_palette_base", &RunConfig::pool_train_palette_base);
        add_u64("pools.test_palette_base", &RunConfig::pool_test_palette_base);
        add_int("pools.test_palette_count", &RunConfig::pool_test_palette_count);
        return k;
    }();
    return keys;
}

}  // namespace detail

inline void config_set(RunConfig& cfg, const std::string& key, const std::string& value) {
    for (const auto& k : detail::config_keys()) {
        if (k.name == key) {
            k.set(cfg, value);
            return;
        }
    }
    throw ConfigError("config: unknown key '" + key + "'");
}

// Canonical serialization: every key, sorted order, full precision.
inline std::string config_to_text(const RunConfig& cfg) {
    std::vector<std::pair<std::string, std::string>> rows;
    for (const auto& k : detail::config_keys()) rows.emplace_back(k.name, k.get(cfg));
    std::sort(rows.begin(), rows.end());
    std::string out;
    for (const auto& [k, v] : rows) out += k + " = " + v + "\n";
    return out;
}

inline void config_apply_text(RunConfig& cfg, const std::string& text) {
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        lineno++;
        std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        std::size_t eq = line.find('=');
        if (eq == std::string::npos) {
            bool blank = line.find_first_not_of(" \t\r") == std::string::npos;
            if (blank) continue;
            throw ConfigError("config: line " + std::to_string(lineno) + " is not 'key = value'");
        }
        auto trim = [](std::string s) {
            std::size_t a = s.find_first_not_of(" \t\r");
            std::size_t b = s.find_last_not_of(" \t\r");
            return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
        };
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError("config: empty key on line " + std::to_string(lineno));
        config_set(cfg, key, value);
    }
}

inline RunConfig config_from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    RunConfig cfg;
    config_apply_text(cfg, buf.str());
    return cfg;
}

// FNV-1a 64 over the canonical text; embedded in every artifact. The threads
// key is excluded: results are independent of the worker count, so it is an
// execution resource rather than part of the run's identity.
inline std::string config_hash(const RunConfig& cfg) {
    std::string text;
    {
        std::istringstream in(config_to_text(cfg));
        std::string line;
        while (std::getline(in, line))
            if (line.rfind("threads ", 0) != 0) text += line + "\n";
    }
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    char hex[17];
    std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(h));
    return hex;
}

}  // namespace lanekeep
