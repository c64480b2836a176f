#pragma once

#include "rawsplat/color_field.hpp"
#include "rawsplat/types.hpp"

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace rawsplat {

/// Parses `key = value` lines. '#' starts a comment; blank lines are ignored.
inline std::map<std::string, std::string> parse_key_values(std::istream& in) {
    std::map<std::string, std::string> kv;
    std::string line;
    int line_no = 0;
    auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return std::string();
        const auto e = s.find_last_not_of(" \t\r");
        return s.substr(b, e - b + 1);
    };
    while (std::getline(in, line)) {
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw FormatError("config line " + std::to_string(line_no) + ": expected 'key = value'");
        }
        kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    return kv;
}

inline std::map<std::string, std::string> read_key_value_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open config file '" + path + "'");
    return parse_key_values(in);
}

namespace detail {

inline double parse_double(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const double d = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw FormatError("config key '" + key + "': '" + v + "' is not a number");
    }
}

inline long long parse_int(const std::string& key, const std::string& v) {
    long long out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) {
        throw FormatError("config key '" + key + "': '" + v + "' is not an integer");
    }
    return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw FormatError("config key '" + key + "': '" + v + "' is not a boolean");
}

inline std::string format_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

} // namespace detail

/// Every knob of a training run.
struct TrainConfig {
    // Loss weights and stabilizer.
    double lambda_t = 0.01;
    double lambda_dist = 0.1;
    double lambda_nf = 0.01;
    double epsilon = 1e-3;

    long iterations = 30000;

    // Densification and pruning.
    long densify_interval = 100;
    long densify_from = 500;
    double densify_until_fraction = 0.5;
    double densify_grad_threshold = 2e-4;
    double prune_opacity = 0.005;
    double percent_dense = 0.01;
    long max_primitives = 200000;

    // Learning rates.
    double lr_mlp = 1e-4;
    double lr_feature = 2e-3;
    double lr_bias = 1e-4;
    double lr_final = 1e-5;
    double lr_position = 1.6e-4;
    double lr_position_final = 1.6e-6;
    double lr_scale = 5e-3;
    double lr_rotation = 1e-3;
    double lr_opacity = 0.05;
    double lr_exposure = 1e-3;

    // Rendering of structure maps.
    int bins = 64;
    int near_far_count = 3;

    // Initialization.
    int feature_dim = 16;
    double feature_sigma = 0.1;
    double lambda_frustum = 10.0;
    long scatter_count = 10000;

    ColorModel color_model = ColorModel::mlp;
    std::uint64_t seed = 0;

    void validate() const {
        if (lambda_t < 0 || lambda_dist < 0 || lambda_nf < 0) throw InvalidArgumentError("loss weights must be nonnegative");
        if (!(epsilon > 0)) throw InvalidArgumentError("epsilon must be positive");
        for (double lr : {lr_mlp, lr_feature, lr_bias, lr_final, lr_position, lr_position_final, lr_scale,
                          lr_rotation, lr_opacity, lr_exposure}) {
            if (!(lr > 0)) throw InvalidArgumentError("learning rates must be positive");
        }
        if (iterations < 0) throw InvalidArgumentError("iterations must be nonnegative");
        if (bins < 2) throw InvalidArgumentError("bins must be at least 2");
        if (near_far_count < 1) throw InvalidArgumentError("near_far_count must be at least 1");
        if (feature_dim < 0) throw InvalidArgumentError("feature_dim must be nonnegative");
        if (densify_interval < 1) throw InvalidArgumentError("densify_interval must be at least 1");
    }

    /// Applies `key = value` overrides. Unknown keys are an error.
    void apply(const std::map<std::string, std::string>& kv) {
        for (const auto& [k, v] : kv) set(k, v);
        validate();
    }

    void set(const std::string& k, const std::string& v) {
        using namespace detail;
        const std::map<std::string, std::function<void()>> setters = {
            {"lambda_t", [&] { lambda_t = parse_double(k, v); }},
            {"lambda_dist", [&] { lambda_dist = parse_double(k, v); }},
            {"lambda_nf", [&] { lambda_nf = parse_double(k, v); }},
            {"epsilon", [&] { epsilon = parse_double(k, v); }},
            {"iterations", [&] { iterations = parse_int(k, v); }},
            {"densify_interval", [&] { densify_interval = parse_int(k, v); }},
            {"densify_from", [&] { densify_from = parse_int(k, v); }},
            {"densify_until_fraction", [&] { densify_until_fraction = parse_double(k, v); }},
            {"densify_grad_threshold", [&] { densify_grad_threshold = parse_double(k, v); }},
            {"prune_opacity", [&] { prune_opacity = parse_double(k, v); }},
            {"percent_dense", [&] { percent_dense = parse_double(k, v); }},
            {"max_primitives", [&] { max_primitives = parse_int(k, v); }},
            {"lr_mlp", [&] { lr_mlp = parse_double(k, v); }},
            {"lr_feature", [&] { lr_feature = parse_double(k, v); }},
            {"lr_bias", [&] { lr_bias = parse_double(k, v); }},
            {"lr_final", [&] { lr_final = parse_double(k, v); }},
            {"lr_position", [&] { lr_position = parse_double(k, v); }},
            {"lr_position_final", [&] { lr_position_final = parse_double(k, v); }},
            {"lr_scale", [&] { lr_scale = parse_double(k, v); }},
            {"lr_rotation", [&] { lr_rotation = parse_double(k, v); }},
            {"lr_opacity", [&] { lr_opacity = parse_double(k, v); }},
            {"lr_exposure", [&] { lr_exposure = parse_double(k, v); }},
            {"bins", [&] { bins = static_cast<int>(parse_int(k, v)); }},
            {"near_far_count", [&] { near_far_count = static_cast<int>(parse_int(k, v)); }},
            {"feature_dim", [&] { feature_dim = static_cast<int>(parse_int(k, v)); }},
            {"feature_sigma", [&] { feature_sigma = parse_double(k, v); }},
            {"lambda_frustum", [&] { lambda_frustum = parse_double(k, v); }},
            {"scatter_count", [&] { scatter_count = parse_int(k, v); }},
            {"color_model", [&] { color_model = color_model_from_string(v); }},
            {"seed", [&] { seed = static_cast<std::uint64_t>(parse_int(k, v)); }},
        };
        const auto it = setters.find(k);
        if (it == setters.end()) throw FormatError("unknown config key '" + k + "'");
        it->second();
    }

    std::map<std::string, std::string> to_key_values() const {
        using detail::format_double;
        return {
            {"lambda_t", format_double(lambda_t)},
            {"lambda_dist", format_double(lambda_dist)},
            {"lambda_nf", format_double(lambda_nf)},
            {"epsilon", format_double(epsilon)},
            {"iterations", std::to_string(iterations)},
            {"densify_interval", std::to_string(densify_interval)},
            {"densify_from", std::to_string(densify_from)},
            {"densify_until_fraction", format_double(densify_until_fraction)},
            {"densify_grad_threshold", format_double(densify_grad_threshold)},
            {"prune_opacity", format_double(prune_opacity)},
            {"percent_dense", format_double(percent_dense)},
            {"max_primitives", std::to_string(max_primitives)},
            {"lr_mlp", format_double(lr_mlp)},
            {"lr_feature", format_double(lr_feature)},
            {"lr_bias", format_double(lr_bias)},
            {"lr_final", format_double(lr_final)},
            {"lr_position", format_double(lr_position)},
            {"lr_position_final", format_double(lr_position_final)},
            {"lr_scale", format_double(lr_scale)},
            {"lr_rotation", format_double(lr_rotation)},
            {"lr_opacity", format_double(lr_opacity)},
            {"lr_exposure", format_double(lr_exposure)},
            {"bins", std::to_string(bins)},
            {"near_far_count", std::to_string(near_far_count)},
            {"feature_dim", std::to_string(feature_dim)},
            {"feature_sigma", format_double(feature_sigma)},
            {"lambda_frustum", format_double(lambda_frustum)},
            {"scatter_count", std::to_string(scatter_count)},
            {"color_model", to_string(color_model)},
            {"seed", std::to_string(seed)},
        };
    }

    std::string to_text() const {
        std::string s;
        for (const auto& [k, v] : to_key_values()) s += k + " = " + v + "\n";
        return s;
    }

    static TrainConfig from_text(const std::string& text) {
        std::istringstream in(text);
        TrainConfig c;
        c.apply(parse_key_values(in));
        return c;
    }

    static TrainConfig from_file(const std::string& path) {
        TrainConfig c;
        c.apply(read_key_value_file(path));
        return c;
    }
};

} // namespace rawsplat
