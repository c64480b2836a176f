#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <vector>

namespace rawsplat {

/// Adam moments for one flat parameter group.
class AdamGroup {
public:
    static constexpr double kBeta1 = 0.9;
    static constexpr double kBeta2 = 0.999;
    static constexpr double kEpsilon = 1e-15;

    explicit AdamGroup(std::size_t n = 0) : m_(n, 0.0), v_(n, 0.0) {}

    std::size_t size() const { return m_.size(); }
    long steps() const { return step_; }

    void step(std::span<double> params, std::span<const double> grads, double lr) {
        ++step_;
        const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(step_));
        const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(step_));
        const double step_size = lr / c1;
        const double sqrt_c2 = std::sqrt(c2);
        for (std::size_t i = 0; i < params.size(); ++i) {
            m_[i] = kBeta1 * m_[i] + (1.0 - kBeta1) * grads[i];
            v_[i] = kBeta2 * v_[i] + (1.0 - kBeta2) * grads[i] * grads[i];
            params[i] -= step_size * m_[i] / (std::sqrt(v_[i]) / sqrt_c2 + kEpsilon);
        }
    }

    /// Keeps rows of width `stride` whose mask entry is true.
    void keep(const std::vector<bool>& mask, std::size_t stride) {
        std::size_t out = 0;
        for (std::size_t r = 0; r < mask.size(); ++r) {
            if (!mask[r]) continue;
            for (std::size_t k = 0; k < stride; ++k) {
                m_[out * stride + k] = m_[r * stride + k];
                v_[out * stride + k] = v_[r * stride + k];
            }
            ++out;
        }
        m_.resize(out * stride);
        v_.resize(out * stride);
    }

    /// Appends zeroed moments for `rows` new rows.
    void grow(std::size_t rows, std::size_t stride) {
        m_.resize(m_.size() + rows * stride, 0.0);
        v_.resize(v_.size() + rows * stride, 0.0);
    }

    std::vector<double>& first_moment() { return m_; }
    std::vector<double>& second_moment() { return v_; }

private:
    std::vector<double> m_, v_;
    long step_ = 0;
};

/// Cosine decay from `initial` at step 0 to `final` at the last step.
inline double cosine_lr(double initial, double final_lr, long step, long total_steps) {
    if (total_steps <= 1) return initial;
    const double t = std::min(1.0, std::max(0.0, static_cast<double>(step) / (total_steps - 1)));
    return final_lr + (initial - final_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

/// Log-linear (exponential) decay between the same endpoints.
inline double exponential_lr(double initial, double final_lr, long step, long total_steps) {
    if (total_steps <= 1) return initial;
    const double t = std::min(1.0, std::max(0.0, static_cast<double>(step) / (total_steps - 1)));
    return std::exp(std::log(initial) * (1.0 - t) + std::log(final_lr) * t);
}

} // namespace rawsplat
