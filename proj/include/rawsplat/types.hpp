#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace rawsplat {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DegenerateRotationError : public Error { using Error::Error; };
class NumericalDegeneracyError : public Error { using Error::Error; };
class DegenerateAxisError : public Error { using Error::Error; };
class EmptyViewError : public Error { using Error::Error; };
class InvalidArgumentError : public Error { using Error::Error; };
class ShapeMismatchError : public Error { using Error::Error; };
class UnknownShutterError : public Error { using Error::Error; };
class DegenerateFitError : public Error { using Error::Error; };
class ContractViolationError : public Error { using Error::Error; };

/// Non-finite loss or parameter during optimization.
class DivergenceError : public Error {
public:
    DivergenceError(const std::string& what, std::string term, long iteration = -1)
        : Error(what), term_(std::move(term)), iteration_(iteration) {}
    const std::string& term() const { return term_; }
    long iteration() const { return iteration_; }

private:
    std::string term_;
    long iteration_;
};

class FormatError : public Error { using Error::Error; };
class UnsupportedVersionError : public FormatError { using FormatError::FormatError; };
class TruncatedFileError : public FormatError { using FormatError::FormatError; };
class InconsistentArraysError : public FormatError { using FormatError::FormatError; };

// ---------------------------------------------------------------------------
// Image buffer
// ---------------------------------------------------------------------------

/// Row-major interleaved image of doubles.
struct Image {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<double> data;

    Image() = default;
    Image(int w, int h, int c, double fill = 0.0)
        : width(w), height(h), channels(c),
          data(static_cast<std::size_t>(w) * h * c, fill) {}

    std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }
    std::size_t size() const { return data.size(); }
    bool empty() const { return data.empty(); }

    double& at(int x, int y, int c = 0) {
        return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
    double at(int x, int y, int c = 0) const {
        return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }

    bool same_shape(const Image& o) const {
        return width == o.width && height == o.height && channels == o.channels;
    }
};

inline void require_same_shape(const Image& a, const Image& b, const char* what) {
    if (!a.same_shape(b)) {
        throw ShapeMismatchError(std::string(what) + ": image shapes differ (" +
                                 std::to_string(a.width) + "x" + std::to_string(a.height) + "x" +
                                 std::to_string(a.channels) + " vs " + std::to_string(b.width) +
                                 "x" + std::to_string(b.height) + "x" +
                                 std::to_string(b.channels) + ")");
    }
}

} // namespace rawsplat
