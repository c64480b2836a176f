#pragma once

#include "rawsplat/camera.hpp"
#include "rawsplat/csi.hpp"
#include "rawsplat/types.hpp"

#include <string>
#include <vector>

namespace rawsplat {

/// A noisy linear frame and the camera that captured it.
struct TrainingView {
    std::string name;
    CameraView camera;
    Image frame; // linear radiance times shutter scale, 3 channels
};

/// A held-out camera with a clean linear reference.
struct TestView {
    std::string name;
    CameraView camera;
    Image reference;
};

struct DatasetBundle {
    std::vector<TrainingView> train;
    std::vector<TestView> test;
    SparsePointSet sparse;

    std::vector<CameraView> train_cameras() const {
        std::vector<CameraView> cams;
        cams.reserve(train.size());
        for (const auto& v : train) cams.push_back(v.camera);
        return cams;
    }

    std::vector<double> shutter_scales() const {
        std::vector<double> s;
        for (const auto& v : train) s.push_back(v.camera.shutter_scale);
        return s;
    }

    void validate() const {
        if (train.size() < 2) throw InvalidArgumentError("dataset needs at least two training views");
        const int w = train.front().camera.width, h = train.front().camera.height;
        auto check = [&](const CameraView& cam, const Image& img, const std::string& name) {
            cam.validate();
            if (cam.width != w || cam.height != h || img.width != w || img.height != h || img.channels != 3) {
                throw ShapeMismatchError("view '" + name + "' does not match the dataset resolution");
            }
            for (double v : img.data) {
                if (!(v >= 0.0)) throw InvalidArgumentError("view '" + name + "' has negative or non-finite radiance");
            }
        };
        for (const auto& v : train) check(v.camera, v.frame, v.name);
        for (const auto& v : test) check(v.camera, v.reference, v.name);
    }
};

} // namespace rawsplat
