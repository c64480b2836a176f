#pragma once

#include "rawsplat/dataset.hpp"
#include "rawsplat/metrics.hpp"
#include "rawsplat/postprocess.hpp"
#include "rawsplat/rasterizer.hpp"
#include "rawsplat/trainer.hpp"

#include <string>
#include <vector>

namespace rawsplat {

enum class AlignSpace { raw, display };

inline AlignSpace align_space_from_string(const std::string& s) {
    if (s == "raw") return AlignSpace::raw;
    if (s == "display") return AlignSpace::display;
    throw InvalidArgumentError("unknown alignment space '" + s + "'");
}

struct EvalRow {
    std::string view;
    double psnr = 0.0;
    double ssim = 0.0;
    AffineFit fit;
};

struct EvalReport {
    std::vector<EvalRow> rows;
    double mean_psnr = 0.0;
    double mean_ssim = 0.0;
};

/// Fixed display transform shared by every method under comparison.
inline TonemapParams display_preset() {
    TonemapParams p;
    p.curve = ToneCurve::gamma;
    p.gamma = 2.2;
    return p;
}

/// Renders the linear color of a view, rounded to float32 like stored frames.
inline Image render_linear(const TrainedScene& scene, const CameraView& cam) {
    RenderOptions ro;
    ro.histogram = false;
    ro.near_far = false;
    Image img = render(scene.cloud, scene.field, cam, ro).color;
    for (double& v : img.data) v = static_cast<double>(static_cast<float>(v));
    return img;
}

/// Held-out metrics. Each render is aligned to its reference once in linear
/// space; the display variant then applies the fixed preset to both.
inline EvalReport evaluate_views(const TrainedScene& scene, const std::vector<TestView>& views,
                                 AlignSpace space = AlignSpace::raw) {
    if (views.empty()) throw InvalidArgumentError("no held-out views to evaluate");
    EvalReport rep;
    for (const auto& v : views) {
        EvalRow row;
        row.view = v.name;
        const Image out = render_linear(scene, v.camera);
        Image aligned = affine_align(v.reference, out, &row.fit);
        Image ref = v.reference;
        if (space == AlignSpace::display) {
            const TonemapParams p = display_preset();
            for (double& x : aligned.data) x = std::max(x, 0.0);
            aligned = tonemap(aligned, p);
            ref = tonemap(ref, p);
        }
        row.psnr = psnr(ref, aligned);
        row.ssim = ssim(ref, aligned);
        rep.mean_psnr += row.psnr;
        rep.mean_ssim += row.ssim;
        rep.rows.push_back(row);
    }
    rep.mean_psnr /= rep.rows.size();
    rep.mean_ssim /= rep.rows.size();
    return rep;
}

} // namespace rawsplat
