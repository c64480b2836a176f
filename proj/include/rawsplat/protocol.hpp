#pragma once

#include "rawsplat/io.hpp"
#include "rawsplat/postprocess.hpp"
#include "rawsplat/rasterizer.hpp"
#include "rawsplat/trainer.hpp"

#include <json.hpp>

#include <optional>
#include <string>

namespace rawsplat {

inline constexpr int kProtocolVersion = 1;

class ProtocolError : public Error {
public:
    ProtocolError(const std::string& what, std::uint64_t request_id = 0)
        : Error(what), request_id_(request_id) {}
    std::uint64_t request_id() const { return request_id_; }

private:
    std::uint64_t request_id_;
};

/// One frame request from a client.
struct RenderRequest {
    std::uint64_t request_id = 0;
    std::optional<CameraView> camera;   // explicit pose
    int camera_index = 0;               // used when no pose is given
    int width = 0;                      // 0 keeps the camera resolution
    int height = 0;
    TonemapParams tonemap;
    std::optional<RefocusParams> refocus;
    MapKind map = MapKind::color;
    FrameEncoding encoding = FrameEncoding::png;
};

namespace detail {

inline Vec3 json_vec3(const nlohmann::json& j, const char* what) {
    const auto v = j.get<std::vector<double>>();
    if (v.size() != 3) throw InvalidArgumentError(std::string(what) + " must have 3 entries");
    return {v[0], v[1], v[2]};
}

} // namespace detail

/// Parses a render request. The pose may be a full camera object or an
/// `eye`/`target` pair with an optional `focal`.
inline RenderRequest parse_render_request(const nlohmann::json& j) {
    RenderRequest r;
    r.request_id = j.value("request_id", std::uint64_t{0});
    try {
        if (j.contains("camera")) {
            const auto& c = j.at("camera");
            if (c.contains("rotation")) {
                r.camera = camera_from_json(c);
            } else {
                const Vec3 eye = detail::json_vec3(c.at("eye"), "eye");
                const Vec3 target = detail::json_vec3(c.at("target"), "target");
                const int w = c.value("width", 256), h = c.value("height", 192);
                const Vec3 up = c.contains("up") ? detail::json_vec3(c.at("up"), "up") : Vec3(0.0, -1.0, 0.0);
                r.camera = look_at(eye, target, w, h, c.value("focal", 0.75 * std::max(w, h)), up);
            }
        }
        r.camera_index = j.value("camera_index", 0);
        r.width = j.value("width", 0);
        r.height = j.value("height", 0);
        r.tonemap.exposure_stops = j.value("exposure_stops", 0.0);
        if (j.contains("wb_gains")) r.tonemap.wb_gains = detail::json_vec3(j.at("wb_gains"), "wb_gains");
        if (j.contains("tonemap")) {
            const auto& t = j.at("tonemap");
            r.tonemap.curve = tone_curve_from_string(t.value("curve", std::string("gamma")));
            r.tonemap.gamma = t.value("gamma", 2.2);
            r.tonemap.local_enabled = t.value("local", false);
            r.tonemap.local_strength = t.value("strength", 0.5);
        }
        if (j.contains("refocus") && !j.at("refocus").is_null()) {
            const auto& f = j.at("refocus");
            RefocusParams p;
            p.focus_depth = f.at("focus_depth").get<double>();
            p.aperture = f.value("aperture", 0.0);
            p.max_kernel_radius = f.value("max_kernel_radius", 16.0);
            r.refocus = p;
        }
        r.map = map_kind_from_string(j.value("map", std::string("color")));
        const std::string default_encoding = r.map == MapKind::color ? "png" : "f32";
        r.encoding = frame_encoding_from_string(j.value("encoding", default_encoding));
        if (r.width < 0 || r.height < 0 || r.width > 8192 || r.height > 8192) {
            throw InvalidArgumentError("requested resolution is out of range");
        }
        r.tonemap.validate();
        if (r.refocus) r.refocus->validate();
        if (r.camera) r.camera->validate();
    } catch (const nlohmann::json::exception& e) {
        throw ProtocolError(std::string("malformed render request: ") + e.what(), r.request_id);
    } catch (const Error& e) {
        throw ProtocolError(e.what(), r.request_id);
    }
    return r;
}

/// Camera a request resolves to against a scene.
inline CameraView resolve_camera(const TrainedScene& scene, const RenderRequest& req) {
    CameraView cam;
    if (req.camera) {
        cam = *req.camera;
    } else {
        if (req.camera_index < 0 || static_cast<std::size_t>(req.camera_index) >= scene.cameras.size()) {
            throw ProtocolError("camera_index out of range", req.request_id);
        }
        cam = scene.cameras[req.camera_index];
    }
    if (req.width > 0 && req.height > 0) cam = cam.resized(req.width, req.height);
    return cam;
}

/// Renders and encodes the map a request asks for.
///
/// color/png is the display frame; color/f32 is the linear frame after
/// exposure and white balance, before the tone curve. depth and
/// transmittance are raw single-channel maps; as PNG, depth is normalized
/// over covered pixels.
inline Image render_request_image(const TrainedScene& scene, const RenderRequest& req) {
    const CameraView cam = resolve_camera(scene, req);
    RenderOptions ro;
    ro.histogram = false;
    ro.near_far = false;
    RenderOutput out = render(scene.cloud, scene.field, cam, ro);

    if (req.map == MapKind::depth) {
        if (req.encoding == FrameEncoding::f32) return out.depth;
        Image d = out.depth;
        double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
        for (std::size_t p = 0; p < d.size(); ++p) {
            if (out.transmittance.data[p] > 1e-6) {
                lo = std::min(lo, d.data[p]);
                hi = std::max(hi, d.data[p]);
            }
        }
        for (std::size_t p = 0; p < d.size(); ++p) {
            d.data[p] = (out.transmittance.data[p] > 1e-6 && hi > lo) ? (d.data[p] - lo) / (hi - lo) : 0.0;
        }
        return d;
    }
    if (req.map == MapKind::transmittance) return out.transmittance;

    Image linear = out.color;
    if (req.refocus) linear = refocus(linear, out.depth, out.transmittance, *req.refocus);
    if (req.encoding == FrameEncoding::f32) {
        return change_white_balance(apply_exposure(linear, req.tonemap.exposure_stops), req.tonemap.wb_gains);
    }
    return tonemap(linear, req.tonemap);
}

inline std::string render_frame(const TrainedScene& scene, const RenderRequest& req, std::uint64_t frame_id) {
    FrameHeader h;
    h.frame_id = frame_id;
    h.request_id = req.request_id;
    h.map = req.map;
    h.encoding = req.encoding;
    return encode_frame(h, render_request_image(scene, req));
}

inline std::string hello_message(const TrainedScene& scene) {
    nlohmann::json j = {{"type", "hello"},
                        {"version", kProtocolVersion},
                        {"server", "rawsplat"},
                        {"primitives", scene.cloud.size()},
                        {"cameras", scene.cameras.size()}};
    if (!scene.cameras.empty()) {
        j["width"] = scene.cameras.front().width;
        j["height"] = scene.cameras.front().height;
    }
    return j.dump();
}

inline std::string error_message(const std::string& what, std::uint64_t request_id = 0) {
    return nlohmann::json{{"type", "error"}, {"request_id", request_id}, {"message", what}}.dump();
}

} // namespace rawsplat
