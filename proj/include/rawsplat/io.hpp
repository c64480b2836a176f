#pragma once

#include "rawsplat/config.hpp"
#include "rawsplat/dataset.hpp"
#include "rawsplat/trainer.hpp"

#include <json.hpp>
#include <png.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace rawsplat {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

// ---------------------------------------------------------------------------
// Float frames
// ---------------------------------------------------------------------------

/// Row-major little-endian float32 samples.
inline std::string encode_f32(const Image& img) {
    std::string bytes(img.size() * 4, '\0');
    for (std::size_t i = 0; i < img.size(); ++i) {
        const float f = static_cast<float>(img.data[i]);
        std::memcpy(bytes.data() + i * 4, &f, 4);
    }
    return bytes;
}

inline Image decode_f32(std::string_view bytes, int width, int height, int channels) {
    const std::size_t n = static_cast<std::size_t>(width) * height * channels;
    if (bytes.size() < n * 4) throw TruncatedFileError("float frame holds fewer samples than its shape");
    if (bytes.size() > n * 4) throw InconsistentArraysError("float frame holds more samples than its shape");
    Image img(width, height, channels);
    for (std::size_t i = 0; i < n; ++i) {
        float f;
        std::memcpy(&f, bytes.data() + i * 4, 4);
        img.data[i] = f;
    }
    return img;
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open '" + path.string() + "'");
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot write '" + path.string() + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("failed writing '" + path.string() + "'");
}

// ---------------------------------------------------------------------------
// Dataset container: dataset.json plus one .f32 blob per frame
// ---------------------------------------------------------------------------

inline constexpr int kDatasetVersion = 1;
inline constexpr const char* kDatasetDescriptor = "dataset.json";

inline nlohmann::json camera_to_json(const CameraView& cam) {
    std::vector<double> r(9), t(3);
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) r[i * 3 + j] = cam.rotation(i, j);
        t[i] = cam.translation[i];
    }
    return {{"rotation", r}, {"translation", t}, {"fx", cam.fx}, {"fy", cam.fy}, {"cx", cam.cx},
            {"cy", cam.cy}, {"width", cam.width}, {"height", cam.height}, {"shutter_scale", cam.shutter_scale}};
}

inline CameraView camera_from_json(const nlohmann::json& j) {
    CameraView cam;
    const auto r = j.at("rotation").get<std::vector<double>>();
    const auto t = j.at("translation").get<std::vector<double>>();
    if (r.size() != 9 || t.size() != 3) throw InconsistentArraysError("camera rotation/translation have wrong lengths");
    for (int i = 0; i < 3; ++i) {
        for (int k = 0; k < 3; ++k) cam.rotation(i, k) = r[i * 3 + k];
        cam.translation[i] = t[i];
    }
    cam.fx = j.at("fx").get<double>();
    cam.fy = j.at("fy").get<double>();
    cam.cx = j.at("cx").get<double>();
    cam.cy = j.at("cy").get<double>();
    cam.width = j.at("width").get<int>();
    cam.height = j.at("height").get<int>();
    cam.shutter_scale = j.value("shutter_scale", 1.0);
    return cam;
}

inline void save_dataset(const std::filesystem::path& dir, const DatasetBundle& data) {
    std::filesystem::create_directories(dir);
    nlohmann::json desc;
    desc["format"] = "rawsplat-dataset";
    desc["version"] = kDatasetVersion;
    auto views = [&](const auto& list, auto image_of) {
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& v : list) {
            const std::string file = v.name + ".f32";
            write_file(dir / file, encode_f32(image_of(v)));
            arr.push_back({{"name", v.name}, {"file", file}, {"camera", camera_to_json(v.camera)}});
        }
        return arr;
    };
    desc["train"] = views(data.train, [](const TrainingView& v) -> const Image& { return v.frame; });
    desc["test"] = views(data.test, [](const TestView& v) -> const Image& { return v.reference; });
    std::vector<double> pts, cols;
    for (const auto& p : data.sparse.points) pts.insert(pts.end(), {p.x(), p.y(), p.z()});
    for (const auto& c : data.sparse.colors) cols.insert(cols.end(), {c.x(), c.y(), c.z()});
    desc["sparse"] = {{"points", pts}, {"colors", cols}};
    write_file(dir / kDatasetDescriptor, desc.dump(2));
}

inline DatasetBundle load_dataset(const std::filesystem::path& path) {
    const std::filesystem::path dir = std::filesystem::is_directory(path) ? path : path.parent_path();
    const std::filesystem::path desc_path = std::filesystem::is_directory(path) ? path / kDatasetDescriptor : path;
    nlohmann::json desc;
    try {
        desc = nlohmann::json::parse(read_file(desc_path));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("dataset descriptor is not valid JSON: ") + e.what());
    }
    if (desc.value("format", "") != "rawsplat-dataset") throw FormatError("not a rawsplat dataset descriptor");
    const int version = desc.value("version", 0);
    if (version != kDatasetVersion) {
        throw UnsupportedVersionError("unsupported dataset version " + std::to_string(version));
    }
    DatasetBundle data;
    try {
        for (const auto& v : desc.at("train")) {
            TrainingView tv;
            tv.name = v.at("name").get<std::string>();
            tv.camera = camera_from_json(v.at("camera"));
            tv.frame = decode_f32(read_file(dir / v.at("file").get<std::string>()), tv.camera.width,
                                  tv.camera.height, 3);
            data.train.push_back(std::move(tv));
        }
        for (const auto& v : desc.value("test", nlohmann::json::array())) {
            TestView tv;
            tv.name = v.at("name").get<std::string>();
            tv.camera = camera_from_json(v.at("camera"));
            tv.reference = decode_f32(read_file(dir / v.at("file").get<std::string>()), tv.camera.width,
                                      tv.camera.height, 3);
            data.test.push_back(std::move(tv));
        }
        const auto pts = desc.at("sparse").at("points").get<std::vector<double>>();
        const auto cols = desc.at("sparse").value("colors", std::vector<double>{});
        if (pts.size() % 3 != 0 || (!cols.empty() && cols.size() != pts.size())) {
            throw InconsistentArraysError("sparse point arrays have inconsistent lengths");
        }
        for (std::size_t i = 0; i < pts.size(); i += 3) data.sparse.points.emplace_back(pts[i], pts[i + 1], pts[i + 2]);
        for (std::size_t i = 0; i < cols.size(); i += 3) data.sparse.colors.emplace_back(cols[i], cols[i + 1], cols[i + 2]);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed dataset descriptor: ") + e.what());
    }
    data.validate();
    return data;
}

// ---------------------------------------------------------------------------
// Scene checkpoint
// ---------------------------------------------------------------------------

inline constexpr char kSceneMagic[8] = {'R', 'S', 'P', 'L', 'S', 'C', 'N', '\0'};
inline constexpr std::uint32_t kSceneVersion = 1;

struct SceneCheckpoint {
    TrainedScene scene;
    TrainConfig config;
};

namespace detail {

class ByteWriter {
public:
    template <class T>
    void put(const T& v) {
        const auto* p = reinterpret_cast<const char*>(&v);
        bytes_.append(p, sizeof(T));
    }
    void put_doubles(const double* p, std::size_t n) {
        put<std::uint64_t>(n);
        bytes_.append(reinterpret_cast<const char*>(p), n * sizeof(double));
    }
    void put_string(const std::string& s) {
        put<std::uint64_t>(s.size());
        bytes_ += s;
    }
    void raw(const char* p, std::size_t n) { bytes_.append(p, n); }
    std::string& bytes() { return bytes_; }

private:
    std::string bytes_;
};

class ByteReader {
public:
    explicit ByteReader(std::string_view b) : b_(b) {}

    void need(std::size_t n) const {
        if (b_.size() - pos_ < n) throw TruncatedFileError("scene file ends unexpectedly");
    }
    template <class T>
    T get() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, b_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    std::vector<double> get_doubles() {
        const auto n = get<std::uint64_t>();
        if (n > (b_.size() - pos_) / sizeof(double)) throw TruncatedFileError("scene array extends past end of file");
        std::vector<double> v(n);
        std::memcpy(v.data(), b_.data() + pos_, n * sizeof(double));
        pos_ += n * sizeof(double);
        return v;
    }
    std::string get_string() {
        const auto n = get<std::uint64_t>();
        if (n > b_.size() - pos_) throw TruncatedFileError("scene string extends past end of file");
        std::string s(b_.substr(pos_, n));
        pos_ += n;
        return s;
    }
    std::string_view raw(std::size_t n) {
        need(n);
        auto s = b_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    bool at_end() const { return pos_ == b_.size(); }

private:
    std::string_view b_;
    std::size_t pos_ = 0;
};

template <class V>
const double* flat_data(const V& v) {
    return v.empty() ? nullptr : v.data()->data();
}

template <class V, int N>
std::vector<V> unflatten(const std::vector<double>& d, std::size_t expect, const char* what) {
    if (d.size() != expect * N) {
        throw InconsistentArraysError(std::string("scene array '") + what + "' has the wrong length");
    }
    std::vector<V> out(expect);
    for (std::size_t i = 0; i < expect; ++i) {
        for (int k = 0; k < N; ++k) out[i][k] = d[i * N + k];
    }
    return out;
}

} // namespace detail

inline std::string serialize_scene(const SceneCheckpoint& ckpt) {
    const auto& s = ckpt.scene;
    s.cloud.validate();
    detail::ByteWriter w;
    w.raw(kSceneMagic, sizeof(kSceneMagic));
    w.put<std::uint32_t>(kSceneVersion);
    w.put_string(ckpt.config.to_text());
    w.put<std::uint64_t>(s.cloud.size());
    w.put<std::uint32_t>(static_cast<std::uint32_t>(s.cloud.feature_dim));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(s.field.model));
    w.put_doubles(detail::flat_data(s.cloud.positions), s.cloud.positions.size() * 3);
    w.put_doubles(detail::flat_data(s.cloud.log_scales), s.cloud.log_scales.size() * 3);
    w.put_doubles(detail::flat_data(s.cloud.rotations), s.cloud.rotations.size() * 4);
    w.put_doubles(s.cloud.opacity_logits.data(), s.cloud.opacity_logits.size());
    w.put_doubles(s.cloud.features.data(), s.cloud.features.size());
    w.put_doubles(detail::flat_data(s.cloud.color_biases), s.cloud.color_biases.size() * 3);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(s.field.mlp.feature_dim()));
    w.put_doubles(s.field.mlp.params().data(), s.field.mlp.params().size());
    w.put_doubles(s.exposure.shutters().data(), s.exposure.size());
    w.put_doubles(detail::flat_data(s.exposure.log_betas()), s.exposure.size() * 3);
    w.put<std::uint64_t>(s.exposure.reference_index());
    w.put<std::uint64_t>(s.cameras.size());
    for (const auto& cam : s.cameras) {
        double pose[12];
        for (int i = 0; i < 3; ++i) {
            for (int k = 0; k < 3; ++k) pose[i * 3 + k] = cam.rotation(i, k);
            pose[9 + i] = cam.translation[i];
        }
        w.put_doubles(pose, 12);
        for (double v : {cam.fx, cam.fy, cam.cx, cam.cy, cam.shutter_scale}) w.put(v);
        w.put<std::int32_t>(cam.width);
        w.put<std::int32_t>(cam.height);
    }
    return std::move(w.bytes());
}

inline SceneCheckpoint deserialize_scene(std::string_view bytes) {
    detail::ByteReader r(bytes);
    if (bytes.size() < sizeof(kSceneMagic) || std::memcmp(bytes.data(), kSceneMagic, sizeof(kSceneMagic)) != 0) {
        throw FormatError("not a rawsplat scene file (bad magic)");
    }
    r.raw(sizeof(kSceneMagic));
    const auto version = r.get<std::uint32_t>();
    if (version != kSceneVersion) {
        throw UnsupportedVersionError("unsupported scene version " + std::to_string(version));
    }
    SceneCheckpoint ckpt;
    ckpt.config = TrainConfig::from_text(r.get_string());
    auto& s = ckpt.scene;
    const auto n = r.get<std::uint64_t>();
    const auto dim = r.get<std::uint32_t>();
    const auto model = r.get<std::uint32_t>();
    if (model > 1) throw FormatError("unknown color model tag in scene file");
    s.cloud = GaussianCloud(static_cast<int>(dim));
    s.cloud.positions = detail::unflatten<Vec3, 3>(r.get_doubles(), n, "positions");
    s.cloud.log_scales = detail::unflatten<Vec3, 3>(r.get_doubles(), n, "log_scales");
    s.cloud.rotations = detail::unflatten<Vec4, 4>(r.get_doubles(), n, "rotations");
    s.cloud.opacity_logits = r.get_doubles();
    s.cloud.features = r.get_doubles();
    s.cloud.color_biases = detail::unflatten<Vec3, 3>(r.get_doubles(), n, "color_biases");
    if (s.cloud.opacity_logits.size() != n || s.cloud.features.size() != n * dim) {
        throw InconsistentArraysError("scene opacity or feature arrays have the wrong length");
    }
    const auto mlp_dim = r.get<std::uint32_t>();
    auto params = r.get_doubles();
    s.field.model = static_cast<ColorModel>(model);
    s.field.mlp = ColorMLP(static_cast<int>(mlp_dim));
    if (params.size() != s.field.mlp.params().size()) {
        throw InconsistentArraysError("color network weights do not match its feature dimension");
    }
    s.field.mlp.params() = std::move(params);
    if (s.field.feature_dim() != static_cast<int>(dim)) {
        throw InconsistentArraysError("color model and primitive feature dimensions differ");
    }
    auto shutters = r.get_doubles();
    auto log_betas = detail::unflatten<Vec3, 3>(r.get_doubles(), shutters.size(), "log_betas");
    const auto reference = r.get<std::uint64_t>();
    s.exposure = ExposureTable::from_parts(std::move(shutters), std::move(log_betas), reference);
    const auto cams = r.get<std::uint64_t>();
    if (cams > bytes.size()) throw TruncatedFileError("scene camera list extends past end of file");
    for (std::uint64_t c = 0; c < cams; ++c) {
        const auto pose = r.get_doubles();
        if (pose.size() != 12) throw InconsistentArraysError("camera pose has the wrong length");
        CameraView cam;
        for (int i = 0; i < 3; ++i) {
            for (int k = 0; k < 3; ++k) cam.rotation(i, k) = pose[i * 3 + k];
            cam.translation[i] = pose[9 + i];
        }
        cam.fx = r.get<double>();
        cam.fy = r.get<double>();
        cam.cx = r.get<double>();
        cam.cy = r.get<double>();
        cam.shutter_scale = r.get<double>();
        cam.width = r.get<std::int32_t>();
        cam.height = r.get<std::int32_t>();
        s.cameras.push_back(cam);
    }
    if (!r.at_end()) throw FormatError("trailing bytes after scene data");
    return ckpt;
}

inline void save_scene(const std::filesystem::path& path, const SceneCheckpoint& ckpt) {
    write_file(path, serialize_scene(ckpt));
}

inline SceneCheckpoint load_scene(const std::filesystem::path& path) { return deserialize_scene(read_file(path)); }

// ---------------------------------------------------------------------------
// Wire frames
// ---------------------------------------------------------------------------

enum class MapKind { color, depth, transmittance };
enum class FrameEncoding { png, f32 };

inline std::string to_string(MapKind m) {
    switch (m) {
    case MapKind::color: return "color";
    case MapKind::depth: return "depth";
    case MapKind::transmittance: return "transmittance";
    }
    return "color";
}

inline MapKind map_kind_from_string(const std::string& s) {
    if (s == "color") return MapKind::color;
    if (s == "depth") return MapKind::depth;
    if (s == "transmittance" || s == "T") return MapKind::transmittance;
    throw InvalidArgumentError("unknown map '" + s + "'");
}

inline std::string to_string(FrameEncoding e) { return e == FrameEncoding::png ? "png" : "f32"; }

inline FrameEncoding frame_encoding_from_string(const std::string& s) {
    if (s == "png") return FrameEncoding::png;
    if (s == "f32") return FrameEncoding::f32;
    throw InvalidArgumentError("unknown frame encoding '" + s + "'");
}

/// Lossless 8-bit PNG of a display image with 1 or 3 channels in [0, 1].
inline std::string encode_png(const Image& img) {
    if (img.channels != 1 && img.channels != 3) throw InvalidArgumentError("PNG frames need 1 or 3 channels");
    std::vector<std::uint8_t> pixels(img.size());
    for (std::size_t i = 0; i < img.size(); ++i) {
        pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(img.data[i], 0.0, 1.0) * 255.0));
    }
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw FormatError("PNG encoding failed: out of memory");
    png_infop info = png_create_info_struct(png);
    std::string out;
    std::vector<png_bytep> rows(img.height);
    const std::size_t stride = static_cast<std::size_t>(img.width) * img.channels;
    for (int y = 0; y < img.height; ++y) rows[y] = pixels.data() + y * stride;
    if (!info || setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw FormatError("PNG encoding failed");
    }
    png_set_write_fn(
        png, &out,
        [](png_structp p, png_bytep data, png_size_t n) {
            static_cast<std::string*>(png_get_io_ptr(p))->append(reinterpret_cast<const char*>(data), n);
        },
        nullptr);
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
                 img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_set_compression_level(png, 1);
    png_set_filter(png, PNG_FILTER_TYPE_BASE, PNG_FILTER_SUB);
    png_set_rows(png, info, rows.data());
    png_write_png(png, info, PNG_TRANSFORM_IDENTITY, nullptr);
    png_destroy_write_struct(&png, &info);
    return out;
}

/// Decodes a PNG into values in [0, 1].
inline Image decode_png(std::string_view bytes) {
    png_image image;
    std::memset(&image, 0, sizeof(image));
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
        throw FormatError(std::string("PNG decoding failed: ") + image.message);
    }
    const int channels = (image.format & PNG_FORMAT_FLAG_COLOR) ? 3 : 1;
    image.format = channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
    std::vector<std::uint8_t> pixels(PNG_IMAGE_SIZE(image));
    if (!png_image_finish_read(&image, nullptr, pixels.data(), 0, nullptr)) {
        throw FormatError(std::string("PNG decoding failed: ") + image.message);
    }
    Image img(static_cast<int>(image.width), static_cast<int>(image.height), channels);
    for (std::size_t i = 0; i < img.size(); ++i) img.data[i] = pixels[i] / 255.0;
    return img;
}

struct FrameHeader {
    std::uint64_t frame_id = 0;
    std::uint64_t request_id = 0;
    MapKind map = MapKind::color;
    FrameEncoding encoding = FrameEncoding::png;
    int width = 0;
    int height = 0;
    int channels = 0;
};

inline constexpr std::string_view kFrameMagic = "RSF1";

inline std::string format_frame_header(const FrameHeader& h) {
    return std::string(kFrameMagic) + " frame=" + std::to_string(h.frame_id) + " request=" +
           std::to_string(h.request_id) + " map=" + to_string(h.map) + " encoding=" + to_string(h.encoding) +
           " width=" + std::to_string(h.width) + " height=" + std::to_string(h.height) +
           " channels=" + std::to_string(h.channels) + "\n";
}

/// Header line followed by the PNG or float payload.
inline std::string encode_frame(FrameHeader h, const Image& img) {
    h.width = img.width;
    h.height = img.height;
    h.channels = img.channels;
    const std::string payload = h.encoding == FrameEncoding::png ? encode_png(img) : encode_f32(img);
    return format_frame_header(h) + payload;
}

struct DecodedFrame {
    FrameHeader header;
    Image image;
};

inline DecodedFrame decode_frame(std::string_view bytes) {
    const auto nl = bytes.find('\n');
    if (nl == std::string_view::npos || bytes.substr(0, kFrameMagic.size()) != kFrameMagic) {
        throw FormatError("not a frame (missing header line)");
    }
    std::istringstream line{std::string(bytes.substr(kFrameMagic.size(), nl - kFrameMagic.size()))};
    std::map<std::string, std::string> kv;
    std::string tok;
    while (line >> tok) {
        const auto eq = tok.find('=');
        if (eq == std::string::npos) throw FormatError("malformed frame header field '" + tok + "'");
        kv[tok.substr(0, eq)] = tok.substr(eq + 1);
    }
    DecodedFrame f;
    try {
        f.header.frame_id = std::stoull(kv.at("frame"));
        f.header.request_id = std::stoull(kv.at("request"));
        f.header.map = map_kind_from_string(kv.at("map"));
        f.header.encoding = frame_encoding_from_string(kv.at("encoding"));
        f.header.width = std::stoi(kv.at("width"));
        f.header.height = std::stoi(kv.at("height"));
        f.header.channels = std::stoi(kv.at("channels"));
    } catch (const std::out_of_range&) {
        throw FormatError("frame header is missing a field");
    } catch (const std::invalid_argument&) {
        throw FormatError("frame header has a non-numeric field");
    }
    const auto payload = bytes.substr(nl + 1);
    if (f.header.encoding == FrameEncoding::png) {
        f.image = decode_png(payload);
        if (f.image.width != f.header.width || f.image.height != f.header.height ||
            f.image.channels != f.header.channels) {
            throw InconsistentArraysError("PNG payload does not match the frame header");
        }
    } else {
        f.image = decode_f32(payload, f.header.width, f.header.height, f.header.channels);
    }
    return f;
}

} // namespace rawsplat
