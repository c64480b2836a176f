#include "test_util.hpp"

#include "rawsplat/server.hpp"

#include <gtest/gtest.h>

#include <cstdlib>

using namespace rawsplat;
using namespace rawsplat::testing;

namespace {

std::shared_ptr<const TrainedScene> ground_truth_scene(double radiance_scale = 1.0) {
    static const SyntheticScene synth = [] {
        SyntheticSceneSpec spec;
        spec.primitives = 60;
        spec.train_views = 3;
        spec.test_views = 0;
        spec.width = 32;
        spec.height = 24;
        spec.focal = 36.0;
        spec.seed = 8;
        return generate_synthetic(spec);
    }();
    auto scene = std::make_shared<TrainedScene>();
    scene->cloud = synth.cloud;
    scene->field = synth.field;
    scene->cameras = synth.dataset.train_cameras();
    scene->exposure = ExposureTable({1.0, 0.5}, 1.0);
    for (auto& b : scene->cloud.color_biases) b.array() += std::log(radiance_scale);
    return scene;
}

double mean(const Image& img) {
    double s = 0.0;
    for (double v : img.data) s += v;
    return s / img.size();
}

class ServerTest : public ::testing::Test {
protected:
    void SetUp() override {
        server_ = std::make_unique<FrameServer>(ground_truth_scene(), 2);
        port_ = server_->start({"127.0.0.1", 0});
        client_.connect("127.0.0.1", port_);
    }
    void TearDown() override {
        client_.close();
        server_->stop();
    }

    nlohmann::json receive_json() {
        const auto m = client_.receive();
        EXPECT_TRUE(m.text);
        return nlohmann::json::parse(m.data);
    }

    DecodedFrame receive_frame() {
        const auto m = client_.receive();
        EXPECT_FALSE(m.text) << m.data;
        return decode_frame(m.data);
    }

    DecodedFrame request(nlohmann::json j) {
        j["type"] = "render";
        client_.send_json(j);
        return receive_frame();
    }

    std::unique_ptr<FrameServer> server_;
    unsigned short port_ = 0;
    FrameClient client_;
};

} // namespace

TEST_F(ServerTest, HelloDescribesScene) {
    client_.send_json({{"type", "hello"}, {"version", kProtocolVersion}});
    const auto j = receive_json();
    EXPECT_EQ(j.at("type"), "hello");
    EXPECT_EQ(j.at("version"), kProtocolVersion);
    EXPECT_EQ(j.at("primitives"), 60);
    EXPECT_EQ(j.at("cameras"), 3);
    EXPECT_EQ(j.at("width"), 32);
    EXPECT_EQ(j.at("height"), 24);

    client_.send_json({{"type", "hello"}, {"version", 99}, {"request_id", 4}});
    const auto err = receive_json();
    EXPECT_EQ(err.at("type"), "error");
    EXPECT_EQ(err.at("request_id"), 4);
}

TEST_F(ServerTest, ExposureStopDoublesLinearFrame) {
    const DecodedFrame base = request({{"request_id", 1}, {"encoding", "f32"}});
    const DecodedFrame plus = request({{"request_id", 2}, {"encoding", "f32"}, {"exposure_stops", 1.0}});
    ASSERT_EQ(base.header.channels, 3);
    EXPECT_EQ(base.header.map, MapKind::color);
    EXPECT_NEAR(mean(plus.image) / mean(base.image), 2.0, 0.02);
    for (std::size_t i = 0; i < base.image.size(); ++i) EXPECT_EQ(plus.image.data[i], 2.0 * base.image.data[i]);
}

TEST_F(ServerTest, DisplayFrameMatchesLocalTonemap) {
    const DecodedFrame f = request({{"request_id", 3}, {"camera_index", 1}, {"tonemap", {{"curve", "filmic"}}}});
    EXPECT_EQ(f.header.encoding, FrameEncoding::png);
    RenderRequest req;
    req.camera_index = 1;
    req.tonemap.curve = ToneCurve::filmic;
    const Image local = render_request_image(*ground_truth_scene(), req);
    ASSERT_TRUE(local.same_shape(f.image));
    for (std::size_t i = 0; i < local.size(); ++i) EXPECT_NEAR(f.image.data[i], local.data[i], 0.5 / 255 + 1e-12);
}

TEST_F(ServerTest, DepthFramesAreSingleChannel) {
    const DecodedFrame raw = request({{"request_id", 5}, {"map", "depth"}});
    EXPECT_EQ(raw.header.encoding, FrameEncoding::f32);
    EXPECT_EQ(raw.header.channels, 1);
    EXPECT_EQ(raw.header.map, MapKind::depth);
    for (double z : raw.image.data) {
        if (z == 0.0) continue;
        EXPECT_GT(z, 2.0);
        EXPECT_LT(z, 7.0);
    }
    const DecodedFrame png = request({{"request_id", 6}, {"map", "depth"}, {"encoding", "png"}});
    EXPECT_EQ(png.header.channels, 1);
    double lo = 1.0, hi = 0.0;
    for (double v : png.image.data) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    EXPECT_GE(lo, 0.0);
    EXPECT_EQ(hi, 1.0);
    const DecodedFrame t = request({{"request_id", 7}, {"map", "T"}});
    EXPECT_EQ(t.header.map, MapKind::transmittance);
    for (double v : t.image.data) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0 + 1e-6);
    }
}

TEST_F(ServerTest, MalformedMessagesKeepConnectionOpen) {
    client_.send("this is not json");
    EXPECT_EQ(receive_json().at("type"), "error");
    client_.send("[1, 2]");
    EXPECT_EQ(receive_json().at("type"), "error");
    client_.send_json({{"type", "teleport"}, {"request_id", 9}});
    auto e = receive_json();
    EXPECT_EQ(e.at("type"), "error");
    EXPECT_EQ(e.at("request_id"), 9);
    client_.send_json({{"type", "render"}, {"request_id", 10}, {"camera_index", 42}});
    e = receive_json();
    EXPECT_EQ(e.at("request_id"), 10);
    client_.send_json({{"type", "render"}, {"request_id", 11}, {"wb_gains", {1, 0, 1}}});
    e = receive_json();
    EXPECT_EQ(e.at("request_id"), 11);
    client_.send_json({{"type", "render"}, {"request_id", 12}, {"map", "normals"}});
    EXPECT_EQ(receive_json().at("request_id"), 12);

    const DecodedFrame ok = request({{"request_id", 13}});
    EXPECT_EQ(ok.header.request_id, 13u);
}

TEST_F(ServerTest, RapidUpdatesAnswerTheLastRequest) {
    for (int i = 1; i <= 100; ++i) {
        const double angle = 0.01 * i;
        client_.send_json({{"type", "render"},
                           {"request_id", i},
                           {"camera", {{"eye", {std::sin(angle), 0.0, 0.0}}, {"target", {0.0, 0.0, 5.0}},
                                       {"width", 32}, {"height", 24}}}});
    }
    std::uint64_t last_frame = 0, last_request = 0;
    int frames = 0;
    while (last_request != 100) {
        const DecodedFrame f = receive_frame();
        EXPECT_GT(f.header.frame_id, last_frame);
        EXPECT_GT(f.header.request_id, last_request);
        last_frame = f.header.frame_id;
        last_request = f.header.request_id;
        ++frames;
    }
    EXPECT_LE(frames, 100);
}

TEST_F(ServerTest, HotSwapTakesEffectBetweenFrames) {
    const DecodedFrame before = request({{"request_id", 1}, {"encoding", "f32"}});
    server_->swap_scene(ground_truth_scene(0.5));
    const DecodedFrame after = request({{"request_id", 2}, {"encoding", "f32"}});
    EXPECT_NEAR(mean(after.image) / mean(before.image), 0.5, 1e-6);
    EXPECT_GT(after.header.frame_id, before.header.frame_id);
    EXPECT_THROW(server_->swap_scene(nullptr), InvalidArgumentError);
}

TEST_F(ServerTest, ClientsAreServedIndependently) {
    FrameClient other;
    other.connect("127.0.0.1", port_);
    other.send_json({{"type", "render"}, {"request_id", 77}, {"encoding", "f32"}});
    const DecodedFrame mine = request({{"request_id", 5}, {"encoding", "f32"}});
    const auto theirs = other.receive();
    ASSERT_FALSE(theirs.text);
    const DecodedFrame f = decode_frame(theirs.data);
    EXPECT_EQ(f.header.request_id, 77u);
    EXPECT_EQ(mine.header.request_id, 5u);
    EXPECT_EQ(f.image.data, mine.image.data);
    EXPECT_NE(f.header.frame_id, mine.header.frame_id);
    other.close();
}

TEST(BindAddress, ParsesForms) {
    const BindAddress a = parse_bind_address("0.0.0.0:9000");
    EXPECT_EQ(a.host, "0.0.0.0");
    EXPECT_EQ(a.port, 9000);
    EXPECT_EQ(parse_bind_address(":81").host, "127.0.0.1");
    EXPECT_EQ(parse_bind_address("82").port, 82);
    EXPECT_THROW(parse_bind_address("host:abc"), InvalidArgumentError);
    EXPECT_THROW(parse_bind_address("host:70000"), InvalidArgumentError);
}

TEST(BindAddress, EnvironmentOverridesFlag) {
    ::unsetenv(kAddressEnv);
    EXPECT_EQ(resolve_bind_address("127.0.0.1:1234").port, 1234);
    ::setenv(kAddressEnv, "127.0.0.2:4321", 1);
    const BindAddress a = resolve_bind_address("127.0.0.1:1234");
    EXPECT_EQ(a.host, "127.0.0.2");
    EXPECT_EQ(a.port, 4321);
    ::setenv(kAddressEnv, "", 1);
    EXPECT_EQ(resolve_bind_address("127.0.0.1:1234").port, 1234);
    ::unsetenv(kAddressEnv);
}

TEST(Protocol, ParsesRequests) {
    const RenderRequest r = parse_render_request(nlohmann::json::parse(R"({
        "request_id": 7, "camera": {"eye": [0, 0, 0], "target": [0, 0, 1], "width": 40, "height": 30},
        "exposure_stops": -1.5, "wb_gains": [2, 1, 0.5],
        "tonemap": {"curve": "linear", "local": true, "strength": 0.25},
        "refocus": {"focus_depth": 3.0, "aperture": 4.0}, "map": "color"})"));
    EXPECT_EQ(r.request_id, 7u);
    ASSERT_TRUE(r.camera);
    EXPECT_EQ(r.camera->width, 40);
    EXPECT_EQ(r.camera->fx, 30.0);
    EXPECT_EQ(r.tonemap.exposure_stops, -1.5);
    EXPECT_EQ(r.tonemap.wb_gains, Vec3(2, 1, 0.5));
    EXPECT_EQ(r.tonemap.curve, ToneCurve::linear_clip);
    EXPECT_TRUE(r.tonemap.local_enabled);
    ASSERT_TRUE(r.refocus);
    EXPECT_EQ(r.refocus->aperture, 4.0);
    EXPECT_EQ(r.encoding, FrameEncoding::png);
    EXPECT_EQ(parse_render_request({{"map", "depth"}}).encoding, FrameEncoding::f32);

    try {
        parse_render_request({{"request_id", 3}, {"width", -4}});
        ADD_FAILURE();
    } catch (const ProtocolError& e) {
        EXPECT_EQ(e.request_id(), 3u);
    }
    EXPECT_THROW(parse_render_request({{"camera", {{"eye", {0, 0}}}}}), ProtocolError);
    EXPECT_THROW(parse_render_request({{"refocus", {{"aperture", 1.0}}}}), ProtocolError);
    EXPECT_THROW(parse_render_request({{"tonemap", {{"curve", "gamma"}, {"gamma", 0}}}}), ProtocolError);
}

TEST(Protocol, ResolvesCameraAndResolution) {
    const auto scene = ground_truth_scene();
    RenderRequest r;
    r.camera_index = 2;
    EXPECT_EQ(resolve_camera(*scene, r).translation, scene->cameras[2].translation);
    r.width = 64;
    r.height = 48;
    const CameraView big = resolve_camera(*scene, r);
    EXPECT_EQ(big.width, 64);
    EXPECT_NEAR(big.fx, 2.0 * scene->cameras[2].fx, 1e-12);
    r.camera_index = 3;
    EXPECT_THROW(resolve_camera(*scene, r), ProtocolError);
}

TEST(Protocol, RefocusedFrameDiffersFromSharpFrame) {
    const auto scene = ground_truth_scene();
    RenderRequest r;
    r.encoding = FrameEncoding::f32;
    const Image sharp = render_request_image(*scene, r);
    r.refocus = RefocusParams{3.0, 0.0, 16.0, 8};
    EXPECT_EQ(render_request_image(*scene, r).data, sharp.data);
    r.refocus->aperture = 20.0;
    EXPECT_NE(render_request_image(*scene, r).data, sharp.data);
}
