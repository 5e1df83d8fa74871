#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>

#include "ccn/contrastive.hpp"

using namespace ccn;

namespace {

CameraIntrinsics square_cam(int n, double f) {
    CameraIntrinsics k;
    k.fx = k.fy = f;
    k.cx = k.cy = (n - 1) / 2.0;
    k.width = k.height = n;
    return k;
}

ModelConfig camera_tiny() {
    ModelConfig cfg = tiny_model_config();
    cfg.grid.grid_min = Vec3(-4, -4, 3);
    cfg.grid.grid_max = Vec3(4, 4, 11);
    return cfg;
}

std::vector<ViewPair> demo_pairs(int n_pairs, uint64_t seed) {
    Scene scene = sample_scene(2, seed);
    CameraIntrinsics k = square_cam(32, 32);
    CameraSampleConfig cc;
    cc.count = 2 * n_pairs;
    auto poses = sample_camera_poses(cc, seed + 1);
    std::vector<ViewPair> pairs;
    for (int i = 0; i < n_pairs; ++i)
        pairs.push_back(make_view_pair(render_view(scene, poses[static_cast<size_t>(2 * i)], k),
                                       render_view(scene, poses[static_cast<size_t>(2 * i + 1)], k)));
    return pairs;
}

TrainConfig small_train_config() {
    TrainConfig cfg;
    cfg.n_pos = 24;
    cfg.n_occ = 16;
    cfg.negatives_per_anchor = 64;
    cfg.queue_capacity = 128;
    cfg.steps = 2;
    return cfg;
}

}  // namespace

TEST_CASE("info_nce oracle: uniform logits give ln(K+1)") {
    // q orthogonal to nothing: q.k+ == q.n_i for all i makes the softmax
    // uniform over K+1 entries, so the loss is exactly ln(K+1).
    const int64_t c = 4;
    Tensor q({1, c}), k({1, c});
    q.data = {1, 0, 0, 0};
    k.data = {0, 1, 0, 0};  // q.k+ = 0
    Tensor negs({3, c});    // all orthogonal to q as well
    negs.at2(0, 1) = 1;
    negs.at2(1, 2) = 1;
    negs.at2(2, 3) = 1;
    REQUIRE(info_nce_loss(q, k, negs, 0.07) == Catch::Approx(std::log(4.0)).margin(1e-12));
}

TEST_CASE("info_nce oracle: one aligned positive, one orthogonal negative") {
    // Logits (1/tau, 0) with tau = 1: loss = ln(1 + e^{-1}).
    Tensor q({1, 2}), k({1, 2});
    q.data = {1, 0};
    k.data = {1, 0};
    Tensor negs({1, 2});
    negs.data = {0, 1};
    REQUIRE(info_nce_loss(q, k, negs, 1.0) ==
            Catch::Approx(std::log(1.0 + std::exp(-1.0))).margin(1e-12));
}

TEST_CASE("info_nce oracle: brute-force softmax cross-check on random rows") {
    Rng rng(5);
    const int64_t n = 6, c = 8, kn = 20;
    Tensor q({n, c}), k({n, c}), negs({kn, c});
    for (double& v : q.data) v = rng.uniform(-1, 1);
    for (double& v : k.data) v = rng.uniform(-1, 1);
    for (double& v : negs.data) v = rng.uniform(-1, 1);
    const double tau = 0.07;
    double expect = 0;
    for (int64_t r = 0; r < n; ++r) {
        double pos = 0;
        for (int64_t j = 0; j < c; ++j) pos += q.at2(r, j) * k.at2(r, j);
        double denom = std::exp(pos / tau);
        for (int64_t i = 0; i < kn; ++i) {
            double d = 0;
            for (int64_t j = 0; j < c; ++j) d += q.at2(r, j) * negs.at2(i, j);
            denom += std::exp(d / tau);
        }
        expect += -std::log(std::exp(pos / tau) / denom);
    }
    expect /= static_cast<double>(n);
    REQUIRE(info_nce_loss(q, k, negs, tau) == Catch::Approx(expect).epsilon(1e-10));
}

TEST_CASE("info_nce decreases as the positive aligns and grows with hard negatives") {
    Tensor q({1, 2});
    q.data = {1, 0};
    Tensor negs({1, 2});
    negs.data = {0.5, 0.5};
    auto loss_at = [&](double cos_pos) {
        Tensor k({1, 2});
        k.data = {cos_pos, std::sqrt(1 - cos_pos * cos_pos)};
        return info_nce_loss(q, k, negs, 0.07);
    };
    REQUIRE(loss_at(0.9) < loss_at(0.5));
    REQUIRE(loss_at(0.5) < loss_at(0.1));
    // Harder negative (more aligned with q) raises the loss.
    Tensor k({1, 2});
    k.data = {0.9, std::sqrt(1 - 0.81)};
    Tensor hard({1, 2});
    hard.data = {0.95, std::sqrt(1 - 0.95 * 0.95)};
    REQUIRE(info_nce_loss(q, k, hard, 0.07) > info_nce_loss(q, k, negs, 0.07));
}

TEST_CASE("info_nce is stable at extreme logits (log-sum-exp path)") {
    Tensor q({1, 2}), k({1, 2}), negs({1, 2});
    q.data = {60, 0};
    k.data = {60, 0};  // q.k+ = 3600, /tau huge
    negs.data = {0, 60};
    const double loss = info_nce_loss(q, k, negs, 0.07);
    REQUIRE(std::isfinite(loss));
    REQUIRE(loss >= 0.0);
    REQUIRE(loss < 1e-9);  // overwhelming positive
}

TEST_CASE("negative queue is FIFO with wrap-around") {
    NegativeQueue q(4, 2);
    REQUIRE(q.size() == 0);
    Tensor batch({3, 2});
    batch.data = {1, 1, 2, 2, 3, 3};
    q.push(batch);
    REQUIRE(q.size() == 3);
    // newest first
    Tensor latest = q.negatives(2);
    REQUIRE(latest.shape == std::vector<int64_t>{2, 2});
    REQUIRE(latest.at2(0, 0) == 3.0);
    REQUIRE(latest.at2(1, 0) == 2.0);
    Tensor more({3, 2});
    more.data = {4, 4, 5, 5, 6, 6};
    q.push(more);  // overwrites 1 and 2
    REQUIRE(q.size() == 4);
    Tensor snap = q.snapshot();  // oldest first: 3,4,5,6
    REQUIRE(snap.at2(0, 0) == 3.0);
    REQUIRE(snap.at2(3, 0) == 6.0);
    // Request more than available: clamps to size.
    REQUIRE(q.negatives(100).shape[0] == 4);
}

TEST_CASE("negative queue round trips through the parameter store") {
    NegativeQueue q(8, 3);
    Rng rng(3);
    Tensor batch({5, 3});
    for (double& v : batch.data) v = rng.uniform(-1, 1);
    q.push(batch);
    ParameterStore store;
    q.save_to(store);
    REQUIRE_FALSE(store.at("_queue_buf").trainable);
    NegativeQueue back = NegativeQueue::load_from(store, 8, 3);
    REQUIRE(back.size() == 5);
    REQUIRE(back.snapshot().data == q.snapshot().data);
    REQUIRE(back.negatives(2).data == q.negatives(2).data);
    // Shape mismatch on reload is an error.
    REQUIRE_THROWS_AS(NegativeQueue::load_from(store, 16, 3), FormatError);
}

TEST_CASE("sample_target_surface draws without replacement and reports overflow") {
    Scene s = sample_scene(2, 9);
    CameraSampleConfig cc;
    auto poses = sample_camera_poses(cc, 2);
    ViewRecord view = render_view(s, poses[0], square_cam(32, 32));
    const int64_t available = static_cast<int64_t>(surface_points(view).size());
    REQUIRE(available > 16);
    CorrespondenceSample a = sample_target_surface(view, 16, 5);
    REQUIRE(a.points.size() == 16);
    REQUIRE(a.colors.size() == 16);
    REQUIRE(a.with_replacement == 0);
    for (size_t i = 0; i < a.points.size(); ++i)
        for (size_t j = 0; j < i; ++j) REQUIRE((a.points[i] - a.points[j]).norm() > 0);
    // Deterministic in the seed.
    CorrespondenceSample b = sample_target_surface(view, 16, 5);
    for (size_t i = 0; i < 16; ++i) REQUIRE(a.points[i] == b.points[i]);
    // Oversampling fills with replacement and says so.
    CorrespondenceSample big = sample_target_surface(view, available + 10, 6);
    REQUIRE(big.with_replacement == 10);
    // Empty view throws.
    ViewRecord empty = render_view(Scene{}, poses[0], square_cam(8, 8));
    REQUIRE_THROWS_AS(sample_target_surface(empty, 4, 1), EmptyTargetCloud);
}

TEST_CASE("occupancy labels: positives on the surface, negatives in observed free space") {
    Scene s = sample_scene(3, 17);
    CameraSampleConfig cc;
    auto poses = sample_camera_poses(cc, 3);
    ViewRecord view = render_view(s, poses[0], square_cam(48, 48));
    const double voxel = 0.25;
    OccupancyLabels lab = sample_occupancy_labels(view, 64, 11, voxel);
    REQUIRE(lab.positives.size() == 64);
    REQUIRE(lab.negatives.size() >= 60);  // ray-too-short skips are rare here
    for (const Vec3& p : lab.positives) {
        double best = 1e9;
        for (const auto& prim : s.prims) best = std::min(best, std::abs(primitive_sdf(prim, p)));
        REQUIRE(best < 1e-4);
    }
    for (const Vec3& p : lab.negatives) {
        // Strictly outside every primitive: analytic free-space oracle.
        REQUIRE_FALSE(scene_inside(s, p));
        // And at least (voxel - f32 slack) in front of the surface along the ray.
        const Vec3 pc = view.cam_pose.inverse()(p);
        REQUIRE(pc.z() > 0);
    }
}

TEST_CASE("warp_grid_on_tape matches the plain warp_grid resampler") {
    Rng rng(21);
    GridSpec spec;
    spec.grid_min = Vec3(-4, -4, 3);
    spec.grid_max = Vec3(4, 4, 11);
    spec.res_x = spec.res_y = spec.res_z = 6;
    VoxelFeatureGrid g;
    g.spec = spec;
    g.values = Tensor({6, 6, 6, 3});
    for (double& v : g.values.data) v = rng.uniform(-1, 1);
    RigidTransform v;
    v.rotation = rot_z(0.3) * rot_x(-0.2);
    v.translation = Vec3(0.5, -0.25, 0.75);
    VoxelFeatureGrid expect = warp_grid(g, v);
    Tape tape;
    Value warped = warp_grid_on_tape(tape, tape.constant(g.values), spec, v);
    REQUIRE(tape.val(warped).shape == expect.values.shape);
    for (int64_t i = 0; i < expect.values.numel(); ++i)
        REQUIRE(tape.val(warped)[i] == Catch::Approx(expect.values[i]).margin(1e-12));
}

TEST_CASE("train_step populates the queue after computing the loss") {
    CoCoNet model(camera_tiny());
    auto pairs = demo_pairs(1, 41);
    TrainConfig cfg = small_train_config();
    NegativeQueue queue(cfg.queue_capacity, model.cfg.head_out_feature);
    TrainStats s0 = train_step(model, std::span<const ViewPair>(pairs.data(), 1), queue, cfg, 0);
    // Correspondences occluded from the input view are dropped, so the queue
    // grows by the number of co-visible samples, at most n_pos.
    REQUIRE(queue.size() > 0);
    REQUIRE(queue.size() <= cfg.n_pos);
    REQUIRE(std::isfinite(s0.l_nce));
    REQUIRE(s0.l_occ > 0);
    REQUIRE(s0.l_rgb >= 0);
    REQUIRE(s0.total == Catch::Approx(s0.l_nce + s0.l_occ + s0.l_rgb).margin(1e-9));
    // Second step draws negatives from the queue and pushes again.
    const size_t after_first = queue.size();
    train_step(model, std::span<const ViewPair>(pairs.data(), 1), queue, cfg, 1);
    REQUIRE(queue.size() > after_first);
    REQUIRE(queue.size() <= 2 * cfg.n_pos);
}

TEST_CASE("loss weights isolate their terms") {
    // With lambda_occ = lambda_rgb = 0 the occupancy/rgb head parameters get
    // exactly zero gradient; with lambda_nce = 0 the feature head does.
    auto grads_for = [&](double l_nce, double l_occ, double l_rgb, const char* param) {
        CoCoNet model(camera_tiny());
        auto pairs = demo_pairs(1, 43);
        TrainConfig cfg = small_train_config();
        cfg.lambda_nce = l_nce;
        cfg.lambda_occ = l_occ;
        cfg.lambda_rgb = l_rgb;
        NegativeQueue queue(cfg.queue_capacity, model.cfg.head_out_feature);
        train_step(model, std::span<const ViewPair>(pairs.data(), 1), queue, cfg, 0);
        double mag = 0;
        for (double g : model.store.at(param).grad.data) mag += std::abs(g);
        return mag;
    };
    REQUIRE(grads_for(1, 0, 0, "head/occ/out_w") == 0.0);
    REQUIRE(grads_for(1, 0, 0, "head/rgb/out_w") == 0.0);
    REQUIRE(grads_for(0, 1, 1, "head/feat/out_w") == 0.0);
    REQUIRE(grads_for(1, 1, 1, "head/occ/out_w") > 0.0);
}

TEST_CASE("train_step is bitwise deterministic") {
    auto run = [] {
        CoCoNet model(camera_tiny());
        auto pairs = demo_pairs(1, 47);
        TrainConfig cfg = small_train_config();
        NegativeQueue queue(cfg.queue_capacity, model.cfg.head_out_feature);
        for (int64_t s = 0; s < 2; ++s)
            train_step(model, std::span<const ViewPair>(pairs.data(), 1), queue, cfg, s);
        std::map<std::string, std::vector<double>> out;
        model.store.for_each([&](const Parameter& p) { out[p.name] = p.value.data; });
        return out;
    };
    REQUIRE(run() == run());
}

TEST_CASE("train_loop writes the CSV log and a loadable checkpoint") {
    namespace fs = std::filesystem;
    const std::string log = (fs::temp_directory_path() / "ccn_train_log.csv").string();
    const std::string ckpt = (fs::temp_directory_path() / "ccn_train_ckpt.bin").string();
    CoCoNet model(camera_tiny());
    auto pairs = demo_pairs(2, 53);
    TrainConfig cfg = small_train_config();
    cfg.steps = 3;
    cfg.checkpoint_every = 2;
    NegativeQueue queue(cfg.queue_capacity, model.cfg.head_out_feature);
    train_loop(model, pairs, queue, cfg, log, ckpt);
    REQUIRE(model.store.step_count == 3);
    std::ifstream f(log);
    std::string line;
    std::getline(f, line);
    REQUIRE(line == "step,l_nce,l_occ,l_rgb,wall_ms");
    int rows = 0;
    while (std::getline(f, line))
        if (!line.empty()) ++rows;
    REQUIRE(rows == 3);
    ParameterStore loaded;
    loaded.load(ckpt);
    REQUIRE(loaded.step_count == 3);
    REQUIRE(loaded.has("_queue_buf"));
    std::remove(log.c_str());
    std::remove(ckpt.c_str());
}

TEST_CASE("resume from checkpoint is bitwise identical to an unbroken run") {
    namespace fs = std::filesystem;
    const std::string ckpt = (fs::temp_directory_path() / "ccn_resume_ckpt.bin").string();
    auto pairs = demo_pairs(2, 59);
    TrainConfig cfg = small_train_config();
    cfg.checkpoint_every = 0;

    // Unbroken: 4 steps.
    CoCoNet full(camera_tiny());
    {
        NegativeQueue queue(cfg.queue_capacity, full.cfg.head_out_feature);
        TrainConfig c = cfg;
        c.steps = 4;
        train_loop(full, pairs, queue, c, "", "");
    }

    // Broken: 2 steps, checkpoint, fresh model, resume to 4.
    CoCoNet half(camera_tiny());
    {
        NegativeQueue queue(cfg.queue_capacity, half.cfg.head_out_feature);
        TrainConfig c = cfg;
        c.steps = 2;
        train_loop(half, pairs, queue, c, "", ckpt);
    }
    ModelConfig other = camera_tiny();
    other.init_seed = 1234;  // irrelevant once loaded
    CoCoNet resumed(other);
    resumed.load(ckpt);
    {
        NegativeQueue queue =
            NegativeQueue::load_from(resumed.store, cfg.queue_capacity, resumed.cfg.head_out_feature);
        TrainConfig c = cfg;
        c.steps = 4;
        train_loop(resumed, pairs, queue, c, "", "");
    }
    bool all_equal = true;
    full.store.for_each([&](const Parameter& p) {
        if (p.name[0] == '_') return;
        all_equal = all_equal && (p.value.data == resumed.store.at(p.name).value.data) &&
                    (p.adam_m.data == resumed.store.at(p.name).adam_m.data) &&
                    (p.adam_v.data == resumed.store.at(p.name).adam_v.data);
    });
    REQUIRE(all_equal);
    std::remove(ckpt.c_str());
}

TEST_CASE("train config validation") {
    TrainConfig cfg;
    cfg.tau = 0;
    REQUIRE_THROWS_AS(cfg.validate(), Error);
    cfg = TrainConfig{};
    cfg.negatives_per_anchor = 0;
    REQUIRE_THROWS_AS(cfg.validate(), Error);
    cfg = TrainConfig{};
    cfg.batch_size = 0;
    REQUIRE_THROWS_AS(cfg.validate(), Error);
    REQUIRE_NOTHROW(TrainConfig{}.validate());
}

TEST_CASE("evaluation wrappers agree with direct tape losses") {
    CoCoNet model(camera_tiny());
    auto pairs = demo_pairs(1, 61);
    const ViewRecord& view = pairs[0].target_view;
    VoxelFeatureGrid m = model.encode_scene(view, view.cam_pose);
    OccupancyLabels lab = sample_occupancy_labels(view, 16, 2, m.spec.voxel_size().maxCoeff());
    const double bce = occupancy_bce_loss(model, m, lab.positives, lab.negatives);
    REQUIRE(std::isfinite(bce));
    REQUIRE(bce > 0);
    CorrespondenceSample corr = sample_target_surface(view, 16, 3);
    const double mse = rgb_regression_loss(model, m, corr.points, corr.colors);
    REQUIRE(mse >= 0);
    REQUIRE(mse < 1.0);
}
