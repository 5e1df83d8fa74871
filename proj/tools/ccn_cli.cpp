// Command-line front end: dataset generation, training, tracking /
// alignment / occupancy evaluation, and debug rendering.

#include <CLI11.hpp>
#include <json.hpp>

#include <Eigen/Eigenvalues>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "ccn/alignment.hpp"
#include "ccn/contrastive.hpp"

using json = nlohmann::json;
using namespace ccn;

namespace {

struct Options {
    std::string config_path;
    std::string out = "out";
    std::string data;
    std::string checkpoint;
    uint64_t seed = 0;
    int64_t steps = 2000;
    int grid = 32;
    double tau = 0.07;
    int ransac_iters = 1000;
    int scenes = 20;
    int views = 2;
    int objects = 3;
    int image = 64;
    int frames = 8;
    int queries = 4096;
    bool visible_only = false;
};

// The camera-anchored grid cuboid: 8 units across, starting one safe unit in
// front of the shared 7-unit camera orbit distance.
GridSpec camera_grid(int res) {
    GridSpec spec;
    spec.grid_min = Vec3(-4, -4, 3);
    spec.grid_max = Vec3(4, 4, 11);
    spec.res_x = spec.res_y = spec.res_z = res;
    return spec;
}

CameraIntrinsics default_camera(int n) {
    CameraIntrinsics k;
    k.fx = k.fy = static_cast<double>(n);
    k.cx = k.cy = (n - 1) / 2.0;
    k.width = k.height = n;
    return k;
}

ModelConfig model_config(const Options& opt) {
    ModelConfig cfg;
    cfg.grid = camera_grid(opt.grid);
    cfg.encoder = desk_encoder_plan(cfg.feature_dim);
    cfg.init_seed = opt.seed + 1;
    return cfg;
}

json resolved_config(const Options& opt, const std::string& command) {
    return json{{"command", command},
                {"seed", opt.seed},
                {"out", opt.out},
                {"data", opt.data},
                {"checkpoint", opt.checkpoint},
                {"steps", opt.steps},
                {"grid", opt.grid},
                {"tau", opt.tau},
                {"ransac_iters", opt.ransac_iters},
                {"scenes", opt.scenes},
                {"views", opt.views},
                {"objects", opt.objects},
                {"image", opt.image},
                {"frames", opt.frames},
                {"queries", opt.queries},
                {"visible_only", opt.visible_only}};
}

// FNV-1a over the canonical config dump; reported with every metric.
std::string config_hash(const json& cfg) {
    const std::string s = cfg.dump();
    uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

void apply_config_file(Options& opt) {
    if (opt.config_path.empty()) return;
    std::ifstream f(opt.config_path);
    if (!f) throw Error("cannot open config: " + opt.config_path);
    json j = json::parse(f);
    if (j.contains("seed")) opt.seed = j["seed"].get<uint64_t>();
    if (j.contains("out")) opt.out = j["out"].get<std::string>();
    if (j.contains("data")) opt.data = j["data"].get<std::string>();
    if (j.contains("checkpoint")) opt.checkpoint = j["checkpoint"].get<std::string>();
    if (j.contains("steps")) opt.steps = j["steps"].get<int64_t>();
    if (j.contains("grid")) opt.grid = j["grid"].get<int>();
    if (j.contains("tau")) opt.tau = j["tau"].get<double>();
    if (j.contains("ransac_iters")) opt.ransac_iters = j["ransac_iters"].get<int>();
    if (j.contains("scenes")) opt.scenes = j["scenes"].get<int>();
    if (j.contains("views")) opt.views = j["views"].get<int>();
    if (j.contains("objects")) opt.objects = j["objects"].get<int>();
    if (j.contains("image")) opt.image = j["image"].get<int>();
    if (j.contains("frames")) opt.frames = j["frames"].get<int>();
    if (j.contains("queries")) opt.queries = j["queries"].get<int>();
    if (j.contains("visible_only")) opt.visible_only = j["visible_only"].get<bool>();
}

void write_outputs_preamble(const Options& opt, const std::string& command, json& cfg) {
    std::filesystem::create_directories(opt.out);
    cfg = resolved_config(opt, command);
    std::ofstream f(opt.out + "/config.json");
    f << cfg.dump(2) << "\n";
}

void write_metrics(const Options& opt, const json& cfg, const std::vector<json>& metrics) {
    const std::string hash = config_hash(cfg);
    json out = json::array();
    for (json m : metrics) {
        m["config"] = hash;
        out.push_back(m);
    }
    std::ofstream f(opt.out + "/metrics.json");
    f << out.dump(2) << "\n";
    std::cout << out.dump(2) << "\n";
}

void write_ppm(const std::string& path, const Tensor& rgb) {
    // rgb: [h,w,3] in [0,1].
    const int64_t h = rgb.shape[0], w = rgb.shape[1];
    std::ofstream f(path, std::ios::binary);
    f << "P6\n" << w << " " << h << "\n255\n";
    for (int64_t i = 0; i < h * w * 3; ++i)
        f.put(static_cast<char>(std::clamp(std::lround(rgb[i] * 255.0), 0L, 255L)));
}

// Views of one scene from the shared random-pose protocol.
std::vector<ViewRecord> scene_views(const Scene& scene, const Options& opt, uint64_t cam_seed) {
    CameraSampleConfig cc;
    cc.count = opt.views;
    auto poses = sample_camera_poses(cc, cam_seed);
    std::vector<ViewRecord> views;
    CameraIntrinsics k = default_camera(opt.image);
    for (const auto& p : poses) views.push_back(render_view(scene, p, k));
    return views;
}

std::vector<ViewPair> dataset_pairs(const std::vector<ViewRecord>& records, int views_per_scene) {
    std::vector<ViewPair> pairs;
    for (size_t base = 0; base + static_cast<size_t>(views_per_scene) <= records.size();
         base += static_cast<size_t>(views_per_scene))
        for (int i = 0; i < views_per_scene; ++i)
            for (int j = 0; j < views_per_scene; ++j)
                if (i != j)
                    pairs.push_back(make_view_pair(records[base + static_cast<size_t>(i)],
                                                   records[base + static_cast<size_t>(j)]));
    return pairs;
}

int cmd_generate(const Options& opt) {
    json cfg;
    write_outputs_preamble(opt, "generate", cfg);
    std::vector<ViewRecord> records;
    std::ofstream scenes_txt(opt.out + "/scenes.txt");
    for (int s = 0; s < opt.scenes; ++s) {
        Scene scene = sample_scene(opt.objects, opt.seed + static_cast<uint64_t>(s) * 1000 + 1);
        scenes_txt << scene_to_text(scene) << "\n";
        for (auto& v : scene_views(scene, opt, opt.seed + static_cast<uint64_t>(s) * 1000 + 2))
            records.push_back(std::move(v));
    }
    write_dataset(opt.out + "/dataset.ccd1", records);
    json manifest{{"scenes", opt.scenes}, {"views_per_scene", opt.views}, {"records", records.size()}};
    std::ofstream mf(opt.out + "/manifest.json");
    mf << manifest.dump(2) << "\n";
    write_metrics(opt, cfg, {json{{"metric", "dataset_records"},
                                  {"value", static_cast<double>(records.size())},
                                  {"n", records.size()}}});
    return 0;
}

int cmd_train(const Options& opt) {
    json cfg;
    write_outputs_preamble(opt, "train", cfg);
    if (opt.data.empty()) throw Error("train: --data is required");
    auto records = read_dataset(opt.data);
    int views_per_scene = opt.views;
    {
        const std::string manifest = std::filesystem::path(opt.data).parent_path() / "manifest.json";
        std::ifstream mf(manifest);
        if (mf) {
            json j = json::parse(mf);
            views_per_scene = j["views_per_scene"].get<int>();
        }
    }
    auto pairs = dataset_pairs(records, views_per_scene);
    if (pairs.empty()) throw Error("train: dataset yields no view pairs");

    CoCoNet model(model_config(opt));
    TrainConfig tc;
    tc.tau = opt.tau;
    tc.steps = opt.steps;
    tc.seed = opt.seed;
    const std::string ckpt = opt.checkpoint.empty() ? opt.out + "/model.ccn1" : opt.checkpoint;
    if (std::filesystem::exists(ckpt)) model.load(ckpt);  // resume
    NegativeQueue queue = NegativeQueue::load_from(model.store, tc.queue_capacity, model.cfg.head_out_feature);
    train_loop(model, pairs, queue, tc, opt.out + "/train_log.csv", ckpt);
    write_metrics(opt, cfg,
                  {json{{"metric", "train_steps"},
                        {"value", static_cast<double>(model.store.step_count)},
                        {"n", pairs.size()}}});
    return 0;
}

CoCoNet load_model(const Options& opt) {
    CoCoNet model(model_config(opt));
    if (!opt.checkpoint.empty()) model.load(opt.checkpoint);
    return model;
}

int cmd_eval_track(const Options& opt) {
    json cfg;
    write_outputs_preamble(opt, "eval-track", cfg);
    CoCoNet model = load_model(opt);
    TrackConfig tcfg;
    tcfg.ransac.iterations = opt.ransac_iters;
    tcfg.ransac.inlier_radius = 0.5 * model.cfg.grid.voxel_size().maxCoeff();
    tcfg.uniform_queries = opt.queries;
    tcfg.visible_only = opt.visible_only;
    tcfg.seed = opt.seed;
    CameraIntrinsics k = default_camera(opt.image);
    std::ofstream csv(opt.out + "/tracking.csv");
    csv << "sequence,frame,iou,occlusion,lost\n";
    double iou_sum = 0;
    int64_t n = 0;
    for (int s = 0; s < opt.scenes; ++s) {
        const uint64_t base = opt.seed + 7000 + static_cast<uint64_t>(s) * 1000;
        Scene scene = sample_scene(opt.objects, base + 1);
        CameraSampleConfig cc;
        auto cam = sample_camera_poses(cc, base + 2)[0];
        Rng mrng(base + 3);
        MotionSpec motion;
        motion.linear_velocity =
            Vec3(mrng.uniform(-0.08, 0.08), mrng.uniform(-0.08, 0.08), mrng.uniform(-0.08, 0.08));
        motion.angular_rate = mrng.uniform(-0.1, 0.1);
        TrackingSequence seq = make_tracking_sequence(scene, 0, motion, opt.frames, base + 4, k, cam);
        TrackResult r = track_sequence(model, seq, seq.boxes[0], tcfg);
        for (size_t t = 1; t < seq.frames.size(); ++t) {
            const double iou = box_iou(r.boxes[t], seq.boxes[t]);
            csv << s << "," << t << "," << iou << "," << seq.occlusion[t] << ","
                << static_cast<int>(r.lost[t]) << "\n";
            iou_sum += iou;
            ++n;
        }
    }
    write_metrics(opt, cfg, {json{{"metric", "tracking_mean_iou"}, {"value", iou_sum / double(n)}, {"n", n}}});
    return 0;
}

int cmd_eval_align(const Options& opt) {
    json cfg;
    write_outputs_preamble(opt, "eval-align", cfg);
    CoCoNet model = load_model(opt);
    TrackConfig tcfg;
    tcfg.ransac.iterations = opt.ransac_iters;
    tcfg.ransac.inlier_radius = 0.5 * model.cfg.grid.voxel_size().maxCoeff();
    tcfg.uniform_queries = opt.queries;
    tcfg.seed = opt.seed;
    CameraIntrinsics k = default_camera(opt.image);
    std::ofstream csv(opt.out + "/alignment.csv");
    csv << "trial,rot_err_deg,trans_err,correct_10deg\n";
    int correct = 0;
    for (int s = 0; s < opt.scenes; ++s) {
        const uint64_t base = opt.seed + 9000 + static_cast<uint64_t>(s) * 1000;
        Scene a = sample_scene(opt.objects, base + 1);
        Rng trng(base + 2);
        RigidTransform truth;
        truth.rotation = rot_z(trng.uniform(-0.5, 0.5)) * rot_x(trng.uniform(-0.3, 0.3));
        truth.translation = Vec3(trng.uniform(-0.5, 0.5), trng.uniform(-0.5, 0.5), trng.uniform(-0.5, 0.5));
        Scene b = a;
        for (auto& p : b.prims) p.pose = compose(truth, p.pose);
        CameraSampleConfig cc;
        auto cam = sample_camera_poses(cc, base + 3)[0];
        ViewRecord va = render_view(a, cam, k), vb = render_view(b, cam, k);
        double rot_err = 180, trans_err = 1e9;
        bool ok = false;
        try {
            RigidTransform est = align_objects(model, va, vb, tcfg);
            rot_err = rad2deg(rotation_angle(est.rotation * truth.rotation.transpose()));
            trans_err = (est.translation - truth.translation).norm();
            ok = rotation_accuracy(est, truth, 10.0);
        } catch (const Error&) {
        }
        csv << s << "," << rot_err << "," << trans_err << "," << (ok ? 1 : 0) << "\n";
        if (ok) ++correct;
    }
    write_metrics(opt, cfg,
                  {json{{"metric", "alignment_rotation_accuracy_10deg"},
                        {"value", double(correct) / double(opt.scenes)},
                        {"n", opt.scenes}}});
    return 0;
}

int cmd_eval_occ(const Options& opt) {
    json cfg;
    write_outputs_preamble(opt, "eval-occ", cfg);
    CoCoNet model = load_model(opt);
    CameraIntrinsics k = default_camera(opt.image);
    int64_t tp = 0, fp = 0, fn = 0;
    for (int s = 0; s < opt.scenes; ++s) {
        const uint64_t base = opt.seed + 11000 + static_cast<uint64_t>(s) * 1000;
        Scene scene = sample_scene(opt.objects, base + 1);
        CameraSampleConfig cc;
        auto cam = sample_camera_poses(cc, base + 2)[0];
        ViewRecord view = render_view(scene, cam, k);
        VoxelFeatureGrid m = model.encode_scene(view, view.cam_pose);
        std::vector<Vec3> surf = surface_points(view);
        auto pts = sample_query_points(m.spec, opt.queries, base + 3, QuerySampleMode::SurfaceBiased,
                                       view.cam_pose, &surf);
        Tensor occ = model.query_batch(m, pts, Head::Occupancy);
        for (size_t i = 0; i < pts.size(); ++i) {
            const bool pred = occ[static_cast<int64_t>(i)] > 0.5;
            const bool truth = scene_inside(scene, pts[i]);
            if (pred && truth) ++tp;
            else if (pred) ++fp;
            else if (truth) ++fn;
        }
    }
    const double iou = tp + fp + fn == 0 ? 1.0 : double(tp) / double(tp + fp + fn);
    write_metrics(opt, cfg, {json{{"metric", "occupancy_iou"}, {"value", iou}, {"n", tp + fp + fn}}});
    return 0;
}

int cmd_render(const Options& opt) {
    json cfg;
    write_outputs_preamble(opt, "render", cfg);
    CoCoNet model = load_model(opt);
    Scene scene = sample_scene(opt.objects, opt.seed + 1);
    CameraIntrinsics k = default_camera(opt.image);
    CameraSampleConfig cc;
    auto cam = sample_camera_poses(cc, opt.seed + 2)[0];
    ViewRecord view = render_view(scene, cam, k);
    write_ppm(opt.out + "/view.ppm", view.rgb);

    VoxelFeatureGrid m = model.encode_scene(view, view.cam_pose);
    dump_grid(m, opt.out + "/grid.bin");
    const GridSpec& spec = m.spec;
    const int64_t zc = spec.res_z / 2;

    // PCA of the mid-depth feature slice, projected onto the top three
    // principal axes as RGB.
    const int64_t c = m.channels();
    const int64_t cells = spec.res_x * spec.res_y;
    Eigen::MatrixXd feats(cells, c);
    for (int64_t i = 0; i < spec.res_x; ++i)
        for (int64_t j = 0; j < spec.res_y; ++j)
            for (int64_t ch = 0; ch < c; ++ch)
                feats(i * spec.res_y + j, ch) = m.values.at4(i, j, zc, ch);
    Eigen::RowVectorXd mean = feats.colwise().mean();
    feats.rowwise() -= mean;
    Eigen::MatrixXd cov = feats.transpose() * feats / double(cells);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
    Eigen::MatrixXd proj = feats * eig.eigenvectors().rightCols(3);
    Tensor pca({spec.res_x, spec.res_y, 3});
    for (int64_t ch = 0; ch < 3; ++ch) {
        const double lo = proj.col(ch).minCoeff(), hi = proj.col(ch).maxCoeff();
        for (int64_t r = 0; r < cells; ++r)
            pca[r * 3 + ch] = hi > lo ? (proj(r, ch) - lo) / (hi - lo) : 0.5;
    }
    write_ppm(opt.out + "/feat_pca.ppm", pca);

    // Occupancy and color heads over the same slice.
    std::vector<Vec3> slice_pts;
    for (int64_t i = 0; i < spec.res_x; ++i)
        for (int64_t j = 0; j < spec.res_y; ++j)
            slice_pts.push_back(
                m.grid_to_world(memory_to_world(Vec3(double(i), double(j), double(zc)), spec)));
    Tensor occ = model.query_batch(m, slice_pts, Head::Occupancy);
    Tensor rgbp = model.query_batch(m, slice_pts, Head::Rgb);
    Tensor occ_img({spec.res_x, spec.res_y, 3});
    Tensor rgb_img({spec.res_x, spec.res_y, 3});
    for (int64_t r = 0; r < cells; ++r) {
        for (int64_t ch = 0; ch < 3; ++ch) {
            occ_img[r * 3 + ch] = occ[r];
            rgb_img[r * 3 + ch] = rgbp.at2(r, ch);
        }
    }
    write_ppm(opt.out + "/occ_slice.ppm", occ_img);
    write_ppm(opt.out + "/rgb_slice.ppm", rgb_img);
    write_metrics(opt, cfg, {json{{"metric", "render_outputs"}, {"value", 4.0}, {"n", 1}}});
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Continuous contrastive 3D scene representations"};
    app.require_subcommand(1);
    Options opt;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", opt.config_path, "JSON config file (flags override it)");
        sub->add_option("--seed", opt.seed, "master RNG seed");
        sub->add_option("--out", opt.out, "output directory");
        sub->add_option("--steps", opt.steps, "training steps");
        sub->add_option("--grid", opt.grid, "grid resolution per axis");
        sub->add_option("--tau", opt.tau, "InfoNCE temperature");
        sub->add_option("--ransac-iters", opt.ransac_iters, "RANSAC iterations");
        sub->add_option("--data", opt.data, "dataset file (CCD1)");
        sub->add_option("--checkpoint", opt.checkpoint, "model checkpoint (CCN1)");
        sub->add_option("--scenes", opt.scenes, "number of scenes / trials");
        sub->add_option("--views", opt.views, "views per scene");
        sub->add_option("--objects", opt.objects, "objects per scene");
        sub->add_option("--image", opt.image, "image resolution");
        sub->add_option("--frames", opt.frames, "frames per tracking sequence");
        sub->add_option("--queries", opt.queries, "uniform query samples");
        sub->add_flag("--visible-only", opt.visible_only, "disable amodal completion in tracking");
    };

    CLI::App* generate = app.add_subcommand("generate", "sample scenes and write a dataset");
    CLI::App* train = app.add_subcommand("train", "contrastive view-prediction training");
    CLI::App* track = app.add_subcommand("eval-track", "3D tracking over generated sequences");
    CLI::App* align = app.add_subcommand("eval-align", "6DoF cross-view alignment accuracy");
    CLI::App* occ = app.add_subcommand("eval-occ", "occupancy IoU against the analytic scenes");
    CLI::App* render = app.add_subcommand("render", "debug renders and feature projections");
    for (CLI::App* sub : {generate, train, track, align, occ, render}) add_common(sub);

    CLI11_PARSE(app, argc, argv);
    try {
        // Config file first, then re-apply explicit flags on top.
        if (!opt.config_path.empty()) {
            Options file_opt = opt;
            apply_config_file(file_opt);
            std::swap(opt, file_opt);
            // Values the user passed explicitly win over the file.
            for (CLI::App* sub : {generate, train, track, align, occ, render}) {
                if (!sub->parsed()) continue;
                auto take = [&](const char* name, auto& dst) {
                    auto* o = sub->get_option(name);
                    if (o && o->count() > 0) {
                        using T = std::decay_t<decltype(dst)>;
                        dst = o->as<T>();
                    }
                };
                take("--seed", opt.seed);
                take("--out", opt.out);
                take("--steps", opt.steps);
                take("--grid", opt.grid);
                take("--tau", opt.tau);
                take("--ransac-iters", opt.ransac_iters);
                take("--data", opt.data);
                take("--checkpoint", opt.checkpoint);
                take("--scenes", opt.scenes);
                take("--views", opt.views);
                take("--objects", opt.objects);
                take("--image", opt.image);
                take("--frames", opt.frames);
                take("--queries", opt.queries);
                if (sub->get_option("--visible-only")->count() > 0) opt.visible_only = true;
            }
        }
        if (generate->parsed()) return cmd_generate(opt);
        if (train->parsed()) return cmd_train(opt);
        if (track->parsed()) return cmd_eval_track(opt);
        if (align->parsed()) return cmd_eval_align(opt);
        if (occ->parsed()) return cmd_eval_occ(opt);
        if (render->parsed()) return cmd_render(opt);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
