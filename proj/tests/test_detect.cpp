#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "probe/detect.hpp"
#include "probe/model.hpp"
#include "probe/ops.hpp"
#include "testutil.hpp"

using namespace probe;
using namespace probe::detect;
using num::Graph;
using num::Tensor;
using num::TensorPtr;
using testutil::random_tensor;

namespace {

HeadConfig tiny_head() {
    HeadConfig hc;
    hc.grid = 2;
    hc.in_dim = 8;
    hc.num_classes = 2;
    return hc;
}

// Prediction grid realizing a target grid exactly: huge class logit at
// positive cells, everything else strongly negative.
std::vector<double> pred_from_targets(const TargetGrid& t, int num_classes) {
    const int g = t.grid;
    const int ch = num_classes + 4;
    std::vector<double> pred(static_cast<std::size_t>(g) * g * ch, -40.0);
    for (int cell = 0; cell < g * g; ++cell) {
        double* p = pred.data() + static_cast<std::size_t>(cell) * ch;
        if (!t.positive(cell)) continue;
        p[t.class_id[static_cast<std::size_t>(cell)]] = 40.0;
        p[num_classes + 0] = t.dx[static_cast<std::size_t>(cell)];
        p[num_classes + 1] = t.dy[static_cast<std::size_t>(cell)];
        p[num_classes + 2] = t.dw[static_cast<std::size_t>(cell)];
        p[num_classes + 3] = t.dh[static_cast<std::size_t>(cell)];
    }
    return pred;
}

datagen::LabeledScene scene_with_boxes(std::vector<std::pair<int, Box>> boxes) {
    datagen::LabeledScene s;
    s.image = Raster(16, 16, 0.5);
    s.boxes = std::move(boxes);
    return s;
}

}  // namespace

TEST_CASE("tokens_to_grid") {
    Rng rng(1);
    auto t196 = random_tensor({196, 8}, rng);
    auto g14 = tokens_to_grid(t196, 14);
    CHECK(g14->shape() == num::Shape{14, 14, 8});

    auto t64 = random_tensor({64, 8}, rng);
    auto g8 = tokens_to_grid(t64, 8);
    CHECK(g8->shape() == num::Shape{8, 8, 8});

    auto flat = num::reshape(g8, {64, 8});
    CHECK(flat->values() == t64->values());

    CHECK_THROWS_AS(tokens_to_grid(t196, 8), DimensionError);
    Graph::active().clear();
}

TEST_CASE("head output shape and parameter counts") {
    DetectionHead tiny(tiny_head(), 3);
    Rng rng(2);
    auto x = random_tensor({3, 2, 2, 8}, rng);
    auto y = tiny.forward(x, true);
    CHECK(y->shape() == num::Shape{3, 2, 2, 6});
    Graph::active().clear();

    HeadConfig full;
    full.grid = 14;
    full.in_dim = 768;
    full.num_classes = 4;
    DetectionHead head(full, 1);
    ParameterCounts c = head.parameter_counts();
    CHECK(c.conv1_weights == 2654208);  // 3*3*768*384
    CHECK(c.conv2_weights == 49152);    // 384*128
    CHECK(c.pred_weights == 1024);      // 128*(4+4)
    CHECK(c.weights_total == 2654208 + 49152 + 1024);
    CHECK(c.biases_total == 384 + 128 + 8);
    CHECK(c.bn_affine == 2 * 384);
}

TEST_CASE("1x1 convolution equals a per-cell matmul oracle") {
    Rng rng(3);
    auto x = random_tensor({2, 3, 3, 5}, rng);
    auto w = random_tensor({5, 4}, rng);
    auto b = random_tensor({4}, rng);
    auto y = num::conv1x1(x, w, b);
    for (std::size_t cell = 0; cell < 2 * 3 * 3; ++cell) {
        for (std::size_t co = 0; co < 4; ++co) {
            double want = b->data()[co];
            for (std::size_t ci = 0; ci < 5; ++ci)
                want += x->data()[cell * 5 + ci] * w->data()[ci * 4 + co];
            CHECK(std::fabs(y->data()[cell * 4 + co] - want) < 1e-12);
        }
    }
    Graph::active().clear();
}

TEST_CASE("assign_targets center convention and roundtrip") {
    HeadConfig hc = tiny_head();  // grid 2
    // box centered exactly at the center of cell (0,0): cell centers are at 0.25
    Box b{0.15, 0.20, 0.35, 0.30};
    auto scene = scene_with_boxes({{1, b}});
    TargetGrid t = assign_targets(scene, hc);
    CHECK(t.class_id[0] == 1);
    CHECK(t.dx[0] == doctest::Approx(0.5));
    CHECK(t.dy[0] == doctest::Approx(0.5));

    // encode -> decode roundtrip within 1e-9
    auto pred = Tensor::make({2, 2, 6}, pred_from_targets(t, 2));
    auto dets = decode(*pred, 0.5, hc);
    REQUIRE(dets.size() == 1);
    CHECK(std::fabs(dets[0].box.x_min - b.x_min) < 1e-9);
    CHECK(std::fabs(dets[0].box.y_min - b.y_min) < 1e-9);
    CHECK(std::fabs(dets[0].box.x_max - b.x_max) < 1e-9);
    CHECK(std::fabs(dets[0].box.y_max - b.y_max) < 1e-9);
    CHECK(dets[0].class_id == 1);

    Box degenerate{0.2, 0.2, 0.2, 0.4};
    CHECK_THROWS_AS(assign_targets(scene_with_boxes({{0, degenerate}}), hc, "s9"), DataError);
}

TEST_CASE("same-cell collisions resolve to the larger box in any order") {
    HeadConfig hc = tiny_head();
    Box big{0.05, 0.05, 0.45, 0.45};
    Box small{0.20, 0.20, 0.30, 0.30};
    auto t1 = assign_targets(scene_with_boxes({{0, big}, {1, small}}), hc);
    auto t2 = assign_targets(scene_with_boxes({{1, small}, {0, big}}), hc);
    CHECK(t1.class_id[0] == 0);
    CHECK(t2.class_id[0] == 0);
    CHECK(t1.dw[0] == t2.dw[0]);

    // exact area tie: lexicographically smaller (class, coords) wins either way
    Box tie_a{0.10, 0.10, 0.30, 0.30};
    Box tie_b{0.15, 0.15, 0.35, 0.35};
    auto ta = assign_targets(scene_with_boxes({{1, tie_a}, {1, tie_b}}), hc);
    auto tb = assign_targets(scene_with_boxes({{1, tie_b}, {1, tie_a}}), hc);
    CHECK(ta.gt_box[0].x_min == tie_a.x_min);
    CHECK(tb.gt_box[0].x_min == tie_a.x_min);
}

TEST_CASE("focal loss values") {
    // perfect prediction: p_t -> 1, loss -> 0
    TargetGrid t;
    t.grid = 1;
    t.class_id = {0};
    t.dx = {0.5};
    t.dy = {0.5};
    t.dw = {std::log(0.5)};
    t.dh = {std::log(0.5)};
    t.gt_box = {Box{0.25, 0.25, 0.75, 0.75}};
    auto perfect = Tensor::make({1, 1, 1, 1}, {40.0});
    CHECK(focal_loss(perfect, {t}, 0.25, 2.0)->item() < 1e-6);

    // single positive cell with p_t = 0.5 (logit 0)
    auto half = Tensor::make({1, 1, 1, 1}, {0.0});
    const double want = 0.25 * 0.25 * std::log(2.0);
    CHECK(focal_loss(half, {t}, 0.25, 2.0)->item() == doctest::Approx(want).epsilon(1e-12));

    // gamma = 0, alpha = 0.5 halves the balanced cross-entropy
    Rng rng(5);
    auto logits = random_tensor({1, 2, 2, 3}, rng);
    TargetGrid t2;
    t2.grid = 2;
    t2.class_id = {2, -1, 1, -1};
    t2.dx.assign(4, 0.5);
    t2.dy.assign(4, 0.5);
    t2.dw.assign(4, std::log(0.25));
    t2.dh.assign(4, std::log(0.25));
    t2.gt_box.assign(4, Box{0.1, 0.1, 0.35, 0.35});
    const double got = focal_loss(logits, {t2}, 0.5, 0.0)->item();
    double ce = 0.0;
    for (std::size_t cell = 0; cell < 4; ++cell) {
        for (std::size_t c = 0; c < 3; ++c) {
            const double logit = logits->data()[cell * 3 + c];
            const double p = 1.0 / (1.0 + std::exp(-logit));
            const double p_t =
                (t2.class_id[cell] == static_cast<int>(c)) ? p : 1.0 - p;
            ce += -std::log(p_t);
        }
    }
    ce /= 4.0;
    CHECK(got == doctest::Approx(0.5 * ce).epsilon(1e-10));

    // monotone decreasing in p_t for positives
    double prev = 1e9;
    for (double logit : {-2.0, -1.0, 0.0, 1.0, 2.0}) {
        auto l = Tensor::make({1, 1, 1, 1}, {logit});
        const double v = focal_loss(l, {t}, 0.25, 2.0)->item();
        CHECK(v < prev);
        prev = v;
    }
    CHECK(prev >= 0.0);
    Graph::active().clear();
}

TEST_CASE("giou loss values") {
    auto boxt = [](double a, double b, double c, double d) {
        return Tensor::make({4}, {a, b, c, d});
    };
    Box same{0.1, 0.1, 0.6, 0.6};
    CHECK(giou_loss(boxt(0.1, 0.1, 0.6, 0.6), same)->item() == doctest::Approx(0.0).epsilon(1e-12));

    // [0,0,2,2] vs [1,1,3,3] scaled into the unit square (GIoU is scale-free)
    Box gt{0.25, 0.25, 0.75, 0.75};
    auto pred = boxt(0.0, 0.0, 0.5, 0.5);
    const double giou = 1.0 / 7.0 - 2.0 / 9.0;
    CHECK(giou_loss(pred, gt)->item() == doctest::Approx(1.0 - giou).epsilon(1e-12));

    // far-separated tiny boxes approach loss 2
    Box far_gt{0.99, 0.99, 1.0, 1.0};
    CHECK(giou_loss(boxt(0.0, 0.0, 0.01, 0.01), far_gt)->item() > 1.9);

    // containment: enclosure equals the larger box, penalty vanishes
    Box outer{0.2, 0.2, 0.8, 0.8};
    auto inner = boxt(0.3, 0.3, 0.7, 0.7);
    const double iou = (0.4 * 0.4) / (0.6 * 0.6);
    CHECK(giou_loss(inner, outer)->item() == doctest::Approx(1.0 - iou).epsilon(1e-12));

    CHECK_THROWS_AS(giou_loss(boxt(0.5, 0.1, 0.2, 0.3), same), ContractError);
    Graph::active().clear();
}

TEST_CASE("giou and focal bounds") {
    Rng rng(7);
    for (int i = 0; i < 20; ++i) {
        const double x0 = rng.uniform(0.0, 0.8), y0 = rng.uniform(0.0, 0.8);
        auto pred = Tensor::make(
            {4}, {x0, y0, x0 + rng.uniform(0.05, 0.2), y0 + rng.uniform(0.05, 0.2)});
        Box gt{0.4, 0.4, 0.6, 0.6};
        const double v = giou_loss(pred, gt)->item();
        CHECK(v >= 0.0);
        CHECK(v <= 2.0);
    }
    Graph::active().clear();
}

TEST_CASE("decode thresholds and ordering") {
    HeadConfig hc = tiny_head();
    std::vector<double> quiet(2 * 2 * 6, -40.0);
    auto none = Tensor::make({2, 2, 6}, quiet);
    CHECK(decode(*none, 0.05, hc).empty());

    std::vector<double> two(2 * 2 * 6, -40.0);
    // cell 0: class 0 logit 2.0; cell 3: class 1 logit 3.0
    two[0] = 2.0;
    two[0 + 2] = 0.5;
    two[0 + 3] = 0.5;
    two[0 + 4] = std::log(0.2);
    two[0 + 5] = std::log(0.2);
    double* c3 = two.data() + 3 * 6;
    c3[1] = 3.0;
    c3[2] = 0.5;
    c3[3] = 0.5;
    c3[4] = std::log(0.2);
    c3[5] = std::log(0.2);
    auto pred = Tensor::make({2, 2, 6}, two);
    auto dets = decode(*pred, 0.05, hc);
    REQUIRE(dets.size() == 2);
    CHECK(dets[0].score > dets[1].score);
    CHECK(dets[0].class_id == 1);
}

TEST_CASE("nms keeps the right boxes") {
    auto det = [](double score, int cls, double x0, double y0, double x1, double y1) {
        Detection d;
        d.score = score;
        d.class_id = cls;
        d.box = {x0, y0, x1, y1};
        return d;
    };
    // identical boxes: keep only the higher score
    auto r1 = nms({det(0.9, 0, 0.1, 0.1, 0.3, 0.3), det(0.8, 0, 0.1, 0.1, 0.3, 0.3)}, 0.5);
    REQUIRE(r1.size() == 1);
    CHECK(r1[0].score == doctest::Approx(0.9));

    // disjoint boxes: all kept
    auto r2 = nms({det(0.9, 0, 0.0, 0.0, 0.2, 0.2), det(0.8, 0, 0.5, 0.5, 0.7, 0.7)}, 0.5);
    CHECK(r2.size() == 2);

    // chain: A overlaps B, B overlaps C, A disjoint from C -> keep {A, C}
    auto a = det(0.9, 0, 0.00, 0.0, 0.40, 0.4);
    auto b = det(0.8, 0, 0.22, 0.0, 0.62, 0.4);
    auto c = det(0.7, 0, 0.44, 0.0, 0.84, 0.4);
    auto r3 = nms({b, c, a}, 0.25);
    REQUIRE(r3.size() == 2);
    CHECK(r3[0].score == doctest::Approx(0.9));
    CHECK(r3[1].score == doctest::Approx(0.7));

    // different classes never suppress each other
    auto r4 = nms({det(0.9, 0, 0.1, 0.1, 0.3, 0.3), det(0.8, 1, 0.1, 0.1, 0.3, 0.3)}, 0.5);
    CHECK(r4.size() == 2);

    // output pairwise same-class IoU below the threshold
    for (std::size_t i = 0; i < r3.size(); ++i)
        for (std::size_t j = i + 1; j < r3.size(); ++j) {
            if (r3[i].class_id != r3[j].class_id) continue;
            const double inter = intersection_area(r3[i].box, r3[j].box);
            const double u = r3[i].box.area() + r3[j].box.area() - inter;
            CHECK(inter / u <= 0.25 + 1e-12);
        }
}

TEST_CASE("detection loss gradients match finite differences") {
    HeadConfig hc = tiny_head();
    DetectionHead head(hc, 11);
    Rng rng(9);
    auto x = random_tensor({2, 2, 2, 8}, rng);
    std::vector<TargetGrid> targets;
    for (int i = 0; i < 2; ++i) {
        auto scene = scene_with_boxes({{i % 2, Box{0.1, 0.1, 0.4, 0.45}},
                                       {1, Box{0.55, 0.6, 0.9, 0.95}}});
        targets.push_back(assign_targets(scene, hc));
    }
    auto loss_fn = [&]() {
        return detection_loss(head.forward(x, true), targets, 0.25, 2.0).total;
    };
    auto failures = testutil::check_gradients(loss_fn, head.named_params());
    CHECK(failures.empty());
}

TEST_CASE("train_head reduces the loss and keeps frozen parts byte-stable") {
    ModelOptions mo;
    mo.backbone_cfg.image_size = 16;
    mo.backbone_cfg.patch_size = 8;
    mo.backbone_cfg.embed_dim = 16;
    mo.backbone_cfg.num_layers = 2;
    mo.backbone_cfg.num_heads = 2;
    mo.backbone_cfg.injection_layers = {0};
    mo.spem_cfg.reduced_dim = 4;
    mo.spem_cfg.num_prototypes = 3;
    mo.spem_cfg.kmeans_n_init = 2;
    mo.master_seed = 21;
    ModelState model = make_model(mo);

    std::vector<datagen::LabeledScene> scenes;
    for (int i = 0; i < 16; ++i)
        scenes.push_back(datagen::generate_scene(datagen::DomainSpec::source_default(), 16, 1,
                                                 derive_seed(4, "hd", i)));
    spem::PcaModel pca;
    spem::AssignmentMap assignments;
    model.bank = spem::build_prompt_bank(scenes, *model.encoder, mo.spem_cfg, 21, &pca,
                                         &assignments);
    model.pca = std::move(pca);
    model.assignments = std::move(assignments);

    std::vector<std::vector<double>> frozen_before;
    for (auto& [n, p] : model.encoder->named_params()) frozen_before.push_back(p->values());
    const std::vector<double> prompts_before = model.bank->prompts_cache->values();

    TrainHeadOptions opt;
    opt.schedule.total_epochs = 12;
    opt.schedule.base_lr = 3e-3;
    opt.batch_size = 4;
    auto rows = train_head(model, scenes, opt, "");
    REQUIRE(rows.size() == 12);
    CHECK(rows.back().loss_total < rows.front().loss_total);

    std::size_t i = 0;
    for (auto& [n, p] : model.encoder->named_params())
        CHECK(p->values() == frozen_before[i++]);
    CHECK(model.bank->prompts_cache->values() == prompts_before);

    // same seed, fresh run: identical loss curve
    ModelState model2 = make_model(mo);
    model2.bank = spem::build_prompt_bank(scenes, *model2.encoder, mo.spem_cfg, 21, nullptr,
                                          nullptr);
    model2.assignments = model.assignments;
    auto rows2 = train_head(model2, scenes, opt, "");
    REQUIRE(rows2.size() == rows.size());
    for (std::size_t k = 0; k < rows.size(); ++k)
        CHECK(rows2[k].loss_total == rows[k].loss_total);

    // inference yields per-scene detection lists
    auto dets = run_detector(model, scenes, 0.05, 0.5);
    CHECK(dets.size() == scenes.size());
}
