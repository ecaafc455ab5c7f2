#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <numeric>
#include <stdexcept>

#include "dcl/encoder.hpp"
#include "dcl/tensor.hpp"

using namespace dcl;

namespace {

EncoderConfig tiny_config() {
    EncoderConfig cfg;
    cfg.image_size = 8;
    cfg.patch_size = 4;
    cfg.channels = 1;
    cfg.embed_dim = 8;
    cfg.depth = 1;
    cfg.heads = 2;
    cfg.proj_hidden = 8;
    cfg.proj_out = 6;
    return cfg;
}

Tensor sequential_image(size_t b, size_t h, size_t c) {
    std::vector<double> data(b * h * h * c);
    std::iota(data.begin(), data.end(), 0.0);
    for (double& v : data) v /= static_cast<double>(data.size());  // keep in [0,1]
    return from_data({b, h, h, c}, data);
}

}  // namespace

TEST_CASE("patchify: 4x4 single-channel image with patch 2") {
    std::vector<double> px(16);
    std::iota(px.begin(), px.end(), 0.0);
    Tensor img = from_data({1, 4, 4, 1}, px);
    Tensor patches = patchify(img, 2);
    REQUIRE(patches.shape() == std::vector<size_t>{1, 4, 4});

    // each patch is its 2x2 block read row-major
    std::vector<double> want = {0, 1, 4, 5, 2, 3, 6, 7, 8, 9, 12, 13, 10, 11, 14, 15};
    for (size_t i = 0; i < 16; ++i) CHECK(patches[i] == want[i]);

    Tensor back = unpatchify(patches, 2);
    REQUIRE(back.shape() == img.shape());
    for (size_t i = 0; i < 16; ++i) CHECK(back[i] == img[i]);
}

TEST_CASE("patchify: constant image gives constant patch vectors") {
    Tensor img = full({2, 4, 4, 3}, 0.25);
    Tensor patches = patchify(img, 2);
    for (size_t i = 0; i < patches.size(); ++i) CHECK(patches[i] == 0.25);
}

TEST_CASE("patchify round-trips on random multi-channel batches") {
    Rng rng(17);
    Tensor img = uniform({3, 8, 8, 3}, rng, 0.0, 1.0);
    Tensor back = unpatchify(patchify(img, 4), 4);
    REQUIRE(back.shape() == img.shape());
    for (size_t i = 0; i < img.size(); ++i) CHECK(back[i] == img[i]);
}

TEST_CASE("patchify validates its input") {
    CHECK_THROWS_AS(patchify(zeros({1, 6, 6, 1}), 4), std::invalid_argument);
    CHECK_THROWS_AS(patchify(zeros({6, 6, 1}), 2), std::invalid_argument);
    CHECK_THROWS_AS(unpatchify(zeros({1, 3, 4}), 2), std::invalid_argument);
}

TEST_CASE("encoder output shapes follow the config") {
    EncoderConfig cfg = tiny_config();
    Rng rng(1);
    Encoder enc(cfg, rng);
    Tensor img = sequential_image(3, cfg.image_size, cfg.channels);
    Encoder::Result res = enc.encode(img);
    CHECK(res.dense.features.shape() == std::vector<size_t>{3, 2, 2, 8});
    CHECK(res.dense.batch == 3);
    CHECK(res.dense.grid == 2);
    REQUIRE(res.cls.has_value());
    CHECK(res.cls->shape() == std::vector<size_t>{3, 8});

    cfg.use_cls_token = false;
    Rng rng2(1);
    Encoder enc2(cfg, rng2);
    Encoder::Result res2 = enc2.encode(img);
    CHECK_FALSE(res2.cls.has_value());
    CHECK(res2.dense.features.shape() == std::vector<size_t>{3, 2, 2, 8});
}

TEST_CASE("encoder config validation") {
    EncoderConfig cfg = tiny_config();
    cfg.patch_size = 3;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = tiny_config();
    cfg.heads = 3;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("encoder is deterministic given the seed") {
    EncoderConfig cfg = tiny_config();
    Rng r1(9), r2(9);
    Encoder a(cfg, r1), b(cfg, r2);
    Tensor img = sequential_image(2, cfg.image_size, cfg.channels);
    Tensor da = a.encode(img).dense.features;
    Tensor db = b.encode(img).dense.features;
    for (size_t i = 0; i < da.size(); ++i) CHECK(da[i] == db[i]);
}

TEST_CASE("permuting the batch permutes encoder outputs exactly") {
    EncoderConfig cfg = tiny_config();
    Rng rng(33);
    Encoder enc(cfg, rng);
    Rng drng(5);
    Tensor imgs = uniform({3, cfg.image_size, cfg.image_size, cfg.channels}, drng, 0.0, 1.0);

    // swap samples 0 and 2
    std::vector<double> perm_data(imgs.size());
    size_t stride = imgs.size() / 3;
    std::vector<size_t> perm = {2, 1, 0};
    for (size_t b = 0; b < 3; ++b)
        std::copy(imgs.data().begin() + perm[b] * stride, imgs.data().begin() + (perm[b] + 1) * stride,
                  perm_data.begin() + b * stride);
    Tensor permuted = from_data(imgs.shape(), perm_data);

    Encoder::Result base = enc.encode(imgs);
    Encoder::Result swapped = enc.encode(permuted);
    size_t dstride = base.dense.features.size() / 3;
    for (size_t b = 0; b < 3; ++b)
        for (size_t i = 0; i < dstride; ++i)
            CHECK(swapped.dense.features[b * dstride + i] ==
                  base.dense.features[perm[b] * dstride + i]);
    for (size_t b = 0; b < 3; ++b)
        for (size_t c = 0; c < 8; ++c)
            CHECK((*swapped.cls)(b, c) == (*base.cls)(perm[b], c));
}

TEST_CASE("gradient flows through the encoder to the input image") {
    EncoderConfig cfg = tiny_config();
    Rng rng(13);
    Encoder enc(cfg, rng);
    Rng drng(77);
    Tensor img = uniform({1, cfg.image_size, cfg.image_size, cfg.channels}, drng, 0.1, 0.9);
    double err = grad_check(
        [&](const Tensor& x) { return mean_all(enc.encode(x).dense.features); }, img);
    CHECK(err < 1e-4);
}

TEST_CASE("gradient flows through the encoder to a deep parameter") {
    EncoderConfig cfg = tiny_config();
    Rng rng(13);
    Encoder enc(cfg, rng);
    Rng drng(78);
    Tensor img = uniform({2, cfg.image_size, cfg.image_size, cfg.channels}, drng, 0.1, 0.9);

    auto params = enc.parameters();
    Tensor wq;
    for (auto& [name, t] : params)
        if (name == "block0.wq") wq = t;
    REQUIRE(wq.valid());

    std::vector<double> analytic;
    {
        Tape tape;
        Tensor loss = mean_all(enc.encode(img).dense.features);
        tape.backward(loss);
        analytic = wq.grad();
    }
    REQUIRE(analytic.size() == wq.size());

    const double h = 1e-5;
    double worst = 0.0;
    for (size_t i = 0; i < wq.size(); ++i) {
        double saved = wq[i];
        wq[i] = saved + h;
        double plus = mean_all(enc.encode(img).dense.features).value();
        wq[i] = saved - h;
        double minus = mean_all(enc.encode(img).dense.features).value();
        wq[i] = saved;
        double numeric = (plus - minus) / (2.0 * h);
        double rel = std::abs(analytic[i] - numeric) /
                     std::max(1.0, std::abs(analytic[i]) + std::abs(numeric));
        worst = std::max(worst, rel);
    }
    CHECK(worst < 1e-4);
}

TEST_CASE("GAP aggregation: constant field, basis vectors, brute force") {
    // constant field: every grid vector c -> GAP == c
    DenseFeatureGrid grid;
    grid.batch = 2;
    grid.grid = 2;
    std::vector<double> data;
    for (size_t b = 0; b < 2; ++b)
        for (size_t cell = 0; cell < 4; ++cell)
            for (size_t d = 0; d < 3; ++d) data.push_back(b == 0 ? 0.5 : -1.5);
    grid.features = from_data({2, 2, 2, 3}, data);
    GlobalFeature gap = aggregate_global(grid, std::nullopt, Aggregation::gap);
    CHECK(gap.features.shape() == std::vector<size_t>{2, 3});
    for (size_t c = 0; c < 3; ++c) {
        CHECK(gap.features(0, c) == doctest::Approx(0.5));
        CHECK(gap.features(1, c) == doctest::Approx(-1.5));
    }

    // standard basis e1..e4 on an S=2 grid -> GAP = [0.25, 0.25, 0.25, 0.25]
    DenseFeatureGrid basis;
    basis.batch = 1;
    basis.grid = 2;
    std::vector<double> bd(16, 0.0);
    for (size_t cell = 0; cell < 4; ++cell) bd[cell * 4 + cell] = 1.0;
    basis.features = from_data({1, 2, 2, 4}, bd);
    GlobalFeature g2 = aggregate_global(basis, std::nullopt, Aggregation::gap);
    for (size_t c = 0; c < 4; ++c) CHECK(g2.features[c] == doctest::Approx(0.25));

    // random grid matches the brute-force mean to 1e-12
    Rng rng(3);
    DenseFeatureGrid rnd;
    rnd.batch = 3;
    rnd.grid = 4;
    rnd.features = uniform({3, 4, 4, 5}, rng, -1.0, 1.0);
    GlobalFeature g3 = aggregate_global(rnd, std::nullopt, Aggregation::gap);
    for (size_t b = 0; b < 3; ++b)
        for (size_t c = 0; c < 5; ++c) {
            double s = 0.0;
            for (size_t cell = 0; cell < 16; ++cell) s += rnd.features[(b * 16 + cell) * 5 + c];
            CHECK(std::abs(g3.features(b, c) - s / 16.0) < 1e-12);
        }
}

TEST_CASE("GAP commutes with grid-position permutations") {
    Rng rng(41);
    DenseFeatureGrid grid;
    grid.batch = 2;
    grid.grid = 2;
    grid.features = uniform({2, 2, 2, 3}, rng, -1.0, 1.0);

    Rng prng(4);
    std::vector<size_t> perm = {0, 1, 2, 3};
    prng.shuffle(perm);
    std::vector<double> pd(grid.features.size());
    for (size_t b = 0; b < 2; ++b)
        for (size_t cell = 0; cell < 4; ++cell)
            for (size_t c = 0; c < 3; ++c)
                pd[(b * 4 + cell) * 3 + c] = grid.features[(b * 4 + perm[cell]) * 3 + c];
    DenseFeatureGrid shuffled = grid;
    shuffled.features = from_data(grid.features.shape(), pd);

    GlobalFeature a = aggregate_global(grid, std::nullopt, Aggregation::gap);
    GlobalFeature b = aggregate_global(shuffled, std::nullopt, Aggregation::gap);
    for (size_t i = 0; i < a.features.size(); ++i)
        CHECK(std::abs(a.features[i] - b.features[i]) < 1e-12);
}

TEST_CASE("CLS aggregation returns the CLS embedding and validates presence") {
    DenseFeatureGrid grid;
    grid.batch = 2;
    grid.grid = 2;
    grid.features = zeros({2, 2, 2, 3});
    Tensor cls = from_data({2, 3}, {1, 2, 3, 4, 5, 6});
    GlobalFeature g = aggregate_global(grid, cls, Aggregation::cls);
    for (size_t i = 0; i < 6; ++i) CHECK(g.features[i] == cls[i]);
    CHECK_THROWS_AS(aggregate_global(grid, std::nullopt, Aggregation::cls),
                    std::invalid_argument);
}

TEST_CASE("projection heads: shape contract and width validation") {
    Rng rng(8);
    Mlp3 head = Mlp3::create(8, 16, 6, rng);
    DenseFeatureGrid grid;
    grid.batch = 2;
    grid.grid = 2;
    grid.features = uniform({2, 2, 2, 8}, rng, -1.0, 1.0);
    DenseFeatureGrid out = project_dense(grid, head);
    CHECK(out.features.shape() == std::vector<size_t>{2, 2, 2, 6});
    CHECK(out.source == FeatureSource::dense_head);

    Mlp3 wrong = Mlp3::create(5, 16, 6, rng);
    CHECK_THROWS_AS(project_dense(grid, wrong), std::invalid_argument);

    GlobalFeature gf;
    gf.features = uniform({2, 8}, rng, -1.0, 1.0);
    GlobalFeature gout = project_global(gf, head);
    CHECK(gout.features.shape() == std::vector<size_t>{2, 6});
    CHECK_THROWS_AS(project_global(gf, wrong), std::invalid_argument);
}

TEST_CASE("dense head is position-wise: permuting cells permutes outputs") {
    Rng rng(23);
    Mlp3 head = Mlp3::create(4, 8, 5, rng);
    DenseFeatureGrid grid;
    grid.batch = 1;
    grid.grid = 2;
    grid.features = uniform({1, 2, 2, 4}, rng, -1.0, 1.0);

    std::vector<size_t> perm = {3, 0, 2, 1};
    std::vector<double> pd(grid.features.size());
    for (size_t cell = 0; cell < 4; ++cell)
        for (size_t c = 0; c < 4; ++c) pd[cell * 4 + c] = grid.features[perm[cell] * 4 + c];
    DenseFeatureGrid shuffled = grid;
    shuffled.features = from_data(grid.features.shape(), pd);

    Tensor base = project_dense(grid, head).features;
    Tensor out = project_dense(shuffled, head).features;
    for (size_t cell = 0; cell < 4; ++cell)
        for (size_t c = 0; c < 5; ++c) CHECK(out[cell * 5 + c] == base[perm[cell] * 5 + c]);
}

TEST_CASE("gradients pass through projection heads") {
    Rng rng(29);
    Mlp3 head = Mlp3::create(6, 10, 4, rng);
    Tensor x = uniform({3, 6}, rng, -1.0, 1.0);
    double err = grad_check([&](const Tensor& t) { return mean_all(head.forward(t)); }, x);
    CHECK(err < 1e-4);

    std::vector<double> analytic;
    {
        Tape tape;
        Tensor loss = mean_all(head.forward(x));
        tape.backward(loss);
        analytic = head.w2.grad();
    }
    REQUIRE(analytic.size() == head.w2.size());
    const double h = 1e-5;
    double worst = 0.0;
    for (size_t i = 0; i < head.w2.size(); ++i) {
        double saved = head.w2[i];
        head.w2[i] = saved + h;
        double plus = mean_all(head.forward(x)).value();
        head.w2[i] = saved - h;
        double minus = mean_all(head.forward(x)).value();
        head.w2[i] = saved;
        double numeric = (plus - minus) / (2.0 * h);
        worst = std::max(worst, std::abs(analytic[i] - numeric) /
                                    std::max(1.0, std::abs(analytic[i]) + std::abs(numeric)));
    }
    CHECK(worst < 1e-4);
}

TEST_CASE("encoder parameter listing is stable and complete") {
    EncoderConfig cfg = tiny_config();
    Rng rng(2);
    Encoder enc(cfg, rng);
    auto params = enc.parameters();
    // patch(2) + cls + pos + depth*16 + final(2)
    CHECK(params.size() == 2 + 1 + 1 + cfg.depth * 16 + 2);
    CHECK(params.front().first == "patch.w");
    CHECK(params.back().first == "final.b");
    for (auto& [name, t] : params) {
        CHECK(t.valid());
        CHECK(t.requires_grad());
    }
}
