#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dcl/config_json.hpp"
#include "dcl/trainer.hpp"

using namespace dcl;

namespace {

TrainConfig tiny_config() {
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 4;
    cfg.base_lr = 1e-3;
    cfg.weight_decay = 0.01;
    cfg.seed = 3;
    cfg.data.num_images = 8;
    cfg.data.image_size = 16;
    cfg.data.rng_seed = 5;
    cfg.encoder.image_size = 16;
    cfg.encoder.patch_size = 8;  // 2x2 token grid
    cfg.encoder.embed_dim = 16;
    cfg.encoder.depth = 1;
    cfg.encoder.heads = 2;
    cfg.encoder.proj_hidden = 16;
    cfg.encoder.proj_out = 8;
    return cfg;
}

Batch batch_for(const TrainConfig& cfg, const Dataset& ds, uint64_t seed) {
    Rng rng(seed);
    return make_batch(ds.images, cfg.batch_size, cfg.augment_params, rng);
}

std::vector<std::vector<double>> snapshot(const Model& model, const std::string& prefix) {
    std::vector<std::vector<double>> out;
    for (const auto& [name, p] : model.parameters()) {
        if (name.rfind(prefix, 0) != 0) continue;
        std::vector<double> v(p.size());
        for (size_t i = 0; i < p.size(); ++i) v[i] = p[i];
        out.push_back(std::move(v));
    }
    return out;
}

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("train config validation") {
    TrainConfig cfg;  // defaults
    CHECK_NOTHROW(cfg.validate());

    TrainConfig c = tiny_config();
    CHECK_NOTHROW(c.validate());
    c.epochs = 0;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = tiny_config();
    c.batch_size = 1;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = tiny_config();
    c.batch_size = 100;  // dataset has 8 images
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = tiny_config();
    c.loss_params.recon_weight = 0.1;  // no decoder configured
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = tiny_config();
    c.encoder.use_cls_token = false;
    c.aggregation = Aggregation::cls;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = tiny_config();
    c.data.image_size = 32;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = tiny_config();
    c.pairing_params.pair_feature = FeatureSource::global_head;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = tiny_config();
    c.base_lr = 0.0;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("learning rate schedule endpoints") {
    TrainConfig cfg = tiny_config();
    cfg.base_lr = 0.02;

    cfg.schedule = LrSchedule::cosine;
    CHECK(scheduled_lr(cfg, 0, 10) == 0.02);
    CHECK(scheduled_lr(cfg, 9, 10) <= 0.01 * 0.02);
    CHECK(scheduled_lr(cfg, 5, 10) < 0.02);
    CHECK(scheduled_lr(cfg, 5, 10) > 0.0);
    CHECK(scheduled_lr(cfg, 0, 1) == 0.02);  // degenerate single step

    cfg.schedule = LrSchedule::constant;
    for (size_t s = 0; s < 10; ++s) CHECK(scheduled_lr(cfg, s, 10) == 0.02);
}

TEST_CASE("optimizer matches a hand-stepped reference") {
    Tensor p = from_data({2}, {1.0, -2.0});
    p.set_requires_grad(true);
    Tensor c = from_data({2}, {0.5, -1.5});
    const double lr = 0.01, b1 = 0.9, b2 = 0.999, eps = 1e-8, wd = 0.1;
    AdamW opt({{"p", p}}, b1, b2, eps, wd);

    double ref[2] = {1.0, -2.0};
    double m[2] = {0, 0}, v[2] = {0, 0};
    for (int t = 1; t <= 3; ++t) {
        {
            Tape tape;
            Tensor loss = sum_all(mul(p, c));
            tape.backward(loss);
        }
        opt.step(lr);
        for (int i = 0; i < 2; ++i) {
            const double g = c[static_cast<size_t>(i)];
            m[i] = b1 * m[i] + (1 - b1) * g;
            v[i] = b2 * v[i] + (1 - b2) * g * g;
            const double mhat = m[i] / (1 - std::pow(b1, t));
            const double vhat = v[i] / (1 - std::pow(b2, t));
            ref[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + wd * ref[i]);
        }
    }
    CHECK(opt.steps_taken() == 3);
    CHECK(p[0] == ref[0]);
    CHECK(p[1] == ref[1]);
}

TEST_CASE("optimizer skips parameters without gradients") {
    Tensor untouched = from_data({2}, {0.7, -0.3});
    untouched.set_requires_grad(true);
    Tensor zero_grad = from_data({2}, {1.1, 2.2});
    zero_grad.set_requires_grad(true);

    {  // gives zero_grad an allocated all-zero gradient
        Tape tape;
        Tensor loss = sum_all(mul(zero_grad, zeros({2})));
        tape.backward(loss);
    }
    REQUIRE(zero_grad.has_grad());
    REQUIRE_FALSE(untouched.has_grad());

    SUBCASE("no gradient tensor means no update even with decay") {
        AdamW opt({{"u", untouched}}, 0.9, 0.999, 1e-8, 0.5);
        opt.step(0.1);
        CHECK(untouched[0] == 0.7);
        CHECK(untouched[1] == -0.3);
    }
    SUBCASE("zero gradient and zero decay leave the value untouched") {
        AdamW opt({{"z", zero_grad}}, 0.9, 0.999, 1e-8, 0.0);
        opt.step(0.1);
        CHECK(zero_grad[0] == 1.1);
        CHECK(zero_grad[1] == 2.2);
    }
    SUBCASE("zero gradient with decay still decays") {
        AdamW opt({{"z", zero_grad}}, 0.9, 0.999, 1e-8, 0.5);
        opt.step(0.1);
        CHECK(zero_grad[0] == 1.1 - 0.1 * 0.5 * 1.1);
    }
}

TEST_CASE("simclr reports a zero dense component") {
    TrainConfig cfg = tiny_config();
    cfg.method = Method::simclr;
    Dataset ds = generate_dataset(cfg.data);
    Model model = Model::create(cfg);
    AdamW opt(model.parameters(), 0.9, 0.999, 1e-8, cfg.weight_decay);
    Rng prng(1);

    LossBreakdown bd = train_step(model, opt, batch_for(cfg, ds, 7), cfg, 1e-3, prng);
    CHECK(bd.dense_loss == 0.0);
    CHECK(bd.dense_weight == 0.0);
    CHECK(bd.recon_loss == 0.0);
    CHECK(bd.global_loss > 0.0);
    CHECK(bd.total == bd.global_loss);
    CHECK(std::isfinite(bd.total));
}

TEST_CASE("zero reconstruction weight leaves the decoder untouched") {
    TrainConfig cfg = tiny_config();
    cfg.method = Method::denseclpp;
    DecoderConfig dec;
    dec.kind = DecoderKind::conv_bicubic;
    dec.channels_per_layer = 4;
    dec.upsample_factor = 2;
    cfg.decoder = dec;
    cfg.loss_params.recon_weight = 0.0;

    Dataset ds = generate_dataset(cfg.data);
    Model model = Model::create(cfg);
    REQUIRE(model.decoder.has_value());
    auto before_dec = snapshot(model, "decoder.");
    auto before_enc = snapshot(model, "encoder.");
    REQUIRE_FALSE(before_dec.empty());

    AdamW opt(model.parameters(), 0.9, 0.999, 1e-8, cfg.weight_decay);
    Rng prng(2);
    train_step(model, opt, batch_for(cfg, ds, 9), cfg, 1e-3, prng);

    CHECK(snapshot(model, "decoder.") == before_dec);
    CHECK(snapshot(model, "encoder.") != before_enc);
    for (const auto& [name, p] : model.parameters()) {
        if (name.rfind("decoder.", 0) == 0) CHECK_FALSE(p.has_grad());
    }

    // with a positive weight the same step moves the decoder
    cfg.loss_params.recon_weight = 0.5;
    Model model2 = Model::create(cfg);
    auto before2 = snapshot(model2, "decoder.");
    AdamW opt2(model2.parameters(), 0.9, 0.999, 1e-8, cfg.weight_decay);
    Rng prng2(2);
    LossBreakdown bd = train_step(model2, opt2, batch_for(cfg, ds, 9), cfg, 1e-3, prng2);
    CHECK(bd.recon_loss > 0.0);
    CHECK(snapshot(model2, "decoder.") != before2);
}

TEST_CASE("a training step is deterministic") {
    TrainConfig cfg = tiny_config();
    cfg.method = Method::denseclpp;
    cfg.pairing_params.cross_view_negative_count = 1;
    Dataset ds = generate_dataset(cfg.data);

    Model m1 = Model::create(cfg);
    Model m2 = Model::create(cfg);
    AdamW o1(m1.parameters(), 0.9, 0.999, 1e-8, cfg.weight_decay);
    AdamW o2(m2.parameters(), 0.9, 0.999, 1e-8, cfg.weight_decay);
    Rng p1(11), p2(11);

    LossBreakdown b1 = train_step(m1, o1, batch_for(cfg, ds, 13), cfg, 1e-3, p1);
    LossBreakdown b2 = train_step(m2, o2, batch_for(cfg, ds, 13), cfg, 1e-3, p2);
    CHECK(b1.global_loss == b2.global_loss);
    CHECK(b1.dense_loss == b2.dense_loss);
    CHECK(b1.total == b2.total);

    auto s1 = snapshot(m1, "");
    auto s2 = snapshot(m2, "");
    CHECK(s1 == s2);
}

TEST_CASE("every method takes a finite step") {
    Dataset base_ds = [] {
        TrainConfig cfg = tiny_config();
        return generate_dataset(cfg.data);
    }();

    auto run = [&](Method m, void (*tweak)(TrainConfig&)) {
        TrainConfig cfg = tiny_config();
        cfg.method = m;
        if (tweak) tweak(cfg);
        Model model = Model::create(cfg);
        AdamW opt(model.parameters(), 0.9, 0.999, 1e-8, cfg.weight_decay);
        Rng prng(21);
        return train_step(model, opt, batch_for(cfg, base_ds, 17), cfg, 1e-3, prng);
    };

    LossBreakdown simclr = run(Method::simclr, nullptr);
    CHECK(std::isfinite(simclr.total));

    LossBreakdown densecl = run(Method::densecl, nullptr);
    CHECK(std::isfinite(densecl.total));
    CHECK(densecl.dense_loss > 0.0);

    LossBreakdown dpp = run(Method::denseclpp, +[](TrainConfig& c) {
        c.pairing_params.cross_view_negative_count = 1;
        c.pairing_params.positives_per_anchor = 2;
    });
    CHECK(std::isfinite(dpp.total));
    CHECK(dpp.dense_loss > 0.0);

    LossBreakdown dpp_all = run(Method::denseclpp, +[](TrainConfig& c) {
        c.pairing_params.use_all_dense_negatives = true;
    });
    CHECK(std::isfinite(dpp_all.total));
    CHECK(dpp_all.dense_loss > 0.0);

    LossBreakdown guided = run(Method::denseclpp_guided, +[](TrainConfig& c) {
        c.pairing_params.candidate_set_count = 2;
    });
    CHECK(std::isfinite(guided.total));
    CHECK(guided.dense_loss > 0.0);

    LossBreakdown sym = run(Method::denseclpp, +[](TrainConfig& c) {
        c.symmetrize_loss = true;
    });
    CHECK(std::isfinite(sym.total));
    CHECK(sym.dense_loss > 0.0);
}

TEST_CASE("pairing settings cannot steer a run without dense or recon terms") {
    TrainConfig a = tiny_config();
    a.method = Method::denseclpp;
    a.loss_params.dense_weight = 0.0;  // dense term structurally off

    TrainConfig b = a;
    b.pairing_params.candidate_set_count = 4;
    b.pairing_params.cross_view_negative_count = 2;
    b.pairing_params.positives_per_anchor = 3;
    b.pairing_params.rng_seed = 999;
    b.pairing_params.use_all_dense_negatives = true;

    TrainResult ra = pretrain(a, "tmp_run_a");
    TrainResult rb = pretrain(b, "tmp_run_b");
    REQUIRE(ra.history.size() == rb.history.size());
    for (size_t i = 0; i < ra.history.size(); ++i) {
        CHECK(ra.history[i].total == rb.history[i].total);
        CHECK(ra.history[i].global_loss == rb.history[i].global_loss);
    }
    CHECK(snapshot(ra.model, "") == snapshot(rb.model, ""));
    std::filesystem::remove_all("tmp_run_a");
    std::filesystem::remove_all("tmp_run_b");
}

TEST_CASE("pretraining writes deterministic metrics and decreasing loss") {
    TrainConfig cfg = tiny_config();
    cfg.method = Method::denseclpp;
    cfg.epochs = 8;
    cfg.base_lr = 3e-3;
    cfg.data.num_images = 16;
    cfg.batch_size = 4;

    TrainResult r1 = pretrain(cfg, "tmp_run_c");
    const size_t spe = cfg.data.num_images / cfg.batch_size;
    REQUIRE(r1.history.size() == cfg.epochs * spe);

    // metrics file: header plus one flushed row per step, bytes reproducible
    std::string text1 = slurp(r1.metrics_path);
    REQUIRE(!text1.empty());
    std::istringstream lines(text1);
    std::string first;
    std::getline(lines, first);
    CHECK(first == "step,epoch,lr,global_loss,dense_loss,recon_loss,total");
    size_t rows = 0;
    for (std::string line; std::getline(lines, line);) rows += !line.empty();
    CHECK(rows == r1.history.size());

    TrainResult r2 = pretrain(cfg, "tmp_run_d");
    CHECK(slurp(r2.metrics_path) == text1);
    CHECK(snapshot(r2.model, "") == snapshot(r1.model, ""));

    double first_epoch = 0.0, last_epoch = 0.0;
    for (size_t s = 0; s < spe; ++s) {
        first_epoch += r1.history[s].total;
        last_epoch += r1.history[(cfg.epochs - 1) * spe + s].total;
    }
    CHECK(last_epoch < first_epoch);

    std::filesystem::remove_all("tmp_run_c");
    std::filesystem::remove_all("tmp_run_d");
}

TEST_CASE("checkpoints rebuild the exact model") {
    TrainConfig cfg = tiny_config();
    cfg.method = Method::densecl;
    cfg.epochs = 1;

    TrainResult run = pretrain(cfg, "tmp_run_e");
    LoadedCheckpoint loaded = load_checkpoint(run.checkpoint_path);
    CHECK(loaded.config.method == Method::densecl);
    CHECK(loaded.config.encoder.embed_dim == cfg.encoder.embed_dim);
    CHECK(loaded.config.data.num_images == cfg.data.num_images);

    CHECK(snapshot(loaded.model, "") == snapshot(run.model, ""));

    Dataset ds = generate_dataset(cfg.data);
    Tensor f1 = extract_global_features(run.model, ds.images);
    Tensor f2 = extract_global_features(loaded.model, ds.images);
    REQUIRE(f1.shape() == f2.shape());
    for (size_t i = 0; i < f1.size(); ++i) CHECK(std::abs(f1[i] - f2[i]) < 1e-12);
    std::filesystem::remove_all("tmp_run_e");

    CHECK_THROWS_AS(load_checkpoint("no_such_checkpoint.json"), std::runtime_error);
    {
        std::ofstream f("tmp_ckpt_bad.json");
        f << "{\"version\": 2}";
    }
    CHECK_THROWS_AS(load_checkpoint("tmp_ckpt_bad.json"), std::runtime_error);
    std::remove("tmp_ckpt_bad.json");
}

TEST_CASE("feature extraction is chunk invariant and aggregation aware") {
    TrainConfig cfg = tiny_config();
    Dataset ds = generate_dataset(cfg.data);
    Model model = Model::create(cfg);

    Tensor whole = extract_global_features(model, ds.images, Aggregation::gap, 64);
    Tensor pieces = extract_global_features(model, ds.images, Aggregation::gap, 3);
    REQUIRE(whole.shape() == pieces.shape());
    for (size_t i = 0; i < whole.size(); ++i) CHECK(whole[i] == pieces[i]);

    Tensor cls = extract_global_features(model, ds.images, Aggregation::cls, 64);
    bool differs = false;
    for (size_t i = 0; i < whole.size(); ++i) differs = differs || cls[i] != whole[i];
    CHECK(differs);
}

TEST_CASE("a poisoned parameter aborts the step with diagnostics") {
    TrainConfig cfg = tiny_config();
    Dataset ds = generate_dataset(cfg.data);
    Model model = Model::create(cfg);
    model.parameters()[0].second[0] = std::numeric_limits<double>::quiet_NaN();

    AdamW opt(model.parameters(), 0.9, 0.999, 1e-8, cfg.weight_decay);
    Rng prng(3);
    try {
        train_step(model, opt, batch_for(cfg, ds, 19), cfg, 1e-3, prng);
        FAIL("expected a non-finite abort");
    } catch (const std::runtime_error& e) {
        const std::string what = e.what();
        CHECK(what.find("non-finite") != std::string::npos);
        CHECK(what.find("max_global_logit") != std::string::npos);
    }
}

TEST_CASE("config json round trips and rejects unknown keys") {
    TrainConfig cfg = tiny_config();
    cfg.method = Method::denseclpp_guided;
    cfg.schedule = LrSchedule::constant;
    cfg.symmetrize_loss = true;
    cfg.global_negatives = GlobalNegativeMode::one_per_image;
    cfg.aggregation = Aggregation::cls;
    cfg.loss_params.temperature = 0.13;
    cfg.loss_params.recon_weight = 0.25;
    cfg.pairing_params.candidate_set_count = 3;
    cfg.pairing_params.pair_feature = FeatureSource::dense_head;
    cfg.augment_params.blur_prob = 0.9;
    DecoderConfig dec;
    dec.kind = DecoderKind::transformer;
    dec.latent_dim = 24;
    dec.heads = 4;
    cfg.decoder = dec;

    nlohmann::json j = train_config_to_json(cfg);
    TrainConfig back = train_config_from_json(j);
    CHECK(back.method == cfg.method);
    CHECK(back.schedule == cfg.schedule);
    CHECK(back.symmetrize_loss == cfg.symmetrize_loss);
    CHECK(back.global_negatives == cfg.global_negatives);
    CHECK(back.aggregation == cfg.aggregation);
    CHECK(back.loss_params.temperature == cfg.loss_params.temperature);
    CHECK(back.loss_params.recon_weight == cfg.loss_params.recon_weight);
    CHECK(back.pairing_params.candidate_set_count == 3);
    CHECK(back.pairing_params.pair_feature == FeatureSource::dense_head);
    CHECK(back.augment_params.blur_prob == 0.9);
    REQUIRE(back.decoder.has_value());
    CHECK(back.decoder->kind == DecoderKind::transformer);
    CHECK(back.decoder->latent_dim == 24);
    CHECK(back.data.num_images == cfg.data.num_images);
    CHECK(back.encoder.patch_size == cfg.encoder.patch_size);

    nlohmann::json bad = j;
    bad["bogus"] = 1;
    CHECK_THROWS_AS(train_config_from_json(bad), std::invalid_argument);
    bad = j;
    bad["loss"]["extra"] = 2;
    CHECK_THROWS_AS(train_config_from_json(bad), std::invalid_argument);
    bad = j;
    bad["pairing"]["pair_feature"] = "imaginary";
    CHECK_THROWS_AS(train_config_from_json(bad), std::invalid_argument);
    bad = j;
    bad.erase("version");
    CHECK_THROWS_AS(train_config_from_json(bad), std::invalid_argument);
    bad = j;
    bad["version"] = 2;
    CHECK_THROWS_AS(train_config_from_json(bad), std::invalid_argument);
    bad = j;
    bad["epochs"] = "many";
    CHECK_THROWS_AS(train_config_from_json(bad), std::invalid_argument);
}
