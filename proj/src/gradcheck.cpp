#include "dcl/gradcheck.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

#include "dcl/decoder.hpp"
#include "dcl/encoder.hpp"
#include "dcl/losses.hpp"
#include "dcl/pairing.hpp"

namespace dcl {

double max_grad_rel_error(const std::function<Tensor()>& loss, const std::vector<Tensor>& params,
                          size_t probe_cap, double step, Rng& rng) {
    if (!(step > 0.0)) throw std::invalid_argument("max_grad_rel_error: step must be positive");
    if (probe_cap == 0) throw std::invalid_argument("max_grad_rel_error: probe_cap must be >= 1");

    std::vector<std::vector<double>> analytic(params.size());
    {
        Tape tape;
        Tensor y = loss();
        if (y.size() != 1)
            throw std::runtime_error("max_grad_rel_error: loss produced " +
                                     std::to_string(y.size()) + " elements, expected 1");
        tape.backward(y);
        for (size_t p = 0; p < params.size(); ++p) {
            analytic[p].assign(params[p].size(), 0.0);
            if (params[p].has_grad())
                for (size_t i = 0; i < params[p].size(); ++i)
                    analytic[p][i] = params[p].grad()[i];
        }
    }

    double worst = 0.0;
    for (size_t p = 0; p < params.size(); ++p) {
        Tensor t = params[p];
        std::vector<size_t> coords(t.size());
        std::iota(coords.begin(), coords.end(), size_t{0});
        if (coords.size() > probe_cap) {
            rng.shuffle(coords);
            coords.resize(probe_cap);
        }
        for (size_t i : coords) {
            const double saved = t[i];
            t[i] = saved + step;
            const double plus = loss().value();
            t[i] = saved - step;
            const double minus = loss().value();
            t[i] = saved;
            if (!std::isfinite(plus) || !std::isfinite(minus))
                throw std::runtime_error("max_grad_rel_error: non-finite loss at a probe point");
            const double numeric = (plus - minus) / (2.0 * step);
            const double rel = std::abs(analytic[p][i] - numeric) /
                               std::max(1.0, std::abs(analytic[p][i]) + std::abs(numeric));
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

namespace {

constexpr double kStep = 1e-5;
constexpr size_t kLossCap = 64;    // loss tensors are small: probe everything
constexpr size_t kModuleCap = 16;  // modules have thousands of weights: sample
constexpr uint64_t kSuiteSalt = 0x6672616473756974ull;

Tensor rand_tensor(std::vector<size_t> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    size_t n = 1;
    for (size_t s : shape) n *= s;
    std::vector<double> v(n);
    for (double& x : v) x = rng.uniform(lo, hi);
    return from_data(std::move(shape), std::move(v));
}

Tensor param(std::vector<size_t> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t = rand_tensor(std::move(shape), rng, lo, hi);
    t.set_requires_grad(true);
    return t;
}

Tensor weighted_sum(const Tensor& t, const Tensor& w) { return sum_all(mul(t, w)); }

/// Untaped normalized copy, for fixing selection indices before probing.
Tensor plain_normalized(const Tensor& x) { return l2_normalize(x); }

std::vector<Tensor> values_of(const std::vector<std::pair<std::string, Tensor>>& named) {
    std::vector<Tensor> out;
    out.reserve(named.size());
    for (const auto& [name, t] : named) out.push_back(t);
    return out;
}

double check_global(uint64_t seed, GlobalNegativeMode mode) {
    Rng rng(seed);
    Tensor a = param({3, 6}, rng);
    Tensor b = param({3, 6}, rng);
    auto loss = [&] { return info_nce_global(l2_normalize(a), l2_normalize(b), 0.2, mode); };
    return max_grad_rel_error(loss, {a, b}, kLossCap, kStep, rng);
}

double check_dense_global_negs(uint64_t seed) {
    Rng rng(seed);
    Tensor anchor = param({4, 6}, rng);
    Tensor partner = param({4, 6}, rng);
    Tensor negs = param({3, 6}, rng);
    std::vector<size_t> matches =
        match_positives(plain_normalized(anchor), plain_normalized(partner));
    auto loss = [&] {
        return densecl_dense_loss(l2_normalize(anchor), l2_normalize(partner), l2_normalize(negs),
                                  matches, 0.2);
    };
    return max_grad_rel_error(loss, {anchor, partner, negs}, kLossCap, kStep, rng);
}

double check_dense_dense_negs(uint64_t seed) {
    Rng rng(seed);
    Tensor anchor = param({4, 6}, rng);
    Tensor partner = param({4, 6}, rng);
    Tensor negs = param({5, 6}, rng);
    std::vector<size_t> matches =
        match_positives(plain_normalized(anchor), plain_normalized(partner));
    std::vector<std::vector<size_t>> cross = select_cross_view_negatives(
        plain_normalized(anchor), plain_normalized(partner), matches, 1);
    auto loss = [&] {
        return denseclpp_dense_loss(l2_normalize(anchor), l2_normalize(partner),
                                    l2_normalize(negs), matches, cross, 0.2);
    };
    return max_grad_rel_error(loss, {anchor, partner, negs}, kLossCap, kStep, rng);
}

double check_multi_positive(uint64_t seed) {
    Rng rng(seed);
    Tensor anchor = param({4, 6}, rng);
    Tensor partner = param({4, 6}, rng);
    Tensor negs = param({5, 6}, rng);
    std::vector<size_t> matches =
        match_positives(plain_normalized(anchor), plain_normalized(partner));
    std::vector<std::vector<size_t>> tops =
        select_topk_positives(plain_normalized(anchor), plain_normalized(partner), 2);
    std::vector<std::vector<size_t>> cross = select_cross_view_negatives(
        plain_normalized(anchor), plain_normalized(partner), matches, 1);
    auto loss = [&] {
        return multi_positive_dense_loss(l2_normalize(anchor), l2_normalize(partner), tops,
                                         l2_normalize(negs), cross, 0.2);
    };
    return max_grad_rel_error(loss, {anchor, partner, negs}, kLossCap, kStep, rng);
}

double check_reconstruction(uint64_t seed) {
    Rng rng(seed);
    Tensor images = rand_tensor({2, 4, 4, 3}, rng, 0.0, 1.0);
    // keep every residual far from the absolute-value kink relative to the
    // probe step
    Tensor recon = zeros({2, 4, 4, 3});
    for (size_t i = 0; i < recon.size(); ++i) {
        const double off = rng.uniform(0.2, 0.6);
        recon[i] = images[i] + (rng.bernoulli(0.5) ? off : -off);
    }
    recon.set_requires_grad(true);
    auto loss = [&] { return reconstruction_loss(images, recon); };
    return max_grad_rel_error(loss, {recon}, kLossCap, kStep, rng);
}

double check_combined(uint64_t seed) {
    Rng rng(seed);
    Tensor ga = param({3, 6}, rng);
    Tensor gb = param({3, 6}, rng);
    Tensor anchor = param({4, 6}, rng);
    Tensor partner = param({4, 6}, rng);
    Tensor negs = rand_tensor({5, 6}, rng);
    Tensor images = rand_tensor({1, 4, 4, 3}, rng, 0.0, 1.0);
    Tensor recon = zeros({1, 4, 4, 3});
    for (size_t i = 0; i < recon.size(); ++i) {
        const double off = rng.uniform(0.2, 0.6);
        recon[i] = images[i] + (rng.bernoulli(0.5) ? off : -off);
    }
    recon.set_requires_grad(true);
    std::vector<size_t> matches =
        match_positives(plain_normalized(anchor), plain_normalized(partner));
    LossParams lp;
    lp.temperature = 0.2;
    lp.dense_weight = 0.4;
    lp.recon_weight = 0.3;
    auto loss = [&] {
        Tensor g = info_nce_global(l2_normalize(ga), l2_normalize(gb), lp.temperature,
                                   GlobalNegativeMode::all_other_views);
        Tensor d = denseclpp_dense_loss(l2_normalize(anchor), l2_normalize(partner),
                                        l2_normalize(negs), matches, {}, lp.temperature);
        Tensor r = reconstruction_loss(images, recon);
        return combine(g, d, r, lp).total;
    };
    return max_grad_rel_error(loss, {ga, gb, anchor, partner, recon}, kLossCap, kStep, rng);
}

double check_encoder(uint64_t seed) {
    Rng rng(seed);
    EncoderConfig cfg;
    cfg.image_size = 8;
    cfg.patch_size = 4;
    cfg.embed_dim = 12;
    cfg.depth = 1;
    cfg.heads = 2;
    cfg.proj_hidden = 12;
    cfg.proj_out = 6;
    Encoder enc(cfg, rng);
    Tensor images = rand_tensor({2, 8, 8, 3}, rng, 0.0, 1.0);
    Tensor wg = rand_tensor({2, 12}, rng);
    Tensor wc = rand_tensor({2, 12}, rng);
    auto loss = [&] {
        Encoder::Result r = enc.encode(images);
        Tensor gap = aggregate_global(r.dense, r.cls, Aggregation::gap).features;
        Tensor cls = aggregate_global(r.dense, r.cls, Aggregation::cls).features;
        return add(weighted_sum(gap, wg), weighted_sum(cls, wc));
    };
    return max_grad_rel_error(loss, values_of(enc.parameters()), kModuleCap, kStep, rng);
}

double check_head(uint64_t seed, bool position_wise) {
    Rng rng(seed);
    Mlp3 head = Mlp3::create(12, 12, 6, rng);
    std::vector<std::pair<std::string, Tensor>> named;
    head.collect("head", named);
    std::function<Tensor()> loss;
    Tensor x, w;
    if (position_wise) {
        DenseFeatureGrid grid;
        grid.features = rand_tensor({2, 2, 2, 12}, rng);
        grid.batch = 2;
        grid.grid = 2;
        w = rand_tensor({2, 2, 2, 6}, rng);
        loss = [&head, grid, w] { return weighted_sum(project_dense(grid, head).features, w); };
    } else {
        x = rand_tensor({3, 12}, rng);
        w = rand_tensor({3, 6}, rng);
        loss = [&head, x, w] { return weighted_sum(l2_normalize(head.forward(x)), w); };
    }
    return max_grad_rel_error(loss, values_of(named), kModuleCap, kStep, rng);
}

double check_decoder(uint64_t seed, DecoderKind kind) {
    Rng rng(seed);
    DecoderConfig cfg;
    cfg.kind = kind;
    cfg.channels_per_layer = 4;
    cfg.upsample_factor = 2;
    cfg.latent_dim = 8;
    cfg.depth = 1;
    cfg.heads = 2;
    Decoder dec(cfg, /*in_width=*/6, /*grid=*/2, /*image_size=*/8, /*channels=*/3, rng);
    DenseFeatureGrid grid;
    grid.features = rand_tensor({1, 2, 2, 6}, rng);
    grid.batch = 1;
    grid.grid = 2;
    Tensor w = rand_tensor({1, 8, 8, 3}, rng);
    auto loss = [&] { return weighted_sum(dec.decode(grid), w); };
    return max_grad_rel_error(loss, values_of(dec.parameters()), kModuleCap, kStep, rng);
}

}  // namespace

std::vector<GradCheckCase> gradcheck_suite(size_t seeds_per_case) {
    if (seeds_per_case == 0)
        throw std::invalid_argument("gradcheck_suite: need at least one seed");

    struct Entry {
        const char* name;
        double (*run)(uint64_t);
    };
    const Entry entries[] = {
        {"global_infonce_all_views",
         [](uint64_t s) { return check_global(s, GlobalNegativeMode::all_other_views); }},
        {"global_infonce_one_per_image",
         [](uint64_t s) { return check_global(s, GlobalNegativeMode::one_per_image); }},
        {"dense_global_negatives", check_dense_global_negs},
        {"dense_dense_negatives_cross", check_dense_dense_negs},
        {"dense_multi_positive", check_multi_positive},
        {"reconstruction_mae", check_reconstruction},
        {"combined_objective", check_combined},
        {"encoder_backbone", check_encoder},
        {"projection_head_global", [](uint64_t s) { return check_head(s, false); }},
        {"projection_head_dense", [](uint64_t s) { return check_head(s, true); }},
        {"decoder_conv_bicubic",
         [](uint64_t s) { return check_decoder(s, DecoderKind::conv_bicubic); }},
        {"decoder_conv_transposed",
         [](uint64_t s) { return check_decoder(s, DecoderKind::conv_transposed); }},
        {"decoder_transformer",
         [](uint64_t s) { return check_decoder(s, DecoderKind::transformer); }},
    };

    std::vector<GradCheckCase> out;
    size_t case_index = 0;
    for (const Entry& e : entries) {
        GradCheckCase c;
        c.name = e.name;
        c.seeds = seeds_per_case;
        for (size_t s = 1; s <= seeds_per_case; ++s) {
            const uint64_t seed = derive_seed(kSuiteSalt, case_index * 1000 + s);
            c.worst_rel_error = std::max(c.worst_rel_error, e.run(seed));
        }
        out.push_back(std::move(c));
        ++case_index;
    }
    return out;
}

}  // namespace dcl
