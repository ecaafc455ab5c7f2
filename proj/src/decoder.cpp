#include "dcl/decoder.hpp"

#include <cmath>
#include <stdexcept>

namespace dcl {

namespace {

Tensor init_weight(size_t fan_in, size_t fan_out, Rng& rng) {
    double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    Tensor w = uniform({fan_in, fan_out}, rng, -bound, bound);
    w.set_requires_grad(true);
    return w;
}

Tensor init_bias(size_t n) {
    Tensor b = zeros({n});
    b.set_requires_grad(true);
    return b;
}

Tensor init_small(std::vector<size_t> shape, Rng& rng) {
    Tensor t = normal(std::move(shape), rng, 0.0, 0.02);
    t.set_requires_grad(true);
    return t;
}

// Stride-f transposed convolution with kernel size == stride: every input
// pixel paints a disjoint f x f output block. w columns are laid out as
// (dy*f + dx)*c_out + channel.
Tensor transposed_upsample(const Tensor& x, const Tensor& w, const Tensor& bias, size_t f) {
    size_t b = x.dim(0), h = x.dim(1), wd = x.dim(2), c = x.dim(3);
    size_t cout = bias.dim(0);
    Tensor blocks = matmul(x.reshaped({b * h * wd, c}), w);
    Tensor rows = blocks.reshaped({b * h * wd * f * f, cout});
    std::vector<size_t> order(rows.rows());
    for (size_t bi = 0; bi < b; ++bi)
        for (size_t i = 0; i < h; ++i)
            for (size_t di = 0; di < f; ++di)
                for (size_t j = 0; j < wd; ++j)
                    for (size_t dj = 0; dj < f; ++dj)
                        order[(bi * h * f + i * f + di) * wd * f + j * f + dj] =
                            ((bi * h + i) * wd + j) * f * f + di * f + dj;
    return add_bias(gather_rows(rows, order), bias).reshaped({b, h * f, wd * f, cout});
}

}  // namespace

size_t DecoderConfig::stages(size_t grid, size_t image_size) const {
    if (grid == 0 || image_size == 0 || image_size % grid != 0)
        throw std::invalid_argument("decoder config: image size " + std::to_string(image_size) +
                                    " is not a multiple of the " + std::to_string(grid) +
                                    "-cell grid");
    if (upsample_factor < 2)
        throw std::invalid_argument("decoder config: upsample factor must be >= 2, got " +
                                    std::to_string(upsample_factor));
    size_t ratio = image_size / grid;
    size_t n = 0, reach = 1;
    while (reach < ratio) {
        reach *= upsample_factor;
        ++n;
    }
    if (reach != ratio)
        throw std::invalid_argument("decoder config: " + std::to_string(upsample_factor) +
                                    "x stages cannot land exactly on " +
                                    std::to_string(image_size) + " from a " +
                                    std::to_string(grid) + "-cell grid");
    return n;
}

void DecoderConfig::validate(size_t grid, size_t image_size) const {
    if (kind == DecoderKind::transformer) {
        if (grid == 0 || image_size == 0 || image_size % grid != 0)
            throw std::invalid_argument("decoder config: image size " +
                                        std::to_string(image_size) +
                                        " is not a multiple of the " + std::to_string(grid) +
                                        "-cell grid");
        if (latent_dim == 0 || depth == 0 || heads == 0 || latent_dim % heads != 0)
            throw std::invalid_argument("decoder config: latent dim " +
                                        std::to_string(latent_dim) + " not divisible by " +
                                        std::to_string(heads) + " heads (or zero-sized field)");
        return;
    }
    if (channels_per_layer == 0)
        throw std::invalid_argument("decoder config: channels_per_layer must be positive");
    stages(grid, image_size);
}

Decoder::Decoder(DecoderConfig cfg, size_t in_width, size_t grid, size_t image_size,
                 size_t channels, Rng& rng)
    : cfg_(cfg), in_width_(in_width), grid_(grid), image_size_(image_size), channels_(channels) {
    cfg_.validate(grid, image_size);
    if (in_width == 0 || channels == 0)
        throw std::invalid_argument("decoder: zero-width features or image channels");

    if (cfg_.kind == DecoderKind::transformer) {
        size_t patch = image_size / grid;
        proj_w_ = init_weight(in_width, cfg_.latent_dim, rng);
        proj_b_ = init_bias(cfg_.latent_dim);
        pos_ = init_small({grid * grid, cfg_.latent_dim}, rng);
        blocks_.reserve(cfg_.depth);
        for (size_t i = 0; i < cfg_.depth; ++i)
            blocks_.push_back(
                AttentionBlock::create(cfg_.latent_dim, cfg_.heads, 4 * cfg_.latent_dim, rng));
        out_w_ = init_weight(cfg_.latent_dim, patch * patch * channels, rng);
        out_b_ = init_bias(patch * patch * channels);
        return;
    }

    size_t n = cfg_.stages(grid, image_size);
    size_t f = cfg_.upsample_factor, cpl = cfg_.channels_per_layer;
    size_t cin = in_width;
    conv_stages_.reserve(n);
    for (size_t i = 0; i < n; ++i) {
        Stage st;
        st.w = init_weight(9 * cin, cpl, rng);
        st.b = init_bias(cpl);
        if (cfg_.kind == DecoderKind::conv_transposed) {
            st.up_w = init_weight(cpl, f * f * cpl, rng);
            st.up_b = init_bias(cpl);
        }
        conv_stages_.push_back(st);
        cin = cpl;
    }
    out_w_ = init_weight(cin, channels, rng);
    out_b_ = init_bias(channels);
}

Tensor Decoder::decode(const DenseFeatureGrid& dense) const {
    if (dense.grid != grid_ || dense.width() != in_width_)
        throw std::invalid_argument(
            "decode: feature grid " + shape_string(dense.features.shape()) +
            " does not match the configured " + std::to_string(grid_) + "x" +
            std::to_string(grid_) + " grid of width " + std::to_string(in_width_));
    size_t b = dense.batch;

    if (cfg_.kind == DecoderKind::transformer) {
        size_t s2 = grid_ * grid_, patch = image_size_ / grid_;
        Tensor tok = add_bias(matmul(dense.rows(), proj_w_), proj_b_);
        tok = add_tiled(tok, pos_);
        for (const AttentionBlock& blk : blocks_) tok = blk.forward(tok, b, s2);
        Tensor px = sigmoid(add_bias(matmul(tok, out_w_), out_b_));
        return unpatchify(px.reshaped({b, s2, patch * patch * channels_}), patch);
    }

    size_t f = cfg_.upsample_factor;
    size_t side = grid_, cin = in_width_;
    Tensor x = dense.features;
    for (const Stage& st : conv_stages_) {
        Tensor conv = gelu(add_bias(matmul(gather_patches(x, 3), st.w), st.b));
        x = conv.reshaped({b, side, side, cfg_.channels_per_layer});
        x = cfg_.kind == DecoderKind::conv_bicubic ? bicubic_upsample(x, f)
                                                   : transposed_upsample(x, st.up_w, st.up_b, f);
        side *= f;
        cin = cfg_.channels_per_layer;
    }
    Tensor img = sigmoid(add_bias(matmul(x.reshaped({b * side * side, cin}), out_w_), out_b_));
    return img.reshaped({b, side, side, channels_});
}

std::vector<std::pair<std::string, Tensor>> Decoder::parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    if (cfg_.kind == DecoderKind::transformer) {
        out.emplace_back("proj.w", proj_w_);
        out.emplace_back("proj.b", proj_b_);
        out.emplace_back("pos", pos_);
        for (size_t i = 0; i < blocks_.size(); ++i)
            blocks_[i].collect("block" + std::to_string(i), out);
    } else {
        for (size_t i = 0; i < conv_stages_.size(); ++i) {
            std::string p = "stage" + std::to_string(i);
            out.emplace_back(p + ".w", conv_stages_[i].w);
            out.emplace_back(p + ".b", conv_stages_[i].b);
            if (cfg_.kind == DecoderKind::conv_transposed) {
                out.emplace_back(p + ".up.w", conv_stages_[i].up_w);
                out.emplace_back(p + ".up.b", conv_stages_[i].up_b);
            }
        }
    }
    out.emplace_back("out.w", out_w_);
    out.emplace_back("out.b", out_b_);
    return out;
}

}  // namespace dcl
