#include "dcl/encoder.hpp"

#include <cmath>
#include <stdexcept>

namespace dcl {

namespace {

// Scaled uniform fan-in initialization for a [fan_in x fan_out] weight.
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

Tensor init_ones(size_t n) {
    Tensor t = full({n}, 1.0);
    t.set_requires_grad(true);
    return t;
}

void check_images(const char* op, const Tensor& images, size_t patch_size) {
    if (images.rank() != 4)
        throw std::invalid_argument(std::string(op) + ": expected [B x H x W x C] images, got " +
                                    shape_string(images.shape()));
    if (images.dim(1) != images.dim(2))
        throw std::invalid_argument(std::string(op) + ": images must be square, got " +
                                    shape_string(images.shape()));
    if (patch_size == 0 || images.dim(1) % patch_size != 0)
        throw std::invalid_argument(std::string(op) + ": image size " +
                                    std::to_string(images.dim(1)) +
                                    " not divisible by patch size " + std::to_string(patch_size));
}

}  // namespace

void EncoderConfig::validate() const {
    if (image_size == 0 || patch_size == 0 || image_size % patch_size != 0)
        throw std::invalid_argument("encoder config: image size " + std::to_string(image_size) +
                                    " not divisible by patch size " + std::to_string(patch_size));
    if (embed_dim == 0 || heads == 0 || embed_dim % heads != 0)
        throw std::invalid_argument("encoder config: embed dim " + std::to_string(embed_dim) +
                                    " not divisible by " + std::to_string(heads) + " heads");
    if (channels == 0 || depth == 0 || proj_hidden == 0 || proj_out == 0)
        throw std::invalid_argument("encoder config: zero-sized field");
}

Tensor patchify(const Tensor& images, size_t patch_size) {
    check_images("patchify", images, patch_size);
    size_t b = images.dim(0), h = images.dim(1), w = images.dim(2), c = images.dim(3);
    size_t s = h / patch_size, p = patch_size;
    Tensor pixels = images.reshaped({b * h * w, c});
    std::vector<size_t> order;
    order.reserve(b * h * w);
    for (size_t bi = 0; bi < b; ++bi)
        for (size_t sy = 0; sy < s; ++sy)
            for (size_t sx = 0; sx < s; ++sx)
                for (size_t py = 0; py < p; ++py)
                    for (size_t px = 0; px < p; ++px)
                        order.push_back(bi * h * w + (sy * p + py) * w + (sx * p + px));
    return gather_rows(pixels, order).reshaped({b, s * s, p * p * c});
}

Tensor unpatchify(const Tensor& patches, size_t patch_size) {
    if (patches.rank() != 3)
        throw std::invalid_argument("unpatchify: expected [B x S^2 x P^2*C] patches, got " +
                                    shape_string(patches.shape()));
    size_t p = patch_size;
    size_t s = static_cast<size_t>(std::llround(std::sqrt(static_cast<double>(patches.dim(1)))));
    if (s * s != patches.dim(1) || p == 0 || patches.dim(2) % (p * p) != 0)
        throw std::invalid_argument("unpatchify: " + shape_string(patches.shape()) +
                                    " is not a square grid of " + std::to_string(p) + "x" +
                                    std::to_string(p) + " patches");
    size_t b = patches.dim(0), c = patches.dim(2) / (p * p), h = s * p;
    Tensor rows = patches.reshaped({b * s * s * p * p, c});
    // inverse of the patchify ordering: for each output pixel, where it sits
    // in the patch stream
    std::vector<size_t> order(b * h * h);
    size_t src = 0;
    for (size_t bi = 0; bi < b; ++bi)
        for (size_t sy = 0; sy < s; ++sy)
            for (size_t sx = 0; sx < s; ++sx)
                for (size_t py = 0; py < p; ++py)
                    for (size_t px = 0; px < p; ++px)
                        order[bi * h * h + (sy * p + py) * h + (sx * p + px)] = src++;
    return gather_rows(rows, order).reshaped({b, h, h, c});
}

Mlp3 Mlp3::create(size_t in, size_t hidden, size_t out, Rng& rng) {
    Mlp3 m;
    m.w1 = init_weight(in, hidden, rng);
    m.b1 = init_bias(hidden);
    m.w2 = init_weight(hidden, hidden, rng);
    m.b2 = init_bias(hidden);
    m.w3 = init_weight(hidden, out, rng);
    m.b3 = init_bias(out);
    return m;
}

Tensor Mlp3::forward(const Tensor& x) const {
    Tensor h1 = gelu(add_bias(matmul(x, w1), b1));
    Tensor h2 = gelu(add_bias(matmul(h1, w2), b2));
    return add_bias(matmul(h2, w3), b3);
}

void Mlp3::collect(const std::string& prefix,
                   std::vector<std::pair<std::string, Tensor>>& out) const {
    out.emplace_back(prefix + ".w1", w1);
    out.emplace_back(prefix + ".b1", b1);
    out.emplace_back(prefix + ".w2", w2);
    out.emplace_back(prefix + ".b2", b2);
    out.emplace_back(prefix + ".w3", w3);
    out.emplace_back(prefix + ".b3", b3);
}

AttentionBlock AttentionBlock::create(size_t embed, size_t heads, size_t mlp_hidden, Rng& rng) {
    if (embed == 0 || heads == 0 || embed % heads != 0)
        throw std::invalid_argument("attention block: embed dim " + std::to_string(embed) +
                                    " not divisible by " + std::to_string(heads) + " heads");
    AttentionBlock blk;
    blk.heads = heads;
    blk.ln1_g = init_ones(embed);
    blk.ln1_b = init_bias(embed);
    blk.wq = init_weight(embed, embed, rng);
    blk.bq = init_bias(embed);
    blk.wk = init_weight(embed, embed, rng);
    blk.bk = init_bias(embed);
    blk.wv = init_weight(embed, embed, rng);
    blk.bv = init_bias(embed);
    blk.wo = init_weight(embed, embed, rng);
    blk.bo = init_bias(embed);
    blk.ln2_g = init_ones(embed);
    blk.ln2_b = init_bias(embed);
    blk.mlp_w1 = init_weight(embed, mlp_hidden, rng);
    blk.mlp_b1 = init_bias(mlp_hidden);
    blk.mlp_w2 = init_weight(mlp_hidden, embed, rng);
    blk.mlp_b2 = init_bias(embed);
    return blk;
}

Tensor AttentionBlock::forward(const Tensor& x, size_t batch, size_t seq) const {
    size_t e = wq.dim(0), dh = e / heads;
    double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));

    Tensor h = layer_norm_rows(x, ln1_g, ln1_b);
    Tensor q = add_bias(matmul(h, wq), bq);
    Tensor k = add_bias(matmul(h, wk), bk);
    Tensor v = add_bias(matmul(h, wv), bv);

    std::vector<Tensor> per_sample;
    per_sample.reserve(batch);
    for (size_t b = 0; b < batch; ++b) {
        Tensor qs = slice_rows(q, b * seq, (b + 1) * seq);
        Tensor ks = slice_rows(k, b * seq, (b + 1) * seq);
        Tensor vs = slice_rows(v, b * seq, (b + 1) * seq);
        std::vector<Tensor> per_head;
        per_head.reserve(heads);
        for (size_t hh = 0; hh < heads; ++hh) {
            Tensor qh = slice_cols(qs, hh * dh, (hh + 1) * dh);
            Tensor kh = slice_cols(ks, hh * dh, (hh + 1) * dh);
            Tensor vh = slice_cols(vs, hh * dh, (hh + 1) * dh);
            Tensor attn = softmax_rows(scale(matmul_bt(qh, kh), att_scale));
            per_head.push_back(matmul(attn, vh));
        }
        per_sample.push_back(concat_cols(per_head));
    }
    Tensor mixed = concat_rows(per_sample);
    Tensor attn_out = add_bias(matmul(mixed, wo), bo);
    Tensor x1 = add(x, attn_out);

    Tensor h2 = layer_norm_rows(x1, ln2_g, ln2_b);
    Tensor m1 = gelu(add_bias(matmul(h2, mlp_w1), mlp_b1));
    Tensor m2 = add_bias(matmul(m1, mlp_w2), mlp_b2);
    return add(x1, m2);
}

void AttentionBlock::collect(const std::string& prefix,
                             std::vector<std::pair<std::string, Tensor>>& out) const {
    out.emplace_back(prefix + ".ln1.g", ln1_g);
    out.emplace_back(prefix + ".ln1.b", ln1_b);
    out.emplace_back(prefix + ".wq", wq);
    out.emplace_back(prefix + ".bq", bq);
    out.emplace_back(prefix + ".wk", wk);
    out.emplace_back(prefix + ".bk", bk);
    out.emplace_back(prefix + ".wv", wv);
    out.emplace_back(prefix + ".bv", bv);
    out.emplace_back(prefix + ".wo", wo);
    out.emplace_back(prefix + ".bo", bo);
    out.emplace_back(prefix + ".ln2.g", ln2_g);
    out.emplace_back(prefix + ".ln2.b", ln2_b);
    out.emplace_back(prefix + ".mlp.w1", mlp_w1);
    out.emplace_back(prefix + ".mlp.b1", mlp_b1);
    out.emplace_back(prefix + ".mlp.w2", mlp_w2);
    out.emplace_back(prefix + ".mlp.b2", mlp_b2);
}

Encoder::Encoder(EncoderConfig cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    size_t e = cfg_.embed_dim;
    size_t patch_dim = cfg_.patch_size * cfg_.patch_size * cfg_.channels;
    size_t seq = cfg_.tokens() + (cfg_.use_cls_token ? 1 : 0);

    patch_w_ = init_weight(patch_dim, e, rng);
    patch_b_ = init_bias(e);
    if (cfg_.use_cls_token) cls_ = init_small({1, e}, rng);
    pos_ = init_small({seq, e}, rng);

    blocks_.reserve(cfg_.depth);
    for (size_t i = 0; i < cfg_.depth; ++i)
        blocks_.push_back(AttentionBlock::create(e, cfg_.heads, 4 * e, rng));
    final_g_ = init_ones(e);
    final_b_ = init_bias(e);
}

Encoder::Result Encoder::encode(const Tensor& images) const {
    check_images("encode", images, cfg_.patch_size);
    if (images.dim(1) != cfg_.image_size || images.dim(3) != cfg_.channels)
        throw std::invalid_argument("encode: images " + shape_string(images.shape()) +
                                    " do not match configured " +
                                    std::to_string(cfg_.image_size) + "px/" +
                                    std::to_string(cfg_.channels) + "ch");
    size_t batch = images.dim(0), t = cfg_.tokens(), e = cfg_.embed_dim;
    size_t seq = t + (cfg_.use_cls_token ? 1 : 0);

    Tensor patches = patchify(images, cfg_.patch_size)
                         .reshaped({batch * t, cfg_.patch_size * cfg_.patch_size * cfg_.channels});
    Tensor x = add_bias(matmul(patches, patch_w_), patch_b_);

    if (cfg_.use_cls_token) {
        std::vector<Tensor> parts;
        parts.reserve(2 * batch);
        for (size_t b = 0; b < batch; ++b) {
            parts.push_back(cls_);
            parts.push_back(slice_rows(x, b * t, (b + 1) * t));
        }
        x = concat_rows(parts);
    }
    x = add_tiled(x, pos_);

    for (const AttentionBlock& blk : blocks_) x = blk.forward(x, batch, seq);
    x = layer_norm_rows(x, final_g_, final_b_);

    Result res;
    if (cfg_.use_cls_token) {
        std::vector<size_t> cls_idx(batch), tok_idx(batch * t);
        for (size_t b = 0; b < batch; ++b) {
            cls_idx[b] = b * seq;
            for (size_t i = 0; i < t; ++i) tok_idx[b * t + i] = b * seq + 1 + i;
        }
        res.cls = gather_rows(x, cls_idx);
        x = gather_rows(x, tok_idx);
    }
    res.dense.features = x.reshaped({batch, cfg_.grid(), cfg_.grid(), e});
    res.dense.batch = batch;
    res.dense.grid = cfg_.grid();
    res.dense.normalized = false;
    res.dense.source = FeatureSource::backbone;
    return res;
}

std::vector<std::pair<std::string, Tensor>> Encoder::parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("patch.w", patch_w_);
    out.emplace_back("patch.b", patch_b_);
    if (cfg_.use_cls_token) out.emplace_back("cls", cls_);
    out.emplace_back("pos", pos_);
    for (size_t i = 0; i < blocks_.size(); ++i)
        blocks_[i].collect("block" + std::to_string(i), out);
    out.emplace_back("final.g", final_g_);
    out.emplace_back("final.b", final_b_);
    return out;
}

GlobalFeature aggregate_global(const DenseFeatureGrid& dense, const std::optional<Tensor>& cls,
                               Aggregation mode) {
    GlobalFeature gf;
    gf.aggregation = mode;
    gf.source = dense.source;
    if (mode == Aggregation::cls) {
        if (!cls || !cls->valid())
            throw std::invalid_argument("aggregate_global: CLS aggregation requested but the "
                                        "encoder has no CLS token");
        gf.features = *cls;
        return gf;
    }
    gf.features = mean_rows_grouped(dense.rows(), dense.grid * dense.grid);
    return gf;
}

DenseFeatureGrid project_dense(const DenseFeatureGrid& grid, const Mlp3& head) {
    if (grid.width() != head.w1.dim(0))
        throw std::invalid_argument("project_dense: features of width " +
                                    std::to_string(grid.width()) + " into head expecting " +
                                    std::to_string(head.w1.dim(0)));
    Tensor out = head.forward(grid.rows());
    DenseFeatureGrid res = grid;
    res.features = out.reshaped({grid.batch, grid.grid, grid.grid, out.cols()});
    res.normalized = false;
    res.source = FeatureSource::dense_head;
    return res;
}

GlobalFeature project_global(const GlobalFeature& global, const Mlp3& head) {
    if (global.features.cols() != head.w1.dim(0))
        throw std::invalid_argument("project_global: features of width " +
                                    std::to_string(global.features.cols()) +
                                    " into head expecting " + std::to_string(head.w1.dim(0)));
    GlobalFeature res = global;
    res.features = head.forward(global.features);
    res.source = FeatureSource::global_head;
    return res;
}

}  // namespace dcl
