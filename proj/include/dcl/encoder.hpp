#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dcl/tensor.hpp"

namespace dcl {

struct EncoderConfig {
    size_t image_size = 32;
    size_t patch_size = 8;
    size_t channels = 3;
    size_t embed_dim = 48;
    size_t depth = 2;
    size_t heads = 2;
    bool use_cls_token = true;
    size_t proj_hidden = 64;
    size_t proj_out = 32;

    size_t grid() const { return image_size / patch_size; }
    size_t tokens() const { return grid() * grid(); }
    void validate() const;
};

enum class FeatureSource { backbone, dense_head, global_head };
enum class Aggregation { cls, gap };

/// Per-view grid of local features, shape [B x S x S x width].
struct DenseFeatureGrid {
    Tensor features;
    size_t batch = 0;
    size_t grid = 0;
    bool normalized = false;
    FeatureSource source = FeatureSource::backbone;

    size_t width() const { return features.cols(); }
    /// Flat [B*S*S x width] view of the same storage.
    Tensor rows() const { return features.reshaped({batch * grid * grid, features.cols()}); }
};

/// One vector per sample, shape [B x width].
struct GlobalFeature {
    Tensor features;
    Aggregation aggregation = Aggregation::gap;
    FeatureSource source = FeatureSource::backbone;
};

/// Rearranges [B x H x W x C] images into [B x S^2 x (P^2*C)] rows of
/// non-overlapping patches, each patch scanned row-major with channels
/// innermost. Differentiable (it is a permutation of the input).
Tensor patchify(const Tensor& images, size_t patch_size);

/// Exact inverse of patchify.
Tensor unpatchify(const Tensor& patches, size_t patch_size);

/// Three linear layers with a smooth-ramp nonlinearity between them.
struct Mlp3 {
    Tensor w1, b1, w2, b2, w3, b3;

    static Mlp3 create(size_t in, size_t hidden, size_t out, Rng& rng);
    Tensor forward(const Tensor& x) const;
    void collect(const std::string& prefix,
                 std::vector<std::pair<std::string, Tensor>>& out) const;
};

/// Pre-normalized multi-head self-attention + MLP block with residual
/// connections, operating on a [batch*seq x embed] token stream where each
/// sample's tokens are contiguous.
struct AttentionBlock {
    size_t heads = 1;
    Tensor ln1_g, ln1_b;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln2_g, ln2_b;
    Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;

    static AttentionBlock create(size_t embed, size_t heads, size_t mlp_hidden, Rng& rng);
    Tensor forward(const Tensor& x, size_t batch, size_t seq) const;
    void collect(const std::string& prefix,
                 std::vector<std::pair<std::string, Tensor>>& out) const;
};

/// Patch-token encoder: learned patch embedding, positional embeddings,
/// pre-normalized attention + MLP blocks with residuals, final normalization.
class Encoder {
public:
    Encoder(EncoderConfig cfg, Rng& rng);

    struct Result {
        DenseFeatureGrid dense;             // backbone token grid
        std::optional<Tensor> cls;          // [B x embed_dim] when configured
    };

    /// images: [B x H x W x C] with values in [0,1].
    Result encode(const Tensor& images) const;

    const EncoderConfig& config() const { return cfg_; }
    std::vector<std::pair<std::string, Tensor>> parameters() const;

private:
    EncoderConfig cfg_;
    Tensor patch_w_, patch_b_;
    Tensor cls_;   // [1 x embed_dim], only when use_cls_token
    Tensor pos_;   // [seq x embed_dim]
    std::vector<AttentionBlock> blocks_;
    Tensor final_g_, final_b_;
};

/// Mean of the S^2 grid vectors (gap) or the CLS embedding (cls).
GlobalFeature aggregate_global(const DenseFeatureGrid& dense, const std::optional<Tensor>& cls,
                               Aggregation mode);

/// Applies a projection head position-wise over the grid.
DenseFeatureGrid project_dense(const DenseFeatureGrid& grid, const Mlp3& head);

/// Applies a projection head to per-sample global features.
GlobalFeature project_global(const GlobalFeature& global, const Mlp3& head);

}  // namespace dcl
