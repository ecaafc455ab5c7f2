#pragma once

#include <string>
#include <utility>
#include <vector>

#include "dcl/encoder.hpp"
#include "dcl/tensor.hpp"

namespace dcl {

enum class DecoderKind { conv_bicubic, conv_transposed, transformer };

/// Geometry and capacity of the auxiliary reconstruction head.
struct DecoderConfig {
    DecoderKind kind = DecoderKind::conv_bicubic;
    size_t channels_per_layer = 16;  // conv kinds: outputs of every 3x3 layer
    size_t upsample_factor = 2;      // conv kinds: spatial blow-up per stage
    size_t latent_dim = 32;          // transformer: projected token width
    size_t depth = 1;                // transformer: attention blocks
    size_t heads = 4;                // transformer: heads per block

    /// Conv kinds: number of upsample stages to land exactly on image_size
    /// starting from an S x S grid. Throws when the factor chain cannot.
    size_t stages(size_t grid, size_t image_size) const;
    void validate(size_t grid, size_t image_size) const;
};

/// Reconstruction head mapping a dense feature grid back to an image in
/// (0,1). Conv kinds run 3x3 convolutions interleaved with upsampling (fixed
/// bicubic, or learned stride-`factor` transposed convolutions) and finish
/// with a 1x1 projection; the transformer kind runs attention blocks over the
/// grid tokens and emits one image patch per cell. Trained only as an
/// auxiliary objective and discarded afterwards.
class Decoder {
public:
    Decoder(DecoderConfig cfg, size_t in_width, size_t grid, size_t image_size, size_t channels,
            Rng& rng);

    /// dense.features [B x S x S x in_width] -> [B x image x image x channels].
    Tensor decode(const DenseFeatureGrid& dense) const;

    const DecoderConfig& config() const { return cfg_; }
    std::vector<std::pair<std::string, Tensor>> parameters() const;

private:
    DecoderConfig cfg_;
    size_t in_width_ = 0, grid_ = 0, image_size_ = 0, channels_ = 0;

    // conv kinds
    struct Stage {
        Tensor w, b;        // 3x3 conv: [9*c_in x c_out] + [c_out]
        Tensor up_w, up_b;  // conv_transposed only: [c_out x f*f*c_out] + [c_out]
    };
    std::vector<Stage> conv_stages_;

    // transformer kind
    Tensor proj_w_, proj_b_;  // in_width -> latent_dim
    Tensor pos_;              // [S^2 x latent_dim]
    std::vector<AttentionBlock> blocks_;

    Tensor out_w_, out_b_;  // 1x1 conv to image channels / per-token patch head
};

}  // namespace dcl
