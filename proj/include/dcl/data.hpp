#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "dcl/rng.hpp"
#include "dcl/tensor.hpp"

namespace dcl {

// ---------------------------------------------------------------------------
// synthetic multi-label image generator
// ---------------------------------------------------------------------------

enum class ShapeKind { circle, square, triangle };

/// One entry of the fixed object vocabulary: a filled shape with an exact
/// RGB fill color. The renderer paints fills verbatim (no blending), so a
/// class is present in an image iff at least one pixel carries its color.
struct Prototype {
    ShapeKind shape;
    double r, g, b;
};

/// The eight (shape, color) prototypes classes are drawn from.
const std::array<Prototype, 8>& shape_vocabulary();

struct SyntheticSpec {
    size_t num_images = 2000;
    size_t image_size = 32;  ///< square images, [image_size x image_size x 3]
    size_t num_classes = 8;  ///< uses the first num_classes vocabulary entries
    size_t min_objects = 1;  ///< objects per image, drawn uniformly from
    size_t max_objects = 4;  ///< [min_objects, max_objects], distinct classes
    uint64_t rng_seed = 0;

    /// Throws std::invalid_argument on out-of-range settings (num_classes
    /// beyond the vocabulary, more than four objects, image too small, ...).
    void validate() const;
};

/// Binary label matrix [num_images x num_classes]; row sums are in
/// [min_objects, max_objects], so every image has at least one positive.
struct MultiLabelTargets {
    Tensor labels;
};

struct Dataset {
    Tensor images;  ///< [N x S x S x 3], values in [0, 1]
    MultiLabelTargets targets;
    SyntheticSpec spec;
};

/// Renders the dataset: each image places its objects in distinct quadrants
/// of a textured gray background, so objects never occlude each other and
/// the label matrix matches the rendered pixels exactly. Deterministic in
/// spec.rng_seed.
Dataset generate_dataset(const SyntheticSpec& spec);

// ---------------------------------------------------------------------------
// image utilities (plain [H x W x C] tensors, never taped)
// ---------------------------------------------------------------------------

/// Bilinear resample to [out_h x out_w x C]; source coordinates follow
/// src = (dst + 0.5) * (in / out) - 0.5 with edge-clamped taps, so resizing
/// to the same size is an exact identity.
Tensor resize_bilinear(const Tensor& image, size_t out_h, size_t out_w);

/// Separable Gaussian blur with radius ceil(2*sigma) and edge clamping.
/// Normalized weights: constant images are fixed points.
Tensor gaussian_blur(const Tensor& image, double sigma);

/// Mirrors the image left-right.
Tensor flip_horizontal(const Tensor& image);

// ---------------------------------------------------------------------------
// stochastic augmentation
// ---------------------------------------------------------------------------

struct AugmentParams {
    double crop_scale_min = 0.4;  ///< crop area fraction range
    double crop_scale_max = 1.0;
    double flip_prob = 0.5;
    double jitter_strength = 0.4;  ///< brightness/contrast/saturation +-40%
    double blur_prob = 0.5;
    double blur_sigma_min = 0.1;
    double blur_sigma_max = 2.0;

    void validate() const;
};

/// One random view of a [S x S x 3] image: random square crop (area fraction
/// in [crop_scale_min, crop_scale_max]) resized back to S via bilinear, then
/// horizontal flip, then brightness/contrast/saturation jitter, then optional
/// Gaussian blur. Output stays in [0, 1]. With crop scale pinned to 1 and
/// all probabilities and the jitter strength zero this is an exact identity.
Tensor augment_view(const Tensor& image, const AugmentParams& params, Rng& rng);

// ---------------------------------------------------------------------------
// batching
// ---------------------------------------------------------------------------

/// Two independently augmented views per sampled image. In the interleaved
/// view stream, views 2i and 2i+1 come from the same image (pairing code
/// relies on exactly this layout).
struct Batch {
    Tensor view_a;  ///< [B x S x S x 3], first augmentation of each image
    Tensor view_b;  ///< [B x S x S x 3], second augmentation
    std::vector<size_t> image_indices;  ///< dataset rows, length B, distinct

    /// [2B x S x S x 3] with rows (2i, 2i+1) = (view_a[i], view_b[i]).
    Tensor interleaved() const;
};

/// Samples batch_size distinct images (without replacement) and augments
/// each twice. Throws if batch_size is zero or exceeds the dataset size.
Batch make_batch(const Tensor& images, size_t batch_size,
                 const AugmentParams& params, Rng& rng);

// ---------------------------------------------------------------------------
// dataset cache file
// ---------------------------------------------------------------------------
//
// Byte layout (all integers little-endian):
//   bytes 0..7    magic "DCLSET01"
//   bytes 8..11   uint32 header length L
//   bytes 12..    L bytes of UTF-8 JSON:
//                   {"version": 1, "num_images": N, "image_size": S,
//                    "num_classes": K, "min_objects": m, "max_objects": M,
//                    "rng_seed": seed, "payload": "f64"}
//   then          N*S*S*3 float64 image values (row-major, little-endian)
//   then          N*K    float64 label values (0.0 or 1.0)

void save_dataset(const std::string& path, const Dataset& dataset);

/// Throws std::runtime_error on bad magic, unsupported version or payload,
/// or truncated data.
Dataset load_dataset(const std::string& path);

/// Loads every *.png in a directory (sorted by filename) as an unlabeled
/// image set. All files must be square and share one size; grayscale is
/// replicated to RGB and alpha is dropped. targets.labels is left invalid.
Dataset load_png_directory(const std::string& dir);

}  // namespace dcl
