#pragma once

#include <cstdint>
#include <vector>

#include "dcl/encoder.hpp"
#include "dcl/tensor.hpp"

namespace dcl {

// A batch of V views is laid out as consecutive augmentations: view v belongs
// to image v/2 and its sibling augmentation is v^1. All selection helpers
// below work on cell matrices [cells x width] (one view flattened row-major)
// and are pure: gradients never flow through selection, only through the
// features later gathered for the loss.

inline size_t partner_view(size_t view) { return view ^ 1; }
inline size_t view_image(size_t view) { return view / 2; }

struct PairingParams {
    size_t candidate_set_count = 1;        // negative sets drawn and scored per view
    double similarity_threshold = -1.0;    // similarities at or below clip to -1 in scoring
    size_t cross_view_negative_count = 0;  // extra least-similar partner cells per anchor
    size_t positives_per_anchor = 1;
    FeatureSource pair_feature = FeatureSource::backbone;
    bool normalize_features = true;        // cosine matching on normalized features
    bool use_all_dense_negatives = false;  // every other-view cell instead of one sample each
    uint64_t rng_seed = 0;

    void validate(size_t cells) const;
};

struct ViewCell {
    size_t view;
    size_t cell;
    bool operator==(const ViewCell&) const = default;
};

/// Per anchor cell, the partner cell with the highest cosine similarity;
/// ties -> lowest index.
std::vector<size_t> match_positives(const Tensor& anchor_cells, const Tensor& partner_cells);

/// One uniformly-drawn cell from every view belonging to a different image
/// than `anchor_view`, in ascending view order.
std::vector<ViewCell> sample_random_dense_negatives(const DenseFeatureGrid& views,
                                                    size_t anchor_view, Rng& rng);

/// Clips a similarity at or below the threshold to -1, else passes it through.
double threshold_similarity(double q, double similarity_threshold);

/// Mean thresholded cosine similarity between every set member and every
/// anchor cell.
double score_candidate_set(const Tensor& set_features, const Tensor& anchor_cells,
                           double similarity_threshold);

/// Draws `candidate_set_count` random negative sets and keeps the one whose
/// score_candidate_set is highest; ties -> earliest drawn. With a single set
/// this is exactly sample_random_dense_negatives.
std::vector<ViewCell> select_guided_negative_set(const DenseFeatureGrid& views,
                                                 size_t anchor_view, const Tensor& anchor_cells,
                                                 const PairingParams& params, Rng& rng);

/// Per anchor cell, the `count` partner cells with the lowest similarity,
/// excluding that cell's positive; sorted ascending by similarity, ties ->
/// lowest index.
std::vector<std::vector<size_t>> select_cross_view_negatives(
    const Tensor& anchor_cells, const Tensor& partner_cells,
    const std::vector<size_t>& positive_index, size_t count);

/// Per anchor cell, the k most similar partner cells, descending similarity,
/// ties -> lowest index. k=1 reproduces match_positives.
std::vector<std::vector<size_t>> select_topk_positives(const Tensor& anchor_cells,
                                                       const Tensor& partner_cells, size_t k);

/// Copies the selected cells' features into a fresh [n x width] tensor.
/// Selection-side helper: not differentiated (the loss gathers on its own).
Tensor gather_view_cells(const DenseFeatureGrid& views, const std::vector<ViewCell>& picks);

}  // namespace dcl
