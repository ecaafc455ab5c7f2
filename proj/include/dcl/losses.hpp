#pragma once

#include <vector>

#include "dcl/tensor.hpp"

namespace dcl {

struct LossParams {
    double temperature = 0.2;  // divides every similarity before exponentiation
    double dense_weight = 0.9; // fraction of the contrastive loss taken from the dense term
    double recon_weight = 0.0; // weight of the auxiliary reconstruction term

    void validate() const;
};

struct LossBreakdown {
    double global_loss = 0.0;
    double dense_loss = 0.0;
    double recon_loss = 0.0;
    double total = 0.0;
    double dense_weight = 0.0;
    double recon_weight = 0.0;
};

/// Which batch features serve as negatives for the per-image contrastive
/// term: both views of every other image (default), or only the anchor-side
/// view of every other image.
enum class GlobalNegativeMode { all_other_views, one_per_image };

/// Per-image contrastive loss. anchors[i] and positives[i] are the two
/// augmented views of image i, L2-normalized. For each anchor the positive
/// logit competes against the other images' views; the result is the batch
/// mean. Throws when the batch has a single image (no negatives exist).
Tensor info_nce_global(const Tensor& anchors, const Tensor& positives, double temperature,
                       GlobalNegativeMode mode = GlobalNegativeMode::all_other_views);

/// Dense contrastive loss for one anchor view whose negatives are the global
/// features of other images' views. anchor_cells/partner_cells are the
/// [cells x width] grids of the view pair, positive_index the per-cell match
/// in the partner view. Mean over cells.
Tensor densecl_dense_loss(const Tensor& anchor_cells, const Tensor& partner_cells,
                          const Tensor& global_negatives,
                          const std::vector<size_t>& positive_index, double temperature);

/// Dense contrastive loss whose negatives are themselves dense features:
/// `dense_negatives` rows are shared by every anchor cell, and each cell may
/// additionally take its own `cross_view_negatives` cells from the partner
/// view. Pass an empty cross list for none. Mean over cells.
Tensor denseclpp_dense_loss(const Tensor& anchor_cells, const Tensor& partner_cells,
                            const Tensor& dense_negatives,
                            const std::vector<size_t>& positive_index,
                            const std::vector<std::vector<size_t>>& cross_view_negatives,
                            double temperature);

/// Multi-positive variant: each anchor cell has k partner cells as positives
/// and averages, over those positives, the negative log of that positive
/// against the union of all positives and negatives. With k=1 this is
/// exactly denseclpp_dense_loss.
Tensor multi_positive_dense_loss(const Tensor& anchor_cells, const Tensor& partner_cells,
                                 const std::vector<std::vector<size_t>>& positives,
                                 const Tensor& dense_negatives,
                                 const std::vector<std::vector<size_t>>& cross_view_negatives,
                                 double temperature);

/// Mean absolute error between an image batch and its reconstruction.
Tensor reconstruction_loss(const Tensor& images, const Tensor& reconstructed);

struct CombinedLoss {
    Tensor total;
    LossBreakdown breakdown;
};

/// total = (1-dense_weight)*global + dense_weight*dense + recon_weight*recon.
/// Terms with a zero coefficient are skipped structurally — their tensors may
/// be empty handles and contribute nothing to the graph, so parameters that
/// only feed a skipped term receive no gradient at all.
CombinedLoss combine(const Tensor& global_loss, const Tensor& dense_loss,
                     const Tensor& recon_loss, const LossParams& params);

}  // namespace dcl
