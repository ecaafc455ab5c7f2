#include "dcl/losses.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace dcl {

namespace {

void check_feature_matrix(const char* op, const Tensor& t) {
    if (!t.valid() || t.rank() != 2)
        throw std::invalid_argument(std::string(op) + ": expected [rows x width] features, got " +
                                    (t.valid() ? shape_string(t.shape()) : "empty tensor"));
}

// Logits of per-row dot products between anchor rows (repeated per pick) and
// the picked partner rows: output [cells x picks_per_cell].
Tensor per_cell_dot_logits(const Tensor& anchor_cells, const Tensor& partner_cells,
                           const std::vector<std::vector<size_t>>& picks, double inv_tau) {
    size_t cells = anchor_cells.dim(0), per = picks[0].size();
    std::vector<size_t> anchor_idx, partner_idx;
    anchor_idx.reserve(cells * per);
    partner_idx.reserve(cells * per);
    for (size_t k = 0; k < cells; ++k) {
        if (picks[k].size() != per)
            throw std::invalid_argument("dense loss: ragged per-cell selections (" +
                                        std::to_string(picks[k].size()) + " vs " +
                                        std::to_string(per) + ")");
        for (size_t p : picks[k]) {
            if (p >= partner_cells.dim(0))
                throw std::invalid_argument("dense loss: selected cell " + std::to_string(p) +
                                            " out of range for " +
                                            std::to_string(partner_cells.dim(0)) + " cells");
            anchor_idx.push_back(k);
            partner_idx.push_back(p);
        }
    }
    Tensor a = gather_rows(anchor_cells, anchor_idx);
    Tensor b = gather_rows(partner_cells, partner_idx);
    Tensor dots = sum_rows(mul(a, b)).reshaped({cells, per});
    return scale(dots, inv_tau);
}

// Shared assembly: per cell, log-sum-exp over positives and negatives minus
// the mean positive logit, averaged over cells.
Tensor dense_loss_engine(const Tensor& anchor_cells, const Tensor& partner_cells,
                         const std::vector<std::vector<size_t>>& positives,
                         const Tensor& shared_negatives,
                         const std::vector<std::vector<size_t>>& cross_view_negatives,
                         double temperature) {
    check_feature_matrix("dense loss", anchor_cells);
    check_feature_matrix("dense loss", partner_cells);
    if (!(temperature > 0.0))
        throw std::invalid_argument("dense loss: temperature must be positive");
    size_t cells = anchor_cells.dim(0);
    if (positives.size() != cells)
        throw std::invalid_argument("dense loss: " + std::to_string(positives.size()) +
                                    " positive lists for " + std::to_string(cells) + " cells");
    for (const auto& p : positives)
        if (p.empty()) throw std::invalid_argument("dense loss: a cell has no positives");
    if (!cross_view_negatives.empty() && cross_view_negatives.size() != cells)
        throw std::invalid_argument("dense loss: " + std::to_string(cross_view_negatives.size()) +
                                    " cross-view lists for " + std::to_string(cells) + " cells");
    bool have_cross = !cross_view_negatives.empty() && !cross_view_negatives[0].empty();
    if (!shared_negatives.valid() && !have_cross)
        throw std::invalid_argument("dense loss: empty negative set");
    double inv_tau = 1.0 / temperature;

    Tensor pos_block = per_cell_dot_logits(anchor_cells, partner_cells, positives, inv_tau);
    size_t k_pos = positives[0].size();

    std::vector<Tensor> logit_blocks = {pos_block};
    if (shared_negatives.valid()) {
        check_feature_matrix("dense loss", shared_negatives);
        logit_blocks.push_back(scale(matmul_bt(anchor_cells, shared_negatives), inv_tau));
    }
    if (have_cross)
        logit_blocks.push_back(
            per_cell_dot_logits(anchor_cells, partner_cells, cross_view_negatives, inv_tau));

    Tensor all_logits = logit_blocks.size() == 1 ? logit_blocks[0] : concat_cols(logit_blocks);
    Tensor per_cell = sub(log_sum_exp(all_logits),
                          scale(sum_rows(pos_block), 1.0 / static_cast<double>(k_pos)));
    return scale(sum_all(per_cell), 1.0 / static_cast<double>(cells));
}

std::vector<std::vector<size_t>> as_lists(const std::vector<size_t>& positive_index) {
    std::vector<std::vector<size_t>> lists(positive_index.size());
    for (size_t i = 0; i < positive_index.size(); ++i) lists[i] = {positive_index[i]};
    return lists;
}

}  // namespace

void LossParams::validate() const {
    if (!(temperature > 0.0))
        throw std::invalid_argument("loss params: temperature must be positive, got " +
                                    std::to_string(temperature));
    if (dense_weight < 0.0 || dense_weight > 1.0)
        throw std::invalid_argument("loss params: dense weight " + std::to_string(dense_weight) +
                                    " outside [0, 1]");
    if (recon_weight < 0.0)
        throw std::invalid_argument("loss params: reconstruction weight must be non-negative");
}

Tensor info_nce_global(const Tensor& anchors, const Tensor& positives, double temperature,
                       GlobalNegativeMode mode) {
    check_feature_matrix("info_nce_global", anchors);
    check_feature_matrix("info_nce_global", positives);
    if (anchors.shape() != positives.shape())
        throw std::invalid_argument("info_nce_global: shape mismatch " +
                                    shape_string(anchors.shape()) + " vs " +
                                    shape_string(positives.shape()));
    if (!(temperature > 0.0))
        throw std::invalid_argument("info_nce_global: temperature must be positive");
    size_t b = anchors.dim(0);
    if (b < 2) throw std::runtime_error("info_nce_global: no negatives (batch of one image)");
    double inv_tau = 1.0 / temperature;

    // logit pools: anchor-vs-positive [b x b] and anchor-vs-anchor [b x b]
    Tensor ap = scale(matmul_bt(anchors, positives), inv_tau);
    Tensor aa = scale(matmul_bt(anchors, anchors), inv_tau);
    Tensor ap_elems = ap.reshaped({b * b, 1});
    Tensor aa_elems = aa.reshaped({b * b, 1});

    // per anchor: positive logit first, then the negatives
    std::vector<size_t> pos_idx(b);
    std::vector<size_t> neg_ap, neg_aa;
    for (size_t i = 0; i < b; ++i) {
        pos_idx[i] = i * b + i;
        for (size_t j = 0; j < b; ++j) {
            if (j == i) continue;
            neg_aa.push_back(i * b + j);
            if (mode == GlobalNegativeMode::all_other_views) neg_ap.push_back(i * b + j);
        }
    }

    Tensor pos_col = gather_rows(ap_elems, pos_idx);  // [b x 1]
    std::vector<Tensor> blocks = {
        pos_col,
        gather_rows(aa_elems, neg_aa).reshaped({b, b - 1}),
    };
    if (mode == GlobalNegativeMode::all_other_views)
        blocks.push_back(gather_rows(ap_elems, neg_ap).reshaped({b, b - 1}));
    Tensor logits = concat_cols(blocks);  // [b x 1+negs]

    Tensor per_anchor = sub(log_sum_exp(logits), sum_rows(pos_col));
    return scale(sum_all(per_anchor), 1.0 / static_cast<double>(b));
}

Tensor densecl_dense_loss(const Tensor& anchor_cells, const Tensor& partner_cells,
                          const Tensor& global_negatives,
                          const std::vector<size_t>& positive_index, double temperature) {
    check_feature_matrix("densecl_dense_loss", global_negatives);
    return dense_loss_engine(anchor_cells, partner_cells, as_lists(positive_index),
                             global_negatives, {}, temperature);
}

Tensor denseclpp_dense_loss(const Tensor& anchor_cells, const Tensor& partner_cells,
                            const Tensor& dense_negatives,
                            const std::vector<size_t>& positive_index,
                            const std::vector<std::vector<size_t>>& cross_view_negatives,
                            double temperature) {
    return dense_loss_engine(anchor_cells, partner_cells, as_lists(positive_index),
                             dense_negatives, cross_view_negatives, temperature);
}

Tensor multi_positive_dense_loss(const Tensor& anchor_cells, const Tensor& partner_cells,
                                 const std::vector<std::vector<size_t>>& positives,
                                 const Tensor& dense_negatives,
                                 const std::vector<std::vector<size_t>>& cross_view_negatives,
                                 double temperature) {
    return dense_loss_engine(anchor_cells, partner_cells, positives, dense_negatives,
                             cross_view_negatives, temperature);
}

Tensor reconstruction_loss(const Tensor& images, const Tensor& reconstructed) {
    return mean_all(abs(sub(images, reconstructed)));
}

CombinedLoss combine(const Tensor& global_loss, const Tensor& dense_loss,
                     const Tensor& recon_loss, const LossParams& params) {
    params.validate();
    double gw = 1.0 - params.dense_weight;
    double dw = params.dense_weight;
    double rw = params.recon_weight;

    auto need = [](const Tensor& t, const char* which) {
        if (!t.valid())
            throw std::invalid_argument(std::string("combine: ") + which +
                                        " loss required by a nonzero weight but missing");
        if (t.size() != 1)
            throw std::invalid_argument(std::string("combine: ") + which +
                                        " loss must be scalar, got " + shape_string(t.shape()));
        return t;
    };

    Tensor total;
    if (gw != 0.0) total = scale(need(global_loss, "global"), gw);
    if (dw != 0.0) {
        Tensor term = scale(need(dense_loss, "dense"), dw);
        total = total.valid() ? add(total, term) : term;
    }
    if (rw != 0.0) {
        Tensor term = scale(need(recon_loss, "reconstruction"), rw);
        total = total.valid() ? add(total, term) : term;
    }
    if (!total.valid()) total = scalar(0.0);  // all weights zero

    CombinedLoss out;
    out.total = total;
    out.breakdown.global_loss = global_loss.valid() ? global_loss.value() : 0.0;
    out.breakdown.dense_loss = dense_loss.valid() ? dense_loss.value() : 0.0;
    out.breakdown.recon_loss = recon_loss.valid() ? recon_loss.value() : 0.0;
    out.breakdown.total = total.value();
    out.breakdown.dense_weight = dw;
    out.breakdown.recon_weight = rw;
    return out;
}

}  // namespace dcl
