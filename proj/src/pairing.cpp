#include "dcl/pairing.hpp"

#include <algorithm>
#include <stdexcept>

namespace dcl {

namespace {

void check_cells(const char* op, const Tensor& t) {
    if (!t.valid() || t.rank() != 2)
        throw std::invalid_argument(std::string(op) + ": expected [cells x width] features, got " +
                                    (t.valid() ? shape_string(t.shape()) : "empty tensor"));
}

}  // namespace

void PairingParams::validate(size_t cells) const {
    if (candidate_set_count < 1)
        throw std::invalid_argument("pairing: candidate set count must be at least 1");
    if (similarity_threshold < -1.0 || similarity_threshold > 1.0)
        throw std::invalid_argument("pairing: similarity threshold " +
                                    std::to_string(similarity_threshold) +
                                    " outside [-1, 1]");
    if (cells > 0 && cross_view_negative_count > cells - 1)
        throw std::invalid_argument("pairing: " + std::to_string(cross_view_negative_count) +
                                    " cross-view negatives but only " + std::to_string(cells - 1) +
                                    " non-positive cells");
    if (positives_per_anchor < 1 || (cells > 0 && positives_per_anchor > cells))
        throw std::invalid_argument("pairing: positives per anchor must lie in [1, " +
                                    std::to_string(cells) + "]");
}

std::vector<size_t> match_positives(const Tensor& anchor_cells, const Tensor& partner_cells) {
    check_cells("match_positives", anchor_cells);
    check_cells("match_positives", partner_cells);
    Tensor sim = cosine_similarity_matrix(anchor_cells, partner_cells);
    size_t n = sim.dim(0), m = sim.dim(1);
    std::vector<size_t> best(n);
    for (size_t k = 0; k < n; ++k) {
        size_t arg = 0;
        for (size_t l = 1; l < m; ++l)
            if (sim(k, l) > sim(k, arg)) arg = l;
        best[k] = arg;
    }
    return best;
}

std::vector<ViewCell> sample_random_dense_negatives(const DenseFeatureGrid& views,
                                                    size_t anchor_view, Rng& rng) {
    size_t view_count = views.batch;
    size_t cells = views.grid * views.grid;
    if (anchor_view >= view_count)
        throw std::invalid_argument("sample_random_dense_negatives: view " +
                                    std::to_string(anchor_view) + " out of range");
    std::vector<ViewCell> picks;
    for (size_t v = 0; v < view_count; ++v) {
        if (view_image(v) == view_image(anchor_view)) continue;
        picks.push_back({v, rng.index(cells)});
    }
    if (picks.empty())
        throw std::runtime_error("sample_random_dense_negatives: no negative views available");
    return picks;
}

double threshold_similarity(double q, double similarity_threshold) {
    return q <= similarity_threshold ? -1.0 : q;
}

double score_candidate_set(const Tensor& set_features, const Tensor& anchor_cells,
                           double similarity_threshold) {
    check_cells("score_candidate_set", set_features);
    check_cells("score_candidate_set", anchor_cells);
    Tensor sim = cosine_similarity_matrix(set_features, anchor_cells);
    double total = 0.0;
    for (size_t i = 0; i < sim.size(); ++i) total += threshold_similarity(sim[i], similarity_threshold);
    return total / static_cast<double>(sim.size());
}

std::vector<ViewCell> select_guided_negative_set(const DenseFeatureGrid& views,
                                                 size_t anchor_view, const Tensor& anchor_cells,
                                                 const PairingParams& params, Rng& rng) {
    if (params.candidate_set_count < 1)
        throw std::invalid_argument("select_guided_negative_set: candidate set count must be >= 1");
    std::vector<ViewCell> best;
    double best_score = 0.0;
    for (size_t m = 0; m < params.candidate_set_count; ++m) {
        std::vector<ViewCell> picks = sample_random_dense_negatives(views, anchor_view, rng);
        if (params.candidate_set_count == 1) return picks;  // nothing to score
        double score = score_candidate_set(gather_view_cells(views, picks), anchor_cells,
                                           params.similarity_threshold);
        if (m == 0 || score > best_score) {
            best = std::move(picks);
            best_score = score;
        }
    }
    return best;
}

std::vector<std::vector<size_t>> select_cross_view_negatives(
    const Tensor& anchor_cells, const Tensor& partner_cells,
    const std::vector<size_t>& positive_index, size_t count) {
    check_cells("select_cross_view_negatives", anchor_cells);
    check_cells("select_cross_view_negatives", partner_cells);
    size_t n = anchor_cells.dim(0), m = partner_cells.dim(0);
    if (positive_index.size() != n)
        throw std::invalid_argument("select_cross_view_negatives: " +
                                    std::to_string(positive_index.size()) + " positives for " +
                                    std::to_string(n) + " anchor cells");
    if (count > m - 1)
        throw std::invalid_argument("select_cross_view_negatives: requested " +
                                    std::to_string(count) + " negatives from " +
                                    std::to_string(m) + " cells (one is the positive)");
    std::vector<std::vector<size_t>> out(n);
    if (count == 0) return out;
    Tensor sim = cosine_similarity_matrix(anchor_cells, partner_cells);
    std::vector<size_t> order(m);
    for (size_t k = 0; k < n; ++k) {
        order.clear();
        for (size_t l = 0; l < m; ++l)
            if (l != positive_index[k]) order.push_back(l);
        std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
            if (sim(k, a) != sim(k, b)) return sim(k, a) < sim(k, b);
            return a < b;
        });
        out[k].assign(order.begin(), order.begin() + count);
    }
    return out;
}

std::vector<std::vector<size_t>> select_topk_positives(const Tensor& anchor_cells,
                                                       const Tensor& partner_cells, size_t k) {
    check_cells("select_topk_positives", anchor_cells);
    check_cells("select_topk_positives", partner_cells);
    size_t n = anchor_cells.dim(0), m = partner_cells.dim(0);
    if (k < 1 || k > m)
        throw std::invalid_argument("select_topk_positives: k = " + std::to_string(k) +
                                    " outside [1, " + std::to_string(m) + "]");
    Tensor sim = cosine_similarity_matrix(anchor_cells, partner_cells);
    std::vector<std::vector<size_t>> out(n);
    std::vector<size_t> order(m);
    for (size_t a = 0; a < n; ++a) {
        for (size_t l = 0; l < m; ++l) order[l] = l;
        std::sort(order.begin(), order.end(), [&](size_t x, size_t y) {
            if (sim(a, x) != sim(a, y)) return sim(a, x) > sim(a, y);
            return x < y;
        });
        out[a].assign(order.begin(), order.begin() + k);
    }
    return out;
}

Tensor gather_view_cells(const DenseFeatureGrid& views, const std::vector<ViewCell>& picks) {
    size_t cells = views.grid * views.grid, width = views.width();
    const Tensor rows = views.rows();
    Tensor out = zeros({picks.size(), width});
    for (size_t i = 0; i < picks.size(); ++i) {
        const ViewCell& pc = picks[i];
        if (pc.view >= views.batch || pc.cell >= cells)
            throw std::invalid_argument("gather_view_cells: selection (" +
                                        std::to_string(pc.view) + ", " + std::to_string(pc.cell) +
                                        ") out of range");
        size_t r = pc.view * cells + pc.cell;
        for (size_t c = 0; c < width; ++c) out[i * width + c] = rows[r * width + c];
    }
    return out;
}

}  // namespace dcl
