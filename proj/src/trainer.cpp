#include "dcl/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "dcl/config_json.hpp"
#include "json.hpp"

namespace dcl {

void TrainConfig::validate() const {
    if (epochs < 1) throw std::invalid_argument("train config: epochs must be at least 1");
    if (batch_size < 2) throw std::invalid_argument("train config: batch_size must be at least 2");
    if (!(base_lr > 0.0)) throw std::invalid_argument("train config: base_lr must be positive");
    if (weight_decay < 0.0) throw std::invalid_argument("train config: weight_decay must be >= 0");
    loss_params.validate();
    augment_params.validate();
    data.validate();
    encoder.validate();
    if (batch_size > data.num_images) {
        throw std::invalid_argument("train config: batch_size exceeds the dataset size");
    }
    if (encoder.image_size != data.image_size) {
        throw std::invalid_argument("train config: encoder and data disagree on image_size");
    }
    if (encoder.channels != 3) {
        throw std::invalid_argument("train config: synthetic data is three-channel");
    }
    if (aggregation == Aggregation::cls && !encoder.use_cls_token) {
        throw std::invalid_argument("train config: cls aggregation needs use_cls_token");
    }
    pairing_params.validate(encoder.tokens());
    if (pairing_params.pair_feature == FeatureSource::global_head) {
        throw std::invalid_argument("train config: pairing needs per-cell features "
                                    "(backbone or dense_head)");
    }
    if (loss_params.recon_weight > 0.0 && !decoder.has_value()) {
        throw std::invalid_argument("train config: recon_weight > 0 requires a decoder");
    }
    if (decoder.has_value()) decoder->validate(encoder.grid(), encoder.image_size);
}

double scheduled_lr(const TrainConfig& cfg, size_t step, size_t total_steps) {
    if (cfg.schedule == LrSchedule::constant || total_steps <= 1) return cfg.base_lr;
    const double t = static_cast<double>(step) / static_cast<double>(total_steps - 1);
    return cfg.base_lr * 0.5 * (1.0 + std::cos(3.141592653589793 * t));
}

// ---------------------------------------------------------------------------
// model bundle
// ---------------------------------------------------------------------------

Model Model::create(const TrainConfig& cfg) {
    cfg.validate();
    Rng enc_rng(derive_seed(cfg.seed, 10));
    Rng global_rng(derive_seed(cfg.seed, 11));
    Rng dense_rng(derive_seed(cfg.seed, 12));

    const size_t embed = cfg.encoder.embed_dim;
    Model model{Encoder(cfg.encoder, enc_rng),
                Mlp3::create(embed, cfg.encoder.proj_hidden, cfg.encoder.proj_out, global_rng),
                Mlp3::create(embed, cfg.encoder.proj_hidden, cfg.encoder.proj_out, dense_rng),
                std::nullopt};
    if (cfg.decoder) {
        Rng dec_rng(derive_seed(cfg.seed, 13));
        model.decoder.emplace(*cfg.decoder, embed, cfg.encoder.grid(), cfg.encoder.image_size,
                              cfg.encoder.channels, dec_rng);
    }
    return model;
}

std::vector<std::pair<std::string, Tensor>> Model::parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (auto& [name, p] : encoder.parameters()) out.emplace_back("encoder." + name, p);
    global_head.collect("global_head", out);
    dense_head.collect("dense_head", out);
    if (decoder) {
        for (auto& [name, p] : decoder->parameters()) out.emplace_back("decoder." + name, p);
    }
    return out;
}

Tensor extract_global_features(const Model& model, const Tensor& images,
                               Aggregation aggregation, size_t chunk) {
    if (!images.valid() || images.shape().size() != 4) {
        throw std::invalid_argument("extract_global_features: expected [N x S x S x C] images");
    }
    if (chunk == 0) throw std::invalid_argument("extract_global_features: chunk must be positive");
    const size_t n = images.dim(0);
    const size_t s = images.dim(1), c = images.dim(3);
    const size_t stride = s * s * c;
    const size_t width = model.encoder.config().embed_dim;

    Tensor out = zeros({n, width});
    for (size_t start = 0; start < n; start += chunk) {
        const size_t b = std::min(chunk, n - start);
        Tensor sub = zeros({b, s, s, c});
        for (size_t i = 0; i < b * stride; ++i) sub[i] = images[start * stride + i];
        Encoder::Result res = model.encoder.encode(sub);
        GlobalFeature g = aggregate_global(res.dense, res.cls, aggregation);
        for (size_t i = 0; i < b; ++i) {
            for (size_t k = 0; k < width; ++k) out(start + i, k) = g.features(i, k);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

AdamW::AdamW(std::vector<std::pair<std::string, Tensor>> params, double beta1, double beta2,
             double eps, double weight_decay)
    : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {
    for (auto& [name, p] : params) {
        (void)name;
        slots_.push_back({p, std::vector<double>(p.size(), 0.0),
                          std::vector<double>(p.size(), 0.0)});
    }
}

void AdamW::step(double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (Slot& slot : slots_) {
        if (!slot.param.has_grad()) continue;  // component absent from the step
        const std::vector<double>& g = slot.param.grad();
        for (size_t i = 0; i < g.size(); ++i) {
            slot.m[i] = beta1_ * slot.m[i] + (1.0 - beta1_) * g[i];
            slot.v[i] = beta2_ * slot.v[i] + (1.0 - beta2_) * g[i] * g[i];
            const double mhat = slot.m[i] / c1;
            const double vhat = slot.v[i] / c2;
            slot.param[i] -=
                lr * (mhat / (std::sqrt(vhat) + eps_) + weight_decay_ * slot.param[i]);
        }
    }
}

// ---------------------------------------------------------------------------
// train step
// ---------------------------------------------------------------------------

namespace {

/// Untaped copy of one projected view as a [cells x width] matrix, with
/// optional row normalization. Selection features only; carries no gradient.
Tensor plain_view_matrix(const DenseFeatureGrid& grids_a, const DenseFeatureGrid& grids_b,
                         size_t view, bool normalize) {
    const DenseFeatureGrid& grid = view % 2 == 0 ? grids_a : grids_b;
    const size_t image = view_image(view);
    const size_t cells = grid.grid * grid.grid, w = grid.width();
    Tensor out = zeros({cells, w});
    for (size_t i = 0; i < cells * w; ++i) out[i] = grid.features[image * cells * w + i];
    if (normalize) {
        for (size_t r = 0; r < cells; ++r) {
            double norm = 0.0;
            for (size_t k = 0; k < w; ++k) norm += out[r * w + k] * out[r * w + k];
            norm = std::sqrt(norm);
            if (norm > 0.0) {
                for (size_t k = 0; k < w; ++k) out[r * w + k] /= norm;
            }
        }
    }
    return out;
}

/// Untaped interleaved [2B x S x S x w] grid over both view batches, view 2i
/// from a's image i and view 2i+1 from b's. Negative-sampling pool.
DenseFeatureGrid interleave_views(const DenseFeatureGrid& a, const DenseFeatureGrid& b,
                                  bool normalize) {
    DenseFeatureGrid all;
    all.batch = 2 * a.batch;
    all.grid = a.grid;
    all.source = a.source;
    all.normalized = normalize;
    const size_t cells = a.grid * a.grid, w = a.width();
    all.features = zeros({all.batch, a.grid, a.grid, w});
    for (size_t v = 0; v < all.batch; ++v) {
        Tensor m = plain_view_matrix(a, b, v, normalize);
        for (size_t i = 0; i < cells * w; ++i) all.features[v * cells * w + i] = m[i];
    }
    return all;
}

}  // namespace

LossBreakdown train_step(Model& model, AdamW& optimizer, const Batch& batch,
                         const TrainConfig& cfg, double lr, Rng& pairing_rng) {
    const size_t b = batch.view_a.dim(0);
    if (b < 2) throw std::invalid_argument("train_step: need at least two images in the batch");
    const double tau = cfg.loss_params.temperature;

    LossParams effective = cfg.loss_params;
    if (cfg.method == Method::simclr) effective.dense_weight = 0.0;
    const bool want_dense = effective.dense_weight != 0.0;
    const bool want_recon = effective.recon_weight != 0.0;

    Tape tape;
    Encoder::Result enc_a = model.encoder.encode(batch.view_a);
    Encoder::Result enc_b = model.encoder.encode(batch.view_b);

    // global branch: aggregate, project, normalize
    GlobalFeature raw_ga = aggregate_global(enc_a.dense, enc_a.cls, cfg.aggregation);
    GlobalFeature raw_gb = aggregate_global(enc_b.dense, enc_b.cls, cfg.aggregation);
    Tensor za = l2_normalize(project_global(raw_ga, model.global_head).features);
    Tensor zb = l2_normalize(project_global(raw_gb, model.global_head).features);

    Tensor global_loss = info_nce_global(za, zb, tau, cfg.global_negatives);
    if (cfg.symmetrize_loss) {
        global_loss = scale(add(global_loss, info_nce_global(zb, za, tau, cfg.global_negatives)),
                            0.5);
    }

    Tensor dense_loss;
    if (want_dense) {
        const PairingParams& pp = cfg.pairing_params;
        const size_t cells = model.encoder.config().tokens();
        const size_t width = model.encoder.config().proj_out;

        DenseFeatureGrid da = project_dense(enc_a.dense, model.dense_head);
        DenseFeatureGrid db = project_dense(enc_b.dense, model.dense_head);
        Tensor norm_a = l2_normalize(da.rows());  // [B*cells x width], taped
        Tensor norm_b = l2_normalize(db.rows());
        DenseFeatureGrid grid_na = da;
        grid_na.features = norm_a.reshaped({b, da.grid, da.grid, width});
        grid_na.normalized = true;
        DenseFeatureGrid grid_nb = db;
        grid_nb.features = norm_b.reshaped({b, db.grid, db.grid, width});
        grid_nb.normalized = true;

        // selection-side features (no gradient): configured source
        const bool pair_on_backbone = pp.pair_feature == FeatureSource::backbone;
        const DenseFeatureGrid& sel_a = pair_on_backbone ? enc_a.dense : grid_na;
        const DenseFeatureGrid& sel_b = pair_on_backbone ? enc_b.dense : grid_nb;

        // normalized projected pool the loss draws negative feature rows from
        // (detached: negatives act as a feature bank)
        DenseFeatureGrid all_views = interleave_views(grid_na, grid_nb, true);
        // guided scoring runs in the pairing feature space, which may differ
        // in width from the projected space above
        DenseFeatureGrid sel_views =
            pair_on_backbone ? interleave_views(sel_a, sel_b, false) : all_views;

        // detached global rows for the densecl negative style
        Tensor za_plain = zeros({b, width});
        Tensor zb_plain = zeros({b, width});
        for (size_t i = 0; i < b * width; ++i) {
            za_plain[i] = za[i];
            zb_plain[i] = zb[i];
        }

        auto direction = [&](size_t parity) {
            const Tensor& anchors_all = parity == 0 ? norm_a : norm_b;
            const Tensor& partners_all = parity == 0 ? norm_b : norm_a;
            Tensor sum;
            for (size_t img = 0; img < b; ++img) {
                const size_t anchor_view = 2 * img + parity;
                Tensor anchor = slice_rows(anchors_all, img * cells, (img + 1) * cells);
                Tensor partner = slice_rows(partners_all, img * cells, (img + 1) * cells);
                Tensor pa = plain_view_matrix(parity == 0 ? sel_a : sel_b,
                                              parity == 0 ? sel_b : sel_a, 2 * img,
                                              pp.normalize_features);
                Tensor pb = plain_view_matrix(parity == 0 ? sel_a : sel_b,
                                              parity == 0 ? sel_b : sel_a, 2 * img + 1,
                                              pp.normalize_features);
                // plain_view_matrix picks by view parity within the pair; for
                // the mirrored direction the roles swap, hence the argument
                // order above keeps "pa" the anchor view's cells.

                std::vector<size_t> matches = match_positives(pa, pb);

                Tensor negatives;
                if (cfg.method == Method::densecl) {
                    std::vector<size_t> rows;
                    for (size_t j = 0; j < b; ++j) {
                        if (j != img) rows.push_back(j);
                    }
                    Tensor anchor_side = parity == 0 ? za_plain : zb_plain;
                    Tensor other_side = parity == 0 ? zb_plain : za_plain;
                    Tensor own = gather_rows(anchor_side, rows);
                    negatives = cfg.global_negatives == GlobalNegativeMode::all_other_views
                                    ? concat_rows({own, gather_rows(other_side, rows)})
                                    : own;
                } else {
                    std::vector<ViewCell> picks;
                    if (cfg.method == Method::denseclpp_guided) {
                        picks = select_guided_negative_set(sel_views, anchor_view, pa, pp,
                                                           pairing_rng);
                    } else if (pp.use_all_dense_negatives) {
                        for (size_t v = 0; v < 2 * b; ++v) {
                            if (view_image(v) == img) continue;
                            for (size_t cell = 0; cell < cells; ++cell) picks.push_back({v, cell});
                        }
                    } else {
                        picks = sample_random_dense_negatives(all_views, anchor_view, pairing_rng);
                    }
                    negatives = gather_view_cells(all_views, picks);
                }

                std::vector<std::vector<size_t>> cross;
                if (pp.cross_view_negative_count > 0) {
                    cross = select_cross_view_negatives(pa, pb, matches,
                                                        pp.cross_view_negative_count);
                }

                Tensor term;
                if (cfg.method == Method::densecl) {
                    term = densecl_dense_loss(anchor, partner, negatives, matches, tau);
                } else if (pp.positives_per_anchor <= 1) {
                    term = denseclpp_dense_loss(anchor, partner, negatives, matches, cross, tau);
                } else {
                    std::vector<std::vector<size_t>> tops =
                        select_topk_positives(pa, pb, pp.positives_per_anchor);
                    term = multi_positive_dense_loss(anchor, partner, tops, negatives, cross, tau);
                }
                sum = sum.valid() ? add(sum, term) : term;
            }
            return scale(sum, 1.0 / static_cast<double>(b));
        };

        dense_loss = direction(0);
        if (cfg.symmetrize_loss) dense_loss = scale(add(dense_loss, direction(1)), 0.5);
    }

    Tensor recon_loss;
    if (want_recon) {
        recon_loss = reconstruction_loss(batch.view_a, model.decoder->decode(enc_a.dense));
        if (cfg.symmetrize_loss) {
            Tensor other = reconstruction_loss(batch.view_b, model.decoder->decode(enc_b.dense));
            recon_loss = scale(add(recon_loss, other), 0.5);
        }
    }

    CombinedLoss out = combine(global_loss, dense_loss, recon_loss, effective);
    if (!std::isfinite(out.breakdown.total)) {
        double max_logit = 0.0;
        const size_t w = za.cols();
        for (size_t i = 0; i < b; ++i) {
            for (size_t j = 0; j < b; ++j) {
                double dot = 0.0;
                for (size_t k = 0; k < w; ++k) dot += za(i, k) * zb(j, k);
                max_logit = std::max(max_logit, std::abs(dot) / tau);
            }
        }
        char msg[256];
        std::snprintf(msg, sizeof(msg),
                      "train_step: non-finite loss (global=%g dense=%g recon=%g total=%g "
                      "max_global_logit=%g)",
                      out.breakdown.global_loss, out.breakdown.dense_loss,
                      out.breakdown.recon_loss, out.breakdown.total, max_logit);
        throw std::runtime_error(msg);
    }

    tape.backward(out.total);
    optimizer.step(lr);
    return out.breakdown;
}

// ---------------------------------------------------------------------------
// pretraining loop
// ---------------------------------------------------------------------------

TrainResult pretrain(const TrainConfig& cfg, const std::string& out_dir) {
    cfg.validate();
    std::filesystem::create_directories(out_dir);

    Dataset ds = generate_dataset(cfg.data);
    Model model = Model::create(cfg);
    AdamW optimizer(model.parameters(), 0.9, 0.999, 1e-8, cfg.weight_decay);

    const size_t steps_per_epoch = cfg.data.num_images / cfg.batch_size;
    const size_t total_steps = cfg.epochs * steps_per_epoch;
    const uint64_t batch_master = derive_seed(cfg.seed, 1);
    const uint64_t pair_master = derive_seed(cfg.pairing_params.rng_seed, 2);

    const std::string metrics_path = out_dir + "/metrics.csv";
    std::ofstream metrics(metrics_path, std::ios::trunc);
    if (!metrics) throw std::runtime_error("cannot open for writing: " + metrics_path);
    metrics << "step,epoch,lr,global_loss,dense_loss,recon_loss,total\n" << std::flush;

    TrainResult result{std::move(model), {}, metrics_path, out_dir + "/checkpoint.json"};
    result.history.reserve(total_steps);

    for (size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (size_t s = 0; s < steps_per_epoch; ++s) {
            const size_t step = epoch * steps_per_epoch + s;
            Rng batch_rng(derive_seed(batch_master, step));
            Batch batch = make_batch(ds.images, cfg.batch_size, cfg.augment_params, batch_rng);
            Rng pairing_rng(derive_seed(pair_master, step));
            const double lr = scheduled_lr(cfg, step, total_steps);

            LossBreakdown bd = train_step(result.model, optimizer, batch, cfg, lr, pairing_rng);

            char row[256];
            std::snprintf(row, sizeof(row), "%zu,%zu,%.17g,%.17g,%.17g,%.17g,%.17g", step, epoch,
                          lr, bd.global_loss, bd.dense_loss, bd.recon_loss, bd.total);
            metrics << row << '\n' << std::flush;
            result.history.push_back(bd);
        }
        if (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 &&
            epoch + 1 < cfg.epochs) {
            save_checkpoint(out_dir + "/checkpoint_epoch" + std::to_string(epoch + 1) + ".json",
                            result.model, cfg);
        }
    }
    save_checkpoint(result.checkpoint_path, result.model, cfg);
    return result;
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

void save_checkpoint(const std::string& path, const Model& model, const TrainConfig& cfg) {
    nlohmann::json j;
    j["version"] = 1;
    j["config"] = train_config_to_json(cfg);
    nlohmann::json params = nlohmann::json::object();
    for (const auto& [name, p] : model.parameters()) {
        std::vector<double> data(p.size());
        for (size_t i = 0; i < p.size(); ++i) data[i] = p[i];
        params[name] = {{"shape", p.shape()}, {"data", std::move(data)}};
    }
    j["params"] = std::move(params);

    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open for writing: " + path);
    f << j.dump() << '\n';
    if (!f) throw std::runtime_error("write failed: " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open: " + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("bad checkpoint in " + path + ": " + e.what());
    }
    if (j.value("version", 0) != 1) {
        throw std::runtime_error("unsupported checkpoint version in " + path);
    }

    TrainConfig cfg;
    try {
        cfg = train_config_from_json(j.at("config"));
    } catch (const std::exception& e) {
        throw std::runtime_error("bad checkpoint config in " + path + ": " + e.what());
    }

    LoadedCheckpoint out{Model::create(cfg), cfg};
    const nlohmann::json& params = j.at("params");
    size_t seen = 0;
    for (auto& [name, p] : out.model.parameters()) {
        if (!params.contains(name)) {
            throw std::runtime_error("checkpoint " + path + " is missing parameter " + name);
        }
        const nlohmann::json& entry = params.at(name);
        const std::vector<size_t> shape = entry.at("shape").get<std::vector<size_t>>();
        if (shape != p.shape()) {
            throw std::runtime_error("checkpoint " + path + ": shape mismatch for " + name);
        }
        const std::vector<double> data = entry.at("data").get<std::vector<double>>();
        if (data.size() != p.size()) {
            throw std::runtime_error("checkpoint " + path + ": size mismatch for " + name);
        }
        for (size_t i = 0; i < p.size(); ++i) p[i] = data[i];
        ++seen;
    }
    if (seen != params.size()) {
        throw std::runtime_error("checkpoint " + path + " holds unknown parameters");
    }
    return out;
}

}  // namespace dcl
