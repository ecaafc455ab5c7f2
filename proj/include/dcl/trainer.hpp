#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dcl/data.hpp"
#include "dcl/decoder.hpp"
#include "dcl/encoder.hpp"
#include "dcl/losses.hpp"
#include "dcl/pairing.hpp"
#include "dcl/rng.hpp"
#include "dcl/tensor.hpp"

namespace dcl {

enum class Method { simclr, densecl, denseclpp, denseclpp_guided };
enum class LrSchedule { cosine, constant };

struct TrainConfig {
    size_t epochs = 20;
    size_t batch_size = 32;
    double base_lr = 3e-3;
    double weight_decay = 5e-2;
    LrSchedule schedule = LrSchedule::cosine;
    Method method = Method::denseclpp;
    bool symmetrize_loss = false;  ///< also run the mirrored view direction
    GlobalNegativeMode global_negatives = GlobalNegativeMode::all_other_views;
    Aggregation aggregation = Aggregation::gap;
    LossParams loss_params;
    PairingParams pairing_params;
    AugmentParams augment_params;
    SyntheticSpec data;
    EncoderConfig encoder;
    std::optional<DecoderConfig> decoder;  ///< required when recon_weight > 0
    uint64_t seed = 0;
    size_t checkpoint_every = 0;  ///< epochs between snapshots; 0 = end only

    void validate() const;
};

/// Learning rate for a given step. Cosine decays from base_lr at step 0 to
/// zero at the final step; constant returns base_lr everywhere.
double scheduled_lr(const TrainConfig& cfg, size_t step, size_t total_steps);

// ---------------------------------------------------------------------------
// model bundle
// ---------------------------------------------------------------------------

struct Model {
    Encoder encoder;
    Mlp3 global_head;
    Mlp3 dense_head;
    std::optional<Decoder> decoder;

    /// Builds all components from substreams of cfg.seed.
    static Model create(const TrainConfig& cfg);

    /// Name -> tensor pairs across every component, stable order.
    std::vector<std::pair<std::string, Tensor>> parameters() const;
};

/// Unaugmented per-image global features from the frozen backbone (GAP over
/// the token grid, or the CLS embedding). Runs without a tape, in chunks.
Tensor extract_global_features(const Model& model, const Tensor& images,
                               Aggregation aggregation = Aggregation::gap,
                               size_t chunk = 64);

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

/// Adaptive moment estimation with decoupled weight decay. Parameters whose
/// gradient tensor was never allocated in the step are skipped entirely --
/// no moment update and no decay -- so components left out of the forward
/// pass stay bitwise unchanged.
class AdamW {
public:
    AdamW(std::vector<std::pair<std::string, Tensor>> params, double beta1 = 0.9,
          double beta2 = 0.999, double eps = 1e-8, double weight_decay = 0.0);

    void step(double lr);
    size_t steps_taken() const { return t_; }

private:
    struct Slot {
        Tensor param;
        std::vector<double> m, v;
    };
    std::vector<Slot> slots_;
    double beta1_, beta2_, eps_, weight_decay_;
    size_t t_ = 0;
};

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

/// One optimization step over a two-view batch: encode both views, build the
/// configured loss (global InfoNCE, plus the method's dense term, plus the
/// reconstruction term when weighted), backpropagate, and update. Throws
/// std::runtime_error with component diagnostics when the loss is not
/// finite; parameters are left unmodified in that case.
LossBreakdown train_step(Model& model, AdamW& optimizer, const Batch& batch,
                         const TrainConfig& cfg, double lr, Rng& pairing_rng);

struct TrainResult {
    Model model;
    std::vector<LossBreakdown> history;  ///< one record per step
    std::string metrics_path;
    std::string checkpoint_path;
};

/// Full pretraining loop: generates the synthetic dataset, runs
/// epochs * (num_images / batch_size) steps, writes one metrics CSV row per
/// step (flushed, so aborts keep the rows so far), and checkpoints into
/// out_dir. Deterministic in cfg.seed.
TrainResult pretrain(const TrainConfig& cfg, const std::string& out_dir);

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

/// JSON with a version tag, the full training config, and every parameter
/// tensor by name (shape + row-major values).
void save_checkpoint(const std::string& path, const Model& model, const TrainConfig& cfg);

struct LoadedCheckpoint {
    Model model;
    TrainConfig config;
};

/// Rebuilds the model from the stored config and overwrites every parameter
/// from the file. Throws std::runtime_error on version, name, or shape
/// mismatches.
LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace dcl
