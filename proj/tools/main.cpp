#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "dcl/config_json.hpp"
#include "dcl/eval.hpp"
#include "dcl/gradcheck.hpp"
#include "dcl/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// ---------------------------------------------------------------------------
// experiment config: the training config plus probe/analyze settings, one
// versioned JSON document
// ---------------------------------------------------------------------------

struct ProbeSettings {
    size_t epochs = 200;
    double lr = 0.5;
    double train_fraction = 0.8;
    double threshold = 0.5;
    uint64_t seed = 0;
};

struct AnalyzeSettings {
    size_t images = 32;
    size_t bins = 40;
    uint64_t seed = 0;
};

struct ExperimentConfig {
    dcl::TrainConfig train;
    ProbeSettings probe;
    AnalyzeSettings analyze;
    std::string checkpoint_path;  // lets a probe/analyze echo reproduce itself
};

[[noreturn]] void bad_key(const std::string& block, const std::string& key) {
    throw std::invalid_argument("config: unknown key \"" + block + "." + key + "\"");
}

double fetch_number(const json& j, const std::string& block, const char* key, double dflt) {
    if (!j.contains(key)) return dflt;
    if (!j.at(key).is_number())
        throw std::invalid_argument("config: " + block + "." + key + " must be a number");
    return j.at(key).get<double>();
}

uint64_t fetch_unsigned(const json& j, const std::string& block, const char* key, uint64_t dflt) {
    if (!j.contains(key)) return dflt;
    if (!j.at(key).is_number_unsigned())
        throw std::invalid_argument("config: " + block + "." + key +
                                    " must be an unsigned integer");
    return j.at(key).get<uint64_t>();
}

ProbeSettings probe_from_json(const json& j) {
    static const char* allowed[] = {"epochs", "lr", "train_fraction", "threshold", "seed"};
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool known = false;
        for (const char* k : allowed) known = known || it.key() == k;
        if (!known) bad_key("probe", it.key());
    }
    ProbeSettings p;
    p.epochs = fetch_unsigned(j, "probe", "epochs", p.epochs);
    p.lr = fetch_number(j, "probe", "lr", p.lr);
    p.train_fraction = fetch_number(j, "probe", "train_fraction", p.train_fraction);
    p.threshold = fetch_number(j, "probe", "threshold", p.threshold);
    p.seed = fetch_unsigned(j, "probe", "seed", p.seed);
    return p;
}

AnalyzeSettings analyze_from_json(const json& j) {
    static const char* allowed[] = {"images", "bins", "seed"};
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool known = false;
        for (const char* k : allowed) known = known || it.key() == k;
        if (!known) bad_key("analyze", it.key());
    }
    AnalyzeSettings a;
    a.images = fetch_unsigned(j, "analyze", "images", a.images);
    a.bins = fetch_unsigned(j, "analyze", "bins", a.bins);
    a.seed = fetch_unsigned(j, "analyze", "seed", a.seed);
    return a;
}

ExperimentConfig experiment_from_json(json j) {
    if (!j.is_object()) throw std::invalid_argument("config: top level must be a JSON object");
    ExperimentConfig ec;
    if (j.contains("probe")) {
        if (!j.at("probe").is_object())
            throw std::invalid_argument("config: probe must be an object");
        ec.probe = probe_from_json(j.at("probe"));
        j.erase("probe");
    }
    if (j.contains("analyze")) {
        if (!j.at("analyze").is_object())
            throw std::invalid_argument("config: analyze must be an object");
        ec.analyze = analyze_from_json(j.at("analyze"));
        j.erase("analyze");
    }
    if (j.contains("checkpoint_path")) {
        if (!j.at("checkpoint_path").is_string())
            throw std::invalid_argument("config: checkpoint_path must be a string");
        ec.checkpoint_path = j.at("checkpoint_path").get<std::string>();
        j.erase("checkpoint_path");
    }
    ec.train = dcl::train_config_from_json(j);
    return ec;
}

json experiment_to_json(const ExperimentConfig& ec) {
    json j = dcl::train_config_to_json(ec.train);
    j["probe"] = {{"epochs", ec.probe.epochs},
                  {"lr", ec.probe.lr},
                  {"train_fraction", ec.probe.train_fraction},
                  {"threshold", ec.probe.threshold},
                  {"seed", ec.probe.seed}};
    j["analyze"] = {{"images", ec.analyze.images},
                    {"bins", ec.analyze.bins},
                    {"seed", ec.analyze.seed}};
    if (!ec.checkpoint_path.empty()) j["checkpoint_path"] = ec.checkpoint_path;
    return j;
}

// ---------------------------------------------------------------------------
// shared plumbing
// ---------------------------------------------------------------------------

std::string out_root() {
    const char* env = std::getenv("DCLPP_OUT_ROOT");
    return (env && *env) ? std::string(env) : std::string("runs");
}

/// Output directories are append-never: an existing non-empty directory is
/// refused unless --force, which replaces it wholesale.
fs::path prepare_out_dir(const std::string& requested, const char* cmd, bool force) {
    fs::path dir = requested.empty() ? fs::path(out_root()) / cmd : fs::path(requested);
    if (fs::exists(dir) && !fs::is_empty(dir)) {
        if (!force)
            throw std::runtime_error("output directory " + dir.string() +
                                     " is not empty; pass --force to replace it");
        fs::remove_all(dir);
    }
    fs::create_directories(dir);
    return dir;
}

json read_config_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open config file: " + path);
    try {
        return json::parse(f);
    } catch (const json::parse_error& e) {
        throw std::runtime_error("config parse error in " + path + ": " + e.what());
    }
}

void write_echo(const fs::path& dir, const ExperimentConfig& ec) {
    std::ofstream f(dir / "config.json");
    f << experiment_to_json(ec).dump(2) << "\n";
}

void check_encoder_match(const dcl::EncoderConfig& cfg, const dcl::EncoderConfig& ckpt) {
    auto fail = [](const char* field, size_t a, size_t b) {
        throw std::runtime_error(std::string("config/checkpoint mismatch on encoder.") + field +
                                 ": " + std::to_string(a) + " vs " + std::to_string(b));
    };
    if (cfg.image_size != ckpt.image_size) fail("image_size", cfg.image_size, ckpt.image_size);
    if (cfg.patch_size != ckpt.patch_size) fail("patch_size", cfg.patch_size, ckpt.patch_size);
    if (cfg.channels != ckpt.channels) fail("channels", cfg.channels, ckpt.channels);
    if (cfg.embed_dim != ckpt.embed_dim) fail("embed_dim", cfg.embed_dim, ckpt.embed_dim);
    if (cfg.depth != ckpt.depth) fail("depth", cfg.depth, ckpt.depth);
    if (cfg.heads != ckpt.heads) fail("heads", cfg.heads, ckpt.heads);
    if (cfg.proj_hidden != ckpt.proj_hidden) fail("proj_hidden", cfg.proj_hidden, ckpt.proj_hidden);
    if (cfg.proj_out != ckpt.proj_out) fail("proj_out", cfg.proj_out, ckpt.proj_out);
    if (cfg.use_cls_token != ckpt.use_cls_token)
        throw std::runtime_error("config/checkpoint mismatch on encoder.use_cls_token");
}

/// Combines an optional --config with an optional --checkpoint: the model
/// always comes from the checkpoint; a config, when given, must agree with it
/// on every encoder dimension and then supplies data/eval settings.
struct ProbeInputs {
    ExperimentConfig ec;
    dcl::LoadedCheckpoint loaded;
};

ProbeInputs load_probe_inputs(std::string checkpoint, const std::string& config_path) {
    ExperimentConfig ec;
    bool have_config = !config_path.empty();
    if (have_config) ec = experiment_from_json(read_config_file(config_path));
    if (checkpoint.empty()) checkpoint = ec.checkpoint_path;
    if (checkpoint.empty())
        throw std::runtime_error(
            "no checkpoint given: pass --checkpoint or set checkpoint_path in the config");
    dcl::LoadedCheckpoint loaded = dcl::load_checkpoint(checkpoint);
    if (have_config)
        check_encoder_match(ec.train.encoder, loaded.config.encoder);
    else
        ec.train = loaded.config;
    ec.checkpoint_path = checkpoint;
    ec.train.validate();
    return {std::move(ec), std::move(loaded)};
}

dcl::Tensor image_at(const dcl::Tensor& images, size_t i) {
    const size_t s = images.dim(1), c = images.dim(3);
    dcl::Tensor flat = images.reshaped({images.dim(0), s * s * c});
    return dcl::gather_rows(flat, {i}).reshaped({s, s, c});
}

/// Encodes a view batch and returns the normalized dense-projection grid —
/// the feature space the dense objective trains.
dcl::DenseFeatureGrid projected_grid(const dcl::Model& model, const dcl::Tensor& views) {
    dcl::Encoder::Result r = model.encoder.encode(views);
    dcl::DenseFeatureGrid pg = dcl::project_dense(r.dense, model.dense_head);
    dcl::Tensor norm = dcl::l2_normalize(pg.rows());
    dcl::DenseFeatureGrid out = pg;
    out.features = norm.reshaped({pg.batch, pg.grid, pg.grid, pg.width()});
    out.normalized = true;
    return out;
}

// ---------------------------------------------------------------------------
// subcommands
// ---------------------------------------------------------------------------

int cmd_pretrain(const std::string& config_path, const std::string& out, bool have_seed,
                 uint64_t seed, bool force) {
    ExperimentConfig ec;
    if (!config_path.empty()) ec = experiment_from_json(read_config_file(config_path));
    if (have_seed) ec.train.seed = seed;
    ec.train.validate();

    fs::path dir = prepare_out_dir(out, "pretrain", force);
    write_echo(dir, ec);  // early echo so a crashed run still leaves its config

    dcl::TrainResult r = dcl::pretrain(ec.train, dir.string());
    // re-echo with the checkpoint path filled in: the file is now enough for
    // probe/analyze to run without further flags
    ec.checkpoint_path = r.checkpoint_path;
    write_echo(dir, ec);
    const dcl::LossBreakdown& last = r.history.back();
    std::printf("pretrain: %zu steps, final total %.6f (global %.6f, dense %.6f, recon %.6f)\n",
                r.history.size(), last.total, last.global_loss, last.dense_loss, last.recon_loss);
    std::printf("checkpoint: %s\nmetrics: %s\n", r.checkpoint_path.c_str(),
                r.metrics_path.c_str());
    return 0;
}

int cmd_probe(const std::string& checkpoint, const std::string& config_path,
              const std::string& out, bool have_seed, uint64_t seed, bool force) {
    ProbeInputs in = load_probe_inputs(checkpoint, config_path);
    if (have_seed) in.ec.probe.seed = seed;

    fs::path dir = prepare_out_dir(out, "probe", force);
    write_echo(dir, in.ec);

    dcl::Dataset ds = dcl::generate_dataset(in.ec.train.data);
    dcl::Tensor feats =
        dcl::extract_global_features(in.loaded.model, ds.images, in.ec.train.aggregation);
    dcl::Rng split_rng(dcl::derive_seed(in.ec.probe.seed, 71));
    dcl::SplitIndices split =
        dcl::split_train_eval(ds.images.dim(0), in.ec.probe.train_fraction, split_rng);

    dcl::Tensor train_f = dcl::gather_rows(feats, split.train);
    dcl::Tensor eval_f = dcl::gather_rows(feats, split.eval);
    dcl::MultiLabelTargets train_y{dcl::gather_rows(ds.targets.labels, split.train)};
    dcl::Tensor eval_y = dcl::gather_rows(ds.targets.labels, split.eval);

    dcl::LinearProbe probe =
        dcl::train_linear_probe(train_f, train_y, in.ec.probe.epochs, in.ec.probe.lr);
    dcl::Tensor scores = dcl::probe_scores(probe, eval_f);
    dcl::MetricsRecord rec = dcl::evaluate_scores(scores, eval_y, in.ec.probe.threshold);

    json mj;
    mj["map"] = rec.map;
    mj["f1"] = rec.f1;
    mj["threshold"] = rec.threshold;
    mj["per_class_ap"] = rec.per_class_ap;
    mj["evaluated_classes"] = rec.evaluated_classes;
    mj["skipped_classes"] = rec.skipped_classes;
    mj["train_images"] = split.train.size();
    mj["eval_images"] = split.eval.size();
    {
        std::ofstream f(dir / "metrics.json");
        f << mj.dump(2) << "\n";
    }
    dcl::append_metrics_csv((dir / "metrics.csv").string(), "probe", rec);

    std::printf("probe: map %.4f, f1 %.4f on %zu held-out images (%zu classes, %zu skipped)\n",
                rec.map, rec.f1, split.eval.size(), rec.evaluated_classes.size(),
                rec.skipped_classes.size());
    std::printf("metrics: %s\n", (dir / "metrics.json").string().c_str());
    return 0;
}

int cmd_analyze(const std::string& checkpoint, const std::string& config_path,
                const std::string& out, bool have_seed, uint64_t seed, bool force) {
    ProbeInputs in = load_probe_inputs(checkpoint, config_path);
    if (have_seed) in.ec.analyze.seed = seed;

    fs::path dir = prepare_out_dir(out, "analyze", force);
    write_echo(dir, in.ec);

    dcl::Dataset ds = dcl::generate_dataset(in.ec.train.data);
    const size_t n = std::min<size_t>(in.ec.analyze.images, ds.images.dim(0));
    if (n < 2) throw std::runtime_error("analyze: need at least 2 images");
    const size_t anchors = n / 2;  // the rest provide cross-image cells

    const size_t s = in.ec.train.data.image_size;
    dcl::Tensor view_a = dcl::zeros({anchors, s, s, 3});
    dcl::Tensor view_b = dcl::zeros({anchors, s, s, 3});
    dcl::Tensor others = dcl::zeros({n - anchors, s, s, 3});
    auto put = [&](dcl::Tensor& dst, size_t row, const dcl::Tensor& img) {
        const size_t stride = s * s * 3;
        for (size_t k = 0; k < stride; ++k) dst[row * stride + k] = img[k];
    };
    for (size_t i = 0; i < anchors; ++i) {
        dcl::Rng rng(dcl::derive_seed(in.ec.analyze.seed, 100 + i));
        dcl::Tensor img = image_at(ds.images, i);
        put(view_a, i, dcl::augment_view(img, in.ec.train.augment_params, rng));
        put(view_b, i, dcl::augment_view(img, in.ec.train.augment_params, rng));
    }
    for (size_t i = anchors; i < n; ++i) {
        dcl::Rng rng(dcl::derive_seed(in.ec.analyze.seed, 500 + i));
        put(others, i - anchors, dcl::augment_view(image_at(ds.images, i),
                                                   in.ec.train.augment_params, rng));
    }

    dcl::DenseFeatureGrid ga = projected_grid(in.loaded.model, view_a);
    dcl::DenseFeatureGrid gb = projected_grid(in.loaded.model, view_b);
    dcl::DenseFeatureGrid go = projected_grid(in.loaded.model, others);
    dcl::HistogramRecord hist = dcl::similarity_histograms(ga, gb, {go}, in.ec.analyze.bins);
    dcl::write_histogram_csv((dir / "similarity.csv").string(), hist);

    size_t intra = 0, inter = 0;
    for (size_t c : hist.intra_counts) intra += c;
    for (size_t c : hist.inter_counts) inter += c;
    std::printf("analyze: %zu anchor images vs %zu others, %zu bins (%zu intra, %zu inter pairs)\n",
                anchors, n - anchors, in.ec.analyze.bins, intra, inter);
    std::printf("histograms: %s\n", (dir / "similarity.csv").string().c_str());
    return 0;
}

int cmd_gradcheck(size_t seeds) {
    std::vector<dcl::GradCheckCase> cases = dcl::gradcheck_suite(seeds);
    bool ok = true;
    for (const dcl::GradCheckCase& c : cases) {
        const bool pass = c.worst_rel_error < 1e-4;
        ok = ok && pass;
        std::printf("%-30s seeds %2zu  worst rel err %.3e  %s\n", c.name.c_str(), c.seeds,
                    c.worst_rel_error, pass ? "PASS" : "FAIL");
    }
    std::printf("gradcheck: %s (%zu cases)\n", ok ? "all cases passed" : "FAILURES above",
                cases.size());
    return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"contrastive pretraining workbench: global + dense objectives on synthetic "
                 "multi-object images, with linear-probe evaluation and feature analysis"};
    app.require_subcommand(1);

    std::string config_path, out_dir, checkpoint;
    uint64_t seed = 0;
    bool force = false;
    size_t gradcheck_seeds = 20;

    auto add_common = [&](CLI::App* cmd, bool with_checkpoint) {
        cmd->add_option("--config", config_path,
                        "experiment config JSON; omitted keys use built-in defaults");
        cmd->add_option("--out", out_dir, "output directory (default $DCLPP_OUT_ROOT/<command>)");
        cmd->add_flag("--force", force, "replace a non-empty output directory");
        if (with_checkpoint)
            cmd->add_option("--checkpoint", checkpoint, "checkpoint JSON from a pretrain run");
        return cmd->add_option("--seed", seed, "seed override");
    };

    CLI::App* pre = app.add_subcommand(
        "pretrain", "train encoder + heads on the synthetic set; writes checkpoint and metrics");
    CLI::Option* pre_seed = add_common(pre, false);

    CLI::App* probe = app.add_subcommand(
        "probe", "fit a linear classifier on frozen features and report map/f1");
    CLI::Option* probe_seed = add_common(probe, true);

    CLI::App* analyze = app.add_subcommand(
        "analyze", "dense-feature cosine similarity histograms (same image vs other images)");
    CLI::Option* analyze_seed = add_common(analyze, true);

    CLI::App* gradcheck = app.add_subcommand(
        "gradcheck", "finite-difference verification of every loss and trainable module");
    gradcheck->add_option("--seeds", gradcheck_seeds, "random instances per case (default 20)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (app.got_subcommand(pre))
            return cmd_pretrain(config_path, out_dir, pre_seed->count() > 0, seed, force);
        if (app.got_subcommand(probe))
            return cmd_probe(checkpoint, config_path, out_dir, probe_seed->count() > 0, seed,
                             force);
        if (app.got_subcommand(analyze))
            return cmd_analyze(checkpoint, config_path, out_dir, analyze_seed->count() > 0, seed,
                               force);
        if (app.got_subcommand(gradcheck)) return cmd_gradcheck(gradcheck_seeds);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
