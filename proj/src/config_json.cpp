#include "dcl/config_json.hpp"

#include <stdexcept>

namespace dcl {

namespace {

using nlohmann::json;

[[noreturn]] void bad(const std::string& path, const std::string& what) {
    throw std::invalid_argument("config: " + path + ": " + what);
}

/// Fails on any key of `j` missing from `known`.
void reject_unknown(const json& j, const std::string& path,
                    std::initializer_list<const char*> known) {
    if (!j.is_object()) bad(path, "expected an object");
    for (const auto& item : j.items()) {
        bool ok = false;
        for (const char* k : known) ok = ok || item.key() == k;
        if (!ok) bad(path + "." + item.key(), "unknown key");
    }
}

template <typename T>
void fetch(const json& j, const char* key, const std::string& path, T& out) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception&) {
        bad(path + "." + key, "wrong type");
    }
}

void fetch_enum(const json& j, const char* key, const std::string& path, std::string& out) {
    if (!j.contains(key)) return;
    if (!j.at(key).is_string()) bad(path + "." + key, "expected a string");
    out = j.at(key).get<std::string>();
}

const char* schedule_name(LrSchedule s) {
    return s == LrSchedule::cosine ? "cosine" : "constant";
}

LrSchedule schedule_from(const std::string& s, const std::string& path) {
    if (s == "cosine") return LrSchedule::cosine;
    if (s == "constant") return LrSchedule::constant;
    bad(path, "unknown schedule '" + s + "' (cosine, constant)");
}

const char* aggregation_name(Aggregation a) { return a == Aggregation::cls ? "cls" : "gap"; }

Aggregation aggregation_from(const std::string& s, const std::string& path) {
    if (s == "cls") return Aggregation::cls;
    if (s == "gap") return Aggregation::gap;
    bad(path, "unknown aggregation '" + s + "' (cls, gap)");
}

const char* negatives_name(GlobalNegativeMode m) {
    return m == GlobalNegativeMode::all_other_views ? "all_other_views" : "one_per_image";
}

GlobalNegativeMode negatives_from(const std::string& s, const std::string& path) {
    if (s == "all_other_views") return GlobalNegativeMode::all_other_views;
    if (s == "one_per_image") return GlobalNegativeMode::one_per_image;
    bad(path, "unknown negative mode '" + s + "' (all_other_views, one_per_image)");
}

const char* source_name(FeatureSource f) {
    switch (f) {
        case FeatureSource::backbone: return "backbone";
        case FeatureSource::dense_head: return "dense_head";
        case FeatureSource::global_head: return "global_head";
    }
    return "backbone";
}

FeatureSource source_from(const std::string& s, const std::string& path) {
    if (s == "backbone") return FeatureSource::backbone;
    if (s == "dense_head") return FeatureSource::dense_head;
    if (s == "global_head") return FeatureSource::global_head;
    bad(path, "unknown feature source '" + s + "' (backbone, dense_head, global_head)");
}

const char* decoder_kind_name(DecoderKind k) {
    switch (k) {
        case DecoderKind::conv_bicubic: return "conv_bicubic";
        case DecoderKind::conv_transposed: return "conv_transposed";
        case DecoderKind::transformer: return "transformer";
    }
    return "conv_bicubic";
}

DecoderKind decoder_kind_from(const std::string& s, const std::string& path) {
    if (s == "conv_bicubic") return DecoderKind::conv_bicubic;
    if (s == "conv_transposed") return DecoderKind::conv_transposed;
    if (s == "transformer") return DecoderKind::transformer;
    bad(path, "unknown decoder kind '" + s + "' (conv_bicubic, conv_transposed, transformer)");
}

}  // namespace

const char* method_name(Method m) {
    switch (m) {
        case Method::simclr: return "simclr";
        case Method::densecl: return "densecl";
        case Method::denseclpp: return "denseclpp";
        case Method::denseclpp_guided: return "denseclpp_guided";
    }
    return "denseclpp";
}

Method method_from_name(const std::string& name) {
    if (name == "simclr") return Method::simclr;
    if (name == "densecl") return Method::densecl;
    if (name == "denseclpp") return Method::denseclpp;
    if (name == "denseclpp_guided") return Method::denseclpp_guided;
    throw std::invalid_argument(
        "config: unknown method '" + name +
        "' (simclr, densecl, denseclpp, denseclpp_guided)");
}

nlohmann::json train_config_to_json(const TrainConfig& cfg) {
    json j;
    j["version"] = 1;
    j["epochs"] = cfg.epochs;
    j["batch_size"] = cfg.batch_size;
    j["base_lr"] = cfg.base_lr;
    j["weight_decay"] = cfg.weight_decay;
    j["schedule"] = schedule_name(cfg.schedule);
    j["method"] = method_name(cfg.method);
    j["symmetrize_loss"] = cfg.symmetrize_loss;
    j["global_negatives"] = negatives_name(cfg.global_negatives);
    j["aggregation"] = aggregation_name(cfg.aggregation);
    j["seed"] = cfg.seed;
    j["checkpoint_every"] = cfg.checkpoint_every;
    j["loss"] = {
        {"temperature", cfg.loss_params.temperature},
        {"dense_weight", cfg.loss_params.dense_weight},
        {"recon_weight", cfg.loss_params.recon_weight},
    };
    j["pairing"] = {
        {"candidate_set_count", cfg.pairing_params.candidate_set_count},
        {"similarity_threshold", cfg.pairing_params.similarity_threshold},
        {"cross_view_negative_count", cfg.pairing_params.cross_view_negative_count},
        {"positives_per_anchor", cfg.pairing_params.positives_per_anchor},
        {"pair_feature", source_name(cfg.pairing_params.pair_feature)},
        {"normalize_features", cfg.pairing_params.normalize_features},
        {"use_all_dense_negatives", cfg.pairing_params.use_all_dense_negatives},
        {"rng_seed", cfg.pairing_params.rng_seed},
    };
    j["augment"] = {
        {"crop_scale_min", cfg.augment_params.crop_scale_min},
        {"crop_scale_max", cfg.augment_params.crop_scale_max},
        {"flip_prob", cfg.augment_params.flip_prob},
        {"jitter_strength", cfg.augment_params.jitter_strength},
        {"blur_prob", cfg.augment_params.blur_prob},
        {"blur_sigma_min", cfg.augment_params.blur_sigma_min},
        {"blur_sigma_max", cfg.augment_params.blur_sigma_max},
    };
    j["data"] = {
        {"num_images", cfg.data.num_images},
        {"image_size", cfg.data.image_size},
        {"num_classes", cfg.data.num_classes},
        {"min_objects", cfg.data.min_objects},
        {"max_objects", cfg.data.max_objects},
        {"rng_seed", cfg.data.rng_seed},
    };
    j["encoder"] = {
        {"image_size", cfg.encoder.image_size},
        {"patch_size", cfg.encoder.patch_size},
        {"channels", cfg.encoder.channels},
        {"embed_dim", cfg.encoder.embed_dim},
        {"depth", cfg.encoder.depth},
        {"heads", cfg.encoder.heads},
        {"use_cls_token", cfg.encoder.use_cls_token},
        {"proj_hidden", cfg.encoder.proj_hidden},
        {"proj_out", cfg.encoder.proj_out},
    };
    if (cfg.decoder) {
        j["decoder"] = {
            {"kind", decoder_kind_name(cfg.decoder->kind)},
            {"channels_per_layer", cfg.decoder->channels_per_layer},
            {"upsample_factor", cfg.decoder->upsample_factor},
            {"latent_dim", cfg.decoder->latent_dim},
            {"depth", cfg.decoder->depth},
            {"heads", cfg.decoder->heads},
        };
    }
    return j;
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
    reject_unknown(j, "config",
                   {"version", "epochs", "batch_size", "base_lr", "weight_decay", "schedule",
                    "method", "symmetrize_loss", "global_negatives", "aggregation", "seed",
                    "checkpoint_every", "loss", "pairing", "augment", "data", "encoder",
                    "decoder"});
    if (!j.contains("version")) bad("config.version", "missing");
    if (!j.at("version").is_number_integer() || j.at("version").get<int>() != 1) {
        bad("config.version", "unsupported (expected 1)");
    }

    TrainConfig cfg;
    fetch(j, "epochs", "config", cfg.epochs);
    fetch(j, "batch_size", "config", cfg.batch_size);
    fetch(j, "base_lr", "config", cfg.base_lr);
    fetch(j, "weight_decay", "config", cfg.weight_decay);
    fetch(j, "seed", "config", cfg.seed);
    fetch(j, "checkpoint_every", "config", cfg.checkpoint_every);
    fetch(j, "symmetrize_loss", "config", cfg.symmetrize_loss);

    std::string tmp;
    tmp.clear();
    fetch_enum(j, "schedule", "config", tmp);
    if (!tmp.empty()) cfg.schedule = schedule_from(tmp, "config.schedule");
    tmp.clear();
    fetch_enum(j, "method", "config", tmp);
    if (!tmp.empty()) cfg.method = method_from_name(tmp);
    tmp.clear();
    fetch_enum(j, "global_negatives", "config", tmp);
    if (!tmp.empty()) cfg.global_negatives = negatives_from(tmp, "config.global_negatives");
    tmp.clear();
    fetch_enum(j, "aggregation", "config", tmp);
    if (!tmp.empty()) cfg.aggregation = aggregation_from(tmp, "config.aggregation");

    if (j.contains("loss")) {
        const json& s = j.at("loss");
        reject_unknown(s, "config.loss", {"temperature", "dense_weight", "recon_weight"});
        fetch(s, "temperature", "config.loss", cfg.loss_params.temperature);
        fetch(s, "dense_weight", "config.loss", cfg.loss_params.dense_weight);
        fetch(s, "recon_weight", "config.loss", cfg.loss_params.recon_weight);
    }
    if (j.contains("pairing")) {
        const json& s = j.at("pairing");
        reject_unknown(s, "config.pairing",
                       {"candidate_set_count", "similarity_threshold", "cross_view_negative_count",
                        "positives_per_anchor", "pair_feature", "normalize_features",
                        "use_all_dense_negatives", "rng_seed"});
        fetch(s, "candidate_set_count", "config.pairing", cfg.pairing_params.candidate_set_count);
        fetch(s, "similarity_threshold", "config.pairing", cfg.pairing_params.similarity_threshold);
        fetch(s, "cross_view_negative_count", "config.pairing",
              cfg.pairing_params.cross_view_negative_count);
        fetch(s, "positives_per_anchor", "config.pairing", cfg.pairing_params.positives_per_anchor);
        fetch(s, "normalize_features", "config.pairing", cfg.pairing_params.normalize_features);
        fetch(s, "use_all_dense_negatives", "config.pairing",
              cfg.pairing_params.use_all_dense_negatives);
        fetch(s, "rng_seed", "config.pairing", cfg.pairing_params.rng_seed);
        tmp.clear();
        fetch_enum(s, "pair_feature", "config.pairing", tmp);
        if (!tmp.empty()) {
            cfg.pairing_params.pair_feature = source_from(tmp, "config.pairing.pair_feature");
        }
    }
    if (j.contains("augment")) {
        const json& s = j.at("augment");
        reject_unknown(s, "config.augment",
                       {"crop_scale_min", "crop_scale_max", "flip_prob", "jitter_strength",
                        "blur_prob", "blur_sigma_min", "blur_sigma_max"});
        fetch(s, "crop_scale_min", "config.augment", cfg.augment_params.crop_scale_min);
        fetch(s, "crop_scale_max", "config.augment", cfg.augment_params.crop_scale_max);
        fetch(s, "flip_prob", "config.augment", cfg.augment_params.flip_prob);
        fetch(s, "jitter_strength", "config.augment", cfg.augment_params.jitter_strength);
        fetch(s, "blur_prob", "config.augment", cfg.augment_params.blur_prob);
        fetch(s, "blur_sigma_min", "config.augment", cfg.augment_params.blur_sigma_min);
        fetch(s, "blur_sigma_max", "config.augment", cfg.augment_params.blur_sigma_max);
    }
    if (j.contains("data")) {
        const json& s = j.at("data");
        reject_unknown(s, "config.data",
                       {"num_images", "image_size", "num_classes", "min_objects", "max_objects",
                        "rng_seed"});
        fetch(s, "num_images", "config.data", cfg.data.num_images);
        fetch(s, "image_size", "config.data", cfg.data.image_size);
        fetch(s, "num_classes", "config.data", cfg.data.num_classes);
        fetch(s, "min_objects", "config.data", cfg.data.min_objects);
        fetch(s, "max_objects", "config.data", cfg.data.max_objects);
        fetch(s, "rng_seed", "config.data", cfg.data.rng_seed);
    }
    if (j.contains("encoder")) {
        const json& s = j.at("encoder");
        reject_unknown(s, "config.encoder",
                       {"image_size", "patch_size", "channels", "embed_dim", "depth", "heads",
                        "use_cls_token", "proj_hidden", "proj_out"});
        fetch(s, "image_size", "config.encoder", cfg.encoder.image_size);
        fetch(s, "patch_size", "config.encoder", cfg.encoder.patch_size);
        fetch(s, "channels", "config.encoder", cfg.encoder.channels);
        fetch(s, "embed_dim", "config.encoder", cfg.encoder.embed_dim);
        fetch(s, "depth", "config.encoder", cfg.encoder.depth);
        fetch(s, "heads", "config.encoder", cfg.encoder.heads);
        fetch(s, "use_cls_token", "config.encoder", cfg.encoder.use_cls_token);
        fetch(s, "proj_hidden", "config.encoder", cfg.encoder.proj_hidden);
        fetch(s, "proj_out", "config.encoder", cfg.encoder.proj_out);
    }
    if (j.contains("decoder") && !j.at("decoder").is_null()) {
        const json& s = j.at("decoder");
        reject_unknown(s, "config.decoder",
                       {"kind", "channels_per_layer", "upsample_factor", "latent_dim", "depth",
                        "heads"});
        DecoderConfig dec;
        tmp.clear();
        fetch_enum(s, "kind", "config.decoder", tmp);
        if (!tmp.empty()) dec.kind = decoder_kind_from(tmp, "config.decoder.kind");
        fetch(s, "channels_per_layer", "config.decoder", dec.channels_per_layer);
        fetch(s, "upsample_factor", "config.decoder", dec.upsample_factor);
        fetch(s, "latent_dim", "config.decoder", dec.latent_dim);
        fetch(s, "depth", "config.decoder", dec.depth);
        fetch(s, "heads", "config.decoder", dec.heads);
        cfg.decoder = dec;
    }
    return cfg;
}

}  // namespace dcl
