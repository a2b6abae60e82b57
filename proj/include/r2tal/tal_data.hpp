// Copyright (c) 2026 The r2tal Authors
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic temporal-action-localization data: class-specific quadrature
// sinusoids embedded in noise, with per-segment annotations in seconds.
// Datasets are written as one f32 signal container plus one JSON annotation
// file per sample, under per-split directories.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "r2tal/checkpoint.hpp"
#include "r2tal/errors.hpp"
#include "r2tal/json.hpp"
#include "r2tal/rng.hpp"
#include "r2tal/tensor.hpp"

namespace r2tal {

struct SegmentAnnotation {
    double start_s = 0;
    double end_s = 0;
    int label = 0;

    bool operator==(const SegmentAnnotation&) const = default;
};

template <typename T>
struct TalSample {
    std::string id;
    Tensor<T> signal; // [T x C]
    double duration_s = 0;
    std::vector<SegmentAnnotation> segments;

    /// Input frame rate is derived, never stored per sample.
    double fps() const { return double(signal.dim(0)) / duration_s; }
};

template <typename T>
struct TalDataset {
    std::int64_t channels = 0;
    std::int64_t classes = 0;
    std::vector<TalSample<T>> samples;
};

struct LengthBucket {
    std::int64_t min_frames = 8;
    std::int64_t max_frames = 32;
    double weight = 1.0;
};

struct DataGenConfig {
    std::int64_t frames = 128;   // T per sample
    std::int64_t channels = 8;   // C
    std::int64_t classes = 3;
    double noise = 0.1;          // background sigma
    double fps = 25.0;
    std::int64_t min_instances = 1;
    std::int64_t max_instances = 5;
    double amplitude_lo = 0.8;
    double amplitude_hi = 1.2;
    std::vector<LengthBucket> length_distribution; // defaulted when empty
    std::map<std::string, std::int64_t> splits;    // e.g. {"train",200},{"val",50}
    std::uint64_t seed = 0;
};

inline void validate_gen_config(const DataGenConfig& c) {
    if (c.frames < 8) throw ConfigError("data gen: frames must be >= 8");
    if (c.channels < 2) throw ConfigError("data gen: channels must be >= 2");
    if (c.classes < 1 || c.classes > 8)
        throw ConfigError("data gen: classes must be in [1, 8] (higher tones would alias)");
    if (c.noise < 0) throw ConfigError("data gen: noise must be >= 0");
    if (c.fps <= 0) throw ConfigError("data gen: fps must be > 0");
    if (c.min_instances < 1 || c.max_instances < c.min_instances)
        throw ConfigError("data gen: bad instance range");
    if (c.splits.empty()) throw ConfigError("data gen: at least one split required");
    for (const auto& [name, n] : c.splits)
        if (name.empty() || n < 1) throw ConfigError("data gen: bad split " + name);
    for (const auto& b : c.length_distribution)
        if (b.min_frames < 2 || b.max_frames < b.min_frames || b.weight <= 0)
            throw ConfigError("data gen: bad length bucket");
}

inline DataGenConfig gen_config_from_json(const nlohmann::json& j) {
    DataGenConfig c;
    try {
        c.frames = j.value("frames", c.frames);
        c.channels = j.value("channels", c.channels);
        c.classes = j.value("classes", c.classes);
        c.noise = j.value("noise", c.noise);
        c.fps = j.value("fps", c.fps);
        c.min_instances = j.value("min_instances", c.min_instances);
        c.max_instances = j.value("max_instances", c.max_instances);
        c.amplitude_lo = j.value("amplitude_lo", c.amplitude_lo);
        c.amplitude_hi = j.value("amplitude_hi", c.amplitude_hi);
        c.seed = j.value("seed", c.seed);
        if (j.contains("length_distribution"))
            for (const auto& jb : j.at("length_distribution"))
                c.length_distribution.push_back({jb.at("min").get<std::int64_t>(),
                                                 jb.at("max").get<std::int64_t>(),
                                                 jb.at("weight").get<double>()});
        for (const auto& [k, v] : j.at("splits").items())
            c.splits[k] = v.get<std::int64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed data gen config: ") + e.what());
    }
    validate_gen_config(c);
    return c;
}

/// Class tone frequencies: omega_c = 2*pi*(c+1)/16 per frame, a quadrature
/// pair on channels (2c mod C, 2c+1 mod C).
inline double class_omega(int label) { return 2.0 * 3.14159265358979323846 * (label + 1) / 16.0; }

template <typename T>
TalSample<T> generate_sample(const DataGenConfig& cfg, const std::string& id, Rng rng) {
    TalSample<T> s;
    s.id = id;
    s.duration_s = double(cfg.frames) / cfg.fps;
    s.signal = Tensor<T>({cfg.frames, cfg.channels});
    for (auto& v : s.signal.data()) v = T(rng.normal(0.0, cfg.noise));

    std::vector<LengthBucket> buckets = cfg.length_distribution;
    if (buckets.empty()) buckets = {{8, 32, 1.0}};
    double total_w = 0;
    for (const auto& b : buckets) total_w += b.weight;

    const std::int64_t want = rng.uniform_int(cfg.min_instances, cfg.max_instances);
    std::vector<std::pair<std::int64_t, std::int64_t>> placed; // [start, end) frames
    for (std::int64_t k = 0; k < want; ++k) {
        const int label = int(rng.uniform_int(0, cfg.classes - 1));
        double pick = rng.uniform(0.0, total_w);
        const LengthBucket* bucket = &buckets.back();
        for (const auto& b : buckets) {
            if (pick < b.weight) {
                bucket = &b;
                break;
            }
            pick -= b.weight;
        }
        const std::int64_t len =
            std::min(rng.uniform_int(bucket->min_frames, bucket->max_frames), cfg.frames);
        bool ok = false;
        std::int64_t start = 0;
        for (int tries = 0; tries < 64 && !ok; ++tries) {
            start = rng.uniform_int(0, cfg.frames - len);
            ok = true;
            for (const auto& [ps, pe] : placed)
                if (start < pe && ps < start + len) ok = false;
        }
        if (!ok) continue; // crowded sample: keep what fits
        placed.emplace_back(start, start + len);

        const double amp = rng.uniform(cfg.amplitude_lo, cfg.amplitude_hi);
        const double phase = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
        const double w = class_omega(label);
        const std::int64_t ch_cos = (2 * label) % cfg.channels;
        const std::int64_t ch_sin = (2 * label + 1) % cfg.channels;
        for (std::int64_t t = start; t < start + len; ++t) {
            s.signal.at(t, ch_cos) += T(amp * std::cos(w * double(t) + phase));
            s.signal.at(t, ch_sin) += T(amp * std::sin(w * double(t) + phase));
        }
        s.segments.push_back(
            {double(start) / cfg.fps, double(start + len) / cfg.fps, label});
    }
    std::sort(s.segments.begin(), s.segments.end(), [](const auto& a, const auto& b) {
        return a.start_s < b.start_s;
    });
    return s;
}

template <typename T>
std::map<std::string, TalDataset<T>> generate_dataset(const DataGenConfig& cfg) {
    validate_gen_config(cfg);
    Rng root(cfg.seed);
    std::map<std::string, TalDataset<T>> out;
    for (const auto& [split, count] : cfg.splits) {
        TalDataset<T> ds;
        ds.channels = cfg.channels;
        ds.classes = cfg.classes;
        Rng split_rng = root.fork(split);
        for (std::int64_t i = 0; i < count; ++i) {
            const std::string id = split + "_" + std::to_string(i);
            ds.samples.push_back(generate_sample<T>(cfg, id, split_rng.fork(id)));
        }
        out[split] = std::move(ds);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Disk layout
// ---------------------------------------------------------------------------

/// R2TAL_DATA_DIR overrides any configured dataset root.
inline std::string resolve_data_dir(const std::string& configured) {
    if (const char* env = std::getenv("R2TAL_DATA_DIR"); env && *env) return env;
    return configured;
}

inline nlohmann::json sample_annotation_json(double duration_s,
                                             const std::vector<SegmentAnnotation>& segments) {
    nlohmann::json j;
    j["duration_s"] = duration_s;
    j["segments"] = nlohmann::json::array();
    for (const auto& seg : segments)
        j["segments"].push_back(
            {{"start_s", seg.start_s}, {"end_s", seg.end_s}, {"label", seg.label}});
    return j;
}

inline std::vector<SegmentAnnotation> segments_from_json(const nlohmann::json& j) {
    std::vector<SegmentAnnotation> out;
    for (const auto& js : j)
        out.push_back({js.at("start_s").get<double>(), js.at("end_s").get<double>(),
                       js.at("label").get<int>()});
    return out;
}

inline void save_split(const std::string& dir, const TalDataset<float>& ds) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(dir) / "samples");
    nlohmann::json meta;
    meta["version"] = 1;
    meta["channels"] = ds.channels;
    meta["classes"] = ds.classes;
    meta["ids"] = nlohmann::json::array();
    for (const auto& s : ds.samples) meta["ids"].push_back(s.id);
    save_json_file((fs::path(dir) / "meta.json").string(), meta);
    for (const auto& s : ds.samples) {
        ParameterStore<float> one;
        one.set("signal", s.signal);
        save_checkpoint((fs::path(dir) / "samples" / (s.id + ".r2tc")).string(), one);
        save_json_file((fs::path(dir) / "samples" / (s.id + ".json")).string(),
                       sample_annotation_json(s.duration_s, s.segments));
    }
}

template <typename T>
TalDataset<T> load_split(const std::string& dir) {
    namespace fs = std::filesystem;
    const auto meta = load_json_file((fs::path(dir) / "meta.json").string());
    TalDataset<T> ds;
    try {
        ds.channels = meta.at("channels").get<std::int64_t>();
        ds.classes = meta.at("classes").get<std::int64_t>();
        for (const auto& jid : meta.at("ids")) {
            const std::string id = jid.get<std::string>();
            TalSample<T> s;
            s.id = id;
            auto store =
                load_checkpoint<float>((fs::path(dir) / "samples" / (id + ".r2tc")).string());
            const Tensor<float>& sig = store.get("signal");
            if (sig.rank() != 2 || sig.dim(1) != ds.channels)
                throw IoError("sample " + id + " signal shape " + shape_str(sig.shape()) +
                              " does not match dataset channels");
            Tensor<T> cast(sig.shape());
            for (std::size_t i = 0; i < sig.numel(); ++i) cast.data()[i] = T(sig.data()[i]);
            s.signal = std::move(cast);
            const auto ann = load_json_file((fs::path(dir) / "samples" / (id + ".json")).string());
            s.duration_s = ann.at("duration_s").get<double>();
            if (s.duration_s <= 0) throw IoError("sample " + id + " has non-positive duration");
            s.segments = segments_from_json(ann.at("segments"));
            ds.samples.push_back(std::move(s));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("malformed dataset in " + dir + ": " + e.what());
    }
    return ds;
}

/// Generate-and-save for every configured split under root/<split>/.
inline void generate_and_save(const DataGenConfig& cfg, const std::string& root) {
    auto all = generate_dataset<float>(cfg);
    for (auto& [split, ds] : all)
        save_split((std::filesystem::path(root) / split).string(), ds);
}

} // namespace r2tal
