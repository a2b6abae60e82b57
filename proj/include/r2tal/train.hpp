// Copyright (c) 2026 The r2tal Authors
// SPDX-License-Identifier: Apache-2.0
//
// Training harness: end-to-end fine-tuning of the rewired backbone plus head,
// or head-only training on frozen precomputed features. Sequential per-sample
// tapes with gradient averaging per batch, SGD or Adam, deterministic under a
// fixed seed. Also the memory profiler backing the profile CLI command.

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "r2tal/autodiff.hpp"
#include "r2tal/backbone.hpp"
#include "r2tal/checkpoint.hpp"
#include "r2tal/json.hpp"
#include "r2tal/memory_ledger.hpp"
#include "r2tal/network_spec.hpp"
#include "r2tal/tal_data.hpp"
#include "r2tal/tal_eval.hpp"
#include "r2tal/tal_head.hpp"

namespace r2tal {

enum class Regime { EndToEnd, FrozenFeatures };

inline const char* regime_name(Regime r) {
    return r == Regime::EndToEnd ? "end_to_end" : "frozen_features";
}

inline Regime regime_from_name(const std::string& s) {
    if (s == "end_to_end") return Regime::EndToEnd;
    if (s == "frozen_features") return Regime::FrozenFeatures;
    throw ConfigError("unknown training regime: " + s);
}

enum class OptimizerKind { Sgd, Adam };

inline OptimizerKind optimizer_from_name(const std::string& s) {
    if (s == "sgd") return OptimizerKind::Sgd;
    if (s == "adam") return OptimizerKind::Adam;
    throw ConfigError("unknown optimizer: " + s);
}

struct TrainConfig {
    std::string spec_path;
    std::string data_dir;
    std::string out_dir;
    std::string checkpoint_in; // optional pretrained backbone
    Regime regime = Regime::EndToEnd;
    ExecMode exec_mode = ExecMode::Reversible;
    DType dtype = DType::f64;
    std::int64_t epochs = 20;
    std::int64_t batch_size = 4;
    double lr_head = 0.01;
    double lr_backbone = -1; // < 0: derived as lr_head / 10
    OptimizerKind optimizer = OptimizerKind::Adam;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    double lambda_reg = 1.0;
    double score_threshold = 0.5;
    double nms_tiou = 0.5;
    std::string protocol = "activitynet";
    std::uint64_t seed = 1;
    int augment = -1; // -1 auto: on for end-to-end, off for frozen

    bool augmentation_enabled() const {
        if (augment >= 0) return augment > 0;
        return regime == Regime::EndToEnd;
    }
    double backbone_lr() const { return lr_backbone >= 0 ? lr_backbone : lr_head / 10.0; }
};

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    try {
        c.spec_path = j.at("spec_path").get<std::string>();
        c.data_dir = j.at("data_dir").get<std::string>();
        c.out_dir = j.at("out_dir").get<std::string>();
        c.checkpoint_in = j.value("checkpoint_in", c.checkpoint_in);
        if (j.contains("regime")) c.regime = regime_from_name(j["regime"].get<std::string>());
        if (j.contains("exec_mode"))
            c.exec_mode = exec_mode_from_name(j["exec_mode"].get<std::string>());
        if (j.contains("dtype")) {
            const auto s = j["dtype"].get<std::string>();
            if (s == "f32")
                c.dtype = DType::f32;
            else if (s == "f64")
                c.dtype = DType::f64;
            else
                throw ConfigError("unknown dtype: " + s);
        }
        c.epochs = j.value("epochs", c.epochs);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.lr_head = j.value("lr_head", c.lr_head);
        c.lr_backbone = j.value("lr_backbone", c.lr_backbone);
        if (j.contains("optimizer"))
            c.optimizer = optimizer_from_name(j["optimizer"].get<std::string>());
        c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
        c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
        c.adam_eps = j.value("adam_eps", c.adam_eps);
        c.lambda_reg = j.value("lambda_reg", c.lambda_reg);
        c.score_threshold = j.value("score_threshold", c.score_threshold);
        c.nms_tiou = j.value("nms_tiou", c.nms_tiou);
        c.protocol = j.value("protocol", c.protocol);
        c.seed = j.value("seed", c.seed);
        if (j.contains("augment")) c.augment = j["augment"].get<bool>() ? 1 : 0;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed train config: ") + e.what());
    }
    if (c.epochs < 0) throw ConfigError("epochs must be >= 0");
    if (c.batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (c.lr_head <= 0) throw ConfigError("lr_head must be > 0");
    return c;
}

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

template <typename T>
void sgd_step(ParameterStore<T>& store, const GradientMap<T>& grads,
              const std::function<double(const std::string&)>& lr_of) {
    for (const auto& [name, g] : grads) {
        Tensor<T>& p = store.get_mut(name);
        require_same_shape(p, g, "sgd_step");
        const T lr = T(lr_of(name));
        for (std::size_t i = 0; i < p.numel(); ++i) p.data()[i] -= lr * g.data()[i];
    }
}

template <typename T>
struct AdamState {
    std::map<std::string, Tensor<T>> m, v;
    std::int64_t t = 0;
};

template <typename T>
void adam_step(ParameterStore<T>& store, AdamState<T>& state, const GradientMap<T>& grads,
               const std::function<double(const std::string&)>& lr_of, double beta1, double beta2,
               double eps) {
    ++state.t;
    const T bc1 = T(1) - T(std::pow(beta1, double(state.t)));
    const T bc2 = T(1) - T(std::pow(beta2, double(state.t)));
    for (const auto& [name, g] : grads) {
        Tensor<T>& p = store.get_mut(name);
        require_same_shape(p, g, "adam_step");
        auto& m = state.m.try_emplace(name, Tensor<T>(p.shape())).first->second;
        auto& v = state.v.try_emplace(name, Tensor<T>(p.shape())).first->second;
        const T lr = T(lr_of(name)), b1 = T(beta1), b2 = T(beta2);
        for (std::size_t i = 0; i < p.numel(); ++i) {
            const T gi = g.data()[i];
            m.data()[i] = b1 * m.data()[i] + (T(1) - b1) * gi;
            v.data()[i] = b2 * v.data()[i] + (T(1) - b2) * gi * gi;
            const T mhat = m.data()[i] / bc1;
            const T vhat = v.data()[i] / bc2;
            p.data()[i] -= lr * mhat / (std::sqrt(vhat) + T(eps));
        }
    }
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

/// Temporal shift with zero fill plus amplitude jitter; annotations move with
/// the signal and are clipped to the clip bounds.
template <typename T>
TalSample<T> augment_sample(const TalSample<T>& in, std::int64_t max_shift, Rng& rng) {
    TalSample<T> out = in;
    const std::int64_t t_len = in.signal.dim(0), c = in.signal.dim(1);
    const std::int64_t shift = rng.uniform_int(-max_shift, max_shift);
    const double amp = rng.uniform(0.9, 1.1);
    out.signal = Tensor<T>({t_len, c});
    for (std::int64_t t = 0; t < t_len; ++t) {
        const std::int64_t src = t - shift;
        if (src < 0 || src >= t_len) continue;
        for (std::int64_t ch = 0; ch < c; ++ch)
            out.signal.at(t, ch) = T(amp) * in.signal.at(src, ch);
    }
    out.segments.clear();
    const double dt = double(shift) / in.fps();
    for (auto seg : in.segments) {
        seg.start_s = std::max(0.0, seg.start_s + dt);
        seg.end_s = std::min(in.duration_s, seg.end_s + dt);
        if (seg.end_s > seg.start_s) out.segments.push_back(seg);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct EpochMetrics {
    std::int64_t epoch = 0;
    bool has_loss = false;
    double loss = 0;
    double average_map = 0;
    std::int64_t peak_bytes = 0;
};

struct TrainReport {
    std::vector<EpochMetrics> metrics;
    EvalResult final_eval;
    std::int64_t peak_bytes = 0;
};

inline nlohmann::json epoch_metrics_json(const EpochMetrics& m) {
    nlohmann::json j;
    j["epoch"] = m.epoch;
    if (m.has_loss)
        j["loss"] = m.loss;
    else
        j["loss"] = nullptr;
    j["average_mAP"] = m.average_map;
    j["peak_bytes"] = m.peak_bytes;
    return j;
}

namespace detail {

template <typename T>
struct HeadForwardOut {
    Tensor<T> cls, start, end;
};

/// Inference pass of the head over given features (no gradients retained).
template <typename T>
HeadForwardOut<T> head_forward(const ParameterStore<T>& head, const Tensor<T>& features,
                               std::int64_t classes) {
    Tape<T> tape(ExecMode::CacheAll);
    int f = tape.add_input(features, MemCategory::LocalizerActivation);
    auto slots = emit_localizer(tape, f, head, features.dim(1), classes);
    return {tape.value(slots.cls), tape.value(slots.start), tape.value(slots.end)};
}

template <typename T>
void check_finite_grads(const GradientMap<T>& grads) {
    for (const auto& [name, g] : grads)
        if (!g.all_finite()) throw NumericError("non-finite gradient for " + name);
}

template <typename T>
void scale_grads(GradientMap<T>& grads, T factor) {
    for (auto& [_, g] : grads)
        for (auto& v : g.data()) v *= factor;
}

template <typename T>
void accumulate_grads(GradientMap<T>& into, const GradientMap<T>& add) {
    for (const auto& [name, g] : add) {
        auto it = into.find(name);
        if (it == into.end()) {
            into[name] = g;
        } else {
            require_same_shape(it->second, g, "gradient accumulation");
            for (std::size_t i = 0; i < g.numel(); ++i) it->second.data()[i] += g.data()[i];
        }
    }
}

} // namespace detail

template <typename T>
TrainReport run_training(const TrainConfig& cfg) {
    namespace fs = std::filesystem;
    const NetworkSpec spec = load_spec_file(cfg.spec_path);
    if (auto diags = validate_spec(spec); !diags.empty())
        throw ConfigError("invalid network spec: " + diags.front());

    const std::string root = resolve_data_dir(cfg.data_dir);
    TalDataset<T> train_ds = load_split<T>((fs::path(root) / "train").string());
    TalDataset<T> val_ds = load_split<T>((fs::path(root) / "val").string());
    if (train_ds.channels != spec.input_shape[1])
        throw ConfigError("dataset channels " + std::to_string(train_ds.channels) +
                          " do not match spec input channels " +
                          std::to_string(spec.input_shape[1]));

    const auto meta = spec.meta();
    const std::int64_t stride = meta.overall_stride;
    const std::int64_t feat_channels = meta.stage_channels.back();
    const std::int64_t classes = train_ds.classes;

    Rng rng(cfg.seed);
    ParameterStore<T> backbone = cfg.checkpoint_in.empty()
                                     ? init_params<T>(spec, rng.fork("backbone").next_u64())
                                     : load_checkpoint<T>(cfg.checkpoint_in);
    const std::string frozen_backbone_bytes =
        cfg.regime == Regime::FrozenFeatures ? serialize_checkpoint(backbone) : std::string{};
    ParameterStore<T> head =
        init_head_params<T>(feat_channels, classes, rng.fork("head").next_u64());

    MemoryLedger ledger;
    ledger.alloc(MemCategory::Parameter, backbone.total_bytes() + head.total_bytes());

    // Frozen features are computed once with the untouched backbone.
    std::map<std::string, Tensor<T>> cached_features;
    if (cfg.regime == Regime::FrozenFeatures) {
        for (const auto* ds : {&train_ds, &val_ds})
            for (const auto& s : ds->samples)
                cached_features[s.id] =
                    backbone_forward(spec, backbone, s.signal, ExecMode::CacheAll);
    }

    auto lr_of = [&](const std::string& name) {
        return name.starts_with("head.") ? cfg.lr_head : cfg.backbone_lr();
    };
    AdamState<T> adam;

    auto features_of = [&](const TalSample<T>& s) -> Tensor<T> {
        auto it = cached_features.find(s.id);
        if (it == cached_features.end())
            throw ConsistencyError("missing cached features for " + s.id);
        return it->second;
    };

    auto eval_split = [&](const TalDataset<T>& ds) {
        std::map<std::string, std::vector<Detection>> preds;
        std::map<std::string, std::vector<SegmentAnnotation>> gts;
        for (const auto& s : ds.samples) {
            Tensor<T> feats = cfg.regime == Regime::FrozenFeatures
                                  ? features_of(s)
                                  : backbone_forward(spec, backbone, s.signal, ExecMode::CacheAll);
            auto out = detail::head_forward(head, feats, classes);
            DecodeConfig dc;
            dc.score_threshold = cfg.score_threshold;
            dc.nms_tiou = cfg.nms_tiou;
            dc.stride = stride;
            dc.fps = s.fps();
            dc.duration_s = s.duration_s;
            preds[s.id] = decode_predictions(out.cls, out.start, out.end, dc);
            gts[s.id] = s.segments;
        }
        return mean_average_precision(preds, gts, int(classes), cfg.protocol);
    };

    TrainReport report;
    for (std::int64_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        Rng erng = rng.fork("epoch" + std::to_string(epoch));
        std::vector<std::size_t> order(train_ds.samples.size());
        std::iota(order.begin(), order.end(), 0);
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[std::size_t(erng.uniform_int(0, std::int64_t(i) - 1))]);

        double loss_sum = 0;
        std::size_t loss_count = 0;
        for (std::size_t pos = 0; pos < order.size();) {
            const std::size_t batch_start = pos;
            const std::size_t batch_end =
                std::min(order.size(), pos + std::size_t(cfg.batch_size));
            GradientMap<T> batch_grads;
            for (; pos < batch_end; ++pos) {
                const TalSample<T>& base = train_ds.samples[order[pos]];
                TalSample<T> sample = base;
                if (cfg.augmentation_enabled()) {
                    Rng arng = erng.fork("aug" + base.id);
                    sample = augment_sample(base, stride, arng);
                }
                Tape<T> tape(cfg.exec_mode, &ledger);
                LocalizerSlots slots;
                std::int64_t n_anchor = 0;
                double fps = sample.fps();
                if (cfg.regime == Regime::FrozenFeatures) {
                    Tensor<T> feats = features_of(sample);
                    n_anchor = feats.dim(0);
                    int f = tape.add_input(std::move(feats), MemCategory::LocalizerActivation);
                    slots = emit_localizer(tape, f, head, feat_channels, classes);
                } else {
                    auto io = emit_backbone(tape, spec, backbone, sample.signal);
                    n_anchor = tape.value(io.features).dim(0);
                    slots = emit_localizer(tape, io.features, head, feat_channels, classes);
                }
                auto targets =
                    rasterize_targets<T>(sample.segments, n_anchor, classes, stride, fps);
                int loss = emit_tal_loss(tape, slots, targets, T(cfg.lambda_reg));
                const double loss_v = double(tape.value(loss).at(0));
                if (!std::isfinite(loss_v)) throw NumericError("non-finite training loss");
                loss_sum += loss_v;
                ++loss_count;
                tape.backward(loss);
                detail::accumulate_grads(batch_grads, tape.param_grads());
            }
            detail::scale_grads(batch_grads, T(1) / T(batch_end - batch_start));
            detail::check_finite_grads(batch_grads);
            auto apply = [&](ParameterStore<T>& store, const GradientMap<T>& grads) {
                if (cfg.optimizer == OptimizerKind::Sgd)
                    sgd_step(store, grads, lr_of);
                else
                    adam_step(store, adam, grads, lr_of, cfg.adam_beta1, cfg.adam_beta2,
                              cfg.adam_eps);
            };
            GradientMap<T> backbone_grads, head_grads;
            for (const auto& [name, g] : batch_grads)
                (name.starts_with("head.") ? head_grads : backbone_grads)[name] = g;
            if (!head_grads.empty()) apply(head, head_grads);
            if (!backbone_grads.empty()) apply(backbone, backbone_grads);
        }

        EpochMetrics m;
        m.epoch = epoch;
        m.has_loss = loss_count > 0;
        m.loss = loss_count ? loss_sum / double(loss_count) : 0;
        m.average_map = eval_split(val_ds).average_map;
        m.peak_bytes = ledger.peak_bytes();
        report.metrics.push_back(m);
    }

    if (cfg.epochs == 0) {
        EpochMetrics m;
        m.epoch = 0;
        m.has_loss = false;
        m.average_map = eval_split(val_ds).average_map;
        m.peak_bytes = ledger.peak_bytes();
        report.metrics.push_back(m);
    }

    if (cfg.regime == Regime::FrozenFeatures &&
        serialize_checkpoint(backbone) != frozen_backbone_bytes)
        throw ConsistencyError("frozen-features training modified backbone parameters");

    report.final_eval = eval_split(val_ds);
    report.peak_bytes = ledger.peak_bytes();

    if (!cfg.out_dir.empty()) {
        fs::create_directories(cfg.out_dir);
        ParameterStore<T> merged = backbone;
        for (const auto& [name, t] : head.entries()) merged.set(name, t);
        save_checkpoint((fs::path(cfg.out_dir) / "model.r2tc").string(), merged);
        std::string lines;
        for (const auto& m : report.metrics) lines += epoch_metrics_json(m).dump() + "\n";
        write_file_bytes((fs::path(cfg.out_dir) / "metrics.jsonl").string(), lines);
        save_json_file((fs::path(cfg.out_dir) / "results.json").string(),
                       eval_result_to_json(report.final_eval));
    }
    return report;
}

inline TrainReport train(const TrainConfig& cfg) {
    return cfg.dtype == DType::f64 ? run_training<double>(cfg) : run_training<float>(cfg);
}

// ---------------------------------------------------------------------------
// Profiling
// ---------------------------------------------------------------------------

struct ProfileRow {
    std::string spec_name;
    std::string mode;
    std::int64_t blocks_per_stage = 0;
    std::int64_t t = 0;
    std::int64_t batch = 0;
    std::int64_t predicted_bytes = 0;
    std::int64_t measured_peak_bytes = 0;
    double wall_ms = 0;
};

/// Forward+backward at each depth and mode, measuring the cached-byte peak
/// against the analytic model. Batched tapes are all materialized before the
/// backward sweeps run.
template <typename T>
std::vector<ProfileRow> profile_memory(const NetworkSpec& base_spec, const std::string& spec_name,
                                       const std::vector<std::int64_t>& depths,
                                       const std::vector<ExecMode>& modes, std::int64_t t_in,
                                       std::int64_t batch, std::uint64_t seed) {
    if (t_in < 1 || batch < 1) throw ConfigError("profile: T and batch must be >= 1");
    std::vector<ProfileRow> rows;
    for (std::int64_t d : depths) {
        NetworkSpec residual = with_blocks_per_stage(base_spec, d);
        NetworkSpec spec = rewire(residual);
        ParameterStore<T> store = init_params<T>(spec, seed);
        Rng rng(seed);
        Tensor<T> x = rng.fork("profile_input").template normal_tensor<T>(
            {t_in, spec.input_shape[1]}, 1.0);
        for (ExecMode mode : modes) {
            MemoryLedger ledger;
            const auto start = std::chrono::steady_clock::now();
            {
                std::vector<std::unique_ptr<Tape<T>>> tapes;
                std::vector<int> feature_slots;
                for (std::int64_t b = 0; b < batch; ++b) {
                    tapes.push_back(std::make_unique<Tape<T>>(mode, &ledger));
                    auto io = emit_backbone(*tapes.back(), spec, store, x);
                    feature_slots.push_back(io.features);
                }
                for (std::size_t b = tapes.size(); b-- > 0;)
                    tapes[b]->backward(feature_slots[b]);
            }
            const auto stop = std::chrono::steady_clock::now();
            ProfileRow row;
            row.spec_name = spec_name;
            row.mode = exec_mode_name(mode);
            row.blocks_per_stage = d;
            row.t = t_in;
            row.batch = batch;
            row.predicted_bytes = predict_peak_memory(spec, mode, t_in, dtype_of<T>(), batch);
            row.measured_peak_bytes = ledger.peak_bytes();
            row.wall_ms = std::chrono::duration<double, std::milli>(stop - start).count();
            rows.push_back(std::move(row));
        }
    }
    return rows;
}

inline std::string profile_to_csv(const std::vector<ProfileRow>& rows) {
    std::string out =
        "spec_name,mode,blocks_per_stage,T,batch,predicted_bytes,measured_peak_bytes,wall_ms\n";
    char buf[64];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%.3f", r.wall_ms);
        out += r.spec_name + "," + r.mode + "," + std::to_string(r.blocks_per_stage) + "," +
               std::to_string(r.t) + "," + std::to_string(r.batch) + "," +
               std::to_string(r.predicted_bytes) + "," + std::to_string(r.measured_peak_bytes) +
               "," + buf + "\n";
    }
    return out;
}

} // namespace r2tal
