// Copyright (c) 2026 The r2tal Authors
// SPDX-License-Identifier: Apache-2.0
//
// Anchor-free localizer head over backbone features: a small conv trunk, then
// per-anchor class logits and start/end offsets in feature-index units.
// Includes target rasterization from second-based annotations and the
// composite detection loss.

#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "r2tal/autodiff.hpp"
#include "r2tal/network_spec.hpp"
#include "r2tal/tal_data.hpp"
#include "r2tal/tensor.hpp"

namespace r2tal {

inline std::vector<std::pair<std::string, Shape>> head_param_layout(std::int64_t channels,
                                                                    std::int64_t classes) {
    return {
        {"head.trunk.conv.w", {3, channels, channels}},
        {"head.trunk.conv.b", {channels}},
        {"head.cls.w", {channels, classes}},
        {"head.cls.b", {classes}},
        {"head.start.w", {channels, 1}},
        {"head.start.b", {1}},
        {"head.end.w", {channels, 1}},
        {"head.end.b", {1}},
    };
}

template <typename T>
ParameterStore<T> init_head_params(std::int64_t channels, std::int64_t classes,
                                   std::uint64_t seed) {
    return init_layout_params<T>(head_param_layout(channels, classes), seed);
}

struct LocalizerSlots {
    int cls = -1;   // [N x classes] logits
    int start = -1; // [N x 1] offset to segment start, feature units
    int end = -1;   // [N x 1] offset to segment end, feature units
};

/// Record the head on the tape after the backbone features.
template <typename T>
LocalizerSlots emit_localizer(Tape<T>& tape, int features, const ParameterStore<T>& store,
                              std::int64_t channels, std::int64_t classes) {
    tape.set_category(MemCategory::LocalizerActivation);
    std::map<std::string, int> p;
    for (const auto& [name, shape] : head_param_layout(channels, classes)) {
        const Tensor<T>& t = store.get(name);
        if (t.shape() != shape)
            throw BuildError("parameter " + name + " has shape " + shape_str(t.shape()) +
                             ", head requires " + shape_str(shape));
        p[name] = tape.add_param(name, &t);
    }
    int h = tape.conv1d(features, p.at("head.trunk.conv.w"), 1, 1);
    h = tape.add_rowvec(h, p.at("head.trunk.conv.b"));
    h = tape.relu(h);
    LocalizerSlots out;
    out.cls = tape.add_rowvec(tape.matmul(h, p.at("head.cls.w")), p.at("head.cls.b"));
    out.start = tape.add_rowvec(tape.matmul(h, p.at("head.start.w")), p.at("head.start.b"));
    out.end = tape.add_rowvec(tape.matmul(h, p.at("head.end.w")), p.at("head.end.b"));
    return out;
}

template <typename T>
struct LocalizerTargets {
    Tensor<T> cls;   // [N x classes] 0/1
    Tensor<T> start; // [N x 1] feature-unit offsets, zero outside segments
    Tensor<T> end;   // [N x 1]
    Tensor<T> mask;  // [N x 1] 1 inside any segment
    std::int64_t positives = 0;
};

/// Rasterize annotations onto n anchors. Anchor i sits at input frame
/// i * stride, i.e. at time i * stride / fps seconds; it is positive when that
/// time falls inside a segment half-open in time.
template <typename T>
LocalizerTargets<T> rasterize_targets(const std::vector<SegmentAnnotation>& segments,
                                      std::int64_t n, std::int64_t classes, std::int64_t stride,
                                      double fps) {
    if (n < 1 || classes < 1 || stride < 1 || fps <= 0)
        throw DimError("rasterize_targets: invalid arguments");
    LocalizerTargets<T> t;
    t.cls = Tensor<T>({n, classes});
    t.start = Tensor<T>({n, 1});
    t.end = Tensor<T>({n, 1});
    t.mask = Tensor<T>({n, 1});
    const double feat_per_sec = fps / double(stride);
    for (std::int64_t i = 0; i < n; ++i) {
        const double sec = double(i) / feat_per_sec;
        for (const auto& seg : segments) {
            if (seg.label < 0 || seg.label >= classes)
                throw ConfigError("segment label " + std::to_string(seg.label) +
                                  " out of range for " + std::to_string(classes) + " classes");
            if (sec >= seg.start_s && sec < seg.end_s) {
                t.cls.at(i, seg.label) = T(1);
                t.start.at(i, 0) = T(double(i) - seg.start_s * feat_per_sec);
                t.end.at(i, 0) = T(seg.end_s * feat_per_sec - double(i));
                t.mask.at(i, 0) = T(1);
                ++t.positives;
                break; // segments never overlap
            }
        }
    }
    return t;
}

/// Classification BCE (mean over all anchor-class cells) plus lambda-weighted
/// L1 on both offsets, normalized by 2 * max(1, positives).
template <typename T>
int emit_tal_loss(Tape<T>& tape, const LocalizerSlots& s, const LocalizerTargets<T>& tgt,
                  T lambda) {
    tape.set_category(MemCategory::LocalizerActivation);
    int cls_loss = tape.bce_with_logits_mean(s.cls, tgt.cls);
    const T denom = T(2 * std::max<std::int64_t>(1, tgt.positives));
    int l1 = tape.add(tape.masked_l1_mean(s.start, tgt.start, tgt.mask, denom),
                      tape.masked_l1_mean(s.end, tgt.end, tgt.mask, denom));
    return tape.add(cls_loss, tape.scale_op(l1, lambda));
}

} // namespace r2tal
