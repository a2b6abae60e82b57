// Copyright (c) 2026 The r2tal Authors
// SPDX-License-Identifier: Apache-2.0
//
// Detection decoding and evaluation: sigmoid-thresholded per-anchor decoding,
// class-wise greedy NMS, and mean average precision over tIoU thresholds with
// all-point interpolation. Every sort uses total, deterministic orderings.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "r2tal/errors.hpp"
#include "r2tal/json.hpp"
#include "r2tal/tal_data.hpp"
#include "r2tal/tensor.hpp"

namespace r2tal {

struct Detection {
    double start_s = 0;
    double end_s = 0;
    int label = 0;
    double score = 0;
};

/// Temporal IoU of two [start, end) second intervals; 0 for degenerate unions.
inline double tiou(double a_start, double a_end, double b_start, double b_end) {
    const double inter = std::min(a_end, b_end) - std::max(a_start, b_start);
    if (inter <= 0) return 0.0;
    const double uni = std::max(a_end, b_end) - std::min(a_start, b_start);
    if (uni <= 0) return 0.0;
    return inter / uni;
}

inline bool detection_score_order(const Detection& a, const Detection& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.start_s != b.start_s) return a.start_s < b.start_s;
    if (a.end_s != b.end_s) return a.end_s < b.end_s;
    return a.label < b.label;
}

/// Greedy class-wise NMS: keep in score order, drop overlaps strictly above
/// the threshold against an already-kept detection of the same class.
inline std::vector<Detection> nms(std::vector<Detection> dets, double thr) {
    std::sort(dets.begin(), dets.end(), detection_score_order);
    std::vector<Detection> kept;
    for (const auto& d : dets) {
        bool suppressed = false;
        for (const auto& k : kept)
            if (k.label == d.label && tiou(k.start_s, k.end_s, d.start_s, d.end_s) > thr) {
                suppressed = true;
                break;
            }
        if (!suppressed) kept.push_back(d);
    }
    return kept;
}

struct DecodeConfig {
    double score_threshold = 0.5; // on sigmoid probability
    double nms_tiou = 0.5;
    std::int64_t stride = 1; // input frames per anchor
    double fps = 25.0;       // input frames per second
    double duration_s = 0;   // clamp bound; 0 = no clamp
};

/// Per-anchor decode: anchor i with class probability above threshold emits
/// [(i - start_off) , (i + end_off)] scaled to seconds, then class-wise NMS.
template <typename T>
std::vector<Detection> decode_predictions(const Tensor<T>& cls_logits, const Tensor<T>& start_off,
                                          const Tensor<T>& end_off, const DecodeConfig& cfg) {
    if (cls_logits.rank() != 2 || start_off.rank() != 2 || end_off.rank() != 2 ||
        start_off.dim(1) != 1 || end_off.dim(1) != 1 ||
        start_off.dim(0) != cls_logits.dim(0) || end_off.dim(0) != cls_logits.dim(0))
        throw DimError("decode_predictions: logits [N x K], offsets [N x 1] required");
    const std::int64_t n = cls_logits.dim(0), classes = cls_logits.dim(1);
    const double sec_per_feat = double(cfg.stride) / cfg.fps;
    std::vector<Detection> dets;
    for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t k = 0; k < classes; ++k) {
            const double z = double(cls_logits.at(i, k));
            const double p = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
            if (p <= cfg.score_threshold) continue;
            double s = (double(i) - double(start_off.at(i, 0))) * sec_per_feat;
            double e = (double(i) + double(end_off.at(i, 0))) * sec_per_feat;
            s = std::max(s, 0.0);
            if (cfg.duration_s > 0) e = std::min(e, cfg.duration_s);
            if (e <= s) continue;
            dets.push_back({s, e, int(k), p});
        }
    }
    return nms(std::move(dets), cfg.nms_tiou);
}

// ---------------------------------------------------------------------------
// Mean average precision
// ---------------------------------------------------------------------------

inline const std::vector<double>& protocol_thresholds(const std::string& protocol) {
    static const std::vector<double> activitynet = {0.50, 0.55, 0.60, 0.65, 0.70,
                                                    0.75, 0.80, 0.85, 0.90, 0.95};
    static const std::vector<double> thumos = {0.3, 0.4, 0.5, 0.6, 0.7};
    if (protocol == "activitynet") return activitynet;
    if (protocol == "thumos") return thumos;
    throw ConfigError("unknown evaluation protocol: " + protocol);
}

struct EvalResult {
    std::string protocol;
    std::vector<double> thresholds;
    std::vector<double> map_per_threshold;
    double average_map = 0;
};

namespace detail {

struct FlatPred {
    std::string sample;
    Detection det;
};

/// AP with all-point interpolation: area under the precision envelope.
inline double average_precision(std::vector<double>& is_tp, std::int64_t num_gt) {
    // is_tp is already in descending-score order; entries are 1 (tp) or 0.
    if (num_gt == 0) return 0.0;
    double tp = 0, fp = 0;
    std::vector<double> precision, recall;
    precision.reserve(is_tp.size());
    recall.reserve(is_tp.size());
    for (double v : is_tp) {
        tp += v;
        fp += 1.0 - v;
        precision.push_back(tp / (tp + fp));
        recall.push_back(tp / double(num_gt));
    }
    for (std::size_t i = precision.size(); i-- > 1;)
        precision[i - 1] = std::max(precision[i - 1], precision[i]);
    double ap = 0, prev_recall = 0;
    for (std::size_t i = 0; i < precision.size(); ++i) {
        ap += (recall[i] - prev_recall) * precision[i];
        prev_recall = recall[i];
    }
    return ap;
}

} // namespace detail

/// mAP over the threshold list. Per class and threshold: predictions sorted by
/// score (deterministic tie-breaks), greedily matched to the best unmatched
/// same-class ground-truth segment in the same sample with tIoU >= threshold.
/// Classes with no ground truth anywhere are excluded from the mean.
inline EvalResult mean_average_precision(
    const std::map<std::string, std::vector<Detection>>& predictions,
    const std::map<std::string, std::vector<SegmentAnnotation>>& ground_truth, int classes,
    const std::string& protocol) {
    if (classes < 1) throw ConfigError("mean_average_precision: classes must be >= 1");
    EvalResult res;
    res.protocol = protocol;
    res.thresholds = protocol_thresholds(protocol);

    // Flatten per class once.
    std::vector<std::vector<detail::FlatPred>> preds_by_class(static_cast<std::size_t>(classes));
    for (const auto& [sample, dets] : predictions)
        for (const auto& d : dets) {
            if (d.label < 0 || d.label >= classes)
                throw ConfigError("prediction label " + std::to_string(d.label) +
                                  " out of range for " + std::to_string(classes) + " classes");
            preds_by_class[std::size_t(d.label)].push_back({sample, d});
        }
    for (auto& v : preds_by_class)
        std::sort(v.begin(), v.end(), [](const detail::FlatPred& a, const detail::FlatPred& b) {
            if (a.det.score != b.det.score) return a.det.score > b.det.score;
            if (a.sample != b.sample) return a.sample < b.sample;
            return detection_score_order(a.det, b.det);
        });
    std::vector<std::map<std::string, std::vector<SegmentAnnotation>>> gt_by_class(
        static_cast<std::size_t>(classes));
    std::vector<std::int64_t> gt_count(std::size_t(classes), 0);
    for (const auto& [sample, segs] : ground_truth)
        for (const auto& seg : segs) {
            if (seg.label < 0 || seg.label >= classes)
                throw ConfigError("ground-truth label " + std::to_string(seg.label) +
                                  " out of range for " + std::to_string(classes) + " classes");
            gt_by_class[std::size_t(seg.label)][sample].push_back(seg);
            ++gt_count[std::size_t(seg.label)];
        }

    for (double thr : res.thresholds) {
        double ap_sum = 0;
        int counted = 0;
        for (int c = 0; c < classes; ++c) {
            if (gt_count[std::size_t(c)] == 0) continue; // no ground truth: excluded
            ++counted;
            std::map<std::string, std::vector<bool>> matched;
            for (const auto& [sample, segs] : gt_by_class[std::size_t(c)])
                matched[sample].assign(segs.size(), false);
            std::vector<double> is_tp;
            is_tp.reserve(preds_by_class[std::size_t(c)].size());
            for (const auto& fp : preds_by_class[std::size_t(c)]) {
                double best = -1;
                std::size_t best_j = 0;
                auto it = gt_by_class[std::size_t(c)].find(fp.sample);
                if (it != gt_by_class[std::size_t(c)].end()) {
                    for (std::size_t j = 0; j < it->second.size(); ++j) {
                        if (matched[fp.sample][j]) continue;
                        const auto& seg = it->second[j];
                        const double v =
                            tiou(fp.det.start_s, fp.det.end_s, seg.start_s, seg.end_s);
                        if (v > best) {
                            best = v;
                            best_j = j;
                        }
                    }
                }
                if (best >= thr) {
                    matched[fp.sample][best_j] = true;
                    is_tp.push_back(1.0);
                } else {
                    is_tp.push_back(0.0);
                }
            }
            ap_sum += detail::average_precision(is_tp, gt_count[std::size_t(c)]);
        }
        res.map_per_threshold.push_back(counted ? ap_sum / counted : 0.0);
    }
    double total = 0;
    for (double v : res.map_per_threshold) total += v;
    res.average_map = res.map_per_threshold.empty() ? 0.0 : total / res.map_per_threshold.size();
    return res;
}

// ---------------------------------------------------------------------------
// JSON formats
// ---------------------------------------------------------------------------

inline nlohmann::json predictions_to_json(
    const std::map<std::string, std::vector<Detection>>& preds) {
    nlohmann::json j;
    j["version"] = 1;
    j["results"] = nlohmann::json::object();
    for (const auto& [sample, dets] : preds) {
        auto& arr = j["results"][sample] = nlohmann::json::array();
        for (const auto& d : dets)
            arr.push_back({{"start_s", d.start_s},
                           {"end_s", d.end_s},
                           {"label", d.label},
                           {"score", d.score}});
    }
    return j;
}

inline std::map<std::string, std::vector<Detection>> predictions_from_json(
    const nlohmann::json& j) {
    std::map<std::string, std::vector<Detection>> out;
    try {
        for (const auto& [sample, arr] : j.at("results").items()) {
            auto& v = out[sample];
            for (const auto& jd : arr)
                v.push_back({jd.at("start_s").get<double>(), jd.at("end_s").get<double>(),
                             jd.at("label").get<int>(), jd.at("score").get<double>()});
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed predictions file: ") + e.what());
    }
    return out;
}

inline nlohmann::json ground_truth_to_json(
    const std::map<std::string, std::vector<SegmentAnnotation>>& gts) {
    nlohmann::json j;
    j["version"] = 1;
    j["annotations"] = nlohmann::json::object();
    for (const auto& [sample, segs] : gts)
        j["annotations"][sample] = sample_annotation_json(0, segs)["segments"];
    return j;
}

inline std::map<std::string, std::vector<SegmentAnnotation>> ground_truth_from_json(
    const nlohmann::json& j) {
    std::map<std::string, std::vector<SegmentAnnotation>> out;
    try {
        for (const auto& [sample, segs] : j.at("annotations").items())
            out[sample] = segments_from_json(segs);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed ground-truth file: ") + e.what());
    }
    return out;
}

inline nlohmann::json eval_result_to_json(const EvalResult& r) {
    nlohmann::json j;
    j["version"] = 1;
    j["protocol"] = r.protocol;
    j["thresholds"] = r.thresholds;
    j["map_per_threshold"] = r.map_per_threshold;
    j["average_map"] = r.average_map;
    return j;
}

} // namespace r2tal
