// Copyright (c) 2026 The r2tal Authors
// SPDX-License-Identifier: Apache-2.0
//
// Turns a NetworkSpec plus a ParameterStore into tape programs: stage loops,
// downsamplers, entry padding. Also the analytic peak-memory model that
// mirrors the executor's allocation schedule, and small preset builders used
// by tools and tests.

#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "r2tal/autodiff.hpp"
#include "r2tal/checkpoint.hpp"
#include "r2tal/network_spec.hpp"
#include "r2tal/ops.hpp"
#include "r2tal/tensor.hpp"

namespace r2tal {

/// Zero-pad the temporal axis up to a multiple of m (network entry padding, so
/// every downsampler sees an evenly divisible length).
template <typename T>
Tensor<T> pad_to_multiple(const Tensor<T>& x, std::int64_t m) {
    if (x.rank() != 2) throw DimError("pad_to_multiple expects [T, C], got " + shape_str(x.shape()));
    if (m < 1) throw DimError("pad multiple must be >= 1");
    const std::int64_t t = x.dim(0), c = x.dim(1);
    const std::int64_t t_pad = (t + m - 1) / m * m;
    if (t_pad == t) return x;
    Tensor<T> out({t_pad, c});
    std::copy(x.data().begin(), x.data().end(), out.data().begin());
    return out;
}

template <typename T>
std::map<std::string, int> register_params(Tape<T>& tape, const NetworkSpec& spec,
                                            const ParameterStore<T>& store) {
    std::map<std::string, int> slots;
    for (const auto& [name, shape] : spec_param_layout(spec)) {
        const Tensor<T>& t = store.get(name);
        if (t.shape() != shape)
            throw BuildError("parameter " + name + " has shape " + shape_str(t.shape()) +
                             ", spec requires " + shape_str(shape));
        slots[name] = tape.add_param(name, &t);
    }
    return slots;
}

struct BackboneIO {
    int input = -1;
    int features = -1;
};

/// Record the whole backbone on the tape. Reversibly-wired stages become a
/// composite reversible node when the tape runs in Reversible mode; everything
/// else is recorded op by op and cached. Both modes execute the same kernels
/// in the same order, so forward values are bit-identical.
template <typename T>
BackboneIO emit_backbone(Tape<T>& tape, const NetworkSpec& spec, const ParameterStore<T>& store,
                         const Tensor<T>& x) {
    if (auto diags = validate_spec(spec); !diags.empty())
        throw BuildError("invalid network spec: " + diags.front());
    if (x.rank() != 2 || x.dim(1) != spec.input_shape[1])
        throw DimError("backbone input must be [T, " + std::to_string(spec.input_shape[1]) +
                       "], got " + shape_str(x.shape()));

    auto pslots = register_params(tape, spec, store);
    auto block_slots = [&](const BlockSpec& b) {
        std::vector<int> out;
        out.reserve(b.param_names.size());
        for (const auto& n : b.param_names) out.push_back(pslots.at(n));
        return out;
    };

    BackboneIO io;
    const std::int64_t stride = spec.meta().overall_stride;
    tape.set_category(MemCategory::DownsamplerActivation);
    io.input = tape.add_input(pad_to_multiple(x, stride), MemCategory::DownsamplerActivation);

    int cur = io.input;
    for (std::size_t s = 0; s < spec.stages.size(); ++s) {
        const StageSpec& st = spec.stages[s];
        if (!st.blocks.empty()) {
            if (st.wiring == Wiring::Reversible) {
                std::vector<std::vector<int>> bp;
                bp.reserve(st.blocks.size());
                for (const auto& b : st.blocks) bp.push_back(block_slots(b));
                int z1 = -1, z2 = -1;
                if (tape.mode() == ExecMode::Reversible) {
                    tape.set_category(MemCategory::InStageActivation);
                    std::tie(z1, z2) = tape.rev_stage(st.blocks, bp, cur);
                } else {
                    // Same two-stream computation, every step cached.
                    tape.set_category(MemCategory::InStageActivation);
                    int s1 = cur, s2 = cur; // entry duplicate: shared slot
                    for (std::size_t b = 0; b < st.blocks.size(); ++b) {
                        int f = emit_block(tape, st.blocks[b], bp[b], s1);
                        int t1 = tape.add(f, s2);
                        s2 = s1;
                        s1 = t1;
                    }
                    z1 = s1;
                    z2 = s2;
                }
                tape.set_category(MemCategory::DownsamplerActivation);
                cur = tape.average(z1, z2);
            } else {
                tape.set_category(MemCategory::InStageActivation);
                for (const auto& b : st.blocks) {
                    int f = emit_block(tape, b, block_slots(b), cur);
                    cur = tape.add(f, cur);
                }
            }
        }
        if (s < spec.downsamplers.size()) {
            const DownsampleSpec& ds = spec.downsamplers[s];
            tape.set_category(MemCategory::DownsamplerActivation);
            auto names = downsampler_param_names(s);
            int h = tape.conv1d(cur, pslots.at(names[0]), ds.stride, (ds.kernel - 1) / 2);
            cur = tape.add_rowvec(h, pslots.at(names[1]));
        }
    }
    io.features = cur;
    return io;
}

/// Plain forward: features for an input, nothing retained.
template <typename T>
Tensor<T> backbone_forward(const NetworkSpec& spec, const ParameterStore<T>& store,
                           const Tensor<T>& x, ExecMode mode = ExecMode::CacheAll) {
    Tape<T> tape(mode);
    auto io = emit_backbone(tape, spec, store, x);
    return tape.value(io.features);
}

// ---------------------------------------------------------------------------
// Analytic memory model
// ---------------------------------------------------------------------------

namespace detail {

struct BlockBytes {
    std::int64_t main_slots; // slots recorded on the main tape per block-step
    std::int64_t replay_peak; // transient peak of a value replay
    std::int64_t local_tape; // slots of a one-block VJP tape (incl. input copy)
};

inline BlockBytes block_bytes(const BlockSpec& b, std::int64_t t, std::int64_t elem) {
    const std::int64_t tc = t * b.channels * elem;
    const std::int64_t th = t * b.hidden * elem;
    const std::int64_t tt = t * t * elem;
    switch (b.kind) {
        case BlockKind::ConvNormRelu: return {5 * tc, 4 * tc, 5 * tc};
        case BlockKind::Mlp: return {4 * tc + 3 * th, 3 * tc + 3 * th, 4 * tc + 3 * th};
        case BlockKind::Attention: return {7 * tc + 3 * tt, 6 * tc + 3 * tt, 7 * tc + 3 * tt};
    }
    return {0, 0, 0};
}

} // namespace detail

/// Predicted peak of cached bytes for one forward+backward of the backbone at
/// temporal length t_in, mirroring the tape's allocation schedule. The batch
/// model materializes `batch` tapes before any backward runs.
inline std::int64_t predict_peak_memory(const NetworkSpec& spec, ExecMode mode, std::int64_t t_in,
                                        DType dtype, std::int64_t batch = 1) {
    if (auto diags = validate_spec(spec); !diags.empty())
        throw BuildError("invalid network spec: " + diags.front());
    if (t_in < 1 || batch < 1) throw DimError("predict_peak_memory: t_in and batch must be >= 1");
    const std::int64_t elem = dtype == DType::f64 ? 8 : 4;
    const std::int64_t stride = spec.meta().overall_stride;
    const std::int64_t t0 = (t_in + stride - 1) / stride * stride;

    // Per-stage temporal lengths and boundary byte sizes.
    const std::size_t ns = spec.stages.size();
    std::vector<std::int64_t> t_s(ns), c_s(ns);
    {
        std::int64_t t = t0;
        std::int64_t c = spec.input_shape[1];
        for (std::size_t s = 0; s < ns; ++s) {
            t_s[s] = t;
            c_s[s] = spec.stages[s].blocks.empty() ? c : spec.stages[s].blocks.front().channels;
            if (s < spec.downsamplers.size()) {
                const auto& ds = spec.downsamplers[s];
                t = conv1d_out_len(t, ds.kernel, ds.stride, (ds.kernel - 1) / 2);
                c = ds.out_channels;
            }
        }
    }
    auto stage_tc = [&](std::size_t s) { return t_s[s] * c_s[s] * elem; };
    auto ds_bytes = [&](std::size_t s) { // two slots after downsampler s
        const auto& ds = spec.downsamplers[s];
        return 2 * conv1d_out_len(t_s[s], ds.kernel, ds.stride, (ds.kernel - 1) / 2) *
               ds.out_channels * elem;
    };
    auto stage_cached_slots = [&](std::size_t s) { // all block-steps recorded and kept
        std::int64_t n = 0;
        for (const auto& b : spec.stages[s].blocks)
            n += detail::block_bytes(b, t_s[s], elem).main_slots;
        return n;
    };
    auto is_rev = [&](std::size_t s) {
        return spec.stages[s].wiring == Wiring::Reversible && !spec.stages[s].blocks.empty();
    };

    const std::int64_t input_bytes = t0 * spec.input_shape[1] * elem;

    if (mode == ExecMode::CacheAll) {
        std::int64_t total = input_bytes;
        for (std::size_t s = 0; s < ns; ++s) {
            total += stage_cached_slots(s);
            if (spec.stages[s].wiring == Wiring::Reversible && !spec.stages[s].blocks.empty())
                total += stage_tc(s); // exit average
            if (s < spec.downsamplers.size()) total += ds_bytes(s);
        }
        // Peak is the end of forward; backward only frees. Batched tapes all
        // reach full size before any backward starts.
        return batch * total;
    }

    // Reversible mode: boundaries retained, in-stage state transient.
    std::int64_t retained = input_bytes;
    std::int64_t fwd_peak = retained;
    for (std::size_t s = 0; s < ns; ++s) {
        if (is_rev(s)) {
            const std::int64_t tc = stage_tc(s);
            std::int64_t replay = 0;
            for (const auto& b : spec.stages[s].blocks)
                replay = std::max(replay, detail::block_bytes(b, t_s[s], elem).replay_peak);
            // Working pair + replay transient, and the pair-handoff moment
            // where stream buffers are counted in two categories at once.
            const std::int64_t transient = 2 * tc + std::max(replay, 2 * tc);
            fwd_peak = std::max(fwd_peak, retained + transient);
            retained += 2 * tc + tc; // cached pair + exit average
        } else {
            retained += stage_cached_slots(s);
        }
        if (s < spec.downsamplers.size()) retained += ds_bytes(s);
        fwd_peak = std::max(fwd_peak, retained);
    }

    // Backward sweep, stages processed in reverse; live set at stage k is the
    // upstream boundary caches plus stage k's own pair.
    std::int64_t bwd_peak = retained;
    for (std::size_t k = ns; k-- > 0;) {
        if (!is_rev(k)) continue;
        std::int64_t live = input_bytes;
        for (std::size_t j = 0; j < k; ++j) {
            live += is_rev(j) ? 3 * stage_tc(j) : stage_cached_slots(j);
            live += ds_bytes(j);
        }
        live += 2 * stage_tc(k); // this stage's cached pair, average already freed
        const std::int64_t tc = stage_tc(k);
        std::int64_t transient = 0;
        for (const auto& b : spec.stages[k].blocks) {
            const auto bb = detail::block_bytes(b, t_s[k], elem);
            transient = std::max(transient, std::max(bb.replay_peak, tc + bb.local_tape));
        }
        bwd_peak = std::max(bwd_peak, live + 2 * tc + transient);
    }

    const std::int64_t single = std::max(fwd_peak, bwd_peak);
    return (batch - 1) * retained + single;
}

// ---------------------------------------------------------------------------
// Frame accounting
// ---------------------------------------------------------------------------

enum class FrameArrangement { Snippet, Frame };

inline FrameArrangement frame_arrangement_from_name(const std::string& s) {
    if (s == "snippet") return FrameArrangement::Snippet;
    if (s == "frame") return FrameArrangement::Frame;
    throw ConfigError("unknown frame arrangement: " + s);
}

/// Frames the feature extractor touches to produce n output positions. Snippet
/// arrangement runs a window of snippet_len frames per position; frame
/// arrangement consumes a contiguous clip of n * stride frames.
inline std::int64_t count_frames_processed(FrameArrangement a, std::int64_t n,
                                           std::int64_t snippet_len, std::int64_t stride) {
    if (n < 0 || snippet_len < 1 || stride < 1)
        throw DimError("count_frames_processed: invalid arguments");
    return a == FrameArrangement::Snippet ? n * snippet_len : n * stride;
}

// ---------------------------------------------------------------------------
// Preset builders
// ---------------------------------------------------------------------------

/// Uniform backbone: `blocks_per_stage[i]` blocks of one kind per stage,
/// channels doubling at each downsampler, canonical parameter names.
inline NetworkSpec make_backbone_spec(BlockKind kind, std::int64_t c0,
                                      const std::vector<std::int64_t>& blocks_per_stage,
                                      std::int64_t stride = 2, std::int64_t kernel = 3,
                                      std::int64_t hidden_mult = 2) {
    if (blocks_per_stage.empty()) throw ConfigError("backbone needs at least one stage");
    NetworkSpec spec;
    spec.input_shape = {-1, c0};
    std::int64_t c = c0;
    for (std::size_t s = 0; s < blocks_per_stage.size(); ++s) {
        StageSpec st;
        st.wiring = Wiring::Residual;
        for (std::int64_t b = 0; b < blocks_per_stage[s]; ++b) {
            BlockSpec blk;
            blk.kind = kind;
            blk.channels = c;
            blk.kernel = kernel;
            if (kind == BlockKind::Mlp) blk.hidden = c * hidden_mult;
            blk.param_names = canonical_param_names(kind, s, std::size_t(b));
            st.blocks.push_back(std::move(blk));
        }
        spec.stages.push_back(std::move(st));
        if (s + 1 < blocks_per_stage.size()) {
            DownsampleSpec ds;
            ds.stride = stride;
            ds.in_channels = c;
            ds.out_channels = c * 2;
            ds.kernel = kernel;
            spec.downsamplers.push_back(ds);
            c *= 2;
        }
    }
    return spec;
}

/// Same spec with every stage resized to d blocks (names regenerated).
inline NetworkSpec with_blocks_per_stage(const NetworkSpec& spec, std::int64_t d) {
    if (d < 0) throw ConfigError("blocks per stage must be >= 0");
    NetworkSpec out = spec;
    for (std::size_t s = 0; s < out.stages.size(); ++s) {
        auto& st = out.stages[s];
        if (st.blocks.empty())
            throw ConfigError("stage " + std::to_string(s) + " has no template block to replicate");
        const BlockSpec proto = st.blocks.front();
        st.blocks.assign(std::size_t(d), proto);
        for (std::size_t b = 0; b < st.blocks.size(); ++b)
            st.blocks[b].param_names = canonical_param_names(proto.kind, s, b);
    }
    return out;
}

} // namespace r2tal
