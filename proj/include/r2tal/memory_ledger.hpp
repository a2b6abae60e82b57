// Copyright (c) 2026 The r2tal Authors
// SPDX-License-Identifier: Apache-2.0
//
// Byte-level accounting of cached tensors during forward/backward execution.
// Activation categories drive the peak statistic; parameters are tracked but
// excluded from the peak, which measures what training must hold live beyond
// the weights themselves.

#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "r2tal/errors.hpp"

namespace r2tal {

enum class MemCategory : int {
    InStageActivation = 0,
    StageOutput = 1,
    DownsamplerActivation = 2,
    LocalizerActivation = 3,
    Parameter = 4,
};

inline constexpr int kMemCategoryCount = 5;

inline const char* mem_category_name(MemCategory c) {
    switch (c) {
        case MemCategory::InStageActivation: return "in_stage_activation";
        case MemCategory::StageOutput: return "stage_output";
        case MemCategory::DownsamplerActivation: return "downsampler_activation";
        case MemCategory::LocalizerActivation: return "localizer_activation";
        case MemCategory::Parameter: return "parameter";
    }
    return "?";
}

inline bool is_activation_category(MemCategory c) { return c != MemCategory::Parameter; }

struct MemEvent {
    std::size_t step;  // monotonically increasing event index
    MemCategory category;
    std::int64_t delta; // bytes, positive = alloc, negative = free
};

/// Every cached tensor is allocated and freed through here; the running peak of
/// the activation categories is the measured footprint of a forward+backward.
class MemoryLedger {
public:
    void alloc(MemCategory cat, std::size_t bytes) { record(cat, std::int64_t(bytes)); }

    void free(MemCategory cat, std::size_t bytes) {
        if (std::int64_t(bytes) > current_[idx(cat)])
            throw ConsistencyError(std::string("ledger free of ") + std::to_string(bytes) +
                                   " bytes exceeds live " + mem_category_name(cat) + " total " +
                                   std::to_string(current_[idx(cat)]));
        record(cat, -std::int64_t(bytes));
    }

    std::int64_t current(MemCategory cat) const { return current_[idx(cat)]; }

    std::int64_t current_activation_bytes() const {
        std::int64_t n = 0;
        for (int i = 0; i < kMemCategoryCount; ++i)
            if (is_activation_category(MemCategory(i))) n += current_[i];
        return n;
    }

    /// Peak of the activation total over the event history.
    std::int64_t peak_bytes() const { return peak_; }

    const std::vector<MemEvent>& events() const { return events_; }

    void reset() {
        current_.fill(0);
        peak_ = 0;
        events_.clear();
    }

private:
    static int idx(MemCategory c) { return static_cast<int>(c); }

    void record(MemCategory cat, std::int64_t delta) {
        current_[idx(cat)] += delta;
        events_.push_back({events_.size(), cat, delta});
        if (is_activation_category(cat)) {
            const std::int64_t act = current_activation_bytes();
            if (act > peak_) peak_ = act;
        }
    }

    std::array<std::int64_t, kMemCategoryCount> current_{};
    std::int64_t peak_ = 0;
    std::vector<MemEvent> events_;
};

} // namespace r2tal
