// Copyright (c) 2026 The r2tal Authors
// SPDX-License-Identifier: Apache-2.0
//
// Tape-based reverse-mode autodiff over the kernel set, with two execution
// modes. CacheAll keeps every op output alive until its VJP runs. Reversible
// wraps a reversibly-wired stage in a single composite node that caches only
// the stage-final stream pair and reconstructs in-stage activations during the
// backward sweep, so the cached footprint does not grow with stage depth.
// Forward values are computed by the same kernels in both modes, hence are
// bit-identical; gradients differ only through floating-point reconstruction.

#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "r2tal/errors.hpp"
#include "r2tal/memory_ledger.hpp"
#include "r2tal/network_spec.hpp"
#include "r2tal/ops.hpp"
#include "r2tal/tensor.hpp"

namespace r2tal {

enum class ExecMode { CacheAll, Reversible };

inline const char* exec_mode_name(ExecMode m) {
    return m == ExecMode::CacheAll ? "cache_all" : "reversible";
}

inline ExecMode exec_mode_from_name(const std::string& s) {
    if (s == "cache_all") return ExecMode::CacheAll;
    if (s == "reversible") return ExecMode::Reversible;
    throw ConfigError("unknown execution mode: " + s);
}

template <typename T>
using GradientMap = std::map<std::string, Tensor<T>>;

inline constexpr double kLayerNormEps = 1e-5;

template <typename T>
class Tape {
public:
    explicit Tape(ExecMode mode, MemoryLedger* ledger = nullptr,
                  MemCategory category = MemCategory::InStageActivation)
        : mode_(mode), ledger_(ledger), category_(category) {}

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    ~Tape() {
        for (auto& s : slots_)
            if (s.live && !s.ref) ledger_free(s);
    }

    ExecMode mode() const { return mode_; }
    MemoryLedger* ledger() const { return ledger_; }

    /// Category applied to slots recorded from now on.
    void set_category(MemCategory c) { category_ = c; }
    MemCategory category() const { return category_; }

    // --- leaves -------------------------------------------------------------

    int add_input(Tensor<T> v, MemCategory cat) {
        return push_slot(std::move(v), cat, /*leaf=*/true, nullptr, {});
    }

    /// Parameters are referenced, never copied; they are not ledger-tracked
    /// here (the harness accounts the store once under Parameter).
    int add_param(const std::string& name, const Tensor<T>* value) {
        return push_slot(Tensor<T>{}, MemCategory::Parameter, /*leaf=*/true, value, name);
    }

    const Tensor<T>& value(int slot) const {
        const Slot& s = slots_.at(std::size_t(slot));
        if (s.ref) return *s.ref;
        if (!s.live) throw ConsistencyError("read of freed tape slot");
        return s.value;
    }

    // --- recorded ops ---------------------------------------------------------

    int add(int a, int b) { return unary_out(OpKind::Add, {a, b}, ops_add(value(a), value(b))); }
    int sub(int a, int b) { return unary_out(OpKind::Sub, {a, b}, ops_sub(value(a), value(b))); }

    /// Fused (a + b) / 2; the reversible stage exit.
    int average(int a, int b) {
        return unary_out(OpKind::Average, {a, b}, ops_scale(ops_add(value(a), value(b)), T(0.5)));
    }

    int scale_op(int a, T s) {
        int out = unary_out(OpKind::Scale, {a}, ops_scale(value(a), s));
        nodes_.back().scalar = s;
        return out;
    }

    int add_rowvec(int x, int v) {
        return unary_out(OpKind::AddRowVec, {x, v}, ops_add_rowvec(value(x), value(v)));
    }

    int relu(int x) { return unary_out(OpKind::Relu, {x}, ops_relu(value(x))); }
    int gelu(int x) { return unary_out(OpKind::Gelu, {x}, ops_gelu(value(x))); }

    int matmul(int a, int b) {
        return unary_out(OpKind::Matmul, {a, b}, ops_matmul(value(a), value(b)));
    }

    int matmul_nt(int a, int b) {
        return unary_out(OpKind::MatmulNT, {a, b}, ops_matmul_nt(value(a), value(b)));
    }

    int conv1d(int x, int w, std::int64_t stride, std::int64_t padding) {
        int out = unary_out(OpKind::Conv1d, {x, w}, ops_conv1d(value(x), value(w), stride, padding));
        nodes_.back().stride = stride;
        nodes_.back().padding = padding;
        return out;
    }

    int layernorm(int x, int gamma, int beta) {
        return unary_out(OpKind::LayerNorm, {x, gamma, beta},
                         ops_layernorm(value(x), value(gamma), value(beta), T(kLayerNormEps)));
    }

    int softmax_rows(int x) {
        return unary_out(OpKind::SoftmaxRows, {x}, ops_softmax_rows(value(x)));
    }

    /// Mean over all elements of max(z,0) - z*y + log1p(exp(-|z|)).
    int bce_with_logits_mean(int logits, Tensor<T> targets) {
        const Tensor<T>& z = value(logits);
        require_same_shape(z, targets, "bce_with_logits_mean");
        T acc = T(0);
        for (std::size_t i = 0; i < z.numel(); ++i) {
            const T zi = z.data()[i], yi = targets.data()[i];
            acc += std::max(zi, T(0)) - zi * yi + std::log1p(std::exp(-std::abs(zi)));
        }
        Tensor<T> out({1});
        out.at(0) = acc / T(z.numel());
        int slot = unary_out(OpKind::BceWithLogitsMean, {logits}, std::move(out));
        nodes_.back().aux_a = std::move(targets);
        return slot;
    }

    /// sum(mask * |pred - target|) / denom; mask and denom are constants.
    int masked_l1_mean(int pred, Tensor<T> target, Tensor<T> mask, T denom) {
        const Tensor<T>& p = value(pred);
        require_same_shape(p, target, "masked_l1_mean");
        require_same_shape(p, mask, "masked_l1_mean");
        if (!(denom > T(0))) throw DimError("masked_l1_mean denominator must be positive");
        T acc = T(0);
        for (std::size_t i = 0; i < p.numel(); ++i)
            acc += mask.data()[i] * std::abs(p.data()[i] - target.data()[i]);
        Tensor<T> out({1});
        out.at(0) = acc / denom;
        int slot = unary_out(OpKind::MaskedL1Mean, {pred}, std::move(out));
        nodes_.back().aux_a = std::move(target);
        nodes_.back().aux_b = std::move(mask);
        nodes_.back().scalar = denom;
        return slot;
    }

    /// Composite reversible stage over x: duplicate -> per-block stream steps
    /// (t1, t2) = (F(s1) + s2, s1) -> cached final pair (z1, z2). The exit
    /// average is recorded separately by the caller. block_params[i] holds the
    /// slot ids of block i's parameters in block_param_leaves order.
    std::pair<int, int> rev_stage(const std::vector<BlockSpec>& blocks,
                                  const std::vector<std::vector<int>>& block_params, int x) {
        if (blocks.empty()) throw BuildError("reversible stage must contain at least one block");
        if (block_params.size() != blocks.size())
            throw BuildError("rev_stage: one param-slot list per block required");

        // Record-time forward over plain tensors; kernels identical to the
        // CacheAll path. The working pair is ledger-tracked in-stage state.
        Tensor<T> s1 = value(x);
        Tensor<T> s2 = value(x);
        ledger_alloc_raw(MemCategory::InStageActivation, s1.bytes() + s2.bytes());
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            Tensor<T> f = block_value_forward(blocks[i], block_params[i], s1);
            Tensor<T> t1 = ops_add(f, s2);
            ledger_alloc_raw(MemCategory::InStageActivation, t1.bytes());
            ledger_free_raw(MemCategory::InStageActivation, f.bytes() + s2.bytes());
            s2 = std::move(s1);
            s1 = std::move(t1);
        }
        const std::size_t pair_bytes = s1.bytes() + s2.bytes();
        int z1 = push_slot(std::move(s1), MemCategory::StageOutput, false, nullptr, {});
        int z2 = push_slot(std::move(s2), MemCategory::StageOutput, false, nullptr, {});
        ledger_free_raw(MemCategory::InStageActivation, pair_bytes);

        Node n;
        n.kind = OpKind::RevStage;
        n.in.push_back(x);
        for (const auto& ps : block_params) n.in.insert(n.in.end(), ps.begin(), ps.end());
        n.out = z1;
        n.out2 = z2;
        n.rev = std::make_shared<RevStageDesc>(RevStageDesc{blocks, block_params});
        nodes_.push_back(std::move(n));
        return {z1, z2};
    }

    // --- backward -------------------------------------------------------------

    void backward(int seed_slot) {
        Tensor<T> seed = Tensor<T>::full(value(seed_slot).shape(), T(1));
        backward(seed_slot, std::move(seed));
    }

    void backward(int seed_slot, Tensor<T> seed) {
        require_same_shape(value(seed_slot), seed, "backward seed");
        grads_.assign(slots_.size(), Tensor<T>{});
        std::vector<int> uses(slots_.size(), 0);
        for (const auto& n : nodes_) {
            if (n.out >= 0) ++uses[std::size_t(n.out)];
            if (n.out2 >= 0) ++uses[std::size_t(n.out2)];
            for (int i : n.in) ++uses[std::size_t(i)];
        }
        accum(seed_slot, std::move(seed));
        for (std::size_t k = nodes_.size(); k-- > 0;) {
            const Node& n = nodes_[k];
            vjp(n);
            release_grad(n.out);
            if (n.out2 >= 0) release_grad(n.out2);
            auto consume = [&](int s) {
                if (--uses[std::size_t(s)] == 0) {
                    Slot& sl = slots_[std::size_t(s)];
                    if (!sl.leaf && sl.live && !sl.ref) ledger_free(sl);
                }
            };
            consume(n.out);
            if (n.out2 >= 0) consume(n.out2);
            for (int i : n.in) consume(i);
        }
    }

    /// Gradient of the last backward() w.r.t. a leaf slot; empty tensor when
    /// the leaf did not influence the seeded output.
    const Tensor<T>& leaf_grad(int slot) const {
        const Slot& s = slots_.at(std::size_t(slot));
        if (!s.leaf) throw ConsistencyError("leaf_grad on a non-leaf slot");
        return grads_.at(std::size_t(slot));
    }

    /// Parameter gradients of the last backward(), keyed by parameter name.
    GradientMap<T> param_grads() const {
        GradientMap<T> out;
        for (std::size_t i = 0; i < slots_.size(); ++i)
            if (slots_[i].ref && grads_[i].numel() > 0) out[slots_[i].param_name] = grads_[i];
        return out;
    }

private:
    enum class OpKind {
        Add,
        Sub,
        Average,
        Scale,
        AddRowVec,
        Relu,
        Gelu,
        Matmul,
        MatmulNT,
        Conv1d,
        LayerNorm,
        SoftmaxRows,
        BceWithLogitsMean,
        MaskedL1Mean,
        RevStage,
    };

    struct RevStageDesc {
        std::vector<BlockSpec> blocks;
        std::vector<std::vector<int>> block_params;
    };

    struct Node {
        OpKind kind;
        std::vector<int> in;
        int out = -1;
        int out2 = -1;
        std::int64_t stride = 1;
        std::int64_t padding = 0;
        T scalar = T(0);
        Tensor<T> aux_a; // loss targets
        Tensor<T> aux_b; // loss mask
        std::shared_ptr<RevStageDesc> rev;
    };

    struct Slot {
        Tensor<T> value;
        const Tensor<T>* ref = nullptr; // parameters alias the store
        MemCategory category = MemCategory::InStageActivation;
        bool leaf = false;
        bool live = true;
        std::string param_name;
    };

    // Kernel aliases keep the recorded path and the reversible replay on the
    // exact same code.
    static Tensor<T> ops_add(const Tensor<T>& a, const Tensor<T>& b) { return r2tal::add(a, b); }
    static Tensor<T> ops_sub(const Tensor<T>& a, const Tensor<T>& b) { return r2tal::sub(a, b); }
    static Tensor<T> ops_scale(const Tensor<T>& a, T s) { return r2tal::scale(a, s); }
    static Tensor<T> ops_add_rowvec(const Tensor<T>& x, const Tensor<T>& v) {
        return r2tal::add_rowvec(x, v);
    }
    static Tensor<T> ops_relu(const Tensor<T>& x) { return r2tal::relu(x); }
    static Tensor<T> ops_gelu(const Tensor<T>& x) { return r2tal::gelu(x); }
    static Tensor<T> ops_matmul(const Tensor<T>& a, const Tensor<T>& b) {
        return r2tal::matmul(a, b);
    }
    static Tensor<T> ops_matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
        return r2tal::matmul_nt(a, b);
    }
    static Tensor<T> ops_conv1d(const Tensor<T>& x, const Tensor<T>& w, std::int64_t s,
                                std::int64_t p) {
        return r2tal::conv1d(x, w, s, p);
    }
    static Tensor<T> ops_layernorm(const Tensor<T>& x, const Tensor<T>& g, const Tensor<T>& b,
                                   T eps) {
        return r2tal::layernorm(x, g, b, eps);
    }
    static Tensor<T> ops_softmax_rows(const Tensor<T>& x) { return r2tal::softmax_rows(x); }

    int push_slot(Tensor<T> v, MemCategory cat, bool leaf, const Tensor<T>* ref,
                  std::string name) {
        Slot s;
        s.value = std::move(v);
        s.ref = ref;
        s.category = cat;
        s.leaf = leaf;
        s.live = true;
        s.param_name = std::move(name);
        if (!ref) ledger_alloc_raw(cat, s.value.bytes());
        slots_.push_back(std::move(s));
        return int(slots_.size()) - 1;
    }

    int unary_out(OpKind kind, std::vector<int> in, Tensor<T> result) {
        int out = push_slot(std::move(result), category_, false, nullptr, {});
        Node n;
        n.kind = kind;
        n.in = std::move(in);
        n.out = out;
        nodes_.push_back(std::move(n));
        return out;
    }

    void ledger_alloc_raw(MemCategory cat, std::size_t bytes) {
        if (ledger_ && bytes) ledger_->alloc(cat, bytes);
    }
    void ledger_free_raw(MemCategory cat, std::size_t bytes) {
        if (ledger_ && bytes) ledger_->free(cat, bytes);
    }
    void ledger_free(Slot& s) {
        ledger_free_raw(s.category, s.value.bytes());
        s.value = Tensor<T>{};
        s.live = false;
    }

    void accum(int slot, Tensor<T> g) {
        Tensor<T>& dst = grads_[std::size_t(slot)];
        if (dst.numel() == 0) {
            dst = std::move(g);
        } else {
            require_same_shape(dst, g, "gradient accumulation");
            for (std::size_t i = 0; i < dst.numel(); ++i) dst.data()[i] += g.data()[i];
        }
    }

    void release_grad(int slot) {
        if (slot >= 0 && !slots_[std::size_t(slot)].leaf) grads_[std::size_t(slot)] = Tensor<T>{};
    }

    const Tensor<T>* out_grad(const Node& n) const {
        const Tensor<T>& g = grads_[std::size_t(n.out)];
        return g.numel() ? &g : nullptr;
    }

    /// Forward value of one block, replaying the same kernel sequence that
    /// emit_block records. Working tensors are in-stage ledger traffic.
    Tensor<T> block_value_forward(const BlockSpec& b, const std::vector<int>& pslots,
                                  const Tensor<T>& x) {
        auto P = [&](std::size_t i) -> const Tensor<T>& { return value(pslots.at(i)); };
        LocalScope scope(this);
        switch (b.kind) {
            case BlockKind::ConvNormRelu: {
                const auto& h1 = scope.track(ops_conv1d(x, P(0), 1, (b.kernel - 1) / 2));
                const auto& h2 = scope.track(ops_add_rowvec(h1, P(1)));
                const auto& h3 = scope.track(ops_layernorm(h2, P(2), P(3), T(kLayerNormEps)));
                return scope.release(ops_relu(h3));
            }
            case BlockKind::Mlp: {
                const auto& h1 = scope.track(ops_layernorm(x, P(0), P(1), T(kLayerNormEps)));
                const auto& h2 = scope.track(ops_matmul(h1, P(2)));
                const auto& h3 = scope.track(ops_add_rowvec(h2, P(3)));
                const auto& h4 = scope.track(ops_gelu(h3));
                const auto& h5 = scope.track(ops_matmul(h4, P(4)));
                return scope.release(ops_add_rowvec(h5, P(5)));
            }
            case BlockKind::Attention: {
                const auto& h = scope.track(ops_layernorm(x, P(0), P(1), T(kLayerNormEps)));
                const auto& q = scope.track(ops_matmul(h, P(2)));
                const auto& k = scope.track(ops_matmul(h, P(3)));
                const auto& v = scope.track(ops_matmul(h, P(4)));
                const auto& sc = scope.track(ops_matmul_nt(q, k));
                const auto& sd =
                    scope.track(ops_scale(sc, T(1.0 / std::sqrt(double(b.channels)))));
                const auto& at = scope.track(ops_softmax_rows(sd));
                const auto& o = scope.track(ops_matmul(at, v));
                return scope.release(ops_matmul(o, P(5)));
            }
        }
        throw BuildError("unhandled block kind");
    }

    /// Block VJP at input xv with upstream dy: returns d(xv) and accumulates
    /// parameter gradients into the main tape's grad vector. Runs on a local
    /// CacheAll tape whose slots are in-stage ledger traffic.
    Tensor<T> block_vjp(const BlockSpec& b, const std::vector<int>& pslots, const Tensor<T>& xv,
                        const Tensor<T>& dy) {
        Tape<T> lt(ExecMode::CacheAll, ledger_, MemCategory::InStageActivation);
        int xi = lt.add_input(xv, MemCategory::InStageActivation);
        std::vector<int> lp;
        lp.reserve(pslots.size());
        for (int ps : pslots) {
            const Slot& s = slots_[std::size_t(ps)];
            lp.push_back(lt.add_param(s.param_name, s.ref ? s.ref : &s.value));
        }
        int yo = emit_block(lt, b, lp, xi);
        lt.backward(yo, dy);
        for (std::size_t i = 0; i < pslots.size(); ++i) {
            const Tensor<T>& pg = lt.leaf_grad(lp[i]);
            if (pg.numel()) accum(pslots[i], pg);
        }
        Tensor<T> gx = lt.leaf_grad(xi);
        if (gx.numel() == 0) gx = Tensor<T>(xv.shape());
        return gx;
    }

    // RAII byte-tracking for replayed intermediates. track() keeps a tensor
    // alive for the scope (deque: references stay valid); release() hands the
    // result to the caller, who owns freeing its bytes.
    class LocalScope {
    public:
        explicit LocalScope(Tape* t) : t_(t) {}
        ~LocalScope() {
            for (auto& v : kept_) t_->ledger_free_raw(MemCategory::InStageActivation, v.bytes());
        }
        const Tensor<T>& track(Tensor<T> v) {
            t_->ledger_alloc_raw(MemCategory::InStageActivation, v.bytes());
            kept_.push_back(std::move(v));
            return kept_.back();
        }
        Tensor<T> release(Tensor<T> v) {
            t_->ledger_alloc_raw(MemCategory::InStageActivation, v.bytes());
            return v;
        }

    private:
        Tape* t_;
        std::deque<Tensor<T>> kept_;
    };

    // --- VJPs ------------------------------------------------------------------

    void vjp(const Node& n) {
        if (n.kind == OpKind::RevStage) {
            vjp_rev_stage(n);
            return;
        }
        const Tensor<T>* gp = out_grad(n);
        if (!gp) return;
        const Tensor<T>& dy = *gp;
        switch (n.kind) {
            case OpKind::Add: {
                accum(n.in[0], dy);
                accum(n.in[1], dy);
                break;
            }
            case OpKind::Sub: {
                accum(n.in[0], dy);
                accum(n.in[1], ops_scale(dy, T(-1)));
                break;
            }
            case OpKind::Average: {
                Tensor<T> half = ops_scale(dy, T(0.5));
                accum(n.in[0], half);
                accum(n.in[1], std::move(half));
                break;
            }
            case OpKind::Scale: {
                accum(n.in[0], ops_scale(dy, n.scalar));
                break;
            }
            case OpKind::AddRowVec: {
                accum(n.in[0], dy);
                const std::int64_t rows = dy.dim(0), cols = dy.dim(1);
                Tensor<T> dv({cols});
                for (std::int64_t i = 0; i < rows; ++i)
                    for (std::int64_t j = 0; j < cols; ++j) dv.at(j) += dy.at(i, j);
                accum(n.in[1], std::move(dv));
                break;
            }
            case OpKind::Relu: {
                const Tensor<T>& x = value(n.in[0]);
                Tensor<T> dx(x.shape());
                for (std::size_t i = 0; i < x.numel(); ++i)
                    dx.data()[i] = x.data()[i] > T(0) ? dy.data()[i] : T(0);
                accum(n.in[0], std::move(dx));
                break;
            }
            case OpKind::Gelu: {
                const Tensor<T>& x = value(n.in[0]);
                Tensor<T> dx(x.shape());
                for (std::size_t i = 0; i < x.numel(); ++i)
                    dx.data()[i] = dy.data()[i] * gelu_grad_scalar(x.data()[i]);
                accum(n.in[0], std::move(dx));
                break;
            }
            case OpKind::Matmul: { // y = a b
                accum(n.in[0], ops_matmul_nt(dy, value(n.in[1])));
                accum(n.in[1], matmul_tn(value(n.in[0]), dy));
                break;
            }
            case OpKind::MatmulNT: { // y = a b^T
                accum(n.in[0], ops_matmul(dy, value(n.in[1])));
                accum(n.in[1], matmul_tn(dy, value(n.in[0])));
                break;
            }
            case OpKind::Conv1d: {
                vjp_conv1d(n, dy);
                break;
            }
            case OpKind::LayerNorm: {
                vjp_layernorm(n, dy);
                break;
            }
            case OpKind::SoftmaxRows: {
                const Tensor<T>& y = value(n.out);
                Tensor<T> dx(y.shape());
                const std::int64_t rows = y.dim(0), cols = y.dim(1);
                for (std::int64_t i = 0; i < rows; ++i) {
                    T dot = T(0);
                    for (std::int64_t j = 0; j < cols; ++j) dot += dy.at(i, j) * y.at(i, j);
                    for (std::int64_t j = 0; j < cols; ++j)
                        dx.at(i, j) = y.at(i, j) * (dy.at(i, j) - dot);
                }
                accum(n.in[0], std::move(dx));
                break;
            }
            case OpKind::BceWithLogitsMean: {
                const Tensor<T>& z = value(n.in[0]);
                const T g = dy.at(0) / T(z.numel());
                Tensor<T> dz(z.shape());
                for (std::size_t i = 0; i < z.numel(); ++i) {
                    const T zi = z.data()[i];
                    const T sig = zi >= T(0) ? T(1) / (T(1) + std::exp(-zi))
                                             : std::exp(zi) / (T(1) + std::exp(zi));
                    dz.data()[i] = g * (sig - n.aux_a.data()[i]);
                }
                accum(n.in[0], std::move(dz));
                break;
            }
            case OpKind::MaskedL1Mean: {
                const Tensor<T>& p = value(n.in[0]);
                const T g = dy.at(0) / n.scalar;
                Tensor<T> dp(p.shape());
                for (std::size_t i = 0; i < p.numel(); ++i) {
                    const T d = p.data()[i] - n.aux_a.data()[i];
                    const T sgn = d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0));
                    dp.data()[i] = g * n.aux_b.data()[i] * sgn;
                }
                accum(n.in[0], std::move(dp));
                break;
            }
            case OpKind::RevStage:
                break; // handled above
        }
    }

    void vjp_conv1d(const Node& n, const Tensor<T>& dy) {
        const Tensor<T>& x = value(n.in[0]);
        const Tensor<T>& w = value(n.in[1]);
        const std::int64_t t_in = x.dim(0), c_in = x.dim(1);
        const std::int64_t kk = w.dim(0), c_out = w.dim(2);
        const std::int64_t t_out = dy.dim(0);
        Tensor<T> dx(x.shape());
        Tensor<T> dw(w.shape());
        for (std::int64_t to = 0; to < t_out; ++to) {
            for (std::int64_t k = 0; k < kk; ++k) {
                const std::int64_t t = to * n.stride - n.padding + k;
                if (t < 0 || t >= t_in) continue;
                for (std::int64_t ci = 0; ci < c_in; ++ci) {
                    const T xv = x.at(t, ci);
                    for (std::int64_t co = 0; co < c_out; ++co) {
                        const T g = dy.at(to, co);
                        dx.at(t, ci) += g * w.at(k, ci, co);
                        dw.at(k, ci, co) += g * xv;
                    }
                }
            }
        }
        accum(n.in[0], std::move(dx));
        accum(n.in[1], std::move(dw));
    }

    void vjp_layernorm(const Node& n, const Tensor<T>& dy) {
        const Tensor<T>& x = value(n.in[0]);
        const Tensor<T>& gamma = value(n.in[1]);
        const std::int64_t rows = x.dim(0), cols = x.dim(1);
        Tensor<T> dx(x.shape());
        Tensor<T> dgamma({cols});
        Tensor<T> dbeta({cols});
        for (std::int64_t i = 0; i < rows; ++i) {
            T mean = T(0);
            for (std::int64_t j = 0; j < cols; ++j) mean += x.at(i, j);
            mean /= T(cols);
            T var = T(0);
            for (std::int64_t j = 0; j < cols; ++j) {
                const T d = x.at(i, j) - mean;
                var += d * d;
            }
            var /= T(cols);
            const T inv_sigma = T(1) / std::sqrt(var + T(kLayerNormEps));
            T mean_dxhat = T(0), mean_dxhat_xhat = T(0);
            for (std::int64_t j = 0; j < cols; ++j) {
                const T xhat = (x.at(i, j) - mean) * inv_sigma;
                const T dxhat = dy.at(i, j) * gamma.at(j);
                dgamma.at(j) += dy.at(i, j) * xhat;
                dbeta.at(j) += dy.at(i, j);
                mean_dxhat += dxhat;
                mean_dxhat_xhat += dxhat * xhat;
            }
            mean_dxhat /= T(cols);
            mean_dxhat_xhat /= T(cols);
            for (std::int64_t j = 0; j < cols; ++j) {
                const T xhat = (x.at(i, j) - mean) * inv_sigma;
                const T dxhat = dy.at(i, j) * gamma.at(j);
                dx.at(i, j) = inv_sigma * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
            }
        }
        accum(n.in[0], std::move(dx));
        accum(n.in[1], std::move(dgamma));
        accum(n.in[2], std::move(dbeta));
    }

    /// Reversible backward: walk the stage from its cached final pair back to
    /// its entry, reconstructing each step's input pair with the inverse map
    /// (u, v) = (t2, t1 - F(t2)) and differentiating one block at a time.
    void vjp_rev_stage(const Node& n) {
        const RevStageDesc& d = *n.rev;
        const Tensor<T>& z1 = value(n.out);
        const Tensor<T>& z2 = value(n.out2);
        const Tensor<T>* g1 = grads_[std::size_t(n.out)].numel() ? &grads_[std::size_t(n.out)] : nullptr;
        const Tensor<T>* g2 =
            grads_[std::size_t(n.out2)].numel() ? &grads_[std::size_t(n.out2)] : nullptr;
        if (!g1 && !g2) return;

        Tensor<T> a = z1, b = z2;
        ledger_alloc_raw(MemCategory::InStageActivation, a.bytes() + b.bytes());
        Tensor<T> ga = g1 ? *g1 : Tensor<T>(z1.shape());
        Tensor<T> gb = g2 ? *g2 : Tensor<T>(z2.shape());

        for (std::size_t i = d.blocks.size(); i-- > 0;) {
            // Reconstruct the step input (a_prev, b_prev) = (b, a - F(b)).
            Tensor<T> f = block_value_forward(d.blocks[i], d.block_params[i], b);
            Tensor<T> b_prev = ops_sub(a, f);
            ledger_alloc_raw(MemCategory::InStageActivation, b_prev.bytes());
            ledger_free_raw(MemCategory::InStageActivation, f.bytes());
            f = Tensor<T>{};
            // Grad recurrence: ga' = VJP_x(F_i at b, ga) + gb; gb' = ga.
            Tensor<T> gx = block_vjp(d.blocks[i], d.block_params[i], b, ga);
            Tensor<T> ga_next = ops_add(gx, gb);
            gb = std::move(ga);
            ga = std::move(ga_next);
            ledger_free_raw(MemCategory::InStageActivation, a.bytes());
            a = std::move(b);
            b = std::move(b_prev);
        }
        // Entry duplicate: both streams started as x.
        accum(n.in[0], ops_add(ga, gb));
        ledger_free_raw(MemCategory::InStageActivation, a.bytes() + b.bytes());
    }

    ExecMode mode_;
    MemoryLedger* ledger_;
    MemCategory category_;
    std::vector<Slot> slots_;
    std::vector<Node> nodes_;
    std::vector<Tensor<T>> grads_;
};

/// Record one block on a tape: the canonical op sequence per kind. Parameter
/// slots follow block_param_leaves order.
template <typename T>
int emit_block(Tape<T>& tape, const BlockSpec& b, const std::vector<int>& pslots, int x) {
    auto p = [&](std::size_t i) { return pslots.at(i); };
    switch (b.kind) {
        case BlockKind::ConvNormRelu: {
            int h = tape.conv1d(x, p(0), 1, (b.kernel - 1) / 2);
            h = tape.add_rowvec(h, p(1));
            h = tape.layernorm(h, p(2), p(3));
            return tape.relu(h);
        }
        case BlockKind::Mlp: {
            int h = tape.layernorm(x, p(0), p(1));
            h = tape.matmul(h, p(2));
            h = tape.add_rowvec(h, p(3));
            h = tape.gelu(h);
            h = tape.matmul(h, p(4));
            return tape.add_rowvec(h, p(5));
        }
        case BlockKind::Attention: {
            int h = tape.layernorm(x, p(0), p(1));
            int q = tape.matmul(h, p(2));
            int k = tape.matmul(h, p(3));
            int v = tape.matmul(h, p(4));
            int s = tape.matmul_nt(q, k);
            s = tape.scale_op(s, T(1.0 / std::sqrt(double(b.channels))));
            s = tape.softmax_rows(s);
            int o = tape.matmul(s, v);
            return tape.matmul(o, p(5));
        }
    }
    throw BuildError("unhandled block kind");
}

/// Central-difference partial derivative of a scalar-valued function of the
/// parameter store, for one coordinate. Double precision only.
template <typename T, typename F>
T numerical_partial(F&& loss_fn, ParameterStore<T>& store, const std::string& name,
                    std::int64_t index, double h = 1e-6) {
    if constexpr (!std::is_same_v<T, double>) {
        throw PrecisionError("numerical_partial requires f64 parameters");
    } else {
        Tensor<T>& t = store.get_mut(name);
        if (index < 0 || std::size_t(index) >= t.numel())
            throw DimError("numerical_partial: coordinate out of range for " + name);
        const T saved = t.data()[std::size_t(index)];
        t.data()[std::size_t(index)] = saved + h;
        const T up = loss_fn(store);
        t.data()[std::size_t(index)] = saved - h;
        const T down = loss_fn(store);
        t.data()[std::size_t(index)] = saved;
        return (up - down) / (2 * h);
    }
}

} // namespace r2tal
