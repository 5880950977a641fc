#pragma once

// Token-wise MLPs as a closed catalog of auditable primitives: affine maps,
// coordinate selection, constant padding, index-thresholded constants, the
// ratio map x -> scale*x/(1-x), row reversal, and index-shifted lookup.
// Each spec carries a caller-declared arithmetic budget per token; applying
// a spec that exceeds its budget is an error, never a silent clamp.

#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "attnsim/matrix.hpp"

namespace attnsim {

// ----------------------------- steps -----------------------------

struct MlpStep {
    enum class Kind {
        Affine,        // row -> row * w + bias
        SelectCols,    // keep the listed columns, in order
        PadConst,      // append one constant column per listed value
        IndexedConst,  // append a column: high for row index < threshold, else low
        RatioRecover,  // column c: x -> scale * x / (1 - x)
        Reverse,       // output row i reads input row n-1-i
        LookupShift,   // output row i reads input row i + offsets[i]
        Compose,       // nested child steps
    };

    Kind kind = Kind::Affine;

    Matrix w;                          // Affine
    std::vector<double> bias;          // Affine (empty = none)
    std::vector<std::size_t> indices;  // SelectCols
    std::vector<double> values;        // PadConst
    std::size_t threshold = 0;         // IndexedConst
    double high = 1.0;                 // IndexedConst
    double low = 0.0;                  // IndexedConst
    std::size_t col = 0;               // RatioRecover
    double scale = 1.0;                // RatioRecover
    std::vector<long long> offsets;    // LookupShift
    std::vector<MlpStep> children;     // Compose

    static MlpStep affine(Matrix w, std::vector<double> bias = {}) {
        MlpStep s;
        s.kind = Kind::Affine;
        s.w = std::move(w);
        s.bias = std::move(bias);
        return s;
    }
    static MlpStep select_cols(std::vector<std::size_t> indices) {
        MlpStep s;
        s.kind = Kind::SelectCols;
        s.indices = std::move(indices);
        return s;
    }
    static MlpStep pad_const(std::vector<double> values) {
        MlpStep s;
        s.kind = Kind::PadConst;
        s.values = std::move(values);
        return s;
    }
    static MlpStep indexed_const(std::size_t threshold, double high = 1.0, double low = 0.0) {
        MlpStep s;
        s.kind = Kind::IndexedConst;
        s.threshold = threshold;
        s.high = high;
        s.low = low;
        return s;
    }
    static MlpStep ratio_recover(std::size_t col, double scale = 1.0) {
        MlpStep s;
        s.kind = Kind::RatioRecover;
        s.col = col;
        s.scale = scale;
        return s;
    }
    static MlpStep reverse() {
        MlpStep s;
        s.kind = Kind::Reverse;
        return s;
    }
    static MlpStep lookup_shift(std::vector<long long> offsets) {
        MlpStep s;
        s.kind = Kind::LookupShift;
        s.offsets = std::move(offsets);
        return s;
    }
    static MlpStep compose(std::vector<MlpStep> children) {
        MlpStep s;
        s.kind = Kind::Compose;
        s.children = std::move(children);
        return s;
    }

    // Arithmetic charged against the spec budget, per token.
    std::size_t cost() const {
        switch (kind) {
            case Kind::Affine:
                return w.rows * w.cols + bias.size();
            case Kind::SelectCols:
                return indices.size();
            case Kind::PadConst:
                return values.size();
            case Kind::IndexedConst:
                return 1;
            case Kind::RatioRecover:
                return 4;
            case Kind::Reverse:
            case Kind::LookupShift:
                return 1;
            case Kind::Compose: {
                std::size_t total = 0;
                for (const MlpStep& c : children) total += c.cost();
                return total;
            }
        }
        return 0;
    }
};

// ----------------------------- spec -----------------------------

constexpr std::size_t kUnboundedBudget = std::numeric_limits<std::size_t>::max();

struct MlpSpec {
    std::vector<MlpStep> steps;

    // Max arithmetic per token; library builders set this to O(width^2).
    std::size_t budget = kUnboundedBudget;

    // Expected input width; 0 accepts any. A layer MLP declaring twice the
    // model width asks the layer to feed it [head outputs || pre-layer row].
    std::size_t input_width = 0;

    static MlpSpec identity() { return MlpSpec{}; }
    bool is_identity() const { return steps.empty(); }

    std::size_t cost() const {
        std::size_t total = 0;
        for (const MlpStep& s : steps) total += s.cost();
        return total;
    }
};

// ----------------------------- application -----------------------------

namespace detail {

inline Matrix apply_step(const MlpStep& s, Matrix cur) {
    switch (s.kind) {
        case MlpStep::Kind::Affine: {
            Matrix out = matmul(cur, s.w);
            if (!s.bias.empty()) {
                if (s.bias.size() != out.cols) throw ShapeError("mlp affine: bias width");
                for (std::size_t i = 0; i < out.rows; ++i)
                    for (std::size_t j = 0; j < out.cols; ++j) out(i, j) += s.bias[j];
            }
            return out;
        }
        case MlpStep::Kind::SelectCols:
            return select_cols(cur, s.indices);
        case MlpStep::Kind::PadConst: {
            Matrix out(cur.rows, cur.cols + s.values.size());
            for (std::size_t i = 0; i < cur.rows; ++i) {
                for (std::size_t j = 0; j < cur.cols; ++j) out(i, j) = cur(i, j);
                for (std::size_t j = 0; j < s.values.size(); ++j)
                    out(i, cur.cols + j) = s.values[j];
            }
            return out;
        }
        case MlpStep::Kind::IndexedConst: {
            Matrix out(cur.rows, cur.cols + 1);
            for (std::size_t i = 0; i < cur.rows; ++i) {
                for (std::size_t j = 0; j < cur.cols; ++j) out(i, j) = cur(i, j);
                out(i, cur.cols) = (i < s.threshold) ? s.high : s.low;
            }
            return out;
        }
        case MlpStep::Kind::RatioRecover: {
            if (s.col >= cur.cols) throw ShapeError("ratio recovery: column out of range");
            for (std::size_t i = 0; i < cur.rows; ++i) {
                const double x = cur(i, s.col);
                if (x >= 1.0) {
                    throw DegenerateError("ratio recovery: value " + std::to_string(x) +
                                          " not below 1");
                }
                cur(i, s.col) = s.scale * x / (1.0 - x);
            }
            return cur;
        }
        case MlpStep::Kind::Reverse: {
            Matrix out(cur.rows, cur.cols);
            for (std::size_t i = 0; i < cur.rows; ++i)
                for (std::size_t j = 0; j < cur.cols; ++j)
                    out(i, j) = cur(cur.rows - 1 - i, j);
            return out;
        }
        case MlpStep::Kind::LookupShift: {
            if (s.offsets.size() != cur.rows)
                throw ShapeError("lookup shift: one offset per row required");
            Matrix out(cur.rows, cur.cols);
            for (std::size_t i = 0; i < cur.rows; ++i) {
                const long long src = static_cast<long long>(i) + s.offsets[i];
                if (src < 0 || src >= static_cast<long long>(cur.rows))
                    throw ShapeError("lookup shift: row " + std::to_string(i) +
                                     " reads out of range");
                for (std::size_t j = 0; j < cur.cols; ++j)
                    out(i, j) = cur(static_cast<std::size_t>(src), j);
            }
            return out;
        }
        case MlpStep::Kind::Compose: {
            for (const MlpStep& c : s.children) cur = apply_step(c, std::move(cur));
            return cur;
        }
    }
    throw ShapeError("mlp: unknown step kind");
}

}  // namespace detail

inline Matrix mlp_apply(const MlpSpec& spec, const Matrix& x) {
    if (spec.input_width != 0 && x.cols != spec.input_width) {
        throw ShapeError("mlp_apply: expected width " + std::to_string(spec.input_width) +
                         ", got " + std::to_string(x.cols));
    }
    const std::size_t cost = spec.cost();
    if (cost > spec.budget) {
        throw RestrictionError("mlp_apply: per-token arithmetic " + std::to_string(cost) +
                               " exceeds budget " + std::to_string(spec.budget));
    }
    Matrix cur = x;
    for (const MlpStep& s : spec.steps) cur = detail::apply_step(s, std::move(cur));
    check_finite(cur, "mlp_apply");
    return cur;
}

}  // namespace attnsim
