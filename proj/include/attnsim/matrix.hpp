#pragma once

// Dense real-matrix kernel: multiplication, masked row softmax, concatenation,
// constant padding, row/column selection. Every other component computes on
// these operations and nothing else.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace attnsim {

// ----------------------------- error types -----------------------------

// Dimension mismatch between operands.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// A hard limit of the computational model was violated (padding budget,
// call length cap, per-token MLP budget). Never clamped, always thrown.
struct RestrictionError : std::runtime_error {
    explicit RestrictionError(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid run parameters (divisibility, window/chunk relations, ...).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Numerically impossible state reached (fully masked softmax row,
// normalizer ratio at or above 1).
struct DegenerateError : std::runtime_error {
    explicit DegenerateError(const std::string& msg) : std::runtime_error(msg) {}
};

// ----------------------------- Matrix -----------------------------

struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;  // row-major

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0)
        : rows(r), cols(c), data(r * c, fill) {}

    double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
};

inline Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

// Throws if any entry is NaN or infinite. Public kernel operations call this
// on their results so non-finite values never propagate silently.
inline void check_finite(const Matrix& m, const char* where) {
    for (double v : m.data) {
        if (!std::isfinite(v)) {
            throw DegenerateError(std::string(where) + ": non-finite entry");
        }
    }
}

// ----------------------------- masks -----------------------------

struct MaskKind {
    enum class Variant { Dense, Causal, Window, Sink };
    Variant variant = Variant::Dense;
    std::size_t r = 0;  // window size (Window, Sink)
    std::size_t s = 0;  // sink size (Sink)

    static MaskKind dense() { return {Variant::Dense, 0, 0}; }
    static MaskKind causal() { return {Variant::Causal, 0, 0}; }
    static MaskKind window(std::size_t r) {
        if (r < 1) throw ConfigError("window mask needs r >= 1");
        return {Variant::Window, r, 0};
    }
    static MaskKind sink(std::size_t s, std::size_t r) {
        if (r < 1 || s < 1) throw ConfigError("sink mask needs s >= 1 and r >= 1");
        return {Variant::Sink, r, s};
    }

    bool operator==(const MaskKind& o) const {
        return variant == o.variant && r == o.r && s == o.s;
    }

    // Is key j visible to query i (0-based indices)?
    bool visible(std::size_t i, std::size_t j) const {
        switch (variant) {
            case Variant::Dense:
                return true;
            case Variant::Causal:
                return j <= i;
            case Variant::Window:
                // keep j with i-r+1 <= j <= i (1-based), i.e. j+r > i in 0-based terms
                return j <= i && j + r > i;
            case Variant::Sink:
                // first s keys stay visible to every (causal) query
                return j <= i && (j + r > i || j < s);
        }
        return true;
    }

    const char* name() const {
        switch (variant) {
            case Variant::Dense: return "dense";
            case Variant::Causal: return "causal";
            case Variant::Window: return "window";
            case Variant::Sink: return "sink";
        }
        return "?";
    }
};

// ----------------------------- operations -----------------------------

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows) {
        throw ShapeError("matmul: " + std::to_string(a.rows) + "x" + std::to_string(a.cols) +
                         " times " + std::to_string(b.rows) + "x" + std::to_string(b.cols));
    }
    Matrix out(a.rows, b.cols);
    for (std::size_t i = 0; i < a.rows; ++i) {
        for (std::size_t k = 0; k < a.cols; ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;  // keeps zero-padded slots bit-inert
            for (std::size_t j = 0; j < b.cols; ++j) {
                out(i, j) += aik * b(k, j);
            }
        }
    }
    check_finite(out, "matmul");
    return out;
}

inline Matrix transpose(const Matrix& a) {
    Matrix out(a.cols, a.rows);
    for (std::size_t i = 0; i < a.rows; ++i)
        for (std::size_t j = 0; j < a.cols; ++j) out(j, i) = a(i, j);
    return out;
}

// Row softmax with masked entries contributing zero weight. Stabilized by
// per-row max subtraction, which is an algebraic identity on the result.
inline Matrix masked_row_softmax(const Matrix& scores, const MaskKind& mask) {
    Matrix out(scores.rows, scores.cols);
    for (std::size_t i = 0; i < scores.rows; ++i) {
        double row_max = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < scores.cols; ++j) {
            if (mask.visible(i, j)) row_max = std::max(row_max, scores(i, j));
        }
        if (row_max == -std::numeric_limits<double>::infinity()) {
            throw DegenerateError("masked_row_softmax: fully masked row " + std::to_string(i));
        }
        double sum = 0.0;
        for (std::size_t j = 0; j < scores.cols; ++j) {
            if (mask.visible(i, j)) {
                const double e = std::exp(scores(i, j) - row_max);
                out(i, j) = e;
                sum += e;
            }
        }
        for (std::size_t j = 0; j < scores.cols; ++j) out(i, j) /= sum;
    }
    check_finite(out, "masked_row_softmax");
    return out;
}

enum class Axis { Rows, Cols };

inline Matrix concat(const std::vector<Matrix>& parts, Axis axis) {
    if (parts.empty()) throw ShapeError("concat: no parts");
    if (axis == Axis::Rows) {
        const std::size_t cols = parts.front().cols;
        std::size_t rows = 0;
        for (const Matrix& p : parts) {
            if (p.cols != cols) throw ShapeError("concat rows: column count mismatch");
            rows += p.rows;
        }
        Matrix out(rows, cols);
        std::size_t at = 0;
        for (const Matrix& p : parts) {
            std::copy(p.data.begin(), p.data.end(), out.data.begin() + at * cols);
            at += p.rows;
        }
        return out;
    }
    const std::size_t rows = parts.front().rows;
    std::size_t cols = 0;
    for (const Matrix& p : parts) {
        if (p.rows != rows) throw ShapeError("concat cols: row count mismatch");
        cols += p.cols;
    }
    Matrix out(rows, cols);
    std::size_t at = 0;
    for (const Matrix& p : parts) {
        for (std::size_t i = 0; i < rows; ++i) {
            std::copy(p.data.begin() + i * p.cols, p.data.begin() + (i + 1) * p.cols,
                      out.data.begin() + i * cols + at);
        }
        at += p.cols;
    }
    return out;
}

// One appended line of constants. Axis::Rows appends a constant row at
// row index `index` (entries shifted down from there); Axis::Cols a column.
struct PadEdit {
    Axis axis = Axis::Rows;
    std::size_t index = 0;  // insertion position; == current count appends at the end
    double value = 0.0;
};

// Append rows/columns of fixed constants. The number of constant entries
// written is charged against `budget` — the model allows only a bounded
// number of padded fixed numbers per arrangement, so overruns are errors.
inline Matrix pad_constants(const Matrix& m, const std::vector<PadEdit>& edits,
                            std::size_t budget) {
    Matrix out = m;
    std::size_t spent = 0;
    for (const PadEdit& e : edits) {
        const std::size_t cost = (e.axis == Axis::Rows) ? out.cols : out.rows;
        spent += cost;
        if (spent > budget) {
            throw RestrictionError("pad_constants: budget " + std::to_string(budget) +
                                   " exceeded (" + std::to_string(spent) + " constants)");
        }
        if (e.axis == Axis::Rows) {
            if (e.index > out.rows) throw ShapeError("pad_constants: row index out of range");
            Matrix next(out.rows + 1, out.cols, e.value);
            for (std::size_t i = 0; i < out.rows; ++i) {
                const std::size_t dst = (i < e.index) ? i : i + 1;
                std::copy(out.data.begin() + i * out.cols, out.data.begin() + (i + 1) * out.cols,
                          next.data.begin() + dst * out.cols);
            }
            out = std::move(next);
        } else {
            if (e.index > out.cols) throw ShapeError("pad_constants: col index out of range");
            Matrix next(out.rows, out.cols + 1, e.value);
            for (std::size_t i = 0; i < out.rows; ++i) {
                for (std::size_t j = 0; j < out.cols; ++j) {
                    const std::size_t dst = (j < e.index) ? j : j + 1;
                    next(i, dst) = out(i, j);
                }
            }
            out = std::move(next);
        }
    }
    return out;
}

inline Matrix select_rows(const Matrix& m, const std::vector<std::size_t>& idx) {
    Matrix out(idx.size(), m.cols);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= m.rows) throw ShapeError("select_rows: index out of range");
        std::copy(m.data.begin() + idx[i] * m.cols, m.data.begin() + (idx[i] + 1) * m.cols,
                  out.data.begin() + i * m.cols);
    }
    return out;
}

inline Matrix select_cols(const Matrix& m, const std::vector<std::size_t>& idx) {
    Matrix out(m.rows, idx.size());
    for (std::size_t j = 0; j < idx.size(); ++j) {
        if (idx[j] >= m.cols) throw ShapeError("select_cols: index out of range");
        for (std::size_t i = 0; i < m.rows; ++i) out(i, j) = m(i, idx[j]);
    }
    return out;
}

// Contiguous row range [begin, end).
inline Matrix slice_rows(const Matrix& m, std::size_t begin, std::size_t end) {
    if (begin > end || end > m.rows) throw ShapeError("slice_rows: bad range");
    Matrix out(end - begin, m.cols);
    std::copy(m.data.begin() + begin * m.cols, m.data.begin() + end * m.cols, out.data.begin());
    return out;
}

// Contiguous column range [begin, end).
inline Matrix slice_cols(const Matrix& m, std::size_t begin, std::size_t end) {
    if (begin > end || end > m.cols) throw ShapeError("slice_cols: bad range");
    Matrix out(m.rows, end - begin);
    for (std::size_t i = 0; i < m.rows; ++i) {
        std::copy(m.data.begin() + i * m.cols + begin, m.data.begin() + i * m.cols + end,
                  out.data.begin() + i * out.cols);
    }
    return out;
}

}  // namespace attnsim
