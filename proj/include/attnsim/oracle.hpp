#pragma once

// The length-capped small-transformer oracle. Enforces the input-length and
// parameter-shape limits as hard errors, executes calls via the reference
// forward pass, and records every call in a ledger grouped into adaptivity
// rounds. Also hosts the restricted workbench: the only host-side processing
// simulations may perform is concatenation, padding, selection, and declared
// MLP-equivalent arithmetic (no transcendental functions), plus routed
// column-sum oracle calls. An audit over the workbench transcript catches
// simulations that compute attention outside the oracle.

#include <cstddef>
#include <regex>
#include <sstream>
#include <string>
#include <vector>

#include "attnsim/matrix.hpp"
#include "attnsim/reference.hpp"

namespace attnsim {

// ----------------------------- capacity -----------------------------

struct OracleCapacity {
    std::size_t m_max = 0;    // max input rows per call
    std::size_t l_small = 1;  // layers available per call
    std::size_t h_small = 1;  // heads per layer available per call
    std::size_t d_small = 0;  // max model width inside a call
    MaskKind mask = MaskKind::dense();

    void validate() const {
        if (m_max < 1) throw ConfigError("oracle capacity: m_max >= 1 required");
        if (h_small < 1 || d_small % h_small != 0) {
            throw ConfigError("oracle capacity: h_small must divide d_small");
        }
    }

    // Algorithmic block size: one row of headroom for a synthetic token.
    std::size_t default_chunk() const { return m_max - 1; }
};

// ----------------------------- ledger -----------------------------

struct CallRecord {
    std::size_t round = 0;
    std::string tag;  // denominator / ratio / prefix / suffix / sample:* / pack:* / sum / large-call
    std::size_t input_len = 0;
};

struct CallLedger {
    std::vector<CallRecord> calls;
    std::size_t rounds = 0;

    void begin_round() { ++rounds; }

    void record(const std::string& tag, std::size_t input_len) {
        if (rounds == 0) rounds = 1;  // calls never float outside a round
        calls.push_back({rounds, tag, input_len});
    }

    std::size_t count_tag(const std::string& tag) const {
        std::size_t n = 0;
        for (const CallRecord& c : calls)
            if (c.tag == tag) ++n;
        return n;
    }

    std::size_t count_tag_prefix(const std::string& prefix) const {
        std::size_t n = 0;
        for (const CallRecord& c : calls)
            if (c.tag.rfind(prefix, 0) == 0) ++n;
        return n;
    }

    std::string to_json() const {
        std::ostringstream os;
        os << "{\"rounds\":" << rounds << ",\"calls\":[";
        for (std::size_t i = 0; i < calls.size(); ++i) {
            if (i) os << ",";
            os << "{\"round\":" << calls[i].round << ",\"tag\":\"" << calls[i].tag
               << "\",\"input_len\":" << calls[i].input_len << "}";
        }
        os << "]}";
        return os.str();
    }
};

// ----------------------------- oracle call -----------------------------

inline Matrix oracle_call(CallLedger& ledger, const Matrix& input,
                          const TransformerParams& params, const OracleCapacity& cap,
                          const std::string& tag = "call") {
    cap.validate();
    if (input.rows > cap.m_max) {
        throw RestrictionError("oracle_call: input length " + std::to_string(input.rows) +
                               " exceeds cap " + std::to_string(cap.m_max));
    }
    if (params.L > cap.l_small || params.layers.size() > cap.l_small) {
        throw RestrictionError("oracle_call: layer count exceeds cap");
    }
    if (params.H > cap.h_small) {
        throw RestrictionError("oracle_call: head count exceeds cap");
    }
    if (params.d > cap.d_small) {
        throw RestrictionError("oracle_call: model width " + std::to_string(params.d) +
                               " exceeds cap " + std::to_string(cap.d_small));
    }
    if (!(params.mask == cap.mask)) {
        throw RestrictionError("oracle_call: mask kind differs from the oracle's");
    }
    ledger.record(tag, input.rows);
    return transformer_forward(input, params);
}

// ----------------------------- column sums -----------------------------

// One oracle call that returns the column-sum of the given rows: constant
// query/key rows make the softmax uniform, values are scaled by the row
// count, and the last row (which sees every token under dense or causal
// masking) then holds the exact sum.
inline Matrix sum_via_oracle(CallLedger& ledger, const Matrix& rows,
                             const OracleCapacity& cap) {
    if (cap.mask.variant != MaskKind::Variant::Dense &&
        cap.mask.variant != MaskKind::Variant::Causal) {
        throw ConfigError("sum_via_oracle: needs a dense or causal oracle");
    }
    const std::size_t n = rows.rows, d = rows.cols;
    if (n == 0) throw ShapeError("sum_via_oracle: no rows");

    Matrix wq(d + 1, d + 1);
    for (std::size_t j = 0; j <= d; ++j) wq(d, j) = 1.0;  // constant query row
    Matrix wv(d + 1, d + 1);
    for (std::size_t k = 0; k < d; ++k) wv(k, k) = double(n);

    TransformerParams p;
    p.input_mlp.steps = {MlpStep::pad_const({1.0})};
    p.input_mlp.budget = (d + 1) * (d + 1);
    p.layers = {{{HeadParams{wq, wq, wv}}, MlpSpec::identity()}};
    p.mask = cap.mask;
    p.d = d + 1;
    p.H = 1;
    p.L = 1;

    const Matrix out = oracle_call(ledger, rows, p, cap, "sum");
    return slice_cols(slice_rows(out, n - 1, n), 0, d);
}

// ----------------------------- workbench -----------------------------

// Host-side processing surface. Every operation appends its kind to the
// transcript; the audit below accepts only arrangement ops (concat / pad /
// select), declared MLP-equivalent arithmetic, and routed sum calls. There
// is deliberately no exp here: softmax weight can only come from the oracle.
class Workbench {
public:
    virtual ~Workbench() = default;

    std::vector<std::string> transcript;

    Matrix concat(const std::vector<Matrix>& parts, Axis axis) {
        note("concat");
        return attnsim::concat(parts, axis);
    }
    Matrix pad(const Matrix& m, const std::vector<PadEdit>& edits, std::size_t budget) {
        note("pad");
        return pad_constants(m, edits, budget);
    }
    Matrix take_rows(const Matrix& m, std::size_t begin, std::size_t end) {
        note("select");
        return slice_rows(m, begin, end);
    }
    Matrix take_cols(const Matrix& m, std::size_t begin, std::size_t end) {
        note("select");
        return slice_cols(m, begin, end);
    }
    Matrix gather_rows(const Matrix& m, const std::vector<std::size_t>& idx) {
        note("select");
        return select_rows(m, idx);
    }
    Matrix gather_cols(const Matrix& m, const std::vector<std::size_t>& idx) {
        note("select");
        return select_cols(m, idx);
    }

    // MLP-equivalent elementwise arithmetic (affine maps and division are
    // within the modeled MLP power; see the recombination displays).
    Matrix add(const Matrix& a, const Matrix& b) {
        note("mlp_equiv:add");
        return zip(a, b, [](double x, double y) { return x + y; }, "add");
    }
    Matrix subtract(const Matrix& a, const Matrix& b) {
        note("mlp_equiv:subtract");
        return zip(a, b, [](double x, double y) { return x - y; }, "subtract");
    }
    Matrix multiply(const Matrix& a, const Matrix& b) {
        note("mlp_equiv:multiply");
        return zip(a, b, [](double x, double y) { return x * y; }, "multiply");
    }
    Matrix divide(const Matrix& a, const Matrix& b) {
        note("mlp_equiv:divide");
        return zip(a, b,
                   [](double x, double y) {
                       if (y == 0.0) throw DegenerateError("workbench divide: zero denominator");
                       return x / y;
                   },
                   "divide");
    }
    Matrix scale(const Matrix& a, double c) {
        note("mlp_equiv:scale");
        Matrix out = a;
        for (double& v : out.data) v *= c;
        return out;
    }
    Matrix shift(const Matrix& a, double c) {
        note("mlp_equiv:shift");
        Matrix out = a;
        for (double& v : out.data) v += c;
        return out;
    }
    // x -> scale * x / (1 - x) on one column (host-side ratio recovery).
    Matrix ratio_recover(const Matrix& a, std::size_t col, double s = 1.0) {
        note("mlp_equiv:ratio-recover");
        Matrix out = a;
        for (std::size_t i = 0; i < out.rows; ++i) {
            const double x = out(i, col);
            if (x >= 1.0) throw DegenerateError("ratio recovery: value not below 1");
            out(i, col) = s * x / (1.0 - x);
        }
        return out;
    }
    // Scale row i of m by weights(i, 0).
    Matrix row_weight(const Matrix& m, const Matrix& weights) {
        note("mlp_equiv:row-weight");
        if (weights.rows != m.rows || weights.cols != 1) {
            throw ShapeError("row_weight: need one weight per row");
        }
        Matrix out = m;
        for (std::size_t i = 0; i < m.rows; ++i)
            for (std::size_t j = 0; j < m.cols; ++j) out(i, j) *= weights(i, 0);
        return out;
    }
    // Divide row i of m by denoms(i, 0).
    Matrix row_divide(const Matrix& m, const Matrix& denoms) {
        note("mlp_equiv:row-divide");
        if (denoms.rows != m.rows || denoms.cols != 1) {
            throw ShapeError("row_divide: need one denominator per row");
        }
        Matrix out = m;
        for (std::size_t i = 0; i < m.rows; ++i) {
            if (denoms(i, 0) == 0.0) throw DegenerateError("row_divide: zero denominator");
            for (std::size_t j = 0; j < m.cols; ++j) out(i, j) /= denoms(i, 0);
        }
        return out;
    }
    // Same, but a zero denominator yields a zero row. Used for partial
    // statistics whose weight in the recombination is exactly zero anyway
    // (an empty suffix contributes nothing).
    Matrix row_divide_or_zero(const Matrix& m, const Matrix& denoms) {
        note("mlp_equiv:row-divide");
        if (denoms.rows != m.rows || denoms.cols != 1) {
            throw ShapeError("row_divide: need one denominator per row");
        }
        Matrix out = m;
        for (std::size_t i = 0; i < m.rows; ++i) {
            for (std::size_t j = 0; j < m.cols; ++j) {
                out(i, j) = (denoms(i, 0) == 0.0) ? 0.0 : out(i, j) / denoms(i, 0);
            }
        }
        return out;
    }

    // Column sums routed through the oracle (pure-oracle recombination).
    Matrix sum_rows(CallLedger& ledger, const Matrix& rows, const OracleCapacity& cap) {
        note("sum-call");
        return sum_via_oracle(ledger, rows, cap);
    }

protected:
    void note(const std::string& kind) { transcript.push_back(kind); }

private:
    template <typename F>
    static Matrix zip(const Matrix& a, const Matrix& b, F f, const char* what) {
        if (!a.same_shape(b)) throw ShapeError(std::string("workbench ") + what + ": shape");
        Matrix out(a.rows, a.cols);
        for (std::size_t i = 0; i < a.data.size(); ++i) out.data[i] = f(a.data[i], b.data[i]);
        return out;
    }
};

// Deliberately unrestricted variant for audit tests: exposes raw exp, which
// an honest simulation never needs and the audit rejects on sight.
class UnrestrictedWorkbench : public Workbench {
public:
    double raw_exp(double v) {
        note("raw:exp");
        return std::exp(v);
    }
};

// True iff every transcript entry is one of the permitted host-side ops.
inline bool audit_transcript(const std::vector<std::string>& transcript) {
    static const std::regex allowed("^(concat|pad|select|mlp_equiv:[a-z-]+|sum-call)$");
    for (const std::string& op : transcript) {
        if (!std::regex_match(op, allowed)) return false;
    }
    return true;
}

}  // namespace attnsim
