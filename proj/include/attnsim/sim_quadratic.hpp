#pragma once

// Exact simulation of dense and causal attention through length-capped
// oracle calls. Attention over N tokens decomposes over key blocks of size
// M_c: per block, one call recovers the normalizer sums and one call the
// softmax-weighted block averages; the host recombines them with
// MLP-equivalent arithmetic. Under causal masking the diagonal block uses a
// prefix arrangement (synthetic row first) and cross blocks split into a
// call-position-aligned prefix part plus a reversed suffix part. Independent
// sub-calls pack into multi-head multi-layer oracle calls, one grid slot per
// (head, layer) of the small model.

#include <algorithm>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "attnsim/matrix.hpp"
#include "attnsim/mlp.hpp"
#include "attnsim/oracle.hpp"
#include "attnsim/reference.hpp"

namespace attnsim {

// ----------------------------- options -----------------------------

struct SimOptions {
    bool pure_oracle_recombination = false;  // route recombination sums through the oracle
    Workbench* wb = nullptr;                 // transcript sink; private bench when null
};

// ----------------------------- statistics -----------------------------

// Dense decomposition: a(i,t) holds the normalizer sum of query i against
// key block t; r[t] holds the block-restricted softmax averages.
struct BlockStats {
    Matrix a;               // N x T
    std::vector<Matrix> r;  // T entries, each N x m
    std::size_t chunk = 0;
    std::size_t t_count = 0;
};

// Causal decomposition: per key block, the call-position-aligned prefix
// part (a1, r1) and the reversed suffix part (a2, r2). Blocks invisible to
// a query hold exact zeros.
struct CausalBlockStats {
    Matrix a1, a2;               // N x T
    std::vector<Matrix> r1, r2;  // T entries, each N x m
    std::size_t chunk = 0;
    std::size_t t_count = 0;
};

// ----------------------------- arrangements -----------------------------

namespace detail_q {

enum class ArrKind {
    DiagDenom,   // one-block normalizer call (prefix variant under causal)
    CrossDenom,  // paired two-block normalizer call (aligned under causal)
    DiagRatio,   // plain call on the block with the original weights
    CrossRatio,  // paired two-block ratio call with stacked weights
    SuffixDenom, // reversed arrangement normalizer (causal only)
    SuffixRatio, // reversed arrangement ratio (causal only)
};

struct ArrTraits {
    std::size_t data_width = 0;  // arranged row width before in-call padding
    std::size_t dec_width = 0;   // width after the in-call input MLP
    bool ones_col = false;       // +1 score shift column
    bool flag_col = false;       // synthetic-row indicator column feeding V
    int synthetic = 0;           // 0 none, +1 appended last, -1 prepended first
    bool recover = false;        // read column holds x = A/(A+1)
    bool reversed = false;       // extraction must flip row order
    std::string tag;
};

inline ArrTraits traits(ArrKind kind, std::size_t m, const MaskKind& mask) {
    const bool causal = mask.variant == MaskKind::Variant::Causal;
    ArrTraits t;
    switch (kind) {
        case ArrKind::DiagDenom:
            t = {m, m + 2, true, true, causal ? -1 : +1, true, false,
                 causal ? "prefix" : "denominator"};
            break;
        case ArrKind::CrossDenom:
            t = {2 * m, 2 * m + 2, true, true, causal ? -1 : +1, true, false, "denominator"};
            break;
        case ArrKind::DiagRatio:
            t = {m, m, false, false, 0, false, false, "ratio"};
            break;
        case ArrKind::CrossRatio:
            t = {2 * m, 2 * m, false, false, 0, false, false, "ratio"};
            break;
        case ArrKind::SuffixDenom:
            t = {2 * m, 2 * m + 1, false, true, 0, true, true, "suffix"};
            break;
        case ArrKind::SuffixRatio:
            t = {2 * m, 2 * m, false, false, 0, false, true, "suffix"};
            break;
    }
    return t;
}

inline std::size_t call_rows(ArrKind kind, std::size_t block_rows) {
    switch (kind) {
        case ArrKind::DiagDenom:
        case ArrKind::CrossDenom:
            return block_rows + 1;  // synthetic row
        case ArrKind::SuffixDenom:
        case ArrKind::SuffixRatio:
            return block_rows + 1;  // query-only first row and key-only last row overlap
        default:
            return block_rows;
    }
}

// Arranged input rows for one sub-call (decorations are added in-call).
inline Matrix build_input(ArrKind kind, const Matrix& x_queries, const Matrix& x_keys,
                          const MaskKind& mask) {
    const std::size_t mrows = x_queries.rows, m = x_queries.cols;
    const bool causal = mask.variant == MaskKind::Variant::Causal;
    switch (kind) {
        case ArrKind::DiagDenom: {
            const Matrix zero(1, m);
            return causal ? concat({zero, x_queries}, Axis::Rows)
                          : concat({x_queries, zero}, Axis::Rows);
        }
        case ArrKind::CrossDenom: {
            const Matrix paired = concat({x_keys, x_queries}, Axis::Cols);
            const Matrix zero(1, 2 * m);
            return causal ? concat({zero, paired}, Axis::Rows)
                          : concat({paired, zero}, Axis::Rows);
        }
        case ArrKind::DiagRatio:
            return x_queries;
        case ArrKind::CrossRatio:
            return concat({x_keys, x_queries}, Axis::Cols);
        case ArrKind::SuffixDenom:
        case ArrKind::SuffixRatio: {
            // row 0: (last query, 0); row r: (query M-1-r, key M-r); row M: (0, first key)
            Matrix out(mrows + 1, 2 * m);
            for (std::size_t j = 0; j < m; ++j) out(0, j) = x_queries(mrows - 1, j);
            for (std::size_t r = 1; r < mrows; ++r) {
                for (std::size_t j = 0; j < m; ++j) {
                    out(r, j) = x_queries(mrows - 1 - r, j);
                    out(r, m + j) = x_keys(mrows - r, j);
                }
            }
            for (std::size_t j = 0; j < m; ++j) out(mrows, m + j) = x_keys(0, j);
            return out;
        }
    }
    throw ShapeError("build_input: unknown arrangement");
}

// In-call input MLP: the +1 score-shift column and the synthetic-row flag.
inline MlpSpec build_phi(ArrKind kind, std::size_t m, std::size_t block_rows,
                         const MaskKind& mask) {
    const ArrTraits t = traits(kind, m, mask);
    MlpSpec phi;
    if (t.ones_col) phi.steps.push_back(MlpStep::pad_const({1.0}));
    if (t.flag_col) {
        if (t.synthetic == +1) {
            phi.steps.push_back(MlpStep::indexed_const(block_rows, 1.0, 0.0));
        } else {
            // synthetic (or query-only) first row carries flag 0
            phi.steps.push_back(MlpStep::indexed_const(1, 0.0, 1.0));
        }
    }
    phi.budget = t.dec_width * t.dec_width + 4;
    return phi;
}

// Square weight matrices sized to the decorated width. Column convention in
// paired arrangements: keys occupy the first group, queries the second —
// except the reversed suffix arrangement, which puts queries first.
inline HeadParams build_weights(ArrKind kind, const HeadParams& h, std::size_t m,
                                const MaskKind& mask) {
    const ArrTraits t = traits(kind, m, mask);
    const std::size_t w = t.dec_width;
    Matrix wq(w, w), wk(w, w), wv(w, w);
    auto place = [](Matrix& dst, const Matrix& src, std::size_t row0, std::size_t col0) {
        for (std::size_t i = 0; i < src.rows; ++i)
            for (std::size_t j = 0; j < src.cols; ++j) dst(row0 + i, col0 + j) = src(i, j);
    };
    switch (kind) {
        case ArrKind::DiagDenom:
            place(wq, h.wq, 0, 0);
            place(wk, h.wk, 0, 0);
            wq(m, m) = 1.0;      // ones column -> score shift
            wk(m, m) = 1.0;
            wv(m + 1, 0) = 1.0;  // flag column -> read column 0
            break;
        case ArrKind::CrossDenom:
            place(wq, h.wq, m, 0);
            place(wk, h.wk, 0, 0);
            wq(2 * m, m) = 1.0;
            wk(2 * m, m) = 1.0;
            wv(2 * m + 1, 0) = 1.0;
            break;
        case ArrKind::DiagRatio:
            wq = h.wq;
            wk = h.wk;
            wv = h.wv;
            break;
        case ArrKind::CrossRatio:
            place(wq, h.wq, m, 0);
            place(wk, h.wk, 0, 0);
            place(wv, h.wv, 0, 0);
            break;
        case ArrKind::SuffixDenom:
            place(wq, h.wq, 0, 0);
            place(wk, h.wk, m, 0);
            wv(2 * m, 0) = 1.0;
            break;
        case ArrKind::SuffixRatio:
            place(wq, h.wq, 0, 0);
            place(wk, h.wk, m, 0);
            place(wv, h.wv, m, 0);
            break;
    }
    return {wq, wk, wv};
}

// In-call layer MLP: normalizer calls recover A = x/(1-x) on the read column.
inline MlpSpec build_psi(ArrKind kind, std::size_t m, const MaskKind& mask) {
    const ArrTraits t = traits(kind, m, mask);
    MlpSpec psi;
    if (t.recover) psi.steps.push_back(MlpStep::ratio_recover(0, 1.0));
    psi.budget = t.dec_width * t.dec_width + 8;
    return psi;
}

// Run one sub-call unpacked and return its extracted result in query order:
// an M x 1 column of normalizer sums, or M x m ratio rows.
inline Matrix run_subcall(CallLedger& ledger, Workbench& wb, ArrKind kind,
                          const Matrix& x_queries, const Matrix& x_keys, const HeadParams& h,
                          const OracleCapacity& cap, const std::string& tag_override = "") {
    const std::size_t mrows = x_queries.rows, m = x_queries.cols;
    const ArrTraits t = traits(kind, m, cap.mask);
    const Matrix input = build_input(kind, x_queries, x_keys, cap.mask);

    TransformerParams p;
    p.input_mlp = build_phi(kind, m, mrows, cap.mask);
    p.layers = {{{build_weights(kind, h, m, cap.mask)}, build_psi(kind, m, cap.mask)}};
    p.mask = cap.mask;
    p.d = t.dec_width;
    p.H = 1;
    p.L = 1;

    const Matrix out =
        oracle_call(ledger, input, p, cap, tag_override.empty() ? t.tag : tag_override);

    const std::size_t row0 = (t.synthetic == -1) ? 1 : 0;
    Matrix res = wb.take_rows(out, row0, row0 + mrows);
    res = t.recover ? wb.take_cols(res, 0, 1) : wb.take_cols(res, 0, m);
    if (t.reversed) {
        std::vector<std::size_t> order(mrows);
        for (std::size_t i = 0; i < mrows; ++i) order[i] = mrows - 1 - i;
        res = wb.gather_rows(res, order);
    }
    return res;
}

}  // namespace detail_q

// ----------------------------- block calls -----------------------------

// Normalizer sums of each query against the key block. With identical query
// and key data this is the one-block arrangement (prefix sums under a causal
// oracle); otherwise the paired two-block arrangement (aligned-prefix part
// under a causal oracle).
inline Matrix denom_block(CallLedger& ledger, const Matrix& x_queries, const Matrix& x_keys,
                          const Matrix& wq, const Matrix& wk, const OracleCapacity& cap,
                          Workbench* wb = nullptr) {
    if (x_queries.rows != x_keys.rows || x_queries.cols != x_keys.cols) {
        throw ShapeError("denom_block: query and key blocks must share shape");
    }
    Workbench local;
    Workbench& bench = wb ? *wb : local;
    const bool diagonal = x_queries.data == x_keys.data;
    const HeadParams h{wq, wk, Matrix(wq.rows, wq.cols)};
    return detail_q::run_subcall(ledger, bench,
                                 diagonal ? detail_q::ArrKind::DiagDenom
                                          : detail_q::ArrKind::CrossDenom,
                                 x_queries, x_keys, h, cap);
}

// Block-restricted softmax averages B/A for each query against the key
// block (the aligned-prefix averages under a causal oracle).
inline Matrix ratio_block(CallLedger& ledger, const Matrix& x_queries, const Matrix& x_keys,
                          const Matrix& wq, const Matrix& wk, const Matrix& wv,
                          const OracleCapacity& cap, Workbench* wb = nullptr) {
    if (x_queries.rows != x_keys.rows || x_queries.cols != x_keys.cols) {
        throw ShapeError("ratio_block: query and key blocks must share shape");
    }
    Workbench local;
    Workbench& bench = wb ? *wb : local;
    const bool diagonal = x_queries.data == x_keys.data;
    const HeadParams h{wq, wk, wv};
    return detail_q::run_subcall(ledger, bench,
                                 diagonal ? detail_q::ArrKind::DiagRatio
                                          : detail_q::ArrKind::CrossRatio,
                                 x_queries, x_keys, h, cap);
}

// Causal prefix normalizers over one block: sum_{j<=i} exp(<q_i,k_j>).
inline Matrix prefix_denoms_causal(CallLedger& ledger, const Matrix& x_block,
                                   const Matrix& wq, const Matrix& wk,
                                   const OracleCapacity& cap, Workbench* wb = nullptr) {
    if (cap.mask.variant != MaskKind::Variant::Causal) {
        throw ConfigError("prefix_denoms_causal: causal oracle required");
    }
    return denom_block(ledger, x_block, x_block, wq, wk, cap, wb);
}

// Reversed-arrangement suffix statistics for a cross pair: a2 holds the
// call-position suffix normalizers, r2 the matching averages (zero rows for
// empty suffixes). Two oracle calls.
inline std::pair<Matrix, Matrix> suffix_stats_causal(CallLedger& ledger,
                                                     const Matrix& x_block_t,
                                                     const Matrix& x_block_tprime,
                                                     const HeadParams& weights,
                                                     const OracleCapacity& cap,
                                                     Workbench* wb = nullptr) {
    if (cap.mask.variant != MaskKind::Variant::Causal) {
        throw ConfigError("suffix_stats_causal: causal oracle required");
    }
    Workbench local;
    Workbench& bench = wb ? *wb : local;
    const Matrix a2 = detail_q::run_subcall(ledger, bench, detail_q::ArrKind::SuffixDenom,
                                            x_block_t, x_block_tprime, weights, cap);
    // the ratio call's softmax is polluted by the zero key's unit weight:
    // rows hold B2/(A2+1), so scale back by (A2+1) before dividing by A2
    const Matrix rho = detail_q::run_subcall(ledger, bench, detail_q::ArrKind::SuffixRatio,
                                             x_block_t, x_block_tprime, weights, cap);
    const Matrix b2 = bench.row_weight(rho, bench.shift(a2, 1.0));
    const Matrix r2 = bench.row_divide_or_zero(b2, a2);
    return {a2, r2};
}

// ----------------------------- recombination -----------------------------

// Weighted average of block ratios: row i gets sum_t r_t[i]*a[i,t] / sum_t a[i,t].
inline Matrix recombine(const BlockStats& stats, Workbench* wb = nullptr) {
    Workbench local;
    Workbench& bench = wb ? *wb : local;
    const std::size_t n = stats.a.rows, m = stats.r.front().cols;
    Matrix num(n, m), den(n, 1);
    for (std::size_t t = 0; t < stats.t_count; ++t) {
        const Matrix a_col = bench.take_cols(stats.a, t, t + 1);
        num = bench.add(num, bench.row_weight(stats.r[t], a_col));
        den = bench.add(den, a_col);
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (den(i, 0) <= 0.0) throw DegenerateError("recombine: nonpositive normalizer");
    }
    return bench.row_divide(num, den);
}

inline Matrix recombine_causal(const CausalBlockStats& stats, Workbench* wb = nullptr) {
    Workbench local;
    Workbench& bench = wb ? *wb : local;
    const std::size_t n = stats.a1.rows, m = stats.r1.front().cols;
    Matrix num(n, m), den(n, 1);
    for (std::size_t t = 0; t < stats.t_count; ++t) {
        const Matrix a1_col = bench.take_cols(stats.a1, t, t + 1);
        const Matrix a2_col = bench.take_cols(stats.a2, t, t + 1);
        num = bench.add(num, bench.row_weight(stats.r1[t], a1_col));
        num = bench.add(num, bench.row_weight(stats.r2[t], a2_col));
        den = bench.add(den, bench.add(a1_col, a2_col));
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (den(i, 0) <= 0.0) throw DegenerateError("recombine: nonpositive normalizer");
    }
    return bench.row_divide(num, den);
}

namespace detail_q {

// Pure-oracle recombination: per query row, one column-sum call over the
// stacked [weighted ratios || normalizers] rows, then one division.
inline Matrix recombine_via_sums(CallLedger& ledger, Workbench& bench,
                                 const std::vector<Matrix>& weighted_rows,
                                 const std::vector<Matrix>& denom_rows,
                                 const OracleCapacity& cap) {
    const std::size_t n = weighted_rows.size();
    const std::size_t m = weighted_rows.front().cols;
    Matrix out(n, m);
    for (std::size_t i = 0; i < n; ++i) {
        const Matrix stacked = bench.concat({weighted_rows[i], denom_rows[i]}, Axis::Cols);
        const Matrix sums = bench.sum_rows(ledger, stacked, cap);
        const Matrix num = bench.take_cols(sums, 0, m);
        const Matrix den = bench.take_cols(sums, m, m + 1);
        const Matrix row = bench.row_divide(num, den);
        for (std::size_t j = 0; j < m; ++j) out(i, j) = row(0, j);
    }
    return out;
}

}  // namespace detail_q

// ----------------------------- single head -----------------------------

namespace detail_q {

inline void check_chunking(std::size_t n, std::size_t chunk, const OracleCapacity& cap) {
    if (chunk == 0 || chunk > cap.default_chunk()) {
        throw ConfigError("chunk must satisfy 1 <= chunk <= m_max - 1");
    }
    if (n % chunk != 0) {
        throw ConfigError("input length " + std::to_string(n) +
                          " not divisible by chunk " + std::to_string(chunk) +
                          "; padding would perturb the softmax normalizers");
    }
}

inline Matrix block_of(Workbench& bench, const Matrix& x, std::size_t t, std::size_t chunk) {
    return bench.take_rows(x, t * chunk, (t + 1) * chunk);
}

}  // namespace detail_q

// Gather the dense block statistics for one head with 2T^2 unpacked calls.
inline BlockStats collect_stats_dense(CallLedger& ledger, const Matrix& x,
                                      const HeadParams& h, std::size_t chunk,
                                      const OracleCapacity& cap, Workbench& bench) {
    detail_q::check_chunking(x.rows, chunk, cap);
    const std::size_t t_count = x.rows / chunk;
    BlockStats stats;
    stats.chunk = chunk;
    stats.t_count = t_count;

    ledger.begin_round();  // normalizer calls share a round
    std::vector<std::vector<Matrix>> a_cols(t_count);
    for (std::size_t t = 0; t < t_count; ++t) {          // key block
        for (std::size_t tq = 0; tq < t_count; ++tq) {   // query block
            const Matrix keys = detail_q::block_of(bench, x, t, chunk);
            const Matrix queries = detail_q::block_of(bench, x, tq, chunk);
            a_cols[t].push_back(denom_block(ledger, queries, keys, h.wq, h.wk, cap, &bench));
        }
    }

    ledger.begin_round();  // ratio calls share a round
    stats.a = Matrix(x.rows, t_count);
    for (std::size_t t = 0; t < t_count; ++t) {
        std::vector<Matrix> pieces;
        for (std::size_t tq = 0; tq < t_count; ++tq) {
            const Matrix keys = detail_q::block_of(bench, x, t, chunk);
            const Matrix queries = detail_q::block_of(bench, x, tq, chunk);
            pieces.push_back(ratio_block(ledger, queries, keys, h.wq, h.wk, h.wv, cap, &bench));
            const Matrix& a_piece = a_cols[t][tq];
            for (std::size_t i = 0; i < chunk; ++i) stats.a(tq * chunk + i, t) = a_piece(i, 0);
        }
        stats.r.push_back(bench.concat(pieces, Axis::Rows));
    }
    return stats;
}

// Gather the causal block statistics for one head with 2T^2 unpacked calls.
inline CausalBlockStats collect_stats_causal(CallLedger& ledger, const Matrix& x,
                                             const HeadParams& h, std::size_t chunk,
                                             const OracleCapacity& cap, Workbench& bench) {
    detail_q::check_chunking(x.rows, chunk, cap);
    const std::size_t t_count = x.rows / chunk, m = x.cols;
    CausalBlockStats stats;
    stats.chunk = chunk;
    stats.t_count = t_count;
    stats.a1 = Matrix(x.rows, t_count);
    stats.a2 = Matrix(x.rows, t_count);
    stats.r1.assign(t_count, Matrix());
    stats.r2.assign(t_count, Matrix());

    // round 1: all normalizer-style calls (diagonal prefixes, aligned
    // prefixes, reversed suffixes); round 2: all ratio-style calls. The
    // suffix pair is kept together for clarity: its two calls are
    // data-independent, so they are both issued in the first round.
    std::vector<std::vector<Matrix>> r1_pieces(t_count), r2_pieces(t_count);
    for (std::size_t t = 0; t < t_count; ++t) {
        r1_pieces[t].assign(t_count, Matrix(chunk, m));
        r2_pieces[t].assign(t_count, Matrix(chunk, m));
    }

    ledger.begin_round();
    std::vector<std::vector<Matrix>> a1_cols(t_count, std::vector<Matrix>(t_count));
    for (std::size_t tq = 0; tq < t_count; ++tq) {
        const Matrix queries = detail_q::block_of(bench, x, tq, chunk);
        a1_cols[tq][tq] = prefix_denoms_causal(ledger, queries, h.wq, h.wk, cap, &bench);
        for (std::size_t tk = 0; tk < tq; ++tk) {
            const Matrix keys = detail_q::block_of(bench, x, tk, chunk);
            a1_cols[tq][tk] = denom_block(ledger, queries, keys, h.wq, h.wk, cap, &bench);
            const auto [a2_col, r2_rows] =
                suffix_stats_causal(ledger, queries, keys, h, cap, &bench);
            for (std::size_t i = 0; i < chunk; ++i) stats.a2(tq * chunk + i, tk) = a2_col(i, 0);
            r2_pieces[tk][tq] = r2_rows;
        }
    }

    ledger.begin_round();
    for (std::size_t tq = 0; tq < t_count; ++tq) {
        const Matrix queries = detail_q::block_of(bench, x, tq, chunk);
        r1_pieces[tq][tq] = ratio_block(ledger, queries, queries, h.wq, h.wk, h.wv, cap, &bench);
        for (std::size_t i = 0; i < chunk; ++i)
            stats.a1(tq * chunk + i, tq) = a1_cols[tq][tq](i, 0);
        for (std::size_t tk = 0; tk < tq; ++tk) {
            const Matrix keys = detail_q::block_of(bench, x, tk, chunk);
            r1_pieces[tk][tq] =
                ratio_block(ledger, queries, keys, h.wq, h.wk, h.wv, cap, &bench);
            for (std::size_t i = 0; i < chunk; ++i)
                stats.a1(tq * chunk + i, tk) = a1_cols[tq][tk](i, 0);
        }
    }

    for (std::size_t tk = 0; tk < t_count; ++tk) {
        stats.r1[tk] = bench.concat(r1_pieces[tk], Axis::Rows);
        stats.r2[tk] = bench.concat(r2_pieces[tk], Axis::Rows);
    }
    return stats;
}

// Exact single-head attention through 2T^2 oracle calls (T = N/chunk),
// dense or causal following the oracle's mask.
inline Matrix simulate_single_head(CallLedger& ledger, const Matrix& x, const Matrix& wq,
                                   const Matrix& wk, const Matrix& wv, std::size_t chunk,
                                   const OracleCapacity& cap, const SimOptions& opt = {}) {
    Workbench local;
    Workbench& bench = opt.wb ? *opt.wb : local;
    const HeadParams h{wq, wk, wv};

    if (cap.mask.variant == MaskKind::Variant::Dense) {
        const BlockStats stats = collect_stats_dense(ledger, x, h, chunk, cap, bench);
        if (!opt.pure_oracle_recombination) return recombine(stats, &bench);

        ledger.begin_round();  // recombination sums form a third round
        std::vector<Matrix> weighted(x.rows), denoms(x.rows);
        for (std::size_t i = 0; i < x.rows; ++i) {
            std::vector<Matrix> wrows, drows;
            for (std::size_t t = 0; t < stats.t_count; ++t) {
                const Matrix a_it(1, 1, stats.a(i, t));
                wrows.push_back(bench.row_weight(bench.take_rows(stats.r[t], i, i + 1), a_it));
                drows.push_back(a_it);
            }
            weighted[i] = bench.concat(wrows, Axis::Rows);
            denoms[i] = bench.concat(drows, Axis::Rows);
        }
        return detail_q::recombine_via_sums(ledger, bench, weighted, denoms, cap);
    }

    if (cap.mask.variant == MaskKind::Variant::Causal) {
        const CausalBlockStats stats = collect_stats_causal(ledger, x, h, chunk, cap, bench);
        return recombine_causal(stats, &bench);
    }
    throw ConfigError("simulate_single_head: oracle mask must be dense or causal");
}

// ----------------------------- heads and layers -----------------------------

// Simulate a full transformer head by head and layer by layer with unpacked
// calls: 2T^2 * H * L in total. Input and layer MLPs run host-side as
// declared MLP-equivalent steps.
inline Matrix flatten_heads_layers(CallLedger& ledger, const Matrix& x,
                                   const TransformerParams& p, std::size_t chunk,
                                   const OracleCapacity& cap, const SimOptions& opt = {}) {
    p.validate();
    if (!(p.mask == cap.mask)) {
        throw ConfigError("flatten_heads_layers: model and oracle masks differ");
    }
    Workbench local;
    Workbench& bench = opt.wb ? *opt.wb : local;
    SimOptions inner = opt;
    inner.wb = &bench;

    bench.transcript.push_back("mlp_equiv:input-mlp");
    Matrix cur = mlp_apply(p.input_mlp, x);
    const std::size_t m = p.d / p.H;
    for (const LayerParams& layer : p.layers) {
        std::vector<Matrix> outs;
        for (std::size_t hd = 0; hd < p.H; ++hd) {
            const Matrix slice = bench.take_cols(cur, hd * m, (hd + 1) * m);
            outs.push_back(simulate_single_head(ledger, slice, layer.heads[hd].wq,
                                                layer.heads[hd].wk, layer.heads[hd].wv, chunk,
                                                cap, inner));
        }
        Matrix heads_out = bench.concat(outs, Axis::Cols);
        if (layer.layer_mlp.input_width == 2 * cur.cols) {
            heads_out = bench.concat({heads_out, cur}, Axis::Cols);
        }
        bench.transcript.push_back("mlp_equiv:layer-mlp");
        cur = mlp_apply(layer.layer_mlp, heads_out);
    }
    return cur;
}

// ----------------------------- packing -----------------------------

// One independent single-head instance to pack into a grid slot.
struct PackInstance {
    Matrix x;         // M x w slot input
    HeadParams head;  // w x w weights
    MlpSpec mlp;      // slot MLP; must preserve the slot width
};

namespace detail_q {

// Shared block-stacking: embed per-slot square weights into the grid.
// Slot s occupies head s % H', layer s / H', and column block s * w.
struct GridShape {
    std::size_t heads = 1, layers = 1, slot_width = 0;
    std::size_t slots() const { return heads * layers; }
    std::size_t width() const { return heads * layers * slot_width; }
    std::size_t head_of(std::size_t s) const { return s % heads; }
    std::size_t layer_of(std::size_t s) const { return s / heads; }
    std::size_t base_of(std::size_t s) const {
        return (head_of(s) * layers + layer_of(s)) * slot_width;
    }
};

inline GridShape fit_grid(const OracleCapacity& cap, std::size_t slot_width,
                          std::size_t n_instances) {
    GridShape g;
    g.slot_width = slot_width;
    if (slot_width == 0 || slot_width > cap.d_small) {
        throw RestrictionError("packing: slot width " + std::to_string(slot_width) +
                               " does not fit the oracle width " + std::to_string(cap.d_small));
    }
    g.layers = std::min(cap.l_small, cap.d_small / slot_width);
    g.heads = std::min(cap.h_small, cap.d_small / (g.layers * slot_width));
    if (g.heads == 0) g.heads = 1;
    // shrink to what this batch needs
    while (g.layers > 1 && g.heads * (g.layers - 1) >= n_instances) --g.layers;
    return g;
}

// Pass-through layer MLP for grid layer l: columns of this layer's slots
// come from the head outputs, all others from the incoming row.
inline MlpSpec grid_psi(const GridShape& g, std::size_t layer,
                        const std::vector<std::size_t>& recover_cols) {
    const std::size_t d = g.width();
    Matrix sel(2 * d, d);
    for (std::size_t j = 0; j < d; ++j) {
        const std::size_t slot_layer = (j / g.slot_width) % g.layers;
        if (slot_layer == layer) {
            sel(j, j) = 1.0;      // fresh head output
        } else {
            sel(d + j, j) = 1.0;  // pass the incoming value through
        }
    }
    MlpSpec psi;
    psi.input_width = 2 * d;
    psi.steps.push_back(MlpStep::affine(std::move(sel)));
    for (std::size_t col : recover_cols) psi.steps.push_back(MlpStep::ratio_recover(col, 1.0));
    psi.budget = 2 * d * d + 4 * recover_cols.size() + 8;
    return psi;
}

}  // namespace detail_q

// Column-concatenate up to H'*L' independent single-head instances into one
// oracle input, with block-stacked weights so grid layer l's head h computes
// instance (h, l) while every other slot passes through unchanged.
inline std::pair<Matrix, TransformerParams> pack_instances(
    const std::vector<PackInstance>& instances, const OracleCapacity& cap) {
    if (instances.empty()) throw ShapeError("pack_instances: no instances");
    const std::size_t rows = instances.front().x.rows;
    const std::size_t w = instances.front().x.cols;
    for (const PackInstance& ins : instances) {
        if (ins.x.rows != rows || ins.x.cols != w) {
            throw ShapeError("pack_instances: instances must share input shape");
        }
        if (ins.head.width() != w) throw ShapeError("pack_instances: weight width mismatch");
    }
    const detail_q::GridShape g = detail_q::fit_grid(cap, w, instances.size());
    if (instances.size() > g.slots()) {
        throw RestrictionError("pack_instances: " + std::to_string(instances.size()) +
                               " instances exceed the " + std::to_string(g.slots()) +
                               "-slot grid");
    }
    const std::size_t d = g.width();

    Matrix packed(rows, d);
    for (std::size_t s = 0; s < instances.size(); ++s) {
        const std::size_t base = g.base_of(s);
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < w; ++j) packed(i, base + j) = instances[s].x(i, j);
    }

    TransformerParams p;
    p.mask = cap.mask;
    p.d = d;
    p.H = g.heads;
    const std::size_t used_layers = (instances.size() + g.heads - 1) / g.heads;
    p.L = used_layers;
    for (std::size_t l = 0; l < used_layers; ++l) {
        LayerParams layer;
        std::vector<MlpStep> slot_steps;
        for (std::size_t hd = 0; hd < g.heads; ++hd) {
            const std::size_t hw = g.layers * g.slot_width;  // head width
            Matrix wq(hw, hw), wk(hw, hw), wv(hw, hw);
            const std::size_t s = l * g.heads + hd;
            if (s < instances.size()) {
                const std::size_t off = g.layer_of(s) * g.slot_width;
                for (std::size_t i = 0; i < w; ++i) {
                    for (std::size_t j = 0; j < w; ++j) {
                        wq(off + i, off + j) = instances[s].head.wq(i, j);
                        wk(off + i, off + j) = instances[s].head.wk(i, j);
                        wv(off + i, off + j) = instances[s].head.wv(i, j);
                    }
                }
            }
            layer.heads.push_back({wq, wk, wv});
        }
        // embed this layer's slot MLPs after the pass-through selection
        for (std::size_t hd = 0; hd < g.heads; ++hd) {
            const std::size_t s = l * g.heads + hd;
            if (s >= instances.size() || instances[s].mlp.is_identity()) continue;
            const std::size_t base = g.base_of(s);
            for (const MlpStep& step : instances[s].mlp.steps) {
                if (step.kind == MlpStep::Kind::RatioRecover) {
                    slot_steps.push_back(MlpStep::ratio_recover(base + step.col, step.scale));
                } else if (step.kind == MlpStep::Kind::Affine && step.w.rows == w &&
                           step.w.cols == w && step.bias.empty()) {
                    Matrix emb = identity(d);
                    for (std::size_t i = 0; i < w; ++i)
                        for (std::size_t j = 0; j < w; ++j) emb(base + i, base + j) = step.w(i, j);
                    slot_steps.push_back(MlpStep::affine(std::move(emb)));
                } else {
                    throw RestrictionError(
                        "pack_instances: slot MLPs may only recover ratios or apply "
                        "width-preserving affine maps");
                }
            }
        }
        MlpSpec psi = detail_q::grid_psi(g, l, {});
        for (MlpStep& st : slot_steps) psi.steps.push_back(std::move(st));
        psi.budget += d * d * instances.size() + 8;
        layer.layer_mlp = std::move(psi);
        p.layers.push_back(std::move(layer));
    }
    return {std::move(packed), std::move(p)};
}

namespace detail_q {

// A not-yet-issued sub-call: arrangement kind plus its blocks and weights.
struct PendingCall {
    ArrKind kind;
    Matrix queries, keys;
    HeadParams head;
    // where the extracted result goes: destination matrix + row offset
    Matrix* dest_col = nullptr;        // for normalizer columns (N x T, column t)
    std::size_t dest_t = 0;
    Matrix* dest_rows = nullptr;       // for ratio rows (chunk x m pieces)
    std::size_t dest_row0 = 0;
};

// Issue one packed oracle call covering the given same-kind sub-calls.
inline void run_packed_group(CallLedger& ledger, Workbench& bench,
                             const std::vector<PendingCall*>& group,
                             const OracleCapacity& cap,
                             const std::string& tag_prefix = "pack:") {
    const ArrKind kind = group.front()->kind;
    const std::size_t m = group.front()->queries.cols;
    const std::size_t block_rows = group.front()->queries.rows;
    const ArrTraits t = traits(kind, m, cap.mask);
    const GridShape g = fit_grid(cap, t.dec_width, group.size());

    // raw slot data, zero-filled for unused slots
    const std::size_t rows = call_rows(kind, block_rows);
    Matrix data(rows, g.slots() * t.data_width);
    for (std::size_t s = 0; s < group.size(); ++s) {
        const Matrix arranged = build_input(kind, group[s]->queries, group[s]->keys, cap.mask);
        const std::size_t base = g.base_of(s) / t.dec_width * t.data_width;
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < t.data_width; ++j)
                data(i, base + j) = arranged(i, j);
    }

    // in-call input MLP: shared ones/flag columns scattered into every slot
    MlpSpec phi;
    const std::size_t extra = (t.ones_col ? 1 : 0) + (t.flag_col ? 1 : 0);
    if (extra > 0) {
        if (t.ones_col) phi.steps.push_back(MlpStep::pad_const({1.0}));
        if (t.flag_col) {
            if (t.synthetic == +1) {
                phi.steps.push_back(MlpStep::indexed_const(block_rows, 1.0, 0.0));
            } else {
                phi.steps.push_back(MlpStep::indexed_const(1, 0.0, 1.0));
            }
        }
        const std::size_t in_w = g.slots() * t.data_width + extra;
        Matrix scatter(in_w, g.width());
        for (std::size_t s = 0; s < g.slots(); ++s) {
            const std::size_t dbase = s * t.data_width;
            const std::size_t mbase = s * t.dec_width;
            for (std::size_t j = 0; j < t.data_width; ++j) scatter(dbase + j, mbase + j) = 1.0;
            std::size_t at = t.data_width;
            if (t.ones_col) scatter(g.slots() * t.data_width, mbase + at++) = 1.0;
            if (t.flag_col) scatter(g.slots() * t.data_width + (t.ones_col ? 1 : 0),
                                    mbase + at) = 1.0;
        }
        phi.steps.push_back(MlpStep::affine(std::move(scatter)));
        phi.budget = in_w * g.width() + 4;
    }

    // grid weights and per-layer pass-through MLPs
    TransformerParams p;
    p.mask = cap.mask;
    p.d = g.width();
    p.H = g.heads;
    p.L = (group.size() + g.heads - 1) / g.heads;
    p.input_mlp = std::move(phi);
    for (std::size_t l = 0; l < p.L; ++l) {
        LayerParams layer;
        std::vector<std::size_t> recover_cols;
        for (std::size_t hd = 0; hd < g.heads; ++hd) {
            const std::size_t hw = g.layers * t.dec_width;
            Matrix wq(hw, hw), wk(hw, hw), wv(hw, hw);
            const std::size_t s = l * g.heads + hd;
            if (s < group.size()) {
                const HeadParams slot_w = build_weights(kind, group[s]->head, m, cap.mask);
                const std::size_t off = g.layer_of(s) * t.dec_width;
                for (std::size_t i = 0; i < t.dec_width; ++i) {
                    for (std::size_t j = 0; j < t.dec_width; ++j) {
                        wq(off + i, off + j) = slot_w.wq(i, j);
                        wk(off + i, off + j) = slot_w.wk(i, j);
                        wv(off + i, off + j) = slot_w.wv(i, j);
                    }
                }
                if (t.recover) recover_cols.push_back(g.base_of(s));
            }
            layer.heads.push_back({wq, wk, wv});
        }
        layer.layer_mlp = grid_psi(g, l, recover_cols);
        p.layers.push_back(std::move(layer));
    }

    const Matrix out = oracle_call(ledger, data, p, cap, tag_prefix + t.tag);

    // extract every slot's result in query order
    const std::size_t row0 = (t.synthetic == -1) ? 1 : 0;
    for (std::size_t s = 0; s < group.size(); ++s) {
        const std::size_t base = g.base_of(s);
        Matrix res = bench.take_rows(out, row0, row0 + block_rows);
        res = t.recover ? bench.take_cols(res, base, base + 1)
                        : bench.take_cols(res, base, base + m);
        if (t.reversed) {
            std::vector<std::size_t> order(block_rows);
            for (std::size_t i = 0; i < block_rows; ++i) order[i] = block_rows - 1 - i;
            res = bench.gather_rows(res, order);
        }
        PendingCall& pc = *group[s];
        if (pc.dest_col) {
            for (std::size_t i = 0; i < block_rows; ++i)
                (*pc.dest_col)(pc.dest_row0 + i, pc.dest_t) = res(i, 0);
        } else {
            for (std::size_t i = 0; i < block_rows; ++i)
                for (std::size_t j = 0; j < m; ++j)
                    (*pc.dest_rows)(pc.dest_row0 + i, j) = res(i, j);
        }
    }
}

// Partition pending calls by kind and issue each batch packed.
inline void flush_packed(CallLedger& ledger, Workbench& bench,
                         std::vector<PendingCall>& pending, const OracleCapacity& cap,
                         const std::string& tag_prefix = "pack:") {
    std::vector<ArrKind> kinds = {ArrKind::DiagDenom,  ArrKind::CrossDenom,
                                  ArrKind::DiagRatio,  ArrKind::CrossRatio,
                                  ArrKind::SuffixDenom, ArrKind::SuffixRatio};
    for (ArrKind kind : kinds) {
        std::vector<PendingCall*> of_kind;
        for (PendingCall& pc : pending)
            if (pc.kind == kind) of_kind.push_back(&pc);
        if (of_kind.empty()) continue;
        const ArrTraits t = traits(kind, of_kind.front()->queries.cols, cap.mask);
        const GridShape g = fit_grid(cap, t.dec_width, of_kind.size());
        for (std::size_t at = 0; at < of_kind.size(); at += g.slots()) {
            const std::size_t hi = std::min(at + g.slots(), of_kind.size());
            std::vector<PendingCall*> batch(of_kind.begin() + at, of_kind.begin() + hi);
            run_packed_group(ledger, bench, batch, cap, tag_prefix);
        }
    }
    pending.clear();
}

}  // namespace detail_q

// ----------------------------- packed full simulation -----------------------------

namespace detail_q {

// Shared driver for the packed dense and causal full simulations.
inline Matrix simulate_full_impl(CallLedger& ledger, const Matrix& x,
                                 const TransformerParams& p, std::size_t chunk,
                                 const OracleCapacity& cap, const SimOptions& opt) {
    p.validate();
    if (!(p.mask == cap.mask)) {
        throw ConfigError("simulate_full: model and oracle masks differ");
    }
    const bool causal = cap.mask.variant == MaskKind::Variant::Causal;
    Workbench local;
    Workbench& bench = opt.wb ? *opt.wb : local;
    check_chunking(x.rows, chunk, cap);
    const std::size_t t_count = x.rows / chunk;
    const std::size_t m = p.d / p.H;

    bench.transcript.push_back("mlp_equiv:input-mlp");
    Matrix cur = mlp_apply(p.input_mlp, x);

    for (const LayerParams& layer : p.layers) {
        // per-head statistics containers
        std::vector<BlockStats> dstats(p.H);
        std::vector<CausalBlockStats> cstats(p.H);
        std::vector<Matrix> slices(p.H);
        for (std::size_t hd = 0; hd < p.H; ++hd) {
            slices[hd] = bench.take_cols(cur, hd * m, (hd + 1) * m);
            if (causal) {
                cstats[hd].chunk = chunk;
                cstats[hd].t_count = t_count;
                cstats[hd].a1 = Matrix(x.rows, t_count);
                cstats[hd].a2 = Matrix(x.rows, t_count);
                cstats[hd].r1.assign(t_count, Matrix(x.rows, m));
                cstats[hd].r2.assign(t_count, Matrix(x.rows, m));
            } else {
                dstats[hd].chunk = chunk;
                dstats[hd].t_count = t_count;
                dstats[hd].a = Matrix(x.rows, t_count);
                dstats[hd].r.assign(t_count, Matrix(x.rows, m));
            }
        }

        std::vector<detail_q::PendingCall> denom_calls, ratio_calls;
        // suffix results need both calls of the pair; stage raw outputs
        struct SuffixSlot {
            std::size_t head, tq, tk;
            Matrix a2, rho;
        };
        std::vector<SuffixSlot> suffixes;
        // pending calls hold pointers into this vector: size it up front
        if (causal) suffixes.reserve(p.H * t_count * (t_count - 1) / 2);

        for (std::size_t hd = 0; hd < p.H; ++hd) {
            const HeadParams& hw = layer.heads[hd];
            for (std::size_t tq = 0; tq < t_count; ++tq) {
                const Matrix queries = block_of(bench, slices[hd], tq, chunk);
                if (causal) {
                    denom_calls.push_back({ArrKind::DiagDenom, queries, queries, hw,
                                           &cstats[hd].a1, tq, nullptr, tq * chunk});
                    ratio_calls.push_back({ArrKind::DiagRatio, queries, queries, hw, nullptr, 0,
                                           &cstats[hd].r1[tq], tq * chunk});
                    for (std::size_t tk = 0; tk < tq; ++tk) {
                        const Matrix keys = block_of(bench, slices[hd], tk, chunk);
                        denom_calls.push_back({ArrKind::CrossDenom, queries, keys, hw,
                                               &cstats[hd].a1, tk, nullptr, tq * chunk});
                        ratio_calls.push_back({ArrKind::CrossRatio, queries, keys, hw, nullptr,
                                               0, &cstats[hd].r1[tk], tq * chunk});
                        suffixes.push_back({hd, tq, tk, Matrix(chunk, 1), Matrix(chunk, m)});
                        denom_calls.push_back({ArrKind::SuffixDenom, queries, keys, hw,
                                               &suffixes.back().a2, 0, nullptr, 0});
                        ratio_calls.push_back({ArrKind::SuffixRatio, queries, keys, hw, nullptr,
                                               0, &suffixes.back().rho, 0});
                    }
                } else {
                    for (std::size_t tk = 0; tk < t_count; ++tk) {
                        const Matrix keys = block_of(bench, slices[hd], tk, chunk);
                        const ArrKind dk =
                            (tk == tq) ? ArrKind::DiagDenom : ArrKind::CrossDenom;
                        const ArrKind rk =
                            (tk == tq) ? ArrKind::DiagRatio : ArrKind::CrossRatio;
                        denom_calls.push_back({dk, queries, keys, hw, &dstats[hd].a, tk,
                                               nullptr, tq * chunk});
                        ratio_calls.push_back({rk, queries, keys, hw, nullptr, 0,
                                               &dstats[hd].r[tk], tq * chunk});
                    }
                }
            }
        }

        ledger.begin_round();
        flush_packed(ledger, bench, denom_calls, cap);
        ledger.begin_round();
        flush_packed(ledger, bench, ratio_calls, cap);

        // fold staged suffix pairs into the causal statistics
        for (SuffixSlot& sf : suffixes) {
            const Matrix b2 = bench.row_weight(sf.rho, bench.shift(sf.a2, 1.0));
            const Matrix r2 = bench.row_divide_or_zero(b2, sf.a2);
            for (std::size_t i = 0; i < chunk; ++i) {
                cstats[sf.head].a2(sf.tq * chunk + i, sf.tk) = sf.a2(i, 0);
                for (std::size_t j = 0; j < m; ++j)
                    cstats[sf.head].r2[sf.tk](sf.tq * chunk + i, j) = r2(i, j);
            }
        }

        std::vector<Matrix> outs;
        if (opt.pure_oracle_recombination) {
            ledger.begin_round();  // recombination sums form a third round
            for (std::size_t hd = 0; hd < p.H; ++hd) {
                std::vector<Matrix> weighted(x.rows), denoms(x.rows);
                for (std::size_t i = 0; i < x.rows; ++i) {
                    std::vector<Matrix> wrows, drows;
                    for (std::size_t t = 0; t < t_count; ++t) {
                        if (causal) {
                            const Matrix a1(1, 1, cstats[hd].a1(i, t));
                            const Matrix a2(1, 1, cstats[hd].a2(i, t));
                            wrows.push_back(bench.row_weight(
                                bench.take_rows(cstats[hd].r1[t], i, i + 1), a1));
                            wrows.push_back(bench.row_weight(
                                bench.take_rows(cstats[hd].r2[t], i, i + 1), a2));
                            drows.push_back(a1);
                            drows.push_back(a2);
                        } else {
                            const Matrix a_it(1, 1, dstats[hd].a(i, t));
                            wrows.push_back(bench.row_weight(
                                bench.take_rows(dstats[hd].r[t], i, i + 1), a_it));
                            drows.push_back(a_it);
                        }
                    }
                    weighted[i] = bench.concat(wrows, Axis::Rows);
                    denoms[i] = bench.concat(drows, Axis::Rows);
                }
                outs.push_back(detail_q::recombine_via_sums(ledger, bench, weighted, denoms, cap));
            }
        } else {
            for (std::size_t hd = 0; hd < p.H; ++hd) {
                outs.push_back(causal ? recombine_causal(cstats[hd], &bench)
                                      : recombine(dstats[hd], &bench));
            }
        }
        Matrix heads_out = bench.concat(outs, Axis::Cols);
        if (layer.layer_mlp.input_width == 2 * cur.cols) {
            heads_out = bench.concat({heads_out, cur}, Axis::Cols);
        }
        bench.transcript.push_back("mlp_equiv:layer-mlp");
        cur = mlp_apply(layer.layer_mlp, heads_out);
    }
    return cur;
}

}  // namespace detail_q

// Packed dense full simulation: ceil(2 T^2 H L / (H' L')) oracle calls.
// With pure-oracle recombination the per-layer sums are routed through one
// column-sum call per query row per head (a third round per layer).
inline Matrix simulate_full(CallLedger& ledger, const Matrix& x, const TransformerParams& p,
                            std::size_t chunk, const OracleCapacity& cap,
                            const SimOptions& opt = {}) {
    if (p.mask.variant != MaskKind::Variant::Dense) {
        throw ConfigError("simulate_full: dense mask required");
    }
    return detail_q::simulate_full_impl(ledger, x, p, chunk, cap, opt);
}

// Packed causal full simulation: same call budget as the dense path.
inline Matrix simulate_full_causal(CallLedger& ledger, const Matrix& x,
                                   const TransformerParams& p, std::size_t chunk,
                                   const OracleCapacity& cap, const SimOptions& opt = {}) {
    if (p.mask.variant != MaskKind::Variant::Causal) {
        throw ConfigError("simulate_full_causal: causal mask required");
    }
    return detail_q::simulate_full_impl(ledger, x, p, chunk, cap, opt);
}

}  // namespace attnsim
