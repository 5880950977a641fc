#pragma once

// Simulation paths that spend a linear number of oracle calls. Two families
// live here:
//
//  * sampled statistics for dense attention: each query block is scored
//    against one permuted key block, giving an unbiased normalizer estimate
//    and a sampled attention output in N/chunk calls per step;
//  * exact sliding-window and attention-sink simulation through a causal
//    oracle, on a uniform chunk schedule that issues the same calls for
//    every block so the ledger grows exactly linearly in N.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "attnsim/matrix.hpp"
#include "attnsim/mlp.hpp"
#include "attnsim/oracle.hpp"
#include "attnsim/reference.hpp"
#include "attnsim/rng.hpp"
#include "attnsim/sim_quadratic.hpp"

namespace attnsim {

// ----------------------------- boundedness -----------------------------

// Instance conditions the sampled estimator's accuracy rests on: every
// pairwise softmax weight exp(<q_i, k_j>) in [1/c_bound, c_bound], and every
// row's weighted values concentrated enough that
// d_bound * N * max_j ||b_ij|| <= ||sum_j b_ij||.
struct BoundednessProfile {
    double c_bound = 1.0;
    double d_bound = 1.0;
    bool verified = false;
};

// Exhaustive verification result: the profile with its verified flag set,
// the observed extremes, the tightest constants the instance supports, and
// where the worst offenders sit. This is diagnostic code in the style of the
// reference forward pass — it may use exp directly and is not part of any
// simulation transcript.
struct BoundednessReport {
    BoundednessProfile profile;
    bool weights_ok = false;  // all weights within [1/c_bound, c_bound]
    bool values_ok = false;   // d_feasible >= d_bound
    double weight_min = 0.0;
    double weight_max = 0.0;
    double d_feasible = 0.0;
    std::size_t worst_weight_row = 0, worst_weight_col = 0;  // weight extreme
    std::size_t worst_row = 0;                               // smallest feasible D
};

inline BoundednessReport check_boundedness(const Matrix& x, const HeadParams& head,
                                           const BoundednessProfile& profile) {
    head.validate();
    if (x.cols != head.width()) {
        throw ShapeError("check_boundedness: input width " + std::to_string(x.cols) +
                         " vs head width " + std::to_string(head.width()));
    }
    if (profile.c_bound < 1.0 || profile.d_bound <= 0.0 || profile.d_bound > 1.0) {
        throw ConfigError("check_boundedness: need c_bound >= 1 and d_bound in (0, 1]");
    }
    const std::size_t n = x.rows, m = x.cols;
    const Matrix q = matmul(x, head.wq);
    const Matrix k = matmul(x, head.wk);
    const Matrix v = matmul(x, head.wv);

    BoundednessReport rep;
    rep.profile = profile;
    rep.weight_min = std::numeric_limits<double>::infinity();
    rep.weight_max = 0.0;
    rep.d_feasible = std::numeric_limits<double>::infinity();

    std::size_t min_i = 0, min_j = 0, max_i = 0, max_j = 0;
    for (std::size_t i = 0; i < n; ++i) {
        double max_norm = 0.0;
        std::vector<double> sum(m, 0.0);
        for (std::size_t j = 0; j < n; ++j) {
            double score = 0.0;
            for (std::size_t c = 0; c < m; ++c) score += q(i, c) * k(j, c);
            const double w = std::exp(score);
            if (w < rep.weight_min) { rep.weight_min = w; min_i = i; min_j = j; }
            if (w > rep.weight_max) { rep.weight_max = w; max_i = i; max_j = j; }
            double norm2 = 0.0;
            for (std::size_t c = 0; c < m; ++c) {
                const double b = w * v(j, c);
                sum[c] += b;
                norm2 += b * b;
            }
            max_norm = std::max(max_norm, std::sqrt(norm2));
        }
        double sum_norm2 = 0.0;
        for (double s : sum) sum_norm2 += s * s;
        const double feasible =
            (max_norm == 0.0) ? std::numeric_limits<double>::infinity()
                              : std::sqrt(sum_norm2) / (double(n) * max_norm);
        if (feasible < rep.d_feasible) {
            rep.d_feasible = feasible;
            rep.worst_row = i;
        }
    }

    rep.weights_ok =
        rep.weight_min >= 1.0 / profile.c_bound && rep.weight_max <= profile.c_bound;
    rep.values_ok = rep.d_feasible >= profile.d_bound;
    // point at whichever side of the weight range is further out
    const double over = rep.weight_max / profile.c_bound;
    const double under = 1.0 / (rep.weight_min * profile.c_bound);
    rep.worst_weight_row = (over >= under) ? max_i : min_i;
    rep.worst_weight_col = (over >= under) ? max_j : min_j;

    rep.profile.verified = rep.weights_ok && rep.values_ok;
    return rep;
}

// Concentration-style sample size under which the estimator's epsilon/0.9
// guarantee is proven: 8 * C^4 * ln(40 N) / epsilon^2. Desk-scale chunks
// rarely meet it; callers surface a warning, never an error, when below.
inline double sample_size_bound(double c_bound, std::size_t n, double epsilon) {
    if (c_bound < 1.0 || epsilon <= 0.0 || n == 0) {
        throw ConfigError("sample_size_bound: need c_bound >= 1, epsilon > 0, n >= 1");
    }
    const double c2 = c_bound * c_bound;
    return 8.0 * c2 * c2 * std::log(40.0 * double(n)) / (epsilon * epsilon);
}

// ----------------------------- sampled statistics -----------------------------

struct AvgOptions {
    double epsilon_target = 0.25;     // accuracy goal recorded with the estimate
    bool oracle_permutation = false;  // route the permuted pairing through a call
    Workbench* wb = nullptr;          // transcript sink; private bench when null
};

struct SampleEstimate {
    Matrix output;           // sampled transformer output, N x d
    Matrix denom_estimates;  // per-query normalizer estimates, N x (H * L)
    std::uint64_t permutation_seed = 0;
    double epsilon_target = 0.25;
};

namespace detail_l {

inline void check_permutation(const std::vector<std::size_t>& perm, std::size_t n) {
    if (perm.size() != n) {
        throw ConfigError("permutation length " + std::to_string(perm.size()) +
                          " does not match input length " + std::to_string(n));
    }
    std::vector<bool> seen(n, false);
    for (std::size_t i : perm) {
        if (i >= n || seen[i]) throw ConfigError("indices are not a permutation");
        seen[i] = true;
    }
}

// Pass-through oracle call that puts the permuted row pairing on the ledger:
// a zero-weight head contributes nothing, and the extended layer MLP returns
// the pre-attention rows unchanged, so the output equals the input bitwise.
// Callers that opt in charge one of these per sampled block, keeping the
// call count honest about the pairing work instead of doing it all host-side.
inline Matrix lookup_pair(CallLedger& ledger, const Matrix& paired,
                          const OracleCapacity& cap) {
    const std::size_t w = paired.cols;
    Matrix sel(2 * w, w);
    for (std::size_t j = 0; j < w; ++j) sel(w + j, j) = 1.0;
    MlpSpec psi;
    psi.input_width = 2 * w;
    psi.steps.push_back(MlpStep::affine(std::move(sel)));
    psi.budget = 4 * w * w + 8;

    TransformerParams p;
    p.layers = {{{HeadParams{Matrix(w, w), Matrix(w, w), Matrix(w, w)}}, psi}};
    p.mask = cap.mask;
    p.d = w;
    p.H = 1;
    p.L = 1;
    return oracle_call(ledger, paired, p, cap, "lookup");
}

inline void check_sample_chunking(std::size_t n, std::size_t chunk,
                                  const OracleCapacity& cap) {
    if (chunk < 1 || n % chunk != 0) {
        throw ConfigError("sampled estimate: chunk must divide the input length " +
                          std::to_string(n));
    }
    if (chunk + 1 > cap.m_max) {
        throw ConfigError("sampled estimate: chunk " + std::to_string(chunk) +
                          " needs m_max >= chunk + 1, have " + std::to_string(cap.m_max));
    }
}

}  // namespace detail_l

// Sampled normalizer estimate for one head under dense attention. For each
// query block S_t, one paired call scores the block against the permuted
// keys x[tau(S_t)] and returns sum_{j in S_t} exp(<q_i, k_tau(j)>); scaling
// by N/chunk makes it unbiased over a uniform random permutation, since each
// key is sampled without replacement with probability chunk/N. Exactly
// N/chunk oracle calls, all tagged sample:denominator.
inline Matrix avg_denominator_estimate(CallLedger& ledger, const Matrix& x,
                                       const HeadParams& head,
                                       const std::vector<std::size_t>& permutation,
                                       std::size_t chunk, const OracleCapacity& cap,
                                       const AvgOptions& opt = {}) {
    head.validate();
    if (cap.mask.variant != MaskKind::Variant::Dense) {
        throw ConfigError("avg_denominator_estimate: dense oracle required");
    }
    if (x.cols != head.width()) {
        throw ShapeError("avg_denominator_estimate: input width vs head width");
    }
    const std::size_t n = x.rows, m = x.cols;
    detail_l::check_sample_chunking(n, chunk, cap);
    detail_l::check_permutation(permutation, n);

    Workbench local;
    Workbench& bench = opt.wb ? *opt.wb : local;

    Matrix est(n, 1);
    for (std::size_t t = 0; t * chunk < n; ++t) {
        Matrix queries = bench.take_rows(x, t * chunk, (t + 1) * chunk);
        const std::vector<std::size_t> idx(permutation.begin() + t * chunk,
                                           permutation.begin() + (t + 1) * chunk);
        Matrix keys = bench.gather_rows(x, idx);
        if (opt.oracle_permutation) {
            const Matrix paired =
                detail_l::lookup_pair(ledger, bench.concat({keys, queries}, Axis::Cols), cap);
            keys = bench.take_cols(paired, 0, m);
            queries = bench.take_cols(paired, m, 2 * m);
        }
        const Matrix col =
            detail_q::run_subcall(ledger, bench, detail_q::ArrKind::CrossDenom, queries,
                                  keys, head, cap, "sample:denominator");
        for (std::size_t i = 0; i < chunk; ++i) est(t * chunk + i, 0) = col(i, 0);
    }
    return bench.scale(est, double(n) / double(chunk));
}

// Sampled simulation of a dense transformer. Per layer and head, one round
// of permuted normalizer estimates is kept as diagnostics, then one round of
// permuted ratio calls produces the sampled attention rows directly (the
// softmax over a sampled key block is itself the estimator). One permutation
// per (layer, head) is drawn from the given seed and shared by both steps;
// heads get fresh, independent draws. With chunk == N every sample covers
// the whole key set and the output is exact. 2L rounds and
// 2 * (N/chunk) * H * L sub-calls, packed into the oracle grid when it has
// room; the opt-in pairing calls add (N/chunk) * H * L per step.
inline SampleEstimate avg_simulate(CallLedger& ledger, const Matrix& x,
                                   const TransformerParams& p, std::size_t chunk,
                                   std::uint64_t seed, const OracleCapacity& cap,
                                   const AvgOptions& opt = {}) {
    p.validate();
    if (p.mask.variant != MaskKind::Variant::Dense ||
        cap.mask.variant != MaskKind::Variant::Dense) {
        throw ConfigError("avg_simulate: dense model and dense oracle required");
    }
    const std::size_t n = x.rows, m = p.d / p.H;
    detail_l::check_sample_chunking(n, chunk, cap);
    const std::size_t t_count = n / chunk;

    Workbench local;
    Workbench& bench = opt.wb ? *opt.wb : local;

    bench.transcript.push_back("mlp_equiv:input-mlp");
    Matrix cur = mlp_apply(p.input_mlp, x);
    if (cur.cols != p.d) {
        throw ShapeError("avg_simulate: input MLP must produce the model width");
    }

    SampleEstimate est;
    est.permutation_seed = seed;
    est.epsilon_target = opt.epsilon_target;
    est.denom_estimates = Matrix(n, p.H * p.L);

    for (std::size_t l = 0; l < p.L; ++l) {
        const LayerParams& layer = p.layers[l];
        std::vector<Matrix> xh(p.H);
        std::vector<std::vector<std::size_t>> tau(p.H);
        for (std::size_t h = 0; h < p.H; ++h) {
            xh[h] = bench.take_cols(cur, h * m, (h + 1) * m);
            auto gen = make_stream(seed, stream::permutation, l, h);
            tau[h] = random_permutation(gen, n);
        }

        // block inputs for one step: queries in order, keys permuted
        auto sampled_blocks = [&](std::size_t h, std::size_t t, Matrix& queries,
                                  Matrix& keys) {
            queries = bench.take_rows(xh[h], t * chunk, (t + 1) * chunk);
            const std::vector<std::size_t> idx(tau[h].begin() + t * chunk,
                                               tau[h].begin() + (t + 1) * chunk);
            keys = bench.gather_rows(xh[h], idx);
            if (opt.oracle_permutation) {
                const Matrix paired = detail_l::lookup_pair(
                    ledger, bench.concat({keys, queries}, Axis::Cols), cap);
                keys = bench.take_cols(paired, 0, m);
                queries = bench.take_cols(paired, m, 2 * m);
            }
        };

        // step 1: normalizer estimates, one column per (layer, head)
        if (opt.oracle_permutation) ledger.begin_round();  // pairing pass-throughs
        std::vector<detail_q::PendingCall> denom_calls;
        for (std::size_t h = 0; h < p.H; ++h) {
            for (std::size_t t = 0; t < t_count; ++t) {
                Matrix queries, keys;
                sampled_blocks(h, t, queries, keys);
                denom_calls.push_back({detail_q::ArrKind::CrossDenom, queries, keys,
                                       layer.heads[h], &est.denom_estimates, l * p.H + h,
                                       nullptr, t * chunk});
            }
        }
        ledger.begin_round();
        detail_q::flush_packed(ledger, bench, denom_calls, cap, "sample:");

        // step 2: sampled attention rows under the same permutation
        if (opt.oracle_permutation) ledger.begin_round();
        std::vector<Matrix> head_out(p.H, Matrix(n, m));
        std::vector<detail_q::PendingCall> ratio_calls;
        for (std::size_t h = 0; h < p.H; ++h) {
            for (std::size_t t = 0; t < t_count; ++t) {
                Matrix queries, keys;
                sampled_blocks(h, t, queries, keys);
                ratio_calls.push_back({detail_q::ArrKind::CrossRatio, queries, keys,
                                       layer.heads[h], nullptr, 0, &head_out[h],
                                       t * chunk});
            }
        }
        ledger.begin_round();
        detail_q::flush_packed(ledger, bench, ratio_calls, cap, "sample:");

        Matrix heads_out = bench.concat(head_out, Axis::Cols);
        if (layer.layer_mlp.input_width == 2 * cur.cols) {
            heads_out = bench.concat({heads_out, cur}, Axis::Cols);
        }
        bench.transcript.push_back("mlp_equiv:layer-mlp");
        cur = mlp_apply(layer.layer_mlp, heads_out);
    }

    // raw samples -> unbiased estimates
    est.denom_estimates = bench.scale(est.denom_estimates, double(n) / double(chunk));
    est.output = cur;
    return est;
}

// ----------------------------- window and sink -----------------------------

namespace detail_l {

// Uniform chunk schedule: queries are covered by N/(chunk - r) equal blocks
// and every block issues the same calls regardless of position. Key indices
// that would underflow row 0 become zero rows whose exp(0) = 1 contribution
// is a known integer count, subtracted host-side — that uniformity is what
// keeps the ledger exactly linear in N.
struct WinPlan {
    std::size_t n = 0, m = 0, r = 0, s = 0, c = 0;  // s == 0 means plain window
    std::size_t nq = 0;       // queries per block: chunk - r
    std::size_t t_count = 0;  // N / nq
};

inline WinPlan make_win_plan(std::size_t n, std::size_t m, std::size_t r, std::size_t s,
                             std::size_t c, const OracleCapacity& cap) {
    if (cap.mask.variant != MaskKind::Variant::Causal) {
        throw ConfigError("window simulation: causal oracle required");
    }
    if (r < 1) throw ConfigError("window simulation: window size r >= 1 required");
    if (c <= r) {
        throw ConfigError("window simulation: chunk " + std::to_string(c) +
                          " must exceed the window size " + std::to_string(r));
    }
    if (c + 1 > cap.m_max) {
        throw ConfigError("window simulation: chunk " + std::to_string(c) +
                          " needs m_max >= chunk + 1, have " + std::to_string(cap.m_max));
    }
    if (n == 0 || n % (c - r) != 0) {
        throw ConfigError("window simulation: chunk - r = " + std::to_string(c - r) +
                          " must divide the input length " + std::to_string(n));
    }
    if (s > 0) {
        // sink-ruled queries (rows below s + r) reduce to causal prefixes,
        // which are only on hand when the block's window reaches row 0
        for (std::size_t start = 0; start < n; start += c - r) {
            if (start < s + r && start > r) {
                throw ConfigError(
                    "sink simulation: block starting at row " + std::to_string(start) +
                    " holds sink-ruled queries but its window misses row 0; "
                    "shrink chunk - r below " + std::to_string(c - r) +
                    " or enlarge the window");
            }
        }
        if (s + (c - r) > cap.m_max) {
            throw ConfigError("sink simulation: s + chunk - r = " +
                              std::to_string(s + (c - r)) + " rows exceed m_max " +
                              std::to_string(cap.m_max));
        }
    }
    return {n, m, r, s, c, c - r, n / (c - r)};
}

// Per-(head, block) intermediates staged between the two call rounds.
struct WinStage {
    std::size_t start = 0;  // first query row of the block
    std::size_t base = 0;   // first row of the block's window range
    Matrix xw, q_blk, k_blk;  // sliced inputs reused by both rounds
    Matrix p;        // causal prefix normalizers over [base, start + nq)
    Matrix ratio;    // causal softmax rows over the same range
    Matrix y;        // shifted normalizers plus zero-key counts
    Matrix z;        // zero-key counts per query (known integers)
    Matrix b_shift;  // shifted numerators
    Matrix s_sum;    // sink normalizers
    Matrix b_sink;   // sink numerators
};

// Key block paired against the block's queries at lag r: row u holds key
// start - r + u, or zeros where that index underflows.
inline Matrix shifted_keys(const Matrix& xh, const WinPlan& pl, std::size_t start) {
    Matrix keys(pl.nq, pl.m);
    for (std::size_t u = 0; u < pl.nq; ++u) {
        const long long kidx = static_cast<long long>(start + u) - static_cast<long long>(pl.r);
        if (kidx < 0) continue;
        for (std::size_t j = 0; j < pl.m; ++j) {
            keys(u, j) = xh(static_cast<std::size_t>(kidx), j);
        }
    }
    return keys;
}

// z(u) = number of zero key rows visible to paired row u.
inline Matrix zero_key_counts(const WinPlan& pl, std::size_t start) {
    const std::size_t nz = (start < pl.r) ? std::min(pl.r - start, pl.nq) : 0;
    Matrix z(pl.nq, 1);
    for (std::size_t u = 0; u < pl.nq; ++u) z(u, 0) = double(std::min(u + 1, nz));
    return z;
}

// Stacked sink arrangement: the s sink keys ride in the first rows (key
// column group), the block's queries after them (query column group), so the
// causal oracle makes every sink key visible to every query. The query rows'
// own zero keys pollute the in-call softmax by a known count, recovered
// host-side.
inline Matrix sink_input(const Matrix& xh, const WinPlan& pl, std::size_t start) {
    Matrix input(pl.s + pl.nq, 2 * pl.m);
    for (std::size_t j = 0; j < pl.s; ++j)
        for (std::size_t k = 0; k < pl.m; ++k) input(j, k) = xh(j, k);
    for (std::size_t u = 0; u < pl.nq; ++u)
        for (std::size_t k = 0; k < pl.m; ++k) input(pl.s + u, pl.m + k) = xh(start + u, k);
    return input;
}

inline Matrix pollution_counts(std::size_t nq) {
    Matrix counts(nq, 1);
    for (std::size_t u = 0; u < nq; ++u) counts(u, 0) = double(u + 1);
    return counts;
}

// Sink normalizer call: query row u reads x = S / (S + u + 1) on the flag
// column, where S sums the sink-key weights and u + 1 counts the visible
// zero-key query rows. Host recovery returns S.
inline Matrix sink_denom_call(CallLedger& ledger, Workbench& bench, const Matrix& xh,
                              const WinPlan& pl, std::size_t start, const HeadParams& h,
                              const OracleCapacity& cap) {
    const std::size_t m = pl.m, w = 2 * m + 1;
    Matrix wq(w, w), wk(w, w), wv(w, w);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < m; ++j) {
            wq(m + i, j) = h.wq(i, j);  // query group second, key group first
            wk(i, j) = h.wk(i, j);
        }
    }
    wv(2 * m, 0) = 1.0;  // flag column -> read column 0

    TransformerParams p;
    p.input_mlp.steps = {MlpStep::indexed_const(pl.s, 1.0, 0.0)};  // flag the sink keys
    p.input_mlp.budget = w * w + 4;
    p.layers = {{{HeadParams{wq, wk, wv}}, MlpSpec::identity()}};
    p.mask = cap.mask;
    p.d = w;
    p.H = 1;
    p.L = 1;

    const Matrix out = oracle_call(ledger, sink_input(xh, pl, start), p, cap, "denominator");
    Matrix xcol = bench.take_cols(bench.take_rows(out, pl.s, pl.s + pl.nq), 0, 1);
    xcol = bench.ratio_recover(xcol, 0);  // S / (u + 1)
    return bench.row_weight(xcol, pollution_counts(pl.nq));
}

// Sink ratio call: query row u reads B / (S + u + 1) where B sums the
// weighted sink values; zero-key rows contribute nothing to the numerator.
inline Matrix sink_ratio_call(CallLedger& ledger, Workbench& bench, const Matrix& xh,
                              const WinPlan& pl, std::size_t start, const HeadParams& h,
                              const Matrix& s_sum, const OracleCapacity& cap) {
    const std::size_t m = pl.m;
    TransformerParams p;
    p.layers = {{{detail_q::build_weights(detail_q::ArrKind::CrossRatio, h, m, cap.mask)},
                 MlpSpec::identity()}};
    p.mask = cap.mask;
    p.d = 2 * m;
    p.H = 1;
    p.L = 1;

    const Matrix out = oracle_call(ledger, sink_input(xh, pl, start), p, cap, "ratio");
    const Matrix rho = bench.take_cols(bench.take_rows(out, pl.s, pl.s + pl.nq), 0, m);
    return bench.row_weight(rho, bench.add(s_sum, pollution_counts(pl.nq)));
}

// Shared forward pass for window (s == 0) and sink (s >= 1) masks. Per block
// and head: a causal prefix pair over the block's window range, a lag-r
// shifted pair whose subtraction isolates the in-window sums, and for sinks
// a stacked pair for the always-visible keys. Two rounds per layer.
inline Matrix masked_window_forward(CallLedger& ledger, const Matrix& x,
                                    const TransformerParams& p, std::size_t r,
                                    std::size_t s, std::size_t chunk,
                                    const OracleCapacity& cap, Workbench* wb) {
    p.validate();
    const std::size_t n = x.rows, m = p.d / p.H;
    const WinPlan pl = make_win_plan(n, m, r, s, chunk, cap);

    Workbench local;
    Workbench& bench = wb ? *wb : local;

    bench.transcript.push_back("mlp_equiv:input-mlp");
    Matrix cur = mlp_apply(p.input_mlp, x);
    if (cur.cols != p.d) {
        throw ShapeError("window simulation: input MLP must produce the model width");
    }

    for (std::size_t l = 0; l < p.L; ++l) {
        const LayerParams& layer = p.layers[l];
        std::vector<Matrix> xh(p.H);
        for (std::size_t h = 0; h < p.H; ++h) {
            xh[h] = bench.take_cols(cur, h * m, (h + 1) * m);
        }
        std::vector<std::vector<WinStage>> stages(p.H, std::vector<WinStage>(pl.t_count));

        ledger.begin_round();  // normalizer-style calls
        for (std::size_t h = 0; h < p.H; ++h) {
            const HeadParams& hw = layer.heads[h];
            for (std::size_t t = 0; t < pl.t_count; ++t) {
                WinStage& st = stages[h][t];
                st.start = t * pl.nq;
                st.base = (st.start > pl.r) ? st.start - pl.r : 0;
                st.xw = bench.take_rows(xh[h], st.base, st.start + pl.nq);
                st.q_blk = bench.take_rows(xh[h], st.start, st.start + pl.nq);
                st.k_blk = shifted_keys(xh[h], pl, st.start);
                st.z = zero_key_counts(pl, st.start);
                st.p = prefix_denoms_causal(ledger, st.xw, hw.wq, hw.wk, cap, &bench);
                st.y = detail_q::run_subcall(ledger, bench, detail_q::ArrKind::CrossDenom,
                                             st.q_blk, st.k_blk, hw, cap);
                if (pl.s > 0) {
                    st.s_sum = sink_denom_call(ledger, bench, xh[h], pl, st.start, hw, cap);
                }
            }
        }

        ledger.begin_round();  // ratio-style calls
        for (std::size_t h = 0; h < p.H; ++h) {
            const HeadParams& hw = layer.heads[h];
            for (std::size_t t = 0; t < pl.t_count; ++t) {
                WinStage& st = stages[h][t];
                st.ratio = detail_q::run_subcall(ledger, bench, detail_q::ArrKind::DiagRatio,
                                                 st.xw, st.xw, hw, cap);
                const Matrix rho =
                    detail_q::run_subcall(ledger, bench, detail_q::ArrKind::CrossRatio,
                                          st.q_blk, st.k_blk, hw, cap);
                st.b_shift = bench.row_weight(rho, st.y);
                if (pl.s > 0) {
                    st.b_sink = sink_ratio_call(ledger, bench, xh[h], pl, st.start, hw,
                                                st.s_sum, cap);
                }
            }
        }

        // assemble: in-window sums are prefix minus shifted-prefix
        std::vector<Matrix> head_out(p.H, Matrix(n, m));
        for (std::size_t h = 0; h < p.H; ++h) {
            for (std::size_t t = 0; t < pl.t_count; ++t) {
                const WinStage& st = stages[h][t];
                const std::size_t off = st.start - st.base;
                const Matrix pc = bench.take_rows(st.p, off, off + pl.nq);
                const Matrix rc = bench.take_rows(st.ratio, off, off + pl.nq);
                const Matrix b_full = bench.row_weight(rc, pc);
                const Matrix p_shift = bench.subtract(st.y, st.z);
                const Matrix a_win = bench.subtract(pc, p_shift);
                const Matrix b_win = bench.subtract(b_full, st.b_shift);
                Matrix rows = (pl.s == 0)
                                  ? bench.row_divide(b_win, a_win)
                                  : bench.row_divide(bench.add(b_win, st.b_sink),
                                                     bench.add(a_win, st.s_sum));
                for (std::size_t u = 0; u < pl.nq; ++u) {
                    // sink-ruled early queries keep every causal key: the
                    // block's causal softmax rows already are that output
                    const bool causal_row = pl.s > 0 && st.start + u < pl.s + pl.r;
                    for (std::size_t j = 0; j < m; ++j) {
                        head_out[h](st.start + u, j) =
                            causal_row ? rc(u, j) : rows(u, j);
                    }
                }
            }
        }

        Matrix heads_out = bench.concat(head_out, Axis::Cols);
        if (layer.layer_mlp.input_width == 2 * cur.cols) {
            heads_out = bench.concat({heads_out, cur}, Axis::Cols);
        }
        bench.transcript.push_back("mlp_equiv:layer-mlp");
        cur = mlp_apply(layer.layer_mlp, heads_out);
    }
    return cur;
}

}  // namespace detail_l

// Exact simulation of a sliding-window transformer through a causal oracle.
// Every output row matches the reference forward pass up to rounding.
// Requires r < chunk <= m_max - 1 and (chunk - r) | N; issues exactly
// 4 * N / (chunk - r) calls per head per layer in two rounds per layer.
inline Matrix window_simulate(CallLedger& ledger, const Matrix& x,
                              const TransformerParams& p, std::size_t window_r,
                              std::size_t chunk, const OracleCapacity& cap,
                              Workbench* wb = nullptr) {
    if (!(p.mask == MaskKind::window(window_r))) {
        throw ConfigError("window_simulate: model mask must be window(" +
                          std::to_string(window_r) + ")");
    }
    return detail_l::masked_window_forward(ledger, x, p, window_r, 0, chunk, cap, wb);
}

// Exact simulation of a window-plus-sink transformer through a causal
// oracle: window_simulate's schedule plus two stacked calls per block for
// the always-visible sink keys. Queries below s + r see an unbroken causal
// prefix, so their rows come straight from the block's causal softmax call.
// Exactly 6 * N / (chunk - r) calls per head per layer.
inline Matrix sink_simulate(CallLedger& ledger, const Matrix& x,
                            const TransformerParams& p, std::size_t sink_s,
                            std::size_t window_r, std::size_t chunk,
                            const OracleCapacity& cap, Workbench* wb = nullptr) {
    if (!(p.mask == MaskKind::sink(sink_s, window_r))) {
        throw ConfigError("sink_simulate: model mask must be sink(" +
                          std::to_string(sink_s) + ", " + std::to_string(window_r) + ")");
    }
    return detail_l::masked_window_forward(ledger, x, p, window_r, sink_s, chunk, cap, wb);
}

}  // namespace attnsim
