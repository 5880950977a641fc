#pragma once
// Batched evaluation in the opposite direction: many independent small
// single-head attention instances answered by ONE large dense attention call.
//
// Per instance the host performs exactly three plain matrix multiplications
// (queries, keys, values).  Each instance then receives a private "tag"
// vector pair: u_i is appended to its query rows and v_i to its key rows.
// The tags are built so that <u_i, v_i> = 0 exactly -- within-instance
// scores are bit-for-bit unchanged -- while <u_i, v_j> <= -b_scale^2 for
// i != j, so every cross-instance score is pushed down by at least
// b_scale^2 and the shared softmax factors into the per-instance softmaxes
// up to an explicitly bounded leakage term:
//
//     per-row error  <=  N * C * exp(2*C^2 - B^2) * (1 + exp(C^2)) / M
//
// where N is the combined length, M the per-instance length, C the row-norm
// budget of the projected queries/keys/values, and B the tag magnitude.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "matrix.hpp"
#include "oracle.hpp"
#include "reference.hpp"

namespace attnsim {

// ---------------------------------------------------------------------------
// Tag vector construction
// ---------------------------------------------------------------------------

namespace detail_r {

// Binomial coefficient via exact stepwise division; fits in 64 bits for the
// tag widths accepted here (n <= 60, where C(60, 30) ~ 1.2e17).
inline std::uint64_t binomial(std::size_t n, std::size_t k) {
    if (k > n) return 0;
    if (k > n - k) k = n - k;
    std::uint64_t acc = 1;
    for (std::size_t i = 1; i <= k; ++i) {
        acc = acc * (n - k + i) / i;  // divides exactly at every step
    }
    return acc;
}

// Maximum rows-wise 2-norm of a matrix.
inline double max_row_norm(const Matrix& m) {
    double worst = 0.0;
    for (std::size_t i = 0; i < m.rows; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < m.cols; ++j) acc += m(i, j) * m(i, j);
        worst = std::max(worst, std::sqrt(acc));
    }
    return worst;
}

}  // namespace detail_r

// A family of tag vector pairs.  u rows are appended to query rows, v rows
// to key rows.  Every u_i lives in {0, -b_scale}^r with exactly r/2 zeros,
// and v_i = b_scale * 1 + u_i, so zeros of u_i line up with b_scale entries
// of v_i and vice versa.
struct TagSet {
    std::size_t r = 0;     // tag width, always even
    double b_scale = 0.0;  // entry magnitude
    std::vector<std::vector<double>> u;  // query-side tags
    std::vector<std::vector<double>> v;  // key-side tags
};

// Builds `count` tag pairs of magnitude `b_scale`.  With r = 0 the width is
// the smallest even number whose capacity C(r, r/2) covers the count;
// otherwise the given width is used and must have enough capacity.  The zero
// positions of u_i form the i-th size-(r/2) subset of {0..r-1} in
// lexicographic order, which makes the family deterministic and every pair
// distinct.
inline TagSet make_tags(std::size_t count, double b_scale, std::size_t r = 0) {
    if (count == 0) {
        throw ConfigError("make_tags: need at least one tag pair");
    }
    if (!(b_scale > 0.0)) {
        throw ConfigError("make_tags: tag magnitude must be positive");
    }
    std::size_t width = r;
    if (width == 0) {
        width = 2;
        while (detail_r::binomial(width, width / 2) < count) {
            width += 2;
            if (width > 60) {
                throw ConfigError("make_tags: instance count out of range");
            }
        }
    } else {
        if (width < 2 || width % 2 != 0 || width > 60) {
            throw ConfigError("make_tags: tag width must be a small positive even number");
        }
        if (detail_r::binomial(width, width / 2) < count) {
            throw ConfigError("make_tags: tag capacity " +
                              std::to_string(detail_r::binomial(width, width / 2)) +
                              " is below the requested count " + std::to_string(count));
        }
    }

    TagSet tags;
    tags.r = width;
    tags.b_scale = b_scale;
    std::vector<std::size_t> zeros(width / 2);
    for (std::size_t j = 0; j < zeros.size(); ++j) zeros[j] = j;
    for (std::size_t i = 0; i < count; ++i) {
        std::vector<double> ui(width, -b_scale);
        for (std::size_t pos : zeros) ui[pos] = 0.0;
        std::vector<double> vi(width);
        for (std::size_t j = 0; j < width; ++j) vi[j] = b_scale + ui[j];
        tags.u.push_back(std::move(ui));
        tags.v.push_back(std::move(vi));
        if (i + 1 < count) {
            // Advance `zeros` to the next lexicographic subset; the capacity
            // check above guarantees one exists.
            std::size_t j = zeros.size();
            while (j-- > 0) {
                if (zeros[j] != j + width - zeros.size()) {
                    ++zeros[j];
                    for (std::size_t t = j + 1; t < zeros.size(); ++t) {
                        zeros[t] = zeros[t - 1] + 1;
                    }
                    break;
                }
            }
        }
    }
    return tags;
}

// ---------------------------------------------------------------------------
// Tag magnitude from the leakage bound
// ---------------------------------------------------------------------------

// Smallest tag magnitude -- rounded up to three decimals, floored at 0.001,
// capped at 40 -- for which the worst-case leakage bound
//
//     n_total * c_bound * exp(2*c_bound^2 - B^2) * (1 + exp(c_bound^2)) / m_len
//
// drops to target_err or below.  The floor applies when the bound already
// holds for any positive magnitude; the cap keeps exp(-B^2) away from the
// denormal range (flushed cross-instance weights are harmless, but scales
// past 40 buy nothing).
inline double choose_b(double c_bound, std::size_t n_total, std::size_t m_len,
                       double target_err) {
    if (!(c_bound > 0.0)) {
        throw ConfigError("choose_b: norm bound must be positive");
    }
    if (m_len == 0 || n_total < m_len) {
        throw ConfigError("choose_b: need 1 <= m_len <= n_total");
    }
    if (!(target_err > 0.0)) {
        throw ConfigError("choose_b: target error must be positive");
    }
    const double c2 = c_bound * c_bound;
    // log(1 + exp(c2)) without overflow for large norm budgets
    const double log_one_plus_exp = c2 + std::log1p(std::exp(-c2));
    const double b_squared = 2.0 * c2 + std::log(static_cast<double>(n_total)) +
                             std::log(c_bound) + log_one_plus_exp -
                             std::log(static_cast<double>(m_len)) - std::log(target_err);
    if (!(b_squared > 0.0)) return 0.001;
    const double b = std::ceil(std::sqrt(b_squared) * 1000.0) / 1000.0;
    return std::min(std::max(b, 0.001), 40.0);
}

// ---------------------------------------------------------------------------
// The combined call
// ---------------------------------------------------------------------------

// One small attention instance: an M x d token block and its d x d head.
struct ReverseInstance {
    Matrix x;
    HeadParams head;
};

struct ReverseConfig {
    double c_bound = 1.0;      // row-norm budget for projected queries/keys/values
    double target_err = 1e-6;  // admissible per-row Euclidean output error
    double b_scale = 0.0;      // tag magnitude, e.g. from choose_b
    std::size_t r = 0;         // tag width; 0 = smallest width that fits
};

// Evaluates every instance's single-head dense attention through one large
// dense attention call over the concatenation of all instances.
//
// Host-side work per instance is exactly three small matrix multiplications
// (x * wq, x * wk, x * wv); their row norms must stay within cfg.c_bound or
// the leakage bound is void and a ConfigError is raised.  The projected rows
// are tagged, stacked into a combined [queries | keys | values] input of
// width 3*(d + r), and routed through a single head whose weights merely
// select the three blocks.  The large call is recorded on the ledger under
// the tag "large-call"; it deliberately exceeds any small-oracle length cap,
// which is the point of the construction.  When `audit` is given, one
// "matmul" entry is appended per small multiplication and one "large-call"
// entry for the combined call.
//
// Returns the per-instance M x d outputs in input order.  Each row matches
// the standalone evaluation to within cfg.target_err (Euclidean) whenever
// cfg.b_scale came from choose_b over the same norm bound.
inline std::vector<Matrix> reverse_simulate(CallLedger& ledger,
                                            const std::vector<ReverseInstance>& instances,
                                            const ReverseConfig& cfg,
                                            std::vector<std::string>* audit = nullptr) {
    if (instances.empty()) {
        throw ConfigError("reverse_simulate: need at least one instance");
    }
    if (!(cfg.b_scale > 0.0)) {
        throw ConfigError("reverse_simulate: tag magnitude must be positive");
    }
    if (!(cfg.c_bound > 0.0)) {
        throw ConfigError("reverse_simulate: norm bound must be positive");
    }
    const std::size_t m_len = instances.front().x.rows;
    const std::size_t d = instances.front().x.cols;
    if (m_len == 0 || d == 0) {
        throw ShapeError("reverse_simulate: instances must be non-empty blocks");
    }
    for (const ReverseInstance& inst : instances) {
        inst.head.validate();
        if (inst.x.rows != m_len || inst.x.cols != d || inst.head.width() != d) {
            throw ShapeError("reverse_simulate: every instance must share one M x d shape");
        }
    }

    const TagSet tags = make_tags(instances.size(), cfg.b_scale, cfg.r);
    const std::size_t dp = d + tags.r;  // tagged width
    const std::size_t n_total = instances.size() * m_len;

    // Three small multiplications per instance, then tag the rows.  Value
    // rows are zero-padded to the tagged width so the combined output
    // carries the real values in its first d columns.
    Matrix q_all(n_total, dp), k_all(n_total, dp), v_all(n_total, dp);
    for (std::size_t i = 0; i < instances.size(); ++i) {
        const ReverseInstance& inst = instances[i];
        const Matrix q = matmul(inst.x, inst.head.wq);
        const Matrix k = matmul(inst.x, inst.head.wk);
        const Matrix v = matmul(inst.x, inst.head.wv);
        if (audit) audit->insert(audit->end(), 3, "matmul");
        const double worst = std::max({detail_r::max_row_norm(q), detail_r::max_row_norm(k),
                                       detail_r::max_row_norm(v)});
        if (worst > cfg.c_bound * (1.0 + 1e-12)) {
            throw ConfigError("reverse_simulate: projected row norm " + std::to_string(worst) +
                              " exceeds the declared bound " + std::to_string(cfg.c_bound));
        }
        for (std::size_t a = 0; a < m_len; ++a) {
            const std::size_t row = i * m_len + a;
            for (std::size_t j = 0; j < d; ++j) {
                q_all(row, j) = q(a, j);
                k_all(row, j) = k(a, j);
                v_all(row, j) = v(a, j);
            }
            for (std::size_t j = 0; j < tags.r; ++j) {
                q_all(row, d + j) = tags.u[i][j];
                k_all(row, d + j) = tags.v[i][j];
            }
        }
    }

    // One large dense call.  The router head only moves each stacked block
    // into its slot: scores become <tagged q, tagged k> and values pass
    // through untouched.
    const Matrix big_in = concat({q_all, k_all, v_all}, Axis::Cols);
    HeadParams router;
    router.wq = Matrix(3 * dp, 3 * dp);
    router.wk = Matrix(3 * dp, 3 * dp);
    router.wv = Matrix(3 * dp, 3 * dp);
    for (std::size_t j = 0; j < dp; ++j) {
        router.wq(j, j) = 1.0;
        router.wk(dp + j, j) = 1.0;
        router.wv(2 * dp + j, j) = 1.0;
    }
    ledger.record("large-call", n_total);
    if (audit) audit->push_back("large-call");
    const Matrix big_out = attention_head(big_in, router, MaskKind::dense());

    std::vector<Matrix> outs;
    outs.reserve(instances.size());
    for (std::size_t i = 0; i < instances.size(); ++i) {
        outs.push_back(slice_cols(slice_rows(big_out, i * m_len, (i + 1) * m_len), 0, d));
    }
    return outs;
}

}  // namespace attnsim
