// Reverse-direction tests: many small attention instances answered by one
// large dense call. Tag-vector geometry is checked exhaustively, the
// magnitude solver is pinned against the closed-form leakage bound, and the
// combined outputs are compared row by row against direct-loop standalone
// evaluations. Foreign-key softmax mass is measured from scores rebuilt in
// this file.

#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "attnsim/oracle.hpp"
#include "attnsim/reference.hpp"
#include "attnsim/reverse.hpp"
#include "attnsim/rng.hpp"

using namespace attnsim;

namespace {

double max_abs_diff(const Matrix& a, const Matrix& b) {
    REQUIRE(a.rows == b.rows);
    REQUIRE(a.cols == b.cols);
    double worst = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i)
        worst = std::max(worst, std::abs(a.data[i] - b.data[i]));
    return worst;
}

// Largest per-row Euclidean distance between two equally shaped matrices.
double max_row_err(const Matrix& a, const Matrix& b) {
    REQUIRE(a.rows == b.rows);
    REQUIRE(a.cols == b.cols);
    double worst = 0.0;
    for (std::size_t i = 0; i < a.rows; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < a.cols; ++j) {
            const double diff = a(i, j) - b(i, j);
            acc += diff * diff;
        }
        worst = std::max(worst, std::sqrt(acc));
    }
    return worst;
}

// Direct-loop dense single-head attention used as the standalone reference.
Matrix dense_head_ref(const Matrix& x, const HeadParams& h) {
    const Matrix q = matmul(x, h.wq), k = matmul(x, h.wk), v = matmul(x, h.wv);
    Matrix out(x.rows, x.cols);
    for (std::size_t i = 0; i < x.rows; ++i) {
        std::vector<double> w(x.rows);
        double denom = 0.0;
        for (std::size_t j = 0; j < x.rows; ++j) {
            double s = 0.0;
            for (std::size_t c = 0; c < q.cols; ++c) s += q(i, c) * k(j, c);
            w[j] = std::exp(s);
            denom += w[j];
        }
        for (std::size_t c = 0; c < v.cols; ++c) {
            double acc = 0.0;
            for (std::size_t j = 0; j < x.rows; ++j) acc += w[j] / denom * v(j, c);
            out(i, c) = acc;
        }
    }
    return out;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
    REQUIRE(a.size() == b.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

// A batch of same-shaped random instances whose projected rows always stay
// inside a unit norm budget (inputs in +-0.4 over two columns, weights in
// +-0.5, so every row norm is below 0.57 * 1.0).
std::vector<ReverseInstance> random_instances(std::uint64_t seed, std::size_t count,
                                              std::size_t m_len, std::size_t d) {
    std::mt19937_64 gen(seed);
    std::vector<ReverseInstance> out;
    for (std::size_t i = 0; i < count; ++i) {
        ReverseInstance inst;
        inst.x = random_matrix(gen, m_len, d, -0.4, 0.4);
        inst.head = {random_matrix(gen, d, d, -0.5, 0.5), random_matrix(gen, d, d, -0.5, 0.5),
                     random_matrix(gen, d, d, -0.5, 0.5)};
        out.push_back(std::move(inst));
    }
    return out;
}

// Worst-case leakage at magnitude b for combined length n, instance length m.
double leakage_bound(double c, std::size_t n, std::size_t m, double b) {
    return static_cast<double>(n) * c * std::exp(2.0 * c * c - b * b) *
           (1.0 + std::exp(c * c)) / static_cast<double>(m);
}

}  // namespace

TEST_CASE("tag pairs null their own partner and repel every other",
          "[reverse][tags]") {
    SECTION("exhaustive geometry up to seventy pairs") {
        for (std::size_t count = 1; count <= 70; ++count) {
            const TagSet tags = make_tags(count, 3.0);
            REQUIRE(tags.u.size() == count);
            REQUIRE(tags.v.size() == count);
            REQUIRE(tags.r % 2 == 0);
            REQUIRE(tags.r <= 8);  // C(8, 4) = 70 covers the whole range
            for (std::size_t i = 0; i < count; ++i) {
                REQUIRE(tags.u[i].size() == tags.r);
                std::size_t zeros = 0;
                for (std::size_t j = 0; j < tags.r; ++j) {
                    const double uj = tags.u[i][j];
                    REQUIRE((uj == 0.0 || uj == -3.0));
                    if (uj == 0.0) ++zeros;
                    REQUIRE(tags.v[i][j] == 3.0 + uj);
                }
                REQUIRE(zeros == tags.r / 2);
                REQUIRE(dot(tags.u[i], tags.v[i]) == 0.0);
                for (std::size_t j = 0; j < count; ++j) {
                    if (i == j) continue;
                    REQUIRE(tags.u[i] != tags.u[j]);
                    // every product is either 0 or exactly -9, so the sum
                    // is exact and must reach at least one -9 term
                    REQUIRE(dot(tags.u[i], tags.v[j]) <= -9.0);
                }
            }
        }
    }

    SECTION("width grows only when the subset capacity runs out") {
        REQUIRE(make_tags(1, 1.0).r == 2);
        REQUIRE(make_tags(2, 1.0).r == 2);
        REQUIRE(make_tags(3, 1.0).r == 4);
        REQUIRE(make_tags(6, 1.0).r == 4);
        REQUIRE(make_tags(7, 1.0).r == 6);
        REQUIRE(make_tags(20, 1.0).r == 6);
        REQUIRE(make_tags(21, 1.0).r == 8);
        REQUIRE(make_tags(70, 1.0).r == 8);
        REQUIRE(make_tags(71, 1.0).r == 10);
    }

    SECTION("two pairs at magnitude ten, written out") {
        const TagSet tags = make_tags(2, 10.0);
        REQUIRE(tags.r == 2);
        REQUIRE(tags.u[0] == std::vector<double>{0.0, -10.0});
        REQUIRE(tags.u[1] == std::vector<double>{-10.0, 0.0});
        REQUIRE(tags.v[0] == std::vector<double>{10.0, 0.0});
        REQUIRE(tags.v[1] == std::vector<double>{0.0, 10.0});
        REQUIRE(dot(tags.u[0], tags.v[1]) == -100.0);
        REQUIRE(dot(tags.u[1], tags.v[0]) == -100.0);
    }

    SECTION("explicit widths are honored or rejected") {
        REQUIRE(make_tags(3, 2.0, 4).r == 4);
        REQUIRE(make_tags(1, 2.0, 8).r == 8);
        REQUIRE_THROWS_AS(make_tags(3, 2.0, 2), ConfigError);   // capacity 2 < 3
        REQUIRE_THROWS_AS(make_tags(2, 2.0, 3), ConfigError);   // odd width
        REQUIRE_THROWS_AS(make_tags(2, 2.0, 62), ConfigError);  // width out of range
        REQUIRE_THROWS_AS(make_tags(0, 1.0), ConfigError);
        REQUIRE_THROWS_AS(make_tags(1, 0.0), ConfigError);
        REQUIRE_THROWS_AS(make_tags(1, -2.0), ConfigError);
    }
}

TEST_CASE("magnitude solver returns the smallest workable tag scale",
          "[reverse][bound]") {
    SECTION("pinned solve and minimality at a tight target") {
        const double b = choose_b(1.0, 16, 4, 1e-9);
        REQUIRE(b == Catch::Approx(5.043).margin(1e-12));
        REQUIRE(leakage_bound(1.0, 16, 4, b) <= 1e-9);
        REQUIRE(leakage_bound(1.0, 16, 4, b - 0.001) > 1e-9);
    }

    SECTION("pinned solve at a looser target") {
        const double b = choose_b(1.0, 16, 4, 1e-6);
        REQUIRE(b == Catch::Approx(4.303).margin(1e-12));
        REQUIRE(leakage_bound(1.0, 16, 4, b) <= 1e-6);
        REQUIRE(leakage_bound(1.0, 16, 4, b - 0.001) > 1e-6);
    }

    SECTION("doubling the combined length adds log 2 to the squared scale") {
        const double b16 = choose_b(1.0, 16, 4, 1e-9);
        const double b32 = choose_b(1.0, 32, 4, 1e-9);
        REQUIRE(b32 > b16);
        REQUIRE(b32 * b32 - b16 * b16 ==
                Catch::Approx(std::log(2.0)).margin(0.02));  // 3-decimal rounding slack
    }

    SECTION("vacuous bounds floor out and huge budgets cap") {
        REQUIRE(choose_b(1.0, 16, 4, 1e9) == 0.001);
        REQUIRE(choose_b(25.0, 16, 4, 1e-6) == 40.0);
    }

    SECTION("bad arguments are rejected") {
        REQUIRE_THROWS_AS(choose_b(0.0, 16, 4, 1e-6), ConfigError);
        REQUIRE_THROWS_AS(choose_b(-1.0, 16, 4, 1e-6), ConfigError);
        REQUIRE_THROWS_AS(choose_b(1.0, 16, 0, 1e-6), ConfigError);
        REQUIRE_THROWS_AS(choose_b(1.0, 2, 4, 1e-6), ConfigError);
        REQUIRE_THROWS_AS(choose_b(1.0, 16, 4, 0.0), ConfigError);
    }
}

TEST_CASE("one large dense call answers every instance", "[reverse]") {
    SECTION("a single instance is reproduced bit for bit") {
        const std::vector<ReverseInstance> one = random_instances(123, 1, 4, 2);
        ReverseConfig cfg;
        cfg.c_bound = 1.0;
        cfg.target_err = 1e-6;
        cfg.b_scale = choose_b(1.0, 4, 4, 1e-6);
        CallLedger ledger;
        const std::vector<Matrix> outs = reverse_simulate(ledger, one, cfg);
        REQUIRE(outs.size() == 1);
        // no foreign keys exist, so the shared softmax IS the standalone one
        REQUIRE(max_abs_diff(outs[0], attention_head(one[0].x, one[0].head,
                                                     MaskKind::dense())) == 0.0);
        REQUIRE(ledger.calls.size() == 1);
        REQUIRE(ledger.calls[0].tag == "large-call");
        REQUIRE(ledger.calls[0].input_len == 4);
    }

    SECTION("four instances at the solved magnitude meet the target") {
        const std::vector<ReverseInstance> batch = random_instances(2024, 4, 4, 2);
        ReverseConfig cfg;
        cfg.c_bound = 1.0;
        cfg.target_err = 1e-6;
        cfg.b_scale = choose_b(1.0, 16, 4, 1e-6);
        CallLedger ledger;
        std::vector<std::string> audit;
        const std::vector<Matrix> outs = reverse_simulate(ledger, batch, cfg, &audit);
        REQUIRE(outs.size() == 4);
        for (std::size_t i = 0; i < 4; ++i) {
            const double err = max_row_err(outs[i], dense_head_ref(batch[i].x, batch[i].head));
            REQUIRE(err <= 1e-6);
            REQUIRE(err > 0.0);  // the answer is approximate, not smuggled
        }
        REQUIRE(std::count(audit.begin(), audit.end(), "matmul") == 12);
        REQUIRE(std::count(audit.begin(), audit.end(), "large-call") == 1);
        REQUIRE(ledger.calls.size() == 1);
        REQUIRE(ledger.count_tag("large-call") == 1);
        REQUIRE(ledger.calls[0].input_len == 16);
    }

    SECTION("duplicated instances give matching answers") {
        const std::vector<ReverseInstance> one = random_instances(55, 1, 3, 2);
        const std::vector<ReverseInstance> two = {one[0], one[0]};
        ReverseConfig cfg;
        cfg.c_bound = 1.0;
        cfg.target_err = 1e-6;
        cfg.b_scale = choose_b(1.0, 6, 3, 1e-6);
        CallLedger ledger;
        const std::vector<Matrix> outs = reverse_simulate(ledger, two, cfg);
        // the copies see the same key multiset, only in swapped summation
        // order, so they agree to rounding
        REQUIRE(max_abs_diff(outs[0], outs[1]) <= 1e-12);
        const Matrix ref = dense_head_ref(one[0].x, one[0].head);
        REQUIRE(max_row_err(outs[0], ref) <= 1e-6);
        REQUIRE(max_row_err(outs[1], ref) <= 1e-6);
    }

    SECTION("leakage shrinks as the tag magnitude grows") {
        const std::vector<ReverseInstance> batch = random_instances(777, 2, 3, 2);
        std::vector<double> errs;
        for (const double b : {2.5, 3.0, 3.5}) {
            ReverseConfig cfg;
            cfg.c_bound = 1.0;
            cfg.target_err = 1.0;  // not under test here
            cfg.b_scale = b;
            CallLedger ledger;
            const std::vector<Matrix> outs = reverse_simulate(ledger, batch, cfg);
            double worst = 0.0;
            for (std::size_t i = 0; i < batch.size(); ++i) {
                worst = std::max(worst,
                                 max_row_err(outs[i], dense_head_ref(batch[i].x, batch[i].head)));
            }
            errs.push_back(worst);
        }
        REQUIRE(errs[0] > errs[1]);
        REQUIRE(errs[1] > errs[2]);
        REQUIRE(errs[2] > 0.0);
        // and each sits below the corresponding worst-case bound
        REQUIRE(errs[0] <= leakage_bound(1.0, 6, 3, 2.5));
        REQUIRE(errs[1] <= leakage_bound(1.0, 6, 3, 3.0));
        REQUIRE(errs[2] <= leakage_bound(1.0, 6, 3, 3.5));
    }

    SECTION("foreign keys receive at most the proven softmax mass") {
        const std::size_t count = 3, m_len = 3, d = 2;
        const std::vector<ReverseInstance> batch = random_instances(99, count, m_len, d);
        const double b = 3.0;
        const TagSet tags = make_tags(count, b);

        // rebuild the tagged projections directly
        std::vector<Matrix> qs, ks;
        for (const ReverseInstance& inst : batch) {
            qs.push_back(matmul(inst.x, inst.head.wq));
            ks.push_back(matmul(inst.x, inst.head.wk));
        }
        const std::size_t n_total = count * m_len;
        const double mass_cap = static_cast<double>(n_total) * std::exp(2.0 - b * b);
        for (std::size_t i = 0; i < count; ++i) {
            for (std::size_t a = 0; a < m_len; ++a) {
                double own = 0.0, foreign = 0.0;
                for (std::size_t j = 0; j < count; ++j) {
                    for (std::size_t bb = 0; bb < m_len; ++bb) {
                        double s = 0.0;
                        for (std::size_t c = 0; c < d; ++c) s += qs[i](a, c) * ks[j](bb, c);
                        s += dot(tags.u[i], tags.v[j]);
                        (j == i ? own : foreign) += std::exp(s);
                    }
                }
                // within-instance scores carry a zero tag shift, so the
                // relative foreign mass is governed by the -b^2 repulsion
                REQUIRE(foreign / (own + foreign) <= mass_cap);
            }
        }
    }

    SECTION("within-instance scores are not shifted at all") {
        const std::vector<ReverseInstance> batch = random_instances(4242, 2, 3, 2);
        const TagSet tags = make_tags(2, 7.5);
        const Matrix q = matmul(batch[0].x, batch[0].head.wq);
        const Matrix k = matmul(batch[0].x, batch[0].head.wk);
        for (std::size_t a = 0; a < 3; ++a) {
            std::vector<double> qt(q.cols + tags.r), kt(k.cols + tags.r);
            for (std::size_t c = 0; c < q.cols; ++c) {
                qt[c] = q(a, c);
                kt[c] = k(a, c);
            }
            for (std::size_t c = 0; c < tags.r; ++c) {
                qt[q.cols + c] = tags.u[0][c];
                kt[k.cols + c] = tags.v[0][c];
            }
            std::vector<double> q_plain(q.cols), k_plain(k.cols);
            for (std::size_t c = 0; c < q.cols; ++c) {
                q_plain[c] = q(a, c);
                k_plain[c] = k(a, c);
            }
            REQUIRE(dot(qt, kt) == dot(q_plain, k_plain));
        }
    }
}

TEST_CASE("reverse path rejects bad batches", "[reverse][errors]") {
    ReverseConfig cfg;
    cfg.c_bound = 1.0;
    cfg.target_err = 1e-6;
    cfg.b_scale = 4.0;

    SECTION("empty batch") {
        CallLedger ledger;
        REQUIRE_THROWS_AS(reverse_simulate(ledger, {}, cfg), ConfigError);
    }

    SECTION("missing or negative tag magnitude") {
        const std::vector<ReverseInstance> batch = random_instances(1, 2, 3, 2);
        CallLedger ledger;
        ReverseConfig bad = cfg;
        bad.b_scale = 0.0;
        REQUIRE_THROWS_AS(reverse_simulate(ledger, batch, bad), ConfigError);
        bad.b_scale = -2.0;
        REQUIRE_THROWS_AS(reverse_simulate(ledger, batch, bad), ConfigError);
        bad = cfg;
        bad.c_bound = 0.0;
        REQUIRE_THROWS_AS(reverse_simulate(ledger, batch, bad), ConfigError);
        REQUIRE(ledger.calls.empty());
    }

    SECTION("mismatched instance shapes") {
        std::vector<ReverseInstance> batch = random_instances(2, 2, 3, 2);
        batch[1].x = Matrix(4, 2, 0.1);  // different block length
        CallLedger ledger;
        REQUIRE_THROWS_AS(reverse_simulate(ledger, batch, cfg), ShapeError);

        batch = random_instances(3, 2, 3, 2);
        batch[1].head.wq = Matrix(3, 3, 0.1);  // no longer three equal squares
        REQUIRE_THROWS_AS(reverse_simulate(ledger, batch, cfg), ShapeError);

        std::vector<ReverseInstance> empty_block = random_instances(4, 1, 3, 2);
        empty_block[0].x = Matrix(0, 2);
        REQUIRE_THROWS_AS(reverse_simulate(ledger, empty_block, cfg), ShapeError);
        REQUIRE(ledger.calls.empty());
    }

    SECTION("projected rows over the norm budget") {
        std::vector<ReverseInstance> batch = random_instances(5, 2, 3, 2);
        for (double& v : batch[0].x.data) v = 10.0;  // rows far outside the budget
        CallLedger ledger;
        REQUIRE_THROWS_AS(reverse_simulate(ledger, batch, cfg), ConfigError);
        REQUIRE(ledger.calls.empty());  // rejected before the large call
    }

    SECTION("fixed tag width too small for the batch") {
        const std::vector<ReverseInstance> batch = random_instances(6, 3, 3, 2);
        ReverseConfig narrow = cfg;
        narrow.r = 2;  // capacity 2 < 3 instances
        CallLedger ledger;
        REQUIRE_THROWS_AS(reverse_simulate(ledger, batch, narrow), ConfigError);
        REQUIRE(ledger.calls.empty());
    }
}
