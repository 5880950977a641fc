// Matrix kernel tests. Reference values come from independent
// straight-line implementations kept in this file (plain triple-loop
// product, unstabilized softmax over -inf-substituted scores) so the
// kernel under test never checks itself.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <limits>
#include <random>

#include "attnsim/matrix.hpp"

using namespace attnsim;

namespace {

// Independent product: plain i-j-k triple loop, no skips, no blocking.
Matrix matmul_ref(const Matrix& a, const Matrix& b) {
    Matrix out(a.rows, b.cols);
    for (std::size_t i = 0; i < a.rows; ++i)
        for (std::size_t j = 0; j < b.cols; ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < a.cols; ++k) acc += a(i, k) * b(k, j);
            out(i, j) = acc;
        }
    return out;
}

// Independent softmax: substitute -inf for masked scores, exponentiate
// without max-shifting, normalize. Valid for the moderate scores used here.
Matrix softmax_ref(const Matrix& scores, const MaskKind& mask) {
    Matrix out(scores.rows, scores.cols);
    for (std::size_t i = 0; i < scores.rows; ++i) {
        double sum = 0.0;
        for (std::size_t j = 0; j < scores.cols; ++j) {
            const double s = mask.visible(i, j)
                                 ? scores(i, j)
                                 : -std::numeric_limits<double>::infinity();
            out(i, j) = std::exp(s);
            sum += out(i, j);
        }
        for (std::size_t j = 0; j < scores.cols; ++j) out(i, j) /= sum;
    }
    return out;
}

Matrix random_matrix(std::size_t r, std::size_t c, std::mt19937_64& gen) {
    std::uniform_real_distribution<double> dist(-2.0, 2.0);
    Matrix m(r, c);
    for (double& v : m.data) v = dist(gen);
    return m;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
    REQUIRE(a.rows == b.rows);
    REQUIRE(a.cols == b.cols);
    double worst = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i)
        worst = std::max(worst, std::abs(a.data[i] - b.data[i]));
    return worst;
}

}  // namespace

TEST_CASE("matmul matches hand-computed values", "[matrix]") {
    Matrix a(2, 2);
    a(0, 0) = 1; a(0, 1) = 2;
    a(1, 0) = 3; a(1, 1) = 4;
    Matrix b(2, 1, 1.0);
    const Matrix c = matmul(a, b);
    REQUIRE(c.rows == 2);
    REQUIRE(c.cols == 1);
    REQUIRE(c(0, 0) == 3.0);
    REQUIRE(c(1, 0) == 7.0);

    const Matrix i3 = identity(3);
    Matrix d(3, 2);
    for (std::size_t k = 0; k < 6; ++k) d.data[k] = double(k) - 2.5;
    REQUIRE(max_abs_diff(matmul(i3, d), d) == 0.0);
}

TEST_CASE("matmul agrees with independent triple loop", "[matrix]") {
    std::mt19937_64 gen(20260816);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t n = 1 + gen() % 7;
        const std::size_t k = 1 + gen() % 7;
        const std::size_t m = 1 + gen() % 7;
        const Matrix a = random_matrix(n, k, gen);
        const Matrix b = random_matrix(k, m, gen);
        REQUIRE(max_abs_diff(matmul(a, b), matmul_ref(a, b)) < 1e-13);
    }
}

TEST_CASE("matmul is associative up to roundoff", "[matrix]") {
    std::mt19937_64 gen(7);
    const Matrix a = random_matrix(4, 5, gen);
    const Matrix b = random_matrix(5, 3, gen);
    const Matrix c = random_matrix(3, 6, gen);
    REQUIRE(max_abs_diff(matmul(matmul(a, b), c), matmul(a, matmul(b, c))) < 1e-10);
}

TEST_CASE("matmul rejects shape mismatch and non-finite results", "[matrix]") {
    REQUIRE_THROWS_AS(matmul(Matrix(2, 3), Matrix(2, 3)), ShapeError);
    Matrix huge(1, 2, 1e308);
    Matrix two(2, 1, 2.0);
    REQUIRE_THROWS_AS(matmul(huge, two), DegenerateError);
}

TEST_CASE("mask visibility follows each variant's rule", "[matrix]") {
    const auto dense = MaskKind::dense();
    const auto causal = MaskKind::causal();
    const auto window = MaskKind::window(2);
    const auto sink = MaskKind::sink(2, 2);

    for (std::size_t i = 0; i < 6; ++i) {
        for (std::size_t j = 0; j < 6; ++j) {
            REQUIRE(dense.visible(i, j));
            REQUIRE(causal.visible(i, j) == (j <= i));
            // window keeps the r most recent positions, self included
            REQUIRE(window.visible(i, j) == (j <= i && i - std::min(i, j) < 2));
            // sink additionally keeps the first s positions
            REQUIRE(sink.visible(i, j) == (j <= i && (i - std::min(i, j) < 2 || j < 2)));
        }
    }
}

TEST_CASE("sink rows with few predecessors equal causal rows", "[matrix]") {
    // for 1-based i <= s + r every causal position is visible anyway
    const std::size_t s = 3, r = 4;
    const auto sink = MaskKind::sink(s, r);
    const auto causal = MaskKind::causal();
    for (std::size_t i = 0; i + 1 <= s + r; ++i)
        for (std::size_t j = 0; j < 12; ++j)
            REQUIRE(sink.visible(i, j) == causal.visible(i, j));
}

TEST_CASE("masked softmax agrees with -inf substitution", "[matrix]") {
    std::mt19937_64 gen(99);
    const std::vector<MaskKind> masks = {MaskKind::dense(), MaskKind::causal(),
                                         MaskKind::window(3), MaskKind::sink(2, 2)};
    for (const MaskKind& mask : masks) {
        const Matrix scores = random_matrix(7, 7, gen);
        const Matrix got = masked_row_softmax(scores, mask);
        const Matrix want = softmax_ref(scores, mask);
        REQUIRE(max_abs_diff(got, want) < 1e-14);
        for (std::size_t i = 0; i < got.rows; ++i) {
            double row_sum = 0.0;
            for (std::size_t j = 0; j < got.cols; ++j) {
                REQUIRE(got(i, j) >= 0.0);
                row_sum += got(i, j);
            }
            REQUIRE(std::abs(row_sum - 1.0) < 1e-12);
        }
    }
}

TEST_CASE("masked softmax is stable at large score magnitudes", "[matrix]") {
    Matrix scores(2, 2);
    scores(0, 0) = 1000.0; scores(0, 1) = 999.0;
    scores(1, 0) = -1000.0; scores(1, 1) = -1001.0;
    const Matrix p = masked_row_softmax(scores, MaskKind::dense());
    // both rows have score gap 1, so the same weights
    REQUIRE(p(0, 0) == Catch::Approx(1.0 / (1.0 + std::exp(-1.0))).epsilon(1e-12));
    REQUIRE(p(1, 0) == Catch::Approx(1.0 / (1.0 + std::exp(-1.0))).epsilon(1e-12));
}

TEST_CASE("concat and slicing round-trip", "[matrix]") {
    std::mt19937_64 gen(3);
    const Matrix a = random_matrix(3, 4, gen);
    const Matrix b = random_matrix(2, 4, gen);
    const Matrix rows = concat({a, b}, Axis::Rows);
    REQUIRE(rows.rows == 5);
    REQUIRE(max_abs_diff(slice_rows(rows, 0, 3), a) == 0.0);
    REQUIRE(max_abs_diff(slice_rows(rows, 3, 5), b) == 0.0);

    const Matrix c = random_matrix(3, 2, gen);
    const Matrix cols = concat({a, c}, Axis::Cols);
    REQUIRE(cols.cols == 6);
    REQUIRE(max_abs_diff(slice_cols(cols, 0, 4), a) == 0.0);
    REQUIRE(max_abs_diff(slice_cols(cols, 4, 6), c) == 0.0);

    REQUIRE_THROWS_AS(concat({a, c}, Axis::Rows), ShapeError);
    REQUIRE_THROWS_AS(concat({a, b}, Axis::Cols), ShapeError);
}

TEST_CASE("select gathers arbitrary rows and columns", "[matrix]") {
    Matrix m(3, 3);
    for (std::size_t k = 0; k < 9; ++k) m.data[k] = double(k);
    const Matrix r = select_rows(m, {2, 0, 2});
    REQUIRE(r.rows == 3);
    REQUIRE(r(0, 1) == 7.0);
    REQUIRE(r(1, 1) == 1.0);
    REQUIRE(r(2, 2) == 8.0);
    const Matrix c = select_cols(m, {1});
    REQUIRE(c.cols == 1);
    REQUIRE(c(2, 0) == 7.0);
    REQUIRE_THROWS_AS(select_rows(m, {3}), ShapeError);
    REQUIRE_THROWS_AS(select_cols(m, {5}), ShapeError);
}

TEST_CASE("pad_constants appends constant lines and charges the budget", "[matrix]") {
    std::mt19937_64 gen(11);
    const Matrix m = random_matrix(3, 2, gen);

    SECTION("ones column at the end") {
        const Matrix p = pad_constants(m, {{Axis::Cols, 2, 1.0}}, 16);
        REQUIRE(p.cols == 3);
        REQUIRE(max_abs_diff(slice_cols(p, 0, 2), m) == 0.0);
        for (std::size_t i = 0; i < 3; ++i) REQUIRE(p(i, 2) == 1.0);
    }
    SECTION("zero row inserted first") {
        const Matrix p = pad_constants(m, {{Axis::Rows, 0, 0.0}}, 16);
        REQUIRE(p.rows == 4);
        REQUIRE(p(0, 0) == 0.0);
        REQUIRE(p(0, 1) == 0.0);
        REQUIRE(max_abs_diff(slice_rows(p, 1, 4), m) == 0.0);
    }
    SECTION("budget counts constants written") {
        // a 3-entry column plus a 3-entry column exceeds a budget of 5
        REQUIRE_THROWS_AS(
            pad_constants(m, {{Axis::Cols, 2, 1.0}, {Axis::Cols, 3, 1.0}}, 5),
            RestrictionError);
        REQUIRE_NOTHROW(pad_constants(m, {{Axis::Cols, 2, 1.0}, {Axis::Cols, 3, 1.0}}, 6));
    }
    SECTION("out-of-range insertion") {
        REQUIRE_THROWS_AS(pad_constants(m, {{Axis::Rows, 9, 0.0}}, 16), ShapeError);
    }
}
