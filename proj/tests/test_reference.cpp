// Ground-truth transformer tests. The attention oracle here recomputes
// softmax-weighted sums with direct loops over exp(<q,k>); the two-layer
// check uses a straight-line evaluation sharing no code with the library.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>
#include <vector>

#include "attnsim/reference.hpp"
#include "attnsim/rng.hpp"

using namespace attnsim;

namespace {

// Direct loop over the defining sum: out_i = sum_j exp(<q_i,k_j>) v_j / sum_j exp(<q_i,k_j>).
Matrix attention_loop_ref(const Matrix& x, const HeadParams& h, const MaskKind& mask) {
    const std::size_t n = x.rows, m = h.wq.rows;
    auto row_times = [&](const Matrix& w, std::size_t i, std::size_t j) {
        double acc = 0.0;
        for (std::size_t k = 0; k < m; ++k) acc += x(i, k) * w(k, j);
        return acc;
    };
    Matrix out(n, m);
    for (std::size_t i = 0; i < n; ++i) {
        double denom = 0.0;
        std::vector<double> num(m, 0.0);
        for (std::size_t j = 0; j < n; ++j) {
            if (!mask.visible(i, j)) continue;
            double score = 0.0;
            for (std::size_t c = 0; c < m; ++c) score += row_times(h.wq, i, c) * row_times(h.wk, j, c);
            const double a = std::exp(score);
            denom += a;
            for (std::size_t c = 0; c < m; ++c) num[c] += a * row_times(h.wv, j, c);
        }
        for (std::size_t c = 0; c < m; ++c) out(i, c) = num[c] / denom;
    }
    return out;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
    REQUIRE(a.rows == b.rows);
    REQUIRE(a.cols == b.cols);
    double worst = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i)
        worst = std::max(worst, std::abs(a.data[i] - b.data[i]));
    return worst;
}

HeadParams random_head(std::mt19937_64& gen, std::size_t m) {
    return {random_matrix(gen, m, m, -1.0, 1.0), random_matrix(gen, m, m, -1.0, 1.0),
            random_matrix(gen, m, m, -1.0, 1.0)};
}

}  // namespace

TEST_CASE("attention on a single token is x * Wv", "[reference]") {
    auto gen = make_stream(1, stream::weights);
    const HeadParams h = random_head(gen, 3);
    const Matrix x = random_matrix(gen, 1, 3, -1.0, 1.0);
    REQUIRE(max_abs_diff(attention_head(x, h, MaskKind::dense()), matmul(x, h.wv)) == 0.0);
}

TEST_CASE("zero query weights give uniform value averaging", "[reference]") {
    auto gen = make_stream(2, stream::weights);
    HeadParams h = random_head(gen, 2);
    h.wq = Matrix(2, 2);  // all scores become 0
    const Matrix x = random_matrix(gen, 5, 2, -1.0, 1.0);
    const Matrix out = attention_head(x, h, MaskKind::dense());
    const Matrix v = matmul(x, h.wv);
    for (std::size_t c = 0; c < 2; ++c) {
        double mean = 0.0;
        for (std::size_t i = 0; i < 5; ++i) mean += v(i, c);
        mean /= 5.0;
        for (std::size_t i = 0; i < 5; ++i)
            REQUIRE(out(i, c) == Catch::Approx(mean).margin(1e-14));
    }
}

TEST_CASE("attention matches the direct-loop oracle under every mask", "[reference]") {
    auto gen = make_stream(3, stream::weights);
    const std::vector<MaskKind> masks = {MaskKind::dense(), MaskKind::causal(),
                                         MaskKind::window(2), MaskKind::sink(1, 2)};
    for (const MaskKind& mask : masks) {
        const HeadParams h = random_head(gen, 2);
        const Matrix x = random_matrix(gen, 4, 2, -1.0, 1.0);
        REQUIRE(max_abs_diff(attention_head(x, h, mask), attention_loop_ref(x, h, mask)) < 1e-12);
    }
}

TEST_CASE("causal outputs ignore later tokens", "[reference]") {
    auto gen = make_stream(4, stream::weights);
    const HeadParams h = random_head(gen, 3);
    Matrix x = random_matrix(gen, 6, 3, -1.0, 1.0);
    const Matrix before = attention_head(x, h, MaskKind::causal());
    // perturb the tail; rows up to the cut must be bit-identical
    const std::size_t cut = 3;
    for (std::size_t i = cut; i < 6; ++i)
        for (std::size_t j = 0; j < 3; ++j) x(i, j) += uniform_range(gen, 0.5, 1.5);
    const Matrix after = attention_head(x, h, MaskKind::causal());
    for (std::size_t i = 0; i < cut; ++i)
        for (std::size_t j = 0; j < 3; ++j) REQUIRE(before(i, j) == after(i, j));
}

TEST_CASE("sink rows with few predecessors equal causal rows", "[reference]") {
    auto gen = make_stream(5, stream::weights);
    const HeadParams h = random_head(gen, 2);
    const Matrix x = random_matrix(gen, 10, 2, -1.0, 1.0);
    const std::size_t s = 2, r = 3;
    const Matrix sink = attention_head(x, h, MaskKind::sink(s, r));
    const Matrix causal = attention_head(x, h, MaskKind::causal());
    for (std::size_t i = 0; i + 1 <= s + r; ++i)
        for (std::size_t j = 0; j < 2; ++j) REQUIRE(sink(i, j) == causal(i, j));
}

TEST_CASE("output rows stay inside the value-row envelope", "[reference]") {
    auto gen = make_stream(6, stream::weights);
    for (const MaskKind& mask : {MaskKind::dense(), MaskKind::causal(), MaskKind::window(3)}) {
        const HeadParams h = random_head(gen, 3);
        const Matrix x = random_matrix(gen, 7, 3, -1.0, 1.0);
        const Matrix v = matmul(x, h.wv);
        const Matrix out = attention_head(x, h, mask);
        for (std::size_t c = 0; c < 3; ++c) {
            double lo = v(0, c), hi = v(0, c);
            for (std::size_t j = 1; j < 7; ++j) {
                lo = std::min(lo, v(j, c));
                hi = std::max(hi, v(j, c));
            }
            for (std::size_t i = 0; i < 7; ++i) {
                REQUIRE(out(i, c) >= lo - 1e-12);
                REQUIRE(out(i, c) <= hi + 1e-12);
            }
        }
    }
}

TEST_CASE("single-head layer with identity MLP equals attention_head", "[reference]") {
    auto gen = make_stream(7, stream::weights);
    const HeadParams h = random_head(gen, 4);
    const Matrix x = random_matrix(gen, 5, 4, -1.0, 1.0);
    const Matrix via_layer = layer_forward(x, {h}, MlpSpec::identity(), MaskKind::causal());
    REQUIRE(max_abs_diff(via_layer, attention_head(x, h, MaskKind::causal())) == 0.0);
}

TEST_CASE("identical heads on duplicated slices give identical halves", "[reference]") {
    auto gen = make_stream(8, stream::weights);
    const HeadParams h = random_head(gen, 2);
    const Matrix half = random_matrix(gen, 4, 2, -1.0, 1.0);
    const Matrix x = concat({half, half}, Axis::Cols);
    const Matrix out = layer_forward(x, {h, h}, MlpSpec::identity(), MaskKind::dense());
    REQUIRE(max_abs_diff(slice_cols(out, 0, 2), slice_cols(out, 2, 4)) == 0.0);
}

TEST_CASE("two-head layer matches slice-wise brute force", "[reference]") {
    auto gen = make_stream(9, stream::weights);
    const HeadParams h0 = random_head(gen, 2), h1 = random_head(gen, 2);
    const Matrix x = random_matrix(gen, 6, 4, -1.0, 1.0);
    const Matrix out = layer_forward(x, {h0, h1}, MlpSpec::identity(), MaskKind::causal());
    const Matrix want = concat({attention_head(slice_cols(x, 0, 2), h0, MaskKind::causal()),
                                attention_head(slice_cols(x, 2, 4), h1, MaskKind::causal())},
                               Axis::Cols);
    REQUIRE(max_abs_diff(out, want) == 0.0);
}

TEST_CASE("head count must divide the width", "[reference]") {
    auto gen = make_stream(10, stream::weights);
    const HeadParams h = random_head(gen, 2);
    const Matrix x = random_matrix(gen, 3, 5, -1.0, 1.0);
    REQUIRE_THROWS_AS(layer_forward(x, {h, h}, MlpSpec::identity(), MaskKind::dense()),
                      ConfigError);
}

TEST_CASE("one-layer one-head transformer equals attention_head", "[reference]") {
    auto gen = make_stream(11, stream::weights);
    const HeadParams h = random_head(gen, 3);
    const Matrix x = random_matrix(gen, 4, 3, -1.0, 1.0);
    TransformerParams p;
    p.layers = {{{h}, MlpSpec::identity()}};
    p.mask = MaskKind::causal();
    p.d = 3; p.H = 1; p.L = 1;
    REQUIRE(max_abs_diff(transformer_forward(x, p), attention_head(x, h, MaskKind::causal())) == 0.0);
}

TEST_CASE("zero second-layer scores average the first layer's values", "[reference]") {
    auto gen = make_stream(12, stream::weights);
    const HeadParams h1 = random_head(gen, 2);
    HeadParams h2;
    h2.wq = Matrix(2, 2);
    h2.wk = Matrix(2, 2);
    h2.wv = identity(2);
    const Matrix x = random_matrix(gen, 5, 2, -1.0, 1.0);
    TransformerParams p;
    p.layers = {{{h1}, MlpSpec::identity()}, {{h2}, MlpSpec::identity()}};
    p.d = 2; p.H = 1; p.L = 2;
    const Matrix out = transformer_forward(x, p);
    const Matrix mid = attention_head(x, h1, MaskKind::dense());
    for (std::size_t c = 0; c < 2; ++c) {
        double mean = 0.0;
        for (std::size_t i = 0; i < 5; ++i) mean += mid(i, c);
        mean /= 5.0;
        for (std::size_t i = 0; i < 5; ++i)
            REQUIRE(out(i, c) == Catch::Approx(mean).margin(1e-13));
    }
}

// Fully independent straight-line evaluation of a 2-layer 2-head model with
// affine MLPs: raw loops, no shared helpers, unstabilized softmax.
namespace {

std::vector<std::vector<double>> straightline_two_layer(
    const std::vector<std::vector<double>>& x, const Matrix& phi_w,
    const std::vector<HeadParams>& l1, const Matrix& psi1_w,
    const std::vector<HeadParams>& l2, const Matrix& psi2_w, bool causal) {
    const std::size_t n = x.size();
    auto affine = [&](const std::vector<std::vector<double>>& in, const Matrix& w) {
        std::vector<std::vector<double>> out(n, std::vector<double>(w.cols, 0.0));
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < w.cols; ++j)
                for (std::size_t k = 0; k < w.rows; ++k) out[i][j] += in[i][k] * w(k, j);
        return out;
    };
    auto run_layer = [&](const std::vector<std::vector<double>>& in,
                         const std::vector<HeadParams>& heads) {
        const std::size_t m = in[0].size() / heads.size();
        std::vector<std::vector<double>> out(n, std::vector<double>(in[0].size(), 0.0));
        for (std::size_t hd = 0; hd < heads.size(); ++hd) {
            for (std::size_t i = 0; i < n; ++i) {
                std::vector<double> q(m, 0.0);
                for (std::size_t c = 0; c < m; ++c)
                    for (std::size_t k = 0; k < m; ++k)
                        q[c] += in[i][hd * m + k] * heads[hd].wq(k, c);
                double denom = 0.0;
                std::vector<double> acc(m, 0.0);
                for (std::size_t j = 0; j < n; ++j) {
                    if (causal && j > i) continue;
                    std::vector<double> kk(m, 0.0), vv(m, 0.0);
                    for (std::size_t c = 0; c < m; ++c)
                        for (std::size_t k = 0; k < m; ++k) {
                            kk[c] += in[j][hd * m + k] * heads[hd].wk(k, c);
                            vv[c] += in[j][hd * m + k] * heads[hd].wv(k, c);
                        }
                    double score = 0.0;
                    for (std::size_t c = 0; c < m; ++c) score += q[c] * kk[c];
                    const double a = std::exp(score);
                    denom += a;
                    for (std::size_t c = 0; c < m; ++c) acc[c] += a * vv[c];
                }
                for (std::size_t c = 0; c < m; ++c) out[i][hd * m + c] = acc[c] / denom;
            }
        }
        return out;
    };
    auto cur = affine(x, phi_w);
    cur = affine(run_layer(cur, l1), psi1_w);
    cur = affine(run_layer(cur, l2), psi2_w);
    return cur;
}

}  // namespace

TEST_CASE("two-layer transformer matches a straight-line second implementation", "[reference]") {
    auto gen = make_stream(13, stream::weights);
    const std::size_t n = 8, d = 4;
    const Matrix phi_w = random_matrix(gen, d, d, -0.7, 0.7);
    const Matrix psi1_w = random_matrix(gen, d, d, -0.7, 0.7);
    const Matrix psi2_w = random_matrix(gen, d, d, -0.7, 0.7);
    const std::vector<HeadParams> l1 = {random_head(gen, 2), random_head(gen, 2)};
    const std::vector<HeadParams> l2 = {random_head(gen, 2), random_head(gen, 2)};
    const Matrix x = random_matrix(gen, n, d, -1.0, 1.0);

    for (bool causal : {false, true}) {
        TransformerParams p;
        p.input_mlp.steps = {MlpStep::affine(phi_w)};
        MlpSpec psi1, psi2;
        psi1.steps = {MlpStep::affine(psi1_w)};
        psi2.steps = {MlpStep::affine(psi2_w)};
        p.layers = {{l1, psi1}, {l2, psi2}};
        p.mask = causal ? MaskKind::causal() : MaskKind::dense();
        p.d = d; p.H = 2; p.L = 2;

        std::vector<std::vector<double>> x_rows(n, std::vector<double>(d));
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) x_rows[i][j] = x(i, j);

        const Matrix got = transformer_forward(x, p);
        const auto want = straightline_two_layer(x_rows, phi_w, l1, psi1_w, l2, psi2_w, causal);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j)
                REQUIRE(got(i, j) == Catch::Approx(want[i][j]).margin(1e-11));
    }
}

TEST_CASE("extended layer MLP sees head outputs beside the incoming row", "[reference]") {
    auto gen = make_stream(14, stream::weights);
    const HeadParams h = random_head(gen, 2);
    const Matrix x = random_matrix(gen, 4, 2, -1.0, 1.0);

    // select only the pass-through half: the layer behaves as the identity
    MlpSpec pass;
    pass.input_width = 4;
    pass.steps = {MlpStep::select_cols({2, 3})};
    const Matrix out = layer_forward(x, {h}, pass, MaskKind::dense());
    REQUIRE(max_abs_diff(out, x) == 0.0);

    // select only the attention half: the layer equals plain attention
    MlpSpec heads_only;
    heads_only.input_width = 4;
    heads_only.steps = {MlpStep::select_cols({0, 1})};
    const Matrix out2 = layer_forward(x, {h}, heads_only, MaskKind::dense());
    REQUIRE(max_abs_diff(out2, attention_head(x, h, MaskKind::dense())) == 0.0);
}
