#pragma once

// Ground-truth dense transformer. Attention uses raw inner-product scores
// (no magnitude normalization) and layers have no residual stream: a layer
// output is exactly the layer MLP applied to the concatenated head outputs.
// Every simulation in this library is judged against these functions.

#include <cstddef>
#include <string>
#include <vector>

#include "attnsim/matrix.hpp"
#include "attnsim/mlp.hpp"

namespace attnsim {

// ----------------------------- parameters -----------------------------

struct HeadParams {
    Matrix wq, wk, wv;  // each m x m for head width m

    std::size_t width() const { return wq.rows; }

    void validate() const {
        if (wq.rows != wq.cols || !wq.same_shape(wk) || !wq.same_shape(wv)) {
            throw ShapeError("head weights must be three equal square matrices");
        }
    }
};

struct LayerParams {
    std::vector<HeadParams> heads;
    MlpSpec layer_mlp;
};

struct TransformerParams {
    std::vector<LayerParams> layers;
    MlpSpec input_mlp;
    MaskKind mask = MaskKind::dense();
    std::size_t d = 0;  // model width between layers
    std::size_t H = 0;  // heads per layer
    std::size_t L = 0;  // layer count

    void validate() const {
        if (H == 0 || d == 0 || d % H != 0) {
            throw ConfigError("transformer: need H >= 1 and H | d");
        }
        if (layers.size() != L) throw ConfigError("transformer: layer count mismatch");
        for (const LayerParams& layer : layers) {
            if (layer.heads.size() != H) throw ConfigError("transformer: head count mismatch");
            for (const HeadParams& h : layer.heads) {
                h.validate();
                if (h.width() != d / H) throw ConfigError("transformer: head width != d/H");
            }
        }
    }
};

// ----------------------------- forward pass -----------------------------

inline Matrix attention_head(const Matrix& x, const HeadParams& h, const MaskKind& mask) {
    if (x.cols != h.wq.rows) {
        throw ShapeError("attention_head: input width " + std::to_string(x.cols) +
                         " vs weight " + std::to_string(h.wq.rows));
    }
    const Matrix q = matmul(x, h.wq);
    const Matrix k = matmul(x, h.wk);
    const Matrix p = masked_row_softmax(matmul(q, transpose(k)), mask);
    return matmul(p, matmul(x, h.wv));
}

// Column-partition x into equal head slices, run each head on its slice,
// concatenate the outputs, then apply the layer MLP token-wise. A layer MLP
// declaring input width 2d is fed [head outputs || pre-layer row] instead,
// which lets it pass columns of the incoming row through the layer untouched.
inline Matrix layer_forward(const Matrix& x, const std::vector<HeadParams>& heads,
                            const MlpSpec& layer_mlp, const MaskKind& mask) {
    if (heads.empty() || x.cols % heads.size() != 0) {
        throw ConfigError("layer_forward: head count must divide width " +
                          std::to_string(x.cols));
    }
    const std::size_t m = x.cols / heads.size();
    std::vector<Matrix> outs;
    outs.reserve(heads.size());
    for (std::size_t i = 0; i < heads.size(); ++i) {
        outs.push_back(attention_head(slice_cols(x, i * m, (i + 1) * m), heads[i], mask));
    }
    Matrix heads_out = concat(outs, Axis::Cols);
    if (layer_mlp.input_width == 2 * x.cols) {
        heads_out = concat({heads_out, x}, Axis::Cols);
    }
    return mlp_apply(layer_mlp, heads_out);
}

inline Matrix transformer_forward(const Matrix& x, const TransformerParams& p) {
    p.validate();
    Matrix cur = mlp_apply(p.input_mlp, x);
    if (cur.cols != p.d) {
        throw ShapeError("transformer_forward: input MLP produced width " +
                         std::to_string(cur.cols) + ", model width is " + std::to_string(p.d));
    }
    for (const LayerParams& layer : p.layers) {
        cur = layer_forward(cur, layer.heads, layer.layer_mlp, p.mask);
        if (cur.cols != p.d) {
            throw ShapeError("transformer_forward: layer MLP must restore width d");
        }
    }
    return cur;
}

}  // namespace attnsim
