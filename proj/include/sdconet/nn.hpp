#pragma once

#include <string>
#include <vector>

#include "sdconet/ops.hpp"
#include "sdconet/rng.hpp"
#include "sdconet/tensor.hpp"

namespace sdconet {

struct ParamEntry {
    std::string name;
    Tensor t;
};
using ParamList = std::vector<ParamEntry>;

// Weights: truncated normal (std 0.02, cut at 2 std). Biases: zero.
Tensor init_weight(int rows, int cols, Rng& rng, Scalar std_dev = 0.02);

struct Linear {
    Tensor w; // (in, out)
    Tensor b; // (out); undefined when bias disabled

    Linear() = default;
    Linear(int in, int out, Rng& rng, bool bias = true);

    Tensor forward(const Tensor& x) const;
    void collect(const std::string& prefix, ParamList& out) const;
};

struct LayerNorm {
    Tensor gamma, beta;
    Scalar eps = 1e-5;

    LayerNorm() = default;
    explicit LayerNorm(int dim);

    Tensor forward(const Tensor& x) const { return layer_norm(x, gamma, beta, eps); }
    void collect(const std::string& prefix, ParamList& out) const;
};

// fc1 -> GELU -> fc2
struct Mlp {
    Linear fc1, fc2;

    Mlp() = default;
    Mlp(int in, int hidden, int out, Rng& rng);

    Tensor forward(const Tensor& x) const { return fc2.forward(gelu(fc1.forward(x))); }
    void collect(const std::string& prefix, ParamList& out) const;
};

struct Embedding {
    Tensor table; // (count, dim)

    Embedding() = default;
    Embedding(int count, int dim, Rng& rng);

    Tensor forward(const std::vector<int>& idx) const { return gather_rows(table, idx); }
    Tensor all() const { return table; }
    void collect(const std::string& prefix, ParamList& out) const;
};

} // namespace sdconet
