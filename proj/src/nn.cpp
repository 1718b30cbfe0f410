#include "sdconet/nn.hpp"

namespace sdconet {

Tensor init_weight(int rows, int cols, Rng& rng, Scalar std_dev) {
    std::vector<Scalar> data(static_cast<size_t>(rows) * cols);
    for (auto& v : data) v = rng.trunc_normal(std_dev);
    return Tensor::from(std::move(data), {rows, cols}, true);
}

Linear::Linear(int in, int out, Rng& rng, bool bias) {
    w = init_weight(in, out, rng);
    if (bias) b = Tensor::zeros({out}, true);
}

Tensor Linear::forward(const Tensor& x) const {
    Tensor y = matmul(x, w);
    if (b.defined()) y = add_rowvec(y, b);
    return y;
}

void Linear::collect(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + ".w", w});
    if (b.defined()) out.push_back({prefix + ".b", b});
}

LayerNorm::LayerNorm(int dim) {
    gamma = Tensor::full({dim}, Scalar(1), true);
    beta = Tensor::zeros({dim}, true);
}

void LayerNorm::collect(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + ".gamma", gamma});
    out.push_back({prefix + ".beta", beta});
}

Mlp::Mlp(int in, int hidden, int out, Rng& rng)
    : fc1(in, hidden, rng), fc2(hidden, out, rng) {}

void Mlp::collect(const std::string& prefix, ParamList& out) const {
    fc1.collect(prefix + ".fc1", out);
    fc2.collect(prefix + ".fc2", out);
}

Embedding::Embedding(int count, int dim, Rng& rng) { table = init_weight(count, dim, rng); }

void Embedding::collect(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + ".table", table});
}

} // namespace sdconet
