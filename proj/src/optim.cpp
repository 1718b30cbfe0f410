#include "sdconet/optim.hpp"

#include <cmath>

namespace sdconet {

AdamW::AdamW(std::vector<Group> groups, Scalar beta1, Scalar beta2, Scalar eps)
    : groups_(std::move(groups)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    slots_.resize(groups_.size());
    for (size_t g = 0; g < groups_.size(); ++g) {
        slots_[g].resize(groups_[g].params.size());
        for (size_t p = 0; p < groups_[g].params.size(); ++p) {
            size_t n = static_cast<size_t>(groups_[g].params[p].t.size());
            slots_[g][p].m.assign(n, Scalar(0));
            slots_[g][p].v.assign(n, Scalar(0));
        }
    }
}

AdamW::Group& AdamW::group(const std::string& name) {
    for (auto& g : groups_)
        if (g.name == name) return g;
    throw ConfigError("optimizer group not found: " + name);
}

void AdamW::zero_grad() {
    for (auto& g : groups_)
        for (auto& p : g.params) p.t.zero_grad();
}

Scalar AdamW::clip_global_norm(Scalar max_norm) {
    check_config(max_norm > 0, "clip norm must be positive");
    Scalar sq = 0;
    for (auto& g : groups_) {
        if (g.frozen) continue;
        for (auto& p : g.params) {
            if (!p.t.has_grad()) continue;
            for (Scalar v : p.t.grad()) sq += v * v;
        }
    }
    Scalar norm = std::sqrt(sq);
    if (norm > max_norm) {
        Scalar scale = max_norm / norm;
        for (auto& g : groups_) {
            if (g.frozen) continue;
            for (auto& p : g.params) {
                if (!p.t.has_grad()) continue;
                for (Scalar& v : p.t.grad()) v *= scale;
            }
        }
    }
    return norm;
}

void AdamW::step() {
    for (size_t gi = 0; gi < groups_.size(); ++gi) {
        Group& g = groups_[gi];
        if (g.frozen) continue;
        for (size_t pi = 0; pi < g.params.size(); ++pi) {
            Tensor& t = g.params[pi].t;
            if (!t.has_grad()) continue;
            Slot& s = slots_[gi][pi];
            s.step += 1;
            Scalar bc1 = Scalar(1) - std::pow(beta1_, static_cast<Scalar>(s.step));
            Scalar bc2 = Scalar(1) - std::pow(beta2_, static_cast<Scalar>(s.step));
            const std::vector<Scalar>& grad = t.grad();
            std::vector<Scalar>& val = t.values();
            for (size_t i = 0; i < val.size(); ++i) {
                val[i] -= g.lr * g.weight_decay * val[i];
                s.m[i] = beta1_ * s.m[i] + (Scalar(1) - beta1_) * grad[i];
                s.v[i] = beta2_ * s.v[i] + (Scalar(1) - beta2_) * grad[i] * grad[i];
                Scalar mhat = s.m[i] / bc1;
                Scalar vhat = s.v[i] / bc2;
                val[i] -= g.lr * mhat / (std::sqrt(vhat) + eps_);
            }
        }
    }
}

std::vector<AdamW::SlotState> AdamW::state() const {
    std::vector<SlotState> out;
    for (size_t gi = 0; gi < groups_.size(); ++gi)
        for (size_t pi = 0; pi < groups_[gi].params.size(); ++pi) {
            const Slot& s = slots_[gi][pi];
            out.push_back({groups_[gi].params[pi].name, s.step, s.m, s.v});
        }
    return out;
}

void AdamW::load_state(const std::vector<SlotState>& slots) {
    for (const auto& in : slots) {
        bool found = false;
        for (size_t gi = 0; gi < groups_.size() && !found; ++gi)
            for (size_t pi = 0; pi < groups_[gi].params.size(); ++pi)
                if (groups_[gi].params[pi].name == in.name) {
                    Slot& s = slots_[gi][pi];
                    check_contract(in.m.size() == s.m.size() && in.v.size() == s.v.size(),
                                   "optimizer state size mismatch for " + in.name);
                    s.step = in.step;
                    s.m = in.m;
                    s.v = in.v;
                    found = true;
                    break;
                }
        check_contract(found, "optimizer state for unknown parameter " + in.name);
    }
}

} // namespace sdconet
