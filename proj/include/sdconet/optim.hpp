#pragma once

#include <string>
#include <vector>

#include "sdconet/nn.hpp"
#include "sdconet/tensor.hpp"

namespace sdconet {

// Adam with decoupled weight decay over named parameter groups. A frozen
// group is skipped entirely: no moment advance, no decay, no update.
class AdamW {
public:
    struct Group {
        std::string name;
        ParamList params;
        Scalar lr = 1e-4;
        Scalar weight_decay = 1e-4;
        bool frozen = false;
    };

    AdamW(std::vector<Group> groups, Scalar beta1 = 0.9, Scalar beta2 = 0.999,
          Scalar eps = 1e-8);

    Group& group(const std::string& name);
    const std::vector<Group>& groups() const { return groups_; }

    void zero_grad();
    // Scales gradients of all unfrozen params so the global L2 norm is at
    // most max_norm. Returns the pre-clip norm.
    Scalar clip_global_norm(Scalar max_norm);
    void step();

    // Flat views of optimizer state for checkpointing, keyed by param name.
    struct SlotState {
        std::string name;
        long long step = 0;
        std::vector<Scalar> m, v;
    };
    std::vector<SlotState> state() const;
    void load_state(const std::vector<SlotState>& slots);

private:
    struct Slot {
        long long step = 0;
        std::vector<Scalar> m, v;
    };
    std::vector<Group> groups_;
    std::vector<std::vector<Slot>> slots_; // parallel to groups_/params
    Scalar beta1_, beta2_, eps_;
};

} // namespace sdconet
