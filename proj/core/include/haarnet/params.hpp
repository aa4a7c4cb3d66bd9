#pragma once

#include <string>
#include <vector>

#include "haarnet/tensor.hpp"

namespace haarnet {

struct NamedParam {
    std::string name;
    Tensor tensor;
};

using ParamList = std::vector<NamedParam>;

inline int64_t total_numel(const ParamList& params) {
    int64_t n = 0;
    for (const NamedParam& p : params) n += p.tensor.numel();
    return n;
}

}  // namespace haarnet
