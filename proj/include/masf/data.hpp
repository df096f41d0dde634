#pragma once

#include <cstddef>
#include <vector>

#include "masf/tensor.hpp"

namespace masf {

using Labels = std::vector<std::size_t>;

// Labeled samples of one domain. features is [N, input_dim].
struct DomainDataset {
    int domain_id = 0;
    Tensor features;
    Labels labels;

    std::size_t size() const { return labels.size(); }
    std::size_t input_dim() const { return features.shape.size() == 2 ? features.shape[1] : 0; }
};

// Mini-batch drawn from a single domain.
struct Batch {
    int domain_id = 0;
    Tensor features;
    Labels labels;

    std::size_t size() const { return labels.size(); }
};

}  // namespace masf
