#pragma once

#include <cstddef>

#include "trisparse/autograd.hpp"
#include "trisparse/tensor.hpp"

namespace trisparse {

/// Keys (C_k x M*L) and values (C_v x M*L) of the memorized frames, frame
/// after frame along the column axis.
struct MemoryBank {
    Tensor keys;
    Tensor values;
    std::size_t frames = 0;
    std::size_t length = 0;  // L, columns per frame

    std::size_t columns() const { return frames * length; }
    bool empty() const { return frames == 0; }
};

void append_memory(MemoryBank& bank, const Tensor& key_frame, const Tensor& value_frame);

/// S = (-|k_Q column|^2 + k_Q^T k_M) / sqrt(C_k), L x M*L.
Tensor similarity(const Tensor& query_keys, const Tensor& memory_keys);

/// Negative scaled squared L2 distance between key columns, L x M*L.
Tensor similarity_full(const Tensor& query_keys, const Tensor& memory_keys);

/// concat(v_Q, v_M * softmax_rows(S)^T) along channels, 2C_v x L.
Tensor readout(const Tensor& query_values, const Tensor& memory_values, const Tensor& scores);

namespace ag {

Var similarity(const Var& query_keys, const Var& memory_keys);
Var readout(const Var& query_values, const Var& memory_values, const Var& scores);

}  // namespace ag

}  // namespace trisparse
