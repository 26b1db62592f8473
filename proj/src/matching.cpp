#include "trisparse/matching.hpp"

#include <cmath>

namespace trisparse {

namespace {

void check_keys(const Shape& q, const Shape& m) {
    if (q.size() != 2 || m.size() != 2 || q[0] != m[0]) {
        throw ShapeError("similarity: query keys " + shape_str(q) + " vs memory keys " + shape_str(m));
    }
}

void check_readout(const Shape& vq, const Shape& vm, const Shape& s) {
    if (vq.size() != 2 || vm.size() != 2 || s.size() != 2 || vq[0] != vm[0] || s[0] != vq[1] || s[1] != vm[1]) {
        throw ShapeError("readout: query values " + shape_str(vq) + ", memory values " + shape_str(vm) + ", scores " +
                         shape_str(s));
    }
}

}  // namespace

void append_memory(MemoryBank& bank, const Tensor& key_frame, const Tensor& value_frame) {
    if (key_frame.ndim() != 2 || value_frame.ndim() != 2 || key_frame.dim(1) != value_frame.dim(1)) {
        throw ShapeError("append_memory: key " + shape_str(key_frame.shape()) + " vs value " + shape_str(value_frame.shape()));
    }
    if (bank.empty()) {
        bank.keys = key_frame;
        bank.values = value_frame;
        bank.length = key_frame.dim(1);
        bank.frames = 1;
        return;
    }
    if (key_frame.dim(1) != bank.length || key_frame.dim(0) != bank.keys.dim(0) || value_frame.dim(0) != bank.values.dim(0)) {
        throw ShapeError("append_memory: frame " + shape_str(key_frame.shape()) + "/" + shape_str(value_frame.shape()) +
                         " does not fit bank with L=" + std::to_string(bank.length) + ", keys " + shape_str(bank.keys.shape()) +
                         ", values " + shape_str(bank.values.shape()));
    }
    bank.keys = concat(bank.keys, key_frame, 1);
    bank.values = concat(bank.values, value_frame, 1);
    ++bank.frames;
}

Tensor similarity(const Tensor& query_keys, const Tensor& memory_keys) {
    check_keys(query_keys.shape(), memory_keys.shape());
    const std::size_t ck = query_keys.dim(0), l = query_keys.dim(1), ml = memory_keys.dim(1);
    Tensor s = matmul(query_keys, memory_keys, true, false);
    const double inv = 1.0 / std::sqrt(static_cast<double>(ck));
    for (std::size_t i = 0; i < l; ++i) {
        double norm = 0.0;
        for (std::size_t c = 0; c < ck; ++c) norm += query_keys[c * l + i] * query_keys[c * l + i];
        for (std::size_t j = 0; j < ml; ++j) s[i * ml + j] = (s[i * ml + j] - norm) * inv;
    }
    return s;
}

Tensor similarity_full(const Tensor& query_keys, const Tensor& memory_keys) {
    check_keys(query_keys.shape(), memory_keys.shape());
    const std::size_t ck = query_keys.dim(0), l = query_keys.dim(1), ml = memory_keys.dim(1);
    const double inv = 1.0 / std::sqrt(static_cast<double>(ck));
    Tensor s({l, ml});
    for (std::size_t i = 0; i < l; ++i)
        for (std::size_t j = 0; j < ml; ++j) {
            double d = 0.0;
            for (std::size_t c = 0; c < ck; ++c) {
                const double diff = query_keys[c * l + i] - memory_keys[c * ml + j];
                d += diff * diff;
            }
            s[i * ml + j] = -d * inv;
        }
    return s;
}

Tensor readout(const Tensor& query_values, const Tensor& memory_values, const Tensor& scores) {
    check_readout(query_values.shape(), memory_values.shape(), scores.shape());
    return concat(query_values, matmul(memory_values, softmax(scores, 1), false, true), 0);
}

namespace ag {

Var similarity(const Var& query_keys, const Var& memory_keys) {
    check_keys(query_keys.shape(), memory_keys.shape());
    const std::size_t ck = query_keys.shape()[0], ml = memory_keys.shape()[1];
    const Var cross = matmul(query_keys, memory_keys, true, false);
    const Var norms = matmul(mul(query_keys, query_keys), constant(Tensor({ck, 1}, 1.0)), true, false);  // L x 1
    const Var spread = matmul(norms, constant(Tensor({1, ml}, 1.0)));
    return scale(sub(cross, spread), 1.0 / std::sqrt(static_cast<double>(ck)));
}

Var readout(const Var& query_values, const Var& memory_values, const Var& scores) {
    check_readout(query_values.shape(), memory_values.shape(), scores.shape());
    return concat({query_values, matmul(memory_values, softmax(scores, 1), false, true)}, 0);
}

}  // namespace ag

}  // namespace trisparse
