#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "demondnc/errors.hpp"
#include "demondnc/rng.hpp"
#include "demondnc/tensor.hpp"

namespace demondnc {

enum class TaskKind { Copy, RepeatCopy, AssociativeRecall };

inline const char* task_kind_name(TaskKind k) {
    switch (k) {
        case TaskKind::Copy: return "copy";
        case TaskKind::RepeatCopy: return "repeat-copy";
        case TaskKind::AssociativeRecall: return "associative-recall";
    }
    return "unknown";
}

inline TaskKind task_kind_from_name(const std::string& name) {
    if (name == "copy") return TaskKind::Copy;
    if (name == "repeat-copy") return TaskKind::RepeatCopy;
    if (name == "associative-recall") return TaskKind::AssociativeRecall;
    throw ConfigError("unknown task kind: " + name);
}

struct TaskConfig {
    TaskKind kind = TaskKind::Copy;
    std::size_t bits = 8;
    std::size_t len_min = 1;
    std::size_t len_max = 8;
    std::size_t repeat_min = 1;
    std::size_t repeat_max = 3;
    std::size_t items_min = 2;
    std::size_t items_max = 6;
    std::size_t item_len = 3;
    std::uint64_t seed = 0;

    void validate() const {
        if (bits < 1) throw ConfigError("task: bits must be >= 1");
        if (len_min < 1 || len_max < len_min) throw ConfigError("task: bad length range");
        if (repeat_min < 1 || repeat_max < repeat_min) throw ConfigError("task: bad repeat range");
        if (items_min < 2 || items_max < items_min) throw ConfigError("task: item count range must start >= 2");
        if (item_len < 1) throw ConfigError("task: item_len must be >= 1");
    }

    // Channel layout: [0,bits) data; bits = delimiter; bits+1 = repeat count
    // (copy family) or query delimiter (associative recall).
    std::size_t input_dim() const { return bits + 2; }
    std::size_t output_dim() const { return kind == TaskKind::RepeatCopy ? bits + 1 : bits; }

    bool operator==(const TaskConfig&) const = default;
};

template <class T>
struct TaskSample {
    Tensor<T> inputs;   // [T x input_dim]
    Tensor<T> targets;  // [T x output_dim]
    Tensor<T> loss_mask;  // [T], 0/1; target rows are zero wherever mask is 0

    std::size_t steps() const { return loss_mask.numel(); }
};

namespace detail {

template <class T>
std::vector<std::vector<T>> random_bit_rows(std::size_t rows, std::size_t bits, Rng& rng) {
    std::vector<std::vector<T>> out(rows, std::vector<T>(bits));
    for (auto& row : out)
        for (auto& v : row) v = static_cast<T>(rng.bit());
    return out;
}

}  // namespace detail

// Echo task: L random bit vectors, a delimiter flag, then a silent output
// phase where the target replays the sequence.
template <class T>
TaskSample<T> gen_copy(const TaskConfig& cfg, Rng& rng) {
    cfg.validate();
    const std::size_t in = cfg.input_dim(), out = cfg.bits;
    const std::size_t len = cfg.len_min + (cfg.len_max > cfg.len_min ? rng.uniform_int(cfg.len_max - cfg.len_min + 1) : 0);
    const auto bits = detail::random_bit_rows<T>(len, cfg.bits, rng);

    const std::size_t steps = 2 * len + 1;
    std::vector<T> x(steps * in, T(0)), y(steps * out, T(0)), mask(steps, T(0));
    for (std::size_t t = 0; t < len; ++t)
        for (std::size_t b = 0; b < cfg.bits; ++b) x[t * in + b] = bits[t][b];
    x[len * in + cfg.bits] = T(1);  // delimiter
    for (std::size_t t = 0; t < len; ++t) {
        const std::size_t row = len + 1 + t;
        mask[row] = T(1);
        for (std::size_t b = 0; b < cfg.bits; ++b) y[row * out + b] = bits[t][b];
    }
    return {Tensor<T>::from({steps, in}, std::move(x)), Tensor<T>::from({steps, out}, std::move(y)),
            Tensor<T>::from({steps}, std::move(mask))};
}

// Copy with a repeat count R announced on the dedicated channel at the
// delimiter step (normalized by the configured maximum); the target replays
// the sequence R times and then raises the end-marker channel.
template <class T>
TaskSample<T> gen_repeat_copy(const TaskConfig& cfg, Rng& rng) {
    cfg.validate();
    const std::size_t in = cfg.input_dim(), out = cfg.bits + 1;
    const std::size_t len = cfg.len_min + (cfg.len_max > cfg.len_min ? rng.uniform_int(cfg.len_max - cfg.len_min + 1) : 0);
    const std::size_t reps =
        cfg.repeat_min + (cfg.repeat_max > cfg.repeat_min ? rng.uniform_int(cfg.repeat_max - cfg.repeat_min + 1) : 0);
    const auto bits = detail::random_bit_rows<T>(len, cfg.bits, rng);

    const std::size_t steps = len + 1 + reps * len + 1;
    std::vector<T> x(steps * in, T(0)), y(steps * out, T(0)), mask(steps, T(0));
    for (std::size_t t = 0; t < len; ++t)
        for (std::size_t b = 0; b < cfg.bits; ++b) x[t * in + b] = bits[t][b];
    x[len * in + cfg.bits] = T(1);
    x[len * in + cfg.bits + 1] = static_cast<T>(reps) / static_cast<T>(cfg.repeat_max);
    for (std::size_t r = 0; r < reps; ++r)
        for (std::size_t t = 0; t < len; ++t) {
            const std::size_t row = len + 1 + r * len + t;
            mask[row] = T(1);
            for (std::size_t b = 0; b < cfg.bits; ++b) y[row * out + b] = bits[t][b];
        }
    const std::size_t end_row = steps - 1;
    mask[end_row] = T(1);
    y[end_row * out + cfg.bits] = T(1);  // end marker
    return {Tensor<T>::from({steps, in}, std::move(x)), Tensor<T>::from({steps, out}, std::move(y)),
            Tensor<T>::from({steps}, std::move(mask))};
}

// K delimited items of item_len bit vectors, then one of the first K-1 items
// replayed between query flags; the target is the item that followed it.
template <class T>
TaskSample<T> gen_associative_recall(const TaskConfig& cfg, Rng& rng) {
    cfg.validate();
    const std::size_t in = cfg.input_dim(), out = cfg.bits;
    const std::size_t items =
        cfg.items_min + (cfg.items_max > cfg.items_min ? rng.uniform_int(cfg.items_max - cfg.items_min + 1) : 0);
    const auto bits = detail::random_bit_rows<T>(items * cfg.item_len, cfg.bits, rng);
    const std::size_t query = rng.uniform_int(items - 1);

    const std::size_t steps = items * (cfg.item_len + 1) + (cfg.item_len + 2) + cfg.item_len;
    std::vector<T> x(steps * in, T(0)), y(steps * out, T(0)), mask(steps, T(0));
    std::size_t row = 0;
    for (std::size_t k = 0; k < items; ++k) {
        x[row * in + cfg.bits] = T(1);
        ++row;
        for (std::size_t t = 0; t < cfg.item_len; ++t, ++row)
            for (std::size_t b = 0; b < cfg.bits; ++b) x[row * in + b] = bits[k * cfg.item_len + t][b];
    }
    x[row * in + cfg.bits + 1] = T(1);
    ++row;
    for (std::size_t t = 0; t < cfg.item_len; ++t, ++row)
        for (std::size_t b = 0; b < cfg.bits; ++b) x[row * in + b] = bits[query * cfg.item_len + t][b];
    x[row * in + cfg.bits + 1] = T(1);
    ++row;
    for (std::size_t t = 0; t < cfg.item_len; ++t, ++row) {
        mask[row] = T(1);
        for (std::size_t b = 0; b < cfg.bits; ++b) y[row * out + b] = bits[(query + 1) * cfg.item_len + t][b];
    }
    return {Tensor<T>::from({steps, in}, std::move(x)), Tensor<T>::from({steps, out}, std::move(y)),
            Tensor<T>::from({steps}, std::move(mask))};
}

template <class T>
TaskSample<T> gen_task(const TaskConfig& cfg, Rng& rng) {
    switch (cfg.kind) {
        case TaskKind::Copy: return gen_copy<T>(cfg, rng);
        case TaskKind::RepeatCopy: return gen_repeat_copy<T>(cfg, rng);
        case TaskKind::AssociativeRecall: return gen_associative_recall<T>(cfg, rng);
    }
    throw ConfigError("task: unknown kind");
}

// Fraction of thresholded output bits (>= 0.5) that differ from the target
// over masked steps.
template <class T>
T bit_error(const Tensor<T>& outputs, const Tensor<T>& targets, const Tensor<T>& loss_mask) {
    if (outputs.shape() != targets.shape() || outputs.shape().size() != 2 ||
        loss_mask.numel() != outputs.extent(0))
        throw ShapeError("bit_error: outputs, targets, and mask shapes do not line up");
    const std::size_t cols = outputs.extent(1);
    std::size_t total = 0, wrong = 0;
    for (std::size_t t = 0; t < outputs.extent(0); ++t) {
        if (loss_mask.at(t) == T(0)) continue;
        for (std::size_t c = 0; c < cols; ++c) {
            const bool got = outputs.at(t * cols + c) >= T(0.5);
            const bool want = targets.at(t * cols + c) >= T(0.5);
            total += 1;
            wrong += (got != want) ? 1 : 0;
        }
    }
    if (total == 0) throw DomainError("bit_error: loss mask selects no steps");
    return static_cast<T>(wrong) / static_cast<T>(total);
}

}  // namespace demondnc
