#pragma once

#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "demondnc/config.hpp"
#include "demondnc/errors.hpp"
#include "demondnc/param_store.hpp"
#include "demondnc/rng.hpp"

namespace demondnc {

inline constexpr char kCheckpointMagic[8] = {'D', 'D', 'N', 'C', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

// One named array: shape header plus little-endian 32-bit words. Floats are
// stored as their bit patterns, counters as plain words.
struct CheckpointRecord {
    std::string name;
    std::vector<std::uint32_t> extents;
    std::vector<std::uint32_t> words;

    std::size_t numel() const {
        std::size_t n = 1;
        for (const std::uint32_t e : extents) n *= e;
        return n;
    }
};

struct CheckpointFile {
    std::uint32_t version = kCheckpointVersion;
    ConfigDigest digest{};
    std::vector<CheckpointRecord> records;

    const CheckpointRecord& find(const std::string& name) const {
        for (const auto& r : records)
            if (r.name == name) return r;
        throw IoError("checkpoint: missing record " + name);
    }

    bool has(const std::string& name) const {
        for (const auto& r : records)
            if (r.name == name) return true;
        return false;
    }

    void add(std::string name, std::vector<std::uint32_t> extents, std::vector<std::uint32_t> words) {
        CheckpointRecord r{std::move(name), std::move(extents), std::move(words)};
        if (r.numel() != r.words.size())
            throw ArgumentError("checkpoint: extents do not match word count for " + r.name);
        records.push_back(std::move(r));
    }
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    out.push_back(static_cast<char>(v & 0xFF));
    out.push_back(static_cast<char>((v >> 8) & 0xFF));
    out.push_back(static_cast<char>((v >> 16) & 0xFF));
    out.push_back(static_cast<char>((v >> 24) & 0xFF));
}

class ByteReader {
public:
    ByteReader(const std::string& data, const std::string& path) : data_(data), path_(path) {}

    std::uint32_t u32() {
        if (pos_ + 4 > data_.size()) throw IoError("checkpoint: truncated file " + path_);
        const auto* p = reinterpret_cast<const unsigned char*>(data_.data() + pos_);
        pos_ += 4;
        return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
               (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
    }

    std::string bytes(std::size_t n) {
        if (pos_ + n > data_.size()) throw IoError("checkpoint: truncated file " + path_);
        std::string out = data_.substr(pos_, n);
        pos_ += n;
        return out;
    }

    bool done() const { return pos_ == data_.size(); }

private:
    const std::string& data_;
    std::string path_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline void checkpoint_write(const CheckpointFile& file, const std::string& path) {
    std::string out;
    out.append(kCheckpointMagic, sizeof(kCheckpointMagic));
    detail::put_u32(out, file.version);
    out.append(reinterpret_cast<const char*>(file.digest.data()), file.digest.size());
    for (const auto& r : file.records) {
        detail::put_u32(out, static_cast<std::uint32_t>(r.name.size()));
        out.append(r.name);
        detail::put_u32(out, static_cast<std::uint32_t>(r.extents.size()));
        for (const std::uint32_t e : r.extents) detail::put_u32(out, e);
        for (const std::uint32_t w : r.words) detail::put_u32(out, w);
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("checkpoint: cannot write " + path);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("checkpoint: short write to " + path);
}

inline CheckpointFile checkpoint_read(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("checkpoint: cannot open " + path);
    std::string data((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    detail::ByteReader in(data, path);

    const std::string magic = in.bytes(sizeof(kCheckpointMagic));
    if (std::memcmp(magic.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0)
        throw IoError("checkpoint: bad magic in " + path);
    CheckpointFile file;
    file.version = in.u32();
    if (file.version != kCheckpointVersion)
        throw IoError("checkpoint: unsupported version " + std::to_string(file.version) + " in " + path);
    const std::string dg = in.bytes(file.digest.size());
    std::memcpy(file.digest.data(), dg.data(), file.digest.size());

    while (!in.done()) {
        CheckpointRecord r;
        r.name = in.bytes(in.u32());
        const std::uint32_t rank = in.u32();
        r.extents.resize(rank);
        for (auto& e : r.extents) e = in.u32();
        r.words.resize(r.numel());
        for (auto& w : r.words) w = in.u32();
        file.records.push_back(std::move(r));
    }
    return file;
}

// Load that refuses a checkpoint written under a different configuration.
inline CheckpointFile checkpoint_read(const std::string& path, const ConfigDigest& expected) {
    CheckpointFile file = checkpoint_read(path);
    if (file.digest != expected)
        throw ConfigError("checkpoint: config digest mismatch for " + path + " (have " +
                          digest_hex(file.digest) + ", expected " + digest_hex(expected) + ")");
    return file;
}

// ---------------------------------------------------------------------------
// Typed packing helpers
// ---------------------------------------------------------------------------

template <class T>
std::vector<std::uint32_t> pack_f32(const std::vector<T>& values) {
    std::vector<std::uint32_t> words(values.size());
    for (std::size_t i = 0; i < values.size(); ++i)
        words[i] = std::bit_cast<std::uint32_t>(static_cast<float>(values[i]));
    return words;
}

template <class T>
std::vector<T> unpack_f32(const std::vector<std::uint32_t>& words) {
    std::vector<T> values(words.size());
    for (std::size_t i = 0; i < words.size(); ++i)
        values[i] = static_cast<T>(std::bit_cast<float>(words[i]));
    return values;
}

inline std::vector<std::uint32_t> pack_u64(std::uint64_t v) {
    return {static_cast<std::uint32_t>(v & 0xFFFFFFFFu), static_cast<std::uint32_t>(v >> 32)};
}

inline std::uint64_t unpack_u64(const std::vector<std::uint32_t>& words) {
    if (words.size() != 2) throw IoError("checkpoint: expected a 2-word counter");
    return static_cast<std::uint64_t>(words[0]) | (static_cast<std::uint64_t>(words[1]) << 32);
}

// Text payloads (rng streams): first word is the byte length, the rest are
// the zero-padded bytes.
inline std::vector<std::uint32_t> pack_text(const std::string& text) {
    std::vector<std::uint32_t> words;
    words.push_back(static_cast<std::uint32_t>(text.size()));
    for (std::size_t i = 0; i < text.size(); i += 4) {
        std::uint32_t w = 0;
        for (std::size_t k = 0; k < 4 && i + k < text.size(); ++k)
            w |= static_cast<std::uint32_t>(static_cast<unsigned char>(text[i + k])) << (8 * k);
        words.push_back(w);
    }
    return words;
}

inline std::string unpack_text(const std::vector<std::uint32_t>& words) {
    if (words.empty()) throw IoError("checkpoint: empty text record");
    const std::size_t len = words[0];
    if (words.size() != 1 + (len + 3) / 4) throw IoError("checkpoint: malformed text record");
    std::string text(len, '\0');
    for (std::size_t i = 0; i < len; ++i)
        text[i] = static_cast<char>((words[1 + i / 4] >> (8 * (i % 4))) & 0xFF);
    return text;
}

// Every slot value plus its Adam moments and the shared step counter, so a
// resumed run continues exactly where it stopped.
template <class T>
void pack_store(CheckpointFile& file, const std::string& prefix, const ParameterStore<T>& store) {
    for (const auto& slot : store.slots()) {
        std::vector<std::uint32_t> extents;
        for (const std::size_t e : slot.value.shape()) extents.push_back(static_cast<std::uint32_t>(e));
        file.add("param." + prefix + "." + slot.name, extents, pack_f32(slot.value.value()));
        file.add("adam." + prefix + "." + slot.name + ".m",
                 {static_cast<std::uint32_t>(slot.m.size())}, pack_f32(slot.m));
        file.add("adam." + prefix + "." + slot.name + ".v",
                 {static_cast<std::uint32_t>(slot.v.size())}, pack_f32(slot.v));
    }
    file.add("opt." + prefix + ".step", {2}, pack_u64(store.step_count()));
}

template <class T>
void unpack_store(const CheckpointFile& file, const std::string& prefix, ParameterStore<T>& store) {
    for (auto& slot : store.slots()) {
        const auto& rec = file.find("param." + prefix + "." + slot.name);
        if (rec.numel() != slot.value.numel())
            throw IoError("checkpoint: size mismatch for " + rec.name);
        auto values = unpack_f32<T>(rec.words);
        slot.value.node()->value = std::move(values);
        slot.m = unpack_f32<T>(file.find("adam." + prefix + "." + slot.name + ".m").words);
        slot.v = unpack_f32<T>(file.find("adam." + prefix + "." + slot.name + ".v").words);
        if (slot.m.size() != slot.value.numel() || slot.v.size() != slot.value.numel())
            throw IoError("checkpoint: moment size mismatch for " + slot.name);
    }
    store.set_step_count(unpack_u64(file.find("opt." + prefix + ".step").words));
}

}  // namespace demondnc
