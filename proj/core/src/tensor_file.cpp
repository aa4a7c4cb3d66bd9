#include "haarnet/tensor_file.hpp"

#include <cstring>
#include <fstream>

namespace haarnet {

namespace {

constexpr char kMagic[4] = {'M', 'T', 'E', 'N'};
constexpr uint32_t kVersion = 1;
constexpr uint8_t kDtypeF32 = 0;
constexpr uint8_t kRankDirectory = 0xFF;

void put_u32(std::string& buf, uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_u64(std::string& buf, uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_u16(std::string& buf, uint16_t v) {
    buf.push_back(static_cast<char>(v & 0xFF));
    buf.push_back(static_cast<char>((v >> 8) & 0xFF));
}

// Cursor over an in-memory file image; every read reports its byte offset on
// failure.
struct Reader {
    const std::string& buf;
    size_t pos = 0;
    const std::string& path;

    void need(size_t n, const char* what) const {
        if (pos + n > buf.size()) {
            throw FormatError(path + ": truncated " + what + " at byte offset " + std::to_string(pos) +
                              " (expected " + std::to_string(n) + " more bytes, have " +
                              std::to_string(buf.size() - pos) + ")");
        }
    }
    uint8_t u8(const char* what) {
        need(1, what);
        return static_cast<uint8_t>(buf[pos++]);
    }
    uint16_t u16(const char* what) {
        need(2, what);
        uint16_t v = 0;
        for (int i = 0; i < 2; ++i) v |= static_cast<uint16_t>(static_cast<uint8_t>(buf[pos++])) << (8 * i);
        return v;
    }
    uint32_t u32(const char* what) {
        need(4, what);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<uint8_t>(buf[pos++])) << (8 * i);
        return v;
    }
    uint64_t u64(const char* what) {
        need(8, what);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<uint8_t>(buf[pos++])) << (8 * i);
        return v;
    }
};

void append_record(std::string& buf, const RawTensor& t, bool directory_marker = false) {
    buf.append(kMagic, 4);
    put_u32(buf, kVersion);
    buf.push_back(static_cast<char>(kDtypeF32));
    buf.push_back(static_cast<char>(directory_marker ? kRankDirectory : t.extents.size()));
    if (!directory_marker) {
        for (uint64_t e : t.extents) put_u64(buf, e);
        const size_t bytes = t.data.size() * sizeof(float);
        const size_t off = buf.size();
        buf.resize(off + bytes);
        std::memcpy(buf.data() + off, t.data.data(), bytes);
    }
}

RawTensor read_record(Reader& r) {
    char magic[4];
    r.need(4, "magic");
    std::memcpy(magic, r.buf.data() + r.pos, 4);
    r.pos += 4;
    if (std::memcmp(magic, kMagic, 4) != 0) {
        throw FormatError(r.path + ": bad magic at byte offset " + std::to_string(r.pos - 4) +
                          " (expected \"MTEN\")");
    }
    const uint32_t version = r.u32("version");
    if (version != kVersion) {
        throw FormatError(r.path + ": unsupported version " + std::to_string(version) + " at byte offset " +
                          std::to_string(r.pos - 4));
    }
    const uint8_t dtype = r.u8("dtype");
    if (dtype != kDtypeF32) {
        throw FormatError(r.path + ": unknown dtype code " + std::to_string(dtype) + " at byte offset " +
                          std::to_string(r.pos - 1));
    }
    const uint8_t rank = r.u8("rank");
    if (rank == kRankDirectory) {
        throw FormatError(r.path + ": file is a named-entry container; load it as a checkpoint");
    }
    if (rank > 8) {
        throw FormatError(r.path + ": implausible rank " + std::to_string(rank) + " at byte offset " +
                          std::to_string(r.pos - 1));
    }
    RawTensor t;
    t.extents.resize(rank);
    for (uint8_t i = 0; i < rank; ++i) t.extents[i] = r.u64("extent");
    const uint64_t count = t.numel();
    const uint64_t bytes = count * sizeof(float);
    if (r.pos + bytes > r.buf.size()) {
        throw FormatError(r.path + ": truncated payload at byte offset " + std::to_string(r.pos) +
                          " (expected " + std::to_string(bytes) + " payload bytes, have " +
                          std::to_string(r.buf.size() - r.pos) + ")");
    }
    t.data.resize(count);
    std::memcpy(t.data.data(), r.buf.data() + r.pos, bytes);
    r.pos += bytes;
    return t;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(path + ": cannot open for reading");
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return buf;
}

void spill(const std::string& path, const std::string& buf) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(path + ": cannot open for writing");
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw IoError(path + ": write failed");
}

}  // namespace

void save_raw(const std::string& path, const RawTensor& t) {
    if (t.numel() != t.data.size()) {
        throw ContractError("save_raw: payload length does not match extents");
    }
    std::string buf;
    append_record(buf, t);
    spill(path, buf);
}

RawTensor load_raw(const std::string& path) {
    const std::string buf = slurp(path);
    Reader r{buf, 0, path};
    RawTensor t = read_record(r);
    if (r.pos != buf.size()) {
        throw FormatError(path + ": trailing bytes after payload (expected file length " +
                          std::to_string(r.pos) + ", actual " + std::to_string(buf.size()) + ")");
    }
    return t;
}

Tensor raw_to_tensor(const RawTensor& raw) {
    if (raw.extents.size() > 4) {
        throw FormatError("raw tensor of rank " + std::to_string(raw.extents.size()) +
                          " does not fit a rank-4 tensor");
    }
    int64_t dims[4] = {1, 1, 1, 1};
    const size_t off = 4 - raw.extents.size();
    for (size_t i = 0; i < raw.extents.size(); ++i) dims[off + i] = static_cast<int64_t>(raw.extents[i]);
    return Tensor::from_vector({dims[0], dims[1], dims[2], dims[3]}, raw.data);
}

RawTensor tensor_to_raw(const Tensor& t, int rank) {
    if (rank < 1 || rank > 4) throw ContractError("tensor_to_raw: rank must be in [1,4]");
    const Shape& s = t.shape();
    const int64_t dims[4] = {s.n, s.c, s.h, s.w};
    for (int i = 0; i < 4 - rank; ++i) {
        if (dims[i] != 1) throw ContractError("tensor_to_raw: leading extents must be 1 to drop rank");
    }
    RawTensor raw;
    for (int i = 4 - rank; i < 4; ++i) raw.extents.push_back(static_cast<uint64_t>(dims[i]));
    raw.data.assign(t.data(), t.data() + t.numel());
    return raw;
}

void save_tensor(const std::string& path, const Tensor& t) { save_raw(path, tensor_to_raw(t, 4)); }

Tensor load_tensor(const std::string& path) {
    RawTensor raw = load_raw(path);
    if (raw.extents.size() != 4) {
        throw FormatError(path + ": expected a rank-4 tensor, got rank " +
                          std::to_string(raw.extents.size()));
    }
    return raw_to_tensor(raw);
}

void save_checkpoint(const std::string& path, const NamedTensors& entries) {
    std::string buf;
    RawTensor empty;
    append_record(buf, empty, /*directory_marker=*/true);
    put_u32(buf, static_cast<uint32_t>(entries.size()));
    for (const auto& [name, tensor] : entries) {
        if (name.size() > 0xFFFF) throw ContractError("save_checkpoint: entry name too long");
        put_u16(buf, static_cast<uint16_t>(name.size()));
        buf.append(name);
        append_record(buf, tensor);
    }
    spill(path, buf);
}

NamedTensors load_checkpoint(const std::string& path) {
    const std::string buf = slurp(path);
    Reader r{buf, 0, path};
    r.need(4, "magic");
    if (std::memcmp(buf.data(), kMagic, 4) != 0) {
        throw FormatError(path + ": bad magic at byte offset 0 (expected \"MTEN\")");
    }
    r.pos = 4;
    const uint32_t version = r.u32("version");
    if (version != kVersion) throw FormatError(path + ": unsupported version " + std::to_string(version));
    const uint8_t dtype = r.u8("dtype");
    if (dtype != kDtypeF32) throw FormatError(path + ": unknown dtype code " + std::to_string(dtype));
    const uint8_t rank = r.u8("rank");
    if (rank != kRankDirectory) {
        throw FormatError(path + ": not a named-entry container (rank byte " + std::to_string(rank) + ")");
    }
    const uint32_t count = r.u32("entry count");
    NamedTensors entries;
    entries.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        const uint16_t len = r.u16("entry name length");
        r.need(len, "entry name");
        std::string name(buf.data() + r.pos, len);
        r.pos += len;
        entries.emplace_back(std::move(name), read_record(r));
    }
    if (r.pos != buf.size()) {
        throw FormatError(path + ": trailing bytes after last entry (expected file length " +
                          std::to_string(r.pos) + ", actual " + std::to_string(buf.size()) + ")");
    }
    return entries;
}

const RawTensor* find_entry(const NamedTensors& entries, const std::string& name) {
    for (const auto& [n, t] : entries) {
        if (n == name) return &t;
    }
    return nullptr;
}

}  // namespace haarnet
