#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "volseg/binio.hpp"
#include "volseg/nn.hpp"

namespace volseg {

// Model checkpoint format (magic "HRFM", version 1, little-endian):
//   u32 parameter count, then per parameter:
//     u32 name length, name bytes, u32 rank, u64 extents[rank], f32 data
//   u32 momentum-buffer count, then the same record layout (empty when the
//   checkpoint carries no optimizer state)
//   training progress: u32 next epoch, f64 best validation score
// All payloads are raw f32/f64 bits, so save -> load round-trips bit-exactly.

struct TrainProgress {
    uint32_t next_epoch = 0;
    double best_val = -1.0;
};

namespace detail {

inline void put_record(std::ostream& os, const std::string& name, const Shape& shape,
                       const std::vector<float>& data) {
    put_u32(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(os, static_cast<uint32_t>(shape.size()));
    for (int64_t e : shape) put_u64(os, static_cast<uint64_t>(e));
    for (float v : data) put_f32(os, v);
}

struct Record {
    Shape shape;
    std::vector<float> data;
};

inline std::pair<std::string, Record> get_record(std::istream& is) {
    const uint32_t name_len = get_u32(is, "record name length");
    check<FormatError>(name_len > 0 && name_len < 4096, "checkpoint: implausible name length");
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    check<FormatError>(static_cast<uint32_t>(is.gcount()) == name_len,
                       "truncated file while reading record name");
    Record rec;
    const uint32_t rank = get_u32(is, "record rank");
    check<FormatError>(rank <= 8, "checkpoint: implausible rank");
    int64_t n = 1;
    for (uint32_t i = 0; i < rank; ++i) {
        const uint64_t e = get_u64(is, "record extent");
        check<FormatError>(e > 0 && e < (1ull << 32), "checkpoint: implausible extent");
        rec.shape.push_back(static_cast<int64_t>(e));
        n *= static_cast<int64_t>(e);
    }
    rec.data.resize(static_cast<size_t>(n));
    for (auto& v : rec.data) v = get_f32(is, "record data");
    return {std::move(name), std::move(rec)};
}

} // namespace detail

/// Saves parameters, optimizer momentum (when `opt` is non-null), and
/// training progress.
inline void save_checkpoint(const std::string& path, const ParamStore<float>& ps,
                            const Sgd<float>* opt = nullptr,
                            const TrainProgress& progress = {}) {
    std::ofstream os(path, std::ios::binary);
    check<FormatError>(static_cast<bool>(os), "save_checkpoint: cannot open " + path);
    os.write("HRFM", 4);
    detail::put_u32(os, 1u);
    detail::put_u32(os, static_cast<uint32_t>(ps.size()));
    for (const auto& [name, t] : ps) detail::put_record(os, name, t.shape(), t.data());
    if (opt) {
        check<ValueError>(opt->velocity().size() == ps.size(),
                          "save_checkpoint: optimizer does not match the parameter store");
        detail::put_u32(os, static_cast<uint32_t>(ps.size()));
        for (size_t i = 0; i < ps.size(); ++i)
            detail::put_record(os, ps.at(i).first, ps.at(i).second.shape(), opt->velocity()[i]);
    } else {
        detail::put_u32(os, 0u);
    }
    detail::put_u32(os, progress.next_epoch);
    detail::put_f64(os, progress.best_val);
    check<FormatError>(static_cast<bool>(os), "save_checkpoint: write failed for " + path);
}

/// Loads a checkpoint into an existing parameter store. The stored parameter
/// set must match the store exactly (same names, same shapes). When `opt` is
/// non-null the checkpoint must carry momentum buffers; when `progress` is
/// non-null it receives the stored training progress.
inline void load_checkpoint(const std::string& path, ParamStore<float>& ps,
                            Sgd<float>* opt = nullptr, TrainProgress* progress = nullptr) {
    std::ifstream is(path, std::ios::binary);
    check<FormatError>(static_cast<bool>(is), "load_checkpoint: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    check<FormatError>(is.gcount() == 4 && std::memcmp(magic, "HRFM", 4) == 0,
                       "load_checkpoint: bad magic in " + path);
    const uint32_t version = detail::get_u32(is, "version");
    check<FormatError>(version == 1u,
                       "load_checkpoint: unsupported version " + std::to_string(version));

    const uint32_t n_params = detail::get_u32(is, "parameter count");
    check<FormatError>(n_params == ps.size(),
                       "load_checkpoint: parameter count mismatch (file has " +
                           std::to_string(n_params) + ", model has " + std::to_string(ps.size()) +
                           ")");
    std::map<std::string, detail::Record> records;
    for (uint32_t i = 0; i < n_params; ++i) {
        auto [name, rec] = detail::get_record(is);
        check<FormatError>(!records.count(name), "load_checkpoint: duplicate parameter " + name);
        records.emplace(std::move(name), std::move(rec));
    }
    for (auto& [name, t] : ps) {
        auto it = records.find(name);
        check<FormatError>(it != records.end(), "load_checkpoint: missing parameter " + name);
        check<FormatError>(it->second.shape == t.shape(),
                           "load_checkpoint: shape mismatch for " + name);
        t.mutable_data() = it->second.data;
    }

    const uint32_t n_mom = detail::get_u32(is, "momentum count");
    check<FormatError>(n_mom == 0 || n_mom == ps.size(),
                       "load_checkpoint: momentum count mismatch");
    std::map<std::string, detail::Record> mom;
    for (uint32_t i = 0; i < n_mom; ++i) {
        auto [name, rec] = detail::get_record(is);
        mom.emplace(std::move(name), std::move(rec));
    }
    if (opt) {
        check<FormatError>(n_mom == ps.size(),
                           "load_checkpoint: checkpoint has no optimizer state for resume");
        check<ValueError>(opt->velocity().size() == ps.size(),
                          "load_checkpoint: optimizer does not match the parameter store");
        for (size_t i = 0; i < ps.size(); ++i) {
            auto it = mom.find(ps.at(i).first);
            check<FormatError>(it != mom.end(),
                               "load_checkpoint: missing momentum for " + ps.at(i).first);
            check<FormatError>(it->second.shape == ps.at(i).second.shape(),
                               "load_checkpoint: momentum shape mismatch for " + ps.at(i).first);
            opt->velocity()[i] = it->second.data;
        }
    }

    TrainProgress prog;
    prog.next_epoch = detail::get_u32(is, "progress epoch");
    prog.best_val = detail::get_f64(is, "progress best score");
    if (progress) *progress = prog;
    is.peek();
    check<FormatError>(is.eof(), "load_checkpoint: trailing bytes in " + path);
}

} // namespace volseg
