#pragma once

#include <cstdint>
#include <map>
#include <string>

namespace volseg::flops {

/// Accumulates floating-point operation counts per tag while active.
///
/// Only multiply-add-bearing primitives contribute (matmul, bmm, conv);
/// a multiply-add counts as 2 FLOPs, a bias add as 1 per output element.
/// Attention kernels retag their score/context products as "attn_qk" /
/// "attn_av" so those terms can be isolated.
struct Counter {
    std::map<std::string, int64_t> by_tag;

    int64_t total() const {
        int64_t t = 0;
        for (const auto& [k, v] : by_tag) t += v;
        return t;
    }
    int64_t tag(const std::string& name) const {
        auto it = by_tag.find(name);
        return it == by_tag.end() ? 0 : it->second;
    }
};

namespace detail {
inline thread_local Counter* active = nullptr;
inline thread_local const char* tag = nullptr;
}  // namespace detail

inline void add(const char* default_tag, int64_t n) {
    if (detail::active)
        detail::active->by_tag[detail::tag ? detail::tag : default_tag] += n;
}

/// RAII: activates a counter on this thread.
class Scope {
public:
    explicit Scope(Counter& c) : prev_(detail::active) { detail::active = &c; }
    ~Scope() { detail::active = prev_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

private:
    Counter* prev_;
};

/// RAII: overrides the tag under which enclosed ops are counted.
class Tag {
public:
    explicit Tag(const char* t) : prev_(detail::tag) { detail::tag = t; }
    ~Tag() { detail::tag = prev_; }
    Tag(const Tag&) = delete;
    Tag& operator=(const Tag&) = delete;

private:
    const char* prev_;
};

}  // namespace volseg::flops
