#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "volseg/binio.hpp"
#include "volseg/common.hpp"
#include "volseg/rng.hpp"

namespace volseg {

// Synthetic labelled volumes, their on-disk format, dataset manifests, and
// the pure-data transforms used by the training pipeline.

// ---------------------------------------------------------------------------
// labelled volume + HVOL file format
// ---------------------------------------------------------------------------

/// One labelled volume: row-major [D, H, W] intensities and class labels.
struct LabeledVolume {
    int64_t d = 0, h = 0, w = 0;
    int64_t num_classes = 0;
    std::vector<float> intensity;  // size d*h*w
    std::vector<uint8_t> labels;   // size d*h*w, values in [0, num_classes)

    int64_t voxels() const { return d * h * w; }
};

/// Writes a volume as HVOL: magic "HVOL", version, D, H, W, K (u32 each,
/// little-endian), then D*H*W float32 intensities, then D*H*W uint8 labels.
inline void save_hvol(const std::string& path, const LabeledVolume& vol) {
    check<ValueError>(vol.d > 0 && vol.h > 0 && vol.w > 0, "save_hvol: empty volume");
    check<ValueError>(static_cast<int64_t>(vol.intensity.size()) == vol.voxels() &&
                          static_cast<int64_t>(vol.labels.size()) == vol.voxels(),
                      "save_hvol: buffer sizes do not match extents");
    std::ofstream os(path, std::ios::binary);
    check<FormatError>(static_cast<bool>(os), "save_hvol: cannot open " + path);
    os.write("HVOL", 4);
    detail::put_u32(os, 1u);
    detail::put_u32(os, static_cast<uint32_t>(vol.d));
    detail::put_u32(os, static_cast<uint32_t>(vol.h));
    detail::put_u32(os, static_cast<uint32_t>(vol.w));
    detail::put_u32(os, static_cast<uint32_t>(vol.num_classes));
    for (float v : vol.intensity) detail::put_f32(os, v);
    os.write(reinterpret_cast<const char*>(vol.labels.data()),
             static_cast<std::streamsize>(vol.labels.size()));
    check<FormatError>(static_cast<bool>(os), "save_hvol: write failed for " + path);
}

/// Reads an HVOL file, validating magic, version, and payload size, and
/// rejecting any label outside [0, K).
inline LabeledVolume load_hvol(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    check<FormatError>(static_cast<bool>(is), "load_hvol: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    check<FormatError>(is.gcount() == 4 && std::memcmp(magic, "HVOL", 4) == 0,
                       "load_hvol: bad magic in " + path);
    uint32_t version = detail::get_u32(is, "version");
    check<FormatError>(version == 1u, "load_hvol: unsupported version " + std::to_string(version));
    LabeledVolume vol;
    vol.d = detail::get_u32(is, "depth");
    vol.h = detail::get_u32(is, "height");
    vol.w = detail::get_u32(is, "width");
    vol.num_classes = detail::get_u32(is, "class count");
    check<FormatError>(vol.d > 0 && vol.h > 0 && vol.w > 0 && vol.num_classes >= 1,
                       "load_hvol: bad header extents in " + path);
    const size_t n = static_cast<size_t>(vol.voxels());
    vol.intensity.resize(n);
    for (size_t i = 0; i < n; ++i) vol.intensity[i] = detail::get_f32(is, "intensity data");
    vol.labels.resize(n);
    is.read(reinterpret_cast<char*>(vol.labels.data()), static_cast<std::streamsize>(n));
    check<FormatError>(static_cast<size_t>(is.gcount()) == n, "load_hvol: truncated label data");
    is.peek();
    check<FormatError>(is.eof(), "load_hvol: trailing bytes in " + path);
    for (uint8_t l : vol.labels)
        check<FormatError>(l < vol.num_classes, "load_hvol: label out of range in " + path);
    return vol;
}

// ---------------------------------------------------------------------------
// manifest: "case_id path split" per line
// ---------------------------------------------------------------------------

struct ManifestEntry {
    std::string case_id;
    std::string path;
    std::string split; // train | val | test
};

inline void save_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
    std::ofstream os(path);
    check<FormatError>(static_cast<bool>(os), "save_manifest: cannot open " + path);
    for (const auto& e : entries) os << e.case_id << " " << e.path << " " << e.split << "\n";
    check<FormatError>(static_cast<bool>(os), "save_manifest: write failed");
}

inline std::vector<ManifestEntry> load_manifest(const std::string& path) {
    std::ifstream is(path);
    check<FormatError>(static_cast<bool>(is), "load_manifest: cannot open " + path);
    std::vector<ManifestEntry> entries;
    std::string line;
    size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ls(line);
        ManifestEntry e;
        std::string extra;
        check<FormatError>(static_cast<bool>(ls >> e.case_id >> e.path >> e.split) && !(ls >> extra),
                           "load_manifest: malformed line " + std::to_string(lineno) + " in " + path);
        check<FormatError>(e.split == "train" || e.split == "val" || e.split == "test",
                           "load_manifest: unknown split '" + e.split + "' on line " +
                               std::to_string(lineno));
        entries.push_back(std::move(e));
    }
    return entries;
}

// ---------------------------------------------------------------------------
// phantom generation
// ---------------------------------------------------------------------------

/// Per-foreground-class ellipsoid recipe: intensity distribution and
/// inclusive semi-axis ranges (voxels) along each axis.
struct OrganSpec {
    double mean = 1.0;
    double sigma = 0.05;
    std::array<double, 2> semi_d{1.0, 2.0};
    std::array<double, 2> semi_h{6.0, 12.0};
    std::array<double, 2> semi_w{6.0, 12.0};
};

struct PhantomSpec {
    int64_t d = 16, h = 64, w = 64;
    int64_t organs_min = 1, organs_max = 2; // ellipsoids per foreground class
    double background_mean = 0.0;
    double background_sigma = 0.05;
    std::vector<OrganSpec> organs; // one entry per foreground class (class c = organs[c-1])

    int64_t num_classes() const { return static_cast<int64_t>(organs.size()) + 1; }

    /// Default two-foreground-class phantom.  Both classes share the same
    /// intensity distribution and in-plane size range; they differ only in
    /// through-plane extent (thin vs tall), so single slices are ambiguous
    /// and the classes can only be told apart across slices.
    static PhantomSpec desk_default() {
        PhantomSpec s;
        OrganSpec thin;
        thin.mean = 1.0;
        thin.sigma = 0.05;
        thin.semi_d = {1.0, 2.0};
        thin.semi_h = {7.0, 13.0};
        thin.semi_w = {7.0, 13.0};
        OrganSpec tall = thin;
        tall.semi_d = {4.0, 6.0};
        s.organs = {thin, tall};
        return s;
    }
};

/// Generates one phantom, fully determined by (spec, case_seed): Gaussian
/// background, then per foreground class a random number of random ellipsoids
/// placed by rejection sampling so no two organs overlap.  Throws ValueError
/// if an organ cannot be placed after 1000 attempts or cannot fit at all.
inline LabeledVolume generate_phantom(const PhantomSpec& spec, uint64_t case_seed) {
    check<ValueError>(spec.d > 0 && spec.h > 0 && spec.w > 0, "generate_phantom: empty extents");
    check<ValueError>(!spec.organs.empty(), "generate_phantom: need at least one foreground class");
    check<ValueError>(spec.organs_min >= 1 && spec.organs_max >= spec.organs_min,
                      "generate_phantom: bad organ count range");
    LabeledVolume vol;
    vol.d = spec.d;
    vol.h = spec.h;
    vol.w = spec.w;
    vol.num_classes = spec.num_classes();
    const size_t n = static_cast<size_t>(vol.voxels());
    vol.labels.assign(n, 0);
    vol.intensity.resize(n);

    Rng rng = Rng::stream(case_seed, 0x9e113001ull, 0);
    for (size_t i = 0; i < n; ++i)
        vol.intensity[i] =
            static_cast<float>(spec.background_mean + spec.background_sigma * rng.next_normal());

    auto axis_range = [&](const std::array<double, 2>& r, int64_t extent, const char* name) {
        check<ValueError>(r[0] > 0.0 && r[1] >= r[0], std::string("generate_phantom: bad ") + name +
                                                          " semi-axis range");
        check<ValueError>(2.0 * r[0] < static_cast<double>(extent),
                          std::string("generate_phantom: ") + name +
                              " semi-axis cannot fit inside the volume");
    };

    for (size_t ci = 0; ci < spec.organs.size(); ++ci) {
        const OrganSpec& org = spec.organs[ci];
        const uint8_t cls = static_cast<uint8_t>(ci + 1);
        axis_range(org.semi_d, spec.d, "depth");
        axis_range(org.semi_h, spec.h, "height");
        axis_range(org.semi_w, spec.w, "width");
        const int64_t count = rng.next_int(spec.organs_min, spec.organs_max);
        for (int64_t o = 0; o < count; ++o) {
            bool placed = false;
            for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
                const double ad = rng.next_double() * (org.semi_d[1] - org.semi_d[0]) + org.semi_d[0];
                const double ah = rng.next_double() * (org.semi_h[1] - org.semi_h[0]) + org.semi_h[0];
                const double aw = rng.next_double() * (org.semi_w[1] - org.semi_w[0]) + org.semi_w[0];
                // centre such that the ellipsoid stays strictly inside the grid
                auto centre = [&](double a, int64_t extent) {
                    int64_t lo = static_cast<int64_t>(std::ceil(a));
                    int64_t hi = extent - 1 - lo;
                    check<ValueError>(lo <= hi, "generate_phantom: organ too large for volume");
                    return rng.next_int(lo, hi);
                };
                const int64_t cd = centre(ad, spec.d);
                const int64_t ch = centre(ah, spec.h);
                const int64_t cw = centre(aw, spec.w);
                // collect member voxels; reject on any overlap with earlier organs
                std::vector<size_t> member;
                bool overlap = false;
                const int64_t d0 = cd - static_cast<int64_t>(ad), d1 = cd + static_cast<int64_t>(ad);
                const int64_t h0 = ch - static_cast<int64_t>(ah), h1 = ch + static_cast<int64_t>(ah);
                const int64_t w0 = cw - static_cast<int64_t>(aw), w1 = cw + static_cast<int64_t>(aw);
                for (int64_t z = d0; z <= d1 && !overlap; ++z)
                    for (int64_t y = h0; y <= h1 && !overlap; ++y)
                        for (int64_t x = w0; x <= w1; ++x) {
                            const double fz = (static_cast<double>(z) - cd) / ad;
                            const double fy = (static_cast<double>(y) - ch) / ah;
                            const double fx = (static_cast<double>(x) - cw) / aw;
                            if (fz * fz + fy * fy + fx * fx > 1.0) continue;
                            const size_t idx =
                                static_cast<size_t>((z * spec.h + y) * spec.w + x);
                            if (vol.labels[idx] != 0) {
                                overlap = true;
                                break;
                            }
                            member.push_back(idx);
                        }
                if (overlap || member.empty()) continue;
                for (size_t idx : member) {
                    vol.labels[idx] = cls;
                    vol.intensity[idx] =
                        static_cast<float>(org.mean + org.sigma * rng.next_normal());
                }
                placed = true;
            }
            check<ValueError>(placed, "generate_phantom: failed to place class " +
                                          std::to_string(int(cls)) + " organ after 1000 attempts");
        }
    }
    return vol;
}

// ---------------------------------------------------------------------------
// dataset split
// ---------------------------------------------------------------------------

struct SplitCase {
    std::string case_id;
    uint64_t case_seed = 0;
    std::string split;
};

/// Deterministic case list: sequential ids, per-case seeds derived from the
/// dataset seed, first n_train cases train, then n_val val, then n_test test.
inline std::vector<SplitCase> make_split(int64_t n_train, int64_t n_val, int64_t n_test,
                                         uint64_t seed) {
    check<ValueError>(n_train >= 0 && n_val >= 0 && n_test >= 0 && n_train + n_val + n_test > 0,
                      "make_split: bad case counts");
    std::vector<SplitCase> cases;
    const int64_t total = n_train + n_val + n_test;
    for (int64_t i = 0; i < total; ++i) {
        SplitCase c;
        char buf[16];
        std::snprintf(buf, sizeof(buf), "case_%04d", static_cast<int>(i));
        c.case_id = buf;
        c.case_seed = Rng::stream(seed, 0xca5e5eedull, static_cast<uint64_t>(i)).next_u64();
        c.split = i < n_train ? "train" : (i < n_train + n_val ? "val" : "test");
        cases.push_back(std::move(c));
    }
    return cases;
}

// ---------------------------------------------------------------------------
// pure-data transforms (no autodiff involved)
// ---------------------------------------------------------------------------

/// In-place per-volume normalisation to zero mean / unit variance
/// (population variance; sigma floored at 1e-8 to stay finite on constants).
inline void normalize_volume(std::vector<float>& intensity) {
    check<ValueError>(!intensity.empty(), "normalize_volume: empty volume");
    double mean = 0.0;
    for (float v : intensity) mean += v;
    mean /= static_cast<double>(intensity.size());
    double var = 0.0;
    for (float v : intensity) {
        const double z = v - mean;
        var += z * z;
    }
    var /= static_cast<double>(intensity.size());
    const double inv = 1.0 / std::max(std::sqrt(var), 1e-8);
    for (float& v : intensity) v = static_cast<float>((v - mean) * inv);
}

/// Mirrors a [D, H, W] grid along any subset of its axes.
template <typename T>
std::vector<T> flip_grid(const std::vector<T>& in, int64_t d, int64_t h, int64_t w, bool flip_d,
                         bool flip_h, bool flip_w) {
    check<ValueError>(static_cast<int64_t>(in.size()) == d * h * w, "flip_grid: size mismatch");
    std::vector<T> out(in.size());
    for (int64_t z = 0; z < d; ++z) {
        const int64_t sz = flip_d ? d - 1 - z : z;
        for (int64_t y = 0; y < h; ++y) {
            const int64_t sy = flip_h ? h - 1 - y : y;
            for (int64_t x = 0; x < w; ++x) {
                const int64_t sx = flip_w ? w - 1 - x : x;
                out[static_cast<size_t>((z * h + y) * w + x)] =
                    in[static_cast<size_t>((sz * h + sy) * w + sx)];
            }
        }
    }
    return out;
}

/// Training-time augmentation: random axis mirroring (intensity and labels
/// together) plus additive Gaussian intensity noise.  Deterministic given rng.
inline void augment_volume(LabeledVolume& vol, Rng& rng, double noise_sigma) {
    const bool fd = rng.next_bool(), fh = rng.next_bool(), fw = rng.next_bool();
    if (fd || fh || fw) {
        vol.intensity = flip_grid(vol.intensity, vol.d, vol.h, vol.w, fd, fh, fw);
        vol.labels = flip_grid(vol.labels, vol.d, vol.h, vol.w, fd, fh, fw);
    }
    if (noise_sigma > 0.0)
        for (float& v : vol.intensity)
            v += static_cast<float>(noise_sigma * rng.next_normal());
}

} // namespace volseg
