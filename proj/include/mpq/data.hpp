#pragma once

#include <fstream>
#include <random>

#include "mpq/tensor.hpp"

namespace mpq {

struct Dataset {
    int channels = 1, height = 0, width = 0;
    std::vector<float> images;  // [n, channels, height, width], values in [0,1]
    std::vector<int> labels;
    int classes = 0;

    std::size_t size() const { return labels.size(); }
    std::size_t image_numel() const {
        return static_cast<std::size_t>(channels) * height * width;
    }

    TensorPtr batch(std::size_t start, std::size_t count) const {
        count = std::min(count, size() - start);
        auto t = make_tensor({static_cast<int>(count), channels, height, width});
        std::copy_n(images.begin() + start * image_numel(), count * image_numel(),
                    t->v.begin());
        return t;
    }

    std::vector<int> batch_labels(std::size_t start, std::size_t count) const {
        count = std::min(count, size() - start);
        return {labels.begin() + start, labels.begin() + start + count};
    }
};

// ---------------------------------------------------------------------------
// MNIST IDX format (big-endian magic + dims, then raw bytes)
// ---------------------------------------------------------------------------

namespace detail {

inline uint32_t read_be32(std::istream& in, const char* what) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4))
        throw std::runtime_error(std::string("idx: truncated file while reading ") + what);
    return (uint32_t(b[0]) << 24) | (uint32_t(b[1]) << 16) | (uint32_t(b[2]) << 8) | b[3];
}

}  // namespace detail

// Parses an IDX image file (magic 0x00000803) and a label file (0x00000801).
// Pixel bytes are scaled to [0,1].
inline Dataset load_mnist_idx(const std::string& images_path, const std::string& labels_path) {
    std::ifstream img(images_path, std::ios::binary);
    if (!img) throw std::runtime_error("idx: cannot open " + images_path);
    uint32_t magic = detail::read_be32(img, "image magic");
    if (magic != 0x00000803)
        throw std::runtime_error("idx: bad image magic in " + images_path + ": expected 0x803, found 0x" +
                                 [&] { std::ostringstream o; o << std::hex << magic; return o.str(); }());
    uint32_t n = detail::read_be32(img, "image count");
    uint32_t rows = detail::read_be32(img, "rows");
    uint32_t cols = detail::read_be32(img, "cols");
    std::vector<unsigned char> raw(static_cast<std::size_t>(n) * rows * cols);
    if (!img.read(reinterpret_cast<char*>(raw.data()), raw.size()))
        throw std::runtime_error("idx: truncated image payload in " + images_path);

    std::ifstream lab(labels_path, std::ios::binary);
    if (!lab) throw std::runtime_error("idx: cannot open " + labels_path);
    uint32_t lmagic = detail::read_be32(lab, "label magic");
    if (lmagic != 0x00000801)
        throw std::runtime_error("idx: bad label magic in " + labels_path + ": expected 0x801, found 0x" +
                                 [&] { std::ostringstream o; o << std::hex << lmagic; return o.str(); }());
    uint32_t ln = detail::read_be32(lab, "label count");
    if (ln != n) throw std::runtime_error("idx: image/label count mismatch");
    std::vector<unsigned char> lraw(ln);
    if (!lab.read(reinterpret_cast<char*>(lraw.data()), lraw.size()))
        throw std::runtime_error("idx: truncated label payload in " + labels_path);

    Dataset ds;
    ds.channels = 1;
    ds.height = static_cast<int>(rows);
    ds.width = static_cast<int>(cols);
    ds.classes = 10;
    ds.images.resize(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i) ds.images[i] = raw[i] / 255.f;
    ds.labels.assign(lraw.begin(), lraw.end());
    return ds;
}

inline void write_idx_images(const std::string& path, const std::vector<unsigned char>& pixels,
                             int n, int rows, int cols) {
    std::ofstream out(path, std::ios::binary);
    auto be32 = [&](uint32_t v) {
        unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
        out.write(reinterpret_cast<char*>(b), 4);
    };
    be32(0x00000803);
    be32(n);
    be32(rows);
    be32(cols);
    out.write(reinterpret_cast<const char*>(pixels.data()), pixels.size());
}

inline void write_idx_labels(const std::string& path, const std::vector<unsigned char>& labels) {
    std::ofstream out(path, std::ios::binary);
    auto be32 = [&](uint32_t v) {
        unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
        out.write(reinterpret_cast<char*>(b), 4);
    };
    be32(0x00000801);
    be32(static_cast<uint32_t>(labels.size()));
    out.write(reinterpret_cast<const char*>(labels.data()), labels.size());
}

// ---------------------------------------------------------------------------
// Synthetic Gaussian-cluster image classification: per-class random
// prototype image plus noise, clipped to [0,1]. Difficulty is controlled by
// the prototype contrast and the noise level.
// ---------------------------------------------------------------------------

struct SyntheticConfig {
    int classes = 10;
    int samples = 2048;
    int height = 8, width = 8;
    float contrast = 0.35f;  // prototype amplitude around 0.5
    float noise = 0.55f;
    unsigned seed = 1234;
};

inline Dataset make_synthetic(const SyntheticConfig& cfg) {
    std::mt19937 rng(cfg.seed);
    std::normal_distribution<float> gauss(0.f, 1.f);
    std::uniform_int_distribution<int> pick(0, cfg.classes - 1);
    std::size_t numel = static_cast<std::size_t>(cfg.height) * cfg.width;
    std::vector<std::vector<float>> protos(cfg.classes, std::vector<float>(numel));
    for (auto& p : protos)
        for (auto& x : p) x = 0.5f + cfg.contrast * gauss(rng);
    Dataset ds;
    ds.channels = 1;
    ds.height = cfg.height;
    ds.width = cfg.width;
    ds.classes = cfg.classes;
    ds.images.reserve(cfg.samples * numel);
    for (int i = 0; i < cfg.samples; ++i) {
        int c = pick(rng);
        ds.labels.push_back(c);
        for (std::size_t j = 0; j < numel; ++j) {
            float v = protos[c][j] + cfg.noise * gauss(rng);
            ds.images.push_back(std::clamp(v, 0.f, 1.f));
        }
    }
    return ds;
}

}  // namespace mpq
