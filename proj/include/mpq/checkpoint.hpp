#pragma once

#include <fstream>
#include <random>

#include "mpq/config.hpp"
#include "mpq/optim.hpp"

namespace mpq {

// Checkpoint layout: one JSON header line (version, topology hash, tensor
// manifest with offsets, blob checksum, rng state, step counter) followed by
// a raw little-endian float32 blob. Save -> load -> save is byte-identical.

inline constexpr int kCheckpointVersion = 1;

namespace detail {

inline uint64_t fnv1a(const unsigned char* data, std::size_t n) {
    uint64_t h = 1469598103934665603ull;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= data[i];
        h *= 1099511628211ull;
    }
    return h;
}

struct NamedBuffer {
    std::string name;
    std::vector<float>* data;
};

// Every mutable float buffer that defines the training state, in a fixed
// order: parameters, bn running stats, then optimizer momentum.
inline std::vector<NamedBuffer> state_buffers(Supernet& net, SgdOptimizer* opt) {
    std::vector<NamedBuffer> bufs;
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
        auto& layer = net.layers[l];
        std::string p = "layer" + std::to_string(l) + ".";
        bufs.push_back({p + "weight", &layer.weight->v});
        bufs.push_back({p + "bias", &layer.bias->v});
        for (auto& [b, q] : layer.wq)
            bufs.push_back({p + "wscale" + std::to_string(b), &q.scale->v});
        for (auto& [b, q] : layer.aq)
            bufs.push_back({p + "ascale" + std::to_string(b), &q.scale->v});
        if (layer.cfg.has_bn) {
            bufs.push_back({p + "bn.gamma", &layer.bn.gamma->v});
            bufs.push_back({p + "bn.beta", &layer.bn.beta->v});
            bufs.push_back({p + "bn.mean", &layer.bn.running_mean});
            bufs.push_back({p + "bn.var", &layer.bn.running_var});
        }
        if (layer.idm.gain_s) {
            bufs.push_back({p + "idm.gain_s", &layer.idm.gain_s->v});
            bufs.push_back({p + "idm.shift_s", &layer.idm.shift_s->v});
            bufs.push_back({p + "idm.gain_h", &layer.idm.gain_h->v});
            bufs.push_back({p + "idm.shift_h", &layer.idm.shift_h->v});
        }
    }
    if (opt) {
        int i = 0;
        for (const auto& param : opt->params())
            bufs.push_back({"momentum" + std::to_string(i++), &opt->buffer(param.get())});
    }
    return bufs;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, Supernet& net, SgdOptimizer* opt,
                            long step, const std::string& rng_state,
                            const FreezeMask* mask = nullptr) {
    auto bufs = detail::state_buffers(net, opt);
    std::vector<float> blob;
    json manifest = json::array();
    for (auto& b : bufs) {
        manifest.push_back({{"name", b.name}, {"offset", blob.size()}, {"size", b.data->size()}});
        blob.insert(blob.end(), b.data->begin(), b.data->end());
    }
    json header;
    header["version"] = kCheckpointVersion;
    header["topology_hash"] = topology_hash(net.topo);
    header["bit_candidates"] = net.bit_candidates;
    header["step"] = step;
    header["rng"] = rng_state;
    header["tensors"] = manifest;
    if (mask) {
        json fj = json::array();
        for (const auto& e : mask->entries())
            fj.push_back({{"layer", e.layer}, {"bit", e.bit}, {"expiry", e.expiry}});
        header["freeze_mask"] = fj;
    }
    header["checksum"] =
        detail::fnv1a(reinterpret_cast<const unsigned char*>(blob.data()), blob.size() * 4);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("checkpoint: cannot write " + path);
    out << header.dump() << "\n";
    out.write(reinterpret_cast<const char*>(blob.data()),
              static_cast<std::streamsize>(blob.size() * 4));
}

struct LoadedCheckpoint {
    long step = 0;
    std::string rng_state;
    FreezeMask mask;
};

inline LoadedCheckpoint load_checkpoint(const std::string& path, Supernet& net,
                                        SgdOptimizer* opt) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
    std::string header_line;
    if (!std::getline(in, header_line))
        throw std::runtime_error("checkpoint: missing header in " + path);
    json header;
    try {
        header = json::parse(header_line);
    } catch (const json::exception& e) {
        throw std::runtime_error("checkpoint: corrupt header in " + path + ": " + e.what());
    }
    if (header.at("version").get<int>() != kCheckpointVersion)
        throw std::runtime_error("checkpoint: version mismatch in " + path + " (found " +
                                 std::to_string(header.at("version").get<int>()) + ", expected " +
                                 std::to_string(kCheckpointVersion) + ")");
    if (header.at("topology_hash").get<uint64_t>() != topology_hash(net.topo))
        throw std::runtime_error("checkpoint: topology hash mismatch; refusing to load " + path);
    auto bufs = detail::state_buffers(net, opt);
    std::vector<float> blob;
    std::size_t total = 0;
    for (const auto& t : header.at("tensors")) total += t.at("size").get<std::size_t>();
    blob.resize(total);
    if (!in.read(reinterpret_cast<char*>(blob.data()),
                 static_cast<std::streamsize>(total * 4)))
        throw std::runtime_error("checkpoint: truncated payload in " + path);
    uint64_t sum =
        detail::fnv1a(reinterpret_cast<const unsigned char*>(blob.data()), blob.size() * 4);
    if (sum != header.at("checksum").get<uint64_t>())
        throw std::runtime_error("checkpoint: payload checksum mismatch in " + path);
    const auto& manifest = header.at("tensors");
    if (manifest.size() != bufs.size())
        throw std::runtime_error("checkpoint: tensor manifest does not match model state");
    for (std::size_t i = 0; i < bufs.size(); ++i) {
        const auto& t = manifest[i];
        if (t.at("name").get<std::string>() != bufs[i].name ||
            t.at("size").get<std::size_t>() != bufs[i].data->size())
            throw std::runtime_error("checkpoint: tensor '" + bufs[i].name +
                                     "' does not match the stored manifest");
        std::size_t off = t.at("offset").get<std::size_t>();
        std::copy_n(blob.begin() + off, bufs[i].data->size(), bufs[i].data->begin());
    }
    LoadedCheckpoint lc;
    lc.step = header.at("step").get<long>();
    lc.rng_state = header.value("rng", "");
    if (header.contains("freeze_mask"))
        for (const auto& e : header["freeze_mask"])
            lc.mask.freeze(e.at("layer").get<int>(), e.at("bit").get<int>(),
                           e.at("expiry").get<long>());
    return lc;
}

inline std::string rng_to_string(const std::mt19937& rng) {
    std::ostringstream os;
    os << rng;
    return os.str();
}

inline std::mt19937 rng_from_string(const std::string& s) {
    std::mt19937 rng;
    if (!s.empty()) {
        std::istringstream is(s);
        is >> rng;
    }
    return rng;
}

}  // namespace mpq
