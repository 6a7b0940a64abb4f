#pragma once

// Binary checkpoint, little-endian:
//
//   magic     8 bytes "GEDCKPT\0"
//   version   u32
//   header    u64 length + key = value text (configs, step, RNG states, hash)
//   sections  u32 count, then per section:
//               u32 name length, name, u32 tensor count, then per tensor:
//                 u32 name length, name, u32 rank, i32 dims[rank], u64 numel, f32 data[numel]
//
// Sections: params, ema, adam.m, adam.v.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "gridedit/trainer.hpp"

namespace gridedit {

inline constexpr char kCheckpointMagic[8] = {'G', 'E', 'D', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointTensor {
    std::string name;
    ag::Shape shape;
    std::vector<float> data;
};

struct CheckpointSection {
    std::string name;
    std::vector<CheckpointTensor> tensors;
};

struct CheckpointFile {
    KvMap header;
    std::vector<CheckpointSection> sections;

    const CheckpointSection* find(const std::string& name) const {
        for (const auto& s : sections)
            if (s.name == name) return &s;
        return nullptr;
    }
};

namespace detail {

template <class T>
void put(std::string& out, T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T));
}

inline void put_str(std::string& out, const std::string& s) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
    out += s;
}

class Reader {
public:
    Reader(const std::string& data, std::string source) : d_(data), src_(std::move(source)) {}

    template <class T>
    T get() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, d_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }

    std::string bytes(std::size_t n) {
        need(n);
        std::string s = d_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    std::string str() { return bytes(get<std::uint32_t>()); }
    bool done() const { return pos_ == d_.size(); }

private:
    void need(std::size_t n) const {
        if (pos_ + n > d_.size()) throw IoError(src_ + ": truncated checkpoint");
    }
    const std::string& d_;
    std::string src_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const CheckpointFile& f) {
    std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
    detail::put<std::uint32_t>(out, kCheckpointVersion);
    const std::string header = dump_kv(f.header);
    detail::put<std::uint64_t>(out, header.size());
    out += header;
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(f.sections.size()));
    for (const auto& s : f.sections) {
        detail::put_str(out, s.name);
        detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(s.tensors.size()));
        for (const auto& t : s.tensors) {
            detail::put_str(out, t.name);
            detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
            for (int d : t.shape) detail::put<std::int32_t>(out, d);
            detail::put<std::uint64_t>(out, t.data.size());
            out.append(reinterpret_cast<const char*>(t.data.data()), t.data.size() * sizeof(float));
        }
    }
    return out;
}

inline CheckpointFile parse_checkpoint(const std::string& bytes, const std::string& source) {
    detail::Reader r(bytes, source);
    if (r.bytes(sizeof kCheckpointMagic) != std::string(kCheckpointMagic, sizeof kCheckpointMagic))
        throw VersionError(source + ": not a gridedit checkpoint");
    const auto version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion)
        throw VersionError(source + ": checkpoint version " + std::to_string(version) + " unsupported (expected " +
                           std::to_string(kCheckpointVersion) + ")");
    CheckpointFile f;
    f.header        = parse_kv(r.bytes(r.get<std::uint64_t>()), source);
    const auto nsec = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < nsec; ++i) {
        CheckpointSection s;
        s.name           = r.str();
        const auto count = r.get<std::uint32_t>();
        for (std::uint32_t j = 0; j < count; ++j) {
            CheckpointTensor t;
            t.name          = r.str();
            const auto rank = r.get<std::uint32_t>();
            for (std::uint32_t k = 0; k < rank; ++k) t.shape.push_back(r.get<std::int32_t>());
            const auto n = r.get<std::uint64_t>();
            if (n != ag::numel(t.shape)) throw IoError(source + ": tensor " + t.name + " size does not match shape");
            const std::string raw = r.bytes(n * sizeof(float));
            t.data.resize(n);
            std::memcpy(t.data.data(), raw.data(), raw.size());
            s.tensors.push_back(std::move(t));
        }
        f.sections.push_back(std::move(s));
    }
    if (!r.done()) throw IoError(source + ": trailing bytes after checkpoint");
    return f;
}

inline std::string read_binary(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

inline std::uint64_t file_hash(const std::filesystem::path& path) { return fnv1a(read_binary(path)); }

namespace detail {

inline CheckpointSection pack(const std::string& name, const nn::ParamStore<float>& ps,
                              const std::vector<std::vector<float>>* values = nullptr) {
    CheckpointSection s{name, {}};
    std::size_t i = 0;
    for (const auto& [pname, p] : ps.items()) {
        s.tensors.push_back({pname, p.shape(),
                             values ? (*values)[i] : std::vector<float>(p.value().begin(), p.value().end())});
        ++i;
    }
    return s;
}

// Unpacks into `out`, one vector per parameter, checking names and shapes.
inline std::vector<std::vector<float>> unpack(const CheckpointFile& f, const std::string& name,
                                              const nn::ParamStore<float>& ps, const std::string& source) {
    const auto* s = f.find(name);
    if (!s) throw VersionError(source + ": checkpoint lacks section '" + name + "'");
    if (s->tensors.size() != ps.items().size())
        throw VersionError(source + ": section '" + name + "' has " + std::to_string(s->tensors.size()) +
                           " tensors, model expects " + std::to_string(ps.items().size()));
    std::vector<std::vector<float>> out;
    for (std::size_t i = 0; i < s->tensors.size(); ++i) {
        const auto& t             = s->tensors[i];
        const auto& [pname, p]    = ps.items()[i];
        if (t.name != pname || t.shape != p.shape())
            throw VersionError(source + ": tensor " + t.name + " " + ag::shape_str(t.shape) +
                               " does not match model parameter " + pname + " " + ag::shape_str(p.shape()));
        out.push_back(t.data);
    }
    return out;
}

inline std::uint64_t header_u64(const KvMap& h, const std::string& key, const std::string& source) {
    auto it = h.find(key);
    if (it == h.end()) throw VersionError(source + ": checkpoint header lacks '" + key + "'");
    return kv_u64(key, it->second);
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, Trainer& tr) {
    CheckpointFile f;
    f.header                 = tr.model().config().to_kv();
    for (const auto& [k, v] : tr.config().to_kv()) f.header[k] = v;
    f.header["state.step"]        = std::to_string(tr.step());
    f.header["state.adam_steps"]  = std::to_string(tr.optimizer().steps());
    f.header["state.ema_updates"] = std::to_string(tr.ema().updates());
    f.header["state.rng.noise"]   = rng_state(tr.noise_rng());
    f.header["state.rng.dropout"] = rng_state(tr.dropout_rng());
    f.header["state.config_hash"] = hex64(tr.model().config().hash());
    const auto& ps = tr.model().params();
    f.sections.push_back(detail::pack("params", ps));
    f.sections.push_back(detail::pack("ema", ps, &tr.ema().shadow()));
    f.sections.push_back(detail::pack("adam.m", ps, &tr.optimizer().first_moments()));
    f.sections.push_back(detail::pack("adam.v", ps, &tr.optimizer().second_moments()));
    const std::string bytes = serialize_checkpoint(f);
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw IoError("failed writing " + path.string());
}

struct LoadedConfigs {
    ModelConfig model;
    TrainConfig train;
};

inline LoadedConfigs checkpoint_configs(const CheckpointFile& f, const std::string& source) {
    LoadedConfigs c;
    KvMap model_kv;
    for (const auto& [k, v] : f.header) {
        if (k.rfind("state.", 0) == 0) continue;
        if (c.train.apply(k, v)) continue;
        if (!c.model.apply(k, v)) throw VersionError(source + ": unknown checkpoint header key '" + k + "'");
    }
    try {
        c.model.validate();
    } catch (const ConfigError& e) {
        throw VersionError(source + ": " + e.what());
    }
    auto it = f.header.find("state.config_hash");
    if (it == f.header.end() || it->second != hex64(c.model.hash()))
        throw VersionError(source + ": model configuration hash mismatch");
    return c;
}

// Restores a trainer, including optimizer, EMA and RNG state.
inline std::unique_ptr<Trainer> load_checkpoint(const std::filesystem::path& path) {
    const std::string src = path.string();
    const auto f          = parse_checkpoint(read_binary(path), src);
    const auto cfgs       = checkpoint_configs(f, src);
    ModelConfig base      = cfgs.model;
    auto tr               = std::make_unique<Trainer>(base, cfgs.train);
    if (tr->model().config().hash() != cfgs.model.hash())
        throw VersionError(src + ": checkpoint model configuration is inconsistent with its ablation flags");
    auto& ps          = tr->model().params();
    const auto params = detail::unpack(f, "params", ps, src);
    for (std::size_t i = 0; i < params.size(); ++i) ps.items()[i].second.mutable_value().assign(params[i].begin(), params[i].end());
    tr->ema().shadow()                = detail::unpack(f, "ema", ps, src);
    tr->optimizer().first_moments()  = detail::unpack(f, "adam.m", ps, src);
    tr->optimizer().second_moments() = detail::unpack(f, "adam.v", ps, src);
    tr->set_step(static_cast<long>(detail::header_u64(f.header, "state.step", src)));
    tr->optimizer().set_steps(static_cast<long long>(detail::header_u64(f.header, "state.adam_steps", src)));
    tr->ema().set_updates(static_cast<long long>(detail::header_u64(f.header, "state.ema_updates", src)));
    try {
        set_rng_state(tr->noise_rng(), f.header.at("state.rng.noise"));
        set_rng_state(tr->dropout_rng(), f.header.at("state.rng.dropout"));
    } catch (const std::out_of_range&) {
        throw VersionError(src + ": checkpoint header lacks RNG state");
    }
    return tr;
}

}  // namespace gridedit
