#include "bpim/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <map>

namespace bpim::checkpoint {

namespace {

constexpr char kMagic[8] = {'B', 'P', 'I', 'M', 'C', 'K', 'P', 'T'};

template <class T>
void put(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw std::runtime_error("checkpoint: truncated file");
    return v;
}

std::string get_string(std::istream& is, std::uint64_t n) {
    if (n > (1ull << 32)) throw std::runtime_error("checkpoint: implausible string length");
    std::string s(n, '\0');
    is.read(s.data(), static_cast<std::streamsize>(n));
    if (!is) throw std::runtime_error("checkpoint: truncated file");
    return s;
}

}  // namespace

void save(const std::filesystem::path& path, const nlohmann::json& meta, const nn::Module& m) {
    std::vector<std::pair<std::string, const Tensor*>> entries;
    const auto params = m.named_parameters();
    for (const auto& [name, v] : params) entries.emplace_back(name, &v.value());
    for (const auto& [name, t] : m.named_buffers()) entries.emplace_back(name, t);

    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("checkpoint: cannot write " + path.string());
    os.write(kMagic, sizeof(kMagic));
    put<std::uint32_t>(os, kVersion);
    const std::string text = meta.dump();
    put<std::uint64_t>(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    put<std::uint64_t>(os, entries.size());
    for (const auto& [name, t] : entries) {
        put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        put<std::uint32_t>(os, static_cast<std::uint32_t>(t->rank()));
        for (auto d : t->shape()) put<std::int64_t>(os, d);
        os.write(reinterpret_cast<const char*>(t->ptr()), static_cast<std::streamsize>(t->numel() * sizeof(double)));
    }
    if (!os) throw std::runtime_error("checkpoint: write failed for " + path.string());
}

Checkpoint read(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open " + path.string());
    char magic[sizeof(kMagic)];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw std::runtime_error("checkpoint: " + path.string() + " is not a checkpoint");
    const auto version = get<std::uint32_t>(is);
    if (version != kVersion) throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
    Checkpoint c;
    c.meta = nlohmann::json::parse(get_string(is, get<std::uint64_t>(is)));
    const auto count = get<std::uint64_t>(is);
    for (std::uint64_t i = 0; i < count; ++i) {
        std::string name = get_string(is, get<std::uint32_t>(is));
        const auto rank = get<std::uint32_t>(is);
        if (rank > 8) throw std::runtime_error("checkpoint: bad rank for " + name);
        Shape shape;
        for (std::uint32_t r = 0; r < rank; ++r) shape.push_back(get<std::int64_t>(is));
        Tensor t(shape);
        is.read(reinterpret_cast<char*>(t.ptr()), static_cast<std::streamsize>(t.numel() * sizeof(double)));
        if (!is) throw std::runtime_error("checkpoint: truncated tensor " + name);
        c.tensors.emplace_back(std::move(name), std::move(t));
    }
    return c;
}

void load_into(const Checkpoint& ckpt, nn::Module& m) {
    std::map<std::string, const Tensor*> byname;
    for (const auto& [name, t] : ckpt.tensors) byname.emplace(name, &t);
    auto fetch = [&](const std::string& name, const Shape& shape) -> const Tensor& {
        auto it = byname.find(name);
        if (it == byname.end()) throw std::runtime_error("checkpoint: missing tensor " + name);
        if (it->second->shape() != shape)
            throw std::runtime_error("checkpoint: shape mismatch for " + name + ": " + shape_str(it->second->shape()) +
                                     " vs " + shape_str(shape));
        return *it->second;
    };
    for (auto& [name, v] : m.named_parameters()) {
        Var dst = v;
        dst.mutable_value() = fetch(name, v.shape());
    }
    for (auto& [name, t] : m.named_buffers()) *t = fetch(name, t->shape());
}

}  // namespace bpim::checkpoint
