#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "msn/tensor.hpp"

namespace msn {

// Named tensors with trainable/frozen flags. Iteration order is the sorted
// name order, so checksums and checkpoints are reproducible.
template <typename T>
class ParameterStore {
public:
    struct Entry {
        Tensor<T> tensor;
        bool trainable = true;
    };

    void add(const std::string& name, Tensor<T> t, bool trainable = true) {
        if (entries_.count(name)) throw std::invalid_argument("ParameterStore: duplicate name " + name);
        entries_[name] = Entry{std::move(t), trainable};
    }

    bool has(const std::string& name) const { return entries_.count(name) != 0; }

    Tensor<T>& tensor(const std::string& name) { return at(name).tensor; }
    const Tensor<T>& tensor(const std::string& name) const { return at(name).tensor; }

    bool trainable(const std::string& name) const { return at(name).trainable; }
    void set_trainable(const std::string& name, bool v) { at(name).trainable = v; }

    void freeze_all() {
        for (auto& [k, e] : entries_) e.trainable = false;
    }
    void unfreeze_all() {
        for (auto& [k, e] : entries_) e.trainable = true;
    }

    bool any_trainable() const {
        for (const auto& [k, e] : entries_)
            if (e.trainable) return true;
        return false;
    }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        out.reserve(entries_.size());
        for (const auto& [k, e] : entries_) out.push_back(k);
        return out;
    }

    std::size_t total_elements() const {
        std::size_t n = 0;
        for (const auto& [k, e] : entries_) n += e.tensor.size();
        return n;
    }

    auto begin() { return entries_.begin(); }
    auto end() { return entries_.end(); }
    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }
    std::size_t size() const { return entries_.size(); }

    // FNV-1a over the float32 serialization of the named tensor.
    std::uint64_t checksum(const std::string& name) const {
        return fnv1a(to_f32(at(name).tensor));
    }

    // Combined checksum over all frozen tensors, in name order.
    std::uint64_t frozen_checksum() const {
        std::uint64_t h = kFnvOffset;
        for (const auto& [k, e] : entries_) {
            if (e.trainable) continue;
            h ^= fnv1a(to_f32(e.tensor));
            h *= kFnvPrime;
        }
        return h;
    }

    std::uint64_t full_checksum() const {
        std::uint64_t h = kFnvOffset;
        for (const auto& [k, e] : entries_) {
            h ^= fnv1a(to_f32(e.tensor));
            h *= kFnvPrime;
        }
        return h;
    }

    // Checkpoint: one raw little-endian float32 binary per tensor + manifest.json.
    void save(const std::filesystem::path& dir) const {
        std::filesystem::create_directories(dir);
        nlohmann::json manifest;
        for (const auto& [name, e] : entries_) {
            const auto bytes = to_f32(e.tensor);
            const auto file = sanitize(name) + ".bin";
            std::ofstream os(dir / file, std::ios::binary);
            if (!os) throw std::runtime_error("ParameterStore::save: cannot write " + (dir / file).string());
            os.write(reinterpret_cast<const char*>(bytes.data()),
                     static_cast<std::streamsize>(bytes.size()));
            manifest[name] = {{"file", file},
                              {"shape", e.tensor.shape()},
                              {"dtype", "float32"},
                              {"trainable", e.trainable},
                              {"checksum", fnv1a(bytes)}};
        }
        std::ofstream os(dir / "manifest.json");
        os << manifest.dump(2) << "\n";
    }

    static ParameterStore load(const std::filesystem::path& dir) {
        std::ifstream is(dir / "manifest.json");
        if (!is) throw std::runtime_error("ParameterStore::load: missing manifest in " + dir.string());
        nlohmann::json manifest = nlohmann::json::parse(is);
        ParameterStore store;
        for (auto& [name, meta] : manifest.items()) {
            std::vector<int> shape = meta.at("shape").template get<std::vector<int>>();
            const std::size_t n = Tensor<T>::count(shape);
            std::vector<std::uint8_t> bytes(n * 4);
            std::ifstream bin(dir / meta.at("file").template get<std::string>(), std::ios::binary);
            if (!bin) throw std::runtime_error("ParameterStore::load: missing tensor file for " + name);
            bin.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
            if (static_cast<std::size_t>(bin.gcount()) != bytes.size())
                throw std::runtime_error("ParameterStore::load: truncated tensor " + name);
            if (fnv1a(bytes) != meta.at("checksum").template get<std::uint64_t>())
                throw std::runtime_error("ParameterStore::load: checksum mismatch for " + name);
            Tensor<T> t(shape);
            for (std::size_t i = 0; i < n; ++i) {
                float f;
                std::memcpy(&f, bytes.data() + i * 4, 4);
                t[i] = static_cast<T>(f);
            }
            store.add(name, std::move(t), meta.at("trainable").template get<bool>());
        }
        return store;
    }

    static std::uint64_t fnv1a(const std::vector<std::uint8_t>& bytes) {
        std::uint64_t h = kFnvOffset;
        for (std::uint8_t b : bytes) {
            h ^= b;
            h *= kFnvPrime;
        }
        return h;
    }

private:
    static constexpr std::uint64_t kFnvOffset = 14695981039346656037ull;
    static constexpr std::uint64_t kFnvPrime = 1099511628211ull;

    std::map<std::string, Entry> entries_;

    Entry& at(const std::string& name) {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw std::out_of_range("ParameterStore: unknown tensor " + name);
        return it->second;
    }
    const Entry& at(const std::string& name) const {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw std::out_of_range("ParameterStore: unknown tensor " + name);
        return it->second;
    }

    static std::vector<std::uint8_t> to_f32(const Tensor<T>& t) {
        std::vector<std::uint8_t> out(t.size() * 4);
        for (std::size_t i = 0; i < t.size(); ++i) {
            const float f = static_cast<float>(t[i]);
            std::memcpy(out.data() + i * 4, &f, 4);
        }
        return out;
    }

    static std::string sanitize(std::string name) {
        for (auto& c : name)
            if (c == '/' || c == ':' || c == ' ') c = '_';
        return name;
    }
};

}  // namespace msn
