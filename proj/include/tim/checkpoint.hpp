#pragma once

// Checkpoint format: a human-readable text manifest (one tensor per line:
// name, shape, element offset) followed by a `payload` marker and the raw
// little-endian float32 image of every tensor, in manifest order. The
// manifest carries an FNV-1a hash of the payload; the loader verifies it
// and rejects corrupt or mismatched files.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace tim {

inline constexpr const char* kCheckpointMagic = "tim-checkpoint-v1";

template <class R>
uint64_t payload_hash(const std::vector<std::pair<std::string, TensorT<R>*>>& named) {
    std::vector<const TensorT<R>*> ts;
    ts.reserve(named.size());
    for (const auto& [n, t] : named) ts.push_back(t);
    return content_hash(ts);
}

template <class R>
void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, TensorT<R>*>>& named) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("save_checkpoint: cannot open " + path);
    f << kCheckpointMagic << "\n";
    f << "tensors " << named.size() << "\n";
    f << "hash " << payload_hash(named) << "\n";
    long offset = 0;
    for (const auto& [name, t] : named) {
        f << name << " shape";
        for (int d : t->shape) f << ' ' << d;
        f << " offset " << offset << "\n";
        offset += t->numel();
    }
    f << "payload\n";
    for (const auto& [name, t] : named) {
        for (R v : t->data) {
            const float x = static_cast<float>(v);
            f.write(reinterpret_cast<const char*>(&x), sizeof(float));
        }
    }
    if (!f) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

// Loads into the given tensor list; names, order, and shapes must match the
// manifest exactly, and the payload must hash to the manifest value.
template <class R>
void load_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, TensorT<R>*>>& named) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("load_checkpoint: cannot open " + path);
    std::string line;
    if (!std::getline(f, line) || line != kCheckpointMagic)
        throw std::runtime_error("load_checkpoint: bad magic in " + path);

    size_t n_tensors = 0;
    uint64_t stored_hash = 0;
    {
        std::getline(f, line);
        std::istringstream is(line);
        std::string key;
        if (!(is >> key >> n_tensors) || key != "tensors")
            throw std::runtime_error("load_checkpoint: bad tensor count line");
        std::getline(f, line);
        std::istringstream is2(line);
        if (!(is2 >> key >> stored_hash) || key != "hash")
            throw std::runtime_error("load_checkpoint: bad hash line");
    }
    if (n_tensors != named.size())
        throw std::runtime_error("load_checkpoint: tensor count mismatch");

    long expect_offset = 0;
    for (const auto& [name, t] : named) {
        if (!std::getline(f, line)) throw std::runtime_error("load_checkpoint: truncated manifest");
        std::istringstream is(line);
        std::string file_name, key;
        is >> file_name >> key;
        if (file_name != name || key != "shape")
            throw std::runtime_error("load_checkpoint: expected tensor '" + name + "', got '" +
                                     file_name + "'");
        std::vector<int> shape;
        std::string tok;
        long offset = -1;
        while (is >> tok) {
            if (tok == "offset") {
                is >> offset;
                break;
            }
            shape.push_back(std::stoi(tok));
        }
        if (shape != t->shape)
            throw std::runtime_error("load_checkpoint: shape mismatch for '" + name + "'");
        if (offset != expect_offset)
            throw std::runtime_error("load_checkpoint: offset mismatch for '" + name + "'");
        expect_offset += t->numel();
    }
    if (!std::getline(f, line) || line != "payload")
        throw std::runtime_error("load_checkpoint: missing payload marker");

    std::vector<float> buf(static_cast<size_t>(expect_offset));
    f.read(reinterpret_cast<char*>(buf.data()),
           static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (f.gcount() != static_cast<std::streamsize>(buf.size() * sizeof(float)))
        throw std::runtime_error("load_checkpoint: truncated payload in " + path);

    uint64_t h = 0xcbf29ce484222325ull;
    h = fnv1a_bytes(h, buf.data(), buf.size() * sizeof(float));
    if (h != stored_hash)
        throw std::runtime_error("load_checkpoint: payload hash mismatch in " + path);

    size_t pos = 0;
    for (const auto& [name, t] : named)
        for (R& v : t->data) v = static_cast<R>(buf[pos++]);
}

}  // namespace tim
