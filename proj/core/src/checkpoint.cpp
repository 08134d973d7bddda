#include "yolomed/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <map>
#include <set>

namespace yolomed {

namespace {

constexpr char kMagic[8] = {'Y', 'M', 'E', 'D', 'C', 'K', 'P', '1'};

void write_u64(std::ostream& out, uint64_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
uint64_t read_u64(std::istream& in) {
    uint64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    return v;
}
void write_string(std::ostream& out, const std::string& s) {
    write_u64(out, s.size());
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}
std::string read_string(std::istream& in) {
    const uint64_t n = read_u64(in);
    std::string s(n, '\0');
    in.read(s.data(), static_cast<std::streamsize>(n));
    return s;
}
void write_tensor(std::ostream& out, const ag::Tensor& t) {
    write_u64(out, static_cast<uint64_t>(t.ndim()));
    for (long d : t.shape()) write_u64(out, static_cast<uint64_t>(d));
    out.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(t.numel() * sizeof(double)));
}
ag::Tensor read_tensor(std::istream& in) {
    const uint64_t nd = read_u64(in);
    std::vector<long> shape(nd);
    for (auto& d : shape) d = static_cast<long>(read_u64(in));
    ag::Tensor t(shape);
    in.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(t.numel() * sizeof(double)));
    return t;
}

}  // namespace

void save_checkpoint(const YoloMedNet& net, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
    out.write(kMagic, sizeof(kMagic));
    write_string(out, net.config().to_json());

    auto params = net.parameters();
    std::vector<nn::NamedBuffer> buffers;
    net.named_buffers("", buffers);
    write_u64(out, params.size());
    for (const auto& p : params) {
        write_string(out, p.name);
        write_tensor(out, p.var->value);
    }
    write_u64(out, buffers.size());
    for (const auto& b : buffers) {
        write_string(out, b.name);
        write_tensor(out, *b.tensor);
    }
    if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

CheckpointContents read_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("read_checkpoint: cannot open " + path);
    char magic[8];
    in.read(magic, sizeof(magic));
    if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw std::runtime_error("read_checkpoint: bad magic in " + path);
    CheckpointContents c;
    c.config = ModelConfig::from_json(read_string(in));
    const uint64_t np = read_u64(in);
    for (uint64_t i = 0; i < np; ++i) {
        std::string name = read_string(in);
        c.params.emplace_back(std::move(name), read_tensor(in));
    }
    const uint64_t nb = read_u64(in);
    for (uint64_t i = 0; i < nb; ++i) {
        std::string name = read_string(in);
        c.buffers.emplace_back(std::move(name), read_tensor(in));
    }
    if (!in) throw std::runtime_error("read_checkpoint: truncated file " + path);
    return c;
}

std::unique_ptr<YoloMedNet> load_checkpoint(const std::string& path) {
    CheckpointContents c = read_checkpoint(path);
    auto net = std::make_unique<YoloMedNet>(c.config);

    std::map<std::string, ag::Tensor*> file_params, file_buffers;
    for (auto& [name, t] : c.params) file_params[name] = &t;
    for (auto& [name, t] : c.buffers) file_buffers[name] = &t;

    std::vector<std::string> mismatched;
    for (auto& p : net->parameters()) {
        auto it = file_params.find(p.name);
        if (it == file_params.end() || !it->second->same_shape(p.var->value)) {
            mismatched.push_back(p.name);
            continue;
        }
        p.var->value = *it->second;
        file_params.erase(it);
    }
    std::vector<nn::NamedBuffer> buffers;
    net->named_buffers("", buffers);
    for (auto& b : buffers) {
        auto it = file_buffers.find(b.name);
        if (it == file_buffers.end() || !it->second->same_shape(*b.tensor)) {
            mismatched.push_back(b.name);
            continue;
        }
        *b.tensor = *it->second;
        file_buffers.erase(it);
    }
    for (const auto& [name, t] : file_params) mismatched.push_back(name + " (extra)");
    for (const auto& [name, t] : file_buffers) mismatched.push_back(name + " (extra)");
    if (!mismatched.empty()) {
        std::string msg = "load_checkpoint: architecture/config mismatch for parameters:";
        for (const auto& n : mismatched) msg += " " + n;
        throw std::runtime_error(msg);
    }
    return net;
}

ImportReport import_pretrained(YoloMedNet& net, const std::string& path) {
    CheckpointContents c = read_checkpoint(path);
    std::map<std::string, ag::Tensor*> file_params;
    for (auto& [name, t] : c.params) file_params[name] = &t;
    for (auto& [name, t] : c.buffers) file_params[name] = &t;

    ImportReport report;
    std::set<std::string> consumed;
    auto try_import = [&](const std::string& name, ag::Tensor& dst) {
        auto it = file_params.find(name);
        if (it != file_params.end() && it->second->same_shape(dst)) {
            dst = *it->second;
            report.matched.push_back(name);
            consumed.insert(name);
        } else {
            report.unmatched_in_model.push_back(name);
        }
    };
    for (auto& p : net.parameters()) try_import(p.name, p.var->value);
    std::vector<nn::NamedBuffer> buffers;
    net.named_buffers("", buffers);
    for (auto& b : buffers) try_import(b.name, *b.tensor);
    for (const auto& [name, t] : file_params)
        if (!consumed.count(name)) report.unmatched_in_file.push_back(name);
    return report;
}

}  // namespace yolomed
