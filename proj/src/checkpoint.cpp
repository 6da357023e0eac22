#include "ilora/checkpoint.hpp"

#include "ilora/errors.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace ilora {

namespace {

constexpr char kMagic[4] = {'I', 'L', 'R', 'A'};

template <class T>
T to_little(T v) {
    if constexpr (std::endian::native == std::endian::big) {
        char b[sizeof(T)];
        std::memcpy(b, &v, sizeof(T));
        std::reverse(b, b + sizeof(T));
        std::memcpy(&v, b, sizeof(T));
    }
    return v;
}

template <class T>
void put(std::string& out, T v) {
    v = to_little(v);
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T));
}

void put_double(std::string& out, double d) { put(out, std::bit_cast<std::uint64_t>(d)); }
void put_float(std::string& out, float f) { put(out, std::bit_cast<std::uint32_t>(f)); }

class Reader {
public:
    explicit Reader(const std::string& b) : bytes_(b) {}

    template <class T>
    T get() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        v = to_little(v);
        return v;
    }
    std::string get_string(std::size_t n) {
        need(n);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == bytes_.size(); }

private:
    void need(std::size_t n) const {
        if (bytes_.size() - pos_ < n) throw ConfigError("checkpoint: truncated file");
    }
    const std::string& bytes_;
    std::size_t pos_ = 0;
};

} // namespace

std::string encode_checkpoint(const std::vector<CheckpointTensor>& tensors) {
    std::string out(kMagic, 4);
    put<std::uint32_t>(out, kCheckpointVersion);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& t : tensors) {
        if (shape_numel(t.shape) != t.values.size())
            throw ContractError("checkpoint: tensor " + t.name + " has inconsistent shape");
        put<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
        out += t.name;
        put<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
        for (std::size_t e : t.shape) put<std::uint64_t>(out, e);
        out.push_back(static_cast<char>(t.dtype));
        for (double v : t.values) {
            if (t.dtype == DType::f32) put_float(out, static_cast<float>(v));
            else put_double(out, v);
        }
    }
    return out;
}

std::vector<CheckpointTensor> decode_checkpoint(const std::string& bytes) {
    Reader r(bytes);
    if (r.get_string(4) != std::string(kMagic, 4)) throw ConfigError("checkpoint: bad magic");
    const auto version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion) throw ConfigError("checkpoint: unsupported version " + std::to_string(version));
    const auto count = r.get<std::uint32_t>();
    std::vector<CheckpointTensor> out;
    for (std::uint32_t i = 0; i < count; ++i) {
        CheckpointTensor t;
        t.name = r.get_string(r.get<std::uint32_t>());
        const auto rank = r.get<std::uint32_t>();
        for (std::uint32_t k = 0; k < rank; ++k) t.shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>()));
        const auto tag = r.get<std::uint8_t>();
        if (tag != 1 && tag != 2) throw ConfigError("checkpoint: unknown dtype tag " + std::to_string(tag));
        t.dtype = static_cast<DType>(tag);
        t.values.resize(shape_numel(t.shape));
        for (auto& v : t.values) {
            if (t.dtype == DType::f32) v = std::bit_cast<float>(r.get<std::uint32_t>());
            else v = std::bit_cast<double>(r.get<std::uint64_t>());
        }
        out.push_back(std::move(t));
    }
    if (!r.done()) throw ConfigError("checkpoint: trailing bytes");
    return out;
}

void write_checkpoint(const std::string& path, const std::vector<CheckpointTensor>& tensors) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
    const std::string bytes = encode_checkpoint(tensors);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("checkpoint: write failed for " + path);
}

std::vector<CheckpointTensor> read_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ConfigError("checkpoint: cannot open " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return decode_checkpoint(ss.str());
}

void save_tensors(const std::string& path, const std::vector<NamedTensor>& tensors, DType dtype) {
    std::vector<CheckpointTensor> out;
    for (const auto& nt : tensors)
        out.push_back({nt.name, nt.tensor.shape(), dtype, {nt.tensor.data().begin(), nt.tensor.data().end()}});
    write_checkpoint(path, out);
}

std::vector<NamedTensor> load_tensors(const std::string& path) {
    std::vector<NamedTensor> out;
    for (auto& t : read_checkpoint(path)) out.push_back({t.name, Tensor::from_data(t.shape, std::move(t.values))});
    return out;
}

} // namespace ilora
