#include "uovn/tensor.hpp"

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <sstream>
#include <thread>

namespace uovn {

Tensor::Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    data_.assign(static_cast<std::size_t>(shape_numel(shape_)), 0.0f);
}

Tensor::Tensor(std::vector<int> shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != static_cast<std::int64_t>(data_.size())) {
        throw DimensionError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                             shape_str(shape_));
    }
}

Tensor Tensor::full(std::vector<int> shape, float v) {
    Tensor t(std::move(shape));
    for (auto& x : t.data_) x = v;
    return t;
}

Tensor Tensor::from(std::vector<int> shape, std::initializer_list<float> vals) {
    return Tensor(std::move(shape), std::vector<float>(vals));
}

bool Tensor::all_finite() const {
    for (float v : data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

void Tensor::ensure_grad() {
    if (!grad_) grad_.emplace(data_.size(), 0.0f);
}

std::int64_t shape_numel(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int e : shape) {
        if (e < 0) throw DimensionError("negative extent in shape " + shape_str(shape));
        n *= e;
    }
    return n;
}

std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff), static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff), static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is, const std::string& path) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw IoError("truncated tensor container: " + path);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void write_tensor(const std::string& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open for write: " + path);
    os.write("UOVT", 4);
    put_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (int e : t.shape()) put_u32(os, static_cast<std::uint32_t>(e));
    for (float v : t.vec()) {
        std::uint32_t bits;
        std::memcpy(&bits, &v, 4);
        put_u32(os, bits);
    }
    if (!os) throw IoError("write failed: " + path);
}

Tensor read_tensor(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open for read: " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "UOVT", 4) != 0) {
        throw IoError("bad magic in tensor container: " + path);
    }
    const std::uint32_t rank = get_u32(is, path);
    if (rank > 8) throw IoError("implausible rank " + std::to_string(rank) + " in " + path);
    std::vector<int> shape(rank);
    for (auto& e : shape) e = static_cast<int>(get_u32(is, path));
    const std::int64_t n = shape_numel(shape);
    std::vector<float> data(static_cast<std::size_t>(n));
    for (auto& v : data) {
        const std::uint32_t bits = get_u32(is, path);
        std::memcpy(&v, &bits, 4);
    }
    return Tensor(std::move(shape), std::move(data));
}

int max_threads() {
    static const int cached = [] {
        int hw = static_cast<int>(std::thread::hardware_concurrency());
        if (hw <= 0) hw = 1;
        int cap = std::min(hw, 8);
        if (const char* env = std::getenv("UOVN_THREADS")) {
            const int req = std::atoi(env);
            if (req >= 1) cap = req;
        }
        return cap;
    }();
    return cached;
}

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
    const int threads = std::min<std::size_t>(static_cast<std::size_t>(max_threads()), n);
    if (threads <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(threads));
    for (int t = 0; t < threads; ++t) {
        pool.emplace_back([&] {
            for (std::size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
        });
    }
    for (auto& th : pool) th.join();
}

}  // namespace uovn
