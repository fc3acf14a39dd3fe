#include "probekit/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace probekit {

int64_t checked_numel(const std::vector<int64_t>& dims) {
    int64_t n = 1;
    for (const int64_t d : dims) {
        if (d <= 0) throw ShapeError("tensor dims must be positive");
        n *= d;
    }
    return n;
}

Tensor::Tensor(std::vector<int64_t> dims, DType dt) {
    numel_ = checked_numel(dims);
    dims_ = std::move(dims);
    dtype_ = dt;
    storage_ = std::make_shared<Storage>();
    if (dt == DType::F32)
        storage_->buf = std::vector<float>(static_cast<size_t>(numel_), 0.0f);
    else
        storage_->buf = std::vector<double>(static_cast<size_t>(numel_), 0.0);
}

Tensor Tensor::zeros(std::vector<int64_t> dims, DType dt) { return Tensor(std::move(dims), dt); }

Tensor Tensor::full(std::vector<int64_t> dims, double value, DType dt) {
    Tensor t(std::move(dims), dt);
    if (dt == DType::F32) {
        auto* p = t.mut<float>();
        std::fill(p, p + t.numel(), static_cast<float>(value));
    } else {
        auto* p = t.mut<double>();
        std::fill(p, p + t.numel(), value);
    }
    return t;
}

Tensor Tensor::scalar(double value, DType dt) { return full({1}, value, dt); }

Tensor Tensor::from_values(std::vector<int64_t> dims, std::span<const double> values, DType dt) {
    Tensor t(std::move(dims), dt);
    if (t.numel() != static_cast<int64_t>(values.size()))
        throw ShapeError("from_values: element count mismatch");
    if (dt == DType::F32) {
        auto* p = t.mut<float>();
        for (size_t i = 0; i < values.size(); ++i) p[i] = static_cast<float>(values[i]);
    } else {
        auto* p = t.mut<double>();
        std::copy(values.begin(), values.end(), p);
    }
    return t;
}

Tensor Tensor::randn(std::vector<int64_t> dims, DType dt, Rng& rng) {
    Tensor t(std::move(dims), dt);
    if (dt == DType::F32) {
        auto* p = t.mut<float>();
        for (int64_t i = 0; i < t.numel(); ++i) p[i] = static_cast<float>(rng.normal());
    } else {
        auto* p = t.mut<double>();
        for (int64_t i = 0; i < t.numel(); ++i) p[i] = rng.normal();
    }
    return t;
}

template <typename T>
const T* Tensor::data() const {
    if (!storage_) throw ContractError("access to undefined tensor");
    const auto* v = std::get_if<std::vector<T>>(&storage_->buf);
    if (!v) throw ContractError("tensor dtype mismatch");
    return v->data();
}
template const float* Tensor::data<float>() const;
template const double* Tensor::data<double>() const;

template <typename T>
T* Tensor::mut() {
    if (!storage_) throw ContractError("access to undefined tensor");
    if (storage_.use_count() > 1) {
        auto fresh = std::make_shared<Storage>(*storage_);
        storage_ = std::move(fresh);
    }
    auto* v = std::get_if<std::vector<T>>(&storage_->buf);
    if (!v) throw ContractError("tensor dtype mismatch");
    return v->data();
}
template float* Tensor::mut<float>();
template double* Tensor::mut<double>();

double Tensor::get(int64_t i) const {
    return dtype_ == DType::F32 ? static_cast<double>(data<float>()[i]) : data<double>()[i];
}

void Tensor::set1(int64_t i, double v) {
    if (dtype_ == DType::F32)
        mut<float>()[i] = static_cast<float>(v);
    else
        mut<double>()[i] = v;
}

Tensor Tensor::clone() const {
    if (!storage_) return {};
    Tensor t;
    t.storage_ = std::make_shared<Storage>(*storage_);
    t.dims_ = dims_;
    t.numel_ = numel_;
    t.dtype_ = dtype_;
    return t;
}

Tensor Tensor::astype(DType dt) const {
    if (dt == dtype_) return *this;
    Tensor t(dims_, dt);
    if (dt == DType::F64) {
        const float* src = data<float>();
        auto* dst = t.mut<double>();
        for (int64_t i = 0; i < numel_; ++i) dst[i] = static_cast<double>(src[i]);
    } else {
        const double* src = data<double>();
        auto* dst = t.mut<float>();
        for (int64_t i = 0; i < numel_; ++i) dst[i] = static_cast<float>(src[i]);
    }
    return t;
}

Tensor Tensor::reshaped(std::vector<int64_t> dims) const {
    if (checked_numel(dims) != numel_) throw ShapeError("reshape: element count mismatch");
    Tensor t = *this;
    t.dims_ = std::move(dims);
    return t;
}

bool Tensor::bits_equal(const Tensor& o) const {
    if (dtype_ != o.dtype_ || dims_ != o.dims_) return false;
    if (dtype_ == DType::F32)
        return std::memcmp(data<float>(), o.data<float>(), sizeof(float) * static_cast<size_t>(numel_)) == 0;
    return std::memcmp(data<double>(), o.data<double>(), sizeof(double) * static_cast<size_t>(numel_)) == 0;
}

bool Tensor::all_finite() const {
    if (dtype_ == DType::F32) {
        const float* p = data<float>();
        for (int64_t i = 0; i < numel_; ++i)
            if (!std::isfinite(p[i])) return false;
    } else {
        const double* p = data<double>();
        for (int64_t i = 0; i < numel_; ++i)
            if (!std::isfinite(p[i])) return false;
    }
    return true;
}

double Tensor::max_abs() const {
    double m = 0.0;
    for (int64_t i = 0; i < numel_; ++i) m = std::max(m, std::abs(get(i)));
    return m;
}

double max_rel_err(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw ShapeError("max_rel_err: shape mismatch");
    double m = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, rel_err(a.get(i), b.get(i)));
    return m;
}

// --- PTNS / PTAR -------------------------------------------------------------

namespace {

constexpr uint8_t kPtnsMagic[4] = {0x50, 0x54, 0x4E, 0x53};
constexpr uint8_t kPtarMagic[4] = {0x50, 0x54, 0x41, 0x52};

template <typename T>
void write_le(std::ostream& os, T v) {
    uint8_t buf[sizeof(T)];
    uint64_t bits = 0;
    std::memcpy(&bits, &v, sizeof(T));
    for (size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<uint8_t>((bits >> (8 * i)) & 0xFF);
    os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
    uint8_t buf[sizeof(T)];
    is.read(reinterpret_cast<char*>(buf), sizeof(T));
    if (!is) throw IoError("unexpected end of stream");
    uint64_t bits = 0;
    for (size_t i = 0; i < sizeof(T); ++i) bits |= static_cast<uint64_t>(buf[i]) << (8 * i);
    T v;
    std::memcpy(&v, &bits, sizeof(T));
    return v;
}

}  // namespace

void Tensor::save_ptns(std::ostream& os) const {
    os.write(reinterpret_cast<const char*>(kPtnsMagic), 4);
    write_le<uint16_t>(os, 1);
    os.put(static_cast<char>(dtype_));
    os.put(static_cast<char>(rank()));
    for (const int64_t d : dims_) write_le<uint64_t>(os, static_cast<uint64_t>(d));
    if (dtype_ == DType::F32) {
        const float* p = data<float>();
        for (int64_t i = 0; i < numel_; ++i) write_le<float>(os, p[i]);
    } else {
        const double* p = data<double>();
        for (int64_t i = 0; i < numel_; ++i) write_le<double>(os, p[i]);
    }
}

Tensor Tensor::load_ptns(std::istream& is) {
    uint8_t magic[4];
    is.read(reinterpret_cast<char*>(magic), 4);
    if (!is || std::memcmp(magic, kPtnsMagic, 4) != 0) throw IoError("bad PTNS magic");
    const uint16_t version = read_le<uint16_t>(is);
    if (version != 1) throw IoError("unsupported PTNS version");
    const int dtype_byte = is.get();
    const int rank = is.get();
    if (dtype_byte < 0 || dtype_byte > 1 || rank < 0) throw IoError("bad PTNS header");
    std::vector<int64_t> dims(static_cast<size_t>(rank));
    for (auto& d : dims) d = static_cast<int64_t>(read_le<uint64_t>(is));
    const DType dt = static_cast<DType>(dtype_byte);
    Tensor t(dims, dt);
    if (dt == DType::F32) {
        auto* p = t.mut<float>();
        for (int64_t i = 0; i < t.numel(); ++i) p[i] = read_le<float>(is);
    } else {
        auto* p = t.mut<double>();
        for (int64_t i = 0; i < t.numel(); ++i) p[i] = read_le<double>(is);
    }
    return t;
}

void save_ptns_file(const std::string& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for write: " + path);
    t.save_ptns(os);
}

Tensor load_ptns_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    return Tensor::load_ptns(is);
}

void save_ptar(const std::string& path, std::span<const ArchiveEntry> entries) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for write: " + path);
    os.write(reinterpret_cast<const char*>(kPtarMagic), 4);
    write_le<uint32_t>(os, static_cast<uint32_t>(entries.size()));
    for (const auto& e : entries) {
        if (e.name.size() > 0xFFFF) throw IoError("PTAR entry name too long");
        write_le<uint16_t>(os, static_cast<uint16_t>(e.name.size()));
        os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
        e.tensor.save_ptns(os);
    }
}

std::vector<ArchiveEntry> load_ptar(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    uint8_t magic[4];
    is.read(reinterpret_cast<char*>(magic), 4);
    if (!is || std::memcmp(magic, kPtarMagic, 4) != 0) throw IoError("bad PTAR magic: " + path);
    const uint32_t count = read_le<uint32_t>(is);
    std::vector<ArchiveEntry> entries;
    entries.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        const uint16_t len = read_le<uint16_t>(is);
        std::string name(len, '\0');
        is.read(name.data(), len);
        if (!is) throw IoError("truncated PTAR entry name");
        entries.push_back({std::move(name), Tensor::load_ptns(is)});
    }
    return entries;
}

// --- ParamStore --------------------------------------------------------------

void ParamStore::add(const std::string& name, Tensor value, bool frozen) {
    if (map_.count(name)) throw ContractError("duplicate parameter name: " + name);
    order_.push_back(name);
    map_.emplace(name, std::move(value));
    if (frozen) frozen_.insert(name);
}

bool ParamStore::has(const std::string& name) const { return map_.count(name) > 0; }

const Tensor& ParamStore::get(const std::string& name) const {
    auto it = map_.find(name);
    if (it == map_.end()) throw ContractError("unknown parameter: " + name);
    return it->second;
}

void ParamStore::set(const std::string& name, Tensor value) {
    auto it = map_.find(name);
    if (it == map_.end()) throw ContractError("unknown parameter: " + name);
    it->second = std::move(value);
}

void ParamStore::freeze(const std::string& name) {
    if (!map_.count(name)) throw ContractError("unknown parameter: " + name);
    frozen_.insert(name);
}

void ParamStore::freeze_all() {
    for (const auto& n : order_) frozen_.insert(n);
}

bool ParamStore::is_frozen(const std::string& name) const { return frozen_.count(name) > 0; }

bool ParamStore::bits_equal(const ParamStore& o) const {
    if (order_ != o.order_) return false;
    for (const auto& n : order_)
        if (!get(n).bits_equal(o.get(n))) return false;
    return true;
}

ParamStore ParamStore::clone() const {
    ParamStore out;
    for (const auto& n : order_) out.add(n, get(n).clone(), is_frozen(n));
    return out;
}

void ParamStore::save(const std::string& path) const {
    std::vector<ArchiveEntry> entries;
    entries.reserve(order_.size());
    for (const auto& n : order_) entries.push_back({n, get(n)});
    save_ptar(path, entries);
}

ParamStore ParamStore::load(const std::string& path) {
    ParamStore out;
    for (auto& e : load_ptar(path)) out.add(e.name, std::move(e.tensor));
    return out;
}

// --- GradMap -----------------------------------------------------------------

void GradMap::accumulate(const std::string& name, const Tensor& g) {
    auto it = entries_.find(name);
    if (it == entries_.end()) {
        entries_.emplace(name, g.clone());
        return;
    }
    Tensor& acc = it->second;
    if (!acc.same_shape(g) || acc.dtype() != g.dtype()) throw ShapeError("gradient shape mismatch: " + name);
    if (acc.dtype() == DType::F32) {
        auto* a = acc.mut<float>();
        const float* b = g.data<float>();
        for (int64_t i = 0; i < acc.numel(); ++i) a[i] += b[i];
    } else {
        auto* a = acc.mut<double>();
        const double* b = g.data<double>();
        for (int64_t i = 0; i < acc.numel(); ++i) a[i] += b[i];
    }
}

void GradMap::set(const std::string& name, Tensor g) { entries_[name] = std::move(g); }

bool GradMap::has(const std::string& name) const { return entries_.count(name) > 0; }

const Tensor& GradMap::get(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ContractError("no gradient for: " + name);
    return it->second;
}

double GradMap::max_abs() const {
    double m = 0.0;
    for (const auto& [name, g] : entries_) m = std::max(m, g.max_abs());
    return m;
}

double GradMap::max_rel_err(const GradMap& a, const GradMap& b) {
    double m = 0.0;
    auto compare = [&](const GradMap& lhs, const GradMap& rhs) {
        for (const auto& [name, g] : lhs.entries_) {
            if (rhs.has(name)) continue;  // handled in the shared pass
            for (int64_t i = 0; i < g.numel(); ++i) m = std::max(m, rel_err(g.get(i), 0.0));
        }
    };
    for (const auto& [name, g] : a.entries_) {
        if (!b.has(name)) continue;
        m = std::max(m, probekit::max_rel_err(g, b.get(name)));
    }
    compare(a, b);
    compare(b, a);
    return m;
}

}  // namespace probekit
