#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <variant>
#include <vector>

#include "probekit/common.hpp"
#include "probekit/rng.hpp"

namespace probekit {

// Dense row-major tensor. Storage is shared between copies; contents are
// treated as immutable once a tensor is visible to more than one owner, so
// mutation goes through mut<T>() which copies when the buffer is shared.
class Tensor {
  public:
    Tensor() = default;
    Tensor(std::vector<int64_t> dims, DType dt);

    static Tensor zeros(std::vector<int64_t> dims, DType dt);
    static Tensor full(std::vector<int64_t> dims, double value, DType dt);
    static Tensor scalar(double value, DType dt);
    static Tensor from_values(std::vector<int64_t> dims, std::span<const double> values, DType dt);
    static Tensor randn(std::vector<int64_t> dims, DType dt, Rng& rng);

    bool defined() const { return storage_ != nullptr; }
    DType dtype() const { return dtype_; }
    const std::vector<int64_t>& dims() const { return dims_; }
    int rank() const { return static_cast<int>(dims_.size()); }
    int64_t dim(int i) const { return dims_[static_cast<size_t>(i)]; }
    int64_t numel() const { return numel_; }

    template <typename T>
    const T* data() const;
    template <typename T>
    T* mut();  // copies the buffer first when shared

    // dtype-agnostic element access (convenience, not for hot loops)
    double get(int64_t i) const;
    void set1(int64_t i, double v);

    Tensor clone() const;
    Tensor astype(DType dt) const;
    // same storage, new dims (element count must match)
    Tensor reshaped(std::vector<int64_t> dims) const;

    bool same_shape(const Tensor& o) const { return dims_ == o.dims_; }
    bool bits_equal(const Tensor& o) const;
    bool all_finite() const;
    double max_abs() const;

    void save_ptns(std::ostream& os) const;
    static Tensor load_ptns(std::istream& is);

  private:
    struct Storage {
        std::variant<std::vector<float>, std::vector<double>> buf;
    };
    std::shared_ptr<Storage> storage_;
    std::vector<int64_t> dims_;
    int64_t numel_ = 0;
    DType dtype_ = DType::F32;
};

int64_t checked_numel(const std::vector<int64_t>& dims);

// relative error with an absolute floor, used by every numeric oracle
inline double rel_err(double a, double b) {
    const double denom = std::max({std::abs(a), std::abs(b), 1e-12});
    return std::abs(a - b) / denom;
}
double max_rel_err(const Tensor& a, const Tensor& b);

// --- PTAR archives: named tensor containers -------------------------------

struct ArchiveEntry {
    std::string name;
    Tensor tensor;
};

void save_ptar(const std::string& path, std::span<const ArchiveEntry> entries);
std::vector<ArchiveEntry> load_ptar(const std::string& path);
void save_ptns_file(const std::string& path, const Tensor& t);
Tensor load_ptns_file(const std::string& path);

// --- Parameter containers ---------------------------------------------------

// Ordered name -> tensor map with a frozen set. Frozen entries never receive
// gradient and are never touched by optimizers.
class ParamStore {
  public:
    void add(const std::string& name, Tensor value, bool frozen = false);
    bool has(const std::string& name) const;
    const Tensor& get(const std::string& name) const;
    void set(const std::string& name, Tensor value);

    void freeze(const std::string& name);
    void freeze_all();
    bool is_frozen(const std::string& name) const;

    const std::vector<std::string>& names() const { return order_; }
    size_t size() const { return order_.size(); }

    bool bits_equal(const ParamStore& o) const;
    ParamStore clone() const;

    void save(const std::string& path) const;
    static ParamStore load(const std::string& path);

  private:
    std::vector<std::string> order_;
    std::unordered_map<std::string, Tensor> map_;
    std::unordered_set<std::string> frozen_;
};

// name -> gradient tensor, keyed by trainable parameter names
class GradMap {
  public:
    void accumulate(const std::string& name, const Tensor& g);
    void set(const std::string& name, Tensor g);
    bool has(const std::string& name) const;
    const Tensor& get(const std::string& name) const;
    const std::map<std::string, Tensor>& entries() const { return entries_; }
    size_t size() const { return entries_.size(); }

    double max_abs() const;
    // max over shared keys of elementwise relative error; keys present on one
    // side only are compared against zero
    static double max_rel_err(const GradMap& a, const GradMap& b);

  private:
    std::map<std::string, Tensor> entries_;
};

}  // namespace probekit
