#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "ccn/errors.hpp"
#include "ccn/tape.hpp"
#include "ccn/tensor.hpp"

namespace ccn {

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Named parameters with Adam moments. Names beginning with '_' are
// bookkeeping records (step count, negative queue): checkpointed but never
// optimized.
class ParameterStore {
  public:
    Parameter& add(const std::string& name, Tensor init) {
        auto [it, fresh] = params_.emplace(name, std::make_unique<Parameter>(name, std::move(init), name[0] != '_'));
        if (!fresh) throw Error("duplicate parameter: " + name);
        return *it->second;
    }

    bool has(const std::string& name) const { return params_.count(name) > 0; }

    Parameter& at(const std::string& name) {
        auto it = params_.find(name);
        if (it == params_.end()) throw Error("unknown parameter: " + name);
        return *it->second;
    }

    const Parameter& at(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end()) throw Error("unknown parameter: " + name);
        return *it->second;
    }

    void zero_grad() {
        for (auto& [n, p] : params_) {
            std::fill(p->grad.data.begin(), p->grad.data.end(), 0.0);
            p->has_grad = false;
        }
    }

    // Standard Adam with bias correction over all trainable parameters.
    void adam_step(const AdamConfig& cfg) {
        ++step_count;
        const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step_count));
        const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step_count));
        for (auto& [n, p] : params_) {
            if (!p->trainable) continue;
            if (!p->has_grad) throw MissingGradient("adam_step: no gradient for " + n);
            for (int64_t i = 0; i < p->value.numel(); ++i) {
                const double g = p->grad[i];
                double& m = p->adam_m[i];
                double& v = p->adam_v[i];
                m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
                v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
                p->value[i] -= cfg.lr * (m / bc1) / (std::sqrt(v / bc2) + cfg.eps);
            }
        }
    }

    int64_t step_count = 0;

    template <typename F>
    void for_each(F&& f) {
        for (auto& [n, p] : params_) f(*p);
    }
    template <typename F>
    void for_each(F&& f) const {
        for (auto& [n, p] : params_) f(const_cast<const Parameter&>(*p));
    }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        for (auto& [n, p] : params_) out.push_back(n);
        return out;
    }

    // ---- checkpoint format: magic "CCN1", u64 count, value records,
    // then Adam state in the same layout (m records, then v records).
    // Record: u64 name length, name bytes, u64 rank, dims u64 LE, f64 LE data.
    void save(const std::string& path) const {
        std::ofstream f(path, std::ios::binary);
        if (!f) throw Error("cannot open for write: " + path);
        f.write("CCN1", 4);
        write_u64(f, params_.size() + 1);
        Tensor step = Tensor::scalar(static_cast<double>(step_count));
        write_record(f, "_step_count", step);
        for (auto& [n, p] : params_) write_record(f, n, p->value);
        write_record(f, "_step_count", Tensor::scalar(0));
        for (auto& [n, p] : params_) write_record(f, n, p->adam_m);
        write_record(f, "_step_count", Tensor::scalar(0));
        for (auto& [n, p] : params_) write_record(f, n, p->adam_v);
        if (!f) throw Error("write failed: " + path);
    }

    void load(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw FormatError("cannot open checkpoint: " + path);
        char magic[4];
        f.read(magic, 4);
        if (!f || std::memcmp(magic, "CCN1", 4) != 0) throw FormatError("bad checkpoint magic");
        const uint64_t n = read_u64(f);
        params_.clear();
        std::vector<std::string> order;
        for (uint64_t i = 0; i < n; ++i) {
            auto [name, t] = read_record(f);
            if (name == "_step_count") {
                step_count = static_cast<int64_t>(t.data.at(0));
                continue;
            }
            order.push_back(name);
            add(name, std::move(t));
        }
        for (int moment = 0; moment < 2; ++moment) {
            read_record(f);  // the _step_count placeholder
            for (const std::string& name : order) {
                auto [nm, t] = read_record(f);
                if (nm != name) throw FormatError("checkpoint Adam state out of order");
                Parameter& p = at(name);
                if (!t.same_shape(p.value)) throw FormatError("Adam moment shape mismatch for " + name);
                (moment == 0 ? p.adam_m : p.adam_v) = std::move(t);
            }
        }
        if (!f) throw FormatError("truncated checkpoint: " + path);
    }

  private:
    static void write_u64(std::ofstream& f, uint64_t v) {
        unsigned char b[8];
        for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
        f.write(reinterpret_cast<char*>(b), 8);
    }

    static uint64_t read_u64(std::ifstream& f) {
        unsigned char b[8];
        f.read(reinterpret_cast<char*>(b), 8);
        if (!f) throw FormatError("truncated checkpoint");
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
        return v;
    }

    static void write_record(std::ofstream& f, const std::string& name, const Tensor& t) {
        write_u64(f, name.size());
        f.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_u64(f, t.rank());
        for (int64_t d : t.shape) write_u64(f, static_cast<uint64_t>(d));
        static_assert(sizeof(double) == 8);
        f.write(reinterpret_cast<const char*>(t.data.data()),
                static_cast<std::streamsize>(t.data.size() * 8));
    }

    static std::pair<std::string, Tensor> read_record(std::ifstream& f) {
        const uint64_t len = read_u64(f);
        if (len > (1u << 20)) throw FormatError("implausible name length");
        std::string name(len, '\0');
        f.read(name.data(), static_cast<std::streamsize>(len));
        const uint64_t rank = read_u64(f);
        if (rank > 8) throw FormatError("implausible tensor rank");
        std::vector<int64_t> shape;
        for (uint64_t i = 0; i < rank; ++i) shape.push_back(static_cast<int64_t>(read_u64(f)));
        Tensor t(shape);
        f.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * 8));
        if (!f) throw FormatError("truncated checkpoint record");
        return {std::move(name), std::move(t)};
    }

    std::map<std::string, std::unique_ptr<Parameter>> params_;
};

// Central finite-difference check of the analytic gradients produced by a
// loss builder. Returns the maximum relative error over all listed
// parameters; relative error uses a small floor so exact zeros compare
// cleanly against finite-difference noise.
template <typename LossFn>
double check_gradients(ParameterStore& store, const std::vector<std::string>& names, LossFn&& loss_fn,
                       double h = 1e-5) {
    store.zero_grad();
    {
        Tape tape;
        Value loss = loss_fn(tape, store);
        tape.backward(loss);
    }
    double max_rel = 0;
    for (const std::string& name : names) {
        Parameter& p = store.at(name);
        for (int64_t i = 0; i < p.value.numel(); ++i) {
            const double keep = p.value[i];
            p.value[i] = keep + h;
            Tape tp;
            const double fp = tp.val(loss_fn(tp, store))[0];
            p.value[i] = keep - h;
            Tape tm;
            const double fm = tm.val(loss_fn(tm, store))[0];
            p.value[i] = keep;
            const double numeric = (fp - fm) / (2 * h);
            const double analytic = p.grad[i];
            const double rel = std::abs(analytic - numeric) /
                               std::max(std::abs(analytic) + std::abs(numeric), 1e-3);
            max_rel = std::max(max_rel, rel);
        }
    }
    return max_rel;
}

}  // namespace ccn
