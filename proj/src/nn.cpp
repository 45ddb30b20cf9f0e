#include "caal/nn.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

namespace caal::nn {

namespace {

constexpr char kWeightsMagic[8] = {'C', 'A', 'A', 'L', 'W', '0', '0', '1'};
constexpr char kAdamMagic[8] = {'C', 'A', 'A', 'L', 'A', '0', '0', '1'};

void write_u32(std::ostream& os, uint32_t v) { os.write(reinterpret_cast<char*>(&v), 4); }
void write_i64(std::ostream& os, int64_t v) { os.write(reinterpret_cast<char*>(&v), 8); }
uint32_t read_u32(std::istream& is) {
    uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 4);
    return v;
}
int64_t read_i64(std::istream& is) {
    int64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 8);
    return v;
}

void write_tensor_data(std::ostream& os, const Tensor& t) {
    os.write(reinterpret_cast<const char*>(t.data()),
             static_cast<std::streamsize>(t.size() * sizeof(double)));
}

void read_tensor_data(std::istream& is, Tensor& t) {
    is.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(t.size() * sizeof(double)));
}

}  // namespace

// ---------------------------------------------------------------- ParamStore

Var ParamStore::add(std::string name, Tensor t, bool trainable) {
    for (const auto& it : items_)
        if (it.name == name) throw ConfigError("ParamStore: duplicate parameter " + name);
    Var v = Var::leaf(std::move(t), trainable);
    items_.push_back({std::move(name), v, trainable});
    return v;
}

Var ParamStore::create(const std::string& name, std::vector<int> shape, double stddev, Rng& rng) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (int64_t i = 0; i < t.size(); ++i) t[i] = rng.normal() * stddev;
    return add(name, std::move(t), true);
}

Var ParamStore::create_const(const std::string& name, std::vector<int> shape, double value) {
    return add(name, Tensor::full(std::move(shape), value), true);
}

Var ParamStore::create_buffer(const std::string& name, std::vector<int> shape, double value) {
    return add(name, Tensor::full(std::move(shape), value), false);
}

std::vector<Var> ParamStore::trainable_vars() const {
    std::vector<Var> out;
    for (const auto& it : items_)
        if (it.trainable) out.push_back(it.var);
    return out;
}

Var ParamStore::find(const std::string& name) const {
    for (const auto& it : items_)
        if (it.name == name) return it.var;
    throw ConfigError("ParamStore: no parameter named " + name);
}

int64_t ParamStore::total_size() const {
    int64_t n = 0;
    for (const auto& it : items_) n += it.var.val().size();
    return n;
}

void ParamStore::save(std::ostream& os) const {
    os.write(kWeightsMagic, 8);
    write_u32(os, static_cast<uint32_t>(items_.size()));
    for (const auto& it : items_) {
        write_u32(os, static_cast<uint32_t>(it.name.size()));
        os.write(it.name.data(), static_cast<std::streamsize>(it.name.size()));
        os.put(it.trainable ? 1 : 0);
        const Tensor& t = it.var.val();
        write_u32(os, static_cast<uint32_t>(t.dim()));
        for (int i = 0; i < t.dim(); ++i) write_u32(os, static_cast<uint32_t>(t.shape(i)));
        write_tensor_data(os, t);
    }
}

void ParamStore::load(std::istream& is) {
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kWeightsMagic, 8) != 0)
        throw DataError("weights file: bad magic");
    uint32_t count = read_u32(is);
    if (count != items_.size())
        throw DataError("weights file: parameter count " + std::to_string(count) + " expected " +
                        std::to_string(items_.size()));
    for (auto& it : items_) {
        uint32_t name_len = read_u32(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        if (name != it.name)
            throw DataError("weights file: parameter '" + name + "' expected '" + it.name + "'");
        int trainable = is.get();
        if ((trainable == 1) != it.trainable)
            throw DataError("weights file: trainable flag mismatch on " + name);
        uint32_t nd = read_u32(is);
        Tensor& t = const_cast<Var&>(it.var).mutable_val();
        if (nd != static_cast<uint32_t>(t.dim()))
            throw DataError("weights file: rank mismatch on " + name);
        for (int i = 0; i < t.dim(); ++i)
            if (read_u32(is) != static_cast<uint32_t>(t.shape(i)))
                throw DataError("weights file: shape mismatch on " + name);
        read_tensor_data(is, t);
        if (!is) throw DataError("weights file: truncated at " + name);
    }
}

void ParamStore::save_file(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot write " + path);
    save(os);
}

void ParamStore::load_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot read " + path);
    load(is);
}

uint64_t ParamStore::content_hash() const {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& it : items_) {
        h = fnv1a64(it.name, h);
        const Tensor& t = it.var.val();
        h = fnv1a64(t.data(), static_cast<size_t>(t.size()) * sizeof(double), h);
    }
    return h;
}

void ParamStore::copy_from(const ParamStore& other) {
    if (other.items_.size() != items_.size()) throw DataError("copy_from: layout mismatch");
    for (size_t i = 0; i < items_.size(); ++i) {
        if (items_[i].name != other.items_[i].name)
            throw DataError("copy_from: name mismatch at " + items_[i].name);
        Tensor& dst = items_[i].var.mutable_val();
        const Tensor& src = other.items_[i].var.val();
        check_same_shape(dst, src, "copy_from");
        std::memcpy(dst.data(), src.data(), static_cast<size_t>(dst.size()) * sizeof(double));
    }
}

// ---------------------------------------------------------------- layers

Conv2d::Conv2d(ParamStore& ps, const std::string& name, int in_ch, int out_ch, int k, int stride,
               int pad, Rng& rng, double gain)
    : stride(stride), pad(pad) {
    double stddev = std::sqrt(gain / (static_cast<double>(in_ch) * k * k));
    w = ps.create(name + ".w", {out_ch, in_ch, k, k}, stddev, rng);
    b = ps.create_const(name + ".b", {1, out_ch, 1, 1}, 0.0);
}

Var Conv2d::forward(const Var& x) const {
    Var y = ops::conv2d(x, w, stride, pad);
    return ops::add(y, ops::broadcast_to(b, y.shape()));
}

TConv2d::TConv2d(ParamStore& ps, const std::string& name, int in_ch, int out_ch, int k, int stride,
                 int pad, Rng& rng, double gain)
    : stride(stride), pad(pad), k(k) {
    double stddev = std::sqrt(gain / (static_cast<double>(in_ch) * k * k));
    // stored in the layout of the conv this op is adjoint to: (in, out, k, k)
    w = ps.create(name + ".w", {in_ch, out_ch, k, k}, stddev, rng);
    b = ps.create_const(name + ".b", {1, out_ch, 1, 1}, 0.0);
}

Var TConv2d::forward(const Var& x) const {
    const auto& s = x.shape();
    int out_h = (s[2] - 1) * stride - 2 * pad + k;
    int out_w = (s[3] - 1) * stride - 2 * pad + k;
    Var y = ops::conv2d_input_grad(x, w, stride, pad, out_h, out_w);
    return ops::add(y, ops::broadcast_to(b, y.shape()));
}

Linear::Linear(ParamStore& ps, const std::string& name, int in, int out, Rng& rng, double gain) {
    double stddev = std::sqrt(gain / static_cast<double>(in));
    w = ps.create(name + ".w", {in, out}, stddev, rng);
    b = ps.create_const(name + ".b", {1, out}, 0.0);
}

Var Linear::forward(const Var& x) const {
    Var y = ops::matmul(x, w);
    return ops::add(y, ops::broadcast_to(b, y.shape()));
}

InstanceNorm::InstanceNorm(ParamStore& ps, const std::string& name, int ch) {
    gamma = ps.create_const(name + ".g", {1, ch, 1, 1}, 1.0);
    beta = ps.create_const(name + ".b", {1, ch, 1, 1}, 0.0);
}

Var InstanceNorm::forward(const Var& x) const {
    const auto& s = x.shape();
    double inv_hw = 1.0 / (static_cast<double>(s[2]) * s[3]);
    Var mean = ops::muls(ops::reduce_sum(x, {2, 3}, true), inv_hw);
    Var xc = ops::sub(x, ops::broadcast_to(mean, s));
    Var var = ops::muls(ops::reduce_sum(ops::square(xc), {2, 3}, true), inv_hw);
    Var inv_std = ops::div(Var::leaf(Tensor::full(var.shape(), 1.0)),
                           ops::sqrt(ops::adds(var, eps)));
    Var xn = ops::mul(xc, ops::broadcast_to(inv_std, s));
    return ops::add(ops::mul(ops::broadcast_to(gamma, s), xn), ops::broadcast_to(beta, s));
}

BatchNorm::BatchNorm(ParamStore& ps, const std::string& name, int ch) {
    gamma = ps.create_const(name + ".g", {1, ch, 1, 1}, 1.0);
    beta = ps.create_const(name + ".b", {1, ch, 1, 1}, 0.0);
    run_mean = ps.create_buffer(name + ".rm", {1, ch, 1, 1}, 0.0);
    run_var = ps.create_buffer(name + ".rv", {1, ch, 1, 1}, 1.0);
}

Var BatchNorm::forward(const Var& x, const Ctx& ctx) const {
    const auto& s = x.shape();
    Var mean, var;
    if (ctx.training) {
        double inv_n = 1.0 / (static_cast<double>(s[0]) * s[2] * s[3]);
        mean = ops::muls(ops::reduce_sum(x, {0, 2, 3}, true), inv_n);
        Var xc = ops::sub(x, ops::broadcast_to(mean, s));
        var = ops::muls(ops::reduce_sum(ops::square(xc), {0, 2, 3}, true), inv_n);
        // running stats track detached batch statistics
        Tensor& rm = const_cast<Var&>(run_mean).mutable_val();
        Tensor& rv = const_cast<Var&>(run_var).mutable_val();
        for (int64_t i = 0; i < rm.size(); ++i) {
            rm[i] = (1.0 - momentum) * rm[i] + momentum * mean.val()[i];
            rv[i] = (1.0 - momentum) * rv[i] + momentum * var.val()[i];
        }
    } else {
        mean = run_mean.detach();
        var = run_var.detach();
    }
    Var xc = ops::sub(x, ops::broadcast_to(mean, s));
    Var inv_std = ops::div(Var::leaf(Tensor::full(var.shape(), 1.0)),
                           ops::sqrt(ops::adds(var, eps)));
    Var xn = ops::mul(xc, ops::broadcast_to(inv_std, s));
    return ops::add(ops::mul(ops::broadcast_to(gamma, s), xn), ops::broadcast_to(beta, s));
}

Var Dropout::forward(const Var& x, const Ctx& ctx) const {
    if ((!ctx.training && !ctx.force_mask) || rate <= 0.0) return x;
    if (!ctx.rng) throw TrainError("dropout: masked forward without an rng");
    double keep = 1.0 - rate;
    Tensor mask = Tensor::zeros(x.shape());
    for (int64_t i = 0; i < mask.size(); ++i)
        mask[i] = ctx.rng->bernoulli(keep) ? 1.0 / keep : 0.0;
    return ops::mul_const(x, mask);
}

// ---------------------------------------------------------------- Adam

Adam::Adam(std::vector<Var> params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
    for (const auto& p : params_) {
        m_.push_back(Tensor::zeros(p.val().shape()));
        v_.push_back(Tensor::zeros(p.val().shape()));
    }
}

void Adam::step(const std::vector<Var>& grads) {
    if (grads.size() != params_.size()) throw TrainError("adam: gradient count mismatch");
    ++t_;
    double bc1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (size_t k = 0; k < params_.size(); ++k) {
        Tensor& p = params_[k].mutable_val();
        const Tensor& g = grads[k].val();
        check_same_shape(p, g, "adam");
        Tensor& m = m_[k];
        Tensor& v = v_[k];
        for (int64_t i = 0; i < p.size(); ++i) {
            m[i] = b1_ * m[i] + (1.0 - b1_) * g[i];
            v[i] = b2_ * v[i] + (1.0 - b2_) * g[i] * g[i];
            p[i] -= lr_ * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps_);
        }
    }
}

void Adam::save(std::ostream& os) const {
    os.write(kAdamMagic, 8);
    write_i64(os, t_);
    write_u32(os, static_cast<uint32_t>(params_.size()));
    for (size_t k = 0; k < params_.size(); ++k) {
        write_tensor_data(os, m_[k]);
        write_tensor_data(os, v_[k]);
    }
}

void Adam::load(std::istream& is) {
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kAdamMagic, 8) != 0)
        throw DataError("optimizer file: bad magic");
    t_ = read_i64(is);
    uint32_t count = read_u32(is);
    if (count != params_.size()) throw DataError("optimizer file: parameter count mismatch");
    for (size_t k = 0; k < params_.size(); ++k) {
        read_tensor_data(is, m_[k]);
        read_tensor_data(is, v_[k]);
    }
    if (!is) throw DataError("optimizer file: truncated");
}

void Adam::save_file(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot write " + path);
    save(os);
}

void Adam::load_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot read " + path);
    load(is);
}

}  // namespace caal::nn
