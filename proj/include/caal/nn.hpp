#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "caal/autograd.hpp"
#include "caal/ops.hpp"
#include "caal/rng.hpp"
#include "caal/tensor.hpp"

namespace caal::nn {

using ag::Var;

// Named parameter registry for one network. Layers create their tensors here;
// save/load validates names and shapes so checkpoints can never silently load
// into a different architecture. Buffers (running stats) persist but are not
// trained.
class ParamStore {
public:
    struct Item {
        std::string name;
        Var var;
        bool trainable = true;
    };

    Var create(const std::string& name, std::vector<int> shape, double stddev, Rng& rng);
    Var create_const(const std::string& name, std::vector<int> shape, double value);
    Var create_buffer(const std::string& name, std::vector<int> shape, double value);

    const std::vector<Item>& items() const { return items_; }
    std::vector<Var> trainable_vars() const;
    Var find(const std::string& name) const;
    int64_t total_size() const;

    void save(std::ostream& os) const;
    void load(std::istream& is);  // strict: same names, shapes, order
    void save_file(const std::string& path) const;
    void load_file(const std::string& path);
    uint64_t content_hash() const;

    // copy values from another store with identical layout
    void copy_from(const ParamStore& other);

private:
    Var add(std::string name, Tensor t, bool trainable);
    std::vector<Item> items_;
};

// forward-pass context: training mode drives dropout and batch-norm statistics.
// force_mask keeps dropout live while everything else behaves as inference
// (Monte-Carlo sampling of a fitted net without touching batch-norm state).
struct Ctx {
    bool training = false;
    Rng* rng = nullptr;  // required whenever dropout is live
    bool force_mask = false;
};

struct Conv2d {
    Var w, b;
    int stride = 1, pad = 0;
    Conv2d() = default;
    // He-style init; gain 2.0 suits relu, 2/(1+slope^2) suits leaky relu
    Conv2d(ParamStore& ps, const std::string& name, int in_ch, int out_ch, int k, int stride,
           int pad, Rng& rng, double gain = 2.0);
    Var forward(const Var& x) const;
};

// stride-2 (or s) transposed convolution expressed as the adjoint of conv2d;
// output side = (in-1)*stride - 2*pad + k
struct TConv2d {
    Var w, b;
    int stride = 1, pad = 0, k = 0;
    TConv2d() = default;
    TConv2d(ParamStore& ps, const std::string& name, int in_ch, int out_ch, int k, int stride,
            int pad, Rng& rng, double gain = 2.0);
    Var forward(const Var& x) const;
};

struct Linear {
    Var w, b;
    Linear() = default;
    Linear(ParamStore& ps, const std::string& name, int in, int out, Rng& rng, double gain = 2.0);
    Var forward(const Var& x) const;  // (N,in) -> (N,out)
};

// per-sample, per-channel normalization over spatial dims; no running stats
struct InstanceNorm {
    Var gamma, beta;
    double eps = 1e-5;
    InstanceNorm() = default;
    InstanceNorm(ParamStore& ps, const std::string& name, int ch);
    Var forward(const Var& x) const;
};

// batch statistics in training, running stats at inference
struct BatchNorm {
    Var gamma, beta;
    Var run_mean, run_var;  // buffers
    double eps = 1e-5, momentum = 0.1;
    BatchNorm() = default;
    BatchNorm(ParamStore& ps, const std::string& name, int ch);
    Var forward(const Var& x, const Ctx& ctx) const;
};

struct Dropout {
    double rate = 0.0;
    Dropout() = default;
    explicit Dropout(double rate) : rate(rate) {}
    Var forward(const Var& x, const Ctx& ctx) const;
};

// Adam over a fixed parameter list; state saves/loads for exact resume
class Adam {
public:
    Adam() = default;
    Adam(std::vector<Var> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
         double eps = 1e-8);
    void step(const std::vector<Var>& grads);
    void set_lr(double lr) { lr_ = lr; }
    double lr() const { return lr_; }
    int64_t t() const { return t_; }

    void save(std::ostream& os) const;
    void load(std::istream& is);
    void save_file(const std::string& path) const;
    void load_file(const std::string& path);

private:
    std::vector<Var> params_;
    std::vector<Tensor> m_, v_;
    double lr_ = 1e-3, b1_ = 0.9, b2_ = 0.999, eps_ = 1e-8;
    int64_t t_ = 0;
};

}  // namespace caal::nn
