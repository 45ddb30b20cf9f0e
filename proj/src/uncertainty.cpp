#include "caal/uncertainty.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

namespace caal::unc {

using ag::Var;

McTrace mc_predict(const cls::Classifier& c, const std::vector<data::Sample>& samples,
                   const McConfig& cfg) {
    if (cfg.passes < 1) throw ConfigError("mc_predict: passes must be positive");
    if (cfg.reduce != "mean" && cfg.reduce != "max")
        throw ConfigError("mc_predict: reduce must be mean|max");
    if (samples.empty()) throw DomainError("mc_predict: no samples");
    if (!c.spec.variance_head && !cfg.epistemic_only)
        throw CapabilityError(
            "mc_predict: classifier has no variance head; set epistemic_only");
    const int C = c.spec.num_classes, S = c.spec.side;
    const int N = static_cast<int>(samples.size());
    for (const auto& s : samples)
        if (s.image.shape() != std::vector<int>{S, S})
            throw ShapeError("mc_predict: sample " + s.id + " image size mismatch");

    ag::GradMode gm(false);
    McTrace tr;
    tr.mean = Tensor::zeros({cfg.passes, N, C});
    tr.var = Tensor::zeros({cfg.passes, N, C});
    const bool want_var = c.spec.variance_head && !cfg.epistemic_only;
    Rng master(cfg.seed);
    const size_t chunk = 32;
    for (int t = 0; t < cfg.passes; ++t) {
        Rng prng = master.fork("pass", t);
        // masking stays live while normalization keeps its running stats
        nn::Ctx mctx{false, &prng, true};
        for (size_t first = 0; first < samples.size(); first += chunk) {
            const size_t last = std::min(samples.size(), first + chunk);
            const int b = static_cast<int>(last - first);
            Tensor x = Tensor::zeros({b, 1, S, S});
            const int64_t plane = static_cast<int64_t>(S) * S;
            for (size_t k = first; k < last; ++k)
                for (int64_t j = 0; j < plane; ++j)
                    x[(k - first) * plane + j] = samples[k].image[j];
            auto out = c.net.forward(Var::leaf(std::move(x)), mctx);
            Var p = c.spec.label_mode == "exclusive" ? ops::softmax_rows(out.logits)
                                                     : ops::sigmoid(out.logits);
            for (size_t k = first; k < last; ++k)
                for (int j = 0; j < C; ++j) {
                    const int64_t at = (static_cast<int64_t>(t) * N + static_cast<int64_t>(k)) * C + j;
                    tr.mean[at] = p.val()[(k - first) * C + j];
                    if (want_var)
                        tr.var[at] = std::exp(out.log_var.val()[(k - first) * C + j]);
                }
        }
    }
    if (!tr.mean.all_finite() || !tr.var.all_finite())
        throw NumericError("mc_predict: non-finite outputs");
    return tr;
}

Tensor combine_variance(const Tensor& means, const Tensor& vars) {
    if (means.dim() != 3) throw ShapeError("combine_variance: expected (T,N,C) means");
    if (vars.shape() != means.shape())
        throw ShapeError("combine_variance: pass count or width mismatch");
    const int T = means.shape()[0], N = means.shape()[1], C = means.shape()[2];
    if (T < 1) throw DomainError("combine_variance: need at least one pass");
    Tensor out = Tensor::zeros({N, C});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            double m1 = 0, m2 = 0, va = 0;
            for (int t = 0; t < T; ++t) {
                const double y = means[(static_cast<int64_t>(t) * N + n) * C + c];
                m1 += y;
                m2 += y * y;
                va += vars[(static_cast<int64_t>(t) * N + n) * C + c];
            }
            m1 /= T;
            m2 /= T;
            va /= T;
            // population variance of the pass means can round a hair negative
            out[static_cast<int64_t>(n) * C + c] = std::max(m2 - m1 * m1 + va, 0.0);
        }
    return out;
}

std::vector<UncertaintyEstimate> estimate_uncertainty(const cls::Classifier& c,
                                                      const std::vector<data::Sample>& samples,
                                                      const McConfig& cfg) {
    McTrace tr = mc_predict(c, samples, cfg);
    Tensor v = combine_variance(tr.mean, tr.var);
    const int C = c.spec.num_classes;
    std::vector<UncertaintyEstimate> est(samples.size());
    for (size_t n = 0; n < samples.size(); ++n) {
        est[n].id = samples[n].id;
        est[n].per_class.resize(static_cast<size_t>(C));
        double acc = cfg.reduce == "max" ? -1.0 : 0.0;
        for (int k = 0; k < C; ++k) {
            const double vk = v[static_cast<int64_t>(n) * C + k];
            est[n].per_class[static_cast<size_t>(k)] = vk;
            if (cfg.reduce == "max")
                acc = std::max(acc, vk);
            else
                acc += vk / C;
        }
        est[n].score = acc;
    }
    return est;
}

RankResult rank_by_informativeness(const std::vector<UncertaintyEstimate>& est, int n_inf,
                                   uint64_t tie_seed) {
    if (est.empty()) throw DomainError("rank_by_informativeness: no estimates");
    if (n_inf < 1) throw DomainError("rank_by_informativeness: n_inf must be positive");
    // tie keys hang off the id, not the input slot, so any permutation of the
    // candidates ranks identically
    std::vector<std::string> ids(est.size());
    for (size_t i = 0; i < est.size(); ++i) ids[i] = est[i].id;
    std::sort(ids.begin(), ids.end());
    for (size_t i = 1; i < ids.size(); ++i)
        if (ids[i] == ids[i - 1])
            throw DomainError("rank_by_informativeness: duplicate id " + ids[i]);
    Rng(tie_seed).shuffle(ids);
    std::map<std::string, size_t> tie_of;
    for (size_t i = 0; i < ids.size(); ++i) tie_of[ids[i]] = i;
    std::vector<size_t> order(est.size());
    std::iota(order.begin(), order.end(), size_t{0});
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        if (est[a].score != est[b].score) return est[a].score > est[b].score;
        return tie_of.at(est[a].id) < tie_of.at(est[b].id);
    });
    RankResult r;
    r.truncated = static_cast<int>(est.size()) < n_inf;
    const size_t keep = std::min(est.size(), static_cast<size_t>(n_inf));
    r.order.reserve(keep);
    for (size_t i = 0; i < keep; ++i) r.order.push_back(est[order[i]].id);
    return r;
}

double entropy_score(const std::vector<double>& probs, const std::string& label_mode) {
    if (label_mode != "exclusive" && label_mode != "multilabel")
        throw ConfigError("entropy_score: label_mode must be exclusive|multilabel");
    if (probs.empty()) throw DomainError("entropy_score: empty probabilities");
    double sum = 0;
    for (double p : probs) {
        if (p < -1e-9 || p > 1.0 + 1e-9)
            throw DomainError("entropy_score: probability outside [0,1]");
        sum += p;
    }
    auto h = [](double p) {
        p = std::min(1.0, std::max(0.0, p));
        return p > 0 ? -p * std::log(p) : 0.0;
    };
    if (label_mode == "exclusive") {
        if (std::abs(sum - 1.0) > 1e-6)
            throw DomainError("entropy_score: exclusive probabilities must sum to 1");
        double total = 0;
        for (double p : probs) total += h(p);
        return total;
    }
    double total = 0;
    for (double p : probs) total += h(p) + h(1.0 - p);
    return total / static_cast<double>(probs.size());
}

}  // namespace caal::unc
