#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>

#include "iclp/params.hpp"

namespace iclp {

struct AdamWConfig {
    double lr = 1e-3;        // peak learning rate
    double lr_floor = 1e-5;  // cosine anneals down to this
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    int64_t total_steps = 0;  // 0 disables the schedule (constant lr)
};

// cosine anneal from cfg.lr to cfg.lr_floor over cfg.total_steps
inline double cosine_lr(const AdamWConfig& cfg, int64_t step) {
    if (cfg.total_steps <= 0) return cfg.lr;
    double t = std::min<double>(static_cast<double>(step), static_cast<double>(cfg.total_steps));
    double frac = t / static_cast<double>(cfg.total_steps);
    return cfg.lr_floor + 0.5 * (cfg.lr - cfg.lr_floor) * (1.0 + std::cos(M_PI * frac));
}

template <typename T>
class AdamW {
public:
    explicit AdamW(AdamWConfig cfg) : cfg_(cfg) {}

    const AdamWConfig& config() const { return cfg_; }
    int64_t step_count() const { return step_; }
    double last_lr() const { return last_lr_; }

    // Applies one decoupled-weight-decay Adam update in place. Rejects the
    // whole step if any gradient is non-finite; returns false in that case.
    bool step(ModuleParams<T>& params, const GradMap<T>& grads) {
        for (const auto& [name, g] : grads) {
            if (!params.contains(name)) throw std::out_of_range("grad for unknown param: " + name);
            if (!params.at(name).same_shape(g))
                throw std::invalid_argument("grad shape mismatch for " + name);
            if (!g.all_finite()) return false;
        }
        ++step_;
        double lr = cosine_lr(cfg_, step_ - 1);
        last_lr_ = lr;
        double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
        double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
        for (auto& [name, p] : params) {
            auto git = grads.find(name);
            if (git == grads.end()) continue;  // unreached parameter: no update
            const auto& g = git->second;
            auto& m = moment(m1_, name, p);
            auto& v = moment(m2_, name, p);
            for (int64_t i = 0; i < p.size(); ++i) {
                double gi = g.data[i];
                double mi = cfg_.beta1 * m.data[i] + (1.0 - cfg_.beta1) * gi;
                double vi = cfg_.beta2 * v.data[i] + (1.0 - cfg_.beta2) * gi * gi;
                m.data[i] = static_cast<T>(mi);
                v.data[i] = static_cast<T>(vi);
                double mhat = mi / bc1;
                double vhat = vi / bc2;
                double upd = mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * p.data[i];
                p.data[i] = static_cast<T>(p.data[i] - lr * upd);
            }
        }
        return true;
    }

private:
    Tensor<T>& moment(std::map<std::string, Tensor<T>>& store, const std::string& name,
                      const Tensor<T>& p) {
        auto it = store.find(name);
        if (it == store.end()) it = store.emplace(name, Tensor<T>(p.shape)).first;
        return it->second;
    }

    AdamWConfig cfg_;
    int64_t step_ = 0;
    double last_lr_ = 0.0;
    std::map<std::string, Tensor<T>> m1_, m2_;
};

}  // namespace iclp
