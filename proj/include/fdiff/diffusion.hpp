#ifndef FDIFF_DIFFUSION_HPP
#define FDIFF_DIFFUSION_HPP

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "fdiff/model.hpp"
#include "fdiff/tensor.hpp"

namespace fdiff {

// Linear beta schedule and its cumulative signal-retention products.
// alpha_bar(0) == 1 by convention.
struct DiffusionSchedule {
    int steps = 0;
    std::vector<double> betas;       // betas[t-1] is beta_t
    std::vector<double> alpha_bars;  // alpha_bars[t] is abar_t, t in [0, T]

    static DiffusionSchedule make(int T, double beta_start, double beta_end) {
        if (T < 1) throw ArgError("schedule: T must be >= 1");
        if (!(0 < beta_start && beta_start < beta_end && beta_end < 1))
            throw ArgError("schedule: need 0 < beta_start < beta_end < 1");
        DiffusionSchedule s;
        s.steps = T;
        s.betas.resize(T);
        s.alpha_bars.resize(T + 1);
        s.alpha_bars[0] = 1.0;
        for (int t = 1; t <= T; ++t) {
            double b = T == 1 ? beta_start : beta_start + (beta_end - beta_start) * (t - 1) / (T - 1);
            s.betas[t - 1] = b;
            s.alpha_bars[t] = s.alpha_bars[t - 1] * (1.0 - b);
        }
        return s;
    }

    static DiffusionSchedule default_schedule(int T = 1000) { return make(T, 1e-4, 0.02); }

    double beta(int t) const {
        check_t(t);
        return betas[t - 1];
    }
    double alpha_bar(int t) const {
        if (t < 0 || t > steps) throw ArgError("schedule: t=" + std::to_string(t) + " outside [0," + std::to_string(steps) + "]");
        return alpha_bars[t];
    }
    void check_t(int t) const {
        if (t < 1 || t > steps)
            throw ArgError("schedule: t=" + std::to_string(t) + " outside [1," + std::to_string(steps) + "]");
    }
};

// Closed-form forward noising: x_t = sqrt(abar_t) x0 + sqrt(1-abar_t) eps.
// Per-item timesteps over the leading batch axis.
template <typename T>
Tensor<T> q_sample(const Tensor<T>& x0, const std::vector<int>& t, const Tensor<T>& eps,
                   const DiffusionSchedule& sched) {
    if (x0.shape != eps.shape)
        throw DimError("q_sample: x0 " + shape_str(x0.shape) + " vs eps " + shape_str(eps.shape));
    const int B = x0.dim(0);
    if (static_cast<int>(t.size()) != B) throw ArgError("q_sample: timestep count != batch");
    Tensor<T> out = Tensor<T>::zeros(x0.shape);
    const size_t item = x0.numel() / B;
    for (int b = 0; b < B; ++b) {
        sched.check_t(t[b]);
        const T sa = static_cast<T>(std::sqrt(sched.alpha_bar(t[b])));
        const T se = static_cast<T>(std::sqrt(1.0 - sched.alpha_bar(t[b])));
        for (size_t i = 0; i < item; ++i) {
            const size_t k = b * item + i;
            (*out.data)[k] = sa * (*x0.data)[k] + se * (*eps.data)[k];
        }
    }
    return out;
}

// Classifier-free guidance combination in eps space:
// (1+omega) * eps_cond - omega * eps_uncond. Exactly eps_cond at omega = 0.
template <typename T>
Tensor<T> cfg_combine(const Tensor<T>& eps_cond, const Tensor<T>& eps_uncond, double omega) {
    if (eps_cond.shape != eps_uncond.shape)
        throw DimError("cfg_combine: shape mismatch " + shape_str(eps_cond.shape) + " vs " +
                       shape_str(eps_uncond.shape));
    if (omega < 0) throw ArgError("cfg_combine: omega must be >= 0");
    Tensor<T> out = Tensor<T>::zeros(eps_cond.shape);
    if (omega == 0.0) {
        *out.data = *eps_cond.data;
        return out;
    }
    const T a = static_cast<T>(1.0 + omega), w = static_cast<T>(omega);
    for (size_t i = 0; i < out.numel(); ++i)
        (*out.data)[i] = a * (*eps_cond.data)[i] - w * (*eps_uncond.data)[i];
    return out;
}

// eps-prediction <-> score conversion: s = -eps / sqrt(1 - abar_t).
template <typename T>
Tensor<T> score_from_eps(const Tensor<T>& eps_hat, int t, const DiffusionSchedule& sched) {
    sched.check_t(t);
    return scale(eps_hat, static_cast<T>(-1.0 / std::sqrt(1.0 - sched.alpha_bar(t))));
}

template <typename T>
Tensor<T> eps_from_score(const Tensor<T>& score, int t, const DiffusionSchedule& sched) {
    sched.check_t(t);
    return scale(score, static_cast<T>(-std::sqrt(1.0 - sched.alpha_bar(t))));
}

// Denoiser interface for the loss and the sampler: (x_t, t, token ids) ->
// eps_hat. Token ids are row-major [B, L_txt].
template <typename T>
using DenoiseFn = std::function<Tensor<T>(const Tensor<T>&, const std::vector<int>&, const std::vector<int>&)>;

template <typename T>
struct LossInfo {
    double loss = 0;
    Tensor<T> loss_tensor;
    std::vector<int> t;            // drawn per item
    std::vector<char> dropped;     // caption replaced by NULL this step
};

// eps-prediction training objective with classifier-free-guidance dropout.
// Draw order per step is fixed: timesteps, then eps, then dropout decisions.
// Runs backward(); parameter grads accumulate into whatever fn touched.
template <typename T>
LossInfo<T> training_loss(const DenoiseFn<T>& fn, const Tensor<T>& x0, const std::vector<int>& token_ids,
                          int text_len, int null_id, const DiffusionSchedule& sched, Rng& rng,
                          double cfg_drop_prob) {
    const int B = x0.dim(0);
    if (B < 1) throw ArgError("training_loss: empty batch");
    if (static_cast<int>(token_ids.size()) != B * text_len)
        throw DimError("training_loss: token id count != B * text_len");

    LossInfo<T> info;
    for (int b = 0; b < B; ++b) info.t.push_back(1 + static_cast<int>(rng.uniform_index(sched.steps)));
    Tensor<T> eps = normal_draw<T>(rng, x0.shape);
    std::vector<int> ids = token_ids;
    info.dropped.resize(B, 0);
    for (int b = 0; b < B; ++b)
        if (rng.uniform() < cfg_drop_prob) {
            info.dropped[b] = 1;
            std::fill(ids.begin() + static_cast<size_t>(b) * text_len,
                      ids.begin() + static_cast<size_t>(b + 1) * text_len, null_id);
        }

    Tensor<T> x_t = q_sample(x0, info.t, eps, sched);
    Tensor<T> loss = mse(fn(x_t, info.t, ids), eps);
    backward(loss);
    info.loss = static_cast<double>(loss.vals()[0]);
    info.loss_tensor = loss;
    return info;
}

// Uniform-stride timestep subset for ancestral sampling: T, T-stride, ...,
// descending, always ending at a step >= 1.
inline std::vector<int> sampling_timesteps(int T, int n_steps) {
    if (n_steps < 1 || n_steps > T) throw ArgError("sample: n_steps must be in [1, T]");
    const int stride = T / n_steps;
    std::vector<int> ts;
    for (int t = T; t >= 1 && static_cast<int>(ts.size()) < n_steps; t -= stride) ts.push_back(t);
    return ts;
}

// Strided ancestral DDPM sampler with CFG. Each stride uses the effective
// abar ratio between the selected timesteps; the final step adds no noise;
// output is clamped to [-1, 1].
template <typename T>
Tensor<T> sample(const DenoiseFn<T>& fn, const DiffusionSchedule& sched, std::vector<int> img_shape,
                 const std::vector<int>& token_ids, const std::vector<int>& null_ids, int batch,
                 double omega, int n_steps, Rng& rng) {
    NoGradGuard ng;
    std::vector<int> shape{batch};
    shape.insert(shape.end(), img_shape.begin(), img_shape.end());
    Tensor<T> x = normal_draw<T>(rng, shape);
    const std::vector<int> ts = sampling_timesteps(sched.steps, n_steps);

    for (size_t k = 0; k < ts.size(); ++k) {
        const int t = ts[k];
        const int t_prev = (k + 1 < ts.size()) ? ts[k + 1] : 0;
        const std::vector<int> t_batch(batch, t);

        Tensor<T> eps_hat = fn(x, t_batch, token_ids);
        if (omega > 0.0) eps_hat = cfg_combine(eps_hat, fn(x, t_batch, null_ids), omega);

        const double ab_t = sched.alpha_bar(t);
        const double ab_prev = sched.alpha_bar(t_prev);
        const double alpha_eff = ab_t / ab_prev;
        const double beta_eff = 1.0 - alpha_eff;
        const T coef_eps = static_cast<T>(beta_eff / std::sqrt(1.0 - ab_t));
        const T inv_sqrt_a = static_cast<T>(1.0 / std::sqrt(alpha_eff));

        Tensor<T> z;
        if (t_prev > 0) z = normal_draw<T>(rng, shape);
        const T sigma = static_cast<T>(std::sqrt(beta_eff));
        for (size_t i = 0; i < x.numel(); ++i) {
            T v = inv_sqrt_a * ((*x.data)[i] - coef_eps * (*eps_hat.data)[i]);
            if (t_prev > 0) v += sigma * (*z.data)[i];
            (*x.data)[i] = v;
        }
    }
    for (auto& v : *x.data) v = std::clamp(v, T(-1), T(1));
    return x;
}

struct OptimizerConfig {
    double lr = 2e-4;
    double weight_decay = 0.03;
    double beta1 = 0.9;
    double beta2 = 0.9;
    double eps = 1e-8;
    long long warmup_steps = 5000;

    bool operator==(const OptimizerConfig&) const = default;
};

// AdamW with linear warmup then constant lr.
template <typename T>
class TrainState {
public:
    OptimizerConfig opt;
    double cfg_drop_prob = 0.1;
    long long step = 0;

    explicit TrainState(std::vector<NamedParam<T>> params, OptimizerConfig o = {})
        : opt(o), params_(std::move(params)) {
        for (auto& p : params_) {
            m_.emplace_back(p.tensor.numel(), 0.0);
            v_.emplace_back(p.tensor.numel(), 0.0);
        }
    }

    std::vector<NamedParam<T>>& params() { return params_; }

    double lr_at(long long s) const {
        if (opt.warmup_steps > 0 && s < opt.warmup_steps)
            return opt.lr * static_cast<double>(s) / static_cast<double>(opt.warmup_steps);
        return opt.lr;
    }

    // One AdamW update from the accumulated grads; clears grads after.
    double apply_gradients() {
        ++step;
        const double lr = lr_at(step);
        const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(step));
        const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(step));
        for (size_t pi = 0; pi < params_.size(); ++pi) {
            auto& t = params_[pi].tensor;
            for (size_t i = 0; i < t.numel(); ++i) {
                const double g = static_cast<double>((*t.grad)[i]);
                m_[pi][i] = opt.beta1 * m_[pi][i] + (1.0 - opt.beta1) * g;
                v_[pi][i] = opt.beta2 * v_[pi][i] + (1.0 - opt.beta2) * g * g;
                const double mh = m_[pi][i] / bc1;
                const double vh = v_[pi][i] / bc2;
                double x = static_cast<double>((*t.data)[i]);
                x -= lr * (mh / (std::sqrt(vh) + opt.eps) + opt.weight_decay * x);
                (*t.data)[i] = static_cast<T>(x);
            }
            t.zero_grad();
        }
        return lr;
    }

    double param_norm() const {
        double s = 0;
        for (const auto& p : params_)
            for (T v : *p.tensor.data) s += static_cast<double>(v) * v;
        return std::sqrt(s);
    }

private:
    std::vector<NamedParam<T>> params_;
    std::vector<std::vector<double>> m_, v_;
};

struct TrainItem {
    const float* pixels = nullptr;  // C*S*S, in [-1, 1]
    const int* ids = nullptr;       // text_len token ids
};

template <typename T>
using MetricSink = std::function<void(long long step, double loss, double lr)>;

// Uniform-with-replacement batches, loss, AdamW step, metric emission.
// Aborts with a diagnostic on a non-finite loss.
template <typename T>
void train_loop(TrainState<T>& state, const DenoiseFn<T>& fn, const std::vector<TrainItem>& items,
                std::vector<int> img_shape, int text_len, int null_id, const DiffusionSchedule& sched,
                long long n_steps, int batch_size, Rng& rng, const MetricSink<T>& sink = {}) {
    if (items.empty()) throw ArgError("train_loop: empty dataset");
    const size_t item_numel = shape_numel(img_shape);
    for (long long s = 0; s < n_steps; ++s) {
        std::vector<int> shape{batch_size};
        shape.insert(shape.end(), img_shape.begin(), img_shape.end());
        Tensor<T> x0 = Tensor<T>::zeros(shape);
        std::vector<int> ids(static_cast<size_t>(batch_size) * text_len);
        for (int b = 0; b < batch_size; ++b) {
            const TrainItem& it = items[rng.uniform_index(items.size())];
            for (size_t i = 0; i < item_numel; ++i) (*x0.data)[b * item_numel + i] = static_cast<T>(it.pixels[i]);
            std::copy_n(it.ids, text_len, ids.begin() + static_cast<size_t>(b) * text_len);
        }
        for (auto& p : state.params()) p.tensor.zero_grad();
        LossInfo<T> info = training_loss(fn, x0, ids, text_len, null_id, sched, rng, state.cfg_drop_prob);
        if (!std::isfinite(info.loss))
            throw NumericError("non-finite loss at step " + std::to_string(state.step + 1) + " (lr " +
                               std::to_string(state.lr_at(state.step + 1)) + ", param norm " +
                               std::to_string(state.param_norm()) + ")");
        const double lr = state.apply_gradients();
        if (sink) sink(state.step, info.loss, lr);
    }
}

}  // namespace fdiff

#endif
