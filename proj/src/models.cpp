#include "kmmvae/models.hpp"

#include <cmath>

namespace kmmvae::models {

namespace ad = kmmvae::autodiff;

namespace {

constexpr double kLogPi = 1.1447298858494001741434273513531;

std::vector<double> fan_in_uniform(std::size_t count, std::size_t fan_in, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::vector<double> v(count);
    for (double& x : v) x = rng.uniform(-bound, bound);
    return v;
}

} // namespace

void FixedEps::fill(std::span<double> out) {
    if (pos_ + out.size() > values_.size())
        throw contract_error("fixed eps buffer exhausted");
    for (double& v : out) v = values_[pos_++];
}

namespace layers {

Tensor Dense::operator()(const Tensor& x) const { return ad::add(ad::matmul(weights, x), bias); }

Dense Dense::init(std::size_t out, std::size_t in, Rng& rng) {
    Dense d;
    d.weights = Tensor::variable(Shape{out, in}, fan_in_uniform(out * in, in, rng));
    d.bias = Tensor::variable(Shape{out}, std::vector<double>(out, 0.0));
    return d;
}

Tensor Conv1d::operator()(const Tensor& x) const { return ad::conv1d(x, kernels, bias); }

Conv1d Conv1d::init(std::size_t c_out, std::size_t c_in, std::size_t width, Rng& rng) {
    Conv1d c;
    c.kernels = Tensor::variable(Shape{c_out, c_in, width},
                                 fan_in_uniform(c_out * c_in * width, c_in * width, rng));
    c.bias = Tensor::variable(Shape{c_out}, std::vector<double>(c_out, 0.0));
    return c;
}

} // namespace layers

// ---- EncoderNet ----

EncoderNet EncoderNet::init(std::size_t antennas, std::size_t window, std::size_t latent_in,
                            std::size_t latent_out, const ArchConfig& arch, Rng& rng) {
    EncoderNet e;
    e.antennas_ = antennas;
    e.window_ = window;
    e.latent_in_ = latent_in;
    e.clamp_lo_ = arch.log_std_min;
    e.clamp_hi_ = arch.log_std_max;
    e.conv1_ = layers::Conv1d::init(arch.conv_channels1, 2 * window, arch.kernel_width, rng);
    e.conv2_ = layers::Conv1d::init(arch.conv_channels2, arch.conv_channels1, arch.kernel_width, rng);
    const std::size_t flat = arch.conv_channels2 * antennas + latent_in;
    e.trunk_ = layers::Dense::init(arch.trunk_width, flat, rng);
    e.mean_head_ = layers::Dense::init(latent_out, arch.trunk_width, rng);
    e.log_std_head_ = layers::Dense::init(latent_out, arch.trunk_width, rng);
    return e;
}

DiagGaussian EncoderNet::forward(const Tensor& window, const Tensor& z_prev) const {
    if (window.shape() != Shape{2 * window_, antennas_})
        throw contract_error("encoder window shape " + window.shape().str() + ", expected [" +
                             std::to_string(2 * window_) + "x" + std::to_string(antennas_) + "]");
    Tensor h = ad::relu(conv1_(window));
    h = ad::relu(conv2_(h));
    Tensor flat = ad::reshape(h, Shape{h.size()});
    if (latent_in_ > 0) {
        if (!z_prev.defined() || z_prev.size() != latent_in_)
            throw contract_error("encoder latent input size mismatch");
        flat = ad::concat({flat, z_prev}, 0);
    }
    Tensor trunk = ad::relu(trunk_(flat));
    return {mean_head_(trunk), ad::clamp(log_std_head_(trunk), clamp_lo_, clamp_hi_)};
}

void EncoderNet::collect(std::vector<ParamRef>& out, const std::string& prefix) const {
    out.push_back({prefix + ".conv1.kernels", conv1_.kernels});
    out.push_back({prefix + ".conv1.bias", conv1_.bias});
    out.push_back({prefix + ".conv2.kernels", conv2_.kernels});
    out.push_back({prefix + ".conv2.bias", conv2_.bias});
    out.push_back({prefix + ".trunk.weights", trunk_.weights});
    out.push_back({prefix + ".trunk.bias", trunk_.bias});
    out.push_back({prefix + ".mean.weights", mean_head_.weights});
    out.push_back({prefix + ".mean.bias", mean_head_.bias});
    out.push_back({prefix + ".log_std.weights", log_std_head_.weights});
    out.push_back({prefix + ".log_std.bias", log_std_head_.bias});
}

// ---- PriorNet ----

PriorNet PriorNet::init_unconditional(std::size_t latent, const ArchConfig& arch, Rng& rng) {
    (void)rng;
    PriorNet p;
    p.unconditional_ = true;
    p.clamp_lo_ = arch.log_std_min;
    p.clamp_hi_ = arch.log_std_max;
    p.const_mean_ = Tensor::variable(Shape{latent}, std::vector<double>(latent, 0.0));
    p.const_log_std_ = Tensor::variable(Shape{latent}, std::vector<double>(latent, 0.0));
    return p;
}

PriorNet PriorNet::init_conditional(std::size_t latent, const ArchConfig& arch, Rng& rng) {
    PriorNet p;
    p.unconditional_ = false;
    p.clamp_lo_ = arch.log_std_min;
    p.clamp_hi_ = arch.log_std_max;
    p.hidden1_ = layers::Dense::init(arch.mlp_width, latent, rng);
    p.hidden2_ = layers::Dense::init(arch.mlp_width, arch.mlp_width, rng);
    p.mean_head_ = layers::Dense::init(latent, arch.mlp_width, rng);
    p.log_std_head_ = layers::Dense::init(latent, arch.mlp_width, rng);
    return p;
}

DiagGaussian PriorNet::forward(const Tensor& z_prev) const {
    if (unconditional_)
        return {const_mean_, ad::clamp(const_log_std_, clamp_lo_, clamp_hi_)};
    if (!z_prev.defined()) throw contract_error("conditional prior needs z_prev");
    Tensor h = ad::relu(hidden1_(z_prev));
    h = ad::relu(hidden2_(h));
    return {mean_head_(h), ad::clamp(log_std_head_(h), clamp_lo_, clamp_hi_)};
}

void PriorNet::collect(std::vector<ParamRef>& out, const std::string& prefix) const {
    if (unconditional_) {
        out.push_back({prefix + ".mean", const_mean_});
        out.push_back({prefix + ".log_std", const_log_std_});
        return;
    }
    out.push_back({prefix + ".hidden1.weights", hidden1_.weights});
    out.push_back({prefix + ".hidden1.bias", hidden1_.bias});
    out.push_back({prefix + ".hidden2.weights", hidden2_.weights});
    out.push_back({prefix + ".hidden2.bias", hidden2_.bias});
    out.push_back({prefix + ".mean.weights", mean_head_.weights});
    out.push_back({prefix + ".mean.bias", mean_head_.bias});
    out.push_back({prefix + ".log_std.weights", log_std_head_.weights});
    out.push_back({prefix + ".log_std.bias", log_std_head_.bias});
}

// ---- DecoderNet ----

DecoderNet DecoderNet::init(std::size_t antennas, std::size_t latent_window_dim,
                            const ArchConfig& arch, Rng& rng) {
    DecoderNet d;
    d.input_dim_ = latent_window_dim;
    d.hidden1_ = layers::Dense::init(arch.mlp_width, latent_window_dim, rng);
    d.hidden2_ = layers::Dense::init(arch.mlp_width, arch.mlp_width, rng);
    d.mean_head_ = layers::Dense::init(2 * antennas, arch.mlp_width, rng);
    d.log_std_head_ = layers::Dense::init(antennas, arch.mlp_width, rng);
    return d;
}

ComplexGaussian DecoderNet::forward(const Tensor& z_window) const {
    if (!z_window.defined() || z_window.size() != input_dim_)
        throw contract_error("decoder latent window size " +
                             std::to_string(z_window.defined() ? z_window.size() : 0) +
                             ", expected " + std::to_string(input_dim_));
    Tensor h = ad::relu(hidden1_(z_window));
    h = ad::relu(hidden2_(h));
    return {mean_head_(h), log_std_head_(h)};
}

void DecoderNet::collect(std::vector<ParamRef>& out, const std::string& prefix) const {
    out.push_back({prefix + ".hidden1.weights", hidden1_.weights});
    out.push_back({prefix + ".hidden1.bias", hidden1_.bias});
    out.push_back({prefix + ".hidden2.weights", hidden2_.weights});
    out.push_back({prefix + ".hidden2.bias", hidden2_.bias});
    out.push_back({prefix + ".mean.weights", mean_head_.weights});
    out.push_back({prefix + ".mean.bias", mean_head_.bias});
    out.push_back({prefix + ".log_std.weights", log_std_head_.weights});
    out.push_back({prefix + ".log_std.bias", log_std_head_.bias});
}

// ---- parameter sets ----

KmmvaeParams KmmvaeParams::init(std::size_t snapshots, std::size_t antennas, std::size_t memory,
                                std::size_t latent_dim, const ArchConfig& arch,
                                std::uint64_t seed) {
    if (snapshots == 0 || antennas == 0 || latent_dim == 0)
        throw config_error("kmmvae needs snapshots, antennas and latent_dim >= 1");
    KmmvaeParams p;
    p.snapshots = snapshots;
    p.antennas = antennas;
    p.memory = memory;
    p.latent_dim = latent_dim;
    p.arch = arch;
    Rng rng(mix_seed(seed, 0x4b4d4d56));
    for (std::size_t i = 1; i <= snapshots; ++i) {
        const std::size_t win = p.window(i);
        p.encoders.push_back(EncoderNet::init(antennas, win, latent_dim, latent_dim, arch, rng));
    }
    for (std::size_t i = 1; i <= snapshots; ++i) {
        p.priors.push_back(i == 1 ? PriorNet::init_unconditional(latent_dim, arch, rng)
                                  : PriorNet::init_conditional(latent_dim, arch, rng));
    }
    for (std::size_t i = 1; i <= snapshots; ++i) {
        const std::size_t win = p.window(i);
        p.decoders.push_back(DecoderNet::init(antennas, win * latent_dim, arch, rng));
    }
    return p;
}

std::vector<ParamRef> KmmvaeParams::parameters() const {
    std::vector<ParamRef> out;
    for (std::size_t i = 0; i < encoders.size(); ++i)
        encoders[i].collect(out, "encoder" + std::to_string(i + 1));
    for (std::size_t i = 0; i < priors.size(); ++i)
        priors[i].collect(out, "prior" + std::to_string(i + 1));
    for (std::size_t i = 0; i < decoders.size(); ++i)
        decoders[i].collect(out, "decoder" + std::to_string(i + 1));
    return out;
}

VaeParams VaeParams::init(std::size_t antennas, std::size_t latent_dim,
                          std::size_t input_snapshots, std::size_t target_snapshot,
                          const ArchConfig& arch, std::uint64_t seed) {
    if (antennas == 0 || latent_dim == 0 || input_snapshots == 0)
        throw config_error("vae needs antennas, latent_dim and input_snapshots >= 1");
    VaeParams p;
    p.antennas = antennas;
    p.latent_dim = latent_dim;
    p.input_snapshots = input_snapshots;
    p.target_snapshot = target_snapshot;
    p.arch = arch;
    Rng rng(mix_seed(seed, 0x564145));
    p.encoder = EncoderNet::init(antennas, input_snapshots, 0, latent_dim, arch, rng);
    p.decoder = DecoderNet::init(antennas, latent_dim, arch, rng);
    return p;
}

std::vector<ParamRef> VaeParams::parameters() const {
    std::vector<ParamRef> out;
    encoder.collect(out, "encoder");
    decoder.collect(out, "decoder");
    return out;
}

// ---- packing ----

Tensor pack_snapshots(std::span<const cplx> obs, std::size_t antennas, std::size_t first,
                      std::size_t count) {
    if ((first + count) * antennas > obs.size())
        throw contract_error("observation window out of range");
    std::vector<double> v(2 * count * antennas);
    for (std::size_t j = 0; j < count; ++j) {
        const cplx* src = obs.data() + (first + j) * antennas;
        double* re = v.data() + (2 * j) * antennas;
        double* im = v.data() + (2 * j + 1) * antennas;
        for (std::size_t r = 0; r < antennas; ++r) {
            re[r] = src[r].real();
            im[r] = src[r].imag();
        }
    }
    return Tensor::constant(Shape{2 * count, antennas}, std::move(v));
}

Tensor pack_window(std::span<const cplx> obs, std::size_t antennas, std::size_t i,
                   std::size_t memory) {
    if (i == 0) throw contract_error("snapshot index is 1-based");
    const std::size_t win = std::min(memory, i - 1) + 1;
    return pack_snapshots(obs, antennas, i - win, win);
}

Tensor pack_interleaved(std::span<const cplx> x) {
    const std::size_t n = 2 * x.size();
    std::vector<double> v(n);
    for (std::size_t r = 0; r < x.size(); ++r) {
        v[2 * r] = x[r].real();
        v[2 * r + 1] = x[r].imag();
    }
    return Tensor::constant(Shape{n}, std::move(v));
}

// ---- operation surface ----

Tensor first_step_sentinel(std::size_t latent_dim) { return Tensor::ones(Shape{latent_dim}); }

DiagGaussian encoder_step(const KmmvaeParams& params, std::size_t i, const Tensor& z_prev,
                          const Tensor& y_window) {
    if (i == 0 || i > params.snapshots) throw contract_error("encoder_step index out of range");
    return params.encoders[i - 1].forward(y_window, z_prev);
}

DiagGaussian prior_step(const KmmvaeParams& params, std::size_t i, const Tensor& z_prev) {
    if (i == 0 || i > params.snapshots) throw contract_error("prior_step index out of range");
    return params.priors[i - 1].forward(z_prev);
}

ComplexGaussian decoder_step(const KmmvaeParams& params, std::size_t i, const Tensor& z_window) {
    if (i == 0 || i > params.snapshots) throw contract_error("decoder_step index out of range");
    return params.decoders[i - 1].forward(z_window);
}

Tensor reparameterize(const DiagGaussian& g, const Tensor& eps) {
    if (eps.size() != g.mean.size()) throw contract_error("eps length mismatch");
    return ad::add(g.mean, ad::mul(ad::exp(g.log_std), eps));
}

Tensor kl_per_dim(const DiagGaussian& q, const DiagGaussian& p) {
    if (q.mean.size() != p.mean.size()) throw contract_error("KL dimension mismatch");
    Tensor log_ratio = ad::sub(p.log_std, q.log_std);
    Tensor var_q = ad::exp(ad::mul_scalar(q.log_std, 2.0));
    Tensor dmean2 = ad::square(ad::sub(q.mean, p.mean));
    Tensor inv_two_var_p = ad::mul_scalar(ad::exp(ad::mul_scalar(p.log_std, -2.0)), 0.5);
    Tensor quad = ad::mul(ad::add(var_q, dmean2), inv_two_var_p);
    return ad::add_scalar(ad::add(log_ratio, quad), -0.5);
}

Tensor kl_diag_gaussian(const DiagGaussian& q, const DiagGaussian& p) {
    return ad::sum(kl_per_dim(q, p));
}

Tensor complex_gaussian_loglik(const Tensor& x_interleaved, const ComplexGaussian& g) {
    const std::size_t bins = g.log_std.size();
    if (x_interleaved.size() != 2 * bins || g.mean.size() != 2 * bins)
        throw contract_error("loglik dimension mismatch");
    Tensor resid2 = ad::square(ad::sub(x_interleaved, g.mean));
    Tensor per_bin = ad::sum(ad::reshape(resid2, Shape{bins, 2}), 1);
    Tensor inv_var = ad::exp(ad::mul_scalar(g.log_std, -2.0));
    Tensor nll = ad::add(ad::add_scalar(ad::mul_scalar(g.log_std, 2.0), kLogPi),
                         ad::mul(per_bin, inv_var));
    return ad::negate(ad::sum(nll));
}

namespace {

Tensor floor_free_bits(const Tensor& kl_dims, double free_bits) {
    if (free_bits <= 0.0) return ad::sum(kl_dims);
    // lambda + relu(kl - lambda), per dimension
    Tensor floored = ad::add_scalar(ad::relu(ad::add_scalar(kl_dims, -free_bits)), free_bits);
    return ad::sum(floored);
}

DiagGaussian standard_normal(std::size_t dim) {
    return {Tensor::zeros(Shape{dim}), Tensor::zeros(Shape{dim})};
}

Tensor draw_eps(EpsSource& eps, std::size_t dim) {
    std::vector<double> buf(dim);
    eps.fill(buf);
    return Tensor::constant(Shape{dim}, std::move(buf));
}

} // namespace

Tensor elbo_standard(std::span<const VaeSample> batch, const VaeParams& params, EpsSource& eps,
                     double free_bits) {
    if (batch.empty()) throw contract_error("empty batch");
    Tensor total = Tensor::scalar(0.0);
    const DiagGaussian prior = standard_normal(params.latent_dim);
    for (const VaeSample& s : batch) {
        Tensor obs = pack_snapshots(s.observation, params.antennas, 0, params.input_snapshots);
        DiagGaussian q = params.encoder.forward(obs, Tensor());
        Tensor z = reparameterize(q, draw_eps(eps, params.latent_dim));
        ComplexGaussian dec = params.decoder.forward(z);
        Tensor ll = complex_gaussian_loglik(pack_interleaved(s.target), dec);
        Tensor kl = floor_free_bits(kl_per_dim(q, prior), free_bits);
        total = ad::add(total, ad::sub(ll, kl));
    }
    return ad::mul_scalar(total, 1.0 / static_cast<double>(batch.size()));
}

Tensor elbo_dvae(std::span<const TrajectorySample> batch, const KmmvaeParams& params,
                 EpsSource& eps, double free_bits) {
    if (batch.empty()) throw contract_error("empty batch");
    const std::size_t I = params.snapshots;
    const std::size_t R = params.antennas;
    const std::size_t dz = params.latent_dim;
    Tensor total = Tensor::scalar(0.0);
    for (const TrajectorySample& s : batch) {
        if (s.clean.size() != I * R || s.noisy.size() != I * R)
            throw contract_error("trajectory sample extent mismatch");
        std::vector<Tensor> sampled; // z~_1 .. z~_i
        Tensor z_prev = first_step_sentinel(dz);
        Tensor acc = Tensor::scalar(0.0);
        for (std::size_t i = 1; i <= I; ++i) {
            Tensor window = pack_window(s.noisy, R, i, params.memory);
            DiagGaussian q = encoder_step(params, i, z_prev, window);
            Tensor z = reparameterize(q, draw_eps(eps, dz));
            sampled.push_back(z);

            DiagGaussian p = i == 1 ? prior_step(params, 1, Tensor())
                                    : prior_step(params, i, sampled[i - 2]);
            Tensor kl = floor_free_bits(kl_per_dim(q, p), free_bits);

            const std::size_t win = params.window(i);
            Tensor z_window = win == 1
                                  ? z
                                  : ad::concat(std::span<const Tensor>(sampled.data() + (i - win),
                                                                       win),
                                               0);
            ComplexGaussian dec = decoder_step(params, i, z_window);
            Tensor x_i = pack_interleaved(s.clean.subspan((i - 1) * R, R));
            acc = ad::add(acc, ad::sub(complex_gaussian_loglik(x_i, dec), kl));
            z_prev = z;
        }
        total = ad::add(total, acc);
    }
    return ad::mul_scalar(total, 1.0 / static_cast<double>(batch.size()));
}

std::vector<std::vector<double>> infer_mean_path(const KmmvaeParams& params,
                                                 std::span<const cplx> noisy, std::size_t upto) {
    if (upto == 0 || upto > params.snapshots) throw contract_error("snapshot index out of range");
    if (noisy.size() < upto * params.antennas)
        throw contract_error("observation sequence shorter than requested snapshot");
    std::vector<std::vector<double>> means;
    means.reserve(upto);
    Tensor z_prev = first_step_sentinel(params.latent_dim);
    for (std::size_t i = 1; i <= upto; ++i) {
        Tensor window = pack_window(noisy, params.antennas, i, params.memory);
        DiagGaussian q = encoder_step(params, i, z_prev, window);
        means.emplace_back(q.mean.values().begin(), q.mean.values().end());
        z_prev = q.mean;
    }
    return means;
}

} // namespace kmmvae::models
