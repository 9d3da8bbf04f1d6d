#pragma once

#include <complex>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "kmmvae/autodiff.hpp"
#include "kmmvae/rng.hpp"

namespace kmmvae::models {

using autodiff::Shape;
using autodiff::Tensor;
using cplx = std::complex<double>;

/// Diagonal Gaussian over a real vector: mean and log standard
/// deviation of equal length. Encoder and prior outputs.
struct DiagGaussian {
    Tensor mean;
    Tensor log_std;
};

/// Circularly-symmetric complex Gaussian over R bins: interleaved
/// re/im mean of length 2R and per-bin log std of length R (log of the
/// complex standard deviation, sigma_r^2 = E|x_r - mu_r|^2). Decoder
/// output.
struct ComplexGaussian {
    Tensor mean;    // [2R], re/im interleaved
    Tensor log_std; // [R]
};

struct ArchConfig {
    std::size_t conv_channels1 = 16;
    std::size_t conv_channels2 = 32;
    std::size_t kernel_width = 7;
    std::size_t trunk_width = 128; // encoder head hidden layer
    std::size_t mlp_width = 128;   // prior/decoder hidden layers
    double log_std_min = -6.0;     // hard clamp for encoder/prior log std
    double log_std_max = 3.0;
};

struct ParamRef {
    std::string name;
    Tensor tensor;
};

/// Source of standard-normal draws for reparameterized sampling.
/// Injected so that tests can replay fixed sequences.
class EpsSource {
public:
    virtual ~EpsSource() = default;
    virtual void fill(std::span<double> out) = 0;
};

class RngEps final : public EpsSource {
public:
    explicit RngEps(std::uint64_t seed) : rng_(seed) {}
    void fill(std::span<double> out) override {
        for (double& v : out) v = rng_.normal();
    }

private:
    Rng rng_;
};

/// Replays a frozen buffer; rewind() restarts it (finite-difference
/// checks call the objective many times with identical noise).
class FixedEps final : public EpsSource {
public:
    explicit FixedEps(std::vector<double> values) : values_(std::move(values)) {}
    void fill(std::span<double> out) override;
    void rewind() { pos_ = 0; }

private:
    std::vector<double> values_;
    std::size_t pos_ = 0;
};

class ZeroEps final : public EpsSource {
public:
    void fill(std::span<double> out) override {
        for (double& v : out) v = 0.0;
    }
};

namespace layers {

struct Dense {
    Tensor weights; // [out x in]
    Tensor bias;    // [out]
    Tensor operator()(const Tensor& x) const;
    static Dense init(std::size_t out, std::size_t in, Rng& rng);
};

struct Conv1d {
    Tensor kernels; // [c_out x c_in x w]
    Tensor bias;    // [c_out]
    Tensor operator()(const Tensor& x) const;
    static Conv1d init(std::size_t c_out, std::size_t c_in, std::size_t width, Rng& rng);
};

} // namespace layers

/// Conv stack over the antenna axis, flattened, concatenated with the
/// previous latent, fully-connected head emitting mean and clamped
/// log std.
class EncoderNet {
public:
    static EncoderNet init(std::size_t antennas, std::size_t window, std::size_t latent_in,
                           std::size_t latent_out, const ArchConfig& arch, Rng& rng);

    /// window: [2W x R] re/im channel pairs, oldest snapshot first.
    /// z_prev: [latent_in] or empty when latent_in == 0.
    DiagGaussian forward(const Tensor& window, const Tensor& z_prev) const;

    void collect(std::vector<ParamRef>& out, const std::string& prefix) const;

    std::size_t window_snapshots() const { return window_; }

private:
    std::size_t antennas_ = 0, window_ = 0, latent_in_ = 0;
    double clamp_lo_ = -6.0, clamp_hi_ = 3.0;
    layers::Conv1d conv1_, conv2_;
    layers::Dense trunk_, mean_head_, log_std_head_;
};

/// Markov transition p(z_i | z_{i-1}). The first snapshot carries a
/// learnable unconditional Gaussian instead of a network.
class PriorNet {
public:
    static PriorNet init_unconditional(std::size_t latent, const ArchConfig& arch, Rng& rng);
    static PriorNet init_conditional(std::size_t latent, const ArchConfig& arch, Rng& rng);

    DiagGaussian forward(const Tensor& z_prev) const;
    bool unconditional() const { return unconditional_; }
    void collect(std::vector<ParamRef>& out, const std::string& prefix) const;

private:
    bool unconditional_ = false;
    double clamp_lo_ = -6.0, clamp_hi_ = 3.0;
    Tensor const_mean_, const_log_std_; // unconditional case
    layers::Dense hidden1_, hidden2_, mean_head_, log_std_head_;
};

/// Fully-connected net from a latent window to the complex channel
/// distribution of one snapshot.
class DecoderNet {
public:
    static DecoderNet init(std::size_t antennas, std::size_t latent_window_dim,
                           const ArchConfig& arch, Rng& rng);

    ComplexGaussian forward(const Tensor& z_window) const;
    void collect(std::vector<ParamRef>& out, const std::string& prefix) const;

    std::size_t input_dim() const { return input_dim_; }

private:
    std::size_t input_dim_ = 0;
    layers::Dense hidden1_, hidden2_, mean_head_, log_std_head_;
};

/// Per-snapshot encoder/prior/decoder parameter sets of the k-memory
/// Markov VAE; no parameter sharing between snapshots.
struct KmmvaeParams {
    std::size_t snapshots = 0;  // I
    std::size_t antennas = 0;   // R
    std::size_t memory = 0;     // k
    std::size_t latent_dim = 0; // d_z
    ArchConfig arch;
    std::vector<EncoderNet> encoders;
    std::vector<PriorNet> priors;
    std::vector<DecoderNet> decoders;

    static KmmvaeParams init(std::size_t snapshots, std::size_t antennas, std::size_t memory,
                             std::size_t latent_dim, const ArchConfig& arch, std::uint64_t seed);

    std::vector<ParamRef> parameters() const;

    /// Window length min(k, i-1)+1 of snapshot i (1-based).
    std::size_t window(std::size_t i) const {
        return std::min(memory, i - 1) + 1;
    }
};

/// Standard VAE over one snapshot (input_snapshots == 1) or the whole
/// stacked trajectory with one target snapshot (TSVAE).
struct VaeParams {
    std::size_t antennas = 0;
    std::size_t latent_dim = 0;
    std::size_t input_snapshots = 1;
    std::size_t target_snapshot = 1; // 1-based, meaningful for TSVAE
    ArchConfig arch;
    EncoderNet encoder;
    DecoderNet decoder;

    static VaeParams init(std::size_t antennas, std::size_t latent_dim,
                          std::size_t input_snapshots, std::size_t target_snapshot,
                          const ArchConfig& arch, std::uint64_t seed);

    std::vector<ParamRef> parameters() const;
};

using TsvaeParams = VaeParams;

// ---- packing helpers (complex observations -> real channel tensors) ----

/// [2W x R] constant tensor from W consecutive DFT-domain snapshots.
Tensor pack_snapshots(std::span<const cplx> obs, std::size_t antennas, std::size_t first,
                      std::size_t count);

/// Window x_{i-k:i} truncated at the sequence start, for snapshot i (1-based).
Tensor pack_window(std::span<const cplx> obs, std::size_t antennas, std::size_t i, std::size_t memory);

/// [2R] interleaved constant from one complex vector.
Tensor pack_interleaved(std::span<const cplx> x);

// ---- spec operation surface ----

Tensor first_step_sentinel(std::size_t latent_dim); // all-ones vector

DiagGaussian encoder_step(const KmmvaeParams& params, std::size_t i, const Tensor& z_prev,
                          const Tensor& y_window);
DiagGaussian prior_step(const KmmvaeParams& params, std::size_t i, const Tensor& z_prev);
ComplexGaussian decoder_step(const KmmvaeParams& params, std::size_t i, const Tensor& z_window);

/// mean + std (.) eps
Tensor reparameterize(const DiagGaussian& g, const Tensor& eps);

/// KL(q || p), closed form, summed over dimensions (rank-0 tensor).
Tensor kl_diag_gaussian(const DiagGaussian& q, const DiagGaussian& p);
/// Per-dimension KL contributions (for free-bits flooring).
Tensor kl_per_dim(const DiagGaussian& q, const DiagGaussian& p);

/// sum_r [ -log(pi sigma_r^2) - |x_r - mu_r|^2 / sigma_r^2 ]
Tensor complex_gaussian_loglik(const Tensor& x_interleaved, const ComplexGaussian& g);

struct VaeSample {
    std::span<const cplx> target;      // x_i, DFT domain, length R
    std::span<const cplx> observation; // y, DFT domain, input_snapshots * R
};

struct TrajectorySample {
    std::span<const cplx> clean; // x_{1:I}, DFT domain, I x R
    std::span<const cplx> noisy; // y_{1:I}, DFT domain, I x R
};

/// Single-sample Monte-Carlo ELBO of the standard VAE, batch averaged.
/// free_bits > 0 floors each latent dimension's KL at that value.
Tensor elbo_standard(std::span<const VaeSample> batch, const VaeParams& params, EpsSource& eps,
                     double free_bits = 0.0);

/// Iterative-sampling ELBO of the k-memory Markov VAE, batch averaged.
Tensor elbo_dvae(std::span<const TrajectorySample> batch, const KmmvaeParams& params,
                 EpsSource& eps, double free_bits = 0.0);

/// Deterministic encoder chain feeding posterior means forward; returns
/// mu_{phi,1:i}. Read-only, safe to call concurrently.
std::vector<std::vector<double>> infer_mean_path(const KmmvaeParams& params,
                                                 std::span<const cplx> noisy, std::size_t upto);

} // namespace kmmvae::models
