#pragma once

#include <complex>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "kmmvae/chansim.hpp"
#include "kmmvae/models.hpp"

namespace kmmvae::estimators {

using cplx = std::complex<double>;

/// Estimated channel for one snapshot, antenna domain.
struct EstimateResult {
    std::vector<cplx> channel; // length R
    bool used_pseudo_inverse = false;
};

/// Per-bin LMMSE with diagonal prior covariance:
/// h_r = mu_r + var_r / (var_r + noise_var) * (y_r - mu_r).
/// A bin with var_r + noise_var == 0 keeps mu_r (gain 0).
std::vector<cplx> lmmse_filter(std::span<const cplx> mu, std::span<const double> var,
                               std::span<const cplx> y, double noise_var);

/// h_hat = y (inverse DFT of the observation).
EstimateResult ls_estimate(const chansim::ObservationSequence& obs, std::size_t snapshot);

/// Sample mean and covariance (divisor N) of the channels at one
/// snapshot, antenna domain.
struct SampleCovModel {
    Eigen::VectorXcd mean;
    Eigen::MatrixXcd cov;
};

SampleCovModel fit_sample_cov(std::span<const chansim::Trajectory> dataset, std::size_t snapshot);
SampleCovModel fit_sample_cov_vectors(std::span<const std::vector<cplx>> samples);

/// h_hat = h_bar + C (C + noise_var I)^{-1} (y - h_bar), full matrix,
/// antenna domain. Falls back to a pseudo-inverse (singular values below
/// 1e-12 of the largest treated as zero) when the system is singular.
EstimateResult scov_lmmse_estimate(const SampleCovModel& model, std::span<const cplx> y_antenna,
                                   double noise_var);

/// Memoryless VAE estimator: encoder mean -> decoder moments ->
/// per-bin LMMSE -> inverse DFT. y is one DFT-domain snapshot.
EstimateResult vae_estimate(const models::VaeParams& params, std::span<const cplx> y_dft,
                            double noise_var);

/// TSVAE estimator: whole stacked trajectory in, decoder targets the
/// trained snapshot; filtering against y at that snapshot.
EstimateResult tsvae_estimate(const models::TsvaeParams& params, std::span<const cplx> y_all_dft,
                              double noise_var);

/// kMMVAE estimator at snapshot i: mean-propagation inference up to i,
/// decoder over the latent mean window, per-bin LMMSE, inverse DFT.
EstimateResult kmmvae_estimate(const models::KmmvaeParams& params, std::span<const cplx> y_dft,
                               double noise_var, std::size_t snapshot);

/// Exact MMSE on the Gauss-Markov channel: per-bin scalar Kalman filter
/// (predict with a, update with noise_var), filtered mean at the last
/// provided snapshot. Observations are DFT domain, snapshots * R.
EstimateResult kalman_oracle(const chansim::GaussMarkovConfig& cfg, std::span<const cplx> y_dft,
                             double noise_var, std::size_t snapshot);

/// Exact log-likelihood of DFT-domain observations under the
/// Gauss-Markov model by prediction-error decomposition. noise_var == 0
/// evaluates the process density of noiseless trajectories.
double kalman_loglik(const chansim::GaussMarkovConfig& cfg, std::span<const cplx> x_dft,
                     std::size_t snapshots, double noise_var);

} // namespace kmmvae::estimators
