#include "kmmvae/estimators.hpp"

#include <cmath>

namespace kmmvae::estimators {

namespace {

EstimateResult to_antenna(const std::vector<cplx>& dft_domain) {
    EstimateResult res;
    res.channel = chansim::dft_inverse(dft_domain);
    return res;
}

/// Decoder output -> (complex means, complex variances).
void unpack_decoder(const models::ComplexGaussian& g, std::vector<cplx>& mu,
                    std::vector<double>& var) {
    const std::size_t bins = g.log_std.size();
    mu.resize(bins);
    var.resize(bins);
    auto mv = g.mean.values();
    auto lv = g.log_std.values();
    for (std::size_t r = 0; r < bins; ++r) {
        mu[r] = {mv[2 * r], mv[2 * r + 1]};
        var[r] = std::exp(2.0 * lv[r]);
    }
}

} // namespace

std::vector<cplx> lmmse_filter(std::span<const cplx> mu, std::span<const double> var,
                               std::span<const cplx> y, double noise_var) {
    if (mu.size() != var.size() || mu.size() != y.size())
        throw dimension_error("lmmse_filter operand lengths differ");
    if (noise_var < 0.0) throw config_error("noise_var must be >= 0");
    std::vector<cplx> out(mu.size());
    for (std::size_t r = 0; r < mu.size(); ++r) {
        const double denom = var[r] + noise_var;
        const double gain = denom > 0.0 ? var[r] / denom : 0.0;
        out[r] = mu[r] + gain * (y[r] - mu[r]);
    }
    return out;
}

EstimateResult ls_estimate(const chansim::ObservationSequence& obs, std::size_t snapshot) {
    if (snapshot == 0 || snapshot > obs.snapshots)
        throw contract_error("snapshot index out of range");
    auto y = obs.snapshot(snapshot - 1);
    return to_antenna(std::vector<cplx>(y.begin(), y.end()));
}

SampleCovModel fit_sample_cov_vectors(std::span<const std::vector<cplx>> samples) {
    const std::size_t n = samples.size();
    if (n < 2) throw data_error("sample covariance needs at least 2 samples");
    const std::size_t dim = samples[0].size();
    Eigen::VectorXcd mean = Eigen::VectorXcd::Zero(dim);
    for (const auto& s : samples) {
        if (s.size() != dim) throw dimension_error("mixed sample dimensions");
        for (std::size_t r = 0; r < dim; ++r) mean(static_cast<Eigen::Index>(r)) += s[r];
    }
    mean /= static_cast<double>(n);
    Eigen::MatrixXcd cov = Eigen::MatrixXcd::Zero(dim, dim);
    Eigen::VectorXcd centered(dim);
    for (const auto& s : samples) {
        for (std::size_t r = 0; r < dim; ++r)
            centered(static_cast<Eigen::Index>(r)) = s[r] - mean(static_cast<Eigen::Index>(r));
        cov.noalias() += centered * centered.adjoint();
    }
    cov /= static_cast<double>(n);
    return {std::move(mean), std::move(cov)};
}

SampleCovModel fit_sample_cov(std::span<const chansim::Trajectory> dataset, std::size_t snapshot) {
    if (dataset.size() < 2) throw data_error("sample covariance needs at least 2 trajectories");
    if (snapshot == 0 || snapshot > dataset[0].snapshots)
        throw contract_error("snapshot index out of range");
    std::vector<std::vector<cplx>> samples;
    samples.reserve(dataset.size());
    for (const auto& t : dataset) {
        auto s = t.snapshot(snapshot - 1);
        samples.emplace_back(s.begin(), s.end());
    }
    return fit_sample_cov_vectors(samples);
}

EstimateResult scov_lmmse_estimate(const SampleCovModel& model, std::span<const cplx> y_antenna,
                                   double noise_var) {
    const Eigen::Index dim = model.mean.size();
    if (static_cast<Eigen::Index>(y_antenna.size()) != dim)
        throw dimension_error("observation length does not match the model");
    if (noise_var < 0.0) throw config_error("noise_var must be >= 0");

    Eigen::VectorXcd resid(dim);
    for (Eigen::Index r = 0; r < dim; ++r)
        resid(r) = y_antenna[static_cast<std::size_t>(r)] - model.mean(r);

    Eigen::MatrixXcd system = model.cov;
    for (Eigen::Index r = 0; r < dim; ++r) system(r, r) += noise_var;

    EstimateResult res;
    Eigen::VectorXcd w;
    if (noise_var > 0.0) {
        w = system.ldlt().solve(resid);
    } else {
        // noiseless observation of a possibly rank-deficient prior
        Eigen::JacobiSVD<Eigen::MatrixXcd> svd(system,
                                               Eigen::ComputeThinU | Eigen::ComputeThinV);
        const double cutoff = 1e-12 * svd.singularValues()(0);
        if (svd.singularValues()(dim - 1) <= cutoff) res.used_pseudo_inverse = true;
        svd.setThreshold(1e-12);
        w = svd.solve(resid);
    }
    Eigen::VectorXcd est = model.mean + model.cov * w;
    res.channel.resize(static_cast<std::size_t>(dim));
    for (Eigen::Index r = 0; r < dim; ++r) res.channel[static_cast<std::size_t>(r)] = est(r);
    return res;
}

EstimateResult vae_estimate(const models::VaeParams& params, std::span<const cplx> y_dft,
                            double noise_var) {
    if (y_dft.size() != params.antennas * params.input_snapshots)
        throw contract_error("observation length mismatch");
    models::Tensor obs = models::pack_snapshots(y_dft, params.antennas, 0, params.input_snapshots);
    models::DiagGaussian q = params.encoder.forward(obs, models::Tensor());
    models::ComplexGaussian dec = params.decoder.forward(q.mean);
    std::vector<cplx> mu;
    std::vector<double> var;
    unpack_decoder(dec, mu, var);
    return to_antenna(lmmse_filter(mu, var, y_dft, noise_var));
}

EstimateResult tsvae_estimate(const models::TsvaeParams& params, std::span<const cplx> y_all_dft,
                              double noise_var) {
    if (y_all_dft.size() != params.antennas * params.input_snapshots)
        throw contract_error("trajectory observation length mismatch");
    models::Tensor obs = models::pack_snapshots(y_all_dft, params.antennas, 0, params.input_snapshots);
    models::DiagGaussian q = params.encoder.forward(obs, models::Tensor());
    models::ComplexGaussian dec = params.decoder.forward(q.mean);
    std::vector<cplx> mu;
    std::vector<double> var;
    unpack_decoder(dec, mu, var);
    auto y_target = y_all_dft.subspan((params.target_snapshot - 1) * params.antennas,
                                      params.antennas);
    return to_antenna(lmmse_filter(mu, var, y_target, noise_var));
}

EstimateResult kmmvae_estimate(const models::KmmvaeParams& params, std::span<const cplx> y_dft,
                               double noise_var, std::size_t snapshot) {
    if (snapshot == 0 || snapshot > params.snapshots)
        throw contract_error("snapshot index out of range");
    if (y_dft.size() < snapshot * params.antennas)
        throw contract_error("observation sequence too short");

    auto means = models::infer_mean_path(params, y_dft, snapshot);
    const std::size_t win = params.window(snapshot);
    std::vector<double> z_window;
    z_window.reserve(win * params.latent_dim);
    for (std::size_t j = snapshot - win; j < snapshot; ++j)
        z_window.insert(z_window.end(), means[j].begin(), means[j].end());
    models::ComplexGaussian dec = models::decoder_step(
        params, snapshot,
        models::Tensor::constant(models::Shape{z_window.size()}, std::move(z_window)));

    std::vector<cplx> mu;
    std::vector<double> var;
    unpack_decoder(dec, mu, var);
    auto y_i = y_dft.subspan((snapshot - 1) * params.antennas, params.antennas);
    return to_antenna(lmmse_filter(mu, var, y_i, noise_var));
}

EstimateResult kalman_oracle(const chansim::GaussMarkovConfig& cfg, std::span<const cplx> y_dft,
                             double noise_var, std::size_t snapshot) {
    const std::size_t bins = cfg.bin_variances.size();
    if (snapshot == 0 || y_dft.size() < snapshot * bins)
        throw contract_error("observation sequence too short");
    if (noise_var < 0.0) throw config_error("noise_var must be >= 0");
    const double a = cfg.ar_coeff;

    std::vector<cplx> m(bins, cplx{0.0, 0.0});
    std::vector<double> p(bins);
    for (std::size_t r = 0; r < bins; ++r) p[r] = cfg.bin_variances[r];

    for (std::size_t i = 0; i < snapshot; ++i) {
        for (std::size_t r = 0; r < bins; ++r) {
            double p_pred = p[r];
            cplx m_pred = m[r];
            if (i > 0) {
                m_pred = a * m[r];
                p_pred = a * a * p[r] + (1.0 - a * a) * cfg.bin_variances[r];
            }
            const double s = p_pred + noise_var;
            const double gain = s > 0.0 ? p_pred / s : 0.0;
            m[r] = m_pred + gain * (y_dft[i * bins + r] - m_pred);
            p[r] = (1.0 - gain) * p_pred;
        }
    }
    return to_antenna(m);
}

double kalman_loglik(const chansim::GaussMarkovConfig& cfg, std::span<const cplx> x_dft,
                     std::size_t snapshots, double noise_var) {
    const std::size_t bins = cfg.bin_variances.size();
    if (x_dft.size() < snapshots * bins) throw contract_error("observation sequence too short");
    const double a = cfg.ar_coeff;
    constexpr double kLogPi = 1.1447298858494001741434273513531;

    double ll = 0.0;
    std::vector<cplx> m(bins, cplx{0.0, 0.0});
    std::vector<double> p(bins);
    for (std::size_t r = 0; r < bins; ++r) p[r] = cfg.bin_variances[r];

    for (std::size_t i = 0; i < snapshots; ++i) {
        for (std::size_t r = 0; r < bins; ++r) {
            double p_pred = p[r];
            cplx m_pred = m[r];
            if (i > 0) {
                m_pred = a * m[r];
                p_pred = a * a * p[r] + (1.0 - a * a) * cfg.bin_variances[r];
            }
            const double s = p_pred + noise_var;
            const cplx innov = x_dft[i * bins + r] - m_pred;
            ll += -(kLogPi + std::log(s)) - std::norm(innov) / s;
            const double gain = s > 0.0 ? p_pred / s : 0.0;
            m[r] = m_pred + gain * innov;
            p[r] = (1.0 - gain) * p_pred;
        }
    }
    return ll;
}

} // namespace kmmvae::estimators
