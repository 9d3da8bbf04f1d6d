#pragma once

#include <complex>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kmmvae/errors.hpp"

namespace kmmvae::chansim {

using cplx = std::complex<double>;

struct TrajectoryMeta {
    std::uint64_t seed = 0;
    double speed_mps = 0.0;
    std::uint32_t path_count = 0;
};

/// I consecutive channel snapshots of one user, antenna domain.
struct Trajectory {
    std::size_t snapshots = 0; // I
    std::size_t antennas = 0;  // R
    std::vector<cplx> channels; // row-major [I x R]
    TrajectoryMeta meta;

    cplx& at(std::size_t i, std::size_t r) { return channels[i * antennas + r]; }
    const cplx& at(std::size_t i, std::size_t r) const { return channels[i * antennas + r]; }
    std::span<const cplx> snapshot(std::size_t i) const {
        return {channels.data() + i * antennas, antennas};
    }
    /// ||h_i||^2
    double snapshot_power(std::size_t i) const;
};

/// Noisy DFT-domain observations of one trajectory.
struct ObservationSequence {
    std::size_t snapshots = 0;
    std::size_t antennas = 0;
    std::vector<cplx> observations; // row-major [I x R], DFT domain
    double noise_var = 0.0;         // per-entry complex variance sigma_n^2
    double snr_db = 0.0;

    std::span<const cplx> snapshot(std::size_t i) const {
        return {observations.data() + i * antennas, antennas};
    }
};

/// One propagation path of the simplified sum-of-paths channel.
struct Path {
    double gain = 0.0;          // real amplitude; phase carried separately
    double arrival_angle = 0.0; // radians, steering direction
    double doppler_hz = 0.0;
    double phase = 0.0;         // initial phase, radians
};

struct PathSet {
    std::vector<Path> paths;
};

struct PathModelConfig {
    std::size_t antennas = 32;        // R
    std::size_t snapshots = 8;        // I
    double snapshot_interval = 5e-4;  // T, seconds
    double carrier_hz = 2.1e9;        // f_c
    std::size_t max_paths = 5;        // L uniform in {1..max_paths}
    double los_prob = 0.2;            // dominant path carries half the power
    double speed_sigma = 2.0;         // Rayleigh scale of the user speed
    std::optional<double> fixed_speed_mps; // overrides the Rayleigh draw
};

/// Stationary per-DFT-bin AR(1) channel with known joint distribution;
/// serves as the analytic reference channel.
struct GaussMarkovConfig {
    double ar_coeff = 0.9;             // a in [0, 1)
    std::vector<double> bin_variances; // c_r >= 0, length R

    static GaussMarkovConfig smooth_profile(std::size_t antennas, double ar_coeff);
};

/// User speed in m/s, Rayleigh distributed with scale sigma = 2.
double sample_speed(std::uint64_t seed);

/// Draws path count, gains, angles, Dopplers and phases for one user.
PathSet sample_paths(std::uint64_t seed, const PathModelConfig& cfg, double speed_mps);

/// h_i = sum_l g_l a(theta_l) exp(j(psi_l - 2 pi f_dl i T)) with the
/// half-wavelength ULA steering vector a(theta).
Trajectory synthesize(const PathSet& paths, std::size_t antennas, std::size_t snapshots,
                      double snapshot_interval);

Trajectory generate_trajectory(std::uint64_t seed, const PathModelConfig& cfg);

Trajectory generate_gauss_markov(std::uint64_t seed, const GaussMarkovConfig& cfg,
                                 std::size_t snapshots);

/// Per-trajectory mean-power scaling to 1, then one global scale so
/// that the dataset-average ||h_I||^2 equals R.
void normalize_dataset(std::vector<Trajectory>& trajectories);

/// sigma_n^2 = ||h_I||^2 / (R 10^(snr/10)); white complex Gaussian noise
/// per snapshot; result is DFT-preprocessed.
ObservationSequence add_noise(const Trajectory& traj, double snr_db, std::uint64_t seed);

/// Same with an externally fixed noise variance (analytic test channels
/// use the ensemble power instead of the per-trajectory one).
ObservationSequence add_noise_with_var(const Trajectory& traj, double noise_var,
                                       std::uint64_t seed);

/// Unitary DFT (forward matrix scaled by 1/sqrt(R)) and its inverse.
std::vector<cplx> dft_preprocess(std::span<const cplx> x);
std::vector<cplx> dft_inverse(std::span<const cplx> x);

enum class Generator : std::uint32_t { external = 0, path_model = 1, gauss_markov = 2 };

struct Dataset {
    std::vector<Trajectory> trajectories;
    Generator generator = Generator::external;
    std::uint64_t seed = 0;
    // populated when generator == gauss_markov
    GaussMarkovConfig gm;

    std::size_t size() const { return trajectories.size(); }
    std::size_t snapshots() const { return trajectories.empty() ? 0 : trajectories[0].snapshots; }
    std::size_t antennas() const { return trajectories.empty() ? 0 : trajectories[0].antennas; }
};

Dataset generate_path_dataset(std::uint64_t seed, const PathModelConfig& cfg, std::size_t count);
Dataset generate_gauss_markov_dataset(std::uint64_t seed, const GaussMarkovConfig& cfg,
                                      std::size_t snapshots, std::size_t count);

/// Binary container: 64-byte header (magic, version, N, I, R, flags),
/// row-major complex doubles, structured-text metadata footer.
void export_dataset(const Dataset& ds, const std::string& path);
Dataset import_dataset(const std::string& path);

} // namespace kmmvae::chansim
