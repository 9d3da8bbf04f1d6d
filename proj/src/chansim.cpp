#include "kmmvae/chansim.hpp"

#include <algorithm>
#include <bit>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "kmmvae/rng.hpp"

static_assert(std::endian::native == std::endian::little,
              "dataset container assumes a little-endian host");

namespace kmmvae::chansim {

namespace {

constexpr double kPi = 3.141592653589793238462643383279502884;
constexpr double kLightSpeed = 299792458.0;

// stream tags for seed derivation
constexpr std::uint64_t kTagSpeed = 0x53504545;
constexpr std::uint64_t kTagPaths = 0x50415448;
constexpr std::uint64_t kTagNoise = 0x4e4f4953;
constexpr std::uint64_t kTagGm = 0x474d4152;

} // namespace

double Trajectory::snapshot_power(std::size_t i) const {
    double p = 0.0;
    for (std::size_t r = 0; r < antennas; ++r) p += std::norm(at(i, r));
    return p;
}

double sample_speed(std::uint64_t seed) {
    Rng rng(mix_seed(seed, kTagSpeed));
    return rng.rayleigh(2.0);
}

PathSet sample_paths(std::uint64_t seed, const PathModelConfig& cfg, double speed_mps) {
    Rng rng(mix_seed(seed, kTagPaths));
    const std::size_t n_paths = 1 + static_cast<std::size_t>(rng.below(cfg.max_paths));
    const bool los = rng.uniform() < cfg.los_prob;

    // exponential power profile, unit total; under LOS the first path
    // carries half the power and the profile shares the rest
    std::vector<double> powers(n_paths);
    double total = 0.0;
    for (std::size_t l = 0; l < n_paths; ++l) {
        powers[l] = std::exp(-static_cast<double>(l));
        total += powers[l];
    }
    for (double& p : powers) p /= total;
    if (los && n_paths > 1) {
        double rest = 1.0 - powers[0];
        for (std::size_t l = 1; l < n_paths; ++l) powers[l] *= 0.5 / rest;
        powers[0] = 0.5;
    }

    PathSet ps;
    ps.paths.resize(n_paths);
    for (std::size_t l = 0; l < n_paths; ++l) {
        Path& p = ps.paths[l];
        p.gain = std::sqrt(powers[l]);
        p.arrival_angle = rng.uniform(-kPi / 2.0, kPi / 2.0);
        double motion_angle = rng.uniform(0.0, 2.0 * kPi);
        p.doppler_hz = speed_mps / kLightSpeed * cfg.carrier_hz * std::cos(motion_angle);
        p.phase = rng.uniform(0.0, 2.0 * kPi);
    }
    return ps;
}

Trajectory synthesize(const PathSet& paths, std::size_t antennas, std::size_t snapshots,
                      double snapshot_interval) {
    if (antennas == 0 || snapshots == 0) throw config_error("antennas and snapshots must be >= 1");
    Trajectory traj;
    traj.snapshots = snapshots;
    traj.antennas = antennas;
    traj.channels.assign(snapshots * antennas, {0.0, 0.0});
    for (const Path& p : paths.paths) {
        // half-wavelength ULA steering vector
        std::vector<cplx> steer(antennas);
        for (std::size_t r = 0; r < antennas; ++r) {
            double ang = -kPi * static_cast<double>(r) * std::sin(p.arrival_angle);
            steer[r] = {std::cos(ang), std::sin(ang)};
        }
        for (std::size_t i = 0; i < snapshots; ++i) {
            double t = static_cast<double>(i + 1) * snapshot_interval; // snapshot i lives at iT, 1-based
            double ph = p.phase - 2.0 * kPi * p.doppler_hz * t;
            cplx rot = p.gain * cplx{std::cos(ph), std::sin(ph)};
            for (std::size_t r = 0; r < antennas; ++r) traj.channels[i * antennas + r] += rot * steer[r];
        }
    }
    return traj;
}

Trajectory generate_trajectory(std::uint64_t seed, const PathModelConfig& cfg) {
    if (cfg.antennas == 0 || cfg.snapshots == 0 || cfg.snapshot_interval <= 0.0)
        throw config_error("invalid path-model config");
    double speed = cfg.fixed_speed_mps ? *cfg.fixed_speed_mps : sample_speed(seed);
    PathSet ps = sample_paths(seed, cfg, speed);
    Trajectory traj = synthesize(ps, cfg.antennas, cfg.snapshots, cfg.snapshot_interval);
    traj.meta.seed = seed;
    traj.meta.speed_mps = speed;
    traj.meta.path_count = static_cast<std::uint32_t>(ps.paths.size());
    return traj;
}

GaussMarkovConfig GaussMarkovConfig::smooth_profile(std::size_t antennas, double ar_coeff) {
    GaussMarkovConfig cfg;
    cfg.ar_coeff = ar_coeff;
    cfg.bin_variances.resize(antennas);
    // mean-1 profile bounded away from zero; sums to R exactly
    for (std::size_t r = 0; r < antennas; ++r)
        cfg.bin_variances[r] = 1.0 + 0.5 * std::cos(2.0 * kPi * static_cast<double>(r) /
                                                    static_cast<double>(antennas));
    double total = 0.0;
    for (double c : cfg.bin_variances) total += c;
    for (double& c : cfg.bin_variances) c *= static_cast<double>(antennas) / total;
    return cfg;
}

Trajectory generate_gauss_markov(std::uint64_t seed, const GaussMarkovConfig& cfg,
                                 std::size_t snapshots) {
    const double a = cfg.ar_coeff;
    if (!(a >= 0.0 && a < 1.0)) throw config_error("AR coefficient must be in [0, 1)");
    const std::size_t antennas = cfg.bin_variances.size();
    if (antennas == 0 || snapshots == 0) throw config_error("empty Gauss-Markov config");

    Rng rng(mix_seed(seed, kTagGm));
    // The AR(1) process lives per DFT bin; the trajectory container holds
    // antenna-domain channels, so transform each snapshot back.
    std::vector<cplx> state(antennas);
    for (std::size_t r = 0; r < antennas; ++r) state[r] = rng.complex_normal(cfg.bin_variances[r]);

    Trajectory traj;
    traj.snapshots = snapshots;
    traj.antennas = antennas;
    traj.channels.resize(snapshots * antennas);
    traj.meta.seed = seed;
    for (std::size_t i = 0; i < snapshots; ++i) {
        if (i > 0) {
            for (std::size_t r = 0; r < antennas; ++r) {
                cplx w = rng.complex_normal((1.0 - a * a) * cfg.bin_variances[r]);
                state[r] = a * state[r] + w;
            }
        }
        std::vector<cplx> antenna = dft_inverse(state);
        std::copy(antenna.begin(), antenna.end(), traj.channels.begin() + i * antennas);
    }
    return traj;
}

void normalize_dataset(std::vector<Trajectory>& trajectories) {
    if (trajectories.empty()) throw data_error("cannot normalize an empty dataset");
    const std::size_t last = trajectories[0].snapshots - 1;
    // per-trajectory mean power over its own snapshots -> 1
    for (Trajectory& t : trajectories) {
        double mean_power = 0.0;
        for (std::size_t i = 0; i < t.snapshots; ++i) mean_power += t.snapshot_power(i);
        mean_power /= static_cast<double>(t.snapshots * t.antennas);
        if (mean_power > 0.0) {
            double s = 1.0 / std::sqrt(mean_power);
            for (cplx& v : t.channels) v *= s;
        }
    }
    // single global scale: dataset-average ||h_I||^2 == R
    double sum_last = 0.0;
    for (const Trajectory& t : trajectories) sum_last += t.snapshot_power(last);
    if (sum_last <= 0.0) throw data_error("all-zero dataset cannot be normalized");
    const double want = static_cast<double>(trajectories[0].antennas) *
                        static_cast<double>(trajectories.size());
    const double g = std::sqrt(want / sum_last);
    for (Trajectory& t : trajectories)
        for (cplx& v : t.channels) v *= g;
}

namespace {

ObservationSequence make_observations(const Trajectory& traj, double noise_var, double snr_db,
                                      std::uint64_t seed) {
    ObservationSequence obs;
    obs.snapshots = traj.snapshots;
    obs.antennas = traj.antennas;
    obs.noise_var = noise_var;
    obs.snr_db = snr_db;
    obs.observations.resize(traj.channels.size());
    Rng rng(mix_seed(seed, kTagNoise));
    std::vector<cplx> noisy(traj.antennas);
    for (std::size_t i = 0; i < traj.snapshots; ++i) {
        for (std::size_t r = 0; r < traj.antennas; ++r)
            noisy[r] = traj.at(i, r) + rng.complex_normal(noise_var);
        std::vector<cplx> d = dft_preprocess(noisy);
        std::copy(d.begin(), d.end(), obs.observations.begin() + i * traj.antennas);
    }
    return obs;
}

} // namespace

ObservationSequence add_noise(const Trajectory& traj, double snr_db, std::uint64_t seed) {
    if (!std::isfinite(snr_db)) throw config_error("snr_db must be finite");
    const double power_last = traj.snapshot_power(traj.snapshots - 1);
    const double noise_var =
        power_last / (static_cast<double>(traj.antennas) * std::pow(10.0, snr_db / 10.0));
    return make_observations(traj, noise_var, snr_db, seed);
}

ObservationSequence add_noise_with_var(const Trajectory& traj, double noise_var,
                                       std::uint64_t seed) {
    if (!(noise_var >= 0.0)) throw config_error("noise_var must be >= 0");
    const double power_last = traj.snapshot_power(traj.snapshots - 1);
    double snr_db = noise_var > 0.0
                        ? 10.0 * std::log10(power_last / (static_cast<double>(traj.antennas) * noise_var))
                        : std::numeric_limits<double>::infinity();
    return make_observations(traj, noise_var, snr_db, seed);
}

std::vector<cplx> dft_preprocess(std::span<const cplx> x) {
    const std::size_t n = x.size();
    std::vector<cplx> y(n, {0.0, 0.0});
    const double scale = 1.0 / std::sqrt(static_cast<double>(n));
    for (std::size_t p = 0; p < n; ++p) {
        cplx acc{0.0, 0.0};
        for (std::size_t q = 0; q < n; ++q) {
            double ang = -2.0 * kPi * static_cast<double>((p * q) % n) / static_cast<double>(n);
            acc += x[q] * cplx{std::cos(ang), std::sin(ang)};
        }
        y[p] = acc * scale;
    }
    return y;
}

std::vector<cplx> dft_inverse(std::span<const cplx> x) {
    const std::size_t n = x.size();
    std::vector<cplx> y(n, {0.0, 0.0});
    const double scale = 1.0 / std::sqrt(static_cast<double>(n));
    for (std::size_t p = 0; p < n; ++p) {
        cplx acc{0.0, 0.0};
        for (std::size_t q = 0; q < n; ++q) {
            double ang = 2.0 * kPi * static_cast<double>((p * q) % n) / static_cast<double>(n);
            acc += x[q] * cplx{std::cos(ang), std::sin(ang)};
        }
        y[p] = acc * scale;
    }
    return y;
}

Dataset generate_path_dataset(std::uint64_t seed, const PathModelConfig& cfg, std::size_t count) {
    Dataset ds;
    ds.generator = Generator::path_model;
    ds.seed = seed;
    ds.trajectories.reserve(count);
    for (std::size_t n = 0; n < count; ++n)
        ds.trajectories.push_back(generate_trajectory(mix_seed(seed, 0x7261, n), cfg));
    return ds;
}

Dataset generate_gauss_markov_dataset(std::uint64_t seed, const GaussMarkovConfig& cfg,
                                      std::size_t snapshots, std::size_t count) {
    Dataset ds;
    ds.generator = Generator::gauss_markov;
    ds.seed = seed;
    ds.gm = cfg;
    ds.trajectories.reserve(count);
    for (std::size_t n = 0; n < count; ++n)
        ds.trajectories.push_back(generate_gauss_markov(mix_seed(seed, 0x7261, n), cfg, snapshots));
    return ds;
}

// ---- container I/O ----

namespace {

constexpr char kMagic[8] = {'K', 'M', 'V', 'D', 'A', 'T', 'A', '1'};
constexpr std::uint32_t kVersion = 1;

struct Header {
    char magic[8];
    std::uint32_t version;
    std::uint32_t flags;
    std::uint64_t count;
    std::uint32_t snapshots;
    std::uint32_t antennas;
    char pad[32];
};
static_assert(sizeof(Header) == 64);

std::string hex_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%a", v);
    return buf;
}

double parse_hex_double(const std::string& s, std::size_t offset_hint) {
    char* end = nullptr;
    double v = std::strtod(s.c_str(), &end);
    if (end == s.c_str()) throw parse_error("bad float '" + s + "' in dataset footer", offset_hint);
    return v;
}

} // namespace

void export_dataset(const Dataset& ds, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw data_error("cannot open '" + path + "' for writing");

    Header h{};
    std::memcpy(h.magic, kMagic, 8);
    h.version = kVersion;
    h.flags = static_cast<std::uint32_t>(ds.generator);
    h.count = ds.trajectories.size();
    h.snapshots = static_cast<std::uint32_t>(ds.snapshots());
    h.antennas = static_cast<std::uint32_t>(ds.antennas());
    out.write(reinterpret_cast<const char*>(&h), sizeof(h));

    for (const Trajectory& t : ds.trajectories) {
        if (t.snapshots != h.snapshots || t.antennas != h.antennas)
            throw data_error("mixed trajectory extents in dataset");
        out.write(reinterpret_cast<const char*>(t.channels.data()),
                  static_cast<std::streamsize>(t.channels.size() * sizeof(cplx)));
    }

    out << "meta v1\n";
    out << "seed " << ds.seed << "\n";
    if (ds.generator == Generator::gauss_markov) {
        out << "gm_a " << hex_double(ds.gm.ar_coeff) << "\n";
        out << "gm_c";
        for (double c : ds.gm.bin_variances) out << ' ' << hex_double(c);
        out << "\n";
    }
    for (std::size_t n = 0; n < ds.trajectories.size(); ++n) {
        const TrajectoryMeta& m = ds.trajectories[n].meta;
        out << "traj " << n << " seed " << m.seed << " speed " << hex_double(m.speed_mps)
            << " paths " << m.path_count << "\n";
    }
    out << "end\n";
    if (!out) throw data_error("write failure on '" + path + "'");
}

Dataset import_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw data_error("cannot open '" + path + "' for reading");

    Header h{};
    in.read(reinterpret_cast<char*>(&h), sizeof(h));
    if (in.gcount() != sizeof(h)) throw parse_error("truncated header", static_cast<std::size_t>(in.gcount()));
    if (std::memcmp(h.magic, kMagic, 8) != 0) throw parse_error("bad magic", 0);
    if (h.version != kVersion)
        throw parse_error("unsupported dataset version " + std::to_string(h.version), 8);
    if (h.snapshots == 0 || h.antennas == 0) throw parse_error("zero extents in header", 24);
    if (h.flags > 2) throw parse_error("unknown generator flag", 12);
    if (h.count > (1ULL << 32)) throw parse_error("implausible trajectory count", 16);

    Dataset ds;
    ds.generator = static_cast<Generator>(h.flags);
    const std::size_t per_traj = static_cast<std::size_t>(h.snapshots) * h.antennas;
    ds.trajectories.resize(h.count);
    std::size_t offset = sizeof(Header);
    for (std::size_t n = 0; n < h.count; ++n) {
        Trajectory& t = ds.trajectories[n];
        t.snapshots = h.snapshots;
        t.antennas = h.antennas;
        t.channels.resize(per_traj);
        in.read(reinterpret_cast<char*>(t.channels.data()),
                static_cast<std::streamsize>(per_traj * sizeof(cplx)));
        if (static_cast<std::size_t>(in.gcount()) != per_traj * sizeof(cplx))
            throw parse_error("truncated payload in trajectory " + std::to_string(n),
                              offset + static_cast<std::size_t>(in.gcount()));
        offset += per_traj * sizeof(cplx);
    }

    // structured-text footer
    std::string line;
    if (!std::getline(in, line) || line != "meta v1") throw parse_error("missing footer", offset);
    bool saw_end = false;
    while (std::getline(in, line)) {
        offset += line.size() + 1;
        if (line == "end") {
            saw_end = true;
            break;
        }
        if (line.rfind("seed ", 0) == 0) {
            ds.seed = std::strtoull(line.c_str() + 5, nullptr, 10);
        } else if (line.rfind("gm_a ", 0) == 0) {
            ds.gm.ar_coeff = parse_hex_double(line.substr(5), offset);
        } else if (line.rfind("gm_c", 0) == 0) {
            ds.gm.bin_variances.clear();
            std::size_t pos = 4;
            while (pos < line.size()) {
                std::size_t next = line.find(' ', pos + 1);
                std::string tok = line.substr(pos + 1, next == std::string::npos ? next : next - pos - 1);
                if (!tok.empty()) ds.gm.bin_variances.push_back(parse_hex_double(tok, offset));
                if (next == std::string::npos) break;
                pos = next;
            }
        } else if (line.rfind("traj ", 0) == 0) {
            std::size_t idx = 0;
            std::uint64_t tseed = 0;
            std::uint32_t paths = 0;
            char speed_buf[64] = {0};
            if (std::sscanf(line.c_str(), "traj %zu seed %" SCNu64 " speed %63s paths %u", &idx,
                            &tseed, speed_buf, &paths) != 4 ||
                idx >= ds.trajectories.size())
                throw parse_error("bad trajectory metadata line", offset);
            ds.trajectories[idx].meta.seed = tseed;
            ds.trajectories[idx].meta.speed_mps = parse_hex_double(speed_buf, offset);
            ds.trajectories[idx].meta.path_count = paths;
        } else {
            throw parse_error("unknown footer line '" + line + "'", offset);
        }
    }
    if (!saw_end) throw parse_error("footer not terminated", offset);
    return ds;
}

} // namespace kmmvae::chansim
