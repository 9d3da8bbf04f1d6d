#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <map>

#include "kmmvae/models.hpp"
#include "kmmvae/rng.hpp"
#include "support/gradcheck.hpp"

using namespace kmmvae;
using namespace kmmvae::models;
namespace ad = kmmvae::autodiff;

namespace {

ArchConfig tiny_arch() {
    ArchConfig a;
    a.conv_channels1 = 3;
    a.conv_channels2 = 4;
    a.kernel_width = 3;
    a.trunk_width = 8;
    a.mlp_width = 8;
    return a;
}

std::vector<cplx> random_cplx(std::size_t n, Rng& rng) {
    std::vector<cplx> v(n);
    for (cplx& x : v) x = {rng.normal(), rng.normal()};
    return v;
}

// independent log-density of CN(mean, exp(2 log_std)) per bin
double loglik_oracle(std::span<const cplx> x, std::span<const double> mean_interleaved,
                     std::span<const double> log_std) {
    double ll = 0.0;
    for (std::size_t r = 0; r < x.size(); ++r) {
        double var = std::exp(2.0 * log_std[r]);
        cplx mu{mean_interleaved[2 * r], mean_interleaved[2 * r + 1]};
        ll += -std::log(M_PI * var) - std::norm(x[r] - mu) / var;
    }
    return ll;
}

void set_param(const std::vector<ParamRef>& params, const std::string& name,
               const std::vector<double>& values) {
    for (const ParamRef& p : params)
        if (p.name == name) {
            p.tensor.set_values(values);
            return;
        }
    FAIL("parameter not found: ", name);
}

void zero_param(const std::vector<ParamRef>& params, const std::string& name) {
    for (const ParamRef& p : params)
        if (p.name == name) {
            p.tensor.set_values(std::vector<double>(p.tensor.size(), 0.0));
            return;
        }
    FAIL("parameter not found: ", name);
}

} // namespace

TEST_CASE("encoder_step contracts") {
    auto params = KmmvaeParams::init(3, 4, 1, 3, tiny_arch(), 11);
    Rng rng(5);
    auto obs = random_cplx(3 * 4, rng);

    SUBCASE("output lengths equal the latent dimension") {
        DiagGaussian g = encoder_step(params, 1, first_step_sentinel(3), pack_window(obs, 4, 1, 1));
        CHECK(g.mean.size() == 3);
        CHECK(g.log_std.size() == 3);
    }
    SUBCASE("log_std stays inside the clamp interval for wild inputs") {
        std::vector<cplx> wild(3 * 4, cplx{1e6, -1e6});
        DiagGaussian g = encoder_step(params, 2, first_step_sentinel(3), pack_window(wild, 4, 2, 1));
        for (double v : g.log_std.values()) {
            CHECK(v >= tiny_arch().log_std_min);
            CHECK(v <= tiny_arch().log_std_max);
        }
    }
    SUBCASE("first snapshot sees only y_1 and the all-ones sentinel") {
        Tensor win = pack_window(obs, 4, 1, 1);
        DiagGaussian a = encoder_step(params, 1, first_step_sentinel(3), win);
        // mutate later observations; window for i = 1 is unaffected
        auto obs2 = obs;
        for (std::size_t j = 4; j < obs2.size(); ++j) obs2[j] = {9.0, 9.0};
        DiagGaussian b = encoder_step(params, 1, first_step_sentinel(3), pack_window(obs2, 4, 1, 1));
        for (std::size_t d = 0; d < 3; ++d) CHECK(a.mean.values()[d] == b.mean.values()[d]);
    }
    SUBCASE("wrong window length is a contract error") {
        CHECK_THROWS_AS((void)encoder_step(params, 2, first_step_sentinel(3), pack_window(obs, 4, 1, 1)),
                        contract_error);
    }
    SUBCASE("window truncation at the sequence start") {
        // i = 2, k = 1 -> exactly 2 snapshots; i = 1 -> 1 snapshot
        CHECK(pack_window(obs, 4, 1, 1).shape() == ad::Shape{2, 4});
        CHECK(pack_window(obs, 4, 2, 1).shape() == ad::Shape{4, 4});
        CHECK(pack_window(obs, 4, 3, 1).shape() == ad::Shape{4, 4});
    }
}

TEST_CASE("prior_step contracts") {
    auto params = KmmvaeParams::init(3, 4, 1, 3, tiny_arch(), 13);
    SUBCASE("first prior is constant across calls") {
        DiagGaussian a = prior_step(params, 1, Tensor());
        DiagGaussian b = prior_step(params, 1, Tensor());
        for (std::size_t d = 0; d < 3; ++d) {
            CHECK(a.mean.values()[d] == b.mean.values()[d]);
            CHECK(a.log_std.values()[d] == b.log_std.values()[d]);
        }
    }
    SUBCASE("shape d_z") {
        DiagGaussian g = prior_step(params, 2, Tensor::constant({0.1, -0.2, 0.3}));
        CHECK(g.mean.size() == 3);
        CHECK(g.log_std.size() == 3);
    }
}

TEST_CASE("decoder_step contracts") {
    auto params = KmmvaeParams::init(3, 4, 1, 3, tiny_arch(), 17);
    SUBCASE("mean length 2R, variances length R and strictly positive") {
        ComplexGaussian g = decoder_step(params, 1, Tensor::constant({0.5, -0.5, 0.25}));
        CHECK(g.mean.size() == 8);
        CHECK(g.log_std.size() == 4);
        for (double v : g.log_std.values()) CHECK(std::exp(2.0 * v) > 0.0);
    }
    SUBCASE("wrong window length is a contract error") {
        CHECK_THROWS_AS((void)decoder_step(params, 2, Tensor::constant({0.5, -0.5, 0.25})),
                        contract_error);
    }
}

TEST_CASE("reparameterize") {
    DiagGaussian g{Tensor::constant({1.0, -2.0}), Tensor::constant({0.5, -0.25})};
    SUBCASE("eps = 0 gives the mean") {
        Tensor z = reparameterize(g, Tensor::constant({0.0, 0.0}));
        CHECK(z.values()[0] == 1.0);
        CHECK(z.values()[1] == -2.0);
    }
    SUBCASE("vanishing std gives the mean regardless of eps") {
        DiagGaussian tight{Tensor::constant({3.0}), Tensor::constant({-1000.0})};
        Tensor z = reparameterize(tight, Tensor::constant({17.0}));
        CHECK(z.values()[0] == 3.0);
    }
    SUBCASE("sample population moments") {
        Rng rng(23);
        const int n = 100000;
        double m0 = 0, m1 = 0, s0 = 0, s1 = 0;
        for (int k = 0; k < n; ++k) {
            Tensor z = reparameterize(g, Tensor::constant({rng.normal(), rng.normal()}));
            m0 += z.values()[0];
            m1 += z.values()[1];
            s0 += z.values()[0] * z.values()[0];
            s1 += z.values()[1] * z.values()[1];
        }
        m0 /= n;
        m1 /= n;
        double sd0 = std::sqrt(s0 / n - m0 * m0);
        double sd1 = std::sqrt(s1 / n - m1 * m1);
        CHECK(std::abs(m0 - 1.0) < 0.01 * std::exp(0.5) * 3);
        CHECK(std::abs(m1 + 2.0) < 0.01 * 3);
        CHECK(std::abs(sd0 - std::exp(0.5)) / std::exp(0.5) < 0.01);
        CHECK(std::abs(sd1 - std::exp(-0.25)) / std::exp(-0.25) < 0.01);
    }
}

TEST_CASE("kl_diag_gaussian") {
    SUBCASE("KL(q||q) = 0") {
        DiagGaussian q{Tensor::constant({0.3, -1.0}), Tensor::constant({0.2, -0.7})};
        CHECK(kl_diag_gaussian(q, q).item() == doctest::Approx(0.0).epsilon(1e-14));
    }
    SUBCASE("N(2,1) vs N(0,1) is 2 per dimension") {
        DiagGaussian q{Tensor::constant({2.0, 2.0}), Tensor::constant({0.0, 0.0})};
        DiagGaussian p{Tensor::constant({0.0, 0.0}), Tensor::constant({0.0, 0.0})};
        CHECK(kl_diag_gaussian(q, p).item() == doctest::Approx(4.0).epsilon(1e-12));
    }
    SUBCASE("non-negativity on random pairs") {
        Rng rng(31);
        for (int t = 0; t < 200; ++t) {
            DiagGaussian q{Tensor::constant({rng.normal(), rng.normal()}),
                           Tensor::constant({rng.uniform(-1, 1), rng.uniform(-1, 1)})};
            DiagGaussian p{Tensor::constant({rng.normal(), rng.normal()}),
                           Tensor::constant({rng.uniform(-1, 1), rng.uniform(-1, 1)})};
            CHECK(kl_diag_gaussian(q, p).item() >= -1e-12);
        }
    }
    SUBCASE("matches Monte-Carlo average of log(q/p)") {
        const double mq = 0.7, sq = 0.8, mp = -0.3, sp = 1.4;
        DiagGaussian q{Tensor::constant({mq}), Tensor::constant({std::log(sq)})};
        DiagGaussian p{Tensor::constant({mp}), Tensor::constant({std::log(sp)})};
        double want = kl_diag_gaussian(q, p).item();
        Rng rng(37);
        double acc = 0.0;
        const int n = 1000000;
        for (int k = 0; k < n; ++k) {
            double z = mq + sq * rng.normal();
            double lq = -0.5 * std::log(2 * M_PI) - std::log(sq) - 0.5 * (z - mq) * (z - mq) / (sq * sq);
            double lp = -0.5 * std::log(2 * M_PI) - std::log(sp) - 0.5 * (z - mp) * (z - mp) / (sp * sp);
            acc += lq - lp;
        }
        CHECK(acc / n == doctest::Approx(want).epsilon(0.005));
    }
}

TEST_CASE("complex_gaussian_loglik") {
    SUBCASE("x = mu with variance 1/pi gives zero") {
        // log(pi sigma^2) = 0 and zero residual
        double ls = 0.5 * std::log(1.0 / M_PI);
        ComplexGaussian g{Tensor::constant({1.0, -2.0, 0.5, 0.0}),
                          Tensor::constant({ls, ls})};
        std::vector<cplx> x = {{1.0, -2.0}, {0.5, 0.0}};
        CHECK(complex_gaussian_loglik(pack_interleaved(x), g).item() ==
              doctest::Approx(0.0).epsilon(1e-12));
    }
    SUBCASE("decreasing in the residual") {
        ComplexGaussian g{Tensor::constant({0.0, 0.0}), Tensor::constant({0.1})};
        std::vector<cplx> near = {{0.1, 0.0}};
        std::vector<cplx> far = {{0.5, 0.0}};
        CHECK(complex_gaussian_loglik(pack_interleaved(near), g).item() >
              complex_gaussian_loglik(pack_interleaved(far), g).item());
    }
    SUBCASE("density integrates to one on R = 1") {
        const double mu_re = 0.3, mu_im = -0.2, ls = -0.4;
        ComplexGaussian g{Tensor::constant({mu_re, mu_im}), Tensor::constant({ls})};
        const double sigma = std::exp(ls);
        const int grid = 400;
        const double span = 6.0 * sigma;
        const double step = 2.0 * span / grid;
        double integral = 0.0;
        for (int a = 0; a < grid; ++a)
            for (int b = 0; b < grid; ++b) {
                double re = mu_re - span + (a + 0.5) * step;
                double im = mu_im - span + (b + 0.5) * step;
                std::vector<cplx> x = {{re, im}};
                integral += std::exp(complex_gaussian_loglik(pack_interleaved(x), g).item()) *
                            step * step;
            }
        CHECK(integral == doctest::Approx(1.0).epsilon(1e-3));
    }
}

TEST_CASE("elbo_standard") {
    Rng rng(41);
    const std::size_t R = 4, dz = 3;
    auto params = VaeParams::init(R, dz, 1, 1, tiny_arch(), 3);

    SUBCASE("zero-KL reduction: forced prior encoder and fixed decoder") {
        auto prefs = params.parameters();
        zero_param(prefs, "encoder.mean.weights");
        zero_param(prefs, "encoder.mean.bias");
        zero_param(prefs, "encoder.log_std.weights");
        zero_param(prefs, "encoder.log_std.bias");
        zero_param(prefs, "decoder.hidden1.weights");
        zero_param(prefs, "decoder.hidden1.bias");
        std::vector<double> mu_star = {0.4, -0.1, 0.7, 0.2, -0.6, 0.3, 0.0, 1.0};
        std::vector<double> ls_star = {0.2, -0.3, 0.1, 0.0};
        zero_param(prefs, "decoder.mean.weights");
        set_param(prefs, "decoder.mean.bias", mu_star);
        zero_param(prefs, "decoder.log_std.weights");
        set_param(prefs, "decoder.log_std.bias", ls_star);

        std::vector<std::vector<cplx>> xs, ys;
        std::vector<VaeSample> batch;
        for (int n = 0; n < 8; ++n) {
            xs.push_back(random_cplx(R, rng));
            ys.push_back(random_cplx(R, rng));
            batch.push_back({xs.back(), ys.back()});
        }
        RngEps eps(7);
        double got = elbo_standard(batch, params, eps).item();
        double want = 0.0;
        for (const auto& x : xs) want += loglik_oracle(x, mu_star, ls_star);
        want /= 8.0;
        CHECK(got == doctest::Approx(want).epsilon(1e-12));
    }
    SUBCASE("free-bits flooring keeps each snapshot KL at least lambda * d_z") {
        // with q == p the floored KL equals exactly lambda * d_z
        DiagGaussian q{Tensor::constant({0.1, 0.2, 0.3}), Tensor::constant({0.0, 0.0, 0.0})};
        Tensor kd = kl_per_dim(q, q);
        double lambda = 0.1;
        Tensor floored = ad::add_scalar(ad::relu(ad::add_scalar(kd, -lambda)), lambda);
        CHECK(ad::sum(floored).item() == doctest::Approx(lambda * 3).epsilon(1e-12));
    }
}

TEST_CASE("elbo_dvae structure") {
    Rng rng(47);
    const std::size_t R = 4, dz = 3, I = 3;

    SUBCASE("I=1, k=0 with neutralized latent input reduces to elbo_standard") {
        auto kp = KmmvaeParams::init(1, R, 0, dz, tiny_arch(), 5);
        auto vp = VaeParams::init(R, dz, 1, 1, tiny_arch(), 5);
        // prior_1 of the kmmvae is standard normal by construction (zeros)
        // kill the z_prev columns of the kmmvae trunk and copy the rest
        auto kprefs = kp.parameters();
        auto vprefs = vp.parameters();
        std::map<std::string, Tensor> kmap, vmap;
        for (auto& p : kprefs) kmap.emplace(p.name, p.tensor);
        for (auto& p : vprefs) vmap.emplace(p.name, p.tensor);

        const std::size_t flat = tiny_arch().conv_channels2 * R;
        const std::size_t trunk_w = tiny_arch().trunk_width;
        Tensor vt = vmap.at("encoder.trunk.weights"); // [trunk x flat]
        std::vector<double> kt(trunk_w * (flat + dz), 0.0);
        for (std::size_t o = 0; o < trunk_w; ++o)
            for (std::size_t c = 0; c < flat; ++c) kt[o * (flat + dz) + c] = vt.values()[o * flat + c];
        kmap.at("encoder1.trunk.weights").set_values(kt);

        for (const char* name : {"conv1.kernels", "conv1.bias", "conv2.kernels", "conv2.bias",
                                 "trunk.bias", "mean.weights", "mean.bias", "log_std.weights",
                                 "log_std.bias"}) {
            auto src = vmap.at(std::string("encoder.") + name).values();
            kmap.at(std::string("encoder1.") + name)
                .set_values(std::vector<double>(src.begin(), src.end()));
        }
        for (const char* name : {"hidden1.weights", "hidden1.bias", "hidden2.weights",
                                 "hidden2.bias", "mean.weights", "mean.bias", "log_std.weights",
                                 "log_std.bias"}) {
            auto src = vmap.at(std::string("decoder.") + name).values();
            kmap.at(std::string("decoder1.") + name)
                .set_values(std::vector<double>(src.begin(), src.end()));
        }

        auto x = random_cplx(R, rng);
        auto y = random_cplx(R, rng);
        std::vector<TrajectorySample> tbatch = {{x, y}};
        std::vector<VaeSample> vbatch = {{x, y}};
        std::vector<double> eps_buf(dz);
        Rng erng(99);
        for (double& e : eps_buf) e = erng.normal();
        FixedEps fe1(eps_buf), fe2(eps_buf);
        double a = elbo_dvae(tbatch, kp, fe1, 0.0).item();
        double b = elbo_standard(vbatch, vp, fe2, 0.0).item();
        CHECK(a == doctest::Approx(b).epsilon(1e-10));
    }

    SUBCASE("every parameter tensor receives a finite, somewhere-nonzero gradient") {
        // free_bits = 0 here: an active floor deliberately blocks the KL
        // gradient, which would mask a genuinely detached subgraph
        auto kp = KmmvaeParams::init(I, R, 1, dz, tiny_arch(), 7);
        std::vector<cplx> x = random_cplx(I * R, rng), y = random_cplx(I * R, rng);
        std::vector<TrajectorySample> batch = {{x, y}};
        RngEps eps(3);
        ad::Tape tape;
        {
            ad::TapeScope scope(tape);
            ad::backward(elbo_dvae(batch, kp, eps, 0.0));
        }
        for (const ParamRef& p : kp.parameters()) {
            bool any_nonzero = false;
            REQUIRE(p.tensor.grad().size() == p.tensor.size());
            for (double g : p.tensor.grad()) {
                CHECK(std::isfinite(g));
                if (g != 0.0) any_nonzero = true;
            }
            CHECK_MESSAGE(any_nonzero, "dead parameter tensor: ", p.name);
        }
    }
}

TEST_CASE("elbo_dvae gradients match finite differences") {
    const std::size_t R = 4, I = 3, dz = 3, k = 1;
    bool passed = false;
    for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
        auto params = KmmvaeParams::init(I, R, k, dz, tiny_arch(), seed);
        Rng rng(mix_seed(seed, 0xDA7A));
        std::vector<cplx> x1 = random_cplx(I * R, rng), y1 = random_cplx(I * R, rng);
        std::vector<cplx> x2 = random_cplx(I * R, rng), y2 = random_cplx(I * R, rng);
        std::vector<TrajectorySample> batch = {{x1, y1}, {x2, y2}};
        std::vector<double> eps_buf(2 * I * dz);
        for (double& e : eps_buf) e = rng.normal();
        FixedEps eps(eps_buf);
        const double lambda = 0.1;

        auto eval = [&] {
            eps.rewind();
            return elbo_dvae(batch, params, eps, lambda).item();
        };
        auto compute = [&] {
            eps.rewind();
            ad::Tape tape;
            ad::TapeScope scope(tape);
            ad::backward(elbo_dvae(batch, params, eps, lambda));
        };
        auto res = gradcheck::check_parameters(params.parameters(), eval, compute, 1e-6, 1e-5);
        INFO("seed ", seed, ": max rel err ", res.max_rel_err, " at ", res.worst_param, ", ",
             res.violations, "/", res.checked, " violations");
        if (res.violations == 0) {
            passed = true;
            break;
        }
    }
    CHECK(passed);
}

TEST_CASE("infer_mean_path") {
    const std::size_t R = 4, I = 4, dz = 3;
    auto params = KmmvaeParams::init(I, R, 1, dz, tiny_arch(), 21);
    Rng rng(53);
    auto y = random_cplx(I * R, rng);

    SUBCASE("deterministic") {
        auto a = infer_mean_path(params, y, I);
        auto b = infer_mean_path(params, y, I);
        REQUIRE(a.size() == b.size());
        for (std::size_t i = 0; i < a.size(); ++i)
            for (std::size_t d = 0; d < dz; ++d) CHECK(a[i][d] == b[i][d]);
    }
    SUBCASE("causality: later observations do not change earlier means") {
        auto a = infer_mean_path(params, y, 2);
        auto y2 = y;
        for (std::size_t j = 2 * R; j < y2.size(); ++j) y2[j] = {123.0, -45.0};
        auto b = infer_mean_path(params, y2, 2);
        for (std::size_t i = 0; i < 2; ++i)
            for (std::size_t d = 0; d < dz; ++d) CHECK(a[i][d] == b[i][d]);
    }
    SUBCASE("equals the sampled chain at eps = 0") {
        auto means = infer_mean_path(params, y, I);
        // replicate the chain with zero noise
        Tensor z_prev = first_step_sentinel(dz);
        for (std::size_t i = 1; i <= I; ++i) {
            DiagGaussian q = encoder_step(params, i, z_prev, pack_window(y, R, i, params.memory));
            Tensor z = reparameterize(q, Tensor::zeros(ad::Shape{dz}));
            for (std::size_t d = 0; d < dz; ++d) CHECK(z.values()[d] == means[i - 1][d]);
            z_prev = z;
        }
    }
}
