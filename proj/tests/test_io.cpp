#include <catch2/catch.hpp>

#include <filesystem>
#include <random>

#include "pspde/io.hpp"
#include "test_util.hpp"

using namespace pspde;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
    const fs::path p = fs::temp_directory_path() / ("pspde_test_" + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

}  // namespace

TEST_CASE("config text parsing") {
    SECTION("values, comments and whitespace") {
        auto cfg = io::ConfigMap::parse("a.b = 3   # trailing\n\n# full comment\n c = x\n");
        REQUIRE(cfg.get_int("a.b", 0) == 3);
        REQUIRE(cfg.get_string("c", "") == "x");
    }
    SECTION("duplicate keys are rejected") {
        REQUIRE_THROWS_AS(io::ConfigMap::parse("k = 1\nk = 2\n"), ConfigError);
    }
    SECTION("bad numbers name the key") {
        auto cfg = io::ConfigMap::parse("pde.nu = soup\n");
        try {
            cfg.get_double("pde.nu", 0.0);
            FAIL("expected ConfigError");
        } catch (const ConfigError& e) {
            REQUIRE(std::string(e.what()).find("pde.nu") != std::string::npos);
        }
    }
    SECTION("unknown keys are named") {
        try {
            parse_run_setup("grid.X = 12\n");
            FAIL("expected ConfigError");
        } catch (const ConfigError& e) {
            REQUIRE(std::string(e.what()).find("grid.X") != std::string::npos);
        }
    }
}

TEST_CASE("run setup parsing and validation") {
    const auto setup = parse_run_setup(
        "grid.K = 64\nrun.steps = 3\nrun.delta = 0.01\npde.name = burgers\npde.nu = 0.004\n"
        "spectrum.mode = adaptive\nspectrum.sigma_tau = 5\nfilter.v_mode = mean\n"
        "run.policy = continue\n");
    REQUIRE(setup.run.K == 64);
    REQUIRE(setup.run.pde_name == "burgers");
    REQUIRE(setup.run.spectrum_mode == SpectrumMode::Adaptive);
    REQUIRE(setup.run.hyper.sigma_tau == 5.0);
    REQUIRE_FALSE(setup.run.step.sample_v);
    REQUIRE(setup.run.policy == FailPolicy::Continue);

    REQUIRE_THROWS_AS(parse_run_setup("grid.K = 13\n"), ConfigError);
    REQUIRE_THROWS_AS(parse_run_setup("run.policy = maybe\n"), ConfigError);
    REQUIRE_THROWS_AS(parse_run_setup("spectrum.mode = banana\n"), ConfigError);
    REQUIRE_THROWS_AS(parse_run_setup("spectrum.mode = file\n"), ConfigError);
    REQUIRE_THROWS_AS(
        parse_run_setup("solver.kind = reference\nreference.K_ref = 256\ngrid.K = 128\n"),
        ConfigError);
}

TEST_CASE("spectrum CSV roundtrip") {
    const auto dir = temp_dir("spectrum");
    const auto spec = power_law_spectrum(-6.0, 0.37, 41, 5.5);
    SpectrumHyper hyper;
    hyper.sigma_tau = 2.5;
    save_spectrum_csv(dir / "s.csv", spec, hyper);
    const auto back = load_spectrum_csv(dir / "s.csv");
    REQUIRE(back.size() == spec.size());
    REQUIRE(back.l_max == spec.l_max);
    REQUIRE(back.sigma0 == spec.sigma0);
    REQUIRE((back.tau - spec.tau).norm() == 0.0);
}

TEST_CASE("spectra table roundtrip and fallbacks") {
    const auto dir = temp_dir("spectra");
    std::vector<LogSpectrum> table;
    for (int i = 0; i < 3; ++i) table.push_back(power_law_spectrum(-4.0 - i, 1.0 + i, 17, 4.0));
    save_spectra_table(dir / "t.csv", table);
    const auto back = load_spectra_table(dir / "t.csv");
    REQUIRE(back.size() == 3);
    for (int i = 0; i < 3; ++i) REQUIRE((back[i].tau - table[i].tau).norm() == 0.0);

    SECTION("empty table writes a valid empty file") {
        save_spectra_table(dir / "empty.csv", {});
        REQUIRE(load_spectra_table(dir / "empty.csv").empty());
    }
    SECTION("single-spectrum files load as one entry") {
        SpectrumHyper hyper;
        save_spectrum_csv(dir / "one.csv", table[0], hyper);
        const auto one = load_spectra_table(dir / "one.csv");
        REQUIRE(one.size() == 1);
        REQUIRE((one[0].tau - table[0].tau).norm() == 0.0);
    }
}

TEST_CASE("trajectory store roundtrip") {
    const auto dir = temp_dir("store");
    const std::string config_text = "grid.K = 16\nrun.steps = 1\n";
    TrajectoryStore store(dir, "probabilistic", config_text, 42);

    SimState state = testutil::random_sim_state(16, 2, 7);
    state.time = 0.25;
    state.seed = 42;
    state.step_index = 3;
    store.save_state(3, state);

    const SimState back = TrajectoryStore::load_state(dir, 3);
    REQUIRE(back.K == state.K);
    REQUIRE(back.order == state.order);
    REQUIRE(back.time == state.time);
    REQUIRE(back.step_index == 3);
    for (int k = 0; k <= 8; ++k) {
        REQUIRE((back.mode(k).u - state.mode(k).u).norm() == 0.0);
        REQUIRE((back.mode(k).v - state.mode(k).v).norm() == 0.0);
    }
    REQUIRE((back.spectrum.tau - state.spectrum.tau).norm() == 0.0);

    SECTION("manifest records the config hash") {
        const auto manifest = TrajectoryStore::load_manifest(dir);
        REQUIRE(manifest.at("config_hash").get<std::string>() ==
                io::hash_hex(io::content_hash(config_text)));
        REQUIRE(manifest.at("seed").get<std::uint64_t>() == 42);
        REQUIRE(manifest.at("kind").get<std::string>() == "probabilistic");
    }
    SECTION("mode std sidecar") {
        Eigen::VectorXd ms(9);
        for (int i = 0; i < 9; ++i) ms(i) = 0.1 * i;
        store.save_mode_std(3, ms);
        const auto back_ms = TrajectoryStore::load_mode_std(dir, 3);
        REQUIRE(back_ms.has_value());
        REQUIRE((*back_ms - ms).norm() == 0.0);
        REQUIRE_FALSE(TrajectoryStore::load_mode_std(dir, 99).has_value());
    }
    SECTION("metrics rows append with stable formatting") {
        MetricsRow row;
        row.step = 1;
        row.time = 0.04;
        row.rel_l2_vs_reference = 1.0 / 3.0;
        row.total_power = 2.5e-7;
        row.optimizer_iters = 17;
        row.grad_norm = 1e-10;
        store.append_metrics(row);
        const std::string text = io::read_file(dir / "metrics.csv");
        REQUIRE(text.find("1,0.040000000000000001,0.33333333333333331,2.4999999999999999e-07,"
                          "17,1e-10") != std::string::npos);
    }
}

TEST_CASE("value lift produces spectral-derivative consistent states") {
    const int K = 32;
    SpatialGrid grid(K);
    std::vector<double> v(static_cast<std::size_t>(K));
    for (int j = 0; j < K; ++j) v[static_cast<std::size_t>(j)] = std::cos(kTwoPi * 3 * grid.position(j));
    const SimState s = state_from_values(v, 2, 0.5, 0.01, false, false);
    const FourierField c = dft_analyze(v, grid);
    for (int k = 0; k <= K / 2; ++k)
        for (int d = 0; d <= 2; ++d)
            REQUIRE(std::abs(s.mode(k).u(d) - c.at(k) * derivative_factor(k, d, K)) < 1e-12);
    REQUIRE(s.time == 0.5);
}
