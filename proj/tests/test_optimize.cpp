#include "bonereg/optimize.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "doctest.h"

using namespace bonereg;

namespace {

// Classic test functions with analytically known minima.
double sphere(const std::vector<double>& x) {
    double s = 0.0;
    for (double v : x) s += v * v;
    return s;
}

double rosenbrock2(const std::vector<double>& x) {
    const double a = 1.0 - x[0];
    const double b = x[1] - x[0] * x[0];
    return a * a + 100.0 * b * b;
}

double rastrigin(const std::vector<double>& x) {
    double s = 10.0 * static_cast<double>(x.size());
    for (double v : x) s += v * v - 10.0 * std::cos(2.0 * M_PI * v);
    return s;
}

bool non_increasing(const std::vector<double>& t) {
    for (std::size_t i = 1; i < t.size(); ++i)
        if (t[i] > t[i - 1]) return false;
    return true;
}

bool same_result(const OptResult& a, const OptResult& b) {
    return a.best == b.best && a.best_cost == b.best_cost && a.evals == b.evals &&
           a.converged == b.converged && a.trace == b.trace;
}

}  // namespace

TEST_CASE("nelder_mead minimizes the 2-D sphere from (3,3)") {
    NelderMeadOptions opts;
    opts.max_iter = 200;
    const OptResult r = nelder_mead(sphere, {3.0, 3.0}, opts);
    CHECK(r.converged);
    CHECK(std::sqrt(sphere(r.best)) < 1e-4);
    CHECK(r.best_cost == doctest::Approx(sphere(r.best)).epsilon(1e-12));
    CHECK(r.evals >= 1);
    CHECK(non_increasing(r.trace));
}

TEST_CASE("nelder_mead solves 2-D Rosenbrock from (-1.2, 1)") {
    const OptResult r = nelder_mead(rosenbrock2, {-1.2, 1.0});
    CHECK(r.best_cost < 1e-6);
    CHECK(std::abs(r.best[0] - 1.0) < 1e-3);
    CHECK(std::abs(r.best[1] - 1.0) < 1e-3);
    CHECK(non_increasing(r.trace));
}

TEST_CASE("nelder_mead with a zero budget returns the start point unconverged") {
    NelderMeadOptions opts;
    opts.max_iter = 0;
    const OptResult r = nelder_mead(sphere, {2.0, -3.0}, opts);
    CHECK(r.best == std::vector<double>{2.0, -3.0});
    CHECK(r.best_cost == sphere({2.0, -3.0}));
    CHECK_FALSE(r.converged);
    CHECK(r.evals == 1);
}

TEST_CASE("nelder_mead rejects a start point with non-finite cost") {
    auto bad = [](const std::vector<double>&) { return std::numeric_limits<double>::quiet_NaN(); };
    CHECK_THROWS_AS(nelder_mead(bad, {0.0, 0.0}), std::invalid_argument);
    CHECK_THROWS_AS(nelder_mead(sphere, {}), std::invalid_argument);
}

TEST_CASE("nelder_mead is deterministic") {
    const OptResult a = nelder_mead(rosenbrock2, {-1.2, 1.0});
    const OptResult b = nelder_mead(rosenbrock2, {-1.2, 1.0});
    CHECK(same_result(a, b));
}

TEST_CASE("powell drives a separable quadratic below 1e-10 in three sweeps") {
    auto quad = [](const std::vector<double>& x) {
        return 1.0 * x[0] * x[0] + 10.0 * x[1] * x[1] + 100.0 * x[2] * x[2];
    };
    PowellOptions opts;
    opts.max_iter = 3;
    const OptResult r = powell(quad, {1.0, 1.0, 1.0}, opts);
    CHECK(r.best_cost < 1e-10);
    CHECK(r.trace.size() <= 3);
    CHECK(non_increasing(r.trace));
}

TEST_CASE("powell converges immediately on a constant cost") {
    auto flat = [](const std::vector<double>&) { return 7.5; };
    const OptResult r = powell(flat, {0.3, -0.7, 2.0});
    CHECK(r.converged);
    CHECK(r.best == std::vector<double>{0.3, -0.7, 2.0});
    CHECK(r.best_cost == 7.5);
    CHECK(r.trace.size() == 1);
}

TEST_CASE("powell solves 2-D Rosenbrock") {
    // The banana valley is shallow, so accuracy-matched tolerances are needed
    // (the defaults target mm/deg pose costs, not 1e-3-scale precision).
    PowellOptions opts;
    opts.xtol = 1e-6;
    opts.ftol = 1e-10;
    opts.max_iter = 200;
    const OptResult r = powell(rosenbrock2, {-1.2, 1.0}, opts);
    CHECK(std::abs(r.best[0] - 1.0) < 1e-3);
    CHECK(std::abs(r.best[1] - 1.0) < 1e-3);
    CHECK(r.best_cost < 1e-6);
    CHECK(non_increasing(r.trace));
}

TEST_CASE("powell with a zero budget returns the start point unconverged") {
    PowellOptions opts;
    opts.max_iter = 0;
    const OptResult r = powell(sphere, {1.0, 1.0}, opts);
    CHECK(r.best == std::vector<double>{1.0, 1.0});
    CHECK_FALSE(r.converged);
    CHECK(r.evals == 1);
}

TEST_CASE("differential_evolution minimizes the 6-D sphere within 100 generations") {
    BoxBounds bounds{std::vector<double>(6, -5.0), std::vector<double>(6, 5.0)};
    const OptResult r = differential_evolution(sphere, bounds);
    CHECK(r.best_cost < 1e-3);
    CHECK(bounds.contains(r.best));
    CHECK(r.converged);
    CHECK(non_increasing(r.trace));
    // Initial population plus max_gen full generations.
    CHECK(r.evals == 30u * 101u);
}

TEST_CASE("differential_evolution finds the Rastrigin optimum on most seeds") {
    BoxBounds bounds{{-5.12, -5.12}, {5.12, 5.12}};
    DifferentialEvolutionOptions opts;
    opts.population = 40;
    opts.max_generations = 200;
    int hits = 0;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        opts.seed = seed;
        const OptResult r = differential_evolution(rastrigin, bounds, opts);
        if (r.best_cost < 1e-2) ++hits;
    }
    CHECK(hits >= 4);
}

TEST_CASE("differential_evolution is reproducible for a fixed seed") {
    BoxBounds bounds{std::vector<double>(4, -5.0), std::vector<double>(4, 5.0)};
    DifferentialEvolutionOptions opts;
    opts.seed = 42;
    const OptResult a = differential_evolution(sphere, bounds, opts);
    const OptResult b = differential_evolution(sphere, bounds, opts);
    CHECK(same_result(a, b));
}

TEST_CASE("differential_evolution result does not depend on the thread count") {
    BoxBounds bounds{std::vector<double>(4, -5.0), std::vector<double>(4, 5.0)};
    DifferentialEvolutionOptions opts;
    opts.seed = 7;
    opts.threads = 1;
    const OptResult a = differential_evolution(rastrigin, bounds, opts);
    opts.threads = 3;
    const OptResult b = differential_evolution(rastrigin, bounds, opts);
    CHECK(same_result(a, b));
}

TEST_CASE("differential_evolution seeds member 0 from x0 when provided") {
    BoxBounds bounds{std::vector<double>(4, -5.0), std::vector<double>(4, 5.0)};
    DifferentialEvolutionOptions opts;
    opts.max_generations = 0;  // initial population only
    opts.x0 = std::vector<double>(4, 0.0);
    const OptResult r = differential_evolution(sphere, bounds, opts);
    // Greedy selection can never lose the seeded optimum.
    CHECK(r.best_cost == 0.0);
    CHECK(r.best == std::vector<double>(4, 0.0));
}

TEST_CASE("differential_evolution rejects bad configuration") {
    BoxBounds bounds{{-1.0}, {1.0}};
    DifferentialEvolutionOptions opts;
    opts.population = 3;
    CHECK_THROWS_AS(differential_evolution(sphere, bounds, opts), std::invalid_argument);
    BoxBounds inverted{{1.0}, {-1.0}};
    CHECK_THROWS_AS(differential_evolution(sphere, inverted, {}), std::invalid_argument);
    BoxBounds mismatched{{-1.0, -1.0}, {1.0}};
    CHECK_THROWS_AS(differential_evolution(sphere, mismatched, {}), std::invalid_argument);
}

TEST_CASE("box bounds clamp and contain") {
    BoxBounds b{{-1.0, 0.0}, {1.0, 2.0}};
    b.validate();
    CHECK(b.clamp({5.0, -3.0}) == std::vector<double>{1.0, 0.0});
    CHECK(b.contains({0.0, 1.0}));
    CHECK_FALSE(b.contains({0.0, 2.5}));
    CHECK_FALSE(b.contains({0.0}));
}

TEST_CASE("hybrid never does worse than powell alone") {
    const OptResult p = powell(rosenbrock2, {-1.2, 1.0});
    const OptResult h = hybrid_powell_nm(rosenbrock2, {-1.2, 1.0});
    CHECK(h.best_cost <= p.best_cost);
    CHECK(h.evals >= p.evals);
    CHECK(non_increasing(h.trace));
}

TEST_CASE("hybrid lands within 1e-4 of the Rosenbrock optimum") {
    HybridOptions opts;
    opts.powell.xtol = 1e-6;
    opts.powell.ftol = 1e-10;
    opts.nelder_mead.xtol = 1e-6;
    opts.nelder_mead.ftol = 1e-10;
    opts.round_ftol = 1e-10;
    const OptResult r = hybrid_powell_nm(rosenbrock2, {-1.2, 1.0}, opts);
    CHECK(std::abs(r.best[0] - 1.0) < 1e-4);
    CHECK(std::abs(r.best[1] - 1.0) < 1e-4);
    CHECK(r.best_cost < 1e-6);
}

TEST_CASE("hybrid terminates within its round budget even when cost keeps improving") {
    // A pure linear slope never converges; the round cap must still bound work.
    auto slope = [](const std::vector<double>& x) { return -x[0] - x[1]; };
    const OptResult r = hybrid_powell_nm(slope, {0.0, 0.0});
    CHECK(std::isfinite(r.best_cost));
    // 3 rounds x (one Powell + one Nelder-Mead run), each internally bounded.
    CHECK(r.evals < 3u * 200000u);
    CHECK(non_increasing(r.trace));
}

TEST_CASE("hybrid is deterministic") {
    const OptResult a = hybrid_powell_nm(rosenbrock2, {-1.2, 1.0});
    const OptResult b = hybrid_powell_nm(rosenbrock2, {-1.2, 1.0});
    CHECK(same_result(a, b));
}
