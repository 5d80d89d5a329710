#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <vector>

namespace bonereg {

using CostFn = std::function<double(const std::vector<double>&)>;

struct BoxBounds {
    std::vector<double> lower;
    std::vector<double> upper;

    std::size_t size() const { return lower.size(); }
    /// Throws std::invalid_argument unless lower < upper componentwise.
    void validate() const;
    std::vector<double> clamp(std::vector<double> x) const;
    bool contains(const std::vector<double>& x) const;
};

struct OptResult {
    std::vector<double> best;
    double best_cost = std::numeric_limits<double>::infinity();
    std::size_t evals = 0;
    bool converged = false;
    std::vector<double> trace;  // best cost after each iteration/generation
};

/// Shared tolerances: xtol is in raw parameter units (mm / deg mixed — the
/// caller's bounds balance the sensitivities), ftol in cost units.
struct NelderMeadOptions {
    double xtol = 1e-3;
    double ftol = 1e-5;
    int max_iter = 500;
    /// Per-dimension offsets for the initial simplex; 1.0 each when empty.
    std::vector<double> initial_step;
};

struct PowellOptions {
    double xtol = 1e-3;
    double ftol = 1e-5;
    int max_iter = 60;
    /// Per-dimension scale of the initial direction set; 1.0 each when empty.
    std::vector<double> initial_step;
};

struct DifferentialEvolutionOptions {
    int population = 30;
    double weight = 0.7;          // F
    double crossover = 0.9;       // CR
    int max_generations = 100;
    std::uint64_t seed = 0;
    /// When present, clamped into member 0 of the initial population.
    std::optional<std::vector<double>> x0;
    int threads = 1;
};

struct HybridOptions {
    PowellOptions powell;
    NelderMeadOptions nelder_mead;
    /// A round (Powell then Nelder-Mead) that improves the best cost by no
    /// more than this ends the alternation.
    double round_ftol = 1e-5;
    int max_rounds = 3;
};

/// Downhill simplex (reflection 1, expansion 2, contraction 0.5, shrink
/// 0.5). Converges when the simplex diameter drops below xtol AND the cost
/// spread below ftol. Cost ties are broken toward the lower vertex index so
/// runs are bit-reproducible. Throws std::invalid_argument when the cost is
/// non-finite at x0; non-finite costs elsewhere are treated as +infinity.
OptResult nelder_mead(const CostFn& cost, const std::vector<double>& x0,
                      const NelderMeadOptions& opts = {});

/// Powell's conjugate-direction method with bracketing + golden-section line
/// minimization (line tolerance xtol/10); the direction set is reset to the
/// coordinate axes every n iterations.
OptResult powell(const CostFn& cost, const std::vector<double>& x0,
                 const PowellOptions& opts = {});

/// DE/rand/1/bin with clamping to bounds and greedy (<=) selection. All of a
/// generation's trial vectors are drawn from the RNG before any evaluation,
/// and results are reduced in member order, so the outcome is identical at
/// any thread count.
OptResult differential_evolution(const CostFn& cost, const BoxBounds& bounds,
                                 const DifferentialEvolutionOptions& opts = {});

/// Alternates Powell and Nelder-Mead (each warm-started at the current
/// best) until a full round improves by <= round_ftol, capped at max_rounds.
OptResult hybrid_powell_nm(const CostFn& cost, const std::vector<double>& x0,
                           const HybridOptions& opts = {});

}  // namespace bonereg
