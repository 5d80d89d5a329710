#include "bonereg/optimize.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>
#include <thread>

namespace bonereg {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Counts evaluations and maps non-finite costs to +infinity so comparisons
// stay total; only the very first point is allowed to reject the problem.
struct Evaluator {
    const CostFn& cost;
    std::size_t evals = 0;

    double operator()(const std::vector<double>& x) {
        ++evals;
        const double f = cost(x);
        return std::isfinite(f) ? f : kInf;
    }

    double at_start(const std::vector<double>& x) {
        ++evals;
        const double f = cost(x);
        if (!std::isfinite(f))
            throw std::invalid_argument("optimizer: cost is non-finite at the start point");
        return f;
    }
};

double distance(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
}

std::vector<double> step_or_ones(const std::vector<double>& step, std::size_t n,
                                 const char* who) {
    if (step.empty()) return std::vector<double>(n, 1.0);
    if (step.size() != n)
        throw std::invalid_argument(std::string(who) + ": initial_step size does not match x0");
    for (double s : step)
        if (!(std::abs(s) > 0.0) || !std::isfinite(s))
            throw std::invalid_argument(std::string(who) + ": initial_step entries must be non-zero finite");
    return step;
}

}  // namespace

void BoxBounds::validate() const {
    if (lower.empty() || lower.size() != upper.size())
        throw std::invalid_argument("BoxBounds: lower/upper must be non-empty and equal length");
    for (std::size_t i = 0; i < lower.size(); ++i) {
        if (!std::isfinite(lower[i]) || !std::isfinite(upper[i]) || !(lower[i] < upper[i]))
            throw std::invalid_argument("BoxBounds: requires finite lower < upper per dimension");
    }
}

std::vector<double> BoxBounds::clamp(std::vector<double> x) const {
    if (x.size() != lower.size())
        throw std::invalid_argument("BoxBounds: point dimension does not match bounds");
    for (std::size_t i = 0; i < x.size(); ++i)
        x[i] = std::min(upper[i], std::max(lower[i], x[i]));
    return x;
}

bool BoxBounds::contains(const std::vector<double>& x) const {
    if (x.size() != lower.size()) return false;
    for (std::size_t i = 0; i < x.size(); ++i)
        if (x[i] < lower[i] || x[i] > upper[i]) return false;
    return true;
}

OptResult nelder_mead(const CostFn& cost, const std::vector<double>& x0,
                      const NelderMeadOptions& opts) {
    if (x0.empty()) throw std::invalid_argument("nelder_mead: x0 is empty");
    Evaluator eval{cost};
    OptResult res;
    res.best = x0;
    res.best_cost = eval.at_start(x0);
    if (opts.max_iter <= 0) {
        res.evals = eval.evals;
        return res;
    }

    const std::size_t n = x0.size();
    const std::vector<double> step = step_or_ones(opts.initial_step, n, "nelder_mead");

    std::vector<std::vector<double>> pts(n + 1, x0);
    std::vector<double> f(n + 1);
    f[0] = res.best_cost;
    for (std::size_t i = 0; i < n; ++i) {
        pts[i + 1][i] += step[i];
        f[i + 1] = eval(pts[i + 1]);
    }

    // Ranking that breaks cost ties toward the lower storage index keeps the
    // update sequence (and thus the result) reproducible bit for bit.
    std::vector<std::size_t> order(n + 1);
    auto sort_order = [&] {
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return f[a] < f[b]; });
    };

    const double kReflect = 1.0, kExpand = 2.0, kContract = 0.5, kShrink = 0.5;
    for (int iter = 0; iter < opts.max_iter; ++iter) {
        sort_order();
        const std::size_t best = order[0], second_worst = order[n - 1], worst = order[n];

        double diameter = 0.0;
        for (std::size_t i = 0; i <= n; ++i)
            for (std::size_t j = i + 1; j <= n; ++j)
                diameter = std::max(diameter, distance(pts[i], pts[j]));
        if (diameter < opts.xtol && f[worst] - f[best] < opts.ftol) {
            res.converged = true;
            break;
        }

        std::vector<double> centroid(n, 0.0);
        for (std::size_t i = 0; i <= n; ++i) {
            if (i == worst) continue;
            for (std::size_t j = 0; j < n; ++j) centroid[j] += pts[i][j];
        }
        for (double& c : centroid) c /= static_cast<double>(n);

        auto along = [&](double t) {
            std::vector<double> p(n);
            for (std::size_t j = 0; j < n; ++j)
                p[j] = centroid[j] + t * (centroid[j] - pts[worst][j]);
            return p;
        };

        std::vector<double> xr = along(kReflect);
        const double fr = eval(xr);
        if (fr < f[best]) {
            std::vector<double> xe = along(kExpand);
            const double fe = eval(xe);
            if (fe < fr) {
                pts[worst] = std::move(xe);
                f[worst] = fe;
            } else {
                pts[worst] = std::move(xr);
                f[worst] = fr;
            }
        } else if (fr < f[second_worst]) {
            pts[worst] = std::move(xr);
            f[worst] = fr;
        } else if (fr < f[worst]) {
            std::vector<double> xc = along(kContract);  // outside contraction
            const double fc = eval(xc);
            if (fc <= fr) {
                pts[worst] = std::move(xc);
                f[worst] = fc;
            } else {
                goto shrink;
            }
        } else {
            {
                std::vector<double> xc = along(-kContract);  // inside contraction
                const double fc = eval(xc);
                if (fc < f[worst]) {
                    pts[worst] = std::move(xc);
                    f[worst] = fc;
                } else {
                    goto shrink;
                }
            }
        }
        goto record;

    shrink:
        for (std::size_t i = 0; i <= n; ++i) {
            if (i == best) continue;
            for (std::size_t j = 0; j < n; ++j)
                pts[i][j] = pts[best][j] + kShrink * (pts[i][j] - pts[best][j]);
            f[i] = eval(pts[i]);
        }

    record:
        sort_order();
        res.trace.push_back(f[order[0]]);
    }

    sort_order();
    if (f[order[0]] <= res.best_cost) {
        res.best = pts[order[0]];
        res.best_cost = f[order[0]];
    }
    res.evals = eval.evals;
    return res;
}

namespace {

// Bracket a 1-D minimum by golden-ratio expansion, then shrink the bracket
// with golden-section steps, accelerated by parabolic interpolation where it
// is trustworthy (Brent). tol is the absolute accuracy on the abscissa.
double line_minimize(const std::function<double(double)>& f1d, double f0,
                     double tol, double* f_min) {
    const double kGold = 1.6180339887498949;
    const double kCGold = 0.3819660112501051;

    // Bracket: walk downhill from 0 (flipping direction if needed) until the
    // cost turns upward, leaving a <= b <= c in line order with f(b) lowest.
    double a = 0.0, fa = f0;
    double b = 1.0, fb = f1d(b);
    if (fb > fa) {
        std::swap(a, b);
        std::swap(fa, fb);
    }
    double c = b + kGold * (b - a);
    double fc = f1d(c);
    int guard = 0;
    while (fc < fb && ++guard < 64) {
        a = b;
        fa = fb;
        b = c;
        fb = fc;
        c = b + kGold * (b - a);
        fc = f1d(c);
    }

    double lo = std::min(a, c), hi = std::max(a, c);
    double x = b, w = b, v = b;
    double fx = fb, fw = fb, fv = fb;
    double d = 0.0, e = 0.0;
    for (int it = 0; it < 100; ++it) {
        const double xm = 0.5 * (lo + hi);
        const double tol1 = 0.5 * tol + 1e-12 * std::abs(x);
        const double tol2 = 2.0 * tol1;
        if (std::abs(x - xm) <= tol2 - 0.5 * (hi - lo)) break;

        bool golden = true;
        if (std::abs(e) > tol1) {
            const double r = (x - w) * (fx - fv);
            double q = (x - v) * (fx - fw);
            double p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if (q > 0.0) p = -p;
            q = std::abs(q);
            const double e_prev = e;
            e = d;
            // Accept the parabolic step only if it stays inside the bracket
            // and shrinks faster than half the step before last.
            if (std::abs(p) < std::abs(0.5 * q * e_prev) && p > q * (lo - x) &&
                p < q * (hi - x)) {
                d = p / q;
                const double u_try = x + d;
                if (u_try - lo < tol2 || hi - u_try < tol2)
                    d = (xm >= x) ? tol1 : -tol1;
                golden = false;
            }
        }
        if (golden) {
            e = (x >= xm) ? lo - x : hi - x;
            d = kCGold * e;
        }

        const double u = (std::abs(d) >= tol1) ? x + d : x + ((d >= 0.0) ? tol1 : -tol1);
        const double fu = f1d(u);
        if (fu <= fx) {
            if (u >= x) lo = x; else hi = x;
            v = w; fv = fw;
            w = x; fw = fx;
            x = u; fx = fu;
        } else {
            if (u < x) lo = u; else hi = u;
            if (fu <= fw || w == x) {
                v = w; fv = fw;
                w = u; fw = fu;
            } else if (fu <= fv || v == x || v == w) {
                v = u; fv = fu;
            }
        }
    }
    *f_min = fx;
    return x;
}

}  // namespace

OptResult powell(const CostFn& cost, const std::vector<double>& x0,
                 const PowellOptions& opts) {
    if (x0.empty()) throw std::invalid_argument("powell: x0 is empty");
    Evaluator eval{cost};
    OptResult res;
    res.best = x0;
    res.best_cost = eval.at_start(x0);
    if (opts.max_iter <= 0) {
        res.evals = eval.evals;
        return res;
    }

    const std::size_t n = x0.size();
    const std::vector<double> step = step_or_ones(opts.initial_step, n, "powell");

    auto axis_directions = [&] {
        std::vector<std::vector<double>> dirs(n, std::vector<double>(n, 0.0));
        for (std::size_t i = 0; i < n; ++i) dirs[i][i] = step[i];
        return dirs;
    };
    std::vector<std::vector<double>> dirs = axis_directions();

    std::vector<double> x = x0;
    double fx = res.best_cost;
    const double line_tol = opts.xtol / 10.0;

    auto minimize_along = [&](const std::vector<double>& dir, double f_here) {
        double norm = 0.0;
        for (double d : dir) norm += d * d;
        norm = std::sqrt(norm);
        if (!(norm > 0.0)) return f_here;
        // Work with a unit direction so lambda and the tolerance are in
        // parameter units regardless of how the direction set has evolved.
        std::vector<double> u(n);
        for (std::size_t j = 0; j < n; ++j) u[j] = dir[j] / norm;
        auto f1d = [&](double t) {
            std::vector<double> p(n);
            for (std::size_t j = 0; j < n; ++j) p[j] = x[j] + t * u[j];
            return eval(p);
        };
        double f_min = f_here;
        const double t = line_minimize(f1d, f_here, line_tol, &f_min);
        if (f_min < f_here) {
            for (std::size_t j = 0; j < n; ++j) x[j] += t * u[j];
            return f_min;
        }
        return f_here;
    };

    for (int iter = 0; iter < opts.max_iter; ++iter) {
        const std::vector<double> x_start = x;
        const double f_start = fx;
        double biggest_drop = 0.0;
        std::size_t ibig = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const double f_before = fx;
            fx = minimize_along(dirs[i], fx);
            if (f_before - fx > biggest_drop) {
                biggest_drop = f_before - fx;
                ibig = i;
            }
        }
        res.trace.push_back(fx);

        double move = 0.0;
        for (std::size_t j = 0; j < n; ++j) move = std::max(move, std::abs(x[j] - x_start[j]));
        if (move < opts.xtol && f_start - fx < opts.ftol) {
            res.converged = true;
            break;
        }

        // Powell's heuristic: adopt the net sweep displacement as a new
        // direction when the extrapolated point keeps descending.
        std::vector<double> extrapolated(n), sweep_dir(n);
        for (std::size_t j = 0; j < n; ++j) {
            sweep_dir[j] = x[j] - x_start[j];
            extrapolated[j] = 2.0 * x[j] - x_start[j];
        }
        const double f_extra = eval(extrapolated);
        if (f_extra < f_start) {
            const double d1 = f_start - fx - biggest_drop;
            const double d2 = f_start - f_extra;
            const double t = 2.0 * (f_start - 2.0 * fx + f_extra) * d1 * d1 -
                             biggest_drop * d2 * d2;
            if (t < 0.0) {
                fx = minimize_along(sweep_dir, fx);
                dirs.erase(dirs.begin() + static_cast<std::ptrdiff_t>(ibig));
                dirs.push_back(sweep_dir);
            }
        }

        // Periodic reset keeps the set full-rank on long runs.
        if ((iter + 1) % static_cast<int>(n) == 0) dirs = axis_directions();
    }

    if (fx <= res.best_cost) {
        res.best = x;
        res.best_cost = fx;
    }
    res.evals = eval.evals;
    return res;
}

OptResult differential_evolution(const CostFn& cost, const BoxBounds& bounds,
                                 const DifferentialEvolutionOptions& opts) {
    bounds.validate();
    if (opts.population < 4)
        throw std::invalid_argument("differential_evolution: population must be at least 4");
    if (!(opts.weight > 0.0) || !(opts.crossover >= 0.0 && opts.crossover <= 1.0))
        throw std::invalid_argument("differential_evolution: invalid weight/crossover");

    const std::size_t n = bounds.size();
    const std::size_t np = static_cast<std::size_t>(opts.population);
    std::mt19937_64 rng(opts.seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    // Evaluate a batch of points into slots fixed by index; any thread count
    // yields the same result because nothing else is shared.
    auto evaluate_batch = [&](const std::vector<std::vector<double>>& pts,
                              std::vector<double>& out) {
        out.assign(pts.size(), 0.0);
        const int threads = std::max(1, opts.threads);
        if (threads == 1 || pts.size() < 2) {
            for (std::size_t i = 0; i < pts.size(); ++i) {
                const double f = cost(pts[i]);
                out[i] = std::isfinite(f) ? f : kInf;
            }
            return;
        }
        const std::size_t workers = std::min<std::size_t>(threads, pts.size());
        std::vector<std::thread> pool;
        pool.reserve(workers);
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&, w] {
                for (std::size_t i = w; i < pts.size(); i += workers) {
                    const double f = cost(pts[i]);
                    out[i] = std::isfinite(f) ? f : kInf;
                }
            });
        }
        for (auto& t : pool) t.join();
    };

    std::vector<std::vector<double>> pop(np, std::vector<double>(n));
    for (std::size_t i = 0; i < np; ++i)
        for (std::size_t j = 0; j < n; ++j)
            pop[i][j] = bounds.lower[j] + unit(rng) * (bounds.upper[j] - bounds.lower[j]);
    if (opts.x0) {
        if (opts.x0->size() != n)
            throw std::invalid_argument("differential_evolution: x0 dimension does not match bounds");
        pop[0] = bounds.clamp(*opts.x0);
    }

    OptResult res;
    std::vector<double> fpop;
    evaluate_batch(pop, fpop);
    res.evals = np;

    auto best_index = [&] {
        std::size_t bi = 0;
        for (std::size_t i = 1; i < np; ++i)
            if (fpop[i] < fpop[bi]) bi = i;
        return bi;
    };
    std::size_t bi = best_index();
    res.best = pop[bi];
    res.best_cost = fpop[bi];
    res.trace.push_back(res.best_cost);

    std::uniform_int_distribution<std::size_t> pick(0, np - 1);
    std::uniform_int_distribution<std::size_t> pick_dim(0, n - 1);

    std::vector<std::vector<double>> trials(np, std::vector<double>(n));
    std::vector<double> ftrials;
    for (int gen = 0; gen < opts.max_generations; ++gen) {
        // Draw every trial vector before evaluating anything: the RNG stream
        // is consumed in member order, independent of evaluation threading.
        for (std::size_t i = 0; i < np; ++i) {
            std::size_t a, b, c;
            do { a = pick(rng); } while (a == i);
            do { b = pick(rng); } while (b == i || b == a);
            do { c = pick(rng); } while (c == i || c == a || c == b);
            const std::size_t jrand = pick_dim(rng);
            for (std::size_t j = 0; j < n; ++j) {
                if (unit(rng) < opts.crossover || j == jrand) {
                    double v = pop[a][j] + opts.weight * (pop[b][j] - pop[c][j]);
                    v = std::min(bounds.upper[j], std::max(bounds.lower[j], v));
                    trials[i][j] = v;
                } else {
                    trials[i][j] = pop[i][j];
                }
            }
        }
        evaluate_batch(trials, ftrials);
        res.evals += np;
        for (std::size_t i = 0; i < np; ++i) {
            if (ftrials[i] <= fpop[i]) {
                pop[i] = trials[i];
                fpop[i] = ftrials[i];
            }
        }
        bi = best_index();
        res.best = pop[bi];
        res.best_cost = fpop[bi];
        res.trace.push_back(res.best_cost);
    }
    res.converged = std::isfinite(res.best_cost);
    return res;
}

OptResult hybrid_powell_nm(const CostFn& cost, const std::vector<double>& x0,
                           const HybridOptions& opts) {
    OptResult total;
    total.best = x0;
    total.best_cost = kInf;

    for (int round = 0; round < std::max(1, opts.max_rounds); ++round) {
        const double before = total.best_cost;

        OptResult rp = powell(cost, total.best, opts.powell);
        total.evals += rp.evals;
        total.trace.insert(total.trace.end(), rp.trace.begin(), rp.trace.end());
        if (rp.best_cost < total.best_cost) {
            total.best = rp.best;
            total.best_cost = rp.best_cost;
        }

        OptResult rn = nelder_mead(cost, total.best, opts.nelder_mead);
        total.evals += rn.evals;
        total.trace.insert(total.trace.end(), rn.trace.begin(), rn.trace.end());
        if (rn.best_cost < total.best_cost) {
            total.best = rn.best;
            total.best_cost = rn.best_cost;
        }

        total.converged = rp.converged || rn.converged;
        // before is +inf on round 0, so the first round never ends the loop.
        if (before - total.best_cost <= opts.round_ftol) {
            total.converged = true;
            break;
        }
    }
    return total;
}

}  // namespace bonereg
