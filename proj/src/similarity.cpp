#include "bonereg/similarity.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace bonereg {

namespace {

// Two-pass NCC over the window pixels selected by `region` (null = all).
std::optional<SimilarityScore> ncc_window(const Image2D& a, const Image2D& b,
                                          const std::vector<std::uint8_t>* region,
                                          const PixelWindow& w) {
    double sum_a = 0.0, sum_b = 0.0;
    std::size_t n = 0;
    for (int iv = w.v0; iv < w.v0 + w.nv; ++iv)
        for (int iu = w.u0; iu < w.u0 + w.nu; ++iu) {
            const std::size_t i = a.index(iu, iv);
            if (region && !(*region)[i]) continue;
            sum_a += a.data[i];
            sum_b += b.data[i];
            ++n;
        }
    if (n < 2) return std::nullopt;
    const double mean_a = sum_a / static_cast<double>(n);
    const double mean_b = sum_b / static_cast<double>(n);

    double var_a = 0.0, var_b = 0.0, cov = 0.0;
    for (int iv = w.v0; iv < w.v0 + w.nv; ++iv)
        for (int iu = w.u0; iu < w.u0 + w.nu; ++iu) {
            const std::size_t i = a.index(iu, iv);
            if (region && !(*region)[i]) continue;
            const double da = a.data[i] - mean_a;
            const double db = b.data[i] - mean_b;
            var_a += da * da;
            var_b += db * db;
            cov += da * db;
        }
    if (var_a <= 0.0 || var_b <= 0.0) return std::nullopt;
    return SimilarityScore{cov / (std::sqrt(var_a) * std::sqrt(var_b)), n};
}

// Chebyshev dilation of the window part of `bits` by `radius`, two-pass
// (horizontal then vertical run maxima), clamped to the window.
void dilate_window(std::vector<std::uint8_t>& bits, int nu, const PixelWindow& w, int radius) {
    if (radius <= 0) return;
    std::vector<std::uint8_t> tmp(bits.size(), 0);
    for (int iv = w.v0; iv < w.v0 + w.nv; ++iv)
        for (int iu = w.u0; iu < w.u0 + w.nu; ++iu) {
            bool on = false;
            const int lo = std::max(w.u0, iu - radius), hi = std::min(w.u0 + w.nu - 1, iu + radius);
            for (int k = lo; k <= hi && !on; ++k)
                on = bits[static_cast<std::size_t>(k) + static_cast<std::size_t>(nu) * iv];
            tmp[static_cast<std::size_t>(iu) + static_cast<std::size_t>(nu) * iv] = on;
        }
    for (int iv = w.v0; iv < w.v0 + w.nv; ++iv)
        for (int iu = w.u0; iu < w.u0 + w.nu; ++iu) {
            bool on = false;
            const int lo = std::max(w.v0, iv - radius), hi = std::min(w.v0 + w.nv - 1, iv + radius);
            for (int k = lo; k <= hi && !on; ++k)
                on = tmp[static_cast<std::size_t>(iu) + static_cast<std::size_t>(nu) * k];
            bits[static_cast<std::size_t>(iu) + static_cast<std::size_t>(nu) * iv] = on;
        }
}

}  // namespace

std::optional<SimilarityScore> ncc(const Image2D& a, const Image2D& b,
                                   const std::vector<std::uint8_t>* region) {
    if (a.nu != b.nu || a.nv != b.nv) throw std::invalid_argument("ncc: image dims differ");
    if (region && region->size() != a.data.size())
        throw std::invalid_argument("ncc: region size does not match images");
    return ncc_window(a, b, region, PixelWindow{0, 0, a.nu, a.nv});
}

ObjectiveContext make_objective_context(const Image2D& fixed, const Volume& moving,
                                        const Volume& mask01, const LocalBox& support,
                                        const ProjectionGeometry& g, int dilate_px,
                                        int threads) {
    g.validate();
    fixed.validate();
    if (fixed.nu != g.nu || fixed.nv != g.nv)
        throw std::invalid_argument("objective: fixed image does not match the geometry");
    if (moving.dims != mask01.dims)
        throw std::invalid_argument("objective: moving volume and mask grids differ");
    if (dilate_px < 0) throw std::invalid_argument("objective: dilation radius must be >= 0");
    return ObjectiveContext{&fixed, &moving, &mask01, support, &g, dilate_px,
                            std::max(1, threads)};
}

double objective_cost(const ObjectiveContext& ctx, const Pose6DoF& pose) {
    const ProjectionGeometry& g = *ctx.geometry;
    const PixelWindow window = project_box_window(ctx.support, pose, g, ctx.dilate_px + 2);
    if (window.empty()) return kUndefinedCost;

    Image2D drr, mask_integral;
    drr.nu = mask_integral.nu = g.nu;
    drr.nv = mask_integral.nv = g.nv;
    drr.pu = mask_integral.pu = g.pu;
    drr.pv = mask_integral.pv = g.pv;
    drr.data.assign(static_cast<std::size_t>(g.nu) * g.nv, 0.0f);
    mask_integral.data.assign(static_cast<std::size_t>(g.nu) * g.nv, 0.0f);
    render_fused_window(*ctx.moving, *ctx.mask01, pose, g, window, ctx.support, drr,
                        mask_integral, ctx.threads);

    const double thr =
        0.5 * std::min({ctx.mask01->spacing.x, ctx.mask01->spacing.y, ctx.mask01->spacing.z});
    std::vector<std::uint8_t> region(drr.data.size(), 0);
    bool any = false;
    for (int iv = window.v0; iv < window.v0 + window.nv; ++iv)
        for (int iu = window.u0; iu < window.u0 + window.nu; ++iu) {
            const bool on = mask_integral.at(iu, iv) > thr;
            region[drr.index(iu, iv)] = on;
            any = any || on;
        }
    if (!any) return kUndefinedCost;
    dilate_window(region, g.nu, window, ctx.dilate_px);

    const auto score = ncc_window(*ctx.fixed, drr, &region, window);
    if (!score) return kUndefinedCost;
    return std::max(0.0, 1.0 - score->value);
}

double objective(const Image2D& fixed, const Volume& v, const BoneMask3D& mask,
                 const ProjectionGeometry& g, const Pose6DoF& pose, int threads) {
    if (!mask.same_grid(v)) throw std::invalid_argument("objective: mask grid differs from volume");
    if (mask.count_true() == 0) throw std::invalid_argument("objective: empty bone mask");
    const Volume mask01 = mask_as_volume(mask);
    // Clip box covering the union of supports: the whole grid is always safe
    // for the one-shot form; the persistent-context path uses the tighter
    // mask box.
    const ObjectiveContext ctx =
        make_objective_context(fixed, v, mask01, volume_support(v), g,
                               kObjectiveDilateRadius, threads);
    return objective_cost(ctx, pose);
}

}  // namespace bonereg
