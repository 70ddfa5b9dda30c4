#pragma once

#include "rsprompt/core/tensor.hpp"

#include <Eigen/Core>

#include <cmath>
#include <deque>
#include <functional>
#include <string>

namespace rsprompt {

struct LbfgsOptions {
    int max_iter = 1000;
    int history = 10;
    double gtol = 1e-6;    // stop when max |g_i| <= gtol
    double ftol = 1e-14;   // stop when the relative decrease falls below ftol
};

struct LbfgsResult {
    Eigen::VectorXd x;
    double f = 0;
    int iterations = 0;
    int evaluations = 0;
    bool converged = false;
    std::string stop_reason;
};

/// Limited-memory BFGS with a backtracking Armijo line search. `fg(x, g)` returns the
/// objective and writes the gradient into g.
inline LbfgsResult lbfgs_minimize(const std::function<double(const Eigen::VectorXd&, Eigen::VectorXd&)>& fg, Eigen::VectorXd x0,
                                  const LbfgsOptions& opt = {}) {
    LbfgsResult r;
    r.x = std::move(x0);
    Eigen::VectorXd g(r.x.size());
    r.f = fg(r.x, g);
    r.evaluations = 1;
    if (!std::isfinite(r.f)) throw ContractError("lbfgs: non-finite objective at the starting point");
    std::deque<Eigen::VectorXd> S, Y;
    std::deque<double> rho;
    Eigen::VectorXd xn(r.x.size()), gn(r.x.size());
    for (r.iterations = 0; r.iterations < opt.max_iter;) {
        if (g.size() == 0 || g.cwiseAbs().maxCoeff() <= opt.gtol) {
            r.converged = true;
            r.stop_reason = "gradient tolerance";
            return r;
        }
        // Two-loop recursion.
        Eigen::VectorXd q = g;
        std::vector<double> alpha(S.size());
        for (std::size_t i = S.size(); i-- > 0;) {
            alpha[i] = rho[i] * S[i].dot(q);
            q -= alpha[i] * Y[i];
        }
        double gamma = S.empty() ? 1.0 / std::max(1.0, g.norm()) : S.back().dot(Y.back()) / Y.back().squaredNorm();
        q *= gamma;
        for (std::size_t i = 0; i < S.size(); ++i) {
            double b = rho[i] * Y[i].dot(q);
            q += S[i] * (alpha[i] - b);
        }
        Eigen::VectorXd d = -q;
        double slope = g.dot(d);
        if (!(slope < 0)) {
            S.clear();
            Y.clear();
            rho.clear();
            d = -g / std::max(1.0, g.norm());
            slope = g.dot(d);
        }
        double step = 1.0, fn = 0;
        bool accepted = false;
        for (int ls = 0; ls < 60; ++ls) {
            xn = r.x + step * d;
            fn = fg(xn, gn);
            ++r.evaluations;
            if (std::isfinite(fn) && fn <= r.f + 1e-4 * step * slope) {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        ++r.iterations;
        if (!accepted) {
            r.converged = g.cwiseAbs().maxCoeff() <= 100 * opt.gtol;
            r.stop_reason = "line search failed";
            return r;
        }
        Eigen::VectorXd s = xn - r.x, y = gn - g;
        const double sy = s.dot(y);
        const double decrease = r.f - fn;
        r.x.swap(xn);
        g.swap(gn);
        r.f = fn;
        if (sy > 1e-12 * s.norm() * y.norm()) {
            S.push_back(std::move(s));
            Y.push_back(std::move(y));
            rho.push_back(1.0 / sy);
            if (static_cast<int>(S.size()) > opt.history) {
                S.pop_front();
                Y.pop_front();
                rho.pop_front();
            }
        }
        if (decrease <= opt.ftol * std::max({std::abs(r.f), std::abs(r.f + decrease), 1.0})) {
            r.converged = true;
            r.stop_reason = "function tolerance";
            return r;
        }
    }
    r.converged = g.cwiseAbs().maxCoeff() <= opt.gtol;
    r.stop_reason = r.converged ? "gradient tolerance" : "iteration limit";
    return r;
}

}  // namespace rsprompt
