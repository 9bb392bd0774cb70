#ifndef SB_GRADCHECK_HPP
#define SB_GRADCHECK_HPP

#include <functional>

#include "sb/tensor.hpp"

namespace sb {

/// Scalar-valued function of one tensor, evaluated on a caller-provided graph.
template <class S>
using TensorFn = std::function<TensorT<S>(GraphT<S>&, const TensorT<S>&)>;

/// Central finite-difference check of reverse-mode gradients.
///
/// Returns max over elements of |analytic - numeric| / max(1, |analytic|, |numeric|).
/// The step per element is eps * max(1, |x_i|). Each evaluation runs on a
/// fresh graph seeded identically, so stochastic ops see the same stream.
template <class S>
double gradient_check(const TensorFn<S>& f, const TensorT<S>& x, double eps = 1e-5,
                      uint64_t graph_seed = 0, bool training = false) {
    // analytic
    GraphT<S> g(graph_seed, training, /*grad=*/true);
    auto xt = g.leaf(x.shape, std::make_shared<std::vector<S>>(*x.data), true);
    TensorT<S> loss = f(g, xt);
    check_shape(loss.size() == 1, "gradient_check: f must be scalar-valued");
    auto grads = g.backward(loss);
    const std::vector<S>& analytic = grads[size_t(xt.node)];

    auto eval = [&](const std::vector<S>& v) -> double {
        GraphT<S> ge(graph_seed, training, /*grad=*/false);
        auto xe = ge.leaf(x.shape, std::make_shared<std::vector<S>>(v), false);
        return double(f(ge, xe).item());
    };

    double worst = 0;
    std::vector<S> probe = *x.data;
    for (size_t i = 0; i < probe.size(); ++i) {
        const double xi = double(probe[i]);
        const double h = eps * std::max(1.0, std::abs(xi));
        probe[i] = S(xi + h);
        const double fp = eval(probe);
        probe[i] = S(xi - h);
        const double fm = eval(probe);
        probe[i] = S(xi);
        const double numeric = (fp - fm) / (2 * h);
        const double a = analytic.empty() ? 0.0 : double(analytic[i]);
        const double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace sb

#endif  // SB_GRADCHECK_HPP
