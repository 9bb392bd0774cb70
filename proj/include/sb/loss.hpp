#ifndef SB_LOSS_HPP
#define SB_LOSS_HPP

#include "sb/tensor.hpp"

namespace sb {

struct LossConfig {
    double gamma = 0.9;       // weight of the Dice term
    double dice_eps = 1e-6;   // smoothing added to numerator and denominator
    double bce_clamp = 1e-7;  // probability clamp before the logs
};

/// Soft Dice loss with squared-sum denominator:
/// 1 - (2*sum(p*g) + eps) / (sum(p^2) + sum(g^2) + eps).
template <class S>
TensorT<S> dice_loss(GraphT<S>& g, const TensorT<S>& pred, const TensorT<S>& target,
                     double eps = 1e-6) {
    check_shape(pred.shape == target.shape, "dice_loss: shape mismatch");
    auto inter = g.sum_all(g.mul(pred, target));
    auto pp = g.sum_all(g.mul(pred, pred));
    auto gg = g.sum_all(g.mul(target, target));
    auto num = g.affine(inter, S(2), S(eps));
    auto den = g.affine(g.add(pp, gg), S(1), S(eps));
    return g.affine(g.div(num, den), S(-1), S(1));
}

/// Mean binary cross-entropy with probabilities clamped to [delta, 1-delta].
template <class S>
TensorT<S> bce_loss(GraphT<S>& g, const TensorT<S>& pred, const TensorT<S>& target,
                    double delta = 1e-7) {
    check_shape(pred.shape == target.shape, "bce_loss: shape mismatch");
    const S n = S(pred.size());
    auto p = g.clamp(pred, S(delta), S(1.0 - delta));
    auto pos = g.mul(target, g.log(p));
    auto neg = g.mul(g.affine(target, S(-1), S(1)), g.log(g.affine(p, S(-1), S(1))));
    return g.affine(g.sum_all(g.add(pos, neg)), S(-1) / n, S(0));
}

/// gamma * L_DICE + (1-gamma) * L_BCE.
template <class S>
TensorT<S> combined_loss(GraphT<S>& g, const TensorT<S>& pred, const TensorT<S>& target,
                         const LossConfig& cfg = {}) {
    check_shape(cfg.gamma >= 0.0 && cfg.gamma <= 1.0, "combined_loss: gamma must be in [0,1]");
    auto d = dice_loss(g, pred, target, cfg.dice_eps);
    auto b = bce_loss(g, pred, target, cfg.bce_clamp);
    return g.add(g.affine(d, S(cfg.gamma), S(0)), g.affine(b, S(1.0 - cfg.gamma), S(0)));
}

}  // namespace sb

#endif  // SB_LOSS_HPP
