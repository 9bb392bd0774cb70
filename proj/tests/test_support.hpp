#ifndef SB_TEST_SUPPORT_HPP
#define SB_TEST_SUPPORT_HPP

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "sb/blocks.hpp"
#include "sb/common.hpp"
#include "sb/tensor.hpp"

namespace sbt {

template <class S>
sb::TensorT<S> random_tensor(sb::Shape shape, uint64_t seed, double lo = -1.0, double hi = 1.0) {
    sb::Rng rng(seed);
    std::vector<S> v(size_t(sb::numel(shape)));
    for (auto& x : v) x = S(rng.uniform(lo, hi));
    return sb::make_tensor<S>(std::move(shape), std::move(v));
}

// Brute-force N-d cross-correlation, the independent oracle for conv.
template <class S>
std::vector<S> conv_oracle(const std::vector<S>& x, const sb::Shape& xs, const std::vector<S>& w,
                           const sb::Shape& ws, const std::vector<S>& bias,
                           const std::vector<int64_t>& stride, const std::vector<int64_t>& pad,
                           sb::Shape& out_shape) {
    const int rank = int(xs.size()) - 2;
    const int64_t B = xs[0], Cin = xs[1], Cout = ws[0];
    sb::Shape oext(static_cast<size_t>(rank));
    for (int r = 0; r < rank; ++r)
        oext[size_t(r)] = (xs[size_t(2 + r)] + 2 * pad[size_t(r)] - ws[size_t(2 + r)]) / stride[size_t(r)] + 1;
    out_shape = {B, Cout};
    for (int r = 0; r < rank; ++r) out_shape.push_back(oext[size_t(r)]);
    std::vector<S> out(size_t(sb::numel(out_shape)), S(0));

    const auto xext = [&](int r) { return xs[size_t(2 + r)]; };
    const auto kext = [&](int r) { return ws[size_t(2 + r)]; };
    std::vector<int64_t> oc(static_cast<size_t>(rank)), kc(static_cast<size_t>(rank));
    const int64_t osz = sb::numel(sb::Shape(oext.begin(), oext.end()));
    const int64_t ksz = sb::numel(sb::Shape(ws.begin() + 2, ws.end()));
    for (int64_t b = 0; b < B; ++b)
        for (int64_t co = 0; co < Cout; ++co)
            for (int64_t p = 0; p < osz; ++p) {
                int64_t rem = p;
                for (int r = rank; r-- > 0;) { oc[size_t(r)] = rem % oext[size_t(r)]; rem /= oext[size_t(r)]; }
                S acc = bias.empty() ? S(0) : bias[size_t(co)];
                for (int64_t ci = 0; ci < Cin; ++ci)
                    for (int64_t kk = 0; kk < ksz; ++kk) {
                        int64_t krem = kk;
                        for (int r = rank; r-- > 0;) { kc[size_t(r)] = krem % kext(r); krem /= kext(r); }
                        int64_t xoff = 0;
                        bool inside = true;
                        for (int r = 0; r < rank; ++r) {
                            const int64_t s = oc[size_t(r)] * stride[size_t(r)] - pad[size_t(r)] + kc[size_t(r)];
                            if (s < 0 || s >= xext(r)) { inside = false; break; }
                            xoff = xoff * xext(r) + s;
                        }
                        if (!inside) continue;
                        int64_t woff = 0;
                        for (int r = 0; r < rank; ++r) woff = woff * kext(r) + kc[size_t(r)];
                        int64_t xi = (b * Cin + ci);
                        int64_t xsz = 1;
                        for (int r = 0; r < rank; ++r) xsz *= xext(r);
                        acc += x[size_t(xi * xsz + xoff)] * w[size_t((co * Cin + ci) * ksz + woff)];
                    }
                int64_t oi = (b * Cout + co) * osz + p;
                out[size_t(oi)] = acc;
            }
    return out;
}

/// Reference align-corners=false linear interpolation of one 2D plane.
inline double bilinear_ref(const std::vector<double>& src, int64_t h, int64_t w, int64_t oh,
                           int64_t ow, int64_t oy, int64_t ox) {
    auto tap = [](int64_t o, int64_t in, int64_t out, int64_t& i0, int64_t& i1, double& f) {
        double s = (double(o) + 0.5) * double(in) / double(out) - 0.5;
        if (s < 0) s = 0;
        if (s > double(in - 1)) s = double(in - 1);
        i0 = int64_t(s);
        if (i0 > in - 1) i0 = in - 1;
        i1 = std::min(i0 + 1, in - 1);
        f = s - double(i0);
    };
    int64_t y0, y1, x0, x1;
    double fy, fx;
    tap(oy, h, oh, y0, y1, fy);
    tap(ox, w, ow, x0, x1, fx);
    return (1 - fy) * ((1 - fx) * src[size_t(y0 * w + x0)] + fx * src[size_t(y0 * w + x1)]) +
           fy * ((1 - fx) * src[size_t(y1 * w + x0)] + fx * src[size_t(y1 * w + x1)]);
}

/// Golden tensor snapshots: "shape: d0,d1,...\n" + little-endian f64 payload.
inline void write_snapshot(const std::string& path, const sb::Shape& shape,
                           const std::vector<double>& data) {
    std::ofstream f(path, std::ios::binary);
    f << "shape: ";
    for (size_t i = 0; i < shape.size(); ++i) f << (i ? "," : "") << shape[i];
    f << "\n";
    f.write(reinterpret_cast<const char*>(data.data()), std::streamsize(data.size() * sizeof(double)));
}

inline bool read_snapshot(const std::string& path, sb::Shape& shape, std::vector<double>& data) {
    std::ifstream f(path, std::ios::binary);
    if (!f) return false;
    std::string header;
    std::getline(f, header);
    if (header.rfind("shape: ", 0) != 0) return false;
    shape.clear();
    std::string dims = header.substr(7);
    size_t pos = 0;
    while (pos < dims.size()) {
        size_t comma = dims.find(',', pos);
        if (comma == std::string::npos) comma = dims.size();
        shape.push_back(std::stoll(dims.substr(pos, comma - pos)));
        pos = comma + 1;
    }
    data.resize(size_t(sb::numel(shape)));
    f.read(reinterpret_cast<char*>(data.data()), std::streamsize(data.size() * sizeof(double)));
    return bool(f);
}

/// Finite-difference check over the input AND every learnable parameter of a
/// block. `f` must bind the block's parameters on the graph it is given.
template <class S>
double param_grad_check(const std::function<sb::TensorT<S>(sb::GraphT<S>&, const sb::TensorT<S>&)>& f,
                        const sb::ParamRefs<S>& params, const sb::TensorT<S>& x, double eps = 1e-5,
                        uint64_t graph_seed = 0, bool training = true) {
    sb::GraphT<S> g(graph_seed, training, true);
    auto xt = g.leaf(x.shape, std::make_shared<std::vector<S>>(*x.data), true);
    auto loss = f(g, xt);
    auto grads = g.backward(loss);

    // snapshot analytic grads before numeric evals rebind the params
    const std::vector<S> gx = grads[size_t(xt.node)];
    std::vector<std::vector<S>> pgrads;
    for (auto* p : params)
        pgrads.push_back(p->learnable && p->node >= 0 ? grads[size_t(p->node)] : std::vector<S>());

    auto eval = [&]() {
        sb::GraphT<S> ge(graph_seed, training, false);
        auto xe = ge.leaf(x.shape, x.data, false);
        return double(f(ge, xe).item());
    };

    double worst = 0;
    auto probe_one = [&](S& slot, double analytic) {
        const double v = double(slot);
        const double h = eps * std::max(1.0, std::abs(v));
        slot = S(v + h);
        const double fp = eval();
        slot = S(v - h);
        const double fm = eval();
        slot = S(v);
        const double numeric = (fp - fm) / (2 * h);
        const double err =
            std::abs(analytic - numeric) / std::max({1.0, std::abs(analytic), std::abs(numeric)});
        worst = std::max(worst, err);
    };

    for (size_t i = 0; i < x.data->size(); ++i)
        probe_one((*x.data)[i], gx.empty() ? 0.0 : double(gx[i]));
    for (size_t pi = 0; pi < params.size(); ++pi) {
        auto* p = params[pi];
        if (!p->learnable) continue;
        const auto& gp = pgrads[pi];
        for (size_t i = 0; i < p->value.data->size(); ++i)
            probe_one((*p->value.data)[i], gp.empty() ? 0.0 : double(gp[i]));
    }
    return worst;
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& tag) {
    auto p = std::filesystem::temp_directory_path() / ("sbtest_" + tag);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

}  // namespace sbt

#endif
