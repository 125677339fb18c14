#include <catch2/catch_amalgamated.hpp>

#include "neurovasc/blocks.hpp"
#include "neurovasc/fft3.hpp"
#include "neurovasc/gradcheck.hpp"
#include "neurovasc/layers.hpp"

using namespace neurovasc;

// Reference convolution straight from the definition: explicit loops over
// every tap with boundary checks. Independent of the production kernels.
static Tensor naive_conv3d(const Tensor& in, const std::vector<double>& w,
                           const std::vector<double>& bias, index_t cout, const ops::Conv3dGeom& g) {
    const index_t B = in.b(), Cin = in.c(), D = in.d(), H = in.h(), W = in.w();
    const index_t cin_g = Cin / g.groups, cout_g = cout / g.groups;
    Tensor out(B, cout, D, H, W);
    for (index_t b = 0; b < B; ++b)
        for (index_t co = 0; co < cout; ++co) {
            const index_t grp = co / cout_g;
            for (index_t z = 0; z < D; ++z)
                for (index_t y = 0; y < H; ++y)
                    for (index_t x = 0; x < W; ++x) {
                        double acc = bias.empty() ? 0.0 : bias[static_cast<size_t>(co)];
                        for (index_t cil = 0; cil < cin_g; ++cil) {
                            const index_t ci = grp * cin_g + cil;
                            for (index_t a = 0; a < g.kd; ++a)
                                for (index_t bb = 0; bb < g.kh; ++bb)
                                    for (index_t cc = 0; cc < g.kw; ++cc) {
                                        const index_t zz = z + a * g.dild - g.pd();
                                        const index_t yy = y + bb * g.dilh - g.ph();
                                        const index_t xx = x + cc * g.dilw - g.pw();
                                        if (zz < 0 || zz >= D || yy < 0 || yy >= H || xx < 0 || xx >= W)
                                            continue;
                                        acc += w[static_cast<size_t>(
                                                   ((co * cin_g + cil) * g.kd + a) * g.kh * g.kw +
                                                   bb * g.kw + cc)] *
                                               in.at(b, ci, zz, yy, xx);
                                    }
                        }
                        out.at(b, co, z, y, x) = acc;
                    }
        }
    return out;
}

TEST_CASE("conv3d forward matches the naive oracle") {
    Rng rng(42);
    struct Case {
        index_t cin, cout;
        ops::Conv3dGeom g;
    };
    const Case cases[] = {
        {3, 5, ops::Conv3dGeom{3, 3, 3, 1, 1, 1, 1}},
        {4, 4, ops::Conv3dGeom{3, 3, 3, 1, 2, 2, 1}},
        {4, 6, ops::Conv3dGeom{3, 3, 3, 2, 2, 2, 2}},
        {6, 6, ops::Conv3dGeom{5, 5, 5, 1, 1, 1, 6}},  // depthwise 5^3
        {5, 7, ops::Conv3dGeom{1, 1, 1, 1, 1, 1, 1}},  // pointwise
        {4, 4, ops::Conv3dGeom{3, 3, 3, 1, 3, 3, 1}},
    };
    for (const Case& tc : cases) {
        Tensor in = random_tensor(2, tc.cin, 5, 6, 7, rng);
        const index_t cin_g = tc.cin / tc.g.groups;
        std::vector<double> w(static_cast<size_t>(tc.cout * cin_g * tc.g.taps()));
        std::vector<double> b(static_cast<size_t>(tc.cout));
        for (double& v : w) v = rng.uniform(-1, 1);
        for (double& v : b) v = rng.uniform(-1, 1);
        Tensor out;
        ops::conv3d_forward(in, w, b, tc.cout, tc.g, out);
        Tensor ref = naive_conv3d(in, w, b, tc.cout, tc.g);
        REQUIRE(out.same_shape(ref));
        double md = 0;
        for (index_t i = 0; i < out.numel(); ++i) md = std::max(md, std::fabs(out[i] - ref[i]));
        REQUIRE(md < 1e-12);
    }
}

TEST_CASE("conv3d backward matches finite differences") {
    Rng rng(7);
    for (index_t groups : {index_t(1), index_t(2)}) {
        Conv3d conv(4, 4, ops::Conv3dGeom{3, 3, 3, 1, 2, 2, groups}, true, rng);
        Tensor x = random_tensor(1, 4, 4, 5, 5, rng);
        Tensor proj = make_projection({1, 4, 4, 5, 5}, 99);
        RunCtx ctx;
        Tensor gx;
        auto loss = [&] { return project(conv.forward(x, ctx), proj); };
        auto analytic = [&] {
            conv.zero_grad();
            conv.forward(x, ctx);
            gx = conv.backward(proj);
        };
        std::vector<CheckTarget> targets{target_of(conv.weight), target_of(conv.bias)};
        auto rep = finite_diff_check(loss, analytic, targets);
        INFO(rep.worst);
        REQUIRE(rep.pass(1e-6));
        // input gradient
        Tensor gx_copy = gx;
        auto rep2 = finite_diff_check(loss, [&] { analytic(); for (index_t i = 0; i < gx.numel(); ++i) gx_copy[i] = gx[i]; },
                                      {target_of(x, gx_copy, "input")});
        REQUIRE(rep2.pass(1e-6));
    }
}

TEST_CASE("maxpool halves dims, routes gradients to the argmax") {
    Rng rng(3);
    Tensor x = random_tensor(1, 2, 4, 4, 4, rng);
    MaxPool3d pool;
    RunCtx ctx;
    Tensor y = pool.forward(x, ctx);
    REQUIRE(y.shape() == std::array<index_t, 5>{1, 2, 2, 2, 2});
    for (index_t b = 0; b < 1; ++b)
        for (index_t c = 0; c < 2; ++c)
            for (index_t z = 0; z < 2; ++z)
                for (index_t yy = 0; yy < 2; ++yy)
                    for (index_t xx = 0; xx < 2; ++xx) {
                        double mx = -1e300;
                        for (int a = 0; a < 2; ++a)
                            for (int bb = 0; bb < 2; ++bb)
                                for (int cc = 0; cc < 2; ++cc)
                                    mx = std::max(mx, x.at(b, c, 2 * z + a, 2 * yy + bb, 2 * xx + cc));
                        REQUIRE(y.at(b, c, z, yy, xx) == mx);
                    }

    SECTION("constant input pools to the same constant") {
        Tensor cst(1, 3, 4, 6, 8, 2.5);
        Tensor p = pool.forward(cst, ctx);
        for (index_t i = 0; i < p.numel(); ++i) REQUIRE(p[i] == 2.5);
    }
    SECTION("odd spatial dim is rejected naming the axis") {
        Tensor bad(1, 1, 3, 4, 4);
        REQUIRE_THROWS_WITH(pool.forward(bad, ctx), Catch::Matchers::ContainsSubstring("D"));
    }
    SECTION("gradient check") {
        Tensor proj = make_projection({1, 2, 2, 2, 2}, 5);
        Tensor gx;
        auto loss = [&] { return project(pool.forward(x, ctx), proj); };
        auto analytic = [&] {
            pool.forward(x, ctx);
            gx = pool.backward(proj);
        };
        analytic();
        Tensor gxs = gx;
        auto rep = finite_diff_check(loss, [&] { analytic(); gxs = gx; }, {target_of(x, gxs, "input")});
        REQUIRE(rep.pass(1e-6));
    }
}

TEST_CASE("transposed conv doubles dims and matches finite differences") {
    Rng rng(11);
    ConvTranspose3d up(3, 2, rng);
    Tensor x = random_tensor(2, 3, 2, 3, 2, rng);
    RunCtx ctx;
    Tensor y = up.forward(x, ctx);
    REQUIRE(y.shape() == std::array<index_t, 5>{2, 2, 4, 6, 4});

    // oracle: each output voxel (2z+a, 2y+b, 2x+c) = bias + sum_ci in*w
    for (index_t b = 0; b < 2; ++b)
        for (index_t co = 0; co < 2; ++co)
            for (index_t z = 0; z < 4; ++z)
                for (index_t yy = 0; yy < 6; ++yy)
                    for (index_t xx = 0; xx < 4; ++xx) {
                        double acc = up.bias.w[static_cast<size_t>(co)];
                        for (index_t ci = 0; ci < 3; ++ci)
                            acc += x.at(b, ci, z / 2, yy / 2, xx / 2) *
                                   up.weight.w[static_cast<size_t>(((ci * 2 + co) * 2 + z % 2) * 4 +
                                                                   (yy % 2) * 2 + xx % 2)];
                        REQUIRE_THAT(y.at(b, co, z, yy, xx), Catch::Matchers::WithinAbs(acc, 1e-12));
                    }

    Tensor proj = make_projection({2, 2, 4, 6, 4}, 17);
    Tensor gx;
    auto loss = [&] { return project(up.forward(x, ctx), proj); };
    auto analytic = [&] {
        up.zero_grad();
        up.forward(x, ctx);
        gx = up.backward(proj);
    };
    analytic();
    Tensor gxs = gx;
    auto rep = finite_diff_check(loss, [&] { analytic(); gxs = gx; },
                                 {target_of(up.weight), target_of(up.bias), target_of(x, gxs, "input")});
    REQUIRE(rep.pass(1e-6));
}

TEST_CASE("fft3 round trip and naive DFT agreement") {
    Rng rng(23);
    const index_t D = 3, H = 4, W = 5;
    std::vector<fft::cplx> v(static_cast<size_t>(D * H * W));
    for (auto& c : v) c = fft::cplx(rng.uniform(-1, 1), rng.uniform(-1, 1));
    auto orig = v;

    // naive 3D DFT straight from the definition
    std::vector<fft::cplx> ref(v.size());
    for (index_t kz = 0; kz < D; ++kz)
        for (index_t ky = 0; ky < H; ++ky)
            for (index_t kx = 0; kx < W; ++kx) {
                fft::cplx acc(0, 0);
                for (index_t z = 0; z < D; ++z)
                    for (index_t y = 0; y < H; ++y)
                        for (index_t x = 0; x < W; ++x) {
                            const double ang = -2.0 * 3.14159265358979323846 *
                                               (double(kz * z) / D + double(ky * y) / H + double(kx * x) / W);
                            acc += orig[static_cast<size_t>((z * H + y) * W + x)] *
                                   fft::cplx(std::cos(ang), std::sin(ang));
                        }
                ref[static_cast<size_t>((kz * H + ky) * W + kx)] = acc;
            }

    fft::fft3(v.data(), D, H, W, false);
    for (size_t i = 0; i < v.size(); ++i) REQUIRE(std::abs(v[i] - ref[i]) < 1e-10);

    fft::fft3(v.data(), D, H, W, true);
    for (size_t i = 0; i < v.size(); ++i) REQUIRE(std::abs(v[i] - orig[i]) < 1e-10);
}

TEST_CASE("trilinear 2x upsample: partition of unity and exact adjoint") {
    Rng rng(31);
    Tensor x = random_tensor(1, 2, 3, 4, 5, rng);
    Tensor up = AttentionGate::upsample2_trilinear(x);
    REQUIRE(up.shape() == std::array<index_t, 5>{1, 2, 6, 8, 10});

    Tensor cst(1, 1, 3, 4, 5, 3.75);
    Tensor upc = AttentionGate::upsample2_trilinear(cst);
    for (index_t i = 0; i < upc.numel(); ++i) REQUIRE_THAT(upc[i], Catch::Matchers::WithinAbs(3.75, 1e-12));

    Tensor y = random_tensor(1, 2, 6, 8, 10, rng);
    Tensor adj = AttentionGate::upsample2_trilinear_adjoint(y);
    double lhs = 0, rhs = 0;
    for (index_t i = 0; i < up.numel(); ++i) lhs += up[i] * y[i];
    for (index_t i = 0; i < x.numel(); ++i) rhs += x[i] * adj[i];
    REQUIRE_THAT(lhs, Catch::Matchers::WithinRel(rhs, 1e-12));
}

TEST_CASE("rng determinism and stream independence") {
    Rng a(123), b(123);
    for (int i = 0; i < 100; ++i) REQUIRE(a.uniform() == b.uniform());
    Rng c(123);
    Rng c1 = c.fork(0);
    Rng c2 = c.fork(1);
    REQUIRE(c1.next_u64() != c2.next_u64());

    Rng d(55);
    for (int i = 0; i < 10; ++i) (void)d.normal();
    std::string state = d.serialize();
    Rng e(0);
    e.deserialize(state);
    for (int i = 0; i < 20; ++i) REQUIRE(d.normal() == e.normal());
}
