#include <doctest.h>

#include <cmath>
#include <functional>
#include <limits>

#include "distillforge/rng.hpp"
#include "distillforge/tensor.hpp"

using namespace distillforge;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(numel(shape));
    for (double& x : v) x = rng.uniform(lo, hi);
    return Tensor(std::move(shape), std::move(v));
}

using MultiFn = std::function<Tensor(const std::vector<Tensor>&)>;

/// sum(op(xs) * r) for a fixed random weighting r, making every output element matter.
MultiFn weighted(const MultiFn& op, const Tensor& r) {
    return [op, r](const std::vector<Tensor>& xs) { return sum(mul(op(xs), r)); };
}

/// x -> sum_t <grad_t(h)(x), v_t>, which exercises the adjoint of every adjoint.
MultiFn directional_grad(const MultiFn& h, const std::vector<Tensor>& dirs) {
    return [h, dirs](const std::vector<Tensor>& xs) {
        std::vector<Tensor> in = xs;
        Graph local;
        const bool bound = xs[0].requires_grad();
        if (!bound)
            for (auto& x : in) x = local.leaf(x);
        const auto gs = grad(h(in), in, bound);
        Tensor acc = sum(mul(gs[0], dirs[0]));
        for (std::size_t t = 1; t < gs.size(); ++t) acc = add(acc, sum(mul(gs[t], dirs[t])));
        return acc;
    };
}

void check_primitive(const MultiFn& op, const std::vector<Tensor>& xs, std::uint64_t seed,
                     double tol = 1e-6) {
    PrecisionGuard f64(Precision::F64);
    Rng rng(seed);
    Graph probe;
    std::vector<Tensor> leaves;
    for (const auto& x : xs) leaves.push_back(probe.leaf(x));
    const Tensor out = op(leaves);
    const Tensor r = random_tensor(out.shape(), rng);
    const MultiFn h = weighted(op, r);
    CHECK(finite_diff_check(h, xs) < tol);
    std::vector<Tensor> dirs;
    for (const auto& x : xs) dirs.push_back(random_tensor(x.shape(), rng));
    CHECK(finite_diff_check(directional_grad(h, dirs), xs) < tol);
}

}  // namespace

TEST_CASE("relu, softmax cross-entropy and conv2d forward values") {
    const Tensor r = relu(Tensor({3}, {-1, 0, 2}));
    CHECK(r[0] == 0.0);
    CHECK(r[1] == 0.0);
    CHECK(r[2] == 2.0);

    PrecisionGuard f64(Precision::F64);
    const std::vector<int> label{0};
    CHECK(softmax_cross_entropy(Tensor({1, 2}, {0, 0}), label).item() == doctest::Approx(std::log(2.0)).epsilon(1e-15));

    const Tensor ones = Tensor::full({1, 1, 3, 3}, 1.0);
    const Tensor c = conv2d(ones, ones, 0);
    CHECK(c.shape() == Shape{1, 1, 1, 1});
    CHECK(c.item() == 9.0);
}

TEST_CASE("first and second derivatives of polynomials") {
    PrecisionGuard f64(Precision::F64);
    {
        Graph g;
        const Tensor x = g.leaf(Tensor::scalar(3.0));
        CHECK(grad(mul(x, x), {x})[0].item() == 6.0);
    }
    {
        Graph g;
        const Tensor x = g.leaf(Tensor::scalar(2.0));
        const Tensor y = mul(mul(x, x), x);
        const Tensor dy = grad(y, {x}, true)[0];
        CHECK(dy.item() == doctest::Approx(12.0).epsilon(1e-12));
        CHECK(grad(dy, {x})[0].item() == doctest::Approx(12.0).epsilon(1e-12));
    }
    // Closed forms for p(x) = x^4 - 3x^2 + 5x at random points: p'' = 12x^2 - 6, p''' = 24x.
    Rng rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        const double x0 = rng.uniform(-3, 3);
        Graph g;
        const Tensor x = g.leaf(Tensor::scalar(x0));
        const Tensor x2 = mul(x, x);
        const Tensor p = add(sub(mul(x2, x2), scale(x2, 3.0)), scale(x, 5.0));
        const Tensor d1 = grad(p, {x}, true)[0];
        const Tensor d2 = grad(d1, {x}, true)[0];
        const Tensor d3 = grad(d2, {x})[0];
        CHECK(std::abs(d1.item() - (4 * x0 * x0 * x0 - 6 * x0 + 5)) < 1e-10);
        CHECK(std::abs(d2.item() - (12 * x0 * x0 - 6)) < 1e-10);
        CHECK(std::abs(d3.item() - 24 * x0) < 1e-10);
    }
}

TEST_CASE("softmax cross-entropy derivative at the uniform point") {
    PrecisionGuard f64(Precision::F64);
    Graph g;
    const Tensor w = g.leaf(Tensor::scalar(0.0));
    const Tensor logits = concat0({reshape(w, {1}), Tensor::zeros({1})});
    const std::vector<int> label{0};
    const Tensor loss = softmax_cross_entropy(reshape(logits, {1, 2}), label);
    CHECK(grad(loss, {w})[0].item() == doctest::Approx(-0.5).epsilon(1e-15));
}

TEST_CASE("finite_diff_check reference cases") {
    const Tensor x({3}, {1, 2, 3});
    CHECK(finite_diff_check([](const Tensor& t) { return sum(mul(t, t)); }, x, 1e-5) < 1e-8);
    CHECK(finite_diff_check([](const Tensor&) { return Tensor::scalar(4.0); }, x) == 0.0);
}

TEST_CASE("every primitive passes first- and second-order finite differences") {
    Rng rng(11);
    const auto A = random_tensor({3, 4}, rng), B = random_tensor({3, 4}, rng);

    SUBCASE("elementwise") {
        check_primitive([](auto& xs) { return add(xs[0], xs[1]); }, {A, B}, 1);
        check_primitive([](auto& xs) { return sub(xs[0], xs[1]); }, {A, B}, 2);
        check_primitive([](auto& xs) { return mul(xs[0], xs[1]); }, {A, B}, 3);
        check_primitive([](auto& xs) { return scale(xs[0], -2.5); }, {A}, 4);
        check_primitive([](auto& xs) { return shift(xs[0], 0.75); }, {A}, 5);
        check_primitive([](auto& xs) { return exp(xs[0]); }, {A}, 6);
        check_primitive([](auto& xs) { return pow(xs[0], -0.5); }, {random_tensor({5}, rng, 0.5, 2.0)}, 7);
        check_primitive([](auto& xs) { return pow(xs[0], 3.0); }, {A}, 8);
        // Keep inputs away from the kink.
        auto away = random_tensor({12}, rng, 0.1, 1.0);
        std::vector<double> v(away.values().begin(), away.values().end());
        for (std::size_t i = 0; i < v.size(); i += 2) v[i] = -v[i];
        check_primitive([](auto& xs) { return relu(xs[0]); }, {Tensor({12}, v)}, 9);
    }
    SUBCASE("shape and reductions") {
        check_primitive([](auto& xs) { return reshape(xs[0], {2, 6}); }, {A}, 10);
        check_primitive([](auto& xs) { return broadcast_to(xs[0], {3, 4}); }, {random_tensor({3, 1}, rng)}, 11);
        check_primitive([](auto& xs) { return sum_to(xs[0], {1, 4}); }, {A}, 12);
        check_primitive([](auto& xs) { return mean(xs[0]); }, {A}, 13);
        check_primitive([](auto& xs) { return transpose(xs[0]); }, {A}, 14);
        check_primitive([](auto& xs) { return matmul(xs[0], xs[1]); }, {A, random_tensor({4, 2}, rng)}, 15);
    }
    SUBCASE("convolution") {
        const auto x = random_tensor({2, 2, 5, 4}, rng), w = random_tensor({3, 2, 3, 3}, rng);
        check_primitive([](auto& xs) { return conv2d(xs[0], xs[1], 1); }, {x, w}, 16);
        check_primitive([](auto& xs) { return conv2d(xs[0], xs[1], 0); }, {x, w}, 17);
        check_primitive([](auto& xs) { return conv2d(xs[0], xs[1], 2); }, {x, w}, 18);
        check_primitive([](auto& xs) { return conv2d_weight_grad(xs[0], xs[1], 3, 3, 1); },
                        {x, random_tensor({2, 3, 5, 4}, rng)}, 19);
        check_primitive([](auto& xs) { return flip_transpose_kernel(xs[0]); }, {w}, 20);
    }
    SUBCASE("pooling, normalization, classification") {
        check_primitive([](auto& xs) { return avg_pool2(xs[0]); }, {random_tensor({2, 2, 5, 7}, rng)}, 21);
        check_primitive([](auto& xs) { return avg_unpool2(xs[0], 5, 7); }, {random_tensor({2, 2, 2, 3}, rng)}, 22);
        check_primitive([](auto& xs) { return instance_norm(xs[0]); }, {random_tensor({2, 3, 3, 4}, rng)}, 23);
        check_primitive([](auto& xs) { return log_softmax(xs[0]); }, {A}, 24);
        const std::vector<int> labels{2, 0, 3};
        check_primitive([labels](auto& xs) { return softmax_cross_entropy(xs[0], labels); }, {A}, 25);
    }
    SUBCASE("row selection") {
        check_primitive([](auto& xs) { return concat0({xs[0], xs[1]}); }, {A, random_tensor({2, 4}, rng)}, 26);
        check_primitive([](auto& xs) { return slice0(xs[0], 1, 3); }, {A}, 27);
        const std::vector<std::size_t> idx{2, 0, 2};
        check_primitive([idx](auto& xs) { return gather0(xs[0], idx); }, {A}, 28);
        check_primitive([idx](auto& xs) { return scatter_add0(xs[0], idx, 4); }, {A}, 29);
    }
    SUBCASE("resampling") {
        auto map = std::make_shared<ResampleMap>();
        map->batch = 2;
        map->in_h = 3;
        map->in_w = 3;
        map->out_h = 2;
        map->out_w = 2;
        map->taps.resize(8);
        for (std::size_t p = 0; p < 8; ++p)
            map->taps[p] = {{static_cast<std::uint32_t>(p % 9), 0.3}, {static_cast<std::uint32_t>((p * 5) % 9), 0.7}};
        std::shared_ptr<const ResampleMap> m = map;
        check_primitive([m](auto& xs) { return resample(xs[0], m); }, {random_tensor({2, 2, 3, 3}, rng)}, 30);
        check_primitive([m](auto& xs) { return resample_transpose(xs[0], m); }, {random_tensor({2, 2, 2, 2}, rng)}, 31);
    }
}

TEST_CASE("error paths") {
    CHECK_THROWS_AS(add(Tensor::zeros({2}), Tensor::zeros({3})), ShapeError);
    CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ShapeError);
    CHECK_THROWS_AS(exp(Tensor::scalar(1e6)), NumericError);
    try {
        exp(Tensor::scalar(1e6));
    } catch (const NumericError& e) {
        CHECK(e.op == "exp");
    }
    {
        // Overflow to infinity only in 32-bit mode.
        PrecisionGuard f32(Precision::F32);
        CHECK_THROWS_AS(scale(Tensor::scalar(1e38), 10.0), NumericError);
    }
    Graph g, other;
    const Tensor x = g.leaf(Tensor::scalar(1.0));
    const Tensor y = other.leaf(Tensor::scalar(2.0));
    CHECK_THROWS_AS(add(x, y), GraphError);
    const Tensor z = mul(x, x);
    CHECK_THROWS_AS(grad(z, {y}), GraphError);
    const Tensor unused = g.leaf(Tensor::scalar(5.0));
    CHECK_THROWS_AS(grad(z, {unused}), GraphError);
    CHECK_THROWS_AS(grad(add(z, unused), {Tensor::scalar(1.0)}), GraphError);
    const Tensor w = add(z, unused);
    grad(w, {x});
    CHECK(g.consumed());
    CHECK_THROWS_AS(grad(w, {x}), GraphError);
    CHECK_THROWS_AS(grad(Tensor::zeros({2}), {x}), GraphError);
}

TEST_CASE("forward replay is bit-identical") {
    Rng rng(3);
    const auto x = random_tensor({2, 1, 6, 6}, rng), w = random_tensor({2, 1, 3, 3}, rng);
    auto run = [&] { return log_softmax(reshape(avg_pool2(relu(instance_norm(conv2d(x, w, 1)))), {2, 18})); };
    const Tensor a = run(), b = run();
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("32-bit mode rounds every result to float") {
    PrecisionGuard f32(Precision::F32);
    const Tensor t = scale(Tensor::scalar(1.0), 1.0 / 3.0);
    CHECK(t.item() == static_cast<double>(1.0f / 3.0f));
}
