#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>
#include <random>

#include "fieldseg/autograd.hpp"

using namespace fieldseg::ag;

namespace {

Tensor random_tensor(std::vector<int64_t> shape, std::mt19937& rng, float scale = 1.0f) {
    Tensor t(std::move(shape));
    fill_normal(t, rng, 0.0f, scale);
    return t;
}

// central-difference check of d(fn)/d(leaf) for every element of every leaf
void check_gradients(const std::function<Var(const std::vector<Var>&)>& fn,
                     std::vector<Var> leaves, float h = 1e-2f, float tol = 2e-2f) {
    for (auto& leaf : leaves) leaf->zero_grad();
    Var loss = fn(leaves);
    REQUIRE(loss->value.numel() == 1);
    backward(loss);
    for (auto& leaf : leaves) {
        REQUIRE(leaf->has_grad());
        for (int64_t i = 0; i < leaf->value.numel(); ++i) {
            const float orig = leaf->value[i];
            leaf->value[i] = orig + h;
            float up = fn(leaves)->value[0];
            leaf->value[i] = orig - h;
            float dn = fn(leaves)->value[0];
            leaf->value[i] = orig;
            float expected = (up - dn) / (2.0f * h);
            float got = leaf->grad[i];
            CHECK(std::abs(got - expected) <=
                  tol * std::max({1.0f, std::abs(got), std::abs(expected)}));
        }
    }
}

}  // namespace

TEST_CASE("matmul and linear gradients") {
    std::mt19937 rng(7);
    auto a = make_leaf(random_tensor({3, 4}, rng), true);
    auto b = make_leaf(random_tensor({4, 2}, rng), true);
    check_gradients([](const std::vector<Var>& v) { return sum_all(matmul(v[0], v[1])); },
                    {a, b});

    auto x = make_leaf(random_tensor({2, 5}, rng), true);
    auto w = make_leaf(random_tensor({3, 5}, rng), true);
    auto bias = make_leaf(random_tensor({3}, rng), true);
    check_gradients(
        [](const std::vector<Var>& v) {
            return mean_all(hadamard(linear(v[0], v[1], v[2]), linear(v[0], v[1], v[2])));
        },
        {x, w, bias});
}

TEST_CASE("activation gradients") {
    std::mt19937 rng(11);
    auto x = make_leaf(random_tensor({4, 3}, rng), true);
    check_gradients([](const std::vector<Var>& v) { return sum_all(gelu(v[0])); }, {x});
    check_gradients([](const std::vector<Var>& v) { return sum_all(sigmoid(v[0])); }, {x});
    check_gradients(
        [](const std::vector<Var>& v) { return sum_all(hadamard(relu(v[0]), relu(v[0]))); }, {x});
}

TEST_CASE("softmax and layer_norm gradients") {
    std::mt19937 rng(13);
    auto x = make_leaf(random_tensor({3, 5}, rng), true);
    auto g = make_leaf(random_tensor({5}, rng, 0.5f), true);
    auto b = make_leaf(random_tensor({5}, rng, 0.5f), true);
    Tensor weights = random_tensor({3, 5}, rng);
    check_gradients(
        [&weights](const std::vector<Var>& v) {
            return sum_all(hadamard(softmax_rows(v[0]), constant(weights)));
        },
        {x});
    check_gradients(
        [&weights](const std::vector<Var>& v) {
            return sum_all(hadamard(layer_norm(v[0], v[1], v[2]), constant(weights)));
        },
        {x, g, b}, 1e-2f, 4e-2f);
}

TEST_CASE("shape op gradients") {
    std::mt19937 rng(17);
    auto x = make_leaf(random_tensor({4, 6}, rng), true);
    check_gradients(
        [](const std::vector<Var>& v) {
            Var s = slice_cols(v[0], 1, 4);
            Var r = slice_rows(v[0], 0, 2);
            return add(sum_all(hadamard(s, s)), sum_all(transpose(r)));
        },
        {x});

    auto y = make_leaf(random_tensor({2, 3}, rng), true);
    auto z = make_leaf(random_tensor({2, 3}, rng), true);
    check_gradients(
        [](const std::vector<Var>& v) {
            Var cat = concat_rows({v[0], v[1]});
            Var cc = concat_cols({v[0], v[1]});
            return add(sum_all(hadamard(cat, cat)), mean_all(hadamard(cc, cc)));
        },
        {y, z});
}

TEST_CASE("gather scatter-add gradient") {
    std::mt19937 rng(19);
    auto x = make_leaf(random_tensor({6}, rng), true);
    auto idx = std::make_shared<std::vector<int64_t>>(std::vector<int64_t>{0, 2, 2, -1, 5});
    check_gradients(
        [&idx](const std::vector<Var>& v) {
            Var g = gather(v[0], idx, {5});
            return sum_all(hadamard(g, g));
        },
        {x});
}

TEST_CASE("upsample_bilinear gradient and values") {
    std::mt19937 rng(23);
    auto x = make_leaf(random_tensor({3, 3}, rng), true);
    Tensor weights = random_tensor({6, 6}, rng);
    check_gradients(
        [&weights](const std::vector<Var>& v) {
            return sum_all(hadamard(upsample_bilinear(v[0], 6, 6), constant(weights)));
        },
        {x});

    // constant map stays constant under resize
    auto c = constant(Tensor::full({2, 2}, 3.5f));
    Var up = upsample_bilinear(c, 8, 8);
    for (int64_t i = 0; i < up->value.numel(); ++i) CHECK(up->value[i] == doctest::Approx(3.5f));
}

TEST_CASE("focal and dice loss gradients match finite differences") {
    std::mt19937 rng(29);
    Tensor target({7});
    for (int i = 0; i < 7; ++i) target[i] = (i % 2 == 0) ? 1.0f : 0.0f;
    auto logits = make_leaf(random_tensor({7}, rng, 2.0f), true);
    check_gradients(
        [&target](const std::vector<Var>& v) {
            return focal_loss_with_logits(v[0], target, 0.25f, 2.0f);
        },
        {logits}, 1e-2f, 3e-2f);
    check_gradients(
        [&target](const std::vector<Var>& v) { return dice_loss_with_logits(v[0], target); },
        {logits}, 1e-2f, 3e-2f);
}

TEST_CASE("no-grad mode records no graph") {
    std::mt19937 rng(31);
    auto x = make_leaf(random_tensor({2, 2}, rng), true);
    {
        NoGradGuard ng;
        Var y = matmul(x, x);
        CHECK_FALSE(y->requires_grad);
        CHECK(y->parents.empty());
    }
    Var y = matmul(x, x);
    CHECK(y->requires_grad);
    CHECK(y->parents.size() == 2);
}

TEST_CASE("gradient accumulates over shared subgraphs") {
    auto x = make_leaf(Tensor::scalar(3.0f), true);
    Var y = hadamard(x, x);       // x^2
    Var z = add(y, y);            // 2 x^2
    backward(z);
    CHECK(x->grad[0] == doctest::Approx(12.0f));  // d/dx 2x^2 = 4x
}

TEST_CASE("frozen leaves accumulate nothing") {
    auto x = make_leaf(Tensor::scalar(2.0f), true);
    auto w = make_leaf(Tensor::scalar(5.0f), false);
    Var z = hadamard(x, w);
    backward(z);
    CHECK(x->grad[0] == doctest::Approx(5.0f));
    CHECK_FALSE(w->has_grad());
}

TEST_CASE("backward rejects non-scalar roots") {
    auto x = make_leaf(Tensor({2, 2}), true);
    CHECK_THROWS_AS(backward(add(x, x)), std::invalid_argument);
}
