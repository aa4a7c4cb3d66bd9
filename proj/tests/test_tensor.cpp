#include <doctest.h>

#include <cmath>

#include "haarnet/morpho.hpp"
#include "haarnet/ops.hpp"
#include "haarnet/rng.hpp"
#include "haarnet/tensor.hpp"
#include "oracles.hpp"

using namespace haarnet;

TEST_SUITE("tensor") {

TEST_CASE("elementwise worked examples") {
    Tensor a = Tensor::scalar(2.0f);
    Tensor b = Tensor::scalar(3.0f);
    CHECK(mul(a, b).item() == 6.0f);

    CHECK(sigmoid(Tensor::scalar(0.0f)).item() == 0.5f);

    Tensor x = Tensor::from_vector({1, 1, 1, 2}, {1.0f, kNegInf});
    Tensor y = Tensor::from_vector({1, 1, 1, 2}, {0.0f, 4.0f});
    Tensor m = emax(x, y);
    CHECK(m.data()[0] == 1.0f);
    CHECK(m.data()[1] == 4.0f);
}

TEST_CASE("channel broadcast and its rejection") {
    Tensor full = Tensor::from_vector({2, 3, 2, 2}, std::vector<float>(24, 1.0f));
    Tensor per_channel = Tensor::from_vector({1, 3, 1, 1}, {1.0f, 2.0f, 3.0f});
    Tensor out = mul(full, per_channel);
    CHECK(out.at(0, 0, 0, 0) == 1.0f);
    CHECK(out.at(0, 1, 0, 0) == 2.0f);
    CHECK(out.at(1, 2, 1, 1) == 3.0f);

    Tensor per_sample = Tensor::from_vector({2, 3, 1, 1}, {1, 2, 3, 4, 5, 6});
    CHECK(add(full, per_sample).at(1, 0, 0, 0) == 5.0f);

    Tensor bad = Tensor::zeros({1, 2, 1, 1});
    CHECK_THROWS_AS(add(full, bad), ShapeError);
    CHECK_THROWS_AS(add(full, Tensor::zeros({2, 3, 2, 1})), ShapeError);
}

TEST_CASE("backward of sum fills ones") {
    Tensor x = Tensor::zeros({1, 1, 2, 2}, true);
    backward(sum(x));
    for (float g : x.grad()) CHECK(g == 1.0f);
}

TEST_CASE("backward of global max routes to the unique argmax") {
    Tensor x = Tensor::from_vector({1, 1, 1, 3}, {1.0f, 3.0f, 2.0f}, true);
    backward(reduce_max(x));
    CHECK(x.grad()[0] == 0.0f);
    CHECK(x.grad()[1] == 1.0f);
    CHECK(x.grad()[2] == 0.0f);
}

TEST_CASE("backward through a square") {
    Tensor x = Tensor::from_vector({1, 1, 1, 1}, {2.0f}, true);
    backward(sum(mul(x, x)));
    CHECK(x.grad()[0] == 4.0f);
}

TEST_CASE("fan-out accumulates gradients additively") {
    Tensor x = Tensor::from_vector({1, 1, 1, 2}, {5.0f, -1.0f}, true);
    backward(sum(add(x, x)));
    CHECK(x.grad()[0] == 2.0f);
    CHECK(x.grad()[1] == 2.0f);
}

TEST_CASE("backward contract errors") {
    Tensor x = Tensor::zeros({1, 1, 2, 2}, true);
    CHECK_THROWS_AS(backward(add(x, x)), ContractError);  // not scalar
    CHECK_THROWS_AS(backward(x), ContractError);          // leaf, empty graph

    Tensor loss = sum(x);
    backward(loss);
    CHECK_THROWS_AS(backward(loss), StateError);  // second pass, same recording

    // Reusing a consumed intermediate counts as a second backward too.
    Tensor y = Tensor::zeros({1, 1, 1, 1}, true);
    Tensor mid = add(y, y);
    backward(sum(mid));
    CHECK_THROWS_AS(backward(sum(mid)), StateError);
}

TEST_CASE("graph trace is topologically ordered") {
    Tensor x = Tensor::zeros({1, 1, 2, 2}, true);
    Tensor loss = sum(mul(add(x, x), x));
    Graph g = Graph::trace(loss);
    CHECK(g.size() == 3);
    for (const Graph::Node& node : g.nodes()) {
        for (uint64_t input : node.input_seqs) CHECK(input < node.seq);
    }
}

TEST_CASE("no-grad mode records nothing") {
    Tensor x = Tensor::zeros({1, 1, 2, 2}, true);
    NoGradGuard ng;
    Tensor out = add(x, x);
    CHECK_FALSE(out.requires_grad());
    CHECK(out.is_leaf());
}

TEST_CASE("finite differences: linear functional is exact") {
    Rng rng(7);
    Tensor x = oracle::uniform_tensor({1, 2, 3, 3}, rng, -2.0f, 2.0f);
    Tensor fd = finite_diff_grad([](const Tensor& t) { return sum_value(t); }, x, 1e-3);
    for (int64_t i = 0; i < fd.numel(); ++i) CHECK(std::abs(fd.data()[i] - 1.0f) <= 1e-6f);
}

TEST_CASE("finite differences: sum of squares") {
    Tensor x = Tensor::from_vector({1, 1, 1, 1}, {2.0f});
    auto f = [](const Tensor& t) {
        double acc = 0.0;
        for (int64_t i = 0; i < t.numel(); ++i) acc += static_cast<double>(t.data()[i]) * t.data()[i];
        return acc;
    };
    Tensor fd = finite_diff_grad(f, x, 1e-3);
    CHECK(std::abs(fd.data()[0] - 4.0f) <= 1e-5f);
    CHECK_THROWS_AS(finite_diff_grad(f, x, 0.0), ContractError);
}

TEST_CASE("finite differences agree with backward on a dilation loss") {
    for (uint64_t seed = 0; seed < 5; ++seed) {
        Rng rng(900 + seed);
        // Spaced values keep every window away from ties at +-eps.
        std::vector<float> vals(36);
        for (size_t i = 0; i < vals.size(); ++i) vals[i] = 0.1f * static_cast<float>(i);
        rng.shuffle(vals);
        for (float& v : vals) v += rng.uniform(0.0f, 0.01f);
        Tensor x = Tensor::from_vector({1, 1, 6, 6}, vals, true);
        StructuringElement se = StructuringElement::flat(2, 1);
        Tensor w = oracle::uniform_tensor({1, 1, 3, 3}, rng, 0.5f, 1.5f);

        backward(sum(mul(dilate2d(x, se, 2, 0), w)));
        Tensor fd = finite_diff_grad(
            [&](const Tensor& probe) {
                NoGradGuard ng;
                Tensor out = dilate2d(probe, se, 2, 0);
                double acc = 0.0;
                for (int64_t i = 0; i < out.numel(); ++i) {
                    acc += static_cast<double>(out.data()[i]) * w.data()[i];
                }
                return acc;
            },
            x, 1e-3);
        for (int64_t i = 0; i < x.numel(); ++i) {
            const double a = x.grad()[static_cast<size_t>(i)];
            const double n = fd.data()[i];
            CHECK(std::abs(a - n) <= 1e-3 * std::max({std::abs(a), std::abs(n), 1.0}));
        }
    }
}

TEST_CASE("max-plus neutrality of -inf padding") {
    Rng rng(11);
    Tensor f = oracle::uniform_tensor({1, 1, 4, 4}, rng, -1.0f, 1.0f);
    StructuringElement se = StructuringElement::flat(3, 1);
    // Stride-1 dilation with symmetric padding: fully interior outputs must
    // equal the unpadded ones; padded windows reduce over the in-bounds
    // subset as if the padding were absent.
    Tensor padded = dilate2d(f, se, 1, 1);
    Tensor unpadded = dilate2d(f, se, 1, 0);
    CHECK(padded.shape() == Shape{1, 1, 4, 4});
    CHECK(unpadded.shape() == Shape{1, 1, 2, 2});
    for (int64_t y = 0; y < 2; ++y) {
        for (int64_t x = 0; x < 2; ++x) {
            CHECK(padded.at(0, 0, y + 1, x + 1) == unpadded.at(0, 0, y, x));
        }
    }
    Tensor naive = oracle::naive_dilate(f, se.values(), 1, Pad2d::sym(1));
    CHECK(oracle::bit_equal(padded, naive));
}

TEST_CASE("grad access before backward is an error") {
    Tensor x = Tensor::zeros({1, 1, 1, 1}, true);
    CHECK_FALSE(x.has_grad());
    CHECK_THROWS_AS((void)x.grad(), StateError);
}

}  // TEST_SUITE
