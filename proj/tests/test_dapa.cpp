#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "probe/dapa.hpp"
#include "probe/ops.hpp"
#include "testutil.hpp"

using namespace probe;
using namespace probe::dapa;
using num::Graph;
using num::Tensor;
using num::TensorPtr;
using testutil::random_tensor;

namespace {

Matrix to_matrix(const TensorPtr& t) {
    Matrix m(t->dim(0), t->dim(1));
    std::copy(t->data(), t->data() + t->numel(), m.a.begin());
    return m;
}

}  // namespace

TEST_CASE("identical batches give zero loss") {
    Rng rng(1);
    auto feats = random_tensor({5, 8}, rng);
    auto loss = dapa_loss(feats, feats, AlignmentHead::identity());
    CHECK(loss->item() == 0.0);
    Graph::active().clear();
}

TEST_CASE("singleton batches with identity head") {
    auto hs = Tensor::make({1, 2}, {1.0, 0.0});
    auto ht = Tensor::make({1, 2}, {0.0, 1.0});
    auto loss = dapa_loss(hs, ht, AlignmentHead::identity());
    CHECK(loss->item() == doctest::Approx(2.0));
    Graph::active().clear();
}

TEST_CASE("mean-difference form equals kernel double-sum oracle") {
    Rng rng(2);
    AlignmentHead id = AlignmentHead::identity();
    for (int t = 0; t < 50; ++t) {
        const std::size_t bs = 1 + rng.uniform_int(16);
        const std::size_t bt = 1 + rng.uniform_int(16);
        const std::size_t d = 2 + rng.uniform_int(63);
        auto xs = random_tensor({bs, d}, rng, 1.5);
        auto ys = random_tensor({bt, d}, rng, 1.5);
        const double lhs = dapa_loss(xs, ys, id)->item();
        const double rhs = mmd_kernel_oracle(to_matrix(xs), to_matrix(ys), "linear");
        CHECK(std::fabs(lhs - rhs) < 1e-10);
        Graph::active().clear();
    }
}

TEST_CASE("kernel oracle basics") {
    Rng rng(3);
    auto xs = to_matrix(random_tensor({6, 4}, rng));
    CHECK(std::fabs(mmd_kernel_oracle(xs, xs, "linear")) < 1e-12);

    Matrix a(1, 3), b(1, 3);
    a.at(0, 0) = 1.0; a.at(0, 1) = -2.0; a.at(0, 2) = 0.5;
    b.at(0, 0) = 0.0; b.at(0, 1) = 1.0;  b.at(0, 2) = 2.0;
    const double want = squared_distance(a.row(0), b.row(0), 3);
    CHECK(mmd_kernel_oracle(a, b, "linear") == doctest::Approx(want).epsilon(1e-12));

    CHECK_THROWS_AS(mmd_kernel_oracle(a, b, "rbf"), ConfigError);
}

TEST_CASE("identical translation of both domains cancels") {
    Rng rng(4);
    auto xs = random_tensor({6, 5}, rng);
    auto ys = random_tensor({9, 5}, rng);
    auto shift = random_tensor({5}, rng, 3.0);
    AlignmentHead id = AlignmentHead::identity();
    const double base = dapa_loss(xs, ys, id)->item();
    const double moved = dapa_loss(num::add(xs, shift), num::add(ys, shift), id)->item();
    CHECK(moved == doctest::Approx(base).epsilon(1e-10));
    Graph::active().clear();
}

TEST_CASE("loss is nonnegative and zero iff projected means coincide") {
    Rng rng(5);
    AlignmentHead head = AlignmentHead::init(6, DapaConfig{}, 11);
    for (int t = 0; t < 10; ++t) {
        auto xs = random_tensor({4, 6}, rng);
        auto ys = random_tensor({7, 6}, rng);
        CHECK(dapa_loss(xs, ys, head)->item() >= 0.0);
        Graph::active().clear();
    }
    // batches whose projected means coincide: same batch content
    auto xs = random_tensor({4, 6}, rng);
    CHECK(dapa_loss(xs, xs, head)->item() == 0.0);
    Graph::active().clear();
}

TEST_CASE("empty batch is a contract error") {
    Rng rng(6);
    auto xs = random_tensor({3, 4}, rng);
    auto empty = Tensor::zeros({0, 4});
    CHECK_THROWS_AS(dapa_loss(xs, empty, AlignmentHead::identity()), ContractError);
}

TEST_CASE("gradient w.r.t. f_p parameters matches finite differences") {
    Rng rng(7);
    AlignmentHead head = AlignmentHead::init(6, DapaConfig{}, 3);
    auto xs = random_tensor({3, 6}, rng);
    auto ys = random_tensor({4, 6}, rng);
    auto loss_fn = [&]() { return dapa_loss(xs, ys, head); };
    auto failures = testutil::check_gradients(loss_fn, head.named_params("f_p"));
    CHECK(failures.empty());
}

TEST_CASE("gradient flows through both batches") {
    Rng rng(8);
    auto xs = random_tensor({3, 6}, rng, 1.0, true);
    auto ys = random_tensor({4, 6}, rng, 1.0, true);
    AlignmentHead head = AlignmentHead::init(6, DapaConfig{}, 4);
    auto loss_fn = [&]() { return dapa_loss(xs, ys, head); };
    auto failures = testutil::check_gradients(loss_fn, {{"xs", xs}, {"ys", ys}});
    CHECK(failures.empty());
}
