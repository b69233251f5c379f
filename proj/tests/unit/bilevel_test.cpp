#include "gradcheck.hpp"
#include "oracles.hpp"

#include "rdarts/bilevel.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

using namespace rdarts;

TEST(Schedule, CosineEndpointsAndMidpoint)
{
    EXPECT_DOUBLE_EQ(cosine_lr(0, 10, 0.1, 0.001), 0.1);
    EXPECT_NEAR(cosine_lr(10, 10, 0.1, 0.001), 0.001, 1e-15);
    EXPECT_NEAR(cosine_lr(5, 10, 0.1, 0.001), 0.0505, 1e-15);
    EXPECT_THROW(cosine_lr(11, 10, 0.1, 0.0), std::out_of_range);
    for (std::size_t s = 1; s <= 10; ++s) EXPECT_LE(cosine_lr(s, 10, 0.1, 0.0), cosine_lr(s - 1, 10, 0.1, 0.0));
}

TEST(Optimizers, SgdMomentumAndDecay)
{
    ParamStore store;
    Parameter& p = store.add("p", Partition::theta, Tensor::vector({1.0}));
    std::vector<Parameter*> ps{&p};
    SgdState st;
    sgd_step(ps, std::vector<Tensor>{Tensor::vector({2.0})}, st, 0.1, 0.9, 0.5);
    // v = 2 + 0.5 = 2.5; p = 1 - 0.25
    EXPECT_DOUBLE_EQ(p.value[0], 0.75);
    sgd_step(ps, std::vector<Tensor>{Tensor::vector({2.0})}, st, 0.1, 0.9, 0.5);
    // v = 0.9 * 2.5 + 2 + 0.375 = 4.625
    EXPECT_DOUBLE_EQ(p.value[0], 0.75 - 0.4625);
    ASSERT_NE(st.buffer(p), nullptr);
    EXPECT_THROW(sgd_step(ps, std::vector<Tensor>{Tensor::vector({1.0, 2.0})}, st, 0.1, 0.9, 0.0), ShapeError);
}

TEST(Optimizers, AdamFirstStepMovesByLr)
{
    ParamStore store;
    Parameter& p = store.add("p", Partition::alpha, Tensor::vector({0.0, 0.0}));
    std::vector<Parameter*> ps{&p};
    AdamState st;
    AdamConfig cfg;
    cfg.weight_decay = 0.0;
    cfg.lr = 0.01;
    adam_step(ps, std::vector<Tensor>{Tensor::vector({3.0, -0.5})}, st, cfg);
    EXPECT_NEAR(p.value[0], -0.01, 1e-9);
    EXPECT_NEAR(p.value[1], 0.01, 1e-9);
}

TEST(Hypergradient, BilinearClosedForm)
{
    for (std::uint64_t s = 0; s < 5; ++s) {
        EXPECT_LT(rdarts::testing::bilinear_hypergradient_error(0.01, false, s), 1e-6);
        EXPECT_LT(rdarts::testing::bilinear_hypergradient_error(0.1, false, s), 1e-6);
        EXPECT_LT(rdarts::testing::bilinear_hypergradient_error(0.1, true, s), 1e-6);
    }
}

TEST(Hypergradient, EtaZeroIsFirstOrder)
{
    EXPECT_TRUE(rdarts::testing::eta_zero_matches_first_order(0));
    EXPECT_TRUE(rdarts::testing::eta_zero_matches_first_order(7));
}

TEST(Hypergradient, UnrolledSupernet)
{
    std::size_t count = 0;
    EXPECT_LT(rdarts::testing::unrolled_supernet_error(0.1, 0, &count), 1e-3);
    EXPECT_LT(count, 200u);
}

TEST(Hypergradient, WeightsRestoredExactly)
{
    auto net = Network::supernet(rdarts::testing::tiny_supernet_config(2));
    auto weights = weight_params(net->params());
    const auto before = snapshot(weights);
    Batch b;
    b.inputs = rdarts::testing::random_tensor({2, 1, 4, 4}, 5);
    b.onehot = ops::one_hot(std::vector<int>{0, 1}, 2);
    SecondOrderOptions opt;
    opt.eta = 0.5;
    arch_grad_second_order(*net, b, b, LossOptions{}, opt);
    const auto after = snapshot(weights);
    EXPECT_EQ(before, after);
}

TEST(Partitions, WeightAndArchSplit)
{
    auto net = Network::supernet(rdarts::testing::tiny_supernet_config(0));
    const auto w = weight_params(net->params());
    const auto a = arch_params(net->params());
    EXPECT_EQ(a.size(), 2u);
    EXPECT_EQ(w.size() + a.size(), net->params().size());
    for (auto* p : w) EXPECT_NE(p->partition, Partition::alpha);
}
