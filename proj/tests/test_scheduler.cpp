#include <catch2/catch_amalgamated.hpp>

#include "helpers.hpp"
#include "mpq/config.hpp"
#include "mpq/scheduler.hpp"

using namespace mpq;
using namespace mpq::testing;

namespace {

// Tiny net whose layer-1 weights we can set directly.
Supernet probe_net(std::vector<int> bits = {2}) {
    Topology t;
    t.in_ch = 1;
    t.in_h = 2;
    t.in_w = 2;
    t.classes = 1;
    LayerConfig f0;
    f0.kind = LayerKind::Fc;
    f0.in_features = 4;
    f0.out_features = 1;
    f0.has_relu = false;
    t.layers = {f0};
    std::mt19937 rng(0);
    return Supernet(t, std::move(bits), rng);
}

void set_weights(Supernet& net, int layer, std::vector<float> w, float gamma) {
    auto& l = net.layers[layer];
    REQUIRE(l.weight->numel() == w.size());
    l.weight->v = std::move(w);
    for (auto& [b, q] : l.wq) q.scale->v[0] = gamma;
}

}  // namespace

TEST_CASE("criterion worked example") {
    // W = {0.24, 0.5, 0.9, -0.2}, gamma=1, b=2 only, eps=0.25:
    // distances to {-2,-1,0,1} are {0.24, 0.5, 0.1, 0.2}; threshold 0.375;
    // only 0.5 counts -> score = (1/2)*(1/4) = 0.125
    auto net = probe_net({2});
    set_weights(net, 0, {0.24f, 0.5f, 0.9f, -0.2f}, 1.f);
    auto rep = unstable_criterion(net, 0.25f, CriterionMode::BoundDistance);
    REQUIRE(rep.score.size() == 1);
    CHECK_THAT(rep.score[0], Catch::Matchers::WithinAbs(0.125, 1e-9));
}

TEST_CASE("criterion boundary cases") {
    auto net = probe_net({2, 3});
    SECTION("all weights on levels score zero") {
        set_weights(net, 0, {0.f, 1.f, -1.f, 0.f}, 1.f);
        auto rep = unstable_criterion(net, 0.25f, CriterionMode::BoundDistance);
        CHECK(rep.score[0] == 0.0);
    }
    SECTION("all weights on bounds count fully at every bit") {
        set_weights(net, 0, {0.5f, 0.5f, -0.5f, 0.5f}, 1.f);
        auto rep = unstable_criterion(net, 0.25f, CriterionMode::BoundDistance);
        // score = sum_b 2^(1-b) over {2,3}
        CHECK_THAT(rep.score[0], Catch::Matchers::WithinAbs(0.5 + 0.25, 1e-9));
    }
    SECTION("epsilon out of range") {
        CHECK_THROWS(unstable_criterion(net, 1.5f, CriterionMode::BoundDistance));
    }
}

TEST_CASE("criterion properties") {
    std::mt19937 rng(13);
    auto net = probe_net({2, 3, 4});
    set_weights(net, 0, random_vec(4, rng, -1.5f, 1.5f), 0.4f);
    SECTION("monotone in epsilon") {
        double prev = -1.0;
        for (float eps : {0.f, 0.1f, 0.25f, 0.5f, 0.75f, 1.f}) {
            auto rep = unstable_criterion(net, eps, CriterionMode::BoundDistance);
            CHECK(rep.score[0] >= prev);
            prev = rep.score[0];
        }
    }
    SECTION("scale invariance under joint (W, gamma) scaling") {
        auto base = unstable_criterion(net, 0.25f, CriterionMode::BoundDistance);
        for (float c : {2.f, 0.5f, 7.f}) {
            auto scaled = probe_net({2, 3, 4});
            std::vector<float> w = net.layers[0].weight->v;
            for (auto& x : w) x *= c;
            set_weights(scaled, 0, w, 0.4f * c);
            auto rep = unstable_criterion(scaled, 0.25f, CriterionMode::BoundDistance);
            CHECK_THAT(rep.score[0], Catch::Matchers::WithinAbs(base.score[0], 1e-9));
        }
    }
    SECTION("normalization bound") {
        for (int trial = 0; trial < 20; ++trial) {
            set_weights(net, 0, random_vec(4, rng, -3.f, 3.f), 0.3f);
            auto rep = unstable_criterion(net, 1.0f, CriterionMode::BoundDistance);
            CHECK(rep.score[0] <= 0.5 + 0.25 + 0.125 + 1e-12);
        }
    }
    SECTION("literal mode runs and is non-negative") {
        auto rep = unstable_criterion(net, 0.25f, CriterionMode::Literal);
        CHECK(rep.score[0] >= 0.0);
    }
}

TEST_CASE("topk selection") {
    CriterionReport rep;
    rep.layer_index = {0, 1, 2};
    SECTION("top-2 of distinct scores") {
        rep.score = {0.9, 0.1, 0.5};
        CHECK(topk_layers(rep, 2) == std::vector<int>{0, 2});
    }
    SECTION("k = 0 gives empty set") {
        rep.score = {0.9, 0.1, 0.5};
        CHECK(topk_layers(rep, 0).empty());
    }
    SECTION("ties break toward the lower layer index") {
        rep.score = {0.5, 0.5, 0.1};
        CHECK(topk_layers(rep, 1) == std::vector<int>{0});
    }
}

TEST_CASE("k schedule") {
    CHECK(k_schedule(0, 100, 4) == 4);
    CHECK(k_schedule(100, 100, 4) == 0);
    CHECK(k_schedule(50, 100, 4) == 2);
    CHECK_THROWS(k_schedule(0, 0, 4));
    SECTION("non-increasing in t") {
        int prev = 100;
        for (long t = 0; t <= 100; ++t) {
            int k = k_schedule(t, 100, 7);
            CHECK(k <= prev);
            prev = k;
        }
    }
}

TEST_CASE("apply_schedule") {
    std::mt19937 rng(0);
    auto net = Supernet(reference_cnn(), {2, 3, 4, 5, 6}, rng);
    ScheduleConfig sc;
    sc.k0 = 2;
    sc.total_steps = 100;
    sc.period = 10;
    sc.duration = 10;
    BitScheduler sched(sc);
    SECTION("off-boundary step leaves the mask unchanged") {
        sched.apply(net, 0);
        auto before = sched.mask.entries().size();
        sched.apply(net, 5);
        CHECK(sched.mask.entries().size() == before);
    }
    SECTION("freezes expire and the bit is sampled again") {
        sched.apply(net, 0);
        REQUIRE(!sched.mask.entries().empty());
        auto frozen = sched.mask.entries().front();
        std::map<int, int> counts;
        for (int i = 0; i < 10000; ++i)
            counts[net.sample_policy(sched.mask, rng).bits[frozen.layer].first]++;
        CHECK(counts[frozen.bit] == 0);
        sched.mask.purge(frozen.expiry);  // expiry reached
        counts.clear();
        for (int i = 0; i < 10000; ++i)
            counts[net.sample_policy(sched.mask, rng).bits[frozen.layer].first]++;
        CHECK(counts[frozen.bit] > 0);
    }
    SECTION("single-candidate layers are never frozen") {
        std::mt19937 rng2(0);
        auto tiny = Supernet(reference_cnn(), {4}, rng2);
        BitScheduler s2(sc);
        for (long t = 0; t <= 100; t += 10) s2.apply(tiny, t);
        CHECK(s2.mask.entries().empty());
    }
}

TEST_CASE("freeze mask guards the last remaining candidate") {
    std::mt19937 rng(0);
    auto net = Supernet(reference_cnn(), {2, 3}, rng);
    FreezeMask mask;
    CriterionReport rep;
    for (std::size_t l = 0; l < net.num_layers(); ++l)
        if (!net.layers[l].cfg.fixed8) {
            rep.layer_index.push_back(static_cast<int>(l));
            rep.score.push_back(1.0);
        }
    // repeated freezing can only take one of the two candidates
    for (int round = 0; round < 5; ++round)
        topk_to_freeze(net, rep, static_cast<int>(rep.score.size()), mask, 0, 1000);
    for (std::size_t l = 0; l < net.num_layers(); ++l) {
        if (net.layers[l].cfg.fixed8) continue;
        CHECK(net.layers[l].unfrozen(mask, static_cast<int>(l)).size() >= 1);
    }
}
