#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <map>

#include "probe/backbone.hpp"
#include "probe/datagen.hpp"
#include "probe/ops.hpp"
#include "testutil.hpp"

using namespace probe;
using namespace probe::backbone;
using num::Graph;
using num::Tensor;
using num::TensorPtr;
using testutil::random_tensor;

namespace {

Config tiny_config() {
    Config c;
    c.image_size = 16;
    c.patch_size = 8;  // N = 4 tokens
    c.embed_dim = 8;
    c.num_layers = 2;
    c.num_heads = 2;
    c.injection_layers = {0};
    return c;
}

Raster test_image(int size, std::uint64_t seed) {
    return datagen::generate_scene(datagen::DomainSpec::source_default(), size, 1, seed).image;
}

}  // namespace

TEST_CASE("patchify token counts") {
    Encoder desk(Config::desk_default(), 1);
    auto img = test_image(64, 3);
    auto tokens = desk.patchify(img);
    CHECK(tokens->dim(0) == 64);
    CHECK(tokens->dim(1) == 64);

    auto img2 = img;
    auto tokens2 = desk.patchify(img2);
    CHECK(tokens->values() == tokens2->values());  // identical image, identical sequence

    Raster wrong(32, 32);
    CHECK_THROWS_AS(desk.patchify(wrong), ConfigError);
}

TEST_CASE("full-scale profile instantiates with 196 tokens") {
    Config full = Config::vit_b16();
    full.validate();
    CHECK(full.num_tokens() == 196);
    Encoder enc(full, 1);
    Raster img(224, 224, 0.5);
    auto tokens = enc.patchify(img);
    CHECK(tokens->dim(0) == 196);
    CHECK(tokens->dim(1) == 768);
}

TEST_CASE("encoder layer preserves shape") {
    Encoder enc(tiny_config(), 5);
    Rng rng(9);
    auto x = random_tensor({6, 8}, rng);
    auto y = enc.layer_forward(0, x);
    CHECK(y->shape() == x->shape());
    Graph::active().clear();
}

TEST_CASE("single-token layer matches closed-form oracle") {
    Encoder enc(tiny_config(), 6);
    Rng rng(10);
    auto x = random_tensor({1, 8}, rng);
    auto y = enc.layer_forward(1, x);

    std::map<std::string, TensorPtr> params;
    for (auto& [name, t] : enc.named_params()) params[name] = t;
    const std::string pre = "layer1.";
    const std::size_t d = 8;

    auto ln = [&](const std::vector<double>& v, const TensorPtr& gain, const TensorPtr& bias) {
        double mu = 0.0;
        for (double q : v) mu += q;
        mu /= v.size();
        double var = 0.0;
        for (double q : v) var += (q - mu) * (q - mu);
        var /= v.size();
        std::vector<double> out(v.size());
        for (std::size_t i = 0; i < v.size(); ++i)
            out[i] = gain->data()[i] * (v[i] - mu) / std::sqrt(var + 1e-5) + bias->data()[i];
        return out;
    };
    auto affine = [](const std::vector<double>& v, const TensorPtr& w, const TensorPtr& b) {
        const std::size_t in = w->dim(0), out_d = w->dim(1);
        std::vector<double> out(out_d, 0.0);
        for (std::size_t j = 0; j < out_d; ++j) {
            for (std::size_t i = 0; i < in; ++i) out[j] += v[i] * w->data()[i * out_d + j];
            out[j] += b->data()[j];
        }
        return out;
    };
    auto gelu_v = [](std::vector<double> v) {
        for (double& q : v) q = 0.5 * q * (1.0 + std::erf(q / std::sqrt(2.0)));
        return v;
    };

    // with one token attention weights collapse to 1, so the context is V
    std::vector<double> h = ln(x->values(), params[pre + "ln1.gain"], params[pre + "ln1.bias"]);
    std::vector<double> v = affine(h, params[pre + "wv"], params[pre + "bv"]);
    std::vector<double> attn_out = affine(v, params[pre + "wo"], params[pre + "bo"]);
    std::vector<double> x1(d);
    for (std::size_t i = 0; i < d; ++i) x1[i] = x->data()[i] + attn_out[i];
    std::vector<double> m = ln(x1, params[pre + "ln2.gain"], params[pre + "ln2.bias"]);
    std::vector<double> ff =
        affine(gelu_v(affine(m, params[pre + "w1"], params[pre + "b1"])), params[pre + "w2"],
               params[pre + "b2"]);
    for (std::size_t i = 0; i < d; ++i) {
        CHECK(y->data()[i] == doctest::Approx(x1[i] + ff[i]).epsilon(1e-12));
    }
    Graph::active().clear();
}

TEST_CASE("forward without prompts is a plain ViT") {
    Encoder enc(tiny_config(), 2);
    auto img = test_image(16, 1);
    auto out = enc.forward(img, nullptr);
    CHECK(out.final_tokens->dim(0) == 4);
    CHECK(out.pooled->dim(0) == 8);
    for (int c : out.entry_token_counts) CHECK(c == 4);
}

TEST_CASE("injection shape law") {
    Encoder enc(tiny_config(), 2);  // injection at {0}, L=2, N=4
    auto img = test_image(16, 1);
    Rng rng(3);
    auto prompts = random_tensor({2, 8}, rng);
    auto out = enc.forward(img, prompts);
    REQUIRE(out.entry_token_counts.size() == 2);
    CHECK(out.entry_token_counts[0] == 6);  // K + N at the injection layer
    CHECK(out.entry_token_counts[1] == 6);  // prompt rows propagate
    CHECK(out.final_tokens->dim(0) == 4);   // stripped for downstream consumers

    Config two = tiny_config();
    two.num_layers = 4;
    two.injection_layers = {0, 2};
    Encoder enc2(two, 2);
    auto out2 = enc2.forward(img, prompts);
    CHECK(out2.entry_token_counts == std::vector<int>{6, 6, 6, 6});
    CHECK(out2.final_tokens->dim(0) == 4);

    auto bad = random_tensor({2, 5}, rng);
    CHECK_THROWS_AS(enc.forward(img, bad), DimensionError);
    Graph::active().clear();
}

TEST_CASE("gradient flows to prompts but not to backbone weights") {
    Encoder enc(tiny_config(), 7);
    auto img = test_image(16, 5);
    Rng rng(8);
    auto prompts = random_tensor({3, 8}, rng, 0.5, true);
    auto out = enc.forward(img, prompts);
    auto loss = num::sum(num::mul(out.pooled, out.pooled));
    num::backward(loss);

    REQUIRE(prompts->has_grad());
    double norm = 0.0;
    for (double g : prompts->grad()) norm += g * g;
    CHECK(norm > 0.0);

    for (auto& [name, p] : enc.named_params()) {
        CHECK_FALSE(p->requires_grad());
        CHECK_FALSE(p->has_grad());
    }
    Graph::active().clear();
}

TEST_CASE("backbone values untouched by forward and backward") {
    Encoder enc(tiny_config(), 11);
    std::vector<std::vector<double>> before;
    for (auto& [name, p] : enc.named_params()) before.push_back(p->values());

    auto img = test_image(16, 2);
    Rng rng(12);
    auto prompts = random_tensor({2, 8}, rng, 0.5, true);
    for (int i = 0; i < 3; ++i) {
        auto out = enc.forward(img, prompts);
        num::backward(num::sum(out.pooled));
        Graph::active().clear();
    }
    std::size_t i = 0;
    for (auto& [name, p] : enc.named_params()) CHECK(p->values() == before[i++]);
}

TEST_CASE("permuting prompt rows leaves patch outputs unchanged") {
    Encoder enc(tiny_config(), 13);
    auto img = test_image(16, 9);
    Rng rng(14);
    auto prompts = random_tensor({3, 8}, rng, 0.8);
    auto permuted = Tensor::make({3, 8}, [&] {
        std::vector<double> v(24);
        const int order[3] = {2, 0, 1};
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 8; ++c) v[r * 8 + c] = prompts->data()[order[r] * 8 + c];
        return v;
    }());
    auto a = enc.forward(img, prompts);
    auto b = enc.forward(img, permuted);
    for (std::size_t i = 0; i < a.final_tokens->numel(); ++i)
        CHECK(std::fabs(a.final_tokens->data()[i] - b.final_tokens->data()[i]) < 1e-10);
}

TEST_CASE("same seed gives identical encoders") {
    Encoder a(Config::desk_default(), 77);
    Encoder b(Config::desk_default(), 77);
    auto pa = a.named_params();
    auto pb = b.named_params();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
        CHECK(pa[i].first == pb[i].first);
        CHECK(pa[i].second->values() == pb[i].second->values());
    }
    auto img = test_image(64, 21);
    auto oa = a.forward(img, nullptr);
    auto ob = b.forward(img, nullptr);
    CHECK(oa.final_tokens->values() == ob.final_tokens->values());
}

TEST_CASE("config validation") {
    Config c = Config::desk_default();
    c.patch_size = 7;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = Config::desk_default();
    c.num_heads = 5;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = Config::desk_default();
    c.injection_layers = {9};
    CHECK_THROWS_AS(c.validate(), ConfigError);
}
