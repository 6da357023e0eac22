#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "gradcheck.hpp"
#include "ilora/errors.hpp"
#include "ilora/model.hpp"

#include <cmath>
#include <random>

using namespace ilora;
using ilora::testing::random_tensor;

namespace {

ModelConfig toy() { return ModelConfig{}; }

std::vector<int> random_ids(std::size_t n, std::uint64_t seed, int vocab = 64) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> d(0, vocab - 1);
    std::vector<int> ids(n);
    for (auto& t : ids) t = d(rng);
    return ids;
}

// Adapter set with non-zero B so deltas are actually exercised.
AdapterSet randomized(const AdapterSpec& spec, const ModelConfig& cfg, std::uint64_t seed) {
    AdapterSet set = AdapterSet::init(spec, cfg, seed);
    std::mt19937_64 rng(seed + 1);
    std::normal_distribution<double> d(0.0, 0.5);
    for (auto& nt : set.named_parameters()) {
        if (nt.name.find(".B") == std::string::npos) continue;
        for (auto& v : nt.tensor.mutable_data()) v = d(rng);
    }
    return set;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

std::vector<PatchCoord> random_patches(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> d(0, 5);
    std::vector<PatchCoord> out(n);
    for (auto& p : out) p = {d(rng), d(rng)};
    return out;
}

std::vector<double> row(const Tensor& t, std::size_t i) {
    auto d = t.data().subspan(i * t.cols(), t.cols());
    return {d.begin(), d.end()};
}

} // namespace

TEST_CASE("kv_group_map") {
    ModelConfig c = toy();
    for (std::size_t h = 4; h < 8; ++h) CHECK(kv_group_map(h, c) == 1);
    CHECK_THROWS_AS(kv_group_map(8, c), ContractError);

    ModelConfig big;
    big.d_head = 128;
    big.n_q_heads = 28;
    big.n_kv_heads = 4;
    big.group = 7;
    big.d_hidden = 3584;
    CHECK(kv_group_map(13, big) == 1);

    ModelConfig mha = toy();
    mha.n_kv_heads = 8;
    mha.group = 1;
    for (std::size_t h = 0; h < 8; ++h) CHECK(kv_group_map(h, mha) == h);
    CHECK(query_heads_of(1, c) == std::vector<std::size_t>{4, 5, 6, 7});
}

TEST_CASE("config validation") {
    ModelConfig c = toy();
    c.n_q_heads = 6;
    CHECK_THROWS_AS(c.validate(), ContractError);
    CHECK_THROWS_AS(Model(c, 1), ContractError);
}

TEST_CASE("single-token attention returns W_O applied to the shared values") {
    const Model m(toy(), 3);
    const Tensor h = random_tensor({1, 64}, 4);
    const Tensor y = m.attention_forward(0, h, TokenLayout::text_only(1));
    const Tensor v = matmul(h, m.layer(0).wv);
    std::vector<Tensor> heads;
    for (std::size_t q = 0; q < 8; ++q) heads.push_back(slice_cols(v, (q / 4) * 8, (q / 4 + 1) * 8));
    const Tensor expect = matmul(concat_cols(heads), m.layer(0).wo);
    CHECK(max_abs_diff(y.data(), expect.data()) < 1e-12);
}

TEST_CASE("uniform keys give uniform causal attention") {
    Model m(toy(), 3);
    for (auto& v : m.layer(0).wk.mutable_data()) v = 0.0;
    AttentionRecord rec;
    ForwardOptions opts;
    opts.record = &rec;
    m.attention_forward(0, random_tensor({5, 64}, 2), TokenLayout::text_only(5), opts);
    for (const auto& p : rec.probs[0])
        for (std::size_t i = 0; i < 5; ++i)
            for (std::size_t j = 0; j < 5; ++j)
                CHECK(p.at(i, j) == doctest::Approx(j <= i ? 1.0 / (i + 1) : 0.0).epsilon(1e-14));
}

TEST_CASE("layout length mismatch is a contract error") {
    const Model m(toy(), 3);
    CHECK_THROWS_AS(m.attention_forward(0, random_tensor({4, 64}, 1), TokenLayout::text_only(5)), ContractError);
    const auto ids = random_ids(4, 1);
    CHECK_THROWS_AS(m.forward(ids, TokenLayout::text_only(3)), ContractError);
}

TEST_CASE("causality: perturbing token j only changes positions >= j") {
    const Model m(toy(), 5);
    auto ids = random_ids(8, 2);
    const auto layout = TokenLayout::text_only(8);
    const Tensor a = m.forward(ids, layout);
    ids[4] = (ids[4] + 1) % 64;
    const Tensor b = m.forward(ids, layout);
    for (std::size_t i = 0; i < 4; ++i) CHECK(row(a, i) == row(b, i));
    CHECK(max_abs_diff(row(a, 4), row(b, 4)) > 1e-6);
}

TEST_CASE("cached decoding matches the full forward") {
    const ModelConfig cfg = toy();
    const Model m(cfg, 7);
    const auto ids = random_ids(12, 3);
    const auto layout = TokenLayout::with_markers(12, 2, 9);
    const auto patches = random_patches(6, 4);

    auto check = [&](const AdapterSet* adapters) {
        ForwardOptions opts;
        opts.adapters = adapters;
        opts.patches = patches;
        const Tensor full = m.forward(ids, layout, opts);
        auto state = make_decode_state(m);
        double worst = 0;
        for (std::size_t t = 0; t < ids.size(); ++t) {
            const Tensor step = decode_step(m, ids[t], state, layout, opts);
            worst = std::max(worst, max_abs_diff(step.data(), row(full, t)));
        }
        CHECK(worst <= 1e-10);
    };
    SUBCASE("base model") { check(nullptr); }
    SUBCASE("image lora V") {
        const auto set = randomized(AdapterSpec::image_lora({{0}, {1}, {0, 1}, {}}), cfg, 11);
        check(&set);
    }
    SUBCASE("image lora V+K") {
        auto spec = AdapterSpec::image_lora({{0, 1}, {}, {1}, {0}});
        spec.paths = {Projection::V, Projection::K};
        const auto set = randomized(spec, cfg, 12);
        check(&set);
    }
    SUBCASE("std lora QKVO") {
        const auto set = randomized(
            AdapterSpec::std_lora({Projection::Q, Projection::K, Projection::V, Projection::O}), cfg, 13);
        check(&set);
    }
}

TEST_CASE("first decode step equals full forward at T=1") {
    const Model m(toy(), 7);
    const std::vector<int> ids{5};
    const Tensor full = m.forward(ids, TokenLayout::text_only(1));
    auto state = make_decode_state(m);
    const Tensor step = decode_step(m, 5, state, TokenLayout::text_only(1));
    CHECK(max_abs_diff(full.data(), step.data()) <= 1e-12);
}

TEST_CASE("greedy decoding through the cache matches full-forward decoding") {
    const ModelConfig cfg = toy();
    const Model m(cfg, 9);
    const auto prompt = random_ids(10, 4);
    const auto layout = TokenLayout::with_markers(10, 1, 7);
    const auto set = randomized(AdapterSpec::image_lora({{0}, {1}, {0}, {1}}), cfg, 5);
    const auto patches = random_patches(5, 6);
    ForwardOptions opts;
    opts.patches = patches;
    CHECK(greedy_decode(m, prompt, layout, 5, -1, opts) == greedy_decode_full(m, prompt, layout, 5, -1, opts));
    opts.adapters = &set;
    CHECK(greedy_decode(m, prompt, layout, 5, -1, opts) == greedy_decode_full(m, prompt, layout, 5, -1, opts));
}

TEST_CASE("fresh adapters decode bitwise like the base model") {
    const ModelConfig cfg = toy();
    const Model m(cfg, 9);
    const auto prompt = random_ids(10, 4);
    const auto layout = TokenLayout::with_markers(10, 1, 7);
    const auto set = AdapterSet::init(AdapterSpec::image_lora({{0}, {1}, {0}, {1}}), cfg, 5);
    ForwardOptions adapted;
    adapted.adapters = &set;
    auto s0 = make_decode_state(m), s1 = make_decode_state(m);
    for (int t : prompt) {
        const Tensor a = decode_step(m, t, s0, layout);
        const Tensor b = decode_step(m, t, s1, layout, adapted);
        CHECK(row(a, 0) == row(b, 0));
    }
}

TEST_CASE("decoding past max_seq is a capacity error") {
    ModelConfig cfg = toy();
    cfg.max_seq = 3;
    const Model m(cfg, 1);
    auto state = make_decode_state(m);
    for (int i = 0; i < 3; ++i) decode_step(m, i, state, TokenLayout::text_only(3));
    CHECK_THROWS_AS(decode_step(m, 1, state, TokenLayout::text_only(3)), CapacityError);
    const auto ids = random_ids(4, 1);
    CHECK_THROWS_AS(m.forward(ids, TokenLayout::text_only(4)), CapacityError);
}

TEST_CASE("patch code is the scaled sum of row and column codes") {
    const Model m(toy(), 2);
    const PatchCode& code = m.patch_code();
    const std::vector<PatchCoord> patches{{0, 0}, {3, 5}, {31, 1}};
    const Tensor g = code.gather(patches);
    for (std::size_t i = 0; i < patches.size(); ++i)
        for (std::size_t j = 0; j < 64; ++j)
            CHECK(g.at(i, j) == doctest::Approx((code.rows.at(patches[i].row, j) + code.cols.at(patches[i].col, j)) /
                                                std::sqrt(2.0))
                                    .epsilon(1e-15));
    const std::vector<PatchCoord> outside{{32, 0}};
    CHECK_THROWS_AS(code.gather(outside), CapacityError);
}

TEST_CASE("patch codes land on the visual rows only") {
    const Model m(toy(), 2);
    const auto ids = random_ids(8, 1);
    const auto layout = TokenLayout::with_markers(8, 1, 6);
    const auto patches = random_patches(4, 2);
    const Tensor plain = m.embed(ids, layout);
    const Tensor coded = m.embed(ids, layout, patches);
    const Tensor g = m.patch_code().gather(patches);
    for (std::size_t i = 0; i < 8; ++i) {
        const bool visual = layout.is_visual(i);
        for (std::size_t j = 0; j < 64; ++j)
            CHECK(coded.at(i, j) == plain.at(i, j) + (visual ? g.at(i - 2, j) : 0.0));
    }
    const auto wrong = random_patches(3, 2);
    CHECK_THROWS_AS(m.embed(ids, layout, wrong), ContractError);

    // another code stands in for another visual domain
    const PatchCode other = PatchCode::random(32, 64, 99);
    CHECK(max_abs_diff(m.embed(ids, layout, patches, &other).data(), coded.data()) > 0.1);
}

TEST_CASE("set_trainable leaves the patch code frozen") {
    Model m(toy(), 2);
    m.set_trainable(true);
    for (const auto& nt : m.named_weights())
        CHECK(nt.tensor.requires_grad() == (nt.name != "patch_rows" && nt.name != "patch_cols"));
    m.set_trainable(false);
    for (const auto& nt : m.named_weights()) CHECK_FALSE(nt.tensor.requires_grad());
}

TEST_CASE("pure-text input ignores image adapters bitwise") {
    const ModelConfig cfg = toy();
    const Model m(cfg, 2);
    const auto set = randomized(AdapterSpec::image_lora({{0, 1}, {0, 1}, {0, 1}, {0, 1}}), cfg, 3);
    ForwardOptions opts;
    opts.adapters = &set;
    const auto ids = random_ids(9, 6);
    const auto layout = TokenLayout::text_only(9);
    const Tensor a = m.forward(ids, layout);
    const Tensor b = m.forward(ids, layout, opts);
    CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
}

TEST_CASE("positions before the visual span are untouched by image adapters") {
    const ModelConfig cfg = toy();
    const Model m(cfg, 2);
    const auto set = randomized(AdapterSpec::image_lora({{0, 1}, {1}, {0}, {0, 1}}), cfg, 3);
    ForwardOptions opts;
    opts.adapters = &set;
    const auto ids = random_ids(12, 6);
    const auto layout = TokenLayout::with_markers(12, 3, 8);
    const Tensor a = m.forward(ids, layout);
    const Tensor b = m.forward(ids, layout, opts);
    for (std::size_t i = 0; i <= 3; ++i) CHECK(row(a, i) == row(b, i));
    CHECK(max_abs_diff(row(a, 11), row(b, 11)) > 1e-8);
}

namespace {

// Single-layer attention output with one perturbation on the visual rows.
struct ProjectionProbe {
    Model model{ModelConfig{}, 21};
    TokenLayout layout = TokenLayout::with_markers(10, 2, 6);
    Tensor h = random_tensor({10, 64}, 22);

    Tensor run(const LayerPerturbation* p = nullptr) const {
        ForwardOptions opts;
        if (p) opts.perturbations = std::span<const LayerPerturbation>(p, 1);
        return model.attention_forward(0, h, layout, opts);
    }

    Tensor visual_only(std::size_t width, std::uint64_t seed) const {
        return mask_rows(random_tensor({10, width}, seed, 3.0), layout.visual_mask());
    }
};

} // namespace

TEST_CASE("query and output perturbations on the visual span never reach text tokens") {
    ProjectionProbe probe;
    const Tensor base = probe.run();
    for (int which = 0; which < 2; ++which) {
        LayerPerturbation p;
        (which == 0 ? p.q_delta : p.o_delta) = probe.visual_only(64, 30 + which);
        const Tensor y = probe.run(&p);
        for (std::size_t i : probe.layout.text_indices()) CHECK(row(base, i) == row(y, i));
        double moved = 0;
        for (std::size_t i : probe.layout.visual_indices()) moved += max_abs_diff(row(base, i), row(y, i));
        CHECK(moved > 0);
    }
}

TEST_CASE("value perturbations on the visual span propagate to later text tokens") {
    ProjectionProbe probe;
    const Tensor base = probe.run();
    LayerPerturbation p;
    p.v_delta = probe.visual_only(16, 40);
    const Tensor y = probe.run(&p);
    double moved = 0;
    for (std::size_t i = *probe.layout.vision_end() + 1; i < 10; ++i) moved += max_abs_diff(row(base, i), row(y, i));
    CHECK(moved > 1e-6);
    for (std::size_t i = 0; i < probe.layout.visual_begin(); ++i) CHECK(row(base, i) == row(y, i));
}

TEST_CASE("scaling values equals scaling attention weights") {
    const Tensor a = softmax_rows(random_tensor({6, 6}, 1), causal_mask<double>(6));
    const Tensor v = random_tensor({6, 8}, 2);
    auto both = [&](const std::vector<double>& c) {
        std::vector<double> diag(36, 0.0);
        for (std::size_t j = 0; j < 6; ++j) diag[j * 7] = c[j];
        const Tensor d = Tensor::from_data({6, 6}, diag);
        return std::pair{matmul(a, matmul(d, v)), matmul(matmul(a, d), v)};
    };
    // powers of two make every product exact, so the two orders agree bit for bit
    auto [l2, r2] = both({0.5, 2.0, 4.0, 0.25, 1.0, 8.0});
    CHECK(std::equal(l2.data().begin(), l2.data().end(), r2.data().begin()));
    auto [l, r] = both({0.3, 1.7, -2.2, 0.9, 5.5, 0.01});
    CHECK(max_abs_diff(l.data(), r.data()) < 1e-13);
}

TEST_CASE("K-path adapters change attention probabilities, V-path adapters do not") {
    const ModelConfig cfg = toy();
    const Model m(cfg, 4);
    const auto ids = random_ids(10, 8);
    const auto layout = TokenLayout::with_markers(10, 1, 6);
    auto probs = [&](const AdapterSet* set) {
        AttentionRecord rec;
        ForwardOptions opts;
        opts.adapters = set;
        opts.record = &rec;
        m.forward(ids, layout, opts);
        return std::vector<double>(rec.probs[0][0].data().begin(), rec.probs[0][0].data().end());
    };
    auto kspec = AdapterSpec::image_lora({{0}, {}, {}, {}});
    kspec.paths = {Projection::K};
    const auto kset = randomized(kspec, cfg, 1);
    const auto vset = randomized(AdapterSpec::image_lora({{0}, {}, {}, {}}), cfg, 1);
    const auto base = probs(nullptr);
    CHECK(probs(&vset) == base);
    CHECK(max_abs_diff(probs(&kset), base) > 1e-8);
}

TEST_CASE("weights round-trip and hash") {
    Model a(toy(), 1);
    Model b(toy(), 2);
    CHECK(a.weight_hash() != b.weight_hash());
    b.load_weights(a.named_weights());
    CHECK(a.weight_hash() == b.weight_hash());
    CHECK(Model(toy(), 1).weight_hash() == a.weight_hash());
}
