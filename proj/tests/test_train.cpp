#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "ilora/checkpoint.hpp"
#include "ilora/errors.hpp"
#include "ilora/pretrain.hpp"
#include "ilora/rng.hpp"
#include "ilora/train.hpp"

#include <cmath>
#include <filesystem>
#include <numbers>

using namespace ilora;

namespace {

GroundingSpec small_grid() {
    GroundingSpec g;
    g.rows = 3;
    g.cols = 3;
    g.text_pad = 2;
    return g;
}

std::vector<double> flat_values(const AdapterSet& a) {
    std::vector<double> out;
    for (const auto& p : a.parameters()) out.insert(out.end(), p.data().begin(), p.data().end());
    return out;
}

AdapterSet all_heads(const ModelConfig& cfg, std::uint64_t seed) {
    std::vector<std::vector<std::size_t>> chosen(cfg.n_layers);
    for (auto& c : chosen)
        for (std::size_t h = 0; h < cfg.n_kv_heads; ++h) c.push_back(h);
    return AdapterSet::init(AdapterSpec::image_lora(chosen), cfg, seed);
}

} // namespace

TEST_CASE("cosine schedule") {
    CHECK(cosine_lr(1.0, 0, 100) == 1.0);
    CHECK(cosine_lr(1.0, 50, 100) == doctest::Approx(0.5));
    CHECK(cosine_lr(1.0, 100, 100) == doctest::Approx(0.0));
    CHECK(cosine_lr(2.0, 25, 100) == doctest::Approx(1.0 + std::cos(std::numbers::pi / 4)));
    for (std::size_t s = 1; s <= 100; ++s) CHECK(cosine_lr(1.0, s, 100) <= cosine_lr(1.0, s - 1, 100));
}

TEST_CASE("AdamW step matches the closed form") {
    TrainConfig cfg;
    cfg.weight_decay = 0.1;
    Tensor w = Tensor::from_data({2}, {1.0, -2.0}, true);
    Tensor gate = Tensor::from_data({1}, {1.0}, true);
    AdamW opt({{"L0.V.B.h0", w}, {"L0.V.gamma", gate}}, cfg);
    const std::vector<double> g{0.5, -0.25};
    for (int t = 1; t <= 3; ++t) {
        w.zero_grad();
        gate.zero_grad();
        auto& wb = w.node()->grad_buffer();
        wb[0] = g[0];
        wb[1] = g[1];
        gate.node()->grad_buffer()[0] = 0.0;
        opt.step(0.01);
    }
    // constant gradient: m_hat = g, v_hat = g^2 after bias correction
    for (std::size_t k = 0; k < 2; ++k) {
        double x = k == 0 ? 1.0 : -2.0;
        for (int t = 0; t < 3; ++t) {
            x -= 0.01 * 0.1 * x;
            x -= 0.01 * g[k] / (std::abs(g[k]) + 1e-8);
        }
        CHECK(w.data()[k] == doctest::Approx(x).epsilon(1e-12));
    }
    // gates are not decayed
    CHECK(gate.data()[0] == 1.0);
    CHECK(opt.steps_taken() == 3);
}

TEST_CASE("training configuration is validated") {
    TrainConfig cfg;
    cfg.epochs = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = {};
    cfg.lr = -1;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = {};
    cfg.clip_norm = 0.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    const Model m(ModelConfig{}, 1);
    AdapterSet a = all_heads(m.config(), 1);
    CHECK_THROWS_AS(train_adapters(m, a, {}, TrainConfig{}), ConfigError);
}

TEST_CASE("zero learning rate leaves adapters unchanged and the base frozen") {
    const Model m(ModelConfig{}, 1);
    AdapterSet a = all_heads(m.config(), 2);
    const auto before = flat_values(a);
    TrainConfig cfg;
    cfg.lr = 0.0;
    cfg.epochs = 1;
    const auto data = gen_grounding(3, 10, small_grid());
    const TrainResult r = train_adapters(m, a, data, cfg);
    CHECK(flat_values(a) == before);
    CHECK(r.base_hash_before == r.base_hash_after);
    CHECK(r.metrics.size() == 2);
    for (const auto& w : m.named_weights()) CHECK_FALSE(w.tensor.requires_grad());
}

TEST_CASE("training overfits eight examples within 500 steps and keeps the base fixed") {
    // a random base cannot be taught the answer format through visual values
    // alone, so the smoke run adapts Q and V over every token
    const Model m(ModelConfig{}, 1);
    const std::uint64_t hash = m.weight_hash();
    AdapterSet a = AdapterSet::init(AdapterSpec::std_lora({Projection::Q, Projection::V}), m.config(), 2);
    TrainConfig cfg;
    cfg.lr = 3e-2;
    cfg.epochs = 500;
    cfg.batch_size = 8;
    const auto data = gen_grounding(3, 8, GroundingSpec{});
    const TrainResult r = train_adapters(m, a, data, cfg);
    REQUIRE(r.metrics.size() == 500);
    double final_loss = 0.0;
    for (const auto& ex : data) final_loss += answer_loss(m, ex, ex.options(&a)).item() / 8.0;
    MESSAGE("first loss " << r.metrics.front().loss << " final loss " << final_loss);
    CHECK(final_loss < 0.05);
    CHECK(m.weight_hash() == hash);
}

TEST_CASE("an empty answer gives exactly zero adapter gradients") {
    const Model m(ModelConfig{}, 1);
    AdapterSet a = all_heads(m.config(), 2);
    for (auto& p : a.parameters())
        for (auto& v : p.mutable_data()) v += 0.1;
    a.set_trainable(true);
    Example ex = gen_grounding(3, 1, small_grid())[0];
    ex.answer.clear();
    const Tensor loss = answer_loss(m, ex, ex.options(&a));
    CHECK(loss.item() == 0.0);
    backward(loss);
    for (const auto& p : a.parameters())
        for (double g : p.grad()) CHECK(g == 0.0);
}

TEST_CASE("adapters with B = 0 evaluate exactly like the base") {
    const Model m(ModelConfig{}, 1);
    const AdapterSet a = all_heads(m.config(), 2);
    const auto data = gen_grounding(3, 30, GroundingSpec{});
    const EvalResult base = evaluate(m, nullptr, data);
    const EvalResult adapted = evaluate(m, &a, data);
    CHECK(base.predictions == adapted.predictions);
    CHECK(base.accuracy == adapted.accuracy);
    CHECK(evaluate(m, &a, data).predictions == adapted.predictions);
}

TEST_CASE("training is deterministic and thread-count independent") {
    const Model m(ModelConfig{}, 1);
    const auto data = gen_grounding(3, 12, small_grid());
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 5;
    cfg.seed = 4;
    std::vector<std::vector<double>> results;
    for (std::size_t threads : {1, 1, 3}) {
        cfg.threads = threads;
        AdapterSet a = all_heads(m.config(), 2);
        const TrainResult r = train_adapters(m, a, data, cfg);
        results.push_back(flat_values(a));
        CHECK(r.metrics.size() == 6);
        CHECK(r.metrics[5].epoch == 1);
    }
    CHECK(results[0] == results[1]);
    CHECK(results[0] == results[2]);
    cfg.seed = 5;
    cfg.threads = 1;
    AdapterSet other = all_heads(m.config(), 2);
    train_adapters(m, other, data, cfg);
    CHECK(flat_values(other) != results[0]);
}

TEST_CASE("loss only sees answer tokens") {
    const Model m(ModelConfig{}, 1);
    Example ex = gen_grounding(3, 1, small_grid())[0];
    const double base = answer_loss(m, ex).item();
    // changing an answer token changes the loss
    Example other = ex;
    other.answer.back() = tok::BG;
    CHECK(answer_loss(m, other).item() != base);
    const auto t = ex.targets();
    std::size_t counted = 0;
    for (int v : t) counted += v >= 0 ? 1 : 0;
    CHECK(counted == ex.answer.size());
    // direct mean over answer positions
    const auto ids = ex.input_ids();
    const Tensor logits = m.forward(ids, ex.layout(), ex.options());
    const auto lg = logits.data();
    const std::size_t V = m.config().vocab;
    double sum = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i) {
        if (t[i] < 0) continue;
        double mx = -1e300;
        for (std::size_t v = 0; v < V; ++v) mx = std::max(mx, lg[i * V + v]);
        double z = 0.0;
        for (std::size_t v = 0; v < V; ++v) z += std::exp(lg[i * V + v] - mx);
        sum += mx + std::log(z) - lg[i * V + static_cast<std::size_t>(t[i])];
    }
    CHECK(base == doctest::Approx(sum / static_cast<double>(counted)).epsilon(1e-12));
}

TEST_CASE("cached and full decoding agree") {
    const Model m(ModelConfig{}, 1);
    AdapterSet a = all_heads(m.config(), 2);
    for (auto& p : a.parameters())
        for (auto& v : p.mutable_data()) v += 0.05;
    const auto data = gen_grounding(3, 6, GroundingSpec{});
    const auto text = gen_puretext(3, 3);
    for (const auto& ex : data) {
        CHECK(decode_answer(m, ex, &a, true) == decode_answer(m, ex, &a, false));
        CHECK(decode_answer(m, ex, nullptr, true) == decode_answer(m, ex, nullptr, false));
        CHECK(parse_point(decode_answer(m, ex, &a)).has_value());
    }
    for (const auto& ex : text) CHECK(decode_answer(m, ex, &a, true) == decode_answer(m, ex, &a, false));
}

TEST_CASE("evaluation is thread-count independent") {
    const Model m(ModelConfig{}, 1);
    const auto data = gen_grounding(3, 20, GroundingSpec{});
    const EvalResult one = evaluate(m, nullptr, data, true, 1);
    const EvalResult four = evaluate(m, nullptr, data, true, 4);
    CHECK(one.predictions == four.predictions);
    CHECK(one.accuracy == four.accuracy);
    CHECK(one.accuracy == accuracy(one.predictions, data));
}

TEST_CASE("metrics CSV") {
    const std::vector<MetricRow> rows{{0, 0, 0.5, 1.25}, {1, 0, 0.25, 1.0}};
    CHECK(metrics_csv(rows) == "step,epoch,lr,loss\n0,0,0.5,1.25\n1,0,0.25,1\n");
}

TEST_CASE("pretraining is deterministic and lowers the loss") {
    ModelConfig cfg;
    cfg.n_layers = 2;
    PretrainConfig pc;
    pc.examples = 160;
    pc.task = small_grid();
    const PretrainResult a = pretrain_base(cfg, pc, 3);
    const PretrainResult b = pretrain_base(cfg, pc, 3);
    CHECK(a.model.weight_hash() == b.model.weight_hash());
    CHECK(a.losses == b.losses);
    REQUIRE(a.losses.size() == 20);
    const double head = (a.losses[0] + a.losses[1] + a.losses[2]) / 3;
    const double tail = (a.losses[17] + a.losses[18] + a.losses[19]) / 3;
    CHECK(tail < head);
    for (const auto& w : a.model.named_weights()) CHECK_FALSE(w.tensor.requires_grad());

    pc.examples = 0;
    CHECK(pretrain_base(cfg, pc, 3).model.weight_hash() == Model(cfg, derive_seed(3, "init")).weight_hash());
    pc.batch_size = 0;
    CHECK_THROWS_AS(pc.validate(), ConfigError);
}

TEST_CASE("source patch code differs from the model's own code") {
    const ModelConfig cfg;
    const Model m(cfg, 1);
    const PatchCode src = source_patch_code(cfg, 1);
    CHECK(src.rows.data().size() == m.patch_code().rows.data().size());
    CHECK(std::vector<double>(src.rows.data().begin(), src.rows.data().end()) !=
          std::vector<double>(m.patch_code().rows.data().begin(), m.patch_code().rows.data().end()));
    const PatchCode again = source_patch_code(cfg, 1);
    CHECK(std::equal(src.cols.data().begin(), src.cols.data().end(), again.cols.data().begin()));
}

TEST_CASE("checkpoints round-trip exactly in f64 and to f32 precision") {
    const Model m(ModelConfig{}, 1);
    AdapterSet a = all_heads(m.config(), 2);
    for (auto& p : a.parameters())
        for (auto& v : p.mutable_data()) v += 0.1 / 3.0;
    const auto dir = std::filesystem::temp_directory_path();
    const std::string f64 = (dir / "ilora_ckpt64.bin").string(), f32 = (dir / "ilora_ckpt32.bin").string();
    save_tensors(f64, a.named_parameters());
    save_tensors(f32, a.named_parameters(), DType::f32);
    AdapterSet b = all_heads(m.config(), 9), c = all_heads(m.config(), 9);
    b.load(load_tensors(f64));
    c.load(load_tensors(f32));
    CHECK(flat_values(b) == flat_values(a));
    const auto va = flat_values(a), vc = flat_values(c);
    for (std::size_t i = 0; i < va.size(); ++i) CHECK(vc[i] == static_cast<double>(static_cast<float>(va[i])));

    save_tensors(f64, m.named_weights());
    Model m2(ModelConfig{}, 7);
    m2.load_weights(load_tensors(f64));
    CHECK(m2.weight_hash() == m.weight_hash());
    std::filesystem::remove(f64);
    std::filesystem::remove(f32);
}

TEST_CASE("corrupt checkpoints are rejected") {
    const std::vector<CheckpointTensor> t{{"x", {2}, DType::f64, {1.0, 2.0}}};
    const std::string bytes = encode_checkpoint(t);
    CHECK(decode_checkpoint(bytes)[0].values == t[0].values);
    CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, bytes.size() - 1)), ConfigError);
    std::string magic = bytes;
    magic[0] = 'X';
    CHECK_THROWS_AS(decode_checkpoint(magic), ConfigError);
    std::string trailing = bytes + "z";
    CHECK_THROWS_AS(decode_checkpoint(trailing), ConfigError);
    CHECK_THROWS_AS(read_checkpoint("/nonexistent/ckpt.bin"), ConfigError);
}
