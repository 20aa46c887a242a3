#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "dartlab/models.hpp"
#include "test_support.hpp"

using namespace dartlab;
namespace fs = std::filesystem;

namespace {

ModelParams default_params(std::uint64_t seed) {
    return init_params(MlpSpec{{2, 32, 16}}, MlpSpec{{16, 2}}, MlpSpec{{16, 16, 1}}, seed);
}

bool params_equal(const ModelParams& a, const ModelParams& b) {
    if (a.components.size() != b.components.size()) return false;
    for (const auto& [name, comp] : a.components) {
        if (!b.has(name)) return false;
        const auto& other = b.at(name);
        if (comp.layers.size() != other.layers.size()) return false;
        for (std::size_t l = 0; l < comp.layers.size(); ++l) {
            if (!tensors_equal(comp.layers[l].weight, other.layers[l].weight)) return false;
            if (!tensors_equal(comp.layers[l].bias, other.layers[l].bias)) return false;
        }
        if (comp.relu_after != other.relu_after) return false;
    }
    return true;
}

} // namespace

TEST_CASE("initialization is deterministic in the seed, biases zero") {
    ModelParams a = default_params(42);
    ModelParams b = default_params(42);
    CHECK(params_equal(a, b));
    ModelParams c = default_params(43);
    CHECK_FALSE(params_equal(a, c));

    for (const auto& [name, comp] : a.components)
        for (const auto& layer : comp.layers)
            for (std::size_t i = 0; i < layer.bias.numel(); ++i) CHECK(layer.bias[i] == 0.0);

    // Glorot bounds
    const auto& w0 = a.at("g").layers[0].weight; // fan_in 2, fan_out 32
    const double limit = std::sqrt(6.0 / 34.0);
    for (std::size_t i = 0; i < w0.numel(); ++i) {
        CHECK(w0[i] <= limit);
        CHECK(w0[i] >= -limit);
    }
}

TEST_CASE("inconsistent widths are rejected") {
    CHECK_THROWS_AS(init_params(MlpSpec{{2, 32, 8}}, MlpSpec{{16, 2}}, MlpSpec{{8, 1}}, 1),
                    std::invalid_argument);
    CHECK_THROWS_AS(init_params(MlpSpec{{2, 16}}, MlpSpec{{16, 2}}, MlpSpec{{16, 3}}, 1),
                    std::invalid_argument); // d must emit one logit
    CHECK_THROWS_AS(init_params(MlpSpec{{2}}, MlpSpec{{2, 2}}, MlpSpec{{2, 1}}, 1),
                    std::invalid_argument); // at least two widths
}

TEST_CASE("forward computes logits with no output activation") {
    // single linear layer w=(1,2)^T, b=0, x=(1,1) -> logit 3
    ModelParams p;
    MlpComponent comp;
    comp.layers.push_back(DenseLayer{Tensor::matrix(2, 1, {1.0, 2.0}), Tensor({1})});
    comp.relu_after = {false};
    p.components["g"] = comp;
    Tensor x = Tensor::matrix(1, 2, {1.0, 1.0});
    CHECK(forward_value(p, "g", x).value() == 3.0);

    Graph g;
    ParamBinding binding = bind_params(g, p);
    NodeId out = forward(g, binding, p, "g", g.leaf(x));
    CHECK(g.value(out).value() == 3.0);
}

TEST_CASE("zero weights give zero logits; batch extent is preserved") {
    ModelParams p = default_params(5);
    for (auto& [name, comp] : p.components)
        for (auto& layer : comp.layers)
            for (std::size_t i = 0; i < layer.weight.numel(); ++i) layer.weight[i] = 0.0;
    Rng rng(7);
    Tensor x = testsupport::random_tensor(rng, {4, 2});
    Tensor features = forward_value(p, "g", x);
    Tensor logits = forward_value(p, "f", features);
    CHECK(logits.rows() == 4);
    CHECK(logits.cols() == 2);
    for (std::size_t i = 0; i < logits.numel(); ++i) CHECK(logits[i] == 0.0);
}

TEST_CASE("forward is a pure function of params and input") {
    ModelParams p = default_params(11);
    Rng rng(3);
    Tensor x = testsupport::random_tensor(rng, {5, 2});
    Tensor first = forward_value(p, "f", forward_value(p, "g", x));
    Tensor second = forward_value(p, "f", forward_value(p, "g", x));
    CHECK(tensors_equal(first, second));
    CHECK_THROWS_AS(forward_value(p, "g", Tensor({5, 3})), std::invalid_argument);
    CHECK_THROWS_AS(forward_value(p, "nope", x), std::invalid_argument);
}

TEST_CASE("pseudo predictor reproduces f(g(x)) exactly") {
    ModelParams p = default_params(17);
    sync_pseudo_predictor(p);
    Rng rng(23);
    Tensor x = testsupport::random_tensor(rng, {16, 2});
    Tensor via_fg = forward_value(p, "f", forward_value(p, "g", x));
    Tensor via_hp = forward_value(p, "h_p", x);
    CHECK(tensors_equal(via_fg, via_hp)); // exact, not approximate
}

TEST_CASE("checkpoint round trip is bitwise") {
    ModelParams p = default_params(29);
    sync_pseudo_predictor(p);
    const fs::path path = fs::temp_directory_path() / "dartlab_test_ckpt.json";
    save_checkpoint(p, path);
    ModelParams loaded = load_checkpoint(path);
    CHECK(params_equal(p, loaded));
    fs::remove(path);
}

TEST_CASE("checkpoint from another run reproduces forward outputs") {
    const fs::path path = fs::temp_directory_path() / "dartlab_test_ckpt2.json";
    Rng rng(31);
    Tensor probe = testsupport::random_tensor(rng, {8, 2});
    Tensor expected;
    {
        ModelParams p = default_params(101);
        save_checkpoint(p, path);
        expected = forward_value(p, "f", forward_value(p, "g", probe));
    }
    ModelParams fresh = load_checkpoint(path);
    Tensor got = forward_value(fresh, "f", forward_value(fresh, "g", probe));
    CHECK(tensors_equal(expected, got));
    fs::remove(path);
}

TEST_CASE("corrupt checkpoints are rejected") {
    const fs::path dir = fs::temp_directory_path();
    const fs::path good = dir / "dartlab_ckpt_good.json";
    ModelParams p = default_params(37);
    save_checkpoint(p, good);

    // truncated data array -> shape metadata inconsistent
    {
        std::ifstream in(good);
        nlohmann::json doc;
        in >> doc;
        auto& data = doc["components"]["g"][0]["data"];
        data.erase(data.size() - 1);
        const fs::path bad = dir / "dartlab_ckpt_truncated.json";
        std::ofstream out(bad);
        out << doc.dump();
        out.close();
        CHECK_THROWS_AS(load_checkpoint(bad), std::runtime_error);
        fs::remove(bad);
    }
    // malformed document
    {
        const fs::path bad = dir / "dartlab_ckpt_malformed.json";
        std::ofstream out(bad);
        out << "{ not json";
        out.close();
        CHECK_THROWS_AS(load_checkpoint(bad), std::runtime_error);
        fs::remove(bad);
    }
    // wrong format marker
    {
        const fs::path bad = dir / "dartlab_ckpt_marker.json";
        std::ofstream out(bad);
        out << R"({"format":"other","components":{}})";
        out.close();
        CHECK_THROWS_AS(load_checkpoint(bad), std::runtime_error);
        fs::remove(bad);
    }
    fs::remove(good);
}

TEST_CASE("argmax breaks ties toward the lower class index") {
    Tensor logits = Tensor::matrix(3, 3, {1.0, 1.0, 0.0, 0.5, 0.9, 0.9, -1.0, -1.0, -1.0});
    CHECK(argmax_rows(logits) == std::vector<int>{0, 1, 0});
}
