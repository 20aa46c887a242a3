#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dartlab/autodiff.hpp"
#include "dartlab/common.hpp"
#include "dartlab/tensor.hpp"

namespace dartlab {

struct MlpSpec {
    std::vector<std::size_t> widths; // input dim first, output dim last

    void validate() const {
        check(widths.size() >= 2, "MlpSpec: at least two widths required");
        for (std::size_t w : widths) check(w > 0, "MlpSpec: widths must be positive");
    }
};

struct DenseLayer {
    Tensor weight; // [in x out]
    Tensor bias;   // [out]
};

// A chain of dense layers with an explicit activation pattern. Keeping the
// pattern explicit lets the pseudo-label predictor h_p reproduce f(g(x))
// exactly: no activation is inserted at the g/f junction.
struct MlpComponent {
    std::vector<DenseLayer> layers;
    std::vector<bool> relu_after; // one flag per layer; last is always false

    std::size_t in_width() const { return layers.front().weight.rows(); }
    std::size_t out_width() const { return layers.back().weight.cols(); }
};

struct ModelParams {
    std::map<std::string, MlpComponent> components;

    bool has(const std::string& name) const { return components.count(name) != 0; }
    const MlpComponent& at(const std::string& name) const {
        check(has(name), "unknown model component: " + name);
        return components.find(name)->second;
    }
    MlpComponent& at(const std::string& name) {
        check(has(name), "unknown model component: " + name);
        return components.find(name)->second;
    }
};

namespace detail {

inline MlpComponent init_component(const MlpSpec& spec, Rng& rng) {
    spec.validate();
    MlpComponent comp;
    for (std::size_t l = 0; l + 1 < spec.widths.size(); ++l) {
        const std::size_t fan_in = spec.widths[l];
        const std::size_t fan_out = spec.widths[l + 1];
        const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        Tensor w({fan_in, fan_out});
        for (std::size_t i = 0; i < w.numel(); ++i) w[i] = rng.uniform(-limit, limit);
        comp.layers.push_back(DenseLayer{std::move(w), Tensor({fan_out})});
        comp.relu_after.push_back(l + 2 < spec.widths.size());
    }
    return comp;
}

} // namespace detail

// Glorot-uniform weights, zero biases, deterministic in the seed. Components:
// feature extractor g, classifier f (consumes g's output), discriminator d
// (consumes g's output, emits one logit).
inline ModelParams init_params(const MlpSpec& spec_g, const MlpSpec& spec_f,
                               const MlpSpec& spec_d, std::uint64_t seed) {
    spec_g.validate();
    spec_f.validate();
    spec_d.validate();
    check(spec_f.widths.front() == spec_g.widths.back(),
          "init_params: f input width must equal g output width");
    check(spec_d.widths.front() == spec_g.widths.back(),
          "init_params: d input width must equal g output width");
    check(spec_d.widths.back() == 1, "init_params: d must emit a single logit");
    Rng rng(seed);
    ModelParams p;
    p.components["g"] = detail::init_component(spec_g, rng);
    p.components["f"] = detail::init_component(spec_f, rng);
    p.components["d"] = detail::init_component(spec_d, rng);
    return p;
}

// h_p <- f.g: stacks g's and f's layers (and activation patterns) so that the
// predictor's forward pass is bit-identical to f(g(x)).
inline void sync_pseudo_predictor(ModelParams& p) {
    const MlpComponent& g = p.at("g");
    const MlpComponent& f = p.at("f");
    MlpComponent hp;
    hp.layers = g.layers;
    hp.relu_after = g.relu_after;
    hp.layers.insert(hp.layers.end(), f.layers.begin(), f.layers.end());
    hp.relu_after.insert(hp.relu_after.end(), f.relu_after.begin(), f.relu_after.end());
    p.components["h_p"] = std::move(hp);
}

// Tape leaves for a parameter set; backward can then reach every weight.
struct ParamBinding {
    std::map<std::string, std::vector<std::pair<NodeId, NodeId>>> nodes; // (weight, bias)

    std::vector<NodeId> all_ids() const {
        std::vector<NodeId> ids;
        for (const auto& [name, layers] : nodes)
            for (const auto& [w, b] : layers) {
                ids.push_back(w);
                ids.push_back(b);
            }
        return ids;
    }
};

inline ParamBinding bind_params(Graph& g, const ModelParams& p) {
    ParamBinding binding;
    for (const auto& [name, comp] : p.components) {
        auto& vec = binding.nodes[name];
        for (const DenseLayer& layer : comp.layers)
            vec.emplace_back(g.leaf(layer.weight, true), g.leaf(layer.bias, true));
    }
    return binding;
}

// Logits of one component on a batch, recorded on the active graph.
inline NodeId forward(Graph& g, const ParamBinding& binding, const ModelParams& p,
                      const std::string& component, NodeId x) {
    const MlpComponent& comp = p.at(component);
    auto it = binding.nodes.find(component);
    check(it != binding.nodes.end(), "forward: component not bound: " + component);
    check(g.value(x).rank() == 2 && g.value(x).cols() == comp.in_width(),
          "forward: input width mismatch for component " + component);
    NodeId h = x;
    for (std::size_t l = 0; l < comp.layers.size(); ++l) {
        h = g.add(g.matmul(h, it->second[l].first), it->second[l].second);
        if (comp.relu_after[l]) h = g.relu(h);
    }
    return h;
}

// Plain evaluation of the same computation, no tape.
inline Tensor forward_value(const ModelParams& p, const std::string& component, const Tensor& x) {
    const MlpComponent& comp = p.at(component);
    check(x.rank() == 2 && x.cols() == comp.in_width(),
          "forward_value: input width mismatch for component " + component);
    Tensor h = x;
    for (std::size_t l = 0; l < comp.layers.size(); ++l) {
        h = add_value(matmul_value(h, comp.layers[l].weight), comp.layers[l].bias);
        if (comp.relu_after[l])
            for (std::size_t i = 0; i < h.numel(); ++i)
                if (h[i] < 0.0) h[i] = 0.0;
    }
    check_runtime(h.all_finite(), "forward_value: non-finite output");
    return h;
}

// Row-wise argmax with ties broken toward the lower class index.
inline std::vector<int> argmax_rows(const Tensor& logits) {
    check(logits.rank() == 2, "argmax_rows: rank-2 input required");
    std::vector<int> out(logits.rows());
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < logits.cols(); ++j)
            if (logits.at(i, j) > logits.at(i, best)) best = j;
        out[i] = static_cast<int>(best);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: {"format":"dartlab-ckpt-v1","components":{name:[{"shape":[r,c],
// "data":[...]}...]}} with values as 17-significant-digit decimal strings so a
// round trip reproduces every double bit for bit.
// ---------------------------------------------------------------------------

namespace detail {

inline std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline nlohmann::json matrix_to_json(const Tensor& t, std::size_t r, std::size_t c) {
    nlohmann::json entry;
    entry["shape"] = {r, c};
    nlohmann::json data = nlohmann::json::array();
    for (std::size_t i = 0; i < t.numel(); ++i) data.push_back(format_double(t[i]));
    entry["data"] = std::move(data);
    return entry;
}

inline std::vector<double> json_to_values(const nlohmann::json& entry, std::size_t expected) {
    check_runtime(entry.contains("data") && entry["data"].is_array(),
                  "checkpoint: entry missing data array");
    const auto& arr = entry["data"];
    check_runtime(arr.size() == expected,
                  "checkpoint: shape metadata inconsistent with array length");
    std::vector<double> out;
    out.reserve(arr.size());
    for (const auto& v : arr) {
        if (v.is_string())
            out.push_back(std::strtod(v.get<std::string>().c_str(), nullptr));
        else
            out.push_back(v.get<double>());
    }
    return out;
}

inline void write_file_atomic(const std::filesystem::path& path, const std::string& content) {
    namespace fs = std::filesystem;
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        check_runtime(out.good(), "cannot open for writing: " + tmp.string());
        out << content;
        out.flush();
        check_runtime(out.good(), "write failed: " + tmp.string());
    }
    fs::rename(tmp, path);
}

} // namespace detail

inline void save_checkpoint(const ModelParams& p, const std::filesystem::path& path) {
    nlohmann::json doc;
    doc["format"] = "dartlab-ckpt-v1";
    nlohmann::json comps = nlohmann::json::object();
    for (const auto& [name, comp] : p.components) {
        nlohmann::json list = nlohmann::json::array();
        for (const DenseLayer& layer : comp.layers) {
            list.push_back(detail::matrix_to_json(layer.weight, layer.weight.rows(),
                                                  layer.weight.cols()));
            list.push_back(detail::matrix_to_json(layer.bias, 1, layer.bias.numel()));
        }
        comps[name] = std::move(list);
    }
    doc["components"] = std::move(comps);
    detail::write_file_atomic(path, doc.dump(2) + "\n");
}

inline ModelParams load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path);
    check_runtime(in.good(), "cannot open checkpoint: " + path.string());
    nlohmann::json doc;
    try {
        in >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("malformed checkpoint document: " + std::string(e.what()));
    }
    check_runtime(doc.is_object() && doc.value("format", "") == "dartlab-ckpt-v1",
                  "checkpoint: unknown format marker");
    check_runtime(doc.contains("components") && doc["components"].is_object(),
                  "checkpoint: missing components object");

    ModelParams p;
    for (const auto& [name, list] : doc["components"].items()) {
        check_runtime(list.is_array() && list.size() % 2 == 0,
                      "checkpoint: component " + name + " must hold weight/bias pairs");
        MlpComponent comp;
        for (std::size_t i = 0; i < list.size(); i += 2) {
            const auto& wj = list[i];
            const auto& bj = list[i + 1];
            check_runtime(wj.contains("shape") && wj["shape"].size() == 2,
                          "checkpoint: weight entry missing 2-d shape");
            const std::size_t r = wj["shape"][0].get<std::size_t>();
            const std::size_t c = wj["shape"][1].get<std::size_t>();
            check_runtime(r > 0 && c > 0, "checkpoint: degenerate weight shape");
            Tensor w({r, c}, detail::json_to_values(wj, r * c));
            check_runtime(bj.contains("shape") && bj["shape"].size() == 2 &&
                              bj["shape"][0].get<std::size_t>() == 1 &&
                              bj["shape"][1].get<std::size_t>() == c,
                          "checkpoint: bias shape must be [1, out]");
            Tensor b({c}, detail::json_to_values(bj, c));
            if (!comp.layers.empty())
                check_runtime(comp.layers.back().weight.cols() == r,
                              "checkpoint: layer widths do not chain in component " + name);
            comp.layers.push_back(DenseLayer{std::move(w), std::move(b)});
        }
        comp.relu_after.assign(comp.layers.size(), true);
        comp.relu_after.back() = false;
        p.components[name] = std::move(comp);
    }
    // h_p mirrors f.g, so its activation pattern is the concatenation of g's
    // and f's with none at the junction.
    if (p.has("h_p")) {
        check_runtime(p.has("g") && p.has("f"),
                      "checkpoint: h_p requires g and f to rebuild its layout");
        const auto& g = p.at("g");
        const auto& f = p.at("f");
        auto& hp = p.at("h_p");
        check_runtime(hp.layers.size() == g.layers.size() + f.layers.size(),
                      "checkpoint: h_p layer count must match g plus f");
        hp.relu_after = g.relu_after;
        hp.relu_after.insert(hp.relu_after.end(), f.relu_after.begin(), f.relu_after.end());
    }
    return p;
}

} // namespace dartlab
