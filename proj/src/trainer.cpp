#include "infoclust/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <tuple>

#if defined(__GLIBC__)
#include <malloc.h>
#endif
#if defined(__SSE3__)
#include <pmmintrin.h>
#include <xmmintrin.h>
#endif

#include "infoclust/eval.hpp"

namespace infoclust {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Config

namespace {

void check_keys(const nlohmann::json& j, const std::vector<std::string>& known, const std::string& what)
{
    if (!j.is_object()) {
        throw std::invalid_argument(what + ": expected an object");
    }
    for (const auto& [key, value] : j.items()) {
        if (std::find(known.begin(), known.end(), key) == known.end()) {
            throw std::invalid_argument(what + ": unknown field '" + key + "'");
        }
    }
}

nlohmann::json term_to_json(const LossTerm& t)
{
    nlohmann::json j{{"term", to_string(t.kind)}, {"weight", t.weight}};
    if (t.kind == TermKind::mi_xy) {
        j["lambda"] = t.lambda;
    } else {
        j["transform"] = t.transform;
    }
    return j;
}

LossTerm term_from_json(const nlohmann::json& j)
{
    check_keys(j, {"term", "weight", "transform", "lambda"}, "loss term");
    LossTerm t;
    t.kind = term_kind_from_string(j.at("term").get<std::string>());
    t.weight = j.value("weight", 1.0);
    t.transform = j.value("transform", std::string{});
    t.lambda = j.value("lambda", 4.0);
    return t;
}

}  // namespace

void ExperimentConfig::validate() const
{
    if (epochs < 0) throw std::invalid_argument("config: epochs must be >= 0");
    if (batch_size < 2) throw std::invalid_argument("config: batch_size must be >= 2");
    if (eval_every < 1) throw std::invalid_argument("config: eval_every must be >= 1");
    if (heads.primary < 1) throw std::invalid_argument("config: at least one primary head is required");
    if (heads.overcluster < 0 || heads.overcluster_width < 2) {
        throw std::invalid_argument("config: invalid over-clustering layout");
    }
    if (!(optimizer.learning_rate > 0.0)) throw std::invalid_argument("config: learning rate must be positive");
    if (backbone != "conv" && backbone != "mlp") {
        throw std::invalid_argument("config: backbone must be conv or mlp");
    }
    if (loss.terms.empty()) throw std::invalid_argument("config: no loss terms");
    std::set<std::string> keys;
    for (const auto& t : loss.terms) {
        if (!std::isfinite(t.weight) || t.weight < 0.0) {
            throw std::invalid_argument("config: term '" + t.key() + "' has a negative or non-finite weight");
        }
        if (t.kind == TermKind::mi_xy) {
            if (!t.transform.empty()) throw std::invalid_argument("config: mi_xy takes no transform");
            if (!std::isfinite(t.lambda) || t.lambda < 0.0) throw std::invalid_argument("config: invalid lambda");
        } else if (!transforms.contains(t.transform)) {
            throw std::invalid_argument("config: term '" + t.key() + "' references undeclared transform '" +
                                        t.transform + "'");
        }
        if (!keys.insert(t.key()).second) {
            throw std::invalid_argument("config: duplicate term '" + t.key() + "'");
        }
    }
    for (const auto& [name, spec] : transforms) {
        if (name.empty()) throw std::invalid_argument("config: transform with empty name");
        spec.validate();
        // walk the source chain to reject unknown names and cycles
        std::set<std::string> seen{name};
        std::string src = spec.source;
        while (!src.empty()) {
            const auto it = transforms.find(src);
            if (it == transforms.end()) {
                throw std::invalid_argument("config: transform '" + name + "' has unknown source '" + src + "'");
            }
            if (!seen.insert(src).second) {
                throw std::invalid_argument("config: transform sources form a cycle at '" + src + "'");
            }
            src = it->second.source;
        }
    }
}

void to_json(nlohmann::json& j, const ExperimentConfig& c)
{
    nlohmann::json terms = nlohmann::json::array();
    for (const auto& t : c.loss.terms) terms.push_back(term_to_json(t));
    nlohmann::json transforms = nlohmann::json::object();
    for (const auto& [name, spec] : c.transforms) transforms[name] = spec;
    nlohmann::json ds{{"name", c.dataset.name}};
    if (!c.dataset.path.empty()) ds["path"] = c.dataset.path;
    if (c.dataset.limit > 0) ds["limit"] = c.dataset.limit;
    if (c.dataset.name == "raw") {
        ds["labels"] = c.dataset.labels;
        ds["classes"] = c.dataset.classes;
    }
    if (c.dataset.name == "blobs") {
        const auto& b = c.dataset.blobs;
        ds["blobs"] = {{"classes", b.classes},     {"per_class", b.per_class}, {"channels", b.channels},
                       {"height", b.height},       {"width", b.width},         {"separation", b.separation},
                       {"seed", b.seed}};
    }
    j = nlohmann::json{
        {"name", c.name},
        {"dataset", ds},
        {"seed", c.seed},
        {"epochs", c.epochs},
        {"batch_size", c.batch_size},
        {"loss", {{"terms", terms}, {"symmetrize_joint", c.loss.symmetrize_joint}}},
        {"transforms", transforms},
        {"heads",
         {{"primary", c.heads.primary}, {"overcluster", c.heads.overcluster},
          {"overcluster_width", c.heads.overcluster_width}}},
        {"backbone", c.backbone},
        {"optimizer", c.optimizer},
        {"eval_every", c.eval_every},
        {"eval_limit", c.eval_limit},
        {"record_time", c.record_time},
        {"normalize_input", c.normalize_input},
        {"out_dir", c.out_dir},
    };
}

void from_json(const nlohmann::json& j, ExperimentConfig& c)
{
    check_keys(j,
               {"name", "preset", "dataset", "seed", "epochs", "batch_size", "loss", "transforms", "heads", "backbone", "optimizer",
                "eval_every", "eval_limit", "record_time", "normalize_input", "out_dir"},
               "config");
    // A config may start from a preset and override fields.
    if (j.contains("preset")) {
        const auto ds = j.contains("dataset") ? j.at("dataset").value("name", std::string("mnist")) : "mnist";
        c = preset(j.at("preset").get<std::string>(), ds);
    } else {
        c = ExperimentConfig{};
    }
    c.name = j.value("name", c.name);
    if (j.contains("dataset")) {
        const auto& d = j.at("dataset");
        check_keys(d, {"name", "path", "labels", "classes", "limit", "blobs"}, "dataset");
        c.dataset.name = d.value("name", c.dataset.name);
        c.dataset.path = d.value("path", c.dataset.path);
        c.dataset.labels = d.value("labels", c.dataset.labels);
        c.dataset.classes = d.value("classes", c.dataset.classes);
        c.dataset.limit = d.value("limit", c.dataset.limit);
        if (d.contains("blobs")) {
            const auto& b = d.at("blobs");
            check_keys(b, {"classes", "per_class", "channels", "height", "width", "separation", "seed"}, "blobs");
            auto& s = c.dataset.blobs;
            s.classes = b.value("classes", s.classes);
            s.per_class = b.value("per_class", s.per_class);
            s.channels = b.value("channels", s.channels);
            s.height = b.value("height", s.height);
            s.width = b.value("width", s.width);
            s.separation = b.value("separation", s.separation);
            s.seed = b.value("seed", s.seed);
        }
    }
    c.seed = j.value("seed", c.seed);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    if (j.contains("loss")) {
        const auto& l = j.at("loss");
        check_keys(l, {"terms", "symmetrize_joint"}, "loss");
        if (l.contains("terms")) {
            c.loss.terms.clear();
            for (const auto& t : l.at("terms")) c.loss.terms.push_back(term_from_json(t));
        }
        c.loss.symmetrize_joint = l.value("symmetrize_joint", c.loss.symmetrize_joint);
    }
    if (j.contains("transforms")) {
        c.transforms.clear();
        for (const auto& [name, spec] : j.at("transforms").items()) c.transforms[name] = spec.get<TransformSpec>();
    }
    if (j.contains("heads")) {
        const auto& h = j.at("heads");
        check_keys(h, {"primary", "overcluster", "overcluster_width"}, "heads");
        c.heads.primary = h.value("primary", c.heads.primary);
        c.heads.overcluster = h.value("overcluster", c.heads.overcluster);
        c.heads.overcluster_width = h.value("overcluster_width", c.heads.overcluster_width);
    }
    c.backbone = j.value("backbone", c.backbone);
    if (j.contains("optimizer")) c.optimizer = j.at("optimizer").get<AdamConfig>();
    c.eval_every = j.value("eval_every", c.eval_every);
    c.eval_limit = j.value("eval_limit", c.eval_limit);
    c.record_time = j.value("record_time", c.record_time);
    c.normalize_input = j.value("normalize_input", c.normalize_input);
    c.out_dir = j.value("out_dir", c.out_dir);
    c.validate();
}

ExperimentConfig load_config(const fs::path& path)
{
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("cannot open config " + path.string());
    }
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw std::invalid_argument(path.string() + ": " + e.what());
    }
    return j.get<ExperimentConfig>();
}

// ---------------------------------------------------------------------------
// Presets

namespace {

TransformSpec make_transform(TransformKind kind, const std::string& dataset, const std::string& source = {})
{
    TransformSpec s;
    s.kind = kind;
    s.source = source;
    if (dataset == "mnist" || dataset == "svhn" || dataset == "blobs") {
        s.geometric.flip_probability = 0.0;
    }
    if (dataset == "blobs") {
        // blob "images" are feature vectors; crops would mix unrelated coordinates
        s.geometric.crop_min = 1.0;
        s.epsilon = 0.15;
    }
    return s;
}

struct Row {
    std::vector<std::string> mi_yy;  ///< transforms paired with Y~
    std::vector<std::string> kl;     ///< transforms of KL regularizers
    bool mi_xy = false;
};

const std::map<std::string, Row>& rows()
{
    static const std::map<std::string, Row> table{
        {"a", {{"geo"}, {}, false}},
        {"b", {{"vat"}, {}, false}},
        {"c", {{"ivat"}, {}, false}},
        {"d", {{"mixup"}, {}, false}},
        {"e", {{"geo", "vat"}, {}, false}},
        {"f", {{"geo", "ivat"}, {}, false}},
        {"g", {{"geo", "mixup"}, {}, false}},
        {"h", {{"geo", "vat", "mixup"}, {}, false}},
        {"i", {{"geo", "ivat", "mixup"}, {}, false}},
        {"j", {{"geo"}, {"vat"}, false}},
        {"k", {{"geo"}, {"mixup"}, false}},
        {"l", {{"geo"}, {"vat", "mixup"}, false}},
        {"m", {{"geo"}, {"ivat", "mixup"}, false}},
        {"n", {{"geo"}, {"vat", "vat_geo"}, false}},
        {"o", {{}, {}, true}},
        {"p", {{}, {"geo"}, true}},
        {"q", {{}, {"vat"}, true}},
        {"r", {{}, {"mixup"}, true}},
        {"s", {{}, {"geo", "vat"}, true}},
        {"t", {{}, {"geo", "mixup"}, true}},
        {"u", {{}, {"vat", "mixup"}, true}},
        {"v", {{}, {"geo", "vat", "mixup"}, true}},
        {"w", {{"geo"}, {"geo"}, true}},
    };
    return table;
}

}  // namespace

std::vector<std::string> preset_names()
{
    std::vector<std::string> out;
    for (const auto& [name, row] : rows()) out.push_back(name);
    out.emplace_back("best_1h1o");
    out.emplace_back("best_5h5o");
    return out;
}

ExperimentConfig preset(const std::string& name, const std::string& dataset)
{
    const bool best = name == "best_1h1o" || name == "best_5h5o";
    const auto it = rows().find(best ? "w" : name);
    if (it == rows().end()) {
        throw std::invalid_argument("unknown preset '" + name + "'");
    }
    const Row& row = it->second;
    ExperimentConfig c;
    c.name = name;
    c.dataset.name = dataset;
    c.out_dir = "runs/" + name;
    if (dataset == "cifar10") c.dataset.classes = 10;

    const auto declare = [&](const std::string& t) {
        if (c.transforms.contains(t)) return;
        if (t == "geo") c.transforms[t] = make_transform(TransformKind::geometric, dataset);
        else if (t == "vat") c.transforms[t] = make_transform(TransformKind::vat, dataset);
        else if (t == "ivat") c.transforms[t] = make_transform(TransformKind::ivat, dataset);
        else if (t == "mixup") c.transforms[t] = make_transform(TransformKind::mixup, dataset);
        else if (t == "vat_geo") {
            c.transforms["geo"] = make_transform(TransformKind::geometric, dataset);
            c.transforms[t] = make_transform(TransformKind::vat, dataset, "geo");
        }
    };
    if (row.mi_xy) c.loss.terms.push_back({TermKind::mi_xy, 1.0, "", 4.0});
    for (const auto& t : row.mi_yy) {
        declare(t);
        c.loss.terms.push_back({TermKind::mi_yy, 1.0, t, 4.0});
    }
    for (const auto& t : row.kl) {
        declare(t);
        c.loss.terms.push_back({TermKind::kl_reg, 1.0, t, 4.0});
    }
    if (name == "best_5h5o") {
        c.heads.primary = 5;
        c.heads.overcluster = 5;
        c.heads.overcluster_width = dataset == "cifar10" ? 70 : 50;
    }
    if (dataset == "blobs") {
        c.dataset.blobs = BlobSpec{3, 200, 1, 4, 4, 10.0, 0};
        c.backbone = "mlp";
        c.batch_size = 100;
        c.epochs = 50;
        c.optimizer.learning_rate = 1e-3;
    }
    if (dataset == "mnist") c.optimizer.learning_rate = 1e-3;
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// Data

namespace {

fs::path resolve(const std::string& p, const std::string& fallback)
{
    fs::path path = p.empty() ? fs::path(fallback) : fs::path(p);
    if (path.is_relative()) {
        const auto root = data_root();
        if (root.empty()) {
            if (!fs::exists(path)) {
                throw std::runtime_error("dataset path '" + path.string() +
                                         "' not found and INFOCLUST_DATA_DIR is not set");
            }
            return path;
        }
        return root / path;
    }
    return path;
}

LabeledDataset take_first(LabeledDataset full, std::size_t limit)
{
    if (limit == 0 || limit >= full.data.size()) return full;
    std::vector<std::size_t> idx(limit);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    Dataset data(full.data.name(), full.data.classes(), full.data.batch(idx));
    return {std::move(data), LabelOracle(full.labels.supervised_targets(idx), full.labels.classes())};
}

}  // namespace

LabeledDataset load_dataset(const DatasetConfig& config)
{
    if (config.name == "mnist") return take_first(load_mnist(resolve(config.path, "mnist")), config.limit);
    if (config.name == "cifar10") return take_first(load_cifar10(resolve(config.path, "cifar10")), config.limit);
    if (config.name == "blobs") return take_first(synth_blobs(config.blobs), config.limit);
    if (config.name == "raw") {
        return take_first(load_raw(resolve(config.path, ""), resolve(config.labels, ""), "raw", config.classes),
                          config.limit);
    }
    throw std::invalid_argument("unknown dataset '" + config.name + "'");
}

Architecture architecture_for(const ExperimentConfig& config, const Dataset& data)
{
    const auto& im = data.images();
    auto arch = Architecture::desk_default(im.channels(), im.height(), im.width(), data.classes(), config.heads.primary,
                                           config.heads.overcluster, config.heads.overcluster_width);
    if (config.backbone == "mlp") {
        arch.convs.clear();
    }
    if (config.normalize_input) {
        std::tie(arch.input_mean, arch.input_std) = channel_statistics(im);
    }
    return arch;
}

std::pair<std::vector<float>, std::vector<float>> channel_statistics(const ImageBatch& images)
{
    const auto channels = static_cast<std::size_t>(images.channels());
    const std::size_t plane = static_cast<std::size_t>(images.height()) * images.width();
    std::vector<double> sum(channels, 0.0);
    std::vector<double> sq(channels, 0.0);
    for (std::size_t i = 0; i < images.size(); ++i) {
        const auto x = images.image(i);
        for (std::size_t c = 0; c < channels; ++c) {
            for (std::size_t k = 0; k < plane; ++k) {
                const double v = x[c * plane + k];
                sum[c] += v;
                sq[c] += v * v;
            }
        }
    }
    const double n = static_cast<double>(images.size() * plane);
    std::vector<float> mean(channels);
    std::vector<float> stddev(channels);
    for (std::size_t c = 0; c < channels; ++c) {
        mean[c] = static_cast<float>(sum[c] / n);
        stddev[c] = static_cast<float>(std::sqrt(std::max(sq[c] / n - mean[c] * mean[c], 1e-12)));
    }
    return {mean, stddev};
}

// ---------------------------------------------------------------------------
// Evaluation

namespace {

template <typename F>
void for_chunks(const ImageBatch& images, std::size_t limit, std::size_t chunk, F&& f)
{
    const std::size_t n = limit == 0 ? images.size() : std::min(limit, images.size());
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < n; start += chunk) {
        const auto end = std::min(n, start + chunk);
        idx.resize(end - start);
        std::iota(idx.begin(), idx.end(), start);
        f(start, images.gather(idx));
    }
}

}  // namespace

std::vector<int> predict(const ClusterModel& model, const ImageBatch& images, std::size_t head, std::size_t chunk)
{
    std::vector<int> out;
    out.reserve(images.size());
    for_chunks(images, 0, chunk, [&](std::size_t, const ImageBatch& part) {
        const auto p = argmax_rows(model.forward(part, head).matrix());
        out.insert(out.end(), p.begin(), p.end());
    });
    return out;
}

Evaluator make_evaluator(const Dataset& data, const LabelOracle& labels, std::size_t limit)
{
    if (labels.size() != data.size()) {
        throw std::invalid_argument("evaluator: label count does not match dataset");
    }
    return [&data, &labels, limit](const ClusterModel& model) {
        const auto& arch = model.architecture();
        EvalResult r;
        r.heads = arch.primary_heads();
        std::vector<std::vector<int>> preds(r.heads.size());
        for_chunks(data.images(), limit, 1024, [&](std::size_t, const ImageBatch& part) {
            const auto pass = model.forward(part, false);
            for (std::size_t i = 0; i < r.heads.size(); ++i) {
                const auto p = argmax_rows(pass.probs[r.heads[i]]);
                preds[i].insert(preds[i].end(), p.begin(), p.end());
            }
        });
        std::vector<std::size_t> rows(preds.front().size());
        std::iota(rows.begin(), rows.end(), std::size_t{0});
        for (std::size_t i = 0; i < r.heads.size(); ++i) {
            r.accuracy.push_back(labels.score(preds[i], rows, arch.heads[r.heads[i]]).accuracy);
        }
        return r;
    };
}

// ---------------------------------------------------------------------------
// One optimization step

namespace {

struct Branch {
    ImageBatch images;
    ForwardPass<float> pass;
    std::string source;
    std::optional<MixupPair> pair;
    std::vector<Matrix> grad;  ///< d(loss)/d(probs) per head
};

void accumulate(Matrix& into, const Matrix& g, double scale)
{
    if (into.size() == 0) {
        into = scale * g;
    } else {
        into += scale * g;
    }
}

}  // namespace

StepOutput loss_and_grad(const ExperimentConfig& config, const ClusterModel& model, const ImageBatch& batch,
                         std::uint64_t step_seed)
{
    const std::size_t heads = model.head_count();
    std::map<std::string, Branch> branches;
    branches.emplace("", Branch{batch, model.forward(batch, true), "", std::nullopt, std::vector<Matrix>(heads)});

    std::function<Branch&(const std::string&)> branch = [&](const std::string& name) -> Branch& {
        if (auto it = branches.find(name); it != branches.end()) return it->second;
        const auto& spec = config.transforms.at(name);
        const Branch& src = branch(spec.source);
        const auto index = static_cast<std::uint64_t>(std::distance(config.transforms.begin(), config.transforms.find(name)));
        const auto seed = mix_seed(step_seed, index);
        Branch b{ImageBatch{}, {}, spec.source, std::nullopt, std::vector<Matrix>(heads)};
        switch (spec.kind) {
        case TransformKind::mixup:
            b.pair = mixup(src.images, spec, seed);
            b.images = b.pair->mixed_input;
            break;
        case TransformKind::vat:
        case TransformKind::ivat:
            b.images = vat_perturbation(model, src.images, spec, divergence_for(spec.kind), seed,
                                        config.loss.symmetrize_joint)
                           .images;
            break;
        default: b.images = apply_image_transform(src.images, spec, seed); break;
        }
        b.pass = model.forward(b.images, true);
        return branches.emplace(name, std::move(b)).first->second;
    };

    Branch& clean = branches.at("");
    std::map<std::string, double> parts;
    std::vector<double> head_losses(heads, 0.0);
    const double per_head = 1.0 / static_cast<double>(heads);

    for (const auto& term : config.loss.terms) {
        const double sign = term.kind == TermKind::kl_reg ? 1.0 : -1.0;
        const double scale = sign * term.weight * per_head;
        double mean_value = 0.0;
        for (std::size_t h = 0; h < heads; ++h) {
            const Matrix& p = clean.pass.probs[h];
            double value = 0.0;
            if (term.kind == TermKind::mi_xy) {
                const auto vg = mi_xy_with_grad(p, term.lambda);
                value = vg.value;
                accumulate(clean.grad[h], vg.grad, scale);
            } else {
                Branch& t = branch(term.transform);
                // Y side: the clean posterior, or for mixup the mixed posteriors of its inputs
                Branch* base = t.pair ? &branch(t.source) : &clean;
                const Matrix y_side = t.pair ? mix_rows(base->pass.probs[h], *t.pair) : p;
                if (term.kind == TermKind::mi_yy) {
                    const auto vg = mi_yy_with_grad(y_side, t.pass.probs[h], config.loss.symmetrize_joint);
                    value = vg.value;
                    accumulate(base->grad[h], t.pair ? mix_rows_backward(vg.grad_first, *t.pair) : vg.grad_first,
                               scale);
                    accumulate(t.grad[h], vg.grad_second, scale);
                } else {
                    // the target side is held constant
                    const auto vg = kl_rows_with_grad(y_side, t.pass.probs[h]);
                    value = vg.value;
                    accumulate(t.grad[h], vg.grad_second, scale);
                }
            }
            head_losses[h] += sign * term.weight * value;
            mean_value += value * per_head;
        }
        parts[term.key()] = mean_value;
    }

    StepOutput out;
    out.loss = compose_loss(config.loss, parts);
    out.head_losses = std::move(head_losses);
    if (!std::isfinite(out.loss.scalar)) {
        std::ostringstream msg;
        msg << "non-finite loss";
        for (const auto& [k, v] : parts) msg << ' ' << k << '=' << v;
        throw std::runtime_error(msg.str());
    }

    out.grads = zeros_like(model.parameters());
    for (auto& [name, b] : branches) {
        std::vector<Matrix> grad_logits(heads);
        bool any = false;
        for (std::size_t h = 0; h < heads; ++h) {
            if (b.grad[h].size() == 0) continue;
            grad_logits[h] = softmax_backward(b.pass.probs[h], b.grad[h]);
            if (!grad_logits[h].allFinite()) {
                throw std::runtime_error("non-finite gradient in branch '" + (name.empty() ? "clean" : name) + "'");
            }
            any = true;
        }
        if (any) model.backward(b.pass, grad_logits, &out.grads, nullptr);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Training loop

namespace {

std::string csv_header(const ExperimentConfig& config, const Architecture& arch)
{
    std::string h = "epoch";
    for (const auto& t : config.loss.terms) h += ",term:" + t.key();
    for (auto head : arch.primary_heads()) h += ",head:" + std::to_string(head) + "/acc";
    return h + ",selected_acc,seconds";
}

std::string fmt(double v, int digits)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

std::string csv_row(const ExperimentConfig& config, const EpochRecord& r)
{
    std::string row = std::to_string(r.epoch);
    for (const auto& t : config.loss.terms) row += "," + fmt(r.terms.at(t.key()), 6);
    double selected = 0.0;
    for (std::size_t i = 0; i < r.eval->heads.size(); ++i) {
        row += "," + fmt(r.eval->accuracy[i], 6);
        if (r.eval->heads[i] == r.selected_head) selected = r.eval->accuracy[i];
    }
    return row + "," + fmt(selected, 6) + "," + fmt(r.seconds, 3);
}

std::size_t select_head(const Architecture& arch, const std::vector<double>& losses)
{
    const auto primary = arch.primary_heads();
    return head_select(losses, primary);
}

void save_state(const fs::path& path, const ClusterModel& model, const Adam<float>& adam,
                const ExperimentConfig& config, int epoch, double seconds, std::size_t selected_head)
{
    Checkpoint ck;
    ck.model = model;
    ck.metadata = {{"epoch", epoch},
                   {"seconds", seconds},
                   {"adam_steps", adam.steps()},
                   {"selected_head", selected_head},
                   {"config", config}};
    ck.extras["adam_m"] = adam.first_moment();
    ck.extras["adam_v"] = adam.second_moment();
    save_checkpoint(path, ck);
}

/// Flush-to-zero and denormals-are-zero for the duration of a run.
class FlushDenormals {
public:
    FlushDenormals()
    {
#if defined(__SSE3__)
        saved_ = _mm_getcsr();
        _MM_SET_FLUSH_ZERO_MODE(_MM_FLUSH_ZERO_ON);
        _MM_SET_DENORMALS_ZERO_MODE(_MM_DENORMALS_ZERO_ON);
#endif
    }
    ~FlushDenormals()
    {
#if defined(__SSE3__)
        _mm_setcsr(saved_);
#endif
    }
    FlushDenormals(const FlushDenormals&) = delete;
    FlushDenormals& operator=(const FlushDenormals&) = delete;

private:
    unsigned saved_ = 0;
};

/// Keeps freed activation buffers in the heap instead of returning them to
/// the kernel after every step.
void retain_heap()
{
#if defined(__GLIBC__)
    static const bool once = [] {
        mallopt(M_MMAP_THRESHOLD, 1 << 30);
        mallopt(M_TRIM_THRESHOLD, 1 << 30);
        return true;
    }();
    (void)once;
#endif
}

}  // namespace

RunResult train(const ExperimentConfig& config, const Dataset& data, const Evaluator& evaluate,
                const RunOptions& options)
{
    config.validate();
    retain_heap();
    const FlushDenormals flush;
    const auto arch = architecture_for(config, data);
    ClusterModel model = ClusterModel::init(arch, config.seed);
    Adam<float> adam(config.optimizer, model.parameters());
    const BatchIterator batches(data.size(), config.batch_size, mix_seed(config.seed, 0xba7c4));

    const fs::path out_dir(config.out_dir);
    const fs::path csv_path = out_dir / "metrics.csv";
    const fs::path ck_path = out_dir / "checkpoint.bin";
    RunResult result;
    int start_epoch = 1;
    double elapsed_before = 0.0;
    std::size_t resumed_head = 0;
    const auto header = csv_header(config, arch);

    if (options.write_files) {
        fs::create_directories(out_dir);
        std::ofstream(out_dir / "config.json") << nlohmann::json(config).dump(2) << '\n';
    }

    if (options.resume && fs::exists(ck_path)) {
        auto ck = load_checkpoint(ck_path);
        if (!(ck.model.architecture() == arch)) {
            throw std::runtime_error("resume: checkpoint architecture does not match the config");
        }
        model = std::move(ck.model);
        adam.restore(ck.metadata.at("adam_steps").get<std::int64_t>(), ck.extras.at("adam_m"), ck.extras.at("adam_v"));
        start_epoch = ck.metadata.at("epoch").get<int>() + 1;
        elapsed_before = ck.metadata.value("seconds", 0.0);
        resumed_head = ck.metadata.value("selected_head", std::size_t{0});
        // keep only rows the checkpoint covers
        std::vector<std::string> kept;
        std::ifstream in(csv_path);
        std::string line;
        while (std::getline(in, line)) {
            if (line == header) continue;
            if (!line.empty() && std::stoi(line.substr(0, line.find(','))) < start_epoch) kept.push_back(line);
        }
        std::ofstream csv(csv_path, std::ios::trunc);
        csv << header << '\n';
        for (const auto& l : kept) csv << l << '\n';
    } else if (options.write_files) {
        std::ofstream(csv_path, std::ios::trunc) << header << '\n';
    }

    const auto t0 = std::chrono::steady_clock::now();
    const auto seconds = [&] {
        if (!config.record_time) return 0.0;
        return elapsed_before + std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    };
    const auto emit = [&](EpochRecord& r) {
        r.selected_head = select_head(arch, r.head_losses);
        r.eval = evaluate(model);
        r.seconds = seconds();
        if (options.write_files) {
            std::ofstream(csv_path, std::ios::app) << csv_row(config, r) << '\n';
            save_state(ck_path, model, adam, config, r.epoch, r.seconds, r.selected_head);
        }
        if (!options.quiet) {
            std::cerr << config.name << " seed " << config.seed << " epoch " << r.epoch;
            for (const auto& [k, v] : r.terms) std::cerr << ' ' << k << '=' << fmt(v, 4);
            for (std::size_t i = 0; i < r.eval->heads.size(); ++i) {
                if (r.eval->heads[i] == r.selected_head) std::cerr << " acc=" << fmt(r.eval->accuracy[i], 4);
            }
            std::cerr << " t=" << fmt(r.seconds, 1) << "s\n";
        }
    };

    if (start_epoch == 1) {
        // epoch 0: untrained model, loss terms on the first batch
        const auto first = batches.epoch_batches(1).front();
        const auto out = loss_and_grad(config, model, data.batch(first), mix_seed(config.seed, 0));
        EpochRecord r;
        r.epoch = 0;
        r.terms = out.loss.terms;
        r.head_losses = out.head_losses;
        emit(r);
        result.history.push_back(r);
    }

    for (int epoch = start_epoch; epoch <= config.epochs; ++epoch) {
        EpochRecord r;
        r.epoch = epoch;
        r.head_losses.assign(model.head_count(), 0.0);
        std::size_t steps = 0;
        const auto plan = batches.epoch_batches(epoch);
        for (std::size_t b = 0; b < plan.size(); ++b) {
            if (plan[b].size() < 2) continue;
            const auto step_seed = mix_seed(config.seed, (static_cast<std::uint64_t>(epoch) << 32) | b);
            StepOutput out;
            try {
                out = loss_and_grad(config, model, data.batch(plan[b]), step_seed);
            } catch (const std::runtime_error& e) {
                throw std::runtime_error(config.name + ": epoch " + std::to_string(epoch) + " batch " +
                                         std::to_string(b) + ": " + e.what());
            }
            adam.step(model, out.grads);
            for (const auto& [k, v] : out.loss.terms) r.terms[k] += v;
            for (std::size_t h = 0; h < out.head_losses.size(); ++h) r.head_losses[h] += out.head_losses[h];
            ++steps;
        }
        for (auto& [k, v] : r.terms) v /= static_cast<double>(steps);
        for (auto& v : r.head_losses) v /= static_cast<double>(steps);
        if (epoch % config.eval_every == 0 || epoch == config.epochs) {
            emit(r);
        } else {
            r.selected_head = select_head(arch, r.head_losses);
            r.seconds = seconds();
        }
        result.history.push_back(r);
    }

    result.model = std::move(model);
    std::optional<EvalResult> final_eval;
    if (result.history.empty()) {
        // resumed after the last epoch: score the head that run selected
        result.selected_head = resumed_head;
        final_eval = evaluate(result.model);
    } else {
        result.selected_head = result.history.back().selected_head;
        final_eval = result.history.back().eval;
    }
    if (final_eval) {
        for (std::size_t i = 0; i < final_eval->heads.size(); ++i) {
            if (final_eval->heads[i] == result.selected_head) result.final_selected_accuracy = final_eval->accuracy[i];
        }
    }
    return result;
}

SeedSummary train_seeds(const ExperimentConfig& config, int count, const Dataset& data, const Evaluator& evaluate,
                        const RunOptions& options)
{
    if (count < 1) {
        throw std::invalid_argument("seeds: count must be >= 1");
    }
    SeedSummary s;
    for (int i = 0; i < count; ++i) {
        ExperimentConfig c = config;
        c.seed = config.seed + static_cast<std::uint64_t>(i);
        c.out_dir = (fs::path(config.out_dir) / ("seed_" + std::to_string(c.seed))).string();
        const auto r = train(c, data, evaluate, options);
        s.seeds.push_back(c.seed);
        s.accuracy.push_back(r.final_selected_accuracy);
    }
    s.mean = std::accumulate(s.accuracy.begin(), s.accuracy.end(), 0.0) / count;
    double var = 0.0;
    for (double a : s.accuracy) var += (a - s.mean) * (a - s.mean);
    s.stddev = count > 1 ? std::sqrt(var / (count - 1)) : 0.0;
    if (options.write_files) {
        fs::create_directories(config.out_dir);
        std::ofstream(fs::path(config.out_dir) / "summary.json")
            << nlohmann::json{{"preset", config.name}, {"seeds", s.seeds}, {"selected_acc", s.accuracy},
                              {"mean", s.mean}, {"std", s.stddev}}
                   .dump(2)
            << '\n';
    }
    return s;
}

// ---------------------------------------------------------------------------
// Downstream protocols

Tap tap_from_string(const std::string& name)
{
    if (name == "fc") return Tap::fc;
    if (name == "conv") return Tap::conv;
    if (name == "y") return Tap::y;
    throw std::invalid_argument("unknown tap '" + name + "' (expected fc, conv or y)");
}

Matrix extract_features(const ClusterModel& model, const ImageBatch& images, Tap tap, std::size_t head,
                        std::size_t chunk)
{
    Matrix out;
    for_chunks(images, 0, chunk, [&](std::size_t start, const ImageBatch& part) {
        Matrix f;
        if (tap == Tap::y) {
            f = model.forward(part, head).matrix();
        } else {
            auto taps = model.features(part);
            f = tap == Tap::fc ? std::move(taps.fc) : std::move(taps.conv);
        }
        if (out.size() == 0) out.resize(static_cast<Eigen::Index>(images.size()), f.cols());
        out.middleRows(static_cast<Eigen::Index>(start), f.rows()) = f;
    });
    return out;
}

FinetuneResult finetune(const ClusterModel* init, const Architecture& arch, const Dataset& data,
                        const LabelOracle& labels, const FinetuneConfig& config)
{
    const int classes = data.classes();
    if (config.labeled == 0 || config.test == 0 || config.labeled + config.test > data.size()) {
        throw std::invalid_argument("finetune: labeled + test must be positive and fit in the dataset");
    }
    if (config.epochs < 0 || config.batch_size < 1) {
        throw std::invalid_argument("finetune: invalid schedule");
    }
    retain_heap();
    const FlushDenormals flush;
    ClusterModel model;
    if (init != nullptr) {
        const auto& a = init->architecture();
        if (a.channels != arch.channels || a.height != arch.height || a.width != arch.width ||
            !(a.convs == arch.convs) || a.hidden != arch.hidden) {
            throw std::invalid_argument("finetune: checkpoint architecture does not match");
        }
        model = init->with_new_heads({classes}, classes, mix_seed(config.seed, 1));
    } else {
        Architecture a = arch;
        a.heads = {classes};
        a.classes = classes;
        model = ClusterModel::init(a, mix_seed(config.seed, 1));
    }

    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(mix_seed(config.seed, 2));
    std::shuffle(order.begin(), order.end(), rng);
    const std::vector<std::size_t> train_rows(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(config.labeled));
    const std::vector<std::size_t> test_rows(order.begin() + static_cast<std::ptrdiff_t>(config.labeled),
                                             order.begin() + static_cast<std::ptrdiff_t>(config.labeled + config.test));
    const ImageBatch test_images = data.batch(test_rows);

    FinetuneResult result;
    const auto test_accuracy = [&] {
        return labels.agreement(predict(model, test_images, 0), test_rows);
    };
    result.accuracy_per_epoch.push_back(test_accuracy());

    Adam<float> adam(AdamConfig{config.learning_rate}, model.parameters());
    const BatchIterator it(train_rows.size(), config.batch_size, mix_seed(config.seed, 3));
    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        const auto plan = it.epoch_batches(epoch);
        for (std::size_t b = 0; b < plan.size(); ++b) {
            std::vector<std::size_t> rows(plan[b].size());
            for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = train_rows[plan[b][i]];
            ImageBatch x = data.batch(rows);
            if (config.augment) {
                x = apply_image_transform(x, config.augmentation,
                                          mix_seed(config.seed, (static_cast<std::uint64_t>(epoch) << 32) | b));
            }
            const auto targets = labels.supervised_targets(rows);
            const auto g = model.grad(x, [&](const std::vector<Matrix>& probs) {
                const Matrix& p = probs[0];
                const auto n = static_cast<double>(p.rows());
                HeadObjective o;
                Matrix gp = Matrix::Zero(p.rows(), p.cols());
                for (Eigen::Index r = 0; r < p.rows(); ++r) {
                    const double pr = std::max(p(r, targets[static_cast<std::size_t>(r)]), kProbabilityFloor);
                    o.value -= std::log(pr) / n;
                    gp(r, targets[static_cast<std::size_t>(r)]) = -1.0 / (pr * n);
                }
                o.grad_probs = {gp};
                return o;
            });
            adam.step(model, g);
        }
        result.accuracy_per_epoch.push_back(test_accuracy());
    }
    result.test_accuracy = result.accuracy_per_epoch.back();
    return result;
}

// ---------------------------------------------------------------------------
// Montage

MontageLayout write_montage(const ClusterModel& model, const Dataset& data, std::size_t head, int per_cluster,
                            std::uint64_t seed, const fs::path& path)
{
    if (per_cluster < 1) {
        throw std::invalid_argument("montage: samples per cluster must be >= 1");
    }
    if (head >= model.head_count()) {
        throw std::out_of_range("montage: unknown head " + std::to_string(head));
    }
    const int k = model.architecture().heads[head];
    const auto preds = predict(model, data.images(), head);
    MontageLayout layout;
    layout.rows.resize(static_cast<std::size_t>(k));
    for (std::size_t i = 0; i < preds.size(); ++i) layout.rows[static_cast<std::size_t>(preds[i])].push_back(i);
    std::mt19937_64 rng(seed);
    for (auto& row : layout.rows) {
        std::shuffle(row.begin(), row.end(), rng);
        if (row.size() > static_cast<std::size_t>(per_cluster)) row.resize(static_cast<std::size_t>(per_cluster));
    }

    const auto& im = data.images();
    const int h = im.height();
    const int w = im.width();
    const int out_channels = im.channels() == 3 ? 3 : 1;
    const int gap = 1;
    layout.width = per_cluster * (w + gap) + gap;
    layout.height = k * (h + gap) + gap;
    std::vector<std::uint8_t> pixels(static_cast<std::size_t>(layout.width) * layout.height * out_channels, 128);
    for (int r = 0; r < k; ++r) {
        for (int s = 0; s < per_cluster; ++s) {
            const int y0 = gap + r * (h + gap);
            const int x0 = gap + s * (w + gap);
            const auto& row = layout.rows[static_cast<std::size_t>(r)];
            for (int y = 0; y < h; ++y) {
                for (int x = 0; x < w; ++x) {
                    for (int c = 0; c < out_channels; ++c) {
                        // empty slots stay black
                        const float v = static_cast<std::size_t>(s) < row.size()
                                            ? im.at(row[static_cast<std::size_t>(s)], c, y, x)
                                            : 0.0f;
                        pixels[(static_cast<std::size_t>(y0 + y) * layout.width + (x0 + x)) * out_channels + c] =
                            static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
                    }
                }
            }
        }
    }
    write_png(path, layout.width, layout.height, out_channels, pixels);
    return layout;
}

}  // namespace infoclust
