#include "eralab/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <set>
#include <sstream>

#include "eralab/errors.hpp"
#include "eralab/toml.hpp"

namespace eralab {

using nlohmann::json;

namespace {

void check_keys(const json& obj, std::initializer_list<std::string_view> allowed, const std::string& section) {
    if (!obj.is_object()) {
        throw ConfigError("[" + section + "] must be a table");
    }
    for (const auto& [key, value] : obj.items()) {
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
            throw ConfigError("unknown key '" + key + "' in [" + section + "]");
        }
    }
}

template <typename T>
T get_or(const json& obj, const char* key, T fallback, const std::string& section) {
    const auto it = obj.find(key);
    if (it == obj.end()) {
        return fallback;
    }
    try {
        if constexpr (std::is_same_v<T, double>) {
            if (!it->is_number()) {
                throw ConfigError("");
            }
        } else if constexpr (std::is_integral_v<T> && !std::is_same_v<T, bool>) {
            if (!it->is_number_integer() || (std::is_unsigned_v<T> && it->get<long long>() < 0)) {
                throw ConfigError("");
            }
        } else if constexpr (std::is_same_v<T, bool>) {
            if (!it->is_boolean()) {
                throw ConfigError("");
            }
        } else if constexpr (std::is_same_v<T, std::string>) {
            if (!it->is_string()) {
                throw ConfigError("");
            }
        }
        return it->get<T>();
    } catch (const std::exception&) {
        throw ConfigError("[" + section + "] " + key + " has the wrong type");
    }
}

std::optional<std::size_t> optional_index(const json& obj, const char* key, const std::string& section) {
    if (!obj.contains(key)) {
        return std::nullopt;
    }
    return get_or<std::size_t>(obj, key, 0, section);
}

std::string fmt(const char* pattern, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, pattern, v);
    return buf;
}

} // namespace

TrainableSet parse_mask(std::string_view spec, std::size_t row) {
    TrainableSet set;
    std::size_t start = 0;
    while (start <= spec.size()) {
        const std::size_t end = std::min(spec.find('+', start), spec.size());
        const std::string_view part = spec.substr(start, end - start);
        if (part == "mlp") {
            set.all_mlp = true;
        } else if (part == "embeddings") {
            set.all_embeddings = true;
        } else if (part == "row") {
            set.embedding_rows.push_back(row);
        } else if (part == "all") {
            set.all_mlp = true;
            set.all_embeddings = true;
        } else if (part.size() > 5 && part.substr(0, 5) == "layer") {
            std::size_t layer = 0;
            try {
                std::size_t used = 0;
                layer = std::stoul(std::string(part.substr(5)), &used);
                if (used != part.size() - 5) {
                    throw std::invalid_argument("");
                }
            } catch (const std::exception&) {
                throw ConfigError("bad mask component '" + std::string(part) + "'");
            }
            set.mlp_layers.push_back(layer);
        } else {
            throw ConfigError("bad mask component '" + std::string(part) +
                              "' (expected mlp, layerN, row, embeddings or all)");
        }
        start = end + 1;
    }
    return set;
}

TrainableSet resolve_target_row(TrainableSet set, std::size_t target) {
    for (auto& r : set.embedding_rows) {
        if (r == kTargetRowPlaceholder) {
            r = target;
        }
    }
    return set;
}

json to_json(const TrainableSet& set) {
    return {{"mlp", set.all_mlp},
            {"layers", set.mlp_layers},
            {"embeddings", set.all_embeddings},
            {"rows", set.embedding_rows}};
}

TrainableSet trainable_from_json(const json& value, std::size_t row) {
    if (value.is_string()) {
        return parse_mask(value.get<std::string>(), row);
    }
    check_keys(value, {"mlp", "layers", "embeddings", "rows"}, "mask");
    TrainableSet set;
    set.all_mlp = get_or<bool>(value, "mlp", false, "mask");
    set.all_embeddings = get_or<bool>(value, "embeddings", false, "mask");
    set.mlp_layers = get_or<std::vector<std::size_t>>(value, "layers", {}, "mask");
    set.embedding_rows = get_or<std::vector<std::size_t>>(value, "rows", {}, "mask");
    return set;
}

ConceptUniverse universe_from_json(const json& value) {
    check_keys(value, {"preset", "means", "variances", "priors"}, "universe");
    if (value.contains("preset")) {
        if (value.size() != 1) {
            throw ConfigError("[universe] preset cannot be combined with explicit components");
        }
        const auto preset = get_or<std::string>(value, "preset", "", "universe");
        if (preset == "reference") {
            return ConceptUniverse::reference();
        }
        if (preset == "absent_concept") {
            return ConceptUniverse::with_absent_concept();
        }
        throw ConfigError("unknown universe preset '" + preset + "' (expected reference or absent_concept)");
    }
    try {
        const auto means = value.at("means").get<std::vector<Vector>>();
        const auto variances = value.at("variances").get<std::vector<Vector>>();
        const Vector priors = value.contains("priors") ? value.at("priors").get<Vector>()
                                                       : Vector(means.size(), 1.0 / static_cast<double>(means.size()));
        if (variances.size() != means.size() || priors.size() != means.size()) {
            throw ConfigError("[universe] means, variances and priors must have the same length");
        }
        std::vector<GaussianComponent> comps;
        for (std::size_t i = 0; i < means.size(); ++i) {
            comps.push_back({means[i], variances[i], priors[i]});
        }
        return ConceptUniverse(std::move(comps));
    } catch (const json::exception& e) {
        throw ConfigError(std::string("[universe] ") + e.what());
    } catch (const ConfigError&) {
        throw;
    } catch (const Error& e) {
        throw ConfigError(std::string("[universe] ") + e.what());
    }
}

json to_json(const ConceptUniverse& universe) {
    json means = json::array();
    json variances = json::array();
    json priors = json::array();
    for (const auto& c : universe.components()) {
        means.push_back(c.mean);
        variances.push_back(c.variance);
        priors.push_back(c.weight);
    }
    return {{"means", means}, {"variances", variances}, {"priors", priors}};
}

json to_json(const TrainConfig& config) {
    return {{"steps", config.steps},     {"batch_size", config.batch_size}, {"lr", config.lr},
            {"seed", config.seed},       {"p_uncond", config.p_uncond},     {"mask", to_json(config.trainable)}};
}

json to_json(const ErasureConfig& config) {
    json j = {{"method", to_string(config.method)},
              {"target", config.target},
              {"eta", config.guidance},
              {"steps", config.steps},
              {"lr", config.lr},
              {"batch_size", config.batch_size},
              {"latent_pool", config.latent_pool},
              {"pool_refresh", config.pool_refresh},
              {"ridge", std::isinf(config.ridge) ? json("inf") : json(config.ridge)},
              {"seed", config.seed}};
    if (config.anchor) {
        j["anchor"] = *config.anchor;
    }
    if (config.pool_token) {
        j["pool_token"] = *config.pool_token;
    }
    j["mask"] = to_json(config.trainable.value_or(TrainableSet{false, {0}, false, {config.target}}));
    return j;
}

json to_json(const GradientProbeConfig& config) {
    json j = {{"target", config.target},         {"gamma", config.gamma},     {"steps", config.steps},
              {"lr", config.lr},                 {"batch_size", config.batch_size},
              {"latent_pool", config.latent_pool}, {"seed", config.seed}};
    if (config.anchor) {
        j["anchor"] = *config.anchor;
    }
    j["mask"] = to_json(config.trainable.value_or(TrainableSet::mlp_and_rows({config.target})));
    return j;
}

json to_json(const PersonalizationConfig& config) {
    return {{"class_concept", config.class_concept},
            {"prior_weight", config.prior_weight},
            {"prior_size", config.prior_size},
            {"steps", config.steps},
            {"lr", config.lr},
            {"instance_batch", config.instance_batch},
            {"prior_batch", config.prior_batch},
            {"init", config.init == TokenInit::anchor ? "anchor" : "random"},
            {"train_mlp", config.train_mlp},
            {"train_token", config.train_token},
            {"reference_count", config.reference.rows()},
            {"seed", config.seed}};
}

json to_json(const ParamDelta& delta) {
    return {{"fraction_updated", delta.fraction_updated},
            {"mean_abs_change", delta.mean_abs_change},
            {"relative_frobenius_change", delta.relative_frobenius_change},
            {"threshold", delta.threshold}};
}

void ExperimentConfig::validate() const {
    if (seeds.empty()) {
        throw ConfigError("at least one seed is required");
    }
    if (shape.concept_count != universe.size()) {
        throw ConfigError("[model] concept_count (" + std::to_string(shape.concept_count) +
                          ") must equal the number of universe components (" + std::to_string(universe.size()) + ")");
    }
    if (shape.data_dim != universe.dim()) {
        throw ConfigError("[model] data_dim does not match the universe dimension");
    }
    const auto check_concept = [&](std::size_t c, const std::string& where) {
        if (c >= shape.concept_count) {
            throw ConfigError(where + " refers to concept " + std::to_string(c) + ", which does not exist");
        }
    };
    const auto check_token = [&](std::size_t t, const std::string& where) {
        if (t > shape.concept_count) {
            throw ConfigError(where + " refers to token " + std::to_string(t) + ", which does not exist");
        }
    };
    if (erasures.empty()) {
        throw ConfigError("at least one [[erasure]] entry is required");
    }
    for (const auto& e : erasures) {
        check_concept(e.target, "[[erasure]] target");
        if (e.anchor) {
            check_token(*e.anchor, "[[erasure]] anchor");
        }
        if (e.pool_token) {
            check_token(*e.pool_token, "[[erasure]] pool_token");
        }
    }
    if (gradient_probe.anchor) {
        check_token(*gradient_probe.anchor, "[probe_gg] anchor");
    }
    if (class_concept) {
        check_concept(*class_concept, "[probe_ip] class_concept");
    }
    if (reference_samples == 0) {
        throw ConfigError("[probe_ip] reference_samples must be >= 1");
    }
    if (eval.samples_per_concept == 0) {
        throw ConfigError("[eval] samples_per_concept must be >= 1");
    }
    for (const auto& m : eval.metrics) {
        if (m != "accuracy" && m != "alignment" && m != "energy") {
            throw ConfigError("[eval] unknown metric '" + m + "'");
        }
    }
    for (int s : eval.sweep_steps) {
        if (s < 0) {
            throw ConfigError("[eval] sweep_steps must be >= 0");
        }
    }
}

ExperimentConfig experiment_from_json(const json& doc) {
    check_keys(doc, {"universe", "model", "train", "erasure", "probe_gg", "probe_ip", "eval", "seeds", "output_dir"},
               "root");
    ExperimentConfig cfg;
    if (doc.contains("universe")) {
        cfg.universe = universe_from_json(doc["universe"]);
        cfg.shape.concept_count = cfg.universe.size();
        cfg.shape.data_dim = cfg.universe.dim();
    }
    if (doc.contains("model")) {
        const json& m = doc["model"];
        check_keys(m, {"data_dim", "concept_count", "embedding_dim", "time_dim", "hidden", "steps", "beta_start",
                       "beta_end"},
                   "model");
        DenoiserShape& s = cfg.shape;
        s.data_dim = get_or<std::size_t>(m, "data_dim", s.data_dim, "model");
        s.concept_count = get_or<std::size_t>(m, "concept_count", s.concept_count, "model");
        s.embedding_dim = get_or<std::size_t>(m, "embedding_dim", s.embedding_dim, "model");
        s.time_dim = get_or<std::size_t>(m, "time_dim", s.time_dim, "model");
        s.hidden = get_or<std::vector<std::size_t>>(m, "hidden", s.hidden, "model");
        s.steps = get_or<int>(m, "steps", s.steps, "model");
        s.beta_start = get_or<double>(m, "beta_start", s.beta_start, "model");
        s.beta_end = get_or<double>(m, "beta_end", s.beta_end, "model");
    }
    if (doc.contains("train")) {
        const json& t = doc["train"];
        check_keys(t, {"steps", "batch_size", "lr", "seed", "p_uncond", "mask"}, "train");
        TrainConfig& c = cfg.train;
        c.steps = get_or<int>(t, "steps", c.steps, "train");
        c.batch_size = get_or<std::size_t>(t, "batch_size", c.batch_size, "train");
        c.lr = get_or<double>(t, "lr", c.lr, "train");
        c.seed = get_or<std::uint64_t>(t, "seed", c.seed, "train");
        c.p_uncond = get_or<double>(t, "p_uncond", c.p_uncond, "train");
        if (t.contains("mask")) {
            c.trainable = trainable_from_json(t["mask"], 0);
        }
    }
    if (doc.contains("erasure")) {
        const json& list = doc["erasure"];
        if (!list.is_array()) {
            throw ConfigError("erasure must be an array of tables ([[erasure]])");
        }
        cfg.erasures.clear();
        for (const json& e : list) {
            check_keys(e, {"method", "target", "anchor", "eta", "steps", "lr", "batch_size", "latent_pool",
                           "pool_refresh", "pool_token", "mask", "ridge", "seed"},
                       "erasure");
            ErasureConfig c;
            c.method = parse_erasure_method(get_or<std::string>(e, "method", "esd", "erasure"));
            c.target = get_or<std::size_t>(e, "target", c.target, "erasure");
            c.anchor = optional_index(e, "anchor", "erasure");
            c.guidance = get_or<double>(e, "eta", c.guidance, "erasure");
            c.steps = get_or<int>(e, "steps", c.steps, "erasure");
            c.lr = get_or<double>(e, "lr", c.lr, "erasure");
            c.batch_size = get_or<std::size_t>(e, "batch_size", c.batch_size, "erasure");
            c.latent_pool = get_or<std::size_t>(e, "latent_pool", c.latent_pool, "erasure");
            c.pool_refresh = get_or<int>(e, "pool_refresh", c.pool_refresh, "erasure");
            c.pool_token = optional_index(e, "pool_token", "erasure");
            if (e.contains("mask")) {
                c.trainable = trainable_from_json(e["mask"], c.target);
            }
            if (e.contains("ridge") && e["ridge"].is_string()) {
                if (e["ridge"] != "inf") {
                    throw ConfigError("[erasure] ridge must be a number or \"inf\"");
                }
                c.ridge = std::numeric_limits<double>::infinity();
            } else {
                c.ridge = get_or<double>(e, "ridge", c.ridge, "erasure");
            }
            c.seed = get_or<std::uint64_t>(e, "seed", c.seed, "erasure");
            cfg.erasures.push_back(c);
        }
    }
    if (doc.contains("probe_gg")) {
        const json& g = doc["probe_gg"];
        check_keys(g, {"enabled", "anchor", "gamma", "steps", "lr", "batch_size", "latent_pool", "mask"}, "probe_gg");
        GradientProbeConfig& c = cfg.gradient_probe;
        cfg.run_gradient_probe = get_or<bool>(g, "enabled", true, "probe_gg");
        c.anchor = optional_index(g, "anchor", "probe_gg");
        c.gamma = get_or<double>(g, "gamma", c.gamma, "probe_gg");
        c.steps = get_or<int>(g, "steps", c.steps, "probe_gg");
        c.lr = get_or<double>(g, "lr", c.lr, "probe_gg");
        c.batch_size = get_or<std::size_t>(g, "batch_size", c.batch_size, "probe_gg");
        c.latent_pool = get_or<std::size_t>(g, "latent_pool", c.latent_pool, "probe_gg");
        if (g.contains("mask")) {
            // "row" is resolved against the erasure target when the probe runs.
            c.trainable = trainable_from_json(g["mask"], kTargetRowPlaceholder);
        }
    }
    if (doc.contains("probe_ip")) {
        const json& p = doc["probe_ip"];
        check_keys(p, {"enabled", "reference_samples", "class_concept", "prior_weight", "prior_size", "steps", "lr",
                       "instance_batch", "prior_batch", "init", "train_mlp", "train_token"},
                   "probe_ip");
        PersonalizationConfig& c = cfg.personalization;
        cfg.run_personalization = get_or<bool>(p, "enabled", true, "probe_ip");
        cfg.reference_samples = get_or<std::size_t>(p, "reference_samples", cfg.reference_samples, "probe_ip");
        cfg.class_concept = optional_index(p, "class_concept", "probe_ip");
        c.prior_weight = get_or<double>(p, "prior_weight", c.prior_weight, "probe_ip");
        c.prior_size = get_or<std::size_t>(p, "prior_size", c.prior_size, "probe_ip");
        c.steps = get_or<int>(p, "steps", c.steps, "probe_ip");
        c.lr = get_or<double>(p, "lr", c.lr, "probe_ip");
        c.instance_batch = get_or<std::size_t>(p, "instance_batch", c.instance_batch, "probe_ip");
        c.prior_batch = get_or<std::size_t>(p, "prior_batch", c.prior_batch, "probe_ip");
        const auto init = get_or<std::string>(p, "init", "random", "probe_ip");
        if (init != "random" && init != "anchor") {
            throw ConfigError("[probe_ip] init must be random or anchor");
        }
        c.init = init == "anchor" ? TokenInit::anchor : TokenInit::random;
        c.train_mlp = get_or<bool>(p, "train_mlp", c.train_mlp, "probe_ip");
        c.train_token = get_or<bool>(p, "train_token", c.train_token, "probe_ip");
    }
    if (doc.contains("eval")) {
        const json& e = doc["eval"];
        check_keys(e, {"samples_per_concept", "metrics", "sweep_steps", "plots"}, "eval");
        cfg.eval.samples_per_concept = get_or<std::size_t>(e, "samples_per_concept", cfg.eval.samples_per_concept, "eval");
        cfg.eval.metrics = get_or<std::vector<std::string>>(e, "metrics", cfg.eval.metrics, "eval");
        cfg.eval.sweep_steps = get_or<std::vector<int>>(e, "sweep_steps", cfg.eval.sweep_steps, "eval");
        cfg.eval.plots = get_or<bool>(e, "plots", cfg.eval.plots, "eval");
    }
    if (doc.contains("seeds")) {
        cfg.seeds = get_or<std::vector<std::uint64_t>>(doc, "seeds", cfg.seeds, "root");
    }
    if (doc.contains("output_dir")) {
        cfg.output_dir = get_or<std::string>(doc, "output_dir", "runs", "root");
    }
    cfg.validate();
    return cfg;
}

ExperimentConfig load_experiment(const std::filesystem::path& toml_path) {
    return experiment_from_json(parse_toml_file(toml_path));
}

json to_json(const ExperimentConfig& config) {
    json erasures = json::array();
    for (const auto& e : config.erasures) {
        erasures.push_back(to_json(e));
    }
    json gg = to_json(config.gradient_probe);
    gg.erase("target");
    gg.erase("seed");
    gg["enabled"] = config.run_gradient_probe;
    json ip = to_json(config.personalization);
    ip.erase("reference_count");
    ip.erase("seed");
    ip.erase("class_concept");
    if (config.class_concept) {
        ip["class_concept"] = *config.class_concept;
    }
    ip["reference_samples"] = config.reference_samples;
    ip["enabled"] = config.run_personalization;
    const DenoiserShape& s = config.shape;
    return {{"universe", to_json(config.universe)},
            {"model",
             {{"data_dim", s.data_dim},
              {"concept_count", s.concept_count},
              {"embedding_dim", s.embedding_dim},
              {"time_dim", s.time_dim},
              {"hidden", s.hidden},
              {"steps", s.steps},
              {"beta_start", s.beta_start},
              {"beta_end", s.beta_end}}},
            {"train", to_json(config.train)},
            {"erasure", erasures},
            {"probe_gg", gg},
            {"probe_ip", ip},
            {"eval",
             {{"samples_per_concept", config.eval.samples_per_concept},
              {"metrics", config.eval.metrics},
              {"sweep_steps", config.eval.sweep_steps},
              {"plots", config.eval.plots}}},
            {"seeds", config.seeds},
            {"output_dir", config.output_dir.string()}};
}

Aggregate aggregate(Vector per_seed) {
    if (per_seed.empty()) {
        throw PreconditionError("aggregate needs at least one value");
    }
    Aggregate a;
    const auto n = static_cast<double>(per_seed.size());
    double sum = 0.0;
    for (double v : per_seed) {
        sum += v;
    }
    a.mean = sum / n;
    if (per_seed.size() >= 2) {
        double ss = 0.0;
        for (double v : per_seed) {
            ss += (v - a.mean) * (v - a.mean);
        }
        a.std = std::sqrt(ss / (n - 1.0));
    }
    a.per_seed = std::move(per_seed);
    return a;
}

json to_json(const Aggregate& a) {
    json j = {{"per_seed", a.per_seed}, {"mean", a.mean}};
    if (a.std) {
        j["std"] = *a.std;
    }
    return j;
}

Aggregate aggregate_from_json(const json& value) {
    if (!value.is_object() || !value.contains("mean")) {
        throw FormatError("aggregate must be an object with a mean");
    }
    const Vector per_seed = value.contains("per_seed") ? value["per_seed"].get<Vector>() : Vector{};
    if (value.contains("std") && per_seed.size() < 2) {
        throw FormatError("a standard deviation is reported without its per-seed values");
    }
    if (per_seed.empty()) {
        throw FormatError("a mean is reported without its per-seed values");
    }
    Aggregate a = aggregate(per_seed);
    return a;
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) {
    auto mix = [](std::uint64_t z) {
        z += 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    };
    return mix(seed ^ mix(tag));
}

std::vector<Matrix> reference_samples(const Checkpoint& original, const ConceptUniverse& universe,
                                      std::size_t samples, std::uint64_t seed) {
    std::vector<Matrix> out;
    for (std::size_t c = 0; c < universe.size(); ++c) {
        const std::uint64_t s = derive_seed(seed, 1000 + c);
        if (c < original.model.concept_count() || original.sampling_tokens.contains(c)) {
            out.push_back(sample(original.model, original.token_for(c), samples, s));
        } else {
            out.push_back(sample_concept(universe, c, samples, s));
        }
    }
    return out;
}

StageSample evaluate_stage(const Checkpoint& model, const ConceptUniverse& universe,
                           const std::vector<Matrix>& reference, std::size_t samples, std::uint64_t seed) {
    if (reference.size() != universe.size()) {
        throw PreconditionError("need one reference sample set per concept");
    }
    StageSample out;
    for (std::size_t c = 0; c < universe.size(); ++c) {
        if (c >= model.model.concept_count() && !model.sampling_tokens.contains(c)) {
            throw PreconditionError("model has no token for concept " + std::to_string(c));
        }
        const Matrix xs = sample(model.model, model.token_for(c), samples, derive_seed(seed, c));
        out.accuracy.push_back(100.0 * accuracy(universe, xs, c));
        out.alignment.push_back(alignment_score(universe, xs, c).calibrated);
        out.energy.push_back(energy_distance(xs, reference[c]));
    }
    return out;
}

const StageReport& EvaluationReport::stage(std::string_view name) const {
    for (const auto& s : stages) {
        if (s.name == name) {
            return s;
        }
    }
    throw PreconditionError("report has no stage '" + std::string(name) + "'");
}

namespace {

double untargeted_mean(const Vector& acc, std::size_t target) {
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t c = 0; c < acc.size(); ++c) {
        if (c != target) {
            sum += acc[c];
            ++n;
        }
    }
    return n == 0 ? 0.0 : sum / static_cast<double>(n);
}

} // namespace

EvaluationReport build_report(std::size_t target, std::vector<std::uint64_t> seeds, std::size_t samples,
                              const std::vector<std::string>& stage_names,
                              const std::vector<std::vector<StageSample>>& per_seed,
                              const std::vector<std::vector<ParamDelta>>& deltas) {
    if (per_seed.size() != seeds.size() || deltas.size() != seeds.size() || seeds.empty()) {
        throw PreconditionError("one evaluation row per seed is required");
    }
    EvaluationReport report;
    report.target = target;
    report.seeds = std::move(seeds);
    report.samples_per_concept = samples;
    const std::size_t concepts = per_seed[0][0].accuracy.size();
    for (std::size_t k = 0; k < stage_names.size(); ++k) {
        StageReport st;
        st.name = stage_names[k];
        for (std::size_t c = 0; c < concepts; ++c) {
            Vector acc;
            Vector align;
            Vector energy;
            for (const auto& row : per_seed) {
                acc.push_back(row.at(k).accuracy.at(c));
                align.push_back(row.at(k).alignment.at(c));
                energy.push_back(row.at(k).energy.at(c));
            }
            st.accuracy.push_back(aggregate(acc));
            st.alignment.push_back(aggregate(align));
            st.energy.push_back(aggregate(energy));
        }
        Vector untargeted;
        Vector drop;
        for (const auto& row : per_seed) {
            const double u = untargeted_mean(row.at(k).accuracy, target);
            untargeted.push_back(u);
            drop.push_back(untargeted_drop(untargeted_mean(row.at(0).accuracy, target), u));
        }
        st.untargeted = aggregate(untargeted);
        st.untargeted_drop = aggregate(drop);
        if (k > 0) {
            for (const auto& row : deltas) {
                st.deltas.push_back(row.at(k));
            }
        }
        report.stages.push_back(std::move(st));
    }
    return report;
}

json to_json(const EvaluationReport& report) {
    json stages = json::array();
    for (const auto& st : report.stages) {
        json concepts = json::array();
        for (std::size_t c = 0; c < st.accuracy.size(); ++c) {
            concepts.push_back({{"concept", c},
                                {"accuracy", to_json(st.accuracy[c])},
                                {"alignment", to_json(st.alignment[c])},
                                {"energy_to_original", to_json(st.energy[c])}});
        }
        json deltas = json::array();
        for (const auto& d : st.deltas) {
            deltas.push_back(to_json(d));
        }
        stages.push_back({{"name", st.name},
                          {"concepts", concepts},
                          {"untargeted_accuracy", to_json(st.untargeted)},
                          {"untargeted_drop", to_json(st.untargeted_drop)},
                          {"param_delta", deltas}});
    }
    return {{"target", report.target},
            {"seeds", report.seeds},
            {"samples_per_concept", report.samples_per_concept},
            {"stages", stages}};
}

EvaluationReport report_from_json(const json& doc) {
    try {
        EvaluationReport r;
        r.target = doc.at("target").get<std::size_t>();
        r.seeds = doc.at("seeds").get<std::vector<std::uint64_t>>();
        r.samples_per_concept = doc.at("samples_per_concept").get<std::size_t>();
        for (const json& sj : doc.at("stages")) {
            StageReport st;
            st.name = sj.at("name").get<std::string>();
            for (const json& cj : sj.at("concepts")) {
                st.accuracy.push_back(aggregate_from_json(cj.at("accuracy")));
                st.alignment.push_back(aggregate_from_json(cj.at("alignment")));
                st.energy.push_back(aggregate_from_json(cj.at("energy_to_original")));
            }
            st.untargeted = aggregate_from_json(sj.at("untargeted_accuracy"));
            st.untargeted_drop = aggregate_from_json(sj.at("untargeted_drop"));
            for (const json& dj : sj.at("param_delta")) {
                ParamDelta d;
                d.fraction_updated = dj.at("fraction_updated").get<double>();
                d.mean_abs_change = dj.at("mean_abs_change").get<double>();
                d.relative_frobenius_change = dj.at("relative_frobenius_change").get<double>();
                d.threshold = dj.at("threshold").get<double>();
                st.deltas.push_back(d);
            }
            r.stages.push_back(std::move(st));
        }
        return r;
    } catch (const json::exception& e) {
        throw FormatError(std::string("malformed evaluation report: ") + e.what());
    }
}

std::string report_csv(const EvaluationReport& report) {
    std::ostringstream out;
    out << "stage,concept,metric,mean,std";
    for (auto s : report.seeds) {
        out << ",seed_" << s;
    }
    out << "\n";
    auto row = [&](const std::string& stage, const std::string& concept_label, const char* metric,
                   const Aggregate& a) {
        out << stage << "," << concept_label << "," << metric << "," << fmt("%.6g", a.mean) << ","
            << (a.std ? fmt("%.6g", *a.std) : "");
        for (double v : a.per_seed) {
            out << "," << fmt("%.6g", v);
        }
        out << "\n";
    };
    for (const auto& st : report.stages) {
        for (std::size_t c = 0; c < st.accuracy.size(); ++c) {
            row(st.name, std::to_string(c), "accuracy", st.accuracy[c]);
            row(st.name, std::to_string(c), "alignment", st.alignment[c]);
            row(st.name, std::to_string(c), "energy_to_original", st.energy[c]);
        }
        row(st.name, "untargeted", "accuracy", st.untargeted);
        row(st.name, "untargeted", "drop", st.untargeted_drop);
    }
    return out.str();
}

std::string format_cell(double erased, double reactivated) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.1f / %.1f", erased, reactivated);
    return buf;
}

double untargeted_drop(double original, double erased) {
    return original - erased;
}

namespace {

std::string mean_std(const Aggregate& a) {
    return a.std ? fmt("%.1f", a.mean) + " +- " + fmt("%.1f", *a.std) : fmt("%.1f", a.mean);
}

std::string pad(std::string s, std::size_t width) {
    if (s.size() < width) {
        s.insert(0, width - s.size(), ' ');
    }
    return s;
}

} // namespace

std::string report_table(const EvaluationReport& report) {
    if (report.stages.empty()) {
        return "";
    }
    std::vector<std::string> header{"concept", report.stages[0].name};
    if (report.stages.size() == 2) {
        header.push_back(report.stages[1].name);
    }
    for (std::size_t k = 2; k < report.stages.size(); ++k) {
        header.push_back(report.stages[1].name + " / " + report.stages[k].name);
    }
    std::vector<std::vector<std::string>> rows;
    const std::size_t concepts = report.stages[0].accuracy.size();
    auto cells = [&](auto&& pick) {
        std::vector<std::string> r;
        r.push_back(mean_std(pick(report.stages[0])));
        if (report.stages.size() == 2) {
            r.push_back(mean_std(pick(report.stages[1])));
        }
        for (std::size_t k = 2; k < report.stages.size(); ++k) {
            r.push_back(format_cell(pick(report.stages[1]).mean, pick(report.stages[k]).mean));
        }
        return r;
    };
    for (std::size_t c = 0; c < concepts; ++c) {
        auto r = cells([&](const StageReport& s) -> const Aggregate& { return s.accuracy[c]; });
        r.insert(r.begin(), std::to_string(c) + (c == report.target ? " (target)" : ""));
        rows.push_back(std::move(r));
    }
    auto u = cells([](const StageReport& s) -> const Aggregate& { return s.untargeted; });
    u.insert(u.begin(), "untargeted");
    rows.push_back(std::move(u));
    auto d = cells([](const StageReport& s) -> const Aggregate& { return s.untargeted_drop; });
    d.insert(d.begin(), "drop");
    rows.push_back(std::move(d));

    std::vector<std::size_t> width(header.size(), 0);
    for (std::size_t i = 0; i < header.size(); ++i) {
        width[i] = header[i].size();
        for (const auto& r : rows) {
            width[i] = std::max(width[i], r[i].size());
        }
    }
    std::ostringstream out;
    out << "accuracy (%) over " << report.seeds.size() << " seed(s), " << report.samples_per_concept
        << " samples per concept\n";
    for (std::size_t i = 0; i < header.size(); ++i) {
        out << (i ? "  " : "") << pad(header[i], width[i]);
    }
    out << "\n";
    for (const auto& r : rows) {
        for (std::size_t i = 0; i < r.size(); ++i) {
            out << (i ? "  " : "") << pad(r[i], width[i]);
        }
        out << "\n";
    }
    return out.str();
}

std::vector<SweepRow> run_sweep(const ConditionalDenoiser& original, const ConditionalDenoiser& erased,
                                const ConditionalDenoiser& guide, const GradientProbeConfig& probe,
                                const std::vector<int>& steps, const ConceptUniverse& universe, std::size_t samples,
                                std::uint64_t seed) {
    const std::size_t target = probe.target;
    auto accuracies = [&](const ConditionalDenoiser& m) {
        Vector acc;
        for (std::size_t c = 0; c < universe.size(); ++c) {
            acc.push_back(100.0 * accuracy(universe, sample(m, c, samples, derive_seed(seed, c)), c));
        }
        return acc;
    };
    const double original_untargeted = untargeted_mean(accuracies(original), target);
    std::vector<SweepRow> rows;
    for (int s : steps) {
        GradientProbeConfig cfg = probe;
        cfg.steps = s;
        const ProbeOutcome out = probe_gradient_guided(erased, guide, cfg);
        const Vector acc = accuracies(out.model);
        rows.push_back({s, acc[target], untargeted_drop(original_untargeted, untargeted_mean(acc, target)), out.delta});
    }
    return rows;
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
    std::ostringstream out;
    out << kSweepHeader << "\n";
    for (const auto& r : rows) {
        out << r.steps << "," << fmt("%.4f", r.target_acc) << "," << fmt("%.4f", r.untargeted_drop) << ","
            << fmt("%.6e", r.delta.fraction_updated) << "," << fmt("%.6e", r.delta.mean_abs_change) << "\n";
    }
    return out.str();
}

std::string scatter_svg(const ConceptUniverse& universe, const Matrix& samples, std::string_view title) {
    static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"};
    const double size = 480.0;
    const double margin = 30.0;
    double lo_x = 1e300, hi_x = -1e300, lo_y = 1e300, hi_y = -1e300;
    auto extend = [&](double x, double y) {
        lo_x = std::min(lo_x, x);
        hi_x = std::max(hi_x, x);
        lo_y = std::min(lo_y, y);
        hi_y = std::max(hi_y, y);
    };
    for (const auto& comp : universe.components()) {
        extend(comp.mean[0] - 1.0, comp.mean[1] - 1.0);
        extend(comp.mean[0] + 1.0, comp.mean[1] + 1.0);
    }
    for (std::size_t i = 0; i < samples.rows(); ++i) {
        if (std::isfinite(samples(i, 0)) && std::isfinite(samples(i, 1))) {
            extend(samples(i, 0), samples(i, 1));
        }
    }
    const double span = std::max(hi_x - lo_x, hi_y - lo_y);
    const double scale = (size - 2 * margin) / span;
    auto px = [&](double x) { return margin + (x - lo_x) * scale; };
    auto py = [&](double y) { return size - margin - (y - lo_y) * scale; };

    std::ostringstream out;
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size << "\" height=\"" << size
        << "\" viewBox=\"0 0 " << size << " " << size << "\">\n";
    out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    out << "<text x=\"" << margin << "\" y=\"20\" font-family=\"sans-serif\" font-size=\"13\">" << title
        << "</text>\n";
    out << "<rect x=\"" << margin << "\" y=\"" << margin << "\" width=\"" << size - 2 * margin << "\" height=\""
        << size - 2 * margin << "\" fill=\"none\" stroke=\"#999\"/>\n";
    for (std::size_t i = 0; i < samples.rows(); ++i) {
        if (!std::isfinite(samples(i, 0)) || !std::isfinite(samples(i, 1))) {
            continue;
        }
        const std::size_t label = classify(universe, samples.row(i));
        out << "<circle cx=\"" << fmt("%.2f", px(samples(i, 0))) << "\" cy=\"" << fmt("%.2f", py(samples(i, 1)))
            << "\" r=\"1.6\" fill=\"" << palette[label % 7] << "\" fill-opacity=\"0.6\"/>\n";
    }
    for (std::size_t c = 0; c < universe.size(); ++c) {
        const double x = px(universe.component(c).mean[0]);
        const double y = py(universe.component(c).mean[1]);
        out << "<path d=\"M" << fmt("%.2f", x - 6) << " " << fmt("%.2f", y) << "h12M" << fmt("%.2f", x) << " "
            << fmt("%.2f", y - 6) << "v12\" stroke=\"black\" stroke-width=\"2\"/>\n";
        out << "<text x=\"" << fmt("%.2f", x + 8) << "\" y=\"" << fmt("%.2f", y - 8)
            << "\" font-family=\"sans-serif\" font-size=\"11\">" << c << "</text>\n";
    }
    out << "</svg>\n";
    return out.str();
}

SdeSpec sde_spec_from_json(const json& doc) {
    check_keys(doc, {"dim", "drift", "curvature", "sign", "noise1", "noise2", "trace1", "trace2", "initial", "horizon",
                     "dt", "trials", "seed", "noise_substeps", "save_every", "bound"},
               "sde");
    SdeSpec spec;
    spec.dim = get_or<std::size_t>(doc, "dim", spec.dim, "sde");
    spec.sign = parse_drift_sign(get_or<std::string>(doc, "sign", "descent", "sde"));
    try {
        if (doc.contains("drift") == doc.contains("curvature")) {
            throw ConfigError("[sde] give exactly one of drift or curvature");
        }
        if (doc.contains("drift")) {
            const auto rows = doc.at("drift").get<std::vector<Vector>>();
            spec.dim = rows.size();
            spec.drift = Matrix(rows.size(), rows.size());
            for (std::size_t i = 0; i < rows.size(); ++i) {
                if (rows[i].size() != rows.size()) {
                    throw ConfigError("[sde] drift must be square");
                }
                std::copy(rows[i].begin(), rows[i].end(), spec.drift.row(i).begin());
            }
        } else {
            const double a = get_or<double>(doc, "curvature", 1.0, "sde");
            spec.drift = Matrix(spec.dim, spec.dim);
            for (std::size_t i = 0; i < spec.dim; ++i) {
                spec.drift(i, i) = a;
            }
        }
        for (int which = 1; which <= 2; ++which) {
            const std::string diag = "noise" + std::to_string(which);
            const std::string tr = "trace" + std::to_string(which);
            Vector& noise = which == 1 ? spec.noise1 : spec.noise2;
            if (doc.contains(diag) == doc.contains(tr)) {
                throw ConfigError("[sde] give exactly one of " + diag + " or " + tr);
            }
            if (doc.contains(diag)) {
                noise = doc.at(diag).get<Vector>();
            } else {
                noise.assign(spec.dim, get_or<double>(doc, tr.c_str(), 0.0, "sde") / static_cast<double>(spec.dim));
            }
        }
        if (doc.contains("initial")) {
            spec.initial = doc.at("initial").get<Vector>();
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("[sde] ") + e.what());
    }
    spec.horizon = get_or<double>(doc, "horizon", spec.horizon, "sde");
    spec.dt = get_or<double>(doc, "dt", spec.dt, "sde");
    spec.trials = get_or<std::size_t>(doc, "trials", spec.trials, "sde");
    spec.seed = get_or<std::uint64_t>(doc, "seed", spec.seed, "sde");
    spec.noise_substeps = get_or<int>(doc, "noise_substeps", spec.noise_substeps, "sde");
    spec.save_every = get_or<int>(doc, "save_every", spec.save_every, "sde");
    try {
        spec.validate();
    } catch (const Error& e) {
        throw ConfigError(std::string("[sde] ") + e.what());
    }
    return spec;
}

json to_json(const SdeSpec& spec) {
    json drift = json::array();
    for (std::size_t i = 0; i < spec.drift.rows(); ++i) {
        const auto row = spec.drift.row(i);
        drift.push_back(Vector(row.begin(), row.end()));
    }
    json j = {{"dim", spec.dim},
              {"drift", drift},
              {"sign", to_string(spec.sign)},
              {"noise1", spec.noise1},
              {"noise2", spec.noise2},
              {"horizon", spec.horizon},
              {"dt", spec.dt},
              {"trials", spec.trials},
              {"seed", spec.seed},
              {"noise_substeps", spec.noise_substeps},
              {"save_every", spec.save_every}};
    if (!spec.initial.empty()) {
        j["initial"] = spec.initial;
    }
    return j;
}

json to_json(const BoundReport& r) {
    return {{"bound_kind", to_string(r.kind)},
            {"empirical", r.empirical},
            {"std_error", r.std_error},
            {"bound", r.bound},
            {"margin", r.margin},
            {"satisfied", r.satisfied},
            {"lipschitz", r.lipschitz},
            {"mu", r.mu},
            {"trace1", r.trace1},
            {"trace2", r.trace2}};
}

std::string trace_csv(const DeviationTrace& trace) {
    std::ostringstream out;
    out << "t,mean_sq,std_error\n";
    for (std::size_t i = 0; i < trace.times.size(); ++i) {
        out << fmt("%.10g", trace.times[i]) << "," << fmt("%.10g", trace.mean_sq[i]) << ","
            << fmt("%.10g", trace.std_error[i]) << "\n";
    }
    return out.str();
}

ParamDelta shared_param_delta(const ConditionalDenoiser& a, const ConditionalDenoiser& b) {
    if (!a.compatible_with(b)) {
        throw ArchitectureError("checkpoints have different architectures");
    }
    const Vector pa = a.parameters();
    const Vector pb = b.parameters();
    const std::size_t n = std::min(pa.size(), pb.size());
    return param_delta(std::span<const double>(pa.data(), n), std::span<const double>(pb.data(), n));
}

namespace {

struct Timer {
    std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    }
};

json sidecar(const std::string& stage, const json& config, const ParamDelta& delta, const Vector& trace,
             std::optional<std::size_t> token, const Provenance& provenance) {
    json j = {{"stage", stage},
              {"config", config},
              {"param_delta", to_json(delta)},
              {"loss_trace", trace},
              {"checkpoint_id", provenance.id},
              {"parent", provenance.parent}};
    if (token) {
        j["token"] = *token;
    }
    return j;
}

std::string erasure_name(const ErasureConfig& e) {
    return std::string(to_string(e.method)) + "-c" + std::to_string(e.target);
}

} // namespace

ProtocolResult run_protocol(const ExperimentConfig& config, bool verbose) {
    config.validate();
    auto log = [&](const std::string& msg) {
        if (verbose) {
            std::cerr << msg << "\n";
        }
    };
    json timings = json::object();
    const std::filesystem::path out = config.output_dir;
    const std::size_t n = config.eval.samples_per_concept;

    Timer t_train;
    log("training original model (seed " + std::to_string(config.train.seed) + ")");
    const FineTuneResult trained =
        train(ConditionalDenoiser::create(config.shape, config.train.seed), config.universe, config.train);
    const json train_cfg = {{"model", to_json(config)["model"]},
                            {"train", to_json(config.train)},
                            {"universe", to_json(config.universe)}};
    ProtocolResult result{Checkpoint{trained.model, root_provenance("train", config.train.seed, train_cfg), {}}, {}};
    const Checkpoint& original = result.original;
    save_checkpoint(out / "original.ckpt.json", original);
    write_json(out / "original.sidecar.json",
               {{"stage", "train"},
                {"config", train_cfg},
                {"loss_trace", trained.loss_trace},
                {"running_loss", running_loss(trained.loss_trace)},
                {"checkpoint_id", original.provenance.id}});
    timings["train"] = t_train.seconds();

    for (const ErasureConfig& base : config.erasures) {
        const std::string name = erasure_name(base);
        const std::filesystem::path dir = out / name;
        std::vector<std::string> stages{"original", "erased"};
        if (config.run_gradient_probe) {
            stages.push_back("reactivated_gg");
        }
        if (config.run_personalization) {
            stages.push_back("reactivated_ip");
        }
        std::vector<std::vector<StageSample>> per_seed;
        std::vector<std::vector<ParamDelta>> deltas;
        for (std::size_t si = 0; si < config.seeds.size(); ++si) {
            const std::uint64_t seed = config.seeds[si];
            const std::filesystem::path sdir = dir / ("seed-" + std::to_string(seed));
            Timer t_seed;
            std::vector<Checkpoint> ckpts{original};
            std::vector<ParamDelta> stage_deltas{ParamDelta{}};

            ErasureConfig ec = base;
            ec.seed = seed;
            log(name + " seed " + std::to_string(seed) + ": erasing");
            const ErasureOutcome erased = erase(original.model, ec);
            Checkpoint erased_ckpt{erased.model,
                                   child_provenance(original.provenance, "erase-" + std::string(to_string(ec.method)),
                                                    seed, to_json(ec)),
                                   {}};
            save_checkpoint(sdir / "erased.ckpt.json", erased_ckpt);
            write_json(sdir / "erased.sidecar.json",
                       sidecar("erase", to_json(ec), erased.delta, erased.loss_trace, std::nullopt,
                               erased_ckpt.provenance));
            ckpts.push_back(erased_ckpt);
            stage_deltas.push_back(erased.delta);

            if (config.run_gradient_probe) {
                GradientProbeConfig gc = config.gradient_probe;
                gc.target = ec.target;
                gc.seed = seed;
                if (gc.trainable) {
                    gc.trainable = resolve_target_row(*gc.trainable, ec.target);
                }
                log(name + " seed " + std::to_string(seed) + ": gradient-guided probe");
                const ProbeOutcome gg = probe_gradient_guided(erased.model, original.model, gc);
                Checkpoint ck{gg.model, child_provenance(erased_ckpt.provenance, "probe-gg", seed, to_json(gc)), {}};
                save_checkpoint(sdir / "reactivated_gg.ckpt.json", ck);
                write_json(sdir / "reactivated_gg.sidecar.json",
                           sidecar("probe-gg", to_json(gc), gg.delta, gg.loss_trace, std::nullopt, ck.provenance));
                ckpts.push_back(ck);
                stage_deltas.push_back(gg.delta);
            }
            if (config.run_personalization) {
                PersonalizationConfig pc = config.personalization;
                pc.reference =
                    sample_concept(config.universe, ec.target, config.reference_samples, derive_seed(seed, 0x1f));
                pc.class_concept = config.class_concept.value_or((ec.target + 1) % config.shape.concept_count);
                pc.seed = seed;
                log(name + " seed " + std::to_string(seed) + ": instance-personalization probe");
                const ProbeOutcome ip = probe_instance_personalization(erased.model, pc);
                Checkpoint ck{ip.model, child_provenance(erased_ckpt.provenance, "probe-ip", seed, to_json(pc)),
                              {{ec.target, *ip.token}}};
                save_checkpoint(sdir / "reactivated_ip.ckpt.json", ck);
                write_json(sdir / "reactivated_ip.sidecar.json",
                           sidecar("probe-ip", to_json(pc), ip.delta, ip.loss_trace, ip.token, ck.provenance));
                ckpts.push_back(ck);
                stage_deltas.push_back(ip.delta);
            }

            log(name + " seed " + std::to_string(seed) + ": evaluating");
            const auto reference = reference_samples(original, config.universe, n, derive_seed(seed, 1));
            std::vector<StageSample> row;
            for (std::size_t k = 0; k < ckpts.size(); ++k) {
                row.push_back(evaluate_stage(ckpts[k], config.universe, reference, n, derive_seed(seed, 2)));
                if (config.eval.plots && si == 0) {
                    const Matrix xs = sample(ckpts[k].model, ckpts[k].token_for(ec.target), n,
                                             derive_seed(derive_seed(seed, 2), ec.target));
                    write_text(dir / ("plot-" + stages[k] + ".svg"),
                               scatter_svg(config.universe, xs,
                                           stages[k] + ": concept " + std::to_string(ec.target) + ", seed " +
                                               std::to_string(seed)));
                }
            }
            per_seed.push_back(std::move(row));
            deltas.push_back(std::move(stage_deltas));

            if (config.run_gradient_probe && !config.eval.sweep_steps.empty()) {
                GradientProbeConfig gc = config.gradient_probe;
                gc.target = ec.target;
                gc.seed = seed;
                if (gc.trainable) {
                    gc.trainable = resolve_target_row(*gc.trainable, ec.target);
                }
                log(name + " seed " + std::to_string(seed) + ": step sweep");
                const auto rows = run_sweep(original.model, erased.model, original.model, gc, config.eval.sweep_steps,
                                            config.universe, n, derive_seed(seed, 3));
                write_text(sdir / "sweep.csv", sweep_csv(rows));
            }
            timings[name]["seed-" + std::to_string(seed)] = t_seed.seconds();
        }
        EvaluationReport report = build_report(base.target, config.seeds, n, stages, per_seed, deltas);
        write_json(dir / "report.json", to_json(report));
        write_text(dir / "report.csv", report_csv(report));
        write_text(dir / "table.txt", report_table(report));
        log(report_table(report));
        result.reports.push_back(std::move(report));
    }
    write_json(out / "config.resolved.json", to_json(config));
    // Wall-clock times vary between runs; they are kept apart from the deterministic artifacts.
    write_json(out / "timings.json", timings);
    return result;
}

} // namespace eralab
