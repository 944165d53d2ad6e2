#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>

#include "doctest.h"
#include "json.hpp"

#include "eralab/checkpoint.hpp"
#include "eralab/errors.hpp"
#include "eralab/pipeline.hpp"
#include "eralab/toml.hpp"

using namespace eralab;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

DenoiserShape small_shape() {
    DenoiserShape s;
    s.hidden = {32, 32};
    return s;
}

const Checkpoint& trained() {
    static const Checkpoint ck = [] {
        TrainConfig cfg;
        cfg.steps = 1500;
        cfg.seed = 12;
        const auto m = train(ConditionalDenoiser::create(small_shape(), 12), ConceptUniverse::reference(), cfg).model;
        return Checkpoint{m, root_provenance("train", 12, json{{"steps", 1500}}), {}};
    }();
    return ck;
}

fs::path scratch_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("eralab-test-" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

bool has_substring(const std::string& haystack, const std::string& needle) {
    return haystack.find(needle) != std::string::npos;
}

} // namespace

TEST_CASE("checkpoint: round trip is bitwise exact") {
    ConditionalDenoiser m = ConditionalDenoiser::create(DenoiserShape{}, 3);
    Rng rng(1);
    Vector params = m.parameters();
    for (double& v : params) {
        v = rng.normal() * 1e-3 + 1.0 / 3.0; // values without short decimal forms
    }
    m.set_parameters(params);
    const std::size_t rare = m.append_token(Vector(m.embedding_dim(), 0.1));
    params = m.parameters();
    const Checkpoint ck{m, root_provenance("train", 3, json{{"a", 1}}), {{0, rare}}};
    const fs::path dir = scratch_dir("ckpt");
    save_checkpoint(dir / "m.ckpt.json", ck);
    const Checkpoint back = load_checkpoint(dir / "m.ckpt.json");
    CHECK(back.model == ck.model);
    CHECK(back.provenance == ck.provenance);
    CHECK(back.sampling_tokens == ck.sampling_tokens);
    CHECK(back.model.parameters() == params);
    save_checkpoint(dir / "again.ckpt.json", back);
    CHECK(slurp(dir / "m.ckpt.json") == slurp(dir / "again.ckpt.json"));
}

TEST_CASE("checkpoint: version and field errors") {
    const Checkpoint ck{ConditionalDenoiser::create(small_shape(), 1), root_provenance("train", 1, json{}), {}};
    json doc = checkpoint_to_json(ck);
    CHECK(doc["version"] == std::string(kCheckpointVersion));

    json bad_version = doc;
    bad_version["version"] = "eralab-ckpt-v0";
    CHECK_THROWS_WITH_AS(checkpoint_from_json(bad_version), doctest::Contains("version"), FormatError);

    json bad_dims = doc;
    for (auto& row : bad_dims["layers"][1]["weight"]) {
        row.push_back(0.0);
    }
    CHECK_THROWS_WITH_AS(checkpoint_from_json(bad_dims), doctest::Contains("layers[1].weight"), FormatError);

    json missing = doc;
    missing.erase("embeddings");
    CHECK_THROWS_WITH_AS(checkpoint_from_json(missing), doctest::Contains("embeddings"), FormatError);

    const fs::path dir = scratch_dir("ckpt-bad");
    write_text(dir / "broken.json", "{ not json");
    CHECK_THROWS_AS(load_checkpoint(dir / "broken.json"), FormatError);
}

TEST_CASE("provenance chain") {
    const Provenance root = root_provenance("train", 1, json{{"x", 1}});
    CHECK(root.parent.empty());
    CHECK(root.generator == std::string(Rng::generator_name));
    const Provenance erased = child_provenance(root, "erase-esd", 2, json{{"y", 2}});
    const Provenance probed = child_provenance(erased, "probe-gg", 2, json{{"z", 3}});
    CHECK(erased.parent == root.id);
    CHECK(probed.parent == erased.id);
    REQUIRE(probed.lineage.size() == 2);
    CHECK(probed.lineage[0] == LineageEntry{root.id, "train"});
    CHECK(probed.lineage[1] == LineageEntry{erased.id, "erase-esd"});
    CHECK(config_hash(json{{"a", 1}, {"b", 2}}) == config_hash(json::parse(R"({"b":2,"a":1})")));
    CHECK(fnv1a_hex("") == "cbf29ce484222325");
}

TEST_CASE("toml: supported subset") {
    const json doc = parse_toml(R"(
# comment
title = "run" # trailing
seeds = [1, 2,
         3]
ratio = 1.5e-3
big = 1_000
neg = -inf
flag = true
path = 'C:\raw'
point = { x = 1, y = -2.5 }
a.b.c = "dotted"

[train]
steps = 10
"quoted key" = "q"

[[erasure]]
method = "esd"
[[erasure]]
method = "projection"
ridge = 0.0
)");
    CHECK(doc["title"] == "run");
    CHECK(doc["seeds"] == json::array({1, 2, 3}));
    CHECK(doc["ratio"].get<double>() == 1.5e-3);
    CHECK(doc["big"] == 1000);
    CHECK(doc["neg"].get<double>() == -std::numeric_limits<double>::infinity());
    CHECK(doc["flag"] == true);
    CHECK(doc["path"] == "C:\\raw");
    CHECK(doc["point"]["y"].get<double>() == -2.5);
    CHECK(doc["a"]["b"]["c"] == "dotted");
    CHECK(doc["train"]["steps"] == 10);
    CHECK(doc["train"]["quoted key"] == "q");
    REQUIRE(doc["erasure"].size() == 2);
    CHECK(doc["erasure"][1]["method"] == "projection");
}

TEST_CASE("toml: errors carry line numbers") {
    CHECK_THROWS_WITH_AS(parse_toml("a = 1\na = 2\n"), doctest::Contains("line 2"), ConfigError);
    CHECK_THROWS_WITH_AS(parse_toml("a = 1\n\nb = \"open\n"), doctest::Contains("line 3"), ConfigError);
    CHECK_THROWS_AS(parse_toml("x = 1 2\n"), ConfigError);
    CHECK_THROWS_AS(parse_toml_file("/nonexistent/eralab.toml"), ConfigError);
}

TEST_CASE("experiment config: defaults, overrides and validation") {
    const ExperimentConfig def = experiment_from_json(json::object());
    CHECK(def.seeds.size() == 5);
    CHECK(def.eval.samples_per_concept == 500);
    CHECK(def.train.steps == 10000);
    CHECK(def.gradient_probe.gamma == 0.8);
    CHECK(def.personalization.steps == 500);
    CHECK(def.reference_samples == 16);

    const ExperimentConfig cfg = experiment_from_json(parse_toml(R"(
seeds = [7]
[model]
hidden = [32, 32]
[train]
steps = 50
[[erasure]]
method = "projection"
target = 2
ridge = 1.0
[probe_gg]
gamma = 0.5
mask = "layer0+row"
[probe_ip]
enabled = false
)"));
    CHECK(cfg.seeds == std::vector<std::uint64_t>{7});
    CHECK(cfg.shape.hidden == std::vector<std::size_t>{32, 32});
    CHECK(cfg.erasures.front().method == ErasureMethod::projection_edit);
    CHECK(cfg.erasures.front().target == 2);
    CHECK(cfg.gradient_probe.gamma == 0.5);
    CHECK_FALSE(cfg.run_personalization);

    // round trip through the resolved form
    const ExperimentConfig again = experiment_from_json(to_json(cfg));
    CHECK(to_json(again) == to_json(cfg));

    CHECK_THROWS_AS(experiment_from_json(parse_toml("[train]\nstepz = 3\n")), ConfigError);
    CHECK_THROWS_AS(experiment_from_json(parse_toml("seeds = []\n")), ConfigError);
    CHECK_THROWS_AS(experiment_from_json(parse_toml("[[erasure]]\ntarget = 4\n")), ConfigError);
    CHECK_THROWS_AS(experiment_from_json(parse_toml("[probe_ip]\nclass_concept = 9\n")), ConfigError);
}

TEST_CASE("masks") {
    CHECK(parse_mask("mlp+row", 2) == TrainableSet::mlp_and_rows({2}));
    CHECK(parse_mask("all", 0) == TrainableSet::everything());
    CHECK(parse_mask("layer0+row", 1) == TrainableSet{false, {0}, false, {1}});
    CHECK_THROWS_AS(parse_mask("everything", 0), ConfigError);
    CHECK(trainable_from_json(to_json(parse_mask("layer0+row", 3)), 0) == parse_mask("layer0+row", 3));
}

TEST_CASE("aggregates: std only with per-seed values") {
    const Aggregate one = aggregate({5.0});
    CHECK(one.mean == 5.0);
    CHECK_FALSE(one.std.has_value());
    const Aggregate three = aggregate({1.0, 2.0, 3.0});
    CHECK(three.mean == 2.0);
    REQUIRE(three.std.has_value());
    CHECK(*three.std == doctest::Approx(1.0));
    CHECK(aggregate_from_json(to_json(three)).per_seed == three.per_seed);
    CHECK_FALSE(to_json(one).contains("std"));
    CHECK_THROWS_AS(aggregate_from_json(json{{"mean", 2.0}, {"std", 0.5}}), FormatError);
    CHECK_THROWS_AS(aggregate_from_json(json{{"mean", 2.0}, {"std", 0.5}, {"per_seed", {2.0}}}), FormatError);
    CHECK_THROWS_AS(aggregate_from_json(json{{"mean", 2.0}}), FormatError);
}

TEST_CASE("report cells and rows") {
    CHECK(format_cell(7.0, 93.5) == "7.0 / 93.5");
    CHECK(untargeted_drop(86.1, 58.8) == doctest::Approx(27.3).epsilon(1e-12));
    CHECK(sweep_csv({}) == std::string(kSweepHeader) + "\n");
    CHECK(std::string(kSweepHeader) == "steps,target_acc,untargeted_drop,fraction_updated,mean_abs_change");
    SweepRow row;
    row.steps = 20;
    row.target_acc = 19.5;
    row.delta.fraction_updated = 1.0;
    row.delta.mean_abs_change = 2.29e-4;
    const std::string csv = sweep_csv({row});
    CHECK(has_substring(csv, "\n20,19.5000,0.0000,1.000000e+00,2.290000e-04\n"));
}

TEST_CASE("evaluation: a model against itself, report round trip") {
    const ConceptUniverse u = ConceptUniverse::reference();
    const Checkpoint& ck = trained();
    const std::size_t n = 300;
    const auto reference = reference_samples(ck, u, n, 1);
    const StageSample s = evaluate_stage(ck, u, reference, n, 2);
    for (std::size_t c = 0; c < 4; ++c) {
        CHECK(s.energy[c] < same_distribution_threshold(u, c, n, 5));
        CHECK(s.accuracy[c] >= 80.0);
    }

    StageSample erased = s;
    erased.accuracy[0] = 5.0;
    erased.accuracy[1] -= 10.0;
    const EvaluationReport rep =
        build_report(0, {1, 2}, n, {"original", "erased"}, {{s, erased}, {s, erased}}, {{{}, {}}, {{}, {}}});
    const StageReport& e = rep.stage("erased");
    CHECK(e.accuracy[0].mean == 5.0);
    CHECK(e.accuracy[0].std.has_value());
    CHECK(e.untargeted_drop.mean == doctest::Approx(10.0 / 3.0));
    const EvaluationReport back = report_from_json(to_json(rep));
    CHECK(to_json(back) == to_json(rep));
    CHECK(report_table(back) == report_table(rep));
    CHECK(has_substring(report_csv(rep), "erased,0,accuracy,5"));
    CHECK_THROWS(rep.stage("nope"));
}

TEST_CASE("sweep with zero steps reproduces the erased model") {
    const ConceptUniverse u = ConceptUniverse::reference();
    const ConditionalDenoiser& m = trained().model;
    ErasureConfig e;
    e.method = ErasureMethod::projection_edit;
    const ConditionalDenoiser erased = erase(m, e).model;
    GradientProbeConfig g;
    g.latent_pool = 32;
    const auto rows = run_sweep(m, erased, m, g, {0}, u, 200, 4);
    REQUIRE(rows.size() == 1);
    CHECK(rows[0].delta == ParamDelta{});
    CHECK(rows[0].target_acc == 100.0 * accuracy(u, sample(erased, 0, 200, derive_seed(4, 0)), 0));
}

TEST_CASE("shared_param_delta ignores appended rows") {
    ConditionalDenoiser a = trained().model;
    ConditionalDenoiser b = a;
    b.append_token(Vector(b.embedding_dim(), 3.0));
    CHECK(shared_param_delta(a, b) == ParamDelta{});
    CHECK(shared_param_delta(b, a) == ParamDelta{});
    CHECK_THROWS_AS(shared_param_delta(a, ConditionalDenoiser::create(DenoiserShape{}, 1)), ArchitectureError);
}

TEST_CASE("sde spec from a config table") {
    const SdeSpec s = sde_spec_from_json(parse_toml(R"(
dim = 2
curvature = 0.5
sign = "descent"
trace1 = 1.0
trace2 = 0.5
horizon = 2.0
dt = 1e-3
trials = 100
)"));
    CHECK(s.drift(0, 0) == 0.5);
    CHECK(s.drift(0, 1) == 0.0);
    CHECK(s.noise1 == Vector{0.5, 0.5});
    CHECK(s.sign == DriftSign::descent);
    CHECK_THROWS_AS(sde_spec_from_json(parse_toml("dim = 2\n")), ConfigError);
    CHECK(has_substring(trace_csv(DeviationTrace{{0.0, 1.0}, {0.0, 0.5}, {0.0, 0.01}}), "t,mean_sq,std_error\n"));
}

TEST_CASE("protocol determinism per (config, seed)") {
    const std::string toml = R"(
seeds = [3]
[model]
hidden = [16, 16]
[train]
steps = 200
[[erasure]]
steps = 10
latent_pool = 32
[probe_gg]
steps = 10
latent_pool = 32
[probe_ip]
steps = 10
prior_size = 16
[eval]
samples_per_concept = 60
sweep_steps = [0, 5]
)";
    const fs::path a = scratch_dir("det-a");
    const fs::path b = scratch_dir("det-b");
    ExperimentConfig cfg = experiment_from_json(parse_toml(toml));
    cfg.output_dir = a;
    const ProtocolResult ra = run_protocol(cfg);
    cfg.output_dir = b;
    const ProtocolResult rb = run_protocol(cfg);
    CHECK(ra.original.model == rb.original.model);

    std::size_t compared = 0;
    for (const auto& entry : fs::recursive_directory_iterator(a)) {
        if (!entry.is_regular_file()) {
            continue;
        }
        const fs::path rel = fs::relative(entry.path(), a);
        // timings and the resolved config (which embeds the output path) legitimately differ
        if (rel.filename() == "timings.json" || rel.filename() == "config.resolved.json") {
            continue;
        }
        REQUIRE(fs::exists(b / rel));
        CHECK_MESSAGE(slurp(entry.path()) == slurp(b / rel), rel.string());
        ++compared;
    }
    CHECK(compared >= 10);

    // every emitted checkpoint traces back to the original
    for (const auto& entry : fs::recursive_directory_iterator(a)) {
        const std::string name = entry.path().filename().string();
        if (name.size() > 10 && name.ends_with(".ckpt.json") && name != "original.ckpt.json") {
            const Checkpoint ck = load_checkpoint(entry.path());
            REQUIRE_FALSE(ck.provenance.lineage.empty());
            CHECK(ck.provenance.lineage.front().id == ra.original.provenance.id);
        }
    }
}

TEST_CASE("shipped reference config matches the built-in defaults") {
    const ExperimentConfig shipped = load_experiment(fs::path(ERALAB_SOURCE_DIR) / "configs" / "reference.toml");
    json a = to_json(shipped);
    json b = to_json(ExperimentConfig{});
    REQUIRE(shipped.gradient_probe.trainable.has_value());
    CHECK(to_json(resolve_target_row(*shipped.gradient_probe.trainable, 0)) == to_json(TrainableSet::mlp_and_rows({0})));
    for (json* j : {&a, &b}) {
        j->erase("output_dir");
        (*j)["probe_gg"].erase("mask");
    }
    CHECK(a.dump() == b.dump());
    CHECK(shipped.output_dir == fs::path("runs/reference"));

    CHECK_NOTHROW(load_experiment(fs::path(ERALAB_SOURCE_DIR) / "configs" / "smoke.toml"));
}
