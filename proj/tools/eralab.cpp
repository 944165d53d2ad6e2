// eralab: command-line front end for training, erasure, probing, evaluation
// and the SDE / ascent checks. Exit codes: 0 ok, 2 usage or config error,
// 3 numeric failure.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "eralab/checkpoint.hpp"
#include "eralab/errors.hpp"
#include "eralab/pipeline.hpp"
#include "eralab/theory.hpp"
#include "eralab/toml.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace eralab;

namespace {

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    bool verbose = false;
};

void add_common(CLI::App* cmd, Common& c, bool out_required = true) {
    cmd->add_option("--config", c.config, "TOML config file");
    cmd->add_option("--seed", c.seed, "random seed");
    auto* out = cmd->add_option("--out", c.out, "output path");
    if (out_required) {
        out->required();
    }
    cmd->add_flag("--verbose,-v", c.verbose, "progress on stderr");
}

ExperimentConfig experiment(const Common& c) {
    return c.config.empty() ? ExperimentConfig{} : load_experiment(c.config);
}

fs::path sidecar_path(const fs::path& ckpt) {
    std::string name = ckpt.filename().string();
    const std::string suffix = ".ckpt.json";
    if (name.size() > suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0) {
        name = name.substr(0, name.size() - suffix.size());
    } else {
        name = ckpt.stem().string();
    }
    return ckpt.parent_path() / (name + ".sidecar.json");
}

fs::path with_extension(const fs::path& p, const std::string& ext) {
    fs::path q = p;
    return q.replace_extension(ext);
}

void print_accuracy_row(const char* label, const ConditionalDenoiser& model, const ConceptUniverse& universe,
                        std::size_t samples, std::uint64_t seed) {
    std::printf("%-12s", label);
    for (std::size_t c = 0; c < universe.size() && c < model.concept_count(); ++c) {
        const double acc = 100.0 * accuracy(universe, sample(model, c, samples, derive_seed(seed, c)), c);
        std::printf("  c%zu %5.1f", c, acc);
    }
    std::printf("\n");
}

std::vector<std::string> split(const std::string& s) {
    std::vector<std::string> parts;
    std::size_t start = 0;
    while (start <= s.size()) {
        const std::size_t end = std::min(s.find(',', start), s.size());
        if (end > start) {
            parts.push_back(s.substr(start, end - start));
        }
        start = end + 1;
    }
    return parts;
}

json ascent_sweep(std::size_t cases, std::uint64_t seed) {
    // Random symmetric PSD curvature with eigenvalues in [0, 4], random e0 and center,
    // eta uniform over the admissible interval.
    Rng rng(seed);
    std::size_t passed = 0;
    double worst = 1e300;
    for (std::size_t i = 0; i < cases; ++i) {
        const std::size_t d = 2 + rng.below(4);
        Matrix b(d, d);
        for (double& v : b.values()) {
            v = rng.normal();
        }
        QuadraticScore score{Matrix(d, d), Vector(d)};
        for (std::size_t r = 0; r < d; ++r) {
            for (std::size_t c = 0; c < d; ++c) {
                double s = 0.0;
                for (std::size_t k = 0; k < d; ++k) {
                    s += b(r, k) * b(c, k);
                }
                score.curvature(r, c) = s / static_cast<double>(d);
            }
        }
        Vector e0(d);
        for (std::size_t k = 0; k < d; ++k) {
            score.center[k] = 3.0 * rng.normal();
            e0[k] = 3.0 * rng.normal();
        }
        const Vector g = score.gradient(e0);
        double le = 0.0;
        for (std::size_t r = 0; r < d; ++r) {
            double row = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
                row += std::abs(score.curvature(r, c));
            }
            le = std::max(le, row);
        }
        const double gnorm = std::sqrt(squared_norm(g));
        double eta = rng.uniform() * 2.0 * gnorm / le;
        if (eta <= 0.0) {
            eta = 1e-6;
        }
        const AscentStep step = ascent_step_check(score, e0, eta);
        passed += step.pass ? 1 : 0;
        worst = std::min(worst, step.gain - step.lower_bound);
    }
    return {{"cases", cases}, {"passed", passed}, {"min_gain_minus_bound", worst}, {"seed", seed}};
}

int run(int argc, char** argv) {
    CLI::App app{"eralab: concept erasure and reactivation laboratory"};
    app.require_subcommand(1);

    // train
    Common train_opts;
    auto* train_cmd = app.add_subcommand("train", "train the original conditional denoiser");
    add_common(train_cmd, train_opts);

    // erase
    Common erase_opts;
    std::string erase_in;
    std::string erase_method;
    std::optional<std::size_t> erase_target;
    std::optional<std::size_t> erase_anchor;
    std::optional<double> erase_eta;
    std::optional<int> erase_steps;
    std::optional<double> erase_lr;
    std::optional<double> erase_ridge;
    std::string erase_mask;
    auto* erase_cmd = app.add_subcommand("erase", "erase a concept from a checkpoint");
    add_common(erase_cmd, erase_opts);
    erase_cmd->add_option("--in", erase_in, "input checkpoint")->required();
    erase_cmd->add_option("--method", erase_method, "esd or projection");
    erase_cmd->add_option("--target", erase_target, "concept to erase");
    erase_cmd->add_option("--anchor", erase_anchor, "anchor token (null token by default)");
    erase_cmd->add_option("--eta", erase_eta, "negative-guidance strength");
    erase_cmd->add_option("--steps", erase_steps, "fine-tune steps");
    erase_cmd->add_option("--lr", erase_lr, "learning rate");
    erase_cmd->add_option("--ridge", erase_ridge, "projection ridge weight");
    erase_cmd->add_option("--mask", erase_mask, "trainable mask, e.g. layer0+row or mlp+row");

    // probe-gg
    Common gg_opts;
    std::string gg_in;
    std::string gg_guiding;
    std::optional<std::size_t> gg_target;
    std::optional<std::size_t> gg_anchor;
    std::optional<double> gg_gamma;
    std::optional<int> gg_steps;
    std::optional<double> gg_lr;
    auto* gg_cmd = app.add_subcommand("probe-gg", "gradient-guided reactivation probe");
    add_common(gg_cmd, gg_opts);
    gg_cmd->add_option("--in", gg_in, "erased checkpoint")->required();
    gg_cmd->add_option("--guiding", gg_guiding, "guiding checkpoint (any compatible model)")->required();
    gg_cmd->add_option("--target", gg_target, "concept to reactivate");
    gg_cmd->add_option("--anchor", gg_anchor, "anchor token (null token by default)");
    gg_cmd->add_option("--gamma", gg_gamma, "guidance strength");
    gg_cmd->add_option("--steps", gg_steps, "fine-tune steps");
    gg_cmd->add_option("--lr", gg_lr, "learning rate");

    // probe-ip
    Common ip_opts;
    std::string ip_in;
    std::optional<std::size_t> ip_target;
    std::optional<std::size_t> ip_class;
    std::optional<std::size_t> ip_refs;
    std::optional<double> ip_prior;
    std::optional<int> ip_steps;
    std::optional<double> ip_lr;
    std::string ip_init;
    auto* ip_cmd = app.add_subcommand("probe-ip", "instance-personalization reactivation probe");
    add_common(ip_cmd, ip_opts);
    ip_cmd->add_option("--in", ip_in, "erased checkpoint")->required();
    ip_cmd->add_option("--target", ip_target, "concept whose reference samples are used");
    ip_cmd->add_option("--class-concept", ip_class, "class concept for prior preservation");
    ip_cmd->add_option("--reference-samples", ip_refs, "number of reference samples");
    ip_cmd->add_option("--prior-weight", ip_prior, "lambda_prior");
    ip_cmd->add_option("--steps", ip_steps, "fine-tune steps");
    ip_cmd->add_option("--lr", ip_lr, "learning rate");
    ip_cmd->add_option("--init", ip_init, "rare-token init: random or anchor");

    // eval
    Common eval_opts;
    std::string eval_models;
    std::string eval_names;
    std::optional<std::size_t> eval_target;
    std::string eval_seeds;
    std::optional<std::size_t> eval_samples;
    std::string eval_plots;
    auto* eval_cmd = app.add_subcommand("eval", "evaluate checkpoints (first one is the original)");
    add_common(eval_cmd, eval_opts);
    eval_cmd->add_option("--models", eval_models, "comma-separated checkpoints: original,erased,reactivated...")
        ->required();
    eval_cmd->add_option("--names", eval_names, "comma-separated stage names");
    eval_cmd->add_option("--target", eval_target, "target concept");
    eval_cmd->add_option("--seeds", eval_seeds, "comma-separated sampling seeds");
    eval_cmd->add_option("--samples", eval_samples, "samples per concept");
    eval_cmd->add_option("--plots", eval_plots, "directory for SVG scatter plots");

    // sweep
    Common sweep_opts;
    std::string sweep_in;
    std::string sweep_original;
    std::string sweep_guiding;
    std::string sweep_steps = "20,50,200";
    std::optional<std::size_t> sweep_target;
    std::optional<std::size_t> sweep_samples;
    auto* sweep_cmd = app.add_subcommand("sweep", "gradient-guided probe over several step budgets");
    add_common(sweep_cmd, sweep_opts);
    sweep_cmd->add_option("--in", sweep_in, "erased checkpoint")->required();
    sweep_cmd->add_option("--original", sweep_original, "original checkpoint")->required();
    sweep_cmd->add_option("--guiding", sweep_guiding, "guiding checkpoint (original by default)");
    sweep_cmd->add_option("--steps", sweep_steps, "comma-separated step budgets");
    sweep_cmd->add_option("--target", sweep_target, "concept to reactivate");
    sweep_cmd->add_option("--samples", sweep_samples, "samples per concept");

    // sde-verify
    Common sde_opts;
    std::string sde_bound;
    std::string sde_trace;
    auto* sde_cmd = app.add_subcommand("sde-verify", "simulate a coupled SDE pair and check the deviation bound");
    add_common(sde_cmd, sde_opts);
    sde_cmd->add_option("--bound", sde_bound, "smooth or strongly_convex (overrides the spec)");
    sde_cmd->add_option("--trace", sde_trace, "CSV time trace (default: --out with .csv)");

    // ascent-check
    Common asc_opts;
    std::size_t asc_random = 0;
    auto* asc_cmd = app.add_subcommand("ascent-check", "local ascent checks on quadratic scores");
    add_common(asc_cmd, asc_opts, false);
    asc_cmd->add_option("--random", asc_random, "run N randomized one-step checks instead of a config");

    // report
    Common rep_opts;
    std::string rep_in;
    std::string rep_format = "table";
    auto* rep_cmd = app.add_subcommand("report", "render an evaluation report");
    add_common(rep_cmd, rep_opts, false);
    rep_cmd->add_option("--in", rep_in, "report JSON")->required();
    rep_cmd->add_option("--format", rep_format, "table, csv or json");

    // run
    Common run_opts;
    auto* run_cmd = app.add_subcommand("run", "full protocol: train, erase, probe, evaluate");
    add_common(run_cmd, run_opts, false);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    if (*train_cmd) {
        ExperimentConfig cfg = experiment(train_opts);
        if (train_opts.seed) {
            cfg.train.seed = *train_opts.seed;
        }
        const FineTuneResult trained =
            train(ConditionalDenoiser::create(cfg.shape, cfg.train.seed), cfg.universe, cfg.train);
        const json train_cfg = {{"model", to_json(cfg)["model"]},
                                {"train", to_json(cfg.train)},
                                {"universe", to_json(cfg.universe)}};
        const Checkpoint ck{trained.model, root_provenance("train", cfg.train.seed, train_cfg), {}};
        save_checkpoint(train_opts.out, ck);
        write_json(sidecar_path(train_opts.out), {{"stage", "train"},
                                                  {"config", train_cfg},
                                                  {"loss_trace", trained.loss_trace},
                                                  {"running_loss", running_loss(trained.loss_trace)},
                                                  {"checkpoint_id", ck.provenance.id}});
        std::printf("running loss %.4f\n", running_loss(trained.loss_trace));
        print_accuracy_row("original", trained.model, cfg.universe, cfg.eval.samples_per_concept,
                           derive_seed(cfg.train.seed, 2));
        return 0;
    }

    if (*erase_cmd) {
        const ExperimentConfig cfg = experiment(erase_opts);
        const Checkpoint in = load_checkpoint(erase_in);
        ErasureConfig ec = cfg.erasures.front();
        if (!erase_method.empty()) {
            ec.method = parse_erasure_method(erase_method);
        }
        if (erase_target) {
            ec.target = *erase_target;
        }
        if (erase_anchor) {
            ec.anchor = *erase_anchor;
        }
        if (erase_eta) {
            ec.guidance = *erase_eta;
        }
        if (erase_steps) {
            ec.steps = *erase_steps;
        }
        if (erase_lr) {
            ec.lr = *erase_lr;
        }
        if (erase_ridge) {
            ec.ridge = *erase_ridge;
        }
        if (!erase_mask.empty()) {
            ec.trainable = parse_mask(erase_mask, ec.target);
        }
        if (erase_opts.seed) {
            ec.seed = *erase_opts.seed;
        }
        const ErasureOutcome out = erase(in.model, ec);
        const Checkpoint ck{out.model,
                            child_provenance(in.provenance, "erase-" + std::string(to_string(ec.method)), ec.seed,
                                             to_json(ec)),
                            {}};
        save_checkpoint(erase_opts.out, ck);
        write_json(sidecar_path(erase_opts.out), {{"stage", "erase"},
                                                  {"config", to_json(ec)},
                                                  {"param_delta", to_json(out.delta)},
                                                  {"loss_trace", out.loss_trace},
                                                  {"checkpoint_id", ck.provenance.id},
                                                  {"parent", ck.provenance.parent}});
        if (erase_opts.verbose) {
            print_accuracy_row("erased", out.model, cfg.universe, cfg.eval.samples_per_concept,
                               derive_seed(ec.seed, 2));
        }
        return 0;
    }

    if (*gg_cmd) {
        const ExperimentConfig cfg = experiment(gg_opts);
        const Checkpoint in = load_checkpoint(gg_in);
        const Checkpoint guide = load_checkpoint(gg_guiding);
        GradientProbeConfig gc = cfg.gradient_probe;
        gc.target = gg_target.value_or(cfg.erasures.front().target);
        if (gg_anchor) {
            gc.anchor = *gg_anchor;
        }
        if (gg_gamma) {
            gc.gamma = *gg_gamma;
        }
        if (gg_steps) {
            gc.steps = *gg_steps;
        }
        if (gg_lr) {
            gc.lr = *gg_lr;
        }
        if (gg_opts.seed) {
            gc.seed = *gg_opts.seed;
        }
        if (gc.trainable) {
            gc.trainable = resolve_target_row(*gc.trainable, gc.target);
        }
        const ProbeOutcome out = probe_gradient_guided(in.model, guide.model, gc);
        const Checkpoint ck{out.model, child_provenance(in.provenance, "probe-gg", gc.seed, to_json(gc)),
                            in.sampling_tokens};
        save_checkpoint(gg_opts.out, ck);
        write_json(sidecar_path(gg_opts.out), {{"stage", "probe-gg"},
                                               {"config", to_json(gc)},
                                               {"guiding_checkpoint", guide.provenance.id},
                                               {"param_delta", to_json(out.delta)},
                                               {"loss_trace", out.loss_trace},
                                               {"checkpoint_id", ck.provenance.id},
                                               {"parent", ck.provenance.parent}});
        if (gg_opts.verbose) {
            print_accuracy_row("reactivated", out.model, cfg.universe, cfg.eval.samples_per_concept,
                               derive_seed(gc.seed, 2));
        }
        return 0;
    }

    if (*ip_cmd) {
        const ExperimentConfig cfg = experiment(ip_opts);
        const Checkpoint in = load_checkpoint(ip_in);
        PersonalizationConfig pc = cfg.personalization;
        const std::size_t target = ip_target.value_or(cfg.erasures.front().target);
        if (target >= cfg.universe.size()) {
            throw ConfigError("--target " + std::to_string(target) + " is not a universe concept");
        }
        const std::uint64_t seed = ip_opts.seed.value_or(0);
        pc.seed = seed;
        pc.reference = sample_concept(cfg.universe, target, ip_refs.value_or(cfg.reference_samples),
                                      derive_seed(seed, 0x1f));
        pc.class_concept = ip_class.value_or(cfg.class_concept.value_or((target + 1) % in.model.concept_count()));
        if (ip_prior) {
            pc.prior_weight = *ip_prior;
        }
        if (ip_steps) {
            pc.steps = *ip_steps;
        }
        if (ip_lr) {
            pc.lr = *ip_lr;
        }
        if (!ip_init.empty()) {
            if (ip_init != "random" && ip_init != "anchor") {
                throw ConfigError("--init must be random or anchor");
            }
            pc.init = ip_init == "anchor" ? TokenInit::anchor : TokenInit::random;
        }
        const ProbeOutcome out = probe_instance_personalization(in.model, pc);
        Checkpoint ck{out.model, child_provenance(in.provenance, "probe-ip", seed, to_json(pc)), in.sampling_tokens};
        ck.sampling_tokens[target] = *out.token;
        save_checkpoint(ip_opts.out, ck);
        write_json(sidecar_path(ip_opts.out), {{"stage", "probe-ip"},
                                               {"config", to_json(pc)},
                                               {"token", *out.token},
                                               {"target", target},
                                               {"param_delta", to_json(out.delta)},
                                               {"loss_trace", out.loss_trace},
                                               {"checkpoint_id", ck.provenance.id},
                                               {"parent", ck.provenance.parent}});
        return 0;
    }

    if (*eval_cmd) {
        const ExperimentConfig cfg = experiment(eval_opts);
        const auto paths = split(eval_models);
        if (paths.empty()) {
            throw ConfigError("--models needs at least one checkpoint");
        }
        std::vector<std::string> names = split(eval_names);
        if (names.empty()) {
            names.push_back("original");
            if (paths.size() == 2) {
                names.push_back("erased");
            } else if (paths.size() > 2) {
                names.push_back("erased");
                for (std::size_t k = 2; k < paths.size(); ++k) {
                    names.push_back("reactivated" + (paths.size() > 3 ? "_" + std::to_string(k - 1) : ""));
                }
            }
        }
        if (names.size() != paths.size()) {
            throw ConfigError("--names must list one name per model");
        }
        std::vector<Checkpoint> ckpts;
        for (const auto& p : paths) {
            if (!fs::exists(p)) {
                throw ConfigError("missing checkpoint '" + p + "'");
            }
            ckpts.push_back(load_checkpoint(p));
        }
        std::vector<std::uint64_t> seeds;
        for (const auto& s : split(eval_seeds)) {
            seeds.push_back(std::stoull(s));
        }
        if (seeds.empty()) {
            seeds = eval_opts.seed ? std::vector<std::uint64_t>{*eval_opts.seed} : cfg.seeds;
        }
        const std::size_t target = eval_target.value_or(cfg.erasures.front().target);
        const std::size_t n = eval_samples.value_or(cfg.eval.samples_per_concept);
        std::vector<std::vector<StageSample>> per_seed;
        std::vector<std::vector<ParamDelta>> deltas;
        for (std::uint64_t seed : seeds) {
            const auto reference = reference_samples(ckpts[0], cfg.universe, n, derive_seed(seed, 1));
            std::vector<StageSample> row;
            std::vector<ParamDelta> drow;
            for (std::size_t k = 0; k < ckpts.size(); ++k) {
                row.push_back(evaluate_stage(ckpts[k], cfg.universe, reference, n, derive_seed(seed, 2)));
                const std::size_t parent = k <= 1 ? 0 : 1;
                drow.push_back(shared_param_delta(ckpts[parent].model, ckpts[k].model));
            }
            per_seed.push_back(std::move(row));
            deltas.push_back(std::move(drow));
        }
        const EvaluationReport report = build_report(target, seeds, n, names, per_seed, deltas);
        write_json(eval_opts.out, to_json(report));
        write_text(with_extension(eval_opts.out, ".csv"), report_csv(report));
        if (!eval_plots.empty()) {
            for (std::size_t k = 0; k < ckpts.size(); ++k) {
                const Matrix xs = sample(ckpts[k].model, ckpts[k].token_for(target), n,
                                         derive_seed(derive_seed(seeds.front(), 2), target));
                write_text(fs::path(eval_plots) / ("plot-" + names[k] + ".svg"),
                           scatter_svg(cfg.universe, xs, names[k] + ": concept " + std::to_string(target)));
            }
        }
        std::cout << report_table(report);
        return 0;
    }

    if (*sweep_cmd) {
        const ExperimentConfig cfg = experiment(sweep_opts);
        const Checkpoint erased = load_checkpoint(sweep_in);
        const Checkpoint original = load_checkpoint(sweep_original);
        const Checkpoint guide = sweep_guiding.empty() ? original : load_checkpoint(sweep_guiding);
        GradientProbeConfig gc = cfg.gradient_probe;
        gc.target = sweep_target.value_or(cfg.erasures.front().target);
        gc.seed = sweep_opts.seed.value_or(0);
        if (gc.trainable) {
            gc.trainable = resolve_target_row(*gc.trainable, gc.target);
        }
        std::vector<int> steps;
        for (const auto& s : split(sweep_steps)) {
            steps.push_back(std::stoi(s));
        }
        const auto rows = run_sweep(original.model, erased.model, guide.model, gc, steps, cfg.universe,
                                    sweep_samples.value_or(cfg.eval.samples_per_concept), derive_seed(gc.seed, 3));
        const std::string csv = sweep_csv(rows);
        write_text(sweep_opts.out, csv);
        std::cout << csv;
        return 0;
    }

    if (*sde_cmd) {
        if (sde_opts.config.empty()) {
            throw ConfigError("sde-verify needs --config with an SDE spec");
        }
        const json doc = parse_toml_file(sde_opts.config);
        SdeSpec spec = sde_spec_from_json(doc);
        if (sde_opts.seed) {
            spec.seed = *sde_opts.seed;
        }
        std::string bound = sde_bound;
        if (bound.empty()) {
            bound = doc.contains("bound") ? doc["bound"].get<std::string>() : "smooth";
        }
        const BoundKind kind = parse_bound_kind(bound);
        if (kind == BoundKind::strongly_convex && spec.sign != DriftSign::descent) {
            throw ConfigError("the strongly convex bound needs sign = \"descent\"");
        }
        const DeviationTrace trace = simulate_pair(spec);
        const BoundReport report = verify_bound(spec, kind, trace);
        json j = to_json(report);
        j["spec"] = to_json(spec);
        write_json(sde_opts.out, j);
        write_text(sde_trace.empty() ? with_extension(sde_opts.out, ".csv") : fs::path(sde_trace), trace_csv(trace));
        std::printf("empirical %.6g +- %.3g  bound %.6g  %s\n", report.empirical, report.std_error, report.bound,
                    report.satisfied ? "satisfied" : "VIOLATED");
        return 0;
    }

    if (*asc_cmd) {
        json result;
        if (asc_random > 0) {
            result = ascent_sweep(asc_random, asc_opts.seed.value_or(0));
        } else {
            if (asc_opts.config.empty()) {
                throw ConfigError("ascent-check needs --config or --random N");
            }
            const json doc = parse_toml_file(asc_opts.config);
            QuadraticScore score;
            Vector e0;
            try {
                const auto rows = doc.at("curvature").get<std::vector<Vector>>();
                score.curvature = Matrix(rows.size(), rows.size());
                for (std::size_t i = 0; i < rows.size(); ++i) {
                    if (rows[i].size() != rows.size()) {
                        throw ConfigError("curvature must be square");
                    }
                    std::copy(rows[i].begin(), rows[i].end(), score.curvature.row(i).begin());
                }
                score.center = doc.at("center").get<Vector>();
                e0 = doc.at("e0").get<Vector>();
            } catch (const json::exception& e) {
                throw ConfigError(std::string("ascent config: ") + e.what());
            }
            if (doc.contains("direction")) {
                const auto v = doc["direction"].get<Vector>();
                const auto etas = doc.at("etas").get<Vector>();
                const CurvatureAscent r = curvature_ascent_check(score, e0, v, etas);
                result = {{"check", "curvature"},
                          {"gains", r.gains},
                          {"normalized_gain", r.normalized_gain},
                          {"expected", r.expected},
                          {"pass", r.pass}};
            } else {
                const double eta = doc.at("eta").get<double>();
                const AscentStep r = ascent_step_check(score, e0, eta);
                result = {{"check", "step"}, {"gain", r.gain}, {"lower_bound", r.lower_bound}, {"pass", r.pass}};
            }
        }
        if (!asc_opts.out.empty()) {
            write_json(asc_opts.out, result);
        }
        std::cout << result.dump(2) << "\n";
        return 0;
    }

    if (*rep_cmd) {
        const EvaluationReport report = report_from_json(read_json(rep_in));
        std::string text;
        if (rep_format == "table") {
            text = report_table(report);
        } else if (rep_format == "csv") {
            text = report_csv(report);
        } else if (rep_format == "json") {
            text = to_json(report).dump(2) + "\n";
        } else {
            throw ConfigError("--format must be table, csv or json");
        }
        if (!rep_opts.out.empty()) {
            write_text(rep_opts.out, text);
        }
        std::cout << text;
        return 0;
    }

    if (*run_cmd) {
        ExperimentConfig cfg = experiment(run_opts);
        if (!run_opts.out.empty()) {
            cfg.output_dir = run_opts.out;
        }
        if (run_opts.seed) {
            cfg.seeds = {*run_opts.seed};
        }
        const ProtocolResult result = run_protocol(cfg, run_opts.verbose);
        for (const auto& report : result.reports) {
            std::cout << report_table(report);
        }
        return 0;
    }
    return 2;
}

} // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const NumericError& e) {
        std::cerr << "eralab: numeric failure: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "eralab: " << e.what() << "\n";
        return 2;
    }
}
