#include "prefpack/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "prefpack/cost_model.hpp"
#include "prefpack/dataset.hpp"
#include "prefpack/packer.hpp"
#include "prefpack/refnet.hpp"
#include "prefpack/refnet_losses.hpp"
#include "prefpack/scheduler.hpp"

namespace prefpack::cli {

namespace {

using ojson = nlohmann::ordered_json;
namespace fs = std::filesystem;

// Raised for bad paths or unreadable inputs; maps to exit code 2.
struct UsageError : Error {
    using Error::Error;
};

struct CommonOptions {
    std::string dataset;
    std::string out;
    std::string format = "table";
    std::size_t vocab_size = kByteVocabSize;
};

struct VerifyOptions {
    std::size_t n_samples = 50;
    std::uint64_t seed = 20240601;
    std::string precision = "fp64";
    double beta = 0.1;
    std::size_t d_model = 32;
    std::size_t n_heads = 2;
    std::size_t n_layers = 2;
    std::size_t d_ff = 64;
    std::string positional = "learned-absolute";
    bool inject_leak = false;
};

std::vector<PreferenceExample> load_dataset(const std::string& path, std::size_t vocab_size) {
    if (path.empty()) {
        throw UsageError("--dataset is required");
    }
    if (!fs::is_regular_file(path)) {
        throw UsageError("cannot read dataset '" + path + "'");
    }
    auto examples = load_preference_jsonl(fs::path(path), vocab_size);
    if (examples.empty()) {
        throw UsageError("dataset '" + path + "' contains no examples");
    }
    return examples;
}

// Writes to --out when given, otherwise to stdout.
void emit(const std::string& text, const std::string& out_path, std::ostream& out) {
    if (out_path.empty()) {
        out << text;
        return;
    }
    std::ofstream file(out_path, std::ios::binary);
    if (!file) {
        throw UsageError("cannot write '" + out_path + "'");
    }
    file << text;
}

void check_format(const std::string& format) {
    if (format != "json" && format != "table") {
        throw UsageError("--format must be json or table");
    }
}

std::string fixed(double v, int digits = 3) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

// ---------------------------------------------------------------- analyze

int cmd_analyze(const CommonOptions& opt, std::ostream& out) {
    check_format(opt.format);
    const auto examples = load_dataset(opt.dataset, opt.vocab_size);
    const auto stats = compute_stats(examples);
    const auto reports = dataset_cost_reports(examples);
    const auto per_example = per_example_means(examples);

    std::string text;
    if (opt.format == "json") {
        ojson j;
        ojson hist = ojson::object();
        for (const auto& [k, count] : stats.k_histogram) {
            hist[std::to_string(k)] = count;
        }
        j["stats"] = {{"n_examples", stats.n_examples},
                      {"mean_input_len", stats.mean_input_len},
                      {"mean_max_resp_len", stats.mean_max_resp_len},
                      {"mean_min_resp_len", stats.mean_min_resp_len},
                      {"mean_sum_resp_len", stats.mean_sum_resp_len},
                      {"k_histogram", hist}};
        ojson reps = ojson::array();
        for (const auto& [k, r] : reports) {
            ojson rj = ojson::parse(cost_report_json(r));
            rj["k"] = k;
            reps.push_back(std::move(rj));
        }
        j["cost_reports"] = std::move(reps);
        j["per_example_mean"] = {{"compute_ratio", per_example.compute_ratio},
                                 {"memory_ratio_flash", per_example.memory_ratio_flash},
                                 {"beneficial_fraction", per_example.beneficial_fraction}};
        text = j.dump(2) + "\n";
    } else {
        std::ostringstream s;
        char line[128];
        auto row = [&](const char* label, const std::string& value) {
            std::snprintf(line, sizeof line, "%-28s %12s\n", label, value.c_str());
            s << line;
        };
        row("examples", std::to_string(stats.n_examples));
        std::string hist;
        for (const auto& [k, count] : stats.k_histogram) {
            hist += (hist.empty() ? "" : " ") + std::to_string(k) + ":" + std::to_string(count);
        }
        row("K histogram", hist);
        row("input len.", fixed(stats.mean_input_len, 1));
        row("max resp. len.", fixed(stats.mean_max_resp_len, 1));
        row("min resp. len.", fixed(stats.mean_min_resp_len, 1));
        for (const auto& [k, r] : reports) {
            s << "-- K=" << k << " (model-predicted, mean profile) --\n";
            row("peak memory (flash) ratio", fixed(r.memory_ratio_flash));
            row("attention time ratio", fixed(r.compute_ratio));
            row("effective time ratio", fixed(r.effective_ratio));
            row("masked-entry compute ratio", fixed(r.compute_packed_masked / r.compute_original));
            row("packing beneficial", r.beneficial ? "yes" : "no");
        }
        s << "-- per-example mean --\n";
        row("attention time ratio", fixed(per_example.compute_ratio));
        row("peak memory (flash) ratio", fixed(per_example.memory_ratio_flash));
        row("beneficial fraction", fixed(per_example.beneficial_fraction));
        text = s.str();
    }
    emit(text, opt.out, out);
    return kSuccess;
}

// ---------------------------------------------------------------- pack

int cmd_pack(const CommonOptions& opt, const std::string& mask_out, std::ostream& out, std::ostream& err) {
    const auto examples = load_dataset(opt.dataset, opt.vocab_size);
    std::string text, masks;
    for (const auto& ex : examples) {
        const PackedLayout layout = pack(ex);
        const std::string line = layout_to_json(layout);
        if (unpack(layout_from_json(line)) != ex) {
            err << "pack: roundtrip mismatch for example '" << ex.id << "'\n";
            return kVerificationFailed;
        }
        text += line;
        text += '\n';
        if (!mask_out.empty()) {
            masks += "# " + ex.id + "\n" + dense_mask_text(render_dense_mask(layout)) + "\n";
        }
    }
    emit(text, opt.out, out);
    if (!mask_out.empty()) {
        emit(masks, mask_out, out);
    }
    return kSuccess;
}

// ---------------------------------------------------------------- verify

template <typename T>
std::vector<refnet::EquivalenceResult> run_equivalence(const refnet::RefNetConfig& cfg,
                                                       const std::vector<PreferenceExample>& examples,
                                                       const VerifyOptions& opt) {
    const auto policy = refnet::cast_params<T>(refnet::init_params<double>(cfg, opt.seed + 1));
    const auto reference = refnet::cast_params<T>(refnet::init_params<double>(cfg, opt.seed + 2));
    refnet::EquivalenceOptions eo;
    eo.beta = opt.beta;
    eo.inject_cross_response_leak = opt.inject_leak;
    std::vector<refnet::EquivalenceResult> results;
    results.reserve(examples.size());
    for (const auto& ex : examples) {
        results.push_back(refnet::check_equivalence(policy, reference, ex, eo));
    }
    return results;
}

int cmd_verify(const CommonOptions& common, const VerifyOptions& opt, std::ostream& out, std::ostream& err) {
    check_format(common.format);
    if (opt.n_samples == 0) {
        throw UsageError("--n-samples must be >= 1: verifying nothing is not a success");
    }
    if (!(opt.beta > 0.0)) {
        throw UsageError("--beta must be positive");
    }
    std::vector<PreferenceExample> examples;
    if (!common.dataset.empty()) {
        examples = load_dataset(common.dataset, common.vocab_size);
        if (examples.size() > opt.n_samples) {
            examples.resize(opt.n_samples);
        }
    } else {
        RandomExampleSpec spec;
        spec.vocab_size = common.vocab_size;
        examples = random_examples(opt.n_samples, spec, opt.seed);
    }

    refnet::RefNetConfig cfg;
    cfg.vocab_size = common.vocab_size;
    cfg.d_model = opt.d_model;
    cfg.n_heads = opt.n_heads;
    cfg.n_layers = opt.n_layers;
    cfg.d_ff = opt.d_ff;
    cfg.precision = refnet::parse_precision(opt.precision);
    cfg.positional = refnet::parse_positional(opt.positional);
    for (const auto& ex : examples) {
        std::size_t longest = 0;
        for (const auto& r : ex.responses) {
            longest = std::max(longest, r.size());
        }
        cfg.max_position = std::max(cfg.max_position, ex.prompt.size() + longest);
    }
    refnet::validate(cfg);

    auto results = cfg.precision == refnet::Precision::fp32 ? run_equivalence<float>(cfg, examples, opt)
                                                             : run_equivalence<double>(cfg, examples, opt);
    std::sort(results.begin(), results.end(),
              [](const auto& a, const auto& b) { return a.example_id < b.example_id; });

    const auto tol = refnet::default_tolerances(cfg.precision);
    refnet::EquivalenceResult worst;
    std::vector<std::string> failures;
    ojson rows = ojson::array();
    for (const auto& r : results) {
        worst.max_logit_diff = std::max(worst.max_logit_diff, r.max_logit_diff);
        worst.max_logprob_diff = std::max(worst.max_logprob_diff, r.max_logprob_diff);
        worst.max_reward_diff = std::max(worst.max_reward_diff, r.max_reward_diff);
        worst.rm_loss_diff = std::max(worst.rm_loss_diff, r.rm_loss_diff);
        worst.dpo_loss_diff = std::max(worst.dpo_loss_diff, r.dpo_loss_diff);
        worst.rm_grad_rel_diff = std::max(worst.rm_grad_rel_diff, r.rm_grad_rel_diff);
        worst.dpo_grad_rel_diff = std::max(worst.dpo_grad_rel_diff, r.dpo_grad_rel_diff);
        const bool ok = refnet::within(r, tol);
        if (!ok) {
            failures.push_back(r.example_id);
        }
        rows.push_back({{"id", r.example_id},
                        {"max_abs_logit_diff", r.max_logit_diff},
                        {"max_logprob_diff", r.max_logprob_diff},
                        {"max_reward_diff", r.max_reward_diff},
                        {"rm_loss_diff", r.rm_loss_diff},
                        {"dpo_loss_diff", r.dpo_loss_diff},
                        {"rm_grad_rel_diff", r.rm_grad_rel_diff},
                        {"dpo_grad_rel_diff", r.dpo_grad_rel_diff},
                        {"pass", ok}});
    }

    std::string text;
    if (common.format == "json") {
        ojson j;
        j["precision"] = refnet::to_string(cfg.precision);
        j["positional_scheme"] = refnet::to_string(cfg.positional);
        j["seed"] = opt.seed;
        j["n_samples"] = results.size();
        j["tolerances"] = {{"logits", tol.logits}, {"losses", tol.losses}, {"grad_relative", tol.grad_relative}};
        j["max"] = {{"logit_diff", worst.max_logit_diff},
                    {"logprob_diff", worst.max_logprob_diff},
                    {"reward_diff", worst.max_reward_diff},
                    {"rm_loss_diff", worst.rm_loss_diff},
                    {"dpo_loss_diff", worst.dpo_loss_diff},
                    {"rm_grad_rel_diff", worst.rm_grad_rel_diff},
                    {"dpo_grad_rel_diff", worst.dpo_grad_rel_diff}};
        j["failures"] = failures;
        j["passed"] = failures.empty();
        j["examples"] = std::move(rows);
        text = j.dump(2) + "\n";
    } else {
        std::ostringstream s;
        char line[160];
        auto row = [&](const char* label, double value, double limit) {
            std::snprintf(line, sizeof line, "%-22s %12.3e  (tol %.0e)\n", label, value, limit);
            s << line;
        };
        s << "verified " << results.size() << " examples (" << refnet::to_string(cfg.precision) << ", "
          << refnet::to_string(cfg.positional) << ")\n";
        row("max |logit diff|", worst.max_logit_diff, tol.logits);
        row("max |logprob diff|", worst.max_logprob_diff, tol.losses);
        row("max |reward diff|", worst.max_reward_diff, tol.losses);
        row("max |rm loss diff|", worst.rm_loss_diff, tol.losses);
        row("max |dpo loss diff|", worst.dpo_loss_diff, tol.losses);
        row("max rm grad rel diff", worst.rm_grad_rel_diff, tol.grad_relative);
        row("max dpo grad rel diff", worst.dpo_grad_rel_diff, tol.grad_relative);
        s << (failures.empty() ? "PASS" : "FAIL") << "\n";
        text = s.str();
    }
    emit(text, common.out, out);

    if (!failures.empty()) {
        for (const auto& id : failures) {
            err << "verify: tolerance breach in example '" << id << "'\n";
        }
        return kVerificationFailed;
    }
    return kSuccess;
}

// ---------------------------------------------------------------- simulate

int cmd_simulate(const CommonOptions& common, const std::string& scenario_path, std::optional<std::uint64_t> seed,
                 std::ostream& out) {
    check_format(common.format);
    if (scenario_path.empty()) {
        throw UsageError("--scenario is required");
    }
    std::ifstream file(scenario_path);
    if (!file) {
        throw UsageError("cannot read scenario '" + scenario_path + "'");
    }
    std::stringstream buf;
    buf << file.rdbuf();
    Scenario sc = parse_scenario(buf.str());
    if (seed) {
        sc.strategies.seed = *seed;
        if (sc.synthetic) {
            sc.synthetic->seed = *seed;
        }
    }

    std::vector<SchedulerItem> items;
    if (sc.dataset) {
        fs::path data = *sc.dataset;
        if (data.is_relative()) {
            data = fs::path(scenario_path).parent_path() / data;
        }
        items = scheduler_items(load_dataset(data.string(), common.vocab_size));
    } else {
        const auto profiles = lognormal_length_fixture(*sc.synthetic);
        items = scheduler_items(profiles);
    }
    const auto report = strategy_report(items, sc.batch_size, sc.sim, sc.strategies);
    emit(common.format == "json" ? strategy_report_json(report) + "\n" : strategy_report_table(report), common.out,
         out);
    return kSuccess;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Preference packing toolkit: cost analysis, packing, equivalence checks, scheduling"};
    app.name("prefpack");
    app.require_subcommand(1);

    CommonOptions common;
    VerifyOptions vopt;
    std::string scenario;
    std::string mask_out;

    auto add_common = [&](CLI::App* sub, bool with_format) {
        sub->add_option("--dataset", common.dataset, "Preference dataset (JSONL)");
        sub->add_option("--out", common.out, "Output path (default: stdout)");
        sub->add_option("--vocab-size", common.vocab_size, "Vocabulary size used to validate token ids");
        if (with_format) {
            sub->add_option("--format", common.format, "json or table");
        }
    };

    auto* analyze = app.add_subcommand("analyze", "Dataset length statistics and attention cost report");
    add_common(analyze, true);

    auto* pack_cmd = app.add_subcommand("pack", "Write packed layouts as JSONL");
    add_common(pack_cmd, false);
    pack_cmd->add_option("--dense-mask", mask_out, "Also write dense 0/1 masks to this path (debug)");

    auto* verify = app.add_subcommand("verify", "Check packed vs. batched equivalence on the reference network");
    add_common(verify, true);
    verify->add_option("--n-samples", vopt.n_samples, "Number of examples to verify");
    verify->add_option("--seed", vopt.seed, "Seed for synthetic examples and parameters");
    verify->add_option("--precision", vopt.precision, "fp32 or fp64");
    verify->add_option("--beta", vopt.beta, "DPO beta");
    verify->add_option("--d-model", vopt.d_model);
    verify->add_option("--n-heads", vopt.n_heads);
    verify->add_option("--n-layers", vopt.n_layers);
    verify->add_option("--d-ff", vopt.d_ff);
    verify->add_option("--positional", vopt.positional, "learned-absolute or rotary");
    verify->add_flag("--inject-leak", vopt.inject_leak, "Debug: allow cross-response attention in the packed mask");

    auto* simulate = app.add_subcommand("simulate", "Compare vanilla / packing / sorting / both throughput");
    add_common(simulate, true);
    simulate->add_option("--scenario", scenario, "Scenario JSON");
    std::optional<std::uint64_t> sim_seed;
    simulate->add_option("--seed", sim_seed, "Overrides the scenario seed");

    std::vector<const char*> argv;
    argv.push_back("prefpack");
    for (const auto& a : args) {
        argv.push_back(a.c_str());
    }
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kSuccess : kUsageError;
    }

    try {
        if (*analyze) return cmd_analyze(common, out);
        if (*pack_cmd) return cmd_pack(common, mask_out, out, err);
        if (*verify) return cmd_verify(common, vopt, out, err);
        if (*simulate) return cmd_simulate(common, scenario, sim_seed, out);
    } catch (const NumericalError& e) {
        err << "error: " << e.what() << "\n";
        return kVerificationFailed;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kUsageError;
    }
    return kUsageError;
}

}  // namespace prefpack::cli
