// attnsim command line: `simulate` runs the selected mode(s) and writes the
// JSON report plus CSV error table, `verify` runs the acceptance suite, and
// `gen` writes a generated instance for inspection. Flags mirror the run
// configuration in kebab-case; --config applies a JSON file on top of them.
// Exit codes: 0 pass, 1 criterion failure, 2 configuration error.

#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "attnsim/acceptance.hpp"
#include "attnsim/harness.hpp"

namespace {

using namespace attnsim;

void add_config_flags(CLI::App* cmd, RunConfig& cfg, std::string& config_path) {
    cmd->set_help_flag("--help", "print this help");  // frees -h for the head count
    cmd->add_option("--mode", cfg.mode,
                    "quadratic, quadratic-causal, average, window, sink, reverse, or all");
    cmd->add_option("--n", cfg.n, "simulated input length");
    cmd->add_option("--d", cfg.d, "simulated model width");
    cmd->add_option("--h", cfg.h, "simulated head count");
    cmd->add_option("--l", cfg.l, "simulated layer count");
    cmd->add_option("--m-cap", cfg.m_cap, "oracle input-length cap");
    cmd->add_option("--h-small", cfg.h_small, "oracle head count");
    cmd->add_option("--l-small", cfg.l_small, "oracle layer count");
    cmd->add_option("--d-small", cfg.d_small, "oracle width");
    cmd->add_option("--chunk", cfg.chunk,
                    "key-block length (per-instance length in reverse mode)");
    cmd->add_option("--window-r", cfg.window_r, "sliding-window reach");
    cmd->add_option("--sink-s", cfg.sink_s, "always-visible prefix length");
    cmd->add_option("--seed", cfg.seed, "instance seed");
    cmd->add_option("--epsilon-target", cfg.epsilon_target,
                    "pass threshold; 0 picks the per-mode default");
    cmd->add_option("--trials", cfg.trials, "seeded repetitions, sampled mode only");
    cmd->add_flag("--pure-oracle-recombination", cfg.pure_oracle_recombination,
                  "route recombination sums and permutation pairing through oracle calls");
    cmd->add_option("--output", cfg.output_path,
                    "report path (default $ATTNSIM_OUT_DIR/report.json)");
    cmd->add_option("--config", config_path, "JSON file applied on top of the flags");
}

void apply_config_file(RunConfig& cfg, const std::string& path) {
    if (path.empty()) return;
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config file " + path + ": " + e.what());
    }
    apply_config_json(cfg, j);
}

nlohmann::json matrix_json(const Matrix& m) {
    return nlohmann::json{{"rows", m.rows}, {"cols", m.cols}, {"data", m.data}};
}

// Generated instances only carry identity or single-affine MLPs.
nlohmann::json mlp_json(const MlpSpec& mlp) {
    if (mlp.is_identity()) return "identity";
    if (mlp.steps.size() == 1 && mlp.steps.front().kind == MlpStep::Kind::Affine &&
        mlp.steps.front().bias.empty()) {
        return nlohmann::json{{"kind", "affine"}, {"w", matrix_json(mlp.steps.front().w)}};
    }
    return nlohmann::json{{"kind", "composite"}, {"steps", mlp.steps.size()}};
}

nlohmann::json head_json(const HeadParams& h) {
    return nlohmann::json{{"wq", matrix_json(h.wq)},
                          {"wk", matrix_json(h.wk)},
                          {"wv", matrix_json(h.wv)}};
}

int run_gen(const RunConfig& cfg) {
    validate(cfg);
    nlohmann::json j{{"schema", "attnsim-instance-v1"}, {"config", config_json(cfg)}};

    if (parse_mode(cfg.mode) == RunMode::Reverse) {
        nlohmann::json arr = nlohmann::json::array();
        for (const ReverseInstance& inst : generate_reverse_batch(cfg)) {
            arr.push_back(
                nlohmann::json{{"x", matrix_json(inst.x)}, {"head", head_json(inst.head)}});
        }
        j["instances"] = std::move(arr);
    } else {
        const Instance inst = generate_instance(cfg);
        j["x"] = matrix_json(inst.x);
        j["input_mlp"] = mlp_json(inst.params.input_mlp);
        nlohmann::json layers = nlohmann::json::array();
        for (const LayerParams& layer : inst.params.layers) {
            nlohmann::json heads = nlohmann::json::array();
            for (const HeadParams& h : layer.heads) heads.push_back(head_json(h));
            layers.push_back(nlohmann::json{{"heads", std::move(heads)},
                                            {"layer_mlp", mlp_json(layer.layer_mlp)}});
        }
        j["layers"] = std::move(layers);
        if (parse_mode(cfg.mode) == RunMode::Average) {
            j["boundedness"] = nlohmann::json{{"certified", inst.certified},
                                              {"c_bound", inst.boundedness.profile.c_bound},
                                              {"weight_min", inst.boundedness.weight_min},
                                              {"weight_max", inst.boundedness.weight_max},
                                              {"d_feasible", inst.boundedness.d_feasible}};
        }
    }

    std::filesystem::path path = resolve_output_path(cfg);
    if (cfg.output_path.empty()) path.replace_filename("instance.json");
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write instance to " + path.string());
    out << j.dump(2) << '\n';
    std::cout << "instance written to " << path.string() << '\n';
    return 0;
}

int run_simulate(const RunConfig& cfg) {
    const SimulationReport report = run(cfg);
    for (const ModeResult& r : report.modes) {
        std::cout << (r.pass ? "PASS" : "FAIL") << "  " << r.mode << "  max "
                  << r.error_kind << " err " << r.max_err << " (threshold " << r.threshold
                  << "); calls " << r.calls_total << "/" << r.expected_calls << "; rounds "
                  << r.rounds << "/" << r.expected_rounds << '\n';
    }
    std::filesystem::path csv = resolve_output_path(cfg);
    csv.replace_extension(".csv");
    std::cout << "report: " << resolve_output_path(cfg).string() << " (errors: " << csv.string()
              << ")\n";
    return report.pass ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"length-capped oracle simulation of large-context transformers"};
    app.require_subcommand(1);

    RunConfig cfg;
    std::string config_path;
    CLI::App* simulate = app.add_subcommand("simulate", "run mode(s), write JSON/CSV reports");
    add_config_flags(simulate, cfg, config_path);

    std::uint64_t verify_seed = 1;
    bool verify_json = false;
    CLI::App* verify = app.add_subcommand("verify", "run the acceptance suite");
    verify->add_option("--seed", verify_seed, "suite seed");
    verify->add_flag("--json", verify_json, "structured per-criterion results");

    RunConfig gen_cfg;
    std::string gen_config_path;
    CLI::App* gen = app.add_subcommand("gen", "write a generated instance");
    add_config_flags(gen, gen_cfg, gen_config_path);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;  // flag mistakes are configuration errors
    }

    try {
        if (simulate->parsed()) {
            apply_config_file(cfg, config_path);
            return run_simulate(cfg);
        }
        if (verify->parsed()) {
            return attnsim::verify_all(verify_seed, verify_json, std::cout);
        }
        apply_config_file(gen_cfg, gen_config_path);
        return run_gen(gen_cfg);
    } catch (const ConfigError& e) {
        std::cerr << "configuration error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
}
