#pragma once
// Acceptance suite: nine numbered end-to-end criteria, each checking one
// simulation path at fixed dimensions against the dense reference — errors,
// exact call budgets, adaptivity rounds, statistical accuracy, tag algebra,
// the restriction audit, and packing isolation. Every criterion returns a
// one-line verdict; verify_all prints them (or a JSON document) and yields
// a process exit code. A mutation probe demonstrates the suite has teeth:
// a run with its recombination weights deliberately swapped must fail the
// exactness check by name.

#include <algorithm>
#include <chrono>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "attnsim/harness.hpp"

namespace attnsim {

struct CriterionResult {
    int number = 0;
    std::string name;
    bool pass = false;
    std::string detail;  // measured values, one line
};

namespace detail_a {

inline std::string sci(double v) {
    std::ostringstream out;
    out << std::scientific << std::setprecision(2) << v;
    return out.str();
}

inline double max_rel_err(const Matrix& got, const Matrix& want) {
    const std::vector<double> errs = detail_h::row_errors(got, want, true);
    return *std::max_element(errs.begin(), errs.end());
}

inline double max_abs_err(const Matrix& got, const Matrix& want) {
    const std::vector<double> errs = detail_h::row_errors(got, want, false);
    return *std::max_element(errs.begin(), errs.end());
}

inline double ms_since(const std::chrono::steady_clock::time_point& start) {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() -
                                                     start)
        .count();
}

// The fixed configuration shared by the exactness criteria: a 16-token,
// width-4, two-head, two-layer model simulated in chunks of 4 through a
// 2x2-grid oracle, so the closed-form budget is 2*2*ceil(16*2/4) = 32 calls.
inline RunConfig exactness_config(std::uint64_t seed, const std::string& mode) {
    RunConfig cfg;
    cfg.mode = mode;
    cfg.n = 16;
    cfg.d = 4;
    cfg.h = 2;
    cfg.l = 2;
    cfg.m_cap = 10;  // 2*chunk + 2
    cfg.h_small = 2;
    cfg.l_small = 2;
    cfg.d_small = 24;  // 4 slots of width 2*m + 2 = 6
    cfg.chunk = 4;
    cfg.seed = seed;
    return cfg;
}

inline double dot_at(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

}  // namespace detail_a

// 1. Chunked dense simulation is exact, on budget, and fast: five seeds,
// max per-row relative error <= 1e-8, exactly 32 calls each, under a second.
inline CriterionResult check_quadratic_exactness(std::uint64_t seed) {
    CriterionResult res{1, "quadratic exactness", false, ""};
    const auto start = std::chrono::steady_clock::now();

    double worst = 0.0;
    bool budgets_ok = true;
    std::size_t calls = 0;
    for (std::uint64_t s = seed; s < seed + 5; ++s) {
        const RunConfig cfg = detail_a::exactness_config(s, "quadratic");
        const Instance inst = generate_instance(cfg);
        const OracleCapacity cap = capacity_for(RunMode::Quadratic, cfg);
        CallLedger ledger;
        const Matrix out = simulate_full(ledger, inst.x, inst.params, cfg.chunk, cap);
        worst = std::max(worst,
                         detail_a::max_rel_err(out, transformer_forward(inst.x, inst.params)));
        calls = ledger.calls.size();
        budgets_ok = budgets_ok && calls == 32;
    }
    const double ms = detail_a::ms_since(start);

    res.pass = worst <= 1e-8 && budgets_ok && ms < 1000.0;
    res.detail = "max rel err " + detail_a::sci(worst) + " (<= 1e-8); calls " +
                 std::to_string(calls) + "/32 each seed; " + detail_a::sci(ms / 1000.0) + " s";
    return res;
}

// 2. Chunked causal simulation is exact, and the first output row depends on
// nothing but the first input row: it must equal the one-row forward pass
// (the MLP image of the first value row) to 1e-10.
inline CriterionResult check_causal_exactness(std::uint64_t seed) {
    CriterionResult res{2, "causal exactness and prefix property", false, ""};

    double worst = 0.0, worst_prefix = 0.0;
    for (std::uint64_t s = seed; s < seed + 5; ++s) {
        const RunConfig cfg = detail_a::exactness_config(s, "quadratic-causal");
        const Instance inst = generate_instance(cfg);
        const OracleCapacity cap = capacity_for(RunMode::QuadraticCausal, cfg);
        CallLedger ledger;
        const Matrix out =
            simulate_full_causal(ledger, inst.x, inst.params, cfg.chunk, cap);
        worst = std::max(worst,
                         detail_a::max_rel_err(out, transformer_forward(inst.x, inst.params)));

        const Matrix prefix =
            transformer_forward(slice_rows(inst.x, 0, 1), inst.params);
        for (std::size_t j = 0; j < out.cols; ++j) {
            worst_prefix = std::max(worst_prefix, std::abs(out(0, j) - prefix(0, j)));
        }
    }

    res.pass = worst <= 1e-8 && worst_prefix <= 1e-10;
    res.detail = "max rel err " + detail_a::sci(worst) + " (<= 1e-8); first row off by " +
                 detail_a::sci(worst_prefix) + " (<= 1e-10)";
    return res;
}

// 3. Adaptivity: at two layers the simulation finishes within 3 rounds per
// layer — 4 rounds plain, 6 with pure-oracle recombination sums, cap 6.
inline CriterionResult check_adaptivity(std::uint64_t seed) {
    CriterionResult res{3, "adaptivity rounds", false, ""};
    const RunConfig cfg = detail_a::exactness_config(seed, "quadratic");
    const Instance inst = generate_instance(cfg);
    const OracleCapacity cap = capacity_for(RunMode::Quadratic, cfg);

    CallLedger plain;
    simulate_full(plain, inst.x, inst.params, cfg.chunk, cap);
    CallLedger summed;
    SimOptions opt;
    opt.pure_oracle_recombination = true;
    simulate_full(summed, inst.x, inst.params, cfg.chunk, cap, opt);

    res.pass = plain.rounds <= 6 && summed.rounds <= 6;
    res.detail = "rounds " + std::to_string(plain.rounds) + " plain, " +
                 std::to_string(summed.rounds) + " with oracle sums (cap 3*l = 6)";
    return res;
}

// 4. Sampled average accuracy: 512 tokens estimated from 128-key samples,
// one head, one layer — at least 90% of rows within 0.25 relative error in
// at least 90% of 50 seeded trials, 4 calls per step, under 30 seconds. The
// proven probability-0.9 constants are out of desk-scale reach; this seeded
// trial suite substitutes for them, and the verdict line says so.
inline CriterionResult check_average_accuracy(std::uint64_t seed) {
    CriterionResult res{4, "sampled average accuracy", false, ""};
    const auto start = std::chrono::steady_clock::now();

    RunConfig cfg;
    cfg.mode = "average";
    cfg.n = 512;
    cfg.d = 4;
    cfg.h = 1;
    cfg.l = 1;
    cfg.m_cap = 258;  // 2*chunk + 2
    cfg.h_small = 1;
    cfg.l_small = 1;
    cfg.d_small = 10;  // one slot of width 2*m + 2
    cfg.chunk = 128;
    cfg.trials = 50;
    cfg.seed = seed;
    validate(cfg);

    const ModeResult mode = detail_h::run_average_mode(cfg);
    const double ms = detail_a::ms_since(start);

    std::size_t passed = 0;
    for (const TrialResult& t : mode.trials) passed += t.pass ? 1 : 0;
    const bool per_step = mode.calls_by_tag.count("sample:denominator") &&
                          mode.calls_by_tag.at("sample:denominator") == 4 &&
                          mode.calls_by_tag.count("sample:ratio") &&
                          mode.calls_by_tag.at("sample:ratio") == 4;

    res.pass = mode.pass && per_step && ms < 30000.0;
    res.detail = std::to_string(passed) + "/50 trials with >= 90% rows within 0.25; 4 calls "
                 "per step; " +
                 detail_a::sci(ms / 1000.0) +
                 " s; seeded trials substitute for the probability-0.9 constants";
    return res;
}

// 5. The sampled normalizer estimator is unbiased: averaged over all 24
// permutations of 4 keys sampled in pairs, it equals the true normalizer to
// 1e-12 on every row.
inline CriterionResult check_estimator_unbiasedness(std::uint64_t seed) {
    CriterionResult res{5, "estimator unbiasedness", false, ""};

    auto gx = make_stream(seed, stream::input, 5);
    auto gw = make_stream(seed, stream::weights, 5);
    const Matrix x = random_matrix(gx, 4, 2, -0.7, 0.7);
    const HeadParams head{random_matrix(gw, 2, 2, -0.7, 0.7),
                          random_matrix(gw, 2, 2, -0.7, 0.7), Matrix(2, 2)};
    OracleCapacity cap;
    cap.m_max = 6;
    cap.d_small = 6;
    cap.h_small = 1;
    cap.l_small = 1;
    cap.mask = MaskKind::dense();

    const Matrix q = matmul(x, head.wq), k = matmul(x, head.wk);
    std::vector<double> truth(4, 0.0);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j)
            truth[i] += std::exp(q(i, 0) * k(j, 0) + q(i, 1) * k(j, 1));

    std::vector<double> mean(4, 0.0);
    std::vector<std::size_t> perm{0, 1, 2, 3};
    std::size_t perms = 0;
    do {
        CallLedger ledger;
        const Matrix est = avg_denominator_estimate(ledger, x, head, perm, 2, cap);
        for (std::size_t i = 0; i < 4; ++i) mean[i] += est(i, 0);
        ++perms;
    } while (std::next_permutation(perm.begin(), perm.end()));

    double worst = 0.0;
    for (std::size_t i = 0; i < 4; ++i) {
        worst = std::max(worst, std::abs(mean[i] / double(perms) - truth[i]) / truth[i]);
    }

    res.pass = perms == 24 && worst <= 1e-12;
    res.detail = "max rel deviation " + detail_a::sci(worst) + " over " +
                 std::to_string(perms) + " permutations (<= 1e-12)";
    return res;
}

// 6. Window and sink simulation: exact at 32 tokens (reach 4, sink 3, chunk
// 8) over five seeds, within the per-head budget 6*ceil(n/(chunk-r)) plus
// the constant sink surcharge, and call totals exactly double when the input
// doubles at fixed chunk.
inline CriterionResult check_window_sink(std::uint64_t seed) {
    CriterionResult res{6, "window and sink exactness", false, ""};

    RunConfig cfg;
    cfg.mode = "window";
    cfg.n = 32;
    cfg.d = 4;
    cfg.h = 2;
    cfg.l = 2;
    cfg.m_cap = 9;  // chunk + 1
    cfg.h_small = 1;
    cfg.l_small = 1;
    cfg.d_small = 6;
    cfg.chunk = 8;
    cfg.window_r = 4;
    cfg.sink_s = 3;

    const std::size_t blocks = cfg.n / (cfg.chunk - cfg.window_r);
    const std::size_t heads = cfg.h * cfg.l;
    double worst = 0.0;
    bool budgets_ok = true;
    std::size_t window_per_head = 0, sink_per_head = 0;
    for (std::uint64_t s = seed; s < seed + 5; ++s) {
        cfg.seed = s;

        cfg.mode = "window";
        Instance inst = generate_instance(cfg);
        CallLedger wl;
        Matrix out = window_simulate(wl, inst.x, inst.params, cfg.window_r, cfg.chunk,
                                     capacity_for(RunMode::Window, cfg));
        worst = std::max(worst,
                         detail_a::max_rel_err(out, transformer_forward(inst.x, inst.params)));
        window_per_head = wl.calls.size() / heads;

        cfg.mode = "sink";
        inst = generate_instance(cfg);
        CallLedger sl;
        out = sink_simulate(sl, inst.x, inst.params, cfg.sink_s, cfg.window_r, cfg.chunk,
                            capacity_for(RunMode::Sink, cfg));
        worst = std::max(worst,
                         detail_a::max_rel_err(out, transformer_forward(inst.x, inst.params)));
        sink_per_head = sl.calls.size() / heads;

        budgets_ok = budgets_ok && window_per_head <= 6 * blocks &&
                     sink_per_head <= 6 * blocks + 2 * blocks &&
                     sink_per_head - window_per_head == 2 * blocks;
    }

    // doubling the input at fixed chunk must exactly double the ledger
    RunConfig big = cfg;
    big.n = 64;
    big.seed = seed;
    big.mode = "window";
    Instance inst = generate_instance(big);
    CallLedger wl_small, wl_big;
    {
        RunConfig small = big;
        small.n = 32;
        const Instance si = generate_instance(small);
        window_simulate(wl_small, si.x, si.params, small.window_r, small.chunk,
                        capacity_for(RunMode::Window, small));
    }
    window_simulate(wl_big, inst.x, inst.params, big.window_r, big.chunk,
                    capacity_for(RunMode::Window, big));
    const bool linear = wl_big.calls.size() == 2 * wl_small.calls.size();

    res.pass = worst <= 1e-8 && budgets_ok && linear;
    res.detail = "max rel err " + detail_a::sci(worst) + " (<= 1e-8); per-head calls " +
                 std::to_string(window_per_head) + " window / " + std::to_string(sink_per_head) +
                 " sink (cap " + std::to_string(6 * blocks) + " + surcharge); doubling ratio " +
                 (linear ? "2" : "not 2");
    return res;
}

// 7. Reverse batching: four 4-row width-2 instances answered by exactly one
// large dense call and 12 host matmuls, each within 1e-6 absolutely of its
// standalone head; the tag algebra (own score 0, cross scores <= -b^2)
// holds exhaustively for every batch size up to 70.
inline CriterionResult check_reverse_batching(std::uint64_t seed) {
    CriterionResult res{7, "reverse batching", false, ""};

    RunConfig cfg;
    cfg.mode = "reverse";
    cfg.n = 16;
    cfg.chunk = 4;
    cfg.d = 2;
    cfg.seed = seed;
    const std::vector<ReverseInstance> batch = generate_reverse_batch(cfg);

    ReverseConfig rcfg;
    rcfg.c_bound = 1.0;
    rcfg.target_err = 1e-6;
    rcfg.b_scale = choose_b(rcfg.c_bound, cfg.n, cfg.chunk, rcfg.target_err);

    CallLedger ledger;
    std::vector<std::string> audit;
    const std::vector<Matrix> outs = reverse_simulate(ledger, batch, rcfg, &audit);
    double worst = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        worst = std::max(worst, detail_a::max_abs_err(
                                    outs[i], attention_head(batch[i].x, batch[i].head,
                                                            MaskKind::dense())));
    }
    const std::size_t matmuls =
        static_cast<std::size_t>(std::count(audit.begin(), audit.end(), "matmul"));

    bool tags_ok = true;
    for (std::size_t count = 1; count <= 70 && tags_ok; ++count) {
        const TagSet tags = make_tags(count, 3.0);
        for (std::size_t i = 0; i < count && tags_ok; ++i) {
            tags_ok = detail_a::dot_at(tags.u[i], tags.v[i]) == 0.0;
            for (std::size_t j = 0; j < count && tags_ok; ++j) {
                if (i != j) tags_ok = detail_a::dot_at(tags.u[i], tags.v[j]) <= -9.0;
            }
        }
    }

    res.pass = worst <= 1e-6 && ledger.calls.size() == 1 && matmuls == 12 && tags_ok;
    res.detail = "max abs err " + detail_a::sci(worst) + " (<= 1e-6) at b = " +
                 std::to_string(rcfg.b_scale) + "; " + std::to_string(ledger.calls.size()) +
                 " large call, " + std::to_string(matmuls) + " matmuls; tag algebra " +
                 (tags_ok ? "holds to 70" : "violated");
    return res;
}

// 8. The restriction audit works: an honest run's transcript is admitted,
// and a double that reaches for raw exponentials is rejected.
inline CriterionResult check_restriction_audit(std::uint64_t seed) {
    CriterionResult res{8, "restriction audit", false, ""};

    const RunConfig cfg = detail_a::exactness_config(seed, "quadratic");
    const Instance inst = generate_instance(cfg);
    const OracleCapacity cap = capacity_for(RunMode::Quadratic, cfg);

    Workbench honest;
    SimOptions opt;
    opt.wb = &honest;
    CallLedger ledger;
    simulate_full(ledger, inst.x, inst.params, cfg.chunk, cap, opt);
    const bool honest_ok = audit_transcript(honest.transcript);

    UnrestrictedWorkbench cheat;
    SimOptions copt;
    copt.wb = &cheat;
    CallLedger ledger2;
    simulate_full(ledger2, inst.x, inst.params, cfg.chunk, cap, copt);
    cheat.raw_exp(1.0);  // the unrestricted arithmetic the audit must catch
    const bool cheat_caught = !audit_transcript(cheat.transcript);

    res.pass = honest_ok && cheat_caught;
    res.detail = std::string("honest transcript admitted: ") + (honest_ok ? "yes" : "NO") +
                 "; raw-exp double rejected: " + (cheat_caught ? "yes" : "NO");
    return res;
}

// 9. Packing isolation: four instances in a 2x2 oracle grid each match
// their standalone head to 1e-9, and perturbing one instance leaves every
// other slot bit-identical.
inline CriterionResult check_packing_isolation(std::uint64_t seed) {
    CriterionResult res{9, "packing isolation", false, ""};

    OracleCapacity cap;
    cap.m_max = 8;
    cap.d_small = 8;
    cap.h_small = 2;
    cap.l_small = 2;
    cap.mask = MaskKind::dense();

    auto gen = make_stream(seed, stream::input, 9);
    std::vector<PackInstance> ins;
    for (int k = 0; k < 4; ++k) {
        auto gw = make_stream(seed, stream::weights, 9, static_cast<std::uint64_t>(k));
        ins.push_back({random_matrix(gen, 4, 2, -0.9, 0.9),
                       HeadParams{random_matrix(gw, 2, 2, -1.0, 1.0),
                                  random_matrix(gw, 2, 2, -1.0, 1.0),
                                  random_matrix(gw, 2, 2, -1.0, 1.0)},
                       MlpSpec::identity()});
    }

    auto [packed, params] = pack_instances(ins, cap);
    CallLedger ledger;
    const Matrix base_out = oracle_call(ledger, packed, params, cap);
    double worst = 0.0;
    for (std::size_t s = 0; s < 4; ++s) {
        const std::size_t base = ((s % 2) * 2 + s / 2) * 2;  // head s%2, grid layer s/2
        worst = std::max(worst, detail_a::max_abs_err(
                                    slice_cols(base_out, base, base + 2),
                                    attention_head(ins[s].x, ins[s].head, cap.mask)));
    }

    std::vector<PackInstance> bumped = ins;
    bumped[2].x(1, 0) += 0.125;
    auto [packed2, params2] = pack_instances(bumped, cap);
    const Matrix out2 = oracle_call(ledger, packed2, params2, cap);
    bool isolated = true;
    for (std::size_t s = 0; s < 4; ++s) {
        if (s == 2) continue;
        const std::size_t base = ((s % 2) * 2 + s / 2) * 2;
        for (std::size_t i = 0; i < base_out.rows && isolated; ++i)
            for (std::size_t j = base; j < base + 2 && isolated; ++j)
                isolated = base_out(i, j) == out2(i, j);
    }

    res.pass = worst <= 1e-9 && isolated;
    res.detail = "max slot err " + detail_a::sci(worst) + " (<= 1e-9); untouched slots " +
                 (isolated ? "bit-identical" : "MOVED") + " under perturbation";
    return res;
}

// Mutation probe (not a criterion): recombining the exact block statistics
// with their weights swapped must blow past the exactness threshold, proving
// the error check can actually fail. Reported with the criterion it guards.
inline CriterionResult mutation_probe(std::uint64_t seed) {
    CriterionResult res{0, "mutation probe: swapped recombination weights", false, ""};

    auto gx = make_stream(seed, stream::input, 10);
    auto gw = make_stream(seed, stream::weights, 10);
    const Matrix x = random_matrix(gx, 16, 2, -0.9, 0.9);
    const HeadParams head{random_matrix(gw, 2, 2, -1.0, 1.0),
                          random_matrix(gw, 2, 2, -1.0, 1.0),
                          random_matrix(gw, 2, 2, -1.0, 1.0)};
    OracleCapacity cap;
    cap.m_max = 10;
    cap.d_small = 6;
    cap.h_small = 1;
    cap.l_small = 1;
    cap.mask = MaskKind::dense();

    Workbench bench;
    CallLedger ledger;
    const BlockStats stats = collect_stats_dense(ledger, x, head, 4, cap, bench);
    const Matrix ref = attention_head(x, head, MaskKind::dense());
    const double good = detail_a::max_rel_err(recombine(stats, &bench), ref);

    BlockStats swapped = stats;
    std::reverse(swapped.r.begin(), swapped.r.end());  // weights now pair wrongly
    const double bad = detail_a::max_rel_err(recombine(swapped, &bench), ref);

    res.pass = good <= 1e-8 && bad > 1e-8;
    res.detail = "intact rel err " + detail_a::sci(good) + "; corrupted rel err " +
                 detail_a::sci(bad) +
                 (res.pass ? " — criterion 1 (quadratic exactness) catches it"
                           : " — NOT caught");
    return res;
}

inline std::vector<CriterionResult> run_acceptance(std::uint64_t seed = 1) {
    return {check_quadratic_exactness(seed), check_causal_exactness(seed),
            check_adaptivity(seed),          check_average_accuracy(seed),
            check_estimator_unbiasedness(seed), check_window_sink(seed),
            check_reverse_batching(seed),    check_restriction_audit(seed),
            check_packing_isolation(seed)};
}

inline nlohmann::json acceptance_json(const std::vector<CriterionResult>& criteria,
                                      const CriterionResult& probe, std::uint64_t seed) {
    nlohmann::json rows = nlohmann::json::array();
    bool all = true;
    for (const CriterionResult& c : criteria) {
        all = all && c.pass;
        rows.push_back(nlohmann::json{{"number", c.number},
                                      {"name", c.name},
                                      {"pass", c.pass},
                                      {"detail", c.detail}});
    }
    return nlohmann::json{{"schema", "attnsim-verify-v1"},
                          {"seed", seed},
                          {"criteria", std::move(rows)},
                          {"mutation_probe", nlohmann::json{{"name", probe.name},
                                                            {"pass", probe.pass},
                                                            {"detail", probe.detail}}},
                          {"pass", all && probe.pass}};
}

// Runs the full suite at the given seed and prints one verdict line per
// criterion (or one JSON document). Returns 0 when everything passes and 1
// otherwise — ready to use as a process exit code.
inline int verify_all(std::uint64_t seed, bool as_json, std::ostream& out) {
    const std::vector<CriterionResult> criteria = run_acceptance(seed);
    const CriterionResult probe = mutation_probe(seed);

    bool all = probe.pass;
    for (const CriterionResult& c : criteria) all = all && c.pass;

    if (as_json) {
        out << acceptance_json(criteria, probe, seed).dump(2) << '\n';
        return all ? 0 : 1;
    }

    for (const CriterionResult& c : criteria) {
        out << (c.pass ? "PASS" : "FAIL") << "  " << c.number << "  " << std::left
            << std::setw(36) << c.name << std::right << "  " << c.detail << '\n';
    }
    out << (probe.pass ? "PASS" : "FAIL") << "  -  " << std::left << std::setw(36)
        << probe.name << std::right << "  " << probe.detail << '\n';
    out << (all ? "all criteria pass" : "FAILURES above") << '\n';
    return all ? 0 : 1;
}

}  // namespace attnsim
