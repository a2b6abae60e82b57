// Copyright (c) 2026 The r2tal Authors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end: rewire residual specs, train localizers, evaluate
// predictions, profile memory, and generate synthetic datasets.

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "r2tal/backbone.hpp"
#include "r2tal/checkpoint.hpp"
#include "r2tal/network_spec.hpp"
#include "r2tal/tal_data.hpp"
#include "r2tal/tal_eval.hpp"
#include "r2tal/train.hpp"

namespace {

template <typename T>
void check_params_preserved(const std::string& ckpt_path, const r2tal::NetworkSpec& residual,
                            const r2tal::NetworkSpec& rewired) {
    auto store = r2tal::load_checkpoint<T>(ckpt_path);
    auto remapped = r2tal::remap_parameters(store, residual, rewired);
    const std::string before = r2tal::serialize_checkpoint(store);
    const std::string after = r2tal::serialize_checkpoint(remapped);
    if (before != after)
        throw r2tal::RemapError("remapped parameters are not byte-identical to the input");
    std::cout << "parameters preserved: " << store.size() << " entries, " << before.size()
              << " container bytes\n";
}

int run_rewire(const std::string& in, const std::string& out, const std::string& check_params) {
    const auto spec = r2tal::load_spec_file(in);
    const auto rewired = r2tal::rewire(spec);
    r2tal::save_spec_file(out, rewired);
    const auto m = rewired.meta();
    std::cout << "rewired " << rewired.stages.size() << " stages (" << m.total_blocks
              << " blocks) -> " << out << "\n";
    if (!check_params.empty()) {
        const auto entries = r2tal::checkpoint_entries(check_params);
        if (entries.empty()) throw r2tal::IoError("checkpoint has no entries: " + check_params);
        if (entries.front().dtype == r2tal::DType::f64)
            check_params_preserved<double>(check_params, spec, rewired);
        else
            check_params_preserved<float>(check_params, spec, rewired);
    }
    return 0;
}

int run_train(const std::string& config_path) {
    const auto cfg = r2tal::train_config_from_json(r2tal::load_json_file(config_path));
    const auto report = r2tal::train(cfg);
    const auto& last = report.metrics.back();
    std::printf("trained %lld epochs: final average_mAP=%.4f, peak_bytes=%lld\n",
                static_cast<long long>(cfg.epochs), report.final_eval.average_map,
                static_cast<long long>(report.peak_bytes));
    if (last.has_loss) std::printf("final epoch loss=%.6f\n", last.loss);
    return 0;
}

int run_eval(const std::string& preds_path, const std::string& gts_path,
             const std::string& protocol, int classes, const std::string& out_path) {
    const auto preds = r2tal::predictions_from_json(r2tal::load_json_file(preds_path));
    const auto gts = r2tal::ground_truth_from_json(r2tal::load_json_file(gts_path));
    if (classes <= 0) {
        int max_label = -1;
        for (const auto& [_, segs] : gts)
            for (const auto& s : segs) max_label = std::max(max_label, s.label);
        for (const auto& [_, dets] : preds)
            for (const auto& d : dets) max_label = std::max(max_label, d.label);
        classes = max_label + 1;
        if (classes <= 0) throw r2tal::ConfigError("cannot infer class count from empty inputs");
    }
    const auto result = r2tal::mean_average_precision(preds, gts, classes, protocol);
    const auto j = r2tal::eval_result_to_json(result);
    if (out_path.empty())
        std::cout << j.dump(2) << "\n";
    else
        r2tal::save_json_file(out_path, j);
    std::printf("average_mAP=%.4f over %zu thresholds (%s)\n", result.average_map,
                result.thresholds.size(), result.protocol.c_str());
    return 0;
}

int run_profile(const std::string& spec_path, std::vector<std::int64_t> depths,
                std::vector<std::string> mode_names, std::int64_t t_in, std::int64_t batch,
                const std::string& dtype, std::uint64_t seed, const std::string& out_path) {
    const auto spec = r2tal::load_spec_file(spec_path);
    if (depths.empty()) depths = {2, 4, 8, 16};
    if (mode_names.empty()) mode_names = {"cache_all", "reversible"};
    std::vector<r2tal::ExecMode> modes;
    for (const auto& m : mode_names) modes.push_back(r2tal::exec_mode_from_name(m));
    const std::string name =
        std::filesystem::path(spec_path).stem().string();
    std::vector<r2tal::ProfileRow> rows;
    if (dtype == "f64")
        rows = r2tal::profile_memory<double>(spec, name, depths, modes, t_in, batch, seed);
    else if (dtype == "f32")
        rows = r2tal::profile_memory<float>(spec, name, depths, modes, t_in, batch, seed);
    else
        throw r2tal::ConfigError("unknown dtype: " + dtype);
    const std::string csv = r2tal::profile_to_csv(rows);
    if (out_path.empty())
        std::cout << csv;
    else
        r2tal::write_file_bytes(out_path, csv);
    return 0;
}

int run_gen_data(const std::string& config_path, const std::string& out_dir) {
    const auto cfg = r2tal::gen_config_from_json(r2tal::load_json_file(config_path));
    r2tal::generate_and_save(cfg, out_dir);
    std::int64_t total = 0;
    for (const auto& [_, n] : cfg.splits) total += n;
    std::cout << "generated " << total << " samples across " << cfg.splits.size()
              << " splits -> " << out_dir << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"reversible two-stream localization networks"};
    app.require_subcommand(1);

    auto* rewire = app.add_subcommand("rewire", "rewire a residual spec to reversible form");
    std::string rw_in, rw_out, rw_check;
    rewire->add_option("--in", rw_in, "residual network spec (JSON)")->required();
    rewire->add_option("--out", rw_out, "output path for the rewired spec")->required();
    rewire->add_option("--check-params", rw_check,
                       "checkpoint to remap and verify bit-exact preservation");

    auto* train = app.add_subcommand("train", "train a localizer");
    std::string tr_config;
    train->add_option("--config", tr_config, "training config (JSON)")->required();

    auto* eval = app.add_subcommand("eval", "score predictions against ground truth");
    std::string ev_preds, ev_gts, ev_protocol = "activitynet", ev_out;
    int ev_classes = 0;
    eval->add_option("--preds", ev_preds, "predictions file (JSON)")->required();
    eval->add_option("--gts", ev_gts, "ground-truth file (JSON)")->required();
    eval->add_option("--protocol", ev_protocol, "activitynet or thumos");
    eval->add_option("--classes", ev_classes, "class count (default: inferred)");
    eval->add_option("--out", ev_out, "write results JSON here instead of stdout");

    auto* profile = app.add_subcommand("profile", "measure and predict training memory");
    std::string pf_spec, pf_dtype = "f32", pf_out;
    std::vector<std::int64_t> pf_depths;
    std::vector<std::string> pf_modes;
    std::int64_t pf_t = 128, pf_batch = 1;
    std::uint64_t pf_seed = 7;
    profile->add_option("--spec", pf_spec, "residual network spec (JSON)")->required();
    profile->add_option("--depths", pf_depths, "blocks per stage to sweep")->delimiter(',');
    profile->add_option("--modes", pf_modes, "execution modes to sweep")->delimiter(',');
    profile->add_option("--T", pf_t, "temporal length");
    profile->add_option("--batch", pf_batch, "simultaneously materialized tapes");
    profile->add_option("--dtype", pf_dtype, "f32 or f64");
    profile->add_option("--seed", pf_seed, "parameter/input seed");
    profile->add_option("--out", pf_out, "write CSV here instead of stdout");

    auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
    std::string gd_config, gd_out;
    gen->add_option("--config", gd_config, "generator config (JSON)")->required();
    gen->add_option("--out", gd_out, "output dataset root")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e); // --help
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }

    try {
        if (rewire->parsed()) return run_rewire(rw_in, rw_out, rw_check);
        if (train->parsed()) return run_train(tr_config);
        if (eval->parsed()) return run_eval(ev_preds, ev_gts, ev_protocol, ev_classes, ev_out);
        if (profile->parsed())
            return run_profile(pf_spec, pf_depths, pf_modes, pf_t, pf_batch, pf_dtype, pf_seed,
                               pf_out);
        if (gen->parsed()) return run_gen_data(gd_config, gd_out);
        std::cerr << "error: no subcommand\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
