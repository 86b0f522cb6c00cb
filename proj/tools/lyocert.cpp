// lyocert: command-line front end for the certification-and-control pipeline
// (data generation -> training -> certification -> bound -> safety filter).
//
// Exit codes: 0 success, 2 config/validation error, 3 certification failure,
// 4 filter infeasibility during a run.

#include <cstdint>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "lyocert/bounds.hpp"
#include "lyocert/cbf.hpp"
#include "lyocert/certify.hpp"
#include "lyocert/core.hpp"
#include "lyocert/dataio.hpp"
#include "lyocert/nn.hpp"
#include "lyocert/sim.hpp"
#include "lyocert/version.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct GlobalArgs {
    std::string config_path;
    std::string out_dir = ".";
    std::optional<std::int64_t> seed;

    fs::path config_dir() const { return fs::path(config_path).parent_path(); }
    fs::path out(const std::string& name) const { return fs::path(out_dir) / name; }
};

json load_config(const GlobalArgs& g) {
    if (g.config_path.empty()) throw std::invalid_argument("--config is required");
    std::ifstream in(g.config_path);
    if (!in) throw std::invalid_argument("cannot open config: " + g.config_path);
    return json::parse(in);
}

fs::path resolve_path(const std::string& p, const GlobalArgs& g) {
    fs::path path(p);
    return path.is_absolute() ? path : g.config_dir() / path;
}

void write_json_atomic(const fs::path& path, const json& j) {
    lyocert::write_file_atomic(path, j.dump(2) + "\n");
}

std::string utc_timestamp() {
    const std::time_t now = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

/// The run manifest is written before any computation so a failed run still
/// leaves a record of what was attempted.
void write_manifest(const GlobalArgs& g, const std::string& command, std::uint64_t seed) {
    fs::create_directories(g.out_dir);
    write_json_atomic(g.out("manifest.json"), json{{"command", command},
                                                   {"config_path", g.config_path},
                                                   {"seed", seed},
                                                   {"output_dir", g.out_dir},
                                                   {"tool_version", lyocert::tool_version},
                                                   {"timestamp", utc_timestamp()}});
}

lyocert::InputMode input_mode_from_string(const std::string& s) {
    if (s == "constant") return lyocert::InputMode::constant;
    if (s == "per-sample" || s == "per_sample") return lyocert::InputMode::per_sample;
    throw std::invalid_argument("unknown input_mode: " + s);
}

lyocert::TrainConfig train_config_from_json(const json& j) {
    lyocert::TrainConfig tc;
    tc.lambda = j.value("lambda", tc.lambda);
    tc.gamma = j.value("gamma", tc.gamma);
    tc.learning_rate = j.value("learning_rate", tc.learning_rate);
    tc.max_epochs = j.value("max_epochs", tc.max_epochs);
    tc.restarts = j.value("restarts", tc.restarts);
    tc.seed = j.value("seed", tc.seed);
    if (j.contains("input_mode"))
        tc.input_mode = input_mode_from_string(j.at("input_mode").get<std::string>());
    return tc;
}

json factor_rows(const lyocert::LyapunovCandidate& cand) {
    json rows = json::array();
    for (std::size_t i = 0; i < cand.dim(); ++i) {
        json row = json::array();
        for (std::size_t c = 0; c < cand.dim(); ++c)
            row.push_back(c <= i ? cand.L.at(i, c) : 0.0);
        rows.push_back(row);
    }
    return rows;
}

std::string loss_history_csv(const std::vector<double>& losses) {
    std::string out = "epoch,loss\n";
    for (std::size_t e = 0; e < losses.size(); ++e)
        out += std::to_string(e + 1) + "," + lyocert::format_double(losses[e]) + "\n";
    return out;
}

// ---------------------------------------------------------------------------

int cmd_gen(const GlobalArgs& g, std::optional<std::int64_t> n_flag,
            std::optional<double> duration_flag) {
    const json cfg = load_config(g);
    lyocert::PlantConfig plant =
        lyocert::plant_from_json(cfg.contains("plant") ? cfg.at("plant") : cfg);
    if (g.seed) plant.seed = static_cast<std::uint64_t>(*g.seed);

    const std::int64_t n = n_flag ? *n_flag : cfg.value("n_rollouts", std::int64_t{10});
    if (n < 1) throw std::invalid_argument("gen: n must be >= 1");
    const double duration = duration_flag ? *duration_flag : cfg.value("duration", 1.0);
    lyocert::Vec reference;
    if (cfg.contains("reference")) reference = cfg.at("reference").get<std::vector<double>>();

    write_manifest(g, "gen", plant.seed);
    const lyocert::Dataset ds = lyocert::generate_training_data(
        plant, static_cast<std::size_t>(n), duration, reference);

    std::vector<std::string> files;
    for (std::size_t r = 0; r < ds.size(); ++r) {
        char name[32];
        std::snprintf(name, sizeof name, "rollout_%03zu.csv", r);
        lyocert::save_trajectory(ds.trajectories[r], g.out(name));
        files.emplace_back(name);
    }
    lyocert::save_dataset_manifest(ds, files, g.out("dataset.json"));
    std::cout << "gen: wrote " << ds.size() << " trajectories to " << g.out_dir << "\n";
    return 0;
}

int cmd_train(const GlobalArgs& g, std::optional<double> lambda_flag) {
    const json cfg = load_config(g);
    if (!cfg.contains("dataset"))
        throw std::invalid_argument("train: config must name a \"dataset\" manifest");
    lyocert::TrainConfig tc = train_config_from_json(cfg.value("train", json::object()));
    if (lambda_flag) tc.lambda = *lambda_flag;
    if (g.seed) tc.seed = static_cast<std::uint64_t>(*g.seed);
    tc.validate();

    write_manifest(g, "train", tc.seed);
    const lyocert::Dataset ds =
        lyocert::load_dataset(resolve_path(cfg.at("dataset").get<std::string>(), g));
    const lyocert::TrainResult result = lyocert::train(ds, tc);

    write_json_atomic(g.out("train_result.json"), json{{"converged", result.converged},
                                                       {"final_loss", result.final_loss},
                                                       {"epochs_used", result.epochs_used},
                                                       {"lambda", tc.lambda},
                                                       {"gamma", tc.gamma},
                                                       {"L", factor_rows(result.candidate)}});
    lyocert::write_file_atomic(g.out("loss_history.csv"), loss_history_csv(result.loss_history));
    std::cout << "train: converged=" << (result.converged ? "true" : "false")
              << " final_loss=" << lyocert::format_double(result.final_loss)
              << " epochs=" << result.epochs_used << "\n";
    return result.converged ? 0 : 3;
}

int cmd_certify(const GlobalArgs& g, std::optional<double> lo_flag, std::optional<double> hi_flag,
                std::optional<double> res_flag) {
    const json cfg = load_config(g);
    if (!cfg.contains("dataset"))
        throw std::invalid_argument("certify: config must name a \"dataset\" manifest");
    lyocert::BisectionConfig bc;
    bc.train_cfg = train_config_from_json(cfg.value("train", json::object()));
    bc.lambda_min = lo_flag ? *lo_flag : cfg.value("lambda_min", bc.lambda_min);
    bc.lambda_max = hi_flag ? *hi_flag : cfg.value("lambda_max", bc.lambda_max);
    bc.resolution = res_flag ? *res_flag : cfg.value("resolution", bc.resolution);
    bc.warm_start = cfg.value("warm_start", bc.warm_start);
    if (g.seed) bc.train_cfg.seed = static_cast<std::uint64_t>(*g.seed);
    bc.validate();
    bc.train_cfg.validate();

    write_manifest(g, "certify", bc.train_cfg.seed);
    const lyocert::Dataset ds =
        lyocert::load_dataset(resolve_path(cfg.at("dataset").get<std::string>(), g));
    const lyocert::Certificate cert = lyocert::bisect_lambda(ds, bc);

    write_json_atomic(g.out("certificate.json"),
                      lyocert::certificate_to_json(cert, bc.train_cfg.seed));
    lyocert::write_file_atomic(g.out("loss_history.csv"),
                               loss_history_csv(cert.training_loss_history));
    std::cout << "certify: lambda_best=" << lyocert::format_double(cert.lambda_best)
              << " epsilon=" << lyocert::format_double(cert.epsilon)
              << " never_converged=" << (cert.never_converged ? "true" : "false") << "\n";
    return cert.never_converged ? 3 : 0;
}

int cmd_bound(const GlobalArgs& g, std::optional<double> delta_flag) {
    const json cfg = load_config(g);
    if (!cfg.contains("certificate") || !cfg.contains("dataset"))
        throw std::invalid_argument("bound: config must name \"certificate\" and \"dataset\"");
    const double delta = delta_flag ? *delta_flag : cfg.value("delta", 0.01);

    write_manifest(g, "bound", g.seed ? static_cast<std::uint64_t>(*g.seed) : 0);
    const lyocert::Certificate cert =
        lyocert::load_certificate(resolve_path(cfg.at("certificate").get<std::string>(), g));
    const lyocert::Dataset test =
        lyocert::load_dataset(resolve_path(cfg.at("dataset").get<std::string>(), g));

    const auto [c_sample, m_sample] = lyocert::validate_certificate(cert, test);
    const auto [c_traj, m_traj] = lyocert::validate_certificate_per_trajectory(cert, test);
    const lyocert::ViolationBound per_sample = lyocert::chernoff_bound(c_sample, m_sample, delta);
    const lyocert::ViolationBound per_traj = lyocert::chernoff_bound(c_traj, m_traj, delta);

    write_json_atomic(g.out("bound_report.json"),
                      json{{"delta", delta},
                           {"lambda", cert.lambda_best},
                           {"epsilon", cert.epsilon},
                           {"per_sample", lyocert::bound_to_json(per_sample)},
                           {"per_trajectory", lyocert::bound_to_json(per_traj)}});
    std::cout << "bound: c_bar=" << lyocert::format_double(per_sample.c_bar) << " (" << c_sample
              << "/" << m_sample << " violations, delta=" << lyocert::format_double(delta)
              << ")\n";
    return 0;
}

/// Shared config plumbing for run and sweep: plant + spec + certificate +
/// scenario geometry, with the certificate's epsilon substituted on request.
struct ScenarioBundle {
    lyocert::PlantConfig plant;
    lyocert::SafetySpec spec;
    lyocert::ScenarioConfig scenario;
    lyocert::Certificate cert;
};

ScenarioBundle load_scenario_bundle(const json& cfg, const GlobalArgs& g) {
    if (!cfg.contains("plant") || !cfg.contains("spec") || !cfg.contains("certificate"))
        throw std::invalid_argument("config must name \"plant\", \"spec\", and \"certificate\"");
    ScenarioBundle b;
    b.plant = lyocert::plant_from_json(cfg.at("plant"));
    if (cfg.contains("seed")) b.plant.seed = cfg.at("seed").get<std::uint64_t>();
    if (g.seed) b.plant.seed = static_cast<std::uint64_t>(*g.seed);
    b.spec = lyocert::spec_from_json(cfg.at("spec"));
    b.scenario = lyocert::scenario_from_json(cfg);
    b.cert = lyocert::load_certificate(resolve_path(cfg.at("certificate").get<std::string>(), g));
    if (cfg.value("epsilon_from_certificate", false)) b.spec.epsilon = b.cert.epsilon;
    return b;
}

int cmd_run(const GlobalArgs& g) {
    const json cfg = load_config(g);
    ScenarioBundle b = load_scenario_bundle(cfg, g);
    write_manifest(g, "run", b.plant.seed);

    const lyocert::ScenarioResult result =
        lyocert::run_scenario(b.plant, b.spec, b.scenario, b.cert);
    lyocert::save_scenario_csv(result.trace, g.out("scenario.csv"));
    write_json_atomic(g.out("summary.json"), lyocert::scenario_summary_json(result));
    std::cout << "run: min_h=" << lyocert::format_double(result.min_h)
              << " filter_activity=" << lyocert::format_double(result.filter_activity)
              << " violated=" << (result.violated ? "true" : "false") << "\n";
    if (result.infeasible_at) {
        std::cerr << "run: filter infeasible at t=" << lyocert::format_double(*result.infeasible_at)
                  << ", halted safely\n";
        return 4;
    }
    return 0;
}

int cmd_sweep(const GlobalArgs& g) {
    const json cfg = load_config(g);
    ScenarioBundle b = load_scenario_bundle(cfg, g);
    if (!cfg.contains("alphas") || !cfg.contains("epsilons"))
        throw std::invalid_argument("sweep: config must list \"alphas\" and \"epsilons\"");
    const std::vector<double> alphas = cfg.at("alphas").get<std::vector<double>>();
    std::vector<double> epsilons;
    for (const auto& e : cfg.at("epsilons")) {
        if (e.is_string() && e.get<std::string>() == "certificate")
            epsilons.push_back(b.cert.epsilon);
        else
            epsilons.push_back(e.get<double>());
    }
    const double tie_tol = cfg.value("tie_tolerance", 1e-4);
    write_manifest(g, "sweep", b.plant.seed);

    const lyocert::SweepResult table =
        lyocert::sweep_table(b.plant, b.spec, alphas, epsilons, b.scenario, b.cert, tie_tol);

    std::string csv = "alpha";
    for (double e : epsilons) csv += ",eps_" + lyocert::format_double(e);
    csv += "\n";
    for (std::size_t i = 0; i < alphas.size(); ++i) {
        csv += lyocert::format_double(alphas[i]);
        for (std::size_t j = 0; j < epsilons.size(); ++j)
            csv += "," + lyocert::format_double(table.min_h(i, j));
        csv += "\n";
    }
    lyocert::write_file_atomic(g.out("sweep.csv"), csv);

    json min_h_rows = json::array();
    for (std::size_t i = 0; i < alphas.size(); ++i) {
        json row = json::array();
        for (std::size_t j = 0; j < epsilons.size(); ++j) row.push_back(table.min_h(i, j));
        min_h_rows.push_back(row);
    }
    write_json_atomic(g.out("sweep.json"), json{{"alphas", table.alphas},
                                                {"epsilons", table.epsilons},
                                                {"min_h", min_h_rows},
                                                {"cell_ok", table.cell_ok},
                                                {"row_monotone", table.row_monotone},
                                                {"col_monotone", table.col_monotone},
                                                {"all_monotone", table.all_monotone},
                                                {"tie_tolerance", table.tie_tolerance}});

    for (std::size_t i = 0; i < alphas.size(); ++i)
        std::cout << "sweep: row alpha=" << lyocert::format_double(alphas[i])
                  << " non-decreasing in epsilon: " << (table.row_monotone[i] ? "OK" : "FAIL")
                  << "\n";
    for (std::size_t j = 0; j < epsilons.size(); ++j)
        std::cout << "sweep: column epsilon=" << lyocert::format_double(epsilons[j])
                  << " non-increasing in alpha: " << (table.col_monotone[j] ? "OK" : "FAIL")
                  << "\n";
    std::cout << "sweep: all_monotone=" << (table.all_monotone ? "true" : "false") << "\n";
    return 0;
}

int cmd_validate(const GlobalArgs& g) {
    const json cfg = load_config(g);
    if (!cfg.contains("certificate") || !cfg.contains("dataset"))
        throw std::invalid_argument("validate: config must name \"certificate\" and \"dataset\"");
    write_manifest(g, "validate", g.seed ? static_cast<std::uint64_t>(*g.seed) : 0);
    const lyocert::Certificate cert =
        lyocert::load_certificate(resolve_path(cfg.at("certificate").get<std::string>(), g));
    const lyocert::Dataset ds =
        lyocert::load_dataset(resolve_path(cfg.at("dataset").get<std::string>(), g));

    const auto [violations, total] = lyocert::validate_certificate(cert, ds);
    const auto [traj_violations, traj_total] =
        lyocert::validate_certificate_per_trajectory(cert, ds);
    const double rate =
        total > 0 ? static_cast<double>(violations) / static_cast<double>(total) : 0.0;
    write_json_atomic(g.out("validation_report.json"),
                      json{{"violations", violations},
                           {"total", total},
                           {"rate", rate},
                           {"trajectory_violations", traj_violations},
                           {"trajectory_total", traj_total},
                           {"lambda", cert.lambda_best},
                           {"epsilon", cert.epsilon}});
    std::cout << "validate: " << violations << "/" << total << " samples violate ("
              << traj_violations << "/" << traj_total << " trajectories)\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"lyocert: learn, certify, bound, and filter with data-driven "
                 "stability certificates"};
    app.require_subcommand(1);
    app.fallthrough();

    GlobalArgs g;
    app.add_option("--config", g.config_path, "Path to the command's JSON config");
    app.add_option("--seed", g.seed, "Override the seed from the config");
    app.add_option("--out", g.out_dir, "Output directory (default: current directory)");

    std::optional<std::int64_t> n_flag;
    std::optional<double> duration_flag, lambda_flag, lo_flag, hi_flag, res_flag, delta_flag;

    CLI::App* gen = app.add_subcommand("gen", "Generate plant rollout trajectories");
    gen->add_option("--n", n_flag, "Number of rollouts");
    gen->add_option("--duration", duration_flag, "Rollout duration in seconds");

    CLI::App* train = app.add_subcommand("train", "Train a candidate at a fixed decay rate");
    train->add_option("--lambda", lambda_flag, "Decay rate to train at");

    CLI::App* certify = app.add_subcommand("certify", "Bisect for the maximal certifiable rate");
    certify->add_option("--lambda-min", lo_flag, "Bracket lower edge");
    certify->add_option("--lambda-max", hi_flag, "Bracket upper edge");
    certify->add_option("--resolution", res_flag, "Bracket resolution");

    CLI::App* bound = app.add_subcommand("bound", "Chernoff bound on held-out violations");
    bound->add_option("--delta", delta_flag, "Confidence parameter in (0, 1]");

    CLI::App* run = app.add_subcommand("run", "Closed-loop scenario with the safety filter");
    CLI::App* sweep = app.add_subcommand("sweep", "Conservatism sweep over (alpha, epsilon)");
    CLI::App* validate = app.add_subcommand("validate", "Count certificate violations on data");

    int rc = 0;
    gen->callback([&] { rc = cmd_gen(g, n_flag, duration_flag); });
    train->callback([&] { rc = cmd_train(g, lambda_flag); });
    certify->callback([&] { rc = cmd_certify(g, lo_flag, hi_flag, res_flag); });
    bound->callback([&] { rc = cmd_bound(g, delta_flag); });
    run->callback([&] { rc = cmd_run(g); });
    sweep->callback([&] { rc = cmd_sweep(g); });
    validate->callback([&] { rc = cmd_validate(g); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    } catch (const lyocert::FilterInfeasible& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    } catch (const json::exception& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return rc;
}
