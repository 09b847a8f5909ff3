#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "uovn/train.hpp"

namespace {

// Exit codes: 0 success, 1 config error, 2 I/O error, 3 numerical failure.
int run(int argc, char** argv) {
    CLI::App app{"uovn: unified open-vocabulary dense prediction, desk scale"};
    app.require_subcommand(1);

    std::string config_path, out_dir, ckpt_dir, data_dir, tasks_csv = "det,ins,sem,pan";
    std::string image_path, queries;
    std::uint64_t seed = 1;

    CLI::App* train = app.add_subcommand("train", "train a model from a run config");
    train->add_option("--config", config_path, "run config JSON")->required();
    train->add_option("--out", out_dir, "checkpoint/output directory")->required();

    CLI::App* evalc = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    evalc->add_option("--ckpt", ckpt_dir, "checkpoint directory")->required();
    evalc->add_option("--data", data_dir, "dataset directory")->required();
    evalc->add_option("--tasks", tasks_csv, "comma-separated: det,ins,sem,pan");
    std::string report_out;
    evalc->add_option("--out", report_out, "write the JSON report here");

    CLI::App* infer = app.add_subcommand("infer", "run inference on one image");
    infer->add_option("--ckpt", ckpt_dir, "checkpoint directory")->required();
    infer->add_option("--image", image_path, "image (.uovt or binary PPM)")->required();
    infer->add_option("--queries", queries, "semicolon-separated queries")->required();
    std::string infer_out = "infer_out";
    infer->add_option("--out", infer_out, "output directory");

    CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every kernel and loss");
    gradcheck->add_option("--seed", seed, "seed for the randomized fixtures");

    CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic dataset directory");
    std::string gen_domains = "D1,D2";
    int gen_count = 8;
    std::uint64_t gen_seed = 5;
    int gen_size = 64;
    gen->add_option("--out", out_dir, "dataset directory")->required();
    gen->add_option("--domains", gen_domains, "comma-separated stock domains (D1,D2,D3)");
    gen->add_option("--per-domain", gen_count, "samples per domain");
    gen->add_option("--seed", gen_seed, "generator seed");
    gen->add_option("--image-size", gen_size, "image size (multiple of 32)");

    CLI11_PARSE(app, argc, argv);

    auto split_csv = [](const std::string& s) {
        std::vector<std::string> out;
        std::string cur;
        for (char ch : s) {
            if (ch == ',') {
                if (!cur.empty()) out.push_back(cur);
                cur.clear();
            } else {
                cur.push_back(ch);
            }
        }
        if (!cur.empty()) out.push_back(cur);
        return out;
    };

    if (train->parsed()) {
        const uovn::RunConfig cfg = uovn::load_run_config(config_path);
        const uovn::TrainResult res = uovn::cmd_train(cfg, out_dir);
        std::printf("trained %d step(s); first total %.6f, final total %.6f\n", res.steps_run, res.first_total,
                    res.final_total);
        return 0;
    }
    if (evalc->parsed()) {
        const uovn::EvalReport report = uovn::cmd_eval(ckpt_dir, data_dir, split_csv(tasks_csv));
        uovn::print_eval_table(report, std::cout);
        const std::string json = uovn::eval_report_json(report);
        if (!report_out.empty()) {
            std::ofstream os(report_out);
            if (!os) throw uovn::IoError("cannot write " + report_out);
            os << json << "\n";
        }
        return report.partition_violations == 0 ? 0 : 3;
    }
    if (infer->parsed()) {
        uovn::cmd_infer(ckpt_dir, image_path, queries, infer_out);
        std::printf("wrote %s\n", infer_out.c_str());
        return 0;
    }
    if (gradcheck->parsed()) {
        const auto t0 = std::chrono::steady_clock::now();
        const uovn::GradCheckSuite suite = uovn::gradcheck_suite(seed);
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        bool ok = true;
        for (const auto& c : suite.components) {
            const bool pass = c.max_rel_err < 1e-4;
            ok = ok && pass;
            std::printf("%-18s  %10.3e  (%lld coords)  %s\n", c.name.c_str(), c.max_rel_err,
                        static_cast<long long>(c.coords), pass ? "PASS" : "FAIL");
        }
        std::printf("worst %.3e over %zu components in %.1fs\n", suite.worst, suite.components.size(), secs);
        return ok ? 0 : 3;
    }
    if (gen->parsed()) {
        std::vector<uovn::DomainSpec> specs;
        for (const auto& id : split_csv(gen_domains)) specs.push_back(uovn::stock_domain(id));
        const uovn::Dataset ds = uovn::build_dataset(specs, gen_count, gen_seed, gen_size);
        uovn::write_dataset(out_dir, ds);
        std::printf("wrote %zu samples (%zu classes) to %s\n", ds.samples.size(), ds.class_names.size(),
                    out_dir.c_str());
        return 0;
    }
    return 1;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const uovn::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const uovn::InputError& e) {
        std::cerr << "input error: " << e.what() << "\n";
        return 1;
    } catch (const uovn::IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 2;
    } catch (const uovn::NumericError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
