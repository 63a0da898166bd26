// Command-line entry point: train, eval, and plot subcommands.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "tbwm/config.hpp"
#include "tbwm/metrics.hpp"
#include "tbwm/trainer.hpp"

namespace {

// Minimal SVG line chart; one curve per named series.
void write_svg_chart(const std::string& path, const std::string& title,
                     const std::vector<std::pair<std::string,
                                                 std::vector<std::pair<double, double>>>>& series) {
    constexpr int W = 860, H = 480, ML = 70, MR = 160, MT = 40, MB = 50;
    double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
    for (const auto& [name, pts] : series) {
        (void)name;
        for (const auto& [x, y] : pts) {
            xmin = std::min(xmin, x);
            xmax = std::max(xmax, x);
            ymin = std::min(ymin, y);
            ymax = std::max(ymax, y);
        }
    }
    if (xmin > xmax) return;  // nothing to plot
    if (xmax == xmin) xmax = xmin + 1.0;
    if (ymax == ymin) {
        ymax += 1.0;
        ymin -= 1.0;
    }
    const auto sx = [&](double x) {
        return ML + (x - xmin) / (xmax - xmin) * (W - ML - MR);
    };
    const auto sy = [&](double y) {
        return H - MB - (y - ymin) / (ymax - ymin) * (H - MT - MB);
    };
    static const char* kColors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728",
                                    "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};
    std::ofstream out(path);
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W
        << "\" height=\"" << H << "\">\n";
    out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    out << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" "
           "font-size=\"16\" font-family=\"sans-serif\">" << title << "</text>\n";
    // axes
    out << "<line x1=\"" << ML << "\" y1=\"" << H - MB << "\" x2=\"" << W - MR
        << "\" y2=\"" << H - MB << "\" stroke=\"black\"/>\n";
    out << "<line x1=\"" << ML << "\" y1=\"" << MT << "\" x2=\"" << ML
        << "\" y2=\"" << H - MB << "\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 4; ++i) {
        const double yv = ymin + (ymax - ymin) * i / 4.0;
        const double xv = xmin + (xmax - xmin) * i / 4.0;
        out << "<text x=\"" << ML - 8 << "\" y=\"" << sy(yv) + 4
            << "\" text-anchor=\"end\" font-size=\"11\" "
               "font-family=\"sans-serif\">"
            << std::round(yv * 1000.0) / 1000.0 << "</text>\n";
        out << "<text x=\"" << sx(xv) << "\" y=\"" << H - MB + 18
            << "\" text-anchor=\"middle\" font-size=\"11\" "
               "font-family=\"sans-serif\">"
            << std::round(xv) << "</text>\n";
    }
    int ci = 0;
    for (const auto& [name, pts] : series) {
        const char* color = kColors[ci % 8];
        out << "<polyline fill=\"none\" stroke=\"" << color
            << "\" stroke-width=\"1.5\" points=\"";
        for (const auto& [x, y] : pts) out << sx(x) << ',' << sy(y) << ' ';
        out << "\"/>\n";
        out << "<text x=\"" << W - MR + 10 << "\" y=\"" << MT + 16 * ci + 12
            << "\" font-size=\"12\" font-family=\"sans-serif\" fill=\"" << color
            << "\">" << name << "</text>\n";
        ++ci;
    }
    out << "</svg>\n";
}

int run_plot(const std::string& metrics_path, const std::string& out_dir) {
    const auto records = tbwm::read_metrics(metrics_path);
    std::filesystem::create_directories(out_dir);

    std::map<std::string, std::vector<std::pair<double, double>>> by_key;
    for (const auto& rec : records)
        for (const auto& [k, v] : rec.values)
            by_key[k].emplace_back(static_cast<double>(rec.env_steps), v);

    const std::vector<std::pair<std::string, std::vector<std::string>>> charts = {
        {"world_model_losses",
         {"wm_total", "wm_obs", "wm_reward", "wm_done", "wm_ensemble"}},
        {"controller_losses", {"actor_loss", "critic_loss"}},
        {"returns", {"eval_return", "collect_return_mean"}},
        {"exploration", {"mean_disagreement", "policy_entropy", "return_scale"}},
    };
    int written = 0;
    for (const auto& [chart, keys] : charts) {
        std::vector<std::pair<std::string, std::vector<std::pair<double, double>>>> series;
        for (const auto& k : keys)
            if (by_key.count(k)) series.emplace_back(k, by_key[k]);
        if (series.empty()) continue;
        const std::string path = out_dir + "/" + chart + ".svg";
        write_svg_chart(path, chart, series);
        std::printf("wrote %s\n", path.c_str());
        ++written;
    }
    if (written == 0) std::printf("no plottable series found\n");
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"token-based world-model agent"};
    app.require_subcommand(1);

    // train
    auto* train = app.add_subcommand("train", "run the training loop");
    std::string cfg_path, env_override, out_dir = "runs/default", resume;
    std::int64_t seed = -1;
    bool force = false;
    train->add_option("--config", cfg_path, "config file (JSON)");
    train->add_option("--env", env_override, "environment id (grid-v0, chain-v0)");
    train->add_option("--seed", seed, "random seed override");
    train->add_option("--out", out_dir, "output directory");
    train->add_option("--resume", resume, "checkpoint to resume from");
    train->add_flag("--force", force, "resume across config changes");

    // eval
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    std::string ckpt_path, eval_cfg;
    int episodes = 100;
    double temperature = 0.5;
    eval->add_option("--checkpoint", ckpt_path, "checkpoint path")->required();
    eval->add_option("--config", eval_cfg, "config file (defaults to checkpoint dir)");
    eval->add_option("--episodes", episodes, "number of test episodes");
    eval->add_option("--temperature", temperature, "action sampling temperature");

    // plot
    auto* plot = app.add_subcommand("plot", "render metrics curves to SVG");
    std::string metrics_path, plot_out = "plots";
    plot->add_option("--metrics", metrics_path, "metrics.jsonl path")->required();
    plot->add_option("--out", plot_out, "output directory");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*train) {
            tbwm::RunConfig cfg =
                cfg_path.empty() ? tbwm::RunConfig{} : tbwm::RunConfig::load(cfg_path);
            if (!env_override.empty()) cfg.env = env_override;
            if (seed >= 0) cfg.seed = static_cast<std::uint64_t>(seed);
            cfg.validate();
            tbwm::Trainer trainer(cfg);
            trainer.run(out_dir, resume, force);
            std::printf("done: %d epochs, %lld environment steps\n",
                        trainer.epoch(),
                        static_cast<long long>(trainer.env_steps()));
        } else if (*eval) {
            std::string cfg_file = eval_cfg;
            if (cfg_file.empty())
                cfg_file = std::filesystem::path(ckpt_path).parent_path() /
                           "config.json";
            tbwm::RunConfig cfg = tbwm::RunConfig::load(cfg_file);
            tbwm::Trainer trainer(cfg);
            trainer.load_checkpoint(ckpt_path);
            std::vector<double> per_episode;
            const double mean = trainer.evaluate(episodes, temperature, &per_episode);
            for (std::size_t i = 0; i < per_episode.size(); ++i)
                std::printf("episode %3zu: %.4f\n", i, per_episode[i]);
            std::printf("mean return over %d episodes: %.4f\n", episodes, mean);
        } else if (*plot) {
            return run_plot(metrics_path, plot_out);
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
