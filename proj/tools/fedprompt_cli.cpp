// Command-line front end: run / compare / sweep / capture / attack / decode-prompts.
// Exit codes: 0 ok, 1 config error, 2 runtime error.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fedprompt/errors.hpp"
#include "fedprompt/experiment.hpp"

using namespace fedprompt;

namespace {

std::vector<std::string> split_list(const std::vector<std::string>& items) {
    std::vector<std::string> out;
    for (const auto& item : items) {
        std::stringstream ss(item);
        std::string part;
        while (std::getline(ss, part, ',')) {
            if (!part.empty()) out.push_back(part);
        }
    }
    return out;
}

int decode_prompts(const std::string& path) {
    const PromptCheckpoint ckpt = load_prompt_checkpoint(path);
    const EncoderWeights enc = init_encoders(ckpt.encoder);
    std::cout << "# variant " << to_string(ckpt.mode) << ", round " << ckpt.round << ", owner " << ckpt.owner << "\n";
    for (std::size_t s = 0; s < ckpt.text.size(); ++s) {
        const auto ids = decode_prompt_nearest_words(ckpt.text[s], enc.text.token_embedding);
        std::cout << "text[" << s << "]:";
        for (std::size_t id : ids) std::cout << ' ' << id;
        std::cout << '\n';
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Federated dual prompt tuning simulator"};
    app.require_subcommand(1);

    std::string config_path;
    auto* run = app.add_subcommand("run", "Train every seed of the configured variant");
    run->add_option("config", config_path, "YAML config")->required();

    std::vector<std::string> variants;
    auto* compare = app.add_subcommand("compare", "Train several variants and tabulate them");
    compare->add_option("config", config_path, "YAML config")->required();
    compare->add_option("--variants", variants, "Comma-separated variant names")->required();

    std::string axis;
    std::vector<std::string> values;
    auto* sweep_cmd = app.add_subcommand("sweep", "Rerun the experiment for each value of one axis");
    sweep_cmd->add_option("config", config_path, "YAML config")->required();
    sweep_cmd->add_option("--axis", axis, "alpha_mode, visual_mode, prompt_length or epochs_per_round")->required();
    sweep_cmd->add_option("--values", values, "Values (space or comma separated)")->required();

    std::string capture_path;
    std::size_t sample = 0;
    bool linear = false;
    auto* capture = app.add_subcommand("capture", "Record one client's gradient for a training sample");
    capture->add_option("config", config_path, "YAML config")->required();
    capture->add_option("--out", capture_path, "Capture file to write")->required();
    capture->add_option("--sample", sample, "Training sample index");
    capture->add_flag("--linear", linear, "Capture from a linear softmax layer instead of the prompt model");

    auto* attack = app.add_subcommand("attack", "Gradient inversion against a captured gradient");
    attack->add_option("config", config_path, "YAML config")->required();
    attack->add_option("--capture", capture_path, "Capture file")->required()->check(CLI::ExistingFile);

    std::string checkpoint;
    auto* decode = app.add_subcommand("decode-prompts", "Map learned text prompts to their nearest vocabulary ids");
    decode->add_option("checkpoint", checkpoint, "Prompt checkpoint")->required()->check(CLI::ExistingFile);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        if (*decode) return decode_prompts(checkpoint);
        const ExperimentConfig config = load_config(config_path);
        if (*run) {
            const auto res = run_experiment(config, &std::cerr);
            std::cout << render_table(res.summaries);
        } else if (*compare) {
            const auto res = compare_variants(config, split_list(variants), &std::cerr);
            std::cout << render_table(res.summaries);
        } else if (*sweep_cmd) {
            const auto res = sweep(config, axis, split_list(values), &std::cerr);
            std::cout << render_table(res.summaries, axis);
        } else if (*capture) {
            Tensor truth;
            const GradientCapture c = make_capture(config, sample, linear, &truth);
            save_capture(capture_path, c, &truth);
            std::cerr << "captured " << c.parameter_count << " gradient entries (" << c.variant << ")\n";
        } else if (*attack) {
            Tensor truth;
            const GradientCapture c = load_capture(capture_path, &truth);
            const bool has_truth = truth.numel() > 0;
            const AttackReport report = run_attack(config, c, has_truth ? &truth : nullptr);
            const auto dir = resolve_output_dir(config);
            std::filesystem::create_directories(dir);
            std::ofstream out(dir / "attack.jsonl", std::ios::app);
            write_attack_jsonl(out, report);
            write_attack_jsonl(std::cout, report);
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
