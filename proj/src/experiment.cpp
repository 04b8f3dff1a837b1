#include "fedprompt/experiment.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <utility>

#include <nlohmann/json.hpp>
#include <yaml-cpp/yaml.h>

#include "fedprompt/errors.hpp"
#include "fedprompt/random.hpp"

namespace fedprompt {

namespace {

// ---------------------------------------------------------------------------
// YAML reading
// ---------------------------------------------------------------------------

std::string where(std::string_view source, const YAML::Mark& mark) {
    std::string out(source);
    if (mark.line >= 0) out += ":" + std::to_string(mark.line + 1);
    return out;
}

class Section {
public:
    Section(const YAML::Node& root, const char* name, std::string_view source)
        : name_(name), source_(source), root_mark_(root.Mark()), node_(root[name]) {
        if (!node_) return;
        if (!node_.IsMap()) fail(node_.Mark(), std::string("section '") + name + "' must be a mapping");
        for (const auto& kv : node_) keys_.emplace(kv.first.as<std::string>(), kv.first.Mark());
    }

    template <typename T>
    bool get(const char* key, T& out) {
        const auto it = keys_.find(key);
        if (it == keys_.end()) return false;
        used_.insert(key);
        const YAML::Node value = std::as_const(node_)[key];
        try {
            out = value.as<T>();
        } catch (const YAML::Exception&) {
            fail(value.Mark(), "invalid value for '" + qualified(key) + "'");
        }
        return true;
    }

    template <typename T>
    void require(const char* key, T& out) {
        if (!get(key, out)) {
            fail(node_ ? node_.Mark() : root_mark_, "missing required field '" + qualified(key) + "'");
        }
    }

    void finish() const {
        for (const auto& [key, mark] : keys_) {
            if (!used_.count(key)) fail(mark, "unknown key '" + qualified(key.c_str()) + "'");
        }
    }

    [[noreturn]] void fail(const YAML::Mark& mark, const std::string& msg) const {
        throw ConfigError(where(source_, mark) + ": " + msg);
    }

    std::string qualified(const char* key) const { return std::string(name_) + "." + key; }

private:
    const char* name_;
    std::string_view source_;
    YAML::Mark root_mark_;
    YAML::Node node_;
    std::map<std::string, YAML::Mark> keys_;
    std::set<std::string> used_;
};

template <typename Parse, typename Out>
void get_enum(Section& s, const char* key, Out& out, Parse parse) {
    std::string text;
    if (!s.get(key, text)) return;
    try {
        out = parse(text);
    } catch (const ConfigError& e) {
        throw ConfigError(s.qualified(key) + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Formatting helpers
// ---------------------------------------------------------------------------

std::string fmt_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    std::string s(buf, res.ptr);
    if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
    return s;
}

std::string fmt_fixed(double v, int digits) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

std::string fmt_full(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

void write_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write '" + path.string() + "'");
    out << text;
    if (!out) throw DataError("failed writing '" + path.string() + "'");
}

std::string rows_jsonl(const std::vector<MetricsRow>& rows) {
    std::ostringstream out;
    write_metrics_jsonl(out, rows);
    return out.str();
}

double mean_of(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

std::vector<SeedRun> run_all_seeds(const ExperimentConfig& config, const std::string& method,
                                   const std::filesystem::path& out_dir, std::ostream* log) {
    std::vector<SeedRun> runs;
    for (std::uint64_t seed : config.seeds) {
        std::optional<std::filesystem::path> ckpt;
        if (config.checkpoints) ckpt = out_dir / "checkpoints";
        runs.push_back(run_seed(config, seed, method, ckpt));
        if (log) {
            const auto& last = runs.back().history.back();
            double acc = 0.0;
            for (const auto& d : last.domains) acc += d.accuracy / static_cast<double>(last.domains.size());
            *log << method << " seed " << seed << ": accuracy " << fmt_fixed(acc, 4) << " after round "
                 << last.round << "\n";
        }
    }
    return runs;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

void ExperimentConfig::validate() const {
    dataset.validate();
    encoder.validate();
    if (dataset.patch_count != encoder.patch_count || dataset.patch_width != encoder.vision_width) {
        throw ConfigError("dataset patch shape must match encoder.patch_count x encoder.vision_width");
    }
    if (prompt_length < 1) throw ConfigError("model.prompt_length must be at least 1");
    if (prompt_length + 1 > encoder.context_length) throw ConfigError("model.prompt_length exceeds context length");
    if (!(tau_d > 0.0)) throw ConfigError("model.tau_d must be positive");
    if (!(loss.tau_ce > 0.0)) throw ConfigError("model.tau_ce must be positive");
    if (!(loss.lambda_dom >= 0.0)) throw ConfigError("model.lambda_dom must be non-negative");
    federation.validate();
    if (seeds.empty()) throw ConfigError("experiment.seeds must list at least one seed");
    if (dataset.n_classes > encoder.vocab_size) throw ConfigError("dataset.n_classes exceeds encoder.vocab_size");
    const VariantSpec spec{variant};
    if (spec.uses_visual_prompts() && dataset.n_domains > encoder.max_visual_prompts) {
        throw ConfigError("dataset.n_domains exceeds encoder.max_visual_prompts");
    }
    if (!spec.federated() && federation.clients_per_domain != 1) {
        throw ConfigError("variant " + std::string(to_string(variant)) + " needs federation.clients_per_domain = 1");
    }
    if (few_shot > train_count_per_cell(dataset.samples_per_class_per_domain)) {
        throw ConfigError("experiment.few_shot exceeds the training samples per class and domain");
    }
    if (attack.iters == 0 || attack.restarts == 0) throw ConfigError("attack.iters and attack.restarts must be positive");
    if (!(attack.initial_step > 0.0) || !(attack.min_step > 0.0)) throw ConfigError("attack step sizes must be positive");
}

bool ExperimentConfig::operator==(const ExperimentConfig& o) const {
    const auto& f = federation;
    const auto& g = o.federation;
    const bool fed_equal = f.schedule.rounds == g.schedule.rounds &&
                           f.schedule.epochs_per_round == g.schedule.epochs_per_round &&
                           f.schedule.alpha == g.schedule.alpha && f.alpha_mode == g.alpha_mode &&
                           f.visual_mode == g.visual_mode && f.momentum_timing == g.momentum_timing &&
                           f.optimizer == g.optimizer && f.clients_per_domain == g.clients_per_domain &&
                           f.dirichlet_beta == g.dirichlet_beta && f.concurrent == g.concurrent && f.seed == g.seed;
    const bool attack_equal = attack.iters == o.attack.iters && attack.restarts == o.attack.restarts &&
                              attack.initial_step == o.attack.initial_step && attack.min_step == o.attack.min_step &&
                              attack.seed == o.attack.seed;
    return fed_equal && attack_equal && dataset == o.dataset && encoder == o.encoder && variant == o.variant &&
           loss == o.loss && prompt_length == o.prompt_length && tau_d == o.tau_d && few_shot == o.few_shot &&
           seeds == o.seeds && output_dir == o.output_dir && checkpoints == o.checkpoints;
}

ExperimentConfig parse_config(std::string_view text, std::string_view source) {
    YAML::Node root;
    try {
        root = YAML::Load(std::string(text));
    } catch (const YAML::ParserException& e) {
        throw ConfigError(where(source, e.mark) + ": " + e.msg);
    }
    if (!root.IsMap()) throw ConfigError(std::string(source) + ": config must be a mapping of sections");
    static const std::set<std::string> kSections{"dataset", "encoder", "model", "federation",
                                                 "optimizer", "experiment", "attack"};
    for (const auto& kv : root) {
        const auto name = kv.first.as<std::string>();
        if (!kSections.count(name)) throw ConfigError(where(source, kv.first.Mark()) + ": unknown section '" + name + "'");
    }

    ExperimentConfig c;
    {
        Section s(root, "encoder", source);
        auto& e = c.encoder;
        s.get("text_width", e.text_width);
        s.get("vision_width", e.vision_width);
        s.get("embed_dim", e.embed_dim);
        s.get("layers", e.layers);
        s.get("heads", e.heads);
        s.get("patch_count", e.patch_count);
        s.get("vocab_size", e.vocab_size);
        s.get("context_length", e.context_length);
        s.get("max_visual_prompts", e.max_visual_prompts);
        s.get("mlp_ratio", e.mlp_ratio);
        s.finish();
    }
    {
        Section s(root, "dataset", source);
        auto& d = c.dataset;
        s.require("n_domains", d.n_domains);
        s.require("n_classes", d.n_classes);
        s.get("samples_per_class_per_domain", d.samples_per_class_per_domain);
        s.get("domain_strength", d.domain_strength);
        s.get("noise_sigma", d.noise_sigma);
        s.finish();
        d.patch_count = c.encoder.patch_count;
        d.patch_width = c.encoder.vision_width;
    }
    {
        Section s(root, "model", source);
        std::string variant;
        s.require("variant", variant);
        try {
            c.variant = parse_variant(variant);
        } catch (const ConfigError& e) {
            throw ConfigError(std::string(source) + ": model.variant: " + e.what());
        }
        s.get("prompt_length", c.prompt_length);
        s.get("tau_d", c.tau_d);
        get_enum(s, "loss", c.loss.mode, parse_loss_mode);
        s.get("lambda_dom", c.loss.lambda_dom);
        s.get("tau_ce", c.loss.tau_ce);
        s.finish();
    }
    {
        Section s(root, "federation", source);
        auto& f = c.federation;
        s.require("rounds", f.schedule.rounds);
        s.get("epochs_per_round", f.schedule.epochs_per_round);
        s.get("alpha", f.schedule.alpha);
        get_enum(s, "alpha_mode", f.alpha_mode, parse_alpha_mode);
        get_enum(s, "visual_mode", f.visual_mode, parse_visual_mode);
        get_enum(s, "momentum_timing", f.momentum_timing, parse_momentum_timing);
        s.get("clients_per_domain", f.clients_per_domain);
        s.get("dirichlet_beta", f.dirichlet_beta);
        s.get("concurrent", f.concurrent);
        s.finish();
    }
    {
        Section s(root, "optimizer", source);
        auto& o = c.federation.optimizer;
        OptimizerKind kind = o.kind;
        get_enum(s, "kind", kind, parse_optimizer_kind);
        o = kind == OptimizerKind::sgd_momentum ? OptimizerConfig::sgd_defaults() : OptimizerConfig::adamw_defaults();
        s.get("lr", o.lr);
        s.get("beta1", o.beta1);
        s.get("beta2", o.beta2);
        s.get("eps", o.eps);
        s.get("momentum", o.momentum);
        s.get("weight_decay", o.weight_decay);
        s.finish();
    }
    {
        Section s(root, "experiment", source);
        s.require("seeds", c.seeds);
        std::string dir;
        if (s.get("output_dir", dir)) c.output_dir = dir;
        s.get("few_shot", c.few_shot);
        s.get("checkpoints", c.checkpoints);
        s.finish();
    }
    {
        Section s(root, "attack", source);
        s.get("iters", c.attack.iters);
        s.get("restarts", c.attack.restarts);
        s.get("initial_step", c.attack.initial_step);
        s.get("min_step", c.attack.min_step);
        s.get("seed", c.attack.seed);
        s.finish();
    }
    try {
        c.validate();
    } catch (const ConfigError& e) {
        throw ConfigError(std::string(source) + ": " + e.what());
    }
    return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot read config '" + path.string() + "'");
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_config(buf.str(), path.string());
}

std::string serialize_config(const ExperimentConfig& c) {
    std::ostringstream o;
    const auto& e = c.encoder;
    const auto& f = c.federation;
    const auto& opt = f.optimizer;
    o << "dataset:\n"
      << "  n_domains: " << c.dataset.n_domains << "\n"
      << "  n_classes: " << c.dataset.n_classes << "\n"
      << "  samples_per_class_per_domain: " << c.dataset.samples_per_class_per_domain << "\n"
      << "  domain_strength: " << fmt_double(c.dataset.domain_strength) << "\n"
      << "  noise_sigma: " << fmt_double(c.dataset.noise_sigma) << "\n"
      << "encoder:\n"
      << "  text_width: " << e.text_width << "\n"
      << "  vision_width: " << e.vision_width << "\n"
      << "  embed_dim: " << e.embed_dim << "\n"
      << "  layers: " << e.layers << "\n"
      << "  heads: " << e.heads << "\n"
      << "  patch_count: " << e.patch_count << "\n"
      << "  vocab_size: " << e.vocab_size << "\n"
      << "  context_length: " << e.context_length << "\n"
      << "  max_visual_prompts: " << e.max_visual_prompts << "\n"
      << "  mlp_ratio: " << e.mlp_ratio << "\n"
      << "model:\n"
      << "  variant: " << to_string(c.variant) << "\n"
      << "  prompt_length: " << c.prompt_length << "\n"
      << "  tau_d: " << fmt_double(c.tau_d) << "\n"
      << "  loss: " << to_string(c.loss.mode) << "\n"
      << "  lambda_dom: " << fmt_double(c.loss.lambda_dom) << "\n"
      << "  tau_ce: " << fmt_double(c.loss.tau_ce) << "\n"
      << "federation:\n"
      << "  rounds: " << f.schedule.rounds << "\n"
      << "  epochs_per_round: " << fmt_double(f.schedule.epochs_per_round) << "\n"
      << "  alpha: " << fmt_double(f.schedule.alpha) << "\n"
      << "  alpha_mode: " << to_string(f.alpha_mode) << "\n"
      << "  visual_mode: " << to_string(f.visual_mode) << "\n"
      << "  momentum_timing: " << to_string(f.momentum_timing) << "\n"
      << "  clients_per_domain: " << f.clients_per_domain << "\n"
      << "  dirichlet_beta: " << fmt_double(f.dirichlet_beta) << "\n"
      << "  concurrent: " << (f.concurrent ? "true" : "false") << "\n"
      << "optimizer:\n"
      << "  kind: " << to_string(opt.kind) << "\n"
      << "  lr: " << fmt_double(opt.lr) << "\n"
      << "  beta1: " << fmt_double(opt.beta1) << "\n"
      << "  beta2: " << fmt_double(opt.beta2) << "\n"
      << "  eps: " << fmt_double(opt.eps) << "\n"
      << "  momentum: " << fmt_double(opt.momentum) << "\n"
      << "  weight_decay: " << fmt_double(opt.weight_decay) << "\n"
      << "experiment:\n"
      << "  seeds: [";
    for (std::size_t i = 0; i < c.seeds.size(); ++i) o << (i ? ", " : "") << c.seeds[i];
    o << "]\n"
      << "  output_dir: " << YAML::Dump(YAML::Node(c.output_dir.string())) << "\n"
      << "  few_shot: " << c.few_shot << "\n"
      << "  checkpoints: " << (c.checkpoints ? "true" : "false") << "\n"
      << "attack:\n"
      << "  iters: " << c.attack.iters << "\n"
      << "  restarts: " << c.attack.restarts << "\n"
      << "  initial_step: " << fmt_double(c.attack.initial_step) << "\n"
      << "  min_step: " << fmt_double(c.attack.min_step) << "\n"
      << "  seed: " << c.attack.seed << "\n";
    return o.str();
}

// ---------------------------------------------------------------------------
// Runs
// ---------------------------------------------------------------------------

RunSeeds derive_run_seeds(std::uint64_t seed) {
    return {derive_seed(seed, "data"), derive_seed(seed, "encoder"), derive_seed(seed, "prompts"),
            derive_seed(seed, "federation"), derive_seed(seed, "few_shot")};
}

RunSetup prepare_run(const ExperimentConfig& config, std::uint64_t seed) {
    config.validate();
    const RunSeeds rs = derive_run_seeds(seed);
    RunSetup setup;
    DatasetSpec ds = config.dataset;
    ds.seed = rs.data;
    setup.data = generate_domains(ds);
    if (config.few_shot > 0) setup.data = few_shot_subset(setup.data, config.few_shot, rs.few_shot);

    EncoderConfig ec = config.encoder;
    ec.seed = rs.encoder;
    setup.encoders = std::make_shared<const EncoderWeights>(init_encoders(ec));

    setup.options.n_domains = config.dataset.n_domains;
    setup.options.n_classes = config.dataset.n_classes;
    setup.options.prompt_length = config.prompt_length;
    setup.options.tau_d = config.tau_d;
    setup.options.loss = config.loss;
    setup.options.seed = rs.prompts;

    setup.federation = config.federation;
    setup.federation.seed = rs.federation;
    return setup;
}

SeedRun run_seed(const ExperimentConfig& config, std::uint64_t seed, const std::string& method,
                 const std::optional<std::filesystem::path>& checkpoint_dir) {
    RunSetup setup = prepare_run(config, seed);
    Federation fed(VariantSpec{config.variant}, setup.encoders, setup.options, setup.federation, setup.data.train);

    SeedRun run;
    run.method = method;
    run.seed = seed;
    run.encoder_hash_before = setup.encoders->content_hash();
    run.communication = fed.communication();
    run.trainable_parameters = trainable_parameter_count(config.variant, config.dataset.n_domains,
                                                         config.prompt_length, config.encoder.text_width,
                                                         config.encoder.vision_width);
    if (checkpoint_dir) std::filesystem::create_directories(*checkpoint_dir);
    RoundCallback on_round;
    if (checkpoint_dir) {
        on_round = [&](const Federation& f, const RoundMetrics& m) {
            for (const auto& c : f.clients()) {
                const auto name = "seed" + std::to_string(seed) + "_client" + std::to_string(c.id) + "_round" +
                                  std::to_string(m.round) + ".bin";
                save_prompt_checkpoint(*checkpoint_dir / name, make_checkpoint(c.model, m.round));
            }
        };
    }
    run.history = run_federated(fed, setup.data.test, on_round);
    run.encoder_hash_after = fed.encoders().content_hash();
    run.global = make_checkpoint(fed.global_model(), fed.round());
    return run;
}

std::vector<MetricsRow> metrics_rows(const SeedRun& run) {
    std::vector<MetricsRow> rows;
    for (const auto& r : run.history) {
        for (const auto& d : r.domains) {
            rows.push_back({run.method, d.domain, run.seed, r.round, d.accuracy, d.mean_loss,
                            d.mean_true_domain_weight});
        }
    }
    return rows;
}

void write_metrics_jsonl(std::ostream& out, const std::vector<MetricsRow>& rows) {
    for (const auto& r : rows) {
        nlohmann::ordered_json j;
        j["method"] = r.method;
        j["seed"] = r.seed;
        j["round"] = r.round;
        j["domain"] = r.domain;
        j["split"] = "test";
        j["accuracy"] = r.accuracy;
        j["mean_loss"] = r.mean_loss;
        j["mean_true_domain_weight"] = r.mean_true_domain_weight;
        out << j.dump() << '\n';
    }
}

std::vector<MetricsRow> read_metrics_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot read '" + path.string() + "'");
    std::vector<MetricsRow> rows;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (line.empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            rows.push_back({j.at("method").get<std::string>(), j.at("domain").get<std::size_t>(),
                            j.at("seed").get<std::uint64_t>(), j.at("round").get<std::size_t>(),
                            j.at("accuracy").get<double>(), j.at("mean_loss").get<double>(),
                            j.at("mean_true_domain_weight").get<double>()});
        } catch (const nlohmann::json::exception& e) {
            throw DataError(path.string() + ":" + std::to_string(n) + ": " + e.what());
        }
    }
    return rows;
}

std::vector<MethodSummary> summarize(const std::vector<MetricsRow>& rows) {
    std::vector<std::string> order;
    std::map<std::string, std::map<std::uint64_t, std::size_t>> last_round;
    std::size_t n_domains = 0;
    for (const auto& r : rows) {
        if (!last_round.count(r.method)) order.push_back(r.method);
        auto& lr = last_round[r.method][r.seed];
        lr = std::max(lr, r.round);
        n_domains = std::max(n_domains, r.domain + 1);
    }
    std::vector<MethodSummary> out;
    for (const auto& method : order) {
        // per domain: sum and count over (seed, duplicate) rows at the final round
        std::vector<double> acc(n_domains, 0.0), weight(n_domains, 0.0), count(n_domains, 0.0);
        for (const auto& r : rows) {
            if (r.method != method || r.round != last_round[method][r.seed]) continue;
            acc[r.domain] += r.accuracy;
            weight[r.domain] += r.mean_true_domain_weight;
            count[r.domain] += 1.0;
        }
        MethodSummary s;
        s.method = method;
        std::vector<double> w;
        for (std::size_t d = 0; d < n_domains; ++d) {
            if (count[d] == 0.0) continue;
            s.domain_accuracy.push_back(acc[d] / count[d]);
            w.push_back(weight[d] / count[d]);
        }
        s.mean_accuracy = mean_of(s.domain_accuracy);
        double var = 0.0;
        for (double a : s.domain_accuracy) var += (a - s.mean_accuracy) * (a - s.mean_accuracy);
        s.std_across_domains = s.domain_accuracy.empty() ? 0.0 : std::sqrt(var / double(s.domain_accuracy.size()));
        s.mean_true_domain_weight = mean_of(w);
        out.push_back(std::move(s));
    }
    return out;
}

MethodSummary summarize_runs(const std::string& method, const std::vector<SeedRun>& runs) {
    std::vector<MetricsRow> rows;
    for (const auto& run : runs) {
        auto r = metrics_rows(run);
        for (auto& row : r) row.method = method;
        rows.insert(rows.end(), r.begin(), r.end());
    }
    auto s = summarize(rows);
    if (s.empty()) throw StateError("summarize_runs: no metrics");
    return s.front();
}

void write_summary_csv(std::ostream& out, const std::vector<MethodSummary>& rows, std::size_t n_domains) {
    out << "method";
    for (std::size_t d = 0; d < n_domains; ++d) out << ",domain_" << d;
    out << ",avg\n";
    for (const auto& r : rows) {
        out << r.method;
        for (double a : r.domain_accuracy) out << ',' << fmt_full(a);
        out << ',' << fmt_full(r.mean_accuracy) << '\n';
    }
}

void write_comparison_csv(std::ostream& out, const std::vector<MethodSummary>& rows, std::string_view key) {
    out << key << ",mean_accuracy,std_across_domains,mean_true_domain_weight\n";
    for (const auto& r : rows) {
        out << r.method << ',' << fmt_full(r.mean_accuracy) << ',' << fmt_full(r.std_across_domains) << ','
            << fmt_full(r.mean_true_domain_weight) << '\n';
    }
}

std::string render_table(const std::vector<MethodSummary>& rows, std::string_view key) {
    std::size_t width = key.size();
    for (const auto& r : rows) width = std::max(width, r.method.size());
    auto pad = [&](const std::string& s) { return s + std::string(width - s.size(), ' '); };
    std::ostringstream o;
    o << pad(std::string(key)) << "  accuracy    std  weight\n";
    for (const auto& r : rows) {
        char line[128];
        std::snprintf(line, sizeof line, "  %7.2f%%  %5.2f  %6.3f\n", 100.0 * r.mean_accuracy,
                      100.0 * r.std_across_domains, r.mean_true_domain_weight);
        o << pad(r.method) << line;
    }
    return o.str();
}

std::filesystem::path resolve_output_dir(const ExperimentConfig& config) {
    if (const char* env = std::getenv("FEDPROMPT_OUTPUT_DIR"); env && *env) return env;
    return config.output_dir;
}

ExperimentResult run_experiment(const ExperimentConfig& config, std::ostream* log) {
    config.validate();
    ExperimentResult res;
    res.output_dir = resolve_output_dir(config);
    std::filesystem::create_directories(res.output_dir);
    const std::string method(to_string(config.variant));
    res.runs = run_all_seeds(config, method, res.output_dir, log);

    std::vector<MetricsRow> rows;
    for (const auto& run : res.runs) {
        const auto r = metrics_rows(run);
        rows.insert(rows.end(), r.begin(), r.end());
        save_prompt_checkpoint(res.output_dir / ("prompts_seed" + std::to_string(run.seed) + ".bin"), run.global);
    }
    res.summaries = {summarize_runs(method, res.runs)};
    write_file(res.output_dir / "metrics.jsonl", rows_jsonl(rows));
    std::ostringstream csv;
    write_summary_csv(csv, res.summaries, config.dataset.n_domains);
    write_file(res.output_dir / "summary.csv", csv.str());

    nlohmann::ordered_json report;
    const auto& first = res.runs.front();
    report["variant"] = method;
    report["trainable_parameters"] = first.trainable_parameters;
    report["communication"] = {{"download_per_client", first.communication.download_per_client},
                               {"upload_per_client", first.communication.upload_per_client},
                               {"total_per_round", first.communication.total_per_round}};
    report["seeds"] = config.seeds;
    bool frozen = true;
    for (const auto& run : res.runs) frozen = frozen && run.encoder_hash_before == run.encoder_hash_after;
    report["encoder_unchanged"] = frozen;
    report["mean_accuracy"] = res.summaries.front().mean_accuracy;
    write_file(res.output_dir / "report.json", report.dump(2) + "\n");
    return res;
}

ExperimentResult compare_variants(const ExperimentConfig& config, const std::vector<std::string>& variants,
                                  std::ostream* log) {
    if (variants.size() < 2) throw ConfigError("compare needs at least two variants");
    std::vector<ExperimentConfig> configs;
    for (const auto& v : variants) {
        ExperimentConfig c = config;
        c.variant = parse_variant(v);
        c.validate();
        configs.push_back(std::move(c));
    }
    ExperimentResult res;
    res.output_dir = resolve_output_dir(config);
    std::filesystem::create_directories(res.output_dir);
    std::vector<MetricsRow> rows;
    for (std::size_t i = 0; i < configs.size(); ++i) {
        auto runs = run_all_seeds(configs[i], variants[i], res.output_dir, log);
        res.summaries.push_back(summarize_runs(variants[i], runs));
        for (const auto& run : runs) {
            const auto r = metrics_rows(run);
            rows.insert(rows.end(), r.begin(), r.end());
        }
        res.runs.insert(res.runs.end(), std::make_move_iterator(runs.begin()), std::make_move_iterator(runs.end()));
    }
    write_file(res.output_dir / "metrics.jsonl", rows_jsonl(rows));
    std::ostringstream csv;
    write_comparison_csv(csv, res.summaries);
    write_file(res.output_dir / "comparison.csv", csv.str());
    return res;
}

ExperimentConfig apply_sweep_value(const ExperimentConfig& config, std::string_view axis, std::string_view value) {
    ExperimentConfig c = config;
    auto parse_number = [&](auto& out) {
        const auto res = std::from_chars(value.data(), value.data() + value.size(), out);
        if (res.ec != std::errc{} || res.ptr != value.data() + value.size()) {
            throw ConfigError("sweep: '" + std::string(value) + "' is not a valid " + std::string(axis) + " value");
        }
    };
    if (axis == "alpha_mode") {
        c.federation.alpha_mode = parse_alpha_mode(value);
    } else if (axis == "visual_mode") {
        c.federation.visual_mode = parse_visual_mode(value);
    } else if (axis == "prompt_length") {
        parse_number(c.prompt_length);
    } else if (axis == "epochs_per_round") {
        parse_number(c.federation.schedule.epochs_per_round);
    } else {
        throw ConfigError("sweep: unknown axis '" + std::string(axis) +
                          "' (expected alpha_mode, visual_mode, prompt_length, epochs_per_round)");
    }
    c.validate();
    return c;
}

ExperimentResult sweep(const ExperimentConfig& config, std::string_view axis, const std::vector<std::string>& values,
                       std::ostream* log) {
    if (values.empty()) throw ConfigError("sweep: no values given");
    std::vector<ExperimentConfig> configs;
    for (const auto& v : values) configs.push_back(apply_sweep_value(config, axis, v));
    ExperimentResult res;
    res.output_dir = resolve_output_dir(config);
    std::filesystem::create_directories(res.output_dir);
    std::vector<MetricsRow> rows;
    for (std::size_t i = 0; i < configs.size(); ++i) {
        const std::string method = std::string(to_string(config.variant)) + "[" + std::string(axis) + "=" + values[i] + "]";
        auto runs = run_all_seeds(configs[i], method, res.output_dir, log);
        MethodSummary s = summarize_runs(values[i], runs);
        res.summaries.push_back(std::move(s));
        for (const auto& run : runs) {
            const auto r = metrics_rows(run);
            rows.insert(rows.end(), r.begin(), r.end());
        }
        res.runs.insert(res.runs.end(), std::make_move_iterator(runs.begin()), std::make_move_iterator(runs.end()));
    }
    write_file(res.output_dir / "metrics.jsonl", rows_jsonl(rows));
    std::ostringstream csv;
    write_comparison_csv(csv, res.summaries, axis);
    write_file(res.output_dir / ("sweep_" + std::string(axis) + ".csv"), csv.str());
    return res;
}

// ---------------------------------------------------------------------------
// Attack
// ---------------------------------------------------------------------------

GradientCapture make_capture(const ExperimentConfig& config, std::size_t sample_index, bool linear, Tensor* truth) {
    const std::uint64_t seed = config.seeds.front();
    RunSetup setup = prepare_run(config, seed);
    const auto& samples = setup.data.train.samples;
    const SampleRecord& sample = samples[sample_index % samples.size()];
    GradientCapture capture;
    if (linear) {
        LinearSoftmaxModel model(sample.patches.numel(), config.dataset.n_classes, derive_run_seeds(seed).prompts);
        const Tensor x = reshape(sample.patches, {sample.patches.numel()}).detach();
        capture = capture_gradient(model, x, sample.class_id);
        if (truth) *truth = x;
    } else {
        PromptModel model(VariantSpec{config.variant}, setup.encoders, setup.options);
        model.set_owner(sample.domain_id);
        PromptGradientModel attacked(model);
        capture = capture_gradient(attacked, sample.patches, sample.class_id);
        if (truth) *truth = sample.patches.detach();
    }
    capture.owner = sample.domain_id;
    return capture;
}

AttackReport run_attack(const ExperimentConfig& config, const GradientCapture& capture, const Tensor* truth) {
    const std::uint64_t seed = config.seeds.front();
    DlgResult result;
    DlgOptions options = config.attack;
    if (capture.variant == "linear") {
        LinearSoftmaxModel model(capture.input_rows * capture.input_cols, config.dataset.n_classes,
                                 derive_run_seeds(seed).prompts);
        result = dlg_reconstruct(capture, model, options, truth);
    } else {
        if (capture.variant != to_string(config.variant)) {
            throw ConfigError("capture was taken from variant '" + capture.variant + "' but the config runs '" +
                              std::string(to_string(config.variant)) + "'");
        }
        RunSetup setup = prepare_run(config, seed);
        PromptModel model(VariantSpec{config.variant}, setup.encoders, setup.options);
        model.set_owner(capture.owner);
        PromptGradientModel attacked(model);
        result = dlg_reconstruct(capture, attacked, options, truth);
    }
    return {capture.variant, result.evaluations, result.final_objective, result.cosine_to_truth, result.success};
}

void write_attack_jsonl(std::ostream& out, const AttackReport& r) {
    nlohmann::ordered_json j;
    j["variant"] = r.variant;
    j["iters"] = r.iters;
    j["final_objective"] = r.final_objective;
    j["cosine_to_truth"] = r.cosine_to_truth ? nlohmann::ordered_json(*r.cosine_to_truth) : nlohmann::ordered_json();
    j["success"] = r.success;
    out << j.dump() << '\n';
}

}  // namespace fedprompt
