#include "nes/cli.hpp"

#include "nes/check.hpp"
#include "nes/cost_model.hpp"
#include "nes/network.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

namespace nes {

namespace {

using nlohmann::json;

class CheckFailed : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

void write_text(const std::string& path, const std::string& text)
{
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot write " + path);
    f << text;
}

std::string csv_number(double v)
{
    std::ostringstream s;
    s << std::setprecision(17) << v;
    return s.str();
}

struct Options {
    std::string config, checkpoint, out, metrics, layer, strategy = "auto";
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> steps;
    bool csv = false, no_learner = false, ema = false;
    std::size_t trials = 20;
    double tolerance = 1e-5, learner_tolerance = 1e-4;
};

void cmd_train(const Options& o, std::ostream& out)
{
    ExperimentConfig cfg = load_experiment(o.config);
    if (o.seed) cfg.seed = *o.seed;
    if (o.steps) cfg.steps = *o.steps;
    const TrainResult r = train(cfg);
    json s = summary_json(cfg, r);
    if (!o.out.empty()) {
        save_checkpoint(r.network, o.out, !o.no_learner);
        s["checkpoint"] = o.out;
    }
    const std::string metrics = !o.metrics.empty() ? o.metrics : o.out.empty() ? "" : o.out + ".metrics.jsonl";
    if (!metrics.empty()) {
        write_text(metrics, metrics_jsonl(r.log));
        s["metrics"] = metrics;
    }
    if (o.csv) {
        out << "name,seed,steps,final_loss,final_accuracy,compression_rate,index_drift,output_gap\n"
            << cfg.name << ',' << cfg.seed << ',' << cfg.steps << ',' << csv_number(r.final_loss) << ','
            << csv_number(r.final_accuracy) << ',' << csv_number(s["compression_rate"].get<double>()) << ','
            << csv_number(r.index_drift) << ',' << csv_number(r.output_gap) << '\n';
    } else {
        out << s.dump(2) << '\n';
    }
}

InferStrategy parse_strategy(const std::string& s)
{
    if (s == "auto") return InferStrategy::automatic;
    if (s == "product_map") return InferStrategy::product_map;
    if (s == "direct") return InferStrategy::direct;
    throw ConfigError("strategy must be auto, product_map or direct");
}

void cmd_infer(const Options& o, std::ostream& out)
{
    const Network net = load_checkpoint(o.checkpoint);
    ExperimentConfig cfg = load_experiment(o.config);
    if (o.seed) cfg.seed = *o.seed;
    const Dataset data = load_dataset(cfg);
    if (data.sample_shape() != net.input_shape())
        throw DimensionError("dataset samples do not fit the checkpoint input", data.sample_shape(), net.input_shape());
    InferOptions opt;
    opt.strategy = parse_strategy(o.strategy);

    std::vector<Tensor> logits;
    std::vector<MaddReport> reports;
    for (std::size_t i = 0; i < data.size(); ++i) logits.push_back(net.infer(data.samples[i], i == 0 ? &reports : nullptr, opt));
    const LossResult lr = cross_entropy(logits, data.labels);
    if (!o.out.empty()) {
        json l = json::array();
        for (const auto& z : logits) l.push_back(z.values());
        write_text(o.out, l.dump() + "\n");
    }
    if (o.csv) {
        out << "layer,strategy,naive_madd,reuse_madd,measured,engine_bound,ratio,approx_ratio\n";
        for (const auto& r : reports)
            out << r.layer << ',' << r.strategy << ',' << r.naive_madd << ',' << r.reuse_madd << ',' << r.measured << ','
                << r.engine_bound << ',' << csv_number(r.ratio) << ',' << csv_number(r.approx_ratio) << '\n';
        return;
    }
    json s{{"samples", data.size()}, {"accuracy", lr.accuracy}, {"loss", lr.loss}, {"madd_per_sample", madd_summary(reports)}};
    if (!o.out.empty()) s["logits"] = o.out;
    out << s.dump(2) << '\n';
}

void cmd_expand(const Options& o, std::ostream& out)
{
    const Network net = load_checkpoint(o.checkpoint);
    const auto layers = net.epitome_layers();
    if (layers.empty()) throw ConfigError("checkpoint has no epitome layers");
    const EpitomeLayer& l = o.layer.empty() ? *layers.front() : net.layer(o.layer);
    const Tensor w = l.expanded_weights();
    std::string text;
    if (o.csv) {
        std::ostringstream s;
        s << "w,h,c_in,c_out,value\n";
        const Dims4& d = l.plan().weights;
        std::size_t k = 0;
        for (std::size_t i = 0; i < d.width; ++i)
            for (std::size_t j = 0; j < d.height; ++j)
                for (std::size_t m = 0; m < d.in_channels; ++m)
                    for (std::size_t c = 0; c < d.out_channels; ++c) s << i << ',' << j << ',' << m << ',' << c << ',' << csv_number(w[k++]) << '\n';
        text = s.str();
    } else {
        text = json{{"layer", l.name()}, {"shape", w.shape()}, {"values", w.values()}}.dump() + "\n";
    }
    if (!o.out.empty()) {
        write_text(o.out, text);
        if (!o.csv) out << json{{"layer", l.name()}, {"shape", w.shape()}, {"written", o.out}}.dump(2) << '\n';
    } else {
        out << text;
    }
}

void cmd_cost(const Options& o, std::ostream& out)
{
    const ArchConfig cfg = load_arch_config(o.config);
    const std::string text = o.csv ? cost_report_csv(cfg) : cost_report(cfg).dump(2) + "\n";
    if (!o.out.empty()) write_text(o.out, text);
    out << text;
}

void cmd_check_grad(const Options& o, std::ostream& out)
{
    GradCheckOptions g;
    g.epitome_tolerance = o.tolerance;
    g.learner_tolerance = o.learner_tolerance;
    g.ema = o.ema;
    json trials = json::array();
    bool passed = true;
    if (!o.config.empty()) {
        ExperimentConfig cfg = load_experiment(o.config);
        if (o.seed) cfg.seed = *o.seed;
        const Dataset data = load_dataset(cfg);
        Rng rng(cfg.seed);
        Rng init = rng.fork(1);
        const Network net = Network::build(cfg, data.sample_shape(), data.classes, init);
        // First window of up to 4 consecutive samples whose forward pass stays
        // clear of ReLU and index kinks.
        const std::size_t n = std::min<std::size_t>(4, data.size());
        std::size_t start = 0;
        std::vector<Tensor> xs;
        for (;; start += n) {
            if (start + n > data.size()) throw ConfigError("every sample window hits a kink; cannot check gradients");
            xs.assign(data.samples.begin() + static_cast<std::ptrdiff_t>(start),
                      data.samples.begin() + static_cast<std::ptrdiff_t>(start + n));
            const KinkDistance k = kink_distance(net, xs, g.ema);
            if (k.index >= g.kink_margin && k.relu >= 10.0 * g.eps) break;
        }
        const std::vector<std::size_t> ys(data.labels.begin() + static_cast<std::ptrdiff_t>(start),
                                          data.labels.begin() + static_cast<std::ptrdiff_t>(start + n));
        const GradCheckReport r = check_network(net, xs, ys, g);
        passed = r.passed();
        json t = to_json(r);
        t["description"] = cfg.name + " network on samples " + std::to_string(start) + ".." + std::to_string(start + n - 1);
        trials.push_back(t);
    } else {
        Rng rng(o.seed.value_or(1));
        for (std::size_t i = 0; i < o.trials; ++i) {
            const LayerCheck c = check_random_layer(rng, static_cast<LayerKind>(i % 3), g);
            passed = passed && c.report.passed();
            json t = to_json(c.report);
            t["description"] = c.description;
            trials.push_back(t);
        }
    }
    const json s{{"passed", passed}, {"trials", trials}};
    if (o.csv) {
        out << "trial,group,max_rel_error,tolerance,passed\n";
        for (std::size_t i = 0; i < trials.size(); ++i)
            for (const auto& gr : trials[i]["groups"])
                out << i << ',' << gr["name"].get<std::string>() << ',' << csv_number(gr["max_rel_error"].get<double>())
                    << ',' << csv_number(gr["tolerance"].get<double>()) << ',' << (gr["passed"].get<bool>() ? 1 : 0)
                    << '\n';
    } else {
        out << s.dump(2) << '\n';
    }
    if (!o.out.empty()) write_text(o.out, s.dump(2) + "\n");
    if (!passed) throw CheckFailed("gradient check failed");
}

} // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err)
{
    CLI::App app{"Epitome layers: training, inference and cost tools", "nes"};
    app.require_subcommand(1);
    Options o;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--seed", o.seed, "Override the seed");
        sub->add_option("--out", o.out, "Output file");
        sub->add_flag("--csv", o.csv, "CSV instead of JSON");
    };

    CLI::App* train = app.add_subcommand("train", "Train an experiment config and optionally save a checkpoint");
    train->add_option("--config", o.config, "Experiment config")->required()->check(CLI::ExistingFile);
    train->add_option("--metrics", o.metrics, "Per-step metrics log (JSON lines); default <out>.metrics.jsonl");
    train->add_option("--steps", o.steps, "Override the step count");
    train->add_flag("--no-learner", o.no_learner, "Save the checkpoint without learner weights");
    add_common(train);

    CLI::App* infer = app.add_subcommand("infer", "Run a frozen checkpoint over a config's dataset");
    infer->add_option("--checkpoint", o.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
    infer->add_option("--config", o.config, "Experiment config naming the dataset")->required()->check(CLI::ExistingFile);
    infer->add_option("--strategy", o.strategy, "auto, product_map or direct");
    add_common(infer);

    CLI::App* expand = app.add_subcommand("expand", "Write the full weight tensor of a checkpoint layer");
    expand->add_option("--checkpoint", o.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
    expand->add_option("--layer", o.layer, "Layer name (default: first epitome layer)");
    expand->add_option("--config", o.config, "Ignored; accepted for symmetry");
    add_common(expand);

    CLI::App* cost = app.add_subcommand("cost", "Parameter and MAdd report of an architecture config");
    cost->add_option("--config", o.config, "Architecture config")->required()->check(CLI::ExistingFile);
    add_common(cost);

    CLI::App* grad = app.add_subcommand("check-grad", "Finite-difference gradient checks");
    grad->add_option("--config", o.config, "Check this experiment's network instead of random layers")
        ->check(CLI::ExistingFile);
    grad->add_option("--trials", o.trials, "Random layer configurations");
    grad->add_option("--tolerance", o.tolerance, "Relative tolerance for epitome values and biases");
    grad->add_option("--learner-tolerance", o.learner_tolerance, "Relative tolerance for learner weights and inputs");
    grad->add_flag("--ema", o.ema, "Check the EMA-index training mode");
    add_common(grad);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n" << app.help();
        return 1;
    }

    try {
        if (*train) cmd_train(o, out);
        else if (*infer) cmd_infer(o, out);
        else if (*expand) cmd_expand(o, out);
        else if (*cost) cmd_cost(o, out);
        else if (*grad) cmd_check_grad(o, out);
        return 0;
    } catch (const CheckFailed& e) {
        err << "error: " << e.what() << '\n';
        return 1;
    } catch (const nes::ParseError& e) {
        err << "error: " << e.what() << '\n';
        return 1;
    } catch (const TrainingError& e) {
        err << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::invalid_argument& e) { // ConfigError, DimensionError
        err << "error: " << e.what() << '\n';
        return 1;
    } catch (const StateError& e) {
        err << "error: " << e.what() << '\n';
        return 1;
    } catch (const nlohmann::json::exception& e) {
        err << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        err << "internal error: " << e.what() << '\n';
        return 2;
    }
}

} // namespace nes
