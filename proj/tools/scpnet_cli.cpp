// Command-line front end: synth, build-prior, train, eval, inspect-graph.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "scpnet/scpnet.hpp"

namespace fs = std::filesystem;
using namespace scpnet;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

struct Failure {
    std::string message;
    int code;
};

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Runs one pipeline stage and tags any error with the stage name. Bad
// hyperparameters count as usage errors; everything else is a runtime failure.
template <class F>
auto stage(const std::string& name, F&& body) {
    try {
        return body();
    } catch (const ParameterError& e) {
        throw Failure{name + ": " + e.what(), kExitUsage};
    } catch (const Error& e) {
        throw Failure{name + ": " + e.what(), kExitFailure};
    } catch (const fs::filesystem_error& e) {
        throw Failure{name + ": " + e.what(), kExitFailure};
    }
}

std::string key_of(const CLI::Option* opt) {
    std::string name = opt->get_single_name();
    name.erase(0, name.find_first_not_of('-'));
    return name;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

/// A subcommand plus its optional `key = value` config file. File values
/// fill only options that were not given on the command line.
class Command {
public:
    Command(CLI::App& app, const std::string& name, const std::string& help) : sub_(app.add_subcommand(name, help)) {
        sub_->add_option("--config", config_path_, "Flat `key = value` file; flags override its values");
    }

    CLI::App* app() const { return sub_; }
    bool selected() const { return sub_->parsed(); }

    template <class T>
    CLI::Option* opt(const std::string& key, T& target, const std::string& help) {
        return sub_->add_option("--" + key, target, help)->capture_default_str();
    }

    void require(std::vector<std::string> keys) { required_ = std::move(keys); }

    void apply_config_file() {
        if (!config_path_.empty()) {
            std::ifstream in(config_path_);
            if (!in) throw Failure{"reading config: cannot open '" + config_path_ + "'", kExitFailure};
            std::string line;
            std::size_t lineno = 0;
            while (std::getline(in, line)) {
                ++lineno;
                const std::string where = config_path_ + ":" + std::to_string(lineno) + ": ";
                const std::string text = trim(line.substr(0, line.find('#')));
                if (text.empty()) continue;
                const auto eq = text.find('=');
                if (eq == std::string::npos) throw UsageError(where + "expected `key = value`");
                const std::string key = trim(text.substr(0, eq)), value = trim(text.substr(eq + 1));
                CLI::Option* o = key == "config" ? nullptr : sub_->get_option_no_throw("--" + key);
                if (!o) throw UsageError(where + "unknown key '" + key + "' for " + sub_->get_name());
                if (value.empty()) throw UsageError(where + "missing value for '" + key + "'");
                if (o->count() > 0) continue;
                try {
                    o->add_result(value);
                    o->run_callback();
                } catch (const CLI::ParseError& e) {
                    throw UsageError(where + e.what());
                }
            }
        }
        for (const auto& key : required_)
            if (sub_->get_option("--" + key)->count() == 0)
                throw UsageError(sub_->get_name() + ": --" + key + " is required (flag or config key)");
    }

    // Every option as `key = value`, usable as a config file for the same command.
    void print_resolved(std::ostream& os) const {
        os << "# " << sub_->get_name() << " resolved config\n";
        for (const CLI::Option* o : sub_->get_options()) {
            const std::string key = key_of(o);
            if (key == "help" || key == "config") continue;
            std::string value = o->count() ? o->results().back() : o->get_default_str();
            os << key << " = " << (value.empty() ? "\"\"" : value) << '\n';
        }
        os.flush();
    }

private:
    CLI::App* sub_;
    std::string config_path_;
    std::vector<std::string> required_;
};

void check_output_dir(const fs::path& p) {
    const fs::path parent = p.parent_path();
    if (!parent.empty() && !fs::is_directory(parent))
        throw IoError("output directory '" + parent.string() + "' does not exist");
}

void add_prior_options(Command& c, std::size_t& K, double& s, double& tau_prime) {
    c.opt("K", K, "Off-diagonal neighbours kept per label")->check(CLI::PositiveNumber);
    c.opt("s", s, "Total off-diagonal weight per row")->check(CLI::Range(0.0, 1.0));
    c.opt("tau_prime", tau_prime, "Softmax temperature of the graph")->check(CLI::PositiveNumber);
}

void add_augment_options(Command& c, AugmentConfig& a) {
    c.opt("sigma_weak", a.sigma_weak, "Weak view noise norm")->check(CLI::NonNegativeNumber);
    c.opt("sigma_strong", a.sigma_strong, "Strong view noise norm")->check(CLI::NonNegativeNumber);
    c.opt("dropout_strong", a.dropout_strong, "Strong view dropout rate")->check(CLI::Range(0.0, 1.0));
}

// ---------------------------------------------------------------- synth

struct SynthArgs {
    SynthConfig cfg;
    std::string out;
    std::string mask = "single";
    double mask_ratio = 0.5;
};

void register_synth(Command& c, SynthArgs& a) {
    c.opt("seed", a.cfg.seed, "Random seed (mandatory)");
    c.opt("out", a.out, "Output directory");
    c.opt("n_labels", a.cfg.n_labels, "Number of labels");
    c.opt("d", a.cfg.d, "Feature dimension");
    c.opt("n_clusters", a.cfg.n_clusters, "Planted label clusters");
    c.opt("n_train", a.cfg.n_train, "Training samples");
    c.opt("n_test", a.cfg.n_test, "Test samples");
    c.opt("noise", a.cfg.noise, "Feature noise norm");
    c.opt("emb_noise", a.cfg.emb_noise, "Label embedding spread around its cluster centre");
    c.opt("p_in", a.cfg.p_in, "Positive rate of in-cluster labels");
    c.opt("p_out", a.cfg.p_out, "Positive rate of out-of-cluster labels");
    add_augment_options(c, a.cfg.augment);
    c.opt("mask", a.mask, "Training label masking: none, single or partial")
        ->check(CLI::IsMember({"none", "single", "partial"}));
    c.opt("mask_ratio", a.mask_ratio, "Fraction of annotations kept by partial masking");
    c.require({"seed", "out"});
}

int run_synth(const SynthArgs& a) {
    const MaskMode mode = parse_mask_mode(a.mask);
    if (mode == MaskMode::Partial && !(a.mask_ratio > 0.0 && a.mask_ratio <= 1.0))
        throw UsageError("synth: mask_ratio must lie in (0, 1]");
    SynthData sd = stage("generating data", [&] {
        SynthData d = synth_generate(a.cfg);
        apply_mask(d.train, mode, a.mask_ratio, mix_seed(a.cfg.seed, 50));
        return d;
    });
    const fs::path out = a.out;
    stage("writing output", [&] {
        fs::create_directories(out);
        write_embeddings(out / "embeddings.txt", sd.embeddings);
        write_dataset(out / "train.jsonl", sd.train);
        write_dataset(out / "test.jsonl", sd.test);
        write_adjacency(out / "cooccurrence.txt", sd.cooccurrence, sd.embeddings.names);
    });
    std::cout << "wrote " << sd.train.samples.size() << " train and " << sd.test.samples.size() << " test samples, "
              << sd.embeddings.size() << " labels to " << out.string() << '\n';
    return kExitOk;
}

// ---------------------------------------------------------------- build-prior

struct PriorArgs {
    std::string emb, out;
    std::size_t K = TrainConfig{}.K;
    double s = 0.2;
    double tau_prime = 1.0;
};

void register_build_prior(Command& c, PriorArgs& a) {
    c.opt("emb", a.emb, "Label embedding file");
    c.opt("out", a.out, "Adjacency output file");
    add_prior_options(c, a.K, a.s, a.tau_prime);
    c.require({"emb", "out"});
}

int run_build_prior(const PriorArgs& a) {
    const LabelEmbeddings emb = stage("reading embeddings", [&] { return read_embeddings(a.emb); });
    const PriorGraph g = stage("building graph", [&] { return build_prior(emb, a.K, a.s, a.tau_prime); });
    stage("writing graph", [&] {
        check_output_dir(a.out);
        write_adjacency(a.out, g.A_star, emb.names);
    });
    std::cout << "wrote " << g.size() << "x" << g.size() << " graph to " << a.out << '\n';
    return kExitOk;
}

// ---------------------------------------------------------------- train

struct TrainArgs {
    TrainConfig cfg;
    std::string train, test, emb, log, checkpoint, graph_out;
    std::string graph_mode = "static";
};

void register_train(Command& c, TrainArgs& a) {
    TrainConfig& t = a.cfg;
    c.opt("seed", t.seed, "Random seed (mandatory)");
    c.opt("train", a.train, "Training dataset file");
    c.opt("test", a.test, "Optional test dataset, evaluated after every epoch");
    c.opt("emb", a.emb, "Label embedding file");
    c.opt("log", a.log, "Per-epoch log output (CSV)");
    c.opt("checkpoint", a.checkpoint, "Model checkpoint output");
    c.opt("graph_out", a.graph_out, "Optional output for the final graph");
    c.opt("epochs", t.epochs, "Training epochs")->check(CLI::PositiveNumber);
    c.opt("batch_size", t.batch_size, "Mini-batch size")->check(CLI::PositiveNumber);
    c.opt("lr", t.adam.lr, "Adam learning rate")->check(CLI::PositiveNumber);
    c.opt("adam_beta1", t.adam.beta1, "Adam first-moment decay");
    c.opt("adam_beta2", t.adam.beta2, "Adam second-moment decay");
    c.opt("adam_eps", t.adam.eps, "Adam denominator epsilon");
    c.opt("graph_mode", a.graph_mode, "static, dynamic or none")->check(CLI::IsMember({"static", "dynamic", "none"}));
    add_prior_options(c, t.K, t.s, t.tau_prime);
    c.opt("enable_sam", t.enable_sam, "Use the GCN semantic association module");
    c.opt("enable_cst", t.enable_cst, "Use the consistency loss");
    c.opt("enable_dstl", t.enable_dstl, "Use the calibrated distillation loss");
    c.opt("lambda_cst", t.weights.lambda_cst, "Consistency loss weight");
    c.opt("lambda_dstl", t.weights.lambda_dstl, "Distillation loss weight");
    c.opt("alpha", t.weights.alpha, "Focal exponent");
    c.opt("beta", t.weights.beta, "Pseudo-positive threshold for unannotated labels");
    c.opt("beta_ramp_epochs", t.beta_ramp_epochs, "Epochs over which beta ramps down from 1 (0 disables)");
    c.opt("margin", t.weights.margin, "Positive-branch logit margin");
    c.opt("K_conf", t.weights.K_conf, "Maximum confident labels per sample");
    c.opt("T_base", t.T_base, "Base confidence threshold");
    c.opt("T_min", t.T_min, "Lowest per-class threshold");
    c.opt("gcn_layers", t.gcn_layers, "GCN layers")->check(CLI::PositiveNumber);
    c.opt("tau", t.tau, "Likelihood temperature")->check(CLI::PositiveNumber);
    c.opt("leaky_slope", t.leaky_slope, "LeakyReLU negative slope");
    c.opt("reaugment", t.reaugment, "Redraw weak/strong views every epoch");
    add_augment_options(c, t.augment);
    c.require({"seed", "train", "emb", "log", "checkpoint"});
}

std::string fmt_opt(const std::optional<double>& v) {
    if (!v) return "NA";
    std::ostringstream os;
    os << std::fixed << std::setprecision(4) << *v;
    return os.str();
}

int run_train(TrainArgs& a) {
    a.cfg.graph_mode = parse_graph_mode(a.graph_mode);
    const LabelEmbeddings emb = stage("reading embeddings", [&] { return read_embeddings(a.emb); });
    const Dataset train_set = stage("reading training set", [&] { return read_dataset(a.train); });
    std::optional<Dataset> test_set;
    if (!a.test.empty()) test_set = stage("reading test set", [&] { return read_dataset(a.test); });
    stage("checking outputs", [&] {
        for (const auto& p : {a.log, a.checkpoint, a.graph_out})
            if (!p.empty()) check_output_dir(p);
    });
    if (test_set && test_set->names != train_set.names)
        throw Failure{"reading test set: label names differ from the training set", kExitFailure};
    if (emb.names != train_set.names)
        throw Failure{"reading embeddings: label names differ from the training set", kExitFailure};

    Trainer trainer = stage("initialising model", [&] {
        return Trainer(a.cfg, train_set, emb, test_set ? &*test_set : nullptr);
    });
    stage("training", [&] {
        for (std::size_t e = 0; e < a.cfg.epochs; ++e) {
            trainer.run_epoch();
            const EpochRecord& r = trainer.log().epochs.back();
            std::cout << "epoch " << r.epoch << '/' << a.cfg.epochs << " loss " << std::fixed << std::setprecision(5)
                      << r.loss_total << " cls " << r.loss_cls << " cst " << r.loss_cst << " dstl " << r.loss_dstl
                      << " precision " << fmt_opt(r.pseudo_precision) << " test_mAP " << fmt_opt(r.test_map)
                      << std::defaultfloat << std::endl;
        }
    });
    stage("writing output", [&] {
        detail::write_text_file(a.log, format_train_log(trainer.log()));
        write_checkpoint(a.checkpoint, trainer.params());
        if (!a.graph_out.empty()) write_adjacency(a.graph_out, trainer.graph().A_star, emb.names);
    });
    return kExitOk;
}

// ---------------------------------------------------------------- eval

struct EvalArgs {
    std::string checkpoint, data, graph, out;
    bool enable_sam = true;
};

void register_eval(Command& c, EvalArgs& a) {
    c.opt("checkpoint", a.checkpoint, "Model checkpoint");
    c.opt("data", a.data, "Dataset to score");
    c.opt("graph", a.graph, "Graph used by the GCN module (adjacency file)");
    c.opt("enable_sam", a.enable_sam, "Apply the GCN module (requires --graph)");
    c.opt("out", a.out, "Report output (CSV); printed to stdout when empty");
    c.require({"checkpoint", "data"});
}

int run_eval(const EvalArgs& a) {
    if (a.enable_sam && a.graph.empty()) throw UsageError("eval: --graph is required unless --enable_sam false");
    const ModelParams params = stage("reading checkpoint", [&] { return read_checkpoint(a.checkpoint); });
    const Dataset ds = stage("reading dataset", [&] { return read_dataset(a.data); });
    if (ds.n_labels != params.labels() || ds.d != params.dim())
        throw Failure{"reading dataset: dataset is " + std::to_string(ds.n_labels) + " labels x " +
                          std::to_string(ds.d) + " dims, checkpoint is " + std::to_string(params.labels()) + " x " +
                          std::to_string(params.dim()),
                      kExitFailure};
    PriorGraph graph = identity_graph(params.labels());
    if (a.enable_sam) {
        graph = stage("reading graph", [&] {
            const Adjacency adj = read_adjacency(a.graph);
            if (adj.names != ds.names) throw ValidationError("graph label names differ from the dataset");
            return graph_from_adjacency(adj.A);
        });
    }
    const MapReport rep = stage("evaluating", [&] { return mean_ap(score_dataset(params, graph, a.enable_sam, ds)); });
    const std::string report = format_eval_report(rep, ds.names);
    if (a.out.empty()) {
        std::cout << report;
    } else {
        stage("writing report", [&] {
            check_output_dir(a.out);
            detail::write_text_file(a.out, report);
        });
        std::cout << "mAP " << std::setprecision(6) << rep.map << " over " << rep.per_class.size() - rep.skipped()
                  << " classes (" << rep.skipped() << " skipped)\n";
    }
    return kExitOk;
}

// ---------------------------------------------------------------- inspect-graph

struct InspectArgs {
    PriorArgs prior;
    std::string checkpoint;
    std::string stage_name = "A_star";
    std::size_t top = 3;
};

void register_inspect(Command& c, InspectArgs& a) {
    c.opt("emb", a.prior.emb, "Label embedding file (names, and vectors unless --checkpoint)");
    c.opt("checkpoint", a.checkpoint, "Take label vectors from a checkpoint's learned table");
    add_prior_options(c, a.prior.K, a.prior.s, a.prior.tau_prime);
    c.opt("stage", a.stage_name, "Matrix to export: A, A_prime, A_bar or A_star")
        ->check(CLI::IsMember({"A", "A_prime", "A_bar", "A_star"}));
    c.opt("top", a.top, "Neighbours listed per label");
    c.opt("out", a.prior.out, "Optional adjacency export of the chosen stage");
    c.require({"emb"});
}

int run_inspect(const InspectArgs& a) {
    const LabelEmbeddings emb = stage("reading embeddings", [&] { return read_embeddings(a.prior.emb); });
    Matrix vectors = emb.E;
    if (!a.checkpoint.empty()) {
        const ModelParams params = stage("reading checkpoint", [&] { return read_checkpoint(a.checkpoint); });
        if (params.labels() != emb.size())
            throw Failure{"reading checkpoint: label count differs from the embedding file", kExitFailure};
        vectors = params.Z0;
    }
    const PriorGraph g = stage("building graph", [&] {
        return detail::build_graph_from(vectors, a.prior.K, a.prior.s, a.prior.tau_prime, GraphMode::Static);
    });
    const std::map<std::string, const Matrix*> stages{
        {"A", &g.A}, {"A_prime", &g.A_prime}, {"A_bar", &g.A_bar}, {"A_star", &g.A_star}};
    const Matrix& m = *stages.at(a.stage_name);

    const std::size_t n = g.size();
    std::cout << a.stage_name << ": " << n << " labels, K " << a.prior.K << ", s " << a.prior.s << ", tau_prime "
              << a.prior.tau_prime << '\n'
              << std::fixed << std::setprecision(4);
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<std::size_t> nb;
        for (std::size_t j = 0; j < n; ++j)
            if (j != i && m(i, j) != 0.0) nb.push_back(j);
        std::stable_sort(nb.begin(), nb.end(), [&](std::size_t x, std::size_t y) { return m(i, x) > m(i, y); });
        std::cout << emb.names[i] << "  self " << m(i, i) << "  nonzero " << nb.size() << " ";
        for (std::size_t k = 0; k < std::min(a.top, nb.size()); ++k)
            std::cout << ' ' << emb.names[nb[k]] << ' ' << m(i, nb[k]);
        std::cout << '\n';
    }
    std::cout << std::defaultfloat;
    if (!a.prior.out.empty()) {
        stage("writing graph", [&] {
            check_output_dir(a.prior.out);
            write_adjacency(a.prior.out, m, emb.names);
        });
    }
    return kExitOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Label-graph prior multi-label classifier on fixed features"};
    app.require_subcommand(1);

    SynthArgs synth_args;
    PriorArgs prior_args;
    TrainArgs train_args;
    EvalArgs eval_args;
    InspectArgs inspect_args;

    Command synth(app, "synth", "Generate a synthetic dataset with planted label clusters");
    register_synth(synth, synth_args);
    Command build(app, "build-prior", "Build the label graph from embeddings");
    register_build_prior(build, prior_args);
    Command trainc(app, "train", "Train a model");
    register_train(trainc, train_args);
    Command evalc(app, "eval", "Score a dataset with a trained model and report AP per class");
    register_eval(evalc, eval_args);
    Command inspect(app, "inspect-graph", "Print and optionally export the graph pipeline stages");
    register_inspect(inspect, inspect_args);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    Command* active = nullptr;
    for (Command* c : {&synth, &build, &trainc, &evalc, &inspect})
        if (c->selected()) active = c;
    const std::string name = active->app()->get_name();
    try {
        active->apply_config_file();
        active->print_resolved(std::cout);
        if (active == &synth) return run_synth(synth_args);
        if (active == &build) return run_build_prior(prior_args);
        if (active == &trainc) return run_train(train_args);
        if (active == &evalc) return run_eval(eval_args);
        return run_inspect(inspect_args);
    } catch (const UsageError& e) {
        std::cerr << "scpnet " << name << ": usage error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const ParameterError& e) {
        std::cerr << "scpnet " << name << ": usage error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const Failure& f) {
        std::cerr << "scpnet " << name << ": " << (f.code == kExitUsage ? "usage error in " : "failed at ") << f.message
                  << '\n';
        return f.code;
    }
}
