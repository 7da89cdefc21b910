#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dune/analysis.hpp"
#include "dune/config.hpp"
#include "dune/gradcheck.hpp"
#include "dune/trainer.hpp"

namespace {

using namespace dune;

std::size_t teacher_slot(const Engine& e, const std::string& id) {
    for (std::size_t i = 0; i < e.teachers.size(); ++i) {
        if (e.teachers[i].id == id) return i;
    }
    throw ConfigError("no teacher '" + id + "' in this config");
}

const DatasetManifest& pick_dataset(const Engine& e, const std::string& requested) {
    if (!requested.empty()) return e.registry.find(requested);
    if (e.registry.manifests().empty()) throw ConfigError("config declares no datasets");
    return e.registry.manifests().front();
}

std::vector<SampleMeta> all_samples(const Engine& e, const DatasetManifest& ds) {
    std::vector<SampleMeta> out;
    out.reserve(ds.count);
    for (std::size_t i = 0; i < ds.count; ++i) out.push_back(fetch_sample(e.registry, ds.id, i));
    return out;
}

// stdout unless a path was given
class CsvSink {
public:
    explicit CsvSink(const std::string& path) {
        if (!path.empty()) {
            file_.open(path, std::ios::trunc);
            if (!file_) throw IoError("cannot open for writing: " + path);
        }
    }
    std::ostream& out() { return file_.is_open() ? file_ : std::cout; }
    bool to_file() const { return file_.is_open(); }

private:
    std::ofstream file_;
};

int cmd_distill(const std::string& config_path) {
    RunConfig cfg = parse_config(config_path);
    TrainResult r = train(cfg, &std::cout);
    std::cout << "log: " << r.log_path << "\n";
    std::cout << "checkpoint: " << r.checkpoint_path << "\n";
    if (cfg.train.steps > 0) {
        std::cout << "total loss: " << r.first_total << " (step 1) -> " << r.final_total
                  << " (step " << cfg.train.steps << ")\n";
    }
    return 0;
}

int cmd_gradcheck() {
    std::vector<GradCheckEntry> entries = run_gradcheck();
    bool ok = true;
    std::printf("%-32s %14s\n", "op", "max_rel_err");
    for (const GradCheckEntry& e : entries) {
        std::printf("%-32s %14.3e%s\n", e.name.c_str(), e.max_rel_err,
                    e.max_rel_err < kGradCheckTol ? "" : "  FAIL");
        ok = ok && e.max_rel_err < kGradCheckTol;
    }
    std::printf("%zu ops checked, tolerance %.1e: %s\n", entries.size(), kGradCheckTol,
                ok ? "all passed" : "FAILURES ABOVE");
    return ok ? 0 : 1;
}

int cmd_probe(const std::string& config_path, const std::string& ckpt_path,
              const std::string& projector_id, std::size_t epochs) {
    RunConfig cfg = parse_config(config_path);
    Engine e = Engine::build(cfg);
    e.load_params(Checkpoint::load(ckpt_path));
    const ProjectorParams* proj = nullptr;
    if (!projector_id.empty()) proj = &e.projectors[teacher_slot(e, projector_id)];
    e.set_trainable(false);
    ProbeResult pr = linear_probe(e.student, proj, epochs, cfg.train.seed);
    std::cout << "train_accuracy: " << pr.train_accuracy << "\n";
    std::cout << "accuracy: " << pr.accuracy << "\n";
    return 0;
}

int cmd_dump_features(const std::string& config_path, const std::string& target,
                      const std::string& out_path, const std::string& dataset_id,
                      const std::string& ckpt_path) {
    RunConfig cfg = parse_config(config_path);
    Engine e = Engine::build(cfg);
    const DatasetManifest& ds = pick_dataset(e, dataset_id);
    std::vector<SampleMeta> samples = all_samples(e, ds);

    std::function<TokenSet(const SampleMeta&)> producer;
    if (target == "student" || target.rfind("student.", 0) == 0) {
        if (ckpt_path.empty()) {
            throw ConfigError("student feature dumps need --checkpoint");
        }
        e.load_params(Checkpoint::load(ckpt_path));
        e.set_trainable(false);
        if (target == "student") {
            producer = [&e](const SampleMeta& s) {
                NoGradScope ng;
                return e.student_forward(s.pixels, nullptr);
            };
        } else {
            const std::size_t slot = teacher_slot(e, target.substr(8));
            producer = [&e, slot](const SampleMeta& s) {
                NoGradScope ng;
                std::vector<TokenSet> inters;
                TokenSet z = e.student_forward(s.pixels, &inters);
                return project(e.projectors[slot], z, inters);
            };
        }
    } else {
        const std::size_t slot = teacher_slot(e, target);
        producer = [&e, slot](const SampleMeta& s) { return teacher_forward(e.teachers[slot], s); };
    }

    FeatureFile file = collect_features(samples, producer);
    file.write(out_path);
    std::cout << "wrote " << file.records.size() << " records (dim " << file.dim << ", grid "
              << file.grid_h << "x" << file.grid_w << ") to " << out_path << "\n";
    return 0;
}

int cmd_analyze_pca(const std::string& features_path, const std::string& pool,
                    const std::string& out_path) {
    FeatureFile file = FeatureFile::read(features_path);
    FeatureMatrix m = feature_matrix(file, pooling_from_string(pool));
    m.source = features_path;
    if (m.rows <= m.cols) {
        std::cerr << "warning: " << m.rows << " rows for " << m.cols
                  << " dimensions; curve will be noisy\n";
    }
    std::vector<double> curve = explained_variance_curve(m);
    CsvSink sink(out_path);
    sink.out() << "component_index,cumulative_ratio\n";
    sink.out().precision(17);
    for (std::size_t i = 0; i < curve.size(); ++i) {
        sink.out() << (i + 1) << "," << curve[i] << "\n";
    }
    if (sink.to_file()) std::cout << "wrote " << curve.size() << " components to " << out_path << "\n";
    return 0;
}

int cmd_analyze_losscorr(const std::string& log_path, const std::string& pair,
                         const std::string& out_path) {
    TrainingLog log = read_training_log(log_path);
    if (!pair.empty()) {
        const std::size_t comma = pair.find(',');
        if (comma == std::string::npos || comma == 0 || comma + 1 == pair.size()) {
            throw ConfigError("--pair wants two teacher ids, e.g. t1,t2");
        }
        const std::size_t a = log.teacher_index(pair.substr(0, comma));
        const std::size_t b = log.teacher_index(pair.substr(comma + 1));
        std::cout.precision(17);
        std::cout << loss_update_correlation(log.teacher_total(a), log.teacher_total(b)) << "\n";
        return 0;
    }
    CsvSink sink(out_path);
    sink.out() << "pair,r\n";
    sink.out().precision(17);
    for (std::size_t a = 0; a < log.teacher_ids.size(); ++a) {
        for (std::size_t b = a + 1; b < log.teacher_ids.size(); ++b) {
            sink.out() << log.teacher_ids[a] << ":" << log.teacher_ids[b] << ","
                       << loss_update_correlation(log.teacher_total(a), log.teacher_total(b))
                       << "\n";
        }
    }
    if (sink.to_file()) std::cout << "wrote pairwise correlations to " << out_path << "\n";
    return 0;
}

int cmd_analyze_attn(const std::string& config_path, const std::string& ckpt_path, long layer,
                     std::size_t k, std::size_t n_images, const std::string& dataset_id,
                     const std::string& out_path) {
    RunConfig cfg = parse_config(config_path);
    Engine e = Engine::build(cfg);
    e.load_params(Checkpoint::load(ckpt_path));
    e.set_trainable(false);
    const DatasetManifest& ds = pick_dataset(e, dataset_id);
    const std::size_t layer_index =
        layer < 0 ? cfg.student.depth - 1 : static_cast<std::size_t>(layer);

    const std::size_t n = std::min(n_images, ds.count);
    if (n == 0) throw ConfigError("dataset '" + ds.id + "' has no images");
    std::vector<std::vector<double>> maps;
    const std::size_t tokens = cfg.student.token_count();
    for (std::size_t i = 0; i < n; ++i) {
        SampleMeta s = fetch_sample(e.registry, ds.id, i);
        Tensor att = attention_probabilities(s.pixels, e.student, layer_index);
        const double* p = att.values().data();
        for (std::size_t h = 0; h < cfg.student.heads; ++h) {
            maps.emplace_back(p + h * tokens * tokens, p + (h + 1) * tokens * tokens);
        }
    }

    Rng rng = make_stream(cfg.train.seed, "kmedoids");
    KMedoidsResult res = kmedoids(maps, k, 100, rng);
    CsvSink sink(out_path);
    sink.out() << "map_index,cluster\n";
    for (std::size_t i = 0; i < res.assignment.size(); ++i) {
        sink.out() << i << "," << res.assignment[i] << "\n";
    }
    if (sink.to_file()) {
        std::cout << "clustered " << maps.size() << " maps (" << n << " images x "
                  << cfg.student.heads << " heads, layer " << layer_index << ") into " << k
                  << " groups; medoids:";
        for (std::size_t m : res.medoids) std::cout << " " << m;
        std::cout << "\nwrote assignments to " << out_path << "\n";
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"dune: multi-teacher co-distillation at desk scale"};
    app.require_subcommand(1);

    std::string config_path, ckpt_path, out_path, dataset_id, target;
    std::string projector_id, pool = "patches", pair;
    std::size_t epochs = 300, k = 9, n_images = 16;
    long layer = -1;

    CLI::App* distill = app.add_subcommand("distill", "Train a student against the configured teachers");
    distill->add_option("config", config_path, "run configuration file")->required();

    app.add_subcommand("gradcheck",
                       "Verify every op and composite against central finite differences");

    CLI::App* probe = app.add_subcommand(
        "probe", "Train a linear head on frozen features over a built-in separable task");
    probe->add_option("config", config_path, "run configuration file")->required();
    probe->add_option("checkpoint", ckpt_path, "checkpoint to restore")->required();
    probe->add_option("--projector", projector_id, "stack this teacher's frozen projector");
    probe->add_option("--epochs", epochs, "full-batch head updates (default 300)");

    CLI::App* dump = app.add_subcommand("dump-features", "Write a feature container for a producer");
    dump->add_option("config", config_path, "run configuration file")->required();
    dump->add_option("target", target, "teacher id, 'student', or 'student.<teacher-id>'")
        ->required();
    dump->add_option("out", out_path, "output feature file")->required();
    dump->add_option("--dataset", dataset_id, "dataset id (default: first in config)");
    dump->add_option("--checkpoint", ckpt_path, "checkpoint (required for student targets)");

    CLI::App* analyze = app.add_subcommand("analyze", "Feature and log diagnostics");
    analyze->require_subcommand(1);

    std::string features_path, log_path;
    CLI::App* pca = analyze->add_subcommand("pca", "Cumulative explained-variance curve");
    pca->add_option("features", features_path, "feature file")->required();
    pca->add_option("--pool", pool, "rows to use: patches|cls|all (default patches)");
    pca->add_option("--out", out_path, "CSV destination (default stdout)");

    CLI::App* losscorr = analyze->add_subcommand("losscorr", "Loss-delta Pearson correlations");
    losscorr->add_option("log", log_path, "training log CSV")->required();
    losscorr->add_option("--pair", pair, "two teacher ids 'a,b'; prints a single r");
    losscorr->add_option("--out", out_path, "CSV destination (default stdout)");

    CLI::App* attn = analyze->add_subcommand("attn", "k-medoids clustering of attention maps");
    attn->add_option("config", config_path, "run configuration file")->required();
    attn->add_option("checkpoint", ckpt_path, "checkpoint to restore")->required();
    attn->add_option("--layer", layer, "block index (default: last)");
    attn->add_option("--k", k, "cluster count (default 9)");
    attn->add_option("--images", n_images, "images to sample (default 16)");
    attn->add_option("--dataset", dataset_id, "dataset id (default: first in config)");
    attn->add_option("--out", out_path, "CSV destination (default stdout)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (app.got_subcommand(distill)) return cmd_distill(config_path);
        if (app.got_subcommand("gradcheck")) return cmd_gradcheck();
        if (app.got_subcommand(probe)) return cmd_probe(config_path, ckpt_path, projector_id, epochs);
        if (app.got_subcommand(dump)) {
            return cmd_dump_features(config_path, target, out_path, dataset_id, ckpt_path);
        }
        if (app.got_subcommand(analyze)) {
            if (analyze->got_subcommand(pca)) return cmd_analyze_pca(features_path, pool, out_path);
            if (analyze->got_subcommand(losscorr)) {
                return cmd_analyze_losscorr(log_path, pair, out_path);
            }
            if (analyze->got_subcommand(attn)) {
                return cmd_analyze_attn(config_path, ckpt_path, layer, k, n_images, dataset_id,
                                        out_path);
            }
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
