#include "dune/config.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

namespace dune {

ViTConfig TeacherDecl::resolve_arch(const ViTConfig& student) const {
    ViTConfig cfg = student;
    if (width != 0) cfg.dim = width;
    if (depth != 0) cfg.depth = depth;
    if (heads != 0) cfg.heads = heads;
    if (patch_size != 0) cfg.patch_size = patch_size;
    if (mlp_ratio != 0.0) cfg.mlp_ratio = mlp_ratio;
    return cfg;
}

std::size_t RunConfig::group_count() const {
    bool generic = false;
    for (const auto& d : datasets) generic = generic || d.owner == "generic";
    return teachers.size() + (generic ? 1 : 0);
}

double RunConfig::resolved_lr_max() const {
    if (!optim.lr_auto) return optim.lr_max;
    return 3e-4 * static_cast<double>(batch_size()) / 256.0;
}

std::vector<std::string> RunConfig::teacher_ids() const {
    std::vector<std::string> ids;
    for (const auto& t : teachers) ids.push_back(t.id);
    return ids;
}

void RunConfig::validate() const {
    student.validate();
    if (teachers.empty()) throw ConfigError("no teachers declared");
    for (const TeacherDecl& t : teachers) {
        if (t.features.empty()) {
            t.resolve_arch(student).validate();
        }
    }
    if (datasets.empty()) throw ConfigError("no datasets declared");
    bool generic = false;
    for (const DatasetManifest& d : datasets) {
        if (d.synthetic && d.count == 0) {
            throw ConfigError("dataset '" + d.id + "' needs a positive count");
        }
        if (!d.synthetic && d.dir.empty()) {
            throw ConfigError("dataset '" + d.id + "' needs either a count (synthetic) or a dir");
        }
        const bool owner_ok = d.owner == "generic" ||
                              std::any_of(teachers.begin(), teachers.end(),
                                          [&](const TeacherDecl& t) { return t.id == d.owner; });
        if (!owner_ok) throw ConfigError("dataset '" + d.id + "' has unknown owner '" + d.owner + "'");
        if (d.image_size != student.image_size || d.channels != student.channels) {
            throw ConfigError("dataset '" + d.id + "' geometry " + std::to_string(d.channels) + "x" +
                              std::to_string(d.image_size) + " does not match the student's " +
                              std::to_string(student.channels) + "x" + std::to_string(student.image_size));
        }
        generic = generic || d.owner == "generic";
    }
    for (const TeacherDecl& t : teachers) {
        const bool owns = std::any_of(datasets.begin(), datasets.end(),
                                      [&](const DatasetManifest& d) { return d.owner == t.id; });
        if (!owns) throw ConfigError("teacher '" + t.id + "' owns no dataset");
    }
    if (strategy == ShareStrategy::NoSharing && generic) {
        throw ConfigError("share.strategy = none cannot be combined with generic-owned datasets "
                          "(their samples would reach no teacher)");
    }
    if (!(train.keep_prob > 0.0 && train.keep_prob <= 1.0)) {
        throw ConfigError("train.keep_prob must be in (0, 1]");
    }
    if (train.batch_per_teacher == 0) throw ConfigError("train.batch_per_teacher must be at least 1");
    if (train.out_dir.empty()) throw ConfigError("train.out_dir must not be empty");
    if (!optim.lr_auto && optim.lr_max <= 0.0) throw ConfigError("optim.lr_max must be positive");
    if (optim.lr_min < 0.0) throw ConfigError("optim.lr_min must be non-negative");
    if (!(optim.beta1 >= 0.0 && optim.beta1 < 1.0 && optim.beta2 >= 0.0 && optim.beta2 < 1.0)) {
        throw ConfigError("optim betas must be in [0, 1)");
    }
    if (optim.eps <= 0.0) throw ConfigError("optim.eps must be positive");
    if (optim.weight_decay < 0.0) throw ConfigError("optim.weight_decay must be non-negative");
    if (optim.clip_norm < 0.0) throw ConfigError("optim.clip_norm must be non-negative");
}

namespace {

struct KeyContext {
    std::string origin;
    std::size_t line;
    std::string key;

    [[noreturn]] void fail(const std::string& what) const {
        throw ConfigError(origin + ":" + std::to_string(line) + ": key '" + key + "': " + what);
    }
};

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

std::uint64_t parse_u64(const KeyContext& kc, const std::string& v) {
    try {
        std::size_t used = 0;
        const std::uint64_t r = std::stoull(v, &used, 10);
        if (used != v.size()) kc.fail("expected an unsigned integer, got '" + v + "'");
        return r;
    } catch (const ConfigError&) {
        throw;
    } catch (...) {
        kc.fail("expected an unsigned integer, got '" + v + "'");
    }
}

std::size_t parse_size(const KeyContext& kc, const std::string& v) {
    return static_cast<std::size_t>(parse_u64(kc, v));
}

double parse_double(const KeyContext& kc, const std::string& v) {
    try {
        std::size_t used = 0;
        const double r = std::stod(v, &used);
        if (used != v.size()) kc.fail("expected a number, got '" + v + "'");
        return r;
    } catch (const ConfigError&) {
        throw;
    } catch (...) {
        kc.fail("expected a number, got '" + v + "'");
    }
}

bool parse_bool(const KeyContext& kc, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    kc.fail("expected true/false, got '" + v + "'");
}

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

} // namespace

RunConfig parse_config_text(const std::string& text, const std::string& origin) {
    RunConfig cfg;
    std::map<std::string, std::size_t> teacher_index; // id -> position
    std::map<std::string, std::size_t> dataset_index;
    std::map<std::string, bool> dataset_size_set, dataset_channels_set;

    auto teacher_at = [&](const std::string& id) -> TeacherDecl& {
        auto it = teacher_index.find(id);
        if (it == teacher_index.end()) {
            teacher_index[id] = cfg.teachers.size();
            TeacherDecl t;
            t.id = id;
            cfg.teachers.push_back(t);
            return cfg.teachers.back();
        }
        return cfg.teachers[it->second];
    };
    auto dataset_at = [&](const std::string& id) -> DatasetManifest& {
        auto it = dataset_index.find(id);
        if (it == dataset_index.end()) {
            dataset_index[id] = cfg.datasets.size();
            DatasetManifest d;
            d.id = id;
            cfg.datasets.push_back(d);
            return cfg.datasets.back();
        }
        return cfg.datasets[it->second];
    };

    std::istringstream is(text);
    std::string raw;
    std::size_t line_no = 0;
    while (std::getline(is, raw)) {
        ++line_no;
        const std::string line = trim(raw);
        if (line.empty() || line[0] == '#') continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(origin + ":" + std::to_string(line_no) +
                              ": expected 'key = value', got '" + line + "'");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        const KeyContext kc{origin, line_no, key};
        if (key.empty()) kc.fail("empty key");
        if (value.empty()) kc.fail("empty value");

        if (key.rfind("student.", 0) == 0) {
            const std::string f = key.substr(8);
            if (f == "image_size") cfg.student.image_size = parse_size(kc, value);
            else if (f == "patch_size") cfg.student.patch_size = parse_size(kc, value);
            else if (f == "channels") cfg.student.channels = parse_size(kc, value);
            else if (f == "depth") cfg.student.depth = parse_size(kc, value);
            else if (f == "dim") cfg.student.dim = parse_size(kc, value);
            else if (f == "heads") cfg.student.heads = parse_size(kc, value);
            else if (f == "mlp_ratio") cfg.student.mlp_ratio = parse_double(kc, value);
            else if (f == "qkv_bias") cfg.student.qkv_bias = parse_bool(kc, value);
            else if (f == "layerscale") cfg.student.layerscale = parse_bool(kc, value);
            else if (f == "layerscale_init") cfg.student.layerscale_init = parse_double(kc, value);
            else kc.fail("unknown student setting");
        } else if (key.rfind("teacher.", 0) == 0) {
            const std::string rest = key.substr(8);
            const std::size_t dot = rest.find('.');
            if (dot == std::string::npos || dot == 0 || dot + 1 >= rest.size()) {
                kc.fail("expected teacher.<id>.<field>");
            }
            TeacherDecl& t = teacher_at(rest.substr(0, dot));
            const std::string f = rest.substr(dot + 1);
            if (f == "seed") {
                t.seed = parse_u64(kc, value);
                t.seed_set = true;
            } else if (f == "width") t.width = parse_size(kc, value);
            else if (f == "depth") t.depth = parse_size(kc, value);
            else if (f == "heads") t.heads = parse_size(kc, value);
            else if (f == "patch_size") t.patch_size = parse_size(kc, value);
            else if (f == "mlp_ratio") t.mlp_ratio = parse_double(kc, value);
            else if (f == "projector") t.projector = projector_kind_from_string(value);
            else if (f == "features") t.features = value;
            else kc.fail("unknown teacher setting");
        } else if (key.rfind("dataset.", 0) == 0) {
            const std::string rest = key.substr(8);
            const std::size_t dot = rest.find('.');
            if (dot == std::string::npos || dot == 0 || dot + 1 >= rest.size()) {
                kc.fail("expected dataset.<id>.<field>");
            }
            DatasetManifest& d = dataset_at(rest.substr(0, dot));
            const std::string f = rest.substr(dot + 1);
            if (f == "owner") d.owner = value;
            else if (f == "style") d.style = synth_style_from_string(value);
            else if (f == "count") d.count = parse_size(kc, value);
            else if (f == "seed") d.seed = parse_u64(kc, value);
            else if (f == "dir") {
                d.dir = value;
                d.synthetic = false;
            } else if (f == "glob") d.glob = value;
            else if (f == "image_size") {
                d.image_size = parse_size(kc, value);
                dataset_size_set[d.id] = true;
            } else if (f == "channels") {
                d.channels = parse_size(kc, value);
                dataset_channels_set[d.id] = true;
            } else kc.fail("unknown dataset setting");
        } else if (key == "share.strategy") {
            cfg.strategy = share_strategy_from_string(value);
        } else if (key.rfind("train.", 0) == 0) {
            const std::string f = key.substr(6);
            if (f == "steps") cfg.train.steps = parse_size(kc, value);
            else if (f == "batch_per_teacher") cfg.train.batch_per_teacher = parse_size(kc, value);
            else if (f == "keep_prob") cfg.train.keep_prob = parse_double(kc, value);
            else if (f == "seed") cfg.train.seed = parse_u64(kc, value);
            else if (f == "out_dir") cfg.train.out_dir = value;
            else if (f == "checkpoint_every") cfg.train.checkpoint_every = parse_size(kc, value);
            else kc.fail("unknown train setting");
        } else if (key.rfind("optim.", 0) == 0) {
            const std::string f = key.substr(6);
            if (f == "lr_max") {
                if (value == "auto") {
                    cfg.optim.lr_auto = true;
                } else {
                    cfg.optim.lr_auto = false;
                    cfg.optim.lr_max = parse_double(kc, value);
                }
            } else if (f == "lr_min") cfg.optim.lr_min = parse_double(kc, value);
            else if (f == "weight_decay") cfg.optim.weight_decay = parse_double(kc, value);
            else if (f == "beta1") cfg.optim.beta1 = parse_double(kc, value);
            else if (f == "beta2") cfg.optim.beta2 = parse_double(kc, value);
            else if (f == "eps") cfg.optim.eps = parse_double(kc, value);
            else if (f == "clip_norm") cfg.optim.clip_norm = parse_double(kc, value);
            else kc.fail("unknown optim setting");
        } else {
            kc.fail("unknown key");
        }
    }

    // dataset geometry defaults follow the student
    for (DatasetManifest& d : cfg.datasets) {
        if (!dataset_size_set[d.id]) d.image_size = cfg.student.image_size;
        if (!dataset_channels_set[d.id]) d.channels = cfg.student.channels;
    }

    if (const char* env = std::getenv("DUNE_SEED_OVERRIDE")) {
        const KeyContext kc{origin, 0, "DUNE_SEED_OVERRIDE"};
        cfg.train.seed = parse_u64(kc, env);
    }

    cfg.validate();
    return cfg;
}

RunConfig parse_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config: " + path);
    std::ostringstream buf;
    buf << is.rdbuf();
    return parse_config_text(buf.str(), path);
}

std::string render_config(const RunConfig& cfg) {
    std::ostringstream os;
    os << "# effective configuration\n";
    os << "student.image_size = " << cfg.student.image_size << "\n";
    os << "student.patch_size = " << cfg.student.patch_size << "\n";
    os << "student.channels = " << cfg.student.channels << "\n";
    os << "student.depth = " << cfg.student.depth << "\n";
    os << "student.dim = " << cfg.student.dim << "\n";
    os << "student.heads = " << cfg.student.heads << "\n";
    os << "student.mlp_ratio = " << fmt_double(cfg.student.mlp_ratio) << "\n";
    os << "student.qkv_bias = " << (cfg.student.qkv_bias ? "true" : "false") << "\n";
    os << "student.layerscale = " << (cfg.student.layerscale ? "true" : "false") << "\n";
    os << "student.layerscale_init = " << fmt_double(cfg.student.layerscale_init) << "\n";
    for (const TeacherDecl& t : cfg.teachers) {
        os << "teacher." << t.id << ".seed = " << t.effective_seed() << "\n";
        if (!t.features.empty()) {
            os << "teacher." << t.id << ".features = " << t.features << "\n";
        } else {
            const ViTConfig arch = t.resolve_arch(cfg.student);
            os << "teacher." << t.id << ".width = " << arch.dim << "\n";
            os << "teacher." << t.id << ".depth = " << arch.depth << "\n";
            os << "teacher." << t.id << ".heads = " << arch.heads << "\n";
            os << "teacher." << t.id << ".patch_size = " << arch.patch_size << "\n";
            os << "teacher." << t.id << ".mlp_ratio = " << fmt_double(arch.mlp_ratio) << "\n";
        }
        os << "teacher." << t.id << ".projector = " << to_string(t.projector) << "\n";
    }
    for (const DatasetManifest& d : cfg.datasets) {
        os << "dataset." << d.id << ".owner = " << d.owner << "\n";
        if (d.synthetic) {
            os << "dataset." << d.id << ".style = " << to_string(d.style) << "\n";
            os << "dataset." << d.id << ".count = " << d.count << "\n";
            os << "dataset." << d.id << ".seed = " << d.seed << "\n";
        } else {
            os << "dataset." << d.id << ".dir = " << d.dir << "\n";
            if (!d.glob.empty()) os << "dataset." << d.id << ".glob = " << d.glob << "\n";
        }
        os << "dataset." << d.id << ".image_size = " << d.image_size << "\n";
        os << "dataset." << d.id << ".channels = " << d.channels << "\n";
    }
    os << "share.strategy = " << to_string(cfg.strategy) << "\n";
    os << "train.steps = " << cfg.train.steps << "\n";
    os << "train.batch_per_teacher = " << cfg.train.batch_per_teacher << "\n";
    os << "train.keep_prob = " << fmt_double(cfg.train.keep_prob) << "\n";
    os << "train.seed = " << cfg.train.seed << "\n";
    os << "train.out_dir = " << cfg.train.out_dir << "\n";
    os << "train.checkpoint_every = " << cfg.train.checkpoint_every << "\n";
    if (cfg.optim.lr_auto) {
        os << "# optim.lr_max auto-resolves to " << fmt_double(cfg.resolved_lr_max()) << "\n";
        os << "optim.lr_max = auto\n";
    } else {
        os << "optim.lr_max = " << fmt_double(cfg.optim.lr_max) << "\n";
    }
    os << "optim.lr_min = " << fmt_double(cfg.optim.lr_min) << "\n";
    os << "optim.weight_decay = " << fmt_double(cfg.optim.weight_decay) << "\n";
    os << "optim.beta1 = " << fmt_double(cfg.optim.beta1) << "\n";
    os << "optim.beta2 = " << fmt_double(cfg.optim.beta2) << "\n";
    os << "optim.eps = " << fmt_double(cfg.optim.eps) << "\n";
    os << "optim.clip_norm = " << fmt_double(cfg.optim.clip_norm) << "\n";
    return os.str();
}

} // namespace dune
