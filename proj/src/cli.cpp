#include "crayonbox/cli.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "crayonbox/checkpoint.hpp"
#include "crayonbox/errors.hpp"
#include "crayonbox/evalkit.hpp"
#include "crayonbox/rng.hpp"
#include "crayonbox/train.hpp"

namespace crayonbox {

namespace {

namespace fs = std::filesystem;

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

bool parse_bool(const std::string& v) {
    if (v == "1" || v == "true" || v == "on" || v == "yes") return true;
    if (v == "0" || v == "false" || v == "off" || v == "no") return false;
    throw ConfigError("invalid boolean value: " + v);
}

template <typename T, typename Fn>
std::function<void(const std::string&)> setter(T* field, Fn convert) {
    return [field, convert](const std::string& v) {
        try {
            *field = convert(v);
        } catch (const ConfigError&) {
            throw;
        } catch (const std::exception&) {
            throw ConfigError("invalid config value: " + v);
        }
    };
}

std::map<std::string, std::function<void(const std::string&)>> schema(RunConfig& c) {
    auto to_int = [](const std::string& v) { return std::stoi(v); };
    auto to_float = [](const std::string& v) { return std::stof(v); };
    auto to_u64 = [](const std::string& v) { return std::stoull(v); };
    return {
        {"d_model", setter(&c.model.d_model, to_int)},
        {"n_layers", setter(&c.model.n_layers, to_int)},
        {"n_heads", setter(&c.model.n_heads, to_int)},
        {"patch_h", setter(&c.model.patch_h, to_int)},
        {"patch_w", setter(&c.model.patch_w, to_int)},
        {"connector_d", setter(&c.model.connector_d, to_int)},
        {"connector_hidden", setter(&c.model.connector_hidden, to_int)},
        {"max_seq", setter(&c.model.max_seq, to_int)},
        {"img_size", setter(&c.model.img_size, to_int)},
        {"init_std", setter(&c.model.init_std, to_float)},
        {"unembed_std", setter(&c.model.unembed_std, to_float)},
        {"lora_rank", setter(&c.lora_rank, to_int)},
        {"lora_alpha", setter(&c.lora_alpha, to_float)},
        {"seed", setter(&c.seed, to_u64)},
        {"cpt_scenes", setter(&c.cpt_scenes, to_int)},
        {"cit_scenes", setter(&c.cit_scenes, to_int)},
        {"eval_scenes", setter(&c.eval_scenes, to_int)},
        {"grid_h", setter(&c.grid_h, to_int)},
        {"grid_w", setter(&c.grid_w, to_int)},
        {"min_objects", setter(&c.min_objects, to_int)},
        {"max_objects", setter(&c.max_objects, to_int)},
        {"p_unk_scene", setter(&c.p_unk_scene, to_float)},
        {"noise_std", setter(&c.noise_std, to_float)},
        {"vl_per_scene", setter(&c.vl_per_scene, to_int)},
        {"class_pool",
         [&c](const std::string& v) {
             c.class_pool.clear();
             std::stringstream ss(v);
             std::string item;
             while (std::getline(ss, item, ',')) {
                 item = trim(item);
                 if (item.empty()) continue;
                 try {
                     c.class_pool.push_back(std::stoi(item));
                 } catch (const std::exception&) {
                     throw ConfigError("invalid config value: " + v);
                 }
             }
         }},
        {"batch_size", setter(&c.batch_size, to_int)},
        {"cpt_epochs", setter(&c.cpt_epochs, to_int)},
        {"cit_epochs", setter(&c.cit_epochs, to_int)},
        {"cpt_max_steps", setter(&c.cpt_max_steps, to_int)},
        {"cit_max_steps", setter(&c.cit_max_steps, to_int)},
        {"cpt_lr_max", setter(&c.cpt_lr_max, to_float)},
        {"cpt_lr_min", setter(&c.cpt_lr_min, to_float)},
        {"cit_lr_max", setter(&c.cit_lr_max, to_float)},
        {"cit_lr_min", setter(&c.cit_lr_min, to_float)},
        {"p_image", setter(&c.p_image, to_float)},
        {"freeze_audit_every", setter(&c.freeze_audit_every, to_int)},
        {"warmup_steps", setter(&c.warmup_steps, to_int)},
        {"warmup_lr", setter(&c.warmup_lr, to_float)},
        {"sem_query", setter(&c.sem_query, parse_bool)},
        {"num_query", setter(&c.num_query, parse_bool)},
        {"dual_qlora", setter(&c.dual_qlora, parse_bool)},
        {"beam_n", setter(&c.beam_n, to_int)},
    };
}

std::vector<int> parse_class_list(const std::string& arg) {
    std::vector<int> out;
    std::stringstream ss(arg);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        tok = trim(tok);
        if (tok.empty()) continue;
        try {
            out.push_back(std::stoi(tok));
        } catch (const std::exception&) {
            throw ConfigError("invalid class id in --classes: " + tok);
        }
    }
    return out;
}

DatagenConfig datagen_config(const RunConfig& cfg, int n_scenes) {
    DatagenConfig d;
    d.n_scenes = n_scenes;
    d.scene.grid_h = cfg.grid_h;
    d.scene.grid_w = cfg.grid_w;
    d.scene.min_objects = cfg.min_objects;
    d.scene.max_objects = cfg.max_objects;
    d.scene.class_pool = cfg.class_pool;
    d.scene.noise_std = cfg.noise_std;
    d.p_unk_scene = cfg.p_unk_scene;
    d.vl_per_scene = cfg.vl_per_scene;
    return d;
}

uint64_t stream_seed(const RunConfig& cfg, const char* name) {
    return cfg.seed ^ fnv1a64(name);
}

void write_probe_csv(const std::string& path, const std::vector<ProbeResult>& rs) {
    std::ofstream out(path);
    if (!out) throw ArtifactError("cannot write " + path);
    out << "kind,scene,class,positive,prediction,unparseable,correct\n";
    const char* names[] = {"c2b", "b2c", "count"};
    for (const auto& r : rs) {
        out << names[static_cast<int>(r.kind)] << ',' << r.scene << ','
            << r.class_id << ',' << (r.positive ? 1 : 0) << ',' << r.prediction
            << ',' << (r.unparseable ? 1 : 0) << ',' << (r.correct ? 1 : 0)
            << '\n';
    }
}

double mean_correct(const std::vector<ProbeResult>& rs) {
    if (rs.empty()) return 0.0;
    size_t ok = 0;
    for (const auto& r : rs) ok += r.correct ? 1 : 0;
    return static_cast<double>(ok) / static_cast<double>(rs.size());
}

std::vector<ProbeResult> filter_classes(std::vector<ProbeResult> rs,
                                        const std::vector<int>& classes) {
    if (classes.empty()) return rs;
    std::set<int> keep(classes.begin(), classes.end());
    std::erase_if(rs, [&](const ProbeResult& r) { return !keep.count(r.class_id); });
    return rs;
}

TrainConfig cpt_train_config(const RunConfig& cfg) {
    TrainConfig tc = TrainConfig::cpt_defaults();
    tc.batch_size = cfg.batch_size;
    tc.epochs = cfg.cpt_epochs;
    tc.max_steps = cfg.cpt_max_steps;
    tc.lr_max = cfg.cpt_lr_max;
    tc.lr_min = cfg.cpt_lr_min;
    tc.seed = stream_seed(cfg, "cpt-train");
    tc.sem_query = cfg.sem_query;
    tc.num_query = cfg.num_query;
    tc.freeze_audit_every = cfg.freeze_audit_every;
    return tc;
}

TrainConfig cit_train_config(const RunConfig& cfg) {
    TrainConfig tc = TrainConfig::cit_defaults();
    tc.batch_size = cfg.batch_size;
    tc.epochs = cfg.cit_epochs;
    tc.max_steps = cfg.cit_max_steps;
    tc.lr_max = cfg.cit_lr_max;
    tc.lr_min = cfg.cit_lr_min;
    tc.seed = stream_seed(cfg, "cit-train");
    tc.p_image = cfg.p_image;
    tc.sem_query = cfg.sem_query;
    tc.num_query = cfg.num_query;
    tc.dual_qlora = cfg.dual_qlora;
    tc.freeze_audit_every = cfg.freeze_audit_every;
    return tc;
}

int cmd_synth(const RunConfig& cfg, const std::string& out_dir, std::ostream& out) {
    fs::create_directories(out_dir);
    SynthDataset cpt = make_cpt_dataset(stream_seed(cfg, "split-cpt"),
                                        datagen_config(cfg, cfg.cpt_scenes));
    SynthDataset cit = make_cit_dataset(stream_seed(cfg, "split-cit"),
                                        datagen_config(cfg, cfg.cit_scenes));
    SynthDataset eval = make_cit_dataset(stream_seed(cfg, "split-eval"),
                                         datagen_config(cfg, cfg.eval_scenes));
    save_dataset(cpt, out_dir + "/cpt");
    save_dataset(cit, out_dir + "/cit");
    save_dataset(eval, out_dir + "/eval");
    out << "synth cpt scenes=" << cpt.scenes.size() << " records=" << cpt.records.size() << "\n"
        << "synth cit scenes=" << cit.scenes.size() << " records=" << cit.records.size() << "\n"
        << "synth eval scenes=" << eval.scenes.size() << " records=" << eval.records.size() << "\n";
    return 0;
}

int cmd_cpt(const RunConfig& cfg, const std::string& out_dir, std::ostream& out) {
    SynthDataset ds = load_dataset(out_dir + "/cpt");
    Model model = Model::init(cfg.model, stream_seed(cfg, "model-seed"));
    float warm = 0.0f;
    if (cfg.warmup_steps > 0)
        warm = warm_up_vision(model, ds, cfg.warmup_steps, cfg.warmup_lr,
                              stream_seed(cfg, "warmup"));
    std::ofstream log(out_dir + "/cpt_log.txt");
    if (!log) throw ArtifactError("cannot write " + out_dir + "/cpt_log.txt");
    TrainReport rep = run_cpt(model, ds, cpt_train_config(cfg), &log);
    save_checkpoint(model, out_dir + "/cpt.ckpt");
    out << "cpt steps=" << rep.steps.size() << " warmup_loss=" << warm
        << " initial=" << rep.initial_loss << " final=" << rep.final_loss
        << " audits=" << rep.audits_passed << "\n";
    return 0;
}

int cmd_cit(const RunConfig& cfg, const std::string& out_dir,
            const std::string& ckpt, std::ostream& out) {
    Model model = load_checkpoint(ckpt);
    if (!model.backbone_quantized())
        model.quantize_backbone(cfg.lora_rank, cfg.lora_alpha,
                                stream_seed(cfg, "qlora"), cfg.dual_qlora);
    SynthDataset ds = load_dataset(out_dir + "/cit");
    std::ofstream log(out_dir + "/cit_log.txt");
    if (!log) throw ArtifactError("cannot write " + out_dir + "/cit_log.txt");
    TrainReport rep = run_cit(model, ds, cit_train_config(cfg), &log);
    save_checkpoint(model, out_dir + "/cit.ckpt");
    out << "cit steps=" << rep.steps.size() << " initial=" << rep.initial_loss
        << " final=" << rep.final_loss << " audits=" << rep.audits_passed << "\n";
    return 0;
}

struct ProbeRuns {
    std::vector<ProbeResult> c2b, b2c, count;
};

ProbeRuns run_probes(const RunConfig& cfg, const Model& model,
                     const SynthDataset& eval, const std::vector<int>& classes) {
    Answerer ans = model_answerer(model, cfg.beam_n);
    ProbeRuns r;
    r.c2b = probe_c2b(ans, eval, classes, stream_seed(cfg, "probe-c2b"));
    r.b2c = filter_classes(probe_b2c(ans, eval), classes);
    r.count = filter_classes(probe_count(ans, eval), classes);
    return r;
}

int cmd_probe(const RunConfig& cfg, const std::string& out_dir,
              const std::string& ckpt, const std::vector<int>& classes,
              std::ostream& out) {
    Model model = load_checkpoint(ckpt);
    SynthDataset eval = load_dataset(out_dir + "/eval");
    ProbeRuns r = run_probes(cfg, model, eval, classes);
    write_probe_csv(out_dir + "/c2b.csv", r.c2b);
    write_probe_csv(out_dir + "/b2c.csv", r.b2c);
    write_probe_csv(out_dir + "/count.csv", r.count);
    char line[128];
    std::snprintf(line, sizeof(line), "C2B mean %.6f\nB2C mean %.6f\nCount mean %.6f\n",
                  mean_correct(r.c2b), mean_correct(r.b2c), mean_correct(r.count));
    out << line;
    return 0;
}

int cmd_correlate(const RunConfig& cfg, const std::string& out_dir,
                  const std::string& ckpt, std::ostream& out) {
    Model model = load_checkpoint(ckpt);
    SynthDataset eval = load_dataset(out_dir + "/eval");
    ProbeRuns r = run_probes(cfg, model, eval, {});
    CategoryStats stats = category_stats(r.c2b, r.b2c);
    std::map<int, double> task = per_class_accuracy(r.count);
    std::vector<double> x, y;
    for (const auto& row : stats.rows) {
        auto it = task.find(row.class_id);
        if (it == task.end()) continue;
        x.push_back(row.mean);
        y.push_back(it->second);
    }
    RegressionResult reg = regress_ci(x, y);
    emit_report(stats, task, reg, out_dir);
    char line[160];
    std::snprintf(line, sizeof(line),
                  "n %d\nslope %.6f\nintercept %.6f\nr %.6f\noverall %.6f\n",
                  reg.n, reg.slope, reg.intercept, reg.r, stats.overall);
    out << line;
    return 0;
}

int cmd_quantinspect(const std::string& ckpt, std::ostream& out, std::ostream& err) {
    Model model = load_checkpoint(ckpt);
    if (!model.backbone_quantized()) {
        err << "quantinspect: checkpoint has no quantized sections\n";
        return 4;
    }
    for (const auto& [name, q] : model.quantized_sections()) {
        const std::vector<float> absmax = q->reconstructed_absmax();
        double lo = absmax.empty() ? 0.0 : absmax[0];
        double hi = lo, sum = 0.0;
        for (float a : absmax) {
            lo = std::min(lo, static_cast<double>(a));
            hi = std::max(hi, static_cast<double>(a));
            sum += a;
        }
        const double mean = absmax.empty() ? 0.0 : sum / static_cast<double>(absmax.size());
        char line[224];
        std::snprintf(line, sizeof(line),
                      "%s numel %zu blocks %zu absmax_min %.6f absmax_mean %.6f "
                      "absmax_max %.6f max_absmax_error %.8f\n",
                      name.c_str(), q->numel(), q->block_count(), lo, mean, hi,
                      static_cast<double>(q->max_absmax_error));
        out << line;
    }
    return 0;
}

}  // namespace

RunConfig parse_run_config(std::istream& in) {
    RunConfig cfg;
    auto keys = schema(cfg);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) +
                              ": expected key=value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        auto it = keys.find(key);
        if (it == keys.end()) throw ConfigError("unknown config key: " + key);
        it->second(value);
    }
    return cfg;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file: " + path);
    return parse_run_config(in);
}

int run_cli(const std::vector<std::string>& args, std::ostream& out,
            std::ostream& err) {
    CLI::App app{"crayon-prompt pipeline"};
    app.require_subcommand(1);

    std::string config_path, out_dir = "out", ckpt_path, classes_arg, seed_arg;
    std::vector<std::string> ablate;

    auto add_common = [&](CLI::App* sub, bool with_ckpt) {
        sub->add_option("--config", config_path, "run configuration file");
        sub->add_option("--out", out_dir, "output directory");
        sub->add_option("--seed", seed_arg, "root seed override");
        sub->add_option("--ablate", ablate, "disable a feature: sem|num|dual");
        if (with_ckpt) sub->add_option("--ckpt", ckpt_path, "checkpoint path");
    };

    CLI::App* synth = app.add_subcommand("synth", "generate dataset splits");
    add_common(synth, false);
    CLI::App* cpt = app.add_subcommand("cpt", "crayon prompt tuning");
    add_common(cpt, false);
    CLI::App* cit = app.add_subcommand("cit", "instruction tuning over NF4 backbone");
    add_common(cit, true);
    CLI::App* probe = app.add_subcommand("probe", "run C2B/B2C/count probes");
    add_common(probe, true);
    probe->add_option("--classes", classes_arg, "comma-separated class id filter");
    CLI::App* correlate = app.add_subcommand("correlate", "probe + regression report");
    add_common(correlate, true);
    CLI::App* quant = app.add_subcommand("quantinspect", "inspect NF4 sections");
    quant->add_option("--ckpt", ckpt_path, "checkpoint path");

    try {
        std::vector<std::string> rev(args.rbegin(), args.rend());
        app.parse(rev);
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        err << e.what() << "\n";
        return 2;
    }

    try {
        RunConfig cfg;
        if (!config_path.empty()) cfg = load_run_config(config_path);
        if (!seed_arg.empty()) {
            try {
                cfg.seed = std::stoull(seed_arg);
            } catch (const std::exception&) {
                throw ConfigError("invalid --seed value: " + seed_arg);
            }
        }
        for (const std::string& a : ablate) {
            if (a == "sem") cfg.sem_query = false;
            else if (a == "num") cfg.num_query = false;
            else if (a == "dual") cfg.dual_qlora = false;
            else throw ConfigError("unknown --ablate value: " + a);
        }

        if (synth->parsed()) return cmd_synth(cfg, out_dir, out);
        if (cpt->parsed()) return cmd_cpt(cfg, out_dir, out);
        if (cit->parsed()) {
            if (ckpt_path.empty())
                throw ConfigError("cit requires --ckpt with a CPT checkpoint");
            return cmd_cit(cfg, out_dir, ckpt_path, out);
        }
        if (probe->parsed()) {
            if (ckpt_path.empty()) throw ConfigError("probe requires --ckpt");
            return cmd_probe(cfg, out_dir, ckpt_path, parse_class_list(classes_arg),
                             out);
        }
        if (correlate->parsed()) {
            if (ckpt_path.empty()) throw ConfigError("correlate requires --ckpt");
            return cmd_correlate(cfg, out_dir, ckpt_path, out);
        }
        if (quant->parsed()) {
            if (ckpt_path.empty()) throw ConfigError("quantinspect requires --ckpt");
            return cmd_quantinspect(ckpt_path, out, err);
        }
        err << "no subcommand\n";
        return 2;
    } catch (const TrainAbort& e) {
        err << "training aborted: " << e.what() << "\n";
        return 3;
    } catch (const ArtifactError& e) {
        err << "artifact error: " << e.what() << "\n";
        return 4;
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    }
}

}  // namespace crayonbox
