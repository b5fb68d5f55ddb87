#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "mmdfer/eval.hpp"
#include "mmdfer/runconfig.hpp"

using namespace mmdfer;
namespace fs = std::filesystem;

namespace {

std::string num(double v, int digits = 2) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
    return buf;
}

fs::path resolve(const std::string& workdir, const std::string& p) {
    fs::path path(p);
    if (path.is_absolute() || workdir.empty()) return path;
    return fs::path(workdir) / path;
}

void ensure_writable_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec)
        throw std::invalid_argument("cannot create directory " + dir.string() + ": " +
                                    ec.message());
    const fs::path probe = dir / ".write_probe";
    {
        std::ofstream f(probe);
        if (!f) throw std::invalid_argument("directory is not writable: " + dir.string());
    }
    fs::remove(probe, ec);
}

DatasetManifest load_corpus(const fs::path& dir) {
    if (!fs::exists(dir / "manifest.jsonl"))
        throw std::invalid_argument("no corpus manifest under " + dir.string());
    return DatasetManifest::load(dir);
}

void write_text(const fs::path& p, const std::string& content) {
    if (p.has_parent_path()) ensure_writable_dir(p.parent_path());
    std::ofstream f(p, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + p.string());
    f << content;
}

std::vector<std::string> split_list(const std::string& csv) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : csv) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Desk-scale dynamic facial expression recognition workbench"};
    app.require_subcommand(1);

    std::string workdir = ".";
    std::string config_file;
    app.add_option("--workdir", workdir, "Root directory for relative paths")
        ->capture_default_str();
    app.add_option("--config", config_file, "JSON run configuration file");

    // flag > config file > default: record which flags were given and lay
    // them over the loaded config afterwards.
    struct Binding {
        CLI::Option* opt;
        std::function<void(RunConfig&)> apply;
    };
    std::vector<Binding> bindings;
    auto bind = [&bindings](CLI::Option* opt, std::function<void(RunConfig&)> apply) {
        bindings.push_back({opt, std::move(apply)});
    };

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "Generate a synthetic corpus");
    gen->fallthrough();
    std::string gen_out;
    uint64_t gen_seed = 0;
    int64_t g_classes = 0, g_samples = 0, g_T = 0, g_H = 0, g_W = 0, g_C = 0, g_R = 0,
            g_variant = 0;
    double g_noise = 0.0, g_leakage = 0.0, g_ratio = 0.0;
    gen->add_option("--out", gen_out, "Output corpus directory")->required();
    gen->add_option("--seed", gen_seed, "Generation seed");
    bind(gen->add_option("--classes", g_classes, "Number of classes"),
         [&](RunConfig& rc) { rc.corpus.num_classes = g_classes; });
    bind(gen->add_option("--samples-per-class", g_samples, "Samples per class"),
         [&](RunConfig& rc) { rc.corpus.samples_per_class = g_samples; });
    bind(gen->add_option("--frames", g_T, "Frames per clip"),
         [&](RunConfig& rc) { rc.corpus.T = g_T; });
    bind(gen->add_option("--height", g_H, "Frame height"),
         [&](RunConfig& rc) { rc.corpus.H = g_H; });
    bind(gen->add_option("--width", g_W, "Frame width"),
         [&](RunConfig& rc) { rc.corpus.W = g_W; });
    bind(gen->add_option("--channels", g_C, "Frame channels"),
         [&](RunConfig& rc) { rc.corpus.C = g_C; });
    bind(gen->add_option("--regions", g_R, "Parsing region count"),
         [&](RunConfig& rc) { rc.corpus.R = g_R; });
    bind(gen->add_option("--noise", g_noise, "Frame noise level"),
         [&](RunConfig& rc) { rc.corpus.noise_std = g_noise; });
    bind(gen->add_option("--leakage", g_leakage, "Emotion-word leakage rate"),
         [&](RunConfig& rc) { rc.corpus.leakage_rate = g_leakage; });
    bind(gen->add_option("--variant", g_variant, "Class-name variant (0 or 1)"),
         [&](RunConfig& rc) { rc.corpus.name_variant = g_variant; });
    bind(gen->add_option("--split-ratio", g_ratio, "Train fraction per class"),
         [&](RunConfig& rc) { rc.split_ratio = g_ratio; });

    // refine-text
    auto* refine = app.add_subcommand("refine-text", "Strip emotion leakage from descriptions");
    refine->fallthrough();
    std::string rt_in, rt_out, rt_lexicon;
    refine->add_option("--in", rt_in, "Source corpus directory")->required();
    refine->add_option("--out", rt_out, "Refined corpus directory")->required();
    refine->add_option("--lexicon", rt_lexicon, "Lexicon JSON file (defaults built in)");

    // train
    auto* tr = app.add_subcommand("train", "Train adapters and heads on a corpus");
    tr->fallthrough();
    std::string tr_data, tr_out = "model.ckpt", tr_log, tr_modalities, tr_weighting, tr_negation;
    uint64_t tr_seed = 0;
    int64_t tr_epochs = 0, tr_batch = 0;
    double tr_lr = 0.0, tr_momentum = 0.0, tr_tau = 0.0, tr_s = 0.0;
    bool tr_no_adapters = false, tr_diff_w = false, tr_batch_avg = false, tr_no_early = false;
    tr->add_option("--data", tr_data, "Corpus directory")->required();
    tr->add_option("--out", tr_out, "Checkpoint path")->capture_default_str();
    tr->add_option("--log", tr_log, "Training log path (JSON lines)");
    bind(tr->add_option("--seed", tr_seed, "Training seed"),
         [&](RunConfig& rc) { rc.train.seed = tr_seed; });
    bind(tr->add_option("--epochs", tr_epochs, "Epoch count"),
         [&](RunConfig& rc) { rc.train.epochs = tr_epochs; });
    bind(tr->add_option("--batch-size", tr_batch, "Minibatch size"),
         [&](RunConfig& rc) { rc.train.batch_size = tr_batch; });
    bind(tr->add_option("--lr", tr_lr, "Learning rate"),
         [&](RunConfig& rc) { rc.train.learning_rate = tr_lr; });
    bind(tr->add_option("--momentum", tr_momentum, "SGD momentum"),
         [&](RunConfig& rc) { rc.train.momentum = tr_momentum; });
    double tr_clip = 0.0;
    bind(tr->add_option("--clip-norm", tr_clip, "Gradient norm ceiling (0 disables)"),
         [&](RunConfig& rc) { rc.train.clip_norm = tr_clip; });
    bind(tr->add_option("--tau", tr_tau, "Classification temperature"),
         [&](RunConfig& rc) { rc.train.tau = tr_tau; });
    bind(tr->add_option("--s", tr_s, "Video adapter scaling factor"),
         [&](RunConfig& rc) { rc.train.s = tr_s; });
    bind(tr->add_option("--negation", tr_negation, "Negative descriptor word"),
         [&](RunConfig& rc) { rc.train.negation_word = tr_negation; });
    bind(tr->add_option("--weighting", tr_weighting, "adaptive or fixed:<w_v>"),
         [&](RunConfig& rc) { rc.train.weighting_mode = tr_weighting; });
    bind(tr->add_option("--modalities", tr_modalities, "Comma list from v,p,l,f"),
         [&](RunConfig& rc) { rc.train.modalities = split_list(tr_modalities); });
    bind(tr->add_flag("--no-adapters", tr_no_adapters, "Freeze towers without adapters"),
         [&](RunConfig& rc) { rc.train.adapters_enabled = false; });
    bind(tr->add_flag("--diff-weights", tr_diff_w, "Backpropagate through fusion weights"),
         [&](RunConfig& rc) { rc.train.differentiable_weights = true; });
    bind(tr->add_flag("--batch-avg-weights", tr_batch_avg, "Share batch-mean fusion weights"),
         [&](RunConfig& rc) { rc.train.batch_avg_weights = true; });
    bind(tr->add_flag("--no-early-stop", tr_no_early, "Always run every epoch"),
         [&](RunConfig& rc) { rc.train.early_stop = false; });

    // eval
    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a corpus split");
    ev->fallthrough();
    std::string ev_ckpt, ev_data, ev_split = "test", ev_mode = "pn_diff", ev_out;
    ev->add_option("--checkpoint", ev_ckpt, "Checkpoint path")->required();
    ev->add_option("--data", ev_data, "Corpus directory")->required();
    ev->add_option("--split", ev_split, "Manifest split to score")->capture_default_str();
    ev->add_option("--mode", ev_mode, "pn_diff or pos_only")->capture_default_str();
    ev->add_option("--out", ev_out, "Where to write the report JSON");

    // zeroshot
    auto* zs = app.add_subcommand("zeroshot", "Caption pretraining plus cross-corpus transfer");
    zs->fallthrough();
    std::string zs_pretrain, zs_target, zs_out, zs_mode;
    uint64_t zs_seed = 0;
    int64_t zs_epochs = -1;
    double zs_tau = 0.0, zs_lr = 0.0;
    zs->add_option("--pretrain", zs_pretrain, "Caption corpus directory")->required();
    zs->add_option("--target", zs_target, "Disjoint-class corpus directory")->required();
    zs->add_option("--out", zs_out, "Where to write the report JSON");
    bind(zs->add_option("--seed", zs_seed, "Pretraining seed"),
         [&](RunConfig& rc) { rc.zeroshot.seed = zs_seed; });
    bind(zs->add_option("--epochs", zs_epochs, "Pretraining epochs (0 = chance control)"),
         [&](RunConfig& rc) { rc.zeroshot.epochs = zs_epochs; });
    bind(zs->add_option("--tau", zs_tau, "Contrastive temperature"),
         [&](RunConfig& rc) { rc.zeroshot.tau = zs_tau; });
    bind(zs->add_option("--lr", zs_lr, "Pretraining learning rate"),
         [&](RunConfig& rc) { rc.zeroshot.learning_rate = zs_lr; });
    bind(zs->add_option("--mode", zs_mode, "pn_diff or pos_only"),
         [&](RunConfig& rc) { rc.zeroshot.mode = zs_mode; });

    // ablate
    auto* ab = app.add_subcommand("ablate", "Run the comparison grid");
    ab->fallthrough();
    std::string ab_data, ab_out;
    uint64_t ab_seed = 0;
    int64_t ab_epochs = 0, ab_jobs = 0;
    ab->add_option("--data", ab_data, "Corpus directory")->required();
    ab->add_option("--out", ab_out, "Output directory for CSV and figures")->required();
    bind(ab->add_option("--jobs", ab_jobs, "Parallel worker count"),
         [&](RunConfig& rc) { rc.jobs = ab_jobs; });
    bind(ab->add_option("--seed", ab_seed, "Seed shared by every cell"),
         [&](RunConfig& rc) { rc.train.seed = ab_seed; });
    bind(ab->add_option("--epochs", ab_epochs, "Epochs per cell"),
         [&](RunConfig& rc) { rc.train.epochs = ab_epochs; });

    // report
    auto* rp = app.add_subcommand("report", "Render a report JSON or ablation CSV");
    rp->fallthrough();
    std::string rp_in, rp_out;
    rp->add_option("--in", rp_in, "EvalReport JSON or ablation CSV")->required();
    rp->add_option("--out", rp_out, "Output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        RunConfig rc;
        if (!config_file.empty()) rc = RunConfig::load(resolve(workdir, config_file));
        for (const auto& b : bindings)
            if (b.opt->count() > 0) b.apply(rc);

        if (gen->parsed()) {
            rc.corpus.validate();
            if (!(rc.split_ratio > 0.0 && rc.split_ratio < 1.0))
                throw std::invalid_argument("split ratio must be in (0, 1)");
            const fs::path out = resolve(workdir, gen_out);
            ensure_writable_dir(out);
            DatasetManifest m = generate_corpus(rc.corpus, gen_seed, out);
            assign_splits(m, rc.split_ratio, gen_seed);
            m.save(out);
            const int64_t n_train = static_cast<int64_t>(m.entries_for_split("train").size());
            const int64_t n_test = static_cast<int64_t>(m.entries_for_split("test").size());
            std::cout << "corpus " << m.corpus_name << ": " << m.class_names.size()
                      << " classes, " << m.samples.size() << " samples (" << n_train
                      << " train / " << n_test << " test)\n";
            std::cout << "manifest hash " << hash_hex(corpus_hash(m)) << "\n";
            std::cout << "written to " << out.string() << "\n";
        } else if (refine->parsed()) {
            const fs::path in = resolve(workdir, rt_in);
            DatasetManifest m = load_corpus(in);
            EmotionLexicon lex;
            if (!rt_lexicon.empty()) {
                const fs::path lp = resolve(workdir, rt_lexicon);
                if (!fs::exists(lp))
                    throw std::invalid_argument("lexicon file not found: " + lp.string());
                lex = EmotionLexicon::load(lp);
            } else {
                lex = EmotionLexicon::defaults();
            }
            const fs::path out = resolve(workdir, rt_out);
            ensure_writable_dir(out);

            int64_t direct = 0, cue = 0, fallbacks = 0, hits_after = 0;
            for (const auto& entry : m.samples) {
                const fs::path src = in / entry.path;
                const fs::path dst = out / entry.path;
                fs::create_directories(dst);
                for (const char* f : {"frames.bin", "parsing.bin", "landmarks.bin"})
                    fs::copy_file(src / f, dst / f, fs::copy_options::overwrite_existing);
                std::ifstream df(src / "description.txt", std::ios::binary);
                if (!df)
                    throw std::runtime_error("cannot read description for sample " +
                                             entry.sample_id);
                std::stringstream buf;
                buf << df.rdbuf();
                auto [refined, rep] = refine_description(buf.str(), lex);
                write_text(dst / "description.txt", refined);
                direct += rep.direct_sentences_removed;
                cue += rep.cue_clauses_removed;
                fallbacks += rep.fallback ? 1 : 0;
                hits_after += has_lexicon_hit(refined, lex) ? 1 : 0;
            }
            m.save(out);
            nlohmann::json report{{"samples", static_cast<int64_t>(m.samples.size())},
                                  {"direct_sentences_removed", direct},
                                  {"cue_clauses_removed", cue},
                                  {"fallbacks", fallbacks},
                                  {"lexicon_hits_after", hits_after}};
            write_text(out / "refinement_report.json", report.dump(2) + "\n");
            std::cout << "refined " << m.samples.size() << " descriptions: " << direct
                      << " direct sentences and " << cue << " cue clauses removed, " << fallbacks
                      << " fallbacks, " << hits_after << " residual lexicon hits\n";
            std::cout << "written to " << out.string() << "\n";
        } else if (tr->parsed()) {
            DatasetManifest m = load_corpus(resolve(workdir, tr_data));
            rc.train.validate();
            const fs::path ckpt = resolve(workdir, tr_out);
            if (ckpt.has_parent_path()) ensure_writable_dir(ckpt.parent_path());
            fs::path log;
            if (!tr_log.empty()) {
                log = resolve(workdir, tr_log);
                if (log.has_parent_path()) ensure_writable_dir(log.parent_path());
            }
            TrainResult r = train(m, rc.model, rc.train, ckpt, log);
            const auto& last = r.epochs.back();
            std::cout << "fingerprint " << r.fingerprint << "\n";
            std::cout << "trained " << r.summary.at("epochs_run").get<int64_t>() << " epochs on "
                      << r.summary.at("samples").get<int64_t>() << " samples ("
                      << r.summary.at("trainable_params").get<int64_t>() << " of "
                      << r.summary.at("total_params").get<int64_t>() << " parameters trainable)\n";
            std::cout << "final loss " << num(last.at("loss").get<double>(), 4)
                      << ", train accuracy "
                      << num(100.0 * last.at("train_accuracy").get<double>(), 2) << "%\n";
            std::cout << "checkpoint " << ckpt.string() << "\n";
        } else if (ev->parsed()) {
            const fs::path ckpt = resolve(workdir, ev_ckpt);
            if (!fs::exists(ckpt))
                throw std::invalid_argument("checkpoint not found: " + ckpt.string());
            DatasetManifest m = load_corpus(resolve(workdir, ev_data));
            EvalReport rep = evaluate_checkpoint(ckpt, m, ev_split, ev_mode);
            if (!ev_out.empty())
                write_text(resolve(workdir, ev_out), rep.to_json().dump(2) + "\n");
            std::cout << "UAR " << num(rep.uar) << "  WAR " << num(rep.war) << "  ("
                      << rep.samples << " samples, split " << rep.split << ", mode " << rep.mode
                      << ")\n";
            if (!ev_out.empty())
                std::cout << "report " << resolve(workdir, ev_out).string() << "\n";
        } else if (zs->parsed()) {
            DatasetManifest a = load_corpus(resolve(workdir, zs_pretrain));
            DatasetManifest b = load_corpus(resolve(workdir, zs_target));
            rc.zeroshot.validate();
            EvalReport rep = zero_shot(a, b, rc.model, rc.zeroshot);
            if (!zs_out.empty())
                write_text(resolve(workdir, zs_out), rep.to_json().dump(2) + "\n");
            const double chance = 100.0 / static_cast<double>(b.class_names.size());
            std::cout << "zero-shot WAR " << num(rep.war) << " on " << rep.samples
                      << " samples (chance " << num(chance) << ")\n";
            if (!zs_out.empty())
                std::cout << "report " << resolve(workdir, zs_out).string() << "\n";
        } else if (ab->parsed()) {
            DatasetManifest m = load_corpus(resolve(workdir, ab_data));
            rc.train.validate();
            const fs::path out = resolve(workdir, ab_out);
            ensure_writable_dir(out);
            std::vector<AblationRow> rows =
                ablation_suite(m, rc.model, rc.train, out, rc.jobs);
            for (const auto& row : rows)
                std::cout << row.cell_id << "  uar " << num(row.uar) << "  war " << num(row.war)
                          << "  (" << row.config_delta << ")\n";
            const std::string fp = config_fingerprint(rc.model, rc.train);
            std::cout << "table " << (out / ("ablation_" + fp + ".csv")).string() << "\n";
            std::cout << "figure " << (out / ("weight_sweep_" + fp + ".svg")).string() << "\n";
        } else if (rp->parsed()) {
            const fs::path in = resolve(workdir, rp_in);
            if (!fs::exists(in)) throw std::invalid_argument("input not found: " + in.string());
            const fs::path out = resolve(workdir, rp_out);
            ensure_writable_dir(out);
            std::ifstream f(in, std::ios::binary);
            std::stringstream buf;
            buf << f.rdbuf();
            const std::string content = buf.str();
            const size_t first = content.find_first_not_of(" \t\r\n");
            if (first != std::string::npos && content[first] == '{') {
                EvalReport rep = EvalReport::from_json(nlohmann::json::parse(content));
                const std::string tag = rep.fingerprint.empty() ? "report" : rep.fingerprint;
                write_text(out / ("report_" + tag + ".md"), render_report_markdown(rep));
                write_text(out / ("class_accuracy_" + tag + ".svg"), class_accuracy_svg(rep));
                std::cout << "wrote " << (out / ("report_" + tag + ".md")).string() << "\n";
                std::cout << "wrote " << (out / ("class_accuracy_" + tag + ".svg")).string()
                          << "\n";
            } else {
                std::vector<AblationRow> rows = parse_ablation_csv(content);
                std::string md = "# Comparison grid\n\n| cell | delta | UAR | WAR |\n|---|---|---|---|\n";
                for (const auto& row : rows)
                    md += "| " + row.cell_id + " | " + row.config_delta + " | " + num(row.uar) +
                          " | " + num(row.war) + " |\n";
                write_text(out / "ablation_summary.md", md);
                write_text(out / "weight_sweep.svg", weight_sweep_svg(rows));
                std::cout << "wrote " << (out / "ablation_summary.md").string() << "\n";
                std::cout << "wrote " << (out / "weight_sweep.svg").string() << "\n";
            }
        }
        return 0;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
