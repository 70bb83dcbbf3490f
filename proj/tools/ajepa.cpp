#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "ajepa/gradcheck.hpp"
#include "ajepa/io.hpp"
#include "ajepa/mask.hpp"
#include "ajepa/mel.hpp"
#include "ajepa/probe.hpp"
#include "ajepa/synth.hpp"
#include "ajepa/train.hpp"
#include "ajepa/wav.hpp"

namespace {

struct GenDataOpts {
    std::string config;
    std::string out;
};

int run_gen_data(const GenDataOpts& o) {
    ajepa::CorpusConfig cfg;
    if (!o.config.empty()) {
        nlohmann::json j = nlohmann::json::parse(ajepa::read_binary_file(o.config));
        ajepa::detail::check_keys(j, "corpus config",
                                  {"seed", "pretrain_clips", "probe_train_clips",
                                   "probe_test_clips", "duration_s", "sample_rate"});
        cfg.seed = ajepa::detail::get_u64(j, "seed", cfg.seed);
        cfg.pretrain_clips = ajepa::detail::get_u64(j, "pretrain_clips", cfg.pretrain_clips);
        cfg.probe_train_clips =
            ajepa::detail::get_u64(j, "probe_train_clips", cfg.probe_train_clips);
        cfg.probe_test_clips = ajepa::detail::get_u64(j, "probe_test_clips", cfg.probe_test_clips);
        cfg.duration_s = ajepa::detail::get_f64(j, "duration_s", cfg.duration_s);
        cfg.sample_rate =
            static_cast<int>(ajepa::detail::get_u64(j, "sample_rate", cfg.sample_rate));
    }
    const auto entries = ajepa::generate_corpus(o.out, cfg);
    std::cout << "wrote " << entries.size() << " clips and manifest.jsonl under " << o.out << "\n";
    return 0;
}

struct PretrainOpts {
    std::string config;
    std::string resume;
    std::string manifest;
    std::string out_dir;
    std::size_t stop_after = 0;
    bool quiet = false;
};

int run_pretrain_cmd(const PretrainOpts& o) {
    ajepa::TrainConfig cfg = ajepa::load_train_config(o.config);
    if (!o.manifest.empty()) cfg.manifest = o.manifest;
    if (!o.out_dir.empty()) cfg.out_dir = o.out_dir;

    ajepa::PretrainOptions run;
    run.manifest_path = cfg.manifest;
    run.out_dir = cfg.out_dir;
    run.resume_from = o.resume;
    run.stop_after = o.stop_after;
    run.quiet = o.quiet;
    const ajepa::PretrainResult res = ajepa::run_pretraining(cfg, run);
    std::cout << "step " << res.final_step << " loss " << res.final_loss << " checkpoint "
              << res.last_checkpoint << "\n";
    return 0;
}

struct ProbeOpts {
    std::string checkpoint;
    std::string manifest;
    std::string out;
    std::string encoder = "online";
};

int run_probe_cmd(const ProbeOpts& o) {
    ajepa::Checkpoint ck = ajepa::load_checkpoint(o.checkpoint);
    const ajepa::EncoderParams<float>& enc =
        o.encoder == "online" ? ck.online.encoder : ck.target_encoder;

    const ajepa::FrontendConfig& fe = ck.cfg.frontend;
    const ajepa::MelDataset train_ds = ajepa::load_mel_dataset(
        o.manifest, ajepa::DatasetSelect::probe_train, fe, &ck.mel_mean, &ck.mel_std);
    const ajepa::MelDataset test_ds = ajepa::load_mel_dataset(
        o.manifest, ajepa::DatasetSelect::probe_test, fe, &ck.mel_mean, &ck.mel_std);
    if (train_ds.mels.empty() || test_ds.mels.empty())
        throw std::runtime_error("probe: manifest has no labeled train or test clips");

    const ajepa::FeatureMatrix train_f =
        ajepa::extract_features(enc, ck.cfg.model, train_ds, fe.target_frames);
    const ajepa::FeatureMatrix test_f =
        ajepa::extract_features(enc, ck.cfg.model, test_ds, fe.target_frames);

    int max_label = 0;
    for (const int y : train_f.labels) max_label = std::max(max_label, y);
    const auto classes = static_cast<std::size_t>(max_label) + 1;
    if (classes < 2) throw std::runtime_error("probe: need at least two classes");

    const ajepa::ProbeModel model = ajepa::train_probe(train_f, classes);
    const ajepa::CollapseMetrics cm = ajepa::collapse_metrics(test_f);

    std::string csv = "clip_id,label,pred,correct\n";
    std::size_t correct = 0;
    for (std::size_t i = 0; i < test_f.n; ++i) {
        const int pred = ajepa::predict_probe(model, test_f.row(i));
        const bool ok = pred == test_f.labels[i];
        correct += ok ? 1 : 0;
        csv += test_ds.clip_ids[i] + "," + std::to_string(test_f.labels[i]) + "," +
               std::to_string(pred) + "," + (ok ? "1" : "0") + "\n";
    }
    const double accuracy = static_cast<double>(correct) / static_cast<double>(test_f.n);
    ajepa::write_file_atomic(o.out, csv);

    nlohmann::json report;
    report["accuracy"] = accuracy;
    report["chance"] = 1.0 / static_cast<double>(classes);
    report["mean_std"] = cm.mean_std;
    report["effective_rank"] = cm.effective_rank;
    std::string json_path = o.out;
    const auto dot = json_path.find_last_of('.');
    if (dot != std::string::npos && json_path.find('/', dot) == std::string::npos)
        json_path.resize(dot);
    json_path += ".json";
    const std::string text = report.dump(2) + "\n";
    ajepa::write_file_atomic(json_path, text);

    std::printf("probe accuracy %.4f (%zu/%zu correct, chance %.4f, %s encoder step %zu)\n",
                accuracy, correct, test_f.n, 1.0 / static_cast<double>(classes),
                o.encoder.c_str(), ck.step);
    std::cout << text;
    return 0;
}

struct MaskvizOpts {
    std::string strategy = "unstructured";
    std::size_t rows = 5;
    std::size_t cols = 13;
    std::uint64_t seed = 0;
    std::string out;
    std::string stats_out;
    std::size_t draws = 16;
    double target_ratio = 0.7;
    bool time_contiguous = false;
    ajepa::MultiBlockParams mb;
};

int run_maskviz(const MaskvizOpts& o) {
    ajepa::MaskConfig mc;
    mc.strategy = ajepa::mask_strategy_from_string(o.strategy);
    mc.target_ratio = o.target_ratio;
    mc.time_contiguous = o.time_contiguous;
    mc.multiblock = o.mb;
    mc.validate();
    if (o.draws == 0) throw std::invalid_argument("maskviz: --draws must be positive");

    std::string csv = "strategy,seed,n_context,n_target,contiguity\n";
    std::string pgm;
    for (std::size_t i = 0; i < o.draws; ++i) {
        const std::uint64_t draw_seed = ajepa::fnv1a64("maskviz:" + std::to_string(i), o.seed);
        ajepa::Rng rng(draw_seed);
        const ajepa::MaskSpec spec = ajepa::draw_mask(mc, o.rows, o.cols, rng);
        if (i == 0) pgm = ajepa::encode_mask_pgm(spec, o.rows, o.cols);
        const auto stats = ajepa::mask_stats(std::span(&spec, 1), o.rows, o.cols);
        char row[160];
        std::snprintf(row, sizeof row, "%s,%llu,%zu,%zu,%.6f\n", o.strategy.c_str(),
                      static_cast<unsigned long long>(draw_seed), spec.context.size(),
                      spec.target.size(), stats.begin()->second.contiguity);
        csv += row;
    }
    ajepa::write_file_atomic(o.out, pgm);
    std::string csv_path = o.stats_out;
    if (csv_path.empty()) {
        csv_path = o.out;
        const auto dot = csv_path.find_last_of('.');
        if (dot != std::string::npos) csv_path.resize(dot);
        csv_path += ".csv";
    }
    ajepa::write_file_atomic(csv_path, csv);
    std::cout << "wrote " << o.out << " (draw 0 of " << o.draws << ") and " << csv_path << "\n";
    return 0;
}

struct GradcheckOpts {
    std::string ops;
    std::uint64_t seed = 7;
};

int run_gradcheck(const GradcheckOpts& o) {
    std::vector<std::string> only;
    if (!o.ops.empty()) {
        std::string cur;
        for (const char ch : o.ops + ",") {
            if (ch == ',') {
                if (!cur.empty()) only.push_back(cur);
                cur.clear();
            } else {
                cur += ch;
            }
        }
    }
    const bool want_e2e =
        only.empty() || std::find(only.begin(), only.end(), "e2e") != only.end();

    std::vector<ajepa::NamedGradCheck> rows = ajepa::run_op_grad_checks(o.seed, only);
    if (want_e2e) rows.push_back({"e2e", ajepa::run_e2e_grad_check(o.seed)});
    if (rows.empty()) throw std::invalid_argument("gradcheck: --ops matched nothing");

    const double tol = 1e-4;
    bool all_pass = true;
    std::printf("%-24s %12s %12s %8s  %s\n", "op", "max_rel", "max_abs", "coords", "status");
    for (const auto& [name, report] : rows) {
        const bool ok = report.pass(tol);
        all_pass = all_pass && ok;
        std::printf("%-24s %12.3e %12.3e %8zu  %s\n", name.c_str(), report.max_rel,
                    report.max_abs, report.checked, ok ? "ok" : "FAIL");
        if (!ok && !report.worst.empty()) std::printf("  worst: %s\n", report.worst.c_str());
    }
    if (!all_pass) throw std::runtime_error("gradcheck: at least one op exceeded tolerance 1e-4");
    return 0;
}

struct FeatdumpOpts {
    std::string checkpoint;
    std::string wav;
    std::string out;
    std::string encoder = "target";
};

int run_featdump(const FeatdumpOpts& o) {
    ajepa::Checkpoint ck = ajepa::load_checkpoint(o.checkpoint);
    const ajepa::EncoderParams<float>& enc =
        o.encoder == "online" ? ck.online.encoder : ck.target_encoder;
    const ajepa::ModelConfig& mc = ck.cfg.model;

    const ajepa::WaveForm wave = ajepa::read_wav_file(o.wav);
    ajepa::MelSpectrogram mel = ajepa::log_mel(wave, ck.cfg.frontend);
    mel = ajepa::normalize(mel, ck.mel_mean, ck.mel_std);
    mel = ajepa::pad_or_crop(mel, static_cast<std::size_t>(ck.cfg.frontend.target_frames));
    const ajepa::PatchGrid grid = ajepa::patchify(mel, mc.patch_side);

    ajepa::Graph<float> g;
    const ajepa::BoundEncoder<float> bound = ajepa::bind_encoder(g, enc, false);
    ajepa::Tensor<float> patches =
        g.constant({grid.count(), mc.patch_dim()},
                   ajepa::detail::gather_patches<float>(
                       grid, ajepa::detail::all_indices(grid.count())));
    ajepa::Tensor<float> pos = g.constant(
        {mc.patch_count(), mc.dim},
        ajepa::sinusoidal_pos_embed<float>(mc.grid_rows, mc.grid_cols, mc.dim));
    ajepa::Tensor<float> repr = ajepa::encoder_forward(bound, patches, pos, mc.enc_heads);

    ajepa::MelSpectrogram dump;
    dump.rows = repr.rows();
    dump.cols = repr.cols();
    dump.values = repr.value();
    ajepa::write_mel_dump(o.out, dump);
    std::cout << "wrote " << dump.rows << " x " << dump.cols << " " << o.encoder
              << "-encoder representations to " << o.out << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"audio JEPA toolkit: synthetic data, pretraining, probing, diagnostics"};
    app.require_subcommand(1);

    GenDataOpts gen_o;
    CLI::App* gen = app.add_subcommand("gen-data", "synthesize the wav corpus and manifest");
    gen->add_option("--config", gen_o.config, "corpus config JSON")->check(CLI::ExistingFile);
    gen->add_option("--out", gen_o.out, "output directory")->required();

    PretrainOpts pre_o;
    CLI::App* pre = app.add_subcommand("pretrain", "run self-supervised pretraining");
    pre->add_option("--config", pre_o.config, "training config JSON")
        ->required()
        ->check(CLI::ExistingFile);
    pre->add_option("--resume", pre_o.resume, "checkpoint to resume from")
        ->check(CLI::ExistingFile);
    pre->add_option("--manifest", pre_o.manifest, "override the config manifest path");
    pre->add_option("--out", pre_o.out_dir, "override the config output directory");
    pre->add_option("--stop-after", pre_o.stop_after,
                    "stop after this many optimizer steps in this invocation");
    pre->add_flag("--quiet", pre_o.quiet, "suppress per-step logging");

    ProbeOpts probe_o;
    CLI::App* probe = app.add_subcommand("probe", "linear probe on frozen features");
    probe->add_option("--checkpoint", probe_o.checkpoint, "checkpoint file")
        ->required()
        ->check(CLI::ExistingFile);
    probe->add_option("--manifest", probe_o.manifest, "corpus manifest")
        ->required()
        ->check(CLI::ExistingFile);
    probe->add_option("--out", probe_o.out,
                      "per-clip prediction CSV path (JSON report lands next to it)")
        ->required();
    probe->add_option("--encoder", probe_o.encoder, "which encoder to probe")
        ->check(CLI::IsMember({"target", "online"}));

    MaskvizOpts mv_o;
    CLI::App* mv = app.add_subcommand("maskviz", "visualize mask draws and their statistics");
    mv->add_option("--strategy", mv_o.strategy, "unstructured | multiblock | time")
        ->required()
        ->check(CLI::IsMember({"unstructured", "multiblock", "time"}));
    mv->add_option("--rows", mv_o.rows, "grid rows")->required();
    mv->add_option("--cols", mv_o.cols, "grid columns")->required();
    mv->add_option("--seed", mv_o.seed, "master seed")->required();
    mv->add_option("--out", mv_o.out, "PGM path (stats CSV lands next to it)")->required();
    mv->add_option("--stats-out", mv_o.stats_out, "explicit CSV path");
    mv->add_option("--draws", mv_o.draws, "number of draws for the CSV");
    mv->add_option("--target-ratio", mv_o.target_ratio,
                   "target fraction for unstructured and time");
    mv->add_flag("--time-contiguous", mv_o.time_contiguous,
                 "time strategy picks one contiguous span");
    mv->add_option("--num-target-blocks", mv_o.mb.num_target_blocks, "multiblock target count");

    GradcheckOpts gc_o;
    CLI::App* gc = app.add_subcommand("gradcheck", "finite-difference gradient verification");
    gc->add_option("--ops", gc_o.ops, "comma list of op names (e2e selects the model check)");
    gc->add_option("--seed", gc_o.seed, "seed for inputs and coordinate sampling");

    FeatdumpOpts fd_o;
    CLI::App* fd = app.add_subcommand("featdump", "dump encoder representations for one wav");
    fd->add_option("--checkpoint", fd_o.checkpoint, "checkpoint file")
        ->required()
        ->check(CLI::ExistingFile);
    fd->add_option("--wav", fd_o.wav, "input wav")->required()->check(CLI::ExistingFile);
    fd->add_option("--out", fd_o.out, "output dump path")->required();
    fd->add_option("--encoder", fd_o.encoder, "which encoder to use")
        ->check(CLI::IsMember({"target", "online"}));

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        if (rc == 0) return 0;  // --help and friends
        std::cerr << app.help();
        return 1;
    }

    try {
        if (gen->parsed()) return run_gen_data(gen_o);
        if (pre->parsed()) return run_pretrain_cmd(pre_o);
        if (probe->parsed()) return run_probe_cmd(probe_o);
        if (mv->parsed()) return run_maskviz(mv_o);
        if (gc->parsed()) return run_gradcheck(gc_o);
        if (fd->parsed()) return run_featdump(fd_o);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
