// End-to-end tour on a miniature setup: synthesize a corpus, pretrain briefly,
// probe the frozen encoder, and sketch one mask draw. Finishes in about a
// minute on one core; artifacts land under ./quickstart_out.

#include <cstdio>
#include <filesystem>
#include <string>

#include "ajepa/mask.hpp"
#include "ajepa/probe.hpp"
#include "ajepa/synth.hpp"
#include "ajepa/train.hpp"

int main() {
    namespace fs = std::filesystem;
    const std::string root = "quickstart_out";
    fs::create_directories(root);

    ajepa::CorpusConfig corpus;
    corpus.pretrain_clips = 48;
    corpus.probe_train_clips = 32;
    corpus.probe_test_clips = 32;
    corpus.seed = 7;
    const std::string data_dir = root + "/data";
    const auto entries = ajepa::generate_corpus(data_dir, corpus);
    const std::string manifest = data_dir + "/manifest.jsonl";
    std::printf("corpus: %zu clips under %s\n", entries.size(), data_dir.c_str());

    ajepa::TrainConfig cfg;
    cfg.seed = 7;
    cfg.frontend.n_mels = 40;
    cfg.frontend.target_frames = 64;
    cfg.frontend.duration_s = 0.7;
    cfg.model.patch_side = 8;
    cfg.model.dim = 32;
    cfg.model.enc_layers = 2;
    cfg.model.pred_layers = 1;
    cfg.batch_size = 8;
    cfg.total_steps = 40;
    cfg.checkpoint_every = 40;
    cfg.log_every = 10;
    cfg.optim.lr = 1e-3;

    ajepa::PretrainOptions run;
    run.manifest_path = manifest;
    run.out_dir = root + "/run";
    const ajepa::PretrainResult res = ajepa::run_pretraining(cfg, run);
    std::printf("pretraining: stopped at step %zu, loss %.4f\n", res.final_step, res.final_loss);

    const ajepa::Checkpoint ck = ajepa::load_checkpoint(res.last_checkpoint);
    const ajepa::MelDataset train_ds = ajepa::load_mel_dataset(
        manifest, ajepa::DatasetSelect::probe_train, ck.cfg.frontend, &ck.mel_mean, &ck.mel_std);
    const ajepa::MelDataset test_ds = ajepa::load_mel_dataset(
        manifest, ajepa::DatasetSelect::probe_test, ck.cfg.frontend, &ck.mel_mean, &ck.mel_std);
    const auto train_f = ajepa::extract_features(ck.target_encoder, ck.cfg.model, train_ds,
                                                 ck.cfg.frontend.target_frames);
    const auto test_f = ajepa::extract_features(ck.target_encoder, ck.cfg.model, test_ds,
                                                ck.cfg.frontend.target_frames);
    const ajepa::ProbeModel probe = ajepa::train_probe(train_f, 4);
    std::printf("probe: train acc %.3f, test acc %.3f (4 classes, %zu-d features)\n",
                ajepa::evaluate_probe(probe, train_f), ajepa::evaluate_probe(probe, test_f),
                train_f.dim);
    const ajepa::CollapseMetrics cm = ajepa::collapse_metrics(test_f);
    std::printf("collapse check: mean per-dim std %.4f, effective rank %.2f\n", cm.mean_std,
                cm.effective_rank);

    ajepa::Rng rng(7);
    const std::size_t rows = ck.cfg.model.grid_rows, cols = ck.cfg.model.grid_cols;
    const ajepa::MaskSpec mask = ajepa::sample_multiblock(rows, cols, {}, rng);
    std::printf("one multiblock draw on the %zux%zu grid (#.target, o context, . neither):\n",
                rows, cols);
    std::string line;
    for (std::size_t r = 0; r < rows; ++r) {
        line.clear();
        for (std::size_t c = 0; c < cols; ++c) {
            const std::size_t j = r * cols + c;
            const bool tgt = std::binary_search(mask.target.begin(), mask.target.end(), j);
            const bool ctx = std::binary_search(mask.context.begin(), mask.context.end(), j);
            line += tgt ? '#' : (ctx ? 'o' : '.');
        }
        std::printf("  %s\n", line.c_str());
    }
    return 0;
}
