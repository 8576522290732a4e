#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "demondnc/checkpoint.hpp"
#include "demondnc/config.hpp"
#include "demondnc/metrics.hpp"
#include "demondnc/train.hpp"

using namespace demondnc;

namespace {

ExperimentConfig tiny_cfg() {
    ExperimentConfig c;
    c.task.kind = TaskKind::Copy;
    c.task.bits = 3;
    c.task.len_min = 1;
    c.task.len_max = 2;
    c.dnc.N = 4;
    c.dnc.W = 4;
    c.dnc.R = 1;
    c.dnc.controller_hidden = 8;
    c.mine.hidden = 8;
    c.mine.norm_warmup = 8;
    c.demon_enabled = true;
    c.demon_hidden = 8;
    c.ppo.minibatch = 4;
    c.ppo.epochs = 2;
    c.steps = 4;
    c.batch_size = 2;
    c.snapshot_stride = 1;
    c.log_interval = 2;
    c.checkpoint_interval = 2;
    c.seed = 11;
    return c;
}

bool same_record(const MetricsRecord& a, const MetricsRecord& b) {
    return a.step == b.step && a.task_loss == b.task_loss && a.error == b.error && a.babi == b.babi &&
           a.mi_estimate == b.mi_estimate && a.demon_reward_mean == b.demon_reward_mean &&
           a.clip_fraction == b.clip_fraction && a.mean_ratio == b.mean_ratio;
}

std::vector<std::uint32_t> store_words(const ParameterStore<float>& store) {
    CheckpointFile file;
    pack_store(file, "s", store);
    std::vector<std::uint32_t> flat;
    for (const auto& rec : file.records) flat.insert(flat.end(), rec.words.begin(), rec.words.end());
    return flat;
}

std::string read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

struct TempDir {
    std::filesystem::path path;
    explicit TempDir(const std::string& name) : path(std::filesystem::temp_directory_path() / name) {
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
    std::string str() const { return path.string(); }
};

double bf_pearson(const std::vector<double>& x, const std::vector<double>& y) {
    const double n = static_cast<double>(x.size());
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < x.size(); ++i) mx += x[i], my += y[i];
    mx /= n;
    my /= n;
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    return sxy / std::sqrt(sxx * syy);
}

std::vector<double> bf_ranks(const std::vector<double>& v) {
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        double less = 0, eq = 0;
        for (std::size_t j = 0; j < v.size(); ++j) {
            if (v[j] < v[i]) ++less;
            if (v[j] == v[i]) ++eq;
        }
        r[i] = less + (eq + 1.0) / 2.0;
    }
    return r;
}

}  // namespace

TEST_CASE("config json round trip preserves every field") {
    ExperimentConfig c = tiny_cfg();
    c.babi_dir = "somewhere";
    c.babi_max_story_len = 77;
    c.babi_story_limit = 5;
    c.dnc.toggles.mask = false;
    c.dnc.toggles.sharpness = false;
    c.ppo.lam = 0.9;
    c.ppo.lr = 1e-4;
    c.mine.ema_decay = 0.95;
    c.dnc_lr_final = 1e-4;
    c.target_error = 0.03;
    c.out_dir = "runs/x";
    c.task.kind = TaskKind::RepeatCopy;
    c.task.repeat_max = 3;

    const std::string text = config_serialize(c);
    const ExperimentConfig back = config_parse(text);
    REQUIRE(back == c);
    REQUIRE(config_serialize(back) == text);

    ExperimentConfig d = c;
    REQUIRE(config_digest(d) == config_digest(c));
    d.seed += 1;
    REQUIRE(config_digest(d) != config_digest(c));
    REQUIRE(digest_hex(config_digest(c)).size() == 64);
}

TEST_CASE("config validation rejects bad values") {
    ExperimentConfig c = tiny_cfg();
    c.batch_size = 0;
    REQUIRE_THROWS_AS(c.validate(), ConfigError);
    c = tiny_cfg();
    c.snapshot_stride = 0;
    REQUIRE_THROWS_AS(c.validate(), ConfigError);
    c = tiny_cfg();
    c.ppo.clip_eps = 0.0;
    REQUIRE_THROWS_AS(c.validate(), ConfigError);
    c = tiny_cfg();
    c.mine.ema_decay = 1.0;
    REQUIRE_THROWS_AS(c.validate(), ConfigError);
    c = tiny_cfg();
    c.task.items_min = 1;
    c.task.kind = TaskKind::AssociativeRecall;
    REQUIRE_THROWS_AS(c.validate(), ConfigError);
    REQUIRE_THROWS_AS(config_parse("{not json"), ParseError);
}

TEST_CASE("checkpoint word packing round trips exactly") {
    const std::vector<float> vals{0.0f, -1.5f, 3.14159f, 1e-30f, -1e30f, 1.0f / 3.0f};
    REQUIRE(unpack_f32<float>(pack_f32(vals)) == vals);

    const std::uint64_t big = (std::uint64_t(1) << 63) + 123456789u;
    REQUIRE(unpack_u64(pack_u64(big)) == big);
    REQUIRE(unpack_u64(pack_u64(0)) == 0);

    const std::string text = "mt19937 state 123 456\n";
    REQUIRE(unpack_text(pack_text(text)) == text);
    REQUIRE(unpack_text(pack_text("")) == "");
}

TEST_CASE("checkpoint file writes and reads back identically") {
    TempDir tmp("ddnc_ckpt_test");
    CheckpointFile file;
    file.digest.fill(7);
    file.add("a.weights", {2, 3}, pack_f32<float>({1, 2, 3, 4, 5, 6}));
    file.add("b.step", {2}, pack_u64(42));
    const std::string path = tmp.str() + "/c.bin";
    checkpoint_write(file, path);

    const CheckpointFile back = checkpoint_read(path);
    REQUIRE(back.version == kCheckpointVersion);
    REQUIRE(back.digest == file.digest);
    REQUIRE(back.records.size() == 2);
    REQUIRE(back.records[0].name == "a.weights");
    REQUIRE(back.records[0].extents == std::vector<std::uint32_t>{2, 3});
    REQUIRE(back.records[0].words == file.records[0].words);
    REQUIRE(back.find("b.step").words == file.records[1].words);
    REQUIRE(back.has("a.weights"));
    REQUIRE_FALSE(back.has("missing"));
    REQUIRE_THROWS_AS(back.find("missing"), IoError);

    ConfigDigest other{};
    other.fill(9);
    REQUIRE_THROWS_AS(checkpoint_read(path, other), ConfigError);
    ConfigDigest same{};
    same.fill(7);
    REQUIRE_NOTHROW(checkpoint_read(path, same));

    std::ofstream bad(tmp.str() + "/bad.bin", std::ios::binary);
    bad << "XXXXYYYY";
    bad.close();
    REQUIRE_THROWS_AS(checkpoint_read(tmp.str() + "/bad.bin"), IoError);
}

TEST_CASE("metrics lines format and parse losslessly") {
    MetricsRecord r;
    r.step = 7;
    r.task_loss = 0.12345678901234567;
    r.error = 1.0 / 3.0;
    r.mi_estimate = -2.5e-13;
    r.demon_reward_mean = 1e17;
    r.clip_fraction = 0.25;
    r.mean_ratio = 1.0000000001;
    r.wall_clock = 12.5;

    const std::string line = metrics_line(r);
    REQUIRE(line.rfind("step=7 ", 0) == 0);
    REQUIRE(line.find("bit_error=") != std::string::npos);
    const MetricsRecord p = metrics_parse_line(line);
    REQUIRE(p.step == r.step);
    REQUIRE(p.task_loss == r.task_loss);
    REQUIRE(p.error == r.error);
    REQUIRE(p.babi == false);
    REQUIRE(p.mi_estimate == r.mi_estimate);
    REQUIRE(p.demon_reward_mean == r.demon_reward_mean);
    REQUIRE(p.clip_fraction == r.clip_fraction);
    REQUIRE(p.mean_ratio == r.mean_ratio);
    REQUIRE(p.wall_clock == r.wall_clock);

    r.babi = true;
    REQUIRE(metrics_line(r).find("babi_error=") != std::string::npos);
    REQUIRE(metrics_parse_line(metrics_line(r)).babi);

    REQUIRE_THROWS_AS(metrics_parse_line("task_loss=1"), ParseError);
    REQUIRE_THROWS_AS(metrics_parse_line("step=x task_loss=1"), ParseError);
}

TEST_CASE("metrics summary and file loading") {
    std::vector<MetricsRecord> recs(3);
    recs[0].step = 10;
    recs[0].error = 0.5;
    recs[0].task_loss = 1.0;
    recs[1].step = 20;
    recs[1].error = 0.25;
    recs[1].task_loss = 0.5;
    recs[2].step = 30;
    recs[2].error = 0.1;
    recs[2].task_loss = 0.2;

    const std::string summary = metrics_summary_line(recs);
    REQUIRE(summary.rfind("summary ", 0) == 0);
    REQUIRE(summary.find("records=3") != std::string::npos);
    REQUIRE(summary.find("final_step=30") != std::string::npos);

    TempDir tmp("ddnc_metrics_test");
    const std::string path = tmp.str() + "/m.txt";
    std::ofstream out(path);
    out << "# comment\n\n";
    for (const auto& rec : recs) out << metrics_line(rec) << "\n";
    out << summary << "\n";
    out.close();

    const std::vector<MetricsRecord> loaded = metrics_load(path);
    REQUIRE(loaded.size() == 3);
    REQUIRE(loaded[1].step == 20);
    REQUIRE(loaded[2].error == 0.1);

    const auto [mean, sd] = mean_std({1.0, 2.0, 3.0});
    REQUIRE(mean == Catch::Approx(2.0));
    REQUIRE(sd == Catch::Approx(1.0));
}

TEST_CASE("spearman matches a brute force oracle and handles ties") {
    const std::vector<double> inc{1, 2, 3, 4, 5};
    const std::vector<double> dec{9, 7, 5, 3, 1};
    REQUIRE(spearman(inc, inc) == Catch::Approx(1.0).margin(1e-15));
    REQUIRE(spearman(inc, dec) == Catch::Approx(-1.0).margin(1e-15));

    Rng rng(99);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> x(12), y(12);
        for (std::size_t i = 0; i < x.size(); ++i) {
            x[i] = static_cast<double>(rng.uniform_int(6));  // forces ties
            y[i] = rng.normal();
        }
        if (*std::max_element(x.begin(), x.end()) == *std::min_element(x.begin(), x.end())) continue;
        const double oracle = bf_pearson(bf_ranks(x), bf_ranks(y));
        REQUIRE(spearman(x, y) == Catch::Approx(oracle).margin(1e-12));
    }

    REQUIRE_THROWS_AS(spearman({1, 2}, {1, 2, 3}), ArgumentError);
    REQUIRE_THROWS_AS(spearman({1}, {1}), ArgumentError);
    REQUIRE_THROWS_AS(spearman({2, 2, 2}, {1, 2, 3}), DomainError);
}

TEST_CASE("snapshot schedule yields ceil((T-1)/stride) pairs") {
    REQUIRE(snapshot_indices(13, 4) == std::vector<std::size_t>{0, 4, 8, 12});
    REQUIRE(snapshot_indices(9, 4) == std::vector<std::size_t>{0, 4, 8});
    REQUIRE(snapshot_indices(1, 4) == std::vector<std::size_t>{0});
    REQUIRE(snapshot_indices(5, 1) == std::vector<std::size_t>{0, 1, 2, 3, 4});
    for (std::size_t steps = 1; steps <= 40; ++steps)
        for (std::size_t stride = 1; stride <= 7; ++stride) {
            const std::size_t pairs = snapshot_indices(steps, stride).size() - 1;
            REQUIRE(pairs == (steps - 1 + stride - 1) / stride);
        }
    REQUIRE_THROWS_AS(snapshot_indices(0, 1), ArgumentError);
    REQUIRE_THROWS_AS(snapshot_indices(3, 0), ArgumentError);
}

TEST_CASE("trainer runs a small copy task batch loop") {
    Trainer<float> tr(tiny_cfg());
    for (int i = 0; i < 3; ++i) {
        const MetricsRecord rec = tr.training_step(true);
        REQUIRE(rec.step == static_cast<std::uint64_t>(i + 1));
        REQUIRE(std::isfinite(rec.task_loss));
        REQUIRE(rec.error >= 0.0);
        REQUIRE(rec.error <= 1.0);
        REQUIRE(std::isfinite(rec.mi_estimate));
        REQUIRE(std::isfinite(rec.demon_reward_mean));
        REQUIRE(rec.clip_fraction >= 0.0);
        REQUIRE(rec.clip_fraction <= 1.0);
        REQUIRE_FALSE(rec.babi);
    }
    REQUIRE(tr.step() == 3);
}

TEST_CASE("two fresh trainers produce bit identical metrics") {
    Trainer<float> a(tiny_cfg());
    Trainer<float> b(tiny_cfg());
    for (int i = 0; i < 4; ++i) {
        const MetricsRecord ra = a.training_step(true);
        const MetricsRecord rb = b.training_step(true);
        REQUIRE(same_record(ra, rb));
    }
}

TEST_CASE("disabling the demon leaves mine and demon parameters untouched") {
    ExperimentConfig cfg = tiny_cfg();
    cfg.demon_enabled = false;
    Trainer<float> tr(cfg);
    const auto mine_before = store_words(tr.mine().params());
    const auto demon_before = store_words(tr.demon().params());
    const float ema_before = tr.mine().log_ema();
    const auto norm_count_before = tr.mine().norm().raw_count();

    for (int i = 0; i < 3; ++i) {
        const MetricsRecord rec = tr.training_step(true);
        REQUIRE(rec.mi_estimate == 0.0);
        REQUIRE(rec.demon_reward_mean == 0.0);
        REQUIRE(rec.clip_fraction == 0.0);
    }

    REQUIRE(store_words(tr.mine().params()) == mine_before);
    REQUIRE(store_words(tr.demon().params()) == demon_before);
    REQUIRE(tr.mine().log_ema() == ema_before);
    REQUIRE(tr.mine().norm().raw_count() == norm_count_before);
}

TEST_CASE("checkpoint resume reproduces the next step exactly") {
    TempDir tmp("ddnc_resume_test");
    const std::string path = tmp.str() + "/ck.bin";

    Trainer<float> a(tiny_cfg());
    for (int i = 0; i < 3; ++i) a.training_step(true);
    a.save_checkpoint(path);
    const MetricsRecord next_a = a.training_step(true);

    Trainer<float> b(tiny_cfg());
    b.load_checkpoint(path);
    REQUIRE(b.step() == 3);
    const MetricsRecord next_b = b.training_step(true);
    REQUIRE(same_record(next_a, next_b));

    // save -> load -> save is byte identical
    const std::string path2 = tmp.str() + "/ck2.bin";
    Trainer<float> c(tiny_cfg());
    c.load_checkpoint(path);
    c.save_checkpoint(path2);
    REQUIRE(read_file_bytes(path) == read_file_bytes(path2));

    // a different config refuses the checkpoint
    ExperimentConfig other = tiny_cfg();
    other.seed = 999;
    Trainer<float> d(other);
    REQUIRE_THROWS_AS(d.load_checkpoint(path), ConfigError);
}

TEST_CASE("train writes config, metrics, summary, and checkpoint to disk") {
    TempDir tmp("ddnc_train_dir");
    ExperimentConfig cfg = tiny_cfg();
    cfg.out_dir = tmp.str() + "/run";
    Trainer<float> tr(cfg);
    const std::vector<MetricsRecord> logged = tr.train();

    REQUIRE(logged.size() == 2);
    REQUIRE(logged[0].step == 2);
    REQUIRE(logged[1].step == 4);

    REQUIRE(config_load(cfg.out_dir + "/config.json") == cfg);
    const std::vector<MetricsRecord> loaded = metrics_load(cfg.out_dir + "/metrics.txt");
    REQUIRE(loaded.size() == 2);
    REQUIRE(same_record(loaded[0], logged[0]));
    REQUIRE(loaded[0].wall_clock == logged[0].wall_clock);

    const std::string text = read_file_bytes(cfg.out_dir + "/metrics.txt");
    REQUIRE(text.find("summary ") != std::string::npos);
    REQUIRE(std::filesystem::exists(cfg.out_dir + "/checkpoint.bin"));
}

TEST_CASE("train stops early once the target error is reached") {
    TempDir tmp("ddnc_early_stop");
    ExperimentConfig cfg = tiny_cfg();
    cfg.steps = 50;
    cfg.target_error = 0.999;  // any interval satisfies this
    cfg.out_dir = tmp.str() + "/run";
    Trainer<float> tr(cfg);
    const std::vector<MetricsRecord> logged = tr.train();
    REQUIRE(tr.step() == 2);  // the gate only fires at log steps (log_interval = 2)
    REQUIRE(logged.size() == 1);
    REQUIRE(logged[0].step == 2);

    // logged error/loss are means over the interval, not the last batch
    ExperimentConfig ref = cfg;
    ref.out_dir.clear();
    Trainer<float> two(ref);
    const MetricsRecord r1 = two.training_step(false);
    const MetricsRecord r2 = two.training_step(true);
    REQUIRE(logged[0].error == (r1.error + r2.error) / 2.0);
    REQUIRE(logged[0].task_loss == (r1.task_loss + r2.task_loss) / 2.0);
}

TEST_CASE("a final learning rate decays the optimizer lr geometrically") {
    ExperimentConfig cfg = tiny_cfg();
    cfg.steps = 4;
    cfg.dnc_lr = 1e-2;
    cfg.dnc_lr_final = 1e-4;
    Trainer<float> tr(cfg);
    std::vector<float> seen;
    for (int i = 0; i < 4; ++i) {
        tr.training_step(false);
        seen.push_back(tr.dnc_adam().lr);
    }
    for (int i = 0; i < 4; ++i) {
        const float want =
            static_cast<float>(1e-2 * std::pow(1e-4 / 1e-2, static_cast<double>(i) / 4.0));
        REQUIRE(seen[static_cast<std::size_t>(i)] == want);
    }
    REQUIRE(seen[0] == 1e-2f);
    REQUIRE(seen[3] < seen[0]);
}

TEST_CASE("evaluation is deterministic and near chance before training") {
    ExperimentConfig cfg = tiny_cfg();
    cfg.task.bits = 8;
    cfg.task.len_min = 4;
    cfg.task.len_max = 4;
    Trainer<float> tr(cfg);

    const EvalResult<float> r1 = tr.evaluate(64, 303);
    const EvalResult<float> r2 = tr.evaluate(64, 303);
    REQUIRE(r1.mean_error == r2.mean_error);
    REQUIRE(r1.std_error == r2.std_error);
    REQUIRE(r1.n == 64);
    REQUIRE_FALSE(r1.babi);
    REQUIRE(r1.mean_error == Catch::Approx(0.5).margin(0.05));

    const EvalResult<float> r3 = tr.evaluate(64, 304);
    REQUIRE(r3.mean_error != r1.mean_error);

    REQUIRE_THROWS_AS(tr.evaluate(0, 1), ArgumentError);
}

TEST_CASE("trainer drives the bAbI pipeline end to end") {
    TempDir tmp("ddnc_babi_train");
    {
        std::ofstream f(tmp.path / "qa1_train.txt");
        f << "1 Mary went home.\n";
        f << "2 John moved north.\n";
        f << "3 Where is Mary?\thome\t1\n";
        f << "1 Sam walked east.\n";
        f << "2 Where is Sam?\teast\t1\n";
        f << "1 Ann ran west.\n";
        f << "2 Where is Ann?\twest\t1\n";
    }

    ExperimentConfig cfg = tiny_cfg();
    cfg.babi_dir = tmp.str();
    cfg.babi_max_story_len = 64;
    cfg.babi_story_limit = 2;
    cfg.steps = 2;
    Trainer<float> tr(cfg);

    const MetricsRecord rec = tr.training_step(true);
    REQUIRE(rec.babi);
    REQUIRE(std::isfinite(rec.task_loss));
    REQUIRE(rec.error >= 0.0);
    REQUIRE(rec.error <= 1.0);

    const EvalResult<float> ev = tr.evaluate(10, 1);
    REQUIRE(ev.babi);
    REQUIRE(ev.n == 2);  // the story limit kept two stories
    REQUIRE(ev.mean_error >= 0.0);

    // the same corpus without the limit sees all three stories
    ExperimentConfig full = cfg;
    full.babi_story_limit = 0;
    Trainer<float> tr_full(full);
    REQUIRE(tr_full.evaluate(10, 1).n == 3);
}

TEST_CASE("trainer rejects mismatched dnc dims") {
    ExperimentConfig cfg = tiny_cfg();
    cfg.dnc.input_dim = 99;
    REQUIRE_THROWS_AS(Trainer<float>(cfg), ConfigError);
}
